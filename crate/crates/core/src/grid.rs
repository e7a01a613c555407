//! Polar bird's-eye-view grid: point to cell binning, the bidirectional
//! voxel map, voxel to point scatter and instance target encoding.
//!
//! Rings index range, sectors index heading angle, layers index height.
//! The sector axis is circular everywhere.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ClassId, ClassTaxonomy, PanopticLabelSet, PointCloud};
use crate::num::{circular_diff, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig<T> {
    /// Range bins (H).
    pub rings: usize,
    /// Angular bins (W).
    pub sectors: usize,
    /// Height bins (Z).
    pub layers: usize,
    pub r_min: T,
    pub r_max: T,
    pub z_min: T,
    pub z_max: T,
}

impl<T: Real> Default for GridConfig<T> {
    fn default() -> Self {
        Self {
            rings: 480,
            sectors: 360,
            layers: 32,
            r_min: T::lit(3.0),
            r_max: T::lit(50.0),
            z_min: T::lit(-3.0),
            z_max: T::lit(1.5),
        }
    }
}

impl<T: Real> GridConfig<T> {
    pub fn check(&self) -> Result<()> {
        if self.rings == 0 || self.sectors == 0 || self.layers == 0 {
            return Err(Error::Contract(format!(
                "grid dimensions must be positive, got {}x{}x{}",
                self.rings, self.sectors, self.layers
            )));
        }
        if !(self.r_min < self.r_max) || !(self.z_min < self.z_max) {
            return Err(Error::Contract("grid ranges must be increasing".into()));
        }
        Ok(())
    }

    pub fn bev_len(&self) -> usize {
        self.rings * self.sectors
    }

    pub fn voxel_len(&self) -> usize {
        self.rings * self.sectors * self.layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellIndex {
    pub ring: usize,
    pub sector: usize,
    pub layer: usize,
}

impl CellIndex {
    pub fn linear<T>(&self, cfg: &GridConfig<T>) -> usize {
        (self.ring * cfg.sectors + self.sector) * cfg.layers + self.layer
    }

    pub fn bev<T>(&self, cfg: &GridConfig<T>) -> usize {
        self.ring * cfg.sectors + self.sector
    }

    pub fn from_linear<T>(linear: usize, cfg: &GridConfig<T>) -> Self {
        let layer = linear % cfg.layers;
        let bev = linear / cfg.layers;
        Self {
            ring: bev / cfg.sectors,
            sector: bev % cfg.sectors,
            layer,
        }
    }
}

/// Cartesian to cylindrical coordinates, `theta` in `[0, 2π)`.
pub fn to_polar<T: Real>(x: T, y: T, z: T) -> (T, T, T) {
    let r = x.hypot(y);
    let mut theta = y.atan2(x);
    if theta < T::zero() {
        theta += T::TAU();
    }
    if theta >= T::TAU() {
        theta = T::zero();
    }
    (r, theta, z)
}

fn bin<T: Real>(v: T, lo: T, hi: T, n: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let idx = ((v - lo) / (hi - lo) * T::from_count(n)).floor();
    Some(idx.to_usize().unwrap_or(0).min(n - 1))
}

/// Bins polar coordinates; `theta` may be any finite angle.
pub fn cell_of_polar<T: Real>(r: T, theta: T, z: T, cfg: &GridConfig<T>) -> Option<CellIndex> {
    let ring = bin(r, cfg.r_min, cfg.r_max, cfg.rings)?;
    let layer = bin(z, cfg.z_min, cfg.z_max, cfg.layers)?;
    if !theta.is_finite() {
        return None;
    }
    let mut wrapped = theta % T::TAU();
    if wrapped < T::zero() {
        wrapped += T::TAU();
    }
    if wrapped >= T::TAU() {
        wrapped = T::zero();
    }
    let sector = (wrapped / T::TAU() * T::from_count(cfg.sectors))
        .floor()
        .to_usize()
        .unwrap_or(0)
        % cfg.sectors;
    Some(CellIndex { ring, sector, layer })
}

/// `None` marks an out-of-range point. Upper bounds clamp into the last bin.
pub fn cell_of<T: Real>(point: [T; 3], cfg: &GridConfig<T>) -> Option<CellIndex> {
    let (r, theta, z) = to_polar(point[0], point[1], point[2]);
    cell_of_polar(r, theta, z, cfg)
}

/// Bidirectional point ↔ occupied-voxel map.
///
/// Occupied cells are stored in ascending linear order and their point lists
/// in ascending point index, so the layout is a pure function of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelIndexMap {
    point_slot: Vec<Option<usize>>,
    cells: Vec<usize>,
    starts: Vec<usize>,
    members: Vec<usize>,
    rings: usize,
    sectors: usize,
    layers: usize,
}

impl VoxelIndexMap {
    pub fn num_points(&self) -> usize {
        self.point_slot.len()
    }

    pub fn occupied(&self) -> usize {
        self.cells.len()
    }

    pub fn in_range(&self) -> usize {
        self.members.len()
    }

    /// Slot (row in per-cell fields) of point `i`, `None` when out of range.
    pub fn slot_of_point(&self, i: usize) -> Option<usize> {
        self.point_slot[i]
    }

    pub fn points_in(&self, slot: usize) -> &[usize] {
        &self.members[self.starts[slot]..self.starts[slot + 1]]
    }

    pub fn linear_of_slot(&self, slot: usize) -> usize {
        self.cells[slot]
    }

    pub fn cell_of_slot(&self, slot: usize) -> CellIndex {
        let linear = self.cells[slot];
        let layer = linear % self.layers;
        let bev = linear / self.layers;
        CellIndex {
            ring: bev / self.sectors,
            sector: bev % self.sectors,
            layer,
        }
    }

    pub fn bev_of_slot(&self, slot: usize) -> usize {
        self.cells[slot] / self.layers
    }

    pub fn slot_of_cell(&self, linear: usize) -> Option<usize> {
        self.cells.binary_search(&linear).ok()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.rings, self.sectors, self.layers)
    }

    /// Checks both directions of the map against each other.
    pub fn is_consistent(&self) -> bool {
        let mut seen = vec![false; self.point_slot.len()];
        for slot in 0..self.cells.len() {
            for &p in self.points_in(slot) {
                if p >= seen.len() || seen[p] || self.point_slot[p] != Some(slot) {
                    return false;
                }
                seen[p] = true;
            }
        }
        self.point_slot.iter().zip(&seen).all(|(slot, &s)| slot.is_some() == s)
            && self.cells.windows(2).all(|w| w[0] < w[1])
    }
}

pub fn voxelize<T: Real>(cloud: &PointCloud<T>, cfg: &GridConfig<T>) -> VoxelIndexMap {
    let mut keyed: Vec<(usize, usize)> = (0..cloud.len())
        .filter_map(|i| cell_of(cloud.position(i), cfg).map(|c| (c.linear(cfg), i)))
        .collect();
    keyed.sort_unstable();

    let mut point_slot = vec![None; cloud.len()];
    let mut cells = Vec::new();
    let mut starts = Vec::new();
    let mut members = Vec::with_capacity(keyed.len());
    for (pos, &(linear, i)) in keyed.iter().enumerate() {
        if cells.last() != Some(&linear) {
            cells.push(linear);
            starts.push(pos);
        }
        point_slot[i] = Some(cells.len() - 1);
        members.push(i);
    }
    starts.push(members.len());
    VoxelIndexMap {
        point_slot,
        cells,
        starts,
        members,
        rings: cfg.rings,
        sectors: cfg.sectors,
        layers: cfg.layers,
    }
}

/// Copies each occupied cell's value to its points; out-of-range points get `fill`.
pub fn scatter_to_points<V: Clone>(field: &[V], map: &VoxelIndexMap, fill: V) -> Result<Vec<V>> {
    if field.len() < map.occupied() {
        return Err(Error::Integrity(format!(
            "cell field has {} values for {} occupied cells",
            field.len(),
            map.occupied()
        )));
    }
    Ok(map
        .point_slot
        .iter()
        .map(|s| s.map_or_else(|| fill.clone(), |s| field[s].clone()))
        .collect())
}

/// Row-valued variant of [`scatter_to_points`] for `width`-wide rows.
pub fn scatter_rows<V: Copy>(field: &[V], width: usize, map: &VoxelIndexMap, fill: &[V]) -> Result<Vec<V>> {
    if field.len() < map.occupied() * width || fill.len() != width {
        return Err(Error::Integrity(format!(
            "row field has {} values for {} occupied cells of width {width}",
            field.len(),
            map.occupied()
        )));
    }
    let mut out = Vec::with_capacity(map.num_points() * width);
    for s in &map.point_slot {
        match s {
            Some(s) => out.extend_from_slice(&field[s * width..(s + 1) * width]),
            None => out.extend_from_slice(fill),
        }
    }
    Ok(out)
}

/// Per-cell value of the lowest-index point in each occupied cell.
pub fn gather_first<V: Clone>(per_point: &[V], map: &VoxelIndexMap) -> Vec<V> {
    (0..map.occupied())
        .map(|s| per_point[map.points_in(s)[0]].clone())
        .collect()
}

/// Ground-truth center heatmap and offsets on the BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTargets<T> {
    pub rings: usize,
    pub sectors: usize,
    /// `rings × sectors`, row-major.
    pub heatmap: Vec<T>,
    /// Offset from each cell to its instance center, `[d_ring, d_sector]` in grid units.
    pub offsets: Vec<[T; 2]>,
    pub valid_mask: Vec<bool>,
    /// `(class, instance, ring, sector)` of every encoded center.
    pub centers: Vec<(ClassId, u32, usize, usize)>,
    /// Instances with no in-range points.
    pub skipped: usize,
}

/// Weighted centroid of BEV cells; the sector coordinate uses the circular mean.
/// Rounds to the nearest cell, halves toward the lower index.
pub fn cell_centroid<T: Real>(cells: &[(usize, usize, usize)], sectors: usize) -> (usize, usize) {
    let mut w_sum = T::zero();
    let mut ring_sum = T::zero();
    let mut sin_sum = T::zero();
    let mut cos_sum = T::zero();
    let step = T::TAU() / T::from_count(sectors);
    for &(ring, sector, w) in cells {
        let w = T::from_count(w);
        w_sum += w;
        ring_sum += w * T::from_count(ring);
        let phi = step * T::from_count(sector);
        sin_sum += w * phi.sin();
        cos_sum += w * phi.cos();
    }
    let round_half_down = |m: T| (m - T::lit(0.5)).ceil();
    let ring = round_half_down(ring_sum / w_sum).max(T::zero());
    let mut phi = sin_sum.atan2(cos_sum);
    if phi < T::zero() {
        phi += T::TAU();
    }
    let sector_mean = phi / step;
    let sector = round_half_down(sector_mean)
        .to_i64()
        .unwrap_or(0)
        .rem_euclid(sectors as i64) as usize;
    (ring.to_usize().unwrap_or(0), sector)
}

pub fn encode_instance_targets<T: Real>(
    labels: &PanopticLabelSet,
    map: &VoxelIndexMap,
    cfg: &GridConfig<T>,
    sigma: T,
    taxonomy: &ClassTaxonomy,
) -> InstanceTargets<T> {
    let (h, w) = (cfg.rings, cfg.sectors);
    // (class, instance) -> bev cell -> point count
    let mut instances: BTreeMap<(ClassId, u32), BTreeMap<usize, usize>> = BTreeMap::new();
    let mut all_ids: BTreeMap<(ClassId, u32), ()> = BTreeMap::new();
    for i in 0..labels.len() {
        let (class, inst) = (labels.semantic[i], labels.instance[i]);
        if inst == 0 || !taxonomy.is_thing(class) {
            continue;
        }
        all_ids.insert((class, inst), ());
        if let Some(slot) = map.slot_of_point(i) {
            *instances
                .entry((class, inst))
                .or_default()
                .entry(map.bev_of_slot(slot))
                .or_insert(0) += 1;
        }
    }

    let mut heatmap = vec![T::zero(); h * w];
    let mut offsets = vec![[T::zero(); 2]; h * w];
    let mut valid_mask = vec![false; h * w];
    let mut owner: Vec<Option<((ClassId, u32), usize)>> = vec![None; h * w];
    let mut centers = Vec::with_capacity(instances.len());
    let two_sigma2 = T::lit(2.0) * sigma * sigma;

    for (&key, cells) in &instances {
        let weighted: Vec<_> = cells.iter().map(|(&b, &n)| (b / w, b % w, n)).collect();
        let (cr, cs) = cell_centroid::<T>(&weighted, w);
        let (cr_t, cs_t) = (T::from_count(cr), T::from_count(cs));
        centers.push((key.0, key.1, cr, cs));

        for ring in 0..h {
            let dr = cr_t - T::from_count(ring);
            for sector in 0..w {
                let ds = circular_diff(cs_t, T::from_count(sector), w);
                let v = (-(dr * dr + ds * ds) / two_sigma2).exp();
                let cell = &mut heatmap[ring * w + sector];
                if v > *cell {
                    *cell = v;
                }
            }
        }

        for (&bev, &count) in cells {
            let (ring, sector) = (bev / w, bev % w);
            valid_mask[bev] = true;
            let take = match owner[bev] {
                None => true,
                Some((_, prev)) => count > prev,
            };
            if take {
                owner[bev] = Some((key, count));
                offsets[bev] = [
                    cr_t - T::from_count(ring),
                    circular_diff(cs_t, T::from_count(sector), w),
                ];
            }
        }
    }

    InstanceTargets {
        rings: h,
        sectors: w,
        heatmap,
        offsets,
        valid_mask,
        skipped: all_ids.len() - instances.len(),
        centers,
    }
}
