//! Panoptic fusion: voxel semantics plus BEV center heatmap and offsets become
//! per-point panoptic labels.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::evidential::predict;
use crate::grid::VoxelIndexMap;
use crate::model::{ClassId, ClassTaxonomy, DirichletField, PanopticLabelSet};
use crate::num::{argmax, circular_diff, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig<T> {
    /// Odd window size in cells.
    pub kernel: usize,
    pub threshold: T,
    pub top_k: usize,
}

impl<T: Real> Default for NmsConfig<T> {
    fn default() -> Self {
        Self {
            kernel: 5,
            threshold: T::lit(0.1),
            top_k: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center<T> {
    pub ring: usize,
    pub sector: usize,
    pub score: T,
}

/// At most `top_k` centers sorted by descending score, then `(ring, sector)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CenterSet<T> {
    pub centers: Vec<Center<T>>,
}

impl<T> CenterSet<T> {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Keeps cells that are the maximum of their window (rings clipped, sectors
/// circular) and exceed the threshold. Among equal values in a window only the
/// lexicographically first `(ring, sector)` survives.
pub fn nms_centers<T: Real>(heatmap: &[T], rings: usize, sectors: usize, cfg: &NmsConfig<T>) -> CenterSet<T> {
    assert_eq!(heatmap.len(), rings * sectors, "heatmap shape");
    let half = (cfg.kernel / 2) as isize;
    let mut centers = Vec::new();
    for ring in 0..rings {
        'cell: for sector in 0..sectors {
            let idx = ring * sectors + sector;
            let v = heatmap[idx];
            if !(v > cfg.threshold) {
                continue;
            }
            for dr in -half..=half {
                let r = ring as isize + dr;
                if r < 0 || r >= rings as isize {
                    continue;
                }
                for ds in -half..=half {
                    let s = (sector as isize + ds).rem_euclid(sectors as isize) as usize;
                    let n = r as usize * sectors + s;
                    if n == idx {
                        continue;
                    }
                    let other = heatmap[n];
                    if other > v || (other == v && n < idx) {
                        continue 'cell;
                    }
                }
            }
            centers.push(Center { ring, sector, score: v });
        }
    }
    // cells were visited in lexicographic order, so a stable sort settles ties
    centers.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite heatmap"));
    centers.truncate(cfg.top_k);
    CenterSet { centers }
}

/// BEV cells where any height layer holds a thing class. `voxel_classes` is
/// indexed like [`CellIndex::linear`](crate::grid::CellIndex::linear).
pub fn foreground_mask(
    voxel_classes: &[ClassId],
    rings: usize,
    sectors: usize,
    layers: usize,
    taxonomy: &ClassTaxonomy,
) -> Vec<bool> {
    assert_eq!(voxel_classes.len(), rings * sectors * layers, "voxel grid shape");
    voxel_classes
        .chunks_exact(layers)
        .map(|column| column.iter().any(|&c| taxonomy.is_thing(c)))
        .collect()
}

/// Instance ids per BEV cell: each masked cell is shifted by its offset and
/// takes `1 + index` of the nearest center. Returns the ids and the number of
/// masked cells left at 0 because no center exists.
pub fn assign_instances<T: Real>(
    mask: &[bool],
    offsets: &[[T; 2]],
    rings: usize,
    sectors: usize,
    centers: &CenterSet<T>,
) -> (Vec<u32>, usize) {
    assert_eq!(mask.len(), rings * sectors, "mask shape");
    assert_eq!(offsets.len(), rings * sectors, "offset shape");
    let mut ids = vec![0u32; mask.len()];
    let mut unassigned = 0;
    for (cell, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        if centers.is_empty() {
            unassigned += 1;
            continue;
        }
        let ring = T::from_count(cell / sectors) + offsets[cell][0];
        let sector = T::from_count(cell % sectors) + offsets[cell][1];
        let mut best = (T::infinity(), 0usize);
        for (j, c) in centers.centers.iter().enumerate() {
            let dr = ring - T::from_count(c.ring);
            let ds = circular_diff(sector, T::from_count(c.sector), sectors);
            let d = dr * dr + ds * ds;
            if d < best.0 {
                best = (d, j);
            }
        }
        ids[cell] = best.1 as u32 + 1;
    }
    (ids, unassigned)
}

/// Class per instance group: the thing class with the largest summed
/// probability over the group's points, ties to the lower class id.
pub fn majority_vote<T: Real>(
    point_probs: &[T],
    k: usize,
    groups: &[u32],
    taxonomy: &ClassTaxonomy,
) -> BTreeMap<u32, ClassId> {
    assert_eq!(point_probs.len(), groups.len() * k, "probability shape");
    let things: Vec<usize> = taxonomy
        .thing_classes()
        .map(|c| c as usize)
        .filter(|&c| c < k)
        .collect();
    let mut sums: BTreeMap<u32, Vec<T>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        if g == 0 {
            continue;
        }
        let acc = sums.entry(g).or_insert_with(|| vec![T::zero(); things.len()]);
        let row = &point_probs[i * k..(i + 1) * k];
        for (slot, &c) in things.iter().enumerate() {
            acc[slot] += row[c];
        }
    }
    sums.into_iter()
        .filter(|(_, s)| !s.is_empty())
        .map(|(g, s)| (g, things[argmax(&s)] as ClassId))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedOutput<T> {
    pub labels: PanopticLabelSet,
    pub point_alpha: DirichletField<T>,
    pub uncertainty: Vec<T>,
    pub centers: CenterSet<T>,
    /// Foreground cells that got no instance because no center was found.
    pub unassigned_cells: usize,
}

/// Full fusion of one scan.
///
/// `voxel_alpha` holds one row per occupied voxel in `map` slot order.
/// Out-of-range points come out as ignore with `α = 1` (so `u = 1`).
/// Instance ids in the output are contiguous from 1.
pub fn fuse<T: Real>(
    voxel_alpha: &DirichletField<T>,
    heatmap: &[T],
    offsets: &[[T; 2]],
    map: &VoxelIndexMap,
    nms: &NmsConfig<T>,
    taxonomy: &ClassTaxonomy,
) -> Result<FusedOutput<T>> {
    let (rings, sectors, _) = map.dims();
    if voxel_alpha.len() != map.occupied() {
        return Err(Error::Integrity(format!(
            "{} voxel predictions for {} occupied voxels",
            voxel_alpha.len(),
            map.occupied()
        )));
    }
    if heatmap.len() != rings * sectors || offsets.len() != rings * sectors {
        return Err(Error::Integrity(format!(
            "BEV maps have {} / {} cells, grid has {}",
            heatmap.len(),
            offsets.len(),
            rings * sectors
        )));
    }
    let k = voxel_alpha.num_classes();
    if k != taxonomy.num_classes() {
        return Err(Error::Integrity(format!(
            "predictions have K = {k}, taxonomy has {}",
            taxonomy.num_classes()
        )));
    }

    let voxel_pred = predict(voxel_alpha);
    let voxel_class = voxel_pred.classes();

    let mut mask = vec![false; rings * sectors];
    for (slot, &c) in voxel_class.iter().enumerate() {
        if taxonomy.is_thing(c) {
            mask[map.bev_of_slot(slot)] = true;
        }
    }
    let centers = nms_centers(heatmap, rings, sectors, nms);
    let (bev_ids, unassigned_cells) = assign_instances(&mask, offsets, rings, sectors, &centers);

    let n = map.num_points();
    let mut semantic = vec![taxonomy.ignore_id(); n];
    let mut instance = vec![0u32; n];
    let mut alpha = Vec::with_capacity(n * k);
    let mut uncertainty = vec![T::one(); n];
    let mut probs = vec![T::zero(); n * k];
    for i in 0..n {
        match map.slot_of_point(i) {
            Some(slot) => {
                let c = voxel_class[slot];
                semantic[i] = c;
                if taxonomy.is_thing(c) {
                    instance[i] = bev_ids[map.bev_of_slot(slot)];
                }
                alpha.extend_from_slice(voxel_alpha.row(slot));
                uncertainty[i] = voxel_pred.u[slot];
                probs[i * k..(i + 1) * k].copy_from_slice(voxel_pred.row(slot));
            }
            None => alpha.extend(std::iter::repeat_n(T::one(), k)),
        }
    }

    // contiguous ids in order of the original center index
    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    for &id in instance.iter().filter(|&&id| id != 0) {
        remap.insert(id, 0);
    }
    for (next, v) in remap.values_mut().enumerate() {
        *v = next as u32 + 1;
    }
    for id in instance.iter_mut().filter(|id| **id != 0) {
        *id = remap[id];
    }

    let votes = majority_vote(&probs, k, &instance, taxonomy);
    for (c, &id) in semantic.iter_mut().zip(&instance) {
        if let Some(&v) = votes.get(&id) {
            *c = v;
        }
    }

    Ok(FusedOutput {
        labels: PanopticLabelSet { semantic, instance },
        point_alpha: DirichletField::new(k, alpha)?,
        uncertainty,
        centers,
        unassigned_cells,
    })
}
