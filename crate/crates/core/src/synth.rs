//! Deterministic synthetic scenes and predictions with known ground truth.
//!
//! Coordinates are rounded to `f32` so scenes survive the `.bin` format
//! unchanged.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::model::{ClassId, ClassTaxonomy, DirichletField, PanopticLabelSet, PointCloud};

const GROUND_Z: f64 = -1.73;
const OBJECT_BASE_Z: f64 = -1.4;
const SIDEWALK_Z: f64 = -1.6;

/// Scene layout. Distances in meters; classes are looked up by name in the
/// taxonomy passed to [`gen_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub r_min: f64,
    pub r_max: f64,
    pub road_radius: f64,
    pub road_points: usize,
    pub sidewalk_sectors: usize,
    pub sidewalk_width: f64,
    pub sidewalk_points: usize,
    pub cars: usize,
    pub car_points: usize,
    pub car_length: (f64, f64),
    pub car_width: (f64, f64),
    pub car_height: (f64, f64),
    pub persons: usize,
    pub person_points: usize,
    pub person_height: (f64, f64),
    pub poles: usize,
    pub trunks: usize,
    pub line_points: usize,
    pub signs: usize,
    pub sign_points: usize,
    /// Adds a car centered on the `+x` axis, across the angular wrap.
    pub straddle_car: bool,
    /// Vegetation points placed outside `[r_min, r_max]`.
    pub stragglers: usize,
    /// Minimum clearance between object footprints.
    pub separation: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            r_min: 3.0,
            r_max: 50.0,
            road_radius: 30.0,
            road_points: 8000,
            sidewalk_sectors: 4,
            sidewalk_width: 4.0,
            sidewalk_points: 2000,
            cars: 4,
            car_points: 400,
            car_length: (3.6, 4.8),
            car_width: (1.6, 2.0),
            car_height: (1.4, 1.7),
            persons: 3,
            person_points: 150,
            person_height: (1.6, 1.9),
            poles: 3,
            trunks: 2,
            line_points: 60,
            signs: 2,
            sign_points: 50,
            straddle_car: false,
            stragglers: 0,
            separation: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn check(&self) -> Result<()> {
        let ok = self.r_min > 0.0
            && self.r_max > self.r_min
            && self.road_radius > self.r_min + 4.0
            && self.road_radius + 1.0 + self.sidewalk_width < self.r_max
            && self.separation >= 0.0
            && [self.car_length, self.car_width, self.car_height, self.person_height]
                .iter()
                .all(|&(a, b)| a > 0.0 && b >= a);
        if !ok {
            return Err(Error::Contract("inconsistent scene extents".into()));
        }
        Ok(())
    }
}

fn class(taxonomy: &ClassTaxonomy, name: &str) -> Result<ClassId> {
    taxonomy
        .class_by_name(name)
        .ok_or_else(|| Error::Contract(format!("taxonomy has no class named {name}")))
}

fn range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

struct Builder {
    points: Vec<[f32; 4]>,
    semantic: Vec<ClassId>,
    instance: Vec<u32>,
}

impl Builder {
    fn push(&mut self, x: f64, y: f64, z: f64, remission: f64, class: ClassId, instance: u32) {
        self.points.push([x as f32, y as f32, z as f32, remission as f32]);
        self.semantic.push(class);
        self.instance.push(instance);
    }
}

/// Footprints already placed, as `(x, y, radius)`.
struct Placer {
    taken: Vec<(f64, f64, f64)>,
    separation: f64,
}

impl Placer {
    /// Rejection-samples a center at radius `[lo, hi]` whose footprint keeps
    /// clear of earlier ones. Gives up after a fixed number of draws.
    fn place(&mut self, rng: &mut ChaCha8Rng, lo: f64, hi: f64, radius: f64) -> Option<(f64, f64)> {
        for _ in 0..1000 {
            let r = rng.random_range(lo..hi);
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let (x, y) = (r * th.cos(), r * th.sin());
            if self.fits(x, y, radius) {
                self.taken.push((x, y, radius));
                return Some((x, y));
            }
        }
        None
    }

    fn fits(&self, x: f64, y: f64, radius: f64) -> bool {
        self.taken
            .iter()
            .all(|&(ox, oy, or)| (x - ox).hypot(y - oy) >= radius + or + self.separation)
    }
}

/// Road disc, sidewalk annulus sectors, car boxes, person cylinders, pole
/// and trunk lines and sign panels. Objects never share a voxel with another
/// object, and object points sit above the ground layers.
pub fn gen_scene(spec: &SceneSpec, taxonomy: &ClassTaxonomy, seed: u64) -> Result<(PointCloud<f64>, PanopticLabelSet)> {
    spec.check()?;
    let road = class(taxonomy, "road")?;
    let sidewalk = class(taxonomy, "sidewalk")?;
    let car = class(taxonomy, "car")?;
    let person = class(taxonomy, "person")?;
    let pole = class(taxonomy, "pole")?;
    let trunk = class(taxonomy, "trunk")?;
    let sign = class(taxonomy, "traffic-sign")?;
    let vegetation = class(taxonomy, "vegetation")?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        points: Vec::new(),
        semantic: Vec::new(),
        instance: Vec::new(),
    };
    let tau = std::f64::consts::TAU;

    for _ in 0..spec.road_points {
        let r = rng
            .random_range(spec.r_min * spec.r_min..spec.road_radius * spec.road_radius)
            .sqrt();
        let th = rng.random_range(0.0..tau);
        let z = GROUND_Z + rng.random_range(-0.02..0.02);
        b.push(r * th.cos(), r * th.sin(), z, rng.random_range(0.1..0.3), road, 0);
    }

    // sidewalk sectors each span half of their share of the circle
    let inner = spec.road_radius + 1.0;
    let outer = inner + spec.sidewalk_width;
    if spec.sidewalk_sectors > 0 {
        let share = tau / spec.sidewalk_sectors as f64;
        for i in 0..spec.sidewalk_points {
            let s = i % spec.sidewalk_sectors;
            let th = share * s as f64 + rng.random_range(0.0..share * 0.5);
            let r = rng.random_range(inner * inner..outer * outer).sqrt();
            let z = SIDEWALK_Z + rng.random_range(-0.02..0.02);
            b.push(r * th.cos(), r * th.sin(), z, rng.random_range(0.2..0.4), sidewalk, 0);
        }
    }

    let mut placer = Placer {
        taken: Vec::new(),
        separation: spec.separation,
    };
    let mut next_id = 1u32;
    let object_lo = spec.r_min + 3.0;
    let object_hi = spec.road_radius - 3.0;

    let car_at = |rng: &mut ChaCha8Rng, b: &mut Builder, x: f64, y: f64, id: u32| {
        let (l, w, h) = (
            range(rng, spec.car_length),
            range(rng, spec.car_width),
            range(rng, spec.car_height),
        );
        let yaw = rng.random_range(0.0..tau);
        let (c, s) = (yaw.cos(), yaw.sin());
        for _ in 0..spec.car_points {
            let u = rng.random_range(-0.5..0.5) * l;
            let v = rng.random_range(-0.5..0.5) * w;
            let z = OBJECT_BASE_Z + rng.random_range(0.0..h);
            b.push(
                x + c * u - s * v,
                y + s * u + c * v,
                z,
                rng.random_range(0.3..0.9),
                car,
                id,
            );
        }
    };
    let car_radius = 0.5 * spec.car_length.1.hypot(spec.car_width.1);

    if spec.straddle_car {
        let x = 0.5 * (object_lo + object_hi);
        placer.taken.push((x, 0.0, car_radius));
        car_at(&mut rng, &mut b, x, 0.0, next_id);
        next_id += 1;
    }
    for _ in 0..spec.cars {
        if let Some((x, y)) = placer.place(&mut rng, object_lo, object_hi, car_radius) {
            car_at(&mut rng, &mut b, x, y, next_id);
            next_id += 1;
        }
    }
    for _ in 0..spec.persons {
        if let Some((x, y)) = placer.place(&mut rng, object_lo, object_hi, 0.3) {
            let h = range(&mut rng, spec.person_height);
            for _ in 0..spec.person_points {
                let r = 0.3 * rng.random::<f64>().sqrt();
                let th = rng.random_range(0.0..tau);
                let z = OBJECT_BASE_Z + rng.random_range(0.0..h);
                b.push(
                    x + r * th.cos(),
                    y + r * th.sin(),
                    z,
                    rng.random_range(0.2..0.6),
                    person,
                    next_id,
                );
            }
            next_id += 1;
        }
    }
    for (count, cls, radius) in [(spec.poles, pole, 0.08), (spec.trunks, trunk, 0.2)] {
        for _ in 0..count {
            if let Some((x, y)) = placer.place(&mut rng, object_lo, object_hi, radius) {
                for _ in 0..spec.line_points {
                    let z = OBJECT_BASE_Z + rng.random_range(0.0..2.6);
                    let dx = rng.random_range(-radius..radius);
                    let dy = rng.random_range(-radius..radius);
                    b.push(x + dx, y + dy, z, rng.random_range(0.2..0.5), cls, 0);
                }
            }
        }
    }
    for _ in 0..spec.signs {
        if let Some((x, y)) = placer.place(&mut rng, object_lo, object_hi, 0.4) {
            let th = y.atan2(x) + std::f64::consts::FRAC_PI_2;
            for _ in 0..spec.sign_points {
                let t = rng.random_range(-0.4..0.4);
                let z = 0.6 + rng.random_range(0.0..0.6);
                b.push(
                    x + t * th.cos(),
                    y + t * th.sin(),
                    z,
                    rng.random_range(0.6..1.0),
                    sign,
                    0,
                );
            }
        }
    }
    for i in 0..spec.stragglers {
        let r = if i % 2 == 0 {
            rng.random_range(0.5..spec.r_min * 0.9)
        } else {
            spec.r_max + rng.random_range(1.0..10.0)
        };
        let th = rng.random_range(0.0..tau);
        b.push(r * th.cos(), r * th.sin(), GROUND_Z + 0.5, 0.5, vegetation, 0);
    }

    let cloud = PointCloud::from_points(&b.points).cast::<f64>();
    Ok((
        cloud,
        PanopticLabelSet {
            semantic: b.semantic,
            instance: b.instance,
        },
    ))
}

/// Seed of scene `index` in a run seeded with `seed`: the first word of
/// ChaCha stream `index`, so scenes can be generated in any order.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationMode {
    Calibrated,
    /// Confidence `r` reported as `r^(1/γ)`.
    Overconfident(f64),
    /// Confidence `r` reported as `r^γ`.
    Underconfident(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSpec {
    /// Label-flip probability per class.
    pub flip: Vec<f64>,
    /// Preferred wrong class per class; `None` draws a uniform other class.
    pub confusion: Vec<Option<ClassId>>,
    pub mode: CalibrationMode,
    /// Concentration of the confidence distribution; larger is sharper.
    pub evidence_scale: f64,
}

impl CorruptionSpec {
    pub fn uniform(classes: usize, flip: f64) -> Self {
        Self {
            flip: vec![flip; classes],
            confusion: vec![None; classes],
            mode: CalibrationMode::Calibrated,
            evidence_scale: 10.0,
        }
    }

    pub fn check(&self, classes: usize) -> Result<()> {
        if self.flip.len() != classes || self.confusion.len() != classes {
            return Err(Error::Integrity(format!(
                "corruption spec covers {} / {} classes, taxonomy has {classes}",
                self.flip.len(),
                self.confusion.len()
            )));
        }
        if let Some(p) = self.flip.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Range {
                what: "flip probability",
                value: p.to_string(),
            });
        }
        if let Some(c) = self.confusion.iter().flatten().find(|&&c| c as usize >= classes) {
            return Err(Error::Range {
                what: "confusion target",
                value: c.to_string(),
            });
        }
        match self.mode {
            CalibrationMode::Overconfident(g) | CalibrationMode::Underconfident(g) if !(g >= 1.0) => {
                return Err(Error::Range {
                    what: "calibration gamma",
                    value: g.to_string(),
                });
            }
            _ => {}
        }
        if !(self.evidence_scale > 0.0) {
            return Err(Error::Range {
                what: "evidence scale",
                value: self.evidence_scale.to_string(),
            });
        }
        Ok(())
    }
}

/// Simulated network output for ground-truth `labels`.
///
/// Labels are flipped per class. For each predicted class `c` with empirical
/// accuracy `A`, confidences are drawn from `Beta(Aκ+1, (1−A)κ)` for correct
/// points and `Beta(Aκ, (1−A)κ+1)` for wrong ones; the mixture is
/// `Beta(Aκ, (1−A)κ)` with `P(correct | r) = r`. The calibration mode then
/// distorts `r`, and α is built with `S = K/(1−r)`, `α_pred = r·S` and the
/// rest `(1−r)·S/(K−1)`, so `p_pred = 1 − u = r`. For `r ≤ 1/K` the other
/// entries are 1 instead, so only `u = 1 − r` holds.
///
/// A thing point flipped to another thing class joins a random ground-truth
/// instance of that class, or a fresh id when there is none. Points with
/// ignore ground truth get a uniformly drawn class and count as wrong.
pub fn simulate_predictions(
    labels: &PanopticLabelSet,
    spec: &CorruptionSpec,
    taxonomy: &ClassTaxonomy,
    seed: u64,
) -> Result<(DirichletField<f64>, PanopticLabelSet)> {
    let k = taxonomy.num_classes();
    spec.check(k)?;
    if k < 2 {
        return Err(Error::Contract(
            "simulated predictions need at least two classes".into(),
        ));
    }
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); k];
    for (&c, &i) in labels.semantic.iter().zip(&labels.instance) {
        if taxonomy.is_thing(c) && i != 0 {
            by_class[c as usize].push(i);
        }
    }
    for ids in &mut by_class {
        ids.sort_unstable();
        ids.dedup();
    }
    let mut fresh = labels.instance.iter().copied().max().unwrap_or(0) + 1;

    let mut pred = labels.clone();
    let mut correct = vec![true; n];
    for i in 0..n {
        let g = labels.semantic[i];
        let other = |rng: &mut ChaCha8Rng, not: usize| {
            let c = rng.random_range(0..k - 1);
            if c >= not {
                c + 1
            } else {
                c
            }
        };
        let c = if taxonomy.is_ignore(g) || !taxonomy.is_valid(g) {
            correct[i] = false;
            rng.random_range(0..k)
        } else if rng.random_bool(spec.flip[g as usize]) {
            correct[i] = false;
            match spec.confusion[g as usize] {
                Some(t) if t != g => t as usize,
                _ => other(&mut rng, g as usize),
            }
        } else {
            continue;
        };
        let c = c as ClassId;
        pred.semantic[i] = c;
        pred.instance[i] = if !taxonomy.is_thing(c) {
            0
        } else if by_class[c as usize].is_empty() {
            by_class[c as usize].push(fresh);
            fresh += 1;
            by_class[c as usize][0]
        } else {
            let ids = &by_class[c as usize];
            ids[rng.random_range(0..ids.len())]
        };
    }

    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for i in 0..n {
        let c = pred.semantic[i] as usize;
        totals[c] += 1;
        hits[c] += usize::from(correct[i]);
    }

    let kappa = spec.evidence_scale;
    let kf = k as f64;
    let floor = 1.0 / kf + 1e-9;
    let mut alpha = Vec::with_capacity(n * k);
    for i in 0..n {
        let c = pred.semantic[i] as usize;
        let acc = (hits[c] as f64 / totals[c] as f64).clamp(1e-3, 1.0 - 1e-3);
        let (a, b) = (acc * kappa, (1.0 - acc) * kappa);
        let dist = if correct[i] {
            Beta::new(a + 1.0, b)
        } else {
            Beta::new(a, b + 1.0)
        };
        let mut r: f64 = dist
            .map_err(|e| Error::Contract(format!("confidence distribution: {e}")))?
            .sample(&mut rng);
        r = match spec.mode {
            CalibrationMode::Calibrated => r,
            CalibrationMode::Overconfident(g) => r.powf(1.0 / g),
            CalibrationMode::Underconfident(g) => r.powf(g),
        };
        let r = r.clamp(1e-6, 1.0 - 1e-6);
        let s = kf / (1.0 - r);
        // p_pred = r needs r > 1/K; below that the others sit at α = 1, which
        // still gives u = 1 − r and keeps the predicted class on top
        let (top, rest) = if r >= floor {
            (r * s, (1.0 - r) * s / (kf - 1.0))
        } else {
            (s - (kf - 1.0), 1.0)
        };
        alpha.extend((0..k).map(|j| if j == c { top } else { rest }));
    }
    Ok((DirichletField::new(k, alpha)?, pred))
}

/// Two overlapping isotropic Gaussian blobs with means `±separation/2` on
/// every axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub dim: usize,
    pub separation: f64,
    pub std: f64,
    pub train: usize,
    pub test: usize,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            separation: 1.5,
            std: 1.0,
            train: 2000,
            test: 2000,
        }
    }
}

/// `n` row-major feature vectors with alternating class labels 0 and 1.
pub fn gen_blobs(spec: &BlobSpec, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<ClassId>)> {
    let normal = rand_distr::Normal::new(0.0, spec.std).map_err(|_| Error::Range {
        what: "blob std",
        value: spec.std.to_string(),
    })?;
    if spec.dim == 0 {
        return Err(Error::Contract("blobs need at least one dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * spec.dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = (i % 2) as ClassId;
        let mean = if c == 0 { -0.5 } else { 0.5 } * spec.separation;
        x.extend((0..spec.dim).map(|_| mean + normal.sample(&mut rng)));
        y.push(c);
    }
    Ok((x, y))
}
