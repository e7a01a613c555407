//! Panoptic quality, IoU and per-class calibration of uncertainty.
//!
//! Everything here is computed in `f64`. Sums that are merged across scans
//! are kept as integers (fixed point for fractional values), so merging
//! accumulators is exactly associative and commutative.

mod calibration;
mod report;

use std::collections::BTreeMap;

pub use calibration::{
    accumulate_calibration, calibration_curve, curve_csv, uece, CalibrationBins, CurveRow, NUM_BINS,
};
pub use report::{ClassRow, EvalReport, Evaluator, SplitRow};

use crate::error::{Error, Result};
use crate::model::{ClassId, ClassTaxonomy, PanopticLabelSet};

pub(crate) const FIXED_ONE: f64 = (1u64 << 53) as f64;

/// `x ∈ [0, 1]` as a multiple of 2⁻⁵³.
pub(crate) fn to_fixed(x: f64) -> u128 {
    (x.clamp(0.0, 1.0) * FIXED_ONE).round() as u128
}

pub(crate) fn from_fixed(x: u128) -> f64 {
    x as f64 / FIXED_ONE
}

/// A thing segment is one `(class, instance)` pair, instance 0 included; a
/// stuff segment is the whole class within one scan (instance 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Segment {
    pub class: ClassId,
    pub instance: u32,
}

impl Segment {
    fn of(class: ClassId, instance: u32, taxonomy: &ClassTaxonomy) -> Self {
        let instance = if taxonomy.is_thing(class) { instance } else { 0 };
        Self { class, instance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentMatch {
    pub gt: Segment,
    pub pred: Segment,
    pub iou: f64,
}

impl SegmentMatch {
    pub fn class(&self) -> ClassId {
        self.gt.class
    }
}

/// Outcome of matching one scan. Points with ignore ground truth take no part.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanMatching {
    pub matches: Vec<SegmentMatch>,
    pub false_positives: Vec<Segment>,
    pub false_negatives: Vec<Segment>,
}

fn check_lengths(gt: &PanopticLabelSet, pred: &PanopticLabelSet) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::Integrity(format!(
            "{} ground-truth points vs {} predicted",
            gt.len(),
            pred.len()
        )));
    }
    Ok(())
}

fn check_classes(labels: &PanopticLabelSet, taxonomy: &ClassTaxonomy, what: &str) -> Result<()> {
    if let Some(i) = labels
        .semantic
        .iter()
        .position(|&c| !taxonomy.is_valid(c) && !taxonomy.is_ignore(c))
    {
        return Err(Error::Integrity(format!(
            "{what} point {i} has unknown class {}",
            labels.semantic[i]
        )));
    }
    Ok(())
}

/// Segment pairs of the same class with IoU > 0.5.
pub fn match_segments(
    gt: &PanopticLabelSet,
    pred: &PanopticLabelSet,
    taxonomy: &ClassTaxonomy,
) -> Result<ScanMatching> {
    check_lengths(gt, pred)?;
    check_classes(gt, taxonomy, "ground-truth")?;
    check_classes(pred, taxonomy, "predicted")?;
    let mut gt_area: BTreeMap<Segment, u64> = BTreeMap::new();
    let mut pred_area: BTreeMap<Segment, u64> = BTreeMap::new();
    let mut inter: BTreeMap<(Segment, Segment), u64> = BTreeMap::new();
    for i in 0..gt.len() {
        let gc = gt.semantic[i];
        if taxonomy.is_ignore(gc) {
            continue;
        }
        let g = Segment::of(gc, gt.instance[i], taxonomy);
        *gt_area.entry(g).or_default() += 1;
        let pc = pred.semantic[i];
        if taxonomy.is_ignore(pc) {
            continue;
        }
        let p = Segment::of(pc, pred.instance[i], taxonomy);
        *pred_area.entry(p).or_default() += 1;
        if g.class == p.class {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let mut out = ScanMatching::default();
    let mut gt_used: BTreeMap<Segment, Segment> = BTreeMap::new();
    let mut pred_used: BTreeMap<Segment, Segment> = BTreeMap::new();
    for (&(g, p), &n) in &inter {
        let union = gt_area[&g] + pred_area[&p] - n;
        // IoU > 1/2  ⇔  2n > union, decided on integers
        if 2 * n > union {
            if gt_used.insert(g, p).is_some() || pred_used.insert(p, g).is_some() {
                return Err(Error::Integrity(format!("segment matched twice: {g:?} / {p:?}")));
            }
            out.matches.push(SegmentMatch {
                gt: g,
                pred: p,
                iou: n as f64 / union as f64,
            });
        }
    }
    out.false_negatives = gt_area.keys().filter(|g| !gt_used.contains_key(g)).copied().collect();
    out.false_positives = pred_area
        .keys()
        .filter(|p| !pred_used.contains_key(p))
        .copied()
        .collect();
    Ok(out)
}

/// Per-class match counts with the IoU sum in fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PqCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    iou_fixed: u128,
}

impl PqCounts {
    pub fn iou_sum(&self) -> f64 {
        from_fixed(self.iou_fixed)
    }

    pub fn is_present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    /// `Σ IoU / (TP + FP/2 + FN/2)`, `None` for an absent class.
    pub fn pq(&self) -> Option<f64> {
        self.is_present()
            .then(|| self.iou_sum() / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64))
    }

    /// Segmentation quality: mean IoU of matches.
    pub fn sq(&self) -> Option<f64> {
        (self.tp > 0).then(|| self.iou_sum() / self.tp as f64)
    }

    /// Recognition quality: F1 of the segment matching.
    pub fn rq(&self) -> Option<f64> {
        self.is_present()
            .then(|| self.tp as f64 / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64))
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_fixed += other.iou_fixed;
    }
}

pub fn pq_counts(matching: &ScanMatching, num_classes: usize) -> Vec<PqCounts> {
    let mut counts = vec![PqCounts::default(); num_classes];
    for m in &matching.matches {
        let c = &mut counts[m.class() as usize];
        c.tp += 1;
        c.iou_fixed += to_fixed(m.iou);
    }
    for s in &matching.false_positives {
        counts[s.class as usize].fp += 1;
    }
    for s in &matching.false_negatives {
        counts[s.class as usize].fn_ += 1;
    }
    counts
}

/// Mean of the present entries among `classes`.
pub(crate) fn mean_of(values: &[Option<f64>], classes: impl Iterator<Item = ClassId>) -> Option<f64> {
    let present: Vec<f64> = classes
        .filter_map(|c| values.get(c as usize).copied().flatten())
        .collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanopticQuality {
    pub per_class: Vec<Option<f64>>,
    pub all: Option<f64>,
    pub thing: Option<f64>,
    pub stuff: Option<f64>,
}

/// Class-averaged PQ over classes present in ground truth or prediction.
pub fn pq(counts: &[PqCounts], taxonomy: &ClassTaxonomy) -> PanopticQuality {
    let per_class: Vec<Option<f64>> = counts.iter().map(PqCounts::pq).collect();
    let k = taxonomy.num_classes() as ClassId;
    PanopticQuality {
        all: mean_of(&per_class, 0..k),
        thing: mean_of(&per_class, taxonomy.thing_classes()),
        stuff: mean_of(&per_class, taxonomy.stuff_classes()),
        per_class,
    }
}

/// Point counts for IoU: `tp`, `fp` and `fn` per class. A prediction of
/// ignore on a labeled point counts as a miss for the true class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, gt: &[ClassId], pred: &[ClassId], taxonomy: &ClassTaxonomy) {
        for (&g, &p) in gt.iter().zip(pred) {
            if taxonomy.is_ignore(g) {
                continue;
            }
            if g == p {
                self.tp[g as usize] += 1;
            } else {
                self.fn_[g as usize] += 1;
                if !taxonomy.is_ignore(p) {
                    self.fp[p as usize] += 1;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in [
            (&mut self.tp, &other.tp),
            (&mut self.fp, &other.fp),
            (&mut self.fn_, &other.fn_),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn iou(&self, class: usize) -> Option<f64> {
        let denom = self.tp[class] + self.fp[class] + self.fn_[class];
        (denom > 0).then(|| self.tp[class] as f64 / denom as f64)
    }

    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.tp.len()).map(|c| self.iou(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanIou {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Confusion-matrix IoU per class and its mean over classes that occur.
pub fn miou(gt: &[ClassId], pred: &[ClassId], taxonomy: &ClassTaxonomy) -> Result<MeanIou> {
    if gt.len() != pred.len() {
        return Err(Error::Integrity(format!(
            "{} vs {} semantic labels",
            gt.len(),
            pred.len()
        )));
    }
    let mut counts = IouCounts::new(taxonomy.num_classes());
    counts.add(gt, pred, taxonomy);
    let per_class = counts.per_class();
    Ok(MeanIou {
        mean: mean_of(&per_class, 0..taxonomy.num_classes() as ClassId),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kitti() -> ClassTaxonomy {
        ClassTaxonomy::semantic_kitti()
    }

    fn labels(sem: &[ClassId], inst: &[u32]) -> PanopticLabelSet {
        PanopticLabelSet::new(sem.to_vec(), inst.to_vec()).unwrap()
    }

    #[test]
    fn identical_labels_match_at_one() {
        let t = kitti();
        let l = labels(&[0, 0, 0, 1, 1, 8, 8, 9], &[1, 1, 2, 1, 1, 0, 0, 0]);
        let m = match_segments(&l, &l, &t).unwrap();
        assert_eq!(m.matches.len(), 5);
        assert!(m.matches.iter().all(|m| m.iou == 1.0));
        assert!(m.false_positives.is_empty() && m.false_negatives.is_empty());
        let p = pq(&pq_counts(&m, 19), &t);
        assert_eq!(p.all, Some(1.0));
    }

    #[test]
    fn half_overlap_is_not_a_match() {
        let t = kitti();
        let gt = labels(&[0, 0, 0, 0], &[1, 1, 1, 1]);
        let pred = labels(&[0, 0, 255, 255], &[1, 1, 0, 0]);
        let m = match_segments(&gt, &pred, &t).unwrap();
        assert!(m.matches.is_empty());
        assert_eq!(m.false_positives.len(), 1);
        assert_eq!(m.false_negatives.len(), 1);
    }

    #[test]
    fn pq_formula_case() {
        let mut c = PqCounts {
            tp: 1,
            fp: 1,
            fn_: 0,
            iou_fixed: to_fixed(0.8),
        };
        assert!((c.pq().unwrap() - 0.8 / 1.5).abs() < 1e-15);
        c.merge(&PqCounts::default());
        assert!((c.sq().unwrap() - 0.8).abs() < 1e-15);
        assert!(PqCounts::default().pq().is_none());
    }

    #[test]
    fn ignore_ground_truth_is_dropped() {
        let t = kitti();
        // two predicted car points sit on unlabeled ground truth
        let gt = labels(&[0, 0, 255, 255], &[1, 1, 0, 0]);
        let pred = labels(&[0, 0, 0, 0], &[1, 1, 1, 1]);
        let m = match_segments(&gt, &pred, &t).unwrap();
        assert_eq!(m.matches.len(), 1);
        assert_eq!(m.matches[0].iou, 1.0);
    }

    /// All segment pairs, IoU from explicit point sets.
    fn brute_matches(
        gt: &PanopticLabelSet,
        pred: &PanopticLabelSet,
        t: &ClassTaxonomy,
    ) -> Vec<(Segment, Segment, f64)> {
        let n = gt.len();
        let seg = |l: &PanopticLabelSet, i: usize| {
            let c = l.semantic[i];
            Segment {
                class: c,
                instance: if t.is_thing(c) { l.instance[i] } else { 0 },
            }
        };
        let valid: Vec<usize> = (0..n).filter(|&i| !t.is_ignore(gt.semantic[i])).collect();
        let mut gs: Vec<Segment> = valid.iter().map(|&i| seg(gt, i)).collect();
        let mut ps: Vec<Segment> = valid
            .iter()
            .filter(|&&i| !t.is_ignore(pred.semantic[i]))
            .map(|&i| seg(pred, i))
            .collect();
        gs.sort();
        gs.dedup();
        ps.sort();
        ps.dedup();
        let mut out = Vec::new();
        for g in &gs {
            for p in &ps {
                if g.class != p.class {
                    continue;
                }
                let in_g = |i: &usize| seg(gt, *i) == *g;
                let in_p = |i: &usize| !t.is_ignore(pred.semantic[*i]) && seg(pred, *i) == *p;
                let inter = valid.iter().filter(|i| in_g(i) && in_p(i)).count();
                let union = valid.iter().filter(|i| in_g(i) || in_p(i)).count();
                let iou = inter as f64 / union as f64;
                if iou > 0.5 {
                    out.push((*g, *p, iou));
                }
            }
        }
        out
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> (PanopticLabelSet, PanopticLabelSet) {
        let classes: [ClassId; 6] = [0, 1, 8, 9, 255, 0];
        let mut gt = PanopticLabelSet::filled(n, 255);
        for i in 0..n {
            let c = classes[rng.random_range(0..classes.len())];
            gt.semantic[i] = c;
            gt.instance[i] = if c < 8 { rng.random_range(0..3) } else { 0 };
        }
        let mut pred = gt.clone();
        for i in 0..n {
            if rng.random_bool(0.3) {
                let c = classes[rng.random_range(0..classes.len())];
                pred.semantic[i] = c;
                pred.instance[i] = if c < 8 { rng.random_range(0..3) } else { 0 };
            }
        }
        (gt, pred)
    }

    #[test]
    fn matching_matches_exhaustive_pairing() {
        let t = kitti();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..200 {
            let n = rng.random_range(1..60);
            let (gt, pred) = random_scene(&mut rng, n);
            let m = match_segments(&gt, &pred, &t).unwrap();
            let got: Vec<(Segment, Segment, f64)> = m.matches.iter().map(|m| (m.gt, m.pred, m.iou)).collect();
            let mut expect = brute_matches(&gt, &pred, &t);
            expect.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn miou_cases() {
        let t = kitti();
        let r = miou(&[0, 0, 8, 8], &[0, 0, 8, 8], &t).unwrap();
        assert_eq!(r.mean, Some(1.0));
        let r = miou(&[0, 0, 8, 8], &[8, 8, 0, 0], &t).unwrap();
        assert_eq!(r.per_class[0], Some(0.0));
        assert_eq!(r.mean, Some(0.0));
        assert!(miou(&[0], &[0, 1], &t).is_err());
    }

    #[test]
    fn miou_matches_confusion_oracle() {
        let t = kitti();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 500;
        let gt: Vec<ClassId> = (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    255
                } else {
                    rng.random_range(0..19)
                }
            })
            .collect();
        let pred: Vec<ClassId> = (0..n)
            .map(|_| {
                if rng.random_bool(0.05) {
                    255
                } else {
                    rng.random_range(0..19)
                }
            })
            .collect();
        // confusion matrix with an extra "ignore" column
        let mut cm = vec![vec![0u64; 20]; 19];
        for (&g, &p) in gt.iter().zip(&pred) {
            if g != 255 {
                cm[g as usize][if p == 255 { 19 } else { p as usize }] += 1;
            }
        }
        let r = miou(&gt, &pred, &t).unwrap();
        for c in 0..19 {
            let tp = cm[c][c];
            let row: u64 = cm[c].iter().sum();
            let col: u64 = (0..19).map(|g| cm[g][c]).sum();
            let denom = row + col - tp;
            let expect = (denom > 0).then(|| tp as f64 / denom as f64);
            assert_eq!(r.per_class[c], expect);
        }
    }
}
