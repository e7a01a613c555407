use std::collections::BTreeMap;
use std::fmt::Write;

use super::{from_fixed, to_fixed, ScanMatching, Segment, FIXED_ONE};
use crate::error::{Error, Result};
use crate::model::{ClassId, ClassTaxonomy, PanopticLabelSet};
use crate::num::Real;

pub const NUM_BINS: usize = 10;

/// Per-class confidence histograms with accuracy and confidence sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationBins {
    classes: usize,
    bins: usize,
    count: Vec<u64>,
    correct: Vec<u64>,
    conf: Vec<u128>,
}

impl CalibrationBins {
    pub fn new(classes: usize) -> Self {
        Self::with_bins(classes, NUM_BINS)
    }

    pub fn with_bins(classes: usize, bins: usize) -> Self {
        assert!(bins > 0, "at least one bin");
        let n = classes * bins;
        Self {
            classes,
            bins,
            count: vec![0; n],
            correct: vec![0; n],
            conf: vec![0; n],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn num_bins(&self) -> usize {
        self.bins
    }

    /// Bin `⌊conf·J⌋`, with `conf = 1` in the last bin.
    pub fn bin_of(&self, conf: f64) -> usize {
        ((conf.clamp(0.0, 1.0) * self.bins as f64) as usize).min(self.bins - 1)
    }

    pub fn add(&mut self, class: ClassId, conf: f64, correct: bool) {
        let slot = class as usize * self.bins + self.bin_of(conf);
        self.count[slot] += 1;
        self.correct[slot] += u64::from(correct);
        self.conf[slot] += to_fixed(conf);
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!((self.classes, self.bins), (other.classes, other.bins), "bin layout");
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        for (a, b) in self.correct.iter_mut().zip(&other.correct) {
            *a += b;
        }
        for (a, b) in self.conf.iter_mut().zip(&other.conf) {
            *a += b;
        }
    }

    pub fn count(&self, class: ClassId, bin: usize) -> u64 {
        self.count[class as usize * self.bins + bin]
    }

    pub fn correct(&self, class: ClassId, bin: usize) -> u64 {
        self.correct[class as usize * self.bins + bin]
    }

    pub fn conf_sum(&self, class: ClassId, bin: usize) -> f64 {
        from_fixed(self.conf[class as usize * self.bins + bin])
    }

    pub fn total(&self, class: ClassId) -> u64 {
        let c = class as usize * self.bins;
        self.count[c..c + self.bins].iter().sum()
    }
}

/// Bins every point of every matched prediction segment under the segment's
/// class. A point is accurate when its ground-truth segment is the one matched
/// to its predicted segment. `conf` is `1 − u` per point.
pub fn accumulate_calibration<T: Real>(
    matching: &ScanMatching,
    gt: &PanopticLabelSet,
    pred: &PanopticLabelSet,
    conf: &[T],
    taxonomy: &ClassTaxonomy,
    bins: &mut CalibrationBins,
) -> Result<()> {
    if gt.len() != pred.len() || conf.len() != gt.len() {
        return Err(Error::Integrity(format!(
            "calibration inputs disagree: {} / {} labels, {} confidences",
            gt.len(),
            pred.len(),
            conf.len()
        )));
    }
    let partner: BTreeMap<Segment, Segment> = matching.matches.iter().map(|m| (m.pred, m.gt)).collect();
    let seg = |l: &PanopticLabelSet, i: usize| {
        let c = l.semantic[i];
        Segment {
            class: c,
            instance: if taxonomy.is_thing(c) { l.instance[i] } else { 0 },
        }
    };
    for i in 0..gt.len() {
        if taxonomy.is_ignore(gt.semantic[i]) || taxonomy.is_ignore(pred.semantic[i]) {
            continue;
        }
        let p = seg(pred, i);
        if let Some(&g) = partner.get(&p) {
            let c = conf[i].as_f64();
            if !c.is_finite() {
                return Err(Error::NonFinite(format!("confidence of point {i}")));
            }
            bins.add(p.class, c, seg(gt, i) == g);
        }
    }
    Ok(())
}

/// `Σ_j |B_j|/N · |acc(B_j) − conf(B_j)|`, `None` when the class has no points.
pub fn uece(bins: &CalibrationBins, class: ClassId) -> Option<f64> {
    let n = bins.total(class);
    if n == 0 {
        return None;
    }
    let base = class as usize * bins.bins;
    let mut gap = 0.0;
    for j in 0..bins.bins {
        // |Σacc − Σconf| on exact integers before the single rounding
        let acc = bins.correct[base + j] as i128 * FIXED_ONE as i128;
        let conf = bins.conf[base + j] as i128;
        gap += (acc - conf).unsigned_abs() as f64 / FIXED_ONE;
    }
    Some(gap / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub class: ClassId,
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: u64,
    pub mean_conf: Option<f64>,
    pub mean_acc: Option<f64>,
}

/// All bins of every class that received at least one point.
pub fn calibration_curve(bins: &CalibrationBins) -> Vec<CurveRow> {
    let mut rows = Vec::new();
    let j = bins.bins as f64;
    for c in 0..bins.classes as ClassId {
        if bins.total(c) == 0 {
            continue;
        }
        for b in 0..bins.bins {
            let n = bins.count(c, b);
            rows.push(CurveRow {
                class: c,
                bin_low: b as f64 / j,
                bin_high: (b + 1) as f64 / j,
                count: n,
                mean_conf: (n > 0).then(|| bins.conf_sum(c, b) / n as f64),
                mean_acc: (n > 0).then(|| bins.correct(c, b) as f64 / n as f64),
            });
        }
    }
    rows
}

pub fn curve_csv(rows: &[CurveRow], taxonomy: &ClassTaxonomy) -> String {
    let mut out = String::from("class,name,bin_low,bin_high,count,mean_conf,mean_acc\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{},{},{}",
            r.class,
            taxonomy.name(r.class).unwrap_or("?"),
            r.bin_low,
            r.bin_high,
            r.count,
            opt(r.mean_conf),
            opt(r.mean_acc)
        );
    }
    out
}
