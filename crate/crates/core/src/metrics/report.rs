use std::fmt::Write;

use super::calibration::{accumulate_calibration, uece, CalibrationBins, NUM_BINS};
use super::{match_segments, mean_of, pq_counts, IouCounts, PqCounts};
use crate::error::{Error, Result};
use crate::model::{ClassId, ClassTaxonomy, PanopticLabelSet};
use crate::num::Real;

/// Streaming evaluation over a dataset. Scans can be added to separate
/// evaluators and merged in any order.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluator {
    taxonomy: ClassTaxonomy,
    pq: Vec<PqCounts>,
    iou: IouCounts,
    bins: CalibrationBins,
    scans: u64,
}

impl Evaluator {
    pub fn new(taxonomy: &ClassTaxonomy) -> Self {
        Self::with_bins(taxonomy, NUM_BINS)
    }

    /// Evaluator with `bins` confidence bins per class.
    pub fn with_bins(taxonomy: &ClassTaxonomy, bins: usize) -> Self {
        let k = taxonomy.num_classes();
        Self {
            taxonomy: taxonomy.clone(),
            pq: vec![PqCounts::default(); k],
            iou: IouCounts::new(k),
            bins: CalibrationBins::with_bins(k, bins),
            scans: 0,
        }
    }

    /// Adds one scan; `u` is the per-point uncertainty, confidence is `1 − u`.
    pub fn add_scan<T: Real>(&mut self, gt: &PanopticLabelSet, pred: &PanopticLabelSet, u: &[T]) -> Result<()> {
        let matching = match_segments(gt, pred, &self.taxonomy)?;
        let conf: Vec<f64> = u.iter().map(|&v| 1.0 - v.as_f64()).collect();
        let mut bins = CalibrationBins::with_bins(self.taxonomy.num_classes(), self.bins.num_bins());
        accumulate_calibration(&matching, gt, pred, &conf, &self.taxonomy, &mut bins)?;
        for (a, b) in self
            .pq
            .iter_mut()
            .zip(pq_counts(&matching, self.taxonomy.num_classes()))
        {
            a.merge(&b);
        }
        self.iou.add(&gt.semantic, &pred.semantic, &self.taxonomy);
        self.bins.merge(&bins);
        self.scans += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Evaluator) -> Result<()> {
        if self.taxonomy != other.taxonomy {
            return Err(Error::Contract("merging evaluators with different taxonomies".into()));
        }
        for (a, b) in self.pq.iter_mut().zip(&other.pq) {
            a.merge(b);
        }
        self.iou.merge(&other.iou);
        self.bins.merge(&other.bins);
        self.scans += other.scans;
        Ok(())
    }

    pub fn scans(&self) -> u64 {
        self.scans
    }

    pub fn bins(&self) -> &CalibrationBins {
        &self.bins
    }

    pub fn pq_counts(&self) -> &[PqCounts] {
        &self.pq
    }

    pub fn report(&self) -> Result<EvalReport> {
        let t = &self.taxonomy;
        let k = t.num_classes() as ClassId;
        let classes: Vec<ClassRow> = (0..k)
            .map(|c| {
                let counts = self.pq[c as usize];
                ClassRow {
                    class: c,
                    name: t.name(c).unwrap_or_default().to_string(),
                    thing: t.is_thing(c),
                    pq: counts.pq(),
                    sq: counts.sq(),
                    rq: counts.rq(),
                    iou: self.iou.iou(c as usize),
                    uece: uece(&self.bins, c),
                    tp: counts.tp,
                    fp: counts.fp,
                    fn_: counts.fn_,
                }
            })
            .collect();
        let pq: Vec<Option<f64>> = classes.iter().map(|r| r.pq).collect();
        let iou: Vec<Option<f64>> = classes.iter().map(|r| r.iou).collect();
        let ece: Vec<Option<f64>> = classes.iter().map(|r| r.uece).collect();
        let split = |members: Vec<ClassId>| {
            let pq = mean_of(&pq, members.iter().copied());
            let pece = mean_of(&ece, members.iter().copied());
            SplitRow {
                pq,
                miou: mean_of(&iou, members.iter().copied()),
                pece,
                upq: match (pq, pece) {
                    (Some(q), Some(e)) => Some((1.0 - e) * q),
                    _ => None,
                },
            }
        };
        let all = split((0..k).collect());
        if all.pq.is_none() {
            return Err(Error::NoClasses);
        }
        Ok(EvalReport {
            all,
            thing: split(t.thing_classes().collect()),
            stuff: split(t.stuff_classes().collect()),
            classes,
            scans: self.scans,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class: ClassId,
    pub name: String,
    pub thing: bool,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub iou: Option<f64>,
    pub uece: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Aggregates over a set of classes; `None` when no class in the set has data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRow {
    pub pq: Option<f64>,
    pub miou: Option<f64>,
    pub pece: Option<f64>,
    /// `(1 − pECE) · PQ`
    pub upq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassRow>,
    pub all: SplitRow,
    pub thing: SplitRow,
    pub stuff: SplitRow,
    pub scans: u64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    pub fn classes_csv(&self) -> String {
        let mut out = String::from("class,name,kind,pq,sq,rq,iou,uece,tp,fp,fn\n");
        for r in &self.classes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.class,
                r.name,
                if r.thing { "thing" } else { "stuff" },
                cell(r.pq),
                cell(r.sq),
                cell(r.rq),
                cell(r.iou),
                cell(r.uece),
                r.tp,
                r.fp,
                r.fn_
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("split,pq,miou,pece,upq\n");
        for (name, s) in [("all", &self.all), ("thing", &self.thing), ("stuff", &self.stuff)] {
            let _ = writeln!(
                out,
                "{name},{},{},{},{}",
                cell(s.pq),
                cell(s.miou),
                cell(s.pece),
                cell(s.upq)
            );
        }
        out
    }

    /// Human-readable table in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "class", "PQ", "SQ", "RQ", "IoU", "uECE", "TP", "FP/FN"
        );
        for r in &self.classes {
            if r.pq.is_none() && r.iou.is_none() {
                continue;
            }
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>3}/{}",
                r.name,
                pct(r.pq),
                pct(r.sq),
                pct(r.rq),
                pct(r.iou),
                pct(r.uece),
                r.tp,
                r.fp,
                r.fn_
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>6} {:>6}",
            "split", "PQ", "mIoU", "pECE", "uPQ"
        );
        for (name, s) in [("all", &self.all), ("thing", &self.thing), ("stuff", &self.stuff)] {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>6} {:>6} {:>6}",
                name,
                pct(s.pq),
                pct(s.miou),
                pct(s.pece),
                pct(s.upq)
            );
        }
        let _ = writeln!(out, "scans: {}", self.scans);
        out
    }
}
