//! Probability-gated k-nearest-neighbor relabeling.

use std::time::{Duration, Instant};

use log::warn;

use super::kdtree::KdTree;
use crate::error::{Error, Result};
use crate::evidential::Prediction;
use crate::model::{ClassTaxonomy, PanopticLabelSet, PointCloud};
use crate::num::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PknnConfig<T> {
    pub k: usize,
    pub threshold: T,
}

impl<T: Real> Default for PknnConfig<T> {
    fn default() -> Self {
        Self {
            k: 5,
            threshold: T::lit(0.4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PknnStats {
    pub selected: usize,
    pub changed: usize,
    /// Set when the cloud had fewer than `k + 1` points.
    pub skipped: bool,
    pub elapsed: Duration,
}

/// Points whose largest class probability is below `threshold`.
pub fn pknn_select<T: Real>(pred: &Prediction<T>, threshold: T) -> Vec<usize> {
    (0..pred.len()).filter(|&i| pred.max_prob(i) < threshold).collect()
}

/// Relabels low-confidence points by a vote of their `k` nearest neighbors.
///
/// All votes read the input labels, so the result does not depend on point
/// order. Neighbors labeled ignore do not vote. A vote tie goes to the class
/// of the nearest tied voter. When a label changes, its uncertainty and (for
/// thing classes) instance id come from the nearest voter of the winning class.
pub fn pknn_refine<T: Real>(
    cloud: &PointCloud<T>,
    labels: &PanopticLabelSet,
    pred: &Prediction<T>,
    cfg: &PknnConfig<T>,
    taxonomy: &ClassTaxonomy,
) -> Result<(PanopticLabelSet, Vec<T>, PknnStats)> {
    let start = Instant::now();
    let n = cloud.len();
    if labels.len() != n || pred.len() != n {
        return Err(Error::Integrity(format!(
            "pKNN inputs disagree: {n} points, {} labels, {} predictions",
            labels.len(),
            pred.len()
        )));
    }
    let mut out = labels.clone();
    let mut u = pred.u.clone();
    let mut stats = PknnStats::default();
    if n < cfg.k + 1 {
        warn!("pKNN skipped: {n} points, need at least {}", cfg.k + 1);
        stats.skipped = true;
        stats.elapsed = start.elapsed();
        return Ok((out, u, stats));
    }
    let selected: Vec<usize> = pknn_select(pred, cfg.threshold)
        .into_iter()
        .filter(|&i| !taxonomy.is_ignore(labels.semantic[i]))
        .collect();
    stats.selected = selected.len();
    if !selected.is_empty() {
        let tree = KdTree::build(cloud.positions())?;
        let mut counts = vec![0usize; taxonomy.num_classes()];
        for &i in &selected {
            let neighbors = tree.knn(&cloud.position(i), cfg.k, Some(i));
            counts.iter_mut().for_each(|c| *c = 0);
            let voters: Vec<usize> = neighbors
                .iter()
                .map(|&(_, j)| j)
                .filter(|&j| !taxonomy.is_ignore(labels.semantic[j]))
                .collect();
            if voters.is_empty() {
                continue;
            }
            for &j in &voters {
                counts[labels.semantic[j] as usize] += 1;
            }
            let top = *counts.iter().max().expect("classes");
            // voters are nearest-first, so the first with a top count settles ties
            let winner = voters
                .iter()
                .copied()
                .find(|&j| counts[labels.semantic[j] as usize] == top)
                .expect("a top voter");
            let class = labels.semantic[winner];
            if class != labels.semantic[i] {
                out.semantic[i] = class;
                out.instance[i] = if taxonomy.is_thing(class) {
                    labels.instance[winner]
                } else {
                    0
                };
                u[i] = pred.u[winner];
                stats.changed += 1;
            }
        }
    }
    stats.elapsed = start.elapsed();
    Ok((out, u, stats))
}
