//! Evidential classification: logits → Dirichlet concentrations → class
//! probabilities and a closed-form uncertainty.

mod loss;
mod temperature;
pub(crate) mod toy;

pub use loss::{
    aux_losses, grad_semantic_loss, grad_semantic_loss_with, kl_regularizer, lambda_schedule, lambda_schedule_with,
    log_loss, semantic_loss, semantic_loss_with, LossBreakdown, LossWeights, SemanticLoss,
};
pub use temperature::{fit_temperature, softmax_confidence, temperature_softmax, TemperatureFit};
pub use toy::{train_toy, LinearEvidential, ToyConfig, ToyReport};

use crate::error::{Error, Result};
use crate::model::{ClassId, DirichletField};
use crate::num::{argmax, softplus, Real};

/// Row-major `n × K` raw network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    k: usize,
    values: Vec<T>,
}

impl<T: Real> Logits<T> {
    pub fn new(k: usize, values: Vec<T>) -> Result<Self> {
        if k == 0 || !values.len().is_multiple_of(k) {
            return Err(Error::Integrity(format!(
                "{} logits do not split into rows of K = {k}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i}")));
        }
        Ok(Self { k, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }
}

/// One-hot ground truth with a per-row participation mask.
///
/// Masked-out rows (`mask[i] == false`) are excluded from every loss, which
/// expresses training on occupied voxels only.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotTargets {
    k: usize,
    onehot: Vec<u8>,
    mask: Vec<bool>,
}

impl OneHotTargets {
    pub fn new(k: usize, onehot: Vec<u8>, mask: Vec<bool>) -> Result<Self> {
        if k == 0 || onehot.len() != mask.len() * k {
            return Err(Error::Integrity(format!(
                "{} one-hot entries for {} rows of K = {k}",
                onehot.len(),
                mask.len()
            )));
        }
        if onehot.iter().any(|&o| o > 1) {
            return Err(Error::Contract("one-hot entries must be 0 or 1".into()));
        }
        Ok(Self { k, onehot, mask })
    }

    /// All rows unmasked.
    pub fn from_classes(k: usize, classes: &[ClassId]) -> Result<Self> {
        Self::from_classes_masked(k, classes, vec![true; classes.len()])
    }

    pub fn from_classes_masked(k: usize, classes: &[ClassId], mask: Vec<bool>) -> Result<Self> {
        let mut onehot = vec![0u8; classes.len() * k];
        for (i, &c) in classes.iter().enumerate() {
            if (c as usize) >= k {
                if mask.get(i).copied().unwrap_or(false) {
                    return Err(Error::Range {
                        what: "target class",
                        value: c.to_string(),
                    });
                }
                continue;
            }
            onehot[i * k + c as usize] = 1;
        }
        Self::new(k, onehot, mask)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.onehot[i * self.k..(i + 1) * self.k]
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Ground-truth class of an unmasked row; errors unless the row is exactly one-hot.
    pub(crate) fn target(&self, i: usize) -> Result<usize> {
        let row = self.row(i);
        let hot: u32 = row.iter().map(|&o| o as u32).sum();
        if hot != 1 {
            return Err(Error::Contract(format!(
                "unmasked target row {i} has {hot} hot entries"
            )));
        }
        Ok(row.iter().position(|&o| o == 1).unwrap_or(0))
    }
}

/// `α = softplus(l) + 1`, elementwise.
pub fn alpha_from_logits<T: Real>(logits: &Logits<T>) -> DirichletField<T> {
    let alpha = logits.as_slice().iter().map(|&l| softplus(l) + T::one()).collect();
    DirichletField::new(logits.k, alpha).expect("softplus + 1 is finite and >= 1")
}

/// Per-row class probabilities `p = α / S` and uncertainty `u = K / S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    k: usize,
    pub p: Vec<T>,
    pub u: Vec<T>,
}

impl<T: Real> Prediction<T> {
    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.p[i * self.k..(i + 1) * self.k]
    }

    /// Most probable class per row, ties to the lower id.
    pub fn classes(&self) -> Vec<ClassId> {
        self.p.chunks_exact(self.k).map(|r| argmax(r) as ClassId).collect()
    }

    pub fn max_prob(&self, i: usize) -> T {
        self.row(i).iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn from_parts(k: usize, p: Vec<T>, u: Vec<T>) -> Result<Self> {
        if k == 0 || p.len() != u.len() * k {
            return Err(Error::Integrity(format!(
                "{} probabilities for {} rows of K = {k}",
                p.len(),
                u.len()
            )));
        }
        Ok(Self { k, p, u })
    }
}

pub fn predict<T: Real>(alpha: &DirichletField<T>) -> Prediction<T> {
    let k = alpha.num_classes();
    let kk = T::from_count(k);
    let mut p = Vec::with_capacity(alpha.as_slice().len());
    let mut u = Vec::with_capacity(alpha.len());
    for row in alpha.rows() {
        let s: T = row.iter().copied().sum();
        p.extend(row.iter().map(|&a| a / s));
        u.push(kk / s);
    }
    Prediction { k, p, u }
}
