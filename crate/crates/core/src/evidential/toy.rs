//! Full-batch gradient descent on the evidential loss for a linear classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::loss::{grad_semantic_loss_with, lambda_schedule_with, semantic_loss_with, LossWeights};
use super::{alpha_from_logits, predict, Logits, OneHotTargets, Prediction};
use crate::error::{Error, Result};
use crate::model::ClassId;
use crate::num::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig<T> {
    pub epochs: u64,
    pub lr: T,
    pub seed: u64,
    /// Standard deviation of the initial weights.
    pub init_scale: T,
    pub kl_cap: T,
    pub ramp_epochs: T,
}

impl<T: Real> Default for ToyConfig<T> {
    fn default() -> Self {
        let w = LossWeights::<T>::default();
        Self {
            epochs: 200,
            lr: T::lit(0.05),
            seed: 0,
            init_scale: T::lit(0.01),
            kl_cap: w.kl_cap,
            ramp_epochs: w.ramp_epochs,
        }
    }
}

/// `logits = x · W + b` with `W` stored `d × K` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEvidential<T> {
    pub dim: usize,
    pub classes: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LinearEvidential<T> {
    pub fn random(dim: usize, classes: usize, scale: T, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale.as_f64().max(0.0)).expect("valid std");
        let weights = (0..dim * classes).map(|_| T::lit(normal.sample(&mut rng))).collect();
        Self {
            dim,
            classes,
            weights,
            bias: vec![T::zero(); classes],
        }
    }

    pub fn logits(&self, features: &[T]) -> Result<Logits<T>> {
        if !features.len().is_multiple_of(self.dim) {
            return Err(Error::Integrity(format!(
                "{} feature values do not split into rows of {}",
                features.len(),
                self.dim
            )));
        }
        let n = features.len() / self.dim;
        let mut out = Vec::with_capacity(n * self.classes);
        for x in features.chunks_exact(self.dim) {
            for c in 0..self.classes {
                let mut acc = self.bias[c];
                for (j, &xj) in x.iter().enumerate() {
                    acc += xj * self.weights[j * self.classes + c];
                }
                out.push(acc);
            }
        }
        Logits::new(self.classes, out)
    }

    pub fn predict(&self, features: &[T]) -> Result<Prediction<T>> {
        Ok(predict(&alpha_from_logits(&self.logits(features)?)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport<T> {
    /// Mean loss per epoch, measured before that epoch's update.
    pub losses: Vec<T>,
}

/// Trains a linear evidential classifier on `n × dim` features.
///
/// Each epoch is one full-batch step on the summed semantic loss, so the step
/// size grows with the number of samples. Epoch `t` uses the KL weight of
/// iteration `t` with one iteration per epoch. Reported losses are per sample.
pub fn train_toy<T: Real>(
    features: &[T],
    dim: usize,
    labels: &[ClassId],
    classes: usize,
    cfg: &ToyConfig<T>,
) -> Result<(LinearEvidential<T>, ToyReport<T>)> {
    let mut model = LinearEvidential::random(dim, classes, cfg.init_scale, cfg.seed);
    let report = fit_linear(&mut model, features, labels, cfg)?;
    Ok((model, report))
}

/// Continues gradient descent on an existing model.
pub(crate) fn fit_linear<T: Real>(
    model: &mut LinearEvidential<T>,
    features: &[T],
    labels: &[ClassId],
    cfg: &ToyConfig<T>,
) -> Result<ToyReport<T>> {
    let (dim, classes) = (model.dim, model.classes);
    if dim == 0 || features.len() != labels.len() * dim {
        return Err(Error::Integrity(format!(
            "{} feature values for {} labels of dimension {dim}",
            features.len(),
            labels.len()
        )));
    }
    let targets = OneHotTargets::from_classes(classes, labels)?;
    let n = T::from_count(labels.len().max(1));
    let mut losses = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let lambda = lambda_schedule_with(epoch, 1, cfg.kl_cap, cfg.ramp_epochs);
        let logits = model.logits(features).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("epoch {epoch}: {what} (lr {})", cfg.lr)),
            other => other,
        })?;
        let loss = semantic_loss_with(&alpha_from_logits(&logits), &targets, lambda)?.total / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {epoch}: loss {loss} (lr {}, lambda {lambda})",
                cfg.lr
            )));
        }
        losses.push(loss);
        let g = grad_semantic_loss_with(&logits, &targets, lambda)?;
        let mut gw = vec![T::zero(); dim * classes];
        let mut gb = vec![T::zero(); classes];
        for (x, gr) in features.chunks_exact(dim).zip(g.chunks_exact(classes)) {
            for c in 0..classes {
                gb[c] += gr[c];
                for j in 0..dim {
                    gw[j * classes + c] += x[j] * gr[c];
                }
            }
        }
        let step = cfg.lr;
        for (w, d) in model.weights.iter_mut().zip(&gw) {
            *w -= step * *d;
        }
        for (b, d) in model.bias.iter_mut().zip(&gb) {
            *b -= step * *d;
        }
    }
    Ok(ToyReport { losses })
}
