use super::{alpha_from_logits, Logits, OneHotTargets};
use crate::error::{Error, Result};
use crate::model::DirichletField;
use crate::num::{pairwise_sum, sigmoid, Real};
use crate::special::{digamma, ln_gamma, trigamma};

/// Loss weights and the KL annealing ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    /// Center heatmap MSE weight.
    pub heat: T,
    /// Offset L1 weight.
    pub offset: T,
    /// Final KL weight reached at the end of the ramp.
    pub kl_cap: T,
    /// Length of the KL ramp in epochs.
    pub ramp_epochs: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            heat: T::lit(100.0),
            offset: T::lit(10.0),
            kl_cap: T::lit(0.065),
            ramp_epochs: T::lit(20.0),
        }
    }
}

/// KL weight after `t` iterations with `iters_per_epoch` iterations per epoch.
pub fn lambda_schedule<T: Real>(t: u64, iters_per_epoch: u64) -> T {
    let w = LossWeights::<T>::default();
    lambda_schedule_with(t, iters_per_epoch, w.kl_cap, w.ramp_epochs)
}

pub fn lambda_schedule_with<T: Real>(t: u64, iters_per_epoch: u64, cap: T, ramp_epochs: T) -> T {
    let ramp = ramp_epochs * T::from_u64(iters_per_epoch.max(1)).unwrap_or_else(T::one);
    let frac = T::from_u64(t).unwrap_or_else(T::max_value) / ramp;
    cap * frac.min(T::one())
}

fn check_shapes<T: Real>(alpha: &DirichletField<T>, targets: &OneHotTargets) -> Result<()> {
    if alpha.len() != targets.len() || alpha.num_classes() != targets.num_classes() {
        return Err(Error::Integrity(format!(
            "alpha is {}x{} but targets are {}x{}",
            alpha.len(),
            alpha.num_classes(),
            targets.len(),
            targets.num_classes()
        )));
    }
    Ok(())
}

/// Type-II maximum-likelihood loss `Σ_i log(S_i / α_i^gt)` over unmasked rows.
pub fn log_loss<T: Real>(alpha: &DirichletField<T>, targets: &OneHotTargets) -> Result<T> {
    check_shapes(alpha, targets)?;
    let mut terms = Vec::with_capacity(alpha.len());
    for i in 0..alpha.len() {
        if !targets.is_active(i) {
            continue;
        }
        let gt = targets.target(i)?;
        terms.push((alpha.strength(i) / alpha.row(i)[gt]).ln());
    }
    Ok(pairwise_sum(&terms))
}

/// `KL(Dir(α̃) ‖ Dir(1))` for one row of α̃.
fn kl_row<T: Real>(tilde: &[T]) -> T {
    let k = T::from_count(tilde.len());
    let s: T = tilde.iter().copied().sum();
    let psi_s = digamma(s);
    let mut acc = ln_gamma(s) - ln_gamma(k);
    for &a in tilde {
        acc += (a - T::one()) * (digamma(a) - psi_s) - ln_gamma(a);
    }
    acc
}

/// Evidence regularizer: KL divergence to the uniform Dirichlet after removing
/// the ground-truth evidence, `α̃ = o + (1 − o) ⊙ α`.
pub fn kl_regularizer<T: Real>(alpha: &DirichletField<T>, targets: &OneHotTargets) -> Result<T> {
    check_shapes(alpha, targets)?;
    let mut tilde = vec![T::one(); alpha.num_classes()];
    let mut terms = Vec::with_capacity(alpha.len());
    for i in 0..alpha.len() {
        if !targets.is_active(i) {
            continue;
        }
        let gt = targets.target(i)?;
        tilde.copy_from_slice(alpha.row(i));
        tilde[gt] = T::one();
        terms.push(kl_row(&tilde));
    }
    Ok(pairwise_sum(&terms))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticLoss<T> {
    pub log: T,
    pub kl: T,
    pub lambda: T,
    pub total: T,
}

/// `L_log + λ_t · L_KL` with `λ_t` from the annealing schedule.
pub fn semantic_loss<T: Real>(
    alpha: &DirichletField<T>,
    targets: &OneHotTargets,
    t: u64,
    iters_per_epoch: u64,
) -> Result<SemanticLoss<T>> {
    semantic_loss_with(alpha, targets, lambda_schedule(t, iters_per_epoch))
}

pub fn semantic_loss_with<T: Real>(
    alpha: &DirichletField<T>,
    targets: &OneHotTargets,
    lambda: T,
) -> Result<SemanticLoss<T>> {
    let log = log_loss(alpha, targets)?;
    let kl = kl_regularizer(alpha, targets)?;
    Ok(SemanticLoss {
        log,
        kl,
        lambda,
        total: log + lambda * kl,
    })
}

/// Analytic gradient of the semantic loss with respect to the logits.
pub fn grad_semantic_loss<T: Real>(
    logits: &Logits<T>,
    targets: &OneHotTargets,
    t: u64,
    iters_per_epoch: u64,
) -> Result<Vec<T>> {
    grad_semantic_loss_with(logits, targets, lambda_schedule(t, iters_per_epoch))
}

pub fn grad_semantic_loss_with<T: Real>(logits: &Logits<T>, targets: &OneHotTargets, lambda: T) -> Result<Vec<T>> {
    let alpha = alpha_from_logits(logits);
    check_shapes(&alpha, targets)?;
    let k = alpha.num_classes();
    let kk = T::from_count(k);
    let mut grad = vec![T::zero(); alpha.as_slice().len()];
    let mut tilde = vec![T::one(); k];
    for i in 0..alpha.len() {
        if !targets.is_active(i) {
            continue;
        }
        let gt = targets.target(i)?;
        let row = alpha.row(i);
        let s: T = row.iter().copied().sum();
        tilde.copy_from_slice(row);
        tilde[gt] = T::one();
        let s_tilde: T = tilde.iter().copied().sum();
        let kl_shared = (s_tilde - kk) * trigamma(s_tilde);
        let out = &mut grad[i * k..(i + 1) * k];
        for j in 0..k {
            // d/dα_j of log(S/α_gt)
            let mut d = s.recip();
            if j == gt {
                d -= row[j].recip();
            } else {
                // α̃_j = α_j off the ground truth; the gt entry is pinned at 1
                d += lambda * ((tilde[j] - T::one()) * trigamma(tilde[j]) - kl_shared);
            }
            out[j] = d * sigmoid(logits.row(i)[j]);
        }
    }
    Ok(grad)
}

/// Heatmap MSE over all cells and offset L1 averaged over the components of valid cells.
/// An empty mask yields an offset loss of 0.
pub fn aux_losses<T: Real>(
    heatmap_pred: &[T],
    heatmap_gt: &[T],
    offsets_pred: &[[T; 2]],
    offsets_gt: &[[T; 2]],
    valid_mask: &[bool],
) -> Result<(T, T)> {
    let cells = heatmap_gt.len();
    if heatmap_pred.len() != cells
        || offsets_pred.len() != cells
        || offsets_gt.len() != cells
        || valid_mask.len() != cells
    {
        return Err(Error::Integrity("auxiliary loss inputs differ in shape".into()));
    }
    let sq: Vec<T> = heatmap_pred
        .iter()
        .zip(heatmap_gt)
        .map(|(&a, &b)| (a - b) * (a - b))
        .collect();
    let mse = if cells == 0 {
        T::zero()
    } else {
        pairwise_sum(&sq) / T::from_count(cells)
    };
    let abs: Vec<T> = (0..cells)
        .filter(|&c| valid_mask[c])
        .flat_map(|c| {
            let (p, g) = (offsets_pred[c], offsets_gt[c]);
            [(p[0] - g[0]).abs(), (p[1] - g[1]).abs()]
        })
        .collect();
    let l1 = if abs.is_empty() {
        T::zero()
    } else {
        pairwise_sum(&abs) / T::from_count(abs.len())
    };
    Ok((mse, l1))
}

/// All loss terms and their weighted total (Lovász term not modeled, weight 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub sem_log: T,
    pub sem_kl: T,
    pub lambda_t: T,
    pub heat_mse: T,
    pub offset_l1: T,
    pub total: T,
}

impl<T: Real> LossBreakdown<T> {
    pub fn new(sem: SemanticLoss<T>, heat_mse: T, offset_l1: T, weights: &LossWeights<T>) -> Self {
        Self {
            sem_log: sem.log,
            sem_kl: sem.kl,
            lambda_t: sem.lambda,
            heat_mse,
            offset_l1,
            total: sem.log + sem.lambda * sem.kl + weights.heat * heat_mse + weights.offset * offset_l1,
        }
    }
}
