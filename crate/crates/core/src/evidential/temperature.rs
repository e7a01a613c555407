//! Temperature scaling baseline: one scalar divides all logits before softmax.

use super::Logits;
use crate::error::{Error, Result};
use crate::model::ClassId;
use crate::num::{argmax, pairwise_sum, Real};

const T_LO: f64 = 0.05;
const T_HI: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureFit<T> {
    pub temperature: T,
    /// Mean negative log-likelihood at the fitted temperature.
    pub nll: T,
    /// Set when the held-out set could not identify a temperature and `init` was returned.
    pub degenerate: bool,
}

fn log_softmax_at<T: Real>(row: &[T], scale: T, class: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max) * scale;
    let lse = row.iter().map(|&l| (l * scale - max).exp()).sum::<T>().ln() + max;
    row[class] * scale - lse
}

fn mean_nll<T: Real>(logits: &Logits<T>, targets: &[ClassId], temperature: T) -> T {
    let inv = temperature.recip();
    let terms: Vec<T> = targets
        .iter()
        .enumerate()
        .map(|(i, &c)| -log_softmax_at(logits.row(i), inv, c as usize))
        .collect();
    pairwise_sum(&terms) / T::from_count(terms.len())
}

/// Golden-section search for the NLL-minimizing temperature on `[0.05, 20]`.
pub fn fit_temperature<T: Real>(logits: &Logits<T>, targets: &[ClassId], init: T) -> Result<TemperatureFit<T>> {
    if logits.is_empty() || targets.len() != logits.len() {
        return Err(Error::Contract(format!(
            "temperature fit needs a nonempty held-out set with one target per row ({} rows, {} targets)",
            logits.len(),
            targets.len()
        )));
    }
    let k = logits.num_classes();
    if let Some(&bad) = targets.iter().find(|&&c| c as usize >= k) {
        return Err(Error::Range {
            what: "target class",
            value: bad.to_string(),
        });
    }
    let single_class = targets.iter().all(|&c| c == targets[0]);
    if k < 2 || single_class {
        return Ok(TemperatureFit {
            temperature: init,
            nll: mean_nll(logits, targets, init),
            degenerate: true,
        });
    }

    let phi = T::lit((5f64.sqrt() - 1.0) / 2.0);
    let (mut a, mut b) = (T::lit(T_LO), T::lit(T_HI));
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = mean_nll(logits, targets, c);
    let mut fd = mean_nll(logits, targets, d);
    let tol = T::lit(1e-7);
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = mean_nll(logits, targets, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = mean_nll(logits, targets, d);
        }
    }
    let temperature = (a + b) / T::lit(2.0);
    Ok(TemperatureFit {
        temperature,
        nll: mean_nll(logits, targets, temperature),
        degenerate: false,
    })
}

/// Row-major softmax of `logits / temperature`.
pub fn temperature_softmax<T: Real>(logits: &Logits<T>, temperature: T) -> Vec<T> {
    let inv = temperature.recip();
    let mut out = Vec::with_capacity(logits.as_slice().len());
    for i in 0..logits.len() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&l| ((l - max) * inv).exp()));
        let z: T = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    out
}

/// Predicted class and confidence (max softmax probability) per row.
/// The matching uncertainty is `1 - confidence`.
pub fn softmax_confidence<T: Real>(logits: &Logits<T>, temperature: T) -> (Vec<ClassId>, Vec<T>) {
    let k = logits.num_classes();
    let probs = temperature_softmax(logits, temperature);
    probs
        .chunks_exact(k)
        .map(|r| {
            let c = argmax(r);
            (c as ClassId, r[c])
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Logits whose softmax is the true posterior of the sampled labels.
    fn calibrated_set(n: usize, k: usize, seed: u64) -> (Vec<f64>, Vec<ClassId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = Vec::with_capacity(n * k);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..k)
                .map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut draw = rng.random::<f64>() * z;
            let mut label = k - 1;
            for (c, wc) in w.iter().enumerate() {
                if draw < *wc {
                    label = c;
                    break;
                }
                draw -= wc;
            }
            logits.extend(row);
            labels.push(label as ClassId);
        }
        (logits, labels)
    }

    #[test]
    fn calibrated_logits_give_unit_temperature() {
        let (l, y) = calibrated_set(20_000, 5, 1);
        let fit = fit_temperature(&Logits::new(5, l).unwrap(), &y, 1.0).unwrap();
        assert!((fit.temperature - 1.0).abs() < 0.1, "T = {}", fit.temperature);
    }

    #[test]
    fn scaled_logits_recover_scale() {
        let (l, y) = calibrated_set(20_000, 5, 2);
        let scaled: Vec<f64> = l.iter().map(|v| v * 3.0).collect();
        let fit = fit_temperature(&Logits::new(5, scaled).unwrap(), &y, 1.0f64).unwrap();
        assert!((fit.temperature - 3.0).abs() < 0.3, "T = {}", fit.temperature);
    }

    #[test]
    fn single_class_returns_init() {
        let l = Logits::new(3, vec![1.0, 0.0, 0.0, 2.0, 1.0, 0.0f64]).unwrap();
        let fit = fit_temperature(&l, &[0, 0], 1.0).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.temperature, 1.0);
        assert!(fit_temperature(&Logits::new(3, Vec::<f64>::new()).unwrap(), &[], 1.0f64).is_err());
    }

    #[test]
    fn temperature_keeps_argmax() {
        let (l, _) = calibrated_set(500, 7, 3);
        let logits = Logits::new(7, l).unwrap();
        let (base, _) = softmax_confidence(&logits, 1.0);
        for t in [0.05, 0.3, 2.0, 19.0] {
            assert_eq!(softmax_confidence(&logits, t).0, base);
        }
    }
}
