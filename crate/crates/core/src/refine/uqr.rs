//! Uncertainty-driven selection and a single-layer KPConv refiner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::kdtree::KdTree;
use crate::error::{Error, Result};
use crate::evidential::toy::fit_linear;
use crate::evidential::{predict, LinearEvidential, Prediction, ToyConfig, ToyReport};
use crate::model::{ClassId, ClassTaxonomy, DirichletField, PanopticLabelSet, PointCloud};
use crate::num::{argmax, softplus, Real};

/// Indices of the `n` largest `u` (ties to the lower index), ascending.
pub fn uqr_select<T: Real>(u: &[T], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    if n < u.len() {
        idx.sort_by(|&a, &b| {
            u[b].partial_cmp(&u[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(n);
        idx.sort_unstable();
    }
    idx
}

/// Rows of `[p (K), x, y, z, remission, u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UqrFeatures<T> {
    k: usize,
    data: Vec<T>,
}

impl<T: Real> UqrFeatures<T> {
    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.k + 5
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn probabilities(&self, i: usize) -> &[T] {
        &self.row(i)[..self.k]
    }

    pub fn position(&self, i: usize) -> [T; 3] {
        let r = self.row(i);
        [r[self.k], r[self.k + 1], r[self.k + 2]]
    }

    pub fn remission(&self, i: usize) -> T {
        self.row(i)[self.k + 3]
    }

    pub fn uncertainty(&self, i: usize) -> T {
        self.row(i)[self.k + 4]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { k: self.k, data }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(mut self, other: &Self) -> Result<Self> {
        if other.k != self.k {
            return Err(Error::Integrity(format!(
                "cannot join K = {} and K = {} features",
                self.k, other.k
            )));
        }
        self.data.extend_from_slice(&other.data);
        Ok(self)
    }
}

pub fn assemble_features<T: Real>(pred: &Prediction<T>, cloud: &PointCloud<T>) -> Result<UqrFeatures<T>> {
    if pred.len() != cloud.len() {
        return Err(Error::Integrity(format!(
            "{} predictions for {} points",
            pred.len(),
            cloud.len()
        )));
    }
    let k = pred.num_classes();
    let mut data = Vec::with_capacity(cloud.len() * (k + 5));
    for i in 0..cloud.len() {
        data.extend_from_slice(pred.row(i));
        data.extend_from_slice(&[
            cloud.x()[i],
            cloud.y()[i],
            cloud.z()[i],
            cloud.remission()[i],
            pred.u[i],
        ]);
    }
    Ok(UqrFeatures { k, data })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KpConvConfig<T> {
    pub kernel_points: usize,
    pub mid_channels: usize,
    /// Neighborhood radius in meters.
    pub radius: T,
    /// Kernel point influence distance in meters.
    pub sigma: T,
}

impl<T: Real> Default for KpConvConfig<T> {
    fn default() -> Self {
        Self {
            kernel_points: 15,
            mid_channels: 64,
            radius: T::lit(1.2),
            sigma: T::lit(0.6),
        }
    }
}

/// One point convolution, ReLU, and a linear classifier producing evidence.
///
/// `weights` is `M × (K+5) × C_mid` and `classifier` is `C_mid × K`, both
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KPConvLayer<T> {
    pub classes: usize,
    pub mid_channels: usize,
    pub kernel_points: Vec<[T; 3]>,
    pub radius: T,
    pub sigma: T,
    pub weights: Vec<T>,
    pub classifier: Vec<T>,
    pub bias: Vec<T>,
}

/// A center point plus `m − 1` points spread on a sphere of two thirds of the
/// radius.
pub fn rigid_kernel<T: Real>(m: usize, radius: T) -> Vec<[T; 3]> {
    let mut pts = vec![[T::zero(); 3]];
    let shell = radius.as_f64() * 2.0 / 3.0;
    let n = m.saturating_sub(1);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for i in 0..n {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let th = golden * i as f64;
        pts.push([
            T::lit(shell * r * th.cos()),
            T::lit(shell * r * th.sin()),
            T::lit(shell * z),
        ]);
    }
    pts.truncate(m);
    pts
}

impl<T: Real> KPConvLayer<T> {
    pub fn zeros(classes: usize, cfg: &KpConvConfig<T>) -> Self {
        let m = cfg.kernel_points;
        let c = cfg.mid_channels;
        Self {
            classes,
            mid_channels: c,
            kernel_points: rigid_kernel(m, cfg.radius),
            radius: cfg.radius,
            sigma: cfg.sigma,
            weights: vec![T::zero(); m * (classes + 5) * c],
            classifier: vec![T::zero(); c * classes],
            bias: vec![T::zero(); classes],
        }
    }

    /// Gaussian initialization scaled by fan-in.
    pub fn random(classes: usize, cfg: &KpConvConfig<T>, seed: u64) -> Self {
        let mut layer = Self::zeros(classes, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = (cfg.kernel_points * (classes + 5)).max(1) as f64;
        let conv = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        for w in &mut layer.weights {
            *w = T::lit(conv.sample(&mut rng));
        }
        let cls = Normal::new(0.0, (1.0 / cfg.mid_channels.max(1) as f64).sqrt()).expect("valid std");
        for w in &mut layer.classifier {
            *w = T::lit(cls.sample(&mut rng));
        }
        layer
    }

    pub fn in_channels(&self) -> usize {
        self.classes + 5
    }

    pub fn check(&self) -> Result<()> {
        let m = self.kernel_points.len();
        if m == 0 || self.classes == 0 || self.mid_channels == 0 {
            return Err(Error::Contract("KPConv layer needs M, K and C_mid >= 1".into()));
        }
        if !(self.radius > T::zero()) || !(self.sigma > T::zero()) {
            return Err(Error::Range {
                what: "KPConv radius/sigma",
                value: format!("{} / {}", self.radius, self.sigma),
            });
        }
        let expect = [
            (
                "weights",
                self.weights.len(),
                m * self.in_channels() * self.mid_channels,
            ),
            ("classifier", self.classifier.len(), self.mid_channels * self.classes),
            ("bias", self.bias.len(), self.classes),
        ];
        for (what, got, want) in expect {
            if got != want {
                return Err(Error::Integrity(format!(
                    "KPConv {what} has {got} values, expected {want}"
                )));
            }
        }
        for (i, p) in self.kernel_points.iter().enumerate() {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if !(norm <= self.radius) {
                return Err(Error::Contract(format!("kernel point {i} lies outside the radius")));
            }
        }
        let finite = self
            .weights
            .iter()
            .chain(&self.classifier)
            .chain(&self.bias)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("KPConv parameters".into()));
        }
        Ok(())
    }
}

/// Hidden activations (`n × C_mid`, after ReLU) and a pass-through flag for
/// points with zero total kernel influence.
fn hidden<T: Real>(
    features: &UqrFeatures<T>,
    positions: &[[T; 3]],
    layer: &KPConvLayer<T>,
) -> Result<(Vec<T>, Vec<bool>)> {
    layer.check()?;
    if features.num_classes() != layer.classes {
        return Err(Error::Integrity(format!(
            "features have K = {}, layer has K = {}",
            features.num_classes(),
            layer.classes
        )));
    }
    if positions.len() != features.len() {
        return Err(Error::Integrity(format!(
            "{} positions for {} feature rows",
            positions.len(),
            features.len()
        )));
    }
    let n = features.len();
    let d = layer.in_channels();
    let c_mid = layer.mid_channels;
    let m = layer.kernel_points.len();
    let tree = KdTree::build(positions.to_vec())?;
    let mut out = vec![T::zero(); n * c_mid];
    let mut passed = vec![false; n];
    let mut gathered = vec![T::zero(); m * d];
    for a in 0..n {
        gathered.iter_mut().for_each(|g| *g = T::zero());
        let mut total = T::zero();
        for (_, i) in tree.within(&positions[a], layer.radius) {
            let rel = [
                positions[i][0] - positions[a][0],
                positions[i][1] - positions[a][1],
                positions[i][2] - positions[a][2],
            ];
            let f = features.row(i);
            for (km, kp) in layer.kernel_points.iter().enumerate() {
                let dx = rel[0] - kp[0];
                let dy = rel[1] - kp[1];
                let dz = rel[2] - kp[2];
                let h = T::one() - (dx * dx + dy * dy + dz * dz).sqrt() / layer.sigma;
                if h > T::zero() {
                    total += h;
                    for (g, &fj) in gathered[km * d..(km + 1) * d].iter_mut().zip(f) {
                        *g += h * fj;
                    }
                }
            }
        }
        if total == T::zero() {
            passed[a] = true;
            continue;
        }
        let row = &mut out[a * c_mid..(a + 1) * c_mid];
        for (mj, &g) in gathered.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let w = &layer.weights[mj * c_mid..(mj + 1) * c_mid];
            for (o, &wc) in row.iter_mut().zip(w) {
                *o += g * wc;
            }
        }
        for o in row.iter_mut() {
            *o = o.max(T::zero());
        }
    }
    Ok((out, passed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpConvOutput<T> {
    pub alpha: DirichletField<T>,
    pub u: Vec<T>,
    /// Rows whose kernel influence was zero. Their α is rebuilt from the input
    /// `p` and `u` as `α = p·K/u`.
    pub passed_through: Vec<bool>,
}

/// Refined evidence for every row of `features`. Neighborhoods are taken
/// within the given rows; `positions` supplies the geometry.
pub fn kpconv_forward<T: Real>(
    features: &UqrFeatures<T>,
    positions: &[[T; 3]],
    layer: &KPConvLayer<T>,
) -> Result<KpConvOutput<T>> {
    let (h, passed) = hidden(features, positions, layer)?;
    let k = layer.classes;
    let c_mid = layer.mid_channels;
    let kk = T::from_count(k);
    let mut alpha = Vec::with_capacity(features.len() * k);
    for (a, &pass) in passed.iter().enumerate() {
        if pass {
            let s = kk / features.uncertainty(a);
            alpha.extend(features.probabilities(a).iter().map(|&p| (p * s).max(T::one())));
            continue;
        }
        let row = &h[a * c_mid..(a + 1) * c_mid];
        for c in 0..k {
            let mut l = layer.bias[c];
            for (j, &x) in row.iter().enumerate() {
                l += x * layer.classifier[j * k + c];
            }
            alpha.push(softplus(l) + T::one());
        }
    }
    let alpha = DirichletField::new(k, alpha)?;
    let u = predict(&alpha).u;
    Ok(KpConvOutput {
        alpha,
        u,
        passed_through: passed,
    })
}

/// Fits the classifier on top of the fixed convolution with the toy trainer.
/// Pass-through rows are left out of training.
pub fn fit_classifier<T: Real>(
    layer: &mut KPConvLayer<T>,
    features: &UqrFeatures<T>,
    positions: &[[T; 3]],
    labels: &[ClassId],
    cfg: &ToyConfig<T>,
) -> Result<ToyReport<T>> {
    let rows: Vec<usize> = (0..features.len()).collect();
    fit_classifier_rows(layer, features, positions, labels, &rows, cfg)
}

/// [`fit_classifier`] trained on `rows` only. Neighborhoods still span all
/// rows of `features`; `labels` is indexed like `features`.
pub fn fit_classifier_rows<T: Real>(
    layer: &mut KPConvLayer<T>,
    features: &UqrFeatures<T>,
    positions: &[[T; 3]],
    labels: &[ClassId],
    rows: &[usize],
    cfg: &ToyConfig<T>,
) -> Result<ToyReport<T>> {
    if labels.len() != features.len() {
        return Err(Error::Integrity(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.len()
        )));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= features.len()) {
        return Err(Error::Integrity(format!("training row {bad} of {}", features.len())));
    }
    let (h, passed) = hidden(features, positions, layer)?;
    let c_mid = layer.mid_channels;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for &a in rows {
        if !passed[a] {
            x.extend_from_slice(&h[a * c_mid..(a + 1) * c_mid]);
            y.push(labels[a]);
        }
    }
    // Train on standardized channels, then fold the scaling into the weights.
    let k = layer.classes;
    let m = T::from_count(y.len().max(1));
    let mut mean = vec![T::zero(); c_mid];
    let mut scale = vec![T::zero(); c_mid];
    for row in x.chunks_exact(c_mid) {
        for (mu, &v) in mean.iter_mut().zip(row) {
            *mu += v / m;
        }
    }
    for row in x.chunks_exact(c_mid) {
        for ((sd, &mu), &v) in scale.iter_mut().zip(&mean).zip(row) {
            *sd += (v - mu) * (v - mu) / m;
        }
    }
    for sd in &mut scale {
        *sd = if *sd > T::zero() { sd.sqrt() } else { T::one() };
    }
    for row in x.chunks_exact_mut(c_mid) {
        for ((v, &mu), &sd) in row.iter_mut().zip(&mean).zip(&scale) {
            *v = (*v - mu) / sd;
        }
    }
    let mut model = LinearEvidential {
        dim: c_mid,
        classes: k,
        weights: (0..c_mid * k).map(|i| layer.classifier[i] * scale[i / k]).collect(),
        bias: (0..k)
            .map(|c| {
                layer.bias[c]
                    + (0..c_mid)
                        .map(|j| layer.classifier[j * k + c] * mean[j])
                        .fold(T::zero(), |a, b| a + b)
            })
            .collect(),
    };
    let report = fit_linear(&mut model, &x, &y, cfg)?;
    for c in 0..k {
        let mut b = model.bias[c];
        for j in 0..c_mid {
            let w = model.weights[j * k + c] / scale[j];
            layer.classifier[j * k + c] = w;
            b -= w * mean[j];
        }
        layer.bias[c] = b;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UqrStats {
    pub selected: usize,
    /// Selected points whose α/u were replaced.
    pub refined: usize,
    pub passed_through: usize,
    /// Refined points whose semantic class changed.
    pub relabeled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UqrOutcome<T> {
    /// Selected point indices, ascending.
    pub selected: Vec<usize>,
    pub labels: PanopticLabelSet,
    pub alpha: DirichletField<T>,
    pub u: Vec<T>,
    pub stats: UqrStats,
}

/// Replaces class, α and u of the `n_select` most uncertain points with the
/// refiner's output. Points labeled ignore are never selected. Instance ids
/// are kept, except that a point moved to a stuff class gets instance 0.
pub fn uqr_refine<T: Real>(
    cloud: &PointCloud<T>,
    labels: &PanopticLabelSet,
    alpha: &DirichletField<T>,
    layer: &KPConvLayer<T>,
    n_select: usize,
    taxonomy: &ClassTaxonomy,
) -> Result<UqrOutcome<T>> {
    let n = cloud.len();
    if labels.len() != n || alpha.len() != n {
        return Err(Error::Integrity(format!(
            "uQR inputs disagree: {n} points, {} labels, {} α rows",
            labels.len(),
            alpha.len()
        )));
    }
    let pred = predict(alpha);
    let candidates: Vec<usize> = (0..n).filter(|&i| !taxonomy.is_ignore(labels.semantic[i])).collect();
    let cand_u: Vec<T> = candidates.iter().map(|&i| pred.u[i]).collect();
    let selected: Vec<usize> = uqr_select(&cand_u, n_select)
        .into_iter()
        .map(|j| candidates[j])
        .collect();

    let mut out_labels = labels.clone();
    let mut out_alpha = alpha.clone();
    let mut u = pred.u.clone();
    let mut stats = UqrStats {
        selected: selected.len(),
        ..UqrStats::default()
    };
    if !selected.is_empty() {
        let features = assemble_features(&pred, cloud)?.subset(&selected);
        let positions: Vec<[T; 3]> = selected.iter().map(|&i| cloud.position(i)).collect();
        let refined = kpconv_forward(&features, &positions, layer)?;
        for (a, &i) in selected.iter().enumerate() {
            if refined.passed_through[a] {
                stats.passed_through += 1;
                continue;
            }
            let row = refined.alpha.row(a);
            let class = argmax(row) as ClassId;
            if class != labels.semantic[i] {
                stats.relabeled += 1;
            }
            out_labels.semantic[i] = class;
            if !taxonomy.is_thing(class) {
                out_labels.instance[i] = 0;
            }
            out_alpha.set_row(i, row);
            u[i] = refined.u[a];
            stats.refined += 1;
        }
    }
    Ok(UqrOutcome {
        selected,
        labels: out_labels,
        alpha: out_alpha,
        u,
        stats,
    })
}
