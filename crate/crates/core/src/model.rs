//! Domain types shared by every stage: point clouds, panoptic labels,
//! Dirichlet evidence fields and the class taxonomy with its label codec.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::num::Real;

/// Training class id. Values `>= K` are reserved; the taxonomy's ignore id is one of them.
pub type ClassId = u16;

/// Largest encodable instance id (upper 16 bits of a packed label).
pub const MAX_INSTANCE: u32 = 0xFFFF;

/// Result of unpacking one raw 32-bit label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decoded {
    pub semantic: ClassId,
    pub instance: u32,
    /// False when the raw semantic id was not in the mapping and degraded to ignore.
    pub known: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTaxonomy {
    names: Vec<String>,
    is_thing: Vec<bool>,
    ignore_id: ClassId,
    raw_to_train: BTreeMap<u16, ClassId>,
    train_to_raw: Vec<u16>,
}

impl ClassTaxonomy {
    /// `classes` lists `(name, is_thing, canonical raw id)` in training-id order.
    /// `raw_map` adds further raw ids mapped onto a training class or onto `ignore_id`.
    pub fn new(
        classes: Vec<(String, bool, u16)>,
        ignore_id: ClassId,
        raw_map: impl IntoIterator<Item = (u16, ClassId)>,
    ) -> Result<Self> {
        let k = classes.len();
        if k == 0 {
            return Err(Error::Contract("taxonomy needs at least one class".into()));
        }
        if (ignore_id as usize) < k {
            return Err(Error::Contract(format!(
                "ignore id {ignore_id} collides with a training class (K = {k})"
            )));
        }
        let mut raw_to_train = BTreeMap::new();
        let mut names = Vec::with_capacity(k);
        let mut is_thing = Vec::with_capacity(k);
        let mut train_to_raw = Vec::with_capacity(k);
        for (train, (name, thing, raw)) in classes.into_iter().enumerate() {
            if raw_to_train.insert(raw, train as ClassId).is_some() {
                return Err(Error::Contract(format!("raw id {raw} mapped twice")));
            }
            names.push(name);
            is_thing.push(thing);
            train_to_raw.push(raw);
        }
        for (raw, train) in raw_map {
            if train != ignore_id && (train as usize) >= k {
                return Err(Error::Contract(format!("raw id {raw} maps to unknown class {train}")));
            }
            match raw_to_train.get(&raw) {
                Some(&t) if t != train => {
                    return Err(Error::Contract(format!("raw id {raw} mapped twice")));
                }
                _ => {
                    raw_to_train.insert(raw, train);
                }
            }
        }
        if train_to_raw.contains(&0) {
            return Err(Error::Contract("raw id 0 is reserved for unlabeled points".into()));
        }
        raw_to_train.insert(0, ignore_id);
        Ok(Self {
            names,
            is_thing,
            ignore_id,
            raw_to_train,
            train_to_raw,
        })
    }

    /// The SemanticKITTI evaluation taxonomy: 19 classes, the first 8 are things.
    pub fn semantic_kitti() -> Self {
        const CLASSES: [(&str, bool, u16); 19] = [
            ("car", true, 10),
            ("bicycle", true, 11),
            ("motorcycle", true, 15),
            ("truck", true, 18),
            ("other-vehicle", true, 20),
            ("person", true, 30),
            ("bicyclist", true, 31),
            ("motorcyclist", true, 32),
            ("road", false, 40),
            ("parking", false, 44),
            ("sidewalk", false, 48),
            ("other-ground", false, 49),
            ("building", false, 50),
            ("fence", false, 51),
            ("vegetation", false, 70),
            ("trunk", false, 71),
            ("terrain", false, 72),
            ("pole", false, 80),
            ("traffic-sign", false, 81),
        ];
        const IGNORE: ClassId = 255;
        // Raw ids folded onto base classes (moving objects, lane markings) or ignored.
        const EXTRA: [(u16, ClassId); 15] = [
            (1, IGNORE),
            (13, 4),
            (16, 4),
            (52, IGNORE),
            (60, 8),
            (99, IGNORE),
            (252, 0),
            (253, 6),
            (254, 5),
            (255, 7),
            (256, 4),
            (257, 4),
            (258, 3),
            (259, 4),
            (0, IGNORE),
        ];
        Self::new(
            CLASSES.iter().map(|&(n, t, r)| (n.to_string(), t, r)).collect(),
            IGNORE,
            EXTRA,
        )
        .expect("built-in taxonomy is consistent")
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn ignore_id(&self) -> ClassId {
        self.ignore_id
    }

    pub fn name(&self, class: ClassId) -> Option<&str> {
        self.names.get(class as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn class_by_name(&self, name: &str) -> Option<ClassId> {
        self.names.iter().position(|n| n == name).map(|i| i as ClassId)
    }

    /// True for evaluated classes; false for ignore and anything out of range.
    pub fn is_valid(&self, class: ClassId) -> bool {
        (class as usize) < self.names.len()
    }

    pub fn is_ignore(&self, class: ClassId) -> bool {
        class == self.ignore_id
    }

    pub fn is_thing(&self, class: ClassId) -> bool {
        self.is_thing.get(class as usize).copied().unwrap_or(false)
    }

    pub fn thing_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..self.names.len() as ClassId).filter(|&c| self.is_thing(c))
    }

    pub fn stuff_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..self.names.len() as ClassId).filter(|&c| !self.is_thing(c))
    }

    pub fn raw_map(&self) -> &BTreeMap<u16, ClassId> {
        &self.raw_to_train
    }

    pub fn canonical_raw(&self, class: ClassId) -> Option<u16> {
        self.train_to_raw.get(class as usize).copied()
    }

    /// Unpacks a SemanticKITTI label: low 16 bits semantic, high 16 bits instance.
    /// Instance ids are dropped for ignore and stuff classes.
    pub fn decode(&self, raw: u32) -> Decoded {
        let raw_sem = (raw & 0xFFFF) as u16;
        let (semantic, known) = match self.raw_to_train.get(&raw_sem) {
            Some(&c) => (c, true),
            None => (self.ignore_id, false),
        };
        let instance = if self.is_thing(semantic) { raw >> 16 } else { 0 };
        Decoded {
            semantic,
            instance,
            known,
        }
    }

    /// Inverse of [`decode`](Self::decode) on valid pairs.
    pub fn encode(&self, semantic: ClassId, instance: u32) -> Result<u32> {
        if instance > MAX_INSTANCE {
            return Err(Error::Range {
                what: "instance id",
                value: instance.to_string(),
            });
        }
        if self.is_ignore(semantic) {
            return if instance == 0 {
                Ok(0)
            } else {
                Err(Error::Contract(format!(
                    "ignore label cannot carry instance {instance}"
                )))
            };
        }
        let raw = self.canonical_raw(semantic).ok_or_else(|| Error::Range {
            what: "semantic class",
            value: semantic.to_string(),
        })?;
        if instance != 0 && !self.is_thing(semantic) {
            return Err(Error::Contract(format!(
                "stuff class {semantic} cannot carry instance {instance}"
            )));
        }
        Ok((instance << 16) | raw as u32)
    }
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self::semantic_kitti()
    }
}

/// Structure-of-arrays point cloud; all channels share one index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud<T> {
    x: Vec<T>,
    y: Vec<T>,
    z: Vec<T>,
    remission: Vec<T>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(x: Vec<T>, y: Vec<T>, z: Vec<T>, remission: Vec<T>) -> Result<Self> {
        let n = x.len();
        if y.len() != n || z.len() != n || remission.len() != n {
            return Err(Error::Integrity(format!(
                "channel lengths differ: x={} y={} z={} remission={}",
                n,
                y.len(),
                z.len(),
                remission.len()
            )));
        }
        Ok(Self { x, y, z, remission })
    }

    pub fn from_points(points: &[[T; 4]]) -> Self {
        let mut c = Self::with_capacity(points.len());
        for p in points {
            c.push(p[0], p[1], p[2], p[3]);
        }
        c
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            remission: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, x: T, y: T, z: T, remission: T) {
        self.x.push(x);
        self.y.push(y);
        self.z.push(z);
        self.remission.push(remission);
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[T] {
        &self.x
    }
    pub fn y(&self) -> &[T] {
        &self.y
    }
    pub fn z(&self) -> &[T] {
        &self.z
    }
    pub fn remission(&self) -> &[T] {
        &self.remission
    }

    pub fn position(&self, i: usize) -> [T; 3] {
        [self.x[i], self.y[i], self.z[i]]
    }

    pub fn positions(&self) -> Vec<[T; 3]> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        let conv = |v: &[T]| -> Vec<U> {
            v.iter()
                .map(|&a| U::from_f64(a.as_f64()).unwrap_or_else(U::nan))
                .collect()
        };
        PointCloud {
            x: conv(&self.x),
            y: conv(&self.y),
            z: conv(&self.z),
            remission: conv(&self.remission),
        }
    }

    /// Reorders points so that output point `i` is input point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let pick = |v: &[T]| order.iter().map(|&i| v[i]).collect();
        Self {
            x: pick(&self.x),
            y: pick(&self.y),
            z: pick(&self.z),
            remission: pick(&self.remission),
        }
    }
}

/// Per-point semantic class and instance id; instance 0 means "no instance".
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PanopticLabelSet {
    pub semantic: Vec<ClassId>,
    pub instance: Vec<u32>,
}

impl PanopticLabelSet {
    pub fn new(semantic: Vec<ClassId>, instance: Vec<u32>) -> Result<Self> {
        if semantic.len() != instance.len() {
            return Err(Error::Integrity(format!(
                "semantic has {} entries but instance has {}",
                semantic.len(),
                instance.len()
            )));
        }
        Ok(Self { semantic, instance })
    }

    pub fn filled(n: usize, semantic: ClassId) -> Self {
        Self {
            semantic: vec![semantic; n],
            instance: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    pub fn encode(&self, taxonomy: &ClassTaxonomy) -> Result<Vec<u32>> {
        self.semantic
            .iter()
            .zip(&self.instance)
            .map(|(&s, &i)| taxonomy.encode(s, i))
            .collect()
    }

    /// Decodes a packed label array; returns the labels and the count of unknown raw ids.
    pub fn decode(raw: &[u32], taxonomy: &ClassTaxonomy) -> (Self, usize) {
        let mut out = Self {
            semantic: Vec::with_capacity(raw.len()),
            instance: Vec::with_capacity(raw.len()),
        };
        let mut unknown = 0;
        for &r in raw {
            let d = taxonomy.decode(r);
            unknown += usize::from(!d.known);
            out.semantic.push(d.semantic);
            out.instance.push(d.instance);
        }
        (out, unknown)
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            semantic: order.iter().map(|&i| self.semantic[i]).collect(),
            instance: order.iter().map(|&i| self.instance[i]).collect(),
        }
    }
}

/// Row-major `n × K` Dirichlet concentrations, every entry `>= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletField<T> {
    k: usize,
    alpha: Vec<T>,
}

impl<T: Real> DirichletField<T> {
    pub fn new(k: usize, alpha: Vec<T>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Contract("Dirichlet field needs K >= 1".into()));
        }
        if !alpha.len().is_multiple_of(k) {
            return Err(Error::Integrity(format!(
                "{} concentrations do not split into rows of K = {k}",
                alpha.len()
            )));
        }
        if let Some(pos) = alpha.iter().position(|a| !(a.is_finite() && *a >= T::one())) {
            return Err(Error::Range {
                what: "Dirichlet concentration",
                value: format!("alpha[{pos}] = {}", alpha[pos]),
            });
        }
        Ok(Self { k, alpha })
    }

    /// All-ones field: zero evidence, maximal uncertainty.
    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            k,
            alpha: vec![T::one(); n * k],
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.alpha[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.alpha.chunks_exact(self.k)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.alpha
    }

    pub fn into_vec(self) -> Vec<T> {
        self.alpha
    }

    /// Dirichlet strength `S = Σ α` of row `i`.
    pub fn strength(&self, i: usize) -> T {
        self.row(i).iter().copied().sum()
    }

    /// Overwrites row `i`; the caller guarantees entries stay `>= 1`.
    pub(crate) fn set_row(&mut self, i: usize, row: &[T]) {
        self.alpha[i * self.k..(i + 1) * self.k].copy_from_slice(row);
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut alpha = Vec::with_capacity(order.len() * self.k);
        for &i in order {
            alpha.extend_from_slice(self.row(i));
        }
        Self { k: self.k, alpha }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    NonFinite {
        index: usize,
        channel: &'static str,
    },
    RemissionOutOfRange {
        index: usize,
    },
    InvalidClass {
        index: usize,
        class: ClassId,
    },
    InstanceOnNonThing {
        index: usize,
        class: ClassId,
        instance: u32,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch { what, expected, actual } => {
                write!(f, "{what}: expected length {expected}, got {actual}")
            }
            Violation::NonFinite { index, channel } => {
                write!(f, "point {index}: non-finite {channel}")
            }
            Violation::RemissionOutOfRange { index } => {
                write!(f, "point {index}: remission outside [0, 1]")
            }
            Violation::InvalidClass { index, class } => {
                write!(f, "point {index}: class {class} is neither valid nor ignore")
            }
            Violation::InstanceOnNonThing { index, class, instance } => {
                write!(f, "point {index}: instance {instance} on non-thing class {class}")
            }
        }
    }
}

/// Reports every broken invariant of a labeled cloud; empty means well-formed.
pub fn validate<T: Real>(cloud: &PointCloud<T>, labels: &PanopticLabelSet, taxonomy: &ClassTaxonomy) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = cloud.len();
    for (what, actual) in [
        ("semantic labels", labels.semantic.len()),
        ("instance labels", labels.instance.len()),
    ] {
        if actual != n {
            out.push(Violation::LengthMismatch {
                what,
                expected: n,
                actual,
            });
        }
    }
    for i in 0..n {
        for (channel, v) in [("x", cloud.x[i]), ("y", cloud.y[i]), ("z", cloud.z[i])] {
            if !v.is_finite() {
                out.push(Violation::NonFinite { index: i, channel });
            }
        }
        let r = cloud.remission[i];
        if !(r >= T::zero() && r <= T::one()) {
            out.push(Violation::RemissionOutOfRange { index: i });
        }
    }
    for (i, (&class, &instance)) in labels.semantic.iter().zip(&labels.instance).enumerate() {
        if !taxonomy.is_valid(class) && !taxonomy.is_ignore(class) {
            out.push(Violation::InvalidClass { index: i, class });
        } else if instance != 0 && !taxonomy.is_thing(class) {
            out.push(Violation::InstanceOnNonThing {
                index: i,
                class,
                instance,
            });
        }
    }
    out
}
