//! Little-endian file formats: SemanticKITTI scans and labels, evidence dumps,
//! BEV center maps, refiner weights, the run configuration and taxonomy files.
//!
//! Writers go through a temporary file in the target directory and a rename,
//! so readers never see a partial file.

mod config;
mod taxonomy;

use std::fs;
use std::io::Write as _;
use std::path::Path;

pub use config::Config;
pub use taxonomy::{parse_taxonomy, read_taxonomy, taxonomy_to_text};

use crate::error::{Error, Result};
use crate::model::{ClassTaxonomy, DirichletField, PanopticLabelSet, PointCloud};
use crate::num::Real;
use crate::refine::KPConvLayer;

pub const ALPHA_MAGIC: &[u8; 4] = b"EVLA";
pub const BEV_MAGIC: &[u8; 4] = b"EVLB";
pub const FORMAT_VERSION: u16 = 1;
const KPCONV_TAG: &str = "EVLK";

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Bounds-checked little-endian cursor.
struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.bytes.len() as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn to_f32<T: Real>(v: T) -> f32 {
    v.to_f32().unwrap_or(f32::NAN)
}

fn from_f32<T: Real>(v: f32) -> T {
    T::lit(f64::from(v))
}

fn push_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn scan_to_bytes<T: Real>(cloud: &PointCloud<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for i in 0..cloud.len() {
        push_f32s(
            &mut out,
            [cloud.x()[i], cloud.y()[i], cloud.z()[i], cloud.remission()[i]].map(to_f32),
        );
    }
    out
}

pub fn scan_from_bytes<T: Real>(path: &Path, bytes: &[u8]) -> Result<PointCloud<T>> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::format(
            path,
            (bytes.len() - bytes.len() % 16) as u64,
            format!("scan length {} is not a multiple of 16", bytes.len()),
        ));
    }
    let values = Cursor::new(path, bytes).f32s(bytes.len() / 4, "points")?;
    let mut cloud = PointCloud::with_capacity(values.len() / 4);
    for p in values.chunks_exact(4) {
        cloud.push(from_f32(p[0]), from_f32(p[1]), from_f32(p[2]), from_f32(p[3]));
    }
    Ok(cloud)
}

/// Reads a `.bin` scan: four little-endian `f32` per point.
pub fn read_scan<T: Real>(path: &Path) -> Result<PointCloud<T>> {
    scan_from_bytes(path, &read_all(path)?)
}

pub fn write_scan<T: Real>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    write_atomic(path, &scan_to_bytes(cloud))
}

pub fn read_raw_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = read_all(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            path,
            (bytes.len() - bytes.len() % 4) as u64,
            format!("label length {} is not a multiple of 4", bytes.len()),
        ));
    }
    Cursor::new(path, &bytes).u32s(bytes.len() / 4, "labels")
}

pub fn write_raw_labels(path: &Path, raw: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = raw.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)
}

/// Reads and decodes a `.label` file. Returns the labels and the number of
/// raw ids the taxonomy did not know (decoded as ignore).
pub fn read_labels(path: &Path, taxonomy: &ClassTaxonomy) -> Result<(PanopticLabelSet, usize)> {
    Ok(PanopticLabelSet::decode(&read_raw_labels(path)?, taxonomy))
}

pub fn write_labels(path: &Path, labels: &PanopticLabelSet, taxonomy: &ClassTaxonomy) -> Result<()> {
    write_raw_labels(path, &labels.encode(taxonomy)?)
}

/// Point-count agreement between paired files.
pub fn check_count(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Integrity(format!(
            "{what} has {got} entries, expected {expected}"
        )));
    }
    Ok(())
}

/// Evidence dump.
///
/// Layout: `"EVLA"`, version `u16`, count `u32`, `K` `u16`, flags `u16`
/// (bit 0 instances, bit 1 refined uncertainty), then α as `count × K` `f32`
/// row-major, then `count` `u32` instance ids if flagged, then `count` `f32`
/// uncertainties if flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaDump {
    pub alpha: DirichletField<f32>,
    pub instances: Option<Vec<u32>>,
    /// Uncertainty that no longer follows from α, as left by pKNN transfer.
    pub refined_u: Option<Vec<f32>>,
}

impl AlphaDump {
    pub fn new<T: Real>(alpha: &DirichletField<T>) -> Self {
        let k = alpha.num_classes();
        let values: Vec<f32> = alpha.as_slice().iter().map(|&a| to_f32(a)).collect();
        Self {
            alpha: DirichletField::new(k, values).expect("α >= 1 survives rounding to f32"),
            instances: None,
            refined_u: None,
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// α converted to `T`.
    pub fn alpha_as<T: Real>(&self) -> DirichletField<T> {
        let values = self.alpha.as_slice().iter().map(|&a| from_f32(a)).collect();
        DirichletField::new(self.alpha.num_classes(), values).expect("valid dump")
    }

    /// Per-point uncertainty: the stored column if present, else `K / S`.
    pub fn uncertainty<T: Real>(&self) -> Vec<T> {
        match &self.refined_u {
            Some(u) => u.iter().map(|&v| from_f32(v)).collect(),
            None => crate::evidential::predict(&self.alpha_as::<T>()).u,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.alpha.len();
        let k = self.alpha.num_classes();
        let count = u32::try_from(n).map_err(|_| Error::Range {
            what: "dump point count",
            value: n.to_string(),
        })?;
        let k16 = u16::try_from(k).map_err(|_| Error::Range {
            what: "dump class count",
            value: k.to_string(),
        })?;
        for (what, len) in [
            ("instance column", self.instances.as_ref().map(Vec::len)),
            ("uncertainty column", self.refined_u.as_ref().map(Vec::len)),
        ] {
            if let Some(len) = len {
                check_count(what, len, n)?;
            }
        }
        let flags = u16::from(self.instances.is_some()) | (u16::from(self.refined_u.is_some()) << 1);
        let mut out = Vec::with_capacity(14 + n * (k + 2) * 4);
        out.extend_from_slice(ALPHA_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&k16.to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        push_f32s(&mut out, self.alpha.as_slice().iter().copied());
        if let Some(ids) = &self.instances {
            out.extend(ids.iter().flat_map(|v| v.to_le_bytes()));
        }
        if let Some(u) = &self.refined_u {
            push_f32s(&mut out, u.iter().copied());
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(path, bytes);
        let magic = c.take(4, "magic")?;
        if magic != ALPHA_MAGIC {
            return Err(Error::format(
                path,
                0,
                format!("bad magic {magic:?}, expected \"EVLA\""),
            ));
        }
        let version = c.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, 4, format!("unsupported version {version}")));
        }
        let n = c.u32("point count")? as usize;
        let k = c.u16("class count")? as usize;
        if k == 0 {
            return Err(Error::format(path, 10, "K = 0"));
        }
        let flags = c.u16("flags")?;
        if flags & !0b11 != 0 {
            return Err(Error::format(path, 12, format!("unknown flag bits {flags:#06x}")));
        }
        let start = c.pos;
        let alpha = c.f32s(n * k, "α matrix")?;
        if let Some(bad) = alpha.iter().position(|a| !(a.is_finite() && *a >= 1.0)) {
            return Err(Error::format(
                path,
                (start + bad * 4) as u64,
                format!("α = {} is not finite and >= 1", alpha[bad]),
            ));
        }
        let instances = if flags & 1 != 0 {
            Some(c.u32s(n, "instance column")?)
        } else {
            None
        };
        let refined_u = if flags & 2 != 0 {
            Some(c.f32s(n, "uncertainty column")?)
        } else {
            None
        };
        c.finish()?;
        Ok(Self {
            alpha: DirichletField::new(k, alpha)?,
            instances,
            refined_u,
        })
    }
}

pub fn read_alpha(path: &Path) -> Result<AlphaDump> {
    AlphaDump::from_bytes(path, &read_all(path)?)
}

pub fn write_alpha(path: &Path, dump: &AlphaDump) -> Result<()> {
    write_atomic(path, &dump.to_bytes()?)
}

/// Center heatmap and offsets on the BEV grid.
///
/// Layout: `"EVLB"`, version `u16`, rings `u32`, sectors `u32`, channels
/// `u16` (= 3), then per cell `f32` heat, ring offset, sector offset.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMaps {
    pub rings: usize,
    pub sectors: usize,
    pub heatmap: Vec<f32>,
    pub offsets: Vec<[f32; 2]>,
}

impl BevMaps {
    pub fn new<T: Real>(rings: usize, sectors: usize, heatmap: &[T], offsets: &[[T; 2]]) -> Result<Self> {
        check_count("heatmap", heatmap.len(), rings * sectors)?;
        check_count("offset map", offsets.len(), rings * sectors)?;
        Ok(Self {
            rings,
            sectors,
            heatmap: heatmap.iter().map(|&v| to_f32(v)).collect(),
            offsets: offsets.iter().map(|o| [to_f32(o[0]), to_f32(o[1])]).collect(),
        })
    }

    pub fn heatmap_as<T: Real>(&self) -> Vec<T> {
        self.heatmap.iter().map(|&v| from_f32(v)).collect()
    }

    pub fn offsets_as<T: Real>(&self) -> Vec<[T; 2]> {
        self.offsets.iter().map(|o| [from_f32(o[0]), from_f32(o[1])]).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_count("heatmap", self.heatmap.len(), self.rings * self.sectors)?;
        check_count("offset map", self.offsets.len(), self.rings * self.sectors)?;
        let dim = |v: usize| {
            u32::try_from(v).map_err(|_| Error::Range {
                what: "BEV dimension",
                value: v.to_string(),
            })
        };
        let mut out = Vec::with_capacity(16 + self.heatmap.len() * 12);
        out.extend_from_slice(BEV_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&dim(self.rings)?.to_le_bytes());
        out.extend_from_slice(&dim(self.sectors)?.to_le_bytes());
        out.extend_from_slice(&3u16.to_le_bytes());
        for (h, o) in self.heatmap.iter().zip(&self.offsets) {
            push_f32s(&mut out, [*h, o[0], o[1]]);
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(path, bytes);
        let magic = c.take(4, "magic")?;
        if magic != BEV_MAGIC {
            return Err(Error::format(
                path,
                0,
                format!("bad magic {magic:?}, expected \"EVLB\""),
            ));
        }
        let version = c.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, 4, format!("unsupported version {version}")));
        }
        let rings = c.u32("rings")? as usize;
        let sectors = c.u32("sectors")? as usize;
        let channels = c.u16("channels")?;
        if channels != 3 {
            return Err(Error::format(
                path,
                14,
                format!("expected 3 channels, found {channels}"),
            ));
        }
        let start = c.pos;
        let values = c.f32s(rings * sectors * 3, "cells")?;
        c.finish()?;
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(path, (start + bad * 4) as u64, "non-finite BEV value"));
        }
        Ok(Self {
            rings,
            sectors,
            heatmap: values.chunks_exact(3).map(|v| v[0]).collect(),
            offsets: values.chunks_exact(3).map(|v| [v[1], v[2]]).collect(),
        })
    }
}

pub fn read_bev(path: &Path) -> Result<BevMaps> {
    BevMaps::from_bytes(path, &read_all(path)?)
}

pub fn write_bev(path: &Path, maps: &BevMaps) -> Result<()> {
    write_atomic(path, &maps.to_bytes()?)
}

/// Refiner weights: one text header line
/// `EVLK M=<m> C_MID=<c> K=<k> radius=<r> sigma=<s>`, then `f32` values for
/// kernel points (`M × 3`), weights, classifier and bias in that order.
pub fn kpconv_to_bytes<T: Real>(layer: &KPConvLayer<T>) -> Result<Vec<u8>> {
    layer.check()?;
    let header = format!(
        "{KPCONV_TAG} M={} C_MID={} K={} radius={} sigma={}\n",
        layer.kernel_points.len(),
        layer.mid_channels,
        layer.classes,
        layer.radius.as_f64(),
        layer.sigma.as_f64()
    );
    let mut out = header.into_bytes();
    push_f32s(&mut out, layer.kernel_points.iter().flatten().map(|&v| to_f32(v)));
    for part in [&layer.weights, &layer.classifier, &layer.bias] {
        push_f32s(&mut out, part.iter().map(|&v| to_f32(v)));
    }
    Ok(out)
}

pub fn kpconv_from_bytes<T: Real>(path: &Path, bytes: &[u8]) -> Result<KPConvLayer<T>> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, 0, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, 0, "header is not UTF-8"))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(KPCONV_TAG) {
        return Err(Error::format(path, 0, format!("header must start with {KPCONV_TAG}")));
    }
    let mut get = |key: &str| -> Result<String> {
        let field = fields
            .next()
            .ok_or_else(|| Error::format(path, 0, format!("header lacks {key}")))?;
        field
            .strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .map(str::to_owned)
            .ok_or_else(|| Error::format(path, 0, format!("expected {key}=..., found {field}")))
    };
    let bad = |what: &str| Error::format(path, 0, format!("bad header value for {what}"));
    let m: usize = get("M")?.parse().map_err(|_| bad("M"))?;
    let c_mid: usize = get("C_MID")?.parse().map_err(|_| bad("C_MID"))?;
    let k: usize = get("K")?.parse().map_err(|_| bad("K"))?;
    let radius: f64 = get("radius")?.parse().map_err(|_| bad("radius"))?;
    let sigma: f64 = get("sigma")?.parse().map_err(|_| bad("sigma"))?;

    let mut c = Cursor::new(path, bytes);
    c.pos = end + 1;
    let conv = |v: Vec<f32>| -> Vec<T> { v.into_iter().map(from_f32).collect() };
    let kp = conv(c.f32s(m * 3, "kernel points")?);
    let weights = conv(c.f32s(m * (k + 5) * c_mid, "weights")?);
    let classifier = conv(c.f32s(c_mid * k, "classifier")?);
    let bias = conv(c.f32s(k, "bias")?);
    c.finish()?;
    let layer = KPConvLayer {
        classes: k,
        mid_channels: c_mid,
        kernel_points: kp.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
        radius: T::lit(radius),
        sigma: T::lit(sigma),
        weights,
        classifier,
        bias,
    };
    layer.check()?;
    Ok(layer)
}

pub fn read_kpconv<T: Real>(path: &Path) -> Result<KPConvLayer<T>> {
    kpconv_from_bytes(path, &read_all(path)?)
}

pub fn write_kpconv<T: Real>(path: &Path, layer: &KPConvLayer<T>) -> Result<()> {
    write_atomic(path, &kpconv_to_bytes(layer)?)
}
