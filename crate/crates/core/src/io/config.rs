use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evidential::{LossWeights, ToyConfig};
use crate::fusion::NmsConfig;
use crate::grid::GridConfig;
use crate::metrics::NUM_BINS;
use crate::model::{ClassId, ClassTaxonomy};
use crate::refine::{KpConvConfig, PknnConfig, RefineOrder};
use crate::synth::{BlobSpec, CalibrationMode, CorruptionSpec, SceneSpec};

/// Every tunable of a run. Text form is one `key = value` per line; `#`
/// starts a comment and omitted keys keep their defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub taxonomy_path: Option<PathBuf>,
    pub grid: GridConfig<f64>,
    /// Gaussian width of the center heatmap targets, in cells.
    pub heatmap_sigma: f64,
    pub nms: NmsConfig<f64>,
    pub pknn: PknnConfig<f64>,
    pub uqr_points: usize,
    pub kpconv: KpConvConfig<f64>,
    pub uqr_weights: Option<PathBuf>,
    pub refine_order: RefineOrder,
    pub loss: LossWeights<f64>,
    pub bins: usize,
    pub scenes: usize,
    /// Scene layout; its radial range is taken from `grid`.
    pub scene: SceneSpec,
    /// One flip probability for all classes, or one per class.
    pub flip: Vec<f64>,
    /// `(from, to)` class names for preferred confusions.
    pub confusion: Vec<(String, String)>,
    pub mode: CalibrationMode,
    pub evidence_scale: f64,
    pub toy_epochs: u64,
    pub toy_lr: f64,
    pub toy_init_scale: f64,
    pub blobs: BlobSpec,
}

impl Default for Config {
    fn default() -> Self {
        let toy = ToyConfig::<f64>::default();
        Self {
            seed: 0,
            taxonomy_path: None,
            grid: GridConfig::default(),
            heatmap_sigma: 5.0,
            nms: NmsConfig::default(),
            pknn: PknnConfig::default(),
            uqr_points: 20_000,
            kpconv: KpConvConfig::default(),
            uqr_weights: None,
            refine_order: RefineOrder::default(),
            loss: LossWeights::default(),
            bins: NUM_BINS,
            scenes: 4,
            scene: SceneSpec::default(),
            flip: vec![0.1],
            confusion: Vec::new(),
            mode: CalibrationMode::Calibrated,
            evidence_scale: 10.0,
            toy_epochs: toy.epochs,
            toy_lr: toy.lr,
            toy_init_scale: toy.init_scale,
            blobs: BlobSpec::default(),
        }
    }
}

fn parse<V: FromStr>(value: &str) -> std::result::Result<V, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn parse_pair(value: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| format!("expected `low, high`, got {value:?}"))?;
    Ok((parse(a.trim())?, parse(b.trim())?))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

fn path_opt(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_pair((a, b): (f64, f64)) -> String {
    format!("{a}, {b}")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_list<V: Display>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: no + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key}")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.check().map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::Config {
                line: 0,
                msg: other.to_string(),
            },
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse(v)?,
            "taxonomy.path" => self.taxonomy_path = path_opt(v),
            "grid.rings" => self.grid.rings = parse(v)?,
            "grid.sectors" => self.grid.sectors = parse(v)?,
            "grid.layers" => self.grid.layers = parse(v)?,
            "grid.r_min" => self.grid.r_min = parse(v)?,
            "grid.r_max" => self.grid.r_max = parse(v)?,
            "grid.z_min" => self.grid.z_min = parse(v)?,
            "grid.z_max" => self.grid.z_max = parse(v)?,
            "targets.sigma" => self.heatmap_sigma = parse(v)?,
            "nms.kernel" => self.nms.kernel = parse(v)?,
            "nms.threshold" => self.nms.threshold = parse(v)?,
            "nms.top_k" => self.nms.top_k = parse(v)?,
            "pknn.k" => self.pknn.k = parse(v)?,
            "pknn.threshold" => self.pknn.threshold = parse(v)?,
            "uqr.points" => self.uqr_points = parse(v)?,
            "uqr.kernel_points" => self.kpconv.kernel_points = parse(v)?,
            "uqr.mid_channels" => self.kpconv.mid_channels = parse(v)?,
            "uqr.radius" => self.kpconv.radius = parse(v)?,
            "uqr.sigma" => self.kpconv.sigma = parse(v)?,
            "uqr.weights" => self.uqr_weights = path_opt(v),
            "refine.order" => {
                self.refine_order = match v {
                    "uqr, pknn" | "uqr,pknn" => RefineOrder::UqrThenPknn,
                    "pknn, uqr" | "pknn,uqr" => RefineOrder::PknnThenUqr,
                    _ => return Err(format!("expected `uqr, pknn` or `pknn, uqr`, got {v:?}")),
                }
            }
            "loss.heat" => self.loss.heat = parse(v)?,
            "loss.offset" => self.loss.offset = parse(v)?,
            "loss.kl_cap" => self.loss.kl_cap = parse(v)?,
            "loss.ramp_epochs" => self.loss.ramp_epochs = parse(v)?,
            "metrics.bins" => self.bins = parse(v)?,
            "synth.scenes" => self.scenes = parse(v)?,
            "synth.road_radius" => self.scene.road_radius = parse(v)?,
            "synth.road_points" => self.scene.road_points = parse(v)?,
            "synth.sidewalk_sectors" => self.scene.sidewalk_sectors = parse(v)?,
            "synth.sidewalk_width" => self.scene.sidewalk_width = parse(v)?,
            "synth.sidewalk_points" => self.scene.sidewalk_points = parse(v)?,
            "synth.cars" => self.scene.cars = parse(v)?,
            "synth.car_points" => self.scene.car_points = parse(v)?,
            "synth.car_length" => self.scene.car_length = parse_pair(v)?,
            "synth.car_width" => self.scene.car_width = parse_pair(v)?,
            "synth.car_height" => self.scene.car_height = parse_pair(v)?,
            "synth.persons" => self.scene.persons = parse(v)?,
            "synth.person_points" => self.scene.person_points = parse(v)?,
            "synth.person_height" => self.scene.person_height = parse_pair(v)?,
            "synth.poles" => self.scene.poles = parse(v)?,
            "synth.trunks" => self.scene.trunks = parse(v)?,
            "synth.line_points" => self.scene.line_points = parse(v)?,
            "synth.signs" => self.scene.signs = parse(v)?,
            "synth.sign_points" => self.scene.sign_points = parse(v)?,
            "synth.straddle_car" => self.scene.straddle_car = parse_bool(v)?,
            "synth.stragglers" => self.scene.stragglers = parse(v)?,
            "synth.separation" => self.scene.separation = parse(v)?,
            "corrupt.flip" => {
                self.flip = v
                    .split(',')
                    .map(|s| parse(s.trim()))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "corrupt.confusion" => {
                self.confusion = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|pair| {
                        pair.split_once("->")
                            .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                            .ok_or_else(|| format!("expected `from -> to`, got {pair:?}"))
                    })
                    .collect::<std::result::Result<_, _>>()?;
            }
            "corrupt.mode" => {
                self.mode = match v.split_once(':') {
                    None if v == "calibrated" => CalibrationMode::Calibrated,
                    Some(("overconfident", g)) => CalibrationMode::Overconfident(parse(g.trim())?),
                    Some(("underconfident", g)) => CalibrationMode::Underconfident(parse(g.trim())?),
                    _ => {
                        return Err(format!(
                            "expected calibrated, overconfident:<γ> or underconfident:<γ>, got {v:?}"
                        ))
                    }
                }
            }
            "corrupt.evidence_scale" => self.evidence_scale = parse(v)?,
            "toy.epochs" => self.toy_epochs = parse(v)?,
            "toy.lr" => self.toy_lr = parse(v)?,
            "toy.init_scale" => self.toy_init_scale = parse(v)?,
            "toy.dim" => self.blobs.dim = parse(v)?,
            "toy.separation" => self.blobs.separation = parse(v)?,
            "toy.std" => self.blobs.std = parse(v)?,
            "toy.train" => self.blobs.train = parse(v)?,
            "toy.test" => self.blobs.test = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// All keys with their current values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.scene;
        let mode = match self.mode {
            CalibrationMode::Calibrated => "calibrated".to_string(),
            CalibrationMode::Overconfident(g) => format!("overconfident:{g}"),
            CalibrationMode::Underconfident(g) => format!("underconfident:{g}"),
        };
        let order = match self.refine_order {
            RefineOrder::UqrThenPknn => "uqr, pknn",
            RefineOrder::PknnThenUqr => "pknn, uqr",
        };
        let confusion: Vec<String> = self.confusion.iter().map(|(a, b)| format!("{a} -> {b}")).collect();
        vec![
            ("seed", self.seed.to_string()),
            ("taxonomy.path", show_path(&self.taxonomy_path)),
            ("grid.rings", self.grid.rings.to_string()),
            ("grid.sectors", self.grid.sectors.to_string()),
            ("grid.layers", self.grid.layers.to_string()),
            ("grid.r_min", self.grid.r_min.to_string()),
            ("grid.r_max", self.grid.r_max.to_string()),
            ("grid.z_min", self.grid.z_min.to_string()),
            ("grid.z_max", self.grid.z_max.to_string()),
            ("targets.sigma", self.heatmap_sigma.to_string()),
            ("nms.kernel", self.nms.kernel.to_string()),
            ("nms.threshold", self.nms.threshold.to_string()),
            ("nms.top_k", self.nms.top_k.to_string()),
            ("pknn.k", self.pknn.k.to_string()),
            ("pknn.threshold", self.pknn.threshold.to_string()),
            ("uqr.points", self.uqr_points.to_string()),
            ("uqr.kernel_points", self.kpconv.kernel_points.to_string()),
            ("uqr.mid_channels", self.kpconv.mid_channels.to_string()),
            ("uqr.radius", self.kpconv.radius.to_string()),
            ("uqr.sigma", self.kpconv.sigma.to_string()),
            ("uqr.weights", show_path(&self.uqr_weights)),
            ("refine.order", order.to_string()),
            ("loss.heat", self.loss.heat.to_string()),
            ("loss.offset", self.loss.offset.to_string()),
            ("loss.kl_cap", self.loss.kl_cap.to_string()),
            ("loss.ramp_epochs", self.loss.ramp_epochs.to_string()),
            ("metrics.bins", self.bins.to_string()),
            ("synth.scenes", self.scenes.to_string()),
            ("synth.road_radius", s.road_radius.to_string()),
            ("synth.road_points", s.road_points.to_string()),
            ("synth.sidewalk_sectors", s.sidewalk_sectors.to_string()),
            ("synth.sidewalk_width", s.sidewalk_width.to_string()),
            ("synth.sidewalk_points", s.sidewalk_points.to_string()),
            ("synth.cars", s.cars.to_string()),
            ("synth.car_points", s.car_points.to_string()),
            ("synth.car_length", show_pair(s.car_length)),
            ("synth.car_width", show_pair(s.car_width)),
            ("synth.car_height", show_pair(s.car_height)),
            ("synth.persons", s.persons.to_string()),
            ("synth.person_points", s.person_points.to_string()),
            ("synth.person_height", show_pair(s.person_height)),
            ("synth.poles", s.poles.to_string()),
            ("synth.trunks", s.trunks.to_string()),
            ("synth.line_points", s.line_points.to_string()),
            ("synth.signs", s.signs.to_string()),
            ("synth.sign_points", s.sign_points.to_string()),
            ("synth.straddle_car", s.straddle_car.to_string()),
            ("synth.stragglers", s.stragglers.to_string()),
            ("synth.separation", s.separation.to_string()),
            ("corrupt.flip", show_list(&self.flip)),
            ("corrupt.confusion", confusion.join(", ")),
            ("corrupt.mode", mode),
            ("corrupt.evidence_scale", self.evidence_scale.to_string()),
            ("toy.epochs", self.toy_epochs.to_string()),
            ("toy.lr", self.toy_lr.to_string()),
            ("toy.init_scale", self.toy_init_scale.to_string()),
            ("toy.dim", self.blobs.dim.to_string()),
            ("toy.separation", self.blobs.separation.to_string()),
            ("toy.std", self.blobs.std.to_string()),
            ("toy.train", self.blobs.train.to_string()),
            ("toy.test", self.blobs.test.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Value ranges that do not depend on the taxonomy.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(Error::Config {
                line: 0,
                msg: msg.into(),
            })
        };
        self.grid.check()?;
        if self.nms.kernel.is_multiple_of(2) {
            return bad("nms.kernel must be odd");
        }
        if self.pknn.k == 0 {
            return bad("pknn.k must be positive");
        }
        if self.bins == 0 {
            return bad("metrics.bins must be positive");
        }
        if !(self.heatmap_sigma > 0.0) {
            return bad("targets.sigma must be positive");
        }
        if self.flip.is_empty() || self.flip.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("corrupt.flip values must lie in [0, 1]");
        }
        self.scene_spec().check()?;
        Ok(())
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            r_min: self.grid.r_min,
            r_max: self.grid.r_max,
            ..self.scene.clone()
        }
    }

    pub fn taxonomy(&self) -> Result<ClassTaxonomy> {
        match &self.taxonomy_path {
            Some(p) => super::read_taxonomy(p),
            None => Ok(ClassTaxonomy::semantic_kitti()),
        }
    }

    pub fn corruption_spec(&self, taxonomy: &ClassTaxonomy) -> Result<CorruptionSpec> {
        let k = taxonomy.num_classes();
        let flip = match self.flip.len() {
            1 => vec![self.flip[0]; k],
            n if n == k => self.flip.clone(),
            n => {
                return Err(Error::Config {
                    line: 0,
                    msg: format!("corrupt.flip has {n} values, taxonomy has {k} classes"),
                })
            }
        };
        let lookup = |name: &str| -> Result<ClassId> {
            taxonomy.class_by_name(name).ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("corrupt.confusion names unknown class {name}"),
            })
        };
        let mut confusion = vec![None; k];
        for (a, b) in &self.confusion {
            confusion[lookup(a)? as usize] = Some(lookup(b)?);
        }
        let spec = CorruptionSpec {
            flip,
            confusion,
            mode: self.mode,
            evidence_scale: self.evidence_scale,
        };
        spec.check(k)?;
        Ok(spec)
    }

    pub fn toy_config(&self) -> ToyConfig<f64> {
        ToyConfig {
            epochs: self.toy_epochs,
            lr: self.toy_lr,
            seed: self.seed,
            init_scale: self.toy_init_scale,
            kl_cap: self.loss.kl_cap,
            ramp_epochs: self.loss.ramp_epochs,
        }
    }
}
