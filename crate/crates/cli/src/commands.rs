use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use rayon::prelude::*;

use evpan::evidential::{predict, train_toy, LinearEvidential, ToyConfig};
use evpan::fusion;
use evpan::grid::{encode_instance_targets, gather_first, scatter_rows, voxelize};
use evpan::io::{self, AlphaDump, BevMaps, Config};
use evpan::metrics::{calibration_curve, curve_csv, uece, CalibrationBins, Evaluator};
use evpan::model::DirichletField;
use evpan::refine::{
    assemble_features, fit_classifier_rows, pknn_refine, uqr_refine, uqr_select, KPConvLayer, PknnConfig, PknnStats,
    RefineOrder, UqrFeatures, UqrStats,
};
use evpan::synth::{gen_blobs, gen_scene, scene_seed, simulate_predictions, CorruptionSpec, SceneSpec};
use evpan::{ClassTaxonomy, Error, PanopticLabelSet, PointCloud, Prediction};

use crate::manifest::RunManifest;
use crate::Mode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(Error),
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn config(e: Error) -> Self {
        Self::Config(e)
    }

    /// 2 configuration, 3 I/O and file format, 4 data integrity.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Setup(_) => 2,
            Self::Core(Error::Io { .. } | Error::Format { .. }) => 3,
            Self::Core(Error::Config { .. }) => 2,
            Self::Core(_) => 4,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Stage timings of one scan.
#[derive(Default)]
struct Times(Vec<(&'static str, Duration)>);

impl Times {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push((stage, start.elapsed()));
        out
    }
}

pub struct Context {
    pub config: Config,
    pub config_path: Option<PathBuf>,
    pub taxonomy: ClassTaxonomy,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: Config, config_path: Option<PathBuf>, out: PathBuf) -> Result<Self> {
        let taxonomy = config.taxonomy().map_err(CliError::config)?;
        Ok(Self {
            config,
            config_path,
            taxonomy,
            out,
        })
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, &self.config, self.config_path.clone())
    }

    fn out_dir(&self, sub: &str) -> Result<PathBuf> {
        let dir = self.out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

fn scan_name(index: usize) -> String {
    format!("{index:06}")
}

/// Sorted file stems with extension `ext` in `dir`.
fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn nonempty(ids: Vec<String>, dir: &Path) -> Result<Vec<String>> {
    if ids.is_empty() {
        return Err(Error::Integrity(format!("no scans in {}", dir.display())).into());
    }
    Ok(ids)
}

fn finish(ctx: &Context, mut manifest: RunManifest, start: Instant, times: Vec<Times>) -> Result<()> {
    for t in times {
        for (stage, d) in t.0 {
            manifest.add_stage(stage, d);
        }
    }
    manifest.wall = start.elapsed();
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    manifest.write(&ctx.out)?;
    Ok(())
}

pub fn synth(ctx: &Context) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.config;
    let tax = &ctx.taxonomy;
    let spec = cfg.scene_spec();
    let corruption = cfg.corruption_spec(tax).map_err(CliError::config)?;
    let velodyne = ctx.out_dir("velodyne")?;
    let labels = ctx.out_dir("labels")?;
    let predictions = ctx.out_dir("predictions")?;
    let bev = ctx.out_dir("bev")?;
    let sim_labels = ctx.out_dir("sim/labels")?;
    let sim_alpha = ctx.out_dir("sim/alpha")?;

    let times = (0..cfg.scenes)
        .into_par_iter()
        .map(|i| -> Result<Times> {
            let mut t = Times::default();
            let seed = scene_seed(cfg.seed, i as u64);
            let (cloud, gt) = t.run("generate", || gen_scene(&spec, tax, seed))?;
            let (alpha, maps, point_alpha, point_pred) = t.run("simulate", || -> Result<_> {
                let map = voxelize(&cloud, &cfg.grid);
                let voxel_gt =
                    PanopticLabelSet::new(gather_first(&gt.semantic, &map), gather_first(&gt.instance, &map))?;
                let (alpha, _) = simulate_predictions(&voxel_gt, &corruption, tax, seed.wrapping_add(1))?;
                let targets = encode_instance_targets(&gt, &map, &cfg.grid, cfg.heatmap_sigma, tax);
                let maps = BevMaps::new(targets.rings, targets.sectors, &targets.heatmap, &targets.offsets)?;
                let (point_alpha, point_pred) = simulate_predictions(&gt, &corruption, tax, seed.wrapping_add(2))?;
                Ok((alpha, maps, point_alpha, point_pred))
            })?;
            let name = scan_name(i);
            t.run("write", || -> Result<()> {
                io::write_scan(&velodyne.join(format!("{name}.bin")), &cloud.cast::<f32>())?;
                io::write_labels(&labels.join(format!("{name}.label")), &gt, tax)?;
                io::write_alpha(&predictions.join(format!("{name}.evla")), &AlphaDump::new(&alpha))?;
                io::write_bev(&bev.join(format!("{name}.evlb")), &maps)?;
                io::write_labels(&sim_labels.join(format!("{name}.label")), &point_pred, tax)?;
                let mut dump = AlphaDump::new(&point_alpha);
                dump.instances = Some(point_pred.instance.clone());
                io::write_alpha(&sim_alpha.join(format!("{name}.evla")), &dump)?;
                Ok(())
            })?;
            info!("scene {name}: {} points", cloud.len());
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut manifest = ctx.manifest("synth");
    let begin = Instant::now();
    let fit = fit_refiner(cfg, tax, &spec, &corruption)?;
    io::write_kpconv(&ctx.out.join(REFINER_FILE), &fit.0)?;
    manifest.add_stage("fit_refiner", begin.elapsed());
    manifest.note("scenes", cfg.scenes);
    manifest.note("refiner.points", fit.1);
    if let Some(loss) = fit.2 {
        manifest.note("refiner.final_loss", loss);
    }
    println!("wrote {} scenes to {}", cfg.scenes, ctx.out.display());
    finish(ctx, manifest, start, times)
}

pub const REFINER_FILE: &str = "refiner.evlk";
const REFINER_EPOCHS: u64 = 300;
const REFINER_MAX_POINTS: usize = 2000;
const REFINER_SCENES: u64 = 4;
const REFINER_SPACING: f64 = 1000.0;
const REFINER_LR: f64 = 1e-2;

/// Fits the uQR classifier on scenes of their own (streams counting down from
/// `u64::MAX` of the seed), on the points uQR would select there. The conv
/// weights stay random. Scenes are placed far apart so neighborhoods stay
/// within one scene; the features keep the original coordinates.
fn fit_refiner(
    cfg: &Config,
    tax: &ClassTaxonomy,
    spec: &SceneSpec,
    corruption: &CorruptionSpec,
) -> Result<(KPConvLayer<f64>, usize, Option<f64>)> {
    let k = tax.num_classes();
    let mut features: Option<UqrFeatures<f64>> = None;
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for s in 0..REFINER_SCENES {
        let seed = scene_seed(cfg.seed, u64::MAX - 1 - s);
        let (cloud, gt) = gen_scene(spec, tax, seed)?;
        let map = voxelize(&cloud, &cfg.grid);
        let voxel_gt = PanopticLabelSet::new(gather_first(&gt.semantic, &map), gather_first(&gt.instance, &map))?;
        let (voxel_alpha, _) = simulate_predictions(&voxel_gt, corruption, tax, seed.wrapping_add(1))?;
        let rows = scatter_rows(voxel_alpha.as_slice(), k, &map, &vec![1.0; k])?;
        let pred = predict(&DirichletField::new(k, rows)?);
        let candidates: Vec<usize> = (0..cloud.len()).filter(|&i| !tax.is_ignore(gt.semantic[i])).collect();
        let cand_u: Vec<f64> = candidates.iter().map(|&i| pred.u[i]).collect();
        let chosen: Vec<usize> = uqr_select(&cand_u, cfg.uqr_points)
            .into_iter()
            .map(|j| candidates[j])
            .collect();
        let f = assemble_features(&pred, &cloud)?.subset(&chosen);
        features = Some(match features {
            Some(acc) => acc.concat(&f)?,
            None => f,
        });
        let shift = REFINER_SPACING * s as f64;
        positions.extend(chosen.iter().map(|&i| {
            let p = cloud.position(i);
            [p[0] + shift, p[1], p[2]]
        }));
        labels.extend(chosen.iter().map(|&i| gt.semantic[i]));
    }
    let features = features.expect("at least one fitting scene");
    let stride = labels.len().div_ceil(REFINER_MAX_POINTS).max(1);
    let fit_rows: Vec<usize> = (0..labels.len()).step_by(stride).collect();
    let mut layer = KPConvLayer::random(k, &cfg.kpconv, scene_seed(cfg.seed, u64::MAX));
    let toy = ToyConfig {
        epochs: REFINER_EPOCHS,
        lr: REFINER_LR,
        ..cfg.toy_config()
    };
    let report = fit_classifier_rows(&mut layer, &features, &positions, &labels, &fit_rows, &toy)?;
    Ok((layer, fit_rows.len(), report.losses.last().copied()))
}

pub fn fuse(ctx: &Context, input: &Path) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.config;
    let tax = &ctx.taxonomy;
    let scans = input.join("velodyne");
    let ids = nonempty(stems(&scans, "bin")?, &scans)?;
    let labels_dir = ctx.out_dir("labels")?;
    let alpha_dir = ctx.out_dir("alpha")?;

    let results = ids
        .par_iter()
        .map(|name| -> Result<(Times, usize)> {
            let mut t = Times::default();
            let (cloud, dump, maps) = t.run("read", || -> Result<_> {
                let cloud: PointCloud = io::read_scan(&scans.join(format!("{name}.bin")))?;
                let dump = io::read_alpha(&input.join("predictions").join(format!("{name}.evla")))?;
                let maps = io::read_bev(&input.join("bev").join(format!("{name}.evlb")))?;
                Ok((cloud, dump, maps))
            })?;
            let fused = t.run("fuse", || -> Result<_> {
                let map = voxelize(&cloud, &cfg.grid);
                io::check_count(&format!("voxel α rows of scan {name}"), dump.len(), map.occupied())?;
                if (maps.rings, maps.sectors) != (cfg.grid.rings, cfg.grid.sectors) {
                    return Err(Error::Integrity(format!(
                        "BEV maps of scan {name} are {}x{}, grid is {}x{}",
                        maps.rings, maps.sectors, cfg.grid.rings, cfg.grid.sectors
                    ))
                    .into());
                }
                let alpha = dump.alpha_as::<f64>();
                Ok(fusion::fuse(
                    &alpha,
                    &maps.heatmap_as(),
                    &maps.offsets_as(),
                    &map,
                    &cfg.nms,
                    tax,
                )?)
            })?;
            t.run("write", || -> Result<()> {
                io::write_labels(&labels_dir.join(format!("{name}.label")), &fused.labels, tax)?;
                let mut dump = AlphaDump::new(&fused.point_alpha);
                dump.instances = Some(fused.labels.instance.clone());
                io::write_alpha(&alpha_dir.join(format!("{name}.evla")), &dump)?;
                Ok(())
            })?;
            Ok((t, fused.centers.len()))
        })
        .collect::<Result<Vec<_>>>()?;

    let centers: usize = results.iter().map(|r| r.1).sum();
    let mut manifest = ctx.manifest("fuse");
    manifest.inputs.push(("dir".into(), input.to_path_buf()));
    manifest.note("scans", ids.len());
    manifest.note("centers", centers);
    println!(
        "fused {} scans ({centers} centers) into {}",
        ids.len(),
        ctx.out.display()
    );
    finish(ctx, manifest, start, results.into_iter().map(|r| r.0).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Pknn,
    Uqr,
}

fn steps(mode: Mode, order: RefineOrder) -> Vec<Step> {
    match (mode, order) {
        (Mode::Pknn, _) => vec![Step::Pknn],
        (Mode::Uqr, _) => vec![Step::Uqr],
        (Mode::Both, RefineOrder::UqrThenPknn) => vec![Step::Uqr, Step::Pknn],
        (Mode::Both, RefineOrder::PknnThenUqr) => vec![Step::Pknn, Step::Uqr],
    }
}

struct Refined {
    labels: PanopticLabelSet,
    alpha: DirichletField<f64>,
    u: Vec<f64>,
    pknn: PknnStats,
    uqr: UqrStats,
}

struct RefineInputs<'a> {
    steps: &'a [Step],
    layer: Option<&'a KPConvLayer<f64>>,
    pknn: PknnConfig<f64>,
    uqr_points: usize,
    taxonomy: &'a ClassTaxonomy,
}

fn refine_scan(
    cloud: &PointCloud,
    labels: PanopticLabelSet,
    dump: &AlphaDump,
    inputs: &RefineInputs,
) -> Result<Refined> {
    let mut out = Refined {
        labels,
        alpha: dump.alpha_as(),
        u: dump.uncertainty(),
        pknn: PknnStats::default(),
        uqr: UqrStats::default(),
    };
    for step in inputs.steps {
        match step {
            Step::Uqr => {
                let layer = inputs.layer.expect("uQR layer loaded");
                let r = uqr_refine(
                    cloud,
                    &out.labels,
                    &out.alpha,
                    layer,
                    inputs.uqr_points,
                    inputs.taxonomy,
                )?;
                for &i in &r.selected {
                    out.u[i] = r.u[i];
                }
                out.labels = r.labels;
                out.alpha = r.alpha;
                out.uqr = r.stats;
            }
            Step::Pknn => {
                let p = predict(&out.alpha).p;
                let pred = Prediction::from_parts(out.alpha.num_classes(), p, out.u.clone())?;
                let (labels, u, stats) = pknn_refine(cloud, &out.labels, &pred, &inputs.pknn, inputs.taxonomy)?;
                out.labels = labels;
                out.u = u;
                out.pknn = stats;
            }
        }
    }
    Ok(out)
}

/// Dump for refined outputs; the uncertainty column is stored only when it no
/// longer follows from the stored α.
fn refined_dump(r: &Refined) -> AlphaDump {
    let mut dump = AlphaDump::new(&r.alpha);
    dump.instances = Some(r.labels.instance.clone());
    let implied: Vec<f64> = dump.uncertainty();
    if implied.iter().zip(&r.u).any(|(a, b)| a.to_bits() != b.to_bits()) {
        dump.refined_u = Some(r.u.iter().map(|&v| v as f32).collect());
    }
    dump
}

pub fn refine(ctx: &Context, input: &Path, scans: &Path, mode: Mode, sweep: &[f64], repeat: usize) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.config;
    let tax = &ctx.taxonomy;
    let steps = steps(mode, cfg.refine_order);
    let layer = if steps.contains(&Step::Uqr) {
        let path = match &cfg.uqr_weights {
            Some(p) => p.clone(),
            None if scans.join(REFINER_FILE).is_file() => scans.join(REFINER_FILE),
            None => {
                return Err(CliError::Setup(format!(
                    "uQR needs uqr.weights or a {REFINER_FILE} in {}",
                    scans.display()
                )))
            }
        };
        let layer: KPConvLayer<f64> = io::read_kpconv(&path)?;
        if layer.classes != tax.num_classes() {
            return Err(Error::Integrity(format!(
                "refiner has {} classes, taxonomy has {}",
                layer.classes,
                tax.num_classes()
            ))
            .into());
        }
        Some(layer)
    } else {
        None
    };
    if !sweep.is_empty() && !steps.contains(&Step::Pknn) {
        return Err(CliError::Setup("--sweep needs a pKNN mode".into()));
    }

    let label_dir = input.join("labels");
    let ids = nonempty(stems(&label_dir, "label")?, &label_dir)?;
    let mut read_times = Vec::new();
    let loaded = ids
        .par_iter()
        .map(|name| -> Result<_> {
            let mut t = Times::default();
            let (cloud, labels, dump) = t.run("read", || -> Result<_> {
                let cloud: PointCloud = io::read_scan(&scans.join("velodyne").join(format!("{name}.bin")))?;
                let (labels, unknown) = io::read_labels(&label_dir.join(format!("{name}.label")), tax)?;
                if unknown > 0 {
                    warn!("scan {name}: {unknown} labels with unknown raw ids read as ignore");
                }
                let dump = io::read_alpha(&input.join("alpha").join(format!("{name}.evla")))?;
                io::check_count(&format!("labels of scan {name}"), labels.len(), cloud.len())?;
                io::check_count(&format!("α rows of scan {name}"), dump.len(), cloud.len())?;
                Ok((cloud, labels, dump))
            })?;
            Ok((t, cloud, labels, dump))
        })
        .collect::<Result<Vec<_>>>()?;
    let scans_data: Vec<_> = loaded
        .into_iter()
        .map(|(t, c, l, d)| {
            read_times.push(t);
            (c, l, d)
        })
        .collect();

    let run_at = |threshold: f64| -> Result<Vec<Refined>> {
        let inputs = RefineInputs {
            steps: &steps,
            layer: layer.as_ref(),
            pknn: PknnConfig { threshold, ..cfg.pknn },
            uqr_points: cfg.uqr_points,
            taxonomy: tax,
        };
        scans_data
            .par_iter()
            .map(|(cloud, labels, dump)| refine_scan(cloud, labels.clone(), dump, &inputs))
            .collect()
    };

    let mut manifest = ctx.manifest("refine");
    manifest.inputs.push(("dir".into(), input.to_path_buf()));
    manifest.inputs.push(("scans".into(), scans.to_path_buf()));
    manifest.note("mode", format!("{mode:?}").to_lowercase());
    manifest.note("scans", ids.len());
    let mut csv = String::from("threshold,selected,changed,seconds\n");
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;

    if sweep.is_empty() {
        let begin = Instant::now();
        let refined = run_at(cfg.pknn.threshold)?;
        manifest.add_stage("refine", begin.elapsed());
        let labels_dir = ctx.out_dir("labels")?;
        let alpha_dir = ctx.out_dir("alpha")?;
        let begin = Instant::now();
        ids.par_iter().zip(&refined).try_for_each(|(name, r)| -> Result<()> {
            io::write_labels(&labels_dir.join(format!("{name}.label")), &r.labels, tax)?;
            io::write_alpha(&alpha_dir.join(format!("{name}.evla")), &refined_dump(r))?;
            Ok(())
        })?;
        manifest.add_stage("write", begin.elapsed());
        let sum = |f: &dyn Fn(&Refined) -> usize| refined.iter().map(f).sum::<usize>();
        let secs: f64 = refined.iter().map(|r| r.pknn.elapsed.as_secs_f64()).sum();
        if steps.contains(&Step::Pknn) {
            csv.push_str(&format!(
                "{},{},{},{secs:.6}\n",
                cfg.pknn.threshold,
                sum(&|r| r.pknn.selected),
                sum(&|r| r.pknn.changed)
            ));
        }
        manifest.note("pknn.selected", sum(&|r| r.pknn.selected));
        manifest.note("pknn.changed", sum(&|r| r.pknn.changed));
        manifest.note("uqr.selected", sum(&|r| r.uqr.selected));
        manifest.note("uqr.refined", sum(&|r| r.uqr.refined));
        manifest.note("uqr.passed_through", sum(&|r| r.uqr.passed_through));
        manifest.note("uqr.relabeled", sum(&|r| r.uqr.relabeled));
        println!(
            "refined {} scans: pKNN changed {} of {} selected, uQR relabeled {} of {} selected",
            ids.len(),
            sum(&|r| r.pknn.changed),
            sum(&|r| r.pknn.selected),
            sum(&|r| r.uqr.relabeled),
            sum(&|r| r.uqr.selected)
        );
    } else {
        for &threshold in sweep {
            let mut best = f64::INFINITY;
            let mut counts = (0, 0);
            for _ in 0..repeat {
                let refined = run_at(threshold)?;
                best = best.min(refined.iter().map(|r| r.pknn.elapsed.as_secs_f64()).sum());
                counts = (
                    refined.iter().map(|r| r.pknn.selected).sum::<usize>(),
                    refined.iter().map(|r| r.pknn.changed).sum::<usize>(),
                );
            }
            csv.push_str(&format!("{threshold},{},{},{best:.6}\n", counts.0, counts.1));
        }
        manifest.note("sweep", sweep.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        manifest.note("repeat", repeat);
        print!("{csv}");
    }
    io::write_atomic(&ctx.out.join("stats.csv"), csv.as_bytes())?;
    finish(ctx, manifest, start, read_times)
}

pub fn evaluate(ctx: &Context, gt: &Path, pred: &Path) -> Result<()> {
    let start = Instant::now();
    let tax = &ctx.taxonomy;
    let gt_dir = gt.join("labels");
    let pred_dir = pred.join("labels");
    let gt_ids: BTreeSet<String> = stems(&gt_dir, "label")?.into_iter().collect();
    let pred_ids: BTreeSet<String> = stems(&pred_dir, "label")?.into_iter().collect();
    let unmatched: Vec<&String> = gt_ids.symmetric_difference(&pred_ids).collect();
    if !unmatched.is_empty() {
        let list: Vec<&str> = unmatched.iter().map(|s| s.as_str()).collect();
        return Err(Error::Integrity(format!("unmatched scans: {}", list.join(", "))).into());
    }
    let ids = nonempty(gt_ids.into_iter().collect(), &gt_dir)?;

    let results = ids
        .par_iter()
        .map(|name| -> Result<(Times, Evaluator)> {
            let mut t = Times::default();
            let (g, p, u) = t.run("read", || -> Result<_> {
                let (g, unknown) = io::read_labels(&gt_dir.join(format!("{name}.label")), tax)?;
                if unknown > 0 {
                    warn!("scan {name}: {unknown} ground-truth labels with unknown raw ids read as ignore");
                }
                let (p, _) = io::read_labels(&pred_dir.join(format!("{name}.label")), tax)?;
                let dump = io::read_alpha(&pred.join("alpha").join(format!("{name}.evla")))?;
                io::check_count(&format!("predicted labels of scan {name}"), p.len(), g.len())?;
                io::check_count(&format!("α rows of scan {name}"), dump.len(), g.len())?;
                Ok((g, p, dump.uncertainty::<f64>()))
            })?;
            let e = t.run("score", || -> Result<_> {
                let mut e = Evaluator::with_bins(tax, ctx.config.bins);
                e.add_scan(&g, &p, &u)?;
                Ok(e)
            })?;
            Ok((t, e))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = Evaluator::with_bins(tax, ctx.config.bins);
    let mut times = Vec::with_capacity(results.len());
    for (t, e) in results {
        total.merge(&e)?;
        times.push(t);
    }
    let report = total.report()?;
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let table = report.to_table();
    io::write_atomic(&ctx.out.join("classes.csv"), report.classes_csv().as_bytes())?;
    io::write_atomic(&ctx.out.join("summary.csv"), report.summary_csv().as_bytes())?;
    io::write_atomic(&ctx.out.join("report.txt"), table.as_bytes())?;
    let curve = curve_csv(&calibration_curve(total.bins()), tax);
    io::write_atomic(&ctx.out.join("calibration.csv"), curve.as_bytes())?;
    print!("{table}");

    let mut manifest = ctx.manifest("evaluate");
    manifest.inputs.push(("gt".into(), gt.to_path_buf()));
    manifest.inputs.push(("pred".into(), pred.to_path_buf()));
    manifest.note("scans", ids.len());
    finish(ctx, manifest, start, times)
}

/// Accuracy, mean uncertainty of correct and wrong test points, and bins.
struct ToyScore {
    accuracy: f64,
    u_correct: f64,
    u_wrong: f64,
    bins: CalibrationBins,
}

fn toy_score(model: &LinearEvidential<f64>, x: &[f64], y: &[evpan::ClassId], bins: usize) -> Result<ToyScore> {
    let pred = model.predict(x)?;
    let classes = pred.classes();
    let mut cal = CalibrationBins::with_bins(model.classes, bins);
    let (mut right, mut wrong) = (Vec::new(), Vec::new());
    for i in 0..y.len() {
        let ok = classes[i] == y[i];
        cal.add(classes[i], 1.0 - pred.u[i], ok);
        if ok { &mut right } else { &mut wrong }.push(pred.u[i]);
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(ToyScore {
        accuracy: right.len() as f64 / y.len().max(1) as f64,
        u_correct: mean(&right),
        u_wrong: mean(&wrong),
        bins: cal,
    })
}

fn class_mean_uece(bins: &CalibrationBins) -> f64 {
    let v: Vec<f64> = (0..bins.num_classes() as evpan::ClassId)
        .filter_map(|c| uece(bins, c))
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn model_text(m: &LinearEvidential<f64>) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
    format!(
        "dim = {}\nclasses = {}\nweights = {}\nbias = {}\n",
        m.dim,
        m.classes,
        join(&m.weights),
        join(&m.bias)
    )
}

pub fn toytrain(ctx: &Context) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.config;
    let blobs = cfg.blobs;
    let train_seed = scene_seed(cfg.seed, 0);
    let (xtr, ytr) = gen_blobs(&blobs, blobs.train, train_seed)?;
    let (xte, yte) = gen_blobs(&blobs, blobs.test, scene_seed(cfg.seed, 1))?;
    let toy = cfg.toy_config();
    let mut manifest = ctx.manifest("toytrain");

    let begin = Instant::now();
    let (initial, _) = train_toy(&xtr, blobs.dim, &ytr, 2, &ToyConfig { epochs: 0, ..toy })?;
    let (model, report) = train_toy(&xtr, blobs.dim, &ytr, 2, &toy)?;
    manifest.add_stage("train", begin.elapsed());

    let before = toy_score(&initial, &xte, &yte, cfg.bins)?;
    let after = toy_score(&model, &xte, &yte, cfg.bins)?;
    let mut summary = String::from("stage,accuracy,mean_u_correct,mean_u_wrong,pece\n");
    for (stage, s) in [("before", &before), ("after", &after)] {
        summary.push_str(&format!(
            "{stage},{:.6},{:.6},{:.6},{:.6}\n",
            s.accuracy,
            s.u_correct,
            s.u_wrong,
            class_mean_uece(&s.bins)
        ));
    }
    let blob_tax = ClassTaxonomy::new(vec![("blob0".into(), false, 1), ("blob1".into(), false, 2)], 255, [])?;
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    io::write_atomic(&ctx.out.join("toy_model.txt"), model_text(&model).as_bytes())?;
    io::write_atomic(&ctx.out.join("toy_summary.csv"), summary.as_bytes())?;
    for (stage, s) in [("before", &before), ("after", &after)] {
        let curve = curve_csv(&calibration_curve(&s.bins), &blob_tax);
        io::write_atomic(&ctx.out.join(format!("toy_calibration_{stage}.csv")), curve.as_bytes())?;
    }
    if let Some(last) = report.losses.last() {
        manifest.note("final_loss", last);
    }
    manifest.note("train_seed", train_seed);
    print!("{summary}");
    finish(ctx, manifest, start, Vec::new())
}
