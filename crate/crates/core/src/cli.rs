//! Command-line front end. Every subcommand reads and writes the formats in
//! [`crate::io`]; exit status is 0 on success, 2 on input or validation
//! errors and 3 when a metric is undefined for the inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::detmetrics::{mean_ap, ApConfig, ApReport, Detection};
use crate::error::{Error, Result};
use crate::experiment::{build_report, cmd_experiment, render, ExperimentSpec, Format, RunResult};
use crate::io::{
    grid_to_heatmap, parse_json, read_annotations, read_bundle, read_detections, read_file,
    read_grid, read_manifest, to_json_bytes, write_bundle, write_detections, write_file,
    write_grid, write_image, write_manifest, AttributionEntry, AttributionManifest,
};
use crate::micromodel::checkpoint::{load_backbone, load_params, save_backbone, save_params};
use crate::micromodel::{grad_cam, predict_detection, pretrain, train, Tensor, TrainConfig, TransferRegime};
use crate::seeding::derive_seed;
use crate::synthdata::{generate, split, DatasetBundle, CLASS_NAMES};
use crate::xaimetrics::{evaluate_explanations, ExplainedDetection, XaiEvalConfig, XaiSummary};

#[derive(Debug, Parser)]
#[command(name = "detxai", version, about = "Detection and attribution evaluation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate source, auxiliary and target bundles with train/val/test splits.
    Synth(SynthArgs),
    /// Train the full model on a source bundle and export its backbone.
    Pretrain(PretrainArgs),
    /// Train on a target bundle under one transfer regime.
    Train(TrainArgs),
    /// Write one detection per image of a bundle.
    Predict(PredictArgs),
    /// Write a GradCAM grid per detection plus a manifest.
    Explain(ExplainArgs),
    /// COCO-style AP of detections against annotations.
    EvalAp(EvalApArgs),
    /// Attribution localization and top-k intersection of explained detections.
    EvalXai(EvalXaiArgs),
    /// Run the transfer and training-set composition experiments.
    Experiment(ExperimentArgs),
    /// Rebuild a report from stored raw results.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Experiment spec (JSON); defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Training bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation bundle directory.
    #[arg(long)]
    pub val: PathBuf,
    /// Training config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Backbone checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history (JSON) to write.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// no_pretrain, freeze_backbone or fine_tune_all; overrides the config.
    #[arg(long)]
    pub regime: Option<TransferRegime>,
    /// Pretrained backbone checkpoint.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Model checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub score_threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// Output directory for grids, heatmaps and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write PGM heatmaps.
    #[arg(long)]
    pub heatmaps: bool,
}

#[derive(Debug, Args)]
pub struct EvalApArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// AP config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluate at this single IoU threshold instead.
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalXaiArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// Attribution manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Matching IoU threshold.
    #[arg(long)]
    pub iou: Option<f64>,
    #[arg(long)]
    pub score_threshold: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for raw results and reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// The spec the raw results were produced with.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// raw_results.json from an experiment run.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(path, &read_file(path)?)
}

/// Recursively overlays `patch` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses JSON text as a partial override of `T::default()`; `origin` names
/// the source in errors.
pub fn parse_config<T: Serialize + DeserializeOwned + Default>(origin: &Path, text: &[u8]) -> Result<T> {
    let patch: Value = parse_json(origin, text)?;
    let mut base = serde_json::to_value(T::default()).expect("defaults serialize");
    merge_json(&mut base, patch);
    serde_json::from_value(base)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", origin.display())))
}

/// Loads a config file as a partial override of `T::default()`.
pub fn load_config<T: Serialize + DeserializeOwned + Default>(path: &Path) -> Result<T> {
    parse_config(path, &read_file(path)?)
}

fn config_or_default<T: Serialize + DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    path.as_deref().map_or_else(|| Ok(T::default()), load_config)
}

fn emit(text: &str, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn class_name(id: u32) -> String {
    match CLASS_NAMES.get((id as usize).wrapping_sub(1)) {
        Some(n) => format!("{id} ({n})"),
        None => id.to_string(),
    }
}

pub fn render_ap(report: &ApReport, format: Format) -> String {
    match format {
        Format::Json => String::from_utf8(to_json_bytes(report)).expect("utf-8"),
        Format::Md => {
            let mut s = String::from("| Class | AP ↑ |");
            for t in &report.iou_thresholds {
                let _ = write!(s, " AP@{t:.2} |");
            }
            s.push_str("\n|---|---:|");
            s.push_str(&"---:|".repeat(report.iou_thresholds.len()));
            s.push('\n');
            for (i, id) in report.class_ids.iter().enumerate() {
                let _ = write!(s, "| {} | {:.1} |", class_name(*id), report.class_ap[i] * 100.0);
                for v in &report.cap[i] {
                    let _ = write!(s, " {:.1} |", v * 100.0);
                }
                s.push('\n');
            }
            let _ = writeln!(
                s,
                "\nMean AP ↑ {:.1} over {} classes with ground truth (×100).",
                report.mean_ap * 100.0,
                report.classes_evaluated
            );
            s
        }
        Format::Csv => {
            let mut s = String::from("class_id,ap");
            for t in &report.iou_thresholds {
                let _ = write!(s, ",ap_{t}");
            }
            s.push('\n');
            for (i, id) in report.class_ids.iter().enumerate() {
                let _ = write!(s, "{id},{}", report.class_ap[i]);
                for v in &report.cap[i] {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
            let _ = writeln!(s, "mean,{}", report.mean_ap);
            s
        }
    }
}

pub fn render_xai(summary: &XaiSummary, format: Format) -> String {
    match format {
        Format::Json => String::from_utf8(to_json_bytes(summary)).expect("utf-8"),
        Format::Md => {
            let mut s = String::from("| Class | AL ↑ | TKI ↑ | Explained |\n|---|---:|---:|---:|\n");
            for c in &summary.per_class {
                let _ = writeln!(
                    s,
                    "| {} | {:.3}±{:.3} | {:.3}±{:.3} | {} |",
                    class_name(c.category_id),
                    c.al.mean,
                    c.al.variance,
                    c.tki.mean,
                    c.tki.variance,
                    c.al.count
                );
            }
            let _ = writeln!(
                s,
                "| all | {:.3}±{:.3} | {:.3}±{:.3} | {} |\n\n± is the population variance. Matched detections: {}; skipped for lack of positive relevance: {}.",
                summary.al.mean,
                summary.al.variance,
                summary.tki.mean,
                summary.tki.variance,
                summary.al.count,
                summary.matched,
                summary.skipped_no_relevance
            );
            s
        }
        Format::Csv => {
            let mut s = String::from("class_id,al_mean,al_variance,al_std,tki_mean,tki_variance,tki_std,count\n");
            let rows = summary
                .per_class
                .iter()
                .map(|c| (c.category_id.to_string(), c.al, c.tki))
                .chain(std::iter::once(("all".to_string(), summary.al, summary.tki)));
            for (id, al, tki) in rows {
                let _ = writeln!(
                    s,
                    "{id},{},{},{},{},{},{},{}",
                    al.mean, al.variance, al.std, tki.mean, tki.variance, tki.std, al.count
                );
            }
            s
        }
    }
}

fn image_of(bundle: &DatasetBundle, image_id: u64) -> Result<&Tensor> {
    bundle
        .ground_truths
        .iter()
        .position(|g| g.image_id == image_id)
        .map(|i| &bundle.images[i])
        .ok_or_else(|| Error::Integrity(format!("image id {image_id} is not in the bundle")))
}

pub fn cmd_synth(spec: &ExperimentSpec, seed: u64, out: &Path) -> Result<()> {
    spec.validate()?;
    let roles = [
        ("source", &spec.source, spec.source_images, 1),
        ("auxiliary", &spec.auxiliary, spec.auxiliary_images, 2),
        ("target", &spec.target, spec.target_images, 3),
    ];
    for (role, domain, n, stream) in roles {
        let bundle = generate(domain, n, derive_seed(seed, stream))?;
        let (tr, va, te) = split(&bundle, spec.split, derive_seed(seed, stream + 100))?;
        for (name, part) in [("train", tr), ("val", va), ("test", te)] {
            write_bundle(&part, out.join(role).join(name))?;
        }
    }
    Ok(())
}

pub fn cmd_eval_ap(annotations: &Path, detections: &Path, config: &ApConfig) -> Result<ApReport> {
    let set = read_annotations(annotations)?;
    let dets = read_detections(detections)?;
    mean_ap(&dets, &set.ground_truths(), config)
}

pub fn cmd_eval_xai(
    annotations: &Path,
    detections: &Path,
    manifest: &Path,
    config: &XaiEvalConfig,
) -> Result<XaiSummary> {
    let set = read_annotations(annotations)?;
    let dets = read_detections(detections)?;
    let m = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let items = m
        .entries
        .iter()
        .map(|e| {
            let det: &Detection = dets.get(e.detection_index).ok_or_else(|| {
                Error::Integrity(format!("manifest references missing detection {}", e.detection_index))
            })?;
            if (det.image_id, det.category_id) != (e.image_id, e.category_id) {
                return Err(Error::Integrity(format!(
                    "manifest entry for detection {} disagrees with the detection file",
                    e.detection_index
                )));
            }
            let grid = read_grid(base.join(&e.grid_path))?;
            let info = set.image(e.image_id).ok_or_else(|| {
                Error::Integrity(format!("manifest references missing image id {}", e.image_id))
            })?;
            if (grid.width(), grid.height()) != (info.width, info.height) {
                return Err(Error::Integrity(format!(
                    "grid {} is {}x{}, image {} is {}x{}",
                    e.grid_path.display(),
                    grid.width(),
                    grid.height(),
                    info.id,
                    info.width,
                    info.height
                )));
            }
            Ok(ExplainedDetection { detection: *det, grid })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_explanations(&items, &set.ground_truths(), config)
}

fn train_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = config_or_default(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let spec: ExperimentSpec = config_or_default(&a.config)?;
            let seed = a.seed.or(spec.seeds.first().copied()).unwrap_or(0);
            cmd_synth(&spec, seed, &a.out)
        }
        Command::Pretrain(a) => {
            let cfg = train_config(&a.config, a.seed)?;
            let (backbone, _, history) = pretrain(
                &read_bundle(&a.data)?.labeled(),
                &read_bundle(&a.val)?.labeled(),
                &cfg,
            )?;
            save_backbone(&backbone, &a.out)?;
            if let Some(h) = &a.history {
                write_file(h, &to_json_bytes(&history))?;
            }
            Ok(())
        }
        Command::Train(a) => {
            let mut cfg = train_config(&a.config, a.seed)?;
            if let Some(r) = a.regime {
                cfg.regime = r;
            }
            let backbone = a.backbone.as_deref().map(load_backbone).transpose()?;
            let (params, history) = train(
                &read_bundle(&a.data)?.labeled(),
                &read_bundle(&a.val)?.labeled(),
                &cfg,
                backbone.as_ref(),
            )?;
            save_params(&params, &a.out)?;
            if let Some(h) = &a.history {
                write_file(h, &to_json_bytes(&history))?;
            }
            Ok(())
        }
        Command::Predict(a) => {
            let params = load_params(&a.params)?;
            let bundle = read_bundle(&a.data)?;
            let mut dets = Vec::new();
            for (image, gt) in bundle.images.iter().zip(&bundle.ground_truths) {
                dets.extend(predict_detection(&params, image, gt.image_id, a.score_threshold)?);
            }
            write_detections(&dets, &a.out)
        }
        Command::Explain(a) => {
            let params = load_params(&a.params)?;
            let bundle = read_bundle(&a.data)?;
            let dets = read_detections(&a.detections)?;
            let mut entries = Vec::with_capacity(dets.len());
            for (i, d) in dets.iter().enumerate() {
                let grid = grad_cam(&params, image_of(&bundle, d.image_id)?, d.category_id as usize - 1)?;
                let rel = PathBuf::from(format!("grids/{i:06}.npy"));
                write_grid(&grid, a.out.join(&rel))?;
                if a.heatmaps {
                    write_image(&grid_to_heatmap(&grid), a.out.join(format!("heatmaps/{i:06}.pgm")))?;
                }
                entries.push(AttributionEntry {
                    detection_index: i,
                    image_id: d.image_id,
                    category_id: d.category_id,
                    grid_path: rel,
                });
            }
            write_manifest(&AttributionManifest { entries }, a.out.join("manifest.json"))
        }
        Command::EvalAp(a) => {
            let mut cfg: ApConfig = config_or_default(&a.config)?;
            if let Some(t) = a.iou {
                cfg.iou_thresholds = vec![t];
            }
            let report = cmd_eval_ap(&a.annotations, &a.detections, &cfg)?;
            emit(&render_ap(&report, a.format), &a.out)
        }
        Command::EvalXai(a) => {
            let mut cfg: XaiEvalConfig = config_or_default(&a.config)?;
            if let Some(k) = a.k {
                cfg.k = k;
            }
            if let Some(t) = a.iou {
                cfg.match_iou = t;
            }
            if let Some(s) = a.score_threshold {
                cfg.score_threshold = s;
            }
            let summary = cmd_eval_xai(&a.annotations, &a.detections, &a.manifest, &cfg)?;
            emit(&render_xai(&summary, a.format), &a.out)
        }
        Command::Experiment(a) => {
            let mut spec: ExperimentSpec = config_or_default(&a.config)?;
            if let Some(s) = a.seed {
                spec.seeds = vec![s];
            }
            if a.out.is_some() {
                spec.output_dir = a.out;
            }
            let (report, _) = cmd_experiment(&spec)?;
            emit(&render(&report, a.format), &None)
        }
        Command::Report(a) => {
            let spec: ExperimentSpec = config_or_default(&a.config)?;
            let runs: Vec<RunResult> = read_json(&a.input)?;
            emit(&render(&build_report(&spec, &runs), a.format), &a.out)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
