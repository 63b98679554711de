//! Subcommand implementations: each resolves its config, consumes its
//! inputs, writes an output directory containing a run manifest, and
//! reports through the documented exit codes (0 success, 1 usage,
//! 2 validation or data, 3 numeric failure).

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use spatok_core::codebook::{round_trip_stats, train_vqvae, VqError, VqVaeParams};
use spatok_core::eval::{
    aggregate, evaluate_scene, AblationSpec, EvalError, EvalReport, SampleRecord,
};
use spatok_core::grammar::{build_prompt, build_vocabulary, pad_prompt, Vocabulary};
use spatok_core::model::{generate, init_model, ModelParams};
use spatok_core::scene::{answer_grammar_words, generate_scene, SceneSample};
use spatok_core::train::{prepare_dataset, train, TrainError, PROMPT_LEN};

use crate::config::{load_config, ConfigError, Overrides, PipelineConfig};
use crate::container::{load_checkpoint, load_codebook, save_checkpoint, save_codebook, ContainerError};
use crate::dataset::{load_dataset, save_dataset, DatasetError};
use crate::manifest::{
    combine_hashes, finalize_manifest, hash_bytes, hash_dir, hash_file, ManifestError,
    OptimizerRecord, RunManifest, MANIFEST_FILE,
};
use crate::viz::{write_sample_panels, VizError};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct RunError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for RunError {}

fn usage(message: impl Into<String>) -> RunError {
    RunError { code: EXIT_USAGE, message: message.into() }
}

fn data(message: impl fmt::Display) -> RunError {
    RunError { code: EXIT_DATA, message: message.to_string() }
}

fn numeric(message: impl fmt::Display) -> RunError {
    RunError { code: EXIT_NUMERIC, message: message.to_string() }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Parse { .. } => usage(e.to_string()),
            ConfigError::Io { .. } | ConfigError::Invalid { .. } => data(e),
        }
    }
}

impl From<DatasetError> for RunError {
    fn from(e: DatasetError) -> Self {
        data(e)
    }
}

impl From<ContainerError> for RunError {
    fn from(e: ContainerError) -> Self {
        data(e)
    }
}

impl From<ManifestError> for RunError {
    fn from(e: ManifestError) -> Self {
        data(e)
    }
}

impl From<VizError> for RunError {
    fn from(e: VizError) -> Self {
        data(e)
    }
}

impl From<VqError> for RunError {
    fn from(e: VqError) -> Self {
        match e {
            VqError::Diverged { .. } | VqError::NonFiniteLatent => numeric(e),
            other => data(other),
        }
    }
}

/// Non-finite scores inside the network are a numeric failure; every
/// other tape error is a shape or usage bug.
fn tape_is_numeric(e: &spatok_core::tape::TapeError) -> bool {
    matches!(e, spatok_core::tape::TapeError::NonFiniteSoftmax { .. })
}

fn model_is_numeric(e: &spatok_core::model::ModelError) -> bool {
    matches!(e, spatok_core::model::ModelError::Tape(t) if tape_is_numeric(t))
}

impl From<TrainError> for RunError {
    fn from(e: TrainError) -> Self {
        let is_numeric = match &e {
            TrainError::NonFiniteLoss { .. } => true,
            TrainError::Model(m) => model_is_numeric(m),
            TrainError::Tape(t) => tape_is_numeric(t),
            _ => false,
        };
        if is_numeric {
            numeric(e)
        } else {
            data(e)
        }
    }
}

impl From<EvalError> for RunError {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::Model(m) if model_is_numeric(m) => numeric(e),
            _ => data(e),
        }
    }
}

impl From<spatok_core::model::ModelError> for RunError {
    fn from(e: spatok_core::model::ModelError) -> Self {
        if model_is_numeric(&e) {
            numeric(e)
        } else {
            data(e)
        }
    }
}

impl From<spatok_core::grammar::GrammarError> for RunError {
    fn from(e: spatok_core::grammar::GrammarError) -> Self {
        data(e)
    }
}

impl From<spatok_core::scene::SceneError> for RunError {
    fn from(e: spatok_core::scene::SceneError) -> Self {
        data(e)
    }
}

// ─── command line ───

#[derive(Debug, Parser)]
#[command(
    name = "spatok",
    version,
    about = "Spatial token generation pipeline: synthetic scenes, a depth \
             codebook, an interleaved-sequence model, and its evaluation."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset directory.
    GenData(GenDataArgs),
    /// Train the depth codebook on a dataset's depth maps.
    TrainVqvae(TrainVqvaeArgs),
    /// Train the sequence model against a frozen codebook.
    Train(TrainArgs),
    /// Evaluate a training run on a held-out dataset.
    Eval(EvalArgs),
    /// Retrain and evaluate ablation variants, then compare them.
    Ablate(AblateArgs),
    /// Export visualization panels for chosen samples.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Config file (JSON or key=value); defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of scenes to generate.
    #[arg(long)]
    pub count: Option<usize>,
    /// First generator index; lets train and eval sets stay disjoint.
    #[arg(long)]
    pub offset: Option<u64>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct TrainVqvaeArgs {
    /// Dataset directory whose depth maps feed training.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for codebook.bin and the loss curve.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Frozen codebook file from train-vqvae.
    #[arg(long)]
    pub codebook: PathBuf,
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory holding checkpoint.bin and codebook.bin.
    #[arg(long)]
    pub run: PathBuf,
    /// Held-out dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for records, report, and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset directory for per-variant evaluation.
    #[arg(long)]
    pub eval_data: PathBuf,
    /// Frozen codebook shared by every variant.
    #[arg(long)]
    pub codebook: PathBuf,
    /// Output directory; each variant gets a run directory under it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated variant names; all five when omitted.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    /// Run directory holding checkpoint.bin and codebook.bin.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory supplying the samples.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the panels.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated sample ordinals within the dataset.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub samples: Vec<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

pub fn dispatch(command: Command) -> Result<(), RunError> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::TrainVqvae(args) => run_train_vqvae(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Viz(args) => run_viz(args),
    }
}

// ─── shared plumbing ───

/// Worker cap: SPATIAL_TOKEN_THREADS when set and sane, otherwise the
/// visible core count.
pub fn worker_count() -> usize {
    if let Ok(raw) = std::env::var("SPATIAL_TOKEN_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
        eprintln!("ignoring SPATIAL_TOKEN_THREADS={raw:?}: expected a positive integer");
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn resolve_config(
    path: Option<&Path>,
    overrides: &Overrides,
    vq_stage: bool,
) -> Result<PipelineConfig, RunError> {
    let mut config = load_config(path)?;
    overrides.apply(&mut config, vq_stage)?;
    Ok(config)
}

fn config_value(config: &PipelineConfig) -> serde_json::Value {
    serde_json::to_value(config).expect("config serializes")
}

fn config_hash(config: &PipelineConfig) -> String {
    hash_bytes(&serde_json::to_vec(config).expect("config serializes"))
}

fn create_dir(path: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(path)
        .map_err(|e| data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_text(path, &(text + "\n"))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("line serializes"));
        out.push('\n');
    }
    out
}

fn vocab_tsv(vocab: &Vocabulary) -> String {
    let mut out = String::from("id\tsurface\tkind\n");
    for id in 0..vocab.size() as u32 {
        out.push_str(&format!("{id}\t{}\t{}\n", vocab.surface(id), vocab.kind(id)));
    }
    out
}

#[derive(Serialize)]
struct StepLine<'a> {
    step: usize,
    #[serde(flatten)]
    report: &'a spatok_core::losses::LossReport,
}

#[derive(Serialize)]
struct CurveLine {
    step: usize,
    loss: f64,
}

fn build_vocab_for(codebook: &VqVaeParams) -> Result<Vocabulary, RunError> {
    Ok(build_vocabulary(codebook.codebook.k, &answer_grammar_words())?)
}

// ─── gen-data ───

fn gen_data(args: GenDataArgs) -> Result<(), RunError> {
    let mut config = resolve_config(args.config.as_deref(), &args.overrides, false)?;
    if let Some(count) = args.count {
        if count == 0 {
            return Err(data("data.count must be positive"));
        }
        config.data.count = count;
    }
    if let Some(offset) = args.offset {
        config.data.offset = offset;
    }
    let scene_cfg = config.scene_config();
    let manifest = RunManifest::new(
        "gen-data",
        config_value(&config),
        config.seed,
        combine_hashes(&[("config", &config_hash(&config))]),
    );

    let mut scenes: Vec<(u64, SceneSample)> = Vec::with_capacity(config.data.count);
    for i in 0..config.data.count as u64 {
        let index = config.data.offset + i;
        scenes.push((index, generate_scene(&scene_cfg, index)?));
    }
    let samples: usize =
        scenes.iter().map(|(_, s)| 1 + usize::from(s.point_task.is_some())).sum();
    create_dir(&args.out)?;
    save_dataset(&args.out, &scenes)?;
    finalize_manifest(&args.out, manifest)?;
    println!(
        "wrote {} scenes ({} samples) to {} (indices {}..{})",
        scenes.len(),
        samples,
        args.out.display(),
        config.data.offset,
        config.data.offset + config.data.count as u64
    );
    Ok(())
}

// ─── train-vqvae ───

fn run_train_vqvae(args: TrainVqvaeArgs) -> Result<(), RunError> {
    let config = resolve_config(args.config.as_deref(), &args.overrides, true)?;
    let vq_cfg = config.vqvae_config()?;
    let scenes = load_dataset(&args.data)?;
    let maps: Vec<_> = scenes.iter().map(|s| s.depth.clone()).collect();

    let mut manifest = RunManifest::new(
        "train-vqvae",
        config_value(&config),
        config.seed,
        combine_hashes(&[
            ("config", &config_hash(&config)),
            ("data", &hash_dir(&args.data, &[MANIFEST_FILE])?),
        ]),
    );
    // The codebook trains without decay; decayed entries would drift
    // from the latents they quantize.
    manifest.optimizer = Some(OptimizerRecord::adamw(0.0));

    let training = train_vqvae(&maps, &vq_cfg)?;
    let stats = round_trip_stats(&training.params, &maps)?;

    create_dir(&args.out)?;
    save_codebook(&args.out.join("codebook.bin"), &training.params)?;
    let curve = training.curve.iter().enumerate().map(|(step, &loss)| CurveLine { step, loss });
    write_text(&args.out.join("curve.jsonl"), &jsonl(curve))?;
    finalize_manifest(&args.out, manifest)?;
    println!(
        "codebook: K={} E={} on {} maps, {} steps; train round-trip rmse {:.4}, {} codes used",
        vq_cfg.k,
        vq_cfg.e,
        maps.len(),
        vq_cfg.steps,
        stats.rmse,
        stats.used_codes
    );
    Ok(())
}

// ─── train ───

struct TrainedRun {
    params: ModelParams,
    first_loss: f64,
    last_loss: f64,
}

/// Inputs shared by `train` and every `ablate` variant.
struct TrainInputs<'a> {
    scenes: &'a [SceneSample],
    codebook: &'a VqVaeParams,
    codebook_file: &'a Path,
    vocab: &'a Vocabulary,
}

/// Prepare the dataset under the variant's options, train, and persist
/// the run directory.
fn train_into(
    out: &Path,
    inputs: &TrainInputs<'_>,
    config: &PipelineConfig,
    spec: AblationSpec,
    manifest: RunManifest,
) -> Result<TrainedRun, RunError> {
    let TrainInputs { scenes, codebook, codebook_file, vocab } = *inputs;
    let dataset = prepare_dataset(scenes, codebook, vocab, &spec.options())?;
    let mut train_cfg = config.train_config();
    train_cfg.weights = spec.weights(train_cfg.weights);
    let model_cfg = config.model_config();
    let init = init_model(
        &model_cfg,
        vocab.size(),
        codebook.image_height,
        codebook.image_width,
        config.seed,
    )?;
    let outcome = train(init, &dataset, codebook, vocab, &train_cfg)?;

    create_dir(out)?;
    save_checkpoint(&out.join("checkpoint.bin"), &outcome.params)?;
    std::fs::copy(codebook_file, out.join("codebook.bin"))
        .map_err(|e| data(format!("{}: {e}", codebook_file.display())))?;
    write_text(&out.join("vocab.tsv"), &vocab_tsv(vocab))?;
    let lines = outcome
        .reports
        .iter()
        .enumerate()
        .map(|(step, report)| StepLine { step, report });
    write_text(&out.join("losses.jsonl"), &jsonl(lines))?;
    finalize_manifest(out, manifest)?;
    Ok(TrainedRun {
        params: outcome.params,
        first_loss: outcome.reports.first().map(|r| r.total).unwrap_or(f64::NAN),
        last_loss: outcome.reports.last().map(|r| r.total).unwrap_or(f64::NAN),
    })
}

fn run_train(args: TrainArgs) -> Result<(), RunError> {
    let config = resolve_config(args.config.as_deref(), &args.overrides, false)?;
    let scenes = load_dataset(&args.data)?;
    let codebook = load_codebook(&args.codebook)?;
    let vocab = build_vocab_for(&codebook)?;

    let mut manifest = RunManifest::new(
        "train",
        config_value(&config),
        config.seed,
        combine_hashes(&[
            ("config", &config_hash(&config)),
            ("data", &hash_dir(&args.data, &[MANIFEST_FILE])?),
            ("codebook", &hash_file(&args.codebook)?),
        ]),
    );
    manifest.optimizer = Some(OptimizerRecord::adamw(0.01));

    println!(
        "training on {} scenes for {} steps (batch {} x accum {})",
        scenes.len(),
        config.train.steps,
        config.train.batch,
        config.train.accum
    );
    let inputs = TrainInputs {
        scenes: &scenes,
        codebook: &codebook,
        codebook_file: &args.codebook,
        vocab: &vocab,
    };
    let run = train_into(&args.out, &inputs, &config, AblationSpec::Full, manifest)?;
    println!(
        "loss {:.3} -> {:.3}; run directory {}",
        run.first_loss,
        run.last_loss,
        args.out.display()
    );
    Ok(())
}

// ─── eval ───

/// Generate on every scene with the configured worker cap, keeping the
/// aggregation order independent of thread interleaving.
fn evaluate_parallel(
    params: &ModelParams,
    codebook: &VqVaeParams,
    vocab: &Vocabulary,
    scenes: &[SceneSample],
    max_new: usize,
    workers: usize,
) -> Result<Vec<SampleRecord>, EvalError> {
    if workers <= 1 || scenes.len() <= 1 {
        let mut records = Vec::new();
        for (i, scene) in scenes.iter().enumerate() {
            records.extend(evaluate_scene(params, codebook, vocab, scene, i, max_new)?);
        }
        return Ok(records);
    }
    let workers = workers.min(scenes.len());
    let mut indexed: Vec<(usize, Vec<SampleRecord>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|t| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    for (i, scene) in scenes.iter().enumerate().skip(t).step_by(workers) {
                        out.push((i, evaluate_scene(params, codebook, vocab, scene, i, max_new)?));
                    }
                    Ok::<_, EvalError>(out)
                })
            })
            .collect();
        let mut merged = Vec::with_capacity(scenes.len());
        let mut first_err = None;
        for handle in handles {
            match handle.join().expect("worker does not panic") {
                Ok(part) => merged.extend(part),
                Err(e) if first_err.is_none() => first_err = Some(e),
                Err(_) => {}
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(merged),
        }
    })?;
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().flat_map(|(_, records)| records).collect())
}

fn fmt_opt(value: Option<f64>, precision: usize) -> String {
    match value {
        Some(v) => format!("{v:.precision$}"),
        None => String::from("absent"),
    }
}

/// Aligned plain-text rendering of a report, one metric per row.
fn report_table(report: &EvalReport) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("samples".into(), report.samples.to_string()),
        ("referring samples".into(), report.referring_samples.to_string()),
        ("point samples".into(), report.point_samples.to_string()),
        ("ciou %".into(), fmt_opt(report.ciou, 2)),
        ("answer exact match %".into(), format!("{:.2}", report.answer_exact_match)),
        ("span validity %".into(), format!("{:.2}", report.span_validity_rate)),
        ("seg first %".into(), format!("{:.2}", report.seg_first_rate)),
        (
            "mean predicted interior length".into(),
            fmt_opt(report.mean_predicted_interior_length, 2),
        ),
    ];
    for (i, acc) in report.relative_depth.per_p.iter().enumerate() {
        rows.push((
            format!("relative depth P={} % ({} tasks)", i + 3, report.relative_depth.counts[i]),
            fmt_opt(*acc, 2),
        ));
    }
    rows.push(("relative depth average %".into(), fmt_opt(report.relative_depth.average, 2)));
    rows.push(("depth rmse".into(), fmt_opt(report.depth_rmse, 4)));
    rows.push(("depth valid fraction".into(), format!("{:.4}", report.depth_valid_fraction)));

    let name_width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    let value_width = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (name, value) in rows {
        out.push_str(&format!("{name:<name_width$}  {value:>value_width$}\n"));
    }
    out
}

fn eval_into(
    out: &Path,
    params: &ModelParams,
    codebook: &VqVaeParams,
    vocab: &Vocabulary,
    scenes: &[SceneSample],
    max_new: usize,
    manifest: RunManifest,
) -> Result<EvalReport, RunError> {
    let records = evaluate_parallel(params, codebook, vocab, scenes, max_new, worker_count())?;
    let report = aggregate(&records)?;
    report.validate()?;
    create_dir(out)?;
    write_text(&out.join("records.jsonl"), &jsonl(records.iter()))?;
    write_json_pretty(&out.join("report.json"), &report)?;
    write_text(&out.join("report.txt"), &report_table(&report))?;
    finalize_manifest(out, manifest)?;
    Ok(report)
}

fn run_eval(args: EvalArgs) -> Result<(), RunError> {
    let config = resolve_config(args.config.as_deref(), &args.overrides, false)?;
    let params = load_checkpoint(&args.run.join("checkpoint.bin"))?;
    let codebook = load_codebook(&args.run.join("codebook.bin"))?;
    let vocab = build_vocab_for(&codebook)?;
    let scenes = load_dataset(&args.data)?;

    let manifest = RunManifest::new(
        "eval",
        config_value(&config),
        config.seed,
        combine_hashes(&[
            ("config", &config_hash(&config)),
            ("run", &hash_dir(&args.run, &[MANIFEST_FILE])?),
            ("data", &hash_dir(&args.data, &[MANIFEST_FILE])?),
        ]),
    );
    let report = eval_into(
        &args.out,
        &params,
        &codebook,
        &vocab,
        &scenes,
        config.eval.max_new,
        manifest,
    )?;
    print!("{}", report_table(&report));
    Ok(())
}

// ─── ablate ───

#[derive(Serialize)]
struct VariantSummary {
    variant: String,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<EvalReport>,
}

/// "83.4 (2.1 v)" style annotation against the full variant's value;
/// plain when either side is absent.
fn delta_cell(variant: Option<f64>, full: Option<f64>, precision: usize) -> String {
    match (variant, full) {
        (Some(v), Some(f)) => {
            let delta = v - f;
            if delta.abs() < 10f64.powi(-(precision as i32)) / 2.0 {
                format!("{v:.precision$} (=)")
            } else {
                let arrow = if delta < 0.0 { '\u{2193}' } else { '\u{2191}' };
                format!("{v:.precision$} ({:.precision$} {arrow})", delta.abs())
            }
        }
        (v, _) => fmt_opt(v, precision),
    }
}

fn comparison_table(summaries: &[VariantSummary]) -> String {
    let full = summaries
        .iter()
        .find(|s| s.variant == "full")
        .and_then(|s| s.report.as_ref());
    let columns = ["variant", "ciou %", "rel depth avg %", "exact %", "span valid %", "depth rmse"];
    let mut grid: Vec<[String; 6]> = vec![columns.map(String::from)];
    for s in summaries {
        let row = match &s.report {
            Some(r) => {
                let f = |get: fn(&EvalReport) -> Option<f64>, precision| {
                    delta_cell(get(r), full.and_then(get), precision)
                };
                [
                    s.variant.clone(),
                    f(|r| r.ciou, 2),
                    f(|r| r.relative_depth.average, 2),
                    f(|r| Some(r.answer_exact_match), 2),
                    f(|r| Some(r.span_validity_rate), 2),
                    f(|r| r.depth_rmse, 4),
                ]
            }
            None => {
                let mut row = [const { String::new() }; 6];
                row[0] = s.variant.clone();
                row[1] = s.status.clone();
                row
            }
        };
        grid.push(row);
    }
    let mut widths = [0usize; 6];
    for row in &grid {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &grid {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn run_ablate(args: AblateArgs) -> Result<(), RunError> {
    let config = resolve_config(args.config.as_deref(), &args.overrides, false)?;
    let variants: Vec<AblationSpec> = if args.variants.is_empty() {
        AblationSpec::ALL.to_vec()
    } else {
        args.variants
            .iter()
            .map(|name| {
                AblationSpec::parse(name).ok_or_else(|| {
                    let known: Vec<&str> = AblationSpec::ALL.iter().map(|s| s.name()).collect();
                    usage(format!("unknown variant `{name}` (known: {})", known.join(", ")))
                })
            })
            .collect::<Result<_, _>>()?
    };

    let scenes = load_dataset(&args.data)?;
    let eval_scenes = load_dataset(&args.eval_data)?;
    let codebook = load_codebook(&args.codebook)?;
    let vocab = build_vocab_for(&codebook)?;
    let input_hash = combine_hashes(&[
        ("config", &config_hash(&config)),
        ("data", &hash_dir(&args.data, &[MANIFEST_FILE])?),
        ("eval_data", &hash_dir(&args.eval_data, &[MANIFEST_FILE])?),
        ("codebook", &hash_file(&args.codebook)?),
    ]);
    create_dir(&args.out)?;

    let mut summaries = Vec::with_capacity(variants.len());
    for spec in variants {
        let out = args.out.join(spec.name());
        println!("variant {}: training {} steps", spec.name(), config.train.steps);
        let mut manifest =
            RunManifest::new("ablate", config_value(&config), config.seed, input_hash.clone());
        manifest.optimizer = Some(OptimizerRecord::adamw(0.01));
        let inputs = TrainInputs {
            scenes: &scenes,
            codebook: &codebook,
            codebook_file: &args.codebook,
            vocab: &vocab,
        };
        // A diverging variant is recorded and must not sink the others.
        let summary = match train_into(&out, &inputs, &config, spec, manifest) {
            Ok(run) => {
                let eval_manifest = RunManifest::new(
                    "eval",
                    config_value(&config),
                    config.seed,
                    input_hash.clone(),
                );
                match eval_into(
                    &out.join("eval"),
                    &run.params,
                    &codebook,
                    &vocab,
                    &eval_scenes,
                    config.eval.max_new,
                    eval_manifest,
                ) {
                    Ok(report) => VariantSummary {
                        variant: spec.name().to_string(),
                        status: String::from("ok"),
                        report: Some(report),
                    },
                    Err(e) => VariantSummary {
                        variant: spec.name().to_string(),
                        status: format!("eval failed: {}", e.message),
                        report: None,
                    },
                }
            }
            Err(e) => VariantSummary {
                variant: spec.name().to_string(),
                status: format!("training failed: {}", e.message),
                report: None,
            },
        };
        println!("variant {}: {}", summary.variant, summary.status);
        summaries.push(summary);
    }

    write_json_pretty(&args.out.join("comparison.json"), &summaries)?;
    let table = comparison_table(&summaries);
    write_text(&args.out.join("comparison.txt"), &table)?;
    let manifest = RunManifest::new("ablate", config_value(&config), config.seed, input_hash);
    finalize_manifest(&args.out, manifest)?;
    print!("{table}");
    Ok(())
}

// ─── viz ───

fn run_viz(args: VizArgs) -> Result<(), RunError> {
    let config = resolve_config(args.config.as_deref(), &args.overrides, false)?;
    let run_hash_before = hash_dir(&args.run, &[])?;
    let params = load_checkpoint(&args.run.join("checkpoint.bin"))?;
    let codebook = load_codebook(&args.run.join("codebook.bin"))?;
    let vocab = build_vocab_for(&codebook)?;
    let scenes = load_dataset(&args.data)?;

    let manifest = RunManifest::new(
        "viz",
        config_value(&config),
        config.seed,
        combine_hashes(&[
            ("config", &config_hash(&config)),
            ("run", &run_hash_before),
            ("data", &hash_dir(&args.data, &[MANIFEST_FILE])?),
        ]),
    );
    create_dir(&args.out)?;
    for &ordinal in &args.samples {
        let scene = scenes.get(ordinal).ok_or_else(|| {
            data(format!("sample {ordinal} out of range: dataset has {} scenes", scenes.len()))
        })?;
        let words: Vec<&str> = scene.query.split_whitespace().collect();
        let prompt = pad_prompt(&build_prompt(&words, &vocab)?, PROMPT_LEN, &vocab)?;
        let generation =
            generate(&params, &codebook, &vocab, &scene.image, &prompt, config.eval.max_new)?;
        write_sample_panels(&args.out.join(format!("sample_{ordinal}")), scene, &generation, &vocab)?;
    }
    finalize_manifest(&args.out, manifest)?;

    let run_hash_after = hash_dir(&args.run, &[])?;
    if run_hash_after != run_hash_before {
        return Err(data("viz modified the run directory; this is a bug"));
    }
    println!("wrote {} sample panel sets to {}", args.samples.len(), args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_with(ciou: Option<f64>, rel_avg: Option<f64>) -> EvalReport {
        EvalReport {
            samples: 2,
            referring_samples: 1,
            point_samples: 1,
            ciou,
            per_sample_iou: vec![],
            relative_depth: spatok_core::eval::RelDepthAccuracy {
                per_p: [rel_avg, None, None],
                counts: [1, 0, 0],
                average: rel_avg,
            },
            answer_exact_match: 50.0,
            span_validity_rate: 100.0,
            seg_first_rate: 100.0,
            mean_predicted_interior_length: Some(100.0),
            depth_rmse: Some(0.05),
            depth_valid_fraction: 1.0,
        }
    }

    #[test]
    fn delta_cells_mirror_the_paper_annotations() {
        assert_eq!(delta_cell(Some(45.2), Some(71.0), 1), "45.2 (25.8 \u{2193})");
        assert_eq!(delta_cell(Some(82.0), Some(80.0), 1), "82.0 (2.0 \u{2191})");
        assert_eq!(delta_cell(Some(70.0), Some(70.0), 1), "70.0 (=)");
        assert_eq!(delta_cell(None, Some(70.0), 1), "absent");
        assert_eq!(delta_cell(Some(70.0), None, 1), "70.0");
    }

    #[test]
    fn comparison_table_handles_failed_and_absent_variants() {
        let summaries = vec![
            VariantSummary {
                variant: "full".into(),
                status: "ok".into(),
                report: Some(report_with(Some(83.0), Some(54.0))),
            },
            VariantSummary {
                variant: "no_seg".into(),
                status: "ok".into(),
                report: Some(report_with(None, Some(52.0))),
            },
            VariantSummary {
                variant: "no_depth".into(),
                status: "training failed: non-finite loss".into(),
                report: None,
            },
        ];
        let table = comparison_table(&summaries);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].contains("83.00"), "{table}");
        assert!(lines[2].contains("absent"), "{table}");
        assert!(lines[2].contains("2.00 \u{2193}"), "{table}");
        assert!(lines[3].contains("training failed"), "{table}");
    }

    #[test]
    fn report_table_prints_every_metric_row() {
        let table = report_table(&report_with(Some(83.0), Some(54.0)));
        for needle in [
            "samples",
            "ciou %",
            "relative depth P=3",
            "relative depth average %",
            "depth rmse",
            "span validity %",
        ] {
            assert!(table.contains(needle), "missing {needle} in:\n{table}");
        }
        let widths: Vec<usize> = table.lines().map(|l| l.len()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "rows not aligned:\n{table}");
    }

    #[test]
    fn worker_count_is_at_least_one() {
        assert!(worker_count() >= 1);
    }
}
