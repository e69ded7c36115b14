//! Command-line interface: corpus synthesis, filtering, hard-negative
//! synthesis, leakage checking, two-stage training, evaluation, gradient
//! checking, and heatmap export.
//!
//! Exit codes: 0 success, 1 validation failure (bad inputs, schema or flag
//! problems, leaked duplicates), 2 numerical failure (non-finite values,
//! failed gradient checks). Configuration precedence: CLI flag > config
//! file > built-in default. `GEOALIGN_THREADS` caps internal parallelism.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    self, leakage_check, quality_filter, read_jsonl_validated, schema_validate, synth_scene,
    write_jsonl, write_ppm, ImageRef, LeakageConfig, QualityReport, QualityThresholds,
    SampleRecord, SceneConfig, Split, Verdict,
};
use crate::eval::{
    export_heatmap, hardneg_ranking, region_category, region_zero_shot, retrieval_eval,
    CaptionKind, EvalResults, Model,
};
use crate::gradcheck::{run_loss_gradchecks, LossKind};
use crate::losses::Stage;
use crate::rng::derive_seed;
use crate::train::{run_stage, Checkpoint, Preset, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "geoalign",
    about = "Multi-granularity vision-language alignment on a synthetic remote-sensing-style corpus",
    version,
    disable_help_subcommand = true
)]
pub struct Cli {
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON config file (CLI flags take precedence over it).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log level for stderr diagnostics.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene corpus: JSONL plus PPM images.
    Synth(SynthArgs),
    /// Apply the rule-based quality filter to a dataset.
    Filter(FilterArgs),
    /// Attach hard negatives to every region of a dataset.
    Hardneg(HardnegArgs),
    /// Cross-check train/test splits for duplicates and lexical leakage.
    Leakcheck(LeakcheckArgs),
    /// Train one stage and write a checkpoint plus step metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint: retrieval, region classification, hard negatives.
    Eval(EvalArgs),
    /// Verify loss gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Export a phrase-conditioned similarity heatmap as a PGM image.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of scenes to generate.
    #[arg(long, default_value_t = 640)]
    pub n: usize,
    /// Output directory (dataset.jsonl + images/).
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of records assigned to the train split.
    #[arg(long, default_value_t = 0.8)]
    pub split_ratio: f64,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Input dataset JSONL.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output JSONL holding only passing records.
    #[arg(long)]
    pub out: PathBuf,
    /// Quality report JSON.
    #[arg(long)]
    pub report: PathBuf,
    /// Brightness variance floor (defaults to the calibrated constant).
    #[arg(long)]
    pub theta_b: Option<f64>,
    /// Texture variance floor (defaults to the calibrated constant).
    #[arg(long)]
    pub theta_t: Option<f64>,
    /// Recompute both floors as the 1st percentile over 100 reference
    /// scenes generated from --seed before filtering.
    #[arg(long, default_value_t = false)]
    pub recalibrate: bool,
}

#[derive(Debug, Args)]
pub struct HardnegArgs {
    /// Input dataset JSONL.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output JSONL with hard negatives attached.
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate-set size Q per region (1 positive + Q-1 negatives).
    #[arg(long, default_value_t = 4)]
    pub q: usize,
}

#[derive(Debug, Args)]
pub struct LeakcheckArgs {
    /// Train-split dataset JSONL.
    #[arg(long)]
    pub train: PathBuf,
    /// Test-split dataset JSONL.
    #[arg(long)]
    pub test: PathBuf,
    /// Leakage report JSON.
    #[arg(long)]
    pub report: PathBuf,
    /// Jaccard threshold for flagging lexical near-duplicates.
    #[arg(long, default_value_t = 0.8)]
    pub jaccard_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1", alias = "stage1")]
    One,
    #[value(name = "2", alias = "stage2")]
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Paper,
    Toy,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training stage.
    #[arg(long)]
    pub stage: StageArg,
    /// Hyperparameter preset.
    #[arg(long, value_enum, default_value_t = PresetArg::Toy)]
    pub preset: PresetArg,
    /// Dataset JSONL (the train split is selected automatically).
    #[arg(long)]
    pub data: PathBuf,
    /// Initial checkpoint (required for stage 2, optional resume for stage 1).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics JSONL path (default: <out>.metrics.jsonl).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub lambda4: Option<f64>,
    #[arg(long)]
    pub lambda5: Option<f64>,
    /// Keep the standalone global loss active in stage 2.
    #[arg(long, default_value_t = false)]
    pub stage2_keep_global: bool,
    /// Disable duplicate-phrase masking in the region-phrase loss.
    #[arg(long, default_value_t = false)]
    pub no_dup_mask: bool,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Checkpoint and stop after this many total epochs (scheduling still
    /// targets --epochs), for resumable long runs.
    #[arg(long)]
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Retrieval,
    Regioncls,
    Hardneg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset JSONL (the test split is selected automatically).
    #[arg(long)]
    pub data: PathBuf,
    /// Tasks to run.
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [TaskArg::Retrieval, TaskArg::Regioncls, TaskArg::Hardneg])]
    pub tasks: Vec<TaskArg>,
    /// Results JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Recall cutoffs for retrieval.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    pub ks: Vec<usize>,
    /// Caption used for retrieval.
    #[arg(long, value_enum, default_value_t = CaptionArg::Detail)]
    pub caption: CaptionArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CaptionArg {
    Brief,
    Detail,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Which losses to check: all or a comma list of
    /// global,rpa,hna,vic,htc,total.
    #[arg(long, default_value = "all")]
    pub losses: String,
    /// Random instances per loss.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Checkpoint to run.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input image (PPM or PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// Phrase to localize.
    #[arg(long)]
    pub phrase: String,
    /// Output PGM path.
    #[arg(long)]
    pub out: PathBuf,
}

// ── error-to-exit-code mapping ──────────────────────────────────────────

/// Failure carrying the process exit code mandated by the interface:
/// 1 for validation problems, 2 for numerical ones.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn validation(message: impl ToString) -> CliError {
    CliError {
        code: 1,
        message: message.to_string(),
    }
}

fn numerical(message: impl ToString) -> CliError {
    CliError {
        code: 2,
        message: message.to_string(),
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        validation(e)
    }
}

impl From<crate::train::TrainError> for CliError {
    fn from(e: crate::train::TrainError) -> Self {
        use crate::train::TrainError as T;
        match &e {
            T::NonFinite { .. } | T::Tensor(_) => numerical(e),
            _ => validation(e),
        }
    }
}

impl From<crate::eval::EvalError> for CliError {
    fn from(e: crate::eval::EvalError) -> Self {
        use crate::eval::EvalError as E;
        match &e {
            E::Tensor(_) => numerical(e),
            _ => validation(e),
        }
    }
}

impl From<crate::autograd::TensorError> for CliError {
    fn from(e: crate::autograd::TensorError) -> Self {
        numerical(e)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| validation(format!("{}: cannot serialize: {e}", path.display())))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)
        .map_err(|e| validation(format!("{}: {e}", path.display())))
}

// ── per-command configuration from the optional config file ─────────────

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    train: Option<TrainFileConfig>,
    quality: Option<QualityFileConfig>,
    leakage: Option<LeakageFileConfig>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    warmup_iters: Option<usize>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    lambda3: Option<f64>,
    lambda4: Option<f64>,
    lambda5: Option<f64>,
    grad_clip_norm: Option<f64>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct QualityFileConfig {
    brightness_min: Option<f64>,
    texture_min: Option<f64>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct LeakageFileConfig {
    jaccard_threshold: Option<f64>,
    ngram: Option<usize>,
}

fn load_file_config(path: Option<&PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let bytes = std::fs::read(p)
                .map_err(|e| validation(format!("{}: {e}", p.display())))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| validation(format!("{}: bad config: {e}", p.display())))
        }
    }
}

// ── command implementations ─────────────────────────────────────────────

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file_cfg = load_file_config(cli.config.as_ref())?;
    let seed = cli.seed_or(file_cfg.seed);
    match &cli.command {
        Command::Synth(args) => cmd_synth(args, seed),
        Command::Filter(args) => cmd_filter(args, seed, &file_cfg),
        Command::Hardneg(args) => cmd_hardneg(args, seed),
        Command::Leakcheck(args) => cmd_leakcheck(args, &file_cfg),
        Command::Train(args) => cmd_train(args, seed, &file_cfg),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args, seed),
        Command::Heatmap(args) => cmd_heatmap(args),
    }
}

impl Cli {
    /// CLI flag wins over the config file; the flag's default only applies
    /// when the file is silent.
    fn seed_or(&self, from_file: Option<u64>) -> u64 {
        if self.seed != 0 {
            self.seed
        } else {
            from_file.unwrap_or(self.seed)
        }
    }
}

fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(validation("--n must be at least 1"));
    }
    if !(0.0..=1.0).contains(&args.split_ratio) {
        return Err(validation("--split-ratio must be in [0, 1]"));
    }
    let images_dir = args.out.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| validation(format!("{}: {e}", images_dir.display())))?;
    let scene_cfg = SceneConfig::default();
    let n_train = (args.n as f64 * args.split_ratio).round() as usize;
    let mut records = Vec::with_capacity(args.n);
    for i in 0..args.n {
        let record_seed = derive_seed(seed, "data", i as u64);
        let (mut record, image) = synth_scene(record_seed, &scene_cfg)?;
        record.split = if i < n_train { Split::Train } else { Split::Test };
        let rel = format!("images/{}.ppm", record.id);
        write_ppm(&args.out.join(&rel), &image)?;
        record.image = ImageRef::Path(rel);
        let violations = schema_validate(&record);
        if !violations.is_empty() {
            return Err(validation(format!(
                "generated record {} violates the schema: {violations:?}",
                record.id
            )));
        }
        records.push(record);
    }
    write_jsonl(&args.out.join("dataset.jsonl"), &records)?;
    println!(
        "wrote {} records ({} train / {} test) to {}",
        records.len(),
        n_train,
        records.len() - n_train,
        args.out.join("dataset.jsonl").display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct FilterReport<'a> {
    thresholds: &'a QualityThresholds,
    total: usize,
    passed: usize,
    rejected: usize,
    reports: &'a [QualityReport],
}

fn cmd_filter(args: &FilterArgs, seed: u64, file_cfg: &FileConfig) -> Result<(), CliError> {
    let records = read_jsonl_validated(&args.input)?;
    let base_dir = args.input.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut thresholds = QualityThresholds::default();
    if let Some(q) = &file_cfg.quality {
        if let Some(b) = q.brightness_min {
            thresholds.brightness_min = b;
        }
        if let Some(t) = q.texture_min {
            thresholds.texture_min = t;
        }
    }
    if args.recalibrate {
        let (b, t) = data::calibrate_thresholds(seed, 100);
        thresholds.brightness_min = b;
        thresholds.texture_min = t;
    }
    if let Some(b) = args.theta_b {
        thresholds.brightness_min = b;
    }
    if let Some(t) = args.theta_t {
        thresholds.texture_min = t;
    }

    let mut reports = Vec::with_capacity(records.len());
    let mut passing = Vec::new();
    for record in &records {
        let report = match record.load_image(&base_dir) {
            Ok(image) => quality_filter(&record.id, &image, &record.regions, &thresholds),
            Err(e) => {
                log::warn!("{}: {e}", record.id);
                QualityReport::io_failure(&record.id)
            }
        };
        if report.verdict == Verdict::Pass {
            passing.push(record.clone());
        }
        reports.push(report);
    }
    write_jsonl(&args.out, &passing)?;
    let report = FilterReport {
        thresholds: &thresholds,
        total: records.len(),
        passed: passing.len(),
        rejected: records.len() - passing.len(),
        reports: &reports,
    };
    write_json(&args.report, &report)?;
    println!(
        "quality filter: {} of {} records pass",
        passing.len(),
        records.len()
    );
    Ok(())
}

fn cmd_hardneg(args: &HardnegArgs, seed: u64) -> Result<(), CliError> {
    if args.q < 2 {
        return Err(validation("--q must be at least 2 (positive plus one negative)"));
    }
    let mut records = read_jsonl_validated(&args.input)?;
    let lexicons = data::Lexicons::from_scene_config(&SceneConfig::default());
    for (i, record) in records.iter_mut().enumerate() {
        let regions = std::mem::take(&mut record.regions);
        record.regions = regions
            .iter()
            .enumerate()
            .map(|(j, region)| {
                let region_seed = derive_seed(seed, "hardneg", (i * 1024 + j) as u64);
                data::synth_hard_negatives(region, &lexicons, args.q - 1, region_seed)
            })
            .collect::<Result<_, _>>()?;
    }
    write_jsonl(&args.out, &records)?;
    let regions: usize = records.iter().map(|r| r.regions.len()).sum();
    println!(
        "attached {} negatives to {} regions across {} records",
        args.q - 1,
        regions,
        records.len()
    );
    Ok(())
}

fn cmd_leakcheck(args: &LeakcheckArgs, file_cfg: &FileConfig) -> Result<(), CliError> {
    // Each input may be a split-specific file or a combined dataset; only
    // the records tagged with the respective split are compared.
    let train: Vec<SampleRecord> = read_jsonl_validated(&args.train)?
        .into_iter()
        .filter(|r| r.split == Split::Train)
        .collect();
    let test: Vec<SampleRecord> = read_jsonl_validated(&args.test)?
        .into_iter()
        .filter(|r| r.split == Split::Test)
        .collect();
    if train.is_empty() {
        return Err(validation(format!(
            "{}: no train-split records",
            args.train.display()
        )));
    }
    if test.is_empty() {
        return Err(validation(format!(
            "{}: no test-split records",
            args.test.display()
        )));
    }
    let train_dir = args.train.parent().unwrap_or(Path::new(".")).to_path_buf();
    let test_dir = args.test.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut cfg = LeakageConfig {
        jaccard_threshold: args.jaccard_threshold,
        ..LeakageConfig::default()
    };
    if let Some(l) = &file_cfg.leakage {
        if let Some(n) = l.ngram {
            cfg.ngram = n;
        }
        if args.jaccard_threshold == 0.8 {
            if let Some(j) = l.jaccard_threshold {
                cfg.jaccard_threshold = j;
            }
        }
    }
    let report = leakage_check(&train, &train_dir, &test, &test_dir, &cfg)?;
    write_json(&args.report, &report)?;
    println!(
        "leakage: {} exact duplicates, {} lexical pairs >= {} over {} pairs",
        report.exact_duplicate_pairs.len(),
        report.lexical_pairs_over_threshold.len(),
        report.jaccard_threshold,
        report.pairs_checked
    );
    if report.clean() {
        Ok(())
    } else {
        Err(validation(format!(
            "{} exact duplicate image(s) across the splits",
            report.exact_duplicate_pairs.len()
        )))
    }
}

fn cmd_train(args: &TrainArgs, seed: u64, file_cfg: &FileConfig) -> Result<(), CliError> {
    let stage = match args.stage {
        StageArg::One => Stage::StageI,
        StageArg::Two => Stage::StageII,
    };
    let preset = match args.preset {
        PresetArg::Paper => Preset::Paper,
        PresetArg::Toy => Preset::Toy,
    };
    let mut cfg = TrainConfig::preset(stage, preset, seed);
    if let Some(t) = &file_cfg.train {
        apply_file_train(&mut cfg, t);
    }
    // CLI overrides come last.
    set(&mut cfg.epochs, args.epochs);
    set(&mut cfg.batch_size, args.batch_size);
    set(&mut cfg.lr, args.lr);
    set(&mut cfg.weight_decay, args.weight_decay);
    set(&mut cfg.warmup_iters, args.warmup);
    set(&mut cfg.lambda1, args.lambda1);
    set(&mut cfg.lambda2, args.lambda2);
    set(&mut cfg.lambda3, args.lambda3);
    set(&mut cfg.lambda4, args.lambda4);
    set(&mut cfg.lambda5, args.lambda5);
    set(&mut cfg.grad_clip_norm, args.grad_clip);
    cfg.stage2_keep_global = args.stage2_keep_global;
    cfg.mask_duplicate_phrases = !args.no_dup_mask;
    cfg.stop_after_epochs = args.stop_after_epochs;
    cfg.data_path = args.data.clone();
    cfg.init_checkpoint = args.init.clone();
    cfg.out_checkpoint = args.out.clone();
    cfg.out_metrics = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("metrics.jsonl"));

    let all = read_jsonl_validated(&args.data)?;
    let base_dir = args.data.parent().unwrap_or(Path::new(".")).to_path_buf();
    let train_records: Vec<SampleRecord> = all
        .into_iter()
        .filter(|r| r.split == Split::Train)
        .collect();
    let (ckpt, metrics) = run_stage(&cfg, &train_records, &base_dir)?;
    let last = metrics.last().map(|m| m.total).unwrap_or(f64::NAN);
    println!(
        "trained {} for {} steps (final loss {:.4}, tau {:.4}); checkpoint at {}",
        ckpt.meta.stage,
        ckpt.meta.steps_done,
        last,
        ckpt.params.tau(),
        args.out.display()
    );
    Ok(())
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_file_train(cfg: &mut TrainConfig, t: &TrainFileConfig) {
    set(&mut cfg.epochs, t.epochs);
    set(&mut cfg.batch_size, t.batch_size);
    set(&mut cfg.lr, t.lr);
    set(&mut cfg.weight_decay, t.weight_decay);
    set(&mut cfg.warmup_iters, t.warmup_iters);
    set(&mut cfg.lambda1, t.lambda1);
    set(&mut cfg.lambda2, t.lambda2);
    set(&mut cfg.lambda3, t.lambda3);
    set(&mut cfg.lambda4, t.lambda4);
    set(&mut cfg.lambda5, t.lambda5);
    set(&mut cfg.grad_clip_norm, t.grad_clip_norm);
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = Model::from_checkpoint(&ckpt);
    let all = read_jsonl_validated(&args.data)?;
    let base_dir = args.data.parent().unwrap_or(Path::new(".")).to_path_buf();
    let test: Vec<SampleRecord> = all.into_iter().filter(|r| r.split == Split::Test).collect();
    if test.is_empty() {
        return Err(validation("dataset has no test-split records"));
    }

    let mut results = EvalResults::default();
    for task in &args.tasks {
        match task {
            TaskArg::Retrieval => {
                let caption = match args.caption {
                    CaptionArg::Brief => CaptionKind::Brief,
                    CaptionArg::Detail => CaptionKind::Detail,
                };
                results.retrieval =
                    Some(retrieval_eval(&model, &test, &base_dir, &args.ks, caption)?);
            }
            TaskArg::Regioncls => {
                let classes: Vec<String> = test
                    .iter()
                    .flat_map(|r| r.regions.iter())
                    .filter_map(|region| region_category(&region.phrase))
                    .map(str::to_owned)
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                results.region_cls = Some(region_zero_shot(&model, &test, &base_dir, &classes)?);
            }
            TaskArg::Hardneg => {
                results.hardneg = Some(hardneg_ranking(&model, &test, &base_dir)?);
            }
        }
    }
    write_json(&args.out, &results)?;
    if let Some(r) = &results.retrieval {
        println!(
            "retrieval: I2T R@1 {:.4}  T2I R@1 {:.4} (n = {})",
            r.i2t.recall_at.get(&1).copied().unwrap_or(f64::NAN),
            r.t2i.recall_at.get(&1).copied().unwrap_or(f64::NAN),
            r.i2t.n_queries
        );
    }
    if let Some(r) = &results.region_cls {
        println!(
            "region zero-shot: acc@1 {:.4}  acc@5 {:.4} (n = {})",
            r.acc_at_1, r.acc_at_5, r.n_regions
        );
    }
    if let Some(r) = &results.hardneg {
        println!(
            "hard-negative ranking: success {:.4} (n = {})",
            r.success_rate, r.n_regions
        );
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, seed: u64) -> Result<(), CliError> {
    if args.trials == 0 {
        return Err(validation("--trials must be at least 1"));
    }
    let kinds: Vec<LossKind> = if args.losses == "all" {
        LossKind::all().to_vec()
    } else {
        args.losses
            .split(',')
            .map(|s| {
                LossKind::parse(s.trim())
                    .ok_or_else(|| validation(format!("unknown loss {s:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    let reports = run_loss_gradchecks(&kinds, args.trials, seed)?;
    println!("{:<8} {:>7} {:>14} {:>10} {:>6}", "loss", "trials", "max rel err", "tol", "pass");
    let mut all_pass = true;
    for r in &reports {
        all_pass &= r.passed();
        println!(
            "{:<8} {:>7} {:>14.3e} {:>10.1e} {:>6}",
            r.name,
            r.trials,
            r.max_rel_err,
            r.tol,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if all_pass {
        Ok(())
    } else {
        Err(numerical("gradient check failed"))
    }
}

fn cmd_heatmap(args: &HeatmapArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = Model::from_checkpoint(&ckpt);
    let image = data::read_image(&args.image)?;
    if image.width != model.vision.image_size || image.height != model.vision.image_size {
        return Err(validation(format!(
            "image is {}x{}, the model expects {0}x{0} inputs",
            model.vision.image_size, image.width
        )));
    }
    export_heatmap(&model, &image, &args.phrase, &args.out)?;
    println!("wrote heatmap to {}", args.out.display());
    Ok(())
}
