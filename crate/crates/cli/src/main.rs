use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use strokeseg::dataset::{load_split, save_split, DatasetManifest, SplitAssignment};
use strokeseg::experiments::{
    desk_train_config, evaluate_model, run_experiment, write_prediction, ExperimentConfig, ExperimentKind,
    ExperimentOutcome, PreparedData,
};
use strokeseg::metrics::{aggregate, HausdorffMode};
use strokeseg::model::load_checkpoint;
use strokeseg::overlay::emit_overlays;
use strokeseg::synthgen::{generate_cohort, CohortSpec, PhantomTemplate};
use strokeseg::{
    build_model, load_manifest, load_patient, split_dataset, FreezeMode, Fusion, InputSet, ModelConfig, PatientStudy,
};

#[derive(Parser)]
#[command(name = "strokeseg", version, about = "Ischemic-lesion segmentation from perfusion maps")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort with a manifest.
    Synth(SynthArgs),
    /// Stratified train/validation/test split of a manifest.
    Split(SplitArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Predict label volumes with a trained checkpoint.
    Predict(PredictArgs),
    /// Evaluate a checkpoint on one part of a split.
    Evaluate(EvaluateArgs),
    /// Loss-parameter grid.
    Exp1(ExpArgs),
    /// Input set and freeze mode sweep.
    Exp2(ExpArgs),
    /// Fusion strategy comparison.
    Exp3(ExpArgs),
    /// Write overlay images of predictions.
    Overlays(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    lvo: usize,
    #[arg(long, default_value_t = 5)]
    non_lvo: usize,
    #[arg(long, default_value_t = 3)]
    wis: usize,
    #[arg(long, default_value_t = 8)]
    slices: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write two annotators' ground truths per patient.
    #[arg(long)]
    annotators: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, num_args = 3, value_delimiter = ',', default_values_t = [0.58, 0.20, 0.22])]
    ratios: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Sf,
    Ef,
    Efi,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Sf => Fusion::SlowFusion,
            FusionArg::Ef => Fusion::EarlyFusion,
            FusionArg::Efi => Fusion::EarlyFusionInflated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FreezeArg {
    Frozen,
    Unfrozen,
    Gradual,
}

impl From<FreezeArg> for FreezeMode {
    fn from(f: FreezeArg) -> Self {
        match f {
            FreezeArg::Frozen => FreezeMode::Frozen,
            FreezeArg::Unfrozen => FreezeMode::Unfrozen,
            FreezeArg::Gradual => FreezeMode::Gradual,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Split file from `split`; computed from --split-seed when absent.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "sf")]
    fusion: FusionArg,
    #[arg(long)]
    mip: bool,
    #[arg(long)]
    nihss: bool,
    #[arg(long, value_enum, default_value = "unfrozen")]
    freeze: FreezeArg,
    #[arg(long, default_value_t = 0.125)]
    width: f64,
    /// Pretrained VGG-16 weights (safetensors, width 1 only).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Patients to process; all patients when omitted.
    #[arg(long)]
    patient: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = strokeseg::infer::DEFAULT_MASK_THRESHOLD)]
    threshold: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Validation,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    part: Part,
    /// Metrics CSV; the table is printed either way.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = strokeseg::infer::DEFAULT_MASK_THRESHOLD)]
    threshold: f64,
    /// Use the given Hausdorff percentile instead of the maximum.
    #[arg(long)]
    percentile: Option<f64>,
}

#[derive(Args)]
struct ExpArgs {
    /// JSON experiment config; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the epoch cap.
    #[arg(long)]
    epochs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(a) => synth(a)?,
        Command::Split(a) => split(a)?,
        Command::Train(a) => train(a)?,
        Command::Predict(a) => predict(a, false)?,
        Command::Overlays(a) => predict(a, true)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Exp1(a) => return experiment(a, ExperimentKind::Exp1FtlGrid),
        Command::Exp2(a) => return experiment(a, ExperimentKind::Exp2InputFreezeSweep),
        Command::Exp3(a) => return experiment(a, ExperimentKind::Exp3FusionCompare),
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<()> {
    let template = PhantomTemplate { slices: a.slices, height: a.size, width: a.size, noise_level: a.noise, ..Default::default() };
    let mut spec = CohortSpec::new(a.lvo, a.non_lvo, a.wis, template, a.seed);
    spec.annotators = a.annotators;
    let manifest = generate_cohort(&spec, &a.out).context("generating cohort")?;
    println!("wrote {} patients to {}", manifest.patients.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let ratios = [a.ratios[0], a.ratios[1], a.ratios[2]];
    let s = split_dataset(&manifest, ratios, a.seed)?;
    save_split(&s, &a.out)?;
    let [tr, va, te] = s.sizes();
    println!("train {tr}, validation {va}, test {te} -> {}", a.out.display());
    Ok(())
}

fn load_studies(manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<PatientStudy>> {
    ids.iter()
        .map(|id| load_patient(manifest, id).with_context(|| format!("loading patient {id}")))
        .collect()
}

fn prepared(data: &DataArgs) -> Result<PreparedData> {
    let manifest = load_manifest(&data.manifest)?;
    let split: SplitAssignment = match &data.split {
        Some(p) => load_split(p)?,
        None => split_dataset(&manifest, strokeseg::experiments::DEFAULT_RATIOS, data.split_seed)?,
    };
    Ok(PreparedData {
        train: load_studies(&manifest, &split.train)?,
        validation: load_studies(&manifest, &split.validation)?,
        test: load_studies(&manifest, &split.test)?,
        split,
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let data = prepared(&a.data)?;
    let inputs = InputSet { mip: a.mip, nihss: a.nihss };
    let mut cfg = ModelConfig::new(a.fusion.into(), inputs, a.freeze.into());
    cfg.encoder.width_multiplier = a.width;
    cfg.encoder.pretrained = a.pretrained.is_some();
    cfg.seed = a.seed;
    if let Some(first) = data.train.first() {
        let (_, h, w) = first.dims();
        cfg.input_size = (h, w);
    }
    let mut model = build_model(&cfg)?;
    if let Some(p) = &a.pretrained {
        let n = model.load_pretrained(p)?;
        info!("loaded {n} pretrained tensors");
    }
    let mut tc = desk_train_config(a.seed);
    tc.max_epochs = a.epochs;
    tc.patience = a.patience;
    tc.optimizer.learning_rate = a.lr;
    tc.checkpoint_dir = Some(a.out.clone());
    let outcome = strokeseg::train(&mut model, &data.train, &data.validation, &tc)?;
    println!(
        "{}: best epoch {} (validation loss {:.4}) of {}, {:?}; checkpoint {}",
        cfg.label(),
        outcome.best.meta.epoch,
        outcome.best.meta.val_loss,
        outcome.history.epochs.len(),
        outcome.history.stopping_reason,
        a.out.join("best.safetensors").display()
    );
    Ok(())
}

fn predict(a: PredictArgs, overlays: bool) -> Result<()> {
    let (mut model, _) = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let ids = if a.patient.is_empty() { manifest.ids() } else { a.patient.clone() };
    for id in &ids {
        let study = load_patient(&manifest, id)?;
        let pred = strokeseg::infer::predict_patient(&mut model, &study, a.threshold)?;
        let dir = a.out.join(id);
        let written = if overlays { emit_overlays(&study, &pred, &dir)? } else { write_prediction(&study, &pred, &dir)? };
        println!("{id}: {} files in {}", written.len(), dir.display());
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let data = prepared(&a.data)?;
    let studies = match a.part {
        Part::Train => &data.train,
        Part::Validation => &data.validation,
        Part::Test => &data.test,
    };
    let (mut model, _) = load_checkpoint(&a.checkpoint)?;
    let mode = match a.percentile {
        Some(p) => HausdorffMode::Percentile(p),
        None => HausdorffMode::Exact,
    };
    let per_patient = evaluate_model(&mut model, studies, a.threshold, mode)?;
    let report = aggregate(&per_patient)?;
    println!("{}", report.to_table());
    if let Some(out) = &a.out {
        report.write_csv(out)?;
    }
    Ok(())
}

fn experiment(a: ExpArgs, kind: ExperimentKind) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(kind, a.out.clone().unwrap_or_else(|| default_out(kind))),
    };
    if cfg.experiment != kind {
        bail!("config describes {:?}, not {:?}", cfg.experiment, kind);
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    let outcome: ExperimentOutcome = run_experiment(&cfg)?;
    println!("{}", outcome.table);
    if let Some(i) = outcome.selected {
        println!("selected: {}", outcome.runs[i].label);
    }
    println!("results in {}", cfg.output_dir.display());
    let failed = outcome.failures();
    if failed > 0 {
        for r in outcome.runs.iter().filter(|r| r.error.is_some()) {
            eprintln!("grid point {} ({}) failed: {}", r.index, r.label, r.error.as_deref().unwrap_or(""));
        }
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn default_out(kind: ExperimentKind) -> PathBuf {
    let name = match kind {
        ExperimentKind::Exp1FtlGrid => "exp1",
        ExperimentKind::Exp2InputFreezeSweep => "exp2",
        ExperimentKind::Exp3FusionCompare => "exp3",
    };
    Path::new("runs").join(name)
}
