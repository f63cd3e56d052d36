//! Config-driven sweeps: the loss-parameter grid, the input/freeze sweep
//! and the fusion comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use strokeseg_nn::{stack_time, HasParams, Tensor};
use thiserror::Error;

use crate::dataset::{
    load_manifest, load_patient, split_patients, DatasetError, LabelVolume, PatientStudy, SeverityGroup,
    SplitAssignment, TissueClass,
};
use crate::infer::{predict_patient, InferError, DEFAULT_MASK_THRESHOLD};
use crate::loss::LossSpec;
use crate::metrics::{aggregate, evaluate_patient, GroupKey, HausdorffMode, Metric, MetricsError, MetricsReport, PatientMetrics, ReportRow};
use crate::model::{build_model, FreezeMode, FreezeStage, Fusion, InputSet, ModelConfig, ModelError, ModelGraph};
use crate::synthgen::{generate_cohort, generate_studies, CohortSpec, PhantomTemplate, SynthError};
use crate::train::{train, StoppingReason, TrainConfig, TrainError};

pub const DEFAULT_RATIOS: [f64; 3] = [0.58, 0.20, 0.22];
/// Full-scale reference for the (4/3, 0.7, 0.3) grid point.
pub const REFERENCE_LVO_PENUMBRA_DICE: &str = "0.71±0.1";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("cannot read or write {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("inflation check failed: max deviation {0:e}")]
    InflationMismatch(f64),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "exp1")]
    Exp1FtlGrid,
    #[serde(rename = "exp2")]
    Exp2InputFreezeSweep,
    #[serde(rename = "exp3")]
    Exp3FusionCompare,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridPoint {
    Loss { gamma: f64, alpha: f64, beta: f64 },
    InputFreeze { inputs: InputSet, freeze: FreezeMode },
    Fusion { fusion: Fusion },
}

/// Model settings shared by every run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTemplate {
    pub width_multiplier: f64,
    pub input_size: (usize, usize),
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    /// Freeze mode of the loss-grid runs.
    #[serde(default = "default_exp1_freeze")]
    pub freeze_mode: FreezeMode,
    /// Pretrained VGG-16 weights (width 1 only).
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
}

fn default_dropout() -> f64 {
    0.5
}

fn default_exp1_freeze() -> FreezeMode {
    FreezeMode::Frozen
}

impl ModelTemplate {
    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Desk => ModelTemplate {
                width_multiplier: 0.125,
                input_size: (64, 64),
                dropout_rate: default_dropout(),
                freeze_mode: default_exp1_freeze(),
                pretrained: None,
            },
            Scale::Full => ModelTemplate {
                width_multiplier: 1.0,
                input_size: (512, 512),
                dropout_rate: default_dropout(),
                freeze_mode: default_exp1_freeze(),
                pretrained: None,
            },
        }
    }

    pub fn model_config(&self, fusion: Fusion, inputs: InputSet, freeze: FreezeMode, seed: u64) -> ModelConfig {
        let mut c = ModelConfig::new(fusion, inputs, freeze);
        c.encoder.width_multiplier = self.width_multiplier;
        c.encoder.pretrained = self.pretrained.is_some();
        c.input_size = self.input_size;
        c.bottleneck.dropout_rate = self.dropout_rate;
        c.seed = seed;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Empty means the experiment's default grid.
    #[serde(default)]
    pub grid: Vec<GridPoint>,
    #[serde(default)]
    pub scale: Scale,
    /// Dataset manifest; when absent a phantom cohort is generated.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub cohort: Option<CohortSpec>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_ratios")]
    pub split_ratios: [f64; 3],
    pub train: TrainConfig,
    pub model: ModelTemplate,
    pub output_dir: PathBuf,
    #[serde(default = "default_threshold")]
    pub mask_threshold: f64,
    #[serde(default)]
    pub hausdorff: HausdorffMode,
}

fn default_ratios() -> [f64; 3] {
    DEFAULT_RATIOS
}

fn default_threshold() -> f64 {
    DEFAULT_MASK_THRESHOLD
}

/// Desk-scale phantom cohort: 8 LVO, 5 Non-LVO and 3 WIS patients.
pub fn desk_cohort(seed: u64) -> CohortSpec {
    CohortSpec::new(8, 5, 3, PhantomTemplate::default(), seed)
}

/// Healthy-class loss weight for desk runs. With weight 1 the small,
/// normalisation-free desk network saturates to all-healthy within a few
/// epochs.
pub const DESK_HEALTHY_WEIGHT: f64 = 0.1;

/// Desk-scale training defaults: 60-epoch cap, patience 8, down-weighted
/// healthy class.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    let mut loss = LossSpec::default();
    loss.class_weights[0] = DESK_HEALTHY_WEIGHT;
    TrainConfig { max_epochs: 60, patience: 8, seed, loss, ..TrainConfig::default() }
}

impl ExperimentConfig {
    pub fn desk(experiment: ExperimentKind, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            experiment,
            grid: Vec::new(),
            scale: Scale::Desk,
            manifest: None,
            cohort: Some(desk_cohort(0)),
            split_seed: 0,
            split_ratios: DEFAULT_RATIOS,
            train: desk_train_config(0),
            model: ModelTemplate::for_scale(Scale::Desk),
            output_dir: output_dir.into(),
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            hausdorff: HausdorffMode::Exact,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))
    }

    /// The configured grid, or the experiment's default one.
    pub fn effective_grid(&self) -> Vec<GridPoint> {
        if !self.grid.is_empty() {
            return self.grid.clone();
        }
        match self.experiment {
            ExperimentKind::Exp1FtlGrid => default_exp1_grid(),
            ExperimentKind::Exp2InputFreezeSweep => default_exp2_grid(),
            ExperimentKind::Exp3FusionCompare => {
                [Fusion::SlowFusion, Fusion::EarlyFusion, Fusion::EarlyFusionInflated]
                    .into_iter()
                    .map(|fusion| GridPoint::Fusion { fusion })
                    .collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.effective_grid();
        if grid.is_empty() {
            return Err(ExperimentError::InvalidConfig("grid is empty".into()));
        }
        for p in &grid {
            let ok = matches!(
                (self.experiment, p),
                (ExperimentKind::Exp1FtlGrid, GridPoint::Loss { .. })
                    | (ExperimentKind::Exp2InputFreezeSweep, GridPoint::InputFreeze { .. })
                    | (ExperimentKind::Exp3FusionCompare, GridPoint::Fusion { .. })
            );
            if !ok {
                return Err(ExperimentError::InvalidConfig(format!("{p:?} does not belong to {:?}", self.experiment)));
            }
            if let GridPoint::Loss { gamma, alpha, beta } = p {
                let mut spec = self.train.loss.clone();
                (spec.gamma, spec.alpha, spec.beta) = (*gamma, *alpha, *beta);
                spec.validate().map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
            }
        }
        self.train.validate()?;
        Ok(())
    }
}

/// The sixteen (γ, α, β) combinations of the loss-parameter search.
pub fn default_exp1_grid() -> Vec<GridPoint> {
    let mut g = Vec::new();
    for (a, b) in [(1.0, 1.0), (0.3, 0.7), (0.5, 0.5), (0.7, 0.3)] {
        g.push(GridPoint::Loss { gamma: 1.0, alpha: a, beta: b });
    }
    for gamma in [4.0 / 3.0, 1.5, 2.0, 3.0] {
        for (a, b) in [(0.3, 0.7), (0.5, 0.5), (0.7, 0.3)] {
            g.push(GridPoint::Loss { gamma, alpha: a, beta: b });
        }
    }
    g
}

/// Four input sets under each of the three freeze modes.
pub fn default_exp2_grid() -> Vec<GridPoint> {
    let mut g = Vec::new();
    for freeze in [FreezeMode::Frozen, FreezeMode::Unfrozen, FreezeMode::Gradual] {
        for inputs in [InputSet::PMS, InputSet::PMS_MIP, InputSet::PMS_NIHSS, InputSet::ALL] {
            g.push(GridPoint::InputFreeze { inputs, freeze });
        }
    }
    g
}

/// SHA-256 of the training configuration with the checkpoint directory
/// removed. For the loss grid the swept loss parameters are reset too, so
/// every run of a fair sweep shares one hash.
pub fn config_hash(train: &TrainConfig, experiment: ExperimentKind) -> String {
    let mut t = train.clone();
    t.checkpoint_dir = None;
    if experiment == ExperimentKind::Exp1FtlGrid {
        let base = LossSpec::default();
        (t.loss.gamma, t.loss.alpha, t.loss.beta) = (base.gamma, base.alpha, base.beta);
    }
    let json = serde_json::to_string(&t).expect("plain config");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Training, validation and test studies of one experiment.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: SplitAssignment,
    pub train: Vec<PatientStudy>,
    pub validation: Vec<PatientStudy>,
    pub test: Vec<PatientStudy>,
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let studies: Vec<PatientStudy> = match &config.manifest {
        Some(path) => {
            let manifest = load_manifest(path)?;
            manifest.ids().iter().map(|id| load_patient(&manifest, id)).collect::<std::result::Result<_, _>>()?
        }
        None => {
            let cohort = config.cohort.clone().unwrap_or_else(|| desk_cohort(config.split_seed));
            generate_studies(&cohort)?
        }
    };
    let pairs: Vec<(String, SeverityGroup)> = studies.iter().map(|s| (s.patient_id.clone(), s.group)).collect();
    let split = split_patients(&pairs, config.split_ratios, config.split_seed)?;
    let pick = |ids: &[String]| -> Vec<PatientStudy> {
        ids.iter().filter_map(|id| studies.iter().find(|s| &s.patient_id == id).cloned()).collect()
    };
    Ok(PreparedData {
        train: pick(&split.train),
        validation: pick(&split.validation),
        test: pick(&split.test),
        split,
    })
}

/// Writes the phantom cohort of `config` to disk (as `synth` would).
pub fn write_cohort(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let cohort = config.cohort.clone().unwrap_or_else(|| desk_cohort(config.split_seed));
    generate_cohort(&cohort, dir)?;
    Ok(())
}

/// Outcome of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub index: usize,
    pub label: String,
    pub point: GridPoint,
    pub config_hash: String,
    pub parameter_count: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopping_reason: Option<StoppingReason>,
    pub stages: Vec<FreezeStage>,
    pub seconds_per_epoch: f64,
    /// Largest deviation of the inflation check, for inflated models.
    pub inflation_check: Option<f64>,
    pub per_patient: Vec<PatientMetrics>,
    pub report: MetricsReport,
    pub error: Option<String>,
}

impl RunResult {
    fn failed(index: usize, label: String, point: GridPoint, hash: String, err: String) -> Self {
        RunResult {
            index,
            label,
            point,
            config_hash: hash,
            parameter_count: 0,
            epochs: 0,
            best_epoch: 0,
            best_val_loss: f64::NAN,
            stopping_reason: None,
            stages: Vec::new(),
            seconds_per_epoch: 0.0,
            inflation_check: None,
            per_patient: Vec::new(),
            report: MetricsReport::default(),
            error: Some(err),
        }
    }

    pub fn value(&self, group: GroupKey, class: TissueClass, metric: Metric) -> Option<f64> {
        self.report.get(group, class, metric).filter(|r| r.n > 0).map(|r| r.mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub experiment: ExperimentKind,
    pub runs: Vec<RunResult>,
    /// Index into `runs` of the recommended model (input/freeze sweep only).
    pub selected: Option<usize>,
    pub table: String,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Evaluates a model on studies with ground truth.
pub fn evaluate_model(
    model: &mut ModelGraph,
    studies: &[PatientStudy],
    threshold: f64,
    mode: HausdorffMode,
) -> Result<Vec<PatientMetrics>> {
    studies
        .iter()
        .filter_map(|s| s.ground_truth.as_ref().map(|gt| (s, gt)))
        .map(|(s, gt)| {
            let pred = predict_patient(model, s, threshold)?;
            Ok(evaluate_patient(&s.patient_id, s.group, &pred, gt, s.spacing, mode)?)
        })
        .collect()
}

/// Compares the inflated encoder with a 2D early-fusion encoder whose
/// weights it was inflated from, on a random temporally constant input.
pub fn inflation_check(config: &ModelConfig, seed: u64) -> Result<f64> {
    let mut flat_cfg = config.clone();
    flat_cfg.fusion = Fusion::EarlyFusion;
    let flat = build_model(&flat_cfg)?;
    let mut inflated_cfg = config.clone();
    inflated_cfg.fusion = Fusion::EarlyFusionInflated;
    let mut inflated = build_model(&inflated_cfg)?;
    inflated.inflate_from(&flat)?;
    let mut flat = flat;
    let (h, w) = config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_vec(&[1, 3, h, w], (0..3 * h * w).map(|_| rng.random::<f32>()).collect())
        .expect("consistent shape");
    let frames: Vec<&Tensor> = std::iter::repeat_n(&x, config.inputs.image_count()).collect();
    let a = flat.encode_tensor(&x)?;
    let b = inflated.encode_tensor(&stack_time(&frames).map_err(ModelError::from)?)?;
    Ok(a.max_abs_diff(&b) as f64)
}

struct RunPlan {
    label: String,
    model: ModelConfig,
    train: TrainConfig,
}

fn plan(config: &ExperimentConfig, point: &GridPoint) -> RunPlan {
    let seed = config.train.seed;
    let t = &config.model;
    let mut train = config.train.clone();
    let (label, model) = match point {
        GridPoint::Loss { gamma, alpha, beta } => {
            (train.loss.gamma, train.loss.alpha, train.loss.beta) = (*gamma, *alpha, *beta);
            let m = t.model_config(Fusion::SlowFusion, InputSet::PMS, t.freeze_mode, seed);
            (format!("{} g={gamma:.3} a={alpha} b={beta}", m.label()), m)
        }
        GridPoint::InputFreeze { inputs, freeze } => {
            let m = t.model_config(Fusion::SlowFusion, *inputs, *freeze, seed);
            (m.label(), m)
        }
        GridPoint::Fusion { fusion } => {
            let m = t.model_config(*fusion, InputSet::PMS_NIHSS, FreezeMode::Gradual, seed);
            (m.label(), m)
        }
    };
    RunPlan { label, model, train }
}

fn execute(config: &ExperimentConfig, data: &PreparedData, index: usize, point: &GridPoint) -> RunResult {
    let p = plan(config, point);
    let hash = config_hash(&p.train, config.experiment);
    let run = || -> Result<RunResult> {
        let mut inflation = None;
        if p.model.fusion == Fusion::EarlyFusionInflated {
            let dev = inflation_check(&p.model, config.train.seed)?;
            if dev > 1e-4 {
                return Err(ExperimentError::InflationMismatch(dev));
            }
            inflation = Some(dev);
        }
        let mut model = build_model(&p.model)?;
        if let Some(w) = &config.model.pretrained {
            model.load_pretrained(w)?;
        }
        let mut train_cfg = p.train.clone();
        train_cfg.checkpoint_dir = Some(config.output_dir.join(format!("run{index:02}")));
        let started = Instant::now();
        let outcome = train(&mut model, &data.train, &data.validation, &train_cfg)?;
        let epochs = outcome.history.epochs.len();
        let seconds_per_epoch = started.elapsed().as_secs_f64() / epochs.max(1) as f64;
        let per_patient = evaluate_model(&mut model, &data.validation, config.mask_threshold, config.hausdorff)?;
        let report = aggregate(&per_patient)?;
        Ok(RunResult {
            index,
            label: p.label.clone(),
            point: point.clone(),
            config_hash: hash.clone(),
            parameter_count: model.parameter_count(),
            epochs,
            best_epoch: outcome.best.meta.epoch,
            best_val_loss: outcome.best.meta.val_loss,
            stopping_reason: Some(outcome.history.stopping_reason),
            stages: outcome.history.stages(),
            seconds_per_epoch,
            inflation_check: inflation,
            per_patient,
            report,
            error: None,
        })
    };
    match run() {
        Ok(r) => r,
        Err(e) => {
            log::error!("grid point {index} ({}) failed: {e}", p.label);
            RunResult::failed(index, p.label, point.clone(), hash, e.to_string())
        }
    }
}

fn run_sweep(config: &ExperimentConfig, expected: ExperimentKind) -> Result<ExperimentOutcome> {
    if config.experiment != expected {
        return Err(ExperimentError::InvalidConfig(format!(
            "config is for {:?}, not {:?}",
            config.experiment, expected
        )));
    }
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| io_err(&config.output_dir, e))?;
    let data = prepare_data(config)?;
    let runs: Vec<RunResult> = config
        .effective_grid()
        .iter()
        .enumerate()
        .map(|(i, p)| execute(config, &data, i, p))
        .collect();
    let selected = (expected == ExperimentKind::Exp2InputFreezeSweep).then(|| select_run(&runs)).flatten();
    let table = match expected {
        ExperimentKind::Exp1FtlGrid => exp1_table(&runs),
        ExperimentKind::Exp2InputFreezeSweep => exp2_table(&runs, selected),
        ExperimentKind::Exp3FusionCompare => exp3_table(&runs),
    };
    let outcome = ExperimentOutcome { experiment: expected, runs, selected, table };
    write_outcome(&outcome, &config.output_dir)?;
    Ok(outcome)
}

pub fn run_exp1(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_sweep(config, ExperimentKind::Exp1FtlGrid)
}

pub fn run_exp2(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_sweep(config, ExperimentKind::Exp2InputFreezeSweep)
}

pub fn run_exp3(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_sweep(config, ExperimentKind::Exp3FusionCompare)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_sweep(config, config.experiment)
}

/// Values the selection rule looks at.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionCandidate {
    pub label: String,
    pub lvo_penumbra_dice: f64,
    pub lvo_core_delta_v: f64,
}

/// Highest LVO penumbra Dice; ties go to the lower LVO core volume
/// difference, then to the earlier candidate.
pub fn select_model(candidates: &[SelectionCandidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if !c.lvo_penumbra_dice.is_finite() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let o = &candidates[b];
                c.lvo_penumbra_dice > o.lvo_penumbra_dice
                    || (c.lvo_penumbra_dice == o.lvo_penumbra_dice && c.lvo_core_delta_v < o.lvo_core_delta_v)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

fn select_run(runs: &[RunResult]) -> Option<usize> {
    let idx: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].error.is_none()).collect();
    let cands: Vec<SelectionCandidate> = idx
        .iter()
        .map(|&i| SelectionCandidate {
            label: runs[i].label.clone(),
            lvo_penumbra_dice: runs[i].value(GroupKey::Lvo, TissueClass::Penumbra, Metric::Dice).unwrap_or(f64::NAN),
            lvo_core_delta_v: runs[i].value(GroupKey::Lvo, TissueClass::Core, Metric::DeltaV).unwrap_or(f64::INFINITY),
        })
        .collect();
    select_model(&cands).map(|k| idx[k])
}

fn cell(run: &RunResult, group: GroupKey, class: TissueClass, metric: Metric) -> String {
    if run.error.is_some() {
        return "error".into();
    }
    run.report.cell(group, class, metric)
}

/// Loss-grid table: Dice per group and class; `*` marks each column's best.
pub fn exp1_table(runs: &[RunResult]) -> String {
    let cols = [
        (GroupKey::Lvo, TissueClass::Penumbra),
        (GroupKey::Lvo, TissueClass::Core),
        (GroupKey::NonLvo, TissueClass::Penumbra),
        (GroupKey::NonLvo, TissueClass::Core),
    ];
    let best: Vec<Option<f64>> = cols
        .iter()
        .map(|&(g, c)| {
            runs.iter()
                .filter_map(|r| r.value(g, c, Metric::Dice))
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        })
        .collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6} {:>5} {:>5} | {:>13} {:>13} | {:>13} {:>13}",
        "gamma", "alpha", "beta", "LVO pen", "LVO core", "Non-LVO pen", "Non-LVO core"
    );
    for r in runs {
        let GridPoint::Loss { gamma, alpha, beta } = r.point else { continue };
        let _ = write!(out, "{gamma:>6.3} {alpha:>5.2} {beta:>5.2} |");
        for (k, &(g, c)) in cols.iter().enumerate() {
            let mark = match (r.value(g, c, Metric::Dice), best[k]) {
                (Some(v), Some(b)) if v == b => "*",
                _ => " ",
            };
            let _ = write!(out, " {:>12}{mark}", cell(r, g, c, Metric::Dice));
            if k == 1 {
                out.push_str(" |");
            }
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "reference, full clinical scale, (4/3, 0.7, 0.3): LVO penumbra Dice {REFERENCE_LVO_PENUMBRA_DICE} (not reproduced at desk scale)"
    );
    out
}

fn metric_columns() -> Vec<(Metric, GroupKey)> {
    vec![
        (Metric::Dice, GroupKey::Lvo),
        (Metric::Dice, GroupKey::NonLvo),
        (Metric::Hausdorff, GroupKey::Lvo),
        (Metric::Hausdorff, GroupKey::NonLvo),
        (Metric::DeltaV, GroupKey::Lvo),
        (Metric::DeltaV, GroupKey::NonLvo),
        (Metric::DeltaV, GroupKey::Wis),
    ]
}

/// One line per run and class with Dice, Hausdorff and volume difference
/// per group.
pub fn exp2_table(runs: &[RunResult], selected: Option<usize>) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<22} {:<8}", "model", "class");
    for (m, g) in metric_columns() {
        let _ = write!(out, " {:>14}", format!("{} {}", m.label(), g.label()));
    }
    out.push('\n');
    for (i, r) in runs.iter().enumerate() {
        for class in TissueClass::LESIONS {
            let name = if class == TissueClass::Penumbra {
                format!("{}{}", r.label, if selected == Some(i) { " [selected]" } else { "" })
            } else {
                String::new()
            };
            let _ = write!(out, "{:<22} {:<8}", name, class.label());
            for (m, g) in metric_columns() {
                let _ = write!(out, " {:>14}", cell(r, g, class, m));
            }
            out.push('\n');
        }
    }
    out
}

/// Fusion comparison with parameter counts and time per epoch.
pub fn exp3_table(runs: &[RunResult]) -> String {
    let mut out = exp2_table(runs, None);
    out.push('\n');
    let _ = writeln!(out, "{:<22} {:>12} {:>12} {:>10}  config hash", "model", "parameters", "s/epoch", "epochs");
    for r in runs {
        let _ = writeln!(
            out,
            "{:<22} {:>12} {:>12.3} {:>10}  {}",
            r.label,
            r.parameter_count,
            r.seconds_per_epoch,
            r.epochs,
            &r.config_hash[..16.min(r.config_hash.len())]
        );
    }
    out
}

/// One CSV row per run, group, class and metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run: usize,
    pub label: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub row: ReportRow,
}

pub fn result_rows(outcome: &ExperimentOutcome) -> Vec<ResultRow> {
    outcome
        .runs
        .iter()
        .flat_map(|r| {
            r.report.rows.iter().map(|row| ResultRow {
                run: r.index,
                label: r.label.clone(),
                config_hash: r.config_hash.clone(),
                row: row.clone(),
            })
        })
        .collect()
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        // flattened structs need the record API
        w.write_record([
            r.run.to_string(),
            r.label.clone(),
            r.config_hash.clone(),
            serde_json::to_value(r.row.group).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            serde_json::to_value(r.row.class).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            serde_json::to_value(r.row.metric).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            r.row.mean.to_string(),
            r.row.sd.to_string(),
            r.row.n.to_string(),
            r.row.undefined.to_string(),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let f = |i: usize| rec.get(i).unwrap_or_default().to_string();
        let parse_enum = |i: usize| serde_json::Value::String(f(i));
        let bad = |e: &dyn std::fmt::Display| io_err(path, e);
        out.push(ResultRow {
            run: f(0).parse().map_err(|e| bad(&e))?,
            label: f(1),
            config_hash: f(2),
            row: ReportRow {
                group: serde_json::from_value(parse_enum(3)).map_err(|e| bad(&e))?,
                class: serde_json::from_value(parse_enum(4)).map_err(|e| bad(&e))?,
                metric: serde_json::from_value(parse_enum(5)).map_err(|e| bad(&e))?,
                mean: f(6).parse().map_err(|e| bad(&e))?,
                sd: f(7).parse().map_err(|e| bad(&e))?,
                n: f(8).parse().map_err(|e| bad(&e))?,
                undefined: f(9).parse().map_err(|e| bad(&e))?,
            },
        });
    }
    Ok(out)
}

/// `results.csv`, `table.txt` and `outcome.json` in `dir`.
pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    write_results_csv(&result_rows(outcome), &dir.join("results.csv"))?;
    let table = dir.join("table.txt");
    std::fs::write(&table, &outcome.table).map_err(|e| io_err(&table, e))?;
    let json = dir.join("outcome.json");
    let text = serde_json::to_string_pretty(outcome).map_err(|e| io_err(&json, e))?;
    std::fs::write(&json, text).map_err(|e| io_err(&json, e))
}

/// Prediction counts written next to predicted label rasters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSidecar {
    pub patient_id: String,
    pub spacing_mm: [f64; 3],
    pub voxel_counts: BTreeMap<String, usize>,
}

impl PredictionSidecar {
    pub fn new(study: &PatientStudy, pred: &LabelVolume) -> Self {
        let s = study.spacing;
        PredictionSidecar {
            patient_id: study.patient_id.clone(),
            spacing_mm: [s.row_mm, s.col_mm, s.slice_mm],
            voxel_counts: TissueClass::ALL.iter().map(|c| (c.label().to_string(), pred.count(*c))).collect(),
        }
    }
}

/// Writes a label volume as one 8-bit raster per slice plus `prediction.json`.
pub fn write_prediction(study: &PatientStudy, pred: &LabelVolume, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (s, h, w) = pred.dims();
    let mut out = Vec::with_capacity(s + 1);
    for z in 0..s {
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([pred.labels()[(z, y as usize, x as usize)]])
        });
        let path = dir.join(format!("pred_{z:03}.png"));
        img.save(&path).map_err(|e| io_err(&path, e))?;
        out.push(path);
    }
    let path = dir.join("prediction.json");
    let text = serde_json::to_string_pretty(&PredictionSidecar::new(study, pred)).map_err(|e| io_err(&path, e))?;
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    out.push(path);
    Ok(out)
}

/// Single-model run outside a sweep, as used by the `train` command.
pub fn train_single(
    model_config: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &PreparedData,
) -> Result<(ModelGraph, crate::train::TrainOutcome)> {
    let mut model = build_model(model_config)?;
    let outcome = train(&mut model, &data.train, &data.validation, train_cfg)?;
    Ok((model, outcome))
}
