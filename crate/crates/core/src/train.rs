//! Slice-level training with Adam, early stopping and staged unfreezing.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use strokeseg_nn::{Adam, AdamConfig, HasParams, NamedArray, Tensor};
use thiserror::Error;

use crate::dataset::{PatientStudy, SeverityGroup};
use crate::loss::{batch_focal_tversky, LossError, LossSpec, NUM_CLASSES};
use crate::model::{CheckpointMeta, FreezeMode, FreezeStage, ModelError, ModelGraph, ModelInput};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("patient `{0}` has no ground truth")]
    MissingGroundTruth(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("validation loss is not finite at epoch {epoch}")]
    ValidationDivergence { epoch: usize },
    #[error("cannot write {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-7 }
    }
}

impl OptimizerConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate as f32,
            beta1: self.beta1 as f32,
            beta2: self.beta2 as f32,
            epsilon: self.epsilon as f32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub seed: u64,
    /// Best checkpoint and history log are written here when set.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 1000,
            batch_size: 2,
            patience: 25,
            optimizer: OptimizerConfig::default(),
            loss: LossSpec::default(),
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(TrainError::InvalidConfig(format!(
                "max_epochs {}, batch_size {}, patience {} must all be at least 1",
                self.max_epochs, self.batch_size, self.patience
            )));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate must be positive".into()));
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerAction {
    Continue,
    AdvanceStage(FreezeStage),
    Stop,
}

/// Patience-based early stopping that, in gradual mode, unfreezes the
/// encoders in two steps before stopping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneController {
    pub stage: FreezeStage,
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub patience: usize,
}

impl FineTuneController {
    pub fn new(stage: FreezeStage, patience: usize) -> Self {
        FineTuneController { stage, best_val_loss: f64::INFINITY, epochs_since_improvement: 0, patience }
    }
}

pub fn controller_step(ctrl: &mut FineTuneController, val_loss: f64, mode: FreezeMode) -> ControllerAction {
    if val_loss < ctrl.best_val_loss {
        ctrl.best_val_loss = val_loss;
        ctrl.epochs_since_improvement = 0;
        return ControllerAction::Continue;
    }
    ctrl.epochs_since_improvement += 1;
    if ctrl.epochs_since_improvement < ctrl.patience {
        return ControllerAction::Continue;
    }
    if mode == FreezeMode::Gradual {
        if let Some(next) = ctrl.stage.next() {
            ctrl.stage = next;
            ctrl.epochs_since_improvement = 0;
            return ControllerAction::AdvanceStage(next);
        }
    }
    ControllerAction::Stop
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoppingReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub stage: FreezeStage,
    pub improved: bool,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopping_reason: StoppingReason,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .filter(|e| e.improved)
            .last()
    }

    /// Distinct stages in the order they were visited.
    pub fn stages(&self) -> Vec<FreezeStage> {
        let mut out: Vec<FreezeStage> = Vec::new();
        for e in &self.epochs {
            if out.last() != Some(&e.stage) {
                out.push(e.stage);
            }
        }
        out
    }

    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| TrainError::Io { path: path.to_path_buf(), reason: e.to_string() };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for e in &self.epochs {
            let line = serde_json::to_string(e).expect("plain record");
            writeln!(f, "{line}").map_err(io)?;
        }
        let tail = serde_json::json!({ "stopping_reason": self.stopping_reason });
        writeln!(f, "{tail}").map_err(io)?;
        f.flush().map_err(io)
    }
}

/// The best weights seen during a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub weights: Vec<NamedArray>,
    pub stage: FreezeStage,
    pub meta: CheckpointMeta,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: TrainHistory,
}

/// One labelled slice, channel-first.
#[derive(Clone, Debug)]
pub struct SliceSample {
    pub patient_id: String,
    pub slice: usize,
    pub group: SeverityGroup,
    pub nihss: Option<u8>,
    pub height: usize,
    pub width: usize,
    pub maps: [Vec<f32>; 4],
    pub mip: Vec<f32>,
    pub labels: Vec<u8>,
}

pub fn slice_samples(studies: &[PatientStudy]) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for st in studies {
        let gt = st
            .ground_truth
            .as_ref()
            .ok_or_else(|| TrainError::MissingGroundTruth(st.patient_id.clone()))?;
        for (z, mut sample) in slice_samples_unlabelled(st).into_iter().enumerate() {
            sample.labels = gt.labels().index_axis(ndarray::Axis(0), z).iter().copied().collect();
            out.push(sample);
        }
    }
    Ok(out)
}

/// Slices of one study without labels, caudal to cranial.
pub fn slice_samples_unlabelled(st: &PatientStudy) -> Vec<SliceSample> {
    let (s, h, w) = st.dims();
    (0..s)
        .map(|z| {
            let inp = st.slice_inputs(z);
            SliceSample {
                patient_id: st.patient_id.clone(),
                slice: z,
                group: st.group,
                nihss: st.nihss,
                height: h,
                width: w,
                maps: inp.maps,
                mip: inp.mip,
                labels: Vec::new(),
            }
        })
        .collect()
}

/// Stacks samples into a model input. NIHSS is filled only when every
/// sample has a score.
pub fn make_input(samples: &[&SliceSample]) -> ModelInput {
    let n = samples.len();
    let (h, w) = (samples[0].height, samples[0].width);
    let stack = |get: &dyn Fn(&SliceSample) -> &[f32]| {
        let mut data = Vec::with_capacity(n * 3 * h * w);
        for s in samples {
            data.extend_from_slice(get(s));
        }
        Tensor::from_vec(&[n, 3, h, w], data).expect("uniform slice size")
    };
    let maps = [
        stack(&|s| &s.maps[0]),
        stack(&|s| &s.maps[1]),
        stack(&|s| &s.maps[2]),
        stack(&|s| &s.maps[3]),
    ];
    let nihss: Option<Vec<f32>> = samples.iter().map(|s| s.nihss.map(f32::from)).collect();
    ModelInput { maps, mip: Some(stack(&|s| &s.mip)), nihss }
}

/// `(N, 3, H, W)` probabilities as `(N·H·W, 3)` rows in sample-major order.
pub fn probs_to_rows(probs: &Tensor) -> Array2<f64> {
    let (n, c, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2), probs.dim(3));
    let hw = h * w;
    let d = probs.data();
    Array2::from_shape_fn((n * hw, c), |(r, k)| {
        let (b, p) = (r / hw, r % hw);
        (d[(b * c + k) * hw + p] as f64).clamp(0.0, 1.0)
    })
}

fn rows_to_tensor(rows: &Array2<f64>, shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let mut data = vec![0.0f32; n * c * hw];
    for ((r, k), &v) in rows.indexed_iter() {
        let (b, p) = (r / hw, r % hw);
        data[(b * c + k) * hw + p] = v as f32;
    }
    Tensor::from_vec(shape, data).expect("consistent shape")
}

fn batch_targets(samples: &[&SliceSample]) -> Array2<f64> {
    let total: usize = samples.iter().map(|s| s.labels.len()).sum();
    let mut t = Array2::zeros((total, NUM_CLASSES));
    let mut r = 0;
    for s in samples {
        for &l in &s.labels {
            t[(r, l as usize)] = 1.0;
            r += 1;
        }
    }
    t
}

/// Loss and `dL/dprobs` for one batch.
pub fn batch_loss(probs: &Tensor, samples: &[&SliceSample], spec: &LossSpec) -> Result<(f64, Tensor)> {
    let rows = probs_to_rows(probs);
    let targets = batch_targets(samples);
    let groups: Vec<SeverityGroup> = samples.iter().map(|s| s.group).collect();
    let hw = probs.dim(2) * probs.dim(3);
    let (loss, grad) = batch_focal_tversky(rows.view(), targets.view(), spec, &groups, hw)?;
    Ok((loss, rows_to_tensor(&grad, probs.shape())))
}

/// Mean batch loss over `samples` in order, dropout disabled.
pub fn evaluate_loss(model: &mut ModelGraph, samples: &[SliceSample], config: &TrainConfig) -> Result<f64> {
    let refs: Vec<&SliceSample> = samples.iter().collect();
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in refs.chunks(config.batch_size) {
        let probs = model.forward_nchw(&make_input(chunk), false)?;
        total += batch_loss(&probs, chunk, &config.loss)?.0;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// One optimisation step on a batch; returns the batch loss.
pub fn train_step(model: &mut ModelGraph, adam: &mut Adam, batch: &[&SliceSample], spec: &LossSpec) -> Result<f64> {
    let probs = model.forward_nchw(&make_input(batch), true)?;
    let (loss, dprobs) = batch_loss(&probs, batch, spec)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    model.backward(&dprobs)?;
    model.visit_params_mut(&mut |p| adam.step(p));
    Ok(loss)
}

/// Trains on pooled, shuffled slices and returns the best checkpoint; the
/// model is left holding the best weights.
pub fn train(
    model: &mut ModelGraph,
    train_set: &[PatientStudy],
    val_set: &[PatientStudy],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_samples = slice_samples(train_set)?;
    let val_samples = slice_samples(val_set)?;
    train_on_samples(model, &train_samples, &val_samples, config)
}

pub fn train_on_samples(
    model: &mut ModelGraph,
    train_samples: &[SliceSample],
    val_samples: &[SliceSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_samples.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val_samples.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let mode = model.config().freeze_mode;
    let mut ctrl = FineTuneController::new(mode.initial_stage(), config.patience);
    model.set_freeze_stage(ctrl.stage);
    model.reseed_dropout(config.seed ^ 0x5EED_D80F);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.optimizer.adam());
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut reason = StoppingReason::MaxEpochs;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Io { path: dir.clone(), reason: e.to_string() })?;
    }
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let stage = model.stage();
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SliceSample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let loss = train_step(model, &mut adam, &batch, &config.loss)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: b, loss });
            }
            sum += loss;
            batches += 1;
        }
        let val_loss = evaluate_loss(model, val_samples, config)?;
        if !val_loss.is_finite() {
            return Err(TrainError::ValidationDivergence { epoch });
        }
        let improved = val_loss < ctrl.best_val_loss;
        let action = controller_step(&mut ctrl, val_loss, mode);
        if improved {
            let meta = CheckpointMeta { val_loss, epoch };
            if let Some(dir) = &config.checkpoint_dir {
                model.save_checkpoint(&dir.join("best.safetensors"), &meta)?;
            }
            best = Some(Checkpoint { weights: model.weights(), stage, meta });
        }
        let record = EpochRecord {
            epoch,
            train_loss: sum / batches as f64,
            val_loss,
            stage,
            improved,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} {:?}{}",
            record.train_loss,
            val_loss,
            stage,
            if improved { " *" } else { "" }
        );
        epochs.push(record);
        match action {
            ControllerAction::Continue => {}
            ControllerAction::AdvanceStage(next) => {
                log::info!("advancing to {next:?}");
                model.set_freeze_stage(next);
            }
            ControllerAction::Stop => {
                reason = StoppingReason::EarlyStop;
                break;
            }
        }
    }
    let best = best.expect("first epoch always improves on infinity");
    model.set_weights(&best.weights)?;
    let history = TrainHistory { epochs, stopping_reason: reason };
    if let Some(dir) = &config.checkpoint_dir {
        history.write_ndjson(&dir.join("history.ndjson"))?;
    }
    Ok(TrainOutcome { best, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_stops_after_patience() {
        let mut c = FineTuneController::new(FreezeStage::AllUnfrozen, 25);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            if controller_step(&mut c, 1.0, FreezeMode::Unfrozen) == ControllerAction::Stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(26));
    }

    #[test]
    fn improvement_resets_counter() {
        let mut c = FineTuneController::new(FreezeStage::AllFrozen, 25);
        controller_step(&mut c, 1.0, FreezeMode::Gradual);
        for _ in 0..24 {
            controller_step(&mut c, 1.0, FreezeMode::Gradual);
        }
        assert_eq!(c.epochs_since_improvement, 24);
        assert_eq!(controller_step(&mut c, 0.5, FreezeMode::Gradual), ControllerAction::Continue);
        assert_eq!(c.epochs_since_improvement, 0);
    }
}
