use proptest::prelude::*;
use strokeseg::dataset::SeverityGroup;
use strokeseg::loss::LossSpec;
use strokeseg::model::{build_model, load_checkpoint, FreezeMode, FreezeStage, Fusion, InputSet, ModelConfig};
use strokeseg::synthgen::{generate_studies, CohortSpec, PhantomTemplate};
use strokeseg::train::{
    controller_step, evaluate_loss, make_input, slice_samples, train, train_on_samples, train_step, ControllerAction,
    FineTuneController, SliceSample, StoppingReason, TrainConfig, TrainError,
};
use strokeseg_nn::{Adam, AdamConfig};

fn tiny_studies(seed: u64) -> Vec<strokeseg::PatientStudy> {
    let t = PhantomTemplate { slices: 2, height: 32, width: 32, ..Default::default() };
    generate_studies(&CohortSpec::new(2, 1, 1, t, seed)).unwrap()
}

fn tiny_model(seed: u64, freeze: FreezeMode) -> strokeseg::ModelGraph {
    let mut c = ModelConfig::desk(Fusion::SlowFusion, InputSet::PMS_NIHSS, freeze, 0.0625);
    c.input_size = (32, 32);
    c.seed = seed;
    build_model(&c).unwrap()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig { max_epochs: epochs, patience: 3, seed: 11, ..Default::default() }
}

/// Feeds a trace to a fresh controller; returns the actions taken.
fn drive(trace: &[f64], mode: FreezeMode, patience: usize) -> Vec<ControllerAction> {
    let mut c = FineTuneController::new(mode.initial_stage(), patience);
    let mut out = Vec::new();
    for &v in trace {
        let a = controller_step(&mut c, v, mode);
        out.push(a);
        if a == ControllerAction::Stop {
            break;
        }
    }
    out
}

#[test]
fn gradual_controller_walks_through_all_stages() {
    // one improvement, then flat: plateaus end at epochs 26, 51 and 76
    let trace = vec![1.0; 200];
    let actions = drive(&trace, FreezeMode::Gradual, 25);
    let events: Vec<(usize, ControllerAction)> = actions
        .iter()
        .enumerate()
        .filter(|(_, a)| **a != ControllerAction::Continue)
        .map(|(i, a)| (i + 1, *a))
        .collect();
    assert_eq!(
        events,
        vec![
            (26, ControllerAction::AdvanceStage(FreezeStage::BottomHalfUnfrozen)),
            (51, ControllerAction::AdvanceStage(FreezeStage::AllUnfrozen)),
            (76, ControllerAction::Stop),
        ]
    );
}

#[test]
fn improvement_on_the_last_plateau_epoch_resets_the_counter() {
    let mut trace = vec![1.0; 25];
    trace.push(0.5);
    trace.extend(vec![0.5; 100]);
    let actions = drive(&trace, FreezeMode::Gradual, 25);
    let first_event = actions.iter().position(|a| *a != ControllerAction::Continue).unwrap() + 1;
    assert_eq!(first_event, 51);
}

#[test]
fn non_gradual_modes_stop_after_one_plateau() {
    for mode in [FreezeMode::Frozen, FreezeMode::Unfrozen] {
        let actions = drive(&[1.0; 100], mode, 25);
        assert_eq!(actions.len(), 26);
        assert_eq!(*actions.last().unwrap(), ControllerAction::Stop);
    }
}

#[test]
fn equal_loss_is_not_an_improvement() {
    let mut c = FineTuneController::new(FreezeStage::AllUnfrozen, 5);
    controller_step(&mut c, 0.3, FreezeMode::Unfrozen);
    controller_step(&mut c, 0.3, FreezeMode::Unfrozen);
    assert_eq!(c.epochs_since_improvement, 1);
}

#[test]
fn training_is_deterministic() {
    let studies = tiny_studies(1);
    let (tr, va) = studies.split_at(3);
    let mut a = tiny_model(2, FreezeMode::Unfrozen);
    let mut b = tiny_model(2, FreezeMode::Unfrozen);
    let ha = train(&mut a, tr, va, &tiny_config(3)).unwrap();
    let hb = train(&mut b, tr, va, &tiny_config(3)).unwrap();
    let losses = |h: &strokeseg::train::TrainOutcome| {
        h.history.epochs.iter().map(|e| (e.train_loss.to_bits(), e.val_loss.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(losses(&ha), losses(&hb));
    assert_eq!(a.weights(), b.weights());
}

#[test]
fn training_returns_the_best_checkpoint_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let studies = tiny_studies(2);
    let (tr, va) = studies.split_at(3);
    let mut m = tiny_model(3, FreezeMode::Gradual);
    let mut cfg = tiny_config(4);
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let out = train(&mut m, tr, va, &cfg).unwrap();
    let best = out.history.best().unwrap();
    assert_eq!(best.epoch, out.best.meta.epoch);
    let min = out.history.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best.val_loss, min);
    let val = slice_samples(va).unwrap();
    let now = evaluate_loss(&mut m, &val, &cfg).unwrap();
    assert!((now - min).abs() < 1e-9, "model holds {now}, best was {min}");

    let (_, meta) = load_checkpoint(&dir.path().join("best.safetensors")).unwrap();
    assert_eq!(meta.epoch, best.epoch);
    let log = std::fs::read_to_string(dir.path().join("history.ndjson")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), out.history.epochs.len() + 1);
    assert!(lines.last().unwrap().contains("MaxEpochs"));
    assert_eq!(out.history.stopping_reason, StoppingReason::MaxEpochs);
}

#[test]
fn early_stop_is_reported() {
    let studies = tiny_studies(3);
    let (tr, va) = studies.split_at(3);
    let mut m = tiny_model(4, FreezeMode::Unfrozen);
    let mut cfg = tiny_config(40);
    cfg.patience = 1;
    // steps far below f32 resolution leave the weights, and so the loss, unchanged
    cfg.optimizer.learning_rate = 1e-30;
    let out = train(&mut m, tr, va, &cfg).unwrap();
    assert_eq!(out.history.stopping_reason, StoppingReason::EarlyStop);
    assert_eq!(out.history.epochs.len(), 2);
}

#[test]
fn invalid_inputs_are_rejected() {
    let studies = tiny_studies(4);
    let mut m = tiny_model(0, FreezeMode::Unfrozen);
    let bad = TrainConfig { batch_size: 0, ..Default::default() };
    assert!(matches!(train(&mut m, &studies, &studies, &bad), Err(TrainError::InvalidConfig(_))));
    let samples = slice_samples(&studies).unwrap();
    assert!(matches!(
        train_on_samples(&mut m, &[], &samples, &tiny_config(1)),
        Err(TrainError::EmptyDataset(_))
    ));
    assert!(matches!(
        train_on_samples(&mut m, &samples, &[], &tiny_config(1)),
        Err(TrainError::EmptyDataset(_))
    ));
    let mut unlabelled = studies.clone();
    unlabelled[0].ground_truth = None;
    assert!(matches!(train(&mut m, &unlabelled, &studies, &tiny_config(1)), Err(TrainError::MissingGroundTruth(_))));
}

#[test]
fn slice_samples_pool_every_slice() {
    let studies = tiny_studies(5);
    let samples = slice_samples(&studies).unwrap();
    assert_eq!(samples.len(), 8);
    assert_eq!(samples.iter().filter(|s| s.group == SeverityGroup::Lvo).count(), 4);
    assert!(samples.iter().all(|s| s.labels.len() == 32 * 32 && s.maps[0].len() == 3 * 32 * 32));
}

#[test]
fn config_round_trips_through_json() {
    let cfg = tiny_config(7);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
    let minimal: TrainConfig = serde_json::from_str(r#"{"max_epochs":5,"batch_size":2,"patience":3}"#).unwrap();
    assert_eq!(minimal.optimizer, Default::default());
}

/// Hard penumbra Dice of the model's argmax on `batch`.
fn penumbra_dice(model: &mut strokeseg::ModelGraph, batch: &[&SliceSample]) -> f64 {
    let probs = model.forward_nchw(&make_input(batch), false).unwrap();
    let d = probs.data();
    let hw = batch[0].labels.len();
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (b, s) in batch.iter().enumerate() {
        for p in 0..hw {
            let at = |c: usize| d[(b * 3 + c) * hw + p];
            let mut best = 0;
            for c in 1..3 {
                if at(c) > at(best) {
                    best = c;
                }
            }
            let pred = best == 1;
            let truth = s.labels[p] == 1;
            tp += usize::from(pred && truth);
            np += usize::from(pred);
            ng += usize::from(truth);
        }
    }
    2.0 * tp as f64 / (np + ng).max(1) as f64
}

#[test]
fn desk_model_overfits_two_slices() {
    for seed in 0..3u64 {
        let studies = generate_studies(&CohortSpec::new(1, 0, 0, PhantomTemplate::default(), 7 + seed)).unwrap();
        let samples = slice_samples(&studies).unwrap();
        let mut order: Vec<&SliceSample> = samples.iter().collect();
        order.sort_by_key(|s| std::cmp::Reverse(s.labels.iter().filter(|&&l| l == 1).count()));
        let batch = &order[..2];

        let mut cfg = ModelConfig::desk(Fusion::SlowFusion, InputSet::PMS, FreezeMode::Unfrozen, 0.125);
        cfg.seed = seed;
        let mut model = build_model(&cfg).unwrap();
        let mut loss = LossSpec::new(1.0, 0.7, 0.3);
        loss.class_weights[0] = 0.1;
        let mut adam = Adam::new(AdamConfig { learning_rate: 1e-3, ..Default::default() });
        let reached = (1..=300).find(|_| {
            train_step(&mut model, &mut adam, batch, &loss).unwrap();
            penumbra_dice(&mut model, batch) > 0.9
        });
        assert!(reached.is_some(), "seed {seed}: final Dice {}", penumbra_dice(&mut model, batch));
    }
}

proptest! {
    #[test]
    fn controller_never_stops_early(trace in prop::collection::vec(0.0f64..1.0, 1..300), patience in 1usize..30) {
        let actions = drive(&trace, FreezeMode::Unfrozen, patience);
        let mut best = f64::INFINITY;
        let mut since = 0;
        for (v, a) in trace.iter().zip(&actions) {
            if *v < best { best = *v; since = 0; } else { since += 1; }
            let expect = if since >= patience { ControllerAction::Stop } else { ControllerAction::Continue };
            prop_assert_eq!(*a, expect);
        }
    }

    #[test]
    fn gradual_stages_only_move_forward(trace in prop::collection::vec(0.0f64..1.0, 1..400), patience in 1usize..10) {
        let mut c = FineTuneController::new(FreezeStage::AllFrozen, patience);
        let mut stages = vec![c.stage];
        let mut advances = 0;
        for &v in &trace {
            match controller_step(&mut c, v, FreezeMode::Gradual) {
                ControllerAction::AdvanceStage(s) => { advances += 1; prop_assert_eq!(s, c.stage); }
                ControllerAction::Stop => { prop_assert_eq!(c.stage, FreezeStage::AllUnfrozen); break; }
                ControllerAction::Continue => {}
            }
            stages.push(c.stage);
        }
        prop_assert!(advances <= 2);
        prop_assert!(stages.windows(2).all(|w| w[0] <= w[1]));
    }
}
