use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strokeseg::loss::{
    batch_focal_tversky, focal_tversky_loss, focal_tversky_with_grad, one_hot, tversky_index, LossError, LossSpec,
};
use strokeseg::SeverityGroup;

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let mut p = Array2::zeros((n, 3));
    for mut row in p.rows_mut() {
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (v, r) in row.iter_mut().zip(raw) {
            *v = r / s;
        }
    }
    p
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..3u8)).collect()
}

/// Soft Dice per class computed independently of the loss module.
fn soft_dice(p: &Array2<f64>, g: &Array2<f64>, c: usize, eps: f64) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for i in 0..p.nrows() {
        inter += p[(i, c)] * g[(i, c)];
        sp += p[(i, c)];
        sg += g[(i, c)];
    }
    (2.0 * inter + 2.0 * eps) / (sp + sg + 2.0 * eps)
}

#[test]
fn tversky_hand_counts() {
    // class-1 truth at pixels 0,1; hard prediction at pixels 0,2
    let g = one_hot(&[1, 1, 0, 0]);
    let p = one_hot(&[1, 0, 1, 0]);
    let dice = tversky_index(p.view(), g.view(), 1, 0.5, 0.5, 1e-12).unwrap();
    assert!((dice - 0.5).abs() < 1e-9);
    let recall = tversky_index(p.view(), g.view(), 1, 1.0, 0.0, 1e-12).unwrap();
    assert!((recall - 0.5).abs() < 1e-9);
}

#[test]
fn empty_class_everywhere_gives_index_one() {
    let g = one_hot(&[0, 0, 0]);
    let ti = tversky_index(g.view(), g.view(), 2, 0.7, 0.3, 1e-6).unwrap();
    assert_eq!(ti, 1.0);
}

#[test]
fn focal_exponent_on_single_class() {
    // penumbra TI = 0.5 exactly (Dice weights, eps tiny), other classes perfect
    let g = one_hot(&[1, 1, 0, 0]);
    let p = one_hot(&[1, 0, 1, 0]);
    let mut spec = LossSpec::new(4.0 / 3.0, 0.5, 0.5);
    spec.epsilon = 1e-12;
    let l = focal_tversky_loss(p.view(), g.view(), &spec, SeverityGroup::Lvo).unwrap();
    let ti_bg = tversky_index(p.view(), g.view(), 0, 0.5, 0.5, 1e-12).unwrap();
    let expected = (1.0 - ti_bg).powf(0.75) + 0.5f64.powf(0.75);
    assert!((l - expected).abs() < 1e-9, "{l} vs {expected}");
}

#[test]
fn nonlvo_lesion_terms_weigh_more() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_probs(&mut rng, 64);
    let g = one_hot(&random_labels(&mut rng, 64));
    let spec = LossSpec::default();
    let lvo = focal_tversky_loss(p.view(), g.view(), &spec, SeverityGroup::Lvo).unwrap();
    let non = focal_tversky_loss(p.view(), g.view(), &spec, SeverityGroup::NonLvo).unwrap();
    assert!(non > lvo);
    let mut flat = spec.clone();
    flat.nonlvo_multiplier = 1.0;
    let same = focal_tversky_loss(p.view(), g.view(), &flat, SeverityGroup::NonLvo).unwrap();
    assert!((same - lvo).abs() < 1e-12);
}

#[test]
fn invalid_specs_and_inputs_are_rejected() {
    let g = one_hot(&[0, 1, 2]);
    for bad in [LossSpec::new(0.5, 0.7, 0.3), LossSpec::new(4.0, 0.7, 0.3), LossSpec::new(1.0, 1.2, 0.3)] {
        assert!(matches!(
            focal_tversky_loss(g.view(), g.view(), &bad, SeverityGroup::Lvo),
            Err(LossError::InvalidSpec(_))
        ));
    }
    let short = one_hot(&[0, 1]);
    assert!(matches!(
        focal_tversky_loss(short.view(), g.view(), &LossSpec::default(), SeverityGroup::Lvo),
        Err(LossError::ShapeMismatch { .. })
    ));
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let p = random_probs(&mut rng, 64);
        let g = one_hot(&random_labels(&mut rng, 64));
        let spec = LossSpec::default();
        let (_, grad) = focal_tversky_with_grad(p.view(), g.view(), &spec, SeverityGroup::NonLvo).unwrap();
        let h = 1e-6;
        for _ in 0..20 {
            let (i, c) = (rng.random_range(0..64), rng.random_range(0..3));
            let mut up = p.clone();
            up[(i, c)] += h;
            let mut dn = p.clone();
            dn[(i, c)] -= h;
            let fd = (focal_tversky_loss(up.view(), g.view(), &spec, SeverityGroup::NonLvo).unwrap()
                - focal_tversky_loss(dn.view(), g.view(), &spec, SeverityGroup::NonLvo).unwrap())
                / (2.0 * h);
            assert!((fd - grad[(i, c)]).abs() <= 1e-6 * fd.abs().max(1.0), "{fd} vs {}", grad[(i, c)]);
        }
    }
}

#[test]
fn mixed_batch_weights_groups_by_sample_share() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_probs(&mut rng, 8);
    let g = one_hot(&random_labels(&mut rng, 8));
    let spec = LossSpec::default();
    let groups = [SeverityGroup::Lvo, SeverityGroup::NonLvo];
    let (l, _) = batch_focal_tversky(p.view(), g.view(), &spec, &groups, 4).unwrap();
    let first = focal_tversky_loss(p.slice(ndarray::s![0..4, ..]), g.slice(ndarray::s![0..4, ..]), &spec, groups[0]).unwrap();
    let second = focal_tversky_loss(p.slice(ndarray::s![4..8, ..]), g.slice(ndarray::s![4..8, ..]), &spec, groups[1]).unwrap();
    assert!((l - 0.5 * (first + second)).abs() < 1e-12);
    // a single-group batch pools every pixel
    let (pooled, _) = batch_focal_tversky(p.view(), g.view(), &spec, &[SeverityGroup::Lvo; 2], 4).unwrap();
    let direct = focal_tversky_loss(p.view(), g.view(), &spec, SeverityGroup::Lvo).unwrap();
    assert!((pooled - direct).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn index_lies_in_unit_interval(seed in any::<u64>(), n in 1usize..40, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_probs(&mut rng, n);
        let g = one_hot(&random_labels(&mut rng, n));
        for c in 0..3 {
            let ti = tversky_index(p.view(), g.view(), c, a, b, 1e-6).unwrap();
            prop_assert!(ti > 0.0 && ti <= 1.0);
        }
    }

    #[test]
    fn reduces_to_soft_dice(seed in any::<u64>(), n in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_probs(&mut rng, n);
        let g = one_hot(&random_labels(&mut rng, n));
        let spec = LossSpec::new(1.0, 0.5, 0.5);
        let l = focal_tversky_loss(p.view(), g.view(), &spec, SeverityGroup::Lvo).unwrap();
        let oracle: f64 = (0..3).map(|c| 1.0 - soft_dice(&p, &g, c, spec.epsilon)).sum();
        prop_assert!((l - oracle).abs() < 1e-9);
    }

    #[test]
    fn loss_is_nonnegative_and_bounded(seed in any::<u64>(), gamma in 1.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_probs(&mut rng, 16);
        let g = one_hot(&random_labels(&mut rng, 16));
        let spec = LossSpec::new(gamma, 0.7, 0.3);
        let l = focal_tversky_loss(p.view(), g.view(), &spec, SeverityGroup::NonLvo).unwrap();
        let cap: f64 = (0..3).map(|c| spec.weight(c, SeverityGroup::NonLvo)).sum();
        prop_assert!(l >= 0.0 && l <= cap + 1e-12);
    }

    #[test]
    fn moving_mass_toward_truth_never_raises_loss(seed in any::<u64>(), t in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(&mut rng, 24);
        let g = one_hot(&labels);
        let p = random_probs(&mut rng, 24);
        let spec = LossSpec::default();
        let mix = |s: f64| &p * (1.0 - s) + &g * s;
        let a = focal_tversky_loss(mix(t).view(), g.view(), &spec, SeverityGroup::Lvo).unwrap();
        let b = focal_tversky_loss(mix((t + 0.1).min(1.0)).view(), g.view(), &spec, SeverityGroup::Lvo).unwrap();
        prop_assert!(b <= a + 1e-12);
    }
}
