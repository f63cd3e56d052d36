use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strokeseg::loss::{one_hot, tversky_index};
use strokeseg::metrics::{
    aggregate, dice, evaluate_patient, hausdorff, hausdorff_percentile, interobserver_report, mean_sd,
    volume_difference, GroupKey, HausdorffMode, Metric, MetricsError, MetricsReport, ObserverCase, Pairing,
};
use strokeseg::{LabelVolume, SeverityGroup, Spacing, TissueClass};

fn vol(dims: (usize, usize, usize), points: &[(usize, usize, usize, u8)]) -> LabelVolume {
    let mut a = Array3::zeros(dims);
    for &(z, y, x, l) in points {
        a[(z, y, x)] = l;
    }
    LabelVolume::new(a).unwrap()
}

fn random_volume(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), density: f64) -> LabelVolume {
    LabelVolume::new(Array3::from_shape_fn(dims, |_| {
        if rng.random_bool(density) {
            rng.random_range(1..3u8)
        } else {
            0
        }
    }))
    .unwrap()
}

/// All-pairs Hausdorff over voxel centres; spacing is (row, col, slice).
fn brute_hausdorff(a: &LabelVolume, b: &LabelVolume, class: TissueClass, s: Spacing) -> Option<f64> {
    let pts = |v: &LabelVolume| -> Vec<[f64; 3]> {
        v.labels()
            .indexed_iter()
            .filter(|(_, &l)| l == class.index() as u8)
            .map(|((z, y, x), _)| [z as f64 * s.slice_mm, y as f64 * s.row_mm, x as f64 * s.col_mm])
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let d = |p: &[f64; 3], q: &[f64; 3]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    let directed = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter().map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)))
}

fn count_dice(a: &LabelVolume, b: &LabelVolume, class: TissueClass) -> f64 {
    let c = class.index() as u8;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels().iter()) {
        na += (x == c) as usize;
        nb += (y == c) as usize;
        inter += (x == c && y == c) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

#[test]
fn dice_examples() {
    let a = vol((1, 2, 2), &[(0, 0, 0, 1), (0, 0, 1, 1)]);
    let b = vol((1, 2, 2), &[(0, 0, 0, 1), (0, 1, 0, 1)]);
    assert_eq!(dice(&a, &a, TissueClass::Penumbra).unwrap(), 1.0);
    assert_eq!(dice(&a, &b, TissueClass::Penumbra).unwrap(), 0.5);
    let c = vol((1, 2, 2), &[(0, 1, 1, 1)]);
    assert_eq!(dice(&a, &c, TissueClass::Penumbra).unwrap(), 0.0);
    let empty = LabelVolume::healthy((1, 2, 2));
    assert_eq!(dice(&empty, &empty, TissueClass::Core).unwrap(), 1.0);
}

#[test]
fn hausdorff_examples() {
    let s = Spacing::new(1.0, 1.0, 1.0);
    let a = vol((1, 5, 5), &[(0, 0, 0, 2)]);
    let b = vol((1, 5, 5), &[(0, 3, 4, 2)]);
    assert_eq!(hausdorff(&a, &b, TissueClass::Core, s).unwrap(), Some(5.0));
    assert_eq!(hausdorff(&a, &a, TissueClass::Core, s).unwrap(), Some(0.0));
    let empty = LabelVolume::healthy((1, 5, 5));
    assert_eq!(hausdorff(&empty, &b, TissueClass::Core, s).unwrap(), None);
    // slice spacing applies along the first axis
    let c = vol((3, 1, 1), &[(0, 0, 0, 1)]);
    let d = vol((3, 1, 1), &[(2, 0, 0, 1)]);
    assert_eq!(hausdorff(&c, &d, TissueClass::Penumbra, Spacing::new(1.0, 1.0, 5.0)).unwrap(), Some(10.0));
}

#[test]
fn volume_difference_examples() {
    let mut a = Array3::zeros((1, 10, 10));
    a.iter_mut().for_each(|v| *v = 1u8);
    let pred = LabelVolume::new(a).unwrap();
    let mut g = Array3::zeros((1, 10, 10));
    g.iter_mut().take(60).for_each(|v| *v = 1u8);
    let gt = LabelVolume::new(g).unwrap();
    let s = Spacing::new(1.0, 1.0, 10.0);
    assert_eq!(volume_difference(&pred, &gt, TissueClass::Penumbra, s).unwrap(), 0.4);
    assert_eq!(volume_difference(&gt, &gt, TissueClass::Penumbra, s).unwrap(), 0.0);
    let e = LabelVolume::healthy((1, 10, 10));
    assert_eq!(volume_difference(&e, &e, TissueClass::Core, s).unwrap(), 0.0);
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = LabelVolume::healthy((1, 2, 2));
    let b = LabelVolume::healthy((1, 2, 3));
    assert!(matches!(dice(&a, &b, TissueClass::Core), Err(MetricsError::Shape(..))));
}

#[test]
fn percentile_hausdorff_is_bounded_by_the_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = Spacing::new(1.0, 1.5, 5.0);
    for _ in 0..20 {
        let a = random_volume(&mut rng, (2, 8, 8), 0.3);
        let b = random_volume(&mut rng, (2, 8, 8), 0.3);
        let full = hausdorff(&a, &b, TissueClass::Penumbra, s).unwrap();
        let p95 = hausdorff_percentile(&a, &b, TissueClass::Penumbra, s, 95.0).unwrap();
        let p100 = hausdorff_percentile(&a, &b, TissueClass::Penumbra, s, 100.0).unwrap();
        assert_eq!(p100, full);
        if let (Some(f), Some(p)) = (full, p95) {
            assert!(p <= f);
        }
    }
}

#[test]
fn aggregate_uses_population_sd() {
    let s = Spacing::new(1.0, 1.0, 1000.0);
    let gt = LabelVolume::healthy((1, 2, 2));
    let one = vol((1, 2, 2), &[(0, 0, 0, 2)]);
    let three = vol((1, 2, 2), &[(0, 0, 0, 2), (0, 0, 1, 2), (0, 1, 0, 2)]);
    let pm = |id: &str, p: &LabelVolume| evaluate_patient(id, SeverityGroup::Lvo, p, &gt, s, HausdorffMode::Exact).unwrap();
    let report = aggregate(&[pm("a", &one), pm("b", &three)]).unwrap();
    let row = report.get(GroupKey::Lvo, TissueClass::Core, Metric::DeltaV).unwrap();
    assert_eq!((row.mean, row.sd, row.n), (2.0, 1.0, 2));
    assert_eq!(mean_sd(&[5.0]), (5.0, 0.0));
}

#[test]
fn wis_patients_report_volume_only() {
    let s = Spacing::new(1.0, 1.0, 1.0);
    let gt = LabelVolume::healthy((1, 3, 3));
    let pred = vol((1, 3, 3), &[(0, 1, 1, 1)]);
    let wis = evaluate_patient("w", SeverityGroup::Wis, &pred, &gt, s, HausdorffMode::Exact).unwrap();
    let lvo_gt = vol((1, 3, 3), &[(0, 1, 1, 1), (0, 0, 0, 2)]);
    let lvo = evaluate_patient("l", SeverityGroup::Lvo, &lvo_gt, &lvo_gt, s, HausdorffMode::Exact).unwrap();
    let report = aggregate(&[wis, lvo]).unwrap();
    assert!(report.get(GroupKey::Wis, TissueClass::Penumbra, Metric::DeltaV).is_some_and(|r| r.n == 1));
    for m in [Metric::Dice, Metric::Hausdorff] {
        assert!(report.get(GroupKey::Wis, TissueClass::Penumbra, m).is_none_or(|r| r.n == 0));
        assert_eq!(report.get(GroupKey::All, TissueClass::Penumbra, m).unwrap().n, 1);
    }
    assert_eq!(report.get(GroupKey::All, TissueClass::Penumbra, Metric::DeltaV).unwrap().n, 2);
}

#[test]
fn report_csv_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = Spacing::new(1.0, 1.0, 5.0);
    let per: Vec<_> = (0..5)
        .map(|i| {
            let group = [SeverityGroup::Lvo, SeverityGroup::NonLvo, SeverityGroup::Wis][i % 3];
            let gt = if group == SeverityGroup::Wis { LabelVolume::healthy((2, 6, 6)) } else { random_volume(&mut rng, (2, 6, 6), 0.2) };
            let p = random_volume(&mut rng, (2, 6, 6), 0.2);
            evaluate_patient(&format!("p{i}"), group, &p, &gt, s, HausdorffMode::Exact).unwrap()
        })
        .collect();
    let report = aggregate(&per).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    report.write_csv(&path).unwrap();
    let back = MetricsReport::read_csv(&path).unwrap();
    assert_eq!(back, report);
}

#[test]
fn interobserver_substitution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = Spacing::new(1.0, 1.0, 5.0);
    let a = random_volume(&mut rng, (2, 6, 6), 0.3);
    let b = random_volume(&mut rng, (2, 6, 6), 0.3);
    let case = ObserverCase {
        patient_id: "p".into(),
        group: SeverityGroup::Lvo,
        spacing: s,
        pred: a.clone(),
        joint: None,
        truth_a: Some(a.clone()),
        truth_b: Some(b.clone()),
    };
    let r = interobserver_report(&[case.clone()], HausdorffMode::Exact).unwrap();
    let pa = &r.patients(Pairing::PredVsA).unwrap()[0];
    assert_eq!(pa.penumbra.dice, 1.0);
    assert_eq!(pa.core.delta_v_ml, 0.0);
    let pb = &r.patients(Pairing::PredVsB).unwrap()[0];
    let ab = &r.patients(Pairing::AVsB).unwrap()[0];
    assert_eq!(pb.penumbra, ab.penumbra);
    assert_eq!(pb.core, ab.core);
    // joint truth falls back to the voxelwise intersection
    let pj = &r.patients(Pairing::PredVsJoint).unwrap()[0];
    let cons = LabelVolume::consensus(&a, &b);
    assert_eq!(pj.penumbra.dice, dice(&a, &cons, TissueClass::Penumbra).unwrap());

    let same = ObserverCase { truth_b: Some(a.clone()), ..case.clone() };
    let r = interobserver_report(&[same], HausdorffMode::Exact).unwrap();
    let ab = &r.patients(Pairing::AVsB).unwrap()[0];
    assert_eq!((ab.penumbra.dice, ab.penumbra.delta_v_ml), (1.0, 0.0));
    assert_eq!(ab.penumbra.hausdorff_mm, Some(0.0));

    let missing = ObserverCase { truth_b: None, ..case };
    assert!(matches!(
        interobserver_report(&[missing], HausdorffMode::Exact),
        Err(MetricsError::MissingAnnotator { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn hausdorff_matches_brute_force(seed in any::<u64>(), h in 1usize..7, w in 1usize..7, s in 1usize..3,
                                     sr in 0.5f64..2.0, sc in 0.5f64..2.0, ss in 1.0f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spacing = Spacing::new(sr, sc, ss);
        let a = random_volume(&mut rng, (s, h, w), 0.35);
        let b = random_volume(&mut rng, (s, h, w), 0.35);
        for class in TissueClass::LESIONS {
            let got = hausdorff(&a, &b, class, spacing).unwrap();
            let want = brute_hausdorff(&a, &b, class, spacing);
            match (got, want) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-9 * y.max(1.0), "{x} vs {y}"),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn dice_matches_counts_symmetry_and_tversky(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_volume(&mut rng, (2, 5, 5), 0.4);
        let b = random_volume(&mut rng, (2, 5, 5), 0.4);
        for class in TissueClass::LESIONS {
            let d = dice(&a, &b, class).unwrap();
            prop_assert_eq!(d, count_dice(&a, &b, class));
            prop_assert_eq!(d, dice(&b, &a, class).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            let p = one_hot(a.labels().as_slice().unwrap());
            let g = one_hot(b.labels().as_slice().unwrap());
            if b.count(class) + a.count(class) > 0 {
                let ti = tversky_index(p.view(), g.view(), class.index(), 0.5, 0.5, 1e-300).unwrap();
                prop_assert!((d - ti).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hausdorff_symmetry_and_triangle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Spacing::new(1.0, 1.3, 4.0);
        let p = random_volume(&mut rng, (2, 5, 5), 0.4);
        let q = random_volume(&mut rng, (2, 5, 5), 0.4);
        let g = random_volume(&mut rng, (2, 5, 5), 0.4);
        let c = TissueClass::Penumbra;
        let pg = hausdorff(&p, &g, c, s).unwrap();
        prop_assert_eq!(pg, hausdorff(&g, &p, c, s).unwrap());
        if let (Some(pg), Some(pq), Some(qg)) = (pg, hausdorff(&p, &q, c, s).unwrap(), hausdorff(&q, &g, c, s).unwrap()) {
            prop_assert!(pg <= pq + qg + 1e-9);
        }
    }

    #[test]
    fn volume_difference_is_nonnegative_and_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Spacing::new(0.9, 0.9, 5.0);
        let a = random_volume(&mut rng, (2, 4, 4), 0.5);
        let b = random_volume(&mut rng, (2, 4, 4), 0.5);
        let x = volume_difference(&a, &b, TissueClass::Core, s).unwrap();
        prop_assert!(x >= 0.0);
        prop_assert_eq!(x, volume_difference(&b, &a, TissueClass::Core, s).unwrap());
    }
}
