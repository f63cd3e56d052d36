use proptest::prelude::*;
use strokeseg::dataset::{load_manifest, load_patient, SeverityGroup, TissueClass};
use strokeseg::synthgen::{
    brain_fractions, default_fractions, generate_cohort, generate_phantom, generate_studies, nihss_range, CohortSpec,
    PhantomSpec, PhantomTemplate, SynthError,
};

fn realized(spec: &PhantomSpec) -> ([f64; 3], usize) {
    let p = generate_phantom(spec).unwrap();
    let n = p.brain.iter().filter(|&&b| b).count();
    (brain_fractions(p.study.ground_truth.as_ref().unwrap(), &p.brain), n)
}

#[test]
fn same_seed_gives_identical_studies() {
    let spec = PhantomSpec::new(SeverityGroup::Lvo, 4, 32, 32, 11);
    let a = generate_phantom(&spec).unwrap();
    let b = generate_phantom(&spec).unwrap();
    assert_eq!(a.study.maps.cbf, b.study.maps.cbf);
    assert_eq!(a.study.maps.tmax, b.study.maps.tmax);
    assert_eq!(a.study.mip.0, b.study.mip.0);
    assert_eq!(a.study.ground_truth, b.study.ground_truth);
    assert_eq!(a.study.nihss, b.study.nihss);

    let other = generate_phantom(&PhantomSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(a.study.maps.cbf, other.study.maps.cbf);
}

#[test]
fn cohort_generation_is_deterministic() {
    let spec = CohortSpec::new(2, 1, 1, PhantomTemplate { slices: 2, height: 24, width: 24, ..Default::default() }, 5);
    let a = generate_studies(&spec).unwrap();
    let b = generate_studies(&spec).unwrap();
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.patient_id, y.patient_id);
        assert_eq!(x.ground_truth, y.ground_truth);
        assert_eq!(x.maps.ttp, y.maps.ttp);
    }
    let groups: Vec<_> = a.iter().map(|s| s.group).collect();
    assert_eq!(groups, vec![SeverityGroup::Lvo, SeverityGroup::Lvo, SeverityGroup::NonLvo, SeverityGroup::Wis]);
}

#[test]
fn default_lvo_fractions_are_met() {
    for seed in 0..5 {
        let spec = PhantomSpec::new(SeverityGroup::Lvo, 8, 64, 64, seed);
        let (f, n) = realized(&spec);
        let target = default_fractions(SeverityGroup::Lvo);
        for c in 0..3 {
            assert!((f[c] - target[c]).abs() <= 1.0 / n as f64 + 1e-12, "seed {seed}: {f:?} vs {target:?}");
        }
    }
}

#[test]
fn wis_phantoms_are_all_healthy() {
    let mut spec = PhantomSpec::new(SeverityGroup::Wis, 4, 32, 32, 3);
    spec.target_fractions = [0.8, 0.15, 0.05];
    let p = generate_phantom(&spec).unwrap();
    let gt = p.study.ground_truth.unwrap();
    assert_eq!(gt.count(TissueClass::Penumbra) + gt.count(TissueClass::Core), 0);
}

#[test]
fn nihss_is_within_group_range() {
    for group in SeverityGroup::ALL {
        let (lo, hi) = nihss_range(group);
        for seed in 0..10 {
            let s = generate_phantom(&PhantomSpec::new(group, 2, 16, 16, seed)).unwrap().study;
            let n = s.nihss.unwrap();
            assert!((lo..=hi).contains(&n), "{group:?} {n}");
        }
    }
}

#[test]
fn annotators_differ_from_truth_near_the_boundary() {
    let mut spec = PhantomSpec::new(SeverityGroup::Lvo, 4, 48, 48, 2);
    spec.annotators = true;
    let s = generate_phantom(&spec).unwrap().study;
    let gt = s.ground_truth.as_ref().unwrap();
    let nr1 = &s.annotator_truths["NR1"];
    let nr2 = &s.annotator_truths["NR2"];
    assert!(nr1.count(TissueClass::Penumbra) < gt.count(TissueClass::Penumbra));
    assert!(nr2.count(TissueClass::Penumbra) > gt.count(TissueClass::Penumbra));
    assert_eq!(nr1.count(TissueClass::Core), gt.count(TissueClass::Core));
}

#[test]
fn invalid_specs_are_rejected() {
    let base = PhantomSpec::new(SeverityGroup::Lvo, 4, 32, 32, 1);
    let cases = [
        PhantomSpec { slices: 0, ..base.clone() },
        PhantomSpec { height: 4, ..base.clone() },
        PhantomSpec { noise_level: -1.0, ..base.clone() },
        PhantomSpec { target_fractions: [0.5, 0.3, 0.3], ..base.clone() },
    ];
    for spec in cases {
        assert!(matches!(generate_phantom(&spec), Err(SynthError::InvalidSpec(_))), "{spec:?}");
    }
    let too_big = PhantomSpec { target_fractions: [0.3, 0.4, 0.3], ..base.clone() };
    assert!(matches!(generate_phantom(&too_big), Err(SynthError::LesionDoesNotFit(_))));
    let inverted = PhantomSpec { target_fractions: [0.9, 0.02, 0.08], ..base };
    assert!(matches!(generate_phantom(&inverted), Err(SynthError::InfeasibleFractions { .. })));
}

#[test]
fn empty_cohort_is_rejected() {
    let spec = CohortSpec::new(0, 0, 0, PhantomTemplate::default(), 0);
    assert!(generate_studies(&spec).is_err());
}

#[test]
fn written_cohort_reloads_with_identical_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = CohortSpec::new(1, 1, 0, PhantomTemplate { slices: 3, height: 32, width: 32, ..Default::default() }, 9);
    spec.annotators = true;
    generate_cohort(&spec, dir.path()).unwrap();
    let m = load_manifest(&dir.path().join("manifest.json")).unwrap();
    let studies = generate_studies(&spec).unwrap();
    for s in &studies {
        let back = load_patient(&m, &s.patient_id).unwrap();
        assert_eq!(back.ground_truth, s.ground_truth);
        assert_eq!(back.annotator_truths, s.annotator_truths);
        assert_eq!(back.maps.cbf, s.maps.cbf);
        assert_eq!(back.mip.0, s.mip.0);
        assert_eq!(back.spacing, s.spacing);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lesion_lies_inside_brain_and_core_inside_lesion(seed in any::<u64>(), pen in 0.02f64..0.15, core_share in 0.0f64..0.5) {
        let core = pen * core_share;
        let mut spec = PhantomSpec::new(SeverityGroup::Lvo, 3, 32, 32, seed);
        spec.target_fractions = [1.0 - pen - core, pen, core];
        match generate_phantom(&spec) {
            Ok(p) => {
                let gt = p.study.ground_truth.unwrap();
                for ((z, y, x), &l) in gt.labels().indexed_iter() {
                    if l > 0 {
                        prop_assert!(p.brain[(z, y, x)]);
                    }
                    if l == 2 {
                        let (_, h, w) = gt.dims();
                        prop_assert!(y > 0 && x > 0 && y + 1 < h && x + 1 < w);
                        for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                            let v = gt.labels()[(z, (y as i64 + dy) as usize, (x as i64 + dx) as usize)];
                            prop_assert!(v > 0);
                        }
                    }
                }
                for ((z, y, x), &b) in p.brain.indexed_iter() {
                    if !b {
                        prop_assert!(p.study.maps.cbf.slice(ndarray::s![z, y, x, ..]).iter().all(|v| *v == 0.0));
                    }
                }
            }
            Err(SynthError::LesionDoesNotFit(_)) => {}
            Err(e) => prop_assert!(false, "unexpected error {}", e),
        }
    }

    #[test]
    fn realized_fractions_track_targets(seed in any::<u64>(), pen in 0.02f64..0.2, core_share in 0.0f64..0.3) {
        let core = pen * core_share;
        let mut spec = PhantomSpec::new(SeverityGroup::NonLvo, 4, 40, 40, seed);
        spec.target_fractions = [1.0 - pen - core, pen, core];
        if let Ok(p) = generate_phantom(&spec) {
            let n = p.brain.iter().filter(|&&b| b).count() as f64;
            let f = brain_fractions(p.study.ground_truth.as_ref().unwrap(), &p.brain);
            for c in 0..3 {
                prop_assert!((f[c] - spec.target_fractions[c]).abs() <= 1.0 / n + 1e-12);
            }
        }
    }
}
