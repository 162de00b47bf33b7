use hsa_core::data::{
    build_sessions, choose_held_out, loso_plans, majority_label, prepare_split, synth_generate, NormStats, PlacementSeries,
    SensorSeries, SessionConfig, SplitPlan, SynthConfig,
};
use hsa_core::rng_from_seed;

fn ramp(len: usize, labels: Vec<u32>) -> SensorSeries {
    SensorSeries::new(
        "a".into(),
        25.0,
        vec![
            PlacementSeries { name: "wrist".into(), channels: vec!["x".into()], values: (0..len).map(|t| t as f64).collect() },
            PlacementSeries { name: "ankle".into(), channels: vec!["x".into(), "y".into()], values: (0..2 * len).map(|i| -(i as f64)).collect() },
        ],
        labels,
    )
    .unwrap()
}

#[test]
fn segmentation_hand_example() {
    let s = ramp(100, (0..100).map(|t| u32::from(t >= 60)).collect());
    let cfg = SessionConfig { window_len: 10, windows_per_session: 2, stride: Some(10), null_label: None };
    let sessions = build_sessions(&s, &cfg).unwrap();
    assert_eq!(sessions.len(), 9);
    assert_eq!(sessions[3].start, 30);
    assert_eq!(sessions[3].id, "a@30");
    let w = &sessions[3].windows[1];
    assert_eq!(w.placements[0].shape(), &[10, 1]);
    assert_eq!(w.placements[0].data()[0], 40.0);
    assert_eq!(w.placements[1].shape(), &[10, 2]);
    assert_eq!(&w.placements[1].data()[..2], &[-80.0, -81.0]);
    // windows [50,60) and [60,70): labels 0 and 1, tie goes to 0
    assert_eq!(sessions[5].window_labels, vec![0, 1]);
    assert_eq!(sessions[5].session_label, 0);
    assert_eq!(sessions[8].session_label, 1);

    let default_stride = SessionConfig { stride: None, ..cfg.clone() };
    assert_eq!(build_sessions(&s, &default_stride).unwrap().len(), 9);
    assert!(build_sessions(&ramp(19, vec![0; 19]), &cfg).unwrap().is_empty());
    let null = SessionConfig { null_label: Some(1), ..cfg };
    assert_eq!(build_sessions(&s, &null).unwrap().len(), 6);
}

#[test]
fn majority_label_breaks_ties_low() {
    assert_eq!(majority_label(&[3, 1, 3, 1]), Some(1));
    assert_eq!(majority_label(&[2, 2, 5]), Some(2));
    assert_eq!(majority_label(&[]), None);
}

fn synth_series() -> Vec<SensorSeries> {
    let cfg = SynthConfig { segment_len: 64, subject_scale: (0.5, 2.0), channel_offset: 3.0, ..SynthConfig::default() };
    synth_generate(&cfg, 21).unwrap()
}

#[test]
fn normalization_uses_training_subjects_only() {
    let series = synth_series();
    let plan = SplitPlan::subjects(&["s04"], &["s05"]);
    let cfg = SessionConfig { window_len: 16, windows_per_session: 2, stride: None, null_label: None };
    let split = prepare_split(&series, &plan, &cfg, true).unwrap();
    let train_only: Vec<SensorSeries> = series.iter().filter(|s| !["s04", "s05"].contains(&s.subject_id.as_str())).cloned().collect();
    assert_eq!(split.stats.as_ref().unwrap(), &NormStats::from_series(&train_only).unwrap());
    assert_ne!(split.stats.unwrap(), NormStats::from_series(&series).unwrap());
    assert!(split.train.iter().all(|s| !["s04", "s05"].contains(&s.subject_id.as_str())));
    assert!(split.val.iter().all(|s| s.subject_id == "s04"));
    assert!(split.test.iter().all(|s| s.subject_id == "s05"));
}

#[test]
fn held_out_classes_never_reach_training() {
    let series = synth_series();
    let held = choose_held_out(&[0, 1, 2, 3], 1, &mut rng_from_seed(42));
    let plan = SplitPlan { held_out_classes: held.clone(), ..SplitPlan::subjects(&["s04"], &["s05"]) };
    let cfg = SessionConfig { window_len: 16, windows_per_session: 2, stride: None, null_label: None };
    let split = prepare_split(&series, &plan, &cfg, true).unwrap();
    assert!(plan.is_openset());
    assert_eq!(split.held_out, held);
    assert_eq!(split.labels.len(), 3);
    assert!(split.labels.index(held[0]).is_none());
    for s in split.train.iter().chain(&split.val) {
        assert!(!s.window_labels.contains(&held[0]), "session {} leaks a held-out window", s.id);
    }
    let unseen = split.test.iter().filter(|s| s.session_label == held[0]).count();
    assert!(unseen > 0);
    assert!(split.test.iter().any(|s| s.subject_id != "s05" && s.session_label == held[0]));
}

#[test]
fn loso_rotates_validation_subject() {
    let series = synth_series();
    let plans = loso_plans(&series, true).unwrap();
    assert_eq!(plans.len(), 5);
    for (subject, plan) in &plans {
        let split = prepare_split(&series, plan, &SessionConfig::default(), false).unwrap();
        assert!(split.test.iter().all(|s| &s.subject_id == subject));
        assert!(!split.val.is_empty());
        assert!(split.val.iter().all(|s| &s.subject_id != subject));
    }
    assert!(loso_plans(&series[..1], true).is_err());
}
