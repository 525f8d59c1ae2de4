use std::sync::Arc;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::synth::WorldSpec;
use crate::testkit;
use crate::towers::EncoderConfig;

use Modality::{Audio, Image, Video};

fn oracle_matrix(modalities: &[Modality]) -> AccuracyMatrix {
    AccuracyMatrix::from_rows(
        modalities,
        vec![vec![0.9], vec![0.8, 0.7], vec![0.6, 0.5, 0.9]],
    )
    .unwrap()
}

#[test]
fn metrics_match_hand_computed_example() {
    let r = compute_metrics(&oracle_matrix(&[Image; 3])).unwrap();
    // step means 0.9, 0.75, 2/3
    let aia = (0.9 + 0.75 + 2.0 / 3.0) / 3.0;
    assert_abs_diff_eq!(r.pooled.aia, aia, epsilon = 1e-12);
    assert_abs_diff_eq!(r.pooled.faa, 2.0 / 3.0, epsilon = 1e-12);
    // (0.9 - 0.6 + 0.7 - 0.5) / 2
    assert_abs_diff_eq!(r.pooled.forgetting, 0.25, epsilon = 1e-12);
    assert!(r.pooled.forgetting_defined);
    assert_eq!(r.overall, r.pooled);
    assert_eq!(r.per_modality.len(), 1);
    assert_eq!(r.faa_by_step.len(), 3);
    assert_abs_diff_eq!(r.faa_by_step[1], 0.75, epsilon = 1e-12);
}

#[test]
fn per_modality_windows_start_at_first_task() {
    let r = compute_metrics(&oracle_matrix(&[Image, Audio, Image])).unwrap();
    let img = r.per_modality[&Image];
    // image units 1 and 3: means 0.9, 0.8, 0.75
    assert_abs_diff_eq!(img.aia, (0.9 + 0.8 + 0.75) / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(img.faa, 0.75, epsilon = 1e-12);
    assert_abs_diff_eq!(img.forgetting, 0.3, epsilon = 1e-12);
    let aud = r.per_modality[&Audio];
    // audio window covers steps 2 and 3 only
    assert_abs_diff_eq!(aud.aia, 0.6, epsilon = 1e-12);
    assert_abs_diff_eq!(aud.faa, 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(aud.forgetting, 0.2, epsilon = 1e-12);
    assert_abs_diff_eq!(r.overall.faa, (0.75 + 0.5) / 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(r.overall.forgetting, 0.25, epsilon = 1e-12);
    assert_eq!(r.modality_faa_by_step[&Audio][0], None);
}

#[test]
fn single_task_has_no_forgetting() {
    let m = AccuracyMatrix::from_rows(&[Video], vec![vec![0.4]]).unwrap();
    let r = compute_metrics(&m).unwrap();
    assert_eq!(r.pooled.forgetting, 0.0);
    assert!(!r.pooled.forgetting_defined);
    assert!(!r.overall.forgetting_defined);
    assert_abs_diff_eq!(r.pooled.aia, 0.4);
}

#[test]
fn modality_seen_only_at_the_end_has_no_forgetting() {
    let m = AccuracyMatrix::from_rows(&[Image, Audio], vec![vec![0.5], vec![0.4, 0.8]]).unwrap();
    let r = compute_metrics(&m).unwrap();
    assert!(!r.per_modality[&Audio].forgetting_defined);
    assert!(r.per_modality[&Image].forgetting_defined);
    assert_abs_diff_eq!(r.overall.forgetting, 0.1, epsilon = 1e-12);
}

#[test]
fn incomplete_or_malformed_matrices_are_rejected() {
    let mut m = AccuracyMatrix::from_rows(&[Image, Audio], vec![vec![0.5]]).unwrap();
    assert!(matches!(compute_metrics(&m), Err(Error::Usage(_))));
    assert!(m.push_row(vec![0.5]).is_err());
    assert!(m.push_row(vec![0.5, 1.5]).is_err());
    m.push_row(vec![0.5, 1.0]).unwrap();
    assert!(compute_metrics(&m).is_ok());
}

fn lower_triangular() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..7).prop_flat_map(|n| {
        (1..=n)
            .map(|t| proptest::collection::vec(0.0f64..=1.0, t))
            .collect::<Vec<_>>()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_stay_in_range(rows in lower_triangular(), mods in proptest::collection::vec(0usize..4, 6)) {
        let ms: Vec<Modality> = (0..rows.len()).map(|i| Modality::ALL[mods[i]]).collect();
        let r = compute_metrics(&AccuracyMatrix::from_rows(&ms, rows).unwrap()).unwrap();
        for x in r.per_modality.values().chain([&r.overall, &r.pooled]) {
            prop_assert!((0.0..=1.0).contains(&x.aia));
            prop_assert!((0.0..=1.0).contains(&x.faa));
            prop_assert!((-1.0..=1.0).contains(&x.forgetting));
        }
    }

    #[test]
    fn constant_matrix_gives_constant_metrics(n in 1usize..8, c in 0.0f64..=1.0) {
        let rows = (1..=n).map(|t| vec![c; t]).collect();
        let r = compute_metrics(&AccuracyMatrix::from_rows(&vec![Image; n], rows).unwrap()).unwrap();
        prop_assert!((r.pooled.aia - c).abs() < 1e-12);
        prop_assert!((r.pooled.faa - c).abs() < 1e-12);
        prop_assert!(r.pooled.forgetting.abs() < 1e-12);
    }

    #[test]
    fn non_decreasing_accuracy_never_forgets(rows in lower_triangular()) {
        // make every column non-decreasing down the rows
        let mut rows = rows;
        for t in 1..rows.len() {
            for u in 0..t {
                rows[t][u] = rows[t][u].max(rows[t - 1][u]);
            }
        }
        let n = rows.len();
        let r = compute_metrics(&AccuracyMatrix::from_rows(&vec![Image; n], rows).unwrap()).unwrap();
        prop_assert!(r.pooled.forgetting <= 1e-12);
    }
}

#[test]
fn config_parses_and_rejects_unknown_fields() {
    let c: RunConfig = serde_json::from_str(r#"{"method": {"name": "ft"}, "train": {"epochs": 3}}"#).unwrap();
    assert_eq!(c.method.name, Method::Ft);
    assert_eq!(c.train.epochs, 3);
    assert_eq!(c.label(), "ft");
    assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
    let mut c = RunConfig::default();
    c.ablate("no-self").unwrap();
    assert!(!c.comm_config().self_reg);
    assert_eq!(c.label(), "comm-no-self");
    assert!(c.ablate("no-gate").is_err());
    c.train.batch_size = 0;
    assert!(c.validate().is_err());
}

fn small_world() -> World {
    let spec = WorldSpec {
        cl_classes: 4,
        subsets: 2,
        train_per_class: 12,
        test_per_class: 6,
        ..Default::default()
    };
    World::build(&spec, &EncoderConfig::default()).unwrap()
}

fn small_config(method: Method, scenario: Scenario) -> RunConfig {
    let mut c = RunConfig::default();
    c.method.name = method;
    c.method.gate_steps = 20;
    c.method.realign_steps = 10;
    c.train.epochs = 1;
    c.train.scenario = scenario;
    c
}

fn run(world: &World, config: RunConfig) -> RunResult {
    let bb = Arc::new(testkit::backbone().clone());
    let mut r = Runner::new(world, bb, config).unwrap();
    r.run_all().unwrap();
    r.result().unwrap()
}

#[test]
fn end_to_end_run_fills_matrices_and_is_deterministic() {
    let world = small_world();
    let a = run(&world, small_config(Method::Comm, Scenario::Random));
    assert_eq!(a.log.len(), 8);
    for m in a.matrices.values() {
        assert!(m.is_complete());
        assert_eq!(m.units.len(), 8);
    }
    assert_eq!(a.reports.len(), 2);
    // totals grow exactly at the steps that bring a new modality
    let mut seen = Vec::new();
    for (i, log) in a.log.iter().enumerate() {
        let fresh = log.modalities.iter().any(|m| !seen.contains(m));
        seen.extend(log.modalities.iter().copied());
        if i > 0 {
            assert_eq!(a.params[i].total > a.params[i - 1].total, fresh, "step {}", i + 1);
            assert!(a.params[i].total >= a.params[i - 1].total);
        }
    }
    let b = run(&world, small_config(Method::Comm, Scenario::Random));
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(Method::Comm, Scenario::Random);
    write_outputs(dir.path(), &cfg, &a).unwrap();
    let first = std::fs::read(dir.path().join(METRICS_FILE)).unwrap();
    write_outputs(dir.path(), &cfg, &b).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join(METRICS_FILE)).unwrap());
    let back = read_metrics(dir.path()).unwrap();
    assert!(back.complete);
    assert_eq!(back.reports, a.reports);
    let csv = std::fs::read_to_string(dir.path().join(ACCURACY_FILE)).unwrap();
    // header plus 2 modes times (1 + 2 + ... + 8) entries
    assert_eq!(csv.lines().count(), 1 + 2 * 36);
}

#[test]
fn simultaneous_steps_hold_one_unit_per_modality() {
    let world = small_world();
    let r = run(&world, small_config(Method::Ft, Scenario::Simultaneous));
    assert_eq!(r.log.len(), 2);
    let m = &r.matrices[&EvalMode::Specific];
    assert_eq!(m.rows[0].len(), 4);
    assert_eq!(m.rows[1].len(), 8);
    // the baseline's parameter count does not grow
    assert_eq!(r.params[0].total, r.params[1].total);
}

#[test]
fn stepping_past_the_end_is_a_usage_error() {
    let world = small_world();
    let bb = Arc::new(testkit::backbone().clone());
    let mut c = small_config(Method::Ft, Scenario::Simultaneous);
    c.eval.mode = EvalModes::Specific;
    let mut r = Runner::new(&world, bb, c).unwrap();
    r.step().unwrap();
    assert!(r.result().unwrap().reports.is_empty());
    r.step().unwrap();
    assert!(r.is_done());
    assert!(matches!(r.step(), Err(Error::Usage(_))));
}
