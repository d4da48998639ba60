//! Stage separation: analysis stages re-reading CSV dumps must reproduce the
//! in-process pipeline exactly (floats are written in shortest round-trip
//! form, so nothing is lost on disk).

use interflow::config::{build_experiment, ExperimentConfig};
use interflow::runner::{
    run_experiment, stage_intermittency, stage_lyapunov, stage_moments, stage_simulate, Summary,
};

fn small_config() -> ExperimentConfig {
    serde_json::from_value(serde_json::json!({
        "model": {
            "d": 1,
            "kernel": {"variant": "linear", "a_mat": [[1.0]], "alpha": 1.0},
            "diffusion": {
                "kernels": [{"variant": "mean_reverting", "c_mat": [[0.3]], "d_mat": [[0.0]]}]
            }
        },
        "density": {"variant": "uniform_box", "support": [[0.0, 1.0]]},
        "sim": {
            "dt": 0.001, "t_horizon": 2.0, "particles": 16, "replicas": 4,
            "seed": 11, "save_every": 100, "grid_per_axis": 16
        },
        "analysis": {"p_grid": [1.5, 2.0, 3.0, 4.0]}
    }))
    .unwrap()
}

#[test]
fn staged_pipeline_matches_in_process_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let staged_dir = tempfile::tempdir().unwrap();

    let exp = build_experiment(small_config()).unwrap();
    run_experiment(&exp, full_dir.path()).unwrap();

    let exp2 = build_experiment(small_config()).unwrap();
    let (_trajs, failures) = stage_simulate(&exp2, staged_dir.path()).unwrap();
    assert!(failures.is_empty());
    stage_moments(staged_dir.path()).unwrap();
    let lyap = stage_lyapunov(staged_dir.path()).unwrap();
    let inter = stage_intermittency(staged_dir.path()).unwrap();

    // Identical CSV bytes out of both paths.
    for file in ["trajectory.csv", "particles.csv", "moments.csv", "moments_by_replica.csv", "profile.csv"] {
        let a = std::fs::read(full_dir.path().join(file)).unwrap();
        let b = std::fs::read(staged_dir.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between staged and in-process runs");
    }

    // Identical estimates after the CSV round trip.
    let summary: Summary =
        serde_json::from_str(&std::fs::read_to_string(full_dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.lambda_hat, Some(lyap.lambda_hat));
    assert_eq!(summary.lambda_stderr, Some(lyap.stderr));
    let full_slope = summary.slope_fit.as_ref().unwrap().slope;
    assert_eq!(full_slope, inter.fit.slope_fit.slope);
    assert_eq!(
        summary.verdict.as_deref() == Some("intermittent"),
        inter.verdict.as_ref().unwrap().is_intermittent
    );
}

#[test]
fn stages_demand_their_inputs() {
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        stage_moments(empty.path()),
        Err(interflow::Error::StageDependency(_))
    ));
    assert!(matches!(
        stage_lyapunov(empty.path()),
        Err(interflow::Error::StageDependency(_))
    ));

    // simulate alone is not enough for the intermittency stage.
    let dir = tempfile::tempdir().unwrap();
    let exp = build_experiment(small_config()).unwrap();
    stage_simulate(&exp, dir.path()).unwrap();
    assert!(matches!(
        stage_intermittency(dir.path()),
        Err(interflow::Error::StageDependency(_))
    ));
}

#[test]
fn replica_failures_are_recorded_not_fatal() {
    // A coarse step under strong noise flips det(J) for some replica; the
    // run completes, records the failure, and keeps the healthy replicas.
    let mut config = small_config();
    config.sim.dt = 0.25;
    config.sim.t_horizon = 50.0;
    config.sim.save_every = Some(8);
    config.sim.replicas = 8;
    config.model.diffusion.kernels[0].c_mat = Some(vec![vec![1.9]]);
    let exp = build_experiment(config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_experiment(&exp, dir.path()).unwrap();
    assert!(
        !manifest.replica_failures.is_empty(),
        "expected at least one determinant-sign failure under coarse stepping"
    );
    let summary: Summary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.replica_failures.len(), manifest.replica_failures.len());
    assert!(summary.replica_failures[0].error.contains("det(J)"));
}

#[test]
fn total_failure_marks_estimators_unavailable() {
    // Noise so violent that every replica flips det(J) within a few steps.
    let mut config = small_config();
    config.sim.dt = 0.25;
    config.sim.t_horizon = 50.0;
    config.sim.save_every = Some(8);
    config.sim.replicas = 4;
    config.model.diffusion.kernels[0].c_mat = Some(vec![vec![20.0]]);
    let exp = build_experiment(config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_experiment(&exp, dir.path()).unwrap();
    assert_eq!(manifest.replica_failures.len(), 4);
    let summary: Summary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.verdict, None);
    assert_eq!(summary.lambda_hat, None);
    assert!(summary.warnings.iter().any(|w| w.contains("all replicas failed")));
}
