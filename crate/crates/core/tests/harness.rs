mod common;

use std::fs;
use std::process::Command;

use flguard::artifact::{EVENTS_HEADER, METRICS_HEADER, TRAJECTORY_HEADER};
use flguard::config::{nfl_default, parse_config, DataSource, Mode, SUMMARY_ROUNDS};
use flguard::model::ModelSpec;
use flguard::{compare_dirs, load_config, load_run, run_simulation, run_to_dir, Error, EventKind, SimConfig};
use std::path::Path;

fn small(mode: Mode) -> SimConfig {
    let mut c = nfl_default();
    c.num_clients = 20;
    c.rounds = 60;
    c.negative_rounds = 5;
    c.window = 5;
    c.mode = mode;
    c.data = DataSource::Synthetic {
        class_count: 4,
        dim: 6,
        per_class: 150,
        spread: 0.6,
    };
    c.model = ModelSpec::softmax_regression(6, 4);
    c
}

#[test]
fn minimal_config_takes_defaults() {
    let c = parse_config("seed = 9\n", Path::new("inline")).unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.window, 50);
    assert_eq!(c.negative_rounds, 50);
    assert_eq!(c.mode, Mode::DetectRecover);
    assert_eq!(c.active(), 10);
}

#[test]
fn invalid_configs_name_the_offending_key() {
    let err = parse_config("num_clients = 5\nactive_clients = 6\n", Path::new("inline")).unwrap_err();
    assert!(err.to_string().contains("active_clients (K)"), "{err}");
    let err = parse_config("windw = 5\n", Path::new("inline")).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }));
    assert!(err.to_string().contains("windw"), "{err}");
    let err = parse_config("mode = \"sometimes\"\n", Path::new("inline")).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }));
}

#[test]
fn config_round_trip_is_idempotent() {
    for c in [nfl_default(), small(Mode::ShortTerm), flguard::config::partial_adapt(1)] {
        let text = c.to_toml();
        let back = parse_config(&text, Path::new("inline")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }
}

#[test]
fn run_directory_layout_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let run = run_to_dir(&small(Mode::DetectRecover), 1, &out).unwrap();
    for f in ["config.toml", "metrics.csv", "events.csv", "trajectory.csv", "manifest.json", "summary.csv", "final_models.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let first_line = |f: &str| fs::read_to_string(out.join(f)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(first_line("metrics.csv"), METRICS_HEADER);
    assert_eq!(first_line("events.csv"), EVENTS_HEADER);
    assert_eq!(first_line("trajectory.csv"), TRAJECTORY_HEADER);
    assert_eq!(load_config(&out.join("config.toml")).unwrap(), small(Mode::DetectRecover).resolved());

    let record = load_run(&out).unwrap();
    assert_eq!(record.metrics, run.metrics);
    assert_eq!(record.metrics.len(), 60);

    // Summary values are plain means over the last evaluated rounds.
    let evaluated: Vec<_> = run.metrics.iter().filter(|m| m.acc.is_some()).collect();
    let tail = &evaluated[evaluated.len() - SUMMARY_ROUNDS..];
    let mean = |f: &dyn Fn(&flguard::RoundMetrics) -> f64| tail.iter().map(|m| f(m)).sum::<f64>() / tail.len() as f64;
    let s = run.summary();
    assert!((s.acc.unwrap() - mean(&|m| m.acc.unwrap())).abs() < 1e-12);
    assert!((s.beta_true.unwrap() - mean(&|m| m.beta_true.unwrap())).abs() < 1e-12);
    assert!((s.beta_guard.unwrap() - mean(&|m| m.beta_guard.unwrap())).abs() < 1e-12);
    assert_eq!(record.summary, s);
}

#[test]
fn comparing_a_run_with_itself() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_to_dir(&small(Mode::DetectRecover), 1, &a).unwrap();
    run_to_dir(&small(Mode::DetectRecover), 2, &b).unwrap();
    let cmp = compare_dirs(&a, &b).unwrap();
    assert!(cmp.identical_trajectories && cmp.identical_metrics);
    assert_eq!(cmp.first_trajectory_divergence, None);
    assert_eq!(cmp.acc_delta, Some(0.0));
    assert_eq!(cmp.beta_true_delta, Some(0.0));

    let mut other = small(Mode::DetectRecover);
    other.seed += 1;
    let c = dir.path().join("c");
    run_to_dir(&other, 1, &c).unwrap();
    assert!(!compare_dirs(&a, &c).unwrap().identical_trajectories);
}

#[test]
fn metrics_are_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let read = |w: usize| {
        let out = dir.path().join(format!("w{w}"));
        run_to_dir(&small(Mode::DetectRecover), w, &out).unwrap();
        (fs::read(out.join("metrics.csv")).unwrap(), fs::read(out.join("events.csv")).unwrap())
    };
    let one = read(1);
    assert_eq!(read(4), one);
    assert_eq!(read(8), one);
}

#[test]
fn round_level_events_agree_with_metrics() {
    let run = run_simulation(&small(Mode::DetectRecover), 1).unwrap();
    for m in &run.metrics {
        let kinds: Vec<&str> = run
            .events
            .iter()
            .filter(|e| e.round == m.round && e.kind.is_round_level())
            .map(|e| e.kind.as_str())
            .collect();
        assert_eq!(m.event, kinds.join(";"), "round {}", m.round);
    }
    let mut flag = false;
    for m in &run.metrics {
        if run.rounds_of(EventKind::Report).contains(&m.round) {
            flag = true;
        }
        if run.rounds_of(EventKind::Cancel).contains(&m.round) {
            flag = false;
        }
        assert_eq!(m.nfl_flag, flag, "round {}", m.round);
    }
}

#[test]
fn short_term_stops_adapting_after_first_cancel() {
    let mut c = small(Mode::ShortTerm);
    c.rounds = 150;
    let run = run_simulation(&c, 1).unwrap();
    if let Some(stop) = run.rounds_of(EventKind::RecoveryStopped).first().copied() {
        assert_eq!(run.rounds_of(EventKind::Cancel).first(), Some(&stop));
        assert!(!run.events.iter().any(|e| e.kind == EventKind::AdaptSteps && e.round > stop));
        assert_eq!(run.summary().adapt_steps_after_stop, 0);
    }
}

#[test]
fn cli_smoke() {
    let exe = env!("CARGO_BIN_EXE_flguard");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, small(Mode::Fedavg).to_toml()).unwrap();
    let out = dir.path().join("run");
    let status = Command::new(exe)
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "4", "--mode", "detect_recover", "--workers", "2", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let echoed = load_config(&out.join("config.toml")).unwrap();
    assert_eq!((echoed.seed, echoed.mode), (4, Mode::DetectRecover));

    let cmp = Command::new(exe).arg("compare").arg(&out).arg(&out).output().unwrap();
    assert!(cmp.status.success());
    let list = Command::new(exe).args(["presets", "list"]).output().unwrap();
    assert!(String::from_utf8_lossy(&list.stdout).contains("nfl_default"));
    let bad = Command::new(exe).args(["run", "--preset", "nope", "--out"]).arg(dir.path().join("x")).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
