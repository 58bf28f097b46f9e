use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use safe_mpc::config::{self, ExperimentConfig};
use safe_mpc::io;
use safe_mpc::sim::ControllerKind;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_safe-mpc"));
    cmd.env_remove("SAFE_MPC_THREADS");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Short single-obstacle Dubins experiment written to `dir/small.toml`.
fn small_config(dir: &Path) -> (PathBuf, ExperimentConfig) {
    let mut cfg = config::preset("dubins_single_obstacle").unwrap();
    cfg.task.horizon = 60;
    cfg.trial.episodes = 2;
    for t in cfg.mppi.iter_mut() {
        t.samples = 64;
    }
    for t in cfg.scmppi.iter_mut() {
        t.samples = 64;
    }
    let path = dir.join("small.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    (path, cfg)
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn presets_lists_every_bundled_config() {
    let out = run_ok(bin().arg("presets"));
    let text = String::from_utf8(out.stdout).unwrap();
    let names = config::preset_names();
    assert!(names.len() >= 4);
    for name in names {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }
}

#[test]
fn run_writes_trajectory_diagnostics_and_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg_path, cfg) = small_config(tmp.path());
    let out_dir = tmp.path().join("out");
    run_ok(
        bin()
            .args(["run", "--controller", "mppi", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir),
    );
    let dir = out_dir.join("mppi");
    let traj = io::read_csv(&dir.join("trajectory_run.csv")).unwrap();
    for col in ["t", "x", "y", "theta", "v", "omega", "beta", "min_h"] {
        assert!(
            traj.column(col).is_some(),
            "trajectory lacks `{col}`: {:?}",
            traj.header
        );
    }
    assert!(traj.rows.len() >= 2 && traj.rows.len() <= cfg.task.horizon + 1);
    let diag = io::read_csv(&dir.join("diagnostics_run.csv")).unwrap();
    assert_eq!(diag.rows.len() + 1, traj.rows.len());
    let stats = read_json(&dir.join("episode.json"));
    assert!(stats["completed"].is_boolean());
    assert!(stats["safety_violated"].is_boolean());
}

#[test]
fn trials_writes_summary_timing_and_episode_table() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg_path, _) = small_config(tmp.path());
    let out_dir = tmp.path().join("out");
    run_ok(
        bin()
            .args([
                "trials",
                "--controller",
                "scmppi",
                "--episodes",
                "2",
                "--config",
            ])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir),
    );
    let dir = out_dir.join("scmppi");
    let summary = read_json(&dir.join("summary.json"));
    assert_eq!(summary["controller"], "SC-MPPI");
    assert_eq!(summary["episodes"], 2);
    for key in [
        io::METRIC_VIOLATION,
        io::METRIC_COMPLETION,
        io::METRIC_RMSE,
        io::METRIC_SAFE_SAMPLES,
    ] {
        assert!(
            !summary["metrics"][key].is_null() || key == io::METRIC_RMSE,
            "missing {key}"
        );
    }
    assert!(read_json(&dir.join("timing.json"))[io::METRIC_COMPUTE_TIME].is_object());
    let episodes = std::fs::read_to_string(dir.join("episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 3);
    assert!(dir.join("trajectory_0001.csv").exists());
    assert!(!out_dir.join("mppi").exists());
}

#[test]
fn compare_reports_both_sampling_controllers() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg_path, _) = small_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let out = run_ok(
        bin()
            .args(["compare", "--episodes", "1", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir),
    );
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains(io::METRIC_SAFE_SAMPLES));
    let doc = read_json(&out_dir.join("compare.json"));
    for label in ["MPPI", "SC-MPPI"] {
        assert_eq!(doc[label]["controller"], label);
        assert_eq!(doc[label]["episodes"], 1);
    }
}

#[test]
fn plotdata_labels_agree_with_obstacle_margins() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg_path, cfg) = small_config(tmp.path());
    let out_dir = tmp.path().join("out");
    run_ok(
        bin()
            .args(["plotdata", "--controller", "mppi", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir),
    );
    let field = cfg.episode(ControllerKind::Mppi, 0).unwrap().field;
    let table = io::read_csv(&out_dir.join("mppi").join("samples.csv")).unwrap();
    let col = |name: &str| table.column(name).unwrap();
    let (step, sample, safe, k, x, y) = (
        col("step"),
        col("sample"),
        col("safe"),
        col("k"),
        col("x"),
        col("y"),
    );
    let mut traces: BTreeMap<(u64, u64), (bool, bool)> = BTreeMap::new();
    for row in &table.rows {
        let get = |i: usize| row[i].unwrap();
        let key = (get(step) as u64, get(sample) as u64);
        let labelled_safe = get(safe) == 1.0;
        let entry = traces.entry(key).or_insert((labelled_safe, true));
        assert_eq!(entry.0, labelled_safe, "label changes within trace {key:?}");
        if get(k) > 0.0 {
            entry.1 &= field.is_safe(&[get(x), get(y)]);
        }
    }
    assert!(!traces.is_empty());
    for (key, (labelled, actual)) in &traces {
        assert_eq!(labelled, actual, "trace {key:?}");
    }
}

#[test]
fn thread_count_does_not_change_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg_path, _) = small_config(tmp.path());
    let mut files = Vec::new();
    for threads in ["1", "2"] {
        let out_dir = tmp.path().join(format!("out{threads}"));
        run_ok(
            bin()
                .args([
                    "--threads",
                    threads,
                    "trials",
                    "--controller",
                    "scmppi",
                    "--seed",
                    "5",
                    "--config",
                ])
                .arg(&cfg_path)
                .arg("--out")
                .arg(&out_dir),
        );
        files.push(std::fs::read(out_dir.join("scmppi").join("summary.json")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let out = bin()
        .args(["run", "--config", "no_such_preset"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = bin().args(["--threads", "0", "presets"]).output().unwrap();
    assert!(!out.status.success());
    let out = bin()
        .args([
            "plotdata",
            "--controller",
            "ddp",
            "--config",
            "quad_lqr_barrier",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
