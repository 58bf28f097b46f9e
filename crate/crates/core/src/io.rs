//! CSV and JSON export of trajectories, diagnostics, sample clouds and trial summaries.
//!
//! Numbers are written with 17 significant digits so a re-parse reproduces
//! the `f64` exactly. Non-finite values are written as `inf`, `-inf` or `NaN`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::barrier::{BarrierConfig, ObstacleField};
use crate::dynamics::{Model, ModelKind, Trajectory};
use crate::error::{Error, Result};
use crate::sim::{
    barrier_profile, EpisodeStats, MetricStats, SampleCloud, StepDiagnostics, TrialSummary,
    RMSE_WINDOW_S,
};

pub const METRIC_COMPUTE_TIME: &str = "Compute Time (ms)";
pub const METRIC_VIOLATION: &str = "Safety Violation %";
pub const METRIC_COMPLETION: &str = "Task Completion %";
pub const METRIC_COMPLETION_TIME: &str = "Completion Time (s)";
pub const METRIC_RMSE: &str = "Position RMSE (m)";
pub const METRIC_AVG_VELOCITY: &str = "Avg Velocity (m/s)";
pub const METRIC_MAX_VELOCITY: &str = "Max Velocity (m/s)";
pub const METRIC_SAFE_SAMPLES: &str = "Safe Sample %";

pub fn state_names(kind: ModelKind) -> &'static [&'static str] {
    match kind {
        ModelKind::Dubins => &["x", "y", "theta"],
        ModelKind::Multirotor => &[
            "x", "y", "z", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "p", "q", "r",
        ],
        ModelKind::RigidQuadrotor => &[
            "x", "y", "z", "roll", "pitch", "yaw", "vx", "vy", "vz", "p", "q", "r",
        ],
    }
}

pub fn control_names(kind: ModelKind) -> &'static [&'static str] {
    match kind {
        ModelKind::Dubins => &["v", "omega"],
        ModelKind::Multirotor => &["p_des", "q_des", "r_des", "thrust"],
        ModelKind::RigidQuadrotor => &["f1", "f2", "f3", "f4"],
    }
}

/// Shortest decimal with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Header `t, <states>, <controls>, beta, min_h`.
pub fn trajectory_header(kind: ModelKind) -> String {
    let mut cols = vec!["t"];
    cols.extend_from_slice(state_names(kind));
    cols.extend_from_slice(control_names(kind));
    cols.push("beta");
    cols.push("min_h");
    cols.join(",")
}

/// One row per state. The control columns of the final state are empty.
pub fn trajectory_csv(
    traj: &Trajectory,
    model: &Model,
    field: &ObstacleField,
    barrier: &BarrierConfig,
) -> String {
    let mut out = trajectory_header(model.kind());
    out.push('\n');
    let m = control_names(model.kind()).len();
    let profile = barrier_profile(model, field, barrier, &traj.states);
    for (k, x) in traj.states.iter().enumerate() {
        let mut cols = vec![fmt_f64(k as f64 * model.dt())];
        cols.extend(x.iter().map(|v| fmt_f64(*v)));
        match traj.controls.get(k) {
            Some(u) => cols.extend(u.iter().map(|v| fmt_f64(*v))),
            None => cols.extend(std::iter::repeat_n(String::new(), m)),
        }
        let (beta, min_h) = profile[k];
        cols.push(fmt_f64(beta));
        cols.push(fmt_f64(min_h));
        let _ = writeln!(out, "{}", cols.join(","));
    }
    out
}

pub fn export_trajectory(
    traj: &Trajectory,
    model: &Model,
    field: &ObstacleField,
    barrier: &BarrierConfig,
    path: &Path,
) -> Result<()> {
    write_file(path, &trajectory_csv(traj, model, field, barrier))
}

/// Parsed CSV: header columns and rows (empty cells are `None`).
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn parse_csv(text: &str, path: &Path) -> Result<CsvTable> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format {
            path: path.into(),
            message: "missing header".into(),
        })?
        .split(',')
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>().map(Some).map_err(|e| Error::Format {
                        path: path.into(),
                        message: format!("line {}: `{c}`: {e}", i + 2),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(Error::Format {
                path: path.into(),
                message: format!(
                    "line {}: expected {} columns, got {}",
                    i + 2,
                    header.len(),
                    row.len()
                ),
            });
        }
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn diagnostics_csv(diags: &[StepDiagnostics]) -> String {
    let mut out = String::from(
        "step,t,safe_rate,min_cost,ddp_iterations,corrected,fallback,mean_feedback,min_h,compute_ms\n",
    );
    for d in diags {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            d.step,
            fmt_f64(d.t),
            opt(d.safe_rate),
            opt(d.min_cost),
            d.ddp_iterations,
            u8::from(d.corrected),
            u8::from(d.fallback),
            fmt_f64(d.mean_feedback),
            fmt_f64(d.min_h),
            fmt_f64(d.compute_ms),
        );
    }
    out
}

pub fn export_diagnostics(diags: &[StepDiagnostics], path: &Path) -> Result<()> {
    write_file(path, &diagnostics_csv(diags))
}

/// Header `step, sample, safe, k, <states>`; one row per sampled state.
pub fn cloud_csv(clouds: &[SampleCloud], kind: ModelKind) -> String {
    let mut out = String::from("step,sample,safe,k,");
    out.push_str(&state_names(kind).join(","));
    out.push('\n');
    for c in clouds {
        for s in &c.samples {
            for (k, x) in s.states.iter().enumerate() {
                let vals: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    c.step,
                    s.index,
                    u8::from(s.safe),
                    k,
                    vals.join(",")
                );
            }
        }
    }
    out
}

pub fn export_clouds(clouds: &[SampleCloud], kind: ModelKind, path: &Path) -> Result<()> {
    write_file(path, &cloud_csv(clouds, kind))
}

pub fn episodes_csv(stats: &[EpisodeStats]) -> String {
    let mut out = String::from(
        "episode,seed,safety_violated,completed,completion_time,position_rmse,avg_velocity,max_velocity,safe_sample_rate,steps,termination\n",
    );
    for (i, s) in stats.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{},{},{}",
            s.seed,
            u8::from(s.safety_violated),
            u8::from(s.completed),
            opt(s.completion_time),
            fmt_f64(s.position_rmse),
            fmt_f64(s.avg_velocity),
            fmt_f64(s.max_velocity),
            opt(s.safe_sample_rate),
            s.steps,
            serde_json::to_value(s.termination)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
        );
    }
    out
}

fn stats_json(s: Option<MetricStats>, scale: f64) -> Value {
    match s {
        Some(s) => json!({ "mean": s.mean * scale, "std": s.std * scale, "count": s.count }),
        None => Value::Null,
    }
}

/// Summary metrics keyed by their table labels, with run metadata.
/// Wall-clock timing is kept out so identical runs give identical files.
pub fn summary_json(
    summary: &TrialSummary,
    experiment: &str,
    seed: u64,
    config_hash: &str,
) -> Value {
    json!({
        "experiment": experiment,
        "controller": summary.controller.label(),
        "episodes": summary.episodes,
        "metrics": {
            METRIC_VIOLATION: summary.safety_violation_pct,
            METRIC_COMPLETION: summary.task_completion_pct,
            METRIC_COMPLETION_TIME: stats_json(summary.completion_time, 1.0),
            METRIC_RMSE: stats_json(summary.position_rmse, 1.0),
            METRIC_AVG_VELOCITY: stats_json(summary.avg_velocity, 1.0),
            METRIC_MAX_VELOCITY: stats_json(summary.max_velocity, 1.0),
            METRIC_SAFE_SAMPLES: stats_json(summary.safe_sample_rate, 100.0),
        },
        "metadata": {
            "seed": seed,
            "config_hash": config_hash,
            "rmse_window": format!(
                "root-mean-square distance to the goal position over the final {RMSE_WINDOW_S} s of each episode"
            ),
            "rmse_velocity_scope": "episodes without a safety violation",
            "completion_time_scope": "completed episodes",
            "controller_failures": summary.controller_failures,
        },
    })
}

pub fn export_stats(
    summary: &TrialSummary,
    experiment: &str,
    seed: u64,
    config_hash: &str,
    path: &Path,
) -> Result<()> {
    let v = summary_json(summary, experiment, seed, config_hash);
    write_file(
        path,
        &(serde_json::to_string_pretty(&v).expect("json serializes") + "\n"),
    )
}

pub fn timing_json(summary: &TrialSummary) -> Value {
    json!({
        "controller": summary.controller.label(),
        METRIC_COMPUTE_TIME: stats_json(summary.compute_ms, 1.0),
    })
}

pub fn export_timing(summary: &TrialSummary, path: &Path) -> Result<()> {
    write_file(
        path,
        &(serde_json::to_string_pretty(&timing_json(summary)).expect("json serializes") + "\n"),
    )
}

pub fn export_text(text: &str, path: &Path) -> Result<()> {
    write_file(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::SafetyConstraint;
    use crate::dynamics::{rollout, Control, State};
    use crate::sim::{ControllerKind, Termination};
    use proptest::prelude::*;

    fn stats(completed: bool) -> EpisodeStats {
        EpisodeStats {
            seed: 3,
            safety_violated: false,
            completed,
            completion_time: completed.then_some(2.5),
            position_rmse: 0.25,
            avg_velocity: 4.0,
            max_velocity: 9.0,
            safe_sample_rate: Some(0.5),
            compute_ms: 1.0,
            steps: 250,
            termination: Termination::Completed,
            failure: None,
        }
    }

    #[test]
    fn empty_trajectory_is_header_only() {
        let model = Model::dubins(0.01);
        let t = Trajectory {
            states: Vec::new(),
            controls: Vec::new(),
        };
        let csv = trajectory_csv(
            &t,
            &model,
            &ObstacleField::empty(),
            &BarrierConfig::inverse(0.0),
        );
        assert_eq!(csv, "t,x,y,theta,v,omega,beta,min_h\n");
    }

    #[test]
    fn trajectory_round_trip() {
        let model = Model::multirotor(0.01);
        let s0 = model.state_at(&[0.1, -0.3, 1.0 / 3.0]);
        let controls = vec![Control::from_vec(vec![0.3, -0.2, 0.1, 10.1]); 25];
        let traj = rollout(&s0, &controls, &model).unwrap();
        let field = ObstacleField::new(vec![SafetyConstraint::sphere(
            vec![3.0, 3.0, 3.0],
            1.0,
            0.5,
        )]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/traj.csv");
        export_trajectory(&traj, &model, &field, &BarrierConfig::inverse(0.0), &path).unwrap();
        let table = read_csv(&path).unwrap();
        assert_eq!(table.header.len(), 1 + 13 + 4 + 2);
        assert_eq!(table.rows.len(), traj.states.len());
        for (row, x) in table.rows.iter().zip(&traj.states) {
            for i in 0..13 {
                assert!((row[1 + i].unwrap() - x[i]).abs() <= 1e-12 * x[i].abs().max(1.0));
            }
        }
        assert!(table.rows.last().unwrap()[14].is_none());
        let h = table.column("min_h").unwrap();
        assert!(
            (table.rows[0][h].unwrap() - field.min_h(&traj.states[0].as_slice()[..3])).abs()
                < 1e-12
        );
    }

    proptest! {
        #[test]
        fn seventeen_digits_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            let s = fmt_f64(v);
            prop_assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn nonfinite_values_parse_back() {
        for v in [f64::INFINITY, f64::NEG_INFINITY] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn single_episode_summary_json() {
        for completed in [true, false] {
            let s = TrialSummary::from_stats(ControllerKind::Scmppi, &[stats(completed)]);
            let v = summary_json(&s, "x", 7, "abc");
            let c = v["metrics"][METRIC_COMPLETION].as_f64().unwrap();
            assert_eq!(c, if completed { 100.0 } else { 0.0 });
            assert_eq!(
                v["metrics"][METRIC_SAFE_SAMPLES]["mean"].as_f64(),
                Some(50.0)
            );
            assert_eq!(v["metadata"]["seed"].as_u64(), Some(7));
            assert!(v["metrics"].get(METRIC_COMPUTE_TIME).is_none());
        }
    }

    #[test]
    fn summary_labels() {
        let s = TrialSummary::from_stats(ControllerKind::Mppi, &[stats(true), stats(false)]);
        let v = summary_json(&s, "x", 0, "h");
        let keys: Vec<&str> = v["metrics"]
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        for k in [
            METRIC_VIOLATION,
            METRIC_COMPLETION,
            METRIC_COMPLETION_TIME,
            METRIC_RMSE,
            METRIC_AVG_VELOCITY,
            METRIC_MAX_VELOCITY,
        ] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(v["metrics"][METRIC_COMPLETION].as_f64(), Some(50.0));
        assert_eq!(
            timing_json(&s)[METRIC_COMPUTE_TIME]["mean"].as_f64(),
            Some(1.0)
        );
    }

    #[test]
    fn malformed_csv_reports_path() {
        let err = parse_csv("a,b\n1,x\n", Path::new("bad.csv")).unwrap_err();
        assert!(err.to_string().contains("bad.csv"));
        assert!(parse_csv("a,b\n1\n", Path::new("short.csv")).is_err());
    }

    #[test]
    fn export_to_unwritable_path_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = export_text("y", &blocker.join("sub/out.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn cloud_rows_per_state() {
        let clouds = vec![SampleCloud {
            step: 2,
            samples: vec![crate::sim::SampleTrace {
                index: 0,
                safe: true,
                states: vec![State::zeros(3); 4],
            }],
        }];
        let csv = cloud_csv(&clouds, ModelKind::Dubins);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("step,sample,safe,k,x,y,theta\n2,0,1,0,"));
    }
}
