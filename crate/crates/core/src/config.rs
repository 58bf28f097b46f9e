//! Experiment configuration: a TOML document with one table per block.
//!
//! ```toml
//! name = "example"
//! [model]       # kind, dt, optional physical overrides and control limits
//! [obstacles]   # spheres = [{ center = [..], radius = .. }], optional bounds
//! [barrier]     # kind = "relaxed-inverse" | "inverse", gamma, delta
//! [task]        # start/goal boxes, horizon, planning_horizon, completion_radius
//! [ddp]         # MPC-DDP tuning
//! [mppi]        # MPPI tuning
//! [scmppi]      # SC-MPPI tuning with a nested [scmppi.ddp]
//! [trial]       # episodes, seed
//! [output]      # dir
//! ```
//!
//! Diagonal weights are lists. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::barrier::{BarrierConfig, DomainBounds, ObstacleField, SafetyConstraint};
use crate::dynamics::{ControlLimits, Model, ModelKind, Plant};
use crate::error::{Error, Result};
use crate::sim::{
    BoxRegion, ControllerKind, ControllerTuning, DdpTuning, EpisodeConfig, MppiTuning, ScMppiTuning,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gravity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicle_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_upper: Option<Vec<f64>>,
}

impl ModelSection {
    pub fn build(&self) -> Result<Model> {
        let base = match self.kind {
            ModelKind::Dubins => Model::dubins(self.dt.max(f64::MIN_POSITIVE)),
            ModelKind::Multirotor => Model::multirotor(self.dt.max(f64::MIN_POSITIVE)),
            ModelKind::RigidQuadrotor => Model::rigid_quadrotor(self.dt.max(f64::MIN_POSITIVE)),
        };
        let mut params = base.params().clone();
        params.dt = self.dt;
        if let Some(v) = self.mass {
            params.mass = v;
        }
        if let Some(v) = self.gravity {
            params.gravity = v;
        }
        if let Some(v) = self.kappa {
            params.kappa = v;
        }
        if let Some(v) = self.vehicle_radius {
            params.vehicle_radius = v;
        }
        if let Some(v) = self.inertia {
            params.inertia = v;
        }
        if let Some(v) = self.arm_length {
            params.arm_length = v;
        }
        let limits = base.limits().clone();
        let limits = ControlLimits::new(
            self.control_lower.clone().unwrap_or(limits.lower),
            self.control_upper.clone().unwrap_or(limits.upper),
        )?;
        Model::new(self.kind, params, limits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_scales: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSection {
    #[serde(default)]
    pub spheres: Vec<Sphere>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds_lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds_upper: Option<Vec<f64>>,
}

impl ObstacleSection {
    /// Obstacles inflated by the vehicle radius.
    pub fn build(&self, vehicle_radius: f64) -> ObstacleField {
        let bounds = match (&self.bounds_lower, &self.bounds_upper) {
            (Some(lower), Some(upper)) => Some(DomainBounds {
                lower: lower.clone(),
                upper: upper.clone(),
            }),
            _ => None,
        };
        ObstacleField {
            constraints: self
                .spheres
                .iter()
                .map(|s| SafetyConstraint {
                    center: s.center.clone(),
                    radius: s.radius,
                    vehicle_radius,
                    axis_scales: s.axis_scales.clone(),
                })
                .collect(),
            bounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub start: BoxRegion,
    pub goal: BoxRegion,
    pub horizon: usize,
    pub planning_horizon: usize,
    pub completion_radius: f64,
}

fn default_episodes() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSection {
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrialSection {
    fn default() -> Self {
        Self {
            episodes: 1,
            seed: 0,
        }
    }
}

fn default_out() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub model: ModelSection,
    #[serde(default)]
    pub obstacles: ObstacleSection,
    pub barrier: BarrierConfig,
    pub task: TaskSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ddp: Option<DdpTuning>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mppi: Option<MppiTuning>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scmppi: Option<ScMppiTuning>,
    #[serde(default)]
    pub trial: TrialSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn check_len(key: &str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::invalid(
            key,
            format!("expected {expected} entries, got {}", v.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(key, "entries must be finite"));
    }
    Ok(())
}

fn check_nonneg(key: &str, v: &[f64], expected: usize) -> Result<()> {
    check_len(key, v, expected)?;
    if v.iter().any(|x| *x < 0.0) {
        return Err(Error::invalid(key, "weights must be >= 0"));
    }
    Ok(())
}

fn check_positive(key: &str, v: &[f64], expected: usize) -> Result<()> {
    check_len(key, v, expected)?;
    if v.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::invalid(key, "entries must be > 0"));
    }
    Ok(())
}

fn check_scalar(key: &str, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(key, what))
    }
}

fn validate_ddp(prefix: &str, d: &DdpTuning, n: usize, m: usize) -> Result<()> {
    check_nonneg(&format!("{prefix}.q"), &d.q, n)?;
    check_positive(&format!("{prefix}.r"), &d.r, m)?;
    check_nonneg(&format!("{prefix}.phi"), &d.phi, n)?;
    check_scalar(
        &format!("{prefix}.q_beta"),
        d.q_beta >= 0.0 && d.q_beta.is_finite(),
        "must be >= 0",
    )
}

#[allow(clippy::too_many_arguments)]
fn validate_sampling(
    prefix: &str,
    samples: usize,
    lambda: f64,
    sigma: &[f64],
    alpha: f64,
    iterations: usize,
    q: &[f64],
    r: &[f64],
    phi: &[f64],
    n: usize,
    m: usize,
) -> Result<()> {
    check_scalar(&format!("{prefix}.samples"), samples >= 1, "must be >= 1")?;
    check_scalar(
        &format!("{prefix}.lambda"),
        lambda > 0.0 && lambda.is_finite(),
        "must be > 0",
    )?;
    check_positive(&format!("{prefix}.sigma_inv"), sigma, m)?;
    check_scalar(
        &format!("{prefix}.alpha"),
        (0.0..=1.0).contains(&alpha),
        "must lie in [0, 1]",
    )?;
    check_scalar(
        &format!("{prefix}.iterations"),
        iterations >= 1,
        "must be >= 1",
    )?;
    check_nonneg(&format!("{prefix}.q"), q, n)?;
    check_nonneg(&format!("{prefix}.r"), r, m)?;
    check_nonneg(&format!("{prefix}.phi"), phi, n)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let model = self
            .model
            .build()
            .map_err(|e| Error::invalid("model", e.to_string()))?;
        let n = model.kind().state_dim();
        let m = model.kind().control_dim();
        let p = model.kind().position_dim();
        self.barrier
            .validate()
            .map_err(|e| Error::invalid("barrier", e.to_string()))?;
        for (i, s) in self.obstacles.spheres.iter().enumerate() {
            check_len(&format!("obstacles.spheres[{i}].center"), &s.center, p)?;
            check_scalar(
                &format!("obstacles.spheres[{i}].radius"),
                s.radius > 0.0,
                "must be > 0",
            )?;
            if let Some(a) = &s.axis_scales {
                check_positive(&format!("obstacles.spheres[{i}].axis_scales"), a, p)?;
            }
        }
        match (&self.obstacles.bounds_lower, &self.obstacles.bounds_upper) {
            (Some(lo), Some(hi)) => {
                check_len("obstacles.bounds_lower", lo, p)?;
                check_len("obstacles.bounds_upper", hi, p)?;
            }
            (None, None) => {}
            _ => {
                return Err(Error::invalid(
                    "obstacles.bounds_lower",
                    "bounds need both lower and upper",
                ))
            }
        }
        let t = &self.task;
        check_len("task.start.center", &t.start.center, p)?;
        check_len("task.goal.center", &t.goal.center, p)?;
        if !t.start.half_width.is_empty() {
            check_nonneg("task.start.half_width", &t.start.half_width, p)?;
        }
        if !t.goal.half_width.is_empty() {
            check_nonneg("task.goal.half_width", &t.goal.half_width, p)?;
        }
        check_scalar("task.horizon", t.horizon >= 1, "must be >= 1")?;
        check_scalar(
            "task.planning_horizon",
            t.planning_horizon >= 1 && t.planning_horizon <= t.horizon,
            "must lie in 1..=task.horizon",
        )?;
        check_scalar(
            "task.completion_radius",
            t.completion_radius > 0.0,
            "must be > 0",
        )?;
        if let Some(d) = &self.ddp {
            validate_ddp("ddp", d, n, m)?;
        }
        if let Some(s) = &self.mppi {
            validate_sampling(
                "mppi",
                s.samples,
                s.lambda,
                &s.sigma_inv,
                s.alpha,
                s.iterations,
                &s.q,
                &s.r,
                &s.phi,
                n,
                m,
            )?;
            check_scalar("mppi.q_beta", s.q_beta >= 0.0, "must be >= 0")?;
        }
        if let Some(s) = &self.scmppi {
            validate_sampling(
                "scmppi",
                s.samples,
                s.lambda,
                &s.sigma_inv,
                s.alpha,
                s.iterations,
                &s.q,
                &s.r,
                &s.phi,
                n,
                m,
            )?;
            check_scalar("scmppi.nu", s.nu >= 0.0 && s.nu.is_finite(), "must be >= 0")?;
            check_nonneg("scmppi.r_fb", &s.r_fb, m)?;
            validate_ddp("scmppi.ddp", &s.ddp, n, m)?;
        }
        check_scalar("trial.episodes", self.trial.episodes >= 1, "must be >= 1")?;
        Ok(())
    }

    pub fn controllers(&self) -> Vec<ControllerKind> {
        let mut out = Vec::new();
        if self.ddp.is_some() {
            out.push(ControllerKind::Ddp);
        }
        if self.mppi.is_some() {
            out.push(ControllerKind::Mppi);
        }
        if self.scmppi.is_some() {
            out.push(ControllerKind::Scmppi);
        }
        out
    }

    /// Episode template for `controller`, seeded with `seed`.
    pub fn episode(&self, controller: ControllerKind, seed: u64) -> Result<EpisodeConfig> {
        let missing = |key: &str| Error::invalid(key, "controller block is missing");
        let tuning = match controller {
            ControllerKind::Ddp => {
                ControllerTuning::Ddp(self.ddp.clone().ok_or_else(|| missing("ddp"))?)
            }
            ControllerKind::Mppi => {
                ControllerTuning::Mppi(self.mppi.clone().ok_or_else(|| missing("mppi"))?)
            }
            ControllerKind::Scmppi => {
                ControllerTuning::ScMppi(self.scmppi.clone().ok_or_else(|| missing("scmppi"))?)
            }
        };
        let model = self.model.build()?;
        let field = self.obstacles.build(model.params().vehicle_radius);
        Ok(EpisodeConfig {
            model,
            field,
            barrier: self.barrier,
            start: self.task.start.clone(),
            goal: self.task.goal.clone(),
            horizon: self.task.horizon,
            planning_horizon: self.task.planning_horizon,
            completion_radius: self.task.completion_radius,
            controller: tuning,
            seed,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses and validates a TOML experiment config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

const PRESETS: &[(&str, &str)] = &[
    ("dubins_dense", include_str!("../presets/dubins_dense.toml")),
    (
        "dubins_single_obstacle",
        include_str!("../presets/dubins_single_obstacle.toml"),
    ),
    (
        "quad_experiment1",
        include_str!("../presets/quad_experiment1.toml"),
    ),
    (
        "quad_experiment2",
        include_str!("../presets/quad_experiment2.toml"),
    ),
    (
        "quad_lqr_barrier",
        include_str!("../presets/quad_lqr_barrier.toml"),
    ),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    parse_config(preset_text(name).ok_or_else(|| Error::UnknownPreset(name.into()))?)
}

/// A bundled preset name or a path to a TOML file.
pub fn load_config(spec: &str) -> Result<ExperimentConfig> {
    if let Some(text) = preset_text(spec) {
        return parse_config(text);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Error::UnknownPreset(spec.into()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
