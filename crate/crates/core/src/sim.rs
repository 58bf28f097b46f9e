//! Closed-loop receding-horizon episodes, randomized trials and their metrics.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{BarrierConfig, ObstacleField};
use crate::ddp::{self, DdpOptions, EmbeddedProblem, QuadraticCost};
use crate::dynamics::{Control, Model, Plant, State, Trajectory};
use crate::error::{Error, Result};
use crate::mppi::{
    iteration_key, mppi_step, rollout_sample, sample_noise, shift_controls, splitmix64,
    PathCostParams, RolloutContext, SampleFeedback, SamplerConfig,
};
use crate::sc_mppi::{compute_safe_feedback, sc_mppi_step, SafeSamplerConfig};

/// Length of the trailing window the position RMSE is measured over.
pub const RMSE_WINDOW_S: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Ddp,
    Mppi,
    Scmppi,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Ddp => "MPC-DDP",
            ControllerKind::Mppi => "MPPI",
            ControllerKind::Scmppi => "SC-MPPI",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddp" | "mpc-ddp" => Ok(ControllerKind::Ddp),
            "mppi" => Ok(ControllerKind::Mppi),
            "scmppi" | "sc-mppi" => Ok(ControllerKind::Scmppi),
            other => Err(Error::InvalidState(format!("unknown controller `{other}`"))),
        }
    }
}

/// How the listed sampling covariance numbers are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseReading {
    /// The listed numbers are the per-channel variances.
    #[default]
    Variance,
    /// The listed numbers are the diagonal of `Σ⁻¹`.
    Inverse,
}

impl NoiseReading {
    pub fn variances(self, listed: &[f64]) -> Vec<f64> {
        match self {
            NoiseReading::Variance => listed.to_vec(),
            NoiseReading::Inverse => listed.iter().map(|v| 1.0 / v).collect(),
        }
    }
}

/// Target of the barrier-state entry in the DDP cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaReference {
    /// Penalize `β` itself, pushing the vehicle away from obstacles.
    #[default]
    Zero,
    /// Penalize `β - B(h(goal))`, so the goal stays an equilibrium.
    Goal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpTuning {
    pub q: Vec<f64>,
    pub q_beta: f64,
    pub r: Vec<f64>,
    pub phi: Vec<f64>,
    pub iterations: usize,
    #[serde(default)]
    pub beta_reference: BetaReference,
}

impl DdpTuning {
    /// Embedded quadratic cost about `goal`, with the trim control as the
    /// control reference.
    pub fn cost(
        &self,
        model: &Model,
        goal: &State,
        field: &ObstacleField,
        barrier: &BarrierConfig,
    ) -> Result<QuadraticCost> {
        let trim = model.trim_control();
        let mut cost =
            QuadraticCost::diagonal(&self.q, self.q_beta, &self.r, &self.phi, goal, &trim)?;
        if self.beta_reference == BetaReference::Goal {
            cost.goal[goal.len()] = field.barrier(barrier, model.position(goal.as_slice()))?;
        }
        Ok(cost)
    }

    pub fn options(&self) -> DdpOptions {
        DdpOptions::with_iters(self.iterations)
    }
}

fn default_iterations() -> usize {
    1
}

fn default_nu() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MppiTuning {
    pub samples: usize,
    pub lambda: f64,
    /// Listed covariance numbers, interpreted per `noise_reading`.
    pub sigma_inv: Vec<f64>,
    #[serde(default)]
    pub noise_reading: NoiseReading,
    pub alpha: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub phi: Vec<f64>,
    #[serde(default)]
    pub q_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScMppiTuning {
    pub samples: usize,
    pub lambda: f64,
    pub sigma_inv: Vec<f64>,
    #[serde(default)]
    pub noise_reading: NoiseReading,
    pub alpha: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub phi: Vec<f64>,
    #[serde(default = "default_nu")]
    pub nu: f64,
    pub r_fb: Vec<f64>,
    /// Inner DBaS-DDP that supplies the corrected reference and `K_BaS`.
    pub ddp: DdpTuning,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerTuning {
    Ddp(DdpTuning),
    Mppi(MppiTuning),
    ScMppi(ScMppiTuning),
}

impl ControllerTuning {
    pub fn kind(&self) -> ControllerKind {
        match self {
            ControllerTuning::Ddp(_) => ControllerKind::Ddp,
            ControllerTuning::Mppi(_) => ControllerKind::Mppi,
            ControllerTuning::ScMppi(_) => ControllerKind::Scmppi,
        }
    }
}

/// Uniform box `center ± half_width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRegion {
    pub center: Vec<f64>,
    #[serde(default)]
    pub half_width: Vec<f64>,
}

impl BoxRegion {
    pub fn point(center: Vec<f64>) -> Self {
        Self {
            half_width: vec![0.0; center.len()],
            center,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.center
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let w = self.half_width.get(i).copied().unwrap_or(0.0);
                if w > 0.0 {
                    c + rng.random_range(-w..=w)
                } else {
                    *c
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub model: Model,
    pub field: ObstacleField,
    pub barrier: BarrierConfig,
    pub start: BoxRegion,
    pub goal: BoxRegion,
    /// Problem horizon in steps.
    pub horizon: usize,
    /// Planning horizon in steps.
    pub planning_horizon: usize,
    pub completion_radius: f64,
    pub controller: ControllerTuning,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.barrier.validate()?;
        self.field.validate()?;
        let p = self.model.position_dim();
        if self.start.center.len() != p || self.goal.center.len() != p {
            return Err(Error::Dimension {
                what: "start/goal position",
                expected: p,
                got: self.start.center.len().min(self.goal.center.len()),
            });
        }
        if self.planning_horizon == 0 || self.planning_horizon > self.horizon {
            return Err(Error::InvalidState(format!(
                "planning horizon {} must be in 1..={}",
                self.planning_horizon, self.horizon
            )));
        }
        if !(self.completion_radius > 0.0) {
            return Err(Error::InvalidState(format!(
                "completion radius must be > 0, got {}",
                self.completion_radius
            )));
        }
        Ok(())
    }

    /// Start and goal positions drawn for this episode's seed.
    pub fn draw_endpoints(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ 0x5eed_e915_0de5));
        let start = self.start.sample(&mut rng);
        let goal = self.goal.sample(&mut rng);
        (start, goal)
    }
}

/// Goal state for a task: the goal position at rest, zero heading.
pub fn goal_state(model: &Model, goal: &[f64]) -> State {
    model.state_at(goal)
}

/// Initial state at the start position, at rest.
pub fn start_state(model: &Model, start: &[f64]) -> State {
    model.state_at(start)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Collision,
    HorizonEnd,
    OutOfBounds,
    ControllerFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub seed: u64,
    pub safety_violated: bool,
    pub completed: bool,
    /// Seconds until the completion radius was first entered.
    pub completion_time: Option<f64>,
    pub position_rmse: f64,
    pub avg_velocity: f64,
    pub max_velocity: f64,
    /// Mean over MPC steps of the batch safe fraction (sampling controllers).
    pub safe_sample_rate: Option<f64>,
    /// Wall-clock controller time per step (informational).
    pub compute_ms: f64,
    pub steps: usize,
    pub termination: Termination,
    pub failure: Option<String>,
}

/// Per-step controller diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    pub safe_rate: Option<f64>,
    pub min_cost: Option<f64>,
    pub ddp_iterations: usize,
    pub corrected: bool,
    pub fallback: bool,
    pub mean_feedback: f64,
    pub min_h: f64,
    pub compute_ms: f64,
}

/// Rollouts of one batch, for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    pub step: usize,
    pub samples: Vec<SampleTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub index: usize,
    pub safe: bool,
    /// Plant states, starting at the MPC state.
    pub states: Vec<State>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeOptions {
    /// Record up to this many sampled rollouts per MPC step.
    pub cloud_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub stats: EpisodeStats,
    /// Executed plant trajectory.
    pub trajectory: Trajectory,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub clouds: Vec<SampleCloud>,
}

enum Prepared {
    Ddp {
        cost: QuadraticCost,
        opts: DdpOptions,
    },
    Mppi {
        params: PathCostParams,
        sampler: SamplerConfig,
        iters: usize,
    },
    ScMppi {
        params: PathCostParams,
        cfg: SafeSamplerConfig,
        ddp_cost: QuadraticCost,
        iters: usize,
    },
}

fn prepare(cfg: &EpisodeConfig, goal: &State) -> Result<Prepared> {
    let goal_vec: Vec<f64> = goal.iter().copied().collect();
    let t = cfg.planning_horizon;
    Ok(match &cfg.controller {
        ControllerTuning::Ddp(d) => Prepared::Ddp {
            cost: d.cost(&cfg.model, goal, &cfg.field, &cfg.barrier)?,
            opts: d.options(),
        },
        ControllerTuning::Mppi(m) => Prepared::Mppi {
            params: PathCostParams {
                q: m.q.clone(),
                r: m.r.clone(),
                phi: m.phi.clone(),
                q_beta: m.q_beta,
                goal: goal_vec,
            },
            sampler: SamplerConfig {
                samples: m.samples,
                horizon: t,
                lambda: m.lambda,
                sigma: m.noise_reading.variances(&m.sigma_inv),
                alpha: m.alpha,
                seed: cfg.seed,
            },
            iters: m.iterations,
        },
        ControllerTuning::ScMppi(s) => Prepared::ScMppi {
            params: PathCostParams {
                q: s.q.clone(),
                r: s.r.clone(),
                phi: s.phi.clone(),
                q_beta: 0.0,
                goal: goal_vec,
            },
            cfg: SafeSamplerConfig {
                sampler: SamplerConfig {
                    samples: s.samples,
                    horizon: t,
                    lambda: s.lambda,
                    sigma: s.noise_reading.variances(&s.sigma_inv),
                    alpha: s.alpha,
                    seed: cfg.seed,
                },
                nu: s.nu,
                r_fb: s.r_fb.clone(),
                ddp: s.ddp.options(),
            },
            ddp_cost: s.ddp.cost(&cfg.model, goal, &cfg.field, &cfg.barrier)?,
            iters: s.iterations,
        },
    })
}

fn speed(model: &Model, prev: &State, next: &State) -> f64 {
    match model.velocity(next.as_slice()) {
        Some(v) => (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt(),
        None => {
            let p = model.position_dim();
            (next.rows(0, p) - prev.rows(0, p)).norm() / model.dt()
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Root-mean-square distance to `goal` over the last `RMSE_WINDOW_S` of `states`.
pub fn position_rmse(model: &Model, states: &[State], goal: &[f64]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let window = ((RMSE_WINDOW_S / model.dt()).round() as usize).clamp(1, states.len());
    let tail = &states[states.len() - window..];
    let sq: f64 = tail
        .iter()
        .map(|x| distance(model.position(x.as_slice()), goal).powi(2))
        .sum();
    (sq / window as f64).sqrt()
}

/// Mean over MPC steps of each step's safe fraction.
pub fn safe_sample_rate(step_rates: &[f64]) -> f64 {
    if step_rates.is_empty() {
        return 1.0;
    }
    step_rates.iter().sum::<f64>() / step_rates.len() as f64
}

struct StepReport {
    controls: Vec<Control>,
    diag: StepDiagnostics,
}

fn controller_step(
    cfg: &EpisodeConfig,
    prepared: &Prepared,
    s: &State,
    controls: &[Control],
    step: usize,
) -> Result<StepReport> {
    let mut diag = StepDiagnostics {
        step,
        t: step as f64 * cfg.model.dt(),
        safe_rate: None,
        min_cost: None,
        ddp_iterations: 0,
        corrected: false,
        fallback: false,
        mean_feedback: 0.0,
        min_h: cfg.field.min_h(cfg.model.position(s.as_slice())),
        compute_ms: 0.0,
    };
    let controls = match prepared {
        Prepared::Ddp { cost, opts } => {
            let problem = EmbeddedProblem {
                model: &cfg.model,
                cost,
                barrier: &cfg.barrier,
                field: &cfg.field,
            };
            let sol = ddp::solve(problem, s, controls, opts)?;
            diag.ddp_iterations = sol.iterations;
            diag.min_cost = Some(sol.cost);
            sol.trajectory.controls
        }
        Prepared::Mppi {
            params,
            sampler,
            iters,
        } => match mppi_step(
            s,
            controls,
            &cfg.model,
            &cfg.field,
            &cfg.barrier,
            params,
            sampler,
            *iters,
            step as u64,
        ) {
            Ok(out) => {
                diag.safe_rate = Some(out.safe_rate());
                diag.min_cost = out.batches.last().map(|b| b.min_cost());
                out.controls
            }
            Err(Error::DegenerateBatch { .. }) => {
                debug!("step {step}: every sample capped, keeping the plan");
                diag.safe_rate = Some(0.0);
                controls.to_vec()
            }
            Err(e) => return Err(e),
        },
        Prepared::ScMppi {
            params,
            cfg: sc,
            ddp_cost,
            iters,
        } => {
            let out = sc_mppi_step(
                s,
                controls,
                &cfg.model,
                &cfg.field,
                &cfg.barrier,
                params,
                ddp_cost,
                sc,
                *iters,
                step as u64,
            )?;
            diag.safe_rate = Some(out.safe_rate());
            diag.min_cost = out.batches.last().map(|b| b.min_cost());
            diag.ddp_iterations = out.ddp_iterations;
            diag.corrected = out.corrected;
            diag.fallback = out.fallback;
            diag.mean_feedback = out.mean_feedback;
            out.controls
        }
    };
    Ok(StepReport { controls, diag })
}

fn sample_cloud(
    cfg: &EpisodeConfig,
    prepared: &Prepared,
    s: &State,
    controls: &[Control],
    step: usize,
    max: usize,
) -> Result<Option<SampleCloud>> {
    let (sampler, params, key) = match prepared {
        Prepared::Ddp { .. } => return Ok(None),
        Prepared::Mppi {
            sampler,
            params,
            iters,
        } => (sampler, params, iteration_key(step as u64, *iters, 0)),
        Prepared::ScMppi {
            cfg: sc,
            params,
            iters,
            ..
        } => (&sc.sampler, params, iteration_key(step as u64, *iters, 0)),
    };
    let reference = crate::mppi::clamp_sequence(&cfg.model, controls);
    let feedback = match prepared {
        Prepared::ScMppi {
            cfg: sc, ddp_cost, ..
        } => {
            let problem = EmbeddedProblem {
                model: &cfg.model,
                cost: ddp_cost,
                barrier: &cfg.barrier,
                field: &cfg.field,
            };
            Some((compute_safe_feedback(s, &reference, problem, &sc.ddp)?, sc))
        }
        _ => None,
    };
    let (nominal, fb) = match &feedback {
        Some((f, sc)) => (
            &f.controls,
            Some(SampleFeedback {
                gains: &f.policy.barrier_gains,
                nu: sc.nu,
                r_fb: &sc.r_fb,
            }),
        ),
        None => (&reference, None),
    };
    let ctx = RolloutContext {
        model: &cfg.model,
        field: &cfg.field,
        barrier: &cfg.barrier,
        params,
        cfg: sampler,
        feedback: fb,
    };
    let mut noise = sample_noise(sampler, key);
    let len = noise.horizon * noise.dim;
    let n = max.min(noise.samples);
    let samples = noise
        .data
        .chunks_mut(len.max(1))
        .take(n)
        .enumerate()
        .map(|(index, eps)| {
            let mut states = Vec::with_capacity(sampler.horizon + 1);
            let out = rollout_sample(&ctx, s.as_slice(), nominal, eps, Some(&mut states));
            let p = cfg.model.state_dim();
            SampleTrace {
                index,
                safe: out.safe,
                states: states.iter().map(|x| x.rows(0, p).into_owned()).collect(),
            }
        })
        .collect();
    Ok(Some(SampleCloud { step, samples }))
}

/// Receding-horizon episode with default options.
pub fn run_episode(cfg: &EpisodeConfig) -> Result<EpisodeResult> {
    run_episode_with(cfg, &EpisodeOptions::default())
}

/// Receding-horizon episode: each step updates the plan from the current
/// state, applies its first control and shifts it.
pub fn run_episode_with(cfg: &EpisodeConfig, opts: &EpisodeOptions) -> Result<EpisodeResult> {
    cfg.validate()?;
    let model = &cfg.model;
    let (start, goal) = cfg.draw_endpoints();
    let s0 = start_state(model, &start);
    let goal_x = goal_state(model, &goal);
    let prepared = prepare(cfg, &goal_x)?;

    let mut controls = vec![model.trim_control(); cfg.planning_horizon];
    let mut states = vec![s0.clone()];
    let mut applied = Vec::new();
    let mut diagnostics = Vec::new();
    let mut clouds = Vec::new();
    let mut failure = None;
    let mut compute_total = 0.0;
    let dt = model.dt();

    let mut termination = Termination::HorizonEnd;
    let mut completed = false;
    let mut completion_time = None;
    let mut violated = !cfg.field.is_safe(model.position(s0.as_slice()));
    if violated {
        termination = Termination::Collision;
    } else if distance(model.position(s0.as_slice()), &goal) <= cfg.completion_radius {
        completed = true;
        completion_time = Some(0.0);
        termination = Termination::Completed;
    }

    if termination == Termination::HorizonEnd {
        for step in 0..cfg.horizon {
            let s = states.last().unwrap().clone();
            if opts.cloud_samples > 0 {
                if let Some(c) =
                    sample_cloud(cfg, &prepared, &s, &controls, step, opts.cloud_samples)?
                {
                    clouds.push(c);
                }
            }
            let clock = Instant::now();
            let report = controller_step(cfg, &prepared, &s, &controls, step);
            let ms = clock.elapsed().as_secs_f64() * 1e3;
            compute_total += ms;
            let report = match report {
                Ok(r) => r,
                Err(e) => {
                    warn!("controller failure at step {step}: {e}");
                    failure = Some(e.at_step(step).to_string());
                    termination = Termination::ControllerFailure;
                    break;
                }
            };
            let mut diag = report.diag;
            diag.compute_ms = ms;
            diagnostics.push(diag);
            let mut u = report.controls[0].clone();
            model.limits().clamp_slice(u.as_mut_slice());
            let next = match model.step(&s, &u) {
                Ok(x) => x,
                Err(e) => {
                    failure = Some(e.at_step(step).to_string());
                    termination = Termination::ControllerFailure;
                    break;
                }
            };
            applied.push(u);
            controls = shift_controls(&report.controls);
            let pos = model.position(next.as_slice()).to_vec();
            states.push(next);
            if !cfg.field.is_safe(&pos) {
                violated = true;
                termination = Termination::Collision;
                break;
            }
            if distance(&pos, &goal) <= cfg.completion_radius {
                completed = true;
                completion_time = Some((step + 1) as f64 * dt);
                termination = Termination::Completed;
                break;
            }
            if let Some(b) = &cfg.field.bounds {
                if !b.contains(&pos) {
                    termination = Termination::OutOfBounds;
                    break;
                }
            }
        }
    }

    let speeds: Vec<f64> = states
        .windows(2)
        .map(|w| speed(model, &w[0], &w[1]))
        .collect();
    let rates: Vec<f64> = diagnostics.iter().filter_map(|d| d.safe_rate).collect();
    let sampling = !matches!(cfg.controller, ControllerTuning::Ddp(_));
    let stats = EpisodeStats {
        seed: cfg.seed,
        safety_violated: violated,
        completed,
        completion_time,
        position_rmse: position_rmse(model, &states, &goal),
        avg_velocity: if speeds.is_empty() {
            0.0
        } else {
            speeds.iter().sum::<f64>() / speeds.len() as f64
        },
        max_velocity: speeds.iter().copied().fold(0.0, f64::max),
        safe_sample_rate: if sampling && !rates.is_empty() {
            Some(safe_sample_rate(&rates))
        } else {
            None
        },
        compute_ms: if diagnostics.is_empty() {
            0.0
        } else {
            compute_total / diagnostics.len() as f64
        },
        steps: applied.len(),
        termination,
        failure,
    };
    Ok(EpisodeResult {
        stats,
        trajectory: Trajectory {
            states,
            controls: applied,
        },
        start,
        goal,
        diagnostics,
        clouds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub count: usize,
}

impl MetricStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

/// Aggregates over a trial. RMSE and velocity statistics exclude episodes
/// that collided; completion time covers completed episodes only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub controller: ControllerKind,
    pub episodes: usize,
    pub safety_violation_pct: f64,
    pub task_completion_pct: f64,
    pub completion_time: Option<MetricStats>,
    pub position_rmse: Option<MetricStats>,
    pub avg_velocity: Option<MetricStats>,
    pub max_velocity: Option<MetricStats>,
    pub safe_sample_rate: Option<MetricStats>,
    pub controller_failures: usize,
    pub compute_ms: Option<MetricStats>,
}

impl TrialSummary {
    pub fn from_stats(controller: ControllerKind, stats: &[EpisodeStats]) -> Self {
        let m = stats.len().max(1) as f64;
        let collect = |f: &dyn Fn(&EpisodeStats) -> Option<f64>| -> Vec<f64> {
            stats.iter().filter_map(f).collect()
        };
        let intact = |s: &EpisodeStats| !s.safety_violated;
        Self {
            controller,
            episodes: stats.len(),
            safety_violation_pct: 100.0 * stats.iter().filter(|s| s.safety_violated).count() as f64
                / m,
            task_completion_pct: 100.0 * stats.iter().filter(|s| s.completed).count() as f64 / m,
            completion_time: MetricStats::of(&collect(&|s| s.completion_time)),
            position_rmse: MetricStats::of(&collect(&|s| intact(s).then_some(s.position_rmse))),
            avg_velocity: MetricStats::of(&collect(&|s| intact(s).then_some(s.avg_velocity))),
            max_velocity: MetricStats::of(&collect(&|s| intact(s).then_some(s.max_velocity))),
            safe_sample_rate: MetricStats::of(&collect(&|s| s.safe_sample_rate)),
            controller_failures: stats.iter().filter(|s| s.failure.is_some()).count(),
            compute_ms: MetricStats::of(&collect(&|s| Some(s.compute_ms))),
        }
    }
}

/// Seed of episode `index` in the stream rooted at `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed.wrapping_add(splitmix64(index as u64)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub summary: TrialSummary,
    /// Episodes in index order.
    pub episodes: Vec<EpisodeResult>,
}

/// `episodes` independent episodes seeded from `seed`, run concurrently and
/// aggregated in index order.
pub fn run_trials(template: &EpisodeConfig, episodes: usize, seed: u64) -> Result<TrialResult> {
    if episodes == 0 {
        return Err(Error::InvalidState(
            "a trial needs at least one episode".into(),
        ));
    }
    template.validate()?;
    let results: Vec<Result<EpisodeResult>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut cfg = template.clone();
            cfg.seed = episode_seed(seed, i);
            run_episode(&cfg)
        })
        .collect();
    let episodes: Vec<EpisodeResult> = results.into_iter().collect::<Result<_>>()?;
    let stats: Vec<EpisodeStats> = episodes.iter().map(|e| e.stats.clone()).collect();
    Ok(TrialResult {
        summary: TrialSummary::from_stats(template.controller.kind(), &stats),
        episodes,
    })
}

/// Barrier value and smallest margin along a plant trajectory. The barrier
/// is `+∞` where the inverse barrier is undefined.
pub fn barrier_profile(
    model: &Model,
    field: &ObstacleField,
    barrier: &BarrierConfig,
    states: &[State],
) -> Vec<(f64, f64)> {
    states
        .iter()
        .map(|x| {
            let pos = model.position(x.as_slice());
            let beta = field.barrier(barrier, pos).unwrap_or(f64::INFINITY);
            (beta, field.min_h(pos))
        })
        .collect()
}

/// Plant state as a plain vector (used by exporters).
pub fn state_row(x: &DVector<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}
