//! Information-theoretic MPPI on the barrier-embedded model.
//!
//! Noise is drawn from a counter-based ChaCha stream keyed by
//! `(seed, iteration)` with one stream per sample, so batches are identical
//! regardless of how rollouts are scheduled across threads. Weights and the
//! control update are reduced sequentially in sample order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{BarrierConfig, ObstacleField};
use crate::dynamics::{Control, Plant, State, Trajectory};
use crate::error::{Error, Result};

/// Path cost assigned to samples that leave the safe set.
pub const COST_CAP: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub samples: usize,
    pub horizon: usize,
    /// Inverse temperature `λ`.
    pub lambda: f64,
    /// Diagonal of the sampling covariance `Σ` (variances).
    pub sigma: Vec<f64>,
    /// Control-cost smoothing `α ∈ [0, 1]`.
    pub alpha: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.horizon == 0 {
            return Err(Error::InvalidState(
                "sampler needs at least one sample and one step".into(),
            ));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidState(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidState(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidState(
                "sampling covariance must be positive definite".into(),
            ));
        }
        Ok(())
    }

    pub fn control_dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn noise_std(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s.max(0.0).sqrt()).collect()
    }

    pub fn sigma_inv(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| 1.0 / s).collect()
    }

    /// `λ(1-α)/2`.
    pub fn control_cost_scale(&self) -> f64 {
        0.5 * self.lambda * (1.0 - self.alpha)
    }
}

/// Diagonal quadratic path-cost weights on the plant state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathCostParams {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub phi: Vec<f64>,
    /// Barrier-state penalty (zero for the safety-controlled sampler).
    pub q_beta: f64,
    pub goal: Vec<f64>,
}

impl PathCostParams {
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        for (what, v, d) in [
            ("path cost Q", &self.q, n),
            ("path cost Phi", &self.phi, n),
            ("path cost goal", &self.goal, n),
            ("path cost R", &self.r, m),
        ] {
            if v.len() != d {
                return Err(Error::Dimension {
                    what,
                    expected: d,
                    got: v.len(),
                });
            }
        }
        if self
            .q
            .iter()
            .chain(&self.phi)
            .chain(&self.r)
            .chain(std::iter::once(&self.q_beta))
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::InvalidState(
                "path cost weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn state_cost(&self, x: &[f64], beta: f64) -> f64 {
        let mut c = self.q_beta * beta * beta;
        for ((xi, gi), qi) in x.iter().zip(&self.goal).zip(&self.q) {
            let d = xi - gi;
            c += qi * d * d;
        }
        c
    }

    #[inline]
    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        let mut c = 0.0;
        for ((xi, gi), pi) in x.iter().zip(&self.goal).zip(&self.phi) {
            let d = xi - gi;
            c += pi * d * d;
        }
        c
    }
}

/// Perturbations for `samples` sequences of `horizon` controls, stored sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    pub samples: usize,
    pub horizon: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl NoiseBatch {
    pub fn zeros(samples: usize, horizon: usize, dim: usize) -> Self {
        Self {
            samples,
            horizon,
            dim,
            data: vec![0.0; samples * horizon * dim],
        }
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.horizon * self.dim;
        &self.data[n * len..(n + 1) * len]
    }

    pub fn at(&self, n: usize, k: usize) -> &[f64] {
        let start = (n * self.horizon + k) * self.dim;
        &self.data[start..start + self.dim]
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for sample `n` of batch `iteration`.
pub fn sample_rng(seed: u64, iteration: u64, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed) ^ splitmix64(!iteration));
    rng.set_stream(n as u64);
    rng
}

fn fill_sample(rng: &mut ChaCha8Rng, std: &[f64], out: &mut [f64]) {
    for chunk in out.chunks_mut(std.len()) {
        for (o, s) in chunk.iter_mut().zip(std) {
            let z: f64 = rng.sample(StandardNormal);
            *o = if *s == 0.0 { 0.0 } else { s * z };
        }
    }
}

/// Gaussian perturbations `ε ~ N(0, Σ)` for one sampling round.
pub fn sample_noise(cfg: &SamplerConfig, iteration: u64) -> NoiseBatch {
    let m = cfg.control_dim();
    let std = cfg.noise_std();
    let mut batch = NoiseBatch::zeros(cfg.samples, cfg.horizon, m);
    let len = cfg.horizon * m;
    if len == 0 {
        return batch;
    }
    batch
        .data
        .par_chunks_mut(len)
        .enumerate()
        .for_each(|(n, out)| {
            let mut rng = sample_rng(cfg.seed, iteration, n);
            fill_sample(&mut rng, &std, out);
        });
    batch
}

/// Outcome of one sampled rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutcome {
    pub cost: f64,
    pub safe: bool,
    /// Steps completed before the first violation (the horizon if safe).
    pub safe_steps: usize,
    /// Smallest constraint margin seen over steps `1..=T` that were reached.
    pub min_h: f64,
    /// Mean magnitude of the barrier feedback over executed steps.
    pub mean_feedback: f64,
}

/// Barrier-state feedback applied inside a rollout, `k_fb = ν K_BaS,k β_k`.
#[derive(Debug, Clone, Copy)]
pub struct SampleFeedback<'a> {
    pub gains: &'a [nalgebra::DVector<f64>],
    pub nu: f64,
    /// Diagonal of `R_fb`.
    pub r_fb: &'a [f64],
}

/// Everything a rollout needs besides its own noise.
#[derive(Clone, Copy)]
pub struct RolloutContext<'a, P: Plant + ?Sized> {
    pub model: &'a P,
    pub field: &'a ObstacleField,
    pub barrier: &'a BarrierConfig,
    pub params: &'a PathCostParams,
    pub cfg: &'a SamplerConfig,
    pub feedback: Option<SampleFeedback<'a>>,
}

/// Smallest margin and barrier sum at one position; the barrier is 0 once
/// any margin is nonpositive under the inverse kind (the sample is capped).
#[inline]
fn margin_and_barrier(field: &ObstacleField, cfg: &BarrierConfig, pos: &[f64]) -> (f64, f64) {
    let mut min_h = f64::INFINITY;
    let mut b = 0.0;
    for c in &field.constraints {
        let h = c.h(pos);
        min_h = min_h.min(h);
        b += cfg.value(h).unwrap_or(0.0);
    }
    (min_h, b)
}

/// Rolls out `controls + eps` (plus barrier feedback when configured) from the
/// plant state `s0` with `β_0 = B(h(s0))`, accumulating the sampled path cost.
///
/// `eps` is overwritten by the perturbation after clamping `controls + eps`
/// to the actuator limits. Feedback is added on top and clamped again. When
/// `record` is given, the visited embedded states are appended to it.
pub fn rollout_sample<P: Plant + ?Sized>(
    ctx: &RolloutContext<'_, P>,
    s0: &[f64],
    controls: &[Control],
    eps: &mut [f64],
    mut record: Option<&mut Vec<State>>,
) -> SampleOutcome {
    let n = ctx.model.state_dim();
    let m = ctx.model.control_dim();
    let t = controls.len();
    let pd = ctx.field.constraints.first().map_or(n, |c| c.center.len());
    let scale = ctx.cfg.control_cost_scale();
    let sigma_inv = ctx.cfg.sigma_inv();
    let limits = ctx.model.limits();

    let mut x = s0.to_vec();
    let mut next = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut kfb = vec![0.0; m];
    let (_, mut b_now) = margin_and_barrier(ctx.field, ctx.barrier, &x[..pd]);
    let mut beta = b_now;
    let mut cost = 0.0;
    let mut min_h = f64::INFINITY;
    let mut fb_sum = 0.0;
    if let Some(rec) = record.as_deref_mut() {
        rec.push(embed(&x, beta));
    }

    for k in 0..t {
        cost += ctx.params.state_cost(&x, beta);
        let uk = controls[k].as_slice();
        let ek = &mut eps[k * m..(k + 1) * m];
        match ctx.feedback {
            Some(fb) => {
                let g = &fb.gains[k];
                for i in 0..m {
                    kfb[i] = fb.nu * g[i] * beta;
                }
            }
            None => kfb.fill(0.0),
        }
        for i in 0..m {
            u[i] = uk[i] + ek[i];
        }
        limits.clamp_slice(&mut u);
        for i in 0..m {
            ek[i] = u[i] - uk[i];
        }
        if ctx.feedback.is_some() {
            for i in 0..m {
                u[i] += kfb[i];
            }
            limits.clamp_slice(&mut u);
        }
        let mut fb_norm = 0.0;
        for i in 0..m {
            cost += scale * (uk[i] + 2.0 * ek[i]) * ctx.params.r[i] * sigma_inv[i] * uk[i];
            if let Some(fb) = ctx.feedback {
                cost += scale * kfb[i] * fb.r_fb[i] * sigma_inv[i] * kfb[i];
            }
            fb_norm += kfb[i] * kfb[i];
        }
        fb_sum += fb_norm.sqrt();
        if ctx.model.step_unclamped_into(&x, &u, &mut next).is_err() {
            zero_tail(eps, k + 1, m);
            return capped(k, min_h, fb_sum);
        }
        let (h, b_next) = margin_and_barrier(ctx.field, ctx.barrier, &next[..pd]);
        min_h = min_h.min(h);
        beta = ctx.barrier.next_beta(b_next, b_now, beta);
        b_now = b_next;
        std::mem::swap(&mut x, &mut next);
        if let Some(rec) = record.as_deref_mut() {
            rec.push(embed(&x, beta));
        }
        if !(h > 0.0) {
            zero_tail(eps, k + 1, m);
            return capped(k, min_h, fb_sum);
        }
    }
    cost += ctx.params.terminal_cost(&x);
    SampleOutcome {
        cost: if cost.is_finite() {
            cost.min(COST_CAP)
        } else {
            COST_CAP
        },
        safe: true,
        safe_steps: t,
        min_h,
        mean_feedback: if t > 0 { fb_sum / t as f64 } else { 0.0 },
    }
}

fn embed(x: &[f64], beta: f64) -> State {
    let mut v = State::zeros(x.len() + 1);
    v.as_mut_slice()[..x.len()].copy_from_slice(x);
    v[x.len()] = beta;
    v
}

fn zero_tail(eps: &mut [f64], from_step: usize, m: usize) {
    for e in &mut eps[from_step * m..] {
        *e = 0.0;
    }
}

fn capped(step: usize, min_h: f64, fb_sum: f64) -> SampleOutcome {
    SampleOutcome {
        cost: COST_CAP,
        safe: false,
        safe_steps: step,
        min_h,
        mean_feedback: fb_sum / (step + 1) as f64,
    }
}

/// Path cost of an already rolled-out embedded trajectory `[x, β]`.
///
/// `traj.states[k+1]` must be the result of applying `controls[k] + noise_k`.
/// Any state in `1..=T` with a nonpositive margin yields [`COST_CAP`].
pub fn path_cost(
    traj: &Trajectory,
    controls: &[Control],
    noise: &[f64],
    params: &PathCostParams,
    cfg: &SamplerConfig,
    field: &ObstacleField,
) -> (f64, bool) {
    let t = controls.len();
    let m = cfg.control_dim();
    let n = params.goal.len();
    if traj
        .states
        .iter()
        .skip(1)
        .any(|s| !field.is_safe(&s.as_slice()[..n]))
    {
        return (COST_CAP, false);
    }
    let scale = cfg.control_cost_scale();
    let sigma_inv = cfg.sigma_inv();
    let mut cost = 0.0;
    for k in 0..t {
        let s = traj.states[k].as_slice();
        cost += params.state_cost(&s[..n], s[n]);
        let u = controls[k].as_slice();
        let e = &noise[k * m..(k + 1) * m];
        for i in 0..m {
            cost += scale * (u[i] + 2.0 * e[i]) * params.r[i] * sigma_inv[i] * u[i];
        }
    }
    cost += params.terminal_cost(&traj.states[t].as_slice()[..n]);
    (cost, true)
}

/// Min-baseline softmax `w^n ∝ exp(-(S^n - min S)/λ)`; returns the weights and
/// the normalizer `η`.
pub fn compute_weights(costs: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    if costs.iter().all(|c| *c >= COST_CAP || !c.is_finite()) {
        return Err(Error::DegenerateBatch {
            samples: costs.len(),
        });
    }
    let baseline = costs
        .iter()
        .copied()
        .filter(|c| c.is_finite())
        .fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = costs
        .iter()
        .map(|c| {
            if c.is_finite() {
                (-(c - baseline) / lambda).exp()
            } else {
                0.0
            }
        })
        .collect();
    let eta: f64 = w.iter().sum();
    for wi in &mut w {
        *wi /= eta;
    }
    Ok((w, eta))
}

/// `u*_k = Σ_n w^n (u_k + ε^n_k)`.
pub fn update_controls(controls: &[Control], noise: &NoiseBatch, weights: &[f64]) -> Vec<Control> {
    let m = noise.dim;
    let mut out: Vec<Control> = controls.iter().map(|u| Control::zeros(u.len())).collect();
    for (n, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for (k, (o, u)) in out.iter_mut().zip(controls).enumerate() {
            let e = noise.at(n, k);
            for i in 0..m {
                o[i] += w * (u[i] + e[i]);
            }
        }
    }
    out
}

/// One sampling round: noise, rollouts, costs and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// Applied perturbations (after clamping).
    pub noise: NoiseBatch,
    pub costs: Vec<f64>,
    pub safe: Vec<bool>,
    pub safe_steps: Vec<usize>,
    pub min_h: Vec<f64>,
    pub mean_feedback: Vec<f64>,
    /// Empty when every sample hit the cap.
    pub weights: Vec<f64>,
    pub normalizer: f64,
}

impl SampleBatch {
    pub fn safe_rate(&self) -> f64 {
        if self.safe.is_empty() {
            return 0.0;
        }
        self.safe.iter().filter(|s| **s).count() as f64 / self.safe.len() as f64
    }

    pub fn min_cost(&self) -> f64 {
        self.costs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_cost(&self) -> f64 {
        self.costs.iter().sum::<f64>() / self.costs.len().max(1) as f64
    }
}

/// Samples `N` rollouts around `controls` from plant state `s0`.
pub fn sample_batch<P: Plant + ?Sized>(
    ctx: &RolloutContext<'_, P>,
    s0: &[f64],
    controls: &[Control],
    iteration: u64,
) -> SampleBatch {
    let mut noise = sample_noise(ctx.cfg, iteration);
    let len = noise.horizon * noise.dim;
    let outcomes: Vec<SampleOutcome> = noise
        .data
        .par_chunks_mut(len.max(1))
        .map(|eps| rollout_sample(ctx, s0, controls, eps, None))
        .collect();
    let costs: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
    let (weights, normalizer) = compute_weights(&costs, ctx.cfg.lambda).unwrap_or_default();
    SampleBatch {
        noise,
        safe: outcomes.iter().map(|o| o.safe).collect(),
        safe_steps: outcomes.iter().map(|o| o.safe_steps).collect(),
        min_h: outcomes.iter().map(|o| o.min_h).collect(),
        mean_feedback: outcomes.iter().map(|o| o.mean_feedback).collect(),
        costs,
        weights,
        normalizer,
    }
}

/// Controls clamped into the actuator box.
pub fn clamp_sequence<P: Plant + ?Sized>(model: &P, controls: &[Control]) -> Vec<Control> {
    controls
        .iter()
        .map(|u| {
            let mut c = u.clone();
            model.limits().clamp_slice(c.as_mut_slice());
            c
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub controls: Vec<Control>,
    /// One batch per iteration.
    pub batches: Vec<SampleBatch>,
}

impl StepOutput {
    /// Mean safe-sample rate over the iterations of this step.
    pub fn safe_rate(&self) -> f64 {
        if self.batches.is_empty() {
            return 0.0;
        }
        self.batches.iter().map(|b| b.safe_rate()).sum::<f64>() / self.batches.len() as f64
    }
}

/// Batch key for iteration `p` of MPC step `step`.
pub fn iteration_key(step: u64, iters: usize, p: usize) -> u64 {
    step * iters.max(1) as u64 + p as u64
}

/// `P` rounds of sample, weight and update from plant state `s0`.
#[allow(clippy::too_many_arguments)]
pub fn mppi_step<P: Plant + ?Sized>(
    s0: &State,
    controls: &[Control],
    model: &P,
    field: &ObstacleField,
    barrier: &BarrierConfig,
    params: &PathCostParams,
    cfg: &SamplerConfig,
    iters: usize,
    step: u64,
) -> Result<StepOutput> {
    cfg.validate()?;
    params.validate(model.state_dim(), model.control_dim())?;
    if controls.len() != cfg.horizon {
        return Err(Error::Dimension {
            what: "control sequence",
            expected: cfg.horizon,
            got: controls.len(),
        });
    }
    let ctx = RolloutContext {
        model,
        field,
        barrier,
        params,
        cfg,
        feedback: None,
    };
    let mut u = clamp_sequence(model, controls);
    let mut batches = Vec::with_capacity(iters);
    for p in 0..iters.max(1) {
        let batch = sample_batch(&ctx, s0.as_slice(), &u, iteration_key(step, iters, p));
        if batch.weights.is_empty() {
            return Err(Error::DegenerateBatch {
                samples: cfg.samples,
            });
        }
        u = update_controls(&u, &batch.noise, &batch.weights);
        batches.push(batch);
    }
    Ok(StepOutput {
        controls: u,
        batches,
    })
}

/// Receding-horizon shift: drop the first control and repeat the last.
pub fn shift_controls(controls: &[Control]) -> Vec<Control> {
    let mut out: Vec<Control> = controls.iter().skip(1).cloned().collect();
    if let Some(last) = controls.last() {
        out.push(last.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{embedded_rollout, SafetyConstraint};
    use crate::dynamics::{LinearModel, Model};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn cfg(samples: usize, horizon: usize, sigma: Vec<f64>) -> SamplerConfig {
        SamplerConfig {
            samples,
            horizon,
            lambda: 1.0,
            sigma,
            alpha: 0.0,
            seed: 42,
        }
    }

    #[test]
    fn zero_covariance_gives_zero_noise() {
        let b = sample_noise(&cfg(10, 5, vec![0.0, 0.0]), 3);
        assert!(b.data.iter().all(|e| *e == 0.0));
    }

    #[test]
    fn empirical_variance_matches_sigma() {
        let c = cfg(100_000, 1, vec![0.25, 4.0, 300.0]);
        let b = sample_noise(&c, 0);
        for (i, s2) in c.sigma.iter().enumerate() {
            let vals: Vec<f64> = (0..c.samples).map(|n| b.at(n, 0)[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((var / s2 - 1.0).abs() < 0.03, "dim {i}: {var} vs {s2}");
            assert!(mean.abs() < 0.02 * s2.sqrt() * 3.0);
        }
    }

    #[test]
    fn noise_is_deterministic_and_keyed() {
        let c = cfg(64, 20, vec![1.0, 2.0]);
        assert_eq!(sample_noise(&c, 7), sample_noise(&c, 7));
        assert_ne!(sample_noise(&c, 7), sample_noise(&c, 8));
        let mut c2 = c.clone();
        c2.samples = 128;
        // sample n does not depend on the batch size
        assert_eq!(
            sample_noise(&c, 7).sample(5),
            sample_noise(&c2, 7).sample(5)
        );
    }

    #[test]
    fn noise_independent_of_thread_count() {
        let c = cfg(256, 30, vec![1.0, 2.0, 3.0]);
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        assert_eq!(
            one.install(|| sample_noise(&c, 1)),
            four.install(|| sample_noise(&c, 1))
        );
    }

    fn scalar_model() -> LinearModel {
        LinearModel::new(
            DMatrix::from_element(1, 1, 0.9),
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap()
    }

    fn scalar_params(q_beta: f64) -> PathCostParams {
        PathCostParams {
            q: vec![2.0],
            r: vec![3.0],
            phi: vec![5.0],
            q_beta,
            goal: vec![1.0],
        }
    }

    #[test]
    fn pinned_at_goal_costs_nothing() {
        let model =
            LinearModel::new(DMatrix::identity(1, 1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let field = ObstacleField::empty();
        let barrier = BarrierConfig::inverse(0.0);
        let params = scalar_params(0.0);
        let c = cfg(1, 4, vec![1.0]);
        let controls = vec![Control::zeros(1); 4];
        let traj = embedded_rollout(
            &State::from_element(1, 1.0),
            &controls,
            &model,
            &barrier,
            &field,
        )
        .unwrap();
        let (cost, safe) = path_cost(&traj, &controls, &[0.0; 4], &params, &c, &field);
        assert!(safe);
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn unsafe_trajectory_costs_exactly_the_cap() {
        let model = Model::dubins(0.1);
        let field = ObstacleField::new(vec![SafetyConstraint::sphere(vec![1.0, 0.0], 0.3, 0.2)]);
        let barrier = BarrierConfig::relaxed(0.0, 0.05);
        let params = PathCostParams {
            q: vec![1.0; 3],
            r: vec![1.0; 2],
            phi: vec![1.0; 3],
            q_beta: 1.0,
            goal: vec![2.0, 0.0, 0.0],
        };
        let c = cfg(1, 20, vec![1.0, 1.0]);
        let controls = vec![Control::from_vec(vec![1.0, 0.0]); 20];
        let traj = embedded_rollout(&State::zeros(3), &controls, &model, &barrier, &field).unwrap();
        let (cost, safe) = path_cost(&traj, &controls, &[0.0; 40], &params, &c, &field);
        assert!(!safe);
        assert_eq!(cost, COST_CAP);
        let ctx = RolloutContext {
            model: &model,
            field: &field,
            barrier: &barrier,
            params: &params,
            cfg: &c,
            feedback: None,
        };
        let out = rollout_sample(&ctx, &[0.0; 3], &controls, &mut [0.0; 40], None);
        assert_eq!(out.cost, COST_CAP);
        assert!(!out.safe);
    }

    #[test]
    fn two_step_scalar_cost_by_hand() {
        let model = scalar_model();
        let field = ObstacleField::empty();
        let barrier = BarrierConfig::inverse(0.0);
        let params = scalar_params(0.0);
        let mut c = cfg(1, 2, vec![0.5]);
        c.lambda = 2.0;
        c.alpha = 0.25;
        let u = [0.4, -0.2];
        let e = [0.1, 0.3];
        let controls: Vec<Control> = u.iter().map(|v| Control::from_element(1, *v)).collect();
        let x0 = 0.2;
        let x1 = 0.9 * x0 + 0.5 * (u[0] + e[0]);
        let x2 = 0.9 * x1 + 0.5 * (u[1] + e[1]);
        let scale = 2.0 * 0.75 / 2.0;
        let oracle = 2.0 * (x0 - 1.0f64).powi(2)
            + 2.0 * (x1 - 1.0f64).powi(2)
            + scale * (u[0] + 2.0 * e[0]) * 3.0 * 2.0 * u[0]
            + scale * (u[1] + 2.0 * e[1]) * 3.0 * 2.0 * u[1]
            + 5.0 * (x2 - 1.0f64).powi(2);
        let perturbed: Vec<Control> = controls
            .iter()
            .zip(e)
            .map(|(u, e)| u.add_scalar(e))
            .collect();
        let traj = embedded_rollout(
            &State::from_element(1, x0),
            &perturbed,
            &model,
            &barrier,
            &field,
        )
        .unwrap();
        let (cost, _) = path_cost(&traj, &controls, &e, &params, &c, &field);
        assert_relative_eq!(cost, oracle, epsilon = 1e-12);
        let ctx = RolloutContext {
            model: &model,
            field: &field,
            barrier: &barrier,
            params: &params,
            cfg: &c,
            feedback: None,
        };
        let mut eps = e;
        let out = rollout_sample(&ctx, &[x0], &controls, &mut eps, None);
        assert_relative_eq!(out.cost, oracle, epsilon = 1e-12);
    }

    #[test]
    fn weight_examples() {
        let (w, _) = compute_weights(&[3.0; 5], 0.1).unwrap();
        for wi in w {
            assert_relative_eq!(wi, 0.2, epsilon = 1e-15);
        }
        let lambda = 0.7;
        let (w, _) = compute_weights(&[0.0, lambda * 2f64.ln()], lambda).unwrap();
        assert_relative_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(w[1], 1.0 / 3.0, epsilon = 1e-15);
        let (w, _) = compute_weights(&[COST_CAP, 0.0], 1.0).unwrap();
        assert!(w[0] < 1e-30);
        assert_eq!(w[1], 1.0);
        assert!(matches!(
            compute_weights(&[COST_CAP, COST_CAP], 1.0),
            Err(Error::DegenerateBatch { samples: 2 })
        ));
    }

    proptest! {
        #[test]
        fn weights_normalized_monotone_and_shift_invariant(
            costs in proptest::collection::vec(0.0f64..50.0, 1..40),
            lambda in 0.05f64..10.0,
            shift in -100.0f64..100.0,
        ) {
            let (w, _) = compute_weights(&costs, lambda).unwrap();
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            for i in 0..costs.len() {
                for j in 0..costs.len() {
                    if costs[i] < costs[j] {
                        prop_assert!(w[i] >= w[j]);
                    }
                }
            }
            let shifted: Vec<f64> = costs.iter().map(|c| c + shift).collect();
            let (ws, _) = compute_weights(&shifted, lambda).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let best = costs.iter().cloned().fold(f64::INFINITY, f64::min);
            let wmax = w.iter().cloned().fold(0.0, f64::max);
            let ibest = costs.iter().position(|c| *c == best).unwrap();
            prop_assert_eq!(w[ibest], wmax);
        }

        #[test]
        fn capped_samples_vanish(
            costs in proptest::collection::vec(0.0f64..1e3, 1..20),
            caps in 1usize..10,
            lambda in 0.01f64..10.0,
        ) {
            let mut all = costs.clone();
            all.extend(std::iter::repeat(COST_CAP).take(caps));
            let (w, _) = compute_weights(&all, lambda).unwrap();
            for wi in &w[costs.len()..] {
                prop_assert!(*wi < 1e-12);
            }
        }
    }

    #[test]
    fn update_examples() {
        let controls = vec![Control::from_vec(vec![1.0, 2.0]); 3];
        let mut noise = NoiseBatch::zeros(3, 3, 2);
        for (i, v) in noise.data.iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let out = update_controls(&controls, &noise, &[0.0, 1.0, 0.0]);
        for k in 0..3 {
            assert_relative_eq!(out[k][0], 1.0 + noise.at(1, k)[0], epsilon = 1e-15);
            assert_relative_eq!(out[k][1], 2.0 + noise.at(1, k)[1], epsilon = 1e-15);
        }
        let zero = NoiseBatch::zeros(3, 3, 2);
        let out = update_controls(&controls, &zero, &[0.2, 0.3, 0.5]);
        for k in 0..3 {
            assert_relative_eq!(out[k], controls[k], epsilon = 1e-15);
        }
    }

    #[test]
    fn update_matches_direct_sum() {
        let c = cfg(3, 4, vec![1.0, 0.5]);
        let noise = sample_noise(&c, 9);
        let controls: Vec<Control> = (0..4)
            .map(|k| Control::from_vec(vec![k as f64, -(k as f64)]))
            .collect();
        let w = [0.2, 0.5, 0.3];
        let out = update_controls(&controls, &noise, &w);
        for k in 0..4 {
            for i in 0..2 {
                let direct: f64 = (0..3)
                    .map(|n| w[n] * (controls[k][i] + noise.at(n, k)[i]))
                    .sum();
                assert!((out[k][i] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_noiseless_sample_is_a_fixed_point() {
        let model = Model::dubins(0.01);
        let field = ObstacleField::empty();
        let barrier = BarrierConfig::relaxed(0.0, 0.05);
        let params = PathCostParams {
            q: vec![1.0; 3],
            r: vec![0.0; 2],
            phi: vec![1.0; 3],
            q_beta: 0.0,
            goal: vec![1.0, 1.0, 0.0],
        };
        let c = cfg(1, 10, vec![1e-40, 1e-40]);
        let controls = vec![Control::from_vec(vec![1.0, 0.5]); 10];
        let out = mppi_step(
            &State::zeros(3),
            &controls,
            &model,
            &field,
            &barrier,
            &params,
            &c,
            1,
            0,
        )
        .unwrap();
        assert_eq!(out.controls, controls);
    }

    #[test]
    fn mppi_improves_nominal_cost_without_obstacles() {
        let model = Model::dubins(0.05);
        let field = ObstacleField::empty();
        let barrier = BarrierConfig::relaxed(0.0, 0.05);
        let params = PathCostParams {
            q: vec![1.0, 1.0, 0.0],
            r: vec![0.1, 0.1],
            phi: vec![10.0, 10.0, 0.0],
            q_beta: 0.0,
            goal: vec![3.0, 2.0, 0.0],
        };
        let controls = vec![Control::from_vec(vec![0.5, 0.0]); 30];
        let s0 = State::zeros(3);
        let nominal = |u: &[Control]| {
            let ctx = RolloutContext {
                model: &model,
                field: &field,
                barrier: &barrier,
                params: &params,
                cfg: &cfg(1, 30, vec![1.0, 1.0]),
                feedback: None,
            };
            rollout_sample(&ctx, s0.as_slice(), u, &mut vec![0.0; 60], None).cost
        };
        let before = nominal(&controls);
        let improved = (0..20)
            .filter(|seed| {
                let mut c = cfg(256, 30, vec![0.5, 0.5]);
                c.seed = *seed;
                c.lambda = 1.0;
                let out =
                    mppi_step(&s0, &controls, &model, &field, &barrier, &params, &c, 1, 0).unwrap();
                nominal(&out.controls) <= before
            })
            .count();
        assert!(improved >= 18, "{improved}/20");
    }

    #[test]
    fn mppi_step_reproducible_across_pools() {
        let model = Model::dubins(0.01);
        let field = ObstacleField::new(vec![SafetyConstraint::sphere(vec![0.3, 0.3], 0.1, 0.2)]);
        let barrier = BarrierConfig::inverse(0.0);
        let params = PathCostParams {
            q: vec![0.2; 3],
            r: vec![0.5e-3; 2],
            phi: vec![5.0, 5.0, 0.1],
            q_beta: 1e-2,
            goal: vec![10.0, 10.0, 0.0],
        };
        let mut c = cfg(200, 50, vec![300.0, 300.0]);
        c.lambda = 1e-3;
        let controls = vec![Control::from_vec(vec![1.0, 0.5]); 50];
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    mppi_step(
                        &State::zeros(3),
                        &controls,
                        &model,
                        &field,
                        &barrier,
                        &params,
                        &c,
                        3,
                        4,
                    )
                    .unwrap()
                })
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a, b);
        assert!(a.safe_rate() > 0.0 && a.safe_rate() < 1.0);
    }

    #[test]
    fn applied_noise_respects_limits() {
        let model = Model::dubins(0.01);
        let field = ObstacleField::empty();
        let barrier = BarrierConfig::relaxed(0.0, 0.05);
        let params = PathCostParams {
            q: vec![0.0; 3],
            r: vec![0.0; 2],
            phi: vec![0.0; 3],
            q_beta: 0.0,
            goal: vec![0.0; 3],
        };
        let c = cfg(50, 20, vec![100.0, 100.0]);
        let controls = vec![Control::from_vec(vec![5.0, 1.0]); 20];
        let ctx = RolloutContext {
            model: &model,
            field: &field,
            barrier: &barrier,
            params: &params,
            cfg: &c,
            feedback: None,
        };
        let batch = sample_batch(&ctx, &[0.0; 3], &controls, 0);
        let lim = model.limits();
        for n in 0..50 {
            for k in 0..20 {
                for i in 0..2 {
                    let v = controls[k][i] + batch.noise.at(n, k)[i];
                    assert!(v >= lim.lower[i] - 1e-12 && v <= lim.upper[i] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn shift_repeats_last() {
        let u: Vec<Control> = (0..3).map(|k| Control::from_element(1, k as f64)).collect();
        let s = shift_controls(&u);
        assert_eq!(s[0][0], 1.0);
        assert_eq!(s[1][0], 2.0);
        assert_eq!(s[2][0], 2.0);
    }
}
