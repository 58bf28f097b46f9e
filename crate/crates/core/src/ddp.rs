//! Differential dynamic programming on the barrier-embedded model.
//!
//! Embedded states are packed as `[x, β]` (length `n + 1`). Value and
//! Q-function expansions keep the plant and barrier blocks separate so the
//! barrier gain `K_BaS = -Q_uu⁻¹ Q_uβ` is available directly.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{embedded_rollout, embedded_step_vec, BarrierConfig, ObstacleField};
use crate::dynamics::{Control, Plant, State, Trajectory};
use crate::error::{Error, Result};

/// `Σ (x̄-ḡ)ᵀQ(x̄-ḡ) + (u-u_r)ᵀR(u-u_r)` plus terminal `(x̄-ḡ)ᵀΦ(x̄-ḡ)`,
/// where `x̄ = [x, β]` and the goal has `β = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub goal: State,
    pub control_ref: Control,
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-12 * scale
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .all(|l| *l >= -1e-12 * m.amax().max(1.0))
}

impl QuadraticCost {
    pub fn new(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        phi: DMatrix<f64>,
        goal: State,
        control_ref: Control,
    ) -> Result<Self> {
        let nb = goal.len();
        let m = control_ref.len();
        for (what, mat, dim) in [("Q", &q, nb), ("Phi", &phi, nb), ("R", &r, m)] {
            if mat.nrows() != dim || mat.ncols() != dim {
                return Err(Error::InvalidState(format!(
                    "{what} must be {dim}x{dim}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            if !mat.iter().all(|v| v.is_finite()) || !is_symmetric(mat) {
                return Err(Error::InvalidState(format!(
                    "{what} must be finite and symmetric"
                )));
            }
        }
        if !is_psd(&q) || !is_psd(&phi) {
            return Err(Error::InvalidState(
                "Q and Phi must be positive semidefinite".into(),
            ));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::InvalidState("R must be positive definite".into()));
        }
        Ok(Self {
            q,
            r,
            phi,
            goal,
            control_ref,
        })
    }

    /// Diagonal weights; `q_beta` is appended to the plant diagonals of `Q`.
    pub fn diagonal(
        q: &[f64],
        q_beta: f64,
        r: &[f64],
        phi: &[f64],
        goal: &State,
        control_ref: &Control,
    ) -> Result<Self> {
        let n = goal.len();
        if q.len() != n || phi.len() != n || r.len() != control_ref.len() {
            return Err(Error::Dimension {
                what: "cost diagonal",
                expected: n,
                got: q.len().min(phi.len()),
            });
        }
        let mut qd: Vec<f64> = q.to_vec();
        qd.push(q_beta);
        let mut pd: Vec<f64> = phi.to_vec();
        pd.push(0.0);
        let mut g = goal.as_slice().to_vec();
        g.push(0.0);
        Self::new(
            DMatrix::from_diagonal(&DVector::from_vec(qd)),
            DMatrix::from_diagonal(&DVector::from_row_slice(r)),
            DMatrix::from_diagonal(&DVector::from_vec(pd)),
            DVector::from_vec(g),
            control_ref.clone(),
        )
    }

    pub fn embedded_dim(&self) -> usize {
        self.goal.len()
    }

    pub fn stage(&self, xbar: &[f64], u: &[f64]) -> f64 {
        let dx = DVector::from_row_slice(xbar) - &self.goal;
        let du = DVector::from_row_slice(u) - &self.control_ref;
        dx.dot(&(&self.q * &dx)) + du.dot(&(&self.r * &du))
    }

    pub fn terminal(&self, xbar: &[f64]) -> f64 {
        let dx = DVector::from_row_slice(xbar) - &self.goal;
        dx.dot(&(&self.phi * &dx))
    }

    pub fn trajectory_cost(&self, traj: &Trajectory) -> f64 {
        let running: f64 = traj
            .controls
            .iter()
            .zip(&traj.states)
            .map(|(u, x)| self.stage(x.as_slice(), u.as_slice()))
            .sum();
        running
            + traj
                .final_state()
                .map_or(0.0, |x| self.terminal(x.as_slice()))
    }

    pub fn stage_derivatives(&self, xbar: &[f64], u: &[f64]) -> CostDerivatives {
        let n = xbar.len() - 1;
        let dx = DVector::from_row_slice(xbar) - &self.goal;
        let du = DVector::from_row_slice(u) - &self.control_ref;
        let gx = 2.0 * &self.q * dx;
        let hxx = 2.0 * &self.q;
        let m = u.len();
        CostDerivatives {
            l_x: gx.rows(0, n).into_owned(),
            l_b: gx[n],
            l_u: 2.0 * &self.r * du,
            l_xx: hxx.view((0, 0), (n, n)).into_owned(),
            l_bb: hxx[(n, n)],
            l_xb: hxx.view((0, n), (n, 1)).column(0).into_owned(),
            l_uu: 2.0 * &self.r,
            l_xu: DMatrix::zeros(n, m),
            l_bu: DVector::zeros(m),
        }
    }

    pub fn terminal_expansion(&self, xbar: &[f64]) -> ValueExpansion {
        let n = xbar.len() - 1;
        let dx = DVector::from_row_slice(xbar) - &self.goal;
        let g = 2.0 * &self.phi * &dx;
        let h = 2.0 * &self.phi;
        ValueExpansion {
            v: dx.dot(&(&self.phi * &dx)),
            v_x: g.rows(0, n).into_owned(),
            v_b: g[n],
            v_xx: h.view((0, 0), (n, n)).into_owned(),
            v_xb: h.view((0, n), (n, 1)).column(0).into_owned(),
            v_bb: h[(n, n)],
        }
    }
}

/// First and second derivatives of a stage cost, partitioned by `x`, `β`, `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostDerivatives {
    pub l_x: DVector<f64>,
    pub l_b: f64,
    pub l_u: DVector<f64>,
    pub l_xx: DMatrix<f64>,
    pub l_bb: f64,
    pub l_xb: DVector<f64>,
    pub l_uu: DMatrix<f64>,
    pub l_xu: DMatrix<f64>,
    pub l_bu: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueExpansion {
    pub v: f64,
    pub v_x: DVector<f64>,
    pub v_b: f64,
    pub v_xx: DMatrix<f64>,
    pub v_xb: DVector<f64>,
    pub v_bb: f64,
}

impl ValueExpansion {
    pub fn zeros(n: usize) -> Self {
        Self {
            v: 0.0,
            v_x: DVector::zeros(n),
            v_b: 0.0,
            v_xx: DMatrix::zeros(n, n),
            v_xb: DVector::zeros(n),
            v_bb: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite()
            && self.v_b.is_finite()
            && self.v_bb.is_finite()
            && self.v_x.iter().all(|v| v.is_finite())
            && self.v_xx.iter().all(|v| v.is_finite())
            && self.v_xb.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QExpansion {
    /// Constant term `l + V'`.
    pub q: f64,
    pub q_x: DVector<f64>,
    pub q_b: f64,
    pub q_u: DVector<f64>,
    pub q_xx: DMatrix<f64>,
    pub q_bb: f64,
    pub q_xb: DVector<f64>,
    pub q_uu: DMatrix<f64>,
    pub q_xu: DMatrix<f64>,
    pub q_bu: DVector<f64>,
}

/// Jacobians of the embedded step `[F(x,u), F^β(x,β,u)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedJacobians {
    pub f_x: DMatrix<f64>,
    pub f_u: DMatrix<f64>,
    /// `∂F^β/∂x` as a column.
    pub fb_x: DVector<f64>,
    pub fb_u: DVector<f64>,
    pub fb_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gains {
    pub feedforward: DVector<f64>,
    pub k_x: DMatrix<f64>,
    pub k_b: DVector<f64>,
    /// Diagonal shift that made `Q_uu` factorizable.
    pub regularization: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    /// Embedded reference `[x, β]` states and the controls that produced them.
    pub reference: Trajectory,
    pub feedforward: Vec<DVector<f64>>,
    pub state_gains: Vec<DMatrix<f64>>,
    /// `K_BaS` per step.
    pub barrier_gains: Vec<DVector<f64>>,
    /// Predicted cost change of a full step.
    pub expected_reduction: f64,
}

impl FeedbackPolicy {
    /// Policy that replays `reference` with zero gains.
    pub fn zero(reference: Trajectory) -> Self {
        let t = reference.horizon();
        let m = reference.controls.first().map_or(0, |u| u.len());
        let n = reference.states[0].len() - 1;
        Self {
            feedforward: vec![DVector::zeros(m); t],
            state_gains: vec![DMatrix::zeros(m, n); t],
            barrier_gains: vec![DVector::zeros(m); t],
            reference,
            expected_reduction: 0.0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.feedforward.len()
    }

    /// `û_k + α k_ff + K_x δx + K_BaS δβ` before clamping.
    pub fn control_into(&self, k: usize, xbar: &[f64], alpha: f64, out: &mut [f64]) {
        let n = xbar.len() - 1;
        let xr = &self.reference.states[k];
        let kx = &self.state_gains[k];
        let kb = &self.barrier_gains[k];
        let db = xbar[n] - xr[n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut v = self.reference.controls[k][i] + alpha * self.feedforward[k][i];
            for j in 0..n {
                v += kx[(i, j)] * (xbar[j] - xr[j]);
            }
            *o = v + kb[i] * db;
        }
    }

    pub fn gains_finite(&self) -> bool {
        self.feedforward
            .iter()
            .chain(&self.barrier_gains)
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self
                .state_gains
                .iter()
                .all(|m| m.iter().all(|x| x.is_finite()))
    }
}

fn default_max_iters() -> usize {
    20
}
fn default_tolerance() -> f64 {
    1e-6
}
fn default_reg_init() -> f64 {
    1e-6
}
fn default_reg_growth() -> f64 {
    10.0
}
fn default_reg_max() -> f64 {
    1e6
}
fn default_line_search() -> usize {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpOptions {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop when the relative cost improvement drops below this.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_reg_init")]
    pub reg_init: f64,
    #[serde(default = "default_reg_growth")]
    pub reg_growth: f64,
    #[serde(default = "default_reg_max")]
    pub reg_max: f64,
    /// Number of halvings tried, starting from a full step.
    #[serde(default = "default_line_search")]
    pub line_search_steps: usize,
}

impl Default for DdpOptions {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            tolerance: default_tolerance(),
            reg_init: default_reg_init(),
            reg_growth: default_reg_growth(),
            reg_max: default_reg_max(),
            line_search_steps: default_line_search(),
        }
    }
}

impl DdpOptions {
    pub fn with_iters(max_iters: usize) -> Self {
        Self {
            max_iters,
            ..Self::default()
        }
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        (0..self.line_search_steps.max(1))
            .map(|i| 0.5f64.powi(i as i32))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance >= 0.0)
            || !(self.reg_init > 0.0)
            || !(self.reg_growth > 1.0)
            || !(self.reg_max >= self.reg_init)
        {
            return Err(Error::InvalidState(format!("invalid DDP options {self:?}")));
        }
        Ok(())
    }
}

/// Model, cost and constraint set for one DDP solve.
pub struct EmbeddedProblem<'a, P: Plant + ?Sized> {
    pub model: &'a P,
    pub cost: &'a QuadraticCost,
    pub barrier: &'a BarrierConfig,
    pub field: &'a ObstacleField,
}

impl<P: Plant + ?Sized> Clone for EmbeddedProblem<'_, P> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<P: Plant + ?Sized> Copy for EmbeddedProblem<'_, P> {}

/// Jacobians of the unclamped embedded step: central differences, with the
/// plant block taken from [`Plant::linearization`] when available.
pub fn embedded_jacobians<P: Plant + ?Sized>(
    xbar: &[f64],
    u: &[f64],
    model: &P,
    barrier: &BarrierConfig,
    field: &ObstacleField,
) -> Result<EmbeddedJacobians> {
    let n = model.state_dim();
    let m = model.control_dim();
    let nb = n + 1;
    if xbar.len() != nb || u.len() != m {
        return Err(Error::Dimension {
            what: "embedded jacobian input",
            expected: nb + m,
            got: xbar.len() + u.len(),
        });
    }
    let mut z: Vec<f64> = xbar.iter().chain(u).copied().collect();
    let mut plus = vec![0.0; nb];
    let mut minus = vec![0.0; nb];
    let mut jac = DMatrix::zeros(nb, nb + m);
    for j in 0..nb + m {
        let orig = z[j];
        let eps = 1e-6 * orig.abs().max(1.0);
        z[j] = orig + eps;
        embedded_step_vec(&z[..nb], &z[nb..], model, barrier, field, false, &mut plus)?;
        z[j] = orig - eps;
        embedded_step_vec(&z[..nb], &z[nb..], model, barrier, field, false, &mut minus)?;
        z[j] = orig;
        for i in 0..nb {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * eps);
        }
    }
    let (f_x, f_u) = model.linearization(&xbar[..n], u).unwrap_or_else(|| {
        (
            jac.view((0, 0), (n, n)).into_owned(),
            jac.view((0, nb), (n, m)).into_owned(),
        )
    });
    Ok(EmbeddedJacobians {
        f_x,
        f_u,
        fb_x: jac.row(n).columns(0, n).transpose().into_owned(),
        fb_u: jac.row(n).columns(nb, m).transpose().into_owned(),
        fb_b: jac[(n, n)],
    })
}

/// Second-order expansion of `l(x̄,u) + V'(F̄(x̄,u))` in barrier-partitioned
/// form (no second-order dynamics terms).
pub fn q_expansion(
    val: &ValueExpansion,
    jac: &EmbeddedJacobians,
    l: &CostDerivatives,
) -> QExpansion {
    let EmbeddedJacobians {
        f_x,
        f_u,
        fb_x,
        fb_u,
        fb_b,
    } = jac;
    let fb_b = *fb_b;
    let fxt_vxb = f_x.transpose() * &val.v_xb;
    let fut_vxb = f_u.transpose() * &val.v_xb;

    let q_x = f_x.transpose() * &val.v_x + val.v_b * fb_x + &l.l_x;
    let q_b = val.v_b * fb_b + l.l_b;
    let q_u = f_u.transpose() * &val.v_x + val.v_b * fb_u + &l.l_u;

    let q_xx = f_x.transpose() * &val.v_xx * f_x
        + &fxt_vxb * fb_x.transpose()
        + fb_x * fxt_vxb.transpose()
        + val.v_bb * fb_x * fb_x.transpose()
        + &l.l_xx;
    let q_bb = fb_b * val.v_bb * fb_b + l.l_bb;
    let q_xb = &fxt_vxb * fb_b + fb_x * (val.v_bb * fb_b) + &l.l_xb;
    let q_uu = f_u.transpose() * &val.v_xx * f_u
        + &fut_vxb * fb_u.transpose()
        + fb_u * fut_vxb.transpose()
        + val.v_bb * fb_u * fb_u.transpose()
        + &l.l_uu;
    let q_xu = f_x.transpose() * &val.v_xx * f_u
        + &fxt_vxb * fb_u.transpose()
        + fb_x * fut_vxb.transpose()
        + val.v_bb * fb_x * fb_u.transpose()
        + &l.l_xu;
    let q_bu = fb_b * &fut_vxb + (fb_b * val.v_bb) * fb_u + &l.l_bu;

    QExpansion {
        q: val.v,
        q_x,
        q_b,
        q_u,
        q_xx,
        q_bb,
        q_xb,
        q_uu,
        q_xu,
        q_bu,
    }
}

/// `δu* = k_ff + K_x δx + K_BaS δβ` from the (shifted) `Q_uu`.
///
/// `reg = 0` is tried first; on a failed factorization the shift starts at
/// `opts.reg_init` and grows by `opts.reg_growth` up to `opts.reg_max`.
pub fn optimal_variation(q: &QExpansion, reg: f64, opts: &DdpOptions) -> Result<Gains> {
    let m = q.q_u.len();
    let mut mu = reg;
    let chol = loop {
        let shifted = &q.q_uu + DMatrix::identity(m, m) * mu;
        if let Some(c) = Cholesky::new(shifted) {
            break c;
        }
        mu = if mu <= 0.0 {
            opts.reg_init
        } else {
            mu * opts.reg_growth
        };
        if mu > opts.reg_max {
            return Err(Error::SolverFailure(format!(
                "Q_uu regularization exceeded {:e}",
                opts.reg_max
            )));
        }
    };
    Ok(Gains {
        feedforward: -chol.solve(&q.q_u),
        k_x: -chol.solve(&q.q_xu.transpose()),
        k_b: -chol.solve(&q.q_bu),
        regularization: mu,
    })
}

/// Value expansion at step k from the Q-terms and gains at step k.
pub fn riccati_update(q: &QExpansion, gains: &Gains) -> ValueExpansion {
    let k = &gains.feedforward;
    let v_xx = &q.q_xx + &q.q_xu * &gains.k_x;
    ValueExpansion {
        v: q.q + 0.5 * q.q_u.dot(k),
        v_x: &q.q_x + &q.q_xu * k,
        v_b: q.q_b + q.q_bu.dot(k),
        v_xx: (&v_xx + v_xx.transpose()) * 0.5,
        v_xb: &q.q_xb + &q.q_xu * &gains.k_b,
        v_bb: q.q_bb + q.q_bu.dot(&gains.k_b),
    }
}

/// Backward sweep over an embedded reference trajectory.
pub fn backward_pass<P: Plant + ?Sized>(
    problem: EmbeddedProblem<'_, P>,
    reference: &Trajectory,
    opts: &DdpOptions,
) -> Result<FeedbackPolicy> {
    let t = reference.horizon();
    if t == 0 || reference.states.len() != t + 1 {
        return Err(Error::InvalidState(
            "reference trajectory must have T controls and T+1 states".into(),
        ));
    }
    let m = problem.model.control_dim();
    let n = problem.model.state_dim();
    let mut value = problem
        .cost
        .terminal_expansion(reference.states[t].as_slice());
    let mut feedforward = vec![DVector::zeros(m); t];
    let mut state_gains = vec![DMatrix::zeros(m, n); t];
    let mut barrier_gains = vec![DVector::zeros(m); t];
    let mut expected = 0.0;
    for k in (0..t).rev() {
        let x = reference.states[k].as_slice();
        let u = reference.controls[k].as_slice();
        let step = || -> Result<(Gains, ValueExpansion, f64)> {
            let jac = embedded_jacobians(x, u, problem.model, problem.barrier, problem.field)?;
            let l = problem.cost.stage_derivatives(x, u);
            let mut q = q_expansion(&value, &jac, &l);
            q.q += problem.cost.stage(x, u);
            let gains = optimal_variation(&q, 0.0, opts)?;
            let dv = gains.feedforward.dot(&q.q_u)
                + 0.5 * gains.feedforward.dot(&(&q.q_uu * &gains.feedforward));
            let next = riccati_update(&q, &gains);
            Ok((gains, next, dv))
        };
        let (gains, next, dv) = step().map_err(|e| e.at_step(k))?;
        if !next.is_finite() {
            return Err(Error::SolverFailure("non-finite value expansion".into()).at_step(k));
        }
        expected += dv;
        feedforward[k] = gains.feedforward;
        state_gains[k] = gains.k_x;
        barrier_gains[k] = gains.k_b;
        value = next;
    }
    Ok(FeedbackPolicy {
        reference: reference.clone(),
        feedforward,
        state_gains,
        barrier_gains,
        expected_reduction: expected,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub trajectory: Trajectory,
    pub cost: f64,
    /// Accepted line-search step, `None` when no step decreased the cost.
    pub step_size: Option<f64>,
}

impl ForwardPass {
    pub fn improved(&self) -> bool {
        self.step_size.is_some()
    }
}

fn rollout_policy<P: Plant + ?Sized>(
    problem: EmbeddedProblem<'_, P>,
    policy: &FeedbackPolicy,
    xbar0: &State,
    alpha: f64,
) -> Result<Trajectory> {
    let nb = xbar0.len();
    let m = problem.model.control_dim();
    let mut states = Vec::with_capacity(policy.horizon() + 1);
    let mut controls = Vec::with_capacity(policy.horizon());
    states.push(xbar0.clone());
    for k in 0..policy.horizon() {
        let mut u = Control::zeros(m);
        policy.control_into(k, states[k].as_slice(), alpha, u.as_mut_slice());
        problem.model.limits().clamp_slice(u.as_mut_slice());
        let mut next = State::zeros(nb);
        embedded_step_vec(
            states[k].as_slice(),
            u.as_slice(),
            problem.model,
            problem.barrier,
            problem.field,
            false,
            next.as_mut_slice(),
        )
        .map_err(|e| e.at_step(k))?;
        states.push(next);
        controls.push(u);
    }
    Ok(Trajectory { states, controls })
}

/// Backtracking rollout of `policy`; accepts the first step size that strictly
/// lowers the cost of the reference.
pub fn forward_pass<P: Plant + ?Sized>(
    problem: EmbeddedProblem<'_, P>,
    policy: &FeedbackPolicy,
    xbar0: &State,
    step_sizes: &[f64],
) -> Result<ForwardPass> {
    let ref_cost = problem.cost.trajectory_cost(&policy.reference);
    for &alpha in step_sizes {
        let traj = match rollout_policy(problem, policy, xbar0, alpha) {
            Ok(t) => t,
            Err(Error::AtStep { source, .. })
                if matches!(*source, Error::UnsafeEvaluation { .. }) =>
            {
                continue
            }
            Err(e) => return Err(e),
        };
        let cost = problem.cost.trajectory_cost(&traj);
        if cost.is_finite() && cost < ref_cost {
            return Ok(ForwardPass {
                trajectory: traj,
                cost,
                step_size: Some(alpha),
            });
        }
    }
    Ok(ForwardPass {
        trajectory: policy.reference.clone(),
        cost: ref_cost,
        step_size: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpSolution {
    pub policy: FeedbackPolicy,
    pub trajectory: Trajectory,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost of the initial rollout followed by each accepted iterate.
    pub cost_history: Vec<f64>,
}

/// Iterated backward/forward passes from plant state `s0`, with `β_0` set to
/// the barrier of `s0`. The returned policy is linearized about the returned
/// trajectory.
pub fn solve<P: Plant + ?Sized>(
    problem: EmbeddedProblem<'_, P>,
    s0: &State,
    initial_controls: &[Control],
    opts: &DdpOptions,
) -> Result<DdpSolution> {
    opts.validate()?;
    let mut traj = embedded_rollout(
        s0,
        initial_controls,
        problem.model,
        problem.barrier,
        problem.field,
    )?;
    let mut cost = problem.cost.trajectory_cost(&traj);
    if !cost.is_finite() {
        return Err(Error::SolverFailure(format!(
            "initial rollout cost is not finite ({cost})"
        )));
    }
    let mut history = vec![cost];
    if opts.max_iters == 0 {
        return Ok(DdpSolution {
            policy: FeedbackPolicy::zero(traj.clone()),
            trajectory: traj,
            cost,
            iterations: 0,
            converged: false,
            cost_history: history,
        });
    }
    let steps = opts.step_sizes();
    let xbar0 = traj.states[0].clone();
    let mut policy = backward_pass(problem, &traj, opts)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut stale = false;
    while iterations < opts.max_iters {
        if stale {
            policy = backward_pass(problem, &traj, opts)?;
        }
        iterations += 1;
        let fp = forward_pass(problem, &policy, &xbar0, &steps)?;
        if !fp.improved() {
            stale = false;
            converged = true;
            break;
        }
        let rel = (cost - fp.cost) / cost.abs().max(f64::MIN_POSITIVE);
        traj = fp.trajectory;
        cost = fp.cost;
        history.push(cost);
        stale = true;
        if rel < opts.tolerance {
            converged = true;
            break;
        }
    }
    if stale {
        policy = backward_pass(problem, &traj, opts)?;
    }
    Ok(DdpSolution {
        policy,
        trajectory: traj,
        cost,
        iterations,
        converged,
        cost_history: history,
    })
}
