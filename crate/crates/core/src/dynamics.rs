//! Plant models and deterministic rollouts.
//!
//! Every model is an explicit-Euler discretization of its ODE at the
//! configured `dt`. State layouts are fixed:
//!
//! | model             | state                                                   | control                   |
//! |-------------------|---------------------------------------------------------|---------------------------|
//! | `Dubins`          | `x, y, θ`                                               | `v, ω`                    |
//! | `Multirotor`      | `x, y, z, vx, vy, vz, qw, qx, qy, qz, p, q, r`          | `p_des, q_des, r_des, τ`  |
//! | `RigidQuadrotor`  | `x, y, z, φ, θ, ψ, vx, vy, vz, p, q, r`                 | rotor thrust offsets `f1..f4` from hover |
//!
//! Position always occupies the leading components, so obstacle constraints
//! can read it without knowing the model.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type State = DVector<f64>;
pub type Control = DVector<f64>;

/// Controls up to this size are clamped on the stack.
const STACK_CONTROL_DIM: usize = 8;

/// Discrete-time plant `x_{k+1} = F(x_k, u_k)` with box-limited controls.
pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn limits(&self) -> &ControlLimits;

    /// One step applying `u` as given.
    fn step_unclamped_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()>;

    /// One step with `u` clamped into the actuator limits first.
    fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let m = self.control_dim();
        if m <= STACK_CONTROL_DIM {
            let mut clamped = [0.0; STACK_CONTROL_DIM];
            clamped[..m].copy_from_slice(&u[..m]);
            self.limits().clamp_slice(&mut clamped[..m]);
            self.step_unclamped_into(x, &clamped[..m], out)
        } else {
            let mut clamped = u.to_vec();
            self.limits().clamp_slice(&mut clamped);
            self.step_unclamped_into(x, &clamped, out)
        }
    }

    /// Exact `(∂F/∂x, ∂F/∂u)` of the unclamped step, when the plant provides it.
    fn linearization(
        &self,
        _x: &[f64],
        _u: &[f64],
    ) -> Option<(nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>)> {
        None
    }

    fn step(&self, x: &State, u: &Control) -> Result<State> {
        check_dims(self, x, u)?;
        let mut out = State::zeros(self.state_dim());
        self.step_into(x.as_slice(), u.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }

    fn step_unclamped(&self, x: &State, u: &Control) -> Result<State> {
        check_dims(self, x, u)?;
        let mut out = State::zeros(self.state_dim());
        self.step_unclamped_into(x.as_slice(), u.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }
}

fn check_dims<P: Plant + ?Sized>(plant: &P, x: &State, u: &Control) -> Result<()> {
    if x.len() != plant.state_dim() {
        return Err(Error::Dimension {
            what: "state",
            expected: plant.state_dim(),
            got: x.len(),
        });
    }
    if u.len() != plant.control_dim() {
        return Err(Error::Dimension {
            what: "control",
            expected: plant.control_dim(),
            got: u.len(),
        });
    }
    Ok(())
}

/// `x_{k+1} = A x_k + B u_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: nalgebra::DMatrix<f64>,
    pub b: nalgebra::DMatrix<f64>,
    pub limits: ControlLimits,
}

impl LinearModel {
    pub fn new(a: nalgebra::DMatrix<f64>, b: nalgebra::DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(Error::Dimension {
                what: "linear model B rows",
                expected: a.nrows(),
                got: b.nrows(),
            });
        }
        let limits = ControlLimits::unbounded(b.ncols());
        Ok(Self { a, b, limits })
    }
}

impl Plant for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn limits(&self) -> &ControlLimits {
        &self.limits
    }

    fn linearization(
        &self,
        _x: &[f64],
        _u: &[f64],
    ) -> Option<(nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>)> {
        Some((self.a.clone(), self.b.clone()))
    }

    fn step_unclamped_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.state_dim();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += self.a[(i, j)] * xj;
            }
            for (j, uj) in u.iter().enumerate() {
                acc += self.b[(i, j)] * uj;
            }
            *o = acc;
        }
        if out[..n].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidState("non-finite linear model output".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlLimits {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlLimits {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let limits = Self { lower, upper };
        limits.validate()?;
        Ok(limits)
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::Dimension {
                what: "control limits",
                expected: self.lower.len(),
                got: self.upper.len(),
            });
        }
        if let Some(i) = (0..self.lower.len()).find(|&i| !(self.lower[i] <= self.upper[i])) {
            return Err(Error::InvalidState(format!(
                "control limit {i}: lower {} exceeds upper {}",
                self.lower[i], self.upper[i]
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp_slice(&self, u: &mut [f64]) {
        for ((ui, lo), hi) in u.iter_mut().zip(&self.lower).zip(&self.upper) {
            *ui = ui.clamp(*lo, *hi);
        }
    }
}

/// Elementwise clamp of `u` into `[lower, upper]`.
pub fn clamp_controls(u: &Control, limits: &ControlLimits) -> Control {
    debug_assert_eq!(u.len(), limits.dim());
    let mut out = u.clone();
    limits.clamp_slice(out.as_mut_slice());
    out
}

fn default_mass() -> f64 {
    1.0
}
fn default_gravity() -> f64 {
    9.81
}
fn default_kappa() -> [f64; 3] {
    [0.25, 0.25, 0.7]
}
fn default_inertia() -> [f64; 3] {
    [0.0082, 0.0082, 0.0149]
}
fn default_arm_length() -> f64 {
    0.17
}
fn default_yaw_moment() -> f64 {
    0.016
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Sampling time in seconds.
    pub dt: f64,
    #[serde(default = "default_mass")]
    pub mass: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    /// Body-rate time constants `κ_p, κ_q, κ_r` (multirotor only).
    #[serde(default = "default_kappa")]
    pub kappa: [f64; 3],
    #[serde(default)]
    pub vehicle_radius: f64,
    /// Principal inertias (rigid quadrotor only).
    #[serde(default = "default_inertia")]
    pub inertia: [f64; 3],
    #[serde(default = "default_arm_length")]
    pub arm_length: f64,
    /// Rotor drag-torque to thrust ratio (rigid quadrotor only).
    #[serde(default = "default_yaw_moment")]
    pub yaw_moment_coefficient: f64,
}

impl ModelParams {
    pub fn with_dt(dt: f64) -> Self {
        Self {
            dt,
            mass: default_mass(),
            gravity: default_gravity(),
            kappa: default_kappa(),
            vehicle_radius: 0.0,
            inertia: default_inertia(),
            arm_length: default_arm_length(),
            yaw_moment_coefficient: default_yaw_moment(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidState(format!(
                "dt must be > 0, got {}",
                self.dt
            )));
        }
        if !(self.mass > 0.0) {
            return Err(Error::InvalidState(format!(
                "mass must be > 0, got {}",
                self.mass
            )));
        }
        if self.kappa.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::InvalidState(format!(
                "time constants must be > 0, got {:?}",
                self.kappa
            )));
        }
        if self.inertia.iter().any(|j| !(*j > 0.0)) {
            return Err(Error::InvalidState(format!(
                "inertias must be > 0, got {:?}",
                self.inertia
            )));
        }
        if !(self.vehicle_radius >= 0.0) {
            return Err(Error::InvalidState(format!(
                "vehicle radius must be >= 0, got {}",
                self.vehicle_radius
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dubins,
    Multirotor,
    RigidQuadrotor,
}

impl ModelKind {
    pub fn state_dim(self) -> usize {
        match self {
            ModelKind::Dubins => 3,
            ModelKind::Multirotor => 13,
            ModelKind::RigidQuadrotor => 12,
        }
    }

    pub fn control_dim(self) -> usize {
        match self {
            ModelKind::Dubins => 2,
            ModelKind::Multirotor | ModelKind::RigidQuadrotor => 4,
        }
    }

    pub fn position_dim(self) -> usize {
        match self {
            ModelKind::Dubins => 2,
            ModelKind::Multirotor | ModelKind::RigidQuadrotor => 3,
        }
    }
}

/// A plant: dynamics kind, physical parameters and actuator limits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    params: ModelParams,
    limits: ControlLimits,
}

impl Model {
    pub fn new(kind: ModelKind, params: ModelParams, limits: ControlLimits) -> Result<Self> {
        params.validate()?;
        limits.validate()?;
        if limits.dim() != kind.control_dim() {
            return Err(Error::Dimension {
                what: "control limits",
                expected: kind.control_dim(),
                got: limits.dim(),
            });
        }
        Ok(Self {
            kind,
            params,
            limits,
        })
    }

    /// Dubins car with the aggressive-driving limits `v, ω ∈ [-0.1, 10]`.
    pub fn dubins(dt: f64) -> Self {
        let mut params = ModelParams::with_dt(dt);
        params.vehicle_radius = 0.2;
        Self::new(
            ModelKind::Dubins,
            params,
            ControlLimits::new(vec![-0.1, -0.1], vec![10.0, 10.0]).unwrap(),
        )
        .expect("valid dubins defaults")
    }

    /// Multirotor with body-rate limits ±10 rad/s and thrust in [0, 45] N.
    pub fn multirotor(dt: f64) -> Self {
        let mut params = ModelParams::with_dt(dt);
        params.vehicle_radius = 1.5;
        Self::new(
            ModelKind::Multirotor,
            params,
            ControlLimits::new(vec![-10.0, -10.0, -10.0, 0.0], vec![10.0, 10.0, 10.0, 45.0])
                .unwrap(),
        )
        .expect("valid multirotor defaults")
    }

    /// Rigid-body quadrotor driven by per-rotor thrust offsets from hover.
    pub fn rigid_quadrotor(dt: f64) -> Self {
        let params = ModelParams::with_dt(dt);
        let hover = params.mass * params.gravity / 4.0;
        Self::new(
            ModelKind::RigidQuadrotor,
            params,
            ControlLimits::new(vec![-hover; 4], vec![3.0 * hover; 4]).unwrap(),
        )
        .expect("valid quadrotor defaults")
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.params.dt
    }

    pub fn position_dim(&self) -> usize {
        self.kind.position_dim()
    }

    pub fn position<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[..self.kind.position_dim()]
    }

    /// Inertial velocity, when it is part of the state.
    pub fn velocity(&self, x: &[f64]) -> Option<[f64; 3]> {
        match self.kind {
            ModelKind::Dubins => None,
            ModelKind::Multirotor => Some([x[3], x[4], x[5]]),
            ModelKind::RigidQuadrotor => Some([x[6], x[7], x[8]]),
        }
    }

    /// Control that holds the vehicle at rest (zero for Dubins, hover thrust
    /// for the multirotor, zero offsets for the rigid quadrotor).
    pub fn trim_control(&self) -> Control {
        let mut u = Control::zeros(self.kind.control_dim());
        if self.kind == ModelKind::Multirotor {
            u[3] = self.params.mass * self.params.gravity;
        }
        u
    }

    /// Rest state at `position` (identity attitude for aerial models).
    pub fn state_at(&self, position: &[f64]) -> State {
        let mut x = State::zeros(self.kind.state_dim());
        for (xi, p) in x.iter_mut().zip(position) {
            *xi = *p;
        }
        if self.kind == ModelKind::Multirotor {
            x[6] = 1.0;
        }
        x
    }
}

impl Plant for Model {
    fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.kind.control_dim()
    }

    fn limits(&self) -> &ControlLimits {
        &self.limits
    }

    fn step_unclamped_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(x.len(), self.state_dim());
        debug_assert_eq!(u.len(), self.control_dim());
        if !x.iter().chain(u).all(|v| v.is_finite()) {
            return Err(Error::InvalidState(format!(
                "non-finite input to {:?} step",
                self.kind
            )));
        }
        match self.kind {
            ModelKind::Dubins => {
                dubins_rhs_step(x, u, self.params.dt, out);
                Ok(())
            }
            ModelKind::Multirotor => multirotor_step_into(x, u, &self.params, out),
            ModelKind::RigidQuadrotor => {
                rigid_quadrotor_step_into(x, u, &self.params, out);
                Ok(())
            }
        }
    }
}

fn dubins_rhs_step(x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) {
    let (v, omega) = (u[0], u[1]);
    let theta = x[2];
    out[0] = x[0] + dt * v * theta.cos();
    out[1] = x[1] + dt * v * theta.sin();
    out[2] = theta + dt * omega;
}

/// Explicit-Euler Dubins step. `u` is expected to be already clamped.
pub fn dubins_step(s: &State, u: &Control, p: &ModelParams) -> Result<State> {
    if s.len() != 3 || u.len() != 2 {
        return Err(Error::Dimension {
            what: "dubins state/control",
            expected: 5,
            got: s.len() + u.len(),
        });
    }
    if !s.iter().chain(u.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidState(
            "non-finite input to dubins step".into(),
        ));
    }
    let mut out = State::zeros(3);
    dubins_rhs_step(s.as_slice(), u.as_slice(), p.dt, out.as_mut_slice());
    Ok(out)
}

fn multirotor_step_into(x: &[f64], u: &[f64], p: &ModelParams, out: &mut [f64]) -> Result<()> {
    let dt = p.dt;
    let (qw, qx, qy, qz) = (x[6], x[7], x[8], x[9]);
    let (wp, wq, wr) = (x[10], x[11], x[12]);
    let thrust = u[3];

    // Third column of R(q) carries body-z thrust into the inertial frame.
    let ax = 2.0 * (qx * qz + qw * qy) * thrust / p.mass;
    let ay = 2.0 * (qy * qz - qw * qx) * thrust / p.mass;
    let az = (1.0 - 2.0 * (qx * qx + qy * qy)) * thrust / p.mass - p.gravity;

    let dqw = 0.5 * (-qx * wp - qy * wq - qz * wr);
    let dqx = 0.5 * (qw * wp - qz * wq + qy * wr);
    let dqy = 0.5 * (qz * wp + qw * wq - qx * wr);
    let dqz = 0.5 * (-qy * wp + qx * wq + qw * wr);

    out[0] = x[0] + dt * x[3];
    out[1] = x[1] + dt * x[4];
    out[2] = x[2] + dt * x[5];
    out[3] = x[3] + dt * ax;
    out[4] = x[4] + dt * ay;
    out[5] = x[5] + dt * az;

    let nw = qw + dt * dqw;
    let nx = qx + dt * dqx;
    let ny = qy + dt * dqy;
    let nz = qz + dt * dqz;
    let norm = (nw * nw + nx * nx + ny * ny + nz * nz).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidState("quaternion norm is zero".into()));
    }
    out[6] = nw / norm;
    out[7] = nx / norm;
    out[8] = ny / norm;
    out[9] = nz / norm;

    // First-order lag toward the commanded rates.
    out[10] = wp + dt * (u[0] - wp) / p.kappa[0];
    out[11] = wq + dt * (u[1] - wq) / p.kappa[1];
    out[12] = wr + dt * (u[2] - wr) / p.kappa[2];
    Ok(())
}

/// Explicit-Euler multirotor step with quaternion renormalization.
pub fn multirotor_step(s: &State, u: &Control, p: &ModelParams) -> Result<State> {
    if s.len() != 13 || u.len() != 4 {
        return Err(Error::Dimension {
            what: "multirotor state/control",
            expected: 17,
            got: s.len() + u.len(),
        });
    }
    if !s.iter().chain(u.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidState(
            "non-finite input to multirotor step".into(),
        ));
    }
    let qn = s.rows(6, 4).norm();
    if !(qn > 0.0) {
        return Err(Error::InvalidState("quaternion norm is zero".into()));
    }
    let mut out = State::zeros(13);
    multirotor_step_into(s.as_slice(), u.as_slice(), p, out.as_mut_slice())?;
    Ok(out)
}

fn rigid_quadrotor_step_into(x: &[f64], u: &[f64], p: &ModelParams, out: &mut [f64]) {
    let dt = p.dt;
    let hover = p.mass * p.gravity / 4.0;
    let f: [f64; 4] = [u[0] + hover, u[1] + hover, u[2] + hover, u[3] + hover];
    let thrust = f.iter().sum::<f64>();

    // Quad-X with motors 1 front-right, 2 rear-left, 3 front-left, 4 rear-right;
    // 1 and 2 spin counter-clockwise. Body x forward, y left, z up.
    let d = p.arm_length / std::f64::consts::SQRT_2;
    let tau_x = d * (-f[0] + f[1] + f[2] - f[3]);
    let tau_y = d * (-f[0] + f[1] - f[2] + f[3]);
    let tau_z = p.yaw_moment_coefficient * (-f[0] - f[1] + f[2] + f[3]);

    let (phi, theta, psi) = (x[3], x[4], x[5]);
    let (wp, wq, wr) = (x[9], x[10], x[11]);
    let (sphi, cphi) = phi.sin_cos();
    let (sth, cth) = theta.sin_cos();
    let (spsi, cpsi) = psi.sin_cos();

    let ax = (cphi * sth * cpsi + sphi * spsi) * thrust / p.mass;
    let ay = (cphi * sth * spsi - sphi * cpsi) * thrust / p.mass;
    let az = cphi * cth * thrust / p.mass - p.gravity;

    let tth = sth / cth;
    let dphi = wp + (sphi * wq + cphi * wr) * tth;
    let dtheta = cphi * wq - sphi * wr;
    let dpsi = (sphi * wq + cphi * wr) / cth;

    let [jx, jy, jz] = p.inertia;
    let dwp = (tau_x - (jz - jy) * wq * wr) / jx;
    let dwq = (tau_y - (jx - jz) * wr * wp) / jy;
    let dwr = (tau_z - (jy - jx) * wp * wq) / jz;

    out[0] = x[0] + dt * x[6];
    out[1] = x[1] + dt * x[7];
    out[2] = x[2] + dt * x[8];
    out[3] = phi + dt * dphi;
    out[4] = theta + dt * dtheta;
    out[5] = psi + dt * dpsi;
    out[6] = x[6] + dt * ax;
    out[7] = x[7] + dt * ay;
    out[8] = x[8] + dt * az;
    out[9] = wp + dt * dwp;
    out[10] = wq + dt * dwq;
    out[11] = wr + dt * dwr;
}

/// States `x_0..x_T` and the (clamped) controls `u_0..u_{T-1}` that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn final_state(&self) -> Option<&State> {
        self.states.last()
    }
}

/// Repeatedly steps `model` from `s0`, clamping each control.
pub fn rollout<P: Plant + ?Sized>(
    s0: &State,
    controls: &[Control],
    model: &P,
) -> Result<Trajectory> {
    if controls.is_empty() {
        return Err(Error::InvalidState(
            "rollout needs at least one control".into(),
        ));
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut applied = Vec::with_capacity(controls.len());
    states.push(s0.clone());
    for (k, u) in controls.iter().enumerate() {
        let uc = clamp_controls(u, model.limits());
        let next = model
            .step_unclamped(&states[k], &uc)
            .map_err(|e| e.at_step(k))?;
        states.push(next);
        applied.push(uc);
    }
    Ok(Trajectory {
        states,
        controls: applied,
    })
}
