//! Safety constraints, barrier functions and the discrete barrier state.
//!
//! A constraint is `h(p) = Σ_i s_i (p_i - o_i)² - r² - r_v²` over the
//! position components `p` of the state; the safe set is `h > 0` for every
//! constraint. All barriers are summed into one barrier state `β`, stored as
//! the last component of the embedded state vector.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Control, Plant, State, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConstraint {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default)]
    pub vehicle_radius: f64,
    /// Per-axis weights for ellipsoids; `None` is a sphere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_scales: Option<Vec<f64>>,
}

impl SafetyConstraint {
    pub fn sphere(center: Vec<f64>, radius: f64, vehicle_radius: f64) -> Self {
        Self {
            center,
            radius,
            vehicle_radius,
            axis_scales: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::InvalidState(format!(
                "obstacle radius must be > 0, got {}",
                self.radius
            )));
        }
        if !(self.vehicle_radius >= 0.0) {
            return Err(Error::InvalidState(format!(
                "vehicle radius must be >= 0, got {}",
                self.vehicle_radius
            )));
        }
        if let Some(s) = &self.axis_scales {
            if s.len() != self.center.len() || s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidState(
                    "axis scales must be positive and match the center dimension".into(),
                ));
            }
        }
        Ok(())
    }

    /// Safety margin at `position` (only the leading `center.len()` entries are read).
    #[inline]
    pub fn h(&self, position: &[f64]) -> f64 {
        let mut d2 = 0.0;
        match &self.axis_scales {
            None => {
                for (p, o) in position.iter().zip(&self.center) {
                    d2 += (p - o) * (p - o);
                }
            }
            Some(scales) => {
                for ((p, o), s) in position.iter().zip(&self.center).zip(scales) {
                    d2 += s * (p - o) * (p - o);
                }
            }
        }
        d2 - self.radius * self.radius - self.vehicle_radius * self.vehicle_radius
    }
}

/// Axis-aligned box the vehicle is expected to stay in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBounds {
    pub fn contains(&self, position: &[f64]) -> bool {
        position
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(p, (lo, hi))| *p >= *lo && *p <= *hi)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleField {
    #[serde(default)]
    pub constraints: Vec<SafetyConstraint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<DomainBounds>,
}

impl ObstacleField {
    pub fn new(constraints: Vec<SafetyConstraint>) -> Self {
        Self {
            constraints,
            bounds: None,
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.constraints
            .iter()
            .try_for_each(SafetyConstraint::validate)
    }

    /// Smallest margin over all constraints (`+∞` for an empty field).
    #[inline]
    pub fn min_h(&self, position: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.h(position))
            .fold(f64::INFINITY, f64::min)
    }

    #[inline]
    pub fn is_safe(&self, position: &[f64]) -> bool {
        self.constraints.iter().all(|c| c.h(position) > 0.0)
    }

    /// Aggregated barrier `Σ_i B(h_i)` at `position`.
    #[inline]
    pub fn barrier(&self, cfg: &BarrierConfig, position: &[f64]) -> Result<f64> {
        let mut beta = 0.0;
        for c in &self.constraints {
            beta += cfg.value(c.h(position))?;
        }
        Ok(beta)
    }
}

/// Per-constraint safety margins at state `s`.
pub fn eval_h(field: &ObstacleField, s: &[f64]) -> Vec<f64> {
    field.constraints.iter().map(|c| c.h(s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BarrierKind {
    /// `B(h) = 1/h`, undefined outside the safe set.
    Inverse,
    /// `1/h` for `h ≥ δ`, continued affinely by `(2δ - h)/δ²` below `δ`.
    RelaxedInverse,
}

fn default_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierConfig {
    pub kind: BarrierKind,
    /// Pole of the barrier-state dynamics, `|γ| ≤ 1`.
    #[serde(default)]
    pub gamma: f64,
    /// Relaxation knot for [`BarrierKind::RelaxedInverse`].
    #[serde(default = "default_delta")]
    pub delta: f64,
}

impl BarrierConfig {
    pub fn inverse(gamma: f64) -> Self {
        Self {
            kind: BarrierKind::Inverse,
            gamma,
            delta: default_delta(),
        }
    }

    pub fn relaxed(gamma: f64, delta: f64) -> Self {
        Self {
            kind: BarrierKind::RelaxedInverse,
            gamma,
            delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.abs() <= 1.0) {
            return Err(Error::InvalidState(format!(
                "barrier pole must satisfy |gamma| <= 1, got {}",
                self.gamma
            )));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidState(format!(
                "relaxation threshold must be > 0, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// Barrier of a single margin.
    #[inline]
    pub fn value(&self, h: f64) -> Result<f64> {
        match self.kind {
            BarrierKind::Inverse => {
                if h > 0.0 {
                    Ok(1.0 / h)
                } else {
                    Err(Error::UnsafeEvaluation { h })
                }
            }
            BarrierKind::RelaxedInverse => {
                if h >= self.delta {
                    Ok(1.0 / h)
                } else {
                    Ok((2.0 * self.delta - h) / (self.delta * self.delta))
                }
            }
        }
    }

    /// `dB/dh`.
    pub fn slope(&self, h: f64) -> Result<f64> {
        match self.kind {
            BarrierKind::Inverse => {
                if h > 0.0 {
                    Ok(-1.0 / (h * h))
                } else {
                    Err(Error::UnsafeEvaluation { h })
                }
            }
            BarrierKind::RelaxedInverse => {
                let h = h.max(self.delta);
                Ok(-1.0 / (h * h))
            }
        }
    }

    /// `β_{k+1}` given the barrier at the next and current plant states.
    #[inline]
    pub fn next_beta(&self, barrier_next: f64, barrier_now: f64, beta: f64) -> f64 {
        barrier_next - self.gamma * (beta - barrier_now)
    }
}

/// Sum of barriers over a list of margins.
pub fn eval_barrier(cfg: &BarrierConfig, h_values: &[f64]) -> Result<f64> {
    h_values
        .iter()
        .try_fold(0.0, |acc, h| Ok(acc + cfg.value(*h)?))
}

/// Discrete barrier-state update
/// `β_{k+1} = B(h(x_{k+1})) - γ (β_k - B(h(x_k)))`.
pub fn dbas_step(
    cfg: &BarrierConfig,
    field: &ObstacleField,
    s_next: &[f64],
    s: &[f64],
    beta: f64,
) -> Result<f64> {
    let b_next = field.barrier(cfg, s_next)?;
    let b_now = field.barrier(cfg, s)?;
    Ok(cfg.next_beta(b_next, b_now, beta))
}

/// Plant state together with its barrier state.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedState {
    pub plant: State,
    pub beta: f64,
}

impl EmbeddedState {
    /// Embeds `plant` with `β = B(h(plant))`.
    pub fn from_plant(plant: State, cfg: &BarrierConfig, field: &ObstacleField) -> Result<Self> {
        let beta = field.barrier(cfg, plant.as_slice())?;
        Ok(Self { plant, beta })
    }

    /// `[x, β]`.
    pub fn to_vector(&self) -> State {
        let n = self.plant.len();
        let mut v = State::zeros(n + 1);
        v.rows_mut(0, n).copy_from(&self.plant);
        v[n] = self.beta;
        v
    }

    pub fn from_vector(v: &State) -> Self {
        let n = v.len() - 1;
        Self {
            plant: v.rows(0, n).into_owned(),
            beta: v[n],
        }
    }
}

/// One step of the safety-embedded model `x̄_{k+1} = [F(x_k, u_k), F^β]`.
pub fn embedded_step<P: Plant + ?Sized>(
    sbar: &EmbeddedState,
    u: &Control,
    model: &P,
    cfg: &BarrierConfig,
    field: &ObstacleField,
) -> Result<EmbeddedState> {
    let plant = model.step(&sbar.plant, u)?;
    let beta = dbas_step(
        cfg,
        field,
        plant.as_slice(),
        sbar.plant.as_slice(),
        sbar.beta,
    )?;
    Ok(EmbeddedState { plant, beta })
}

/// Embedded step on packed vectors `[x, β]`, optionally bypassing the
/// actuator clamp (used by DDP for Jacobians).
pub(crate) fn embedded_step_vec<P: Plant + ?Sized>(
    xbar: &[f64],
    u: &[f64],
    model: &P,
    cfg: &BarrierConfig,
    field: &ObstacleField,
    clamp: bool,
    out: &mut [f64],
) -> Result<()> {
    let n = model.state_dim();
    let (x, beta) = (&xbar[..n], xbar[n]);
    if clamp {
        model.step_into(x, u, &mut out[..n])?;
    } else {
        model.step_unclamped_into(x, u, &mut out[..n])?;
    }
    let b_next = field.barrier(cfg, &out[..n])?;
    let b_now = field.barrier(cfg, x)?;
    out[n] = cfg.next_beta(b_next, b_now, beta);
    Ok(())
}

/// Rolls the embedded model from `s0` with `β_0 = B(h(x_0))`, returning packed
/// `[x, β]` states.
pub fn embedded_rollout<P: Plant + ?Sized>(
    s0: &State,
    controls: &[Control],
    model: &P,
    cfg: &BarrierConfig,
    field: &ObstacleField,
) -> Result<Trajectory> {
    let n = model.state_dim();
    let mut cur = EmbeddedState::from_plant(s0.clone(), cfg, field)
        .map_err(|e| e.at_step(0))?
        .to_vector();
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut applied = Vec::with_capacity(controls.len());
    states.push(cur.clone());
    for (k, u) in controls.iter().enumerate() {
        let mut uc = u.clone();
        model.limits().clamp_slice(uc.as_mut_slice());
        let mut next = State::zeros(n + 1);
        embedded_step_vec(
            cur.as_slice(),
            uc.as_slice(),
            model,
            cfg,
            field,
            false,
            next.as_mut_slice(),
        )
        .map_err(|e| e.at_step(k))?;
        states.push(next.clone());
        applied.push(uc);
        cur = next;
    }
    Ok(Trajectory {
        states,
        controls: applied,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SafetyCheck {
    pub safe: bool,
    pub first_violation: Option<usize>,
}

/// `true` iff every state satisfies `h > 0` for every constraint.
pub fn is_safe_trajectory(traj: &Trajectory, field: &ObstacleField) -> SafetyCheck {
    let first_violation = traj
        .states
        .iter()
        .position(|s| !field.is_safe(s.as_slice()));
    SafetyCheck {
        safe: first_violation.is_none(),
        first_violation,
    }
}
