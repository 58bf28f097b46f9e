//! Safety-controlled MPPI: importance sampling under barrier-state feedback
//! from a DBaS-DDP policy.

use log::warn;

use crate::barrier::{BarrierConfig, ObstacleField};
use crate::ddp::{self, DdpOptions, EmbeddedProblem, FeedbackPolicy, QuadraticCost};
use crate::dynamics::{Control, Plant, State};
use crate::error::{Error, Result};
use crate::mppi::{
    clamp_sequence, iteration_key, rollout_sample, sample_batch, update_controls, PathCostParams,
    RolloutContext, SampleBatch, SampleFeedback, SampleOutcome, SamplerConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SafeSamplerConfig {
    pub sampler: SamplerConfig,
    /// Nominal feedback scale `ν`.
    pub nu: f64,
    /// Diagonal of `R_fb`.
    pub r_fb: Vec<f64>,
    /// Inner DBaS-DDP settings (iteration cap and regularization).
    pub ddp: DdpOptions,
}

impl SafeSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.ddp.validate()?;
        if !(self.nu >= 0.0) || !self.nu.is_finite() {
            return Err(Error::InvalidState(format!(
                "feedback scale must be >= 0, got {}",
                self.nu
            )));
        }
        if self.r_fb.len() != self.sampler.control_dim() {
            return Err(Error::Dimension {
                what: "R_fb",
                expected: self.sampler.control_dim(),
                got: self.r_fb.len(),
            });
        }
        if self.r_fb.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::InvalidState(
                "R_fb must be positive semidefinite".into(),
            ));
        }
        Ok(())
    }
}

/// Corrected reference `U_S` with the policy that carries `K_BaS`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeFeedback {
    pub controls: Vec<Control>,
    pub policy: FeedbackPolicy,
    pub ddp_iterations: usize,
    /// DDP failed and the input sequence was passed through with zero gains.
    pub fallback: bool,
}

/// Runs DBaS-DDP from `s0` seeded with `controls`.
pub fn compute_safe_feedback<P: Plant + ?Sized>(
    s0: &State,
    controls: &[Control],
    problem: EmbeddedProblem<'_, P>,
    opts: &DdpOptions,
) -> Result<SafeFeedback> {
    match ddp::solve(problem, s0, controls, opts) {
        Ok(sol) => Ok(SafeFeedback {
            controls: sol.trajectory.controls.clone(),
            ddp_iterations: sol.iterations,
            policy: sol.policy,
            fallback: false,
        }),
        Err(e) => {
            warn!("safety feedback unavailable, sampling without it: {e}");
            let reference = crate::barrier::embedded_rollout(
                s0,
                controls,
                problem.model,
                problem.barrier,
                problem.field,
            )?;
            Ok(SafeFeedback {
                controls: reference.controls.clone(),
                policy: FeedbackPolicy::zero(reference),
                ddp_iterations: 0,
                fallback: true,
            })
        }
    }
}

/// One safety-controlled rollout of `U_S + ε` with `k_fb = ν K_BaS,k β_k`.
///
/// The sampling cost never contains a barrier penalty, whatever `params.q_beta` holds.
#[allow(clippy::too_many_arguments)]
pub fn scis_rollout<P: Plant + ?Sized>(
    s0: &State,
    feedback: &SafeFeedback,
    eps: &mut [f64],
    model: &P,
    field: &ObstacleField,
    barrier: &BarrierConfig,
    params: &PathCostParams,
    cfg: &SafeSamplerConfig,
    record: Option<&mut Vec<State>>,
) -> SampleOutcome {
    let params = PathCostParams {
        q_beta: 0.0,
        ..params.clone()
    };
    let ctx = RolloutContext {
        model,
        field,
        barrier,
        params: &params,
        cfg: &cfg.sampler,
        feedback: Some(SampleFeedback {
            gains: &feedback.policy.barrier_gains,
            nu: cfg.nu,
            r_fb: &cfg.r_fb,
        }),
    };
    rollout_sample(&ctx, s0.as_slice(), &feedback.controls, eps, record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScStepOutput {
    pub controls: Vec<Control>,
    pub batches: Vec<SampleBatch>,
    pub ddp_iterations: usize,
    /// Some iteration changed the reference it was handed.
    pub corrected: bool,
    pub fallback: bool,
    /// Mean over samples of the per-sample mean `|k_fb|`, last iteration.
    pub mean_feedback: f64,
    /// Last safe feedback computed.
    pub feedback: Option<SafeFeedback>,
}

impl ScStepOutput {
    pub fn safe_rate(&self) -> f64 {
        if self.batches.is_empty() {
            return 0.0;
        }
        self.batches.iter().map(|b| b.safe_rate()).sum::<f64>() / self.batches.len() as f64
    }
}

/// `P` rounds of safe feedback, SCIS sampling, weighting and update.
#[allow(clippy::too_many_arguments)]
pub fn sc_mppi_step<P: Plant + ?Sized>(
    s0: &State,
    controls: &[Control],
    model: &P,
    field: &ObstacleField,
    barrier: &BarrierConfig,
    params: &PathCostParams,
    ddp_cost: &QuadraticCost,
    cfg: &SafeSamplerConfig,
    iters: usize,
    step: u64,
) -> Result<ScStepOutput> {
    cfg.validate()?;
    params.validate(model.state_dim(), model.control_dim())?;
    if controls.len() != cfg.sampler.horizon {
        return Err(Error::Dimension {
            what: "control sequence",
            expected: cfg.sampler.horizon,
            got: controls.len(),
        });
    }
    let problem = EmbeddedProblem {
        model,
        cost: ddp_cost,
        barrier,
        field,
    };
    let sampling_params = PathCostParams {
        q_beta: 0.0,
        ..params.clone()
    };
    let mut u = clamp_sequence(model, controls);
    let mut out = ScStepOutput {
        controls: Vec::new(),
        batches: Vec::with_capacity(iters),
        ddp_iterations: 0,
        corrected: false,
        fallback: false,
        mean_feedback: 0.0,
        feedback: None,
    };
    for p in 0..iters.max(1) {
        let fb = compute_safe_feedback(s0, &u, problem, &cfg.ddp)?;
        out.ddp_iterations += fb.ddp_iterations;
        out.fallback |= fb.fallback;
        out.corrected |= fb.controls != u;
        let ctx = RolloutContext {
            model,
            field,
            barrier,
            params: &sampling_params,
            cfg: &cfg.sampler,
            feedback: Some(SampleFeedback {
                gains: &fb.policy.barrier_gains,
                nu: cfg.nu,
                r_fb: &cfg.r_fb,
            }),
        };
        let batch = sample_batch(
            &ctx,
            s0.as_slice(),
            &fb.controls,
            iteration_key(step, iters, p),
        );
        out.mean_feedback =
            batch.mean_feedback.iter().sum::<f64>() / batch.mean_feedback.len().max(1) as f64;
        if batch.weights.is_empty() {
            warn!("every safety-controlled sample left the safe set; keeping the reference");
            u = fb.controls.clone();
            out.batches.push(batch);
            out.feedback = Some(fb);
            break;
        }
        u = update_controls(&fb.controls, &batch.noise, &batch.weights);
        out.batches.push(batch);
        out.feedback = Some(fb);
    }
    out.controls = u;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{is_safe_trajectory, SafetyConstraint};
    use crate::dynamics::{Model, Trajectory};
    use crate::mppi::{mppi_step, NoiseBatch};
    use nalgebra::DVector;
    use proptest::prelude::*;

    struct Setup {
        model: Model,
        field: ObstacleField,
        barrier: BarrierConfig,
        params: PathCostParams,
        ddp_cost: QuadraticCost,
        cfg: SafeSamplerConfig,
    }

    fn dubins_setup(field: ObstacleField, samples: usize, nu: f64, ddp_iters: usize) -> Setup {
        let model = Model::dubins(0.05);
        let goal = vec![10.0, 10.0, 0.0];
        Setup {
            params: PathCostParams {
                q: vec![0.2, 0.2, 0.2],
                r: vec![0.5e-3; 2],
                phi: vec![5.0, 5.0, 0.1],
                q_beta: 0.0,
                goal: goal.clone(),
            },
            ddp_cost: QuadraticCost::diagonal(
                &[0.1, 0.1, 0.0],
                1e-2,
                &[5e-3, 5e-4],
                &[20.0, 20.0, 0.0],
                &DVector::from_vec(goal),
                &DVector::zeros(2),
            )
            .unwrap(),
            cfg: SafeSamplerConfig {
                sampler: SamplerConfig {
                    samples,
                    horizon: 40,
                    lambda: 1e-1,
                    sigma: vec![1.0, 1.0],
                    alpha: 0.0,
                    seed: 5,
                },
                nu,
                r_fb: vec![0.5e-2; 2],
                ddp: DdpOptions::with_iters(ddp_iters),
            },
            model,
            field,
            barrier: BarrierConfig::relaxed(-0.5, 0.05),
        }
    }

    fn one_obstacle() -> ObstacleField {
        ObstacleField::new(vec![SafetyConstraint::sphere(vec![3.0, 3.3], 1.0, 0.2)])
    }

    fn problem(s: &Setup) -> EmbeddedProblem<'_, Model> {
        EmbeddedProblem {
            model: &s.model,
            cost: &s.ddp_cost,
            barrier: &s.barrier,
            field: &s.field,
        }
    }

    #[test]
    fn degenerates_to_mppi_without_feedback() {
        let s = dubins_setup(one_obstacle(), 128, 0.0, 0);
        let s0 = State::from_vec(vec![0.0, 0.0, 0.8]);
        let controls = vec![Control::from_vec(vec![4.0, 0.0]); 40];
        let a = sc_mppi_step(
            &s0,
            &controls,
            &s.model,
            &s.field,
            &s.barrier,
            &s.params,
            &s.ddp_cost,
            &s.cfg,
            2,
            3,
        )
        .unwrap();
        let b = mppi_step(
            &s0,
            &controls,
            &s.model,
            &s.field,
            &s.barrier,
            &s.params,
            &s.cfg.sampler,
            2,
            3,
        )
        .unwrap();
        assert_eq!(a.controls, b.controls);
        assert_eq!(a.batches, b.batches);
    }

    #[test]
    fn single_noiseless_sample_returns_reference() {
        let mut s = dubins_setup(ObstacleField::empty(), 1, 0.0, 3);
        s.cfg.sampler.sigma = vec![1e-40, 1e-40];
        s.params.r = vec![0.0; 2];
        let s0 = State::zeros(3);
        let controls = vec![Control::from_vec(vec![2.0, 0.3]); 40];
        let out = sc_mppi_step(
            &s0,
            &controls,
            &s.model,
            &s.field,
            &s.barrier,
            &s.params,
            &s.ddp_cost,
            &s.cfg,
            1,
            0,
        )
        .unwrap();
        let fb = out.feedback.unwrap();
        assert_eq!(out.controls, fb.controls);
    }

    #[test]
    fn straight_reference_is_corrected_to_safe() {
        let s = dubins_setup(one_obstacle(), 1, 1.0, 40);
        let s0 = State::from_vec(vec![0.0, 0.0, std::f64::consts::FRAC_PI_4]);
        let controls = vec![Control::from_vec(vec![4.0, 0.0]); 40];
        let fb = compute_safe_feedback(&s0, &controls, problem(&s), &s.cfg.ddp).unwrap();
        assert!(!fb.fallback);
        let plant = crate::dynamics::rollout(&s0, &fb.controls, &s.model).unwrap();
        assert!(is_safe_trajectory(&plant, &s.field).safe);
        assert!(fb.policy.gains_finite());
    }

    #[test]
    fn no_obstacles_no_barrier_gain() {
        let s = dubins_setup(ObstacleField::empty(), 1, 1.0, 5);
        let controls = vec![Control::from_vec(vec![1.0, 0.1]); 40];
        let fb =
            compute_safe_feedback(&State::zeros(3), &controls, problem(&s), &s.cfg.ddp).unwrap();
        for k in &fb.policy.barrier_gains {
            assert!(k.amax() < 1e-9);
        }
    }

    #[test]
    fn optimal_reference_is_kept() {
        let s = dubins_setup(ObstacleField::empty(), 1, 1.0, 5);
        let mut s2 = dubins_setup(ObstacleField::empty(), 1, 1.0, 50);
        s2.cfg.ddp.tolerance = 0.0;
        let controls = vec![Control::from_vec(vec![1.0, 0.1]); 40];
        let opt =
            compute_safe_feedback(&State::zeros(3), &controls, problem(&s2), &s2.cfg.ddp).unwrap();
        let again = compute_safe_feedback(&State::zeros(3), &opt.controls, problem(&s), &s.cfg.ddp)
            .unwrap();
        for (a, b) in again.controls.iter().zip(&opt.controls) {
            assert!((a - b).amax() < 1e-6);
        }
        assert!(again.policy.gains_finite());
    }

    #[test]
    fn zero_barrier_state_gives_zero_feedback() {
        // no constraints: B ≡ 0 so β stays 0 and k_fb vanishes even with gains
        let s = dubins_setup(ObstacleField::empty(), 1, 1.0, 0);
        let controls = vec![Control::from_vec(vec![1.0, 0.1]); 40];
        let traj = crate::barrier::embedded_rollout(
            &State::zeros(3),
            &controls,
            &s.model,
            &s.barrier,
            &s.field,
        )
        .unwrap();
        let mut policy = FeedbackPolicy::zero(traj);
        for g in &mut policy.barrier_gains {
            g.fill(3.0);
        }
        let fb = SafeFeedback {
            controls: controls.clone(),
            policy,
            ddp_iterations: 0,
            fallback: false,
        };
        let mut eps = vec![0.0; 80];
        let out = scis_rollout(
            &State::zeros(3),
            &fb,
            &mut eps,
            &s.model,
            &s.field,
            &s.barrier,
            &s.params,
            &s.cfg,
            None,
        );
        assert_eq!(out.mean_feedback, 0.0);
        assert!(eps.iter().all(|e| *e == 0.0));
    }

    #[test]
    fn barrier_penalty_never_enters_sampling_cost() {
        let s = dubins_setup(one_obstacle(), 1, 0.0, 0);
        let mut with_beta = s.params.clone();
        with_beta.q_beta = 1e3;
        let controls = vec![Control::from_vec(vec![1.0, 0.1]); 40];
        let traj = crate::barrier::embedded_rollout(
            &State::zeros(3),
            &controls,
            &s.model,
            &s.barrier,
            &s.field,
        )
        .unwrap();
        let fb = SafeFeedback {
            controls: controls.clone(),
            policy: FeedbackPolicy::zero(traj),
            ddp_iterations: 0,
            fallback: false,
        };
        let run = |p: &PathCostParams| {
            scis_rollout(
                &State::zeros(3),
                &fb,
                &mut vec![0.0; 80],
                &s.model,
                &s.field,
                &s.barrier,
                p,
                &s.cfg,
                None,
            )
            .cost
        };
        assert_eq!(run(&s.params), run(&with_beta));
    }

    proptest! {
        #[test]
        fn feedback_penalty_nonnegative(
            kfb in proptest::collection::vec(-50.0f64..50.0, 2),
            rfb in proptest::collection::vec(0.0f64..10.0, 2),
            sigma in proptest::collection::vec(0.01f64..300.0, 2),
        ) {
            let cfg = SamplerConfig {
                samples: 1,
                horizon: 1,
                lambda: 0.3,
                sigma,
                alpha: 0.2,
                seed: 0,
            };
            let inv = cfg.sigma_inv();
            let pen: f64 = (0..2)
                .map(|i| cfg.control_cost_scale() * kfb[i] * rfb[i] * inv[i] * kfb[i])
                .sum();
            prop_assert!(pen >= 0.0);
        }
    }

    #[test]
    fn unsafe_samples_carry_no_weight() {
        let s = dubins_setup(one_obstacle(), 256, 1.0, 5);
        let s0 = State::from_vec(vec![0.0, 0.0, std::f64::consts::FRAC_PI_4]);
        let controls = vec![Control::from_vec(vec![6.0, 0.0]); 40];
        let out = sc_mppi_step(
            &s0,
            &controls,
            &s.model,
            &s.field,
            &s.barrier,
            &s.params,
            &s.ddp_cost,
            &s.cfg,
            1,
            0,
        )
        .unwrap();
        let b = &out.batches[0];
        assert!(b.safe.iter().any(|s| *s));
        for (w, safe) in b.weights.iter().zip(&b.safe) {
            if !safe {
                assert!(*w < 1e-12);
            }
        }
    }

    #[test]
    fn recorded_rollout_matches_outcome() {
        let s = dubins_setup(one_obstacle(), 1, 1.0, 5);
        let s0 = State::from_vec(vec![0.0, 0.0, 0.8]);
        let controls = vec![Control::from_vec(vec![3.0, 0.0]); 40];
        let fb = compute_safe_feedback(&s0, &controls, problem(&s), &s.cfg.ddp).unwrap();
        let noise = NoiseBatch::zeros(1, 40, 2);
        let mut eps = noise.data.clone();
        let mut rec = Vec::new();
        let out = scis_rollout(
            &s0,
            &fb,
            &mut eps,
            &s.model,
            &s.field,
            &s.barrier,
            &s.params,
            &s.cfg,
            Some(&mut rec),
        );
        let plant: Vec<State> = rec.iter().map(|x| x.rows(0, 3).into_owned()).collect();
        let check = is_safe_trajectory(
            &Trajectory {
                states: plant,
                controls: Vec::new(),
            },
            &s.field,
        );
        assert_eq!(check.safe, out.safe);
    }
}
