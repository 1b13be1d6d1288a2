//! Closed-loop desk-scale environments: a 2-D pushing task with a scripted
//! expert (the demonstration source and evaluation arena) and a linear
//! tracking system used as the error-accumulation oracle for distillation.

mod linear;
mod pushbox;

pub use linear::{accumulation_gap, double_integrator_gain, gain_policy, LinearSystem};
pub use pushbox::{generate_demos, scripted_expert, PushBox, PushBoxParams, PushBoxState};

use alloc::vec::Vec;
use core::fmt;

pub const OBS_DIM: usize = 6;
pub const ACT_DIM: usize = 2;

pub type Obs = [f32; OBS_DIM];
pub type Action = [f32; ACT_DIM];

/// Ordered (o_t, a_t) pairs from one closed-loop episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Obs>,
    pub actions: Vec<Action>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvError {
    NonFiniteAction { step: usize },
    UnstableTeacher { spectral_radius: f64 },
    ZeroHorizon,
    ExpertFailedTooOften { wanted: usize, got: usize },
}

impl fmt::Display for EnvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvError::NonFiniteAction { step } => {
                write!(f, "policy produced a non-finite action at step {step}")
            }
            EnvError::UnstableTeacher { spectral_radius } => {
                write!(f, "closed loop is unstable: spectral radius {spectral_radius}")
            }
            EnvError::ZeroHorizon => write!(f, "rollout horizon must be at least 1"),
            EnvError::ExpertFailedTooOften { wanted, got } => {
                write!(f, "expert produced only {got} of {wanted} successful demos")
            }
        }
    }
}

impl core::error::Error for EnvError {}

/// Closed loop from a given start state: observe, act, advance; stops after
/// `k` steps or on success.
pub fn rollout_from(
    env: &PushBox,
    start: PushBoxState,
    policy: &mut dyn FnMut(&Obs) -> Action,
    k: usize,
) -> Result<Trajectory, EnvError> {
    if k == 0 {
        return Err(EnvError::ZeroHorizon);
    }
    let mut state = start;
    let mut traj = Trajectory {
        observations: Vec::with_capacity(k),
        actions: Vec::with_capacity(k),
        success: false,
    };
    for step in 0..k {
        if env.success(&state) {
            traj.success = true;
            break;
        }
        let obs = env.observe(&state);
        let action = policy(&obs);
        if !action.iter().all(|v| v.is_finite()) {
            return Err(EnvError::NonFiniteAction { step });
        }
        traj.observations.push(obs);
        traj.actions.push(action);
        state = env.step(&state, action);
    }
    if env.success(&state) {
        traj.success = true;
    }
    Ok(traj)
}

/// Rollout from a seeded random start state.
pub fn rollout(
    env: &PushBox,
    policy: &mut dyn FnMut(&Obs) -> Action,
    k: usize,
    seed: u64,
) -> Result<Trajectory, EnvError> {
    use rand::SeedableRng;
    let mut rng = crate::Rng::seed_from_u64(seed);
    let start = env.reset(&mut rng);
    rollout_from(env, start, policy, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_rollout_has_one_pair() {
        let env = PushBox::default();
        let mut policy = |_: &Obs| [0.1f32, 0.0];
        let traj = rollout(&env, &mut policy, 1, 5).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.observations.len(), 1);
    }

    #[test]
    fn identical_seed_and_policy_give_identical_trajectories() {
        let env = PushBox::default();
        let mut policy = |o: &Obs| [o[0] * 0.5 - 0.1, o[1] * 0.5];
        let a = rollout(&env, &mut policy, 50, 99).unwrap();
        let mut policy2 = |o: &Obs| [o[0] * 0.5 - 0.1, o[1] * 0.5];
        let b = rollout(&env, &mut policy2, 50, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let env = PushBox::default();
        let mut policy = |_: &Obs| [0.0f32, 0.0];
        assert_eq!(rollout(&env, &mut policy, 0, 1), Err(EnvError::ZeroHorizon));
    }

    #[test]
    fn non_finite_action_aborts() {
        let env = PushBox::default();
        let mut policy = |_: &Obs| [f32::NAN, 0.0];
        assert!(matches!(
            rollout(&env, &mut policy, 5, 1),
            Err(EnvError::NonFiniteAction { step: 0 })
        ));
    }
}
