//! Stage I: device-conditioned quantization-aware supernet training.
//!
//! Each step samples a device and a sandwich of configs (largest + smallest
//! + random), accumulates behavior-cloning gradients across them and takes
//! one Adam step. The latency/memory regularizers are constants with respect
//! to the shared weights, so they enter the reported loss (and, in the
//! optional biased sampling mode, the config sampling distribution) rather
//! than the gradient.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;

use crate::configspace::SubnetConfig;
use crate::costmodel::{reg_latency, reg_memory, DeviceProfile};
use crate::env::{rollout, Action, EnvError, Obs, PushBox, Trajectory};
use crate::math;
use crate::numerics::{
    adam_step, AdamHyper, AdamState, Gradients, NumericsError, Tensor, VarId,
};
use crate::supernet::{QuantMode, SubnetForward, Supernet, SupernetError};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigSampling {
    /// Largest + smallest + uniform random configs.
    Sandwich,
    /// Largest + smallest + random configs drawn proportionally to
    /// exp(-(alpha R_lat + beta R_mem)), steering training toward deployable
    /// subnets.
    RegBiased,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Steps during which activation quantizers keep calibrating.
    pub warmup_steps: usize,
    /// Random configs per step on top of largest + smallest.
    pub random_configs: usize,
    pub sampling: ConfigSampling,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            alpha: 0.1,
            beta: 0.1,
            warmup_steps: 200,
            random_configs: 2,
            sampling: ConfigSampling::Sandwich,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Supernet(SupernetError),
    Numerics(NumericsError),
    Env(EnvError),
    NonFiniteGradient { step: usize },
    EmptyDataset,
    NoDevices,
    ZeroEpisodes,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Supernet(e) => write!(f, "supernet: {e}"),
            TrainError::Numerics(e) => write!(f, "numerics: {e}"),
            TrainError::Env(e) => write!(f, "environment: {e}"),
            TrainError::NonFiniteGradient { step } => {
                write!(f, "non-finite gradient at step {step}")
            }
            TrainError::EmptyDataset => write!(f, "demo dataset is empty"),
            TrainError::NoDevices => write!(f, "at least one device profile is required"),
            TrainError::ZeroEpisodes => write!(f, "evaluation needs at least one episode"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<SupernetError> for TrainError {
    fn from(e: SupernetError) -> Self {
        TrainError::Supernet(e)
    }
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Numerics(e)
    }
}

impl From<EnvError> for TrainError {
    fn from(e: EnvError) -> Self {
        TrainError::Env(e)
    }
}

/// Flattened (observation, action) pairs from expert demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub observations: Vec<Obs>,
    pub actions: Vec<Action>,
}

impl DemoDataset {
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Self {
        let mut observations = Vec::new();
        let mut actions = Vec::new();
        for t in trajectories {
            observations.extend_from_slice(&t.observations);
            actions.extend_from_slice(&t.actions);
        }
        DemoDataset { observations, actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn sample_batch(&self, n: usize, rng: &mut Rng) -> (Vec<Obs>, Vec<Action>) {
        let mut obs = Vec::with_capacity(n);
        let mut act = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.gen_range(0..self.len());
            obs.push(self.observations[i]);
            act.push(self.actions[i]);
        }
        (obs, act)
    }

    /// Deterministic fixed subset (validation batches for search fitness).
    pub fn fixed_subset(&self, n: usize, seed: u64) -> DemoDataset {
        use rand::SeedableRng;
        let mut rng = Rng::seed_from_u64(seed);
        let n = n.min(self.len());
        let mut observations = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.gen_range(0..self.len());
            observations.push(self.observations[i]);
            actions.push(self.actions[i]);
        }
        DemoDataset { observations, actions }
    }
}

/// Split trajectories into train/validation sets by index.
pub fn split_trajectories(
    trajectories: &[Trajectory],
    val_fraction: f64,
) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let n_val = ((trajectories.len() as f64 * val_fraction) as usize).min(trajectories.len());
    let n_train = trajectories.len() - n_val;
    (
        trajectories[..n_train].to_vec(),
        trajectories[n_train..].to_vec(),
    )
}

/// Behavior-cloning loss convention: squared error summed over action dims,
/// averaged over the batch. Pure f64 version used by search fitness.
pub fn bc_mse(pred: &Tensor, actions: &[Action]) -> f64 {
    let dims = pred.cols();
    let mut total = 0.0f64;
    for (row, a) in pred.data().chunks(dims).zip(actions) {
        for (p, t) in row.iter().zip(a) {
            let d = *p as f64 - *t as f64;
            total += d * d;
        }
    }
    total / actions.len() as f64
}

/// Eq-style composition of the reported base loss.
pub fn base_loss(l_policy: f64, alpha: f64, r_lat: f64, beta: f64, r_mem: f64) -> f64 {
    l_policy + alpha * r_lat + beta * r_mem
}



/// Gradient accumulator aligned with the supernet's parameter list.
pub struct GradAccum {
    grads: Vec<Tensor>,
}

impl GradAccum {
    pub fn new(net: &Supernet) -> Self {
        GradAccum { grads: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    pub fn add_pass(&mut self, fwd: &SubnetForward, gradients: &Gradients, scale: f32) {
        for (param_idx, leaf) in fwd.param_leaves() {
            if let Some(g) = gradients.grad(leaf) {
                for (a, b) in self.grads[param_idx].data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()))
    }
}

/// Everything `train_step` advances.
pub struct TrainState {
    pub net: Supernet,
    pub adam: AdamState,
    pub settings: TrainSettings,
    pub rng: Rng,
    pub step: usize,
}

impl TrainState {
    pub fn new(net: Supernet, settings: TrainSettings, rng: Rng) -> Self {
        let adam = AdamState::new(net.params());
        TrainState { net, adam, settings, rng, step: 0 }
    }
}

/// Per-sampled-config metrics emitted by one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub device_id: String,
    pub config_hash: u64,
    pub l_policy: f64,
    pub r_lat: f64,
    pub r_mem: f64,
    pub l_base: f64,
}

/// Build one policy forward + loss on a fresh pass; returns the pass, the
/// loss variable and its value.
pub fn policy_loss_pass(
    net: &mut Supernet,
    config: &SubnetConfig,
    obs: &[Obs],
    actions: &[Action],
    mode: QuantMode,
) -> Result<(SubnetForward, VarId, f64), TrainError> {
    let mut fwd = net.begin();
    let pred = net.forward_on(&mut fwd, config, obs, mode)?;
    let mut target_data = Vec::with_capacity(actions.len() * 2);
    for a in actions {
        target_data.extend_from_slice(a);
    }
    let target = fwd
        .tape
        .leaf(Tensor::from_parts(vec![actions.len(), 2], target_data))?;
    let loss = fwd.tape.mse_loss(pred, target)?;
    let value = fwd.tape.value(loss).item() as f64;
    Ok((fwd, loss, value))
}

/// Scalar policy loss (no gradients kept).
pub fn policy_loss(
    net: &mut Supernet,
    config: &SubnetConfig,
    obs: &[Obs],
    actions: &[Action],
    mode: QuantMode,
) -> Result<f64, TrainError> {
    let (_, _, value) = policy_loss_pass(net, config, obs, actions, mode)?;
    Ok(value)
}

/// The sandwich of configs for one step: largest, smallest, then random
/// (uniform or regularizer-biased), deduplicated.
pub fn sample_step_configs(
    net: &Supernet,
    settings: &TrainSettings,
    device: &DeviceProfile,
    rng: &mut Rng,
) -> Vec<SubnetConfig> {
    let space = &net.space;
    let mut configs = vec![space.largest_config(), space.smallest_config()];
    match settings.sampling {
        ConfigSampling::Sandwich => {
            for _ in 0..settings.random_configs {
                configs.push(space.sample_uniform(rng));
            }
        }
        ConfigSampling::RegBiased => {
            // softmax over -(alpha R_lat + beta R_mem) on a candidate pool
            let pool: Vec<SubnetConfig> =
                (0..(settings.random_configs * 8)).map(|_| space.sample_uniform(rng)).collect();
            let weights: Vec<f64> = pool
                .iter()
                .map(|c| {
                    let r = settings.alpha * reg_latency(device, space, c)
                        + settings.beta * reg_memory(device, space, c, &net.dims);
                    math::exp(-r)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            for _ in 0..settings.random_configs {
                let mut u = rng.gen::<f64>() * total;
                let mut pick = pool.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                configs.push(pool[pick].clone());
            }
        }
    }
    // duplicates (tiny spaces, lucky draws) would just rescale the gradient
    let mut unique: Vec<SubnetConfig> = Vec::with_capacity(configs.len());
    for c in configs {
        if !unique.contains(&c) {
            unique.push(c);
        }
    }
    unique
}

/// One optimizer step over a sampled device and config sandwich.
pub fn train_step(
    state: &mut TrainState,
    demos: &DemoDataset,
    devices: &[DeviceProfile],
) -> Result<Vec<StepMetrics>, TrainError> {
    if demos.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if devices.is_empty() {
        return Err(TrainError::NoDevices);
    }
    let settings = state.settings;
    if state.step == settings.warmup_steps {
        state.net.freeze_activation_quantizers();
    }
    let mode = if state.step < settings.warmup_steps {
        QuantMode::Calibrating
    } else {
        QuantMode::Frozen
    };
    let device = &devices[state.rng.gen_range(0..devices.len())];
    let (obs, actions) = demos.sample_batch(settings.batch_size, &mut state.rng);
    let configs = sample_step_configs(&state.net, &settings, device, &mut state.rng);

    let mut accum = GradAccum::new(&state.net);
    let mut metrics = Vec::with_capacity(configs.len());
    let scale = 1.0 / configs.len() as f32;
    let space = state.net.space.clone();
    for config in &configs {
        let (fwd, loss, l_policy) =
            policy_loss_pass(&mut state.net, config, &obs, &actions, mode)?;
        let grads = fwd.tape.backward(loss)?;
        accum.add_pass(&fwd, &grads, scale);
        let r_lat = reg_latency(device, &space, config);
        let r_mem = reg_memory(device, &space, config, &state.net.dims);
        metrics.push(StepMetrics {
            step: state.step,
            device_id: device.device_id.clone(),
            config_hash: space.config_hash(config),
            l_policy,
            r_lat,
            r_mem,
            l_base: base_loss(l_policy, settings.alpha, r_lat, settings.beta, r_mem),
        });
    }
    if !accum.is_finite() {
        return Err(TrainError::NonFiniteGradient { step: state.step });
    }
    let hyper = AdamHyper::with_lr(settings.lr);
    adam_step(state.net.params_mut(), accum.grads(), &mut state.adam, &hyper)?;
    state.step += 1;
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_episode_len: f64,
}

/// Closed-loop evaluation over seeded episodes; deterministic for a fixed
/// seed base.
pub fn evaluate(
    net: &Supernet,
    config: &SubnetConfig,
    env: &PushBox,
    episodes: usize,
    seed_base: u64,
) -> Result<EvalReport, TrainError> {
    if episodes == 0 {
        return Err(TrainError::ZeroEpisodes);
    }
    // surface quantizer/config errors up front instead of inside the rollout
    net.forward_infer(config, &[[0.5; 6]])?;
    let mut successes = 0usize;
    let mut total_len = 0usize;
    for e in 0..episodes {
        let mut policy = |o: &Obs| net.act(config, o).expect("probed policy forward");
        let traj = rollout(env, &mut policy, env.params.max_steps, seed_base + e as u64)?;
        successes += traj.success as usize;
        total_len += traj.len();
    }
    Ok(EvalReport {
        episodes,
        successes,
        success_rate: successes as f64 / episodes as f64,
        mean_episode_len: total_len as f64 / episodes as f64,
    })
}
