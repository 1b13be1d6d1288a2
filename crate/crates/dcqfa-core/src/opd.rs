//! Multi-step on-policy distillation: roll the quantized student out in the
//! environment, supervise each visited state with the full-precision teacher
//! (the supernet's largest configuration, gradient-stopped), and grow the
//! horizon over training.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::SeedableRng;

use crate::configspace::SubnetConfig;
use crate::costmodel::DeviceProfile;
use crate::env::{gain_policy, LinearSystem, PushBox};
use crate::math;
use crate::numerics::{adam_step, AdamHyper, AdamState, Tensor, VarId};
use crate::quant::{qmax, weight_scales};
use crate::supernet::{QuantMode, Supernet};
use crate::trainer::{
    policy_loss_pass, sample_step_configs, DemoDataset, GradAccum, StepMetrics, TrainError,
    TrainState,
};
use crate::Rng;

/// Per-step weighting of the distillation divergence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpdWeights {
    Uniform,
    /// w_t = lambda^(t-1).
    ExpDiscount(f64),
}

impl OpdWeights {
    pub fn weights(&self, k: usize) -> Vec<f64> {
        match self {
            OpdWeights::Uniform => vec![1.0; k],
            OpdWeights::ExpDiscount(lambda) => {
                let mut w = Vec::with_capacity(k);
                let mut v = 1.0;
                for _ in 0..k {
                    w.push(v);
                    v *= lambda;
                }
                w
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpdSettings {
    pub gamma: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub weights: OpdWeights,
    /// Fine-tuning rate for the distillation phase; the distilled weights
    /// are shared with the teacher, so this stays well below the stage-I
    /// rate.
    pub lr: f64,
}

impl Default for OpdSettings {
    fn default() -> Self {
        OpdSettings { gamma: 1.0, k_min: 1, k_max: 8, weights: OpdWeights::Uniform, lr: 2e-4 }
    }
}

/// Which quantized student the distillation term trains.
#[derive(Debug, Clone, PartialEq)]
pub enum StudentRule {
    /// A fresh uniform sample each step.
    SampledPerStep,
    /// Alternate the hardest corner (largest architecture at minimum bits)
    /// with uniform samples; the corner is where closed-loop quantization
    /// error accumulates most.
    LowBitSandwich,
    Fixed(SubnetConfig),
}

/// Linear horizon schedule: K = round(K_min + progress (K_max - K_min)),
/// nondecreasing in progress.
pub fn horizon(settings: &OpdSettings, progress: f64) -> usize {
    debug_assert!((0.0..=1.0).contains(&progress));
    let p = progress.clamp(0.0, 1.0);
    let k = settings.k_min as f64 + p * (settings.k_max - settings.k_min) as f64;
    math::round(k) as usize
}

/// Eq-style composition: L_total = L_base + gamma * L_OPD.
pub fn total_loss(base_loss: f64, opd_loss: f64, gamma: f64) -> f64 {
    base_loss + gamma * opd_loss
}

/// The distillation average: (1/K) * sum of w_t * D_t over the realized
/// horizon.
pub fn opd_weighted_mean(divergences: &[f64], weights: &[f64]) -> f64 {
    debug_assert_eq!(divergences.len(), weights.len());
    let k = divergences.len().max(1) as f64;
    divergences.iter().zip(weights).map(|(d, w)| d * w).sum::<f64>() / k
}

/// Roll the student out for up to `k` steps, supervising each visited state
/// with the teacher; returns the loss variable on `fwd`'s tape plus its
/// value. Gradients flow only through the student's action at each step:
/// states are detached and the teacher runs on a separate tape.
#[allow(clippy::too_many_arguments)]
pub fn opd_loss_pass(
    net: &mut Supernet,
    student: &SubnetConfig,
    teacher: &SubnetConfig,
    env: &PushBox,
    k: usize,
    seed: u64,
    weights: &OpdWeights,
) -> Result<(crate::supernet::SubnetForward, VarId, f64), TrainError> {
    if k == 0 {
        return Err(TrainError::Env(crate::env::EnvError::ZeroHorizon));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut state = env.reset(&mut rng);
    let mut fwd = net.begin();
    let w = weights.weights(k);
    let mut terms: Vec<(VarId, f64)> = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    for step_w in w.iter().take(k) {
        if env.success(&state) {
            break;
        }
        let obs = env.observe(&state);
        let pred = net.forward_on(&mut fwd, student, &[obs], QuantMode::Frozen)?;
        let teacher_action = {
            let out = net.forward_infer(teacher, &[obs])?;
            [out.data()[0], out.data()[1]]
        };
        let target = fwd
            .tape
            .leaf(Tensor::from_parts(vec![1, 2], teacher_action.to_vec()))?;
        let d = fwd.tape.mse_loss(pred, target)?;
        values.push(fwd.tape.value(d).item() as f64);
        terms.push((d, *step_w));
        // the environment advances on the student's action values
        let a = fwd.tape.value(pred);
        let action = [a.data()[0], a.data()[1]];
        state = env.step(&state, action);
    }
    // (1/K) sum of w_t D_t over the realized horizon
    let k_real = terms.len().max(1) as f64;
    let mut loss: Option<VarId> = None;
    for (d, wt) in &terms {
        let scaled = fwd.tape.scale(*d, (*wt / k_real) as f32)?;
        loss = Some(match loss {
            Some(acc) => fwd.tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let loss = match loss {
        Some(l) => l,
        // the start state was already successful: zero loss, no gradient
        None => fwd.tape.leaf(Tensor::scalar(0.0))?,
    };
    let value = opd_weighted_mean(&values, &w[..values.len()]);
    Ok((fwd, loss, value))
}

/// Scalar distillation loss (Eq. 6) for inspection and tests.
pub fn opd_loss(
    net: &mut Supernet,
    student: &SubnetConfig,
    env: &PushBox,
    k: usize,
    seed: u64,
    weights: &OpdWeights,
) -> Result<f64, TrainError> {
    let teacher = net.space.largest_config();
    let (_, _, value) = opd_loss_pass(net, student, &teacher, env, k, seed, weights)?;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpdStepMetrics {
    pub k: usize,
    pub l_opd: f64,
    pub student_hash: u64,
}

/// Stage I-and-a-half: one distillation training step combining the base
/// sandwich objective with the weighted OPD term (Eq. 7).
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    state: &mut TrainState,
    demos: &DemoDataset,
    devices: &[DeviceProfile],
    env: &PushBox,
    opd: &OpdSettings,
    student_rule: &StudentRule,
    progress: f64,
) -> Result<(Vec<StepMetrics>, OpdStepMetrics), TrainError> {
    if demos.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if devices.is_empty() {
        return Err(TrainError::NoDevices);
    }
    let settings = state.settings;
    let device_idx = state.rng.gen_range(0..devices.len());
    let device = &devices[device_idx];
    let (obs, actions) = demos.sample_batch(settings.batch_size, &mut state.rng);
    let configs = sample_step_configs(&state.net, &settings, device, &mut state.rng);
    let space = state.net.space.clone();

    let mut accum = GradAccum::new(&state.net);
    let mut metrics = Vec::with_capacity(configs.len());
    let scale = 1.0 / configs.len() as f32;
    for config in &configs {
        let (fwd, loss, l_policy) =
            policy_loss_pass(&mut state.net, config, &obs, &actions, QuantMode::Frozen)?;
        let grads = fwd.tape.backward(loss)?;
        accum.add_pass(&fwd, &grads, scale);
        let r_lat = crate::costmodel::reg_latency(device, &space, config);
        let r_mem = crate::costmodel::reg_memory(device, &space, config, &state.net.dims);
        metrics.push(StepMetrics {
            step: state.step,
            device_id: device.device_id.clone(),
            config_hash: space.config_hash(config),
            l_policy,
            r_lat,
            r_mem,
            l_base: crate::trainer::base_loss(
                l_policy,
                settings.alpha,
                r_lat,
                settings.beta,
                r_mem,
            ),
        });
    }

    let student = match student_rule {
        StudentRule::SampledPerStep => space.sample_uniform(&mut state.rng),
        StudentRule::LowBitSandwich => {
            if state.step % 2 == 0 {
                let mut corner = space.largest_config();
                for l in &mut corner.layers {
                    l.weight_bits = space.weight_bits[0];
                    l.act_bits = space.act_bits[0];
                }
                corner
            } else {
                space.sample_uniform(&mut state.rng)
            }
        }
        StudentRule::Fixed(c) => c.clone(),
    };
    let teacher = space.largest_config();
    let k = horizon(opd, progress);
    let opd_seed = state.rng.gen::<u64>();
    let (fwd, loss, l_opd) = opd_loss_pass(
        &mut state.net,
        &student,
        &teacher,
        env,
        k,
        opd_seed,
        &opd.weights,
    )?;
    let grads = fwd.tape.backward(loss)?;
    accum.add_pass(&fwd, &grads, opd.gamma as f32);

    if !accum.is_finite() {
        return Err(TrainError::NonFiniteGradient { step: state.step });
    }
    let hyper = AdamHyper::with_lr(opd.lr);
    adam_step(state.net.params_mut(), accum.grads(), &mut state.adam, &hyper)?;
    state.step += 1;
    Ok((
        metrics,
        OpdStepMetrics { k, l_opd, student_hash: space.config_hash(&student) },
    ))
}

// ---- linear-system oracle ----------------------------------------------

/// Fine-tune a quantized linear student a = -fq(G) x against the exact
/// teacher a = -G_t x with on-policy distillation at horizon `k_max`
/// (`k_max = 1` is single-step distillation; larger horizons grow linearly
/// over training). The student starts from `student_init` (typically a
/// damaged copy of the teacher). Returns the deployed (quantized) gain.
#[allow(clippy::too_many_arguments)]
pub fn finetune_linear_student(
    system: &LinearSystem,
    teacher_gain: &[f64],
    student_init: &[f64],
    bits: u8,
    k_max: usize,
    steps: usize,
    lr: f64,
    seed: u64,
    x0_sampler: &dyn Fn(&mut Rng) -> Vec<f64>,
) -> Result<Vec<f64>, TrainError> {
    let (n, m) = (system.n, system.m);
    let teacher = gain_policy(teacher_gain.to_vec(), n, m);
    // student parameter: [n, m] so actions come from x * G (row vector form)
    let mut g_param = vec![Tensor::from_parts(
        vec![n, m],
        (0..n * m)
            .map(|i| student_init[(i % m) * n + i / m] as f32)
            .collect(),
    )];
    let mut adam = AdamState::new(&g_param);
    let hyper = AdamHyper::with_lr(lr);
    let mut rng = Rng::seed_from_u64(seed);
    let q = qmax(bits);

    for step in 0..steps {
        let progress = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 1.0 };
        let k = if k_max <= 1 {
            1
        } else {
            math::round(1.0 + progress * (k_max as f64 - 1.0)) as usize
        };
        let mut x = x0_sampler(&mut rng);
        let mut tape = crate::numerics::Tape::new();
        let g_leaf = tape.leaf(g_param[0].clone())?;
        let scales = weight_scales(&g_param[0], bits);
        let gq = tape.fake_quant_per_channel(g_leaf, &scales, q, false)?;
        let mut loss: Option<VarId> = None;
        for _ in 0..k {
            let x_leaf = tape.leaf(Tensor::from_parts(
                vec![1, n],
                x.iter().map(|&v| v as f32).collect(),
            ))?;
            let a_pos = tape.matmul(x_leaf, gq)?;
            let a_var = tape.scale(a_pos, -1.0)?;
            let t_action = teacher(&x);
            let target = tape.leaf(Tensor::from_parts(
                vec![1, m],
                t_action.iter().map(|&v| v as f32).collect(),
            ))?;
            let d = tape.mse_loss(a_var, target)?;
            let scaled = tape.scale(d, 1.0 / k as f32)?;
            loss = Some(match loss {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
            // environment advances on the student's (quantized) action
            let a_val: Vec<f64> =
                tape.value(a_var).data().iter().map(|&v| v as f64).collect();
            x = system.step(&x, &a_val);
            if x.iter().any(|v| !v.is_finite() || math::abs(*v) > 1e6) {
                return Err(TrainError::NonFiniteGradient { step });
            }
        }
        let loss = loss.expect("k >= 1");
        let grads = tape.backward(loss)?;
        let g = grads.grad(g_leaf).expect("leaf gradient").clone();
        adam_step(&mut g_param, &[g], &mut adam, &hyper)?;
    }

    // deploy the quantized gain (column-major transpose back to [m, n])
    let scales = weight_scales(&g_param[0], bits);
    let mut deployed = vec![0.0f64; m * n];
    for i in 0..n {
        for j in 0..m {
            let v = g_param[0].data()[i * m + j];
            let (qv, _) = crate::numerics::quantize_value(v, scales[j], q);
            deployed[j * n + i] = qv as f64;
        }
    }
    Ok(deployed)
}
