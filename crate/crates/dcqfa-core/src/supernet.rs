//! The weight-sharing elastic transformer policy: one parameter set from
//! which any subnet configuration's forward pass is derived by prefix
//! slicing, with fake quantization applied per layer.
//!
//! Observations enter as one token per pose (agent, box, goal) so attention
//! has something to attend over; blocks are pre-norm attention + GELU MLP
//! without biases (so parameter counts scale exactly with the elastic
//! ratios); the action head is a final norm, mean pool and linear map.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;
use rand::SeedableRng;

use crate::configspace::{LayerChoice, SearchSpace, SpaceError, SubnetConfig};
use crate::costmodel::BlockParamCount;
use crate::env::{Action, Obs, ACT_DIM, OBS_DIM};
use crate::math;
use crate::numerics::{NumericsError, Tape, Tensor, VarId};
use crate::quant::{qmax, weight_scales, QuantError, QuantizerSpec};
use crate::Rng;

pub const LN_EPS: f32 = 1e-5;
/// EMA decay for activation calibration.
pub const ACT_EMA_DECAY: f32 = 0.99;

/// Fixed physical dimensions of the supernet (the search space controls the
/// elastic parts).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchDims {
    pub d_model: usize,
    pub max_heads: usize,
    pub head_dim: usize,
    pub obs_tokens: usize,
    pub token_dim: usize,
    pub act_dim: usize,
}

impl Default for ArchDims {
    fn default() -> Self {
        ArchDims {
            d_model: 32,
            max_heads: 4,
            head_dim: 8,
            obs_tokens: 3,
            token_dim: 2,
            act_dim: ACT_DIM,
        }
    }
}

impl ArchDims {
    pub fn active_heads(&self, head_ratio: f64) -> usize {
        (libm::ceil(head_ratio * self.max_heads as f64) as usize).max(1)
    }

    fn attn_width(&self, head_ratio: f64) -> usize {
        self.active_heads(head_ratio) * self.head_dim
    }
}

impl BlockParamCount for ArchDims {
    /// Weight parameters and per-output-channel quantization groups of one
    /// active block.
    fn block_params(&self, choice: &LayerChoice) -> (u64, u64) {
        let d = self.d_model as u64;
        let hd = self.attn_width(choice.head_ratio) as u64;
        let rd = choice.mlp_ratio as u64 * d;
        let params = 4 * d * hd + 2 * rd * d;
        let groups = 3 * hd + d + rd + d;
        (params, groups)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SupernetError {
    Numerics(NumericsError),
    Quant(QuantError),
    Space(SpaceError),
    BadConfig(&'static str),
    BadDims(&'static str),
}

impl fmt::Display for SupernetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SupernetError::Numerics(e) => write!(f, "numerics: {e}"),
            SupernetError::Quant(e) => write!(f, "quantizer: {e}"),
            SupernetError::Space(e) => write!(f, "search space: {e}"),
            SupernetError::BadConfig(d) => write!(f, "bad config: {d}"),
            SupernetError::BadDims(d) => write!(f, "bad dimensions: {d}"),
        }
    }
}

impl core::error::Error for SupernetError {}

impl From<NumericsError> for SupernetError {
    fn from(e: NumericsError) -> Self {
        SupernetError::Numerics(e)
    }
}

impl From<QuantError> for SupernetError {
    fn from(e: QuantError) -> Self {
        SupernetError::Quant(e)
    }
}

impl From<SpaceError> for SupernetError {
    fn from(e: SpaceError) -> Self {
        SupernetError::Space(e)
    }
}

/// How quantizers behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Observe activations into the EMA stats, then quantize with the
    /// updated scales (warmup phase).
    Calibrating,
    /// Quantize with stored scales; uncalibrated quantizers are an error.
    Frozen,
    /// STE surrogate forward for gradient checks: identity inside the clip
    /// mask, clamped outside.
    Surrogate,
}

/// Activation quantization site within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActSite {
    AttnIn = 0,
    AttnProj = 1,
    MlpIn = 2,
    MlpHidden = 3,
}

pub const ACT_SITES: [ActSite; 4] =
    [ActSite::AttnIn, ActSite::AttnProj, ActSite::MlpIn, ActSite::MlpHidden];

/// One quantizer spec per (layer, site, bit-width) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBank {
    specs: Vec<QuantizerSpec>,
    bits_menu: Vec<u8>,
    layers: usize,
}

impl QuantBank {
    fn new(layers: usize, act_bits: &[u8]) -> Self {
        let bits_menu: Vec<u8> = act_bits.iter().copied().filter(|&b| b != 16).collect();
        let specs = (0..layers * ACT_SITES.len() * bits_menu.len().max(1))
            .map(|i| {
                let bits = if bits_menu.is_empty() { 8 } else { bits_menu[i % bits_menu.len()] };
                QuantizerSpec::per_tensor(bits, ACT_EMA_DECAY).expect("menu bits are valid")
            })
            .collect();
        QuantBank { specs, bits_menu, layers }
    }

    fn index(&self, layer: usize, site: ActSite, bits: u8) -> Option<usize> {
        let b = self.bits_menu.iter().position(|&x| x == bits)?;
        Some((layer * ACT_SITES.len() + site as usize) * self.bits_menu.len() + b)
    }

    pub fn spec(&self, layer: usize, site: ActSite, bits: u8) -> Option<&QuantizerSpec> {
        self.index(layer, site, bits).map(|i| &self.specs[i])
    }

    /// Observe a pre-quantization activation at a site: every bit-width
    /// variant of the site shares the observation so search-time configs
    /// are all calibrated.
    fn observe(&mut self, layer: usize, site: ActSite, value: &Tensor) {
        for bi in 0..self.bits_menu.len() {
            let i = (layer * ACT_SITES.len() + site as usize) * self.bits_menu.len() + bi;
            self.specs[i].calibrate(value);
        }
    }

    pub fn freeze(&mut self) {
        for s in &mut self.specs {
            s.freeze();
        }
    }

    pub fn reset(&mut self) {
        for s in &mut self.specs {
            s.reset();
        }
    }

    pub fn specs(&self) -> &[QuantizerSpec] {
        &self.specs
    }

    pub fn specs_mut(&mut self) -> &mut [QuantizerSpec] {
        &mut self.specs
    }
}

const PARAMS_PER_LAYER: usize = 6; // wq wk wv wo w1 w2

fn layer_param_index(layer: usize, offset: usize) -> usize {
    2 + layer * PARAMS_PER_LAYER + offset
}

/// Shared elastic-transformer parameters plus the quantizer bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    pub dims: ArchDims,
    pub space: SearchSpace,
    params: Vec<Tensor>,
    names: Vec<String>,
    quant_bank: QuantBank,
}

/// One tape under construction; parameters are imported lazily so skipped
/// layers never appear on the tape.
pub struct SubnetForward {
    pub tape: Tape,
    leaves: Vec<Option<VarId>>,
}

impl SubnetForward {
    /// Map accumulated gradients back to parameter indices.
    pub fn param_leaves(&self) -> impl Iterator<Item = (usize, VarId)> + '_ {
        self.leaves
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|id| (i, id)))
    }
}

impl Supernet {
    pub fn new(space: SearchSpace, dims: ArchDims, init_seed: u64) -> Result<Self, SupernetError> {
        space.validate()?;
        if dims.obs_tokens * dims.token_dim != OBS_DIM {
            return Err(SupernetError::BadDims("obs tokens must tile the observation"));
        }
        if dims.head_dim * dims.max_heads == 0 || dims.d_model == 0 {
            return Err(SupernetError::BadDims("zero width"));
        }
        let mut rng = Rng::seed_from_u64(init_seed);
        let d = dims.d_model;
        let r_max = *space.mlp_ratios.last().unwrap() as usize;
        let attn_w = dims.max_heads * dims.head_dim;
        let mut params = Vec::new();
        let mut names = Vec::new();
        {
            let mut push = |name: String, rows: usize, cols: usize, rng: &mut Rng| {
                let bound = math::sqrt(6.0 / (rows + cols) as f64) as f32;
                let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
                params.push(Tensor::from_parts(vec![rows, cols], data));
                names.push(name);
            };
            push(String::from("embed"), dims.token_dim, d, &mut rng);
            push(String::from("role"), dims.obs_tokens, d, &mut rng);
            for l in 0..space.layers {
                push(format!("layer{l}.wq"), d, attn_w, &mut rng);
                push(format!("layer{l}.wk"), d, attn_w, &mut rng);
                push(format!("layer{l}.wv"), d, attn_w, &mut rng);
                push(format!("layer{l}.wo"), attn_w, d, &mut rng);
                push(format!("layer{l}.w1"), d, r_max * d, &mut rng);
                push(format!("layer{l}.w2"), r_max * d, d, &mut rng);
            }
            push(String::from("head_w"), d, dims.act_dim, &mut rng);
        }
        params.push(Tensor::zeros(&[dims.act_dim]));
        names.push(String::from("head_b"));
        let quant_bank = QuantBank::new(space.layers, &space.act_bits);
        Ok(Supernet { dims, space, params, names, quant_bank })
    }

    /// Rebuild a supernet from stored parameters (checkpoint restore). The
    /// tensors may carry per-layer sliced shapes, as exported subnets do;
    /// only the parameter count and layout are enforced.
    pub fn from_stored(
        space: SearchSpace,
        dims: ArchDims,
        params: Vec<Tensor>,
    ) -> Result<Self, SupernetError> {
        space.validate()?;
        if dims.obs_tokens * dims.token_dim != OBS_DIM {
            return Err(SupernetError::BadDims("obs tokens must tile the observation"));
        }
        let expected = 2 + space.layers * PARAMS_PER_LAYER + 2;
        if params.len() != expected {
            return Err(SupernetError::BadDims("stored parameter count mismatch"));
        }
        let mut names = Vec::with_capacity(expected);
        names.push(String::from("embed"));
        names.push(String::from("role"));
        for l in 0..space.layers {
            for n in ["wq", "wk", "wv", "wo", "w1", "w2"] {
                names.push(format!("layer{l}.{n}"));
            }
        }
        names.push(String::from("head_w"));
        names.push(String::from("head_b"));
        let quant_bank = QuantBank::new(space.layers, &space.act_bits);
        Ok(Supernet { dims, space, params, names, quant_bank })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable parameter access for optimizers and checkpoint restore; shapes
    /// must be preserved.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count_total(&self) -> u64 {
        self.params.iter().map(|p| p.numel() as u64).sum()
    }

    /// Replace one parameter's values (optimizer step, checkpoint restore).
    pub fn set_param(&mut self, idx: usize, value: Tensor) -> Result<(), SupernetError> {
        if self.params[idx].shape() != value.shape() {
            return Err(SupernetError::BadDims("parameter shape mismatch"));
        }
        self.params[idx] = value;
        Ok(())
    }

    pub fn params_cloned(&self) -> Vec<Tensor> {
        self.params.clone()
    }

    pub fn install_params(&mut self, params: Vec<Tensor>) -> Result<(), SupernetError> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(SupernetError::BadDims("parameter list mismatch"));
        }
        self.params = params;
        Ok(())
    }

    pub fn quant_bank(&self) -> &QuantBank {
        &self.quant_bank
    }

    pub fn quant_bank_mut(&mut self) -> &mut QuantBank {
        &mut self.quant_bank
    }

    /// Stable fingerprint of the search space and dimensions; checkpoints
    /// refuse to load across different fingerprints.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        fn push_usize(bytes: &mut Vec<u8>, v: usize) {
            bytes.extend_from_slice(&(v as u64).to_le_bytes());
        }
        push_usize(&mut bytes, self.space.layers);
        for &r in &self.space.mlp_ratios {
            bytes.extend_from_slice(&r.to_le_bytes());
        }
        for &h in &self.space.head_ratios {
            bytes.extend_from_slice(&h.to_le_bytes());
        }
        bytes.extend_from_slice(&self.space.weight_bits);
        bytes.extend_from_slice(&self.space.act_bits);
        push_usize(&mut bytes, self.space.min_active_layers);
        for v in [
            self.dims.d_model,
            self.dims.max_heads,
            self.dims.head_dim,
            self.dims.obs_tokens,
            self.dims.token_dim,
            self.dims.act_dim,
        ] {
            push_usize(&mut bytes, v);
        }
        math::fnv1a(&bytes)
    }

    pub fn begin(&self) -> SubnetForward {
        SubnetForward { tape: Tape::new(), leaves: vec![None; self.params.len()] }
    }

    /// Build the policy forward for a batch of observations on `fwd`'s tape;
    /// returns the predicted action variable `[batch, act_dim]`.
    pub fn forward_on(
        &mut self,
        fwd: &mut SubnetForward,
        config: &SubnetConfig,
        obs: &[Obs],
        mode: QuantMode,
    ) -> Result<VarId, SupernetError> {
        forward_core(&self.params, &self.dims, self.space.layers, &mut self.quant_bank, fwd, config, obs, mode)
    }

    /// Forward on shared read-only state (no calibration); returns predicted
    /// actions `[batch, act_dim]`.
    pub fn forward_infer(
        &self,
        config: &SubnetConfig,
        obs: &[Obs],
    ) -> Result<Tensor, SupernetError> {
        // Frozen mode never writes to the bank; a scratch copy of the small
        // spec table keeps this entry point &self.
        let mut bank = self.quant_bank.clone();
        let mut fwd = self.begin();
        let out = forward_core(
            &self.params,
            &self.dims,
            self.space.layers,
            &mut bank,
            &mut fwd,
            config,
            obs,
            QuantMode::Frozen,
        )?;
        Ok(fwd.tape.value(out).clone())
    }

    /// Single-observation action.
    pub fn act(&self, config: &SubnetConfig, obs: &Obs) -> Result<Action, SupernetError> {
        let out = self.forward_infer(config, core::slice::from_ref(obs))?;
        Ok([out.data()[0], out.data()[1]])
    }

    /// Run calibration forwards under the largest full-precision config so
    /// every (layer, site, bits) spec observes realistic activations.
    pub fn calibrate_activations(
        &mut self,
        obs: &[Obs],
        passes: usize,
    ) -> Result<(), SupernetError> {
        let config = self.space.largest_config();
        for _ in 0..passes {
            let mut fwd = self.begin();
            self.forward_on(&mut fwd, &config, obs, QuantMode::Calibrating)?;
        }
        Ok(())
    }

    /// Calibration forwards under a set of configs; low-bit configs expose
    /// the stats to the upstream quantization noise deployment will see.
    pub fn calibrate_under(
        &mut self,
        obs: &[Obs],
        configs: &[SubnetConfig],
    ) -> Result<(), SupernetError> {
        for config in configs {
            let mut fwd = self.begin();
            self.forward_on(&mut fwd, config, obs, QuantMode::Calibrating)?;
        }
        Ok(())
    }

    pub fn freeze_activation_quantizers(&mut self) {
        self.quant_bank.freeze();
    }

    /// Drop the activation stats and re-observe with the current weights,
    /// then freeze. Weight quantizers track the live weights every step, but
    /// activation scales calibrated early in training go stale as the
    /// weights drift; a fresh pass before deployment removes that bias.
    pub fn recalibrate_activations(
        &mut self,
        obs: &[Obs],
        passes: usize,
    ) -> Result<(), SupernetError> {
        self.quant_bank.reset();
        self.calibrate_activations(obs, passes)?;
        self.freeze_activation_quantizers();
        Ok(())
    }

    /// Analytic parameter count of a subnet (embedding, role table and head
    /// included).
    pub fn subnet_param_count(&self, config: &SubnetConfig) -> u64 {
        let d = self.dims.d_model as u64;
        let fixed = (self.dims.token_dim as u64) * d
            + (self.dims.obs_tokens as u64) * d
            + d * self.dims.act_dim as u64
            + self.dims.act_dim as u64;
        let blocks: u64 = config
            .layers
            .iter()
            .filter(|l| l.keep)
            .map(|l| self.dims.block_params(l).0)
            .sum();
        fixed + blocks
    }

    /// Materialize the active slices into a standalone subnet. The result is
    /// a supernet whose stored shapes equal the config's slices exactly, so
    /// its forward is bit-identical to the parent's under the same config.
    pub fn extract(
        &self,
        config: &SubnetConfig,
    ) -> Result<(Supernet, SubnetConfig), SupernetError> {
        if config.layers.len() != self.space.layers {
            return Err(SupernetError::BadConfig("layer count mismatch"));
        }
        let active: Vec<(usize, &LayerChoice)> =
            config.layers.iter().enumerate().filter(|(_, l)| l.keep).collect();
        let d = self.dims.d_model;
        let mut params = Vec::new();
        let mut names = Vec::new();
        params.push(self.params[0].clone());
        names.push(self.names[0].clone());
        params.push(self.params[1].clone());
        names.push(self.names[1].clone());
        for (new_l, (old_l, choice)) in active.iter().enumerate() {
            let hd = self.dims.attn_width(choice.head_ratio);
            let rd = choice.mlp_ratio as usize * d;
            for (offset, name) in ["wq", "wk", "wv", "wo", "w1", "w2"].iter().enumerate() {
                let src = &self.params[layer_param_index(*old_l, offset)];
                let sliced = match offset {
                    0 | 1 | 2 => slice_cols(src, hd),
                    3 => slice_rows(src, hd),
                    4 => slice_cols(src, rd),
                    _ => slice_rows(src, rd),
                };
                params.push(sliced);
                names.push(format!("layer{new_l}.{name}"));
            }
        }
        let hw = layer_param_index(self.space.layers, 0);
        params.push(self.params[hw].clone());
        names.push(String::from("head_w"));
        params.push(self.params[hw + 1].clone());
        names.push(String::from("head_b"));

        // compacted config: the kept layers in order
        let compact = SubnetConfig { layers: active.iter().map(|(_, l)| **l).collect() };
        let space = SearchSpace { layers: active.len(), ..self.space.clone() };
        let mut bank = QuantBank::new(space.layers, &space.act_bits);
        for (new_l, (old_l, _)) in active.iter().enumerate() {
            for site in ACT_SITES {
                for b in bank.bits_menu.clone() {
                    if let (Some(dst), Some(src)) =
                        (bank.index(new_l, site, b), self.quant_bank.index(*old_l, site, b))
                    {
                        bank.specs[dst] = self.quant_bank.specs[src].clone();
                    }
                }
            }
        }
        let dims = self.dims;
        Ok((Supernet { dims, space, params, names, quant_bank: bank }, compact))
    }

    /// 0/1 masks over every parameter marking the slices `config` reads.
    pub fn active_param_mask(&self, config: &SubnetConfig) -> Vec<Tensor> {
        let d = self.dims.d_model;
        let mut masks: Vec<Tensor> =
            self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let ones = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = 1.0);
        ones(&mut masks[0]);
        ones(&mut masks[1]);
        let hw = layer_param_index(self.space.layers, 0);
        ones(&mut masks[hw]);
        ones(&mut masks[hw + 1]);
        for (layer, choice) in config.layers.iter().enumerate() {
            if !choice.keep {
                continue;
            }
            let hd = self.dims.attn_width(choice.head_ratio);
            let rd = choice.mlp_ratio as usize * d;
            let mark_cols = |t: &mut Tensor, keep: usize| {
                let m = t.cols();
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    if i % m < keep {
                        *v = 1.0;
                    }
                }
            };
            let mark_rows = |t: &mut Tensor, keep: usize| {
                let m = t.cols();
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    if i / m < keep {
                        *v = 1.0;
                    }
                }
            };
            mark_cols(&mut masks[layer_param_index(layer, 0)], hd);
            mark_cols(&mut masks[layer_param_index(layer, 1)], hd);
            mark_cols(&mut masks[layer_param_index(layer, 2)], hd);
            mark_rows(&mut masks[layer_param_index(layer, 3)], hd);
            mark_cols(&mut masks[layer_param_index(layer, 4)], rd);
            mark_rows(&mut masks[layer_param_index(layer, 5)], rd);
        }
        masks
    }
}

fn slice_cols(t: &Tensor, keep: usize) -> Tensor {
    let (n, m) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(n * keep);
    for i in 0..n {
        data.extend_from_slice(&t.data()[i * m..i * m + keep]);
    }
    Tensor::from_parts(vec![n, keep], data)
}

fn slice_rows(t: &Tensor, keep: usize) -> Tensor {
    Tensor::from_parts(vec![keep, t.cols()], t.data()[..keep * t.cols()].to_vec())
}

fn import(
    params: &[Tensor],
    fwd: &mut SubnetForward,
    idx: usize,
) -> Result<VarId, NumericsError> {
    if let Some(id) = fwd.leaves[idx] {
        return Ok(id);
    }
    let id = fwd.tape.leaf(params[idx].clone())?;
    fwd.leaves[idx] = Some(id);
    Ok(id)
}

fn quantize_weight(
    fwd: &mut SubnetForward,
    sliced: VarId,
    bits: u8,
    surrogate: bool,
) -> Result<VarId, SupernetError> {
    if bits == 16 {
        return Ok(sliced);
    }
    let scales = weight_scales(fwd.tape.value(sliced), bits);
    Ok(fwd.tape.fake_quant_per_channel(sliced, &scales, qmax(bits), surrogate)?)
}

fn quantize_act(
    bank: &mut QuantBank,
    fwd: &mut SubnetForward,
    x: VarId,
    layer: usize,
    site: ActSite,
    bits: u8,
    mode: QuantMode,
) -> Result<VarId, SupernetError> {
    if mode == QuantMode::Calibrating {
        let value = fwd.tape.value(x).clone();
        bank.observe(layer, site, &value);
    }
    if bits == 16 {
        return Ok(x);
    }
    let spec = bank
        .spec(layer, site, bits)
        .ok_or(SupernetError::BadConfig("activation bits not in menu"))?;
    let scale = spec.scale()?;
    Ok(fwd.tape.fake_quant_per_tensor(x, scale, qmax(bits), mode == QuantMode::Surrogate)?)
}

#[allow(clippy::too_many_arguments)]
fn forward_core(
    params: &[Tensor],
    dims: &ArchDims,
    n_layers: usize,
    bank: &mut QuantBank,
    fwd: &mut SubnetForward,
    config: &SubnetConfig,
    obs: &[Obs],
    mode: QuantMode,
) -> Result<VarId, SupernetError> {
    if config.layers.len() != n_layers {
        return Err(SupernetError::BadConfig("layer count mismatch"));
    }
    if obs.is_empty() {
        return Err(SupernetError::BadConfig("empty observation batch"));
    }
    let batch = obs.len();
    let seq = dims.obs_tokens;
    let d = dims.d_model;
    let surrogate = mode == QuantMode::Surrogate;

    // tokens: relative geometry (agent-to-box, box-to-goal, centered box);
    // a fixed affine re-encoding of the observation
    let mut tok = Vec::with_capacity(batch * seq * dims.token_dim);
    for o in obs {
        debug_assert_eq!(seq * dims.token_dim, 6);
        tok.extend_from_slice(&[
            o[2] - o[0],
            o[3] - o[1],
            o[4] - o[2],
            o[5] - o[3],
            o[2] - 0.5,
            o[3] - 0.5,
        ]);
    }
    let tokens = fwd.tape.leaf(Tensor::from_parts(vec![batch * seq, dims.token_dim], tok))?;
    let embed = import(params, fwd, 0)?;
    let role = import(params, fwd, 1)?;
    let mut x = fwd.tape.matmul(tokens, embed)?;
    let role_tiled = fwd.tape.tile_rows(role, batch)?;
    x = fwd.tape.add(x, role_tiled)?;

    for (layer, choice) in config.layers.iter().enumerate() {
        if !choice.keep {
            continue;
        }
        let heads = dims.active_heads(choice.head_ratio);
        let hd = heads * dims.head_dim;
        let rd = choice.mlp_ratio as usize * d;
        let (w_bits, a_bits) = (choice.weight_bits, choice.act_bits);

        // attention sublayer
        let ln1 = fwd.tape.layer_norm(x, LN_EPS)?;
        let a_in = quantize_act(bank, fwd, ln1, layer, ActSite::AttnIn, a_bits, mode)?;
        let mut qkv = [VarId(0); 3];
        for (slot, item) in qkv.iter_mut().enumerate() {
            let w = import(params, fwd, layer_param_index(layer, slot))?;
            let ws = fwd.tape.prefix_cols(w, hd)?;
            let wq = quantize_weight(fwd, ws, w_bits, surrogate)?;
            *item = fwd.tape.matmul(a_in, wq)?;
        }
        let att = fwd.tape.attention(qkv[0], qkv[1], qkv[2], batch, seq, heads, dims.head_dim)?;
        let att_q = quantize_act(bank, fwd, att, layer, ActSite::AttnProj, a_bits, mode)?;
        let o = {
            let w = import(params, fwd, layer_param_index(layer, 3))?;
            let ws = fwd.tape.prefix_rows(w, hd)?;
            let wo = quantize_weight(fwd, ws, w_bits, surrogate)?;
            fwd.tape.matmul(att_q, wo)?
        };
        x = fwd.tape.add(x, o)?;

        // MLP sublayer
        let ln2 = fwd.tape.layer_norm(x, LN_EPS)?;
        let m_in = quantize_act(bank, fwd, ln2, layer, ActSite::MlpIn, a_bits, mode)?;
        let h1 = {
            let w = import(params, fwd, layer_param_index(layer, 4))?;
            let ws = fwd.tape.prefix_cols(w, rd)?;
            let w1 = quantize_weight(fwd, ws, w_bits, surrogate)?;
            let pre = fwd.tape.matmul(m_in, w1)?;
            fwd.tape.gelu(pre)?
        };
        let h1_q = quantize_act(bank, fwd, h1, layer, ActSite::MlpHidden, a_bits, mode)?;
        let mo = {
            let w = import(params, fwd, layer_param_index(layer, 5))?;
            let ws = fwd.tape.prefix_rows(w, rd)?;
            let w2 = quantize_weight(fwd, ws, w_bits, surrogate)?;
            fwd.tape.matmul(h1_q, w2)?
        };
        x = fwd.tape.add(x, mo)?;
    }

    // action head: final norm, pool over tokens, linear with bias
    let xf = fwd.tape.layer_norm(x, LN_EPS)?;
    let pooled = fwd.tape.seq_mean(xf, seq)?;
    let hw = import(params, fwd, layer_param_index(n_layers, 0))?;
    let hb = import(params, fwd, layer_param_index(n_layers, 0) + 1)?;
    let proj = fwd.tape.matmul(pooled, hw)?;
    Ok(fwd.tape.add_bias(proj, hb)?)
}
