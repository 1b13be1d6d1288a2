//! Binary file formats: demo datasets and checkpoints. Everything is
//! little-endian with versioned magic headers; save -> load -> save round
//! trips are byte-exact.

use std::io::{Read, Write};

use dcqfa_core::configspace::{Genome, SearchSpace};
use dcqfa_core::env::{Action, Obs, Trajectory, ACT_DIM, OBS_DIM};
use dcqfa_core::numerics::{AdamState, Tensor};
use dcqfa_core::supernet::{ArchDims, Supernet};
use thiserror::Error;

pub const DEMO_MAGIC: &[u8; 4] = b"DCQD";
pub const DEMO_VERSION: u32 = 1;
pub const CKPT_MAGIC: &[u8; 4] = b"DCQF";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (expected {expected}, found {found})")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("search-space fingerprint mismatch (file {file:#x}, runtime {runtime:#x})")]
    FingerprintMismatch { file: u64, runtime: u64 },
    #[error("corrupt file: {0}")]
    Corrupt(&'static str),
}

// ---- primitive readers/writers -------------------------------------------

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32(w: &mut impl Write, v: f32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u8(r: &mut impl Read) -> Result<u8, FormatError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u32(r: &mut impl Read) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64, FormatError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f32(r: &mut impl Read) -> Result<f32, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64, FormatError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn put_f32s(w: &mut impl Write, vs: &[f32]) -> std::io::Result<()> {
    for v in vs {
        put_f32(w, *v)?;
    }
    Ok(())
}

fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>, FormatError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(get_f32(r)?);
    }
    Ok(out)
}

fn check_magic(r: &mut impl Read, expected: &[u8; 4]) -> Result<(), FormatError> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != expected {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&m).into_owned(),
        });
    }
    Ok(())
}

// ---- demo dataset ---------------------------------------------------------

/// Header: magic, version, n_traj, obs_dim, act_dim; then per trajectory
/// its length, success flag and packed f32 observations and actions.
pub fn write_demos(w: &mut impl Write, trajectories: &[Trajectory]) -> Result<(), FormatError> {
    w.write_all(DEMO_MAGIC)?;
    put_u32(w, DEMO_VERSION)?;
    put_u32(w, trajectories.len() as u32)?;
    put_u32(w, OBS_DIM as u32)?;
    put_u32(w, ACT_DIM as u32)?;
    for t in trajectories {
        put_u32(w, t.len() as u32)?;
        w.write_all(&[t.success as u8])?;
        for o in &t.observations {
            put_f32s(w, o)?;
        }
        for a in &t.actions {
            put_f32s(w, a)?;
        }
    }
    Ok(())
}

pub fn read_demos(r: &mut impl Read) -> Result<Vec<Trajectory>, FormatError> {
    check_magic(r, DEMO_MAGIC)?;
    let version = get_u32(r)?;
    if version != DEMO_VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let n_traj = get_u32(r)? as usize;
    let obs_dim = get_u32(r)? as usize;
    let act_dim = get_u32(r)? as usize;
    if obs_dim != OBS_DIM || act_dim != ACT_DIM {
        return Err(FormatError::Corrupt("unexpected observation or action width"));
    }
    let mut out = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let len = get_u32(r)? as usize;
        if len == 0 {
            return Err(FormatError::Corrupt("empty trajectory"));
        }
        let success = get_u8(r)? != 0;
        let mut observations: Vec<Obs> = Vec::with_capacity(len);
        for _ in 0..len {
            let vals = get_f32s(r, OBS_DIM)?;
            observations.push(vals.try_into().expect("fixed width"));
        }
        let mut actions: Vec<Action> = Vec::with_capacity(len);
        for _ in 0..len {
            let vals = get_f32s(r, ACT_DIM)?;
            actions.push(vals.try_into().expect("fixed width"));
        }
        out.push(Trajectory { observations, actions, success });
    }
    Ok(out)
}

// ---- checkpoints -----------------------------------------------------------

/// What a checkpoint carries besides the supernet itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Supernet,
    /// Adam state (absent in exported subnets).
    pub optimizer: Option<AdamState>,
    /// RNG stream state: (seed bytes, word position).
    pub rng_state: Option<([u8; 32], u128)>,
    /// Compacted config genome for exported subnets.
    pub subnet_genome: Option<Genome>,
}

fn write_space(w: &mut impl Write, space: &SearchSpace) -> std::io::Result<()> {
    put_u32(w, space.layers as u32)?;
    put_u32(w, space.mlp_ratios.len() as u32)?;
    for &r in &space.mlp_ratios {
        put_u32(w, r)?;
    }
    put_u32(w, space.head_ratios.len() as u32)?;
    for &h in &space.head_ratios {
        put_f64(w, h)?;
    }
    put_u32(w, space.weight_bits.len() as u32)?;
    w.write_all(&space.weight_bits)?;
    put_u32(w, space.act_bits.len() as u32)?;
    w.write_all(&space.act_bits)?;
    put_u32(w, space.min_active_layers as u32)
}

fn read_space(r: &mut impl Read) -> Result<SearchSpace, FormatError> {
    let layers = get_u32(r)? as usize;
    let n = get_u32(r)? as usize;
    let mut mlp_ratios = Vec::with_capacity(n);
    for _ in 0..n {
        mlp_ratios.push(get_u32(r)?);
    }
    let n = get_u32(r)? as usize;
    let mut head_ratios = Vec::with_capacity(n);
    for _ in 0..n {
        head_ratios.push(get_f64(r)?);
    }
    let n = get_u32(r)? as usize;
    let mut weight_bits = vec![0u8; n];
    r.read_exact(&mut weight_bits)?;
    let n = get_u32(r)? as usize;
    let mut act_bits = vec![0u8; n];
    r.read_exact(&mut act_bits)?;
    let min_active_layers = get_u32(r)? as usize;
    Ok(SearchSpace { layers, mlp_ratios, head_ratios, weight_bits, act_bits, min_active_layers })
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<(), FormatError> {
    let net = &ckpt.net;
    w.write_all(CKPT_MAGIC)?;
    put_u32(w, CKPT_VERSION)?;
    put_u64(w, net.fingerprint())?;
    write_space(w, &net.space)?;
    for v in [
        net.dims.d_model,
        net.dims.max_heads,
        net.dims.head_dim,
        net.dims.obs_tokens,
        net.dims.token_dim,
        net.dims.act_dim,
    ] {
        put_u32(w, v as u32)?;
    }
    // flat parameter arrays in declared order
    put_u32(w, net.params().len() as u32)?;
    for p in net.params() {
        put_u32(w, p.shape().len() as u32)?;
        for &d in p.shape() {
            put_u32(w, d as u32)?;
        }
        put_f32s(w, p.data())?;
    }
    // quantizer bank state
    let specs = net.quant_bank().specs();
    put_u32(w, specs.len() as u32)?;
    for s in specs {
        let (ema, frozen, degenerate) = s.state();
        put_u32(w, ema.len() as u32)?;
        put_f32s(w, ema)?;
        w.write_all(&[frozen as u8, degenerate as u8])?;
    }
    // optimizer state
    match &ckpt.optimizer {
        Some(adam) => {
            w.write_all(&[1])?;
            put_u64(w, adam.step)?;
            for buf in adam.m.iter().chain(adam.v.iter()) {
                put_f32s(w, buf.data())?;
            }
        }
        None => w.write_all(&[0])?,
    }
    // rng state
    match &ckpt.rng_state {
        Some((seed, word_pos)) => {
            w.write_all(&[1])?;
            w.write_all(seed)?;
            put_u64(w, (*word_pos & u64::MAX as u128) as u64)?;
            put_u64(w, (*word_pos >> 64) as u64)?;
        }
        None => w.write_all(&[0])?,
    }
    // exported-subnet config
    match &ckpt.subnet_genome {
        Some(genome) => {
            w.write_all(&[1])?;
            put_u32(w, genome.len() as u32)?;
            w.write_all(genome)?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, FormatError> {
    check_magic(r, CKPT_MAGIC)?;
    let version = get_u32(r)?;
    if version != CKPT_VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let fingerprint = get_u64(r)?;
    let space = read_space(r)?;
    let mut dims_vals = [0usize; 6];
    for v in dims_vals.iter_mut() {
        *v = get_u32(r)? as usize;
    }
    let dims = ArchDims {
        d_model: dims_vals[0],
        max_heads: dims_vals[1],
        head_dim: dims_vals[2],
        obs_tokens: dims_vals[3],
        token_dim: dims_vals[4],
        act_dim: dims_vals[5],
    };
    // read the stored tensors with their own shapes (exported subnets carry
    // per-layer sliced parameters)
    let n_params = get_u32(r)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let rank = get_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(get_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = get_f32s(r, numel)?;
        params.push(
            Tensor::new(shape, data).map_err(|_| FormatError::Corrupt("bad parameter tensor"))?,
        );
    }
    let mut net = Supernet::from_stored(space, dims, params)
        .map_err(|_| FormatError::Corrupt("stored space, dims or parameters are invalid"))?;
    if net.fingerprint() != fingerprint {
        return Err(FormatError::FingerprintMismatch {
            file: fingerprint,
            runtime: net.fingerprint(),
        });
    }
    let n_specs = get_u32(r)? as usize;
    if n_specs != net.quant_bank().specs().len() {
        return Err(FormatError::Corrupt("quantizer bank size mismatch"));
    }
    for i in 0..n_specs {
        let n = get_u32(r)? as usize;
        let ema = get_f32s(r, n)?;
        let frozen = get_u8(r)? != 0;
        let degenerate = get_u8(r)? != 0;
        net.quant_bank_mut().specs_mut()[i].restore_state(ema, frozen, degenerate);
    }
    let optimizer = if get_u8(r)? == 1 {
        let step = get_u64(r)?;
        let mut adam = AdamState::new(net.params());
        adam.step = step;
        for buf in adam.m.iter_mut() {
            let n = buf.numel();
            let data = get_f32s(r, n)?;
            buf.data_mut().copy_from_slice(&data);
        }
        for buf in adam.v.iter_mut() {
            let n = buf.numel();
            let data = get_f32s(r, n)?;
            buf.data_mut().copy_from_slice(&data);
        }
        Some(adam)
    } else {
        None
    };
    let rng_state = if get_u8(r)? == 1 {
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let lo = get_u64(r)? as u128;
        let hi = get_u64(r)? as u128;
        Some((seed, lo | (hi << 64)))
    } else {
        None
    };
    let subnet_genome = if get_u8(r)? == 1 {
        let n = get_u32(r)? as usize;
        let mut genome = vec![0u8; n];
        r.read_exact(&mut genome)?;
        Some(genome)
    } else {
        None
    };
    Ok(Checkpoint { net, optimizer, rng_state, subnet_genome })
}

pub fn save_checkpoint(path: &std::path::Path, ckpt: &Checkpoint) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint, FormatError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

pub fn save_demos(path: &std::path::Path, trajectories: &[Trajectory]) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_demos(&mut buf, trajectories)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_demos(path: &std::path::Path) -> Result<Vec<Trajectory>, FormatError> {
    let bytes = std::fs::read(path)?;
    read_demos(&mut bytes.as_slice())
}
