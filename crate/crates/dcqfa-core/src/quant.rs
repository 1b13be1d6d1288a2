//! Simulated (fake) quantization with straight-through gradients.
//!
//! Symmetric signed grids at 4/8/16 bits; 16-bit specs are exact identities.
//! Weights use per-output-channel scales recomputed from the live values,
//! activations use per-tensor scales from a running max-abs EMA that is
//! frozen after a warmup period.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::numerics::{quantize_value, Tensor};

/// Largest positive level of the signed grid, `2^(bits-1) - 1`.
pub const fn qmax(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Scales below this are floored and the spec is flagged degenerate.
pub const SCALE_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One scale per output channel (column of a 2-D weight); weights only.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuantError {
    Uncalibrated,
    BadBits(u8),
    ChannelMismatch { scales: usize, cols: usize },
}

impl fmt::Display for QuantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantError::Uncalibrated => write!(f, "quantizer used before calibration"),
            QuantError::BadBits(b) => write!(f, "unsupported bit-width {b}"),
            QuantError::ChannelMismatch { scales, cols } => {
                write!(f, "{scales} channel scales for {cols} columns")
            }
        }
    }
}

impl core::error::Error for QuantError {}

/// Bit-width, granularity and calibration state for one tensor site.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    bits: u8,
    granularity: Granularity,
    decay: f32,
    /// Running max-abs per group; empty until the first observation.
    ema: Vec<f32>,
    frozen: bool,
    degenerate: bool,
}

impl QuantizerSpec {
    pub fn per_tensor(bits: u8, decay: f32) -> Result<Self, QuantError> {
        Self::new(bits, Granularity::PerTensor, decay)
    }

    pub fn per_channel(bits: u8, decay: f32) -> Result<Self, QuantError> {
        Self::new(bits, Granularity::PerChannel, decay)
    }

    fn new(bits: u8, granularity: Granularity, decay: f32) -> Result<Self, QuantError> {
        if !matches!(bits, 4 | 8 | 16) {
            return Err(QuantError::BadBits(bits));
        }
        debug_assert!(decay > 0.0 && decay < 1.0);
        Ok(QuantizerSpec { bits, granularity, decay, ema: Vec::new(), frozen: false, degenerate: false })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// 16-bit specs are identities and never need calibration.
    pub fn is_calibrated(&self) -> bool {
        self.bits == 16 || !self.ema.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Set when an all-zero observation forced the scale floor.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// EMA max-abs update: the first observation initializes the stat,
    /// later ones blend with `decay`. Frozen specs ignore observations.
    pub fn calibrate(&mut self, x: &Tensor) {
        if self.bits == 16 || self.frozen {
            return;
        }
        let observed = match self.granularity {
            Granularity::PerTensor => vec![maxabs(x.data())],
            Granularity::PerChannel => {
                let m = x.cols();
                let mut per = vec![0.0f32; m];
                for (i, &v) in x.data().iter().enumerate() {
                    let a = math::abs32(v);
                    if a > per[i % m] {
                        per[i % m] = a;
                    }
                }
                per
            }
        };
        if self.ema.is_empty() {
            self.ema = observed;
        } else {
            debug_assert_eq!(self.ema.len(), observed.len());
            for (e, o) in self.ema.iter_mut().zip(observed) {
                *e = self.decay * *e + (1.0 - self.decay) * o;
            }
        }
        if self.ema.iter().any(|&e| e / qmax(self.bits) as f32 <= SCALE_FLOOR) {
            self.degenerate = true;
        }
    }

    /// Current per-group scales, floored at [`SCALE_FLOOR`].
    pub fn scales(&self) -> Result<Vec<f32>, QuantError> {
        if self.bits == 16 {
            return Ok(vec![1.0]);
        }
        if self.ema.is_empty() {
            return Err(QuantError::Uncalibrated);
        }
        let q = qmax(self.bits) as f32;
        Ok(self.ema.iter().map(|&e| (e / q).max(SCALE_FLOOR)).collect())
    }

    /// Per-tensor scale convenience.
    pub fn scale(&self) -> Result<f32, QuantError> {
        Ok(self.scales()?[0])
    }

    /// Round-and-clamp to the grid; exact identity at 16 bits.
    pub fn fake_quant(&self, x: &Tensor) -> Result<Tensor, QuantError> {
        if self.bits == 16 {
            return Ok(x.clone());
        }
        let scales = self.scales()?;
        let q = qmax(self.bits);
        let data = match self.granularity {
            Granularity::PerTensor => {
                let s = scales[0];
                x.data().iter().map(|&v| quantize_value(v, s, q).0).collect()
            }
            Granularity::PerChannel => {
                if x.cols() != scales.len() {
                    return Err(QuantError::ChannelMismatch { scales: scales.len(), cols: x.cols() });
                }
                let m = x.cols();
                x.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| quantize_value(v, scales[i % m], q).0)
                    .collect()
            }
        };
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    /// Straight-through mask: true where the pre-clamp level is in range.
    pub fn ste_mask(&self, x: &Tensor) -> Result<Vec<f32>, QuantError> {
        if self.bits == 16 {
            return Ok(vec![1.0; x.numel()]);
        }
        let scales = self.scales()?;
        let q = qmax(self.bits);
        let m = x.cols();
        Ok(x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = match self.granularity {
                    Granularity::PerTensor => scales[0],
                    Granularity::PerChannel => scales[i % m],
                };
                if quantize_value(v, s, q).1 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Drop calibration state so the spec can be recalibrated from fresh
    /// observations.
    pub fn reset(&mut self) {
        self.ema.clear();
        self.frozen = false;
        self.degenerate = false;
    }

    /// Serialization accessors for checkpoints.
    pub fn state(&self) -> (&[f32], bool, bool) {
        (&self.ema, self.frozen, self.degenerate)
    }

    pub fn restore_state(&mut self, ema: Vec<f32>, frozen: bool, degenerate: bool) {
        self.ema = ema;
        self.frozen = frozen;
        self.degenerate = degenerate;
    }
}

/// One-shot per-output-channel scales from the live weight values; weight
/// quantizers recalibrate this way every step because weights drift under
/// training.
pub fn weight_scales(w: &Tensor, bits: u8) -> Vec<f32> {
    debug_assert!(matches!(bits, 4 | 8));
    let m = w.cols();
    let q = qmax(bits) as f32;
    let mut per = vec![0.0f32; m];
    for (i, &v) in w.data().iter().enumerate() {
        let a = math::abs32(v);
        if a > per[i % m] {
            per[i % m] = a;
        }
    }
    per.iter().map(|&e| (e / q).max(SCALE_FLOOR)).collect()
}

/// Stored size of a quantized tensor in bits: `param_count * bits` plus one
/// 32-bit scale per quantization group. Groups are counted uniformly across
/// bit-widths so the bits-proportional term scales exactly with `bits`.
pub fn quantized_size_bits(param_count: u64, bits: u8, groups: u64) -> u64 {
    param_count * bits as u64 + 32 * groups
}

fn maxabs(data: &[f32]) -> f32 {
    data.iter().fold(0.0f32, |acc, &v| acc.max(math::abs32(v)))
}
