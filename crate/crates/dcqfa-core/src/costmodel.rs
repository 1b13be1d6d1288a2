//! Device profiles: block-level latency/memory lookup tables, subnet cost
//! aggregation, softplus budget regularizers and feasibility checks.
//!
//! Latency is additive over active blocks plus a constant base term for the
//! embedding and head. Weight memory is analytic in the bit-widths;
//! activation memory comes from the table.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use alloc::collections::BTreeMap;

use crate::configspace::{LayerChoice, SearchSpace, SubnetConfig};
use crate::math;
use crate::quant::quantized_size_bits;

/// LUT key for one elastic block, as indices into the search-space menus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BlockKey {
    pub r_idx: u8,
    pub h_idx: u8,
    pub bw_idx: u8,
    pub ba_idx: u8,
}

impl BlockKey {
    pub fn for_choice(space: &SearchSpace, choice: &LayerChoice) -> Option<BlockKey> {
        Some(BlockKey {
            r_idx: space.mlp_ratios.iter().position(|&r| r == choice.mlp_ratio)? as u8,
            h_idx: space
                .head_ratios
                .iter()
                .position(|&h| (h - choice.head_ratio).abs() < 1e-12)? as u8,
            bw_idx: space.weight_bits.iter().position(|&b| b == choice.weight_bits)? as u8,
            ba_idx: space.act_bits.iter().position(|&b| b == choice.act_bits)? as u8,
        })
    }

    fn describe(&self, space: &SearchSpace) -> String {
        format!(
            "(r={}, h={}, bw={}, ba={})",
            space.mlp_ratios[self.r_idx as usize],
            space.head_ratios[self.h_idx as usize],
            space.weight_bits[self.bw_idx as usize],
            space.act_bits[self.ba_idx as usize]
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LutEntry {
    pub latency_ms: f64,
    pub act_mem_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileError {
    BadBudget(&'static str),
    MissingKeys(Vec<String>),
    DuplicateKey(String),
    KeyOutsideSpace(String),
    NonMonotone(Vec<String>),
    BadEntry(String),
}

impl fmt::Display for ProfileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileError::BadBudget(which) => write!(f, "budget {which} must be positive"),
            ProfileError::MissingKeys(keys) => {
                write!(f, "lookup table incomplete, missing {} keys: ", keys.len())?;
                write_list(f, keys)
            }
            ProfileError::DuplicateKey(k) => write!(f, "duplicate lookup-table key {k}"),
            ProfileError::KeyOutsideSpace(k) => {
                write!(f, "lookup-table key {k} not in the search space")
            }
            ProfileError::NonMonotone(pairs) => {
                write!(f, "lookup table not monotone at: ")?;
                write_list(f, pairs)
            }
            ProfileError::BadEntry(k) => write!(f, "non-finite or negative entry at {k}"),
        }
    }
}

impl core::error::Error for ProfileError {}

fn write_list(f: &mut fmt::Formatter<'_>, items: &[String]) -> fmt::Result {
    for (i, it) in items.iter().enumerate().take(8) {
        if i > 0 {
            write!(f, ", ")?;
        }
        write!(f, "{it}")?;
    }
    if items.len() > 8 {
        write!(f, ", ... ({} total)", items.len())?;
    }
    Ok(())
}

/// Per-block weight statistics a cost model needs: parameter count and
/// quantization group count (output channels) at a given layer choice.
pub trait BlockParamCount {
    fn block_params(&self, choice: &LayerChoice) -> (u64, u64);
}

/// A device's budgets and block-level cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub device_id: String,
    pub budget_latency_ms: f64,
    pub budget_memory_bytes: u64,
    pub base_latency_ms: f64,
    pub base_memory_bytes: u64,
    lut: BTreeMap<BlockKey, LutEntry>,
}

impl DeviceProfile {
    /// Validates budgets, completeness over the space's reachable block keys,
    /// and monotonicity of latency and activation memory in every coordinate.
    pub fn new(
        device_id: String,
        budget_latency_ms: f64,
        budget_memory_bytes: u64,
        base_latency_ms: f64,
        base_memory_bytes: u64,
        entries: Vec<(BlockKey, LutEntry)>,
        space: &SearchSpace,
    ) -> Result<Self, ProfileError> {
        if !(budget_latency_ms > 0.0) {
            return Err(ProfileError::BadBudget("latency"));
        }
        if budget_memory_bytes == 0 {
            return Err(ProfileError::BadBudget("memory"));
        }
        let dims = [
            space.mlp_ratios.len(),
            space.head_ratios.len(),
            space.weight_bits.len(),
            space.act_bits.len(),
        ];
        let mut lut = BTreeMap::new();
        for (key, entry) in entries {
            if key.r_idx as usize >= dims[0]
                || key.h_idx as usize >= dims[1]
                || key.bw_idx as usize >= dims[2]
                || key.ba_idx as usize >= dims[3]
            {
                return Err(ProfileError::KeyOutsideSpace(format!("{key:?}")));
            }
            if !entry.latency_ms.is_finite() || entry.latency_ms < 0.0 {
                return Err(ProfileError::BadEntry(key.describe(space)));
            }
            if lut.insert(key, entry).is_some() {
                return Err(ProfileError::DuplicateKey(key.describe(space)));
            }
        }
        // completeness over the full menu product
        let mut missing = Vec::new();
        for r in 0..dims[0] {
            for h in 0..dims[1] {
                for bw in 0..dims[2] {
                    for ba in 0..dims[3] {
                        let key = BlockKey {
                            r_idx: r as u8,
                            h_idx: h as u8,
                            bw_idx: bw as u8,
                            ba_idx: ba as u8,
                        };
                        if !lut.contains_key(&key) {
                            missing.push(key.describe(space));
                        }
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(ProfileError::MissingKeys(missing));
        }
        // monotone: stepping any coordinate up never decreases either cost
        let mut offending = Vec::new();
        for (&key, entry) in &lut {
            for step in 0..4u8 {
                let mut up = key;
                match step {
                    0 => up.r_idx += 1,
                    1 => up.h_idx += 1,
                    2 => up.bw_idx += 1,
                    _ => up.ba_idx += 1,
                }
                if let Some(next) = lut.get(&up) {
                    if next.latency_ms < entry.latency_ms
                        || next.act_mem_bytes < entry.act_mem_bytes
                    {
                        offending.push(format!(
                            "{} -> {}",
                            key.describe(space),
                            up.describe(space)
                        ));
                    }
                }
            }
        }
        if !offending.is_empty() {
            return Err(ProfileError::NonMonotone(offending));
        }
        Ok(DeviceProfile {
            device_id,
            budget_latency_ms,
            budget_memory_bytes,
            base_latency_ms,
            base_memory_bytes,
            lut,
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&BlockKey, &LutEntry)> {
        self.lut.iter()
    }

    fn entry(&self, space: &SearchSpace, choice: &LayerChoice) -> &LutEntry {
        let key = BlockKey::for_choice(space, choice).expect("choice in space");
        self.lut.get(&key).expect("validated LUT is complete")
    }
}

/// Base latency plus the sum of active block latencies, in milliseconds.
pub fn estimate_latency(profile: &DeviceProfile, space: &SearchSpace, config: &SubnetConfig) -> f64 {
    let mut total = profile.base_latency_ms;
    for l in config.layers.iter().filter(|l| l.keep) {
        total += profile.entry(space, l).latency_ms;
    }
    total
}

/// Memory estimate with its bits-proportional weight term separated out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub total_bytes: u64,
    /// Sum over active layers of `params * weight_bits / 8`.
    pub weight_bytes: u64,
    /// One 32-bit scale per quantization group, all bit-widths alike.
    pub scale_bytes: u64,
    pub activation_bytes: u64,
    pub base_bytes: u64,
}

/// Base memory plus, per active layer, the quantized weight size at that
/// layer's weight bits and the table's activation bytes.
pub fn estimate_memory(
    profile: &DeviceProfile,
    space: &SearchSpace,
    config: &SubnetConfig,
    params: &impl BlockParamCount,
) -> MemoryEstimate {
    let mut weight_bytes = 0u64;
    let mut scale_bytes = 0u64;
    let mut activation_bytes = 0u64;
    for l in config.layers.iter().filter(|l| l.keep) {
        let (count, groups) = params.block_params(l);
        let bits = quantized_size_bits(count, l.weight_bits, groups);
        let w_bits = count * l.weight_bits as u64;
        weight_bytes += w_bits.div_ceil(8);
        scale_bytes += (bits - w_bits) / 8;
        activation_bytes += profile.entry(space, l).act_mem_bytes;
    }
    MemoryEstimate {
        total_bytes: profile.base_memory_bytes + weight_bytes + scale_bytes + activation_bytes,
        weight_bytes,
        scale_bytes,
        activation_bytes,
        base_bytes: profile.base_memory_bytes,
    }
}

/// softplus((C - B) / B); strictly increasing in the cost, ln 2 at budget.
pub fn regularizer(cost: f64, budget: f64) -> f64 {
    math::softplus((cost - budget) / budget)
}

pub fn reg_latency(profile: &DeviceProfile, space: &SearchSpace, config: &SubnetConfig) -> f64 {
    regularizer(estimate_latency(profile, space, config), profile.budget_latency_ms)
}

pub fn reg_memory(
    profile: &DeviceProfile,
    space: &SearchSpace,
    config: &SubnetConfig,
    params: &impl BlockParamCount,
) -> f64 {
    regularizer(
        estimate_memory(profile, space, config, params).total_bytes as f64,
        profile.budget_memory_bytes as f64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    /// Sum of relative budget overshoots, zero when feasible.
    pub violation: f64,
}

/// Budgets are inclusive: costs exactly at budget are feasible.
pub fn is_feasible(
    profile: &DeviceProfile,
    space: &SearchSpace,
    config: &SubnetConfig,
    params: &impl BlockParamCount,
) -> Feasibility {
    let lat = estimate_latency(profile, space, config);
    let mem = estimate_memory(profile, space, config, params).total_bytes as f64;
    let b_lat = profile.budget_latency_ms;
    let b_mem = profile.budget_memory_bytes as f64;
    let violation = ((lat - b_lat) / b_lat).max(0.0) + ((mem - b_mem) / b_mem).max(0.0);
    Feasibility { feasible: lat <= b_lat && mem <= b_mem, violation }
}

// ---- profile generators ------------------------------------------------

/// Parameters of one synthetic device. Latency per block follows
/// `a * r * h * sqrt(bw * ba)` with device-specific constants; budgets are
/// fractions of the largest config's cost so tighter devices force lower
/// bit-widths.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticDevice {
    pub index: usize,
    pub latency_budget_frac: f64,
    pub memory_budget_frac: f64,
}

pub fn synthetic_profile(
    space: &SearchSpace,
    params: &impl BlockParamCount,
    device: &SyntheticDevice,
) -> Result<DeviceProfile, ProfileError> {
    let a = 0.9 * (1.0 + 0.4 * device.index as f64);
    let base_latency = 1.5 * (1.0 + 0.2 * device.index as f64);
    let act_unit = 384.0 * (1.0 + 0.25 * device.index as f64);
    let mut entries = Vec::new();
    for (r_idx, &r) in space.mlp_ratios.iter().enumerate() {
        for (h_idx, &h) in space.head_ratios.iter().enumerate() {
            for (bw_idx, &bw) in space.weight_bits.iter().enumerate() {
                for (ba_idx, &ba) in space.act_bits.iter().enumerate() {
                    let key = BlockKey {
                        r_idx: r_idx as u8,
                        h_idx: h_idx as u8,
                        bw_idx: bw_idx as u8,
                        ba_idx: ba_idx as u8,
                    };
                    let latency = a * r as f64 * h * math::sqrt(bw as f64 * ba as f64);
                    let act_mem = (act_unit * (1.0 + r as f64) * h * ba as f64) as u64;
                    entries.push((key, LutEntry { latency_ms: latency, act_mem_bytes: act_mem }));
                }
            }
        }
    }
    // budgets relative to the largest configuration's cost on this device
    let probe = DeviceProfile::new(
        format!("synth-{}", device.index),
        f64::MAX,
        u64::MAX,
        base_latency,
        4096,
        entries.clone(),
        space,
    )?;
    let largest = space.largest_config();
    let max_lat = estimate_latency(&probe, space, &largest);
    let max_mem = estimate_memory(&probe, space, &largest, params).total_bytes;
    DeviceProfile::new(
        format!("synth-{}", device.index),
        max_lat * device.latency_budget_frac,
        ((max_mem as f64 * device.memory_budget_frac) as u64).max(1),
        base_latency,
        4096,
        entries,
        space,
    )
}

/// Whole-model latency and memory anchors measured on a Jetson Orin NX at
/// FP16 / W8A8 / W4A4; the table spreads them over blocks so the uniform
/// full-width configs reproduce the measured totals exactly.
pub const ORIN_NX_LATENCY_MS: [f64; 3] = [217.38, 297.84, 644.74]; // 4, 8, 16 bit
pub const ORIN_NX_MEMORY_BYTES: [u64; 3] = [4_000_000_000, 7_900_000_000, 15_200_000_000];
pub const ORIN_NX_DEVICE_ID: &str = "orin-nx-paper";

/// Fixture profile anchored at the measured whole-model numbers. Requires
/// the bit menus {4, 8, 16}.
pub fn orin_nx_paper_profile(
    space: &SearchSpace,
    params: &impl BlockParamCount,
) -> Result<DeviceProfile, ProfileError> {
    let anchor = |bits: u8, table: &[f64; 3]| -> f64 {
        match bits {
            4 => table[0],
            8 => table[1],
            _ => table[2],
        }
    };
    let lat_anchor = |bits: u8| anchor(bits, &ORIN_NX_LATENCY_MS);
    let mem_anchor = |bits: u8| match bits {
        4 => ORIN_NX_MEMORY_BYTES[0] as f64,
        8 => ORIN_NX_MEMORY_BYTES[1] as f64,
        _ => ORIN_NX_MEMORY_BYTES[2] as f64,
    };
    let r_max = *space.mlp_ratios.last().unwrap() as f64;
    let l = space.layers as f64;
    // width factor: 1 at (r_max, h=1), monotone increasing, >= 1/4
    let width = |r: u32, h: f64| ((1.0 + r as f64 / r_max) / 2.0) * ((1.0 + h) / 2.0);
    // whole-model weight bytes at uniform bits, subtracted from the memory
    // anchors so the activation table absorbs the remainder exactly
    let weight_total = |bits: u8| -> f64 {
        space
            .largest_config()
            .layers
            .iter()
            .map(|c| {
                let (count, groups) = params.block_params(c);
                quantized_size_bits(count, bits, groups) as f64 / 8.0
            })
            .sum()
    };
    let mut entries = Vec::new();
    for (r_idx, &r) in space.mlp_ratios.iter().enumerate() {
        for (h_idx, &h) in space.head_ratios.iter().enumerate() {
            for (bw_idx, &bw) in space.weight_bits.iter().enumerate() {
                for (ba_idx, &ba) in space.act_bits.iter().enumerate() {
                    let key = BlockKey {
                        r_idx: r_idx as u8,
                        h_idx: h_idx as u8,
                        bw_idx: bw_idx as u8,
                        ba_idx: ba_idx as u8,
                    };
                    // geometric mean interpolates mixed precision between the
                    // measured uniform anchors and stays monotone
                    let lat =
                        math::sqrt(lat_anchor(bw) * lat_anchor(ba)) * width(r, h) / l;
                    let act =
                        ((mem_anchor(ba) - weight_total(ba)) * width(r, h) / l) as u64;
                    entries.push((key, LutEntry { latency_ms: lat, act_mem_bytes: act }));
                }
            }
        }
    }
    DeviceProfile::new(
        String::from(ORIN_NX_DEVICE_ID),
        ORIN_NX_LATENCY_MS[2],
        ORIN_NX_MEMORY_BYTES[2],
        0.0,
        0,
        entries,
        space,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::Rng as _;
    use rand::SeedableRng;

    struct ToyParams;

    impl BlockParamCount for ToyParams {
        fn block_params(&self, choice: &LayerChoice) -> (u64, u64) {
            // params proportional to r and h; groups small and even
            let heads = libm::ceil(choice.head_ratio * 4.0) as u64;
            (choice.mlp_ratio as u64 * 2048 + heads * 512, heads * 8 + 16)
        }
    }

    fn space() -> SearchSpace {
        SearchSpace {
            layers: 4,
            mlp_ratios: vec![1, 2, 4],
            head_ratios: vec![0.5, 1.0],
            weight_bits: vec![4, 8, 16],
            act_bits: vec![4, 8, 16],
            min_active_layers: 1,
        }
    }

    fn manual_profile(space: &SearchSpace, lat: f64, act: u64) -> DeviceProfile {
        let mut entries = Vec::new();
        for r in 0..space.mlp_ratios.len() {
            for h in 0..space.head_ratios.len() {
                for bw in 0..space.weight_bits.len() {
                    for ba in 0..space.act_bits.len() {
                        entries.push((
                            BlockKey {
                                r_idx: r as u8,
                                h_idx: h as u8,
                                bw_idx: bw as u8,
                                ba_idx: ba as u8,
                            },
                            LutEntry { latency_ms: lat, act_mem_bytes: act },
                        ));
                    }
                }
            }
        }
        DeviceProfile::new("flat".to_string(), 100.0, 1 << 30, 0.0, 0, entries, space).unwrap()
    }

    #[test]
    fn latency_is_base_plus_active_block_sum() {
        let space = SearchSpace { layers: 2, min_active_layers: 0, ..space() };
        let mut entries = Vec::new();
        for r in 0..3u8 {
            for h in 0..2u8 {
                for bw in 0..3u8 {
                    for ba in 0..3u8 {
                        let lat = if r == 0 { 3.0 } else { 5.0 };
                        entries.push((
                            BlockKey { r_idx: r, h_idx: h, bw_idx: bw, ba_idx: ba },
                            LutEntry { latency_ms: lat, act_mem_bytes: 0 },
                        ));
                    }
                }
            }
        }
        let p = DeviceProfile::new("two".to_string(), 100.0, 1 << 30, 0.0, 0, entries, &space)
            .unwrap();
        let mut config = space.smallest_config();
        config.layers[0] = LayerChoice {
            keep: true,
            mlp_ratio: 1,
            head_ratio: 0.5,
            weight_bits: 4,
            act_bits: 4,
        };
        config.layers[1] = LayerChoice {
            keep: true,
            mlp_ratio: 2,
            head_ratio: 0.5,
            weight_bits: 4,
            act_bits: 4,
        };
        assert_eq!(estimate_latency(&p, &space, &config), 8.0);
        // all skipped -> base only
        let empty = space.smallest_config();
        assert_eq!(estimate_latency(&p, &space, &empty), 0.0);
    }

    #[test]
    fn memory_weight_term_halves_exactly_from_16_to_8_bits() {
        let space = space();
        let p = manual_profile(&space, 1.0, 1000);
        let mut c16 = space.largest_config();
        let m16 = estimate_memory(&p, &space, &c16, &ToyParams);
        for l in &mut c16.layers {
            l.weight_bits = 8;
        }
        let m8 = estimate_memory(&p, &space, &c16, &ToyParams);
        assert_eq!(m16.weight_bytes, 2 * m8.weight_bytes);
        // scale overhead is bit-independent
        assert_eq!(m16.scale_bytes, m8.scale_bytes);
    }

    #[test]
    fn zero_layer_config_costs_base_memory() {
        let space = SearchSpace { min_active_layers: 0, ..space() };
        let mut p = manual_profile(&space, 1.0, 1000);
        p.base_memory_bytes = 777;
        let est = estimate_memory(&p, &space, &space.smallest_config(), &ToyParams);
        assert_eq!(est.total_bytes, 777);
    }

    #[test]
    fn regularizer_fixture_values() {
        let b = 123.4;
        assert!((regularizer(b, b) - core::f64::consts::LN_2).abs() < 1e-9);
        assert!((regularizer(2.0 * b, b) - 1.3132616875182228).abs() < 1e-9);
        assert!((regularizer(0.0, b) - 0.31326168751822286).abs() < 1e-9);
    }

    #[test]
    fn regularizer_is_strictly_increasing_and_positive() {
        let b = 50.0;
        let mut prev = regularizer(0.0, b);
        assert!(prev > 0.0);
        for i in 1..200 {
            let r = regularizer(i as f64, b);
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn feasibility_boundary_is_inclusive() {
        let space = space();
        let p = manual_profile(&space, 1.0, 1000);
        let config = space.largest_config();
        let lat = estimate_latency(&p, &space, &config);
        let mem = estimate_memory(&p, &space, &config, &ToyParams).total_bytes;
        let exact = DeviceProfile::new(
            "exact".to_string(),
            lat,
            mem,
            p.base_latency_ms,
            p.base_memory_bytes,
            p.entries().map(|(k, e)| (*k, *e)).collect(),
            &space,
        )
        .unwrap();
        let f = is_feasible(&exact, &space, &config, &ToyParams);
        assert!(f.feasible);
        assert_eq!(f.violation, 0.0);
        // 1.5x the latency budget -> violation 0.5
        let tight = DeviceProfile::new(
            "tight".to_string(),
            lat / 1.5,
            mem,
            p.base_latency_ms,
            p.base_memory_bytes,
            p.entries().map(|(k, e)| (*k, *e)).collect(),
            &space,
        )
        .unwrap();
        let f = is_feasible(&tight, &space, &config, &ToyParams);
        assert!(!f.feasible);
        assert!((f.violation - 0.5).abs() < 1e-12);
    }

    #[test]
    fn feasibility_matches_recomputed_inequalities_on_random_configs() {
        let space = space();
        let dev = SyntheticDevice { index: 0, latency_budget_frac: 0.5, memory_budget_frac: 0.6 };
        let p = synthetic_profile(&space, &ToyParams, &dev).unwrap();
        let mut rng = crate::Rng::seed_from_u64(40);
        for _ in 0..1000 {
            let c = space.sample_uniform(&mut rng);
            let f = is_feasible(&p, &space, &c, &ToyParams);
            let lat_ok = estimate_latency(&p, &space, &c) <= p.budget_latency_ms;
            let mem_ok = estimate_memory(&p, &space, &c, &ToyParams).total_bytes
                <= p.budget_memory_bytes;
            assert_eq!(f.feasible, lat_ok && mem_ok);
        }
    }

    #[test]
    fn aggregation_matches_an_explicit_sum() {
        let space = space();
        let dev = SyntheticDevice { index: 1, latency_budget_frac: 0.5, memory_budget_frac: 0.6 };
        let p = synthetic_profile(&space, &ToyParams, &dev).unwrap();
        let mut rng = crate::Rng::seed_from_u64(41);
        for _ in 0..100 {
            let c = space.sample_uniform(&mut rng);
            let mut expect = p.base_latency_ms;
            for l in &c.layers {
                if l.keep {
                    let key = BlockKey::for_choice(&space, l).unwrap();
                    expect += p.entries().find(|(k, _)| **k == key).unwrap().1.latency_ms;
                }
            }
            assert_eq!(estimate_latency(&p, &space, &c), expect);
        }
    }

    #[test]
    fn costs_are_monotone_in_every_coordinate() {
        let space = space();
        let dev = SyntheticDevice { index: 2, latency_budget_frac: 0.5, memory_budget_frac: 0.6 };
        let p = synthetic_profile(&space, &ToyParams, &dev).unwrap();
        let orin = orin_nx_paper_profile(&space, &ToyParams).unwrap();
        for profile in [&p, &orin] {
            let mut rng = crate::Rng::seed_from_u64(42);
            for _ in 0..300 {
                let c = space.sample_uniform(&mut rng);
                let lat = estimate_latency(profile, &space, &c);
                let mem = estimate_memory(profile, &space, &c, &ToyParams).total_bytes;
                let mut grown = c.clone();
                // activate a layer, or grow a random field of an active layer
                let li = rng.gen_range(0..grown.layers.len());
                let l = &mut grown.layers[li];
                if !l.keep {
                    l.keep = true;
                } else {
                    match rng.gen_range(0..4) {
                        0 => l.mlp_ratio = *space.mlp_ratios.last().unwrap(),
                        1 => l.head_ratio = *space.head_ratios.last().unwrap(),
                        2 => l.weight_bits = 16,
                        _ => l.act_bits = 16,
                    }
                }
                assert!(estimate_latency(profile, &space, &grown) >= lat);
                assert!(
                    estimate_memory(profile, &space, &grown, &ToyParams).total_bytes >= mem
                );
            }
        }
    }

    #[test]
    fn loader_rejects_incomplete_and_non_monotone_tables() {
        let space = space();
        let dev = SyntheticDevice { index: 0, latency_budget_frac: 0.5, memory_budget_frac: 0.6 };
        let good = synthetic_profile(&space, &ToyParams, &dev).unwrap();
        let mut entries: Vec<(BlockKey, LutEntry)> =
            good.entries().map(|(k, e)| (*k, *e)).collect();
        entries.pop();
        let err = DeviceProfile::new("x".to_string(), 1.0, 1, 0.0, 0, entries, &space)
            .unwrap_err();
        assert!(matches!(err, ProfileError::MissingKeys(ref keys) if keys.len() == 1));

        let mut entries: Vec<(BlockKey, LutEntry)> =
            good.entries().map(|(k, e)| (*k, *e)).collect();
        entries[0].1.latency_ms = 1e9; // smallest key now dearer than its neighbours
        let err = DeviceProfile::new("y".to_string(), 1.0, 1, 0.0, 0, entries, &space)
            .unwrap_err();
        assert!(matches!(err, ProfileError::NonMonotone(_)));
    }

    #[test]
    fn orin_fixture_reproduces_measured_totals_and_ratios() {
        let space = space();
        let p = orin_nx_paper_profile(&space, &ToyParams).unwrap();
        let mut config = space.largest_config();
        let lat16 = estimate_latency(&p, &space, &config);
        let mem16 = estimate_memory(&p, &space, &config, &ToyParams).total_bytes as f64;
        for l in &mut config.layers {
            l.weight_bits = 8;
            l.act_bits = 8;
        }
        let lat8 = estimate_latency(&p, &space, &config);
        let mem8 = estimate_memory(&p, &space, &config, &ToyParams).total_bytes as f64;
        for l in &mut config.layers {
            l.weight_bits = 4;
            l.act_bits = 4;
        }
        let lat4 = estimate_latency(&p, &space, &config);
        let mem4 = estimate_memory(&p, &space, &config, &ToyParams).total_bytes as f64;

        assert!((lat16 - 644.74).abs() < 1e-6);
        assert!((lat8 - 297.84).abs() < 1e-6);
        assert!((lat4 - 217.38).abs() < 1e-6);
        assert!((lat16 / lat8 - 2.16).abs() < 0.01);
        assert!((lat16 / lat4 - 2.97).abs() < 0.01);
        assert!((mem16 / mem8 - 1.92).abs() < 0.01);
        assert!((mem16 / mem4 - 3.80).abs() < 0.01);
    }
}
