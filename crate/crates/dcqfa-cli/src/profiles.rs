//! Device-profile JSON files: block-level latency/memory lookup tables plus
//! budgets. Entries are keyed by literal menu values and resolved against
//! the run's search space at load time; the core loader then enforces
//! completeness and monotonicity.

use std::path::Path;

use dcqfa_core::configspace::SearchSpace;
use dcqfa_core::costmodel::{BlockKey, DeviceProfile, LutEntry, ProfileError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub device_id: String,
    pub budget_latency_ms: f64,
    pub budget_memory_bytes: u64,
    pub base_latency_ms: f64,
    pub base_memory_bytes: u64,
    pub entries: Vec<EntryRow>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryRow {
    pub r: u32,
    pub h: f64,
    pub bw: u8,
    pub ba: u8,
    pub latency_ms: f64,
    pub act_mem_bytes: u64,
}

#[derive(Debug, Error)]
pub enum ProfileIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("entry {0} uses values outside the search-space menus")]
    UnknownKey(String),
    #[error("profile: {0}")]
    Profile(#[from] ProfileError),
}

pub fn load_profile(path: &Path, space: &SearchSpace) -> Result<DeviceProfile, ProfileIoError> {
    let text = std::fs::read_to_string(path)?;
    let file: ProfileFile = serde_json::from_str(&text)?;
    profile_from_file(&file, space)
}

pub fn profile_from_file(
    file: &ProfileFile,
    space: &SearchSpace,
) -> Result<DeviceProfile, ProfileIoError> {
    let mut entries = Vec::with_capacity(file.entries.len());
    for e in &file.entries {
        let key = lookup_key(space, e)
            .ok_or_else(|| ProfileIoError::UnknownKey(format!("(r={}, h={}, bw={}, ba={})", e.r, e.h, e.bw, e.ba)))?;
        entries.push((key, LutEntry { latency_ms: e.latency_ms, act_mem_bytes: e.act_mem_bytes }));
    }
    Ok(DeviceProfile::new(
        file.device_id.clone(),
        file.budget_latency_ms,
        file.budget_memory_bytes,
        file.base_latency_ms,
        file.base_memory_bytes,
        entries,
        space,
    )?)
}

fn lookup_key(space: &SearchSpace, e: &EntryRow) -> Option<BlockKey> {
    Some(BlockKey {
        r_idx: space.mlp_ratios.iter().position(|&r| r == e.r)? as u8,
        h_idx: space.head_ratios.iter().position(|&h| (h - e.h).abs() < 1e-9)? as u8,
        bw_idx: space.weight_bits.iter().position(|&b| b == e.bw)? as u8,
        ba_idx: space.act_bits.iter().position(|&b| b == e.ba)? as u8,
    })
}

pub fn profile_to_file(profile: &DeviceProfile, space: &SearchSpace) -> ProfileFile {
    let entries = profile
        .entries()
        .map(|(key, entry)| EntryRow {
            r: space.mlp_ratios[key.r_idx as usize],
            h: space.head_ratios[key.h_idx as usize],
            bw: space.weight_bits[key.bw_idx as usize],
            ba: space.act_bits[key.ba_idx as usize],
            latency_ms: entry.latency_ms,
            act_mem_bytes: entry.act_mem_bytes,
        })
        .collect();
    ProfileFile {
        device_id: profile.device_id.clone(),
        budget_latency_ms: profile.budget_latency_ms,
        budget_memory_bytes: profile.budget_memory_bytes,
        base_latency_ms: profile.base_latency_ms,
        base_memory_bytes: profile.base_memory_bytes,
        entries,
    }
}

pub fn save_profile(
    path: &Path,
    profile: &DeviceProfile,
    space: &SearchSpace,
) -> Result<(), ProfileIoError> {
    let file = profile_to_file(profile, space);
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}
