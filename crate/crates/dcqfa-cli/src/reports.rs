//! CSV/JSON report emission. All output is deterministic: fixed column
//! orders, BTree-ordered maps, no timestamps.

use dcqfa_core::configspace::{Genome, SearchSpace, SubnetConfig};
use dcqfa_core::opd::OpdStepMetrics;
use dcqfa_core::search::{Individual, ParetoFront};
use dcqfa_core::trainer::StepMetrics;
use serde::{Deserialize, Serialize};

pub fn genome_string(genome: &Genome) -> String {
    genome.iter().map(|g| g.to_string()).collect::<Vec<_>>().join("-")
}

pub fn parse_genome(s: &str) -> Option<Genome> {
    s.split('-').map(|p| p.parse::<u8>().ok()).collect()
}

pub const TRAIN_METRICS_HEADER: &str = "step,device_id,config_hash,l_policy,r_lat,r_mem,l_base";

pub fn train_metrics_csv(rows: &[StepMetrics]) -> String {
    let mut out = String::from(TRAIN_METRICS_HEADER);
    out.push('\n');
    for m in rows {
        out.push_str(&format!(
            "{},{},{:016x},{},{},{},{}\n",
            m.step, m.device_id, m.config_hash, m.l_policy, m.r_lat, m.r_mem, m.l_base
        ));
    }
    out
}

pub const DISTILL_METRICS_HEADER: &str =
    "step,device_id,config_hash,l_policy,r_lat,r_mem,l_base,k,l_opd";

/// Base-loss rows with the step's distillation horizon and loss appended.
pub fn distill_metrics_csv(rows: &[(Vec<StepMetrics>, OpdStepMetrics)]) -> String {
    let mut out = String::from(DISTILL_METRICS_HEADER);
    out.push('\n');
    for (metrics, opd) in rows {
        for m in metrics {
            out.push_str(&format!(
                "{},{},{:016x},{},{},{},{},{},{}\n",
                m.step,
                m.device_id,
                m.config_hash,
                m.l_policy,
                m.r_lat,
                m.r_mem,
                m.l_base,
                opd.k,
                opd.l_opd
            ));
        }
    }
    out
}

pub const FRONT_CSV_HEADER: &str =
    "config_id,genome,latency_ms,memory_bytes,val_loss,feasible,rank";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerDetail {
    pub keep: bool,
    pub mlp_ratio: u32,
    pub head_ratio: f64,
    pub weight_bits: u8,
    pub act_bits: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrontMember {
    pub config_id: usize,
    pub genome: Genome,
    pub layers: Vec<LayerDetail>,
    pub val_loss: f64,
    pub latency_ms: f64,
    pub memory_bytes: u64,
    pub param_count: u64,
    pub feasible: bool,
    pub violation: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrontReport {
    pub device_id: String,
    pub feasible: bool,
    pub members: Vec<FrontMember>,
}

fn layer_details(space: &SearchSpace, genome: &Genome) -> Vec<LayerDetail> {
    let config: SubnetConfig = space.decode(genome).expect("front genomes decode");
    layers_of(&config)
}

pub fn layers_of(config: &SubnetConfig) -> Vec<LayerDetail> {
    config
        .layers
        .iter()
        .map(|l| LayerDetail {
            keep: l.keep,
            mlp_ratio: l.mlp_ratio,
            head_ratio: l.head_ratio,
            weight_bits: l.weight_bits,
            act_bits: l.act_bits,
        })
        .collect()
}

pub fn front_report(device_id: &str, front: &ParetoFront, space: &SearchSpace) -> FrontReport {
    FrontReport {
        device_id: device_id.to_string(),
        feasible: front.feasible,
        members: front
            .members
            .iter()
            .enumerate()
            .map(|(i, m)| front_member(i, m, space))
            .collect(),
    }
}

fn front_member(config_id: usize, m: &Individual, space: &SearchSpace) -> FrontMember {
    FrontMember {
        config_id,
        genome: m.genome.clone(),
        layers: layer_details(space, &m.genome),
        val_loss: m.val_loss,
        latency_ms: m.latency_ms,
        memory_bytes: m.memory_bytes,
        param_count: m.param_count,
        feasible: m.feasible,
        violation: m.violation,
        rank: m.rank,
    }
}

pub fn front_csv(report: &FrontReport) -> String {
    let mut out = String::from(FRONT_CSV_HEADER);
    out.push('\n');
    for m in &report.members {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.config_id,
            genome_string(&m.genome),
            m.latency_ms,
            m.memory_bytes,
            m.val_loss,
            m.feasible,
            m.rank
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DeploymentReport {
    pub device_id: String,
    pub genome: Genome,
    pub layers: Vec<LayerDetail>,
    pub active_layers: usize,
    pub four_bit_weight_layers: usize,
    pub param_count: u64,
    pub val_loss: f64,
    pub latency_ms: f64,
    pub budget_latency_ms: f64,
    pub latency_headroom_ms: f64,
    pub memory_bytes: u64,
    pub budget_memory_bytes: u64,
    pub memory_headroom_bytes: i64,
    pub feasible: bool,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReportOut {
    pub subnet: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_episode_len: f64,
}
