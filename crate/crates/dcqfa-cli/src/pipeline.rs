//! Stage orchestration shared by the CLI commands and the acceptance suite:
//! demo generation, synthetic profiles, training, distillation, search,
//! evaluation, export.

use std::fmt;
use std::path::{Path, PathBuf};

use dcqfa_core::configspace::Genome;
use dcqfa_core::costmodel::{
    estimate_latency, estimate_memory, is_feasible, orin_nx_paper_profile, synthetic_profile,
    DeviceProfile, SyntheticDevice, ORIN_NX_DEVICE_ID,
};
use dcqfa_core::env::{generate_demos, PushBox, Trajectory};
use dcqfa_core::opd::distill_step;
use dcqfa_core::search::{run_search, select_deployment, FitnessContext};
use dcqfa_core::supernet::Supernet;
use dcqfa_core::trainer::{
    evaluate, split_trajectories, train_step, DemoDataset, EvalReport, TrainState,
};
use dcqfa_core::Rng;
use rand::SeedableRng;

use crate::formats::{self, Checkpoint};
use crate::profiles;
use crate::reports::{self, DeploymentReport, FrontReport};
use crate::runconfig::RunConfig;

/// User errors exit with code 1, internal errors with code 2.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) => write!(f, "user: {m}"),
            CliError::Internal(m) => write!(f, "internal: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type Result<T> = std::result::Result<T, CliError>;

fn user<E: fmt::Display>(e: E) -> CliError {
    CliError::User(e.to_string())
}

fn internal<E: fmt::Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| user(format!("creating {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| user(format!("writing {}: {e}", path.display())))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(internal)?;
    write_text(path, &(text + "\n"))
}

fn env_of(cfg: &RunConfig) -> PushBox {
    PushBox::new(cfg.env.to_params())
}

fn build_net(cfg: &RunConfig) -> Result<Supernet> {
    Supernet::new(cfg.space.to_space(), cfg.model.to_dims(), cfg.seed).map_err(user)
}

fn load_demo_file(cfg: &RunConfig) -> Result<Vec<Trajectory>> {
    let path = cfg.demos_path();
    if !path.exists() {
        return Err(CliError::User(format!(
            "demo dataset {} not found; run `gen-demos` first",
            path.display()
        )));
    }
    formats::load_demos(&path).map_err(user)
}

fn load_profiles(cfg: &RunConfig) -> Result<Vec<DeviceProfile>> {
    let space = cfg.space.to_space();
    let paths = cfg.profile_paths();
    if paths.is_empty() {
        return Err(CliError::User("no device profiles configured".into()));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        if !p.exists() {
            return Err(CliError::User(format!(
                "device profile {} not found; run `profile-synth` first",
                p.display()
            )));
        }
        out.push(profiles::load_profile(p, &space).map_err(user)?);
    }
    Ok(out)
}

fn load_stage_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.stage_checkpoint_path();
    if !path.exists() {
        return Err(CliError::User(format!(
            "checkpoint {} not found; run `train` first",
            path.display()
        )));
    }
    let ckpt = formats::load_checkpoint(&path).map_err(user)?;
    let expected = build_net(cfg)?.fingerprint();
    if ckpt.net.fingerprint() != expected {
        return Err(CliError::User(format!(
            "checkpoint {} was produced by a different space/model configuration",
            path.display()
        )));
    }
    Ok(ckpt)
}

/// Train/validation split plus the fixed validation batch used as search
/// fitness.
fn datasets(cfg: &RunConfig, trajs: &[Trajectory]) -> (DemoDataset, DemoDataset) {
    let (train, val) = split_trajectories(trajs, cfg.search.val_fraction);
    let train_ds = DemoDataset::from_trajectories(&train);
    let val_full = DemoDataset::from_trajectories(&val);
    let val_ds = val_full.fixed_subset(cfg.search.val_batch, cfg.seed ^ 0x5eed_ba7c);
    (train_ds, val_ds)
}

// ---- stages ----------------------------------------------------------------

pub struct GenDemosOut {
    pub path: PathBuf,
    pub trajectories: usize,
    pub pairs: usize,
}

pub fn gen_demos(cfg: &RunConfig) -> Result<GenDemosOut> {
    ensure_dir(&cfg.out_dir)?;
    let env = env_of(cfg);
    let trajs = generate_demos(&env, cfg.demos.count, cfg.seed).map_err(internal)?;
    let path = cfg.demos_path();
    formats::save_demos(&path, &trajs).map_err(user)?;
    let pairs = trajs.iter().map(|t| t.len()).sum();
    Ok(GenDemosOut { path, trajectories: trajs.len(), pairs })
}

pub fn profile_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_dir(&cfg.profiles_dir())?;
    let space = cfg.space.to_space();
    let dims = cfg.model.to_dims();
    let mut written = Vec::new();
    for d in &cfg.profile_synth.devices {
        let device = SyntheticDevice {
            index: d.index,
            latency_budget_frac: d.latency_budget_frac,
            memory_budget_frac: d.memory_budget_frac,
        };
        let profile = synthetic_profile(&space, &dims, &device).map_err(user)?;
        let path = cfg.profiles_dir().join(format!("synth-{}.json", d.index));
        profiles::save_profile(&path, &profile, &space).map_err(user)?;
        written.push(path);
    }
    // the measured-anchor fixture needs the full 4/8/16 menus
    if space.weight_bits == [4, 8, 16] && space.act_bits == [4, 8, 16] {
        let orin = orin_nx_paper_profile(&space, &dims).map_err(user)?;
        let path = cfg.profiles_dir().join(format!("{ORIN_NX_DEVICE_ID}.json"));
        profiles::save_profile(&path, &orin, &space).map_err(user)?;
        written.push(path);
    }
    Ok(written)
}

pub struct TrainOut {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_loss: f64,
    pub steps: usize,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOut> {
    ensure_dir(&cfg.out_dir)?;
    let trajs = load_demo_file(cfg)?;
    let (train_ds, _) = datasets(cfg, &trajs);
    let devices = load_profiles(cfg)?;
    let settings = cfg.trainer.to_settings().map_err(user)?;
    let net = build_net(cfg)?;
    let mut state = TrainState::new(net, settings, Rng::seed_from_u64(cfg.seed));
    let mut rows = Vec::with_capacity(settings.steps * 4);
    for step in 0..settings.steps {
        let metrics = train_step(&mut state, &train_ds, &devices)
            .map_err(|e| internal(format!("train step {step}: {e}")))?;
        rows.extend(metrics);
    }
    let metrics_path = cfg.train_metrics_path();
    write_text(&metrics_path, &reports::train_metrics_csv(&rows))?;
    let final_loss = rows.last().map(|m| m.l_policy).unwrap_or(f64::NAN);
    // refresh the activation scales against the final weights, observing
    // under full precision, the minimum-bits corner and random configs
    let (calib_obs, _) = train_ds.sample_batch(256.min(train_ds.len()), &mut state.rng);
    let space = state.net.space.clone();
    let mut corner = space.largest_config();
    for l in &mut corner.layers {
        l.weight_bits = space.weight_bits[0];
        l.act_bits = space.act_bits[0];
    }
    let mut calib_configs = vec![space.largest_config(), corner, space.smallest_config()];
    for _ in 0..3 {
        calib_configs.push(space.sample_uniform(&mut state.rng));
    }
    state.net.quant_bank_mut().reset();
    // full-precision pass first so every spec is initialized before the
    // quantized passes need scales
    state
        .net
        .calibrate_under(&calib_obs, &calib_configs)
        .map_err(|e| internal(format!("recalibration: {e}")))?;
    state.net.freeze_activation_quantizers();
    let ckpt = checkpoint_from_state(state);
    let path = cfg.checkpoint_path();
    formats::save_checkpoint(&path, &ckpt).map_err(user)?;
    Ok(TrainOut { checkpoint: path, metrics: metrics_path, final_loss, steps: settings.steps })
}

fn checkpoint_from_state(state: TrainState) -> Checkpoint {
    let rng_state = Some((state.rng.get_seed(), state.rng.get_word_pos()));
    Checkpoint {
        net: state.net,
        optimizer: Some(state.adam),
        rng_state,
        subnet_genome: None,
    }
}

pub struct DistillOut {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: usize,
    pub final_opd_loss: f64,
}

pub fn distill(cfg: &RunConfig) -> Result<DistillOut> {
    let source = cfg.checkpoint_path();
    if !source.exists() {
        return Err(CliError::User(format!(
            "checkpoint {} not found; run `train` first",
            source.display()
        )));
    }
    let ckpt = formats::load_checkpoint(&source).map_err(user)?;
    let expected = build_net(cfg)?.fingerprint();
    if ckpt.net.fingerprint() != expected {
        return Err(CliError::User("checkpoint does not match this configuration".into()));
    }
    let trajs = load_demo_file(cfg)?;
    let (train_ds, _) = datasets(cfg, &trajs);
    let devices = load_profiles(cfg)?;
    let env = env_of(cfg);
    let settings = cfg.trainer.to_settings().map_err(user)?;
    let opd = cfg.opd.to_settings().map_err(user)?;

    let mut rng = match ckpt.rng_state {
        Some((seed, word_pos)) => {
            let mut r = Rng::from_seed(seed);
            r.set_word_pos(word_pos);
            r
        }
        None => Rng::seed_from_u64(cfg.seed),
    };
    // keep the distillation stream independent of how stage I ended
    let _ = &mut rng;
    let mut state = TrainState::new(ckpt.net, settings, rng);
    if let Some(adam) = ckpt.optimizer {
        state.adam = adam;
    }
    let steps = cfg.opd.steps;
    let student_rule = cfg.opd.student_rule().map_err(user)?;
    let mut rows = Vec::with_capacity(steps);
    let mut final_opd_loss = f64::NAN;
    for i in 0..steps {
        let progress = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 1.0 };
        let (metrics, opd_metrics) = distill_step(
            &mut state,
            &train_ds,
            &devices,
            &env,
            &opd,
            &student_rule,
            progress,
        )
        .map_err(|e| internal(format!("distill step {i}: {e}")))?;
        final_opd_loss = opd_metrics.l_opd;
        rows.push((metrics, opd_metrics));
    }
    let metrics_path = cfg.distill_metrics_path();
    write_text(&metrics_path, &reports::distill_metrics_csv(&rows))?;
    let out = cfg.distilled_path();
    formats::save_checkpoint(&out, &checkpoint_from_state(state)).map_err(user)?;
    Ok(DistillOut { checkpoint: out, metrics: metrics_path, steps, final_opd_loss })
}

pub struct SearchOut {
    pub device_id: String,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub feasible: bool,
    pub members: usize,
}

pub fn search_all(cfg: &RunConfig) -> Result<Vec<SearchOut>> {
    let ckpt = load_stage_checkpoint(cfg)?;
    let trajs = load_demo_file(cfg)?;
    let (_, val_ds) = datasets(cfg, &trajs);
    if val_ds.is_empty() {
        return Err(CliError::User(
            "validation set is empty; raise search.val_fraction or demos.count".into(),
        ));
    }
    let devices = load_profiles(cfg)?;
    let params = cfg.search.to_params().map_err(user)?;
    let space = cfg.space.to_space();
    let mut outs = Vec::new();
    for device in &devices {
        let ctx = FitnessContext {
            net: &ckpt.net,
            profile: device,
            val_obs: &val_ds.observations,
            val_actions: &val_ds.actions,
        };
        let outcome = run_search(&ctx, &params, cfg.seed).map_err(internal)?;
        let dir = cfg.search_dir().join(&device.device_id);
        ensure_dir(&dir)?;
        let report = reports::front_report(&device.device_id, &outcome.front, &space);
        let json_path = dir.join("front.json");
        write_json(&json_path, &report)?;
        let csv_path = dir.join("front.csv");
        write_text(&csv_path, &reports::front_csv(&report))?;
        outs.push(SearchOut {
            device_id: device.device_id.clone(),
            csv_path,
            json_path,
            feasible: outcome.front.feasible,
            members: outcome.front.members.len(),
        });
    }
    Ok(outs)
}

/// Which subnet an `eval` invocation runs.
#[derive(Debug, Clone)]
pub enum SubnetSelector {
    Largest,
    Smallest,
    Genome(Genome),
    /// front.json member by config_id for a device.
    FromFront { device_id: String, config_id: usize },
    /// A standalone exported-subnet checkpoint.
    Exported(PathBuf),
}

pub struct EvalOut {
    pub label: String,
    pub report: EvalReport,
}

pub fn eval_subnet(cfg: &RunConfig, selector: &SubnetSelector) -> Result<EvalOut> {
    let env = env_of(cfg);
    let (net, config, label) = match selector {
        SubnetSelector::Exported(path) => {
            if !path.exists() {
                return Err(CliError::User(format!("{} not found", path.display())));
            }
            let ckpt = formats::load_checkpoint(path).map_err(user)?;
            let genome = ckpt
                .subnet_genome
                .clone()
                .ok_or_else(|| CliError::User("checkpoint is not an exported subnet".into()))?;
            let config = ckpt.net.space.decode(&genome).map_err(user)?;
            (ckpt.net, config, format!("exported:{}", path.display()))
        }
        _ => {
            let ckpt = load_stage_checkpoint(cfg)?;
            let space = ckpt.net.space.clone();
            let (config, label) = match selector {
                SubnetSelector::Largest => (space.largest_config(), "largest".to_string()),
                SubnetSelector::Smallest => (space.smallest_config(), "smallest".to_string()),
                SubnetSelector::Genome(g) => {
                    let config = space.decode(g).map_err(user)?;
                    (config, format!("genome:{}", reports::genome_string(g)))
                }
                SubnetSelector::FromFront { device_id, config_id } => {
                    let path = cfg.search_dir().join(device_id).join("front.json");
                    if !path.exists() {
                        return Err(CliError::User(format!(
                            "{} not found; run `search` first",
                            path.display()
                        )));
                    }
                    let report: FrontReport = serde_json::from_str(
                        &std::fs::read_to_string(&path).map_err(user)?,
                    )
                    .map_err(user)?;
                    let member = report
                        .members
                        .iter()
                        .find(|m| m.config_id == *config_id)
                        .ok_or_else(|| {
                            CliError::User(format!("config_id {config_id} not in {}", path.display()))
                        })?;
                    let config = space.decode(&member.genome).map_err(user)?;
                    (config, format!("{device_id}:{config_id}"))
                }
                SubnetSelector::Exported(_) => unreachable!("handled above"),
            };
            (ckpt.net, config, label)
        }
    };
    let report = evaluate(&net, &config, &env, cfg.eval.episodes, cfg.eval.seed_base)
        .map_err(|e| user(format!("evaluation failed: {e}")))?;
    Ok(EvalOut { label, report })
}

pub struct ExportOut {
    pub device_id: String,
    pub checkpoint: PathBuf,
    pub report_path: PathBuf,
    pub report: DeploymentReport,
}

pub fn export_all(cfg: &RunConfig) -> Result<Vec<ExportOut>> {
    let ckpt = load_stage_checkpoint(cfg)?;
    let devices = load_profiles(cfg)?;
    let trajs = load_demo_file(cfg)?;
    let (_, val_ds) = datasets(cfg, &trajs);
    let rule = cfg.search.selection_rule().map_err(user)?;
    let space = cfg.space.to_space();
    let mut outs = Vec::new();
    for device in &devices {
        let front_path = cfg.search_dir().join(&device.device_id).join("front.json");
        if !front_path.exists() {
            return Err(CliError::User(format!(
                "{} not found; run `search` first",
                front_path.display()
            )));
        }
        let report: FrontReport =
            serde_json::from_str(&std::fs::read_to_string(&front_path).map_err(user)?)
                .map_err(user)?;
        if !report.feasible {
            return Err(CliError::User(format!(
                "no feasible subnet for device {}; cannot export",
                device.device_id
            )));
        }
        // rebuild the core front from the report to reuse the selection rule
        let front = dcqfa_core::search::ParetoFront {
            feasible: report.feasible,
            members: report
                .members
                .iter()
                .map(|m| dcqfa_core::search::Individual {
                    genome: m.genome.clone(),
                    val_loss: m.val_loss,
                    latency_ms: m.latency_ms,
                    param_count: m.param_count,
                    memory_bytes: m.memory_bytes,
                    feasible: m.feasible,
                    violation: m.violation,
                    rank: m.rank,
                    crowding: 0.0,
                })
                .collect(),
        };
        let config = select_deployment(&front, rule, &space).map_err(user)?;
        let (subnet, compact) = ckpt.net.extract(&config).map_err(internal)?;
        let genome = subnet.space.encode(&compact).map_err(internal)?;
        let dir = cfg.export_dir().join(&device.device_id);
        ensure_dir(&dir)?;
        let subnet_path = dir.join("subnet.dcqf");
        formats::save_checkpoint(
            &subnet_path,
            &Checkpoint {
                net: subnet,
                optimizer: None,
                rng_state: None,
                subnet_genome: Some(genome.clone()),
            },
        )
        .map_err(user)?;

        let latency_ms = estimate_latency(device, &space, &config);
        let mem = estimate_memory(device, &space, &config, &ckpt.net.dims);
        let feas = is_feasible(device, &space, &config, &ckpt.net.dims);
        let val_loss = if val_ds.is_empty() {
            f64::NAN
        } else {
            let pred = ckpt
                .net
                .forward_infer(&config, &val_ds.observations)
                .map_err(internal)?;
            dcqfa_core::trainer::bc_mse(&pred, &val_ds.actions)
        };
        let deployment = DeploymentReport {
            device_id: device.device_id.clone(),
            genome: space.encode(&config).map_err(internal)?,
            layers: reports::layers_of(&config),
            active_layers: config.active_layers(),
            four_bit_weight_layers: config.four_bit_weight_layers(),
            param_count: ckpt.net.subnet_param_count(&config),
            val_loss,
            latency_ms,
            budget_latency_ms: device.budget_latency_ms,
            latency_headroom_ms: device.budget_latency_ms - latency_ms,
            memory_bytes: mem.total_bytes,
            budget_memory_bytes: device.budget_memory_bytes,
            memory_headroom_bytes: device.budget_memory_bytes as i64 - mem.total_bytes as i64,
            feasible: feas.feasible,
            checkpoint: subnet_path.display().to_string(),
        };
        let report_path = dir.join("report.json");
        write_json(&report_path, &deployment)?;
        outs.push(ExportOut {
            device_id: device.device_id.clone(),
            checkpoint: subnet_path,
            report_path,
            report: deployment,
        });
    }
    Ok(outs)
}

/// Re-emit front CSVs from the JSON mirrors.
pub fn pareto_csv(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.search_dir();
    if !dir.exists() {
        return Err(CliError::User(format!(
            "{} not found; run `search` first",
            dir.display()
        )));
    }
    let mut written = Vec::new();
    let mut device_dirs: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(user)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    device_dirs.sort();
    for ddir in device_dirs {
        let json_path = ddir.join("front.json");
        if !json_path.exists() {
            continue;
        }
        let report: FrontReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).map_err(user)?)
                .map_err(user)?;
        let csv_path = ddir.join("front.csv");
        write_text(&csv_path, &reports::front_csv(&report))?;
        written.push(csv_path);
    }
    if written.is_empty() {
        return Err(CliError::User("no front.json files found".into()));
    }
    Ok(written)
}
