//! `dcqfa`: train one mixed-precision weight-sharing policy supernet, then
//! specialize it per device via constrained NSGA-II search and export the
//! chosen subnet.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dcqfa_cli::pipeline::{self, CliError, SubnetSelector};
use dcqfa_cli::reports;
use dcqfa_cli::runconfig::RunConfig;

#[derive(Parser)]
#[command(
    name = "dcqfa",
    about = "Device-conditioned quantization-for-all policy pipeline",
    version
)]
struct Cli {
    /// Run-configuration JSON file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Device-profile JSON path (repeatable); overrides the config list.
    #[arg(long = "device-profile", global = true)]
    device_profiles: Vec<PathBuf>,
    /// Dotted-path config override, e.g. --set trainer.steps=100.
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the expert demonstration dataset.
    GenDemos,
    /// Write synthetic device lookup tables plus the measured-anchor fixture.
    ProfileSynth,
    /// Stage I: quantization-aware supernet training.
    Train,
    /// Continue training with multi-step on-policy distillation.
    Distill,
    /// Stage II: per-device constrained NSGA-II subnet search.
    Search,
    /// Closed-loop evaluation of one subnet.
    Eval {
        /// "largest", "smallest", or a dash-separated genome.
        #[arg(long, conflicts_with_all = ["front_device", "exported"])]
        subnet: Option<String>,
        /// Evaluate a front member: device id (with --id).
        #[arg(long, requires = "config_id")]
        front_device: Option<String>,
        /// Front member config_id.
        #[arg(long = "id")]
        config_id: Option<usize>,
        /// Evaluate an exported subnet checkpoint.
        #[arg(long)]
        exported: Option<PathBuf>,
    },
    /// Stage III: extract and save the selected subnet per device, with a
    /// deployment report.
    Export,
    /// Re-emit front CSVs from their JSON mirrors.
    ParetoCsv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // single-line machine-parsable diagnostics
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            match e {
                CliError::User(_) => ExitCode::from(1),
                CliError::Internal(_) => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.sets)
        .map_err(|e| CliError::User(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if !cli.device_profiles.is_empty() {
        cfg.device_profiles = cli.device_profiles.clone();
    }

    match cli.command {
        Command::GenDemos => {
            let out = pipeline::gen_demos(&cfg)?;
            println!(
                "wrote {} ({} trajectories, {} pairs)",
                out.path.display(),
                out.trajectories,
                out.pairs
            );
        }
        Command::ProfileSynth => {
            for path in pipeline::profile_synth(&cfg)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train => {
            let out = pipeline::train(&cfg)?;
            println!(
                "trained {} steps, final policy loss {:.6}",
                out.steps, out.final_loss
            );
            println!("wrote {}", out.checkpoint.display());
            println!("wrote {}", out.metrics.display());
        }
        Command::Distill => {
            let out = pipeline::distill(&cfg)?;
            println!(
                "distilled {} steps, final distillation loss {:.6}",
                out.steps, out.final_opd_loss
            );
            println!("wrote {}", out.checkpoint.display());
            println!("wrote {}", out.metrics.display());
        }
        Command::Search => {
            for out in pipeline::search_all(&cfg)? {
                println!(
                    "{}: {} front members (feasible: {})",
                    out.device_id, out.members, out.feasible
                );
                println!("wrote {}", out.csv_path.display());
                println!("wrote {}", out.json_path.display());
            }
        }
        Command::Eval { subnet, front_device, config_id, exported } => {
            let selector = match (subnet, front_device, exported) {
                (Some(s), None, None) => match s.as_str() {
                    "largest" => SubnetSelector::Largest,
                    "smallest" => SubnetSelector::Smallest,
                    other => SubnetSelector::Genome(reports::parse_genome(other).ok_or_else(
                        || CliError::User(format!("bad genome string {other:?}")),
                    )?),
                },
                (None, Some(device_id), None) => SubnetSelector::FromFront {
                    device_id,
                    config_id: config_id
                        .ok_or_else(|| CliError::User("--front-device needs --id".into()))?,
                },
                (None, None, Some(path)) => SubnetSelector::Exported(path),
                _ => {
                    return Err(CliError::User(
                        "pass exactly one of --subnet, --front-device, --exported".into(),
                    ))
                }
            };
            let out = pipeline::eval_subnet(&cfg, &selector)?;
            let report = reports::EvalReportOut {
                subnet: out.label,
                episodes: out.report.episodes,
                successes: out.report.successes,
                success_rate: out.report.success_rate,
                mean_episode_len: out.report.mean_episode_len,
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&report)
                    .map_err(|e| CliError::Internal(e.to_string()))?
            );
        }
        Command::Export => {
            for out in pipeline::export_all(&cfg)? {
                println!(
                    "{}: latency {:.3}/{:.3} ms, memory {}/{} bytes, feasible: {}",
                    out.device_id,
                    out.report.latency_ms,
                    out.report.budget_latency_ms,
                    out.report.memory_bytes,
                    out.report.budget_memory_bytes,
                    out.report.feasible
                );
                println!("wrote {}", out.checkpoint.display());
                println!("wrote {}", out.report_path.display());
            }
        }
        Command::ParetoCsv => {
            for path in pipeline::pareto_csv(&cfg)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}
