mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use catrace_core::{Bucket, Component};
use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig};
use stages::{StageOutcome, TraceOptions};

#[derive(Parser)]
#[command(name = "catrace", version, about = "Category-level causal tracing pipeline")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check fact files and manifests.
    Validate {
        /// Fact files to check instead of those in the config.
        #[arg(long)]
        facts: Vec<PathBuf>,
        /// Manifests to check instead of those in the config.
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
    /// Generate facts with a chat-completion endpoint.
    Generate {
        /// Serve responses from an archive directory instead of the network.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        max_batches: Option<usize>,
    },
    /// Trace every subcategory and write per-layer aggregates.
    Trace {
        /// Comma-separated buckets, e.g. last_subject,last_token.
        #[arg(long, value_delimiter = ',')]
        positions: Option<Vec<Bucket>>,
        /// Comma-separated components: residual, mlp, attn.
        #[arg(long, value_delimiter = ',')]
        components: Option<Vec<Component>>,
        /// Trace at most this many facts per subcategory.
        #[arg(long)]
        limit: Option<usize>,
        /// Also write per-fact effect grids.
        #[arg(long)]
        raw: bool,
    },
    /// Combine trace outputs into tables.
    Aggregate,
    /// Correlate layer-importance vectors across subcategories.
    Correlate,
    /// Render figures.
    Report,
    /// Run trace, aggregate, correlate and report in order.
    Run {
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Err(config::config_err("--config is required for this command")),
    }
}

fn execute(cli: &Cli) -> Result<Vec<StageOutcome>> {
    let mut outcomes = Vec::new();
    let cfg = match &cli.command {
        Command::Validate { facts, manifests } => {
            let mut cfg = match &cli.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::empty(PathBuf::from(".")),
            };
            let write = cli.config.is_some();
            if !facts.is_empty() {
                cfg.facts = facts.clone();
            }
            if !manifests.is_empty() {
                cfg.manifests = manifests.clone();
            }
            if cfg.facts.is_empty() {
                return Err(config::config_err("no fact files given"));
            }
            let (outcome, report) = stages::validate(&cfg, write)?;
            if !write {
                print!("{report}");
            }
            outcomes.push(outcome);
            if !write {
                return Ok(outcomes);
            }
            cfg
        }
        Command::Generate { replay, max_batches } => {
            let mut cfg = load_config(cli.config.as_ref())?;
            if let (Some(g), Some(n)) = (cfg.generation.as_mut(), max_batches) {
                g.max_batches = *n;
            }
            outcomes.push(stages::generate(&cfg, replay.as_deref())?);
            cfg
        }
        Command::Trace {
            positions,
            components,
            limit,
            raw,
        } => {
            let cfg = load_config(cli.config.as_ref())?;
            let opts = TraceOptions {
                positions: positions.clone(),
                components: components.clone(),
                limit: *limit,
                raw: *raw,
            };
            outcomes.push(stages::trace(&cfg, &opts)?);
            cfg
        }
        Command::Aggregate => {
            let cfg = load_config(cli.config.as_ref())?;
            outcomes.push(stages::aggregate(&cfg)?);
            cfg
        }
        Command::Correlate => {
            let cfg = load_config(cli.config.as_ref())?;
            outcomes.push(stages::correlate(&cfg)?);
            cfg
        }
        Command::Report => {
            let cfg = load_config(cli.config.as_ref())?;
            outcomes.push(stages::report(&cfg)?);
            cfg
        }
        Command::Run { limit } => {
            let cfg = load_config(cli.config.as_ref())?;
            let opts = TraceOptions {
                limit: *limit,
                ..Default::default()
            };
            outcomes.push(stages::trace(&cfg, &opts)?);
            outcomes.push(stages::aggregate(&cfg)?);
            outcomes.push(stages::correlate(&cfg)?);
            outcomes.push(stages::report(&cfg)?);
            cfg
        }
    };
    stages::write_manifest(&cfg)?;
    Ok(outcomes)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(outcomes) => {
            let failures: Vec<_> = outcomes.iter().filter(|o| !o.failures.is_empty()).collect();
            for o in &outcomes {
                log::info!(
                    "{}: {} artifacts, {} failures",
                    o.stage,
                    o.artifacts.len(),
                    o.failures.len()
                );
            }
            if failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                let report = serde_json::json!({ "status": "partial", "stages": failures });
                eprintln!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
                ExitCode::from(2)
            }
        }
        Err(e) => {
            let kind = if e.downcast_ref::<ConfigError>().is_some() {
                "config"
            } else {
                "runtime"
            };
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let report =
                serde_json::json!({ "status": "error", "kind": kind, "error": e.to_string(), "causes": chain });
            eprintln!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            ExitCode::FAILURE
        }
    }
}
