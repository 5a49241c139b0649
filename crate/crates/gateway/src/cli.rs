use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use obfusgate_core::reusable::EntityStore;
use obfusgate_core::text::TextUnit;
use serde::Serialize;
use serde_json::Value;

use crate::config::{ConfigError, GatewayConfig};
use crate::services::{
    AttackMode, AttackRequest, InferRequest, JobError, LabeledSample, ObfuscateEntitiesRequest,
    ObfuscateTextRequest, OptimizeRequest, SearchMethod, Services,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "obfusgate", version, about = "Obfuscate private text before it reaches a cloud LLM")]
pub struct Cli {
    /// Configuration file (.toml or .json)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write the result JSON here instead of stdout
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Baseline {
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Method {
    Ape,
    Opro,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Obfuscate an entity set and commit it as a new store version
    ObfuscateEntities {
        /// JSON lines with `id` and `text`, or plain text lines
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        epsilon_ldp: Option<f64>,
        #[arg(long)]
        epsilon_sem: Option<f64>,
        #[arg(long)]
        store_root: Option<PathBuf>,
    },
    /// Obfuscate a free-text document clause by clause
    ObfuscateText {
        #[arg(long = "in", conflicts_with = "text", required_unless_present = "text")]
        input: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
    },
    /// Run one inference call over a user's obfuscated history
    Infer {
        #[arg(long)]
        task: String,
        #[arg(long)]
        user: String,
        /// Comma-separated entity ids in interaction order
        #[arg(long, value_delimiter = ',')]
        history: Vec<String>,
        #[arg(long)]
        version: Option<u32>,
        #[arg(long)]
        store_root: Option<PathBuf>,
    },
    /// Recovery attack or random-entities baseline against a store
    Attack {
        /// An entities.jsonl file
        #[arg(long, conflicts_with = "task", required_unless_present = "task")]
        store: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        baseline: Option<Baseline>,
        /// Random entities per original for the baseline
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        store_root: Option<PathBuf>,
    },
    /// Search for a better obfuscation instruction
    Optimize {
        #[arg(long, value_enum)]
        method: Method,
        /// JSON lines with `text` and `label`
        #[arg(long)]
        validation: PathBuf,
        /// Starting instruction (repeatable)
        #[arg(long)]
        initial: Vec<String>,
    },
    /// Run the HTTP service
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        store_root: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(cli: &Cli) -> Result<GatewayConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => GatewayConfig::load(path)?,
        None => GatewayConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| JobError::Core(e.into()))?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input { path: path.into(), message: e.to_string() })
}

/// Entities from JSON lines (`{"id": .., "text": ..}`) or plain lines,
/// which are numbered from 1.
pub fn read_entities(path: &Path) -> Result<Vec<TextUnit>, CliError> {
    let raw = read(path)?;
    let mut units = Vec::new();
    for (n, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let unit = if line.trim_start().starts_with('{') {
            serde_json::from_str::<TextUnit>(line)
                .map_err(|e| CliError::Input { path: path.into(), message: format!("line {}: {e}", n + 1) })?
        } else {
            TextUnit::new((units.len() + 1).to_string(), line.trim())
        };
        units.push(unit);
    }
    Ok(units)
}

fn read_samples(path: &Path) -> Result<Vec<LabeledSample>, CliError> {
    let raw = read(path)?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Input { path: path.into(), message: format!("line {}: {e}", n + 1) })
        })
        .collect()
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::ObfuscateEntities { input, task, rho, epsilon_ldp, epsilon_sem, store_root } => {
            if let Some(v) = rho {
                cfg.pipeline.adjacency.rho = *v;
            }
            if let Some(v) = epsilon_ldp {
                cfg.pipeline.epsilon_ldp = *v;
            }
            if let Some(v) = epsilon_sem {
                cfg.pipeline.obfuscation.epsilon_sem = *v;
            }
            if let Some(root) = store_root {
                cfg.store_root = root.clone();
            }
            let entities = read_entities(input)?;
            let services = Services::new(cfg)?;
            let result = services.obfuscate_entities(&ObfuscateEntitiesRequest { task_id: task.clone(), entities })?;
            emit(out, &result)
        }
        Command::ObfuscateText { input, text } => {
            let text = match (input, text) {
                (Some(path), _) => read(path)?,
                (None, Some(t)) => t.clone(),
                (None, None) => unreachable!("clap requires one of --in and --text"),
            };
            let services = Services::new(cfg)?;
            emit(out, &services.obfuscate_text(&ObfuscateTextRequest { text, shuffle_seed: None })?)
        }
        Command::Infer { task, user, history, version, store_root } => {
            if let Some(root) = store_root {
                cfg.store_root = root.clone();
            }
            let services = Services::new(cfg)?;
            let req = InferRequest { task_id: task.clone(), version: *version, user_id: user.clone(), history: history.clone() };
            emit(out, &services.infer(&req)?)
        }
        Command::Attack { store, task, baseline, n, store_root } => {
            if let Some(root) = store_root {
                cfg.store_root = root.clone();
            }
            let entries = match store {
                Some(path) => {
                    let store = EntityStore::from_jsonl("inline", &read(path)?)
                        .map_err(|e| CliError::Input { path: path.clone(), message: e.to_string() })?;
                    Some(store.entries.into_values().collect())
                }
                None => None,
            };
            let req = AttackRequest {
                mode: if baseline.is_some() { AttackMode::RandomBaseline } else { AttackMode::Recovery },
                task_id: task.clone(),
                version: None,
                entries,
                n_samples: *n,
            };
            let services = Services::new(cfg)?;
            emit(out, &services.attack(&req)?)
        }
        Command::Optimize { method, validation, initial } => {
            let validation = read_samples(validation)?;
            let method = match method {
                Method::Ape => SearchMethod::Ape,
                Method::Opro => SearchMethod::Opro,
            };
            let services = Services::new(cfg)?;
            let result = services.optimize(&OptimizeRequest { method, validation, initial: initial.clone() })?;
            emit(out, &result)
        }
        Command::Serve { bind, store_root } => {
            if let Some(b) = bind {
                cfg.bind = b.clone();
            }
            if let Some(root) = store_root {
                cfg.store_root = root.clone();
            }
            let services = Arc::new(Services::new(cfg)?);
            let addr = services.config().bind.parse().expect("validated bind address");
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crate::server::serve(services, addr))?;
            Ok(())
        }
    }
}

/// Parsed `--out` document, for callers that want the value.
pub fn read_output(path: &Path) -> Result<Value, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::Input { path: path.into(), message: e.to_string() })
}
