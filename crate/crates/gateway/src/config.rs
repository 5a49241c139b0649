use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use obfusgate_core::attack::{DEFAULT_BASELINE_SAMPLES, EMOJI_METHOD_HINT};
use obfusgate_core::metrics::TaskKind;
use obfusgate_core::nonreusable::TextPipelineConfig;
use obfusgate_core::optimizer::{ApeConfig, OproConfig, DEFAULT_APE_META_PROMPT};
use obfusgate_core::providers::{MockMode, ProviderConfig, ProviderKind};
use obfusgate_core::reusable::PipelineConfig;
use obfusgate_core::scorer::{ScorerKind, DEFAULT_EMBEDDING_DIM};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub obfuscator: ProviderConfig,
    pub inference: ProviderConfig,
    pub attacker: ProviderConfig,
    pub embedder: ProviderConfig,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            obfuscator: ProviderConfig::mock(0, MockMode::Codebook),
            inference: ProviderConfig { mock_constant: "unknown".into(), ..ProviderConfig::mock(0, MockMode::Constant) },
            attacker: ProviderConfig::mock(0, MockMode::Inverse),
            embedder: ProviderConfig::mock(0, MockMode::Codebook),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub instruction: String,
    pub task: TaskKind,
    pub output_set: Vec<String>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            instruction: "Each line below describes an item the user interacted with, in order. \
                          Predict the user's preference."
                .into(),
            task: TaskKind::Open,
            output_set: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub method_hint: String,
    pub task_context: String,
    pub n_samples: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method_hint: EMOJI_METHOD_HINT.into(),
            task_context: String::new(),
            n_samples: DEFAULT_BASELINE_SAMPLES,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub meta_prompt: String,
    pub ape: ApeConfig,
    pub opro: OproConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { meta_prompt: DEFAULT_APE_META_PROMPT.into(), ape: ApeConfig::default(), opro: OproConfig::default() }
    }
}

/// Everything a job depends on. The hash of this document pins a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub store_root: PathBuf,
    pub bind: String,
    pub pipeline: PipelineConfig,
    pub text: TextPipelineConfig,
    pub scorer: ScorerKind,
    pub providers: ProvidersConfig,
    pub inference: InferenceConfig,
    pub attack: AttackConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            store_root: PathBuf::from("store"),
            bind: "127.0.0.1:8080".into(),
            pipeline: PipelineConfig::default(),
            text: TextPipelineConfig::default(),
            scorer: ScorerKind::default(),
            providers: ProvidersConfig::default(),
            inference: InferenceConfig::default(),
            attack: AttackConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl GatewayConfig {
    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let parsed = if is_toml {
            toml::from_str(&raw).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&raw).map_err(|e| e.to_string())
        };
        parsed.map_err(|message| ConfigError::Parse { path: path.into(), message })
    }

    /// Sets every seed in the document.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.pipeline.seed = seed;
        self.pipeline.obfuscation.seed = seed;
        self.text.obfuscation.seed = seed;
        self.text.shuffle_seed = seed;
        self.attack.seed = seed;
        self.optimizer.ape.seed = seed;
        self.optimizer.opro.seed = seed;
        self
    }

    /// All problems found, not only the first.
    pub fn validate(&self) -> Vec<String> {
        let mut problems: Vec<String> = Vec::new();
        problems.extend(self.pipeline.validate().into_iter().map(|p| format!("pipeline: {p}")));
        problems.extend(self.text.obfuscation.validate().into_iter().map(|p| format!("text.obfuscation: {p}")));
        if self.text.segmenter.min_clause_tokens == 0 {
            problems.push("text.segmenter: min_clause_tokens must be at least 1".into());
        }
        if self.bind.parse::<SocketAddr>().is_err() {
            problems.push(format!("bind: {:?} is not a socket address", self.bind));
        }
        if let ScorerKind::EmbeddingCosine { dimension: 0 } = self.scorer {
            problems.push("scorer: dimension must be positive".into());
        }

        let p = &self.providers;
        for (role, cfg) in [("providers.obfuscator", &p.obfuscator), ("providers.inference", &p.inference), ("providers.attacker", &p.attacker)] {
            problems.extend(cfg.validate(role));
            if cfg.kind == ProviderKind::HttpEmbed {
                problems.push(format!("{role}: needs a chat provider, got http-embed"));
            }
        }
        problems.extend(p.embedder.validate("providers.embedder"));
        if p.embedder.kind == ProviderKind::HttpChat {
            problems.push("providers.embedder: needs an embedding provider, got http-chat".into());
        }

        if self.inference.instruction.trim().is_empty() {
            problems.push("inference: instruction must not be empty".into());
        }
        match self.inference.task {
            TaskKind::Ranking { k: 0 } => problems.push("inference: ranking k must be at least 1".into()),
            TaskKind::Closed if self.inference.output_set.is_empty() => {
                problems.push("inference: closed tasks need a non-empty output_set".into())
            }
            _ => {}
        }

        if self.attack.n_samples == 0 {
            problems.push("attack: n_samples must be at least 1".into());
        }
        if self.attack.embedding_dim == 0 {
            problems.push("attack: embedding_dim must be positive".into());
        }

        let o = &self.optimizer;
        if o.meta_prompt.trim().is_empty() {
            problems.push("optimizer: meta_prompt must not be empty".into());
        }
        if o.ape.iterations == 0 || o.ape.candidates_per_iteration == 0 || o.ape.checkpoint == 0 {
            problems.push("optimizer.ape: iterations, candidates_per_iteration and checkpoint must be positive".into());
        }
        if o.opro.seed_prompts == 0 || o.opro.checkpoint == 0 {
            problems.push("optimizer.opro: seed_prompts and checkpoint must be positive".into());
        }
        problems
    }

    pub fn validated(self) -> Result<Self, ConfigError> {
        let problems = self.validate();
        if problems.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// SHA-256 of the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}
