//! Job implementations shared by the CLI and the HTTP service.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use obfusgate_core::attack::{recover, AttackReport, RecoveryEvaluator};
use obfusgate_core::metrics::{assemble_prompt, parse_output, ParsedOutput};
use obfusgate_core::nonreusable::{obfuscate_text, ObfuscatedText};
use obfusgate_core::optimizer::{ape_search, opro_search, SearchOutcome};
use obfusgate_core::providers::{payload_hash, ChatProvider, EmbeddingProvider};
use obfusgate_core::reusable::{
    assemble_user_payload, obfuscate_entity_set, EntityStore, StoreEntry, StoreRepository,
};
use obfusgate_core::engine::generate_candidate;
use obfusgate_core::scorer::{EmbeddingCosineScorer, ScorerKind, SimilarityScorer, TokenOverlapScorer};
use obfusgate_core::text::TextUnit;
use obfusgate_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, GatewayConfig};

#[derive(Debug, thiserror::Error)]
pub enum JobError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

pub type JobResult<T> = Result<T, JobError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObfuscateEntitiesRequest {
    #[serde(default)]
    pub task_id: Option<String>,
    pub entities: Vec<TextUnit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObfuscateEntitiesResult {
    pub task_id: String,
    pub version: u32,
    pub entry_count: usize,
    pub fallback_count: usize,
    pub content_hash: String,
    pub approximate_cliques: bool,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObfuscateTextRequest {
    pub text: String,
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObfuscateTextResult {
    #[serde(flatten)]
    pub output: ObfuscatedText,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    pub task_id: String,
    #[serde(default)]
    pub version: Option<u32>,
    pub user_id: String,
    pub history: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub user_id: String,
    pub store_version: u32,
    pub prompt_hash: String,
    pub raw: String,
    pub parsed: Option<ParsedOutput>,
    pub parse_error: Option<String>,
    pub config_hash: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    /// Ask the attacker model to reconstruct every stored entity.
    #[default]
    Recovery,
    /// Score each original against random other originals.
    RandomBaseline,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackRequest {
    #[serde(default)]
    pub mode: AttackMode,
    /// Stored task to attack; ignored when `entries` is given.
    #[serde(default)]
    pub task_id: Option<String>,
    #[serde(default)]
    pub version: Option<u32>,
    #[serde(default)]
    pub entries: Option<Vec<StoreEntry>>,
    #[serde(default)]
    pub n_samples: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethod {
    Ape,
    Opro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub text: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeRequest {
    pub method: SearchMethod,
    pub validation: Vec<LabeledSample>,
    /// Starting prompts for APE; the configured instruction when empty.
    #[serde(default)]
    pub initial: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    #[serde(flatten)]
    pub outcome: SearchOutcome,
    pub config_hash: String,
}

/// Public view of a stored entity. Originals never leave the gateway.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityView {
    pub task_id: String,
    pub version: u32,
    pub id: String,
    pub obfuscation: String,
}

/// Providers and store bound to one validated configuration.
pub struct Services {
    config: GatewayConfig,
    config_hash: String,
    repo: StoreRepository,
    obfuscator: Arc<dyn ChatProvider>,
    inference: Arc<dyn ChatProvider>,
    attacker: Arc<dyn ChatProvider>,
    embedder: Arc<dyn EmbeddingProvider>,
    task_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Services {
    pub fn new(config: GatewayConfig) -> Result<Self, ConfigError> {
        let config = config.validated()?;
        let p = &config.providers;
        fn build<T>(r: Result<T, obfusgate_core::ProviderError>, role: &str) -> Result<T, ConfigError> {
            r.map_err(|e| ConfigError::Invalid(vec![format!("providers.{role}: {e}")]))
        }
        let obfuscator = build(p.obfuscator.build_chat(), "obfuscator")?;
        let inference = build(p.inference.build_chat(), "inference")?;
        let attacker = build(p.attacker.build_chat(), "attacker")?;
        let embedder = build(p.embedder.build_embedder(), "embedder")?;
        Ok(Self {
            config_hash: config.hash(),
            repo: StoreRepository::new(&config.store_root),
            config,
            obfuscator,
            inference,
            attacker,
            embedder,
            task_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn repository(&self) -> &StoreRepository {
        &self.repo
    }

    fn scorer(&self) -> Box<dyn SimilarityScorer> {
        match self.config.scorer {
            ScorerKind::EmbeddingCosine { dimension } => {
                Box::new(EmbeddingCosineScorer::new(self.embedder.clone(), dimension))
            }
            ScorerKind::TokenOverlap => Box::new(TokenOverlapScorer),
        }
    }

    fn task_lock(&self, task_id: &str) -> Arc<Mutex<()>> {
        self.task_locks.lock().unwrap().entry(task_id.to_string()).or_default().clone()
    }

    fn load_store(&self, task_id: &str, version: Option<u32>) -> JobResult<EntityStore> {
        check_task_id(task_id)?;
        let known = match version {
            Some(v) => self.repo.versions(task_id)?.contains(&v),
            None => self.repo.latest(task_id)?.is_some(),
        };
        if !known {
            return Err(JobError::NotFound(format!("no stored entities for task {task_id:?}")));
        }
        Ok(self.repo.load(task_id, version)?)
    }

    /// Obfuscates an entity set and commits it as the next store version.
    pub fn obfuscate_entities(&self, req: &ObfuscateEntitiesRequest) -> JobResult<ObfuscateEntitiesResult> {
        let mut cfg = self.config.pipeline.clone();
        if let Some(task) = &req.task_id {
            cfg.task_id = task.clone();
        }
        let problems = cfg.validate();
        if !problems.is_empty() {
            return Err(JobError::BadRequest(problems.join("; ")));
        }
        check_task_id(&cfg.task_id)?;
        let scorer = self.scorer();
        let mut store = obfuscate_entity_set(&req.entities, &cfg, &*self.obfuscator, &*scorer)?;
        let lock = self.task_lock(&cfg.task_id);
        let _guard = lock.lock().unwrap();
        let version = self.repo.commit(&mut store, Some(&self.config_hash))?;
        log::info!("committed {} entities to {} v{version}", store.len(), cfg.task_id);
        Ok(ObfuscateEntitiesResult {
            task_id: cfg.task_id,
            version,
            entry_count: store.len(),
            fallback_count: store.entries.values().filter(|e| e.fallback).count(),
            content_hash: store.content_hash()?,
            approximate_cliques: store.partition.as_ref().is_some_and(|p| p.approximate),
            config_hash: self.config_hash.clone(),
        })
    }

    pub fn obfuscate_text(&self, req: &ObfuscateTextRequest) -> JobResult<ObfuscateTextResult> {
        let mut cfg = self.config.text.clone();
        if let Some(seed) = req.shuffle_seed {
            cfg.shuffle_seed = seed;
        }
        let output = obfuscate_text(&req.text, &cfg, &*self.obfuscator)?;
        Ok(ObfuscateTextResult { output, config_hash: self.config_hash.clone() })
    }

    /// Builds the user's obfuscated payload from the store and runs one
    /// inference call. Unknown ids fail before any provider call.
    pub fn infer(&self, req: &InferRequest) -> JobResult<InferResult> {
        let store = self.load_store(&req.task_id, req.version)?;
        let payload = assemble_user_payload(&req.user_id, &req.history, &store)?;
        let inf = &self.config.inference;
        let prompt = assemble_prompt(&inf.instruction, &inf.output_set, &payload.render(), inf.task)?;
        let leaked = prompt.leaked(store.entries.values().map(|e| e.original.as_str()));
        if !leaked.is_empty() {
            return Err(JobError::BadRequest(format!("payload would reveal {} stored original(s)", leaked.len())));
        }
        let request = prompt.to_request();
        let raw = self.inference.chat(&request).map_err(Error::from)?;
        let (parsed, parse_error) = match parse_output(&raw, &prompt) {
            Ok(p) => (Some(p), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(InferResult {
            user_id: req.user_id.clone(),
            store_version: store.version,
            prompt_hash: request.payload_hash(),
            raw,
            parsed,
            parse_error,
            config_hash: self.config_hash.clone(),
        })
    }

    pub fn attack(&self, req: &AttackRequest) -> JobResult<AttackReport> {
        let (dataset_id, entries): (String, Vec<StoreEntry>) = match (&req.entries, &req.task_id) {
            (Some(entries), _) => ("inline".into(), entries.clone()),
            (None, Some(task)) => (task.clone(), self.load_store(task, req.version)?.entries.into_values().collect()),
            (None, None) => return Err(JobError::BadRequest("attack needs a task_id or inline entries".into())),
        };
        if entries.is_empty() {
            return Err(JobError::BadRequest("no entries to attack".into()));
        }
        let ac = &self.config.attack;
        let evaluator = RecoveryEvaluator::with_dim(self.embedder.clone(), ac.embedding_dim);
        let originals: Vec<&str> = entries.iter().map(|e| e.original.as_str()).collect();
        let mut report = match req.mode {
            AttackMode::Recovery => {
                let mut guesses = Vec::with_capacity(entries.len());
                for e in &entries {
                    guesses.push(recover(&*self.attacker, &e.obfuscation, &ac.method_hint, &ac.task_context)?);
                }
                evaluator.evaluate(&dataset_id, &originals, &guesses)?
            }
            AttackMode::RandomBaseline => {
                let n = req.n_samples.unwrap_or(ac.n_samples);
                evaluator.random_entities_baseline(&dataset_id, &originals, n, ac.seed)?
            }
        };
        report.config_hash = Some(self.config_hash.clone());
        Ok(report)
    }

    /// Prompt search scored by downstream task accuracy: each validation
    /// text is obfuscated with the candidate prompt, sent to the inference
    /// model, and counts 1 when the parsed answer equals its label.
    pub fn optimize(&self, req: &OptimizeRequest) -> JobResult<OptimizeResult> {
        if req.validation.is_empty() {
            return Err(JobError::BadRequest("validation set is empty".into()));
        }
        let inf = &self.config.inference;
        let base = self.config.pipeline.obfuscation.clone();
        let mut evaluator = |prompt: &str, sample: &LabeledSample| -> obfusgate_core::Result<f64> {
            let mut cfg = base.clone();
            cfg.instruction = prompt.to_string();
            let obfuscated = generate_candidate(&*self.obfuscator, &cfg, &sample.text, 0)?;
            let p = assemble_prompt(&inf.instruction, &inf.output_set, &obfuscated, inf.task)?;
            let raw = self.inference.chat(&p.to_request())?;
            let correct = match parse_output(&raw, &p) {
                Ok(ParsedOutput::Label { label }) => label.eq_ignore_ascii_case(&sample.label),
                Ok(ParsedOutput::Ranked { items, .. }) => items.first().is_some_and(|i| i == &sample.label),
                Ok(ParsedOutput::Text { text }) => text.trim().eq_ignore_ascii_case(sample.label.trim()),
                Err(_) => false,
            };
            Ok(if correct { 1.0 } else { 0.0 })
        };
        let oc = &self.config.optimizer;
        let outcome = match req.method {
            SearchMethod::Ape => {
                let initial =
                    if req.initial.is_empty() { vec![base.instruction.clone()] } else { req.initial.clone() };
                ape_search(&*self.obfuscator, &oc.meta_prompt, &initial, &req.validation, &mut evaluator, &oc.ape)
            }
            SearchMethod::Opro => {
                opro_search(&*self.obfuscator, &oc.meta_prompt, &req.validation, &mut evaluator, &oc.opro)
            }
        };
        match outcome {
            Ok(outcome) => Ok(OptimizeResult { outcome, config_hash: self.config_hash.clone() }),
            Err(aborted) => {
                log::warn!("search aborted; partial trace has {} iteration(s)", aborted.trace.iterations.len());
                Err(aborted.error.into())
            }
        }
    }

    pub fn entity(&self, task_id: &str, id: &str) -> JobResult<EntityView> {
        let store = self.load_store(task_id, None)?;
        let entry = store.get(id).ok_or_else(|| JobError::NotFound(format!("entity {id:?} in task {task_id:?}")))?;
        Ok(EntityView {
            task_id: task_id.to_string(),
            version: store.version,
            id: entry.id.clone(),
            obfuscation: entry.obfuscation.clone(),
        })
    }
}

/// Task ids name store directories.
fn check_task_id(task_id: &str) -> JobResult<()> {
    let charset = task_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if task_id.is_empty() || !charset || task_id.chars().all(|c| c == '.') {
        return Err(JobError::BadRequest(format!("invalid task id {task_id:?}")));
    }
    Ok(())
}

/// Hash for logging request bodies without their content.
pub fn body_hash(body: &str) -> String {
    payload_hash(&[body])
}
