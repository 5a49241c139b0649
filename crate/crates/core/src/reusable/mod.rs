//! Reusable obfuscation: a fixed entity vocabulary is obfuscated once,
//! stored, and every user payload is assembled from the stored forms.

mod store;
pub mod tabular;

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::engine::{constrained_obfuscate_all, ObfuscationConfig};
use crate::ldp::{clique_decompose, post_sample_all, CliquePartition, SamplingPlan, DEFAULT_EPSILON_LDP};
use crate::providers::ChatProvider;
use crate::scorer::SimilarityScorer;
use crate::text::{build_adjacency_graph, AdjacencyConfig, TextUnit};
use crate::{Error, Result};

pub use store::{StoreManifest, StoreRepository};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub task_id: String,
    pub adjacency: AdjacencyConfig,
    pub obfuscation: ObfuscationConfig,
    pub epsilon_ldp: f64,
    /// Seed for post-sampling.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            task_id: "default".into(),
            adjacency: AdjacencyConfig::default(),
            obfuscation: ObfuscationConfig::default(),
            epsilon_ldp: DEFAULT_EPSILON_LDP,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = self.obfuscation.validate();
        if !(0.0..=1.0).contains(&self.adjacency.rho) {
            problems.push(format!("rho must lie in [0, 1], got {}", self.adjacency.rho));
        }
        if !(self.epsilon_ldp >= 0.0) {
            problems.push(format!("epsilon_ldp must be >= 0, got {}", self.epsilon_ldp));
        }
        if self.task_id.is_empty()
            || !self.task_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            problems.push(format!("task_id {:?} must be non-empty and use [A-Za-z0-9._-]", self.task_id));
        }
        problems
    }
}

/// One persisted line of an entity store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub id: String,
    pub original: String,
    /// Final obfuscation used in every prompt.
    pub obfuscation: String,
    /// Obfuscations generated for this entity before post-sampling.
    pub variants: Vec<String>,
    pub attempts: u32,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityStore {
    pub task_id: String,
    /// Assigned when committed to a [`StoreRepository`]; 0 until then.
    pub version: u32,
    pub rho: f64,
    pub epsilon_sem: f64,
    pub epsilon_ldp: f64,
    pub created_at_unix: u64,
    pub entries: BTreeMap<String, StoreEntry>,
    pub partition: Option<CliquePartition>,
    pub plans: Vec<SamplingPlan>,
}

impl EntityStore {
    pub fn get(&self, id: &str) -> Option<&StoreEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries as JSON lines, sorted by id.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for entry in self.entries.values() {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Store from JSON lines. Metadata not carried by the lines is left at
    /// neutral values.
    pub fn from_jsonl(task_id: &str, jsonl: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
            let entry: StoreEntry = serde_json::from_str(line)?;
            if entries.contains_key(&entry.id) {
                return Err(Error::DuplicateId(entry.id));
            }
            entries.insert(entry.id.clone(), entry);
        }
        Ok(Self {
            task_id: task_id.to_string(),
            version: 0,
            rho: f64::NAN,
            epsilon_sem: f64::NAN,
            epsilon_ldp: f64::NAN,
            created_at_unix: 0,
            entries,
            partition: None,
            plans: Vec::new(),
        })
    }

    /// Hex SHA-256 of [`to_jsonl`](Self::to_jsonl).
    pub fn content_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_jsonl()?.as_bytes())))
    }
}

/// Graph build, constraint pass and post-sampling over an entity set.
/// Nothing is returned unless every step succeeds.
pub fn obfuscate_entity_set<C, S>(
    entities: &[TextUnit],
    cfg: &PipelineConfig,
    chat: &C,
    scorer: &S,
) -> Result<EntityStore>
where
    C: ChatProvider + ?Sized,
    S: SimilarityScorer + ?Sized,
{
    if entities.is_empty() {
        return Err(Error::EmptyInput("entity set"));
    }
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems.join("; ")));
    }
    let graph = build_adjacency_graph(entities, &cfg.adjacency)?;
    let records = constrained_obfuscate_all(entities, &graph, &cfg.obfuscation, chat, scorer)?;
    let accepted: BTreeMap<String, String> =
        records.iter().map(|r| (r.unit_id.clone(), r.obfuscated.clone())).collect();
    let partition = clique_decompose(&graph);
    let sampled = post_sample_all(&partition, &accepted, cfg.epsilon_ldp, cfg.seed)?;

    let entries = records
        .into_iter()
        .map(|r| {
            let obfuscation = sampled.finals[&r.unit_id].text.clone();
            let entry = StoreEntry {
                id: r.unit_id.clone(),
                original: r.original,
                obfuscation,
                variants: vec![r.obfuscated],
                attempts: r.attempts,
                fallback: r.fallback,
            };
            (r.unit_id, entry)
        })
        .collect();

    Ok(EntityStore {
        task_id: cfg.task_id.clone(),
        version: 0,
        rho: cfg.adjacency.rho,
        epsilon_sem: cfg.obfuscation.epsilon_sem,
        epsilon_ldp: cfg.epsilon_ldp,
        created_at_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        entries,
        partition: Some(partition),
        plans: sampled.plans,
    })
}

/// Obfuscated history of one user, in interaction order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserPayload {
    pub user_id: String,
    pub items: Vec<String>,
}

impl UserPayload {
    /// Items joined one per line, as sent to the inference model.
    pub fn render(&self) -> String {
        self.items.join("\n")
    }
}

pub fn assemble_user_payload(user_id: &str, history: &[String], store: &EntityStore) -> Result<UserPayload> {
    let missing: Vec<String> = history.iter().filter(|id| store.get(id).is_none()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::UnknownEntities(missing));
    }
    Ok(UserPayload {
        user_id: user_id.to_string(),
        items: history.iter().map(|id| store.entries[id].obfuscation.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{MockChat, MockCodebook};
    use crate::scorer::TokenOverlapScorer;

    #[test]
    fn single_entity_keeps_its_candidate() {
        let chat = MockChat::codebook(2);
        let store = obfuscate_entity_set(
            &[TextUnit::new("e1", "Lavender Body Lotion")],
            &PipelineConfig::default(),
            &chat,
            &TokenOverlapScorer,
        )
        .unwrap();
        assert_eq!(store.len(), 1);
        let entry = store.get("e1").unwrap();
        assert_eq!(entry.obfuscation, MockCodebook::new(2).encode("Lavender Body Lotion", 0));
        assert_eq!(entry.variants, vec![entry.obfuscation.clone()]);
    }

    #[test]
    fn payload_follows_history_order() {
        let units: Vec<TextUnit> =
            (1..=6).map(|i| TextUnit::new(format!("e{i}"), format!("product number {i} deluxe edition"))).collect();
        let store = obfuscate_entity_set(&units, &PipelineConfig::default(), &MockChat::codebook(3), &TokenOverlapScorer)
            .unwrap();
        let history: Vec<String> = ["e1", "e3", "e6"].iter().map(|s| s.to_string()).collect();
        let payload = assemble_user_payload("u1", &history, &store).unwrap();
        let expected: Vec<String> = history.iter().map(|id| store.entries[id].obfuscation.clone()).collect();
        assert_eq!(payload.items, expected);
        assert!(assemble_user_payload("u1", &[], &store).unwrap().items.is_empty());
        let err = assemble_user_payload("u1", &["e1".into(), "e9".into(), "e7".into()], &store).unwrap_err();
        assert!(matches!(err, Error::UnknownEntities(ids) if ids == vec!["e9".to_string(), "e7".to_string()]));
    }

    #[test]
    fn jsonl_round_trip() {
        let units = vec![TextUnit::new("a", "rose serum"), TextUnit::new("b", "rose serum")];
        let store = obfuscate_entity_set(&units, &PipelineConfig::default(), &MockChat::codebook(1), &TokenOverlapScorer)
            .unwrap();
        let text = store.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        let back = EntityStore::from_jsonl("default", &text).unwrap();
        assert_eq!(back.entries, store.entries);
        assert_eq!(back.content_hash().unwrap(), store.content_hash().unwrap());
        let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = line.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 6);
        for key in ["id", "original", "obfuscation", "variants", "attempts", "fallback"] {
            assert!(keys.contains(&key));
        }
    }

    #[test]
    fn empty_entity_set_rejected() {
        let err = obfuscate_entity_set(&[], &PipelineConfig::default(), &MockChat::codebook(1), &TokenOverlapScorer);
        assert!(matches!(err, Err(Error::EmptyInput(_))));
    }
}
