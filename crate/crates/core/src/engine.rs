//! Candidate generation and the semantic alignment constraint pass.
//!
//! Units are obfuscated one at a time in ascending id order. A candidate
//! for unit `i` is accepted when, for every adjacent unit `j` that already
//! has an obfuscation,
//!
//! ```text
//! score(obf_i, obf_j) >= score(orig_i, orig_j) / epsilon_sem
//! ```
//!
//! Rejected candidates are waitlisted; after `max_attempts` rejections the
//! waitlisted candidate with the highest mean obfuscated similarity to the
//! adjacent obfuscations wins and the record is marked as a fallback.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::providers::{ChatProvider, ChatRequest, OBFUSCATION_TEMPERATURE};
use crate::scorer::SimilarityScorer;
use crate::text::{AdjacencyGraph, TextUnit};
use crate::{Error, Result};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 10;
pub const DEFAULT_EPSILON_SEM: f64 = 10.0;
/// Calls made before an empty completion becomes an error.
pub const EMPTY_COMPLETION_RETRIES: u32 = 3;

pub const DEFAULT_INSTRUCTION: &str = "Rewrite the following text using only emojis, symbols and \
non-natural-language characters. Encode the key terms so that the meaning can still be used by \
a capable model, but the text is not readable by humans. Output only the rewritten text.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObfuscationConfig {
    pub instruction: String,
    pub temperature: f64,
    pub epsilon_sem: f64,
    pub max_attempts: u32,
    pub seed: u64,
}

impl Default for ObfuscationConfig {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_INSTRUCTION.to_string(),
            temperature: OBFUSCATION_TEMPERATURE,
            epsilon_sem: DEFAULT_EPSILON_SEM,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            seed: 0,
        }
    }
}

impl ObfuscationConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.epsilon_sem >= 1.0) {
            problems.push(format!("epsilon_sem must be >= 1, got {}", self.epsilon_sem));
        }
        if self.max_attempts == 0 {
            problems.push("max_attempts must be at least 1".into());
        }
        if !(self.temperature >= 0.0) {
            problems.push(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.instruction.trim().is_empty() {
            problems.push("instruction must not be empty".into());
        }
        problems
    }

    fn check(&self) -> Result<()> {
        let problems = self.validate();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseCheck {
    pub adjacent_id: String,
    pub original_sim: f64,
    pub obfuscated_sim: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationRecord {
    pub unit_id: String,
    pub original: String,
    pub obfuscated: String,
    pub attempts: u32,
    pub fallback: bool,
    pub pairwise_checks: Vec<PairwiseCheck>,
}

/// Asks the obfuscation model for one candidate. `sample` separates
/// repeated draws for the same text.
pub fn generate_candidate<C: ChatProvider + ?Sized>(
    chat: &C,
    cfg: &ObfuscationConfig,
    text: &str,
    sample: u32,
) -> Result<String> {
    let request = ChatRequest::new(&cfg.instruction, text, cfg.temperature)
        .with_sample(sample)
        .with_seed(cfg.seed);
    for _ in 0..EMPTY_COMPLETION_RETRIES {
        let reply = chat.chat(&request)?;
        let trimmed = reply.trim();
        if !trimmed.is_empty() {
            return Ok(trimmed.to_string());
        }
        log::warn!("empty completion for payload {}", request.payload_hash());
    }
    Err(Error::EmptyCompletion { attempts: EMPTY_COMPLETION_RETRIES })
}

/// Outcome of one alignment comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub original_sim: f64,
    pub obfuscated_sim: f64,
    pub passed: bool,
}

pub fn alignment_holds(original_sim: f64, obfuscated_sim: f64, epsilon_sem: f64) -> bool {
    obfuscated_sim >= original_sim / epsilon_sem
}

pub fn measure_alignment<S: SimilarityScorer + ?Sized>(
    orig_a: &str,
    orig_b: &str,
    obf_a: &str,
    obf_b: &str,
    epsilon_sem: f64,
    scorer: &S,
) -> Result<Alignment> {
    let original_sim = scorer.score(orig_a, orig_b)?.value();
    let obfuscated_sim = scorer.score(obf_a, obf_b)?.value();
    Ok(Alignment { original_sim, obfuscated_sim, passed: alignment_holds(original_sim, obfuscated_sim, epsilon_sem) })
}

/// True iff the obfuscations keep at least `1/epsilon_sem` of the
/// originals' similarity.
pub fn check_alignment<S: SimilarityScorer + ?Sized>(
    orig_a: &str,
    orig_b: &str,
    obf_a: &str,
    obf_b: &str,
    epsilon_sem: f64,
    scorer: &S,
) -> Result<bool> {
    if !(epsilon_sem >= 1.0) {
        return Err(Error::InvalidConfig(format!("epsilon_sem must be >= 1, got {epsilon_sem}")));
    }
    Ok(measure_alignment(orig_a, orig_b, obf_a, obf_b, epsilon_sem, scorer)?.passed)
}

struct Waitlisted {
    candidate: String,
    checks: Vec<PairwiseCheck>,
    mean_sim: f64,
}

/// Runs the constraint pass over every unit of `graph`. Any provider or
/// scorer failure aborts the whole pass.
pub fn constrained_obfuscate_all<C, S>(
    units: &[TextUnit],
    graph: &AdjacencyGraph,
    cfg: &ObfuscationConfig,
    chat: &C,
    scorer: &S,
) -> Result<Vec<ObfuscationRecord>>
where
    C: ChatProvider + ?Sized,
    S: SimilarityScorer + ?Sized,
{
    cfg.check()?;
    let by_id: HashMap<&str, &TextUnit> = units.iter().map(|u| (u.id.as_str(), u)).collect();
    if by_id.len() != units.len() || graph.node_count() != units.len() {
        return Err(Error::InvalidConfig("graph nodes do not match the unit list".into()));
    }
    let ordered: Vec<&TextUnit> = graph
        .ids()
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("graph node {id} has no unit")))
        })
        .collect::<Result<_>>()?;

    let mut records: Vec<ObfuscationRecord> = Vec::with_capacity(ordered.len());
    for (idx, unit) in ordered.iter().enumerate() {
        // Nodes are processed in index order, so the obfuscated neighbours
        // are exactly those with a smaller index.
        let done: Vec<usize> = graph.neighbors(idx).iter().copied().filter(|&j| j < idx).collect();
        let original_sims: Vec<f64> = done
            .iter()
            .map(|&j| Ok(scorer.score(&unit.text, &ordered[j].text)?.value()))
            .collect::<Result<_>>()?;

        let mut waitlist: Vec<Waitlisted> = Vec::new();
        let mut accepted = None;
        for attempt in 0..cfg.max_attempts {
            let candidate = generate_candidate(chat, cfg, &unit.text, attempt)?;
            let mut checks = Vec::with_capacity(done.len());
            for (&j, &original_sim) in done.iter().zip(&original_sims) {
                let obfuscated_sim = scorer.score(&candidate, &records[j].obfuscated)?.value();
                checks.push(PairwiseCheck {
                    adjacent_id: ordered[j].id.clone(),
                    original_sim,
                    obfuscated_sim,
                    passed: alignment_holds(original_sim, obfuscated_sim, cfg.epsilon_sem),
                });
            }
            if checks.iter().all(|c| c.passed) {
                accepted = Some((candidate, checks, attempt + 1));
                break;
            }
            let mean_sim = checks.iter().map(|c| c.obfuscated_sim).sum::<f64>() / checks.len() as f64;
            waitlist.push(Waitlisted { candidate, checks, mean_sim });
        }

        let record = match accepted {
            Some((obfuscated, pairwise_checks, attempts)) => ObfuscationRecord {
                unit_id: unit.id.clone(),
                original: unit.text.clone(),
                obfuscated,
                attempts,
                fallback: false,
                pairwise_checks,
            },
            None => {
                // Strict comparison keeps the earliest candidate on ties.
                let best = waitlist
                    .into_iter()
                    .reduce(|best, next| if next.mean_sim > best.mean_sim { next } else { best })
                    .expect("max_attempts >= 1");
                log::info!("unit {} fell back after {} attempts", unit.id, cfg.max_attempts);
                ObfuscationRecord {
                    unit_id: unit.id.clone(),
                    original: unit.text.clone(),
                    obfuscated: best.candidate,
                    attempts: cfg.max_attempts,
                    fallback: true,
                    pairwise_checks: best.checks,
                }
            }
        };
        records.push(record);
    }
    Ok(records)
}
