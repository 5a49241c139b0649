//! Inference prompts, output parsing, and task and recovery metrics.

mod overlap;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::providers::{payload_hash, ChatRequest, INFERENCE_TEMPERATURE};
use crate::{Error, Result};

pub use crate::scorer::cosine;
pub use overlap::{meteor, metric_tokens, rouge_l, rouge_n, Meteor, MeteorBreakdown, SynonymTable};

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskKind {
    /// Answer is one member of the output set.
    Closed,
    /// Answer is an ordered list of the top `k` candidates.
    Ranking { k: usize },
    /// Free text.
    Open,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferencePrompt {
    pub instruction: String,
    pub output_set: Vec<String>,
    pub payload: String,
    pub kind: TaskKind,
    pub temperature: f64,
}

pub fn assemble_prompt(
    instruction: &str,
    output_set: &[String],
    payload: &str,
    kind: TaskKind,
) -> Result<InferencePrompt> {
    if instruction.trim().is_empty() {
        return Err(Error::EmptyInput("task instruction"));
    }
    match kind {
        TaskKind::Closed if output_set.is_empty() => return Err(Error::EmptyInput("output set")),
        TaskKind::Ranking { k: 0 } => return Err(Error::InvalidConfig("ranking k must be >= 1".into())),
        TaskKind::Ranking { .. } if output_set.is_empty() => return Err(Error::EmptyInput("candidate list")),
        _ => {}
    }
    let output_set = if kind == TaskKind::Open { Vec::new() } else { output_set.to_vec() };
    Ok(InferencePrompt {
        instruction: instruction.trim().to_string(),
        output_set,
        payload: payload.to_string(),
        kind,
        temperature: INFERENCE_TEMPERATURE,
    })
}

impl InferencePrompt {
    /// Everything after the instruction: enumerated output set, then payload.
    pub fn body(&self) -> String {
        let mut out = String::new();
        match self.kind {
            TaskKind::Closed => {
                out.push_str("Answer with exactly one of the following options:\n");
                enumerate(&mut out, &self.output_set);
                out.push('\n');
            }
            TaskKind::Ranking { k } => {
                out.push_str("Candidates:\n");
                enumerate(&mut out, &self.output_set);
                out.push_str(&format!(
                    "\nReturn the {k} most likely candidates, one per line, most likely first. Copy each candidate exactly.\n\n"
                ));
            }
            TaskKind::Open => {}
        }
        out.push_str("Input:\n");
        out.push_str(&self.payload);
        out
    }

    pub fn text(&self) -> String {
        format!("{}\n\n{}", self.instruction, self.body())
    }

    pub fn to_request(&self) -> ChatRequest {
        ChatRequest::new(self.instruction.clone(), self.body(), self.temperature)
    }

    /// Originals that appear verbatim in the payload. Must be empty for a
    /// payload built from an entity store.
    pub fn leaked<'a, I: IntoIterator<Item = &'a str>>(&self, originals: I) -> Vec<String> {
        originals
            .into_iter()
            .filter(|o| !o.trim().is_empty() && self.payload.contains(o))
            .map(str::to_string)
            .collect()
    }
}

fn enumerate(out: &mut String, items: &[String]) {
    for (i, item) in items.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, item));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ParsedOutput {
    Label { label: String },
    Ranked { items: Vec<String>, dropped: Vec<String> },
    Text { text: String },
}

fn normalize(s: &str) -> String {
    let trimmed = s.trim().trim_matches(|c: char| matches!(c, '"' | '\'' | '*' | '`' | '“' | '”'));
    trimmed
        .trim_end_matches(['.', '!', '?', ',', ';', ':', '。'])
        .trim()
        .to_lowercase()
}

fn strip_enumeration(line: &str) -> &str {
    let line = line.trim();
    let line = line.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix(['.', ')', ':']) {
            return rest.trim_start();
        }
    }
    line
}

fn lookup<'a>(set: &'a [String], raw: &str) -> Option<&'a String> {
    let key = normalize(raw);
    set.iter().find(|s| normalize(s) == key)
}

/// Maps raw model output onto the prompt's output space.
///
/// Closed tasks match case-insensitively after trimming whitespace,
/// surrounding quotes and trailing punctuation. Ranking output is read one
/// item per line (or comma-separated on a single line); items outside the
/// candidate set and repeats are dropped.
pub fn parse_output(raw: &str, prompt: &InferencePrompt) -> Result<ParsedOutput> {
    let set = &prompt.output_set;
    match prompt.kind {
        TaskKind::Open => Ok(ParsedOutput::Text { text: raw.to_string() }),
        TaskKind::Closed => {
            let first_line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
            lookup(set, raw)
                .or_else(|| lookup(set, strip_enumeration(first_line)))
                .map(|label| ParsedOutput::Label { label: label.clone() })
                .ok_or_else(|| Error::UnparseableOutput { raw: raw.to_string() })
        }
        TaskKind::Ranking { .. } => {
            let lines: Vec<&str> = raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            let pieces: Vec<&str> = if lines.len() == 1 && lookup(set, strip_enumeration(lines[0])).is_none() {
                lines[0].split(',').collect()
            } else {
                lines
            };
            let mut items = Vec::new();
            let mut seen = BTreeSet::new();
            let mut dropped = Vec::new();
            for piece in pieces {
                let piece = strip_enumeration(piece);
                if piece.is_empty() {
                    continue;
                }
                match lookup(set, piece) {
                    Some(item) if seen.insert(item.clone()) => items.push(item.clone()),
                    Some(_) => {}
                    None => dropped.push(piece.to_string()),
                }
            }
            if !dropped.is_empty() {
                log::warn!("dropped {} ranked item(s) outside the candidate set (output {})", dropped.len(), payload_hash(&[raw]));
            }
            if items.is_empty() {
                return Err(Error::UnparseableOutput { raw: raw.to_string() });
            }
            Ok(ParsedOutput::Ranked { items, dropped })
        }
    }
}

/// 1 when any positive item appears in the first `k` ranked items.
pub fn hit_at_k<S: AsRef<str>, T: AsRef<str>>(ranked: &[S], positives: &[T], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if positives.is_empty() {
        return Err(Error::EmptyInput("positive items"));
    }
    let hit = ranked.iter().take(k).any(|r| positives.iter().any(|p| p.as_ref() == r.as_ref()));
    Ok(if hit { 1.0 } else { 0.0 })
}

fn check_pairs<S, T>(preds: &[S], labels: &[T]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: labels.len() });
    }
    Ok(())
}

pub fn accuracy<S: AsRef<str>, T: AsRef<str>>(preds: &[S], labels: &[T]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p.as_ref() == l.as_ref()).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean of per-class recalls over the classes present in `labels`.
pub fn balanced_accuracy<S: AsRef<str>, T: AsRef<str>>(preds: &[S], labels: &[T]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let mut per_class: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (p, l) in preds.iter().zip(labels) {
        let entry = per_class.entry(l.as_ref()).or_default();
        entry.1 += 1;
        if p.as_ref() == l.as_ref() {
            entry.0 += 1;
        }
    }
    let recalls: f64 = per_class.values().map(|&(hit, total)| hit as f64 / total as f64).sum();
    Ok(recalls / per_class.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "hit@k")]
    HitAtK,
    #[serde(rename = "accuracy")]
    Accuracy,
    #[serde(rename = "balanced-accuracy")]
    BalancedAccuracy,
    #[serde(rename = "cosine")]
    Cosine,
    #[serde(rename = "rouge-1")]
    Rouge1,
    #[serde(rename = "rouge-2")]
    Rouge2,
    #[serde(rename = "rouge-l")]
    RougeL,
    #[serde(rename = "meteor")]
    Meteor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
    pub config_hash: Option<String>,
}

impl MetricReport {
    pub fn new(metric: Metric, value: f64, n: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidConfig(format!("{metric:?} value {value} outside [0, 1]")));
        }
        Ok(Self { metric, value, n, config_hash: None })
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }
}
