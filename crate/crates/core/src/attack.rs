//! Simulated inference attacks against obfuscated text.
//!
//! * recovery: an attacker model is told how the text was obfuscated and
//!   asked to reconstruct the original; guesses are scored with cosine,
//!   ROUGE and METEOR.
//! * random-entities baseline: the same metrics between each entity and
//!   a few random other entities, i.e. what a blind guess scores.
//! * distribution matching: obfuscated value frequencies are matched to
//!   public value frequencies.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{rouge_l, rouge_n, Meteor};
use crate::providers::{payload_hash, ChatProvider, ChatRequest, EmbeddingProvider, INFERENCE_TEMPERATURE};
use crate::scorer::{EmbeddingCosineScorer, DEFAULT_EMBEDDING_DIM};
use crate::{Error, Result};

pub const DEFAULT_BASELINE_SAMPLES: usize = 5;
pub const DEFAULT_TRIAL_CANDIDATES: usize = 500;

pub const EMOJI_METHOD_HINT: &str = "The text below was rewritten by a language model using only emojis, symbols \
and non-English characters so that a model can still use it but a person cannot read it.";
pub const TOKEN_REPLACEMENT_HINT: &str = "Some words in the text below were replaced with other words or \
placeholder tokens to hide their meaning.";

/// Attacker-side instruction: method description, task context, request.
pub fn recovery_system_prompt(method_hint: &str, task_context: &str) -> String {
    let mut out = String::from(method_hint.trim());
    if !task_context.trim().is_empty() {
        out.push_str("\n\n");
        out.push_str(task_context.trim());
    }
    out.push_str("\n\nReconstruct the original English text. Reply with the reconstruction only.");
    out
}

/// Asks `chat` to reconstruct the original text. The reply is returned as is.
pub fn recover<C: ChatProvider + ?Sized>(
    chat: &C,
    obfuscated: &str,
    method_hint: &str,
    task_context: &str,
) -> Result<String> {
    let request = ChatRequest::new(recovery_system_prompt(method_hint, task_context), obfuscated, INFERENCE_TEMPERATURE);
    Ok(chat.chat(&request)?)
}

/// Hash of the attacker prompt template, reported alongside results.
pub fn attacker_config_hash(method_hint: &str, task_context: &str) -> String {
    payload_hash(&[method_hint, task_context])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub cosine: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

impl PairScores {
    fn add(&mut self, other: &PairScores) {
        self.cosine += other.cosine;
        self.rouge_1 += other.rouge_1;
        self.rouge_2 += other.rouge_2;
        self.rouge_l += other.rouge_l;
        self.meteor += other.meteor;
    }

    fn scale(&mut self, by: f64) {
        self.cosine *= by;
        self.rouge_1 *= by;
        self.rouge_2 *= by;
        self.rouge_l *= by;
        self.meteor *= by;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub dataset_id: String,
    pub means: PairScores,
    pub n: usize,
    pub config_hash: Option<String>,
}

/// Scores (reference, guess) pairs. Cosine uses embeddings of `dim`
/// components and is floored at 0 so every metric lies in `[0, 1]`.
pub struct RecoveryEvaluator<E> {
    embeddings: EmbeddingCosineScorer<E>,
    meteor: Meteor,
}

impl<E: EmbeddingProvider> RecoveryEvaluator<E> {
    pub fn new(embedder: E) -> Self {
        Self::with_dim(embedder, DEFAULT_EMBEDDING_DIM)
    }

    pub fn with_dim(embedder: E, dim: usize) -> Self {
        Self { embeddings: EmbeddingCosineScorer::new(embedder, dim), meteor: Meteor::new() }
    }

    pub fn with_meteor(mut self, meteor: Meteor) -> Self {
        self.meteor = meteor;
        self
    }

    pub fn pair(&self, reference: &str, guess: &str) -> Result<PairScores> {
        Ok(PairScores {
            cosine: self.embeddings.raw_cosine(reference, guess)?.max(0.0),
            rouge_1: rouge_n(guess, reference, 1),
            rouge_2: rouge_n(guess, reference, 2),
            rouge_l: rouge_l(guess, reference),
            meteor: self.meteor.score(guess, reference),
        })
    }

    /// Per-metric means over aligned `(originals[i], recovered[i])` pairs.
    pub fn evaluate<S: AsRef<str>, T: AsRef<str>>(
        &self,
        dataset_id: &str,
        originals: &[S],
        recovered: &[T],
    ) -> Result<AttackReport> {
        if originals.len() != recovered.len() {
            return Err(Error::LengthMismatch { left: originals.len(), right: recovered.len() });
        }
        if originals.is_empty() {
            return Err(Error::EmptyInput("recovery pairs"));
        }
        let mut sum = PairScores::default();
        for (o, r) in originals.iter().zip(recovered) {
            sum.add(&self.pair(o.as_ref(), r.as_ref())?);
        }
        sum.scale(1.0 / originals.len() as f64);
        Ok(AttackReport { dataset_id: dataset_id.to_string(), means: sum, n: originals.len(), config_hash: None })
    }

    /// Each entity against `n_samples` random other entities. Entity `i`
    /// scores the mean over its draws; the report averages over entities.
    pub fn random_entities_baseline<S: AsRef<str>>(
        &self,
        dataset_id: &str,
        dataset: &[S],
        n_samples: usize,
        seed: u64,
    ) -> Result<AttackReport> {
        let draws = baseline_draws(dataset.len(), n_samples, seed)?;
        let mut total = PairScores::default();
        for (i, others) in draws.iter().enumerate() {
            let mut entity = PairScores::default();
            for &j in others {
                entity.add(&self.pair(dataset[i].as_ref(), dataset[j].as_ref())?);
            }
            entity.scale(1.0 / others.len() as f64);
            total.add(&entity);
        }
        total.scale(1.0 / dataset.len() as f64);
        Ok(AttackReport { dataset_id: dataset_id.to_string(), means: total, n: dataset.len(), config_hash: None })
    }
}

/// Indices compared against each entity by the random baseline: `n`
/// distinct indices per entity, never the entity itself.
pub fn baseline_draws(len: usize, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::InvalidConfig("baseline sample count must be >= 1".into()));
    }
    if len <= n {
        return Err(Error::DatasetTooSmall { size: len, needed: n + 1 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|i| {
            index::sample(&mut rng, len - 1, n).into_iter().map(|j| if j >= i { j + 1 } else { j }).collect()
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistributionAttackResult {
    /// Obfuscated value to inferred original value.
    pub mapping: BTreeMap<String, String>,
    /// Absolute frequency gap of each mapping.
    pub gaps: BTreeMap<String, f64>,
}

fn check_fractions(name: &str, freqs: &BTreeMap<String, f64>) -> Result<()> {
    if let Some((k, v)) = freqs.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidConfig(format!("{name} frequency of {k:?} is {v}, expected a fraction")));
    }
    let total: f64 = freqs.values().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::InvalidConfig(format!("{name} frequencies sum to {total}")));
    }
    Ok(())
}

/// Greedy one-to-one matching of obfuscated to public values by closest
/// frequency. Pairs further apart than `tolerance` are never matched.
pub fn distribution_attack(
    obfuscated: &BTreeMap<String, f64>,
    public: &BTreeMap<String, f64>,
    tolerance: f64,
) -> Result<DistributionAttackResult> {
    check_fractions("obfuscated", obfuscated)?;
    check_fractions("public", public)?;
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be >= 0, got {tolerance}")));
    }
    let mut candidates: Vec<(f64, &String, &String)> = obfuscated
        .iter()
        .flat_map(|(o, fo)| public.iter().map(move |(p, fp)| ((fo - fp).abs(), o, p)))
        .filter(|(gap, _, _)| *gap <= tolerance + 1e-12)
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)).then_with(|| a.2.cmp(b.2)));

    let mut result = DistributionAttackResult::default();
    let mut used = BTreeSet::new();
    for (gap, o, p) in candidates {
        if result.mapping.contains_key(o) || used.contains(p) {
            continue;
        }
        used.insert(p.clone());
        result.mapping.insert(o.clone(), p.clone());
        result.gaps.insert(o.clone(), gap);
    }
    Ok(result)
}

/// Relative frequency of each value.
pub fn frequencies<S: AsRef<str>>(values: &[S]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v.as_ref().to_string()).or_default() += 1;
    }
    counts.into_iter().map(|(k, c)| (k, c as f64 / values.len() as f64)).collect()
}

/// One item-identification question: pick the original among candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationTrial {
    pub trial_id: String,
    pub obfuscation: String,
    pub candidates: Vec<String>,
    /// 1-based position of the original in `candidates`.
    pub answer_index: usize,
}

/// One trial per `(obfuscation, original)` pair. Distractors are drawn
/// from `pool` without the original and the list is shuffled.
pub fn build_identification_trials(
    items: &[(String, String)],
    pool: &[String],
    candidates: usize,
    seed: u64,
) -> Result<Vec<IdentificationTrial>> {
    if candidates < 2 {
        return Err(Error::InvalidConfig("a trial needs at least 2 candidates".into()));
    }
    let distinct: Vec<&String> = pool.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(items.len());
    for (t, (obfuscation, original)) in items.iter().enumerate() {
        let others: Vec<&String> = distinct.iter().copied().filter(|p| *p != original).collect();
        if others.len() < candidates - 1 {
            return Err(Error::DatasetTooSmall { size: others.len() + 1, needed: candidates });
        }
        let mut list: Vec<String> = others.choose_multiple(&mut rng, candidates - 1).map(|s| s.to_string()).collect();
        list.push(original.clone());
        list.shuffle(&mut rng);
        let answer_index = list.iter().position(|c| c == original).expect("original was inserted") + 1;
        trials.push(IdentificationTrial {
            trial_id: format!("t{:04}", t + 1),
            obfuscation: obfuscation.clone(),
            candidates: list,
            answer_index,
        });
    }
    Ok(trials)
}

/// Trials as CSV: `trial_id, obfuscation, candidate_1..candidate_N, answer_index`.
pub fn trials_to_csv(trials: &[IdentificationTrial]) -> Result<String> {
    let width = trials.first().map_or(0, |t| t.candidates.len());
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["trial_id".to_string(), "obfuscation".to_string()];
    header.extend((1..=width).map(|i| format!("candidate_{i}")));
    header.push("answer_index".into());
    writer.write_record(&header).map_err(csv_error)?;
    for t in trials {
        if t.candidates.len() != width {
            return Err(Error::LengthMismatch { left: width, right: t.candidates.len() });
        }
        let mut row = vec![t.trial_id.clone(), t.obfuscation.clone()];
        row.extend(t.candidates.iter().cloned());
        row.push(t.answer_index.to_string());
        writer.write_record(&row).map_err(csv_error)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Questionnaire version without the answer column.
pub fn trials_to_blind_csv(trials: &[IdentificationTrial]) -> Result<String> {
    let full = trials_to_csv(trials)?;
    let mut reader = csv::Reader::from_reader(full.as_bytes());
    let mut writer = csv::Writer::from_writer(Vec::new());
    let header = reader.headers().map_err(csv_error)?.clone();
    let keep = header.len().saturating_sub(1);
    writer.write_record(header.iter().take(keep)).map_err(csv_error)?;
    for record in reader.records() {
        writer.write_record(record.map_err(csv_error)?.iter().take(keep)).map_err(csv_error)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidConfig(format!("csv: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationScore {
    pub answered: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Trial ids that appear in the responses but not in the trial list.
    pub unknown_trials: Vec<String>,
}

#[derive(Deserialize)]
struct ResponseRow {
    trial_id: String,
    response_index: usize,
}

/// Scores a response CSV with columns `trial_id, response_index`.
pub fn score_identification(trials: &[IdentificationTrial], responses_csv: &str) -> Result<IdentificationScore> {
    let answers: BTreeMap<&str, usize> = trials.iter().map(|t| (t.trial_id.as_str(), t.answer_index)).collect();
    let mut reader = csv::Reader::from_reader(responses_csv.as_bytes());
    let (mut answered, mut correct) = (0, 0);
    let mut unknown_trials = Vec::new();
    for row in reader.deserialize::<ResponseRow>() {
        let row = row.map_err(csv_error)?;
        match answers.get(row.trial_id.as_str()) {
            Some(&answer) => {
                answered += 1;
                if answer == row.response_index {
                    correct += 1;
                }
            }
            None => unknown_trials.push(row.trial_id),
        }
    }
    if answered == 0 {
        return Err(Error::EmptyInput("responses"));
    }
    Ok(IdentificationScore { answered, correct, accuracy: correct as f64 / answered as f64, unknown_trials })
}
