//! Search over obfuscation instructions.
//!
//! Candidates are scored on a reserved validation set by an injected
//! evaluator (prompt, sample) -> score. Evaluation stops early once a
//! candidate trails the best known mean at two consecutive checkpoints.
//! Two searches are provided: APE-style rounds seeded from the two best
//! prompts of the previous round, and OPRO-style iterations driven by a
//! meta prompt that lists every scored prompt so far.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::providers::{ChatProvider, ChatRequest, OBFUSCATION_TEMPERATURE};
use crate::scorer::token_overlap_f1;
use crate::{Error, Result};

pub const DEFAULT_CHECKPOINT: usize = 50;
pub const LOSING_CHECKPOINTS_TO_STOP: usize = 2;
pub const APE_ITERATIONS: usize = 6;
pub const APE_CANDIDATES_PER_ITERATION: usize = 7;
pub const APE_PARENTS: usize = 2;
pub const OPRO_ITERATIONS: usize = 40;
pub const OPRO_SEED_PROMPTS: usize = 3;
/// Seed prompts with a higher pairwise token-overlap F1 count as duplicates.
pub const OPRO_DISTINCT_MAX_F1: f64 = 0.9;
pub const VALIDATION_RESERVE: usize = 1000;
const TIE_TOLERANCE: f64 = 1e-12;

pub const DEFAULT_APE_META_PROMPT: &str = "You write instructions for a language model that rewrites text into \
emojis, symbols and non-English characters. The rewrite must stay useful for a downstream model while hiding \
the original wording from a human reader.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateStatus {
    Active,
    EarlyStopped,
    Best,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePrompt {
    pub text: String,
    pub mean: f64,
    pub evaluated: usize,
    pub status: CandidateStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean: f64,
    pub evaluated: usize,
    pub stopped: bool,
}

/// Scores `prompt` sample by sample. With `best_mean` set, the running mean
/// is compared to it every `checkpoint` samples; two consecutive losing
/// comparisons end the evaluation before the set is exhausted.
pub fn early_stop_evaluate<T, F>(
    prompt: &str,
    validation: &[T],
    best_mean: Option<f64>,
    checkpoint: usize,
    evaluator: &mut F,
) -> Result<Evaluation>
where
    F: FnMut(&str, &T) -> Result<f64>,
{
    if validation.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    if checkpoint == 0 {
        return Err(Error::InvalidConfig("checkpoint must be >= 1".into()));
    }
    let mut sum = 0.0;
    let mut losing = 0;
    for (i, sample) in validation.iter().enumerate() {
        sum += evaluator(prompt, sample)?;
        let evaluated = i + 1;
        if let Some(best) = best_mean {
            if evaluated % checkpoint == 0 && evaluated < validation.len() {
                let mean = sum / evaluated as f64;
                // Summation order alone can put an equal prompt a few ulps
                // below the best mean; that is a tie, not a loss.
                losing = if mean < best - TIE_TOLERANCE * best.abs().max(1.0) { losing + 1 } else { 0 };
                if losing >= LOSING_CHECKPOINTS_TO_STOP {
                    return Ok(Evaluation { mean, evaluated, stopped: true });
                }
            }
        }
    }
    Ok(Evaluation { mean: sum / validation.len() as f64, evaluated: validation.len(), stopped: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrompt {
    pub text: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub candidates: Vec<CandidatePrompt>,
    /// Global best after this iteration.
    pub best: Option<ScoredPrompt>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub method: String,
    pub seeds: Vec<CandidatePrompt>,
    pub iterations: Vec<IterationRecord>,
    /// Prompt-score pairs in the order they were added to the meta prompt.
    pub history: Vec<ScoredPrompt>,
}

impl SearchTrace {
    fn new(method: &str) -> Self {
        Self { method: method.to_string(), ..Self::default() }
    }

    pub fn best(&self) -> Option<&ScoredPrompt> {
        self.iterations.last().and_then(|it| it.best.as_ref())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        Ok(serde_json::from_str(raw)?)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("prompt search aborted after {} iteration(s): {error}", .trace.iterations.len())]
pub struct SearchAborted {
    pub error: Error,
    /// Everything completed before the failure.
    pub trace: SearchTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: ScoredPrompt,
    pub trace: SearchTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApeConfig {
    pub iterations: usize,
    pub candidates_per_iteration: usize,
    pub checkpoint: usize,
    pub seed: u64,
}

impl Default for ApeConfig {
    fn default() -> Self {
        Self {
            iterations: APE_ITERATIONS,
            candidates_per_iteration: APE_CANDIDATES_PER_ITERATION,
            checkpoint: DEFAULT_CHECKPOINT,
            seed: 0,
        }
    }
}

/// Generation request for one APE candidate.
pub fn ape_generation_request(meta_prompt: &str, parents: &[String], sample: u32, seed: u64) -> ChatRequest {
    let mut user = String::new();
    if parents.is_empty() {
        user.push_str("Write one new instruction.");
    } else {
        user.push_str("Current best instructions:\n");
        for (i, p) in parents.iter().enumerate() {
            user.push_str(&format!("{}. {}\n", i + 1, p));
        }
        user.push_str("\nWrite one new instruction that improves on them.");
    }
    user.push_str(" Reply with the instruction only.");
    ChatRequest::new(meta_prompt, user, OBFUSCATION_TEMPERATURE).with_sample(sample).with_seed(seed)
}

fn generate<C: ChatProvider + ?Sized>(chat: &C, request: &ChatRequest) -> Result<String> {
    let reply = chat.chat(request)?;
    let text = reply.trim();
    if text.is_empty() {
        return Err(Error::EmptyCompletion { attempts: 1 });
    }
    Ok(text.to_string())
}

struct Best(Option<ScoredPrompt>);

impl Best {
    fn mean(&self) -> Option<f64> {
        self.0.as_ref().map(|b| b.score)
    }

    /// Full evaluations that beat the current best replace it.
    fn offer(&mut self, text: &str, eval: &Evaluation) -> bool {
        if eval.stopped || self.mean().is_some_and(|b| eval.mean <= b) {
            return false;
        }
        self.0 = Some(ScoredPrompt { text: text.to_string(), score: eval.mean });
        true
    }
}

fn candidate(text: String, eval: &Evaluation) -> CandidatePrompt {
    CandidatePrompt {
        text,
        mean: eval.mean,
        evaluated: eval.evaluated,
        status: if eval.stopped { CandidateStatus::EarlyStopped } else { CandidateStatus::Active },
    }
}

fn mark_best(candidates: &mut [CandidatePrompt], best: &Option<ScoredPrompt>) {
    if let Some(b) = best {
        for c in candidates.iter_mut().filter(|c| c.status == CandidateStatus::Active && c.text == b.text) {
            c.status = CandidateStatus::Best;
        }
    }
}

/// APE-style search. `initial` prompts are scored first; each iteration
/// generates candidates from the two best prompts of the previous round.
pub fn ape_search<C, T, F>(
    chat: &C,
    meta_prompt: &str,
    initial: &[String],
    validation: &[T],
    evaluator: &mut F,
    cfg: &ApeConfig,
) -> std::result::Result<SearchOutcome, SearchAborted>
where
    C: ChatProvider + ?Sized,
    F: FnMut(&str, &T) -> Result<f64>,
{
    let mut trace = SearchTrace::new("ape");
    let mut best = Best(None);
    macro_rules! attempt {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => return Err(SearchAborted { error, trace }),
            }
        };
    }
    if cfg.candidates_per_iteration == 0 || cfg.iterations == 0 {
        return Err(SearchAborted { error: Error::InvalidConfig("ape needs iterations and candidates".into()), trace });
    }

    let mut round: Vec<CandidatePrompt> = Vec::new();
    for text in initial {
        let eval = attempt!(early_stop_evaluate(text, validation, best.mean(), cfg.checkpoint, evaluator));
        best.offer(text, &eval);
        round.push(candidate(text.clone(), &eval));
    }
    mark_best(&mut round, &best.0);
    trace.seeds = round.clone();

    for _ in 0..cfg.iterations {
        let parents = top_prompts(&round, APE_PARENTS);
        let mut next = Vec::with_capacity(cfg.candidates_per_iteration);
        for j in 0..cfg.candidates_per_iteration {
            let request = ape_generation_request(meta_prompt, &parents, j as u32, cfg.seed);
            let text = attempt!(generate(chat, &request));
            let eval = attempt!(early_stop_evaluate(&text, validation, best.mean(), cfg.checkpoint, evaluator));
            best.offer(&text, &eval);
            next.push(candidate(text, &eval));
        }
        mark_best(&mut next, &best.0);
        trace.iterations.push(IterationRecord { candidates: next.clone(), best: best.0.clone() });
        round = next;
    }
    let best = best.0.expect("first round evaluates without a reference mean");
    Ok(SearchOutcome { best, trace })
}

/// Best `n` distinct prompts of a round. Fully evaluated candidates rank
/// ahead of early-stopped ones; ties keep generation order.
fn top_prompts(round: &[CandidatePrompt], n: usize) -> Vec<String> {
    let mut order: Vec<&CandidatePrompt> = round.iter().collect();
    order.sort_by(|a, b| {
        let stopped = |c: &CandidatePrompt| c.status == CandidateStatus::EarlyStopped;
        stopped(a).cmp(&stopped(b)).then(b.mean.total_cmp(&a.mean))
    });
    let mut out: Vec<String> = Vec::new();
    for c in order {
        if out.len() == n {
            break;
        }
        if !out.contains(&c.text) {
            out.push(c.text.clone());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OproConfig {
    pub max_iterations: usize,
    pub seed_prompts: usize,
    /// Generation requests allowed per required seed prompt.
    pub seed_attempts_per_prompt: usize,
    pub distinct_max_f1: f64,
    pub checkpoint: usize,
    pub seed: u64,
}

impl Default for OproConfig {
    fn default() -> Self {
        Self {
            max_iterations: OPRO_ITERATIONS,
            seed_prompts: OPRO_SEED_PROMPTS,
            seed_attempts_per_prompt: 5,
            distinct_max_f1: OPRO_DISTINCT_MAX_F1,
            checkpoint: DEFAULT_CHECKPOINT,
            seed: 0,
        }
    }
}

/// Meta prompt listing every scored prompt, lowest score first.
pub fn render_opro_meta_prompt(meta_prompt: &str, history: &[ScoredPrompt]) -> String {
    let mut pairs: Vec<&ScoredPrompt> = history.iter().collect();
    pairs.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut out = String::from(meta_prompt.trim());
    out.push_str("\n\nPrevious instructions and their scores (higher is better):\n");
    for p in pairs {
        out.push_str(&format!("\ntext: {}\nscore: {:.4}\n", p.text, p.score));
    }
    out.push_str("\nWrite a new instruction that differs from all of the above and scores higher. Reply with the instruction only.");
    out
}

/// OPRO-style search. Distinct seed prompts are generated and scored
/// first; every iteration then adds one new prompt to the history.
pub fn opro_search<C, T, F>(
    chat: &C,
    meta_prompt: &str,
    validation: &[T],
    evaluator: &mut F,
    cfg: &OproConfig,
) -> std::result::Result<SearchOutcome, SearchAborted>
where
    C: ChatProvider + ?Sized,
    F: FnMut(&str, &T) -> Result<f64>,
{
    let mut trace = SearchTrace::new("opro");
    let mut best = Best(None);
    macro_rules! attempt {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => return Err(SearchAborted { error, trace }),
            }
        };
    }
    if cfg.seed_prompts == 0 {
        return Err(SearchAborted { error: Error::InvalidConfig("opro needs at least one seed prompt".into()), trace });
    }

    let mut seeds: Vec<String> = Vec::new();
    let budget = cfg.seed_prompts * cfg.seed_attempts_per_prompt.max(1);
    let mut requests = 0;
    while seeds.len() < cfg.seed_prompts {
        if requests == budget {
            let error = Error::IndistinctSeeds { needed: cfg.seed_prompts, requests };
            return Err(SearchAborted { error, trace });
        }
        let request = ChatRequest::new(
            meta_prompt,
            "Write one instruction for this task. Reply with the instruction only.",
            OBFUSCATION_TEMPERATURE,
        )
        .with_sample(requests as u32)
        .with_seed(cfg.seed);
        requests += 1;
        let text = attempt!(generate(chat, &request));
        if seeds.iter().all(|s| token_overlap_f1(s, &text) <= cfg.distinct_max_f1) {
            seeds.push(text);
        }
    }
    for text in seeds {
        let eval = attempt!(early_stop_evaluate(&text, validation, None, cfg.checkpoint, evaluator));
        best.offer(&text, &eval);
        trace.history.push(ScoredPrompt { text: text.clone(), score: eval.mean });
        trace.seeds.push(candidate(text, &eval));
    }
    mark_best(&mut trace.seeds, &best.0);

    for k in 0..cfg.max_iterations {
        let request = ChatRequest::new(
            "You improve instructions based on their measured scores.",
            render_opro_meta_prompt(meta_prompt, &trace.history),
            OBFUSCATION_TEMPERATURE,
        )
        .with_sample((requests + k) as u32)
        .with_seed(cfg.seed);
        let text = attempt!(generate(chat, &request));
        let eval = attempt!(early_stop_evaluate(&text, validation, best.mean(), cfg.checkpoint, evaluator));
        best.offer(&text, &eval);
        trace.history.push(ScoredPrompt { text: text.clone(), score: eval.mean });
        let mut candidates = vec![candidate(text, &eval)];
        mark_best(&mut candidates, &best.0);
        trace.iterations.push(IterationRecord { candidates, best: best.0.clone() });
    }
    let best = best.0.expect("seed prompts are fully evaluated");
    Ok(SearchOutcome { best, trace })
}

/// Seeded split into a validation reserve of `size` items and the rest.
pub fn reserve_validation<T: Clone>(data: &[T], size: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if data.len() < size {
        return Err(Error::DatasetTooSmall { size: data.len(), needed: size });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let validation = order[..size].iter().map(|&i| data[i].clone()).collect();
    let rest = order[size..].iter().map(|&i| data[i].clone()).collect();
    Ok((validation, rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{MockChat, ProviderError};
    use std::collections::HashMap;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn constant_scores(table: HashMap<&'static str, f64>) -> impl FnMut(&str, &usize) -> Result<f64> {
        move |p, _| Ok(*table.get(p).unwrap_or(&0.0))
    }

    #[test]
    fn early_stop_schedules() {
        let validation: Vec<usize> = (0..200).collect();
        let mut winner = |_: &str, _: &usize| Ok(0.9);
        let e = early_stop_evaluate("p", &validation, Some(0.5), 50, &mut winner).unwrap();
        assert_eq!((e.evaluated, e.stopped), (200, false));

        let mut loser = |_: &str, _: &usize| Ok(0.1);
        let e = early_stop_evaluate("p", &validation, Some(0.5), 50, &mut loser).unwrap();
        assert_eq!((e.evaluated, e.stopped), (100, true));

        // loses at 50, wins at 100, loses at 150: never two in a row
        let mut mixed = |_: &str, i: &usize| Ok(if *i < 50 || (100..150).contains(i) { 0.0 } else { 1.0 });
        let e = early_stop_evaluate("p", &validation, Some(0.5), 50, &mut mixed).unwrap();
        assert!(!e.stopped);

        let short: Vec<usize> = (0..40).collect();
        let e = early_stop_evaluate("p", &short, Some(0.5), 50, &mut loser).unwrap();
        assert_eq!((e.evaluated, e.stopped), (40, false));
    }

    #[test]
    fn ape_improves_and_seeds_from_top_two() {
        let counter = AtomicUsize::new(0);
        let chat = MockChat::from_fn(move |_| Ok(format!("prompt {}", counter.fetch_add(1, Ordering::SeqCst))));
        let validation: Vec<usize> = (0..120).collect();
        let mut eval = |p: &str, _: &usize| Ok(p.trim_start_matches("prompt ").parse::<f64>().unwrap() / 100.0);
        let out = ape_search(&chat, "meta", &[], &validation, &mut eval, &ApeConfig::default()).unwrap();
        assert_eq!(out.trace.iterations.len(), 6);
        assert_eq!(out.best.text, "prompt 41");
        let bests: Vec<f64> = out.trace.iterations.iter().map(|it| it.best.as_ref().unwrap().score).collect();
        assert!(bests.windows(2).all(|w| w[1] > w[0]));

        let requests = chat.requests();
        assert_eq!(requests.len(), 42);
        for r in &requests[7..14] {
            assert!(r.user.contains("1. prompt 6\n2. prompt 5\n"));
            assert!(!r.user.contains("3. "));
        }
    }

    #[test]
    fn ape_identical_candidates_keep_best() {
        let chat = MockChat::constant("same");
        let validation: Vec<usize> = (0..10).collect();
        let mut eval = constant_scores(HashMap::from([("same", 0.4)]));
        let out = ape_search(&chat, "meta", &[], &validation, &mut eval, &ApeConfig::default()).unwrap();
        assert!(out.trace.iterations.iter().all(|it| it.best == out.trace.iterations[0].best));
    }

    #[test]
    fn provider_error_keeps_trace() {
        let mut replies: Vec<std::result::Result<String, ProviderError>> =
            (0..9).map(|i| Ok(format!("p{i}"))).collect();
        replies.push(Err(ProviderError::Timeout));
        let chat = MockChat::scripted(replies);
        let validation: Vec<usize> = (0..10).collect();
        let mut eval = |_: &str, _: &usize| Ok(0.5);
        let err = ape_search(&chat, "meta", &[], &validation, &mut eval, &ApeConfig::default()).unwrap_err();
        assert_eq!(err.trace.iterations.len(), 1);
        assert!(matches!(err.error, Error::Provider(ProviderError::Timeout)));
    }

    #[test]
    fn opro_counts_pairs_and_rejects_near_duplicates() {
        let counter = AtomicUsize::new(0);
        let chat = MockChat::from_fn(move |_| {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            // second reply repeats the first and must be rejected
            Ok(if n == 1 { "alpha 0".to_string() } else { format!("alpha {n}") })
        });
        let validation: Vec<usize> = (0..60).collect();
        let mut eval = |p: &str, _: &usize| Ok(p.len() as f64 / 100.0);
        let cfg = OproConfig { max_iterations: 5, ..OproConfig::default() };
        let out = opro_search(&chat, "meta", &validation, &mut eval, &cfg).unwrap();
        assert_eq!(out.trace.seeds.len(), 3);
        assert_eq!(out.trace.seeds[1].text, "alpha 2");
        let requests = chat.requests();
        let iteration_requests = &requests[4..];
        for (k, r) in iteration_requests.iter().enumerate() {
            assert_eq!(r.user.matches("\nscore: ").count(), k + 1 + 2);
        }
        assert_eq!(out.trace.history.len(), 8);
    }

    #[test]
    fn opro_gives_up_on_indistinct_seeds() {
        let chat = MockChat::constant("always the same words");
        let validation = vec![0usize];
        let mut eval = |_: &str, _: &usize| Ok(0.0);
        let err = opro_search(&chat, "meta", &validation, &mut eval, &OproConfig::default()).unwrap_err();
        assert!(matches!(err.error, Error::IndistinctSeeds { needed: 3, requests: 15 }));
    }

    #[test]
    fn validation_reserve_is_seeded() {
        let data: Vec<u32> = (0..1500).collect();
        let (v, rest) = reserve_validation(&data, VALIDATION_RESERVE, 1).unwrap();
        assert_eq!((v.len(), rest.len()), (1000, 500));
        assert_eq!(v, reserve_validation(&data, VALIDATION_RESERVE, 1).unwrap().0);
        assert!(reserve_validation(&data[..10], VALIDATION_RESERVE, 1).is_err());
    }

    #[test]
    fn trace_json_round_trip() {
        let chat = MockChat::constant("x");
        let mut eval = |_: &str, _: &usize| Ok(0.25);
        let cfg = ApeConfig { iterations: 2, candidates_per_iteration: 2, ..ApeConfig::default() };
        let out = ape_search(&chat, "meta", &["seed".into()], &[1usize], &mut eval, &cfg).unwrap();
        let back = SearchTrace::from_json(&out.trace.to_json().unwrap()).unwrap();
        assert_eq!(back, out.trace);
        assert_eq!(out.trace.seeds[0].status, CandidateStatus::Best);
    }
}
