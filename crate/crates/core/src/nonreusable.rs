//! Clause-level obfuscation of free text.
//!
//! A document is cut into sentences at terminal punctuation, sentences are
//! cut further at commas, semicolons and coordinating conjunctions when both
//! sides keep at least `min_clause_tokens` words, the clauses are shuffled,
//! and each clause is sent to the obfuscation model as its own request.
//! The obfuscated clauses are joined back in their original order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{generate_candidate, ObfuscationConfig};
use crate::providers::ChatProvider;
use crate::text::{is_punctuation, token_spans};
use crate::{Error, Result};

pub const DEFAULT_MIN_CLAUSE_TOKENS: usize = 3;
pub const CLAUSE_SEPARATOR: &str = " ";

const CONJUNCTIONS: [&str; 7] = ["and", "but", "or", "nor", "for", "yet", "so"];

fn is_terminal(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| matches!(c, '.' | '!' | '?' | '。' | '！' | '？' | '…'))
}

fn is_delimiter(token: &str) -> bool {
    matches!(token, "," | ";" | "，" | "；" | "、")
}

fn is_conjunction(token: &str) -> bool {
    CONJUNCTIONS.contains(&token.to_lowercase().as_str())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClauseList {
    pub source_id: String,
    pub clauses: Vec<String>,
    /// Separator tokens consumed by clause splits, in source order.
    pub delimiters: Vec<String>,
    /// `clauses[permutation[i]]` is the i-th clause after shuffling.
    /// Identity until [`shuffle_clauses`] runs.
    pub permutation: Vec<usize>,
}

impl ClauseList {
    pub fn len(&self) -> usize {
        self.clauses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    /// Clauses in shuffled order.
    pub fn shuffled(&self) -> Vec<&str> {
        self.permutation.iter().map(|&i| self.clauses[i].as_str()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub min_clause_tokens: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { min_clause_tokens: DEFAULT_MIN_CLAUSE_TOKENS }
    }
}

struct Tok<'a> {
    start: usize,
    text: &'a str,
}

impl Tok<'_> {
    fn end(&self) -> usize {
        self.start + self.text.len()
    }
}

fn word_count(tokens: &[Tok<'_>]) -> usize {
    tokens.iter().filter(|t| !is_punctuation(t.text)).count()
}

pub fn segment_clauses(text: &str) -> ClauseList {
    segment_clauses_with(text, "", &SegmenterConfig::default())
}

pub fn segment_clauses_with(text: &str, source_id: &str, cfg: &SegmenterConfig) -> ClauseList {
    let tokens: Vec<Tok<'_>> = token_spans(text).map(|(start, text)| Tok { start, text }).collect();

    let mut sentences: Vec<&[Tok<'_>]> = Vec::new();
    let mut begin = 0;
    for i in 0..tokens.len() {
        let ends_run = is_terminal(tokens[i].text) && tokens.get(i + 1).is_none_or(|n| !is_terminal(n.text));
        if ends_run {
            sentences.push(&tokens[begin..=i]);
            begin = i + 1;
        }
    }
    if begin < tokens.len() {
        sentences.push(&tokens[begin..]);
    }

    let mut clauses = Vec::new();
    let mut delimiters = Vec::new();
    let min = cfg.min_clause_tokens;
    for sentence in sentences {
        let mut start = 0;
        for i in 0..sentence.len() {
            let tok = sentence[i].text;
            let (left, right) = if is_delimiter(tok) {
                (&sentence[start..i], &sentence[i + 1..])
            } else if is_conjunction(tok) {
                (&sentence[start..i], &sentence[i..])
            } else {
                continue;
            };
            if word_count(left) >= min && word_count(right) >= min {
                clauses.push(text[left[0].start..left[left.len() - 1].end()].to_string());
                if is_delimiter(tok) {
                    delimiters.push(tok.to_string());
                    start = i + 1;
                } else {
                    start = i;
                }
            }
        }
        let rest = &sentence[start..];
        if !rest.is_empty() {
            clauses.push(text[rest[0].start..rest[rest.len() - 1].end()].to_string());
        }
    }

    let permutation = (0..clauses.len()).collect();
    ClauseList { source_id: source_id.to_string(), clauses, delimiters, permutation }
}

/// Seeded uniform permutation of the clauses. The clause text itself is not
/// reordered; only `permutation` changes.
pub fn shuffle_clauses(mut list: ClauseList, seed: u64) -> ClauseList {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..list.clauses.len()).collect();
    order.shuffle(&mut rng);
    list.permutation = order;
    list
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct TextPipelineConfig {
    pub obfuscation: ObfuscationConfig,
    pub segmenter: SegmenterConfig,
    pub shuffle_seed: u64,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObfuscatedText {
    pub text: String,
    pub clause_count: usize,
}

/// Segment, shuffle, obfuscate each clause in its own request, and join the
/// results in original clause order.
pub fn obfuscate_text<C: ChatProvider + ?Sized>(
    text: &str,
    cfg: &TextPipelineConfig,
    chat: &C,
) -> Result<ObfuscatedText> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("text"));
    }
    let list = shuffle_clauses(segment_clauses_with(text, "", &cfg.segmenter), cfg.shuffle_seed);
    let mut obfuscated: Vec<Option<String>> = vec![None; list.len()];
    for &index in &list.permutation {
        obfuscated[index] = Some(generate_candidate(chat, &cfg.obfuscation, &list.clauses[index], 0)?);
    }
    let parts: Vec<String> = obfuscated.into_iter().map(|c| c.expect("every clause obfuscated")).collect();
    Ok(ObfuscatedText { text: parts.join(CLAUSE_SEPARATOR), clause_count: parts.len() })
}
