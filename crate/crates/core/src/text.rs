//! Tokenization, token-level edit distance and the text adjacency relation.
//!
//! Two texts are adjacent when their token edit distance is at most
//! `ceil(rho * max(len_a, len_b))`. The adjacency graph built from this
//! relation drives both the semantic constraint pass and clique sampling.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::Error;

/// Default adjacency threshold.
pub const DEFAULT_RHO: f64 = 0.15;

/// Case-folded word-level tokens of a string.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub source: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.tokens
    }
}

/// Splits `text` at Unicode word boundaries, drops whitespace segments and
/// lowercases the rest. Punctuation ends up as standalone tokens.
pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence {
        tokens: token_strs(text).map(|t| t.to_lowercase()).collect(),
        source: text.to_string(),
    }
}

/// Raw (not case-folded) token slices with their byte offsets in `text`.
pub fn token_spans(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split_word_bound_indices()
        .filter(|(_, seg)| !seg.chars().all(char::is_whitespace))
}

fn token_strs(text: &str) -> impl Iterator<Item = &str> {
    token_spans(text).map(|(_, s)| s)
}

/// True when a token carries no letters, digits or symbols, i.e. it is
/// pure punctuation.
pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty()
        && token.chars().all(|c| {
            c.is_ascii_punctuation()
                || matches!(
                    c,
                    '\u{2010}'..='\u{2027}'
                        | '\u{3001}'..='\u{3003}'
                        | '\u{FF01}' | '\u{FF0C}' | '\u{FF1A}' | '\u{FF1B}' | '\u{FF1F}'
                        | '¿' | '¡' | '«' | '»'
                )
        })
}

/// Levenshtein distance over tokens with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, lt) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, st) in short.iter().enumerate() {
            let above = row[j + 1];
            let cost = usize::from(lt != st);
            row[j + 1] = (diag + cost).min(above + 1).min(row[j] + 1);
            diag = above;
        }
    }
    row[short.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyConfig {
    pub rho: f64,
}

impl Default for AdjacencyConfig {
    fn default() -> Self {
        Self { rho: DEFAULT_RHO }
    }
}

impl AdjacencyConfig {
    pub fn new(rho: f64) -> Result<Self, Error> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidConfig(format!("rho must lie in [0, 1], got {rho}")));
        }
        Ok(Self { rho })
    }

    /// Maximum edit distance tolerated between texts whose longer side has
    /// `max_len` tokens.
    pub fn threshold(&self, max_len: usize) -> usize {
        // The product is rounded to 12 decimals first so that values such
        // as 0.15 * 20 = 3.0000000000000004 do not ceil past the exact result.
        let product = self.rho * max_len as f64;
        let rounded = (product * 1e12).round() / 1e12;
        rounded.ceil() as usize
    }
}

/// An atomic piece of private text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawUnit")]
pub struct TextUnit {
    pub id: String,
    pub text: String,
    #[serde(skip)]
    tokens: Vec<String>,
}

impl TextUnit {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text).tokens;
        Self { id: id.into(), text, tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Deserialize)]
struct RawUnit {
    id: String,
    text: String,
}

impl From<RawUnit> for TextUnit {
    fn from(raw: RawUnit) -> Self {
        TextUnit::new(raw.id, raw.text)
    }
}

pub fn is_adjacent(a: &TextUnit, b: &TextUnit, cfg: &AdjacencyConfig) -> bool {
    let threshold = cfg.threshold(a.token_count().max(b.token_count()));
    a.token_count().abs_diff(b.token_count()) <= threshold
        && edit_distance(a.tokens(), b.tokens()) <= threshold
}

/// Undirected graph over text units; node `i` is the i-th id in ascending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyGraph {
    nodes: Vec<String>,
    adjacency: Vec<BTreeSet<usize>>,
    pub rho: f64,
}

impl AdjacencyGraph {
    /// Graph with the given node ids (sorted internally) and no edges.
    pub fn with_nodes<I, S>(ids: I, rho: f64) -> Result<Self, Error>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut nodes: Vec<String> = ids.into_iter().map(Into::into).collect();
        nodes.sort();
        if let Some(dup) = nodes.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateId(dup[0].clone()));
        }
        let adjacency = vec![BTreeSet::new(); nodes.len()];
        Ok(Self { nodes, adjacency, rho })
    }

    pub fn add_edge(&mut self, a: usize, b: usize) {
        if a != b {
            self.adjacency[a].insert(b);
            self.adjacency[b].insert(a);
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn ids(&self) -> &[String] {
        &self.nodes
    }

    pub fn id(&self, index: usize) -> &str {
        &self.nodes[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.binary_search_by(|n| n.as_str().cmp(id)).ok()
    }

    pub fn neighbors(&self, index: usize) -> &BTreeSet<usize> {
        &self.adjacency[index]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].contains(&b)
    }

    /// Edges as `(lo, hi)` index pairs in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect()
    }

    /// Edges as id pairs, lexicographically smaller id first.
    pub fn edge_ids(&self) -> BTreeSet<(String, String)> {
        self.edges()
            .into_iter()
            .map(|(a, b)| (self.nodes[a].clone(), self.nodes[b].clone()))
            .collect()
    }
}

/// Pairwise adjacency over all units. Pairs whose token counts differ by
/// more than the threshold are skipped without computing edit distance.
pub fn build_adjacency_graph(units: &[TextUnit], cfg: &AdjacencyConfig) -> Result<AdjacencyGraph, Error> {
    let mut graph = AdjacencyGraph::with_nodes(units.iter().map(|u| u.id.clone()), cfg.rho)?;
    let mut ordered: Vec<&TextUnit> = units.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    for i in 0..ordered.len() {
        for j in (i + 1)..ordered.len() {
            if is_adjacent(ordered[i], ordered[j], cfg) {
                graph.add_edge(i, j);
            }
        }
    }
    Ok(graph)
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tokens.join(" "))
    }
}
