//! Surface-overlap metrics between a candidate and a reference text.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rust_stemmers::{Algorithm, Stemmer};

use crate::text::{is_punctuation, tokenize};
use crate::Result;

/// Lowercased word tokens with punctuation removed.
pub fn metric_tokens(text: &str) -> Vec<String> {
    tokenize(text).tokens.into_iter().filter(|t| !is_punctuation(t)).collect()
}

fn f1(overlap: usize, candidate_len: usize, reference_len: usize) -> f64 {
    if overlap == 0 || candidate_len == 0 || reference_len == 0 {
        return 0.0;
    }
    let p = overlap as f64 / candidate_len as f64;
    let r = overlap as f64 / reference_len as f64;
    2.0 * p * r / (p + r)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N F1 over clipped n-gram counts.
///
/// # Panics
/// If `n == 0`.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    let cg = ngrams(&c, n);
    let rg = ngrams(&r, n);
    let overlap: usize = cg.iter().map(|(g, &k)| k.min(rg.get(g).copied().unwrap_or(0))).sum();
    f1(overlap, cg.values().sum(), rg.values().sum())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over the longest common subsequence.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    f1(lcs_len(&c, &r), c.len(), r.len())
}

/// Word groups loaded from a tab-separated file, one synonym set per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynonymTable {
    groups: BTreeMap<String, BTreeSet<usize>>,
}

impl SynonymTable {
    pub fn from_tsv(raw: &str) -> Self {
        let mut groups: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        let lines = raw.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        for (set, line) in lines.enumerate() {
            for word in line.split('\t').map(|w| w.trim().to_lowercase()).filter(|w| !w.is_empty()) {
                groups.entry(word).or_default().insert(set);
            }
        }
        Self { groups }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_tsv(&std::fs::read_to_string(path)?))
    }

    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        match (self.groups.get(a), self.groups.get(b)) {
            (Some(x), Some(y)) => !x.is_disjoint(y),
            _ => false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// METEOR with exact, stem and (optional) synonym matching stages.
///
/// `Fmean = 10PR / (R + 9P)`, `penalty = 0.5 (chunks / matches)^3`,
/// `score = Fmean (1 - penalty)`.
pub struct Meteor {
    stemmer: Stemmer,
    synonyms: Option<SynonymTable>,
}

impl Default for Meteor {
    fn default() -> Self {
        Self::new()
    }
}

/// Alignment details behind a METEOR score.
#[derive(Clone, Debug, PartialEq)]
pub struct MeteorBreakdown {
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
    pub fmean: f64,
    pub penalty: f64,
    pub score: f64,
}

impl Meteor {
    pub fn new() -> Self {
        Self { stemmer: Stemmer::create(Algorithm::English), synonyms: None }
    }

    pub fn with_synonyms(mut self, table: SynonymTable) -> Self {
        self.synonyms = Some(table);
        self
    }

    pub fn score(&self, candidate: &str, reference: &str) -> f64 {
        self.breakdown(candidate, reference).score
    }

    pub fn breakdown(&self, candidate: &str, reference: &str) -> MeteorBreakdown {
        let c = metric_tokens(candidate);
        let r = metric_tokens(reference);
        let c_stems: Vec<String> = c.iter().map(|t| self.stemmer.stem(t).into_owned()).collect();
        let r_stems: Vec<String> = r.iter().map(|t| self.stemmer.stem(t).into_owned()).collect();

        // align[i] = reference position matched by candidate token i
        let mut align: Vec<Option<usize>> = vec![None; c.len()];
        let mut taken = vec![false; r.len()];
        let mut stage = |same: &dyn Fn(usize, usize) -> bool| {
            for i in 0..c.len() {
                if align[i].is_some() {
                    continue;
                }
                // continue the previous chunk when possible
                let follow = i.checked_sub(1).and_then(|p| align[p]).map(|j| j + 1);
                let pick = follow
                    .filter(|&j| j < r.len() && !taken[j] && same(i, j))
                    .or_else(|| (0..r.len()).find(|&j| !taken[j] && same(i, j)));
                if let Some(j) = pick {
                    align[i] = Some(j);
                    taken[j] = true;
                }
            }
        };
        stage(&|i, j| c[i] == r[j]);
        stage(&|i, j| c_stems[i] == r_stems[j]);
        if let Some(table) = &self.synonyms {
            stage(&|i, j| table.are_synonyms(&c[i], &r[j]));
        }

        let pairs: Vec<(usize, usize)> = align.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
        let matches = pairs.len();
        if matches == 0 {
            return MeteorBreakdown {
                matches: 0,
                chunks: 0,
                precision: 0.0,
                recall: 0.0,
                fmean: 0.0,
                penalty: 0.0,
                score: 0.0,
            };
        }
        let chunks = 1 + pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
        let precision = matches as f64 / c.len() as f64;
        let recall = matches as f64 / r.len() as f64;
        let fmean = 10.0 * precision * recall / (recall + 9.0 * precision);
        let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
        MeteorBreakdown { matches, chunks, precision, recall, fmean, penalty, score: fmean * (1.0 - penalty) }
    }
}

/// METEOR without a synonym table.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    Meteor::new().score(candidate, reference)
}
