//! Tabular features: quantile discretization, per-level obfuscation and the
//! multi-obfuscation defense against frequency matching.
//!
//! With multi-obfuscation each level gets 2 to 4 obfuscations whose raw
//! embedding cosine is pairwise at most `sim_cap`, and every row samples
//! one of them uniformly. A level present in 40% of rows with 4 variants
//! then shows up as four strings at about 10% each.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{generate_candidate, ObfuscationConfig};
use crate::providers::{ChatProvider, EmbeddingProvider};
use crate::scorer::{cosine, embed};
use crate::{Error, Result};

pub const DEFAULT_MAX_CARDINALITY: usize = 100;
pub const DEFAULT_SIM_CAP: f64 = 0.5;
pub const DEFAULT_MAX_REGEN: u32 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical,
    Numerical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
}

impl Bin {
    pub fn label(&self) -> String {
        format!("[{}, {}]", self.lo, self.hi)
    }
}

/// Levels of a numerical feature after discretization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Discretization {
    /// Few enough distinct values; each value is its own level.
    Identity { levels: Vec<f64> },
    /// Quantile bins. `bins[i]` covers values from its `lo` up to the next
    /// bin's `lo` (exclusive); the last bin is closed.
    Binned { bins: Vec<Bin> },
}

impl Discretization {
    pub fn cardinality(&self) -> usize {
        match self {
            Discretization::Identity { levels } => levels.len(),
            Discretization::Binned { bins } => bins.len(),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            Discretization::Identity { levels } => levels.iter().map(|v| v.to_string()).collect(),
            Discretization::Binned { bins } => bins.iter().map(Bin::label).collect(),
        }
    }

    /// Level index of `value`; values outside the observed range clamp to
    /// the first or last level.
    pub fn level_index(&self, value: f64) -> usize {
        match self {
            Discretization::Identity { levels } => {
                match levels.binary_search_by(|l| l.partial_cmp(&value).unwrap()) {
                    Ok(i) => i,
                    Err(i) => {
                        // nearest observed level
                        if i == 0 {
                            0
                        } else if i == levels.len() || value - levels[i - 1] <= levels[i] - value {
                            i - 1
                        } else {
                            i
                        }
                    }
                }
            }
            Discretization::Binned { bins } => bins.partition_point(|b| b.lo <= value).saturating_sub(1),
        }
    }

    pub fn label_of(&self, value: f64) -> String {
        self.labels().swap_remove(self.level_index(value))
    }
}

/// Parses a column of numeric strings.
pub fn parse_numeric<S: AsRef<str>>(values: &[S]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| {
            let raw = v.as_ref().trim();
            raw.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::NonNumeric(raw.to_string()))
        })
        .collect()
}

/// Identity when there are at most `max_cardinality` distinct values;
/// otherwise rank-based quantile bins with duplicate edges merged.
pub fn discretize_feature(values: &[f64], max_cardinality: usize) -> Result<Discretization> {
    if max_cardinality == 0 {
        return Err(Error::InvalidConfig("max_cardinality must be positive".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonNumeric(bad.to_string()));
    }
    if values.is_empty() {
        return Err(Error::EmptyInput("feature values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() <= max_cardinality {
        return Ok(Discretization::Identity { levels: distinct });
    }

    let n = sorted.len();
    let mut lows = vec![sorted[0]];
    for i in 1..max_cardinality {
        let cut = sorted[i * n / max_cardinality];
        if cut > *lows.last().unwrap() {
            lows.push(cut);
        }
    }
    let bins = lows
        .iter()
        .enumerate()
        .map(|(i, &lo)| {
            let hi = match lows.get(i + 1) {
                Some(&next) => *sorted[..sorted.partition_point(|&v| v < next)].last().unwrap(),
                None => sorted[n - 1],
            };
            Bin { lo, hi }
        })
        .collect();
    Ok(Discretization::Binned { bins })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiObfuscationConfig {
    pub variant_count: usize,
    pub sim_cap: f64,
    pub max_regen: u32,
    pub embedding_dim: usize,
}

impl Default for MultiObfuscationConfig {
    fn default() -> Self {
        Self {
            variant_count: 4,
            sim_cap: DEFAULT_SIM_CAP,
            max_regen: DEFAULT_MAX_REGEN,
            embedding_dim: crate::scorer::DEFAULT_EMBEDDING_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSet {
    pub value: String,
    pub variants: Vec<String>,
    pub max_pairwise_cosine: f64,
    pub rounds: u32,
    /// True when no round met the cap and the best-effort set was kept.
    pub flagged: bool,
}

/// Generates `variant_count` obfuscations of `value`, regenerating the
/// whole set until every pair has raw cosine at most `sim_cap`.
pub fn multi_obfuscate_value<C, E>(
    value: &str,
    mcfg: &MultiObfuscationConfig,
    ocfg: &ObfuscationConfig,
    chat: &C,
    embedder: &E,
) -> Result<VariantSet>
where
    C: ChatProvider + ?Sized,
    E: EmbeddingProvider + ?Sized,
{
    if !(2..=4).contains(&mcfg.variant_count) {
        return Err(Error::InvalidConfig(format!("variant_count must be in [2, 4], got {}", mcfg.variant_count)));
    }
    let rounds = mcfg.max_regen.max(1);
    let mut best: Option<(Vec<String>, f64, u32)> = None;
    for round in 0..rounds {
        let mut variants = Vec::with_capacity(mcfg.variant_count);
        for v in 0..mcfg.variant_count {
            let sample = round * mcfg.variant_count as u32 + v as u32;
            variants.push(generate_candidate(chat, ocfg, value, sample)?);
        }
        let vectors: Vec<Vec<f64>> =
            variants.iter().map(|t| embed(embedder, t, mcfg.embedding_dim)).collect::<Result<_>>()?;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..vectors.len() {
            for j in (i + 1)..vectors.len() {
                let sim = if variants[i] == variants[j] { 1.0 } else { cosine(&vectors[i], &vectors[j])? };
                worst = worst.max(sim);
            }
        }
        if worst <= mcfg.sim_cap {
            return Ok(VariantSet {
                value: value.to_string(),
                variants,
                max_pairwise_cosine: worst,
                rounds: round + 1,
                flagged: false,
            });
        }
        if best.as_ref().is_none_or(|(_, b, _)| worst < *b) {
            best = Some((variants, worst, round + 1));
        }
    }
    let (variants, worst, _) = best.expect("at least one round");
    log::warn!("variant cap {} not met after {rounds} rounds; best max cosine {worst:.3}", mcfg.sim_cap);
    Ok(VariantSet { value: value.to_string(), variants, max_pairwise_cosine: worst, rounds, flagged: true })
}

/// Seed for the draw of `feature` at `row`.
fn row_seed(seed: u64, feature: &str, row: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((feature.len() as u64).to_le_bytes());
    h.update(feature.as_bytes());
    h.update(row.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Uniform draw of one variant for one cell.
pub fn sample_variant<'a>(variants: &'a [String], seed: u64, feature: &str, row: u64) -> Result<&'a str> {
    match variants {
        [] => Err(Error::EmptyInput("variant list")),
        [only] => Ok(only),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(row_seed(seed, feature, row));
            Ok(&variants[rng.gen_range(0..variants.len())])
        }
    }
}

/// A raw input column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: FeatureKind,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub name: String,
    pub kind: FeatureKind,
    pub levels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discretization: Option<Discretization>,
    /// Obfuscations per level.
    pub variants: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub flagged_levels: Vec<String>,
}

impl FeatureSchema {
    /// Level label of a raw cell value.
    pub fn level_of(&self, raw: &str) -> Result<String> {
        match (&self.kind, &self.discretization) {
            (FeatureKind::Numerical, Some(d)) => {
                let v = parse_numeric(&[raw])?[0];
                Ok(d.label_of(v))
            }
            _ => Ok(raw.trim().to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularConfig {
    pub max_cardinality: usize,
    /// `None` gives one obfuscation per level.
    pub multi: Option<MultiObfuscationConfig>,
    pub seed: u64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self { max_cardinality: DEFAULT_MAX_CARDINALITY, multi: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub features: Vec<FeatureSchema>,
    pub seed: u64,
}

/// Discretizes numerical columns and obfuscates every distinct level.
pub fn build_tabular_schema<C, E>(
    columns: &[Column],
    tcfg: &TabularConfig,
    ocfg: &ObfuscationConfig,
    chat: &C,
    embedder: &E,
) -> Result<TabularSchema>
where
    C: ChatProvider + ?Sized,
    E: EmbeddingProvider + ?Sized,
{
    let mut features = Vec::with_capacity(columns.len());
    for column in columns {
        let (levels, discretization) = match column.kind {
            FeatureKind::Numerical => {
                let d = discretize_feature(&parse_numeric(&column.values)?, tcfg.max_cardinality)?;
                (d.labels(), Some(d))
            }
            FeatureKind::Categorical => {
                let distinct: BTreeSet<String> = column.values.iter().map(|v| v.trim().to_string()).collect();
                (distinct.into_iter().collect(), None)
            }
        };
        let mut variants = BTreeMap::new();
        let mut flagged_levels = Vec::new();
        for level in &levels {
            // The feature name gives the model context for the value.
            let text = format!("{}: {}", column.name, level);
            let set = match &tcfg.multi {
                Some(m) => multi_obfuscate_value(&text, m, ocfg, chat, embedder)?,
                None => VariantSet {
                    value: text.clone(),
                    variants: vec![generate_candidate(chat, ocfg, &text, 0)?],
                    max_pairwise_cosine: f64::NAN,
                    rounds: 1,
                    flagged: false,
                },
            };
            if set.flagged {
                flagged_levels.push(level.clone());
            }
            variants.insert(level.clone(), set.variants);
        }
        features.push(FeatureSchema {
            name: column.name.clone(),
            kind: column.kind,
            levels,
            discretization,
            variants,
            flagged_levels,
        });
    }
    Ok(TabularSchema { features, seed: tcfg.seed })
}

impl TabularSchema {
    pub fn feature(&self, name: &str) -> Option<&FeatureSchema> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Obfuscates one row given as raw cells in feature order.
    pub fn obfuscate_row<S: AsRef<str>>(&self, row_index: u64, cells: &[S]) -> Result<Vec<String>> {
        if cells.len() != self.features.len() {
            return Err(Error::LengthMismatch { left: cells.len(), right: self.features.len() });
        }
        self.features
            .iter()
            .zip(cells)
            .map(|(feature, cell)| {
                let level = feature.level_of(cell.as_ref())?;
                let variants = feature
                    .variants
                    .get(&level)
                    .ok_or_else(|| Error::UnknownEntities(vec![format!("{}={}", feature.name, level)]))?;
                Ok(sample_variant(variants, self.seed, &feature.name, row_index)?.to_string())
            })
            .collect()
    }
}
