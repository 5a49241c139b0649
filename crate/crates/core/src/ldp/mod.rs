//! Clique decomposition and epsilon-LDP post-sampling of obfuscations.
//!
//! Adjacent texts are grouped by repeatedly extracting a maximum clique of
//! the adjacency graph. Within a clique of size `k` every member draws its
//! final obfuscation from the shared set of the members' obfuscations:
//! its own with probability `p = e^eps / (e^eps + k - 1)`, every other one
//! with `(1 - p) / (k - 1)`. The likelihood ratio between any two members
//! for any output is therefore at most `e^eps`.

mod clique;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::text::AdjacencyGraph;
use crate::{Error, Result};

pub use clique::{max_clique, max_clique_within, CliqueSearch, DEFAULT_MAX_EXACT_NODES};

/// Default post-sampling privacy parameter.
pub const DEFAULT_EPSILON_LDP: f64 = 10.0;

/// Cliques in extraction order; remaining singletons follow in id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliquePartition {
    pub cliques: Vec<Vec<String>>,
    pub approximate: bool,
}

impl CliquePartition {
    pub fn node_count(&self) -> usize {
        self.cliques.iter().map(Vec::len).sum()
    }
}

/// Extracts maximum cliques until the largest remaining one has a single
/// node, then emits every leftover node as its own clique.
pub fn clique_decompose(graph: &AdjacencyGraph) -> CliquePartition {
    clique_decompose_with(graph, DEFAULT_MAX_EXACT_NODES)
}

pub fn clique_decompose_with(graph: &AdjacencyGraph, max_exact: usize) -> CliquePartition {
    let mut alive: BTreeSet<usize> = (0..graph.node_count()).collect();
    let mut cliques = Vec::new();
    let mut approximate = false;
    while !alive.is_empty() {
        let found = max_clique_within(graph, &alive, max_exact);
        approximate |= found.approximate;
        if found.nodes.len() <= 1 {
            break;
        }
        for v in &found.nodes {
            alive.remove(v);
        }
        cliques.push(found.nodes.iter().map(|&v| graph.id(v).to_string()).collect());
    }
    cliques.extend(alive.into_iter().map(|v| vec![graph.id(v).to_string()]));
    CliquePartition { cliques, approximate }
}

/// Self and other probabilities for a clique of size `k`.
///
/// The other-probability is nudged up by single ulps when rounding would
/// otherwise push `p / q` above `e^eps`, so the bound holds in floating
/// point, not only in exact arithmetic.
pub fn clique_probabilities(k: usize, epsilon: f64) -> (f64, f64) {
    assert!(k >= 1, "clique must be non-empty");
    if k == 1 {
        return (1.0, 0.0);
    }
    let others = (k - 1) as f64;
    let shrink = (-epsilon).exp();
    let p = 1.0 / (1.0 + others * shrink);
    let mut q = shrink / (1.0 + others * shrink);
    let bound = epsilon.exp();
    while q > 0.0 && p / q > bound {
        q = f64::from_bits(q.to_bits() + 1);
    }
    (p, q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub clique: Vec<String>,
    /// Obfuscation of each clique member, in clique order.
    pub support: Vec<String>,
    pub epsilon_ldp: f64,
    /// Probability vector over `support` for each member.
    pub distributions: BTreeMap<String, Vec<f64>>,
}

impl SamplingPlan {
    /// Largest `P_i(s) / P_j(s)` over all members and outputs.
    pub fn max_ratio(&self) -> f64 {
        let dists: Vec<&Vec<f64>> = self.distributions.values().collect();
        let mut worst: f64 = 1.0;
        for pi in &dists {
            for pj in &dists {
                for (a, b) in pi.iter().zip(pj.iter()) {
                    if *b > 0.0 {
                        worst = worst.max(a / b);
                    } else if *a > 0.0 {
                        return f64::INFINITY;
                    }
                }
            }
        }
        worst
    }

    /// Index into `support` drawn for `member`.
    pub fn draw_index<R: Rng + ?Sized>(&self, member: &str, rng: &mut R) -> Option<usize> {
        let dist = self.distributions.get(member)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return Some(i);
            }
        }
        dist.iter().rposition(|&p| p > 0.0)
    }
}

pub fn build_sampling_plan<S: AsRef<str>>(
    clique: &[S],
    obfuscations: &BTreeMap<String, String>,
    epsilon_ldp: f64,
) -> Result<SamplingPlan> {
    if !(epsilon_ldp >= 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon_ldp must be >= 0, got {epsilon_ldp}")));
    }
    if clique.is_empty() {
        return Err(Error::EmptyInput("clique"));
    }
    let members: Vec<String> = clique.iter().map(|s| s.as_ref().to_string()).collect();
    let missing: Vec<String> = members.iter().filter(|m| !obfuscations.contains_key(*m)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::UnknownEntities(missing));
    }
    let support: Vec<String> = members.iter().map(|m| obfuscations[m].clone()).collect();
    let (p, q) = clique_probabilities(members.len(), epsilon_ldp);
    let distributions = members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let dist = (0..members.len()).map(|j| if i == j { p } else { q }).collect();
            (m.clone(), dist)
        })
        .collect();
    Ok(SamplingPlan { clique: members, support, epsilon_ldp, distributions })
}

/// Final obfuscation chosen for a node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalObfuscation {
    pub text: String,
    /// Node whose candidate was drawn.
    pub drawn_from: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostSampling {
    pub finals: BTreeMap<String, FinalObfuscation>,
    pub plans: Vec<SamplingPlan>,
}

/// Seeded RNG for clique `index`; every clique gets its own ChaCha stream.
pub fn clique_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws one final obfuscation per node. Draws are made once and reused for
/// every later prompt that mentions the node.
pub fn post_sample_all(
    partition: &CliquePartition,
    obfuscations: &BTreeMap<String, String>,
    epsilon_ldp: f64,
    seed: u64,
) -> Result<PostSampling> {
    let mut finals = BTreeMap::new();
    let mut plans = Vec::with_capacity(partition.cliques.len());
    for (index, clique) in partition.cliques.iter().enumerate() {
        let plan = build_sampling_plan(clique, obfuscations, epsilon_ldp)?;
        let mut rng = clique_rng(seed, index);
        for member in &plan.clique {
            let drawn = plan.draw_index(member, &mut rng).expect("member has a distribution");
            finals.insert(
                member.clone(),
                FinalObfuscation { text: plan.support[drawn].clone(), drawn_from: plan.clique[drawn].clone() },
            );
        }
        plans.push(plan);
    }
    Ok(PostSampling { finals, plans })
}
