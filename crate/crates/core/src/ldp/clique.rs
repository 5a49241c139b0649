use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::text::AdjacencyGraph;

/// Components up to this size are searched exactly.
pub const DEFAULT_MAX_EXACT_NODES: usize = 64;

/// A clique as ascending node indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliqueSearch {
    pub nodes: Vec<usize>,
    /// Set when a component was too large for the exact search.
    pub approximate: bool,
}

/// Maximum clique of the whole graph. Among cliques of maximum size the
/// lexicographically smallest index set wins.
pub fn max_clique(graph: &AdjacencyGraph) -> CliqueSearch {
    let alive: BTreeSet<usize> = (0..graph.node_count()).collect();
    max_clique_within(graph, &alive, DEFAULT_MAX_EXACT_NODES)
}

/// Maximum clique of the subgraph induced by `alive`.
pub fn max_clique_within(graph: &AdjacencyGraph, alive: &BTreeSet<usize>, max_exact: usize) -> CliqueSearch {
    let mut best: Vec<usize> = Vec::new();
    let mut approximate = false;
    for component in components(graph, alive) {
        if component.len() < best.len() {
            continue;
        }
        let found = if component.len() <= max_exact.min(64) {
            exact_in(graph, &component)
        } else {
            approximate = true;
            greedy_in(graph, &component)
        };
        if better(&found, &best) {
            best = found;
        }
    }
    CliqueSearch { nodes: best, approximate }
}

fn better(candidate: &[usize], best: &[usize]) -> bool {
    candidate.len() > best.len() || (candidate.len() == best.len() && candidate < best)
}

/// Connected components of the induced subgraph, each sorted ascending,
/// ordered by smallest member.
fn components(graph: &AdjacencyGraph, alive: &BTreeSet<usize>) -> Vec<Vec<usize>> {
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut out = Vec::new();
    for &start in alive {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &w in graph.neighbors(v) {
                if alive.contains(&w) && seen.insert(w) {
                    comp.push(w);
                    queue.push_back(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Bron-Kerbosch with pivoting over 64-bit masks. Branches are cut only
/// when they cannot reach the current best size, so every maximum clique
/// is visited and the tie-break is exact.
fn exact_in(graph: &AdjacencyGraph, component: &[usize]) -> Vec<usize> {
    let n = component.len();
    let masks: Vec<u64> = component
        .iter()
        .map(|&v| {
            component
                .iter()
                .enumerate()
                .filter(|&(_, &w)| graph.has_edge(v, w))
                .fold(0u64, |m, (i, _)| m | (1u64 << i))
        })
        .collect();
    let all = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut best: Vec<usize> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    expand(&masks, &mut current, all, 0, &mut best);
    best.iter().map(|&i| component[i]).collect()
}

fn expand(adj: &[u64], current: &mut Vec<usize>, mut candidates: u64, mut excluded: u64, best: &mut Vec<usize>) {
    if candidates == 0 && excluded == 0 {
        let mut clique = current.clone();
        clique.sort_unstable();
        if better(&clique, best) {
            *best = clique;
        }
        return;
    }
    if current.len() + (candidates.count_ones() as usize) < best.len() {
        return;
    }
    let pivot = bits(candidates | excluded)
        .max_by_key(|&u| ((candidates & adj[u]).count_ones(), std::cmp::Reverse(u)))
        .expect("non-empty");
    for v in bits(candidates & !adj[pivot]).collect::<Vec<_>>() {
        current.push(v);
        expand(adj, current, candidates & adj[v], excluded & adj[v], best);
        current.pop();
        candidates &= !(1u64 << v);
        excluded |= 1u64 << v;
    }
}

fn bits(mut mask: u64) -> impl Iterator<Item = usize> {
    std::iter::from_fn(move || {
        if mask == 0 {
            None
        } else {
            let i = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            Some(i)
        }
    })
}

/// Greedy maximal clique from every start node, keeping the best.
fn greedy_in(graph: &AdjacencyGraph, component: &[usize]) -> Vec<usize> {
    let members: BTreeSet<usize> = component.iter().copied().collect();
    let mut best: Vec<usize> = Vec::new();
    for &start in component {
        let mut clique = vec![start];
        let mut cand: BTreeSet<usize> =
            graph.neighbors(start).iter().copied().filter(|w| members.contains(w)).collect();
        while !cand.is_empty() {
            let next = *cand
                .iter()
                .max_by_key(|&&w| {
                    let deg = graph.neighbors(w).iter().filter(|x| cand.contains(x)).count();
                    (deg, std::cmp::Reverse(w))
                })
                .unwrap();
            clique.push(next);
            cand.retain(|&w| w != next && graph.has_edge(next, w));
        }
        clique.sort_unstable();
        if better(&clique, &best) {
            best = clique;
        }
    }
    best
}
