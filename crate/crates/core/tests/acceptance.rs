//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Run with `cargo test --test acceptance`.
//!
//! The live smoke check only runs when `OBFUSGATE_LIVE_CONFIG` names a JSON
//! file holding a `ProviderConfig` for a real chat endpoint.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Duration, Instant};

use obfusgate_core::attack::{baseline_draws, distribution_attack, frequencies, recover, RecoveryEvaluator};
use obfusgate_core::engine::{constrained_obfuscate_all, ObfuscationConfig};
use obfusgate_core::ldp::{build_sampling_plan, clique_decompose, clique_rng};
use obfusgate_core::metrics::{assemble_prompt, cosine, meteor, parse_output, rouge_l, rouge_n, Meteor, ParsedOutput, TaskKind};
use obfusgate_core::nonreusable::{obfuscate_text, segment_clauses, segment_clauses_with, TextPipelineConfig};
use obfusgate_core::optimizer::{ape_search, opro_search, ApeConfig, CandidateStatus, OproConfig};
use obfusgate_core::providers::{ChatProvider, MockChat, MockEmbedder, ProviderConfig};
use obfusgate_core::reusable::tabular::{
    build_tabular_schema, discretize_feature, Column, Discretization, FeatureKind, MultiObfuscationConfig, TabularConfig,
};
use obfusgate_core::reusable::{obfuscate_entity_set, PipelineConfig};
use obfusgate_core::scorer::{SimilarityScore, SimilarityScorer, TokenOverlapScorer};
use obfusgate_core::text::{build_adjacency_graph, edit_distance, is_adjacent, tokenize, AdjacencyConfig, AdjacencyGraph, TextUnit};
use obfusgate_core::Result as CoreResult;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("edit distance matches recursive oracle", edit_distance_oracle),
        ("adjacency threshold and rho monotonicity", adjacency),
        ("sampling plans and empirical draws", sampling_plans),
        ("clique decomposition", clique_decomposition),
        ("semantic constraint pass", constraint_pass),
        ("non-reusable pipeline", nonreusable_pipeline),
        ("tabular discretization and multi-obfuscation", tabular),
        ("overlap and cosine metrics", metrics),
        ("end-to-end mock sandwich", mock_sandwich),
        ("prompt optimizer", optimizer),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    match live_smoke() {
        None => println!("SKIP live smoke (OBFUSGATE_LIVE_CONFIG not set)"),
        Some(Ok(())) => println!("PASS live smoke"),
        Some(Err(why)) => {
            failed += 1;
            println!("FAIL live smoke: {why}");
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

fn within(limit: Duration, start: Instant, what: &str) -> Check {
    let took = start.elapsed();
    ensure!(took < limit, "{what} took {took:?}, limit {limit:?}");
    Ok(())
}

// ---------------------------------------------------------------- edit distance

fn recursive_distance(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(&d) = memo.get(&(a.len(), b.len())) {
        return d;
    }
    let d = (recursive_distance(&a[1..], b, memo) + 1)
        .min(recursive_distance(a, &b[1..], memo) + 1)
        .min(recursive_distance(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]));
    memo.insert((a.len(), b.len()), d);
    d
}

fn edit_distance_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let a: Vec<u8> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(0..4)).collect();
        let b: Vec<u8> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(0..4)).collect();
        let expected = recursive_distance(&a, &b, &mut HashMap::new());
        let ta: Vec<String> = a.iter().map(|t| format!("w{t}")).collect();
        let tb: Vec<String> = b.iter().map(|t| format!("w{t}")).collect();
        let got = edit_distance(&ta, &tb);
        ensure!(got == expected, "{a:?} vs {b:?}: got {got}, oracle {expected}");
    }
    within(Duration::from_secs(5), start, "1000 pairs")
}

// ---------------------------------------------------------------- adjacency

/// Threshold for rho = percent / 100 in integer arithmetic.
fn oracle_threshold(percent: usize, max_len: usize) -> usize {
    (percent * max_len).div_ceil(100)
}

fn synthetic_corpus(n: usize, seed: u64) -> Vec<TextUnit> {
    const VOCAB: [&str; 24] = [
        "organic", "lavender", "body", "lotion", "shampoo", "argan", "oil", "serum", "vitamin", "rose", "face", "mask",
        "clay", "gel", "aloe", "travel", "size", "pack", "of", "two", "hydrating", "night", "cream", "matte",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases: Vec<Vec<&str>> =
        (0..20).map(|_| (0..rng.gen_range(4..=12)).map(|_| *VOCAB.choose(&mut rng).unwrap()).collect()).collect();
    (0..n)
        .map(|i| {
            let mut words = bases[i % bases.len()].clone();
            for _ in 0..rng.gen_range(0..=3) {
                match rng.gen_range(0..3) {
                    0 if words.len() > 1 => {
                        let at = rng.gen_range(0..words.len());
                        words.remove(at);
                    }
                    1 => {
                        let at = rng.gen_range(0..=words.len());
                        words.insert(at, VOCAB.choose(&mut rng).unwrap());
                    }
                    _ => {
                        let at = rng.gen_range(0..words.len());
                        words[at] = VOCAB.choose(&mut rng).unwrap();
                    }
                }
            }
            TextUnit::new(format!("u{i:03}"), words.join(" "))
        })
        .collect()
}

fn adjacency() -> Check {
    let cfg = AdjacencyConfig::new(0.15).unwrap();
    ensure!(cfg.threshold(7) == 2, "ceil(0.15 * 7) should be 2, got {}", cfg.threshold(7));
    let base = TextUnit::new("a", "one two three four five six seven");
    let two_off = TextUnit::new("b", "one two three four five 6 7");
    let three_off = TextUnit::new("c", "one two three four 5 6 7");
    ensure!(is_adjacent(&base, &two_off, &cfg), "edit distance 2 at 7 tokens must be adjacent");
    ensure!(!is_adjacent(&base, &three_off, &cfg), "edit distance 3 at 7 tokens must not be adjacent");

    let corpus = synthetic_corpus(200, 11);
    let mut edge_sets = Vec::new();
    for percent in [10, 15, 20] {
        let cfg = AdjacencyConfig::new(percent as f64 / 100.0).unwrap();
        for max_len in 0..=200 {
            let (got, want) = (cfg.threshold(max_len), oracle_threshold(percent, max_len));
            ensure!(got == want, "rho {percent}% at {max_len} tokens: threshold {got}, oracle {want}");
        }
        let graph = build_adjacency_graph(&corpus, &cfg).map_err(|e| e.to_string())?;
        let mut oracle = BTreeSet::new();
        for i in 0..corpus.len() {
            for j in (i + 1)..corpus.len() {
                let (a, b) = (&corpus[i], &corpus[j]);
                let limit = oracle_threshold(percent, a.token_count().max(b.token_count()));
                let ed = recursive_distance_tokens(a.tokens(), b.tokens());
                if ed <= limit {
                    oracle.insert((a.id.clone(), b.id.clone()));
                }
            }
        }
        ensure!(graph.edge_ids() == oracle, "rho {percent}%: graph edges differ from the oracle");
        edge_sets.push(oracle);
    }
    ensure!(edge_sets[0].is_subset(&edge_sets[1]), "edges at rho 0.10 not contained in rho 0.15");
    ensure!(edge_sets[1].is_subset(&edge_sets[2]), "edges at rho 0.15 not contained in rho 0.20");
    ensure!(edge_sets[0].len() < edge_sets[2].len(), "corpus does not exercise the trade-off");
    Ok(())
}

fn recursive_distance_tokens(a: &[String], b: &[String]) -> usize {
    let mut ids: HashMap<String, u8> = HashMap::new();
    let mut code = |t: &String| {
        let next = ids.len() as u8;
        *ids.entry(t.clone()).or_insert(next)
    };
    let a: Vec<u8> = a.iter().map(&mut code).collect();
    let b: Vec<u8> = b.iter().map(&mut code).collect();
    recursive_distance(&a, &b, &mut HashMap::new())
}

// ---------------------------------------------------------------- sampling plans

fn members(k: usize) -> (Vec<String>, BTreeMap<String, String>) {
    let ids: Vec<String> = (0..k).map(|i| format!("m{i}")).collect();
    let obfs = ids.iter().map(|id| (id.clone(), format!("obf-{id}"))).collect();
    (ids, obfs)
}

fn sampling_plans() -> Check {
    let start = Instant::now();
    let (ids, obfs) = members(3);
    let plan = build_sampling_plan(&ids, &obfs, 2f64.ln()).map_err(|e| e.to_string())?;
    ensure!(plan.distributions["m0"] == vec![0.5, 0.25, 0.25], "ln 2 plan is {:?}", plan.distributions["m0"]);
    ensure!(plan.distributions["m2"] == vec![0.25, 0.25, 0.5], "ln 2 plan is {:?}", plan.distributions["m2"]);
    let plan = build_sampling_plan(&ids, &obfs, 0.0).map_err(|e| e.to_string())?;
    for dist in plan.distributions.values() {
        ensure!(dist.iter().all(|&p| p == 1.0 / 3.0), "epsilon 0 plan is not uniform: {dist:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let k = rng.gen_range(1..=10);
        let eps = rng.gen_range(0.0..=10.0);
        let (ids, obfs) = members(k);
        let plan = build_sampling_plan(&ids, &obfs, eps).map_err(|e| e.to_string())?;
        let mut worst: f64 = 1.0;
        for pi in plan.distributions.values() {
            ensure!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12, "k={k} eps={eps}: row sums to {}", pi.iter().sum::<f64>());
            for pj in plan.distributions.values() {
                for s in 0..k {
                    ensure!(pj[s] > 0.0 || pi[s] == 0.0, "k={k} eps={eps}: unbounded ratio");
                    if pj[s] > 0.0 {
                        worst = worst.max(pi[s] / pj[s]);
                    }
                }
            }
        }
        ensure!(worst <= eps.exp() + 1e-12, "k={k} eps={eps}: ratio {worst} > e^eps {}", eps.exp());
    }

    for (k, eps) in [(3, 2f64.ln()), (3, 10.0), (5, 1.0)] {
        let (ids, obfs) = members(k);
        let plan = build_sampling_plan(&ids, &obfs, eps).map_err(|e| e.to_string())?;
        let draws = 100_000;
        let mut counts = vec![0usize; k];
        let mut rng = clique_rng(17, k);
        for _ in 0..draws {
            counts[plan.draw_index("m0", &mut rng).unwrap()] += 1;
        }
        for (s, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            let want = plan.distributions["m0"][s];
            ensure!((freq - want).abs() <= 0.01, "k={k} eps={eps} outcome {s}: {freq} vs plan {want}");
        }
    }
    within(Duration::from_secs(30), start, "sampling plan checks")
}

// ---------------------------------------------------------------- cliques

fn brute_force_max_clique(n: usize, edges: &BTreeSet<(usize, usize)>) -> usize {
    (0u32..(1 << n))
        .filter(|mask| {
            (0..n).all(|i| {
                (i + 1..n).all(|j| mask & (1 << i) == 0 || mask & (1 << j) == 0 || edges.contains(&(i, j)))
            })
        })
        .map(|mask| mask.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

fn clique_decomposition() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for round in 0..100 {
        let n = rng.gen_range(1..=12);
        let density = rng.gen_range(0.1..0.9);
        let ids: Vec<String> = (0..n).map(|i| format!("n{i:02}")).collect();
        let mut graph = AdjacencyGraph::with_nodes(ids.clone(), 0.15).map_err(|e| e.to_string())?;
        let mut edges = BTreeSet::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(density) {
                    graph.add_edge(i, j);
                    edges.insert((i, j));
                }
            }
        }
        let partition = clique_decompose(&graph);
        let best = brute_force_max_clique(n, &edges);
        ensure!(
            partition.cliques[0].len() == best,
            "graph {round}: first clique has {} nodes, maximum is {best}",
            partition.cliques[0].len()
        );
        let mut seen = BTreeSet::new();
        for clique in &partition.cliques {
            for id in clique {
                ensure!(seen.insert(id.clone()), "graph {round}: {id} appears twice");
            }
            for a in clique {
                for b in clique {
                    let (x, y) = (ids.iter().position(|i| i == a).unwrap(), ids.iter().position(|i| i == b).unwrap());
                    ensure!(x == y || edges.contains(&(x.min(y), x.max(y))), "graph {round}: {a}-{b} is not an edge");
                }
            }
        }
        ensure!(seen.len() == n, "graph {round}: partition covers {} of {n} nodes", seen.len());
    }
    Ok(())
}

// ---------------------------------------------------------------- constraint pass

/// Scores looked up from a fixed table of unordered pairs; unknown pairs
/// score 0.
struct ScheduleScorer(HashMap<(String, String), f64>);

impl ScheduleScorer {
    fn set(&mut self, a: &str, b: &str, v: f64) {
        self.0.insert((a.into(), b.into()), v);
        self.0.insert((b.into(), a.into()), v);
    }
}

impl SimilarityScorer for ScheduleScorer {
    fn score(&self, a: &str, b: &str) -> CoreResult<SimilarityScore> {
        if a == b {
            return Ok(SimilarityScore::new(1.0));
        }
        Ok(SimilarityScore::new(self.0.get(&(a.to_string(), b.to_string())).copied().unwrap_or(0.0)))
    }
}

fn numbered_chat() -> MockChat {
    MockChat::from_fn(|req| Ok(format!("{}#{}", req.user, req.sample)))
}

fn triangle() -> (Vec<TextUnit>, AdjacencyGraph) {
    let units = vec![TextUnit::new("a", "alpha"), TextUnit::new("b", "beta"), TextUnit::new("c", "gamma")];
    let mut graph = AdjacencyGraph::with_nodes(["a", "b", "c"], 0.15).unwrap();
    graph.add_edge(0, 1);
    graph.add_edge(0, 2);
    graph.add_edge(1, 2);
    (units, graph)
}

/// The gamma candidates score `(vs alpha#0, vs beta#0)` per attempt.
fn schedule(gamma: &[(f64, f64)]) -> ScheduleScorer {
    let mut s = ScheduleScorer(HashMap::new());
    s.set("alpha", "beta", 0.5);
    s.set("alpha", "gamma", 0.6);
    s.set("beta", "gamma", 0.4);
    s.set("beta#0", "alpha#0", 0.9);
    for (k, &(x, y)) in gamma.iter().enumerate() {
        s.set(&format!("gamma#{k}"), "alpha#0", x);
        s.set(&format!("gamma#{k}"), "beta#0", y);
    }
    s
}

fn constraint_pass() -> Check {
    let cfg = ObfuscationConfig::default();
    ensure!(cfg.max_attempts == 10, "default attempt budget is {}", cfg.max_attempts);
    let eps = cfg.epsilon_sem;
    let (units, graph) = triangle();

    // Every gamma candidate fails one check; means differ.
    let failing: Vec<(f64, f64)> =
        (0..10).map(|k| (0.01 + 0.003 * ((k * 7) % 10) as f64, 0.5 * (k as f64 / 10.0) * 0.04 / 0.5)).collect();
    let scorer = schedule(&failing);
    let chat = numbered_chat();
    let records = constrained_obfuscate_all(&units, &graph, &cfg, &chat, &scorer).map_err(|e| e.to_string())?;
    let gamma_requests = chat.requests().iter().filter(|r| r.user == "gamma").count();
    ensure!(gamma_requests == 10, "fallback after {gamma_requests} requests instead of 10");
    let c = &records[2];
    ensure!(c.fallback && c.attempts == 10, "expected fallback at attempt 10, got {:?}/{}", c.fallback, c.attempts);
    let argmax = (0..10)
        .map(|k| (k, (failing[k].0 + failing[k].1) / 2.0))
        .fold((0, f64::NEG_INFINITY), |best, (k, m)| if m > best.1 { (k, m) } else { best })
        .0;
    ensure!(c.obfuscated == format!("gamma#{argmax}"), "fallback chose {}, argmax-mean is gamma#{argmax}", c.obfuscated);
    ensure!(!records[0].fallback && !records[1].fallback, "alpha and beta should be accepted");

    // Candidate 6 meets both bounds exactly; candidate 9 would pass too.
    let mut passing = failing.clone();
    passing[6] = (0.6 / eps, 0.4 / eps);
    passing[9] = (0.9, 0.9);
    let scorer = schedule(&passing);
    let chat = numbered_chat();
    let records = constrained_obfuscate_all(&units, &graph, &cfg, &chat, &scorer).map_err(|e| e.to_string())?;
    let c = &records[2];
    ensure!(!c.fallback && c.attempts == 7 && c.obfuscated == "gamma#6", "expected gamma#6 at attempt 7, got {c:?}");
    for record in &records {
        if record.fallback {
            continue;
        }
        for check in &record.pairwise_checks {
            let holds = check.obfuscated_sim >= check.original_sim / eps;
            ensure!(check.passed && holds, "accepted {} violates the bound against {}", record.unit_id, check.adjacent_id);
        }
    }

    // A pass on the last attempt is still an acceptance.
    let mut last = failing.clone();
    last[9] = (0.9, 0.9);
    let records = constrained_obfuscate_all(&units, &graph, &cfg, &numbered_chat(), &schedule(&last)).map_err(|e| e.to_string())?;
    ensure!(!records[2].fallback && records[2].attempts == 10, "pass at attempt 10 reported as {:?}", records[2]);

    // Whole pipeline is deterministic under a seed.
    let corpus = synthetic_corpus(60, 2);
    let run = || {
        let pcfg = PipelineConfig { seed: 99, ..PipelineConfig::default() };
        let chat = MockChat::codebook(4);
        obfuscate_entity_set(&corpus, &pcfg, &chat, &TokenOverlapScorer).map(|s| s.entries)
    };
    let (first, second) = (run().map_err(|e| e.to_string())?, run().map_err(|e| e.to_string())?);
    ensure!(first == second, "two runs with the same seed differ");
    Ok(())
}

// ---------------------------------------------------------------- non-reusable

fn synthetic_documents(n: usize, seed: u64) -> Vec<String> {
    const WORDS: [&str; 20] = [
        "the", "film", "plot", "was", "thin", "acting", "carried", "it", "music", "felt", "loud", "ending", "surprised",
        "everyone", "in", "cinema", "camera", "work", "looked", "great",
    ];
    const JOINERS: [&str; 6] = [", ", "; ", " and ", " but ", " so ", " or "];
    const ENDS: [&str; 4] = [".", "!", "?", "..."];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let sentences: Vec<String> = (0..rng.gen_range(1..=4))
                .map(|_| {
                    let mut s = String::new();
                    for part in 0..rng.gen_range(1..=4) {
                        if part > 0 {
                            s.push_str(JOINERS.choose(&mut rng).unwrap());
                        }
                        let words: Vec<&str> =
                            (0..rng.gen_range(1..=6)).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
                        s.push_str(&words.join(" "));
                    }
                    s.push_str(ENDS.choose(&mut rng).unwrap());
                    s
                })
                .collect();
            sentences.join(" ")
        })
        .collect()
}

fn multiset<I: IntoIterator<Item = String>>(tokens: I) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for t in tokens {
        *out.entry(t).or_insert(0) += 1;
    }
    out
}

fn nonreusable_pipeline() -> Check {
    let cfg = TextPipelineConfig::default();
    for (d, doc) in synthetic_documents(50, 8).iter().enumerate() {
        let source = multiset(tokenize(doc).tokens);
        let list = segment_clauses_with(doc, "", &cfg.segmenter);
        let chat = MockChat::echo();
        let out = obfuscate_text(doc, &TextPipelineConfig { shuffle_seed: d as u64, ..cfg.clone() }, &chat)
            .map_err(|e| e.to_string())?;
        let recombined =
            multiset(tokenize(&out.text).tokens.into_iter().chain(list.delimiters.iter().flat_map(|s| tokenize(s).tokens)));
        ensure!(recombined == source, "document {d}: token multiset changed");

        let requests = chat.requests();
        ensure!(requests.len() == list.len(), "document {d}: {} requests for {} clauses", requests.len(), list.len());
        let mut sent: Vec<&str> = requests.iter().map(|r| r.user.as_str()).collect();
        let mut expected: Vec<&str> = list.clauses.iter().map(String::as_str).collect();
        sent.sort_unstable();
        expected.sort_unstable();
        ensure!(sent == expected, "document {d}: requests are not exactly the clauses");
        for r in &requests {
            ensure!(segment_clauses(&r.user).len() == 1, "document {d}: request holds several clauses: {:?}", r.user);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- tabular

fn tabular() -> Check {
    let values: Vec<f64> = (1..=1000).map(f64::from).collect();
    match discretize_feature(&values, 100).map_err(|e| e.to_string())? {
        Discretization::Binned { bins } => {
            ensure!(bins.len() == 100, "{} bins", bins.len());
            for (i, bin) in bins.iter().enumerate() {
                let (lo, hi) = (10.0 * i as f64 + 1.0, 10.0 * i as f64 + 10.0);
                ensure!(bin.lo == lo && bin.hi == hi, "bin {i} is [{}, {}], expected [{lo}, {hi}]", bin.lo, bin.hi);
            }
        }
        other => return Err(format!("expected bins, got {other:?}")),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let n = rng.gen_range(1..3000);
        let spread: f64 = rng.gen_range(1.0..1e6);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0f64..spread).round()).collect();
        let d = discretize_feature(&values, 100).map_err(|e| e.to_string())?;
        ensure!(d.cardinality() <= 100, "{} levels from {n} values", d.cardinality());
    }

    let rows = 100_000;
    let ocfg = ObfuscationConfig::default();
    let multi = TabularConfig { multi: Some(MultiObfuscationConfig::default()), seed: 5, ..TabularConfig::default() };
    let colors: Vec<String> = (0..rows).map(|i| if i % 5 < 2 { "red" } else { "blue" }.to_string()).collect();
    let column = Column { name: "color".into(), kind: FeatureKind::Categorical, values: colors.clone() };
    let schema = build_tabular_schema(&[column], &multi, &ocfg, &MockChat::codebook(1), &MockEmbedder::new(1))
        .map_err(|e| e.to_string())?;
    let red_variants = schema.features[0].variants["red"].clone();
    ensure!(red_variants.len() == 4, "{} variants for red", red_variants.len());
    let obfuscated: Vec<String> = colors
        .iter()
        .enumerate()
        .map(|(i, c)| schema.obfuscate_row(i as u64, &[c]).map(|mut r| r.remove(0)))
        .collect::<CoreResult<_>>()
        .map_err(|e| e.to_string())?;
    let freq = frequencies(&obfuscated);
    for v in &red_variants {
        let f = freq.get(v).copied().unwrap_or(0.0);
        ensure!((f - 0.10).abs() <= 0.01, "red variant frequency {f}");
    }
    let public = frequencies(&colors);
    let attack = distribution_attack(&freq, &public, 0.05).map_err(|e| e.to_string())?;
    ensure!(
        red_variants.iter().all(|v| attack.mapping.get(v).is_none_or(|p| p != "red")),
        "attack mapped a red variant back to red"
    );

    let single = TabularConfig { multi: None, seed: 5, ..TabularConfig::default() };
    let sizes: Vec<String> = (0..rows).map(|i| if i % 100 < 67 { "small" } else { "large" }.to_string()).collect();
    let column = Column { name: "size".into(), kind: FeatureKind::Categorical, values: sizes.clone() };
    let schema = build_tabular_schema(&[column], &single, &ocfg, &MockChat::codebook(1), &MockEmbedder::new(1))
        .map_err(|e| e.to_string())?;
    let obf_small = schema.features[0].variants["small"][0].clone();
    let obfuscated: Vec<String> = sizes
        .iter()
        .enumerate()
        .map(|(i, c)| schema.obfuscate_row(i as u64, &[c]).map(|mut r| r.remove(0)))
        .collect::<CoreResult<_>>()
        .map_err(|e| e.to_string())?;
    let public: BTreeMap<String, f64> = [("small".to_string(), 0.70), ("large".to_string(), 0.30)].into();
    let attack = distribution_attack(&frequencies(&obfuscated), &public, 0.05).map_err(|e| e.to_string())?;
    ensure!(
        attack.mapping.get(&obf_small).map(String::as_str) == Some("small"),
        "single obfuscation at 67% was not mapped to the 70% value: {:?}",
        attack.mapping
    );
    Ok(())
}

// ---------------------------------------------------------------- metrics

fn close(got: f64, want: f64, what: &str) -> Check {
    ensure!((got - want).abs() <= 1e-9, "{what}: {got} vs {want}");
    Ok(())
}

fn metrics() -> Check {
    close(rouge_n("the cat sat", "the cat ran", 1), 2.0 / 3.0, "rouge-1")?;
    close(rouge_n("the cat sat", "the cat ran", 2), 0.5, "rouge-2")?;
    close(rouge_l("the cat sat", "the cat ran"), 2.0 / 3.0, "rouge-l")?;
    // P = 3/4, R = 3/5 for unigrams and the LCS "a c d".
    close(rouge_n("a b c d", "a c d e f", 1), 2.0 / 3.0, "rouge-1 uneven")?;
    close(rouge_n("a b c d", "a c d e f", 2), 2.0 / 7.0, "rouge-2 uneven")?;
    close(rouge_l("a b c d", "a c d e f"), 2.0 / 3.0, "rouge-l uneven")?;
    // Three matches in two chunks: 1 - 0.5 * (2/3)^3.
    close(meteor("sat the cat", "the cat sat"), 23.0 / 27.0, "meteor reordered")?;
    // Stem stage: "cats" ~ "cat", one chunk of 3, P = R = 1.
    close(meteor("the cats sat", "the cat sat"), 1.0 - 0.5 / 27.0, "meteor stemmed")?;
    // Two of three candidate tokens match in one chunk, reference has four.
    let (p, r) = (2.0 / 3.0, 2.0 / 4.0);
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    close(meteor("the cat barked", "the cat sat down"), fmean * (1.0 - 0.5 / 8.0), "meteor partial")?;
    close(cosine(&[1.0, 2.0, 2.0], &[2.0, 0.0, 1.0]).map_err(|e| e.to_string())?, 4.0 / (3.0 * 5f64.sqrt()), "cosine")?;

    let text = "organic lavender body lotion for dry skin and tired hands";
    for (name, v) in [("rouge-1", rouge_n(text, text, 1)), ("rouge-2", rouge_n(text, text, 2)), ("rouge-l", rouge_l(text, text))] {
        close(v, 1.0, &format!("{name} identity"))?;
    }
    let m = tokenize(text).len() as f64;
    close(meteor(text, text), 1.0 - 0.5 / m.powi(3), "meteor identity")?;
    ensure!(meteor(text, text) >= 0.99, "meteor identity below 0.99");
    close(cosine(&[0.3, -0.2, 0.9], &[0.3, -0.2, 0.9]).map_err(|e| e.to_string())?, 1.0, "cosine identity")?;

    let other = "argan oil shampoo";
    for (name, v) in [
        ("rouge-1", rouge_n(text, other, 1)),
        ("rouge-2", rouge_n(text, other, 2)),
        ("rouge-l", rouge_l(text, other)),
        ("meteor", Meteor::new().score(text, other)),
    ] {
        close(v, 0.0, &format!("{name} disjoint"))?;
    }
    close(cosine(&[1.0, 0.0], &[0.0, 1.0]).map_err(|e| e.to_string())?, 0.0, "cosine orthogonal")?;
    Ok(())
}

// ---------------------------------------------------------------- mock sandwich

fn mock_sandwich() -> Check {
    let corpus = synthetic_corpus(40, 9);
    let originals: Vec<String> = corpus.iter().map(|u| u.text.clone()).collect();
    let store = obfuscate_entity_set(&corpus, &PipelineConfig::default(), &MockChat::codebook(0), &TokenOverlapScorer)
        .map_err(|e| e.to_string())?;
    let obfuscated: Vec<String> = corpus.iter().map(|u| store.get(&u.id).unwrap().obfuscation.clone()).collect();
    let evaluator = RecoveryEvaluator::new(MockEmbedder::new(3));

    // Post-sampling may hand an entity a neighbour's obfuscation, so the
    // reference is the original that the drawn obfuscation came from.
    let inverse = MockChat::inverse(0);
    let mut references = Vec::new();
    let mut recovered = Vec::new();
    for obf in &obfuscated {
        references.push(decoded_source(&corpus, &store, obf));
        recovered.push(recover(&inverse, obf, "", "").map_err(|e| e.to_string())?);
    }
    let report = evaluator.evaluate("mock", &references, &recovered).map_err(|e| e.to_string())?;
    close(report.means.cosine, 1.0, "inverse attacker cosine")?;

    let junk: Vec<String> = originals.iter().map(|_| "zzz qqq xxx".to_string()).collect();
    let report = evaluator.evaluate("mock", &originals, &junk).map_err(|e| e.to_string())?;
    let m = report.means;
    for (name, v) in [("rouge-1", m.rouge_1), ("rouge-2", m.rouge_2), ("rouge-l", m.rouge_l), ("meteor", m.meteor)] {
        ensure!(v < 0.05, "constant attacker {name} mean {v}");
    }

    let first = evaluator.random_entities_baseline("mock", &originals, 5, 13).map_err(|e| e.to_string())?;
    let second = evaluator.random_entities_baseline("mock", &originals, 5, 13).map_err(|e| e.to_string())?;
    ensure!(first == second, "baseline differs between runs");
    let draws = baseline_draws(originals.len(), 5, 13).map_err(|e| e.to_string())?;
    let mut oracle_r1 = 0.0;
    for (i, others) in draws.iter().enumerate() {
        ensure!(others.len() == 5 && !others.contains(&i), "entity {i} draws {others:?}");
        let distinct: BTreeSet<_> = others.iter().collect();
        ensure!(distinct.len() == 5, "entity {i} has repeated draws");
        oracle_r1 += others.iter().map(|&j| unigram_f1(&originals[j], &originals[i])).sum::<f64>() / 5.0;
    }
    oracle_r1 /= originals.len() as f64;
    close(first.means.rouge_1, oracle_r1, "baseline rouge-1 recomputation")?;
    Ok(())
}

/// Original text whose first-pass obfuscation is `obf`.
fn decoded_source(corpus: &[TextUnit], store: &obfusgate_core::reusable::EntityStore, obf: &str) -> String {
    corpus
        .iter()
        .find(|c| store.get(&c.id).unwrap().variants.iter().any(|v| v == obf))
        .map(|c| c.text.clone())
        .unwrap_or_default()
}

/// Unigram F1 with clipped counts over lowercased word tokens.
fn unigram_f1(candidate: &str, reference: &str) -> f64 {
    let words = |s: &str| -> Vec<String> {
        s.split_whitespace().map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase()).filter(|w| !w.is_empty()).collect()
    };
    let (c, r) = (words(candidate), words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let (mc, mr) = (multiset(c.clone()), multiset(r.clone()));
    let overlap: usize = mc.iter().map(|(w, n)| (*n).min(mr.get(w).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let (p, rc) = (overlap as f64 / c.len() as f64, overlap as f64 / r.len() as f64);
    2.0 * p * rc / (p + rc)
}

// ---------------------------------------------------------------- optimizer

fn optimizer() -> Check {
    let start = Instant::now();
    let validation: Vec<usize> = (0..300).collect();
    // Each prompt's per-sample score comes from its text alone.
    let quality = |prompt: &str| -> f64 {
        match prompt {
            "seed" => 0.6,
            p if p.contains("good") => 0.8,
            _ => 0.2,
        }
    };
    let mut calls: HashMap<String, usize> = HashMap::new();
    let mut evaluator = |prompt: &str, _: &usize| -> CoreResult<f64> {
        *calls.entry(prompt.to_string()).or_insert(0) += 1;
        Ok(quality(prompt))
    };
    let replies = ["weak one", "good one", "weak two", "weak three"];
    let chat = MockChat::from_fn(move |req| Ok(replies[req.sample as usize % replies.len()].to_string()));
    let cfg = ApeConfig { iterations: 2, candidates_per_iteration: 4, checkpoint: 50, seed: 0 };
    let outcome = ape_search(&chat, "meta", &["seed".to_string()], &validation, &mut evaluator, &cfg)
        .map_err(|e| e.to_string())?;
    ensure!(outcome.best.text == "good one", "best prompt is {:?}", outcome.best.text);
    for it in &outcome.trace.iterations {
        for c in &it.candidates {
            if quality(&c.text) < 0.6 {
                ensure!(
                    c.status == CandidateStatus::EarlyStopped && c.evaluated == 100,
                    "losing candidate {:?} evaluated {} samples with status {:?}",
                    c.text,
                    c.evaluated,
                    c.status
                );
            } else {
                ensure!(c.evaluated == validation.len(), "winning candidate {:?} stopped early", c.text);
            }
        }
    }
    within(Duration::from_secs(10), start, "ape search")?;

    let start = Instant::now();
    let seeds = ["encode nouns as emoji", "swap every word for a symbol", "write the text backwards in glyphs"];
    let chat = MockChat::from_fn(move |req| {
        Ok(match req.user.contains("score:") {
            true => format!("variant number {} of the glyph rule", req.sample),
            false => seeds[req.sample as usize % seeds.len()].to_string(),
        })
    });
    let mut evaluator = |prompt: &str, i: &usize| -> CoreResult<f64> {
        let bump = prompt.bytes().map(usize::from).sum::<usize>() % 7;
        Ok(((i + bump) % 10) as f64 / 10.0)
    };
    let cfg = OproConfig { max_iterations: 12, ..OproConfig::default() };
    let outcome = opro_search(&chat, "meta", &validation, &mut evaluator, &cfg).map_err(|e| e.to_string())?;
    ensure!(outcome.trace.seeds.len() == 3, "{} seed prompts", outcome.trace.seeds.len());
    ensure!(
        outcome.trace.history.iter().take(3).map(|p| p.text.as_str()).eq(seeds.iter().copied()),
        "history does not begin with the seeds"
    );
    let mut previous = f64::NEG_INFINITY;
    for it in &outcome.trace.iterations {
        let score = it.best.as_ref().map(|b| b.score).ok_or("iteration without a best prompt")?;
        ensure!(score >= previous, "best score fell from {previous} to {score}");
        previous = score;
    }
    within(Duration::from_secs(10), start, "opro search")
}

// ---------------------------------------------------------------- live smoke

fn live_smoke() -> Option<Check> {
    let path = std::env::var("OBFUSGATE_LIVE_CONFIG").ok()?;
    Some(run_live(&path))
}

fn run_live(path: &str) -> Check {
    let raw = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    let cfg: ProviderConfig = serde_json::from_str(&raw).map_err(|e| format!("{path}: {e}"))?;
    let chat = cfg.build_chat().map_err(|e| e.to_string())?;
    let corpus = synthetic_corpus(20, 1);
    let store = obfuscate_entity_set(&corpus, &PipelineConfig::default(), &chat, &TokenOverlapScorer)
        .map_err(|e| e.to_string())?;
    ensure!(store.len() == 20, "{} entries", store.len());
    ensure!(store.entries.values().all(|e| !e.obfuscation.trim().is_empty()), "empty obfuscation");
    let labels = vec!["positive".to_string(), "negative".to_string()];
    let payload: Vec<String> = store.entries.values().take(3).map(|e| e.obfuscation.clone()).collect();
    let prompt = assemble_prompt("Classify the sentiment of these products.", &labels, &payload.join("\n"), TaskKind::Closed)
        .map_err(|e| e.to_string())?;
    let raw = chat.chat(&prompt.to_request()).map_err(|e| e.to_string())?;
    match parse_output(&raw, &prompt).map_err(|e| e.to_string())? {
        ParsedOutput::Label { label } => ensure!(labels.contains(&label), "label {label:?} outside the set"),
        other => return Err(format!("unexpected output {other:?}")),
    }
    Ok(())
}
