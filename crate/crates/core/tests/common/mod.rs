//! Helpers shared by the integration test targets: random instance
//! generators and a brute-force voting tally written independently of the
//! library.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use stackqa::metrics::normalize_answer;
use stackqa::prediction_io::{Dataset, GroundTruth, Hypothesis, ModelPredictions};
use stackqa::voting::VotingKind;

/// Answer texts with deliberate normalization collisions.
pub const TEXT_POOL: &[&str] = &[
    "Paris",
    "paris.",
    "the Paris",
    "Paris, France",
    "France",
    "",
    "London",
    "an apple",
    "Apple!",
    "Rome",
    "the",
    "New York City",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Probabilities in descending order. Some draws are quantized or constant
/// so that exact ties and zero-spread lists show up regularly.
fn random_probs(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let style = rng.random_range(0..10);
    let mut ps: Vec<f64> = match style {
        0 => vec![rng.random_range(0.05..1.0); k],
        1 | 2 => (0..k).map(|_| rng.random_range(1..=5) as f64 / 10.0).collect(),
        _ => (0..k).map(|_| rng.random_range(0.001..1.0)).collect(),
    };
    ps.sort_by(|a, b| b.total_cmp(a));
    ps
}

pub fn random_list(rng: &mut ChaCha8Rng, max_hyps: usize) -> Vec<Hypothesis> {
    let k = rng.random_range(1..=max_hyps);
    random_probs(rng, k)
        .into_iter()
        .enumerate()
        .map(|(i, p)| Hypothesis::new(TEXT_POOL[rng.random_range(0..TEXT_POOL.len())], p, i + 1))
        .collect()
}

/// One question's n-best lists from up to `max_models` models.
pub fn random_lists(rng: &mut ChaCha8Rng, max_models: usize, max_hyps: usize) -> Vec<Vec<Hypothesis>> {
    let m = rng.random_range(1..=max_models);
    (0..m).map(|_| random_list(rng, max_hyps)).collect()
}

pub fn random_truth(rng: &mut ChaCha8Rng) -> GroundTruth {
    if rng.random_bool(0.3) {
        GroundTruth::unanswerable()
    } else {
        let k = rng.random_range(1..=3);
        let answers = (0..k)
            .map(|_| loop {
                let t = TEXT_POOL[rng.random_range(0..TEXT_POOL.len())];
                if !normalize_answer(t).is_empty() {
                    break t.to_string();
                }
            })
            .collect();
        GroundTruth::answerable(answers)
    }
}

/// A small random evaluation set: ground truth plus `models` prediction sets
/// covering every question.
pub fn random_instance(rng: &mut ChaCha8Rng, models: usize, max_hyps: usize) -> (Dataset, Vec<ModelPredictions>) {
    let q = rng.random_range(1..=12);
    let per_question: BTreeMap<String, GroundTruth> =
        (0..q).map(|i| (format!("q{i:02}"), random_truth(rng))).collect();
    let preds = (0..models)
        .map(|m| ModelPredictions {
            model_id: format!("m{m}"),
            per_question: per_question
                .keys()
                .map(|qid| (qid.clone(), random_list(rng, max_hyps)))
                .collect(),
        })
        .collect();
    let dataset = Dataset {
        split_name: "random".into(),
        per_question,
    };
    (dataset, preds)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn fib(k: usize) -> f64 {
    let mut seq = vec![0.0, 1.0];
    while seq.len() <= k {
        let next = seq[seq.len() - 1] + seq[seq.len() - 2];
        seq.push(next);
    }
    seq[k]
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Per-bucket totals from a linear scan: (normalized answer, weight, mass).
pub fn brute_force_tally(kind: VotingKind, n: usize, lists: &[Vec<Hypothesis>]) -> Vec<(String, f64, f64)> {
    let top1 = matches!(
        kind,
        VotingKind::Plurality1 | VotingKind::WeightedProb1 | VotingKind::ZScore1 | VotingKind::MedianScore1
    );
    let depth = if top1 { 1 } else { n };
    let zscore = matches!(kind, VotingKind::ZScore1 | VotingKind::ZScoreN);
    let all_flat = lists.iter().all(|l| {
        let ps: Vec<f64> = l.iter().map(|h| h.probability).collect();
        population_std(&ps) == 0.0
    });
    let plurality_fallback = zscore && all_flat;

    let mut buckets: Vec<(String, f64, f64)> = Vec::new();
    for list in lists {
        let ps: Vec<f64> = list.iter().map(|h| h.probability).collect();
        let (mu, sd, med) = (mean(&ps), population_std(&ps), median(&ps));
        for (i, h) in list.iter().enumerate().take(depth) {
            let rank = i + 1;
            let p = h.probability;
            let w = if plurality_fallback {
                1.0
            } else {
                match kind {
                    VotingKind::Plurality1 | VotingKind::PluralityN => 1.0,
                    VotingKind::WeightedProb1 | VotingKind::WeightedProbN => p,
                    VotingKind::ZScore1 | VotingKind::ZScoreN if sd == 0.0 => 0.0,
                    VotingKind::ZScore1 | VotingKind::ZScoreN => (p - mu) / sd,
                    VotingKind::MedianScore1 | VotingKind::MedianScoreN => p - med,
                    VotingKind::LinearRankN => (n + 1 - rank) as f64,
                    VotingKind::FibonacciRankN => fib(n + 1 - rank),
                }
            };
            let key = normalize_answer(&h.text);
            match buckets.iter_mut().find(|b| b.0 == key) {
                Some(b) => {
                    b.1 += w;
                    b.2 += p;
                }
                None => buckets.push((key, w, p)),
            }
        }
    }
    buckets
}

/// Normalized answers whose total weight ties the maximum.
pub fn top_weight_set(buckets: &[(String, f64, f64)]) -> Vec<String> {
    let best = buckets.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
    let mut keys: Vec<String> = buckets.iter().filter(|b| same(b.1, best)).map(|b| b.0.clone()).collect();
    keys.sort();
    keys
}

/// Winner by weight, then mass, then the smallest normalized answer.
pub fn brute_force_winner(kind: VotingKind, n: usize, lists: &[Vec<Hypothesis>]) -> String {
    let buckets = brute_force_tally(kind, n, lists);
    let best_w = buckets.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<&(String, f64, f64)> = buckets.iter().filter(|b| same(b.1, best_w)).collect();
    let best_m = tied.iter().map(|b| b.2).fold(f64::NEG_INFINITY, f64::max);
    tied.into_iter()
        .filter(|b| same(b.2, best_m))
        .map(|b| b.0.clone())
        .min()
        .expect("at least one bucket")
}

pub fn slices(lists: &[Vec<Hypothesis>]) -> Vec<&[Hypothesis]> {
    lists.iter().map(Vec::as_slice).collect()
}

/// Random printable text mixing ASCII, punctuation, articles and non-ASCII
/// letters.
pub fn fuzz_string(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &[
        "a", "an", "the", "The", "THE", "A", " ", "  ", "\t", "\n", ".", ",", "!", "?", "'", "\"", "-", "(", ")",
        "«", "»", "—", "…", "¿", "é", "Ü", "ß", "Σ", "ς", "İ", "文", "x", "y", "Paris", "apple", "theory", "an.", "a-",
        "\u{301}", "0", "42", "_", "@", "#",
    ];
    let len = rng.random_range(0..16);
    (0..len).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect()
}

/// A variant of `s` that normalizes identically: case changes, extra
/// punctuation, articles and whitespace.
pub fn equivalent_variant(rng: &mut ChaCha8Rng, s: &str) -> String {
    let mut out = String::new();
    if rng.random_bool(0.5) {
        out.push_str("The ");
    }
    for word in s.split_whitespace() {
        let w = if rng.random_bool(0.5) { word.to_uppercase() } else { word.to_string() };
        // uppercasing can change the letters themselves (ß → SS)
        let w = if normalize_answer(&w) == normalize_answer(word) { w } else { word.to_string() };
        out.push_str(&w);
        out.push_str(if rng.random_bool(0.3) { ", " } else { "  " });
    }
    if rng.random_bool(0.5) {
        out.push('.');
    }
    out
}
