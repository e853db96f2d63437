//! Hand-crafted voting ensembles over per-question n-best lists.
//!
//! Every method normalizes hypothesis texts, accumulates a per-hypothesis
//! weight into the normalized answer's bucket, and returns the bucket with
//! the largest total. Ties on total weight are broken by summed raw
//! probability, then by the lexicographically smallest normalized answer.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::normalize_answer;
use crate::prediction_io::{Hypothesis, ModelPredictions};

/// Relative tolerance under which two accumulated weights count as tied.
pub const TIE_EPS: f64 = 1e-9;

pub fn approx_tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_EPS * a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum VotingKind {
    /// #1
    Plurality1,
    /// #2
    WeightedProb1,
    /// #3
    ZScore1,
    /// #3′
    MedianScore1,
    /// #4
    PluralityN,
    /// #5
    LinearRankN,
    /// #6
    FibonacciRankN,
    /// #7
    WeightedProbN,
    /// #8
    ZScoreN,
    /// #8′
    MedianScoreN,
}

impl VotingKind {
    pub const ALL: [VotingKind; 10] = [
        VotingKind::Plurality1,
        VotingKind::WeightedProb1,
        VotingKind::ZScore1,
        VotingKind::MedianScore1,
        VotingKind::PluralityN,
        VotingKind::LinearRankN,
        VotingKind::FibonacciRankN,
        VotingKind::WeightedProbN,
        VotingKind::ZScoreN,
        VotingKind::MedianScoreN,
    ];

    pub fn is_top1(self) -> bool {
        matches!(
            self,
            VotingKind::Plurality1 | VotingKind::WeightedProb1 | VotingKind::ZScore1 | VotingKind::MedianScore1
        )
    }

    /// Short id used on the command line: 1, 2, 3, 3p, 4 … 8, 8p.
    pub fn code(self) -> &'static str {
        match self {
            VotingKind::Plurality1 => "1",
            VotingKind::WeightedProb1 => "2",
            VotingKind::ZScore1 => "3",
            VotingKind::MedianScore1 => "3p",
            VotingKind::PluralityN => "4",
            VotingKind::LinearRankN => "5",
            VotingKind::FibonacciRankN => "6",
            VotingKind::WeightedProbN => "7",
            VotingKind::ZScoreN => "8",
            VotingKind::MedianScoreN => "8p",
        }
    }
}

impl FromStr for VotingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VotingKind::ALL
            .into_iter()
            .find(|k| k.code() == s)
            .ok_or_else(|| Error::validation(format!("unknown voting method {s:?} (expected 1,2,3,3p,4,5,6,7,8,8p)")))
    }
}

impl fmt::Display for VotingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.code().replace('p', "′"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VotingMethod {
    pub kind: VotingKind,
    pub n: usize,
}

impl VotingMethod {
    pub fn new(kind: VotingKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("voting n must be at least 1"));
        }
        Ok(Self { kind, n })
    }

    /// Hypotheses considered per model.
    pub fn depth(&self) -> usize {
        if self.kind.is_top1() {
            1
        } else {
            self.n
        }
    }
}

/// Fibonacci numbers with Fib(1) = Fib(2) = 1.
pub fn fibonacci(k: usize) -> f64 {
    let (mut a, mut b) = (0.0f64, 1.0f64);
    for _ in 0..k {
        (a, b) = (b, a + b);
    }
    a
}

struct ListStats {
    mean: f64,
    std: f64,
    median: f64,
}

fn list_stats(list: &[Hypothesis]) -> ListStats {
    let k = list.len() as f64;
    let mean = list.iter().map(|h| h.probability).sum::<f64>() / k;
    let var = list.iter().map(|h| (h.probability - mean).powi(2)).sum::<f64>() / k;
    let mut probs: Vec<f64> = list.iter().map(|h| h.probability).collect();
    probs.sort_by(f64::total_cmp);
    let mid = probs.len() / 2;
    let median = if probs.len() % 2 == 1 {
        probs[mid]
    } else {
        (probs[mid - 1] + probs[mid]) / 2.0
    };
    // identical values can still leave rounding noise in the variance
    let flat = probs.first() == probs.last();
    ListStats {
        mean,
        std: if flat { 0.0 } else { var.sqrt() },
        median,
    }
}

/// Weight a hypothesis contributes under `method`. `list` is the model's full
/// n-best list for the question; statistics are taken over all of it.
/// Returns `None` for a z-score weight over a list with zero spread.
pub fn hypothesis_weight(method: &VotingMethod, hyp: &Hypothesis, list: &[Hypothesis]) -> Option<f64> {
    let p = hyp.probability;
    let depth = method.depth() as f64;
    let rank = hyp.rank as f64;
    match method.kind {
        VotingKind::Plurality1 | VotingKind::PluralityN => Some(1.0),
        VotingKind::WeightedProb1 | VotingKind::WeightedProbN => Some(p),
        VotingKind::ZScore1 | VotingKind::ZScoreN => {
            let s = list_stats(list);
            (s.std > 0.0).then(|| (p - s.mean) / s.std)
        }
        VotingKind::MedianScore1 | VotingKind::MedianScoreN => Some(p - list_stats(list).median),
        VotingKind::LinearRankN => Some(depth - rank + 1.0),
        VotingKind::FibonacciRankN => Some(fibonacci((method.n + 1).saturating_sub(hyp.rank))),
    }
}

/// Accumulated votes for one question.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VoteTally {
    /// Total weight per normalized answer.
    pub weights: BTreeMap<String, f64>,
    /// Summed raw probability per normalized answer (first tie-break).
    pub mass: BTreeMap<String, f64>,
    /// Display form per normalized answer: the highest-probability original text.
    pub surface: BTreeMap<String, String>,
    /// Set when every contributing weight was a degenerate z-score.
    pub degenerate: bool,
}

impl VoteTally {
    fn tally(method: &VotingMethod, lists: &[&[Hypothesis]]) -> Self {
        let mut tally = VoteTally::default();
        let mut best_p: HashMap<String, f64> = HashMap::new();
        let mut any_weight = false;
        for list in lists {
            for hyp in list.iter().take(method.depth()) {
                let key = normalize_answer(&hyp.text);
                let w = hypothesis_weight(method, hyp, list);
                any_weight |= w.is_some();
                *tally.weights.entry(key.clone()).or_default() += w.unwrap_or(0.0);
                *tally.mass.entry(key.clone()).or_default() += hyp.probability;
                let surface = if key.is_empty() { "" } else { hyp.text.as_str() };
                match best_p.get(&key) {
                    Some(&bp) if bp >= hyp.probability => {}
                    _ => {
                        best_p.insert(key.clone(), hyp.probability);
                        tally.surface.insert(key, surface.to_string());
                    }
                }
            }
        }
        tally.degenerate = !any_weight;
        tally
    }

    /// Normalized answer with the largest total weight, under the
    /// documented tie-break.
    pub fn winner(&self) -> Option<&str> {
        let max_w = self.weights.values().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<&String> = self
            .weights
            .iter()
            .filter(|(_, &w)| approx_tied(w, max_w))
            .map(|(k, _)| k)
            .collect();
        let max_mass = tied.iter().map(|k| self.mass[*k]).fold(f64::NEG_INFINITY, f64::max);
        // BTreeMap order makes the first survivor the lexicographically smallest
        tied.into_iter()
            .find(|k| approx_tied(self.mass[*k], max_mass))
            .map(String::as_str)
    }
}

/// Tally for one question, falling back to plurality when a z-score method
/// has nothing but degenerate weights.
pub fn tally_question(method: &VotingMethod, lists: &[&[Hypothesis]]) -> Result<VoteTally> {
    if lists.is_empty() || lists.iter().any(|l| l.is_empty()) {
        return Err(Error::validation("voting needs at least one non-empty n-best list"));
    }
    let tally = VoteTally::tally(method, lists);
    if tally.degenerate {
        let fallback = VotingMethod {
            kind: if method.kind.is_top1() {
                VotingKind::Plurality1
            } else {
                VotingKind::PluralityN
            },
            n: method.n,
        };
        let mut t = VoteTally::tally(&fallback, lists);
        t.degenerate = true;
        return Ok(t);
    }
    Ok(tally)
}

/// Final answer (display surface) for one question.
pub fn combine_question(method: &VotingMethod, lists: &[&[Hypothesis]]) -> Result<String> {
    let tally = tally_question(method, lists)?;
    let winner = tally.winner().expect("non-empty tally");
    Ok(tally.surface[winner].clone())
}

/// Runs [`combine_question`] over every qid.
pub fn vote_dataset(
    method: &VotingMethod,
    preds: &[ModelPredictions],
    qids: &[String],
) -> Result<BTreeMap<String, String>> {
    for qid in qids {
        for p in preds {
            if !p.per_question.contains_key(qid) {
                return Err(Error::validation(format!(
                    "model {:?} has no predictions for question {qid:?}",
                    p.model_id
                )));
            }
        }
    }
    qids.par_iter()
        .map(|qid| {
            let lists: Vec<&[Hypothesis]> = preds.iter().map(|p| p.per_question[qid].as_slice()).collect();
            combine_question(method, &lists).map(|a| (qid.clone(), a))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prediction_io::ranked;

    fn m(kind: VotingKind, n: usize) -> VotingMethod {
        VotingMethod::new(kind, n).unwrap()
    }

    #[test]
    fn weights() {
        let list = ranked([("a", 0.9), ("b", 0.1)]);
        assert_eq!(hypothesis_weight(&m(VotingKind::WeightedProb1, 1), &list[0], &list), Some(0.9));

        let list = ranked([("a", 0.8), ("b", 0.1), ("c", 0.1)]);
        let z = hypothesis_weight(&m(VotingKind::ZScore1, 1), &list[0], &list).unwrap();
        // mean 1/3, population sd sqrt(0.108889)
        let expected = (0.8 - 1.0 / 3.0) / (0.098f64 / 0.9).sqrt();
        assert!((z - expected).abs() < 1e-12);
        assert!((z - 1.41421).abs() < 1e-5);

        let med = hypothesis_weight(&m(VotingKind::MedianScore1, 1), &list[0], &list).unwrap();
        assert!((med - 0.7).abs() < 1e-12);
    }

    #[test]
    fn fibonacci_rank_weights() {
        let list = ranked([("a", 0.4), ("b", 0.3), ("c", 0.2), ("d", 0.1)]);
        let method = m(VotingKind::FibonacciRankN, 4);
        let w: Vec<f64> = list.iter().map(|h| hypothesis_weight(&method, h, &list).unwrap()).collect();
        assert_eq!(w, vec![3.0, 2.0, 1.0, 1.0]);
        let method = m(VotingKind::LinearRankN, 4);
        let w: Vec<f64> = list.iter().map(|h| hypothesis_weight(&method, h, &list).unwrap()).collect();
        assert_eq!(w, vec![4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn zero_spread_is_degenerate() {
        let list = ranked([("a", 0.5), ("b", 0.5)]);
        assert_eq!(hypothesis_weight(&m(VotingKind::ZScore1, 1), &list[0], &list), None);
        // the float mean of five copies of this value is not the value itself
        let p = 0.9969851630810737;
        let list = ranked((0..5).map(|i| (format!("h{i}"), p)));
        assert_eq!(hypothesis_weight(&m(VotingKind::ZScoreN, 5), &list[0], &list), None);
    }

    #[test]
    fn plurality_pools_normalized_answers() {
        let a = ranked([("paris.", 0.6)]);
        let b = ranked([("Paris", 0.5)]);
        let c = ranked([("rome", 0.9)]);
        let ans = combine_question(&m(VotingKind::Plurality1, 1), &[&a, &b, &c]).unwrap();
        // highest-probability surface among the pooled "paris" hypotheses
        assert_eq!(ans, "paris.");
        let ans = combine_question(&m(VotingKind::Plurality1, 1), &[&a, &b]).unwrap();
        assert_eq!(ans, "paris.");
    }

    #[test]
    fn weighted_prob_prefers_heavier_vote() {
        let a = ranked([("rome", 0.9)]);
        let b = ranked([("paris", 0.5)]);
        assert_eq!(combine_question(&m(VotingKind::WeightedProb1, 1), &[&a, &b]).unwrap(), "rome");
    }

    #[test]
    fn unanimous_single_hypothesis() {
        let a = ranked([("x", 0.3)]);
        for kind in VotingKind::ALL {
            assert_eq!(combine_question(&m(kind, 3), &[&a]).unwrap(), "x", "{kind}");
        }
    }

    #[test]
    fn degenerate_zscore_falls_back_to_plurality() {
        let a = ranked([("x", 0.5), ("y", 0.5)]);
        let b = ranked([("y", 0.2), ("x", 0.2)]);
        let c = ranked([("y", 0.1)]);
        let t = tally_question(&m(VotingKind::ZScoreN, 2), &[&a, &b, &c]).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.weights["y"], 3.0);
        assert_eq!(t.winner(), Some("y"));
    }

    #[test]
    fn tie_break_by_mass_then_lexicographic() {
        let a = ranked([("y", 0.6)]);
        let b = ranked([("x", 0.4)]);
        assert_eq!(combine_question(&m(VotingKind::Plurality1, 1), &[&a, &b]).unwrap(), "y");
        let a = ranked([("y", 0.5)]);
        let b = ranked([("x", 0.5)]);
        assert_eq!(combine_question(&m(VotingKind::Plurality1, 1), &[&a, &b]).unwrap(), "x");
    }

    #[test]
    fn no_answer_surfaces_empty() {
        let a = ranked([(" ", 0.9)]);
        let b = ranked([("", 0.8)]);
        assert_eq!(combine_question(&m(VotingKind::Plurality1, 1), &[&a, &b]).unwrap(), "");
    }

    #[test]
    fn method_codes_round_trip() {
        for kind in VotingKind::ALL {
            assert_eq!(kind.code().parse::<VotingKind>().unwrap(), kind);
        }
        assert!("9".parse::<VotingKind>().is_err());
        assert_eq!(VotingKind::MedianScoreN.to_string(), "#8′");
    }

    #[test]
    fn missing_question_names_model() {
        let p = ModelPredictions {
            model_id: "alpha".into(),
            per_question: BTreeMap::new(),
        };
        let err = vote_dataset(&m(VotingKind::Plurality1, 1), &[p], &["q7".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alpha") && msg.contains("q7"), "{msg}");
    }
}
