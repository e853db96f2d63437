//! SQuAD v2.0 answer normalization and scoring, plus best-of-N evaluation.

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::prediction_io::{Dataset, GroundTruth, Hypothesis, ModelPredictions};

// ASCII punctuation (Python's string.punctuation) plus every Unicode P* category.
static PUNCTUATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[!-/:-@\[-`{-~\p{P}]").expect("punctuation regex"));
static ARTICLES: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").expect("article regex"));

/// Lowercase, strip punctuation, drop the articles "a"/"an"/"the", and
/// collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct = PUNCTUATION.replace_all(&lower, "");
    let no_articles = ARTICLES.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, truths: &[&str]) -> f64 {
    let pred = normalize_answer(prediction);
    if truths.iter().any(|t| normalize_answer(t) == pred) {
        1.0
    } else {
        0.0
    }
}

fn token_f1(pred: &str, truth: &str) -> f64 {
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    let truth_tokens: Vec<&str> = truth.split_whitespace().collect();
    if pred_tokens.is_empty() || truth_tokens.is_empty() {
        return if pred_tokens.len() == truth_tokens.len() {
            1.0
        } else {
            0.0
        };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &truth_tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred_tokens {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_tokens.len() as f64;
    let recall = overlap as f64 / truth_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-overlap F1 against the best-matching truth.
pub fn f1_score(prediction: &str, truths: &[&str]) -> f64 {
    let pred = normalize_answer(prediction);
    truths
        .iter()
        .map(|t| token_f1(&pred, &normalize_answer(t)))
        .fold(0.0, f64::max)
}

/// Whether the answer's emptiness agrees with the question's answerability.
pub fn answerability_correct(prediction: &str, gt: &GroundTruth) -> bool {
    normalize_answer(prediction).is_empty() == gt.is_impossible
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuestionScore {
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub na_accuracy: f64,
    pub count: usize,
    pub per_question: BTreeMap<String, QuestionScore>,
}

impl EvalReport {
    /// Aggregates per-question rows given in qid order.
    fn from_rows(rows: Vec<(String, QuestionScore, bool)>) -> Self {
        let count = rows.len();
        let denom = count.max(1) as f64;
        let (mut em, mut f1, mut na) = (0.0, 0.0, 0.0);
        for (_, s, na_ok) in &rows {
            em += s.em;
            f1 += s.f1;
            if *na_ok {
                na += 1.0;
            }
        }
        Self {
            em: 100.0 * em / denom,
            f1: 100.0 * f1 / denom,
            na_accuracy: 100.0 * na / denom,
            count,
            per_question: rows.into_iter().map(|(q, s, _)| (q, s)).collect(),
        }
    }
}

fn missing_error(what: &str, missing: &[&String]) -> Error {
    let shown: Vec<&str> = missing.iter().take(10).map(|s| s.as_str()).collect();
    let more = if missing.len() > 10 {
        format!(" (and {} more)", missing.len() - 10)
    } else {
        String::new()
    };
    Error::validation(format!(
        "{what} missing {} question id(s): {}{more}",
        missing.len(),
        shown.join(", ")
    ))
}

/// Scores `answers` against every question of `dataset`. Extra answers for
/// questions outside the dataset are ignored.
pub fn evaluate(answers: &BTreeMap<String, String>, dataset: &Dataset) -> Result<EvalReport> {
    let missing: Vec<&String> = dataset
        .per_question
        .keys()
        .filter(|q| !answers.contains_key(*q))
        .collect();
    if !missing.is_empty() {
        return Err(missing_error("predictions", &missing));
    }
    let rows: Vec<_> = dataset
        .per_question
        .par_iter()
        .map(|(qid, gt)| {
            let pred = &answers[qid];
            let truths = gt.truths();
            let score = QuestionScore {
                em: exact_match(pred, &truths),
                f1: f1_score(pred, &truths),
            };
            (qid.clone(), score, answerability_correct(pred, gt))
        })
        .collect();
    Ok(EvalReport::from_rows(rows))
}

/// Best score per metric over a pool of candidate answers.
fn best_of<'a>(candidates: impl Iterator<Item = &'a Hypothesis>, gt: &GroundTruth) -> (QuestionScore, bool) {
    let truths = gt.truths();
    let mut best = QuestionScore { em: 0.0, f1: 0.0 };
    let mut na_ok = false;
    for h in candidates {
        best.em = best.em.max(exact_match(&h.text, &truths));
        best.f1 = best.f1.max(f1_score(&h.text, &truths));
        na_ok |= answerability_correct(&h.text, gt);
    }
    (best, na_ok)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TopNRow {
    pub em: f64,
    pub f1: f64,
    pub na_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopNReport {
    pub per_n: BTreeMap<usize, TopNRow>,
}

fn check_coverage(preds: &ModelPredictions, dataset: &Dataset) -> Result<()> {
    let missing: Vec<&String> = dataset
        .per_question
        .keys()
        .filter(|q| !preds.per_question.contains_key(*q))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(missing_error(&format!("model {:?}", preds.model_id), &missing))
    }
}

/// Best-of-N scores of one model for each N in `ns` (ascending, each ≥ 1).
pub fn topn_eval(preds: &ModelPredictions, dataset: &Dataset, ns: &[usize]) -> Result<TopNReport> {
    if ns.iter().any(|&n| n == 0) || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation(format!(
            "N values must be strictly ascending and at least 1, got {ns:?}"
        )));
    }
    check_coverage(preds, dataset)?;
    let mut per_n = BTreeMap::new();
    for &n in ns {
        let rows: Vec<_> = dataset
            .per_question
            .par_iter()
            .map(|(qid, gt)| {
                let (s, na) = best_of(preds.per_question[qid].iter().take(n), gt);
                (qid.clone(), s, na)
            })
            .collect();
        let r = EvalReport::from_rows(rows);
        per_n.insert(
            n,
            TopNRow {
                em: r.em,
                f1: r.f1,
                na_accuracy: r.na_accuracy,
            },
        );
    }
    Ok(TopNReport { per_n })
}

/// Pooled oracle: the best answer among the top-`n` hypotheses of every model.
pub fn oracle_eval(preds: &[ModelPredictions], n: usize, dataset: &Dataset) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::validation("oracle N must be at least 1"));
    }
    for p in preds {
        check_coverage(p, dataset)?;
    }
    let rows: Vec<_> = dataset
        .per_question
        .par_iter()
        .map(|(qid, gt)| {
            let pool = preds.iter().flat_map(|p| p.per_question[qid].iter().take(n));
            let (s, na) = best_of(pool, gt);
            (qid.clone(), s, na)
        })
        .collect();
    Ok(EvalReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prediction_io::ranked;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The King's Speech!"), "kings speech");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("Enrique Pérez de Guzmán"), "enrique pérez de guzmán");
        assert_eq!(normalize_answer("  a  cat\tand   AN  apple "), "cat and apple");
        assert_eq!(normalize_answer("Dyrrachium—one"), "dyrrachiumone");
        assert_eq!(normalize_answer("«quoted»"), "quoted");
        assert_eq!(normalize_answer("theatre"), "theatre");
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("T(n)", &["T(n)"]), 1.0);
        assert_eq!(exact_match("", &[""]), 1.0);
        assert_eq!(exact_match("Pérez", &["Enrique Pérez de Guzmán"]), 0.0);
        assert_eq!(exact_match("paris", &["rome", "Paris."]), 1.0);
    }

    #[test]
    fn f1_examples() {
        assert!((f1_score("Pérez", &["Enrique Pérez de Guzmán"]) - 0.4).abs() < 1e-15);
        assert_eq!(f1_score("multiplication", &["multiplication"]), 1.0);
        assert_eq!(f1_score("", &["something"]), 0.0);
        assert_eq!(f1_score("something", &[""]), 0.0);
        // multiset overlap: "a b b" vs "b b c" -> overlap 2 of 3 each
        assert!((f1_score("x y y", &["y y z"]) - 2.0 / 3.0).abs() < 1e-15);
    }

    fn dataset(entries: &[(&str, Option<&str>)]) -> Dataset {
        Dataset {
            split_name: "t".into(),
            per_question: entries
                .iter()
                .map(|(q, a)| {
                    let gt = match a {
                        Some(a) => GroundTruth::answerable(vec![a.to_string()]),
                        None => GroundTruth::unanswerable(),
                    };
                    (q.to_string(), gt)
                })
                .collect(),
        }
    }

    fn answers(entries: &[(&str, &str)]) -> BTreeMap<String, String> {
        entries.iter().map(|(q, a)| (q.to_string(), a.to_string())).collect()
    }

    #[test]
    fn evaluate_examples() {
        let ds = dataset(&[("q", Some("paris"))]);
        let r = evaluate(&answers(&[("q", "paris")]), &ds).unwrap();
        assert_eq!((r.em, r.f1, r.na_accuracy), (100.0, 100.0, 100.0));

        let ds = dataset(&[("q1", Some("paris")), ("q2", Some("Enrique Pérez de Guzmán"))]);
        let r = evaluate(&answers(&[("q1", "paris"), ("q2", "Pérez")]), &ds).unwrap();
        assert!((r.em - 50.0).abs() < 1e-12);
        assert!((r.f1 - 70.0).abs() < 1e-12);

        let ds = dataset(&[("q", None)]);
        let r = evaluate(&answers(&[("q", "")]), &ds).unwrap();
        assert_eq!(r.per_question["q"], QuestionScore { em: 1.0, f1: 1.0 });
        assert_eq!(r.na_accuracy, 100.0);
    }

    #[test]
    fn evaluate_reports_missing_ids() {
        let entries: Vec<(String, Option<&str>)> = (0..12).map(|i| (format!("q{i:02}"), Some("x"))).collect();
        let refs: Vec<(&str, Option<&str>)> = entries.iter().map(|(q, a)| (q.as_str(), *a)).collect();
        let err = evaluate(&BTreeMap::new(), &dataset(&refs)).unwrap_err().to_string();
        assert!(err.contains("12 question id(s)"), "{err}");
        assert!(err.contains("q09") && !err.contains("q10,"), "{err}");
        assert!(err.contains("2 more"), "{err}");
    }

    fn model(id: &str, lists: &[(&str, &[&str])]) -> ModelPredictions {
        ModelPredictions {
            model_id: id.into(),
            per_question: lists
                .iter()
                .map(|(q, texts)| {
                    let k = texts.len();
                    let list = ranked(texts.iter().enumerate().map(|(i, t)| (*t, (k - i) as f64 / 10.0)));
                    (q.to_string(), list)
                })
                .collect(),
        }
    }

    #[test]
    fn topn_best_of_n() {
        let ds = dataset(&[("q", Some("x"))]);
        let m = model("m", &[("q", &["y", "x"])]);
        let r = topn_eval(&m, &ds, &[1, 2, 4]).unwrap();
        assert_eq!(r.per_n[&1].em, 0.0);
        assert_eq!(r.per_n[&2].em, 100.0);
        assert_eq!(r.per_n[&4].em, 100.0);
        assert!(topn_eval(&m, &ds, &[2, 1]).is_err());
        assert!(topn_eval(&m, &ds, &[0]).is_err());
    }

    #[test]
    fn topn_at_one_matches_evaluate() {
        let ds = dataset(&[("a", Some("x")), ("b", None), ("c", Some("p q"))]);
        let m = model("m", &[("a", &["x", ""]), ("b", &["z", ""]), ("c", &["q r", "p"])]);
        let r = topn_eval(&m, &ds, &[1]).unwrap().per_n[&1];
        let e = evaluate(&m.top1(), &ds).unwrap();
        assert_eq!((r.em, r.f1, r.na_accuracy), (e.em, e.f1, e.na_accuracy));
    }

    #[test]
    fn pooled_oracle() {
        let ds = dataset(&[("q", Some("x"))]);
        let a = model("a", &[("q", &["y"])]);
        let b = model("b", &[("q", &["x"])]);
        assert_eq!(oracle_eval(&[a.clone()], 1, &ds).unwrap().em, 0.0);
        assert_eq!(oracle_eval(&[a, b], 1, &ds).unwrap().em, 100.0);
    }
}
