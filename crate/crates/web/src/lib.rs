//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain text from the page's text areas and returns a
//! JSON string; errors come back as JS exceptions carrying the message.

use serde_json::{json, Value};
use stackqa::metrics::{exact_match, f1_score, normalize_answer};
use stackqa::prediction_io::{GroundTruth, Hypothesis};
use stackqa::stacking::{softmax, target_scores};
use stackqa::voting::{tally_question, VotingKind, VotingMethod};
use wasm_bindgen::prelude::*;

fn truths_from(text: &str, unanswerable: bool) -> GroundTruth {
    if unanswerable {
        return GroundTruth::unanswerable();
    }
    let answers: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if answers.is_empty() {
        GroundTruth::unanswerable()
    } else {
        GroundTruth::answerable(answers)
    }
}

/// Parses one n-best list: a line per hypothesis, `probability text`.
/// A line holding only a probability is the empty (no-answer) hypothesis.
pub fn parse_list(block: &str) -> Result<Vec<Hypothesis>, String> {
    let mut items = Vec::new();
    for (i, line) in block.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let (prob, text) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let probability: f64 = prob
            .parse()
            .map_err(|_| format!("line {:?}: expected a probability before the answer", line))?;
        if !(0.0..=1.0).contains(&probability) {
            return Err(format!("line {:?}: probability must lie in [0, 1]", line));
        }
        items.push((text.trim().to_string(), probability, i));
    }
    if items.is_empty() {
        return Err("empty n-best list".into());
    }
    // stable: equal probabilities keep their input order
    items.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(r, (text, p, _))| Hypothesis::new(text, p, r + 1))
        .collect())
}

/// Lists are separated by blank lines or `---` lines.
fn parse_lists(text: &str) -> Result<Vec<Vec<Hypothesis>>, String> {
    let normalized = text.replace("\r\n", "\n");
    let mut blocks = vec![String::new()];
    for line in normalized.lines() {
        if line.trim() == "---" || line.trim().is_empty() {
            if !blocks.last().expect("non-empty").trim().is_empty() {
                blocks.push(String::new());
            }
        } else {
            let b = blocks.last_mut().expect("non-empty");
            b.push_str(line);
            b.push('\n');
        }
    }
    blocks.retain(|b| !b.trim().is_empty());
    blocks.iter().map(|b| parse_list(b)).collect()
}

pub fn score_value(prediction: &str, truths: &str, unanswerable: bool) -> Value {
    let gt = truths_from(truths, unanswerable);
    let ts = gt.truths();
    json!({
        "normalized_prediction": normalize_answer(prediction),
        "normalized_truths": ts.iter().map(|t| normalize_answer(t)).collect::<Vec<_>>(),
        "em": exact_match(prediction, &ts),
        "f1": f1_score(prediction, &ts),
    })
}

pub fn vote_value(method: &str, n: usize, lists: &str) -> Result<Value, String> {
    let kind: VotingKind = method.parse().map_err(|e: stackqa::Error| e.to_string())?;
    let method = VotingMethod::new(kind, n).map_err(|e| e.to_string())?;
    let lists = parse_lists(lists)?;
    let refs: Vec<&[Hypothesis]> = lists.iter().map(Vec::as_slice).collect();
    let tally = tally_question(&method, &refs).map_err(|e| e.to_string())?;
    let winner = tally.winner().map(str::to_string);
    let mut rows: Vec<Value> = tally
        .weights
        .iter()
        .map(|(answer, w)| {
            json!({
                "answer": answer,
                "surface": tally.surface[answer],
                "weight": w,
                "mass": tally.mass[answer],
            })
        })
        .collect();
    rows.sort_by(|a, b| b["weight"].as_f64().unwrap_or(0.0).total_cmp(&a["weight"].as_f64().unwrap_or(0.0)));
    Ok(json!({
        "method": kind.to_string(),
        "depth": method.depth(),
        "winner": winner.as_ref().map(|w| &tally.surface[w]),
        "degenerate": tally.degenerate,
        "tally": rows,
    }))
}

pub fn targets_value(hypotheses: &str, truths: &str, unanswerable: bool) -> Result<Value, String> {
    let gt = truths_from(truths, unanswerable);
    let ts = gt.truths();
    let texts: Vec<&str> = hypotheses.lines().map(str::trim).collect();
    let texts: Vec<&str> = match texts.iter().rposition(|t| !t.is_empty()) {
        Some(last) => texts[..=last].to_vec(),
        None => return Err("enter at least one hypothesis".into()),
    };
    let na: Vec<bool> = texts.iter().map(|t| normalize_answer(t).is_empty()).collect();
    let f1s: Vec<f64> = texts.iter().map(|t| f1_score(t, &ts)).collect();
    let biased = target_scores(&f1s, true, &na, gt.is_impossible);
    Ok(json!({
        "hypotheses": texts,
        "no_answer": na,
        "f1": f1s,
        "plain": softmax(&target_scores(&f1s, false, &na, gt.is_impossible)),
        "biased_scores": biased,
        "biased": softmax(&biased),
    }))
}

/// EM/F1 of one answer against newline-separated truths.
#[wasm_bindgen]
pub fn score(prediction: &str, truths: &str, unanswerable: bool) -> String {
    score_value(prediction, truths, unanswerable).to_string()
}

/// Voting over blank-line-separated n-best lists (`probability text` lines).
#[wasm_bindgen]
pub fn vote(method: &str, n: usize, lists: &str) -> Result<String, JsError> {
    vote_value(method, n, lists).map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

/// Softmax-of-F1 targets (plain and biased) for a newline-separated list.
#[wasm_bindgen]
pub fn target_distribution(hypotheses: &str, truths: &str, unanswerable: bool) -> Result<String, JsError> {
    targets_value(hypotheses, truths, unanswerable)
        .map(|v| v.to_string())
        .map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_the_example_pair() {
        let v = score_value("Pérez", "Luis Pérez Díaz", false);
        assert_eq!(v["em"], 0.0);
        assert!((v["f1"].as_f64().unwrap() - 0.5).abs() < 1e-12);
        let v = score_value("", "", true);
        assert_eq!(v["em"], 1.0);
        assert_eq!(v["normalized_truths"][0], "");
    }

    #[test]
    fn parses_lists_and_votes() {
        let v = vote_value("1", 1, "0.6 paris.\n0.4 lyon\n\n0.5 Paris\n0.5 nice").unwrap();
        assert_eq!(v["winner"], "paris.");
        assert_eq!(v["tally"][0]["weight"], 2.0);

        let lists = parse_lists("0.2 b\n0.7 a\n0.1\n---\n0.9 a").unwrap();
        assert_eq!(lists.len(), 2);
        assert_eq!(lists[0][0].text, "a");
        assert_eq!(lists[0][2].rank, 3);
        assert!(lists[0][2].is_no_answer());

        assert!(vote_value("9", 1, "0.5 a").is_err());
        assert!(vote_value("1", 1, "abc").is_err());
        assert!(vote_value("1", 1, "1.5 a").is_err());
        assert!(vote_value("4", 0, "0.5 a").is_err());
    }

    #[test]
    fn target_variants() {
        let v = targets_value("\nfoo\n\nbar\n", "", true).unwrap();
        assert_eq!(v["no_answer"], json!([true, false, true, false]));
        let plain: Vec<f64> = serde_json::from_value(v["plain"].clone()).unwrap();
        let biased: Vec<f64> = serde_json::from_value(v["biased"].clone()).unwrap();
        assert!((plain.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((biased.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(biased[1] < plain[1]);
        assert_eq!(v["biased_scores"][1], -1.0);
        assert!(targets_value("\n\n", "x", false).is_err());
    }
}
