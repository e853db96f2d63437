//! Reading level-0 n-best files and SQuAD v2.0 ground truth, writing final
//! prediction files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::normalize_answer;

/// One ranked candidate answer. An empty (after normalization) text is the
/// no-answer hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    pub probability: f64,
    pub rank: usize,
}

impl Hypothesis {
    pub fn new(text: impl Into<String>, probability: f64, rank: usize) -> Self {
        Self {
            text: text.into(),
            probability,
            rank,
        }
    }

    pub fn is_no_answer(&self) -> bool {
        normalize_answer(&self.text).is_empty()
    }
}

/// Builds a ranked list from `(text, probability)` pairs already in rank order.
pub fn ranked<S: Into<String>>(items: impl IntoIterator<Item = (S, f64)>) -> Vec<Hypothesis> {
    items
        .into_iter()
        .enumerate()
        .map(|(i, (t, p))| Hypothesis::new(t, p, i + 1))
        .collect()
}

/// The n-best output of one level-0 model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPredictions {
    pub model_id: String,
    pub per_question: BTreeMap<String, Vec<Hypothesis>>,
}

impl ModelPredictions {
    pub fn get(&self, qid: &str) -> Option<&[Hypothesis]> {
        self.per_question.get(qid).map(Vec::as_slice)
    }

    /// Top-1 answer per question.
    pub fn top1(&self) -> BTreeMap<String, String> {
        self.per_question
            .iter()
            .map(|(q, list)| (q.clone(), list[0].text.clone()))
            .collect()
    }

    /// Parses an n-best JSON document. Lists are sorted by probability
    /// descending (stable) and re-ranked 1..k.
    pub fn from_json_str(model_id: impl Into<String>, input: &str) -> Result<Self> {
        let model_id = model_id.into();
        let raw: NbestDocument = serde_json::from_str(input)
            .map_err(|e| Error::json(format!("n-best file for {model_id}"), input, &e))?;

        let mut per_question = BTreeMap::new();
        for (qid, entries) in raw.0 {
            if per_question.contains_key(&qid) {
                return Err(Error::validation(format!("duplicate question id {qid:?}")));
            }
            if entries.is_empty() {
                return Err(Error::validation(format!(
                    "empty n-best list for question {qid:?}"
                )));
            }
            let mut list = Vec::with_capacity(entries.len());
            for entry in entries {
                let p = entry.probability;
                if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                    return Err(Error::validation(format!(
                        "probability {p} out of [0, 1] for question {qid:?}"
                    )));
                }
                list.push(Hypothesis::new(entry.text, p, 0));
            }
            // sort_by is stable: ties keep file order
            list.sort_by(|a, b| b.probability.total_cmp(&a.probability));
            for (i, h) in list.iter_mut().enumerate() {
                h.rank = i + 1;
            }
            per_question.insert(qid, list);
        }
        Ok(Self {
            model_id,
            per_question,
        })
    }

    pub fn to_json_string(&self) -> String {
        let doc: BTreeMap<&str, Vec<NbestEntryOut<'_>>> = self
            .per_question
            .iter()
            .map(|(q, list)| {
                let entries = list
                    .iter()
                    .map(|h| NbestEntryOut {
                        text: &h.text,
                        probability: h.probability,
                    })
                    .collect();
                (q.as_str(), entries)
            })
            .collect();
        let mut s = serde_json::to_string(&doc).expect("n-best serialization");
        s.push('\n');
        s
    }
}

#[derive(Deserialize)]
struct NbestEntry {
    text: String,
    probability: f64,
}

#[derive(Serialize)]
struct NbestEntryOut<'a> {
    text: &'a str,
    probability: f64,
}

/// Object entries in file order, keeping duplicates so they can be reported.
struct NbestDocument(Vec<(String, Vec<NbestEntry>)>);

impl<'de> Deserialize<'de> for NbestDocument {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = NbestDocument;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object mapping question ids to n-best arrays")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<NbestEntry>>()? {
                    out.push((k, v));
                }
                Ok(NbestDocument(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

/// Loads an n-best file; the model id is the file stem.
pub fn load_nbest(path: impl AsRef<Path>) -> Result<ModelPredictions> {
    let path = path.as_ref();
    let input = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ModelPredictions::from_json_str(model_id, &input).map_err(|e| match e {
        Error::Parse {
            offset, message, ..
        } => Error::Parse {
            context: path.display().to_string(),
            offset,
            message,
        },
        other => other,
    })
}

/// Acceptable answers for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub answers: Vec<String>,
    pub is_impossible: bool,
}

impl GroundTruth {
    pub fn answerable(answers: Vec<String>) -> Self {
        Self {
            answers,
            is_impossible: false,
        }
    }

    pub fn unanswerable() -> Self {
        Self {
            answers: Vec::new(),
            is_impossible: true,
        }
    }

    /// The truth set handed to scorers. Answers that normalize to nothing are
    /// dropped, and an empty set becomes the single no-answer truth `""`.
    pub fn truths(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .answers
            .iter()
            .map(String::as_str)
            .filter(|a| !normalize_answer(a).is_empty())
            .collect();
        if out.is_empty() {
            out.push("");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split_name: String,
    pub per_question: BTreeMap<String, GroundTruth>,
}

impl Dataset {
    pub fn qids(&self) -> Vec<String> {
        self.per_question.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.per_question.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_question.is_empty()
    }

    pub fn from_squad_str(split_name: impl Into<String>, input: &str) -> Result<Self> {
        let split_name = split_name.into();
        let doc: SquadDocument = serde_json::from_str(input)
            .map_err(|e| Error::json(format!("ground truth {split_name}"), input, &e))?;

        let mut per_question = BTreeMap::new();
        for article in doc.data {
            for paragraph in article.paragraphs {
                for qa in paragraph.qas {
                    let id = qa
                        .id
                        .ok_or_else(|| Error::validation("qa entry without \"id\""))?;
                    let mut seen = HashSet::new();
                    let mut answers: Vec<String> = qa
                        .answers
                        .into_iter()
                        .map(|a| a.text)
                        .filter(|t| seen.insert(t.clone()))
                        .collect();
                    let is_impossible = qa.is_impossible.unwrap_or(answers.is_empty());
                    if is_impossible {
                        answers.clear();
                    } else if answers.is_empty() {
                        return Err(Error::validation(format!(
                            "question {id:?} is answerable but lists no answers"
                        )));
                    }
                    if per_question.contains_key(&id) {
                        return Err(Error::validation(format!("duplicate question id {id:?}")));
                    }
                    per_question.insert(
                        id,
                        GroundTruth {
                            answers,
                            is_impossible,
                        },
                    );
                }
            }
        }
        Ok(Self {
            split_name,
            per_question,
        })
    }

    /// Serializes to a minimal SQuAD v2.0 document (one article, one
    /// paragraph per question, placeholder context).
    pub fn to_squad_string(&self) -> String {
        let data = vec![SquadArticleOut {
            title: &self.split_name,
            paragraphs: self
                .per_question
                .iter()
                .map(|(id, gt)| SquadParagraphOut {
                    context: "",
                    qas: vec![SquadQaOut {
                        id,
                        question: "",
                        answers: gt
                            .answers
                            .iter()
                            .map(|t| SquadAnswerOut {
                                text: t,
                                answer_start: 0,
                            })
                            .collect(),
                        is_impossible: gt.is_impossible,
                    }],
                })
                .collect(),
        }];
        let doc = SquadDocumentOut {
            version: "v2.0",
            data,
        };
        let mut s = serde_json::to_string(&doc).expect("dataset serialization");
        s.push('\n');
        s
    }
}

#[derive(Deserialize)]
struct SquadDocument {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    qas: Vec<SquadQa>,
}

#[derive(Deserialize)]
struct SquadQa {
    id: Option<String>,
    #[serde(default)]
    answers: Vec<SquadAnswer>,
    is_impossible: Option<bool>,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
}

#[derive(Serialize)]
struct SquadDocumentOut<'a> {
    version: &'a str,
    data: Vec<SquadArticleOut<'a>>,
}

#[derive(Serialize)]
struct SquadArticleOut<'a> {
    title: &'a str,
    paragraphs: Vec<SquadParagraphOut<'a>>,
}

#[derive(Serialize)]
struct SquadParagraphOut<'a> {
    context: &'a str,
    qas: Vec<SquadQaOut<'a>>,
}

#[derive(Serialize)]
struct SquadQaOut<'a> {
    id: &'a str,
    question: &'a str,
    answers: Vec<SquadAnswerOut<'a>>,
    is_impossible: bool,
}

#[derive(Serialize)]
struct SquadAnswerOut<'a> {
    text: &'a str,
    answer_start: usize,
}

/// Loads a SQuAD v2.0 file; the split name is the file stem.
pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let input = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::from_squad_str(split, &input)
}

pub fn predictions_to_string(answers: &BTreeMap<String, String>) -> String {
    let mut s = serde_json::to_string(answers).expect("predictions serialization");
    s.push('\n');
    s
}

/// Writes `{qid: answer}` with lexicographic key order and a trailing LF.
pub fn write_predictions(path: impl AsRef<Path>, answers: &BTreeMap<String, String>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, predictions_to_string(answers)).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let input = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&input).map_err(|e| Error::json(path.display().to_string(), &input, &e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(list: &[Hypothesis]) -> Vec<(&str, f64, usize)> {
        list.iter()
            .map(|h| (h.text.as_str(), h.probability, h.rank))
            .collect()
    }

    #[test]
    fn parses_and_ranks() {
        let m = ModelPredictions::from_json_str(
            "m",
            r#"{"q1":[{"text":"paris","probability":0.9},{"text":"","probability":0.1}]}"#,
        )
        .unwrap();
        assert_eq!(texts(m.get("q1").unwrap()), vec![("paris", 0.9, 1), ("", 0.1, 2)]);
    }

    #[test]
    fn resorts_by_probability() {
        let m = ModelPredictions::from_json_str(
            "m",
            r#"{"q1":[{"text":"a","probability":0.2},{"text":"b","probability":0.8}]}"#,
        )
        .unwrap();
        assert_eq!(texts(m.get("q1").unwrap()), vec![("b", 0.8, 1), ("a", 0.2, 2)]);
    }

    #[test]
    fn ties_keep_file_order() {
        let m = ModelPredictions::from_json_str(
            "m",
            r#"{"q":[{"text":"x","probability":0.5},{"text":"y","probability":0.5},{"text":"z","probability":0.6}]}"#,
        )
        .unwrap();
        assert_eq!(texts(m.get("q").unwrap()), vec![("z", 0.6, 1), ("x", 0.5, 2), ("y", 0.5, 3)]);
    }

    #[test]
    fn empty_list_rejected() {
        let err = ModelPredictions::from_json_str("m", r#"{"q1":[]}"#).unwrap_err();
        assert!(err.to_string().contains("empty n-best list"), "{err}");
    }

    #[test]
    fn bad_probability_names_question() {
        for p in ["-0.1", "1.5"] {
            let doc = format!(r#"{{"qx":[{{"text":"a","probability":{p}}}]}}"#);
            let err = ModelPredictions::from_json_str("m", &doc).unwrap_err();
            assert!(matches!(err, Error::Validation(_)));
            assert!(err.to_string().contains("qx"), "{err}");
        }
    }

    #[test]
    fn malformed_json_reports_offset() {
        let doc = r#"{"q1":[{"text":"a","probability":0.5}"#;
        match ModelPredictions::from_json_str("m", doc).unwrap_err() {
            // serde_json reports EOF at the last byte
            Error::Parse { offset, .. } => assert_eq!(offset, doc.len() - 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extra_fields_ignored() {
        let m = ModelPredictions::from_json_str(
            "m",
            r#"{"q":[{"text":"a","probability":0.5,"start_logit":1.2,"end_logit":0.3,"no answer probability":0.1}]}"#,
        )
        .unwrap();
        assert_eq!(m.get("q").unwrap()[0].text, "a");
    }

    #[test]
    fn duplicate_qid_rejected() {
        let doc = r#"{"q":[{"text":"a","probability":0.5}],"q":[{"text":"b","probability":0.5}]}"#;
        let err = ModelPredictions::from_json_str("m", doc).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    fn squad(qas: &str) -> String {
        format!(r#"{{"version":"v2.0","data":[{{"title":"t","paragraphs":[{{"context":"c","qas":[{qas}]}}]}}]}}"#)
    }

    #[test]
    fn ground_truth_answerable_and_not() {
        let ds = Dataset::from_squad_str(
            "dev",
            &squad(
                r#"{"id":"q1","question":"?","answers":[{"text":"T(n)","answer_start":3},{"text":"T(n)","answer_start":3}],"is_impossible":false},
                   {"id":"q2","question":"?","answers":[],"is_impossible":true}"#,
            ),
        )
        .unwrap();
        assert_eq!(ds.per_question["q1"], GroundTruth::answerable(vec!["T(n)".into()]));
        assert_eq!(ds.per_question["q2"], GroundTruth::unanswerable());
        assert_eq!(ds.per_question["q2"].truths(), vec![""]);
    }

    #[test]
    fn ground_truth_errors() {
        let dup = squad(
            r#"{"id":"q1","answers":[{"text":"a"}],"is_impossible":false},{"id":"q1","answers":[],"is_impossible":true}"#,
        );
        let err = Dataset::from_squad_str("d", &dup).unwrap_err();
        assert!(err.to_string().contains("q1"), "{err}");

        let missing = squad(r#"{"answers":[],"is_impossible":true}"#);
        let err = Dataset::from_squad_str("d", &missing).unwrap_err();
        assert!(err.to_string().contains("id"), "{err}");
    }

    #[test]
    fn squad_writer_round_trips() {
        let mut per_question = BTreeMap::new();
        per_question.insert("a".to_string(), GroundTruth::answerable(vec!["x y".into(), "x".into()]));
        per_question.insert("b".to_string(), GroundTruth::unanswerable());
        let ds = Dataset {
            split_name: "s".into(),
            per_question,
        };
        let back = Dataset::from_squad_str("s", &ds.to_squad_string()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn prediction_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let answers: BTreeMap<String, String> =
            [("b", "x"), ("a", "y"), ("c", "")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        write_predictions(&path, &answers).unwrap();
        let content = fs::read_to_string(&path).unwrap();
        assert_eq!(content, "{\"a\":\"y\",\"b\":\"x\",\"c\":\"\"}\n");
        assert_eq!(read_predictions(&path).unwrap(), answers);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = write_predictions("/nonexistent-dir/x/p.json", &BTreeMap::new()).unwrap_err();
        assert!(err.is_io());
    }
}
