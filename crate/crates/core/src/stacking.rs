//! Level-1 example construction: interleaved hypothesis slots, special-token
//! encoding and softmax-of-F1 target distributions.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{f1_score, normalize_answer};
use crate::prediction_io::{Dataset, GroundTruth, Hypothesis, ModelPredictions};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
/// Absent hypothesis (a model returned fewer than `n_per_model`).
pub const AP: u32 = 2;
/// The no-answer hypothesis.
pub const NA: u32 = 3;
const FIRST_PREFIX: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub models: Vec<String>,
    pub n_per_model: usize,
    pub tokens_per_hypothesis: usize,
    pub max_answer_length: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            models: vec!["model_a".into(), "model_b".into()],
            n_per_model: 8,
            tokens_per_hypothesis: 16,
            max_answer_length: 30,
        }
    }
}

impl StackConfig {
    /// Number of hypothesis slots H.
    pub fn num_slots(&self) -> usize {
        self.models.len() * self.n_per_model
    }

    /// Length of the encoded input vector, H × T.
    pub fn input_len(&self) -> usize {
        self.num_slots() * self.tokens_per_hypothesis
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.n_per_model == 0 || self.tokens_per_hypothesis < 2 {
            return Err(Error::config(
                "stack config needs ≥ 1 model, n_per_model ≥ 1 and tokens_per_hypothesis ≥ 2",
            ));
        }
        Ok(())
    }

    /// (model index, 0-based rank) held by slot `i`: ranks alternate across models.
    pub fn slot_source(&self, i: usize) -> (usize, usize) {
        let m = self.models.len();
        (i % m, i / m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HypothesisKind {
    Answer,
    NoAnswer,
    Padding,
}

/// Word-level vocabulary with a fixed block of reserved ids:
/// `<pad>`=0, `<unk>`=1, `<ap>`=2, `<na>`=3, `<h1>`..`<hH>`=4..3+H.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    num_slots: usize,
    vocab: BTreeMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    reserved: BTreeMap<String, u32>,
    vocab: BTreeMap<String, u32>,
}

impl Tokenizer {
    /// Builds the vocabulary from normalized word tokens in first-appearance
    /// order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, num_slots: usize) -> Self {
        let first_id = FIRST_PREFIX + num_slots as u32;
        let mut vocab = BTreeMap::new();
        for text in texts {
            for word in normalize_answer(text).split_whitespace() {
                if !vocab.contains_key(word) {
                    let id = first_id + vocab.len() as u32;
                    vocab.insert(word.to_string(), id);
                }
            }
        }
        Self { num_slots, vocab }
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    /// Total number of ids, reserved included.
    pub fn vocab_size(&self) -> usize {
        FIRST_PREFIX as usize + self.num_slots + self.vocab.len()
    }

    pub fn prefix_id(&self, h_index: usize) -> Result<u32> {
        if h_index == 0 || h_index > self.num_slots {
            return Err(Error::validation(format!(
                "hypothesis index {h_index} outside 1..={}",
                self.num_slots
            )));
        }
        Ok(FIRST_PREFIX + h_index as u32 - 1)
    }

    pub fn token_id(&self, word: &str) -> u32 {
        self.vocab.get(word).copied().unwrap_or(UNK)
    }

    pub fn words(&self) -> &BTreeMap<String, u32> {
        &self.vocab
    }

    pub fn reserved(&self) -> BTreeMap<String, u32> {
        let mut r = BTreeMap::new();
        r.insert("<pad>".to_string(), PAD);
        r.insert("<unk>".to_string(), UNK);
        r.insert("<ap>".to_string(), AP);
        r.insert("<na>".to_string(), NA);
        for h in 1..=self.num_slots {
            r.insert(format!("<h{h}>"), FIRST_PREFIX + h as u32 - 1);
        }
        r
    }

    /// Encodes one slot: prefix, then `<na>`, `<ap>` or word ids, truncated
    /// and `<pad>`-filled to exactly `config.tokens_per_hypothesis`.
    pub fn encode_hypothesis(
        &self,
        h_index: usize,
        text: &str,
        kind: HypothesisKind,
        config: &StackConfig,
    ) -> Result<Vec<u32>> {
        let t = config.tokens_per_hypothesis;
        let mut ids = Vec::with_capacity(t);
        ids.push(self.prefix_id(h_index)?);
        match kind {
            HypothesisKind::NoAnswer => ids.push(NA),
            HypothesisKind::Padding => ids.push(AP),
            HypothesisKind::Answer => {
                let norm = normalize_answer(text);
                ids.extend(
                    norm.split_whitespace()
                        .take(config.max_answer_length)
                        .map(|w| self.token_id(w)),
                );
            }
        }
        ids.truncate(t);
        ids.resize(t, PAD);
        Ok(ids)
    }

    pub fn to_json_string(&self) -> String {
        let file = TokenizerFile {
            reserved: self.reserved(),
            vocab: self.vocab.clone(),
        };
        let mut s = serde_json::to_string(&file).expect("tokenizer serialization");
        s.push('\n');
        s
    }

    pub fn from_json_str(input: &str) -> Result<Self> {
        let file: TokenizerFile =
            serde_json::from_str(input).map_err(|e| Error::json("tokenizer", input, &e))?;
        Self::from_parts(file.reserved, file.vocab)
    }

    fn from_parts(reserved: BTreeMap<String, u32>, vocab: BTreeMap<String, u32>) -> Result<Self> {
        let num_slots = reserved.len().checked_sub(4).ok_or_else(|| {
            Error::validation("tokenizer reserved block is missing base tokens")
        })?;
        let tok = Self { num_slots, vocab };
        if tok.reserved() != reserved {
            return Err(Error::validation("tokenizer reserved ids do not match the fixed layout"));
        }
        let first = FIRST_PREFIX + num_slots as u32;
        let mut ids: Vec<u32> = tok.vocab.values().copied().collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| id != first + i as u32) {
            return Err(Error::validation(format!("tokenizer vocab ids must be contiguous from {first}")));
        }
        Ok(tok)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let input = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&input)
    }
}

/// Hypothesis texts in vocabulary-building order: sorted qids, then slot order.
pub fn vocab_corpus<'a>(
    preds: &'a [ModelPredictions],
    qids: &'a [String],
    config: &StackConfig,
) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut sorted: Vec<&String> = qids.iter().collect();
    sorted.sort();
    for qid in sorted {
        for slot in 0..preds.len() * config.n_per_model {
            let (m, r) = (slot % preds.len(), slot / preds.len());
            if let Some(h) = preds[m].per_question.get(qid).and_then(|l| l.get(r)) {
                out.push(h.text.as_str());
            }
        }
    }
    out
}

pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, config: &StackConfig) -> Tokenizer {
    Tokenizer::build(corpus, config.num_slots())
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Scores fed to the softmax: the F1 values, with −1 for slots whose
/// answerability contradicts the question's when `biased` is set.
pub fn target_scores(f1s: &[f64], biased: bool, na_flags: &[bool], question_unanswerable: bool) -> Vec<f64> {
    f1s.iter()
        .zip(na_flags)
        .map(|(&f, &na)| if biased && na != question_unanswerable { -1.0 } else { f })
        .collect()
}

pub fn target_distribution(f1s: &[f64], biased: bool, na_flags: &[bool], question_unanswerable: bool) -> Vec<f64> {
    softmax(&target_scores(f1s, biased, na_flags, question_unanswerable))
}

/// One level-1 row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackExample {
    pub qid: String,
    pub x: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<f64>>,
    pub surfaces: Vec<String>,
    pub na_flags: Vec<bool>,
    pub pad_flags: Vec<bool>,
    /// Scores behind `y` (F1, or −1 under biased targets); absent without truths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1s: Option<Vec<f64>>,
}

impl StackExample {
    pub fn num_slots(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_padded(&self) -> bool {
        self.pad_flags.iter().any(|&p| p)
    }

    fn check_shape(&self) -> std::result::Result<(), String> {
        let h = self.surfaces.len();
        if h == 0 {
            return Err("no hypothesis slots".into());
        }
        if self.na_flags.len() != h || self.pad_flags.len() != h {
            return Err(format!("flag arrays must have {h} entries"));
        }
        if self.x.is_empty() || self.x.len() % h != 0 {
            return Err(format!("x length {} is not a multiple of {h}", self.x.len()));
        }
        if self.y.as_ref().is_some_and(|y| y.len() != h) || self.f1s.as_ref().is_some_and(|f| f.len() != h) {
            return Err(format!("y and f1s must have {h} entries"));
        }
        Ok(())
    }
}

/// Builds the level-1 example for one question from per-model lists given in
/// `config.models` order. Without truths the example carries no targets.
pub fn build_example(
    qid: &str,
    lists: &[&[Hypothesis]],
    truths: Option<&GroundTruth>,
    tok: &Tokenizer,
    config: &StackConfig,
    biased: bool,
) -> Result<StackExample> {
    if lists.len() != config.models.len() {
        return Err(Error::validation(format!(
            "question {qid:?}: got {} n-best lists for {} configured models",
            lists.len(),
            config.models.len()
        )));
    }
    if tok.num_slots() != config.num_slots() {
        return Err(Error::validation(format!(
            "tokenizer has {} slots, config needs {}",
            tok.num_slots(),
            config.num_slots()
        )));
    }
    let h = config.num_slots();
    let truth_set = truths.map(GroundTruth::truths);
    let mut x = Vec::with_capacity(config.input_len());
    let mut surfaces = Vec::with_capacity(h);
    let mut na_flags = Vec::with_capacity(h);
    let mut pad_flags = Vec::with_capacity(h);
    let mut f1s = Vec::with_capacity(h);

    for slot in 0..h {
        let (m, r) = config.slot_source(slot);
        let (kind, text) = match lists[m].get(r) {
            None => (HypothesisKind::Padding, ""),
            Some(hyp) if hyp.is_no_answer() => (HypothesisKind::NoAnswer, ""),
            Some(hyp) => (HypothesisKind::Answer, hyp.text.as_str()),
        };
        x.extend(tok.encode_hypothesis(slot + 1, text, kind, config)?);
        surfaces.push(text.to_string());
        na_flags.push(kind == HypothesisKind::NoAnswer);
        pad_flags.push(kind == HypothesisKind::Padding);
        if let Some(ts) = &truth_set {
            f1s.push(match kind {
                HypothesisKind::Padding => 0.0,
                _ => f1_score(text, ts),
            });
        }
    }

    let (y, f1s) = match truths {
        Some(gt) => {
            let scores = target_scores(&f1s, biased, &na_flags, gt.is_impossible);
            (Some(softmax(&scores)), Some(scores))
        }
        None => (None, None),
    };
    Ok(StackExample {
        qid: qid.to_string(),
        x,
        y,
        surfaces,
        na_flags,
        pad_flags,
        f1s,
    })
}

/// Builds one example per qid. `preds` must follow `config.models` order.
pub fn build_stack_dataset(
    preds: &[ModelPredictions],
    dataset: Option<&Dataset>,
    qids: &[String],
    tok: &Tokenizer,
    config: &StackConfig,
    biased: bool,
) -> Result<Vec<StackExample>> {
    qids.iter()
        .map(|qid| {
            let lists = preds
                .iter()
                .map(|p| {
                    p.get(qid).ok_or_else(|| {
                        Error::validation(format!("model {:?} has no predictions for question {qid:?}", p.model_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let truths = match dataset {
                Some(ds) => Some(
                    ds.per_question
                        .get(qid)
                        .ok_or_else(|| Error::validation(format!("question {qid:?} missing from ground truth")))?,
                ),
                None => None,
            };
            build_example(qid, &lists, truths, tok, config, biased)
        })
        .collect()
}

/// Fraction of examples with at least one padded slot.
pub fn padding_stats(examples: &[StackExample]) -> f64 {
    if examples.is_empty() {
        log::warn!("padding_stats called on an empty example list");
        return 0.0;
    }
    examples.iter().filter(|e| e.is_padded()).count() as f64 / examples.len() as f64
}

pub fn write_stack_dataset(path: impl AsRef<Path>, examples: &[StackExample]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex).expect("stack example serialization");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_stack_dataset(path: impl AsRef<Path>) -> Result<Vec<StackExample>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let ex: StackExample = serde_json::from_str(&line)
            .map_err(|e| Error::validation(format!("{} line {lineno}: {e}", path.display())))?;
        ex.check_shape()
            .map_err(|e| Error::validation(format!("{} line {lineno}: {e}", path.display())))?;
        out.push(ex);
    }
    Ok(out)
}
