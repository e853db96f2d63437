//! Synthetic ground truth and n-best lists with controllable top-1 accuracy
//! and top-n recall, for exercising the pipeline without trained readers.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::normalize_answer;
use crate::prediction_io::{Dataset, GroundTruth, Hypothesis, ModelPredictions};

pub const GOLD_FILE: &str = "gold.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthModel {
    pub model_id: String,
    /// Probability that the correct answer is ranked first.
    pub top1_accuracy: f64,
    /// Probability that the correct answer appears anywhere in the list.
    pub topn_recall: f64,
    /// List length.
    pub n: usize,
}

impl SynthModel {
    pub fn new(model_id: impl Into<String>, top1_accuracy: f64, topn_recall: f64, n: usize) -> Self {
        Self {
            model_id: model_id.into(),
            top1_accuracy,
            topn_recall,
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub split_name: String,
    pub num_questions: usize,
    pub unanswerable_fraction: f64,
    pub models: Vec<SynthModel>,
    /// Number of distinct pseudo-words answers are built from.
    pub vocab_size: usize,
    /// Inclusive word-count range of answers.
    pub answer_length_range: (usize, usize),
    /// Chance that a model's hit/miss draw is shared with the other models.
    pub miss_correlation: f64,
    /// Chance that a first-rank miss on an answerable question is the empty
    /// answer rather than a wrong span.
    pub false_abstention_rate: f64,
    /// Exact fraction of questions where one model returns fewer than `n`
    /// hypotheses.
    pub short_list_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            split_name: "synth".into(),
            num_questions: 1000,
            unanswerable_fraction: 1.0 / 3.0,
            models: vec![
                SynthModel::new("model_a", 0.8, 0.95, 8),
                SynthModel::new("model_b", 0.7, 0.95, 8),
            ],
            vocab_size: 2000,
            answer_length_range: (1, 4),
            miss_correlation: 0.0,
            false_abstention_rate: 0.5,
            short_list_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        for (name, v) in [
            ("unanswerable_fraction", self.unanswerable_fraction),
            ("miss_correlation", self.miss_correlation),
            ("false_abstention_rate", self.false_abstention_rate),
            ("short_list_fraction", self.short_list_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.num_questions == 0 {
            return bad("num_questions must be ≥ 1".into());
        }
        if self.vocab_size < 16 {
            return bad(format!("vocab_size must be ≥ 16, got {}", self.vocab_size));
        }
        let (lo, hi) = self.answer_length_range;
        if lo == 0 || lo > hi {
            return bad(format!("answer_length_range must satisfy 1 ≤ min ≤ max, got ({lo}, {hi})"));
        }
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        let mut ids = HashSet::new();
        for m in &self.models {
            let stem = Path::new(GOLD_FILE).file_stem().and_then(|s| s.to_str());
            if m.model_id.is_empty()
                || m.model_id.contains(['/', '\\'])
                || m.model_id.starts_with('.')
                || Some(m.model_id.as_str()) == stem
            {
                return bad(format!("model id {:?} cannot be used as a file stem", m.model_id));
            }
            if !ids.insert(&m.model_id) {
                return bad(format!("duplicate model id {:?}", m.model_id));
            }
            if m.n == 0 {
                return bad(format!("model {}: n must be ≥ 1", m.model_id));
            }
            if !(0.0 <= m.top1_accuracy && m.top1_accuracy <= m.topn_recall && m.topn_recall <= 1.0) {
                return bad(format!(
                    "model {}: need 0 ≤ top1_accuracy ({}) ≤ topn_recall ({}) ≤ 1",
                    m.model_id, m.top1_accuracy, m.topn_recall
                ));
            }
            if m.n == 1 && m.topn_recall != m.top1_accuracy {
                return bad(format!("model {}: with n = 1 recall must equal accuracy", m.model_id));
            }
        }
        if self.short_list_fraction > 0.0 && self.models.iter().all(|m| m.n < 2) {
            return bad("short lists need a model with n ≥ 2".into());
        }
        Ok(())
    }

    pub fn max_n(&self) -> usize {
        self.models.iter().map(|m| m.n).max().unwrap_or(0)
    }
}

/// A generated split: ground truth plus one n-best file per model.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub predictions: Vec<ModelPredictions>,
}

impl SynthOutput {
    /// Writes `gold.json` and `<model_id>.json` into `dir`, returning the
    /// gold path and the n-best paths in model order.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, Vec<PathBuf>)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let gold = dir.join(GOLD_FILE);
        fs::write(&gold, self.dataset.to_squad_string()).map_err(|e| Error::io(&gold, e))?;
        let mut paths = Vec::with_capacity(self.predictions.len());
        for p in &self.predictions {
            let path = dir.join(format!("{}.json", p.model_id));
            fs::write(&path, p.to_json_string()).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok((gold, paths))
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// The `i`-th pseudo-word: two or more consonant-vowel syllables.
pub fn pseudo_word(i: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut n = i + base;
    let mut syllables = Vec::new();
    while n > 0 {
        let s = n % base;
        syllables.push([CONSONANTS[s / VOWELS.len()], VOWELS[s % VOWELS.len()]]);
        n /= base;
    }
    syllables.iter().rev().flatten().map(|&b| b as char).collect()
}

struct Phrases<'a> {
    words: &'a [String],
    range: (usize, usize),
}

impl Phrases<'_> {
    fn draw<R: Rng>(&self, rng: &mut R) -> String {
        let len = rng.random_range(self.range.0..=self.range.1);
        (0..len)
            .map(|_| self.words.choose(rng).expect("non-empty vocabulary").as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// A wrong span overlapping the gold one, for partial credit.
    fn near_miss<R: Rng>(&self, gold: &str, rng: &mut R) -> String {
        let mut words: Vec<&str> = gold.split(' ').collect();
        if words.len() > 1 && rng.random::<bool>() {
            words.pop();
        } else {
            words.push(self.words.choose(rng).expect("non-empty vocabulary"));
        }
        words.join(" ")
    }
}

fn exp_probabilities<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    draws.sort_by(|a: &f64, b| b.total_cmp(a));
    let total: f64 = draws.iter().sum();
    draws.iter().map(|d| d / total).collect()
}

/// Generates one split. Every random choice comes from a single generator
/// seeded with `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let words: Vec<String> = (0..config.vocab_size).map(pseudo_word).collect();
    let phrases = Phrases {
        words: &words,
        range: config.answer_length_range,
    };
    let pool_size = 2 * config.max_n();

    let mut truths = BTreeMap::new();
    let mut lists: Vec<BTreeMap<String, Vec<Hypothesis>>> = vec![BTreeMap::new(); config.models.len()];
    let mut qids = Vec::with_capacity(config.num_questions);

    for index in 0..config.num_questions {
        let qid = format!("{}-{index:06}", config.split_name);
        let unanswerable = rng.random::<f64>() < config.unanswerable_fraction;
        let gold = if unanswerable { String::new() } else { phrases.draw(&mut rng) };

        // wrong spans shared by all models on this question
        let mut seen: HashSet<String> = HashSet::from([normalize_answer(&gold)]);
        let mut pool = Vec::with_capacity(pool_size);
        if !unanswerable {
            let near = phrases.near_miss(&gold, &mut rng);
            if seen.insert(normalize_answer(&near)) {
                pool.push(near);
            }
        }
        let mut attempts = 0;
        while pool.len() < pool_size && attempts < 100 * pool_size {
            attempts += 1;
            let p = phrases.draw(&mut rng);
            if seen.insert(normalize_answer(&p)) {
                pool.push(p);
            }
        }
        if pool.len() < config.max_n() {
            return Err(Error::config(format!(
                "vocabulary too small to draw {} distinct answers",
                config.max_n()
            )));
        }

        let shared: f64 = rng.random();
        for (m, model) in config.models.iter().enumerate() {
            let own: f64 = rng.random();
            let u = if rng.random::<f64>() < config.miss_correlation { shared } else { own };
            let gold_rank = if u < model.top1_accuracy {
                Some(1)
            } else if u < model.topn_recall {
                Some(rng.random_range(2..=model.n))
            } else {
                None
            };
            let abstain = !unanswerable && gold_rank != Some(1) && rng.random::<f64>() < config.false_abstention_rate;

            let mut wrong: Vec<&String> = pool.iter().collect();
            wrong.shuffle(&mut rng);
            let mut wrong = wrong.into_iter();
            let probs = exp_probabilities(model.n, &mut rng);
            let list: Vec<Hypothesis> = (1..=model.n)
                .zip(probs)
                .map(|(rank, p)| {
                    let text = if gold_rank == Some(rank) {
                        gold.clone()
                    } else if rank == 1 && abstain {
                        String::new()
                    } else {
                        wrong.next().expect("pool holds max_n wrong spans").clone()
                    };
                    Hypothesis::new(text, p, rank)
                })
                .collect();
            lists[m].insert(qid.clone(), list);
        }

        let truth = if unanswerable {
            GroundTruth::unanswerable()
        } else {
            GroundTruth::answerable(vec![gold])
        };
        truths.insert(qid.clone(), truth);
        qids.push(qid);
    }

    let short = (config.short_list_fraction * config.num_questions as f64).round() as usize;
    if short > 0 {
        let eligible: Vec<usize> = (0..config.models.len()).filter(|&m| config.models[m].n >= 2).collect();
        let mut order = qids.clone();
        order.shuffle(&mut rng);
        for qid in order.into_iter().take(short) {
            let m = *eligible.choose(&mut rng).expect("validated");
            let len = rng.random_range(1..config.models[m].n);
            let list = lists[m].get_mut(&qid).expect("generated");
            list.truncate(len);
        }
    }

    Ok(SynthOutput {
        dataset: Dataset {
            split_name: config.split_name.clone(),
            per_question: truths,
        },
        predictions: config
            .models
            .iter()
            .zip(lists)
            .map(|(m, per_question)| ModelPredictions {
                model_id: m.model_id.clone(),
                per_question,
            })
            .collect(),
    })
}
