//! The level-1 CNN meta-model: token embeddings, two convolution blocks,
//! fully connected layers and a log-softmax over hypothesis slots, trained
//! with KL divergence against softmax-of-F1 targets.

mod dense;
mod token_path;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{grad_check, Adam, GradCheckReport, KlDirection, PlateauScheduler, Probe, Tensor};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::prediction_io::Dataset;
use crate::stacking::{StackExample, Tokenizer};

pub const CHECKPOINT_FORMAT: &str = "stackqa-ckpt-v1";
pub(crate) const KERNEL: usize = 3;
pub(crate) const PADDING: usize = 1;
pub(crate) const POOL: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaModelConfig {
    /// Hypothesis slots H.
    pub num_slots: usize,
    /// Tokens per slot T.
    pub tokens_per_hypothesis: usize,
    pub embed_dim: usize,
    pub conv_channels: Vec<usize>,
    pub fc_sizes: Vec<usize>,
    pub dropout_p: f64,
    pub embed_dropout_p: f64,
    pub noise_sigma: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub patience: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Recorded provenance: targets are fixed when the stack dataset is built.
    pub biased_targets: bool,
    pub kl_direction: KlDirection,
}

impl Default for MetaModelConfig {
    fn default() -> Self {
        Self {
            num_slots: 16,
            tokens_per_hypothesis: 16,
            embed_dim: 512,
            conv_channels: vec![1024, 64],
            fc_sizes: vec![64, 16],
            dropout_p: 0.2,
            embed_dropout_p: 0.0,
            noise_sigma: 0.0,
            lr: 0.001,
            min_lr: 1e-6,
            patience: 3,
            lr_factor: 0.1,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            biased_targets: false,
            kl_direction: KlDirection::Conventional,
        }
    }
}

impl MetaModelConfig {
    pub fn input_len(&self) -> usize {
        self.num_slots * self.tokens_per_hypothesis
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.num_slots == 0 || self.tokens_per_hypothesis == 0 || self.embed_dim == 0 {
            return bad("num_slots, tokens_per_hypothesis and embed_dim must be ≥ 1".into());
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad(format!("conv_channels must be non-empty and ≥ 1, got {:?}", self.conv_channels));
        }
        if self.fc_sizes.is_empty() || self.fc_sizes.contains(&0) {
            return bad(format!("fc_sizes must be non-empty and ≥ 1, got {:?}", self.fc_sizes));
        }
        if *self.fc_sizes.last().expect("non-empty") != self.num_slots {
            return bad(format!(
                "last fc size {} must equal the number of slots {}",
                self.fc_sizes.last().expect("non-empty"),
                self.num_slots
            ));
        }
        for (name, p) in [("dropout_p", self.dropout_p), ("embed_dropout_p", self.embed_dropout_p)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr must be positive and batch_size ≥ 1".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor));
        }
        // each pooled block halves the sequence; the last pools globally
        let mut len = self.input_len();
        for _ in 1..self.conv_channels.len() {
            len /= POOL;
        }
        if len == 0 {
            return bad(format!(
                "input length {} too short for {} conv blocks",
                self.input_len(),
                self.conv_channels.len()
            ));
        }
        Ok(())
    }

    fn stochastic_embeddings(&self) -> bool {
        self.embed_dropout_p > 0.0 || self.noise_sigma > 0.0
    }
}

/// Weight and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `[V×E]`
    pub embedding: Tensor,
    /// Kernels `[C_out×C_in×3]`.
    pub convs: Vec<Layer>,
    /// Weights `[out×in]`.
    pub fcs: Vec<Layer>,
}

impl Params {
    fn zeros(config: &MetaModelConfig, vocab_size: usize) -> Self {
        let mut convs = Vec::new();
        let mut c_in = config.embed_dim;
        for &c in &config.conv_channels {
            convs.push(Layer {
                weight: Tensor::zeros(vec![c, c_in, KERNEL]),
                bias: Tensor::zeros(vec![c]),
            });
            c_in = c;
        }
        let mut fcs = Vec::new();
        for &n in &config.fc_sizes {
            fcs.push(Layer {
                weight: Tensor::zeros(vec![n, c_in]),
                bias: Tensor::zeros(vec![n]),
            });
            c_in = n;
        }
        Self {
            embedding: Tensor::zeros(vec![vocab_size, config.embed_dim]),
            convs,
            fcs,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        Self {
            embedding: z(&self.embedding),
            convs: self.convs.iter().map(|l| Layer { weight: z(&l.weight), bias: z(&l.bias) }).collect(),
            fcs: self.fcs.iter().map(|l| Layer { weight: z(&l.weight), bias: z(&l.bias) }).collect(),
        }
    }

    /// Tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (prefix, layers) in [("conv", &self.convs), ("fc", &self.fcs)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}{}.weight", i + 1), &l.weight));
                out.push((format!("{prefix}{}.bias", i + 1), &l.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for l in self.convs.iter_mut().chain(self.fcs.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// All values concatenated in [`Params::named`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "assign_flat: length");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    pub config: MetaModelConfig,
    pub tokenizer: Tokenizer,
    pub params: Params,
}

/// Initializes weights with U(±√(1/fan_in)) and embeddings with N(0, 1/√E).
pub fn init_model(config: &MetaModelConfig, tokenizer: &Tokenizer, seed: u64) -> Result<MetaModel> {
    config.validate()?;
    if tokenizer.num_slots() != config.num_slots {
        return Err(Error::config(format!(
            "tokenizer has {} slots but config expects {}",
            tokenizer.num_slots(),
            config.num_slots
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::zeros(config, tokenizer.vocab_size());

    let normal = Normal::new(0.0, 1.0 / (config.embed_dim as f64).sqrt()).expect("embedding std");
    for v in params.embedding.data_mut() {
        *v = normal.sample(&mut rng);
    }
    for layer in params.convs.iter_mut().chain(params.fcs.iter_mut()) {
        let shape = layer.weight.shape();
        let fan_in: usize = shape[1..].iter().product();
        let bound = (1.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("init bound");
        for v in layer.weight.data_mut().iter_mut().chain(layer.bias.data_mut()) {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(MetaModel {
        config: config.clone(),
        tokenizer: tokenizer.clone(),
        params,
    })
}

impl MetaModel {
    fn check_input(&self, x: &[u32]) -> Result<()> {
        if x.len() != self.config.input_len() {
            return Err(Error::shape(format!(
                "input has {} tokens, model expects H×T = {}",
                x.len(),
                self.config.input_len()
            )));
        }
        let v = self.tokenizer.vocab_size() as u32;
        if let Some(bad) = x.iter().find(|&&t| t >= v) {
            return Err(Error::shape(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(())
    }

    /// The memoized token-window path handles two conv blocks with
    /// deterministic embeddings; everything else goes through the tape.
    fn token_path_ok(&self, train: bool) -> bool {
        self.config.conv_channels.len() == 2 && !(train && self.config.stochastic_embeddings())
    }

    /// Log-probabilities over hypothesis slots for one input.
    pub fn forward<R: Rng + ?Sized>(&self, x: &[u32], train: bool, rng: &mut R) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if self.token_path_ok(train) {
            let out = token_path::run(self, &[x], None, train, rng, None)?;
            Ok(out.log_probs.into_iter().next().expect("one output"))
        } else {
            Ok(dense::forward(self, x, train, rng)?.0)
        }
    }

    /// Eval-mode forward for many inputs.
    pub fn forward_batch(&self, xs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        for x in xs {
            self.check_input(x)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        if self.token_path_ok(false) {
            let mut out = Vec::with_capacity(xs.len());
            for chunk in xs.chunks(256) {
                out.extend(token_path::run(self, chunk, None, false, &mut rng, None)?.log_probs);
            }
            Ok(out)
        } else {
            xs.iter().map(|x| Ok(dense::forward(self, x, false, &mut rng)?.0)).collect()
        }
    }

    /// Summed KL loss over a batch and, with `grads`, its gradient added into `grads`.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        xs: &[&[u32]],
        targets: &[&[f64]],
        train: bool,
        rng: &mut R,
        grads: Option<&mut Params>,
    ) -> Result<f64> {
        if xs.len() != targets.len() {
            return Err(Error::shape("batch_loss: inputs and targets differ in length"));
        }
        for x in xs {
            self.check_input(x)?;
        }
        if self.token_path_ok(train) {
            Ok(token_path::run(self, xs, Some(targets), train, rng, grads)?.loss)
        } else {
            dense::batch_loss(self, xs, targets, train, rng, grads)
        }
    }

    /// Same as [`MetaModel::batch_loss`] but always through the generic tape.
    pub fn batch_loss_dense<R: Rng + ?Sized>(
        &self,
        xs: &[&[u32]],
        targets: &[&[f64]],
        train: bool,
        rng: &mut R,
        grads: Option<&mut Params>,
    ) -> Result<f64> {
        for x in xs {
            self.check_input(x)?;
        }
        dense::batch_loss(self, xs, targets, train, rng, grads)
    }

    /// Fingerprint of ReLU/pooling decisions for an eval-mode pass, used to
    /// keep finite differences away from kinks.
    pub fn activation_pattern(&self, xs: &[&[u32]]) -> Result<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut h = 0u64;
        for x in xs {
            self.check_input(x)?;
            h = h.rotate_left(7) ^ dense::forward(self, x, false, &mut rng)?.1;
        }
        Ok(h)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let params: BTreeMap<String, &[f64]> = self
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.data()))
            .collect();
        let tokenizer: serde_json::Value =
            serde_json::from_str(&self.tokenizer.to_json_string()).expect("tokenizer json");
        let doc = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "config": self.config,
            "tokenizer": tokenizer,
            "params": params,
        });
        let mut s = serde_json::to_string(&doc).expect("checkpoint serialization");
        s.push('\n');
        s
    }

    pub fn from_checkpoint_str(input: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Checkpoint {
            format: String,
            config: MetaModelConfig,
            tokenizer: serde_json::Value,
            params: BTreeMap<String, Vec<f64>>,
        }
        let ck: Checkpoint = serde_json::from_str(input).map_err(|e| Error::json("checkpoint", input, &e))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!(
                "unsupported checkpoint format {:?} (expected {CHECKPOINT_FORMAT})",
                ck.format
            )));
        }
        ck.config.validate()?;
        let tokenizer = Tokenizer::from_json_str(&ck.tokenizer.to_string())?;
        let mut params = Params::zeros(&ck.config, tokenizer.vocab_size());
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if ck.params.len() != names.len() {
            return Err(Error::validation(format!(
                "checkpoint has {} parameter tensors, config implies {}",
                ck.params.len(),
                names.len()
            )));
        }
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let values = ck
                .params
                .get(name)
                .ok_or_else(|| Error::validation(format!("checkpoint missing parameter {name}")))?;
            if values.len() != t.numel() {
                return Err(Error::validation(format!(
                    "parameter {name}: {} values, expected {}",
                    values.len(),
                    t.numel()
                )));
            }
            t.data_mut().copy_from_slice(values);
        }
        Ok(Self {
            config: ck.config,
            tokenizer,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let input = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_em: f64,
    pub dev_f1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the highest dev F1 (earliest on ties).
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,dev_em,dev_f1,lr\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.dev_em, r.dev_f1, r.lr));
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.epochs[e - 1])
    }
}

/// Per-epoch callback hook for progress reporting.
pub type EpochObserver<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Trains with shuffled minibatches, Adam and a dev-F1 plateau scheduler,
/// returning the parameters of the best dev-F1 epoch.
pub fn train(
    model: MetaModel,
    train_set: &[StackExample],
    dev_set: &[StackExample],
    dev_dataset: &Dataset,
    mut observer: Option<EpochObserver<'_>>,
) -> Result<(MetaModel, TrainHistory)> {
    let config = model.config.clone();
    config.validate()?;
    let targets: Vec<&[f64]> = train_set
        .iter()
        .map(|ex| {
            ex.y.as_deref()
                .ok_or_else(|| Error::validation(format!("training example {:?} has no target y", ex.qid)))
        })
        .collect::<Result<_>>()?;

    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((model, history));
    }

    // separate stream from the one `init_model` draws with the same seed
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(config.lr)?;
    let mut sched = PlateauScheduler::new(config.patience, config.lr_factor, config.min_lr)?;
    let mut model = model;
    let mut best: Option<(f64, Params)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<&[u32]> = batch.iter().map(|&i| train_set[i].x.as_slice()).collect();
            let ys: Vec<&[f64]> = batch.iter().map(|&i| targets[i]).collect();
            let mut grads = model.params.zeros_like();
            total_loss += model.batch_loss(&xs, &ys, true, &mut rng, Some(&mut grads))?;
            let grad_tensors: Vec<(String, &Tensor)> = grads.named();
            adam.step(
                model
                    .params
                    .tensors_mut()
                    .into_iter()
                    .zip(grad_tensors)
                    .map(|(p, (_, g))| (p.data_mut(), g.data())),
            )?;
        }

        let answers = predict(&model, dev_set)?;
        let report = evaluate(&answers, dev_dataset)?;
        let record = EpochRecord {
            epoch,
            train_loss: total_loss / train_set.len().max(1) as f64,
            dev_em: report.em,
            dev_f1: report.f1,
            lr: adam.lr,
        };
        adam.lr = sched.step(report.f1, adam.lr);
        if best.as_ref().is_none_or(|(f1, _)| report.f1 > *f1) {
            best = Some((report.f1, model.params.clone()));
            history.best_epoch = Some(epoch);
        }
        log::info!(
            "epoch {epoch}: loss {:.6} dev EM {:.3} F1 {:.3} lr {}",
            record.train_loss,
            record.dev_em,
            record.dev_f1,
            record.lr
        );
        if let Some(obs) = observer.as_mut() {
            obs(&record);
        }
        history.epochs.push(record);
    }

    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}

/// Compares the analytic gradient of the summed eval-mode loss (through the
/// default evaluator) with central differences of the tape path. Coordinates
/// whose ±δ step changes a ReLU or pooling decision are skipped.
pub fn gradient_check(
    model: &MetaModel,
    xs: &[&[u32]],
    targets: &[&[f64]],
    delta: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut grads = model.params.zeros_like();
    model.batch_loss(xs, targets, false, &mut rng, Some(&mut grads))?;
    let mut probe = model.clone();
    let mut failure = None;
    let report = grad_check(
        |p| {
            probe.params.assign_flat(p);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let value = probe.batch_loss_dense(xs, targets, false, &mut rng, None);
            let pattern = probe.activation_pattern(xs);
            match (value, pattern) {
                (Ok(value), Ok(pattern)) => Probe { value, pattern },
                (Err(e), _) | (_, Err(e)) => {
                    failure.get_or_insert(e);
                    Probe::smooth(f64::NAN)
                }
            }
        },
        &model.params.flatten(),
        &grads.flatten(),
        delta,
        tol,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Index of the highest-scoring non-padding slot (first on ties).
pub fn select_slot(log_probs: &[f64], pad_flags: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &lp) in log_probs.iter().enumerate() {
        if pad_flags.get(i).copied().unwrap_or(false) {
            continue;
        }
        if best.is_none_or(|b| lp > log_probs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Final answer per question: the surface form of the argmax slot, `""` for
/// a no-answer slot, skipping padding.
pub fn predict(model: &MetaModel, examples: &[StackExample]) -> Result<BTreeMap<String, String>> {
    let xs: Vec<&[u32]> = examples.iter().map(|e| e.x.as_slice()).collect();
    let outputs = model.forward_batch(&xs)?;
    examples
        .iter()
        .zip(outputs)
        .map(|(ex, lp)| {
            let slot = select_slot(&lp, &ex.pad_flags)
                .ok_or_else(|| Error::validation(format!("example {:?} has only padding slots", ex.qid)))?;
            let answer = if ex.na_flags[slot] {
                String::new()
            } else {
                ex.surfaces[slot].clone()
            };
            Ok((ex.qid.clone(), answer))
        })
        .collect()
}

#[cfg(test)]
mod tests;
