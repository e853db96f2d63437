use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use stackqa::autograd::KlDirection;
use stackqa::meta_model::{self, EpochRecord, MetaModel, MetaModelConfig};
use stackqa::metrics::{evaluate, oracle_eval, topn_eval};
use stackqa::prediction_io::{load_ground_truth, load_nbest, read_predictions, write_predictions, ModelPredictions};
use stackqa::stacking::{
    build_stack_dataset, build_vocab, padding_stats, read_stack_dataset, softmax, vocab_corpus, write_stack_dataset,
    StackConfig, Tokenizer,
};
use stackqa::synth::{self, SynthConfig, SynthModel};
use stackqa::voting::{vote_dataset, VotingKind, VotingMethod};
use stackqa::{Error, Result};

use crate::args::*;
use crate::report::{print_scores, scores, write_json};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Validation("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let (name, result) = match cli.command {
        Command::Eval(a) => ("eval", eval(a)?),
        Command::Topn(a) => ("topn", topn(a)?),
        Command::Oracle(a) => ("oracle", oracle(a)?),
        Command::Vote(a) => ("vote", vote(a)?),
        Command::DatasetBuild(a) => ("dataset-build", dataset_build(a)?),
        Command::Train(a) => ("train", train(a)?),
        Command::Predict(a) => ("predict", predict(a)?),
        Command::Synth(a) => ("synth", synth(a)?),
        Command::GradCheck(a) => ("grad-check", grad_check(a)?),
    };
    match cli.json {
        Some(path) => write_json(&path, name, result),
        None => Ok(()),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<ModelPredictions>> {
    paths.iter().map(load_nbest).collect()
}

fn eval(a: EvalArgs) -> Result<Value> {
    let answers = read_predictions(&a.pred)?;
    let gold = load_ground_truth(&a.gold)?;
    let r = evaluate(&answers, &gold)?;
    print_scores("answers", &r);
    Ok(scores(&r))
}

fn topn(a: TopnArgs) -> Result<Value> {
    let gold = load_ground_truth(&a.gold)?;
    let preds = load_all(&a.pred)?;
    let reports = preds
        .iter()
        .map(|p| topn_eval(p, &gold, &a.ns))
        .collect::<Result<Vec<_>>>()?;

    let width = preds.iter().map(|p| p.model_id.len()).max().unwrap_or(5).max(5);
    let mut header = format!("{:<width$}", "Model");
    for metric in ["EM", "F1"] {
        for n in &a.ns {
            header.push_str(&format!(" {:>7}", format!("{metric}@{n}")));
        }
    }
    println!("{header}");
    let mut out = Vec::new();
    for (p, r) in preds.iter().zip(&reports) {
        let mut line = format!("{:<width$}", p.model_id);
        for n in &a.ns {
            line.push_str(&format!(" {:>7.1}", r.per_n[n].em));
        }
        for n in &a.ns {
            line.push_str(&format!(" {:>7.1}", r.per_n[n].f1));
        }
        println!("{line}");
        let rows: Vec<Value> = a
            .ns
            .iter()
            .map(|n| json!({ "n": n, "em": r.per_n[n].em, "f1": r.per_n[n].f1, "na_accuracy": r.per_n[n].na_accuracy }))
            .collect();
        out.push(json!({ "model": p.model_id, "rows": rows }));
    }
    Ok(json!({ "models": out }))
}

fn oracle(a: OracleArgs) -> Result<Value> {
    let gold = load_ground_truth(&a.gold)?;
    let preds = load_all(&a.pred)?;
    let r = oracle_eval(&preds, a.n, &gold)?;
    print_scores(&format!("oracle@{}", a.n), &r);
    let models: Vec<&str> = preds.iter().map(|p| p.model_id.as_str()).collect();
    Ok(json!({ "n": a.n, "models": models, "scores": scores(&r) }))
}

fn vote(a: VoteArgs) -> Result<Value> {
    let kind: VotingKind = a.method.parse()?;
    let method = VotingMethod::new(kind, a.n)?;
    let preds = load_all(&a.pred)?;
    let gold = a.gold.as_ref().map(load_ground_truth).transpose()?;
    let qids: Vec<String> = match &gold {
        Some(g) => g.qids(),
        None => preds[0].per_question.keys().cloned().collect(),
    };
    let answers = vote_dataset(&method, &preds, &qids)?;
    write_predictions(&a.out, &answers)?;
    let mut result = json!({ "method": kind.code(), "n": method.depth(), "questions": answers.len() });
    println!("{kind} with n = {}: {} answers written to {}", method.depth(), answers.len(), a.out.display());
    if let Some(g) = gold {
        let r = evaluate(&answers, &g)?;
        print_scores(&kind.to_string(), &r);
        result["scores"] = scores(&r);
    }
    Ok(result)
}

fn dataset_build(a: DatasetBuildArgs) -> Result<Value> {
    let preds = load_all(&a.pred)?;
    let config = StackConfig {
        models: preds.iter().map(|p| p.model_id.clone()).collect(),
        n_per_model: a.n_per_model,
        tokens_per_hypothesis: a.tokens_per_hypothesis,
        max_answer_length: a.max_answer_length,
    };
    config.validate()?;
    let gold = a.gold.as_ref().map(load_ground_truth).transpose()?;
    let qids: Vec<String> = match &gold {
        Some(g) => g.qids(),
        None => preds[0].per_question.keys().cloned().collect(),
    };
    let tok = match (&a.tokenizer, &a.save_tokenizer) {
        (Some(path), _) => Tokenizer::load(path)?,
        (None, Some(path)) => {
            let tok = build_vocab(vocab_corpus(&preds, &qids, &config), &config);
            tok.save(path)?;
            tok
        }
        (None, None) => unreachable!("clap requires one of the tokenizer flags"),
    };
    let examples = build_stack_dataset(&preds, gold.as_ref(), &qids, &tok, &config, a.biased)?;
    write_stack_dataset(&a.out, &examples)?;
    let padded = if examples.is_empty() { 0.0 } else { padding_stats(&examples) };
    println!(
        "{} examples, {} slots × {} tokens, vocabulary {}, padded {:.1}%",
        examples.len(),
        config.num_slots(),
        config.tokens_per_hypothesis,
        tok.vocab_size(),
        100.0 * padded
    );
    Ok(json!({
        "examples": examples.len(),
        "num_slots": config.num_slots(),
        "tokens_per_hypothesis": config.tokens_per_hypothesis,
        "vocab_size": tok.vocab_size(),
        "padded_fraction": padded,
        "biased": a.biased,
    }))
}

fn read_json_object(path: &Path) -> Result<serde_json::Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(Error::Config(format!("{}: {e}", path.display()))),
    }
}

/// defaults < config file < flags
fn layered<T: serde::Serialize + serde::de::DeserializeOwned>(defaults: &T, file: Option<&Path>) -> Result<T> {
    let mut base = serde_json::to_value(defaults).expect("config serialization");
    if let Some(path) = file {
        let obj = base.as_object_mut().expect("config is an object");
        for (k, v) in read_json_object(path)? {
            obj.insert(k, v);
        }
    }
    serde_json::from_value(base).map_err(|e| Error::Config(format!("config: {e}")))
}

fn parse_kl(s: &str) -> Result<KlDirection> {
    match s {
        "conventional" => Ok(KlDirection::Conventional),
        "literal-paper" => Ok(KlDirection::LiteralPaper),
        _ => Err(Error::Validation(format!(
            "unknown KL direction {s:?} (expected conventional or literal-paper)"
        ))),
    }
}

fn train(a: TrainArgs) -> Result<Value> {
    let train_set = read_stack_dataset(&a.train)?;
    let dev_set = read_stack_dataset(&a.dev)?;
    let gold = load_ground_truth(&a.gold)?;
    let tok = Tokenizer::load(&a.tokenizer)?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::Validation(format!("{}: no training examples", a.train.display())))?;
    let h = tok.num_slots();
    let defaults = MetaModelConfig {
        num_slots: h,
        tokens_per_hypothesis: first.x.len() / h.max(1),
        fc_sizes: vec![64, h],
        ..MetaModelConfig::default()
    };
    let mut c = layered(&defaults, a.config.as_deref())?;
    c.seed = a.seed;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag.clone() { c.$field = v; })*};
    }
    set!(epochs => epochs, batch_size => batch_size, lr => lr, min_lr => min_lr, patience => patience,
         lr_factor => lr_factor, embed_dim => embed_dim, conv_channels => conv_channels, fc_sizes => fc_sizes,
         dropout => dropout_p, embed_dropout => embed_dropout_p, noise_sigma => noise_sigma);
    if let Some(k) = &a.kl_direction {
        c.kl_direction = parse_kl(k)?;
    }
    if a.biased_targets {
        c.biased_targets = true;
    }
    for (set, path) in [(&train_set, &a.train), (&dev_set, &a.dev)] {
        if let Some(bad) = set.iter().find(|e| e.x.len() != c.input_len() || e.num_slots() != c.num_slots) {
            return Err(Error::Validation(format!(
                "{}: example {:?} does not match {} slots × {} tokens",
                path.display(),
                bad.qid,
                c.num_slots,
                c.tokens_per_hypothesis
            )));
        }
    }

    let model = meta_model::init_model(&c, &tok, c.seed)?;
    println!("{:>5} {:>12} {:>8} {:>8} {:>10}", "epoch", "train_loss", "dev_EM", "dev_F1", "lr");
    let mut show = |r: &EpochRecord| {
        println!(
            "{:>5} {:>12.6} {:>8.3} {:>8.3} {:>10.3e}",
            r.epoch, r.train_loss, r.dev_em, r.dev_f1, r.lr
        )
    };
    let (model, history) = meta_model::train(model, &train_set, &dev_set, &gold, Some(&mut show))?;
    model.save(&a.out)?;
    fs::write(&a.history, history.to_csv()).map_err(|e| io_err(&a.history, e))?;
    let best = history.best();
    if let Some(b) = best {
        println!("best epoch {}: dev EM {:.3} F1 {:.3}", b.epoch, b.dev_em, b.dev_f1);
    }
    Ok(json!({
        "config": c,
        "epochs": history.epochs,
        "best_epoch": history.best_epoch,
        "checkpoint": a.out,
        "history": a.history,
    }))
}

fn predict(a: PredictArgs) -> Result<Value> {
    let model = MetaModel::load(&a.checkpoint)?;
    let examples = read_stack_dataset(&a.data)?;
    let answers = meta_model::predict(&model, &examples)?;
    write_predictions(&a.out, &answers)?;
    println!("{} answers written to {}", answers.len(), a.out.display());
    let mut result = json!({ "questions": answers.len() });
    if let Some(gold) = &a.gold {
        let r = evaluate(&answers, &load_ground_truth(gold)?)?;
        print_scores("meta-model", &r);
        result["scores"] = scores(&r);
    }
    Ok(result)
}

fn parse_model(spec: &str) -> Result<SynthModel> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Validation(format!("--model {spec:?}: expected id:top1_accuracy:topn_recall:n"));
    if parts.len() != 4 {
        return Err(bad());
    }
    Ok(SynthModel::new(
        parts[0],
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
        parts[3].parse().map_err(|_| bad())?,
    ))
}

fn synth(a: SynthArgs) -> Result<Value> {
    let mut c: SynthConfig = layered(&SynthConfig::default(), a.config.as_deref())?;
    c.seed = a.seed;
    if let Some(s) = a.split {
        c.split_name = s;
    }
    if !a.model.is_empty() {
        c.models = a.model.iter().map(|m| parse_model(m)).collect::<Result<_>>()?;
    }
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = a.$field { c.$field = v; })*};
    }
    set!(unanswerable_fraction, vocab_size, miss_correlation, false_abstention_rate, short_list_fraction);
    if let Some(q) = a.questions {
        c.num_questions = q;
    }
    let out = synth::generate(&c)?;
    let (gold_path, paths) = out.write_to(&a.out_dir)?;
    println!("{} questions written to {}", out.dataset.len(), gold_path.display());
    println!("{:<12} {:>8} {:>8}", "model", "EM@1", "EM@n");
    let mut models = Vec::new();
    for ((m, p), path) in c.models.iter().zip(&out.predictions).zip(&paths) {
        let r = topn_eval(p, &out.dataset, &if m.n > 1 { vec![1, m.n] } else { vec![1] })?;
        let (em1, emn) = (r.per_n[&1].em, r.per_n[&m.n].em);
        println!("{:<12} {:>8.3} {:>8.3}", m.model_id, em1, emn);
        models.push(json!({ "model": m.model_id, "path": path, "top1_em": em1, "topn_em": emn }));
    }
    Ok(json!({ "config": c, "gold": gold_path, "models": models }))
}

fn grad_check(a: GradCheckArgs) -> Result<Value> {
    const H: usize = 4;
    const T: usize = 4;
    let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let tok = Tokenizer::build(words.iter().map(String::as_str), H);
    let config = MetaModelConfig {
        num_slots: H,
        tokens_per_hypothesis: T,
        embed_dim: 4,
        conv_channels: vec![3, 2],
        fc_sizes: vec![3, H],
        dropout_p: 0.0,
        seed: a.seed,
        ..MetaModelConfig::default()
    };
    let model = meta_model::init_model(&config, &tok, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let v = tok.vocab_size() as u32;
    let xs: Vec<Vec<u32>> = (0..a.examples)
        .map(|_| (0..H * T).map(|_| rng.random_range(0..v)).collect())
        .collect();
    let ys: Vec<Vec<f64>> = (0..a.examples)
        .map(|_| softmax(&(0..H).map(|_| rng.random::<f64>()).collect::<Vec<_>>()))
        .collect();
    let xr: Vec<&[u32]> = xs.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    let r = meta_model::gradient_check(&model, &xr, &yr, a.delta, a.tol)?;
    println!(
        "{} parameters checked, {} skipped at kinks, max relative error {:.3e} (tolerance {:.0e}): {}",
        r.checked,
        r.skipped,
        r.max_rel_error,
        a.tol,
        if r.passed { "PASS" } else { "FAIL" }
    );
    let result = json!({
        "checked": r.checked,
        "skipped": r.skipped,
        "max_rel_error": r.max_rel_error,
        "tolerance": a.tol,
        "passed": r.passed,
    });
    if !r.passed {
        return Err(Error::Validation(format!(
            "gradient check failed: max relative error {:.3e} at coordinate {:?}",
            r.max_rel_error, r.worst_index
        )));
    }
    Ok(result)
}
