use super::*;
use crate::prediction_io::GroundTruth;
use rand::Rng;

fn tiny_config() -> MetaModelConfig {
    MetaModelConfig {
        num_slots: 4,
        tokens_per_hypothesis: 4,
        embed_dim: 4,
        conv_channels: vec![3, 2],
        fc_sizes: vec![3, 4],
        dropout_p: 0.0,
        epochs: 5,
        batch_size: 4,
        ..MetaModelConfig::default()
    }
}

fn tokenizer(num_slots: usize, words: usize) -> Tokenizer {
    let texts: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
    Tokenizer::build(texts.iter().map(String::as_str), num_slots)
}

fn random_inputs(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
        .collect()
}

fn random_targets(n: usize, h: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s: Vec<f64> = (0..h).map(|_| rng.random::<f64>()).collect();
            crate::stacking::softmax(&s)
        })
        .collect()
}

fn tiny_model(seed: u64) -> MetaModel {
    init_model(&tiny_config(), &tokenizer(4, 20), seed).unwrap()
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = tiny_model(1);
    assert_eq!(a, tiny_model(1));
    assert_ne!(a.params, tiny_model(2).params);
    assert_eq!(a.params.embedding.shape(), &[4 + 4 + 20, 4]);
    assert_eq!(a.params.convs[0].weight.shape(), &[3, 4, 3]);
    assert_eq!(a.params.convs[1].weight.shape(), &[2, 3, 3]);
    assert_eq!(a.params.fcs[0].weight.shape(), &[3, 2]);
    assert_eq!(a.params.fcs[1].weight.shape(), &[4, 3]);
    let bound = (1.0f64 / 12.0).sqrt();
    assert!(a.params.convs[0].weight.data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn config_validation() {
    let mut c = tiny_config();
    c.fc_sizes = vec![3, 5];
    assert!(c.validate().unwrap_err().to_string().contains("number of slots"));
    let mut c = tiny_config();
    c.dropout_p = 1.0;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.conv_channels = vec![];
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.conv_channels = vec![2; 6];
    assert!(c.validate().unwrap_err().to_string().contains("too short"));
    assert!(MetaModelConfig::default().validate().is_ok());

    let err = init_model(&tiny_config(), &tokenizer(5, 3), 0).unwrap_err();
    assert!(err.to_string().contains("slots"), "{err}");
}

#[test]
fn forward_is_a_distribution_over_slots() {
    let m = tiny_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for x in random_inputs(5, 16, 28, 4) {
        let lp = m.forward(&x, false, &mut rng).unwrap();
        assert_eq!(lp.len(), 4);
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    assert!(m.forward(&[0; 15], false, &mut rng).is_err());
    assert!(m.forward(&[99; 16], false, &mut rng).is_err());
}

#[test]
fn eval_mode_ignores_the_rng() {
    let mut m = tiny_model(5);
    m.config.dropout_p = 0.5;
    m.config.noise_sigma = 0.3;
    let x = &random_inputs(1, 16, 28, 6)[0];
    let a = m.forward(x, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = m.forward(x, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    let c = m.forward(x, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_ne!(a, c);
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-9))
        .fold(0.0, f64::max)
}

fn fast_vs_tape(model: &MetaModel, n: usize, train: bool) {
    let xs = random_inputs(n, model.config.input_len(), model.tokenizer.vocab_size(), 7);
    let ys = random_targets(n, model.config.num_slots, 8);
    let xr: Vec<&[u32]> = xs.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    let mut g_fast = model.params.zeros_like();
    let mut g_tape = model.params.zeros_like();
    let l_fast = model
        .batch_loss(&xr, &yr, train, &mut ChaCha8Rng::seed_from_u64(9), Some(&mut g_fast))
        .unwrap();
    let l_tape = model
        .batch_loss_dense(&xr, &yr, train, &mut ChaCha8Rng::seed_from_u64(9), Some(&mut g_tape))
        .unwrap();
    assert!((l_fast - l_tape).abs() < 1e-10 * l_tape.abs().max(1.0), "{l_fast} vs {l_tape}");
    let d = max_rel_diff(&g_fast.flatten(), &g_tape.flatten());
    assert!(d < 1e-8, "gradient mismatch {d}");
    let fast_out = model.forward_batch(&xr).unwrap();
    for (x, f) in xr.iter().zip(fast_out) {
        let (t, _) = dense::forward(model, x, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(max_rel_diff(&f, &t) < 1e-10);
    }
}

#[test]
fn token_path_matches_the_tape() {
    fast_vs_tape(&tiny_model(11), 6, false);

    // repeated tokens exercise the per-window memo
    let cfg = MetaModelConfig {
        num_slots: 3,
        tokens_per_hypothesis: 5,
        embed_dim: 6,
        conv_channels: vec![8, 5],
        fc_sizes: vec![7, 3],
        dropout_p: 0.3,
        ..MetaModelConfig::default()
    };
    let m = init_model(&cfg, &tokenizer(3, 2), 12).unwrap();
    fast_vs_tape(&m, 9, false);
    fast_vs_tape(&m, 9, true);
}

#[test]
fn other_depths_use_the_tape() {
    for channels in [vec![3], vec![3, 4, 2]] {
        let cfg = MetaModelConfig {
            conv_channels: channels,
            ..tiny_config()
        };
        let m = init_model(&cfg, &tokenizer(4, 20), 13).unwrap();
        let x = &random_inputs(1, 16, 28, 14)[0];
        let lp = m.forward(x, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn end_to_end_check(direction: KlDirection) {
    let mut model = tiny_model(21);
    model.config.kl_direction = direction;
    let xs = random_inputs(3, 16, 28, 22);
    let ys = random_targets(3, 4, 23);
    let xr: Vec<&[u32]> = xs.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    let report = gradient_check(&model, &xr, &yr, 1e-6, 1e-4).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked > report.skipped, "{report:?}");
}

#[test]
fn end_to_end_gradient_check() {
    end_to_end_check(KlDirection::Conventional);
    end_to_end_check(KlDirection::LiteralPaper);
}

#[test]
fn single_example_loss_decreases() {
    let m = tiny_model(31);
    let x = random_inputs(1, 16, 28, 32);
    let y = vec![vec![0.7, 0.1, 0.1, 0.1]];
    let xr: Vec<&[u32]> = x.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
    let mut model = m.clone();
    let mut adam = Adam::new(0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut losses = Vec::new();
    for _ in 0..5 {
        let mut g = model.params.zeros_like();
        losses.push(model.batch_loss(&xr, &yr, true, &mut rng, Some(&mut g)).unwrap());
        let named = g.named();
        adam.step(
            model
                .params
                .tensors_mut()
                .into_iter()
                .zip(named)
                .map(|(p, (_, g))| (p.data_mut(), g.data())),
        )
        .unwrap();
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn memorizes_a_small_set() {
    let cfg = MetaModelConfig {
        num_slots: 4,
        tokens_per_hypothesis: 4,
        embed_dim: 16,
        conv_channels: vec![32, 16],
        fc_sizes: vec![16, 4],
        dropout_p: 0.0,
        ..MetaModelConfig::default()
    };
    let mut model = init_model(&cfg, &tokenizer(4, 20), 41).unwrap();
    let xs = random_inputs(32, 16, 28, 42);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let ys: Vec<Vec<f64>> = (0..32)
        .map(|_| {
            let mut s = vec![0.0; 4];
            s[rng.random_range(0..4)] = 1.0;
            crate::stacking::softmax(&s)
        })
        .collect();
    let xr: Vec<&[u32]> = xs.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(0.01).unwrap();
    for _ in 0..200 {
        let mut g = model.params.zeros_like();
        model.batch_loss(&xr, &yr, true, &mut rng, Some(&mut g)).unwrap();
        let named = g.named();
        adam.step(
            model
                .params
                .tensors_mut()
                .into_iter()
                .zip(named)
                .map(|(p, (_, g))| (p.data_mut(), g.data())),
        )
        .unwrap();
    }
    let out = model.forward_batch(&xr).unwrap();
    let agree = out
        .iter()
        .zip(&ys)
        .filter(|(lp, y)| select_slot(lp, &[false; 4]) == select_slot(y, &[false; 4]))
        .count();
    assert!(agree as f64 >= 0.95 * 32.0, "agreement {agree}/32");
}

fn toy_examples(model: &MetaModel, n: usize) -> (Vec<StackExample>, Dataset) {
    let xs = random_inputs(n, 16, model.tokenizer.vocab_size(), 51);
    let ys = random_targets(n, 4, 52);
    let mut per_question = BTreeMap::new();
    let examples = xs
        .into_iter()
        .zip(ys)
        .enumerate()
        .map(|(i, (x, y))| {
            let qid = format!("q{i}");
            per_question.insert(
                qid.clone(),
                GroundTruth {
                    answers: vec!["alpha".into()],
                    is_impossible: false,
                },
            );
            StackExample {
                qid,
                x,
                y: Some(y),
                surfaces: vec!["alpha".into(), "beta".into(), "".into(), "".into()],
                na_flags: vec![false, false, true, false],
                pad_flags: vec![false, false, false, true],
                f1s: None,
            }
        })
        .collect();
    let dataset = Dataset {
        split_name: "dev".into(),
        per_question,
    };
    (examples, dataset)
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let mut m = tiny_model(61);
    m.config.epochs = 0;
    let (ex, ds) = toy_examples(&m, 4);
    let (trained, history) = train(m.clone(), &ex, &ex, &ds, None).unwrap();
    assert_eq!(trained, m);
    assert!(history.epochs.is_empty() && history.best_epoch.is_none());
    assert_eq!(history.to_csv(), "epoch,train_loss,dev_em,dev_f1,lr\n");
}

#[test]
fn training_is_reproducible_and_keeps_the_best_epoch() {
    let m = tiny_model(71);
    let (ex, ds) = toy_examples(&m, 10);
    let mut seen = 0;
    let mut obs = |_: &EpochRecord| seen += 1;
    let (a, ha) = train(m.clone(), &ex, &ex, &ds, Some(&mut obs)).unwrap();
    assert_eq!(seen, 5);
    let (b, hb) = train(m, &ex, &ex, &ds, None).unwrap();
    assert_eq!(a.to_checkpoint_string(), b.to_checkpoint_string());
    assert_eq!(ha.to_csv(), hb.to_csv());
    assert_eq!(ha.epochs.len(), 5);
    let best = ha.best().unwrap();
    assert!(ha.epochs.iter().all(|r| r.dev_f1 <= best.dev_f1));
    assert!(ha.epochs.iter().all(|r| r.train_loss.is_finite() && r.train_loss >= 0.0));

    let mut no_target = ex.clone();
    no_target[0].y = None;
    assert!(train(a, &no_target, &ex, &ds, None).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let m = tiny_model(81);
    let s = m.to_checkpoint_string();
    assert!(s.starts_with("{\"config\"") && s.ends_with('\n'));
    let back = MetaModel::from_checkpoint_str(&s).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_checkpoint_string(), s);

    let bad = s.replace(CHECKPOINT_FORMAT, "other-v0");
    assert!(MetaModel::from_checkpoint_str(&bad).unwrap_err().to_string().contains("format"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    m.save(&path).unwrap();
    assert_eq!(MetaModel::load(&path).unwrap(), m);
    assert!(MetaModel::load(dir.path().join("missing.json")).unwrap_err().is_io());
}

#[test]
fn prediction_skips_padding_and_maps_no_answer() {
    assert_eq!(select_slot(&[0.0, 5.0, 1.0], &[false, true, false]), Some(2));
    assert_eq!(select_slot(&[1.0, 1.0], &[false, false]), Some(0));
    assert_eq!(select_slot(&[1.0], &[true]), None);

    let m = tiny_model(91);
    let (mut ex, _) = toy_examples(&m, 3);
    for e in &mut ex {
        e.pad_flags = vec![true, true, false, true];
    }
    let answers = predict(&m, &ex).unwrap();
    assert!(answers.values().all(String::is_empty));
    ex[0].pad_flags = vec![true; 4];
    assert!(predict(&m, &ex).is_err());
}
