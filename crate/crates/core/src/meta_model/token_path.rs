//! Exact fast evaluator for the two-block architecture.
//!
//! The first convolution is factorized per vocabulary entry: every token in
//! the batch is projected once onto all 3·C1 kernel taps, so a conv output is
//! a sum of three table lookups. A pooled column after the first block only
//! depends on the four tokens under its two windows, so pooled columns are
//! computed once per distinct 4-gram. The second convolution is projected per
//! distinct 4-gram the same way. Gradients follow the same factorization.

use std::collections::HashMap;

use rand::Rng;

use super::{MetaModel, Params};
use crate::autograd::linalg::{gemm, Op};
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

pub(super) struct Output {
    pub log_probs: Vec<Vec<f64>>,
    pub loss: f64,
}

/// How the gradient of a pooled unit reaches the first convolution.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Route {
    Dead,
    First,
    Second,
}

struct Windows {
    /// Distinct token ids in first-appearance order.
    tokens: Vec<u32>,
    /// Per distinct 4-gram, indices into `tokens` (`NONE` outside the sequence).
    keys: Vec<[usize; 4]>,
    /// Per example, the 4-gram index of every pooled column.
    columns: Vec<Vec<usize>>,
}

fn collect_windows(xs: &[&[u32]], pooled_len: usize) -> Windows {
    let mut token_index: HashMap<u32, usize> = HashMap::new();
    let mut key_index: HashMap<[usize; 4], usize> = HashMap::new();
    let mut w = Windows {
        tokens: Vec::new(),
        keys: Vec::new(),
        columns: Vec::with_capacity(xs.len()),
    };
    for x in xs {
        let mut tok = |pos: isize| -> usize {
            if pos < 0 || pos as usize >= x.len() {
                return NONE;
            }
            let id = x[pos as usize];
            *token_index.entry(id).or_insert_with(|| {
                w.tokens.push(id);
                w.tokens.len() - 1
            })
        };
        let mut cols = Vec::with_capacity(pooled_len);
        for j in 0..pooled_len as isize {
            let key = [tok(2 * j - 1), tok(2 * j), tok(2 * j + 1), tok(2 * j + 2)];
            let idx = *key_index.entry(key).or_insert_with(|| {
                w.keys.push(key);
                w.keys.len() - 1
            });
            cols.push(idx);
        }
        w.columns.push(cols);
    }
    w
}

/// `[C_out×C_in×3]` kernel → `[3·C_out × C_in]` with row `k·C_out + o`.
fn taps_major(kernel: &Tensor) -> Vec<f64> {
    let (c_out, c_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let w = kernel.data();
    let mut out = vec![0.0; k * c_out * c_in];
    for o in 0..c_out {
        for i in 0..c_in {
            for kk in 0..k {
                out[(kk * c_out + o) * c_in + i] = w[(o * c_in + i) * k + kk];
            }
        }
    }
    out
}

fn add_taps_major(kernel_grad: &mut Tensor, taps: &[f64]) {
    let (c_out, c_in, k) = (kernel_grad.shape()[0], kernel_grad.shape()[1], kernel_grad.shape()[2]);
    let g = kernel_grad.data_mut();
    for kk in 0..k {
        for o in 0..c_out {
            let row = &taps[(kk * c_out + o) * c_in..(kk * c_out + o + 1) * c_in];
            for (i, v) in row.iter().enumerate() {
                g[(o * c_in + i) * k + kk] += v;
            }
        }
    }
}

pub(super) fn run<R: Rng + ?Sized>(
    model: &MetaModel,
    xs: &[&[u32]],
    targets: Option<&[&[f64]]>,
    train: bool,
    rng: &mut R,
    grads: Option<&mut Params>,
) -> Result<Output> {
    if grads.is_some() && targets.is_none() {
        return Err(Error::validation("gradients requested without targets"));
    }
    if xs.is_empty() {
        return Ok(Output {
            log_probs: Vec::new(),
            loss: 0.0,
        });
    }
    let p = &model.params;
    let (conv1, conv2) = (&p.convs[0], &p.convs[1]);
    let e = model.config.embed_dim;
    let c1 = conv1.weight.shape()[0];
    let c2 = conv2.weight.shape()[0];
    let pooled_len = model.config.input_len() / 2;

    let win = collect_windows(xs, pooled_len);
    let n_tok = win.tokens.len();
    let n_key = win.keys.len();

    let table = p.embedding.data();
    let mut emb = Vec::with_capacity(n_tok * e);
    for &t in &win.tokens {
        emb.extend_from_slice(&table[t as usize * e..(t as usize + 1) * e]);
    }
    let taps1 = taps_major(&conv1.weight);
    let mut proj1 = vec![0.0; n_tok * 3 * c1];
    gemm(n_tok, e, 3 * c1, 1.0, &emb, Op::N, &taps1, Op::T, 0.0, &mut proj1);

    // first block: conv, ReLU, pool 2, once per distinct 4-gram
    let b1 = conv1.bias.data();
    let mut pooled = vec![0.0; n_key * c1];
    let mut routes = vec![Route::Dead; n_key * c1];
    let mut pre = vec![0.0; 2 * c1];
    for (ki, key) in win.keys.iter().enumerate() {
        for (half, out) in pre.chunks_mut(c1).enumerate() {
            out.copy_from_slice(b1);
            for kk in 0..3 {
                let t = key[half + kk];
                if t != NONE {
                    let row = &proj1[(t * 3 + kk) * c1..(t * 3 + kk + 1) * c1];
                    for (z, v) in out.iter_mut().zip(row) {
                        *z += v;
                    }
                }
            }
        }
        let (first, second) = pre.split_at(c1);
        for o in 0..c1 {
            let (a, b) = (first[o].max(0.0), second[o].max(0.0));
            let (value, route) = if b > a { (b, Route::Second) } else { (a, Route::First) };
            pooled[ki * c1 + o] = value;
            routes[ki * c1 + o] = if value > 0.0 { route } else { Route::Dead };
        }
    }

    let taps2 = taps_major(&conv2.weight);
    let mut proj2 = vec![0.0; n_key * 3 * c2];
    gemm(n_key, c1, 3 * c2, 1.0, &pooled, Op::N, &taps2, Op::T, 0.0, &mut proj2);

    // second block: conv, ReLU, global max with first-index ties;
    // `NONE` marks a maximum on an inactive unit
    let b2 = conv2.bias.data();
    let mut features = Vec::with_capacity(xs.len());
    let mut argmax = Vec::with_capacity(xs.len());
    let mut z = vec![0.0; c2];
    for cols in &win.columns {
        let mut best = vec![0.0; c2];
        let mut best_at = vec![0usize; c2];
        for t in 0..pooled_len {
            z.copy_from_slice(b2);
            for kk in 0..3 {
                let pos = t + kk;
                if pos == 0 || pos > pooled_len {
                    continue;
                }
                let key = cols[pos - 1];
                let row = &proj2[(key * 3 + kk) * c2..(key * 3 + kk + 1) * c2];
                for (zc, v) in z.iter_mut().zip(row) {
                    *zc += v;
                }
            }
            for c in 0..c2 {
                let a = z[c].max(0.0);
                if t == 0 || a > best[c] {
                    best[c] = a;
                    best_at[c] = t;
                }
            }
        }
        for c in 0..c2 {
            if best[c] <= 0.0 {
                best_at[c] = NONE;
            }
        }
        features.push(best);
        argmax.push(best_at);
    }

    // fully connected head on the tape
    let mut g = Graph::new();
    let fc_vars: Vec<(Var, Var)> = p
        .fcs
        .iter()
        .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
        .collect();
    let mut feature_vars = Vec::with_capacity(xs.len());
    let mut outputs = Vec::with_capacity(xs.len());
    let mut losses = Vec::new();
    let cfg = &model.config;
    for (i, f) in features.into_iter().enumerate() {
        let mut h = g.leaf(Tensor::from_vec(f));
        feature_vars.push(h);
        for (li, &(w, b)) in fc_vars.iter().enumerate() {
            h = g.linear(h, w, b)?;
            if li + 1 != fc_vars.len() {
                h = g.relu(h);
                if train && cfg.dropout_p > 0.0 {
                    h = g.dropout(h, cfg.dropout_p, rng)?;
                }
            }
        }
        let lp = g.log_softmax(h)?;
        outputs.push(lp);
        if let Some(ys) = targets {
            losses.push(g.kl_div(lp, ys[i], cfg.kl_direction)?);
        }
    }
    let log_probs: Vec<Vec<f64>> = outputs.iter().map(|&v| g.value(v).data().to_vec()).collect();
    let mut loss = 0.0;
    if targets.is_some() {
        let total = g.sum(&losses)?;
        loss = g.value(total).data()[0];
        if let Some(grads) = grads {
            g.backward(total)?;
            for (l, &(w, b)) in grads.fcs.iter_mut().zip(&fc_vars) {
                add_into(&mut l.weight, g.grad(w));
                add_into(&mut l.bias, g.grad(b));
            }
            let dfeat: Vec<&[f64]> = feature_vars
                .iter()
                .map(|&v| g.grad(v).expect("gradient after backward"))
                .collect();
            backward_convs(
                grads, &win, &dfeat, &argmax, &pooled, &routes, &taps1, &taps2, &emb, e, c1, c2, pooled_len,
            );
        }
    }
    Ok(Output { log_probs, loss })
}

fn add_into(dst: &mut Tensor, src: Option<&[f64]>) {
    let src = src.expect("gradient after backward");
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_convs(
    grads: &mut Params,
    win: &Windows,
    dfeat: &[&[f64]],
    argmax: &[Vec<usize>],
    pooled: &[f64],
    routes: &[Route],
    taps1: &[f64],
    taps2: &[f64],
    emb: &[f64],
    e: usize,
    c1: usize,
    c2: usize,
    pooled_len: usize,
) {
    let n_key = win.keys.len();
    let n_tok = win.tokens.len();

    // second block
    let mut g2 = vec![0.0; n_key * 3 * c2];
    {
        let db2 = grads.convs[1].bias.data_mut();
        for ((cols, d), at) in win.columns.iter().zip(dfeat).zip(argmax) {
            for c in 0..c2 {
                let (dc, t) = (d[c], at[c]);
                if t == NONE {
                    continue;
                }
                db2[c] += dc;
                for kk in 0..3 {
                    let pos = t + kk;
                    if pos == 0 || pos > pooled_len {
                        continue;
                    }
                    g2[(cols[pos - 1] * 3 + kk) * c2 + c] += dc;
                }
            }
        }
    }
    let mut dtaps2 = vec![0.0; 3 * c2 * c1];
    gemm(3 * c2, n_key, c1, 1.0, &g2, Op::T, pooled, Op::N, 0.0, &mut dtaps2);
    add_taps_major(&mut grads.convs[1].weight, &dtaps2);
    let mut dpooled = vec![0.0; n_key * c1];
    gemm(n_key, 3 * c2, c1, 1.0, &g2, Op::N, taps2, Op::N, 0.0, &mut dpooled);

    // first block
    let mut g1 = vec![0.0; n_tok * 3 * c1];
    {
        let db1 = grads.convs[0].bias.data_mut();
        for (ki, key) in win.keys.iter().enumerate() {
            for o in 0..c1 {
                let d = dpooled[ki * c1 + o];
                let offset = match routes[ki * c1 + o] {
                    Route::Dead => continue,
                    Route::First => 0,
                    Route::Second => 1,
                };
                db1[o] += d;
                for kk in 0..3 {
                    let t = key[offset + kk];
                    if t != NONE {
                        g1[(t * 3 + kk) * c1 + o] += d;
                    }
                }
            }
        }
    }
    let mut dtaps1 = vec![0.0; 3 * c1 * e];
    gemm(3 * c1, n_tok, e, 1.0, &g1, Op::T, emb, Op::N, 0.0, &mut dtaps1);
    add_taps_major(&mut grads.convs[0].weight, &dtaps1);
    let mut demb = vec![0.0; n_tok * e];
    gemm(n_tok, 3 * c1, e, 1.0, &g1, Op::N, taps1, Op::N, 0.0, &mut demb);
    let table = grads.embedding.data_mut();
    for (ti, &t) in win.tokens.iter().enumerate() {
        let dst = &mut table[t as usize * e..(t as usize + 1) * e];
        for (a, b) in dst.iter_mut().zip(&demb[ti * e..(ti + 1) * e]) {
            *a += b;
        }
    }
}
