//! Generic forward/backward through the autograd tape. Handles every
//! configuration, including stochastic embeddings and any number of conv blocks.

use rand::Rng;

use super::{MetaModel, Params, PADDING, POOL};
use crate::autograd::{Graph, Pool, Var};
use crate::error::Result;

struct ParamVars {
    embedding: Var,
    convs: Vec<(Var, Var)>,
    fcs: Vec<(Var, Var)>,
}

fn load_params(g: &mut Graph, params: &Params) -> ParamVars {
    let mut leaf = |t: &crate::autograd::Tensor| g.leaf(t.clone());
    let embedding = leaf(&params.embedding);
    let convs = params.convs.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect();
    let fcs = params.fcs.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect();
    ParamVars { embedding, convs, fcs }
}

fn record_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &MetaModel,
    vars: &ParamVars,
    x: &[u32],
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let cfg = &model.config;
    let ids: Vec<usize> = x.iter().map(|&t| t as usize).collect();
    let mut h = g.embedding(vars.embedding, &ids)?;
    if train && cfg.embed_dropout_p > 0.0 {
        h = g.dropout(h, cfg.embed_dropout_p, rng)?;
    }
    if train && cfg.noise_sigma > 0.0 {
        h = g.gaussian_noise(h, cfg.noise_sigma, rng)?;
    }
    h = g.transpose(h)?;
    let last_conv = vars.convs.len() - 1;
    for (i, &(w, b)) in vars.convs.iter().enumerate() {
        h = g.conv1d(h, w, b, PADDING)?;
        h = g.relu(h);
        let pool = if i == last_conv { Pool::Global } else { Pool::Window(POOL) };
        h = g.maxpool1d(h, pool)?;
    }
    h = g.flatten(h);
    let last_fc = vars.fcs.len() - 1;
    for (i, &(w, b)) in vars.fcs.iter().enumerate() {
        h = g.linear(h, w, b)?;
        if i != last_fc {
            h = g.relu(h);
            if train && cfg.dropout_p > 0.0 {
                h = g.dropout(h, cfg.dropout_p, rng)?;
            }
        }
    }
    g.log_softmax(h)
}

/// Log-probabilities plus the activation-pattern hash of the pass.
pub(super) fn forward<R: Rng + ?Sized>(
    model: &MetaModel,
    x: &[u32],
    train: bool,
    rng: &mut R,
) -> Result<(Vec<f64>, u64)> {
    let mut g = Graph::new();
    let vars = load_params(&mut g, &model.params);
    let out = record_forward(&mut g, model, &vars, x, train, rng)?;
    Ok((g.value(out).data().to_vec(), g.activation_pattern()))
}

pub(super) fn batch_loss<R: Rng + ?Sized>(
    model: &MetaModel,
    xs: &[&[u32]],
    targets: &[&[f64]],
    train: bool,
    rng: &mut R,
    grads: Option<&mut Params>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = load_params(&mut g, &model.params);
    let mut losses = Vec::with_capacity(xs.len());
    for (x, y) in xs.iter().zip(targets) {
        let lp = record_forward(&mut g, model, &vars, x, train, rng)?;
        losses.push(g.kl_div(lp, y, model.config.kl_direction)?);
    }
    let total = g.sum(&losses)?;
    let loss = g.value(total).data()[0];
    if let Some(grads) = grads {
        g.backward(total)?;
        let add = |dst: &mut crate::autograd::Tensor, v: Var| {
            let src = g.grad(v).expect("gradient after backward");
            for (d, s) in dst.data_mut().iter_mut().zip(src) {
                *d += s;
            }
        };
        add(&mut grads.embedding, vars.embedding);
        for (l, &(w, b)) in grads.convs.iter_mut().zip(&vars.convs) {
            add(&mut l.weight, w);
            add(&mut l.bias, b);
        }
        for (l, &(w, b)) in grads.fcs.iter_mut().zip(&vars.fcs) {
            add(&mut l.weight, w);
            add(&mut l.bias, b);
        }
    }
    Ok(loss)
}
