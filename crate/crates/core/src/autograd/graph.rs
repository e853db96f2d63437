use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::linalg::{gemm, Op as G};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Window(usize),
    Global,
}

/// Which way round the KL divergence is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum KlDirection {
    /// Σ y·(ln y − ŷ), target first.
    #[default]
    Conventional,
    /// Σ exp(ŷ)·(ŷ − ln y), prediction first.
    LiteralPaper,
}

enum Op {
    Leaf,
    Embedding { table: Var, ids: Vec<usize> },
    Transpose { input: Var },
    Reshape { input: Var },
    Conv1d { input: Var, kernel: Var, bias: Var, padding: usize, cols: Vec<f64> },
    MaxPool { input: Var, argmax: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    Scale { input: Var, mask: Vec<f64> },
    Identity { input: Var },
    LogSoftmax { input: Var },
    KlDiv { log_pred: Var, target: Vec<f64>, direction: KlDirection },
    Sum { inputs: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of recorded operations. Values are computed eagerly; `backward`
/// walks the tape in reverse and stores gradients on every node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn im2col(input: &[f64], c_in: usize, len: usize, k: usize, padding: usize, l_out: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c_in * k * l_out];
    for c in 0..c_in {
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
            for (t, v) in row.iter_mut().enumerate() {
                let pos = t + kk;
                if pos >= padding && pos - padding < len {
                    *v = input[c * len + pos - padding];
                }
            }
        }
    }
    cols
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves a node's value (and gradient) out of the graph.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    /// Row gather: `[V×E]` table, `L` ids → `[L×E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let v = t.dim(0, 2, "embedding table")?;
        let e = t.shape()[1];
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(format!("embedding id {bad} out of range for {v} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&t.data()[i * e..(i + 1) * e]);
        }
        let value = Tensor::new(vec![ids.len(), e], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let r = x.dim(0, 2, "transpose input")?;
        let c = x.shape()[1];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose { input }))
    }

    pub fn flatten(&mut self, input: Var) -> Var {
        let x = self.value(input).clone();
        let n = x.numel();
        self.push(Tensor::new(vec![n], x.into_data()).expect("flatten"), Op::Reshape { input })
    }

    /// Stride-1 cross-correlation with zero padding:
    /// `[C_in×L]` ⊛ `[C_out×C_in×K]` + `[C_out]` → `[C_out × (L + 2·padding − K + 1)]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let b = self.value(bias);
        let c_in = x.dim(0, 2, "conv1d input")?;
        let len = x.shape()[1];
        let c_out = w.dim(0, 3, "conv1d kernel")?;
        let (kc, k) = (w.shape()[1], w.shape()[2]);
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv1d kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if b.shape() != [c_out] {
            return Err(Error::shape(format!(
                "conv1d bias shape {:?} does not match {c_out} output channels",
                b.shape()
            )));
        }
        if len + 2 * padding < k {
            return Err(Error::shape(format!(
                "conv1d input length {len} with padding {padding} shorter than kernel {k}"
            )));
        }
        let l_out = len + 2 * padding - k + 1;
        let cols = im2col(x.data(), c_in, len, k, padding, l_out);
        let mut out = vec![0.0; c_out * l_out];
        for (o, row) in out.chunks_mut(l_out.max(1)).enumerate().take(c_out) {
            row.fill(b.data()[o]);
        }
        gemm(c_out, c_in * k, l_out, 1.0, w.data(), G::N, &cols, G::N, 1.0, &mut out);
        let value = Tensor::new(vec![c_out, l_out], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                kernel,
                bias,
                padding,
                cols,
            },
        ))
    }

    /// Per-channel max over non-overlapping windows (or the whole row).
    /// Ties go to the first position.
    pub fn maxpool1d(&mut self, input: Var, pool: Pool) -> Result<Var> {
        let x = self.value(input);
        let c = x.dim(0, 2, "maxpool input")?;
        let len = x.shape()[1];
        let window = match pool {
            Pool::Window(0) => return Err(Error::shape("maxpool window must be at least 1")),
            Pool::Window(w) if w > len => {
                return Err(Error::shape(format!("maxpool window {w} exceeds length {len}")))
            }
            Pool::Window(w) => w,
            Pool::Global if len == 0 => return Err(Error::shape("global maxpool over empty input")),
            Pool::Global => len,
        };
        let l_out = len / window;
        let mut out = Vec::with_capacity(c * l_out);
        let mut argmax = Vec::with_capacity(c * l_out);
        for ch in 0..c {
            for j in 0..l_out {
                let start = ch * len + j * window;
                let mut best = start;
                for i in start + 1..start + window {
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                out.push(x.data()[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![c, l_out], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    /// `y = W·x + b` for a vector `x` (`[in]`) or each row of `[rows×in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let n_out = w.dim(0, 2, "linear weight")?;
        let n_in = w.shape()[1];
        let in_dim = *x.shape().last().unwrap_or(&0);
        if in_dim != n_in || x.numel() % n_in.max(1) != 0 {
            return Err(Error::shape(format!(
                "linear weight [{n_out}×{n_in}] cannot take input {:?}",
                x.shape()
            )));
        }
        if b.shape() != [n_out] {
            return Err(Error::shape(format!("linear bias shape {:?} != [{n_out}]", b.shape())));
        }
        let rows = x.numel() / n_in.max(1);
        let mut out: Vec<f64> = (0..rows).flat_map(|_| b.data().iter().copied()).collect();
        gemm(rows, n_in, n_out, 1.0, x.data(), G::N, w.data(), G::T, 1.0, &mut out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 1") = n_out;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("relu shape");
        self.push(value, Op::Relu { input })
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by 1/(1−p).
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        let x = self.value(input);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if p > 0.0 && rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale { input, mask }))
    }

    /// Adds i.i.d. N(0, σ²) noise.
    pub fn gaussian_noise<R: Rng + ?Sized>(&mut self, input: Var, sigma: f64, rng: &mut R) -> Result<Var> {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(format!("noise sigma {sigma}: {e}")))?;
        let x = self.value(input);
        let data = x.data().iter().map(|v| v + normal.sample(rng)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Identity { input }))
    }

    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        x.dim(0, 1, "log_softmax input")?;
        let value = Tensor::from_vec(log_softmax(x.data()));
        Ok(self.push(value, Op::LogSoftmax { input }))
    }

    /// Scalar KL divergence between a log-probability vector and a target
    /// distribution (summed over entries).
    pub fn kl_div(&mut self, log_pred: Var, target: &[f64], direction: KlDirection) -> Result<Var> {
        let lp = self.value(log_pred);
        if lp.numel() != target.len() {
            return Err(Error::shape(format!(
                "kl_div: prediction has {} entries, target {}",
                lp.numel(),
                target.len()
            )));
        }
        let loss = kl_div_loss(lp.data(), target, direction)?;
        Ok(self.push(
            Tensor::from_vec(vec![loss]),
            Op::KlDiv {
                log_pred,
                target: target.to_vec(),
                direction,
            },
        ))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &v in inputs {
            let x = self.value(v);
            if x.numel() != 1 {
                return Err(Error::shape(format!("sum expects scalars, got shape {:?}", x.shape())));
            }
            total += x.data()[0];
        }
        Ok(self.push(
            Tensor::from_vec(vec![total]),
            Op::Sum {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Hash of every ReLU sign pattern and pooling argmax on the tape; equal
    /// hashes mean the same piecewise-linear region.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { .. } => {
                    for &v in node.value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar `loss`. Every node gets a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.numel()]).collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let g = std::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Embedding { table, ids } => {
                    let e = self.nodes[table.0].value.shape()[1];
                    let tg = &mut grads[table.0];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..e {
                            tg[id * e + j] += g[row * e + j];
                        }
                    }
                }
                Op::Transpose { input } => {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    let ig = &mut grads[input.0];
                    for i in 0..r {
                        for j in 0..c {
                            ig[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::Reshape { input } | Op::Identity { input } => {
                    for (a, b) in grads[input.0].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Conv1d {
                    input,
                    kernel,
                    bias,
                    padding,
                    cols,
                } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[kernel.0].value;
                    let (c_in, len) = (x.shape()[0], x.shape()[1]);
                    let (c_out, k) = (w.shape()[0], w.shape()[2]);
                    let l_out = node.value.shape()[1];
                    for o in 0..c_out {
                        grads[bias.0][o] += g[o * l_out..(o + 1) * l_out].iter().sum::<f64>();
                    }
                    gemm(c_out, l_out, c_in * k, 1.0, &g, G::N, cols, G::T, 1.0, &mut grads[kernel.0]);
                    let mut dcols = vec![0.0; c_in * k * l_out];
                    gemm(c_in * k, c_out, l_out, 1.0, w.data(), G::T, &g, G::N, 0.0, &mut dcols);
                    let ig = &mut grads[input.0];
                    for c in 0..c_in {
                        for kk in 0..k {
                            let row = &dcols[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
                            for (t, v) in row.iter().enumerate() {
                                let pos = t + kk;
                                if pos >= *padding && pos - padding < len {
                                    ig[c * len + pos - padding] += v;
                                }
                            }
                        }
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let ig = &mut grads[input.0];
                    for (gv, &src) in g.iter().zip(argmax) {
                        ig[src] += gv;
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let w = &self.nodes[weight.0].value;
                    let x = &self.nodes[input.0].value;
                    let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
                    let rows = x.numel() / n_in.max(1);
                    for r in 0..rows {
                        for o in 0..n_out {
                            grads[bias.0][o] += g[r * n_out + o];
                        }
                    }
                    gemm(n_out, rows, n_in, 1.0, &g, G::T, x.data(), G::N, 1.0, &mut grads[weight.0]);
                    gemm(rows, n_out, n_in, 1.0, &g, G::N, w.data(), G::N, 1.0, &mut grads[input.0]);
                }
                Op::Relu { input } => {
                    let ig = &mut grads[input.0];
                    for ((a, gv), y) in ig.iter_mut().zip(&g).zip(node.value.data()) {
                        if *y > 0.0 {
                            *a += gv;
                        }
                    }
                }
                Op::Scale { input, mask } => {
                    for ((a, gv), m) in grads[input.0].iter_mut().zip(&g).zip(mask) {
                        *a += gv * m;
                    }
                }
                Op::LogSoftmax { input } => {
                    // d/dx_i = g_i − softmax_i · Σ g
                    let total: f64 = g.iter().sum();
                    for ((a, gv), y) in grads[input.0].iter_mut().zip(&g).zip(node.value.data()) {
                        *a += gv - y.exp() * total;
                    }
                }
                Op::KlDiv {
                    log_pred,
                    target,
                    direction,
                } => {
                    let lp = self.nodes[log_pred.0].value.data();
                    let lg = &mut grads[log_pred.0];
                    for i in 0..target.len() {
                        let d = match direction {
                            KlDirection::Conventional => -target[i],
                            KlDirection::LiteralPaper => {
                                let p = lp[i].exp();
                                p * (lp[i] - target[i].ln() + 1.0)
                            }
                        };
                        lg[i] += g[0] * d;
                    }
                }
                Op::Sum { inputs } => {
                    for v in inputs {
                        grads[v.0][0] += g[0];
                    }
                }
            }
            grads[idx] = g;
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.set_grad(g);
        }
        Ok(())
    }
}

/// Numerically stable log-softmax of a vector.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// KL divergence with summative reduction. `0·ln 0` counts as 0.
pub fn kl_div_loss(log_pred: &[f64], target: &[f64], direction: KlDirection) -> Result<f64> {
    if log_pred.len() != target.len() {
        return Err(Error::shape("kl_div_loss: length mismatch"));
    }
    let total: f64 = target.iter().sum();
    if (total - 1.0).abs() > 1e-6 || target.iter().any(|&t| t < 0.0) {
        return Err(Error::validation(format!(
            "KL target must be a distribution (sum {total})"
        )));
    }
    let loss = match direction {
        KlDirection::Conventional => target
            .iter()
            .zip(log_pred)
            .filter(|(&y, _)| y > 0.0)
            .map(|(&y, &lp)| y * (y.ln() - lp))
            .sum(),
        KlDirection::LiteralPaper => target
            .iter()
            .zip(log_pred)
            .map(|(&y, &lp)| {
                let p = lp.exp();
                if p == 0.0 {
                    0.0
                } else {
                    p * (lp - y.ln())
                }
            })
            .sum(),
    };
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn embedding_gathers_and_accumulates() {
        let mut g = Graph::new();
        let table = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.embedding(table, &[1, 0, 1]).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let flat = g.flatten(out);
        // sum via a linear layer with ones
        let ones = g.leaf(t(&[1, 6], &[1.0; 6]));
        let zero = g.leaf(t(&[1], &[0.0]));
        let s = g.linear(flat, ones, zero).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 2.0, 2.0]);

        let empty = g.embedding(table, &[]).unwrap();
        assert_eq!(g.value(empty).shape(), &[0, 2]);
        assert!(g.embedding(table, &[2]).is_err());
    }

    #[test]
    fn conv1d_forward_and_kernel_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = g.leaf(t(&[1, 1, 3], &[1.0, 0.0, -1.0]));
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b, 0).unwrap();
        assert_eq!(g.value(y).data(), &[-2.0]);
        let flat = g.flatten(y);
        g.backward(flat).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_identity_kernel_and_errors() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 4], &[0.5, -1.0, 2.0, 7.0]));
        let w = g.leaf(t(&[1, 1, 1], &[1.0]));
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let w2 = g.leaf(t(&[1, 2, 1], &[1.0, 1.0]));
        let err = g.conv1d(x, w2, b, 0).unwrap_err().to_string();
        assert!(err.contains("2 input channels") && err.contains("1"), "{err}");
        let w5 = g.leaf(t(&[1, 1, 5], &[1.0; 5]));
        assert!(g.conv1d(x, w5, b, 0).is_err());
        assert!(g.conv1d(x, w5, b, 1).is_ok());
    }

    #[test]
    fn maxpool_windows_and_ties() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 4], &[1.0, 3.0, 2.0, 0.0]));
        let y = g.maxpool1d(x, Pool::Window(2)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0]);
        assert!(g.maxpool1d(x, Pool::Window(0)).is_err());

        let x2 = g.leaf(t(&[2, 3], &[1.0, 5.0, 2.0, -1.0, -3.0, -2.0]));
        let y2 = g.maxpool1d(x2, Pool::Global).unwrap();
        assert_eq!(g.value(y2).data(), &[5.0, -1.0]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3], &[1.0, 3.0, 3.0]));
        let y = g.maxpool1d(x, Pool::Global).unwrap();
        let f = g.flatten(y);
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn simple_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let d = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(g.value(d).data(), g.value(x).data());
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
        let w = g.leaf(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(t(&[3], &[0.0; 3]));
        let l = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(l).data(), g.value(x).data());
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.leaf(t(&[1000], &[1.0; 1000]));
        let d = g.dropout(x, 0.5, &mut rng).unwrap();
        let vals = g.value(d).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept), "{kept}");
    }

    #[test]
    fn log_softmax_cases() {
        let y = log_softmax(&[0.0; 4]);
        assert!(y.iter().all(|v| (v - (0.25f64).ln()).abs() < 1e-15));
        let y = log_softmax(&[1f64.ln(), 3f64.ln()]);
        assert!((y[0] - (-1.386294)).abs() < 1e-6 && (y[1] - (-0.287682)).abs() < 1e-6);
        let a = log_softmax(&[0.3, -2.0, 5.0]);
        let b = log_softmax(&[100.3, 98.0, 105.0]);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_cases() {
        let lp = log_softmax(&[0.2, 0.7, -0.4]);
        let target: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        assert!(kl_div_loss(&lp, &target, KlDirection::Conventional).unwrap().abs() < 1e-12);
        assert!(kl_div_loss(&lp, &target, KlDirection::LiteralPaper).unwrap().abs() < 1e-12);

        let lp = [0.25f64.ln(), 0.75f64.ln()];
        let loss = kl_div_loss(&lp, &[0.5, 0.5], KlDirection::Conventional).unwrap();
        assert!((loss - 0.143841).abs() < 1e-6);
        assert!((loss - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-15);

        // zero-probability target entries contribute nothing
        let loss = kl_div_loss(&[0.0f64.ln().max(-50.0), 0.0], &[0.0, 1.0], KlDirection::Conventional).unwrap();
        assert_eq!(loss, 0.0);

        assert!(kl_div_loss(&lp, &[0.5, 0.6], KlDirection::Conventional).is_err());
    }
}
