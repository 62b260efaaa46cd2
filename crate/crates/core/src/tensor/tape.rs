use std::borrow::Cow;

use super::kernels::{self, MatMut, MatRef};
use super::{check_temperature, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Swish(Var),
    Scale(Var, f64),
    Sum(Var),
    RmsNorm {
        x: Var,
        scale: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SoftmaxRows {
        x: Var,
        temperature: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        normalizer: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    /// Op-specific saved state: inverse RMS per row, attention probabilities.
    aux: Vec<f64>,
}

/// Output of a gated feed-forward block recorded on a tape.
pub struct GatedFfnOutput {
    pub out: Var,
    pub gate_pre: Var,
    pub up_pre: Var,
    /// `swish(gate_pre) ⊙ up_pre`, the signed memory coefficients.
    pub act: Var,
    /// `|act|`, detached from the graph.
    pub coeff: Tensor,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in evaluation order, so the reverse index order is a
/// valid topological order for the backward sweep.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate<'a>(adj: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Vec<f64>) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad, aux)
    }

    fn push_cow(
        &mut self,
        value: Cow<'a, Tensor>,
        op: Op,
        requires_grad: bool,
        aux: Vec<f64>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg, Vec::new())
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a borrowed leaf without copying its data.
    pub fn leaf_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push_cow(Cow::Borrowed(t), Op::Leaf, requires_grad, Vec::new())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Attention probabilities `[heads, T, T]` saved by [`Tape::causal_attention`].
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match self.nodes[v.0].op {
            Op::Attention { .. } => Some(&self.nodes[v.0].aux),
            _ => None,
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            rg,
            Vec::new(),
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            rg,
            Vec::new(),
        ))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg, Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg, Vec::new()))
    }

    /// `z · σ(z)` elementwise.
    pub fn swish(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&z| kernels::swish(z)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Swish(a), rg, Vec::new())
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg, Vec::new())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg, Vec::new())
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) ⊙ scale`.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(scale));
        let (rows, d) = tx.dims2()?;
        if ts.shape() != [d] {
            return Err(shape_err("rms_norm", tx, ts));
        }
        let mut out = Tensor::zeros(&[rows, d]);
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv_rms = 1.0 / (ms + eps).sqrt();
            inv.push(inv_rms);
            for ((o, v), s) in out.row_mut(r).iter_mut().zip(row).zip(ts.data()) {
                *o = v * inv_rms * s;
            }
        }
        let rg = self.rg(&[x, scale]);
        Ok(self.push(out, Op::RmsNorm { x, scale }, rg, inv))
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = t.dims2()?;
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= n {
                return Err(Error::Param(format!(
                    "gather index {id} out of range for {n} rows"
                )));
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            Vec::new(),
        ))
    }

    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let value = self.value(x).softmax_rows(temperature)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxRows { x, temperature }, rg, Vec::new()))
    }

    /// Multi-head causal self-attention over `q, k, v: [T, d]`.
    ///
    /// Logits are `q_h·k_hᵀ / (sqrt(d/heads) · temperature)`; row `i` attends to
    /// positions `0..=i`. Probabilities are saved as `[heads, T, T]` with exact
    /// zeros above the diagonal.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        temperature: f64,
    ) -> Result<Var> {
        check_temperature(temperature)?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = tq.dims2()?;
        if tk.shape() != tq.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        if tv.shape() != tq.shape() {
            return Err(shape_err("attention", tq, tv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Param(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / ((dh as f64).sqrt() * temperature);
        let mut probs = vec![0.0; heads * t * t];
        let mut out = Tensor::zeros(&[t, d]);
        for h in 0..heads {
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            kernels::gemm(
                1.0,
                MatRef::columns(tq.data(), t, d, h * dh, dh),
                MatRef::columns(tk.data(), t, d, h * dh, dh).t(),
                0.0,
                MatMut::new(p, t, t),
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let max = row[..=i].iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let mut sum = 0.0;
                for x in &mut row[..=i] {
                    *x = ((*x - max) * scale).exp();
                    sum += *x;
                }
                let inv = 1.0 / sum;
                row[..=i].iter_mut().for_each(|x| *x *= inv);
                row[i + 1..].fill(0.0);
            }
            kernels::gemm(
                1.0,
                MatRef::new(p, t, t),
                MatRef::columns(tv.data(), t, d, h * dh, dh),
                0.0,
                MatMut::columns(out.data_mut(), t, d, h * dh, dh),
            );
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
            },
            rg,
            probs,
        ))
    }

    /// `Σ_t (logsumexp(logits_t) − logits_t[y_t]) / normalizer` over positions with a target.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        normalizer: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (t, vocab) = tl.dims2()?;
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if targets.iter().all(Option::is_none) {
            return Err(Error::Contract(
                "cross-entropy with every position masked".into(),
            ));
        }
        if !(normalizer > 0.0) {
            return Err(Error::Param(format!(
                "normalizer must be positive, got {normalizer}"
            )));
        }
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            if let Some(y) = *target {
                if y >= vocab {
                    return Err(Error::Param(format!(
                        "target {y} out of range for vocab {vocab}"
                    )));
                }
                let row = tl.row(i);
                total += kernels::log_sum_exp(row) - row[y];
            }
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            normalizer,
        };
        Ok(self.push(Tensor::scalar(total / normalizer), op, rg, Vec::new()))
    }

    /// Gated feed-forward block: `(swish(x·gateᵀ) ⊙ (x·upᵀ)) · down`.
    pub fn gated_ffn(&mut self, x: Var, gate: Var, up: Var, down: Var) -> Result<GatedFfnOutput> {
        let (gm, gd) = self.value(gate).dims2()?;
        for w in [up, down] {
            if self.value(w).shape() != [gm, gd] {
                return Err(shape_err("gated_ffn", self.value(gate), self.value(w)));
            }
        }
        let gate_pre = self.matmul_t(x, gate)?;
        let up_pre = self.matmul_t(x, up)?;
        let activated = self.swish(gate_pre);
        let act = self.mul(activated, up_pre)?;
        let out = self.matmul(act, down)?;
        let a = self.value(act);
        let coeff = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().map(|c| c.abs()).collect(),
        )?;
        Ok(GatedFfnOutput {
            out,
            gate_pre,
            up_pre,
            act,
            coeff,
        })
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(&self.nodes[i], &g, &mut adj);
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, k) = (ta.shape()[0], ta.shape()[1]);
                let c = node.value.shape()[1];
                let gmat = MatRef::new(g, r, c);
                // b is k×c, or c×k when transposed.
                let bref = if *transpose_b {
                    MatRef::new(tb.data(), c, k).t()
                } else {
                    MatRef::new(tb.data(), k, c)
                };
                if needs(*a) {
                    let da = accumulate(adj, *a, r * k);
                    kernels::gemm(1.0, gmat, bref.t(), 1.0, MatMut::new(da, r, k));
                }
                if needs(*b) {
                    let aref = MatRef::new(ta.data(), r, k);
                    let db = accumulate(adj, *b, k * c);
                    if *transpose_b {
                        kernels::gemm(1.0, gmat.t(), aref, 1.0, MatMut::new(db, c, k));
                    } else {
                        kernels::gemm(1.0, aref.t(), gmat, 1.0, MatMut::new(db, k, c));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let d = accumulate(adj, v, g.len());
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let o = val(other).data();
                        let d = accumulate(adj, v, g.len());
                        for ((x, gi), oi) in d.iter_mut().zip(g).zip(o) {
                            *x += gi * oi;
                        }
                    }
                }
            }
            Op::Swish(a) => {
                if needs(*a) {
                    let z = val(*a).data();
                    let d = accumulate(adj, *a, g.len());
                    for ((x, gi), &zi) in d.iter_mut().zip(g).zip(z) {
                        let s = kernels::sigmoid(zi);
                        *x += gi * s * (1.0 + zi * (1.0 - s));
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let d = accumulate(adj, *a, g.len());
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let n = val(*a).numel();
                    let d = accumulate(adj, *a, n);
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::RmsNorm { x, scale } => {
                let tx = val(*x);
                let s = val(*scale).data();
                let d = s.len();
                let rows = tx.shape()[0];
                let inv = &node.aux;
                if needs(*x) {
                    let dx = accumulate(adj, *x, rows * d);
                    for r in 0..rows {
                        let xr = tx.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let ir = inv[r];
                        let dot: f64 = (0..d).map(|j| gr[j] * s[j] * xr[j]).sum();
                        let coef = ir * ir * ir * dot / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += ir * s[j] * gr[j] - coef * xr[j];
                        }
                    }
                }
                if needs(*scale) {
                    let ds = accumulate(adj, *scale, d);
                    for r in 0..rows {
                        let xr = tx.row(r);
                        for j in 0..d {
                            ds[j] += g[r * d + j] * xr[j] * inv[r];
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let cols = node.value.shape()[1];
                    let n = val(*table).numel();
                    let dt = accumulate(adj, *table, n);
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        dt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SoftmaxRows { x, temperature } => {
                if needs(*x) {
                    let y = &node.value;
                    let c = y.shape()[1];
                    let dx = accumulate(adj, *x, y.numel());
                    for r in 0..y.shape()[0] {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += yr[j] * (gr[j] - dot) / temperature;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (t, d) = (tq.shape()[0], tq.shape()[1]);
                let dh = d / heads;
                let mut dp = vec![0.0; t * t];
                let (nq, nk, nv) = (needs(*q), needs(*k), needs(*v));
                for h in 0..*heads {
                    let p = &node.aux[h * t * t..(h + 1) * t * t];
                    let g_h = MatRef::columns(g, t, d, h * dh, dh);
                    if nv {
                        let dv = accumulate(adj, *v, t * d);
                        kernels::gemm(
                            1.0,
                            MatRef::new(p, t, t).t(),
                            g_h,
                            1.0,
                            MatMut::columns(dv, t, d, h * dh, dh),
                        );
                    }
                    if !(nq || nk) {
                        continue;
                    }
                    kernels::gemm(
                        1.0,
                        g_h,
                        MatRef::columns(tv.data(), t, d, h * dh, dh).t(),
                        0.0,
                        MatMut::new(&mut dp, t, t),
                    );
                    // dp becomes the logit gradient dS (already scaled).
                    for i in 0..t {
                        let pr = &p[i * t..(i + 1) * t];
                        let dr = &mut dp[i * t..(i + 1) * t];
                        let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                        for j in 0..=i {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                        dr[i + 1..].fill(0.0);
                    }
                    if nq {
                        let dq = accumulate(adj, *q, t * d);
                        kernels::gemm(
                            1.0,
                            MatRef::new(&dp, t, t),
                            MatRef::columns(tk.data(), t, d, h * dh, dh),
                            1.0,
                            MatMut::columns(dq, t, d, h * dh, dh),
                        );
                    }
                    if nk {
                        let dk = accumulate(adj, *k, t * d);
                        kernels::gemm(
                            1.0,
                            MatRef::new(&dp, t, t).t(),
                            MatRef::columns(tq.data(), t, d, h * dh, dh),
                            1.0,
                            MatMut::columns(dk, t, d, h * dh, dh),
                        );
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                normalizer,
            } => {
                if needs(*logits) {
                    let tl = val(*logits);
                    let vocab = tl.shape()[1];
                    let dl = accumulate(adj, *logits, tl.numel());
                    let w = g[0] / normalizer;
                    for (i, target) in targets.iter().enumerate() {
                        let Some(y) = *target else { continue };
                        let row = tl.row(i);
                        let lse = kernels::log_sum_exp(row);
                        let dr = &mut dl[i * vocab..(i + 1) * vocab];
                        for (dj, &x) in dr.iter_mut().zip(row) {
                            *dj += w * (x - lse).exp();
                        }
                        dr[y] -= w;
                    }
                }
            }
        }
    }
}
