//! Reverse-mode gradient tape over row-major matrices.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward sweep is a single reverse scan.

use super::functional::{gelu, gelu_grad, log_sum_exp, moments, softmax_in_place};
use super::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    MulConst {
        x: Var,
        factor: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        // heads × n × n, row-stochastic per query
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    // None for parameters, whose values live in the borrowed parameter slice.
    value: Option<Tensor>,
}

/// Per-parameter gradients, indexed like the parameter slice of the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.grads.get(param).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, param: usize, g: &Tensor) {
        match &mut self.grads[param] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `alpha * other` into `self`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[i] {
                    Some(acc) => acc.scale_add_assign(alpha, g),
                    slot @ None => *slot = Some(g.scaled(alpha)),
                }
            }
        }
    }

    /// Dense gradients, zero-filled where a parameter was never touched.
    pub fn into_dense(self, params: &[Tensor]) -> Vec<Tensor> {
        self.grads
            .into_iter()
            .zip(params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node without value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index out of range");
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// Rows of a `[V, d]` table, e.g. an embedding lookup.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::from_vec(&[rows.len(), d], out).expect("gather shape");
        self.push(
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            value,
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let t = self.value(x);
        let d = t.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::from_vec(&[rows.len(), d], out).expect("select shape");
        self.push(
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            value,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    /// `x[n, c] + bias[c]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut value = self.value(x).clone();
        let b = self.value(bias).data();
        let rows = value.rows();
        for r in 0..rows {
            for (v, bb) in value.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        self.push(Op::AddBias { x, bias }, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        self.push(Op::MatMulBt(a, b), value)
    }

    /// Elementwise product with a constant, e.g. an inverted-dropout mask.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!(value.len(), factor.len());
        for (v, f) in value.data_mut().iter_mut().zip(&factor) {
            *v *= f;
        }
        self.push(Op::MulConst { x, factor }, value)
    }

    /// Row-wise layer normalization.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = xv.row(r);
            let (mean, is) = moments(row, eps);
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[c] * h + b[c]);
            }
        }
        let value = Tensor::from_vec(&[rows, cols], out).expect("layer_norm shape");
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = gelu(*v);
        }
        self.push(Op::Gelu(x), value)
    }

    /// Multi-head scaled dot-product attention over every row of `q`, `k`, `v`
    /// (all `[n, d]`; head `h` owns columns `h*d/heads .. (h+1)*d/heads`).
    /// Callers restrict the rows to the attendable positions beforehand.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows(), qv.cols());
        assert!(d % heads == 0, "d_model not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let qi = &qv.row(i)[cols.clone()];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(p);
                let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &pj) in p.iter().enumerate() {
                    for (o, vj) in oi.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += pj * vj;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, d], out).expect("attention shape");
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            value,
        )
    }

    /// Attention probabilities of an attention node, `heads × n × n`.
    pub fn attention_probs(&self, node: Var) -> Option<(usize, &[f64])> {
        match &self.nodes[node.0].op {
            Op::Attention { heads, probs, .. } => Some((*heads, probs)),
            _ => None,
        }
    }

    /// Summed cross-entropy `Σ_t −log softmax(logits[row_t])[label_t]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let lv = self.value(logits);
        let cols = lv.cols();
        let mut probs = Vec::with_capacity(targets.len() * cols);
        let mut total = 0.0;
        for &(row, label) in targets {
            let l = lv.row(row);
            total += log_sum_exp(l) - l[label];
            let start = probs.len();
            probs.extend_from_slice(l);
            softmax_in_place(&mut probs[start..]);
        }
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(total),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Reverse sweep from the given seed adjoints; returns parameter gradients.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut params = Gradients::empty(self.params.len());
        let Some(last) = seeds.iter().map(|(v, _)| v.0).max() else {
            return params;
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; last + 1];
        for (v, g) in seeds {
            assert_eq!(
                g.len(),
                self.value(*v).len(),
                "seed shape does not match node"
            );
            acc(&mut grads, *v, g.clone());
        }
        for id in (0..=last).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads, &mut params);
        }
        params
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut Gradients,
    ) {
        match &self.nodes[id].op {
            Op::Constant => {}
            Op::Param(i) => params.accumulate(*i, &reshape_like(g, &self.params[*i])),
            Op::Gather { table, rows } => {
                let t = self.value(*table);
                let mut dt = Tensor::zeros(t.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (d, s) in dt.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                acc(grads, *table, dt);
            }
            Op::SelectRows { x, rows } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (d, s) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddBias { x, bias } => {
                let bv = self.value(*bias);
                let mut db = vec![0.0; bv.len()];
                for r in 0..g.rows() {
                    for (d, s) in db.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                acc(grads, *x, g.clone());
                acc(
                    grads,
                    *bias,
                    Tensor::from_vec(bv.shape(), db).expect("bias grad"),
                );
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.matmul_bt(bv));
                acc(grads, *b, av.matmul_at(g));
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.matmul(bv));
                acc(grads, *b, g.matmul_at(av));
            }
            Op::MulConst { x, factor } => {
                let mut dx = g.clone();
                for (d, f) in dx.data_mut().iter_mut().zip(factor) {
                    *d *= f;
                }
                acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let cols = gv.len();
                let rows = g.rows();
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let gd = gv.data();
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..cols {
                        let dh = gr[c] * gd[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                        dgamma[c] += gr[c] * hr[c];
                        dbeta[c] += gr[c];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    let dxr = &mut dx[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let dh = gr[c] * gd[c];
                        dxr[c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                acc(grads, *x, Tensor::from_vec(g.shape(), dx).expect("ln dx"));
                acc(
                    grads,
                    *gamma,
                    Tensor::from_vec(gv.shape(), dgamma).expect("ln dgamma"),
                );
                acc(
                    grads,
                    *beta,
                    Tensor::from_vec(self.value(*beta).shape(), dbeta).expect("ln dbeta"),
                );
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *d *= gelu_grad(*v);
                }
                acc(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = (qv.rows(), qv.cols());
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(&[n, d]);
                let mut dk = Tensor::zeros(&[n, d]);
                let mut dv = Tensor::zeros(&[n, d]);
                let mut dp = vec![0.0; n];
                for h in 0..*heads {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                        let go = &g.row(i)[cols.clone()];
                        let mut weighted = 0.0;
                        for j in 0..n {
                            dp[j] = dot(go, &vv.row(j)[cols.clone()]);
                            weighted += p[j] * dp[j];
                            let dvj = &mut dv.row_mut(j)[cols.clone()];
                            for (a, b) in dvj.iter_mut().zip(go) {
                                *a += p[j] * b;
                            }
                        }
                        for j in 0..n {
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kv.row(j)[cols.clone()];
                            let dqi = &mut dq.row_mut(i)[cols.clone()];
                            for (a, b) in dqi.iter_mut().zip(kj) {
                                *a += ds * b;
                            }
                            let qi = &qv.row(i)[cols.clone()];
                            let dkj = &mut dk.row_mut(j)[cols.clone()];
                            for (a, b) in dkj.iter_mut().zip(qi) {
                                *a += ds * b;
                            }
                        }
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let cols = lv.cols();
                let scale = g.data()[0];
                let mut dl = Tensor::zeros(lv.shape());
                for (t, &(row, label)) in targets.iter().enumerate() {
                    let p = &probs[t * cols..(t + 1) * cols];
                    let dr = dl.row_mut(row);
                    for (d, pv) in dr.iter_mut().zip(p) {
                        *d += scale * pv;
                    }
                    dr[label] -= scale;
                }
                acc(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(grads, *x, Tensor::filled(xv.shape(), g.data()[0]));
            }
        }
    }
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        g.clone()
    } else {
        Tensor::from_vec(like.shape(), g.data().to_vec()).expect("gradient size")
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
