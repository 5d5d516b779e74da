//! Reverse-mode automatic differentiation over an explicit operation tape.
//!
//! Every forward op appends a node holding its output value and enough saved
//! state to run its adjoint. [`Tape::backward`] walks the nodes in exact reverse
//! recording order. Parameters are borrowed from a [`ParamStore`] rather than
//! copied, so building a tape for inference costs no more than the math itself.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batched multi-head attention call.
///
/// Queries and keys are stored group-major: group `g` owns rows
/// `g*q_len..(g+1)*q_len` of the query matrix and `g*k_len..(g+1)*k_len` of the
/// key/value matrices.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub heads: usize,
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Number of leading valid keys per group; the rest are padding.
    pub key_valid: Option<Vec<usize>>,
    /// Query row `i` may only see keys `j <= i`.
    pub causal: bool,
    /// Additive `q_len × k_len` mask shared by every group.
    pub mask: Option<Tensor>,
}

impl AttnLayout {
    pub fn single(heads: usize, q_len: usize, k_len: usize) -> Self {
        AttnLayout {
            heads,
            groups: 1,
            q_len,
            k_len,
            key_valid: None,
            causal: false,
            mask: None,
        }
    }
}

#[derive(Debug)]
struct AttnSaved {
    layout: AttnLayout,
    /// Softmax output, `[groups, heads, q_len, k_len]`, before dropout.
    probs: Vec<f64>,
    /// Dropout multipliers matching `probs`, when dropout was applied.
    drop: Option<Vec<f64>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MeanPoolGroups(Var, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Logistic {
        z: Var,
        labels: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        saved: Box<AttnSaved>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    /// Some requires-grad leaf is reachable through this node.
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Tensor>,
    param: Option<ParamId>,
}

/// Layer-norm variance guard.
pub const LN_EPS: f64 = 1e-5;

/// A recorded forward computation.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    /// An inference tape: dropout disabled.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout: 0.0,
            rng: None,
        }
    }

    /// A training tape applying dropout at `rate`, masks drawn from `seed`.
    pub fn training(rate: f64, seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout: rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.dropout > 0.0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a requires-grad leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        self.push(Cow::Owned(value), op, inputs)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_owned(t, Op::Leaf, &[])
    }

    /// A trainable leaf owned by the tape.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let v = self.push_owned(t, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = true;
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Registers a stored parameter (borrowed, not copied). Repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, &[]);
        let node = &mut self.nodes[v.0];
        node.needs_grad = true;
        node.requires_grad = true;
        node.param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Looks up a parameter by name and registers it.
    pub fn param_named(&mut self, store: &'a ParamStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        Ok(self.param(store, id))
    }

    /// Gradients of every registered parameter, indexed like the store.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store.len()];
        for n in &self.nodes {
            if let (Some(id), Some(g)) = (n.param, n.grad.as_ref()) {
                out[id.index()] = Some(g.clone());
            }
        }
        out
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 || self.value(b).rank() != 2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push_owned(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push_owned(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        if self.value(row).numel() != c {
            return Err(Error::shape(
                "broadcast_add_row",
                self.shape(x),
                self.shape(row),
            ));
        }
        let bias = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, b) in chunk.iter_mut().zip(bias) {
                *d += b;
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push_owned(t, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push_owned(t, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push_owned(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push_owned(t, Op::Sigmoid(x), &[x])
    }

    /// `[r×c1] ++ [r×c2] -> [r×(c1+c2)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::shape(
                "concat_last_dim",
                self.shape(a),
                self.shape(b),
            ));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&self.value(a).data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&self.value(b).data()[i * cb..(i + 1) * cb]);
        }
        let t = Tensor::new(&[ra, ca + cb], data)?;
        Ok(self.push_owned(t, Op::ConcatCols(a, b), &[a, b]))
    }

    /// `[r1×c] ++ [r2×c] -> [(r1+r2)×c]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ca != cb {
            return Err(Error::shape("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::new(&[ra + rb, ca], data)?;
        Ok(self.push_owned(t, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Picks rows of `x` by index; the adjoint scatter-adds back into those rows.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index {
                    what: "rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&self.value(x).data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(&[idx.len(), c], data)?;
        Ok(self.push_owned(t, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Embedding lookup: one table row per id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let rows = self.value(table).dims2()?.0;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                bound: rows,
            });
        }
        self.gather_rows(table, ids)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_owned(t, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        if d == 0 {
            return Err(Error::Empty("layer_norm width"));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push_owned(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Column means over all rows: `[r×d] -> [1×d]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.value(x).dims2()?;
        if r == 0 {
            return Err(Error::Empty("mean_pool over zero rows"));
        }
        self.mean_pool_groups(x, r)
    }

    /// Column means over consecutive blocks of `group` rows: `[(b·group)×d] -> [b×d]`.
    pub fn mean_pool_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        if group == 0 || r == 0 {
            return Err(Error::Empty("mean_pool over zero rows"));
        }
        if r % group != 0 {
            return Err(Error::shape("mean_pool_groups", self.shape(x), &[group]));
        }
        let b = r / group;
        let src = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for (i, row) in src.chunks(d).enumerate() {
            let o = &mut out[(i / group) * d..(i / group + 1) * d];
            for (acc, v) in o.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(&[b, d], out)?;
        Ok(self.push_owned(t, Op::MeanPoolGroups(x, group), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of `-log softmax(logits)[i, target_i]` over rows whose target is not `ignore`.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let kept = targets.iter().filter(|&&t| Some(t) != ignore).count();
        if kept == 0 {
            return Err(Error::Empty("every cross-entropy target is ignored"));
        }
        let w = 1.0 / kept as f64;
        let weights: Vec<f64> = targets
            .iter()
            .map(|&t| if Some(t) == ignore { 0.0 } else { w })
            .collect();
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// `Σ_i w_i · (-log softmax(logits)[i, target_i])`; rows with zero weight are skipped.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (r, c) = self.value(logits).dims2()?;
        if targets.len() != r || weights.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            if weights[i] == 0.0 {
                continue;
            }
            let t = targets[i];
            if t >= c {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    bound: c,
                });
            }
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
            let logp = row[t] - max - z.ln();
            loss -= weights[i] * logp;
        }
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `Σ_i log(1 + exp(-y_i z_i))`, evaluated as a stable softplus.
    pub fn logistic_loss(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        if self.value(z).numel() != labels.len() {
            return Err(Error::shape(
                "logistic_loss",
                self.shape(z),
                &[labels.len()],
            ));
        }
        let loss = self
            .value(z)
            .data()
            .iter()
            .zip(labels)
            .map(|(&zi, &yi)| softplus(-yi * zi))
            .sum();
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::Logistic {
                z,
                labels: labels.to_vec(),
            },
            &[z],
        ))
    }

    /// Inverted dropout; identity on inference tapes.
    pub fn dropout(&mut self, x: Var) -> Var {
        if !self.is_training() {
            return x;
        }
        let p = self.dropout;
        let keep = 1.0 / (1.0 - p);
        let rng = self.rng.as_mut().expect("training tape");
        let mask: Vec<f64> = (0..self.nodes[x.0].value.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &mask, |a, m| a * m);
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push_owned(t, Op::Dropout(x, mask), &[x])
    }

    /// Batched scaled dot-product attention, heads split along the width.
    ///
    /// `q` is `[groups·q_len × d]`, `k` and `v` are `[groups·k_len × d]`.
    /// Returns the concatenated per-head contexts, `[groups·q_len × d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttnLayout) -> Result<Var> {
        let (rq, d) = self.value(q).dims2()?;
        let (rk, dk) = self.value(k).dims2()?;
        let (rv, dv) = self.value(v).dims2()?;
        let AttnLayout {
            heads,
            groups,
            q_len,
            k_len,
            ..
        } = *layout;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        if dk != d || dv != d || rk != rv {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if rq != groups * q_len || rk != groups * k_len {
            return Err(Error::shape(
                "attention layout",
                &[rq, rk],
                &[groups * q_len, groups * k_len],
            ));
        }
        if let Some(m) = &layout.mask {
            if m.shape() != [q_len, k_len] {
                return Err(Error::shape("attention mask", m.shape(), &[q_len, k_len]));
            }
        }
        if let Some(kv) = &layout.key_valid {
            if kv.len() != groups || kv.iter().any(|&n| n == 0 || n > k_len) {
                return Err(Error::Contract(format!(
                    "key_valid {kv:?} incompatible with {groups} groups of {k_len} keys"
                )));
            }
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let drop_p = if self.is_training() {
            self.dropout
        } else {
            0.0
        };
        let (nodes, rng) = (&self.nodes, &mut self.rng);
        let qd = nodes[q.0].value.data();
        let kd = nodes[k.0].value.data();
        let vd = nodes[v.0].value.data();
        let mut probs = vec![0.0; groups * heads * q_len * k_len];
        let mut out = vec![0.0; rq * d];
        let mut drop = (drop_p > 0.0).then(|| vec![0.0; probs.len()]);
        let mut scores = vec![0.0; k_len];
        for g in 0..groups {
            let valid = layout.key_valid.as_ref().map_or(k_len, |kv| kv[g]);
            for h in 0..heads {
                let col = h * hd;
                for i in 0..q_len {
                    let qrow = &qd[(g * q_len + i) * d + col..][..hd];
                    let limit = if layout.causal {
                        valid.min(i + 1)
                    } else {
                        valid
                    };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..limit {
                        let krow = &kd[(g * k_len + j) * d + col..][..hd];
                        let mut s = dot(qrow, krow) * scale;
                        if let Some(m) = &layout.mask {
                            s += m.data()[i * k_len + j];
                        }
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let base = ((g * heads + h) * q_len + i) * k_len;
                    let p = &mut probs[base..base + k_len];
                    if max == f64::NEG_INFINITY {
                        return Err(Error::Numeric(format!(
                            "attention row {i} of group {g} has no visible key"
                        )));
                    }
                    let mut z = 0.0;
                    for j in 0..limit {
                        let e = (scores[j] - max).exp();
                        p[j] = e;
                        z += e;
                    }
                    for pj in p[..limit].iter_mut() {
                        *pj /= z;
                    }
                    let orow = &mut out[(g * q_len + i) * d + col..][..hd];
                    for j in 0..limit {
                        let mut w = p[j];
                        if let Some(dm) = drop.as_mut() {
                            let rng = rng.as_mut().expect("training tape");
                            let m = if rng.random::<f64>() < drop_p {
                                0.0
                            } else {
                                1.0 / (1.0 - drop_p)
                            };
                            dm[base + j] = m;
                            w *= m;
                        }
                        if w != 0.0 {
                            let vrow = &vd[(g * k_len + j) * d + col..][..hd];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[rq, d], out)?;
        let saved = Box::new(AttnSaved {
            layout: layout.clone(),
            probs,
            drop,
        });
        Ok(self.push_owned(t, Op::Attention { q, k, v, saved }, &[q, k, v]))
    }

    /// Attention probabilities recorded by an [`attention`](Self::attention) node,
    /// laid out `[groups, heads, q_len, k_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { saved, .. } => Some(&saved.probs),
            _ => None,
        }
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every requires-grad leaf reachable from `loss`.
    ///
    /// Gradients add to whatever earlier backward calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            if node.requires_grad {
                match node.grad.as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2().expect("2d");
                let n = val(b).shape()[1];
                if wants(a) {
                    // dA = G · Bᵀ
                    let buf = slot(adj, a, m * k);
                    gemm(m, n, k, g, false, val(b).data(), true, 1.0, buf);
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let buf = slot(adj, b, k * n);
                    gemm(k, m, n, val(a).data(), true, g, false, 1.0, buf);
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if wants(x) {
                        add_into(slot(adj, x, g.len()), g);
                    }
                }
            }
            &Op::AddRow(x, row) => {
                if wants(x) {
                    add_into(slot(adj, x, g.len()), g);
                }
                if wants(row) {
                    let c = val(row).numel();
                    let buf = slot(adj, row, c);
                    for chunk in g.chunks(c) {
                        add_into(buf, chunk);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if wants(x) {
                    let buf = slot(adj, x, g.len());
                    buf.iter_mut().zip(g).for_each(|(b, gi)| *b += s * gi);
                }
            }
            &Op::Relu(x) => {
                if wants(x) {
                    let buf = slot(adj, x, g.len());
                    for ((b, gi), xi) in buf.iter_mut().zip(g).zip(val(x).data()) {
                        if *xi > 0.0 {
                            *b += gi;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if wants(x) {
                    let buf = slot(adj, x, g.len());
                    for ((b, gi), y) in buf.iter_mut().zip(g).zip(out.data()) {
                        *b += gi * y * (1.0 - y);
                    }
                }
            }
            &Op::ConcatCols(a, b) => {
                let (r, ca) = val(a).dims2().expect("2d");
                let cb = val(b).dims2().expect("2d").1;
                let w = ca + cb;
                if wants(a) {
                    let buf = slot(adj, a, r * ca);
                    for row in 0..r {
                        add_into(
                            &mut buf[row * ca..(row + 1) * ca],
                            &g[row * w..row * w + ca],
                        );
                    }
                }
                if wants(b) {
                    let buf = slot(adj, b, r * cb);
                    for row in 0..r {
                        add_into(
                            &mut buf[row * cb..(row + 1) * cb],
                            &g[row * w + ca..(row + 1) * w],
                        );
                    }
                }
            }
            &Op::ConcatRows(a, b) => {
                let na = val(a).numel();
                if wants(a) {
                    add_into(slot(adj, a, na), &g[..na]);
                }
                if wants(b) {
                    add_into(slot(adj, b, g.len() - na), &g[na..]);
                }
            }
            Op::GatherRows(x, idx) => {
                let x = *x;
                if wants(x) {
                    let c = val(x).dims2().expect("2d").1;
                    let buf = slot(adj, x, val(x).numel());
                    for (o, &r) in idx.iter().enumerate() {
                        add_into(&mut buf[r * c..(r + 1) * c], &g[o * c..(o + 1) * c]);
                    }
                }
            }
            &Op::Softmax { x, outer, n, inner } => {
                if wants(x) {
                    let y = out.data();
                    let buf = slot(adj, x, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dotp: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                buf[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = val(gain).numel();
                let gv = val(gain).data();
                if wants(gain) {
                    let buf = slot(adj, gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(bias) {
                    let buf = slot(adj, bias, d);
                    for gr in g.chunks(d) {
                        add_into(buf, gr);
                    }
                }
                if wants(x) {
                    let buf = slot(adj, x, g.len());
                    let mut dh = vec![0.0; d];
                    for (row, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let dst = &mut buf[row * d..(row + 1) * d];
                        for j in 0..d {
                            dst[j] += rstd[row] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            &Op::MeanPoolGroups(x, group) => {
                if wants(x) {
                    let d = out.shape()[1];
                    let inv = 1.0 / group as f64;
                    let buf = slot(adj, x, val(x).numel());
                    for (r, dst) in buf.chunks_mut(d).enumerate() {
                        let src = &g[(r / group) * d..(r / group + 1) * d];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b * inv);
                    }
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    let buf = slot(adj, x, val(x).numel());
                    buf.iter_mut().for_each(|b| *b += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let logits = *logits;
                if wants(logits) {
                    let c = val(logits).dims2().expect("2d").1;
                    let buf = slot(adj, logits, probs.len());
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = w * g[0];
                        for j in 0..c {
                            buf[i * c + j] += s * probs[i * c + j];
                        }
                        buf[i * c + t] -= s;
                    }
                }
            }
            Op::Logistic { z, labels } => {
                let z = *z;
                if wants(z) {
                    let buf = slot(adj, z, labels.len());
                    for ((b, &zi), &yi) in buf.iter_mut().zip(val(z).data()).zip(labels) {
                        *b += -g[0] * yi * sigmoid(-yi * zi);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                let x = *x;
                if wants(x) {
                    let buf = slot(adj, x, g.len());
                    for ((b, gi), m) in buf.iter_mut().zip(g).zip(mask) {
                        *b += gi * m;
                    }
                }
            }
            Op::Attention { q, k, v, saved } => {
                self.attention_backward(*q, *k, *v, saved, g, adj);
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        saved: &AttnSaved,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let val = |x: Var| self.nodes[x.0].value.as_ref();
        let AttnLayout {
            heads,
            groups,
            q_len,
            k_len,
            ..
        } = saved.layout;
        let d = val(q).shape()[1];
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (val(q).data(), val(k).data(), val(v).data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; k_len];
        for gi in 0..groups {
            let valid = saved.layout.key_valid.as_ref().map_or(k_len, |kv| kv[gi]);
            for h in 0..heads {
                let col = h * hd;
                for i in 0..q_len {
                    let limit = if saved.layout.causal {
                        valid.min(i + 1)
                    } else {
                        valid
                    };
                    let base = ((gi * heads + h) * q_len + i) * k_len;
                    let p = &saved.probs[base..base + k_len];
                    let grow = &g[(gi * q_len + i) * d + col..][..hd];
                    // dP_j = g · v_j (through dropout), dV_j += w_j g
                    let mut dotp = 0.0;
                    for j in 0..limit {
                        let m = saved.drop.as_ref().map_or(1.0, |dm| dm[base + j]);
                        let vr = (gi * k_len + j) * d + col;
                        let w = p[j] * m;
                        if w != 0.0 {
                            for (dvx, gx) in dv[vr..vr + hd].iter_mut().zip(grow) {
                                *dvx += w * gx;
                            }
                        }
                        let dpj = if m == 0.0 {
                            0.0
                        } else {
                            m * dot(grow, &vd[vr..vr + hd])
                        };
                        dp[j] = dpj;
                        dotp += dpj * p[j];
                    }
                    let qr = (gi * q_len + i) * d + col;
                    for j in 0..limit {
                        let ds = p[j] * (dp[j] - dotp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kr = (gi * k_len + j) * d + col;
                        for x in 0..hd {
                            dq[qr + x] += ds * kd[kr + x];
                            dk[kr + x] += ds * qd[qr + x];
                        }
                    }
                }
            }
        }
        for (x, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[x.0].needs_grad {
                add_into(slot(adj, x, buf.len()), &buf);
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
