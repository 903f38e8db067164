use super::gemm::gemm;
use super::{log_sum_exp, softmax_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Sum(Var),
    Gelu {
        x: Var,
        /// `tanh` of the inner argument, reused by the backward pass.
        tanh: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention(Box<AttentionCache>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    MaskMul {
        w: Var,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    KlDiv {
        logits: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    xi: Var,
    xi_per_sample: bool,
    key_mask: Vec<bool>,
    batch: usize,
    seq: usize,
    heads: usize,
    /// Attention probabilities, laid out `[batch][head][query][key]`.
    probs: Vec<f64>,
    /// Head outputs before scaling by the head mask, `[batch*seq, d]`.
    heads_out: Vec<f64>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// valid topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
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
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|x| x * factor).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Scale(a, factor))
    }

    /// Adds a bias vector of length `cols` to every row of a rank-2 tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).numel() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::AddRow(x, bias)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let tanh: Vec<f64> = src
            .data()
            .iter()
            .map(|&v| tanh(GELU_C * (v + GELU_A * v * v * v)))
            .collect();
        let data = src
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| 0.5 * v * (1.0 + t))
            .collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Gelu { x, tanh })
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: vec![m, n],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = super::softmax(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Softmax(x)))
    }

    /// Multi-head scaled dot-product attention over a packed batch.
    ///
    /// `q`, `k`, `v` are `[batch*seq, d]` with heads occupying contiguous
    /// column blocks of width `d / heads`. Keys with `key_mask == false`
    /// receive zero probability. Each head's output is multiplied by its
    /// mask scalar taken from `xi`, which holds either `heads` entries
    /// shared by the batch or `batch*heads` per-sample entries.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        xi: Var,
        key_mask: &[bool],
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q)?;
        for other in [k, v] {
            if self.value(other).shape() != [rows, d] {
                return Err(Error::Dimension {
                    op: "attention",
                    lhs: vec![rows, d],
                    rhs: self.value(other).shape().to_vec(),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if batch == 0 || rows % batch != 0 || key_mask.len() != rows {
            return Err(Error::Input(format!(
                "attention batch {batch} incompatible with {rows} rows and mask of {}",
                key_mask.len()
            )));
        }
        let xi_len = self.value(xi).numel();
        let xi_per_sample = match xi_len {
            n if n == heads => false,
            n if n == batch * heads => true,
            _ => {
                return Err(Error::Dimension {
                    op: "attention head mask",
                    lhs: vec![batch, heads],
                    rhs: self.value(xi).shape().to_vec(),
                })
            }
        };
        let seq = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let xid = self.value(xi).data();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut heads_out = vec![0.0; rows * d];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let valid = &key_mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let col = h * dh;
                let xi_val = xid[if xi_per_sample { b * heads + h } else { h }];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + col..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if valid[j] {
                            let kj = &kd[(b * seq + j) * d + col..][..dh];
                            let s = dot(qi, kj) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut total = 0.0;
                    for j in 0..seq {
                        p[j] = if valid[j] { (scores[j] - max).exp() } else { 0.0 };
                        total += p[j];
                    }
                    if total > 0.0 {
                        p.iter_mut().for_each(|x| *x /= total);
                    }
                    let o = &mut heads_out[(b * seq + i) * d + col..][..dh];
                    for j in 0..seq {
                        if p[j] != 0.0 {
                            let vj = &vd[(b * seq + j) * d + col..][..dh];
                            for e in 0..dh {
                                o[e] += p[j] * vj[e];
                            }
                        }
                    }
                    let dst = &mut out[(b * seq + i) * d + col..][..dh];
                    for e in 0..dh {
                        dst[e] = xi_val * o[e];
                    }
                }
            }
        }
        let rg = self.any_grad(&[q, k, v, xi]);
        let cache = AttentionCache {
            q,
            k,
            v,
            xi,
            xi_per_sample,
            key_mask: key_mask.to_vec(),
            batch,
            seq,
            heads,
            probs,
            heads_out,
        };
        Ok(self.push(Tensor::new(vec![rows, d], out)?, rg, Op::Attention(Box::new(cache))))
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup with no ids".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} not in [0, {vocab})")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.dims2(x)?;
        if rows.is_empty() {
            return Err(Error::Input("select_rows with no rows".into()));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= m {
                return Err(Error::Index(format!("row {r} not in [0, {m})")));
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            rg,
            Op::SelectRows { x, rows: rows.to_vec() },
        ))
    }

    /// Elementwise product with a constant mask; gradient is masked too.
    pub fn mask_mul(&mut self, w: Var, mask: &[f64]) -> Result<Var> {
        let src = self.value(w);
        if src.numel() != mask.len() {
            return Err(Error::Dimension {
                op: "mask_mul",
                lhs: src.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: zip_map(src.data(), mask, |x, m| x * m),
        };
        let rg = self.any_grad(&[w]);
        Ok(self.push(value, rg, Op::MaskMul { w, mask: mask.to_vec() }))
    }

    /// Weighted mean negative log-likelihood: `sum_i w_i * nll_i / batch`.
    /// Weights default to one.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let (b, k) = self.dims2(logits)?;
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy labels",
                lhs: vec![b, k],
                rhs: vec![labels.len()],
            });
        }
        let weights = match weights {
            Some(w) if w.len() != b => {
                return Err(Error::Dimension {
                    op: "cross_entropy weights",
                    lhs: vec![b, k],
                    rhs: vec![w.len()],
                })
            }
            Some(w) if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) => {
                return Err(Error::Contract(
                    "cross_entropy weights must be finite and nonnegative".into(),
                ))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; b],
        };
        let z = self.value(logits);
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for i in 0..b {
            let y = labels[i];
            if y >= k {
                return Err(Error::Index(format!("label {y} not in [0, {k})")));
            }
            let row = z.row(i);
            softmax_into(row, &mut probs[i * k..(i + 1) * k]);
            if weights[i] != 0.0 {
                total += weights[i] * (log_sum_exp(row) - row[y]);
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
            },
        ))
    }

    /// Weighted batch mean of `KL(target || softmax(logits))`:
    /// `sum_i w_i * KL_i / batch`, weights defaulting to one. The target is a
    /// constant: no gradient flows into it.
    pub fn kl_divergence(&mut self, target: &Tensor, logits: Var, weights: Option<&[f64]>) -> Result<Var> {
        let (b, k) = self.dims2(logits)?;
        if target.shape() != [b, k] {
            return Err(Error::Dimension {
                op: "kl_divergence",
                lhs: target.shape().to_vec(),
                rhs: vec![b, k],
            });
        }
        let weights = match weights {
            Some(w) if w.len() != b => {
                return Err(Error::Dimension {
                    op: "kl_divergence weights",
                    lhs: vec![b, k],
                    rhs: vec![w.len()],
                })
            }
            Some(w) if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) => {
                return Err(Error::Contract(
                    "kl_divergence weights must be finite and nonnegative".into(),
                ))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; b],
        };
        for i in 0..b {
            let row = target.row(i);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&t| !(t >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "target row {i} is not a probability distribution (sum {s})"
                )));
            }
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for i in 0..b {
            let row = z.row(i);
            softmax_into(row, &mut probs[i * k..(i + 1) * k]);
            let lse = log_sum_exp(row);
            let mut kl = 0.0;
            for (j, &t) in target.row(i).iter().enumerate() {
                if t > 0.0 {
                    kl += t * (t.ln() - (row[j] - lse));
                }
            }
            total += weights[i] * kl;
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            rg,
            Op::KlDiv {
                logits,
                target: target.data().to_vec(),
                weights,
                probs,
            },
        ))
    }

    /// Back-propagates from a scalar node. Gradients are added to whatever
    /// each node already holds, so repeated calls accumulate until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("rank-2");
                let n = nodes[b.0].value.shape()[1];
                if let Some(ga) = slot(grads, nodes, *a) {
                    gemm(m, n, k, g, false, val(*b), true, 1.0, ga);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    gemm(k, m, n, val(*a), true, g, false, 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(grads, nodes, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Gelu { x, tanh } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (((a, y), &v), &t) in gx.iter_mut().zip(g).zip(val(*x)).zip(tanh) {
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *a += y * (0.5 * (1.0 + t) + 0.5 * v * dt);
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
                let n = xhat.len() / rstd.len();
                let gv = val(*gain).to_vec();
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for (row_g, row_h) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for row_g in g.chunks_exact(n) {
                        gb.iter_mut().zip(row_g).for_each(|(a, y)| *a += y);
                    }
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    let mut dh = vec![0.0; n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row_g = &g[r * n..(r + 1) * n];
                        let row_h = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            dh[j] = row_g[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * row_h[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        let dst = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dst[j] += rs * (dh[j] - mean_dh - row_h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    let out = nodes[i].value.data();
                    let k = nodes[i].value.shape()[1];
                    for (r, (row_p, row_g)) in out.chunks_exact(k).zip(g.chunks_exact(k)).enumerate() {
                        let dot_pg: f64 = row_p.iter().zip(row_g).map(|(p, y)| p * y).sum();
                        for j in 0..k {
                            gx[r * k + j] += row_p[j] * (row_g[j] - dot_pg);
                        }
                    }
                }
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
            Op::Embedding { table, ids } => {
                if let Some(gt) = slot(grads, nodes, *table) {
                    let d = g.len() / ids.len();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    let d = g.len() / rows.len();
                    for (r, &src) in rows.iter().enumerate() {
                        let dst = &mut gx[src * d..(src + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::MaskMul { w, mask } => {
                if let Some(gw) = slot(grads, nodes, *w) {
                    for ((a, y), m) in gw.iter_mut().zip(g).zip(mask) {
                        *a += y * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                if let Some(gz) = slot(grads, nodes, *logits) {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / b as f64;
                    for r in 0..b {
                        let w = weights[r] * scale;
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                            gz[r * k + j] += w * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::KlDiv {
                logits,
                target,
                weights,
                probs,
            } => {
                if let Some(gz) = slot(grads, nodes, *logits) {
                    let (b, k) = nodes[logits.0].value.dims2().expect("rank-2");
                    let scale = g[0] / b as f64;
                    for r in 0..b {
                        let w = weights[r] * scale;
                        let t = &target[r * k..(r + 1) * k];
                        let mass: f64 = t.iter().sum();
                        for j in 0..k {
                            gz[r * k + j] += w * (mass * probs[r * k + j] - t[j]);
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (batch, seq, heads) = (c.batch, c.seq, c.heads);
        let d = g.len() / (batch * seq);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nodes = &self.nodes;
        let qd = nodes[c.q.0].value.data();
        let kd = nodes[c.k.0].value.data();
        let vd = nodes[c.v.0].value.data();
        let xid = nodes[c.xi.0].value.data();
        let need = |v: Var| nodes[v.0].requires_grad;
        let (need_q, need_k, need_v, need_xi) = (need(c.q), need(c.k), need(c.v), need(c.xi));

        let mut dq = vec![0.0; if need_q { g.len() } else { 0 }];
        let mut dk = vec![0.0; if need_k { g.len() } else { 0 }];
        let mut dv = vec![0.0; if need_v { g.len() } else { 0 }];
        let mut dxi = vec![0.0; if need_xi { nodes[c.xi.0].value.numel() } else { 0 }];

        let mut d_out = vec![0.0; seq * dh];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            let valid = &c.key_mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let col = h * dh;
                let xi_idx = if c.xi_per_sample { b * heads + h } else { h };
                let xi_val = xid[xi_idx];
                let p_block = &c.probs[(b * heads + h) * seq * seq..][..seq * seq];
                let mut dxi_acc = 0.0;
                for i in 0..seq {
                    let gi = &g[(b * seq + i) * d + col..][..dh];
                    let oi = &c.heads_out[(b * seq + i) * d + col..][..dh];
                    dxi_acc += dot(gi, oi);
                    for e in 0..dh {
                        d_out[i * dh + e] = xi_val * gi[e];
                    }
                }
                if need_xi {
                    dxi[xi_idx] += dxi_acc;
                }
                if !(need_q || need_k || need_v) {
                    continue;
                }
                for i in 0..seq {
                    let p = &p_block[i * seq..(i + 1) * seq];
                    let doi = &d_out[i * dh..(i + 1) * dh];
                    let mut weighted = 0.0;
                    for j in 0..seq {
                        if !valid[j] {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[(b * seq + j) * d + col..][..dh];
                        dp[j] = dot(doi, vj);
                        weighted += p[j] * dp[j];
                        if need_v && p[j] != 0.0 {
                            let dst = &mut dv[(b * seq + j) * d + col..][..dh];
                            for e in 0..dh {
                                dst[e] += p[j] * doi[e];
                            }
                        }
                    }
                    for j in 0..seq {
                        if !valid[j] {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        if need_q {
                            let kj = &kd[(b * seq + j) * d + col..][..dh];
                            let dst = &mut dq[(b * seq + i) * d + col..][..dh];
                            for e in 0..dh {
                                dst[e] += ds * kj[e];
                            }
                        }
                        if need_k {
                            let qi = &qd[(b * seq + i) * d + col..][..dh];
                            let dst = &mut dk[(b * seq + j) * d + col..][..dh];
                            for e in 0..dh {
                                dst[e] += ds * qi[e];
                            }
                        }
                    }
                }
            }
        }
        for (v, buf, needed) in [
            (c.q, dq, need_q),
            (c.k, dk, need_k),
            (c.v, dv, need_v),
            (c.xi, dxi, need_xi),
        ] {
            if !needed {
                continue;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&buf).for_each(|(a, x)| *a += x),
                slot @ None => *slot = Some(buf),
            }
        }
    }
}

/// Gradient buffer for an input, created on first use. `None` when the input
/// does not require a gradient.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `tanh` through a single `exp`; noticeably cheaper than the libm routine
/// and accurate to a few ulps of 1.
fn tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.constant(t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = tape.constant(t2(&[vec![1.0, 2.0]]));
        let col = tape.constant(t2(&[vec![3.0], vec![4.0]]));
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut tape = Tape::new();
        let xs = vec![1.0, -2.0, 3.0];
        let x = tape.leaf(Tensor::new(vec![3], xs.clone()).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let g1: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), g1.as_slice());
        tape.backward(s).unwrap();
        let g2: Vec<f64> = xs.iter().map(|v| 4.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), g2.as_slice());
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(t2(&[vec![0.0, 0.0, 0.0]]));
        let l = tape.cross_entropy(z, &[1], None).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-15);

        let z = tape.constant(t2(&[vec![800.0, 0.0]]));
        let l = tape.cross_entropy(z, &[0], None).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let z = tape.constant(t2(&[vec![0.0, 1.0]]));
        assert!(matches!(tape.cross_entropy(z, &[2], None), Err(Error::Index(_))));
    }

    #[test]
    fn kl_analytic_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(t2(&[vec![0.0, 0.0]]));
        let target = t2(&[vec![1.0, 0.0]]);
        let l = tape.kl_divergence(&target, z, None).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let logits = t2(&[vec![0.3, -1.2, 2.0]]);
        let target = super::super::softmax(&logits).unwrap();
        let z = tape.constant(logits);
        let l = tape.kl_divergence(&target, z, None).unwrap();
        assert!(tape.value(l).item().abs() < 1e-10);

        let bad = t2(&[vec![0.5, 0.4, 0.0]]);
        assert!(matches!(tape.kl_divergence(&bad, z, None), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_zero_head_mask_blocks_gradient_into_projections() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::filled(&[3, 4], 0.3), true);
        let k = tape.leaf(Tensor::filled(&[3, 4], -0.2), true);
        let v = tape.leaf(Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap(), true);
        let xi = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let out = tape.attention(q, k, v, xi, &[true; 3], 1, 2).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
        let s = tape.sum(out);
        tape.backward(s).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn attention_ignores_masked_keys() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::filled(&[2, 2], 1.0));
        let k = tape.constant(Tensor::filled(&[2, 2], 1.0));
        let v = tape.constant(t2(&[vec![1.0, 2.0], vec![100.0, 200.0]]));
        let xi = tape.constant(Tensor::ones(&[1]));
        let out = tape.attention(q, k, v, xi, &[true, false], 1, 1).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 1.0, 2.0]);
    }
}
