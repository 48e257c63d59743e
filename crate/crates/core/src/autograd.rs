//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! linear tape. Parameters are read from a borrowed [`ParamStore`] without
//! copying, so several graphs can evaluate the same frozen weights from
//! different threads. [`Graph::backward`] replays the tape in reverse and
//! returns a [`Gradients`] table that can be folded into the store.
//!
//! Broadcasting is limited to adding a row vector to every row of a matrix
//! (`add_row`); everything else requires matching shapes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

/// Epsilon inside layer-norm's variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    MulScalar { x: Var, s: Var },
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        sources: Vec<Var>,
        picks: Vec<(u32, u32)>,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanPool { x: Var, groups: usize },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    param: Option<ParamId>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    track: bool,
    non_finite: Option<&'static str>,
}

impl<'p> Graph<'p> {
    /// A graph that records what `backward` needs.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            track: true,
            non_finite: None,
        }
    }

    /// A graph for frozen-weight evaluation; `backward` is unavailable.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(t), _) => t,
            (None, Some(id)) => self.store.value(id),
            (None, None) => unreachable!("node without value"),
        }
    }

    /// Errors if any recorded operation produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite(format!("output of {op}"))),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            needs_grad: needs_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true, "input")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Leaf,
            needs_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    fn mat_dims(&self, v: Var) -> Option<(usize, usize)> {
        let s = self.value(v).shape();
        (s.len() == 2).then(|| (s[0], s[1]))
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m x k] * b[n x k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (Some((m, k)), Some((br, bc))) = (self.mat_dims(a), self.mat_dims(b)) else {
            return Err(self.shape_err("matmul", a, b));
        };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        let bref = MatRef::row_major(self.value(b).data(), bc);
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::row_major(self.value(a).data(), k),
            if trans_b { bref.t() } else { bref },
            0.0,
            MatMut::row_major(&mut out, n),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            ng,
            "matmul",
        ))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng, "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng, "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng, "mul"))
    }

    /// Adds `bias` (`cols` elements) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(self.shape_err("add_row", x, bias));
        }
        let mut t = self.value(x).clone();
        let b = self.value(bias).data();
        for row in t.data_mut().chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddRow { x, bias }, ng, "add_row"))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, c }, ng, "scale")
    }

    /// `x * s` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.shape_err("mul_scalar", x, s));
        }
        let sv = self.value(s).item();
        let t = self.value(x).map(|v| v * sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::MulScalar { x, s }, ng, "mul_scalar"))
    }

    fn unary(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(t, op, ng, name)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), "gelu", |v| gelu(v).0)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), "silu", |v| v * sigmoid(v))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), "tanh", f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), "exp", f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), "square", |v| v * v)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols();
        t.data_mut().chunks_mut(c).for_each(softmax_in_place);
        let ng = self.ng(x);
        self.push(t, Op::SoftmaxRows(x), ng, "softmax_rows")
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if d < 2 {
            return Err(Error::contract(format!(
                "layer_norm needs at least 2 features, got {d}"
            )));
        }
        if self.value(gain).len() != d {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).len() != d {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let xt = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xt.rows();
        let mut xhat = vec![0.0; xt.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xt.len()];
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let (xhat, inv_std) = if ng && self.track {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
            "layer_norm",
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch * seq, 3 * dim]` with queries, keys and values in
    /// consecutive column blocks; each of the `batch` row groups attends
    /// only within itself. Returns `[batch * seq, dim]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let t = self.value(qkv);
        let (rows, c3) = (t.rows(), t.cols());
        if batch == 0 || rows % batch != 0 || rows == 0 {
            return Err(Error::contract(format!(
                "attention over {rows} tokens cannot split into {batch} sequences"
            )));
        }
        if c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(Error::contract(format!(
                "attention width {c3} is not 3 x heads({heads}) x head_dim"
            )));
        }
        let seq = rows / batch;
        let dim = c3 / 3;
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let ng = self.ng(qkv);
        let keep = ng && self.track;
        let src = t.data();
        let mut out = vec![0.0; rows * dim];
        let mut probs = vec![0.0; if keep { batch * heads * seq * seq } else { seq * seq }];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * c3;
                let q = MatRef::row_major(src, c3).at(base + h * hd);
                let k = MatRef::row_major(src, c3).at(base + dim + h * hd);
                let v = MatRef::row_major(src, c3).at(base + 2 * dim + h * hd);
                let p_off = if keep { (b * heads + h) * seq * seq } else { 0 };
                let p = &mut probs[p_off..p_off + seq * seq];
                gemm(seq, hd, seq, scale, q, k.t(), 0.0, MatMut::row_major(p, seq));
                p.chunks_mut(seq).for_each(softmax_in_place);
                gemm(
                    seq,
                    seq,
                    hd,
                    1.0,
                    MatRef::row_major(p, seq),
                    v,
                    0.0,
                    MatMut::row_major(&mut out, dim).at(b * seq * dim + h * hd),
                );
            }
        }
        if !keep {
            probs = Vec::new();
        }
        Ok(self.push(
            Tensor::new(vec![rows, dim], out)?,
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            },
            ng,
            "attention",
        ))
    }

    /// Builds a matrix whose row `i` is row `picks[i].1` of
    /// `sources[picks[i].0]`. All sources must share a column count.
    pub fn gather(&mut self, sources: &[Var], picks: Vec<(u32, u32)>) -> Result<Var> {
        let first = *sources
            .first()
            .ok_or_else(|| Error::contract("gather needs at least one source"))?;
        let c = self.value(first).cols();
        for &s in sources {
            if self.value(s).cols() != c {
                return Err(self.shape_err("gather", first, s));
            }
        }
        if picks.is_empty() {
            return Err(Error::contract("gather of zero rows"));
        }
        let mut data = Vec::with_capacity(picks.len() * c);
        for &(s, r) in &picks {
            let t = self.value(sources[s as usize]);
            if r as usize >= t.rows() {
                return Err(Error::contract(format!(
                    "gather row {r} out of range for {} rows",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(r as usize));
        }
        let t = Tensor::new(vec![picks.len(), c], data)?;
        let ng = sources.iter().any(|&s| self.ng(s));
        Ok(self.push(
            t,
            Op::Gather {
                sources: sources.to_vec(),
                picks,
            },
            ng,
            "gather",
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let picks = parts
            .iter()
            .enumerate()
            .flat_map(|(i, &p)| (0..self.value(p).rows() as u32).map(move |r| (i as u32, r)))
            .collect();
        self.gather(parts, picks)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let picks = (start..start + len).map(|r| (0, r as u32)).collect();
        self.gather(&[x], picks)
    }

    /// Repeats the single row of `x` `n` times.
    pub fn repeat_row(&mut self, x: Var, n: usize) -> Result<Var> {
        self.gather(&[x], vec![(0, 0); n])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(t, Op::Transpose(x), ng, "transpose")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(t, Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        let ng = self.ng(x);
        self.push(t, Op::Mean(x), ng, "mean")
    }

    /// Averages each of `groups` consecutive row blocks: `[groups * n, d]`
    /// to `[groups, d]`.
    pub fn mean_pool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.cols());
        if groups == 0 || rows % groups != 0 {
            return Err(Error::contract(format!(
                "cannot pool {rows} rows into {groups} groups"
            )));
        }
        let n = rows / groups;
        let mut out = vec![0.0; groups * d];
        for r in 0..rows {
            let g = r / n;
            for (o, v) in out[g * d..(g + 1) * d].iter_mut().zip(t.row(r)) {
                *o += v / n as f64;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![groups, d], out)?,
            Op::MeanPool { x, groups },
            ng,
            "mean_pool",
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        for row in t.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(t, Op::L2NormalizeRows { x, norms }, ng, "l2_normalize_rows")
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = (t.rows(), t.cols());
        if targets.len() != rows || targets.iter().any(|&k| k >= c) {
            return Err(Error::contract(format!(
                "cross entropy over {rows}x{c} logits with {} targets",
                targets.len()
            )));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            softmax_in_place(row);
            loss -= row[targets[r]].max(f64::MIN_POSITIVE).ln();
        }
        loss /= rows as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
            "cross_entropy_rows",
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.track {
            return Err(Error::contract("backward on an inference graph"));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(&id, &v)| (id, v)).collect(),
        })
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = self.value(Var(i));
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
        };
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = (ta.rows(), ta.cols());
                let (br, bc) = (tb.rows(), tb.cols());
                let n = if trans_b { br } else { bc };
                let dyr = MatRef::row_major(dyd, n);
                if self.ng(a) {
                    let bref = MatRef::row_major(tb.data(), bc);
                    let mut da = vec![0.0; m * k];
                    // dA = dY * B^T   (or dY * B when B was transposed)
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        dyr,
                        if trans_b { bref } else { bref.t() },
                        0.0,
                        MatMut::row_major(&mut da, k),
                    );
                    acc(a, like(a, da));
                }
                if self.ng(b) {
                    let aref = MatRef::row_major(ta.data(), k);
                    let mut db = vec![0.0; br * bc];
                    if trans_b {
                        // dB = dY^T * A
                        gemm(n, m, k, 1.0, dyr.t(), aref, 0.0, MatMut::row_major(&mut db, bc));
                    } else {
                        // dB = A^T * dY
                        gemm(k, m, n, 1.0, aref.t(), dyr, 0.0, MatMut::row_major(&mut db, bc));
                    }
                    acc(b, like(b, db));
                }
            }
            &Op::Add(a, b) => {
                acc(a, dy.clone());
                acc(b, dy.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, dy.clone());
                acc(b, dy.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.ng(a) {
                    acc(a, like(a, dyd.iter().zip(tb.data()).map(|(g, v)| g * v).collect()));
                }
                if self.ng(b) {
                    acc(b, like(b, dyd.iter().zip(ta.data()).map(|(g, v)| g * v).collect()));
                }
            }
            &Op::AddRow { x, bias } => {
                acc(x, dy.clone());
                if self.ng(bias) {
                    let c = dy.cols();
                    let mut db = vec![0.0; c];
                    for row in dyd.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    acc(bias, like(bias, db));
                }
            }
            &Op::Scale { x, c } => acc(x, dy.map(|v| v * c)),
            &Op::MulScalar { x, s } => {
                let sv = self.value(s).item();
                acc(x, dy.map(|v| v * sv));
                if self.ng(s) {
                    let ds: f64 = dyd.iter().zip(self.value(x).data()).map(|(g, v)| g * v).sum();
                    acc(s, like(s, vec![ds]));
                }
            }
            &Op::Gelu(x) => {
                let xd = self.value(x).data();
                acc(x, like(x, dyd.iter().zip(xd).map(|(g, &v)| g * gelu(v).1).collect()));
            }
            &Op::Silu(x) => {
                let xd = self.value(x).data();
                let d = dyd
                    .iter()
                    .zip(xd)
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                acc(x, like(x, d));
            }
            &Op::Tanh(x) => {
                acc(x, like(x, dyd.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect()));
            }
            &Op::Exp(x) => {
                acc(x, like(x, dyd.iter().zip(y.data()).map(|(g, e)| g * e).collect()));
            }
            &Op::Square(x) => {
                let xd = self.value(x).data();
                acc(x, like(x, dyd.iter().zip(xd).map(|(g, v)| 2.0 * g * v).collect()));
            }
            &Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((o, p), g) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(dyd.chunks(c)) {
                    softmax_backward(p, g, o);
                }
                acc(x, like(x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = y.cols();
                let g = self.value(*gain).data();
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (row_g, row_h) in dyd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row_g[j] * row_h[j];
                            db[j] += row_g[j];
                        }
                    }
                    acc(*gain, like(*gain, dg));
                    acc(*bias, like(*bias, db));
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; y.len()];
                    let df = d as f64;
                    for (r, ((o, row_g), row_h)) in
                        dx.chunks_mut(d).zip(dyd.chunks(d)).zip(xhat.chunks(d)).enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = row_g[j] * g[j];
                            sum_dh += dh;
                            sum_dh_h += dh * row_h[j];
                        }
                        for j in 0..d {
                            let dh = row_g[j] * g[j];
                            o[j] = inv_std[r] / df * (df * dh - sum_dh - row_h[j] * sum_dh_h);
                        }
                    }
                    acc(*x, like(*x, dx));
                }
            }
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            } => {
                let t = self.value(*qkv);
                let src = t.data();
                let (rows, c3) = (t.rows(), t.cols());
                let seq = rows / batch;
                let dim = c3 / 3;
                let hd = dim / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dqkv = vec![0.0; rows * c3];
                let mut dp = vec![0.0; seq * seq];
                let dyr = MatRef::row_major(dyd, dim);
                for b in 0..*batch {
                    for h in 0..*heads {
                        let base = b * seq * c3;
                        let q = MatRef::row_major(src, c3).at(base + h * hd);
                        let k = MatRef::row_major(src, c3).at(base + dim + h * hd);
                        let v = MatRef::row_major(src, c3).at(base + 2 * dim + h * hd);
                        let dout = dyr.at(b * seq * dim + h * hd);
                        let p_off = (b * heads + h) * seq * seq;
                        let p = &probs[p_off..p_off + seq * seq];
                        let pref = MatRef::row_major(p, seq);
                        // dP = dO * V^T ; dV = P^T * dO
                        gemm(seq, hd, seq, 1.0, dout, v.t(), 0.0, MatMut::row_major(&mut dp, seq));
                        gemm(
                            seq,
                            seq,
                            hd,
                            1.0,
                            pref.t(),
                            dout,
                            0.0,
                            MatMut::row_major(&mut dqkv, c3).at(base + 2 * dim + h * hd),
                        );
                        for (prow, drow) in p.chunks(seq).zip(dp.chunks_mut(seq)) {
                            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            drow.iter_mut()
                                .zip(prow)
                                .for_each(|(d, &pv)| *d = pv * (*d - dot) * scale);
                        }
                        let dsref = MatRef::row_major(&dp, seq);
                        // dQ = dS * K ; dK = dS^T * Q
                        gemm(
                            seq,
                            seq,
                            hd,
                            1.0,
                            dsref,
                            k,
                            0.0,
                            MatMut::row_major(&mut dqkv, c3).at(base + h * hd),
                        );
                        gemm(
                            seq,
                            seq,
                            hd,
                            1.0,
                            dsref.t(),
                            q,
                            0.0,
                            MatMut::row_major(&mut dqkv, c3).at(base + dim + h * hd),
                        );
                    }
                }
                acc(*qkv, like(*qkv, dqkv));
            }
            Op::Gather { sources, picks } => {
                let c = y.cols();
                let mut parts: Vec<Option<Vec<f64>>> = sources
                    .iter()
                    .map(|&s| self.ng(s).then(|| vec![0.0; self.value(s).len()]))
                    .collect();
                for (i, &(s, r)) in picks.iter().enumerate() {
                    if let Some(buf) = &mut parts[s as usize] {
                        let r = r as usize;
                        buf[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&dyd[i * c..(i + 1) * c])
                            .for_each(|(d, g)| *d += g);
                    }
                }
                // The same source may appear more than once in `sources`.
                for (&s, buf) in sources.iter().zip(parts) {
                    if let Some(buf) = buf {
                        acc(s, like(s, buf));
                    }
                }
            }
            &Op::Transpose(x) => acc(x, dy.transpose()),
            &Op::Sum(x) => {
                let g = dy.item();
                acc(x, self.value(x).map(|_| g));
            }
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                let g = dy.item() / n;
                acc(x, self.value(x).map(|_| g));
            }
            &Op::MeanPool { x, groups } => {
                let t = self.value(x);
                let (rows, d) = (t.rows(), t.cols());
                let n = rows / groups;
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let g = r / n;
                    for (o, v) in dx[r * d..(r + 1) * d].iter_mut().zip(&dyd[g * d..(g + 1) * d]) {
                        *o = v / n as f64;
                    }
                }
                acc(x, like(x, dx));
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, ((o, yr), gr)) in dx
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(dyd.chunks(c))
                    .enumerate()
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        o[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let rows = targets.len();
                let g = dy.item() / rows as f64;
                let mut dx = probs.clone();
                for (r, row) in dx.chunks_mut(c).enumerate() {
                    row[targets[r]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g);
                }
                acc(*logits, like(*logits, dx));
            }
        }
    }
}

/// Output of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient w.r.t. a node, if one reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.accumulate_grad(id, g);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn softmax_backward(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for j in 0..p.len() {
        out[j] = p[j] * (g[j] - dot);
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Tanh-approximated GELU and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}
