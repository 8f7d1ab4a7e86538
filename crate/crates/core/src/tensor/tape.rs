use std::collections::HashMap;

use rand::Rng;

use super::{lit, Element, Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis selector for `concat` / `slice`, on the `rows x cols` view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Transpose(Var),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, usize),
    GatherRows(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        degenerate: Vec<bool>,
    },
    Pick(Var, Vec<usize>),
    Clamp(Var, T, T),
    Dropout(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records operations in topological order and replays them backwards.
///
/// Parameters are pulled from an optional borrowed [`ParamStore`]; each
/// parameter is recorded at most once per tape, so gradients from every use
/// accumulate on a single node.
pub struct Tape<'p, T: Element = f32> {
    params: Option<&'p ParamStore<T>>,
    track_params: bool,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<T: Element> Default for Tape<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<'static, T> {
    pub fn new() -> Self {
        Tape {
            params: None,
            track_params: false,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }
}

impl<'p, T: Element> Tape<'p, T> {
    /// Tape whose parameters receive gradients.
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Tape {
            params: Some(params),
            track_params: true,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// Tape whose parameters are treated as constants.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Tape {
            params: Some(params),
            track_params: false,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Gradients of every parameter used on this tape.
    pub fn param_grads(&self) -> Gradients<T> {
        let n = self.params.map_or(0, ParamStore::len);
        let mut out = Gradients::new(n);
        for (id, var) in &self.param_nodes {
            if let Some(g) = &self.nodes[var.0].grad {
                out.accumulate(*id, g);
            }
        }
        out
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ----- leaves -----------------------------------------------------

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let store = self.params.expect("tape has no parameter store");
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            requires_grad: self.track_params,
            grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Detached copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    // ----- linear algebra ----------------------------------------------

    /// `(.., k) x (k, n) -> (.., n)`; leading dims of the left operand act as batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if bv.rank() != 2 || av.rank() == 0 || av.cols() != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(av.data(), bv.data(), m, k, n, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: av.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let out = transpose_data(av.data(), r, c);
        let rg = self.rg(&[a]);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg)
    }

    // ----- elementwise -------------------------------------------------

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        let ok = sa == sb || (sb.len() <= sa.len() && sa.ends_with(sb) && !sb.is_empty());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, bv.data()[i % bl]))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    /// Elementwise sum; `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = map(&self.nodes[a.0].value, |x| x * c);
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = map(&self.nodes[a.0].value, |x| x + c);
        let rg = self.rg(&[a]);
        self.push("add_scalar", out, Op::AddScalar(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = map(&self.nodes[a.0].value, |x| x.ln());
        let rg = self.rg(&[a]);
        self.push("log", out, Op::Log(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = map(&self.nodes[a.0].value, |x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push("relu", out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map(&self.nodes[a.0].value, sigmoid);
        let rg = self.rg(&[a]);
        self.push("sigmoid", out, Op::Sigmoid(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = map(&self.nodes[a.0].value, |x| gelu(x).0);
        let rg = self.rg(&[a]);
        self.push("gelu", out, Op::Gelu(a), rg)
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let out = map(&self.nodes[a.0].value, |x| x.max(lo).min(hi));
        let rg = self.rg(&[a]);
        self.push("clamp", out, Op::Clamp(a, lo, hi), rg)
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f32, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = lit::<T>(1.0 / (1.0 - p as f64));
        let mask: Vec<T> = (0..self.nodes[a.0].value.len())
            .map(|_| if rng.random::<f32>() < p { T::zero() } else { keep })
            .collect();
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push("dropout", out, Op::Dropout(a, mask), rg)
    }

    // ----- structural --------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let first = &self.nodes[parts[0].0].value;
        let (rows0, cols0) = (first.rows(), first.cols());
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let v = &self.nodes[p.0].value;
                    if v.cols() != cols0 {
                        return Err(Error::Shape {
                            op: "concat",
                            lhs: first.shape().to_vec(),
                            rhs: v.shape().to_vec(),
                        });
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::new(vec![rows, cols0], data)?
            }
            Axis::Cols => {
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    let v = &self.nodes[p.0].value;
                    if v.rows() != rows0 {
                        return Err(Error::Shape {
                            op: "concat",
                            lhs: first.shape().to_vec(),
                            rhs: v.shape().to_vec(),
                        });
                    }
                    widths.push(v.cols());
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows0 * total);
                for r in 0..rows0 {
                    for p in parts {
                        data.extend_from_slice(self.nodes[p.0].value.row(r));
                    }
                }
                Tensor::new(vec![rows0, total], data)?
            }
        };
        let rg = self.rg(parts);
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows(), av.cols());
        let limit = if axis == Axis::Rows { rows } else { cols };
        if start >= end || end > limit {
            return Err(Error::Shape {
                op: "slice",
                lhs: av.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let out = match axis {
            Axis::Rows => Tensor::new(
                vec![end - start, cols],
                av.data()[start * cols..end * cols].to_vec(),
            )?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(rows * (end - start));
                for r in 0..rows {
                    data.extend_from_slice(&av.row(r)[start..end]);
                }
                Tensor::new(vec![rows, end - start], data)?
            }
        };
        let rg = self.rg(&[a]);
        self.push("slice", out, Op::Slice(a, axis, start), rg)
    }

    /// Embedding lookup: output row `i` is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (rows, cols) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather table",
                    index: i as i64,
                    size: rows,
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        let rg = self.rg(&[table]);
        self.push("gather_rows", out, Op::GatherRows(table, ids.to_vec()), rg)
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows(), av.cols());
        if idx.len() != rows {
            return Err(Error::Shape {
                op: "pick",
                lhs: av.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(Error::Index {
                    what: "pick column",
                    index: c as i64,
                    size: cols,
                });
            }
            data.push(av.row(r)[c]);
        }
        let rg = self.rg(&[a]);
        self.push("pick", Tensor::vector(data), Op::Pick(a, idx.to_vec()), rg)
    }

    // ----- normalizations ------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Softmax over the last axis; columns with `key_mask[j] == false` get
    /// probability exactly zero (an attention logit of minus infinity).
    pub fn masked_softmax(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let cols = av.cols();
        if let Some(m) = key_mask {
            if m.len() != cols {
                return Err(Error::Shape {
                    op: "softmax",
                    lhs: av.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
            if !m.iter().any(|k| *k) {
                return Err(Error::Invalid("softmax with every column masked".into()));
            }
        }
        let mut out = av.clone();
        for r in 0..av.rows() {
            softmax_row(out.row_mut(r), key_mask);
        }
        let rg = self.rg(&[a]);
        self.push("softmax", out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let mut out = av.clone();
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            let mx = row.iter().fold(T::neg_infinity(), |m, x| m.max(*x));
            let lse = row.iter().map(|x| (*x - mx).exp()).sum::<T>().ln() + mx;
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        let rg = self.rg(&[a]);
        self.push("log_softmax", out, Op::LogSoftmax(a), rg)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let cols = xv.cols();
        for p in [gain, bias] {
            let pv = &self.nodes[p.0].value;
            if pv.len() != cols {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
        }
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let n = lit::<T>(cols as f64);
        let eps = lit::<T>(eps);
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Row-wise L2 normalization. A zero row maps to the uniform unit vector
    /// (with zero gradient) and is logged.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let cols = av.cols();
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        let mut degenerate = Vec::with_capacity(av.rows());
        let tiny = lit::<T>(1e-12);
        for r in 0..av.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if n <= tiny {
                log::warn!("l2_normalize: zero vector in row {r}, using uniform unit vector");
                let u = T::one() / lit::<T>(cols as f64).sqrt();
                row.iter_mut().for_each(|v| *v = u);
                degenerate.push(true);
            } else {
                row.iter_mut().for_each(|v| *v = *v / n);
                degenerate.push(false);
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push(
            "l2_normalize",
            out,
            Op::L2Normalize {
                x: a,
                norms,
                degenerate,
            },
            rg,
        )
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.is_empty() {
            return Err(Error::Invalid("mean of empty tensor".into()));
        }
        let s = av.data().iter().copied().sum::<T>() / lit::<T>(av.len() as f64);
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    // ----- backward ------------------------------------------------------

    /// Backpropagate from a scalar loss. Gradients accumulate on leaves and
    /// parameters across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_with(loss, &[T::one()])
    }

    /// Backpropagate an arbitrary upstream gradient `seed` from `root`.
    pub fn backward_with(&mut self, root: Var, seed: &[T]) -> Result<()> {
        if seed.len() != self.nodes[root.0].value.len() {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.nodes[root.0].value.shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.to_vec());
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if let Some(ga) = slot(grads, nodes, *a) {
                    matmul_nt_acc(g, bv.data(), m, n, k, ga);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    matmul_tn_acc(av.data(), g, m, k, n, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(ga) = slot(grads, nodes, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    let bl = gb.len();
                    for (j, v) in g.iter().enumerate() {
                        gb[j % bl] = gb[j % bl] + sign * *v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let bl = bv.len();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (j, v) in g.iter().enumerate() {
                        ga[j] = ga[j] + *v * bv[j % bl];
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for (j, v) in g.iter().enumerate() {
                        gb[j % bl] = gb[j % bl] + *v * av[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, v)| *x = *x + *c * *v);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    add_into(ga, g);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let gt = transpose_data(g, r, c);
                if let Some(ga) = slot(grads, nodes, *a) {
                    add_into(ga, &gt);
                }
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        if let Some(gp) = slot(grads, nodes, *p) {
                            add_into(gp, &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Axis::Cols => {
                    let (rows, total) = (out.rows(), out.cols());
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        if let Some(gp) = slot(grads, nodes, *p) {
                            for r in 0..rows {
                                let src = &g[r * total + off..r * total + off + w];
                                add_into(&mut gp[r * w..(r + 1) * w], src);
                            }
                        }
                        off += w;
                    }
                }
            },
            Op::Slice(a, axis, start) => {
                let av = &nodes[a.0].value;
                let (rows, cols) = (av.rows(), av.cols());
                if let Some(ga) = slot(grads, nodes, *a) {
                    match axis {
                        Axis::Rows => add_into(&mut ga[start * cols..start * cols + g.len()], g),
                        Axis::Cols => {
                            let w = out.cols();
                            for r in 0..rows {
                                add_into(
                                    &mut ga[r * cols + start..r * cols + start + w],
                                    &g[r * w..(r + 1) * w],
                                );
                            }
                        }
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let cols = nodes[table.0].value.cols();
                if let Some(gt) = slot(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Pick(a, idx) => {
                let cols = nodes[a.0].value.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (r, &c) in idx.iter().enumerate() {
                        ga[r * cols + c] = ga[r * cols + c] + g[r];
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = y.iter().zip(gr).map(|(p, q)| *p * *q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] = ga[r * cols + j] + y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gs: T = gr.iter().copied().sum();
                        for j in 0..cols {
                            ga[r * cols + j] = ga[r * cols + j] + gr[j] - y[j].exp() * gs;
                        }
                    }
                }
            }
            Op::Log(a) => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] / av[j];
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
                let cols = out.cols();
                let gv = nodes[gain.0].value.data();
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for (j, v) in g.iter().enumerate() {
                        gg[j % cols] = gg[j % cols] + *v * xhat[j];
                    }
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for (j, v) in g.iter().enumerate() {
                        gb[j % cols] = gb[j % cols] + *v;
                    }
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    let n = lit::<T>(cols as f64);
                    for r in 0..out.rows() {
                        let base = r * cols;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..cols {
                            let d = g[base + j] * gv[j];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[base + j];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        for j in 0..cols {
                            let d = g[base + j] * gv[j];
                            gx[base + j] =
                                gx[base + j] + rstd[r] * (d - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * gelu(av[j]).1;
                    }
                }
            }
            Op::Relu(a) => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for j in 0..g.len() {
                        if av[j] > T::zero() {
                            ga[j] = ga[j] + g[j];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * y[j] * (T::one() - y[j]);
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for j in 0..g.len() {
                        if av[j] >= *lo && av[j] <= *hi {
                            ga[j] = ga[j] + g[j];
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * mask[j];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().for_each(|x| *x = *x + g[0]);
                }
            }
            Op::Mean(a) => {
                let n = lit::<T>(nodes[a.0].value.len() as f64);
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().for_each(|x| *x = *x + g[0] / n);
                }
            }
            Op::L2Normalize {
                x,
                norms,
                degenerate,
            } => {
                let cols = out.cols();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for r in 0..out.rows() {
                        if degenerate[r] {
                            continue;
                        }
                        let y = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = y.iter().zip(gr).map(|(p, q)| *p * *q).sum();
                        for j in 0..cols {
                            gx[r * cols + j] = gx[r * cols + j] + (gr[j] - y[j] * dot) / norms[r];
                        }
                    }
                }
            }
        }
    }
}

fn slot<'g, T: Element>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a = *a + *b);
}

fn map<T: Element>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("same shape")
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu<T: Element>(x: T) -> (T, T) {
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let dinner = c * (T::one() + lit::<T>(3.0) * a * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (value, deriv)
}

pub(crate) fn softmax_row<T: Element>(row: &mut [T], mask: Option<&[bool]>) {
    let live = |j: usize| mask.is_none_or(|m| m[j]);
    let mut mx = T::neg_infinity();
    for (j, v) in row.iter().enumerate() {
        if live(j) {
            mx = mx.max(*v);
        }
    }
    let mut total = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if live(j) {
            *v = (*v - mx).exp();
            total = total + *v;
        } else {
            *v = T::zero();
        }
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

fn transpose_data<T: Element>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// `out (m x n) += a (m x k) . b (k x n)`.
fn matmul_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let s = a[i * k + kk];
            if s == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + s * *bv;
            }
        }
    }
}

/// `out (m x k) += g (m x n) . b^T` where `b` is `k x n`.
fn matmul_nt_acc<T: Element>(g: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            out[i * k + kk] = out[i * k + kk] + dot(grow, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// `out (k x n) += a^T . g` where `a` is `m x k` and `g` is `m x n`.
fn matmul_tn_acc<T: Element>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let s = a[i * k + kk];
            if s == T::zero() {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o = *o + s * *gv;
            }
        }
    }
}
