//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] is an append-only list of nodes. Each forward operation
//! computes its value eagerly and records what the backward sweep needs.
//! Node ids are handed out in creation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse pass.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::rng::RngState;
use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Gelu(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
    Sum(usize),
    MeanRows(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Transpose(..) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::Clamp { .. } => "clamp",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Transpose(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Sum(x)
            | Op::MeanRows(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::Dropout { x, .. }
            | Op::MaskedFill { x, .. }
            | Op::Clamp { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Dropout configuration for a training-mode graph.
#[derive(Debug)]
struct DropoutCtx {
    rate: f64,
    rng: RngState,
}

/// The differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
    n_params: usize,
    dropout: Option<DropoutCtx>,
    consumed: bool,
}

/// Gradients for every input leaf and parameter reachable from the root.
#[derive(Debug)]
pub struct GradTable {
    nodes: Vec<Option<Tensor>>,
    params: Gradients,
}

impl GradTable {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    /// Training-mode graph with inverted dropout at `rate`, masks drawn from `rng`.
    pub fn training(rate: f64, rng: RngState) -> Self {
        Self {
            dropout: (rate > 0.0).then_some(DropoutCtx { rate, rng }),
            ..Self::default()
        }
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Operation tag of a node (`"matmul"`, `"softmax"`, ...).
    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    /// Every node's inputs precede it.
    pub fn is_topological(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|&j| j < i))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite() || matches!(op, Op::Input | Op::Param(_)));
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf whose gradient is reported by [`GradTable::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to a stored parameter. Repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.n_params = self.n_params.max(store.len());
        if let Some(&n) = self.param_nodes.get(&id) {
            return Var(n);
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, v.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.val(a).dims2()?;
        let (k2, n) = self.val(b).dims2()?;
        if k != k2 || self.val(a).shape().len() != 2 || self.val(b).shape().len() != 2 {
            return Err(Error::dim("matmul", self.val(a).shape(), self.val(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::dim(op, self.val(a).shape(), self.val(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// `x[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.val(x).dims2()?;
        if self.val(b).len() != n {
            return Err(Error::dim("add_row", self.val(x).shape(), self.val(b).shape()));
        }
        let bd = self.val(b).data();
        let mut out = self.val(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let shape = self.val(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Scale(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::AddScalar(x.0))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        if t.shape().len() != 2 {
            return Err(Error::dim("transpose", t.shape(), &[0, 0]));
        }
        let (m, n) = t.dims2()?;
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x.0)))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.val(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                size: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| o * n * inner + i * inner + j;
                let mx = (0..n).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in 0..n {
                    let e = (d[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    s += e;
                }
                for i in 0..n {
                    out[idx(i)] /= s;
                }
            }
        }
        let shape = shape.to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x: x.0, outer, n, inner }))
    }

    /// Row-wise `(x − mean)/sqrt(var + eps) · gain + bias` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.val(x).dims2()?;
        if self.val(gain).len() != n || self.val(bias).len() != n {
            return Err(Error::dim("layer_norm", self.val(x).shape(), self.val(gain).shape()));
        }
        let d = self.val(x).data();
        let g = self.val(gain).data();
        let b = self.val(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &d[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.val(x).shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.val(table).dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(self.val(table).row(id));
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::input("concat needs at least one part and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| {
                let t = self.val(p);
                if t.shape().len() != 2 {
                    Err(Error::dim("concat", t.shape(), &[0, 0]))
                } else {
                    t.dims2()
                }
            })
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let out = if axis == 0 {
            if let Some(p) = dims.iter().position(|&(_, c)| c != c0) {
                return Err(Error::dim("concat", self.val(parts[0]).shape(), self.val(parts[p]).shape()));
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.val(p).data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            if let Some(p) = dims.iter().position(|&(r, _)| r != r0) {
                return Err(Error::dim("concat", self.val(parts[0]).shape(), self.val(parts[p]).shape()));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.val(p).row(r));
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        ))
    }

    /// `x[start..end]` along `axis` of a rank-2 tensor.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.val(x);
        if t.shape().len() != 2 || axis > 1 {
            return Err(Error::dim("slice", t.shape(), &[0, 0]));
        }
        let (m, n) = t.dims2()?;
        let limit = if axis == 0 { m } else { n };
        if start > end || end > limit {
            return Err(Error::Index {
                what: "slice bound",
                index: end.max(start),
                size: limit,
            });
        }
        let out = if axis == 0 {
            Tensor::new(vec![end - start, n], t.data()[start * n..end * n].to_vec())?
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(m * w);
            for r in 0..m {
                data.extend_from_slice(&t.row(r)[start..end]);
            }
            Tensor::new(vec![m, w], data)?
        };
        Ok(self.push(out, Op::Slice { x: x.0, axis, start }))
    }

    /// Row `i` as a `1×n` tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice(x, 0, i, i + 1)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x.0), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.0), |v| v.max(0.0))
    }

    /// Natural log; caller guarantees positive inputs (see [`Graph::clamp`]).
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x.0), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x.0), f64::exp)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x: x.0, lo, hi }, |v| v.clamp(lo, hi))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(t, op)
    }

    /// Inverted dropout. Identity on evaluation graphs.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some(ctx) = self.dropout.as_mut() else {
            return x;
        };
        let keep = 1.0 - ctx.rate;
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if ctx.rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.val(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Dropout { x: x.0, mask })
    }

    /// Sum over rows of `−log softmax(logits_r)[targets_r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.val(logits).dims2()?;
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", self.val(logits).shape(), &[targets.len()]));
        }
        let d = self.val(logits).data();
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for r in 0..m {
            let t = targets[r];
            if t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    size: v,
                });
            }
            let row = &d[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + s.ln();
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
            loss += lse - row[t];
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Replaces entries where `mask` is true with `value`; no gradient flows through them.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = self.val(x);
        if mask.len() != t.len() {
            return Err(Error::dim("masked_fill", t.shape(), &[mask.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(
            t,
            Op::MaskedFill {
                x: x.0,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.val(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means of `x[m×n]` as a `1×n` tensor.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.val(x).dims2()?;
        if m == 0 {
            return Err(Error::input("mean_rows over zero rows"));
        }
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(self.val(x).row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x.0)))
    }

    /// Reverse sweep from a scalar root. A graph may be swept only once.
    pub fn backward(&mut self, root: Var) -> Result<GradTable> {
        if self.consumed {
            return Err(Error::Contract("backward already run on this graph".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("root {} not on this graph", root.0)));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.consumed = true;

        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        let mut params: Vec<Option<Tensor>> = vec![None; self.n_params];

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    params[id.0] = Some(g);
                }
                op => self.propagate(i, op, &g, &mut grads)?,
            }
        }
        Ok(GradTable {
            nodes: grads,
            params: Gradients::new(params),
        })
    }

    fn propagate(&self, out_id: usize, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[out_id].value;
        let value = |j: usize| &self.nodes[j].value;
        let gd = g.data();
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = value(*a).dims2()?;
                let (_, n) = value(*b).dims2()?;
                let ga = acc(grads, *a, value(*a).shape());
                matmul_nt_into(gd, value(*b).data(), ga.data_mut(), m, k, n);
                let gb = acc(grads, *b, value(*b).shape());
                matmul_tn_into(value(*a).data(), gd, gb.data_mut(), m, k, n);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.shape()).add_assign(g);
                acc(grads, *b, g.shape()).add_assign(g);
            }
            Op::AddRow(x, b) => {
                acc(grads, *x, g.shape()).add_assign(g);
                let n = value(*b).len();
                let gb = acc(grads, *b, value(*b).shape());
                for (j, v) in gd.iter().enumerate() {
                    gb.data_mut()[j % n] += v;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (value(*a).data(), value(*b).data());
                let ga = acc(grads, *a, g.shape());
                for ((o, gi), bi) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                    *o += gi * bi;
                }
                let gb = acc(grads, *b, g.shape());
                for ((o, gi), ai) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                    *o += gi * ai;
                }
            }
            Op::Scale(x, c) => {
                let gx = acc(grads, *x, g.shape());
                for (o, gi) in gx.data_mut().iter_mut().zip(gd) {
                    *o += c * gi;
                }
            }
            Op::AddScalar(x) => acc(grads, *x, g.shape()).add_assign(g),
            Op::Transpose(x) => {
                let (m, n) = value(*x).dims2()?;
                let gx = acc(grads, *x, value(*x).shape());
                for i in 0..m {
                    for j in 0..n {
                        gx.data_mut()[i * n + j] += gd[j * m + i];
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = out.data();
                let gx = acc(grads, *x, g.shape());
                for o in 0..*outer {
                    for j in 0..*inner {
                        let idx = |i: usize| o * n * inner + i * inner + j;
                        let dot: f64 = (0..*n).map(|i| gd[idx(i)] * y[idx(i)]).sum();
                        for i in 0..*n {
                            gx.data_mut()[idx(i)] += y[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = value(*x).dims2()?;
                let gv = value(*gain).data();
                {
                    let gg = acc(grads, *gain, value(*gain).shape());
                    for r in 0..m {
                        for c in 0..n {
                            gg.data_mut()[c] += gd[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                {
                    let gb = acc(grads, *bias, value(*bias).shape());
                    for r in 0..m {
                        for c in 0..n {
                            gb.data_mut()[c] += gd[r * n + c];
                        }
                    }
                }
                let gx = acc(grads, *x, value(*x).shape());
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..n {
                        dxhat[c] = gd[r * n + c] * gv[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat[r * n + c];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for c in 0..n {
                        gx.data_mut()[r * n + c] +=
                            inv_std[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (_, d) = value(*table).dims2()?;
                let gt = acc(grads, *table, value(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt.data_mut()[id * d + c] += gd[r * d + c];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (_, cols) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = value(p).dims2()?;
                    let gp = acc(grads, p, value(p).shape());
                    if *axis == 0 {
                        for (o, v) in gp.data_mut().iter_mut().zip(&gd[offset * cols..(offset + pr) * cols]) {
                            *o += v;
                        }
                        offset += pr;
                    } else {
                        for r in 0..pr {
                            for c in 0..pc {
                                gp.data_mut()[r * pc + c] += gd[r * cols + offset + c];
                            }
                        }
                        offset += pc;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let (_, n) = value(*x).dims2()?;
                let (gr, gc) = g.dims2()?;
                let gx = acc(grads, *x, value(*x).shape());
                for r in 0..gr {
                    for c in 0..gc {
                        let (sr, sc) = if *axis == 0 { (r + start, c) } else { (r, c + start) };
                        gx.data_mut()[sr * n + sc] += gd[r * gc + c];
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = value(*x).data();
                let gx = acc(grads, *x, g.shape());
                for ((o, gi), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *o += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
            Op::Relu(x) => {
                let xv = value(*x).data();
                let gx = acc(grads, *x, g.shape());
                for ((o, gi), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                    if v > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Log(x) => {
                let xv = value(*x).data();
                let gx = acc(grads, *x, g.shape());
                for ((o, gi), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                    *o += gi / v;
                }
            }
            Op::Exp(x) => {
                let gx = acc(grads, *x, g.shape());
                for ((o, gi), y) in gx.data_mut().iter_mut().zip(gd).zip(out.data()) {
                    *o += gi * y;
                }
            }
            Op::Dropout { x, mask } => {
                let gx = acc(grads, *x, g.shape());
                for ((o, gi), m) in gx.data_mut().iter_mut().zip(gd).zip(mask) {
                    *o += gi * m;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (_, v) = value(*logits).dims2()?;
                let up = gd[0];
                let gl = acc(grads, *logits, value(*logits).shape());
                for (o, p) in gl.data_mut().iter_mut().zip(probs) {
                    *o += up * p;
                }
                for (r, &t) in targets.iter().enumerate() {
                    gl.data_mut()[r * v + t] -= up;
                }
            }
            Op::MaskedFill { x, mask } => {
                let gx = acc(grads, *x, g.shape());
                for ((o, gi), &m) in gx.data_mut().iter_mut().zip(gd).zip(mask) {
                    if !m {
                        *o += gi;
                    }
                }
            }
            Op::Sum(x) => {
                let up = gd[0];
                let gx = acc(grads, *x, value(*x).shape());
                for o in gx.data_mut() {
                    *o += up;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = value(*x).dims2()?;
                let gx = acc(grads, *x, value(*x).shape());
                for row in gx.data_mut().chunks_mut(n) {
                    for (o, gc) in row.iter_mut().zip(gd) {
                        *o += gc / m as f64;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = value(*x).data();
                let gx = acc(grads, *x, g.shape());
                for ((o, gi), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                    if v >= *lo && v <= *hi {
                        *o += gi;
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], id: usize, shape: &[usize]) -> &'a mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape))
}
