//! Reverse-mode automatic differentiation over an explicit operation tape.
//!
//! Every forward op appends one node holding its output value. `backward`
//! walks the nodes once in reverse order and accumulates vector-Jacobian
//! products into the inputs that require gradients.

use std::collections::HashMap;

use super::tensor::gemm_acc;
use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norm guard used by [`Tape::l2_normalize_rows`].
pub const L2_NORM_EPS: f64 = 1e-12;
/// Variance guard used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Attention mask description for [`Tape::attention`].
#[derive(Debug, Clone)]
pub struct AttentionMask {
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
    /// One flag per row of the packed `[batch*seq, width]` input; `false` rows are
    /// never attended to.
    pub key_valid: Option<Vec<bool>>,
}

impl AttentionMask {
    pub fn bidirectional() -> Self {
        Self {
            causal: false,
            key_valid: None,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2NormRows { x: Var, norms: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Mean { x: Var, axis: usize },
    MeanAll(Var),
    SumAll(Var),
    MeanPool { x: Var, groups: usize },
    PickCols { x: Var, cols: Vec<usize> },
    CrossEntropySum {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records a forward computation for a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Iteration geometry for reductions along one axis.
#[derive(Clone, Copy)]
struct Lanes {
    count: usize,
    len: usize,
    stride: usize,
    outer_stride: usize,
}

impl Lanes {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        match shape.len() {
            0 | 1 if axis == 0 => {
                let n = shape.first().copied().unwrap_or(1);
                Ok(Lanes {
                    count: 1,
                    len: n,
                    stride: 1,
                    outer_stride: n,
                })
            }
            2 if axis == 0 => Ok(Lanes {
                count: shape[1],
                len: shape[0],
                stride: shape[1],
                outer_stride: 1,
            }),
            nd if nd >= 2 && axis == nd - 1 => {
                let len = shape[nd - 1];
                Ok(Lanes {
                    count: shape.iter().product::<usize>() / len.max(1),
                    len,
                    stride: 1,
                    outer_stride: len,
                })
            }
            _ => Err(Error::Contract(format!(
                "axis {axis} unsupported for shape {shape:?}"
            ))),
        }
    }

    #[inline]
    fn at(&self, lane: usize, i: usize) -> usize {
        lane * self.outer_stride + i * self.stride
    }
}

fn softmax_lanes(x: &[f64], lanes: Lanes, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for l in 0..lanes.count {
        let max = (0..lanes.len)
            .map(|i| x[lanes.at(l, i)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..lanes.len {
            let idx = lanes.at(l, i);
            let e = (x[idx] - max).exp();
            out[idx] = e;
            sum += e;
        }
        if log {
            let lse = sum.ln();
            for i in 0..lanes.len {
                let idx = lanes.at(l, i);
                out[idx] = x[idx] - max - lse;
            }
        } else {
            for i in 0..lanes.len {
                out[lanes.at(l, i)] /= sum;
            }
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input not owned by a parameter store.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a named parameter. Repeated loads of the same name share one node;
    /// frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Leaf, !store.is_frozen(name));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `op(a) · op(b)` for 2-D operands, where `a_t`/`b_t` read the operand transposed.
    pub fn matmul_ex(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = if a_t { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.data(a), a_t, self.data(b), b_t, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let out = self.value(a).transpose2();
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, out).expect("same shape"), op, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, out).expect("same shape"), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = self.value(a).rows_cols();
        if self.value(b).numel() != c {
            return Err(Error::dim("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.data(b).to_vec();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias[i % c])
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_by", self.shape(s), &[1]));
        }
        let k = self.data(s)[0];
        let out: Vec<f64> = self.data(a).iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleBy(a, s), ng))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let lanes = Lanes::new(self.shape(x), axis)?;
        let out = softmax_lanes(self.data(x), lanes, false);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let lanes = Lanes::new(self.shape(x), axis)?;
        let out = softmax_lanes(self.data(x), lanes, true);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, axis }, ng))
    }

    /// Row-wise layer normalisation with optional affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols();
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).numel() != c {
                return Err(Error::dim("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xs = self.data(x);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let g = self.data(g);
            out.iter_mut().enumerate().for_each(|(i, v)| *v *= g[i % c]);
        }
        if let Some(b) = beta {
            let b = self.data(b);
            out.iter_mut().enumerate().for_each(|(i, v)| *v += b[i % c]);
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || gamma.is_some_and(|g| self.ng(g)) || beta.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Divides each row by `max(‖row‖, L2_NORM_EPS)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).rows_cols();
        let xs = self.data(x);
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            let d = n.max(L2_NORM_EPS);
            for j in 0..c {
                out[i * c + j] = row[j] / d;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::L2NormRows { x, norms },
            ng,
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = self.value(table).rows_cols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "embedding id {bad} out of range for table with {rows} rows"
            )));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            out.extend_from_slice(&t[id * c..(id + 1) * c]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Rows of `x` in the order given by `idx` (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, c) = self.value(x).rows_cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("row {bad} out of range ({rows} rows)")));
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).rows_cols().1)
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).rows_cols();
            if pc != c {
                return Err(Error::dim("concat_rows", &[c], &[pc]));
            }
            out.extend_from_slice(self.data(p));
            rows += r;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Mean along `axis`; the axis is removed from the output shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let lanes = Lanes::new(&shape, axis)?;
        let xs = self.data(x);
        let out: Vec<f64> = (0..lanes.count)
            .map(|l| (0..lanes.len).map(|i| xs[lanes.at(l, i)]).sum::<f64>() / lanes.len as f64)
            .collect();
        let mut out_shape = shape.clone();
        if !out_shape.is_empty() {
            out_shape.remove(axis);
        }
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Mean { x, axis }, ng))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xs = self.data(x);
        let m = xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum::<f64>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Averages consecutive blocks of rows: `[groups*len, c] -> [groups, c]`.
    pub fn mean_pool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols();
        if groups == 0 || r % groups != 0 {
            return Err(Error::dim("mean_pool", &[r, c], &[groups]));
        }
        let len = r / groups;
        let xs = self.data(x);
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            let o = &mut out[g * c..(g + 1) * c];
            for i in 0..len {
                let row = &xs[(g * len + i) * c..(g * len + i + 1) * c];
                o.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            o.iter_mut().for_each(|v| *v /= len as f64);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![groups, c], out)?,
            Op::MeanPool { x, groups },
            ng,
        ))
    }

    /// `out[i] = x[i, cols[i]]`
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols();
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::dim("pick_cols", &[r, c], &[cols.len()]));
        }
        let xs = self.data(x);
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| xs[i * c + j]).collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![r], out)?,
            Op::PickCols {
                x,
                cols: cols.to_vec(),
            },
            ng,
        ))
    }

    /// `Σ_i −log softmax(logits_i)[target_i]` over rows with a target.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.value(logits).rows_cols();
        if targets.len() != r || targets.iter().flatten().any(|&t| t >= c) {
            return Err(Error::dim("cross_entropy_sum", &[r, c], &[targets.len()]));
        }
        let lanes = Lanes::new(&[r, c], 1)?;
        let logp = softmax_lanes(self.data(logits), lanes, true);
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                loss -= logp[i * c + t];
            }
        }
        let probs = logp.into_iter().map(f64::exp).collect();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention on packed `[batch*seq, heads*dh]` inputs.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        mask: &AttentionMask,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, width) = self.value(q).rows_cols();
        if batch == 0 || rows % batch != 0 || heads == 0 || width % heads != 0 {
            return Err(Error::dim("attention", &[rows, width], &[batch, heads]));
        }
        if let Some(kv) = &mask.key_valid {
            if kv.len() != rows {
                return Err(Error::dim("attention mask", &[rows], &[kv.len()]));
            }
        }
        let seq = rows / batch;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qs[(b * seq + i) * width + h * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        let allowed = (!mask.causal || j <= i)
                            && mask.key_valid.as_ref().is_none_or(|kv| kv[b * seq + j]);
                        scores[j] = if allowed {
                            let kj = &ks[(b * seq + j) * width + h * dh..][..dh];
                            let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                            max = max.max(s);
                            s
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = if *s == f64::NEG_INFINITY { 0.0 } else { (*s - max).exp() };
                        sum += *s;
                    }
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let orow = &mut out[(b * seq + i) * width + h * dh..][..dh];
                    for j in 0..seq {
                        let p = scores[j] / sum;
                        prow[j] = p;
                        if p != 0.0 {
                            let vj = &vs[(b * seq + j) * width + h * dh..][..dh];
                            orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from the single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds the gradients of every loaded, unfrozen
    /// parameter into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (name, &v) in &self.params {
            if let Some(g) = grads.of(v) {
                if self.nodes[v.0].needs_grad {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        macro_rules! acc {
            ($var:expr, $val:expr) => {{
                let v: Var = $var;
                if self.ng(v) {
                    let val: Vec<f64> = $val;
                    add_into(&mut grads[v.0], &val);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k,
                n,
            } => {
                if self.ng(a) {
                    let mut da = vec![0.0; m * k];
                    let bd = self.data(b);
                    if a_t {
                        gemm_acc(k, n, m, bd, b_t, g, true, &mut da);
                    } else {
                        gemm_acc(m, n, k, g, false, bd, !b_t, &mut da);
                    }
                    add_into(&mut grads[a.0], &da);
                }
                if self.ng(b) {
                    let mut db = vec![0.0; k * n];
                    let ad = self.data(a);
                    if b_t {
                        gemm_acc(n, m, k, g, true, ad, a_t, &mut db);
                    } else {
                        gemm_acc(k, m, n, ad, !a_t, g, false, &mut db);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::Transpose(a) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?.transpose2();
                acc!(a, gt.into_data());
            }
            &Op::Add(a, b) => {
                acc!(a, g.to_vec());
                acc!(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc!(a, g.to_vec());
                acc!(b, g.iter().map(|x| -x).collect());
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc!(a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                acc!(b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
            }
            &Op::AddRow(a, b) => {
                acc!(a, g.to_vec());
                if self.ng(b) {
                    let c = self.value(b).numel();
                    let mut db = vec![0.0; c];
                    g.iter().enumerate().for_each(|(i, x)| db[i % c] += x);
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::Scale(a, s) => acc!(a, g.iter().map(|x| x * s).collect()),
            &Op::ScaleBy(a, s) => {
                let k = self.data(s)[0];
                acc!(a, g.iter().map(|x| x * k).collect());
                acc!(
                    s,
                    vec![g.iter().zip(self.data(a)).map(|(x, y)| x * y).sum::<f64>()]
                );
            }
            &Op::Exp(a) => acc!(a, g.iter().zip(out).map(|(x, y)| x * y).collect()),
            &Op::Log(a) => acc!(a, g.iter().zip(self.data(a)).map(|(x, y)| x / y).collect()),
            &Op::Gelu(a) => acc!(
                a,
                g.iter()
                    .zip(self.data(a))
                    .map(|(x, &y)| x * gelu_grad(y))
                    .collect()
            ),
            &Op::Softmax { x, axis } => {
                let lanes = Lanes::new(node.value.shape(), axis)?;
                let mut dx = vec![0.0; g.len()];
                for l in 0..lanes.count {
                    let dot: f64 = (0..lanes.len)
                        .map(|i| {
                            let j = lanes.at(l, i);
                            g[j] * out[j]
                        })
                        .sum();
                    for i in 0..lanes.len {
                        let j = lanes.at(l, i);
                        dx[j] = out[j] * (g[j] - dot);
                    }
                }
                acc!(x, dx);
            }
            &Op::LogSoftmax { x, axis } => {
                let lanes = Lanes::new(node.value.shape(), axis)?;
                let mut dx = vec![0.0; g.len()];
                for l in 0..lanes.count {
                    let gsum: f64 = (0..lanes.len).map(|i| g[lanes.at(l, i)]).sum();
                    for i in 0..lanes.len {
                        let j = lanes.at(l, i);
                        dx[j] = g[j] - out[j].exp() * gsum;
                    }
                }
                acc!(x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = node.value.rows_cols();
                if let Some(b) = *beta {
                    if self.ng(b) {
                        let mut db = vec![0.0; c];
                        g.iter().enumerate().for_each(|(i, v)| db[i % c] += v);
                        add_into(&mut grads[b.0], &db);
                    }
                }
                if let Some(gm) = *gamma {
                    if self.ng(gm) {
                        let mut dg = vec![0.0; c];
                        g.iter()
                            .zip(xhat)
                            .enumerate()
                            .for_each(|(i, (v, h))| dg[i % c] += v * h);
                        add_into(&mut grads[gm.0], &dg);
                    }
                }
                if self.ng(*x) {
                    let gam = gamma.map(|gm| self.data(gm));
                    let mut dx = vec![0.0; r * c];
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gam.map_or(1.0, |gv| gv[j]);
                        }
                        let xh = &xhat[i * c..(i + 1) * c];
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::L2NormRows { x, norms } => {
                let (r, c) = node.value.rows_cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    if norms[i] > L2_NORM_EPS {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] = (gy[j] - y[j] * dot) / norms[i];
                        }
                    } else {
                        for j in 0..c {
                            dx[i * c + j] = gy[j] / L2_NORM_EPS;
                        }
                    }
                }
                acc!(*x, dx);
            }
            Op::Embedding { table, ids } => {
                if self.ng(*table) {
                    let (_, c) = node.value.rows_cols();
                    let mut dt = vec![0.0; self.value(*table).numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        dt[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                    add_into(&mut grads[table.0], &dt);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.ng(*x) {
                    let (_, c) = node.value.rows_cols();
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (i, &src) in idx.iter().enumerate() {
                        dx[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc!(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            &Op::Reshape(x) => acc!(x, g.to_vec()),
            &Op::Mean { x, axis } => {
                let lanes = Lanes::new(self.shape(x), axis)?;
                let mut dx = vec![0.0; self.value(x).numel()];
                for l in 0..lanes.count {
                    for i in 0..lanes.len {
                        dx[lanes.at(l, i)] = g[l] / lanes.len as f64;
                    }
                }
                acc!(x, dx);
            }
            &Op::MeanAll(x) => {
                let n = self.value(x).numel();
                acc!(x, vec![g[0] / n as f64; n]);
            }
            &Op::SumAll(x) => {
                let n = self.value(x).numel();
                acc!(x, vec![g[0]; n]);
            }
            &Op::MeanPool { x, groups } => {
                let (r, c) = self.value(x).rows_cols();
                let len = r / groups;
                let mut dx = vec![0.0; r * c];
                for gi in 0..groups {
                    for i in 0..len {
                        let row = gi * len + i;
                        for j in 0..c {
                            dx[row * c + j] = g[gi * c + j] / len as f64;
                        }
                    }
                }
                acc!(x, dx);
            }
            Op::PickCols { x, cols } => {
                let (_, c) = self.value(*x).rows_cols();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (i, &j) in cols.iter().enumerate() {
                    dx[i * c + j] += g[i];
                }
                acc!(*x, dx);
            }
            Op::CrossEntropySum {
                logits,
                targets,
                probs,
            } => {
                let (_, c) = self.value(*logits).rows_cols();
                let mut dx = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..c {
                            dx[i * c + j] = g[0] * probs[i * c + j];
                        }
                        dx[i * c + t] -= g[0];
                    }
                }
                acc!(*logits, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let (rows, width) = node.value.rows_cols();
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qs, ks, vs) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq = vec![0.0; rows * width];
                let mut dk = vec![0.0; rows * width];
                let mut dv = vec![0.0; rows * width];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let prow = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                            let go = &g[(b * seq + i) * width + h * dh..][..dh];
                            let mut dot = 0.0;
                            for j in 0..seq {
                                if prow[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vs[(b * seq + j) * width + h * dh..][..dh];
                                dp[j] = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                                dot += prow[j] * dp[j];
                                let dvj = &mut dv[(b * seq + j) * width + h * dh..][..dh];
                                dvj.iter_mut().zip(go).for_each(|(a, c)| *a += prow[j] * c);
                            }
                            let qoff = (b * seq + i) * width + h * dh;
                            for j in 0..seq {
                                if prow[j] == 0.0 {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                let koff = (b * seq + j) * width + h * dh;
                                for t in 0..dh {
                                    dq[qoff + t] += ds * ks[koff + t];
                                    dk[koff + t] += ds * qs[qoff + t];
                                }
                            }
                        }
                    }
                }
                acc!(*q, dq);
                acc!(*k, dk);
                acc!(*v, dv);
            }
        }
        Ok(())
    }
}
