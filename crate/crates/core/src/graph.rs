//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the parents it was computed from. Nodes are only ever appended, so index
//! order is a topological order and [`Graph::backward`] walks it in reverse,
//! visiting each node once.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flops::{AttnKind, FlopCounter};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type ElementFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Gelu,
    Exp,
    Log,
    Abs,
    Tanh,
}

/// Batch-norm evaluation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalise with statistics of the current batch.
    Train,
    /// Normalise with externally supplied running statistics.
    Eval,
}

/// Batch statistics measured by a train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate, as used for running statistics.
    pub var_unbiased: Vec<T>,
}

/// Grouping used by [`Graph::merge_scatter`]: one output row per anchor.
#[derive(Clone, Debug, Default)]
pub struct MergeGroups {
    pub anchors: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    Map(Var, ElementFn<T>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    DepthwiseConv3 {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MaxRows(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
    },
    MergeScatter {
        f: Var,
        s: Var,
        groups: MergeGroups,
    },
    ForwardDiff {
        x: Var,
        horizontal: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients of trainable parameters keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    /// Entries whose name starts with `prefix`, prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Gradients<T> {
        Gradients {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|r| (r.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn l2_norm(&self) -> T {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }
}

/// A computation graph. Single-threaded; independent graphs share nothing.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    pub flops: FlopCounter,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const ATTN_ROW_BLOCK: usize = 64;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            flops: FlopCounter::default(),
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of every named leaf, with its trainable flag.
    pub fn named_leaves(&self) -> impl Iterator<Item = (&str, bool)> {
        self.nodes
            .iter()
            .filter_map(|n| n.param.as_deref().map(|p| (p, n.requires_grad)))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, None, false)
    }

    /// A trainable named leaf.
    pub fn param(&mut self, name: &str, t: Tensor<T>) -> Var {
        self.leaf(t, Some(name.to_string()), true)
    }

    /// A named leaf that never receives gradients.
    pub fn frozen(&mut self, name: &str, t: Tensor<T>) -> Var {
        self.leaf(t, Some(name.to_string()), false)
    }

    fn leaf(&mut self, t: Tensor<T>, param: Option<String>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: trainable,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    // ------------------------------------------------------------------
    // forward operations
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.matmul(tb)?;
        let (m, k) = ta.as_matrix_dims();
        let n = tb.cols();
        self.flops.dense += 2 * (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    fn row_broadcast(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let c = self.value(x).cols();
        if self.value(row).len() != c {
            return Err(Error::shape(
                op,
                format!("row of {} against {:?}", self.value(row).len(), self.shape(x)),
            ));
        }
        Ok(())
    }

    /// `x + row`, broadcasting a length-`n` vector over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, row)?;
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow(x, row), rg, "add_row")
    }

    /// `x ⊙ row`, broadcasting a length-`n` vector over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, row)?;
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, &g) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= g;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(out, Op::MulRow(x, row), rg, "mul_row")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg, "add_scalar")
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let t = self.value(x);
        if kind == Unary::Log && t.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::NonFinite { op: "log" });
        }
        let out = t.map(|v| unary_fwd(kind, v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(x, kind), rg, "unary")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map_elementwise(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + Send + Sync + 'static,
    ) -> Result<Var> {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, Op::Map(x, Arc::new(df)), rg, "map_elementwise")
    }

    /// Clamp into `[lo, hi]`; the derivative is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.map_elementwise(
            x,
            move |v| v.max(lo).min(hi),
            move |v| if v < lo || v > hi { T::zero() } else { T::one() },
        )
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&mut self, x: Var, delta: T) -> Result<Var> {
        let half: T = lit(0.5);
        self.map_elementwise(
            x,
            move |v| {
                if v.abs() <= delta {
                    half * v * v
                } else {
                    delta * (v.abs() - half * delta)
                }
            },
            move |v| {
                if v.abs() <= delta {
                    v
                } else {
                    delta * v.signum()
                }
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg, "softmax_rows")
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.row_broadcast("layer_norm", x, gamma)?;
        self.row_broadcast("layer_norm", x, beta)?;
        let t = self.value(x);
        let (m, n) = t.as_matrix_dims();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let nt: T = lit(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = t.row(i);
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Batch normalisation over all rows, one channel per column.
    ///
    /// In [`NormMode::Train`] the batch statistics are used and returned so the
    /// caller can update its running averages; in [`NormMode::Eval`] the
    /// supplied `running` statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.row_broadcast("batch_norm", x, gamma)?;
        self.row_broadcast("batch_norm", x, beta)?;
        let t = self.value(x);
        let (m, c) = t.as_matrix_dims();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if m < 2 {
                    return Err(Error::invalid("batch_norm in train mode needs at least 2 rows"));
                }
                let mt: T = lit(m as f64);
                let mut mean = vec![T::zero(); c];
                for i in 0..m {
                    for (acc, &v) in mean.iter_mut().zip(t.row(i)) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= mt);
                let mut var = vec![T::zero(); c];
                for i in 0..m {
                    for ((acc, &v), &mu) in var.iter_mut().zip(t.row(i)).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                let unbiased: Vec<T> = var.iter().map(|&s| s / lit(m as f64 - 1.0)).collect();
                var.iter_mut().for_each(|v| *v /= mt);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval => {
                let (rm, rv) = running
                    .ok_or_else(|| Error::invalid("batch_norm eval mode needs running statistics"))?;
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); m * c];
        let mut out = vec![T::zero(); m * c];
        for i in 0..m {
            let row = t.row(i);
            for j in 0..c {
                let h = (row[j] - mean[j]) * rstd[j];
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train: mode == NormMode::Train,
            },
            rg,
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    /// Depthwise 3×3 convolution, stride 1, zero padding 1.
    ///
    /// `x` has shape `[batch, h, w, c]`, `w` has shape `[c, 9]` (row-major
    /// kernel taps) and `b` has length `c`.
    pub fn depthwise_conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("depthwise_conv3x3", format!("input {:?}", xs)));
        }
        let (nb, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
        if self.shape(w) != [c, 9] || self.value(b).len() != c {
            return Err(Error::shape(
                "depthwise_conv3x3",
                format!("kernel {:?} bias {:?} for {} channels", self.shape(w), self.shape(b), c),
            ));
        }
        let xv = self.value(x).data();
        let kv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); nb * h * wd * c];
        for n in 0..nb {
            for i in 0..h {
                for j in 0..wd {
                    let o = ((n * h + i) * wd + j) * c;
                    out[o..o + c].copy_from_slice(bv);
                    for di in 0..3 {
                        let ii = i as isize + di as isize - 1;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = j as isize + dj as isize - 1;
                            if jj < 0 || jj >= wd as isize {
                                continue;
                            }
                            let src = ((n * h + ii as usize) * wd + jj as usize) * c;
                            let tap = di * 3 + dj;
                            for ch in 0..c {
                                out[o + ch] += kv[ch * 9 + tap] * xv[src + ch];
                            }
                        }
                    }
                }
            }
        }
        self.flops.dense += 2 * (nb * h * wd * c * 9) as u64;
        let out = Tensor::new(xs, out)?;
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::DepthwiseConv3 { x, w, b }, rg, "depthwise_conv3x3")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// Rows `start..start+len` of the matrix view.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, c) = t.as_matrix_dims();
        if start + len > m {
            return Err(Error::shape("slice_rows", format!("{}..{} of {}", start, start + len, m)));
        }
        let out = Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceRows(x, start), rg, "slice_rows")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = xs
            .first()
            .map(|&v| self.value(v).cols())
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut m = 0;
        for &v in xs {
            let t = self.value(v);
            if t.cols() != c {
                return Err(Error::shape("concat_rows", "column count differs"));
            }
            m += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![m, c], data)?;
        let rg = self.rg(xs);
        self.push(out, Op::ConcatRows(xs.to_vec()), rg, "concat_rows")
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let m = t.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::OutOfRange(format!("gather row {} of {}", bad, m)));
        }
        let out = t.select_rows(idx);
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows(x, idx.to_vec()), rg, "gather_rows")
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, c) = t.as_matrix_dims();
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{}..{} of {}", start, start + len, c)));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols(x, start), rg, "slice_cols")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = xs
            .first()
            .map(|&v| self.value(v).rows())
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        if xs.iter().any(|&v| self.value(v).rows() != m) {
            return Err(Error::shape("concat_cols", "row count differs"));
        }
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(xs);
        self.push(out, Op::ConcatCols(xs.to_vec()), rg, "concat_cols")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(x))));
        }
        let out = self.value(x).transpose2();
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg, "transpose")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / lit(t.len() as f64));
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg, "mean")
    }

    /// Row-wise maximum; returns the values (length `m`) and the winning column
    /// of each row, lowest column on ties.
    pub fn max_rows(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let t = self.value(x);
        let (m, c) = t.as_matrix_dims();
        if c == 0 {
            return Err(Error::invalid("max over an empty row"));
        }
        let mut vals = Vec::with_capacity(m);
        let mut idx = Vec::with_capacity(m);
        for i in 0..m {
            let (j, v) = argmax_first(t.row(i));
            vals.push(v);
            idx.push(j);
        }
        let out = Tensor::new(vec![m], vals)?;
        let rg = self.rg(&[x]);
        let v = self.push(out, Op::MaxRows(x, idx.clone()), rg, "max_rows")?;
        Ok((v, idx))
    }

    /// Multi-head scaled dot-product attention `softmax(q kᵀ · scale) v`.
    ///
    /// `q: T×Dq`, `k: S×Dq`, `v: S×Dv`; heads split the column axes evenly.
    /// Attention weights are recomputed in row blocks instead of being stored,
    /// so memory stays `O((T+S)·D)`. When `capture` is given, the full weight
    /// matrix of every head is pushed onto it.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        kind: AttnKind,
        capture: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var> {
        let (tq, dq) = self.value(q).as_matrix_dims();
        let (sk, dk) = self.value(k).as_matrix_dims();
        let (sv, dv) = self.value(v).as_matrix_dims();
        if heads == 0 || dq != dk || sk != sv || dq % heads != 0 || dv % heads != 0 || sk == 0 {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} heads {}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v),
                    heads
                ),
            ));
        }
        let (hq, hv) = (dq / heads, dv / heads);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![T::zero(); tq * dv];
        let mut captured: Vec<Tensor<T>> = Vec::new();
        let want_capture = capture.is_some();
        for h in 0..heads {
            let mut full = if want_capture {
                vec![T::zero(); tq * sk]
            } else {
                Vec::new()
            };
            let mut r0 = 0;
            while r0 < tq {
                let rows = ATTN_ROW_BLOCK.min(tq - r0);
                let a = attn_block_weights(qd, kd, r0, rows, sk, dq, h * hq, hq, scale);
                T::gemm_acc(
                    rows,
                    sk,
                    hv,
                    &a,
                    sk as isize,
                    1,
                    &vd[h * hv..],
                    dv as isize,
                    1,
                    &mut out[r0 * dv + h * hv..],
                    dv as isize,
                    1,
                );
                if want_capture {
                    full[r0 * sk..(r0 + rows) * sk].copy_from_slice(&a);
                }
                r0 += rows;
            }
            if want_capture {
                captured.push(Tensor::new(vec![tq, sk], full)?);
            }
        }
        self.flops
            .add_attention(kind, FlopCounter::attention_cost(tq, sk, dq, dv));
        if let Some(c) = capture {
            c.extend(captured);
        }
        let out = Tensor::new(vec![tq, dv], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
            },
            rg,
            "attention",
        )
    }

    /// Score-weighted scatter-add: output row `i` is
    /// `(f[a_i] + Σ_m s[m]·f[m]) / (1 + Σ_m s[m])` over the members of group `i`.
    /// A group without members reproduces its anchor row exactly.
    pub fn merge_scatter(&mut self, f: Var, s: Var, groups: MergeGroups) -> Result<Var> {
        let ft = self.value(f);
        let st = self.value(s);
        let (n, d) = ft.as_matrix_dims();
        if st.len() != n || groups.anchors.len() != groups.members.len() {
            return Err(Error::shape(
                "merge_scatter",
                format!("features {:?} scores {:?}", ft.shape(), st.shape()),
            ));
        }
        let mut out = vec![T::zero(); groups.anchors.len() * d];
        for (g, (&a, members)) in groups.anchors.iter().zip(&groups.members).enumerate() {
            if a >= n || members.iter().any(|&m| m >= n) {
                return Err(Error::OutOfRange("merge_scatter row index".into()));
            }
            let row = &mut out[g * d..(g + 1) * d];
            row.copy_from_slice(ft.row(a));
            if members.is_empty() {
                continue;
            }
            let mut wsum = T::one();
            for &m in members {
                let w = st.data()[m];
                wsum += w;
                for (o, &x) in row.iter_mut().zip(ft.row(m)) {
                    *o += w * x;
                }
            }
            row.iter_mut().for_each(|o| *o /= wsum);
        }
        let out = Tensor::new(vec![groups.anchors.len(), d], out)?;
        let rg = self.rg(&[f, s]);
        self.push(out, Op::MergeScatter { f, s, groups }, rg, "merge_scatter")
    }

    /// Forward difference along width (`horizontal`) or height of a
    /// `[batch, h, w, c]` field; the last column/row is zero.
    pub fn forward_diff(&mut self, x: Var, horizontal: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("forward_diff", format!("{:?}", xs)));
        }
        let (nb, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for n in 0..nb {
            for i in 0..h {
                for j in 0..w {
                    let (ni, nj) = if horizontal { (i, j + 1) } else { (i + 1, j) };
                    if ni >= h || nj >= w {
                        continue;
                    }
                    let o = ((n * h + i) * w + j) * c;
                    let p = ((n * h + ni) * w + nj) * c;
                    for ch in 0..c {
                        out[o + ch] = xv[p + ch] - xv[o + ch];
                    }
                }
            }
        }
        let out = Tensor::new(xs, out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::ForwardDiff { x, horizontal }, rg, "forward_diff")
    }

    // ------------------------------------------------------------------
    // reverse pass
    // ------------------------------------------------------------------

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// trainable leaf. Trainable leaves the loss does not depend on receive an
    /// all-zero gradient; frozen and constant leaves receive none.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
        }
        let mut map = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, true, Some(name)) = (&node.op, node.requires_grad, &node.param) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match map.get_mut(name) {
                    None => {
                        map.insert(name.clone(), g);
                    }
                    Some(existing) => Tensor::add_assign(existing, &g),
                }
            }
        }
        Ok(Gradients { map })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape();
                *slot = Some(if g.shape() == shape {
                    g
                } else {
                    g.reshape(shape).expect("gradient length matches value")
                });
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.as_matrix_dims();
                let n = tb.cols();
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm_acc(m, n, k, g.data(), n as isize, 1, tb.data(), 1, n as isize, &mut da, k as isize, 1);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![T::zero(); k * n];
                    T::gemm_acc(k, m, n, ta.data(), 1, k as isize, g.data(), n as isize, 1, &mut db, n as isize, 1);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*row) {
                    let c = g.cols();
                    let mut db = vec![T::zero(); c];
                    for i in 0..g.rows() {
                        for (acc, &v) in db.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    let shape = self.shape(*row).to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, db)?);
                }
            }
            Op::MulRow(x, row) => {
                let r = self.value(*row).data();
                if self.requires_grad(*x) {
                    let mut dx = g.clone();
                    for i in 0..dx.rows() {
                        for (o, &s) in dx.row_mut(i).iter_mut().zip(r) {
                            *o *= s;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*row) {
                    let xt = self.value(*x);
                    let mut dr = vec![T::zero(); r.len()];
                    for i in 0..g.rows() {
                        for ((acc, &gv), &xv) in dr.iter_mut().zip(g.row(i)).zip(xt.row(i)) {
                            *acc += gv * xv;
                        }
                    }
                    let shape = self.shape(*row).to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, dr)?);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Unary(x, kind) => {
                let xt = self.value(*x);
                let mut dx = g.clone();
                for ((o, &xv), &yv) in dx.data_mut().iter_mut().zip(xt.data()).zip(y.data()) {
                    *o *= unary_grad(*kind, xv, yv);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Map(x, df) => {
                let xt = self.value(*x);
                self.accumulate(grads, *x, g.zip_map(xt, |gv, xv| gv * df(xv)));
            }
            Op::SoftmaxRows(x) => {
                let mut dx = g.clone();
                for i in 0..dx.rows() {
                    let yr = y.row(i);
                    let dot: T = dx.row(i).iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (o, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
                        *o = yv * (*o - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = g.as_matrix_dims();
                let gm = self.value(*gamma).data();
                let nt: T = lit(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dg = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for i in 0..m {
                    let gr = g.row(i);
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        let dh = gr[j] * gm[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                        dg[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    s1 /= nt;
                    s2 /= nt;
                    for j in 0..n {
                        let dh = gr[j] * gm[j];
                        dx[i * n + j] = rstd[i] * (dh - s1 - hr[j] * s2);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                let gs = self.shape(*gamma).to_vec();
                let bs = self.shape(*beta).to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gs, dg)?);
                self.accumulate(grads, *beta, Tensor::new(bs, dbeta)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            } => {
                let (m, c) = g.as_matrix_dims();
                let gm = self.value(*gamma).data();
                let mt: T = lit(m as f64);
                let mut dg = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut s1 = vec![T::zero(); c];
                let mut s2 = vec![T::zero(); c];
                for i in 0..m {
                    for j in 0..c {
                        let gv = g.data()[i * c + j];
                        let h = xhat[i * c + j];
                        dg[j] += gv * h;
                        dbeta[j] += gv;
                        let dh = gv * gm[j];
                        s1[j] += dh;
                        s2[j] += dh * h;
                    }
                }
                let mut dx = vec![T::zero(); m * c];
                for i in 0..m {
                    for j in 0..c {
                        let dh = g.data()[i * c + j] * gm[j];
                        dx[i * c + j] = if *train {
                            rstd[j] * (dh - s1[j] / mt - xhat[i * c + j] * s2[j] / mt)
                        } else {
                            rstd[j] * dh
                        };
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                let gs = self.shape(*gamma).to_vec();
                let bs = self.shape(*beta).to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gs, dg)?);
                self.accumulate(grads, *beta, Tensor::new(bs, dbeta)?);
            }
            Op::DepthwiseConv3 { x, w, b } => {
                let xs = self.shape(*x);
                let (nb, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
                let xv = self.value(*x).data();
                let kv = self.value(*w).data();
                let gv = g.data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); c * 9];
                let mut db = vec![T::zero(); c];
                for n in 0..nb {
                    for i in 0..h {
                        for j in 0..wd {
                            let o = ((n * h + i) * wd + j) * c;
                            for ch in 0..c {
                                db[ch] += gv[o + ch];
                            }
                            for di in 0..3 {
                                let ii = i as isize + di as isize - 1;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for dj in 0..3 {
                                    let jj = j as isize + dj as isize - 1;
                                    if jj < 0 || jj >= wd as isize {
                                        continue;
                                    }
                                    let src = ((n * h + ii as usize) * wd + jj as usize) * c;
                                    let tap = di * 3 + dj;
                                    for ch in 0..c {
                                        dw[ch * 9 + tap] += gv[o + ch] * xv[src + ch];
                                        dx[src + ch] += gv[o + ch] * kv[ch * 9 + tap];
                                    }
                                }
                            }
                        }
                    }
                }
                let (xs, ws, bs) = (xs.to_vec(), self.shape(*w).to_vec(), self.shape(*b).to_vec());
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
                self.accumulate(grads, *w, Tensor::new(ws, dw)?);
                self.accumulate(grads, *b, Tensor::new(bs, db)?);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.clone()),
            Op::SliceRows(x, start) => {
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let c = g.cols();
                    dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    if self.requires_grad(v) {
                        let part = Tensor::new(self.shape(v).to_vec(), g.data()[off..off + n].to_vec())?;
                        self.accumulate(grads, v, part);
                    }
                    off += n;
                }
            }
            Op::GatherRows(x, idx) => {
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let c = g.cols();
                    for (r, &i) in idx.iter().enumerate() {
                        let src = g.row(r);
                        for (o, &v) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SliceCols(x, start) => {
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let len = g.cols();
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &v in xs {
                    let c = self.value(v).cols();
                    if self.requires_grad(v) {
                        let mut part = Vec::with_capacity(g.rows() * c);
                        for i in 0..g.rows() {
                            part.extend_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.accumulate(grads, v, Tensor::new(self.shape(v).to_vec(), part)?);
                    }
                    off += c;
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose2()),
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gv = g.item() / lit(n as f64);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::MaxRows(x, idx) => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let c = dx.cols();
                for (i, &j) in idx.iter().enumerate() {
                    dx.data_mut()[i * c + j] += g.data()[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
            } => self.attention_backward(*q, *k, *v, *heads, *scale, g, grads)?,
            Op::MergeScatter { f, s, groups } => {
                let ft = self.value(*f);
                let st = self.value(*s);
                let d = ft.cols();
                let mut df = Tensor::zeros(ft.shape());
                let mut ds = Tensor::zeros(st.shape());
                for (gi, (&a, members)) in groups.anchors.iter().zip(&groups.members).enumerate() {
                    let gr = g.row(gi);
                    let yr = y.row(gi);
                    let wsum = T::one() + members.iter().map(|&m| st.data()[m]).sum::<T>();
                    for (o, &gv) in df.row_mut(a).iter_mut().zip(gr) {
                        *o += gv / wsum;
                    }
                    for &m in members {
                        let w = st.data()[m];
                        let fm = ft.row(m);
                        let mut dot = T::zero();
                        for c in 0..d {
                            dot += gr[c] * (fm[c] - yr[c]);
                        }
                        ds.data_mut()[m] += dot / wsum;
                        for (o, &gv) in df.row_mut(m).iter_mut().zip(gr) {
                            *o += gv * w / wsum;
                        }
                    }
                }
                self.accumulate(grads, *f, df);
                self.accumulate(grads, *s, ds);
            }
            Op::ForwardDiff { x, horizontal } => {
                let xs = self.shape(*x);
                let (nb, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let gv = g.data();
                let mut dx = vec![T::zero(); gv.len()];
                for n in 0..nb {
                    for i in 0..h {
                        for j in 0..w {
                            let (ni, nj) = if *horizontal { (i, j + 1) } else { (i + 1, j) };
                            if ni >= h || nj >= w {
                                continue;
                            }
                            let o = ((n * h + i) * w + j) * c;
                            let p = ((n * h + ni) * w + nj) * c;
                            for ch in 0..c {
                                dx[p + ch] += gv[o + ch];
                                dx[o + ch] -= gv[o + ch];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs.to_vec(), dx)?);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (tq, dq) = self.value(q).as_matrix_dims();
        let (sk, _) = self.value(k).as_matrix_dims();
        let dv = self.value(v).cols();
        let (hq, hv) = (dq / heads, dv / heads);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let gd = g.data();
        let mut dqv = vec![T::zero(); tq * dq];
        let mut dkv = vec![T::zero(); sk * dq];
        let mut dvv = vec![T::zero(); sk * dv];
        for h in 0..heads {
            let mut r0 = 0;
            while r0 < tq {
                let rows = ATTN_ROW_BLOCK.min(tq - r0);
                let a = attn_block_weights(qd, kd, r0, rows, sk, dq, h * hq, hq, scale);
                // dV_h += Aᵀ · dO_h
                T::gemm_acc(
                    sk,
                    rows,
                    hv,
                    &a,
                    1,
                    sk as isize,
                    &gd[r0 * dv + h * hv..],
                    dv as isize,
                    1,
                    &mut dvv[h * hv..],
                    dv as isize,
                    1,
                );
                // dA = dO_h · V_hᵀ
                let mut da = vec![T::zero(); rows * sk];
                T::gemm_acc(
                    rows,
                    hv,
                    sk,
                    &gd[r0 * dv + h * hv..],
                    dv as isize,
                    1,
                    &vd[h * hv..],
                    1,
                    dv as isize,
                    &mut da,
                    sk as isize,
                    1,
                );
                // dS = A ⊙ (dA − rowsum(dA ⊙ A)), folded with the scale
                for r in 0..rows {
                    let ar = &a[r * sk..(r + 1) * sk];
                    let dr = &mut da[r * sk..(r + 1) * sk];
                    let dot: T = ar.iter().zip(dr.iter()).map(|(&x, &y)| x * y).sum();
                    for (d, &av) in dr.iter_mut().zip(ar) {
                        *d = av * (*d - dot) * scale;
                    }
                }
                // dQ_h = dS · K_h
                T::gemm_acc(
                    rows,
                    sk,
                    hq,
                    &da,
                    sk as isize,
                    1,
                    &kd[h * hq..],
                    dq as isize,
                    1,
                    &mut dqv[r0 * dq + h * hq..],
                    dq as isize,
                    1,
                );
                // dK_h += dSᵀ · Q_h
                T::gemm_acc(
                    sk,
                    rows,
                    hq,
                    &da,
                    1,
                    sk as isize,
                    &qd[r0 * dq + h * hq..],
                    dq as isize,
                    1,
                    &mut dkv[h * hq..],
                    dq as isize,
                    1,
                );
                r0 += rows;
            }
        }
        self.accumulate(grads, q, Tensor::new(vec![tq, dq], dqv)?);
        self.accumulate(grads, k, Tensor::new(vec![sk, dq], dkv)?);
        self.accumulate(grads, v, Tensor::new(vec![sk, dv], dvv)?);
        Ok(())
    }
}

/// Softmax-normalised weights for query rows `r0..r0+rows` of one head.
#[allow(clippy::too_many_arguments)]
fn attn_block_weights<T: Scalar>(
    qd: &[T],
    kd: &[T],
    r0: usize,
    rows: usize,
    sk: usize,
    dq: usize,
    col0: usize,
    hq: usize,
    scale: T,
) -> Vec<T> {
    let mut a = vec![T::zero(); rows * sk];
    T::gemm_acc(
        rows,
        hq,
        sk,
        &qd[r0 * dq + col0..],
        dq as isize,
        1,
        &kd[col0..],
        1,
        dq as isize,
        &mut a,
        sk as isize,
        1,
    );
    for r in 0..rows {
        let row = &mut a[r * sk..(r + 1) * sk];
        row.iter_mut().for_each(|x| *x *= scale);
        softmax_in_place(row);
    }
    a
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Index and value of the maximum, lowest index on ties.
pub(crate) fn argmax_first<T: Scalar>(xs: &[T]) -> (usize, T) {
    let mut best = (0, xs[0]);
    for (j, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn unary_fwd<T: Scalar>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Sigmoid => {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        }
        Unary::Gelu => {
            let u = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
            lit::<T>(0.5) * x * (T::one() + u.tanh())
        }
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Abs => x.abs(),
        Unary::Tanh => x.tanh(),
    }
}

fn unary_grad<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Gelu => {
            let c: T = lit(GELU_C);
            let a: T = lit(GELU_A);
            let t = (c * (x + a * x * x * x)).tanh();
            let half: T = lit(0.5);
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
        }
        Unary::Exp => y,
        Unary::Log => T::one() / x,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Tanh => T::one() - y * y,
    }
}
