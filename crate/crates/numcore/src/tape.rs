//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends a node holding its value and enough state to run its
//! backward rule. A tape is built fresh for each forward pass and dropped after
//! the gradients are read.

use std::collections::HashMap;

use crate::error::{shape_err, NumError, Result};
use crate::gemm::gemm;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub size: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_size: usize,
}

impl Conv3dGeom {
    /// Validates `out = (size + 2·pad − kernel) / stride + 1` is a positive integer.
    pub fn new(in_ch: usize, out_ch: usize, size: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(NumError::Config("conv3d stride and kernel must be positive".into()));
        }
        let span = size + 2 * pad;
        if span < kernel || !(span - kernel).is_multiple_of(stride) {
            return Err(NumError::Invalid(format!(
                "conv3d output size ({size} + 2*{pad} - {kernel})/{stride} + 1 is not a positive integer"
            )));
        }
        Ok(Self {
            in_ch,
            out_ch,
            size,
            kernel,
            stride,
            pad,
            out_size: (span - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel.pow(3)
    }

    fn positions(&self) -> usize {
        self.out_size.pow(3)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    LogSoftmaxRows {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    WeightedRowSum {
        x: Var,
        weights: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    RepeatRows {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    RowSum {
        x: Var,
    },
    Sum {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    Norm {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Conv3d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: Conv3dGeom,
        cols: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddRow { x, bias } => vec![*x, *bias],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { parts, .. } => parts.clone(),
            Embedding { table, .. } => vec![*table],
            Conv3d { x, k, bias, .. } => {
                let mut v = vec![*x, *k];
                v.extend(bias.iter().copied());
                v
            }
            Scale { x, .. }
            | LeakyRelu { x, .. }
            | Sigmoid { x }
            | SoftmaxRows { x }
            | LogSoftmaxRows { x }
            | WeightedRowSum { x, .. }
            | SliceCols { x, .. }
            | SliceRows { x, .. }
            | RepeatRows { x }
            | L2NormalizeRows { x, .. }
            | RowSum { x }
            | Sum { x }
            | SumSquares { x }
            | Norm { x }
            | Transpose { x }
            | Reshape { x }
            | Gather { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn rows_cols(t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter; repeated binds in one tape return the same node.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), store.is_trainable(id));
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        rows_cols(&self.nodes[v.0].value)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes applied without copying.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            false,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose { x }))
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        Tensor::new(vx.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix. The only
    /// broadcasting the tape supports.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.value(bias).len() != n {
            return shape_err("add_row", self.shape(x), self.shape(bias));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let _ = m;
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { x, bias }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.map(x, |a| a * c);
        self.push(v, Op::Scale { x, c })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.map(x, |a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid { x })
    }

    // ---- row-wise normalizations ---------------------------------------

    /// Row softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::SoftmaxRows { x }))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmaxRows { x }))
    }

    /// Per-row layer normalization followed by a learned affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return shape_err("layer_norm", self.shape(x), self.shape(gamma));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x)?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / n);
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }))
    }

    /// Row-wise cosine similarity of two `m x d` matrices, returned as `m x 1`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let na = self.l2_normalize_rows(a)?;
        let nb = self.l2_normalize_rows(b)?;
        let prod = self.mul(na, nb)?;
        self.row_sum(prod)
    }

    // ---- pooling and reductions ----------------------------------------

    /// `out[j] = Σ_i w_i · x[i, j]`, a `1 x n` row.
    pub fn weighted_row_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if weights.len() != m {
            return shape_err("weighted_row_sum", self.shape(x), &[weights.len()]);
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n];
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                out.iter_mut()
                    .zip(&src[i * n..(i + 1) * n])
                    .for_each(|(o, v)| *o += w * v);
            }
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.push(
            value,
            Op::WeightedRowSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Mean over the rows whose mask entry is `true`.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NumError::Invalid("mean_pool over an empty mask".into()));
        }
        let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / count as f64 } else { 0.0 }).collect();
        self.weighted_row_sum(x, &w)
    }

    /// Sums each row, giving `m x 1`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let data = self.value(x).data().chunks(n).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(vec![m, 1], data)?;
        Ok(self.push(value, Op::RowSum { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x })
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(s), Op::Norm { x })
    }

    /// Picks flat indices of `x` into a rank-1 tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(NumError::Invalid(format!(
                "gather index {bad} out of range for {} values",
                src.len()
            )));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(value, Op::Gather { x, idx: idx.to_vec() }))
    }

    // ---- structural ----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumError::Invalid("concat of zero tensors".into()))?;
        let (r0, c0) = self.dims(first)?;
        let value = match axis {
            0 => {
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let (r, c) = self.dims(p)?;
                    if c != c0 {
                        return shape_err("concat", self.shape(first), self.shape(p));
                    }
                    rows += r;
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(vec![rows, c0], data)?
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.dims(p)?;
                    if r != r0 {
                        return shape_err("concat", self.shape(first), self.shape(p));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::new(vec![r0, cols], data)?
            }
            _ => return Err(NumError::Invalid(format!("concat axis {axis} unsupported"))),
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if start >= end || end > n {
            return Err(NumError::Invalid(format!("column slice {start}..{end} of {n}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let value = Tensor::new(vec![m, w], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if start >= end || end > m {
            return Err(NumError::Invalid(format!("row slice {start}..{end} of {m}")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let value = Tensor::new(vec![end - start, n], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    /// Tiles a single row `count` times.
    pub fn repeat_rows(&mut self, x: Var, count: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if m != 1 || count == 0 {
            return Err(NumError::Invalid(format!(
                "repeat_rows needs a single row and a positive count, got {m} rows x{count}"
            )));
        }
        let row = self.value(x).data();
        let mut data = Vec::with_capacity(count * n);
        for _ in 0..count {
            data.extend_from_slice(row);
        }
        let value = Tensor::new(vec![count, n], data)?;
        Ok(self.push(value, Op::RepeatRows { x }))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = self.dims(table)?;
        if ids.is_empty() {
            return Err(NumError::Invalid("embedding lookup of zero ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumError::Invalid(format!("token id {bad} outside vocabulary of {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&src[i * e..(i + 1) * e]);
        }
        let value = Tensor::new(vec![ids.len(), e], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// 3D cross-correlation of a `C x r x r x r` volume with `C' x C x k x k x k`
    /// kernels and an optional per-output-channel bias.
    pub fn conv3d(&mut self, x: Var, kernels: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 4 || ks.len() != 5 || xs[1] != xs[2] || xs[2] != xs[3] {
            return shape_err("conv3d", &xs, &ks);
        }
        if ks[1] != xs[0] || ks[2] != ks[3] || ks[3] != ks[4] {
            return shape_err("conv3d", &xs, &ks);
        }
        if let Some(b) = bias {
            if self.value(b).len() != ks[0] {
                return shape_err("conv3d bias", &ks, self.shape(b));
            }
        }
        let geom = Conv3dGeom::new(xs[0], ks[0], xs[1], ks[2], stride, pad)?;
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.positions();
        let mut out = vec![0.0; geom.out_ch * p];
        gemm(
            geom.out_ch,
            geom.col_rows(),
            p,
            self.value(kernels).data(),
            false,
            &cols,
            false,
            &mut out,
            false,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (row, bb) in out.chunks_mut(p).zip(bv) {
                row.iter_mut().for_each(|v| *v += bb);
            }
        }
        let o = geom.out_size;
        let value = Tensor::new(vec![geom.out_ch, o, o, o], out)?;
        Ok(self.push(
            value,
            Op::Conv3d {
                x,
                k: kernels,
                bias,
                geom,
                cols,
            },
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Backpropagates from a single-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(NumError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Backpropagates caller-supplied output gradients. Used to chain tapes:
    /// the upstream gradient of a feature computed on another tape seeds this one.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return shape_err("backward seed", self.shape(*v), &[g.len()]);
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.clone()),
            }
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(ga) = self.slot(grads, a) {
                    // d op(a) = g · op(b)ᵀ
                    gemm(m, n, k, g, false, bv, !tb, ga, ta, true);
                }
                if let Some(gb) = self.slot(grads, b) {
                    // d op(b) = op(a)ᵀ · g
                    gemm(k, m, n, av, !ta, g, false, gb, tb, true);
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, gg), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gg * bb;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((x, gg), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gg * aa;
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                let n = self.value(bias).len();
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.slot(grads, bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = self.value(x).data();
                if let Some(gx) = self.slot(grads, x) {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(xv) {
                        *a += if *v > 0.0 { *b } else { slope * b };
                    }
                }
            }
            &Op::Sigmoid { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((a, b), y) in gx.iter_mut().zip(g).zip(out) {
                        *a += b * y * (1.0 - y);
                    }
                }
            }
            &Op::SoftmaxRows { x } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(grads, x) {
                    for ((gr, yr), dr) in gx.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for ((a, y), d) in gr.iter_mut().zip(yr).zip(dr) {
                            *a += y * (d - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows { x } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(grads, x) {
                    for ((gr, yr), dr) in gx.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                        let total: f64 = dr.iter().sum();
                        for ((a, y), d) in gr.iter_mut().zip(yr).zip(dr) {
                            *a += d - y.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (dr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((a, d), h) in gg.iter_mut().zip(dr).zip(hr) {
                            *a += d * h;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for dr in g.chunks(n) {
                        gb.iter_mut().zip(dr).for_each(|(a, d)| *a += d);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    let mut dh = vec![0.0; n];
                    for (row, ((dr, hr), is)) in g.chunks(n).zip(xhat.chunks(n)).zip(inv_std.iter()).enumerate() {
                        for j in 0..n {
                            dh[j] = dr[j] * gv[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let gr = &mut gx[row * n..(row + 1) * n];
                        for j in 0..n {
                            gr[j] += is / nf * (nf * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::WeightedRowSum { x, weights } => {
                let n = g.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (row, &w) in gx.chunks_mut(n).zip(weights) {
                        if w != 0.0 {
                            row.iter_mut().zip(g).for_each(|(a, d)| *a += w * d);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = node.value.dims2().expect("matrix");
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2().expect("matrix");
                    if let Some(gp) = self.slot(grads, p) {
                        if *axis == 0 {
                            let src = &g[offset * cols..(offset + pr) * cols];
                            gp.iter_mut().zip(src).for_each(|(a, d)| *a += d);
                        } else {
                            for r in 0..rows {
                                let src = &g[r * cols + offset..r * cols + offset + pc];
                                gp[r * pc..(r + 1) * pc].iter_mut().zip(src).for_each(|(a, d)| *a += d);
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            &Op::SliceCols { x, start } => {
                let (_, n) = self.value(x).dims2().expect("matrix");
                let (_, w) = node.value.dims2().expect("matrix");
                if let Some(gx) = self.slot(grads, x) {
                    for (r, dr) in g.chunks(w).enumerate() {
                        gx[r * n + start..r * n + start + w]
                            .iter_mut()
                            .zip(dr)
                            .for_each(|(a, d)| *a += d);
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                let (_, n) = self.value(x).dims2().expect("matrix");
                if let Some(gx) = self.slot(grads, x) {
                    gx[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, d)| *a += d);
                }
            }
            &Op::RepeatRows { x } => {
                let n = self.value(x).len();
                if let Some(gx) = self.slot(grads, x) {
                    for dr in g.chunks(n) {
                        gx.iter_mut().zip(dr).for_each(|(a, d)| *a += d);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (_, e) = self.value(*table).dims2().expect("matrix");
                if let Some(gt) = self.slot(grads, *table) {
                    for (dr, &id) in g.chunks(e).zip(ids) {
                        gt[id * e..(id + 1) * e].iter_mut().zip(dr).for_each(|(a, d)| *a += d);
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for (((gr, yr), dr), nn) in gx.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)).zip(norms) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for ((a, y), d) in gr.iter_mut().zip(yr).zip(dr) {
                            *a += (d - y * dot) / nn;
                        }
                    }
                }
            }
            &Op::RowSum { x } => {
                let (_, n) = self.value(x).dims2().expect("matrix");
                if let Some(gx) = self.slot(grads, x) {
                    for (row, d) in gx.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|a| *a += d);
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            &Op::SumSquares { x } => {
                let xv = self.value(x).data();
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(xv).for_each(|(a, v)| *a += 2.0 * v * g[0]);
                }
            }
            &Op::Norm { x } => {
                let norm = out[0];
                let xv = self.value(x).data();
                if norm > 0.0 {
                    if let Some(gx) = self.slot(grads, x) {
                        gx.iter_mut().zip(xv).for_each(|(a, v)| *a += v / norm * g[0]);
                    }
                }
            }
            &Op::Transpose { x } => {
                let (r, c) = self.value(x).dims2().expect("matrix");
                if let Some(gx) = self.slot(grads, x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, d)| *a += d);
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&i, d) in idx.iter().zip(g) {
                        gx[i] += d;
                    }
                }
            }
            Op::Conv3d { x, k, bias, geom, cols } => {
                let p = geom.positions();
                let cr = geom.col_rows();
                if let Some(gk) = self.slot(grads, *k) {
                    gemm(geom.out_ch, p, cr, g, false, cols, true, gk, false, true);
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(grads, *b) {
                        for (a, row) in gb.iter_mut().zip(g.chunks(p)) {
                            *a += row.iter().sum::<f64>();
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; cr * p];
                    let kv = self.value(*k).data();
                    gemm(cr, geom.out_ch, p, kv, true, g, false, &mut dcols, false, false);
                    if let Some(gx) = self.slot(grads, *x) {
                        col2im(&dcols, geom, gx);
                    }
                }
            }
        }
    }

    /// Gradients of every bound trainable parameter, keyed by [`ParamId`].
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::new();
        let mut bound: Vec<_> = self.bound.iter().collect();
        bound.sort();
        for (&id, &v) in bound {
            if let Some(g) = grads.get(v) {
                out.insert(id, g.to_vec());
            }
        }
        out
    }
}

fn im2col(x: &[f64], g: &Conv3dGeom) -> Vec<f64> {
    let (r, k, o, s) = (g.size, g.kernel, g.out_size, g.stride);
    let p = g.positions();
    let mut cols = vec![0.0; g.col_rows() * p];
    for c in 0..g.in_ch {
        let xc = &x[c * r * r * r..(c + 1) * r * r * r];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oz in 0..o {
                        let iz = (oz * s + kz) as isize - g.pad as isize;
                        if iz < 0 || iz >= r as isize {
                            continue;
                        }
                        for oy in 0..o {
                            let iy = (oy * s + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= r as isize {
                                continue;
                            }
                            let base = (iz as usize * r + iy as usize) * r;
                            for ox in 0..o {
                                let ix = (ox * s + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= r as isize {
                                    continue;
                                }
                                dst[(oz * o + oy) * o + ox] = xc[base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Conv3dGeom, dx: &mut [f64]) {
    let (r, k, o, s) = (g.size, g.kernel, g.out_size, g.stride);
    let p = g.positions();
    for c in 0..g.in_ch {
        let xc = &mut dx[c * r * r * r..(c + 1) * r * r * r];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oz in 0..o {
                        let iz = (oz * s + kz) as isize - g.pad as isize;
                        if iz < 0 || iz >= r as isize {
                            continue;
                        }
                        for oy in 0..o {
                            let iy = (oy * s + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= r as isize {
                                continue;
                            }
                            let base = (iz as usize * r + iy as usize) * r;
                            for ox in 0..o {
                                let ix = (ox * s + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= r as isize {
                                    continue;
                                }
                                xc[base + ix as usize] += src[(oz * o + oy) * o + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
