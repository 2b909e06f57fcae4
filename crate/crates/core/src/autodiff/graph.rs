//! Reverse-mode tape over 2-d row-major tensors.
//!
//! Every op appends one node; nodes are therefore already in topological
//! order and `backward` walks them once in reverse. Leaves may borrow their
//! values (model parameters) so building a graph per utterance never copies
//! weights.

use std::borrow::Cow;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fill value for masked attention scores: finite, and `exp` of it
/// underflows to exactly zero.
pub const MASKED_SCORE: f64 = -1.0e30;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// matrix plus a row vector broadcast over rows
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    MaskFill {
        x: Var,
        mask: Vec<bool>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    StackFrames(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    Mse {
        x: Var,
        target: Vec<f64>,
    },
}

struct Node<'p> {
    rows: usize,
    cols: usize,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Single-threaded; build one per utterance.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
}

fn check(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, a_rest) = a.split_at(a.len() / 4 * 4);
    let (b4, b_rest) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = a_rest.iter().zip(b_rest).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise softmax with max subtraction.
pub fn softmax_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Lower-triangular mask: `true` marks entries above the diagonal (future positions).
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = true;
        }
    }
    m
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'p, [f64]>, op: Op, rg: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad: rg,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf borrowing the tensor's storage.
    pub fn leaf(&mut self, t: &'p Tensor, requires_grad: bool) -> Var {
        let (r, c) = matrix_dims(t);
        self.push(r, c, Cow::Borrowed(t.data()), Op::Leaf, requires_grad)
    }

    /// Leaf owning its storage, using the tensor's own `requires_grad` flag.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let (r, c) = matrix_dims(&t);
        self.push(r, c, Cow::Owned(t.into_data()), Op::Leaf, rg)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "constant {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, Cow::Owned(data), Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Accumulated gradient of a node, if it received any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn finish(&mut self, name: &'static str, rows: usize, cols: usize, data: Vec<f64>, op: Op, rg: bool) -> Result<Var> {
        check(name, &data)?;
        Ok(self.push(rows, cols, Cow::Owned(data), op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.finish("matmul", m, n, out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`, used for `x · Wᵀ` with weights stored as `[out × in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt inner dimensions differ: [{m}x{k}] x [{n}x{k2}]^T"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.finish("matmul_nt", m, n, out, Op::MatMulNt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.finish("transpose", n, m, out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape(format!(
                "{name}: [{}x{}] vs [{}x{}]",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.finish("add", m, n, out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.finish("sub", m, n, out, Op::Sub(a, b), rg)
    }

    /// Adds a `1×n` (or length-n) row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr * rc != n {
            return Err(Error::Shape(format!(
                "add_row: [{m}x{n}] with row of {} values",
                rr * rc
            )));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        self.finish("add_row", m, n, out, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.finish("mul", m, n, out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.finish("scale", m, n, out, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a);
        self.finish("gelu", m, n, out, Op::Gelu(a), rg)
    }

    /// Per-row layer normalisation with learned gain and bias (both length `cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (gr, gc) = self.shape(gamma);
        let (br, bc) = self.shape(beta);
        if gr * gc != n || br * bc != n {
            return Err(Error::Shape(format!(
                "layer_norm over {n} columns with gain of {} and bias of {}",
                gr * gc,
                br * bc
            )));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
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
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.finish(
            "layer_norm",
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        check("softmax_rows input", self.value(x))?;
        let mut out = self.value(x).to_vec();
        softmax_in_place(&mut out, n);
        let rg = self.rg(x);
        self.finish("softmax_rows", m, n, out, Op::Softmax(x), rg)
    }

    /// Replaces entries where `mask` is true by [`MASKED_SCORE`].
    pub fn mask_fill(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let (m, n) = self.shape(x);
        if mask.len() != m * n {
            return Err(Error::Shape(format!(
                "mask of {} entries for [{m}x{n}]",
                mask.len()
            )));
        }
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &masked)| if masked { MASKED_SCORE } else { v })
            .collect();
        let rg = self.rg(x);
        self.finish("mask_fill", m, n, out, Op::MaskFill { x, mask }, rg)
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row id {bad} outside table of {v} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.finish(
            "embedding",
            ids.len(),
            d,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat_rows of nothing".into()));
        };
        let n = self.shape(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != n {
                return Err(Error::Shape(format!(
                    "concat_rows: column counts {n} and {c} differ"
                )));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.finish("concat_rows", rows, n, out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat_cols of nothing".into()));
        };
        let m = self.shape(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != m {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts {m} and {r} differ"
                )));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.finish("concat_cols", m, n, out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n || len == 0 {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) of {n} columns",
                start + len
            )));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        self.finish("slice_cols", m, len, out, Op::SliceCols { x, start }, rg)
    }

    /// Stacks `factor` consecutive rows into one, zero-padding the tail:
    /// `[T × d] -> [ceil(T/factor) × factor·d]`.
    pub fn stack_frames(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Config("stacking factor must be positive".into()));
        }
        let (t, d) = self.shape(x);
        let out_rows = t.div_ceil(factor);
        let mut out = vec![0.0; out_rows * factor * d];
        out[..t * d].copy_from_slice(self.value(x));
        let rg = self.rg(x);
        self.finish("stack_frames", out_rows, factor * d, out, Op::StackFrames(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.finish("sum", 1, 1, vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.finish("mean", 1, 1, vec![s], Op::Mean(x), rg)
    }

    /// Mean negative log-likelihood over rows where `mask` is true.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (l, v) = self.shape(logits);
        if targets.len() != l || mask.len() != l {
            return Err(Error::Shape(format!(
                "cross_entropy over {l} rows with {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateLoss("no masked-in positions".into()));
        }
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m && t >= v {
                return Err(Error::Index(format!(
                    "target {t} at position {i} outside vocabulary of {v}"
                )));
            }
        }
        check("cross_entropy input", self.value(logits))?;
        let mut probs = self.value(logits).to_vec();
        let mut nll = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if mask[i] {
                nll += lse - row[targets[i]];
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = nll / count as f64;
        let rg = self.rg(logits);
        self.finish(
            "cross_entropy_masked",
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if v.len() != target.len() {
            return Err(Error::Shape(format!(
                "mse over {} values with target of {}",
                v.len(),
                target.len()
            )));
        }
        let s = v.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.finish(
            "mse",
            1,
            1,
            vec![s],
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            rg,
        )
    }

    /// Back-propagates from a scalar node. Gradients add onto whatever a
    /// previous call left behind; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got [{r}x{c}]"
            )));
        }
        let n = loss.0 + 1;
        let mut local: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        local[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(g) = local[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                add_into(&mut self.grads[idx], &g);
                continue;
            }
            self.propagate(idx, &g, &mut local);
            // Interior nodes keep their gradient too, which makes debugging easier.
            add_into(&mut self.grads[idx], &g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, self.value(*b), &mut ga, m, n, k);
                    add_into(&mut local[a.0], &ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(self.value(*a), g, &mut gb, m, k, n);
                    add_into(&mut local[b.0], &gb);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ, a: m×k, b: n×k
                let (m, k) = self.shape(*a);
                let n = cols;
                if rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nn(g, self.value(*b), &mut ga, m, n, k);
                    add_into(&mut local[a.0], &ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; n * k];
                    gemm_tn(g, self.value(*a), &mut gb, m, n, k);
                    add_into(&mut local[b.0], &gb);
                }
            }
            Op::Transpose(a) => {
                let mut ga = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        ga[j * rows + i] = g[i * cols + j];
                    }
                }
                add_into(&mut local[a.0], &ga);
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    add_into(&mut local[a.0], g);
                }
                if rg(*b) {
                    add_into(&mut local[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    add_into(&mut local[a.0], g);
                }
                if rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(&mut local[b.0], &neg);
                }
            }
            Op::AddRow(a, row) => {
                if rg(*a) {
                    add_into(&mut local[a.0], g);
                }
                if rg(*row) {
                    let mut gr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                    add_into(&mut local[row.0], &gr);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let ga: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    add_into(&mut local[a.0], &ga);
                }
                if rg(*b) {
                    let gb: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    add_into(&mut local[b.0], &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_into(&mut local[a.0], &ga);
            }
            Op::Gelu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gy, &x)| gy * gelu_grad(x))
                    .collect();
                add_into(&mut local[a.0], &ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = cols;
                let gv = self.value(*gamma);
                if rg(*gamma) {
                    let mut gg = vec![0.0; n];
                    for i in 0..rows {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    add_into(&mut local[gamma.0], &gg);
                }
                if rg(*beta) {
                    let mut gb = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    add_into(&mut local[beta.0], &gb);
                }
                if rg(*x) {
                    let mut gx = vec![0.0; rows * n];
                    for i in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = g[i * n + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[i * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = g[i * n + j] * gv[j];
                            gx[i * n + j] = inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                    add_into(&mut local[x.0], &gx);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = vec![0.0; rows * cols];
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        gx[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut local[x.0], &gx);
            }
            Op::MaskFill { x, mask } => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { 0.0 } else { v })
                    .collect();
                add_into(&mut local[x.0], &gx);
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.shape(*table);
                let mut gt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                add_into(&mut local[table.0], &gt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if rg(*p) {
                        add_into(&mut local[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if rg(*p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            gp.extend_from_slice(&g[i * cols + off..i * cols + off + w]);
                        }
                        add_into(&mut local[p.0], &gp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.shape(*x);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                add_into(&mut local[x.0], &gx);
            }
            Op::StackFrames(x) => {
                let len = self.value(*x).len();
                add_into(&mut local[x.0], &g[..len]);
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                add_into(&mut local[x.0], &vec![g[0]; len]);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                add_into(&mut local[x.0], &vec![g[0] / len as f64; len]);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                mask,
                count,
            } => {
                let v = self.shape(*logits).1;
                let scale = g[0] / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        gl[i * v + j] = probs[i * v + j] * scale;
                    }
                    gl[i * v + targets[i]] -= scale;
                }
                add_into(&mut local[logits.0], &gl);
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let k = 2.0 * g[0] / xv.len() as f64;
                let gx: Vec<f64> = xv.iter().zip(target).map(|(a, b)| k * (a - b)).collect();
                add_into(&mut local[x.0], &gx);
            }
        }
    }
}
