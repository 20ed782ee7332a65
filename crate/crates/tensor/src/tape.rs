//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the inputs
//! its backward rule needs. Nodes are only ever appended, so the tape is in
//! topological order by construction and backward is a single reverse sweep.

use std::collections::HashMap;

use crate::kernels::{self, gemm};
use crate::{ParamId, ParamSet, Result, Tensor, TensorError};

/// Probability floor/ceiling used inside every clamped log term.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    CausalSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    CrossEntropyLm { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
    Bce { probs: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    // CausalSoftmax stores its diagonal offset here so Op stays small.
    offset: usize,
}

/// Records a forward computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded input, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Adds `scale *` every parameter gradient into `set`.
    pub fn accumulate_into(&self, set: &mut ParamSet, scale: f64) -> Result<()> {
        for (id, g) in &self.params {
            set.accumulate_grad(*id, g, scale)?;
        }
        set.mark_grads(true);
        Ok(())
    }

    /// Sums another gradient set into this one (parameter entries only).
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.iter_mut().find(|(i, _)| *i == id) {
                Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => self.params.push((id, g)),
            }
        }
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::Rank {
            expected: 2,
            shape: other.to_vec(),
        }),
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            offset: 0,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records a leaf that receives a gradient, readable through [`Gradients::wrt`].
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let t = set.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a))?;
        let (k2, n) = dims2(self.shape(b))?;
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a))?;
        let (n, k2) = dims2(self.shape(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (1, k), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulT(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of `x: [r×c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = dims2(self.shape(x))?;
        if self.value(bias).len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a), rg)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let mut out = self.value(x).to_vec();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    buf[j] = out[(o * n + j) * inner + i];
                }
                kernels::softmax_in_place(&mut buf);
                for j in 0..n {
                    out[(o * n + j) * inner + i] = buf[j];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Row softmax of attention scores `[r×c]` where row `i` may only see
    /// columns `j <= i + offset`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x))?;
        if r > 0 && r - 1 + offset >= c {
            return Err(TensorError::ShapeMismatch {
                op: "causal_softmax",
                lhs: vec![r, c],
                rhs: vec![offset],
            });
        }
        let mut out = self.value(x).to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let visible = i + offset + 1;
            kernels::softmax_in_place(&mut row[..visible]);
            row[visible..].fill(0.0);
        }
        let rg = self.rg(x);
        let v = self.push(vec![r, c], out, Op::CausalSoftmax(x), rg);
        self.nodes[v.0].offset = offset;
        Ok(v)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let ones = vec![1.0; c];
        let zeros = vec![0.0; c];
        let mut xhat = self.value(x).to_vec();
        let mut rstd = Vec::with_capacity(r);
        for row in xhat.chunks_mut(c) {
            rstd.push(kernels::layer_norm_row(row, &ones, &zeros).1);
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((v, g), b)| v * g + b))
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Gathers rows of `table: [V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange { index: bad, bound: v });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let (_, c) = dims2(self.shape(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = dims2(self.shape(p))?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (r, _) = dims2(self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.shape(p))?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x))?;
        if start + len > r {
            return Err(TensorError::IndexOutOfRange { index: start + len, bound: r });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x))?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange { index: start + len, bound: c });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    /// Mean over rows of `[r×c]`, giving `[c]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x))?;
        if r == 0 {
            return Err(TensorError::Empty("mean_pool"));
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks(c) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let rg = self.rg(x);
        Ok(self.push(vec![c], out, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: self.value(x).len(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Mean of `-log softmax(logits[t])[targets[t]]` over positions where
    /// `mask[t]` holds.
    pub fn cross_entropy_lm(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = dims2(self.shape(logits))?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_lm",
                lhs: vec![t, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Empty("cross_entropy_lm mask"));
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        let lv = self.value(logits);
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(TensorError::IndexOutOfRange { index: targets[i], bound: v });
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss / count as f64],
            Op::CrossEntropyLm {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// `-Σ [t·ln p + (1-t)·ln(1-p)]` with `p` clamped to `[ε, 1-ε]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        if self.value(probs).len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "binary_cross_entropy",
                lhs: self.shape(probs).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let loss = self
            .value(probs)
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let rg = self.rg(probs);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::Bce { probs, targets: targets.to_vec() },
            rg,
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape supports exactly
    /// one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let acc = |v: Var, delta: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => add_into(existing, &delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(idx), g);
                }
                Op::Param(id) => {
                    out.params.push((*id, g));
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims2(&nodes[a.0].shape)?;
                    let n = nodes[b.0].shape[1];
                    if nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, (n, 1), &nodes[b.0].value, (1, n), 0.0, &mut da);
                        acc(*a, da, &mut grads);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, &nodes[a.0].value, (1, k), &g, (n, 1), 0.0, &mut db);
                        acc(*b, db, &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = dims2(&nodes[a.0].shape)?;
                    let n = nodes[b.0].shape[0];
                    if nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, (n, 1), &nodes[b.0].value, (k, 1), 0.0, &mut da);
                        acc(*a, da, &mut grads);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, &g, (1, n), &nodes[a.0].value, (k, 1), 0.0, &mut db);
                        acc(*b, db, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddRow(x, bias) => {
                    let c = nodes[bias.0].value.len();
                    if nodes[bias.0].requires_grad {
                        let mut db = vec![0.0; c];
                        for row in g.chunks(c) {
                            add_into(&mut db, row);
                        }
                        acc(*bias, db, &mut grads);
                    }
                    acc(*x, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    if nodes[a.0].requires_grad {
                        acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect(), &mut grads);
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect(), &mut grads);
                    }
                }
                Op::Scale(a, s) => {
                    acc(*a, g.iter().map(|x| x * s).collect(), &mut grads);
                }
                Op::Gelu(a) => {
                    let av = &nodes[a.0].value;
                    acc(
                        *a,
                        g.iter().zip(av).map(|(g, &x)| g * kernels::gelu_grad(x)).collect(),
                        &mut grads,
                    );
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(), &mut grads);
                }
                Op::Softmax { x, axis } => {
                    let (outer, n, inner) = axis_split(&node.shape, *axis)?;
                    let y = &node.value;
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let s: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] = y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::CausalSoftmax(x) => {
                    let (_, c) = dims2(&node.shape)?;
                    let y = &node.value;
                    let mut dx = vec![0.0; y.len()];
                    for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dxr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let c = nodes[gamma.0].value.len();
                    let gv = &nodes[gamma.0].value;
                    if nodes[gamma.0].requires_grad {
                        let mut dg = vec![0.0; c];
                        for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += gr[j] * xr[j];
                            }
                        }
                        acc(*gamma, dg, &mut grads);
                    }
                    if nodes[beta.0].requires_grad {
                        let mut db = vec![0.0; c];
                        for gr in g.chunks(c) {
                            add_into(&mut db, gr);
                        }
                        acc(*beta, db, &mut grads);
                    }
                    if nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; g.len()];
                        let cf = c as f64;
                        for (row, ((gr, xr), dxr)) in
                            g.chunks(c).zip(xhat.chunks(c)).zip(dx.chunks_mut(c)).enumerate()
                        {
                            let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / cf;
                            let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cf;
                            for j in 0..c {
                                dxr[j] = rstd[row] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                            }
                        }
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::Embedding { table, ids } => {
                    let (v, d) = dims2(&nodes[table.0].shape)?;
                    let mut dt = vec![0.0; v * d];
                    for (row, &i) in g.chunks(d).zip(ids) {
                        add_into(&mut dt[i * d..(i + 1) * d], row);
                    }
                    acc(*table, dt, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        acc(*p, g[start..start + len].to_vec(), &mut grads);
                        start += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = dims2(&node.shape)?;
                    let mut col = 0;
                    for p in parts {
                        let w = dims2(&nodes[p.0].shape)?.1;
                        if nodes[p.0].requires_grad {
                            let mut dp = Vec::with_capacity(r * w);
                            for i in 0..r {
                                dp.extend_from_slice(&g[i * total + col..i * total + col + w]);
                            }
                            acc(*p, dp, &mut grads);
                        }
                        col += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (_, c) = dims2(&nodes[x.0].shape)?;
                    let mut dx = vec![0.0; nodes[x.0].value.len()];
                    dx[start * c..start * c + g.len()].copy_from_slice(&g);
                    acc(*x, dx, &mut grads);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = dims2(&nodes[x.0].shape)?;
                    let w = node.shape[1];
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::MeanRows(x) => {
                    let (r, _) = dims2(&nodes[x.0].shape)?;
                    let scale = 1.0 / r as f64;
                    let row: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    let dx = (0..r).flat_map(|_| row.iter().copied()).collect();
                    acc(*x, dx, &mut grads);
                }
                Op::Sum(x) => {
                    acc(*x, vec![g[0]; nodes[x.0].value.len()], &mut grads);
                }
                Op::Reshape(x) => acc(*x, g, &mut grads),
                Op::CrossEntropyLm { logits, targets, mask, probs, count } => {
                    let (t, v) = dims2(&nodes[logits.0].shape)?;
                    let scale = g[0] / *count as f64;
                    let mut dl = vec![0.0; t * v];
                    for i in 0..t {
                        if !mask[i] {
                            continue;
                        }
                        for j in 0..v {
                            dl[i * v + j] = scale * probs[i * v + j];
                        }
                        dl[i * v + targets[i]] -= scale;
                    }
                    acc(*logits, dl, &mut grads);
                }
                Op::Bce { probs, targets } => {
                    let pv = &nodes[probs.0].value;
                    let dp = pv
                        .iter()
                        .zip(targets)
                        .map(|(&p, &t)| {
                            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                                0.0
                            } else {
                                g[0] * (-t / p + (1.0 - t) / (1.0 - p))
                            }
                        })
                        .collect();
                    acc(*probs, dp, &mut grads);
                }
            }
        }
        Ok(out)
    }
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Rank {
            expected: axis + 1,
            shape: shape.to_vec(),
        });
    }
    let n = shape[axis];
    if n == 0 {
        return Err(TensorError::Empty("softmax axis"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, n, inner))
}
