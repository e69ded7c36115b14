//! Tape recording and the reverse pass.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::{
    fresh_tape_id, NodeRef, Result, Tensor, TensorError, EXP_CLAMP, LOG_FLOOR, RECIP_FLOOR,
};

const GELU_COEF: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Gelu(usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    Recip(usize),
    MulScalarTensor { a: usize, s: usize },
    MatMul { a: usize, b: usize },
    Transpose(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    IndexSelect { a: usize, indices: Arc<Vec<usize>> },
    BroadcastAddRow { a: usize, bias: usize },
    RowSum(usize),
    RowMean(usize),
    SumAll(usize),
    MeanAll(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    L2NormalizeRows { x: usize, eps: f64 },
    LogSoftmaxRows(usize),
    BilinearResample { map: usize, points: Arc<Vec<(f64, f64)>> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Records one forward execution. Supports exactly one backward pass.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-leaf gradients produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape_id: u64,
    by_index: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a watched leaf. `None` when no path from the
    /// root reaches it (a zero gradient).
    pub fn wrt(&self, t: &Tensor) -> Option<&Tensor> {
        let node = t.node()?;
        if node.tape_id != self.tape_id {
            return None;
        }
        self.by_index.get(node.index).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: fresh_tape_id(),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, op: Op, value: Tensor, needs_grad: bool) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        let out = value.with_node(
            NodeRef {
                tape_id: self.id,
                index,
            },
            needs_grad,
        );
        nodes.push(Node {
            op,
            value: out.clone(),
            needs_grad,
        });
        out
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed.get() {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// Register a gradient-tracked leaf.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        self.push(Op::Leaf, t.clone().with_requires_grad(true), true)
    }

    /// Register a constant (no gradient flows into it).
    pub fn constant(&self, t: &Tensor) -> Tensor {
        self.push(Op::Constant, t.clone().with_requires_grad(false), false)
    }

    /// Index of `t` on this tape, lifting plain tensors to constants.
    fn resolve(&self, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(node) if node.tape_id == self.id => Ok(node.index),
            Some(_) => Err(TensorError::CrossTape),
            None => Ok(self.constant(t).node().unwrap().index),
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(
        &self,
        op_name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.check_open()?;
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let ia = self.resolve(a)?;
        let ib = self.resolve(b)?;
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.push(make(ia, ib), value, self.needs(ia) || self.needs(ib)))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(
        &self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        make: impl Fn(usize) -> Op,
    ) -> Result<Tensor> {
        self.check_open()?;
        let ia = self.resolve(a)?;
        let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.push(make(ia), value, self.needs(ia)))
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(a, |x| x + c, Op::AddScalar)
    }

    pub fn mul_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(a, |x| x * c, |i| Op::MulScalar(i, c))
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        self.mul_scalar(a, -1.0)
    }

    /// exp with overflow guard: inputs above [`EXP_CLAMP`] saturate.
    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.min(EXP_CLAMP).exp(), Op::Exp)
    }

    /// Natural log with a positivity guard: inputs below [`LOG_FLOOR`] are
    /// floored so finite inputs never produce NaN/-inf.
    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, gelu_fwd, Op::Gelu)
    }

    pub fn clamp(&self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(TensorError::InvalidArg {
                op: "clamp",
                msg: format!("lo {lo} > hi {hi}"),
            });
        }
        self.unary(a, |x| x.clamp(lo, hi), |i| Op::Clamp { a: i, lo, hi })
    }

    /// Elementwise reciprocal; denominators are floored in magnitude at
    /// [`RECIP_FLOOR`] so finite inputs never produce inf.
    pub fn recip(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, recip_fwd, Op::Recip)
    }

    /// Multiply every element of `a` by a scalar tensor (gradient flows to both).
    pub fn mul_by_scalar_tensor(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.check_open()?;
        if s.numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "mul_by_scalar_tensor",
                shape: s.shape().to_vec(),
                expected: "scalar".into(),
            });
        }
        let ia = self.resolve(a)?;
        let is = self.resolve(s)?;
        let sv = s.item();
        let data: Vec<f64> = a.data().iter().map(|&x| x * sv).collect();
        let value = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.push(
            Op::MulScalarTensor { a: ia, s: is },
            value,
            self.needs(ia) || self.needs(is),
        ))
    }

    // ── linear algebra and shape ────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_open()?;
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let ia = self.resolve(a)?;
        let ib = self.resolve(b)?;
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(
            Op::MatMul { a: ia, b: ib },
            value,
            self.needs(ia) || self.needs(ib),
        ))
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        self.check_open()?;
        let sh = a.shape();
        if sh.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: sh.to_vec(),
                expected: "rank-2 tensor".into(),
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let ia = self.resolve(a)?;
        let value = Tensor::from_vec(vec![n, m], transpose_raw(a.data(), m, n))?;
        Ok(self.push(Op::Transpose(ia), value, self.needs(ia)))
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        self.check_open()?;
        let expected: usize = shape.iter().product();
        if expected != a.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: a.shape().to_vec(),
                expected: format!("numel {} for target {:?}", expected, shape),
            });
        }
        let ia = self.resolve(a)?;
        let value = Tensor::from_vec(shape, a.data().to_vec())?;
        Ok(self.push(Op::Reshape(ia), value, self.needs(ia)))
    }

    /// Concatenate rank-2 tensors along rows. All parts must agree on columns.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        self.check_open()?;
        if parts.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        }
        let cols = match parts[0].shape() {
            [_, c] => *c,
            sh => {
                return Err(TensorError::InvalidShape {
                    op: "concat_rows",
                    shape: sh.to_vec(),
                    expected: "rank-2 tensor".into(),
                })
            }
        };
        let mut idxs = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut rows = 0usize;
        let mut needs = false;
        for p in parts {
            match p.shape() {
                [r, c] if *c == cols => rows += r,
                sh => {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: vec![rows, cols],
                        rhs: sh.to_vec(),
                    })
                }
            }
            let i = self.resolve(p)?;
            needs |= self.needs(i);
            idxs.push(i);
            data.extend_from_slice(p.data());
        }
        let value = Tensor::from_vec(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(idxs), value, needs))
    }

    pub fn slice_rows(&self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        self.check_open()?;
        let (m, n) = rank2(a, "slice_rows")?;
        if start >= end || end > m {
            return Err(TensorError::InvalidArg {
                op: "slice_rows",
                msg: format!("range {start}..{end} out of {m} rows"),
            });
        }
        let ia = self.resolve(a)?;
        let data = a.data()[start * n..end * n].to_vec();
        let value = Tensor::from_vec(vec![end - start, n], data)?;
        Ok(self.push(Op::SliceRows { a: ia, start }, value, self.needs(ia)))
    }

    pub fn slice_cols(&self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        self.check_open()?;
        let (m, n) = rank2(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::InvalidArg {
                op: "slice_cols",
                msg: format!("range {start}..{end} out of {n} cols"),
            });
        }
        let ia = self.resolve(a)?;
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&a.data()[i * n + start..i * n + end]);
        }
        let value = Tensor::from_vec(vec![m, w], data)?;
        Ok(self.push(Op::SliceCols { a: ia, start }, value, self.needs(ia)))
    }

    /// Gather flat elements of `a` at `indices`, producing `out_shape`.
    /// The backward pass scatter-adds.
    pub fn index_select(
        &self,
        a: &Tensor,
        indices: Vec<usize>,
        out_shape: Vec<usize>,
    ) -> Result<Tensor> {
        self.check_open()?;
        let expected: usize = out_shape.iter().product();
        if expected != indices.len() {
            return Err(TensorError::InvalidArg {
                op: "index_select",
                msg: format!("{} indices for shape {:?}", indices.len(), out_shape),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.numel()) {
            return Err(TensorError::InvalidArg {
                op: "index_select",
                msg: format!("index {bad} out of {} elements", a.numel()),
            });
        }
        let ia = self.resolve(a)?;
        let src = a.data();
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(
            Op::IndexSelect {
                a: ia,
                indices: Arc::new(indices),
            },
            value,
            self.needs(ia),
        ))
    }

    /// Add a bias row to every row of `a` (trailing-axis broadcast).
    pub fn broadcast_add_row(&self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.check_open()?;
        let m = trailing_dim(a, "broadcast_add_row")?;
        if bias.shape() != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_add_row",
                lhs: a.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let ia = self.resolve(a)?;
        let ib = self.resolve(bias)?;
        let bv = bias.data();
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % m])
            .collect();
        let value = Tensor::from_vec(a.shape().to_vec(), data)?;
        Ok(self.push(
            Op::BroadcastAddRow { a: ia, bias: ib },
            value,
            self.needs(ia) || self.needs(ib),
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    fn row_reduce(&self, a: &Tensor, mean: bool) -> Result<Tensor> {
        self.check_open()?;
        let m = trailing_dim(a, "row_reduce")?;
        let rows = a.numel() / m;
        let ia = self.resolve(a)?;
        let src = a.data();
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let s: f64 = src[r * m..(r + 1) * m].iter().sum();
            data.push(if mean { s / m as f64 } else { s });
        }
        let out_shape = a.shape()[..a.shape().len() - 1].to_vec();
        let value = Tensor::from_vec(out_shape, data)?;
        let op = if mean { Op::RowMean(ia) } else { Op::RowSum(ia) };
        Ok(self.push(op, value, self.needs(ia)))
    }

    /// Sum over the trailing axis: `[.., m] -> [..]`.
    pub fn row_sum(&self, a: &Tensor) -> Result<Tensor> {
        self.row_reduce(a, false)
    }

    /// Mean over the trailing axis: `[.., m] -> [..]`.
    pub fn row_mean(&self, a: &Tensor) -> Result<Tensor> {
        self.row_reduce(a, true)
    }

    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        self.check_open()?;
        let ia = self.resolve(a)?;
        let value = Tensor::scalar(a.data().iter().sum());
        Ok(self.push(Op::SumAll(ia), value, self.needs(ia)))
    }

    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        self.check_open()?;
        let ia = self.resolve(a)?;
        let value = Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64);
        Ok(self.push(Op::MeanAll(ia), value, self.needs(ia)))
    }

    // ── normalization and softmax ───────────────────────────────────────

    /// Layer normalization over the trailing axis with affine parameters.
    pub fn layer_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        self.check_open()?;
        let m = trailing_dim(x, "layer_norm")?;
        if gamma.shape() != [m] || beta.shape() != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let ix = self.resolve(x)?;
        let ig = self.resolve(gamma)?;
        let ib = self.resolve(beta)?;
        let rows = x.numel() / m;
        let (g, b) = (gamma.data(), beta.data());
        let src = x.data();
        let mut data = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &src[r * m..(r + 1) * m];
            let (mu, sd) = row_moments(row, eps);
            for j in 0..m {
                data[r * m + j] = (row[j] - mu) / sd * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.push(
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                eps,
            },
            value,
            self.needs(ix) || self.needs(ig) || self.needs(ib),
        ))
    }

    /// Divide each trailing-axis vector by `max(norm, eps)`.
    pub fn l2_normalize_rows(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        self.check_open()?;
        let m = trailing_dim(x, "l2_normalize_rows")?;
        let ix = self.resolve(x)?;
        let rows = x.numel() / m;
        let src = x.data();
        let mut data = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &src[r * m..(r + 1) * m];
            let norm = l2_norm(row).max(eps);
            for j in 0..m {
                data[r * m + j] = row[j] / norm;
            }
        }
        let value = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.push(Op::L2NormalizeRows { x: ix, eps }, value, self.needs(ix)))
    }

    /// Numerically stable log-softmax over each row of a rank-2 tensor.
    pub fn log_softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        self.check_open()?;
        let (rows, m) = rank2(x, "log_softmax_rows")?;
        if m == 0 {
            return Err(TensorError::InvalidShape {
                op: "log_softmax_rows",
                shape: x.shape().to_vec(),
                expected: "at least one column".into(),
            });
        }
        let ix = self.resolve(x)?;
        let src = x.data();
        let mut data = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &src[r * m..(r + 1) * m];
            log_softmax_row(row, &mut data[r * m..(r + 1) * m]);
        }
        let value = Tensor::from_vec(x.shape().to_vec(), data)?;
        Ok(self.push(Op::LogSoftmaxRows(ix), value, self.needs(ix)))
    }

    // ── sampling ────────────────────────────────────────────────────────

    /// Bilinear samples of a `[c, h, w]` map at continuous `(y, x)` points,
    /// clamped to the valid interpolation domain. Output is `[c, P]`.
    pub fn bilinear_resample(&self, map: &Tensor, points: Vec<(f64, f64)>) -> Result<Tensor> {
        self.check_open()?;
        let (c, h, w) = rank3(map, "bilinear_resample")?;
        if points.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "bilinear_resample",
                msg: "no sample points".into(),
            });
        }
        let im = self.resolve(map)?;
        let src = map.data();
        let np = points.len();
        let mut data = vec![0.0; c * np];
        for (p, &(y, x)) in points.iter().enumerate() {
            let s = BilinearStencil::new(y, x, h, w);
            for ch in 0..c {
                data[ch * np + p] = s.gather(&src[ch * h * w..(ch + 1) * h * w], w);
            }
        }
        let value = Tensor::from_vec(vec![c, np], data)?;
        Ok(self.push(
            Op::BilinearResample {
                map: im,
                points: Arc::new(points),
            },
            value,
            self.needs(im),
        ))
    }

    /// Single bilinear sample, returned as a `[c]` vector.
    pub fn bilinear_sample(&self, map: &Tensor, y: f64, x: f64) -> Result<Tensor> {
        let c = map.shape().first().copied().unwrap_or(0);
        let s = self.bilinear_resample(map, vec![(y, x)])?;
        self.reshape(&s, vec![c])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Consumes the tape.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if !root.is_scalar() {
            return Err(TensorError::NonScalarRoot {
                shape: root.shape().to_vec(),
            });
        }
        let seed = Tensor::scalar(1.0);
        self.backward_seeded(&[(root, &seed)])
    }

    /// Reverse pass seeded with explicit output gradients at one or more
    /// nodes. Used to chain tapes: the seed of a leaf embedding on this tape
    /// is the gradient computed for it on a downstream tape.
    pub fn backward_seeded(&self, seeds: &[(&Tensor, &Tensor)]) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        for (t, seed) in seeds {
            let node = t.node().ok_or(TensorError::NotOnTape)?;
            if node.tape_id != self.id {
                return Err(TensorError::CrossTape);
            }
            if seed.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "backward_seeded",
                    lhs: t.shape().to_vec(),
                    rhs: seed.shape().to_vec(),
                });
            }
            if nodes[node.index].needs_grad {
                accumulate(&mut grads[node.index], seed.data(), seed.numel());
            }
        }

        let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for idx in (0..nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    leaf_grads[idx] =
                        Some(Tensor::from_vec(node.value.shape().to_vec(), g).expect("leaf grad"));
                }
                Op::Constant => {}
                op => self.propagate(op, node, &g, &nodes, &mut grads),
            }
        }
        Ok(Gradients {
            tape_id: self.id,
            by_index: leaf_grads,
        })
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(
        &self,
        op: &Op,
        node: &Node,
        g: &[f64],
        nodes: &[Node],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let mut add_to = |idx: usize, contrib: Vec<f64>| {
            if nodes[idx].needs_grad {
                accumulate(&mut grads[idx], &contrib, contrib.len());
            }
        };
        match op {
            Op::Leaf | Op::Constant => unreachable!("handled by caller"),
            Op::Add(a, b) => {
                add_to(*a, g.to_vec());
                add_to(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                add_to(*a, g.to_vec());
                add_to(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                add_to(*a, g.iter().zip(bv).map(|(gv, y)| gv * y).collect());
                add_to(*b, g.iter().zip(av).map(|(gv, x)| gv * x).collect());
            }
            Op::AddScalar(a) => add_to(*a, g.to_vec()),
            Op::MulScalar(a, c) => add_to(*a, g.iter().map(|v| v * c).collect()),
            Op::Exp(a) => {
                let x = nodes[*a].value.data();
                let y = node.value.data();
                add_to(
                    *a,
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(gv, (&xv, &yv))| if xv <= EXP_CLAMP { gv * yv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Log(a) => {
                let x = nodes[*a].value.data();
                add_to(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > LOG_FLOOR { gv / xv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Gelu(a) => {
                let x = nodes[*a].value.data();
                add_to(*a, g.iter().zip(x).map(|(gv, &xv)| gv * gelu_grad(xv)).collect());
            }
            Op::Clamp { a, lo, hi } => {
                let x = nodes[*a].value.data();
                add_to(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > *lo && xv < *hi { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Recip(a) => {
                let y = node.value.data();
                add_to(*a, g.iter().zip(y).map(|(gv, &yv)| -gv * yv * yv).collect());
            }
            Op::MulScalarTensor { a, s } => {
                let sv = nodes[*s].value.item();
                let av = nodes[*a].value.data();
                add_to(*a, g.iter().map(|gv| gv * sv).collect());
                let ds: f64 = g.iter().zip(av).map(|(gv, &xv)| gv * xv).sum();
                add_to(*s, vec![ds]);
            }
            Op::MatMul { a, b } => {
                let av = nodes[*a].value.clone();
                let bv = nodes[*b].value.clone();
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                // dA = g · Bᵀ, dB = Aᵀ · g
                let bt = transpose_raw(bv.data(), k, n);
                add_to(*a, matmul_raw(g, &bt, m, n, k));
                let at = transpose_raw(av.data(), m, k);
                add_to(*b, matmul_raw(&at, g, k, m, n));
            }
            Op::Transpose(a) => {
                let sh = node.value.shape();
                add_to(*a, transpose_raw(g, sh[0], sh[1]));
            }
            Op::Reshape(a) => add_to(*a, g.to_vec()),
            Op::ConcatRows(parts) => {
                let cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let rows = nodes[p].value.shape()[0];
                    add_to(p, g[offset..offset + rows * cols].to_vec());
                    offset += rows * cols;
                }
            }
            Op::SliceRows { a, start } => {
                let n = nodes[*a].value.shape()[1];
                let mut da = vec![0.0; nodes[*a].value.numel()];
                da[start * n..start * n + g.len()].copy_from_slice(g);
                add_to(*a, da);
            }
            Op::SliceCols { a, start } => {
                let (m, n) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let w = node.value.shape()[1];
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..w {
                        da[i * n + start + j] = g[i * w + j];
                    }
                }
                add_to(*a, da);
            }
            Op::IndexSelect { a, indices } => {
                let mut da = vec![0.0; nodes[*a].value.numel()];
                for (out_i, &src_i) in indices.iter().enumerate() {
                    da[src_i] += g[out_i];
                }
                add_to(*a, da);
            }
            Op::BroadcastAddRow { a, bias } => {
                add_to(*a, g.to_vec());
                let m = nodes[*bias].value.numel();
                let mut db = vec![0.0; m];
                for (i, gv) in g.iter().enumerate() {
                    db[i % m] += gv;
                }
                add_to(*bias, db);
            }
            Op::RowSum(a) | Op::RowMean(a) => {
                let m = *nodes[*a].value.shape().last().unwrap();
                let scale = if matches!(op, Op::RowMean(_)) {
                    1.0 / m as f64
                } else {
                    1.0
                };
                let mut da = Vec::with_capacity(nodes[*a].value.numel());
                for gv in g {
                    da.extend(std::iter::repeat(gv * scale).take(m));
                }
                add_to(*a, da);
            }
            Op::SumAll(a) => add_to(*a, vec![g[0]; nodes[*a].value.numel()]),
            Op::MeanAll(a) => {
                let n = nodes[*a].value.numel();
                add_to(*a, vec![g[0] / n as f64; n]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = nodes[*x].value.data();
                let gv = nodes[*gamma].value.data();
                let m = gv.len();
                let rows = xv.len() / m;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                for r in 0..rows {
                    let row = &xv[r * m..(r + 1) * m];
                    let grow = &g[r * m..(r + 1) * m];
                    let (mu, sd) = row_moments(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) / sd).collect();
                    let dy_g: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_dyg: f64 = dy_g.iter().sum::<f64>() / m as f64;
                    let mean_dyg_xhat: f64 =
                        dy_g.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for j in 0..m {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dx[r * m + j] = (dy_g[j] - mean_dyg - xhat[j] * mean_dyg_xhat) / sd;
                    }
                }
                add_to(*x, dx);
                add_to(*gamma, dgamma);
                add_to(*beta, dbeta);
            }
            Op::L2NormalizeRows { x, eps } => {
                let xv = nodes[*x].value.data();
                let yv = node.value.data();
                let m = *nodes[*x].value.shape().last().unwrap();
                let rows = xv.len() / m;
                let mut dx = vec![0.0; xv.len()];
                for r in 0..rows {
                    let row = &xv[r * m..(r + 1) * m];
                    let yrow = &yv[r * m..(r + 1) * m];
                    let grow = &g[r * m..(r + 1) * m];
                    let norm = l2_norm(row);
                    if norm >= *eps {
                        let gy: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dx[r * m + j] = (grow[j] - yrow[j] * gy) / norm;
                        }
                    } else {
                        for j in 0..m {
                            dx[r * m + j] = grow[j] / eps;
                        }
                    }
                }
                add_to(*x, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let yv = node.value.data();
                let (rows, m) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; yv.len()];
                for r in 0..rows {
                    let grow = &g[r * m..(r + 1) * m];
                    let yrow = &yv[r * m..(r + 1) * m];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..m {
                        dx[r * m + j] = grow[j] - yrow[j].exp() * gsum;
                    }
                }
                add_to(*a, dx);
            }
            Op::BilinearResample { map, points } => {
                let sh = nodes[*map].value.shape();
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let np = points.len();
                let mut dm = vec![0.0; c * h * w];
                for (p, &(y, x)) in points.iter().enumerate() {
                    let s = BilinearStencil::new(y, x, h, w);
                    for ch in 0..c {
                        s.scatter(&mut dm[ch * h * w..(ch + 1) * h * w], w, g[ch * np + p]);
                    }
                }
                add_to(*map, dm);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: &[f64], len: usize) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => {
            let mut v = Vec::with_capacity(len);
            v.extend_from_slice(contrib);
            *slot = Some(v);
        }
    }
}

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        sh => Err(TensorError::InvalidShape {
            op,
            shape: sh.to_vec(),
            expected: "rank-2 tensor".into(),
        }),
    }
}

fn rank3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] if *h > 0 && *w > 0 => Ok((*c, *h, *w)),
        sh => Err(TensorError::InvalidShape {
            op,
            shape: sh.to_vec(),
            expected: "rank-3 [c, h, w] tensor".into(),
        }),
    }
}

fn trailing_dim(t: &Tensor, op: &'static str) -> Result<usize> {
    match t.shape().last() {
        Some(&m) if m > 0 => Ok(m),
        _ => Err(TensorError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            expected: "nonempty trailing axis".into(),
        }),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let m = row.len() as f64;
    let mu = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
    (mu, (var + eps).sqrt())
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - max - lse;
    }
}

fn recip_fwd(x: f64) -> f64 {
    let guarded = if x.abs() < RECIP_FLOOR {
        RECIP_FLOOR.copysign(x)
    } else {
        x
    };
    1.0 / guarded
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_COEF * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_COEF * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Four-corner bilinear interpolation weights for one clamped sample point.
struct BilinearStencil {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: f64,
    fx: f64,
}

impl BilinearStencil {
    fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let yc = y.clamp(0.0, (h - 1) as f64);
        let xc = x.clamp(0.0, (w - 1) as f64);
        let y0 = yc.floor() as usize;
        let x0 = xc.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        BilinearStencil {
            y0,
            y1,
            x0,
            x1,
            fy: yc - y0 as f64,
            fx: xc - x0 as f64,
        }
    }

    fn gather(&self, plane: &[f64], w: usize) -> f64 {
        let (fy, fx) = (self.fy, self.fx);
        (1.0 - fy) * (1.0 - fx) * plane[self.y0 * w + self.x0]
            + (1.0 - fy) * fx * plane[self.y0 * w + self.x1]
            + fy * (1.0 - fx) * plane[self.y1 * w + self.x0]
            + fy * fx * plane[self.y1 * w + self.x1]
    }

    fn scatter(&self, plane: &mut [f64], w: usize, g: f64) {
        let (fy, fx) = (self.fy, self.fx);
        plane[self.y0 * w + self.x0] += (1.0 - fy) * (1.0 - fx) * g;
        plane[self.y0 * w + self.x1] += (1.0 - fy) * fx * g;
        plane[self.y1 * w + self.x0] += fy * (1.0 - fx) * g;
        plane[self.y1 * w + self.x1] += fy * fx * g;
    }
}
