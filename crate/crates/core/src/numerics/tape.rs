//! Reverse-mode differentiation over a recorded operation tape.
//!
//! The forward pass pushes tensors into an arena and records one entry per
//! primitive. `backward` replays the records in reverse, accumulating
//! vector-Jacobian products into per-node gradient slots. Operands are
//! always recorded before their results, so the reverse sweep visits every
//! node exactly once and never reads a slot before it was written.

use crate::error::{Error, Result};
use crate::numerics::tensor::{self, Tensor2D};

/// Index of a value slot on the tape.
pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    /// out = x @ w + b (b broadcast over rows)
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    SliceCols { x: NodeId, start: usize, len: usize },
    GatherRows { x: NodeId, idx: Vec<usize> },
    L2NormalizeRows { x: NodeId },
    /// out = a @ b^T
    MatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Exp { x: NodeId },
    Sqrt { x: NodeId },
    Abs { x: NodeId },
    RowSum { x: NodeId },
    SumAll { x: NodeId },
    /// Row log-sum-exp over entries with mask > 0; mask is a constant.
    MaskedRowLse { x: NodeId, mask: Tensor2D },
    /// sum(w * x) with constant coefficients w.
    WeightedSum { x: NodeId, w: Tensor2D },
}

struct Record {
    op: Op,
    out: NodeId,
}

/// Records a forward computation and replays it backward for gradients.
pub struct Tape {
    values: Vec<Tensor2D>,
    records: Vec<Record>,
    grads: Vec<Option<Tensor2D>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Registers a leaf tensor (input or parameter) and returns its slot.
    pub fn input(&mut self, value: Tensor2D) -> NodeId {
        self.push_value(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.values[id]
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id].shape(), (1, 1));
        self.values[id].data()[0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push_value(&mut self, value: Tensor2D) -> NodeId {
        self.values.push(value);
        self.grads.push(None);
        self.values.len() - 1
    }

    fn push(&mut self, op: Op, value: Tensor2D) -> NodeId {
        let out = self.push_value(value);
        // Topological order: every operand slot precedes the result slot.
        debug_assert!(match &op {
            Op::Affine { x, w, b } => *x < out && *w < out && *b < out,
            Op::MatmulNt { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } =>
                *a < out && *b < out,
            Op::Relu { x }
            | Op::Clamp { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::L2NormalizeRows { x }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Exp { x }
            | Op::Sqrt { x }
            | Op::Abs { x }
            | Op::RowSum { x }
            | Op::SumAll { x }
            | Op::MaskedRowLse { x, .. }
            | Op::WeightedSum { x, .. } => *x < out,
        });
        self.records.push(Record { op, out });
        out
    }

    // ── Forward primitives ──────────────────────────────────────────

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::affine(&self.values[x], &self.values[w], &self.values[b])?;
        Ok(self.push(Op::Affine { x, w, b }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = tensor::relu(&self.values[x]);
        self.push(Op::Relu { x }, value)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = tensor::clamp(&self.values[x], lo, hi);
        self.push(Op::Clamp { x, lo, hi }, value)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let value = self.values[x].slice_cols(start, len)?;
        Ok(self.push(Op::SliceCols { x, start, len }, value))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let value = self.values[x].gather_rows(idx)?;
        Ok(self.push(Op::GatherRows { x, idx: idx.to_vec() }, value))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::l2_normalize_rows(&self.values[x])?;
        Ok(self.push(Op::L2NormalizeRows { x }, value))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul_nt(&self.values[a], &self.values[b])?;
        Ok(self.push(Op::MatmulNt { a, b }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::add(&self.values[a], &self.values[b])?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::sub(&self.values[a], &self.values[b])?;
        Ok(self.push(Op::Sub { a, b }, value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::mul(&self.values[a], &self.values[b])?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = tensor::scale(&self.values[x], c);
        self.push(Op::Scale { x, c }, value)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = tensor::add_scalar(&self.values[x], c);
        self.push(Op::AddScalar { x }, value)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = tensor::exp(&self.values[x]);
        self.push(Op::Exp { x }, value)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let value = tensor::sqrt(&self.values[x]);
        self.push(Op::Sqrt { x }, value)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = tensor::abs(&self.values[x]);
        self.push(Op::Abs { x }, value)
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let value = tensor::row_sum(&self.values[x]);
        self.push(Op::RowSum { x }, value)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Tensor2D::filled(1, 1, tensor::sum_all(&self.values[x]));
        self.push(Op::SumAll { x }, value)
    }

    pub fn masked_row_lse(&mut self, x: NodeId, mask: Tensor2D) -> Result<NodeId> {
        let value = tensor::masked_row_lse(&self.values[x], &mask)?;
        Ok(self.push(Op::MaskedRowLse { x, mask }, value))
    }

    pub fn weighted_sum(&mut self, x: NodeId, w: Tensor2D) -> Result<NodeId> {
        let value = Tensor2D::filled(1, 1, tensor::weighted_sum(&self.values[x], &w)?);
        Ok(self.push(Op::WeightedSum { x, w }, value))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Backpropagates from a scalar loss node. Gradients of nodes the loss
    /// does not depend on stay zero.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss].shape() != (1, 1) {
            let (r, c) = self.values[loss].shape();
            return Err(Error::Precondition(format!(
                "backward requires a scalar loss node, got {r}x{c}"
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss] = Some(Tensor2D::filled(1, 1, 1.0));

        for rec_idx in (0..self.records.len()).rev() {
            let out = self.records[rec_idx].out;
            let Some(g) = self.grads[out].take() else {
                continue;
            };
            self.apply_vjp(rec_idx, &g)?;
            self.grads[out] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. node `id` (zeros if the
    /// loss did not depend on it).
    pub fn grad(&self, id: NodeId) -> Tensor2D {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.values[id].shape();
                Tensor2D::zeros(r, c)
            }
        }
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor2D) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            None => self.grads[id] = Some(delta.clone()),
        }
    }

    fn apply_vjp(&mut self, rec_idx: usize, g: &Tensor2D) -> Result<()> {
        let out = self.records[rec_idx].out;
        match &self.records[rec_idx].op {
            Op::Affine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let gx = tensor::matmul_nt(g, &self.values[w])?;
                let gw = tensor::matmul_tn(&self.values[x], g)?;
                let mut gb = Tensor2D::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (acc, v) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                self.accumulate(x, &gx);
                self.accumulate(w, &gw);
                self.accumulate(b, &gb);
            }
            Op::Relu { x } => {
                let x = *x;
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(self.values[x].data()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::Clamp { x, lo, hi } => {
                let (x, lo, hi) = (*x, *lo, *hi);
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(self.values[x].data()) {
                    if *xv < lo || *xv > hi {
                        *gv = 0.0;
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (r, c) = self.values[x].shape();
                let mut gx = Tensor2D::zeros(r, c);
                for i in 0..r {
                    gx.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(x, &gx);
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let (r, c) = self.values[x].shape();
                let mut gx = Tensor2D::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for (acc, v) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::L2NormalizeRows { x } => {
                let x = *x;
                let norms = tensor::row_norms(&self.values[x]);
                let y = &self.values[out];
                let mut gx = Tensor2D::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, slot) in gx.row_mut(i).iter_mut().enumerate() {
                        *slot = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::MatmulNt { a, b } => {
                let (a, b) = (*a, *b);
                let ga = tensor::matmul(g, &self.values[b])?;
                let gb = tensor::matmul_tn(g, &self.values[a])?;
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                let neg = tensor::scale(g, -1.0);
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let ga = tensor::mul(g, &self.values[b])?;
                let gb = tensor::mul(g, &self.values[a])?;
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let gx = tensor::scale(g, c);
                self.accumulate(x, &gx);
            }
            Op::AddScalar { x } => {
                let x = *x;
                self.accumulate(x, g);
            }
            Op::Exp { x } => {
                let x = *x;
                let gx = tensor::mul(g, &self.values[out])?;
                self.accumulate(x, &gx);
            }
            Op::Sqrt { x } => {
                let x = *x;
                let mut gx = g.clone();
                for (gv, ov) in gx.data_mut().iter_mut().zip(self.values[out].data()) {
                    *gv /= 2.0 * ov;
                }
                self.accumulate(x, &gx);
            }
            Op::Abs { x } => {
                let x = *x;
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(self.values[x].data()) {
                    // Subgradient 0 at the kink.
                    *gv *= if *xv > 0.0 {
                        1.0
                    } else if *xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                self.accumulate(x, &gx);
            }
            Op::RowSum { x } => {
                let x = *x;
                let (r, c) = self.values[x].shape();
                let mut gx = Tensor2D::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    for slot in gx.row_mut(i) {
                        *slot = gi;
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::SumAll { x } => {
                let x = *x;
                let (r, c) = self.values[x].shape();
                let gx = Tensor2D::filled(r, c, g.data()[0]);
                self.accumulate(x, &gx);
            }
            Op::MaskedRowLse { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                let xv = self.values[x].clone();
                let lse = &self.values[out];
                let mut gx = Tensor2D::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let gi = g.get(i, 0);
                    let li = lse.get(i, 0);
                    for j in 0..xv.cols() {
                        if mask.get(i, j) > 0.0 {
                            gx.set(i, j, gi * (xv.get(i, j) - li).exp());
                        }
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::WeightedSum { x, w } => {
                let x = *x;
                let gx = tensor::scale(w, g.data()[0]);
                self.accumulate(x, &gx);
            }
        }
        Ok(())
    }
}
