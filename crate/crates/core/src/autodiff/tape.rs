use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows; one output row.
    Rows,
    /// Reduce over columns; one output column.
    Cols,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (divides by `n − 1`).
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add {
        a: Var,
        b: Var,
        broadcast_row: bool,
    },
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Relu(Var),
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segs: Arc<[usize]>,
    },
    SegmentSum {
        x: Var,
        segs: Arc<[usize]>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        x: Var,
        keep: Vec<bool>,
        scale: f64,
    },
    Square(Var),
    Sum(Var),
    Sqrt(Var),
    Recip(Var),
    ClampMin {
        x: Var,
        min: f64,
    },
    Mul {
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    SelectRows {
        x: Var,
        idx: Arc<[usize]>,
    },
    RowBlock {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    BallProject {
        x: Var,
        segs: Arc<[usize]>,
        factors: Vec<f64>,
        denoms: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    None,
    Column,
    Row,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumer and [`Tape::backward`] can sweep the node list once in reverse.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates: nothing is kept for the backward pass.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm(
            self.value(a).as_slice(),
            sa,
            false,
            self.value(b).as_slice(),
            sb,
            false,
            out.as_mut_slice(),
            false,
        );
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum. `b` may also be a `1×cols` row broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast_row = if sa == sb {
            false
        } else if sb.0 == 1 && sb.1 == sa.1 {
            true
        } else {
            return Err(mismatch("add", format!("{sa:?} + {sb:?}")));
        };
        let mut out = self.value(a).clone();
        let bv = self.value(b).as_slice();
        if broadcast_row {
            for row in out.as_mut_slice().chunks_mut(sa.1.max(1)) {
                for (o, x) in row.iter_mut().zip(bv) {
                    *o += x;
                }
            }
        } else {
            for (o, x) in out.as_mut_slice().iter_mut().zip(bv) {
                *o += x;
            }
        }
        Ok(self.push(
            out,
            Op::Add {
                a,
                b,
                broadcast_row,
            },
            &[a, b],
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).as_slice().iter().map(|x| x * s).collect();
        let out = Tensor::new(r, c, data).expect("shape preserved");
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(mismatch("concat", "no inputs".into()));
        }
        match axis {
            Axis::Cols => {
                let rows = self.shape(parts[0]).0;
                if let Some(p) = parts.iter().find(|p| self.shape(**p).0 != rows) {
                    return Err(mismatch(
                        "concat",
                        format!("rows {rows} vs {:?}", self.shape(*p)),
                    ));
                }
                let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row(i));
                    }
                }
                let out = Tensor::new(rows, cols, data)?;
                Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
            }
            Axis::Rows => {
                let cols = self.shape(parts[0]).1;
                if let Some(p) = parts.iter().find(|p| self.shape(**p).1 != cols) {
                    return Err(mismatch(
                        "concat",
                        format!("cols {cols} vs {:?}", self.shape(*p)),
                    ));
                }
                let rows: usize = parts.iter().map(|p| self.shape(*p).0).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for p in parts {
                    data.extend_from_slice(self.value(*p).as_slice());
                }
                let out = Tensor::new(rows, cols, data)?;
                Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
            }
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .as_slice()
            .iter()
            .map(|x| x.max(0.0))
            .collect();
        self.push(Tensor::new(r, c, data).expect("shape"), Op::Relu(a), &[a])
    }

    fn check_segments(
        &self,
        op: &'static str,
        x: Var,
        segs: &[usize],
    ) -> Result<(), AutodiffError> {
        let total: usize = segs.iter().sum();
        if total != self.shape(x).0 || segs.contains(&0) {
            return Err(mismatch(
                op,
                format!(
                    "segments {total} rows (or empty segment) vs {:?}",
                    self.shape(x)
                ),
            ));
        }
        Ok(())
    }

    /// Column-wise max over consecutive row groups of the given lengths.
    /// Ties resolve to the lowest row index.
    pub fn segment_max(&mut self, x: Var, segs: &Arc<[usize]>) -> Result<Var, AutodiffError> {
        self.check_segments("segment_max", x, segs)?;
        let cols = self.shape(x).1;
        let xv = self.value(x);
        let mut data = Vec::with_capacity(segs.len() * cols);
        let mut argmax = Vec::with_capacity(segs.len() * cols);
        let mut start = 0;
        for &len in segs.iter() {
            for c in 0..cols {
                let mut best = start;
                let mut best_val = xv.get(start, c);
                for r in start + 1..start + len {
                    let v = xv.get(r, c);
                    if v > best_val {
                        best_val = v;
                        best = r;
                    }
                }
                data.push(best_val);
                argmax.push(best);
            }
            start += len;
        }
        let out = Tensor::new(segs.len(), cols, data)?;
        Ok(self.push(out, Op::SegmentMax { x, argmax }, &[x]))
    }

    pub fn segment_mean(&mut self, x: Var, segs: &Arc<[usize]>) -> Result<Var, AutodiffError> {
        let sum = self.segment_reduce("segment_mean", x, segs)?;
        let cols = self.shape(x).1;
        let mut out = sum;
        for (g, &len) in segs.iter().enumerate() {
            for v in &mut out.as_mut_slice()[g * cols..(g + 1) * cols] {
                *v /= len as f64;
            }
        }
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                segs: segs.clone(),
            },
            &[x],
        ))
    }

    pub fn segment_sum(&mut self, x: Var, segs: &Arc<[usize]>) -> Result<Var, AutodiffError> {
        let out = self.segment_reduce("segment_sum", x, segs)?;
        Ok(self.push(
            out,
            Op::SegmentSum {
                x,
                segs: segs.clone(),
            },
            &[x],
        ))
    }

    fn segment_reduce(
        &self,
        op: &'static str,
        x: Var,
        segs: &[usize],
    ) -> Result<Tensor, AutodiffError> {
        self.check_segments(op, x, segs)?;
        let cols = self.shape(x).1;
        let xv = self.value(x);
        let mut out = Tensor::zeros(segs.len(), cols);
        let mut r = 0;
        for (g, &len) in segs.iter().enumerate() {
            let acc = &mut out.as_mut_slice()[g * cols..(g + 1) * cols];
            for _ in 0..len {
                for (a, v) in acc.iter_mut().zip(xv.row(r)) {
                    *a += v;
                }
                r += 1;
            }
        }
        Ok(out)
    }

    pub fn reduce_max(&mut self, x: Var, axis: Axis) -> Result<Var, AutodiffError> {
        match axis {
            Axis::Rows => {
                let segs: Arc<[usize]> = vec![self.shape(x).0].into();
                self.segment_max(x, &segs)
            }
            Axis::Cols => {
                let t = self.transpose(x);
                let m = self.reduce_max(t, Axis::Rows)?;
                Ok(self.transpose(m))
            }
        }
    }

    pub fn reduce_mean(&mut self, x: Var, axis: Axis) -> Result<Var, AutodiffError> {
        match axis {
            Axis::Rows => {
                let segs: Arc<[usize]> = vec![self.shape(x).0].into();
                self.segment_mean(x, &segs)
            }
            Axis::Cols => {
                let t = self.transpose(x);
                let m = self.reduce_mean(t, Axis::Rows)?;
                Ok(self.transpose(m))
            }
        }
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize, AutodiffError> {
        let c = self.shape(x).1;
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(mismatch(
                "batchnorm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(c)
    }

    /// Training-mode batch normalization over rows (the batch axis).
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), AutodiffError> {
        let c = self.check_bn(x, gamma, beta)?;
        let n = self.shape(x).0;
        if n < 2 {
            return Err(AutodiffError::DegenerateBatch { size: n });
        }
        let xv = self.value(x).as_slice();
        let mut mean = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / n as f64 + eps).sqrt())
            .collect();
        let var_unbiased: Vec<f64> = var.iter().map(|s| s / (n - 1) as f64).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
                train: true,
            },
            &[x, gamma, beta],
        );
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let c = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(mismatch(
                "batchnorm",
                format!("running stats for {c} channels"),
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, running_mean, &inv_std);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            inv_std,
            train: false,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> Tensor {
        let (n, c) = self.shape(x);
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        // y = x·(γ/σ) + (β − μγ/σ)
        let mul: Vec<f64> = g.iter().zip(inv_std).map(|(g, s)| g * s).collect();
        let add: Vec<f64> = b
            .iter()
            .zip(mean)
            .zip(&mul)
            .map(|((b, m), k)| b - m * k)
            .collect();
        let mut out = self.value(x).clone();
        for row in out.as_mut_slice().chunks_exact_mut(c.max(1)) {
            for ((o, k), a) in row.iter_mut().zip(&mul).zip(&add) {
                *o = *o * k + a;
            }
        }
        debug_assert_eq!(out.shape(), (n, c));
        out
    }

    /// Inverted dropout with an explicit keep mask source.
    ///
    /// `uniforms` must yield one value in `[0, 1)` per element; an element is
    /// dropped when its uniform is below `rate`.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        uniforms: impl FnMut() -> f64,
    ) -> Result<Var, AutodiffError> {
        if !train || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(mismatch("dropout", format!("rate {rate} must be < 1")));
        }
        let scale = 1.0 / (1.0 - rate);
        let mut draw = uniforms;
        let mut out = self.value(x).clone();
        let mut keep = Vec::with_capacity(out.len());
        for o in out.as_mut_slice() {
            let k = draw() >= rate;
            keep.push(k);
            *o = if k { *o * scale } else { 0.0 };
        }
        Ok(self.push(out, Op::Dropout { x, keep, scale }, &[x]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.unary(a, |x| x.max(min), Op::ClampMin { x: a, min })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).as_slice().iter().map(|x| f(*x)).collect();
        self.push(Tensor::new(r, c, data).expect("shape"), op, &[a])
    }

    /// Sum of all elements as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Elementwise product. `b` may be `rows×1` (broadcast over columns) or
    /// `1×cols` (broadcast over rows).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bcast = if sa == sb {
            Bcast::None
        } else if sb == (sa.0, 1) {
            Bcast::Column
        } else if sb == (1, sa.1) {
            Bcast::Row
        } else {
            return Err(mismatch("mul", format!("{sa:?} * {sb:?}")));
        };
        let av = self.value(a);
        let bv = self.value(b);
        let data = (0..sa.0 * sa.1)
            .map(|k| av.as_slice()[k] * bv.as_slice()[bcast_index(bcast, k, sa.1)])
            .collect();
        let out = Tensor::new(sa.0, sa.1, data)?;
        Ok(self.push(out, Op::Mul { a, b, bcast }, &[a, b]))
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&mut self, x: Var, idx: &Arc<[usize]>) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(mismatch(
                "select_rows",
                format!("index {bad} out of {r} rows"),
            ));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(idx.len(), c, data)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.clone(),
            },
            &[x],
        ))
    }

    /// Contiguous rows `start..start+len`.
    pub fn row_block(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(mismatch(
                "row_block",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let data = self.value(x).as_slice()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(len, c, data)?;
        Ok(self.push(out, Op::RowBlock { x, start }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let out = Tensor::from_fn(c, r, |i, j| xv.get(j, i));
        self.push(out, Op::Transpose(x), &[x])
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, AutodiffError> {
        let out = Tensor::new(rows, cols, self.value(x).as_slice().to_vec()).map_err(|_| {
            mismatch(
                "reshape",
                format!("{:?} -> ({rows}, {cols})", self.shape(x)),
            )
        })?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Scales row group `g` onto the ball `Σ x² ≤ budgets[g]` when it lies
    /// outside: `x ← x · sqrt(budget / (Σ x² + eps))`.
    pub fn ball_project(
        &mut self,
        x: Var,
        segs: &Arc<[usize]>,
        budgets: &[f64],
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        self.check_segments("ball_project", x, segs)?;
        if budgets.len() != segs.len() {
            return Err(mismatch(
                "ball_project",
                format!("{} budgets for {} segments", budgets.len(), segs.len()),
            ));
        }
        let c = self.shape(x).1;
        let mut out = self.value(x).clone();
        let mut factors = Vec::with_capacity(segs.len());
        let mut denoms = Vec::with_capacity(segs.len());
        let mut start = 0;
        for (&len, &budget) in segs.iter().zip(budgets) {
            let block = &mut out.as_mut_slice()[start * c..(start + len) * c];
            let power: f64 = block.iter().map(|v| v * v).sum();
            if power > budget {
                let s = (budget / (power + eps)).sqrt();
                block.iter_mut().for_each(|v| *v *= s);
                factors.push(s);
            } else {
                factors.push(1.0);
            }
            denoms.push(power + eps);
            start += len;
        }
        Ok(self.push(
            out,
            Op::BallProject {
                x,
                segs: segs.clone(),
                factors,
                denoms,
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.shape(loss) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.shape(loss),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: self.collect_leaves(grads),
            });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads: self.collect_leaves(grads),
        })
    }

    fn collect_leaves(&self, grads: Vec<Option<Vec<f64>>>) -> Vec<Option<Tensor>> {
        grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => {
                    let (r, c) = n.value.shape();
                    Some(
                        Tensor::new(r, c, g.unwrap_or_else(|| vec![0.0; r * c]))
                            .expect("grad shape"),
                    )
                }
                _ => None,
            })
            .collect()
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let sg = (sa.0, sb.1);
                if needs(*a) {
                    let acc = slot(grads, *a, sa.0 * sa.1);
                    gemm(g, sg, false, self.value(*b).as_slice(), sb, true, acc, true);
                }
                if needs(*b) {
                    let acc = slot(grads, *b, sb.0 * sb.1);
                    gemm(self.value(*a).as_slice(), sa, true, g, sg, false, acc, true);
                }
            }
            Op::Add {
                a,
                b,
                broadcast_row,
            } => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if needs(*b) {
                    let sb = self.shape(*b);
                    let acc = slot(grads, *b, sb.0 * sb.1);
                    if *broadcast_row {
                        for row in g.chunks(sb.1.max(1)) {
                            axpy(acc, row, 1.0);
                        }
                    } else {
                        axpy(acc, g, 1.0);
                    }
                }
            }
            Op::Scale(a, s) => axpy(slot(grads, *a, g.len()), g, *s),
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p).1;
                    if needs(*p) {
                        let acc = slot(grads, *p, rows * c);
                        for i in 0..rows {
                            axpy(
                                &mut acc[i * c..(i + 1) * c],
                                &g[i * total + offset..i * total + offset + c],
                                1.0,
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if needs(*p) {
                        axpy(slot(grads, *p, n), &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).as_slice();
                let acc = slot(grads, *a, g.len());
                for ((o, gi), xi) in acc.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                let (r, c) = self.shape(*x);
                let acc = slot(grads, *x, r * c);
                for (k, (&row, gi)) in argmax.iter().zip(g).enumerate() {
                    acc[row * c + k % c] += gi;
                }
            }
            Op::SegmentMean { x, segs } | Op::SegmentSum { x, segs } => {
                let mean = matches!(node.op, Op::SegmentMean { .. });
                let (r, c) = self.shape(*x);
                let acc = slot(grads, *x, r * c);
                let mut row = 0;
                for (s, &len) in segs.iter().enumerate() {
                    let w = if mean { 1.0 / len as f64 } else { 1.0 };
                    let gs = &g[s * c..(s + 1) * c];
                    for _ in 0..len {
                        axpy(&mut acc[row * c..(row + 1) * c], gs, w);
                        row += 1;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (n, c) = self.shape(*x);
                let xv = self.value(*x).as_slice();
                let gam = self.value(*gamma).as_slice();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, xrow) in g.chunks_exact(c).zip(xv.chunks_exact(c)) {
                    for ((((sg, sgx), gi), xi), (m, s)) in sum_g
                        .iter_mut()
                        .zip(sum_gx.iter_mut())
                        .zip(grow)
                        .zip(xrow)
                        .zip(mean.iter().zip(inv_std))
                    {
                        *sg += gi;
                        *sgx += gi * (xi - m) * s;
                    }
                }
                if needs(*gamma) {
                    axpy(slot(grads, *gamma, c), &sum_gx, 1.0);
                }
                if needs(*beta) {
                    axpy(slot(grads, *beta, c), &sum_g, 1.0);
                }
                if needs(*x) {
                    let acc = slot(grads, *x, n * c);
                    let k: Vec<f64> = gam.iter().zip(inv_std).map(|(g, s)| g * s).collect();
                    if *train {
                        // dx = γσ⁻¹(g − mean(g) − x̂·mean(g·x̂))
                        let nf = n as f64;
                        let mg: Vec<f64> = sum_g.iter().map(|v| v / nf).collect();
                        let mgx: Vec<f64> = sum_gx.iter().map(|v| v / nf).collect();
                        for ((arow, grow), xrow) in acc
                            .chunks_exact_mut(c)
                            .zip(g.chunks_exact(c))
                            .zip(xv.chunks_exact(c))
                        {
                            for k_ in 0..c {
                                let xhat = (xrow[k_] - mean[k_]) * inv_std[k_];
                                arow[k_] += k[k_] * (grow[k_] - mg[k_] - xhat * mgx[k_]);
                            }
                        }
                    } else {
                        for (arow, grow) in acc.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for ((o, gi), ki) in arow.iter_mut().zip(grow).zip(&k) {
                                *o += gi * ki;
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, keep, scale } => {
                let acc = slot(grads, *x, g.len());
                for ((o, gi), k) in acc.iter_mut().zip(g).zip(keep) {
                    if *k {
                        *o += gi * scale;
                    }
                }
            }
            Op::Square(a) => {
                let x = self.value(*a).as_slice();
                let acc = slot(grads, *a, g.len());
                for ((o, gi), xi) in acc.iter_mut().zip(g).zip(x) {
                    *o += 2.0 * xi * gi;
                }
            }
            Op::Sqrt(a) => {
                let y = node.value.as_slice();
                let acc = slot(grads, *a, g.len());
                for ((o, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *o += gi * 0.5 / yi;
                }
            }
            Op::Recip(a) => {
                let y = node.value.as_slice();
                let acc = slot(grads, *a, g.len());
                for ((o, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *o -= gi * yi * yi;
                }
            }
            Op::ClampMin { x, min } => {
                let xv = self.value(*x).as_slice();
                let acc = slot(grads, *x, g.len());
                for ((o, gi), xi) in acc.iter_mut().zip(g).zip(xv) {
                    if *xi >= *min {
                        *o += gi;
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let acc = slot(grads, *a, n);
                acc.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mul { a, b, bcast } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let av = self.value(*a).as_slice();
                let bv = self.value(*b).as_slice();
                if needs(*a) {
                    let acc = slot(grads, *a, av.len());
                    for (k, o) in acc.iter_mut().enumerate() {
                        *o += g[k] * bv[bcast_index(*bcast, k, sa.1)];
                    }
                }
                if needs(*b) {
                    let acc = slot(grads, *b, sb.0 * sb.1);
                    for k in 0..av.len() {
                        acc[bcast_index(*bcast, k, sa.1)] += g[k] * av[k];
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                let (r, c) = self.shape(*x);
                let acc = slot(grads, *x, r * c);
                for (k, &i) in idx.iter().enumerate() {
                    axpy(&mut acc[i * c..(i + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                }
            }
            Op::RowBlock { x, start } => {
                let (r, c) = self.shape(*x);
                let acc = slot(grads, *x, r * c);
                axpy(&mut acc[start * c..start * c + g.len()], g, 1.0);
            }
            Op::Transpose(x) => {
                let (r, c) = self.shape(*x);
                let acc = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        acc[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(x) => axpy(slot(grads, *x, g.len()), g, 1.0),
            Op::BallProject {
                x,
                segs,
                factors,
                denoms,
            } => {
                let c = self.shape(*x).1;
                let xv = self.value(*x).as_slice();
                let acc = slot(grads, *x, xv.len());
                let mut start = 0;
                for ((&len, &s), &den) in segs.iter().zip(factors).zip(denoms) {
                    let range = start * c..(start + len) * c;
                    let gx = &g[range.clone()];
                    let xs = &xv[range.clone()];
                    let a = &mut acc[range];
                    if s == 1.0 {
                        axpy(a, gx, 1.0);
                    } else {
                        let dot: f64 = gx.iter().zip(xs).map(|(p, q)| p * q).sum();
                        let k = s * dot / den;
                        for ((o, gi), xi) in a.iter_mut().zip(gx).zip(xs) {
                            *o += s * gi - k * xi;
                        }
                    }
                    start += len;
                }
            }
        }
    }
}

fn bcast_index(b: Bcast, k: usize, cols: usize) -> usize {
    match b {
        Bcast::None => k,
        Bcast::Column => k / cols,
        Bcast::Row => k % cols,
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| vec![0.0; len])
        .as_mut_slice()
}

fn axpy(acc: &mut [f64], x: &[f64], alpha: f64) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Gradients of every trainable leaf after a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
