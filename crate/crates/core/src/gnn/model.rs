use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{build_graph, GraphBatch, ProblemGraph};
use crate::autodiff::{
    AutodiffError, Axis, BatchNormState, BatchStats, DropoutKey, Tape, Tensor, Var,
};
use crate::numerics::{real_embed, ComplexVector, C64};
use crate::reform::QuadraticSubproblem;

/// Layer widths. Parameter count depends only on these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub node_in: usize,
    pub edge_in: usize,
    pub enc_hidden: usize,
    pub enc_out: usize,
    pub conv_hidden: usize,
    pub conv_out: usize,
    pub layers: usize,
    pub out: usize,
}

impl ModelDims {
    pub const STANDARD: ModelDims = ModelDims {
        node_in: 2,
        edge_in: 2,
        enc_hidden: 16,
        enc_out: 8,
        conv_hidden: 32,
        conv_out: 16,
        layers: 3,
        out: 2,
    };

    /// Input width of EdgeConv layer `k` (0-based): `[h_i ‖ h_j ‖ e⁰_ij]`.
    pub fn conv_in(&self, k: usize) -> usize {
        let h = if k == 0 {
            self.enc_out
        } else {
            2 * self.conv_out
        };
        2 * h + self.enc_out
    }

    /// Width of `[h_K ‖ h⁰]` fed to the decoder.
    pub fn final_width(&self) -> usize {
        2 * self.conv_out + self.enc_out
    }

    pub fn as_array(&self) -> [usize; 8] {
        [
            self.node_in,
            self.edge_in,
            self.enc_hidden,
            self.enc_out,
            self.conv_hidden,
            self.conv_out,
            self.layers,
            self.out,
        ]
    }

    pub fn from_array(a: [usize; 8]) -> Self {
        Self {
            node_in: a[0],
            edge_in: a[1],
            enc_hidden: a[2],
            enc_out: a[3],
            conv_hidden: a[4],
            conv_out: a[5],
            layers: a[6],
            out: a[7],
        }
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Affine map `x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut u = || rng.random_range(-bound..bound);
        Self {
            w: Tensor::from_fn(fan_in, fan_out, |_, _| u()),
            b: Tensor::from_fn(1, fan_out, |_, _| u()),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols()
    }
}

/// Linear → BatchNorm → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBn {
    pub linear: Linear,
    pub bn: BatchNormState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseBn>,
}

impl Mlp {
    fn init(rng: &mut ChaCha8Rng, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| DenseBn {
                linear: Linear::init(rng, w[0], w[1]),
                bn: BatchNormState::new(w[1]),
            })
            .collect();
        Self { layers }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train(DropoutKey),
    Eval,
}

/// Output of a forward pass.
#[derive(Debug)]
pub struct Forward {
    /// Projected re/im pairs, one row per variable node, graph by graph.
    pub v: Var,
    /// Parameter handles in [`GnnModel::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    pub dims: ModelDims,
    pub node_encoder: Mlp,
    pub edge_encoder: Mlp,
    pub convs: Vec<Mlp>,
    pub decoder: Linear,
    pub dropout_mlp: f64,
    pub dropout_decoder: f64,
    pub projection_eps: f64,
}

pub const DROPOUT_MLP: f64 = 0.1;
pub const DROPOUT_DECODER: f64 = 0.2;
pub const PROJECTION_EPS: f64 = 1e-12;

struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        self.at += 1;
        self.vars[self.at - 1]
    }
}

struct Pass<'a> {
    tape: &'a mut Tape,
    mode: Mode,
    bn: Vec<&'a BatchNormState>,
    bn_at: usize,
    site: u64,
    stats: Vec<BatchStats>,
}

impl Pass<'_> {
    fn bn_relu_drop(
        &mut self,
        pre: Var,
        gamma: Var,
        beta: Var,
        rate: f64,
    ) -> Result<Var, AutodiffError> {
        let state = self.bn[self.bn_at];
        self.bn_at += 1;
        let normed = match self.mode {
            Mode::Train(_) => {
                let (y, stats) = self.tape.batchnorm_train(pre, gamma, beta, state.eps)?;
                self.stats.push(stats);
                y
            }
            Mode::Eval => self.tape.batchnorm_eval(
                pre,
                gamma,
                beta,
                &state.running_mean,
                &state.running_var,
                state.eps,
            )?,
        };
        let act = self.tape.relu(normed);
        self.dropout(act, rate)
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, AutodiffError> {
        self.site += 1;
        match self.mode {
            Mode::Train(key) => {
                self.tape
                    .dropout(x, rate, true, key.with_layer(self.site).stream())
            }
            Mode::Eval => Ok(x),
        }
    }

    fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let xw = self.tape.matmul(x, w)?;
        self.tape.add(xw, b)
    }

    fn mlp(
        &mut self,
        x: Var,
        depth: usize,
        p: &mut Cursor,
        rate: f64,
    ) -> Result<Var, AutodiffError> {
        let mut h = x;
        for _ in 0..depth {
            let (w, b, g, beta) = (p.next(), p.next(), p.next(), p.next());
            let pre = self.affine(h, w, b)?;
            h = self.bn_relu_drop(pre, g, beta, rate)?;
        }
        Ok(h)
    }
}

impl GnnModel {
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let node_encoder = Mlp::init(&mut rng, &[dims.node_in, dims.enc_hidden, dims.enc_out]);
        let edge_encoder = Mlp::init(&mut rng, &[dims.edge_in, dims.enc_hidden, dims.enc_out]);
        let convs = (0..dims.layers)
            .map(|k| {
                Mlp::init(
                    &mut rng,
                    &[dims.conv_in(k), dims.conv_hidden, dims.conv_out],
                )
            })
            .collect();
        let decoder = Linear::init(&mut rng, dims.final_width(), dims.out);
        Self {
            dims,
            node_encoder,
            edge_encoder,
            convs,
            decoder,
            dropout_mlp: DROPOUT_MLP,
            dropout_decoder: DROPOUT_DECODER,
            projection_eps: PROJECTION_EPS,
        }
    }

    fn mlps(&self) -> impl Iterator<Item = &Mlp> {
        [&self.node_encoder, &self.edge_encoder]
            .into_iter()
            .chain(&self.convs)
    }

    fn mlps_mut(&mut self) -> impl Iterator<Item = &mut Mlp> {
        [&mut self.node_encoder, &mut self.edge_encoder]
            .into_iter()
            .chain(&mut self.convs)
    }

    /// Learnable tensors in checkpoint order: for every MLP layer
    /// (node encoder, edge encoder, EdgeConv 1..K) `W, b, γ, β`, then the
    /// decoder `W, b`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for mlp in self.mlps() {
            for l in &mlp.layers {
                out.extend([&l.linear.w, &l.linear.b, &l.bn.gamma, &l.bn.beta]);
            }
        }
        out.extend([&self.decoder.w, &self.decoder.b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let mut mlps: Vec<&mut Mlp> = Vec::new();
        let (ne, ee, convs, dec) = (
            &mut self.node_encoder,
            &mut self.edge_encoder,
            &mut self.convs,
            &mut self.decoder,
        );
        mlps.push(ne);
        mlps.push(ee);
        mlps.extend(convs.iter_mut());
        for mlp in mlps {
            for l in &mut mlp.layers {
                out.push(&mut l.linear.w);
                out.push(&mut l.linear.b);
                out.push(&mut l.bn.gamma);
                out.push(&mut l.bn.beta);
            }
        }
        out.push(&mut dec.w);
        out.push(&mut dec.b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Batch-norm layers in forward order.
    pub fn batchnorms(&self) -> Vec<&BatchNormState> {
        self.mlps()
            .flat_map(|m| m.layers.iter().map(|l| &l.bn))
            .collect()
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNormState> {
        self.mlps_mut()
            .flat_map(|m| m.layers.iter_mut().map(|l| &mut l.bn))
            .collect()
    }

    /// Folds training-mode statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let bns = self.batchnorms_mut();
        assert_eq!(
            bns.len(),
            stats.len(),
            "one statistics record per batch-norm layer"
        );
        for (bn, s) in bns.into_iter().zip(stats) {
            bn.update(s);
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &GraphBatch,
        mode: Mode,
    ) -> Result<Forward, AutodiffError> {
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        let mut p = Cursor {
            vars: &params,
            at: 0,
        };
        let mut pass = Pass {
            tape,
            mode,
            bn: self.batchnorms(),
            bn_at: 0,
            site: 0,
            stats: Vec::new(),
        };
        let rate = self.dropout_mlp;

        let x = pass.tape.constant(batch.node_features.clone());
        let e = pass.tape.constant(batch.edge_features.clone());
        let h0 = pass.mlp(x, self.node_encoder.layers.len(), &mut p, rate)?;
        let e0 = pass.mlp(e, self.edge_encoder.layers.len(), &mut p, rate)?;

        let mut h = h0;
        for conv in &self.convs {
            // First layer on [h_i ‖ h_j ‖ e⁰_ij] with W split into row blocks,
            // so the node terms are multiplied once per node, not per edge.
            let (w, b, g, beta) = (p.next(), p.next(), p.next(), p.next());
            let d = pass.tape.shape(h).1;
            let de = pass.tape.shape(e0).1;
            let w_recv = pass.tape.row_block(w, 0, d)?;
            let w_send = pass.tape.row_block(w, d, d)?;
            let w_edge = pass.tape.row_block(w, 2 * d, de)?;
            let hr = pass.tape.matmul(h, w_recv)?;
            let hs = pass.tape.matmul(h, w_send)?;
            let at_recv = pass.tape.select_rows(hr, &batch.receivers)?;
            let at_send = pass.tape.select_rows(hs, &batch.senders)?;
            let edge_term = pass.affine(e0, w_edge, b)?;
            let nodes = pass.tape.add(at_recv, at_send)?;
            let pre = pass.tape.add(nodes, edge_term)?;
            let mut m = pass.bn_relu_drop(pre, g, beta, rate)?;
            m = pass.mlp(m, conv.layers.len() - 1, &mut p, rate)?;
            let mx = pass.tape.segment_max(m, &batch.in_degree)?;
            let mean = pass.tape.segment_mean(m, &batch.in_degree)?;
            h = pass.tape.concat(&[mx, mean], Axis::Cols)?;
        }

        let fin = pass.tape.concat(&[h, h0], Axis::Cols)?;
        let fin = pass.dropout(fin, self.dropout_decoder)?;
        let vars = pass.tape.select_rows(fin, &batch.var_nodes)?;
        let (w, b) = (p.next(), p.next());
        let raw = pass.affine(vars, w, b)?;
        let v =
            pass.tape
                .ball_project(raw, &batch.var_counts, &batch.budgets, self.projection_eps)?;
        let stats = std::mem::take(&mut pass.stats);
        Ok(Forward { v, params, stats })
    }

    /// Eval-mode predictions for a set of graphs, one stacked complex vector each.
    pub fn predict_graphs(
        &self,
        graphs: &[&ProblemGraph],
    ) -> Result<Vec<ComplexVector>, AutodiffError> {
        if graphs.is_empty() {
            return Ok(Vec::new());
        }
        let batch = GraphBatch::new(graphs);
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, &batch, Mode::Eval)?;
        Ok(split_output(tape.value(out.v), &batch.var_counts))
    }

    pub fn predict(
        &self,
        subs: &[&QuadraticSubproblem],
    ) -> Result<Vec<ComplexVector>, AutodiffError> {
        let graphs: Vec<ProblemGraph> = subs.iter().map(|s| build_graph(s)).collect();
        self.predict_graphs(&graphs.iter().collect::<Vec<_>>())
    }
}

/// Splits decoder rows `[re, im]` into per-graph complex vectors.
pub fn split_output(v: &Tensor, counts: &[usize]) -> Vec<ComplexVector> {
    let mut out = Vec::with_capacity(counts.len());
    let mut row = 0;
    for &n in counts {
        out.push(ComplexVector(
            (row..row + n)
                .map(|r| C64::new(v.get(r, 0), v.get(r, 1)))
                .collect(),
        ));
        row += n;
    }
    out
}

/// How each record's objective enters the batch loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossScaling {
    /// Objective on the raw `D_aug`.
    #[default]
    Raw,
    /// Objective on `D_aug / scale`, so every record contributes at a
    /// comparable magnitude. Same minimizer per record.
    PerRecord,
}

/// Interleaved real embedding: entry `(2i+a, 2j+b)` of the returned matrix is
/// entry `(a·n+i, b·n+j)` of the block embedding.
pub fn interleaved_embedding(sub: &QuadraticSubproblem, scaling: LossScaling) -> Tensor {
    let emb = real_embed(&sub.d_aug).expect("augmented matrix is Hermitian");
    let n = sub.n_var() + 1;
    let s = match scaling {
        LossScaling::Raw => 1.0,
        LossScaling::PerRecord => 1.0 / sub.scale,
    };
    Tensor::from_fn(2 * n, 2 * n, |r, c| {
        s * emb.get((r % 2) * n + r / 2, (c % 2) * n + c / 2)
    })
}

/// Mean of `[v; 1]ᴴ D_aug [v; 1]` over the batch.
pub fn batch_loss(
    tape: &mut Tape,
    v: Var,
    subs: &[&QuadraticSubproblem],
    scaling: LossScaling,
) -> Result<Var, AutodiffError> {
    let one = tape.constant(Tensor::row_vector(vec![1.0, 0.0]));
    let mut terms = Vec::with_capacity(subs.len());
    let mut row = 0;
    for sub in subs {
        let n = sub.n_var();
        let block = tape.row_block(v, row, n)?;
        let flat = tape.reshape(block, 1, 2 * n)?;
        let x = tape.concat(&[flat, one], Axis::Cols)?;
        let m = tape.constant(interleaved_embedding(sub, scaling));
        let xm = tape.matmul(x, m)?;
        let q = tape.mul(xm, x)?;
        terms.push(tape.sum(q));
        row += n;
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let all = tape.concat(&terms, Axis::Cols)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, 1.0 / subs.len() as f64))
}

pub fn batch_of(subs: &[&QuadraticSubproblem]) -> GraphBatch {
    let graphs: Vec<ProblemGraph> = subs.iter().map(|s| build_graph(s)).collect();
    GraphBatch::new(&graphs.iter().collect::<Vec<_>>())
}
