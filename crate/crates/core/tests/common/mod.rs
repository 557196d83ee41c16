#![allow(dead_code)]

use gnnfp::autodiff::{Tape, Tensor};
use gnnfp::channel::{generate_instance, mrt_initializer, NetworkConfig, NetworkInstance};
use gnnfp::fp::{aux_state, classical_fp};
use gnnfp::gnn::{batch_loss, batch_of, GnnModel, LossScaling, Mode};
use gnnfp::numerics::{ComplexMatrix, ComplexVector, C64};
use gnnfp::reform::{build_subproblem, QuadraticSubproblem};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn instance(l: usize, q: usize, nt: usize, nr: usize, seed: u64) -> NetworkInstance {
    generate_instance(&NetworkConfig::new(l, q, nt, nr).with_seed(seed)).unwrap()
}

/// Every cell's subproblem after `iters` classical FP iterations from MRT.
pub fn subproblems_at(inst: &NetworkInstance, iters: usize) -> Vec<QuadraticSubproblem> {
    let (v, _) = classical_fp(inst, &mrt_initializer(inst), iters).unwrap();
    let aux = aux_state(inst, &v);
    (0..inst.cells())
        .map(|c| build_subproblem(inst, &aux, c))
        .collect()
}

/// Random Hermitian PSD block and linear terms assembled into a subproblem.
pub fn random_sub(nt: usize, q: usize, power: f64, seed: u64) -> QuadraticSubproblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = ComplexMatrix::zeros(nt, nt);
    for _ in 0..nt + 1 {
        let u: Vec<C64> = (0..nt)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        d.add_outer(rng.random_range(0.5..3.0), &u);
    }
    let b: Vec<ComplexVector> = (0..q)
        .map(|_| {
            ComplexVector(
                (0..nt)
                    .map(|_| C64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                    .collect(),
            )
        })
        .collect();
    QuadraticSubproblem::from_parts(0, &d, &b, power)
}

/// Eval-mode loss on the raw augmented matrices and its parameter
/// gradients.
pub fn eval_loss_and_grads(model: &GnnModel, subs: &[&QuadraticSubproblem]) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, &batch_of(subs), Mode::Eval)
        .unwrap();
    let loss = batch_loss(&mut tape, out.v, subs, LossScaling::Raw).unwrap();
    let g = tape.backward(loss).unwrap();
    let grads = out
        .params
        .iter()
        .map(|p| g.get(*p).unwrap().clone())
        .collect();
    (tape.value(loss).item(), grads)
}

pub fn eval_loss(model: &GnnModel, subs: &[&QuadraticSubproblem]) -> f64 {
    let mut tape = Tape::inference();
    let out = model
        .forward(&mut tape, &batch_of(subs), Mode::Eval)
        .unwrap();
    let loss = batch_loss(&mut tape, out.v, subs, LossScaling::Raw).unwrap();
    tape.value(loss).item()
}

/// Largest relative error between analytic gradients and central finite
/// differences of the eval-mode loss, over every parameter. Entries whose
/// magnitudes are both below `floor` times the largest gradient entry are
/// compared absolutely against that floor.
pub fn model_gradient_error(
    model: &GnnModel,
    subs: &[&QuadraticSubproblem],
    h: f64,
    floor: f64,
) -> f64 {
    let (_, grads) = eval_loss_and_grads(model, subs);
    let gmax = grads
        .iter()
        .flat_map(|t| t.as_slice())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (t, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let x0 = probe.params_mut()[t].as_slice()[k];
            probe.params_mut()[t].as_mut_slice()[k] = x0 + h;
            let up = eval_loss(&probe, subs);
            probe.params_mut()[t].as_mut_slice()[k] = x0 - h;
            let down = eval_loss(&probe, subs);
            probe.params_mut()[t].as_mut_slice()[k] = x0;
            let fd = (up - down) / (2.0 * h);
            let an = g.as_slice()[k];
            let denom = fd.abs().max(an.abs()).max(floor * gmax);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    worst
}

/// Model with non-trivial running statistics so eval-mode batch norm is
/// more than an identity.
pub fn model_with_stats(seed: u64) -> GnnModel {
    let mut m = GnnModel::new(gnnfp::gnn::ModelDims::STANDARD, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    for bn in m.batchnorms_mut() {
        for x in bn.running_mean.iter_mut() {
            *x = rng.random_range(-0.5..0.5);
        }
        for x in bn.running_var.iter_mut() {
            *x = rng.random_range(0.5..2.0);
        }
        for x in bn.gamma.as_mut_slice() {
            *x = rng.random_range(0.5..1.5);
        }
        for x in bn.beta.as_mut_slice() {
            *x = rng.random_range(-0.2..0.2);
        }
    }
    m
}

/// Relative KKT residual of a QP solution: stationarity of
/// `(D + λI)v − b`, primal feasibility and complementary slackness.
pub fn kkt_residual(
    d: &ComplexMatrix,
    b: &[ComplexVector],
    p: f64,
    v: &[ComplexVector],
    lambda: f64,
) -> f64 {
    let shifted = d.shifted(lambda);
    let mut stat: f64 = 0.0;
    let mut bnorm: f64 = 0.0;
    for (vq, bq) in v.iter().zip(b) {
        let r = shifted.mul_vec(vq);
        stat += r
            .iter()
            .zip(bq.iter())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>();
        bnorm += bq.norm_sqr();
    }
    let power: f64 = v.iter().map(|x| x.norm_sqr()).sum();
    let primal = ((power - p) / p).max(0.0);
    let slack = lambda * (p - power).abs() / (p * (lambda + d.frobenius_norm()));
    (stat.sqrt() / bnorm.sqrt().max(1e-300))
        .max(primal)
        .max(slack)
}

/// Random point of the power ball `‖v‖² ≤ P`, stacked.
pub fn random_feasible(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<C64> {
    let x: Vec<C64> = (0..n)
        .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let norm = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let radius = p.sqrt() * rng.random_range(0.0f64..1.0).sqrt();
    x.iter().map(|c| c * (radius / norm)).collect()
}
