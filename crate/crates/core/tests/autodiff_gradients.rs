//! Finite-difference checks of every tape primitive and of the full model.

mod common;

use std::sync::Arc;

use gnnfp::autodiff::{Axis, DropoutKey, Tape, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Builds `f` on a fresh tape for each input set and compares its
/// gradients with central differences. The loss is contracted with a fixed
/// random weight so every output entry matters.
fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
        let out = f(&mut t, &vars);
        let (r, c) = t.shape(out);
        let w = t.constant(random(r, c, 99));
        let p = t.mul(out, w).unwrap();
        let s = t.sum(p);
        t.value(s).item()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let out = f(&mut t, &vars);
    let (r, c) = t.shape(out);
    let w = t.constant(random(r, c, 99));
    let p = t.mul(out, w).unwrap();
    let loss = t.sum(p);
    let grads = t.backward(loss).unwrap();
    let h = 1e-6;
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).expect("gradient for every input");
        for k in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            xs[i].as_mut_slice()[k] += h;
            let up = eval(&xs);
            xs[i].as_mut_slice()[k] -= 2.0 * h;
            let down = eval(&xs);
            let fd = (up - down) / (2.0 * h);
            let an = g.as_slice()[k];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                "input {i} entry {k}: analytic {an}, finite difference {fd}"
            );
        }
    }
}

const TOL: f64 = 1e-6;

#[test]
fn matmul_and_transpose() {
    check(
        &[random(3, 4, 1), random(4, 2, 2)],
        |t, v| t.matmul(v[0], v[1]).unwrap(),
        TOL,
    );
    check(&[random(3, 4, 3)], |t, v| t.transpose(v[0]), TOL);
}

#[test]
fn add_with_row_broadcast_and_scale() {
    check(
        &[random(3, 4, 1), random(3, 4, 2)],
        |t, v| t.add(v[0], v[1]).unwrap(),
        TOL,
    );
    check(
        &[random(5, 3, 1), random(1, 3, 2)],
        |t, v| t.add(v[0], v[1]).unwrap(),
        TOL,
    );
    check(&[random(2, 3, 4)], |t, v| t.scale(v[0], -2.5), TOL);
}

#[test]
fn concat_both_axes() {
    check(
        &[random(3, 2, 1), random(3, 4, 2)],
        |t, v| t.concat(&[v[0], v[1]], Axis::Cols).unwrap(),
        TOL,
    );
    check(
        &[random(2, 3, 1), random(4, 3, 2)],
        |t, v| t.concat(&[v[0], v[1]], Axis::Rows).unwrap(),
        TOL,
    );
}

#[test]
fn elementwise() {
    check(&[random(4, 3, 5)], |t, v| t.relu(v[0]), TOL);
    check(&[random(4, 3, 6)], |t, v| t.square(v[0]), TOL);
    let positive = Tensor::from_fn(3, 3, |i, j| 0.5 + (i * 3 + j) as f64 * 0.1);
    check(&[positive.clone()], |t, v| t.sqrt(v[0]), TOL);
    check(&[positive], |t, v| t.recip(v[0]), TOL);
    check(&[random(4, 3, 7)], |t, v| t.clamp_min(v[0], 0.1), TOL);
    check(
        &[random(3, 3, 8), random(3, 3, 9)],
        |t, v| t.mul(v[0], v[1]).unwrap(),
        TOL,
    );
}

#[test]
fn reductions() {
    check(
        &[random(4, 3, 1)],
        |t, v| t.reduce_mean(v[0], Axis::Rows).unwrap(),
        TOL,
    );
    check(
        &[random(4, 3, 2)],
        |t, v| t.reduce_mean(v[0], Axis::Cols).unwrap(),
        TOL,
    );
    check(
        &[random(4, 3, 3)],
        |t, v| t.reduce_max(v[0], Axis::Rows).unwrap(),
        TOL,
    );
    check(
        &[random(4, 3, 4)],
        |t, v| t.reduce_max(v[0], Axis::Cols).unwrap(),
        TOL,
    );
    check(&[random(1, 5, 5)], |t, v| t.sum(v[0]), TOL);
}

#[test]
fn segment_pooling() {
    let segs: Arc<[usize]> = vec![3, 1, 4].into();
    check(
        &[random(8, 3, 1)],
        |t, v| t.segment_max(v[0], &segs).unwrap(),
        TOL,
    );
    check(
        &[random(8, 3, 2)],
        |t, v| t.segment_mean(v[0], &segs).unwrap(),
        TOL,
    );
    check(
        &[random(8, 3, 3)],
        |t, v| t.segment_sum(v[0], &segs).unwrap(),
        TOL,
    );
}

#[test]
fn gathers_and_views() {
    let idx: Arc<[usize]> = vec![2, 0, 2, 1, 3, 3].into();
    check(
        &[random(4, 3, 1)],
        |t, v| t.select_rows(v[0], &idx).unwrap(),
        TOL,
    );
    check(
        &[random(5, 2, 2)],
        |t, v| t.row_block(v[0], 1, 3).unwrap(),
        TOL,
    );
    check(
        &[random(4, 3, 3)],
        |t, v| t.reshape(v[0], 2, 6).unwrap(),
        TOL,
    );
}

#[test]
fn batchnorm_in_both_modes() {
    let x = random(6, 3, 1);
    let gamma = Tensor::row_vector(vec![1.2, 0.7, -0.4]);
    let beta = Tensor::row_vector(vec![0.1, -0.3, 0.5]);
    check(
        &[x.clone(), gamma.clone(), beta.clone()],
        |t, v| t.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
        1e-5,
    );
    check(
        &[x, gamma, beta],
        |t, v| {
            t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
                .unwrap()
        },
        TOL,
    );
}

#[test]
fn dropout_with_fixed_mask() {
    let key = DropoutKey::new(3, 1, 4, 1);
    check(
        &[random(5, 4, 1)],
        |t, v| t.dropout(v[0], 0.3, true, key.stream()).unwrap(),
        TOL,
    );
}

#[test]
fn ball_projection_inside_and_outside() {
    let segs: Arc<[usize]> = vec![2, 3].into();
    let x = Tensor::new(
        5,
        2,
        vec![1.0, 2.0, -1.5, 0.5, 0.05, 0.1, -0.02, 0.03, 0.04, 0.01],
    )
    .unwrap();
    check(
        &[x],
        |t, v| t.ball_project(v[0], &segs, &[1.0, 1.0], 1e-12).unwrap(),
        TOL,
    );
}

#[test]
fn full_model_on_thirteen_nodes() {
    let model = common::model_with_stats(5);
    let sub = common::random_sub(4, 3, 1.0, 17);
    assert_eq!(sub.n_var() + 1, 13);
    let err = common::model_gradient_error(&model, &[&sub], 1e-6, 1e-6);
    assert!(err < 1e-4, "max relative gradient error {err:e}");
}

#[test]
fn full_model_on_a_batch_of_harvested_subproblems() {
    let model = common::model_with_stats(6);
    let inst = common::instance(2, 2, 3, 2, 11);
    let subs = common::subproblems_at(&inst, 2);
    let refs: Vec<_> = subs.iter().collect();
    let err = common::model_gradient_error(&model, &refs, 1e-6, 1e-6);
    assert!(err < 1e-4, "max relative gradient error {err:e}");
}
