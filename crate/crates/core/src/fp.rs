//! Rates, the classical FP iteration, FastFP, and the exact per-cell
//! quadratic-program solver.
//!
//! Notation: user `(ℓ,q)` is served by cell `ℓ`; `H_{ℓq,i}` is the channel
//! from base station `i` to that user. All quantities are noise-normalized,
//! so `σ² = 1`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::channel::{BeamformerSet, NetworkInstance};
use crate::io::write_atomic;
use crate::numerics::{
    power_iterate, Cholesky, ComplexMatrix, ComplexVector, NumericsError, Tolerances, C64,
};

#[derive(Debug, Error)]
pub enum FpError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Received signal components `H_{ℓq,i} v_{ij}`, stored at
/// `((ℓQ+q)·L + i)·Q + j`.
struct Received {
    l: usize,
    q: usize,
    data: Vec<ComplexVector>,
}

impl Received {
    fn new(inst: &NetworkInstance, v: &BeamformerSet) -> Self {
        let (l, q) = (inst.cells(), inst.users_per_cell());
        let mut data = Vec::with_capacity(l * q * l * q);
        for cell in 0..l {
            for user in 0..q {
                for bs in 0..l {
                    let h = inst.channel(cell, user, bs);
                    for j in 0..q {
                        data.push(h.mul_vec(v.get(bs, j)));
                    }
                }
            }
        }
        Self { l, q, data }
    }

    fn get(&self, cell: usize, user: usize, bs: usize, j: usize) -> &ComplexVector {
        &self.data[((cell * self.q + user) * self.l + bs) * self.q + j]
    }

    /// `σ²I + Σ_{ij} (H v)(H v)ᴴ`, optionally leaving out the desired term.
    fn covariance(
        &self,
        nr: usize,
        cell: usize,
        user: usize,
        include_desired: bool,
    ) -> ComplexMatrix {
        let mut c = ComplexMatrix::identity(nr);
        for bs in 0..self.l {
            for j in 0..self.q {
                if !include_desired && bs == cell && j == user {
                    continue;
                }
                c.add_outer(1.0, self.get(cell, user, bs, j));
            }
        }
        c
    }
}

fn check_shape(inst: &NetworkInstance, v: &BeamformerSet) {
    assert_eq!(
        (v.cells, v.users_per_cell, v.v.len()),
        (
            inst.cells(),
            inst.users_per_cell(),
            inst.cells() * inst.users_per_cell()
        ),
        "beamformer set does not match the instance"
    );
}

/// Interference-plus-noise covariance `C_{ℓq}` of user `(cell, user)`.
pub fn interference_covariance(
    inst: &NetworkInstance,
    v: &BeamformerSet,
    cell: usize,
    user: usize,
) -> ComplexMatrix {
    check_shape(inst, v);
    let mut c = ComplexMatrix::identity(inst.rx());
    for bs in 0..inst.cells() {
        let h = inst.channel(cell, user, bs);
        for j in 0..inst.users_per_cell() {
            if bs == cell && j == user {
                continue;
            }
            c.add_outer(1.0, &h.mul_vec(v.get(bs, j)));
        }
    }
    c
}

fn sinr(c: &ComplexMatrix, s: &ComplexVector) -> f64 {
    if s.norm_sqr() == 0.0 {
        return 0.0;
    }
    let chol = Cholesky::factor(c).expect("covariance is at least the identity");
    let x = chol.solve_vec(s);
    s.dot(&x).re.max(0.0)
}

/// Achievable rate of user `(cell, user)` in nats.
pub fn user_rate(inst: &NetworkInstance, v: &BeamformerSet, cell: usize, user: usize) -> f64 {
    let c = interference_covariance(inst, v, cell, user);
    let s = inst.channel(cell, user, cell).mul_vec(v.get(cell, user));
    sinr(&c, &s).ln_1p()
}

/// Weighted sum rate in nats.
pub fn weighted_sum_rate(inst: &NetworkInstance, v: &BeamformerSet) -> f64 {
    update_gamma(inst, v)
        .iter()
        .enumerate()
        .map(|(k, g)| inst.weight(k / inst.users_per_cell(), k % inst.users_per_cell()) * g.ln_1p())
        .sum()
}

/// Auxiliary variables of the quadratic and Lagrangian-dual transforms,
/// indexed `ℓ·Q + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxState {
    pub y: Vec<ComplexVector>,
    pub gamma: Vec<f64>,
}

/// Optimal `γ_{ℓq} = sᴴ C⁻¹ s` with `s = H_{ℓq,ℓ} v_{ℓq}`.
pub fn update_gamma(inst: &NetworkInstance, v: &BeamformerSet) -> Vec<f64> {
    aux_state(inst, v).gamma
}

/// Optimal receive filters `y_{ℓq} = (σ²I + Σ_{ij} H v vᴴ Hᴴ)⁻¹ H_{ℓq,ℓ} v_{ℓq}`.
pub fn update_y(inst: &NetworkInstance, v: &BeamformerSet) -> Vec<ComplexVector> {
    aux_state(inst, v).y
}

/// Both auxiliary updates from one pass over the received components.
pub fn aux_state(inst: &NetworkInstance, v: &BeamformerSet) -> AuxState {
    check_shape(inst, v);
    let (l, q, nr) = (inst.cells(), inst.users_per_cell(), inst.rx());
    let rx = Received::new(inst, v);
    let mut y = Vec::with_capacity(l * q);
    let mut gamma = Vec::with_capacity(l * q);
    for cell in 0..l {
        for user in 0..q {
            let s = rx.get(cell, user, cell, user);
            let c = rx.covariance(nr, cell, user, false);
            gamma.push(sinr(&c, s));
            let mut full = c;
            full.add_outer(1.0, s);
            let chol = Cholesky::factor(&full).expect("covariance is at least the identity");
            y.push(chol.solve_vec(s));
        }
    }
    AuxState { y, gamma }
}

/// `b_{ℓq} = ω_{ℓq}(1+γ_{ℓq}) H_{ℓq,ℓ}ᴴ y_{ℓq}`.
pub fn linear_term(
    inst: &NetworkInstance,
    aux: &AuxState,
    cell: usize,
    user: usize,
) -> ComplexVector {
    let k = cell * inst.users_per_cell() + user;
    let w = inst.weight(cell, user) * (1.0 + aux.gamma[k]);
    inst.channel(cell, user, cell)
        .adjoint_mul_vec(&aux.y[k])
        .scaled(w)
}

/// All `b_{ℓq}` of one cell.
pub fn linear_terms(inst: &NetworkInstance, aux: &AuxState, cell: usize) -> Vec<ComplexVector> {
    (0..inst.users_per_cell())
        .map(|q| linear_term(inst, aux, cell, q))
        .collect()
}

/// `D_ℓ = Σ_{ij} ω_{ij}(1+γ_{ij}) H_{ij,ℓ}ᴴ y_{ij} y_{ij}ᴴ H_{ij,ℓ}`.
pub fn build_d(inst: &NetworkInstance, aux: &AuxState, cell: usize) -> ComplexMatrix {
    let q = inst.users_per_cell();
    let mut d = ComplexMatrix::zeros(inst.tx(), inst.tx());
    for i in 0..inst.cells() {
        for j in 0..q {
            let k = i * q + j;
            let w = inst.weight(i, j) * (1.0 + aux.gamma[k]);
            if w == 0.0 {
                continue;
            }
            d.add_outer(w, &inst.channel(i, j, cell).adjoint_mul_vec(&aux.y[k]));
        }
    }
    d
}

/// The surrogate objective `f_t(v, y, γ)`; equals the WSR when `y` and `γ`
/// are optimal for `v`.
pub fn surrogate_objective(inst: &NetworkInstance, v: &BeamformerSet, aux: &AuxState) -> f64 {
    check_shape(inst, v);
    let q = inst.users_per_cell();
    let sigma2 = inst.noise_power();
    let mut f = 0.0;
    for cell in 0..inst.cells() {
        let d = build_d(inst, aux, cell);
        for user in 0..q {
            let k = cell * q + user;
            let (w, g) = (inst.weight(cell, user), aux.gamma[k]);
            let vk = v.get(cell, user);
            let b = linear_term(inst, aux, cell, user);
            f += 2.0 * vk.dot(&b).re
                - d.quad_form(vk).re
                - w * (1.0 + g) * sigma2 * aux.y[k].norm_sqr()
                + w * g.ln_1p()
                - w * g;
        }
    }
    f
}

/// Per-cell quadratic objective `Σ_q [v_qᴴ D v_q − 2 Re{v_qᴴ b_q}]`.
pub fn qp_objective(d: &ComplexMatrix, b: &[ComplexVector], v: &[ComplexVector]) -> f64 {
    v.iter()
        .zip(b)
        .map(|(vq, bq)| d.quad_form(vq).re - 2.0 * vq.dot(bq).re)
        .sum()
}

/// Minimizer of the per-cell quadratic program with its multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub v: Vec<ComplexVector>,
    pub lambda: f64,
    pub power: f64,
}

fn shifted_solve(
    d: &ComplexMatrix,
    b: &[ComplexVector],
    lambda: f64,
) -> Option<(Vec<ComplexVector>, f64)> {
    let chol = Cholesky::factor(&d.shifted(lambda)).ok()?;
    let v: Vec<ComplexVector> = b.iter().map(|bq| chol.solve_vec(bq)).collect();
    let p: f64 = v.iter().map(|x| x.norm_sqr()).sum();
    p.is_finite().then_some((v, p))
}

/// Solves `min Σ_q [v_qᴴ D v_q − 2Re{v_qᴴ b_q}]` s.t. `Σ_q ‖v_q‖² ≤ P` via
/// `v_q(λ) = (λI + D)⁻¹ b_q` and bisection on `λ`.
pub fn solve_qp_bisection(
    d: &ComplexMatrix,
    b: &[ComplexVector],
    p: f64,
    tol: f64,
) -> Result<QpSolution, FpError> {
    if !d.is_square() || b.iter().any(|x| x.dim() != d.rows()) {
        return Err(FpError::DimensionMismatch(format!(
            "D is {}x{}, b dims {:?}",
            d.rows(),
            d.cols(),
            b.iter().map(|x| x.dim()).collect::<Vec<_>>()
        )));
    }
    if !(p > 0.0) {
        return Err(FpError::NumericalFailure(format!(
            "power budget {p} must be positive"
        )));
    }
    let zero = || {
        b.iter()
            .map(|x| ComplexVector::zeros(x.dim()))
            .collect::<Vec<_>>()
    };
    if b.iter().all(|x| x.norm_sqr() == 0.0) {
        return Ok(QpSolution {
            v: zero(),
            lambda: 0.0,
            power: 0.0,
        });
    }
    if let Some((v, power)) = shifted_solve(d, b, 0.0) {
        if power <= p {
            return Ok(QpSolution {
                v,
                lambda: 0.0,
                power,
            });
        }
    }
    let tols = Tolerances::DEFAULT;
    let mut hi = 1.0;
    let mut best = loop {
        match shifted_solve(d, b, hi) {
            Some((v, power)) if power <= p => break (v, power),
            _ => {}
        }
        hi *= 2.0;
        if hi > tols.bisection_max_lambda {
            return Err(FpError::NumericalFailure(format!(
                "no feasible multiplier below {:e}",
                tols.bisection_max_lambda
            )));
        }
    };
    let mut lo = if hi > 1.0 { hi / 2.0 } else { 0.0 };
    while hi - lo >= tols.bisection_min_interval && (p - best.1) > tol * p {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match shifted_solve(d, b, mid) {
            Some((v, power)) if power <= p => {
                hi = mid;
                best = (v, power);
            }
            _ => lo = mid,
        }
    }
    Ok(QpSolution {
        v: best.0,
        lambda: hi,
        power: best.1,
    })
}

/// Per-iteration WSR and cumulative update time of one solver run.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    pub algorithm: String,
    /// Entry `k` is the WSR after `k` iterations; entry 0 is the start point.
    pub wsr: Vec<f64>,
    /// Cumulative wall time of the updates in milliseconds, aligned with `wsr`.
    pub elapsed_ms: Vec<f64>,
}

impl SolverTrace {
    pub fn iterations(&self) -> usize {
        self.wsr.len().saturating_sub(1)
    }

    pub fn final_wsr(&self) -> f64 {
        *self.wsr.last().expect("trace holds the start point")
    }

    /// Mean update time per iteration.
    pub fn ms_per_iteration(&self) -> f64 {
        match self.iterations() {
            0 => 0.0,
            n => self.elapsed_ms[n] / n as f64,
        }
    }
}

/// One beamformer update given fresh auxiliary variables.
pub trait BeamformerUpdate {
    fn name(&self) -> String;

    fn update(
        &mut self,
        inst: &NetworkInstance,
        aux: &AuxState,
        v: &BeamformerSet,
    ) -> Result<BeamformerSet, FpError>;
}

/// Runs `iters` rounds of y → γ → v with the given update.
pub fn run_solver(
    inst: &NetworkInstance,
    v0: &BeamformerSet,
    iters: usize,
    update: &mut dyn BeamformerUpdate,
) -> Result<(BeamformerSet, SolverTrace), FpError> {
    check_shape(inst, v0);
    let mut v = v0.clone();
    let mut trace = SolverTrace {
        algorithm: update.name(),
        wsr: vec![weighted_sum_rate(inst, &v)],
        elapsed_ms: vec![0.0],
    };
    let mut elapsed = 0.0;
    for _ in 0..iters {
        let start = Instant::now();
        let aux = aux_state(inst, &v);
        v = update.update(inst, &aux, &v)?;
        elapsed += start.elapsed().as_secs_f64() * 1e3;
        trace.wsr.push(weighted_sum_rate(inst, &v));
        trace.elapsed_ms.push(elapsed);
    }
    Ok((v, trace))
}

/// Exact per-cell update by multiplier bisection.
#[derive(Debug, Clone, Copy)]
pub struct ClassicalUpdate {
    pub tol: f64,
}

impl Default for ClassicalUpdate {
    fn default() -> Self {
        Self {
            tol: Tolerances::DEFAULT.bisection_tol,
        }
    }
}

impl BeamformerUpdate for ClassicalUpdate {
    fn name(&self) -> String {
        "fp".into()
    }

    fn update(
        &mut self,
        inst: &NetworkInstance,
        aux: &AuxState,
        v: &BeamformerSet,
    ) -> Result<BeamformerSet, FpError> {
        let mut out = v.clone();
        for cell in 0..inst.cells() {
            let d = build_d(inst, aux, cell);
            let b = linear_terms(inst, aux, cell);
            out.set_cell(
                cell,
                solve_qp_bisection(&d, &b, inst.power_budget(cell), self.tol)?.v,
            );
        }
        Ok(out)
    }
}

/// Stepsize denominator for FastFP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    Eigen,
    Frobenius,
}

impl StepRule {
    pub fn delta(self, d: &ComplexMatrix) -> f64 {
        match self {
            StepRule::Eigen => {
                let tols = Tolerances::DEFAULT;
                // Best effort: a nearly degenerate top pair may not settle in
                // the iteration cap, but the Rayleigh quotient is still usable.
                power_iterate(d, tols.power_tol, tols.power_max_iter)
                    .map(|(e, _)| e.value)
                    .unwrap_or(f64::NAN)
            }
            StepRule::Frobenius => d.frobenius_norm(),
        }
    }
}

/// Gradient step from `t = v` with stepsize `1/δ_ℓ`, then radial projection
/// onto the power ball.
#[derive(Debug, Clone, Copy)]
pub struct FastFpUpdate {
    pub rule: StepRule,
}

impl BeamformerUpdate for FastFpUpdate {
    fn name(&self) -> String {
        match self.rule {
            StepRule::Eigen => "fastfp".into(),
            StepRule::Frobenius => "fastfp-frobenius".into(),
        }
    }

    fn update(
        &mut self,
        inst: &NetworkInstance,
        aux: &AuxState,
        v: &BeamformerSet,
    ) -> Result<BeamformerSet, FpError> {
        let mut out = v.clone();
        for cell in 0..inst.cells() {
            let d = build_d(inst, aux, cell);
            let delta = self.rule.delta(&d);
            if !(delta > 0.0) || !delta.is_finite() {
                // D = 0 forces y = 0 and b = 0, so the step is zero anyway.
                continue;
            }
            let t = v.cell(cell);
            let mut next: Vec<ComplexVector> = t
                .iter()
                .enumerate()
                .map(|(user, tq)| {
                    let b = linear_term(inst, aux, cell, user);
                    let dt = d.mul_vec(tq);
                    ComplexVector(
                        tq.iter()
                            .zip(b.iter().zip(dt.iter()))
                            .map(|(t, (b, dt))| t + (b - dt) / delta)
                            .collect(),
                    )
                })
                .collect();
            let power: f64 = next.iter().map(|x| x.norm_sqr()).sum();
            let budget = inst.power_budget(cell);
            if power > budget {
                let s = (budget / power).sqrt();
                for x in &mut next {
                    *x = x.scaled(s);
                }
            }
            out.set_cell(cell, next);
        }
        Ok(out)
    }
}

pub fn classical_fp(
    inst: &NetworkInstance,
    v0: &BeamformerSet,
    iters: usize,
) -> Result<(BeamformerSet, SolverTrace), FpError> {
    run_solver(inst, v0, iters, &mut ClassicalUpdate::default())
}

pub fn fastfp(
    inst: &NetworkInstance,
    v0: &BeamformerSet,
    iters: usize,
    rule: StepRule,
) -> Result<(BeamformerSet, SolverTrace), FpError> {
    run_solver(inst, v0, iters, &mut FastFpUpdate { rule })
}

/// Writes traces as CSV with columns
/// `algorithm,instance_id,iteration,wsr_nats,elapsed_ms`.
pub fn write_traces_csv(
    out: &mut dyn Write,
    traces: &[(usize, &SolverTrace)],
) -> std::io::Result<()> {
    writeln!(out, "algorithm,instance_id,iteration,wsr_nats,elapsed_ms")?;
    for (id, t) in traces {
        for (k, (w, ms)) in t.wsr.iter().zip(&t.elapsed_ms).enumerate() {
            writeln!(out, "{},{},{},{:.12e},{:.6}", t.algorithm, id, k, w, ms)?;
        }
    }
    Ok(())
}

pub fn save_traces_csv(path: &Path, traces: &[(usize, &SolverTrace)]) -> std::io::Result<()> {
    write_atomic(path, |w| write_traces_csv(w, traces))
}

/// Unit vector helper used by tests and examples.
pub fn random_unit(rng: &mut impl rand::Rng, dim: usize) -> ComplexVector {
    use rand_distr::{Distribution, StandardNormal};
    let v = ComplexVector(
        (0..dim)
            .map(|_| C64::new(StandardNormal.sample(rng), StandardNormal.sample(rng)))
            .collect(),
    );
    let n = v.norm();
    v.scaled(1.0 / n)
}
