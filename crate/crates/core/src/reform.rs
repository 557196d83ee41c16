//! Per-cell beamformer update as a ball-constrained standard quadratic form.
//!
//! With `D^blk = blkdiag(D_ℓ, …, D_ℓ)` (Q copies) and `b^sta` the stacked
//! linear terms, the update `min Σ_q [v_qᴴ D_ℓ v_q − 2Re{v_qᴴ b_q}]` over
//! `Σ_q ‖v_q‖² ≤ P` becomes `min v̄ᴴ D_aug v̄` with `v̄ = [v^sta; 1]` and
//!
//! ```text
//! D_aug = [ D^blk     −b^sta ]
//!         [ −b^staᴴ     0    ]
//! ```

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::channel::NetworkInstance;
use crate::fp::{build_d, linear_terms, solve_qp_bisection, AuxState, FpError};
use crate::io::{checked_count, write_atomic, FormatError, Reader, Writer};
use crate::numerics::{ComplexMatrix, ComplexVector, NumericsError, Tolerances, C64};

/// Smallest admissible feature scale.
pub const MIN_SCALE: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSubproblem {
    pub cell_index: usize,
    pub nt: usize,
    pub q: usize,
    pub power: f64,
    /// Raw augmented matrix of dimension `Nt·Q + 1`.
    pub d_aug: ComplexMatrix,
    /// `max(1e-30, max |D_aug entry|)`; graph features are divided by it.
    pub scale: f64,
}

impl QuadraticSubproblem {
    /// Assembles `D_aug` from one cell's `D_ℓ` and linear terms.
    pub fn from_parts(
        cell_index: usize,
        d: &ComplexMatrix,
        b: &[ComplexVector],
        power: f64,
    ) -> Self {
        let nt = d.rows();
        let q = b.len();
        let n = nt * q;
        let mut d_aug = ComplexMatrix::zeros(n + 1, n + 1);
        let a = d_aug.as_mut_slice();
        for k in 0..q {
            for r in 0..nt {
                for c in 0..nt {
                    a[(k * nt + r) * (n + 1) + k * nt + c] = d[(r, c)];
                }
                let br = b[k][r];
                a[(k * nt + r) * (n + 1) + n] = -br;
                a[n * (n + 1) + k * nt + r] = -br.conj();
            }
        }
        let scale = d_aug.max_abs().max(MIN_SCALE);
        Self {
            cell_index,
            nt,
            q,
            power,
            d_aug,
            scale,
        }
    }

    pub fn n_var(&self) -> usize {
        self.nt * self.q
    }

    /// The `Nt×Nt` block shared by every user.
    pub fn d_block(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.nt, self.nt, |r, c| self.d_aug[(r, c)])
    }

    /// `b^sta`, read back from the last column.
    pub fn b_stacked(&self) -> ComplexVector {
        let n = self.n_var();
        ComplexVector((0..n).map(|i| -self.d_aug[(i, n)]).collect())
    }

    /// Same problem with `D_aug` multiplied by `alpha > 0`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let d_aug = self.d_aug.scaled(alpha);
        let scale = d_aug.max_abs().max(MIN_SCALE);
        Self {
            d_aug,
            scale,
            ..self.clone()
        }
    }

    fn check_dim(&self, v: &[C64]) -> Result<(), NumericsError> {
        if v.len() != self.n_var() {
            return Err(NumericsError::DimensionMismatch {
                expected: format!("stacked vector of length {}", self.n_var()),
                got: format!("length {}", v.len()),
            });
        }
        Ok(())
    }

    /// `[v; 1]ᴴ D_aug [v; 1]`.
    pub fn objective(&self, v_sta: &[C64]) -> Result<f64, NumericsError> {
        self.check_dim(v_sta)?;
        let mut x = v_sta.to_vec();
        x.push(C64::new(1.0, 0.0));
        let val = self.d_aug.quad_form(&x);
        debug_assert!(val.im.abs() <= 1e-10 * (1.0 + val.re.abs()) * (1.0 + self.scale));
        Ok(val.re)
    }

    /// Splits a stacked vector into per-user beamformers.
    pub fn unstack(&self, v_sta: &[C64]) -> Result<Vec<ComplexVector>, NumericsError> {
        self.check_dim(v_sta)?;
        Ok(v_sta
            .chunks(self.nt)
            .map(|c| ComplexVector(c.to_vec()))
            .collect())
    }

    /// Exact minimizer over the power ball, stacked.
    pub fn oracle_solve(&self) -> Result<ComplexVector, FpError> {
        let b = self.unstack(&self.b_stacked())?;
        let sol = solve_qp_bisection(
            &self.d_block(),
            &b,
            self.power,
            Tolerances::DEFAULT.bisection_tol,
        )?;
        Ok(stack(&sol.v))
    }

    /// Hermiticity, zero corner and repeated diagonal blocks.
    pub fn check_invariants(&self) -> bool {
        let n = self.n_var();
        if self.d_aug.rows() != n + 1
            || !self.d_aug.is_square()
            || self.d_aug[(n, n)] != C64::new(0.0, 0.0)
        {
            return false;
        }
        if self.d_aug.hermitian_defect() > 1e-10 * self.d_aug.frobenius_norm().max(MIN_SCALE) {
            return false;
        }
        for r in 0..n {
            for c in 0..n {
                let (kr, kc) = (r / self.nt, c / self.nt);
                let expect = if kr == kc {
                    self.d_aug[(r % self.nt, c % self.nt)]
                } else {
                    C64::new(0.0, 0.0)
                };
                if self.d_aug[(r, c)] != expect {
                    return false;
                }
            }
        }
        true
    }
}

/// Concatenates per-user vectors.
pub fn stack(v: &[ComplexVector]) -> ComplexVector {
    ComplexVector(v.iter().flat_map(|x| x.iter().copied()).collect())
}

/// The subproblem of cell `cell` for the given auxiliary state.
pub fn build_subproblem(
    inst: &NetworkInstance,
    aux: &AuxState,
    cell: usize,
) -> QuadraticSubproblem {
    let d = build_d(inst, aux, cell);
    let b = linear_terms(inst, aux, cell);
    QuadraticSubproblem::from_parts(cell, &d, &b, inst.power_budget(cell))
}

/// A subproblem with where it was harvested from.
#[derive(Debug, Clone, PartialEq)]
pub struct HarvestRecord {
    pub instance_id: u64,
    pub iteration: u32,
    pub sub: QuadraticSubproblem,
}

/// Harvested records plus what is needed to recover the sample-level split
/// they were drawn from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HarvestSet {
    /// Number of network samples in the source dataset.
    pub source_samples: u64,
    /// Seed of the source dataset's train/val/test split.
    pub split_seed: u64,
    pub records: Vec<HarvestRecord>,
}

pub const HARVEST_MAGIC: &[u8; 8] = b"GNFPSUBS";
pub const HARVEST_VERSION: u32 = 1;

/// Layout (little-endian): magic `GNFPSUBS`, version u32, source sample
/// count u64, split seed u64, record count u64, then per record: instance id u64, iteration u32, cell index u32, Nt u32,
/// Q u32, P f64, `D_aug` row-major as interleaved re/im f64, scale f64.
pub fn write_harvest(out: &mut dyn Write, set: &HarvestSet) -> std::io::Result<()> {
    let mut w = Writer::new(out);
    w.bytes(HARVEST_MAGIC)?;
    w.u32(HARVEST_VERSION)?;
    w.u64(set.source_samples)?;
    w.u64(set.split_seed)?;
    w.u64(set.records.len() as u64)?;
    for r in &set.records {
        w.u64(r.instance_id)?;
        w.u32(r.iteration)?;
        for n in [r.sub.cell_index, r.sub.nt, r.sub.q] {
            w.u32(n as u32)?;
        }
        w.f64(r.sub.power)?;
        w.complex(r.sub.d_aug.as_slice())?;
        w.f64(r.sub.scale)?;
    }
    Ok(())
}

pub fn read_harvest(input: impl Read) -> Result<HarvestSet, FormatError> {
    let mut r = Reader::new(input);
    if &r.bytes::<8>()? != HARVEST_MAGIC {
        return Err(FormatError::corrupt("bad harvest magic"));
    }
    let version = r.u32()?;
    if version != HARVEST_VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            expected: HARVEST_VERSION,
        });
    }
    let source_samples = r.u64()?;
    let split_seed = r.u64()?;
    let count = checked_count(r.u64()?, 1 << 32, "record count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let instance_id = r.u64()?;
        let iteration = r.u32()?;
        let cell_index = r.u32()? as usize;
        let nt = checked_count(r.u32()? as u64, 4096, "Nt")?;
        let q = checked_count(r.u32()? as u64, 4096, "Q")?;
        let power = r.f64()?;
        let n = nt * q + 1;
        let d_aug = ComplexMatrix::from_row_major(n, n, r.complex(n * n)?).expect("sized read");
        let scale = r.f64()?;
        if !(scale >= MIN_SCALE) || !(power > 0.0) {
            return Err(FormatError::corrupt("non-positive scale or power"));
        }
        if instance_id >= source_samples {
            return Err(FormatError::corrupt(
                "instance id outside the source dataset",
            ));
        }
        out.push(HarvestRecord {
            instance_id,
            iteration,
            sub: QuadraticSubproblem {
                cell_index,
                nt,
                q,
                power,
                d_aug,
                scale,
            },
        });
    }
    r.expect_end()?;
    Ok(HarvestSet {
        source_samples,
        split_seed,
        records: out,
    })
}

pub fn save_harvest(path: &Path, set: &HarvestSet) -> Result<(), FormatError> {
    Ok(write_atomic(path, |w| write_harvest(w, set))?)
}

pub fn load_harvest(path: &Path) -> Result<HarvestSet, FormatError> {
    read_harvest(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_instance, mrt_initializer, NetworkConfig};
    use crate::fp::{aux_state, qp_objective, random_unit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(l: usize, q: usize, nt: usize, seed: u64) -> (NetworkInstance, AuxState) {
        let inst = generate_instance(&NetworkConfig::new(l, q, nt, 2).with_seed(seed)).unwrap();
        let aux = aux_state(&inst, &mrt_initializer(&inst));
        (inst, aux)
    }

    #[test]
    fn full_scale_dims() {
        let (inst, aux) = sample(7, 6, 8, 1);
        let sub = build_subproblem(&inst, &aux, 3);
        assert_eq!((sub.d_aug.rows(), sub.d_aug.cols()), (49, 49));
        assert!(sub.check_invariants());
    }

    #[test]
    fn zero_filters_give_zero_problem() {
        let (inst, mut aux) = sample(2, 2, 3, 2);
        for y in &mut aux.y {
            *y = ComplexVector::zeros(2);
        }
        let sub = build_subproblem(&inst, &aux, 0);
        assert_eq!(sub.d_aug.max_abs(), 0.0);
        assert_eq!(sub.scale, MIN_SCALE);
        assert_eq!(
            sub.objective(&random_unit(&mut ChaCha8Rng::seed_from_u64(1), 6))
                .unwrap(),
            0.0
        );
        assert_eq!(sub.oracle_solve().unwrap().norm_sqr(), 0.0);
    }

    #[test]
    fn objective_matches_unstacked_form() {
        let (inst, aux) = sample(3, 3, 4, 3);
        let sub = build_subproblem(&inst, &aux, 1);
        let d = build_d(&inst, &aux, 1);
        let b = linear_terms(&inst, &aux, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(sub.objective(&ComplexVector::zeros(12)).unwrap(), 0.0);
        for _ in 0..100 {
            let r: f64 = rand::RngExt::random(&mut rng);
            let v = random_unit(&mut rng, 12).scaled((sub.power * r).sqrt());
            let expect = qp_objective(&d, &b, &sub.unstack(&v).unwrap());
            let got = sub.objective(&v).unwrap();
            assert!((got - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn unstack_round_trip_and_dims() {
        let (inst, aux) = sample(2, 1, 3, 5);
        let sub = build_subproblem(&inst, &aux, 0);
        let v = random_unit(&mut ChaCha8Rng::seed_from_u64(2), 3);
        let parts = sub.unstack(&v).unwrap();
        assert_eq!(parts, vec![v.clone()]);
        assert_eq!(stack(&parts), v);
        assert!(sub.unstack(&v[..2]).is_err());
        assert!(sub.objective(&v[..2]).is_err());
    }

    #[test]
    fn oracle_beats_random_feasible_points() {
        let (inst, aux) = sample(3, 2, 4, 6);
        let sub = build_subproblem(&inst, &aux, 2);
        let opt = sub.objective(&sub.oracle_solve().unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r: f64 = rand::RngExt::random(&mut rng);
            let v = random_unit(&mut rng, 8).scaled((sub.power * r).sqrt());
            assert!(opt <= sub.objective(&v).unwrap() + 1e-12 * opt.abs());
        }
    }

    #[test]
    fn oracle_argmin_is_scale_invariant() {
        let (inst, aux) = sample(3, 2, 4, 8);
        let sub = build_subproblem(&inst, &aux, 0);
        let a = sub.oracle_solve().unwrap();
        let b = sub.scaled(37.5).oracle_solve().unwrap();
        let diff: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-6 * a.norm().max(1e-12));
    }

    #[test]
    fn harvest_file_round_trip() {
        let (inst, aux) = sample(2, 2, 2, 9);
        let recs: Vec<HarvestRecord> = (0..2)
            .map(|c| HarvestRecord {
                instance_id: 5,
                iteration: 3,
                sub: build_subproblem(&inst, &aux, c),
            })
            .collect();
        let set = HarvestSet {
            source_samples: 6,
            split_seed: 11,
            records: recs,
        };
        let mut buf = Vec::new();
        write_harvest(&mut buf, &set).unwrap();
        assert_eq!(read_harvest(buf.as_slice()).unwrap(), set);
        let short = HarvestSet {
            source_samples: 5,
            ..set.clone()
        };
        let mut bad = Vec::new();
        write_harvest(&mut bad, &short).unwrap();
        assert!(matches!(
            read_harvest(bad.as_slice()),
            Err(FormatError::Corrupt(_))
        ));
        buf[0] = b'x';
        assert!(matches!(
            read_harvest(buf.as_slice()),
            Err(FormatError::Corrupt(_))
        ));
    }
}
