//! Harvesting subproblems and unsupervised training.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{mix, Adam, AutodiffError, DropoutKey, Tape, Tensor};
use crate::channel::mrt_initializer;
use crate::dataset::{split_indices, Dataset, SplitRatios};
use crate::fp::{aux_state, BeamformerUpdate, ClassicalUpdate, FpError};
use crate::gnn::{batch_loss, batch_of, GnnModel, GnnUpdate, LossScaling, Mode};
use crate::io::write_atomic;
use crate::reform::{build_subproblem, HarvestRecord, HarvestSet, QuadraticSubproblem};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    DivergedLoss {
        epoch: usize,
        batch: usize,
        last_good: Box<GnnModel>,
    },
    #[error("nothing to train on")]
    EmptyHarvest,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Solver(#[from] FpError),
}

/// Which solver drives the trajectories subproblems are taken from.
#[derive(Debug, Clone, Copy)]
pub enum HarvestPolicy<'a> {
    ClassicalFp,
    Model(&'a GnnModel),
}

/// Runs the policy from the MRT start on each listed instance for `iters`
/// iterations and records every cell's subproblem at every iteration.
pub fn harvest(
    dataset: &Dataset,
    instances: &[usize],
    iters: usize,
    policy: HarvestPolicy,
) -> Result<Vec<HarvestRecord>, FpError> {
    harvest_sampled(dataset, instances, iters, policy, usize::MAX, 0)
}

/// [`harvest`] keeping at most `per_instance` records of each trajectory,
/// drawn uniformly with a seed derived from `seed` and the instance index.
pub fn harvest_sampled(
    dataset: &Dataset,
    instances: &[usize],
    iters: usize,
    policy: HarvestPolicy,
    per_instance: usize,
    seed: u64,
) -> Result<Vec<HarvestRecord>, FpError> {
    let per_instance: Vec<Vec<HarvestRecord>> = instances
        .par_iter()
        .map(|&k| {
            let inst = &dataset.instances[k];
            let mut v = mrt_initializer(inst);
            let mut out = Vec::with_capacity(iters * inst.cells());
            for it in 0..iters {
                let aux = aux_state(inst, &v);
                for cell in 0..inst.cells() {
                    out.push(HarvestRecord {
                        instance_id: k as u64,
                        iteration: it as u32,
                        sub: build_subproblem(inst, &aux, cell),
                    });
                }
                v = match policy {
                    HarvestPolicy::ClassicalFp => {
                        ClassicalUpdate::default().update(inst, &aux, &v)?
                    }
                    HarvestPolicy::Model(model) => GnnUpdate { model }.update(inst, &aux, &v)?,
                };
            }
            Ok(subsample(out, per_instance, seed ^ mix(k as u64)))
        })
        .collect::<Result<_, FpError>>()?;
    Ok(per_instance.into_iter().flatten().collect())
}

/// Keeps at most `max` records, chosen uniformly with a fixed seed and
/// returned in their original order.
pub fn subsample(records: Vec<HarvestRecord>, max: usize, seed: u64) -> Vec<HarvestRecord> {
    if records.len() <= max {
        return records;
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed)));
    let mut keep = vec![false; records.len()];
    for &i in &idx[..max] {
        keep[i] = true;
    }
    records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect()
}

/// Records of a harvest grouped by the sample-level split of their source
/// dataset.
#[derive(Debug, Clone, Default)]
pub struct PartitionedHarvest {
    pub train: Vec<HarvestRecord>,
    pub val: Vec<HarvestRecord>,
    pub test: Vec<HarvestRecord>,
}

/// Routes each record to the part its instance belongs to under
/// `split_indices(source_samples, split_seed, ratios)`.
pub fn partition(set: HarvestSet, ratios: SplitRatios) -> PartitionedHarvest {
    let split = split_indices(set.source_samples as usize, set.split_seed, ratios);
    let mut part = vec![0u8; set.source_samples as usize];
    for &i in &split.val {
        part[i] = 1;
    }
    for &i in &split.test {
        part[i] = 2;
    }
    let mut out = PartitionedHarvest::default();
    for r in set.records {
        match part[r.instance_id as usize] {
            0 => out.train.push(r),
            1 => out.val.push(r),
            _ => out.test.push(r),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub harvest_iters: usize,
    /// Epochs between on-policy re-harvests; 0 disables them.
    pub refresh_period: usize,
    pub split_ratios: SplitRatios,
    pub early_stop_patience: usize,
    pub loss_scaling: LossScaling,
    pub schedule: LrSchedule,
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero at the last epoch.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                0.5 * base
                    * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            harvest_iters: 16,
            refresh_period: 0,
            split_ratios: SplitRatios::default(),
            early_stop_patience: 30,
            loss_scaling: LossScaling::PerRecord,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !self.split_ratios.is_valid() {
            return Err(TrainError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Summary of relative optimality gaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapStats {
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub count: usize,
}

/// `(obj − obj_oracle) / (|obj_oracle| + 1e-12)`.
pub fn relative_gap(obj: f64, oracle: f64) -> f64 {
    (obj - oracle) / (oracle.abs() + 1e-12)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn gap_stats(gaps: &[f64]) -> GapStats {
    if gaps.is_empty() {
        return GapStats {
            mean: f64::NAN,
            median: f64::NAN,
            p90: f64::NAN,
            count: 0,
        };
    }
    let mut s = gaps.to_vec();
    s.sort_by(f64::total_cmp);
    GapStats {
        mean: s.iter().sum::<f64>() / s.len() as f64,
        median: quantile(&s, 0.5),
        p90: quantile(&s, 0.9),
        count: s.len(),
    }
}

/// Oracle objective of each record.
pub fn oracle_objectives(records: &[HarvestRecord]) -> Result<Vec<f64>, FpError> {
    records
        .par_iter()
        .map(|r| {
            let v = r.sub.oracle_solve()?;
            Ok(r.sub.objective(&v)?)
        })
        .collect()
}

/// Relative gaps of an arbitrary per-record solver.
pub fn gaps_with(
    records: &[HarvestRecord],
    oracle: &[f64],
    mut solve: impl FnMut(
        &[&QuadraticSubproblem],
    ) -> Result<Vec<crate::numerics::ComplexVector>, TrainError>,
) -> Result<Vec<f64>, TrainError> {
    let mut gaps = Vec::with_capacity(records.len());
    for (chunk, opt) in records.chunks(64).zip(oracle.chunks(64)) {
        let subs: Vec<&QuadraticSubproblem> = chunk.iter().map(|r| &r.sub).collect();
        for ((sub, v), o) in subs.iter().zip(solve(&subs)?).zip(opt) {
            gaps.push(relative_gap(sub.objective(&v).map_err(FpError::from)?, *o));
        }
    }
    Ok(gaps)
}

/// Eval-mode gap statistics of a model against precomputed oracle objectives.
pub fn evaluate_gap_against(
    model: &GnnModel,
    records: &[HarvestRecord],
    oracle: &[f64],
) -> Result<GapStats, TrainError> {
    let gaps = gaps_with(records, oracle, |subs| Ok(model.predict(subs)?))?;
    Ok(gap_stats(&gaps))
}

pub fn evaluate_gap(model: &GnnModel, records: &[HarvestRecord]) -> Result<GapStats, TrainError> {
    let oracle = oracle_objectives(records)?;
    evaluate_gap_against(model, records, &oracle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_gap_mean: f64,
    pub val_gap_median: f64,
    pub lr: f64,
    pub elapsed_s: f64,
}

pub fn write_log_csv(out: &mut dyn Write, log: &[EpochLog]) -> std::io::Result<()> {
    writeln!(
        out,
        "epoch,train_loss,val_gap_mean,val_gap_median,lr,elapsed_s"
    )?;
    for e in log {
        writeln!(
            out,
            "{},{:.9e},{:.9e},{:.9e},{:e},{:.3}",
            e.epoch, e.train_loss, e.val_gap_mean, e.val_gap_median, e.lr, e.elapsed_s
        )?;
    }
    Ok(())
}

pub fn save_log_csv(path: &Path, log: &[EpochLog]) -> std::io::Result<()> {
    write_atomic(path, |w| write_log_csv(w, log))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the initialization if no
    /// epoch ran).
    pub model: GnnModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_gap: f64,
    pub stopped_early: bool,
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut GnnModel,
    adam: &mut Adam,
    batch: &[&QuadraticSubproblem],
    key: DropoutKey,
    scaling: LossScaling,
) -> Result<f64, AutodiffError> {
    let graphs = batch_of(batch);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &graphs, Mode::Train(key))?;
    let loss = batch_loss(&mut tape, out.v, batch, scaling)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    let g: Vec<Tensor> = out
        .params
        .iter()
        .map(|p| grads.get(*p).expect("parameter gradient").clone())
        .collect();
    drop(tape);
    if g.iter().any(|t| !t.is_finite()) {
        return Ok(f64::NAN);
    }
    let mut params = model.params_mut();
    adam.step(&mut params, &g.iter().collect::<Vec<_>>())?;
    model.update_running_stats(&out.stats);
    Ok(value)
}

/// Hook that supplies fresh training records from the current model.
pub type Refresh<'a> = dyn FnMut(&GnnModel) -> Result<Vec<HarvestRecord>, TrainError> + 'a;

/// Minibatch Adam on the mean objective with best-validation selection and
/// early stopping. `progress` receives each epoch's log line, the model at
/// the end of that epoch, and whether it is the new best.
pub fn train(
    init: GnnModel,
    train_set: Vec<HarvestRecord>,
    val_set: &[HarvestRecord],
    cfg: &TrainConfig,
    mut refresh: Option<&mut Refresh>,
    mut progress: impl FnMut(&EpochLog, &GnnModel, bool),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyHarvest);
    }
    let start = Instant::now();
    let val_oracle = oracle_objectives(val_set)?;
    let mut model = init;
    let mut best = model.clone();
    let mut best_gap = f64::INFINITY;
    let mut best_epoch = None;
    let mut since_best = 0;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = Vec::new();
    let mut records = train_set;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        if cfg.refresh_period > 0 && epoch > 0 && epoch % cfg.refresh_period == 0 {
            if let Some(r) = refresh.as_mut() {
                let fresh = r(&model)?;
                if !fresh.is_empty() {
                    records = fresh;
                }
            }
        }
        adam.lr = cfg.schedule.rate(cfg.learning_rate, epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            cfg.seed ^ mix(epoch as u64)
        )));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&QuadraticSubproblem> = idx.iter().map(|&i| &records[i].sub).collect();
            let key = DropoutKey::new(cfg.seed, epoch as u64, b as u64, 0);
            let loss = train_step(&mut model, &mut adam, &batch, key, cfg.loss_scaling)?;
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss {
                    epoch,
                    batch: b,
                    last_good: Box::new(best),
                });
            }
            loss_sum += loss;
            batches += 1;
        }
        let gap = if val_set.is_empty() {
            GapStats {
                mean: loss_sum / batches as f64,
                median: f64::NAN,
                p90: f64::NAN,
                count: 0,
            }
        } else {
            evaluate_gap_against(&model, val_set, &val_oracle)?
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_gap_mean: gap.mean,
            val_gap_median: gap.median,
            lr: adam.lr,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        let improved = gap.mean < best_gap;
        progress(&entry, &model, improved);
        log.push(entry);
        if improved {
            best_gap = gap.mean;
            best = model.clone();
            best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: if best_epoch.is_some() { best } else { model },
        log,
        best_epoch,
        best_val_gap: best_gap,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::NetworkConfig;
    use crate::gnn::ModelDims;

    fn toy() -> Dataset {
        Dataset::generate(&NetworkConfig::new(2, 2, 2, 2).with_seed(3), 4).unwrap()
    }

    #[test]
    fn harvest_counts_and_determinism() {
        let ds = toy();
        let idx: Vec<usize> = (0..4).collect();
        assert!(harvest(&ds, &idx, 0, HarvestPolicy::ClassicalFp)
            .unwrap()
            .is_empty());
        let a = harvest(&ds, &idx, 3, HarvestPolicy::ClassicalFp).unwrap();
        assert_eq!(a.len(), 4 * 3 * 2);
        assert_eq!(
            a,
            harvest(&ds, &idx, 3, HarvestPolicy::ClassicalFp).unwrap()
        );
        assert!(a.iter().all(|r| r.sub.check_invariants()));
        let m = GnnModel::new(ModelDims::STANDARD, 0);
        assert_eq!(
            harvest(&ds, &idx[..1], 2, HarvestPolicy::Model(&m))
                .unwrap()
                .len(),
            4
        );
    }

    #[test]
    fn gap_statistics() {
        let s = gap_stats(&[0.3, 0.1, 0.2, 0.0, 0.4]);
        assert!((s.mean - 0.2).abs() < 1e-15);
        assert_eq!(s.median, 0.2);
        assert!((s.p90 - 0.36).abs() < 1e-12);
        let r = gap_stats(&[0.4, 0.0, 0.2, 0.1, 0.3]);
        assert_eq!(s, r);
    }

    #[test]
    fn oracle_has_zero_gap() {
        let ds = toy();
        let recs = harvest(&ds, &[0, 1], 2, HarvestPolicy::ClassicalFp).unwrap();
        let oracle = oracle_objectives(&recs).unwrap();
        let gaps = gaps_with(&recs, &oracle, |subs| {
            Ok(subs.iter().map(|s| s.oracle_solve().unwrap()).collect())
        })
        .unwrap();
        assert!(gaps.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = toy();
        let recs = harvest(&ds, &[0], 1, HarvestPolicy::ClassicalFp).unwrap();
        let init = GnnModel::new(ModelDims::STANDARD, 9);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(init.clone(), recs, &[], &cfg, None, |_, _, _| {}).unwrap();
        assert_eq!(out.model, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn partition_follows_dataset_split() {
        let ds = Dataset::generate(&NetworkConfig::new(2, 1, 2, 1).with_seed(1), 20).unwrap();
        let idx: Vec<usize> = (0..20).collect();
        let records = harvest(&ds, &idx, 2, HarvestPolicy::ClassicalFp).unwrap();
        let parts = partition(
            HarvestSet {
                source_samples: 20,
                split_seed: 1,
                records,
            },
            SplitRatios::default(),
        );
        assert_eq!(
            (parts.train.len(), parts.val.len(), parts.test.len()),
            (56, 12, 12)
        );
        let split = split_indices(20, 1, SplitRatios::default());
        assert!(parts
            .test
            .iter()
            .all(|r| split.test.contains(&(r.instance_id as usize))));
    }

    #[test]
    fn sampled_harvest_caps_each_trajectory() {
        let ds = toy();
        let all = harvest(&ds, &[0, 1], 3, HarvestPolicy::ClassicalFp).unwrap();
        let some = harvest_sampled(&ds, &[0, 1], 3, HarvestPolicy::ClassicalFp, 4, 5).unwrap();
        assert_eq!(some.len(), 8);
        assert!(some.iter().all(|r| all.contains(r)));
        assert_eq!(some.iter().filter(|r| r.instance_id == 0).count(), 4);
    }

    #[test]
    fn log_csv_header() {
        let mut buf = Vec::new();
        write_log_csv(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,val_gap_mean,val_gap_median,lr,elapsed_s\n"
        );
    }
}
