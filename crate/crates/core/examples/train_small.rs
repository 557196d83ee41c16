//! Harvests FP subproblems on a small network and trains the GNN on them.

use gnnfp::channel::NetworkConfig;
use gnnfp::dataset::{split_indices, Dataset, SplitRatios};
use gnnfp::gnn::{GnnModel, ModelDims};
use gnnfp::training::{evaluate_gap, harvest, train, HarvestPolicy, LrSchedule, TrainConfig};

fn main() {
    let data = Dataset::generate(&NetworkConfig::new(2, 2, 2, 2).with_seed(1), 120).unwrap();
    let split = split_indices(data.len(), data.config.seed, SplitRatios::default());
    let train_set = harvest(&data, &split.train, 2, HarvestPolicy::ClassicalFp).unwrap();
    let val = harvest(&data, &split.val, 2, HarvestPolicy::ClassicalFp).unwrap();
    println!(
        "{} training records, {} validation records",
        train_set.len(),
        val.len()
    );

    let init = GnnModel::new(ModelDims::STANDARD, 0);
    let before = evaluate_gap(&init, &val).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 16,
        learning_rate: 3e-3,
        schedule: LrSchedule::Cosine,
        ..TrainConfig::default()
    };
    let out = train(init, train_set, &val, &cfg, None, |e, _, _| {
        if e.epoch % 10 == 0 {
            println!(
                "epoch {:3} loss {:.4e} val gap median {:.4}",
                e.epoch, e.train_loss, e.val_gap_median
            );
        }
    })
    .unwrap();
    let after = evaluate_gap(&out.model, &val).unwrap();
    println!(
        "median validation gap: {:.4} untrained, {:.4} trained (best epoch {:?})",
        before.median, after.median, out.best_epoch
    );
}
