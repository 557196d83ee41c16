//! Normalized WSR after five iterations as the number of users per cell
//! changes. Pass a checkpoint path to use trained weights.

use gnnfp::bench::{generalize, write_generalize_csv};
use gnnfp::channel::NetworkConfig;
use gnnfp::gnn::{load_model, GnnModel, ModelDims};

fn main() {
    let model = match std::env::args().nth(1) {
        Some(p) => load_model(p.as_ref()).expect("readable checkpoint"),
        None => GnnModel::new(ModelDims::STANDARD, 0),
    };
    let base = NetworkConfig::new(3, 2, 4, 2).with_seed(50);
    let rows = generalize(&base, &[2, 3, 4], 8, 5, 50, &model).unwrap();
    write_generalize_csv(&mut std::io::stdout(), &rows, gnnfp::bench::RateUnit::Nats).unwrap();
}
