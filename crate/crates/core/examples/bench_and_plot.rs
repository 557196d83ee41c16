//! Convergence curves for all three solvers and their SVG chart.

use gnnfp::bench::{render_svg, run_bench, Algorithm, BenchOptions, RateUnit};
use gnnfp::channel::NetworkConfig;
use gnnfp::dataset::Dataset;
use gnnfp::gnn::{GnnModel, ModelDims};

fn main() {
    let data = Dataset::generate(&NetworkConfig::new(3, 2, 4, 2).with_seed(2), 10).unwrap();
    let refs: Vec<_> = data.instances.iter().collect();
    let model = GnnModel::new(ModelDims::STANDARD, 0);
    let opts = BenchOptions {
        algorithms: vec![Algorithm::Fp, Algorithm::FastFp, Algorithm::GnnFp],
        iters: 8,
        ..BenchOptions::default()
    };
    let report = run_bench(&refs, &opts, Some(&model)).unwrap();
    for alg in &opts.algorithms {
        let r = report.row(alg.name(), 5).unwrap();
        println!(
            "{:7} iter 5: {:6.2}% of FP-100, {:.3} ms/iteration",
            alg.name(),
            r.normalized_pct,
            r.ms_per_iteration
        );
    }
    let out = std::env::temp_dir().join("gnnfp_curves.svg");
    std::fs::write(&out, render_svg(&report.rows, RateUnit::Nats.label())).unwrap();
    println!("chart written to {}", out.display());
}
