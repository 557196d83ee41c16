//! Runs an untrained GNN on a subproblem graph and compares it with the
//! exact solution. Pass a checkpoint path to use trained weights.

use gnnfp::channel::{generate_instance, mrt_initializer, NetworkConfig};
use gnnfp::fp::aux_state;
use gnnfp::gnn::{build_graph, load_model, GnnModel, ModelDims};
use gnnfp::reform::build_subproblem;
use gnnfp::training::relative_gap;

fn main() {
    let model = match std::env::args().nth(1) {
        Some(p) => load_model(p.as_ref()).expect("readable checkpoint"),
        None => GnnModel::new(ModelDims::STANDARD, 0),
    };
    println!("{} parameters", model.param_count());

    let inst = generate_instance(&NetworkConfig::new(7, 6, 8, 2).with_seed(8)).unwrap();
    let aux = aux_state(&inst, &mrt_initializer(&inst));
    let subs: Vec<_> = (0..inst.cells())
        .map(|c| build_subproblem(&inst, &aux, c))
        .collect();
    let g = build_graph(&subs[0]);
    println!("graph: {} nodes, {} directed edges", g.nodes(), g.edges());

    let preds = model.predict(&subs.iter().collect::<Vec<_>>()).unwrap();
    for (sub, v) in subs.iter().zip(&preds) {
        let oracle = sub.objective(&sub.oracle_solve().unwrap()).unwrap();
        let obj = sub.objective(v).unwrap();
        println!(
            "cell {}: power {:.2} of budget, gap to oracle {:.3}",
            sub.cell_index,
            v.norm_sqr() / sub.power,
            relative_gap(obj, oracle)
        );
    }
}
