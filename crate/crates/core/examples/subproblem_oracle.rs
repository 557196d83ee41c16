//! Builds the stacked per-cell quadratic program after one FP step and
//! solves it exactly.

use gnnfp::channel::{generate_instance, mrt_initializer, NetworkConfig};
use gnnfp::fp::aux_state;
use gnnfp::reform::{build_subproblem, stack};

fn main() {
    let inst = generate_instance(&NetworkConfig::new(3, 2, 4, 2).with_seed(5)).unwrap();
    let v = mrt_initializer(&inst);
    let aux = aux_state(&inst, &v);
    let sub = build_subproblem(&inst, &aux, 0);
    println!(
        "cell {}: {} variables, augmented matrix {}x{}",
        sub.cell_index,
        sub.n_var(),
        sub.d_aug.rows(),
        sub.d_aug.cols()
    );
    println!(
        "feature scale {:.3e}, power budget {:.3e}",
        sub.scale, sub.power
    );
    assert!(sub.check_invariants());

    let current = stack(v.cell(0));
    let opt = sub.oracle_solve().unwrap();
    println!(
        "objective at MRT    {:.6e}",
        sub.objective(&current).unwrap()
    );
    println!("objective at oracle {:.6e}", sub.objective(&opt).unwrap());
    println!("oracle power {:.6e} of {:.6e}", opt.norm_sqr(), sub.power);
}
