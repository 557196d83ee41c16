//! Classical FP against FastFP with both stepsize rules on one instance.

use gnnfp::channel::{generate_instance, mrt_initializer, NetworkConfig};
use gnnfp::fp::{classical_fp, fastfp, StepRule};

fn main() {
    let inst = generate_instance(&NetworkConfig::new(7, 6, 8, 2).with_seed(11)).unwrap();
    let v0 = mrt_initializer(&inst);
    let (_, fp) = classical_fp(&inst, &v0, 100).unwrap();
    let (_, eig) = fastfp(&inst, &v0, 20, StepRule::Eigen).unwrap();
    let (_, fro) = fastfp(&inst, &v0, 20, StepRule::Frobenius).unwrap();
    let base = fp.wsr[100];

    println!("iter      fp  fastfp-eig  fastfp-fro   (% of FP at 100 iterations)");
    for k in [0, 1, 2, 5, 10, 20] {
        println!(
            "{k:4} {:7.2} {:11.2} {:11.2}",
            100.0 * fp.wsr[k] / base,
            100.0 * eig.wsr[k] / base,
            100.0 * fro.wsr[k] / base
        );
    }
    println!(
        "ms/iteration: fp {:.3}, fastfp {:.3}",
        fp.ms_per_iteration(),
        eig.ms_per_iteration()
    );
}
