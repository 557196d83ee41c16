//! Draws one multi-cell network, initializes with MRT and reports rates.

use gnnfp::channel::{generate_instance, mrt_initializer, NetworkConfig};
use gnnfp::fp::{user_rate, weighted_sum_rate};

fn main() {
    let cfg = NetworkConfig::new(7, 6, 8, 2).with_seed(3);
    let inst = generate_instance(&cfg).expect("valid configuration");
    println!(
        "{} cells, {} users each, {}x{} channels",
        inst.cells(),
        inst.users_per_cell(),
        inst.rx(),
        inst.tx()
    );
    println!(
        "power budget per cell (noise-normalized): {:.3e}",
        inst.power_budget(0)
    );

    let v = mrt_initializer(&inst);
    for cell in 0..2 {
        let rates: Vec<String> = (0..inst.users_per_cell())
            .map(|u| format!("{:.3}", user_rate(&inst, &v, cell, u)))
            .collect();
        println!("cell {cell} MRT rates (nats/s/Hz): {}", rates.join(" "));
    }
    println!(
        "weighted sum rate at MRT: {:.3}",
        weighted_sum_rate(&inst, &v)
    );
}
