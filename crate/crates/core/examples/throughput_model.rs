//! Analytic tokens per second for speculative decoding with each estimator's
//! per-round overhead.
//!
//! cargo run --release --example throughput_model

use philab::harness::default_cost_rows;
use philab::metrics::{cost_model, CostModelParams};

fn main() -> philab::Result<()> {
    for row in default_cost_rows() {
        println!("{:<20} {:>7.2} tok/s", row.method, cost_model(&row.params)?);
    }
    println!("sweep over extra forwards per round:");
    for fw in [0.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let p = CostModelParams::new(35.0, 5.0, 1.0, 3.07, fw, 0.0);
        println!("  {fw:>4} forwards: {:>6.2} tok/s", cost_model(&p)?);
    }
    Ok(())
}
