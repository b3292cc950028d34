//! Grouped exact TVs on budget languages with hundreds of millions of strings.
//!
//! cargo run --release --example budget_stress

use philab::harness::{budget_row, BUDGET_TABLE};

fn main() -> philab::Result<()> {
    println!("{:>3} {:>3} {:>5} {:>12} {:>6} {:>9} {:>9} {:>10}", "n", "K", "p1", "valid", "states", "TV proj", "TV Φ", "residual");
    for p in BUDGET_TABLE {
        let r = budget_row(&p)?;
        println!(
            "{:>3} {:>3} {:>5.2} {:>12} {:>6} {:>9.4} {:>9.1e} {:>10.1e}",
            r.n, r.k, r.p1, r.valid_count, r.state_count, r.tv_proj_star, r.tv_phi_star, r.doob_residual
        );
    }
    let last = budget_row(&BUDGET_TABLE[7])?;
    println!("root P(1) at n=30: masked {:.3}, corrected {:.3}", last.root_masked_p1, last.root_doob_p1);
    Ok(())
}
