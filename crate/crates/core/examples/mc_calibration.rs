//! Hoeffding coverage of Monte Carlo future-validity estimates.
//!
//! cargo run --release --example mc_calibration

use philab::metrics::hoeffding_radius;
use philab::{phi_exact, Error, Estimator, EstimatorSpec, GrammarSpec, Instance, LmSpec};

fn main() -> philab::Result<()> {
    let inst = Instance::new(GrammarSpec::BudgetDfa { n: 8, k: 4 }, LmSpec::Bernoulli { p1: 0.6 }, 8)?;
    let table = phi_exact(&inst)?;
    let root = inst.position(&inst.root())?;
    let exact = table.values_at(0);
    println!("exact root Φ = {exact:?}");
    for k in [4usize, 16, 64, 256] {
        let r = hoeffding_radius(k, 0.05, root.valid.len())?;
        let (mut covered, mut worst) = (0, 0.0f64);
        for trial in 0..200 {
            let est = Estimator::new(EstimatorSpec::MonteCarlo { k, h: None, seed: trial }, &inst)?;
            let values = match est.estimate(&inst, &root) {
                Ok(v) => v.values,
                Err(Error::EstimatorDegeneracy) => vec![0.0; root.valid.len()],
                Err(e) => return Err(e),
            };
            let err = values.iter().zip(exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
            covered += usize::from(err <= r.union);
        }
        println!("k={k:>3}: radius {:.3} (union {:.3}), coverage {covered}/200, worst error {worst:.3}", r.per_candidate, r.union);
    }
    Ok(())
}
