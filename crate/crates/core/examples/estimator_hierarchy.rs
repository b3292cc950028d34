//! Sampled TV to the grammar-conditional law per estimator tier, with
//! bootstrap intervals.
//!
//! cargo run --release --example estimator_hierarchy [samples]

use std::sync::Arc;

use philab::metrics::{bootstrap_tv_ci, DEFAULT_RESAMPLES};
use philab::samplers::ancestral_many;
use philab::{mu_star, Estimator, EstimatorSpec, GrammarSpec, Instance, LmSpec, PhiTable, StateGraph, StepKernel};

fn main() -> philab::Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let specs = [
        EstimatorSpec::Uniform,
        EstimatorSpec::OneStepCheap,
        EstimatorSpec::OneStepTrue,
        EstimatorSpec::MonteCarlo { k: 16, h: None, seed: 5 },
        EstimatorSpec::MonteCarlo { k: 64, h: None, seed: 5 },
        EstimatorSpec::ExactTable,
    ];
    for seed in 0..3 {
        let inst = Instance::new(GrammarSpec::Dyck { depth: 3, length: 16 }, LmSpec::seeded(seed, 2), 32)?;
        let table = Arc::new(PhiTable::from_graph(StateGraph::build(&inst)?)?);
        let (star, _) = mu_star(table.graph())?;
        println!("seed {seed}, N = {n}");
        for spec in &specs {
            let kernel = StepKernel::doob(Estimator::with_table(spec.clone(), table.clone())?);
            let words = ancestral_many(&kernel, &inst, n, seed)?;
            let ci = bootstrap_tv_ci(&words, &star, DEFAULT_RESAMPLES, seed)?;
            println!("  {:<13} TV {:.4}  [{:.4}, {:.4}]", spec.label(), ci.point, ci.lo, ci.hi);
        }
    }
    Ok(())
}
