//! Per-position fidelity bounds against the measured per-step TV.
//!
//! cargo run --release --example fidelity_bounds

use std::sync::Arc;

use philab::metrics::{fidelity_bounds, per_step_tv, Bound};
use philab::{Error, Estimator, EstimatorSpec, GrammarSpec, Instance, LmSpec, PhiTable, StateGraph};

fn main() -> philab::Result<()> {
    let inst = Instance::new(GrammarSpec::Dyck { depth: 3, length: 8 }, LmSpec::seeded(0, 2), 32)?;
    let table = Arc::new(PhiTable::from_graph(StateGraph::build(&inst)?)?);
    for spec in [
        EstimatorSpec::OneStepCheap,
        EstimatorSpec::OneStepTrue,
        EstimatorSpec::MonteCarlo { k: 16, h: None, seed: 2 },
        EstimatorSpec::MonteCarlo { k: 256, h: None, seed: 2 },
    ] {
        let est = Estimator::with_table(spec.clone(), table.clone())?;
        let (mut finite, mut vacuous, mut degenerate, mut slack) = (0, 0, 0, f64::INFINITY);
        for (id, node) in table.graph().nodes().iter().enumerate() {
            let v = match est.estimate(&inst, &node.position) {
                Ok(v) => v,
                Err(Error::EstimatorDegeneracy) => {
                    degenerate += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let b = fidelity_bounds(&v, table.values_at(id), &node.position)?;
            match b.additive_bound {
                Bound::Finite(bound) => {
                    finite += 1;
                    let tv = per_step_tv(&node.position, &v.values, table.values_at(id))?;
                    slack = slack.min(bound - tv);
                }
                Bound::Vacuous => vacuous += 1,
            }
            if id == 0 {
                println!(
                    "{:<10} root δ {:.3}, Φ̄ {:.3}, bound {:?}, relative ε {:?}",
                    spec.label(),
                    b.delta,
                    b.phi_bar,
                    b.additive_bound,
                    b.relative_eps
                );
            }
        }
        println!("{:<10} {finite} informative, {vacuous} vacuous, {degenerate} degenerate, min slack {slack:.3e}", "");
    }
    Ok(())
}
