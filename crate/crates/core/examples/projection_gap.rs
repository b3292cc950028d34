//! How far local masking lands from the grammar-conditional law, and how much
//! of that each estimator recovers.
//!
//! cargo run --release --example projection_gap [seed]

use std::sync::Arc;

use philab::metrics::kl_identity_check;
use philab::{mu_phi, mu_proj, mu_star, Estimator, EstimatorSpec, GrammarSpec, Instance, LmSpec, PhiTable, StateGraph};

fn main() -> philab::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let inst = Instance::new(GrammarSpec::Dyck { depth: 3, length: 12 }, LmSpec::seeded(seed, 2), 32)?;
    let table = Arc::new(PhiTable::from_graph(StateGraph::build(&inst)?)?);
    let graph = table.graph();
    let (star, z) = mu_star(graph)?;
    let proj = mu_proj(graph)?;
    println!("Dyck(3,12), seed {seed}: {} strings, Z = {z:.4e}, {} positions", star.len(), graph.len());
    println!("TV(mu_proj, mu_star) = {:.4}", proj.tv(&star));

    let kl = kl_identity_check(&graph.node(0).position, table.values_at(0))?;
    println!("root KL: direct {:.6}, via Φ {:.6}, Φ̄ = {:.4}", kl.kl_direct, kl.kl_via_phi, kl.phi_bar);

    let specs = [
        EstimatorSpec::Uniform,
        EstimatorSpec::OneStepCheap,
        EstimatorSpec::OneStepTrue,
        EstimatorSpec::MonteCarlo { k: 16, h: None, seed: 1 },
        EstimatorSpec::MonteCarlo { k: 256, h: None, seed: 1 },
        EstimatorSpec::ExactTable,
    ];
    println!("{:<16} TV(mu_phi, mu_star)", "estimator");
    for spec in specs {
        let label = spec.label();
        let est = Estimator::with_table(spec, table.clone())?;
        match mu_phi(&inst, graph, &est) {
            Ok(law) => println!("{label:<16} {:.6}", law.tv(&star)),
            Err(e) => println!("{label:<16} degenerate: {e}"),
        }
    }
    Ok(())
}
