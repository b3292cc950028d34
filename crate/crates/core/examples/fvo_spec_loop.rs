//! Speculative decoding on a small JSON language, verified against the
//! locally masked target and against the exact Doob target.
//!
//! cargo run --release --example fvo_spec_loop [samples]

use std::sync::Arc;

use philab::metrics::empirical_law;
use philab::{
    mu_proj, mu_star, Estimator, EstimatorSpec, Grammar, GrammarSpec, Instance, KernelSpec, LmSpec, PhiTable,
    SpecConfig, SpecDecoder, StateGraph, StepKernel,
};

fn main() -> philab::Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let strings = [
        r#"{"a":1}"#, r#"{"a":2}"#, r#"{"b":1}"#, r#"{"b":true}"#, r#"{"a":null}"#, r#"{"a":[]}"#,
        r#"{"b":{}}"#, r#"{"a":[1]}"#, r#"{"ab":1}"#, r#"{"ba":true}"#, "{}", "[]", "[1]", "[1,2]",
    ];
    let spec = GrammarSpec::FiniteTrie { strings: strings.map(String::from).to_vec() };
    let v = Grammar::new(spec.clone())?.vocab().len();
    let inst = Instance::new(spec, LmSpec::seeded_bigram(v, 3, 1.0), 16)?;
    let table = Arc::new(PhiTable::from_graph(StateGraph::build(&inst)?)?);
    let (star, _) = mu_star(table.graph())?;
    let proj = mu_proj(table.graph())?;
    println!("|L| = {}, analytic gap TV(proj, star) = {:.4}", star.len(), proj.tv(&star));

    let draft_lm = LmSpec::seeded_bigram(v, 4, 1.0);
    for (name, target) in [
        ("LocalMask", StepKernel::local_mask()),
        ("Doob(Exact)", StepKernel::doob(Estimator::with_table(EstimatorSpec::ExactTable, table.clone())?)),
    ] {
        let cfg = SpecConfig { gamma: 4, draft_lm: draft_lm.clone(), target: KernelSpec::LocalMask, seed: 0 };
        let batch = SpecDecoder::with_kernel(&cfg, &inst, target)?.decode_many(n, 0)?;
        let emp = empirical_law(&batch.words)?;
        println!(
            "{name:<12} TV to star {:.4}, TV to proj {:.4}, accept {:.3}, rounds {}, rollback failures {}",
            emp.tv(&star),
            emp.tv(&proj),
            batch.stats.accept_rate(),
            batch.stats.rounds,
            batch.rollback_failures
        );
    }
    Ok(())
}
