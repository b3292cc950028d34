//! Exact committed-token laws of the Leviathan verifier and of the equality
//! verifier, by walking every random branch.
//!
//! cargo run --release --example verifier_kernels

use philab::samplers::{enumerate_outcomes, equality_verifier_marginal, equality_verifier_step, leviathan_step};
use philab::TokenDistribution;

fn main() -> philab::Result<()> {
    let p = TokenDistribution::new(vec![0.6, 0.3, 0.1])?;
    let q = TokenDistribution::new(vec![0.2, 0.2, 0.6])?;
    println!("target {:?}\ndraft  {:?}", p.probs(), q.probs());

    let lev = enumerate_outcomes(|r| {
        let d = r.categorical(&q);
        Ok(leviathan_step(&p, &q, d, r)?.1)
    })?;
    let acc = enumerate_outcomes(|r| {
        let d = r.categorical(&q);
        Ok(leviathan_step(&p, &q, d, r)?.0)
    })?;
    let eq = enumerate_outcomes(|r| Ok(equality_verifier_step(&p, &q, r)))?;
    let closed = equality_verifier_marginal(&p, &q);

    println!("{:>5} {:>10} {:>10} {:>12}", "token", "leviathan", "equality", "closed form");
    for (i, c) in closed.iter().enumerate() {
        let t = philab::Token(i as u16);
        println!("{:>5} {:>10.6} {:>10.6} {:>12.6}", i, lev[&t], eq.get(&t).copied().unwrap_or(0.0), c);
    }
    println!("Leviathan accept probability {:.4}", acc.get(&true).copied().unwrap_or(0.0));
    let bias: f64 = 0.5 * closed.iter().zip(p.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>();
    println!("equality verifier TV to target {bias:.4}");
    Ok(())
}
