//! Depth and length distributions under local masking versus the
//! grammar-conditional law, for a model that likes opening brackets.
//!
//! cargo run --release --example structural_bias

use philab::metrics::{histogram_kl, structural_stats};
use philab::{mu_proj, mu_star, GrammarSpec, Instance, LmSpec, StateGraph};

fn main() -> philab::Result<()> {
    let lm = LmSpec::SeededLogit { seed: 0, context_order: 2, bias: vec![1.0], scale: 1.5 };
    let inst = Instance::new(GrammarSpec::Dyck { depth: 3, length: 16 }, lm, 32)?;
    let graph = StateGraph::build(&inst)?;
    let (star, _) = mu_star(&graph)?;
    let proj = mu_proj(&graph)?;
    let s = structural_stats(&star, inst.grammar());
    let p = structural_stats(&proj, inst.grammar());
    println!("depth  {:>8} {:>8}", "proj", "star");
    for d in 0..p.depth_hist.len().max(s.depth_hist.len()) {
        let get = |h: &[f64]| h.get(d).copied().unwrap_or(0.0);
        println!("{d:>5}  {:>8.4} {:>8.4}", get(&p.depth_hist), get(&s.depth_hist));
    }
    println!("mean depth  proj {:.3}  star {:.3}", p.mean_depth.unwrap_or(0.0), s.mean_depth.unwrap_or(0.0));
    println!("mean length proj {:.3}  star {:.3}", p.mean_length, s.mean_length);
    println!("KL(proj depth ‖ star depth) = {:?}", histogram_kl(&p.depth_hist, &s.depth_hist));
    Ok(())
}
