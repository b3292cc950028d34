//! Distances, identities, bounds, intervals, structural statistics and the
//! analytic throughput model.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::PhiVector;
use crate::exactlaws::{doob_kernel, StateGraph, TerminalLaw};
use crate::grammar::Grammar;
use crate::instance::Position;
use crate::seeding;
use crate::toylm::{TokenDistribution, Word};

pub const DEFAULT_RESAMPLES: usize = 500;
pub const DEFAULT_ALPHA: f64 = 0.05;

pub trait TotalVariation {
    fn tv_to(&self, other: &Self) -> f64;
}

impl TotalVariation for TerminalLaw {
    fn tv_to(&self, other: &Self) -> f64 {
        self.tv(other)
    }
}

impl TotalVariation for TokenDistribution {
    fn tv_to(&self, other: &Self) -> f64 {
        self.tv(other)
    }
}

/// Half the L1 distance over the union of supports.
pub fn tv<T: TotalVariation>(a: &T, b: &T) -> f64 {
    a.tv_to(b)
}

/// A divergence that may be infinite when absolute continuity fails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum Divergence {
    Finite(f64),
    Infinite,
}

impl Divergence {
    pub fn value(self) -> f64 {
        match self {
            Divergence::Finite(v) => v,
            Divergence::Infinite => f64::INFINITY,
        }
    }
}

/// `Σ a log(a/b)`; atoms with `a = 0` contribute nothing.
pub fn kl(a: &[f64], b: &[f64]) -> Divergence {
    let mut sum = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        if x <= 0.0 {
            continue;
        }
        if y <= 0.0 {
            return Divergence::Infinite;
        }
        sum += x * (x / y).ln();
    }
    Divergence::Finite(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlCheck {
    pub kl_direct: f64,
    pub kl_via_phi: f64,
    pub phi_bar: f64,
}

/// `KL(μ*_t ‖ μ^proj_t)` summed directly and through `E_{μ*}[log Φ/Φ̄]`.
pub fn kl_identity_check(pos: &Position, phi: &[f64]) -> Result<KlCheck> {
    let star = doob_kernel(pos, phi)?;
    let proj = pos.local_mask()?;
    let kl_direct = kl(star.probs(), proj.probs()).value();
    if !kl_direct.is_finite() {
        return Err(Error::Audit("μ* charges a token outside the local mask".into()));
    }
    let phi_bar = mean_phi(&proj, pos, phi);
    let kl_via_phi = pos
        .valid
        .iter()
        .zip(phi)
        .filter(|(&y, _)| star.prob(y) > 0.0)
        .map(|(&y, &v)| star.prob(y) * (v / phi_bar).ln())
        .sum();
    Ok(KlCheck { kl_direct, kl_via_phi, phi_bar })
}

/// `Φ̄_t = E_{μ^proj_t}[Φ]`.
pub fn mean_phi(proj: &TokenDistribution, pos: &Position, phi: &[f64]) -> f64 {
    pos.valid.iter().zip(phi).map(|(&y, &v)| proj.prob(y) * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum Bound {
    Finite(f64),
    Vacuous,
}

impl Bound {
    pub fn finite(self) -> Option<f64> {
        match self {
            Bound::Finite(v) => Some(v),
            Bound::Vacuous => None,
        }
    }
}

/// `δ/(Φ̄ − δ)` when `δ < Φ̄`.
pub fn additive_bound(delta: f64, phi_bar: f64) -> Bound {
    if delta < phi_bar {
        Bound::Finite(delta / (phi_bar - delta))
    } else {
        Bound::Vacuous
    }
}

/// `min(1, ε/(1 − ε))`.
pub fn relative_bound(eps: f64) -> f64 {
    if eps >= 1.0 {
        1.0
    } else {
        (eps / (1.0 - eps)).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub delta: f64,
    pub phi_bar: f64,
    pub additive_bound: Bound,
    pub relative_eps: Option<f64>,
    pub relative_bound: Option<f64>,
}

/// Bounds on `TV(μ̂_t, μ*_t)` for an estimate against exact values at `pos`.
pub fn fidelity_bounds(v: &PhiVector, exact: &[f64], pos: &Position) -> Result<BoundReport> {
    if v.candidates != pos.valid || exact.len() != v.values.len() {
        return Err(Error::Precondition("estimate and exact values cover different candidates".into()));
    }
    let delta = v.values.iter().zip(exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let phi_bar = mean_phi(&pos.local_mask()?, pos, exact);
    let relative_eps = exact
        .iter()
        .all(|&e| e > 0.0)
        .then(|| v.values.iter().zip(exact).map(|(a, e)| (a / e - 1.0).abs()).fold(0.0, f64::max));
    Ok(BoundReport {
        delta,
        phi_bar,
        additive_bound: additive_bound(delta, phi_bar),
        relative_eps,
        relative_bound: relative_eps.map(relative_bound),
    })
}

/// `TV(μ̂_t, μ*_t)` at one position.
pub fn per_step_tv(pos: &Position, estimate: &[f64], exact: &[f64]) -> Result<f64> {
    Ok(doob_kernel(pos, estimate)?.tv(&doob_kernel(pos, exact)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Telescoping {
    pub sequence_tv: f64,
    pub expected_step_tv: f64,
}

/// Sequence-level TV between two chained kernels next to the sum over steps
/// of the per-step TV, weighted by how often `reference` visits each position.
pub fn telescoping_check(
    graph: &StateGraph,
    approx: &[TokenDistribution],
    reference: &[TokenDistribution],
) -> Result<Telescoping> {
    let a = crate::exactlaws::chained_law(graph, approx)?;
    let b = crate::exactlaws::chained_law(graph, reference)?;
    let reach = graph.reach_probabilities(reference);
    let expected_step_tv = reach
        .iter()
        .zip(approx.iter().zip(reference))
        .map(|(r, (x, y))| r * x.tv(y))
        .sum();
    Ok(Telescoping { sequence_tv: a.tv(&b), expected_step_tv })
}

pub fn empirical_law(samples: &[Word]) -> Result<TerminalLaw> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples".into()));
    }
    let mut counts: BTreeMap<Word, f64> = BTreeMap::new();
    for w in samples {
        *counts.entry(w.clone()).or_insert(0.0) += 1.0;
    }
    let n = samples.len() as f64;
    counts.values_mut().for_each(|c| *c /= n);
    Ok(TerminalLaw::from_probs(counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TvInterval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub resamples: usize,
    pub seed: u64,
}

/// Percentile 95% interval for `TV(empirical, reference)` from
/// with-replacement resamples at full sample size.
pub fn bootstrap_tv_ci(samples: &[Word], reference: &TerminalLaw, resamples: usize, seed: u64) -> Result<TvInterval> {
    let point = empirical_law(samples)?.tv(reference);
    if resamples == 0 {
        return Err(Error::Precondition("need at least one resample".into()));
    }
    let mut atom_of: HashMap<&Word, usize> = HashMap::new();
    let ids: Vec<usize> = samples
        .iter()
        .map(|w| {
            let next = atom_of.len();
            *atom_of.entry(w).or_insert(next)
        })
        .collect();
    let mut ref_p = vec![0.0; atom_of.len()];
    for (w, &i) in &atom_of {
        ref_p[i] = reference.prob(w);
    }
    let unseen_ref_mass = (reference.total() - ref_p.iter().sum::<f64>()).max(0.0);
    let n = samples.len();
    let mut tvs: Vec<f64> = (0..resamples as u64)
        .map(|r| {
            let mut rng = seeding::rng_from([seed, r]);
            let mut counts = vec![0u32; ref_p.len()];
            for _ in 0..n {
                counts[ids[rand::Rng::random_range(&mut rng, 0..n)]] += 1;
            }
            let l1: f64 = counts.iter().zip(&ref_p).map(|(&c, &p)| (c as f64 / n as f64 - p).abs()).sum();
            0.5 * (l1 + unseen_ref_mass)
        })
        .collect();
    tvs.sort_by(f64::total_cmp);
    Ok(TvInterval { point, lo: quantile(&tvs, 0.025), hi: quantile(&tvs, 0.975), n, resamples, seed })
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let x = q * (sorted.len() - 1) as f64;
    let (i, frac) = (x.floor() as usize, x.fract());
    match sorted.get(i + 1) {
        Some(next) => sorted[i] + frac * (next - sorted[i]),
        None => sorted[i],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuralStats {
    /// Probability of each maximum nesting depth; empty for non-bracket grammars.
    pub depth_hist: Vec<f64>,
    /// Probability of each pre-EOS length.
    pub length_hist: Vec<f64>,
    pub mean_depth: Option<f64>,
    pub mean_length: f64,
}

pub fn structural_stats(law: &TerminalLaw, grammar: &Grammar) -> StructuralStats {
    let mut depth_hist = Vec::new();
    let mut length_hist = Vec::new();
    let bump = |h: &mut Vec<f64>, i: usize, p: f64| {
        if h.len() <= i {
            h.resize(i + 1, 0.0);
        }
        h[i] += p;
    };
    for (w, p) in law.iter() {
        bump(&mut length_hist, w.len(), p);
        if let Some(d) = grammar.max_depth(w) {
            bump(&mut depth_hist, d, p);
        }
    }
    let mean = |h: &[f64]| h.iter().enumerate().map(|(i, p)| i as f64 * p).sum::<f64>();
    StructuralStats {
        mean_depth: grammar.brackets().map(|_| mean(&depth_hist)),
        mean_length: mean(&length_hist),
        depth_hist,
        length_hist,
    }
}

/// KL between two histograms padded to a common length.
pub fn histogram_kl(a: &[f64], b: &[f64]) -> Divergence {
    let n = a.len().max(b.len());
    let pad = |h: &[f64]| h.iter().copied().chain(std::iter::repeat(0.0)).take(n).collect::<Vec<_>>();
    kl(&pad(a), &pad(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    pub t_verify_ms: f64,
    pub t_draft_ms: f64,
    pub t_forward_ms: f64,
    pub tokens_per_round: f64,
    pub overhead_forwards_per_round: f64,
    pub overhead_fixed_ms: f64,
}

impl CostModelParams {
    pub fn new(
        t_verify_ms: f64,
        t_draft_ms: f64,
        t_forward_ms: f64,
        tokens_per_round: f64,
        overhead_forwards_per_round: f64,
        overhead_fixed_ms: f64,
    ) -> Self {
        Self { t_verify_ms, t_draft_ms, t_forward_ms, tokens_per_round, overhead_forwards_per_round, overhead_fixed_ms }
    }
}

/// Tokens per second for one verify round.
pub fn cost_model(p: &CostModelParams) -> Result<f64> {
    let fields = [
        p.t_verify_ms,
        p.t_draft_ms,
        p.t_forward_ms,
        p.tokens_per_round,
        p.overhead_forwards_per_round,
        p.overhead_fixed_ms,
    ];
    if fields.iter().any(|v| !v.is_finite() || *v < 0.0) || p.tokens_per_round <= 0.0 {
        return Err(Error::Precondition("cost parameters must be finite, non-negative, tokens > 0".into()));
    }
    let round_ms = p.t_verify_ms + p.t_draft_ms + p.overhead_fixed_ms + p.overhead_forwards_per_round * p.t_forward_ms;
    if round_ms <= 0.0 {
        return Err(Error::Precondition("round time must be positive".into()));
    }
    Ok(1000.0 * p.tokens_per_round / round_ms)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HoeffdingRadius {
    pub per_candidate: f64,
    pub union: f64,
}

/// Radius of a `1 − α` interval for a mean of `k` Bernoulli draws, alone and
/// union-bounded over `num_candidates`.
pub fn hoeffding_radius(k: usize, alpha: f64, num_candidates: usize) -> Result<HoeffdingRadius> {
    if k == 0 || !(alpha > 0.0 && alpha < 1.0) || num_candidates == 0 {
        return Err(Error::Precondition(format!(
            "need k >= 1, alpha in (0,1), at least one candidate; got k={k}, alpha={alpha}"
        )));
    }
    let r = |m: f64| ((2.0 * m / alpha).ln() / (2.0 * k as f64)).sqrt();
    Ok(HoeffdingRadius { per_candidate: r(1.0), union: r(num_candidates as f64) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::GrammarSpec;
    use crate::toylm::Token;

    fn dist(p: &[f64]) -> TokenDistribution {
        TokenDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn tv_examples() {
        assert!((tv(&dist(&[0.9, 0.1]), &dist(&[0.5, 0.5])) - 0.4).abs() < 1e-15);
        assert_eq!(tv(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])), 1.0);
        let a = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(tv(&a, &a), 0.0);
    }

    #[test]
    fn kl_identity_two_tokens() {
        let pos = Position {
            cursor: crate::instance::Cursor { state: crate::grammar::MatcherState::Accepted, prefix: vec![] },
            dist: dist(&[0.5, 0.5]),
            valid: vec![Token(0), Token(1)],
        };
        let c = kl_identity_check(&pos, &[1.0, 0.5]).unwrap();
        let expected = (4.0f64 / 3.0).ln() - (2.0f64).ln() / 3.0;
        assert!((c.kl_direct - expected).abs() < 1e-15);
        assert!((c.kl_via_phi - expected).abs() < 1e-15);
    }

    #[test]
    fn bound_arithmetic() {
        assert!((additive_bound(0.428, 0.467).finite().unwrap() - 10.974).abs() < 0.01);
        assert!((additive_bound(0.240, 0.467).finite().unwrap() - 1.0573).abs() < 0.001);
        assert_eq!(additive_bound(0.0, 0.5), Bound::Finite(0.0));
        assert_eq!(additive_bound(0.5, 0.5), Bound::Vacuous);
        assert_eq!(relative_bound(0.5), 1.0);
        assert!((relative_bound(0.2) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cost_rows() {
        let t = |fw, fixed| cost_model(&CostModelParams::new(35.0, 5.0, 1.0, 3.07, fw, fixed)).unwrap();
        assert!((t(0.0, 0.0) - 76.75).abs() < 1e-9);
        assert!((t(7.5, 0.0) - 3070.0 / 47.5).abs() < 1e-9);
        assert!((t(0.0, 0.3) - 3070.0 / 40.3).abs() < 1e-9);
        assert!(cost_model(&CostModelParams::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn hoeffding() {
        let r = hoeffding_radius(8, 0.05, 2).unwrap();
        assert!((r.union - (80.0f64.ln() / 16.0).sqrt()).abs() < 1e-15);
        assert!(hoeffding_radius(8, 1.0, 2).is_err());
        assert!(hoeffding_radius(1 << 40, 0.05, 2).unwrap().union < 1e-5);
    }

    #[test]
    fn bootstrap_of_point_mass() {
        let w = vec![Token(0)];
        let samples = vec![w.clone(); 50];
        let reference = TerminalLaw::from_probs(BTreeMap::from([(w, 1.0)]));
        let ci = bootstrap_tv_ci(&samples, &reference, 100, 1).unwrap();
        assert_eq!((ci.point, ci.lo, ci.hi), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bootstrap_is_seeded() {
        let samples: Vec<Word> = (0..200).map(|i| vec![Token((i % 3) as u16)]).collect();
        let reference = empirical_law(&samples).unwrap();
        let a = bootstrap_tv_ci(&samples, &reference, 50, 4).unwrap();
        let b = bootstrap_tv_ci(&samples, &reference, 50, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.lo <= a.hi);
    }

    #[test]
    fn structure_of_simple_words() {
        let g = Grammar::new(GrammarSpec::Dyck { depth: 3, length: 8 }).unwrap();
        let law = TerminalLaw::from_probs(BTreeMap::from([(g.tokenize("(())").unwrap(), 1.0)]));
        let s = structural_stats(&law, &g);
        assert_eq!(s.mean_depth, Some(2.0));
        assert_eq!(s.mean_length, 4.0);
        let empty = TerminalLaw::from_probs(BTreeMap::from([(vec![], 1.0)]));
        let s = structural_stats(&empty, &g);
        assert_eq!((s.mean_depth, s.mean_length), (Some(0.0), 0.0));
    }

    #[test]
    fn kl_flags_missing_support() {
        assert_eq!(histogram_kl(&[0.5, 0.5], &[1.0]), Divergence::Infinite);
        assert_eq!(histogram_kl(&[1.0], &[1.0, 0.0]), Divergence::Finite(0.0));
    }
}
