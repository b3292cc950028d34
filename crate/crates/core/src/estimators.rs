//! Future-validity estimators, from free to exact.
//!
//! | tier | values | extra model forwards |
//! |------|--------|----------------------|
//! | `Uniform` | all ones | 0 |
//! | `OneStepCheap` | valid mass after `y` under the current `p_t` | 0 |
//! | `OneStepTrue` | valid mass after `y` under `p(· | prefix·y)` | 1 per non-EOS candidate |
//! | `MonteCarlo` | fraction of unmasked rollouts that land in the language | ≤ k·h per candidate |
//! | `ExactTable` | backward DP lookup | 0 at decode time |
//!
//! An EOS candidate completes the string, so every tier reports Φ = 1 for it.
//! Estimates are deterministic per decoding position: Monte Carlo streams are
//! derived from `(seed, position key, candidate)`, so the same position always
//! sees the same estimate whichever sampler asks.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exactlaws::{doob_kernel, phi_exact, PhiSource, PhiTable};
use crate::instance::{Cursor, Instance, Position};
use crate::seeding;
use crate::toylm::Token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum EstimatorSpec {
    Uniform,
    OneStepCheap,
    OneStepTrue,
    MonteCarlo {
        k: usize,
        /// Rollout horizon in tokens, EOS included; defaults to `cap - len(prefix)`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        h: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
    ExactTable,
    /// OneStep by default; escalates to Monte Carlo where the OneStep vector is
    /// dispersed and the local kernel has high entropy. No default thresholds.
    Hybrid {
        dispersion_threshold: f64,
        entropy_threshold: f64,
        min_tv_impact: f64,
        k: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl EstimatorSpec {
    pub fn tier(&self) -> Tier {
        match self {
            EstimatorSpec::Uniform => Tier::Uniform,
            EstimatorSpec::OneStepCheap => Tier::OneStepCheap,
            EstimatorSpec::OneStepTrue => Tier::OneStepTrue,
            EstimatorSpec::MonteCarlo { .. } => Tier::MonteCarlo,
            EstimatorSpec::ExactTable => Tier::Exact,
            EstimatorSpec::Hybrid { .. } => Tier::Hybrid,
        }
    }

    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::MonteCarlo { k, .. } => format!("MC(k={k})"),
            EstimatorSpec::Hybrid { k, .. } => format!("Hybrid(k={k})"),
            other => format!("{:?}", other.tier()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            EstimatorSpec::MonteCarlo { k, h, .. } => {
                if *k == 0 || *h == Some(0) {
                    return Err(Error::InvalidSpec("Monte Carlo needs k >= 1 and h >= 1".into()));
                }
            }
            EstimatorSpec::Hybrid { k, dispersion_threshold, entropy_threshold, min_tv_impact, .. } => {
                if *k == 0 {
                    return Err(Error::InvalidSpec("hybrid needs k >= 1".into()));
                }
                if [dispersion_threshold, entropy_threshold, min_tv_impact].iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidSpec("hybrid thresholds must be finite".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Uniform,
    OneStepCheap,
    OneStepTrue,
    MonteCarlo,
    Exact,
    Hybrid,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub lm_forwards: u64,
    pub trie_queries: u64,
}

impl std::ops::AddAssign for CostCounters {
    fn add_assign(&mut self, rhs: Self) {
        self.lm_forwards += rhs.lm_forwards;
        self.trie_queries += rhs.trie_queries;
    }
}

/// Per-candidate estimates for one decoding position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiVector {
    pub candidates: Vec<Token>,
    pub values: Vec<f64>,
    pub tier: Tier,
    pub cost: CostCounters,
}

impl PhiVector {
    pub fn new(candidates: Vec<Token>, values: Vec<f64>, tier: Tier, cost: CostCounters) -> Result<Self> {
        if candidates.len() != values.len() {
            return Err(Error::Precondition("candidate and value counts differ".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Precondition("Φ estimates must be finite and non-negative".into()));
        }
        if !values.iter().any(|&v| v > 0.0) {
            return Err(Error::EstimatorDegeneracy);
        }
        Ok(Self { candidates, values, tier, cost })
    }

    pub fn get(&self, y: Token) -> Option<f64> {
        self.candidates.iter().position(|&t| t == y).map(|i| self.values[i])
    }
}

/// A constant Φ̂ is a no-op after normalization, so correcting tiers must
/// vary across candidates. Uniform is the status quo and is exempt.
pub fn assert_per_candidate_variation(v: &PhiVector) -> Result<()> {
    if v.tier == Tier::Uniform || v.values.len() < 2 {
        return Ok(());
    }
    let finite: Vec<f64> = v.values.iter().copied().filter(|x| x.is_finite()).collect();
    if finite.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::Audit(format!(
            "{:?} produced a constant Φ̂ = {} over {} candidates",
            v.tier,
            finite.first().copied().unwrap_or(f64::NAN),
            finite.len()
        )));
    }
    Ok(())
}

/// `δ = max_y |Φ̂(y) − Φ(y)|` against the exact table.
pub fn additive_error(v: &PhiVector, exact: &PhiTable, inst: &Instance, cursor: &Cursor) -> Result<f64> {
    let id = exact.graph().find(inst, cursor).ok_or(Error::Coverage)?;
    let node = exact.graph().node(id);
    let truth = exact.values_at(id);
    v.candidates.iter().zip(&v.values).try_fold(0.0f64, |acc, (&y, &est)| {
        let i = node.position.valid.iter().position(|&t| t == y).ok_or(Error::Coverage)?;
        Ok(acc.max((est - truth[i]).abs()))
    })
}

/// A runnable estimator: the spec plus the exact table when it needs one.
#[derive(Debug, Clone)]
pub struct Estimator {
    spec: EstimatorSpec,
    exact: Option<Arc<PhiTable>>,
}

impl Estimator {
    pub fn new(spec: EstimatorSpec, inst: &Instance) -> Result<Self> {
        spec.validate()?;
        let exact = match spec {
            EstimatorSpec::ExactTable => Some(Arc::new(phi_exact(inst)?)),
            _ => None,
        };
        Ok(Self { spec, exact })
    }

    /// Reuses an already computed table for the `ExactTable` tier.
    pub fn with_table(spec: EstimatorSpec, table: Arc<PhiTable>) -> Result<Self> {
        spec.validate()?;
        let exact = matches!(spec, EstimatorSpec::ExactTable).then_some(table);
        Ok(Self { spec, exact })
    }

    pub fn spec(&self) -> &EstimatorSpec {
        &self.spec
    }

    pub fn estimate(&self, inst: &Instance, pos: &Position) -> Result<PhiVector> {
        if pos.valid.is_empty() {
            return Err(Error::Precondition("no candidates at this position".into()));
        }
        let eos = inst.eos();
        match &self.spec {
            EstimatorSpec::Uniform => {
                PhiVector::new(pos.valid.clone(), vec![1.0; pos.valid.len()], Tier::Uniform, CostCounters::default())
            }
            EstimatorSpec::OneStepCheap => one_step(inst, pos, false),
            EstimatorSpec::OneStepTrue => one_step(inst, pos, true),
            EstimatorSpec::MonteCarlo { k, h, seed } => monte_carlo(inst, pos, *k, *h, *seed),
            EstimatorSpec::ExactTable => {
                let table = self.exact.as_ref().expect("exact tier carries a table");
                let values = table.lookup(inst, &pos.cursor).ok_or(Error::Coverage)?.to_vec();
                PhiVector::new(pos.valid.clone(), values, Tier::Exact, CostCounters::default())
            }
            EstimatorSpec::Hybrid { dispersion_threshold, entropy_threshold, min_tv_impact, k, seed } => {
                let cheap = one_step(inst, pos, false)?;
                let content: Vec<f64> = cheap
                    .candidates
                    .iter()
                    .zip(&cheap.values)
                    .filter(|(&y, _)| y != eos)
                    .map(|(_, &v)| v)
                    .collect();
                let max = content.iter().copied().fold(0.0f64, f64::max);
                let min = content.iter().copied().fold(f64::INFINITY, f64::min);
                let dispersion = if content.len() < 2 { 0.0 } else { (max / min).ln() };
                let proj = pos.local_mask()?;
                let entropy: f64 = proj.support().map(|(_, p)| -p * p.ln()).sum();
                let mut out = if dispersion > *dispersion_threshold && entropy > *entropy_threshold {
                    let mc = monte_carlo(inst, pos, *k, None, *seed)?;
                    let impact = doob_kernel(pos, &mc.values)?.tv(&doob_kernel(pos, &cheap.values)?);
                    let mut chosen = if impact >= *min_tv_impact { mc.clone() } else { cheap.clone() };
                    chosen.cost = cheap.cost;
                    chosen.cost += mc.cost;
                    chosen
                } else {
                    cheap
                };
                out.tier = Tier::Hybrid;
                Ok(out)
            }
        }
    }
}

impl PhiSource for Estimator {
    fn phi_for(&self, inst: &Instance, pos: &Position) -> Result<Vec<f64>> {
        Ok(self.estimate(inst, pos)?.values)
    }
}

/// One-shot form of [`Estimator::estimate`].
pub fn estimate_phi(spec: &EstimatorSpec, inst: &Instance, pos: &Position) -> Result<PhiVector> {
    Estimator::new(spec.clone(), inst)?.estimate(inst, pos)
}

fn one_step(inst: &Instance, pos: &Position, conditioned: bool) -> Result<PhiVector> {
    let grammar = inst.grammar();
    let mut cost = CostCounters::default();
    let mut values = Vec::with_capacity(pos.valid.len());
    for &y in &pos.valid {
        if y == inst.eos() {
            values.push(1.0);
            continue;
        }
        let next = pos.cursor.advance(grammar, y)?;
        let allowed = grammar.valid_next(next.state);
        cost.trie_queries += 1;
        let mass = if conditioned {
            cost.lm_forwards += 1;
            inst.lm().next_token_dist(&next.prefix)?.mass_on(&allowed)
        } else {
            pos.dist.mass_on(&allowed)
        };
        values.push(mass);
    }
    let tier = if conditioned { Tier::OneStepTrue } else { Tier::OneStepCheap };
    PhiVector::new(pos.valid.clone(), values, tier, cost)
}

fn monte_carlo(inst: &Instance, pos: &Position, k: usize, h: Option<usize>, seed: u64) -> Result<PhiVector> {
    let grammar = inst.grammar();
    let horizon = h.unwrap_or(inst.cap() - pos.cursor.prefix.len());
    let key = inst.key_words(&pos.cursor);
    let mut cost = CostCounters::default();
    let mut values = Vec::with_capacity(pos.valid.len());
    for &y in &pos.valid {
        if y == inst.eos() {
            values.push(1.0);
            continue;
        }
        let start = pos.cursor.advance(grammar, y)?;
        let needed = grammar.min_completion(start.state);
        if horizon < needed {
            return Err(Error::HorizonTooShort { horizon, needed });
        }
        let words = std::iter::once(seed).chain(key.iter().copied()).chain(std::iter::once(y.0 as u64));
        let mut rng = seeding::rng_from(words);
        let mut hits = 0usize;
        for _ in 0..k {
            let (valid, forwards) = rollout(inst, &start, horizon, &mut rng)?;
            hits += usize::from(valid);
            cost.lm_forwards += forwards;
        }
        values.push(hits as f64 / k as f64);
    }
    // An all-zero draw is a legitimate Monte Carlo outcome but leaves no kernel.
    PhiVector::new(pos.valid.clone(), values, Tier::MonteCarlo, cost)
}

/// Samples the unmasked base model from `start` for at most `horizon` tokens.
/// Returns whether the result is a member of the language and the forwards spent.
fn rollout<R: Rng>(inst: &Instance, start: &Cursor, horizon: usize, rng: &mut R) -> Result<(bool, u64)> {
    let grammar = inst.grammar();
    let mut state = start.state;
    let mut prefix = start.prefix.clone();
    let mut forwards = 0;
    for _ in 0..horizon {
        let dist = inst.lm().next_token_dist(&prefix)?;
        forwards += 1;
        let u = dist.sample(rng);
        if !grammar.valid_next(state).contains(&u) {
            return Ok((false, forwards));
        }
        if u == inst.eos() {
            return Ok((true, forwards));
        }
        state = grammar.advance(state, u)?;
        prefix.push(u);
    }
    Ok((false, forwards))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::GrammarSpec;
    use crate::toylm::LmSpec;

    fn dyck_inst(seed: u64) -> Instance {
        Instance::new(GrammarSpec::Dyck { depth: 3, length: 8 }, LmSpec::seeded(seed, 1), 16).unwrap()
    }

    #[test]
    fn uniform_is_all_ones_and_free() {
        let inst = dyck_inst(1);
        let pos = inst.position(&inst.root()).unwrap();
        let v = estimate_phi(&EstimatorSpec::Uniform, &inst, &pos).unwrap();
        assert_eq!(v.values, vec![1.0; pos.valid.len()]);
        assert_eq!(v.cost, CostCounters::default());
        assert!(assert_per_candidate_variation(&v).is_ok());
    }

    #[test]
    fn variation_guard() {
        let mk = |vals: Vec<f64>, tier| PhiVector {
            candidates: (0..vals.len()).map(|i| Token(i as u16)).collect(),
            values: vals,
            tier,
            cost: CostCounters::default(),
        };
        assert!(assert_per_candidate_variation(&mk(vec![0.3, 0.3, 0.3], Tier::OneStepCheap)).is_err());
        assert!(assert_per_candidate_variation(&mk(vec![0.3, 0.7], Tier::OneStepCheap)).is_ok());
        assert!(assert_per_candidate_variation(&mk(vec![1.0, 1.0], Tier::Uniform)).is_ok());
    }

    #[test]
    fn cost_accounting() {
        let inst = dyck_inst(2);
        let cursor = inst.root().advance(inst.grammar(), Token(0)).unwrap();
        let pos = inst.position(&cursor).unwrap();
        assert_eq!(pos.valid.len(), 2);
        let cheap = estimate_phi(&EstimatorSpec::OneStepCheap, &inst, &pos).unwrap();
        assert_eq!(cheap.cost.lm_forwards, 0);
        assert_eq!(cheap.cost.trie_queries, 2);
        let tru = estimate_phi(&EstimatorSpec::OneStepTrue, &inst, &pos).unwrap();
        assert_eq!(tru.cost.lm_forwards, 2);
        let spec = EstimatorSpec::MonteCarlo { k: 5, h: None, seed: 3 };
        let mc = estimate_phi(&spec, &inst, &pos).unwrap();
        let h = (inst.cap() - 1) as u64;
        assert!(mc.cost.lm_forwards <= 5 * h * 2);
    }

    #[test]
    fn exact_tier_matches_table_and_has_zero_error() {
        let inst = dyck_inst(3);
        let est = Estimator::new(EstimatorSpec::ExactTable, &inst).unwrap();
        let table = phi_exact(&inst).unwrap();
        let pos = inst.position(&inst.root()).unwrap();
        let v = est.estimate(&inst, &pos).unwrap();
        assert_eq!(additive_error(&v, &table, &inst, &pos.cursor).unwrap(), 0.0);
    }

    #[test]
    fn uniform_error_is_one_minus_min_phi() {
        let inst = dyck_inst(4);
        let table = phi_exact(&inst).unwrap();
        let pos = inst.position(&inst.root()).unwrap();
        let v = estimate_phi(&EstimatorSpec::Uniform, &inst, &pos).unwrap();
        let min = table.lookup(&inst, &pos.cursor).unwrap().iter().copied().fold(1.0, f64::min);
        assert!((additive_error(&v, &table, &inst, &pos.cursor).unwrap() - (1.0 - min)).abs() < 1e-15);
    }

    #[test]
    fn short_horizon_is_rejected() {
        let inst = dyck_inst(5);
        let pos = inst.position(&inst.root()).unwrap();
        let spec = EstimatorSpec::MonteCarlo { k: 4, h: Some(1), seed: 0 };
        assert!(matches!(
            estimate_phi(&spec, &inst, &pos),
            Err(Error::HorizonTooShort { horizon: 1, needed: 2 })
        ));
    }

    #[test]
    fn monte_carlo_is_reproducible_per_position() {
        let inst = dyck_inst(6);
        let pos = inst.position(&inst.root()).unwrap();
        let spec = EstimatorSpec::MonteCarlo { k: 32, h: None, seed: 9 };
        let a = estimate_phi(&spec, &inst, &pos).unwrap();
        let b = estimate_phi(&spec, &inst, &pos).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn hybrid_labels_its_tier() {
        let inst = dyck_inst(7);
        let pos = inst.position(&inst.root()).unwrap();
        let spec = EstimatorSpec::Hybrid {
            dispersion_threshold: 0.0,
            entropy_threshold: 0.0,
            min_tv_impact: 0.0,
            k: 8,
            seed: 1,
        };
        let v = estimate_phi(&spec, &inst, &pos).unwrap();
        assert_eq!(v.tier, Tier::Hybrid);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = EstimatorSpec::MonteCarlo { k: 16, h: None, seed: 2 };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(text, r#"{"variant":"MonteCarlo","k":16,"seed":2}"#);
        assert_eq!(serde_json::from_str::<EstimatorSpec>(&text).unwrap(), spec);
    }
}
