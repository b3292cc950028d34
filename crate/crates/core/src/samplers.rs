//! Ancestral and speculative sampling loops.
//!
//! Every loop draws its randomness through [`Randomness`], which has two
//! implementations: any `rand::Rng`, and the scripted chooser behind
//! [`enumerate_outcomes`] that walks every branch of a step and returns the
//! exact law of its result.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Estimator, EstimatorSpec};
use crate::exactlaws::doob_kernel;
use crate::instance::{Cursor, Instance, NodeKey};
use crate::seeding;
use crate::toylm::{LmSpec, Token, TokenDistribution, Word};

pub trait Randomness {
    /// `true` with probability `p`.
    fn coin(&mut self, p: f64) -> bool;
    fn categorical(&mut self, dist: &TokenDistribution) -> Token;
}

impl<R: Rng + ?Sized> Randomness for R {
    fn coin(&mut self, p: f64) -> bool {
        self.random::<f64>() < p
    }

    fn categorical(&mut self, dist: &TokenDistribution) -> Token {
        dist.sample(self)
    }
}

/// Stream for sample `index` of an experiment, independent of draw order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    seeding::rng_from([seed, index])
}

/// Replays `step` along every branch of its random choices and sums path
/// probabilities by outcome. Zero-probability branches are never entered.
pub fn enumerate_outcomes<T, F>(mut step: F) -> Result<BTreeMap<T, f64>>
where
    T: Ord,
    F: FnMut(&mut dyn Randomness) -> Result<T>,
{
    let mut out = BTreeMap::new();
    let mut forced: Vec<usize> = Vec::new();
    loop {
        let mut script = Script { forced: &forced, depth: 0, prob: 1.0, arity: Vec::new() };
        let outcome = step(&mut script)?;
        *out.entry(outcome).or_insert(0.0) += script.prob;
        let mut path: Vec<usize> = forced.iter().copied().chain(std::iter::repeat(0)).take(script.arity.len()).collect();
        let arity = script.arity;
        // Odometer over the branch path, deepest choice first.
        loop {
            match path.len() {
                0 => return Ok(out),
                d => {
                    path[d - 1] += 1;
                    if path[d - 1] < arity[d - 1] {
                        break;
                    }
                    path.pop();
                }
            }
        }
        forced = path;
    }
}

struct Script<'a> {
    forced: &'a [usize],
    depth: usize,
    prob: f64,
    arity: Vec<usize>,
}

impl Script<'_> {
    fn choose(&mut self, weights: &[f64]) -> usize {
        let branch = self.forced.get(self.depth).copied().unwrap_or(0);
        self.arity.push(weights.len());
        self.depth += 1;
        self.prob *= weights[branch];
        branch
    }
}

impl Randomness for Script<'_> {
    fn coin(&mut self, p: f64) -> bool {
        let options: Vec<(bool, f64)> = [(true, p), (false, 1.0 - p)].into_iter().filter(|o| o.1 > 0.0).collect();
        let weights: Vec<f64> = options.iter().map(|o| o.1).collect();
        options[self.choose(&weights)].0
    }

    fn categorical(&mut self, dist: &TokenDistribution) -> Token {
        let options: Vec<(Token, f64)> = dist.support().collect();
        let weights: Vec<f64> = options.iter().map(|o| o.1).collect();
        options[self.choose(&weights)].0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum KernelSpec {
    LocalMask,
    Doob { estimator: EstimatorSpec },
}

/// Per-step sampling kernel. Outputs are cached per decoding position, which
/// is sound because every estimator is deterministic per position.
#[derive(Debug)]
pub struct StepKernel {
    estimator: Option<Estimator>,
    cache: Mutex<HashMap<NodeKey, TokenDistribution>>,
}

impl StepKernel {
    pub fn local_mask() -> Self {
        Self { estimator: None, cache: Mutex::default() }
    }

    pub fn doob(estimator: Estimator) -> Self {
        Self { estimator: Some(estimator), cache: Mutex::default() }
    }

    pub fn from_spec(spec: &KernelSpec, inst: &Instance) -> Result<Self> {
        Ok(match spec {
            KernelSpec::LocalMask => Self::local_mask(),
            KernelSpec::Doob { estimator } => Self::doob(Estimator::new(estimator.clone(), inst)?),
        })
    }

    pub fn label(&self) -> String {
        match &self.estimator {
            None => "LocalMask".into(),
            Some(e) => format!("Doob({})", e.spec().label()),
        }
    }

    /// Distribution over the full vocabulary, supported on `valid_next`.
    pub fn step(&self, inst: &Instance, cursor: &Cursor) -> Result<TokenDistribution> {
        let key = inst.key(cursor);
        if let Some(d) = self.cache.lock().expect("kernel cache poisoned").get(&key) {
            return Ok(d.clone());
        }
        let pos = inst.position(cursor)?;
        let dist = match &self.estimator {
            None => pos.local_mask()?,
            Some(e) => doob_kernel(&pos, &e.estimate(inst, &pos)?.values)?,
        };
        self.cache.lock().expect("kernel cache poisoned").insert(key, dist.clone());
        Ok(dist)
    }
}

/// Temperature-1 ancestral sampling from the chained kernel.
pub fn ancestral_sample<R: Randomness + ?Sized>(kernel: &StepKernel, inst: &Instance, rng: &mut R) -> Result<Word> {
    let mut cursor = inst.root();
    for _ in 0..=inst.cap() {
        let y = rng.categorical(&kernel.step(inst, &cursor)?);
        cursor = cursor.advance(inst.grammar(), y)?;
        if cursor.is_finished() {
            return Ok(cursor.prefix);
        }
    }
    Err(Error::Audit(format!("no EOS within the length cap {}", inst.cap())))
}

pub fn ancestral_many(kernel: &StepKernel, inst: &Instance, n: usize, seed: u64) -> Result<Vec<Word>> {
    (0..n as u64).map(|i| ancestral_sample(kernel, inst, &mut sample_rng(seed, i))).collect()
}

/// `min(1, p(y)/q(y))`.
pub fn acceptance_probability(target: &TokenDistribution, draft: &TokenDistribution, y: Token) -> Result<f64> {
    let q = draft.prob(y);
    if q <= 0.0 {
        return Err(Error::Precondition(format!("draft token {} has zero draft probability", y.0)));
    }
    Ok((target.prob(y) / q).min(1.0))
}

/// `(p − q)⁺ / Z⁺`.
pub fn residual(target: &TokenDistribution, draft: &TokenDistribution) -> Result<TokenDistribution> {
    let logw: Vec<f64> = target
        .probs()
        .iter()
        .zip(draft.probs())
        .map(|(p, q)| if p > q { (p - q).ln() } else { f64::NEG_INFINITY })
        .collect();
    TokenDistribution::from_log_weights(&logw)
        .map_err(|_| Error::Precondition("residual has no positive mass".into()))
}

/// One Leviathan accept/reject. Returns whether the draft was kept and the
/// committed token.
pub fn leviathan_step<R: Randomness + ?Sized>(
    target: &TokenDistribution,
    draft: &TokenDistribution,
    draft_token: Token,
    rng: &mut R,
) -> Result<(bool, Token)> {
    if target.len() != draft.len() {
        return Err(Error::Precondition("target and draft vocabularies differ".into()));
    }
    let a = acceptance_probability(target, draft, draft_token)?;
    if a >= 1.0 || rng.coin(a) {
        return Ok((true, draft_token));
    }
    Ok((false, rng.categorical(&residual(target, draft)?)))
}

/// Diagnostic verifier: keeps the draft only if an independent target draw
/// equals it, otherwise commits a fresh target draw.
pub fn equality_verifier_step<R: Randomness + ?Sized>(
    target: &TokenDistribution,
    draft: &TokenDistribution,
    rng: &mut R,
) -> Token {
    let d = rng.categorical(draft);
    let s = rng.categorical(target);
    if d == s {
        d
    } else {
        rng.categorical(target)
    }
}

/// Closed form `p_i (1 + q_i − ⟨p, q⟩)`.
pub fn equality_verifier_marginal(target: &TokenDistribution, draft: &TokenDistribution) -> Vec<f64> {
    let p = target.probs();
    let q = draft.probs();
    let inner: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    p.iter().zip(q).map(|(pi, qi)| pi * (1.0 + qi - inner)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptStats {
    pub proposed: u64,
    pub accepted: u64,
    pub residual_draws: u64,
    pub rounds: u64,
}

impl AcceptStats {
    pub fn accept_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn tokens_per_round(&self, committed: u64) -> f64 {
        committed as f64 / self.rounds.max(1) as f64
    }
}

impl std::ops::AddAssign for AcceptStats {
    fn add_assign(&mut self, rhs: Self) {
        self.proposed += rhs.proposed;
        self.accepted += rhs.accepted;
        self.residual_draws += rhs.residual_draws;
        self.rounds += rhs.rounds;
    }
}

pub const DEFAULT_GAMMA: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    pub gamma: usize,
    pub draft_lm: LmSpec,
    pub target: KernelSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecOutcome {
    pub word: Word,
    pub stats: AcceptStats,
    /// Rejections after which the kept state disagreed with a fresh matcher.
    pub rollback_failures: u64,
    pub rollback_checks: u64,
}

/// Block speculative decoder: a locally masked draft proposes up to γ tokens,
/// the target kernel verifies them left to right.
#[derive(Debug)]
pub struct SpecDecoder {
    target_inst: Instance,
    draft_inst: Instance,
    target: StepKernel,
    draft: StepKernel,
    gamma: usize,
}

impl SpecDecoder {
    pub fn new(cfg: &SpecConfig, inst: &Instance) -> Result<Self> {
        let target = StepKernel::from_spec(&cfg.target, inst)?;
        Self::with_kernel(cfg, inst, target)
    }

    pub fn with_kernel(cfg: &SpecConfig, inst: &Instance, target: StepKernel) -> Result<Self> {
        if cfg.gamma == 0 {
            return Err(Error::InvalidSpec("gamma must be at least 1".into()));
        }
        Ok(Self {
            target_inst: inst.clone(),
            draft_inst: inst.with_lm(cfg.draft_lm.clone())?,
            target,
            draft: StepKernel::local_mask(),
            gamma: cfg.gamma,
        })
    }

    pub fn decode<R: Randomness + ?Sized>(&self, rng: &mut R) -> Result<SpecOutcome> {
        let grammar = self.target_inst.grammar();
        let mut cursor = self.target_inst.root();
        let mut stats = AcceptStats::default();
        let (mut rollback_failures, mut rollback_checks) = (0, 0);
        let max_rounds = self.target_inst.cap() + 1;
        while !cursor.is_finished() {
            if stats.rounds as usize >= max_rounds {
                return Err(Error::Audit("speculative loop made no progress".into()));
            }
            stats.rounds += 1;

            let mut block = Vec::with_capacity(self.gamma);
            let mut ahead = cursor.clone();
            while block.len() < self.gamma && !ahead.is_finished() {
                let q = self.draft.step(&self.draft_inst, &ahead)?;
                let d = rng.categorical(&q);
                ahead = ahead.advance(grammar, d)?;
                block.push((q, d));
            }

            let mut all_accepted = true;
            for (q, d) in block {
                let p = self.target.step(&self.target_inst, &cursor)?;
                stats.proposed += 1;
                let (accepted, y) = leviathan_step(&p, &q, d, rng)?;
                cursor = cursor.advance(grammar, y)?;
                if accepted {
                    stats.accepted += 1;
                } else {
                    stats.residual_draws += 1;
                    all_accepted = false;
                    rollback_checks += 1;
                    if !matches_fresh_matcher(&self.target_inst, &cursor) {
                        rollback_failures += 1;
                    }
                    break;
                }
                if cursor.is_finished() {
                    break;
                }
            }

            if all_accepted && !cursor.is_finished() {
                let p = self.target.step(&self.target_inst, &cursor)?;
                cursor = cursor.advance(grammar, rng.categorical(&p))?;
            }
        }
        Ok(SpecOutcome { word: cursor.prefix, stats, rollback_failures, rollback_checks })
    }

    pub fn decode_many(&self, n: usize, seed: u64) -> Result<SpecBatch> {
        let mut batch = SpecBatch::default();
        for i in 0..n as u64 {
            let out = self.decode(&mut sample_rng(seed, i))?;
            batch.stats += out.stats;
            batch.rollback_failures += out.rollback_failures;
            batch.rollback_checks += out.rollback_checks;
            batch.words.push(out.word);
        }
        Ok(batch)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpecBatch {
    pub words: Vec<Word>,
    pub stats: AcceptStats,
    pub rollback_failures: u64,
    pub rollback_checks: u64,
}

/// Bit-exact comparison against a matcher rebuilt from the committed prefix.
fn matches_fresh_matcher(inst: &Instance, cursor: &Cursor) -> bool {
    if cursor.is_finished() {
        return inst.grammar().accepts(&cursor.prefix);
    }
    let g = inst.grammar();
    match g.run(&cursor.prefix) {
        Ok(fresh) => fresh == cursor.state && g.valid_next(fresh) == g.valid_next(cursor.state),
        Err(_) => false,
    }
}
