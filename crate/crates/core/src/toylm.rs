//! Deterministic toy language models over small character vocabularies.
//!
//! Every model is a pure function of `(spec, prefix)`. Sequences are capped
//! at `cap` tokens: at a prefix of exactly `cap` tokens the model emits EOS
//! with probability one, so each model is a proper law over strings of
//! length at most `cap`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Standard deviation of the seeded toy logits.
pub const SEEDED_LOGIT_SCALE: f64 = 1.5;

/// Default hard length cap.
pub const DEFAULT_CAP: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A complete or partial token sequence (EOS excluded).
pub type Word = Vec<Token>;

/// Ordered vocabulary; ids are dense `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    glyphs: Vec<String>,
    eos: Token,
}

impl Vocab {
    pub fn new(glyphs: Vec<String>, eos: Token) -> Result<Self> {
        if glyphs.len() < 2 {
            return Err(Error::InvalidSpec("vocabulary needs at least two tokens".into()));
        }
        if eos.index() >= glyphs.len() {
            return Err(Error::InvalidSpec("EOS id outside vocabulary".into()));
        }
        if glyphs.len() > u16::MAX as usize {
            return Err(Error::InvalidSpec("vocabulary too large".into()));
        }
        Ok(Self { glyphs, eos })
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.glyphs.len()).map(|i| Token(i as u16))
    }

    pub fn glyph(&self, t: Token) -> &str {
        &self.glyphs[t.index()]
    }

    pub fn lookup(&self, glyph: &str) -> Option<Token> {
        self.glyphs.iter().position(|g| g == glyph).map(|i| Token(i as u16))
    }

    /// Renders a word by concatenating glyphs.
    pub fn render(&self, word: &[Token]) -> String {
        word.iter().map(|&t| self.glyph(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum LmSpec {
    /// Logits hashed from `(seed, last context_order tokens, candidate)`.
    /// `bias` is added per token id; shorter vectors are zero-padded.
    /// `scale` is the standard deviation of the hashed logits.
    SeededLogit {
        seed: u64,
        context_order: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        bias: Vec<f64>,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// iid bits over glyphs "0" and "1"; EOS only at the cap.
    Bernoulli { p1: f64 },
    /// `table[prev][next]` scores; the EOS row conditions the first token.
    BigramChar { table: Vec<Vec<f64>>, temperature: f64 },
}

fn default_scale() -> f64 {
    SEEDED_LOGIT_SCALE
}

impl LmSpec {
    pub fn seeded(seed: u64, context_order: usize) -> Self {
        LmSpec::SeededLogit { seed, context_order, bias: Vec::new(), scale: SEEDED_LOGIT_SCALE }
    }

    /// Bigram model whose `|V|×|V|` scores are drawn from `seed`.
    pub fn seeded_bigram(vocab_len: usize, seed: u64, temperature: f64) -> Self {
        let normal = Normal::new(0.0, SEEDED_LOGIT_SCALE).expect("valid normal");
        let table = (0..vocab_len as u64)
            .map(|prev| {
                let mut rng = seeding::rng_from([seed, prev]);
                (0..vocab_len).map(|_| normal.sample(&mut rng)).collect()
            })
            .collect();
        LmSpec::BigramChar { table, temperature }
    }

    /// Same family with a different seed; non-seeded variants are returned unchanged.
    pub fn with_seed(&self, new_seed: u64) -> Self {
        match self {
            LmSpec::SeededLogit { context_order, bias, scale, .. } => LmSpec::SeededLogit {
                seed: new_seed,
                context_order: *context_order,
                bias: bias.clone(),
                scale: *scale,
            },
            other => other.clone(),
        }
    }
}

/// Probability vector over the whole vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Validates non-negativity and normalization to 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Precondition("distribution has negative or non-finite mass".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("distribution sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn one_hot(n: usize, t: Token) -> Self {
        let mut probs = vec![0.0; n];
        probs[t.index()] = 1.0;
        Self { probs }
    }

    /// Normalizes log-weights with a single exponentiation per entry.
    /// Entries equal to `-inf` get zero mass.
    pub fn from_log_weights(log_w: &[f64]) -> Result<Self> {
        let lse = log_sum_exp(log_w);
        if !lse.is_finite() {
            return Err(Error::Precondition("all log-weights are -inf".into()));
        }
        Ok(Self { probs: log_w.iter().map(|&w| (w - lse).exp()).collect() })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, t: Token) -> f64 {
        self.probs[t.index()]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support(&self) -> impl Iterator<Item = (Token, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (Token(i as u16), p))
    }

    pub fn mass_on(&self, tokens: &[Token]) -> f64 {
        tokens.iter().map(|&t| self.prob(t)).sum()
    }

    /// Masks to `allowed` and renormalizes: the locally projected kernel.
    pub fn project(&self, allowed: &[Token]) -> Result<Self> {
        let z = self.mass_on(allowed);
        if z <= 0.0 {
            return Err(Error::NonDegeneracy);
        }
        let mut probs = vec![0.0; self.probs.len()];
        for &t in allowed {
            probs[t.index()] = self.probs[t.index()] / z;
        }
        Ok(Self { probs })
    }

    /// Inverse-CDF draw from one uniform.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Token {
        self.sample_with_uniform(rng.random::<f64>())
    }

    pub fn sample_with_uniform(&self, u: f64) -> Token {
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return Token(i as u16);
            }
        }
        Token(last as u16)
    }

    pub fn tv(&self, other: &Self) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Result<TokenDistribution> {
    TokenDistribution::from_log_weights(logits)
}

/// The part of a prefix a model actually conditions on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey {
    pub len: u32,
    pub tail: Vec<Token>,
}

impl ContextKey {
    pub fn words(&self) -> impl Iterator<Item = u64> + '_ {
        std::iter::once(self.len as u64).chain(self.tail.iter().map(|t| t.0 as u64))
    }
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    spec: LmSpec,
    vocab: Vocab,
    cap: usize,
    bits: Option<(Token, Token)>,
}

impl LanguageModel {
    pub fn new(spec: LmSpec, vocab: Vocab, cap: usize) -> Result<Self> {
        let mut bits = None;
        match &spec {
            LmSpec::SeededLogit { bias, scale, .. } => {
                if bias.len() > vocab.len() || bias.iter().any(|b| !b.is_finite()) {
                    return Err(Error::InvalidSpec("bias must be finite and at most |V| long".into()));
                }
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::InvalidSpec(format!("logit scale {scale} must be positive")));
                }
            }
            LmSpec::Bernoulli { p1 } => {
                if !(*p1 > 0.0 && *p1 < 1.0) {
                    return Err(Error::InvalidSpec(format!("p1 = {p1} not in (0,1)")));
                }
                let zero = vocab.lookup("0");
                let one = vocab.lookup("1");
                match (zero, one) {
                    (Some(z), Some(o)) => bits = Some((z, o)),
                    _ => {
                        return Err(Error::InvalidSpec(
                            "Bernoulli model needs glyphs \"0\" and \"1\" in the vocabulary".into(),
                        ))
                    }
                }
            }
            LmSpec::BigramChar { table, temperature } => {
                if !(*temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::InvalidSpec("temperature must be positive".into()));
                }
                if table.len() != vocab.len()
                    || table.iter().any(|r| r.len() != vocab.len() || r.iter().any(|w| !w.is_finite()))
                {
                    return Err(Error::InvalidSpec("bigram table must be a finite |V|x|V| matrix".into()));
                }
            }
        }
        if cap == 0 {
            return Err(Error::InvalidSpec("length cap must be positive".into()));
        }
        Ok(Self { spec, vocab, cap, bits })
    }

    pub fn spec(&self) -> &LmSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    fn check_len(&self, prefix: &[Token]) -> Result<()> {
        if prefix.len() > self.cap {
            return Err(Error::LengthCap { len: prefix.len(), cap: self.cap });
        }
        Ok(())
    }

    /// Raw scores; `softmax(logits)` is the next-token distribution.
    pub fn logits(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        self.check_len(prefix)?;
        let n = self.vocab.len();
        let eos = self.vocab.eos();
        if prefix.len() == self.cap {
            let mut z = vec![f64::NEG_INFINITY; n];
            z[eos.index()] = 0.0;
            return Ok(z);
        }
        let z = match &self.spec {
            LmSpec::SeededLogit { seed, context_order, bias, scale } => {
                let ctx = self.context_key(prefix);
                let normal = Normal::new(0.0, *scale).expect("validated scale");
                // Tail shorter than the order is padded with a sentinel.
                let pad = context_order.saturating_sub(ctx.tail.len());
                (0..n)
                    .map(|y| {
                        let words = std::iter::once(*seed)
                            .chain(std::iter::repeat_n(u64::MAX, pad))
                            .chain(ctx.tail.iter().map(|t| t.0 as u64))
                            .chain(std::iter::once(y as u64));
                        let mut rng = seeding::rng_from(words);
                        normal.sample(&mut rng) + bias.get(y).copied().unwrap_or(0.0)
                    })
                    .collect()
            }
            LmSpec::Bernoulli { p1 } => {
                let (zero, one) = self.bits.expect("validated at construction");
                let mut z = vec![f64::NEG_INFINITY; n];
                z[one.index()] = p1.ln();
                z[zero.index()] = (1.0 - p1).ln();
                z
            }
            LmSpec::BigramChar { table, temperature } => {
                let prev = prefix.last().copied().unwrap_or(eos);
                table[prev.index()].iter().map(|w| w / temperature).collect()
            }
        };
        Ok(z)
    }

    pub fn next_token_dist(&self, prefix: &[Token]) -> Result<TokenDistribution> {
        softmax(&self.logits(prefix)?)
    }

    /// Two prefixes with equal keys get bitwise-equal distributions.
    pub fn context_key(&self, prefix: &[Token]) -> ContextKey {
        let keep = match &self.spec {
            LmSpec::SeededLogit { context_order, .. } => *context_order,
            LmSpec::Bernoulli { .. } => 0,
            LmSpec::BigramChar { .. } => 1,
        };
        let start = prefix.len().saturating_sub(keep);
        ContextKey { len: prefix.len() as u32, tail: prefix[start..].to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dyck_vocab() -> Vocab {
        Vocab::new(vec!["(".into(), ")".into(), "$".into()], Token(2)).unwrap()
    }

    fn bits_vocab() -> Vocab {
        Vocab::new(vec!["0".into(), "1".into(), "$".into()], Token(2)).unwrap()
    }

    #[test]
    fn bernoulli_matches_p1() {
        let lm = LanguageModel::new(LmSpec::Bernoulli { p1: 0.62 }, bits_vocab(), 20).unwrap();
        let d = lm.next_token_dist(&[Token(1), Token(0)]).unwrap();
        assert!((d.prob(Token(1)) - 0.62).abs() < 1e-12);
        assert!((d.prob(Token(0)) - 0.38).abs() < 1e-12);
        let z = lm.logits(&[]).unwrap();
        assert!((z[1] - z[0] - (0.62f64 / 0.38).ln()).abs() < 1e-12);
    }

    #[test]
    fn cap_forces_eos_and_rejects_longer() {
        let lm = LanguageModel::new(LmSpec::seeded(1, 1), dyck_vocab(), 2).unwrap();
        let d = lm.next_token_dist(&[Token(0), Token(1)]).unwrap();
        assert_eq!(d.prob(Token(2)), 1.0);
        assert!(matches!(
            lm.next_token_dist(&[Token(0); 3]),
            Err(Error::LengthCap { len: 3, cap: 2 })
        ));
    }

    #[test]
    fn uniform_bigram_is_uniform() {
        let spec = LmSpec::BigramChar { table: vec![vec![0.3; 3]; 3], temperature: 1.0 };
        let lm = LanguageModel::new(spec, dyck_vocab(), 8).unwrap();
        let d = lm.next_token_dist(&[Token(0)]).unwrap();
        for t in lm.vocab().tokens() {
            assert!((d.prob(t) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_is_deterministic_and_positive() {
        let lm = LanguageModel::new(LmSpec::seeded(7, 1), dyck_vocab(), 16).unwrap();
        let a = lm.next_token_dist(&[Token(0)]).unwrap();
        let b = lm.next_token_dist(&[Token(0)]).unwrap();
        assert_eq!(a.probs(), b.probs());
        assert!(a.probs().iter().all(|&p| p > 0.0));
        assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seeded_respects_context_order() {
        let lm = LanguageModel::new(LmSpec::seeded(3, 1), dyck_vocab(), 16).unwrap();
        let a = lm.next_token_dist(&[Token(1), Token(0)]).unwrap();
        let b = lm.next_token_dist(&[Token(0), Token(0), Token(0)]).unwrap();
        assert_eq!(a.probs(), b.probs());
    }

    #[test]
    fn zero_logits_give_uniform() {
        let d = softmax(&[0.0; 4]).unwrap();
        assert!(d.probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(LanguageModel::new(LmSpec::Bernoulli { p1: 1.0 }, bits_vocab(), 4).is_err());
        assert!(LanguageModel::new(LmSpec::Bernoulli { p1: 0.5 }, dyck_vocab(), 4).is_err());
        let bad = LmSpec::BigramChar { table: vec![vec![0.0; 3]; 3], temperature: 0.0 };
        assert!(LanguageModel::new(bad, dyck_vocab(), 4).is_err());
        assert!(Vocab::new(vec!["$".into()], Token(0)).is_err());
    }

    #[test]
    fn projection_renormalizes() {
        let d = TokenDistribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        let p = d.project(&[Token(1), Token(2)]).unwrap();
        assert_eq!(p.probs(), &[0.0, 0.5, 0.5]);
        assert!(matches!(
            TokenDistribution::one_hot(3, Token(0)).project(&[Token(1)]),
            Err(Error::NonDegeneracy)
        ));
    }

    #[test]
    fn lm_spec_json_is_variant_tagged() {
        let s = serde_json::to_string(&LmSpec::Bernoulli { p1: 0.62 }).unwrap();
        assert_eq!(s, r#"{"variant":"Bernoulli","p1":0.62}"#);
        let back: LmSpec = serde_json::from_str(r#"{"variant":"SeededLogit","seed":7,"context_order":1}"#).unwrap();
        assert_eq!(back, LmSpec::seeded(7, 1));
    }
}
