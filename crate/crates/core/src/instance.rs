//! A grammar paired with a base model: the object every law, estimator and
//! sampler works on.

use crate::error::{Error, Result};
use crate::grammar::{Grammar, GrammarSpec, MatcherState};
use crate::toylm::{ContextKey, LanguageModel, LmSpec, Token, TokenDistribution, Vocab, Word};

/// Identifies a decoding position up to everything the kernels can observe.
pub type NodeKey = (MatcherState, ContextKey);

/// A committed prefix together with its matcher state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cursor {
    pub state: MatcherState,
    pub prefix: Word,
}

impl Cursor {
    /// Returns the advanced cursor; `self` is left untouched.
    pub fn advance(&self, grammar: &Grammar, y: Token) -> Result<Cursor> {
        let state = grammar.advance(self.state, y)?;
        let mut prefix = self.prefix.clone();
        if y != grammar.eos() {
            prefix.push(y);
        }
        Ok(Cursor { state, prefix })
    }

    pub fn is_finished(&self) -> bool {
        self.state == MatcherState::Accepted
    }
}

/// Everything known at one decoding position.
#[derive(Debug, Clone)]
pub struct Position {
    pub cursor: Cursor,
    /// Unmasked next-token distribution `p_t`.
    pub dist: TokenDistribution,
    /// `A_t`, in increasing token order.
    pub valid: Vec<Token>,
}

impl Position {
    pub fn masked_mass(&self) -> f64 {
        self.dist.mass_on(&self.valid)
    }

    /// `μ^proj_t`.
    pub fn local_mask(&self) -> Result<TokenDistribution> {
        self.dist.project(&self.valid)
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    grammar: Grammar,
    lm: LanguageModel,
}

impl Instance {
    pub fn new(grammar: GrammarSpec, lm: LmSpec, cap: usize) -> Result<Self> {
        let grammar = Grammar::new(grammar)?;
        let lm = LanguageModel::new(lm, grammar.vocab().clone(), cap)?;
        Self::from_parts(grammar, lm)
    }

    pub fn from_parts(grammar: Grammar, lm: LanguageModel) -> Result<Self> {
        if lm.vocab() != grammar.vocab() {
            return Err(Error::InvalidSpec("model and grammar vocabularies differ".into()));
        }
        if lm.cap() < grammar.max_length() {
            return Err(Error::InvalidSpec(format!(
                "length cap {} is below the longest string of the grammar ({})",
                lm.cap(),
                grammar.max_length()
            )));
        }
        Ok(Self { grammar, lm })
    }

    /// Same grammar and cap under another model spec.
    pub fn with_lm(&self, spec: LmSpec) -> Result<Self> {
        let lm = LanguageModel::new(spec, self.grammar.vocab().clone(), self.lm.cap())?;
        Self::from_parts(self.grammar.clone(), lm)
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn lm(&self) -> &LanguageModel {
        &self.lm
    }

    pub fn vocab(&self) -> &Vocab {
        self.grammar.vocab()
    }

    pub fn cap(&self) -> usize {
        self.lm.cap()
    }

    pub fn eos(&self) -> Token {
        self.grammar.eos()
    }

    pub fn root(&self) -> Cursor {
        Cursor { state: self.grammar.initial_state(), prefix: Vec::new() }
    }

    pub fn key(&self, cursor: &Cursor) -> NodeKey {
        (cursor.state, self.lm.context_key(&cursor.prefix))
    }

    /// Stable 64-bit words describing a node, used to derive RNG streams.
    pub fn key_words(&self, cursor: &Cursor) -> Vec<u64> {
        let (state, ctx) = self.key(cursor);
        state.key_words().into_iter().chain(ctx.words()).collect()
    }

    pub fn position(&self, cursor: &Cursor) -> Result<Position> {
        let dist = self.lm.next_token_dist(&cursor.prefix)?;
        let valid = self.grammar.valid_next(cursor.state);
        Ok(Position { cursor: cursor.clone(), dist, valid })
    }

    /// Unconditioned log-probability of a complete word, EOS included.
    pub fn log_prob(&self, word: &[Token]) -> Result<f64> {
        let mut lp = 0.0;
        for i in 0..=word.len() {
            let d = self.lm.next_token_dist(&word[..i])?;
            let y = word.get(i).copied().unwrap_or(self.eos());
            lp += d.prob(y).ln();
        }
        Ok(lp)
    }
}
