//! Exact and sampled laws for grammar-constrained decoding on toy languages.
//!
//! The pieces, bottom up:
//!
//! - [`toylm`]: deterministic toy next-token models over small vocabularies.
//! - [`grammar`]: Dyck, finite-trie and budget-DFA matchers.
//! - [`exactlaws`]: exact future validity Φ, `μ*`, `μ^proj` and Doob kernels.
//! - [`estimators`]: cheaper approximations of Φ.
//! - [`samplers`]: ancestral and speculative decoding loops.
//! - [`metrics`]: TV, KL identities, fidelity bounds, bootstrap intervals.
//! - [`harness`]: config-driven experiments behind the `philab` binary.

pub mod error;
pub mod estimators;
pub mod exactlaws;
pub mod grammar;
pub mod harness;
pub mod instance;
pub mod metrics;
pub mod samplers;
pub mod seeding;
pub mod toylm;

pub use error::{Error, Result};
pub use estimators::{Estimator, EstimatorSpec, PhiVector, Tier};
pub use exactlaws::{mu_phi, mu_proj, mu_star, phi_exact, PhiSource, PhiTable, StateGraph, TerminalLaw};
pub use grammar::{Grammar, GrammarSpec, MatcherState};
pub use instance::{Cursor, Instance, Position};
pub use samplers::{KernelSpec, SpecConfig, SpecDecoder, StepKernel};
pub use toylm::{LanguageModel, LmSpec, Token, TokenDistribution, Word};
