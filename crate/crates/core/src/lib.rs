//! Preference datasets from self-generated code snippets and tests.
//!
//! Every code snippet generated for an instruction is executed against every
//! generated test. Minimax selection over the resulting pass/fail matrix picks
//! a chosen and a rejected (code, test) combination, which are rendered as
//! responses and emitted as DPO pairs or KTO examples. The [`dpl`] module
//! checks the losses those datasets feed on small tabular policies.

pub mod config;
pub mod dpl;
pub mod ingest;
pub mod jsonl;
pub mod pairs;
pub mod pipeline;
pub mod sandbox;
pub mod scalar;
pub mod select;
pub mod stats;

pub use ingest::{Candidate, CandidateSet, InstructionRecord, ParseStatus};
pub use pairs::{ConcatTemplate, KtoExample, PreferencePair};
pub use sandbox::{ExecutionLimits, ExecutionResult, ExecutionStatus, FeedbackMatrix};
pub use scalar::Scalar;
pub use select::{BinaryMatrix, PassMatrix, SelectionResult};

/// Double-precision tabular policy.
pub type Policy = dpl::TabularPolicy<f64>;
/// Single-precision tabular policy.
pub type Policy32 = dpl::TabularPolicy<f32>;
pub type Hyperparams = dpl::DplHyperparams<f64>;
pub type Hyperparams32 = dpl::DplHyperparams<f32>;
pub type KtoState = dpl::KtoState<f64>;
pub type TrainingTrace = dpl::TrainingTrace<f64>;
