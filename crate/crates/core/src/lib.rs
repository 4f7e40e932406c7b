//! Measurement harness for LLM fairness evaluation.
//!
//! Two studies share this crate:
//!
//! * the **instability study** renders each benchmark question under 22
//!   surface-level prompt variants, scores the answers with the benchmark's
//!   own metric and asks how much of the score variance the variant explains
//!   ([`stats`]);
//! * the **conversation study** seeds stateless two-agent discussions with
//!   the same questions, varies who the identity agent is told it is and
//!   whether its peer can see that, and measures how often each agent moves
//!   to its peer's previous answer ([`conversation`], [`metrics`]).
//!
//! Model access goes through [`gateway`], which speaks the OpenAI
//! chat-completions wire format or runs a seeded scripted policy with a known
//! ground truth. Transcripts are persisted as sharded JSONL by [`store`].

pub mod config;
pub mod conversation;
pub mod corpus;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod stats;
pub mod store;
pub mod util;

pub use config::RunConfig;
pub use conversation::{AgentProfile, ConversationKey, ConversationSpec, Instantiation, RevealCondition, Role, TranscriptRow};
pub use corpus::{AnswerKey, Benchmark, ContextKind, QuestionInstance, SamplePlan};
pub use gateway::{CompletionBackend, CompletionRequest, ModelEndpoint, ScriptedPolicy};
pub use metrics::{BenchmarkScore, ContrastKind, ContrastResult, ScoreMetric, ShiftCounts, ShiftRateCell};
pub use prompt::{ChoiceFormat, ParsedResponse, PromptVariant, ResponseOrder};
pub use stats::{AnovaResult, ExtremeEntry, RankMatrix, Ratio};

/// Version string stamped on every report row and manifest.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "/", env!("CARGO_PKG_VERSION"));
