//! Adaptive search-agent harness.
//!
//! The crate drives a policy through multi-turn search rollouts against a
//! lexical retrieval environment, scores trajectories with outcome and
//! tool-efficiency rewards, trains a small tabular policy with
//! group-relative policy optimization, builds solve-rate pseudo-labels for a
//! search/no-search decision, and evaluates how well that decision matches
//! the policy's own parametric knowledge.
//!
//! A typical evaluation builds a [`corpus::Bm25Index`], two
//! [`policy::PolicyHandle`]s (decision and solver) and calls
//! [`pipeline::evaluate_benchmark`].

pub mod corpus;
pub mod error;
pub mod grpo;
pub mod labeling;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod prompts;
pub mod rewards;
pub mod rollout;
pub mod seed;
pub mod textproto;
pub mod toydata;

pub use corpus::{build_index, load_corpus, Bm25Index, Corpus, DocHit, Document, IndexParams, Retriever};
pub use error::{BackendError, Error, Result};
pub use labeling::{LabelingConfig, QAInstance};
pub use metrics::{AwarenessScores, ConfusionCounts, Report};
pub use policy::{GenParams, PolicyHandle, PromptMode, ScriptedPolicy, ToySoftmaxPolicy};
pub use rewards::RewardSpec;
pub use rollout::{RolloutLimits, Trajectory, TrajectorySummary};
pub use textproto::{Action, Assessment, GoldAnswers, VerifierKind};
