//! Difficulty-adaptive self-consistency and its baselines.
//!
//! The pipeline: rank questions by difficulty in batches, cut off an easy
//! part using pre-sample entropy, answer easy questions with a single
//! sample, and give hard questions sample budgets predicted from their
//! easier neighbours. SC, ASC and ESC are provided for comparison, along
//! with a simulated backend for offline experiments.

pub mod backend;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod orchestrators;
pub mod partition;
pub mod prompt;
pub mod ranking;
pub mod seeding;
pub mod stopping;

pub use error::{Error, Result};
pub use model::{CostLedger, HyperParams, Money, PricingTable, Question, SampleTally, Step};
pub use orchestrators::{run_asc, run_dsc, run_esc, run_method, run_sc, Method, RunContext, RunReport};
