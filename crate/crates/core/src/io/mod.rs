//! Files and formats around the core: corpus, checkpoints, run
//! configuration, evaluation, architecture reports and prune traces.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod report;
pub mod trace;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use corpus::Corpus;
pub use eval::evaluate_perplexity;
