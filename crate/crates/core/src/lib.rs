//! Checkpoint-and-rollback runtime for checker-guided code generation.
//!
//! A generator streams code while an incremental checker validates it
//! concurrently. Validated prefixes form a search tree; on an error a repair
//! policy picks a node to restart from, and the checker resumes from the
//! nearest snapshot instead of re-checking the whole prefix.

pub mod genkit;
pub mod harness;
pub mod minichecker;
pub mod models;
pub mod policies;
pub mod proto;
pub mod tree;
pub mod tuner;

pub use proto::{Msg, Offset, SessionId};
