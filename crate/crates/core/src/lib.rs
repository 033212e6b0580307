//! Agentic tree-search orchestration for automated ML experimentation.
//!
//! A run takes a research idea through four experimental stages. Within each
//! stage a best-first tree search proposes, executes and evaluates
//! experiment scripts; the best node of one stage seeds the next. After the
//! last stage the stored results are aggregated into figures and a LaTeX
//! manuscript is drafted and refined.

pub mod gateway;
pub mod prompts;
pub mod review;
pub mod seed;
pub mod tree;
pub mod metrics;
pub mod policy;
pub mod stage;
pub mod executor;
pub mod ideation;
pub mod writeup;
pub mod config;
pub mod checkpoint;
pub mod orchestrator;
pub mod export;
