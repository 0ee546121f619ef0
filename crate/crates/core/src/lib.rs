//! Collaborative Direct Preference Optimization (C-DPO) at desk scale.
//!
//! Per-user instruction policies are aligned with preference pairs while a
//! graph of like-minded users regularizes each user's loss with
//! similarity-weighted losses from its nearest neighbors. The crate covers
//! the full pipeline: synthetic dataset generation, the user-attribute
//! preference graph, GraphSAGE user embeddings, a compact soft-prompted
//! policy model, the DPO and C-DPO objectives, the two-stage trainer, and
//! the alignment benchmark.

pub mod config;
pub mod datagen;
pub mod diffcore;
pub mod dpo;
pub mod eval;
pub mod gnn;
pub mod policy;
pub mod prefgraph;
pub mod trainer;
