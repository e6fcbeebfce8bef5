//! Desk-scale group-based RL training engine: entropy-guided prefix-tree
//! rollout sampling with tree-structured token-level advantage
//! redistribution, alongside GRPO and GSPO baselines.

pub mod advantage;
pub mod config;
pub mod env;
pub mod forest;
pub mod objective;
pub mod plot;
pub mod policy;
pub mod sampler;
pub mod testutil;
pub mod trainer;
