//! ttkit: trajectory-tree batch compiler and RL-objective kernels for
//! agentic rollouts.
//!
//! The crate turns branching multi-turn rollouts into prefix-shared trees
//! ([`trajectory`]), compiles those trees into flattened training batches with
//! tree attention masks, restored position ids, and gradient-equivalent loss
//! weights ([`packing`]), and provides the numeric kernels of the training
//! objective: group advantages, turn-level clipped surrogates with GSPO/GRPO
//! reference reductions, on-policy distillation, and data-curation predicates
//! ([`objectives`]), plus K-fold log-probability averaging with variance
//! accounting ([`mcla`]). A tiny causal-attention network with exact analytic
//! gradients ([`refnet`]) serves as the equivalence oracle throughout.
//!
//! The `ttkit` binary wires everything into reproducible experiments; see the
//! README for the CLI and file formats.

pub mod batch_file;
pub mod checks;
pub mod cli;
pub mod mcla;
pub mod objectives;
pub mod packing;
pub mod records;
pub mod refnet;
pub mod report;
pub mod rng;
pub mod trajectory;
pub mod workload;
