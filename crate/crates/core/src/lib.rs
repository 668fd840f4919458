//! Template-based architecture search for compact segmentation networks.
//!
//! A recurrent controller emits a genotype (a few reusable templates plus
//! per-block wiring, repeat and stride decisions), the genotype is compiled
//! into a dataflow graph with deterministic channel and resolution rules,
//! and the graph is scored by an [`eval::Evaluator`]. The controller is
//! trained with PPO on those scores.

pub mod analysis;
pub mod cost;
pub mod eval;
pub mod genotype;
pub mod graph;
pub mod log;
pub mod policy;
pub mod rl;
pub mod search;

pub use analysis::spearman;
pub use cost::{count_flops, count_params, summarize, CostReport, GraphSummary};
pub use eval::{reward, Candidate, Evaluator, MetricTriple, SurrogateConfig, SurrogateEvaluator};
pub use genotype::{
    decision_count, template_universe, validate, AggKind, BlockDecision, Encoding, Genotype, OpKind, SpaceConfig,
    Template,
};
pub use graph::{compile, GraphIR, NodeKind, TensorSpec};
pub use log::{SearchRecord, Source};
pub use policy::{Controller, ControllerConfig, Trajectory};
pub use rl::{PpoConfig, Trainer};
pub use search::{run_random, run_search, RunConfig, SearchSummary};
