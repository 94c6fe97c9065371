//! Few-shot neural architecture search on a desk-scale weight-sharing
//! supernet: search-space combinatorics, a deterministic micro training
//! engine, sub-supernet trees grown by splitting compound edges, rank
//! correlation against exhaustive ground truth, and search drivers.

pub mod data;
pub mod error;
pub mod eval;
pub mod net;
pub mod optim;
pub mod rng;
pub mod search;
pub mod space;
pub mod store;
pub mod supernet;
pub mod tree;

pub use data::{Dataset, DatasetConfig, Split, SplitId};
pub use error::{Error, Result};
pub use eval::{
    best_so_far_trace, correlation_report, kendall_tau, kendall_tau_counts, train_arch,
    train_oracle, CorrelationReport, OracleRecord, OracleTable, TauCounts, DEFAULT_ORACLE_CAP,
};
pub use net::{grad_check, softmax, Grads, IoDims, Matrix, NetworkDef};
pub use optim::{cosine_lr, AlphaAdam, OptState, Schedule, TrainHyper};
pub use search::{
    gradient_select, random_search, rea_search, reinforce_search, topk_retrain, Evaluator,
    RetrainRecord, SearchConfig, SearchTrace, TraceStep,
};
pub use space::{Architecture, OpDesc, OpKind, OpVocab, Region, SearchSpace};
pub use store::{Tensor, TensorSpec, WdMode, WeightStore};
pub use supernet::{MixtureParams, Supernet, TrainMode};
pub use tree::{run_pipeline, BudgetConfig, SupernetTree};
