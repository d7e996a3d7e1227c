//! Mixture-of-experts upcycling for CTC sequence models.
//!
//! A small dense encoder (frame stacking, pre-norm Transformer blocks, CTC
//! head) is trained on one domain, converted into an MoE model whose experts
//! all start as copies of the dense FFN, and then trained on a new domain
//! with only the experts and routers unfrozen.

pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod moe;
pub mod tensor;
pub mod train;
pub mod upcycle;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigError, KvConfig};
pub use data::{gen_dataset, DataDir, Dataset, DomainSpec, Split, SplitSizes};
pub use graph::{Graph, Var};
pub use model::{Batch, GradMode, Model, ModelConfig, ModelError, Params};
pub use moe::{MoeConfig, MoeError, RouterOutput, UsageStats};
pub use tensor::{Element, Tensor, TensorError};
pub use train::{evaluate, flop_proxy, lr_at, train, EvalReport, TrainConfig, TrainError};
pub use upcycle::{build_freeze_mask, upcycle, FreezeMask, UpcycleError};
