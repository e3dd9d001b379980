//! Decomposed bidirectional contrastive loss over simulated ranks.
//!
//! Each rank computes two `b×B` similarity matrices instead of the full
//! `B×B` one and recovers the exact full-batch feature gradients through an
//! averaging `all_reduce`. The crate provides the full-batch reference, the
//! per-rank decomposition, an in-process collective fabric, a linear
//! two-tower trainer, and analytic plus measured memory/FLOP accounting.

pub mod cli;
pub mod cost;
pub mod dense;
pub mod error;
pub mod fabric;
pub mod oracle;
pub mod report;
pub mod shard;
pub mod towers;
pub mod verify;

pub use dense::{DenseMatrix, InstrumentCounters, Meter, Scalar};
pub use error::{Error, Result};
pub use fabric::{FabricError, RankEndpoint, RankGroup, ReduceOp, Scheduler};
pub use oracle::{clip_grad_full, clip_loss_full, FeatureBatch, GradPair, LossBreakdown, Role};
pub use shard::{disco_step, ShardLayout};
