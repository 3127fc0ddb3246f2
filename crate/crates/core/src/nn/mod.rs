//! Dense-network engine: forward pass, exact reverse-mode gradients, Adam,
//! and checkpoint serialization.

mod adam;
mod checkpoint;
mod dense;
mod group;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dense::{Activation, DenseNet, ForwardCache, NetGrads};
pub use group::{scale_all, GroupOptimizer, ParamGroup};
