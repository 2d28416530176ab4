//! Parameterized layers, network assembly and the optimizer.

mod checkpoint;
mod mlp;
mod params;
mod sgd;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use mlp::{BoundMlp, Mlp, MlpOutput, Mode};
pub use params::{init_parameters, Activation, LayerSpec, NetworkSpec, ParamTag, ParameterSet};
pub use sgd::{sgd_step, SgdState};

/// Momentum of the running batch-norm moments.
pub const BN_MOMENTUM: f64 = 0.1;
