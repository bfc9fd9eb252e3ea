//! Layers, architectures, and the sequential [`Model`].

mod arch;
mod checkpoint;
mod gradacc;
mod layer;
mod model;

pub use arch::{ArchKind, ArchSpec};
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradacc::GradAccState;
pub use layer::LayerSpec;
pub use model::{
    gradacc_tap, ForwardOptions, ForwardOutput, Init, Mode, Model, Perturb, BN_EPS, BN_MOMENTUM,
    INPUT_TAP,
};
