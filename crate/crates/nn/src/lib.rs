//! Neural components for BEV map prediction: the cross-view transformer, the
//! UNet baseline, the focal and L1 objectives, checkpointing and training.

pub mod error;
pub mod layers;
pub mod losses;

pub use error::{NnError, Result};
pub mod batch;
pub mod cvt;
pub mod model;
pub mod unet;

pub use batch::Batch;
pub use model::{BevModel, ModelConfig, ModelKind};
pub mod training;
