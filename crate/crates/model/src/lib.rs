//! Encoder-decoder backbone with a patch-classification (PPN) head and
//! point-detector heads, plus training and inference.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod loss;
pub mod mining;
pub mod net;
pub mod optim;
pub mod params;
pub mod target;
pub mod train;

pub use config::{BackboneConfig, HeadConfig, LossConfig, ModelConfig, PpnPooling, Scale};
pub use error::{Error, Result};
pub use net::{BackboneFeatures, DetectorOutput, Network};
pub use params::ModelKind;
