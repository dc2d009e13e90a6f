//! Binarized neural-network inference and training for resistive-memory
//! in-memory computing: bit-packed tensors, XNOR-popcount layers, network
//! descriptors, a device fault model, memory accounting and a trainer.

pub mod bitcore;
pub mod error;
pub mod layers;
pub mod memaudit;
pub mod model;
pub mod netspec;
pub mod rram;
pub mod train;

pub use error::{Error, Result};
