//! Sparse masked-autoencoder pretraining and schedule-driven fine-tuning of a
//! residual encoder U-Net on 3-D volumes, with the curation, evaluation and
//! ranking tools around it.

pub mod data;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod kernels;
pub mod masking;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod orchestrator;
pub mod par;
pub mod params;
pub mod pretrain;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape5, Tensor5};
