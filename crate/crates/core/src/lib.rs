//! Hierarchical window aggregate UNETR for 3-D multimodal segmentation.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and the neural operators.
//! * [`ssm`]: orientation-aware voxel flattening and the selective scan.
//! * [`blocks`]: the HWA stem, SGC encoder block and TFM skip block.
//! * [`network`]: the four-stage U-shaped model, sliding-window inference
//!   and checkpoints.
//! * [`data`]: volume files, manifests, splits and synthetic phantoms.
//! * [`train`]: losses, AdamW, the learning-rate schedule, crop sampling,
//!   augmentation and the training loop.
//! * [`metrics`]: Dice and HD95.

mod binio;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod network;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Binding, ConvSpec, DType, Element, Gradients, ParamId, ParamStore, Tape, Tensor, Var};
