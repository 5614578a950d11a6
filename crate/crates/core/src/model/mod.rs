//! The segmentation network: a MobileOne-style encoder with stage
//! repetitions `[2, 3, 4, 3]`, pyramid pooling over the deepest features, and
//! a decoder that fuses upsampled features with encoder skips by channel
//! concatenation followed by a 3x3 block.

mod config;
mod net;

pub use config::{TfNetConfig, Variant};
pub use net::{argmax_masks, EncoderUnit, NetCache, Ppm, PpmBranch, TfNet};
