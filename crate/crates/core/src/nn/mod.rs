//! Network internals behind the denoiser.

pub mod attention;
pub mod layers;
pub mod layout;
pub mod unet;

pub use attention::{AttentionMap, AttnControl, CrossAttention};
pub use layout::{ParamEntry, ParamLayout};
pub use unet::{AttentionMode, UNet, UNetConfig, UNetTape, CROSS_ATTENTION_LAYERS};
