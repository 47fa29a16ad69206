//! Audio-conditioned denoising network.

pub mod layers;
pub mod ops;
pub mod checkpoint;
mod unet;

pub use layers::{Mode, ParamStore};
pub use unet::{
    film, sinusoidal_noise_features, FilmCondition, FilmResBlock, SelfAttention, UNet, UNetConfig,
    NOISE_EMBED_SCALE, OUTPUT_INIT_SCALE,
};
