#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

//! Joint RGB + depth latent diffusion at desk scale.
//!
//! The crate covers the whole pipeline: RGBD data handling, a 4-channel
//! KL-regularised autoencoder, a text-conditioned latent denoiser with DDPM
//! and DDIM samplers, x4 super-resolution through low-resolution latent
//! concatenation, equirectangular panorama utilities, and the image and
//! depth evaluation protocols.

pub mod autoencoder;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod nn;
pub mod pano;
pub mod rgbd;
pub mod seed;
pub mod sr;
pub mod synthetic;

pub use error::{Error, Result};
