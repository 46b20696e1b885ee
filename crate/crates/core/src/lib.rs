//! Compact 3D feature fields built on pre-trained Gaussian splatting scenes.
//!
//! The pipeline lifts multi-view 2D feature maps onto the Gaussians of a
//! donor scene without training, compresses each lifted feature to a
//! three-channel latent with a small autoencoder, then shrinks the scene by
//! pruning low-contribution Gaussians and merging redundant neighbours with
//! moment matching while optimizing against rendered references.

pub mod autoencoder;
pub mod error;
pub mod eval;
pub mod lifting;
pub mod pipeline;
pub mod quantize;
pub mod raster;
pub mod scene;
pub mod sparsify;
pub mod spatial;

pub use error::{Error, Result};
