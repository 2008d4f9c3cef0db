//! Multi-domain image translation with a single VAE.
//!
//! One encoder/decoder pair is shared across every domain. The latent space is
//! split into two blocks: `z_l`, whose prior `N(mu_c, I)` depends on the class
//! through a fixed random rotation of a shared base mean, and `z_u`, whose
//! prior is the standard normal. Translating an image from class `c` to class
//! `t` rotates `z_l` by `T_t * T_c^T` and leaves `z_u` untouched.
//!
//! Modules follow the pipeline: [`prior`] builds the rotation geometry,
//! [`model`] holds the convolutional encoder/decoder, [`loss`] the
//! beta-weighted objective, [`data`] the image sources, [`train`] the Adam
//! loop, [`translate`] the rotation-based translation, and [`probe`] the
//! linear classifiers used to measure disentanglement.

pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod nn;
pub mod prior;
pub mod probe;
pub mod seeds;
pub mod train;
pub mod translate;
mod wire;

pub use error::{Error, Result};
pub use prior::PriorSpec;
