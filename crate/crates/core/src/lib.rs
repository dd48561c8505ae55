//! Text-conditioned universal image restoration.
//!
//! Degradation descriptions are encoded into a degradation context that
//! modulates a U-shaped restoration transformer. The crate covers synthetic
//! data ([`degrade`]), text features ([`textio`]), context encoding
//! ([`context`]), the restoration network ([`dcformer`]), two-stage training
//! ([`train`]), and evaluation ([`evalkit`]).

pub mod autograd;
pub mod context;
pub mod dcformer;
pub mod degrade;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod textio;
pub mod train;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use tensor::Tensor;
