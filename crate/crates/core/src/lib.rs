//! Salt-and-pepper denoising with a non-local switching filter (NLSF)
//! followed by a three-layer convolutional network.
//!
//! The pipeline is: [`noise::detect`] impulses, pre-filter them with
//! [`nlsf::nlsf`], then map the pre-filtered image to a clean estimate with
//! [`cnn::denoise_image`]. [`eval`] holds the PSNR metric and benchmark
//! harness, [`cli`] the command-line front end.

pub mod baseline;
pub mod cli;
pub mod cnn;
pub mod eval;
pub mod image;
pub mod nlsf;
pub mod noise;

pub use image::{GrayImage, PatchGrid};
pub use nlsf::NlsfConfig;
pub use noise::{NoiseMask, NoiseSpec};
