//! Unpaired thermal-to-visible image translation.
//!
//! The crate trains two structure-connected residual generators under cycle
//! consistency with global and region-focused PatchGAN critics, then scores
//! translation quality by running a detector over the translated images and
//! reporting average precision. All numerics are generic over the scalar
//! type; `f32` is the training default and `f64` backs the verification
//! suite.

pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod evaluation;
pub mod generator;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod roi;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use scalar::Scalar;

// Concrete instantiations: `f32` for training throughput, `f64` for
// finite-difference verification.
pub type Batch32 = nn::Batch<f32>;
pub type Batch64 = nn::Batch<f64>;
pub type GrayImage32 = data::GrayImage<f32>;
pub type GrayImage64 = data::GrayImage<f64>;
pub type Sample32 = data::Sample<f32>;
pub type Sample64 = data::Sample<f64>;
pub type Generator32 = generator::Generator<f32>;
pub type Generator64 = generator::Generator<f64>;
pub type Discriminator32 = discriminator::Discriminator<f32>;
pub type Discriminator64 = discriminator::Discriminator<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
