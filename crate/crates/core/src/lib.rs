//! Defense-side tooling for GAN-based feature inference attacks on
//! federated learning: an obfuscating conditional GAN, mix-once dataset
//! synthesis, a FedAvg simulator, a black-box attacker, and an experiment
//! harness that measures the accuracy cost of the defense.

pub mod attacker;
pub mod config;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod gan;
pub mod harness;
pub mod mixup;
pub mod nn;
pub mod obfuscation;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the shipped binaries and default experiment paths.
/// The core is generic; f64 is exercised by the oracle tests.
pub type Real = f32;

pub type ImageBatch = data::ImageBatch<Real>;
pub type LabeledDataset = data::LabeledDataset<Real>;

/// The deterministic RNG used everywhere a seed appears.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
