//! Self-contained benchmark: a seeded multi-view Gaussian generator with a
//! planted low-noise view per class, and a linear softmax classifier that
//! turns feature sets into prediction manifests.

mod features;
mod generator;
mod model;

pub use features::{load_features, save_features, FeatureSample, FeatureSet};
pub use generator::{augmentation_view_name, generate, PrototypeLayout, SynthConfig, DEFAULT_VIEW};
pub use model::{
    gradnorm_score, loss_grad, predict, train, Gradient, ModelConfig, ToyModel, TrainSummary,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams per consumer, so equal seeds passed to
/// different stages never yield correlated draws.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum RngDomain {
    Generator = 1,
    ModelInit = 2,
    Shuffle = 3,
    Dropout = 4,
}

/// ChaCha8 keyed by `(domain, seed)`, positioned on `stream`. Per-sample
/// streams let work run in any order and still agree bit-exactly.
pub(crate) fn stream_rng(domain: RngDomain, seed: u64, stream: u64) -> ChaCha8Rng {
    let key = seed ^ (domain as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}
