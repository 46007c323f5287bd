//! Adversarial estimation of a stochastic discount factor on multi-modal asset panels.
//!
//! An SDF network maps fused features (macro LSTM state, ranked firm
//! characteristics, attention-pooled news embeddings) to portfolio weights
//! `w`, and a conditional network produces instruments `g`. Training
//! alternates ascent on the instrument side and descent on the SDF side of
//! the GMM loss built from `E[M · R · g] = 0` with `M = 1 − wᵀR`.

pub mod advtrain;
pub mod attrib;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod featpipe;
pub mod panel;
pub mod pipeline;
pub mod sdfnet;
pub mod synthlab;

pub use advtrain::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, TrainOutcome};
pub use config::RunConfig;
pub use diffcore::{Graph, PcaBasis, Tensor, Var};
pub use error::{Error, Result};
pub use featpipe::{FeatureConfig, PreparedPanel};
pub use panel::{EmbeddingSet, MacroSeries, Panel, SplitName, SplitSpec};
pub use pipeline::{Dataset, Prepared};
pub use sdfnet::{Model, NetConfig};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent RNG stream derived from a master seed and a stream name.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
