//! A small encoder-decoder transformer with hand-written backpropagation.
//!
//! The model is generic over [`Scalar`] so the same code runs in `f64` for
//! finite-difference gradient checks and in `f32` for training. Sentences are
//! processed one at a time without padding; batching happens in the trainer.

mod checkpoint;
mod config;
mod decode;
mod ops;
mod params;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, ModelError};
pub use decode::{beam_search, greedy, sequence_score, Hypothesis};
pub use ops::{flatten_distribution, log_softmax_rows, softmax_rows, Mat};
pub use params::{ModelParams, Tensor};
pub use transformer::{Encoded, ForwardCache, Transformer};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the model is instantiated with.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numeric precision of a run: `f64` for verification, `f32` for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}
