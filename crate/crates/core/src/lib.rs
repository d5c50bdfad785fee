//! Tuple-conditioned classification: the tuplemax loss family, a small
//! projected-LSTM classifier trained with it, restricted-candidate
//! inference and pairwise confusion evaluation over synthetic corpora.

pub mod datagen;
pub mod error;
pub mod evalharness;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, Result};
pub use losses::{
    CandidateTuple, Label, Logits, LossKind, LossResult, SamplingConfig, TupleSizePrior,
};
pub use model::{FeatureSequence, ModelConfig, ModelParameters, RecurrentSpec};
