//! Convolutional-recurrent text classifier with additive attention, built
//! on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use autodiff::{Gradients, Graph, NodeId};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Error, FormatError, Result};
pub use eval::{mcnemar, metrics, ConfusionMatrix, EvalReport, McNemarResult};
pub use model::{build_model, forward, predict, AttNet, ModelConfig, Prediction};
pub use params::Parameters;
pub use tensor::{Precision, Real, Tensor};
pub use text::{build_vocab, encode, tokenize, Dataset, Example, LabelMap, Vocabulary};
pub use train::{train, train_observed, AdamState, Classifier, Sample, TrainConfig, TrainHistory};
