//! Hierarchical-representation fine-tuning for multilingual CTC models.

pub mod error;
pub mod ctc;
pub mod datagen;
pub mod encoder;
pub mod evalkit;
pub mod numcore;
pub mod probe;
pub mod sshr_model;
pub mod trainer;

pub use ctc::{CtcPosterior, Vocabulary, BLANK};
pub use datagen::{Corpus, CorpusConfig, Utterance};
pub use encoder::{StackConfig, Surgery};
pub use error::{Error, Result};
pub use evalkit::{AblationReport, Evaluation, ExperimentResult, Ladder};
pub use numcore::{Scalar, Tape, Tensor};
pub use probe::{ProbeConfig, ProbeReport};
pub use sshr_model::{ForwardOutput, SshrConfig, SshrModel};
pub use trainer::{GradReport, TrainConfig, TrainOutcome};
