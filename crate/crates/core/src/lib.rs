//! Word-level emotion annotation and emotion-modulated speech-token
//! generation at toy scale.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod annotator;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod efilm;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use annotator::{
    annotate, annotator_forward, annotator_loss, train_annotator, AnnotatorConfig, AnnotatorLossConfig, AnnotatorModel,
};
pub use checkpoint::Checkpoint;
pub use data::{EmotionCategory, EmotionFeatureSequence, Utterance, WordAlignment, WordEmotionAnnotation};
pub use efilm::{
    emo_loss, encode_emotion, generate, total_loss, train_efilm, tts_loss, AnnotationSource, DecodeMode, EFiLMConfig,
    EFiLMModel, GenLossConfig, ModulationVariant, TtsBatch,
};
pub use error::{Error, Result};
pub use metrics::{dtw, emo_sim, evaluate_corpus, per_emotion_accuracy, EmotionTrajectory, MetricReport};
pub use optim::TrainConfig;
pub use scalar::Scalar;
pub use synth::{build_corpus, generate_corpus, load_corpus, make_emotion_basis, Corpus, CorpusSpec};
pub use tensor::Matrix;

pub type Annotator = AnnotatorModel<f64>;
pub type Annotator32 = AnnotatorModel<f32>;
pub type EFiLM = EFiLMModel<f64>;
pub type EFiLM32 = EFiLMModel<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
