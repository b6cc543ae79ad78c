//! Smart-contract vulnerability detection with a feature-perception
//! attention network.
//!
//! Source text is tokenized ([`lexer`]), embedded and scanned by a bank of
//! convolution kernels whose strongest windows and mean activation form a
//! feature matrix ([`fpm`]). Multi-head self-attention relates the kernel rows
//! and a sigmoid classifier produces the vulnerability probability
//! ([`rpam`]). The numeric code is generic over [`Scalar`]; `f32` is used for
//! training and inference and `f64` for gradient checking.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod explain;
pub mod fpm;
pub mod ingest;
pub mod lexer;
pub mod model;
pub mod rpam;
pub mod scalar;
pub mod synth;
pub mod train;

pub use config::ModelConfig;
pub use eval::MetricsReport;
pub use error::{Error, Result};
pub use fpm::FeatureMatrix;
pub use ingest::{Corpus, LabeledContract, VulnType};
pub use lexer::{TokenSequence, Vocabulary};
pub use model::{Afpnet, Detector, ModelParams};
pub use rpam::Prediction;
pub use scalar::Scalar;
pub use train::TrainConfig;


pub type Afpnet32 = Afpnet<f32>;
pub type Afpnet64 = Afpnet<f64>;
pub type Detector32 = Detector<f32>;
pub type Detector64 = Detector<f64>;
pub type FeatureMatrix32 = FeatureMatrix<f32>;
pub type FeatureMatrix64 = FeatureMatrix<f64>;
