//! Contrastive region representation learning from imagery, POI text and mobility.
//!
//! Regions carry street-view and remote-sensing imagery, POI counts and
//! category text, and in/out mobility counts. The pipeline mines triplets
//! from mobility and POI similarity, trains one convolutional encoder per
//! image modality with a cosine triplet loss, learns POI word vectors with
//! skip-gram and hierarchical softmax, fuses the two image embeddings with
//! learned attention aligned to the POI text through InfoNCE, and evaluates
//! the result on socioeconomic regression and clustering.

pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod gradsuite;
pub mod pipeline;
pub mod rng;
pub mod similarity;
pub mod tensor;
pub mod text;
pub mod visual;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{Float, Tensor};
