//! Text-independent speaker verification with keyword-adversarial training.
//!
//! A raw-waveform residual network maps utterances to unit-norm speaker
//! embeddings. It is pretrained as a speaker classifier, then fine-tuned with
//! a cosine triplet loss while a keyword classifier on the embeddings is
//! trained adversarially, pushing the embeddings to forget what was said.
//! Speakers are enrolled by averaging embeddings and trials are scored by
//! cosine similarity.
//!
//! Everything runs on a small reverse-mode autodiff engine in [`graph`].

pub mod asr;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod network;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verification;

pub use error::{Error, Result};
