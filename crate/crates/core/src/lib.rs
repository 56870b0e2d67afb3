//! Genomic language-model toolkit: FASTA ingestion, 6-mer tokenization,
//! leakage-free cluster splits, k-mer features, a small encoder transformer
//! with its own autodiff, classical and neural baselines, and metrics.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod report;
pub mod seqio;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
