//! Comparison learners: a random forest on k-mer frequency vectors and small
//! CNN / LSTM classifiers on one-hot sequences.

pub mod forest;
pub mod neural;

pub use forest::{train_forest, Forest, ForestConfig};
pub use neural::{Cnn, CnnConfig, Lstm, LstmConfig, MAX_NEURAL_LENGTH};

use crate::error::Result;
use crate::features::{one_hot, OneHotMatrix};
use crate::model::train::{fit, TrainOutcome, TrainingPlan};

/// One-hot encodes sequences at `fixed_length`.
pub fn one_hot_inputs<'a>(seqs: impl IntoIterator<Item = &'a str>, fixed_length: usize) -> Vec<OneHotMatrix> {
    seqs.into_iter().map(|s| one_hot(s, fixed_length)).collect()
}

pub fn train_cnn(
    train: &[(OneHotMatrix, usize)],
    validation: &[(OneHotMatrix, usize)],
    config: CnnConfig,
    plan: &TrainingPlan,
) -> Result<(Cnn, TrainOutcome)> {
    let mut model = Cnn::new(config)?;
    let outcome = fit(&mut model, train, validation, plan)?;
    Ok((model, outcome))
}

pub fn train_lstm(
    train: &[(OneHotMatrix, usize)],
    validation: &[(OneHotMatrix, usize)],
    config: LstmConfig,
    plan: &TrainingPlan,
) -> Result<(Lstm, TrainOutcome)> {
    let mut model = Lstm::new(config)?;
    let outcome = fit(&mut model, train, validation, plan)?;
    Ok((model, outcome))
}
