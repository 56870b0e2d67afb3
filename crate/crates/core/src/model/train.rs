//! Shared supervised training loop for every differentiable classifier.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Bound, Params, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingPlan {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    /// Evaluate every this many steps; 0 means once per epoch.
    pub eval_every: usize,
    pub mask_rate: f64,
    /// Decoupled weight decay on weight matrices.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        TrainingPlan {
            learning_rate: 1e-4,
            warmup_fraction: 0.1,
            max_epochs: 10,
            batch_size: 16,
            early_stop_patience: 5,
            eval_every: 0,
            mask_rate: 0.15,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup_fraction must be in [0, 1)"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("max_epochs, batch_size and early_stop_patience must be positive"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 0.5) {
            return Err(Error::invalid("mask_rate must be in (0, 0.5]"));
        }
        Ok(())
    }

    /// Linear warmup over the first `warmup_fraction` of `total_steps`, then
    /// constant.
    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = (self.warmup_fraction * total_steps as f64).floor() as usize;
        if step < warmup {
            self.learning_rate * (step + 1) as f64 / warmup as f64
        } else {
            self.learning_rate
        }
    }
}

/// A model that maps a batch of inputs to class logits on a tape.
pub trait Classifier: Clone {
    type Input;

    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    fn num_labels(&self) -> usize;

    /// Whether a parameter is updated during fitting.
    fn trainable(&self, _name: &str) -> bool {
        true
    }

    /// Builds `[batch, num_labels]` logits. `rng` is present only in training
    /// mode (dropout).
    fn logits(&self, tape: &mut Tape, bound: &Bound, batch: &[&Self::Input], rng: Option<&mut ChaCha8Rng>) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub trace: Vec<TracePoint>,
    pub steps: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_step: usize,
    pub best_val_loss: f64,
}

impl TrainOutcome {
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        write_trace_csv(path, self.trace.iter().map(|p| (p.step, p.train_loss)))
    }
}

/// Writes `(step, value)` rows.
pub fn write_trace_csv(path: &Path, rows: impl Iterator<Item = (usize, f64)>) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?);
    writeln!(f, "step,value").map_err(|e| Error::io(ctx(), e))?;
    for (s, v) in rows {
        writeln!(f, "{s},{v}").map_err(|e| Error::io(ctx(), e))?;
    }
    f.flush().map_err(|e| Error::io(ctx(), e))
}

fn check_labels<I>(set: &[(I, usize)], k: usize) -> Result<()> {
    match set.iter().find(|(_, y)| *y >= k) {
        Some((_, y)) => Err(Error::invalid(format!("label index {y} out of range for {k} classes"))),
        None => Ok(()),
    }
}

/// Mean cross-entropy and accuracy over a labeled set.
pub fn evaluate_loss<C: Classifier>(model: &C, set: &[(C::Input, usize)], batch_size: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in set.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, |_| false);
        let inputs: Vec<&C::Input> = chunk.iter().map(|(x, _)| x).collect();
        let logits = model.logits(&mut tape, &bound, &inputs, None)?;
        let targets: Vec<Option<usize>> = chunk.iter().map(|(_, y)| Some(*y)).collect();
        let l = tape.softmax_cross_entropy(logits, &targets);
        loss += tape.value(l).scalar() * chunk.len() as f64;
        let lv = tape.value(logits);
        for (i, (_, y)) in chunk.iter().enumerate() {
            if argmax(lv.row(i)) == *y {
                correct += 1;
            }
        }
    }
    let n = set.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Class probabilities for each input.
pub fn predict_proba<C: Classifier>(model: &C, inputs: &[&C::Input], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, |_| false);
        let logits = model.logits(&mut tape, &bound, chunk, None)?;
        let lv = tape.value(logits);
        for i in 0..chunk.len() {
            out.push(softmax(lv.row(i)));
        }
    }
    Ok(out)
}

/// Predicted labels and probabilities.
pub fn predict<C: Classifier>(model: &C, inputs: &[&C::Input], batch_size: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let probs = predict_proba(model, inputs, batch_size)?;
    Ok((probs.iter().map(|p| argmax(p)).collect(), probs))
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step<C: Classifier>(
    model: &mut C,
    opt: &mut Adam,
    batch: &[(&C::Input, usize)],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, |n| model.trainable(n));
    let inputs: Vec<&C::Input> = batch.iter().map(|(x, _)| *x).collect();
    let logits = model.logits(&mut tape, &bound, &inputs, Some(rng))?;
    let targets: Vec<Option<usize>> = batch.iter().map(|(_, y)| Some(*y)).collect();
    let loss = tape.softmax_cross_entropy(logits, &targets);
    let value = tape.value(loss).scalar();
    if !value.is_finite() {
        return Err(Error::Shape(format!("non-finite training loss {value}")));
    }
    let mut grads = tape.backward(loss);
    let g = bound.collect_grads(&mut grads);
    opt.update(model.params_mut(), &g, lr)?;
    Ok(value)
}

/// Adam training with warmup and early stopping on validation loss. The
/// parameters with the best validation loss are restored at the end.
pub fn fit<C: Classifier>(
    model: &mut C,
    train: &[(C::Input, usize)],
    validation: &[(C::Input, usize)],
    plan: &TrainingPlan,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if validation.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let k = model.num_labels();
    check_labels(train, k)?;
    check_labels(validation, k)?;

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = Adam::new(model.params());
    opt.weight_decay = plan.weight_decay;
    let steps_per_epoch = train.len().div_ceil(plan.batch_size);
    let total = steps_per_epoch * plan.max_epochs;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, Params)> = None;
    let mut bad_evals = 0usize;
    let mut step = 0usize;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    'epochs: for epoch in 0..plan.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(plan.batch_size).enumerate() {
            let batch: Vec<(&C::Input, usize)> = chunk.iter().map(|&i| (&train[i].0, train[i].1)).collect();
            let lr = plan.learning_rate_at(step, total);
            let loss = train_step(model, &mut opt, &batch, lr, &mut rng)?;
            step += 1;
            let eval_now = if plan.eval_every > 0 {
                step.is_multiple_of(plan.eval_every)
            } else {
                bi + 1 == steps_per_epoch
            };
            let mut point = TracePoint {
                step,
                epoch,
                train_loss: loss,
                val_loss: None,
                val_accuracy: None,
            };
            if eval_now {
                let (vl, va) = evaluate_loss(model, validation, plan.batch_size.max(32))?;
                point.val_loss = Some(vl);
                point.val_accuracy = Some(va);
                log::debug!("step {step} epoch {epoch} train {loss:.4} val {vl:.4} acc {va:.3}");
                match &best {
                    Some((b, _, _)) if vl >= *b => bad_evals += 1,
                    _ => {
                        best = Some((vl, step, model.params().clone()));
                        bad_evals = 0;
                    }
                }
            }
            trace.push(point);
            if bad_evals >= plan.early_stop_patience {
                stopped_early = true;
                break 'epochs;
            }
        }
    }

    let (best_val_loss, best_step) = match best {
        Some((l, s, p)) => {
            *model.params_mut() = p;
            (l, s)
        }
        None => {
            let (vl, _) = evaluate_loss(model, validation, plan.batch_size.max(32))?;
            (vl, step)
        }
    };
    Ok(TrainOutcome {
        trace,
        steps: step,
        epochs_run,
        stopped_early,
        best_step,
        best_val_loss,
    })
}
