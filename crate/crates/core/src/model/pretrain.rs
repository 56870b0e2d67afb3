//! Masked-token pretraining.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{pad_to, TokenBatch, Transformer};
use crate::autodiff::{Adam, Tape};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, Vocabulary, MASK_ID, NUM_SPECIAL};

/// Applies the 80/10/10 masking recipe to one sequence. Returns the corrupted
/// input and, per position, the original id where a prediction is required.
pub fn mask_tokens(seq: &TokenSequence, rate: f64, vocab_size: usize, rng: &mut impl Rng) -> (TokenSequence, Vec<Option<u32>>) {
    let eligible: Vec<usize> = (0..seq.len())
        .filter(|&i| seq.attention_mask[i] && !Vocabulary::is_special(seq.ids[i]))
        .collect();
    let mut input = seq.clone();
    let mut targets = vec![None; seq.len()];
    if eligible.is_empty() {
        return (input, targets);
    }
    let count = ((rate * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, eligible.len(), count).into_vec();
    picked.sort_unstable();
    for p in picked {
        let pos = eligible[p];
        targets[pos] = Some(seq.ids[pos]);
        let r: f64 = rng.gen();
        if r < 0.8 {
            input.ids[pos] = MASK_ID;
        } else if r < 0.9 {
            input.ids[pos] = rng.gen_range(NUM_SPECIAL as u32..vocab_size as u32);
        }
    }
    (input, targets)
}

/// A padded batch of masked sequences with flattened per-position targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub batch: TokenBatch,
    pub targets: Vec<Option<u32>>,
}

impl MaskedBatch {
    pub fn new(seqs: &[&TokenSequence], rate: f64, model: &Transformer, rng: &mut impl Rng) -> Result<Self> {
        let ctx = model.config.context_tokens;
        let t = seqs.iter().map(|s| s.len().min(ctx)).max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(seqs.len());
        let mut targets = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            let s = crate::tokenizer::pad_or_truncate(s, s.len().min(ctx));
            let (inp, tg) = mask_tokens(&s, rate, model.config.vocab_size, rng);
            inputs.push(pad_to(&inp, t));
            targets.extend(tg);
            targets.extend(std::iter::repeat_n(None, t - s.len()));
        }
        let refs: Vec<&TokenSequence> = inputs.iter().collect();
        Ok(MaskedBatch {
            batch: TokenBatch::new(&refs, model.config.vocab_size, ctx)?,
            targets,
        })
    }

    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Optimizer state for step-wise masked-LM training.
pub struct MlmTrainer {
    pub optimizer: Adam,
}

fn mlm_graph(model: &Transformer, tape: &mut Tape, mb: &MaskedBatch, train: bool) -> (crate::autodiff::Bound, crate::autodiff::Var) {
    let b = model.params.bind(tape, |n| train && !super::is_head_parameter(n));
    let enc = model.encode(tape, &b, &mb.batch, None);
    let rows: Vec<usize> = (0..mb.targets.len()).filter(|&i| mb.targets[i].is_some()).collect();
    let targets: Vec<Option<usize>> = rows.iter().map(|&i| mb.targets[i].map(|t| t as usize)).collect();
    let logits = model.lm_logits(tape, &b, enc.hidden, &rows);
    let loss = tape.softmax_cross_entropy(logits, &targets);
    (b, loss)
}

impl MlmTrainer {
    pub fn new(model: &Transformer) -> Self {
        MlmTrainer {
            optimizer: Adam::new(&model.params),
        }
    }

    /// Masked-LM loss without updating anything.
    pub fn loss(model: &Transformer, mb: &MaskedBatch) -> f64 {
        let mut tape = Tape::new();
        let (_, loss) = mlm_graph(model, &mut tape, mb, false);
        tape.value(loss).scalar()
    }

    /// One Adam step; returns the loss before the update.
    pub fn step(&mut self, model: &mut Transformer, mb: &MaskedBatch, lr: f64) -> Result<f64> {
        if mb.num_targets() == 0 {
            return Err(Error::invalid("masked batch has no prediction targets"));
        }
        let mut tape = Tape::new();
        let (b, loss) = mlm_graph(model, &mut tape, mb, true);
        let value = tape.value(loss).scalar();
        let mut grads = tape.backward(loss);
        let g = b.collect_grads(&mut grads);
        self.optimizer.update(&mut model.params, &g, lr)?;
        Ok(value)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// `(step, loss)` per optimizer step.
    pub losses: Vec<(usize, f64)>,
    pub optimizer: Adam,
}

/// Masked-token pretraining over `corpus` for `plan.max_epochs` epochs.
pub fn pretrain_masked(model: &mut Transformer, corpus: &[TokenSequence], plan: &super::TrainingPlan) -> Result<PretrainOutcome> {
    plan.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut trainer = MlmTrainer::new(model);
    let total = corpus.len().div_ceil(plan.batch_size) * plan.max_epochs;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut losses = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..plan.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(plan.batch_size) {
            let seqs: Vec<&TokenSequence> = chunk.iter().map(|&i| &corpus[i]).collect();
            let mb = MaskedBatch::new(&seqs, plan.mask_rate, model, &mut rng)?;
            if mb.num_targets() == 0 {
                continue;
            }
            let lr = plan.learning_rate_at(step, total);
            let loss = trainer.step(model, &mb, lr)?;
            step += 1;
            losses.push((step, loss));
            log::debug!("pretrain step {step} loss {loss:.4}");
        }
    }
    Ok(PretrainOutcome {
        losses,
        optimizer: trainer.optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TrainingPlan};
    use crate::tokenizer::{CLS_ID, VOCAB_SIZE};

    fn random_seq(rng: &mut impl Rng, n: usize) -> TokenSequence {
        let mut ids = vec![CLS_ID];
        ids.extend((1..n).map(|_| rng.gen_range(8..VOCAB_SIZE as u32)));
        TokenSequence::from_ids(ids)
    }

    #[test]
    fn selection_count_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_seq(&mut rng, 101);
        let (inp, t) = mask_tokens(&s, 0.15, VOCAB_SIZE, &mut rng);
        assert_eq!(t.iter().filter(|x| x.is_some()).count(), 15);
        assert!(t[0].is_none());
        assert_eq!(inp.ids[0], CLS_ID);
        let padded = pad_to(&s, 120);
        let (_, t) = mask_tokens(&padded, 0.15, VOCAB_SIZE, &mut rng);
        assert!(t[101..].iter().all(Option::is_none));
    }

    #[test]
    fn replacement_proportions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_seq(&mut rng, 1001);
        let (mut masked, mut kept, mut total) = (0, 0, 0);
        for _ in 0..50 {
            let (inp, t) = mask_tokens(&s, 0.15, VOCAB_SIZE, &mut rng);
            for (i, tg) in t.iter().enumerate() {
                if tg.is_some() {
                    total += 1;
                    if inp.ids[i] == MASK_ID {
                        masked += 1;
                    } else if inp.ids[i] == s.ids[i] {
                        kept += 1;
                    }
                }
            }
        }
        let fm = masked as f64 / total as f64;
        let fk = kept as f64 / total as f64;
        assert!((fm - 0.8).abs() < 0.02, "{fm}");
        assert!((fk - 0.1).abs() < 0.02, "{fk}");
    }

    #[test]
    fn initial_loss_near_log_vocab() {
        let m = Transformer::new(ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seqs: Vec<TokenSequence> = (0..8).map(|_| random_seq(&mut rng, 60)).collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let mb = MaskedBatch::new(&refs, 0.15, &m, &mut rng).unwrap();
        let loss = MlmTrainer::loss(&m, &mb);
        assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 0.1, "{loss}");
    }

    #[test]
    fn pretraining_is_deterministic_and_leaves_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corpus: Vec<TokenSequence> = (0..6).map(|_| random_seq(&mut rng, 20)).collect();
        let plan = TrainingPlan {
            max_epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let cfg = ModelConfig {
            embed_dim: 16,
            num_heads: 2,
            ffn_hidden: 32,
            ..Default::default()
        };
        let mut a = Transformer::new(cfg.clone()).unwrap();
        let mut b = Transformer::new(cfg).unwrap();
        let head = a.params.get("classifier.weight").unwrap().clone();
        let oa = pretrain_masked(&mut a, &corpus, &plan).unwrap();
        let ob = pretrain_masked(&mut b, &corpus, &plan).unwrap();
        assert_eq!(oa.losses, ob.losses);
        assert_eq!(oa.losses.len(), 4);
        assert_eq!(a.params, b.params);
        assert_eq!(a.params.get("classifier.weight").unwrap(), &head);
        assert!(pretrain_masked(&mut a, &[], &plan).is_err());
    }
}
