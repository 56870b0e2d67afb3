//! Encoder-only transformer over 6-mer tokens: rotary attention, gated Swish
//! feed-forward, pre-norm residual blocks, an LM head for masked pretraining
//! and a pooled classification head.

pub mod checkpoint;
pub mod pretrain;
pub mod protocols;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Params, SeqShape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, Vocabulary, PAD_ID, VOCAB_SIZE};

pub use checkpoint::Checkpoint;
pub use pretrain::{mask_tokens, pretrain_masked, MaskedBatch, MlmTrainer, PretrainOutcome};
pub use protocols::{embed, few_shot_curve, kmeans, stratified_sample, zero_shot_classify, FewShotPoint, KMeansResult, ZeroShotResult, DEFAULT_SHOTS};
pub use train::{fit, predict, predict_proba, Classifier, TrainOutcome, TrainingPlan};

pub const TRANSFORMER_KIND: &str = "transformer";
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub context_tokens: usize,
    pub num_labels: usize,
    pub rope_base: f64,
    pub dropout: f64,
    pub seed: u64,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_hidden: 128,
            context_tokens: crate::tokenizer::DEFAULT_CONTEXT_TOKENS,
            num_labels: 2,
            rope_base: 10_000.0,
            dropout: 0.0,
            seed: 0,
            pooling: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::invalid("vocab_size must cover the special and nucleotide tokens"));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid("embed_dim must be a positive multiple of num_heads"));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::invalid("head_dim must be even for rotary pairing"));
        }
        if self.context_tokens < 2 {
            return Err(Error::invalid("context_tokens must be at least 2"));
        }
        if !(2..=crate::seqio::MAX_SPECIES_LABELS).contains(&self.num_labels) {
            return Err(Error::invalid("num_labels must be between 2 and 7"));
        }
        if self.ffn_hidden == 0 || self.num_layers == 0 {
            return Err(Error::invalid("ffn_hidden and num_layers must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        if self.rope_base.is_nan() || self.rope_base <= 1.0 {
            return Err(Error::invalid("rope_base must exceed 1"));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters:
    /// `V·d + L·(4(d² + d) + 4d + 3·d·f) + 2d + d·V + V + d·C + C`
    /// (embedding, per-layer attention with biases, two norms and bias-free
    /// gated FFN, final norm, LM head, classifier head).
    pub fn parameter_count(&self) -> usize {
        let (v, d, l, f, c) = (self.vocab_size, self.embed_dim, self.num_layers, self.ffn_hidden, self.num_labels);
        v * d + l * (4 * (d * d + d) + 4 * d + 3 * d * f) + 2 * d + d * v + v + d * c + c
    }
}

/// Padded token ids for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub shape: SeqShape,
}

impl TokenBatch {
    /// Strict constructor: every sequence must already have the same length.
    pub fn new(seqs: &[&TokenSequence], vocab_size: usize, context: usize) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(Error::invalid("empty batch"));
        };
        let t = first.len();
        if t == 0 || t > context {
            return Err(Error::Shape(format!("sequence length {t} outside 1..={context}")));
        }
        let mut ids = Vec::with_capacity(seqs.len() * t);
        let mut mask = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            if s.len() != t {
                return Err(Error::Shape(format!("mixed sequence lengths {} and {t} in one batch", s.len())));
            }
            if let Some(&bad) = s.ids.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::TokenOutOfRange(bad));
            }
            ids.extend_from_slice(&s.ids);
            mask.extend_from_slice(&s.attention_mask);
        }
        Ok(TokenBatch {
            ids,
            mask,
            shape: SeqShape { batch: seqs.len(), seq: t },
        })
    }

    /// Truncates to `context` and right-pads to the longest member.
    pub fn padded(seqs: &[&TokenSequence], vocab_size: usize, context: usize) -> Result<Self> {
        let t = seqs.iter().map(|s| s.len().min(context)).max().unwrap_or(0);
        let fitted: Vec<TokenSequence> = seqs.iter().map(|s| crate::tokenizer::pad_or_truncate(s, t.max(1))).collect();
        let refs: Vec<&TokenSequence> = fitted.iter().collect();
        Self::new(&refs, vocab_size, context)
    }
}

/// Tape handles produced by the encoder.
pub struct Encoded {
    pub hidden: Var,
    pub pooled: Var,
    pub attention: Vec<Var>,
    pub shape: SeqShape,
}

/// Plain values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[batch * seq, d]` final normalized hidden states.
    pub hidden: Tensor,
    /// `[batch, d]`.
    pub pooled: Tensor,
    /// `[batch, num_labels]`.
    pub logits: Tensor,
    /// Per layer, `[batch, heads, query, key]` attention weights.
    pub attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: Params,
    /// When set, only the classifier head is trained by [`fit`].
    pub frozen_backbone: bool,
    /// When set, the token embedding table is left untouched by [`fit`].
    /// Adam moves rarely seen rows as far as common ones, so on small
    /// labelled sets a trainable table mostly memorises background tokens.
    pub frozen_embeddings: bool,
}

fn layer(l: usize, name: &str) -> String {
    format!("layers.{l}.{name}")
}

pub fn is_head_parameter(name: &str) -> bool {
    name.starts_with("classifier.")
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f, c) = (config.vocab_size, config.embed_dim, config.ffn_hidden, config.num_labels);
        let mut p = Params::new();
        let mut randn = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng);
        p.insert("embed.weight", randn(&[v, d]));
        for l in 0..config.num_layers {
            p.insert(layer(l, "ln1.gamma"), Tensor::filled(&[d], 1.0));
            p.insert(layer(l, "ln1.beta"), Tensor::zeros(&[d]));
            for proj in ["q", "k", "v", "o"] {
                p.insert(layer(l, &format!("attn.{proj}.weight")), randn(&[d, d]));
                p.insert(layer(l, &format!("attn.{proj}.bias")), Tensor::zeros(&[d]));
            }
            p.insert(layer(l, "ln2.gamma"), Tensor::filled(&[d], 1.0));
            p.insert(layer(l, "ln2.beta"), Tensor::zeros(&[d]));
            p.insert(layer(l, "ffn.gate.weight"), randn(&[d, f]));
            p.insert(layer(l, "ffn.value.weight"), randn(&[d, f]));
            p.insert(layer(l, "ffn.out.weight"), randn(&[f, d]));
        }
        p.insert("final_ln.gamma", Tensor::filled(&[d], 1.0));
        p.insert("final_ln.beta", Tensor::zeros(&[d]));
        p.insert("lm_head.weight", randn(&[d, v]));
        p.insert("lm_head.bias", Tensor::zeros(&[v]));
        p.insert("classifier.weight", randn(&[d, c]));
        p.insert("classifier.bias", Tensor::zeros(&[c]));
        p.round_to_f32();
        Ok(Transformer {
            config,
            params: p,
            frozen_backbone: false,
            frozen_embeddings: false,
        })
    }

    /// Replaces the classifier head with a freshly initialized one for
    /// `num_labels` classes, keeping the backbone.
    pub fn with_new_head(&self, num_labels: usize, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.num_labels = num_labels;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (name, t) in self.params.iter() {
            if !is_head_parameter(name) {
                params.insert(name, t.clone());
            }
        }
        let mut w = Tensor::randn(&[config.embed_dim, num_labels], INIT_STD, &mut rng);
        w.round_to_f32();
        params.insert("classifier.weight", w);
        params.insert("classifier.bias", Tensor::zeros(&[num_labels]));
        Ok(Transformer {
            config,
            params,
            frozen_backbone: self.frozen_backbone,
            frozen_embeddings: self.frozen_embeddings,
        })
    }

    pub fn batch(&self, seqs: &[&TokenSequence]) -> Result<TokenBatch> {
        TokenBatch::padded(seqs, self.config.vocab_size, self.config.context_tokens)
    }

    /// Runs the encoder on `tape`. Pass `rng` to enable dropout.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, batch: &TokenBatch, mut rng: Option<&mut ChaCha8Rng>) -> Encoded {
        let cfg = &self.config;
        let (hd, base) = (cfg.head_dim(), cfg.rope_base);
        let shape = batch.shape;
        let mut x = tape.gather(b.var("embed.weight"), &batch.ids);
        let mut attention = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let v = |n: &str| b.var(&layer(l, n));
            let h = tape.layer_norm(x, v("ln1.gamma"), v("ln1.beta"), LN_EPS);
            let proj = |t: &mut Tape, p: &str| {
                let m = t.matmul(h, v(&format!("attn.{p}.weight")));
                t.add_row(m, v(&format!("attn.{p}.bias")))
            };
            let q = proj(tape, "q");
            let k = proj(tape, "k");
            let val = proj(tape, "v");
            let q = tape.rotary(q, shape.seq, hd, base);
            let k = tape.rotary(k, shape.seq, hd, base);
            let a = tape.attention(q, k, val, shape, cfg.num_heads, &batch.mask);
            attention.push(a);
            let o = tape.matmul(a, v("attn.o.weight"));
            let mut o = tape.add_row(o, v("attn.o.bias"));
            if let Some(r) = rng.as_deref_mut() {
                o = tape.dropout(o, cfg.dropout, r);
            }
            x = tape.add(x, o);

            let h2 = tape.layer_norm(x, v("ln2.gamma"), v("ln2.beta"), LN_EPS);
            let g = tape.matmul(h2, v("ffn.gate.weight"));
            let g = tape.silu(g);
            let u = tape.matmul(h2, v("ffn.value.weight"));
            let gu = tape.mul(g, u);
            let mut ff = tape.matmul(gu, v("ffn.out.weight"));
            if let Some(r) = rng.as_deref_mut() {
                ff = tape.dropout(ff, cfg.dropout, r);
            }
            x = tape.add(x, ff);
        }
        let hidden = tape.layer_norm(x, b.var("final_ln.gamma"), b.var("final_ln.beta"), LN_EPS);
        let pooled = match cfg.pooling {
            Pooling::Mean => tape.masked_mean(hidden, shape, &batch.mask),
            Pooling::Cls => {
                let rows: Vec<usize> = (0..shape.batch).map(|i| i * shape.seq).collect();
                tape.select_rows(hidden, &rows)
            }
        };
        Encoded {
            hidden,
            pooled,
            attention,
            shape,
        }
    }

    pub fn class_logits(&self, tape: &mut Tape, b: &Bound, pooled: Var) -> Var {
        let m = tape.matmul(pooled, b.var("classifier.weight"));
        tape.add_row(m, b.var("classifier.bias"))
    }

    /// LM logits for the listed hidden-state rows only.
    pub fn lm_logits(&self, tape: &mut Tape, b: &Bound, hidden: Var, rows: &[usize]) -> Var {
        let h = tape.select_rows(hidden, rows);
        let m = tape.matmul(h, b.var("lm_head.weight"));
        tape.add_row(m, b.var("lm_head.bias"))
    }

    /// Inference on equal-length sequences.
    pub fn forward(&self, seqs: &[TokenSequence]) -> Result<ForwardOutput> {
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let batch = TokenBatch::new(&refs, self.config.vocab_size, self.config.context_tokens)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, |_| false);
        let enc = self.encode(&mut tape, &b, &batch, None);
        let logits = self.class_logits(&mut tape, &b, enc.pooled);
        Ok(ForwardOutput {
            hidden: tape.value(enc.hidden).clone(),
            pooled: tape.value(enc.pooled).clone(),
            logits: tape.value(logits).clone(),
            attention: enc
                .attention
                .iter()
                .map(|&a| tape.attention_probs(a).unwrap_or_default().to_vec())
                .collect(),
        })
    }

    pub fn to_checkpoint(&self, optimizer: Option<crate::autodiff::Adam>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: TRANSFORMER_KIND.into(),
            config: serde_json::to_value(&self.config)?,
            vocab_fingerprint: Some(Vocabulary::build().fingerprint()),
            params: self.params.clone(),
            optimizer,
            metadata: serde_json::Value::Null,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != TRANSFORMER_KIND {
            return Err(Error::Format(format!("checkpoint holds a `{}`, not a transformer", ck.kind)));
        }
        let config: ModelConfig = serde_json::from_value(ck.config.clone())?;
        if let Some(fp) = &ck.vocab_fingerprint {
            if config.vocab_size == VOCAB_SIZE && *fp != Vocabulary::build().fingerprint() {
                return Err(Error::Format("checkpoint vocabulary fingerprint does not match".into()));
            }
        }
        let template = Transformer::new(config.clone())?;
        ck.check_layout(&template.params)?;
        Ok(Transformer {
            config,
            params: ck.params.clone(),
            frozen_backbone: false,
            frozen_embeddings: false,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Classifier for Transformer {
    type Input = TokenSequence;

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn num_labels(&self) -> usize {
        self.config.num_labels
    }

    fn trainable(&self, name: &str) -> bool {
        if self.frozen_embeddings && name == "embed.weight" {
            return false;
        }
        !self.frozen_backbone || is_head_parameter(name)
    }

    fn logits(&self, tape: &mut Tape, b: &Bound, batch: &[&TokenSequence], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let tb = self.batch(batch)?;
        let enc = self.encode(tape, b, &tb, rng);
        Ok(self.class_logits(tape, b, enc.pooled))
    }
}

/// Pads a token sequence with `[PAD]` to `len` (no truncation).
pub fn pad_to(seq: &TokenSequence, len: usize) -> TokenSequence {
    let mut s = seq.clone();
    while s.ids.len() < len {
        s.ids.push(PAD_ID);
        s.attention_mask.push(false);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::tokenizer::encode;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_hidden: 12,
            context_tokens: 8,
            ..Default::default()
        }
    }

    fn random_tokens(rng: &mut impl Rng, n: usize) -> TokenSequence {
        let mut ids = vec![crate::tokenizer::CLS_ID];
        ids.extend((1..n).map(|_| rng.gen_range(3..VOCAB_SIZE as u32)));
        TokenSequence::from_ids(ids)
    }

    #[test]
    fn parameter_count_matches_formula() {
        for cfg in [ModelConfig::default(), tiny_config(), ModelConfig { num_labels: 7, num_layers: 3, ..Default::default() }] {
            let m = Transformer::new(cfg.clone()).unwrap();
            assert_eq!(m.params.num_scalars(), cfg.parameter_count());
        }
        assert_eq!(ModelConfig::default().parameter_count(), 612_618);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { num_heads: 3, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { embed_dim: 12, num_heads: 4, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { num_labels: 8, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { context_tokens: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_attention_rows() {
        let m = Transformer::new(ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tokens(&mut rng, 10);
        let b = pad_to(&random_tokens(&mut rng, 6), 10);
        let out = m.forward(&[a, b.clone()]).unwrap();
        assert_eq!(out.pooled.shape, vec![2, 64]);
        assert_eq!(out.logits.shape, vec![2, 2]);
        let (h, t) = (4, 10);
        for probs in &out.attention {
            for bi in 0..2 {
                for hh in 0..h {
                    for q in 0..t {
                        let row = &probs[((bi * h + hh) * t + q) * t..][..t];
                        let s: f64 = row.iter().sum();
                        assert!((s - 1.0).abs() < 1e-6);
                        for (j, &p) in row.iter().enumerate() {
                            if !b.attention_mask[j] && bi == 1 {
                                assert_eq!(p, 0.0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn forward_errors() {
        let m = Transformer::new(tiny_config()).unwrap();
        let a = TokenSequence::from_ids(vec![2, 5, 9]);
        let b = TokenSequence::from_ids(vec![2, 5]);
        assert!(matches!(m.forward(&[a.clone(), b]), Err(Error::Shape(_))));
        let bad = TokenSequence::from_ids(vec![2, 5000, 9]);
        assert!(matches!(m.forward(&[bad]), Err(Error::TokenOutOfRange(5000))));
        let long = TokenSequence::from_ids(vec![2; 9]);
        assert!(m.forward(&[long]).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut m = Transformer::new(ModelConfig::default()).unwrap();
        m.params.get_mut("classifier.weight").unwrap().data.fill(0.0);
        let out = m.forward(&[encode("ACGTACGTACGTAAAC", None).unwrap()]).unwrap();
        let p = train::softmax(out.logits.row(0));
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn embedding_ignores_trailing_padding() {
        let m = Transformer::new(ModelConfig::default()).unwrap();
        let s = encode(&"ACGTTGCA".repeat(10), None).unwrap();
        let a = m.forward(&[pad_to(&s, s.len() + 3)]).unwrap();
        let b = m.forward(&[pad_to(&s, s.len() + 40)]).unwrap();
        for (x, y) in a.pooled.data.iter().zip(&b.pooled.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Transformer::new(ModelConfig { seed: 9, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Transformer::load(&path).unwrap();
        assert_eq!(back.params, m.params);
        let s = vec![encode("ACGTACGTTTGCAAAAAAGG", None).unwrap()];
        let (a, b) = (m.forward(&s).unwrap(), back.forward(&s).unwrap());
        assert_eq!(a.logits.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.logits.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let other = dir.path().join("m2.ckpt");
        Transformer::new(ModelConfig { seed: 9, ..Default::default() }).unwrap().save(&other).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&other).unwrap());
    }

    /// Scalar objective touching every parameter: MLM loss on a few rows
    /// plus classifier cross-entropy.
    fn objective(m: &Transformer, p: &Params, batch: &TokenBatch, rows: &[usize], targets: &[Option<usize>], labels: &[Option<usize>]) -> (Tape, Bound, Var) {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| true);
        let enc = m.encode(&mut tape, &b, batch, None);
        let lm = m.lm_logits(&mut tape, &b, enc.hidden, rows);
        let l1 = tape.softmax_cross_entropy(lm, targets);
        let cl = m.class_logits(&mut tape, &b, enc.pooled);
        let l2 = tape.softmax_cross_entropy(cl, labels);
        let loss = tape.add(l1, l2);
        (tape, b, loss)
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let mut m = Transformer::new(tiny_config()).unwrap();
        // Larger weights make the check sensitive to every term.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in m.params.tensors_mut() {
            for v in &mut t.data {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let a = random_tokens(&mut rng, 8);
        let b = pad_to(&random_tokens(&mut rng, 5), 8);
        let batch = m.batch(&[&a, &b]).unwrap();
        let rows = [1, 3, 9, 12];
        let targets: Vec<Option<usize>> = rows.iter().map(|&r| Some(batch.ids[r] as usize)).collect();
        let labels = [Some(0), Some(1)];
        let (tape, bound, loss) = objective(&m, &m.params, &batch, &rows, &targets, &labels);
        let mut grads = tape.backward(loss);
        let analytic = bound.collect_grads(&mut grads);
        let loss_of = |p: &Params| {
            let (t, _, l) = objective(&m, p, &batch, &rows, &targets, &labels);
            t.value(l).scalar()
        };
        let used: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        for (pi, name) in m.params.names().iter().enumerate() {
            let t = m.params.get(name).unwrap();
            let entries: Vec<usize> = if name == "embed.weight" {
                used.iter().flat_map(|&r| (r * 8..r * 8 + 8).collect::<Vec<_>>()).collect()
            } else if t.numel() > 400 {
                let mut e: Vec<usize> = (0..300).map(|_| rng.gen_range(0..t.numel())).collect();
                if name.starts_with("lm_head") {
                    let cols: Vec<usize> = targets.iter().map(|x| x.unwrap()).collect();
                    for c in cols {
                        if name.ends_with("bias") {
                            e.push(c);
                        } else {
                            e.extend((0..8).map(|r| r * VOCAB_SIZE + c));
                        }
                    }
                }
                e
            } else {
                (0..t.numel()).collect()
            };
            let num = gradcheck::numeric(&m.params, name, &entries, 1e-5, &loss_of);
            let g = analytic[pi].as_ref().expect("every parameter receives a gradient");
            let ana: Vec<f64> = entries.iter().map(|&e| g.data[e]).collect();
            let err = gradcheck::relative_error(&ana, &num);
            assert!(err < 1e-5, "{name}: relative error {err}");
        }
    }

    #[test]
    fn with_new_head_keeps_backbone() {
        let m = Transformer::new(ModelConfig::default()).unwrap();
        let m7 = m.with_new_head(7, 1).unwrap();
        assert_eq!(m7.params.get("classifier.weight").unwrap().shape, vec![64, 7]);
        assert_eq!(m7.params.get("embed.weight"), m.params.get("embed.weight"));
        assert_eq!(m7.params.num_scalars(), m7.config.parameter_count());
    }
}
