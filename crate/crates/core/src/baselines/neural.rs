//! One-hot convolutional and recurrent classifiers.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Params, SeqShape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{OneHotMatrix, ONE_HOT_CHANNELS};
use crate::model::{Checkpoint, Classifier};

pub const CNN_KIND: &str = "cnn";
pub const LSTM_KIND: &str = "lstm";

/// Inputs longer than this are truncated before one-hot encoding.
pub const MAX_NEURAL_LENGTH: usize = 10_000;

fn stack_inputs(batch: &[&OneHotMatrix], fixed_length: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch.len() * fixed_length * ONE_HOT_CHANNELS);
    for m in batch {
        if m.fixed_length != fixed_length {
            return Err(Error::Shape(format!("one-hot length {} but model expects {fixed_length}", m.fixed_length)));
        }
        data.extend_from_slice(&m.values);
    }
    Ok(Tensor::new(vec![batch.len() * fixed_length, ONE_HOT_CHANNELS], data))
}

fn init(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, std, rng);
    t.round_to_f32();
    t
}

fn check_labels(n: usize) -> Result<()> {
    if !(2..=crate::seqio::MAX_SPECIES_LABELS).contains(&n) {
        return Err(Error::invalid("num_labels must be between 2 and 7"));
    }
    Ok(())
}

fn to_checkpoint<C: Serialize>(kind: &str, config: &C, params: &Params) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: kind.into(),
        config: serde_json::to_value(config)?,
        vocab_fingerprint: None,
        params: params.clone(),
        optimizer: None,
        metadata: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub filters: usize,
    pub kernel_width: usize,
    pub dense_hidden: usize,
    pub fixed_length: usize,
    pub num_labels: usize,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            filters: 64,
            kernel_width: 8,
            dense_hidden: 64,
            fixed_length: 150,
            num_labels: 2,
            seed: 0,
        }
    }
}

/// conv(4 → filters, valid) → ReLU → global max pool → dense → ReLU → dense.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    pub config: CnnConfig,
    pub params: Params,
}

impl Cnn {
    pub fn new(config: CnnConfig) -> Result<Self> {
        if config.fixed_length < config.kernel_width {
            return Err(Error::invalid(format!(
                "fixed_length {} is shorter than kernel_width {}",
                config.fixed_length, config.kernel_width
            )));
        }
        if config.filters == 0 || config.kernel_width == 0 || config.dense_hidden == 0 {
            return Err(Error::invalid("filters, kernel_width and dense_hidden must be positive"));
        }
        check_labels(config.num_labels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fan_in = config.kernel_width * ONE_HOT_CHANNELS;
        let mut p = Params::new();
        p.insert("conv.weight", init(&[fan_in, config.filters], (2.0 / fan_in as f64).sqrt(), &mut rng));
        p.insert("conv.bias", Tensor::zeros(&[config.filters]));
        p.insert(
            "dense1.weight",
            init(&[config.filters, config.dense_hidden], (2.0 / config.filters as f64).sqrt(), &mut rng),
        );
        p.insert("dense1.bias", Tensor::zeros(&[config.dense_hidden]));
        p.insert(
            "dense2.weight",
            init(&[config.dense_hidden, config.num_labels], (1.0 / config.dense_hidden as f64).sqrt(), &mut rng),
        );
        p.insert("dense2.bias", Tensor::zeros(&[config.num_labels]));
        Ok(Cnn { config, params: p })
    }

    /// Max-pooled filter activations `[batch, filters]`.
    pub fn pooled(&self, tape: &mut Tape, b: &Bound, batch: &[&OneHotMatrix]) -> Result<Var> {
        let cfg = &self.config;
        let x = tape.constant(stack_inputs(batch, cfg.fixed_length)?);
        let shape = SeqShape {
            batch: batch.len(),
            seq: cfg.fixed_length,
        };
        let cols = tape.unfold(x, shape, cfg.kernel_width);
        let conv = tape.matmul(cols, b.var("conv.weight"));
        let conv = tape.add_row(conv, b.var("conv.bias"));
        let act = tape.relu(conv);
        let positions = cfg.fixed_length + 1 - cfg.kernel_width;
        Ok(tape.max_pool(act, SeqShape { batch: batch.len(), seq: positions }))
    }

    pub fn pooled_features(&self, batch: &[&OneHotMatrix]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, |_| false);
        let p = self.pooled(&mut tape, &b, batch)?;
        let t = tape.value(p);
        Ok((0..batch.len()).map(|i| t.row(i).to_vec()).collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        to_checkpoint(CNN_KIND, &self.config, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CNN_KIND {
            return Err(Error::Format(format!("checkpoint holds a `{}`, not a cnn", ck.kind)));
        }
        let config: CnnConfig = serde_json::from_value(ck.config.clone())?;
        let template = Cnn::new(config.clone())?;
        ck.check_layout(&template.params)?;
        Ok(Cnn {
            config,
            params: ck.params.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }
}

impl Classifier for Cnn {
    type Input = OneHotMatrix;

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn num_labels(&self) -> usize {
        self.config.num_labels
    }

    fn logits(&self, tape: &mut Tape, b: &Bound, batch: &[&OneHotMatrix], _rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let pooled = self.pooled(tape, b, batch)?;
        let h = tape.matmul(pooled, b.var("dense1.weight"));
        let h = tape.add_row(h, b.var("dense1.bias"));
        let h = tape.relu(h);
        let o = tape.matmul(h, b.var("dense2.weight"));
        Ok(tape.add_row(o, b.var("dense2.bias")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub units: usize,
    pub fixed_length: usize,
    pub num_labels: usize,
    pub seed: u64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            units: 50,
            fixed_length: 150,
            num_labels: 2,
            seed: 0,
        }
    }
}

/// Single-layer LSTM (gate order input, forget, cell, output) whose final
/// hidden state feeds a dense classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub config: LstmConfig,
    pub params: Params,
}

impl Lstm {
    pub fn new(config: LstmConfig) -> Result<Self> {
        if config.units == 0 || config.fixed_length == 0 {
            return Err(Error::invalid("units and fixed_length must be positive"));
        }
        check_labels(config.num_labels)?;
        let h = config.units;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 1.0 / (h as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            let mut t = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect());
            t.round_to_f32();
            t
        };
        let mut p = Params::new();
        p.insert("lstm.input.weight", uniform(&[ONE_HOT_CHANNELS, 4 * h]));
        p.insert("lstm.recurrent.weight", uniform(&[h, 4 * h]));
        let mut bias = Tensor::zeros(&[4 * h]);
        bias.data[h..2 * h].fill(1.0);
        p.insert("lstm.bias", bias);
        p.insert("head.weight", uniform(&[h, config.num_labels]));
        p.insert("head.bias", Tensor::zeros(&[config.num_labels]));
        Ok(Lstm { config, params: p })
    }

    /// Final hidden state `[batch, units]`.
    pub fn final_state(&self, tape: &mut Tape, b: &Bound, batch: &[&OneHotMatrix]) -> Result<Var> {
        let (l, h, n) = (self.config.fixed_length, self.config.units, batch.len());
        let x = tape.constant(stack_inputs(batch, l)?);
        let xw = tape.matmul(x, b.var("lstm.input.weight"));
        let w_h = b.var("lstm.recurrent.weight");
        let bias = b.var("lstm.bias");
        let mut hs = tape.constant(Tensor::zeros(&[n, h]));
        let mut cs = tape.constant(Tensor::zeros(&[n, h]));
        for t in 0..l {
            let rows: Vec<usize> = (0..n).map(|i| i * l + t).collect();
            let xt = tape.select_rows(xw, &rows);
            let rec = tape.matmul(hs, w_h);
            let z = tape.add(xt, rec);
            let z = tape.add_row(z, bias);
            let i = tape.slice_cols(z, 0, h);
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(z, h, 2 * h);
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(z, 2 * h, 3 * h);
            let g = tape.tanh(g);
            let o = tape.slice_cols(z, 3 * h, 4 * h);
            let o = tape.sigmoid(o);
            let fc = tape.mul(f, cs);
            let ig = tape.mul(i, g);
            cs = tape.add(fc, ig);
            let tc = tape.tanh(cs);
            hs = tape.mul(o, tc);
        }
        Ok(hs)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        to_checkpoint(LSTM_KIND, &self.config, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != LSTM_KIND {
            return Err(Error::Format(format!("checkpoint holds a `{}`, not an lstm", ck.kind)));
        }
        let config: LstmConfig = serde_json::from_value(ck.config.clone())?;
        let template = Lstm::new(config.clone())?;
        ck.check_layout(&template.params)?;
        Ok(Lstm {
            config,
            params: ck.params.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }
}

impl Classifier for Lstm {
    type Input = OneHotMatrix;

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn num_labels(&self) -> usize {
        self.config.num_labels
    }

    fn logits(&self, tape: &mut Tape, b: &Bound, batch: &[&OneHotMatrix], _rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let h = self.final_state(tape, b, batch)?;
        let o = tape.matmul(h, b.var("head.weight"));
        Ok(tape.add_row(o, b.var("head.bias")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::features::one_hot;

    fn random_dna(rng: &mut impl Rng, n: usize) -> String {
        (0..n).map(|_| b"ACGT"[rng.gen_range(0..4)] as char).collect()
    }

    fn check_gradients<C: Classifier<Input = OneHotMatrix>>(model: &C, inputs: &[OneHotMatrix], labels: &[usize]) {
        let refs: Vec<&OneHotMatrix> = inputs.iter().collect();
        let targets: Vec<Option<usize>> = labels.iter().map(|&y| Some(y)).collect();
        let loss_of = |p: &Params| {
            let mut m = model.clone();
            *m.params_mut() = p.clone();
            let mut tape = Tape::new();
            let b = m.params().bind(&mut tape, |_| true);
            let l = m.logits(&mut tape, &b, &refs, None).unwrap();
            let loss = tape.softmax_cross_entropy(l, &targets);
            tape.value(loss).scalar()
        };
        let mut tape = Tape::new();
        let b = model.params().bind(&mut tape, |_| true);
        let l = model.logits(&mut tape, &b, &refs, None).unwrap();
        let loss = tape.softmax_cross_entropy(l, &targets);
        let mut grads = tape.backward(loss);
        let analytic = b.collect_grads(&mut grads);
        for (i, name) in model.params().names().iter().enumerate() {
            let n = model.params().get(name).unwrap().numel();
            let entries: Vec<usize> = (0..n).collect();
            let num = gradcheck::numeric(model.params(), name, &entries, 1e-6, &loss_of);
            let ana = analytic[i].as_ref().map(|t| t.data.clone()).unwrap_or(vec![0.0; n]);
            let err = gradcheck::relative_error(&ana, &num);
            assert!(err < 1e-5, "{name}: relative error {err}");
        }
    }

    #[test]
    fn cnn_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cnn = Cnn::new(CnnConfig {
            filters: 2,
            kernel_width: 4,
            dense_hidden: 3,
            fixed_length: 12,
            num_labels: 2,
            seed: 1,
        })
        .unwrap();
        let inputs: Vec<OneHotMatrix> = (0..3).map(|_| one_hot(&random_dna(&mut rng, 12), 12)).collect();
        check_gradients(&cnn, &inputs, &[0, 1, 1]);
    }

    #[test]
    fn lstm_gradients_through_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lstm = Lstm::new(LstmConfig {
            units: 3,
            fixed_length: 8,
            num_labels: 2,
            seed: 2,
        })
        .unwrap();
        let inputs: Vec<OneHotMatrix> = (0..3).map(|_| one_hot(&random_dna(&mut rng, 8), 8)).collect();
        check_gradients(&lstm, &inputs, &[1, 0, 1]);
    }

    #[test]
    fn output_shapes_and_errors() {
        let cnn = Cnn::new(CnnConfig {
            fixed_length: 30,
            num_labels: 7,
            ..Default::default()
        })
        .unwrap();
        let x = one_hot(&"ACGT".repeat(10), 30);
        let mut tape = Tape::new();
        let b = cnn.params.bind(&mut tape, |_| false);
        let l = cnn.logits(&mut tape, &b, &[&x, &x], None).unwrap();
        assert_eq!(tape.value(l).shape, vec![2, 7]);
        let wrong = one_hot("ACGT", 4);
        assert!(cnn.logits(&mut tape, &b, &[&wrong], None).is_err());
        assert!(Cnn::new(CnnConfig {
            fixed_length: 5,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn cnn_pooling_is_translation_invariant() {
        let cnn = Cnn::new(CnnConfig {
            fixed_length: 60,
            ..Default::default()
        })
        .unwrap();
        let place = |pos: usize| {
            let mut s = vec![b'N'; 60];
            s[pos..pos + 6].copy_from_slice(b"ACGTAA");
            one_hot(std::str::from_utf8(&s).unwrap(), 60)
        };
        // Every window touching the motif must exist: 7 <= pos <= 60 - 6 - 7.
        let base = cnn.pooled_features(&[&place(7)]).unwrap();
        for pos in [8, 20, 33, 47] {
            assert_eq!(cnn.pooled_features(&[&place(pos)]).unwrap(), base);
        }
    }

    #[test]
    fn lstm_constant_input_gives_identical_states() {
        let lstm = Lstm::new(LstmConfig {
            fixed_length: 20,
            ..Default::default()
        })
        .unwrap();
        let x = one_hot(&"A".repeat(20), 20);
        let mut tape = Tape::new();
        let b = lstm.params.bind(&mut tape, |_| false);
        let h = lstm.final_state(&mut tape, &b, &[&x, &x, &x]).unwrap();
        let t = tape.value(h);
        assert_eq!(t.row(0), t.row(1));
        assert_eq!(t.row(1), t.row(2));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cnn = Cnn::new(CnnConfig { fixed_length: 20, ..Default::default() }).unwrap();
        cnn.save(&dir.path().join("c")).unwrap();
        assert_eq!(Cnn::from_checkpoint(&Checkpoint::load(&dir.path().join("c")).unwrap()).unwrap(), cnn);
        let lstm = Lstm::new(LstmConfig::default()).unwrap();
        lstm.save(&dir.path().join("l")).unwrap();
        assert_eq!(Lstm::from_checkpoint(&Checkpoint::load(&dir.path().join("l")).unwrap()).unwrap(), lstm);
        assert!(Lstm::from_checkpoint(&cnn.to_checkpoint().unwrap()).is_err());
    }
}
