//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero on any failure other than a documented known gap, which is
//! still reported as FAIL.

use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use genolm::autodiff::{gradcheck, Params, Tape, Tensor};
use genolm::baselines::{one_hot_inputs, train_cnn, train_forest, train_lstm, Cnn, CnnConfig, ForestConfig, Lstm, LstmConfig};
use genolm::dataset::{fragment, fragments_to_dataset, greedy_cluster, split_clusters, FragmentLength, Split, Thresholds, THRESHOLD_SWEEP};
use genolm::features::{kmer_frequencies, OneHotMatrix};
use genolm::metrics::{accuracy, auc_roc, f1, mcc, ConfusionMatrix};
use genolm::model::{
    few_shot_curve, fit, pad_to, predict, Checkpoint, Classifier, MaskedBatch, MlmTrainer, ModelConfig, Transformer,
    TrainingPlan,
};
use genolm::seqio::Dataset;
use genolm::synth::{generate_composition_dataset, generate_family_dataset, generate_motif_dataset, CompositionSpec, FamilySpec, SyntheticSpec};
use genolm::tokenizer::{self, TokenSequence, Vocabulary, VOCAB_SIZE};

struct Outcome {
    pass: bool,
    /// Set when the only failing part is a documented known gap.
    known_gap: Option<&'static str>,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, known_gap: None, detail: detail.into() }
}

fn random_dna(rng: &mut impl Rng, n: usize, alphabet: &[u8]) -> String {
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char).collect()
}

fn labels_of(ds: &Dataset) -> Vec<usize> {
    ds.label_indices().into_iter().map(|l| l.expect("labelled")).collect()
}

// 1 --------------------------------------------------------------------------

fn tokenizer_criterion() -> Outcome {
    let vocab = Vocabulary::build();
    let sixmers = vocab
        .iter()
        .filter(|(_, t)| t.len() == 6 && t.bytes().all(|b| b"ACGT".contains(&b)))
        .count();
    if vocab.len() != 4104 || sixmers != 4096 {
        return outcome(false, format!("{} entries, {sixmers} 6-mers", vocab.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    for i in 0..10_000 {
        let alphabet: &[u8] = if i % 3 == 0 { b"ACGTN" } else { b"ACGT" };
        let len = rng.gen_range(0..300);
        let s = random_dna(&mut rng, len, alphabet);
        let toks = tokenizer::encode(&s, None).unwrap();
        if tokenizer::decode(&toks.ids).unwrap() != s {
            return outcome(false, format!("round trip failed on string {i}"));
        }
        // Independent greedy re-scan.
        let b = s.as_bytes();
        let mut expect = vec![tokenizer::CLS_ID];
        let mut pos = 0;
        while pos < b.len() {
            let w = if pos + 6 <= b.len() && b[pos..pos + 6].iter().all(|c| b"ACGT".contains(c)) { 6 } else { 1 };
            expect.push(vocab.id(&s[pos..pos + w]).unwrap());
            pos += w;
        }
        if toks.ids != expect {
            return outcome(false, format!("greedy re-scan disagrees on string {i}"));
        }
    }
    let t = start.elapsed();
    outcome(t < Duration::from_secs(10), format!("4104 entries, 4096 6-mers, 10k strings in {t:.2?}"))
}

// 2 --------------------------------------------------------------------------

fn ratio(n: u64, d: u64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn oracle_f1(c: &[Vec<u64>]) -> f64 {
    let k = c.len();
    let row = |i: usize| c[i].iter().sum::<u64>();
    let col = |j: usize| c.iter().map(|r| r[j]).sum::<u64>();
    let f1k = |i: usize| {
        let (tp, t, p) = (c[i][i], row(i), col(i));
        if tp == 0 { ratio(0, 1) } else { ratio(2 * tp, t + p) }
    };
    if k == 2 {
        return f1k(1).to_f64().unwrap();
    }
    let present: Vec<usize> = (0..k).filter(|&i| row(i) + col(i) > 0).collect();
    let sum = present.iter().fold(ratio(0, 1), |acc, &i| acc + f1k(i));
    (sum / BigRational::from_integer(BigInt::from(present.len()))).to_f64().unwrap()
}

/// Multi-class MCC from its covariance definition, in exact arithmetic up to
/// the final square root.
fn oracle_mcc(c: &[Vec<u64>]) -> f64 {
    let k = c.len();
    let ci = |i: usize, j: usize| BigInt::from(c[i][j]);
    let mut num = BigInt::zero();
    for a in 0..k {
        for b in 0..k {
            for m in 0..k {
                num += ci(a, a) * ci(b, m) - ci(a, b) * ci(m, a);
            }
        }
    }
    let row = |i: usize| (0..k).map(|j| ci(i, j)).sum::<BigInt>();
    let col = |j: usize| (0..k).map(|i| ci(i, j)).sum::<BigInt>();
    let total: BigInt = (0..k).map(row).sum();
    let d1: BigInt = (0..k).map(|i| row(i) * (&total - row(i))).sum();
    let d2: BigInt = (0..k).map(|j| col(j) * (&total - col(j))).sum();
    if d1.is_zero() || d2.is_zero() {
        return 0.0;
    }
    let sq = BigRational::new(&num * &num, d1 * d2).to_f64().unwrap().sqrt();
    if num.is_negative() { -sq } else { sq }
}

fn oracle_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &p) in labels.iter().enumerate() {
        for (j, &q) in labels.iter().enumerate() {
            if p && !q {
                pairs += 1;
                twice += if scores[i] > scores[j] { 2 } else if scores[i] == scores[j] { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn metrics_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for t in 0..1000 {
        let k = if t % 2 == 0 { 2 } else { rng.gen_range(3..=7) };
        let n = rng.gen_range(1..200);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&y| if rng.gen_bool(0.6) { y } else { rng.gen_range(0..k) })
            .collect();
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, k).unwrap();
        let acc_exact = ratio(cm.counts.iter().enumerate().map(|(i, r)| r[i]).sum(), n as u64).to_f64().unwrap();
        for (got, want) in [
            (accuracy(&cm).unwrap(), acc_exact),
            (f1(&cm).unwrap(), oracle_f1(&cm.counts)),
            (mcc(&cm).unwrap(), oracle_mcc(&cm.counts)),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    if worst >= 1e-12 {
        return outcome(false, format!("max deviation {worst:e}"));
    }
    for v in 0..1000 {
        let n = rng.gen_range(2..=50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        // A coarse grid forces plenty of ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        let (got, want) = (auc_roc(&scores, &labels).unwrap(), oracle_auc(&scores, &labels));
        if got != want {
            return outcome(false, format!("AUC vector {v}: {got} vs pairwise {want}"));
        }
    }
    outcome(true, format!("1000 tables, max deviation {worst:e}; 1000 AUC vectors exact"))
}

// 3 --------------------------------------------------------------------------

fn leakage_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for d in 0..100u64 {
        let spec = FamilySpec {
            num_classes: rng.gen_range(2..=4),
            families_per_class: rng.gen_range(3..=6),
            members_per_family: rng.gen_range(2..=5),
            length_bp: rng.gen_range(150..=300),
            divergence: (0.0, rng.gen_range(0.05..0.45)),
            seed: d,
        };
        let ds = generate_family_dataset(&spec).unwrap();
        let mut counts = Vec::new();
        for tau in [0.4, 0.6, 0.8] {
            let m = greedy_cluster(&ds.records, Thresholds::uniform(tau).unwrap()).unwrap();
            let s = split_clusters(&m, 0.8, d).unwrap();
            let mut side: Vec<Option<Split>> = vec![None; s.num_clusters()];
            for (id, c) in &s.assignments {
                let sp = s.split_of_record(id).unwrap();
                match side[*c] {
                    Some(prev) if prev != sp => return outcome(false, format!("dataset {d}, tau {tau}: cluster {c} spans both splits")),
                    _ => side[*c] = Some(sp),
                }
            }
            let f = s.train_fraction();
            if !(0.8..1.0).contains(&f) {
                return outcome(false, format!("dataset {d}, tau {tau}: train fraction {f:.3}"));
            }
            counts.push(s.num_clusters());
        }
        if counts.windows(2).any(|w| w[0] > w[1]) {
            return outcome(false, format!("dataset {d}: cluster counts {counts:?} for tau 0.4/0.6/0.8"));
        }
    }
    outcome(true, "100 datasets x 3 thresholds")
}

// 4 --------------------------------------------------------------------------

fn classifier_grad_error<C: Classifier + Clone>(model: &C, inputs: &[&C::Input], labels: &[usize], sample: Option<usize>) -> f64 {
    let targets: Vec<Option<usize>> = labels.iter().map(|&y| Some(y)).collect();
    let loss_of = |p: &Params| {
        let mut m = model.clone();
        *m.params_mut() = p.clone();
        let mut tape = Tape::new();
        let b = m.params().bind(&mut tape, |_| true);
        let l = m.logits(&mut tape, &b, inputs, None).unwrap();
        let loss = tape.softmax_cross_entropy(l, &targets);
        tape.value(loss).scalar()
    };
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, |_| true);
    let l = model.logits(&mut tape, &b, inputs, None).unwrap();
    let loss = tape.softmax_cross_entropy(l, &targets);
    let mut grads = tape.backward(loss);
    let analytic = b.collect_grads(&mut grads);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for (i, name) in model.params().names().iter().enumerate() {
        let Some(g) = analytic[i].as_ref() else { continue };
        let n = g.numel();
        let entries: Vec<usize> = match sample {
            Some(s) if n > s => (0..s).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let num = gradcheck::numeric(model.params(), name, &entries, 1e-5, &loss_of);
        let ana: Vec<f64> = entries.iter().map(|&e| g.data[e]).collect();
        worst = worst.max(gradcheck::relative_error(&ana, &num));
    }
    worst
}

/// Masked-LM plus classification loss, so the check covers both heads.
fn transformer_grad_error() -> f64 {
    let mut m = Transformer::new(ModelConfig {
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_hidden: 12,
        context_tokens: 8,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in m.params.tensors_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let a = tokenizer::encode(&random_dna(&mut rng, 40, b"ACGT"), Some(8)).unwrap();
    let b = pad_to(&tokenizer::encode("ACGTTGCAAGGCTT", Some(8)).unwrap(), 8);
    let batch = m.batch(&[&a, &b]).unwrap();
    let rows = [1usize, 3, 9, 12];
    let targets: Vec<Option<usize>> = rows.iter().map(|&r| Some(batch.ids[r] as usize)).collect();
    let labels = [Some(0), Some(1)];
    let objective = |p: &Params| {
        let mut tape = Tape::new();
        let bd = p.bind(&mut tape, |_| true);
        let enc = m.encode(&mut tape, &bd, &batch, None);
        let lm = m.lm_logits(&mut tape, &bd, enc.hidden, &rows);
        let l1 = tape.softmax_cross_entropy(lm, &targets);
        let cl = m.class_logits(&mut tape, &bd, enc.pooled);
        let l2 = tape.softmax_cross_entropy(cl, &labels);
        let loss = tape.add(l1, l2);
        (tape, bd, loss)
    };
    let (tape, bound, loss) = objective(&m.params);
    let mut grads = tape.backward(loss);
    let analytic = bound.collect_grads(&mut grads);
    let loss_of = |p: &Params| {
        let (t, _, l) = objective(p);
        t.value(l).scalar()
    };
    let used: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
    let mut worst = 0.0f64;
    for (pi, name) in m.params.names().iter().enumerate() {
        let t = m.params.get(name).unwrap();
        let entries: Vec<usize> = if name == "embed.weight" {
            used.iter().flat_map(|&r| r * 8..r * 8 + 8).collect()
        } else if name.starts_with("lm_head") {
            let cols: Vec<usize> = targets.iter().map(|x| x.unwrap()).collect();
            let mut e: Vec<usize> = (0..200).map(|_| rng.gen_range(0..t.numel())).collect();
            for c in cols {
                if name.ends_with("bias") {
                    e.push(c);
                } else {
                    e.extend((0..8).map(|r| r * VOCAB_SIZE + c));
                }
            }
            e
        } else {
            (0..t.numel()).collect()
        };
        let num = gradcheck::numeric(&m.params, name, &entries, 1e-5, &loss_of);
        let g = analytic[pi].as_ref().expect("gradient present");
        let ana: Vec<f64> = entries.iter().map(|&e| g.data[e]).collect();
        worst = worst.max(gradcheck::relative_error(&ana, &num));
    }
    worst
}

fn gradient_criterion() -> Outcome {
    let tr = transformer_grad_error();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let seqs: Vec<String> = (0..3).map(|_| random_dna(&mut rng, 16, b"ACGT")).collect();
    let x: Vec<OneHotMatrix> = one_hot_inputs(seqs.iter().map(String::as_str), 16);
    let refs: Vec<&OneHotMatrix> = x.iter().collect();
    let cnn = Cnn::new(CnnConfig { filters: 3, kernel_width: 4, dense_hidden: 4, fixed_length: 16, num_labels: 2, seed: 1 }).unwrap();
    let lstm = Lstm::new(LstmConfig { units: 4, fixed_length: 16, num_labels: 3, seed: 2 }).unwrap();
    let c = classifier_grad_error(&cnn, &refs, &[0, 1, 1], None);
    let l = classifier_grad_error(&lstm, &refs, &[0, 2, 1], None);
    let worst = tr.max(c).max(l);
    outcome(worst < 1e-5, format!("relative error: transformer {tr:.1e}, cnn {c:.1e}, lstm {l:.1e}"))
}

// 5 --------------------------------------------------------------------------

fn rotary_criterion() -> Outcome {
    let (hd, seq) = (16usize, 600usize);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = Tensor::randn(&[hd], 1.0, &mut rng).data;
    let k = Tensor::randn(&[hd], 1.0, &mut rng).data;
    // Row r holds q (even r) or k (odd r); rotary uses position r.
    let mut rows = Vec::with_capacity(seq * hd);
    for r in 0..seq {
        rows.extend_from_slice(if r % 2 == 0 { &q } else { &k });
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![seq, hd], rows));
    let y = tape.rotary(x, seq, hd, 10_000.0);
    let out = tape.value(y).data.clone();
    let row = |r: usize| &out[r * hd..(r + 1) * hd];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let mut worst = 0.0f64;
    for offset in [1usize, 3, 7, 21] {
        let base = dot(row(0), row(offset));
        for shift in (2..seq - offset).step_by(2) {
            worst = worst.max((dot(row(shift), row(shift + offset)) - base).abs());
        }
    }
    outcome(worst < 1e-5, format!("max score change under shift {worst:.1e}"))
}

// 6 --------------------------------------------------------------------------

type Labelled<T> = Vec<(T, usize)>;

fn motif_data() -> (Dataset, Vec<usize>) {
    let spec = SyntheticSpec { motif_stride: 6, ..SyntheticSpec::motif_pair(200, 120, 1) };
    let (ds, _) = generate_motif_dataset(&spec).unwrap();
    let y = labels_of(&ds);
    (ds, y)
}

fn held_out_accuracy<C: Classifier>(m: &C, va: &[(C::Input, usize)]) -> f64 {
    let refs: Vec<&C::Input> = va.iter().map(|(x, _)| x).collect();
    let (pred, _) = predict(m, &refs, 64).unwrap();
    pred.iter().zip(va).filter(|(p, (_, y))| **p == *y).count() as f64 / va.len() as f64
}

fn learning_criterion() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // Initial MLM loss.
    let (ds, y) = motif_data();
    let toks: Vec<TokenSequence> = ds.records.iter().map(|r| tokenizer::encode(&r.sequence, Some(2001)).unwrap()).collect();
    let fresh = Transformer::new(ModelConfig::default()).unwrap();
    let refs: Vec<&TokenSequence> = toks.iter().take(16).collect();
    let mb = MaskedBatch::new(&refs, 0.15, &fresh, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let l0 = MlmTrainer::loss(&fresh, &mb);
    let ln_v = (VOCAB_SIZE as f64).ln();
    let ok = (l0 - ln_v).abs() <= 0.1;
    pass &= ok;
    notes.push(format!("initial MLM loss {l0:.3} vs ln V {ln_v:.3}"));

    // Overfit one fixed batch.
    let (small, _) = generate_motif_dataset(&SyntheticSpec::motif_pair(8, 120, 3)).unwrap();
    let st: Vec<TokenSequence> = small.records.iter().map(|r| tokenizer::encode(&r.sequence, Some(2001)).unwrap()).collect();
    let sr: Vec<&TokenSequence> = st.iter().collect();
    let mut m = Transformer::new(ModelConfig::default()).unwrap();
    let batch = MaskedBatch::new(&sr, 0.15, &m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut trainer = MlmTrainer::new(&m);
    let first = MlmTrainer::loss(&m, &batch);
    for _ in 0..200 {
        trainer.step(&mut m, &batch, 1e-3).unwrap();
    }
    let last = MlmTrainer::loss(&m, &batch);
    let drop = 1.0 - last / first;
    pass &= drop >= 0.5;
    notes.push(format!("one-batch loss {first:.2} -> {last:.2} ({:.0}% drop)", drop * 100.0));

    // Motif fine-tune.
    let start = Instant::now();
    let data: Labelled<TokenSequence> = toks.into_iter().zip(y.iter().copied()).collect();
    let (tr, va) = data.split_at(160);
    let mut tm = Transformer::new(ModelConfig { embed_dim: 16, ffn_hidden: 32, num_heads: 2, seed: 0, ..Default::default() }).unwrap();
    tm.frozen_embeddings = true;
    let plan = TrainingPlan { learning_rate: 1e-3, max_epochs: 100, early_stop_patience: 30, ..Default::default() };
    fit(&mut tm, tr, va, &plan).unwrap();
    let acc = held_out_accuracy(&tm, va);
    let t = start.elapsed();
    pass &= acc >= 0.95 && t < Duration::from_secs(300);
    notes.push(format!("transformer motif accuracy {acc:.3} in {t:.0?}"));

    // Baselines on the same sequences.
    let x = one_hot_inputs(ds.records.iter().map(|r| r.sequence.as_str()), 120);
    let data: Labelled<OneHotMatrix> = x.into_iter().zip(y).collect();
    let (tr, va) = data.split_at(160);
    let plan = TrainingPlan { learning_rate: 1e-3, max_epochs: 30, early_stop_patience: 10, ..Default::default() };
    let (cnn, _) = train_cnn(tr, va, CnnConfig { fixed_length: 120, ..Default::default() }, &plan).unwrap();
    let acc = held_out_accuracy(&cnn, va);
    pass &= acc >= 0.95;
    notes.push(format!("cnn {acc:.3}"));
    let plan = TrainingPlan { learning_rate: 3e-3, max_epochs: 40, early_stop_patience: 10, ..Default::default() };
    let (lstm, _) = train_lstm(tr, va, LstmConfig { units: 50, fixed_length: 120, num_labels: 2, seed: 0 }, &plan).unwrap();
    let acc = held_out_accuracy(&lstm, va);
    let lstm_ok = acc >= 0.90;
    notes.push(format!("lstm {acc:.3}"));

    Outcome {
        pass: pass && lstm_ok,
        known_gap: (pass && !lstm_ok).then_some("LSTM stays below 0.90 on the motif task (see README)"),
        detail: notes.join("; "),
    }
}

// 7 --------------------------------------------------------------------------

fn forest_accuracy(train: &Dataset, test: &Dataset, seed: u64) -> f64 {
    let feats = |d: &Dataset| -> Vec<Vec<f64>> { d.records.iter().map(|r| kmer_frequencies(&r.sequence).values).collect() };
    let k = train.label_set.len();
    let f = train_forest(&feats(train), &labels_of(train), k, &ForestConfig { num_trees: 100, seed, ..Default::default() }).unwrap();
    let (pred, _) = f.predict(&feats(test)).unwrap();
    let truth = labels_of(test);
    pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

fn threshold_trend() -> (bool, String) {
    let mut sums = [0.0; 3];
    let seeds = 0..3u64;
    for seed in seeds.clone() {
        let ds = generate_family_dataset(&FamilySpec { seed, ..Default::default() }).unwrap();
        for (i, tau) in THRESHOLD_SWEEP.iter().enumerate() {
            let m = greedy_cluster(&ds.records, Thresholds::uniform(*tau).unwrap()).unwrap();
            let s = split_clusters(&m, 0.8, seed).unwrap();
            let (tr, te) = s.partition(&ds).unwrap();
            sums[i] += forest_accuracy(&tr, &te, seed);
        }
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / seeds.clone().count() as f64).collect();
    let ok = mean.windows(2).all(|w| w[0] + 0.05 >= w[1]);
    (ok, format!("(a) forest accuracy at 0.8/0.6/0.4: {:.3}/{:.3}/{:.3}", mean[0], mean[1], mean[2]))
}

fn fewshot_trend() -> (bool, String) {
    let spec = SyntheticSpec { motif_stride: 6, ..SyntheticSpec::motif_pair(400, 120, 7) };
    let (ds, _) = generate_motif_dataset(&spec).unwrap();
    let toks: Labelled<TokenSequence> = ds
        .records
        .iter()
        .zip(labels_of(&ds))
        .map(|(r, y)| (tokenizer::encode(&r.sequence, Some(2001)).unwrap(), y))
        .collect();
    let (pool, test) = toks.split_at(200);
    let shots = [1, 2, 25];
    let mut sums = [0.0; 3];
    let reps = 5u64;
    for rep in 0..reps {
        let mut base = Transformer::new(ModelConfig { embed_dim: 16, ffn_hidden: 32, num_heads: 2, seed: rep, ..Default::default() }).unwrap();
        base.frozen_embeddings = true;
        let plan = TrainingPlan { learning_rate: 1e-3, max_epochs: 30, early_stop_patience: 30, seed: rep, ..Default::default() };
        let pts = few_shot_curve(&base, pool, test, &shots, &ds.label_set, &plan).unwrap();
        for (s, p) in sums.iter_mut().zip(&pts) {
            *s += p.metrics.f1;
        }
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / reps as f64).collect();
    let ok = mean[2] + 0.02 >= mean[1] && mean[1] + 0.02 >= mean[0];
    (ok, format!("(b) few-shot F1 at n=1/2/25: {:.3}/{:.3}/{:.3}", mean[0], mean[1], mean[2]))
}

fn length_trend() -> (bool, String) {
    let ds = generate_composition_dataset(&CompositionSpec::default()).unwrap();
    let is_test = |parent: &str| ds.records.iter().position(|r| r.id == parent).unwrap() % 5 == 4;
    let mut accs = Vec::new();
    let lengths = [150usize, 500, 2000, 5000, 10_000];
    for &len in &lengths {
        let frags = fragment(&ds, FragmentLength::Bp(len)).unwrap();
        // At most 20 evenly spaced fragments per genome.
        let mut keep = Vec::new();
        for r in &ds.records {
            let mine: Vec<_> = frags.iter().filter(|f| f.parent_id == r.id).collect();
            let step = (mine.len() / 20).max(1);
            keep.extend(mine.into_iter().step_by(step).take(20).cloned());
        }
        let (te, tr): (Vec<_>, Vec<_>) = keep.into_iter().partition(|f| is_test(&f.parent_id));
        accs.push(forest_accuracy(&fragments_to_dataset(&tr, &ds), &fragments_to_dataset(&te, &ds), 0));
    }
    let ok = accs.windows(2).all(|w| w[1] + 0.05 >= w[0]);
    let shown: Vec<String> = lengths.iter().zip(&accs).map(|(l, a)| format!("{l}:{a:.3}")).collect();
    (ok, format!("(c) forest accuracy by length {}", shown.join(" ")))
}

fn trend_criterion() -> Outcome {
    let start = Instant::now();
    let parts = [threshold_trend(), fewshot_trend(), length_trend()];
    let t = start.elapsed();
    let pass = parts.iter().all(|(ok, _)| *ok) && t < Duration::from_secs(30 * 60);
    let mut text: Vec<String> = parts.into_iter().map(|(_, s)| s).collect();
    text.push(format!("{t:.0?}"));
    outcome(pass, text.join("; "))
}

// 8 --------------------------------------------------------------------------

fn determinism_criterion() -> Outcome {
    let ds = generate_family_dataset(&FamilySpec::default()).unwrap();
    let manifest = || {
        let m = greedy_cluster(&ds.records, Thresholds::uniform(0.8).unwrap()).unwrap();
        split_clusters(&m, 0.8, 42).unwrap().to_tsv()
    };
    if manifest() != manifest() {
        return outcome(false, "split manifests differ");
    }
    let (mds, y) = motif_data();
    let data: Labelled<TokenSequence> = mds
        .records
        .iter()
        .take(40)
        .zip(y)
        .map(|(r, y)| (tokenizer::encode(&r.sequence, Some(64)).unwrap(), y))
        .collect();
    let train = || {
        let mut m = Transformer::new(ModelConfig { embed_dim: 16, ffn_hidden: 32, num_heads: 2, context_tokens: 64, seed: 3, ..Default::default() }).unwrap();
        let plan = TrainingPlan { learning_rate: 1e-3, max_epochs: 2, seed: 3, ..Default::default() };
        fit(&mut m, &data[..32], &data[32..], &plan).unwrap();
        m.to_checkpoint(None).unwrap().to_bytes().unwrap()
    };
    let (a, b) = (train(), train());
    if a != b {
        return outcome(false, "checkpoints from identical runs differ");
    }
    let back = Transformer::from_checkpoint(&Checkpoint::from_bytes(&a).unwrap()).unwrap();
    let again = back.to_checkpoint(None).unwrap().to_bytes().unwrap();
    if again != a {
        return outcome(false, "checkpoint round trip is not bit-exact");
    }
    let probe = [data[0].0.clone(), data[1].0.clone()];
    let original = Transformer::from_checkpoint(&Checkpoint::from_bytes(&b).unwrap()).unwrap();
    let bits = |m: &Transformer| m.forward(&probe).unwrap().logits.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if bits(&back) != bits(&original) {
        return outcome(false, "reloaded model gives different logits");
    }
    outcome(true, format!("manifests and {}-byte checkpoints identical; round trip bit-exact", a.len()))
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(u32, &str, Check); 8] = [
        (1, "tokenizer", tokenizer_criterion),
        (2, "metric oracles", metrics_criterion),
        (3, "split leakage", leakage_criterion),
        (4, "gradient checks", gradient_criterion),
        (5, "rotary shift invariance", rotary_criterion),
        (6, "learning sanity", learning_criterion),
        (7, "trends", trend_criterion),
        (8, "determinism", determinism_criterion),
    ];
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut unexpected = Vec::new();
    for (id, name, check) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {id} {name}: {} [{:.1?}]", o.detail, start.elapsed());
        match (o.pass, o.known_gap) {
            (true, _) => {}
            (false, Some(why)) => println!("     known gap: {why}"),
            (false, None) => unexpected.push(id),
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
