//! Embedding extraction and the label-free / low-label evaluation protocols.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{fit, predict, Classifier, TrainingPlan};
use super::Transformer;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, f1, ConfusionMatrix, MetricValues};
use crate::tokenizer::TokenSequence;

pub const DEFAULT_SHOTS: [usize; 5] = [1, 2, 5, 10, 25];
pub const KMEANS_MAX_ITER: usize = 100;

/// Pooled embeddings, one row of length `d` per sequence.
pub fn embed(model: &Transformer, seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let batch = model.batch(&refs)?;
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape, |_| false);
        let enc = model.encode(&mut tape, &b, &batch, None);
        let pooled = tape.value(enc.pooled);
        out.extend((0..chunk.len()).map(|i| pooled.row(i).to_vec()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Fewer than `k` distinct seeds could be chosen or some cluster ended
    /// empty.
    pub degenerate: bool,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(x, c);
        if d < bd {
            bd = d;
            best = i;
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding.
pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    if k == 0 || data.len() < k {
        return Err(Error::invalid(format!("k-means needs at least {k} points, got {}", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut degenerate = false;
    let mut centroids = vec![data[rng.gen_range(0..data.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = data.iter().map(|x| centroids.iter().map(|c| dist2(x, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            degenerate = true;
            centroids.push(centroids[0].clone());
            continue;
        }
        let mut r = rng.gen::<f64>() * total;
        let mut pick = d.len() - 1;
        for (i, &di) in d.iter().enumerate() {
            if di > 0.0 && r < di {
                pick = i;
                break;
            }
            r -= di;
        }
        centroids.push(data[pick].clone());
    }

    let dim = data[0].len();
    let mut assignments = vec![usize::MAX; data.len()];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let next: Vec<usize> = data.iter().map(|x| nearest(x, &centroids)).collect();
        let changed = next != assignments;
        assignments = next;
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in data.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let mut used = vec![false; k];
    assignments.iter().for_each(|&a| used[a] = true);
    degenerate |= used.iter().any(|u| !u);
    Ok(KMeansResult {
        assignments,
        centroids,
        iterations,
        degenerate,
    })
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Cluster-to-label permutation maximizing F1; the first permutation in
/// lexicographic order wins ties.
pub fn best_label_mapping(clusters: &[usize], truth: &[usize], k: usize) -> Result<(Vec<usize>, f64)> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in permutations(k) {
        let pred: Vec<usize> = clusters.iter().map(|&c| perm[c]).collect();
        let score = f1(&ConfusionMatrix::from_predictions(truth, &pred, k)?)?;
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((perm, score));
        }
    }
    best.ok_or_else(|| Error::invalid("no classes to map"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub clusters: Vec<usize>,
    /// `mapping[cluster] = label index`.
    pub mapping: Vec<usize>,
    pub predictions: Vec<usize>,
    pub f1: f64,
    pub degenerate: bool,
}

fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// k-means on normalized embeddings; labels are used only to choose the
/// scoring permutation.
pub fn zero_shot_classify(embeddings: &[Vec<f64>], num_classes: usize, truth: &[usize], seed: u64) -> Result<ZeroShotResult> {
    if embeddings.len() < num_classes {
        return Err(Error::invalid(format!("zero-shot needs at least {num_classes} sequences, got {}", embeddings.len())));
    }
    if truth.len() != embeddings.len() {
        return Err(Error::Shape("labels and embeddings differ in length".into()));
    }
    let normed: Vec<Vec<f64>> = embeddings.iter().map(|e| l2_normalize(e)).collect();
    let km = kmeans(&normed, num_classes, seed, KMEANS_MAX_ITER)?;
    let (mapping, score) = best_label_mapping(&km.assignments, truth, num_classes)?;
    let predictions = km.assignments.iter().map(|&c| mapping[c]).collect();
    Ok(ZeroShotResult {
        clusters: km.assignments,
        mapping,
        predictions,
        f1: score,
        degenerate: km.degenerate,
    })
}

/// Nested stratified sample: each class's indices are shuffled once with
/// `seed` and the first `n` are taken, so larger `n` extends smaller ones.
/// Returned indices are in ascending order.
pub fn stratified_sample(labels: &[usize], label_names: &[String], n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (class, name) in label_names.iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < n {
            return Err(Error::InsufficientPool {
                class: name.clone(),
                needed: n,
                available: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        out.extend_from_slice(&idx[..n]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub shots: usize,
    pub metrics: MetricValues,
    pub confusion: ConfusionMatrix,
}

/// Fine-tunes a fresh copy of `base` on `n` examples per class for every `n`
/// in `shots` and scores it on `test`. The sampled examples double as the
/// early-stopping set.
pub fn few_shot_curve<C>(
    base: &C,
    pool: &[(C::Input, usize)],
    test: &[(C::Input, usize)],
    shots: &[usize],
    label_names: &[String],
    plan: &TrainingPlan,
) -> Result<Vec<FewShotPoint>>
where
    C: Classifier,
    C::Input: Clone,
{
    if shots.is_empty() || shots.windows(2).any(|w| w[0] >= w[1]) || shots[0] == 0 {
        return Err(Error::invalid("shots must be positive and strictly ascending"));
    }
    if test.is_empty() {
        return Err(Error::invalid("few-shot test set is empty"));
    }
    let labels: Vec<usize> = pool.iter().map(|(_, y)| *y).collect();
    // Validate the largest request up front so no work is wasted.
    stratified_sample(&labels, label_names, *shots.last().unwrap(), plan.seed)?;
    let k = base.num_labels();
    let inputs: Vec<&C::Input> = test.iter().map(|(x, _)| x).collect();
    let truth: Vec<usize> = test.iter().map(|(_, y)| *y).collect();
    let mut rows = Vec::with_capacity(shots.len());
    for &n in shots {
        let idx = stratified_sample(&labels, label_names, n, plan.seed)?;
        let sample: Vec<(C::Input, usize)> = idx.iter().map(|&i| pool[i].clone()).collect();
        let mut model = base.clone();
        fit(&mut model, &sample, &sample, plan)?;
        let (pred, probs) = predict(&model, &inputs, 64)?;
        let (metrics, confusion) = compute_metrics(&truth, &pred, &probs, k)?;
        log::info!("few-shot n={n}: f1 {:.4} accuracy {:.4}", metrics.f1, metrics.accuracy);
        rows.push(FewShotPoint {
            shots: n,
            metrics,
            confusion,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn separated_blobs_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut emb = Vec::new();
        let mut truth = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let center = if c == 0 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            emb.push(center.iter().map(|x| x + noise.sample(&mut rng)).collect());
            truth.push(c);
        }
        let r = zero_shot_classify(&emb, 2, &truth, 0).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.predictions, truth);
        assert!(!r.degenerate);
    }

    #[test]
    fn identical_embeddings_are_degenerate() {
        let emb = vec![vec![0.3, 0.4]; 10];
        let truth = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        let r = zero_shot_classify(&emb, 2, &truth, 5).unwrap();
        assert!(r.degenerate);
        // Every point shares one cluster, so the score is the best constant
        // predictor's.
        let best_constant = (0..2)
            .map(|c| f1(&ConfusionMatrix::from_predictions(&truth, &[c; 10], 2).unwrap()).unwrap())
            .fold(0.0, f64::max);
        assert_eq!(r.f1, best_constant);

        let truth7: Vec<usize> = (0..14).map(|i| if i < 8 { 3 } else { i % 7 }).collect();
        let r = zero_shot_classify(&vec![vec![1.0; 4]; 14], 7, &truth7, 5).unwrap();
        assert!(r.degenerate);
        assert!(r.predictions.iter().all(|&p| p == 3), "majority class is 3");
    }

    #[test]
    fn mapping_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 2..=4 {
            for _ in 0..20 {
                let clusters: Vec<usize> = (0..30).map(|_| rng.gen_range(0..k)).collect();
                let truth: Vec<usize> = (0..30).map(|_| rng.gen_range(0..k)).collect();
                let (map, score) = best_label_mapping(&clusters, &truth, k).unwrap();
                let mut brute = f64::NEG_INFINITY;
                for p in permutations(k) {
                    let pred: Vec<usize> = clusters.iter().map(|&c| p[c]).collect();
                    brute = brute.max(f1(&ConfusionMatrix::from_predictions(&truth, &pred, k).unwrap()).unwrap());
                }
                assert_eq!(score, brute);
                let pred: Vec<usize> = clusters.iter().map(|&c| map[c]).collect();
                assert_eq!(f1(&ConfusionMatrix::from_predictions(&truth, &pred, k).unwrap()).unwrap(), score);
            }
        }
        assert_eq!(permutations(7).len(), 5040);
    }

    #[test]
    fn zero_shot_needs_enough_points() {
        assert!(zero_shot_classify(&[vec![1.0]], 2, &[0], 0).is_err());
    }

    #[test]
    fn stratified_samples_are_nested() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut prev: Vec<usize> = Vec::new();
        for n in DEFAULT_SHOTS.iter().copied().take(4) {
            let s = stratified_sample(&labels, &names, n, 7).unwrap();
            assert_eq!(s.len(), 3 * n);
            assert!(prev.iter().all(|i| s.contains(i)));
            for c in 0..3 {
                assert_eq!(s.iter().filter(|&&i| labels[i] == c).count(), n);
            }
            prev = s;
        }
        match stratified_sample(&labels, &names, 25, 7) {
            Err(Error::InsufficientPool { class, needed, available }) => {
                assert_eq!((class.as_str(), needed, available), ("a", 25, 20));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect();
        assert_eq!(kmeans(&data, 3, 11, 100).unwrap(), kmeans(&data, 3, 11, 100).unwrap());
    }
}
