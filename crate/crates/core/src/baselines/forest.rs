//! Random forest of CART trees (Gini impurity, bootstrap rows, random
//! feature subsets per split).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::train::argmax;

pub const FOREST_FORMAT: &str = "genolm.forest.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub num_trees: usize,
    /// `None` grows until leaves are pure.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// `None` uses `floor(sqrt(dim))`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            num_trees: 100,
            max_depth: None,
            min_leaf: 1,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    fn mtry(&self, dim: usize) -> usize {
        self.features_per_split.unwrap_or(((dim as f64).sqrt().floor() as usize).max(1))
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_trees == 0 || self.min_leaf == 0 || self.max_depth == Some(0) {
            return Err(Error::invalid("num_trees, min_leaf and max_depth must be positive"));
        }
        let m = self.mtry(dim);
        if m == 0 || m > dim {
            return Err(Error::invalid(format!("features_per_split {m} must be in 1..={dim}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Leaf { class: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { class } => return *class,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn rec(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + rec(t, *left).max(rec(t, *right)),
            }
        }
        rec(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub format: String,
    pub config: ForestConfig,
    pub num_features: usize,
    pub num_classes: usize,
    /// Class names in index order; empty when trained from raw indices.
    #[serde(default)]
    pub labels: Vec<String>,
    pub trees: Vec<Tree>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    k: usize,
    mtry: usize,
    config: &'a ForestConfig,
    nodes: Vec<TreeNode>,
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn gini_sum(counts: &[usize], n: usize) -> f64 {
    // n * gini = n - sum(c^2)/n
    if n == 0 {
        return 0.0;
    }
    let s: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
    n as f64 - s / n as f64
}

impl Builder<'_> {
    /// Best `(impurity, threshold)` on one feature, if any valid split exists.
    fn best_on_feature(&self, idx: &[usize], feature: usize, buf: &mut Vec<(f64, usize)>) -> Option<(f64, f64)> {
        buf.clear();
        buf.extend(idx.iter().map(|&i| (self.x[i][feature], self.y[i])));
        buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        if buf[0].0 == buf[buf.len() - 1].0 {
            return None;
        }
        let n = buf.len();
        let mut left = vec![0usize; self.k];
        let mut right = vec![0usize; self.k];
        buf.iter().for_each(|&(_, c)| right[c] += 1);
        let mut best: Option<(f64, f64)> = None;
        for i in 0..n - 1 {
            let c = buf[i].1;
            left[c] += 1;
            right[c] -= 1;
            let nl = i + 1;
            if buf[i].0 == buf[i + 1].0 || nl < self.config.min_leaf || n - nl < self.config.min_leaf {
                continue;
            }
            let imp = gini_sum(&left, nl) + gini_sum(&right, n - nl);
            if best.is_none_or(|(b, _)| imp < b) {
                best = Some((imp, 0.5 * (buf[i].0 + buf[i + 1].0)));
            }
        }
        best
    }

    fn build(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut counts = vec![0usize; self.k];
        idx.iter().for_each(|&i| counts[self.y[i]] += 1);
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { class: majority(&counts) });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || self.config.max_depth.is_some_and(|d| depth >= d) || idx.len() < 2 * self.config.min_leaf {
            return id;
        }
        let dim = self.x[0].len();
        let mut features: Vec<usize> = (0..dim).collect();
        let mut buf = Vec::with_capacity(idx.len());
        let mut best: Option<(f64, usize, f64)> = None;
        // Partial Fisher-Yates; keep drawing past `mtry` only while no
        // feature has produced a valid split.
        for j in 0..dim {
            if j >= self.mtry && best.is_some() {
                break;
            }
            let r = rng.gen_range(j..dim);
            features.swap(j, r);
            let f = features[j];
            if let Some((imp, thr)) = self.best_on_feature(idx, f, &mut buf) {
                if best.is_none_or(|(b, _, _)| imp < b) {
                    best = Some((imp, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else { return id };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.build(&l, depth + 1, rng);
        let right = self.build(&r, depth + 1, rng);
        self.nodes[id] = TreeNode::Split { feature, threshold, left, right };
        id
    }
}

fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

pub fn train_forest(features: &[Vec<f64>], labels: &[usize], num_classes: usize, config: &ForestConfig) -> Result<Forest> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::invalid("features and labels must be non-empty and aligned"));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("inconsistent feature dimension".into()));
    }
    if labels.iter().any(|&y| y >= num_classes) {
        return Err(Error::invalid("label out of range"));
    }
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::invalid("training set contains a single class"));
    }
    config.validate(dim)?;
    let mtry = config.mtry(dim);
    let n = features.len();
    let trees = (0..config.num_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(config.seed, t);
            let mut idx: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            idx.sort_unstable();
            let mut b = Builder {
                x: features,
                y: labels,
                k: num_classes,
                mtry,
                config,
                nodes: Vec::new(),
            };
            b.build(&idx, 0, &mut rng);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(Forest {
        format: FOREST_FORMAT.into(),
        labels: Vec::new(),
        config: config.clone(),
        num_features: dim,
        num_classes,
        trees,
    })
}

impl Forest {
    /// Fraction of trees voting for each class.
    pub fn vote_fractions(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.num_features {
            return Err(Error::Shape(format!("expected {} features, got {}", self.num_features, x.len())));
        }
        let mut votes = vec![0usize; self.num_classes];
        self.trees.iter().for_each(|t| votes[t.predict(x)] += 1);
        let n = self.trees.len() as f64;
        Ok(votes.into_iter().map(|v| v as f64 / n).collect())
    }

    /// Majority vote (ties to the lowest class) and vote fractions.
    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let probs: Vec<Vec<f64>> = inputs.par_iter().map(|x| self.vote_fractions(x)).collect::<Result<_>>()?;
        Ok((probs.iter().map(|p| argmax(p)).collect(), probs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let f: Forest = serde_json::from_str(&text)?;
        if f.format != FOREST_FORMAT {
            return Err(Error::Format(format!("unsupported forest format `{}`", f.format)));
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stump_separates_threshold_data() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 13)).collect();
        let cfg = ForestConfig {
            num_trees: 1,
            max_depth: Some(1),
            bootstrap: false,
            ..Default::default()
        };
        let f = train_forest(&x, &y, 2, &cfg).unwrap();
        assert_eq!(f.trees[0].depth(), 1);
        assert_eq!(f.predict(&x).unwrap().0, y);
    }

    #[test]
    fn unlimited_depth_memorizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec<f64>> = (0..120).map(|_| (0..6).map(|_| rng.gen_range(0..5) as f64).collect()).collect();
        // Arbitrary labels, made consistent by keying on the full vector.
        let y: Vec<usize> = x.iter().map(|v| (v.iter().sum::<f64>() as usize * 7 + v[0] as usize) % 3).collect();
        for bootstrap in [false, true] {
            let cfg = ForestConfig {
                num_trees: 60,
                bootstrap,
                seed: 2,
                ..Default::default()
            };
            let f = train_forest(&x, &y, 3, &cfg).unwrap();
            let (pred, _) = f.predict(&x).unwrap();
            assert_eq!(pred, y, "bootstrap={bootstrap}");
        }
    }

    #[test]
    fn tie_vote_goes_to_lowest_class() {
        let leaf = |c| Tree {
            nodes: vec![TreeNode::Leaf { class: c }],
        };
        let f = Forest {
            format: FOREST_FORMAT.into(),
            labels: Vec::new(),
            config: ForestConfig::default(),
            num_features: 1,
            num_classes: 2,
            trees: vec![leaf(1), leaf(0), leaf(1), leaf(0)],
        };
        let (p, probs) = f.predict(&[vec![0.0]]).unwrap();
        assert_eq!(p, vec![0]);
        assert_eq!(probs[0], vec![0.5, 0.5]);
        let f10 = Forest {
            trees: (0..10).map(|i| leaf(usize::from(i >= 7))).collect(),
            ..f.clone()
        };
        assert_eq!(f10.vote_fractions(&[1.0]).unwrap(), vec![0.7, 0.3]);
        assert!(f.predict(&[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(train_forest(&[vec![1.0], vec![2.0]], &[1, 1], 2, &ForestConfig::default()).is_err());
    }

    #[test]
    fn adding_trees_keeps_prefix_and_confident_votes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<Vec<f64>> = (0..80).map(|_| (0..10).map(|_| rng.gen::<f64>()).collect()).collect();
        let y: Vec<usize> = x.iter().map(|v| usize::from(v[0] + v[1] > 1.0)).collect();
        let small = train_forest(&x, &y, 2, &ForestConfig { num_trees: 20, seed: 5, ..Default::default() }).unwrap();
        let big = train_forest(&x, &y, 2, &ForestConfig { num_trees: 25, seed: 5, ..Default::default() }).unwrap();
        assert_eq!(&big.trees[..20], &small.trees[..]);
        let probe: Vec<Vec<f64>> = (0..200).map(|_| (0..10).map(|_| rng.gen::<f64>()).collect()).collect();
        let (ps, fs) = small.predict(&probe).unwrap();
        let (pb, _) = big.predict(&probe).unwrap();
        for i in 0..probe.len() {
            let margin = ((fs[i][0] - fs[i][1]) * 20.0).abs();
            if margin > 5.0 {
                assert_eq!(ps[i], pb[i]);
            }
        }
    }

    #[test]
    fn json_round_trip_and_determinism() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64, (i % 3) as f64]).collect();
        let y: Vec<usize> = (0..30).map(|i| usize::from(i % 7 > 3)).collect();
        let cfg = ForestConfig { num_trees: 7, seed: 3, ..Default::default() };
        let a = train_forest(&x, &y, 2, &cfg).unwrap();
        let b = train_forest(&x, &y, 2, &cfg).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        a.save(&p).unwrap();
        assert_eq!(Forest::load(&p).unwrap(), a);
    }
}
