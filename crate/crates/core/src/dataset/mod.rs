//! Leakage-free dataset construction: greedy similarity clustering,
//! cluster-level train/test splitting and fixed-length fragmentation.

pub mod similarity;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqio::{Dataset, SequenceRecord};

pub use similarity::{estimate_similarity, KmerProfile, SimilarityEstimate, DEFAULT_K};

/// Identity/coverage thresholds of the three standard partitions.
pub const THRESHOLD_SWEEP: [f64; 3] = [0.8, 0.6, 0.4];
pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;
/// Fragment lengths of the sequence-length study.
pub const FRAGMENT_LENGTHS: [usize; 6] = [150, 500, 2_000, 5_000, 10_000, 50_000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub identity: f64,
    pub coverage: f64,
    pub k: usize,
}

impl Thresholds {
    pub fn new(identity: f64, coverage: f64, k: usize) -> Result<Self> {
        for (name, v) in [("identity", identity), ("coverage", coverage)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} threshold {v} outside (0, 1]")));
            }
        }
        if !(similarity::MIN_K..=similarity::MAX_K).contains(&k) {
            return Err(Error::invalid(format!("k = {k} outside 4..=32")));
        }
        Ok(Thresholds {
            identity,
            coverage,
            k,
        })
    }

    /// Same value for identity and coverage, as in the standard sweep.
    pub fn uniform(tau: f64) -> Result<Self> {
        Self::new(tau, tau, DEFAULT_K)
    }
}

/// Cluster membership and train/test assignment for every record.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionManifest {
    /// `(record_id, cluster_id)` in dataset order.
    pub assignments: Vec<(String, usize)>,
    /// Founding member of each cluster, indexed by cluster id.
    pub representatives: Vec<String>,
    /// Split per cluster; empty until [`split_clusters`] runs.
    pub split_of: Vec<Split>,
    pub thresholds: Thresholds,
    pub split_ratio: f64,
    pub seed: u64,
}

impl PartitionManifest {
    pub fn num_clusters(&self) -> usize {
        self.representatives.len()
    }

    pub fn cluster_of(&self) -> BTreeMap<&str, usize> {
        self.assignments.iter().map(|(r, c)| (r.as_str(), *c)).collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters()];
        for (_, c) in &self.assignments {
            sizes[*c] += 1;
        }
        sizes
    }

    pub fn is_split(&self) -> bool {
        !self.split_of.is_empty()
    }

    pub fn split_of_record(&self, record_id: &str) -> Option<Split> {
        let c = self.assignments.iter().find(|(r, _)| r == record_id)?.1;
        self.split_of.get(c).copied()
    }

    /// Record ids in the given split, in dataset order.
    pub fn members(&self, split: Split) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, c)| self.split_of.get(*c) == Some(&split))
            .map(|(r, _)| r.as_str())
            .collect()
    }

    pub fn train_fraction(&self) -> f64 {
        self.members(Split::Train).len() as f64 / self.assignments.len() as f64
    }

    /// Splits a dataset into `(train, test)` following this manifest.
    pub fn partition(&self, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
        if !self.is_split() {
            return Err(Error::invalid("manifest has no train/test assignment"));
        }
        let cluster_of = self.cluster_of();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for r in &dataset.records {
            let c = *cluster_of
                .get(r.id.as_str())
                .ok_or_else(|| Error::invalid(format!("record `{}` missing from manifest", r.id)))?;
            match self.split_of[c] {
                Split::Train => train.push(r.clone()),
                Split::Test => test.push(r.clone()),
            }
        }
        let mk = |records| Dataset {
            records,
            label_set: dataset.label_set.clone(),
            task: dataset.task,
        };
        Ok((mk(train), mk(test)))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# identity_threshold={}\n", self.thresholds.identity));
        out.push_str(&format!("# coverage_threshold={}\n", self.thresholds.coverage));
        out.push_str(&format!("# k={}\n", self.thresholds.k));
        out.push_str(&format!("# seed={}\n", self.seed));
        out.push_str(&format!("# ratio={}\n", self.split_ratio));
        out.push_str("record_id\tcluster_id\tsplit\n");
        for (rec, c) in &self.assignments {
            let split = self
                .split_of
                .get(*c)
                .map(|s| s.to_string())
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!("{rec}\t{c}\t{split}\n"));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta: BTreeMap<String, String> = BTreeMap::new();
        let mut assignments = Vec::new();
        let mut splits: BTreeMap<usize, Option<Split>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            if line.is_empty() || line.starts_with("record_id\t") {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Format(format!("manifest line {}: expected 3 columns", i + 1)));
            }
            let c: usize = cols[1]
                .parse()
                .map_err(|_| Error::Format(format!("manifest line {}: bad cluster id", i + 1)))?;
            let s = if cols[2] == "-" { None } else { Some(cols[2].parse()?) };
            if let Some(prev) = splits.insert(c, s) {
                if prev != s {
                    return Err(Error::Format(format!("cluster {c} assigned to both splits")));
                }
            }
            assignments.push((cols[0].to_string(), c));
        }
        let num = splits.keys().next_back().map_or(0, |m| m + 1);
        if splits.len() != num {
            return Err(Error::Format("cluster ids are not contiguous".into()));
        }
        // The founding member is the first listed member of the longest-first
        // order, which is not recoverable here; use the first member seen.
        let mut representatives = vec![String::new(); num];
        for (r, c) in &assignments {
            if representatives[*c].is_empty() {
                representatives[*c] = r.clone();
            }
        }
        let split_of: Vec<Split> = if splits.values().all(Option::is_some) {
            splits.values().map(|s| s.unwrap()).collect()
        } else {
            Vec::new()
        };
        let get = |k: &str| -> Result<&String> {
            meta.get(k)
                .ok_or_else(|| Error::Format(format!("manifest missing `# {k}=` header")))
        };
        let num_err = |k: &str| Error::Format(format!("manifest header `{k}` is not a number"));
        Ok(PartitionManifest {
            assignments,
            representatives,
            split_of,
            thresholds: Thresholds {
                identity: get("identity_threshold")?.parse().map_err(|_| num_err("identity_threshold"))?,
                coverage: get("coverage_threshold")?.parse().map_err(|_| num_err("coverage_threshold"))?,
                k: get("k")?.parse().map_err(|_| num_err("k"))?,
            },
            split_ratio: get("ratio")?.parse().map_err(|_| num_err("ratio"))?,
            seed: get("seed")?.parse().map_err(|_| num_err("seed"))?,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }
}

/// Greedy longest-first centroid clustering. Each record joins the first
/// existing cluster whose representative meets both thresholds, otherwise it
/// founds a new one.
pub fn greedy_cluster(records: &[SequenceRecord], thresholds: Thresholds) -> Result<PartitionManifest> {
    if records.is_empty() {
        return Err(Error::invalid("cannot cluster an empty dataset"));
    }
    let profiles: Vec<KmerProfile> = records
        .par_iter()
        .map(|r| KmerProfile::new(&r.sequence, thresholds.k))
        .collect();

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .length_bp()
            .cmp(&records[a].length_bp())
            .then_with(|| records[a].id.cmp(&records[b].id))
    });

    let mut reps: Vec<usize> = Vec::new();
    let mut cluster_of = vec![usize::MAX; records.len()];
    for &i in &order {
        let hit = reps.par_iter().position_first(|&rep| {
            similarity::profile_similarity(&profiles[rep], &profiles[i], &records[rep].sequence, &records[i].sequence)
                .passes(thresholds.identity, thresholds.coverage)
        });
        cluster_of[i] = match hit {
            Some(c) => c,
            None => {
                reps.push(i);
                reps.len() - 1
            }
        };
    }

    Ok(PartitionManifest {
        assignments: records
            .iter()
            .zip(&cluster_of)
            .map(|(r, &c)| (r.id.clone(), c))
            .collect(),
        representatives: reps.iter().map(|&i| records[i].id.clone()).collect(),
        split_of: Vec::new(),
        thresholds,
        split_ratio: DEFAULT_SPLIT_RATIO,
        seed: 0,
    })
}

/// Assigns whole clusters to train/test. Clusters are shuffled with `seed` and
/// moved into train until it holds at least `ratio` of all records; the rest
/// form the test set.
pub fn split_clusters(manifest: &PartitionManifest, ratio: f64, seed: u64) -> Result<PartitionManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n = manifest.num_clusters();
    if n < 2 {
        return Err(Error::SingleCluster);
    }
    let sizes = manifest.cluster_sizes();
    let total: usize = sizes.iter().sum();
    let target = ratio * total as f64;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut split_of = vec![Split::Test; n];
    let mut train = 0usize;
    for &c in &order {
        if (train as f64) >= target {
            break;
        }
        split_of[c] = Split::Train;
        train += sizes[c];
    }

    if split_of.iter().all(|s| *s == Split::Train) {
        // Give test one cluster: the smallest whose removal keeps train at
        // target, or failing that the smallest overall.
        let by_size = |cands: &mut Vec<usize>| {
            cands.sort_by_key(|&c| sizes[c]);
        };
        let mut keep_target: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&c| (train - sizes[c]) as f64 >= target)
            .collect();
        by_size(&mut keep_target);
        let victim = match keep_target.first() {
            Some(&c) => c,
            None => {
                let mut all = order.clone();
                by_size(&mut all);
                log::warn!("no cluster assignment reaches the {ratio} train ratio with a non-empty test set");
                all[0]
            }
        };
        split_of[victim] = Split::Test;
    }

    Ok(PartitionManifest {
        split_of,
        split_ratio: ratio,
        seed,
        ..manifest.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FragmentLength {
    Bp(usize),
    WholeGenome,
}

impl fmt::Display for FragmentLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FragmentLength::Bp(n) => write!(f, "{n}"),
            FragmentLength::WholeGenome => f.write_str("whole"),
        }
    }
}

impl FromStr for FragmentLength {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "whole" || s == "whole-genome" {
            return Ok(FragmentLength::WholeGenome);
        }
        let (num, mult) = match s.strip_suffix('k') {
            Some(n) => (n, 1000),
            None => (s.as_str(), 1),
        };
        let v: i64 = num
            .parse()
            .map_err(|_| Error::invalid(format!("bad fragment length `{s}`")))?;
        if v <= 0 {
            return Err(Error::invalid(format!("fragment length must be positive, got {v}")));
        }
        Ok(FragmentLength::Bp(v as usize * mult))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub parent_id: String,
    pub offset_bp: usize,
    pub sequence: String,
    pub target_length_bp: usize,
    pub label: Option<String>,
}

impl Fragment {
    pub fn id(&self) -> String {
        format!("{}:{}", self.parent_id, self.offset_bp)
    }

    pub fn to_record(&self) -> SequenceRecord {
        SequenceRecord {
            label: self.label.clone(),
            ..SequenceRecord::new(self.id(), self.sequence.clone())
        }
    }
}

/// Cuts every record into non-overlapping windows tiled from offset 0; the
/// trailing partial window is discarded.
pub fn fragment(dataset: &Dataset, length: FragmentLength) -> Result<Vec<Fragment>> {
    let len = match length {
        FragmentLength::WholeGenome => {
            return Ok(dataset
                .records
                .iter()
                .map(|r| Fragment {
                    parent_id: r.id.clone(),
                    offset_bp: 0,
                    sequence: r.sequence.clone(),
                    target_length_bp: r.length_bp(),
                    label: r.label.clone(),
                })
                .collect())
        }
        FragmentLength::Bp(0) => return Err(Error::invalid("fragment length must be positive")),
        FragmentLength::Bp(n) => n,
    };
    let per_record: Vec<Vec<Fragment>> = dataset
        .records
        .par_iter()
        .map(|r| {
            (0..r.length_bp() / len)
                .map(|i| Fragment {
                    parent_id: r.id.clone(),
                    offset_bp: i * len,
                    sequence: r.sequence[i * len..(i + 1) * len].to_string(),
                    target_length_bp: len,
                    label: r.label.clone(),
                })
                .collect()
        })
        .collect();
    Ok(per_record.into_iter().flatten().collect())
}

pub fn fragments_to_dataset(fragments: &[Fragment], template: &Dataset) -> Dataset {
    Dataset {
        records: fragments.iter().map(Fragment::to_record).collect(),
        label_set: template.label_set.clone(),
        task: template.task,
    }
}

/// Keeps one representative per similarity cluster, in input order.
pub fn dedup_fragments(fragments: &[Fragment], thresholds: Thresholds) -> Result<Vec<Fragment>> {
    if fragments.is_empty() {
        return Ok(Vec::new());
    }
    let records: Vec<SequenceRecord> = fragments.iter().map(Fragment::to_record).collect();
    let manifest = greedy_cluster(&records, thresholds)?;
    let reps: std::collections::HashSet<&str> =
        manifest.representatives.iter().map(String::as_str).collect();
    Ok(fragments
        .iter()
        .zip(&records)
        .filter(|(_, r)| reps.contains(r.id.as_str()))
        .map(|(f, _)| f.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_seq(rng: &mut impl Rng, n: usize) -> String {
        (0..n).map(|_| b"ACGT"[rng.gen_range(0..4)] as char).collect()
    }

    fn rec(id: &str, s: &str) -> SequenceRecord {
        SequenceRecord::new(id, s)
    }

    fn singleton_manifest(sizes: &[usize]) -> PartitionManifest {
        let mut assignments = Vec::new();
        let mut reps = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for j in 0..n {
                assignments.push((format!("c{c}r{j}"), c));
            }
            reps.push(format!("c{c}r0"));
        }
        PartitionManifest {
            assignments,
            representatives: reps,
            split_of: Vec::new(),
            thresholds: Thresholds::uniform(0.8).unwrap(),
            split_ratio: 0.8,
            seed: 0,
        }
    }

    #[test]
    fn identical_records_share_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_seq(&mut rng, 500);
        let m = greedy_cluster(&[rec("a", &s), rec("b", &s)], Thresholds::uniform(0.8).unwrap()).unwrap();
        assert_eq!(m.num_clusters(), 1);
    }

    #[test]
    fn unrelated_records_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_seq(&mut rng, 1000);
        let b = random_seq(&mut rng, 1000);
        let e = estimate_similarity(&a, &b, 8);
        assert!(e.identity < 0.4);
        let m = greedy_cluster(&[rec("a", &a), rec("b", &b)], Thresholds::uniform(0.4).unwrap()).unwrap();
        assert_eq!(m.num_clusters(), 2);
    }

    #[test]
    fn substring_containment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let genome = random_seq(&mut rng, 5000);
        let sub = genome[1000..1500].to_string();
        let e = estimate_similarity(&genome, &sub, 8);
        // Coverage of the shorter is complete; Jaccard is diluted by the
        // parent's extra k-mers (493 / ~4993).
        assert_eq!(e.coverage, 1.0);
        assert!(e.identity < 0.8);
        let m = greedy_cluster(&[rec("g", &genome), rec("s", &sub)], Thresholds::uniform(0.8).unwrap()).unwrap();
        assert_eq!(m.num_clusters(), 2);
        let loose = Thresholds::new(0.05, 0.8, 8).unwrap();
        let m = greedy_cluster(&[rec("g", &genome), rec("s", &sub)], loose).unwrap();
        assert_eq!(m.num_clusters(), 1);
        assert_eq!(m.representatives, vec!["g"]);
    }

    #[test]
    fn ten_singletons_split_eight_two() {
        let m = singleton_manifest(&[1; 10]);
        for seed in 0..20 {
            let s = split_clusters(&m, 0.8, seed).unwrap();
            assert_eq!(s.members(Split::Train).len(), 8);
            assert_eq!(s.members(Split::Test).len(), 2);
        }
    }

    #[test]
    fn eight_two_clusters_any_order() {
        let m = singleton_manifest(&[8, 2]);
        for seed in 0..20 {
            let s = split_clusters(&m, 0.8, seed).unwrap();
            assert_eq!(s.split_of, vec![Split::Train, Split::Test]);
            let f = s.train_fraction();
            assert!((0.8..1.0).contains(&f));
        }
    }

    #[test]
    fn single_cluster_errors() {
        let m = singleton_manifest(&[5]);
        assert!(matches!(split_clusters(&m, 0.8, 0), Err(Error::SingleCluster)));
    }

    #[test]
    fn manifest_tsv_round_trip() {
        let m = split_clusters(&singleton_manifest(&[3, 1, 2, 4]), 0.8, 9).unwrap();
        let back = PartitionManifest::parse(&m.to_tsv()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn fragment_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let big = random_seq(&mut rng, 1_000_150);
        let ds = Dataset::from_records(vec![rec("g", &big).with_label("x"), rec("s", &"A".repeat(100))]).unwrap();
        let frags = fragment(&ds, FragmentLength::Bp(2000)).unwrap();
        assert_eq!(frags.len(), 500);
        assert!(frags.iter().all(|f| f.label.as_deref() == Some("x")));
        let tiled: String = frags.iter().map(|f| f.sequence.as_str()).collect();
        assert!(big.starts_with(&tiled));
        let small = Dataset::from_records(vec![rec("s", &"A".repeat(100))]).unwrap();
        assert!(fragment(&small, FragmentLength::Bp(150)).unwrap().is_empty());
        assert_eq!(FRAGMENT_LENGTHS, [150, 500, 2000, 5000, 10000, 50000]);
        assert!("0".parse::<FragmentLength>().is_err());
        assert_eq!("2k".parse::<FragmentLength>().unwrap(), FragmentLength::Bp(2000));
        let whole = fragment(&small, FragmentLength::WholeGenome).unwrap();
        assert_eq!(whole[0].sequence.len(), 100);
    }

    #[test]
    fn dedup_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_seq(&mut rng, 300);
        let mk = |p: &str, seq: &str| Fragment {
            parent_id: p.into(),
            offset_bp: 0,
            sequence: seq.into(),
            target_length_bp: seq.len(),
            label: None,
        };
        let t = Thresholds::uniform(0.8).unwrap();
        assert_eq!(dedup_fragments(&[mk("a", &s), mk("b", &s)], t).unwrap().len(), 1);
        let distinct: Vec<Fragment> = (0..10).map(|i| mk(&format!("r{i}"), &random_seq(&mut rng, 300))).collect();
        for i in 0..10 {
            for j in 0..i {
                assert!(estimate_similarity(&distinct[i].sequence, &distinct[j].sequence, 8).identity < 0.8);
            }
        }
        assert_eq!(dedup_fragments(&distinct, t).unwrap().len(), 10);
    }
}
