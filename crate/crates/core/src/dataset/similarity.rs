//! Alignment-free pairwise similarity: Jaccard over distinct k-mer sets plus
//! the fraction of the shorter sequence covered by shared k-mer occurrences.

use serde::{Deserialize, Serialize};

pub const DEFAULT_K: usize = 8;
pub const MIN_K: usize = 4;
pub const MAX_K: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEstimate {
    pub identity: f64,
    pub coverage: f64,
}

impl SimilarityEstimate {
    pub const ZERO: SimilarityEstimate = SimilarityEstimate {
        identity: 0.0,
        coverage: 0.0,
    };

    pub fn passes(&self, identity: f64, coverage: f64) -> bool {
        self.identity >= identity && self.coverage >= coverage
    }
}

/// Precomputed k-mer index of one sequence.
#[derive(Debug, Clone)]
pub struct KmerProfile {
    k: usize,
    len: usize,
    /// k-mer code for every window start, `None` where the window holds an N.
    windows: Vec<Option<u64>>,
    /// Sorted distinct codes.
    set: Vec<u64>,
}

impl KmerProfile {
    pub fn new(sequence: &str, k: usize) -> Self {
        assert!((MIN_K..=MAX_K).contains(&k), "k must be in {MIN_K}..={MAX_K}");
        let bytes = sequence.as_bytes();
        let mask = if k == 32 { u64::MAX } else { (1u64 << (2 * k)) - 1 };
        let mut windows = Vec::with_capacity(bytes.len().saturating_sub(k - 1));
        let mut code = 0u64;
        let mut valid = 0usize;
        for (i, &b) in bytes.iter().enumerate() {
            let c = match b {
                b'A' => Some(0),
                b'C' => Some(1),
                b'G' => Some(2),
                b'T' => Some(3),
                _ => None,
            };
            match c {
                Some(c) => {
                    code = ((code << 2) | c) & mask;
                    valid += 1;
                }
                None => valid = 0,
            }
            if i + 1 >= k {
                windows.push((valid >= k).then_some(code));
            }
        }
        let mut set: Vec<u64> = windows.iter().flatten().copied().collect();
        set.sort_unstable();
        set.dedup();
        KmerProfile {
            k,
            len: bytes.len(),
            windows,
            set,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn distinct(&self) -> usize {
        self.set.len()
    }

    fn contains(&self, code: u64) -> bool {
        self.set.binary_search(&code).is_ok()
    }
}

fn intersection_size(a: &[u64], b: &[u64]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Positions of `short` covered by at least one k-mer occurrence that also
/// occurs in `long`, as a fraction of `short`'s length.
fn covered_fraction(short: &KmerProfile, long: &KmerProfile) -> f64 {
    if short.len == 0 {
        return 0.0;
    }
    let k = short.k;
    let mut covered = 0usize;
    // End (exclusive) of the covered run extending from the last shared hit.
    let mut run_end = 0usize;
    for (start, w) in short.windows.iter().enumerate() {
        if let Some(code) = w {
            if long.contains(*code) {
                let end = start + k;
                covered += end - run_end.max(start);
                run_end = end;
            }
        }
    }
    covered as f64 / short.len as f64
}

pub fn profile_similarity(a: &KmerProfile, b: &KmerProfile, seq_a: &str, seq_b: &str) -> SimilarityEstimate {
    assert_eq!(a.k, b.k, "profiles built with different k");
    if a.len < a.k || b.len < b.k || a.set.is_empty() || b.set.is_empty() {
        return SimilarityEstimate::ZERO;
    }
    let inter = intersection_size(&a.set, &b.set);
    let union = a.set.len() + b.set.len() - inter;
    let identity = inter as f64 / union as f64;
    // Equal lengths break the tie on content so the estimate stays symmetric.
    let a_is_short = match a.len.cmp(&b.len) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => seq_a <= seq_b,
    };
    let coverage = if inter == 0 {
        0.0
    } else if a_is_short {
        covered_fraction(a, b)
    } else {
        covered_fraction(b, a)
    };
    SimilarityEstimate { identity, coverage }
}

/// Identity and coverage between two canonical sequences. `k` must be in
/// `4..=32`; sequences shorter than `k` score zero.
pub fn estimate_similarity(a: &str, b: &str, k: usize) -> SimilarityEstimate {
    let pa = KmerProfile::new(a, k);
    let pb = KmerProfile::new(b, k);
    profile_similarity(&pa, &pb, a, b)
}
