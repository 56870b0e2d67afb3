//! Classical features for the baseline learners: one-hot matrices and
//! per-k-normalized k-mer frequency vectors for k = 3..=7.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KMER_RANGE: std::ops::RangeInclusive<usize> = 3..=7;
/// 64 + 256 + 1024 + 4096 + 16384.
pub const KMER_FEATURE_DIM: usize = 21_824;
pub const ONE_HOT_CHANNELS: usize = 4;

#[inline]
fn channel(b: u8) -> Option<usize> {
    match b {
        b'A' => Some(0),
        b'C' => Some(1),
        b'G' => Some(2),
        b'T' => Some(3),
        _ => None,
    }
}

/// Row-major `(fixed_length, 4)` matrix of 0/1 values.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMatrix {
    pub fixed_length: usize,
    pub values: Vec<f64>,
}

impl OneHotMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * ONE_HOT_CHANNELS..(i + 1) * ONE_HOT_CHANNELS]
    }
}

pub fn one_hot(sequence: &str, fixed_length: usize) -> OneHotMatrix {
    assert!(fixed_length >= 1, "fixed_length must be at least 1");
    let mut values = vec![0.0; fixed_length * ONE_HOT_CHANNELS];
    for (i, &b) in sequence.as_bytes().iter().take(fixed_length).enumerate() {
        if let Some(c) = channel(b) {
            values[i * ONE_HOT_CHANNELS + c] = 1.0;
        }
    }
    OneHotMatrix {
        fixed_length,
        values,
    }
}

/// `(k, offset, len)` of each block inside the frequency vector.
pub fn block_layout() -> Vec<(usize, usize, usize)> {
    let mut offset = 0;
    KMER_RANGE
        .map(|k| {
            let len = 1 << (2 * k);
            let b = (k, offset, len);
            offset += len;
            b
        })
        .collect()
}

/// Raw window counts for one k, lexicographic order `A<C<G<T`.
pub fn kmer_counts(sequence: &str, k: usize) -> Vec<u64> {
    let mut counts = vec![0u64; 1 << (2 * k)];
    let mask = (1usize << (2 * k)) - 1;
    let mut code = 0usize;
    let mut valid = 0usize;
    for &b in sequence.as_bytes() {
        match channel(b) {
            Some(c) => {
                code = ((code << 2) | c) & mask;
                valid += 1;
                if valid >= k {
                    counts[code] += 1;
                }
            }
            None => valid = 0,
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmerFrequencyVector {
    pub values: Vec<f64>,
}

pub fn kmer_frequencies(sequence: &str) -> KmerFrequencyVector {
    let mut values = Vec::with_capacity(KMER_FEATURE_DIM);
    for k in KMER_RANGE {
        let counts = kmer_counts(sequence, k);
        let total: u64 = counts.iter().sum();
        if total == 0 {
            values.extend(std::iter::repeat_n(0.0, counts.len()));
        } else {
            let t = total as f64;
            values.extend(counts.iter().map(|&c| c as f64 / t));
        }
    }
    KmerFrequencyVector { values }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub shape: [usize; 2],
    pub dtype: String,
    pub blocks: Vec<FeatureBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub k: usize,
    pub offset: usize,
    pub len: usize,
}

/// Writes a dense little-endian f32 matrix to `path` and its JSON sidecar
/// next to it (`<path>.json`).
pub fn write_feature_matrix(path: impl AsRef<Path>, rows: &[Vec<f64>], blocks: Vec<FeatureBlock>) -> Result<()> {
    let path = path.as_ref();
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    let mut buf = Vec::with_capacity(rows.len() * cols * 4);
    for r in rows {
        for &v in r {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    std::fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(io)?;
    let sidecar = FeatureSidecar {
        shape: [rows.len(), cols],
        dtype: "f32le".into(),
        blocks,
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?)
        .map_err(|e| Error::io(format!("writing {}", side.display()), e))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<(FeatureSidecar, Vec<Vec<f32>>)> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = std::fs::read(&side).map_err(|e| Error::io(format!("reading {}", side.display()), e))?;
    let sidecar: FeatureSidecar = serde_json::from_slice(&text)?;
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let [n, d] = sidecar.shape;
    if raw.len() != n * d * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            n * d * 4,
            raw.len()
        )));
    }
    let flat: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let rows = if d == 0 { vec![Vec::new(); n] } else { flat.chunks(d).map(<[f32]>::to_vec).collect() };
    Ok((sidecar, rows))
}

pub fn kmer_blocks() -> Vec<FeatureBlock> {
    block_layout()
        .into_iter()
        .map(|(k, offset, len)| FeatureBlock { k, offset, len })
        .collect()
}

pub fn write_feature_csv<W: Write>(mut w: W, ids: &[String], rows: &[Vec<f64>]) -> std::io::Result<()> {
    let cols = rows.first().map_or(0, Vec::len);
    write!(w, "id")?;
    for c in 0..cols {
        write!(w, ",f{c}")?;
    }
    writeln!(w)?;
    for (id, r) in ids.iter().zip(rows) {
        write!(w, "{id}")?;
        for v in r {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn dimension() {
        assert_eq!(KMER_FEATURE_DIM, (3..=7).map(|k| 4usize.pow(k)).sum::<usize>());
        assert_eq!(kmer_frequencies("").values.len(), KMER_FEATURE_DIM);
        assert_eq!(kmer_frequencies(&"ACGT".repeat(1000)).values.len(), KMER_FEATURE_DIM);
    }

    #[test]
    fn homopolymer_blocks() {
        let v = kmer_frequencies("AAAA");
        let layout = block_layout();
        let (_, off3, len3) = layout[0];
        assert_eq!(v.values[off3], 1.0);
        assert!(v.values[off3 + 1..off3 + len3].iter().all(|&x| x == 0.0));
        let (_, off4, len4) = layout[1];
        assert_eq!(v.values[off4], 1.0);
        assert_eq!(v.values[off4..off4 + len4].iter().sum::<f64>(), 1.0);
        for &(_, off, len) in &layout[2..] {
            assert!(v.values[off..off + len].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn uniform_trimer_frequencies() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let s: String = (0..n).map(|_| b"ACGT"[rng.gen_range(0..4)] as char).collect();
        let v = kmer_frequencies(&s);
        let windows = (n - 2) as f64;
        let p = 1.0 / 64.0;
        // Overlapping windows are positively correlated; 3 standard errors of
        // the independent multinomial with a factor-2 allowance for that.
        let se = (p * (1.0 - p) / windows).sqrt();
        for &x in &v.values[..64] {
            assert!((x - p).abs() < 3.0 * 2.0 * se, "{x}");
        }
    }

    #[test]
    fn one_hot_examples() {
        let m = one_hot("ACGT", 4);
        for i in 0..4 {
            let row = m.row(i);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row[i], 1.0);
        }
        let m = one_hot("AN", 4);
        assert_eq!(m.row(0), &[1.0, 0.0, 0.0, 0.0]);
        for i in 1..4 {
            assert_eq!(m.row(i), &[0.0; 4]);
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let rows = vec![kmer_frequencies("ACGTACGTTT").values, kmer_frequencies("GGGGCC").values];
        write_feature_matrix(&p, &rows, kmer_blocks()).unwrap();
        let (side, back) = read_feature_matrix(&p).unwrap();
        assert_eq!(side.shape, [2, KMER_FEATURE_DIM]);
        assert_eq!(side.blocks.len(), 5);
        for (a, b) in rows.iter().zip(&back) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y);
            }
        }
    }

    fn seq() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop_oneof![6 => Just('A'), 6 => Just('C'), 6 => Just('G'), 6 => Just('T'), 1 => Just('N')], 0..80)
            .prop_map(|v| v.into_iter().collect())
    }

    fn brute_counts(s: &str, k: usize) -> std::collections::BTreeMap<String, u64> {
        let mut m = std::collections::BTreeMap::new();
        for i in 0..s.len().saturating_sub(k - 1) {
            let w = &s[i..i + k];
            if !w.contains('N') {
                *m.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        m
    }

    proptest! {
        #[test]
        fn blocks_normalized(s in seq()) {
            let v = kmer_frequencies(&s);
            prop_assert!(v.values.iter().all(|&x| x >= 0.0));
            for (k, off, len) in block_layout() {
                let sum: f64 = v.values[off..off + len].iter().sum();
                if brute_counts(&s, k).is_empty() {
                    prop_assert_eq!(sum, 0.0);
                } else {
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn junction_composition(a in seq(), b in seq(), k in 3usize..8) {
            let joined = format!("{a}{b}");
            let whole = kmer_counts(&joined, k);
            let ca = kmer_counts(&a, k);
            let cb = kmer_counts(&b, k);
            // Junction windows start in `a` and end in `b`.
            let mut junction = vec![0u64; whole.len()];
            let start = a.len().saturating_sub(k - 1);
            for i in start..a.len() {
                if i + k <= joined.len() {
                    let w = &joined[i..i + k];
                    if !w.contains('N') {
                        let code = w.bytes().fold(0usize, |acc, c| (acc << 2) | channel(c).unwrap());
                        junction[code] += 1;
                    }
                }
            }
            for i in 0..whole.len() {
                prop_assert_eq!(whole[i], ca[i] + cb[i] + junction[i]);
            }
        }

        #[test]
        fn one_hot_rows(s in seq(), len in 1usize..100) {
            let m = one_hot(&s, len);
            for (i, b) in s.bytes().take(len).enumerate() {
                let sum: f64 = m.row(i).iter().sum();
                prop_assert_eq!(sum, if b == b'N' { 0.0 } else { 1.0 });
            }
            for i in s.len().min(len)..len {
                prop_assert_eq!(m.row(i), &[0.0; 4][..]);
            }
        }
    }
}
