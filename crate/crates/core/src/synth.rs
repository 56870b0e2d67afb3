//! Synthetic labelled corpora: planted-motif sequences, within-class sequence
//! families, and class-specific composition genomes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqio::{Dataset, SequenceRecord, MAX_SPECIES_LABELS, NONPATHOGENIC, PATHOGENIC};

const BASES: &[u8; 4] = b"ACGT";

/// Label names for `k` classes; binary corpora use the pathogenicity labels.
pub fn class_names(k: usize) -> Vec<String> {
    if k == 2 {
        vec![NONPATHOGENIC.to_string(), PATHOGENIC.to_string()]
    } else {
        (0..k).map(|i| format!("species_{}", i + 1)).collect()
    }
}

fn check_classes(k: usize) -> Result<()> {
    if !(2..=MAX_SPECIES_LABELS).contains(&k) {
        return Err(Error::invalid(format!("num_classes must be in 2..={MAX_SPECIES_LABELS}, got {k}")));
    }
    Ok(())
}

fn random_bases(rng: &mut impl Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| BASES[rng.gen_range(0..4)]).collect()
}

/// Replaces each position, with probability `rate`, by a different base.
pub fn mutate(seq: &mut [u8], rate: f64, rng: &mut impl Rng) {
    if rate <= 0.0 {
        return;
    }
    for b in seq.iter_mut() {
        if rng.gen::<f64>() < rate {
            let cur = BASES.iter().position(|x| x == b).unwrap_or(0);
            *b = BASES[(cur + rng.gen_range(1..4)) % 4];
        }
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_sequences: usize,
    pub length_bp: usize,
    pub num_classes: usize,
    pub motifs_per_class: usize,
    pub motif_length: usize,
    /// Explicit motifs per class; random distinct motifs when absent.
    pub motifs: Option<Vec<Vec<String>>>,
    pub mutation_rate: f64,
    /// Planting offsets are multiples of this (6 aligns motifs with the
    /// tokenizer's 6-mer frame).
    pub motif_stride: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_sequences: 200,
            length_bp: 120,
            num_classes: 2,
            motifs_per_class: 1,
            motif_length: 6,
            motifs: None,
            mutation_rate: 0.0,
            motif_stride: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// The two-class motif task: "ACGTAA" versus "TTTGCA".
    pub fn motif_pair(num_sequences: usize, length_bp: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_sequences,
            length_bp,
            motifs: Some(vec![vec!["ACGTAA".into()], vec!["TTTGCA".into()]]),
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_classes(self.num_classes)?;
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::invalid("mutation_rate must be in [0, 1]"));
        }
        if self.motif_stride == 0 {
            return Err(Error::invalid("motif_stride must be positive"));
        }
        if let Some(m) = &self.motifs {
            if m.len() != self.num_classes {
                return Err(Error::invalid(format!("{} motif lists for {} classes", m.len(), self.num_classes)));
            }
            for motif in m.iter().flatten() {
                if motif.is_empty() || !motif.bytes().all(|b| BASES.contains(&b)) {
                    return Err(Error::invalid(format!("motif `{motif}` is not an A/C/G/T string")));
                }
                if motif.len() > self.length_bp {
                    return Err(Error::invalid(format!("motif `{motif}` is longer than length_bp {}", self.length_bp)));
                }
            }
        } else if self.motif_length == 0 || self.motif_length > self.length_bp {
            return Err(Error::invalid(format!(
                "motif_length {} must be in 1..={}",
                self.motif_length, self.length_bp
            )));
        }
        Ok(())
    }

    fn resolve_motifs(&self, rng: &mut impl Rng) -> Vec<Vec<Vec<u8>>> {
        if let Some(m) = &self.motifs {
            return m.iter().map(|c| c.iter().map(|s| s.as_bytes().to_vec()).collect()).collect();
        }
        let mut seen: Vec<Vec<u8>> = Vec::new();
        (0..self.num_classes)
            .map(|_| {
                (0..self.motifs_per_class)
                    .map(|_| loop {
                        let m = random_bases(rng, self.motif_length);
                        if !seen.contains(&m) {
                            seen.push(m.clone());
                            break m;
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Uniform background with each class's motifs planted at random, stride-
/// aligned, non-overlapping offsets, then per-position mutation. Backgrounds
/// containing another class's motif are redrawn.
pub fn generate_motif_dataset(spec: &SyntheticSpec) -> Result<(Dataset, Vec<Vec<String>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let motifs = spec.resolve_motifs(&mut rng);
    let names = class_names(spec.num_classes);
    let mut records = Vec::with_capacity(spec.num_sequences);
    for i in 0..spec.num_sequences {
        let class = i % spec.num_classes;
        let seq = 'attempt: loop {
            let mut s = random_bases(&mut rng, spec.length_bp);
            let mut used: Vec<(usize, usize)> = Vec::new();
            for m in &motifs[class] {
                let slots = (spec.length_bp - m.len()) / spec.motif_stride + 1;
                let mut placed = false;
                for _ in 0..100 {
                    let start = rng.gen_range(0..slots) * spec.motif_stride;
                    let end = start + m.len();
                    if used.iter().all(|&(a, b)| end <= a || start >= b) {
                        s[start..end].copy_from_slice(m);
                        used.push((start, end));
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    return Err(Error::invalid("motifs do not fit into length_bp without overlap"));
                }
            }
            let foreign = motifs
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != class)
                .flat_map(|(_, ms)| ms)
                .any(|m| contains(&s, m));
            if !foreign {
                break 'attempt s;
            }
        };
        let mut seq = seq;
        mutate(&mut seq, spec.mutation_rate, &mut rng);
        records.push(SequenceRecord::new(format!("syn{i:05}"), String::from_utf8(seq).unwrap()).with_label(names[class].clone()));
    }
    let motif_strings = motifs
        .iter()
        .map(|c| c.iter().map(|m| String::from_utf8(m.clone()).unwrap()).collect())
        .collect();
    Ok((Dataset::from_records(records)?, motif_strings))
}

/// Families of related sequences: each family mutates its own random
/// ancestor, every member with its own rate drawn from `divergence`. Classes
/// are assigned per family, so the label is only learnable by recognizing
/// family members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilySpec {
    pub num_classes: usize,
    pub families_per_class: usize,
    pub members_per_family: usize,
    pub length_bp: usize,
    pub divergence: (f64, f64),
    pub seed: u64,
}

impl Default for FamilySpec {
    fn default() -> Self {
        FamilySpec {
            num_classes: 2,
            families_per_class: 10,
            members_per_family: 8,
            length_bp: 400,
            divergence: (0.0, 0.12),
            seed: 0,
        }
    }
}

pub fn generate_family_dataset(spec: &FamilySpec) -> Result<Dataset> {
    check_classes(spec.num_classes)?;
    let (lo, hi) = spec.divergence;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid("divergence must satisfy 0 <= low <= high <= 1"));
    }
    if spec.families_per_class == 0 || spec.members_per_family == 0 || spec.length_bp == 0 {
        return Err(Error::invalid("family counts and length must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let names = class_names(spec.num_classes);
    let mut records = Vec::new();
    for f in 0..spec.num_classes * spec.families_per_class {
        let class = f % spec.num_classes;
        let ancestor = random_bases(&mut rng, spec.length_bp);
        for m in 0..spec.members_per_family {
            let rate = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let mut s = ancestor.clone();
            mutate(&mut s, rate, &mut rng);
            records.push(
                SequenceRecord::new(format!("fam{f:03}_{m:02}"), String::from_utf8(s).unwrap()).with_label(names[class].clone()),
            );
        }
    }
    Dataset::from_records(records)
}

/// Genomes drawn from class-specific first-order Markov chains. Each class's
/// transition row is `1 + bias * u` (u uniform in [-1, 1]) normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionSpec {
    pub num_classes: usize,
    pub genomes_per_class: usize,
    pub length_bp: usize,
    pub bias: f64,
    pub seed: u64,
}

impl Default for CompositionSpec {
    fn default() -> Self {
        CompositionSpec {
            num_classes: 2,
            genomes_per_class: 10,
            length_bp: 50_000,
            bias: 0.3,
            seed: 0,
        }
    }
}

pub fn generate_composition_dataset(spec: &CompositionSpec) -> Result<Dataset> {
    check_classes(spec.num_classes)?;
    if !(0.0..1.0).contains(&spec.bias) {
        return Err(Error::invalid("bias must be in [0, 1)"));
    }
    if spec.genomes_per_class == 0 || spec.length_bp == 0 {
        return Err(Error::invalid("genomes_per_class and length_bp must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let transitions: Vec<[[f64; 4]; 4]> = (0..spec.num_classes)
        .map(|_| {
            let mut t = [[0.0; 4]; 4];
            for row in t.iter_mut() {
                for v in row.iter_mut() {
                    *v = 1.0 + spec.bias * rng.gen_range(-1.0..1.0);
                }
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= z);
            }
            t
        })
        .collect();
    let names = class_names(spec.num_classes);
    let mut records = Vec::new();
    for g in 0..spec.num_classes * spec.genomes_per_class {
        let class = g % spec.num_classes;
        let t = &transitions[class];
        let mut s = Vec::with_capacity(spec.length_bp);
        let mut prev = rng.gen_range(0..4);
        for _ in 0..spec.length_bp {
            let r: f64 = rng.gen();
            let mut acc = 0.0;
            let mut next = 3;
            for (j, &p) in t[prev].iter().enumerate() {
                acc += p;
                if r < acc {
                    next = j;
                    break;
                }
            }
            s.push(BASES[next]);
            prev = next;
        }
        records.push(SequenceRecord::new(format!("genome{g:03}"), String::from_utf8(s).unwrap()).with_label(names[class].clone()));
    }
    Dataset::from_records(records)
}
