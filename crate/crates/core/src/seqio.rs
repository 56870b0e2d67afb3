//! FASTA ingestion and label manifests.
//!
//! Records are canonicalized on the way in: uppercase, whitespace removed,
//! IUPAC ambiguity codes collapsed to `N`. Anything else is rejected so the
//! tokenizer only ever sees `A`, `C`, `G`, `T` and `N`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PATHOGENIC: &str = "pathogenic";
pub const NONPATHOGENIC: &str = "nonpathogenic";
pub const MAX_SPECIES_LABELS: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub path: PathBuf,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub sequence: String,
    pub label: Option<String>,
    pub source: Source,
}

impl SequenceRecord {
    pub fn new(id: impl Into<String>, sequence: impl Into<String>) -> Self {
        SequenceRecord {
            id: id.into(),
            sequence: sequence.into(),
            label: None,
            source: Source {
                path: PathBuf::new(),
                index: 0,
            },
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn length_bp(&self) -> usize {
        self.sequence.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Binary,
    #[serde(rename = "species-7")]
    Species7,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<SequenceRecord>,
    pub label_set: Vec<String>,
    pub task: Task,
}

impl Dataset {
    /// Builds a dataset from already-labelled records, inferring the task from
    /// the label set.
    pub fn from_records(records: Vec<SequenceRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        let label_set: Vec<String> = records
            .iter()
            .filter_map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let task = infer_task(&label_set)?;
        Ok(Dataset {
            records,
            label_set,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index of `label` within the sorted label set.
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    /// Per-record class indices; unlabelled records map to `None`.
    pub fn label_indices(&self) -> Vec<Option<usize>> {
        self.records
            .iter()
            .map(|r| r.label.as_deref().and_then(|l| self.label_index(l)))
            .collect()
    }
}

pub fn infer_task(label_set: &[String]) -> Result<Task> {
    if label_set.is_empty() {
        return Ok(Task::Unlabeled);
    }
    if label_set
        .iter()
        .all(|l| l == PATHOGENIC || l == NONPATHOGENIC)
    {
        return Ok(Task::Binary);
    }
    if label_set.len() > MAX_SPECIES_LABELS {
        return Err(Error::TooManyLabels(label_set.len()));
    }
    Ok(Task::Species7)
}

/// Maps one input byte to its canonical nucleotide. `None` means skip
/// (whitespace), `Err` means the byte is not a nucleotide code at all.
#[inline]
fn canonical_base(b: u8) -> std::result::Result<Option<u8>, ()> {
    match b.to_ascii_uppercase() {
        b'A' => Ok(Some(b'A')),
        b'C' => Ok(Some(b'C')),
        b'G' => Ok(Some(b'G')),
        b'T' => Ok(Some(b'T')),
        b'N' | b'R' | b'Y' | b'S' | b'W' | b'K' | b'M' | b'B' | b'D' | b'H' | b'V' => {
            Ok(Some(b'N'))
        }
        b' ' | b'\t' | b'\r' | b'\n' => Ok(None),
        _ => Err(()),
    }
}

/// Canonicalizes a raw sequence string. Returns the offending character and
/// its byte offset on failure.
pub fn canonicalize(raw: &str) -> std::result::Result<String, (usize, char)> {
    let mut out = String::with_capacity(raw.len());
    for (i, ch) in raw.char_indices() {
        if !ch.is_ascii() {
            return Err((i, ch));
        }
        match canonical_base(ch as u8) {
            Ok(Some(b)) => out.push(b as char),
            Ok(None) => {}
            Err(()) => return Err((i, ch)),
        }
    }
    Ok(out)
}

pub fn is_canonical(seq: &str) -> bool {
    seq.bytes().all(|b| matches!(b, b'A' | b'C' | b'G' | b'T' | b'N'))
}

/// Opens a file for reading, transparently decompressing `.gz` inputs.
pub fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>> {
    let file =
        File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let inner: Box<dyn Read> = if gz {
        Box::new(MultiGzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::with_capacity(1 << 16, inner)))
}

/// Streaming multi-line FASTA reader.
pub struct FastaReader<R> {
    reader: R,
    path: PathBuf,
    line_no: usize,
    line: String,
    pending_header: Option<(String, usize)>,
    index: usize,
    seen: HashSet<String>,
    done: bool,
}

impl<R: BufRead> FastaReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        FastaReader {
            reader,
            path: path.into(),
            line_no: 0,
            line: String::new(),
            pending_header: None,
            index: 0,
            seen: HashSet::new(),
            done: false,
        }
    }

    fn parse_err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn read_line(&mut self) -> Result<bool> {
        self.line.clear();
        let n = self
            .reader
            .read_line(&mut self.line)
            .map_err(|e| Error::io(format!("reading {}", self.path.display()), e))?;
        if n > 0 {
            self.line_no += 1;
        }
        Ok(n > 0)
    }

    fn next_record(&mut self) -> Result<Option<SequenceRecord>> {
        // Find the first header.
        let (header, header_line) = match self.pending_header.take() {
            Some(h) => h,
            None => loop {
                if !self.read_line()? {
                    return Ok(None);
                }
                let trimmed = self.line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                if let Some(h) = trimmed.strip_prefix('>') {
                    break (h.to_string(), self.line_no);
                }
                return Err(self.parse_err(self.line_no, "sequence data before first header"));
            },
        };

        let mut tokens = header.split_whitespace();
        let id = match tokens.next() {
            Some(id) => id.to_string(),
            None => return Err(self.parse_err(header_line, "empty record id")),
        };
        let label = tokens
            .find_map(|t| t.strip_prefix("label="))
            .map(str::to_string);

        let mut sequence = String::new();
        loop {
            if !self.read_line()? {
                break;
            }
            if let Some(h) = self.line.trim_start().strip_prefix('>') {
                self.pending_header = Some((h.trim_end().to_string(), self.line_no));
                break;
            }
            for (col, b) in self.line.bytes().enumerate() {
                match canonical_base(b) {
                    Ok(Some(c)) => sequence.push(c as char),
                    Ok(None) => {}
                    Err(()) => {
                        let ch = self.line[col..].chars().next().unwrap_or('?');
                        return Err(self.parse_err(
                            self.line_no,
                            format!("invalid nucleotide {ch:?} in record `{id}`"),
                        ));
                    }
                }
            }
        }

        if !self.seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let record = SequenceRecord {
            id,
            sequence,
            label,
            source: Source {
                path: self.path.clone(),
                index: self.index,
            },
        };
        self.index += 1;
        Ok(Some(record))
    }
}

impl<R: BufRead> Iterator for FastaReader<R> {
    type Item = Result<SequenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Streams the records of a FASTA file (optionally gzip-compressed).
pub fn parse_fasta(path: impl AsRef<Path>) -> Result<FastaReader<Box<dyn BufRead>>> {
    let path = path.as_ref();
    Ok(FastaReader::new(open_maybe_gz(path)?, path))
}

/// Reads several FASTA files in order, rejecting ids repeated across files.
pub fn read_fasta_files<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<SequenceRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for p in paths {
        for rec in parse_fasta(p)? {
            let rec = rec?;
            if !seen.insert(rec.id.clone()) {
                return Err(Error::DuplicateId(rec.id));
            }
            out.push(rec);
        }
    }
    Ok(out)
}

/// Label manifest: ordered `(id, label)` rows from a TSV with an `id\tlabel`
/// header.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelManifest {
    pub entries: BTreeMap<String, String>,
}

impl LabelManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = open_maybe_gz(path)?;
        let mut entries = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let row = i + 1;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 {
                return Err(Error::ManifestRow {
                    path: path.to_path_buf(),
                    row,
                    found: cols.len(),
                });
            }
            if row == 1 && cols[0] == "id" && cols[1] == "label" {
                continue;
            }
            entries.insert(cols[0].to_string(), cols[1].to_string());
        }
        Ok(LabelManifest { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("id\tlabel\n");
        for (id, label) in &self.entries {
            out.push_str(id);
            out.push('\t');
            out.push_str(label);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelOptions {
    /// Keep records carrying a `label=` header key when the manifest has no
    /// entry for them.
    pub header_fallback: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LabelStats {
    pub labelled: usize,
    pub dropped: usize,
}

/// Joins records with a label manifest. Records missing from the manifest are
/// dropped and counted.
pub fn attach_labels<I>(
    records: I,
    manifest: &LabelManifest,
    opts: LabelOptions,
) -> Result<(Dataset, LabelStats)>
where
    I: IntoIterator<Item = Result<SequenceRecord>>,
{
    let mut kept = Vec::new();
    let mut stats = LabelStats::default();
    for rec in records {
        let mut rec = rec?;
        match manifest.entries.get(&rec.id) {
            Some(label) => rec.label = Some(label.clone()),
            None if opts.header_fallback && rec.label.is_some() => {}
            None => {
                stats.dropped += 1;
                continue;
            }
        }
        stats.labelled += 1;
        kept.push(rec);
    }
    if stats.dropped > 0 {
        log::warn!("{} records without a manifest label were dropped", stats.dropped);
    }
    if kept.is_empty() {
        log::warn!("no labelled records remain after joining the manifest");
    }
    Ok((Dataset::from_records(kept)?, stats))
}

pub fn write_fasta<W: Write>(mut out: W, records: &[SequenceRecord]) -> std::io::Result<()> {
    const WIDTH: usize = 60;
    for r in records {
        writeln!(out, ">{}", r.id)?;
        for chunk in r.sequence.as_bytes().chunks(WIDTH) {
            out.write_all(chunk)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Writes `records.fasta` and `labels.tsv` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let fasta = dir.join(DATASET_FASTA);
    let f = File::create(&fasta).map_err(|e| Error::io(format!("creating {}", fasta.display()), e))?;
    let mut w = std::io::BufWriter::new(f);
    write_fasta(&mut w, &dataset.records)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("writing {}", fasta.display()), e))?;

    // Manifest rows in record order, so re-reading preserves it exactly.
    let mut out = String::from("id\tlabel\n");
    for r in &dataset.records {
        if let Some(l) = &r.label {
            out.push_str(&format!("{}\t{}\n", r.id, l));
        }
    }
    let manifest = dir.join(DATASET_LABELS);
    std::fs::write(&manifest, out)
        .map_err(|e| Error::io(format!("writing {}", manifest.display()), e))
}

pub const DATASET_FASTA: &str = "records.fasta";
pub const DATASET_LABELS: &str = "labels.tsv";

/// Loads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = LabelManifest::read(dir.join(DATASET_LABELS))?;
    let (ds, _) = attach_labels(
        parse_fasta(dir.join(DATASET_FASTA))?,
        &manifest,
        LabelOptions::default(),
    )?;
    Ok(ds)
}
