//! Nucleotide tokenizer: 3 special tokens, 5 single nucleotides and every
//! 6-mer over `ACGT`, for 4,104 ids in total.
//!
//! Id layout: `[PAD]=0`, `[MASK]=1`, `[CLS]=2`, `A..N = 3..7`, then the 6-mers
//! in lexicographic order (`A<C<G<T`) at ids `8..4104`.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const KMER: usize = 6;
pub const NUM_KMERS: usize = 1 << (2 * KMER);
pub const NUM_SPECIAL: usize = 3;
pub const VOCAB_SIZE: usize = NUM_SPECIAL + 5 + NUM_KMERS;

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
const NUCLEOTIDE_BASE: u32 = 3;
const KMER_BASE: u32 = 8;

/// 1 CLS + 2,000 six-mers, i.e. 12 kb of N-free sequence.
pub const DEFAULT_CONTEXT_TOKENS: usize = 2001;

const SINGLES: [&str; 5] = ["A", "C", "G", "T", "N"];
const SPECIALS: [&str; 3] = ["[PAD]", "[MASK]", "[CLS]"];

pub const TOKEN_STREAM_MAGIC: &[u8; 8] = b"GLMTOK01";

#[inline]
fn base_code(b: u8) -> Option<u32> {
    match b {
        b'A' => Some(0),
        b'C' => Some(1),
        b'G' => Some(2),
        b'T' => Some(3),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::build()
    }
}

impl Vocabulary {
    pub fn build() -> Self {
        let mut tokens: Vec<String> = Vec::with_capacity(VOCAB_SIZE);
        tokens.extend(SPECIALS.iter().map(|s| s.to_string()));
        tokens.extend(SINGLES.iter().map(|s| s.to_string()));
        for code in 0..NUM_KMERS {
            tokens.push(kmer_string(code));
        }
        Vocabulary { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        match token {
            "[PAD]" => Some(PAD_ID),
            "[MASK]" => Some(MASK_ID),
            "[CLS]" => Some(CLS_ID),
            _ if token.len() == 1 => {
                SINGLES.iter().position(|s| *s == token).map(|i| NUCLEOTIDE_BASE + i as u32)
            }
            _ if token.len() == KMER => kmer_code(token.as_bytes()).map(|c| KMER_BASE + c),
            _ => None,
        }
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL as u32
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.tokens.iter().enumerate().map(|(i, t)| (i as u32, t.as_str()))
    }

    /// Two-column `token<TAB>id` export.
    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(self.tokens.len() * 12);
        for (id, tok) in self.iter() {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the TSV export; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode(&self, sequence: &str, max_tokens: Option<usize>) -> Result<TokenSequence> {
        encode(sequence, max_tokens)
    }

    pub fn decode(&self, tokens: &TokenSequence) -> Result<String> {
        decode(&tokens.ids)
    }
}

fn kmer_string(code: usize) -> String {
    const ALPHA: [u8; 4] = *b"ACGT";
    let mut s = [0u8; KMER];
    for (i, slot) in s.iter_mut().enumerate() {
        let shift = 2 * (KMER - 1 - i);
        *slot = ALPHA[(code >> shift) & 3];
    }
    String::from_utf8(s.to_vec()).expect("ascii")
}

fn kmer_code(window: &[u8]) -> Option<u32> {
    window
        .iter()
        .try_fold(0u32, |acc, &b| base_code(b).map(|c| (acc << 2) | c))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
    pub source_id: String,
    pub original_length_bp: usize,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let attention_mask = vec![true; ids.len()];
        TokenSequence {
            ids,
            attention_mask,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    /// Number of positions with a true attention mask.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }
}

/// Greedy left-to-right tokenization: a full N-free 6-mer when one fits,
/// otherwise a single nucleotide.
pub fn encode(sequence: &str, max_tokens: Option<usize>) -> Result<TokenSequence> {
    if max_tokens == Some(0) {
        return Err(Error::invalid("max_tokens must be at least 1"));
    }
    let bytes = sequence.as_bytes();
    let limit = max_tokens.unwrap_or(usize::MAX);
    let mut ids = Vec::with_capacity(bytes.len() / KMER + 2);
    ids.push(CLS_ID);
    let mut pos = 0;
    while pos < bytes.len() && ids.len() < limit {
        if let Some(code) = bytes.get(pos..pos + KMER).and_then(kmer_code) {
            ids.push(KMER_BASE + code);
            pos += KMER;
            continue;
        }
        let id = match bytes[pos] {
            b'A' => NUCLEOTIDE_BASE,
            b'C' => NUCLEOTIDE_BASE + 1,
            b'G' => NUCLEOTIDE_BASE + 2,
            b'T' => NUCLEOTIDE_BASE + 3,
            b'N' => NUCLEOTIDE_BASE + 4,
            _ => {
                let ch = sequence[pos..].chars().next().unwrap_or('?');
                return Err(Error::NonCanonical { position: pos, ch });
            }
        };
        ids.push(id);
        pos += 1;
    }
    // Validate the untokenized tail too, so truncation never hides bad input.
    if let Some(off) = bytes[pos..]
        .iter()
        .position(|b| !matches!(b, b'A' | b'C' | b'G' | b'T' | b'N'))
    {
        let p = pos + off;
        let ch = sequence[p..].chars().next().unwrap_or('?');
        return Err(Error::NonCanonical { position: p, ch });
    }
    let mut ts = TokenSequence::from_ids(ids);
    ts.original_length_bp = bytes.len();
    Ok(ts)
}

/// Truncates (head kept) or right-pads with `[PAD]` to exactly `context_tokens`.
pub fn pad_or_truncate(tokens: &TokenSequence, context_tokens: usize) -> TokenSequence {
    assert!(context_tokens >= 1, "context_tokens must be at least 1");
    let mut out = tokens.clone();
    if out.ids.len() > context_tokens {
        out.ids.truncate(context_tokens);
        out.attention_mask.truncate(context_tokens);
    } else {
        let extra = context_tokens - out.ids.len();
        out.ids.extend(std::iter::repeat_n(PAD_ID, extra));
        out.attention_mask.extend(std::iter::repeat_n(false, extra));
    }
    out
}

pub fn decode(ids: &[u32]) -> Result<String> {
    let mut out = String::with_capacity(ids.len() * KMER);
    for &id in ids {
        if id as usize >= VOCAB_SIZE {
            return Err(Error::TokenOutOfRange(id));
        }
        if id >= KMER_BASE {
            out.push_str(&kmer_string((id - KMER_BASE) as usize));
        } else if id >= NUCLEOTIDE_BASE {
            out.push_str(SINGLES[(id - NUCLEOTIDE_BASE) as usize]);
        }
    }
    Ok(out)
}

/// Writes token streams: 16-byte header (`GLMTOK01` + u64 record count), then
/// per record a u32 token count followed by that many u16 ids, all
/// little-endian.
pub fn write_token_stream<W: Write>(mut w: W, seqs: &[TokenSequence]) -> std::io::Result<()> {
    w.write_all(TOKEN_STREAM_MAGIC)?;
    w.write_all(&(seqs.len() as u64).to_le_bytes())?;
    for s in seqs {
        w.write_all(&(s.ids.len() as u32).to_le_bytes())?;
        for &id in &s.ids {
            w.write_all(&(id as u16).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_token_stream<R: Read>(mut r: R) -> Result<Vec<Vec<u32>>> {
    let io = |e| Error::io("reading token stream", e);
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(io)?;
    if &header[..8] != TOKEN_STREAM_MAGIC {
        return Err(Error::Format("token stream magic mismatch".into()));
    }
    let count = u64::from_le_bytes(header[8..].try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(io)?;
        let len = u32::from_le_bytes(len) as usize;
        let mut buf = vec![0u8; len * 2];
        r.read_exact(&mut buf).map_err(io)?;
        let ids: Vec<u32> = buf
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
            .collect();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= VOCAB_SIZE) {
            return Err(Error::TokenOutOfRange(bad));
        }
        out.push(ids);
    }
    Ok(out)
}
