//! Ground-truth data distributions with exact conditionals, corpus sampling,
//! byte-level text ingestion and the `SALTCORP` corpus file format.
//!
//! A [`GroundTruthSource`] of order `m` draws each token from a table row
//! selected by the previous `m` tokens. Prefixes shorter than `m` use their
//! own per-length tables, so every conditional `P(x_t | x_{<t})` is an exact
//! lookup.
//!
//! `SALTCORP` layout (little-endian):
//!
//! ```text
//! magic    8 bytes "SALTCORP"
//! version  u32     1
//! V        u32     vocabulary size
//! N        u64     number of sequences
//! T        u32     tokens per sequence
//! tokens   u32[N*T] sequence-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lm::{Distribution, NextTokenModel};
use crate::numcore::Rng;

/// Largest transition table a source may hold.
pub const MAX_TABLE_ENTRIES: u128 = 1 << 24;

pub const CORPUS_MAGIC: &[u8; 8] = b"SALTCORP";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSource {
    order: usize,
    vocab_size: usize,
    /// `tables[l]` for `l < order` holds `V^l` rows for prefixes of length `l`;
    /// `tables[order]` is the stationary transition table.
    tables: Vec<Vec<f64>>,
}

fn table_rows(v: usize, len: usize) -> Result<usize> {
    let rows = (v as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
    if rows.saturating_mul(v as u128) > MAX_TABLE_ENTRIES {
        return Err(Error::EnumerationCap { requested: rows.saturating_mul(v as u128), cap: MAX_TABLE_ENTRIES });
    }
    Ok(rows as usize)
}

impl GroundTruthSource {
    /// Rows drawn from a symmetric Dirichlet(`concentration`).
    pub fn markov(order: usize, vocab_size: usize, concentration: f64, seed: u64) -> Result<Self> {
        if order > 3 {
            return Err(invalid(format!("order {order} outside [0, 3]")));
        }
        if vocab_size < 2 {
            return Err(invalid("vocabulary needs at least two tokens"));
        }
        if !(concentration > 0.0) || !concentration.is_finite() {
            return Err(invalid("concentration must be positive"));
        }
        let mut rng = Rng::derive(seed, "source");
        let mut tables = Vec::with_capacity(order + 1);
        for len in 0..=order {
            let rows = table_rows(vocab_size, len)?;
            let mut t = Vec::with_capacity(rows * vocab_size);
            for _ in 0..rows {
                let g: Vec<f64> = (0..vocab_size).map(|_| rng.gamma(concentration)).collect();
                let s: f64 = g.iter().sum();
                if s > 0.0 {
                    t.extend(g.iter().map(|x| x / s));
                } else {
                    // every gamma draw underflowed (tiny concentration)
                    let hot = rng.below(vocab_size);
                    t.extend((0..vocab_size).map(|i| if i == hot { 1.0 } else { 0.0 }));
                }
            }
            tables.push(t);
        }
        Ok(Self { order, vocab_size, tables })
    }

    /// Builds a source from explicit tables (see the struct docs for layout).
    pub fn from_tables(order: usize, vocab_size: usize, tables: Vec<Vec<f64>>) -> Result<Self> {
        if tables.len() != order + 1 {
            return Err(invalid("need one table per prefix length up to the order"));
        }
        for (len, t) in tables.iter().enumerate() {
            let rows = table_rows(vocab_size, len)?;
            if t.len() != rows * vocab_size {
                return Err(invalid(format!("table {len} has {} entries, expected {}", t.len(), rows * vocab_size)));
            }
            for row in t.chunks(vocab_size) {
                if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(invalid(format!("table {len} has a row that is not a distribution")));
                }
            }
        }
        Ok(Self { order, vocab_size, tables })
    }

    /// Order-1 source that always emits the successor `(v + 1) mod V`; the
    /// first token is uniform.
    pub fn deterministic_cycle(vocab_size: usize) -> Result<Self> {
        let v = vocab_size;
        let mut trans = vec![0.0; v * v];
        for i in 0..v {
            trans[i * v + (i + 1) % v] = 1.0;
        }
        Self::from_tables(1, v, vec![vec![1.0 / v as f64; v], trans])
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.tables
    }

    fn row(&self, prefix: &[u32]) -> &[f64] {
        let v = self.vocab_size;
        let len = prefix.len().min(self.order);
        let ctx = &prefix[prefix.len() - len..];
        let idx = ctx.iter().fold(0usize, |acc, &tok| acc * v + tok as usize);
        &self.tables[len][idx * v..(idx + 1) * v]
    }

    /// Exact `P(· | prefix)`.
    pub fn true_conditional(&self, prefix: &[u32]) -> Result<Distribution> {
        if let Some(&id) = prefix.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.vocab_size });
        }
        Ok(Distribution::new(self.row(prefix).to_vec()).expect("validated rows"))
    }

    /// `P(next | prefix)` without allocation; `prefix` must be in range.
    pub fn prob(&self, prefix: &[u32], next: u32) -> f64 {
        self.row(prefix)[next as usize]
    }

    /// Probability of a whole sequence.
    pub fn sequence_prob(&self, x: &[u32]) -> f64 {
        (0..x.len()).map(|t| self.prob(&x[..t], x[t])).product()
    }

    /// `prefix` extended by `len` sampled tokens.
    pub fn sample_continuation(&self, prefix: &[u32], len: usize, rng: &mut Rng) -> Vec<u32> {
        let mut x = prefix.to_vec();
        for _ in 0..len {
            let tok = rng.categorical(self.row(&x)) as u32;
            x.push(tok);
        }
        x
    }

    /// `N` i.i.d. sequences of length `T`. Sequence `i` uses its own stream
    /// derived from `(seed, i)`, so the result does not depend on generation
    /// order.
    pub fn sample_corpus(&self, n: usize, t: usize, seed: u64) -> Result<Corpus> {
        if n == 0 || t == 0 {
            return Err(invalid("corpus needs N, T >= 1"));
        }
        let base = Rng::derive(seed, "corpus");
        let mut tokens = Vec::with_capacity(n * t);
        for i in 0..n {
            let mut rng = base.fork_index("sequence", i as u64);
            tokens.extend(self.sample_continuation(&[], t, &mut rng));
        }
        Corpus::new(self.vocab_size, t, tokens)
    }
}

impl NextTokenModel for GroundTruthSource {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, prefix: &[u32]) -> Result<Distribution> {
        self.true_conditional(prefix)
    }
}

/// `N` sequences of exactly `T` tokens over a vocabulary of `V`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    vocab_size: usize,
    seq_len: usize,
    tokens: Vec<u32>,
}

impl Corpus {
    pub fn new(vocab_size: usize, seq_len: usize, tokens: Vec<u32>) -> Result<Self> {
        if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
            return Err(invalid("corpus tokens must form a positive number of whole sequences"));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: vocab_size });
        }
        Ok(Self { vocab_size, seq_len, tokens })
    }

    pub fn from_sequences(vocab_size: usize, seqs: &[Vec<u32>]) -> Result<Self> {
        let t = seqs.first().map(|s| s.len()).unwrap_or(0);
        if seqs.iter().any(|s| s.len() != t) {
            return Err(invalid("sequences differ in length"));
        }
        Self::new(vocab_size, t, seqs.concat())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks(self.seq_len)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// New corpus holding the listed sequences in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        for &i in indices {
            if i >= self.len() {
                return Err(invalid(format!("sequence index {i} out of range")));
            }
            tokens.extend_from_slice(self.get(i));
        }
        Self::new(self.vocab_size, self.seq_len, tokens)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 4 * self.tokens.len());
        out.extend_from_slice(CORPUS_MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.seq_len as u32).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 28 || &bytes[..8] != CORPUS_MAGIC {
            return Err(bad("bad corpus header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        if u32_at(8) != CORPUS_VERSION {
            return Err(bad("unsupported corpus version"));
        }
        let v = u32_at(12) as usize;
        let n = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let t = u32_at(24) as usize;
        let body = &bytes[28..];
        if n.checked_mul(t).and_then(|c| c.checked_mul(4)) != Some(body.len()) {
            return Err(bad("corpus body length does not match header"));
        }
        let tokens = body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Self::new(v, t, tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Byte-level vocabulary: ids 0..=255 are bytes; [`ByteVocab::BOS`] is the
/// begin-of-sequence input id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteVocab;

impl ByteVocab {
    pub const SIZE: usize = 256;
    pub const BOS: u32 = 256;
}

/// Chunks a file's bytes into consecutive length-`T` sequences; a trailing
/// partial chunk is dropped.
pub fn ingest_text(path: &Path, seq_len: usize) -> Result<(Corpus, ByteVocab)> {
    let bytes = fs::read(path)?;
    ingest_bytes(&bytes, seq_len)
}

pub fn ingest_bytes(bytes: &[u8], seq_len: usize) -> Result<(Corpus, ByteVocab)> {
    if bytes.is_empty() {
        return Err(invalid("empty input"));
    }
    if seq_len == 0 || bytes.len() < seq_len {
        return Err(invalid(format!("input of {} bytes holds no sequence of length {seq_len}", bytes.len())));
    }
    let whole = bytes.len() / seq_len * seq_len;
    let tokens = bytes[..whole].iter().map(|&b| b as u32).collect();
    Ok((Corpus::new(ByteVocab::SIZE, seq_len, tokens)?, ByteVocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn high_concentration_is_near_uniform() {
        let s = GroundTruthSource::markov(1, 5, 1e6, 3).unwrap();
        for row in s.tables()[1].chunks(5) {
            assert!(row.iter().all(|p| (p - 0.2).abs() < 1e-2));
        }
    }

    #[test]
    fn order_zero_ignores_prefix() {
        let s = GroundTruthSource::markov(0, 4, 0.5, 1).unwrap();
        assert_eq!(s.true_conditional(&[]).unwrap(), s.true_conditional(&[1, 2, 3]).unwrap());
    }

    #[test]
    fn sources_are_deterministic() {
        let a = GroundTruthSource::markov(1, 3, 1.0, 42).unwrap();
        let b = GroundTruthSource::markov(1, 3, 1.0, 42).unwrap();
        assert_eq!(a, b);
        let c = GroundTruthSource::markov(1, 3, 1.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_table_rejected() {
        assert!(matches!(GroundTruthSource::markov(3, 200, 1.0, 0), Err(Error::EnumerationCap { .. })));
        assert!(GroundTruthSource::markov(4, 2, 1.0, 0).is_err());
    }

    #[test]
    fn cycle_source() {
        let s = GroundTruthSource::deterministic_cycle(4).unwrap();
        assert_eq!(s.true_conditional(&[2]).unwrap(), Distribution::onehot(4, 3));
        let c = s.sample_corpus(20, 6, 9).unwrap();
        for seq in c.iter() {
            for w in seq.windows(2) {
                assert_eq!(w[1], (w[0] + 1) % 4);
            }
        }
    }

    #[test]
    fn corpus_sampling_is_deterministic() {
        let s = GroundTruthSource::markov(2, 5, 0.7, 8).unwrap();
        assert_eq!(s.sample_corpus(2, 10, 4).unwrap(), s.sample_corpus(2, 10, 4).unwrap());
    }

    #[test]
    fn corpus_roundtrip() {
        let s = GroundTruthSource::markov(1, 7, 0.5, 2).unwrap();
        let c = s.sample_corpus(13, 9, 1).unwrap();
        let bytes = c.encode();
        assert_eq!(&bytes[..8], b"SALTCORP");
        assert_eq!(Corpus::decode(&bytes).unwrap(), c);
        assert!(Corpus::decode(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn ingest_examples() {
        let data: Vec<u8> = (0..1000u32).map(|i| (i % 251) as u8).collect();
        let (c, _) = ingest_bytes(&data, 100).unwrap();
        assert_eq!(c.len(), 10);
        let (c, _) = ingest_bytes(&data[..1050.min(data.len())], 300).unwrap();
        assert_eq!(c.len(), 3);
        let (c, _) = ingest_bytes(&[b'a'; 50], 10).unwrap();
        assert!(c.iter().all(|s| s.iter().all(|&t| t == b'a' as u32)));
        assert!(ingest_bytes(&[], 10).is_err());
    }
}
