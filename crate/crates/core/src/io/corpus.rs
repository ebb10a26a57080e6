//! Byte-level corpus: every byte is a token, plus one pad id.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// 256 byte values and a pad token.
pub const VOCAB_SIZE: usize = 257;
pub const PAD: u32 = 256;

pub fn encode(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Drops pad tokens; everything else maps back to its byte.
pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

#[derive(Clone, Debug)]
pub struct Corpus {
    source: Option<PathBuf>,
    bytes: Vec<u8>,
    split: usize,
}

impl Corpus {
    /// Splits by position: the first `1 − heldout_fraction` of the bytes
    /// train, the tail is held out.
    pub fn from_bytes(bytes: Vec<u8>, heldout_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&heldout_fraction) {
            return Err(Error::config("heldout_fraction", "must be in [0, 1)"));
        }
        if bytes.is_empty() {
            return Err(Error::EmptyInput("corpus"));
        }
        let held = (bytes.len() as f64 * heldout_fraction).round() as usize;
        let split = bytes.len() - held;
        Ok(Self {
            source: None,
            bytes,
            split,
        })
    }

    pub fn load(path: &Path, heldout_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut c = Self::from_bytes(bytes, heldout_fraction)?;
        c.source = Some(path.to_path_buf());
        Ok(c)
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Byte offset where the held-out split starts.
    pub fn split_offset(&self) -> usize {
        self.split
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn heldout(&self) -> &[u8] {
        &self.bytes[self.split..]
    }
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "th", "st", "br", "ch", "sh", "gr",
    "pl", "tr", "",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai", "ee", "y"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "ck", "m", "ll", "d"];
const FUNCTION_WORDS: &[&str] = &[
    "the", "of", "and", "a", "to", "in", "is", "was", "that", "he", "she", "it", "with", "as", "for", "his", "her",
    "on", "by", "at", "from", "they", "we", "but", "not", "had", "which", "or", "an", "were", "their", "all",
];

/// Deterministic English-like text: Zipf-distributed pseudo-words with
/// sparse word-to-word transitions, grouped into capitalised sentences and
/// paragraphs. Used when no real corpus is available.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::new(seed).split("synthetic-corpus");
    let mut words: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
    while words.len() < 1500 {
        let syllables = 1 + rng.below(3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.below(ONSETS.len())]);
            w.push_str(NUCLEI[rng.below(NUCLEI.len())]);
            w.push_str(CODAS[rng.below(CODAS.len())]);
        }
        if !words.contains(&w) {
            words.push(w);
        }
    }
    let n = words.len();
    // Zipf over ranks, as a cumulative table.
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for r in 0..n {
        acc += 1.0 / (r as f64 + 1.0);
        cdf.push(acc);
    }
    let zipf = |rng: &mut Rng| {
        let u = rng.uniform() * acc;
        cdf.partition_point(|&c| c < u).min(n - 1)
    };
    // Every word prefers a handful of successors.
    let successors: Vec<Vec<usize>> = (0..n).map(|_| (0..6).map(|_| zipf(&mut rng)).collect()).collect();

    let mut out = Vec::with_capacity(n_bytes + 64);
    let mut prev = zipf(&mut rng);
    let mut sentence_len = 0;
    let mut sentences = 0;
    let mut capital = true;
    while out.len() < n_bytes {
        let next = if rng.uniform() < 0.7 {
            successors[prev][rng.below(6)]
        } else {
            zipf(&mut rng)
        };
        let w = &words[next];
        if capital {
            let mut cs = w.chars();
            if let Some(c) = cs.next() {
                out.extend(c.to_uppercase().to_string().bytes());
                out.extend(cs.as_str().bytes());
            }
            capital = false;
        } else {
            out.extend(w.bytes());
        }
        sentence_len += 1;
        prev = next;
        if sentence_len >= 4 && rng.uniform() < 0.15 {
            out.push(if rng.uniform() < 0.9 { b'.' } else { b'?' });
            sentence_len = 0;
            sentences += 1;
            capital = true;
            if sentences % 6 == 0 && rng.uniform() < 0.5 {
                out.extend_from_slice(b"\n\n");
                continue;
            }
        } else if sentence_len >= 3 && rng.uniform() < 0.06 {
            out.push(b',');
        }
        out.push(b' ');
    }
    out.truncate(n_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_positional() {
        let c = Corpus::from_bytes((0..100).collect(), 0.02).unwrap();
        assert_eq!(c.train().len(), 98);
        assert_eq!(c.heldout(), &[98, 99]);
        assert!(Corpus::from_bytes(vec![], 0.02).is_err());
        assert!(Corpus::from_bytes(vec![1], 1.0).is_err());
    }

    #[test]
    fn roundtrip_tokens() {
        let text = "héllo\n\u{0}\u{ff}".as_bytes();
        let mut t = encode(text);
        t.push(PAD);
        assert!(t.iter().all(|&x| (x as usize) < VOCAB_SIZE));
        assert_eq!(decode(&t), text);
    }

    #[test]
    fn synthetic_is_deterministic_text() {
        let a = synthetic_corpus(5000, 1);
        assert_eq!(a, synthetic_corpus(5000, 1));
        assert_ne!(a, synthetic_corpus(5000, 2));
        assert_eq!(a.len(), 5000);
        assert!(a.iter().all(|b| b.is_ascii()));
        assert!(a.iter().filter(|&&b| b == b' ').count() > 500);
    }
}
