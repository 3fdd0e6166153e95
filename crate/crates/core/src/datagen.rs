//! Synthetic Zipf keys and dataset statistics.
//!
//! `Zipf(s, n, m)` keys are `n` bytes long; in every 8-byte word the first
//! `m` bytes are a fixed character and the rest are lower-case letters drawn
//! with probability proportional to `rank^-s` ('a' has rank 1).

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::keycodec::{ColumnType, Schema};
use crate::metadata::DsMetadata;
use crate::rebuild::{reconstruct_compressed, reconstruct_full, RebuildError, RebuildOptions};
use crate::rcsort::WordCounter;
use crate::table::{write_dataset, Table, TableError};

pub const ALPHABET: usize = 26;
pub const FIXED_CHAR: u8 = b'a';

#[derive(Debug, Error)]
pub enum GenError {
    #[error("key length {0} is not a positive multiple of 8")]
    KeyLength(usize),
    #[error("fixed prefix must be 0..=7 bytes per word, got {0}")]
    Prefix(usize),
    #[error("exponent must be finite and non-negative, got {0}")]
    Exponent(f64),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZipfSpec {
    pub s: f64,
    pub n: usize,
    pub m: usize,
    pub count: u64,
    pub seed: u64,
}

impl ZipfSpec {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.n == 0 || self.n % 8 != 0 {
            return Err(GenError::KeyLength(self.n));
        }
        if self.m >= 8 {
            return Err(GenError::Prefix(self.m));
        }
        if !(self.s.is_finite() && self.s >= 0.0) {
            return Err(GenError::Exponent(self.s));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema::new(vec![ColumnType::FixedString(self.n as u32)]).expect("valid fixed-length schema")
    }

    /// Lazily generated keys, identical for identical specs.
    pub fn keys(&self) -> impl Iterator<Item = Vec<u8>> {
        let sampler = ZipfLetters::new(self.s);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (n, m) = (self.n, self.m);
        (0..self.count).map(move |_| {
            let mut k = vec![FIXED_CHAR; n];
            for word in k.chunks_exact_mut(8) {
                for b in &mut word[m..] {
                    *b = sampler.sample(&mut rng);
                }
            }
            k
        })
    }
}

/// Inverse-CDF sampler over the 26 lower-case letters.
#[derive(Debug, Clone)]
pub struct ZipfLetters {
    cdf: [f64; ALPHABET],
}

impl ZipfLetters {
    pub fn new(s: f64) -> Self {
        let pmf = zipf_pmf(s);
        let mut cdf = [0.0; ALPHABET];
        let mut acc = 0.0;
        for (c, p) in cdf.iter_mut().zip(pmf) {
            acc += p;
            *c = acc;
        }
        cdf[ALPHABET - 1] = 1.0;
        ZipfLetters { cdf }
    }

    #[inline]
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u8 {
        let u: f64 = rng.gen();
        let i = self.cdf.partition_point(|&c| c <= u).min(ALPHABET - 1);
        b'a' + i as u8
    }
}

/// Probability of the letter of each rank, 'a' first.
pub fn zipf_pmf(s: f64) -> [f64; ALPHABET] {
    let mut w = [0.0; ALPHABET];
    for (r, x) in w.iter_mut().enumerate() {
        *x = ((r + 1) as f64).powf(-s);
    }
    let z: f64 = w.iter().sum();
    w.map(|x| x / z)
}

/// Write the dataset for `spec` to `path`.
pub fn zipf_generate(spec: &ZipfSpec, path: impl AsRef<Path>) -> Result<(), GenError> {
    let f = std::fs::File::create(path).map_err(TableError::Io)?;
    zipf_write(spec, f)
}

pub fn zipf_write<W: Write>(spec: &ZipfSpec, w: W) -> Result<(), GenError> {
    spec.validate()?;
    write_dataset(w, &spec.schema(), spec.count, spec.keys())?;
    Ok(())
}

/// The dataset for `spec`, in memory.
pub fn zipf_table(spec: &ZipfSpec) -> Result<Table, GenError> {
    spec.validate()?;
    Ok(Table::from_keys(spec.schema(), spec.keys())?)
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    pub keys: usize,
    pub min_len: usize,
    pub avg_len: f64,
    pub max_len: usize,
    pub full_key_bits: usize,
    pub distinction_bits: usize,
    pub rid_variant_bits: usize,
    pub compression_ratio: f64,
    /// Longest key rounded up to words, plus an 8-byte record ID.
    pub full_sort_key_bytes: usize,
    /// Distinction bits plus record-ID variant bits, rounded up to words.
    pub compressed_sort_key_bytes: usize,
    pub sort_key_ratio: f64,
    pub wcc_full: Option<f64>,
    pub wcc_comp: Option<f64>,
    pub word_comparison_ratio: Option<f64>,
}

/// Size statistics of a table given exact metadata for it, and the word
/// comparison ratio when averages from both sorts are supplied.
pub fn compute_stats(t: &Table, meta: &DsMetadata, wcc: Option<(f64, f64)>) -> DatasetStats {
    let (min_len, max_len, avg_len) = t.min_max_avg_len();
    let full_key_bits = max_len * 8;
    let distinction_bits = meta.dbitmap().count_ones();
    let rid_variant_bits = meta.rid_mask().count_ones() as usize;
    let full_sort_key_bytes = max_len.div_ceil(8) * 8 + 8;
    let compressed_sort_key_bytes = ((distinction_bits + rid_variant_bits).div_ceil(64) * 8).max(8);
    let compression_ratio = if distinction_bits == 0 { 1.0 } else { full_key_bits as f64 / distinction_bits as f64 };
    DatasetStats {
        keys: t.len(),
        min_len,
        avg_len,
        max_len,
        full_key_bits,
        distinction_bits,
        rid_variant_bits,
        compression_ratio,
        full_sort_key_bytes,
        compressed_sort_key_bytes,
        sort_key_ratio: full_sort_key_bytes as f64 / compressed_sort_key_bytes as f64,
        wcc_full: wcc.map(|w| w.0),
        wcc_comp: wcc.map(|w| w.1),
        word_comparison_ratio: wcc.map(|(f, c)| if c == 0.0 { 1.0 } else { f / c }),
    }
}

/// Average words examined per comparison in a single-threaded full-key
/// sort and a compressed-key sort of the same table. Also returns the
/// metadata from the full build.
pub fn measure_word_comparisons(t: &Table, opts: &RebuildOptions) -> Result<(f64, f64, DsMetadata), RebuildError> {
    let opts = RebuildOptions { threads: 1, ..*opts };
    let full_counter = WordCounter::new();
    let full = reconstruct_full(t, &opts, Some(&full_counter))?;
    let comp_counter = WordCounter::new();
    reconstruct_compressed(t, &full.meta, &opts, Some(&comp_counter))?;
    Ok((full_counter.average(), comp_counter.average(), full.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rebuild::reconstruct;

    fn spec(s: f64, n: usize, m: usize, count: u64) -> ZipfSpec {
        ZipfSpec { s, n, m, count, seed: 7 }
    }

    #[test]
    fn validation() {
        assert!(spec(2.5, 48, 0, 1).validate().is_ok());
        assert!(spec(2.5, 48, 8, 1).validate().is_err());
        assert!(spec(2.5, 44, 0, 1).validate().is_err());
        assert!(spec(-1.0, 48, 0, 1).validate().is_err());
    }

    #[test]
    fn word_pattern() {
        for k in spec(2.5, 48, 0, 100).keys() {
            assert_eq!(k.len(), 48);
            assert!(k.iter().all(u8::is_ascii_lowercase));
        }
        let keys: Vec<_> = spec(1.0, 16, 7, 2000).keys().collect();
        for k in &keys {
            for w in k.chunks(8) {
                assert_eq!(&w[..7], b"aaaaaaa");
            }
        }
        // the last byte of each word does vary
        assert!(keys.iter().any(|k| k[7] != b'a') && keys.iter().any(|k| k[15] != b'a'));
    }

    #[test]
    fn deterministic() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        zipf_write(&spec(1.5, 40, 2, 500), &mut a).unwrap();
        zipf_write(&spec(1.5, 40, 2, 500), &mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        zipf_write(&ZipfSpec { seed: 8, ..spec(1.5, 40, 2, 500) }, &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn letter_frequencies_follow_pmf() {
        let pmf = zipf_pmf(1.5);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let z: f64 = (1..=26).map(|r| (r as f64).powf(-1.5)).sum();
        assert!((pmf[0] - 1.0 / z).abs() < 1e-12);
        let sampler = ZipfLetters::new(1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 1_000_000;
        let mut counts = [0u64; ALPHABET];
        for _ in 0..draws {
            counts[(sampler.sample(&mut rng) - b'a') as usize] += 1;
        }
        let mut chi2 = 0.0;
        for (c, p) in counts.iter().zip(pmf) {
            let freq = *c as f64 / draws as f64;
            assert!((freq - p).abs() < 0.01, "{freq} vs {p}");
            let e = p * draws as f64;
            chi2 += (*c as f64 - e).powi(2) / e;
        }
        // 25 degrees of freedom, 0.1% upper tail
        assert!(chi2 < 52.62, "chi-square {chi2}");
    }

    #[test]
    fn stats_formulas() {
        // every bit distinguishes: 0x00..0xFF in one byte
        let s = Schema::new(vec![ColumnType::FixedString(1)]).unwrap();
        let t = Table::from_keys(s, (0..=255u8).map(|b| [b])).unwrap();
        let r = reconstruct(&t, None, &RebuildOptions::default()).unwrap();
        let st = compute_stats(&t, &r.meta, None);
        assert_eq!((st.full_key_bits, st.distinction_bits), (8, 8));
        assert_eq!(st.compression_ratio, 1.0);
        assert_eq!(st.rid_variant_bits, 8);
        assert_eq!((st.full_sort_key_bytes, st.compressed_sort_key_bytes), (16, 8));
        assert_eq!(st.sort_key_ratio, 2.0);
        assert!(st.word_comparison_ratio.is_none());
    }

    #[test]
    fn ratios_at_least_one() {
        let t = zipf_table(&spec(2.5, 48, 0, 20_000)).unwrap();
        let (f, c, meta) = measure_word_comparisons(&t, &RebuildOptions::default()).unwrap();
        let st = compute_stats(&t, &meta, Some((f, c)));
        assert!(st.compression_ratio >= 1.0 && st.sort_key_ratio >= 1.0, "{st:?}");
        assert!(st.wcc_full.unwrap() >= 1.0 && st.wcc_comp.unwrap() >= 1.0);
        assert!(st.word_comparison_ratio.unwrap() > 1.0);
    }
}
