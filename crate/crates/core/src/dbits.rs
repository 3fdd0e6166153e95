//! Distinction bits.
//!
//! The distinction bit position of two keys is the most significant bit
//! position at which they differ. Over a sorted key set, the positions of
//! adjacent pairs already cover every pair, and gathering the key bits at
//! those positions (or at any superset of them) keeps enough information to
//! reproduce the sorted order. This module computes those positions,
//! compresses keys down to them and maps compressed positions back.

use std::cmp::Ordering;

use thiserror::Error;

use crate::bits::{self, BitWriter, Extract};
use crate::keycodec::{compare_keys, IndexKey};

/// Zero-based bit index into a key; 0 is the MSB of byte 0.
pub type BitPos = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DbitsError {
    #[error("adjacent keys at index {0} are equal")]
    DuplicateKey(usize),
    #[error("adjacent keys at index {0} are out of order")]
    Unsorted(usize),
    #[error("{positions} candidate positions exceed the exhaustive search limit of {limit}")]
    SearchTooLarge { positions: usize, limit: usize },
}

/// Fixed-length bitmap over key bit positions, MSB-first within words.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Bitmap {
    len: usize,
    words: Vec<u64>,
}

impl Bitmap {
    pub fn new(len: usize) -> Self {
        Bitmap { len, words: vec![0; len.div_ceil(64)] }
    }

    pub fn from_positions(len: usize, positions: impl IntoIterator<Item = BitPos>) -> Self {
        let mut b = Bitmap::new(len);
        for p in positions {
            b.set(p);
        }
        b
    }

    /// Bitmap of `len` bits taken from big-endian key words.
    pub fn from_words(len: usize, words: &[u64]) -> Self {
        let mut b = Bitmap::new(len);
        for (dst, src) in b.words.iter_mut().zip(words) {
            *dst = *src;
        }
        b.trim();
        b
    }

    fn trim(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= u64::MAX << (64 - rem);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, pos: BitPos) -> bool {
        let p = pos as usize;
        p < self.len && self.words[p / 64] & (1u64 << (63 - p % 64)) != 0
    }

    /// Set `pos`; returns true if the bit was previously clear.
    ///
    /// # Panics
    /// If `pos` is out of range.
    pub fn set(&mut self, pos: BitPos) -> bool {
        let p = pos as usize;
        assert!(p < self.len, "bit {p} outside bitmap of {} bits", self.len);
        let m = 1u64 << (63 - p % 64);
        let was = self.words[p / 64] & m != 0;
        self.words[p / 64] |= m;
        !was
    }

    pub fn clear(&mut self, pos: BitPos) {
        let p = pos as usize;
        if p < self.len {
            self.words[p / 64] &= !(1u64 << (63 - p % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = BitPos> + '_ {
        self.words.iter().enumerate().flat_map(|(i, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let lz = w.leading_zeros();
                w &= !(1u64 << (63 - lz));
                Some(i as u32 * 64 + lz)
            })
        })
    }

    pub fn is_subset_of(&self, other: &Bitmap) -> bool {
        self.words.iter().zip(other.words.iter().chain(std::iter::repeat(&0))).all(|(a, b)| a & !b == 0)
    }

    /// OR in big-endian key words (extra words beyond the bitmap are ignored).
    pub fn or_words(&mut self, words: &[u64]) {
        for (dst, src) in self.words.iter_mut().zip(words) {
            *dst |= *src;
        }
        self.trim();
    }

    pub fn union_with(&mut self, other: &Bitmap) {
        self.or_words(&other.words);
    }

    pub fn intersect_with(&mut self, other: &Bitmap) {
        for (i, dst) in self.words.iter_mut().enumerate() {
            *dst &= other.words.get(i).copied().unwrap_or(0);
        }
    }

    /// Bytes with position 0 at the MSB of byte 0; `len` must be a multiple of 8.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len.div_ceil(8);
        self.words.iter().flat_map(|w| w.to_be_bytes()).take(n).collect()
    }

    pub fn from_bytes(len: usize, bytes: &[u8]) -> Self {
        Bitmap::from_words(len, &crate::keycodec::bytes_to_words(bytes))
    }

    /// Bitmap with each set bit `d` widened to cover `d..=d+extra`.
    pub fn spread(&self, extra: u32) -> Bitmap {
        let mut out = self.clone();
        for p in self.iter_ones() {
            let end = (p as usize + extra as usize + 1).min(self.len);
            for q in p as usize..end {
                out.set(q as BitPos);
            }
        }
        out
    }
}

impl std::fmt::Debug for Bitmap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bitmap").field("len", &self.len).field("ones", &self.iter_ones().collect::<Vec<_>>()).finish()
    }
}

/// Most significant differing bit of two zero-padded keys, `None` if equal.
pub fn dbit_pair(a: &[u8], b: &[u8]) -> Option<BitPos> {
    let words = a.len().max(b.len()).div_ceil(8);
    (0..words).find_map(|i| {
        let x = crate::keycodec::load_word(a, i * 8) ^ crate::keycodec::load_word(b, i * 8);
        (x != 0).then(|| i as u32 * 64 + x.leading_zeros())
    })
}

/// [`dbit_pair`] on keys held as big-endian words.
#[inline]
pub fn dbit_words(a: &[u64], b: &[u64]) -> Option<BitPos> {
    let n = a.len().max(b.len());
    for i in 0..n {
        let x = a.get(i).copied().unwrap_or(0) ^ b.get(i).copied().unwrap_or(0);
        if x != 0 {
            return Some(i as u32 * 64 + x.leading_zeros());
        }
    }
    None
}

/// D-bits of adjacent pairs of strictly increasing keys.
pub fn adjacent_dbits<K: AsRef<[u8]>>(sorted: &[K]) -> Result<Vec<BitPos>, DbitsError> {
    sorted
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (a, b) = (w[0].as_ref(), w[1].as_ref());
            match compare_keys(a, b).0 {
                Ordering::Less => Ok(dbit_pair(a, b).expect("distinct keys differ somewhere")),
                Ordering::Equal => Err(DbitsError::DuplicateKey(i)),
                Ordering::Greater => Err(DbitsError::Unsorted(i)),
            }
        })
        .collect()
}

/// Bitmap of every distinction bit position of a strictly increasing key set.
pub fn build_dbitmap<K: AsRef<[u8]>>(sorted: &[K], key_bits: usize) -> Result<Bitmap, DbitsError> {
    let d = adjacent_dbits(sorted)?;
    Ok(Bitmap::from_positions(key_bits, d))
}

/// OR over `key XOR reference`; zero bits are invariant positions.
pub fn build_variant_bitmap<'a, K: AsRef<[u8]> + 'a>(
    keys: impl IntoIterator<Item = &'a K>,
    reference: &[u8],
    key_bits: usize,
) -> Bitmap {
    let words = key_bits.div_ceil(64);
    let refw = padded_words(reference, words);
    let mut acc = vec![0u64; words];
    for k in keys {
        let k = k.as_ref();
        for (i, a) in acc.iter_mut().enumerate() {
            *a |= crate::keycodec::load_word(k, i * 8) ^ refw[i];
        }
    }
    Bitmap::from_words(key_bits, &acc)
}

pub(crate) fn padded_words(bytes: &[u8], words: usize) -> Vec<u64> {
    (0..words).map(|i| crate::keycodec::load_word(bytes, i * 8)).collect()
}

impl AsRef<[u8]> for IndexKey {
    fn as_ref(&self) -> &[u8] {
        self.as_bytes()
    }
}

/// Gathered key bits followed by record-ID bits, left-packed into words.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CompressedKey {
    words: Vec<u64>,
    bits: u32,
}

impl CompressedKey {
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit_len(&self) -> u32 {
        self.bits
    }

    pub fn bit(&self, i: u32) -> bool {
        bits::read_bits(&self.words, i as usize, 1) == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Mask {
    byte: u32,
    bits: u64,
    count: u32,
}

/// Precomputed mask pipeline for one bitmap.
///
/// The bitmap is cut into 8-byte masks, each starting at the byte holding
/// the next set bit not covered by the previous mask. Compressing a key
/// extracts each mask's bits from the key word at the same byte offset and
/// concatenates the runs, then appends the record-ID bits selected by the
/// record-ID mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractPlan {
    masks: Vec<Mask>,
    key_bits: u32,
    rid_mask: u64,
    rid_bits: u32,
}

impl ExtractPlan {
    pub fn new(bitmap: &Bitmap, rid_mask: u64) -> Self {
        let mut masks = Vec::new();
        let mut next = bitmap.iter_ones().next();
        while let Some(p) = next {
            let byte = p / 8;
            let bits = bits::read_bits(bitmap.words(), byte as usize * 8, 64);
            masks.push(Mask { byte, bits, count: bits.count_ones() });
            let limit = byte * 8 + 64;
            next = bitmap.iter_ones().find(|&q| q >= limit);
        }
        ExtractPlan { key_bits: masks.iter().map(|m| m.count).sum(), masks, rid_mask, rid_bits: rid_mask.count_ones() }
    }

    pub fn mask_count(&self) -> usize {
        self.masks.len()
    }

    /// (starting byte, mask) pairs in pipeline order.
    pub fn masks(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.masks.iter().map(|m| (m.byte, m.bits))
    }

    /// Compressed bits contributed by the key.
    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    pub fn rid_bits(&self) -> u32 {
        self.rid_bits
    }

    pub fn rid_mask(&self) -> u64 {
        self.rid_mask
    }

    pub fn total_bits(&self) -> u32 {
        self.key_bits + self.rid_bits
    }

    /// Words per compressed key.
    pub fn words(&self) -> usize {
        (self.total_bits() as usize).div_ceil(64).max(1)
    }

    /// Compress a key held as big-endian words into `out` (zeroed, `words()` long).
    #[inline]
    pub fn compress_words_into(&self, key: &[u64], rid: u64, out: &mut [u64]) {
        self.compress_with::<bits::Native>(key, rid, out)
    }

    #[inline]
    pub fn compress_with<E: Extract>(&self, key: &[u64], rid: u64, out: &mut [u64]) {
        let mut w = BitWriter::new(out);
        for m in &self.masks {
            let src = bits::word_at_byte(key, m.byte as usize);
            w.push(E::pext(src, m.bits), m.count);
        }
        w.push(E::pext(rid, self.rid_mask), self.rid_bits);
    }

    pub fn compress(&self, key: &[u8], rid: u64) -> CompressedKey {
        let words = crate::keycodec::bytes_to_words(key);
        let mut out = vec![0u64; self.words()];
        self.compress_words_into(&words, rid, &mut out);
        CompressedKey { words: out, bits: self.total_bits() }
    }

    pub fn compress_portable(&self, key: &[u8], rid: u64) -> CompressedKey {
        let words = crate::keycodec::bytes_to_words(key);
        let mut out = vec![0u64; self.words()];
        self.compress_with::<bits::Portable>(&words, rid, &mut out);
        CompressedKey { words: out, bits: self.total_bits() }
    }

    /// Record ID recovered from the trailing bits of a compressed key.
    /// Bits outside the record-ID mask read as 0.
    #[inline]
    pub fn record_id(&self, compressed: &[u64]) -> u64 {
        let v = if self.rid_bits == 0 { 0 } else { bits::read_bits(compressed, self.key_bits as usize, self.rid_bits) };
        bits::pdep(v, self.rid_mask)
    }
}

/// Gather `key`'s bits at the set positions of `dbitmap`, then the record-ID
/// bits selected by `rid_mask`.
pub fn compress(key: &IndexKey, dbitmap: &Bitmap, record_id: u64, rid_mask: u64) -> CompressedKey {
    ExtractPlan::new(dbitmap, rid_mask).compress(key.as_bytes(), record_id)
}

/// Positions of the set bits of a bitmap, in order: entry `i` is the
/// full-key position of compressed bit `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DOffsetTable(Vec<BitPos>);

impl DOffsetTable {
    pub fn as_slice(&self) -> &[BitPos] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Full-key position of a compressed-key bit index, `None` past the key bits.
    #[inline]
    pub fn get(&self, compressed_pos: BitPos) -> Option<BitPos> {
        self.0.get(compressed_pos as usize).copied()
    }
}

pub fn build_doffset(dbitmap: &Bitmap) -> DOffsetTable {
    DOffsetTable(dbitmap.iter_ones().collect())
}

/// Minimum set of bit positions whose bit slice orders `keys` exactly as the
/// full keys, found by trying every subset of the variant positions in
/// increasing size (ties broken by the lexicographically smallest set).
pub fn min_positions_bruteforce(keys: &[IndexKey], limit: usize) -> Result<Vec<BitPos>, DbitsError> {
    let mut sorted: Vec<&[u8]> = keys.iter().map(IndexKey::as_bytes).collect();
    sorted.sort_by(|a, b| compare_keys(a, b).0);
    sorted.dedup_by(|a, b| compare_keys(a, b).0 == Ordering::Equal);
    if sorted.len() < 2 {
        return Ok(Vec::new());
    }
    let bits = sorted.iter().map(|k| k.len()).max().unwrap_or(0) * 8;
    let variant = build_variant_bitmap(sorted.iter(), sorted[0], bits.max(1));
    let cand: Vec<BitPos> = variant.iter_ones().collect();
    if cand.len() > limit {
        return Err(DbitsError::SearchTooLarge { positions: cand.len(), limit });
    }
    let slice_lt = |a: &[u8], b: &[u8], set: &[BitPos]| {
        for &p in set {
            let (x, y) = (crate::keycodec::bit_of(a, p as usize), crate::keycodec::bit_of(b, p as usize));
            if x != y {
                return y;
            }
        }
        false
    };
    for size in 1..=cand.len() {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            let set: Vec<BitPos> = idx.iter().map(|&i| cand[i]).collect();
            if sorted.windows(2).all(|w| slice_lt(w[0], w[1], &set)) {
                return Ok(set);
            }
            // next combination in lexicographic order
            let Some(i) = (0..size).rev().find(|&i| idx[i] != i + cand.len() - size) else { break };
            idx[i] += 1;
            for j in i + 1..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    unreachable!("the full variant set always orders distinct keys")
}
