//! Persistent compression state of an index: the D-bitmap, the variant
//! bitmap, a reference key and the variant bits of record IDs.
//!
//! The D-bitmap is a superset of the true distinction positions. Inserts
//! add at most one position; deletes leave everything alone; a rebuild
//! recomputes the state from the freshly sorted keys, which can only drop
//! positions.
//!
//! On-disk layout (integers little endian):
//!
//! ```text
//! "DSM1" u16 version u32 key_bits [dbitmap; key_bits/8] [variant; key_bits/8]
//! u32 ref_len [ref; ref_len] u64 rid_mask
//! ```

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::dbits::{dbit_pair, dbit_words, BitPos, Bitmap, DOffsetTable, ExtractPlan};
use crate::keycodec::IndexKey;

pub const META_MAGIC: &[u8; 4] = b"DSM1";
pub const META_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad metadata magic")]
    BadMagic,
    #[error("unsupported metadata version {0}")]
    BadVersion(u16),
    #[error("metadata truncated")]
    Truncated,
    #[error("{0} trailing bytes after metadata")]
    Trailing(usize),
    #[error("metadata is for {got}-bit keys, schema has {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("key bit length {0} is not a whole number of bytes")]
    BadKeyBits(usize),
    #[error("distinction bitmap is not contained in the variant bitmap")]
    NotSubset,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DsMetadata {
    dbitmap: Bitmap,
    variant: Bitmap,
    reference: IndexKey,
    rid_mask: u64,
}

/// Outcome of [`DsMetadata::on_insert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InsertEffect {
    /// Position written into the D-bitmap, if it was not already set.
    pub newly_set: Option<BitPos>,
}

impl DsMetadata {
    /// State of an index with no keys.
    pub fn empty(key_bits: usize) -> Self {
        DsMetadata {
            dbitmap: Bitmap::new(key_bits),
            variant: Bitmap::new(key_bits),
            reference: IndexKey::default(),
            rid_mask: 0,
        }
    }

    pub fn from_parts(dbitmap: Bitmap, variant: Bitmap, reference: IndexKey, rid_mask: u64) -> Result<Self, MetaError> {
        if dbitmap.len() != variant.len() {
            return Err(MetaError::SizeMismatch { expected: dbitmap.len(), got: variant.len() });
        }
        if !dbitmap.is_subset_of(&variant) {
            return Err(MetaError::NotSubset);
        }
        Ok(DsMetadata { dbitmap, variant, reference, rid_mask })
    }

    /// Exact state for a set of sorted keys (duplicates allowed) with their
    /// record IDs. The first key becomes the reference.
    pub fn compute<K: AsRef<[u8]>>(sorted: &[K], rids: impl IntoIterator<Item = u64>, key_bits: usize) -> Self {
        let mut dbitmap = Bitmap::new(key_bits);
        for w in sorted.windows(2) {
            if let Some(d) = dbit_pair(w[0].as_ref(), w[1].as_ref()) {
                dbitmap.set(d);
            }
        }
        let reference = sorted.first().map(|k| IndexKey::from(k.as_ref())).unwrap_or_default();
        let variant = crate::dbits::build_variant_bitmap(sorted.iter(), reference.as_bytes(), key_bits);
        let rid_mask = rids.into_iter().fold(0, |a, r| a | r);
        DsMetadata { dbitmap, variant, reference, rid_mask }
    }

    pub fn key_bits(&self) -> usize {
        self.dbitmap.len()
    }

    pub fn dbitmap(&self) -> &Bitmap {
        &self.dbitmap
    }

    pub fn variant(&self) -> &Bitmap {
        &self.variant
    }

    pub fn reference(&self) -> &IndexKey {
        &self.reference
    }

    /// Record-ID bits that vary, taking 0 as the reference ID.
    pub fn rid_mask(&self) -> u64 {
        self.rid_mask
    }

    /// Record the insertion of `key` between its neighbours.
    ///
    /// By the minimum property of adjacent D-bits, D(prev, next) equals the
    /// smaller of D(prev, key) and D(key, next) and is already present, so
    /// only the larger one can be new.
    pub fn on_insert(&mut self, prev: Option<&[u8]>, key: &[u8], next: Option<&[u8]>, rid: u64) -> InsertEffect {
        let a = prev.and_then(|p| dbit_pair(p, key));
        let b = next.and_then(|n| dbit_pair(key, n));
        let mut effect = InsertEffect::default();
        let target = match (a, b) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (x, y) => x.or(y),
        };
        if let Some(d) = target {
            if self.dbitmap.set(d) {
                effect.newly_set = Some(d);
            }
        }
        if self.reference.is_empty() && prev.is_none() && next.is_none() {
            self.reference = IndexKey::from(key);
        } else {
            self.merge_variant(key);
        }
        self.rid_mask |= rid;
        effect
    }

    /// Deletes leave the state untouched: the D-bit of the new neighbour pair
    /// is the smaller of the two old ones and stays set.
    pub fn on_delete(&mut self, _key: &[u8]) {}

    fn merge_variant(&mut self, key: &[u8]) {
        let n = self.variant.words().len();
        let x: Vec<u64> = (0..n)
            .map(|i| crate::keycodec::load_word(key, i * 8) ^ crate::keycodec::load_word(self.reference.as_bytes(), i * 8))
            .collect();
        self.variant.or_words(&x);
    }

    /// Fresh state after a rebuild. `sorted_compressed` are the sort keys
    /// produced with `plan`, whose source bitmap `doffset` was built from;
    /// `keys` yields every current key (the first is the new reference) with
    /// its record ID.
    pub fn recompute<'a, 'k>(
        &self,
        plan: &ExtractPlan,
        doffset: &DOffsetTable,
        sorted_compressed: impl IntoIterator<Item = &'a [u64]>,
        keys: impl IntoIterator<Item = (&'k [u8], u64)>,
    ) -> DsMetadata {
        let mut dbitmap = Bitmap::new(self.key_bits());
        let mut prev: Option<&[u64]> = None;
        for c in sorted_compressed {
            if let Some(p) = prev {
                if let Some(d) = compressed_dbit(plan, doffset, p, c) {
                    dbitmap.set(d);
                }
            }
            prev = Some(c);
        }
        let mut acc = VariantAccumulator::new(self.key_bits());
        for (k, rid) in keys {
            acc.add(k, rid);
        }
        let (variant, reference, rid_mask) = acc.finish();
        DsMetadata { dbitmap, variant, reference, rid_mask }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 2 + 4 + self.key_bits() / 4 + 4 + self.reference.len() + 8);
        out.extend_from_slice(META_MAGIC);
        out.extend_from_slice(&META_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.key_bits() as u32).to_le_bytes());
        out.extend_from_slice(&self.dbitmap.to_bytes());
        out.extend_from_slice(&self.variant.to_bytes());
        out.extend_from_slice(&(self.reference.len() as u32).to_le_bytes());
        out.extend_from_slice(self.reference.as_bytes());
        out.extend_from_slice(&self.rid_mask.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MetaError> {
        let mut r = Reader(bytes);
        if r.take(4)? != META_MAGIC {
            return Err(MetaError::BadMagic);
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != META_VERSION {
            return Err(MetaError::BadVersion(version));
        }
        let key_bits = r.u32()? as usize;
        if key_bits % 8 != 0 {
            return Err(MetaError::BadKeyBits(key_bits));
        }
        let dbitmap = Bitmap::from_bytes(key_bits, r.take(key_bits / 8)?);
        let variant = Bitmap::from_bytes(key_bits, r.take(key_bits / 8)?);
        let rlen = r.u32()? as usize;
        let reference = IndexKey::from(r.take(rlen)?);
        let rid_mask = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if !r.0.is_empty() {
            return Err(MetaError::Trailing(r.0.len()));
        }
        DsMetadata::from_parts(dbitmap, variant, reference, rid_mask)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetaError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetaError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Load and check the key width against a schema's.
    pub fn load_for(path: impl AsRef<Path>, key_bits: usize) -> Result<Self, MetaError> {
        let m = Self::load(path)?;
        if m.key_bits() != key_bits {
            return Err(MetaError::SizeMismatch { expected: key_bits, got: m.key_bits() });
        }
        Ok(m)
    }

    /// Human-readable dump: one line per 8 bytes, bits grouped by byte.
    pub fn pretty(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "key bits        {}", self.key_bits());
        let _ = writeln!(s, "D-bits set      {}", self.dbitmap.count_ones());
        let _ = writeln!(s, "variant bits    {}", self.variant.count_ones());
        let _ = writeln!(s, "rid mask        {:#018x} ({} bits)", self.rid_mask, self.rid_mask.count_ones());
        let _ = writeln!(s, "reference       {}", hex(self.reference.as_bytes()));
        for (name, bm) in [("D-bitmap", &self.dbitmap), ("variant bitmap", &self.variant)] {
            let _ = writeln!(s, "{name}:");
            let _ = write!(s, "{}", bitmap_table(bm));
        }
        s
    }
}

/// Rows of 8 bytes, each byte printed MSB first, as "bytes a-b  bits".
pub fn bitmap_table(bm: &Bitmap) -> String {
    let bytes = bm.to_bytes();
    let mut s = String::new();
    for (row, chunk) in bytes.chunks(8).enumerate() {
        let first = row * 8 + 1;
        let last = first + chunk.len() - 1;
        let bits: Vec<String> = chunk.iter().map(|b| format!("{b:08b}")).collect();
        let _ = writeln!(s, "  {:>9}  {}", format!("{first}-{last}"), bits.join(" "));
    }
    s
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

/// Full-key D-bit of two adjacent sort keys, `None` when the key parts are
/// equal (the difference is in the record-ID bits, or nowhere).
#[inline]
pub fn compressed_dbit(plan: &ExtractPlan, doffset: &DOffsetTable, a: &[u64], b: &[u64]) -> Option<BitPos> {
    let d = dbit_words(a, b)?;
    if d >= plan.key_bits() {
        return None;
    }
    doffset.get(d)
}

/// XOR/OR pass for the variant bitmap plus the record-ID mask. The first
/// key added becomes the reference.
#[derive(Debug, Clone)]
pub struct VariantAccumulator {
    key_bits: usize,
    reference: Option<(IndexKey, Vec<u64>)>,
    acc: Vec<u64>,
    rid_mask: u64,
}

impl VariantAccumulator {
    pub fn new(key_bits: usize) -> Self {
        VariantAccumulator { key_bits, reference: None, acc: vec![0; key_bits.div_ceil(64)], rid_mask: 0 }
    }

    pub fn with_reference(key_bits: usize, reference: &[u8]) -> Self {
        let mut a = Self::new(key_bits);
        a.reference = Some((IndexKey::from(reference), crate::dbits::padded_words(reference, a.acc.len())));
        a
    }

    #[inline]
    pub fn add(&mut self, key: &[u8], rid: u64) {
        let n = self.acc.len();
        let (_, rw) = self
            .reference
            .get_or_insert_with(|| (IndexKey::from(key), crate::dbits::padded_words(key, n)));
        for (i, a) in self.acc.iter_mut().enumerate() {
            *a |= crate::keycodec::load_word(key, i * 8) ^ rw[i];
        }
        self.rid_mask |= rid;
    }

    /// Same as [`add`](Self::add) for a key already held as words.
    #[inline]
    pub fn add_words(&mut self, key: &[u64], rid: u64) {
        let n = self.acc.len();
        if self.reference.is_none() {
            let bytes: Vec<u8> = key.iter().flat_map(|w| w.to_be_bytes()).collect();
            self.reference = Some((IndexKey::from(bytes.as_slice()), crate::dbits::padded_words(&bytes, n)));
        }
        let rw = &self.reference.as_ref().unwrap().1;
        for (i, a) in self.acc.iter_mut().enumerate() {
            *a |= key.get(i).copied().unwrap_or(0) ^ rw[i];
        }
        self.rid_mask |= rid;
    }

    pub fn merge(&mut self, other: &VariantAccumulator) {
        for (a, b) in self.acc.iter_mut().zip(&other.acc) {
            *a |= b;
        }
        self.rid_mask |= other.rid_mask;
    }

    pub fn finish(self) -> (Bitmap, IndexKey, u64) {
        let reference = self.reference.map(|r| r.0).unwrap_or_default();
        (Bitmap::from_words(self.key_bits, &self.acc), reference, self.rid_mask)
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MetaError> {
        if self.0.len() < n {
            return Err(MetaError::Truncated);
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }

    fn u32(&mut self) -> Result<u32, MetaError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
