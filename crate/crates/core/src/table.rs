//! In-memory table of encoded index keys, and the dataset file formats.
//!
//! Rows live in 64 KiB pages as zero-padded big-endian words so that
//! extraction and full-key comparison can load whole words directly. A
//! record ID is the row's insertion ordinal and doubles as the handle the
//! index tree stores to reach a key.
//!
//! Binary dataset layout (integers little endian):
//!
//! ```text
//! "DKS1"  u32 column_count  { u8 tag  u32 a  u32 b } * column_count
//! u64 record_count  { u32 len  [u8; len] } * record_count
//! ```
//!
//! Tags: 1 int32, 2 int64, 3 float64, 4 decimal(a, b), 5 char(a),
//! 6 varchar(a). Unused parameters are 0. A file that does not start with
//! the magic is read as newline-delimited text, one varchar key per line.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::keycodec::{self, ColumnType, IndexKey, KeyError, Schema};

pub const PAGE_BYTES: usize = 64 * 1024;
const PAGE_WORDS: usize = PAGE_BYTES / 8;
pub const DATASET_MAGIC: &[u8; 4] = b"DKS1";

pub type RecordId = u64;

#[derive(Debug, Error)]
pub enum TableError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad dataset magic")]
    BadMagic,
    #[error("dataset truncated")]
    Truncated,
    #[error("unknown column tag {0}")]
    BadColumnTag(u8),
    #[error("key of {len} bytes exceeds schema bound of {max}")]
    KeyTooLong { len: usize, max: usize },
    #[error("record {0} does not exist or was deleted")]
    NoSuchRecord(RecordId),
    #[error(transparent)]
    Key(#[from] KeyError),
}

#[derive(Debug, Clone, Copy)]
struct RowLoc {
    page: u32,
    word: u32,
    len: u32,
    live: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Page {
    words: Vec<u64>,
    first_row: RecordId,
    rows: u32,
    live: u32,
}

impl Page {
    /// Record IDs stored on this page (deleted rows included).
    pub fn rows(&self) -> Range<RecordId> {
        self.first_row..self.first_row + self.rows as u64
    }

    pub fn live_rows(&self) -> usize {
        self.live as usize
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    schema: Schema,
    max_key_bytes: usize,
    pages: Vec<Page>,
    rows: Vec<RowLoc>,
    live: usize,
}

impl Table {
    pub fn new(schema: Schema) -> Self {
        let max_key_bytes = schema.max_key_bytes();
        assert!(max_key_bytes <= PAGE_BYTES, "schema keys must fit in a page");
        Table { schema, max_key_bytes, pages: Vec::new(), rows: Vec::new(), live: 0 }
    }

    pub fn from_keys<K: AsRef<[u8]>>(schema: Schema, keys: impl IntoIterator<Item = K>) -> Result<Self, TableError> {
        let mut t = Table::new(schema);
        for k in keys {
            t.push(k.as_ref())?;
        }
        Ok(t)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    /// Padded key width in bits.
    pub fn key_bits(&self) -> usize {
        self.schema.key_bits()
    }

    /// Words in a maximal key.
    pub fn key_words_max(&self) -> usize {
        self.max_key_bytes.div_ceil(8)
    }

    pub fn pages(&self) -> &[Page] {
        &self.pages
    }

    /// Number of live rows.
    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    /// Upper bound (exclusive) on record IDs ever issued.
    pub fn rid_limit(&self) -> RecordId {
        self.rows.len() as RecordId
    }

    /// Append an encoded key; returns its record ID.
    pub fn push(&mut self, key: &[u8]) -> Result<RecordId, TableError> {
        if key.len() > self.max_key_bytes {
            return Err(TableError::KeyTooLong { len: key.len(), max: self.max_key_bytes });
        }
        let need = key.len().div_ceil(8);
        let rid = self.rows.len() as RecordId;
        if self.pages.last().is_none_or(|p| p.words.len() + need > PAGE_WORDS) {
            self.pages.push(Page { words: Vec::with_capacity(PAGE_WORDS), first_row: rid, rows: 0, live: 0 });
        }
        let page_no = self.pages.len() - 1;
        let page = self.pages.last_mut().unwrap();
        let word = page.words.len();
        page.words.extend((0..need).map(|i| keycodec::load_word(key, i * 8)));
        page.rows += 1;
        page.live += 1;
        self.rows.push(RowLoc { page: page_no as u32, word: word as u32, len: key.len() as u32, live: true });
        self.live += 1;
        Ok(rid)
    }

    /// Tombstone a row. Its key stays readable for handles that still hold it.
    pub fn delete(&mut self, rid: RecordId) -> Result<(), TableError> {
        let loc = self.rows.get_mut(rid as usize).filter(|r| r.live).ok_or(TableError::NoSuchRecord(rid))?;
        loc.live = false;
        self.pages[loc.page as usize].live -= 1;
        self.live -= 1;
        Ok(())
    }

    pub fn is_live(&self, rid: RecordId) -> bool {
        self.rows.get(rid as usize).is_some_and(|r| r.live)
    }

    /// Key words (zero padded to a word boundary, not to the schema maximum).
    #[inline]
    pub fn key_words(&self, rid: RecordId) -> &[u64] {
        let loc = self.rows[rid as usize];
        let start = loc.word as usize;
        &self.pages[loc.page as usize].words[start..start + (loc.len as usize).div_ceil(8)]
    }

    #[inline]
    pub fn key_len(&self, rid: RecordId) -> usize {
        self.rows[rid as usize].len as usize
    }

    pub fn key(&self, rid: RecordId) -> IndexKey {
        let len = self.key_len(rid);
        let mut bytes: Vec<u8> = self.key_words(rid).iter().flat_map(|w| w.to_be_bytes()).collect();
        bytes.truncate(len);
        IndexKey::new(bytes)
    }

    /// Live record IDs in page order.
    pub fn live_rids(&self) -> impl Iterator<Item = RecordId> + '_ {
        self.rows.iter().enumerate().filter(|(_, r)| r.live).map(|(i, _)| i as RecordId)
    }

    /// Live record IDs of one page.
    pub fn page_live_rids(&self, page: &Page) -> impl Iterator<Item = RecordId> + '_ {
        page.rows().filter(|&r| self.rows[r as usize].live)
    }

    pub fn min_max_avg_len(&self) -> (usize, usize, f64) {
        let mut min = usize::MAX;
        let mut max = 0;
        let mut sum = 0usize;
        for rid in self.live_rids() {
            let l = self.key_len(rid);
            min = min.min(l);
            max = max.max(l);
            sum += l;
        }
        if self.live == 0 {
            return (0, 0, 0.0);
        }
        (min, max, sum as f64 / self.live as f64)
    }

    /// Write the live rows as a binary dataset.
    pub fn write_dataset<W: Write>(&self, w: W) -> Result<(), TableError> {
        let keys = self.live_rids().map(|r| self.key(r));
        write_dataset(w, &self.schema, self.live as u64, keys)
    }
}

fn column_tag(c: &ColumnType) -> (u8, u32, u32) {
    match *c {
        ColumnType::Int32 => (1, 0, 0),
        ColumnType::Int64 => (2, 0, 0),
        ColumnType::Float64 => (3, 0, 0),
        ColumnType::Decimal { precision, scale } => (4, precision as u32, scale as u32),
        ColumnType::FixedString(len) => (5, len, 0),
        ColumnType::VarString(max) => (6, max, 0),
    }
}

fn column_from_tag(tag: u8, a: u32, b: u32) -> Result<ColumnType, TableError> {
    Ok(match tag {
        1 => ColumnType::Int32,
        2 => ColumnType::Int64,
        3 => ColumnType::Float64,
        4 => ColumnType::decimal(
            u8::try_from(a).map_err(|_| KeyError::InvalidType(format!("decimal precision {a}")))?,
            u8::try_from(b).map_err(|_| KeyError::InvalidType(format!("decimal scale {b}")))?,
        )?,
        5 => ColumnType::FixedString(a),
        6 => ColumnType::VarString(a),
        t => return Err(TableError::BadColumnTag(t)),
    })
}

pub fn write_dataset<W: Write, K: AsRef<[u8]>>(
    w: W,
    schema: &Schema,
    count: u64,
    keys: impl IntoIterator<Item = K>,
) -> Result<(), TableError> {
    let mut w = io::BufWriter::new(w);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(schema.columns().len() as u32).to_le_bytes())?;
    for c in schema.columns() {
        let (tag, a, b) = column_tag(c);
        w.write_all(&[tag])?;
        w.write_all(&a.to_le_bytes())?;
        w.write_all(&b.to_le_bytes())?;
    }
    w.write_all(&count.to_le_bytes())?;
    let max = schema.max_key_bytes();
    let mut written = 0u64;
    for k in keys {
        let k = k.as_ref();
        if k.len() > max {
            return Err(TableError::KeyTooLong { len: k.len(), max });
        }
        w.write_all(&(k.len() as u32).to_le_bytes())?;
        w.write_all(k)?;
        written += 1;
    }
    if written != count {
        return Err(TableError::Io(io::Error::new(io::ErrorKind::InvalidInput, "record count mismatch")));
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), TableError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TableError::Truncated,
        _ => TableError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TableError> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Read a binary dataset (the magic included).
pub fn read_dataset<R: Read>(r: R) -> Result<Table, TableError> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(TableError::BadMagic);
    }
    read_body(&mut r)
}

fn read_body<R: Read>(r: &mut R) -> Result<Table, TableError> {
    let ncols = read_u32(r)?;
    let mut cols = Vec::with_capacity(ncols.min(1024) as usize);
    for _ in 0..ncols {
        let mut tag = [0u8; 1];
        read_exact_or_truncated(r, &mut tag)?;
        let a = read_u32(r)?;
        let b = read_u32(r)?;
        cols.push(column_from_tag(tag[0], a, b)?);
    }
    let schema = Schema::new(cols)?;
    let mut cnt = [0u8; 8];
    read_exact_or_truncated(r, &mut cnt)?;
    let count = u64::from_le_bytes(cnt);
    let mut table = Table::new(schema);
    let max = table.max_key_bytes;
    let mut buf = Vec::with_capacity(max);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > max {
            return Err(TableError::KeyTooLong { len, max });
        }
        buf.resize(len, 0);
        read_exact_or_truncated(r, &mut buf)?;
        table.push(&buf)?;
    }
    Ok(table)
}

/// Newline-delimited strings as a single varchar column sized to the longest line.
pub fn read_text<R: Read>(r: R) -> Result<Table, TableError> {
    let mut lines = Vec::new();
    for line in BufReader::new(r).split(b'\n') {
        let mut line = line?;
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        lines.push(line);
    }
    let maxlen = lines.iter().map(Vec::len).max().unwrap_or(0);
    let schema = Schema::new(vec![ColumnType::VarString(maxlen as u32)])?;
    let mut table = Table::new(schema);
    let mut key = Vec::with_capacity(maxlen + 1);
    for l in &lines {
        key.clear();
        keycodec::encode_varstring(l, maxlen, &mut key)?;
        table.push(&key)?;
    }
    Ok(table)
}

/// Load a dataset file, binary or text depending on its first bytes.
pub fn load(path: impl AsRef<Path>) -> Result<Table, TableError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    let n = f.read(&mut magic)?;
    if n == 4 && &magic == DATASET_MAGIC {
        return read_body(&mut BufReader::new(f));
    }
    let head = io::Cursor::new(magic[..n].to_vec());
    read_text(head.chain(f))
}

pub fn save(table: &Table, path: impl AsRef<Path>) -> Result<(), TableError> {
    table.write_dataset(std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::new(vec![ColumnType::Int32, ColumnType::VarString(20)]).unwrap()
    }

    #[test]
    fn push_and_read_back() {
        let mut t = Table::new(schema());
        let a = t.push(b"\x80\0\0\x01abc\0").unwrap();
        let b = t.push(b"\x80\0\0\x02\0").unwrap();
        assert_eq!((a, b), (0, 1));
        assert_eq!(t.key(a).as_bytes(), b"\x80\0\0\x01abc\0");
        assert_eq!(t.key_words(b), &[0x8000_0002_0000_0000]);
        assert_eq!(t.key_len(b), 5);
        assert!(matches!(t.push(&[1u8; 26]), Err(TableError::KeyTooLong { .. })));
        t.delete(a).unwrap();
        assert!(matches!(t.delete(a), Err(TableError::NoSuchRecord(0))));
        assert_eq!(t.len(), 1);
        assert_eq!(t.live_rids().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn pages_fill_to_64k() {
        let s = Schema::new(vec![ColumnType::FixedString(100)]).unwrap();
        let mut t = Table::new(s);
        for i in 0..2000u32 {
            let mut k = vec![0u8; 100];
            k[..4].copy_from_slice(&i.to_be_bytes());
            t.push(&k).unwrap();
        }
        // 104 padded bytes per row
        assert_eq!(t.pages()[0].rows().count(), PAGE_BYTES / 104);
        assert_eq!(t.pages().iter().map(|p| p.rows().count()).sum::<usize>(), 2000);
        assert_eq!(&t.key(1500).as_bytes()[..4], &1500u32.to_be_bytes());
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let t = Table::from_keys(schema(), [b"\x80\0\0\x01x\0".as_slice(), b"\x80\0\0\x00\0"]).unwrap();
        let mut buf = Vec::new();
        t.write_dataset(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DKS1");
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back.schema(), t.schema());
        assert_eq!(back.key(0), t.key(0));
        assert_eq!(back.key(1), t.key(1));

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(bad.as_slice()), Err(TableError::BadMagic)));
        assert!(matches!(read_dataset(&buf[..buf.len() - 2]), Err(TableError::Truncated)));
        let mut tag = buf.clone();
        tag[8] = 99;
        assert!(matches!(read_dataset(tag.as_slice()), Err(TableError::BadColumnTag(99))));
    }

    #[test]
    fn text_mode() {
        let t = read_text(&b"AB\nABA\n\nzz\r\n"[..]).unwrap();
        assert_eq!(t.schema().columns(), &[ColumnType::VarString(3)]);
        assert_eq!(t.len(), 4);
        assert_eq!(t.key(0).as_bytes(), b"AB\0");
        assert_eq!(t.key(2).as_bytes(), b"\0");
        assert_eq!(t.key(3).as_bytes(), b"zz\0");
    }
}
