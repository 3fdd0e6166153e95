//! Order-preserving binary index keys.
//!
//! Every column value is mapped to a byte string whose unsigned
//! lexicographic order equals the order of the original values. Keys on
//! several columns are the concatenation of the column fragments. Bit
//! position 0 of a key is the most significant bit of byte 0.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported decimal precision.
pub const MAX_DECIMAL_DIGITS: u8 = 38;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("invalid value: {0}")]
    InvalidValue(&'static str),
    #[error("decimal {value} does not fit in {digits} digits")]
    Overflow { value: i128, digits: u8 },
    #[error("fixed string has length {got}, column expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("variable-length string contains a null byte at offset {0}")]
    EmbeddedNull(usize),
    #[error("string of length {got} exceeds maximum {max}")]
    TooLong { max: usize, got: usize },
    #[error("value does not match column type {0}")]
    TypeMismatch(ColumnType),
    #[error("row has {got} values, schema has {expected} columns")]
    Arity { expected: usize, got: usize },
    #[error("invalid column type: {0}")]
    InvalidType(String),
    #[error("null is only supported for decimal columns")]
    NullNotSupported,
}

/// Column type of an index column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColumnType {
    Int32,
    Int64,
    Float64,
    /// `precision` total digits, `scale` of them right of the point.
    Decimal { precision: u8, scale: u8 },
    FixedString(u32),
    VarString(u32),
}

impl ColumnType {
    pub fn decimal(precision: u8, scale: u8) -> Result<Self, KeyError> {
        if precision == 0 || precision > MAX_DECIMAL_DIGITS || scale > precision {
            return Err(KeyError::InvalidType(format!("decimal({precision},{scale})")));
        }
        Ok(ColumnType::Decimal { precision, scale })
    }

    pub fn validate(&self) -> Result<(), KeyError> {
        match *self {
            ColumnType::Decimal { precision, scale } => ColumnType::decimal(precision, scale).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Upper bound on the encoded fragment length in bytes.
    pub fn max_encoded_len(&self) -> usize {
        match *self {
            ColumnType::Int32 => 4,
            ColumnType::Int64 | ColumnType::Float64 => 8,
            ColumnType::Decimal { precision, .. } => 1 + decimal_part_bytes(precision),
            ColumnType::FixedString(len) => len as usize,
            ColumnType::VarString(maxlen) => maxlen as usize + 1,
        }
    }

    pub fn is_variable(&self) -> bool {
        matches!(self, ColumnType::VarString(_))
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ColumnType::Int32 => write!(f, "int32"),
            ColumnType::Int64 => write!(f, "int64"),
            ColumnType::Float64 => write!(f, "float64"),
            ColumnType::Decimal { precision, scale } => write!(f, "decimal({precision},{scale})"),
            ColumnType::FixedString(len) => write!(f, "char({len})"),
            ColumnType::VarString(max) => write!(f, "varchar({max})"),
        }
    }
}

/// A typed column value. Decimals carry their unscaled integer
/// (`value * 10^scale`); `None` is SQL null.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Decimal(Option<i128>),
    Bytes(Vec<u8>),
}

/// An encoded index key in canonical (most significant byte first) order.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct IndexKey(Vec<u8>);

impl IndexKey {
    pub fn new(bytes: Vec<u8>) -> Self {
        IndexKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of 8-byte words the key occupies once zero padded.
    pub fn word_count(&self) -> usize {
        self.0.len().div_ceil(8)
    }

    /// Bit at `pos`; positions past the end read as 0.
    pub fn bit(&self, pos: usize) -> bool {
        bit_of(&self.0, pos)
    }

    /// The key as big-endian words, zero padded to a word boundary.
    pub fn to_words(&self) -> Vec<u64> {
        bytes_to_words(&self.0)
    }
}

impl fmt::Debug for IndexKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IndexKey(")?;
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

impl PartialOrd for IndexKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for IndexKey {
    fn cmp(&self, other: &Self) -> Ordering {
        compare_keys(&self.0, &other.0).0
    }
}

impl From<Vec<u8>> for IndexKey {
    fn from(v: Vec<u8>) -> Self {
        IndexKey(v)
    }
}

impl From<&[u8]> for IndexKey {
    fn from(v: &[u8]) -> Self {
        IndexKey(v.to_vec())
    }
}

pub(crate) fn bit_of(bytes: &[u8], pos: usize) -> bool {
    bytes.get(pos / 8).is_some_and(|b| b & (0x80 >> (pos % 8)) != 0)
}

/// Load the big-endian word starting at byte `offset`, zero padded past the end.
#[inline]
pub fn load_word(bytes: &[u8], offset: usize) -> u64 {
    if offset + 8 <= bytes.len() {
        u64::from_be_bytes(bytes[offset..offset + 8].try_into().unwrap())
    } else if offset >= bytes.len() {
        0
    } else {
        let mut buf = [0u8; 8];
        buf[..bytes.len() - offset].copy_from_slice(&bytes[offset..]);
        u64::from_be_bytes(buf)
    }
}

pub fn bytes_to_words(bytes: &[u8]) -> Vec<u64> {
    (0..bytes.len().div_ceil(8)).map(|i| load_word(bytes, i * 8)).collect()
}

/// Word-wise comparison with zero padding of the shorter key.
///
/// Returns the ordering together with the number of 8-byte word
/// comparisons performed.
pub fn compare_keys(a: &[u8], b: &[u8]) -> (Ordering, u32) {
    let words = a.len().max(b.len()).div_ceil(8);
    for i in 0..words {
        let (x, y) = (load_word(a, i * 8), load_word(b, i * 8));
        if x != y {
            return (x.cmp(&y), i as u32 + 1);
        }
    }
    (Ordering::Equal, words as u32)
}

/// Same as [`compare_keys`] on keys already held as big-endian words.
#[inline]
pub fn compare_words(a: &[u64], b: &[u64]) -> (Ordering, u32) {
    let n = a.len().max(b.len());
    for i in 0..n {
        let x = a.get(i).copied().unwrap_or(0);
        let y = b.get(i).copied().unwrap_or(0);
        if x != y {
            return (x.cmp(&y), i as u32 + 1);
        }
    }
    (Ordering::Equal, n as u32)
}

/// Sign-bit flip, big endian. `width` is 4 or 8.
pub fn encode_int(value: i64, width: usize, out: &mut Vec<u8>) -> Result<(), KeyError> {
    match width {
        4 => {
            let v = i32::try_from(value).map_err(|_| KeyError::InvalidValue("int32 out of range"))?;
            out.extend_from_slice(&((v as u32) ^ (1 << 31)).to_be_bytes());
        }
        8 => out.extend_from_slice(&((value as u64) ^ (1 << 63)).to_be_bytes()),
        _ => return Err(KeyError::InvalidValue("integer width must be 4 or 8")),
    }
    Ok(())
}

/// Flip every bit of negatives, only the sign bit of non-negatives.
///
/// `-0.0` encodes below `+0.0`.
pub fn encode_float(value: f64, out: &mut Vec<u8>) -> Result<(), KeyError> {
    if value.is_nan() {
        return Err(KeyError::InvalidValue("NaN has no position in key order"));
    }
    let bits = value.to_bits();
    let mapped = if bits >> 63 == 1 { !bits } else { bits ^ (1 << 63) };
    out.extend_from_slice(&mapped.to_be_bytes());
    Ok(())
}

/// Bytes of the binary decimal part for `precision` digits: ceil(log2(10^m) / 8).
pub fn decimal_part_bytes(precision: u8) -> usize {
    let max = 10u128.pow(precision as u32) - 1;
    let bits = 128 - max.leading_zeros() as usize;
    bits.div_ceil(8).max(1)
}

const DEC_SIGN: u8 = 0b01;
const DEC_NOT_NULL: u8 = 0b10;

/// Header byte plus big-endian magnitude.
///
/// The header's last bit is the sign (1 for negative) and the
/// second-to-last bit is 1 for non-null. Negative values get the sign bit
/// and every magnitude bit toggled, the rest only the sign bit. Null
/// encodes as header `0b01` with a zero magnitude, below every value.
pub fn encode_decimal(value: Option<i128>, precision: u8, out: &mut Vec<u8>) -> Result<(), KeyError> {
    let nbytes = decimal_part_bytes(precision);
    let Some(v) = value else {
        out.push(DEC_SIGN);
        out.extend(std::iter::repeat_n(0u8, nbytes));
        return Ok(());
    };
    let limit = 10u128.pow(precision as u32);
    let mag = v.unsigned_abs();
    if mag >= limit {
        return Err(KeyError::Overflow { value: v, digits: precision });
    }
    let raw = mag.to_be_bytes();
    let part = &raw[16 - nbytes..];
    if v < 0 {
        // sign bit 1 toggles to 0
        out.push(DEC_NOT_NULL);
        out.extend(part.iter().map(|b| !b));
    } else {
        out.push(DEC_NOT_NULL | DEC_SIGN);
        out.extend_from_slice(part);
    }
    Ok(())
}

pub fn encode_fixed_string(value: &[u8], len: usize, out: &mut Vec<u8>) -> Result<(), KeyError> {
    if value.len() != len {
        return Err(KeyError::LengthMismatch { expected: len, got: value.len() });
    }
    out.extend_from_slice(value);
    Ok(())
}

/// The string followed by one terminating null byte.
pub fn encode_varstring(value: &[u8], maxlen: usize, out: &mut Vec<u8>) -> Result<(), KeyError> {
    if value.len() > maxlen {
        return Err(KeyError::TooLong { max: maxlen, got: value.len() });
    }
    if let Some(at) = value.iter().position(|&b| b == 0) {
        return Err(KeyError::EmbeddedNull(at));
    }
    out.extend_from_slice(value);
    out.push(0);
    Ok(())
}

/// Ordered list of index columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    columns: Vec<ColumnType>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnType>) -> Result<Self, KeyError> {
        if columns.is_empty() {
            return Err(KeyError::InvalidType("schema has no columns".into()));
        }
        for c in &columns {
            c.validate()?;
        }
        Ok(Schema { columns })
    }

    pub fn columns(&self) -> &[ColumnType] {
        &self.columns
    }

    pub fn max_key_bytes(&self) -> usize {
        self.columns.iter().map(ColumnType::max_encoded_len).sum()
    }

    /// Bits in a key padded to the schema's word count.
    pub fn key_bits(&self) -> usize {
        self.max_key_bytes().div_ceil(8) * 64
    }

    pub fn is_fixed_length(&self) -> bool {
        !self.columns.iter().any(ColumnType::is_variable)
    }

    pub fn encode_row(&self, values: &[Value]) -> Result<IndexKey, KeyError> {
        if values.len() != self.columns.len() {
            return Err(KeyError::Arity { expected: self.columns.len(), got: values.len() });
        }
        let mut out = Vec::with_capacity(self.max_key_bytes());
        for (col, val) in self.columns.iter().zip(values) {
            encode_value(*col, val, &mut out)?;
        }
        Ok(IndexKey(out))
    }
}

pub fn encode_value(col: ColumnType, val: &Value, out: &mut Vec<u8>) -> Result<(), KeyError> {
    match (col, val) {
        (ColumnType::Int32, Value::Int(v)) => encode_int(*v, 4, out),
        (ColumnType::Int64, Value::Int(v)) => encode_int(*v, 8, out),
        (ColumnType::Float64, Value::Float(v)) => encode_float(*v, out),
        (ColumnType::Decimal { precision, .. }, Value::Decimal(v)) => encode_decimal(*v, precision, out),
        (ColumnType::FixedString(len), Value::Bytes(b)) => encode_fixed_string(b, len as usize, out),
        (ColumnType::VarString(max), Value::Bytes(b)) => encode_varstring(b, max as usize, out),
        (_, Value::Decimal(None)) => Err(KeyError::NullNotSupported),
        (col, _) => Err(KeyError::TypeMismatch(col)),
    }
}
