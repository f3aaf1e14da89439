//! The `TNSR` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size      field
//! 0       4         magic "TNSR"
//! 4       2         version (u16) = 1
//! 6       1         dtype code: 1=f32 2=u8 3=u16 4=i32
//! 7       1         ndim (1..=4)
//! 8       4*ndim    shape entries (u32, each >= 1)
//! ..      ..        row-major payload
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u16 = 1;
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    U8,
    U16,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::U8 => 2,
            DType::U16 => 3,
            DType::I32 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U8),
            3 => Some(DType::U16),
            4 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U16 => 2,
            DType::U8 => 1,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DType::F32 => "f32",
            DType::U8 => "u8",
            DType::U16 => "u16",
            DType::I32 => "i32",
        };
        f.write_str(s)
    }
}

/// Typed element buffer of a [`TensorRecord`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U16(Vec<u16>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
            TensorData::U16(_) => DType::U16,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic {found:?} at offset {offset}")]
    BadMagic { offset: u64, found: [u8; 4] },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: u64, version: u16 },
    #[error("unknown dtype code {code} at offset {offset}")]
    UnknownDType { offset: u64, code: u8 },
    #[error("rank {ndim} outside 1..={MAX_NDIM} at offset {offset}")]
    BadRank { offset: u64, ndim: u8 },
    #[error("zero-sized dimension at offset {offset}")]
    ZeroDimension { offset: u64 },
    #[error("element count overflows 64 bits at offset {offset}")]
    ShapeOverflow { offset: u64 },
    #[error("header truncated at offset {offset}")]
    TruncatedHeader { offset: u64 },
    #[error("payload truncated at offset {offset}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        offset: u64,
        expected: u64,
        found: u64,
    },
    #[error("non-finite f32 value at offset {offset}")]
    NonFiniteValue { offset: u64 },
    #[error("unexpected trailing data at offset {offset}")]
    TrailingData { offset: u64 },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("expected {expected}, found dtype {dtype} with shape {shape:?}")]
    Mismatch {
        expected: String,
        dtype: DType,
        shape: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An n-dimensional array with dtype and shape; the exchange unit between
/// the exporter and the analysis pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorRecord {
    /// Builds a record, checking rank, dimension sizes, buffer length and
    /// finiteness of f32 payloads.
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.len() > MAX_NDIM {
            return Err(TensorError::InvalidRecord(format!(
                "rank {} outside 1..={MAX_NDIM}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(TensorError::InvalidRecord(format!(
                "dimension out of range in {shape:?}"
            )));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::InvalidRecord("element count overflow".into()))?;
        if count != data.len() {
            return Err(TensorError::InvalidRecord(format!(
                "shape {shape:?} needs {count} elements, buffer has {}",
                data.len()
            )));
        }
        if let TensorData::F32(v) = &data {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(TensorError::InvalidRecord(format!(
                    "non-finite value at element {i}"
                )));
            }
        }
        Ok(Self { shape, data })
    }

    pub fn from_array2_f32(a: &Array2<f32>) -> Result<Self, TensorError> {
        let (h, w) = a.dim();
        Self::new(vec![h, w], TensorData::F32(a.iter().copied().collect()))
    }

    pub fn from_array3_f32(a: &Array3<f32>) -> Result<Self, TensorError> {
        let (k, h, w) = a.dim();
        Self::new(vec![k, h, w], TensorData::F32(a.iter().copied().collect()))
    }

    pub fn from_array2_u16(a: &Array2<u16>) -> Result<Self, TensorError> {
        let (h, w) = a.dim();
        Self::new(vec![h, w], TensorData::U16(a.iter().copied().collect()))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Payload size in bytes.
    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().size()
    }

    fn mismatch(&self, expected: &str) -> TensorError {
        TensorError::Mismatch {
            expected: expected.to_string(),
            dtype: self.dtype(),
            shape: self.shape.clone(),
        }
    }

    /// Views a rank-3 f32 record as `[K, H, W]`.
    pub fn to_array3_f32(&self) -> Result<Array3<f32>, TensorError> {
        match (&self.data, self.shape.as_slice()) {
            (TensorData::F32(v), &[k, h, w]) => Ok(Array3::from_shape_vec((k, h, w), v.clone())
                .expect("shape validated at construction")),
            _ => Err(self.mismatch("3-D f32 tensor")),
        }
    }

    pub fn to_array2_f32(&self) -> Result<Array2<f32>, TensorError> {
        match (&self.data, self.shape.as_slice()) {
            (TensorData::F32(v), &[h, w]) => Ok(Array2::from_shape_vec((h, w), v.clone())
                .expect("shape validated at construction")),
            _ => Err(self.mismatch("2-D f32 tensor")),
        }
    }

    pub fn to_array2_u16(&self) -> Result<Array2<u16>, TensorError> {
        match (&self.data, self.shape.as_slice()) {
            (TensorData::U16(v), &[h, w]) => Ok(Array2::from_shape_vec((h, w), v.clone())
                .expect("shape validated at construction")),
            _ => Err(self.mismatch("2-D u16 tensor")),
        }
    }
}

/// Serializes `record` and returns the number of bytes written.
pub fn write_tensor<W: Write>(record: &TensorRecord, mut sink: W) -> Result<u64, TensorError> {
    let mut header = Vec::with_capacity(8 + 4 * record.shape.len());
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.push(record.dtype().code());
    header.push(record.shape.len() as u8);
    for &d in &record.shape {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }

    let mut payload = Vec::with_capacity(record.byte_len());
    match &record.data {
        TensorData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => payload.extend_from_slice(v),
        TensorData::U16(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
    }

    sink.write_all(&header)?;
    sink.write_all(&payload)?;
    sink.flush()?;
    Ok((header.len() + payload.len()) as u64)
}

/// Reads exactly `buf.len()` bytes, mapping a short read to `TruncatedHeader`.
fn read_header_bytes<R: Read>(src: &mut R, buf: &mut [u8], offset: u64) -> Result<(), TensorError> {
    match src.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
            Err(TensorError::TruncatedHeader { offset })
        }
        Err(e) => Err(e.into()),
    }
}

/// Parses one record from `source`. The stream is left positioned just past
/// the payload.
pub fn read_tensor<R: Read>(mut source: R) -> Result<TensorRecord, TensorError> {
    let mut fixed = [0u8; 8];
    read_header_bytes(&mut source, &mut fixed[..4], 0)?;
    let magic: [u8; 4] = fixed[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(TensorError::BadMagic {
            offset: 0,
            found: magic,
        });
    }
    read_header_bytes(&mut source, &mut fixed[4..], 4)?;
    let version = u16::from_le_bytes([fixed[4], fixed[5]]);
    if version != VERSION {
        return Err(TensorError::UnsupportedVersion { offset: 4, version });
    }
    let dtype = DType::from_code(fixed[6]).ok_or(TensorError::UnknownDType {
        offset: 6,
        code: fixed[6],
    })?;
    let ndim = fixed[7];
    if ndim == 0 || ndim as usize > MAX_NDIM {
        return Err(TensorError::BadRank { offset: 7, ndim });
    }

    let mut shape = Vec::with_capacity(ndim as usize);
    let mut count: u64 = 1;
    for i in 0..ndim as u64 {
        let offset = 8 + 4 * i;
        let mut b = [0u8; 4];
        read_header_bytes(&mut source, &mut b, offset)?;
        let d = u32::from_le_bytes(b) as u64;
        if d == 0 {
            return Err(TensorError::ZeroDimension { offset });
        }
        count = count
            .checked_mul(d)
            .ok_or(TensorError::ShapeOverflow { offset })?;
        shape.push(d as usize);
    }
    let header_len = 8 + 4 * ndim as u64;
    let expected = count
        .checked_mul(dtype.size() as u64)
        .ok_or(TensorError::ShapeOverflow { offset: 8 })?;

    // Read incrementally so a hostile header cannot force a huge allocation.
    let mut payload = Vec::new();
    let found = source.by_ref().take(expected).read_to_end(&mut payload)? as u64;
    if found != expected {
        return Err(TensorError::TruncatedPayload {
            offset: header_len + found,
            expected,
            found,
        });
    }

    let data = match dtype {
        DType::F32 => {
            let mut v = Vec::with_capacity(count as usize);
            for (i, c) in payload.chunks_exact(4).enumerate() {
                let x = f32::from_le_bytes(c.try_into().unwrap());
                if !x.is_finite() {
                    return Err(TensorError::NonFiniteValue {
                        offset: header_len + 4 * i as u64,
                    });
                }
                v.push(x);
            }
            TensorData::F32(v)
        }
        DType::U8 => TensorData::U8(payload),
        DType::U16 => TensorData::U16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
        DType::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(TensorRecord { shape, data })
}

/// Reads a whole file as a single record; trailing bytes are rejected.
pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorRecord, TensorError> {
    let mut reader = BufReader::new(File::open(path)?);
    let record = read_tensor(&mut reader)?;
    let mut probe = [0u8; 1];
    if reader.read(&mut probe)? != 0 {
        let offset = (8 + 4 * record.shape.len() + record.byte_len()) as u64;
        return Err(TensorError::TrailingData { offset });
    }
    Ok(record)
}

pub fn write_tensor_file(record: &TensorRecord, path: impl AsRef<Path>) -> Result<u64, TensorError> {
    let file = File::create(path)?;
    write_tensor(record, BufWriter::new(file))
}
