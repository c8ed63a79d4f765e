//! QTF: little-endian container for activation tensors and filter weights.
//!
//! ```text
//! "QTF1" | dtype u8 | bits u8 | ndim u8 (=2) | dims u32 x ndim | payload
//! ```
//!
//! dtype 0 stores unsigned activations as u16, dtype 1 signed weights as i32
//! and dtype 2 reals as IEEE-754 binary64. Payload is row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Cardinality, Filter, QTensor};

pub const MAGIC: &[u8; 4] = b"QTF1";
const HEADER_LEN: usize = 4 + 3 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    Activation = 0,
    SignedWeight = 1,
    Real64 = 2,
}

/// Any record a QTF file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum QtfRecord {
    Activations(QTensor),
    /// `bits` is at most 32; 32 marks an unconstrained i32 grid.
    IntWeights {
        rows: usize,
        cols: usize,
        bits: u8,
        values: Vec<i32>,
    },
    Real {
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    },
}

/// Either kind of filter a QTF file can describe.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyFilter {
    Int(Filter<i32>),
    Real(Filter<f64>),
}

fn header(dtype: DType, bits: u8, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[dtype as u8, bits, 2]);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out
}

impl QtfRecord {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            QtfRecord::Activations(t) => {
                let mut out = header(DType::Activation, t.card().bits(), t.rows(), t.cols());
                for v in t.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
            QtfRecord::IntWeights {
                rows,
                cols,
                bits,
                values,
            } => {
                let mut out = header(DType::SignedWeight, *bits, *rows, *cols);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
            QtfRecord::Real { rows, cols, values } => {
                let mut out = header(DType::Real64, 64, *rows, *cols);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::parse(0, "bad magic"));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::parse(bytes.len() as u64, "truncated header"));
        }
        let dtype = bytes[4];
        let bits = bytes[5];
        let ndim = bytes[6];
        if ndim != 2 {
            return Err(Error::parse(6, format!("ndim must be 2, got {ndim}")));
        }
        let rows = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::parse(7, format!("empty shape {rows}x{cols}")));
        }
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::parse(7, "shape overflows"))?;
        let elem = match dtype {
            0 => 2,
            1 => 4,
            2 => 8,
            _ => return Err(Error::parse(4, format!("unknown dtype code {dtype}"))),
        };
        let payload = &bytes[HEADER_LEN..];
        let need = n
            .checked_mul(elem)
            .ok_or_else(|| Error::parse(7, "shape overflows"))?;
        if payload.len() < need {
            return Err(Error::parse(
                bytes.len() as u64,
                format!("truncated payload: {} of {need} bytes", payload.len()),
            ));
        }
        if payload.len() > need {
            return Err(Error::parse(
                (HEADER_LEN + need) as u64,
                "trailing bytes after payload",
            ));
        }
        let offset = |i: usize| (HEADER_LEN + i * elem) as u64;
        match dtype {
            0 => {
                let card = Cardinality::new(bits)
                    .map_err(|_| Error::parse(5, format!("activation bits {bits} not in 1..=16")))?;
                let mut values = Vec::with_capacity(n);
                for (i, c) in payload.chunks_exact(2).enumerate() {
                    let v = u16::from_le_bytes([c[0], c[1]]);
                    if v as u32 > card.max_level() {
                        return Err(Error::parse(
                            offset(i),
                            format!("value {v} does not fit {bits}-bit activations"),
                        ));
                    }
                    values.push(v);
                }
                Ok(QtfRecord::Activations(QTensor::new(rows, cols, card, values)?))
            }
            1 => {
                if !(1..=32).contains(&bits) {
                    return Err(Error::parse(5, format!("weight bits {bits} not in 1..=32")));
                }
                let (lo, hi) = (-(1i64 << (bits - 1)), 1i64 << (bits - 1));
                let mut values = Vec::with_capacity(n);
                for (i, c) in payload.chunks_exact(4).enumerate() {
                    let v = i32::from_le_bytes(c.try_into().unwrap());
                    if !(lo..hi).contains(&(v as i64)) {
                        return Err(Error::parse(
                            offset(i),
                            format!("weight {v} outside the {bits}-bit signed range"),
                        ));
                    }
                    values.push(v);
                }
                Ok(QtfRecord::IntWeights {
                    rows,
                    cols,
                    bits,
                    values,
                })
            }
            _ => {
                let values = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(QtfRecord::Real { rows, cols, values })
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        QtfRecord::decode(&std::fs::read(path)?)
    }

    pub fn into_filter(self) -> Result<AnyFilter> {
        match self {
            QtfRecord::IntWeights {
                rows,
                cols,
                bits,
                values,
            } => Ok(AnyFilter::Int(Filter::int(rows, cols, bits, values)?)),
            QtfRecord::Real { rows, cols, values } => {
                Ok(AnyFilter::Real(Filter::real(rows, cols, values)?))
            }
            QtfRecord::Activations(_) => Err(Error::Config(
                "expected a weight record, found activations".into(),
            )),
        }
    }
}

impl From<&Filter<i32>> for QtfRecord {
    fn from(f: &Filter<i32>) -> Self {
        let (rows, cols) = f.shape();
        QtfRecord::IntWeights {
            rows,
            cols,
            bits: f.weight_bits(),
            values: f.weights().to_vec(),
        }
    }
}

impl From<&Filter<f64>> for QtfRecord {
    fn from(f: &Filter<f64>) -> Self {
        let (rows, cols) = f.shape();
        QtfRecord::Real {
            rows,
            cols,
            values: f.weights().to_vec(),
        }
    }
}

pub fn save_qtf(t: &QTensor, path: impl AsRef<Path>) -> Result<()> {
    QtfRecord::Activations(t.clone()).save(path)
}

pub fn load_qtf(path: impl AsRef<Path>) -> Result<QTensor> {
    match QtfRecord::load(path)? {
        QtfRecord::Activations(t) => Ok(t),
        _ => Err(Error::parse(4, "expected activation dtype 0")),
    }
}

pub fn load_filter(path: impl AsRef<Path>) -> Result<AnyFilter> {
    QtfRecord::load(path)?.into_filter()
}
