//! Scalar abstractions shared by the integer and real kernels.
//!
//! Integer filters (`i32` weights) accumulate in `i64`; real filters (`f64`
//! weights) accumulate in `f64`. Table entries always have the accumulator type
//! so a lookup result can be added without conversion.

use std::fmt::Debug;
use std::ops::{Add, AddAssign};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::conv_fn::ConvFn;
use crate::error::{Error, Result};
use crate::tensor::{Cardinality, Filter, WeightKind};

/// Storage width of a table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntryWidth {
    I8,
    I16,
    I32,
    I64,
    F64,
}

impl EntryWidth {
    pub fn bits(self) -> u32 {
        match self {
            EntryWidth::I8 => 8,
            EntryWidth::I16 => 16,
            EntryWidth::I32 => 32,
            EntryWidth::I64 | EntryWidth::F64 => 64,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    /// Narrowest signed integer width holding every value in `[min, max]`.
    pub fn for_int_range(min: i64, max: i64) -> EntryWidth {
        let fits = |bits: u32| {
            let lo = -(1i128 << (bits - 1));
            let hi = (1i128 << (bits - 1)) - 1;
            (min as i128) >= lo && (max as i128) <= hi
        };
        if fits(8) {
            EntryWidth::I8
        } else if fits(16) {
            EntryWidth::I16
        } else if fits(32) {
            EntryWidth::I32
        } else {
            EntryWidth::I64
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            EntryWidth::I8 => 1,
            EntryWidth::I16 => 2,
            EntryWidth::I32 => 4,
            EntryWidth::I64 => 8,
            EntryWidth::F64 => 0x80,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<EntryWidth> {
        Some(match code {
            1 => EntryWidth::I8,
            2 => EntryWidth::I16,
            4 => EntryWidth::I32,
            8 => EntryWidth::I64,
            0x80 => EntryWidth::F64,
            _ => return None,
        })
    }
}

/// Accumulator and table-entry scalar.
pub trait Acc:
    Copy
    + Send
    + Sync
    + Debug
    + PartialEq
    + Default
    + Add<Output = Self>
    + AddAssign
    + Serialize
    + DeserializeOwned
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn checked_mul(self, rhs: Self) -> Option<Self>;
    fn checked_add(self, rhs: Self) -> Option<Self>;
    /// Multiplication on the inference path; bounds are validated at build time.
    fn mul(self, rhs: Self) -> Self;
    /// Multiply by `2^shift`.
    fn shl(self, shift: u32) -> Option<Self>;
    fn from_level(a: u32) -> Self;
    fn to_f64(self) -> f64;
    fn abs_f64(self) -> f64 {
        self.to_f64().abs()
    }

    /// Narrowest width able to store all of `values`.
    fn required_width(values: &[Self]) -> EntryWidth;
    fn fits(self, width: EntryWidth) -> bool;

    fn write_le(self, width: EntryWidth, out: &mut Vec<u8>);
    fn read_le(width: EntryWidth, bytes: &[u8]) -> Option<Self>;
    /// Bytes used for checksums; independent of storage width.
    fn checksum_bytes(self) -> [u8; 8];
    /// Exact magnitude for integers; `None` for reals, which have no
    /// overflow bound to enforce.
    fn magnitude(self) -> Option<u128>;
}

impl Acc for i64 {
    const ZERO: Self = 0;
    const ONE: Self = 1;

    fn checked_mul(self, rhs: Self) -> Option<Self> {
        i64::checked_mul(self, rhs)
    }
    fn checked_add(self, rhs: Self) -> Option<Self> {
        i64::checked_add(self, rhs)
    }
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        self * rhs
    }
    fn shl(self, shift: u32) -> Option<Self> {
        self.checked_mul(1i64.checked_shl(shift)?)
    }
    #[inline]
    fn from_level(a: u32) -> Self {
        a as i64
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn required_width(values: &[Self]) -> EntryWidth {
        let min = values.iter().copied().min().unwrap_or(0);
        let max = values.iter().copied().max().unwrap_or(0);
        EntryWidth::for_int_range(min, max)
    }
    fn fits(self, width: EntryWidth) -> bool {
        match width {
            EntryWidth::F64 => false,
            w => EntryWidth::for_int_range(self, self) <= w,
        }
    }
    fn write_le(self, width: EntryWidth, out: &mut Vec<u8>) {
        match width {
            EntryWidth::I8 => out.extend_from_slice(&(self as i8).to_le_bytes()),
            EntryWidth::I16 => out.extend_from_slice(&(self as i16).to_le_bytes()),
            EntryWidth::I32 => out.extend_from_slice(&(self as i32).to_le_bytes()),
            EntryWidth::I64 => out.extend_from_slice(&self.to_le_bytes()),
            EntryWidth::F64 => unreachable!("integer entries are never stored as f64"),
        }
    }
    fn read_le(width: EntryWidth, b: &[u8]) -> Option<Self> {
        Some(match width {
            EntryWidth::I8 => i8::from_le_bytes(b.try_into().ok()?) as i64,
            EntryWidth::I16 => i16::from_le_bytes(b.try_into().ok()?) as i64,
            EntryWidth::I32 => i32::from_le_bytes(b.try_into().ok()?) as i64,
            EntryWidth::I64 => i64::from_le_bytes(b.try_into().ok()?),
            EntryWidth::F64 => return None,
        })
    }
    fn checksum_bytes(self) -> [u8; 8] {
        self.to_le_bytes()
    }
    fn magnitude(self) -> Option<u128> {
        Some(self.unsigned_abs() as u128)
    }
}

impl Acc for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn checked_mul(self, rhs: Self) -> Option<Self> {
        let v = self * rhs;
        v.is_finite().then_some(v)
    }
    fn checked_add(self, rhs: Self) -> Option<Self> {
        let v = self + rhs;
        v.is_finite().then_some(v)
    }
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        self * rhs
    }
    fn shl(self, shift: u32) -> Option<Self> {
        self.checked_mul(2f64.powi(shift as i32))
    }
    #[inline]
    fn from_level(a: u32) -> Self {
        a as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn required_width(_: &[Self]) -> EntryWidth {
        EntryWidth::F64
    }
    fn fits(self, width: EntryWidth) -> bool {
        width == EntryWidth::F64 && self.is_finite()
    }
    fn write_le(self, _: EntryWidth, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(width: EntryWidth, b: &[u8]) -> Option<Self> {
        (width == EntryWidth::F64).then(|| b.try_into().ok().map(f64::from_le_bytes))?
    }
    fn checksum_bytes(self) -> [u8; 8] {
        self.to_bits().to_le_bytes()
    }
    fn magnitude(self) -> Option<u128> {
        None
    }
}

/// Filter weight scalar. `i32` for IntN filters, `f64` for real filters.
pub trait Weight:
    Copy + Send + Sync + Debug + PartialEq + Serialize + DeserializeOwned + 'static
{
    type Acc: Acc;

    fn to_acc(self) -> Self::Acc;
    /// Default storage width for tables over `card` built from filters of
    /// this kind, after multiplying every entry by `scale`.
    fn default_width(kind: WeightKind, f: &ConvFn, card: Cardinality, scale: Self::Acc) -> Result<EntryWidth>;
    fn filter_from(kind: WeightKind, kh: usize, kw: usize, weights: Vec<Self>) -> Result<Filter<Self>>;
    /// Evaluate a convolution function at `(self, level)`.
    fn eval(self, f: &ConvFn, level: u32) -> Result<Self::Acc>;
}

impl Weight for i32 {
    type Acc = i64;

    fn to_acc(self) -> i64 {
        self as i64
    }
    fn default_width(kind: WeightKind, f: &ConvFn, card: Cardinality, scale: i64) -> Result<EntryWidth> {
        let WeightKind::Int { bits } = kind else {
            return Err(Error::Config("integer weights need an integer filter kind".into()));
        };
        let (lo, hi) = f.value_range(bits, card)?;
        let (a, b) = match (lo.checked_mul(scale), hi.checked_mul(scale)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Range(format!("entries scaled by {scale} overflow i64"))),
        };
        Ok(EntryWidth::for_int_range(a.min(b), a.max(b)))
    }
    fn filter_from(kind: WeightKind, kh: usize, kw: usize, weights: Vec<i32>) -> Result<Filter<i32>> {
        match kind {
            WeightKind::Int { bits } => Filter::int(kh, kw, bits, weights),
            WeightKind::Real => Err(Error::Config("integer weights with a real filter kind".into())),
        }
    }
    fn eval(self, f: &ConvFn, level: u32) -> Result<i64> {
        f.eval_int(self, level)
    }
}

impl Weight for f64 {
    type Acc = f64;

    fn to_acc(self) -> f64 {
        self
    }
    fn default_width(_: WeightKind, _: &ConvFn, _: Cardinality, _: f64) -> Result<EntryWidth> {
        Ok(EntryWidth::F64)
    }
    fn filter_from(_: WeightKind, kh: usize, kw: usize, weights: Vec<f64>) -> Result<Filter<f64>> {
        Filter::real(kh, kw, weights)
    }
    fn eval(self, f: &ConvFn, level: u32) -> Result<f64> {
        f.eval_real(self, level)
    }
}

/// Reject banks whose worst-case sum of `terms` entries, scaled by `scale`,
/// could reach 2^63.
pub(crate) fn check_accumulation<A: Acc>(max_entry: A, terms: usize, scale: A) -> Result<()> {
    if let (Some(m), Some(s)) = (max_entry.magnitude(), scale.magnitude()) {
        let bound = m.saturating_mul(terms as u128).saturating_mul(s.max(1));
        if bound >= 1u128 << 63 {
            return Err(Error::Range(format!(
                "worst-case accumulation {bound} reaches 2^63"
            )));
        }
    }
    Ok(())
}

pub(crate) fn max_magnitude<A: Acc>(values: &[A]) -> A {
    values
        .iter()
        .copied()
        .fold(A::ZERO, |m, v| if v.abs_f64() > m.abs_f64() || v.magnitude() > m.magnitude() { v } else { m })
}

pub(crate) fn check_width<A: Acc>(v: A, width: EntryWidth, what: impl FnOnce() -> String) -> Result<()> {
    if v.fits(width) {
        Ok(())
    } else {
        Err(Error::Range(format!(
            "entry {v:?} for {} does not fit {width:?}",
            what()
        )))
    }
}
