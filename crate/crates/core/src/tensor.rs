//! Quantized activation tensors, filters and accumulator outputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::num::{Acc, Weight};

/// Activation bit width; an activation takes `2^bits` distinct levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Cardinality {
    bits: u8,
}

impl Cardinality {
    pub const MAX_BITS: u8 = 16;

    pub fn new(bits: u8) -> Result<Self> {
        if (1..=Self::MAX_BITS).contains(&bits) {
            Ok(Cardinality { bits })
        } else {
            Err(Error::Range(format!(
                "activation bits must be in 1..={}, got {bits}",
                Self::MAX_BITS
            )))
        }
    }

    pub fn bits(self) -> u8 {
        self.bits
    }

    pub fn levels(self) -> usize {
        1usize << self.bits
    }

    pub fn max_level(self) -> u32 {
        (self.levels() - 1) as u32
    }
}

impl TryFrom<u8> for Cardinality {
    type Error = Error;
    fn try_from(bits: u8) -> Result<Self> {
        Cardinality::new(bits)
    }
}

impl From<Cardinality> for u8 {
    fn from(c: Cardinality) -> u8 {
        c.bits
    }
}

/// Dense row-major tensor of unsigned activation levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    rows: usize,
    cols: usize,
    card: Cardinality,
    values: Vec<u16>,
}

impl QTensor {
    pub fn new(rows: usize, cols: usize, card: Cardinality, values: Vec<u16>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("tensor shape {rows}x{cols} is empty")));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                values.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, &v)| v as u32 > card.max_level())
        {
            return Err(Error::Range(format!(
                "value {v} at index {i} exceeds {}-bit range",
                card.bits()
            )));
        }
        Ok(QTensor {
            rows,
            cols,
            card,
            values,
        })
    }

    pub fn zeros(rows: usize, cols: usize, card: Cardinality) -> Result<Self> {
        QTensor::new(rows, cols, card, vec![0; rows * cols])
    }

    /// Uniformly random levels from a seeded generator.
    pub fn random(rows: usize, cols: usize, card: Cardinality, rng: &mut impl rand::Rng) -> Result<Self> {
        let max = card.max_level() as u16;
        let values = (0..rows * cols).map(|_| rng.gen_range(0..=max)).collect();
        QTensor::new(rows, cols, card, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn card(&self) -> Cardinality {
        self.card
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[u16] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.values[r * self.cols + c]
    }
}

/// Target cardinality for [`rescale_to_common_cardinality`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RescaleTarget {
    /// Widest bit width among the inputs.
    Auto,
    Bits(u8),
}

/// Map `v` from a `from`-bit scale onto a `to`-bit scale, keeping 0 and the
/// maximum level fixed: `round(v * (2^to - 1) / (2^from - 1))`.
pub fn rescale_level(v: u32, from: u8, to: u8) -> u32 {
    let src_max = (1u64 << from) - 1;
    let dst_max = (1u64 << to) - 1;
    // src_max is odd, so the quotient never lands on a .5 tie.
    ((2 * v as u64 * dst_max + src_max) / (2 * src_max)) as u32
}

/// Align tensors of different cardinalities onto one common cardinality.
pub fn rescale_to_common_cardinality(tensors: &[QTensor], target: RescaleTarget) -> Result<Vec<QTensor>> {
    if tensors.is_empty() {
        return Err(Error::Config("no tensors to rescale".into()));
    }
    let bits = match target {
        RescaleTarget::Auto => tensors.iter().map(|t| t.card.bits()).max().unwrap_or(1),
        RescaleTarget::Bits(b) => b,
    };
    let card = Cardinality::new(bits)?;
    tensors
        .iter()
        .map(|t| {
            let from = t.card.bits();
            let values = t
                .values
                .iter()
                .map(|&v| rescale_level(v as u32, from, bits) as u16)
                .collect();
            QTensor::new(t.rows, t.cols, card, values)
        })
        .collect()
}

/// Kind of the weights stored in a [`Filter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    Int { bits: u8 },
    Real,
}

/// 2D filter with row-major weights and an input weight that scales the
/// summed tap contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter<W: Weight> {
    kh: usize,
    kw: usize,
    kind: WeightKind,
    weights: Vec<W>,
    input_weight: W::Acc,
}

fn check_filter_shape(kh: usize, kw: usize, n: usize) -> Result<()> {
    if kh == 0 || kw == 0 {
        return Err(Error::Shape(format!("filter shape {kh}x{kw} is empty")));
    }
    if n != kh * kw {
        return Err(Error::Shape(format!("{n} weights for a {kh}x{kw} filter")));
    }
    Ok(())
}

impl Filter<i32> {
    pub fn int(kh: usize, kw: usize, bits: u8, weights: Vec<i32>) -> Result<Self> {
        check_filter_shape(kh, kw, weights.len())?;
        if !(1..=16).contains(&bits) {
            return Err(Error::Range(format!("weight bits must be in 1..=16, got {bits}")));
        }
        let lo = -(1i32 << (bits - 1));
        let hi = 1i32 << (bits - 1);
        if let Some(w) = weights.iter().find(|w| !(lo..hi).contains(*w)) {
            return Err(Error::Range(format!("weight {w} outside the {bits}-bit signed range")));
        }
        Ok(Filter {
            kh,
            kw,
            kind: WeightKind::Int { bits },
            weights,
            input_weight: 1,
        })
    }

    pub fn weight_bits(&self) -> u8 {
        match self.kind {
            WeightKind::Int { bits } => bits,
            WeightKind::Real => unreachable!(),
        }
    }

    pub fn random(kh: usize, kw: usize, bits: u8, rng: &mut impl rand::Rng) -> Result<Self> {
        let lo = -(1i32 << (bits - 1));
        let hi = 1i32 << (bits - 1);
        Filter::int(kh, kw, bits, (0..kh * kw).map(|_| rng.gen_range(lo..hi)).collect())
    }
}

impl Filter<f64> {
    pub fn real(kh: usize, kw: usize, weights: Vec<f64>) -> Result<Self> {
        check_filter_shape(kh, kw, weights.len())?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Range("real weights must be finite".into()));
        }
        Ok(Filter {
            kh,
            kw,
            kind: WeightKind::Real,
            weights,
            input_weight: 1.0,
        })
    }
}

impl<W: Weight> Filter<W> {
    pub fn with_input_weight(mut self, input_weight: W::Acc) -> Self {
        self.input_weight = input_weight;
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn weights(&self) -> &[W] {
        &self.weights
    }

    pub fn input_weight(&self) -> W::Acc {
        self.input_weight
    }

    /// Same filter with the weights replaced; used for effective filters
    /// (skipped or repeated taps). Weight-range checks are not repeated.
    pub(crate) fn with_weights(&self, weights: Vec<W>) -> Self {
        debug_assert_eq!(weights.len(), self.weights.len());
        Filter {
            weights,
            ..self.clone()
        }
    }
}

/// Convolution output: one accumulator per valid position.
#[derive(Debug, Clone, PartialEq)]
pub struct AccTensor<A: Acc> {
    rows: usize,
    cols: usize,
    values: Vec<A>,
}

impl<A: Acc> AccTensor<A> {
    pub fn new(rows: usize, cols: usize, values: Vec<A>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} output",
                values.len()
            )));
        }
        Ok(AccTensor { rows, cols, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[A] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> A {
        self.values[r * self.cols + c]
    }

    /// First position where `self` and `other` differ, row-major.
    pub fn first_mismatch(&self, other: &Self) -> Option<(usize, usize)> {
        if self.shape() != other.shape() {
            return Some((0, 0));
        }
        self.values
            .iter()
            .zip(&other.values)
            .position(|(a, b)| a.checksum_bytes() != b.checksum_bytes())
            .map(|i| (i / self.cols, i % self.cols))
    }

    /// SHA-256 over shape and values, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for v in &self.values {
            h.update(v.checksum_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
