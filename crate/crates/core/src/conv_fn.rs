//! Convolution functions `f(weight, activation level)` used to fill tables.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qtf::QtfRecord;
use crate::tensor::Cardinality;

/// Fixed-point scale of `log_product`.
pub const LOG_PRODUCT_SCALE: f64 = 16.0;

/// Exhaustive value grid for a caller-defined function.
///
/// Row `w + 2^(weight_bits-1)` holds `f(w, a)` for every level `a` in
/// `0..2^act_bits`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueGrid {
    weight_bits: u8,
    act_bits: u8,
    values: Vec<i64>,
}

impl ValueGrid {
    pub fn new(weight_bits: u8, act_bits: u8, values: Vec<i64>) -> Result<Self> {
        if !(1..=16).contains(&weight_bits) || !(1..=16).contains(&act_bits) {
            return Err(Error::Range(format!(
                "grid widths {weight_bits}/{act_bits} must be in 1..=16"
            )));
        }
        let want = (1usize << weight_bits) * (1usize << act_bits);
        if values.len() != want {
            return Err(Error::Shape(format!(
                "grid for {weight_bits}-bit weights and {act_bits}-bit activations needs {want} values, got {}",
                values.len()
            )));
        }
        Ok(ValueGrid {
            weight_bits,
            act_bits,
            values,
        })
    }

    /// Build from a function over the full domain.
    pub fn tabulate(weight_bits: u8, act_bits: u8, f: impl Fn(i32, u32) -> i64) -> Result<Self> {
        let half = 1i32 << (weight_bits - 1);
        let values = (-half..half)
            .flat_map(|w| (0..1u32 << act_bits).map(move |a| (w, a)))
            .map(|(w, a)| f(w, a))
            .collect();
        ValueGrid::new(weight_bits, act_bits, values)
    }

    /// Load from a QTF signed-weight record: rows are weight indices, columns
    /// activation levels. Both dimensions must be powers of two.
    pub fn from_qtf(record: QtfRecord) -> Result<Self> {
        match record {
            QtfRecord::IntWeights {
                rows, cols, values, ..
            } => {
                if !rows.is_power_of_two() || !cols.is_power_of_two() || rows < 2 || cols < 2 {
                    return Err(Error::Shape(format!(
                        "grid shape {rows}x{cols} must be powers of two >= 2"
                    )));
                }
                ValueGrid::new(
                    rows.trailing_zeros() as u8,
                    cols.trailing_zeros() as u8,
                    values.into_iter().map(i64::from).collect(),
                )
            }
            _ => Err(Error::Config("a value grid must be a signed-weight record".into())),
        }
    }

    pub fn to_qtf(&self) -> Result<QtfRecord> {
        let values = self
            .values
            .iter()
            .map(|&v| {
                i32::try_from(v).map_err(|_| Error::Range(format!("grid value {v} exceeds i32")))
            })
            .collect::<Result<_>>()?;
        Ok(QtfRecord::IntWeights {
            rows: 1 << self.weight_bits,
            cols: 1 << self.act_bits,
            bits: 32,
            values,
        })
    }

    pub fn weight_bits(&self) -> u8 {
        self.weight_bits
    }

    pub fn act_bits(&self) -> u8 {
        self.act_bits
    }

    fn get(&self, w: i32, a: u32) -> Option<i64> {
        let half = 1i64 << (self.weight_bits - 1);
        let row = w as i64 + half;
        if !(0..2 * half).contains(&row) || a >= 1 << self.act_bits {
            return None;
        }
        Some(self.values[((row as usize) << self.act_bits) + a as usize])
    }
}

/// A registered convolution function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum ConvFn {
    /// `w * a`
    Product,
    /// `round(w * ln(1 + a) * 16)`
    LogProduct,
    /// Caller-supplied exhaustive grid.
    Table { grid: Arc<ValueGrid> },
}

impl ConvFn {
    pub const BUILTIN_IDS: [&'static str; 3] = ["product", "log_product", "table"];

    /// Look up a builtin by id. `table` needs a grid; see [`ConvFn::table`].
    pub fn builtin(id: &str) -> Result<ConvFn> {
        match id {
            "product" => Ok(ConvFn::Product),
            "log_product" => Ok(ConvFn::LogProduct),
            "table" => Err(Error::Config("function `table` requires a value grid".into())),
            other => Err(Error::UnknownFunction(other.to_string())),
        }
    }

    pub fn table(grid: ValueGrid) -> ConvFn {
        ConvFn::Table {
            grid: Arc::new(grid),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            ConvFn::Product => "product",
            ConvFn::LogProduct => "log_product",
            ConvFn::Table { .. } => "table",
        }
    }

    pub fn is_product(&self) -> bool {
        matches!(self, ConvFn::Product)
    }

    pub fn eval_int(&self, w: i32, a: u32) -> Result<i64> {
        match self {
            ConvFn::Product => Ok(w as i64 * a as i64),
            ConvFn::LogProduct => Ok(log_product(w as f64, a) as i64),
            ConvFn::Table { grid } => grid.get(w, a).ok_or_else(|| {
                Error::Range(format!("({w}, {a}) outside the value grid domain"))
            }),
        }
    }

    pub fn eval_real(&self, w: f64, a: u32) -> Result<f64> {
        match self {
            ConvFn::Product => Ok(w * a as f64),
            ConvFn::LogProduct => Ok(log_product(w, a)),
            ConvFn::Table { .. } => Err(Error::Unsupported(
                "grid functions are defined for integer weights only".into(),
            )),
        }
    }

    /// Smallest and largest value over `weight_bits`-bit signed weights and
    /// every level of `card`.
    pub fn value_range(&self, weight_bits: u8, card: Cardinality) -> Result<(i64, i64)> {
        let lo_w = -(1i32 << (weight_bits - 1));
        let hi_w = (1i32 << (weight_bits - 1)) - 1;
        let top = card.max_level();
        match self {
            // Both are monotone in |w| and in a, so the extremes sit at the corners.
            ConvFn::Product | ConvFn::LogProduct => {
                let corners = [
                    self.eval_int(lo_w, top)?,
                    self.eval_int(hi_w, top)?,
                    self.eval_int(0, 0)?,
                ];
                Ok((*corners.iter().min().unwrap(), *corners.iter().max().unwrap()))
            }
            ConvFn::Table { grid } => {
                if weight_bits > grid.weight_bits || card.bits() > grid.act_bits {
                    return Err(Error::Range(format!(
                        "grid covers {}-bit weights and {}-bit activations",
                        grid.weight_bits, grid.act_bits
                    )));
                }
                let mut lo = i64::MAX;
                let mut hi = i64::MIN;
                for w in lo_w..=hi_w {
                    for a in 0..=top {
                        let v = self.eval_int(w, a)?;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                Ok((lo, hi))
            }
        }
    }

    /// Signed bits needed to store any value over the declared domain.
    pub fn entry_bits(&self, weight_bits: u8, card: Cardinality) -> Result<u32> {
        let (lo, hi) = self.value_range(weight_bits, card)?;
        Ok((1..=64u32)
            .find(|&n| {
                let min = -(1i128 << (n - 1));
                let max = (1i128 << (n - 1)) - 1;
                lo as i128 >= min && hi as i128 <= max
            })
            .unwrap_or(64))
    }
}

fn log_product(w: f64, a: u32) -> f64 {
    (w * (1.0 + a as f64).ln() * LOG_PRODUCT_SCALE).round()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_values() {
        let p = ConvFn::builtin("product").unwrap();
        assert_eq!(p.eval_int(3, 2).unwrap(), 6);
        for w in -8..8 {
            assert_eq!(p.eval_int(w, 0).unwrap(), 0);
        }
        let l = ConvFn::builtin("log_product").unwrap();
        assert_eq!(l.eval_int(1, 0).unwrap(), 0);
        // round(2 * ln 4 * 16) = round(44.36)
        assert_eq!(l.eval_int(2, 3).unwrap(), 44);
        assert_eq!(l.eval_real(-1.0, 1).unwrap(), -11.0);
    }

    #[test]
    fn unknown_and_gridless_ids() {
        assert!(matches!(ConvFn::builtin("xnor"), Err(Error::UnknownFunction(_))));
        assert!(matches!(ConvFn::builtin("table"), Err(Error::Config(_))));
    }

    #[test]
    fn grid_lookup_and_domain() {
        let g = ValueGrid::tabulate(2, 2, |w, a| (w as i64) * (a as i64) * (a as i64)).unwrap();
        let f = ConvFn::table(g);
        assert_eq!(f.eval_int(-2, 3).unwrap(), -18);
        assert_eq!(f.eval_int(1, 2).unwrap(), 4);
        assert!(f.eval_int(2, 0).is_err());
        assert!(f.eval_int(0, 4).is_err());
        assert!(f.eval_real(1.0, 1).is_err());
    }

    #[test]
    fn grid_qtf_roundtrip() {
        let g = ValueGrid::tabulate(3, 2, |w, a| (w * 7) as i64 - a as i64).unwrap();
        let rec = g.to_qtf().unwrap();
        let back = ValueGrid::from_qtf(QtfRecord::decode(&rec.encode()).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn entry_bits_for_product() {
        let c8 = Cardinality::new(8).unwrap();
        // [-128 * 255, 127 * 255] = [-32640, 32385] fits 16 signed bits
        assert_eq!(ConvFn::Product.value_range(8, c8).unwrap(), (-32640, 32385));
        assert_eq!(ConvFn::Product.entry_bits(8, c8).unwrap(), 16);
        let c1 = Cardinality::new(1).unwrap();
        assert_eq!(ConvFn::Product.entry_bits(1, c1).unwrap(), 1);
    }

    #[test]
    fn value_range_matches_enumeration() {
        let fns = [
            ConvFn::Product,
            ConvFn::LogProduct,
            ConvFn::table(ValueGrid::tabulate(4, 4, |w, a| (w as i64 - 3) * (a as i64 % 5)).unwrap()),
        ];
        for f in &fns {
            for wb in 1..=4u8 {
                for ab in 1..=4u8 {
                    let card = Cardinality::new(ab).unwrap();
                    let half = 1i32 << (wb - 1);
                    let vals: Vec<i64> = (-half..half)
                        .flat_map(|w| (0..card.levels() as u32).map(move |a| (w, a)))
                        .map(|(w, a)| f.eval_int(w, a).unwrap())
                        .collect();
                    let want = (*vals.iter().min().unwrap(), *vals.iter().max().unwrap());
                    assert_eq!(f.value_range(wb, card).unwrap(), want, "{} {wb} {ab}", f.id());
                }
            }
        }
    }
}
