//! Direct-multiplication convolution, the oracle every table kernel is
//! checked against.
//!
//! Orientation is cross-correlation (no kernel flip) with valid padding:
//! `out[y][x] = input_weight * sum_{i,j} f(w[i][j], a[y+i][x+j])`.

use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv_fn::ConvFn;
use crate::error::{Error, Result};
use crate::num::{Acc, Weight};
use crate::tensor::{AccTensor, Filter, QTensor};

/// Operation counters collected while a kernel runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Convolution-function evaluations (each stands in for one multiply).
    pub fn_evals: u64,
    /// Multiplications on the inference path, including `fn_evals` and
    /// input-weight scaling.
    pub mults: u64,
    pub lookups: u64,
    pub adds: u64,
}

impl Add for OpCounts {
    type Output = OpCounts;
    fn add(self, o: OpCounts) -> OpCounts {
        OpCounts {
            fn_evals: self.fn_evals + o.fn_evals,
            mults: self.mults + o.mults,
            lookups: self.lookups + o.lookups,
            adds: self.adds + o.adds,
        }
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: OpCounts) {
        *self = *self + o;
    }
}

/// Input and filter extents for a valid-mode convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    pub fn new(in_shape: (usize, usize), filter_shape: (usize, usize)) -> Result<Self> {
        let (in_h, in_w) = in_shape;
        let (kh, kw) = filter_shape;
        if kh == 0 || kw == 0 || in_h == 0 || in_w == 0 {
            return Err(Error::Shape("zero-sized input or filter".into()));
        }
        if kh > in_h || kw > in_w {
            return Err(Error::Shape(format!(
                "filter {kh}x{kw} larger than input {in_h}x{in_w}"
            )));
        }
        Ok(ConvGeometry { in_h, in_w, kh, kw })
    }

    pub fn out_shape(&self) -> (usize, usize) {
        (self.in_h - self.kh + 1, self.in_w - self.kw + 1)
    }

    pub fn positions(&self) -> u64 {
        let (h, w) = self.out_shape();
        (h * w) as u64
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }
}

/// Multiplications DM performs for `samples` inputs of this geometry.
pub fn dm_mult_count(samples: u64, geom: &ConvGeometry) -> Result<u64> {
    let (oh, ow) = geom.out_shape();
    [oh as u64, ow as u64, geom.kh as u64, geom.kw as u64]
        .iter()
        .try_fold(samples, |acc, &f| acc.checked_mul(f))
        .filter(|&n| n <= i64::MAX as u64)
        .ok_or_else(|| Error::Range("multiplication count exceeds 2^63".into()))
}

pub fn dm_conv2d<W: Weight>(input: &QTensor, filter: &Filter<W>, f: &ConvFn) -> Result<AccTensor<W::Acc>> {
    dm_conv2d_counted(input, filter, f).map(|(out, _)| out)
}

/// [`dm_conv2d`] plus the operations it performed.
pub fn dm_conv2d_counted<W: Weight>(
    input: &QTensor,
    filter: &Filter<W>,
    f: &ConvFn,
) -> Result<(AccTensor<W::Acc>, OpCounts)> {
    let geom = ConvGeometry::new(input.shape(), filter.shape())?;
    let (oh, ow) = geom.out_shape();
    let (kh, kw) = filter.shape();
    let weights = filter.weights();
    let iw = filter.input_weight();
    let scale = iw != W::Acc::ONE;
    let top = input.card().max_level();
    // Function domains are rectangles; checking the corners validates every pair.
    for &w in weights {
        w.eval(f, 0)?;
        w.eval(f, top)?;
    }

    let mut out = vec![W::Acc::ZERO; oh * ow];
    let counts = out
        .par_chunks_mut(ow)
        .enumerate()
        .map(|(y, row)| {
            let mut c = OpCounts::default();
            for (x, slot) in row.iter_mut().enumerate() {
                let mut acc = W::Acc::ZERO;
                for i in 0..kh {
                    let src = &input.row(y + i)[x..x + kw];
                    let wrow = &weights[i * kw..(i + 1) * kw];
                    for (&w, &a) in wrow.iter().zip(src) {
                        let v = match f {
                            ConvFn::Product => w.to_acc().mul(W::Acc::from_level(a as u32)),
                            _ => w.eval(f, a as u32)?,
                        };
                        acc += v;
                    }
                }
                if scale {
                    acc = iw.mul(acc);
                    c.mults += 1;
                }
                *slot = acc;
            }
            let taps = (kh * kw) as u64;
            c.fn_evals += taps * ow as u64;
            c.mults += taps * ow as u64;
            c.adds += (taps - 1) * ow as u64;
            Ok::<_, Error>(c)
        })
        .try_reduce(OpCounts::default, |a, b| Ok(a + b))?;
    Ok((AccTensor::new(oh, ow, out)?, counts))
}
