//! Per-tap lookup tables and lookup-based convolution.
//!
//! Each filter tap owns a table indexed by activation level whose entry `a`
//! holds `f(w, a)`. Inference reads one entry per tap and sums them; no
//! multiplication happens on that path unless an input weight is kept
//! outside the tables.

use rayon::prelude::*;

use crate::conv_fn::ConvFn;
use crate::error::{Error, Result};
use crate::num::{check_accumulation, check_width, max_magnitude, Acc, EntryWidth, Weight};
use crate::reference::{ConvGeometry, OpCounts};
use crate::tensor::{AccTensor, Cardinality, Filter, QTensor, WeightKind};

/// Lookup table for a single base weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Pcilt<W: Weight> {
    pub base: W,
    pub card: Cardinality,
    pub entries: Vec<W::Acc>,
}

impl<W: Weight> Pcilt<W> {
    pub fn levels(&self) -> usize {
        self.entries.len()
    }
}

/// Table for `w` over every level of `card`; performs exactly `levels`
/// function evaluations.
pub fn build_pcilt<W: Weight>(w: W, card: Cardinality, f: &ConvFn) -> Result<Pcilt<W>> {
    let entries = (0..card.levels() as u32)
        .map(|a| w.eval(f, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(Pcilt {
        base: w,
        card,
        entries,
    })
}

/// [`build_pcilt`] with a declared entry width.
pub fn build_pcilt_with_width<W: Weight>(
    w: W,
    card: Cardinality,
    f: &ConvFn,
    width: EntryWidth,
) -> Result<Pcilt<W>> {
    let t = build_pcilt(w, card, f)?;
    for (a, &v) in t.entries.iter().enumerate() {
        check_width(v, width, || format!("(w={w:?}, a={a})"))?;
    }
    Ok(t)
}

/// Options for [`build_bank_with`].
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    /// Declared entry width; `None` picks the narrowest width covering the
    /// function's range over the filter's weight domain.
    pub width: Option<EntryWidth>,
    /// Fold the filter's input weight into the entries (the default). When
    /// false the weight multiplies each output sum instead.
    pub fold_input_weight: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            width: None,
            fold_input_weight: true,
        }
    }
}

/// One table per filter tap, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PciltBank<W: Weight> {
    pub(crate) kh: usize,
    pub(crate) kw: usize,
    pub(crate) card: Cardinality,
    pub(crate) func: ConvFn,
    pub(crate) kind: WeightKind,
    pub(crate) bases: Vec<W>,
    /// `taps * levels` entries; table `t` starts at `t * levels`.
    pub(crate) entries: Vec<W::Acc>,
    pub(crate) width: EntryWidth,
    /// Product of every scalar folded into the entries.
    pub(crate) folded: W::Acc,
    /// Multiplier applied to each output sum (1 when folded).
    pub(crate) ifdr_weight: W::Acc,
    pub(crate) build_evals: u64,
}

pub fn build_bank<W: Weight>(filter: &Filter<W>, card: Cardinality, f: &ConvFn) -> Result<PciltBank<W>> {
    build_bank_with(filter, card, f, BuildOptions::default())
}

pub fn build_bank_with<W: Weight>(
    filter: &Filter<W>,
    card: Cardinality,
    f: &ConvFn,
    opts: BuildOptions,
) -> Result<PciltBank<W>> {
    let (kh, kw) = filter.shape();
    let iw = filter.input_weight();
    let (folded, ifdr_weight) = if opts.fold_input_weight {
        (iw, W::Acc::ONE)
    } else {
        (W::Acc::ONE, iw)
    };
    let width = match opts.width {
        Some(w) => w,
        None => W::default_width(filter.kind(), f, card, folded)?,
    };
    let levels = card.levels();
    let mut entries = Vec::with_capacity(filter.taps() * levels);
    let mut evals = 0u64;
    for &w in filter.weights() {
        let table = build_pcilt(w, card, f)?;
        evals += table.levels() as u64;
        for (a, v) in table.entries.into_iter().enumerate() {
            let v = if folded == W::Acc::ONE {
                v
            } else {
                folded.checked_mul(v).ok_or_else(|| {
                    Error::Range(format!("(w={w:?}, a={a}) overflows after folding {folded:?}"))
                })?
            };
            check_width(v, width, || format!("(w={w:?}, a={a})"))?;
            entries.push(v);
        }
    }
    check_accumulation(max_magnitude(&entries), filter.taps(), ifdr_weight)?;
    Ok(PciltBank {
        kh,
        kw,
        card,
        func: f.clone(),
        kind: filter.kind(),
        bases: filter.weights().to_vec(),
        entries,
        width,
        folded,
        ifdr_weight,
        build_evals: evals,
    })
}

impl<W: Weight> PciltBank<W> {
    pub fn filter_shape(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    pub fn card(&self) -> Cardinality {
        self.card
    }

    pub fn func(&self) -> &ConvFn {
        &self.func
    }

    pub fn fn_id(&self) -> &'static str {
        self.func.id()
    }

    pub fn weight_kind(&self) -> WeightKind {
        self.kind
    }

    pub fn bases(&self) -> &[W] {
        &self.bases
    }

    pub fn table(&self, tap: usize) -> &[W::Acc] {
        let l = self.card.levels();
        &self.entries[tap * l..(tap + 1) * l]
    }

    pub fn tables(&self) -> impl Iterator<Item = &[W::Acc]> {
        self.entries.chunks_exact(self.card.levels())
    }

    pub fn entries(&self) -> &[W::Acc] {
        &self.entries
    }

    pub fn width(&self) -> EntryWidth {
        self.width
    }

    pub fn folded_input_weight(&self) -> W::Acc {
        self.folded
    }

    pub fn ifdr_weight(&self) -> W::Acc {
        self.ifdr_weight
    }

    /// Function evaluations spent building the tables.
    pub fn build_evals(&self) -> u64 {
        self.build_evals
    }

    pub fn memory_bytes(&self) -> u64 {
        (self.entries.len() * self.width.bytes()) as u64
    }

    /// Filter carrying this bank's bases and the input weight it applies,
    /// for checking against the DM oracle.
    pub fn filter(&self) -> Result<Filter<W>> {
        let f = W::filter_from(self.kind, self.kh, self.kw, self.bases.clone())?;
        let iw = self
            .folded
            .checked_mul(self.ifdr_weight)
            .ok_or_else(|| Error::Range("combined input weight overflows".into()))?;
        Ok(f.with_input_weight(iw))
    }

    /// Mutable entry access for fault-injection tests.
    #[doc(hidden)]
    pub fn entries_mut(&mut self) -> &mut [W::Acc] {
        &mut self.entries
    }

    pub(crate) fn check_input(&self, input: &QTensor) -> Result<ConvGeometry> {
        if input.card() != self.card {
            return Err(Error::Shape(format!(
                "input has {}-bit activations, bank expects {}-bit",
                input.card().bits(),
                self.card.bits()
            )));
        }
        ConvGeometry::new(input.shape(), (self.kh, self.kw))
    }
}

pub fn pcilt_conv2d<W: Weight>(input: &QTensor, bank: &PciltBank<W>) -> Result<AccTensor<W::Acc>> {
    pcilt_conv2d_counted(input, bank).map(|(o, _)| o)
}

/// Lookup convolution with operation counts.
pub fn pcilt_conv2d_counted<W: Weight>(
    input: &QTensor,
    bank: &PciltBank<W>,
) -> Result<(AccTensor<W::Acc>, OpCounts)> {
    let geom = bank.check_input(input)?;
    let tables: Vec<&[W::Acc]> = bank.tables().collect();
    lookup_conv(input, &geom, &tables, bank.ifdr_weight)
}

/// Row-parallel kernel over one table per tap. Tables may be longer than the
/// input's level count (prefix views).
pub(crate) fn lookup_conv<A: Acc>(
    input: &QTensor,
    geom: &ConvGeometry,
    tables: &[&[A]],
    scale: A,
) -> Result<(AccTensor<A>, OpCounts)> {
    let (oh, ow) = geom.out_shape();
    let (kw, taps) = (geom.kw, geom.taps());
    debug_assert_eq!(tables.len(), taps);
    let scaled = scale != A::ONE;

    let mut out = vec![A::ZERO; oh * ow];
    let counts = out
        .par_chunks_mut(ow)
        .enumerate()
        .map(|(y, row)| {
            for (t, table) in tables.iter().enumerate() {
                let src = &input.row(y + t / kw)[t % kw..t % kw + ow];
                for (acc, &a) in row.iter_mut().zip(src) {
                    *acc += table[a as usize];
                }
            }
            let mut c = OpCounts {
                lookups: (taps * ow) as u64,
                adds: ((taps - 1) * ow) as u64,
                ..OpCounts::default()
            };
            if scaled {
                for acc in row.iter_mut() {
                    *acc = scale.mul(*acc);
                }
                c.mults += ow as u64;
            }
            c
        })
        .reduce(OpCounts::default, |a, b| a + b);
    Ok((AccTensor::new(oh, ow, out)?, counts))
}

/// Multiply every entry by `s`; the bank's output scales by `s`.
pub fn fold_input_weight<W: Weight>(bank: &PciltBank<W>, s: W::Acc) -> Result<PciltBank<W>> {
    let mut out = bank.clone();
    if s == W::Acc::ONE {
        return Ok(out);
    }
    let levels = bank.card.levels();
    for (i, v) in out.entries.iter_mut().enumerate() {
        *v = v.checked_mul(s).ok_or_else(|| {
            Error::Range(format!(
                "(w={:?}, a={}) overflows after folding {s:?}",
                bank.bases[i / levels],
                i % levels
            ))
        })?;
    }
    out.width = out.width.max(W::Acc::required_width(&out.entries));
    out.folded = bank
        .folded
        .checked_mul(s)
        .ok_or_else(|| Error::Range("folded input weight overflows".into()))?;
    check_accumulation(max_magnitude(&out.entries), out.taps(), out.ifdr_weight)?;
    Ok(out)
}
