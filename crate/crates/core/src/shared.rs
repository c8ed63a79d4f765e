//! Table deduplication across banks.
//!
//! Tables with the same function, base weight(s) and folded scalar are
//! identical wherever they occur, and a table over fewer activation levels is
//! a prefix of the one over more levels. A [`SharedBank`] keeps one table per
//! base at the widest cardinality in use and lets every consumer tap refer to
//! a prefix view of it.
//!
//! [`value_indirection`] goes one level further and replaces entries by
//! narrow indices into a pool of distinct values.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::conv_fn::ConvFn;
use crate::error::{Error, Result};
use crate::num::EntryWidth;
use crate::packing::{segment_conv, SegmentBank, SegmentPlan};
use crate::pcilt::{lookup_conv, Pcilt, PciltBank};
use crate::reference::{ConvGeometry, OpCounts};
use crate::tensor::{AccTensor, Cardinality, QTensor};

/// What a table was computed from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TableBase {
    /// Single-weight table; shares prefixes across cardinalities.
    Single(i32),
    /// Packed segment table. The offset layout depends on the activation
    /// width, so tuples only match at equal widths.
    Tuple { weights: Vec<i32>, act_bits: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableKey {
    pub base: TableBase,
    /// Scalar folded into the entries.
    pub folded: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedTable {
    pub key: TableKey,
    pub entries: Vec<i64>,
    pub width: EntryWidth,
}

/// A consumer tap's (or segment's) view of a shared table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapRef {
    pub table: usize,
    pub view_levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConsumerKind {
    Basic {
        kh: usize,
        kw: usize,
        card: Cardinality,
        ifdr_weight: i64,
    },
    Segment {
        plan: SegmentPlan,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consumer {
    pub kind: ConsumerKind,
    pub refs: Vec<TapRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SharedStats {
    /// Tables stored after deduplication and prefix merging.
    pub unique_tables: usize,
    /// Table references across all consumers.
    pub referenced: usize,
    /// Distinct (base, cardinality) pairs before prefix merging.
    pub distinct_pairs: usize,
    /// Pairs absorbed into a wider table with the same base.
    pub prefix_merges: usize,
    pub distinct_bases: usize,
    pub distinct_cardinalities: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedBank {
    pub(crate) func: ConvFn,
    pub(crate) tables: Vec<SharedTable>,
    pub(crate) consumers: Vec<Consumer>,
    pub(crate) stats: SharedStats,
}

/// Integer bank accepted by [`dedup`].
#[derive(Debug, Clone, Copy)]
pub enum BankRef<'a> {
    Basic(&'a PciltBank<i32>),
    Segment(&'a SegmentBank<i32>),
}

impl BankRef<'_> {
    fn func(&self) -> &ConvFn {
        match self {
            BankRef::Basic(b) => b.func(),
            BankRef::Segment(b) => b.func(),
        }
    }

    pub fn memory_bytes(&self) -> u64 {
        match self {
            BankRef::Basic(b) => b.memory_bytes(),
            BankRef::Segment(b) => b.memory_bytes(),
        }
    }
}

/// True iff `low`'s entries are the leading entries of `high`.
pub fn prefix_check<W: crate::num::Weight>(low: &Pcilt<W>, high: &Pcilt<W>) -> bool {
    low.entries.len() <= high.entries.len() && low.entries[..] == high.entries[..low.entries.len()]
}

/// Deduplicate the tables of several integer banks built with one function.
pub fn dedup(banks: &[BankRef<'_>]) -> Result<SharedBank> {
    let Some(first) = banks.first() else {
        return Err(Error::Config("no banks to share".into()));
    };
    let func = first.func().clone();
    if let Some(b) = banks.iter().find(|b| *b.func() != func) {
        return Err(Error::Config(format!(
            "cannot share `{}` tables with `{}` tables",
            b.func().id(),
            func.id()
        )));
    }

    let mut tables: Vec<SharedTable> = Vec::new();
    let mut index: HashMap<TableKey, usize> = HashMap::new();
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut cards: BTreeSet<usize> = BTreeSet::new();
    let mut consumers = Vec::with_capacity(banks.len());

    let mut intern = |key: TableKey, entries: &[i64], width: EntryWidth| -> Result<TapRef> {
        let levels = entries.len();
        let slot = match index.get(&key) {
            Some(&i) => {
                let t = &mut tables[i];
                let n = levels.min(t.entries.len());
                if t.entries[..n] != entries[..n] {
                    return Err(Error::Config(format!(
                        "tables for {:?} disagree on their common prefix",
                        key.base
                    )));
                }
                if levels > t.entries.len() {
                    t.entries = entries.to_vec();
                }
                t.width = t.width.max(width);
                i
            }
            None => {
                index.insert(key.clone(), tables.len());
                tables.push(SharedTable {
                    key,
                    entries: entries.to_vec(),
                    width,
                });
                tables.len() - 1
            }
        };
        pairs.insert((slot, levels));
        cards.insert(levels);
        Ok(TapRef {
            table: slot,
            view_levels: levels,
        })
    };

    for bank in banks {
        match bank {
            BankRef::Basic(b) => {
                let refs = b
                    .bases()
                    .iter()
                    .zip(b.tables())
                    .map(|(&w, t)| {
                        intern(
                            TableKey {
                                base: TableBase::Single(w),
                                folded: b.folded_input_weight(),
                            },
                            t,
                            b.width(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (kh, kw) = b.filter_shape();
                consumers.push(Consumer {
                    kind: ConsumerKind::Basic {
                        kh,
                        kw,
                        card: b.card(),
                        ifdr_weight: b.ifdr_weight(),
                    },
                    refs,
                });
            }
            BankRef::Segment(b) => {
                let plan = b.plan();
                let refs = (0..plan.segments().len())
                    .map(|s| {
                        let weights = b.segment_bases(s);
                        let base = if weights.len() == 1 {
                            TableBase::Single(weights[0])
                        } else {
                            TableBase::Tuple {
                                weights,
                                act_bits: plan.act_bits(),
                            }
                        };
                        intern(
                            TableKey {
                                base,
                                folded: b.folded_input_weight(),
                            },
                            b.table(s),
                            b.width(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                consumers.push(Consumer {
                    kind: ConsumerKind::Segment { plan: plan.clone() },
                    refs,
                });
            }
        }
    }

    let distinct_bases = tables.len();
    let stats = SharedStats {
        unique_tables: tables.len(),
        referenced: consumers.iter().map(|c| c.refs.len()).sum(),
        distinct_pairs: pairs.len(),
        prefix_merges: pairs.len() - tables.len(),
        distinct_bases,
        distinct_cardinalities: cards.len(),
    };
    Ok(SharedBank {
        func,
        tables,
        consumers,
        stats,
    })
}

impl SharedBank {
    pub fn func(&self) -> &ConvFn {
        &self.func
    }

    pub fn tables(&self) -> &[SharedTable] {
        &self.tables
    }

    pub fn consumers(&self) -> &[Consumer] {
        &self.consumers
    }

    pub fn stats(&self) -> SharedStats {
        self.stats
    }

    /// Bytes of stored table entries (pointers excluded).
    pub fn memory_bytes(&self) -> u64 {
        self.tables
            .iter()
            .map(|t| (t.entries.len() * t.width.bytes()) as u64)
            .sum()
    }

    /// Entries seen by a reference.
    pub fn view(&self, r: TapRef) -> &[i64] {
        &self.tables[r.table].entries[..r.view_levels]
    }

    /// Inference for consumer `index` through the shared tables.
    pub fn conv2d(&self, index: usize, input: &QTensor) -> Result<AccTensor<i64>> {
        self.conv2d_counted(index, input).map(|(o, _)| o)
    }

    pub fn conv2d_counted(&self, index: usize, input: &QTensor) -> Result<(AccTensor<i64>, OpCounts)> {
        let consumer = self
            .consumers
            .get(index)
            .ok_or_else(|| Error::Config(format!("no consumer {index}")))?;
        let views: Vec<&[i64]> = consumer.refs.iter().map(|&r| self.view(r)).collect();
        match &consumer.kind {
            ConsumerKind::Basic {
                kh,
                kw,
                card,
                ifdr_weight,
            } => {
                if input.card() != *card {
                    return Err(Error::Shape(format!(
                        "input has {}-bit activations, consumer expects {}-bit",
                        input.card().bits(),
                        card.bits()
                    )));
                }
                let geom = ConvGeometry::new(input.shape(), (*kh, *kw))?;
                lookup_conv(input, &geom, &views, *ifdr_weight)
            }
            ConsumerKind::Segment { plan } => {
                if input.card().bits() != plan.act_bits() {
                    return Err(Error::Shape("activation width differs from the plan".into()));
                }
                let geom = ConvGeometry::new(input.shape(), plan.filter_shape())?;
                segment_conv(input, &geom, plan, &views)
            }
        }
    }
}

/// How indirection codes are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndirectionMode {
    /// Every code indexes the value pool.
    Plain,
    /// Codes with the top bit set carry a signed value of `index_bits - 1`
    /// bits inline; the rest index the pool.
    FlagInline,
}

/// Tables stored as narrow codes into a pool of distinct values, with
/// identical code arrays stored once (two-level indirection).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndirectBank {
    pub index_bits: u8,
    pub mode: IndirectionMode,
    pub values: Vec<i64>,
    pub value_width: EntryWidth,
    /// Distinct code arrays.
    pub arrays: Vec<Vec<u32>>,
    /// Shared table index to code array index.
    pub table_array: Vec<usize>,
}

/// Outcome of [`value_indirection`].
#[derive(Debug, Clone, PartialEq)]
pub enum Indirection {
    Feasible {
        bank: IndirectBank,
        direct_bytes: u64,
        indirect_bytes: u64,
    },
    Infeasible {
        distinct_values: usize,
        direct_bytes: u64,
        indirect_bytes: u64,
    },
}

fn inline_range(index_bits: u8) -> (i64, i64) {
    let half = 1i64 << (index_bits - 2);
    (-half, half - 1)
}

fn bits_to_bytes(bits: u64) -> u64 {
    bits.div_ceil(8)
}

/// Re-encode `shared` with `index_bits`-bit codes if the distinct values fit
/// and the codes are narrower than the entries.
pub fn value_indirection(shared: &SharedBank, index_bits: u8, mode: IndirectionMode) -> Result<Indirection> {
    let min_bits = if mode == IndirectionMode::FlagInline { 2 } else { 1 };
    if !(min_bits..=32).contains(&index_bits) {
        return Err(Error::Config(format!(
            "index bits must be in {min_bits}..=32, got {index_bits}"
        )));
    }
    let value_width = shared
        .tables
        .iter()
        .map(|t| t.width)
        .max()
        .unwrap_or(EntryWidth::I8);
    let direct_bytes = shared.memory_bytes();
    let total_entries: u64 = shared.tables.iter().map(|t| t.entries.len() as u64).sum();

    let inline = |v: i64| {
        mode == IndirectionMode::FlagInline && {
            let (lo, hi) = inline_range(index_bits);
            (lo..=hi).contains(&v)
        }
    };
    let pooled: BTreeSet<i64> = shared
        .tables
        .iter()
        .flat_map(|t| t.entries.iter().copied())
        .filter(|&v| !inline(v))
        .collect();
    let pool_limit = match mode {
        IndirectionMode::Plain => 1u64 << index_bits,
        IndirectionMode::FlagInline => 1u64 << (index_bits - 1),
    };
    let values: Vec<i64> = pooled.into_iter().collect();

    let mut arrays: Vec<Vec<u32>> = Vec::new();
    let mut table_array = Vec::with_capacity(shared.tables.len());
    let feasible = (values.len() as u64) <= pool_limit && (index_bits as u32) < value_width.bits();
    if feasible {
        let flag = 1u32 << (index_bits - 1);
        let mask = flag - 1;
        let mut seen: HashMap<Vec<u32>, usize> = HashMap::new();
        for t in &shared.tables {
            let codes: Vec<u32> = t
                .entries
                .iter()
                .map(|&v| {
                    if inline(v) {
                        flag | (v as u32 & mask)
                    } else {
                        values.binary_search(&v).expect("pooled value") as u32
                    }
                })
                .collect();
            let next = arrays.len();
            let id = *seen.entry(codes.clone()).or_insert(next);
            if id == next {
                arrays.push(codes);
            }
            table_array.push(id);
        }
    }
    let stored_codes: u64 = if feasible {
        arrays.iter().map(|a| a.len() as u64).sum()
    } else {
        total_entries
    };
    let indirect_bytes = bits_to_bytes(stored_codes * index_bits as u64)
        + (values.len() * value_width.bytes()) as u64;

    Ok(if feasible {
        Indirection::Feasible {
            bank: IndirectBank {
                index_bits,
                mode,
                values,
                value_width,
                arrays,
                table_array,
            },
            direct_bytes,
            indirect_bytes,
        }
    } else {
        Indirection::Infeasible {
            distinct_values: values.len(),
            direct_bytes,
            indirect_bytes,
        }
    })
}

impl IndirectBank {
    pub fn decode(&self, code: u32) -> i64 {
        let flag = 1u32 << (self.index_bits - 1);
        if self.mode == IndirectionMode::FlagInline && code & flag != 0 {
            // Sign-extend the (index_bits - 1)-bit payload.
            let shift = 64 - (self.index_bits as u32 - 1);
            (((code & (flag - 1)) as i64) << shift) >> shift
        } else {
            self.values[code as usize]
        }
    }

    /// Entries of shared table `table`.
    pub fn reconstruct(&self, table: usize) -> Vec<i64> {
        self.arrays[self.table_array[table]]
            .iter()
            .map(|&c| self.decode(c))
            .collect()
    }
}
