//! Bank serialization.
//!
//! Layout, little-endian:
//!
//! ```text
//! "PCB1" | kind u8 | entry width code u8 | header length u32 | JSON header | entry blocks
//! ```
//!
//! The header records the function, filter shape, activation bits, folded
//! scalar, bases and any kind-specific structure (segment plan, shared
//! table directory, learned parameters), plus the width and length of each
//! entry block that follows it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv_fn::ConvFn;
use crate::error::{Error, Result};
use crate::learned::{Granularity, LearnedBank};
use crate::num::{Acc, EntryWidth, Weight};
use crate::packing::{SegmentBank, SegmentPlan, SplitBank};
use crate::pcilt::PciltBank;
use crate::shared::{Consumer, ConsumerKind, SharedBank, SharedStats, SharedTable, TableKey};
use crate::tensor::{Cardinality, WeightKind};

pub const MAGIC: &[u8; 4] = b"PCB1";
const PRELUDE_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyBank {
    Basic(PciltBank<i32>),
    BasicReal(PciltBank<f64>),
    Segment(SegmentBank<i32>),
    SegmentReal(SegmentBank<f64>),
    Split(SplitBank<i32>),
    SplitReal(SplitBank<f64>),
    Shared(SharedBank),
    Learned(LearnedBank),
}

#[derive(Serialize, Deserialize)]
struct BasicMeta<W, A> {
    func: ConvFn,
    filter_shape: (usize, usize),
    act_bits: u8,
    kind: WeightKind,
    bases: Vec<W>,
    width: EntryWidth,
    folded: A,
    ifdr_weight: A,
    build_evals: u64,
}

#[derive(Serialize, Deserialize)]
struct SegmentMeta<W, A> {
    func: ConvFn,
    plan: String,
    kind: WeightKind,
    bases: Vec<W>,
    width: EntryWidth,
    folded: A,
    build_evals: u64,
}

#[derive(Serialize, Deserialize)]
struct SplitMeta<W, A> {
    act_bits: u8,
    part_bits: u8,
    lo: BasicMeta<W, A>,
    hi: BasicMeta<W, A>,
}

#[derive(Serialize, Deserialize)]
struct TableMeta {
    key: TableKey,
    width: EntryWidth,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct SharedMeta {
    func: ConvFn,
    tables: Vec<TableMeta>,
    consumers: Vec<Consumer>,
    stats: SharedStats,
}

#[derive(Serialize, Deserialize)]
struct LearnedMeta {
    filter_shape: (usize, usize),
    act_bits: u8,
    granularity: Granularity,
    params: Vec<f64>,
    hits: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "bank", rename_all = "snake_case")]
enum Header {
    Basic(BasicMeta<i32, i64>),
    BasicReal(BasicMeta<f64, f64>),
    Segment(SegmentMeta<i32, i64>),
    SegmentReal(SegmentMeta<f64, f64>),
    Split(SplitMeta<i32, i64>),
    SplitReal(SplitMeta<f64, f64>),
    Shared(SharedMeta),
    Learned(LearnedMeta),
}

impl Header {
    fn code(&self) -> u8 {
        match self {
            Header::Basic(_) => 1,
            Header::BasicReal(_) => 2,
            Header::Segment(_) => 3,
            Header::SegmentReal(_) => 4,
            Header::Split(_) => 5,
            Header::SplitReal(_) => 6,
            Header::Shared(_) => 7,
            Header::Learned(_) => 8,
        }
    }
}

fn basic_meta<W: Weight>(b: &PciltBank<W>) -> BasicMeta<W, W::Acc> {
    BasicMeta {
        func: b.func.clone(),
        filter_shape: (b.kh, b.kw),
        act_bits: b.card.bits(),
        kind: b.kind,
        bases: b.bases.clone(),
        width: b.width,
        folded: b.folded,
        ifdr_weight: b.ifdr_weight,
        build_evals: b.build_evals,
    }
}

fn segment_meta<W: Weight>(b: &SegmentBank<W>) -> SegmentMeta<W, W::Acc> {
    SegmentMeta {
        func: b.func.clone(),
        plan: b.plan.to_text(),
        kind: b.kind,
        bases: b.bases.clone(),
        width: b.width,
        folded: b.folded,
        build_evals: b.build_evals,
    }
}

fn write_block<A: Acc>(values: &[A], width: EntryWidth, out: &mut Vec<u8>) {
    for &v in values {
        v.write_le(width, out);
    }
}

/// Sequential reader over the entry blocks.
struct Blocks<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Blocks<'_> {
    fn take<A: Acc>(&mut self, width: EntryWidth, len: usize) -> Result<Vec<A>> {
        let need = len
            .checked_mul(width.bytes())
            .filter(|n| self.pos + n <= self.bytes.len())
            .ok_or_else(|| {
                Error::parse(
                    self.bytes.len() as u64,
                    format!("truncated entries: block of {len} x {width:?} at offset {}", self.pos),
                )
            })?;
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(width.bytes())
            .enumerate()
            .map(|(i, c)| {
                A::read_le(width, c).ok_or_else(|| {
                    Error::parse((self.pos + i * width.bytes()) as u64, format!("{width:?} entries do not match the bank type"))
                })
            })
            .collect::<Result<Vec<A>>>()?;
        self.pos += need;
        Ok(out)
    }
}

fn header_error(reason: impl Into<String>) -> Error {
    Error::parse(PRELUDE_LEN as u64, reason)
}

fn basic_from<W: Weight>(m: BasicMeta<W, W::Acc>, blocks: &mut Blocks<'_>) -> Result<PciltBank<W>> {
    let card = Cardinality::new(m.act_bits).map_err(|e| header_error(e.to_string()))?;
    let (kh, kw) = m.filter_shape;
    if kh * kw == 0 || m.bases.len() != kh * kw {
        return Err(header_error(format!("{} bases for a {kh}x{kw} filter", m.bases.len())));
    }
    let entries = blocks.take(m.width, kh * kw * card.levels())?;
    Ok(PciltBank {
        kh,
        kw,
        card,
        func: m.func,
        kind: m.kind,
        bases: m.bases,
        entries,
        width: m.width,
        folded: m.folded,
        ifdr_weight: m.ifdr_weight,
        build_evals: m.build_evals,
    })
}

fn segment_from<W: Weight>(m: SegmentMeta<W, W::Acc>, blocks: &mut Blocks<'_>) -> Result<SegmentBank<W>> {
    let plan = SegmentPlan::from_text(&m.plan).map_err(|e| header_error(e.to_string()))?;
    let (kh, kw) = plan.filter_shape();
    if m.bases.len() != kh * kw {
        return Err(header_error(format!("{} bases for a {kh}x{kw} filter", m.bases.len())));
    }
    let mut starts = vec![0];
    for s in 0..plan.segments().len() {
        starts.push(starts[s] + (1usize << plan.offset_bits(s)));
    }
    let entries = blocks.take(m.width, starts[starts.len() - 1])?;
    Ok(SegmentBank {
        plan,
        func: m.func,
        kind: m.kind,
        bases: m.bases,
        entries,
        starts,
        width: m.width,
        folded: m.folded,
        build_evals: m.build_evals,
    })
}

fn split_from<W: Weight>(m: SplitMeta<W, W::Acc>, blocks: &mut Blocks<'_>) -> Result<SplitBank<W>> {
    let lo = basic_from(m.lo, blocks)?;
    let hi = basic_from(m.hi, blocks)?;
    if lo.card.bits() != m.part_bits || lo.card.bits() + hi.card.bits() != m.act_bits {
        return Err(header_error("split field widths disagree with their tables"));
    }
    Ok(SplitBank {
        lo,
        hi,
        act_bits: m.act_bits,
        part_bits: m.part_bits,
    })
}

fn shared_from(m: SharedMeta, blocks: &mut Blocks<'_>) -> Result<SharedBank> {
    let mut tables = Vec::with_capacity(m.tables.len());
    for t in m.tables {
        tables.push(SharedTable {
            entries: blocks.take(t.width, t.len)?,
            key: t.key,
            width: t.width,
        });
    }
    for c in &m.consumers {
        for r in &c.refs {
            let ok = tables.get(r.table).is_some_and(|t| r.view_levels <= t.entries.len());
            if !ok {
                return Err(header_error(format!("reference {r:?} outside the table directory")));
            }
        }
        let expected = match &c.kind {
            ConsumerKind::Basic { kh, kw, .. } => kh * kw,
            ConsumerKind::Segment { plan } => plan.segments().len(),
        };
        if c.refs.len() != expected {
            return Err(header_error(format!("consumer has {} references, expected {expected}", c.refs.len())));
        }
    }
    Ok(SharedBank {
        func: m.func,
        tables,
        consumers: m.consumers,
        stats: m.stats,
    })
}

fn learned_from(m: LearnedMeta, blocks: &mut Blocks<'_>) -> Result<LearnedBank> {
    let card = Cardinality::new(m.act_bits).map_err(|e| header_error(e.to_string()))?;
    let (kh, kw) = m.filter_shape;
    let base = blocks.take(EntryWidth::F64, kh * kw * card.levels())?;
    let mut bank = LearnedBank::from_tables(kh, kw, card, m.granularity, base)
        .map_err(|e| header_error(e.to_string()))?;
    if m.hits.len() != bank.hits.len() {
        return Err(header_error("hit counter count disagrees with the tables"));
    }
    bank.set_params(m.params).map_err(|e| header_error(e.to_string()))?;
    bank.hits = m.hits;
    bank.version = 0;
    Ok(bank)
}

impl AnyBank {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AnyBank::Basic(_) | AnyBank::BasicReal(_) => "basic",
            AnyBank::Segment(_) | AnyBank::SegmentReal(_) => "segment",
            AnyBank::Split(_) | AnyBank::SplitReal(_) => "split",
            AnyBank::Shared(_) => "shared",
            AnyBank::Learned(_) => "learned",
        }
    }

    /// Function evaluations spent building the tables.
    pub fn build_evals(&self) -> u64 {
        match self {
            AnyBank::Basic(b) => b.build_evals(),
            AnyBank::BasicReal(b) => b.build_evals(),
            AnyBank::Segment(b) => b.build_evals(),
            AnyBank::SegmentReal(b) => b.build_evals(),
            AnyBank::Split(b) => b.build_evals(),
            AnyBank::SplitReal(b) => b.build_evals(),
            AnyBank::Shared(_) | AnyBank::Learned(_) => 0,
        }
    }

    pub fn memory_bytes(&self) -> u64 {
        match self {
            AnyBank::Basic(b) => b.memory_bytes(),
            AnyBank::BasicReal(b) => b.memory_bytes(),
            AnyBank::Segment(b) => b.memory_bytes(),
            AnyBank::SegmentReal(b) => b.memory_bytes(),
            AnyBank::Split(b) => b.memory_bytes(),
            AnyBank::SplitReal(b) => b.memory_bytes(),
            AnyBank::Shared(b) => b.memory_bytes(),
            AnyBank::Learned(b) => (b.base.len() * 8) as u64,
        }
    }

    fn header_and_entries(&self) -> (Header, u8, Vec<u8>) {
        let mut out = Vec::new();
        let (header, width) = match self {
            AnyBank::Basic(b) => {
                write_block(&b.entries, b.width, &mut out);
                (Header::Basic(basic_meta(b)), b.width)
            }
            AnyBank::BasicReal(b) => {
                write_block(&b.entries, b.width, &mut out);
                (Header::BasicReal(basic_meta(b)), b.width)
            }
            AnyBank::Segment(b) => {
                write_block(&b.entries, b.width, &mut out);
                (Header::Segment(segment_meta(b)), b.width)
            }
            AnyBank::SegmentReal(b) => {
                write_block(&b.entries, b.width, &mut out);
                (Header::SegmentReal(segment_meta(b)), b.width)
            }
            AnyBank::Split(b) => {
                write_block(&b.lo.entries, b.lo.width, &mut out);
                write_block(&b.hi.entries, b.hi.width, &mut out);
                let meta = SplitMeta {
                    act_bits: b.act_bits,
                    part_bits: b.part_bits,
                    lo: basic_meta(&b.lo),
                    hi: basic_meta(&b.hi),
                };
                (Header::Split(meta), b.lo.width.max(b.hi.width))
            }
            AnyBank::SplitReal(b) => {
                write_block(&b.lo.entries, b.lo.width, &mut out);
                write_block(&b.hi.entries, b.hi.width, &mut out);
                let meta = SplitMeta {
                    act_bits: b.act_bits,
                    part_bits: b.part_bits,
                    lo: basic_meta(&b.lo),
                    hi: basic_meta(&b.hi),
                };
                (Header::SplitReal(meta), EntryWidth::F64)
            }
            AnyBank::Shared(b) => {
                let mut tables = Vec::with_capacity(b.tables.len());
                for t in &b.tables {
                    write_block(&t.entries, t.width, &mut out);
                    tables.push(TableMeta {
                        key: t.key.clone(),
                        width: t.width,
                        len: t.entries.len(),
                    });
                }
                let widest = b.tables.iter().map(|t| t.width).max().unwrap_or(EntryWidth::I8);
                let meta = SharedMeta {
                    func: b.func.clone(),
                    tables,
                    consumers: b.consumers.clone(),
                    stats: b.stats,
                };
                (Header::Shared(meta), widest)
            }
            AnyBank::Learned(b) => {
                write_block(&b.base, EntryWidth::F64, &mut out);
                let meta = LearnedMeta {
                    filter_shape: (b.kh, b.kw),
                    act_bits: b.card.bits(),
                    granularity: b.granularity,
                    params: b.params.clone(),
                    hits: b.hits.clone(),
                };
                (Header::Learned(meta), EntryWidth::F64)
            }
        };
        (header, width.code(), out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let (header, width, entries) = self.header_and_entries();
        let json = serde_json::to_vec(&header).expect("bank header serializes");
        let mut out = Vec::with_capacity(PRELUDE_LEN + json.len() + entries.len());
        out.extend_from_slice(MAGIC);
        out.push(header.code());
        out.push(width);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&entries);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<AnyBank> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::parse(0, "bad magic"));
        }
        if bytes.len() < PRELUDE_LEN {
            return Err(Error::parse(bytes.len() as u64, "truncated prelude"));
        }
        let code = bytes[4];
        if EntryWidth::from_code(bytes[5]).is_none() {
            return Err(Error::parse(5, format!("unknown entry width code {}", bytes[5])));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let end = PRELUDE_LEN
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::parse(bytes.len() as u64, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[PRELUDE_LEN..end])
            .map_err(|e| header_error(format!("malformed header: {e}")))?;
        if header.code() != code {
            return Err(Error::parse(4, format!("kind code {code} disagrees with the header")));
        }
        let mut blocks = Blocks {
            bytes: &bytes[end..],
            pos: 0,
        };
        let bank = match header {
            Header::Basic(m) => AnyBank::Basic(basic_from(m, &mut blocks)?),
            Header::BasicReal(m) => AnyBank::BasicReal(basic_from(m, &mut blocks)?),
            Header::Segment(m) => AnyBank::Segment(segment_from(m, &mut blocks)?),
            Header::SegmentReal(m) => AnyBank::SegmentReal(segment_from(m, &mut blocks)?),
            Header::Split(m) => AnyBank::Split(split_from(m, &mut blocks)?),
            Header::SplitReal(m) => AnyBank::SplitReal(split_from(m, &mut blocks)?),
            Header::Shared(m) => AnyBank::Shared(shared_from(m, &mut blocks)?),
            Header::Learned(m) => AnyBank::Learned(learned_from(m, &mut blocks)?),
        };
        if blocks.pos != blocks.bytes.len() {
            return Err(Error::parse((end + blocks.pos) as u64, "trailing bytes after entries"));
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<AnyBank> {
        AnyBank::decode(&std::fs::read(path)?)
    }
}
