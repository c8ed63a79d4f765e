//! Segment tables addressed by packed activations.
//!
//! A segment groups several filter taps. At inference the activations under
//! those taps are concatenated with shifts and ors into one offset, and the
//! segment table returns the summed contribution of all its taps in a single
//! read. Tap `k` of a segment occupies bits `[k*b, (k+1)*b)` of the offset,
//! tap 0 in the lowest bits, where `b` is the activation bit width.
//!
//! Plans may leave taps out (the tap contributes nothing) or list a tap more
//! than once (its contribution is counted once per occurrence).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv_fn::ConvFn;
use crate::error::{Error, Result};
use crate::num::{check_accumulation, check_width, max_magnitude, Acc, EntryWidth, Weight};
use crate::pcilt::{build_bank, build_pcilt, fold_input_weight, PciltBank};
use crate::reference::{ConvGeometry, OpCounts};
use crate::tensor::{AccTensor, Cardinality, Filter, QTensor, WeightKind};

/// Largest packed offset, in bits. Caps a single table at 2^24 entries.
pub const MAX_OFFSET_BITS: u32 = 24;

/// Assignment of filter taps (row-major indices) to segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    kh: usize,
    kw: usize,
    act_bits: u8,
    segments: Vec<Vec<usize>>,
}

impl SegmentPlan {
    /// Accept an explicit plan.
    pub fn new(kh: usize, kw: usize, act_bits: u8, segments: Vec<Vec<usize>>) -> Result<Self> {
        Cardinality::new(act_bits)?;
        if kh == 0 || kw == 0 {
            return Err(Error::Config("empty filter shape".into()));
        }
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::Config(format!("segment {s} is empty")));
            }
            if let Some(t) = seg.iter().find(|&&t| t >= kh * kw) {
                return Err(Error::Config(format!(
                    "segment {s} names tap {t} of a {kh}x{kw} filter"
                )));
            }
            let bits = seg.len() as u32 * act_bits as u32;
            if bits > MAX_OFFSET_BITS {
                return Err(Error::Config(format!(
                    "segment {s} needs {bits}-bit offsets (limit {MAX_OFFSET_BITS})"
                )));
            }
        }
        Ok(SegmentPlan {
            kh,
            kw,
            act_bits,
            segments,
        })
    }

    pub fn filter_shape(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn act_bits(&self) -> u8 {
        self.act_bits
    }

    pub fn segments(&self) -> &[Vec<usize>] {
        &self.segments
    }

    pub fn offset_bits(&self, segment: usize) -> u32 {
        self.segments[segment].len() as u32 * self.act_bits as u32
    }

    /// How many times each tap occurs across all segments.
    pub fn multiplicity(&self) -> Vec<usize> {
        let mut m = vec![0; self.kh * self.kw];
        for &t in self.segments.iter().flatten() {
            m[t] += 1;
        }
        m
    }

    /// True when every tap occurs exactly once.
    pub fn is_plain(&self) -> bool {
        self.multiplicity().iter().all(|&m| m == 1)
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let raw: SegmentPlan =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("plan: {e}")))?;
        SegmentPlan::new(raw.kh, raw.kw, raw.act_bits, raw.segments)
    }
}

/// Greedy row-major plan: every tap not in `skips` is emitted once, plus once
/// more per occurrence in `repeats`, and the sequence is cut into segments of
/// `segment_len` taps.
pub fn compile_plan(
    filter_shape: (usize, usize),
    act_bits: u8,
    segment_len: usize,
    skips: &[usize],
    repeats: &[usize],
) -> Result<SegmentPlan> {
    let (kh, kw) = filter_shape;
    let taps = kh * kw;
    if segment_len == 0 {
        return Err(Error::Config("segment length must be at least 1".into()));
    }
    if segment_len as u64 * act_bits as u64 > MAX_OFFSET_BITS as u64 {
        return Err(Error::Config(format!(
            "{segment_len} taps of {act_bits} bits exceed {MAX_OFFSET_BITS}-bit offsets"
        )));
    }
    if let Some(t) = skips.iter().chain(repeats).find(|&&t| t >= taps) {
        return Err(Error::Config(format!("tap {t} does not exist in a {kh}x{kw} filter")));
    }
    if let Some(t) = repeats.iter().find(|t| skips.contains(t)) {
        return Err(Error::Config(format!("tap {t} is both skipped and repeated")));
    }
    let order: Vec<usize> = (0..taps)
        .filter(|t| !skips.contains(t))
        .flat_map(|t| std::iter::repeat_n(t, 1 + repeats.iter().filter(|&&r| r == t).count()))
        .collect();
    let segments = order.chunks(segment_len).map(<[usize]>::to_vec).collect();
    SegmentPlan::new(kh, kw, act_bits, segments)
}

/// Packed offset of every segment for one receptive field (`window` holds the
/// activations under each tap, row-major).
pub fn pack_window(window: &[u16], plan: &SegmentPlan) -> Vec<u32> {
    let b = plan.act_bits as u32;
    plan.segments
        .iter()
        .map(|seg| {
            seg.iter()
                .enumerate()
                .fold(0u32, |off, (k, &t)| off | ((window[t] as u32) << (k as u32 * b)))
        })
        .collect()
}

/// Unpack the activation of segment position `k` from an offset.
pub fn unpack(offset: u32, k: usize, act_bits: u8) -> u32 {
    (offset >> (k as u32 * act_bits as u32)) & ((1u32 << act_bits) - 1)
}

/// One table per segment; the entry at offset `o` is the summed contribution
/// of the segment's taps for the activations packed in `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBank<W: Weight> {
    pub(crate) plan: SegmentPlan,
    pub(crate) func: ConvFn,
    pub(crate) kind: WeightKind,
    pub(crate) bases: Vec<W>,
    pub(crate) entries: Vec<W::Acc>,
    /// Start of each segment's table in `entries`, plus a final end marker.
    pub(crate) starts: Vec<usize>,
    pub(crate) width: EntryWidth,
    pub(crate) folded: W::Acc,
    pub(crate) build_evals: u64,
}

pub fn build_segment_bank<W: Weight>(
    filter: &Filter<W>,
    plan: &SegmentPlan,
    f: &ConvFn,
) -> Result<SegmentBank<W>> {
    if filter.shape() != plan.filter_shape() {
        return Err(Error::Shape(format!(
            "plan is for a {:?} filter, got {:?}",
            plan.filter_shape(),
            filter.shape()
        )));
    }
    let card = Cardinality::new(plan.act_bits)?;
    let folded = filter.input_weight();
    let longest = plan.segments.iter().map(Vec::len).max().unwrap_or(1);
    // Segment sums span up to `longest` per-tap ranges.
    let mut span = W::Acc::ZERO;
    for _ in 0..longest {
        span += folded;
    }
    let width = W::default_width(filter.kind(), f, card, span)?;
    let mut entries = Vec::new();
    let mut starts = vec![0];
    let mut evals = 0u64;
    for seg in &plan.segments {
        let mut acc = vec![W::Acc::ZERO];
        for &t in seg {
            let w = filter.weights()[t];
            let tap = build_pcilt(w, card, f)?;
            evals += tap.levels() as u64;
            let mut next = Vec::with_capacity(acc.len() * tap.levels());
            for (a, &v) in tap.entries.iter().enumerate() {
                let v = folded.checked_mul(v).ok_or_else(|| {
                    Error::Range(format!("(w={w:?}, a={a}) overflows after folding"))
                })?;
                for &lo in &acc {
                    next.push(lo.checked_add(v).ok_or_else(|| {
                        Error::Range(format!("segment sum overflows at tap {t}"))
                    })?);
                }
            }
            acc = next;
        }
        for (o, &v) in acc.iter().enumerate() {
            check_width(v, width, || format!("segment offset {o}"))?;
        }
        entries.extend_from_slice(&acc);
        starts.push(entries.len());
    }
    check_accumulation(max_magnitude(&entries), plan.segments.len(), W::Acc::ONE)?;
    Ok(SegmentBank {
        plan: plan.clone(),
        func: f.clone(),
        kind: filter.kind(),
        bases: filter.weights().to_vec(),
        entries,
        starts,
        width,
        folded,
        build_evals: evals,
    })
}

impl<W: Weight> SegmentBank<W> {
    pub fn plan(&self) -> &SegmentPlan {
        &self.plan
    }

    pub fn func(&self) -> &ConvFn {
        &self.func
    }

    pub fn fn_id(&self) -> &'static str {
        self.func.id()
    }

    pub fn card(&self) -> Cardinality {
        Cardinality::new(self.plan.act_bits).expect("validated plan")
    }

    pub fn bases(&self) -> &[W] {
        &self.bases
    }

    /// Weights of a segment's taps in offset order.
    pub fn segment_bases(&self, segment: usize) -> Vec<W> {
        self.plan.segments[segment].iter().map(|&t| self.bases[t]).collect()
    }

    pub fn table(&self, segment: usize) -> &[W::Acc] {
        &self.entries[self.starts[segment]..self.starts[segment + 1]]
    }

    pub fn tables(&self) -> impl Iterator<Item = &[W::Acc]> {
        (0..self.plan.segments.len()).map(move |s| self.table(s))
    }

    pub fn width(&self) -> EntryWidth {
        self.width
    }

    pub fn folded_input_weight(&self) -> W::Acc {
        self.folded
    }

    pub fn build_evals(&self) -> u64 {
        self.build_evals
    }

    pub fn memory_bytes(&self) -> u64 {
        (self.entries.len() * self.width.bytes()) as u64
    }

    pub fn weight_kind(&self) -> WeightKind {
        self.kind
    }

    /// The filter this bank was built from, input weight included.
    pub fn filter(&self) -> Result<Filter<W>> {
        let (kh, kw) = self.plan.filter_shape();
        Ok(W::filter_from(self.kind, kh, kw, self.bases.clone())?.with_input_weight(self.folded))
    }

    #[doc(hidden)]
    pub fn entries_mut(&mut self) -> &mut [W::Acc] {
        &mut self.entries
    }
}

/// Filter whose DM result equals packed inference under `plan` for the
/// product function: skipped taps get weight 0, repeated taps their weight
/// times the multiplicity.
pub fn effective_filter(filter: &Filter<i32>, plan: &SegmentPlan) -> Filter<i32> {
    let weights = filter
        .weights()
        .iter()
        .zip(plan.multiplicity())
        .map(|(&w, m)| w * m as i32)
        .collect();
    filter.with_weights(weights)
}

pub fn packed_conv2d<W: Weight>(input: &QTensor, bank: &SegmentBank<W>) -> Result<AccTensor<W::Acc>> {
    packed_conv2d_counted(input, bank).map(|(o, _)| o)
}

/// Packed inference with operation counts. Offsets for a whole output row are
/// formed first (shifts and ors only), then each segment costs one lookup per
/// position.
pub fn packed_conv2d_counted<W: Weight>(
    input: &QTensor,
    bank: &SegmentBank<W>,
) -> Result<(AccTensor<W::Acc>, OpCounts)> {
    let plan = &bank.plan;
    if input.card().bits() != plan.act_bits {
        return Err(Error::Shape(format!(
            "input has {}-bit activations, plan expects {}-bit",
            input.card().bits(),
            plan.act_bits
        )));
    }
    let geom = ConvGeometry::new(input.shape(), plan.filter_shape())?;
    let tables: Vec<&[W::Acc]> = bank.tables().collect();
    segment_conv(input, &geom, plan, &tables)
}

pub(crate) fn segment_conv<A: Acc>(
    input: &QTensor,
    geom: &ConvGeometry,
    plan: &SegmentPlan,
    tables: &[&[A]],
) -> Result<(AccTensor<A>, OpCounts)> {
    let (oh, ow) = geom.out_shape();
    let kw = plan.kw;
    let b = plan.act_bits as u32;
    let nseg = plan.segments.len();

    let mut out = vec![A::ZERO; oh * ow];
    let counts = out
        .par_chunks_mut(ow)
        .enumerate()
        .map_init(
            || vec![0u32; ow],
            |offsets, (y, row)| {
                for (seg, table) in plan.segments.iter().zip(tables) {
                    offsets.fill(0);
                    for (k, &t) in seg.iter().enumerate() {
                        let src = &input.row(y + t / kw)[t % kw..t % kw + ow];
                        let shift = k as u32 * b;
                        for (o, &a) in offsets.iter_mut().zip(src) {
                            *o |= (a as u32) << shift;
                        }
                    }
                    for (acc, &o) in row.iter_mut().zip(offsets.iter()) {
                        *acc += table[o as usize];
                    }
                }
                OpCounts {
                    lookups: (nseg * ow) as u64,
                    adds: (nseg.saturating_sub(1) * ow) as u64,
                    ..OpCounts::default()
                }
            },
        )
        .reduce(OpCounts::default, |a, b| a + b);
    Ok((AccTensor::new(oh, ow, out)?, counts))
}

/// Two banks over the low and high bit fields of each activation.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBank<W: Weight> {
    pub(crate) lo: PciltBank<W>,
    pub(crate) hi: PciltBank<W>,
    pub(crate) act_bits: u8,
    pub(crate) part_bits: u8,
}

/// Split `act_bits`-bit activations into a low field of `part_bits` bits and
/// a high field of the rest. Low tables hold `f(w, a_lo)`, high tables
/// `f(w, a_hi) * 2^part_bits`; the two reads sum to `f(w, a)` only when `f`
/// distributes over addition, so only `product` is accepted.
pub fn build_split_bank<W: Weight>(
    filter: &Filter<W>,
    act_bits: u8,
    part_bits: u8,
    f: &ConvFn,
) -> Result<SplitBank<W>> {
    if !f.is_product() {
        return Err(Error::Unsupported(format!(
            "activation splitting needs `product`, got `{}`",
            f.id()
        )));
    }
    Cardinality::new(act_bits)?;
    if part_bits == 0 || part_bits >= act_bits {
        return Err(Error::Config(format!(
            "split of {act_bits}-bit activations needs 1 <= part bits < {act_bits}, got {part_bits}"
        )));
    }
    let lo = build_bank(filter, Cardinality::new(part_bits)?, f)?;
    let hi = build_bank(filter, Cardinality::new(act_bits - part_bits)?, f)?;
    let shift = W::Acc::ONE
        .shl(part_bits as u32)
        .ok_or_else(|| Error::Range("split shift overflows".into()))?;
    let hi = fold_input_weight(&hi, shift)?;
    let (mlo, mhi) = (max_magnitude(lo.entries()), max_magnitude(hi.entries()));
    let widest = if mhi.abs_f64() >= mlo.abs_f64() { mhi } else { mlo };
    check_accumulation(widest, 2 * filter.taps(), W::Acc::ONE)?;
    Ok(SplitBank {
        lo,
        hi,
        act_bits,
        part_bits,
    })
}

impl<W: Weight> SplitBank<W> {
    pub fn lo(&self) -> &PciltBank<W> {
        &self.lo
    }

    pub fn hi(&self) -> &PciltBank<W> {
        &self.hi
    }

    pub fn act_bits(&self) -> u8 {
        self.act_bits
    }

    pub fn part_bits(&self) -> u8 {
        self.part_bits
    }

    pub fn card(&self) -> Cardinality {
        Cardinality::new(self.act_bits).expect("validated")
    }

    pub fn memory_bytes(&self) -> u64 {
        self.lo.memory_bytes() + self.hi.memory_bytes()
    }

    pub fn build_evals(&self) -> u64 {
        self.lo.build_evals() + self.hi.build_evals()
    }
}

pub fn split_conv2d<W: Weight>(input: &QTensor, bank: &SplitBank<W>) -> Result<AccTensor<W::Acc>> {
    split_conv2d_counted(input, bank).map(|(o, _)| o)
}

pub fn split_conv2d_counted<W: Weight>(
    input: &QTensor,
    bank: &SplitBank<W>,
) -> Result<(AccTensor<W::Acc>, OpCounts)> {
    if input.card().bits() != bank.act_bits {
        return Err(Error::Shape(format!(
            "input has {}-bit activations, split bank expects {}-bit",
            input.card().bits(),
            bank.act_bits
        )));
    }
    let (kh, kw) = bank.lo.filter_shape();
    let geom = ConvGeometry::new(input.shape(), (kh, kw))?;
    let (oh, ow) = geom.out_shape();
    let p = bank.part_bits as u32;
    let mask = (1u16 << p) - 1;
    let taps = kh * kw;

    let mut out = vec![W::Acc::ZERO; oh * ow];
    let counts = out
        .par_chunks_mut(ow)
        .enumerate()
        .map(|(y, row)| {
            for t in 0..taps {
                let src = &input.row(y + t / kw)[t % kw..t % kw + ow];
                let (lo, hi) = (bank.lo.table(t), bank.hi.table(t));
                for (acc, &a) in row.iter_mut().zip(src) {
                    *acc += lo[(a & mask) as usize] + hi[(a >> p) as usize];
                }
            }
            OpCounts {
                lookups: (2 * taps * ow) as u64,
                adds: ((2 * taps - 1) * ow) as u64,
                ..OpCounts::default()
            }
        })
        .reduce(OpCounts::default, |a, b| a + b);
    Ok((AccTensor::new(oh, ow, out)?, counts))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pcilt::pcilt_conv2d;
    use crate::reference::dm_conv2d;

    fn c(bits: u8) -> Cardinality {
        Cardinality::new(bits).unwrap()
    }

    #[test]
    fn greedy_plans() {
        let p = compile_plan((5, 5), 1, 8, &[], &[]).unwrap();
        let sizes: Vec<usize> = p.segments().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![8, 8, 8, 1]);
        let p = compile_plan((5, 5), 8, 1, &[], &[]).unwrap();
        assert_eq!(p.segments().len(), 25);
        let p = compile_plan((1, 2), 1, 2, &[], &[0]).unwrap();
        assert_eq!(p.segments(), &[vec![0, 0], vec![1]]);
        let p = compile_plan((2, 2), 2, 3, &[1], &[]).unwrap();
        assert_eq!(p.segments(), &[vec![0, 2, 3]]);
    }

    #[test]
    fn plan_errors() {
        assert!(matches!(compile_plan((2, 2), 1, 2, &[4], &[]), Err(Error::Config(_))));
        assert!(matches!(compile_plan((2, 2), 8, 4, &[], &[]), Err(Error::Config(_))));
        assert!(matches!(compile_plan((2, 2), 1, 0, &[], &[]), Err(Error::Config(_))));
        assert!(matches!(compile_plan((2, 2), 1, 2, &[1], &[1]), Err(Error::Config(_))));
        assert!(SegmentPlan::new(2, 2, 8, vec![vec![0, 1, 2, 3]]).is_err());
        assert!(SegmentPlan::new(2, 2, 8, vec![vec![0, 1, 2]]).is_ok());
    }

    #[test]
    fn plan_text_roundtrip() {
        let p = compile_plan((3, 3), 2, 4, &[4], &[0, 0]).unwrap();
        assert_eq!(SegmentPlan::from_text(&p.to_text()).unwrap(), p);
        assert!(SegmentPlan::from_text(r#"{"kh":1,"kw":1,"act_bits":1,"segments":[[3]]}"#).is_err());
    }

    #[test]
    fn pack_examples() {
        let plan = compile_plan((1, 8), 1, 8, &[], &[]).unwrap();
        let mut window = [0u16; 8];
        window[0] = 1;
        window[7] = 1;
        assert_eq!(pack_window(&window, &plan), vec![129]);
        assert_eq!(pack_window(&[0; 8], &plan), vec![0]);
        let plan = compile_plan((1, 2), 2, 2, &[], &[]).unwrap();
        assert_eq!(pack_window(&[3, 1], &plan), vec![7]);
    }

    #[test]
    fn segment_table_examples() {
        let f = Filter::int(1, 2, 3, vec![1, 2]).unwrap();
        let plan = compile_plan((1, 2), 1, 2, &[], &[]).unwrap();
        let bank = build_segment_bank(&f, &plan, &ConvFn::Product).unwrap();
        assert_eq!(bank.table(0), &[0, 1, 2, 3]);

        let f = Filter::int(1, 1, 4, vec![5]).unwrap();
        let plan = SegmentPlan::new(1, 1, 1, vec![vec![0, 0]]).unwrap();
        let bank = build_segment_bank(&f, &plan, &ConvFn::Product).unwrap();
        assert_eq!(bank.table(0)[0b11], 10);
        assert_eq!(bank.table(0)[0], 0);
    }

    #[test]
    fn segment_tables_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fns = [ConvFn::Product, ConvFn::LogProduct];
        for bits in [1u8, 2, 3, 4] {
            for f in &fns {
                let filter = Filter::random(3, 3, 5, &mut rng).unwrap();
                let n = (12 / bits as usize).min(9);
                let plan = compile_plan((3, 3), bits, n, &[], &[2]).unwrap();
                let bank = build_segment_bank(&filter, &plan, f).unwrap();
                for (s, seg) in plan.segments().iter().enumerate() {
                    let table = bank.table(s);
                    assert_eq!(table.len(), 1 << plan.offset_bits(s));
                    for (o, &got) in table.iter().enumerate() {
                        let want: i64 = seg
                            .iter()
                            .enumerate()
                            .map(|(k, &t)| f.eval_int(filter.weights()[t], unpack(o as u32, k, bits)).unwrap())
                            .sum();
                        assert_eq!(got, want, "segment {s} offset {o}");
                    }
                }
            }
        }
    }

    #[test]
    fn packed_matches_window_packing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let filter = Filter::random(3, 4, 4, &mut rng).unwrap();
        let plan = compile_plan((3, 4), 2, 5, &[3], &[7]).unwrap();
        let bank = build_segment_bank(&filter, &plan, &ConvFn::Product).unwrap();
        let input = QTensor::random(7, 9, c(2), &mut rng).unwrap();
        let out = packed_conv2d(&input, &bank).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let window: Vec<u16> = (0..12).map(|t| input.get(y + t / 4, x + t % 4)).collect();
                let want: i64 = pack_window(&window, &plan)
                    .iter()
                    .enumerate()
                    .map(|(s, &o)| bank.table(s)[o as usize])
                    .sum();
                assert_eq!(out.get(y, x), want);
            }
        }
    }

    #[test]
    fn packed_equivalence_and_effective_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let (kh, kw) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let bits = [1u8, 2, 4, 8][rng.gen_range(0..4)];
            let n = rng.gen_range(1..=(16 / bits as usize).min(kh * kw));
            let filter = Filter::random(kh, kw, 8, &mut rng).unwrap().with_input_weight(rng.gen_range(-3..=3));
            let input = QTensor::random(kh + rng.gen_range(0..8), kw + rng.gen_range(0..8), c(bits), &mut rng).unwrap();
            let dm = dm_conv2d(&input, &filter, &ConvFn::Product).unwrap();

            let plan = compile_plan((kh, kw), bits, n, &[], &[]).unwrap();
            let bank = build_segment_bank(&filter, &plan, &ConvFn::Product).unwrap();
            let (packed, counts) = packed_conv2d_counted(&input, &bank).unwrap();
            assert_eq!(packed, dm);
            assert_eq!(packed, pcilt_conv2d(&input, &crate::pcilt::build_bank(&filter, c(bits), &ConvFn::Product).unwrap()).unwrap());
            let positions = dm.values().len() as u64;
            assert_eq!(counts.lookups, positions * (kh * kw).div_ceil(n) as u64);

            let t = rng.gen_range(0..kh * kw);
            let skip = compile_plan((kh, kw), bits, n, &[t], &[]).unwrap();
            let mut zeroed = filter.weights().to_vec();
            zeroed[t] = 0;
            let want = dm_conv2d(&input, &filter.with_weights(zeroed), &ConvFn::Product).unwrap();
            let got = packed_conv2d(&input, &build_segment_bank(&filter, &skip, &ConvFn::Product).unwrap()).unwrap();
            assert_eq!(got, want);

            if (n + 1) * (bits as usize) <= 16 {
                let rep = compile_plan((kh, kw), bits, n, &[], &[t]).unwrap();
                let mut doubled = filter.weights().to_vec();
                doubled[t] *= 2;
                let want = dm_conv2d(&input, &filter.with_weights(doubled), &ConvFn::Product).unwrap();
                let got = packed_conv2d(&input, &build_segment_bank(&filter, &rep, &ConvFn::Product).unwrap()).unwrap();
                assert_eq!(got, want);
                assert_eq!(effective_filter(&filter, &rep).weights()[t], 2 * filter.weights()[t]);
            }
        }
    }

    #[test]
    fn split_example() {
        let f = Filter::int(1, 1, 3, vec![3]).unwrap();
        let bank = build_split_bank(&f, 8, 4, &ConvFn::Product).unwrap();
        let a = 0x5Cusize;
        let lo = bank.lo().table(0)[a & 0xF];
        let hi = bank.hi().table(0)[a >> 4];
        assert_eq!((lo, hi, lo + hi), (36, 240, 276));
        assert_eq!(bank.lo().table(0)[0] + bank.hi().table(0)[0], 0);
    }

    #[test]
    fn split_rejects_non_product_and_bad_parts() {
        let f = Filter::int(1, 1, 3, vec![3]).unwrap();
        assert!(matches!(build_split_bank(&f, 8, 4, &ConvFn::LogProduct), Err(Error::Unsupported(_))));
        assert!(matches!(build_split_bank(&f, 8, 8, &ConvFn::Product), Err(Error::Config(_))));
        assert!(matches!(build_split_bank(&f, 1, 1, &ConvFn::Product), Err(Error::Config(_))));
    }

    #[test]
    fn split_matches_dm() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let (kh, kw) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let bits = rng.gen_range(2..=12u8);
            let p = rng.gen_range(1..bits);
            let filter = Filter::random(kh, kw, 8, &mut rng).unwrap().with_input_weight(rng.gen_range(-2..=2));
            let input = QTensor::random(kh + rng.gen_range(0..6), kw + rng.gen_range(0..6), c(bits), &mut rng).unwrap();
            let bank = build_split_bank(&filter, bits, p, &ConvFn::Product).unwrap();
            assert_eq!(split_conv2d(&input, &bank).unwrap(), dm_conv2d(&input, &filter, &ConvFn::Product).unwrap());
        }
    }
}
