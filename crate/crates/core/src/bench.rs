//! Equivalence checking against the direct-multiplication oracle, and a
//! timing harness that refuses to report speed for wrong answers.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bankfile::AnyBank;
use crate::conv_fn::ConvFn;
use crate::error::{Error, Result};
use crate::num::{Acc, Weight};
use crate::packing::{effective_filter, packed_conv2d, split_conv2d, SegmentBank, SegmentPlan};
use crate::pcilt::{build_bank, pcilt_conv2d};
use crate::reference::dm_conv2d;
use crate::shared::{ConsumerKind, SharedBank, TableBase};
use crate::tensor::{AccTensor, Cardinality, Filter, QTensor};

/// Speedup of 8-tap boolean packing over direct multiplication measured on
/// unspecified hardware; carried in reports for context, never asserted.
pub const REFERENCE_PACKED_SPEEDUP: f64 = 6.59;

/// Relative tolerance for real-valued banks whose tables pre-sum several
/// taps, which reorders floating-point additions.
pub const REAL_REORDER_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub seed: u64,
    pub consumer: usize,
    pub row: usize,
    pub col: usize,
    pub expected: String,
    pub got: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub bank_kind: String,
    pub seeds: u64,
    pub comparisons: u64,
    pub exact: bool,
    pub mismatches: Vec<Mismatch>,
    pub warning: Option<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// One comparable output: the bank's result and the oracle's.
enum Pair {
    Int(AccTensor<i64>, AccTensor<i64>),
    Real(AccTensor<f64>, AccTensor<f64>),
}

fn first_difference<A: Acc>(got: &AccTensor<A>, want: &AccTensor<A>, tol: f64) -> Option<(usize, usize, String, String)> {
    let (_, cols) = want.shape();
    got.values()
        .iter()
        .zip(want.values())
        .position(|(&g, &w)| {
            if tol == 0.0 {
                g.checksum_bytes() != w.checksum_bytes()
            } else {
                (g.to_f64() - w.to_f64()).abs() > tol * w.to_f64().abs().max(1.0)
            }
        })
        .map(|i| (i / cols, i % cols, format!("{:?}", want.values()[i]), format!("{:?}", got.values()[i])))
}

fn segment_oracle<W: Weight>(input: &QTensor, bank: &SegmentBank<W>) -> Result<AccTensor<W::Acc>> {
    if !bank.plan().is_plain() {
        return Err(Error::Unsupported(
            "skips and repeats are verified only for integer `product` banks".into(),
        ));
    }
    dm_conv2d(input, &bank.filter()?, bank.func())
}

fn int_segment_oracle(input: &QTensor, bank: &SegmentBank<i32>) -> Result<AccTensor<i64>> {
    if bank.plan().is_plain() || !bank.func().is_product() {
        return segment_oracle(input, bank);
    }
    dm_conv2d(input, &effective_filter(&bank.filter()?, bank.plan()), bank.func())
}

fn min_weight_bits(weights: &[i32]) -> u8 {
    (1..=32u8)
        .find(|&b| {
            let half = 1i64 << (b - 1);
            weights.iter().all(|&w| (-half..half).contains(&(w as i64)))
        })
        .unwrap_or(32)
}

/// Filter and input weight behind shared consumer `index`, recovered from
/// the table keys.
pub fn shared_consumer_filter(bank: &SharedBank, index: usize) -> Result<Filter<i32>> {
    let consumer = bank
        .consumers()
        .get(index)
        .ok_or_else(|| Error::Config(format!("no consumer {index}")))?;
    let keys: Vec<_> = consumer.refs.iter().map(|r| &bank.tables()[r.table].key).collect();
    let folded = keys.first().map_or(1, |k| k.folded);
    let (kh, kw, weights, ifdr, plan): (usize, usize, Vec<i32>, i64, Option<&SegmentPlan>) = match &consumer.kind {
        ConsumerKind::Basic { kh, kw, ifdr_weight, .. } => {
            let weights = keys
                .iter()
                .map(|k| match k.base {
                    TableBase::Single(w) => Ok(w),
                    TableBase::Tuple { .. } => Err(Error::State("basic consumer references a segment table".into())),
                })
                .collect::<Result<_>>()?;
            (*kh, *kw, weights, *ifdr_weight, None)
        }
        ConsumerKind::Segment { plan } => {
            let (kh, kw) = plan.filter_shape();
            let mut weights = vec![0; kh * kw];
            for (seg, key) in plan.segments().iter().zip(&keys) {
                let ws = match &key.base {
                    TableBase::Single(w) => std::slice::from_ref(w),
                    TableBase::Tuple { weights, .. } => weights.as_slice(),
                };
                for (&t, &w) in seg.iter().zip(ws) {
                    weights[t] = w;
                }
            }
            (kh, kw, weights, 1, Some(plan))
        }
    };
    let bits = match bank.func() {
        ConvFn::Table { grid } => grid.weight_bits(),
        _ => min_weight_bits(&weights),
    };
    let iw = folded
        .checked_mul(ifdr)
        .ok_or_else(|| Error::Range("combined input weight overflows".into()))?;
    let filter = Filter::int(kh, kw, bits, weights)?.with_input_weight(iw);
    Ok(match plan {
        Some(p) if bank.func().is_product() => effective_filter(&filter, p),
        Some(p) if !p.is_plain() => {
            return Err(Error::Unsupported(
                "skips and repeats have a direct-multiplication form only for `product`".into(),
            ))
        }
        _ => filter,
    })
}

/// Activation width each input must have; one entry per shared consumer.
fn input_cards(bank: &AnyBank) -> Result<Vec<Cardinality>> {
    Ok(match bank {
        AnyBank::Basic(b) => vec![b.card()],
        AnyBank::BasicReal(b) => vec![b.card()],
        AnyBank::Segment(b) => vec![b.card()],
        AnyBank::SegmentReal(b) => vec![b.card()],
        AnyBank::Split(b) => vec![b.card()],
        AnyBank::SplitReal(b) => vec![b.card()],
        AnyBank::Shared(b) => b
            .consumers()
            .iter()
            .map(|c| match &c.kind {
                ConsumerKind::Basic { card, .. } => Ok(*card),
                ConsumerKind::Segment { plan } => Cardinality::new(plan.act_bits()),
            })
            .collect::<Result<_>>()?,
        AnyBank::Learned(_) => {
            return Err(Error::Unsupported(
                "learned tables have no direct-multiplication oracle".into(),
            ))
        }
    })
}

fn filter_shape(bank: &AnyBank, consumer: usize) -> (usize, usize) {
    match bank {
        AnyBank::Basic(b) => b.filter_shape(),
        AnyBank::BasicReal(b) => b.filter_shape(),
        AnyBank::Segment(b) => b.plan().filter_shape(),
        AnyBank::SegmentReal(b) => b.plan().filter_shape(),
        AnyBank::Split(b) => b.lo().filter_shape(),
        AnyBank::SplitReal(b) => b.lo().filter_shape(),
        AnyBank::Shared(b) => match &b.consumers()[consumer].kind {
            ConsumerKind::Basic { kh, kw, .. } => (*kh, *kw),
            ConsumerKind::Segment { plan } => plan.filter_shape(),
        },
        AnyBank::Learned(b) => b.filter_shape(),
    }
}

fn run_pair(bank: &AnyBank, consumer: usize, input: &QTensor) -> Result<Pair> {
    Ok(match bank {
        AnyBank::Basic(b) => Pair::Int(pcilt_conv2d(input, b)?, dm_conv2d(input, &b.filter()?, b.func())?),
        AnyBank::BasicReal(b) => Pair::Real(pcilt_conv2d(input, b)?, dm_conv2d(input, &b.filter()?, b.func())?),
        AnyBank::Segment(b) => Pair::Int(packed_conv2d(input, b)?, int_segment_oracle(input, b)?),
        AnyBank::SegmentReal(b) => Pair::Real(packed_conv2d(input, b)?, segment_oracle(input, b)?),
        AnyBank::Split(b) => Pair::Int(split_conv2d(input, b)?, dm_conv2d(input, &b.lo().filter()?, b.lo().func())?),
        AnyBank::SplitReal(b) => Pair::Real(split_conv2d(input, b)?, dm_conv2d(input, &b.lo().filter()?, b.lo().func())?),
        AnyBank::Shared(b) => {
            let filter = shared_consumer_filter(b, consumer)?;
            Pair::Int(b.conv2d(consumer, input)?, dm_conv2d(input, &filter, b.func())?)
        }
        AnyBank::Learned(_) => unreachable!("rejected by input_cards"),
    })
}

/// Whether the bank's results are expected to match the oracle bit for bit.
fn is_exact(bank: &AnyBank) -> bool {
    !matches!(bank, AnyBank::SegmentReal(_) | AnyBank::SplitReal(_))
}

/// Compare the bank against direct multiplication on `seeds` random inputs
/// of random shape up to `max_hw` on each side. Input `k` is drawn from a
/// generator seeded with `base_seed + k`.
pub fn verify(bank: &AnyBank, seeds: u64, max_hw: usize, base_seed: u64) -> Result<VerifyReport> {
    let cards = input_cards(bank)?;
    let exact = is_exact(bank);
    let tol = if exact { 0.0 } else { REAL_REORDER_TOLERANCE };
    let mut report = VerifyReport {
        bank_kind: bank.kind_name().into(),
        seeds,
        comparisons: 0,
        exact,
        mismatches: Vec::new(),
        warning: (seeds == 0).then(|| "no seeds requested; nothing was compared".to_string()),
    };
    for k in 0..seeds {
        let seed = base_seed.wrapping_add(k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (consumer, &card) in cards.iter().enumerate() {
            let (kh, kw) = filter_shape(bank, consumer);
            let rows = rng.gen_range(kh..=max_hw.max(kh));
            let cols = rng.gen_range(kw..=max_hw.max(kw));
            let input = QTensor::random(rows, cols, card, &mut rng)?;
            let diff = match run_pair(bank, consumer, &input)? {
                Pair::Int(got, want) => first_difference(&got, &want, tol),
                Pair::Real(got, want) => first_difference(&got, &want, tol),
            };
            report.comparisons += 1;
            if let Some((row, col, expected, got)) = diff {
                report.mismatches.push(Mismatch {
                    seed,
                    consumer,
                    row,
                    col,
                    expected,
                    got,
                });
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub input_shape: (usize, usize),
    pub samples: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            input_shape: (1024, 768),
            samples: 1,
            reps: 3,
            warmup: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelResult {
    pub kernel: String,
    pub checksum: String,
    pub median_ns: u64,
    pub rep_ns: Vec<u64>,
    pub positions_per_sec: f64,
    pub speedup_vs_dm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub bank_kind: String,
    pub act_bits: u8,
    pub filter_shape: (usize, usize),
    pub input_shape: (usize, usize),
    pub samples: usize,
    pub reps: usize,
    pub threads: usize,
    pub optimized_build: bool,
    pub reference_packed_speedup: f64,
    pub kernels: Vec<KernelResult>,
}

impl BenchReport {
    /// The report with every timing-derived field zeroed, for comparing runs.
    pub fn without_timings(&self) -> BenchReport {
        let mut r = self.clone();
        r.threads = 0;
        for k in &mut r.kernels {
            k.median_ns = 0;
            k.rep_ns.clear();
            k.positions_per_sec = 0.0;
            k.speedup_vs_dm = 0.0;
        }
        r
    }

    pub fn kernel(&self, name: &str) -> Option<&KernelResult> {
        self.kernels.iter().find(|k| k.kernel == name)
    }
}

type Kernel<'a> = Box<dyn Fn(&QTensor) -> Result<AccTensor<i64>> + 'a>;

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

/// Time direct multiplication against the bank's lookup kernels. Integer
/// basic and segment banks are accepted; a segment bank with a plain plan is
/// also timed through a per-tap bank built from the same filter. Every kernel
/// must produce identical outputs before any timing is reported.
pub fn bench(bank: &AnyBank, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps < 3 {
        return Err(Error::Config("benchmarks need at least 3 repetitions".into()));
    }
    if cfg.samples == 0 {
        return Err(Error::Config("benchmarks need at least one sample".into()));
    }
    let per_tap;
    let (filter, func, card, mut kernels): (Filter<i32>, &ConvFn, Cardinality, Vec<(&str, Kernel)>) = match bank {
        AnyBank::Basic(b) => {
            let k: Kernel = Box::new(move |x| pcilt_conv2d(x, b));
            (b.filter()?, b.func(), b.card(), vec![("pcilt", k)])
        }
        AnyBank::Segment(b) => {
            let plan = b.plan();
            let filter = if plan.is_plain() {
                b.filter()?
            } else if b.func().is_product() {
                effective_filter(&b.filter()?, plan)
            } else {
                return Err(Error::Unsupported(
                    "skips and repeats have a direct-multiplication form only for `product`".into(),
                ));
            };
            let mut ks: Vec<(&str, Kernel)> = Vec::new();
            if plan.is_plain() {
                per_tap = build_bank(&filter, b.card(), b.func())?;
                let pt = &per_tap;
                ks.push(("pcilt", Box::new(move |x| pcilt_conv2d(x, pt))));
            }
            ks.push(("packed", Box::new(move |x| packed_conv2d(x, b))));
            (filter, b.func(), b.card(), ks)
        }
        other => {
            return Err(Error::Unsupported(format!(
                "benchmarks take integer basic or segment banks, not {}",
                other.kind_name()
            )))
        }
    };
    let f = filter.clone();
    kernels.insert(0, ("dm", Box::new(move |x| dm_conv2d(x, &f, func))));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = cfg.input_shape;
    let inputs = (0..cfg.samples)
        .map(|_| QTensor::random(h, w, card, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let mut checksums = Vec::with_capacity(kernels.len());
    let mut reference: Option<Vec<AccTensor<i64>>> = None;
    for (name, k) in &kernels {
        let outs = inputs.iter().map(k).collect::<Result<Vec<_>>>()?;
        let mut hash = Sha256::new();
        for o in &outs {
            hash.update(o.checksum());
        }
        checksums.push(hash.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>());
        match &reference {
            None => reference = Some(outs),
            Some(want) => {
                for (s, (got, want)) in outs.iter().zip(want).enumerate() {
                    if let Some((r, c)) = got.first_mismatch(want) {
                        return Err(Error::State(format!(
                            "kernel `{name}` disagrees with dm on sample {s} at ({r}, {c}); no timings reported"
                        )));
                    }
                }
            }
        }
    }

    let positions = (h + 1 - filter.shape().0) as f64 * (w + 1 - filter.shape().1) as f64 * cfg.samples as f64;
    let mut results = Vec::with_capacity(kernels.len());
    for ((name, k), checksum) in kernels.iter().zip(checksums) {
        for _ in 0..cfg.warmup {
            for x in &inputs {
                std::hint::black_box(k(x)?);
            }
        }
        let mut reps = Vec::with_capacity(cfg.reps);
        for _ in 0..cfg.reps {
            let start = Instant::now();
            for x in &inputs {
                std::hint::black_box(k(x)?);
            }
            reps.push(start.elapsed().as_nanos().max(1) as u64);
        }
        let med = median(reps.clone());
        results.push(KernelResult {
            kernel: name.to_string(),
            checksum,
            median_ns: med,
            rep_ns: reps,
            positions_per_sec: positions / (med as f64 * 1e-9),
            speedup_vs_dm: 0.0,
        });
    }
    let dm_ns = results[0].median_ns as f64;
    for r in &mut results {
        r.speedup_vs_dm = dm_ns / r.median_ns as f64;
    }
    Ok(BenchReport {
        bank_kind: bank.kind_name().into(),
        act_bits: card.bits(),
        filter_shape: filter.shape(),
        input_shape: cfg.input_shape,
        samples: cfg.samples,
        reps: cfg.reps,
        threads: rayon::current_num_threads(),
        optimized_build: !cfg!(debug_assertions),
        reference_packed_speedup: REFERENCE_PACKED_SPEEDUP,
        kernels: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packing::{build_segment_bank, build_split_bank, compile_plan};
    use crate::shared::{dedup, BankRef};

    fn c(bits: u8) -> Cardinality {
        Cardinality::new(bits).unwrap()
    }

    fn filter(seed: u64) -> Filter<i32> {
        Filter::random(3, 3, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn verify_passes_for_every_exact_kind() {
        let f = filter(1).with_input_weight(2);
        let basic = build_bank(&f, c(2), &ConvFn::Product).unwrap();
        let seg = build_segment_bank(&f, &compile_plan((3, 3), 2, 4, &[1], &[2]).unwrap(), &ConvFn::Product).unwrap();
        let banks = [
            AnyBank::Basic(basic.clone()),
            AnyBank::Basic(build_bank(&f, c(3), &ConvFn::LogProduct).unwrap()),
            AnyBank::Segment(seg.clone()),
            AnyBank::Split(build_split_bank(&f, 4, 2, &ConvFn::Product).unwrap()),
            AnyBank::Shared(dedup(&[BankRef::Basic(&basic), BankRef::Segment(&seg)]).unwrap()),
        ];
        for b in &banks {
            let r = verify(b, 20, 10, 7).unwrap();
            assert!(r.passed(), "{}: {:?}", b.kind_name(), r.mismatches);
        }
    }

    #[test]
    fn corrupted_entry_is_located() {
        let f = Filter::int(1, 1, 3, vec![3]).unwrap();
        let mut bank = build_bank(&f, c(2), &ConvFn::Product).unwrap();
        bank.entries_mut()[2] += 1;
        let r = verify(&AnyBank::Basic(bank), 5, 6, 0).unwrap();
        assert!(!r.passed());
        let m = &r.mismatches[0];
        assert_eq!(m.seed, 0);
        assert_eq!((m.expected.as_str(), m.got.as_str()), ("6", "7"));
    }

    #[test]
    fn zero_seeds_pass_with_warning() {
        let bank = AnyBank::Basic(build_bank(&filter(2), c(1), &ConvFn::Product).unwrap());
        let r = verify(&bank, 0, 8, 0).unwrap();
        assert!(r.passed() && r.warning.is_some() && r.comparisons == 0);
    }

    #[test]
    fn bench_gates_on_checksums() {
        let f = filter(3);
        let plan = compile_plan((3, 3), 1, 8, &[], &[]).unwrap();
        let bank = AnyBank::Segment(build_segment_bank(&f, &plan, &ConvFn::Product).unwrap());
        let cfg = BenchConfig {
            input_shape: (40, 30),
            samples: 2,
            ..BenchConfig::default()
        };
        let r = bench(&bank, &cfg).unwrap();
        let names: Vec<_> = r.kernels.iter().map(|k| k.kernel.as_str()).collect();
        assert_eq!(names, ["dm", "pcilt", "packed"]);
        assert!(r.kernels.iter().all(|k| k.checksum == r.kernels[0].checksum));
        assert_eq!(r.kernel("dm").unwrap().speedup_vs_dm, 1.0);

        let AnyBank::Segment(mut broken) = bank else { unreachable!() };
        broken.entries_mut()[1] += 1;
        assert!(matches!(bench(&AnyBank::Segment(broken), &cfg), Err(Error::State(_))));
    }
}
