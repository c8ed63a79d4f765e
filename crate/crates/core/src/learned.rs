//! Lookup tables as trainable parameters.
//!
//! A [`LearnedBank`] holds real-valued base tables and a parameter vector
//! whose shape depends on the [`Granularity`]:
//!
//! | granularity | parameters | effective entry `E[t][o]` |
//! |-------------|------------|---------------------------|
//! | FilterWide  | 1          | `s * base[t][o]`          |
//! | PerTable    | T          | `s_t * base[t][o]`        |
//! | PerOffset   | L          | `base[t][o] + d_o`        |
//! | PerValue    | T * L      | `theta[t][o]`             |
//!
//! The forward pass sums one effective entry per tap, so the usual input
//! weight multiplying the summed taps is absorbed into the tables.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv_fn::ConvFn;
use crate::error::{Error, Result};
use crate::num::{Acc, Weight};
use crate::pcilt::{build_bank, lookup_conv, PciltBank};
use crate::reference::ConvGeometry;
use crate::tensor::{AccTensor, Cardinality, Filter, QTensor};

/// Loss above which training is aborted.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// Which table entries move together during training, from least to most
/// freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Granularity {
    FilterWide,
    PerTable,
    PerOffset,
    PerValue,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::FilterWide,
        Granularity::PerTable,
        Granularity::PerOffset,
        Granularity::PerValue,
    ];

    pub fn param_count(self, tables: usize, levels: usize) -> usize {
        match self {
            Granularity::FilterWide => 1,
            Granularity::PerTable => tables,
            Granularity::PerOffset => levels,
            Granularity::PerValue => tables * levels,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::FilterWide => "filter-wide",
            Granularity::PerTable => "per-table",
            Granularity::PerOffset => "per-offset",
            Granularity::PerValue => "per-value",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown granularity `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedBank {
    pub(crate) kh: usize,
    pub(crate) kw: usize,
    pub(crate) card: Cardinality,
    pub(crate) granularity: Granularity,
    pub(crate) base: Vec<f64>,
    pub(crate) params: Vec<f64>,
    pub(crate) hits: Vec<u64>,
    #[serde(skip)]
    pub(crate) version: u64,
}

/// Record of a forward pass, consumed by [`LearnedBank::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    version: u64,
    input: QTensor,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub output: AccTensor<f64>,
    pub trace: Trace,
}

fn identity_params(g: Granularity, base: &[f64], tables: usize, levels: usize) -> Vec<f64> {
    match g {
        Granularity::FilterWide | Granularity::PerTable => vec![1.0; g.param_count(tables, levels)],
        Granularity::PerOffset => vec![0.0; levels],
        Granularity::PerValue => base.to_vec(),
    }
}

impl LearnedBank {
    /// Start from explicit base tables (`taps * levels`, row-major by tap)
    /// with identity parameters.
    pub fn from_tables(
        kh: usize,
        kw: usize,
        card: Cardinality,
        granularity: Granularity,
        base: Vec<f64>,
    ) -> Result<Self> {
        let (t, l) = (kh * kw, card.levels());
        if t == 0 {
            return Err(Error::Shape("empty filter shape".into()));
        }
        if base.len() != t * l {
            return Err(Error::Shape(format!(
                "{} base entries for {t} tables of {l} levels",
                base.len()
            )));
        }
        if base.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("base entries must be finite".into()));
        }
        Ok(LearnedBank {
            kh,
            kw,
            card,
            granularity,
            params: identity_params(granularity, &base, t, l),
            hits: vec![0; t * l],
            base,
            version: 0,
        })
    }

    /// Base tables taken from a built bank.
    pub fn from_bank<W: Weight>(bank: &PciltBank<W>, granularity: Granularity) -> Result<Self> {
        let (kh, kw) = bank.filter_shape();
        let base = bank.entries().iter().map(|v| v.to_f64()).collect();
        LearnedBank::from_tables(kh, kw, bank.card(), granularity, base)
    }

    pub fn from_filter<W: Weight>(
        filter: &Filter<W>,
        card: Cardinality,
        f: &ConvFn,
        granularity: Granularity,
    ) -> Result<Self> {
        LearnedBank::from_bank(&build_bank(filter, card, f)?, granularity)
    }

    /// Uniformly random base tables in `[-1, 1)`.
    pub fn random(
        kh: usize,
        kw: usize,
        card: Cardinality,
        granularity: Granularity,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let base = (0..kh * kw * card.levels())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        LearnedBank::from_tables(kh, kw, card, granularity, base)
    }

    pub fn filter_shape(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn card(&self) -> Cardinality {
        self.card
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn hits(&self) -> &[u64] {
        &self.hits
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters for {} granularity needs {}",
                params.len(),
                self.granularity,
                self.params.len()
            )));
        }
        self.params = params;
        self.version += 1;
        Ok(())
    }

    pub fn effective_entry(&self, t: usize, o: usize) -> f64 {
        let l = self.card.levels();
        let b = self.base[t * l + o];
        match self.granularity {
            Granularity::FilterWide => self.params[0] * b,
            Granularity::PerTable => self.params[t] * b,
            Granularity::PerOffset => b + self.params[o],
            Granularity::PerValue => self.params[t * l + o],
        }
    }

    /// All effective tables, row-major by tap.
    pub fn effective_tables(&self) -> Vec<f64> {
        let l = self.card.levels();
        (0..self.taps() * l)
            .map(|i| self.effective_entry(i / l, i % l))
            .collect()
    }

    /// Effective tables rounded to the nearest integer.
    pub fn quantized_tables(&self) -> Vec<i64> {
        self.effective_tables().iter().map(|v| v.round() as i64).collect()
    }

    fn geometry(&self, input: &QTensor) -> Result<ConvGeometry> {
        if input.card() != self.card {
            return Err(Error::Shape(format!(
                "input has {}-bit activations, bank expects {}-bit",
                input.card().bits(),
                self.card.bits()
            )));
        }
        ConvGeometry::new(input.shape(), (self.kh, self.kw))
    }

    /// Read-only inference; does not touch hit counters.
    pub fn evaluate(&self, input: &QTensor) -> Result<AccTensor<f64>> {
        let geom = self.geometry(input)?;
        let eff = self.effective_tables();
        let tables: Vec<&[f64]> = eff.chunks_exact(self.card.levels()).collect();
        Ok(lookup_conv(input, &geom, &tables, 1.0)?.0)
    }

    /// Inference that records hit counters and a trace for [`Self::backward`].
    pub fn forward(&mut self, input: &QTensor) -> Result<Forward> {
        let output = self.evaluate(input)?;
        let l = self.card.levels();
        let (oh, ow) = output.shape();
        for y in 0..oh {
            for t in 0..self.taps() {
                let (i, j) = (t / self.kw, t % self.kw);
                for &a in &input.row(y + i)[j..j + ow] {
                    self.hits[t * l + a as usize] += 1;
                }
            }
        }
        Ok(Forward {
            output,
            trace: Trace {
                version: self.version,
                input: input.clone(),
            },
        })
    }

    /// Per-entry gradient `G[t][o]`: the sum of output gradients over the
    /// positions where table `t` was read at offset `o`.
    fn entry_gradients(&self, input: &QTensor, grad_out: &[f64]) -> Result<Vec<f64>> {
        let geom = self.geometry(input)?;
        let (oh, ow) = geom.out_shape();
        if grad_out.len() != oh * ow {
            return Err(Error::Shape(format!(
                "{} output gradients for a {oh}x{ow} output",
                grad_out.len()
            )));
        }
        let l = self.card.levels();
        let mut g = vec![0.0; self.taps() * l];
        for t in 0..self.taps() {
            let (i, j) = (t / self.kw, t % self.kw);
            for y in 0..oh {
                let src = &input.row(y + i)[j..j + ow];
                for (&a, &d) in src.iter().zip(&grad_out[y * ow..(y + 1) * ow]) {
                    g[t * l + a as usize] += d;
                }
            }
        }
        Ok(g)
    }

    /// Gradient of the loss with respect to the parameters.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64]) -> Result<Vec<f64>> {
        if trace.version != self.version {
            return Err(Error::State(format!(
                "trace from parameter version {} used at version {}",
                trace.version, self.version
            )));
        }
        let g = self.entry_gradients(&trace.input, grad_out)?;
        let l = self.card.levels();
        Ok(match self.granularity {
            Granularity::FilterWide => {
                vec![g.iter().zip(&self.base).map(|(g, b)| g * b).sum()]
            }
            Granularity::PerTable => g
                .chunks_exact(l)
                .zip(self.base.chunks_exact(l))
                .map(|(g, b)| g.iter().zip(b).map(|(g, b)| g * b).sum())
                .collect(),
            Granularity::PerOffset => {
                let mut d = vec![0.0; l];
                for row in g.chunks_exact(l) {
                    for (d, g) in d.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                d
            }
            Granularity::PerValue => g,
        })
    }
}

/// One training example: an input and the desired output, row-major.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: QTensor,
    pub target: Vec<f64>,
}

/// Dataset whose targets come from a hidden convolution
/// `sum_t hidden(w_t, a_t)`.
pub fn hidden_conv_dataset(
    filter: &Filter<i32>,
    card: Cardinality,
    hidden: impl Fn(i32, u32) -> f64,
    samples: usize,
    shape: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    let (kh, kw) = filter.shape();
    (0..samples)
        .map(|_| {
            let input = QTensor::random(shape.0, shape.1, card, rng)?;
            let geom = ConvGeometry::new(input.shape(), (kh, kw))?;
            let (oh, ow) = geom.out_shape();
            let mut target = vec![0.0; oh * ow];
            for (p, slot) in target.iter_mut().enumerate() {
                let (y, x) = (p / ow, p % ow);
                *slot = filter
                    .weights()
                    .iter()
                    .enumerate()
                    .map(|(t, &w)| hidden(w, input.get(y + t / kw, x + t % kw) as u32))
                    .sum();
            }
            Ok(Sample { input, target })
        })
        .collect()
}

/// Mean squared error over every output position of every sample.
pub fn mse(bank: &LearnedBank, data: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in data {
        let out = bank.evaluate(&s.input)?;
        check_target(&out, s)?;
        sum += out
            .values()
            .iter()
            .zip(&s.target)
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>();
        n += s.target.len();
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

fn check_target(out: &AccTensor<f64>, s: &Sample) -> Result<()> {
    if out.values().len() != s.target.len() {
        return Err(Error::Shape(format!(
            "target has {} values, output {}",
            s.target.len(),
            out.values().len()
        )));
    }
    Ok(())
}

/// Gradient of [`mse`] with respect to the parameters.
pub fn mse_gradient(bank: &mut LearnedBank, data: &[Sample]) -> Result<Vec<f64>> {
    let n: usize = data.iter().map(|s| s.target.len()).sum();
    let mut grad = vec![0.0; bank.params.len()];
    for s in data {
        let fwd = bank.forward(&s.input)?;
        check_target(&fwd.output, s)?;
        let d: Vec<f64> = fwd
            .output
            .values()
            .iter()
            .zip(&s.target)
            .map(|(o, t)| 2.0 * (o - t) / n as f64)
            .collect();
        for (g, v) in grad.iter_mut().zip(bank.backward(&fwd.trace, &d)?) {
            *g += v;
        }
    }
    Ok(grad)
}

/// Largest eigenvalue of the loss Hessian, by power iteration. Outputs are
/// linear in the parameters, so a Hessian-vector product is exactly the
/// difference of two gradients.
pub fn max_curvature(bank: &LearnedBank, data: &[Sample], iters: usize) -> Result<f64> {
    let mut probe = bank.clone();
    let at = bank.params.clone();
    let g0 = mse_gradient(&mut probe, data)?;
    let mut v = vec![1.0 / (at.len() as f64).sqrt(); at.len()];
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        probe.set_params(at.iter().zip(&v).map(|(p, d)| p + d).collect())?;
        let hv: Vec<f64> = mse_gradient(&mut probe, data)?
            .iter()
            .zip(&g0)
            .map(|(g, g0)| g - g0)
            .collect();
        let norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        lambda = norm;
        v = hv.into_iter().map(|x| x / norm).collect();
    }
    Ok(lambda)
}

/// Step size `1 / lambda_max`, which keeps plain gradient descent on a
/// quadratic loss stable in every direction.
pub fn auto_lr(bank: &LearnedBank, data: &[Sample]) -> Result<f64> {
    let lambda = max_curvature(bank, data, 100)?;
    if lambda <= 0.0 {
        return Err(Error::Config("loss is flat in every parameter".into()));
    }
    Ok(1.0 / lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
}

/// Plain gradient descent on [`mse`]. The returned trace holds the loss
/// before the first step and after every step.
pub fn train(mut bank: LearnedBank, data: &[Sample], cfg: TrainConfig) -> Result<(LearnedBank, Vec<f64>)> {
    let mut trace = vec![mse(&bank, data)?];
    for step in 0..cfg.steps {
        let grad = mse_gradient(&mut bank, data)?;
        let params: Vec<f64> = bank
            .params
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - cfg.lr * g)
            .collect();
        bank.set_params(params)?;
        let loss = mse(&bank, data)?;
        trace.push(loss);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                step: step + 1,
                loss,
                trace,
            });
        }
    }
    Ok((bank, trace))
}

/// Filter recovered from learned tables by a per-tap least-squares fit of
/// `E[t][o] ~ w_t * o`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub filter: Filter<f64>,
    /// `max_o |E[t][o] - w_t * o|` per tap.
    pub residuals: Vec<f64>,
}

impl Reconstruction {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

pub fn reconstruct_filter(bank: &LearnedBank) -> Result<Reconstruction> {
    let l = bank.card.levels();
    let eff = bank.effective_tables();
    let denom: f64 = (0..l).map(|o| (o * o) as f64).sum();
    let mut weights = Vec::with_capacity(bank.taps());
    let mut residuals = Vec::with_capacity(bank.taps());
    for table in eff.chunks_exact(l) {
        let w = table
            .iter()
            .enumerate()
            .map(|(o, e)| o as f64 * e)
            .sum::<f64>()
            / denom;
        let r = table
            .iter()
            .enumerate()
            .map(|(o, e)| (e - w * o as f64).abs())
            .fold(0.0, f64::max);
        weights.push(w);
        residuals.push(r);
    }
    Ok(Reconstruction {
        filter: Filter::real(bank.kh, bank.kw, weights)?,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pcilt::pcilt_conv2d;
    use crate::reference::dm_conv2d;

    fn c(bits: u8) -> Cardinality {
        Cardinality::new(bits).unwrap()
    }

    #[test]
    fn granularity_names() {
        for g in Granularity::ALL {
            assert_eq!(g.name().parse::<Granularity>().unwrap(), g);
        }
        assert!("per-layer".parse::<Granularity>().is_err());
        assert_eq!(Granularity::ALL.map(|g| g.param_count(9, 4)), [1, 9, 4, 36]);
    }

    #[test]
    fn identity_forward_matches_real_pcilt() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Filter::real(3, 3, (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let bank = build_bank(&f, c(3), &ConvFn::Product).unwrap();
        let input = QTensor::random(8, 7, c(3), &mut rng).unwrap();
        for g in Granularity::ALL {
            let learned = LearnedBank::from_bank(&bank, g).unwrap();
            assert_eq!(learned.evaluate(&input).unwrap(), pcilt_conv2d(&input, &bank).unwrap());
        }
    }

    #[test]
    fn zero_values_and_constant_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Filter::int(2, 3, 3, vec![1, -2, 3, 0, 2, -4]).unwrap();
        let input = QTensor::random(6, 6, c(2), &mut rng).unwrap();

        let mut pv = LearnedBank::from_filter(&f, c(2), &ConvFn::Product, Granularity::PerValue).unwrap();
        pv.set_params(vec![0.0; 24]).unwrap();
        assert!(pv.evaluate(&input).unwrap().values().iter().all(|&v| v == 0.0));

        let mut po = LearnedBank::from_filter(&f, c(2), &ConvFn::Product, Granularity::PerOffset).unwrap();
        let before = po.evaluate(&input).unwrap();
        po.set_params(vec![0.5; 4]).unwrap();
        let after = po.evaluate(&input).unwrap();
        for (a, b) in after.values().iter().zip(before.values()) {
            assert!((a - b - 6.0 * 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn hit_counters_sum_to_lookups() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut bank = LearnedBank::random(3, 2, c(2), Granularity::PerValue, &mut rng).unwrap();
        let input = QTensor::random(7, 5, c(2), &mut rng).unwrap();
        bank.forward(&input).unwrap();
        assert_eq!(bank.hits().iter().sum::<u64>(), (5 * 4 * 6) as u64);
    }

    #[test]
    fn one_hot_gradient_for_single_position() {
        let input = QTensor::new(2, 2, c(2), vec![3, 1, 0, 2]).unwrap();
        let mut bank = LearnedBank::from_tables(2, 2, c(2), Granularity::PerValue, vec![0.0; 16]).unwrap();
        let fwd = bank.forward(&input).unwrap();
        let g = bank.backward(&fwd.trace, &[1.0]).unwrap();
        let mut want = vec![0.0; 16];
        for (t, a) in [3usize, 1, 0, 2].into_iter().enumerate() {
            want[t * 4 + a] = 1.0;
        }
        assert_eq!(g, want);
    }

    #[test]
    fn stale_trace_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bank = LearnedBank::random(1, 1, c(1), Granularity::FilterWide, &mut rng).unwrap();
        let input = QTensor::random(2, 2, c(1), &mut rng).unwrap();
        let fwd = bank.forward(&input).unwrap();
        bank.set_params(vec![2.0]).unwrap();
        assert!(matches!(bank.backward(&fwd.trace, &[0.0; 4]), Err(Error::State(_))));
    }

    #[test]
    fn filter_wide_gradient_is_ifdr_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = Filter::random(2, 2, 3, &mut rng).unwrap();
        let mut bank = LearnedBank::from_filter(&f, c(3), &ConvFn::Product, Granularity::FilterWide).unwrap();
        let input = QTensor::random(5, 5, c(3), &mut rng).unwrap();
        let ifdr = dm_conv2d(&input, &f, &ConvFn::Product).unwrap();
        let d: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fwd = bank.forward(&input).unwrap();
        let g = bank.backward(&fwd.trace, &d).unwrap();
        let want: f64 = ifdr.values().iter().zip(&d).map(|(&i, d)| i as f64 * d).sum();
        assert!((g[0] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn already_optimal_stays_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = Filter::random(2, 2, 3, &mut rng).unwrap();
        let data = hidden_conv_dataset(&f, c(2), |w, a| (w as i64 * a as i64) as f64, 3, (5, 5), &mut rng).unwrap();
        for g in Granularity::ALL {
            let bank = LearnedBank::from_filter(&f, c(2), &ConvFn::Product, g).unwrap();
            let (_, trace) = train(bank, &data, TrainConfig { lr: 1e-3, steps: 5 }).unwrap();
            assert!(trace.iter().all(|&l| l == 0.0), "{g}: {trace:?}");
        }
    }

    #[test]
    fn zero_steps_traces_initial_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f = Filter::random(2, 2, 3, &mut rng).unwrap();
        let data = hidden_conv_dataset(&f, c(2), |w, a| (w * 3) as f64 * a as f64, 2, (4, 4), &mut rng).unwrap();
        let bank = LearnedBank::from_filter(&f, c(2), &ConvFn::Product, Granularity::FilterWide).unwrap();
        let (_, trace) = train(bank, &data, TrainConfig { lr: 1e-3, steps: 0 }).unwrap();
        assert_eq!(trace.len(), 1);
        assert!(trace[0] > 0.0);
    }

    #[test]
    fn divergence_aborts_with_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f = Filter::random(3, 3, 6, &mut rng).unwrap();
        let data = hidden_conv_dataset(&f, c(4), |w, a| (w * 3) as f64 * a as f64, 2, (6, 6), &mut rng).unwrap();
        let bank = LearnedBank::from_filter(&f, c(4), &ConvFn::Product, Granularity::FilterWide).unwrap();
        match train(bank, &data, TrainConfig { lr: 10.0, steps: 100 }) {
            Err(Error::Diverged { step, trace, .. }) => {
                assert_eq!(trace.len(), step + 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reconstruction_cases() {
        let f = Filter::int(2, 2, 4, vec![3, -1, 0, 7]).unwrap();
        let bank = LearnedBank::from_filter(&f, c(3), &ConvFn::Product, Granularity::FilterWide).unwrap();
        let r = reconstruct_filter(&bank).unwrap();
        assert_eq!(r.filter.weights(), &[3.0, -1.0, 0.0, 7.0]);
        assert_eq!(r.max_residual(), 0.0);

        let mut scaled = bank.clone();
        scaled.set_params(vec![2.5]).unwrap();
        let r = reconstruct_filter(&scaled).unwrap();
        for (got, w) in r.filter.weights().iter().zip([3.0, -1.0, 0.0, 7.0]) {
            assert!((got - 2.5 * w).abs() <= 1e-12 * (2.5 * w).abs().max(1.0));
        }
        assert!(r.max_residual() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let random = LearnedBank::random(2, 2, c(3), Granularity::PerValue, &mut rng).unwrap();
        assert!(reconstruct_filter(&random).unwrap().max_residual() > 0.0);
    }

    #[test]
    fn filter_wide_converges_to_target_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let f = Filter::random(3, 3, 4, &mut rng).unwrap();
        let data = hidden_conv_dataset(&f, c(2), |w, a| 3.0 * w as f64 * a as f64, 4, (8, 8), &mut rng).unwrap();
        let bank = LearnedBank::from_filter(&f, c(2), &ConvFn::Product, Granularity::FilterWide).unwrap();
        let lr = auto_lr(&bank, &data).unwrap();
        let (bank, trace) = train(bank, &data, TrainConfig { lr, steps: 500 }).unwrap();
        assert!((bank.params()[0] - 3.0).abs() <= 1e-3, "{}", bank.params()[0]);
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn per_value_fits_square_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = Filter::random(2, 2, 3, &mut rng).unwrap();
        let data = hidden_conv_dataset(&f, c(3), |w, a| (w as f64) * (a * a) as f64, 6, (10, 10), &mut rng).unwrap();
        let bank = LearnedBank::from_filter(&f, c(3), &ConvFn::Product, Granularity::PerValue).unwrap();
        let lr = auto_lr(&bank, &data).unwrap();
        let (_, trace) = train(bank, &data, TrainConfig { lr, steps: 500 }).unwrap();
        assert!(trace[trace.len() - 1] < 1e-6 * trace[0], "{} vs {}", trace[trace.len() - 1], trace[0]);
    }
}
