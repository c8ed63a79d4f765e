//! Closed-form operation counts and memory accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::SegmentPlan;
use crate::reference::{ConvGeometry, OpCounts};

/// Network description for memory and count estimates. Every adjacent
/// layer pair contributes `n_{l-1} * n_l` filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub layer_sizes: Vec<u64>,
    pub filter_shape: (usize, usize),
    pub act_bits: u8,
    pub weight_bits: u8,
    /// Bits per table entry; `None` rounds `act_bits + weight_bits` up to
    /// whole bytes.
    #[serde(default)]
    pub entry_bits: Option<u32>,
    /// Input plane for per-filter inference counts.
    #[serde(default)]
    pub input_shape: Option<(usize, usize)>,
    #[serde(default = "one")]
    pub samples: u64,
    #[serde(default)]
    pub segment_len: Option<usize>,
    /// Number of weight values actually used; defaults to `2^weight_bits`.
    #[serde(default)]
    pub weight_cardinality: Option<u64>,
    /// Activation bit widths present in the network; defaults to `[act_bits]`.
    #[serde(default)]
    pub act_cardinalities: Option<Vec<u8>>,
}

fn one() -> u64 {
    1
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config("layer_sizes needs at least two layers".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.filter_shape.0 == 0 || self.filter_shape.1 == 0 {
            return Err(Error::Config("empty filter shape".into()));
        }
        if !(1..=16).contains(&self.act_bits) {
            return Err(Error::Config(format!("act_bits {} outside 1..=16", self.act_bits)));
        }
        if !(1..=32).contains(&self.weight_bits) {
            return Err(Error::Config(format!("weight_bits {} outside 1..=32", self.weight_bits)));
        }
        if self.entry_bits == Some(0) {
            return Err(Error::Config("entry_bits must be positive".into()));
        }
        if self.segment_len == Some(0) {
            return Err(Error::Config("segment_len must be positive".into()));
        }
        if self.weight_cardinality == Some(0) {
            return Err(Error::Config("weight_cardinality must be positive".into()));
        }
        if let Some(cards) = &self.act_cardinalities {
            if cards.is_empty() || cards.iter().any(|b| !(1..=16).contains(b)) {
                return Err(Error::Config("act_cardinalities must list bit widths in 1..=16".into()));
            }
        }
        Ok(())
    }

    pub fn entry_bits(&self) -> u32 {
        self.entry_bits
            .unwrap_or((self.act_bits as u32 + self.weight_bits as u32).div_ceil(8) * 8)
    }

    pub fn filter_count(&self) -> Result<u64> {
        self.layer_sizes
            .windows(2)
            .try_fold(0u64, |acc, p| p[0].checked_mul(p[1]).and_then(|n| acc.checked_add(n)))
            .ok_or_else(|| Error::Range("filter count overflows".into()))
    }

    fn taps(&self) -> u64 {
        (self.filter_shape.0 * self.filter_shape.1) as u64
    }
}

fn overflow(what: &str) -> Error {
    Error::Range(format!("{what} overflows"))
}

/// Total table storage of a network. Entry sizes that are not whole bytes
/// are summed in bits and rounded up once at the end.
pub fn pcilt_memory_bytes(cfg: &NetConfig) -> Result<u64> {
    cfg.validate()?;
    let bits = (cfg.filter_count()? as u128)
        * cfg.taps() as u128
        * (1u128 << cfg.act_bits)
        * cfg.entry_bits() as u128;
    u64::try_from(bits.div_ceil(8)).map_err(|_| overflow("memory size"))
}

/// Function evaluations needed to build one filter's tables.
pub fn build_mults(filter_shape: (usize, usize), act_bits: u8) -> u64 {
    (filter_shape.0 * filter_shape.1) as u64 * (1u64 << act_bits)
}

/// Per-position inference counts over `samples` inputs, for direct
/// multiplication when `pcilt` is false, basic lookup otherwise, or
/// segment lookup when a plan is given.
pub fn inference_counts(
    geom: &ConvGeometry,
    samples: u64,
    pcilt: bool,
    plan: Option<&SegmentPlan>,
) -> Result<OpCounts> {
    let positions = geom
        .positions()
        .checked_mul(samples)
        .ok_or_else(|| overflow("position count"))?;
    let terms = match plan {
        Some(p) => p.segments().len() as u64,
        None => geom.taps() as u64,
    };
    let per = |n: u64| positions.checked_mul(n).ok_or_else(|| overflow("operation count"));
    let adds = per(terms.saturating_sub(1))?;
    Ok(if pcilt || plan.is_some() {
        OpCounts {
            lookups: per(terms)?,
            adds,
            ..OpCounts::default()
        }
    } else {
        OpCounts {
            fn_evals: per(terms)?,
            mults: per(terms)?,
            adds,
            ..OpCounts::default()
        }
    })
}

pub fn adder_tree_depth(fan_in: u64) -> u32 {
    assert!(fan_in >= 1, "adder tree needs at least one input");
    fan_in.next_power_of_two().trailing_zeros()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedCounts {
    pub unique_tables: u64,
    pub value_growth: u64,
}

/// Unique shared tables for `x` weight values across `act_cards` distinct
/// activation cardinalities, and the growth in distinct bases when
/// segments of `n` taps replace single weights.
pub fn shared_counts(x: u64, act_cards: usize, n: u32) -> Result<SharedCounts> {
    if x == 0 || n == 0 {
        return Err(Error::Config("weight cardinality and segment length must be positive".into()));
    }
    Ok(SharedCounts {
        unique_tables: x
            .checked_mul(act_cards as u64)
            .ok_or_else(|| overflow("unique table count"))?,
        value_growth: x.checked_pow(n - 1).ok_or_else(|| overflow("value growth"))?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub filters: u64,
    pub entry_bits: u32,
    pub build_mults: u64,
    pub memory_bytes: u64,
    pub dm_mults: Option<u64>,
    pub pcilt_lookups: Option<u64>,
    pub pcilt_adds: Option<u64>,
    pub packed_lookups: Option<u64>,
    pub packed_adds: Option<u64>,
    pub adder_tree_depth: u32,
    pub shared_unique_tables: u64,
    pub segment_value_growth_factor: u64,
}

impl CostReport {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let filters = cfg.filter_count()?;
        let build_mults = build_mults(cfg.filter_shape, cfg.act_bits)
            .checked_mul(filters)
            .ok_or_else(|| overflow("build count"))?;
        let n = cfg.segment_len.unwrap_or(1);
        let segments = cfg.taps().div_ceil(n as u64);
        let (mut dm, mut basic, mut packed) = (None, None, None);
        if let Some(shape) = cfg.input_shape {
            let geom = ConvGeometry::new(shape, cfg.filter_shape)?;
            dm = Some(inference_counts(&geom, cfg.samples, false, None)?);
            basic = Some(inference_counts(&geom, cfg.samples, true, None)?);
            if cfg.segment_len.is_some() {
                let positions = geom.positions() * cfg.samples;
                packed = Some(OpCounts {
                    lookups: positions * segments,
                    adds: positions * (segments - 1),
                    ..OpCounts::default()
                });
            }
        }
        let cards = cfg.act_cardinalities.as_ref().map_or(1, |c| {
            let mut c = c.clone();
            c.sort_unstable();
            c.dedup();
            c.len()
        });
        let x = match cfg.weight_cardinality {
            Some(x) => x,
            None => 1u64
                .checked_shl(cfg.weight_bits as u32)
                .ok_or_else(|| overflow("weight cardinality"))?,
        };
        let shared = shared_counts(x, cards, n as u32)?;
        Ok(CostReport {
            filters,
            entry_bits: cfg.entry_bits(),
            build_mults,
            memory_bytes: pcilt_memory_bytes(cfg)?,
            dm_mults: dm.map(|c| c.mults),
            pcilt_lookups: basic.map(|c| c.lookups),
            pcilt_adds: basic.map(|c| c.adds),
            packed_lookups: packed.map(|c| c.lookups),
            packed_adds: packed.map(|c| c.adds),
            adder_tree_depth: adder_tree_depth(segments),
            shared_unique_tables: shared.unique_tables,
            segment_value_growth_factor: shared.value_growth,
        })
    }

    /// `key: value` lines; absent counts are omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let value = serde_json::to_value(self).expect("report serializes");
        for (k, v) in value.as_object().expect("report is an object") {
            if !v.is_null() {
                let _ = writeln!(out, "{k}: {v}");
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five_layer_net() -> NetConfig {
        NetConfig {
            layer_sizes: vec![50, 80, 120, 200, 350],
            filter_shape: (5, 5),
            act_bits: 8,
            weight_bits: 8,
            entry_bits: None,
            input_shape: None,
            samples: 1,
            segment_len: None,
            weight_cardinality: None,
            act_cardinalities: None,
        }
    }

    #[test]
    fn five_layer_net_memory() {
        let cfg = five_layer_net();
        assert_eq!(cfg.filter_count().unwrap(), 107_600);
        assert_eq!(cfg.entry_bits(), 16);
        let full = pcilt_memory_bytes(&cfg).unwrap();
        assert_eq!(full, 1_377_280_000);
        let four = pcilt_memory_bytes(&NetConfig { act_bits: 4, ..cfg.clone() }).unwrap();
        assert_eq!(four * 16, full);
        let twelve = pcilt_memory_bytes(&NetConfig { entry_bits: Some(12), ..cfg }).unwrap();
        assert_eq!(twelve * 4, full * 3);
    }

    #[test]
    fn config_errors() {
        let bad = NetConfig { layer_sizes: vec![], ..five_layer_net() };
        assert!(matches!(pcilt_memory_bytes(&bad), Err(Error::Config(_))));
        let huge = NetConfig { layer_sizes: vec![u64::MAX, 2], ..five_layer_net() };
        assert!(matches!(pcilt_memory_bytes(&huge), Err(Error::Range(_))));
        assert!(serde_json::from_str::<NetConfig>(r#"{"layer_sizes":[1,2]}"#).is_err());
    }

    #[test]
    fn build_and_depth() {
        assert_eq!(build_mults((5, 5), 8), 6400);
        assert_eq!(build_mults((1, 1), 1), 2);
        assert_eq!(build_mults((3, 3), 4), 144);
        assert_eq!([1, 2, 8, 25].map(adder_tree_depth), [0, 1, 3, 5]);
    }

    #[test]
    fn large_plane_inference_counts() {
        let geom = ConvGeometry::new((1024, 768), (5, 5)).unwrap();
        let dm = inference_counts(&geom, 10_000, false, None).unwrap();
        assert_eq!(dm.mults, 194_820_000_000);
        let lut = inference_counts(&geom, 10_000, true, None).unwrap();
        assert_eq!((lut.lookups, lut.mults), (dm.mults, 0));
        let plan = crate::packing::compile_plan((5, 5), 1, 8, &[], &[]).unwrap();
        let packed = inference_counts(&geom, 1, true, Some(&plan)).unwrap();
        assert_eq!(packed.lookups, geom.positions() * 4);
    }

    #[test]
    fn shared_examples() {
        assert_eq!(shared_counts(32, 2, 1).unwrap().unique_tables, 64);
        assert_eq!(shared_counts(7, 1, 1).unwrap().value_growth, 1);
        assert_eq!(shared_counts(3, 1, 3).unwrap().value_growth, 9);
        assert!(shared_counts(u64::MAX, 1, 3).is_err());
    }

    #[test]
    fn report_text_and_json() {
        let cfg = NetConfig {
            input_shape: Some((1024, 768)),
            samples: 10_000,
            segment_len: Some(8),
            ..five_layer_net()
        };
        let r = CostReport::new(&cfg).unwrap();
        assert_eq!(r.dm_mults, Some(194_820_000_000));
        assert_eq!(r.adder_tree_depth, 2);
        let text = r.to_text();
        assert!(text.contains("memory_bytes: 1377280000\n"));
        let back: CostReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
