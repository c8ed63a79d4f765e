use std::collections::BTreeSet;

use pcilt::cost::{adder_tree_depth, build_mults, inference_counts, pcilt_memory_bytes, shared_counts, NetConfig};
use pcilt::{
    build_bank, build_segment_bank, compile_plan, dm_conv2d_counted, dm_mult_count, packed_conv2d_counted,
    pcilt_conv2d_counted, Cardinality, ConvFn, ConvGeometry, Filter, QTensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_counts_match_instrumented_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = Cardinality::new(1).unwrap();
    for kh in 1..=5 {
        for kw in 1..=5 {
            let filter = Filter::random(kh, kw, 4, &mut rng).unwrap();
            let bank = build_bank(&filter, c, &ConvFn::Product).unwrap();
            assert_eq!(bank.build_evals(), build_mults((kh, kw), 1));
            let plan = compile_plan((kh, kw), 1, 8, &[], &[]).unwrap();
            let seg = build_segment_bank(&filter, &plan, &ConvFn::Product).unwrap();
            for h in kh..=32 {
                for w in (kw..=32).step_by(3) {
                    let input = QTensor::zeros(h, w, c).unwrap();
                    let geom = ConvGeometry::new((h, w), (kh, kw)).unwrap();
                    let (_, dm) = dm_conv2d_counted(&input, &filter, &ConvFn::Product).unwrap();
                    assert_eq!(dm, inference_counts(&geom, 1, false, None).unwrap());
                    assert_eq!(dm.mults, dm_mult_count(1, &geom).unwrap());
                    let (_, lut) = pcilt_conv2d_counted(&input, &bank).unwrap();
                    assert_eq!(lut, inference_counts(&geom, 1, true, None).unwrap());
                    let (_, packed) = packed_conv2d_counted(&input, &seg).unwrap();
                    assert_eq!(packed, inference_counts(&geom, 1, true, Some(&plan)).unwrap());
                }
            }
        }
    }
}

#[test]
fn adder_depth_is_minimal_cover() {
    for n in 1u64..=1024 {
        let brute = (0..).find(|&d| 1u64 << d >= n).unwrap();
        assert_eq!(adder_tree_depth(n), brute, "fan-in {n}");
    }
}

#[test]
fn memory_scales_multiplicatively() {
    let base = NetConfig {
        layer_sizes: vec![3, 7, 2],
        filter_shape: (3, 3),
        act_bits: 6,
        weight_bits: 8,
        entry_bits: None,
        input_shape: None,
        samples: 1,
        segment_len: None,
        weight_cardinality: None,
        act_cardinalities: None,
    };
    let m = pcilt_memory_bytes(&base).unwrap();
    assert_eq!(m, (3 * 7 + 7 * 2) * 9 * 64 * 2);
    for bits in 1..6 {
        let smaller = pcilt_memory_bytes(&NetConfig { act_bits: bits, ..base.clone() }).unwrap();
        assert_eq!(smaller << (6 - bits), m);
    }
    for entry_bits in [8, 24, 32, 64] {
        let scaled = pcilt_memory_bytes(&NetConfig { entry_bits: Some(entry_bits), ..base.clone() }).unwrap();
        assert_eq!(scaled * 16, m * entry_bits as u64);
    }
}

#[test]
fn value_growth_matches_tuple_enumeration() {
    for x in 1u64..=8 {
        for n in 1u32..=4 {
            let mut tuples = BTreeSet::new();
            let mut digits = vec![0u64; n as usize];
            loop {
                tuples.insert(digits.clone());
                let Some(i) = digits.iter().position(|&d| d + 1 < x) else { break };
                digits[i] += 1;
                digits[..i].iter_mut().for_each(|d| *d = 0);
            }
            assert_eq!(shared_counts(x, 1, n).unwrap().value_growth, tuples.len() as u64 / x);
        }
    }
}
