mod common;

use common::{code, pcilt, s, stderr, stdout, write_filter, FIVE_LAYER_NET};
use pcilt::bankfile::AnyBank;
use serde_json::Value;
use tempfile::tempdir;

#[test]
fn build_reports_function_evaluations() {
    let dir = tempdir().unwrap();
    let f = write_filter(dir.path(), "f.qtf", 5, 5, 8, 1);
    let out = dir.path().join("b.pcb");
    let o = pcilt(&["build", "--filter", s(&f), "--act-bits", "8", "--fn", "product", "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("build multiplications: 6400\n"));
    assert!(matches!(AnyBank::load(&out).unwrap(), AnyBank::Basic(_)));
}

#[test]
fn boolean_packing_makes_four_segments() {
    let dir = tempdir().unwrap();
    let f = write_filter(dir.path(), "f.qtf", 5, 5, 4, 2);
    let out = dir.path().join("p.pcb");
    let o = pcilt(&["build", "--filter", s(&f), "--act-bits", "1", "--segment-len", "8", "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("segment tables: 4\n"));
}

#[test]
fn unknown_function_is_a_usage_error() {
    let dir = tempdir().unwrap();
    let f = write_filter(dir.path(), "f.qtf", 3, 3, 4, 3);
    let o = pcilt(&["build", "--filter", s(&f), "--act-bits", "2", "--fn", "cosine", "-o", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown function"));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn bad_build_options_exit_two() {
    let dir = tempdir().unwrap();
    let f = write_filter(dir.path(), "f.qtf", 3, 3, 4, 4);
    let out = dir.path().join("x");
    let build = |bits: &str, extra: &[&str]| {
        let mut args = vec!["build", "--filter", s(&f), "--act-bits", bits, "-o", s(&out)];
        args.extend_from_slice(extra);
        code(&pcilt(&args))
    };
    assert_eq!(build("4", &["--split", "1"]), 0);
    assert_eq!(build("1", &["--split", "1"]), 2);
    assert_eq!(build("4", &["--segment-len", "9"]), 2);
    assert_eq!(build("4", &["--segment-len", "2", "--skip", "11"]), 2);
    assert_eq!(build("4", &["--segment-len", "2", "--skip", "1", "--repeat", "1"]), 2);
    assert_eq!(build("17", &[]), 2);
    let missing = dir.path().join("missing.qtf");
    assert_eq!(code(&pcilt(&["build", "--filter", s(&missing), "--act-bits", "1", "-o", s(&out)])), 2);
}

#[test]
fn verify_passes_and_catches_corruption() {
    let dir = tempdir().unwrap();
    let f = write_filter(dir.path(), "f.qtf", 3, 3, 6, 5);
    let bank = dir.path().join("b.pcb");
    pcilt(&["build", "--filter", s(&f), "--act-bits", "4", "-o", s(&bank)]);
    let o = pcilt(&["verify", "--bank", s(&bank), "--seeds", "300", "--max-hw", "16"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).starts_with("pass: 300 bit-exact"));

    let AnyBank::Basic(mut b) = AnyBank::load(&bank).unwrap() else { panic!("basic bank expected") };
    b.entries_mut()[5] += 1;
    AnyBank::Basic(b).save(&bank).unwrap();
    let json = dir.path().join("v.json");
    let o = pcilt(&["verify", "--bank", s(&bank), "--seeds", "50", "--json", s(&json)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("mismatch: seed "));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let first = &report["mismatches"][0];
    assert!(first["row"].is_u64() && first["col"].is_u64() && first["seed"].is_u64());
}

#[test]
fn verify_with_no_seeds_warns() {
    let dir = tempdir().unwrap();
    let f = write_filter(dir.path(), "f.qtf", 2, 2, 3, 6);
    let bank = dir.path().join("b.pcb");
    pcilt(&["build", "--filter", s(&f), "--act-bits", "2", "-o", s(&bank)]);
    let o = pcilt(&["verify", "--bank", s(&bank), "--seeds", "0"]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn shared_bank_from_several_filters_verifies() {
    let dir = tempdir().unwrap();
    let a = write_filter(dir.path(), "a.qtf", 3, 3, 2, 7);
    let b = write_filter(dir.path(), "b.qtf", 3, 3, 2, 8);
    let bank = dir.path().join("s.pcb");
    let o = pcilt(&["build", "--filter", s(&a), s(&b), "--act-bits", "3", "-o", s(&bank)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("unique tables: "));
    assert!(matches!(AnyBank::load(&bank).unwrap(), AnyBank::Shared(_)));
    assert_eq!(code(&pcilt(&["verify", "--bank", s(&bank), "--seeds", "40"])), 0);
}

#[test]
fn bench_reports_gated_json() {
    let dir = tempdir().unwrap();
    let f = write_filter(dir.path(), "f.qtf", 3, 3, 4, 9);
    let bank = dir.path().join("p.pcb");
    pcilt(&["build", "--filter", s(&f), "--act-bits", "2", "--segment-len", "3", "-o", s(&bank)]);
    let json = dir.path().join("b.json");
    let o = pcilt(&["bench", "--bank", s(&bank), "--input-size", "64x48", "--samples", "2", "--json", s(&json)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let kernels = r["kernels"].as_array().unwrap();
    assert_eq!(kernels.len(), 3);
    assert!(kernels.iter().all(|k| k["checksum"] == kernels[0]["checksum"]));
    assert_eq!(kernels[0]["kernel"], "dm");
    assert_eq!(kernels[0]["speedup_vs_dm"], 1.0);
    assert_eq!(r["reference_packed_speedup"], 6.59);
    let o = pcilt(&["bench", "--bank", s(&bank), "--reps", "2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn cost_reports_five_layer_memory() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("net.json");
    std::fs::write(&cfg, FIVE_LAYER_NET).unwrap();
    let json = dir.path().join("c.json");
    let o = pcilt(&["cost", "--config", s(&cfg), "--json", s(&json)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("memory_bytes: 1377280000\n"));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(r["memory_bytes"], 1_377_280_000u64);

    std::fs::write(&cfg, FIVE_LAYER_NET.replace("\"act_bits\":8", "\"act_bits\":4")).unwrap();
    let o = pcilt(&["cost", "--config", s(&cfg)]);
    assert!(stdout(&o).contains("memory_bytes: 86080000\n"));

    for bad in [r#"{"layer_sizes":[],"filter_shape":[5,5],"act_bits":8,"weight_bits":8}"#, "{", "[]"] {
        std::fs::write(&cfg, bad).unwrap();
        assert_eq!(code(&pcilt(&["cost", "--config", s(&cfg)])), 2, "{bad}");
    }
}

#[test]
fn train_recovers_scale_and_writes_trace() {
    let dir = tempdir().unwrap();
    let (trace, bank) = (dir.path().join("t.csv"), dir.path().join("l.pcb"));
    let o = pcilt(&["train", "--granularity", "filter-wide", "--steps", "500", "--trace", s(&trace), "-o", s(&bank)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let AnyBank::Learned(l) = AnyBank::load(&bank).unwrap() else { panic!("learned bank expected") };
    assert!((l.params()[0] - 3.0).abs() <= 1e-3);
    let csv = std::fs::read_to_string(&trace).unwrap();
    assert!(csv.starts_with("step,loss\n0,"));
    assert_eq!(csv.lines().count(), 502);

    let o = pcilt(&["train", "--granularity", "per-value", "--steps", "0", "--trace", s(&trace), "-o", s(&bank)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 2);
}

#[test]
fn train_errors() {
    let dir = tempdir().unwrap();
    let (trace, bank) = (dir.path().join("t.csv"), dir.path().join("l.pcb"));
    let o = pcilt(&["train", "--granularity", "per-neuron", "--trace", s(&trace), "-o", s(&bank)]);
    assert_eq!(code(&o), 2);
    let o = pcilt(&["train", "--granularity", "filter-wide", "--lr", "1", "--steps", "50", "--trace", s(&trace), "-o", s(&bank)]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("diverged"));
    let csv = std::fs::read_to_string(&trace).unwrap();
    assert!(csv.lines().count() >= 2);
    assert!(!bank.exists());
}
