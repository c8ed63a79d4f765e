#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcilt::qtf::QtfRecord;
use pcilt::Filter;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn pcilt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcilt"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn write_filter(dir: &Path, name: &str, kh: usize, kw: usize, bits: u8, seed: u64) -> PathBuf {
    let f = Filter::random(kh, kw, bits, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let path = dir.join(name);
    QtfRecord::from(&f).save(&path).unwrap();
    path
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub const FIVE_LAYER_NET: &str =
    r#"{"layer_sizes":[50,80,120,200,350],"filter_shape":[5,5],"act_bits":8,"weight_bits":8}"#;
