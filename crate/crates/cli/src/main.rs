use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use pcilt::bankfile::AnyBank;
use pcilt::bench::{bench, verify, BenchConfig};
use pcilt::cost::{CostReport, NetConfig};
use pcilt::learned::{auto_lr, hidden_conv_dataset, train, Granularity, LearnedBank, TrainConfig};
use pcilt::qtf::{load_filter, AnyFilter, QtfRecord};
use pcilt::{
    build_bank_with, build_segment_bank, build_split_bank, compile_plan, dedup, BankRef, BuildOptions, Cardinality,
    ConvFn, Error, Filter, ValueGrid, Weight,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// Build, verify and benchmark lookup-table convolution banks.
#[derive(Parser)]
#[command(name = "pcilt", version)]
struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for the convolution kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write the command's result as JSON to this path.
    #[arg(long, global = true)]
    json: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a bank from one or more filters. Several filters are merged
    /// into one shared bank.
    Build(BuildArgs),
    /// Compare a bank against direct multiplication on random inputs.
    Verify(VerifyArgs),
    /// Time direct multiplication against the bank's lookup kernels.
    Bench(BenchArgs),
    /// Closed-form operation and memory counts for a network.
    Cost(CostArgs),
    /// Fit learned tables to a synthetic task.
    Train(TrainArgs),
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long, required = true, num_args = 1..)]
    filter: Vec<PathBuf>,
    #[arg(long)]
    act_bits: u8,
    #[arg(long = "fn", default_value = "product")]
    func: String,
    /// Value grid for `--fn table`.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    segment_len: Option<usize>,
    #[arg(long, num_args = 1.., requires = "segment_len")]
    skip: Vec<usize>,
    #[arg(long, num_args = 1.., requires = "segment_len")]
    repeat: Vec<usize>,
    /// Split activations at this bit into two table lookups.
    #[arg(long, conflicts_with = "segment_len")]
    split: Option<u8>,
    /// Keep the input weight as a per-output multiplication instead of
    /// folding it into the tables.
    #[arg(long)]
    no_fold: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, default_value_t = 16)]
    max_hw: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    bank: PathBuf,
    /// Input plane as HxW.
    #[arg(long, default_value = "1024x768", value_parser = parse_hw)]
    input_size: (usize, usize),
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    granularity: String,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Step size; derived from the loss curvature when omitted.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value = "hidden-conv")]
    task: String,
    /// Hidden target: `scaled-product` is scale*w*a, `square` is w*a^2.
    #[arg(long, default_value = "scaled-product")]
    target: String,
    #[arg(long, default_value_t = 3.0)]
    scale: f64,
    #[arg(long, default_value_t = 2)]
    act_bits: u8,
    #[arg(long, default_value_t = 4)]
    weight_bits: u8,
    #[arg(long, default_value_t = 3)]
    filter_size: usize,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value = "16x16", value_parser = parse_hw)]
    input_size: (usize, usize),
    /// Loss trace CSV.
    #[arg(long)]
    trace: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

/// What a command produced: lines for stdout, a JSON value, and whether it
/// counts as a verification failure.
struct Outcome {
    text: String,
    json: Value,
    failed: bool,
}

fn conv_fn(id: &str, grid: Option<&Path>) -> anyhow::Result<ConvFn> {
    match (id, grid) {
        ("table", Some(path)) => Ok(ConvFn::table(ValueGrid::from_qtf(QtfRecord::load(path)?)?)),
        (_, Some(_)) => bail!("--grid is only used with --fn table"),
        _ => Ok(ConvFn::builtin(id)?),
    }
}

fn build_one<W: Weight>(filter: &Filter<W>, a: &BuildArgs, f: &ConvFn) -> pcilt::Result<Built<W>> {
    let card = Cardinality::new(a.act_bits)?;
    if let Some(n) = a.segment_len {
        let plan = compile_plan(filter.shape(), a.act_bits, n, &a.skip, &a.repeat)?;
        return Ok(Built::Segment(build_segment_bank(filter, &plan, f)?));
    }
    if let Some(p) = a.split {
        return Ok(Built::Split(build_split_bank(filter, a.act_bits, p, f)?));
    }
    let opts = BuildOptions {
        fold_input_weight: !a.no_fold,
        ..BuildOptions::default()
    };
    Ok(Built::Basic(build_bank_with(filter, card, f, opts)?))
}

enum Built<W: Weight> {
    Basic(pcilt::PciltBank<W>),
    Segment(pcilt::SegmentBank<W>),
    Split(pcilt::SplitBank<W>),
}

fn wrap_int(b: Built<i32>) -> AnyBank {
    match b {
        Built::Basic(b) => AnyBank::Basic(b),
        Built::Segment(b) => AnyBank::Segment(b),
        Built::Split(b) => AnyBank::Split(b),
    }
}

fn wrap_real(b: Built<f64>) -> AnyBank {
    match b {
        Built::Basic(b) => AnyBank::BasicReal(b),
        Built::Segment(b) => AnyBank::SegmentReal(b),
        Built::Split(b) => AnyBank::SplitReal(b),
    }
}

fn table_count(bank: &AnyBank) -> usize {
    match bank {
        AnyBank::Basic(b) => b.taps(),
        AnyBank::BasicReal(b) => b.taps(),
        AnyBank::Segment(b) => b.plan().segments().len(),
        AnyBank::SegmentReal(b) => b.plan().segments().len(),
        AnyBank::Split(b) => 2 * b.lo().taps(),
        AnyBank::SplitReal(b) => 2 * b.lo().taps(),
        AnyBank::Shared(b) => b.tables().len(),
        AnyBank::Learned(b) => b.taps(),
    }
}

fn cmd_build(a: &BuildArgs) -> anyhow::Result<Outcome> {
    let f = conv_fn(&a.func, a.grid.as_deref())?;
    let mut built = Vec::with_capacity(a.filter.len());
    for path in &a.filter {
        let filter = load_filter(path).with_context(|| format!("reading {}", path.display()))?;
        built.push(match filter {
            AnyFilter::Int(filter) => wrap_int(build_one(&filter, a, &f)?),
            AnyFilter::Real(filter) => wrap_real(build_one(&filter, a, &f)?),
        });
    }
    let evals: u64 = built.iter().map(AnyBank::build_evals).sum();
    let bank = if built.len() == 1 {
        built.pop().expect("one bank")
    } else {
        let refs = built
            .iter()
            .map(|b| match b {
                AnyBank::Basic(b) => Ok(BankRef::Basic(b)),
                AnyBank::Segment(b) => Ok(BankRef::Segment(b)),
                other => bail!("{} banks of real or split kind cannot be shared", other.kind_name()),
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        AnyBank::Shared(dedup(&refs)?)
    };
    bank.save(&a.output)?;
    let tables = table_count(&bank);
    let mut text = format!("build multiplications: {evals}\n");
    let label = if matches!(bank, AnyBank::Segment(_) | AnyBank::SegmentReal(_)) {
        "segment tables"
    } else {
        "tables"
    };
    writeln!(text, "{label}: {tables}")?;
    writeln!(text, "memory bytes: {}", bank.memory_bytes())?;
    let mut json = json!({
        "kind": bank.kind_name(),
        "build_multiplications": evals,
        "tables": tables,
        "memory_bytes": bank.memory_bytes(),
    });
    if let AnyBank::Shared(s) = &bank {
        let stats = s.stats();
        writeln!(text, "unique tables: {}", stats.unique_tables)?;
        writeln!(text, "prefix merges: {}", stats.prefix_merges)?;
        json["shared"] = serde_json::to_value(stats)?;
    }
    Ok(Outcome {
        text,
        json,
        failed: false,
    })
}

fn cmd_verify(a: &VerifyArgs, seed: u64) -> anyhow::Result<Outcome> {
    let bank = AnyBank::load(&a.bank).with_context(|| format!("reading {}", a.bank.display()))?;
    let report = verify(&bank, a.seeds, a.max_hw, seed)?;
    let mut text = String::new();
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    for m in &report.mismatches {
        writeln!(
            text,
            "mismatch: seed {} consumer {} at ({}, {}): expected {}, got {}",
            m.seed, m.consumer, m.row, m.col, m.expected, m.got
        )?;
    }
    let mode = if report.exact { "bit-exact" } else { "within tolerance" };
    writeln!(
        text,
        "{}: {} {} comparisons, {} mismatching",
        if report.passed() { "pass" } else { "FAIL" },
        report.comparisons,
        mode,
        report.mismatches.len()
    )?;
    Ok(Outcome {
        text,
        failed: !report.passed(),
        json: serde_json::to_value(&report)?,
    })
}

fn cmd_bench(a: &BenchArgs, seed: u64) -> anyhow::Result<Outcome> {
    let bank = AnyBank::load(&a.bank).with_context(|| format!("reading {}", a.bank.display()))?;
    let cfg = BenchConfig {
        input_shape: a.input_size,
        samples: a.samples,
        reps: a.reps,
        warmup: a.warmup,
        seed,
    };
    let report = match bench(&bank, &cfg) {
        Ok(r) => r,
        Err(e @ Error::State(_)) => {
            return Ok(Outcome {
                text: format!("FAIL: {e}\n"),
                json: json!({ "error": e.to_string() }),
                failed: true,
            })
        }
        Err(e) => return Err(e.into()),
    };
    if !report.optimized_build {
        eprintln!("warning: built with debug assertions; use a release build for representative timings");
    }
    let mut text = format!(
        "checksums agree across {} kernels: {}\n",
        report.kernels.len(),
        report.kernels[0].checksum
    );
    for k in &report.kernels {
        writeln!(
            text,
            "{:<7} median {:>10.3} ms  {:>12.0} positions/s  speedup {:.2}x",
            k.kernel,
            k.median_ns as f64 / 1e6,
            k.positions_per_sec,
            k.speedup_vs_dm
        )?;
    }
    writeln!(text, "reference packed speedup: {:.2}x", report.reference_packed_speedup)?;
    Ok(Outcome {
        text,
        json: serde_json::to_value(&report)?,
        failed: false,
    })
}

fn cmd_cost(a: &CostArgs) -> anyhow::Result<Outcome> {
    let raw = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg: NetConfig = serde_json::from_str(&raw).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
    let report = CostReport::new(&cfg)?;
    Ok(Outcome {
        text: report.to_text(),
        json: serde_json::to_value(&report)?,
        failed: false,
    })
}

fn cmd_train(a: &TrainArgs, seed: u64) -> anyhow::Result<Outcome> {
    let granularity: Granularity = a.granularity.parse()?;
    if a.task != "hidden-conv" {
        return Err(Error::Config(format!("unknown task `{}`", a.task)).into());
    }
    let scale = a.scale;
    let hidden: Box<dyn Fn(i32, u32) -> f64> = match a.target.as_str() {
        "scaled-product" => Box::new(move |w, x| scale * w as f64 * x as f64),
        "square" => Box::new(|w, x| w as f64 * (x as f64) * (x as f64)),
        other => return Err(Error::Config(format!("unknown target `{other}`")).into()),
    };
    let card = Cardinality::new(a.act_bits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filter = Filter::random(a.filter_size, a.filter_size, a.weight_bits, &mut rng)?;
    let data = hidden_conv_dataset(&filter, card, hidden, a.samples, a.input_size, &mut rng)?;
    let bank = LearnedBank::from_filter(&filter, card, &ConvFn::Product, granularity)?;
    let lr = match a.lr {
        Some(lr) => lr,
        None => auto_lr(&bank, &data)?,
    };
    let cfg = TrainConfig { lr, steps: a.steps };
    let (bank, trace) = match train(bank, &data, cfg) {
        Ok(r) => r,
        Err(Error::Diverged { step, loss, trace }) => {
            write_trace(&a.trace, &trace)?;
            bail!("training diverged at step {step} (loss {loss:e}); partial trace written");
        }
        Err(e) => return Err(e.into()),
    };
    write_trace(&a.trace, &trace)?;
    AnyBank::Learned(bank.clone()).save(&a.output)?;
    let (first, last) = (trace[0], trace[trace.len() - 1]);
    let mut text = format!("granularity: {granularity}\nlr: {lr:e}\ninitial loss: {first:e}\nfinal loss: {last:e}\n");
    if granularity == Granularity::FilterWide {
        writeln!(text, "scale: {}", bank.params()[0])?;
    }
    Ok(Outcome {
        text,
        json: json!({
            "granularity": granularity.name(),
            "steps": a.steps,
            "lr": lr,
            "initial_loss": first,
            "final_loss": last,
            "params": bank.params(),
        }),
        failed: false,
    })
}

fn write_trace(path: &Path, trace: &[f64]) -> anyhow::Result<()> {
    let mut csv = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(csv, "{i},{l:e}")?;
    }
    std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Build(a) => cmd_build(a),
        Command::Verify(a) => cmd_verify(a, cli.seed),
        Command::Bench(a) => cmd_bench(a, cli.seed),
        Command::Cost(a) => cmd_cost(a),
        Command::Train(a) => cmd_train(a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            print!("{}", out.text);
            if let Some(path) = &cli.json {
                let body = serde_json::to_string_pretty(&out.json).expect("JSON value serializes");
                if let Err(e) = std::fs::write(path, body + "\n") {
                    eprintln!("error: writing {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
            ExitCode::from(u8::from(out.failed))
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
