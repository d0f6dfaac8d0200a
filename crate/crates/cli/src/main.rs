//! `rattn`: verification suites, synthetic recall training, kernel
//! benchmarks and the decode-cost analyzer.

mod analyze;
mod bench;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rattn_core::kvconfig::KvDoc;
use rattn_core::layer::LocalVariant;
use rattn_core::train::{run_headline, train, HeadlineConfig, TrainConfig};
use rattn_core::verify::{self, Fault};
use rattn_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "rattn", version, about = "Residual linear attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Oracle-equivalence and gradient checks.
    Verify(VerifyArgs),
    /// Train on the synthetic out-of-window recall task.
    Train(TrainArgs),
    /// Time the chunkwise kernels over a (chunk, save stride) grid.
    Bench(CommonArgs),
    /// Decode step-time and KV-cache analysis.
    Analyze(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "rattn-out")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Check name glob; repeatable. A bare word selects a group.
    #[arg(long)]
    filter: Vec<String>,
    /// List the checks and exit.
    #[arg(long)]
    list: bool,
    #[arg(long, hide = true, default_value = "none")]
    inject_fault: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run Rattention and the window-only model for every seed in
    /// `seeds` and evaluate length generalization.
    #[arg(long)]
    paired: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Use the 3B and 12B reference geometries.
    #[arg(long)]
    paper_configs: bool,
}

/// Process outcome: 0 success, 1 check failure, 2 configuration error.
enum Failure {
    Check(String),
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownKey(_) | Error::Infeasible(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let outcome = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => bench::cmd_bench(a),
        Command::Analyze(a) => analyze::cmd_analyze(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("FAILED: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("RATTN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("RATTN_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

/// Reads the configuration file, if any.
fn load_doc(path: Option<&Path>) -> Result<KvDoc, Failure> {
    match path {
        None => Ok(KvDoc::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            Ok(KvDoc::parse(&text)?)
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let fault = Fault::parse(&a.inject_fault)?;
    let checks = verify::select(&a.filter)?;
    if a.list {
        for c in &checks {
            println!("{:<28} {}", c.name, c.about);
        }
        return Ok(());
    }
    let mut doc = load_doc(a.common.config.as_deref())?;
    let seed = a.common.seed.or(doc.take("seed")?).unwrap_or(0);
    doc.finish()?;
    std::fs::create_dir_all(&a.common.out)?;
    let report = verify::run(&checks, fault);
    for c in &report.checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        println!(
            "{status} {:<28} max_err {:.3e} (tol {:.0e}, {} cases, {:.2}s){}",
            c.name,
            c.max_error,
            c.tolerance,
            c.cases,
            c.seconds,
            c.error.as_deref().map(|e| format!(" error: {e}")).unwrap_or_default()
        );
    }
    write_json(
        &a.common.out.join("verify.json"),
        &json!({ "seed": seed, "fault": a.inject_fault, "report": report }),
    )?;
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure::Check(failed.join(", ")))
    }
}

/// Headline defaults, then the config file, then flags.
fn train_config(common: &CommonArgs) -> Result<(TrainConfig, Vec<u64>, Precision), Failure> {
    let mut doc = load_doc(common.config.as_deref())?;
    let mut cfg = TrainConfig::recall_default(LocalVariant::Rattention, 0);
    cfg.apply_kv(&mut doc)?;
    let precision = match (common.precision, doc.take_raw("precision")) {
        (Some(p), _) => p,
        (None, Some(s)) => Precision::from_str(&s, true).map_err(|_| Failure::Config(format!("invalid precision `{s}`")))?,
        (None, None) => Precision::F32,
    };
    let seeds: Vec<u64> = match doc.take_raw("seeds") {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Failure::Config(format!("invalid seed list `{list}`"))))
            .collect::<Result<_, _>>()?,
        None => vec![0, 1, 2],
    };
    doc.finish()?;
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.task.seed = s;
    }
    cfg.validate()?;
    Ok((cfg, seeds, precision))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let (cfg, seeds, precision) = train_config(&a.common)?;
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    if a.paired {
        let hc = HeadlineConfig {
            base: cfg,
            seeds: a.common.seed.map_or(seeds, |s| vec![s]),
            ..HeadlineConfig::recall_default()
        };
        let report = match precision {
            Precision::F32 => run_headline::<f32>(&hc, Some(out))?,
            Precision::F64 => run_headline::<f64>(&hc, Some(out))?,
        };
        print!("{}", report.summary_csv());
        println!(
            "chance {:.4}, band [{:.4}, {:.4}], min margin {:.4}",
            report.chance, report.chance_band.0, report.chance_band.1, report.ordering_margin()
        );
        return Ok(());
    }
    let outcome = match precision {
        Precision::F32 => train::<f32>(&cfg, Some(out)).map(|o| o.trace)?,
        Precision::F64 => train::<f64>(&cfg, Some(out)).map(|o| o.trace)?,
    };
    write_json(
        &out.join("run.json"),
        &json!({ "command": "train", "seed": cfg.seed, "precision": precision.name(), "variant": cfg.model.local_variant.name() }),
    )?;
    for r in &outcome {
        println!("step {:>6}  loss {:.4}  accuracy {:.4}", r.step, r.loss, r.accuracy);
    }
    Ok(())
}
