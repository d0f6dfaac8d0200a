use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rattn_core::linear::{ChunkKernel, FeatureMap};
use rattn_core::rla::RlaParams;
use rattn_core::{Scalar, Tensor};
use serde::Serialize;
use serde_json::json;

use crate::{load_doc, write_json, CmdResult, CommonArgs, Failure, Precision};

#[derive(Clone, Debug)]
struct BenchConfig {
    len: usize,
    batch: usize,
    heads: usize,
    head_dim: usize,
    window_chunks: usize,
    chunks: Vec<usize>,
    strides: Vec<usize>,
    kernels: Vec<String>,
    repeats: usize,
    warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            len: 512,
            batch: 2,
            heads: 4,
            head_dim: 32,
            window_chunks: 2,
            chunks: vec![4, 8, 16],
            strides: vec![1, 2, 4],
            kernels: vec!["la".into(), "rla".into()],
            repeats: 5,
            warmup: 1,
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, Failure> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| Failure::Config(format!("invalid list `{v}` for `{key}`"))))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    kernel: String,
    chunk: usize,
    stride: usize,
    median_s: f64,
    min_s: f64,
    max_s: f64,
    stddev_s: f64,
    best: bool,
}

fn time_kernel<T: Scalar>(kernel: ChunkKernel, cfg: &BenchConfig, seed: u64) -> Result<Vec<f64>, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [cfg.batch, cfg.heads, cfg.len, cfg.head_dim];
    let q = Tensor::<T>::randn(&shape, 0.5, &mut rng);
    let k = Tensor::<T>::randn(&shape, 0.5, &mut rng);
    let v = Tensor::<T>::randn(&shape, 1.0, &mut rng);
    let g = Tensor::<T>::randn(&shape, 1.0, &mut rng);
    let once = || -> Result<f64, Failure> {
        let t = Instant::now();
        let (_, sched) = kernel.forward(&q, &k, &v)?;
        kernel.backward(&q, &k, &v, &sched, &g)?;
        Ok(t.elapsed().as_secs_f64())
    };
    for _ in 0..cfg.warmup {
        once()?;
    }
    (0..cfg.repeats).map(|_| once()).collect()
}

fn stats(mut xs: Vec<f64>) -> (f64, f64, f64, f64) {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let median = if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) };
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (median, xs[0], xs[n - 1], var.sqrt())
}

fn run<T: Scalar>(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>, Failure> {
    let mut rows = Vec::new();
    for name in &cfg.kernels {
        let start = rows.len();
        for &c in &cfg.chunks {
            for &m in &cfg.strides {
                let kernel = match name.as_str() {
                    "la" => ChunkKernel::linear(c),
                    "rla" => RlaParams::new(cfg.window_chunks * c, c)?.kernel(FeatureMap::Identity, 1),
                    other => return Err(Failure::Config(format!("unknown kernel `{other}`"))),
                }
                .with_feature_map(FeatureMap::Softmax)
                .with_save_stride(m);
                let (median_s, min_s, max_s, stddev_s) = stats(time_kernel::<T>(kernel, cfg, seed)?);
                rows.push(BenchRow {
                    kernel: name.clone(),
                    chunk: c,
                    stride: m,
                    median_s,
                    min_s,
                    max_s,
                    stddev_s,
                    best: false,
                });
            }
        }
        if let Some(best) = (start..rows.len()).min_by(|&a, &b| rows[a].median_s.total_cmp(&rows[b].median_s)) {
            rows[best].best = true;
        }
    }
    Ok(rows)
}

pub fn cmd_bench(a: CommonArgs) -> CmdResult {
    let mut doc = load_doc(a.config.as_deref())?;
    let mut cfg = BenchConfig::default();
    doc.take_into("len", &mut cfg.len)?;
    doc.take_into("batch", &mut cfg.batch)?;
    doc.take_into("heads", &mut cfg.heads)?;
    doc.take_into("head_dim", &mut cfg.head_dim)?;
    doc.take_into("window_chunks", &mut cfg.window_chunks)?;
    doc.take_into("repeats", &mut cfg.repeats)?;
    doc.take_into("warmup", &mut cfg.warmup)?;
    if let Some(v) = doc.take_raw("chunks") {
        cfg.chunks = list("chunks", &v)?;
    }
    if let Some(v) = doc.take_raw("strides") {
        cfg.strides = list("strides", &v)?;
    }
    if let Some(v) = doc.take_raw("kernels") {
        cfg.kernels = list("kernels", &v)?;
    }
    let seed = match a.seed {
        Some(s) => s,
        None => doc.take("seed")?.unwrap_or(0),
    };
    doc.finish()?;
    if cfg.warmup == 0 || cfg.repeats == 0 {
        return Err(Failure::Config("warmup and repeats must be at least 1".into()));
    }
    let precision = a.precision.unwrap_or(Precision::F32);
    let rows = match precision {
        Precision::F32 => run::<f32>(&cfg, seed)?,
        Precision::F64 => run::<f64>(&cfg, seed)?,
    };
    let mut csv = String::from("kernel,chunk,stride,median_s,min_s,max_s,stddev_s,best\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{:.6e},{:.6e},{:.6e},{:.3e},{}",
            r.kernel, r.chunk, r.stride, r.median_s, r.min_s, r.max_s, r.stddev_s, r.best
        );
    }
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("bench.csv"), &csv)?;
    write_json(
        &a.out.join("bench.json"),
        &json!({
            "seed": seed,
            "precision": precision.name(),
            "len": cfg.len, "batch": cfg.batch, "heads": cfg.heads, "head_dim": cfg.head_dim,
            "repeats": cfg.repeats, "warmup": cfg.warmup,
            "rows": rows,
        }),
    )?;
    print!("{csv}");
    Ok(())
}
