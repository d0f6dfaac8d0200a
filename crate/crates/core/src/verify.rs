//! Named oracle-equivalence and gradient checks, selectable by glob.
//!
//! Names are `group/check`. A filter without glob metacharacters selects a
//! whole group (or one exact name); otherwise it is matched as a glob
//! against the full name.

use std::time::Instant;

use glob::Pattern;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{sliding_window_attention, AttnConfig};
use crate::autodiff::grad_check_many;
use crate::efficiency::{kv_cache_bytes, kv_savings_pct, LocalCache};
use crate::error::{Error, Result};
use crate::layer::{param_count, rattention_forward, LocalVariant, MixerKind, RattentionParams};
use crate::linear::{feature_map_apply, la_recurrent, ChunkKernel, FeatureMap, IntraMask};
use crate::model::{model_forward, ModelConfig, ModelParams};
use crate::oracle;
use crate::rla::{coverage_audit, rla_recurrent, RlaParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deliberate defects used to prove that the suite can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Plain linear attention with the diagonal dropped from its intra-chunk mask.
    BrokenMask,
}

impl Fault {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fault::None),
            "broken-mask" => Ok(Fault::BrokenMask),
            other => Err(Error::Config(format!("unknown fault `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub passed: bool,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

struct Measure {
    max_error: f64,
    tolerance: f64,
    cases: usize,
}

impl Measure {
    /// Zero tolerance means exact equality; otherwise strictly below.
    fn passed(&self) -> bool {
        if self.tolerance == 0.0 {
            self.max_error == 0.0
        } else {
            self.max_error < self.tolerance
        }
    }
}

#[derive(Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    pub about: &'static str,
    run: fn(Fault) -> Result<Measure>,
}

impl Check {
    pub fn run(&self, fault: Fault) -> CheckResult {
        let t = Instant::now();
        let outcome = (self.run)(fault);
        let seconds = t.elapsed().as_secs_f64();
        match outcome {
            Ok(m) => CheckResult {
                name: self.name.to_string(),
                passed: m.passed(),
                max_error: m.max_error,
                tolerance: m.tolerance,
                cases: m.cases,
                seconds,
                error: None,
            },
            Err(e) => CheckResult {
                name: self.name.to_string(),
                max_error: f64::INFINITY,
                tolerance: 0.0,
                cases: 0,
                passed: false,
                seconds,
                error: Some(e.to_string()),
            },
        }
    }
}

pub fn registry() -> Vec<Check> {
    vec![
        Check { name: "chunkwise/linear-f64", about: "chunkwise vs recurrent linear attention, 64-bit", run: chunkwise_linear::<f64> },
        Check { name: "chunkwise/linear-f32", about: "chunkwise vs recurrent linear attention, 32-bit", run: chunkwise_linear::<f32> },
        Check { name: "rla/chunkwise-f64", about: "chunkwise vs recurrent residual readout, 64-bit", run: chunkwise_rla::<f64> },
        Check { name: "rla/chunkwise-f32", about: "chunkwise vs recurrent residual readout, 32-bit", run: chunkwise_rla::<f32> },
        Check { name: "rla/zero-prefix", about: "residual output is exactly zero while the window covers the prefix", run: rla_zero_prefix },
        Check { name: "checkpoint/forward-bitwise", about: "forward output independent of save stride", run: checkpoint_forward },
        Check { name: "checkpoint/gradients", about: "gradients independent of save stride", run: checkpoint_gradients },
        Check { name: "checkpoint/state-count", about: "stored states equal ceil(chunks / stride)", run: checkpoint_state_count },
        Check { name: "oracle/swa-dense", about: "windowed attention vs dense masked scores", run: oracle_swa },
        Check { name: "oracle/gqa-loop", about: "grouped attention vs per-head loop", run: oracle_gqa },
        Check { name: "oracle/linear-quadratic", about: "linear attention vs quadratic form", run: oracle_linear_quadratic },
        Check { name: "oracle/residual-quadratic", about: "residual readout vs truncated quadratic form", run: oracle_residual_quadratic },
        Check { name: "oracle/cross-entropy", about: "cross entropy vs direct log-sum-exp", run: oracle_cross_entropy },
        Check { name: "gradient/layer", about: "finite differences through the combined layer", run: gradient_layer },
        Check { name: "gradient/model", about: "finite differences through an 8-layer model", run: gradient_model },
        Check { name: "coverage/partition", about: "window and state token sets partition the prefix", run: coverage_partition },
        Check { name: "parity/projections", about: "combined and windowed layers share projection counts", run: parity_projections },
        Check { name: "efficiency/motivation", about: "cache savings and token equivalents", run: efficiency_motivation },
    ]
}

fn has_glob_chars(s: &str) -> bool {
    s.contains(['*', '?', '['])
}

/// Checks selected by `filters` (all when empty), in registry order.
/// A filter that selects nothing is an error.
pub fn select(filters: &[String]) -> Result<Vec<Check>> {
    let all = registry();
    if filters.is_empty() {
        return Ok(all);
    }
    let mut keep = vec![false; all.len()];
    for f in filters {
        let hits: Vec<usize> = if has_glob_chars(f) {
            let pat = Pattern::new(f).map_err(|e| Error::Config(format!("bad filter `{f}`: {e}")))?;
            (0..all.len()).filter(|&i| pat.matches(all[i].name)).collect()
        } else {
            (0..all.len())
                .filter(|&i| all[i].name == f || all[i].name.split('/').next() == Some(f.as_str()))
                .collect()
        };
        if hits.is_empty() {
            return Err(Error::Config(format!("filter `{f}` matches no check")));
        }
        for i in hits {
            keep[i] = true;
        }
    }
    Ok(all.into_iter().zip(keep).filter_map(|(c, k)| k.then_some(c)).collect())
}

pub fn run(checks: &[Check], fault: Fault) -> VerifyReport {
    let checks: Vec<CheckResult> = checks.iter().map(|c| c.run(fault)).collect();
    VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

pub const CHUNK_GRID_LENS: [usize; 3] = [32, 64, 128];
pub const CHUNK_GRID_SIZES: [usize; 4] = [1, 4, 8, 16];

/// Raw q, k and values of shape `[1, 2, l, d]`; q and k scaled by `1/√d`.
fn qkv<T: Scalar>(l: usize, d: usize, seed: u64) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (d as f64).sqrt();
    let q = Tensor::<f64>::randn(&[1, 2, l, d], s, &mut rng);
    let k = Tensor::<f64>::randn(&[1, 2, l, d], s, &mut rng);
    let v = Tensor::<f64>::randn(&[1, 2, l, d], 1.0, &mut rng);
    (q.cast(), k.cast(), v.cast())
}

fn mapped<T: Scalar>(l: usize, fm: FeatureMap, seed: u64) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (q, k, v) = qkv::<T>(l, 8, seed);
    Ok((feature_map_apply(&q, fm)?, feature_map_apply(&k, fm)?, v))
}

fn tolerance<T: Scalar>() -> f64 {
    if T::NAME == "f64" {
        1e-10
    } else {
        1e-5
    }
}

/// Max error of the `T` kernel against the 64-bit recurrence on the same
/// (rounded) inputs.
fn kernel_error<T: Scalar>(kernel: ChunkKernel, qf: &Tensor<T>, kf: &Tensor<T>, v: &Tensor<T>, reference: &Tensor<f64>) -> Result<f64> {
    let (o, _) = kernel.forward(qf, kf, v)?;
    Ok(o.cast::<f64>().max_abs_diff(reference))
}

fn chunkwise_linear<T: Scalar>(fault: Fault) -> Result<Measure> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &l in &CHUNK_GRID_LENS {
        for &c in &CHUNK_GRID_SIZES {
            for fm in FeatureMap::ALL {
                let (qf, kf, v) = mapped::<T>(l, fm, (l * 31 + c) as u64)?;
                let reference = la_recurrent(&qf.cast::<f64>(), &kf.cast(), &v.cast())?;
                let mut kernel = ChunkKernel::linear(c).with_padding(false);
                if fault == Fault::BrokenMask {
                    kernel.mask = IntraMask::Strict;
                }
                worst = worst.max(kernel_error(kernel, &qf, &kf, &v, &reference)?);
                cases += 1;
            }
        }
    }
    Ok(Measure { max_error: worst, tolerance: tolerance::<T>(), cases })
}

fn chunkwise_rla<T: Scalar>(_: Fault) -> Result<Measure> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &c in &CHUNK_GRID_SIZES {
        for mult in [1, 2, 4] {
            let w = mult * c;
            for inclusive in [false, true] {
                let params = RlaParams::new(w, c)?.inclusive(inclusive);
                let (qf, kf, v) = mapped::<T>(128, FeatureMap::Softmax, (w * 7 + c) as u64)?;
                let reference = rla_recurrent(&qf.cast::<f64>(), &kf.cast(), &v.cast(), w, inclusive)?;
                let kernel = params.kernel(FeatureMap::Identity, 1).with_padding(false);
                worst = worst.max(kernel_error(kernel, &qf, &kf, &v, &reference)?);
                cases += 1;
            }
        }
    }
    Ok(Measure { max_error: worst, tolerance: tolerance::<T>(), cases })
}

fn rla_zero_prefix(_: Fault) -> Result<Measure> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &c in &CHUNK_GRID_SIZES {
        for mult in [1, 2, 4] {
            let w = mult * c;
            let (qf, kf, v) = mapped::<f64>(128, FeatureMap::Relu, w as u64)?;
            let (o, _) = RlaParams::new(w, c)?.kernel(FeatureMap::Identity, 1).forward(&qf, &kf, &v)?;
            for t in 0..=w.min(127) {
                for j in 0..8 {
                    worst = worst.max(o.at(&[0, 1, t, j]).abs());
                }
            }
            cases += 1;
        }
    }
    Ok(Measure { max_error: worst, tolerance: 0.0, cases })
}

pub const SAVE_STRIDES: [usize; 4] = [1, 2, 4, 8];

fn checkpoint_forward(_: Fault) -> Result<Measure> {
    let (q, k, v) = qkv::<f64>(128, 8, 5);
    let mut worst = 0.0f64;
    for lag in [0, 2] {
        let base = ChunkKernel { lag, ..ChunkKernel::linear(8).with_feature_map(FeatureMap::Softmax) };
        let (o1, _) = base.forward(&q, &k, &v)?;
        for m in SAVE_STRIDES {
            let (om, _) = base.with_save_stride(m).forward(&q, &k, &v)?;
            let differs = o1.data().iter().zip(om.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
            worst = worst.max(differs as f64);
        }
    }
    Ok(Measure { max_error: worst, tolerance: 0.0, cases: 2 * SAVE_STRIDES.len() })
}

fn rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b) / a.max_abs().max(1e-300)
}

fn checkpoint_gradients(_: Fault) -> Result<Measure> {
    let (q, k, v) = qkv::<f64>(128, 8, 6);
    let d_out = qkv::<f64>(128, 8, 7).2;
    let mut worst = 0.0f64;
    for lag in [0, 2] {
        let base = ChunkKernel { lag, ..ChunkKernel::linear(8).with_feature_map(FeatureMap::Softmax) };
        let (_, s1) = base.forward(&q, &k, &v)?;
        let (g1q, g1k, g1v, _) = base.backward(&q, &k, &v, &s1, &d_out)?;
        for m in SAVE_STRIDES {
            let km = base.with_save_stride(m);
            let (_, sm) = km.forward(&q, &k, &v)?;
            let (gq, gk, gv, _) = km.backward(&q, &k, &v, &sm, &d_out)?;
            worst = worst.max(rel_diff(&g1q, &gq)).max(rel_diff(&g1k, &gk)).max(rel_diff(&g1v, &gv));
        }
    }
    Ok(Measure { max_error: worst, tolerance: 1e-6, cases: 2 * SAVE_STRIDES.len() })
}

fn checkpoint_state_count(_: Fault) -> Result<Measure> {
    let (q, k, v) = qkv::<f64>(128, 4, 8);
    let mut mismatches = 0usize;
    let mut cases = 0;
    for c in [4, 8, 16] {
        for m in SAVE_STRIDES {
            let (_, s) = ChunkKernel::linear(c).with_save_stride(m).forward(&q, &k, &v)?;
            mismatches += usize::from(s.stored_states() != (128 / c).div_ceil(m));
            cases += 1;
        }
    }
    Ok(Measure { max_error: mismatches as f64, tolerance: 0.0, cases })
}

fn oracle_swa(_: Fault) -> Result<Measure> {
    let mut worst = 0.0f64;
    let (q, k, v) = qkv::<f64>(24, 8, 9);
    for w in [0, 1, 3, 8, 30] {
        let o = sliding_window_attention(&q, &k, &v, w)?;
        worst = worst.max(o.max_abs_diff(&oracle::dense_masked_attention(&q, &k, &v, Some(w))));
    }
    Ok(Measure { max_error: worst, tolerance: 1e-12, cases: 5 })
}

fn oracle_gqa(_: Fault) -> Result<Measure> {
    use crate::attention::gqa_expand;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let q = Tensor::<f64>::randn(&[2, 4, 20, 8], 0.5, &mut rng);
    let k = Tensor::<f64>::randn(&[2, 2, 20, 8], 0.5, &mut rng);
    let v = Tensor::<f64>::randn(&[2, 2, 20, 8], 1.0, &mut rng);
    let o = sliding_window_attention(&q, &gqa_expand(&k, 4)?, &gqa_expand(&v, 4)?, 5)?;
    let worst = o.max_abs_diff(&oracle::grouped_window_attention_loop(&q, &k, &v, 5));
    Ok(Measure { max_error: worst, tolerance: 1e-12, cases: 1 })
}

fn oracle_linear_quadratic(_: Fault) -> Result<Measure> {
    let mut worst = 0.0f64;
    for fm in FeatureMap::ALL {
        let (qf, kf, v) = mapped::<f64>(48, fm, 11)?;
        let (o, _) = ChunkKernel::linear(8).forward(&qf, &kf, &v)?;
        worst = worst.max(o.max_abs_diff(&oracle::linear_quadratic_form(&qf, &kf, &v, 0, true)));
    }
    Ok(Measure { max_error: worst, tolerance: 1e-10, cases: 3 })
}

fn oracle_residual_quadratic(_: Fault) -> Result<Measure> {
    let mut worst = 0.0f64;
    for (w, c) in [(4, 4), (8, 4), (16, 8)] {
        let (qf, kf, v) = mapped::<f64>(48, FeatureMap::Softmax, w as u64)?;
        let (o, _) = RlaParams::new(w, c)?.kernel(FeatureMap::Identity, 2).forward(&qf, &kf, &v)?;
        worst = worst.max(o.max_abs_diff(&oracle::residual_quadratic_form(&qf, &kf, &v, w)));
    }
    Ok(Measure { max_error: worst, tolerance: 1e-10, cases: 3 })
}

fn oracle_cross_entropy(_: Fault) -> Result<Measure> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = Tensor::<f64>::randn(&[6, 11], 3.0, &mut rng);
    let targets = [0, 10, usize::MAX, 4, 4, 7];
    let mut tape = crate::Tape::new();
    let x = tape.constant(logits.clone());
    let y = tape.cross_entropy(x, &targets, usize::MAX)?;
    let err = (tape.value(y).item() - oracle::cross_entropy_direct(&logits, &targets, usize::MAX)).abs();
    Ok(Measure { max_error: err, tolerance: 1e-12, cases: 1 })
}

/// Geometry of the layer-level gradient check.
pub fn gradient_layer_config() -> AttnConfig {
    AttnConfig {
        d_model: 8,
        n_heads: 2,
        n_kv_heads: 1,
        head_dim: 4,
        window: 2,
        chunk_size: 2,
        save_stride: 2,
        ..AttnConfig::desk(2)
    }
}

/// Worst relative gradient error of the combined layer under a random
/// linear readout, over every parameter and input coordinate.
pub fn layer_gradient_error(kind: MixerKind, seed: u64) -> Result<f64> {
    let cfg = gradient_layer_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = RattentionParams::<Tensor<f64>>::init(&cfg, kind, &mut rng)?;
    // unit norm scales hide scale errors; shift them
    let p = p.map(|name, t| if name.contains("norm") || name.starts_with("rms") { t.map(|v| v + 0.1) } else { t.clone() });
    let names: Vec<&'static str> = p.named().iter().map(|(n, _)| *n).collect();
    let mut inputs: Vec<Tensor<f64>> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.push(Tensor::randn(&[2, 7, cfg.d_model], 1.0, &mut rng));
    let readout = Tensor::<f64>::randn(&[2, 7, cfg.d_model], 1.0, &mut rng);
    let rep = grad_check_many(
        |t, vars| {
            let (x, pv) = vars.split_last().expect("inputs");
            let pp = RattentionParams::from_named(names.iter().copied().zip(pv.iter().copied()).collect())?;
            let y = rattention_forward(t, *x, &pp, &cfg, kind)?;
            let w = t.constant(readout.clone());
            let y = t.mul(y, w)?;
            t.sum(y)
        },
        &inputs,
        1e-5,
        None,
    )?;
    Ok(rep.worst())
}

/// Geometry of the model-level gradient check: 8 layers, local/global.
pub fn gradient_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk(4);
    cfg.vocab_size = 13;
    cfg.n_layers = 8;
    cfg.d_model = 16;
    cfg.ffn_dim = 24;
    cfg.attn = AttnConfig {
        d_model: 16,
        n_heads: 2,
        n_kv_heads: 1,
        head_dim: 8,
        chunk_size: 2,
        save_stride: 2,
        ..AttnConfig::desk(4)
    };
    cfg
}

/// Worst relative error over `per_tensor` sampled coordinates of every
/// parameter tensor of the 8-layer model.
pub fn model_gradient_error(per_tensor: usize, seed: u64) -> Result<f64> {
    let cfg = gradient_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut rng)?;
    let values: Vec<Tensor<f64>> = p
        .named()
        .into_iter()
        .map(|(name, t)| if name.contains("norm") || name.contains(".rms") { t.map(|v| v + 0.1) } else { t.clone() })
        .collect();
    let (b, l) = (2, 10);
    let mut trng = ChaCha8Rng::seed_from_u64(seed + 1);
    let tokens: Vec<usize> = (0..b * l).map(|_| rand::Rng::gen_range(&mut trng, 0..cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..b * l).map(|i| if i % 3 == 0 { usize::MAX } else { (i * 7) % cfg.vocab_size }).collect();
    let rep = grad_check_many(
        |tape, vars| {
            let mp = ModelParams::from_values(&cfg, vars.to_vec())?;
            let y = model_forward(tape, &mp, &cfg, &tokens, b)?;
            tape.cross_entropy(y, &targets, usize::MAX)
        },
        &values,
        1e-5,
        Some((per_tensor, seed + 2)),
    )?;
    Ok(rep.worst())
}

fn gradient_layer(_: Fault) -> Result<Measure> {
    let kinds = [
        MixerKind::Local(LocalVariant::Rattention),
        MixerKind::Local(LocalVariant::SwaOnly),
        MixerKind::Local(LocalVariant::LinearOnly),
        MixerKind::Global,
    ];
    let mut worst = 0.0f64;
    for (i, kind) in kinds.into_iter().enumerate() {
        worst = worst.max(layer_gradient_error(kind, 100 + i as u64)?);
    }
    Ok(Measure { max_error: worst, tolerance: 1e-4, cases: kinds.len() })
}

fn gradient_model(_: Fault) -> Result<Measure> {
    Ok(Measure { max_error: model_gradient_error(4, 200)?, tolerance: 1e-4, cases: 1 })
}

fn coverage_partition(_: Fault) -> Result<Measure> {
    let mut bad = 0usize;
    let mut cases = 0;
    for (len, w, c) in [(64, 16, 4), (64, 8, 8), (40, 4, 2), (17, 3, 1), (64, 32, 16)] {
        bad += coverage_audit(len, w, c)?.iter().filter(|cov| !cov.is_partition()).count();
        cases += 1;
    }
    Ok(Measure { max_error: bad as f64, tolerance: 0.0, cases })
}

fn parity_projections(_: Fault) -> Result<Measure> {
    let mut diff = 0.0f64;
    for m in [ModelConfig::paper_3b(512), ModelConfig::paper_12b(512)] {
        let r = param_count(&m.attn, MixerKind::Local(LocalVariant::Rattention)).projection_params;
        let s = param_count(&m.attn, MixerKind::Local(LocalVariant::SwaOnly)).projection_params;
        diff += (r as f64 - s as f64).abs();
    }
    Ok(Measure { max_error: diff, tolerance: 0.0, cases: 2 })
}

fn efficiency_motivation(_: Fault) -> Result<Measure> {
    let m = ModelConfig::paper_12b(512);
    let mut err = 0.0f64;
    for ctx in [1024, 2048, 4096] {
        err = err.max(kv_savings_pct(&m, ctx, LocalCache::Swa { window: 4096 }, true).abs());
    }
    for count in [true, false] {
        err = err.max((kv_savings_pct(&m, 4096, LocalCache::Swa { window: 1024 }, count) - 56.0).abs() - 1.0);
    }
    let eq = kv_cache_bytes(&m, 4096, LocalCache::Rattention { window: 512 }, 2, true).state_token_equivalents();
    err = err.max((eq - 64.0).abs());
    Ok(Measure { max_error: err.max(0.0), tolerance: 0.0, cases: 6 })
}
