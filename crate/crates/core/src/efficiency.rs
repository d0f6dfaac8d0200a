//! Analytical decode cost: KV-cache accounting per attention variant and
//! the step-time model
//!
//! ```text
//! T = B · S_KV / BW + max(2 · B · P_count / F, P_size / BW)
//! ```
//!
//! where `S_KV` is the per-sequence cache size in bytes, `P_count` the
//! parameter count (embeddings, blocks and head) and `P_size` its size in
//! bytes.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kvconfig::KvDoc;
use crate::model::{LayerKind, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HardwareProfile {
    pub name: String,
    /// Bytes per second.
    pub mem_bandwidth: f64,
    /// FLOP per second.
    pub flops: f64,
    pub bytes_per_param: usize,
}

impl HardwareProfile {
    /// H100-class accelerator with 16-bit weights and cache.
    pub fn h100_bf16() -> Self {
        Self {
            name: "h100-bf16".into(),
            mem_bandwidth: 3.35e12,
            flops: 9.89e14,
            bytes_per_param: 2,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "h100-bf16" | "h100" => Ok(Self::h100_bf16()),
            other => Err(Error::Config(format!("unknown hardware profile `{other}`"))),
        }
    }

    /// `profile` picks a named base; `mem_bandwidth`, `flops` and
    /// `bytes_per_param` override it (the name gains a `+custom` suffix).
    pub fn from_kv(doc: &mut KvDoc) -> Result<Self> {
        let mut hw = match doc.take_raw("profile") {
            Some(n) => Self::by_name(&n)?,
            None => Self::h100_bf16(),
        };
        let before = hw.clone();
        doc.take_into("mem_bandwidth", &mut hw.mem_bandwidth)?;
        doc.take_into("flops", &mut hw.flops)?;
        doc.take_into("bytes_per_param", &mut hw.bytes_per_param)?;
        if hw != before {
            hw.name.push_str("+custom");
        }
        hw.validate()?;
        Ok(hw)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mem_bandwidth > 0.0 && self.flops > 0.0) || self.bytes_per_param == 0 {
            return Err(Error::Config("hardware profile values must be positive".into()));
        }
        Ok(())
    }

    /// Batch at which the two arguments of the max coincide.
    pub fn crossover_batch(&self) -> f64 {
        self.bytes_per_param as f64 * self.flops / (2.0 * self.mem_bandwidth)
    }
}

/// Cache behaviour of the local layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LocalCache {
    /// Sliding window of `w`.
    Swa { window: usize },
    /// Sliding window plus one linear state per kv head.
    Rattention { window: usize },
}

impl LocalCache {
    pub fn label(&self) -> String {
        match self {
            LocalCache::Swa { window } => format!("swa-{window}"),
            LocalCache::Rattention { window } => format!("rattn-{window}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CacheEntry {
    pub layer: usize,
    pub kind: LayerKind,
    pub cached_tokens: usize,
    pub kv_bytes: u64,
    pub linear_state_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CachePlan {
    pub entries: Vec<CacheEntry>,
    pub kv_bytes: u64,
    pub linear_state_bytes: u64,
    /// Bytes one cached token occupies in one layer (`2 · H_kv · d · bytes`).
    pub bytes_per_token: u64,
}

impl CachePlan {
    pub fn total_bytes(&self) -> u64 {
        self.kv_bytes + self.linear_state_bytes
    }

    /// Linear state of one layer expressed in cached tokens.
    pub fn state_token_equivalents(&self) -> f64 {
        self.entries
            .iter()
            .find(|e| e.linear_state_bytes > 0)
            .map_or(0.0, |e| e.linear_state_bytes as f64 / self.bytes_per_token as f64)
    }
}

/// Per-sequence cache at `context` tokens. With `count_current_token` a
/// window-`w` layer holds `w + 1` tokens, otherwise `w`.
pub fn kv_cache_bytes(
    model: &ModelConfig,
    context: usize,
    local: LocalCache,
    bytes_per_param: usize,
    count_current_token: bool,
) -> CachePlan {
    let a = &model.attn;
    let bytes_per_token = (2 * a.n_kv_heads * a.head_dim * bytes_per_param) as u64;
    // d' = d for every supported feature map
    let state_bytes = (a.n_kv_heads * a.head_dim * a.head_dim * bytes_per_param) as u64;
    let extra = usize::from(count_current_token);
    let entries: Vec<CacheEntry> = (1..=model.n_layers)
        .map(|l| {
            let kind = model.layer(l);
            let (cached_tokens, linear_state_bytes) = match (kind, local) {
                (LayerKind::Global, _) => (context, 0),
                (LayerKind::Local, LocalCache::Swa { window }) => (context.min(window + extra), 0),
                (LayerKind::Local, LocalCache::Rattention { window }) => (context.min(window + extra), state_bytes),
            };
            CacheEntry {
                layer: l,
                kind,
                cached_tokens,
                kv_bytes: cached_tokens as u64 * bytes_per_token,
                linear_state_bytes,
            }
        })
        .collect();
    CachePlan {
        kv_bytes: entries.iter().map(|e| e.kv_bytes).sum(),
        linear_state_bytes: entries.iter().map(|e| e.linear_state_bytes).sum(),
        entries,
        bytes_per_token,
    }
}

/// Fraction of the full-attention cache saved by `local`, in percent.
pub fn kv_savings_pct(model: &ModelConfig, context: usize, local: LocalCache, count_current_token: bool) -> f64 {
    let mut full = model.clone();
    full.local_global_period = 1;
    let base = kv_cache_bytes(&full, context, local, 2, count_current_token).total_bytes() as f64;
    let ours = kv_cache_bytes(model, context, local, 2, count_current_token).total_bytes() as f64;
    100.0 * (base - ours) / base
}

/// Decode step time in seconds.
pub fn step_time(hw: &HardwareProfile, model: &ModelConfig, local: LocalCache, batch: usize, context: usize) -> f64 {
    let s_kv = kv_cache_bytes(model, context, local, hw.bytes_per_param, true).total_bytes() as f64;
    let p_count = model.param_count() as f64;
    let p_size = p_count * hw.bytes_per_param as f64;
    let b = batch as f64;
    b * s_kv / hw.mem_bandwidth + (2.0 * b * p_count / hw.flops).max(p_size / hw.mem_bandwidth)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub model: String,
    pub batch: usize,
    pub context: usize,
    pub t_base_s: f64,
    pub t_ratt_s: f64,
    /// `100 · (T_base − T_ratt) / T_base`
    pub speedup_pct: f64,
    /// `100 · (T_base / T_ratt − 1)`
    pub ratio_pct: f64,
}

pub fn speedup_table(
    hw: &HardwareProfile,
    models: &[(String, ModelConfig)],
    base: LocalCache,
    ratt: LocalCache,
    batches: &[usize],
    contexts: &[usize],
) -> Vec<SpeedupRow> {
    let mut rows = Vec::new();
    for (name, m) in models {
        for &batch in batches {
            for &context in contexts {
                let t_base_s = step_time(hw, m, base, batch, context);
                let t_ratt_s = step_time(hw, m, ratt, batch, context);
                rows.push(SpeedupRow {
                    model: name.clone(),
                    batch,
                    context,
                    t_base_s,
                    t_ratt_s,
                    speedup_pct: 100.0 * (t_base_s - t_ratt_s) / t_base_s,
                    ratio_pct: 100.0 * (t_base_s / t_ratt_s - 1.0),
                });
            }
        }
    }
    rows
}

pub const CSV_HEADER: &str = "model,batch,context,t_base_s,t_ratt_s,speedup_pct";

pub fn speedup_csv(rows: &[SpeedupRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6e},{:.6e},{:.4}",
            r.model, r.batch, r.context, r.t_base_s, r.t_ratt_s, r.speedup_pct
        );
    }
    s
}

/// Reference configurations with their display names.
pub fn reference_models() -> Vec<(String, ModelConfig)> {
    vec![
        ("3B".to_string(), ModelConfig::paper_3b(512)),
        ("12B".to_string(), ModelConfig::paper_12b(512)),
    ]
}

/// Batch sizes and contexts of the default sweep.
pub const SWEEP_BATCHES: [usize; 11] = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024];
pub const SWEEP_CONTEXTS: [usize; 4] = [1024, 2048, 4096, 8192];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motivation_numbers() {
        let m = ModelConfig::paper_12b(512);
        for ctx in [512, 2048, 4096] {
            assert_eq!(kv_savings_pct(&m, ctx, LocalCache::Swa { window: 4096 }, true), 0.0);
        }
        let s = kv_savings_pct(&m, 4096, LocalCache::Swa { window: 1024 }, true);
        assert!((s - 100.0 * 30.0 * (4096.0 - 1025.0) / (40.0 * 4096.0)).abs() < 1e-9);
        assert!((55.0..=57.0).contains(&s));
        assert!((55.0..=57.0).contains(&kv_savings_pct(&m, 4096, LocalCache::Swa { window: 1024 }, false)));
        let plan = kv_cache_bytes(&m, 4096, LocalCache::Rattention { window: 512 }, 2, true);
        assert_eq!(plan.state_token_equivalents(), 64.0);
    }

    #[test]
    fn plan_structure() {
        let m = ModelConfig::paper_3b(512);
        let plan = kv_cache_bytes(&m, 300, LocalCache::Rattention { window: 512 }, 2, true);
        assert_eq!(plan.kv_bytes, plan.entries.iter().map(|e| e.kv_bytes).sum::<u64>());
        for e in &plan.entries {
            assert_eq!(e.cached_tokens, 300);
        }
        let g = kv_cache_bytes(&m, 8192, LocalCache::Swa { window: 512 }, 2, true);
        for e in &g.entries {
            let want = if e.kind == LayerKind::Global { 8192 } else { 513 };
            assert_eq!(e.cached_tokens, want);
        }
    }

    #[test]
    fn step_time_shape() {
        let hw = HardwareProfile::h100_bf16();
        let m = ModelConfig::paper_12b(512);
        let local = LocalCache::Swa { window: 4096 };
        let p = m.param_count() as f64;
        // below the crossover the weight read dominates
        let t1 = step_time(&hw, &m, local, 1, 4096);
        let kv1 = kv_cache_bytes(&m, 4096, local, 2, true).total_bytes() as f64 / hw.mem_bandwidth;
        assert!((t1 - kv1 - 2.0 * p / hw.mem_bandwidth).abs() < 1e-12);
        let bstar = hw.crossover_batch();
        assert!((bstar - 2.0 * 9.89e14 / (2.0 * 3.35e12)).abs() < 1e-9);
        // continuity at the crossover
        let f = |b: f64| (2.0 * b * p / hw.flops).max(2.0 * p / hw.mem_bandwidth);
        assert!((f(bstar * (1.0 + 1e-12)) - f(bstar * (1.0 - 1e-12))).abs() < 1e-12);
        let mut prev = 0.0;
        for b in SWEEP_BATCHES {
            let t = step_time(&hw, &m, local, b, 4096);
            assert!(t >= prev);
            assert!(step_time(&hw, &m, local, b, 8192) >= t);
            prev = t;
        }
    }

    #[test]
    fn identical_variants_give_zero() {
        let hw = HardwareProfile::h100_bf16();
        let v = LocalCache::Swa { window: 512 };
        for r in speedup_table(&hw, &reference_models(), v, v, &SWEEP_BATCHES, &SWEEP_CONTEXTS) {
            assert_eq!(r.speedup_pct, 0.0);
        }
    }

    #[test]
    fn speedup_grows_with_batch_and_stays_bounded() {
        let hw = HardwareProfile::h100_bf16();
        let rows = speedup_table(
            &hw,
            &reference_models(),
            LocalCache::Swa { window: 4096 },
            LocalCache::Rattention { window: 512 },
            &SWEEP_BATCHES,
            &[4096],
        );
        for pair in rows.windows(2).filter(|w| w[0].model == w[1].model) {
            assert!(pair[1].speedup_pct >= pair[0].speedup_pct);
        }
        assert!(rows.iter().all(|r| r.speedup_pct > -100.0 && r.speedup_pct < 100.0));
        assert!(speedup_csv(&rows).starts_with(CSV_HEADER));
    }

    #[test]
    fn profile_overrides() {
        let mut d = KvDoc::parse("flops = 2e15\n").unwrap();
        let hw = HardwareProfile::from_kv(&mut d).unwrap();
        assert_eq!(hw.flops, 2e15);
        assert_eq!(hw.name, "h100-bf16+custom");
        let mut d = KvDoc::parse("profile = tpu\n").unwrap();
        assert!(HardwareProfile::from_kv(&mut d).is_err());
    }
}
