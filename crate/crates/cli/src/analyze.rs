use std::fmt::Write as _;

use rattn_core::efficiency::{
    kv_cache_bytes, reference_models, speedup_csv, speedup_table, HardwareProfile, LocalCache, SWEEP_BATCHES,
    SWEEP_CONTEXTS,
};
use rattn_core::model::ModelConfig;
use serde_json::json;

use crate::{load_doc, write_json, AnalyzeArgs, CmdResult, Failure};

fn local_cache(kind: &str, window: usize) -> Result<LocalCache, Failure> {
    match kind {
        "swa" => Ok(LocalCache::Swa { window }),
        "rattention" => Ok(LocalCache::Rattention { window }),
        other => Err(Failure::Config(format!("unknown cache variant `{other}`"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>, Failure> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| Failure::Config(format!("invalid list `{v}` for `{key}`"))))
        .collect()
}

pub fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    let mut doc = load_doc(a.common.config.as_deref())?;
    let hw = HardwareProfile::from_kv(&mut doc)?;
    let base_kind = doc.take_raw("base").unwrap_or_else(|| "swa".into());
    let ratt_kind = doc.take_raw("ratt").unwrap_or_else(|| "rattention".into());
    let base_window = doc.take("base_window")?.unwrap_or(4096);
    let ratt_window = doc.take("ratt_window")?.unwrap_or(512);
    let batches = match doc.take_raw("batches") {
        Some(v) => list("batches", &v)?,
        None => SWEEP_BATCHES.to_vec(),
    };
    let contexts = match doc.take_raw("contexts") {
        Some(v) => list("contexts", &v)?,
        None => SWEEP_CONTEXTS.to_vec(),
    };
    let count_current = match doc.take_raw("count_current_token").as_deref() {
        None | Some("true") => true,
        Some("false") => false,
        Some(v) => return Err(Failure::Config(format!("invalid boolean `{v}` for `count_current_token`"))),
    };
    let models = if a.paper_configs {
        reference_models()
    } else {
        let mut m = ModelConfig::desk(ratt_window);
        m.apply_kv(&mut doc)?;
        m.validate()?;
        vec![("custom".to_string(), m)]
    };
    let seed = match a.common.seed {
        Some(s) => s,
        None => doc.take("seed")?.unwrap_or(0),
    };
    doc.finish()?;
    if batches.contains(&0) || contexts.contains(&0) {
        return Err(Failure::Config("batches and contexts must be positive".into()));
    }
    let base = local_cache(&base_kind, base_window)?;
    let ratt = local_cache(&ratt_kind, ratt_window)?;

    let rows = speedup_table(&hw, &models, base, ratt, &batches, &contexts);
    std::fs::create_dir_all(&a.common.out)?;
    let csv = speedup_csv(&rows);
    std::fs::write(a.common.out.join("speedup.csv"), &csv)?;

    let mut cache = String::from("model,variant,context,kv_bytes,linear_state_bytes,total_bytes,state_token_equivalents\n");
    for (name, m) in &models {
        for variant in [base, ratt] {
            for &ctx in &contexts {
                let plan = kv_cache_bytes(m, ctx, variant, hw.bytes_per_param, count_current);
                let _ = writeln!(
                    cache,
                    "{name},{},{ctx},{},{},{},{}",
                    variant.label(),
                    plan.kv_bytes,
                    plan.linear_state_bytes,
                    plan.total_bytes(),
                    plan.state_token_equivalents()
                );
            }
        }
    }
    std::fs::write(a.common.out.join("cache.csv"), cache)?;

    let param_counts: Vec<_> = models.iter().map(|(n, m)| json!({ "model": n, "param_count": m.param_count() })).collect();
    write_json(
        &a.common.out.join("speedup.json"),
        &json!({
            "seed": seed,
            "hardware": hw,
            "crossover_batch": hw.crossover_batch(),
            "base": base.label(),
            "ratt": ratt.label(),
            "count_current_token": count_current,
            "models": param_counts,
            "rows": rows,
        }),
    )?;
    println!("# hardware {} (BW {:.3e} B/s, F {:.3e} FLOP/s, {} bytes/param)", hw.name, hw.mem_bandwidth, hw.flops, hw.bytes_per_param);
    println!("# {} vs {}", base.label(), ratt.label());
    print!("{csv}");
    Ok(())
}
