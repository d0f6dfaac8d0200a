use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rattn_core::efficiency::{kv_cache_bytes, kv_savings_pct, step_time, HardwareProfile, LocalCache};
use rattn_core::layer::LocalVariant;
use rattn_core::linear::{feature_map_apply, la_recurrent, ChunkKernel, FeatureMap};
use rattn_core::model::{ModelConfig, ModelParams};
use rattn_core::rla::{coverage_audit, rla_recurrent, RlaParams};
use rattn_core::train::{chance_band, gen_recall_batch, RecallTask, IGNORE};
use rattn_core::Tensor;

fn qkv(b: usize, l: usize, d: usize, fm: FeatureMap, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (d as f64).sqrt();
    let q = Tensor::<f64>::randn(&[b, 1, l, d], s, &mut rng);
    let k = Tensor::<f64>::randn(&[b, 1, l, d], s, &mut rng);
    let v = Tensor::<f64>::randn(&[b, 1, l, d], 1.0, &mut rng);
    (feature_map_apply(&q, fm).unwrap(), feature_map_apply(&k, fm).unwrap(), v)
}

fn feature_map() -> impl Strategy<Value = FeatureMap> {
    prop::sample::select(FeatureMap::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn padded_chunkwise_equals_recurrence(l in 1usize..70, c in 1usize..12, d in 1usize..6, fm in feature_map(), seed: u64) {
        let (q, k, v) = qkv(2, l, d, fm, seed);
        let (o, _) = ChunkKernel::linear(c).forward(&q, &k, &v).unwrap();
        prop_assert!(o.max_abs_diff(&la_recurrent(&q, &k, &v).unwrap()) < 1e-10);
    }

    #[test]
    fn residual_chunkwise_equals_recurrence(
        l in 1usize..70, c in 1usize..9, mult in 0usize..5, inclusive: bool, fm in feature_map(), seed: u64,
    ) {
        let w = mult * c;
        let (q, k, v) = qkv(1, l, 4, fm, seed);
        let (o, _) = RlaParams::new(w, c).unwrap().inclusive(inclusive).kernel(FeatureMap::Identity, 1)
            .forward(&q, &k, &v).unwrap();
        prop_assert!(o.max_abs_diff(&rla_recurrent(&q, &k, &v, w, inclusive).unwrap()) < 1e-10);
    }

    #[test]
    fn save_stride_never_changes_forward_bits(l in 1usize..80, c in 1usize..10, lag in 0usize..3, m in 1usize..10, seed: u64) {
        let (q, k, v) = qkv(1, l, 3, FeatureMap::Softmax, seed);
        let base = ChunkKernel { lag, ..ChunkKernel::linear(c) };
        let (o1, _) = base.forward(&q, &k, &v).unwrap();
        let (om, s) = base.with_save_stride(m).forward(&q, &k, &v).unwrap();
        prop_assert_eq!(o1, om);
        prop_assert_eq!(s.stored_states(), l.div_ceil(c).div_ceil(m));
    }

    #[test]
    fn window_and_state_partition_the_prefix(l in 1usize..48, c in 1usize..6, mult in 0usize..6) {
        for cov in coverage_audit(l, mult * c, c).unwrap() {
            prop_assert!(cov.is_partition(), "t = {}", cov.t);
            prop_assert_eq!(cov.window.len(), (mult * c + 1).min(cov.t + 1));
        }
    }

    #[test]
    fn cache_plan_totals(
        layers in 1usize..12, period in 0usize..5, ctx in 1usize..9000, window in 1usize..5000, count: bool, rattn: bool,
    ) {
        let mut m = ModelConfig::paper_3b(window);
        m.n_layers = layers;
        m.local_global_period = period;
        let local = if rattn { LocalCache::Rattention { window } } else { LocalCache::Swa { window } };
        let plan = kv_cache_bytes(&m, ctx, local, 2, count);
        prop_assert_eq!(plan.kv_bytes, plan.entries.iter().map(|e| e.kv_bytes).sum::<u64>());
        prop_assert_eq!(plan.total_bytes(), plan.entries.iter().map(|e| e.kv_bytes + e.linear_state_bytes).sum::<u64>());
        prop_assert!(plan.entries.iter().all(|e| e.cached_tokens <= ctx));
        if !rattn {
            let s = kv_savings_pct(&m, ctx, local, count);
            prop_assert!((0.0..100.0).contains(&s), "{}", s);
        }
    }

    #[test]
    fn smaller_window_is_never_slower(batch in 1usize..2048, ctx in 1usize..10000, w in 1usize..4096, shrink in 1usize..4096) {
        let hw = HardwareProfile::h100_bf16();
        let m = ModelConfig::paper_3b(512);
        let big = step_time(&hw, &m, LocalCache::Swa { window: w + shrink }, batch, ctx);
        let small = step_time(&hw, &m, LocalCache::Swa { window: w }, batch, ctx);
        prop_assert!(small <= big);
        prop_assert!(big > 0.0);
    }

    #[test]
    fn chance_band_brackets_chance(values in 2usize..500, n in 1usize..5000) {
        let p = 1.0 / values as f64;
        let (lo, hi) = chance_band(p, n);
        prop_assert!(lo <= p && p < hi);
        prop_assert!(lo >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// A window-only model cannot see tokens beyond its receptive field.
    #[test]
    fn window_only_logits_ignore_distant_tokens(
        layers in 1usize..3, t in 0usize..40, shift in 1usize..10, seed: u64,
    ) {
        let mut cfg = ModelConfig::desk(3);
        cfg.vocab_size = 16;
        cfg.n_layers = layers;
        cfg.local_global_period = 0;
        cfg.local_variant = LocalVariant::SwaOnly;
        cfg.attn.chunk_size = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut rng).unwrap();
        let l = 40;
        let tokens: Vec<usize> = (0..l).map(|i| (i * 7 + seed as usize) % 16).collect();
        let reach = layers * 3;
        let Some(far) = t.checked_sub(reach + shift) else { return Ok(()) };
        let mut perturbed = tokens.clone();
        perturbed[far] = (perturbed[far] + 5) % 16;
        let a = p.logits(&cfg, &tokens, 1).unwrap();
        let b = p.logits(&cfg, &perturbed, 1).unwrap();
        for j in 0..16 {
            prop_assert_eq!(a.at(&[0, t, j]).to_bits(), b.at(&[0, t, j]).to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Beyond the receptive field, a window-only model's answer logits do
    /// not depend on which values the pairs carry.
    #[test]
    fn window_only_answers_ignore_pair_values(layers in 1usize..3, pairs in 1usize..4, seed: u64, shift in 1usize..40) {
        let w = 4;
        let mut cfg = ModelConfig::desk(w);
        cfg.vocab_size = 64;
        cfg.n_layers = layers;
        cfg.local_global_period = 0;
        cfg.local_variant = LocalVariant::SwaOnly;
        cfg.attn.chunk_size = 4;
        let task = RecallTask { n_pairs: pairs, n_queries: 3, ..RecallTask::new(seed, 48, 64, w).beyond_receptive_field(layers) };
        let batch = gen_recall_batch(&task, 2).unwrap();
        let values = task.value_range();
        let mut swapped = batch.tokens.clone();
        for (b, links) in batch.links.iter().enumerate() {
            for &(_, src) in links {
                let i = b * task.seq_len + src;
                swapped[i] = values.start + (swapped[i] - values.start + shift) % values.len();
            }
        }
        prop_assert_ne!(&swapped, &batch.tokens);
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = p.logits(&cfg, &batch.tokens, 2).unwrap();
        let b = p.logits(&cfg, &swapped, 2).unwrap();
        for (i, &target) in batch.targets.iter().enumerate() {
            if target == IGNORE {
                continue;
            }
            let (s, t) = (i / task.seq_len, i % task.seq_len);
            for j in 0..64 {
                prop_assert_eq!(a.at(&[s, t, j]).to_bits(), b.at(&[s, t, j]).to_bits());
            }
        }
    }
}

#[test]
fn task_chance_is_one_over_value_count() {
    let t = RecallTask::new(0, 256, 64, 16);
    assert_eq!(t.value_range().len(), 48);
    assert_eq!(t.chance(), 1.0 / 48.0);
}
