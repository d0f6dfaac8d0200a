//! Softmax attention primitives: causal and sliding-window attention, rotary
//! embeddings and grouped-query key/value sharing.
//!
//! Layout is `[batch, heads, len, head_dim]` throughout. Attention kernels
//! only touch the band of keys each query can see, so sliding-window cost is
//! `O(L · (w+1))` per head.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::linear::FeatureMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of one attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// Sliding window `w`: query `t` sees keys `max(0, t−w) ..= t`.
    pub window: usize,
    pub rope_theta: f64,
    pub use_rope: bool,
    pub feature_map: FeatureMap,
    pub chunk_size: usize,
    /// Keep every `save_stride`-th chunk state; recompute the rest in backward.
    pub save_stride: usize,
    /// Per-head output norm scales (on) or one shared scale per branch (off).
    pub use_group_norm: bool,
    /// RMS-normalize q and k per head before attention.
    pub qk_norm: bool,
    /// Feed rotated q/k into the residual linear branch as well.
    pub rla_uses_rope: bool,
    /// Residual linear readout `S_{t−w}` instead of `S_{t−w−1}`.
    pub rla_inclusive_readout: bool,
}

impl AttnConfig {
    /// Desk-scale default: 4 heads of 16 dims over `d_model = 64`, 2 kv heads.
    pub fn desk(window: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            window,
            rope_theta: 5e5,
            use_rope: true,
            feature_map: FeatureMap::Softmax,
            chunk_size: 8,
            save_stride: 1,
            use_group_norm: true,
            qk_norm: true,
            rla_uses_rope: false,
            rla_inclusive_readout: false,
        }
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return bad("head counts and head_dim must be positive".into());
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return bad(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return bad(format!(
                "d_model ({}) must equal n_heads × head_dim ({} × {})",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.chunk_size == 0 || self.save_stride == 0 {
            return bad("chunk_size and save_stride must be at least 1".into());
        }
        if self.use_rope && self.head_dim % 2 != 0 {
            return bad(format!("rotary embedding needs an even head_dim, got {}", self.head_dim));
        }
        if !(self.rope_theta > 0.0) {
            return bad("rope_theta must be positive".into());
        }
        Ok(())
    }

    /// Additional check for layers that run the chunkwise residual branch.
    pub fn validate_chunkwise_rla(&self) -> Result<()> {
        self.validate()?;
        if self.window % self.chunk_size != 0 {
            return Err(Error::Config(format!(
                "window ({}) must be a multiple of chunk_size ({}) for the chunkwise residual branch",
                self.window, self.chunk_size
            )));
        }
        Ok(())
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, l, d] => Ok((b, h, l, d)),
        _ => Err(shape_err(op, format!("expected [batch, heads, len, dim], got {shape:?}"))),
    }
}

fn rope_table(positions: &[usize], d: usize, theta: f64) -> (Vec<f64>, Vec<f64>) {
    let half = d / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / d as f64);
            let a = p as f64 * freq;
            cos.push(a.cos());
            sin.push(a.sin());
        }
    }
    (cos, sin)
}

fn rotate<T: Scalar>(x: &[T], l: usize, d: usize, cos: &[f64], sin: &[f64], inverse: bool) -> Vec<T> {
    let half = d / 2;
    let mut out = vec![T::zero(); x.len()];
    for (xs, os) in x.chunks(l * d).zip(out.chunks_mut(l * d)) {
        for t in 0..l {
            for i in 0..half {
                let c = T::from_f64_lossy(cos[t * half + i]);
                let mut s = T::from_f64_lossy(sin[t * half + i]);
                if inverse {
                    s = -s;
                }
                let (x0, x1) = (xs[t * d + 2 * i], xs[t * d + 2 * i + 1]);
                os[t * d + 2 * i] = x0 * c - x1 * s;
                os[t * d + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

fn rope_check(x: &[usize], positions: &[usize]) -> Result<(usize, usize)> {
    let (_, _, l, d) = dims4("rope", x)?;
    if d % 2 != 0 {
        return Err(shape_err("rope", format!("head dim must be even, got {d}")));
    }
    if positions.len() != l {
        return Err(shape_err("rope", format!("{} positions for length {l}", positions.len())));
    }
    Ok((l, d))
}

/// Rotates adjacent pairs `(x[2i], x[2i+1])` by `pos · theta^(−2i/d)`.
pub fn apply_rope<T: Scalar>(x: &Tensor<T>, positions: &[usize], theta: f64) -> Result<Tensor<T>> {
    let (l, d) = rope_check(x.shape(), positions)?;
    let (cos, sin) = rope_table(positions, d, theta);
    Tensor::new(x.shape(), rotate(x.data(), l, d, &cos, &sin, false))
}

/// Replicates each kv head `n_heads / h_kv` times, group-contiguous:
/// query head `j` reads kv head `j / (n_heads / h_kv)`.
pub fn gqa_expand<T: Scalar>(kv: &Tensor<T>, n_heads: usize) -> Result<Tensor<T>> {
    let (b, hkv, l, d) = dims4("gqa_expand", kv.shape())?;
    if n_heads == 0 || n_heads % hkv != 0 {
        return Err(shape_err(
            "gqa_expand",
            format!("{n_heads} query heads are not a multiple of {hkv} kv heads"),
        ));
    }
    let g = n_heads / hkv;
    let slice = l * d;
    let mut data = Vec::with_capacity(b * n_heads * slice);
    for bi in 0..b {
        for h in 0..n_heads {
            let src = (bi * hkv + h / g) * slice;
            data.extend_from_slice(&kv.data()[src..src + slice]);
        }
    }
    Tensor::new(&[b, n_heads, l, d], data)
}

/// First visible key for query `t`.
#[inline]
fn band_start(t: usize, window: Option<usize>) -> usize {
    window.map_or(0, |w| t.saturating_sub(w))
}

fn band_offsets(l: usize, window: Option<usize>) -> Vec<usize> {
    let mut off = Vec::with_capacity(l + 1);
    off.push(0);
    for t in 0..l {
        let prev = *off.last().unwrap();
        off.push(prev + t + 1 - band_start(t, window));
    }
    off
}

fn attend_slice<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    l: usize,
    d: usize,
    window: Option<usize>,
    scale: T,
    offsets: &[usize],
    out: &mut [T],
    probs: &mut [T],
) {
    for t in 0..l {
        let lo = band_start(t, window);
        let qt = &q[t * d..(t + 1) * d];
        let p = &mut probs[offsets[t]..offsets[t + 1]];
        let mut max = T::neg_infinity();
        for (j, i) in (lo..=t).enumerate() {
            let s: T = qt.iter().zip(&k[i * d..(i + 1) * d]).map(|(&a, &b)| a * b).sum::<T>() * scale;
            p[j] = s;
            max = max.max(s);
        }
        let mut sum = T::zero();
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            sum += *pj;
        }
        let ot = &mut out[t * d..(t + 1) * d];
        ot.iter_mut().for_each(|o| *o = T::zero());
        for (j, i) in (lo..=t).enumerate() {
            p[j] /= sum;
            let pj = p[j];
            for (o, &vi) in ot.iter_mut().zip(&v[i * d..(i + 1) * d]) {
                *o += pj * vi;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attend_slice_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    go: &[T],
    probs: &[T],
    l: usize,
    d: usize,
    window: Option<usize>,
    scale: T,
    offsets: &[usize],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let mut dp = Vec::new();
    for t in 0..l {
        let lo = band_start(t, window);
        let p = &probs[offsets[t]..offsets[t + 1]];
        let g = &go[t * d..(t + 1) * d];
        dp.clear();
        let mut dot = T::zero();
        for (j, i) in (lo..=t).enumerate() {
            let vi = &v[i * d..(i + 1) * d];
            let dpj: T = g.iter().zip(vi).map(|(&a, &b)| a * b).sum();
            dot += p[j] * dpj;
            dp.push(dpj);
            for (o, &gi) in dv[i * d..(i + 1) * d].iter_mut().zip(g) {
                *o += p[j] * gi;
            }
        }
        for (j, i) in (lo..=t).enumerate() {
            let ds = p[j] * (dp[j] - dot) * scale;
            for x in 0..d {
                dq[t * d + x] += ds * k[i * d + x];
                dk[i * d + x] += ds * q[t * d + x];
            }
        }
    }
}

/// Forward pass over all `(batch, head)` slices; returns output and the
/// banded probabilities.
fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    window: Option<usize>,
) -> Result<(Tensor<T>, Vec<T>, Vec<usize>)> {
    let (b, h, l, d) = dims4("attention", q.shape())?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(shape_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?} must agree", q.shape(), k.shape(), v.shape()),
        ));
    }
    let offsets = band_offsets(l, window);
    let band = offsets[l];
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    let mut out = vec![T::zero(); b * h * l * d];
    let mut probs = vec![T::zero(); b * h * band];
    let n = l * d;
    out.par_chunks_mut(n)
        .zip(probs.par_chunks_mut(band))
        .enumerate()
        .for_each(|(s, (o, p))| {
            let r = s * n..(s + 1) * n;
            attend_slice(&q.data()[r.clone()], &k.data()[r.clone()], &v.data()[r], l, d, window, scale, &offsets, o, p);
        });
    Ok((Tensor::new(q.shape(), out)?, probs, offsets))
}

/// Causal softmax attention with `1/√d` score scaling.
pub fn causal_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(attention_forward(q, k, v, None)?.0)
}

/// Softmax attention over keys `max(0, t−w) ..= t`.
pub fn sliding_window_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    window: usize,
) -> Result<Tensor<T>> {
    Ok(attention_forward(q, k, v, Some(window))?.0)
}

impl<T: Scalar> Tape<T> {
    /// Differentiable softmax attention; `window = None` is full causal.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, window: Option<usize>) -> Result<Var> {
        for x in [q, k, v] {
            self.check(x)?;
        }
        let (out, probs, offsets) = attention_forward(self.value(q), self.value(k), self.value(v), window)?;
        let (_, _, l, d) = dims4("attention", out.shape())?;
        self.record("attention", &[q, k, v], out, move |args| {
            let (qv, kv, vv, g) = (args.inputs[0], args.inputs[1], args.inputs[2], args.grad);
            let n = l * d;
            let band = offsets[l];
            let scale = T::one() / T::from_usize_lossy(d).sqrt();
            let mut dq = vec![T::zero(); qv.numel()];
            let mut dk = vec![T::zero(); qv.numel()];
            let mut dv = vec![T::zero(); qv.numel()];
            dq.par_chunks_mut(n)
                .zip(dk.par_chunks_mut(n))
                .zip(dv.par_chunks_mut(n))
                .enumerate()
                .for_each(|(s, ((dqs, dks), dvs))| {
                    let r = s * n..(s + 1) * n;
                    attend_slice_backward(
                        &qv.data()[r.clone()],
                        &kv.data()[r.clone()],
                        &vv.data()[r.clone()],
                        &g.data()[r],
                        &probs[s * band..(s + 1) * band],
                        l,
                        d,
                        window,
                        scale,
                        &offsets,
                        dqs,
                        dks,
                        dvs,
                    );
                });
            let shape = qv.shape();
            Ok(vec![
                Some(Tensor::new(shape, dq)?),
                Some(Tensor::new(shape, dk)?),
                Some(Tensor::new(shape, dv)?),
            ])
        })
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64) -> Result<Var> {
        self.check(x)?;
        let (l, d) = rope_check(self.shape(x), positions)?;
        let (cos, sin) = rope_table(positions, d, theta);
        let out = Tensor::new(self.shape(x), rotate(self.value(x).data(), l, d, &cos, &sin, false))?;
        self.record("rope", &[x], out, move |args| {
            Ok(vec![Some(Tensor::new(
                args.grad.shape(),
                rotate(args.grad.data(), l, d, &cos, &sin, true),
            )?)])
        })
    }

    pub fn gqa_expand(&mut self, kv: Var, n_heads: usize) -> Result<Var> {
        self.check(kv)?;
        let out = gqa_expand(self.value(kv), n_heads)?;
        let (b, hkv, l, d) = dims4("gqa_expand", self.shape(kv))?;
        if hkv == n_heads {
            return Ok(kv);
        }
        let g = n_heads / hkv;
        self.record("gqa_expand", &[kv], out, move |args| {
            let slice = l * d;
            let mut gk = Tensor::zeros(&[b, hkv, l, d]);
            for bi in 0..b {
                for h in 0..n_heads {
                    let src = (bi * n_heads + h) * slice;
                    let dst = (bi * hkv + h / g) * slice;
                    for (o, &v) in gk.data_mut()[dst..dst + slice].iter_mut().zip(&args.grad.data()[src..src + slice]) {
                        *o += v;
                    }
                }
            }
            Ok(vec![Some(gk)])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn rope_fixed_points() {
        let x = rand4([1, 2, 5, 4], 1);
        let y = apply_rope(&x, &[0, 0, 0, 0, 0], 5e5).unwrap();
        assert_eq!(x, y);

        let unit = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[1.0, 0.0]).unwrap();
        for p in [1usize, 2, 7] {
            let y = apply_rope(&unit, &[p], 5e5).unwrap();
            assert!((y.data()[0] - (p as f64).cos()).abs() < 1e-15);
            assert!((y.data()[1] - (p as f64).sin()).abs() < 1e-15);
        }

        let x = rand4([2, 3, 6, 8], 2);
        let pos: Vec<usize> = (0..6).map(|i| i * 37).collect();
        let y = apply_rope(&x, &pos, 10.0).unwrap();
        assert!((x.norm() - y.norm()).abs() < 1e-6);
        assert!(apply_rope(&rand4([1, 1, 2, 3], 3), &[0, 1], 10.0).is_err());
    }

    #[test]
    fn single_token_attention_returns_value() {
        let (q, k, v) = (rand4([1, 2, 1, 4], 1), rand4([1, 2, 1, 4], 2), rand4([1, 2, 1, 4], 3));
        assert_eq!(causal_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = rand4([1, 1, 6, 4], 4);
        let k = Tensor::from_fn(&[1, 1, 6, 4], |i| [0.3, -0.1, 0.7, 0.2][i % 4]);
        let v = rand4([1, 1, 6, 4], 5);
        let o = causal_attention(&q, &k, &v).unwrap();
        for t in 0..6 {
            for x in 0..4 {
                let mean: f64 = (0..=t).map(|i| v.at(&[0, 0, i, x])).sum::<f64>() / (t + 1) as f64;
                assert!((o.at(&[0, 0, t, x]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_matches_dense_mask_oracle() {
        let (q, k, v) = (rand4([2, 3, 8, 4], 6), rand4([2, 3, 8, 4], 7), rand4([2, 3, 8, 4], 8));
        let o = causal_attention(&q, &k, &v).unwrap();
        let r = oracle::dense_masked_attention(&q, &k, &v, None);
        assert!(o.max_abs_diff(&r) < 1e-6);
    }

    #[test]
    fn window_edge_cases() {
        let (q, k, v) = (rand4([1, 2, 9, 4], 9), rand4([1, 2, 9, 4], 10), rand4([1, 2, 9, 4], 11));
        let full = causal_attention(&q, &k, &v).unwrap();
        for w in [8, 9, 50] {
            assert!(sliding_window_attention(&q, &k, &v, w).unwrap().max_abs_diff(&full) < 1e-6);
        }
        assert_eq!(sliding_window_attention(&q, &k, &v, 0).unwrap(), v);

        let (q, k, v) = (rand4([1, 2, 16, 4], 12), rand4([1, 2, 16, 4], 13), rand4([1, 2, 16, 4], 14));
        let o = sliding_window_attention(&q, &k, &v, 3).unwrap();
        let r = oracle::dense_masked_attention(&q, &k, &v, Some(3));
        assert!(o.max_abs_diff(&r) < 1e-6);
    }

    #[test]
    fn gqa_expansion_order() {
        let kv = rand4([2, 2, 3, 4], 15);
        assert_eq!(gqa_expand(&kv, 2).unwrap(), kv);
        let e = gqa_expand(&kv, 4).unwrap();
        for b in 0..2 {
            for (h, src) in [(0, 0), (1, 0), (2, 1), (3, 1)] {
                for t in 0..3 {
                    for x in 0..4 {
                        assert_eq!(e.at(&[b, h, t, x]), kv.at(&[b, src, t, x]));
                    }
                }
            }
        }
        assert!(gqa_expand(&kv, 3).is_err());
    }

    #[test]
    fn expanded_swa_matches_per_group_loop() {
        let q = rand4([1, 4, 10, 4], 16);
        let k = rand4([1, 2, 10, 4], 17);
        let v = rand4([1, 2, 10, 4], 18);
        let o = sliding_window_attention(&q, &gqa_expand(&k, 4).unwrap(), &gqa_expand(&v, 4).unwrap(), 3).unwrap();
        let r = oracle::grouped_window_attention_loop(&q, &k, &v, 3);
        assert!(o.max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn suffix_and_out_of_window_perturbations() {
        let (q, k, v) = (rand4([1, 1, 12, 4], 19), rand4([1, 1, 12, 4], 20), rand4([1, 1, 12, 4], 21));
        let w = 3;
        let base = sliding_window_attention(&q, &k, &v, w).unwrap();
        let t = 7;
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for x in 0..4 {
            // future token and far-past token
            k2.set(&[0, 0, 9, x], 5.0);
            v2.set(&[0, 0, 9, x], -5.0);
            k2.set(&[0, 0, 2, x], 5.0);
            v2.set(&[0, 0, 2, x], -5.0);
        }
        let o = sliding_window_attention(&q, &k2, &v2, w).unwrap();
        for x in 0..4 {
            assert_eq!(o.at(&[0, 0, t, x]), base.at(&[0, 0, t, x]));
        }
        let full = causal_attention(&q, &k, &v).unwrap();
        let full2 = causal_attention(&q, &k2, &v).unwrap();
        for x in 0..4 {
            assert_eq!(full.at(&[0, 0, 1, x]), full2.at(&[0, 0, 1, x]));
        }
    }

    #[test]
    fn attention_rope_and_gqa_gradients() {
        let q0 = rand4([1, 4, 7, 4], 22);
        let k0 = rand4([1, 2, 7, 4], 23);
        let v0 = rand4([1, 2, 7, 4], 24);
        let w0 = rand4([1, 4, 7, 4], 25);
        let pos: Vec<usize> = (0..7).collect();
        for window in [None, Some(2)] {
            let rep = grad_check_many(
                |t, xs| {
                    let q = t.rope(xs[0], &pos, 100.0)?;
                    let k = t.rope(xs[1], &pos, 100.0)?;
                    let k = t.gqa_expand(k, 4)?;
                    let v = t.gqa_expand(xs[2], 4)?;
                    let o = t.attention(q, k, v, window)?;
                    let w = t.constant(w0.clone());
                    let o = t.mul(o, w)?;
                    t.sum(o)
                },
                &[q0.clone(), k0.clone(), v0.clone()],
                1e-5,
                None,
            )
            .unwrap();
            assert!(rep.worst() < 1e-6, "{window:?}: {:?}", rep.per_input);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = AttnConfig::desk(16);
        c.validate_chunkwise_rla().unwrap();
        c.n_kv_heads = 3;
        assert!(c.validate().is_err());
        let mut c = AttnConfig::desk(12);
        assert!(c.validate_chunkwise_rla().is_err());
        c.d_model = 60;
        assert!(c.validate().is_err());
    }
}
