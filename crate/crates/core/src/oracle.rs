//! Deliberately naive reference implementations used to cross-check the
//! optimized kernels. Everything here is written as direct loops over the
//! defining sums and is only suitable for small inputs.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "oracle inputs are [batch, heads, len, dim]");
    (s[0], s[1], s[2], s[3])
}

/// Softmax attention with a dense `L×L` score matrix and an additive mask
/// of `−1e9` on disallowed pairs. `window = None` is plain causal attention.
pub fn dense_masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    window: Option<usize>,
) -> Tensor<T> {
    let (b, h, l, d) = dims(q);
    let dv = v.shape()[3];
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[b, h, l, dv]);
    for bi in 0..b {
        for hi in 0..h {
            let mut scores = vec![0.0f64; l * l];
            for t in 0..l {
                for j in 0..l {
                    let dot: f64 = (0..d)
                        .map(|x| q.at(&[bi, hi, t, x]).to_f64_lossy() * k.at(&[bi, hi, j, x]).to_f64_lossy())
                        .sum();
                    let allowed = j <= t && window.is_none_or(|w| t - j <= w);
                    scores[t * l + j] = dot * scale + if allowed { 0.0 } else { -1e9 };
                }
            }
            for t in 0..l {
                let row = &scores[t * l..(t + 1) * l];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for x in 0..dv {
                    let o: f64 = (0..l).map(|j| e[j] / z * v.at(&[bi, hi, j, x]).to_f64_lossy()).sum();
                    out.set(&[bi, hi, t, x], T::from_f64_lossy(o));
                }
            }
        }
    }
    out
}

/// Sliding-window attention where each query head `h` reads kv head
/// `h / (H / H_kv)` directly, without materializing the expansion.
pub fn grouped_window_attention_loop<T: Scalar>(
    q: &Tensor<T>,
    k_kv: &Tensor<T>,
    v_kv: &Tensor<T>,
    window: usize,
) -> Tensor<T> {
    let (b, h, l, d) = dims(q);
    let hkv = k_kv.shape()[1];
    let group = h / hkv;
    let dv = v_kv.shape()[3];
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[b, h, l, dv]);
    for bi in 0..b {
        for hi in 0..h {
            let src = hi / group;
            for t in 0..l {
                let lo = t.saturating_sub(window);
                let scores: Vec<f64> = (lo..=t)
                    .map(|j| {
                        (0..d)
                            .map(|x| q.at(&[bi, hi, t, x]).to_f64_lossy() * k_kv.at(&[bi, src, j, x]).to_f64_lossy())
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for x in 0..dv {
                    let o: f64 = (lo..=t)
                        .zip(&scores)
                        .map(|(j, s)| (s - max).exp() / z * v_kv.at(&[bi, src, j, x]).to_f64_lossy())
                        .sum();
                    out.set(&[bi, hi, t, x], T::from_f64_lossy(o));
                }
            }
        }
    }
    out
}

/// `o_t = Σ_i (qf_t · kf_i) v_i` over keys `i ≤ t − delay` (`inclusive`) or
/// `i < t − delay` (strict), with 0-based positions. Plain linear attention
/// is `(0, true)`; the residual readout `S_{t−w−1}` is `(w, false)`.
pub fn linear_quadratic_form<T: Scalar>(
    qf: &Tensor<T>,
    kf: &Tensor<T>,
    v: &Tensor<T>,
    delay: usize,
    inclusive: bool,
) -> Tensor<T> {
    let (b, h, l, d) = dims(qf);
    let dv = v.shape()[3];
    let mut out = Tensor::zeros(&[b, h, l, dv]);
    for bi in 0..b {
        for hi in 0..h {
            for t in 0..l {
                let mut acc = vec![0.0f64; dv];
                for i in 0..l {
                    let visible = if inclusive { i + delay <= t } else { i + delay < t };
                    if !visible {
                        continue;
                    }
                    let dot: f64 = (0..d)
                        .map(|x| qf.at(&[bi, hi, t, x]).to_f64_lossy() * kf.at(&[bi, hi, i, x]).to_f64_lossy())
                        .sum();
                    for (x, a) in acc.iter_mut().enumerate() {
                        *a += dot * v.at(&[bi, hi, i, x]).to_f64_lossy();
                    }
                }
                for (x, a) in acc.into_iter().enumerate() {
                    out.set(&[bi, hi, t, x], T::from_f64_lossy(a));
                }
            }
        }
    }
    out
}

/// Residual readout `o_t = φ(q_t) S_{t−w−1}` as a truncated direct sum.
pub fn residual_quadratic_form<T: Scalar>(qf: &Tensor<T>, kf: &Tensor<T>, v: &Tensor<T>, window: usize) -> Tensor<T> {
    linear_quadratic_form(qf, kf, v, window, false)
}

/// Mean negative log-likelihood by explicit log-sum-exp per row.
pub fn cross_entropy_direct<T: Scalar>(logits: &Tensor<T>, targets: &[usize], ignore_index: usize) -> f64 {
    let v = *logits.shape().last().unwrap();
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &target) in logits.data().chunks(v).zip(targets) {
        if target == ignore_index {
            continue;
        }
        let max = row.iter().map(|x| x.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x.to_f64_lossy() - max).exp()).sum::<f64>().ln();
        total += lse - row[target].to_f64_lossy();
        count += 1;
    }
    total / count as f64
}
