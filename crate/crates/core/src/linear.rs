//! Linear attention: feature maps, the token recurrence
//! `S_t = S_{t−1} + φ(k_t)ᵀ v_t, o_t = φ(q_t) S_t`, and its chunkwise
//! parallel form with interleaved state checkpointing.
//!
//! The chunkwise kernel is written once for a general *readout lag*: query
//! chunk `i` reads the boundary state after `i − lag` chunks plus a masked
//! intra-chunk term against key chunk `i − lag`. Plain linear attention is
//! `lag = 0` with an inclusive mask; the residual branch in [`crate::rla`]
//! is `lag = w / C` with a strict mask.
//!
//! Boundary states are indexed by the number of chunks consumed: `B_0 = 0`,
//! `B_{c+1} = B_c + φ(K_c)ᵀ V_c`. With save stride `m`, only `B_b` for
//! `b ≡ 0 (mod m)`, `b < N` are kept (the entry state of every group of `m`
//! chunks, i.e. the state after chunks `m−1, 2m−1, …` plus the zero state),
//! which is `⌈N/m⌉` states. Backward rebuilds a group's states from its
//! entry state with the same accumulation routine, so recomputed states are
//! bitwise identical to stored ones.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, softmax_rows_backward, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Feature map φ applied to queries and keys. All kinds preserve the head
/// dimension (`d' = d`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureMap {
    /// Softmax over the head dimension.
    Softmax,
    Relu,
    Identity,
}

impl FeatureMap {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMap::Softmax => "softmax",
            FeatureMap::Relu => "relu",
            FeatureMap::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" => Ok(FeatureMap::Softmax),
            "relu" => Ok(FeatureMap::Relu),
            "identity" | "none" => Ok(FeatureMap::Identity),
            other => Err(Error::Config(format!("unknown feature map `{other}`"))),
        }
    }

    pub const ALL: [FeatureMap; 3] = [FeatureMap::Softmax, FeatureMap::Relu, FeatureMap::Identity];

    /// Row-wise application over rows of length `d`.
    pub fn apply_rows<T: Scalar>(self, x: &[T], d: usize, out: &mut [T]) {
        match self {
            FeatureMap::Softmax => softmax_rows(x, d, out),
            FeatureMap::Relu => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = v.max(T::zero());
                }
            }
            FeatureMap::Identity => out.copy_from_slice(x),
        }
    }

    /// Writes `dx = Jφ(x)ᵀ g` given `y = φ(x)`.
    pub fn backward_rows<T: Scalar>(self, x: &[T], y: &[T], g: &[T], d: usize, dx: &mut [T]) {
        match self {
            FeatureMap::Softmax => softmax_rows_backward(y, g, d, dx),
            FeatureMap::Relu => {
                for ((o, &xi), &gi) in dx.iter_mut().zip(x).zip(g) {
                    *o = if xi > T::zero() { gi } else { T::zero() };
                }
            }
            FeatureMap::Identity => dx.copy_from_slice(g),
        }
    }
}

/// φ applied over the last axis.
pub fn feature_map_apply<T: Scalar>(x: &Tensor<T>, fm: FeatureMap) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| shape_err("feature_map", "rank-0 input"))?;
    let mut out = Tensor::zeros(x.shape());
    fm.apply_rows(x.data(), d, out.data_mut());
    Ok(out)
}

/// Matrix-valued recurrent state `S ∈ R^{d'×d}` per `(batch, head)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearState<T> {
    /// `[batch, heads, d', d]`.
    pub s: Tensor<T>,
    /// Chunks (or tokens, for the recurrent form) consumed so far.
    pub chunk_index: usize,
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, l, d] => Ok((b, h, l, d)),
        _ => Err(shape_err(op, format!("expected [batch, heads, len, dim], got {shape:?}"))),
    }
}

fn check_qkv(op: &'static str, q: &[usize], k: &[usize], v: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, h, l, dk) = dims4(op, q)?;
    let (b2, h2, l2, dv) = dims4(op, v)?;
    if k != q || b2 != b || h2 != h || l2 != l {
        return Err(shape_err(op, format!("q {q:?}, k {k:?}, v {v:?} are inconsistent")));
    }
    Ok((b, h, l, dk, dv))
}

/// Token-by-token recurrence over pre-mapped `qf`, `kf`.
pub fn la_recurrent<T: Scalar>(qf: &Tensor<T>, kf: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    lagged_recurrent(qf, kf, v, None)
}

/// Recurrence with readout `o_t = φ(q_t) S_{t−delay}` (`None` reads `S_t`).
/// States with non-positive index are zero.
pub(crate) fn lagged_recurrent<T: Scalar>(
    qf: &Tensor<T>,
    kf: &Tensor<T>,
    v: &Tensor<T>,
    delay: Option<usize>,
) -> Result<Tensor<T>> {
    let (b, h, l, dk, dv) = check_qkv("la_recurrent", qf.shape(), kf.shape(), v.shape())?;
    let mut out = Tensor::zeros(&[b, h, l, dv]);
    for s in 0..b * h {
        let q = &qf.data()[s * l * dk..(s + 1) * l * dk];
        let k = &kf.data()[s * l * dk..(s + 1) * l * dk];
        let vv = &v.data()[s * l * dv..(s + 1) * l * dv];
        let o = &mut out.data_mut()[s * l * dv..(s + 1) * l * dv];
        // history[j] = S_j (tokens 1..=j, 1-based), only as deep as needed
        let depth = delay.unwrap_or(0);
        let mut history: std::collections::VecDeque<Vec<T>> = std::collections::VecDeque::new();
        let mut state = vec![T::zero(); dk * dv];
        history.push_back(state.clone());
        for t in 0..l {
            for a in 0..dk {
                let ka = k[t * dk + a];
                for c in 0..dv {
                    state[a * dv + c] += ka * vv[t * dv + c];
                }
            }
            history.push_back(state.clone());
            if history.len() > depth + 1 {
                history.pop_front();
            }
            // readout S_{(t+1) − depth}; zero while that index is ≤ 0
            if t + 1 < depth {
                continue;
            }
            let read = &history[0];
            for c in 0..dv {
                let mut acc = T::zero();
                for a in 0..dk {
                    acc += q[t * dk + a] * read[a * dv + c];
                }
                o[t * dv + c] = acc;
            }
        }
    }
    Ok(out)
}

/// Every recurrent state `S_0 ..= S_L` (small audits only).
pub fn recurrent_states<T: Scalar>(kf: &Tensor<T>, v: &Tensor<T>) -> Result<Vec<LinearState<T>>> {
    let (b, h, l, dk) = dims4("recurrent_states", kf.shape())?;
    let (_, _, _, dv) = dims4("recurrent_states", v.shape())?;
    let mut s = Tensor::zeros(&[b, h, dk, dv]);
    let mut out = vec![LinearState { s: s.clone(), chunk_index: 0 }];
    for t in 0..l {
        for slice in 0..b * h {
            for a in 0..dk {
                let ka = kf.data()[(slice * l + t) * dk + a];
                for c in 0..dv {
                    s.data_mut()[(slice * dk + a) * dv + c] += ka * v.data()[(slice * l + t) * dv + c];
                }
            }
        }
        out.push(LinearState { s: s.clone(), chunk_index: t + 1 });
    }
    Ok(out)
}

/// Which intra-chunk pairs `(query row r, key row s)` contribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntraMask {
    /// `s ≤ r`
    Inclusive,
    /// `s < r`
    Strict,
}

impl IntraMask {
    #[inline]
    fn keeps(self, r: usize, s: usize) -> bool {
        match self {
            IntraMask::Inclusive => s <= r,
            IntraMask::Strict => s < r,
        }
    }
}

/// Allocation accounting for one kernel invocation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KernelStats {
    /// Boundary states kept in the schedule (per slice).
    pub saved_states: usize,
    /// Elements of one state matrix (`d' · d`), independent of length.
    pub state_elems: usize,
    /// Largest feature-map buffer materialized at once (per slice).
    pub feature_buffer_elems: usize,
    /// Chunk accumulations replayed to rebuild states in backward.
    pub recomputed_chunks: usize,
}

/// Chunk states stored by a chunkwise forward pass.
#[derive(Clone, Debug)]
pub struct CheckpointSchedule<T> {
    save_stride: usize,
    chunk: usize,
    num_chunks: usize,
    len: usize,
    batch: usize,
    heads: usize,
    dk: usize,
    dv: usize,
    feature_map: FeatureMap,
    /// boundary index → `[slices, dk, dv]` states
    saved: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> CheckpointSchedule<T> {
    pub fn save_stride(&self) -> usize {
        self.save_stride
    }

    pub fn num_chunks(&self) -> usize {
        self.num_chunks
    }

    pub fn stored_states(&self) -> usize {
        self.saved.len()
    }

    /// Boundary indices (chunks consumed) whose state is stored.
    pub fn saved_boundaries(&self) -> Vec<usize> {
        self.saved.keys().copied().collect()
    }

    pub fn state(&self, boundary: usize) -> Option<LinearState<T>> {
        self.saved.get(&boundary).map(|s| LinearState {
            s: Tensor::new(&[self.batch, self.heads, self.dk, self.dv], s.clone()).expect("schedule layout"),
            chunk_index: boundary,
        })
    }

    fn slice_state(&self, boundary: usize, slice: usize) -> &[T] {
        let n = self.dk * self.dv;
        &self.saved[&boundary][slice * n..(slice + 1) * n]
    }

    fn validate(&self, kernel: &ChunkKernel, b: usize, h: usize, l: usize, dk: usize, dv: usize) -> Result<()> {
        let mismatch = |what: &str| Err(Error::Schedule(what.to_string()));
        if self.chunk != kernel.chunk || self.save_stride != kernel.save_stride {
            return mismatch("chunk size or save stride differs from the kernel");
        }
        if self.feature_map != kernel.feature_map {
            return mismatch("feature map differs from the kernel");
        }
        if (self.batch, self.heads, self.len, self.dk, self.dv) != (b, h, l, dk, dv) {
            return mismatch("input geometry differs from the forward pass");
        }
        for g in (0..self.num_chunks).step_by(self.save_stride) {
            if !self.saved.contains_key(&g) {
                return Err(Error::Schedule(format!("missing base checkpoint for boundary {g}")));
            }
        }
        Ok(())
    }
}

/// Chunkwise linear attention kernel over raw (pre-feature-map) q and k.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChunkKernel {
    pub chunk: usize,
    /// Query chunk `i` reads key chunks up to `i − lag`.
    pub lag: usize,
    pub mask: IntraMask,
    pub feature_map: FeatureMap,
    pub save_stride: usize,
    /// Accept lengths that are not a multiple of `chunk` by treating the
    /// tail as right-padded with zero keys/values.
    pub pad: bool,
}

struct ChunkRange {
    start: usize,
    rows: usize,
}

impl ChunkKernel {
    /// Plain linear attention (`o_t = φ(q_t) S_t`).
    pub fn linear(chunk: usize) -> Self {
        Self {
            chunk,
            lag: 0,
            mask: IntraMask::Inclusive,
            feature_map: FeatureMap::Identity,
            save_stride: 1,
            pad: true,
        }
    }

    pub fn with_feature_map(mut self, fm: FeatureMap) -> Self {
        self.feature_map = fm;
        self
    }

    pub fn with_save_stride(mut self, m: usize) -> Self {
        self.save_stride = m;
        self
    }

    pub fn with_padding(mut self, pad: bool) -> Self {
        self.pad = pad;
        self
    }

    fn num_chunks(&self, l: usize) -> Result<usize> {
        if self.chunk == 0 || self.save_stride == 0 {
            return Err(Error::Config("chunk size and save stride must be at least 1".into()));
        }
        if l % self.chunk != 0 && !self.pad {
            return Err(shape_err(
                "chunkwise",
                format!("length {l} is not a multiple of chunk size {} and padding is disabled", self.chunk),
            ));
        }
        Ok(l.div_ceil(self.chunk))
    }

    fn range(&self, c: usize, l: usize) -> ChunkRange {
        let start = c * self.chunk;
        ChunkRange {
            start,
            rows: self.chunk.min(l - start),
        }
    }

    /// Allocation accounting for a slice of length `l`.
    pub fn stats(&self, l: usize, dk: usize, dv: usize) -> Result<KernelStats> {
        let n = self.num_chunks(l)?;
        Ok(KernelStats {
            saved_states: n.div_ceil(self.save_stride),
            state_elems: dk * dv,
            feature_buffer_elems: 2 * self.chunk * dk,
            recomputed_chunks: 0,
        })
    }

    /// `state += φ(K_c)ᵀ V_c`; the single accumulation routine shared by
    /// forward and recompute.
    #[inline]
    fn accumulate<T: Scalar>(phi_k: &[T], v: &[T], rows: usize, dk: usize, dv: usize, state: &mut [T]) {
        for s in 0..rows {
            for a in 0..dk {
                let ka = phi_k[s * dk + a];
                if ka == T::zero() {
                    continue;
                }
                let row = &mut state[a * dv..(a + 1) * dv];
                for (o, &vc) in row.iter_mut().zip(&v[s * dv..(s + 1) * dv]) {
                    *o += ka * vc;
                }
            }
        }
    }

    fn forward_slice<T: Scalar>(
        &self,
        q: &[T],
        k: &[T],
        v: &[T],
        l: usize,
        dk: usize,
        dv: usize,
        out: &mut [T],
    ) -> Vec<Vec<T>> {
        let n = l.div_ceil(self.chunk);
        let c_max = self.chunk;
        let mut saved = Vec::with_capacity(n.div_ceil(self.save_stride));
        let mut state = vec![T::zero(); dk * dv];
        let mut phi_q = vec![T::zero(); c_max * dk];
        let mut phi_k = vec![T::zero(); c_max * dk];
        let mut attn = vec![T::zero(); c_max * c_max];
        for c in 0..n {
            if c % self.save_stride == 0 {
                saved.push(state.clone());
            }
            let kc = self.range(c, l);
            self.feature_map
                .apply_rows(&k[kc.start * dk..(kc.start + kc.rows) * dk], dk, &mut phi_k[..kc.rows * dk]);
            let i = c + self.lag;
            if i < n {
                let qc = self.range(i, l);
                self.feature_map
                    .apply_rows(&q[qc.start * dk..(qc.start + qc.rows) * dk], dk, &mut phi_q[..qc.rows * dk]);
                let o = &mut out[qc.start * dv..(qc.start + qc.rows) * dv];
                // inter: φ(Q_i) B_c
                for r in 0..qc.rows {
                    let orow = &mut o[r * dv..(r + 1) * dv];
                    orow.iter_mut().for_each(|x| *x = T::zero());
                    for a in 0..dk {
                        let qa = phi_q[r * dk + a];
                        for (x, &sv) in orow.iter_mut().zip(&state[a * dv..(a + 1) * dv]) {
                            *x += qa * sv;
                        }
                    }
                }
                // intra: (φ(Q_i) φ(K_c)ᵀ ⊙ M) V_c
                for r in 0..qc.rows {
                    for s in 0..kc.rows {
                        attn[r * c_max + s] = if self.mask.keeps(r, s) {
                            (0..dk).map(|a| phi_q[r * dk + a] * phi_k[s * dk + a]).sum()
                        } else {
                            T::zero()
                        };
                    }
                    let orow = &mut o[r * dv..(r + 1) * dv];
                    for s in 0..kc.rows {
                        let w = attn[r * c_max + s];
                        if w == T::zero() {
                            continue;
                        }
                        for (x, &vc) in orow.iter_mut().zip(&v[(kc.start + s) * dv..(kc.start + s + 1) * dv]) {
                            *x += w * vc;
                        }
                    }
                }
            }
            Self::accumulate(&phi_k[..kc.rows * dk], &v[kc.start * dv..(kc.start + kc.rows) * dv], kc.rows, dk, dv, &mut state);
        }
        saved
    }

    /// Rebuilds `B_target` for one slice from the nearest stored state.
    /// Returns the number of chunk accumulations replayed.
    fn rebuild_state<T: Scalar>(
        &self,
        schedule: &CheckpointSchedule<T>,
        slice: usize,
        k: &[T],
        v: &[T],
        target: usize,
        out: &mut [T],
    ) -> usize {
        let (l, dk, dv) = (schedule.len, schedule.dk, schedule.dv);
        let base = (target / self.save_stride) * self.save_stride;
        let base = base.min((schedule.num_chunks.saturating_sub(1) / self.save_stride) * self.save_stride);
        out.copy_from_slice(schedule.slice_state(base, slice));
        let mut phi_k = vec![T::zero(); self.chunk * dk];
        for c in base..target {
            let kc = self.range(c, l);
            self.feature_map
                .apply_rows(&k[kc.start * dk..(kc.start + kc.rows) * dk], dk, &mut phi_k[..kc.rows * dk]);
            Self::accumulate(&phi_k[..kc.rows * dk], &v[kc.start * dv..(kc.start + kc.rows) * dv], kc.rows, dk, dv, out);
        }
        target - base
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_slice<T: Scalar>(
        &self,
        schedule: &CheckpointSchedule<T>,
        slice: usize,
        q: &[T],
        k: &[T],
        v: &[T],
        g: &[T],
        dq: &mut [T],
        dk_out: &mut [T],
        dv_out: &mut [T],
    ) -> usize {
        let (l, dk, dv) = (schedule.len, schedule.dk, schedule.dv);
        let n = schedule.num_chunks;
        let m = self.save_stride;
        let c_max = self.chunk;
        let mut recomputed = 0;

        let mut d_state = vec![T::zero(); dk * dv];
        let mut phi_q = vec![T::zero(); c_max * dk];
        let mut phi_k = vec![T::zero(); c_max * dk];
        let mut dphi_q = vec![T::zero(); c_max * dk];
        let mut dphi_k = vec![T::zero(); c_max * dk];
        let mut attn = vec![T::zero(); c_max * c_max];
        let mut dattn = vec![T::zero(); c_max * c_max];
        // states B_{gm} .. B_{gm+m-1} of the group currently in use
        let mut group: Option<usize> = None;
        let mut group_states = vec![T::zero(); m * dk * dv];

        for c in (0..n).rev() {
            // dS ← Σ_{b ≥ c+1} φ(Q_{b+lag})ᵀ dO_{b+lag}
            let i1 = c + 1 + self.lag;
            if i1 < n {
                let qc = self.range(i1, l);
                self.feature_map
                    .apply_rows(&q[qc.start * dk..(qc.start + qc.rows) * dk], dk, &mut phi_q[..qc.rows * dk]);
                for r in 0..qc.rows {
                    let grow = &g[(qc.start + r) * dv..(qc.start + r + 1) * dv];
                    for a in 0..dk {
                        let qa = phi_q[r * dk + a];
                        for (x, &gc) in d_state[a * dv..(a + 1) * dv].iter_mut().zip(grow) {
                            *x += qa * gc;
                        }
                    }
                }
            }

            let kc = self.range(c, l);
            let kr = kc.start * dk..(kc.start + kc.rows) * dk;
            let vr = kc.start * dv..(kc.start + kc.rows) * dv;
            self.feature_map.apply_rows(&k[kr.clone()], dk, &mut phi_k[..kc.rows * dk]);
            let vc = &v[vr.clone()];
            // state path: dφK_c = V_c dSᵀ, dV_c += φK_c dS
            for s in 0..kc.rows {
                for a in 0..dk {
                    let mut acc = T::zero();
                    for x in 0..dv {
                        acc += vc[s * dv + x] * d_state[a * dv + x];
                    }
                    dphi_k[s * dk + a] = acc;
                }
                let dvrow = &mut dv_out[(kc.start + s) * dv..(kc.start + s + 1) * dv];
                for a in 0..dk {
                    let ka = phi_k[s * dk + a];
                    for (x, &ds) in dvrow.iter_mut().zip(&d_state[a * dv..(a + 1) * dv]) {
                        *x += ka * ds;
                    }
                }
            }

            let i = c + self.lag;
            if i < n {
                let gi = c / m;
                if group != Some(gi) {
                    let start = gi * m;
                    let end = (start + m).min(n);
                    let mut cur = schedule.slice_state(start, slice).to_vec();
                    let mut phi = vec![T::zero(); c_max * dk];
                    for (j, b) in (start..end).enumerate() {
                        group_states[j * dk * dv..(j + 1) * dk * dv].copy_from_slice(&cur);
                        if b + 1 < end {
                            let r = self.range(b, l);
                            self.feature_map
                                .apply_rows(&k[r.start * dk..(r.start + r.rows) * dk], dk, &mut phi[..r.rows * dk]);
                            Self::accumulate(&phi[..r.rows * dk], &v[r.start * dv..(r.start + r.rows) * dv], r.rows, dk, dv, &mut cur);
                            recomputed += 1;
                        }
                    }
                    group = Some(gi);
                }
                let bstate = &group_states[(c - gi * m) * dk * dv..(c - gi * m + 1) * dk * dv];

                let qc = self.range(i, l);
                let qr = qc.start * dk..(qc.start + qc.rows) * dk;
                self.feature_map.apply_rows(&q[qr.clone()], dk, &mut phi_q[..qc.rows * dk]);
                let gq = &g[qc.start * dv..(qc.start + qc.rows) * dv];
                for r in 0..qc.rows {
                    // inter: dφQ = dO B_cᵀ
                    for a in 0..dk {
                        let mut acc = T::zero();
                        for x in 0..dv {
                            acc += gq[r * dv + x] * bstate[a * dv + x];
                        }
                        dphi_q[r * dk + a] = acc;
                    }
                    for s in 0..kc.rows {
                        let keep = self.mask.keeps(r, s);
                        attn[r * c_max + s] = if keep {
                            (0..dk).map(|a| phi_q[r * dk + a] * phi_k[s * dk + a]).sum()
                        } else {
                            T::zero()
                        };
                        dattn[r * c_max + s] = if keep {
                            (0..dv).map(|x| gq[r * dv + x] * vc[s * dv + x]).sum()
                        } else {
                            T::zero()
                        };
                    }
                }
                for r in 0..qc.rows {
                    for s in 0..kc.rows {
                        let da = dattn[r * c_max + s];
                        let a_rs = attn[r * c_max + s];
                        if da != T::zero() {
                            for a in 0..dk {
                                dphi_q[r * dk + a] += da * phi_k[s * dk + a];
                                dphi_k[s * dk + a] += da * phi_q[r * dk + a];
                            }
                        }
                        if a_rs != T::zero() {
                            let dvrow = &mut dv_out[(kc.start + s) * dv..(kc.start + s + 1) * dv];
                            for (x, &gg) in dvrow.iter_mut().zip(&gq[r * dv..(r + 1) * dv]) {
                                *x += a_rs * gg;
                            }
                        }
                    }
                }
                self.feature_map.backward_rows(
                    &q[qr.clone()],
                    &phi_q[..qc.rows * dk],
                    &dphi_q[..qc.rows * dk],
                    dk,
                    &mut dq[qr],
                );
            }
            self.feature_map
                .backward_rows(&k[kr.clone()], &phi_k[..kc.rows * dk], &dphi_k[..kc.rows * dk], dk, &mut dk_out[kr]);
        }
        recomputed
    }

    /// Chunkwise forward over `[batch, heads, len, dim]` inputs. Returns the
    /// output and the checkpoint schedule needed by [`ChunkKernel::backward`].
    pub fn forward<T: Scalar>(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<(Tensor<T>, CheckpointSchedule<T>)> {
        let (b, h, l, dk, dv) = check_qkv("chunkwise", q.shape(), k.shape(), v.shape())?;
        let n = self.num_chunks(l)?;
        let mut out = vec![T::zero(); b * h * l * dv];
        let per_slice: Vec<Vec<Vec<T>>> = out
            .par_chunks_mut(l * dv)
            .enumerate()
            .map(|(s, o)| {
                self.forward_slice(
                    &q.data()[s * l * dk..(s + 1) * l * dk],
                    &k.data()[s * l * dk..(s + 1) * l * dk],
                    &v.data()[s * l * dv..(s + 1) * l * dv],
                    l,
                    dk,
                    dv,
                    o,
                )
            })
            .collect();
        let mut saved = BTreeMap::new();
        for (j, boundary) in (0..n).step_by(self.save_stride).enumerate() {
            let mut all = Vec::with_capacity(b * h * dk * dv);
            for s in &per_slice {
                all.extend_from_slice(&s[j]);
            }
            saved.insert(boundary, all);
        }
        let schedule = CheckpointSchedule {
            save_stride: self.save_stride,
            chunk: self.chunk,
            num_chunks: n,
            len: l,
            batch: b,
            heads: h,
            dk,
            dv,
            feature_map: self.feature_map,
            saved,
        };
        Ok((Tensor::new(&[b, h, l, dv], out)?, schedule))
    }

    /// Gradients `(dq, dk, dv)` with respect to the raw inputs, rebuilding
    /// unsaved chunk states from `schedule`.
    pub fn backward<T: Scalar>(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        schedule: &CheckpointSchedule<T>,
        d_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, KernelStats)> {
        let (b, h, l, dk, dv) = check_qkv("chunkwise_backward", q.shape(), k.shape(), v.shape())?;
        schedule.validate(self, b, h, l, dk, dv)?;
        if d_out.shape() != v.shape() {
            return Err(shape_err(
                "chunkwise_backward",
                format!("output gradient {:?} vs values {:?}", d_out.shape(), v.shape()),
            ));
        }
        let mut dq = vec![T::zero(); q.numel()];
        let mut dkk = vec![T::zero(); k.numel()];
        let mut dvv = vec![T::zero(); v.numel()];
        let recomputed: usize = dq
            .par_chunks_mut(l * dk)
            .zip(dkk.par_chunks_mut(l * dk))
            .zip(dvv.par_chunks_mut(l * dv))
            .enumerate()
            .map(|(s, ((dqs, dks), dvs))| {
                let qr = s * l * dk..(s + 1) * l * dk;
                let vr = s * l * dv..(s + 1) * l * dv;
                self.backward_slice(
                    schedule,
                    s,
                    &q.data()[qr.clone()],
                    &k.data()[qr],
                    &v.data()[vr.clone()],
                    &d_out.data()[vr],
                    dqs,
                    dks,
                    dvs,
                )
            })
            .sum();
        let mut stats = self.stats(l, dk, dv)?;
        stats.recomputed_chunks = recomputed / (b * h).max(1);
        Ok((
            Tensor::new(q.shape(), dq)?,
            Tensor::new(k.shape(), dkk)?,
            Tensor::new(v.shape(), dvv)?,
            stats,
        ))
    }
}

/// Chunkwise linear attention over pre-mapped `qf`, `kf` (chunk size `C`,
/// save stride `m`). `L` must be a multiple of `C`.
pub fn la_chunkwise<T: Scalar>(
    qf: &Tensor<T>,
    kf: &Tensor<T>,
    v: &Tensor<T>,
    chunk: usize,
    save_stride: usize,
) -> Result<(Tensor<T>, CheckpointSchedule<T>)> {
    ChunkKernel::linear(chunk)
        .with_save_stride(save_stride)
        .with_padding(false)
        .forward(qf, kf, v)
}

/// Boundary state `B_target` (state after `target` chunks), rebuilt from
/// the nearest stored state at or before it. Returns the state and the
/// number of chunk accumulations replayed.
pub fn recompute_state<T: Scalar>(
    schedule: &CheckpointSchedule<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    target: usize,
) -> Result<(LinearState<T>, usize)> {
    let (b, h, l, dk) = dims4("recompute_state", k.shape())?;
    let (_, _, _, dv) = dims4("recompute_state", v.shape())?;
    if (b, h, l, dk, dv) != (schedule.batch, schedule.heads, schedule.len, schedule.dk, schedule.dv) {
        return Err(Error::Schedule("input geometry differs from the forward pass".into()));
    }
    if target > schedule.num_chunks {
        return Err(Error::Schedule(format!(
            "target chunk {target} beyond {} chunks",
            schedule.num_chunks
        )));
    }
    let kernel = ChunkKernel {
        chunk: schedule.chunk,
        lag: 0,
        mask: IntraMask::Inclusive,
        feature_map: schedule.feature_map,
        save_stride: schedule.save_stride,
        pad: true,
    };
    let base = ((target / schedule.save_stride) * schedule.save_stride)
        .min((schedule.num_chunks.saturating_sub(1) / schedule.save_stride) * schedule.save_stride);
    if !schedule.saved.contains_key(&base) {
        return Err(Error::Schedule(format!("missing base checkpoint for boundary {base}")));
    }
    let n = dk * dv;
    let mut s = vec![T::zero(); b * h * n];
    let mut replayed = 0;
    for slice in 0..b * h {
        replayed = kernel.rebuild_state(
            schedule,
            slice,
            &k.data()[slice * l * dk..(slice + 1) * l * dk],
            &v.data()[slice * l * dv..(slice + 1) * l * dv],
            target,
            &mut s[slice * n..(slice + 1) * n],
        );
    }
    Ok((
        LinearState {
            s: Tensor::new(&[b, h, dk, dv], s)?,
            chunk_index: target,
        },
        replayed,
    ))
}

impl<T: Scalar> Tape<T> {
    /// φ over the last axis.
    pub fn feature_map(&mut self, x: Var, fm: FeatureMap) -> Result<Var> {
        self.check(x)?;
        let out = feature_map_apply(self.value(x), fm)?;
        let d = *self.shape(x).last().unwrap();
        self.record("feature_map", &[x], out, move |args| {
            let mut dx = Tensor::zeros(args.grad.shape());
            fm.backward_rows(args.inputs[0].data(), args.output.data(), args.grad.data(), d, dx.data_mut());
            Ok(vec![Some(dx)])
        })
    }

    /// Fused chunkwise linear attention over raw `q`, `k` (φ is applied per
    /// chunk inside the kernel). Backward rebuilds unsaved states.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, kernel: ChunkKernel) -> Result<Var> {
        for x in [q, k, v] {
            self.check(x)?;
        }
        let (out, schedule) = kernel.forward(self.value(q), self.value(k), self.value(v))?;
        self.record("linear_attention", &[q, k, v], out, move |args| {
            let (dq, dk, dv, _) = kernel.backward(args.inputs[0], args.inputs[1], args.inputs[2], &schedule, args.grad)?;
            Ok(vec![Some(dq), Some(dk), Some(dv)])
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

    fn mapped(fm: FeatureMap, seed: u64, l: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let q = feature_map_apply(&rand4([2, 2, l, 4], seed), fm).unwrap();
        let k = feature_map_apply(&rand4([2, 2, l, 4], seed + 1), fm).unwrap();
        (q, k, rand4([2, 2, l, 4], seed + 2))
    }

    #[test]
    fn feature_maps() {
        let x = rand4([1, 1, 3, 5], 1);
        assert_eq!(feature_map_apply(&x, FeatureMap::Identity).unwrap(), x);
        let c = Tensor::<f64>::full(&[2, 4], 0.7);
        assert!(feature_map_apply(&c, FeatureMap::Softmax).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = feature_map_apply(&x, FeatureMap::Softmax).unwrap();
        for row in s.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!(feature_map_apply(&x, FeatureMap::Relu).unwrap().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn one_step_and_zero_value_recurrence() {
        let (q, k, v) = mapped(FeatureMap::Identity, 3, 1);
        let o = la_recurrent(&q, &k, &v).unwrap();
        for s in 0..4 {
            let dot: f64 = (0..4).map(|a| q.data()[s * 4 + a] * k.data()[s * 4 + a]).sum();
            for x in 0..4 {
                assert!((o.data()[s * 4 + x] - dot * v.data()[s * 4 + x]).abs() < 1e-14);
            }
        }
        let z = Tensor::zeros(&[2, 2, 1, 4]);
        assert!(la_recurrent(&q, &k, &z).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn recurrence_matches_quadratic_form() {
        for fm in FeatureMap::ALL {
            let (q, k, v) = mapped(fm, 10, 12);
            let o = la_recurrent(&q, &k, &v).unwrap();
            let r = oracle::linear_quadratic_form(&q, &k, &v, 0, true);
            assert!(o.max_abs_diff(&r) < 1e-6, "{fm:?}");
        }
    }

    #[test]
    fn recurrence_audit() {
        let (_, k, v) = mapped(FeatureMap::Relu, 20, 5);
        let states = recurrent_states(&k, &v).unwrap();
        assert!(states[0].s.data().iter().all(|&x| x == 0.0));
        for t in 1..=5 {
            for slice in 0..4 {
                for a in 0..4 {
                    for c in 0..4 {
                        let want = states[t - 1].s.data()[(slice * 4 + a) * 4 + c]
                            + k.data()[(slice * 5 + t - 1) * 4 + a] * v.data()[(slice * 5 + t - 1) * 4 + c];
                        assert_eq!(states[t].s.data()[(slice * 4 + a) * 4 + c], want);
                    }
                }
            }
        }
    }

    #[test]
    fn single_chunk_and_unit_chunk_reduce_to_reference() {
        let (q, k, v) = mapped(FeatureMap::Softmax, 30, 8);
        let quad = oracle::linear_quadratic_form(&q, &k, &v, 0, true);
        let (one, sched) = la_chunkwise(&q, &k, &v, 8, 1).unwrap();
        assert!(one.max_abs_diff(&quad) < 1e-12);
        assert_eq!(sched.stored_states(), 1);
        assert!(sched.state(0).unwrap().s.data().iter().all(|&x| x == 0.0));
        let (unit, _) = la_chunkwise(&q, &k, &v, 1, 1).unwrap();
        assert!(unit.max_abs_diff(&la_recurrent(&q, &k, &v).unwrap()) < 1e-12);
    }

    #[test]
    fn chunkwise_matches_recurrent() {
        for fm in FeatureMap::ALL {
            let (q, k, v) = mapped(fm, 40, 32);
            let r = la_recurrent(&q, &k, &v).unwrap();
            let (o, _) = la_chunkwise(&q, &k, &v, 4, 2).unwrap();
            assert!(o.max_abs_diff(&r) < 1e-10, "{fm:?}");
            let (o32, _) = la_chunkwise(&q.cast::<f32>(), &k.cast(), &v.cast(), 4, 2).unwrap();
            assert!(o32.cast::<f64>().max_abs_diff(&r) < 1e-5, "{fm:?}");
        }
    }

    #[test]
    fn unpadded_ragged_length_is_rejected_and_padding_is_inert() {
        let (q, k, v) = mapped(FeatureMap::Identity, 50, 10);
        assert!(la_chunkwise(&q, &k, &v, 4, 1).is_err());
        let (o, sched) = ChunkKernel::linear(4).forward(&q, &k, &v).unwrap();
        assert_eq!(sched.num_chunks(), 3);
        assert!(o.max_abs_diff(&la_recurrent(&q, &k, &v).unwrap()) < 1e-12);
    }

    #[test]
    fn saved_state_count_and_recompute() {
        let (q, k, v) = mapped(FeatureMap::Identity, 60, 64);
        let (_, full) = la_chunkwise(&q, &k, &v, 4, 1).unwrap();
        let (_, sparse) = la_chunkwise(&q, &k, &v, 4, 4).unwrap();
        assert_eq!(full.stored_states(), 16);
        assert_eq!(sparse.stored_states(), 4);
        assert_eq!(sparse.saved_boundaries(), vec![0, 4, 8, 12]);
        for target in 0..16 {
            let (want, zero) = recompute_state(&full, &k, &v, target).unwrap();
            assert_eq!(zero, 0);
            let (got, replayed) = recompute_state(&sparse, &k, &v, target).unwrap();
            assert_eq!(got, want, "target {target}");
            assert_eq!(replayed, target % 4);
        }
        assert!(recompute_state(&sparse, &k, &v, 17).is_err());
    }

    #[test]
    fn schedule_mismatch_is_rejected() {
        let (q, k, v) = mapped(FeatureMap::Identity, 70, 16);
        let kernel = ChunkKernel::linear(4).with_save_stride(2);
        let (o, sched) = kernel.forward(&q, &k, &v).unwrap();
        assert!(kernel.with_save_stride(4).backward(&q, &k, &v, &sched, &o).is_err());
        let (q2, k2, v2) = mapped(FeatureMap::Identity, 70, 8);
        assert!(kernel.backward(&q2, &k2, &v2, &sched, &o).is_err());
    }

    #[test]
    fn fused_kernel_gradients() {
        for fm in FeatureMap::ALL {
            for (lag, mask) in [(0, IntraMask::Inclusive), (1, IntraMask::Strict), (2, IntraMask::Strict)] {
                let kernel = ChunkKernel {
                    chunk: 3,
                    lag,
                    mask,
                    feature_map: fm,
                    save_stride: 2,
                    pad: true,
                };
                let q0 = rand4([1, 2, 11, 3], 80);
                let k0 = rand4([1, 2, 11, 3], 81);
                let v0 = rand4([1, 2, 11, 3], 82);
                let w0 = rand4([1, 2, 11, 3], 83);
                let rep = grad_check_many(
                    |t, xs| {
                        let o = t.linear_attention(xs[0], xs[1], xs[2], kernel)?;
                        let w = t.constant(w0.clone());
                        let o = t.mul(o, w)?;
                        t.sum(o)
                    },
                    &[q0, k0, v0],
                    1e-5,
                    None,
                )
                .unwrap();
                assert!(rep.worst() < 1e-6, "{fm:?} lag {lag}: {:?}", rep.per_input);
            }
        }
    }

    #[test]
    fn stride_does_not_change_gradients() {
        let q = rand4([1, 2, 32, 4], 90);
        let k = rand4([1, 2, 32, 4], 91);
        let v = rand4([1, 2, 32, 4], 92);
        let g = rand4([1, 2, 32, 4], 93);
        let base = ChunkKernel::linear(4).with_feature_map(FeatureMap::Softmax);
        let (o1, s1) = base.forward(&q, &k, &v).unwrap();
        let ref_grads = base.backward(&q, &k, &v, &s1, &g).unwrap();
        let again = base.backward(&q, &k, &v, &s1, &g).unwrap();
        assert_eq!(ref_grads.0, again.0);
        for m in [2, 4, 8] {
            let kern = base.with_save_stride(m);
            let (o, s) = kern.forward(&q, &k, &v).unwrap();
            assert_eq!(o, o1);
            assert_eq!(s.stored_states(), 8usize.div_ceil(m));
            let (dq, dk, dv, stats) = kern.backward(&q, &k, &v, &s, &g).unwrap();
            assert_eq!(dq, ref_grads.0);
            assert_eq!(dk, ref_grads.1);
            assert_eq!(dv, ref_grads.2);
            assert!(stats.recomputed_chunks > 0);
        }
    }

    #[test]
    fn state_size_is_length_independent() {
        let k = ChunkKernel::linear(8).with_save_stride(4);
        let short = k.stats(64, 16, 16).unwrap();
        let long = k.stats(4096, 16, 16).unwrap();
        assert_eq!(short.state_elems, long.state_elems);
        assert_eq!(short.feature_buffer_elems, long.feature_buffer_elems);
        assert!(long.feature_buffer_elems < 4096 * 16);
    }

    #[test]
    fn causality_under_suffix_perturbation() {
        let (q, k, v) = mapped(FeatureMap::Relu, 100, 16);
        let (o, _) = la_chunkwise(&q, &k, &v, 4, 1).unwrap();
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for x in 0..4 {
            k2.set(&[0, 0, 10, x], 3.0);
            v2.set(&[0, 0, 10, x], -3.0);
        }
        let (o2, _) = la_chunkwise(&q, &k2, &v2, 4, 1).unwrap();
        for t in 0..10 {
            for x in 0..4 {
                assert_eq!(o.at(&[0, 0, t, x]), o2.at(&[0, 0, t, x]));
            }
        }
        assert_ne!(o.at(&[0, 0, 10, 0]), o2.at(&[0, 0, 10, 0]));
    }
}
