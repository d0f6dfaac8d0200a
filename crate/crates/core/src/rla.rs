//! Residual linear attention: linear attention read out from the offset
//! state `S_{t−w−1}`, so it covers exactly the tokens a window-`w` sliding
//! attention cannot see.
//!
//! The chunkwise form reuses [`ChunkKernel`] with a readout lag of `w / C`
//! chunks and a strictly lower-triangular intra-chunk mask: for 0-based
//! query chunk `i` and `k = w / C`,
//! `O_i = φ(Q_i) B_{i−k} + ((φ(Q_i) φ(K_{i−k})ᵀ) ⊙ M_strict) V_{i−k}`,
//! and `O_i = 0` for `i < k`.

use std::collections::BTreeSet;

use crate::attention::sliding_window_attention;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linear::{lagged_recurrent, ChunkKernel, CheckpointSchedule, FeatureMap, IntraMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Window and chunk geometry of the residual branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RlaParams {
    pub window: usize,
    pub chunk_size: usize,
    /// Chunk lag `w / C`.
    pub k_offset: usize,
    /// Read `S_{t−w}` instead of `S_{t−w−1}`.
    pub inclusive: bool,
}

impl RlaParams {
    pub fn new(window: usize, chunk_size: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::Config("chunk size must be at least 1".into()));
        }
        if window % chunk_size != 0 {
            return Err(Error::Config(format!(
                "window {window} is not a multiple of chunk size {chunk_size}"
            )));
        }
        Ok(Self {
            window,
            chunk_size,
            k_offset: window / chunk_size,
            inclusive: false,
        })
    }

    pub fn inclusive(mut self, on: bool) -> Self {
        self.inclusive = on;
        self
    }

    pub fn kernel(&self, feature_map: FeatureMap, save_stride: usize) -> ChunkKernel {
        ChunkKernel {
            chunk: self.chunk_size,
            lag: self.k_offset,
            mask: if self.inclusive { IntraMask::Inclusive } else { IntraMask::Strict },
            feature_map,
            save_stride,
            pad: true,
        }
    }
}

/// `o_t = φ(q_t) S_{t−w−1}` by token recurrence over pre-mapped inputs
/// (`S_j = 0` for `j ≤ 0`). With `inclusive`, reads `S_{t−w}`.
pub fn rla_recurrent<T: Scalar>(
    qf: &Tensor<T>,
    kf: &Tensor<T>,
    v: &Tensor<T>,
    window: usize,
    inclusive: bool,
) -> Result<Tensor<T>> {
    let delay = if inclusive { window } else { window + 1 };
    lagged_recurrent(qf, kf, v, Some(delay))
}

/// Chunkwise residual readout over pre-mapped inputs. `L` must be a
/// multiple of `C`.
pub fn rla_chunkwise<T: Scalar>(
    qf: &Tensor<T>,
    kf: &Tensor<T>,
    v: &Tensor<T>,
    params: RlaParams,
    save_stride: usize,
) -> Result<(Tensor<T>, CheckpointSchedule<T>)> {
    params
        .kernel(FeatureMap::Identity, save_stride)
        .with_padding(false)
        .forward(qf, kf, v)
}

impl<T: Scalar> Tape<T> {
    /// Residual linear attention over raw `q`, `k` with φ fused per chunk.
    pub fn residual_linear_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        params: RlaParams,
        feature_map: FeatureMap,
        save_stride: usize,
    ) -> Result<Var> {
        self.linear_attention(q, k, v, params.kernel(feature_map, save_stride))
    }
}

/// Token sets feeding position `t` (0-based) in each branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coverage {
    pub t: usize,
    pub residual: BTreeSet<usize>,
    pub window: BTreeSet<usize>,
}

impl Coverage {
    pub fn is_partition(&self) -> bool {
        self.residual.is_disjoint(&self.window)
            && self.residual.union(&self.window).copied().eq(0..=self.t)
    }
}

/// Audits which tokens each branch aggregates at every position by running
/// the production kernels on one-hot values: with `φ(q) = φ(k) = e_0` the
/// residual output at `t` is the sum of one-hot rows in its state, and with
/// zero queries/keys the windowed softmax is uniform over its band.
pub fn coverage_audit(len: usize, window: usize, chunk: usize) -> Result<Vec<Coverage>> {
    let params = RlaParams::new(window, chunk)?;
    let unit = Tensor::<f64>::from_fn(&[1, 1, len, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
    let onehot = Tensor::<f64>::eye(len).reshape(&[1, 1, len, len])?;
    let (rla, _) = params.kernel(FeatureMap::Identity, 1).forward(&unit, &unit, &onehot)?;
    let zeros = Tensor::<f64>::zeros(&[1, 1, len, len]);
    let swa = sliding_window_attention(&zeros, &zeros, &onehot, window)?;
    Ok((0..len)
        .map(|t| {
            let set = |o: &Tensor<f64>| (0..len).filter(|&j| o.at(&[0, 0, t, j]) != 0.0).collect();
            Coverage {
                t,
                residual: set(&rla),
                window: set(&swa),
            }
        })
        .collect())
}
