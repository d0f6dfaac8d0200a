//! The token-mixing layer. One set of q/k/v/o projections feeds a sliding
//! window softmax branch and a residual linear branch; the branch outputs
//! are RMS-normalized per head, summed and projected back.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttnConfig;
use crate::autodiff::{Tape, Var, RMS_EPS};
use crate::error::{shape_err, Error, Result};
use crate::linear::ChunkKernel;
use crate::rla::RlaParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Token mixer used by local layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LocalVariant {
    SwaOnly,
    Rattention,
    LinearOnly,
}

impl LocalVariant {
    pub fn name(self) -> &'static str {
        match self {
            LocalVariant::SwaOnly => "swa",
            LocalVariant::Rattention => "rattention",
            LocalVariant::LinearOnly => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "swa" | "swa_only" | "swaonly" => Ok(LocalVariant::SwaOnly),
            "rattention" | "rattn" => Ok(LocalVariant::Rattention),
            "linear" | "linear_only" | "linearonly" => Ok(LocalVariant::LinearOnly),
            other => Err(Error::Config(format!("unknown local variant `{other}`"))),
        }
    }
}

/// What a layer's attention does.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    /// Full causal softmax attention without rotary embeddings.
    Global,
    Local(LocalVariant),
}

/// Attention parameters, generic over storage (`Tensor` at rest, `Var` on
/// a tape).
#[derive(Clone, Debug, PartialEq)]
pub struct RattentionParams<P> {
    /// `[d_model, n_heads·d]`
    pub w_q: P,
    /// `[d_model, n_kv_heads·d]`
    pub w_k: P,
    pub w_v: P,
    /// `[n_heads·d, d_model]`
    pub w_o: P,
    /// `[d]`, present with qk-norm.
    pub q_norm: Option<P>,
    pub k_norm: Option<P>,
    /// Output norm of the windowed branch: `[n_heads, d]` or `[d]`.
    pub rms_swa: Option<P>,
    /// Output norm of the residual (or plain linear) branch.
    pub rms_rla: Option<P>,
}

/// One parameter slot: name, shape and whether it is a norm scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub is_norm: bool,
}

/// Projection and norm parameter totals of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub projection_params: usize,
    pub norm_params: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.projection_params + self.norm_params
    }
}

/// Parameter layout of one attention layer.
pub fn param_specs(cfg: &AttnConfig, kind: MixerKind) -> Vec<ParamSpec> {
    let (dm, h, hkv, d) = (cfg.d_model, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim);
    let proj = |name, shape: Vec<usize>| ParamSpec { name, shape, is_norm: false };
    let norm = |name, shape: Vec<usize>| ParamSpec { name, shape, is_norm: true };
    let mut specs = vec![
        proj("w_q", vec![dm, h * d]),
        proj("w_k", vec![dm, hkv * d]),
        proj("w_v", vec![dm, hkv * d]),
        proj("w_o", vec![h * d, dm]),
    ];
    if cfg.qk_norm {
        specs.push(norm("q_norm", vec![d]));
        specs.push(norm("k_norm", vec![d]));
    }
    let out_norm = if cfg.use_group_norm { vec![h, d] } else { vec![d] };
    match kind {
        MixerKind::Local(LocalVariant::Rattention) => {
            specs.push(norm("rms_swa", out_norm.clone()));
            specs.push(norm("rms_rla", out_norm));
        }
        MixerKind::Local(LocalVariant::LinearOnly) => specs.push(norm("rms_rla", out_norm)),
        MixerKind::Local(LocalVariant::SwaOnly) | MixerKind::Global => {}
    }
    specs
}

/// Structural parameter count from the layer layout.
pub fn param_count(cfg: &AttnConfig, kind: MixerKind) -> ParamCount {
    let mut c = ParamCount {
        projection_params: 0,
        norm_params: 0,
    };
    for s in param_specs(cfg, kind) {
        let n: usize = s.shape.iter().product();
        if s.is_norm {
            c.norm_params += n;
        } else {
            c.projection_params += n;
        }
    }
    c
}

impl<P> RattentionParams<P> {
    /// Assembles from `(name, value)` pairs laid out as [`param_specs`].
    pub fn from_named(mut items: Vec<(&'static str, P)>) -> Result<Self> {
        let mut take = |name: &str| items.iter().position(|(n, _)| *n == name).map(|i| items.remove(i).1);
        let missing = |n: &str| Error::Format(format!("missing attention parameter `{n}`"));
        let p = Self {
            w_q: take("w_q").ok_or_else(|| missing("w_q"))?,
            w_k: take("w_k").ok_or_else(|| missing("w_k"))?,
            w_v: take("w_v").ok_or_else(|| missing("w_v"))?,
            w_o: take("w_o").ok_or_else(|| missing("w_o"))?,
            q_norm: take("q_norm"),
            k_norm: take("k_norm"),
            rms_swa: take("rms_swa"),
            rms_rla: take("rms_rla"),
        };
        if let Some((n, _)) = items.first() {
            return Err(Error::Format(format!("unexpected attention parameter `{n}`")));
        }
        Ok(p)
    }

    /// `(name, value)` pairs in layout order.
    pub fn named(&self) -> Vec<(&'static str, &P)> {
        let mut v = vec![("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)];
        for (n, p) in [
            ("q_norm", &self.q_norm),
            ("k_norm", &self.k_norm),
            ("rms_swa", &self.rms_swa),
            ("rms_rla", &self.rms_rla),
        ] {
            if let Some(p) = p {
                v.push((n, p));
            }
        }
        v
    }

    pub fn values_mut(&mut self) -> Vec<&mut P> {
        let mut v = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o];
        for p in [&mut self.q_norm, &mut self.k_norm, &mut self.rms_swa, &mut self.rms_rla] {
            if let Some(p) = p.as_mut() {
                v.push(p);
            }
        }
        v
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&'static str, &P) -> Q) -> RattentionParams<Q> {
        RattentionParams {
            w_q: f("w_q", &self.w_q),
            w_k: f("w_k", &self.w_k),
            w_v: f("w_v", &self.w_v),
            w_o: f("w_o", &self.w_o),
            q_norm: self.q_norm.as_ref().map(|p| f("q_norm", p)),
            k_norm: self.k_norm.as_ref().map(|p| f("k_norm", p)),
            rms_swa: self.rms_swa.as_ref().map(|p| f("rms_swa", p)),
            rms_rla: self.rms_rla.as_ref().map(|p| f("rms_rla", p)),
        }
    }
}

impl<T: Scalar> RattentionParams<Tensor<T>> {
    /// Gaussian projections with `1/√fan_in` scale; unit norm scales.
    pub fn init<R: Rng + ?Sized>(cfg: &AttnConfig, kind: MixerKind, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let items = param_specs(cfg, kind)
            .into_iter()
            .map(|s| {
                let t = if s.is_norm {
                    Tensor::ones(&s.shape)
                } else {
                    Tensor::randn(&s.shape, 1.0 / (s.shape[0] as f64).sqrt(), rng)
                };
                (s.name, t)
            })
            .collect();
        Self::from_named(items)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> RattentionParams<Var> {
        self.map(|_, t| tape.param(t.clone()))
    }

    pub fn bind_constant(&self, tape: &mut Tape<T>) -> RattentionParams<Var> {
        self.map(|_, t| tape.constant(t.clone()))
    }

    /// Forward without gradient tracking.
    pub fn forward(&self, x: &Tensor<T>, cfg: &AttnConfig, kind: MixerKind) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let y = rattention_forward(&mut tape, xv, &p, cfg, kind)?;
        Ok(tape.value(y).clone())
    }
}

/// Projects `[b, L, d_model]` to `[b, heads, L, d]` with optional qk-norm.
fn project_heads<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    norm: Option<Var>,
    heads: usize,
    d: usize,
) -> Result<Var> {
    let (b, l) = {
        let s = tape.shape(x);
        (s[0], s[1])
    };
    let y = tape.matmul(x, w)?;
    let mut y = tape.reshape(y, &[b, l, heads, d])?;
    if let Some(n) = norm {
        y = tape.rms_norm(y, n, T::from_f64_lossy(RMS_EPS))?;
    }
    tape.permute(y, &[0, 2, 1, 3])
}

/// `[b, h, L, d]` → `[b, L, h, d]`, optionally RMS-normalized per head.
fn heads_last<T: Scalar>(tape: &mut Tape<T>, o: Var, norm: Option<Var>) -> Result<Var> {
    let y = tape.permute(o, &[0, 2, 1, 3])?;
    match norm {
        Some(n) => tape.rms_norm(y, n, T::from_f64_lossy(RMS_EPS)),
        None => Ok(y),
    }
}

fn output_projection<T: Scalar>(tape: &mut Tape<T>, y: Var, w_o: Var) -> Result<Var> {
    let s = tape.shape(y).to_vec();
    let y = tape.reshape(y, &[s[0], s[1], s[2] * s[3]])?;
    tape.matmul(y, w_o)
}

fn check_geometry<T: Scalar>(tape: &Tape<T>, x: Var, p: &RattentionParams<Var>, cfg: &AttnConfig, kind: MixerKind) -> Result<()> {
    cfg.validate()?;
    let xs = tape.shape(x);
    if xs.len() != 3 || xs[2] != cfg.d_model {
        return Err(shape_err("rattention", format!("input {xs:?} vs d_model {}", cfg.d_model)));
    }
    for s in param_specs(cfg, kind) {
        let got = p
            .named()
            .into_iter()
            .find(|(n, _)| *n == s.name)
            .map(|(_, v)| tape.shape(*v).to_vec());
        match got {
            Some(g) if g == s.shape => {}
            Some(g) => {
                return Err(shape_err("rattention", format!("parameter {} is {g:?}, expected {:?}", s.name, s.shape)))
            }
            None => return Err(shape_err("rattention", format!("parameter {} is missing", s.name))),
        }
    }
    if matches!(kind, MixerKind::Local(LocalVariant::Rattention)) {
        cfg.validate_chunkwise_rla()?;
    }
    Ok(())
}

/// Layer forward on a tape: `x: [b, L, d_model]` → `[b, L, d_model]`.
pub fn rattention_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &RattentionParams<Var>,
    cfg: &AttnConfig,
    kind: MixerKind,
) -> Result<Var> {
    check_geometry(tape, x, p, cfg, kind)?;
    let (h, hkv, d) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim);
    let l = tape.shape(x)[1];
    let positions: Vec<usize> = (0..l).collect();

    let q = project_heads(tape, x, p.w_q, p.q_norm, h, d)?;
    let k = project_heads(tape, x, p.w_k, p.k_norm, hkv, d)?;
    let v = project_heads(tape, x, p.w_v, None, hkv, d)?;
    let v_e = tape.gqa_expand(v, h)?;

    let local_rope = |tape: &mut Tape<T>, q: Var, k: Var| -> Result<(Var, Var)> {
        if cfg.use_rope {
            Ok((tape.rope(q, &positions, cfg.rope_theta)?, tape.rope(k, &positions, cfg.rope_theta)?))
        } else {
            Ok((q, k))
        }
    };

    let mixed = match kind {
        MixerKind::Global => {
            let k_e = tape.gqa_expand(k, h)?;
            let o = tape.attention(q, k_e, v_e, None)?;
            heads_last(tape, o, None)?
        }
        MixerKind::Local(LocalVariant::SwaOnly) => {
            let (qr, kr) = local_rope(tape, q, k)?;
            let kr = tape.gqa_expand(kr, h)?;
            let o = tape.attention(qr, kr, v_e, Some(cfg.window))?;
            heads_last(tape, o, None)?
        }
        MixerKind::Local(LocalVariant::LinearOnly) => {
            let k_e = tape.gqa_expand(k, h)?;
            let kernel = ChunkKernel::linear(cfg.chunk_size)
                .with_feature_map(cfg.feature_map)
                .with_save_stride(cfg.save_stride);
            let o = tape.linear_attention(q, k_e, v_e, kernel)?;
            heads_last(tape, o, p.rms_rla)?
        }
        MixerKind::Local(LocalVariant::Rattention) => {
            let (qr, kr) = local_rope(tape, q, k)?;
            let kr_e = tape.gqa_expand(kr, h)?;
            let swa = tape.attention(qr, kr_e, v_e, Some(cfg.window))?;
            let (qf, kf) = if cfg.rla_uses_rope { (qr, kr_e) } else { (q, tape.gqa_expand(k, h)?) };
            let params = RlaParams::new(cfg.window, cfg.chunk_size)?.inclusive(cfg.rla_inclusive_readout);
            let rla = tape.residual_linear_attention(qf, kf, v_e, params, cfg.feature_map, cfg.save_stride)?;
            let swa = heads_last(tape, swa, p.rms_swa)?;
            let rla = heads_last(tape, rla, p.rms_rla)?;
            tape.add(swa, rla)?
        }
    };
    output_projection(tape, mixed, p.w_o)
}
