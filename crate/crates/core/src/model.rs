//! Local-global decoder stack: token embedding, pre-norm blocks with gated
//! feed-forward layers, a final RMS norm and an untied LM head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttnConfig;
use crate::autodiff::{Tape, Var, RMS_EPS};
use crate::error::{Error, Result};
use crate::layer::{param_count, param_specs, rattention_forward, LocalVariant, MixerKind, RattentionParams};
use crate::linear::FeatureMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Local,
    Global,
}

/// Layer `l` (1-based) is global iff `l` is a multiple of `period`.
/// `period = 0` makes every layer local.
pub fn layer_kind(l: usize, period: usize) -> LayerKind {
    assert!(l >= 1, "layers are numbered from 1");
    if period != 0 && l % period == 0 {
        LayerKind::Global
    } else {
        LayerKind::Local
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FfnKind {
    SwiGlu,
    GeGlu,
}

impl FfnKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "swiglu" => Ok(FfnKind::SwiGlu),
            "geglu" => Ok(FfnKind::GeGlu),
            other => Err(Error::Config(format!("unknown ffn kind `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FfnKind::SwiGlu => "swiglu",
            FfnKind::GeGlu => "geglu",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub attn: AttnConfig,
    pub local_global_period: usize,
    pub local_variant: LocalVariant,
    pub ffn: FfnKind,
    /// Second residual adds the block input instead of the post-attention
    /// stream.
    pub literal_residual: bool,
}

/// Vocabulary used for the large reference geometries.
pub const REFERENCE_VOCAB: usize = 32_768;

impl ModelConfig {
    /// Desk-scale default: vocab 256, 8 layers over `d_model = 64`.
    pub fn desk(window: usize) -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 8,
            ffn_dim: 128,
            attn: AttnConfig::desk(window),
            local_global_period: 4,
            local_variant: LocalVariant::Rattention,
            ffn: FfnKind::SwiGlu,
            literal_residual: false,
        }
    }

    fn reference(d_model: usize, n_layers: usize, heads: usize, kv: usize, ffn: usize, window: usize) -> Self {
        Self {
            vocab_size: REFERENCE_VOCAB,
            d_model,
            n_layers,
            ffn_dim: ffn,
            attn: AttnConfig {
                d_model,
                n_heads: heads,
                n_kv_heads: kv,
                head_dim: 128,
                window,
                rope_theta: 5e5,
                use_rope: true,
                feature_map: FeatureMap::Softmax,
                chunk_size: 64,
                save_stride: 1,
                use_group_norm: true,
                qk_norm: true,
                rla_uses_rope: false,
                rla_inclusive_readout: false,
            },
            local_global_period: 4,
            local_variant: LocalVariant::Rattention,
            ffn: FfnKind::SwiGlu,
            literal_residual: false,
        }
    }

    /// 3B reference geometry.
    pub fn paper_3b(window: usize) -> Self {
        Self::reference(2048, 56, 16, 4, 6656, window)
    }

    /// 12B reference geometry.
    pub fn paper_12b(window: usize) -> Self {
        Self::reference(5120, 40, 40, 8, 16384, window)
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        if self.d_model != self.attn.d_model {
            return Err(Error::Config(format!(
                "d_model ({}) differs from the attention d_model ({})",
                self.d_model, self.attn.d_model
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("vocab_size, n_layers and ffn_dim must be positive".into()));
        }
        if self.local_variant == LocalVariant::Rattention && (1..=self.n_layers).any(|l| self.layer(l) == LayerKind::Local) {
            self.attn.validate_chunkwise_rla()?;
        }
        Ok(())
    }

    pub fn layer(&self, l: usize) -> LayerKind {
        layer_kind(l, self.local_global_period)
    }

    /// Mixer of layer `l` (1-based).
    pub fn mixer(&self, l: usize) -> MixerKind {
        match self.layer(l) {
            LayerKind::Global => MixerKind::Global,
            LayerKind::Local => MixerKind::Local(self.local_variant),
        }
    }

    pub fn global_layers(&self) -> usize {
        (1..=self.n_layers).filter(|&l| self.layer(l) == LayerKind::Global).count()
    }

    /// Every parameter as `(name, shape)` in checkpoint order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (dm, v, f) = (self.d_model, self.vocab_size, self.ffn_dim);
        let mut out = vec![("embed".to_string(), vec![v, dm])];
        for l in 1..=self.n_layers {
            let i = l - 1;
            for s in param_specs(&self.attn, self.mixer(l)) {
                out.push((format!("blocks.{i}.attn.{}", s.name), s.shape));
            }
            out.push((format!("blocks.{i}.attn_norm"), vec![dm]));
            out.push((format!("blocks.{i}.ffn_norm"), vec![dm]));
            out.push((format!("blocks.{i}.w_gate"), vec![dm, f]));
            out.push((format!("blocks.{i}.w_up"), vec![dm, f]));
            out.push((format!("blocks.{i}.w_down"), vec![f, dm]));
        }
        out.push(("final_norm".to_string(), vec![dm]));
        out.push(("lm_head".to_string(), vec![dm, v]));
        out
    }

    /// Total parameter count (embeddings, blocks and head).
    pub fn param_count(&self) -> usize {
        let (dm, v, f) = (self.d_model, self.vocab_size, self.ffn_dim);
        let blocks: usize = (1..=self.n_layers)
            .map(|l| param_count(&self.attn, self.mixer(l)).total() + 2 * dm + 3 * dm * f)
            .sum();
        2 * v * dm + dm + blocks
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub attn: RattentionParams<P>,
    pub attn_norm: P,
    pub ffn_norm: P,
    pub w_gate: P,
    pub w_up: P,
    pub w_down: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub embed: P,
    pub blocks: Vec<BlockParams<P>>,
    pub final_norm: P,
    pub lm_head: P,
}

impl<P> ModelParams<P> {
    /// All parameters in checkpoint order, matching [`ModelConfig::param_layout`].
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, p) in b.attn.named() {
                out.push((format!("blocks.{i}.attn.{n}"), p));
            }
            out.push((format!("blocks.{i}.attn_norm"), &b.attn_norm));
            out.push((format!("blocks.{i}.ffn_norm"), &b.ffn_norm));
            out.push((format!("blocks.{i}.w_gate"), &b.w_gate));
            out.push((format!("blocks.{i}.w_up"), &b.w_up));
            out.push((format!("blocks.{i}.w_down"), &b.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn values(&self) -> Vec<&P> {
        self.named().into_iter().map(|(_, p)| p).collect()
    }

    /// Mutable parameters in checkpoint order.
    pub fn values_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.extend(b.attn.values_mut());
            out.push(&mut b.attn_norm);
            out.push(&mut b.ffn_norm);
            out.push(&mut b.w_gate);
            out.push(&mut b.w_up);
            out.push(&mut b.w_down);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            embed: f(&self.embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    attn: b.attn.map(|_, p| f(p)),
                    attn_norm: f(&b.attn_norm),
                    ffn_norm: f(&b.ffn_norm),
                    w_gate: f(&b.w_gate),
                    w_up: f(&b.w_up),
                    w_down: f(&b.w_down),
                })
                .collect(),
            final_norm: f(&self.final_norm),
            lm_head: f(&self.lm_head),
        }
    }

    /// Rebuilds from values in checkpoint order.
    pub fn from_values(cfg: &ModelConfig, values: Vec<P>) -> Result<Self> {
        let layout = cfg.param_layout();
        if values.len() != layout.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        let mut it = values.into_iter();
        let mut next = || it.next().expect("length checked");
        let embed = next();
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 1..=cfg.n_layers {
            let items = param_specs(&cfg.attn, cfg.mixer(l)).into_iter().map(|s| (s.name, next())).collect();
            blocks.push(BlockParams {
                attn: RattentionParams::from_named(items)?,
                attn_norm: next(),
                ffn_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            });
        }
        Ok(Self {
            embed,
            blocks,
            final_norm: next(),
            lm_head: next(),
        })
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Unit-variance embeddings, `1/√fan_in` projections, unit norm scales.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let values = cfg
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                if shape.len() == 1 || name.ends_with("norm") || name.ends_with("rms_swa") || name.ends_with("rms_rla") {
                    Tensor::ones(&shape)
                } else if name == "embed" {
                    Tensor::randn(&shape, 1.0, rng)
                } else {
                    Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), rng)
                }
            })
            .collect();
        Self::from_values(cfg, values)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ModelParams<Var> {
        self.map(|t| tape.param(t.clone()))
    }

    pub fn bind_constant(&self, tape: &mut Tape<T>) -> ModelParams<Var> {
        self.map(|t| tape.constant(t.clone()))
    }

    pub fn count(&self) -> usize {
        self.values().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<Tensor<U>> {
        self.map(|t| t.cast())
    }

    /// Logits `[batch, len, vocab]` without gradient tracking.
    pub fn logits(&self, cfg: &ModelConfig, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind_constant(&mut tape);
        let y = model_forward(&mut tape, &p, cfg, tokens, batch)?;
        Ok(tape.value(y).clone())
    }
}

fn ffn<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &BlockParams<Var>, kind: FfnKind) -> Result<Var> {
    let g = tape.matmul(x, p.w_gate)?;
    let g = match kind {
        FfnKind::SwiGlu => tape.silu(g)?,
        FfnKind::GeGlu => tape.gelu(g)?,
    };
    let u = tape.matmul(x, p.w_up)?;
    let h = tape.mul(g, u)?;
    tape.matmul(h, p.w_down)
}

/// `y = attn(rms(x)) + x; out = ffn(rms(y)) + y` (`+ x` with
/// `literal_residual`).
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockParams<Var>,
    cfg: &ModelConfig,
    kind: MixerKind,
) -> Result<Var> {
    let eps = T::from_f64_lossy(RMS_EPS);
    let n = tape.rms_norm(x, p.attn_norm, eps)?;
    let a = rattention_forward(tape, n, &p.attn, &cfg.attn, kind)?;
    let y = tape.add(a, x)?;
    let n = tape.rms_norm(y, p.ffn_norm, eps)?;
    let f = ffn(tape, n, p, cfg.ffn)?;
    tape.add(f, if cfg.literal_residual { x } else { y })
}

/// Embedding → blocks → final norm → LM head. `tokens` is `batch × len`
/// row-major; returns logits `[batch, len, vocab]`.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
) -> Result<Var> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(crate::error::shape_err(
            "model_forward",
            format!("{} tokens do not split into {batch} sequences", tokens.len()),
        ));
    }
    if p.blocks.len() != cfg.n_layers {
        return Err(Error::Config(format!("{} blocks for {} layers", p.blocks.len(), cfg.n_layers)));
    }
    let l = tokens.len() / batch;
    let mut x = tape.embedding(p.embed, tokens, &[batch, l])?;
    for (i, bp) in p.blocks.iter().enumerate() {
        x = block_forward(tape, x, bp, cfg, cfg.mixer(i + 1))?;
    }
    let x = tape.rms_norm(x, p.final_norm, T::from_f64_lossy(RMS_EPS))?;
    tape.matmul(x, p.lm_head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(layers: usize, vocab: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk(4);
        cfg.vocab_size = vocab;
        cfg.n_layers = layers;
        cfg.ffn_dim = 32;
        cfg.d_model = 16;
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

    #[test]
    fn layer_pattern() {
        assert_eq!(layer_kind(1, 4), LayerKind::Local);
        assert_eq!(layer_kind(4, 4), LayerKind::Global);
        assert_eq!(ModelConfig::paper_3b(512).global_layers(), 14);
        assert_eq!(ModelConfig::paper_12b(512).global_layers(), 10);
        for n in 1..40 {
            let mut cfg = ModelConfig::desk(8);
            cfg.n_layers = n;
            assert_eq!(cfg.global_layers(), n / 4);
            assert!((1..n).all(|l| !(cfg.layer(l) == LayerKind::Global && cfg.layer(l + 1) == LayerKind::Global)));
        }
        assert_eq!(layer_kind(8, 0), LayerKind::Local);
    }

    #[test]
    fn reference_geometries_construct() {
        let a = ModelConfig::paper_3b(512);
        a.validate().unwrap();
        assert_eq!((a.attn.n_heads, a.attn.n_kv_heads, a.attn.head_dim, a.ffn_dim), (16, 4, 128, 6656));
        let b = ModelConfig::paper_12b(512);
        b.validate().unwrap();
        assert_eq!((b.attn.n_heads, b.attn.n_kv_heads, b.attn.head_dim, b.ffn_dim), (40, 8, 128, 16384));
        let c = ModelConfig::desk(16);
        c.validate().unwrap();
        let p = ModelParams::<Tensor<f32>>::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.count(), c.param_count());
    }

    #[test]
    fn residual_wiring() {
        let cfg = toy(1, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[2, 5, 16], 1.0, &mut rng);
        let run = |params: &ModelParams<Tensor<f64>>, literal: bool| {
            let mut c = cfg.clone();
            c.literal_residual = literal;
            let mut tape = Tape::new();
            let bp = params.bind_constant(&mut tape);
            let xv = tape.constant(x.clone());
            let y = block_forward(&mut tape, xv, &bp.blocks[0], &c, c.mixer(1)).unwrap();
            tape.value(y).clone()
        };
        let zero = p.map(|t| Tensor::zeros(t.shape()));
        assert!(run(&zero, false).max_abs_diff(&x) < 1e-12);
        assert!(run(&zero, true).max_abs_diff(&x) < 1e-12);
        // attention only: the printed form drops the attention output
        let mut attn_only = p.clone();
        attn_only.blocks[0].w_down = Tensor::zeros(p.blocks[0].w_down.shape());
        assert!(run(&attn_only, true).max_abs_diff(&x) < 1e-12);
        assert!(run(&attn_only, false).max_abs_diff(&x) > 1e-3);
    }

    #[test]
    fn single_token_and_range_checks() {
        let cfg = toy(4, 32);
        let p = ModelParams::<Tensor<f32>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let y = p.logits(&cfg, &[3, 7], 2).unwrap();
        assert_eq!(y.shape(), &[2, 1, 32]);
        assert!(y.is_finite());
        assert!(matches!(p.logits(&cfg, &[3, 32], 1), Err(Error::TokenOutOfRange { id: 32, vocab: 32 })));
    }

    #[test]
    fn causal_and_deterministic() {
        let cfg = toy(4, 32);
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let p2 = ModelParams::<Tensor<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let toks: Vec<usize> = (0..12).map(|i| (i * 7) % 32).collect();
        let a = p.logits(&cfg, &toks, 1).unwrap();
        assert_eq!(a, p2.logits(&cfg, &toks, 1).unwrap());
        let mut t2 = toks.clone();
        t2[8] = 1;
        t2[11] = 2;
        let b = p.logits(&cfg, &t2, 1).unwrap();
        for t in 0..12 {
            let same = (0..32).all(|v| a.at(&[0, t, v]) == b.at(&[0, t, v]));
            assert_eq!(same, t < 8, "t={t}");
        }
    }

    #[test]
    fn cross_entropy_references() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::zeros(&[2, 3, 10]));
        let l = tape.cross_entropy(u, &[1, 2, 3, 4, 5, 6], usize::MAX).unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-12);
        let sharp = tape.constant(Tensor::from_fn(&[1, 2, 4], |i| if i % 4 == 1 { 50.0 } else { 0.0 }));
        let l = tape.cross_entropy(sharp, &[1, 1], usize::MAX).unwrap();
        assert!(tape.value(l).item() < 1e-12);
        let x = Tensor::<f64>::randn(&[3, 5, 7], 2.0, &mut ChaCha8Rng::seed_from_u64(4));
        let targets: Vec<usize> = (0..15).map(|i| if i % 4 == 0 { 99 } else { i % 7 }).collect();
        let xv = tape.constant(x.clone());
        let l = tape.cross_entropy(xv, &targets, 99).unwrap();
        assert!((tape.value(l).item() - oracle::cross_entropy_direct(&x, &targets, 99)).abs() < 1e-6);
        assert!(tape.cross_entropy(xv, &[99; 15], 99).is_err());
    }

    #[test]
    fn block_and_model_gradients() {
        let cfg = toy(8, 16);
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let p = p.map(|t| if t.rank() == 1 || t.numel() <= 16 { t.map(|v| v * 1.1) } else { t.clone() });
        let toks: Vec<usize> = (0..10).map(|i| (i * 5 + 3) % 16).collect();
        let targets: Vec<usize> = toks.iter().map(|t| (t + 1) % 16).collect();
        let values: Vec<Tensor<f64>> = p.values().into_iter().cloned().collect();
        let rep = grad_check_many(
            |tape, vars| {
                let mp = ModelParams::from_values(&cfg, vars.to_vec())?;
                let y = model_forward(tape, &mp, &cfg, &toks, 2)?;
                tape.cross_entropy(y, &targets, usize::MAX)
            },
            &values,
            1e-5,
            Some((6, 11)),
        )
        .unwrap();
        assert!(rep.worst() < 1e-4, "{:?}", rep.per_input);
    }
}
