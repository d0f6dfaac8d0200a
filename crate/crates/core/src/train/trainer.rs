//! Training loop, evaluation and run artifacts.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::kvconfig::KvDoc;
use crate::layer::LocalVariant;
use crate::linear::FeatureMap;
use crate::model::{model_forward, LayerKind, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::optim::{OptimConfig, OptimState};
use crate::train::task::{RecallBatch, RecallTask, IGNORE};

/// Batch stream used for training data.
const TRAIN_STREAM: u64 = 0;
/// Batch stream used for evaluation data.
const EVAL_STREAM: u64 = 1;
/// Sequences per evaluation forward pass.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: RecallTask,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate every this many steps (0: only at the start and end).
    pub eval_every: usize,
    pub eval_sequences: usize,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl TrainConfig {
    /// Out-of-window recall at vocab 64, length 256, window 16: one pair
    /// placed beyond the window of a single all-local layer.
    pub fn recall_default(variant: LocalVariant, seed: u64) -> Self {
        let mut model = ModelConfig::desk(16);
        model.vocab_size = 64;
        model.n_layers = 1;
        model.local_global_period = 0;
        model.local_variant = variant;
        model.attn.feature_map = FeatureMap::Relu;
        let task = RecallTask {
            n_pairs: 1,
            n_queries: 4,
            ..RecallTask::new(seed, 256, 64, 16).beyond_receptive_field(1)
        };
        Self {
            model,
            task,
            optim: OptimConfig {
                lr: 3e-4,
                warmup_steps: 0,
                ..OptimConfig::default()
            },
            steps: 2000,
            batch_size: 16,
            eval_every: 500,
            eval_sequences: 256,
            checkpoint_every: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        if self.task.vocab != self.model.vocab_size {
            return Err(Error::Config(format!(
                "task vocabulary {} differs from the model's {}",
                self.task.vocab, self.model.vocab_size
            )));
        }
        if self.batch_size == 0 || self.eval_sequences == 0 {
            return Err(Error::Config("batch_size and eval_sequences must be positive".into()));
        }
        Ok(())
    }

    /// Applies keys from `doc`: model keys, task keys (`seq_len`,
    /// `n_pairs`, `n_queries`, `query_gap`, `task_seed`), optimizer keys
    /// (`lr`, `decay`, `momentum`, `eps`, `clip_norm` with 0 disabling,
    /// `warmup_steps`) and loop keys (`steps`, `batch_size`, `eval_every`,
    /// `eval_sequences`, `checkpoint_every`, `seed`). The task vocabulary
    /// and window follow the model.
    pub fn apply_kv(&mut self, doc: &mut KvDoc) -> Result<()> {
        self.model.apply_kv(doc)?;
        let t = &mut self.task;
        doc.take_into("seq_len", &mut t.seq_len)?;
        doc.take_into("n_pairs", &mut t.n_pairs)?;
        doc.take_into("n_queries", &mut t.n_queries)?;
        doc.take_into("task_seed", &mut t.seed)?;
        let gap: Option<usize> = doc.take("query_gap")?;
        t.vocab = self.model.vocab_size;
        t.window = self.model.attn.window;
        t.query_gap = match gap {
            Some(g) => g,
            None => {
                let locals = (1..=self.model.n_layers)
                    .filter(|&l| self.model.layer(l) == LayerKind::Local)
                    .count();
                locals * t.window + 2
            }
        };
        let o = &mut self.optim;
        doc.take_into("lr", &mut o.lr)?;
        doc.take_into("decay", &mut o.decay)?;
        doc.take_into("momentum", &mut o.momentum)?;
        doc.take_into("eps", &mut o.eps)?;
        if let Some(c) = doc.take::<f64>("clip_norm")? {
            o.clip_norm = (c > 0.0).then_some(c);
        }
        doc.take_into("warmup_steps", &mut o.warmup_steps)?;
        doc.take_into("steps", &mut self.steps)?;
        doc.take_into("batch_size", &mut self.batch_size)?;
        doc.take_into("eval_every", &mut self.eval_every)?;
        doc.take_into("eval_sequences", &mut self.eval_sequences)?;
        doc.take_into("checkpoint_every", &mut self.checkpoint_every)?;
        doc.take_into("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = self.model.to_kv();
        let t = &self.task;
        let o = &self.optim;
        let _ = writeln!(s, "seq_len = {}", t.seq_len);
        let _ = writeln!(s, "n_pairs = {}", t.n_pairs);
        let _ = writeln!(s, "n_queries = {}", t.n_queries);
        let _ = writeln!(s, "query_gap = {}", t.query_gap);
        let _ = writeln!(s, "task_seed = {}", t.seed);
        let _ = writeln!(s, "lr = {}", o.lr);
        let _ = writeln!(s, "decay = {}", o.decay);
        let _ = writeln!(s, "momentum = {}", o.momentum);
        let _ = writeln!(s, "eps = {}", o.eps);
        let _ = writeln!(s, "clip_norm = {}", o.clip_norm.unwrap_or(0.0));
        let _ = writeln!(s, "warmup_steps = {}", o.warmup_steps);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "eval_sequences = {}", self.eval_sequences);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    /// Mean answer cross-entropy on the evaluation set.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<Tensor<T>>,
    pub trace: Vec<MetricRow>,
}

impl<T> TrainOutcome<T> {
    pub fn final_accuracy(&self) -> f64 {
        self.trace.last().map_or(0.0, |r| r.accuracy)
    }
}

pub fn trace_csv(trace: &[MetricRow]) -> String {
    let mut s = String::from("step,loss,accuracy\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.accuracy);
    }
    s
}

fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<Tensor<T>>,
    cfg: &ModelConfig,
    batch: &RecallBatch,
    track: bool,
) -> Result<(crate::autodiff::Var, ModelParams<crate::autodiff::Var>)> {
    let p = if track { params.bind(tape) } else { params.bind_constant(tape) };
    let logits = model_forward(tape, &p, cfg, &batch.tokens, batch.batch)?;
    let loss = tape.cross_entropy(logits, &batch.targets, IGNORE)?;
    Ok((loss, p))
}

/// Answer accuracy (argmax over the full vocabulary) and mean answer loss.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<Tensor<T>>,
    cfg: &ModelConfig,
    task: &RecallTask,
    sequences: usize,
) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut loss_sum = 0.0;
    let mut index = 0u64;
    let mut left = sequences;
    while left > 0 {
        let n = left.min(EVAL_CHUNK);
        let batch = task.batch(EVAL_STREAM, index, n)?;
        let mut tape = Tape::new();
        let p = params.bind_constant(&mut tape);
        let logits = model_forward(&mut tape, &p, cfg, &batch.tokens, n)?;
        let loss = tape.cross_entropy(logits, &batch.targets, IGNORE)?;
        let answers = batch.answers();
        loss_sum += tape.value(loss).item().to_f64_lossy() * answers as f64;
        let v = cfg.vocab_size;
        for (row, &target) in tape.value(logits).data().chunks(v).zip(&batch.targets) {
            if target == IGNORE {
                continue;
            }
            let arg = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0;
            correct += usize::from(arg == target);
            total += 1;
        }
        left -= n;
        index += 1;
    }
    Ok((correct as f64 / total as f64, loss_sum / total as f64))
}

/// Trains from a fresh initialization. With `out_dir`, writes
/// `config.txt`, `metrics.csv` and checkpoints there.
pub fn train<T: Scalar>(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut params = ModelParams::<Tensor<T>>::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.to_kv())?;
    }
    let mut opt = OptimState::new(cfg.optim.clone(), params.values());
    let mut trace = Vec::new();
    let eval = |params: &ModelParams<Tensor<T>>, step: usize| -> Result<MetricRow> {
        let (accuracy, loss) = evaluate(params, &cfg.model, &cfg.task, cfg.eval_sequences)?;
        Ok(MetricRow { step, loss, accuracy })
    };
    let save = |params: &ModelParams<Tensor<T>>, step: usize| -> Result<()> {
        if let Some(dir) = out_dir {
            let meta = vec![
                ("step".to_string(), step.to_string()),
                ("seed".to_string(), cfg.seed.to_string()),
                ("precision".to_string(), T::NAME.to_string()),
            ];
            checkpoint::save(dir.join(format!("checkpoint_{step:06}.bin")), &cfg.model, params, &meta)?;
        }
        Ok(())
    };
    trace.push(eval(&params, 0)?);

    for step in 0..cfg.steps {
        let batch = cfg.task.batch(TRAIN_STREAM, step as u64, cfg.batch_size)?;
        let mut tape = Tape::new();
        let diverged = |loss: f64| Error::Diverged { step, loss };
        let (loss, bound) = match batch_loss(&mut tape, &params, &cfg.model, &batch, true) {
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            r => r?,
        };
        let lv = tape.value(loss).item().to_f64_lossy();
        if !lv.is_finite() {
            return Err(diverged(lv));
        }
        let grads = tape.backward(loss)?;
        let gs: Vec<Tensor<T>> = bound
            .values()
            .into_iter()
            .zip(params.values())
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        drop(tape);
        let norm = opt.update(&mut params.values_mut(), &gs)?;
        if !norm.is_finite() {
            return Err(diverged(lv));
        }
        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != cfg.steps {
            trace.push(eval(&params, done)?);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.steps {
            save(&params, done)?;
        }
    }
    if cfg.steps > 0 {
        trace.push(eval(&params, cfg.steps)?);
    }
    save(&params, cfg.steps)?;
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("metrics.csv"), trace_csv(&trace))?;
    }
    Ok(TrainOutcome { params, trace })
}

/// Answer accuracy of a trained model at each of `lengths`, keeping the
/// task's gap and counts.
pub fn evaluate_length_generalization<T: Scalar>(
    params: &ModelParams<Tensor<T>>,
    cfg: &ModelConfig,
    task: &RecallTask,
    lengths: &[usize],
    sequences: usize,
) -> Result<Vec<(usize, f64)>> {
    lengths
        .iter()
        .map(|&l| Ok((l, evaluate(params, cfg, &task.with_len(l), sequences)?.0)))
        .collect()
}

/// CSV rows `length,variant,accuracy`.
pub fn length_csv(rows: &[(LocalVariant, Vec<(usize, f64)>)]) -> String {
    let mut s = String::from("length,variant,accuracy\n");
    for (variant, accs) in rows {
        for (l, a) in accs {
            let _ = writeln!(s, "{l},{},{a}", variant.name());
        }
    }
    s
}

/// `1/V ± 3σ` band of a binomial with `n` trials at chance `p`.
pub fn chance_band(p: f64, n: usize) -> (f64, f64) {
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    ((p - 3.0 * sigma).max(0.0), p + 3.0 * sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: LocalVariant) -> TrainConfig {
        let mut c = TrainConfig::recall_default(variant, 3);
        c.model.d_model = 16;
        c.model.ffn_dim = 16;
        c.model.attn.d_model = 16;
        c.model.attn.n_heads = 2;
        c.model.attn.n_kv_heads = 1;
        c.model.attn.head_dim = 8;
        c.model.attn.window = 4;
        c.model.attn.chunk_size = 4;
        c.task.window = 4;
        c.task.seq_len = 32;
        c.task.query_gap = 10;
        c.task.n_pairs = 2;
        c.task.n_queries = 2;
        c.steps = 3;
        c.batch_size = 2;
        c.eval_every = 2;
        c.eval_sequences = 4;
        c
    }

    #[test]
    fn deterministic_trace_in_f64() {
        let c = tiny(LocalVariant::Rattention);
        let a = train::<f64>(&c, None).unwrap();
        let b = train::<f64>(&c, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
        assert_eq!(a.trace.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2, 3]);
    }

    #[test]
    fn zero_steps_is_untrained_eval() {
        let mut c = tiny(LocalVariant::SwaOnly);
        c.steps = 0;
        let o = train::<f32>(&c, None).unwrap();
        assert_eq!(o.trace.len(), 1);
        assert!(o.trace[0].loss > 0.0);
    }

    #[test]
    fn divergence_aborts() {
        let mut c = tiny(LocalVariant::Rattention);
        c.optim.lr = 1e30;
        c.optim.clip_norm = None;
        c.optim.warmup_steps = 0;
        c.steps = 20;
        assert!(matches!(train::<f32>(&c, None), Err(Error::Diverged { .. })));
    }

    #[test]
    fn kv_round_trip_and_unknown_keys() {
        let c = tiny(LocalVariant::Rattention);
        let mut d = KvDoc::parse(&c.to_kv()).unwrap();
        let mut back = TrainConfig::recall_default(LocalVariant::SwaOnly, 0);
        back.apply_kv(&mut d).unwrap();
        d.finish().unwrap();
        assert_eq!(back, c);
        let mut d = KvDoc::parse("stepz = 3").unwrap();
        back.apply_kv(&mut d).unwrap();
        assert!(matches!(d.finish(), Err(Error::UnknownKey(k)) if k == "stepz"));
    }

    #[test]
    fn artifacts_are_written() {
        let dir = std::env::temp_dir().join(format!("rattn-train-{}", std::process::id()));
        let c = tiny(LocalVariant::Rattention);
        let o = train::<f32>(&c, Some(&dir)).unwrap();
        let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert_eq!(csv, trace_csv(&o.trace));
        let ck = checkpoint::load(dir.join("checkpoint_000003.bin")).unwrap();
        assert_eq!(ck.params, o.params);
        assert!(std::fs::read_to_string(dir.join("config.txt")).unwrap().contains("seed = 3"));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn band() {
        let (lo, hi) = chance_band(0.5, 100);
        assert!((lo - 0.35).abs() < 1e-12 && (hi - 0.65).abs() < 1e-12);
    }
}
