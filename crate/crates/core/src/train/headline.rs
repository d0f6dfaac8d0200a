//! Paired Rattention vs window-only runs on the out-of-window recall task,
//! with length generalization at multiples of the training length.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::layer::LocalVariant;
use crate::scalar::Scalar;
use crate::train::trainer::{chance_band, evaluate_length_generalization, length_csv, train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadlineConfig {
    /// Template; the variant and seed are overridden per run.
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    /// Evaluation lengths as multiples of the training length.
    pub length_multipliers: Vec<usize>,
    pub length_sequences: usize,
}

impl HeadlineConfig {
    pub fn recall_default() -> Self {
        Self {
            base: TrainConfig::recall_default(LocalVariant::Rattention, 0),
            seeds: vec![0, 1, 2],
            length_multipliers: vec![1, 2, 4],
            length_sequences: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRun {
    pub variant: LocalVariant,
    pub final_accuracy: f64,
    pub final_loss: f64,
    /// `(length, accuracy)`
    pub lengths: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedRun {
    pub seed: u64,
    pub rattention: VariantRun,
    pub swa_only: VariantRun,
}

impl PairedRun {
    fn accuracy_at(run: &VariantRun, len: usize) -> Option<f64> {
        run.lengths.iter().find(|(l, _)| *l == len).map(|(_, a)| *a)
    }

    /// `(rattention, swa_only)` accuracy at `len`.
    pub fn at_length(&self, len: usize) -> Option<(f64, f64)> {
        Some((Self::accuracy_at(&self.rattention, len)?, Self::accuracy_at(&self.swa_only, len)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadlineReport {
    pub train_len: usize,
    pub chance: f64,
    /// `chance ± 3σ` over the independent evaluation sequences.
    pub chance_band: (f64, f64),
    pub runs: Vec<PairedRun>,
}

impl HeadlineReport {
    pub fn swa_within_chance(&self) -> bool {
        self.runs.iter().all(|r| r.swa_only.final_accuracy <= self.chance_band.1)
    }

    pub fn rattention_above(&self, threshold: f64) -> bool {
        self.runs.iter().all(|r| r.rattention.final_accuracy > threshold)
    }

    pub fn ordering_margin(&self) -> f64 {
        self.runs
            .iter()
            .map(|r| r.rattention.final_accuracy - r.swa_only.final_accuracy)
            .fold(f64::INFINITY, f64::min)
    }

    /// Every paired run has Rattention ≥ window-only at `multiplier ×` the
    /// training length.
    pub fn length_ordering_holds(&self, multiplier: usize) -> bool {
        let len = self.train_len * multiplier;
        self.runs
            .iter()
            .all(|r| r.at_length(len).is_some_and(|(ra, sa)| ra >= sa))
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("seed,variant,final_accuracy,final_loss\n");
        for r in &self.runs {
            for v in [&r.rattention, &r.swa_only] {
                let _ = writeln!(s, "{},{},{},{}", r.seed, v.variant.name(), v.final_accuracy, v.final_loss);
            }
        }
        s
    }

    pub fn lengths_csv(&self) -> String {
        let mut s = String::from("seed,length,variant,accuracy\n");
        for r in &self.runs {
            let rows = [
                (r.rattention.variant, r.rattention.lengths.clone()),
                (r.swa_only.variant, r.swa_only.lengths.clone()),
            ];
            for line in length_csv(&rows).lines().skip(1) {
                let _ = writeln!(s, "{},{line}", r.seed);
            }
        }
        s
    }
}

fn one_run<T: Scalar>(cfg: &HeadlineConfig, variant: LocalVariant, seed: u64, out: Option<&Path>) -> Result<VariantRun> {
    let mut tc = cfg.base.clone();
    tc.model.local_variant = variant;
    tc.seed = seed;
    tc.task.seed = seed;
    let dir = out.map(|d| d.join(format!("seed{seed}")).join(variant.name()));
    let outcome = train::<T>(&tc, dir.as_deref())?;
    let last = outcome.trace.last().copied().unwrap_or_default();
    let lens: Vec<usize> = cfg.length_multipliers.iter().map(|m| m * tc.task.seq_len).collect();
    let lengths = evaluate_length_generalization(&outcome.params, &tc.model, &tc.task, &lens, cfg.length_sequences)?;
    Ok(VariantRun {
        variant,
        final_accuracy: last.accuracy,
        final_loss: last.loss,
        lengths,
    })
}

/// Runs both variants for every seed. With `out`, each run writes its
/// artifacts to `seed<N>/<variant>/` and the report to `headline.json`,
/// `summary.csv` and `lengths.csv`.
pub fn run_headline<T: Scalar>(cfg: &HeadlineConfig, out: Option<&Path>) -> Result<HeadlineReport> {
    cfg.base.validate()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        runs.push(PairedRun {
            seed,
            rattention: one_run::<T>(cfg, LocalVariant::Rattention, seed, out)?,
            swa_only: one_run::<T>(cfg, LocalVariant::SwaOnly, seed, out)?,
        });
    }
    let chance = cfg.base.task.chance();
    let report = HeadlineReport {
        train_len: cfg.base.task.seq_len,
        chance,
        chance_band: chance_band(chance, cfg.base.eval_sequences),
        runs,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.csv"), report.summary_csv())?;
        std::fs::write(dir.join("lengths.csv"), report.lengths_csv())?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| crate::Error::Format(e.to_string()))?;
        std::fs::write(dir.join("headline.json"), json)?;
    }
    Ok(report)
}
