//! Hyperparameter sweeps over the LoRA settings and rank correlation of the
//! resulting forget-accuracy drops.

use serde::{Deserialize, Serialize};

use crate::data::{split_forget, synth_gen, FeatureHasher, Selector, DEFAULT_DIMS};
use crate::model::{fit, DenseParams, Sample, TrainConfig};

use super::{unlearn_lora, LoraConfig, UnlearnConfig, UnlearnError, UnlearnRequest};

pub const RANK_GRID: [f64; 4] = [2.0, 8.0, 16.0, 32.0];
pub const ALPHA_GRID: [f64; 4] = [1.0, 2.0, 8.0, 16.0];
pub const DROPOUT_GRID: [f64; 3] = [0.1, 0.3, 0.5];

pub const BENCH_ITEMS: usize = 200;

/// Training setup for the base model the sweeps unlearn from.
pub fn base_train_config() -> TrainConfig {
    TrainConfig { learning_rate: 0.5, epochs: 20, batch_size: 8, seed: 0 }
}

/// A trained two-class model and a label-0 forget split.
#[derive(Debug, Clone)]
pub struct UnlearnBench {
    pub base: DenseParams,
    pub forget: Vec<Sample>,
    pub retain: Vec<Sample>,
}

impl UnlearnBench {
    pub fn synthetic(seed: u64) -> Result<Self, UnlearnError> {
        let data = synth_gen(BENCH_ITEMS, 2, seed).expect("200 items over 2 classes");
        let hasher = FeatureHasher::new(DEFAULT_DIMS).expect("power of two");
        let cfg = TrainConfig { seed, ..base_train_config() };
        let (base, _) = fit(&DenseParams::zeros(2, DEFAULT_DIMS), &data.samples(&hasher), &cfg)?;
        let (forget, retain) = split_forget(&data, &Selector::Label(0), seed).expect("label 0 present");
        Ok(Self { base, forget: forget.samples(&hasher), retain: retain.samples(&hasher) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Rank,
    Alpha,
    Dropout,
}

impl SweepAxis {
    pub fn grid(self) -> &'static [f64] {
        match self {
            SweepAxis::Rank => &RANK_GRID,
            SweepAxis::Alpha => &ALPHA_GRID,
            SweepAxis::Dropout => &DROPOUT_GRID,
        }
    }

    /// Defaults with this axis set to `value`.
    pub fn lora(self, value: f64) -> LoraConfig {
        let mut l = LoraConfig::default();
        match self {
            SweepAxis::Rank => l.rank = value as usize,
            SweepAxis::Alpha => l.alpha = value,
            SweepAxis::Dropout => l.dropout = value,
        }
        l
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Rank => "r",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Dropout => "dropout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub lora: LoraConfig,
    pub acc_before: f64,
    pub acc_after: f64,
}

impl SweepPoint {
    pub fn drop(&self) -> f64 {
        self.acc_before - self.acc_after
    }
}

/// Runs every grid value of `axis` for every seed, all other settings at
/// their defaults.
pub fn run_sweep(axis: SweepAxis, seeds: &[u64], base: &UnlearnConfig) -> Result<Vec<SweepPoint>, UnlearnError> {
    let mut out = Vec::new();
    for &seed in seeds {
        let bench = UnlearnBench::synthetic(seed)?;
        for &value in axis.grid() {
            let lora = axis.lora(value);
            let request = UnlearnRequest {
                org: "sweep".into(),
                forget: bench.forget.clone(),
                config: UnlearnConfig { lora, ..*base },
                seed,
            };
            let r = unlearn_lora(&bench.base, &request)?;
            out.push(SweepPoint {
                axis,
                value,
                seed,
                lora,
                acc_before: r.forget_acc_before,
                acc_after: r.forget_acc_after,
            });
        }
    }
    Ok(out)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation of (hyperparameter value, accuracy drop) pooled
/// over all points.
pub fn trend(points: &[SweepPoint]) -> Option<f64> {
    let xs: Vec<f64> = points.iter().map(|p| p.value).collect();
    let ys: Vec<f64> = points.iter().map(SweepPoint::drop).collect();
    spearman(&xs, &ys)
}
