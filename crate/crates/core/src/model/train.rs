use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{grad, mean_loss, sgd_step, Direction};
use super::params::DenseParams;
use super::{ModelError, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.5, epochs: 5, batch_size: 8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(ModelError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Minibatch SGD on every parameter. Returns the trained parameters and the
/// full-set training loss after each epoch.
pub fn fit(
    params: &DenseParams,
    samples: &[Sample],
    config: &TrainConfig,
) -> Result<(DenseParams, Vec<f64>), ModelError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = params.clone();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i].clone()));
            let g = grad(&out, None, &batch, false, None)?;
            sgd_step(Some(&mut out), None, &g, config.learning_rate, Direction::Descent);
        }
        losses.push(mean_loss(&out, None, samples)?);
    }
    Ok((out, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{accuracy, SparseVec};

    fn separable() -> Vec<Sample> {
        (0..20)
            .map(|i| {
                let y = i % 2;
                let x = SparseVec::new(vec![y as u32, 2 + (i % 3) as u32], vec![0.8, 0.6]);
                Sample { x, y }
            })
            .collect()
    }

    #[test]
    fn separable_data_fits_perfectly() {
        let data = separable();
        let (p, losses) = fit(&DenseParams::zeros(2, 8), &data, &TrainConfig { epochs: 30, ..Default::default() }).unwrap();
        assert_eq!(accuracy(&p, None, &data).unwrap(), 1.0);
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn same_seed_same_result() {
        let data = separable();
        let cfg = TrainConfig { seed: 11, ..Default::default() };
        let a = fit(&DenseParams::zeros(2, 8), &data, &cfg).unwrap();
        let b = fit(&DenseParams::zeros(2, 8), &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        let data = separable();
        let zero = DenseParams::zeros(2, 8);
        assert!(fit(&zero, &data, &TrainConfig { learning_rate: 0.0, ..Default::default() }).is_err());
        assert!(fit(&zero, &data, &TrainConfig { epochs: 0, ..Default::default() }).is_err());
        assert_eq!(fit(&zero, &[], &TrainConfig::default()).unwrap_err(), ModelError::EmptyDataset);
    }
}
