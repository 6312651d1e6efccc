use rand::Rng;

use super::ModelError;

/// Weights are row-major `classes x features`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub classes: usize,
    pub features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub version: u64,
}

impl DenseParams {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self { classes, features, weights: vec![0.0; classes * features], bias: vec![0.0; classes], version: 0 }
    }

    pub fn w(&self, class: usize, feature: usize) -> f64 {
        self.weights[class * self.features + feature]
    }

    pub fn same_shape(&self, other: &DenseParams) -> bool {
        self.classes == other.classes && self.features == other.features
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.weights.iter().chain(&self.bias).fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self - base`, elementwise. Version is taken from `self`.
    pub fn delta_from(&self, base: &DenseParams) -> Result<DenseParams, ModelError> {
        check_shape(base, self)?;
        Ok(DenseParams {
            classes: self.classes,
            features: self.features,
            weights: self.weights.iter().zip(&base.weights).map(|(a, b)| a - b).collect(),
            bias: self.bias.iter().zip(&base.bias).map(|(a, b)| a - b).collect(),
            version: self.version,
        })
    }

    /// `self + delta`, elementwise. Version is kept.
    pub fn plus(&self, delta: &DenseParams) -> Result<DenseParams, ModelError> {
        check_shape(self, delta)?;
        Ok(DenseParams {
            classes: self.classes,
            features: self.features,
            weights: self.weights.iter().zip(&delta.weights).map(|(a, b)| a + b).collect(),
            bias: self.bias.iter().zip(&delta.bias).map(|(a, b)| a + b).collect(),
            version: self.version,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|&v| v == 0.0)
    }
}

pub(super) fn check_shape(a: &DenseParams, b: &DenseParams) -> Result<(), ModelError> {
    if a.classes != b.classes {
        return Err(ModelError::DimensionMismatch { expected: a.classes, got: b.classes });
    }
    if a.features != b.features {
        return Err(ModelError::DimensionMismatch { expected: a.features, got: b.features });
    }
    Ok(())
}

/// Low-rank update `(alpha / rank) * B * A` on the weight matrix.
/// `a` is `rank x features`, `b` is `classes x rank`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub classes: usize,
    pub features: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

pub const LORA_INIT_RANGE: f64 = 0.01;

impl LoraAdapter {
    /// A uniform in (-0.01, 0.01), B zero.
    pub fn new<R: Rng + ?Sized>(
        classes: usize,
        features: usize,
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        Self::validate(rank, alpha, dropout)?;
        let a = (0..rank * features).map(|_| rng.gen_range(-LORA_INIT_RANGE..LORA_INIT_RANGE)).collect();
        Ok(Self { classes, features, rank, alpha, dropout, a, b: vec![0.0; classes * rank] })
    }

    pub fn validate(rank: usize, alpha: f64, dropout: f64) -> Result<(), ModelError> {
        if rank == 0 {
            return Err(ModelError::InvalidConfig("LoRA rank must be at least 1".into()));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(ModelError::InvalidConfig(format!("LoRA alpha must be positive, got {alpha}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(ModelError::InvalidConfig(format!("LoRA dropout must lie in [0, 1), got {dropout}")));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Dense `(alpha / rank) * B * A`, row-major `classes x features`.
    pub fn delta_weights(&self) -> Vec<f64> {
        let s = self.scaling();
        let mut out = vec![0.0; self.classes * self.features];
        for c in 0..self.classes {
            let row = &mut out[c * self.features..(c + 1) * self.features];
            for k in 0..self.rank {
                let bck = self.b[c * self.rank + k];
                if bck == 0.0 {
                    continue;
                }
                let a_row = &self.a[k * self.features..(k + 1) * self.features];
                for (o, &akj) in row.iter_mut().zip(a_row) {
                    *o += bck * akj;
                }
            }
            for o in row.iter_mut() {
                *o *= s;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(&self.b).all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.a.iter().chain(&self.b).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check_against(&self, params: &DenseParams) -> Result<(), ModelError> {
        if self.classes != params.classes {
            return Err(ModelError::DimensionMismatch { expected: params.classes, got: self.classes });
        }
        if self.features != params.features {
            return Err(ModelError::DimensionMismatch { expected: params.features, got: self.features });
        }
        Ok(())
    }
}

/// `W + (alpha / r) * B * A`, with the version bumped.
pub fn merge_adapter(params: &DenseParams, adapter: &LoraAdapter) -> Result<DenseParams, ModelError> {
    adapter.check_against(params)?;
    let delta = adapter.delta_weights();
    Ok(DenseParams {
        classes: params.classes,
        features: params.features,
        weights: params.weights.iter().zip(&delta).map(|(w, d)| w + d).collect(),
        bias: params.bias.clone(),
        version: params.version + 1,
    })
}

impl DenseParams {
    pub fn merge(&self, adapter: &LoraAdapter) -> Result<DenseParams, ModelError> {
        merge_adapter(self, adapter)
    }
}
