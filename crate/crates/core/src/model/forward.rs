use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use super::params::{DenseParams, LoraAdapter};
use super::{ModelError, Sample, SparseVec};

/// Probabilities are clamped to this before taking the log.
pub const LOSS_FLOOR: f64 = 1e-12;

fn check_input(params: &DenseParams, adapter: Option<&LoraAdapter>, x: &SparseVec) -> Result<(), ModelError> {
    if x.min_dims() > params.features {
        return Err(ModelError::DimensionMismatch { expected: params.features, got: x.min_dims() });
    }
    if let Some(ad) = adapter {
        ad.check_against(params)?;
    }
    Ok(())
}

/// Inverted-dropout factors for the nonzero entries of `x`.
fn draw_mask(x: &SparseVec, p: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    x.values.iter().map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

struct Activations {
    probs: Vec<f64>,
    /// Adapter input after dropout, aligned with the nonzeros of `x`.
    x_drop: Vec<f64>,
    /// `A * x_drop`.
    h: Vec<f64>,
}

fn activations(params: &DenseParams, adapter: Option<&LoraAdapter>, x: &SparseVec, mask: Option<&[f64]>) -> Activations {
    let mut z = params.bias.clone();
    for (c, zc) in z.iter_mut().enumerate() {
        let row = &params.weights[c * params.features..(c + 1) * params.features];
        for (j, v) in x.iter() {
            *zc += row[j] * v;
        }
    }
    let mut x_drop = Vec::new();
    let mut h = Vec::new();
    if let Some(ad) = adapter {
        x_drop = match mask {
            Some(m) => x.values.iter().zip(m).map(|(v, f)| v * f).collect(),
            None => x.values.clone(),
        };
        h = vec![0.0; ad.rank];
        for (k, hk) in h.iter_mut().enumerate() {
            let a_row = &ad.a[k * ad.features..(k + 1) * ad.features];
            for (&j, &v) in x.indices.iter().zip(&x_drop) {
                *hk += a_row[j as usize] * v;
            }
        }
        let s = ad.scaling();
        for (c, zc) in z.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, hk) in h.iter().enumerate() {
                acc += ad.b[c * ad.rank + k] * hk;
            }
            *zc += s * acc;
        }
    }
    softmax_in_place(&mut z);
    Activations { probs: z, x_drop, h }
}

fn sample_mask(adapter: Option<&LoraAdapter>, x: &SparseVec, rng: &mut Option<&mut dyn RngCore>) -> Option<Vec<f64>> {
    match (adapter, rng.as_deref_mut()) {
        (Some(ad), Some(r)) if ad.dropout > 0.0 => Some(draw_mask(x, ad.dropout, r)),
        _ => None,
    }
}

/// Class probabilities. Passing an rng selects training mode, in which
/// dropout is applied to the adapter input.
pub fn forward(
    params: &DenseParams,
    adapter: Option<&LoraAdapter>,
    x: &SparseVec,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Vec<f64>, ModelError> {
    check_input(params, adapter, x)?;
    let mask = sample_mask(adapter, x, &mut rng);
    Ok(activations(params, adapter, x, mask.as_deref()).probs)
}

pub fn nll_loss(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(LOSS_FLOOR).ln()
}

/// Mean NLL over `batch`, drawing dropout masks exactly as [`grad`] does.
pub fn batch_loss(
    params: &DenseParams,
    adapter: Option<&LoraAdapter>,
    batch: &[Sample],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut total = 0.0;
    for s in batch {
        check_input(params, adapter, &s.x)?;
        check_label(params, s.y)?;
        let mask = sample_mask(adapter, &s.x, &mut rng);
        total += nll_loss(&activations(params, adapter, &s.x, mask.as_deref()).probs, s.y);
    }
    Ok(total / batch.len() as f64)
}

/// Evaluation-mode mean NLL.
pub fn mean_loss(params: &DenseParams, adapter: Option<&LoraAdapter>, samples: &[Sample]) -> Result<f64, ModelError> {
    batch_loss(params, adapter, samples, None)
}

fn check_label(params: &DenseParams, y: usize) -> Result<(), ModelError> {
    if y >= params.classes {
        return Err(ModelError::DimensionMismatch { expected: params.classes, got: y + 1 });
    }
    Ok(())
}

/// Column-sparse gradient of a `rows x features` matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseGrad {
    pub rows: usize,
    pub columns: BTreeMap<u32, Vec<f64>>,
}

impl SparseGrad {
    fn new(rows: usize) -> Self {
        Self { rows, columns: BTreeMap::new() }
    }

    fn column(&mut self, j: u32) -> &mut Vec<f64> {
        let rows = self.rows;
        self.columns.entry(j).or_insert_with(|| vec![0.0; rows])
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.columns.values().flatten()
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.columns.values_mut().flatten()
    }

    /// Dense row-major `rows x features` copy.
    pub fn to_dense(&self, features: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * features];
        for (&j, col) in &self.columns {
            for (r, v) in col.iter().enumerate() {
                out[r * features + j as usize] = *v;
            }
        }
        out
    }
}

/// Gradients of the trainable tensors; `None` marks a frozen tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub weights: Option<SparseGrad>,
    pub bias: Option<Vec<f64>>,
    pub a: Option<SparseGrad>,
    pub b: Option<Vec<f64>>,
}

impl Gradients {
    fn values(&self) -> impl Iterator<Item = &f64> {
        let w = self.weights.iter().flat_map(SparseGrad::values);
        let a = self.a.iter().flat_map(SparseGrad::values);
        w.chain(self.bias.iter().flatten()).chain(a).chain(self.b.iter().flatten())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        let w = self.weights.iter_mut().flat_map(SparseGrad::values_mut);
        let a = self.a.iter_mut().flat_map(SparseGrad::values_mut);
        for v in w.chain(self.bias.iter_mut().flatten()).chain(a).chain(self.b.iter_mut().flatten()) {
            *v *= factor;
        }
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Analytic gradient of the mean NLL over `batch`. With an adapter and
/// `frozen_base`, only A and B receive gradients.
pub fn grad(
    params: &DenseParams,
    adapter: Option<&LoraAdapter>,
    batch: &[Sample],
    frozen_base: bool,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Gradients, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let train_base = adapter.is_none() || !frozen_base;
    let classes = params.classes;
    let mut gw = SparseGrad::new(classes);
    let mut gbias = vec![0.0; classes];
    let mut ga = adapter.map(|ad| SparseGrad::new(ad.rank));
    let mut gb = adapter.map(|ad| vec![0.0; classes * ad.rank]);
    let inv_n = 1.0 / batch.len() as f64;

    for s in batch {
        check_input(params, adapter, &s.x)?;
        check_label(params, s.y)?;
        let mask = sample_mask(adapter, &s.x, &mut rng);
        let act = activations(params, adapter, &s.x, mask.as_deref());
        let mut dz = act.probs;
        dz[s.y] -= 1.0;
        for v in dz.iter_mut() {
            *v *= inv_n;
        }

        if train_base {
            for (&j, &v) in s.x.indices.iter().zip(&s.x.values) {
                for (g, d) in gw.column(j).iter_mut().zip(&dz) {
                    *g += d * v;
                }
            }
            for (g, d) in gbias.iter_mut().zip(&dz) {
                *g += d;
            }
        }
        if let (Some(ad), Some(ga), Some(gb)) = (adapter, ga.as_mut(), gb.as_mut()) {
            let sc = ad.scaling();
            let r = ad.rank;
            for c in 0..classes {
                for k in 0..r {
                    gb[c * r + k] += sc * dz[c] * act.h[k];
                }
            }
            let mut back = vec![0.0; r];
            for (k, bk) in back.iter_mut().enumerate() {
                for c in 0..classes {
                    *bk += ad.b[c * r + k] * dz[c];
                }
                *bk *= sc;
            }
            if back.iter().any(|&v| v != 0.0) {
                for (&j, &xd) in s.x.indices.iter().zip(&act.x_drop) {
                    for (g, bk) in ga.column(j).iter_mut().zip(&back) {
                        *g += bk * xd;
                    }
                }
            }
        }
    }

    Ok(Gradients {
        weights: train_base.then_some(gw),
        bias: train_base.then_some(gbias),
        a: ga,
        b: gb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Ordinary learning, sign +1.
    Descent,
    /// Gradient ascent, sign -1.
    Ascent,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Descent => 1.0,
            Direction::Ascent => -1.0,
        }
    }
}

/// `tensor -= sign * lr * gradient` for every supplied tensor that has a gradient.
pub fn sgd_step(
    params: Option<&mut DenseParams>,
    adapter: Option<&mut LoraAdapter>,
    grads: &Gradients,
    lr: f64,
    direction: Direction,
) {
    let step = direction.sign() * lr;
    if let Some(params) = params {
        if let Some(gw) = &grads.weights {
            for (&j, col) in &gw.columns {
                for (c, g) in col.iter().enumerate() {
                    params.weights[c * params.features + j as usize] -= step * g;
                }
            }
        }
        if let Some(gbias) = &grads.bias {
            for (b, g) in params.bias.iter_mut().zip(gbias) {
                *b -= step * g;
            }
        }
    }
    if let Some(ad) = adapter {
        if let Some(ga) = &grads.a {
            for (&j, col) in &ga.columns {
                for (k, g) in col.iter().enumerate() {
                    ad.a[k * ad.features + j as usize] -= step * g;
                }
            }
        }
        if let Some(gb) = &grads.b {
            for (b, g) in ad.b.iter_mut().zip(gb) {
                *b -= step * g;
            }
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(params: &DenseParams, adapter: Option<&LoraAdapter>, samples: &[Sample]) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut correct = 0usize;
    for s in samples {
        if argmax(&forward(params, adapter, &s.x, None)?) == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sv(pairs: &[(u32, f64)]) -> SparseVec {
        SparseVec::new(pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = forward(&DenseParams::zeros(2, 4), None, &sv(&[(1, 1.0)]), None).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn out_of_range_feature() {
        let err = forward(&DenseParams::zeros(2, 4), None, &sv(&[(4, 1.0)]), None).unwrap_err();
        assert_eq!(err, ModelError::DimensionMismatch { expected: 4, got: 5 });
    }

    #[test]
    fn nll_values() {
        assert_eq!(nll_loss(&[0.0, 1.0], 1), 0.0);
        assert!((nll_loss(&[0.5, 0.5], 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(nll_loss(&[1.0, 0.0], 1), -(1e-12f64).ln());
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = DenseParams::zeros(3, 6);
        params.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        params.bias.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        let mut ad = LoraAdapter::new(3, 6, 2, 3.0, 0.0, &mut rng).unwrap();
        ad.b.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        let x = sv(&[(0, 0.3), (2, -0.7), (5, 1.1)]);

        let merged = params.merge(&ad).unwrap();
        let xd = x.to_dense(6);
        let mut z: Vec<f64> =
            (0..3).map(|c| merged.bias[c] + (0..6).map(|j| merged.w(c, j) * xd[j]).sum::<f64>()).collect();
        let m = z.iter().copied().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter_mut().map(|v| (*v - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        let p = forward(&params, Some(&ad), &x, None).unwrap();
        for c in 0..3 {
            assert!((p[c] - e[c] / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_scalar_example() {
        let mut params = DenseParams::zeros(1, 1);
        params.weights[0] = 1.0;
        let mut g = SparseGrad::new(1);
        g.column(0)[0] = 2.0;
        let grads = Gradients { weights: Some(g), ..Default::default() };
        let mut p = params.clone();
        sgd_step(Some(&mut p), None, &grads, 0.1, Direction::Descent);
        assert!((p.weights[0] - 0.8).abs() < 1e-15);
        sgd_step(Some(&mut p), None, &grads, 0.1, Direction::Ascent);
        assert!((p.weights[0] - 1.0).abs() < 1e-15);
        let mut q = params.clone();
        sgd_step(Some(&mut q), None, &grads, 0.0, Direction::Descent);
        assert_eq!(q, params);
    }

    #[test]
    fn frozen_base_only_touches_adapter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = DenseParams::zeros(2, 3);
        let ad = LoraAdapter::new(2, 3, 2, 2.0, 0.0, &mut rng).unwrap();
        let batch = [Sample { x: sv(&[(1, 1.0)]), y: 0 }];
        let g = grad(&params, Some(&ad), &batch, true, None).unwrap();
        assert!(g.weights.is_none() && g.bias.is_none());
        assert!(g.a.is_some() && g.b.is_some());
    }

    #[test]
    fn duplicated_rows_give_same_gradient() {
        let mut params = DenseParams::zeros(2, 3);
        params.weights = vec![0.2, -0.1, 0.4, 0.0, 0.3, -0.5];
        let one = [Sample { x: sv(&[(0, 0.6), (2, 0.8)]), y: 1 }];
        let two = [one[0].clone(), one[0].clone()];
        let g1 = grad(&params, None, &one, false, None).unwrap();
        let g2 = grad(&params, None, &two, false, None).unwrap();
        let d1 = g1.weights.unwrap().to_dense(3);
        let d2 = g2.weights.unwrap().to_dense(3);
        for (a, b) in d1.iter().zip(&d2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn near_perfect_fit_has_tiny_gradient() {
        let mut params = DenseParams::zeros(2, 2);
        params.weights = vec![-40.0, 0.0, 40.0, 0.0];
        let batch = [Sample { x: sv(&[(0, 1.0)]), y: 1 }];
        assert!(grad(&params, None, &batch, false, None).unwrap().norm() <= 1e-9);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn accuracy_cases() {
        let params = DenseParams::zeros(2, 2);
        let s = |y| Sample { x: sv(&[(0, 1.0)]), y };
        assert_eq!(accuracy(&params, None, &[s(0)]).unwrap(), 1.0);
        assert_eq!(accuracy(&params, None, &[s(0), s(1)]).unwrap(), 0.5);
        assert_eq!(accuracy(&params, None, &[]).unwrap_err(), ModelError::EmptyDataset);
    }

    #[test]
    fn dropout_masks_follow_the_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = DenseParams::zeros(2, 8);
        let mut ad = LoraAdapter::new(2, 8, 2, 2.0, 0.5, &mut rng).unwrap();
        ad.b = vec![1.0, -1.0, 0.5, 2.0];
        let x = sv(&[(0, 0.5), (3, 0.5), (5, 0.5), (7, 0.5)]);
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            forward(&params, Some(&ad), &x, Some(&mut r)).unwrap()
        };
        assert_eq!(run(1), run(1));
        let eval = forward(&params, Some(&ad), &x, None).unwrap();
        assert!((0..20).any(|s| run(s) != eval));
    }
}
