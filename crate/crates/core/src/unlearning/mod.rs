//! LoRA-based forgetting and on-chain verification of the result.
//!
//! [`unlearn_lora`] freezes the global model and runs gradient ascent on the
//! forget-set loss through a fresh adapter. [`verify_and_submit`] checks the
//! resulting delta against the acceptance thresholds and, if it passes,
//! records it on the public ledger and stores the raw delta in the
//! requesting organization's private collection.

pub mod sweep;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainError, Ledger, Payload, PrivateDataCollection, UnlearnRecord};
use crate::digest::Hash32;
use crate::identity::{AuthToken, Registry};
use crate::model::{
    accuracy, fit, grad, mean_loss, params_digest, sgd_step, write_checkpoint, DenseParams, Direction, LoraAdapter,
    ModelError, Sample, TrainConfig,
};

/// Parameters beyond this magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 8.0, dropout: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub lora: LoraConfig,
    pub batch_size: usize,
    /// Global gradient-norm clip applied to every ascent step.
    pub max_grad_norm: Option<f64>,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, epochs: 20, lora: LoraConfig::default(), batch_size: 1, max_grad_norm: Some(1.0) }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<(), UnlearnError> {
        let bad = |m: String| Err(UnlearnError::Model(ModelError::InvalidConfig(m)));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("unlearning epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if let Some(m) = self.max_grad_norm {
            if !(m.is_finite() && m > 0.0) {
                return bad(format!("max_grad_norm must be positive, got {m}"));
            }
        }
        LoraAdapter::validate(self.lora.rank, self.lora.alpha, self.lora.dropout)?;
        Ok(())
    }
}

/// Thresholds a result must meet: forget-set accuracy at most `tau_forget`,
/// and retain accuracy dropping by at most `tau_retain` percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationCriteria {
    pub tau_forget: f64,
    pub tau_retain: f64,
}

impl Default for VerificationCriteria {
    fn default() -> Self {
        Self { tau_forget: 0.15, tau_retain: 5.0 }
    }
}

impl VerificationCriteria {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.tau_forget) {
            return Err(format!("tau_forget must lie in [0, 1], got {}", self.tau_forget));
        }
        if !(self.tau_retain.is_finite() && self.tau_retain >= 0.0) {
            return Err(format!("tau_retain must be non-negative, got {}", self.tau_retain));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnRequest {
    pub org: String,
    pub forget: Vec<Sample>,
    pub config: UnlearnConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnResult {
    pub org: String,
    pub base_version: u64,
    /// `(alpha / r) * B * A` on the weights; the bias delta is zero.
    pub params_delta: DenseParams,
    pub local: DenseParams,
    pub forget_acc_before: f64,
    pub forget_acc_after: f64,
    pub forget_loss_before: f64,
    pub forget_loss_after: f64,
    pub tx_id: Option<Hash32>,
}

impl UnlearnResult {
    pub fn delta_digest(&self) -> Hash32 {
        params_digest(&self.params_delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationMetrics {
    pub forget_acc_before: f64,
    pub forget_acc_after: f64,
    pub retain_acc_before: f64,
    pub retain_acc_after: f64,
    pub val_loss_before: f64,
    pub val_loss_after: f64,
}

impl VerificationMetrics {
    /// Retain accuracy drop in percentage points.
    pub fn retain_drop_points(&self) -> f64 {
        (self.retain_acc_before - self.retain_acc_after) * 100.0
    }

    pub fn meets(&self, criteria: &VerificationCriteria) -> bool {
        self.forget_acc_after <= criteria.tau_forget && self.retain_drop_points() <= criteria.tau_retain
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnlearnError {
    #[error("forget set is empty")]
    EmptyForgetSet,
    #[error("unlearning diverged in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("Agent identity check failed")]
    TokenInvalid,
    #[error(
        "verification criteria not met: forget accuracy {:.4} (limit {:.4}), retain drop {:.2} points (limit {:.2})",
        metrics.forget_acc_after, criteria.tau_forget, metrics.retain_drop_points(), criteria.tau_retain
    )]
    CriteriaNotMet { metrics: VerificationMetrics, criteria: VerificationCriteria },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

fn delta_of(adapter: &LoraAdapter, base: &DenseParams) -> DenseParams {
    DenseParams {
        classes: base.classes,
        features: base.features,
        weights: adapter.delta_weights(),
        bias: vec![0.0; base.classes],
        version: base.version,
    }
}

/// Gradient ascent on the forget-set loss through a fresh adapter on the
/// frozen global model.
pub fn unlearn_lora(global: &DenseParams, request: &UnlearnRequest) -> Result<UnlearnResult, UnlearnError> {
    if request.forget.is_empty() {
        return Err(UnlearnError::EmptyForgetSet);
    }
    let cfg = &request.config;
    cfg.validate()?;
    let forget_acc_before = accuracy(global, None, &request.forget)?;
    let forget_loss_before = mean_loss(global, None, &request.forget)?;

    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let mut adapter =
        LoraAdapter::new(global.classes, global.features, cfg.lora.rank, cfg.lora.alpha, cfg.lora.dropout, &mut rng)?;
    let mut order: Vec<usize> = (0..request.forget.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| request.forget[i].clone()));
            let mut g = grad(global, Some(&adapter), &batch, true, Some(&mut rng))?;
            if let Some(max) = cfg.max_grad_norm {
                g.clip_norm(max);
            }
            sgd_step(None, Some(&mut adapter), &g, cfg.learning_rate, Direction::Ascent);
        }
        if !adapter.is_finite() {
            return Err(UnlearnError::Divergence { epoch });
        }
        let delta = delta_of(&adapter, global);
        let local = global.plus(&delta)?;
        if !local.is_finite() || local.max_abs() > DIVERGENCE_LIMIT || adapter.max_abs() > DIVERGENCE_LIMIT {
            return Err(UnlearnError::Divergence { epoch });
        }
    }

    let params_delta = delta_of(&adapter, global);
    let local = global.plus(&params_delta)?;
    Ok(UnlearnResult {
        org: request.org.clone(),
        base_version: global.version,
        forget_acc_after: accuracy(&local, None, &request.forget)?,
        forget_loss_after: mean_loss(&local, None, &request.forget)?,
        params_delta,
        local,
        forget_acc_before,
        forget_loss_before,
        tx_id: None,
    })
}

/// Metrics of `global + delta` against the forget and validation sets.
pub fn evaluate(
    global: &DenseParams,
    result: &UnlearnResult,
    forget: &[Sample],
    validation: &[Sample],
) -> Result<VerificationMetrics, UnlearnError> {
    if forget.is_empty() {
        return Err(UnlearnError::EmptyForgetSet);
    }
    let updated = global.plus(&result.params_delta)?;
    Ok(VerificationMetrics {
        forget_acc_before: accuracy(global, None, forget)?,
        forget_acc_after: accuracy(&updated, None, forget)?,
        retain_acc_before: accuracy(global, None, validation)?,
        retain_acc_after: accuracy(&updated, None, validation)?,
        val_loss_before: mean_loss(global, None, validation)?,
        val_loss_after: mean_loss(&updated, None, validation)?,
    })
}

/// Where an accepted result is recorded.
pub struct SubmitTarget<'a> {
    pub registry: &'a Registry,
    pub public: &'a mut Ledger,
    /// The requesting organization's private collection for the raw delta.
    pub collection: Option<&'a mut PrivateDataCollection>,
    pub now: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub tx_id: Hash32,
    pub delta_digest: Hash32,
    pub metrics: VerificationMetrics,
}

/// Checks the agent's token, evaluates `global + delta`, and commits an
/// unlearn-result transaction when the criteria hold. Rejections leave every
/// ledger untouched.
pub fn verify_and_submit(
    result: &mut UnlearnResult,
    global: &DenseParams,
    forget: &[Sample],
    validation: &[Sample],
    criteria: &VerificationCriteria,
    token: &AuthToken,
    target: SubmitTarget<'_>,
) -> Result<Submission, UnlearnError> {
    let claims = target.registry.validate_token(token, target.now).map_err(|_| UnlearnError::TokenInvalid)?;
    if claims.org != result.org {
        return Err(UnlearnError::TokenInvalid);
    }
    if let Some(pdc) = &target.collection {
        if !pdc.is_member(&result.org) {
            return Err(ChainError::AccessDenied(result.org.clone()).into());
        }
    }
    let metrics = evaluate(global, result, forget, validation)?;
    if !metrics.meets(criteria) {
        return Err(UnlearnError::CriteriaNotMet { metrics, criteria: *criteria });
    }

    let delta_digest = result.delta_digest();
    let payload = Payload::UnlearnResult(UnlearnRecord {
        org: result.org.clone(),
        delta_digest,
        base_model_version: result.base_version,
        forget_acc_before: metrics.forget_acc_before,
        forget_acc_after: metrics.forget_acc_after,
        retain_acc_before: metrics.retain_acc_before,
        retain_acc_after: metrics.retain_acc_after,
        val_loss_after: metrics.val_loss_after,
        tau_forget: criteria.tau_forget,
        tau_retain: criteria.tau_retain,
    });
    let tx_id = target.public.submit(target.registry, &claims.sub, payload, target.now)?;
    if let Some(pdc) = target.collection {
        pdc.put(&result.org, &delta_key(&delta_digest), write_checkpoint(&result.params_delta, None), target.registry)?;
    }
    result.tx_id = Some(tx_id);
    Ok(Submission { tx_id, delta_digest, metrics })
}

/// Collection key under which a verified delta's checkpoint is stored.
pub fn delta_key(digest: &Hash32) -> String {
    format!("unlearn/{digest}")
}

/// A fresh model trained only on retained data.
pub fn retrain_oracle(
    retain: &[Sample],
    classes: usize,
    features: usize,
    config: &TrainConfig,
) -> Result<DenseParams, ModelError> {
    fit(&DenseParams::zeros(classes, features), retain, config).map(|(p, _)| p)
}
