//! World-state transitions. Every committed payload is applied through
//! [`apply_payload`], both live and during replay.

use std::collections::BTreeMap;

use crate::digest::{CanonicalEncoder, Hash32};

use super::tx::{Payload, UpdateScope};

pub type WorldState = BTreeMap<String, String>;

pub const GLOBAL_MODEL_VERSION: &str = "global_model_version";
pub const GLOBAL_MODEL_DIGEST: &str = "global_model_digest";
pub const GLOBAL_MODEL_REF: &str = "global_model_ref";
pub const PRIVATE_MODEL_VERSION: &str = "private_model_version";
pub const PRIVATE_MODEL_DIGEST: &str = "private_model_digest";
const PRIVATE_MODEL_REF: &str = "private_model_ref";

fn version(state: &WorldState, key: &str) -> u64 {
    state.get(key).and_then(|v| v.parse().ok()).unwrap_or(0)
}

fn insert_new(state: &mut WorldState, key: String, value: String) -> Result<(), String> {
    if state.contains_key(&key) {
        return Err(format!("key {key} already set"));
    }
    state.insert(key, value);
    Ok(())
}

/// Validates `payload` against `state` and applies it. On error the state is
/// unchanged.
pub fn apply_payload(state: &mut WorldState, payload: &Payload) -> Result<(), String> {
    match payload {
        Payload::ModelUpdate(m) => {
            if m.org.is_empty() || m.participant.is_empty() {
                return Err("model update without org or participant".into());
            }
            match m.scope {
                UpdateScope::Global => {
                    let current = version(state, GLOBAL_MODEL_VERSION);
                    if m.model_version <= current {
                        return Err(format!("global version {} does not exceed {current}", m.model_version));
                    }
                    for d in &m.integrated_deltas {
                        let key = format!("unlearn/{d}");
                        if !state.contains_key(&key) {
                            return Err(format!("integrated delta {} was never verified", d.short()));
                        }
                    }
                    insert_new(state, format!("global/v{}", m.model_version), m.params_digest.to_hex())?;
                    state.insert(GLOBAL_MODEL_VERSION.into(), m.model_version.to_string());
                    state.insert(GLOBAL_MODEL_DIGEST.into(), m.params_digest.to_hex());
                    state.insert(GLOBAL_MODEL_REF.into(), m.checkpoint_ref.clone());
                    for d in &m.integrated_deltas {
                        state.insert(format!("unlearn/{d}/integrated"), m.model_version.to_string());
                    }
                }
                UpdateScope::Private => {
                    let current = version(state, PRIVATE_MODEL_VERSION);
                    if m.model_version <= current {
                        return Err(format!("private version {} does not exceed {current}", m.model_version));
                    }
                    insert_new(state, format!("private/v{}", m.model_version), m.params_digest.to_hex())?;
                    state.insert(PRIVATE_MODEL_VERSION.into(), m.model_version.to_string());
                    state.insert(PRIVATE_MODEL_DIGEST.into(), m.params_digest.to_hex());
                    state.insert(PRIVATE_MODEL_REF.into(), m.checkpoint_ref.clone());
                }
                UpdateScope::Submission => {
                    if m.n_samples == 0 {
                        return Err("submission with zero samples".into());
                    }
                    let key = format!("submission/{}/{}", m.round, m.org);
                    insert_new(state, key, format!("{}:{}", m.params_digest, m.n_samples))?;
                }
                UpdateScope::Local => {
                    let key = format!("local/{}/{}", m.round, m.participant);
                    insert_new(state, key, format!("{}:{}", m.params_digest, m.n_samples))?;
                }
            }
        }
        Payload::UnlearnResult(u) => {
            let metrics = [
                u.forget_acc_before,
                u.forget_acc_after,
                u.retain_acc_before,
                u.retain_acc_after,
                u.val_loss_after,
                u.tau_forget,
                u.tau_retain,
            ];
            if metrics.iter().any(|m| !m.is_finite()) {
                return Err("non-finite unlearning metric".into());
            }
            if u.base_model_version > version(state, GLOBAL_MODEL_VERSION) {
                return Err(format!("unknown base model version {}", u.base_model_version));
            }
            insert_new(
                state,
                format!("unlearn/{}", u.delta_digest),
                format!(
                    "org={};base={};forget={};retain={}",
                    u.org, u.base_model_version, u.forget_acc_after, u.retain_acc_after
                ),
            )?;
            state.insert(format!("unlearn/{}/latest", u.org), u.delta_digest.to_hex());
        }
        Payload::Registration(r) => {
            if r.name.is_empty() {
                return Err("registration without a name".into());
            }
            insert_new(state, format!("entity/{}", r.name), format!("{}:{}:{}", r.role, r.org, r.public_key))?;
        }
        Payload::Config(c) => {
            if c.key.is_empty() {
                return Err("config event with empty key".into());
            }
            state.insert(c.key.clone(), c.value.clone());
        }
    }
    Ok(())
}

/// Digest over the sorted key/value pairs.
pub fn state_digest(state: &WorldState) -> Hash32 {
    let mut enc = CanonicalEncoder::new();
    enc.u64(state.len() as u64);
    for (k, v) in state {
        enc.str(k).str(v);
    }
    enc.digest()
}
