//! Local training, sample-weighted aggregation on private chains and on the
//! public chain, and the global model lifecycle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Action;
use crate::chain::{
    AggregateInput, ChainError, ConfigEvent, EndorsementPolicy, Ledger, ModelUpdate, Payload, PrivateDataCollection,
    UpdateScope, GLOBAL_MODEL_VERSION,
};
use crate::digest::Hash32;
use crate::identity::{AuthToken, Registry, Role, TokenClaims};
use crate::model::{fit, params_digest, DenseParams, ModelError, Sample, TrainConfig};

pub const DEFAULT_PRIVATE_CHAIN_THRESHOLD: usize = 1000;
/// Name of the collection holding an organization's raw unlearning deltas.
pub const DELTA_COLLECTION: &str = "deltas";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FederationError {
    #[error("{0}")]
    TokenInvalid(String),
    #[error("{org} holds {samples} samples, below the private chain threshold {threshold}")]
    BelowThreshold { org: String, samples: usize, threshold: usize },
    #[error("local dataset is empty")]
    EmptyDataset,
    #[error("no updates to aggregate")]
    EmptyUpdateSet,
    #[error("update from {origin} does not match the shape of the others")]
    ShapeMismatch { origin: String },
    #[error("updates carry zero total samples")]
    ZeroWeight,
    #[error("epoch {completed} of {required} reached; aggregation not due")]
    EpochNotReached { completed: usize, required: usize },
    #[error("no submissions for round {round}")]
    NoSubmissions { round: u64 },
    #[error("submission from {0} does not match the public ledger")]
    UnrecordedSubmission(String),
    #[error("{0} has no registered agents")]
    NoAgents(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_token(registry: &Registry, token: &AuthToken, now: u64) -> Result<TokenClaims, FederationError> {
    registry.validate_token(token, now).map_err(|e| FederationError::TokenInvalid(e.to_string()))
}

pub fn checkpoint_ref(digest: &Hash32) -> String {
    format!("model/{digest}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrgState {
    pub org: String,
    pub samples: Vec<Sample>,
    pub params: DenseParams,
    pub private_chain: Option<String>,
}

impl OrgState {
    pub fn n(&self) -> usize {
        self.samples.len()
    }
}

/// A set of parameters and the number of samples behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedUpdate {
    pub source: String,
    pub params: DenseParams,
    pub n_samples: u64,
}

impl WeightedUpdate {
    pub fn input(&self) -> AggregateInput {
        AggregateInput { source: self.source.clone(), digest: params_digest(&self.params), n_samples: self.n_samples }
    }
}

/// Sample-weighted mean `sum (n_i / N) theta_i`, summed in source order as
/// `theta_1 + sum (n_i / N)(theta_i - theta_1)`. The result carries the
/// largest input version.
pub fn fedavg(updates: &[WeightedUpdate]) -> Result<DenseParams, FederationError> {
    let mut sorted: Vec<&WeightedUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.source.cmp(&b.source));
    let first = sorted.first().ok_or(FederationError::EmptyUpdateSet)?;
    if let Some(bad) = sorted.iter().find(|u| !u.params.same_shape(&first.params)) {
        return Err(FederationError::ShapeMismatch { origin: bad.source.clone() });
    }
    let total: u64 = sorted.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(FederationError::ZeroWeight);
    }
    let base = &first.params;
    let mut out = base.clone();
    out.version = sorted.iter().map(|u| u.params.version).max().unwrap_or(0);
    for u in &sorted[1..] {
        let w = u.n_samples as f64 / total as f64;
        for (o, (x, b)) in out.weights.iter_mut().zip(u.params.weights.iter().zip(&base.weights)) {
            *o += w * (x - b);
        }
        for (o, (x, b)) in out.bias.iter_mut().zip(u.params.bias.iter().zip(&base.bias)) {
            *o += w * (x - b);
        }
    }
    Ok(out)
}

/// Local epochs an action runs: all, half rounded up, or none.
pub fn epochs_for(action: Action, configured: usize) -> usize {
    match action {
        Action::FullTrain => configured,
        Action::PartialTrain => configured.div_ceil(2),
        Action::Abstain => 0,
    }
}

/// Trains `params_in` on local data for the epochs the action allows.
/// Returns the new parameters and the per-epoch training loss.
pub fn local_train(
    samples: &[Sample],
    params_in: &DenseParams,
    config: &TrainConfig,
    action: Action,
) -> Result<(DenseParams, Vec<f64>), FederationError> {
    if samples.is_empty() {
        return Err(FederationError::EmptyDataset);
    }
    let epochs = epochs_for(action, config.epochs);
    if epochs == 0 {
        return Ok((params_in.clone(), Vec::new()));
    }
    Ok(fit(params_in, samples, &TrainConfig { epochs, ..*config })?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub tx_id: Hash32,
    pub version: u64,
    pub digest: Hash32,
}

/// Records the initial global model on the public chain.
pub fn upload_global(
    registry: &Registry,
    token: &AuthToken,
    params: &DenseParams,
    public: &mut Ledger,
    now: u64,
) -> Result<Receipt, FederationError> {
    let claims = check_token(registry, token, now)?;
    let digest = params_digest(params);
    let payload = Payload::ModelUpdate(ModelUpdate {
        org: claims.org,
        participant: claims.sub.clone(),
        scope: UpdateScope::Global,
        round: 0,
        params_digest: digest,
        n_samples: 0,
        checkpoint_ref: checkpoint_ref(&digest),
        model_version: params.version,
        inputs: Vec::new(),
        integrated_deltas: Vec::new(),
    });
    let tx_id = public.submit(registry, &claims.sub, payload, now)?;
    Ok(Receipt { tx_id, version: params.version, digest })
}

/// An organization's private chain and its current private model.
#[derive(Debug, Clone)]
pub struct PrivateChain {
    pub org: String,
    pub ledger: Ledger,
    pub model: DenseParams,
    pub agents: Vec<String>,
    steps: u64,
}

impl PrivateChain {
    pub fn channel_id(org: &str) -> String {
        format!("private-{org}")
    }

    /// Private aggregation steps committed so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn deltas(&self) -> &PrivateDataCollection {
        self.ledger.collection(DELTA_COLLECTION).expect("created with the chain")
    }

    pub fn deltas_mut(&mut self) -> &mut PrivateDataCollection {
        self.ledger.collection_mut(DELTA_COLLECTION).expect("created with the chain")
    }

    fn commit_model(
        &mut self,
        registry: &Registry,
        proposer: &str,
        model: DenseParams,
        inputs: Vec<AggregateInput>,
        now: u64,
    ) -> Result<Hash32, FederationError> {
        let digest = params_digest(&model);
        let n_samples = inputs.iter().map(|i| i.n_samples).sum();
        let payload = Payload::ModelUpdate(ModelUpdate {
            org: self.org.clone(),
            participant: proposer.to_string(),
            scope: UpdateScope::Private,
            round: self.steps,
            params_digest: digest,
            n_samples,
            checkpoint_ref: checkpoint_ref(&digest),
            model_version: self.steps + 1,
            inputs,
            integrated_deltas: Vec::new(),
        });
        let id = self.ledger.submit(registry, proposer, payload, now)?;
        self.steps += 1;
        self.model = model;
        Ok(id)
    }

    /// Replaces the private model with a copy of the global model.
    pub fn adopt_global(
        &mut self,
        registry: &Registry,
        proposer: &str,
        global: &DenseParams,
        now: u64,
    ) -> Result<Hash32, FederationError> {
        let seed = AggregateInput { source: "global".into(), digest: params_digest(global), n_samples: 0 };
        self.commit_model(registry, proposer, global.clone(), vec![seed], now)
    }

    /// Records each member's update and their weighted mean as the new
    /// private model.
    pub fn aggregate_epoch(
        &mut self,
        registry: &Registry,
        updates: &[WeightedUpdate],
        now: u64,
    ) -> Result<Hash32, FederationError> {
        let model = fedavg(updates)?;
        let mut locals = Vec::with_capacity(updates.len());
        for u in updates {
            let digest = params_digest(&u.params);
            locals.push((
                u.source.clone(),
                Payload::ModelUpdate(ModelUpdate {
                    org: self.org.clone(),
                    participant: u.source.clone(),
                    scope: UpdateScope::Local,
                    round: self.steps,
                    params_digest: digest,
                    n_samples: u.n_samples,
                    checkpoint_ref: checkpoint_ref(&digest),
                    model_version: u.params.version,
                    inputs: Vec::new(),
                    integrated_deltas: Vec::new(),
                }),
            ));
        }
        let outcome = self.ledger.submit_batch(registry, locals, now)?;
        if !outcome.rejected.is_empty() {
            return Err(ChainError::ValidationFailed(outcome.rejected).into());
        }
        let mut inputs: Vec<AggregateInput> = updates.iter().map(WeightedUpdate::input).collect();
        inputs.sort_by(|a, b| a.source.cmp(&b.source));
        let proposer = self.agents[0].clone();
        self.commit_model(registry, &proposer, model, inputs, now)
    }
}

/// Opens a private chain for `org` whose model starts as a copy of the
/// global model.
pub fn establish_private_chain(
    registry: &Registry,
    token: &AuthToken,
    org: &OrgState,
    threshold: usize,
    global: &DenseParams,
    now: u64,
) -> Result<PrivateChain, FederationError> {
    let claims = check_token(registry, token, now)?;
    if claims.org != org.org {
        return Err(FederationError::TokenInvalid(format!("token belongs to {}, not {}", claims.org, org.org)));
    }
    if org.n() < threshold {
        return Err(FederationError::BelowThreshold { org: org.org.clone(), samples: org.n(), threshold });
    }
    let agents: Vec<String> = registry
        .entities()
        .filter(|e| e.role == Role::Agent && e.org == org.org)
        .map(|e| e.name.clone())
        .collect();
    if agents.is_empty() {
        return Err(FederationError::NoAgents(org.org.clone()));
    }
    let policy = EndorsementPolicy::majority(agents.iter().cloned())?;
    let mut ledger = Ledger::new(PrivateChain::channel_id(&org.org), policy.clone());
    ledger.add_collection(DELTA_COLLECTION, PrivateDataCollection::new([org.org.clone()], policy));
    let mut chain = PrivateChain { org: org.org.clone(), ledger, model: global.clone(), agents, steps: 0 };
    chain.adopt_global(registry, &claims.sub, global, now)?;
    Ok(chain)
}

/// Progress toward an aggregation: `completed` of `required` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundState {
    pub round: u64,
    pub completed: usize,
    pub required: usize,
}

impl RoundState {
    pub fn check(&self) -> Result<(), FederationError> {
        if self.completed < self.required {
            return Err(FederationError::EpochNotReached { completed: self.completed, required: self.required });
        }
        Ok(())
    }
}

/// Public chain access for submissions.
pub struct PublicTarget<'a> {
    pub registry: &'a Registry,
    pub public: &'a mut Ledger,
    pub now: u64,
}

/// Commits an organization model as this round's submission.
pub fn submit_to_public(
    org: &str,
    params: &DenseParams,
    n_samples: u64,
    round: u64,
    token: &AuthToken,
    target: PublicTarget<'_>,
) -> Result<Hash32, FederationError> {
    let claims = check_token(target.registry, token, target.now)?;
    if claims.org != org {
        return Err(FederationError::TokenInvalid(format!("token belongs to {}, not {org}", claims.org)));
    }
    let digest = params_digest(params);
    let payload = Payload::ModelUpdate(ModelUpdate {
        org: org.to_string(),
        participant: claims.sub.clone(),
        scope: UpdateScope::Submission,
        round,
        params_digest: digest,
        n_samples,
        checkpoint_ref: checkpoint_ref(&digest),
        model_version: params.version,
        inputs: Vec::new(),
        integrated_deltas: Vec::new(),
    });
    Ok(target.public.submit(target.registry, &claims.sub, payload, target.now)?)
}

/// Final private epoch of a round: aggregates the members, then forwards the
/// private model to the public chain. A bad token leaves the private commit
/// in place and the public chain untouched.
pub fn private_aggregate(
    chain: &mut PrivateChain,
    updates: &[WeightedUpdate],
    round: RoundState,
    token: &AuthToken,
    target: PublicTarget<'_>,
) -> Result<Hash32, FederationError> {
    round.check()?;
    chain.aggregate_epoch(target.registry, updates, target.now)?;
    let n: u64 = updates.iter().map(|u| u.n_samples).sum();
    let model = chain.model.clone();
    submit_to_public(&chain.org.clone(), &model, n, round.round, token, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub participants: Vec<String>,
    pub version: u64,
    pub tx_id: Hash32,
}

/// An accepted unlearning delta awaiting integration into the global model.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedDelta {
    pub digest: Hash32,
    pub delta: DenseParams,
}

/// Aggregates this round's submissions into the next global model and folds
/// in verified unlearning deltas. With no submissions the round is marked
/// failed on the ledger.
pub fn public_aggregate(
    round: RoundState,
    submissions: &[WeightedUpdate],
    deltas: &[VerifiedDelta],
    token: &AuthToken,
    target: PublicTarget<'_>,
) -> Result<(DenseParams, RoundRecord), FederationError> {
    round.check()?;
    let claims = check_token(target.registry, token, target.now)?;
    if submissions.is_empty() {
        let payload = Payload::Config(ConfigEvent {
            key: format!("round/{}/status", round.round),
            value: "failed:no-submissions".into(),
        });
        target.public.submit(target.registry, &claims.sub, payload, target.now)?;
        return Err(FederationError::NoSubmissions { round: round.round });
    }
    for s in submissions {
        let key = format!("submission/{}/{}", round.round, s.source);
        let expected = format!("{}:{}", params_digest(&s.params), s.n_samples);
        if target.public.get(&key) != Some(expected.as_str()) {
            return Err(FederationError::UnrecordedSubmission(s.source.clone()));
        }
    }
    let mut model = fedavg(submissions)?;
    for d in deltas {
        model = model.plus(&d.delta)?;
    }
    let current: u64 = target.public.get(GLOBAL_MODEL_VERSION).and_then(|v| v.parse().ok()).unwrap_or(0);
    model.version = current + 1;
    let digest = params_digest(&model);
    let mut inputs: Vec<AggregateInput> = submissions.iter().map(WeightedUpdate::input).collect();
    inputs.sort_by(|a, b| a.source.cmp(&b.source));
    let participants = inputs.iter().map(|i| i.source.clone()).collect();
    let payload = Payload::ModelUpdate(ModelUpdate {
        org: claims.org,
        participant: claims.sub.clone(),
        scope: UpdateScope::Global,
        round: round.round,
        params_digest: digest,
        n_samples: inputs.iter().map(|i| i.n_samples).sum(),
        checkpoint_ref: checkpoint_ref(&digest),
        model_version: model.version,
        inputs,
        integrated_deltas: deltas.iter().map(|d| d.digest).collect(),
    });
    let tx_id = target.public.submit(target.registry, &claims.sub, payload, target.now)?;
    let record = RoundRecord { round: round.round, participants, version: model.version, tx_id };
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{ChainVerdict, GLOBAL_MODEL_DIGEST, PRIVATE_MODEL_DIGEST};
    use crate::model::SparseVec;
    use proptest::prelude::*;

    fn scalar(v: f64) -> DenseParams {
        DenseParams { classes: 1, features: 1, weights: vec![v], bias: vec![0.0], version: 0 }
    }

    fn upd(source: &str, v: f64, n: u64) -> WeightedUpdate {
        WeightedUpdate { source: source.into(), params: scalar(v), n_samples: n }
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg(&[upd("a", 1.7, 5)]).unwrap(), scalar(1.7));
        assert_eq!(fedavg(&[upd("a", 1.0, 2), upd("b", 3.0, 2)]).unwrap().weights, vec![2.0]);
        assert_eq!(fedavg(&[upd("a", 0.0, 1), upd("b", 4.0, 3)]).unwrap().weights, vec![3.0]);
    }

    #[test]
    fn fedavg_errors() {
        assert_eq!(fedavg(&[]).unwrap_err(), FederationError::EmptyUpdateSet);
        let wide = WeightedUpdate { source: "b".into(), params: DenseParams::zeros(1, 2), n_samples: 1 };
        assert_eq!(fedavg(&[upd("a", 0.0, 1), wide]).unwrap_err(), FederationError::ShapeMismatch { origin: "b".into() });
        assert_eq!(fedavg(&[upd("a", 0.0, 0)]).unwrap_err(), FederationError::ZeroWeight);
    }

    fn separable() -> Vec<Sample> {
        (0..24)
            .map(|i| Sample { x: SparseVec::new(vec![(i % 2) as u32, 2 + (i % 3) as u32], vec![0.8, 0.6]), y: i % 2 })
            .collect()
    }

    #[test]
    fn local_train_by_action() {
        let data = separable();
        let p0 = DenseParams::zeros(2, 8);
        let cfg = TrainConfig { epochs: 5, ..Default::default() };
        let (same, losses) = local_train(&data, &p0, &cfg, Action::Abstain).unwrap();
        assert_eq!(same, p0);
        assert!(losses.is_empty());
        let (_, full) = local_train(&data, &p0, &cfg, Action::FullTrain).unwrap();
        assert_eq!(full.len(), 5);
        assert!(full.windows(2).all(|w| w[1] < w[0]));
        let (_, part) = local_train(&data, &p0, &cfg, Action::PartialTrain).unwrap();
        assert_eq!(part.len(), 3);
        assert_eq!(local_train(&data, &p0, &cfg, Action::FullTrain), local_train(&data, &p0, &cfg, Action::FullTrain));
        assert_eq!(local_train(&[], &p0, &cfg, Action::Abstain).unwrap_err(), FederationError::EmptyDataset);
    }

    struct World {
        reg: Registry,
        public: Ledger,
    }

    fn world() -> World {
        let mut reg = Registry::new(7, ["a", "b"], 3600);
        for org in ["a", "b"] {
            reg.register_entity(&format!("{org}-client"), Role::Client, org, 0).unwrap();
            for i in 0..3 {
                reg.register_entity(&format!("{org}-agent{i}"), Role::Agent, org, 0).unwrap();
            }
        }
        let public = Ledger::new("public", EndorsementPolicy::majority(reg.client_pool().iter().cloned()).unwrap());
        World { reg, public }
    }

    fn org(name: &str, n: usize) -> OrgState {
        OrgState { org: name.into(), samples: separable()[..n].to_vec(), params: DenseParams::zeros(2, 8), private_chain: None }
    }

    fn initial() -> DenseParams {
        DenseParams { version: 1, ..DenseParams::zeros(2, 8) }
    }

    #[test]
    fn upload_checks_token_and_versions() {
        let mut w = world();
        let token = w.reg.issue_token("a-client", 0).unwrap();
        let r = upload_global(&w.reg, &token, &initial(), &mut w.public, 1).unwrap();
        assert_eq!(w.public.get(GLOBAL_MODEL_VERSION), Some("1"));
        assert_eq!(r.version, 1);

        let before = w.public.state_digest();
        let err = upload_global(&w.reg, &token, &initial(), &mut w.public, 3600).unwrap_err();
        assert_eq!(err.to_string(), "jwt expired");
        assert!(upload_global(&w.reg, &token, &initial(), &mut w.public, 2).is_err());
        assert_eq!(w.public.state_digest(), before);
    }

    #[test]
    fn private_chain_starts_from_global() {
        let w = world();
        let token = w.reg.issue_token("a-client", 0).unwrap();
        let g = initial();
        let chain = establish_private_chain(&w.reg, &token, &org("a", 20), 10, &g, 1).unwrap();
        assert_eq!(chain.model, g);
        assert_eq!(chain.ledger.get(PRIVATE_MODEL_DIGEST), Some(params_digest(&g).to_hex().as_str()));
        assert_eq!(chain.agents.len(), 3);

        let err = establish_private_chain(&w.reg, &token, &org("a", 5), 10, &g, 1).unwrap_err();
        assert!(matches!(err, FederationError::BelowThreshold { samples: 5, .. }));
    }

    #[test]
    fn private_chains_keep_collections_apart() {
        let w = world();
        let g = initial();
        let ta = w.reg.issue_token("a-client", 0).unwrap();
        let tb = w.reg.issue_token("b-client", 0).unwrap();
        let mut ca = establish_private_chain(&w.reg, &ta, &org("a", 20), 10, &g, 1).unwrap();
        let mut cb = establish_private_chain(&w.reg, &tb, &org("b", 20), 10, &g, 1).unwrap();
        ca.deltas_mut().put("a", "k", b"secret-a".to_vec(), &w.reg).unwrap();
        cb.deltas_mut().put("b", "k", b"secret-b".to_vec(), &w.reg).unwrap();
        assert!(matches!(ca.deltas().get("b", "k"), Err(ChainError::AccessDenied(_))));
        assert!(matches!(cb.deltas_mut().put("a", "k", vec![], &w.reg), Err(ChainError::AccessDenied(_))));
        assert_eq!(cb.deltas().get("b", "k").unwrap(), Some(&b"secret-b"[..]));
    }

    fn member_updates() -> Vec<WeightedUpdate> {
        (0..3)
            .map(|i| {
                let mut p = DenseParams::zeros(2, 8);
                p.weights[i] = (i + 1) as f64;
                p.bias[0] = i as f64 * 0.5;
                WeightedUpdate { source: format!("a-agent{i}"), params: p, n_samples: (i as u64 + 1) * 10 }
            })
            .collect()
    }

    fn weighted_mean_oracle(updates: &[WeightedUpdate]) -> (Vec<f64>, Vec<f64>) {
        let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
        let mut w = vec![0.0; updates[0].params.weights.len()];
        let mut b = vec![0.0; updates[0].params.bias.len()];
        for u in updates {
            let f = u.n_samples as f64 / total;
            for (o, x) in w.iter_mut().zip(&u.params.weights) {
                *o += f * x;
            }
            for (o, x) in b.iter_mut().zip(&u.params.bias) {
                *o += f * x;
            }
        }
        (w, b)
    }

    #[test]
    fn private_aggregate_commits_on_both_chains() {
        let mut w = world();
        let token = w.reg.issue_token("a-client", 0).unwrap();
        let mut chain = establish_private_chain(&w.reg, &token, &org("a", 20), 10, &initial(), 1).unwrap();
        let updates = member_updates();

        let early = RoundState { round: 1, completed: 1, required: 2 };
        let target = PublicTarget { registry: &w.reg, public: &mut w.public, now: 2 };
        assert!(matches!(
            private_aggregate(&mut chain, &updates, early, &token, target),
            Err(FederationError::EpochNotReached { completed: 1, required: 2 })
        ));
        assert_eq!(chain.ledger.blocks().len(), 1);

        let due = RoundState { round: 1, completed: 2, required: 2 };
        let target = PublicTarget { registry: &w.reg, public: &mut w.public, now: 2 };
        private_aggregate(&mut chain, &updates, due, &token, target).unwrap();
        let (ow, ob) = weighted_mean_oracle(&updates);
        for (x, y) in chain.model.weights.iter().zip(&ow).chain(chain.model.bias.iter().zip(&ob)) {
            assert!((x - y).abs() <= 1e-12);
        }
        let digest = params_digest(&chain.model);
        assert_eq!(chain.ledger.get(PRIVATE_MODEL_DIGEST), Some(digest.to_hex().as_str()));
        assert_eq!(w.public.get("submission/1/a"), Some(format!("{digest}:60").as_str()));
        assert_eq!(chain.ledger.validate_chain(), ChainVerdict::Ok);
    }

    #[test]
    fn expired_token_keeps_public_chain_unchanged() {
        let mut w = world();
        let token = w.reg.issue_token("a-client", 0).unwrap();
        let mut chain = establish_private_chain(&w.reg, &token, &org("a", 20), 10, &initial(), 1).unwrap();
        let due = RoundState { round: 1, completed: 1, required: 1 };
        let target = PublicTarget { registry: &w.reg, public: &mut w.public, now: 4000 };
        let err = private_aggregate(&mut chain, &member_updates(), due, &token, target).unwrap_err();
        assert_eq!(err, FederationError::TokenInvalid("jwt expired".into()));
        assert!(w.public.blocks().is_empty());
        assert_eq!(chain.ledger.replay().unwrap(), *chain.ledger.world_state());
        assert_eq!(chain.steps(), 2);
    }

    fn submit_both(w: &mut World, round: u64) -> Vec<WeightedUpdate> {
        let subs = vec![upd("a", 1.0, 10), upd("b", 5.0, 30)];
        for s in &subs {
            let token = w.reg.issue_token(&format!("{}-client", s.source), 0).unwrap();
            let target = PublicTarget { registry: &w.reg, public: &mut w.public, now: 1 };
            submit_to_public(&s.source, &s.params, s.n_samples, round, &token, target).unwrap();
        }
        subs
    }

    #[test]
    fn public_aggregate_matches_oracle() {
        let mut w = world();
        let token = w.reg.issue_token("a-client", 0).unwrap();
        let subs = submit_both(&mut w, 1);
        let state = RoundState { round: 1, completed: 1, required: 1 };
        let target = PublicTarget { registry: &w.reg, public: &mut w.public, now: 2 };
        let (model, rec) = public_aggregate(state, &subs, &[], &token, target).unwrap();
        assert_eq!(model.weights, vec![4.0]);
        assert_eq!(rec.version, 1);
        assert_eq!(rec.participants, vec!["a", "b"]);
        assert_eq!(w.public.get(GLOBAL_MODEL_DIGEST), Some(params_digest(&model).to_hex().as_str()));
    }

    #[test]
    fn single_submission_passes_through() {
        let mut w = world();
        let token = w.reg.issue_token("a-client", 0).unwrap();
        let subs = submit_both(&mut w, 1);
        let state = RoundState { round: 1, completed: 1, required: 1 };
        let target = PublicTarget { registry: &w.reg, public: &mut w.public, now: 2 };
        let (model, _) = public_aggregate(state, &subs[1..], &[], &token, target).unwrap();
        assert_eq!(model.weights, subs[1].params.weights);
    }

    #[test]
    fn public_aggregate_failures() {
        let mut w = world();
        let token = w.reg.issue_token("a-client", 0).unwrap();
        let not_due = RoundState { round: 1, completed: 0, required: 1 };
        let target = PublicTarget { registry: &w.reg, public: &mut w.public, now: 2 };
        assert!(matches!(
            public_aggregate(not_due, &[], &[], &token, target),
            Err(FederationError::EpochNotReached { .. })
        ));
        assert!(w.public.blocks().is_empty());

        let due = RoundState { round: 1, completed: 1, required: 1 };
        let target = PublicTarget { registry: &w.reg, public: &mut w.public, now: 2 };
        assert_eq!(public_aggregate(due, &[], &[], &token, target).unwrap_err(), FederationError::NoSubmissions { round: 1 });
        assert_eq!(w.public.get("round/1/status"), Some("failed:no-submissions"));

        let target = PublicTarget { registry: &w.reg, public: &mut w.public, now: 2 };
        let forged = [upd("a", 9.0, 10)];
        assert_eq!(
            public_aggregate(due, &forged, &[], &token, target).unwrap_err(),
            FederationError::UnrecordedSubmission("a".into())
        );
    }

    fn update_strategy() -> impl Strategy<Value = Vec<(f64, f64, u64)>> {
        proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 1u64..500), 1..6)
    }

    fn build(raw: &[(f64, f64, u64)]) -> Vec<WeightedUpdate> {
        raw.iter()
            .enumerate()
            .map(|(i, &(w, b, n))| WeightedUpdate {
                source: format!("org{i}"),
                params: DenseParams { classes: 1, features: 1, weights: vec![w], bias: vec![b], version: 0 },
                n_samples: n,
            })
            .collect()
    }

    proptest! {
        #[test]
        fn fedavg_ignores_input_order(raw in update_strategy(), rot in 0usize..6) {
            let ups = build(&raw);
            let mut shuffled = ups.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(fedavg(&ups).unwrap(), fedavg(&shuffled).unwrap());
        }

        #[test]
        fn fedavg_of_identical_params_is_exact(w in -1e3f64..1e3, b in -1e3f64..1e3, ns in proptest::collection::vec(1u64..1000, 1..6)) {
            let ups: Vec<WeightedUpdate> = ns.iter().enumerate().map(|(i, &n)| WeightedUpdate {
                source: format!("o{i}"),
                params: DenseParams { classes: 1, features: 1, weights: vec![w], bias: vec![b], version: 0 },
                n_samples: n,
            }).collect();
            let out = fedavg(&ups).unwrap();
            prop_assert_eq!(out.weights, vec![w]);
            prop_assert_eq!(out.bias, vec![b]);
        }

        #[test]
        fn fedavg_matches_weighted_mean(raw in update_strategy()) {
            let ups = build(&raw);
            let (ow, ob) = weighted_mean_oracle(&ups);
            let out = fedavg(&ups).unwrap();
            prop_assert!((out.weights[0] - ow[0]).abs() <= 1e-9);
            prop_assert!((out.bias[0] - ob[0]).abs() <= 1e-9);
        }
    }
}
