use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agents::{Action, Agent, Phase, RoundOutcome, State};
use crate::chain::{EndorsementPolicy, Ledger, Payload, PrivateDataCollection, RegistrationEvent};
use crate::data::{split_forget, DataError, Dataset, FeatureHasher, Selector};
use crate::digest::Hash32;
use crate::federation::{
    establish_private_chain, local_train, private_aggregate, public_aggregate, submit_to_public, upload_global,
    OrgState, PrivateChain, PublicTarget, RoundState, VerifiedDelta, WeightedUpdate,
};
use crate::identity::{AuthToken, Registry, Role};
use crate::model::{accuracy, mean_loss, params_digest, DenseParams, Sample};
use crate::unlearning::{
    unlearn_lora, verify_and_submit, LoraConfig, SubmitTarget, UnlearnError, UnlearnRequest, VerificationMetrics,
};

use super::clock::{SimClock, Step};
use super::scenario::{derive_seed, Scenario, ScenarioError};

pub const PUBLIC_CHANNEL: &str = "public";

#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    Config(ScenarioError),
    Step { step: Step, message: String },
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Config(e) => write!(f, "invalid scenario: {e}"),
            SimError::Step { step, message } => write!(f, "step {step} failed: {message}"),
        }
    }
}

impl std::error::Error for SimError {}

fn at<E: fmt::Display>(step: Step) -> impl Fn(E) -> SimError {
    move |e| SimError::Step { step, message: e.to_string() }
}

pub fn client_name(org: &str) -> String {
    format!("{org}-client")
}

pub fn agent_name(org: &str, i: usize) -> String {
    format!("{org}-agent{i}")
}

/// Registers every scenario entity in declaration order. The same scenario
/// always yields the same keys.
pub fn build_registry(s: &Scenario, now: u64) -> Result<(Registry, Vec<RegistrationEvent>), SimError> {
    let mut registry = Registry::new(derive_seed(s.seed, "registry"), s.orgs.iter().map(|o| o.id.clone()), s.token_ttl);
    let mut events = Vec::new();
    for org in &s.orgs {
        let names = std::iter::once((client_name(&org.id), Role::Client))
            .chain((0..org.agents).map(|i| (agent_name(&org.id, i), Role::Agent)));
        for (name, role) in names {
            let (rec, _) = registry.register_entity(&name, role, &org.id, now).map_err(at(Step::Register))?;
            events.push(RegistrationEvent {
                name: rec.name,
                role: rec.role.to_string(),
                org: rec.org,
                public_key: rec.public_key,
            });
        }
    }
    Ok((registry, events))
}

pub fn public_policy(registry: &Registry) -> EndorsementPolicy {
    EndorsementPolicy::majority(registry.client_pool().iter().cloned()).expect("every org registers a client")
}

/// Collection on the public side for an organization without a private chain.
pub fn public_delta_collection(org: &str) -> PrivateDataCollection {
    let policy = EndorsementPolicy::majority([client_name(org)]).expect("one peer");
    PrivateDataCollection::new([org.to_string()], policy)
}

/// Validation items the selector does not target; all of them when it
/// targets every item or picks at random.
pub fn verification_set(validation: &Dataset, selector: &Selector, hasher: &FeatureHasher) -> Vec<Sample> {
    if matches!(selector, Selector::Random { .. }) {
        return validation.samples(hasher);
    }
    let mask = selector.matches(&validation.items, 0);
    let kept: Vec<Sample> = validation
        .items
        .iter()
        .zip(mask)
        .filter(|(_, m)| !m)
        .map(|(it, _)| Sample { x: hasher.vectorize(&it.text), y: it.label })
        .collect();
    if kept.is_empty() {
        validation.samples(hasher)
    } else {
        kept
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub model_version: u64,
    pub global_accuracy: f64,
    pub global_loss: f64,
    pub clock: u64,
    pub actions: Vec<(String, Action)>,
    pub rewards: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnlearnStatus {
    Accepted,
    Rejected,
    Skipped,
}

impl UnlearnStatus {
    pub fn name(self) -> &'static str {
        match self {
            UnlearnStatus::Accepted => "accepted",
            UnlearnStatus::Rejected => "rejected",
            UnlearnStatus::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnEvent {
    pub round: usize,
    pub org: String,
    pub selector: String,
    pub lora: LoraConfig,
    pub forget_items: usize,
    pub metrics: Option<VerificationMetrics>,
    pub status: UnlearnStatus,
    pub tx_id: Option<Hash32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rounds: Vec<RoundMetrics>,
    pub unlearn: Vec<UnlearnEvent>,
}

#[derive(Debug)]
pub struct SimOutput {
    pub scenario: Scenario,
    pub registry: Registry,
    pub public: Ledger,
    pub private: BTreeMap<String, PrivateChain>,
    pub agents: Vec<Agent>,
    pub final_model: DenseParams,
    pub metrics: MetricsLog,
    pub clock: SimClock,
}

struct OrgRuntime {
    id: String,
    client: String,
    agents: Vec<String>,
    dataset: Dataset,
    samples: Vec<Sample>,
    shards: Vec<Vec<Sample>>,
}

impl OrgRuntime {
    fn reshard(&mut self, hasher: &FeatureHasher) {
        self.samples = self.dataset.samples(hasher);
        let k = self.agents.len();
        self.shards = (0..k).map(|i| self.samples.iter().skip(i).step_by(k).cloned().collect()).collect();
    }
}

fn tx_total(ledger: &Ledger) -> u64 {
    ledger.blocks().iter().map(|b| b.transactions.len() as u64).sum()
}

struct Engine<'s> {
    s: &'s Scenario,
    hasher: FeatureHasher,
    validation: Dataset,
    val_samples: Vec<Sample>,
    clock: SimClock,
    registry: Registry,
    public: Ledger,
    chains: BTreeMap<String, PrivateChain>,
    public_collections: BTreeMap<String, PrivateDataCollection>,
    orgs: Vec<OrgRuntime>,
    agents: Vec<Agent>,
    global: DenseParams,
    pending: Vec<VerifiedDelta>,
    metrics: MetricsLog,
    charged_txs: u64,
}

impl Engine<'_> {
    fn token(&self, name: &str, step: Step) -> Result<AuthToken, SimError> {
        self.registry.issue_token(name, self.clock.now()).map_err(at(step))
    }

    fn uploader(&self) -> String {
        client_name(&self.s.orgs[0].id)
    }

    /// Advances the clock for transactions committed since the last charge.
    fn charge_txs(&mut self) {
        let total = tx_total(&self.public) + self.chains.values().map(|c| tx_total(&c.ledger)).sum::<u64>();
        self.clock.advance(self.s.cost.transactions(total - self.charged_txs));
        self.charged_txs = total;
    }

    fn register(&mut self, events: Vec<RegistrationEvent>) -> Result<(), SimError> {
        let n = events.len();
        let batch = events.into_iter().map(|e| (e.name.clone(), Payload::Registration(e))).collect();
        self.public.submit_batch(&self.registry, batch, self.clock.now()).map_err(at(Step::Register))?;
        self.charge_txs();
        self.clock.log(Step::Register, format!("entities={n}"));
        Ok(())
    }

    fn upload(&mut self) -> Result<(), SimError> {
        let token = self.token(&self.uploader(), Step::UploadGlobal)?;
        let receipt = upload_global(&self.registry, &token, &self.global, &mut self.public, self.clock.now())
            .map_err(at(Step::UploadGlobal))?;
        self.charge_txs();
        self.clock.log(Step::UploadGlobal, format!("version={} digest={}", receipt.version, receipt.digest.short()));
        Ok(())
    }

    fn establish(&mut self) -> Result<(), SimError> {
        for i in 0..self.orgs.len() {
            let (id, client, n) = (self.orgs[i].id.clone(), self.orgs[i].client.clone(), self.orgs[i].samples.len());
            if n < self.s.private_chain_threshold {
                self.public_collections.insert(id.clone(), public_delta_collection(&id));
                continue;
            }
            let token = self.token(&client, Step::EstablishPrivateChain)?;
            let state = OrgState {
                org: id.clone(),
                samples: self.orgs[i].samples.clone(),
                params: self.global.clone(),
                private_chain: Some(PrivateChain::channel_id(&id)),
            };
            let chain = establish_private_chain(
                &self.registry,
                &token,
                &state,
                self.s.private_chain_threshold,
                &self.global,
                self.clock.now(),
            )
            .map_err(at(Step::EstablishPrivateChain))?;
            self.chains.insert(id.clone(), chain);
            self.charge_txs();
            self.clock.log(Step::EstablishPrivateChain, format!("org={id} agents={}", self.orgs[i].agents.len()));
        }
        Ok(())
    }

    fn train_round(&mut self, g: usize, actions: &BTreeMap<String, Action>) -> Result<Vec<WeightedUpdate>, SimError> {
        let p_total = self.s.private_epochs;
        let mut direct: BTreeMap<String, DenseParams> = BTreeMap::new();
        for org in &self.orgs {
            match self.chains.get_mut(&org.id) {
                Some(chain) if g > 1 => {
                    chain
                        .adopt_global(&self.registry, &org.client, &self.global, self.clock.now())
                        .map_err(at(Step::Train))?;
                }
                Some(_) => {}
                None => {
                    direct.insert(org.id.clone(), self.global.clone());
                }
            }
        }
        self.charge_txs();

        let mut submissions = Vec::new();
        for p in 1..=p_total {
            self.clock.advance(self.s.cost.epochs(1));
            for oi in 0..self.orgs.len() {
                let org = &self.orgs[oi];
                let start = match self.chains.get(&org.id) {
                    Some(chain) => &chain.model,
                    None => &direct[&org.id],
                };
                let mut updates = Vec::with_capacity(org.agents.len());
                for (ai, name) in org.agents.iter().enumerate() {
                    let cfg = self.s.train.with_seed(derive_seed(self.s.seed, &format!("train/{name}/{g}/{p}")));
                    let shard = if self.chains.contains_key(&org.id) { &org.shards[ai] } else { &org.samples };
                    let (params, _) = local_train(shard, start, &cfg, actions[name]).map_err(at(Step::Train))?;
                    updates.push(WeightedUpdate { source: name.clone(), params, n_samples: shard.len() as u64 });
                }
                let (id, client) = (org.id.clone(), org.client.clone());
                self.clock.log(Step::Train, format!("round={g} epoch={p} org={id}"));

                let now = self.clock.now();
                if let Some(chain) = self.chains.get_mut(&id) {
                    if p < p_total {
                        chain.aggregate_epoch(&self.registry, &updates, now).map_err(at(Step::PrivateAggregate))?;
                    } else {
                        let token = self.registry.issue_token(&client, now).map_err(at(Step::PrivateAggregate))?;
                        let state = RoundState { round: g as u64, completed: p, required: p_total };
                        let target = PublicTarget { registry: &self.registry, public: &mut self.public, now };
                        private_aggregate(chain, &updates, state, &token, target).map_err(at(Step::PrivateAggregate))?;
                        let n = updates.iter().map(|u| u.n_samples).sum();
                        submissions.push(WeightedUpdate { source: id.clone(), params: chain.model.clone(), n_samples: n });
                        self.clock.advance(self.s.cost.cross_chain(1));
                    }
                    self.charge_txs();
                    self.clock.log(Step::PrivateAggregate, format!("round={g} epoch={p} org={id}"));
                } else {
                    let update = updates.pop().expect("direct orgs have one agent");
                    if p < p_total {
                        direct.insert(id, update.params);
                        continue;
                    }
                    let token = self.registry.issue_token(&client, now).map_err(at(Step::PrivateAggregate))?;
                    let target = PublicTarget { registry: &self.registry, public: &mut self.public, now };
                    submit_to_public(&id, &update.params, update.n_samples, g as u64, &token, target)
                        .map_err(at(Step::PrivateAggregate))?;
                    self.charge_txs();
                    self.clock.log(Step::PrivateAggregate, format!("round={g} epoch={p} org={id} direct"));
                    submissions.push(WeightedUpdate { source: id, ..update });
                }
            }
        }
        Ok(submissions)
    }

    fn unlearn(&mut self, g: usize) -> Result<(), SimError> {
        let s = self.s;
        for (ri, req) in s.unlearning.requests.iter().enumerate().filter(|(_, r)| r.round == g) {
            let oi = self.orgs.iter().position(|o| o.id == req.org).expect("validated org");
            let cfg = self.s.unlearn_config(req);
            let mut event = UnlearnEvent {
                round: g,
                org: req.org.clone(),
                selector: req.selector.to_string(),
                lora: cfg.lora,
                forget_items: 0,
                metrics: None,
                status: UnlearnStatus::Skipped,
                tx_id: None,
            };
            let split = split_forget(&self.orgs[oi].dataset, &req.selector, derive_seed(self.s.seed, &format!("forget/{ri}")));
            let (forget, retain) = match split {
                Ok(parts) => parts,
                Err(DataError::EmptyForget) => {
                    self.clock.log(Step::Unlearn, format!("round={g} org={} selector={} no matching items", req.org, req.selector));
                    self.metrics.unlearn.push(event);
                    continue;
                }
                Err(e) => return Err(at(Step::Unlearn)(e)),
            };
            event.forget_items = forget.len();
            let request = UnlearnRequest {
                org: req.org.clone(),
                forget: forget.samples(&self.hasher),
                config: cfg,
                seed: derive_seed(self.s.seed, &format!("unlearn/{ri}")),
            };
            let mut result = unlearn_lora(&self.global, &request).map_err(at(Step::Unlearn))?;
            self.clock.log(Step::Unlearn, format!("round={g} org={} forget={}", req.org, forget.len()));

            let check = verification_set(&self.validation, &req.selector, &self.hasher);
            let token = self.token(&self.orgs[oi].agents[0], Step::VerifySubmit)?;
            let collection = match self.chains.get_mut(&req.org) {
                Some(chain) => chain.deltas_mut(),
                None => self.public_collections.get_mut(&req.org).expect("public collection per direct org"),
            };
            let target =
                SubmitTarget { registry: &self.registry, public: &mut self.public, collection: Some(collection), now: self.clock.now() };
            match verify_and_submit(&mut result, &self.global, &request.forget, &check, &self.s.unlearning.criteria, &token, target) {
                Ok(sub) => {
                    event.metrics = Some(sub.metrics);
                    event.status = UnlearnStatus::Accepted;
                    event.tx_id = Some(sub.tx_id);
                    self.pending.push(VerifiedDelta { digest: sub.delta_digest, delta: result.params_delta });
                    let org = &mut self.orgs[oi];
                    if retain.len() < org.agents.len() {
                        return Err(at(Step::VerifySubmit)(format!("{} keeps too few items for its agents", org.id)));
                    }
                    org.dataset = retain;
                    org.reshard(&self.hasher);
                }
                Err(UnlearnError::CriteriaNotMet { metrics, .. }) => {
                    event.metrics = Some(metrics);
                    event.status = UnlearnStatus::Rejected;
                }
                Err(e) => return Err(at(Step::VerifySubmit)(e)),
            }
            self.charge_txs();
            let status = event.status.name();
            self.clock.log(Step::VerifySubmit, format!("round={g} org={} {status}", req.org));
            self.metrics.unlearn.push(event);
        }
        Ok(())
    }

    fn aggregate(&mut self, g: usize, submissions: &[WeightedUpdate]) -> Result<(), SimError> {
        let token = self.token(&self.uploader(), Step::PublicAggregate)?;
        let state = RoundState { round: g as u64, completed: self.s.private_epochs, required: self.s.private_epochs };
        let target = PublicTarget { registry: &self.registry, public: &mut self.public, now: self.clock.now() };
        let (model, record) =
            public_aggregate(state, submissions, &self.pending, &token, target).map_err(at(Step::PublicAggregate))?;
        self.global = model;
        self.pending.clear();
        self.charge_txs();
        self.clock.log(
            Step::PublicAggregate,
            format!("round={g} version={} orgs={}", record.version, record.participants.join("+")),
        );
        Ok(())
    }

    fn evaluate(&self) -> Result<(f64, f64), SimError> {
        let acc = accuracy(&self.global, None, &self.val_samples).map_err(at(Step::PublicAggregate))?;
        let loss = mean_loss(&self.global, None, &self.val_samples).map_err(at(Step::PublicAggregate))?;
        Ok((acc, loss))
    }

    fn round(&mut self, g: usize) -> Result<(), SimError> {
        let total = self.s.global_epochs;
        let (acc_before, _) = self.evaluate()?;
        let phase = Phase::of(g - 1, total);
        let mut chosen: Vec<(State, Action)> = Vec::with_capacity(self.agents.len());
        for a in &mut self.agents {
            let st = a.observe(acc_before, phase);
            chosen.push((st, a.choose(st)));
        }
        let actions: BTreeMap<String, Action> =
            self.agents.iter().zip(&chosen).map(|(a, (_, act))| (a.name.clone(), *act)).collect();

        let submissions = self.train_round(g, &actions)?;
        self.unlearn(g)?;
        self.aggregate(g, &submissions)?;

        let (acc, loss) = self.evaluate()?;
        let next_phase = Phase::of(g, total);
        let mut rewards = Vec::with_capacity(self.agents.len());
        for (a, (st, act)) in self.agents.iter_mut().zip(chosen) {
            let outcome = RoundOutcome { delta_accuracy: acc - acc_before, action: act, accepted: act != Action::Abstain };
            let rec = a.learn(st, outcome, acc, next_phase);
            a.end_episode();
            rewards.push((a.name.clone(), rec.reward));
        }
        self.metrics.rounds.push(RoundMetrics {
            round: g,
            model_version: self.global.version,
            global_accuracy: acc,
            global_loss: loss,
            clock: self.clock.now(),
            actions: actions.into_iter().collect(),
            rewards,
        });
        Ok(())
    }
}

/// Runs every protocol step for every round. Deterministic in the scenario.
pub fn run_scenario(s: &Scenario) -> Result<SimOutput, SimError> {
    s.validate().map_err(SimError::Config)?;
    let (datasets, validation) = s.materialize().map_err(SimError::Config)?;
    let hasher = FeatureHasher::new(s.feature_dims).map_err(|e| SimError::Config(ScenarioError::new("feature_dims", e.to_string())))?;

    let mut clock = SimClock::new();
    clock.advance(s.cost.setup());
    let (registry, registrations) = build_registry(s, clock.now())?;
    let public = Ledger::new(PUBLIC_CHANNEL, public_policy(&registry));

    let mut orgs = Vec::with_capacity(s.orgs.len());
    let mut agents = Vec::new();
    for (spec, dataset) in s.orgs.iter().zip(datasets) {
        let names: Vec<String> = (0..spec.agents).map(|i| agent_name(&spec.id, i)).collect();
        for n in &names {
            agents.push(Agent::new(n.clone(), spec.id.clone(), s.agents, derive_seed(s.seed, &format!("agent/{n}"))));
        }
        let mut rt = OrgRuntime {
            id: spec.id.clone(),
            client: client_name(&spec.id),
            agents: names,
            dataset,
            samples: Vec::new(),
            shards: Vec::new(),
        };
        rt.reshard(&hasher);
        orgs.push(rt);
    }

    let val_samples = validation.samples(&hasher);
    let mut engine = Engine {
        s,
        hasher,
        validation,
        val_samples,
        clock,
        registry,
        public,
        chains: BTreeMap::new(),
        public_collections: BTreeMap::new(),
        orgs,
        agents,
        global: DenseParams { version: 1, ..DenseParams::zeros(s.classes, s.feature_dims) },
        pending: Vec::new(),
        metrics: MetricsLog::default(),
        charged_txs: 0,
    };
    engine.register(registrations)?;
    engine.upload()?;
    engine.establish()?;
    for g in 1..=s.global_epochs {
        engine.round(g)?;
    }
    debug_assert_eq!(params_digest(&engine.global).to_hex(), engine.public.get(crate::chain::GLOBAL_MODEL_DIGEST).unwrap_or(""));
    Ok(SimOutput {
        scenario: s.clone(),
        registry: engine.registry,
        public: engine.public,
        private: engine.chains,
        agents: engine.agents,
        final_model: engine.global,
        metrics: engine.metrics,
        clock: engine.clock,
    })
}
