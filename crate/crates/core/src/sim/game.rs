//! Repeated two-agent federation used to check which participation level
//! the learned policies settle on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agents::{Action, Agent, AgentParams, Phase, RoundOutcome, State};
use crate::data::{synth_gen, Dataset, FeatureHasher, Item};
use crate::federation::{fedavg, local_train, FederationError, WeightedUpdate};
use crate::model::{accuracy, DenseParams, Sample};

use super::scenario::{derive_seed, LocalTraining};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    pub agents: usize,
    pub episodes: usize,
    pub rounds_per_episode: usize,
    pub classes: usize,
    pub items_per_agent: usize,
    pub validation_items: usize,
    pub feature_dims: usize,
    pub train: LocalTraining,
    pub params: AgentParams,
    /// Fraction of episodes at the end whose visited states define the
    /// steady state.
    pub steady_fraction: f64,
    pub seed: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            agents: 2,
            episodes: 200,
            rounds_per_episode: 4,
            classes: 4,
            items_per_agent: 60,
            validation_items: 200,
            feature_dims: 1 << 12,
            train: LocalTraining { learning_rate: 0.5, epochs: 2, batch_size: 8 },
            params: AgentParams::default(),
            steady_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameReport {
    /// Per agent, the greedy action at the steady state.
    pub steady_actions: Vec<Action>,
    /// Per agent, visits per state over the steady window.
    pub steady_visits: Vec<BTreeMap<usize, usize>>,
    /// Mean final-round validation accuracy per episode.
    pub final_accuracy: Vec<f64>,
    pub agents: Vec<Agent>,
}

impl GameReport {
    pub fn all_full_train(&self) -> bool {
        self.steady_actions.iter().all(|&a| a == Action::FullTrain)
    }
}

/// Splits a balanced dataset so agent `i` holds the classes congruent to
/// `i` modulo the agent count.
fn shard(data: &Dataset, agent: usize, agents: usize) -> Vec<Item> {
    data.items.iter().filter(|it| it.label % agents == agent).cloned().collect()
}

/// Visit-weighted majority of greedy actions; ties go to the lowest action
/// index.
pub fn steady_action(agent: &Agent, visits: &BTreeMap<usize, usize>) -> Action {
    let mut weight = [0usize; 3];
    for (&s, &n) in visits {
        weight[agent.table().greedy(State::from_index(s)).index()] += n;
    }
    let mut best = 0;
    for i in 1..3 {
        if weight[i] > weight[best] {
            best = i;
        }
    }
    Action::ALL[best]
}

pub fn run_game(cfg: &GameConfig) -> Result<GameReport, FederationError> {
    let hasher = FeatureHasher::new(cfg.feature_dims).map_err(|_| FederationError::EmptyDataset)?;
    let total = cfg.items_per_agent * cfg.agents;
    let pool = synth_gen(total, cfg.classes, derive_seed(cfg.seed, "game/train")).map_err(|_| FederationError::EmptyDataset)?;
    let shards: Vec<Vec<Sample>> = (0..cfg.agents)
        .map(|i| {
            shard(&pool, i, cfg.agents).into_iter().map(|it| Sample { x: hasher.vectorize(&it.text), y: it.label }).collect()
        })
        .collect();
    let val = synth_gen(cfg.validation_items, cfg.classes, derive_seed(cfg.seed, "game/val"))
        .map_err(|_| FederationError::EmptyDataset)?
        .samples(&hasher);

    let mut agents: Vec<Agent> = (0..cfg.agents)
        .map(|i| Agent::new(format!("agent{i}"), format!("org{i}"), cfg.params, derive_seed(cfg.seed, &format!("game/agent{i}"))))
        .collect();
    let steady_from = cfg.episodes - ((cfg.episodes as f64 * cfg.steady_fraction).ceil() as usize).min(cfg.episodes);
    let mut visits = vec![BTreeMap::new(); cfg.agents];
    let mut final_accuracy = Vec::with_capacity(cfg.episodes);
    let k = cfg.rounds_per_episode;

    for ep in 0..cfg.episodes {
        let mut global = DenseParams::zeros(cfg.classes, cfg.feature_dims);
        let mut acc = accuracy(&global, None, &val)?;
        agents.iter_mut().for_each(Agent::reset_episode);
        for r in 0..k {
            let phase = Phase::of(r, k);
            let mut chosen = Vec::with_capacity(cfg.agents);
            for (i, a) in agents.iter_mut().enumerate() {
                let s = a.observe(acc, phase);
                if ep >= steady_from {
                    *visits[i].entry(s.index()).or_insert(0) += 1;
                }
                chosen.push((s, a.choose(s)));
            }
            let mut updates = Vec::with_capacity(cfg.agents);
            for (i, (_, action)) in chosen.iter().enumerate() {
                let tc = cfg.train.with_seed(derive_seed(cfg.seed, &format!("game/train/{ep}/{r}/{i}")));
                let (params, _) = local_train(&shards[i], &global, &tc, *action)?;
                updates.push(WeightedUpdate { source: format!("agent{i}"), params, n_samples: shards[i].len() as u64 });
            }
            global = fedavg(&updates)?;
            let next = accuracy(&global, None, &val)?;
            for (a, (s, action)) in agents.iter_mut().zip(chosen) {
                let outcome = RoundOutcome { delta_accuracy: next - acc, action, accepted: action != Action::Abstain };
                a.learn(s, outcome, next, Phase::of(r + 1, k));
            }
            acc = next;
        }
        final_accuracy.push(acc);
        agents.iter_mut().for_each(Agent::end_episode);
    }

    let steady_actions = agents.iter().zip(&visits).map(|(a, v)| steady_action(a, v)).collect();
    Ok(GameReport { steady_actions, steady_visits: visits, final_accuracy, agents })
}
