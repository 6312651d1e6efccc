//! Tabular Q-learning participants deciding how much to contribute each
//! round.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    FullTrain,
    PartialTrain,
    Abstain,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::FullTrain, Action::PartialTrain, Action::Abstain];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn cost(self) -> f64 {
        match self {
            Action::FullTrain => 1.0,
            Action::PartialTrain => 0.5,
            Action::Abstain => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::FullTrain => "FullTrain",
            Action::PartialTrain => "PartialTrain",
            Action::Abstain => "Abstain",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown action {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccuracyBucket {
    Low,
    Mid,
    High,
}

impl AccuracyBucket {
    pub const MID_FROM: f64 = 0.6;
    pub const HIGH_FROM: f64 = 0.85;

    pub fn of(acc: f64) -> Self {
        if acc >= Self::HIGH_FROM {
            AccuracyBucket::High
        } else if acc >= Self::MID_FROM {
            AccuracyBucket::Mid
        } else {
            AccuracyBucket::Low
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Early,
    Late,
}

impl Phase {
    /// Early for the first half of `total` rounds.
    pub fn of(round: usize, total: usize) -> Self {
        if 2 * round < total {
            Phase::Early
        } else {
            Phase::Late
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct State {
    pub accuracy: AccuracyBucket,
    pub accepted: bool,
    pub phase: Phase,
}

impl State {
    pub const COUNT: usize = 12;

    pub fn index(self) -> usize {
        (self.accuracy as usize) * 4 + (self.accepted as usize) * 2 + self.phase as usize
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < Self::COUNT);
        let accuracy = [AccuracyBucket::Low, AccuracyBucket::Mid, AccuracyBucket::High][i / 4];
        let phase = if i % 2 == 0 { Phase::Early } else { Phase::Late };
        State { accuracy, accepted: (i / 2) % 2 == 1, phase }
    }

    pub fn label(self) -> String {
        let acc = match self.accuracy {
            AccuracyBucket::Low => "low",
            AccuracyBucket::Mid => "mid",
            AccuracyBucket::High => "high",
        };
        let phase = match self.phase {
            Phase::Early => "early",
            Phase::Late => "late",
        };
        format!("{acc}/{}/{phase}", if self.accepted { "accepted" } else { "idle" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for QParams {
    fn default() -> Self {
        Self { alpha: 0.1, gamma: 0.9 }
    }
}

impl QParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        Ok(())
    }
}

/// Dense 12 x 3 table of Q-values, initially zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: [[f64; 3]; State::COUNT],
    params: QParams,
}

impl QTable {
    pub fn new(params: QParams) -> Self {
        Self { values: [[0.0; 3]; State::COUNT], params }
    }

    pub fn params(&self) -> QParams {
        self.params
    }

    pub fn get(&self, s: State, a: Action) -> f64 {
        self.values[s.index()][a.index()]
    }

    pub fn set(&mut self, s: State, a: Action, v: f64) {
        self.values[s.index()][a.index()] = v;
    }

    pub fn row(&self, s: State) -> [f64; 3] {
        self.values[s.index()]
    }

    pub fn max_value(&self, s: State) -> f64 {
        self.values[s.index()].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Highest-valued action; ties go to the lowest action index.
    pub fn greedy(&self, s: State) -> Action {
        let row = self.values[s.index()];
        let mut best = 0;
        for i in 1..3 {
            if row[i] > row[best] {
                best = i;
            }
        }
        Action::ALL[best]
    }

    /// `Q(s,a) += alpha * (r + gamma * max Q(s', .) - Q(s,a))`.
    pub fn update(&mut self, s: State, a: Action, reward: f64, next: State) {
        let QParams { alpha, gamma } = self.params;
        let q = self.get(s, a);
        let target = reward + gamma * self.max_value(next);
        self.set(s, a, q + alpha * (target - q));
    }

    /// (state label, action, value) rows in state-index order.
    pub fn rows(&self) -> Vec<(String, Action, f64)> {
        let mut out = Vec::with_capacity(State::COUNT * 3);
        for i in 0..State::COUNT {
            let s = State::from_index(i);
            for a in Action::ALL {
                out.push((s.label(), a, self.get(s, a)));
            }
        }
        out
    }
}

/// epsilon-greedy: explore uniformly with probability `epsilon`.
pub fn select_action(table: &QTable, s: State, epsilon: f64, rng: &mut dyn RngCore) -> Action {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        Action::ALL[rng.gen_range(0..3)]
    } else {
        table.greedy(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub accuracy: f64,
    pub cost: f64,
    pub bonus: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { accuracy: 1.0, cost: 0.1, bonus: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundOutcome {
    /// Change in global validation accuracy, as a fraction.
    pub delta_accuracy: f64,
    pub action: Action,
    pub accepted: bool,
}

/// `w_acc * 100 * delta - w_cost * cost(action) + w_bonus * accepted`.
pub fn compute_reward(outcome: &RoundOutcome, w: &RewardWeights) -> f64 {
    w.accuracy * outcome.delta_accuracy * 100.0 - w.cost * outcome.action.cost()
        + if outcome.accepted { w.bonus } else { 0.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 0.3, decay: 0.99, floor: 0.01 }
    }
}

impl EpsilonSchedule {
    pub fn next(&self, eps: f64) -> f64 {
        (eps * self.decay).max(self.floor)
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.start) && unit(self.decay) && unit(self.floor)) {
            return Err("epsilon start, decay and floor must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentParams {
    pub q: QParams,
    pub epsilon: EpsilonSchedule,
    pub reward: RewardWeights,
}


impl AgentParams {
    pub fn validate(&self) -> Result<(), String> {
        self.q.validate()?;
        self.epsilon.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next_state: State,
}

/// One organization agent: its own table, exploration rate and rng.
#[derive(Debug, Clone)]
pub struct Agent {
    pub name: String,
    pub org: String,
    table: QTable,
    params: AgentParams,
    epsilon: f64,
    last_accepted: bool,
    rng: ChaCha8Rng,
    trace: Vec<StepRecord>,
}

impl Agent {
    pub fn new(name: impl Into<String>, org: impl Into<String>, params: AgentParams, seed: u64) -> Self {
        Self {
            name: name.into(),
            org: org.into(),
            table: QTable::new(params.q),
            params,
            epsilon: params.epsilon.start,
            last_accepted: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: Vec::new(),
        }
    }

    pub fn table(&self) -> &QTable {
        &self.table
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn set_epsilon(&mut self, eps: f64) {
        self.epsilon = eps;
    }

    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    pub fn observe(&self, global_accuracy: f64, phase: Phase) -> State {
        State { accuracy: AccuracyBucket::of(global_accuracy), accepted: self.last_accepted, phase }
    }

    /// Clears the per-episode accepted flag.
    pub fn reset_episode(&mut self) {
        self.last_accepted = false;
    }

    /// Decays epsilon at an episode boundary.
    pub fn end_episode(&mut self) {
        self.epsilon = self.params.epsilon.next(self.epsilon);
    }

    pub fn choose(&mut self, s: State) -> Action {
        select_action(&self.table, s, self.epsilon, &mut self.rng)
    }

    /// Scores an outcome, applies the Q update and records the step.
    pub fn learn(&mut self, s: State, outcome: RoundOutcome, next_accuracy: f64, next_phase: Phase) -> StepRecord {
        let reward = compute_reward(&outcome, &self.params.reward);
        self.last_accepted = outcome.accepted;
        let next_state = self.observe(next_accuracy, next_phase);
        self.table.update(s, outcome.action, reward, next_state);
        let rec = StepRecord { state: s, action: outcome.action, reward, next_state };
        self.trace.push(rec.clone());
        rec
    }

    /// observe, act through `env`, then learn from what it reports.
    pub fn step<E>(
        &mut self,
        global_accuracy: f64,
        phase: Phase,
        env: impl FnOnce(Action) -> Result<(RoundOutcome, f64, Phase), E>,
    ) -> Result<StepRecord, E> {
        let s = self.observe(global_accuracy, phase);
        let action = self.choose(s);
        let (outcome, next_acc, next_phase) = env(action)?;
        Ok(self.learn(s, RoundOutcome { action, ..outcome }, next_acc, next_phase))
    }
}
