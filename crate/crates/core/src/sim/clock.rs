use std::fmt;

use serde::{Deserialize, Serialize};

/// Protocol steps in the order a round performs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Step {
    Register,
    UploadGlobal,
    EstablishPrivateChain,
    Train,
    PrivateAggregate,
    Unlearn,
    VerifySubmit,
    PublicAggregate,
}

impl Step {
    pub const ALL: [Step; 8] = [
        Step::Register,
        Step::UploadGlobal,
        Step::EstablishPrivateChain,
        Step::Train,
        Step::PrivateAggregate,
        Step::Unlearn,
        Step::VerifySubmit,
        Step::PublicAggregate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::Register => "register",
            Step::UploadGlobal => "upload-global",
            Step::EstablishPrivateChain => "establish-private-chain",
            Step::Train => "train",
            Step::PrivateAggregate => "private-aggregate",
            Step::Unlearn => "unlearn",
            Step::VerifySubmit => "verify-submit",
            Step::PublicAggregate => "public-aggregate",
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub time: u64,
    pub kind: Step,
    pub detail: String,
}

/// Simulated seconds plus the log of what happened when.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimClock {
    now: u64,
    events: Vec<Event>,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn advance(&mut self, secs: u64) {
        self.now += secs;
    }

    pub fn log(&mut self, kind: Step, detail: impl Into<String>) {
        self.events.push(Event { time: self.now, kind, detail: detail.into() });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    Normal,
    PublicOnly,
    Hybrid,
}

/// Seconds charged per protocol activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub setup_cost: u64,
    pub consensus_cost: u64,
    pub tx_cost: u64,
    pub epoch_cost: u64,
    pub mode: CostMode,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { setup_cost: 48, consensus_cost: 6, tx_cost: 4, epoch_cost: 30, mode: CostMode::Hybrid }
    }
}

impl CostModel {
    pub fn zero() -> Self {
        Self { setup_cost: 0, consensus_cost: 0, tx_cost: 0, epoch_cost: 0, mode: CostMode::Hybrid }
    }

    pub fn setup(&self) -> u64 {
        if self.mode == CostMode::Normal {
            0
        } else {
            self.setup_cost
        }
    }

    pub fn transactions(&self, n: u64) -> u64 {
        if self.mode == CostMode::Normal {
            0
        } else {
            n * self.tx_cost
        }
    }

    pub fn cross_chain(&self, n: u64) -> u64 {
        if self.mode == CostMode::Hybrid {
            n * self.consensus_cost
        } else {
            0
        }
    }

    pub fn epochs(&self, n: u64) -> u64 {
        n * self.epoch_cost
    }
}

/// Per-epoch ledger activity a mode incurs in the timing table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub consensus: u64,
    pub transactions: u64,
}

pub const PUBLIC_SCHEDULE: EpochSchedule = EpochSchedule { consensus: 0, transactions: 1 };
pub const HYBRID_SCHEDULE: EpochSchedule = EpochSchedule { consensus: 1, transactions: 0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRow {
    pub t: u64,
    pub normal: u64,
    pub public: u64,
    pub hybrid: u64,
}

impl TimeRow {
    /// `(hybrid - normal) / normal`, or `None` when normal is zero.
    pub fn hybrid_overhead(&self) -> Option<f64> {
        (self.normal > 0).then(|| (self.hybrid as f64 - self.normal as f64) / self.normal as f64)
    }
}

fn ledger_total(cost: &CostModel, schedule: EpochSchedule, epochs: u64) -> u64 {
    cost.setup_cost + epochs * (cost.epoch_cost + schedule.consensus * cost.consensus_cost + schedule.transactions * cost.tx_cost)
}

/// Total seconds for `t + 1` epochs under each mode.
pub fn time_table(cost: &CostModel, ts: &[u64]) -> Vec<TimeRow> {
    ts.iter()
        .map(|&t| {
            let epochs = t + 1;
            TimeRow {
                t,
                normal: cost.epoch_cost * epochs,
                public: ledger_total(cost, PUBLIC_SCHEDULE, epochs),
                hybrid: ledger_total(cost, HYBRID_SCHEDULE, epochs),
            }
        })
        .collect()
}
