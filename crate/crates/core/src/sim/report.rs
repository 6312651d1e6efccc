use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::agents::{Action, State};
use crate::model::write_checkpoint;
use crate::unlearning::sweep::{run_sweep, SweepAxis, SweepPoint};
use crate::unlearning::{LoraConfig, UnlearnConfig, UnlearnError};

use super::clock::{time_table, CostModel, TimeRow};
use super::engine::{SimOutput, UnlearnStatus};

pub const SCENARIO_FILE: &str = "scenario.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const UNLEARN_FILE: &str = "unlearn_events.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const MODEL_FILE: &str = "final_model.ckpt";
pub const PUBLIC_LEDGER_FILE: &str = "ledger_public.jsonl";

pub const METRICS_HEADER: [&str; 7] =
    ["round", "model_version", "global_accuracy", "global_loss", "clock_s", "actions", "rewards"];
pub const UNLEARN_HEADER: [&str; 13] = [
    "round",
    "org",
    "selector",
    "rank",
    "alpha",
    "dropout",
    "forget_items",
    "forget_acc_before",
    "forget_acc_after",
    "retain_acc_before",
    "retain_acc_after",
    "status",
    "tx_id",
];
pub const TABLE_HEADER: &str = "LoRA Config | Initial Accuracy | Final Accuracy";

pub fn private_ledger_file(org: &str) -> String {
    format!("ledger_private_{org}.jsonl")
}

pub fn qtable_file(agent: &str) -> String {
    format!("qtable_{agent}.csv")
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn lora_label(l: &LoraConfig) -> String {
    format!("r={}, alpha={}, dropout={}", l.rank, l.alpha, l.dropout)
}

fn pct(x: f64) -> String {
    format!("{:.2}%", x * 100.0)
}

fn summary(out: &SimOutput) -> String {
    let s = &out.scenario;
    let mut t = String::new();
    let last = out.metrics.rounds.last();
    let _ = writeln!(t, "scenario: {}", s.name);
    let _ = writeln!(t, "seed: {}", s.seed);
    let _ = writeln!(t, "organizations: {}", s.orgs.len());
    let _ = writeln!(t, "private chains: {}", out.private.len());
    let _ = writeln!(t, "global rounds: {}", out.metrics.rounds.len());
    let _ = writeln!(t, "final model version: {}", out.final_model.version);
    let _ = writeln!(t, "final global accuracy: {}", last.map_or("n/a".into(), |r| pct(r.global_accuracy)));
    let _ = writeln!(t, "public blocks: {}", out.public.blocks().len());
    let _ = writeln!(t, "simulated time: {} s", out.clock.now());
    let _ = writeln!(t);
    let _ = writeln!(t, "Unlearning (forget-set accuracy)");
    let _ = writeln!(t, "{TABLE_HEADER}");
    for e in &out.metrics.unlearn {
        let (before, after) = e.metrics.as_ref().map_or(("n/a".into(), "n/a".into()), |m| {
            (pct(m.forget_acc_before), pct(m.forget_acc_after))
        });
        let _ = writeln!(t, "{} | {before} | {after}", lora_label(&e.lora));
    }
    let _ = writeln!(t);
    let _ = writeln!(t, "Unlearning requests");
    for e in &out.metrics.unlearn {
        let tx = e.tx_id.map_or("-".into(), |h| h.to_hex());
        let _ = writeln!(t, "round {} {} {}: {} (tx {tx})", e.round, e.org, e.selector, e.status.name());
    }
    t
}

/// Writes every run artifact into `dir` and returns the paths written.
pub fn emit_report(out: &SimOutput, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    files.push((SCENARIO_FILE.into(), out.scenario.to_json().into_bytes()));

    let metrics = out.metrics.rounds.iter().map(|r| {
        let actions: Vec<String> = r.actions.iter().map(|(a, act)| format!("{a}={act}")).collect();
        let rewards: Vec<String> = r.rewards.iter().map(|(a, v)| format!("{a}={v}")).collect();
        vec![
            r.round.to_string(),
            r.model_version.to_string(),
            r.global_accuracy.to_string(),
            r.global_loss.to_string(),
            r.clock.to_string(),
            actions.join(";"),
            rewards.join(";"),
        ]
    });
    files.push((METRICS_FILE.into(), csv_bytes(&METRICS_HEADER, metrics)));

    let events = out.clock.events().iter().map(|e| vec![e.time.to_string(), e.kind.to_string(), e.detail.clone()]);
    files.push((EVENTS_FILE.into(), csv_bytes(&["time_s", "kind", "detail"], events)));

    let unlearn = out.metrics.unlearn.iter().map(|e| {
        let m = |f: fn(&crate::unlearning::VerificationMetrics) -> f64| {
            e.metrics.as_ref().map_or(String::new(), |v| f(v).to_string())
        };
        vec![
            e.round.to_string(),
            e.org.clone(),
            e.selector.clone(),
            e.lora.rank.to_string(),
            e.lora.alpha.to_string(),
            e.lora.dropout.to_string(),
            e.forget_items.to_string(),
            m(|v| v.forget_acc_before),
            m(|v| v.forget_acc_after),
            m(|v| v.retain_acc_before),
            m(|v| v.retain_acc_after),
            e.status.name().to_string(),
            e.tx_id.map_or(String::new(), |h| h.to_hex()),
        ]
    });
    files.push((UNLEARN_FILE.into(), csv_bytes(&UNLEARN_HEADER, unlearn)));

    files.push((PUBLIC_LEDGER_FILE.into(), out.public.to_jsonl().into_bytes()));
    for (org, chain) in &out.private {
        files.push((private_ledger_file(org), chain.ledger.to_jsonl().into_bytes()));
    }
    for agent in &out.agents {
        let rows = agent.table().rows().into_iter().map(|(s, a, v)| vec![s, a.to_string(), v.to_string()]);
        files.push((qtable_file(&agent.name), csv_bytes(&["state", "action", "value"], rows)));
    }
    files.push((SUMMARY_FILE.into(), summary(out).into_bytes()));
    files.push((MODEL_FILE.into(), write_checkpoint(&out.final_model, None)));

    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// Number of accepted unlearning events recorded in a run.
pub fn accepted_unlearns(out: &SimOutput) -> usize {
    out.metrics.unlearn.iter().filter(|e| e.status == UnlearnStatus::Accepted).count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRow {
    pub agent: String,
    pub state: String,
    pub action: Action,
    pub value: f64,
}

/// Greedy action per state from an exported Q-table CSV.
pub fn policy_from_csv(agent: &str, bytes: &[u8]) -> Result<Vec<PolicyRow>, String> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| e.to_string())?.clone();
    if header.iter().collect::<Vec<_>>() != ["state", "action", "value"] {
        return Err(format!("unexpected Q-table header {header:?}"));
    }
    let mut best: Vec<PolicyRow> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let action: Action = rec[1].parse()?;
        let value: f64 = rec[2].parse().map_err(|_| format!("bad value {:?}", &rec[2]))?;
        match best.last_mut() {
            Some(row) if row.state == rec[0] => {
                if value > row.value {
                    row.action = action;
                    row.value = value;
                }
            }
            _ => best.push(PolicyRow { agent: agent.into(), state: rec[0].to_string(), action, value }),
        }
    }
    if best.len() != State::COUNT {
        return Err(format!("expected {} states, found {}", State::COUNT, best.len()));
    }
    Ok(best)
}

/// The accuracy sweep over every LoRA grid for one seed.
pub fn sweep_table(seed: u64) -> Result<Vec<SweepPoint>, UnlearnError> {
    let mut rows = Vec::new();
    for axis in [SweepAxis::Rank, SweepAxis::Alpha, SweepAxis::Dropout] {
        rows.extend(run_sweep(axis, &[seed], &UnlearnConfig::default())?);
    }
    Ok(rows)
}

pub const REPORT_TS: [u64; 4] = [0, 9, 99, 999];

pub fn time_rows(cost: &CostModel) -> Vec<TimeRow> {
    time_table(cost, &REPORT_TS)
}

pub fn render_markdown(sweep: &[SweepPoint], time: &[TimeRow], policy: &[PolicyRow]) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "## Unlearning sweep (forget-set accuracy)\n");
    let _ = writeln!(t, "| LoRA Config | Initial Accuracy | Final Accuracy |");
    let _ = writeln!(t, "|---|---|---|");
    for p in sweep {
        let _ = writeln!(t, "| {} | {} | {} |", lora_label(&p.lora), pct(p.acc_before), pct(p.acc_after));
    }
    let _ = writeln!(t, "\n## Time cost (s)\n");
    let _ = writeln!(t, "| t | Normal | Public only | Hybrid |");
    let _ = writeln!(t, "|---|---|---|---|");
    for r in time {
        let _ = writeln!(t, "| {} | {} | {} | {} |", r.t, r.normal, r.public, r.hybrid);
    }
    let _ = writeln!(t, "\n## Agent policy (greedy action)\n");
    let _ = writeln!(t, "| Agent | State | Action | Q |");
    let _ = writeln!(t, "|---|---|---|---|");
    for p in policy {
        let _ = writeln!(t, "| {} | {} | {} | {:.4} |", p.agent, p.state, p.action, p.value);
    }
    t
}

pub const SWEEP_HEADER: [&str; 6] = ["axis", "rank", "alpha", "dropout", "initial_accuracy", "final_accuracy"];
pub const TIME_HEADER: [&str; 4] = ["t", "normal_s", "public_s", "hybrid_s"];
pub const POLICY_HEADER: [&str; 4] = ["agent", "state", "action", "value"];

/// The three report tables as CSV documents: sweep, time, policy.
pub fn render_csv(sweep: &[SweepPoint], time: &[TimeRow], policy: &[PolicyRow]) -> [Vec<u8>; 3] {
    let s = sweep.iter().map(|p| {
        vec![
            p.axis.name().to_string(),
            p.lora.rank.to_string(),
            p.lora.alpha.to_string(),
            p.lora.dropout.to_string(),
            p.acc_before.to_string(),
            p.acc_after.to_string(),
        ]
    });
    let tm = time.iter().map(|r| vec![r.t.to_string(), r.normal.to_string(), r.public.to_string(), r.hybrid.to_string()]);
    let p = policy.iter().map(|r| vec![r.agent.clone(), r.state.clone(), r.action.to_string(), r.value.to_string()]);
    [csv_bytes(&SWEEP_HEADER, s), csv_bytes(&TIME_HEADER, tm), csv_bytes(&POLICY_HEADER, p)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{QParams, QTable};

    #[test]
    fn policy_round_trips_through_csv() {
        let mut t = QTable::new(QParams::default());
        t.set(State::from_index(4), Action::Abstain, 2.0);
        let rows = t.rows().into_iter().map(|(s, a, v)| vec![s, a.to_string(), v.to_string()]);
        let bytes = csv_bytes(&["state", "action", "value"], rows);
        let policy = policy_from_csv("x", &bytes).unwrap();
        assert_eq!(policy.len(), 12);
        assert_eq!(policy[4].action, Action::Abstain);
        assert_eq!(policy[0].action, Action::FullTrain);
        assert!(policy_from_csv("x", b"a,b\n").is_err());
    }

    #[test]
    fn markdown_has_table_headers() {
        let md = render_markdown(&[], &time_rows(&CostModel::default()), &[]);
        assert!(md.contains("| LoRA Config | Initial Accuracy | Final Accuracy |"));
        assert!(md.contains("| 999 | 30000 |"));
    }
}
