use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use fedchain_core::chain::{parse_jsonl, verify_jsonl, Ledger, VerifyError};
use fedchain_core::data::{split_forget, FeatureHasher, Selector};
use fedchain_core::model::{read_checkpoint, write_checkpoint};
use fedchain_core::sim::engine::{agent_name, build_registry, public_policy, verification_set, PUBLIC_CHANNEL};
use fedchain_core::sim::report::{
    policy_from_csv, qtable_file, render_csv, render_markdown, sweep_table, time_rows, METRICS_FILE, MODEL_FILE,
    PUBLIC_LEDGER_FILE, SCENARIO_FILE, SUMMARY_FILE,
};
use fedchain_core::sim::{derive_seed, emit_report, run_scenario, Scenario, ScenarioError, SimError};
use fedchain_core::unlearning::{
    unlearn_lora, verify_and_submit, LoraConfig, SubmitTarget, UnlearnConfig, UnlearnError, UnlearnRequest,
};

const SEED_ENV: &str = "FEDCHAIN_SEED";

#[derive(Parser)]
#[command(name = "fedchain", version, about = "Hybrid-chain federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed and FEDCHAIN_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unlearn a data subset from a finished run's final model.
    Unlearn(UnlearnArgs),
    /// Check an exported ledger.
    VerifyLedger {
        #[arg(long)]
        ledger: PathBuf,
    },
    /// Regenerate the summary tables of a finished run.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
    },
}

#[derive(clap::Args)]
struct UnlearnArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Directory of the prior run.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    org: String,
    /// label:N, keyword:W or random:F
    #[arg(long)]
    selector: String,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau_forget: Option<f64>,
    /// Allowed retain-accuracy drop in percentage points.
    #[arg(long)]
    tau_retain: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

/// LoRA settings used when neither flags nor the scenario give any.
const CLI_LORA: LoraConfig = LoraConfig { rank: 32, alpha: 2.0, dropout: 0.1 };

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: error.into() }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        config(anyhow!("invalid scenario: {e}"))
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(e) => e.into(),
            e => runtime(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn resolve_seed(flag: Option<u64>, env: Option<String>, scenario: u64) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v.trim().parse().map_err(|_| config(anyhow!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(scenario),
    }
}

fn cmd_run(scenario: &Path, seed: Option<u64>, out: &Path) -> CmdResult {
    let mut s = Scenario::load(scenario)?;
    s.seed = resolve_seed(seed, std::env::var(SEED_ENV).ok(), s.seed)?;
    let output = run_scenario(&s)?;
    emit_report(&output, out).with_context(|| format!("cannot write outputs to {}", out.display())).map_err(runtime)?;
    let last = output.metrics.rounds.last().expect("at least one round");
    println!("scenario {} seed {}", s.name, s.seed);
    println!("rounds {} final accuracy {:.4} model version {}", output.metrics.rounds.len(), last.global_accuracy, last.model_version);
    println!("simulated time {} s", output.clock.now());
    println!("outputs in {}", out.display());
    Ok(())
}

fn read_prior(out: &Path, name: &str) -> Result<Vec<u8>, Failure> {
    let path = out.join(name);
    fs::read(&path).with_context(|| format!("prior run output {} is missing", path.display())).map_err(runtime)
}

fn unlearn_config(args: &UnlearnArgs, s: &Scenario) -> Result<UnlearnConfig, Failure> {
    let mut cfg = s.unlearning.config.unwrap_or(UnlearnConfig { lora: CLI_LORA, ..UnlearnConfig::default() });
    if let Some(r) = args.r {
        cfg.lora.rank = r;
    }
    if let Some(a) = args.alpha {
        cfg.lora.alpha = a;
    }
    if let Some(d) = args.dropout {
        cfg.lora.dropout = d;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    cfg.validate().map_err(config)?;
    Ok(cfg)
}

fn cmd_unlearn(args: &UnlearnArgs) -> CmdResult {
    let s = Scenario::load(&args.scenario)?;
    if s.org(&args.org).is_none() {
        return Err(config(anyhow!("unknown organization {:?} in {}", args.org, args.scenario.display())));
    }
    let selector: Selector = args.selector.parse().map_err(config)?;
    selector.validate(s.classes).map_err(config)?;
    let cfg = unlearn_config(args, &s)?;
    let mut criteria = s.unlearning.criteria;
    criteria.tau_forget = args.tau_forget.unwrap_or(criteria.tau_forget);
    criteria.tau_retain = args.tau_retain.unwrap_or(criteria.tau_retain);
    criteria.validate().map_err(|e| config(anyhow!(e)))?;

    let recorded = String::from_utf8(read_prior(&args.out, SCENARIO_FILE)?).map_err(runtime)?;
    let run = Scenario::from_json(&recorded).map_err(|e| runtime(anyhow!("recorded scenario is invalid: {e}")))?;
    if run.name != s.name {
        return Err(config(anyhow!("{} holds a run of {:?}, not {:?}", args.out.display(), run.name, s.name)));
    }
    let (global, _) = read_checkpoint(&read_prior(&args.out, MODEL_FILE)?).map_err(runtime)?;
    let ledger_bytes = read_prior(&args.out, PUBLIC_LEDGER_FILE)?;
    let blocks = parse_jsonl(&ledger_bytes).map_err(runtime)?;
    let now = blocks.last().map_or(0, |b| b.timestamp);

    let (registry, _) = build_registry(&run, 0)?;
    let mut public = Ledger::from_blocks(PUBLIC_CHANNEL, public_policy(&registry), blocks).map_err(runtime)?;
    let org_index = run.orgs.iter().position(|o| o.id == args.org).ok_or_else(|| {
        config(anyhow!("organization {:?} took no part in the run in {}", args.org, args.out.display()))
    })?;
    let (datasets, validation) = run.materialize()?;
    let hasher = FeatureHasher::new(run.feature_dims).map_err(runtime)?;

    let (forget, _) = split_forget(&datasets[org_index], &selector, derive_seed(run.seed, "cli/forget")).map_err(runtime)?;
    let request = UnlearnRequest {
        org: args.org.clone(),
        forget: forget.samples(&hasher),
        config: cfg,
        seed: derive_seed(run.seed, &format!("cli/unlearn/{}/{selector}", args.org)),
    };
    let mut result = unlearn_lora(&global, &request).map_err(runtime)?;
    let check = verification_set(&validation, &selector, &hasher);
    let agent = agent_name(&args.org, 0);
    let token = registry.issue_token(&agent, now).map_err(runtime)?;
    println!(
        "org {} selector {} forget items {} lora r={} alpha={} dropout={} epochs={} lr={}",
        args.org,
        selector,
        forget.len(),
        cfg.lora.rank,
        cfg.lora.alpha,
        cfg.lora.dropout,
        cfg.epochs,
        cfg.learning_rate
    );

    let target = SubmitTarget { registry: &registry, public: &mut public, collection: None, now };
    let outcome = verify_and_submit(&mut result, &global, &request.forget, &check, &criteria, &token, target);
    let metrics = match &outcome {
        Ok(sub) => sub.metrics.clone(),
        Err(UnlearnError::CriteriaNotMet { metrics, .. }) => metrics.clone(),
        Err(_) => {
            return Err(runtime(outcome.expect_err("error arm")));
        }
    };
    println!("forget accuracy {:.4} -> {:.4}", metrics.forget_acc_before, metrics.forget_acc_after);
    println!("retain accuracy {:.4} -> {:.4}", metrics.retain_acc_before, metrics.retain_acc_after);
    match outcome {
        Ok(sub) => {
            let delta_file = args.out.join(format!("unlearn_delta_{}.ckpt", sub.delta_digest));
            fs::write(&delta_file, write_checkpoint(&result.params_delta, None)).map_err(runtime)?;
            fs::write(args.out.join(PUBLIC_LEDGER_FILE), public.to_jsonl()).map_err(runtime)?;
            println!("accepted tx {}", sub.tx_id);
            println!("delta {}", delta_file.display());
            Ok(())
        }
        Err(e) => Err(Failure { code: 3, error: anyhow!("rejected: {e}") }),
    }
}

fn cmd_verify_ledger(path: &Path) -> CmdResult {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display())).map_err(config)?;
    match verify_jsonl(&bytes) {
        Ok(report) => {
            println!("ok: {} blocks, final state digest {}", report.blocks, report.final_state_digest);
            Ok(())
        }
        Err(VerifyError::Empty) => Err(config(anyhow!("{} is empty, not a ledger export", path.display()))),
        Err(e @ VerifyError::BadBlock { .. }) => Err(runtime(e)),
    }
}

fn cmd_report(out: &Path, format: Format) -> CmdResult {
    let stale = |what: String| config(anyhow!("{} is missing or stale: {what}", out.display()));
    let read = |name: &str| fs::read(out.join(name)).map_err(|_| stale(format!("{name} not found")));
    let s = Scenario::from_json(&String::from_utf8_lossy(&read(SCENARIO_FILE)?)).map_err(|e| stale(e.to_string()))?;
    read(SUMMARY_FILE)?;
    read(PUBLIC_LEDGER_FILE)?;
    read(MODEL_FILE)?;
    let metrics = read(METRICS_FILE)?;
    let rows = csv::Reader::from_reader(metrics.as_slice()).records().count();
    if rows != s.global_epochs {
        return Err(stale(format!("{METRICS_FILE} has {rows} rounds, scenario has {}", s.global_epochs)));
    }
    let mut policy = Vec::new();
    for org in &s.orgs {
        for i in 0..org.agents {
            let name = agent_name(&org.id, i);
            let bytes = read(&qtable_file(&name))?;
            policy.extend(policy_from_csv(&name, &bytes).map_err(|e| stale(e))?);
        }
    }
    let sweep = sweep_table(s.seed).map_err(runtime)?;
    let time = time_rows(&s.cost);
    match format {
        Format::Md => {
            let md = render_markdown(&sweep, &time, &policy);
            fs::write(out.join("report.md"), &md).map_err(runtime)?;
            print!("{md}");
        }
        Format::Csv => {
            let [a, b, c] = render_csv(&sweep, &time, &policy);
            for (name, bytes) in [("report_sweep.csv", a), ("report_time.csv", b), ("report_policy.csv", c)] {
                let path = out.join(name);
                fs::write(&path, bytes).map_err(runtime)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenario, seed, out } => cmd_run(scenario, *seed, out),
        Command::Unlearn(args) => cmd_unlearn(args),
        Command::VerifyLedger { ledger } => cmd_verify_ledger(ledger),
        Command::Report { out, format } => cmd_report(out, *format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
