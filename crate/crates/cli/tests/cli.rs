use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedchain"));
    c.env_remove("FEDCHAIN_SEED");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_education(out: &Path, extra: &[&str]) -> Output {
    let s = scenario("education_alliance.json");
    let mut args = vec!["run", "--scenario", s.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_education(dir.path(), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["metrics.csv", "ledger_public.jsonl", "summary.txt", "final_model.ckpt", "scenario.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(stdout(&o).contains("final accuracy"));
}

#[test]
fn missing_scenario_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "--scenario", "/no/such/file.json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/no/such/file.json"), "{}", stderr(&o));
}

#[test]
fn invalid_scenario_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut v: serde_json::Value =
        serde_json::from_slice(&fs::read(scenario("education_alliance.json")).unwrap()).unwrap();
    v["orgs"][1]["agents"] = serde_json::json!(0);
    fs::write(&path, v.to_string()).unwrap();
    let o = run(&["run", "--scenario", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("orgs[1].agents"), "{}", stderr(&o));
}

#[test]
fn seed_flag_overrides_and_reproduces() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(code(&run_education(a.path(), &["--seed", "11"])), 0);
    assert_eq!(code(&run_education(b.path(), &["--seed", "11"])), 0);
    assert_eq!(code(&run_education(c.path(), &[])), 0);
    assert_eq!(tree(a.path()), tree(b.path()));
    assert_ne!(tree(a.path()), tree(c.path()));
    assert!(fs::read_to_string(a.path().join("scenario.json")).unwrap().contains("\"seed\": 11"));
}

#[test]
fn env_seed_sits_below_the_flag() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = scenario("education_alliance.json");
    let with_env = |out: &Path, extra: &[&str]| {
        let mut args = vec!["run", "--scenario", s.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        bin().env("FEDCHAIN_SEED", "5").args(&args).output().unwrap()
    };
    assert_eq!(code(&with_env(a.path(), &[])), 0);
    assert!(fs::read_to_string(a.path().join("scenario.json")).unwrap().contains("\"seed\": 5"));
    assert_eq!(code(&with_env(b.path(), &["--seed", "6"])), 0);
    assert!(fs::read_to_string(b.path().join("scenario.json")).unwrap().contains("\"seed\": 6"));
}

fn unlearn(out: &Path, org: &str, extra: &[&str]) -> Output {
    let s = scenario("education_alliance.json");
    let mut args =
        vec!["unlearn", "--scenario", s.to_str().unwrap(), "--out", out.to_str().unwrap(), "--org", org, "--selector", "label:0"];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn unlearn_accepts_rejects_and_checks_org() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_education(dir.path(), &[])), 0);
    let ledger = dir.path().join("ledger_public.jsonl");
    let before = fs::read(&ledger).unwrap();

    let o = unlearn(dir.path(), "uni-north", &["--tau-forget", "0"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stdout(&o).contains("forget accuracy"));
    assert_eq!(fs::read(&ledger).unwrap(), before);

    let o = unlearn(dir.path(), "nowhere", &[]);
    assert_eq!(code(&o), 2);

    let o = unlearn(dir.path(), "uni-north", &["--epochs", "7"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("accepted tx ")).unwrap().to_string();
    let tx = line.trim_start_matches("accepted tx ");
    let after = fs::read_to_string(&ledger).unwrap();
    assert!(after.contains(tx));
    assert_eq!(after.lines().count(), before.split(|&b| b == b'\n').count());
    let o = run(&["verify-ledger", "--ledger", ledger.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn unlearn_without_prior_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = unlearn(dir.path(), "uni-north", &[]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_ledger_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_education(dir.path(), &[])), 0);
    let ledger = dir.path().join("ledger_public.jsonl");
    assert_eq!(code(&run(&["verify-ledger", "--ledger", ledger.to_str().unwrap()])), 0);

    let mut bytes = fs::read(&ledger).unwrap();
    let second = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
    bytes[second + 30] ^= 0x01;
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, &bytes).unwrap();
    let o = run(&["verify-ledger", "--ledger", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("block 1"), "{}", stderr(&o));

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, b"").unwrap();
    assert_eq!(code(&run(&["verify-ledger", "--ledger", empty.to_str().unwrap()])), 2);
}

#[test]
fn report_formats_and_staleness() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_education(dir.path(), &[])), 0);
    let out = dir.path().to_str().unwrap();

    let o = run(&["report", "--out", out, "--format", "md"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = stdout(&o);
    assert!(md.contains("| LoRA Config | Initial Accuracy | Final Accuracy |"));
    assert!(md.contains("| 999 | 30000 |"));
    assert!(md.contains("uni-east-agent0"));

    let o = run(&["report", "--out", out, "--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let time = fs::read_to_string(dir.path().join("report_time.csv")).unwrap();
    assert!(time.starts_with("t,normal_s,public_s,hybrid_s\n0,30,"));
    let sweep = fs::read_to_string(dir.path().join("report_sweep.csv")).unwrap();
    assert!(sweep.starts_with("axis,rank,alpha,dropout,initial_accuracy,final_accuracy\n"));
    let policy = fs::read_to_string(dir.path().join("report_policy.csv")).unwrap();
    assert_eq!(policy.lines().count(), 1 + 5 * 12);

    let metrics = dir.path().join("metrics.csv");
    let text = fs::read_to_string(&metrics).unwrap();
    let trimmed: Vec<&str> = text.lines().take(2).collect();
    fs::write(&metrics, trimmed.join("\n") + "\n").unwrap();
    assert_eq!(code(&run(&["report", "--out", out])), 2);

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["report", "--out", empty.path().to_str().unwrap()])), 2);
}
