use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use approx::assert_abs_diff_eq;
use qfix::mixers::MixerCheckpoint;
use qfix::training::MetricRecord;
use serde_json::{json, Value};
use tempfile::TempDir;

fn qfix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfix")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_json(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string(v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn smoke(dir: &Path, mixer: &str, lr: f64) -> String {
    write_json(
        dir,
        "smoke.json",
        &json!({
            "env": {"type": "matrix", "payoff": [[8, -12, -12], [-12, 0, 0], [-12, 0, 0]]},
            "mixer": {"kind": mixer},
            "agents": {"window": 1, "hidden": 8},
            "train": {"total_steps": 120, "batch_episodes": 4, "lr": lr},
            "seeds": [3, 4],
            "eval_interval": 40,
            "eval_episodes": 2
        }),
    )
}

fn records(path: &Path) -> Vec<MetricRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn run_writes_metrics_summary_and_checkpoints() {
    let dir = TempDir::new().unwrap();
    let cfg = smoke(dir.path(), "qplusfix_sum", 5e-4);
    let out = dir.path().join("out");
    let res = qfix(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let recs = records(&out.join("metrics.jsonl"));
    assert!(recs.len() >= 2);
    let seeds: Vec<u64> = recs.iter().map(|r| r.seed).collect();
    assert!(seeds.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(recs.iter().filter(|r| r.seed == 3).map(|r| r.step).collect::<Vec<_>>(), vec![0, 40, 80, 120]);

    let mut summary = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    assert_eq!(summary.records().count(), 2);

    let ckpt = MixerCheckpoint::from_json(&fs::read_to_string(out.join("mixer_seed3.json")).unwrap()).unwrap();
    let (mixer, store) = ckpt.restore().unwrap();
    assert_eq!(mixer.kind().name(), "qplusfix_sum");
    assert_eq!(MixerCheckpoint::capture(&mixer, &store), ckpt);
}

#[test]
fn runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = smoke(dir.path(), "qmix", 5e-4);
    let read = |name: &str| {
        let out = dir.path().join(name);
        assert_eq!(code(&qfix(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
        (fs::read(out.join("metrics.jsonl")).unwrap(), fs::read(out.join("summary.csv")).unwrap())
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn existing_outputs_need_force() {
    let dir = TempDir::new().unwrap();
    let cfg = smoke(dir.path(), "vdn", 5e-4);
    let out = dir.path().join("out");
    let args = ["run", "--config", &cfg, "--out", out.to_str().unwrap()];
    assert_eq!(code(&qfix(&args)), 0);
    let before = fs::read(out.join("metrics.jsonl")).unwrap();
    assert_eq!(code(&qfix(&args)), 2);
    assert_eq!(fs::read(out.join("metrics.jsonl")).unwrap(), before);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&qfix(&forced)), 0);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = TempDir::new().unwrap();
    let base = json!({
        "env": {"type": "matrix", "payoff": [[1, 0], [0, 1]]},
        "mixer": {"kind": "qmix"},
        "seeds": [0]
    });
    let mut bad_kind = base.clone();
    bad_kind["mixer"]["kind"] = json!("qmax");
    let res = qfix(&["run", "--config", &write_json(dir.path(), "k.json", &bad_kind)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("mixer.kind"));

    let mut dup = base.clone();
    dup["seeds"] = json!([1, 1]);
    assert_eq!(code(&qfix(&["run", "--config", &write_json(dir.path(), "d.json", &dup)])), 2);

    let mut extra = base.clone();
    extra["env"]["colour"] = json!("red");
    assert_eq!(code(&qfix(&["run", "--config", &write_json(dir.path(), "e.json", &extra)])), 2);

    let p = dir.path().join("m.json");
    fs::write(&p, "{\"env\": ").unwrap();
    assert_eq!(code(&qfix(&["run", "--config", p.to_str().unwrap()])), 2);
    assert_eq!(code(&qfix(&["run", "--config", "/nonexistent/x.json"])), 2);
}

#[test]
fn divergence_exits_3_with_a_dump() {
    let dir = TempDir::new().unwrap();
    let cfg = smoke(dir.path(), "qmix", 1e300);
    let out = dir.path().join("out");
    let res = qfix(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 3);
    let dump: Value = serde_json::from_str(&fs::read_to_string(out.join("divergence_seed3.json")).unwrap()).unwrap();
    assert!(dump.is_object());
}

#[test]
fn sweep_writes_one_directory_per_mixer() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(
        dir.path(),
        "sweep.json",
        &json!({
            "base": {
                "env": {"file": configs().join("latent_env.json")},
                "mixer": {"kind": "vdn"},
                "agents": {"window": 2, "hidden": 8},
                "train": {"total_steps": 60, "batch_episodes": 4},
                "seeds": [0],
                "eval_interval": 30,
                "eval_episodes": 1
            },
            "mixers": [{"kind": "vdn"}, {"kind": "qplusfix_sum", "conditioning": "state_only"}]
        }),
    );
    let out = dir.path().join("out");
    let res = qfix(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for sub in ["00_vdn_stateless", "01_qplusfix_sum_state_only"] {
        assert!(out.join(sub).join("metrics.jsonl").exists(), "{sub}");
    }
    let mut rdr = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    assert!(rdr.headers().unwrap().iter().any(|h| h == "mixer"));
    assert_eq!(rdr.records().count(), 2);
}

#[test]
fn verify_gradients_pass_and_injected_fault_fails() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("v");
    let res = qfix(&["verify", "--suite", "grad", "--instances", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stdout));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["failures"], json!(0));

    let res = qfix(&["verify", "--suite", "igm", "--instances", "20", "--inject-fault", "qmix-sign-flip"]);
    assert_ne!(code(&res), 0);
    assert_eq!(code(&qfix(&["verify", "--suite", "nope"])), 2);
}

fn fit(dir: &Path, target: &Value, mixer: &str) -> (i32, Option<Value>) {
    let res = qfix(&["fit", "--config", &write_json(dir, "t.json", target), "--mixer", mixer]);
    let report = serde_json::from_slice(&res.stdout).ok();
    (code(&res), report)
}

#[test]
fn fit_reports_expressiveness() {
    let dir = TempDir::new().unwrap();
    // the sum of the utilities, which VDN represents exactly
    let additive = json!({"values": [[0, 1], [2, 3]], "utilities": [[0, 2], [0, 1]]});
    let (c, report) = fit(dir.path(), &additive, "vdn");
    assert_eq!(c, 0);
    let report = report.unwrap();
    assert!(report["max_abs_error"].as_f64().unwrap() < 1e-9);

    let penalty = configs().join("penalty_target.json");
    let res = qfix(&["fit", "--config", penalty.to_str().unwrap(), "--mixer", "qplusfix_sum"]);
    assert_eq!(code(&res), 0);
    let report: Value = serde_json::from_slice(&res.stdout).unwrap();
    let err = report["max_abs_error"].as_f64().unwrap();
    assert!(err < 1e-2, "{err}");
    assert_abs_diff_eq!(err, 0.0, epsilon = 1e-2);

    let non_igm = json!({"values": [[0, 5], [0, 0]], "utilities": [[1, 0], [1, 0]]});
    assert_eq!(fit(dir.path(), &non_igm, "qplusfix_sum").0, 2);
    assert_eq!(fit(dir.path(), &json!({"values": [[0, 1], [2]], "utilities": [[0, 1], [0, 1]]}), "vdn").0, 2);
    assert_eq!(fit(dir.path(), &additive, "nope").0, 2);
}
