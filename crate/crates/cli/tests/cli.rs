use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use porestack::data::Channel;
use porestack::io::read_ensemble_index;
use porestack::metrics::{Metric, MetricCurve};
use porestack::models::Family;
use porestack::rollout::{Provenance, RolloutResult};
use porestack_cli::commands::TimingReport;

const TINY: &str = r#"
families = ["ufno"]
levels = 1
[data]
simulations = 3
train_count = 2
[synth]
height = 16
width = 16
steps = 12
[training]
epochs = 2
[models.ufno]
hidden = 4
modes = 3
fourier_layers = 1
u_fourier_layers = 1
[bulk]
steps = [2, 7, 99]
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("experiment.toml"), TINY).unwrap();
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_porestack"))
        .arg("--dir")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Category from the JSON line on stderr.
fn category(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    v["error"].as_str().unwrap().to_string()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_reproducible_and_split_covers_all() {
    let (a, b) = (setup(), setup());
    ok(a.path(), &["generate"]);
    ok(b.path(), &["generate"]);
    let fa = files(&a.path().join("data"));
    assert_eq!(fa, files(&b.path().join("data")));
    let index = read_ensemble_index(&a.path().join("data")).unwrap();
    assert_eq!(index.simulations.len(), 3);
    for e in &index.simulations {
        assert!(a.path().join("data").join(&e.dir).join("manifest.json").exists());
    }
    assert_eq!(category(&run(a.path(), &["generate"])), "exists");
    ok(a.path(), &["--force", "generate"]);
    assert_eq!(files(&a.path().join("data")), fa);
    let c = setup();
    ok(c.path(), &["--seed", "9", "generate"]);
    assert_ne!(files(&c.path().join("data")), fa);
}

#[test]
fn missing_prerequisites_are_named() {
    let d = setup();
    let out = run(d.path(), &["train"]);
    assert_eq!(category(&out), "missing_input");
    assert!(String::from_utf8_lossy(&out.stderr).contains("generate"));
    ok(d.path(), &["generate"]);
    let out = run(d.path(), &["train"]);
    assert_eq!(category(&out), "missing_input");
    assert!(String::from_utf8_lossy(&out.stderr).contains("preprocess"));
}

#[test]
fn lock_blocks_second_process() {
    let d = setup();
    fs::write(d.path().join(".porestack.lock"), "1\n").unwrap();
    assert_eq!(category(&run(d.path(), &["generate"])), "locked");
    fs::remove_file(d.path().join(".porestack.lock")).unwrap();
    ok(d.path(), &["generate"]);
    assert!(!d.path().join(".porestack.lock").exists());
}

#[test]
fn bad_flags_fail_with_categories() {
    let d = setup();
    assert_eq!(category(&run(d.path(), &["--features", "5", "generate"])), "config");
    assert_eq!(category(&run(d.path(), &["--device", "tpu", "generate"])), "unsupported");
    assert_eq!(category(&run(d.path(), &["frobnicate"])), "usage");
}

#[test]
fn full_pipeline() {
    let d = setup();
    let dir = d.path();
    ok(dir, &["generate"]);
    ok(dir, &["preprocess"]);
    ok(dir, &["train"]);
    let log = fs::read_to_string(dir.join("models/ufno/level_0_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2, "one row per epoch");
    let level0 = fs::read(dir.join("models/ufno/level_0.json")).unwrap();
    ok(dir, &["stack"]);
    assert_eq!(fs::read(dir.join("models/ufno/level_0.json")).unwrap(), level0);
    assert!(dir.join("models/ufno/level_1.json").exists());
    assert!(ok(dir, &["stack"]).contains("already has 1"));

    let timing = ok(dir, &["rollout"]);
    assert!(timing.contains("Forward Time (ms)"));
    assert!(timing.contains("Rollout Time (s)"));
    assert!(timing.contains("10^3 to 10^4"));
    for l in 0..=1 {
        let t: TimingReport =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("results/ufno/L{l}/timing.json"))).unwrap())
                .unwrap();
        assert!(t.mean_forward_ms > 0.0 && t.total_rollout_s > 0.0);
        assert_eq!(t.trajectories, 1);
    }
    assert_eq!(category(&run(dir, &["rollout"])), "exists");

    ok(dir, &["eval"]);
    for ch in Channel::PHYSICAL {
        for m in ["pcc", "mse"] {
            assert!(dir.join(format!("eval/ufno/L0/{m}_{ch}.svg")).exists());
            assert!(dir.join(format!("eval/{m}_{ch}.svg")).exists());
        }
    }
    ok(dir, &["bulk"]);
    ok(dir, &["report"]);
    let report = fs::read(dir.join("report.md")).unwrap();
    let text = String::from_utf8(report.clone()).unwrap();
    assert!(text.contains("| ufno | 0 |"));
    assert!(text.contains("| ufno | 1 |"));
    assert!(text.contains("gap: requested steps [99]"));
    assert!(text.contains("Forward Time (ms)"));
    ok(dir, &["report"]);
    assert_eq!(fs::read(dir.join("report.md")).unwrap(), report);
}

#[test]
fn stack_refuses_mismatched_statistics() {
    let d = setup();
    let dir = d.path();
    ok(dir, &["generate"]);
    ok(dir, &["preprocess"]);
    ok(dir, &["train"]);
    let p = dir.join("stats.json");
    let mut stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    let mean = stats["inputs"][0]["mean"].as_f64().unwrap();
    stats["inputs"][0]["mean"] = serde_json::json!(mean + 0.5);
    fs::write(&p, serde_json::to_string(&stats).unwrap()).unwrap();
    let out = run(dir, &["stack"]);
    assert_eq!(category(&out), "mismatch");
    assert!(!dir.join("models/ufno/level_1.json").exists());
}

#[test]
fn eval_of_perfect_results_is_flat() {
    let d = setup();
    let dir = d.path();
    ok(dir, &["generate"]);
    let ens = porestack::io::read_ensemble::<f64>(&dir.join("data")).unwrap();
    let sim = &ens.part(porestack::data::Split::Validation)[0];
    let steps = sim.states().to_vec();
    let n = steps.len();
    let res = RolloutResult {
        sim_id: sim.id.clone(),
        m: 5,
        n: 5,
        states: steps,
        provenance: (0..n).map(|i| if i < 5 { Provenance::Truth } else { Provenance::Predicted }).collect(),
        anchors: vec![5],
        iteration_seconds: vec![0.01],
        forwards_per_iteration: 1,
    };
    let rdir = dir.join("results/tau/L0");
    res.save(&rdir.join(&sim.id)).unwrap();
    let timing = TimingReport {
        family: Family::Tau,
        level: 0,
        parameters: 0,
        trajectories: 1,
        forwards: 1,
        mean_forward_ms: 10.0,
        std_forward_ms: 0.0,
        mean_rollout_s: 0.01,
        total_rollout_s: 0.01,
    };
    fs::write(rdir.join("timing.json"), serde_json::to_string(&timing).unwrap()).unwrap();
    ok(dir, &["eval", "--family", "tau"]);
    let cs: Vec<MetricCurve> =
        serde_json::from_str(&fs::read_to_string(dir.join("eval/tau/L0/curves.json")).unwrap()).unwrap();
    for c in &cs {
        for v in c.values.iter().flatten() {
            match c.metric {
                Metric::Pcc => assert!((v - 1.0).abs() < 1e-12, "{} pcc {v}", c.channel),
                Metric::Mse => assert_eq!(*v, 0.0),
            }
        }
    }
    let eps = cs.iter().find(|c| c.channel == Channel::Eps && c.metric == Metric::Pcc).unwrap();
    assert!(eps.values.iter().all(|v| v.is_some()));
    let csv = fs::read_to_string(dir.join("eval/tau/L0/curves.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("eps,pcc,5,1,1")));
    for ch in Channel::PHYSICAL {
        assert!(dir.join(format!("eval/tau/L0/pcc_{ch}.svg")).exists());
    }
}
