use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ovl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovl"))
        .args(args)
        .env_remove("OVL_SEED")
        .output()
        .expect("binary runs")
}

fn ovl_env(args: &[&str], seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovl"))
        .args(args)
        .env("OVL_SEED", seed)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Reference fixture with a shorter training schedule.
fn small_fixture(dir: &Path, seed: &str) {
    let o = ovl(&["fixture", "--out-dir", p(dir), "--seed", seed]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg_path = dir.join("config.json");
    let mut cfg = json(&cfg_path);
    cfg["epochs"] = 2.into();
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn joint_check_passes_and_is_deterministic() {
    let args = [
        "bounds",
        "verify-joint",
        "--alphabet",
        "8",
        "--m",
        "200",
        "--delta",
        "0.1",
        "--trials",
        "1000",
        "--seed",
        "7",
    ];
    let a = ovl(&args);
    assert_eq!(code(&a), 0);
    let b = ovl(&args);
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert!(report["violation_rate"].as_f64().unwrap() <= 0.1);
    assert_eq!(report.as_object().unwrap().len(), 7);
}

#[test]
fn bad_flags_exit_2() {
    let zero = ovl(&[
        "bounds",
        "verify-joint",
        "--alphabet",
        "8",
        "--m",
        "200",
        "--delta",
        "0.1",
        "--trials",
        "0",
    ]);
    assert_eq!(code(&zero), 2);
    assert_eq!(
        code(&ovl(&["bounds", "verify-joint", "--alphabet", "8"])),
        2
    );
    assert_eq!(
        code(&ovl(&[
            "bounds",
            "verify-posterior",
            "--n-yu",
            "3",
            "--n-ye",
            "5",
            "--m",
            "10",
            "--delta",
            "0.1",
            "--trials",
            "10"
        ])),
        2
    );
    assert_eq!(code(&ovl(&["frobnicate"])), 2);
}

#[test]
fn violated_budget_exits_1() {
    // A zero budget fails as soon as a single trial violates; tiny m makes
    // that likely, and the report is still written.
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r.json");
    let o = ovl(&[
        "bounds",
        "verify-posterior",
        "--n-yu",
        "10",
        "--n-ye",
        "5",
        "--m",
        "1",
        "--delta",
        "0.9",
        "--trials",
        "2000",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    let report = json(&out);
    let rate = report["violation_rate"].as_f64().unwrap();
    assert_eq!(code(&o), if rate <= 0.9 { 0 } else { 1 });
    assert!(o.stdout.is_empty());
}

#[test]
fn generate_writes_only_generated_samples() {
    let dir = TempDir::new().unwrap();
    small_fixture(dir.path(), "1");
    let cfg = dir.path().join("config.json");
    assert_eq!(code(&ovl(&["generate", "--config", p(&cfg)])), 0);
    let gen = json(&dir.path().join("generated.json"));
    let samples = gen["samples"].as_array().unwrap();
    assert!(!samples.is_empty());
    assert!(samples
        .iter()
        .all(|s| s["provenance"] == "generated_unseen" || s["provenance"] == "generated_seen"));
    let first = std::fs::read(dir.path().join("generated.json")).unwrap();
    assert_eq!(code(&ovl(&["generate", "--config", p(&cfg)])), 0);
    assert_eq!(
        first,
        std::fs::read(dir.path().join("generated.json")).unwrap()
    );
}

#[test]
fn k0_beyond_pool_generates_every_candidate() {
    let dir = TempDir::new().unwrap();
    small_fixture(dir.path(), "1");
    let cfg = dir.path().join("config.json");
    let out = dir.path().join("all.json");
    assert_eq!(
        code(&ovl(&[
            "generate",
            "--config",
            p(&cfg),
            "--k0",
            "1000",
            "--out",
            p(&out)
        ])),
        0
    );
    let gen = json(&out);
    let new = gen["classes"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["role"] == "new")
        .count();
    let pool = json(&dir.path().join("taxonomy.json"))["candidates"]
        .as_array()
        .unwrap()
        .len();
    assert_eq!(new, pool);
}

#[test]
fn zero_epochs_checkpoint_is_initialization() {
    let dir = TempDir::new().unwrap();
    small_fixture(dir.path(), "2");
    let cfg = dir.path().join("config.json");
    assert_eq!(code(&ovl(&["generate", "--config", p(&cfg)])), 0);
    assert_eq!(
        code(&ovl(&["train", "--config", p(&cfg), "--epochs", "0"])),
        0
    );
    let ck = json(&dir.path().join("run/checkpoint.json"));
    for key in ["v1", "v2"] {
        let v = ck[key].as_array().unwrap();
        assert_eq!(v.len(), 16);
        assert!(v.iter().all(|x| x.as_f64() == Some(0.0)));
    }
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert!(metrics.is_empty());
}

#[test]
fn zero_weights_still_report_alignment_losses() {
    let dir = TempDir::new().unwrap();
    small_fixture(dir.path(), "2");
    let cfg = dir.path().join("config.json");
    assert_eq!(code(&ovl(&["generate", "--config", p(&cfg)])), 0);
    assert_eq!(
        code(&ovl(&[
            "train",
            "--config",
            p(&cfg),
            "--alpha",
            "0",
            "--beta",
            "0"
        ])),
        0
    );
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let aligned: Vec<&serde_json::Value> = rows.iter().filter(|r| r["aligned"] == true).collect();
    assert!(!aligned.is_empty());
    for r in aligned {
        assert!(r["l_kl"].is_f64() && r["l_mmd"].is_f64());
        assert_eq!(r["l_total"], r["l_ce"]);
    }
}

#[test]
fn missing_inputs_and_unknown_config_keys_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"dataset": "nope.json", "generated": "nope.json", "output": "o"}"#,
    )
    .unwrap();
    assert_eq!(code(&ovl(&["train", "--config", p(&cfg)])), 2);
    std::fs::write(&cfg, r#"{"seed": 1, "learning_rate": 0.1}"#).unwrap();
    assert_eq!(code(&ovl(&["train", "--config", p(&cfg)])), 2);
    assert_eq!(code(&ovl(&["eval"])), 2);
}

#[test]
fn seed_precedence() {
    let dir = TempDir::new().unwrap();
    small_fixture(dir.path(), "5");
    let cfg = dir.path().join("config.json");
    let out = |name: &str| dir.path().join(name);
    assert_eq!(
        code(&ovl(&[
            "generate",
            "--config",
            p(&cfg),
            "--out",
            p(&out("cfg.json"))
        ])),
        0
    );
    assert_eq!(
        code(&ovl(&[
            "generate",
            "--config",
            p(&cfg),
            "--seed",
            "9",
            "--out",
            p(&out("flag.json"))
        ])),
        0
    );
    assert_eq!(
        code(&ovl_env(
            &[
                "generate",
                "--config",
                p(&cfg),
                "--out",
                p(&out("env.json"))
            ],
            "9"
        )),
        0
    );
    assert_eq!(
        code(&ovl_env(
            &[
                "generate",
                "--config",
                p(&cfg),
                "--seed",
                "5",
                "--out",
                p(&out("both.json"))
            ],
            "9"
        )),
        0
    );
    let read = |n: &str| std::fs::read(out(n)).unwrap();
    assert_eq!(read("flag.json"), read("env.json"));
    assert_eq!(read("cfg.json"), read("both.json"));
    assert_ne!(read("cfg.json"), read("flag.json"));
    assert_eq!(
        code(&ovl_env(&["generate", "--config", p(&cfg)], "seven")),
        2
    );
}

fn write_symmetric_fixture(dir: &Path) {
    // Two classes on the axes; every feature sits near the diagonal with the
    // offset alternating sides, so an untrained model is right half the time.
    let mut samples = Vec::new();
    for (class, n) in [("a", 50), ("b", 50)] {
        for i in 0..n {
            let e = 0.05 + 0.01 * (i / 2) as f64;
            let e = if i % 2 == 0 { e } else { -e };
            samples.push(serde_json::json!({"class": class, "feature": [1.0 + e, 1.0 - e], "provenance": "seen"}));
        }
    }
    let test = serde_json::json!({
        "meta": {"d": 2},
        "classes": [
            {"name": "a", "superclass": "s", "embedding": [1.0, 0.0], "role": "base"},
            {"name": "b", "superclass": "s", "embedding": [0.0, 1.0], "role": "new"}
        ],
        "samples": samples
    });
    std::fs::write(dir.join("test.json"), test.to_string()).unwrap();
    std::fs::write(
        dir.join("checkpoint.json"),
        r#"{"v1": [0.0, 0.0], "v2": [0.0, 0.0]}"#,
    )
    .unwrap();
}

#[test]
fn untrained_eval_is_at_chance_on_symmetric_fixture() {
    let dir = TempDir::new().unwrap();
    write_symmetric_fixture(dir.path());
    let o = ovl(&[
        "eval",
        "--checkpoint",
        p(&dir.path().join("checkpoint.json")),
        "--test",
        p(&dir.path().join("test.json")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["acc_base", "acc_new"] {
        assert!((r[key].as_f64().unwrap() - 0.5).abs() <= 0.1);
    }
}

#[test]
fn ablate_cardinality_and_table() {
    let dir = TempDir::new().unwrap();
    let mut bench: serde_json::Value =
        serde_json::from_str(ovl_core::evalbench::REFERENCE_BENCHMARK_JSON).unwrap();
    bench["epochs"] = 1.into();
    bench["test_per_class"] = 10.into();
    let bench_path = dir.path().join("bench.json");
    std::fs::write(&bench_path, bench.to_string()).unwrap();
    let out = dir.path().join("reports.json");
    let o = ovl(&[
        "ablate",
        "--benchmark",
        p(&bench_path),
        "--seeds",
        "0,1,2,3,4",
        "--variants",
        "Ours,no-domain",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports = json(&out);
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 10);
    let table = String::from_utf8(o.stdout).unwrap();
    for (line, r) in table.lines().skip(1).zip(reports) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        for (i, key) in [(2, "acc_base"), (3, "acc_new"), (4, "h")] {
            assert_eq!(cols[i], format!("{:.2}", r[key].as_f64().unwrap()));
        }
    }
    assert_eq!(code(&ovl(&["ablate", "--variants", "Ours,Theirs"])), 2);
}
