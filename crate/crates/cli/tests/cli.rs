use std::io::Write;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn cli(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_sparse-bai"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn");
    // The child may exit before reading stdin.
    let _ = child.stdin.take().unwrap().write_all(stdin.as_bytes());
    child.wait_with_output().expect("wait")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json output")
}

const INSTANCE: &str = r#"{"arms":[[1,0,0],[0,1,0],[0,0,1],[0.5,0.5,0]],"theta_star":[1,0.5,0],"s":2}"#;

#[test]
fn design_g_on_orthonormal_arms_is_uniform() {
    let v = json(&cli(&["design", "--kind", "g"], "[[1,0],[0,1]]"));
    let w: Vec<f64> = serde_json::from_value(v["weights"].clone()).unwrap();
    assert!(w.iter().all(|x| (x - 0.5).abs() < 1e-6));
    assert!((v["objective"].as_f64().unwrap() - 2.0).abs() < 1e-6);
    assert!(v["certificate_gap"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn design_e_accepts_wrapped_arms() {
    let v = json(&cli(&["design", "--kind", "e"], r#"{"arms":[[2,0],[0,1]]}"#));
    // max min(4w, 1-w) at w = 1/5
    assert!((v["objective"].as_f64().unwrap() - 0.8).abs() < 1e-5);
}

#[test]
fn design_xy_runs() {
    let v = json(&cli(&["design", "--kind", "xy"], "[[1,0],[0,1],[1,1]]"));
    let w: Vec<f64> = serde_json::from_value(v["weights"].clone()).unwrap();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn estimate_matches_soft_threshold() {
    // X^T X = 4 I with n = 4, so theta = soft(X^T y / 4, lambda / 2).
    let req = r#"{"X":[[1,1],[1,-1],[-1,1],[-1,-1]],"y":[3,1,-1,-3],"lambda_init":0.2,"lambda_thres":0.5}"#;
    let v = json(&cli(&["estimate"], req));
    let theta: Vec<f64> = serde_json::from_value(v["theta"].clone()).unwrap();
    assert!((theta[0] - 1.9).abs() < 1e-6, "{theta:?}");
    assert!((theta[1] - 0.9).abs() < 1e-6, "{theta:?}");
    assert_eq!(v["support"], serde_json::json!([0, 1]));
}

#[test]
fn run_explicit_lasso_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("instance.json");
    std::fs::write(&path, INSTANCE).unwrap();
    let p = path.to_str().unwrap();
    let args = [
        "run", "--algo", "lasso-od", "--T", "600", "--T1", "300", "--lambda-init", "0.05", "--lambda-thres", "0.2",
        "--seed", "9", p,
    ];
    let a = json(&cli(&args, ""));
    let b = json(&cli(&args, ""));
    assert_eq!(a, b);
    assert_eq!(a["phase1_budget"], 300);
    assert_eq!(a["phase2_budget"], 300);
    assert_eq!(a["chosen_arm"], 0);
}

#[test]
fn run_every_algorithm() {
    for algo in ["odlinbai", "gse", "lasso-od", "lasso-xy", "popart-od"] {
        let v = json(&cli(&["run", "--algo", algo, "--T", "800"], INSTANCE));
        assert!(v["chosen_arm"].as_u64().unwrap() < 4, "{algo}");
    }
}

#[test]
fn run_rejects_unknown_algorithm() {
    let out = cli(&["run", "--algo", "bayesgap", "--T", "100"], INSTANCE);
    assert!(!out.status.success());
}

#[test]
fn bounds_reports_applicable_bounds() {
    let req = r#"{"K":4,"d":4,"s":2,"T":1000,"T1":200,"lambda_init":0.4,"lambda_thres":0.2,
                  "theta_min":1.0,"b":0.1,"x_max_sq":1.0,"gaps":[0.5,1,1]}"#;
    let v = json(&cli(&["bounds"], req));
    assert!(v["s1"].as_u64().unwrap() >= 2);
    assert_eq!(v["hypothesis_holds"], true);
    assert!(v["theorem1"]["raw"].as_f64().unwrap() > 0.0);
    assert!(v["theorem3"].is_object());
}

#[test]
fn bounds_rejects_malformed_input() {
    let out = cli(&["bounds"], "{}");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_writes_reproducible_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"generator":{"family":"A","d":6,"K":8,"s":2},
            "algorithms":[{"name":"odlinbai"},
                          {"name":"lasso-od","mode":"explicit","t1_fraction":0.5,"lambda_init":0.05,"lambda_thres":0.3}],
            "budgets":[300,600],"trials":20,"base_seed":5}"#,
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = cli(&["bench", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], "");
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let mut lines = a.lines();
    assert_eq!(
        lines.next().unwrap(),
        "family,algo,d,K,s,T,trials,errors,p_hat,stderr,mean_support,seconds"
    );
    assert_eq!(lines.count(), 4);
}

#[test]
fn bench_fails_on_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"generator":{"family":"A","d":6,"K":8,"s":2},"algorithms":[{"name":"gse"}],"budgets":[600,300]}"#,
    )
    .unwrap();
    let out = dir.path().join("out.csv");
    let o = cli(&["bench", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], "");
    assert!(!o.status.success());
}

#[test]
fn bench_exits_nonzero_on_solver_failure() {
    // The analytical split leaves too few phase-two pulls at this budget.
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"generator":{"family":"A","d":6,"K":8,"s":2},"algorithms":[{"name":"lasso-od"}],"budgets":[300],"trials":5}"#,
    )
    .unwrap();
    let out = dir.path().join("out.csv");
    let o = cli(&["bench", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], "");
    assert_eq!(o.status.code(), Some(1));
    let csv = std::fs::read_to_string(out).unwrap();
    assert_eq!(csv.lines().count(), 2);
}
