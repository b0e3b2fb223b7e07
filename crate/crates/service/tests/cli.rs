use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use myoband::recording::{read_recording, session_path};

fn myoband(args: &[&str], data_dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_myoband"))
        .args(args)
        .arg("--data-dir")
        .arg(data_dir)
        .env_remove("MYOBAND_CONFIG")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn generate_then_quality_report_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    myoband(&["synth", "generate", "--subjects", "2", "--days", "2", "--blocks", "1"], dir.path());
    for (s, d) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        let rec = read_recording(&session_path(dir.path(), s, d)).unwrap();
        assert_eq!(rec.rows(), 12 * 5000);
        assert_eq!((rec.meta.subject_id, rec.meta.day_id), (s, d));
    }
    let out = stdout(&myoband(&["quality", "report", "--from-data", "--subjects", "2"], dir.path()));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "mode,SNR,SMR,Omega");
    assert_eq!(lines.len(), 13);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn bench_run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("grid");
    let args = ["bench", "run", "--split", "sd", "--split", "cs", "--classes", "6", "--window", "250", "--model", "lda", "--subjects", "2"];
    let mut args: Vec<&str> = args.to_vec();
    args.extend(["--out", out_dir.to_str().unwrap()]);
    let table = stdout(&myoband(&args, dir.path()));
    assert_eq!(table.lines().next(), Some("Method,Type,6-classes 250ms"));
    assert_eq!(table.lines().count(), 3);
    assert!(out_dir.join("results.json").is_file());
    assert!(out_dir.join("manifest.json").is_file());

    let report = stdout(&myoband(&["bench", "report", "--dir", out_dir.to_str().unwrap()], dir.path()));
    assert!(report.starts_with(&table));
    // two table rows plus two per-speed rows
    assert_eq!(report.lines().filter(|l| l.starts_with("LDA,")).count(), 4);

    let bad = Command::new(env!("CARGO_BIN_EXE_myoband")).args(["bench", "run", "--window", "300"]).output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn online_simulate_reports_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = myoband(&["online", "simulate", "--trials", "5", "--model", "lda", "--train-blocks", "2", "--json"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["trials"].as_array().unwrap().len(), 5);
    assert_eq!(v["summary"]["n_trials"], 5);
    assert!(v["summary"]["latency"]["within_budget"].as_bool().unwrap());
}

#[test]
fn serve_takes_port_and_data_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("svc.toml");
    std::fs::write(&cfg, "port = 1\nrate_multiplier = 50.0\n").unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let data = dir.path().join("env-data");
    let mut child = Command::new(env!("CARGO_BIN_EXE_myoband"))
        .args(["serve", "--config", cfg.to_str().unwrap()])
        .env("MYOBAND_PORT", port.to_string())
        .env("MYOBAND_DATA_DIR", &data)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();

    let rt = tokio::runtime::Runtime::new().unwrap();
    let result = rt.block_on(async {
        let http = reqwest::Client::new();
        let base = format!("http://127.0.0.1:{port}");
        let deadline = Instant::now() + Duration::from_secs(20);
        let status: serde_json::Value = loop {
            match http.get(format!("{base}/status")).send().await {
                Ok(r) => break r.json().await.unwrap(),
                Err(_) if Instant::now() < deadline => tokio::time::sleep(Duration::from_millis(50)).await,
                Err(e) => panic!("server never came up: {e}"),
            }
        };
        assert_eq!(status["phase"], "idle");
        assert_eq!(status["device"]["rate_multiplier"], 50.0);
        let r = http
            .post(format!("{base}/session/start"))
            .json(&serde_json::json!({ "subject_id": 7, "day_id": 1, "max_trials": 1 }))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status().as_u16(), 200);
        loop {
            let s: serde_json::Value = http.get(format!("{base}/status")).send().await.unwrap().json().await.unwrap();
            if s["phase"] == "idle" {
                break s;
            }
            assert!(Instant::now() < deadline, "recording did not finish");
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    });
    child.kill().unwrap();
    let _ = child.wait();
    assert_eq!(result["last_recording"]["rows"], 5000);
    assert_eq!(read_recording(&session_path(&data, 7, 1)).unwrap().rows(), 5000);
}
