use std::time::Duration;

use futures::StreamExt;
use myoband::recording::{read_recording, COL_EMG};
use myoband::synth::SynthConfig;
use myoband_service::config::ServiceConfig;
use myoband_service::http;
use myoband_service::messages::{Envelope, Message};
use myoband_service::session::{Controller, Phase, Status};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

struct Server {
    base: String,
    ws_url: String,
    http: reqwest::Client,
    dir: tempfile::TempDir,
}

async fn server(tweak: impl FnOnce(&mut ServiceConfig)) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig { data_dir: dir.path().to_path_buf(), rate_multiplier: 100.0, client_queue: 100_000, ..ServiceConfig::default() };
    tweak(&mut cfg);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let controller = Controller::new(cfg, SynthConfig::default());
    tokio::spawn(http::serve(controller, listener, std::future::pending()));
    Server { base: format!("http://{addr}"), ws_url: format!("ws://{addr}/stream"), http: reqwest::Client::new(), dir }
}

impl Server {
    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn status(&self) -> Status {
        self.http.get(format!("{}/status", self.base)).send().await.unwrap().json().await.unwrap()
    }

    async fn connect(&self) -> Ws {
        let (mut ws, _) = connect_async(&self.ws_url).await.unwrap();
        let hello = next(&mut ws).await;
        assert!(matches!(hello.message, Message::Hello { decimation: 10, .. }), "{hello:?}");
        ws
    }
}

async fn next(ws: &mut Ws) -> Envelope {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(60), ws.next()).await.expect("stream stalled").unwrap().unwrap();
        if let tokio_tungstenite::tungstenite::Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

/// Reads until `stop` matches, inclusive.
async fn collect_until(ws: &mut Ws, stop: impl Fn(&Message) -> bool) -> Vec<Envelope> {
    let mut out = Vec::new();
    loop {
        let e = next(ws).await;
        let done = stop(&e.message);
        out.push(e);
        if done {
            return out;
        }
    }
}

fn is_idle(m: &Message) -> bool {
    matches!(m, Message::Phase { phase: Phase::Idle })
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn two_trial_recording_writes_every_row() {
    let s = server(|_| {}).await;
    let mut ws = s.connect().await;
    let (code, body) = s.post("/session/start", json!({ "subject_id": 3, "day_id": 1, "max_trials": 2 })).await;
    assert_eq!(code, 200, "{body}");
    assert_eq!(body["phase"], "recording");
    let msgs = collect_until(&mut ws, is_idle).await;

    assert!(msgs.windows(2).all(|w| w[0].seq < w[1].seq));
    let saved: Vec<(String, usize)> = msgs
        .iter()
        .filter_map(|e| match &e.message {
            Message::RecordingSaved { path, rows } => Some((path.clone(), *rows)),
            _ => None,
        })
        .collect();
    assert_eq!(saved.len(), 1);
    let (path, rows) = &saved[0];
    assert_eq!(*rows, 2 * 10 * 500);
    let rec = read_recording(std::path::Path::new(path)).unwrap();
    assert_eq!(rec.rows(), 10_000);
    assert!(path.starts_with(s.dir.path().to_str().unwrap()));

    // 10 s at 500 Hz per trial gives 500 display samples per trial
    let signals: Vec<(u64, [f64; 8])> = msgs
        .iter()
        .filter_map(|e| match &e.message {
            Message::Signal { sample, emg_uv, dropped, .. } => {
                assert_eq!(*dropped, 0);
                Some((*sample, *emg_uv))
            }
            _ => None,
        })
        .collect();
    assert_eq!(signals.len(), 1000);
    for (i, (sample, emg)) in signals.iter().enumerate() {
        assert_eq!(*sample, 10 * i as u64);
        for ch in [0, 5] {
            let mean = (0..10).map(|k| rec.value(*sample as usize + k, COL_EMG + ch)).sum::<f64>() / 10.0;
            assert!((emg[ch] - mean).abs() <= 1e-4 * (1.0 + mean.abs()), "sample {sample} ch {ch}: {} vs {mean}", emg[ch]);
        }
    }

    let prompts: Vec<(usize, u8, String)> = msgs
        .iter()
        .filter_map(|e| match &e.message {
            Message::Prompt { trial, mode_id, text, progress, .. } => {
                assert_eq!(*progress, 0.0);
                Some((*trial, *mode_id, text.clone()))
            }
            _ => None,
        })
        .collect();
    assert_eq!(prompts, vec![(0, 1, "rest".to_string()), (1, 2, "thumb".to_string())]);

    let status = s.status().await;
    assert_eq!(status.phase, Phase::Idle);
    let last = status.last_recording.unwrap();
    assert_eq!((last.rows, last.complete), (10_000, true));
    let (code, body) = s.post("/session/stop", json!({})).await;
    assert_eq!((code, body["phase"].as_str()), (200, Some("idle")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn block_one_prompts_every_mode_with_full_progress() {
    let s = server(|c| c.rate_multiplier = 400.0).await;
    let mut ws = s.connect().await;
    let (code, _) = s.post("/session/start", json!({ "subject_id": 1, "day_id": 2, "wearing_shift": 1, "max_trials": 12 })).await;
    assert_eq!(code, 200);
    let msgs = collect_until(&mut ws, is_idle).await;
    let modes: Vec<u8> = msgs.iter().filter_map(|e| match e.message { Message::Prompt { mode_id, .. } => Some(mode_id), _ => None }).collect();
    assert_eq!(modes, (1..=12).collect::<Vec<u8>>());

    let mut last: Vec<Option<f64>> = vec![None; 12];
    let mut paradigm = 0.0;
    for e in &msgs {
        if let Message::Progress { trial, progress, paradigm_progress, .. } = e.message {
            assert!(last[trial].map_or(true, |p| progress > p), "progress not increasing in trial {trial}");
            assert!(paradigm_progress >= paradigm);
            last[trial] = Some(progress);
            paradigm = paradigm_progress;
        }
    }
    assert!(last.iter().all(|p| *p == Some(1.0)), "{last:?}");
    assert_eq!(paradigm, 1.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn illegal_transitions_conflict_and_stop_keeps_partial_data() {
    let s = server(|c| c.rate_multiplier = 1.0).await;
    let (code, _) = s.post("/session/start", json!({ "subject_id": 2, "day_id": 1 })).await;
    assert_eq!(code, 200);
    for (path, body) in [
        ("/online/start", json!({ "n_trials": 5 })),
        ("/session/start", json!({ "subject_id": 2, "day_id": 1 })),
        ("/params", json!({ "window_ms": 500 })),
        ("/reaction_test", json!({ "n": 10 })),
    ] {
        let (code, err) = s.post(path, body).await;
        assert_eq!(code, 409, "{path}: {err}");
        assert_eq!(err["phase"], "recording");
    }
    tokio::time::sleep(Duration::from_millis(300)).await;
    let running = s.status().await;
    assert_eq!(running.phase, Phase::Recording);
    assert!(running.device.streaming);
    assert_eq!(running.trial, Some(0));

    let (code, stopped) = s.post("/session/stop", json!({})).await;
    assert_eq!(code, 200);
    assert_eq!(stopped["phase"], "idle");
    assert_eq!(stopped["last_recording"]["complete"], false);
    let rows = stopped["last_recording"]["rows"].as_u64().unwrap() as usize;
    assert!(rows > 0 && rows < 144 * 5000);
    let rec = read_recording(&myoband::recording::session_path(s.dir.path(), 2, 1)).unwrap();
    assert_eq!(rec.rows(), rows);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn params_are_echoed_and_validated() {
    let s = server(|_| {}).await;
    let (code, body) = s.post("/params", json!({ "window_ms": 500, "step_ms": 125, "model": "lda" })).await;
    assert_eq!(code, 200, "{body}");
    let a = s.status().await;
    let b = s.status().await;
    assert_eq!(a, b);
    assert_eq!((a.params.window_ms, a.params.step_ms), (500, 125));
    assert_eq!(a.params.model, myoband::models::ModelKind::Lda);
    assert_eq!(a.phase, Phase::Idle);

    for bad in [json!({ "model": "transformer" }), json!({ "window_ms": 10 }), json!({ "step_ms": 0 }), json!({ "windw_ms": 250 })] {
        let (code, err) = s.post("/params", bad.clone()).await;
        assert_eq!(code, 400, "{bad}: {err}");
        assert!(err["error"].is_string());
    }
    assert_eq!(s.status().await.params, a.params);
    let (code, _) = s.post("/reaction_test/press", json!({ "cue": 0 })).await;
    assert_eq!(code, 409);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn online_test_streams_prompts_predictions_and_results() {
    let s = server(|c| c.rate_multiplier = 20.0).await;
    let mut ws = s.connect().await;
    let (code, _) = s.post("/params", json!({ "model": "lda" })).await;
    assert_eq!(code, 200);
    let (code, body) = s.post("/online/start", json!({ "n_trials": 4, "subject_id": 2, "seed": 5 })).await;
    assert_eq!(code, 200, "{body}");
    assert_eq!(body["phase"], "online_test");
    let msgs = collect_until(&mut ws, is_idle).await;

    let count = |f: fn(&Message) -> bool| msgs.iter().filter(|e| f(&e.message)).count();
    assert_eq!(count(|m| matches!(m, Message::ModelReady { .. })), 1);
    assert_eq!(count(|m| matches!(m, Message::Prompt { mode_id, .. } if *mode_id != 1)), 4);
    assert_eq!(count(|m| matches!(m, Message::TrialResult(_))), 4);
    assert!(count(|m| matches!(m, Message::Prediction { .. })) > 4);
    assert!(count(|m| matches!(m, Message::Signal { .. })) > 100);
    let results: Vec<_> = msgs.iter().filter_map(|e| match &e.message { Message::TrialResult(t) => Some(t.clone()), _ => None }).collect();
    let summary = msgs
        .iter()
        .find_map(|e| match &e.message {
            Message::OnlineFinished(s) => Some(s.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!(summary.n_trials, 4);
    assert!(summary.aborted.is_none(), "{summary:?}");
    assert_eq!(summary.correct, results.iter().filter(|t| t.correct).count());
    // the cued mode drives the trigger of display samples
    let cued: Vec<u8> = results.iter().map(|t| t.cued_mode).collect();
    assert!(msgs.iter().any(|e| matches!(e.message, Message::Signal { trigger, .. } if cued.contains(&trigger))));
    let status = s.status().await;
    assert_eq!(status.phase, Phase::Idle);
    assert_eq!(status.last_online, Some(summary));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reaction_test_calibrates_the_constant() {
    let s = server(|_| {}).await;
    let mut ws = s.connect().await;
    let (code, body) = s.post("/reaction_test", json!({ "n": 10, "gap_s": 0.02 })).await;
    assert_eq!(code, 200, "{body}");
    let calibrated = loop {
        match next(&mut ws).await.message {
            Message::ReactionCue { cue, of } => {
                assert_eq!(of, 10);
                tokio::time::sleep(Duration::from_millis(60)).await;
                let (code, _) = s.post("/reaction_test/press", json!({ "cue": cue })).await;
                assert_eq!(code, 200);
            }
            Message::ReactionCalibrated { reaction_const_s, latencies_s } => {
                assert_eq!(latencies_s.len(), 10);
                assert!(latencies_s.iter().all(|&l| l >= 0.06));
                break reaction_const_s;
            }
            Message::Error { message } => panic!("{message}"),
            _ => {}
        }
    };
    assert!((0.06..0.3).contains(&calibrated), "{calibrated}");
    collect_until(&mut ws, is_idle).await;
    assert_eq!(s.status().await.params.reaction_const_s, calibrated);
    let (code, _) = s.post("/reaction_test", json!({ "n": 3 })).await;
    assert_eq!(code, 400);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn slow_client_loses_display_samples_only() {
    let s = server(|c| {
        c.client_queue = 8;
        c.rate_multiplier = 400.0;
    })
    .await;
    let mut slow = s.connect().await;
    let mut fast = s.connect().await;
    assert_eq!(s.status().await.clients, 2);
    let (code, _) = s.post("/session/start", json!({ "subject_id": 4, "day_id": 1, "max_trials": 12 })).await;
    assert_eq!(code, 200);
    let all = collect_until(&mut fast, is_idle).await;

    let mut got = Vec::new();
    loop {
        let e = next(&mut slow).await;
        tokio::time::sleep(Duration::from_micros(200)).await;
        let done = is_idle(&e.message);
        got.push(e);
        if done {
            break;
        }
    }
    let control = |v: &[Envelope]| v.iter().filter(|e| !e.message.is_display()).map(|e| e.seq).collect::<Vec<_>>();
    assert_eq!(control(&got), control(&all));
    // the newest display sample is never the one dropped, so the last count is final
    for msgs in [&all, &got] {
        let delivered = msgs.iter().filter(|e| e.message.is_display()).count() as u64;
        let last_dropped = msgs
            .iter()
            .rev()
            .find_map(|e| match e.message {
                Message::Signal { dropped, .. } => Some(dropped),
                _ => None,
            })
            .unwrap();
        assert_eq!(delivered + last_dropped, 12 * 500);
        assert!(delivered >= 8);
    }
    let status = s.status().await;
    assert!(status.display_dropped > 0);
    assert_eq!(s.status().await.last_recording.unwrap().rows, 12 * 5000);
    slow.close(None).await.unwrap();
}
