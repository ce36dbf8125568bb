use std::path::PathBuf;
use std::time::Duration;

use reqwest::StatusCode;
use serde_json::{json, Value};
use sonoscan_core::knowledge_base::fixture_corpus_dir;
use sonoscan_core::llm::ScriptedBackend;
use sonoscan_core::{
    run_task, BodyRegion, Embedder, ExecutionTrace, ExecutorConfig, KnowledgeBase, ScanTask,
};
use sonoscan_server::{router, AppState, ServiceOptions, SessionEvent, SessionStateResponse};

struct Harness {
    base: String,
    client: reqwest::Client,
}

fn kb() -> KnowledgeBase {
    KnowledgeBase::load_dir(&fixture_corpus_dir(), Embedder::default()).unwrap()
}

fn transcripts() -> PathBuf {
    fixture_corpus_dir().join("transcripts")
}

async fn start(options: ServiceOptions) -> Harness {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(AppState::new(kb(), options));
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Harness {
        base: format!("http://{addr}"),
        client: reqwest::Client::new(),
    }
}

impl Harness {
    async fn create(&self, body: Value) -> reqwest::Response {
        self.client
            .post(format!("{}/sessions", self.base))
            .json(&body)
            .send()
            .await
            .unwrap()
    }

    async fn create_scripted(&self, task_id: &str, region: &str, delay_ms: u64) -> String {
        let resp = self
            .create(json!({
                "backend": format!("scripted:{}", transcripts().display()),
                "task_id": task_id,
                "region": region,
                "turn_delay_ms": delay_ms,
            }))
            .await;
        assert_eq!(resp.status(), StatusCode::CREATED);
        resp.json::<Value>().await.unwrap()["id"]
            .as_str()
            .unwrap()
            .to_owned()
    }

    async fn instruct(&self, id: &str, text: &str) -> reqwest::Response {
        self.client
            .post(format!("{}/sessions/{id}/instructions", self.base))
            .json(&json!({ "text": text }))
            .send()
            .await
            .unwrap()
    }

    async fn events(&self, id: &str) -> Vec<SessionEvent> {
        let resp = self
            .client
            .get(format!("{}/sessions/{id}/events", self.base))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        parse_sse(&resp.text().await.unwrap())
    }

    async fn state(&self, id: &str) -> SessionStateResponse {
        self.client
            .get(format!("{}/sessions/{id}/state", self.base))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap()
    }
}

fn parse_sse(body: &str) -> Vec<SessionEvent> {
    body.split("\n\n")
        .filter_map(|frame| {
            let data: Vec<&str> = frame
                .lines()
                .filter_map(|l| l.strip_prefix("data:"))
                .map(|d| d.strip_prefix(' ').unwrap_or(d))
                .collect();
            (!data.is_empty()).then(|| serde_json::from_str(&data.join("\n")).unwrap())
        })
        .collect()
}

fn batch_trace(task_id: &str, instruction: &str, region: BodyRegion) -> ExecutionTrace {
    let mut backend =
        ScriptedBackend::from_file(&transcripts().join(format!("{task_id}.jsonl"))).unwrap();
    let task = ScanTask {
        instruction: instruction.into(),
        region,
    };
    run_task(task, &kb(), &mut backend, &ExecutorConfig::default()).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn streamed_turns_equal_batch_trace() {
    let h = start(ServiceOptions::default()).await;
    let id = h.create_scripted("thyroid_scan", "neck", 0).await;
    let resp = h.instruct(&id, "scan the patient's thyroid").await;
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    let events = h.events(&id).await;
    let batch = batch_trace(
        "thyroid_scan",
        "scan the patient's thyroid",
        BodyRegion::Neck,
    );

    let turns: Vec<_> = events
        .iter()
        .filter_map(|e| match e {
            SessionEvent::Turn(t) => Some(t.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(turns, batch.turns);
    assert_eq!(turns.len(), 8);

    let states = events
        .iter()
        .filter(|e| matches!(e, SessionEvent::State(_)))
        .count();
    assert_eq!(states, 7);
    match events.last().unwrap() {
        SessionEvent::Summary(s) => {
            assert_eq!(s.status, "completed");
            assert!(s.overall_ok && s.first_step_ok);
            assert_eq!(s.final_state, batch.final_state);
        }
        other => panic!("stream ended with {other:?}"),
    }

    let turn_indices: Vec<usize> = events
        .iter()
        .filter_map(|e| match e {
            SessionEvent::Turn(t) => Some(t.index),
            SessionEvent::State(s) => Some(s.after_turn),
            SessionEvent::Summary(_) => None,
        })
        .collect();
    assert!(turn_indices.windows(2).all(|w| w[0] <= w[1]));

    // A late subscriber gets the full backfill.
    assert_eq!(h.events(&id).await, events);
    let state = h.state(&id).await;
    assert_eq!(state.state, batch.final_state);
    assert_eq!(state.turns, batch.turns);
    assert_eq!(state.instructions, batch.instructions);

    let resp = h.instruct(&id, "scan again").await;
    assert_eq!(resp.status(), StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_ids_and_bad_requests() {
    let h = start(ServiceOptions::default()).await;
    for path in ["state", "events"] {
        let resp = h
            .client
            .get(format!("{}/sessions/nope/{path}", h.base))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    }
    assert_eq!(
        h.instruct("nope", "hi").await.status(),
        StatusCode::NOT_FOUND
    );
    let resp = h
        .client
        .delete(format!("{}/sessions/nope", h.base))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);

    for body in [
        json!({ "backend": "carrier-pigeon", "region": "neck" }),
        json!({ "backend": "scripted:/does/not/exist.jsonl", "region": "neck" }),
        json!({ "backend": format!("scripted:{}", transcripts().display()), "region": "neck" }),
        json!({ "backend": format!("scripted:{}", transcripts().display()), "task_id": "thyroid_scan", "region": "elbow" }),
    ] {
        let resp = h.create(body.clone()).await;
        assert_eq!(resp.status(), StatusCode::BAD_REQUEST, "{body}");
        assert!(resp.json::<Value>().await.unwrap()["error"].is_string());
    }

    let a = h.create_scripted("thyroid_scan", "neck", 0).await;
    let b = h.create_scripted("thyroid_scan", "neck", 0).await;
    assert_ne!(a, b);
    assert_eq!(h.instruct(&a, "  ").await.status(), StatusCode::BAD_REQUEST);
    assert_eq!(
        h.state(&a).await.status,
        sonoscan_server::SessionStatus::Idle
    );

    let resp = h
        .client
        .delete(format!("{}/sessions/{a}", h.base))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::NO_CONTENT);
    assert_eq!(h.instruct(&a, "hi").await.status(), StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn injected_instruction_reaches_later_turns() {
    let h = start(ServiceOptions::default()).await;
    let id = h.create_scripted("thyroid_scan", "neck", 150).await;
    assert_eq!(
        h.instruct(&id, "scan the patient's thyroid").await.status(),
        StatusCode::ACCEPTED
    );
    tokio::time::sleep(Duration::from_millis(60)).await;
    let resp = h.instruct(&id, "also check the left lobe carefully").await;
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    let ack: Value = resp.json().await.unwrap();
    assert_eq!(ack["status"], "queued");
    assert_eq!(ack["instruction_index"], 1);

    let events = h.events(&id).await;
    let turns: Vec<_> = events
        .iter()
        .filter_map(|e| match e {
            SessionEvent::Turn(t) => Some(t),
            _ => None,
        })
        .collect();
    assert_eq!(turns[0].instruction, "scan the patient's thyroid");
    let first_injected = turns
        .iter()
        .position(|t| t.instruction == "also check the left lobe carefully")
        .expect("injected instruction never reached a turn");
    assert!(first_injected >= 1);
    assert!(turns[first_injected..]
        .iter()
        .all(|t| t.instruction == "also check the left lobe carefully"));
    let state = h.state(&id).await;
    assert_eq!(state.instructions.len(), 2);
    assert_eq!(state.instructions[1].issued_at_turn, first_injected);
}

#[tokio::test(flavor = "multi_thread")]
async fn interleaved_sessions_do_not_leak_state() {
    let h = start(ServiceOptions::default()).await;
    let cases = [
        (
            "thyroid_scan",
            "scan the patient's thyroid",
            BodyRegion::Neck,
        ),
        (
            "liver_scan",
            "please perform a liver ultrasound",
            BodyRegion::AbdomenLiver,
        ),
        (
            "cardiac_scan",
            "perform an echocardiogram of the heart",
            BodyRegion::ChestCardiac,
        ),
        (
            "kidney_retract",
            "scan the kidney and lift the probe when done",
            BodyRegion::AbdomenKidney,
        ),
        (
            "thyroid_scan",
            "scan the patient's thyroid",
            BodyRegion::Neck,
        ),
        (
            "carotid_angled",
            "scan the carotid artery with the probe slightly tilted",
            BodyRegion::NeckCarotid,
        ),
    ];
    let mut ids = Vec::new();
    for (task_id, _, region) in &cases {
        ids.push(h.create_scripted(task_id, region.as_str(), 5).await);
    }
    for (id, (_, instruction, _)) in ids.iter().zip(&cases) {
        assert_eq!(
            h.instruct(id, instruction).await.status(),
            StatusCode::ACCEPTED
        );
    }
    let streams = futures_join(&h, &ids).await;
    for ((events, id), (task_id, instruction, region)) in streams.iter().zip(&ids).zip(&cases) {
        let batch = batch_trace(task_id, instruction, *region);
        let turns: Vec<_> = events
            .iter()
            .filter_map(|e| match e {
                SessionEvent::Turn(t) => Some(t.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(turns, batch.turns, "{task_id}");
        let state = h.state(id).await;
        assert_eq!(state.state, batch.final_state, "{task_id}");
        assert_eq!(state.state.digest(), batch.final_state.digest());
    }
}

async fn futures_join(h: &Harness, ids: &[String]) -> Vec<Vec<SessionEvent>> {
    let mut handles = Vec::new();
    for id in ids {
        let base = h.base.clone();
        let id = id.clone();
        handles.push(tokio::spawn(async move {
            let h = Harness {
                base,
                client: reqwest::Client::new(),
            };
            h.events(&id).await
        }));
    }
    let mut out = Vec::new();
    for handle in handles {
        out.push(handle.await.unwrap());
    }
    out
}

#[tokio::test(flavor = "multi_thread")]
async fn trace_dir_receives_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(ServiceOptions {
        trace_dir: Some(dir.path().to_owned()),
        ..ServiceOptions::default()
    })
    .await;
    let id = h.create_scripted("thyroid_scan", "neck", 0).await;
    h.instruct(&id, "scan the patient's thyroid").await;
    let events = h.events(&id).await;
    let log = std::fs::read_to_string(dir.path().join(format!("{id}.jsonl"))).unwrap();
    let logged: Vec<SessionEvent> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(logged, events);
}

#[tokio::test(flavor = "multi_thread")]
async fn deleting_a_running_session_closes_its_stream() {
    let h = start(ServiceOptions::default()).await;
    let id = h.create_scripted("thyroid_scan", "neck", 200).await;
    h.instruct(&id, "scan the patient's thyroid").await;
    let base = h.base.clone();
    let sid = id.clone();
    let stream = tokio::spawn(async move {
        Harness {
            base,
            client: reqwest::Client::new(),
        }
        .events(&sid)
        .await
    });
    tokio::time::sleep(Duration::from_millis(50)).await;
    let resp = h
        .client
        .delete(format!("{}/sessions/{id}", h.base))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::NO_CONTENT);
    let events = tokio::time::timeout(Duration::from_secs(5), stream)
        .await
        .unwrap()
        .unwrap();
    match events.last().unwrap() {
        SessionEvent::Summary(s) => assert_eq!(s.status, "cancelled"),
        other => panic!("stream ended with {other:?}"),
    }
}
