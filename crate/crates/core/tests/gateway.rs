use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use finegrain::corpus::toyworld::toy_vocabulary_words;
use finegrain::gateway::{read_session_log, router, AppState, GatewayOptions, SessionResource};
use finegrain::model::{Model, ModelDims};
use finegrain::sampler::{replay, select_and_continue, start_session, SamplingConfig};
use finegrain::textcore::Vocabulary;
use finegrain::trainer::{Checkpoint, TrainConfig};

fn checkpoint(seed: u64) -> Checkpoint {
    let vocab = Vocabulary::from_words(toy_vocabulary_words());
    Checkpoint {
        model: Model::new(ModelDims::tiny(), vocab.len(), seed).unwrap(),
        vocab,
        config: TrainConfig::default(),
        epoch: 1,
        optimizer: None,
    }
}

fn opts() -> GatewayOptions {
    GatewayOptions {
        thumbnail_size: 16,
        ..Default::default()
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, v)
}

fn resource(v: Value) -> SessionResource {
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn degraded_without_checkpoint() {
    let app = router(AppState::new(None, opts()).unwrap());
    let (s, v) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "degraded");
    assert!(v["checkpoint_hash"].is_null());
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({"coarse_prompt": "a red cat"}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn create_select_and_errors() {
    let app = router(AppState::new(Some(checkpoint(1)), opts()).unwrap());
    let (s, v) = call(&app, "GET", "/healthz", None).await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("ok")));
    assert_eq!(v["checkpoint_hash"].as_str().unwrap().len(), 64);

    let (s, _) = call(&app, "POST", "/sessions", Some(json!({"coarse_prompt": "   "}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, v) = call(&app, "POST", "/sessions", Some(json!({"coarse_prompt": "a red cat", "config": {"seed": 4}}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let r = resource(v);
    assert_eq!(r.rounds.len(), 1);
    assert_eq!(r.rounds[0].candidates.len(), 3);
    assert!(r.rounds[0].candidates[0].thumbnail.as_ref().unwrap().starts_with("data:image/png;base64,"));
    assert_eq!(serde_json::to_value(r.status).unwrap(), "awaiting-selection");

    let (s, _) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/sessions/nope/select", Some(json!({"candidate_index": 0}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let uri = format!("/sessions/{}/select", r.id);
    let (s, _) = call(&app, "POST", &uri, Some(json!({"candidate_index": 7}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, v) = call(&app, "POST", &uri, Some(json!({"candidate_index": 1}))).await;
    assert_eq!(s, StatusCode::OK);
    let next = resource(v);
    let picked = &r.rounds[0].candidates[1];
    if !picked.finished {
        let round = &next.rounds[1];
        assert_eq!(round.prefix, picked.text);
        for c in &round.candidates {
            assert!(c.text.starts_with(&picked.text));
        }
    }

    // Run to completion, then selection conflicts.
    let mut cur = next;
    for _ in 0..20 {
        if serde_json::to_value(cur.status).unwrap() == "complete" {
            break;
        }
        let (s, v) = call(&app, "POST", &uri, Some(json!({"candidate_index": 0}))).await;
        assert_eq!(s, StatusCode::OK);
        cur = resource(v);
    }
    assert_eq!(serde_json::to_value(cur.status).unwrap(), "complete");
    let (s, _) = call(&app, "POST", &uri, Some(json!({"candidate_index": 0}))).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, v) = call(&app, "GET", &format!("/sessions/{}", r.id), None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, again) = call(&app, "GET", &format!("/sessions/{}", r.id), None).await;
    assert_eq!(v, again);
}

#[tokio::test]
async fn api_matches_direct_sampler_calls() {
    let ck = checkpoint(2);
    let app = router(AppState::new(Some(ck.clone()), opts()).unwrap());
    let mut ids = Vec::new();
    for seed in [10u64, 11] {
        let (s, v) = call(&app, "POST", "/sessions", Some(json!({"coarse_prompt": "a blue boat", "config": {"seed": seed}}))).await;
        assert_eq!(s, StatusCode::CREATED);
        let r = resource(v);
        let uri = format!("/sessions/{}/select", r.id);
        let (_, v) = call(&app, "POST", &uri, Some(json!({"candidate_index": 2}))).await;
        let api = resource(v);

        let cfg = SamplingConfig { seed, ..Default::default() };
        let mut direct = start_session(&ck.model, &ck.vocab, r.id.clone(), "a blue boat", &cfg).unwrap();
        select_and_continue(&ck.model, &ck.vocab, &mut direct, 2).unwrap();
        let api_texts: Vec<Vec<String>> = api.rounds.iter().map(|r| r.candidates.iter().map(|c| c.text.clone()).collect()).collect();
        let direct_texts: Vec<Vec<String>> = direct.rounds.iter().map(|r| r.candidates.iter().map(|c| c.text.clone()).collect()).collect();
        assert_eq!(api_texts, direct_texts);
        ids.push(r.id);
    }
    assert_ne!(ids[0], ids[1]);
}

#[tokio::test]
async fn refine_is_bounded_and_seeded() {
    let app = router(AppState::new(Some(checkpoint(3)), opts()).unwrap());
    let body = json!({"coarse_prompt": "a cat", "max_tokens": 20, "seed": 5});
    let (s, a) = call(&app, "POST", "/refine", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert!(a["new_tokens"].as_u64().unwrap() <= 20);
    assert!(a["fine_prompt"].as_str().unwrap().starts_with("a cat"));
    let (_, b) = call(&app, "POST", "/refine", Some(body)).await;
    assert_eq!(a, b);
    let (s, _) = call(&app, "POST", "/refine", Some(json!({"coarse_prompt": ""}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn log_survives_restart_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("sessions.jsonl");
    let ck = checkpoint(4);
    let o = GatewayOptions {
        session_log: Some(log.clone()),
        ..opts()
    };
    let app = router(AppState::new(Some(ck.clone()), o.clone()).unwrap());
    let (_, v) = call(&app, "POST", "/sessions", Some(json!({"coarse_prompt": "a green tree"}))).await;
    let id = resource(v).id;
    let (_, v) = call(&app, "POST", &format!("/sessions/{id}/select"), Some(json!({"candidate_index": 0}))).await;
    let before = resource(v);

    let restarted = router(AppState::new(Some(ck.clone()), o).unwrap());
    let (s, v) = call(&restarted, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(resource(v), before);

    let logged = read_session_log(&log).unwrap();
    assert_eq!(logged.len(), 1);
    assert_eq!(replay(&ck.model, &ck.vocab, &logged[0]).unwrap(), logged[0]);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_selects_are_serialized() {
    let ck = checkpoint(5);
    let state = AppState::new(Some(ck.clone()), opts()).unwrap();
    let app = router(state.clone());
    let (_, v) = call(&app, "POST", "/sessions", Some(json!({"coarse_prompt": "a cat", "config": {"seed": 1}}))).await;
    let id = resource(v).id;
    let uri = format!("/sessions/{id}/select");
    let tasks: Vec<_> = (0..4)
        .map(|_| {
            let app = app.clone();
            let uri = uri.clone();
            tokio::spawn(async move { call(&app, "POST", &uri, Some(json!({"candidate_index": 0}))).await.0 })
        })
        .collect();
    let mut ok = 0;
    for t in tasks {
        match t.await.unwrap() {
            StatusCode::OK => ok += 1,
            s => assert_eq!(s, StatusCode::CONFLICT),
        }
    }
    let session = state.session(&id).await.unwrap();
    let selections = session.rounds.iter().filter(|r| r.selected.is_some()).count();
    assert_eq!(selections, ok);
    let cfg = SamplingConfig { seed: 1, ..Default::default() };
    let mut direct = start_session(&ck.model, &ck.vocab, id.clone(), "a cat", &cfg).unwrap();
    for _ in 0..ok {
        select_and_continue(&ck.model, &ck.vocab, &mut direct, 0).unwrap();
    }
    assert_eq!(session, direct);
}

#[tokio::test]
async fn hot_swap_publishes_new_snapshot() {
    let state = AppState::new(Some(checkpoint(6)), opts()).unwrap();
    let app = router(state.clone());
    let (_, a) = call(&app, "GET", "/healthz", None).await;
    let old = state.snapshot().unwrap();
    state.swap_checkpoint(checkpoint(7)).unwrap();
    let (_, b) = call(&app, "GET", "/healthz", None).await;
    assert_ne!(a["checkpoint_hash"], b["checkpoint_hash"]);
    assert_eq!(a["checkpoint_hash"].as_str().unwrap(), old.hash);
}
