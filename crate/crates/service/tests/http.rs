use std::path::Path;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};
use tower::ServiceExt;

use refcomplete::benchmark::{synthetic_benchmark, write_benchmark, BenchmarkGroup};
use refcomplete::{Mask, Model, ModelConfig};
use refcomplete_service::{router, AppState};

fn tiny_model() -> Model {
    let cfg = ModelConfig { image_size: 32, base_channels: 8, token_dim: 16, heads: 2, semantic_dim: 8, semantic_token_count: 2, ..Default::default() };
    Model::new(cfg, 11).unwrap()
}

fn bench(dir: &Path, n: usize) -> Vec<BenchmarkGroup> {
    let (groups, prov) = synthetic_benchmark(n, 5, 32).unwrap();
    write_benchmark(dir, &groups, Some(&prov)).unwrap();
    groups
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec())
}

fn as_json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn request_for(g: &BenchmarkGroup, seed: u64) -> Value {
    let refs: Vec<Value> = g
        .references
        .iter()
        .map(|r| json!({ "label": r.label.as_str(), "image": B64.encode(r.image.encode_png()), "mask": B64.encode(r.mask.encode_png()) }))
        .collect();
    json!({
        "source": B64.encode(g.source.encode_png()),
        "mask": B64.encode(g.source_mask.encode_png()),
        "references": refs,
        "prompt": g.prompt,
        "seed": seed,
        "steps": 3,
    })
}

#[tokio::test]
async fn completion_is_deterministic_and_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let g = bench(dir.path(), 1).remove(0);
    let app = router(AppState::new(Some(tiny_model()), None, 4).unwrap());

    let (s1, b1) = send(&app, Method::POST, "/v1/complete", Some(request_for(&g, 9))).await;
    let (s2, b2) = send(&app, Method::POST, "/v1/complete", Some(request_for(&g, 9))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK), "{}", String::from_utf8_lossy(&b1));
    let (r1, r2) = (as_json(&b1), as_json(&b2));
    assert_eq!(r1["image"], r2["image"]);
    assert_eq!(r1["seed"], 9);
    assert_eq!(r1["steps"], 3);
    let image = refcomplete::Raster::decode_png(&B64.decode(r1["image"].as_str().unwrap()).unwrap()).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            if !g.source_mask.get(y, x) {
                assert_eq!(image.pixel(y, x), g.source.pixel(y, x));
            }
        }
    }

    let mut req = request_for(&g, 9);
    req.as_object_mut().unwrap().remove("steps");
    req["references"] = json!([]);
    let (s, b) = send(&app, Method::POST, "/v1/complete", Some(req)).await;
    assert_eq!(s, StatusCode::OK);
    let r = as_json(&b);
    assert_eq!(r["steps"], 50);
    assert_eq!(r["guidance"], 7.5);
    assert!(r["duration_ms"].is_u64());
}

#[tokio::test]
async fn concurrent_requests_match_serial_results() {
    let dir = tempfile::tempdir().unwrap();
    let g = bench(dir.path(), 1).remove(0);
    let app = router(AppState::new(Some(tiny_model()), None, 4).unwrap());
    let mut serial = Vec::new();
    for seed in 0..3 {
        serial.push(as_json(&send(&app, Method::POST, "/v1/complete", Some(request_for(&g, seed))).await.1)["image"].clone());
    }
    let handles: Vec<_> = (0..3)
        .map(|seed| {
            let (app, req) = (app.clone(), request_for(&g, seed));
            tokio::spawn(async move { send(&app, Method::POST, "/v1/complete", Some(req)).await })
        })
        .collect();
    for (seed, h) in handles.into_iter().enumerate() {
        let (s, b) = h.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        assert_eq!(as_json(&b)["image"], serial[seed], "seed {seed}");
    }
}

#[tokio::test]
async fn completion_errors_use_the_error_contract() {
    let dir = tempfile::tempdir().unwrap();
    let g = bench(dir.path(), 1).remove(0);
    let app = router(AppState::new(Some(tiny_model()), None, 4).unwrap());

    let mut empty = request_for(&g, 1);
    empty["mask"] = json!(B64.encode(Mask::zeros(32, 32).encode_png()));
    let (s, b) = send(&app, Method::POST, "/v1/complete", Some(empty)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(as_json(&b)["error"], "empty_mask");
    assert!(as_json(&b)["detail"].is_string());

    for (field, value, code) in [("steps", json!(0), "steps_out_of_range"), ("steps", json!(251), "steps_out_of_range"), ("guidance", json!(30.5), "guidance_out_of_range")] {
        let mut req = request_for(&g, 1);
        req[field] = value;
        let (s, b) = send(&app, Method::POST, "/v1/complete", Some(req)).await;
        assert_eq!((s, as_json(&b)["error"].as_str().unwrap()), (StatusCode::UNPROCESSABLE_ENTITY, code));
    }

    let mut small = request_for(&g, 1);
    small["mask"] = json!(B64.encode(Mask::ones(16, 16).encode_png()));
    assert_eq!(send(&app, Method::POST, "/v1/complete", Some(small)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let mut bad_png = request_for(&g, 1);
    bad_png["source"] = json!(B64.encode(b"not a png"));
    let (s, b) = send(&app, Method::POST, "/v1/complete", Some(bad_png)).await;
    assert_eq!((s, as_json(&b)["error"].as_str().unwrap()), (StatusCode::BAD_REQUEST, "malformed_request"));

    let mut bad_label = request_for(&g, 1);
    bad_label["references"][0]["label"] = json!("hat");
    assert_eq!(send(&app, Method::POST, "/v1/complete", Some(bad_label)).await.0, StatusCode::BAD_REQUEST);

    let mut no_seed = request_for(&g, 1);
    no_seed.as_object_mut().unwrap().remove("seed");
    assert_eq!(send(&app, Method::POST, "/v1/complete", Some(no_seed)).await.0, StatusCode::BAD_REQUEST);

    let req = Request::post("/v1/complete").body(Body::from("{not json")).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn queue_overflow_and_missing_model_are_503() {
    let dir = tempfile::tempdir().unwrap();
    let g = bench(dir.path(), 1).remove(0);
    let full = router(AppState::new(Some(tiny_model()), None, 0).unwrap());
    let (s, b) = send(&full, Method::POST, "/v1/complete", Some(request_for(&g, 1))).await;
    assert_eq!((s, as_json(&b)["error"].as_str().unwrap()), (StatusCode::SERVICE_UNAVAILABLE, "queue_full"));
    let none = router(AppState::new(None, None, 4).unwrap());
    let (s, b) = send(&none, Method::POST, "/v1/complete", Some(request_for(&g, 1))).await;
    assert_eq!((s, as_json(&b)["error"].as_str().unwrap()), (StatusCode::SERVICE_UNAVAILABLE, "no_model"));
}

#[tokio::test]
async fn benchmark_listing_and_assets() {
    let dir = tempfile::tempdir().unwrap();
    bench(dir.path(), 20);
    let app = router(AppState::new(None, Some(dir.path()), 4).unwrap());

    let (s, b) = send(&app, Method::GET, "/v1/benchmark/groups", None).await;
    assert_eq!(s, StatusCode::OK);
    let listing = as_json(&b);
    assert_eq!(listing["count"], 20);
    assert_eq!(listing["groups"].as_array().unwrap().len(), 20);

    let (s, b) = send(&app, Method::GET, "/v1/benchmark/groups/g000", None).await;
    assert_eq!(s, StatusCode::OK);
    let detail = as_json(&b);
    let url = detail["assets"]["source"].as_str().unwrap().to_string();
    assert!(detail["assets"].as_object().unwrap().keys().any(|k| k.starts_with("refs/")));

    let (s, bytes) = send(&app, Method::GET, &url, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bytes, std::fs::read(dir.path().join("g000/source.png")).unwrap());

    assert_eq!(send(&app, Method::GET, "/v1/benchmark/groups/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, Method::GET, "/v1/benchmark/groups/g000/assets/other", None).await.0, StatusCode::NOT_FOUND);
    let (s, b) = send(&app, Method::GET, "/v1/benchmark/groups/nope", None).await;
    assert_eq!((s, as_json(&b)["error"].as_str().unwrap()), (StatusCode::NOT_FOUND, "unknown_group"));
}

#[tokio::test]
async fn mask_put_round_trips_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    bench(dir.path(), 2);
    let gt_before = std::fs::read(dir.path().join("g000/gt.png")).unwrap();
    let app = router(AppState::new(None, Some(dir.path()), 4).unwrap());

    let new_mask = Mask::from_fn(32, 32, |y, x| (8..20).contains(&y) && (4..30).contains(&x)).encode_png();
    let (s, b) = send(&app, Method::PUT, "/v1/benchmark/groups/g000/mask", Some(json!({ "mask": B64.encode(&new_mask) }))).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    assert!(as_json(&b).get("warning").is_none());
    let (_, fetched) = send(&app, Method::GET, "/v1/benchmark/groups/g000/assets/mask", None).await;
    assert_eq!(fetched, new_mask);
    assert_eq!(std::fs::read(dir.path().join("g000/gt.png")).unwrap(), gt_before);

    let empty = Mask::zeros(32, 32).encode_png();
    let (s, b) = send(&app, Method::PUT, "/v1/benchmark/groups/g000/mask", Some(json!({ "mask": B64.encode(&empty) }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(as_json(&b)["warning"], "empty_mask");

    let wrong = Mask::ones(16, 32).encode_png();
    let (s, b) = send(&app, Method::PUT, "/v1/benchmark/groups/g001/mask", Some(json!({ "mask": B64.encode(&wrong) }))).await;
    assert_eq!((s, as_json(&b)["error"].as_str().unwrap()), (StatusCode::CONFLICT, "dimension_mismatch"));
    assert_eq!(send(&app, Method::PUT, "/v1/benchmark/groups/zzz/mask", Some(json!({ "mask": B64.encode(&new_mask) }))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, Method::PUT, "/v1/benchmark/groups/g001/mask", Some(json!({ "mask": "%%" }))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn concurrent_mask_writes_leave_one_complete_file() {
    let dir = tempfile::tempdir().unwrap();
    bench(dir.path(), 1);
    let app = router(AppState::new(None, Some(dir.path()), 4).unwrap());
    let masks: Vec<Vec<u8>> = (0..6).map(|k| Mask::from_fn(32, 32, move |y, x| (y + x) % 7 == k).encode_png()).collect();
    let handles: Vec<_> = masks
        .iter()
        .map(|m| {
            let (app, body) = (app.clone(), json!({ "mask": B64.encode(m) }));
            tokio::spawn(async move { send(&app, Method::PUT, "/v1/benchmark/groups/g000/mask", Some(body)).await.0 })
        })
        .collect();
    for h in handles {
        assert_eq!(h.await.unwrap(), StatusCode::OK);
    }
    let stored = std::fs::read(dir.path().join("g000/mask.png")).unwrap();
    assert!(masks.contains(&stored));
}
