//! Drives the HTTP API in-process: lists the benchmark, then requests a completion.
//!
//! `cargo run --release -p refcomplete-service --example serve`

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use refcomplete::benchmark::{synthetic_benchmark, write_benchmark};
use refcomplete::{Model, ModelConfig};
use refcomplete_service::{router, AppState};
use tower::ServiceExt;

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or_default())
}

#[tokio::main]
async fn main() {
    let dir = std::env::temp_dir().join("refcomplete-serve-example");
    let (groups, provenance) = synthetic_benchmark(2, 3, 32).unwrap();
    write_benchmark(&dir, &groups, Some(&provenance)).unwrap();
    let model = Model::new(ModelConfig { image_size: 32, base_channels: 8, token_dim: 16, heads: 2, semantic_dim: 16, ..Default::default() }, 0).unwrap();
    let app = router(AppState::new(Some(model), Some(&dir), 4).unwrap());

    let (status, list) = call(&app, Request::get("/v1/benchmark/groups").body(Body::empty()).unwrap()).await;
    println!("GET /v1/benchmark/groups -> {status}: {} groups", list["count"]);

    let b64 = |bytes: Vec<u8>| base64::engine::general_purpose::STANDARD.encode(bytes);
    let g = &groups[0];
    let body = serde_json::json!({
        "source": b64(g.source.encode_png()),
        "mask": b64(g.source_mask.encode_png()),
        "references": g.references.iter().map(|r| serde_json::json!({
            "label": r.label.as_str(), "image": b64(r.image.encode_png()), "mask": b64(r.mask.encode_png()),
        })).collect::<Vec<_>>(),
        "prompt": g.prompt,
        "seed": 1,
        "steps": 5,
    });
    let req = Request::post("/v1/complete").header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    let (status, out) = call(&app, req).await;
    println!("POST /v1/complete -> {status}: {} ms, {} bytes of base64 PNG", out["duration_ms"], out["image"].as_str().map_or(0, str::len));

    let bad = serde_json::json!({ "source": body["source"], "mask": b64(refcomplete::Mask::zeros(32, 32).encode_png()), "seed": 1 });
    let req = Request::post("/v1/complete").header("content-type", "application/json").body(Body::from(bad.to_string())).unwrap();
    let (status, err) = call(&app, req).await;
    println!("empty mask -> {status}: {err}");
}
