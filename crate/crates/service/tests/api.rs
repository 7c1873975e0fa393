use std::path::PathBuf;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use actpaint_core::image::RgbImage;
use actpaint_core::ModelBundle;
use actpaint_service::{router, AppState, ServiceConfig};

fn fixture(name: &str) -> ModelBundle {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name);
    ModelBundle::load(dir).unwrap()
}

fn app_with(config: ServiceConfig) -> Router {
    let state = AppState::new(fixture("toygen-v1"), Some(fixture("toyfx-v1")), config).unwrap();
    router(state)
}

fn app() -> Router {
    app_with(ServiceConfig::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(body)).await
}

async fn session(app: &Router, seed: u64) -> (String, String) {
    let (status, body) = post(app, "/api/session", json!({ "seed": seed })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    (body["session_id"].as_str().unwrap().into(), body["image"].as_str().unwrap().into())
}

async fn extract(app: &Router, sid: &str, layer: &str, x: usize, y: usize) -> String {
    let (status, body) = post(app, "/api/extract", json!({ "session_id": sid, "layer": layer, "x": x, "y": y, "name": "v" })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    body["vector_id"].as_str().unwrap().into()
}

fn decode(image: &Value) -> RgbImage {
    RgbImage::decode_png(&BASE64.decode(image.as_str().unwrap()).unwrap()).unwrap()
}

fn error_shape(body: &Value) {
    assert!(body["code"].is_string() && body["message"].is_string() && body.get("detail").is_some(), "{body}");
}

#[tokio::test]
async fn model_lists_layers() {
    let (status, body) = call(&app(), "GET", "/api/model", None).await;
    assert_eq!(status, StatusCode::OK);
    let layers = body["layers"].as_array().unwrap();
    let up2 = layers.iter().find(|l| l["name"] == "up2.conv1").unwrap();
    assert_eq!((up2["C"].as_u64(), up2["H"].as_u64(), up2["W"].as_u64()), (Some(16), Some(16), Some(16)));
    assert_eq!(body["extractor"]["name"], "toyfx-v1");
}

#[tokio::test]
async fn session_is_deterministic_per_seed() {
    let app = app();
    let (a, img_a) = session(&app, 3).await;
    let (b, img_b) = session(&app, 3).await;
    let (_, img_c) = session(&app, 4).await;
    assert_ne!(a, b);
    assert_eq!(img_a, img_b);
    assert_ne!(img_a, img_c);
    assert_eq!(decode(&json!(img_a)).width, 64);
}

#[tokio::test]
async fn extract_bounds_and_unknown_ids() {
    let app = app();
    let (sid, _) = session(&app, 1).await;
    let (status, body) = post(&app, "/api/extract", json!({ "session_id": sid, "layer": "up2.conv1", "x": 16, "y": 0 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    error_shape(&body);
    let (status, body) = post(&app, "/api/extract", json!({ "session_id": "nope", "layer": "up2.conv1", "x": 0, "y": 0 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    error_shape(&body);
    let (status, _) = post(&app, "/api/extract", json!({ "session_id": sid, "layer": "nope", "x": 0, "y": 0 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = post(&app, "/api/visualize", json!({ "vector_id": "missing", "grid_size": 2 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/api/job/job999999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_json_is_400() {
    let app = app();
    let req = Request::builder()
        .method("POST")
        .uri("/api/session")
        .header("content-type", "application/json")
        .body(Body::from("{seed: "))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    error_shape(&serde_json::from_slice(&bytes).unwrap());
    let (status, _) = post(&app, "/api/session", json!({ "seed": "three" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn library_and_visualize() {
    let app = app();
    let (sid, _) = session(&app, 2).await;
    let id = extract(&app, &sid, "up2.conv1", 4, 5).await;
    let (status, body) = call(&app, "GET", "/api/library", None).await;
    assert_eq!(status, StatusCode::OK);
    let entry = &body["vectors"][0];
    assert_eq!(entry["id"], id.as_str());
    assert_eq!(entry["name"], "v");
    let thumb = decode(&entry["thumbnail"]);
    assert_eq!((thumb.width, thumb.height), (64, 64));

    let (status, a) = post(&app, "/api/visualize", json!({ "vector_id": id, "grid_size": 0 })).await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = post(&app, "/api/visualize", json!({ "vector_id": id, "grid_size": 2, "background": "random" })).await;
    assert_ne!(a["image"], b["image"]);
}

#[tokio::test]
async fn zero_label_paint_returns_baseline_bytes() {
    let app = app();
    let (sid, baseline) = session(&app, 5).await;
    let rows = vec![vec![0u32; 8]; 8];
    let (status, body) = post(&app, "/api/paint", json!({ "session_id": sid, "layer": "up1.conv1", "labels": rows, "palette": {} })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["image"].as_str().unwrap(), baseline);
}

#[tokio::test]
async fn paint_errors() {
    let app = app();
    let (sid, _) = session(&app, 6).await;
    let up1 = extract(&app, &sid, "up1.conv1", 1, 1).await;
    let up2 = extract(&app, &sid, "up2.conv1", 1, 1).await;
    let mut rows = vec![vec![0u32; 8]; 8];
    rows[0][0] = 1;
    rows[1][1] = 2;
    let (status, body) = post(
        &app,
        "/api/paint",
        json!({ "session_id": sid, "layer": "up1.conv1", "labels": rows, "palette": { "1": up1, "2": up2 } }),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    error_shape(&body);
    let (status, body) = post(&app, "/api/paint", json!({ "session_id": sid, "layer": "up1.conv1", "labels": rows, "palette": { "1": up1 } })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "dangling_label");
    let ragged = vec![vec![0u32; 8], vec![0u32; 3]];
    let (status, _) = post(&app, "/api/paint", json!({ "session_id": sid, "layer": "up1.conv1", "labels": ragged, "palette": {} })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn png_labels_match_grid_labels() {
    let app = app();
    let (sid, _) = session(&app, 7).await;
    let v = extract(&app, &sid, "up1.conv1", 2, 3).await;
    let mut img = RgbImage::filled(64, 64, [0, 255, 0]);
    let mut rows = vec![vec![0u32; 64]; 64];
    for (y, row) in rows.iter_mut().enumerate().take(40).skip(16) {
        for (x, cell) in row.iter_mut().enumerate().take(48).skip(8) {
            img.put(x, y, [255, 0, 0]);
            *cell = 1;
        }
    }
    let png = BASE64.encode(img.encode_png().unwrap());
    let (s1, a) = post(
        &app,
        "/api/paint",
        json!({ "session_id": sid, "layer": "up1.conv1", "labels": { "png": png, "colors": { "1": [255, 0, 0] } }, "palette": { "1": v } }),
    )
    .await;
    let (s2, b) = post(&app, "/api/paint", json!({ "session_id": sid, "layer": "up1.conv1", "labels": rows, "palette": { "1": v } })).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK), "{a} {b}");
    assert_eq!(a["image"], b["image"]);
}

#[tokio::test]
async fn same_mask_three_seeds_gives_three_images() {
    let app = app();
    let (donor, _) = session(&app, 100).await;
    let v = extract(&app, &donor, "up1.conv1", 4, 4).await;
    let mut rows = vec![vec![0u32; 8]; 8];
    for row in rows.iter_mut().take(6).skip(2) {
        for cell in row.iter_mut().take(6).skip(2) {
            *cell = 1;
        }
    }
    let mut images = Vec::new();
    for seed in [3, 4, 5] {
        let (sid, _) = session(&app, seed).await;
        let (status, body) = post(&app, "/api/paint", json!({ "session_id": sid, "layer": "up1.conv1", "labels": rows, "palette": { "1": v } })).await;
        assert_eq!(status, StatusCode::OK);
        images.push(body["image"].as_str().unwrap().to_string());
    }
    assert!(images[0] != images[1] && images[1] != images[2] && images[0] != images[2]);
}

#[tokio::test]
async fn expired_session_is_410() {
    let app = app_with(ServiceConfig {
        session_timeout: Duration::from_millis(50),
        ..ServiceConfig::default()
    });
    let (sid, _) = session(&app, 1).await;
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (status, body) = post(&app, "/api/extract", json!({ "session_id": sid, "layer": "up2.conv1", "x": 0, "y": 0 })).await;
    assert_eq!(status, StatusCode::GONE);
    assert_eq!(body["code"], "session_expired");
    let (status, _) = post(&app, "/api/extract", json!({ "session_id": sid, "layer": "up2.conv1", "x": 0, "y": 0 })).await;
    assert_eq!(status, StatusCode::GONE);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn parallel_paints_equal_serial_paints() {
    let app = app();
    let (donor, _) = session(&app, 50).await;
    let v = extract(&app, &donor, "up1.conv1", 6, 1).await;
    let mut sessions = Vec::new();
    for seed in 0..6 {
        sessions.push(session(&app, seed).await.0);
    }
    let request = |sid: &str, k: usize| {
        let mut rows = vec![vec![0u32; 8]; 8];
        rows[k % 8][(3 * k) % 8] = 1;
        rows[(k + 4) % 8][k % 8] = 1;
        json!({ "session_id": sid, "layer": "up1.conv1", "labels": rows, "palette": { "1": v } })
    };
    let mut serial = Vec::new();
    for (k, sid) in sessions.iter().enumerate() {
        for round in 0..3 {
            serial.push(post(&app, "/api/paint", request(sid, k + round)).await.1["image"].clone());
        }
    }
    let mut handles = Vec::new();
    for (k, sid) in sessions.iter().enumerate() {
        for round in 0..3 {
            let (app, body) = (app.clone(), request(sid, k + round));
            handles.push(tokio::spawn(async move { post(&app, "/api/paint", body).await.1["image"].clone() }));
        }
    }
    let mut parallel = Vec::new();
    for h in handles {
        parallel.push(h.await.unwrap());
    }
    assert_eq!(serial, parallel);
}

#[tokio::test]
async fn scan_job_lifecycle() {
    let app = app();
    let (status, body) = post(&app, "/api/scan", json!({ "layer": "up2.conv1", "feature_layer": "stage3", "grid_size": 2, "samples": 6, "seed": 7 })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let job = body["job_id"].as_str().unwrap().to_string();
    let mut report = Value::Null;
    for _ in 0..300 {
        let (status, body) = call(&app, "GET", &format!("/api/job/{job}"), None).await;
        assert_eq!(status, StatusCode::OK);
        match body["status"].as_str().unwrap() {
            "done" => {
                report = body["report"].clone();
                break;
            }
            "failed" => panic!("{body}"),
            _ => tokio::time::sleep(Duration::from_millis(50)).await,
        }
    }
    let records = report["records"].as_array().expect("scan finished");
    assert_eq!(records.len(), 6);
    let cos: Vec<f64> = records.iter().map(|r| r["cosine_similarity"].as_f64().unwrap()).collect();
    assert!(cos.windows(2).all(|w| w[0] <= w[1]));
    let strip = decode(&report["top4"]);
    assert_eq!((strip.width, strip.height), (4 * 64 + 10, 2 * 64 + 6));

    let (status, _) = post(&app, "/api/scan", json!({ "layer": "up2.conv1", "feature_layer": "stage3", "grid_size": 2, "samples": 0 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = post(&app, "/api/scan", json!({ "layer": "bogus", "feature_layer": "stage3", "grid_size": 2, "samples": 4 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn replay_is_byte_identical() {
    async fn script(app: &Router) -> Vec<Value> {
        let (sid, base) = session(app, 9).await;
        let v = extract(app, &sid, "up1.conv1", 3, 3).await;
        let mut rows = vec![vec![0u32; 8]; 8];
        rows[2][5] = 1;
        let painted = post(app, "/api/paint", json!({ "session_id": sid, "layer": "up1.conv1", "labels": rows, "palette": { "1": v } })).await.1;
        let vis = post(app, "/api/visualize", json!({ "vector_id": v, "grid_size": 3, "seed": 4 })).await.1;
        vec![json!(sid), json!(base), painted, vis]
    }
    assert_eq!(script(&app()).await, script(&app()).await);
}

#[tokio::test]
async fn library_persists_to_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lib.json");
    let config = ServiceConfig {
        library_path: Some(path.clone()),
        ..ServiceConfig::default()
    };
    let app = app_with(config.clone());
    let (sid, _) = session(&app, 1).await;
    let id = extract(&app, &sid, "up2.conv1", 0, 0).await;
    let reopened = app_with(config);
    let (_, body) = call(&reopened, "GET", "/api/library", None).await;
    assert_eq!(body["vectors"][0]["id"], id.as_str());
}

#[tokio::test]
async fn cors_and_ui_are_optional_layers() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html></html>").unwrap();
    let app = app_with(ServiceConfig {
        ui_dir: Some(ui.path().to_path_buf()),
        cors_origin: Some("http://localhost:5173".into()),
        ..ServiceConfig::default()
    });
    let req = Request::builder()
        .uri("/api/model")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
    let req = Request::builder().uri("/ui/index.html").body(Body::empty()).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::OK);
}
