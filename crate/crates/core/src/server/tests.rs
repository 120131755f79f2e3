use std::sync::OnceLock;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use super::*;
use crate::augment::procedural_library;
use crate::trainer::{train, TrainConfig};
use crate::voxgrid::{voxb_from_bytes, CoarseInput, LabelGrid, OccupancyGrid};

fn ckpt() -> Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let cfg = TrainConfig {
            k: 2,
            big_k: 4,
            steps: 2,
            backbone_width: 4,
            generator_widths: vec![4, 4],
            discriminator_width: 4,
            log_every: 0,
            ..TrainConfig::default()
        };
        train(&cfg, &procedural_library("toy2@K4").unwrap(), None).unwrap().0
    })
    .clone()
}

fn app() -> Router {
    router(AppState::new(Some(ckpt())).unwrap(), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map_or_else(Body::empty, |b| Body::from(b.to_string()));
    let req = Request::builder()
        .method(method)
        .uri(format!("/api/v1{uri}"))
        .header("content-type", "application/json")
        .body(body)
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn raw(app: &Router, method: &str, uri: &str, body: &'static str) -> StatusCode {
    let req = Request::builder()
        .method(method)
        .uri(format!("/api/v1{uri}"))
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    app.clone().oneshot(req).await.unwrap().status()
}

fn add(coords: Value, style: u16) -> Value {
    json!({"edits": [{"op": "add", "coords": coords, "value": style}]})
}

#[tokio::test]
async fn health_reports_the_model() {
    let (s, v) = call(&app(), "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!((v["model"]["k"].as_u64(), v["model"]["K"].as_u64(), v["model"]["N"].as_u64()), (Some(2), Some(4), Some(2)));
}

#[tokio::test]
async fn without_a_model_work_is_unavailable() {
    let app = router(AppState::new(None).unwrap(), None);
    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "no_model");
    for (m, uri) in [("GET", "/doc"), ("GET", "/styles"), ("POST", "/detailize"), ("POST", "/undo")] {
        assert_eq!(call(&app, m, uri, None).await.0, StatusCode::SERVICE_UNAVAILABLE, "{m} {uri}");
    }
}

#[tokio::test]
async fn styles_list_names_parts_and_thumbnails() {
    let (s, v) = call(&app(), "GET", "/styles", None).await;
    assert_eq!(s, StatusCode::OK);
    let styles = v["styles"].as_array().unwrap();
    assert_eq!(styles.len(), 2);
    assert_eq!(styles[0]["id"], 1);
    assert_eq!(styles[0]["name"], ckpt().library.shapes()[0].name);
    assert_eq!(v["part_vocab"].as_array().unwrap().len(), ckpt().library.part_vocab().len());
    assert_eq!(v["thumbnail_level"], 4);
    for s in styles {
        let verts = s["thumbnail"]["vertices"].as_array().unwrap();
        assert_eq!(verts.len() % 3, 0);
        assert_eq!(s["thumbnail"]["triangles"].as_array().unwrap().len() % 3, 0);
    }
}

#[tokio::test]
async fn doc_round_trips_bit_identically() {
    let app = app();
    let (_, empty) = call(&app, "GET", "/doc", None).await;
    assert_eq!(empty["side"], 4);
    assert_eq!(empty["revision"], 0);

    let n = 64;
    let mut bits = [0u8; 8];
    let mut part = vec![0u16; n];
    let mut style = vec![0u16; n];
    for i in (0..n).filter(|i| i % 3 == 0) {
        bits[i / 8] |= 1 << (i % 8);
        part[i] = (i % 3) as u16;
        style[i] = 1 + (i % 2) as u16;
    }
    let occ = base64::engine::general_purpose::STANDARD.encode(bits);
    let doc = json!({"side": 4, "occ": occ, "part": part, "style": style});
    let (s, v) = call(&app, "PUT", "/doc", Some(doc.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["revision"], 1);
    let (_, back) = call(&app, "GET", "/doc", None).await;
    for key in ["side", "occ", "part", "style"] {
        assert_eq!(back[key], doc[key], "{key}");
    }
    assert_eq!(back["revision"], 1);
}

#[tokio::test]
async fn put_doc_validates() {
    let app = app();
    let zeros = vec![0u16; 64];
    let occ = base64::engine::general_purpose::STANDARD.encode([1u8, 0, 0, 0, 0, 0, 0, 0]);
    let wrong_side = json!({"side": 8, "occ": occ, "part": zeros, "style": zeros});
    assert_eq!(call(&app, "PUT", "/doc", Some(wrong_side)).await.0, StatusCode::BAD_REQUEST);
    let no_style = json!({"side": 4, "occ": occ, "part": zeros, "style": zeros});
    assert_eq!(call(&app, "PUT", "/doc", Some(no_style)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let mut style = zeros.clone();
    style[0] = 3;
    let bad_style = json!({"side": 4, "occ": occ, "part": zeros, "style": style});
    assert_eq!(call(&app, "PUT", "/doc", Some(bad_style)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    style[0] = 1;
    let stale = json!({"revision": 5, "side": 4, "occ": occ, "part": zeros, "style": style});
    assert_eq!(call(&app, "PUT", "/doc", Some(stale)).await.0, StatusCode::CONFLICT);
    assert_eq!(raw(&app, "PUT", "/doc", "{\"side\":").await, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/doc", None).await.1["revision"], 0);
}

#[tokio::test]
async fn edits_apply_and_bump_the_revision() {
    let app = app();
    let (s, v) = call(&app, "POST", "/edit", Some(add(json!([[0, 0, 0], [1, 0, 0]]), 2))).await;
    assert_eq!((s, v["revision"].as_u64()), (StatusCode::OK, Some(1)));
    let paint = json!({"revision": 1, "edits": [
        {"op": "paint_style", "coords": [[1, 0, 0]], "value": 1},
        {"op": "paint_part", "coords": [[0, 0, 0]], "value": 2},
    ]});
    assert_eq!(call(&app, "POST", "/edit", Some(paint)).await.1["revision"], 2);
    let (_, doc) = call(&app, "GET", "/doc", None).await;
    assert_eq!(doc["style"][0], 2);
    assert_eq!(doc["style"][1], 1);
    assert_eq!(doc["part"][0], 2);
    let remove = json!({"edits": [{"op": "remove", "coords": [[0, 0, 0]]}]});
    assert_eq!(call(&app, "POST", "/edit", Some(remove)).await.1["revision"], 3);
    let (_, doc) = call(&app, "GET", "/doc", None).await;
    assert_eq!((doc["style"][0].as_u64(), doc["part"][0].as_u64()), (Some(0), Some(0)));
}

#[tokio::test]
async fn rejected_edits_leave_the_document_alone() {
    let app = app();
    call(&app, "POST", "/edit", Some(add(json!([[0, 0, 0]]), 1))).await;
    let (_, before) = call(&app, "GET", "/doc", None).await;

    let stale = json!({"revision": 0, "edits": [{"op": "add", "coords": [[1, 1, 1]], "value": 1}]});
    assert_eq!(call(&app, "POST", "/edit", Some(stale)).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "POST", "/edit", Some(add(json!([[4, 0, 0]]), 1))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", "/edit", Some(add(json!([[0, -1, 0]]), 1))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", "/edit", Some(add(json!([[1, 0, 0]]), 3))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let empty_paint = json!({"edits": [{"op": "paint_style", "coords": [[3, 3, 3]], "value": 1}]});
    assert_eq!(call(&app, "POST", "/edit", Some(empty_paint)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let bad_part = json!({"edits": [{"op": "paint_part", "coords": [[0, 0, 0]], "value": 99}]});
    assert_eq!(call(&app, "POST", "/edit", Some(bad_part)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let no_value = json!({"edits": [{"op": "add", "coords": [[1, 0, 0]]}]});
    assert_eq!(call(&app, "POST", "/edit", Some(no_value)).await.0, StatusCode::BAD_REQUEST);
    let partly_bad = json!({"edits": [
        {"op": "add", "coords": [[2, 2, 2]], "value": 1},
        {"op": "paint_style", "coords": [[3, 3, 3]], "value": 1},
    ]});
    assert_eq!(call(&app, "POST", "/edit", Some(partly_bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(raw(&app, "POST", "/edit", "not json").await, StatusCode::BAD_REQUEST);
    assert_eq!(raw(&app, "POST", "/edit", r#"{"edits": [{"op": "smudge", "coords": []}]}"#).await, StatusCode::BAD_REQUEST);

    assert_eq!(call(&app, "GET", "/doc", None).await.1, before);
}

#[tokio::test]
async fn undo_and_redo_walk_the_history() {
    let app = app();
    call(&app, "POST", "/edit", Some(add(json!([[0, 0, 0]]), 1))).await;
    let (_, one) = call(&app, "GET", "/doc", None).await;
    call(&app, "POST", "/edit", Some(add(json!([[1, 0, 0]]), 2))).await;
    let (_, two) = call(&app, "GET", "/doc", None).await;

    let (s, v) = call(&app, "POST", "/undo", None).await;
    assert_eq!((s, v["revision"].as_u64()), (StatusCode::OK, Some(3)));
    assert_eq!(call(&app, "GET", "/doc", None).await.1["style"], one["style"]);
    assert_eq!(call(&app, "POST", "/redo", Some(json!({"revision": 3}))).await.1["revision"], 4);
    assert_eq!(call(&app, "GET", "/doc", None).await.1["style"], two["style"]);
    assert_eq!(call(&app, "POST", "/redo", None).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "POST", "/undo", Some(json!({"revision": 1}))).await.0, StatusCode::CONFLICT);

    // A new edit drops the redo branch.
    call(&app, "POST", "/undo", None).await;
    call(&app, "POST", "/edit", Some(add(json!([[2, 0, 0]]), 1))).await;
    assert_eq!(call(&app, "POST", "/redo", None).await.0, StatusCode::CONFLICT);
}

#[test]
fn undo_history_is_bounded() {
    let mut s = Session::new(3, 2, 2, UNDO_LIMIT).unwrap();
    for i in 0..UNDO_LIMIT as i64 + 6 {
        let req = EditRequest {
            revision: None,
            edits: vec![EditBatch { op: EditOp::Add, coords: vec![[i % 8, (i / 8) % 8, i / 64]], value: Some(1) }],
        };
        s.apply(&req).unwrap();
    }
    assert_eq!(s.undo_depth(), UNDO_LIMIT);
    for _ in 0..UNDO_LIMIT {
        s.undo(None).unwrap();
    }
    assert_eq!(s.undo(None).unwrap_err().status, StatusCode::CONFLICT);
    // The six oldest edits can no longer be undone.
    assert_eq!(s.doc().occupied_count(), 6);
}

#[tokio::test]
async fn detailize_is_read_only_and_deterministic() {
    let app = app();
    call(&app, "POST", "/edit", Some(add(json!([[1, 1, 1], [2, 1, 1], [1, 2, 1]]), 1))).await;
    call(&app, "POST", "/edit", Some(add(json!([[2, 2, 1]]), 2))).await;
    let (_, before) = call(&app, "GET", "/doc", None).await;

    let (s, a) = call(&app, "POST", "/detailize", Some(json!({"level": 4}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((a["revision"].as_u64(), a["level"].as_u64()), (Some(2), Some(4)));
    assert!(a["timing_ms"].as_f64().unwrap() >= 0.0);
    let bytes = base64::engine::general_purpose::STANDARD.decode(a["voxb"].as_str().unwrap()).unwrap();
    let file = voxb_from_bytes(&bytes).unwrap();
    assert_eq!(file.occ.side(), 16);
    let verts = a["mesh"]["vertices"].as_array().unwrap().len() / 3;
    if verts > 0 {
        assert_eq!(a["mesh"]["regions"].as_array().unwrap().len(), verts);
    }

    let (_, b) = call(&app, "POST", "/detailize", None).await;
    assert_eq!(b["level"], 4);
    assert_eq!(a["voxb"], b["voxb"]);
    assert_eq!(a["mesh"], b["mesh"]);
    assert_eq!(call(&app, "GET", "/doc", None).await.1, before);

    let (_, low) = call(&app, "POST", "/detailize", Some(json!({"level": 3}))).await;
    let bytes = base64::engine::general_purpose::STANDARD.decode(low["voxb"].as_str().unwrap()).unwrap();
    assert_eq!(voxb_from_bytes(&bytes).unwrap().occ.side(), 8);
    for level in [2, 5] {
        assert_eq!(call(&app, "POST", "/detailize", Some(json!({"level": level}))).await.0, StatusCode::BAD_REQUEST);
    }
}

#[tokio::test]
async fn detailize_matches_the_library_call() {
    let app = app();
    call(&app, "POST", "/edit", Some(add(json!([[0, 0, 0], [0, 1, 0]]), 2))).await;
    let (_, v) = call(&app, "POST", "/detailize", Some(json!({"level": 4}))).await;
    let bytes = base64::engine::general_purpose::STANDARD.decode(v["voxb"].as_str().unwrap()).unwrap();
    let file = voxb_from_bytes(&bytes).unwrap();
    let mut doc = CoarseInput::empty(2).unwrap();
    let (occ, labels) = doc.clone().into_parts();
    let mut values = occ.into_values();
    let (part, mut style) = labels.into_parts();
    for i in [0, 4] {
        values[i] = 1.0;
        style[i] = 2;
    }
    doc = CoarseInput::new(
        OccupancyGrid::from_values(2, values).unwrap(),
        LabelGrid::from_parts(2, part, style).unwrap(),
    )
    .unwrap();
    assert_eq!(file.occ, ckpt().detailize(&doc, 4).unwrap());
    assert_eq!(file.style.unwrap()[0], 2);
}

#[tokio::test]
async fn cors_allows_localhost_only() {
    let app = app();
    let preflight = |origin: &'static str| {
        Request::builder()
            .method("OPTIONS")
            .uri("/api/v1/edit")
            .header("origin", origin)
            .header("access-control-request-method", "POST")
            .body(Body::empty())
            .unwrap()
    };
    let res = app.clone().oneshot(preflight("http://localhost:5173")).await.unwrap();
    assert_eq!(res.headers()["access-control-allow-origin"], "http://localhost:5173");
    let res = app.clone().oneshot(preflight("https://example.com")).await.unwrap();
    assert!(res.headers().get("access-control-allow-origin").is_none());
}

#[tokio::test]
async fn static_files_are_served_outside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>hi</p>").unwrap();
    let app = router(AppState::new(Some(ckpt())).unwrap(), Some(dir.path().to_path_buf()));
    let res = app.oneshot(Request::get("/index.html").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    let body = res.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<p>hi</p>");
}
