use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use objseek_core::encoder::{Encoder, ToyEncoder};
use objseek_core::pipeline::{self, PipelineOptions};
use objseek_core::preprocess::AnnotationFile;
use objseek_core::synth::{random_scene, OBJECT_CLASSES, STREET_CLASSES};
use objseek_core::{ClassLabel, Index};
use objseek_service::{router, AppState, SearchHit, ServiceOptions};

struct Fixture {
    _dir: tempfile::TempDir,
    state: Arc<AppState>,
}

impl Fixture {
    fn app(&self) -> Router {
        router(self.state.clone(), None)
    }
}

fn build(token: Option<&str>, with_encoder: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let (images, anns) = (dir.path().join("img"), dir.path().join("ann"));
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&anns).unwrap();
    for i in 0..12u64 {
        let name = format!("f{i:02}");
        let (img, ann) = random_scene(40, 30, 5, 50 + i).unwrap();
        std::fs::write(images.join(format!("{name}.png")), pipeline::encode_png(&img).unwrap()).unwrap();
        AnnotationFile::from_annotation(&name, &ann)
            .write(&anns.join(format!("{name}.json")))
            .unwrap();
    }
    let enc = ToyEncoder::new(64).unwrap();
    let classes = STREET_CLASSES.iter().map(|c| ClassLabel::new(*c).unwrap()).collect();
    let mut index = Index::new(enc.descriptor().clone(), classes).unwrap();
    let opts = PipelineOptions {
        with_full_image: true,
        workers: 1,
    };
    pipeline::ingest_directory(&mut index, &enc, &images, &anns, &opts).unwrap();

    let mut options = ServiceOptions::new(dir.path().join("judgments.jsonl"));
    options.annotations_dir = Some(anns);
    options.bearer_token = token.map(str::to_owned);
    let encoder: Option<Arc<dyn Encoder>> = with_encoder.then(|| Arc::new(enc) as Arc<dyn Encoder>);
    let state = Arc::new(AppState::new(index, encoder, options).unwrap());
    Fixture { _dir: dir, state }
}

fn fixture() -> Fixture {
    build(None, true)
}

async fn send(app: Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn search_req(class: &str, text: &str, k: usize) -> Request<Body> {
    post("/v1/search", json!({ "class": class, "text": text, "k": k }))
}

/// A class with at least `min` matching images, with its ranked hits.
async fn populous_class(fx: &Fixture, min: usize) -> (String, Vec<SearchHit>, String) {
    for class in OBJECT_CLASSES {
        let (status, headers, body) = send(fx.app(), search_req(class, "red", 20)).await;
        assert_eq!(status, StatusCode::OK);
        let hits: Vec<SearchHit> = serde_json::from_slice(&body).unwrap();
        if hits.len() >= min {
            let qid = headers["x-query-id"].to_str().unwrap().to_owned();
            return (class.to_string(), hits, qid);
        }
    }
    panic!("no class with {min} images");
}

#[tokio::test]
async fn unknown_class_lists_valid_classes() {
    let fx = fixture();
    let (status, _, body) = send(fx.app(), search_req("animal", "dog", 10)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let listed: Vec<String> = serde_json::from_value(v["valid_classes"].clone()).unwrap();
    let expected: Vec<String> = STREET_CLASSES.iter().map(|s| s.to_string()).collect();
    assert_eq!(listed, expected);
    assert!(v["error"].as_str().unwrap().contains("animal"));
}

#[tokio::test]
async fn zero_k_is_an_empty_list() {
    let fx = fixture();
    let (status, _, body) = send(fx.app(), search_req("car", "red", 0)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"[]");
}

#[tokio::test]
async fn search_is_byte_identical_across_repeats() {
    let fx = fixture();
    let (class, hits, _) = populous_class(&fx, 2).await;
    let mut bodies = Vec::new();
    for _ in 0..3 {
        let (status, _, body) = send(fx.app(), search_req(&class, "red car", 50)).await;
        assert_eq!(status, StatusCode::OK);
        bodies.push(body);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
    for h in &hits {
        let j = h.best_object_index.unwrap();
        assert_eq!(h.bbox, fx.state.index().object_bbox(&h.image_id, j));
    }
    assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
}

#[tokio::test]
async fn full_image_mode_has_no_object() {
    let fx = fixture();
    let req = post("/v1/search", json!({"class": "car", "text": "blue", "k": 5, "mode": "full"}));
    let (status, headers, body) = send(fx.app(), req).await;
    assert_eq!(status, StatusCode::OK);
    let hits: Vec<SearchHit> = serde_json::from_slice(&body).unwrap();
    assert_eq!(hits.len(), 5);
    assert!(hits.iter().all(|h| h.best_object_index.is_none() && h.bbox.is_none()));
    assert_eq!(headers["x-exhausted"], "false");
}

#[tokio::test]
async fn malformed_search_body_is_bad_request() {
    let fx = fixture();
    let (status, _, body) = send(fx.app(), post("/v1/search", json!({"class": "car"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn curve_after_three_judgments() {
    let fx = fixture();
    let (class, hits, qid) = populous_class(&fx, 3).await;
    for (hit, verdict) in hits.iter().zip(["true_positive", "false_positive", "true_positive"]) {
        let body = json!({"query_id": qid, "image_id": hit.image_id, "verdict": verdict, "judge": "t"});
        let (status, _, resp) = send(fx.app(), post("/v1/judgments", body)).await;
        assert_eq!(status, StatusCode::CREATED);
        let stored: Value = serde_json::from_slice(&resp).unwrap();
        assert_eq!(stored["verdict"], verdict);
        assert!(stored["ts"].is_string());
    }
    let (status, _, body) = send(fx.app(), get(&format!("/v1/curves?query_id={qid}&n=3"))).await;
    assert_eq!(status, StatusCode::OK, "{class}");
    let curve: Vec<u32> = serde_json::from_slice(&body).unwrap();
    assert_eq!(curve, vec![1, 1, 2]);

    let (status, _, _) = send(fx.app(), get("/v1/curves?query_id=ffff&n=3")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn judgment_for_unknown_image_is_404() {
    let fx = fixture();
    let body = json!({"query_id": "q", "image_id": "nope", "verdict": "true_positive"});
    let (status, _, _) = send(fx.app(), post("/v1/judgments", body)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn images_and_crops() {
    let fx = fixture();
    let (_, hits, _) = populous_class(&fx, 1).await;
    let hit = &hits[0];
    let id = hit.image_id.as_str();
    let (status, headers, body) = send(fx.app(), get(&format!("/v1/images/{id}"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "image/png");
    let source = fx.state.index().image(&hit.image_id).unwrap().source_uri().to_owned();
    assert_eq!(body, std::fs::read(Path::new(&source)).unwrap());

    let j = hit.best_object_index.unwrap();
    let uri = format!("/v1/images/{id}/objects/{j}");
    let (status, _, first) = send(fx.app(), get(&uri)).await;
    assert_eq!(status, StatusCode::OK);
    let (_, _, second) = send(fx.app(), get(&uri)).await;
    assert_eq!(first, second);
    let bbox = hit.bbox.unwrap();
    let side = bbox.width.max(bbox.height);
    let crop = pipeline::decode_image(&first, Path::new("crop.png")).unwrap();
    assert_eq!((crop.width(), crop.height()), (side, side));

    for uri in ["/v1/images/missing", "/v1/images/missing/objects/0", &format!("/v1/images/{id}/objects/999")] {
        let (status, _, _) = send(fx.app(), get(uri)).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn classes_health_and_metrics() {
    let fx = fixture();
    let (status, _, body) = send(fx.app(), get("/v1/classes")).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["classes"].as_array().unwrap().len(), STREET_CLASSES.len());
    let rows: u64 = v["classes"].as_array().unwrap().iter().map(|c| c["rows"].as_u64().unwrap()).sum();
    assert_eq!(rows, v["object_count"].as_u64().unwrap());

    let (_, _, body) = send(fx.app(), get("/v1/healthz")).await;
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["encoder_id"], "toy-v1");
    assert_eq!(v["index_version"], 1);

    send(fx.app(), search_req("car", "red", 5)).await;
    send(fx.app(), search_req("animal", "red", 5)).await;
    let (status, headers, body) = send(fx.app(), get("/v1/metrics")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(headers[header::CONTENT_TYPE].to_str().unwrap().starts_with("text/plain"));
    let text = String::from_utf8(body).unwrap();
    assert!(text.contains("objseek_search_requests_total 2\n"), "{text}");
    assert!(text.contains("objseek_search_errors_total 1\n"));
    assert!(text.contains("objseek_search_latency_seconds_count 2\n"));
    let scanned = text
        .lines()
        .find_map(|l| l.strip_prefix("objseek_rows_scanned_total "))
        .unwrap();
    let car_rows = fx.state.index().partition(&ClassLabel::new("car").unwrap()).unwrap().len();
    assert_eq!(scanned.parse::<usize>().unwrap(), car_rows);
}

#[tokio::test]
async fn missing_encoder_is_503() {
    let fx = build(None, false);
    let (status, _, _) = send(fx.app(), search_req("car", "red", 5)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (_, _, body) = send(fx.app(), get("/v1/healthz")).await;
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "degraded");
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let fx = build(Some("s3cret"), true);
    let (status, headers, _) = send(fx.app(), get("/v1/classes")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(headers[header::WWW_AUTHENTICATE], "Bearer");
    let req = Request::get("/v1/classes")
        .header(header::AUTHORIZATION, "Bearer s3cret")
        .body(Body::empty())
        .unwrap();
    assert_eq!(send(fx.app(), req).await.0, StatusCode::OK);
    let req = Request::get("/v1/classes")
        .header(header::AUTHORIZATION, "Bearer wrong")
        .body(Body::empty())
        .unwrap();
    assert_eq!(send(fx.app(), req).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(send(fx.app(), get("/v1/healthz")).await.0, StatusCode::OK);
}
