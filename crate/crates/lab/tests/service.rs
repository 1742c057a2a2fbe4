//! HTTP endpoints driven in-process through the router.

mod common;

use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use freeu_lab::checkpoint::Checkpoint;
use freeu_lab::config::ServeSpec;
use freeu_lab::service::{router, Service};
use freeu_lab::train::train;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(dir: &Path, workers: usize, queue_depth: usize) -> (Router, Checkpoint) {
    let cfg = common::tiny_config(dir);
    let (ckpt, _) = train(&cfg).unwrap();
    let spec = ServeSpec {
        workers,
        queue_depth,
        ..ServeSpec::default()
    };
    (router(Service::new(ckpt.clone(), &spec).unwrap()), ckpt)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(b) => Body::from(b.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn freeu(b1: f64) -> Value {
    json!({
        "enabled": true,
        "stages": [
            { "l": 1, "b_l": b1, "s_l": 0.9, "r_thresh": 2.0 },
            { "l": 2, "b_l": 1.2, "s_l": 0.9, "r_thresh": 4.0 }
        ]
    })
}

fn identity() -> Value {
    serde_json::to_value(common::identity()).unwrap()
}

#[tokio::test]
async fn health_and_config_describe_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let (app, ckpt) = app(dir.path(), 1, 8);
    let (status, body) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["model"]["parameters"], ckpt.model.parameter_count());
    assert_eq!(body["model"]["train_step"], 6);

    let (status, body) = call(&app, "GET", "/api/config", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["max_steps"], 20);
    assert_eq!(body["stages"].as_array().unwrap().len(), 2);
    assert_eq!(body["stages"][1]["height"], 16);
    assert_eq!(body["freeu"], serde_json::to_value(&ckpt.config.freeu).unwrap());
}

#[tokio::test]
async fn negative_backbone_factor_is_rejected_by_field() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), 1, 8);
    let body = json!({ "seed": 0, "steps": 5, "count": 1, "freeu": freeu(-1.0) });
    let (status, resp) = call(&app, "POST", "/api/sample", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let fields = resp["fields"].as_array().unwrap();
    assert_eq!(fields.len(), 1);
    assert_eq!(fields[0]["field"], "freeu.stages[0].b_l");

    for bad in [
        json!({ "seed": 0, "steps": 0, "count": 1, "freeu": identity() }),
        json!({ "seed": 0, "steps": 5, "count": 1, "freeu": identity(), "extra": 1 }),
        json!({ "seed": 0, "steps": 5, "freeu": identity() }),
    ] {
        let (status, _) = call(&app, "POST", "/api/sample", Some(bad)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let body = json!({ "seed": 0, "steps": 5, "freeu": identity(), "r_cut": -1.0 });
    let (status, resp) = call(&app, "POST", "/api/trajectory", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(resp["fields"][0]["field"], "r_cut");
}

#[tokio::test]
async fn same_sample_body_twice_gives_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), 1, 8);
    let body = json!({ "seed": 4, "steps": 8, "count": 2, "freeu": freeu(1.3) });
    let (s1, a) = call(&app, "POST", "/api/sample", Some(body.clone())).await;
    let (s2, b) = call(&app, "POST", "/api/sample", Some(body)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a["images"], b["images"]);
    assert_eq!(a["spectra"], b["spectra"]);
    let images = a["images"].as_array().unwrap();
    assert_eq!(images.len(), 2);
    let pgm = STANDARD.decode(images[0].as_str().unwrap()).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), 13 + 256);
    assert!(a["timing_ms"].is_u64());
}

#[tokio::test]
async fn identity_compare_returns_equal_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), 1, 8);
    let body = json!({ "seed": 9, "steps": 8, "freeu": identity() });
    let (status, resp) = call(&app, "POST", "/api/compare", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resp["baseline"], resp["freeu"]);
    assert_eq!(resp["identical"], true);
    assert_eq!(resp["freeu"]["images"].as_array().unwrap().len(), 1);

    let body = json!({ "seed": 9, "steps": 8, "freeu": freeu(1.8) });
    let (_, resp) = call(&app, "POST", "/api/compare", Some(body)).await;
    assert_eq!(resp["identical"], false);
    assert_ne!(resp["baseline"]["images"], resp["freeu"]["images"]);
}

#[tokio::test]
async fn trajectory_reports_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), 1, 8);
    let body = json!({ "seed": 1, "steps": 7, "freeu": freeu(1.2), "r_cut": 3.0 });
    let (status, resp) = call(&app, "POST", "/api/trajectory", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resp["band_stats"].as_array().unwrap().len(), 7);
    assert_eq!(resp["steps"].as_array().unwrap().len(), 7);
    let frames = resp["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 7);
    let pgm = STANDARD.decode(frames[0].as_str().unwrap()).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
}

#[tokio::test]
async fn diverging_sampler_reports_its_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let (mut ckpt, _) = train(&cfg).unwrap();
    for w in ckpt.model.weights_mut().values_mut() {
        *w = w.map(|v| v * 1e30);
    }
    let app = router(Service::new(ckpt, &ServeSpec::default()).unwrap());
    let body = json!({ "seed": 0, "steps": 5, "count": 1, "freeu": identity() });
    let (status, resp) = call(&app, "POST", "/api/sample", Some(body)).await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    let step = resp["step"].as_u64().expect("step index in body");
    assert!(step < 20);
    assert!(resp["error"].as_str().unwrap().contains(&step.to_string()));
}

#[tokio::test]
async fn full_queue_answers_too_many_requests() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), 1, 1);
    let body = json!({ "seed": 0, "steps": 20, "count": 4, "freeu": identity() });
    let (a, b, c) = tokio::join!(
        call(&app, "POST", "/api/sample", Some(body.clone())),
        call(&app, "POST", "/api/sample", Some(body.clone())),
        call(&app, "POST", "/api/sample", Some(body.clone())),
    );
    let statuses = [a.0, b.0, c.0];
    assert_eq!(statuses.iter().filter(|&&s| s == StatusCode::OK).count(), 2, "{statuses:?}");
    assert_eq!(c.0, StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(a.1["images"], b.1["images"]);
    let (status, _) = call(&app, "POST", "/api/sample", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_compares_match_sequential_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), 2, 8);
    let one = json!({ "seed": 21, "steps": 12, "freeu": freeu(1.4), "count": 2 });
    let two = json!({ "seed": 22, "steps": 12, "freeu": freeu(1.1), "count": 2 });
    let (c1, c2) = tokio::join!(
        call(&app, "POST", "/api/compare", Some(one.clone())),
        call(&app, "POST", "/api/compare", Some(two.clone())),
    );
    let s1 = call(&app, "POST", "/api/compare", Some(one)).await;
    let s2 = call(&app, "POST", "/api/compare", Some(two)).await;
    for (c, s) in [(c1, s1), (c2, s2)] {
        assert_eq!((c.0, s.0), (StatusCode::OK, StatusCode::OK));
        assert_eq!(c.1["baseline"], s.1["baseline"]);
        assert_eq!(c.1["freeu"], s.1["freeu"]);
    }
}
