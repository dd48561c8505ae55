mod common;

use common::*;
use reqwest::StatusCode;
use serde_json::Value;
use textrestore::degrade::{describe, DescribeMode};
use textrestore_assist::config::{Fallback, ProviderKind, ServiceConfig};
use textrestore_assist::service::{AppState, SPEC_HEADER};

fn oracle() -> AppState {
    AppState::new(model(), "test".into(), ServiceConfig::default()).unwrap()
}

/// A remote provider pointed at a port nobody listens on.
fn unreachable(fallback: Fallback) -> AppState {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = ServiceConfig::default();
    cfg.provider.kind = ProviderKind::Remote;
    cfg.provider.mllm_endpoint = Some(format!("http://127.0.0.1:{port}/describe"));
    cfg.provider.timeout_secs = 2.0;
    cfg.provider.fallback = fallback;
    AppState::new(model(), "test".into(), cfg).unwrap()
}

#[tokio::test]
async fn full_dialogue() {
    let base = spawn(oracle()).await;
    lifecycle(&base).await.unwrap();
}

#[tokio::test]
async fn health_reports_the_checkpoint() {
    let base = spawn(oracle()).await;
    let v: Value = reqwest::get(format!("{base}/healthz")).await.unwrap().json().await.unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["checkpoint_id"], "test");
}

#[tokio::test]
async fn unknown_sessions_are_404() {
    let base = spawn(oracle()).await;
    let c = reqwest::Client::new();
    for id in ["not-a-uuid", "5b0f1a1e-0000-4000-8000-000000000000"] {
        assert_eq!(c.get(format!("{base}/sessions/{id}")).send().await.unwrap().status(), StatusCode::NOT_FOUND);
        let (st, _) = message(&c, &base, id, "describe", "").await.unwrap();
        assert_eq!(st, StatusCode::NOT_FOUND);
    }
}

#[tokio::test]
async fn instructions_before_upload_are_409_and_chat_is_fine() {
    let base = spawn(oracle()).await;
    let c = reqwest::Client::new();
    let id = create(&c, &base).await.unwrap();
    for ins in ["describe", "restore"] {
        assert_eq!(message(&c, &base, &id, ins, "").await.unwrap().0, StatusCode::CONFLICT);
    }
    assert_eq!(message(&c, &base, &id, "refine", "it is dark").await.unwrap().0, StatusCode::CONFLICT);
    let (st, v) = message(&c, &base, &id, "none", "hello").await.unwrap();
    assert_eq!(st, StatusCode::OK);
    assert!(v.get("image_b64").is_none());
}

#[tokio::test]
async fn empty_refine_is_422_and_leaves_the_session_alone() {
    let base = spawn(oracle()).await;
    let c = reqwest::Client::new();
    let (png, spec) = noisy_upload();
    let id = create(&c, &base).await.unwrap();
    upload(&c, &base, &id, &png, Some(&spec)).await.unwrap();
    let (st, _) = message(&c, &base, &id, "refine", "   ").await.unwrap();
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let state: Value = c.get(format!("{base}/sessions/{id}")).send().await.unwrap().json().await.unwrap();
    assert_eq!(state["messages"].as_array().unwrap().len(), 0);
    assert!(state["restored_image_b64"].is_null());
}

#[tokio::test]
async fn bad_uploads_are_rejected() {
    let base = spawn(oracle()).await;
    let c = reqwest::Client::new();
    let id = create(&c, &base).await.unwrap();
    assert_eq!(upload(&c, &base, &id, b"not a png", None).await.unwrap(), StatusCode::UNPROCESSABLE_ENTITY);
    let (png, _) = noisy_upload();
    let st = c
        .post(format!("{base}/sessions/{id}/image"))
        .header(SPEC_HEADER, "{oops")
        .body(png)
        .send()
        .await
        .unwrap()
        .status();
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oracle_without_a_spec_is_412() {
    let base = spawn(oracle()).await;
    let c = reqwest::Client::new();
    let (png, _) = noisy_upload();
    let id = create(&c, &base).await.unwrap();
    upload(&c, &base, &id, &png, None).await.unwrap();
    assert_eq!(message(&c, &base, &id, "describe", "").await.unwrap().0, StatusCode::PRECONDITION_FAILED);
    // refine never consults the provider
    assert_eq!(message(&c, &base, &id, "refine", "The image is dark.").await.unwrap().0, StatusCode::OK);
}

#[tokio::test]
async fn provider_failure_without_fallback_is_502() {
    let base = spawn(unreachable(Fallback::None)).await;
    let c = reqwest::Client::new();
    let (png, spec) = noisy_upload();
    let id = create(&c, &base).await.unwrap();
    upload(&c, &base, &id, &png, Some(&spec)).await.unwrap();
    let (st, v) = message(&c, &base, &id, "restore", "").await.unwrap();
    assert_eq!(st, StatusCode::BAD_GATEWAY);
    assert!(v["note"].as_str().unwrap().contains("no fallback"));
    assert!(v.get("image_b64").is_none());
}

#[tokio::test]
async fn provider_failure_with_fallback_still_answers() {
    let base = spawn(unreachable(Fallback::Oracle)).await;
    let c = reqwest::Client::new();
    let (png, spec) = noisy_upload();
    let id = create(&c, &base).await.unwrap();
    upload(&c, &base, &id, &png, Some(&spec)).await.unwrap();
    let (st, v) = message(&c, &base, &id, "restore", "").await.unwrap();
    assert_eq!(st, StatusCode::BAD_GATEWAY);
    assert_eq!(v["reply_text"], describe(&spec, DescribeMode::Gt, 0).text.as_str());
    assert!(v["image_b64"].is_string());
    let state: Value = c.get(format!("{base}/sessions/{id}")).send().await.unwrap().json().await.unwrap();
    assert_eq!(state["restored_image_b64"], v["image_b64"]);

    // with no spec the fallback has nothing to go on
    let id = create(&c, &base).await.unwrap();
    upload(&c, &base, &id, &png, None).await.unwrap();
    let (st, v) = message(&c, &base, &id, "describe", "").await.unwrap();
    assert_eq!(st, StatusCode::BAD_GATEWAY);
    assert!(v["note"].as_str().unwrap().contains("no degradation spec"));
}

#[tokio::test]
async fn sessions_are_deterministic_and_isolated() {
    let base = spawn(oracle()).await;
    let c = reqwest::Client::new();
    let (png, spec) = noisy_upload();
    let mut images = Vec::new();
    for _ in 0..2 {
        let id = create(&c, &base).await.unwrap();
        upload(&c, &base, &id, &png, Some(&spec)).await.unwrap();
        images.push(message(&c, &base, &id, "restore", "").await.unwrap().1["image_b64"].clone());
    }
    assert_eq!(images[0], images[1]);
}
