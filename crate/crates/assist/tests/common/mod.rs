#![allow(dead_code)]

use std::sync::Arc;

use anyhow::{ensure, Context, Result};
use base64::Engine;
use reqwest::StatusCode;
use serde_json::{json, Value};
use textrestore::degrade::{describe, synthesize_pair, DegradationSpec, DescribeMode};
use textrestore::model::{ModelConfig, RestorationModel};
use textrestore::params::InitPolicy;
use textrestore::ImageTensor;
use textrestore_assist::service::{router, AppState, SPEC_HEADER};

/// An untrained model whose output still depends on the text.
pub fn model() -> RestorationModel {
    RestorationModel::new(ModelConfig::toy().with_init(InitPolicy::Standard).with_seed(3)).unwrap()
}

/// Serves `state` on a free local port and returns the base URL.
pub async fn spawn(state: AppState) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(Arc::new(state))).await.unwrap() });
    format!("http://{addr}")
}

/// A 32×32 noisy upload and the degradation that produced it.
pub fn noisy_upload() -> (Vec<u8>, DegradationSpec) {
    let clean = ImageTensor::from_fn(32, 32, |c, y, x| 0.2 + 0.6 * (((x / 4 + y / 6 + c) % 3) as f64 / 2.0));
    let spec = DegradationSpec::noise(25.0, 7);
    let (lq, _) = synthesize_pair(&clean, &spec).unwrap();
    (lq.encode_png().unwrap(), spec)
}

pub fn decode(b64: &str) -> ImageTensor {
    ImageTensor::decode_png(&base64::engine::general_purpose::STANDARD.decode(b64).unwrap()).unwrap()
}

pub async fn create(c: &reqwest::Client, base: &str) -> Result<String> {
    let r = c.post(format!("{base}/sessions")).send().await?;
    ensure!(r.status() == StatusCode::CREATED, "create returned {}", r.status());
    Ok(r.json::<Value>().await?["id"].as_str().context("no id")?.to_string())
}

pub async fn upload(c: &reqwest::Client, base: &str, id: &str, png: &[u8], spec: Option<&DegradationSpec>) -> Result<StatusCode> {
    let mut req = c.post(format!("{base}/sessions/{id}/image")).body(png.to_vec());
    if let Some(spec) = spec {
        req = req.header(SPEC_HEADER, serde_json::to_string(spec)?);
    }
    Ok(req.send().await?.status())
}

pub async fn message(c: &reqwest::Client, base: &str, id: &str, instruction: &str, text: &str) -> Result<(StatusCode, Value)> {
    let r = c
        .post(format!("{base}/sessions/{id}/messages"))
        .json(&json!({ "instruction": instruction, "text": text }))
        .send()
        .await?;
    Ok((r.status(), r.json().await?))
}

/// Create → upload → describe → restore → refine with contradicting text,
/// checking each reply. Returns a short summary.
pub async fn lifecycle(base: &str) -> Result<String> {
    let c = reqwest::Client::new();
    let (png, spec) = noisy_upload();
    let id = create(&c, base).await?;
    ensure!(upload(&c, base, &id, &png, Some(&spec)).await? == StatusCode::NO_CONTENT, "upload rejected");

    let (st, d) = message(&c, base, &id, "describe", "").await?;
    ensure!(st == StatusCode::OK, "describe returned {st}: {d}");
    let gt = describe(&spec, DescribeMode::Gt, 0).text;
    ensure!(d["reply_text"] == gt.as_str(), "describe text {} != {gt}", d["reply_text"]);
    ensure!(d.get("image_b64").is_none(), "describe should not return an image");

    let (st, r) = message(&c, base, &id, "restore", "").await?;
    ensure!(st == StatusCode::OK, "restore returned {st}: {r}");
    let restored = decode(r["image_b64"].as_str().context("restore returned no image")?);
    ensure!((restored.height(), restored.width()) == (32, 32), "restored image changed size");

    let gf = describe(&spec, DescribeMode::Gf, 0).text;
    let (st, f) = message(&c, base, &id, "refine", &gf).await?;
    ensure!(st == StatusCode::OK, "refine returned {st}: {f}");
    let refined = decode(f["image_b64"].as_str().context("refine returned no image")?);
    ensure!(refined != restored, "refining with contradicting text left the image unchanged");

    let state: Value = c.get(format!("{base}/sessions/{id}")).send().await?.json().await?;
    let log = state["messages"].as_array().context("no messages")?;
    ensure!(log.len() == 6, "expected 6 logged messages, found {}", log.len());
    let roles: Vec<&str> = log.iter().filter_map(|m| m["role"].as_str()).collect();
    ensure!(roles == ["user", "assistant", "user", "assistant", "user", "assistant"], "roles {roles:?}");
    ensure!(state["restored_image_b64"] == f["image_b64"], "session keeps a stale restored image");
    let diff = refined.data().iter().zip(restored.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(format!("6 messages logged, refine changed pixels by up to {diff:.3}"))
}
