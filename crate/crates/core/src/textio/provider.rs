use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{TextConfig, TextEncoder, TextFeature};
use crate::degrade::{describe, DegradationSpec, DescribeMode, DescriptionText, Provenance};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

/// Three questions, one per supported degradation.
pub const DEFAULT_PROMPT: &str = "Is the image well lit or dark? Are there rain streaks in the image? \
Does the image contain noise, and if so, is the noise level low, medium or high?";

pub struct ProviderRequest<'a> {
    pub image: &'a ImageTensor,
    pub prompt: &'a str,
    /// Ground truth carried alongside the image by synthetic pipelines.
    pub spec: Option<&'a DegradationSpec>,
}

pub trait DescriptionProvider: Send + Sync {
    fn describe(&self, req: &ProviderRequest<'_>) -> Result<DescriptionText>;
}

/// Renders the description from the carried spec and ignores the prompt.
#[derive(Clone, Copy, Debug)]
pub struct OracleProvider {
    pub mode: DescribeMode,
    pub seed: u64,
}

impl Default for OracleProvider {
    fn default() -> Self {
        Self { mode: DescribeMode::Gt, seed: 0 }
    }
}

impl DescriptionProvider for OracleProvider {
    fn describe(&self, req: &ProviderRequest<'_>) -> Result<DescriptionText> {
        let spec = req
            .spec
            .ok_or_else(|| Error::Precondition("oracle provider needs the degradation spec".into()))?;
        Ok(describe(spec, self.mode, self.seed))
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into()
}

fn transport(e: impl std::fmt::Display) -> Error {
    Error::Transport(e.to_string())
}

#[derive(Serialize)]
struct MllmRequest<'a> {
    image_b64: String,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct MllmResponse {
    text: String,
}

/// Posts `{image_b64, prompt}` and returns the `text` field verbatim.
pub struct RemoteMllmProvider {
    endpoint: String,
    agent: ureq::Agent,
    in_flight: Mutex<()>,
}

impl RemoteMllmProvider {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self { endpoint: endpoint.into(), agent: agent(timeout), in_flight: Mutex::new(()) }
    }
}

impl DescriptionProvider for RemoteMllmProvider {
    fn describe(&self, req: &ProviderRequest<'_>) -> Result<DescriptionText> {
        let png = req.image.encode_png()?;
        let body = MllmRequest {
            image_b64: base64::engine::general_purpose::STANDARD.encode(png),
            prompt: req.prompt,
        };
        let _guard = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        let resp: MllmResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(transport)?
            .body_mut()
            .read_json()
            .map_err(transport)?;
        DescriptionText::new(resp.text, Provenance::Mllm)
            .map_err(|_| Error::Transport("remote provider returned an empty description".into()))
    }
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EncodeResponse {
    rows: Vec<Vec<f64>>,
}

/// Posts `{text}` and expects `{rows}` shaped `L×D`; all-zero rows are
/// treated as padding.
pub struct RemoteTextEncoder {
    endpoint: String,
    cfg: TextConfig,
    agent: ureq::Agent,
    in_flight: Mutex<()>,
}

impl RemoteTextEncoder {
    pub fn new(endpoint: impl Into<String>, cfg: TextConfig, timeout: Duration) -> Self {
        Self { endpoint: endpoint.into(), cfg, agent: agent(timeout), in_flight: Mutex::new(()) }
    }
}

impl TextEncoder for RemoteTextEncoder {
    fn config(&self) -> TextConfig {
        self.cfg
    }

    fn encode(&self, text: &str) -> Result<TextFeature> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot encode empty text"));
        }
        let _guard = self.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        let resp: EncodeResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(&EncodeRequest { text })
            .map_err(transport)?
            .body_mut()
            .read_json()
            .map_err(transport)?;
        let (l, d) = (self.cfg.max_len, self.cfg.dim);
        if resp.rows.len() != l || resp.rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape(format!("remote encoder must return {l}x{d} rows")));
        }
        let mask: Vec<bool> = resp.rows.iter().map(|r| r.iter().any(|v| *v != 0.0)).collect();
        TextFeature::new(resp.rows.into_iter().flatten().collect(), mask, d)
    }
}
