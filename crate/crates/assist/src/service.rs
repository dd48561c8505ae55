//! HTTP session service for the describe / restore / refine dialogue.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use textrestore::degrade::{DegradationSpec, DescriptionText};
use textrestore::model::RestorationModel;
use textrestore::textio::{
    DescriptionProvider, HashEncoder, OracleProvider, ProviderRequest, RemoteMllmProvider, RemoteTextEncoder,
    TextEncoder, DEFAULT_PROMPT,
};
use textrestore::train::Checkpoint;
use textrestore::{Error, ImageTensor};
use tokio::sync::Mutex;
use uuid::Uuid;

use crate::config::{Fallback, ProviderKind, RefineText, ServiceConfig};

/// Request header carrying the synthetic degradation spec of an upload.
pub const SPEC_HEADER: &str = "x-degradation-spec";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instruction {
    Describe,
    Restore,
    Refine,
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    pub instruction: Instruction,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Default)]
struct Session {
    lq: Option<ImageTensor>,
    lq_png: Option<Vec<u8>>,
    spec: Option<DegradationSpec>,
    restored_png: Option<Vec<u8>>,
    log: Vec<Message>,
}

#[derive(Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub lq_image_b64: Option<String>,
    pub restored_image_b64: Option<String>,
    pub messages: Vec<Message>,
    pub checkpoint_id: String,
    pub provider: ProviderKind,
}

#[derive(Deserialize)]
pub struct MessageRequest {
    #[serde(default)]
    pub text: String,
    pub instruction: Instruction,
}

#[derive(Serialize, Deserialize)]
pub struct MessageReply {
    pub reply_text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reply_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { error: msg.into(), note: None, reply_text: None, image_b64: None } }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Transport(_) => StatusCode::BAD_GATEWAY,
            Error::Precondition(_) => StatusCode::PRECONDITION_FAILED,
            Error::InvalidArgument(_) | Error::ShapeMismatch(_) | Error::Image(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Everything a request handler needs; model and providers are shared
/// read-only across sessions.
pub struct AppState {
    model: Arc<RestorationModel>,
    encoder: Arc<dyn TextEncoder>,
    provider: Arc<dyn DescriptionProvider>,
    oracle: OracleProvider,
    cfg: ServiceConfig,
    checkpoint_id: String,
    sessions: std::sync::Mutex<HashMap<Uuid, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(model: RestorationModel, checkpoint_id: String, cfg: ServiceConfig) -> anyhow::Result<Self> {
        let p = &cfg.provider;
        let provider: Arc<dyn DescriptionProvider> = match p.kind {
            ProviderKind::Oracle => Arc::new(OracleProvider { mode: p.oracle_mode, seed: p.oracle_seed }),
            ProviderKind::Remote => {
                let url = p
                    .mllm_endpoint
                    .clone()
                    .ok_or_else(|| anyhow::anyhow!("provider.kind = \"remote\" needs provider.mllm_endpoint"))?;
                Arc::new(RemoteMllmProvider::new(url, p.timeout()))
            }
        };
        let text_cfg = model.config().text;
        let encoder: Arc<dyn TextEncoder> = match &p.encoder_endpoint {
            Some(url) => Arc::new(RemoteTextEncoder::new(url.clone(), text_cfg, p.timeout())),
            None => Arc::new(HashEncoder::new(text_cfg)),
        };
        Ok(Self {
            model: Arc::new(model),
            encoder,
            provider,
            oracle: OracleProvider { mode: p.oracle_mode, seed: p.oracle_seed },
            cfg,
            checkpoint_id,
            sessions: std::sync::Mutex::new(HashMap::new()),
        })
    }

    /// Loads the checkpoint named in the config.
    pub fn from_config(cfg: ServiceConfig) -> anyhow::Result<Self> {
        let path = cfg.checkpoint.clone().ok_or_else(|| anyhow::anyhow!("no checkpoint configured"))?;
        let bytes = std::fs::read(&path)?;
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        Self::new(ckpt.build_model()?, checkpoint_id(&bytes), cfg)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`"));
        let uuid = Uuid::parse_str(id).map_err(|_| not_found())?;
        self.sessions.lock().unwrap_or_else(|p| p.into_inner()).get(&uuid).cloned().ok_or_else(not_found)
    }
}

/// Short content hash identifying a checkpoint file.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/image", post(upload_image))
        .route("/sessions/{id}/messages", post(post_message))
        .with_state(state)
}

async fn healthz(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "checkpoint_id": st.checkpoint_id }))
}

async fn create_session(State(st): State<Arc<AppState>>) -> (StatusCode, Json<serde_json::Value>) {
    let id = Uuid::new_v4();
    st.sessions.lock().unwrap_or_else(|p| p.into_inner()).insert(id, Arc::new(Mutex::new(Session::default())));
    (StatusCode::CREATED, Json(serde_json::json!({ "id": id.to_string() })))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionState>> {
    let session = st.session(&id)?;
    let s = session.lock().await;
    Ok(Json(SessionState {
        id,
        lq_image_b64: s.lq_png.as_deref().map(b64),
        restored_image_b64: s.restored_png.as_deref().map(b64),
        messages: s.log.clone(),
        checkpoint_id: st.checkpoint_id.clone(),
        provider: st.cfg.provider.kind,
    }))
}

async fn upload_image(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<StatusCode> {
    let session = st.session(&id)?;
    let spec = match headers.get(SPEC_HEADER) {
        Some(v) => {
            let spec: DegradationSpec = v
                .to_str()
                .ok()
                .and_then(|s| serde_json::from_str(s).ok())
                .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed {SPEC_HEADER} header")))?;
            spec.validate()?;
            Some(spec)
        }
        None => None,
    };
    let img = ImageTensor::decode_png(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("body is not a PNG image: {e}")))?;
    let mut s = session.lock().await;
    s.lq = Some(img);
    s.lq_png = Some(body.to_vec());
    s.spec = spec;
    s.restored_png = None;
    Ok(StatusCode::NO_CONTENT)
}

/// Outcome of a blocking model/provider call.
struct Exchange {
    reply_text: String,
    image_png: Option<Vec<u8>>,
    note: Option<String>,
}

async fn post_message(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<MessageRequest>,
) -> Response {
    match handle_message(st, id, req).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn handle_message(st: Arc<AppState>, id: String, req: MessageRequest) -> ApiResult<MessageReply> {
    let session = st.session(&id)?;
    let mut s = session.lock().await;
    if req.instruction == Instruction::Refine && req.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "refine needs a non-empty description"));
    }
    if req.instruction != Instruction::None && s.lq.is_none() {
        return Err(ApiError::new(StatusCode::CONFLICT, "upload an image before asking to describe, restore or refine"));
    }

    let exchange = match req.instruction {
        Instruction::None => Ok(Exchange {
            reply_text: "Send a describe, restore or refine instruction to work on the uploaded image.".into(),
            image_png: None,
            note: None,
        }),
        Instruction::Describe | Instruction::Restore => {
            let img = s.lq.clone().expect("checked above");
            let spec = s.spec;
            let prompt = if req.text.trim().is_empty() { DEFAULT_PROMPT.to_string() } else { req.text.clone() };
            let restore = req.instruction == Instruction::Restore;
            let st2 = st.clone();
            blocking(move || automatic(&st2, &img, spec.as_ref(), &prompt, restore)).await?
        }
        Instruction::Refine => {
            let text = match st.cfg.refine_text {
                RefineText::Latest => req.text.clone(),
                RefineText::History => s
                    .log
                    .iter()
                    .filter(|m| m.role == Role::User && !m.text.trim().is_empty())
                    .map(|m| m.text.as_str())
                    .chain(std::iter::once(req.text.as_str()))
                    .collect::<Vec<_>>()
                    .join(" "),
            };
            let img = s.lq.clone().expect("checked above");
            let st2 = st.clone();
            blocking(move || refine(&st2, &img, &text)).await?
        }
    };

    let ts = now_ms();
    s.log.push(Message { role: Role::User, text: req.text.clone(), instruction: req.instruction, timestamp: ts });
    match exchange {
        Ok(ex) => {
            s.log.push(Message {
                role: Role::Assistant,
                text: ex.reply_text.clone(),
                instruction: req.instruction,
                timestamp: ts,
            });
            if let Some(png) = &ex.image_png {
                s.restored_png = Some(png.clone());
            }
            Ok(MessageReply { reply_text: ex.reply_text, image_b64: ex.image_png.as_deref().map(b64) })
        }
        Err(failure) => {
            if let Some(ex) = &failure.fallback {
                s.log.push(Message {
                    role: Role::Assistant,
                    text: ex.reply_text.clone(),
                    instruction: req.instruction,
                    timestamp: ts,
                });
                if let Some(png) = &ex.image_png {
                    s.restored_png = Some(png.clone());
                }
            }
            Err(failure.into_api())
        }
    }
}

/// A provider failure, possibly with the result of the oracle fallback.
struct ProviderFailure {
    error: String,
    fallback: Option<Exchange>,
    note: String,
}

impl ProviderFailure {
    fn into_api(self) -> ApiError {
        let mut e = ApiError::new(StatusCode::BAD_GATEWAY, self.error);
        e.body.note = Some(self.note);
        if let Some(ex) = self.fallback {
            e.body.reply_text = Some(ex.reply_text);
            e.body.image_b64 = ex.image_png.as_deref().map(b64);
        }
        e
    }
}

async fn blocking<F>(f: F) -> ApiResult<Result<Exchange, ProviderFailure>>
where
    F: FnOnce() -> ApiResult<Result<Exchange, ProviderFailure>> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

fn restore_with(st: &AppState, img: &ImageTensor, desc: &DescriptionText) -> ApiResult<Vec<u8>> {
    let t = st.encoder.encode(&desc.text)?;
    let z = st.model.context_with_image(img, &t)?;
    Ok(st.model.restore(img, &z)?.encode_png()?)
}

/// Provider description, optionally followed by restoration through the enhancer.
fn automatic(
    st: &AppState,
    img: &ImageTensor,
    spec: Option<&DegradationSpec>,
    prompt: &str,
    restore: bool,
) -> ApiResult<Result<Exchange, ProviderFailure>> {
    let req = ProviderRequest { image: img, prompt, spec };
    let finish = |desc: DescriptionText, note: Option<String>| -> ApiResult<Exchange> {
        let image_png = if restore { Some(restore_with(st, img, &desc)?) } else { None };
        Ok(Exchange { reply_text: desc.text, image_png, note })
    };
    match st.provider.describe(&req) {
        Ok(desc) => Ok(Ok(finish(desc, None)?)),
        Err(Error::Transport(msg)) => {
            let error = format!("description provider failed: {msg}");
            if st.cfg.provider.fallback != Fallback::Oracle {
                return Ok(Err(ProviderFailure { error, fallback: None, note: "no fallback is configured".into() }));
            }
            match st.oracle.describe(&req) {
                Ok(desc) => {
                    let ex = finish(desc, Some("answered by the oracle fallback".into()))?;
                    let note = ex.note.clone().unwrap_or_default();
                    Ok(Err(ProviderFailure { error, fallback: Some(ex), note }))
                }
                Err(_) => Ok(Err(ProviderFailure {
                    error,
                    fallback: None,
                    note: "oracle fallback unavailable: the upload carried no degradation spec".into(),
                })),
            }
        }
        Err(e) => Err(e.into()),
    }
}

/// User text straight into the context transformer, restoring the original upload.
fn refine(st: &AppState, img: &ImageTensor, text: &str) -> ApiResult<Result<Exchange, ProviderFailure>> {
    let t = st.encoder.encode(text)?;
    let z = st.model.context_from_text(&t)?;
    let png = st.model.restore(img, &z)?.encode_png()?;
    Ok(Ok(Exchange { reply_text: format!("Restored again using: {text}"), image_png: Some(png), note: None }))
}

/// Binds `port` (0 picks a free one) and serves until the task is dropped.
pub async fn serve(state: Arc<AppState>, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
