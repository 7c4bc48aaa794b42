//! HTTP API. Request and response bodies are JSON; images travel as base64
//! PNG (or TXF1 for textures). Every error is `{code, message,
//! missing_prerequisite?}` with status 404, 409, 422 or 500.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/projects` | `{id, config?}` (config is TOML text) | 201 project |
//! | GET | `/projects` | | ids |
//! | GET | `/projects/{id}` | | project |
//! | POST | `/projects/{id}/images` | `{id, data}` | 201 image entry |
//! | GET | `/projects/{id}/images/{image}/{kind}` | | PNG; kind is texture, scores, mask or labels |
//! | POST | `/projects/{id}/stages/{stage}` | `{seed?, image?, labels?, mask?, name?}` | 202 job |
//! | POST | `/projects/{id}/edit` | `{image, labels, mask, steps?, seed?}` | 202 job |
//! | POST | `/projects/{id}/synthesize` | `{height, width, labels?, tileable?, seed?, name?}` | 202 job |
//! | GET | `/jobs/{id}` | | job |
//!
//! Stages are `detect`, `segment`, `invert` (needs `image`) and `transfer`
//! (needs `image` and `labels`).

use std::net::SocketAddr;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use texsynth::grid::{decode_label_png, decode_png8};
use texsynth::{BinaryMask, LabelMap};

use crate::jobs::JobSpec;
use crate::project::{decode_image, ArtifactKind};
use crate::{Studio, StudioError};

type ApiResult<T> = Result<T, StudioError>;

impl IntoResponse for StudioError {
    fn into_response(self) -> Response {
        let status = match &self {
            StudioError::NotFound { .. } => StatusCode::NOT_FOUND,
            StudioError::Conflict(_) | StudioError::MissingPrerequisite { .. } => {
                StatusCode::CONFLICT
            }
            StudioError::Invalid(_) | StudioError::Config(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StudioError::Io { .. } | StudioError::Corrupt(_) | StudioError::Pipeline(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        (status, Json(self.body())).into_response()
    }
}

pub fn router(studio: Studio) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/images", post(add_image))
        .route("/projects/{id}/images/{image}/{kind}", get(artifact))
        .route("/projects/{id}/stages/{stage}", post(run_stage))
        .route("/projects/{id}/edit", post(edit))
        .route("/projects/{id}/synthesize", post(synthesize))
        .route("/jobs/{id}", get(get_job))
        .fallback(|| async { StudioError::not_found("route", "") })
        .with_state(studio)
}

/// Serves until Ctrl-C.
pub async fn serve(studio: Studio, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(studio))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Empty bodies parse as `{}`; malformed JSON is a 422.
fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let text: &[u8] = if body.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        body
    };
    serde_json::from_slice(text).map_err(|e| StudioError::Invalid(format!("request body: {e}")))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| StudioError::Corrupt(format!("request task failed: {e}")))?
}

fn b64(field: &str, text: &str) -> ApiResult<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(text.trim())
        .map_err(|e| StudioError::Invalid(format!("{field}: not base64: {e}")))
}

fn decode_labels(studio: &Studio, project: &str, text: &str) -> ApiResult<LabelMap> {
    let labels = decode_label_png(&b64("labels", text)?)
        .map_err(|e| StudioError::Invalid(format!("labels: {e}")))?;
    let classes = studio.with_project(project, |p| Ok(p.config().segment.classes as u8))?;
    if labels.num_classes() > classes {
        return Err(StudioError::Invalid(format!(
            "labels use class {} but the project has {classes} classes",
            labels.num_classes()
        )));
    }
    Ok(labels.with_num_classes(classes)?)
}

fn decode_mask(text: &str) -> ApiResult<BinaryMask> {
    let g =
        decode_png8(&b64("mask", text)?).map_err(|e| StudioError::Invalid(format!("mask: {e}")))?;
    Ok(BinaryMask::from_grid_above(&g.channel(0), 0.5))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateProject {
    id: String,
    #[serde(default)]
    config: Option<String>,
}

async fn create_project(State(studio): State<Studio>, body: Bytes) -> ApiResult<Response> {
    let req: CreateProject = parse(&body)?;
    let view = blocking(move || studio.create_project(&req.id, req.config.as_deref())).await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn list_projects(State(studio): State<Studio>) -> Json<Vec<String>> {
    Json(studio.project_ids())
}

async fn get_project(State(studio): State<Studio>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(studio.project(&id)?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AddImage {
    id: String,
    /// Base64 PNG or TXF1.
    data: String,
}

async fn add_image(
    State(studio): State<Studio>,
    Path(project): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: AddImage = parse(&body)?;
    let entry = blocking(move || {
        let grid = decode_image(&b64("data", &req.data)?).map_err(|e| match e {
            StudioError::Pipeline(e) => StudioError::Invalid(format!("data: {e}")),
            other => other,
        })?;
        studio.add_image(&project, &req.id, &grid)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(entry)).into_response())
}

async fn artifact(
    State(studio): State<Studio>,
    Path((project, image, kind)): Path<(String, String, String)>,
) -> ApiResult<Response> {
    let kind: ArtifactKind = kind.parse()?;
    let png = blocking(move || studio.artifact_png(&project, &image, kind)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn accepted(job: crate::Job) -> Response {
    (StatusCode::ACCEPTED, Json(job)).into_response()
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct StageBody {
    seed: Option<u64>,
    image: Option<String>,
    labels: Option<String>,
    mask: Option<String>,
    name: Option<String>,
}

async fn run_stage(
    State(studio): State<Studio>,
    Path((project, stage)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: StageBody = parse(&body)?;
    let need_image = || {
        req.image
            .clone()
            .ok_or_else(|| StudioError::Invalid(format!("{stage} needs an image")))
    };
    let spec = match stage.as_str() {
        "detect" => JobSpec::Detect,
        "segment" => JobSpec::Segment,
        "invert" => JobSpec::Invert {
            image: need_image()?,
        },
        "transfer" => {
            let labels = req
                .labels
                .as_deref()
                .ok_or_else(|| StudioError::Invalid("transfer needs labels".into()))?;
            JobSpec::Transfer {
                image: need_image()?,
                labels: decode_labels(&studio, &project, labels)?,
                mask: req.mask.as_deref().map(decode_mask).transpose()?,
                name: req.name.clone(),
            }
        }
        other => return Err(StudioError::not_found("stage", other)),
    };
    Ok(accepted(studio.submit(&project, spec, req.seed)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    image: String,
    labels: String,
    mask: String,
    steps: Option<usize>,
    seed: Option<u64>,
}

async fn edit(
    State(studio): State<Studio>,
    Path(project): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: EditBody = parse(&body)?;
    let spec = JobSpec::Edit {
        labels: decode_labels(&studio, &project, &req.labels)?,
        mask: decode_mask(&req.mask)?,
        image: req.image,
        steps: req.steps,
    };
    Ok(accepted(studio.submit(&project, spec, req.seed)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthBody {
    height: usize,
    width: usize,
    labels: Option<String>,
    #[serde(default)]
    tileable: bool,
    seed: Option<u64>,
    name: Option<String>,
}

async fn synthesize(
    State(studio): State<Studio>,
    Path(project): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: SynthBody = parse(&body)?;
    let spec = JobSpec::Synth {
        height: req.height,
        width: req.width,
        labels: req
            .labels
            .as_deref()
            .map(|l| decode_labels(&studio, &project, l))
            .transpose()?,
        tileable: req.tileable,
        name: req.name,
    };
    Ok(accepted(studio.submit(&project, spec, req.seed)?))
}

async fn get_job(State(studio): State<Studio>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(studio.job(&id)?).into_response())
}
