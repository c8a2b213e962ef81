//! REST routes under `/api/v1`. Every error body is `{code, message}`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    GroupByRequest, ResultsQuery, RunConfig, SegmentOp, ServiceError, TaskService, TaskSpec,
};
use crate::conllu::to_conllu;
use crate::segment::SegmentId;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError(
            status,
            ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        )
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::TemplateInvalid(_) | ServiceError::BadRequest(_) => {
                StatusCode::BAD_REQUEST
            }
            ServiceError::ParseMismatch(_) | ServiceError::SegmentEdit(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ServiceError::ParseProviderUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::UnknownTask(_)
            | ServiceError::UnknownRun(_)
            | ServiceError::UnknownCounterfactual(_) => StatusCode::NOT_FOUND,
            ServiceError::RunInProgress(_) | ServiceError::RunNotReady(_) => StatusCode::CONFLICT,
            ServiceError::GatewayUnavailable(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Empty bodies fall back to `T::default()` when one is given.
fn body<T: DeserializeOwned>(bytes: &Bytes, empty: Option<T>) -> ApiResult<T> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        if let Some(v) = empty {
            return Ok(v);
        }
    }
    serde_json::from_slice(bytes)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", e.to_string()))
}

type Svc = State<Arc<TaskService>>;

async fn create_task(State(svc): Svc, bytes: Bytes) -> ApiResult<impl IntoResponse> {
    let spec: TaskSpec = body(&bytes, None)?;
    Ok((StatusCode::CREATED, Json(svc.create_task(spec).await?)))
}

async fn get_task(
    State(svc): Svc,
    id: Result<Path<String>, PathRejection>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.get_task(&id?.0)?))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SegmentPatch {
    Many { ops: Vec<SegmentOp> },
    One(SegmentOp),
}

async fn edit_segments(
    State(svc): Svc,
    id: Result<Path<String>, PathRejection>,
    bytes: Bytes,
) -> ApiResult<impl IntoResponse> {
    let ops = match body::<SegmentPatch>(&bytes, None)? {
        SegmentPatch::Many { ops } => ops,
        SegmentPatch::One(op) => vec![op],
    };
    Ok(Json(svc.edit_segments(&id?.0, &ops).await?))
}

async fn suggest(
    State(svc): Svc,
    path: Result<Path<(String, SegmentId)>, PathRejection>,
) -> ApiResult<impl IntoResponse> {
    let Path((id, sid)) = path?;
    Ok(Json(svc.suggest(&id, sid).await?))
}

async fn start_run(
    State(svc): Svc,
    id: Result<Path<String>, PathRejection>,
    bytes: Bytes,
) -> ApiResult<impl IntoResponse> {
    let cfg: RunConfig = body(&bytes, Some(RunConfig::default()))?;
    Ok((
        StatusCode::ACCEPTED,
        Json(svc.start_run(&id?.0, cfg).await?),
    ))
}

async fn get_run(
    State(svc): Svc,
    id: Result<Path<String>, PathRejection>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.get_run(&id?.0)?))
}

async fn results(
    State(svc): Svc,
    id: Result<Path<String>, PathRejection>,
    query: Result<Query<ResultsQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.results(&id?.0, &query?.0)?))
}

async fn group_by(
    State(svc): Svc,
    id: Result<Path<String>, PathRejection>,
    bytes: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: GroupByRequest = body(&bytes, None)?;
    Ok(Json(svc.group_by(&id?.0, &req)?))
}

async fn cf_text(
    State(svc): Svc,
    path: Result<Path<(String, usize)>, PathRejection>,
) -> ApiResult<impl IntoResponse> {
    let Path((id, cf)) = path?;
    Ok(Json(svc.cf_text(&id, cf)?))
}

#[derive(Deserialize)]
struct ParseRequest {
    text: String,
}

async fn parse(State(svc): Svc, bytes: Bytes) -> ApiResult<impl IntoResponse> {
    let req: ParseRequest = body(&bytes, None)?;
    let parses = svc.parse_text(&req.text).await?;
    Ok(Json(serde_json::json!({ "conllu": to_conllu(&parses) })))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such route")
}

pub fn router(svc: Arc<TaskService>) -> Router {
    let api = Router::new()
        .route("/tasks", post(create_task))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/segments", patch(edit_segments))
        .route("/tasks/{id}/segments/{sid}/suggest", post(suggest))
        .route("/tasks/{id}/runs", post(start_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/results", get(results))
        .route("/runs/{id}/groupby", post(group_by))
        .route("/runs/{id}/cf/{cf_id}/text", get(cf_text))
        .route("/parse", post(parse))
        .with_state(svc);
    Router::new().nest("/api/v1", api).fallback(not_found)
}

/// Serves the API until the process stops.
pub async fn serve(
    listener: tokio::net::TcpListener,
    svc: Arc<TaskService>,
) -> std::io::Result<()> {
    axum::serve(listener, router(svc)).await
}
