//! HTTP review API over a loaded prescreen/infer run.

pub mod store;
pub mod survey;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, SecondsFormat, Utc};
use herdcount_core::geo::write_annotations;
use herdcount_core::raster::extract_patch;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CliError;
use store::{Decision, NewDecision, Store, Verdict};
use survey::{LocalPoint, PatchInfo, Survey};

pub struct AppState {
    pub survey: Survey,
    pub store: Store,
    pub token: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/patches", get(list_patches))
        .route("/api/patches/{id}/image", get(patch_image))
        .route("/api/patches/{id}/detections", get(patch_detections))
        .route("/api/patches/{id}/review", post(review))
        .route("/api/patches/{id}/decisions", get(patch_decisions))
        .route("/api/audit", get(audit))
        .route("/api/summary", get(summary))
        .route("/api/export/annotations", get(export_annotations))
        .route("/api/export/hnp-candidates", get(export_hnps))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.0,
            Json(json!({ "error": { "status": self.0.as_u16(), "message": self.1 } })),
        )
            .into_response()
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        tracing::error!("{e}");
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn auth(State(state): State<Arc<AppState>>, headers: HeaderMap, req: Request, next: Next) -> Response {
    let ok = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| constant_time_eq(t.as_bytes(), state.token.as_bytes()));
    if ok {
        next.run(req).await
    } else {
        ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()).into_response()
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn find<'a>(state: &'a AppState, id: &str) -> ApiResult<&'a PatchInfo> {
    state
        .survey
        .patch(id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown patch `{id}`")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ListQuery {
    status: Option<String>,
    sort: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

#[derive(Debug, Serialize)]
struct QueueItem<'a> {
    patch_id: &'a str,
    image_id: &'a str,
    origin: (u32, u32),
    probability: f64,
    detection_count: usize,
    status: &'static str,
    verdict: Option<Verdict>,
}

const MAX_PAGE_SIZE: usize = 500;

async fn list_patches(
    State(state): State<Arc<AppState>>,
    Query(q): Query<ListQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let bad = |m: String| ApiError(StatusCode::BAD_REQUEST, m);
    let status = q.status.as_deref().unwrap_or("pending");
    if !matches!(status, "pending" | "decided" | "all") {
        return Err(bad(format!("status must be pending, decided or all, not `{status}`")));
    }
    let sort = q.sort.as_deref().unwrap_or("probability");
    if !matches!(sort, "probability" | "patch_id") {
        return Err(bad(format!("sort must be probability or patch_id, not `{sort}`")));
    }
    let page = q.page.unwrap_or(1);
    let page_size = q.page_size.unwrap_or(50);
    if page == 0 || page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(bad(format!("page starts at 1 and page_size is 1..={MAX_PAGE_SIZE}")));
    }
    let active: std::collections::BTreeMap<String, Verdict> = state
        .store
        .active()?
        .into_iter()
        .map(|d| (d.patch_id, d.verdict))
        .collect();
    let mut items: Vec<QueueItem<'_>> = state
        .survey
        .queue
        .iter()
        .filter_map(|id| {
            let p = state.survey.patch(id)?;
            let verdict = active.get(id).copied();
            let keep = match status {
                "pending" => verdict.is_none(),
                "decided" => verdict.is_some(),
                _ => true,
            };
            keep.then(|| QueueItem {
                patch_id: &p.patch_id,
                image_id: &p.image_id,
                origin: p.origin,
                probability: p.probability.unwrap_or(0.0),
                detection_count: state.survey.patch_detections(p).len(),
                status: if verdict.is_some() { "decided" } else { "pending" },
                verdict,
            })
        })
        .collect();
    if sort == "patch_id" {
        items.sort_by(|a, b| a.patch_id.cmp(b.patch_id));
    }
    let total = items.len();
    let page_items: Vec<_> = items.into_iter().skip((page - 1) * page_size).take(page_size).collect();
    Ok(Json(json!({
        "items": page_items,
        "total": total,
        "page": page,
        "page_size": page_size,
    })))
}

async fn patch_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let p = find(&state, &id)?;
    let image = state.survey.data.load(&p.image_id)?;
    let patch = extract_patch(&image, p.origin, state.survey.tiling.patch_size);
    let mut png = Vec::new();
    patch
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| ApiError::from(CliError::Image(e)))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn patch_detections(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let p = find(&state, &id)?;
    let dets: Vec<_> = state
        .survey
        .patch_detections(p)
        .into_iter()
        .map(|d| json!({ "x": d.x, "y": d.y, "confidence": d.confidence }))
        .collect();
    Ok(Json(json!({
        "patch_id": p.patch_id,
        "image_id": p.image_id,
        "origin": p.origin,
        "width": p.extent.width,
        "height": p.extent.height,
        "flagged": p.flagged(),
        "probability": p.probability,
        "decision": state.store.active_for(&id)?,
        "detections": dets,
    })))
}

/// Request body of a review decision.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewBody {
    #[serde(default)]
    patch_id: Option<String>,
    reviewer: String,
    verdict: Verdict,
    #[serde(default)]
    corrected_points: Option<Vec<LocalPoint>>,
    #[serde(default)]
    timestamp: Option<DateTime<Utc>>,
}

fn unprocessable(m: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, m.into())
}

async fn review(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let p = find(&state, &id)?;
    let body: ReviewBody =
        serde_json::from_slice(&body).map_err(|e| unprocessable(format!("malformed decision: {e}")))?;
    if body.patch_id.as_deref().is_some_and(|b| b != id) {
        return Err(unprocessable("body patch_id does not match the path"));
    }
    if body.reviewer.trim().is_empty() {
        return Err(unprocessable("reviewer must not be empty"));
    }
    match (body.verdict, &body.corrected_points) {
        (Verdict::Corrected, None) => return Err(unprocessable("a corrected verdict needs corrected_points")),
        (Verdict::Accept | Verdict::Reject, Some(_)) => {
            return Err(unprocessable(
                "corrected_points are only allowed with the corrected verdict",
            ))
        }
        (_, Some(points)) => state.survey.validate_points(p, points).map_err(unprocessable)?,
        _ => {}
    }
    let manual_override = !p.flagged();
    if manual_override {
        tracing::warn!("decision on unflagged patch {id} by {}", body.reviewer);
    }
    let stored: Decision = state.store.record(&NewDecision {
        patch_id: id,
        reviewer: body.reviewer,
        verdict: body.verdict,
        corrected_points: body.corrected_points,
        timestamp: body
            .timestamp
            .unwrap_or_else(Utc::now)
            .to_rfc3339_opts(SecondsFormat::Millis, true),
        manual_override,
    })?;
    Ok((StatusCode::CREATED, Json(stored)).into_response())
}

async fn patch_decisions(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<Decision>>> {
    find(&state, &id)?;
    Ok(Json(state.store.history(&id)?))
}

async fn audit(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<Decision>>> {
    Ok(Json(state.store.all()?))
}

async fn summary(State(state): State<Arc<AppState>>) -> ApiResult<Json<survey::SurveySummary>> {
    Ok(Json(state.survey.summary(&state.store.active()?)))
}

async fn export_annotations(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let points = state.survey.export_annotations(&state.store.active()?);
    let mut csv = Vec::new();
    write_annotations(&mut csv, &points).map_err(|e| ApiError::from(CliError::Core(e)))?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

async fn export_hnps(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<herdcount_core::geo::PatchRecord>>> {
    Ok(Json(state.survey.hnp_candidates(&state.store.active()?)?))
}
