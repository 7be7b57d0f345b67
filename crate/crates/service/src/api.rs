use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use efumi_core::io::{decode_cube, MAGIC};
use efumi_core::superpixel::DEFAULT_COMPACTNESS;
use efumi_core::{BagSet, EfumiConfig, LabelMask, SuperpixelMap};
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use crate::error::{ApiError, ApiResult};
use crate::jobs::{self, Job, JobKind, JobPool};
use crate::quicklook;
use crate::tasks::{self, Granularity, InfluenceRequest};
use crate::workspace::Workspace;

#[derive(Clone)]
pub struct AppState {
    pub ws: Workspace,
    pub pool: JobPool,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/datasets", post(create_dataset))
        .route("/datasets/{id}", get(dataset_meta))
        .route("/datasets/{id}/meta", get(dataset_meta))
        .route("/datasets/{id}/quicklook", get(quicklook))
        .route("/datasets/{id}/bags", get(get_bags).put(put_bags))
        .route("/datasets/{id}/runs", post(start_run))
        .route("/datasets/{id}/superpixels", get(get_superpixels).post(start_segment))
        .route("/jobs/{id}", get(get_job))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/endmembers", get(get_endmembers))
        .route("/runs/{id}/proportions", get(get_proportions))
        .route("/runs/{id}/target-map", get(get_target_map))
        .route("/runs/{id}/influence", post(start_influence))
        .route("/influence/{id}", get(get_influence))
        .route("/influence/{id}/heatmap", get(get_heatmap))
        .layer(DefaultBodyLimit::disable())
        .layer(CorsLayer::permissive())
        .with_state(state)
}

fn binary(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response()
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

fn accepted(job: &Job) -> Response {
    (StatusCode::ACCEPTED, Json(json!({ "job_id": job.id, "job": job }))).into_response()
}

/// Parses an optional JSON body; an empty body means all defaults.
fn json_body<T: for<'de> Deserialize<'de> + Default>(body: &[u8]) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(e.to_string()))
}

async fn create_dataset(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let cube: efumi_core::Cube = decode_cube(&body)?;
    let violations = cube.validate();
    if !violations.is_empty() {
        return Err(ApiError::Invalid {
            message: format!("cube has {} invalid value(s)", violations.len()),
            violations: violations.iter().map(ToString::to_string).collect(),
        });
    }
    let id = s.ws.create_dataset(&body, &cube)?;
    let meta = s.ws.meta(&id)?;
    Ok((StatusCode::CREATED, Json(json!({ "dataset_id": id, "meta": meta }))).into_response())
}

async fn dataset_meta(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let meta = s.ws.meta(&id)?;
    Ok(Json(json!({
        "dataset_id": id,
        "rows": meta.rows,
        "cols": meta.cols,
        "bands": meta.bands,
        "wavelengths": meta.wavelengths,
        "bags_version": s.ws.current_bags_version(&id)?,
        "has_superpixels": s.ws.latest_superpixels(&id)?.is_some(),
    })))
}

#[derive(Deserialize)]
struct QuicklookQuery {
    bands: Option<String>,
}

async fn quicklook(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<QuicklookQuery>,
) -> ApiResult<Response> {
    let cube = s.ws.cube(&id)?;
    let bands = quicklook::parse_bands(q.bands.as_deref(), cube.bands())?;
    let png = tokio::task::spawn_blocking(move || quicklook::render_png(&cube, bands))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_bags(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let meta = s.ws.meta(&id)?;
    let version = s
        .ws
        .current_bags_version(&id)?
        .ok_or_else(|| ApiError::NotFound(format!("dataset {id} has no bags")))?;
    let bags = s.ws.bags(&id, &version, meta.rows * meta.cols)?;
    Ok(json_bytes(bags.to_json().map_err(|e| ApiError::Internal(e.to_string()))?.into_bytes()))
}

/// Accepts a label mask container or bag JSON.
/// The new version is visible in the dataset metadata.
async fn put_bags(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<StatusCode> {
    let meta = s.ws.meta(&id)?;
    let n = meta.rows * meta.cols;
    let bags = if body.starts_with(MAGIC) {
        let mask = LabelMask::decode(&body)?;
        if (mask.rows, mask.cols) != (meta.rows, meta.cols) {
            return Err(ApiError::invalid(format!(
                "mask is {}x{}, dataset is {}x{}",
                mask.rows, mask.cols, meta.rows, meta.cols
            )));
        }
        mask.to_bags()?
    } else {
        let text = std::str::from_utf8(&body).map_err(|_| ApiError::BadRequest("bags must be a mask or JSON".into()))?;
        BagSet::from_json(text, n)?
    };
    s.ws.put_bags(&id, &bags)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn start_run(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let meta = s.ws.meta(&id)?;
    let config: EfumiConfig = json_body(&body)?;
    config.validate()?;
    let version = s
        .ws
        .current_bags_version(&id)?
        .ok_or_else(|| ApiError::Conflict(format!("dataset {id} has no bags yet")))?;
    s.ws.bags(&id, &version, meta.rows * meta.cols)?.check_trainable()?;
    let ws = s.ws.clone();
    let job = s
        .pool
        .submit(JobKind::Run, move |p| tasks::run(&ws, &id, &version, &config, p))?;
    Ok(accepted(&job))
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SegmentRequest {
    target_segments: Option<usize>,
    compactness: Option<f64>,
}

fn check_segment_args(n_pixels: usize, target_segments: usize, compactness: f64) -> ApiResult<()> {
    if target_segments == 0 || target_segments > n_pixels {
        return Err(ApiError::invalid(format!("target_segments must lie in 1..={n_pixels}")));
    }
    if !(compactness >= 0.0 && compactness.is_finite()) {
        return Err(ApiError::invalid("compactness must be non-negative"));
    }
    Ok(())
}

async fn start_segment(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let meta = s.ws.meta(&id)?;
    let req: SegmentRequest = json_body(&body)?;
    let target = req
        .target_segments
        .ok_or_else(|| ApiError::BadRequest("target_segments is required".into()))?;
    let compactness = req.compactness.unwrap_or(DEFAULT_COMPACTNESS);
    check_segment_args(meta.rows * meta.cols, target, compactness)?;
    let ws = s.ws.clone();
    let job = s
        .pool
        .submit(JobKind::Segment, move |p| tasks::superpixels(&ws, &id, target, compactness, p))?;
    Ok(accepted(&job))
}

async fn get_superpixels(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = s
        .ws
        .latest_superpixels(&id)?
        .ok_or_else(|| ApiError::NotFound(format!("dataset {id} has no superpixel map")))?;
    Ok(binary(bytes))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    Ok(Json(jobs::load(&s.ws, &id)?))
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.ws.run_record(&id)?).into_response())
}

async fn get_endmembers(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let record = s.ws.run_record(&id)?;
    let meta = s.ws.meta(&record.dataset_id)?;
    Ok(Json(json!({
        "target": record.endmembers[0],
        "background": record.endmembers[1..],
        "wavelengths": meta.wavelengths,
    })))
}

async fn get_proportions(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(binary(s.ws.proportions_cube(&id)?))
}

async fn get_target_map(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(binary(s.ws.target_map(&id)?))
}

async fn start_influence(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let record = s.ws.run_record(&id)?;
    let meta = s.ws.meta(&record.dataset_id)?;
    let req: InfluenceRequest = json_body(&body)?;
    if req.top_k == Some(0) {
        return Err(ApiError::invalid("top_k must be positive"));
    }
    // Resolve the superpixel map now so a missing one is reported up front.
    let map = match (req.granularity, req.target_segments) {
        (Granularity::Pixel, _) => None,
        (Granularity::Superpixel, Some(t)) => {
            check_segment_args(meta.rows * meta.cols, t, req.compactness.unwrap_or(DEFAULT_COMPACTNESS))?;
            None
        }
        (Granularity::Superpixel, None) => {
            let bytes = s.ws.latest_superpixels(&record.dataset_id)?.ok_or_else(|| {
                ApiError::Conflict("no superpixel map: segment the dataset or pass target_segments".into())
            })?;
            Some(SuperpixelMap::decode(&bytes).map_err(|e| ApiError::Internal(e.to_string()))?)
        }
    };
    let ws = s.ws.clone();
    let job = s
        .pool
        .submit(JobKind::Influence, move |p| tasks::influence(&ws, &id, &req, map, p))?;
    Ok(accepted(&job))
}

async fn get_influence(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(json_bytes(s.ws.read_influence(&id, "records.json")?))
}

async fn get_heatmap(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(binary(s.ws.read_influence(&id, "heatmap.hsic")?))
}
