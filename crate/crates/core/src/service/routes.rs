use axum::extract::multipart::{Multipart, MultipartError, MultipartRejection};
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequestParts, Path, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::auth::{new_token, token_digest, verify_password};
use super::store::{DetectionSummary, DiagnosisResult, UploadRecord, UploadStatus};
use super::{AppState, ServiceError};
use crate::data::Label;
use crate::types::Image;

/// Multipart framing allowance on top of the file size limit.
const FORM_OVERHEAD: usize = 64 * 1024;
const MAX_PATIENT_ID_LEN: usize = 128;

pub fn router(state: AppState) -> Router {
    let limit = state.0.config.max_upload_bytes + FORM_OVERHEAD;
    Router::new()
        .route("/api/login", post(login))
        .route("/api/scans", post(upload))
        .route("/api/scans/{upload_id}", axum::routing::delete(delete_scan))
        .route("/api/scans/{upload_id}/result", get(scan_result))
        .route("/api/patients/{patient_id}/results", get(patient_results))
        .route("/api/artifacts/{*name}", get(artifact))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    code: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            field: None,
        }
    }

    fn field(mut self, field: &'static str) -> Self {
        self.field = Some(field);
        self
    }

    fn unauthorized() -> Self {
        Self::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing, invalid or expired token",
        )
    }

    fn not_found(what: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("{what} not found"),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut res = (self.status, Json(&self)).into_response();
        if self.status == StatusCode::UNAUTHORIZED {
            res.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        }
        res
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        tracing::error!("request failed: {e}");
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            "internal server error",
        )
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// The authenticated user behind a bearer token.
pub struct AuthUser(#[allow(dead_code)] pub String);

impl FromRequestParts<AppState> for AuthUser {
    type Rejection = ApiError;

    async fn from_request_parts(
        parts: &mut Parts,
        state: &AppState,
    ) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or_else(ApiError::unauthorized)?;
        let inner = &state.0;
        let digest = token_digest(&inner.token_secret, token);
        match inner.store.token_user(&digest, inner.clock.now())? {
            Some(user) => Ok(AuthUser(user)),
            None => Err(ApiError::unauthorized()),
        }
    }
}

#[derive(Deserialize)]
struct LoginRequest {
    username: String,
    password: String,
}

#[derive(Serialize)]
struct LoginResponse {
    token: String,
    token_type: &'static str,
    expires_at: DateTime<Utc>,
}

async fn login(
    State(state): State<AppState>,
    body: Result<Json<LoginRequest>, JsonRejection>,
) -> ApiResult<Json<LoginResponse>> {
    let Json(req) =
        body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    let inner = state.0.clone();
    let username = req.username.clone();
    // Argon2 is deliberately slow; keep it off the async workers.
    let ok = tokio::task::spawn_blocking(move || -> Result<bool, ServiceError> {
        Ok(match inner.store.password_digest(&req.username)? {
            Some(digest) => verify_password(&req.password, &digest),
            None => false,
        })
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    if !ok {
        return Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "bad_credentials",
            "invalid username or password",
        ));
    }
    let inner = &state.0;
    let now = inner.clock.now();
    inner.store.purge_expired_tokens(now)?;
    let token = new_token();
    let expires_at =
        now + Duration::seconds(inner.config.token_ttl_secs.min(i64::MAX as u64 / 1000) as i64);
    inner.store.insert_token(
        &token_digest(&inner.token_secret, &token),
        &username,
        expires_at,
    )?;
    Ok(Json(LoginResponse {
        token,
        token_type: "Bearer",
        expires_at,
    }))
}

#[derive(Serialize)]
struct UploadBody {
    upload_id: String,
    patient_id: String,
    status: UploadStatus,
    created_at: DateTime<Utc>,
}

impl From<&UploadRecord> for UploadBody {
    fn from(r: &UploadRecord) -> Self {
        Self {
            upload_id: r.upload_id.clone(),
            patient_id: r.patient_id.clone(),
            status: r.status,
            created_at: r.created_at,
        }
    }
}

fn sniff_extension(bytes: &[u8]) -> Option<&'static str> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some("png")
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        Some("jpg")
    } else {
        None
    }
}

fn multipart_error(e: MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        too_large()
    } else {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

fn too_large() -> ApiError {
    ApiError::new(
        StatusCode::PAYLOAD_TOO_LARGE,
        "payload_too_large",
        "upload exceeds the size limit",
    )
    .field("file")
}

fn valid_patient_id(pid: &str) -> bool {
    !pid.is_empty() && pid.len() <= MAX_PATIENT_ID_LEN && !pid.chars().any(char::is_control)
}

async fn upload(
    _user: AuthUser,
    State(state): State<AppState>,
    form: Result<Multipart, MultipartRejection>,
) -> ApiResult<(StatusCode, Json<UploadBody>)> {
    let mut form = form.map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            format!("expected multipart/form-data: {}", e.body_text()),
        )
    })?;
    let inner = &state.0;
    let mut file: Option<Vec<u8>> = None;
    let mut patient_id: Option<String> = None;
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        match field.name() {
            Some("file") => {
                let bytes = field.bytes().await.map_err(multipart_error)?;
                if bytes.len() > inner.config.max_upload_bytes {
                    return Err(too_large());
                }
                file = Some(bytes.to_vec());
            }
            Some("patient_id") => {
                patient_id = Some(
                    field
                        .text()
                        .await
                        .map_err(multipart_error)?
                        .trim()
                        .to_string(),
                );
            }
            _ => {}
        }
    }
    let file = file.ok_or_else(|| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "missing_field",
            "missing required field 'file'",
        )
        .field("file")
    })?;
    let patient_id = match patient_id {
        Some(p) if valid_patient_id(&p) => p,
        Some(_) => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_field",
                format!("field 'patient_id' must be 1-{MAX_PATIENT_ID_LEN} printable characters"),
            )
            .field("patient_id"))
        }
        None => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "missing_field",
                "missing required field 'patient_id'",
            )
            .field("patient_id"))
        }
    };
    let unsupported = |detail: &str| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "unsupported_media",
            format!("unsupported media: {detail}"),
        )
        .field("file")
    };
    let ext = sniff_extension(&file).ok_or_else(|| unsupported("expected a PNG or JPEG image"))?;
    Image::decode(&file).map_err(|e| unsupported(&e.to_string()))?;

    let upload_id = uuid::Uuid::new_v4().simple().to_string();
    let stored_path = inner.artifacts_dir.join(format!("{upload_id}_input.{ext}"));
    tokio::fs::write(&stored_path, &file)
        .await
        .map_err(ServiceError::Io)?;
    let rec = UploadRecord {
        upload_id: upload_id.clone(),
        patient_id,
        stored_path,
        status: UploadStatus::Received,
        reason: None,
        created_at: inner.clock.now(),
    };
    if let Err(e) = inner.store.insert_upload(&rec) {
        let _ = std::fs::remove_file(&rec.stored_path);
        return Err(e.into());
    }
    inner.enqueue(upload_id)?;
    Ok((StatusCode::ACCEPTED, Json(UploadBody::from(&rec))))
}

#[derive(Serialize)]
struct ResultBody {
    upload_id: String,
    patient_id: String,
    status: UploadStatus,
    label: Label,
    confidence: f64,
    overlay_ref: String,
    overlay_url: String,
    image_url: String,
    detections: Vec<DetectionSummary>,
    created_at: DateTime<Utc>,
}

fn artifact_url(name: &str) -> String {
    format!("/api/artifacts/{name}")
}

impl From<DiagnosisResult> for ResultBody {
    fn from(r: DiagnosisResult) -> Self {
        Self {
            overlay_url: artifact_url(&r.overlay_name),
            image_url: artifact_url(&r.image_name),
            upload_id: r.upload_id,
            patient_id: r.patient_id,
            status: UploadStatus::Done,
            label: r.label,
            confidence: r.confidence,
            overlay_ref: r.overlay_name,
            detections: r.detections,
            created_at: r.created_at,
        }
    }
}

async fn scan_result(
    _user: AuthUser,
    State(state): State<AppState>,
    Path(upload_id): Path<String>,
) -> ApiResult<Response> {
    let inner = &state.0;
    let rec = inner
        .store
        .upload(&upload_id)?
        .ok_or_else(|| ApiError::not_found("upload"))?;
    Ok(match rec.status {
        UploadStatus::Received | UploadStatus::Processing => {
            (StatusCode::ACCEPTED, Json(UploadBody::from(&rec))).into_response()
        }
        UploadStatus::Failed => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({
                "code": "inference_failed",
                "message": rec.reason.unwrap_or_else(|| "unknown failure".into()),
                "upload_id": rec.upload_id,
                "patient_id": rec.patient_id,
                "status": UploadStatus::Failed,
            })),
        )
            .into_response(),
        UploadStatus::Done => {
            let result = inner
                .store
                .result(&upload_id)?
                .ok_or_else(|| ApiError::not_found("result"))?;
            Json(ResultBody::from(result)).into_response()
        }
    })
}

async fn patient_results(
    _user: AuthUser,
    State(state): State<AppState>,
    Path(patient_id): Path<String>,
) -> ApiResult<Json<Vec<ResultBody>>> {
    let results = state.0.store.patient_results(&patient_id)?;
    Ok(Json(results.into_iter().map(ResultBody::from).collect()))
}

async fn delete_scan(
    _user: AuthUser,
    State(state): State<AppState>,
    Path(upload_id): Path<String>,
) -> ApiResult<StatusCode> {
    let inner = &state.0;
    let (rec, result) = inner
        .store
        .delete_upload(&upload_id)?
        .ok_or_else(|| ApiError::not_found("upload"))?;
    let _ = tokio::fs::remove_file(&rec.stored_path).await;
    if let Some(result) = result {
        let _ = tokio::fs::remove_file(inner.artifacts_dir.join(result.overlay_name)).await;
    }
    Ok(StatusCode::NO_CONTENT)
}

/// A bare file name: no separators, no dot segments, no odd characters.
fn is_plain_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 255
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
}

async fn artifact(
    _user: AuthUser,
    State(state): State<AppState>,
    Path(name): Path<String>,
) -> ApiResult<Response> {
    if !is_plain_name(&name) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_name",
            "artifact name must be a plain file name",
        ));
    }
    let inner = &state.0;
    if !inner.store.artifact_exists(&name)? {
        return Err(ApiError::not_found("artifact"));
    }
    let path = inner.artifacts_dir.join(&name);
    let resolved = match path.canonicalize() {
        Ok(p) => p,
        Err(_) => return Err(ApiError::not_found("artifact")),
    };
    if !resolved.starts_with(&inner.artifacts_dir) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_name",
            "artifact is outside the storage root",
        ));
    }
    let bytes = tokio::fs::read(&resolved)
        .await
        .map_err(|_| ApiError::not_found("artifact"))?;
    let content_type = match sniff_extension(&bytes) {
        Some("png") => "image/png",
        Some(_) => "image/jpeg",
        None => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}
