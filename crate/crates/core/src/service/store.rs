//! SQLite persistence for accounts, tokens, uploads and results.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use super::ServiceError;
use crate::data::{Label, PatientIdMap, PatientTagged, Rle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UploadStatus {
    Received,
    Processing,
    Done,
    Failed,
}

impl UploadStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            UploadStatus::Received => "received",
            UploadStatus::Processing => "processing",
            UploadStatus::Done => "done",
            UploadStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "received" => UploadStatus::Received,
            "processing" => UploadStatus::Processing,
            "done" => UploadStatus::Done,
            "failed" => UploadStatus::Failed,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UploadRecord {
    pub upload_id: String,
    pub patient_id: String,
    pub stored_path: PathBuf,
    pub status: UploadStatus,
    /// Failure reason, when failed.
    pub reason: Option<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class_label: String,
    pub score: f64,
    pub mask_area: usize,
    pub mask_rle: Rle,
}

/// A finished diagnosis for one upload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub upload_id: String,
    pub patient_id: String,
    pub label: Label,
    pub confidence: f64,
    pub overlay_name: String,
    pub image_name: String,
    pub detections: Vec<DetectionSummary>,
    pub created_at: DateTime<Utc>,
}

impl PatientTagged for DiagnosisResult {
    fn set_patient_id(&mut self, patient_id: String) {
        self.patient_id = patient_id;
    }
}

fn ts(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, true)
}

fn parse_ts(s: &str) -> rusqlite::Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| {
            rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e))
        })
}

fn bad_column(msg: String) -> rusqlite::Error {
    rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, msg.into())
}

pub struct Store {
    conn: Mutex<Connection>,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS users (
    username TEXT PRIMARY KEY,
    password_digest TEXT NOT NULL,
    role TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS tokens (
    token_digest TEXT PRIMARY KEY,
    username TEXT NOT NULL REFERENCES users(username),
    expires_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS uploads (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    upload_id TEXT NOT NULL UNIQUE,
    patient_id TEXT NOT NULL,
    stored_path TEXT NOT NULL,
    status TEXT NOT NULL,
    reason TEXT,
    created_at TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS uploads_patient ON uploads(patient_id);
CREATE TABLE IF NOT EXISTS results (
    upload_id TEXT PRIMARY KEY REFERENCES uploads(upload_id) ON DELETE CASCADE,
    patient_id TEXT NOT NULL,
    label TEXT NOT NULL,
    confidence REAL NOT NULL,
    overlay_name TEXT NOT NULL,
    image_name TEXT NOT NULL,
    detections TEXT NOT NULL,
    created_at TEXT NOT NULL
);
";

impl Store {
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        Self::init(Connection::open(path)?)
    }

    pub fn open_in_memory() -> Result<Self, ServiceError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, ServiceError> {
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    fn conn(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().expect("store lock")
    }

    pub fn create_user(
        &self,
        username: &str,
        password_digest: &str,
        now: DateTime<Utc>,
    ) -> Result<(), ServiceError> {
        let res = self.conn().execute(
            "INSERT INTO users (username, password_digest, role, created_at) VALUES (?1, ?2, 'clinician', ?3)",
            params![username, password_digest, ts(&now)],
        );
        match res {
            Ok(_) => Ok(()),
            Err(rusqlite::Error::SqliteFailure(e, _))
                if e.code == rusqlite::ErrorCode::ConstraintViolation =>
            {
                Err(ServiceError::UserExists(username.to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn password_digest(&self, username: &str) -> Result<Option<String>, ServiceError> {
        Ok(self
            .conn()
            .query_row(
                "SELECT password_digest FROM users WHERE username = ?1",
                [username],
                |r| r.get(0),
            )
            .optional()?)
    }

    pub fn insert_token(
        &self,
        digest: &str,
        username: &str,
        expires_at: DateTime<Utc>,
    ) -> Result<(), ServiceError> {
        self.conn().execute(
            "INSERT INTO tokens (token_digest, username, expires_at) VALUES (?1, ?2, ?3)",
            params![digest, username, ts(&expires_at)],
        )?;
        Ok(())
    }

    /// The user a token belongs to, if it has not expired at `now`.
    pub fn token_user(
        &self,
        digest: &str,
        now: DateTime<Utc>,
    ) -> Result<Option<String>, ServiceError> {
        let row: Option<(String, String)> = self
            .conn()
            .query_row(
                "SELECT username, expires_at FROM tokens WHERE token_digest = ?1",
                [digest],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()?;
        match row {
            Some((user, exp)) if parse_ts(&exp)? > now => Ok(Some(user)),
            _ => Ok(None),
        }
    }

    pub fn purge_expired_tokens(&self, now: DateTime<Utc>) -> Result<usize, ServiceError> {
        Ok(self
            .conn()
            .execute("DELETE FROM tokens WHERE expires_at <= ?1", [ts(&now)])?)
    }

    pub fn insert_upload(&self, rec: &UploadRecord) -> Result<(), ServiceError> {
        self.conn().execute(
            "INSERT INTO uploads (upload_id, patient_id, stored_path, status, reason, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                rec.upload_id,
                rec.patient_id,
                rec.stored_path.to_string_lossy(),
                rec.status.as_str(),
                rec.reason,
                ts(&rec.created_at)
            ],
        )?;
        Ok(())
    }

    fn row_to_upload(r: &rusqlite::Row<'_>) -> rusqlite::Result<UploadRecord> {
        let status: String = r.get(3)?;
        let created: String = r.get(5)?;
        Ok(UploadRecord {
            upload_id: r.get(0)?,
            patient_id: r.get(1)?,
            stored_path: PathBuf::from(r.get::<_, String>(2)?),
            status: UploadStatus::parse(&status)
                .ok_or_else(|| bad_column(format!("unknown status {status}")))?,
            reason: r.get(4)?,
            created_at: parse_ts(&created)?,
        })
    }

    pub fn upload(&self, upload_id: &str) -> Result<Option<UploadRecord>, ServiceError> {
        Ok(self
            .conn()
            .query_row(
                "SELECT upload_id, patient_id, stored_path, status, reason, created_at FROM uploads WHERE upload_id = ?1",
                [upload_id],
                Self::row_to_upload,
            )
            .optional()?)
    }

    pub fn uploads_with_status(
        &self,
        status: UploadStatus,
    ) -> Result<Vec<UploadRecord>, ServiceError> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT upload_id, patient_id, stored_path, status, reason, created_at FROM uploads
             WHERE status = ?1 ORDER BY seq",
        )?;
        let rows = stmt.query_map([status.as_str()], Self::row_to_upload)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Moves `upload_id` from `from` to `to`. Returns false when the upload
    /// is gone or not in `from`, so status can only move forward.
    pub fn transition(
        &self,
        upload_id: &str,
        from: UploadStatus,
        to: UploadStatus,
        reason: Option<&str>,
    ) -> Result<bool, ServiceError> {
        let allowed = matches!(
            (from, to),
            (UploadStatus::Received, UploadStatus::Processing)
                | (UploadStatus::Processing, UploadStatus::Done)
                | (UploadStatus::Processing, UploadStatus::Failed)
        );
        if !allowed {
            return Err(ServiceError::Internal(format!(
                "illegal status change {} -> {}",
                from.as_str(),
                to.as_str()
            )));
        }
        let n = self.conn().execute(
            "UPDATE uploads SET status = ?1, reason = ?2 WHERE upload_id = ?3 AND status = ?4",
            params![to.as_str(), reason, upload_id, from.as_str()],
        )?;
        Ok(n == 1)
    }

    /// The upload's patient, as a map keyed by upload (scan) ID.
    pub fn patient_map(&self, upload_id: &str) -> Result<PatientIdMap, ServiceError> {
        let mut map = PatientIdMap::new();
        if let Some(rec) = self.upload(upload_id)? {
            map.insert(rec.upload_id, rec.patient_id);
        }
        Ok(map)
    }

    /// Stores a result and marks the upload done in one transaction. Returns
    /// false if the upload vanished or was no longer processing.
    pub fn complete(&self, result: &DiagnosisResult) -> Result<bool, ServiceError> {
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        let n = tx.execute(
            "UPDATE uploads SET status = 'done' WHERE upload_id = ?1 AND status = 'processing'",
            [&result.upload_id],
        )?;
        if n != 1 {
            return Ok(false);
        }
        tx.execute(
            "INSERT INTO results (upload_id, patient_id, label, confidence, overlay_name, image_name, detections, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                result.upload_id,
                result.patient_id,
                result.label.to_string(),
                result.confidence,
                result.overlay_name,
                result.image_name,
                serde_json::to_string(&result.detections).expect("detections serialize"),
                ts(&result.created_at)
            ],
        )?;
        tx.commit()?;
        Ok(true)
    }

    fn row_to_result(r: &rusqlite::Row<'_>) -> rusqlite::Result<DiagnosisResult> {
        let label: String = r.get(2)?;
        let dets: String = r.get(6)?;
        let created: String = r.get(7)?;
        Ok(DiagnosisResult {
            upload_id: r.get(0)?,
            patient_id: r.get(1)?,
            label: match label.as_str() {
                "tumor" => Label::Tumor,
                "no_tumor" => Label::NoTumor,
                other => return Err(bad_column(format!("unknown label {other}"))),
            },
            confidence: r.get(3)?,
            overlay_name: r.get(4)?,
            image_name: r.get(5)?,
            detections: serde_json::from_str(&dets).map_err(|e| bad_column(e.to_string()))?,
            created_at: parse_ts(&created)?,
        })
    }

    const RESULT_COLUMNS: &'static str =
        "r.upload_id, r.patient_id, r.label, r.confidence, r.overlay_name, r.image_name, r.detections, r.created_at";

    pub fn result(&self, upload_id: &str) -> Result<Option<DiagnosisResult>, ServiceError> {
        let sql = format!(
            "SELECT {} FROM results r WHERE r.upload_id = ?1",
            Self::RESULT_COLUMNS
        );
        Ok(self
            .conn()
            .query_row(&sql, [upload_id], Self::row_to_result)
            .optional()?)
    }

    /// Newest upload first.
    pub fn patient_results(&self, patient_id: &str) -> Result<Vec<DiagnosisResult>, ServiceError> {
        let sql = format!(
            "SELECT {} FROM results r JOIN uploads u ON u.upload_id = r.upload_id
             WHERE r.patient_id = ?1 ORDER BY u.created_at DESC, u.seq DESC",
            Self::RESULT_COLUMNS
        );
        let conn = self.conn();
        let mut stmt = conn.prepare(&sql)?;
        let rows = stmt.query_map([patient_id], Self::row_to_result)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Whether `name` is the overlay or input image of an existing result.
    pub fn artifact_exists(&self, name: &str) -> Result<bool, ServiceError> {
        let n: i64 = self.conn().query_row(
            "SELECT COUNT(*) FROM results WHERE overlay_name = ?1 OR image_name = ?1",
            [name],
            |r| r.get(0),
        )?;
        Ok(n > 0)
    }

    /// Removes the upload and its result; returns what was removed.
    pub fn delete_upload(
        &self,
        upload_id: &str,
    ) -> Result<Option<(UploadRecord, Option<DiagnosisResult>)>, ServiceError> {
        let Some(rec) = self.upload(upload_id)? else {
            return Ok(None);
        };
        let result = self.result(upload_id)?;
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        tx.execute("DELETE FROM results WHERE upload_id = ?1", [upload_id])?;
        tx.execute("DELETE FROM uploads WHERE upload_id = ?1", [upload_id])?;
        tx.commit()?;
        Ok(Some((rec, result)))
    }
}
