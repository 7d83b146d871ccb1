//! Authenticated REST service: clinicians upload a scan with a patient ID, a
//! single inference worker diagnoses it, and results are kept per patient.
//!
//! Uploads are accepted immediately (202) and polled for their result.

mod auth;
mod routes;
mod store;
mod worker;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, ModelConfig, Segmenter};

pub use auth::{
    hash_password, validate_username, verify_password, Clock, ManualClock, SystemClock,
    MIN_PASSWORD_LEN,
};
pub use routes::router;
pub use store::{DetectionSummary, DiagnosisResult, Store, UploadRecord, UploadStatus};

pub const ARTIFACTS_DIR: &str = "artifacts";
pub const ENV_PREFIX: &str = "TUMORSEG_";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("user {0:?} already exists")]
    UserExists(String),
    #[error("database error: {0}")]
    Db(#[from] rusqlite::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Uploaded images and overlays live under `<storage_root>/artifacts`.
    pub storage_root: PathBuf,
    pub database_path: PathBuf,
    /// Training run whose latest checkpoint is served.
    pub run_dir: PathBuf,
    pub detection_threshold: f64,
    /// Keys token digests. Empty means a random per-process secret, which
    /// invalidates tokens on restart.
    pub token_secret: String,
    pub token_ttl_secs: u64,
    pub bind_address: String,
    pub port: u16,
    pub max_upload_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            storage_root: PathBuf::from("storage"),
            database_path: PathBuf::from("storage/tumorseg.db"),
            run_dir: PathBuf::from("runs/latest"),
            detection_threshold: 0.5,
            token_secret: String::new(),
            token_ttl_secs: 8 * 3600,
            bind_address: "127.0.0.1".into(),
            port: 8080,
            max_upload_bytes: 16 * 1024 * 1024,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(0.0..=1.0).contains(&self.detection_threshold) {
            return Err(ServiceError::Config(format!(
                "detection_threshold must be in [0, 1], got {}",
                self.detection_threshold
            )));
        }
        if self.token_ttl_secs == 0 {
            return Err(ServiceError::Config(
                "token_ttl_secs must be positive".into(),
            ));
        }
        if self.max_upload_bytes == 0 {
            return Err(ServiceError::Config(
                "max_upload_bytes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.storage_root.join(ARTIFACTS_DIR)
    }
}

/// The file schema shared by `serve` and `train`: a `[service]` and a
/// `[model]` table, both optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub service: ServiceConfig,
    pub model: ModelConfig,
}

impl AppConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ServiceError> {
        toml::from_str(s).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `TUMORSEG_*` overrides for the service settings.
    pub fn apply_env(
        &mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<(), ServiceError> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ServiceError> {
            v.trim()
                .parse()
                .map_err(|_| ServiceError::Config(format!("{ENV_PREFIX}{key}: cannot parse {v:?}")))
        }
        let s = &mut self.service;
        for key in [
            "STORAGE_ROOT",
            "DATABASE_PATH",
            "RUN_DIR",
            "DETECTION_THRESHOLD",
            "TOKEN_SECRET",
            "TOKEN_TTL_SECS",
            "BIND_ADDRESS",
            "PORT",
            "MAX_UPLOAD_BYTES",
        ] {
            let Some(v) = lookup(&format!("{ENV_PREFIX}{key}")) else {
                continue;
            };
            match key {
                "STORAGE_ROOT" => s.storage_root = PathBuf::from(v),
                "DATABASE_PATH" => s.database_path = PathBuf::from(v),
                "RUN_DIR" => s.run_dir = PathBuf::from(v),
                "DETECTION_THRESHOLD" => s.detection_threshold = parse(key, &v)?,
                "TOKEN_SECRET" => s.token_secret = v,
                "TOKEN_TTL_SECS" => s.token_ttl_secs = parse(key, &v)?,
                "BIND_ADDRESS" => s.bind_address = v,
                "PORT" => s.port = parse(key, &v)?,
                _ => s.max_upload_bytes = parse(key, &v)?,
            }
        }
        Ok(())
    }

    pub fn apply_process_env(&mut self) -> Result<(), ServiceError> {
        self.apply_env(|k| std::env::var(k).ok())
    }
}

type Job = String;

pub(crate) struct Inner {
    pub(crate) store: Store,
    pub(crate) config: ServiceConfig,
    /// Canonical form of `config.artifacts_dir()`.
    pub(crate) artifacts_dir: PathBuf,
    pub(crate) clock: Arc<dyn Clock>,
    pub(crate) token_secret: String,
    jobs: Mutex<Option<mpsc::Sender<Job>>>,
}

impl Inner {
    pub(crate) fn enqueue(&self, upload_id: String) -> Result<(), ServiceError> {
        let guard = self.jobs.lock().expect("queue lock");
        let tx = guard
            .as_ref()
            .ok_or_else(|| ServiceError::Internal("service is shutting down".into()))?;
        tx.send(upload_id)
            .map_err(|_| ServiceError::Internal("inference worker stopped".into()))
    }
}

/// Shared handle given to every request handler.
#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Inner>);

/// A running service: the store, the artifact directory and the worker
/// thread that owns the model.
pub struct Service {
    state: AppState,
    worker: Option<JoinHandle<()>>,
}

impl Service {
    pub fn start(
        config: ServiceConfig,
        model: Box<dyn Segmenter + Send>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        config.validate()?;
        let artifacts = config.artifacts_dir();
        std::fs::create_dir_all(&artifacts)?;
        let artifacts_dir = artifacts.canonicalize()?;
        let store = Store::open(&config.database_path)?;
        let token_secret = if config.token_secret.is_empty() {
            auth::new_token()
        } else {
            config.token_secret.clone()
        };
        let (tx, rx) = mpsc::channel();
        let inner = Arc::new(Inner {
            store,
            config,
            artifacts_dir,
            clock,
            token_secret,
            jobs: Mutex::new(Some(tx)),
        });
        // Work interrupted by a previous shutdown.
        for rec in inner.store.uploads_with_status(UploadStatus::Processing)? {
            inner.store.transition(
                &rec.upload_id,
                UploadStatus::Processing,
                UploadStatus::Failed,
                Some("interrupted by service restart"),
            )?;
        }
        let pending = inner.store.uploads_with_status(UploadStatus::Received)?;
        let worker = worker::spawn(inner.clone(), model, rx)?;
        for rec in pending {
            inner.enqueue(rec.upload_id)?;
        }
        Ok(Self {
            state: AppState(inner),
            worker: Some(worker),
        })
    }

    pub fn state(&self) -> AppState {
        self.state.clone()
    }

    pub fn router(&self) -> axum::Router {
        router(self.state())
    }

    pub fn store(&self) -> &Store {
        &self.state.0.store
    }

    pub fn add_user(&self, username: &str, password: &str) -> Result<(), ServiceError> {
        add_user_to(self.store(), username, password, self.state.0.clock.now())
    }

    /// Stops accepting jobs and waits for the worker to drain the queue.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.state.0.jobs.lock().expect("queue lock").take();
        if let Some(handle) = self.worker.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn add_user_to(
    store: &Store,
    username: &str,
    password: &str,
    now: chrono::DateTime<chrono::Utc>,
) -> Result<(), ServiceError> {
    validate_username(username)?;
    if password.chars().count() < MIN_PASSWORD_LEN {
        return Err(ServiceError::Config(format!(
            "password must be at least {MIN_PASSWORD_LEN} characters"
        )));
    }
    store.create_user(username, &hash_password(password)?, now)
}

/// Loads the run's latest checkpoint and serves until Ctrl-C.
pub async fn serve(app: AppConfig) -> Result<(), ServiceError> {
    let config = app.service;
    config.validate()?;
    let model = crate::engine::load_run(&config.run_dir)?;
    let addr = format!("{}:{}", config.bind_address, config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: addr.clone(),
            source,
        })?;
    let service = Service::start(config, Box::new(model), Arc::new(SystemClock))?;
    let local: SocketAddr = listener.local_addr()?;
    tracing::info!("listening on http://{local}");
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    tokio::task::spawn_blocking(move || service.shutdown())
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_env_layering() {
        let mut app = AppConfig::from_toml_str(
            r#"
            [service]
            port = 9000
            detection_threshold = 0.7
            [model]
            epochs = 3
            "#,
        )
        .unwrap();
        assert_eq!(app.service.port, 9000);
        assert_eq!(app.model.epochs, 3);
        assert_eq!(app.service.max_upload_bytes, 16 * 1024 * 1024);
        app.apply_env(|k| match k {
            "TUMORSEG_PORT" => Some("9100".into()),
            "TUMORSEG_STORAGE_ROOT" => Some("/srv/scans".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(app.service.port, 9100);
        assert_eq!(app.service.storage_root, PathBuf::from("/srv/scans"));
        assert_eq!(app.service.detection_threshold, 0.7);
        assert!(app
            .apply_env(|k| (k == "TUMORSEG_PORT").then(|| "http".into()))
            .is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(AppConfig::from_toml_str("[service]\nprot = 1\n").is_err());
        let bad = ServiceConfig {
            detection_threshold: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
