//! HTTP render service over a time-step archive.
//!
//! | route           | result                                  |
//! |-----------------|-----------------------------------------|
//! | `GET /archive`  | archive summary JSON                    |
//! | `POST /render`  | PNG for a JSON [`RenderRequest`]        |
//! | `GET /render`   | PNG for the same request as a query     |
//!
//! Errors are JSON `{"error", "detail"}`. Until the archive has been opened every route
//! answers 503.

mod cache;
mod error;
mod request;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use axum::extract::{Query, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::HeaderValue;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chronofield::archive::{ArchiveInfo, ArchiveReader};
use chronofield::renderer::{render_image, RenderParams};
use chronofield::Field32;

pub use cache::FieldCache;
pub use error::{ApiError, ErrorBody};
pub use request::{CameraSpec, Quality, RenderRequest};

pub const RENDER_MILLIS_HEADER: &str = "x-render-millis";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub max_width: u32,
    pub max_height: u32,
    pub max_samples: usize,
    /// Time steps kept deserialized in memory.
    pub cache_size: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            max_width: 2048,
            max_height: 2048,
            max_samples: 1024,
            cache_size: 4,
        }
    }
}

struct Loaded {
    archive: ArchiveReader,
    info: ArchiveInfo,
}

pub struct AppState {
    config: ServiceConfig,
    loaded: OnceLock<Loaded>,
    cache: Mutex<FieldCache>,
}

impl AppState {
    /// State with no archive yet; see [`AppState::load`].
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            cache: Mutex::new(FieldCache::new(config.cache_size)),
            config,
            loaded: OnceLock::new(),
        })
    }

    pub fn with_archive(config: ServiceConfig, archive: ArchiveReader) -> Arc<Self> {
        let state = Self::new(config);
        state.install(archive);
        state
    }

    pub fn install(&self, archive: ArchiveReader) {
        let info = archive.info();
        let _ = self.loaded.set(Loaded { archive, info });
    }

    pub fn load(&self, path: &Path) -> chronofield::Result<()> {
        self.install(ArchiveReader::open(path)?);
        Ok(())
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded.get().is_some()
    }

    pub fn cache_stats(&self) -> (u64, u64) {
        self.cache.lock().expect("cache lock").stats()
    }

    fn loaded(&self) -> Result<&Loaded, ApiError> {
        self.loaded
            .get()
            .ok_or_else(|| ApiError::unavailable("archive is still loading"))
    }

    fn field(&self, t: u32) -> Result<Arc<Field32>, ApiError> {
        if let Some(f) = self.cache.lock().expect("cache lock").get(t) {
            return Ok(f);
        }
        let field = Arc::new(self.loaded()?.archive.read_timestep::<f32>(t)?);
        self.cache.lock().expect("cache lock").insert(t, field.clone());
        Ok(field)
    }

    /// Validates `req` and renders it to PNG bytes.
    pub fn render(&self, req: &RenderRequest) -> Result<Vec<u8>, ApiError> {
        let loaded = self.loaded()?;
        let cfg = &self.config;
        let c = &req.camera;
        if c.width == 0 || c.height == 0 {
            return Err(ApiError::bad_request("width and height must be positive"));
        }
        if c.width > cfg.max_width || c.height > cfg.max_height {
            return Err(ApiError::too_large(format!(
                "{}x{} exceeds the {}x{} limit",
                c.width, c.height, cfg.max_width, cfg.max_height
            )));
        }
        let samples = req.samples.unwrap_or(loaded.info.samples);
        if samples == 0 {
            return Err(ApiError::bad_request("samples must be positive"));
        }
        if samples > cfg.max_samples {
            return Err(ApiError::too_large(format!(
                "{samples} samples exceeds the limit of {}",
                cfg.max_samples
            )));
        }
        let (width, height, samples) = match req.quality {
            Quality::Full => (c.width, c.height, samples),
            Quality::Preview => ((c.width / 2).max(1), (c.height / 2).max(1), (samples / 2).max(1)),
        };
        let camera = c.model(loaded.info.scene_scale, width, height)?;
        let t = u32::try_from(req.time_index)
            .ok()
            .filter(|t| loaded.archive.contains(*t))
            .ok_or_else(|| ApiError::not_found(format!("time index {} is not in the archive", req.time_index)))?;
        let field = self.field(t)?;
        let params = RenderParams::inference(samples, loaded.info.background);
        let image = render_image(&field, &camera, &params)?;
        Ok(image.opaque().encode_png()?)
    }
}

async fn archive_info(State(state): State<Arc<AppState>>) -> Result<Json<ArchiveInfo>, ApiError> {
    Ok(Json(state.loaded()?.info.clone()))
}

async fn render_response(state: Arc<AppState>, req: RenderRequest) -> Result<Response, ApiError> {
    let start = Instant::now();
    let png = tokio::task::spawn_blocking(move || state.render(&req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let millis = start.elapsed().as_millis();
    let mut resp = png.into_response();
    let headers = resp.headers_mut();
    headers.insert(CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert(RENDER_MILLIS_HEADER, HeaderValue::from(millis as u64));
    Ok(resp)
}

async fn render_post(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    render_response(state, req).await
}

async fn render_get(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let req = RenderRequest::from_query(&q)?;
    render_response(state, req).await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/archive", get(archive_info))
        .route("/render", get(render_get).post(render_post))
        .with_state(state)
}

/// Binds, opens the archive in the background and serves until the process exits.
pub async fn serve(archive: PathBuf, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let state = AppState::new(config);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match loader.load(&archive) {
        Ok(()) => log::info!("archive {} loaded", archive.display()),
        Err(e) => log::error!("cannot open archive {}: {e}", archive.display()),
    });
    axum::serve(listener, router(state)).await
}
