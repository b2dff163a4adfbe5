//! HTTP front end for [`Service`]. Requests are answered with 503 until the
//! checkpoints finish loading; responses carry a content-hash ETag.

use std::sync::{Arc, OnceLock};

use anyhow::{Context, Result};
use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode, Uri};
use axum::response::Response;
use axum::Router;
use thermoforge::service::Service;

#[derive(Default)]
pub struct AppState {
    service: OnceLock<Arc<Service>>,
}

impl AppState {
    pub fn loaded(service: Service) -> Arc<Self> {
        let s = Arc::new(AppState::default());
        s.install(service);
        s
    }

    pub fn install(&self, service: Service) {
        let _ = self.service.set(Arc::new(service));
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new().fallback(handle).with_state(state)
}

pub fn etag(body: &[u8]) -> String {
    format!("\"{}\"", &thermoforge::sha256_hex(body)[..32])
}

fn json_response(status: StatusCode, body: Vec<u8>) -> Response {
    let mut r = Response::new(Body::from(body));
    *r.status_mut() = status;
    r.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    r
}

async fn handle(State(state): State<Arc<AppState>>, method: Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    let Some(service) = state.service.get().cloned() else {
        let mut r = json_response(StatusCode::SERVICE_UNAVAILABLE, br#"{"error":"Loading","message":"checkpoints are still loading"}"#.to_vec());
        r.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
        return r;
    };
    let target = uri.path_and_query().map(|p| p.as_str().to_string()).unwrap_or_else(|| uri.path().to_string());
    let result = tokio::task::spawn_blocking(move || service.handle(method.as_str(), &target, &body)).await;
    let out = match result {
        Ok(out) => out,
        Err(e) => return json_response(StatusCode::INTERNAL_SERVER_ERROR, serde_json::json!({ "error": "Internal", "message": e.to_string() }).to_string().into_bytes()),
    };
    let status = StatusCode::from_u16(out.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let tag = etag(&out.body);
    if status.is_success() && headers.get(header::IF_NONE_MATCH).and_then(|v| v.to_str().ok()) == Some(tag.as_str()) {
        let mut r = Response::new(Body::empty());
        *r.status_mut() = StatusCode::NOT_MODIFIED;
        r.headers_mut().insert(header::ETAG, HeaderValue::from_str(&tag).expect("hex etag"));
        return r;
    }
    let mut r = json_response(status, out.body);
    if status.is_success() {
        r.headers_mut().insert(header::ETAG, HeaderValue::from_str(&tag).expect("hex etag"));
        r.headers_mut().insert(header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=3600"));
    }
    r
}

pub fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

/// Bind first so clients get 503 instead of connection refused while `load`
/// runs; a failed load stops the server.
pub async fn serve(bind: &str, load: impl FnOnce() -> Result<Service> + Send + 'static) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await.with_context(|| format!("binding {bind}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    let state = Arc::new(AppState::default());
    let server = axum::serve(listener, router(state.clone()));
    let loader = async move {
        let service = tokio::task::spawn_blocking(load).await??;
        state.install(service);
        eprintln!("checkpoints loaded");
        std::future::pending::<Result<()>>().await
    };
    tokio::select! {
        r = server => r.context("server"),
        r = loader => r,
    }
}
