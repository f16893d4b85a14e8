//! Local stand-in for the search API and documentation pages.
//!
//! Serves, from a fixture directory:
//! - `GET /search`: `search.json` (or `{}` when absent), with `{{base_url}}`
//!   replaced by the server's own URL. When an `expected_key` file exists,
//!   requests whose `api_key` differs get 401.
//! - `GET /pages/<name>`: files under `pages/`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use tokio::sync::oneshot;

struct Fixtures {
    dir: PathBuf,
    base_url: String,
}

pub struct StubServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral loopback port and serves `dir` on a background thread.
    pub fn start(dir: &Path) -> std::io::Result<Self> {
        Self::start_on(dir, "127.0.0.1:0".parse().expect("literal address"))
    }

    pub fn start_on(dir: &Path, bind: SocketAddr) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Fixtures {
            dir: dir.to_path_buf(),
            base_url: format!("http://{addr}"),
        });
        let (tx, rx) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        let thread = thread::spawn(move || {
            runtime.block_on(async move {
                let app = Router::new()
                    .route("/search", get(search))
                    .route("/pages/*name", get(page))
                    .with_state(state);
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener conversion");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server thread exits (e.g. for a foreground CLI stub).
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

async fn search(State(fx): State<Arc<Fixtures>>, Query(q): Query<HashMap<String, String>>) -> Response {
    if let Ok(expected) = tokio::fs::read_to_string(fx.dir.join("expected_key")).await {
        if q.get("api_key").map(String::as_str) != Some(expected.trim()) {
            return (StatusCode::UNAUTHORIZED, "{\"error\":\"Invalid API key.\"}").into_response();
        }
    }
    let body = tokio::fs::read_to_string(fx.dir.join("search.json"))
        .await
        .unwrap_or_else(|_| "{}".to_string())
        .replace("{{base_url}}", &fx.base_url);
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn page(State(fx): State<Arc<Fixtures>>, UrlPath(name): UrlPath<String>) -> Response {
    if name.split('/').any(|part| part == ".." || part.is_empty()) {
        return StatusCode::NOT_FOUND.into_response();
    }
    match tokio::fs::read(fx.dir.join("pages").join(&name)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}
