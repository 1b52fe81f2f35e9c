//! HTTP service that hands preference queries to human annotators.
//!
//! The trainer talks to the service through a [`Bridge`]; annotators talk to
//! it over HTTP:
//!
//! | method | path                  | body / result                                   |
//! |--------|-----------------------|-------------------------------------------------|
//! | GET    | `/queries`            | `{"queries": [query, ...]}` (pending, by id)    |
//! | GET    | `/queries/{id}`       | one query, 404 if not pending                   |
//! | POST   | `/queries/{id}/label` | `{"v": 0 | 0.5 | 1}`; 200, 400, 404, 409 or 422 |
//! | GET    | `/status`             | training progress snapshot                      |
//! | GET    | `/geometry`           | walls, goal bounds, start and goal for drawing  |
//!
//! `v = 0` prefers the left subgoal, `1` the right one, `0.5` is a tie. The
//! first label for a query wins; later ones get 409. Every other path is
//! served from the static directory when one is configured.
//!
//! Labels are appended to an optional JSON-lines spool file, so a restarted
//! service can hand them to the trainer again.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::env::Env;
use crate::error::{Error, Result};
use crate::prefs::{Preference, PreferenceRecord, QueryPair, Tuple};

/// Progress figures shown by `/status`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub episode: u64,
    pub k: f64,
    pub alpha: f64,
    pub subgoal_success_rate: f64,
    pub labels_total: u64,
    pub last_eval_success: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireTuple {
    pub s: Vec<f64>,
    pub g_sub: Vec<f64>,
}

/// A query as served over HTTP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireQuery {
    pub id: u64,
    pub env: String,
    pub left: WireTuple,
    pub right: WireTuple,
    pub g_env: Vec<f64>,
    pub created_episode: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub env: String,
    pub walls: Vec<[f64; 4]>,
    pub goal_low: Vec<f64>,
    pub goal_high: Vec<f64>,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
}

impl Geometry {
    pub fn of(env: &Env) -> Self {
        let mut probe = env.clone();
        let (s, g) = probe.reset(0);
        let spec = env.spec();
        Self {
            env: env.kind().as_str().to_string(),
            walls: env.wall_segments(),
            goal_low: spec.goal_low.clone(),
            goal_high: spec.goal_high.clone(),
            start: env.achieved_goal(&s),
            goal: g,
        }
    }
}

fn wire(env: &str, q: &QueryPair) -> WireQuery {
    let t = |t: &Tuple| WireTuple {
        s: t.s.clone(),
        g_sub: t.g_sub.clone(),
    };
    WireQuery {
        id: q.id,
        env: env.to_string(),
        left: t(&q.left),
        right: t(&q.right),
        g_env: q.g_env.clone(),
        created_episode: q.created_episode,
    }
}

#[derive(Debug, Default)]
struct Shared {
    pending: BTreeMap<u64, QueryPair>,
    labeled: HashSet<u64>,
    outbox: Vec<PreferenceRecord>,
    status: StatusSnapshot,
}

struct Inner {
    shared: Mutex<Shared>,
    geometry: Geometry,
    spool: Option<PathBuf>,
    static_dir: Option<PathBuf>,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Trainer-side handle: offers queries and collects labels.
#[derive(Clone)]
pub struct Bridge {
    inner: Arc<Inner>,
}

impl Bridge {
    /// Makes queries available to annotators. Ids already labeled are ignored.
    pub fn offer(&self, queries: Vec<QueryPair>) {
        let mut s = self.inner.lock();
        for q in queries {
            if !s.labeled.contains(&q.id) {
                s.pending.insert(q.id, q);
            }
        }
    }

    /// Withdraws queries the trainer no longer waits for.
    pub fn resolve(&self, ids: Vec<u64>) {
        let mut s = self.inner.lock();
        for id in ids {
            s.pending.remove(&id);
            s.labeled.insert(id);
        }
    }

    pub fn status(&self, status: StatusSnapshot) {
        self.inner.lock().status = status;
    }

    /// Labels received since the last call, in arrival order.
    pub fn drain(&self) -> Vec<PreferenceRecord> {
        std::mem::take(&mut self.inner.lock().outbox)
    }

    pub fn pending(&self) -> usize {
        self.inner.lock().pending.len()
    }

    /// Records a label as if it came over HTTP.
    pub fn submit(&self, id: u64, v: f64) -> std::result::Result<PreferenceRecord, LabelError> {
        submit(&self.inner, id, v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelError {
    NotFound,
    AlreadyLabeled,
    Invalid(String),
}

fn submit(inner: &Inner, id: u64, v: f64) -> std::result::Result<PreferenceRecord, LabelError> {
    let label = Preference::from_value(v).map_err(|e| LabelError::Invalid(e.to_string()))?;
    let mut s = inner.lock();
    if s.labeled.contains(&id) {
        return Err(LabelError::AlreadyLabeled);
    }
    let query = s.pending.remove(&id).ok_or(LabelError::NotFound)?;
    s.labeled.insert(id);
    let rec = PreferenceRecord { query, label };
    if let Some(p) = &inner.spool {
        if let Err(e) = append_spool(p, &rec) {
            log::warn!("could not spool label {id}: {e}");
        }
    }
    s.outbox.push(rec.clone());
    Ok(rec)
}

fn append_spool(path: &Path, rec: &PreferenceRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(rec).map_err(|e| Error::Corrupt(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Reads a spool file written by the service.
pub fn read_spool(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Corrupt(format!("spool line: {e}"))))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct ServiceOptions {
    pub spool: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

/// A running service. Dropping it shuts the server down.
pub struct ServiceHandle {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on a background thread.
/// Labels already in the spool file are queued for the next
/// [`Bridge::drain`].
pub fn start(addr: SocketAddr, env: &Env, options: ServiceOptions) -> Result<(ServiceHandle, Bridge)> {
    let mut shared = Shared::default();
    if let Some(p) = options.spool.as_ref().filter(|p| p.exists()) {
        for rec in read_spool(p)? {
            if shared.labeled.insert(rec.query.id) {
                shared.outbox.push(rec);
            }
        }
    }
    let inner = Arc::new(Inner {
        shared: Mutex::new(shared),
        geometry: Geometry::of(env),
        spool: options.spool,
        static_dir: options.static_dir,
    });
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let bound = listener.local_addr()?;
    let app = router(inner.clone());
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_current_thread().enable_io().build()?;
    let thread = std::thread::Builder::new()
        .name("annotate".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("annotation service: {e}");
                        return;
                    }
                };
                let server = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = server.await {
                    log::error!("annotation service: {e}");
                }
            })
        })?;
    Ok((
        ServiceHandle {
            addr: bound,
            shutdown: Some(tx),
            thread: Some(thread),
        },
        Bridge { inner },
    ))
}

fn router(inner: Arc<Inner>) -> Router {
    Router::new()
        .route("/queries", get(list_queries))
        .route("/queries/{id}", get(one_query))
        .route("/queries/{id}/label", post(label_query))
        .route("/status", get(status))
        .route("/geometry", get(geometry))
        .fallback(static_file)
        .with_state(inner)
}

fn error(code: StatusCode, msg: impl Into<String>) -> Response {
    (code, Json(json!({ "error": msg.into() }))).into_response()
}

async fn list_queries(State(inner): State<Arc<Inner>>) -> Response {
    let env = inner.geometry.env.clone();
    let s = inner.lock();
    let queries: Vec<WireQuery> = s.pending.values().map(|q| wire(&env, q)).collect();
    Json(json!({ "queries": queries })).into_response()
}

async fn one_query(State(inner): State<Arc<Inner>>, UrlPath(id): UrlPath<String>) -> Response {
    let Ok(id) = id.parse::<u64>() else {
        return error(StatusCode::BAD_REQUEST, "query id must be an integer");
    };
    let s = inner.lock();
    match s.pending.get(&id) {
        Some(q) => Json(wire(&inner.geometry.env, q)).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no pending query {id}")),
    }
}

#[derive(Deserialize)]
struct LabelBody {
    v: serde_json::Value,
}

async fn label_query(State(inner): State<Arc<Inner>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let Ok(id) = id.parse::<u64>() else {
        return error(StatusCode::BAD_REQUEST, "query id must be an integer");
    };
    let body: LabelBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    let Some(v) = body.v.as_f64() else {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "label must be 0, 0.5 or 1");
    };
    match submit(&inner, id, v) {
        Ok(rec) => Json(json!({ "id": id, "v": rec.label.value() })).into_response(),
        Err(LabelError::NotFound) => error(StatusCode::NOT_FOUND, format!("no pending query {id}")),
        Err(LabelError::AlreadyLabeled) => error(StatusCode::CONFLICT, format!("query {id} is already labeled")),
        Err(LabelError::Invalid(m)) => error(StatusCode::UNPROCESSABLE_ENTITY, m),
    }
}

async fn status(State(inner): State<Arc<Inner>>) -> Response {
    let s = inner.lock();
    Json(json!({
        "pending": s.pending.len(),
        "status": s.status,
    }))
    .into_response()
}

async fn geometry(State(inner): State<Arc<Inner>>) -> Response {
    Json(inner.geometry.clone()).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn static_file(State(inner): State<Arc<Inner>>, uri: Uri) -> Response {
    let Some(root) = inner.static_dir.as_ref() else {
        return error(StatusCode::NOT_FOUND, "not found");
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    if rel.split('/').any(|c| c == ".." || c.is_empty()) {
        return error(StatusCode::NOT_FOUND, "not found");
    }
    let path = root.join(rel);
    match std::fs::read(&path) {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "not found"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;

    fn query(id: u64) -> QueryPair {
        QueryPair {
            id,
            left: Tuple {
                s: vec![0.0, 0.0],
                g_sub: vec![0.1, 0.1],
            },
            right: Tuple {
                s: vec![0.0, 0.0],
                g_sub: vec![-0.1, 0.1],
            },
            g_env: vec![0.25, 0.25],
            created_episode: 0,
        }
    }

    #[test]
    fn first_label_wins_and_spool_replays() {
        let dir = tempfile::tempdir().unwrap();
        let spool = dir.path().join("labels.jsonl");
        let env = Env::new(EnvKind::FourRooms);
        let opts = ServiceOptions {
            spool: Some(spool.clone()),
            static_dir: None,
        };
        {
            let (_h, bridge) = start("127.0.0.1:0".parse().unwrap(), &env, opts.clone()).unwrap();
            bridge.offer(vec![query(1), query(2)]);
            assert_eq!(bridge.submit(1, 0.0).unwrap().label, Preference::Left);
            assert_eq!(bridge.submit(1, 0.0), Err(LabelError::AlreadyLabeled));
            assert_eq!(bridge.submit(9, 0.0), Err(LabelError::NotFound));
            assert!(matches!(bridge.submit(2, 0.3), Err(LabelError::Invalid(_))));
            assert_eq!(bridge.drain().len(), 1);
            assert!(bridge.drain().is_empty());
            assert_eq!(bridge.pending(), 1);
        }
        let (_h, bridge) = start("127.0.0.1:0".parse().unwrap(), &env, opts).unwrap();
        let replay = bridge.drain();
        assert_eq!(replay.len(), 1);
        assert_eq!(replay[0].query.id, 1);
        bridge.offer(vec![query(1)]);
        assert_eq!(bridge.pending(), 0);
    }
}
