//! HTTP service for a running realism study.
//!
//! Every judgment is checked, appended to the JSONL log and recorded in
//! memory while the state lock is held, so the log has a single writer and
//! `/api/report` always equals the aggregate over the log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use nowcast_core::evaluation::{read_judgments, read_manifest, read_truth, JudgmentRecord, JudgmentRejection, Study, Truth};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

pub struct StudyService {
    study: Study,
    dir: PathBuf,
    log: File,
}

pub type SharedStudy = Arc<Mutex<StudyService>>;

impl StudyService {
    /// Loads `items.json` and `truth.json` from `dir`, the optional
    /// assignments, and replays any existing judgment log.
    pub fn open(dir: &Path, judgments: &Path, assignments: Option<&Path>) -> Result<Self> {
        let items = read_manifest(&dir.join("items.json")).with_context(|| format!("reading {}/items.json", dir.display()))?;
        let truth = read_truth(&dir.join("truth.json")).with_context(|| format!("reading {}/truth.json", dir.display()))?;
        let assignments: Option<BTreeMap<String, Vec<String>>> = match assignments {
            Some(p) => Some(
                serde_json::from_slice(&std::fs::read(p).with_context(|| format!("cannot read {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?,
            ),
            None => None,
        };
        let existing = if judgments.exists() {
            read_judgments(BufReader::new(File::open(judgments)?)).with_context(|| format!("replaying {}", judgments.display()))?
        } else {
            Vec::new()
        };
        let study = Study::new(items, truth, assignments, existing)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(judgments)
            .with_context(|| format!("cannot open {} for appending", judgments.display()))?;
        Ok(Self {
            study,
            dir: dir.to_path_buf(),
            log,
        })
    }

    pub fn study(&self) -> &Study {
        &self.study
    }
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    examiner: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JudgmentPost {
    item_id: String,
    examiner_id: String,
    judged: Truth,
    decided_at: Option<DateTime<Utc>>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn next_item(State(state): State<SharedStudy>, Query(q): Query<NextQuery>) -> Response {
    if q.examiner.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "examiner must not be empty");
    }
    let svc = state.lock().expect("study lock");
    match svc.study.next_item(&q.examiner) {
        Some(item) => Json(item).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn post_judgment(State(state): State<SharedStudy>, body: Bytes) -> Response {
    let post: JudgmentPost = match serde_json::from_slice(&body) {
        Ok(p) => p,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed judgment: {e}")),
    };
    if post.examiner_id.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "examiner_id must not be empty");
    }
    let record = JudgmentRecord {
        item_id: post.item_id,
        examiner_id: post.examiner_id,
        judged: post.judged,
        decided_at: post.decided_at.unwrap_or_else(Utc::now),
    };
    let mut svc = state.lock().expect("study lock");
    match svc.study.check(&record) {
        Err(JudgmentRejection::UnknownItem) => return error(StatusCode::NOT_FOUND, format!("unknown item `{}`", record.item_id)),
        Err(JudgmentRejection::Unassigned) => {
            return error(
                StatusCode::CONFLICT,
                format!("item `{}` is not assigned to `{}`", record.item_id, record.examiner_id),
            )
        }
        Ok(()) => {}
    }
    let appended = nowcast_core::evaluation::append_judgment(&mut svc.log, &record).and_then(|_| Ok(svc.log.flush()?));
    if let Err(e) = appended {
        log::error!("appending judgment failed: {e}");
        return error(StatusCode::INTERNAL_SERVER_ERROR, "could not persist judgment");
    }
    let examiner = record.examiner_id.clone();
    svc.study.record(record).expect("checked above");
    (StatusCode::CREATED, Json(svc.study.progress(&examiner))).into_response()
}

async fn report(State(state): State<SharedStudy>) -> Response {
    let svc = state.lock().expect("study lock");
    match svc.study.report() {
        Ok(r) => Json(r).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn image(State(state): State<SharedStudy>, UrlPath(id): UrlPath<String>) -> Response {
    let path = {
        let svc = state.lock().expect("study lock");
        match svc.study.item(&id) {
            Some(item) => svc.dir.join(&item.image),
            None => return error(StatusCode::NOT_FOUND, format!("unknown item `{id}`")),
        }
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => {
            log::error!("reading {}: {e}", path.display());
            error(StatusCode::NOT_FOUND, "image file missing")
        }
    }
}

const DEFAULT_PAGE: &str = include_str!("../static/index.html");

/// Routes of the study service; `static_dir` replaces the built-in page.
pub fn router(state: SharedStudy, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/items/next", get(next_item))
        .route("/api/judgments", post(post_judgment))
        .route("/api/report", get(report))
        .route("/img/{id}", get(image))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(DEFAULT_PAGE) })),
    }
}

pub async fn serve(addr: SocketAddr, app: Router) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot bind {addr}"))?;
    log::info!("serving realism study on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
