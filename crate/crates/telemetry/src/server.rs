//! HTTP surface: `GET|POST /update` and `GET /channels/{id}/feeds.json`.

use std::future::Future;
use std::io;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::SecondsFormat;
use serde::Serialize;
use serde_json::{Map, Value};
use tokio::net::TcpListener;

use crate::store::{ChannelInfo, ChannelStore, Entry, StoreError};

/// Environment variable holding the service bind address.
pub const BIND_ENV: &str = "DPI_TELEMETRY_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:3000";
/// Entries returned by a feed request without `results`.
pub const DEFAULT_RESULTS: usize = 100;

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        let status = match &self {
            StoreError::Unauthorized => StatusCode::UNAUTHORIZED,
            StoreError::Malformed(_) => StatusCode::BAD_REQUEST,
            StoreError::UnknownChannel(_) => StatusCode::NOT_FOUND,
            StoreError::Config { .. } | StoreError::Log { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, self.to_string()).into_response()
    }
}

pub fn router(store: Arc<ChannelStore>) -> Router {
    Router::new()
        .route("/update", get(update).post(update))
        .route("/channels/{id}/feeds.json", get(feed))
        .with_state(store)
}

fn decode(query: Option<&str>, body: &[u8]) -> Vec<(String, String)> {
    let mut params: Vec<(String, String)> =
        form_urlencoded::parse(query.unwrap_or("").as_bytes()).into_owned().collect();
    params.extend(form_urlencoded::parse(body).into_owned());
    params
}

async fn update(
    State(store): State<Arc<ChannelStore>>,
    RawQuery(query): RawQuery,
    body: Bytes,
) -> Result<String, StoreError> {
    let params = decode(query.as_deref(), &body);
    let outcome = tokio::task::spawn_blocking(move || store.ingest(&params))
        .await
        .map_err(|e| StoreError::Log { path: "ingest".into(), source: io::Error::other(e) })??;
    Ok(outcome.body())
}

#[derive(Serialize)]
struct FeedDoc {
    channel: Map<String, Value>,
    feeds: Vec<Map<String, Value>>,
}

fn iso(t: &chrono::DateTime<chrono::Utc>) -> Value {
    t.to_rfc3339_opts(SecondsFormat::Secs, true).into()
}

fn channel_doc(c: &ChannelInfo) -> Map<String, Value> {
    let mut doc = Map::new();
    doc.insert("id".into(), c.id.into());
    doc.insert("name".into(), c.name.clone().into());
    doc.insert("created_at".into(), iso(&c.created_at));
    doc.insert("updated_at".into(), c.updated_at.as_ref().map_or(Value::Null, iso));
    doc.insert("last_entry_id".into(), c.last_entry_id.map_or(Value::Null, Value::from));
    doc
}

fn feed_row(e: &Entry) -> Map<String, Value> {
    let mut row = Map::new();
    row.insert("created_at".into(), iso(&e.created_at));
    row.insert("entry_id".into(), e.entry_id.into());
    for (i, f) in e.fields.iter().enumerate() {
        if let Some(v) = f {
            row.insert(format!("field{}", i + 1), v.clone().into());
        }
    }
    row
}

async fn feed(
    State(store): State<Arc<ChannelStore>>,
    Path(id): Path<String>,
    RawQuery(query): RawQuery,
) -> Result<Json<FeedDoc>, StoreError> {
    let id: u64 = id.parse().map_err(|_| StoreError::Malformed(format!("channel id {id:?}")))?;
    let mut results = DEFAULT_RESULTS;
    let mut api_key = None;
    for (k, v) in decode(query.as_deref(), &[]) {
        match k.as_str() {
            "results" => results = v.parse().map_err(|_| StoreError::Malformed(format!("results={v:?}")))?,
            "api_key" => api_key = Some(v),
            _ => {}
        }
    }
    let (channel, entries) = store.feed(id, results, api_key.as_deref())?;
    Ok(Json(FeedDoc { channel: channel_doc(&channel), feeds: entries.iter().map(feed_row).collect() }))
}

/// Serves until `shutdown` resolves, then syncs every record log.
pub async fn serve<F>(listener: TcpListener, store: Arc<ChannelStore>, shutdown: F) -> io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(store.clone())).with_graceful_shutdown(shutdown).await?;
    store.flush().map_err(io::Error::other)
}
