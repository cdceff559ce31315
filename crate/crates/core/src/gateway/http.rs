//! HTTP binding of the gateway (`/api/v1/`) and of the remote interface
//! (`/remote/v1/`). Handlers run the blocking core on tokio's blocking pool.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, Method as HttpMethod, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{AdminCommand, CommandCategory, Gateway, GatewayError};
use crate::federation::wire::{self, Method, WireRequest};
use crate::federation::RemoteHandler;
use crate::ids::{CircleId, MessageId, UserId};

type Shared = State<Arc<Gateway>>;

#[derive(Debug, Serialize, Deserialize)]
pub struct LoginRequest {
    pub user: UserId,
    pub password: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PostRequest {
    pub content: String,
    #[serde(default)]
    pub tags: BTreeSet<CircleId>,
    #[serde(default)]
    pub conflicts: BTreeSet<CircleId>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FollowRequest {
    pub target: UserId,
    #[serde(default = "yes")]
    pub following: bool,
}

fn yes() -> bool {
    true
}

fn error_response(e: &GatewayError) -> Response {
    let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let body = match e {
        // same body for denied and unknown messages
        GatewayError::NotFound => serde_json::json!({ "error": "not-found", "message": "not found" }),
        other => serde_json::json!({ "error": other.kind(), "message": other.to_string() }),
    };
    (status, Json(body)).into_response()
}

async fn blocking<T, F>(f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> Result<T, GatewayError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => error_response(&e),
        Err(e) => {
            tracing::error!(error = %e, "handler panicked");
            StatusCode::INTERNAL_SERVER_ERROR.into_response()
        }
    }
}

fn bearer(headers: &HeaderMap) -> String {
    headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or_default()
        .to_string()
}

fn scoped<T: std::str::FromStr>(asn: &str, local: &str) -> Result<T, GatewayError> {
    format!("{asn}/{local}").parse().map_err(|_| GatewayError::NotFound)
}

async fn login(State(gw): Shared, Json(req): Json<LoginRequest>) -> Response {
    blocking(move || gw.login(&req.user, &req.password)).await
}

async fn post_message(State(gw): Shared, headers: HeaderMap, Json(req): Json<PostRequest>) -> Response {
    let token = bearer(&headers);
    blocking(move || gw.handle_post(&token, &req.content, req.tags, req.conflicts)).await
}

async fn get_message(State(gw): Shared, headers: HeaderMap, Path((asn, local)): Path<(String, String)>) -> Response {
    let token = bearer(&headers);
    blocking(move || {
        let mid: MessageId = scoped(&asn, &local)?;
        gw.handle_fetch(&token, &mid)
    })
    .await
}

async fn get_report(State(gw): Shared, headers: HeaderMap, Path((asn, local)): Path<(String, String)>) -> Response {
    let token = bearer(&headers);
    blocking(move || {
        let mid: MessageId = scoped(&asn, &local)?;
        gw.delivery_report(&token, &mid)
    })
    .await
}

async fn inbox(State(gw): Shared, headers: HeaderMap) -> Response {
    let token = bearer(&headers);
    blocking(move || gw.inbox(&token)).await
}

async fn mark_read(State(gw): Shared, headers: HeaderMap, Path(seq): Path<u64>) -> Response {
    let token = bearer(&headers);
    blocking(move || gw.mark_read(&token, seq).map(|()| serde_json::json!({ "seq": seq }))).await
}

async fn follow(State(gw): Shared, headers: HeaderMap, Json(req): Json<FollowRequest>) -> Response {
    let token = bearer(&headers);
    blocking(move || {
        gw.follow(&token, &req.target, req.following)?;
        Ok(serde_json::json!({ "followee": req.target, "following": req.following }))
    })
    .await
}

async fn own_profile(State(gw): Shared, headers: HeaderMap) -> Response {
    let token = bearer(&headers);
    blocking(move || gw.profile(&token, None)).await
}

async fn user_profile(State(gw): Shared, headers: HeaderMap, Path((asn, local)): Path<(String, String)>) -> Response {
    let token = bearer(&headers);
    blocking(move || {
        let u: UserId = scoped(&asn, &local)?;
        gw.profile(&token, Some(&u))
    })
    .await
}

async fn pending(State(gw): Shared, headers: HeaderMap) -> Response {
    let token = bearer(&headers);
    blocking(move || gw.pending(&token)).await
}

async fn moderate(
    State(gw): Shared,
    headers: HeaderMap,
    Path((asn, local, verdict)): Path<(String, String, String)>,
) -> Response {
    let token = bearer(&headers);
    blocking(move || {
        let mid: MessageId = scoped(&asn, &local)?;
        let approve = match verdict.as_str() {
            "approve" => true,
            "reject" => false,
            _ => return Err(GatewayError::NotFound),
        };
        gw.moderate(&token, &mid, approve)
    })
    .await
}

/// Admin endpoints each accept the [`AdminCommand`]s of one category.
fn admin_route(category: CommandCategory) -> axum::routing::MethodRouter<Arc<Gateway>> {
    post(move |State(gw): Shared, headers: HeaderMap, Json(cmd): Json<AdminCommand>| async move {
        let token = bearer(&headers);
        blocking(move || {
            if cmd.category() != category {
                gw.authenticate(&token)?;
                return Err(GatewayError::Invalid(format!("command not accepted on this endpoint ({category:?})")));
            }
            gw.handle_admin(&token, cmd)
        })
        .await
    })
}

async fn remote(State(gw): Shared, method: HttpMethod, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    let header = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
    let Some(origin) = header(wire::ORIGIN_HEADER).and_then(|o| o.parse().ok()) else {
        return (
            StatusCode::UNAUTHORIZED,
            Json(serde_json::json!({ "error": "auth-failed", "message": "missing origin" })),
        )
            .into_response();
    };
    let method = if method == HttpMethod::GET { Method::Get } else { Method::Post };
    let req = WireRequest {
        method,
        path: uri.path().to_string(),
        origin,
        signature: header(wire::SIGNATURE_HEADER).unwrap_or_default(),
        body: body.to_vec(),
    };
    let node = gw.node().clone();
    match tokio::task::spawn_blocking(move || node.handle_remote(req)).await {
        Ok(resp) => (
            StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            [("content-type", "application/json")],
            resp.body,
        )
            .into_response(),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route("/api/v1/session", post(login))
        .route("/api/v1/messages", post(post_message))
        .route("/api/v1/messages/:asn/:local", get(get_message))
        .route("/api/v1/messages/:asn/:local/report", get(get_report))
        .route("/api/v1/inbox", get(inbox))
        .route("/api/v1/inbox/:seq/read", post(mark_read))
        .route("/api/v1/follow", post(follow))
        .route("/api/v1/profile", get(own_profile))
        .route("/api/v1/users/:asn/:local", get(user_profile))
        .route("/api/v1/users", admin_route(CommandCategory::Users))
        .route("/api/v1/circles", admin_route(CommandCategory::Circles))
        .route("/api/v1/roles", admin_route(CommandCategory::Roles))
        .route("/api/v1/privileges", admin_route(CommandCategory::Privileges))
        .route("/api/v1/admin/pair", admin_route(CommandCategory::Pairing))
        .route("/api/v1/moderation", get(pending))
        .route("/api/v1/moderation/:asn/:local/:verdict", post(moderate))
        .route("/remote/v1/messages", post(remote))
        .route("/remote/v1/circles", post(remote))
        .route("/remote/v1/pair", post(remote))
        .route("/remote/v1/follows", post(remote))
        .route("/remote/v1/users/:asn/:local", get(remote))
        .with_state(gw)
}

/// Serves until ctrl-c.
pub async fn serve(gw: Arc<Gateway>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, asn = %gw.node().asn(), "listening");
    axum::serve(listener, router(gw))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
