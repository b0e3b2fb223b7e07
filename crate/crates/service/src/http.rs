//! Control plane over HTTP, data plane over the `/stream` WebSocket.

use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::session::{ControlError, Controller, ParamsUpdate, Press, ReactionTest, StartOnline, StartSession, Status};

pub struct ApiError(ControlError);

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, body) = match &self.0 {
            ControlError::Conflict { phase, .. } => (StatusCode::CONFLICT, json!({ "error": self.0.to_string(), "phase": phase })),
            ControlError::Invalid(_) => (StatusCode::BAD_REQUEST, json!({ "error": self.0.to_string() })),
            ControlError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": self.0.to_string() })),
        };
        (code, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Status>, ApiError>;

fn body<T: DeserializeOwned>(b: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    b.map(|Json(v)| v).map_err(|e| ApiError(ControlError::Invalid(e.body_text())))
}

/// Runs a control call that may block on a worker thread.
async fn blocking(f: impl FnOnce() -> Result<Status, ControlError> + Send + 'static) -> ApiResult {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ControlError::Internal(e.to_string())))?
        .map(Json)
        .map_err(ApiError)
}

async fn status(State(c): State<Arc<Controller>>) -> Json<Status> {
    Json(c.status())
}

async fn start_session(State(c): State<Arc<Controller>>, b: Result<Json<StartSession>, JsonRejection>) -> ApiResult {
    let req = body(b)?;
    blocking(move || c.start_session(req)).await
}

async fn stop_session(State(c): State<Arc<Controller>>) -> ApiResult {
    blocking(move || c.stop_session()).await
}

async fn set_params(State(c): State<Arc<Controller>>, b: Result<Json<ParamsUpdate>, JsonRejection>) -> ApiResult {
    Ok(Json(c.set_params(body(b)?)?))
}

async fn start_online(State(c): State<Arc<Controller>>, b: Result<Json<StartOnline>, JsonRejection>) -> ApiResult {
    let req = body(b)?;
    blocking(move || c.start_online(req)).await
}

async fn reaction_test(State(c): State<Arc<Controller>>, b: Result<Json<ReactionTest>, JsonRejection>) -> ApiResult {
    let req = body(b)?;
    blocking(move || c.reaction_test(req)).await
}

async fn press(State(c): State<Arc<Controller>>, b: Result<Json<Press>, JsonRejection>) -> ApiResult {
    Ok(Json(c.press(body(b)?)?))
}

async fn stream(State(c): State<Arc<Controller>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| feed(c, socket))
}

async fn feed(c: Arc<Controller>, socket: WebSocket) {
    let client = c.hub.subscribe(c.hello());
    let (mut tx, mut rx) = socket.split();
    loop {
        tokio::select! {
            next = client.next() => {
                let Some(env) = next else { break };
                let text = serde_json::to_string(&env).expect("messages serialize");
                if tx.send(WsMessage::Text(text.into())).await.is_err() {
                    break;
                }
            }
            incoming = rx.next() => match incoming {
                None | Some(Err(_)) | Some(Ok(WsMessage::Close(_))) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    c.hub.unsubscribe(client.id);
}

pub fn router(controller: Arc<Controller>) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/session/start", post(start_session))
        .route("/session/stop", post(stop_session))
        .route("/params", post(set_params))
        .route("/online/start", post(start_online))
        .route("/reaction_test", post(reaction_test))
        .route("/reaction_test/press", post(press))
        .route("/stream", get(stream))
        .with_state(controller)
}

/// Serves until `shutdown` resolves, then stops any running session so a
/// recording in progress is written out.
pub async fn serve(
    controller: Arc<Controller>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(controller.clone())).with_graceful_shutdown(shutdown).await?;
    let _ = tokio::task::spawn_blocking(move || controller.stop_session()).await;
    Ok(())
}
