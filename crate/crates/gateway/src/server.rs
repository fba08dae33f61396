//! The `/train` endpoint and the thread that drives the session.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tamer_core::learner::FeedbackSource;
use tamer_core::model::RewardModel;
use tamer_core::session::{FeedbackQueue, Session, SessionControl, SessionSummary};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, oneshot};
use tracing::{debug, info, warn};

use crate::wire::{
    ClientMessage, ControlCommand, FrameMessage, RunState, ServerMessage, Telemetry,
};
use crate::GatewayError;

const BROADCAST_CAPACITY: usize = 256;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Wait for a `start` command before the first step.
    pub start_paused: bool,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { start_paused: true }
    }
}

/// Counters shared by every connection.
#[derive(Debug, Default)]
pub struct GatewayStats {
    pub malformed: AtomicU64,
    pub ignored_observer_messages: AtomicU64,
    pub feedback_received: AtomicU64,
    pub connections: AtomicU64,
}

struct Shared {
    queue: FeedbackQueue,
    control: SessionControl,
    events: broadcast::Sender<Arc<str>>,
    trainer_taken: AtomicBool,
    done: AtomicBool,
    stats: Arc<GatewayStats>,
}

impl Shared {
    fn status(&self) -> RunState {
        if self.done.load(Ordering::SeqCst) {
            RunState::Done
        } else if self.control.is_paused() {
            RunState::Paused
        } else {
            RunState::Running
        }
    }

    fn broadcast(&self, msg: &ServerMessage) {
        let text: Arc<str> = serde_json::to_string(msg)
            .expect("server messages serialize")
            .into();
        // No receivers is fine: nobody is watching.
        let _ = self.events.send(text);
    }

    fn set_state(&self, cmd: ControlCommand) {
        match cmd {
            ControlCommand::Start => self.control.start(),
            ControlCommand::Pause => self.control.pause(),
            ControlCommand::Reset => self.control.request_reset(),
        }
        self.broadcast(&ServerMessage::Status {
            state: self.status(),
        });
    }
}

/// A running gateway.
pub struct Gateway {
    addr: SocketAddr,
    control: SessionControl,
    stats: Arc<GatewayStats>,
    session: Option<std::thread::JoinHandle<tamer_core::Result<(RewardModel, SessionSummary)>>>,
    server: tokio::task::JoinHandle<()>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("addr", &self.addr)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}/train", self.addr)
    }

    pub fn control(&self) -> &SessionControl {
        &self.control
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    /// Waits for the session to end, then stops the server. The session's
    /// own files (log, params) are written before this returns.
    pub async fn wait(mut self) -> Result<(RewardModel, SessionSummary), GatewayError> {
        let handle = self.session.take().expect("session joined once");
        let result = tokio::task::spawn_blocking(move || handle.join())
            .await
            .map_err(|e| GatewayError::Internal(e.to_string()))?
            .map_err(|_| GatewayError::Internal("session thread panicked".into()))?;
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.server).await;
        Ok(result?)
    }

    /// Stops the session at its next step and waits for it.
    pub async fn stop(self) -> Result<(RewardModel, SessionSummary), GatewayError> {
        self.control.stop();
        self.wait().await
    }
}

/// Starts serving `session` on `listener`. The session must have a human
/// trainer; it runs on its own thread at the configured step rate.
pub async fn serve(
    listener: TcpListener,
    session: Session,
    options: ServeOptions,
) -> Result<Gateway, GatewayError> {
    let queue = session.human_queue().ok_or(GatewayError::NotHuman)?;
    let addr = listener.local_addr()?;
    let control = if options.start_paused {
        SessionControl::paused()
    } else {
        SessionControl::default()
    };
    let (events, _) = broadcast::channel(BROADCAST_CAPACITY);
    let stats = Arc::new(GatewayStats::default());
    let shared = Arc::new(Shared {
        queue,
        control: control.clone(),
        events,
        trainer_taken: AtomicBool::new(false),
        done: AtomicBool::new(false),
        stats: stats.clone(),
    });

    let runner = shared.clone();
    let session = std::thread::Builder::new()
        .name("tamer-session".into())
        .spawn(move || run_session_thread(session, runner))?;

    let app = Router::new()
        .route("/train", get(upgrade))
        .with_state(shared);
    let (shutdown, stop_rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let graceful = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = stop_rx.await;
        });
        if let Err(e) = graceful.await {
            warn!("gateway server error: {e}");
        }
    });
    info!("gateway listening on ws://{addr}/train");
    Ok(Gateway {
        addr,
        control,
        stats,
        session: Some(session),
        server,
        shutdown: Some(shutdown),
    })
}

fn run_session_thread(
    mut session: Session,
    shared: Arc<Shared>,
) -> tamer_core::Result<(RewardModel, SessionSummary)> {
    let control = shared.control.clone();
    let result = session.run_with(&control, |ev| {
        shared.broadcast(&ServerMessage::Frame(FrameMessage::from_event(ev)));
        shared.broadcast(&ServerMessage::Telemetry(Telemetry::from_event(ev)));
    });
    shared.done.store(true, Ordering::SeqCst);
    shared.broadcast(&ServerMessage::Status {
        state: RunState::Done,
    });
    result?;
    session.finish()
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, shared))
}

async fn connection(socket: WebSocket, shared: Arc<Shared>) {
    let id = shared.stats.connections.fetch_add(1, Ordering::SeqCst);
    let is_trainer = shared
        .trainer_taken
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_ok();
    debug!(id, is_trainer, "connection opened");
    let mut events = shared.events.subscribe();
    let (mut sink, mut stream) = socket.split();

    let hello = serde_json::to_string(&ServerMessage::Status {
        state: shared.status(),
    })
    .expect("serializable");
    if sink.send(Message::Text(hello.into())).await.is_err() {
        release(&shared, is_trainer);
        return;
    }

    let forward = tokio::spawn(async move {
        loop {
            match events.recv().await {
                Ok(text) => {
                    if sink
                        .send(Message::Text(text.as_ref().into()))
                        .await
                        .is_err()
                    {
                        break;
                    }
                }
                // A slow client skips frames rather than stalling the session.
                Err(broadcast::error::RecvError::Lagged(n)) => debug!(id, n, "client lagging"),
                Err(broadcast::error::RecvError::Closed) => break,
            }
        }
    });

    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Binary(_) => {
                shared.stats.malformed.fetch_add(1, Ordering::Relaxed);
                warn!(id, "binary message dropped");
                continue;
            }
            _ => continue,
        };
        let parsed = match ClientMessage::parse(text.as_str()) {
            Ok(m) => m,
            Err(e) => {
                shared.stats.malformed.fetch_add(1, Ordering::Relaxed);
                warn!(id, "dropped message: {e}");
                continue;
            }
        };
        if !is_trainer {
            shared
                .stats
                .ignored_observer_messages
                .fetch_add(1, Ordering::Relaxed);
            continue;
        }
        match parsed {
            ClientMessage::Feedback { h } => {
                if shared.queue.submit(h, FeedbackSource::Human).is_some() {
                    shared
                        .stats
                        .feedback_received
                        .fetch_add(1, Ordering::Relaxed);
                }
            }
            ClientMessage::Control { cmd } => shared.set_state(cmd),
        }
    }
    forward.abort();
    release(&shared, is_trainer);
    debug!(id, "connection closed");
}

fn release(shared: &Shared, is_trainer: bool) {
    if is_trainer {
        // Nobody is judging the agent any more.
        shared.control.pause();
        shared.trainer_taken.store(false, Ordering::SeqCst);
        if !shared.done.load(Ordering::SeqCst) {
            shared.broadcast(&ServerMessage::Status {
                state: RunState::Paused,
            });
        }
    }
}
