//! Live-training gateway: a WebSocket endpoint at `/train` that streams the
//! agent's frames and telemetry and feeds trainer keypresses into a human
//! session's feedback queue.
//!
//! The first connection is the trainer; later ones only watch. Feedback is
//! timestamped by the server on arrival, never by the client.

pub mod client;
pub mod server;
pub mod wire;

pub use client::Client;
pub use server::{serve, Gateway, GatewayStats, ServeOptions};
pub use wire::{ClientMessage, ControlCommand, FrameMessage, RunState, ServerMessage, Telemetry};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("the gateway needs a session with a human trainer")]
    NotHuman,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] tamer_core::Error),
    #[error("internal: {0}")]
    Internal(String),
}
