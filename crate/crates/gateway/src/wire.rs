//! JSON messages exchanged on `/train`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tamer_core::envsim::Frame;
use tamer_core::session::StepEvent;

use crate::GatewayError;

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame(FrameMessage),
    Telemetry(Telemetry),
    Status { state: RunState },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMessage {
    pub step: u64,
    pub t: f64,
    pub width: usize,
    pub height: usize,
    /// Base64 of the row-major 8-bit grayscale frame.
    pub pixels: String,
    pub score: f64,
    pub episode: u64,
    pub q_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub feedback_count: u64,
    pub update_count: u64,
    pub mean_recent_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Paused,
    Done,
}

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Feedback { h: f64 },
    Control { cmd: ControlCommand },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCommand {
    Start,
    Pause,
    Reset,
}

impl ClientMessage {
    /// Parses a text frame, rejecting non-finite feedback.
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let msg: ClientMessage =
            serde_json::from_str(text).map_err(|e| GatewayError::Malformed(e.to_string()))?;
        if let ClientMessage::Feedback { h } = msg {
            if !h.is_finite() {
                return Err(GatewayError::Malformed(
                    "feedback value must be finite".into(),
                ));
            }
        }
        Ok(msg)
    }
}

pub fn encode_pixels(frame: &Frame) -> String {
    STANDARD.encode(frame.to_gray8())
}

pub fn decode_pixels(msg: &FrameMessage) -> Result<Frame, GatewayError> {
    let bytes = STANDARD
        .decode(&msg.pixels)
        .map_err(|e| GatewayError::Malformed(format!("pixels: {e}")))?;
    if bytes.len() != msg.width * msg.height {
        return Err(GatewayError::Malformed(format!(
            "pixels decode to {} bytes, expected {}x{}",
            bytes.len(),
            msg.width,
            msg.height
        )));
    }
    Frame::from_gray8(msg.height, msg.width, &bytes).map_err(GatewayError::Core)
}

impl FrameMessage {
    pub fn from_event(ev: &StepEvent) -> Self {
        Self {
            step: ev.step,
            t: ev.t,
            width: ev.frame.width,
            height: ev.frame.height,
            pixels: encode_pixels(&ev.frame),
            score: ev.episode_score,
            episode: ev.episode,
            q_values: ev.q_values.clone(),
        }
    }
}

impl Telemetry {
    pub fn from_event(ev: &StepEvent) -> Self {
        Self {
            feedback_count: ev.feedback_count,
            update_count: ev.update_count,
            mean_recent_score: ev.mean_recent_score,
        }
    }
}
