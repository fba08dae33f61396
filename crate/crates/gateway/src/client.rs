//! Headless wire-protocol client, for tests and scripted trainers.

use futures::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use crate::wire::{ClientMessage, ControlCommand, ServerMessage};
use crate::GatewayError;

#[derive(Debug)]
pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl Client {
    pub async fn connect(url: &str) -> Result<Self, GatewayError> {
        let (ws, _) = tokio_tungstenite::connect_async(url)
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self { ws })
    }

    pub async fn send(&mut self, msg: &ClientMessage) -> Result<(), GatewayError> {
        let text = serde_json::to_string(msg).expect("client messages serialize");
        self.send_raw(&text).await
    }

    /// Sends text as-is; useful for exercising malformed input.
    pub async fn send_raw(&mut self, text: &str) -> Result<(), GatewayError> {
        self.ws
            .send(Message::Text(text.into()))
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))
    }

    pub async fn feedback(&mut self, h: f64) -> Result<(), GatewayError> {
        self.send(&ClientMessage::Feedback { h }).await
    }

    pub async fn control(&mut self, cmd: ControlCommand) -> Result<(), GatewayError> {
        self.send(&ClientMessage::Control { cmd }).await
    }

    /// Next server message, or `None` once the connection has closed.
    pub async fn next(&mut self) -> Result<Option<ServerMessage>, GatewayError> {
        while let Some(msg) = self.ws.next().await {
            match msg.map_err(|e| GatewayError::Transport(e.to_string()))? {
                Message::Text(t) => {
                    let m = serde_json::from_str(t.as_str())
                        .map_err(|e| GatewayError::Malformed(e.to_string()))?;
                    return Ok(Some(m));
                }
                Message::Close(_) => return Ok(None),
                _ => {}
            }
        }
        Ok(None)
    }

    pub async fn close(mut self) -> Result<(), GatewayError> {
        self.ws
            .close(None)
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))
    }
}
