//! Control-channel messages and their framing.
//!
//! A frame is a 4-octet big-endian length followed by exactly that many
//! octets of a UTF-8 JSON object. Every object carries a `"type"` field
//! naming the message.

use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::NodeId;

/// Largest accepted frame payload.
pub const MAX_FRAME_LEN: usize = 1 << 20;
const HEADER_LEN: usize = 4;

const MESSAGE_TYPES: [&str; 6] = [
    "greeting",
    "service_request",
    "service_response",
    "shutdown_request",
    "shutdown_response",
    "resource_report",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("frame length {0} exceeds the {MAX_FRAME_LEN} byte bound")]
    FrameTooLarge(usize),
    #[error("frame has no \"type\" discriminator")]
    MissingType,
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("invalid message: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    /// The buffer does not yet hold a complete frame; nothing was consumed.
    #[error("incomplete frame, {needed} more bytes needed")]
    NeedMoreData { needed: usize },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceType {
    EndDevice,
    FogDevice,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    #[default]
    Tcp,
    Udp,
    Sctp,
}

/// Identifier of a running service (one container plus its path reservation).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServiceId(pub String);

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Boot-time registration of an end-device or fog-device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Greeting {
    pub node_id: NodeId,
    pub device_type: DeviceType,
    /// CPU cores offered by a fog-device.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_processing: Option<f64>,
    /// Memory bytes offered by a fog-device.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_memory: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
}

impl Greeting {
    pub fn end_device(node_id: NodeId) -> Self {
        Greeting {
            node_id,
            device_type: DeviceType::EndDevice,
            total_processing: None,
            total_memory: None,
            address: None,
        }
    }

    pub fn fog(node_id: NodeId, cores: f64, memory: u64) -> Self {
        Greeting {
            node_id,
            device_type: DeviceType::FogDevice,
            total_processing: Some(cores),
            total_memory: Some(memory),
            address: None,
        }
    }

    pub fn with_address(mut self, address: impl Into<String>) -> Self {
        self.address = Some(address.into());
        self
    }
}

/// A request for a containerized service with guaranteed resources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    /// Chosen by the end-device; echoed in the response.
    pub request_id: String,
    /// The requesting end-device.
    pub node_id: NodeId,
    pub image: String,
    /// Bits per second, reserved in both directions.
    pub bw: u64,
    /// CPU cores, fractional.
    pub processing: f64,
    /// Bytes.
    pub memory: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desired_port: Option<u16>,
    #[serde(default)]
    pub transport: Transport,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum FailureReason {
    /// No fog-device has enough spare CPU and memory.
    NoServicer,
    /// No path with enough spare bandwidth reaches a capable fog-device.
    NoPath,
    /// The desired proxy port is already used on the chosen fog-device.
    PortBusy {
        port: u16,
    },
    NoFreePort,
    /// Configuring switches or the fog-device failed; nothing was kept.
    Enforcement {
        detail: String,
    },
    /// The request itself was not acceptable.
    Rejected {
        detail: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponseStatus {
    Success {
        fog_address: String,
        proxy_port: u16,
        service_id: ServiceId,
    },
    Failure {
        reason: FailureReason,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceResponse {
    pub request_id: String,
    pub status: ResponseStatus,
}

impl ServiceResponse {
    pub fn is_success(&self) -> bool {
        matches!(self.status, ResponseStatus::Success { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShutdownRequest {
    pub service_id: ServiceId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShutdownResult {
    Ok,
    UnknownService,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShutdownResponse {
    pub service_id: ServiceId,
    pub result: ShutdownResult,
}

/// Periodic utilization report from a fog-device agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub fog_id: NodeId,
    pub processor_utilization: f64,
    pub memory_utilization: f64,
    pub timestamp_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Greeting(Greeting),
    ServiceRequest(ServiceRequest),
    ServiceResponse(ServiceResponse),
    ShutdownRequest(ShutdownRequest),
    ShutdownResponse(ShutdownResponse),
    ResourceReport(ResourceReport),
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Greeting(_) => "greeting",
            Message::ServiceRequest(_) => "service_request",
            Message::ServiceResponse(_) => "service_response",
            Message::ShutdownRequest(_) => "shutdown_request",
            Message::ShutdownResponse(_) => "shutdown_response",
            Message::ResourceReport(_) => "resource_report",
        }
    }

    /// Semantic checks beyond what the framing enforces.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let invalid = |s: &str| Err(ProtocolError::Invalid(s.to_string()));
        match self {
            Message::Greeting(g) if g.device_type == DeviceType::FogDevice => {
                match (g.total_processing, g.total_memory) {
                    (Some(p), Some(_)) if p.is_finite() && p >= 0.0 => Ok(()),
                    _ => invalid("fog greeting must carry processing and memory capacity"),
                }
            }
            Message::ServiceRequest(r) => {
                if r.bw == 0 {
                    invalid("bandwidth must be positive")
                } else if !(r.processing.is_finite() && r.processing > 0.0) {
                    invalid("processing must be positive")
                } else if r.memory == 0 {
                    invalid("memory must be positive")
                } else {
                    Ok(())
                }
            }
            Message::ResourceReport(r) => {
                let unit = 0.0..=1.0;
                if unit.contains(&r.processor_utilization) && unit.contains(&r.memory_utilization) {
                    Ok(())
                } else {
                    invalid("utilization must lie within [0, 1]")
                }
            }
            _ => Ok(()),
        }
    }
}

macro_rules! impl_from_message {
    ($($variant:ident),*) => {
        $(impl From<$variant> for Message {
            fn from(m: $variant) -> Self {
                Message::$variant(m)
            }
        })*
    };
}

impl_from_message!(
    Greeting,
    ServiceRequest,
    ServiceResponse,
    ShutdownRequest,
    ShutdownResponse,
    ResourceReport
);

/// Serializes one message into a complete frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    let body = serde_json::to_vec(msg).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if body.len() > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(body.len()));
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Decodes the first frame in `buf`, returning the message and the number of
/// bytes it occupied. Bytes past the declared length are never read.
pub fn decode(buf: &[u8]) -> Result<(Message, usize), DecodeError> {
    if buf.len() < HEADER_LEN {
        return Err(DecodeError::NeedMoreData {
            needed: HEADER_LEN - buf.len(),
        });
    }
    let len = frame_len(buf[..HEADER_LEN].try_into().expect("4 bytes"))?;
    let end = HEADER_LEN + len;
    if buf.len() < end {
        return Err(DecodeError::NeedMoreData {
            needed: end - buf.len(),
        });
    }
    Ok((decode_body(&buf[HEADER_LEN..end])?, end))
}

fn frame_len(header: [u8; 4]) -> Result<usize, ProtocolError> {
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    Ok(len)
}

fn decode_body(body: &[u8]) -> Result<Message, ProtocolError> {
    let value: serde_json::Value = if body.is_empty() {
        return Err(ProtocolError::MissingType);
    } else {
        serde_json::from_slice(body).map_err(|e| ProtocolError::Malformed(e.to_string()))?
    };
    match value.get("type") {
        None => return Err(ProtocolError::MissingType),
        Some(serde_json::Value::String(t)) if !MESSAGE_TYPES.contains(&t.as_str()) => {
            return Err(ProtocolError::UnknownType(t.clone()));
        }
        Some(serde_json::Value::String(_)) => {}
        Some(other) => return Err(ProtocolError::UnknownType(other.to_string())),
    }
    serde_json::from_value(value).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

/// Accumulates bytes from a stream and yields whole messages.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete message, if one is buffered. A protocol error leaves
    /// the offending frame in the buffer; the stream is unusable after it.
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        match decode(&self.buf) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            Err(DecodeError::NeedMoreData { .. }) => Ok(None),
            Err(DecodeError::Protocol(e)) => Err(e),
        }
    }
}

/// Reads one framed message. Returns `Ok(None)` on a clean end of stream
/// before any header byte.
pub fn read_message<R: Read>(reader: &mut R) -> Result<Option<Message>, StreamError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match reader.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = frame_len(header)?;
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    Ok(Some(decode_body(&body)?))
}

pub fn write_message<W: Write>(writer: &mut W, msg: &Message) -> Result<(), StreamError> {
    writer.write_all(&encode(msg)?)?;
    writer.flush()?;
    Ok(())
}
