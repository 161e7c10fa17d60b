//! Framed batch delivery: a 4-byte big-endian length, the serialized batch,
//! and a single reply byte from the server.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use crate::model::{serialize_batch, SampleBatch};

pub const ACK: u8 = 0x06;
pub const NAK: u8 = 0x15;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SendError {
    #[error("connect failed: {0}")]
    ConnectFailed(String),
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("server rejected the batch")]
    Nak,
    #[error("connection error: {0}")]
    Io(String),
}

impl From<io::Error> for SendError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => SendError::Timeout,
            _ => SendError::Io(e.to_string()),
        }
    }
}

pub fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Anything that can deliver one framed payload and report the reply.
pub trait Transport {
    fn send(&mut self, payload: &[u8]) -> Result<(), SendError>;
}

/// TCP transport that keeps its connection open across frames and
/// reconnects after any failure.
pub struct TcpTransport {
    addr: String,
    timeout: Duration,
    stream: Option<TcpStream>,
}

impl TcpTransport {
    pub fn new(addr: impl Into<String>, timeout: Duration) -> Self {
        TcpTransport { addr: addr.into(), timeout, stream: None }
    }

    fn connect(&self) -> Result<TcpStream, SendError> {
        let addrs: Vec<_> = self
            .addr
            .to_socket_addrs()
            .map_err(|e| SendError::ConnectFailed(format!("{}: {e}", self.addr)))?
            .collect();
        let mut last = SendError::ConnectFailed(format!("{}: no address", self.addr));
        for a in addrs {
            match TcpStream::connect_timeout(&a, self.timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.timeout)).map_err(SendError::from)?;
                    s.set_write_timeout(Some(self.timeout)).map_err(SendError::from)?;
                    s.set_nodelay(true).ok();
                    return Ok(s);
                }
                Err(e) => last = SendError::ConnectFailed(format!("{a}: {e}")),
            }
        }
        Err(last)
    }

    fn exchange(stream: &mut TcpStream, payload: &[u8]) -> Result<(), SendError> {
        stream.write_all(&frame(payload))?;
        let mut reply = [0u8; 1];
        stream.read_exact(&mut reply)?;
        match reply[0] {
            ACK => Ok(()),
            NAK => Err(SendError::Nak),
            other => Err(SendError::Io(format!("unexpected reply byte {other:#04x}"))),
        }
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, payload: &[u8]) -> Result<(), SendError> {
        // A kept-alive connection may have been closed by the server since
        // the last frame; retry once on a fresh connection in that case.
        if let Some(mut s) = self.stream.take() {
            match Self::exchange(&mut s, payload) {
                Ok(()) => {
                    self.stream = Some(s);
                    return Ok(());
                }
                Err(SendError::Nak) => {
                    self.stream = Some(s);
                    return Err(SendError::Nak);
                }
                Err(_) => {}
            }
        }
        let mut s = self.connect()?;
        let r = Self::exchange(&mut s, payload);
        if matches!(r, Ok(()) | Err(SendError::Nak)) {
            self.stream = Some(s);
        }
        r
    }
}

/// Deliver one batch on a fresh connection; success only on ACK.
pub fn send_batch(addr: &str, batch: &SampleBatch, timeout: Duration) -> Result<(), SendError> {
    TcpTransport::new(addr, timeout).send(&serialize_batch(batch))
}

/// What a scripted link does with one send attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkEvent {
    Up,
    /// The connection cannot be opened.
    Down,
    /// The frame reaches the server but the reply is lost.
    DropReply,
}

/// Wraps a transport with a scripted outage schedule, indexed by attempt.
pub struct ScriptedLink<T> {
    inner: T,
    schedule: Box<dyn FnMut(u64) -> LinkEvent + Send>,
    attempts: u64,
}

impl<T: Transport> ScriptedLink<T> {
    pub fn new(inner: T, schedule: impl FnMut(u64) -> LinkEvent + Send + 'static) -> Self {
        ScriptedLink { inner, schedule: Box::new(schedule), attempts: 0 }
    }

    pub fn attempts(&self) -> u64 {
        self.attempts
    }

    pub fn inner_mut(&mut self) -> &mut T {
        &mut self.inner
    }
}

impl<T: Transport> Transport for ScriptedLink<T> {
    fn send(&mut self, payload: &[u8]) -> Result<(), SendError> {
        let event = (self.schedule)(self.attempts);
        self.attempts += 1;
        match event {
            LinkEvent::Up => self.inner.send(payload),
            LinkEvent::Down => Err(SendError::ConnectFailed("link down".into())),
            LinkEvent::DropReply => {
                self.inner.send(payload)?;
                Err(SendError::Timeout)
            }
        }
    }
}
