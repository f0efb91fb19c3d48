//! TCP transport. The server only listens; every connection is opened by a
//! client.

use std::io;
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{read_frame, write_frame, Frame, Request, Response, WireError};
use super::{AggregationOutcome, Coordinator, OrchestratorError};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("server unreachable after {attempts} attempts: {last}")]
    Unreachable { attempts: u32, last: String },
    #[error("protocol: {0}")]
    Protocol(#[from] WireError),
}

/// Client side of the request/response protocol.
pub trait Transport {
    fn call(&mut self, req: &Request) -> Result<Response, TransportError>;
}

/// Exponential backoff: `min(cap, base · 2^attempt)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub cap: Duration,
    pub max_attempts: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base: Duration::from_millis(100),
            cap: Duration::from_secs(5),
            max_attempts: 10,
        }
    }
}

impl Backoff {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base.saturating_mul(factor).min(self.cap)
    }
}

/// Persistent client connection, re-established with backoff on failure.
#[derive(Debug)]
pub struct TcpTransport {
    endpoint: String,
    backoff: Backoff,
    stream: Option<TcpStream>,
    bytes_sent: u64,
}

impl TcpTransport {
    pub fn new(endpoint: impl Into<String>, backoff: Backoff) -> Self {
        Self {
            endpoint: endpoint.into(),
            backoff,
            stream: None,
            bytes_sent: 0,
        }
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    fn exchange(&mut self, frame: &Frame) -> Result<Frame, WireError> {
        if self.stream.is_none() {
            let addr = self
                .endpoint
                .to_socket_addrs()?
                .next()
                .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "endpoint resolves to nothing"))?;
            let s = TcpStream::connect_timeout(&addr, Duration::from_secs(5))?;
            s.set_nodelay(true)?;
            self.stream = Some(s);
        }
        let s = self.stream.as_mut().expect("connected");
        self.bytes_sent += write_frame(s, frame)? as u64;
        read_frame(s)
    }
}

impl Transport for TcpTransport {
    fn call(&mut self, req: &Request) -> Result<Response, TransportError> {
        let frame = req.to_frame();
        let mut attempt = 0;
        loop {
            match self.exchange(&frame) {
                Ok(reply) => return Ok(Response::from_frame(&reply)?),
                Err(WireError::Io(e)) => {
                    self.stream = None;
                    attempt += 1;
                    if attempt >= self.backoff.max_attempts {
                        return Err(TransportError::Unreachable {
                            attempts: attempt,
                            last: e.to_string(),
                        });
                    }
                    let wait = self.backoff.delay(attempt - 1);
                    ::log::debug!("{} unreachable ({e}); retry {attempt} in {wait:?}", self.endpoint);
                    thread::sleep(wait);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

enum Command {
    Request(Frame, Sender<Frame>),
    Install(AggregationOutcome),
}

#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    /// Deadline check interval.
    pub tick: Duration,
    /// How long to keep answering after the last round closed, so clients
    /// learn that the run is over.
    pub linger: Duration,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            tick: Duration::from_millis(20),
            linger: Duration::from_millis(500),
        }
    }
}

fn connection(stream: TcpStream, commands: Sender<Command>) {
    let mut reader = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    };
    let mut writer = stream;
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(WireError::Io(_)) => return,
            Err(e) => {
                // Unparseable payload: the frame boundary is still intact.
                let reject = Frame::new(super::MsgType::Reject)
                    .with("round", 0)
                    .with("version", 0)
                    .with("code", "malformed")
                    .with("reason", e.to_string());
                if write_frame(&mut writer, &reject).is_err() {
                    return;
                }
                continue;
            }
        };
        let (tx, rx) = mpsc::channel();
        if commands.send(Command::Request(frame, tx)).is_err() {
            return;
        }
        match rx.recv() {
            Ok(reply) => {
                if write_frame(&mut writer, &reply).is_err() {
                    return;
                }
            }
            Err(_) => return,
        }
    }
}

/// Runs the server until every configured round is closed (plus the linger
/// period) or `stop` is raised, and hands the coordinator back.
///
/// Connection threads only parse frames; all state changes happen on the
/// calling thread, in arrival order. Aggregation runs on a worker thread and
/// comes back as a single install command.
pub fn serve(mut coord: Coordinator, listener: TcpListener, opts: ServeOptions, stop: Arc<AtomicBool>) -> Result<Coordinator, OrchestratorError> {
    let (tx, rx) = mpsc::channel::<Command>();
    let streams: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
    listener.set_nonblocking(true)?;
    let accept_stop = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let tx = tx.clone();
        let streams = streams.clone();
        let accept_stop = accept_stop.clone();
        thread::spawn(move || {
            while !accept_stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((s, _)) => {
                        let _ = s.set_nonblocking(false);
                        let _ = s.set_nodelay(true);
                        if let Ok(clone) = s.try_clone() {
                            streams.lock().expect("stream list").push(clone);
                        }
                        let tx = tx.clone();
                        thread::spawn(move || connection(s, tx));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(e) => {
                        ::log::warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        })
    };

    let mut finished_at: Option<Instant> = None;
    let result = loop {
        if stop.load(Ordering::SeqCst) {
            break Ok(());
        }
        match rx.recv_timeout(opts.tick) {
            Ok(Command::Request(frame, reply)) => {
                let _ = reply.send(coord.handle_frame(&frame));
            }
            Ok(Command::Install(outcome)) => {
                if let Err(e) = coord.install(outcome) {
                    break Err(e);
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break Ok(()),
        }
        coord.tick();
        if let Some(job) = coord.begin_aggregation() {
            let tx = tx.clone();
            thread::spawn(move || {
                let _ = tx.send(Command::Install(job.run()));
            });
        }
        if coord.is_finished() {
            let t = *finished_at.get_or_insert_with(Instant::now);
            if t.elapsed() >= opts.linger {
                break Ok(());
            }
        }
    };
    accept_stop.store(true, Ordering::SeqCst);
    let _ = acceptor.join();
    for s in streams.lock().expect("stream list").drain(..) {
        let _ = s.shutdown(Shutdown::Both);
    }
    result.map(|()| coord)
}
