//! TCP transport: one connection per worker, frames as defined in
//! [`super::wire`].

use std::io::Write;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};

use crate::error::{Error, Result};

use super::head::{HeadNode, HeadSummary};
use super::wire::{decode_message, encode_message, read_frame};
use super::Endpoint;

pub struct TcpEndpoint {
    stream: TcpStream,
}

impl TcpEndpoint {
    pub fn new(stream: TcpStream) -> Self {
        let _ = stream.set_nodelay(true);
        Self { stream }
    }

    /// Connects, retrying until `timeout` elapses so workers may start
    /// before the head is listening.
    pub fn connect(addr: impl ToSocketAddrs + Clone, timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        loop {
            match TcpStream::connect(addr.clone()) {
                Ok(s) => return Ok(Self::new(s)),
                Err(e) if Instant::now() < deadline => {
                    debug!("connect failed ({e}); retrying");
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(Error::Transport(format!("connect failed: {e}"))),
            }
        }
    }
}

impl Endpoint for TcpEndpoint {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.stream
            .write_all(frame)
            .map_err(|e| Error::Transport(format!("send failed: {e}")))
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        read_frame(&mut self.stream)?
            .ok_or_else(|| Error::Transport("connection closed by peer".into()))
    }
}

enum Event {
    Frame(usize, Vec<u8>),
    Closed(usize),
    Failed(usize, Error),
}

/// Accepts `workers` connections on `listener` and runs the head until the
/// step budget is spent and every worker has hung up.
pub fn serve_head(
    listener: &TcpListener,
    head: &mut HeadNode,
    workers: usize,
) -> Result<HeadSummary> {
    if workers == 0 {
        return Err(Error::Config(
            "workers: at least one worker is required".into(),
        ));
    }
    let started = Instant::now();
    let (tx, rx) = mpsc::channel();
    let mut writers = Vec::with_capacity(workers);
    let mut readers = Vec::with_capacity(workers);
    for conn in 0..workers {
        let (stream, peer) = listener
            .accept()
            .map_err(|e| Error::Transport(format!("accept failed: {e}")))?;
        debug!("connection {conn} from {peer}");
        let _ = stream.set_nodelay(true);
        let mut reader = stream
            .try_clone()
            .map_err(|e| Error::Transport(format!("cannot clone socket: {e}")))?;
        writers.push(stream);
        let tx = tx.clone();
        readers.push(thread::spawn(move || loop {
            match read_frame(&mut reader) {
                Ok(Some(frame)) => {
                    if tx.send(Event::Frame(conn, frame)).is_err() {
                        return;
                    }
                }
                Ok(None) => {
                    let _ = tx.send(Event::Closed(conn));
                    return;
                }
                Err(e) => {
                    let _ = tx.send(Event::Failed(conn, e));
                    return;
                }
            }
        }));
    }
    drop(tx);

    let name = |head: &HeadNode, conn: usize| match head.worker_for_conn(conn) {
        Some(id) => format!("worker {id}"),
        None => format!("connection {conn}"),
    };
    let mut open = workers;
    let result = loop {
        let event = match rx.recv() {
            Ok(e) => e,
            Err(_) => break Err(Error::Run("all transport readers stopped".into())),
        };
        match event {
            Event::Frame(conn, frame) => {
                let now = started.elapsed().as_millis() as u64;
                let outcome = decode_message(&frame)
                    .map_err(|e| Error::Protocol(format!("{}: {e}", name(head, conn))))
                    .and_then(|msg| head.handle(conn, msg, now));
                let replies = match outcome {
                    Ok(r) => r,
                    Err(e) => break Err(e),
                };
                let mut write_err = None;
                for (to, reply) in replies {
                    let sent = encode_message(&reply).and_then(|bytes| {
                        writers[to]
                            .write_all(&bytes)
                            .map_err(|e| Error::Transport(e.to_string()))
                    });
                    if let Err(e) = sent {
                        if head.is_finished() {
                            warn!("{} unreachable during shutdown: {e}", name(head, to));
                        } else {
                            write_err =
                                Some(Error::Run(format!("{} unreachable: {e}", name(head, to))));
                            break;
                        }
                    }
                }
                if let Some(e) = write_err {
                    break Err(e);
                }
            }
            Event::Closed(conn) => {
                if !head.is_finished() {
                    break Err(Error::Run(format!(
                        "{} disconnected before the run finished",
                        name(head, conn)
                    )));
                }
                open -= 1;
                if open == 0 {
                    break Ok(head.summary());
                }
            }
            Event::Failed(conn, e) => {
                break Err(Error::Run(format!("{} failed: {e}", name(head, conn))));
            }
        }
    };
    for w in &writers {
        let _ = w.shutdown(std::net::Shutdown::Both);
    }
    for r in readers {
        let _ = r.join();
    }
    result
}
