//! Length-prefixed wire protocol for out-of-process denoisers.
//!
//! Frame: `"TXDN"`, one type byte (0 request, 1 response, 2 error), a `u64` LE
//! payload length, then the payload.
//!
//! * request: `f64` LE sigma, `u8` condition flag, and when set `u32` LE height,
//!   `u32` LE width, `u8` class count and `height * width` label bytes; then the
//!   state as a TXF1 block.
//! * response: the direction as a TXF1 block.
//! * error: a UTF-8 message.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::grid::{decode_txf1, encode_txf1, Grid, LabelMap};

use super::{Denoiser, DiffusionError};

pub const BRIDGE_MAGIC: &[u8; 4] = b"TXDN";
pub const MSG_REQUEST: u8 = 0;
pub const MSG_RESPONSE: u8 = 1;
pub const MSG_ERROR: u8 = 2;
const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("cannot connect to bridge endpoint: {0}")]
    Connect(io::Error),
    #[error("bridge transport failed: {0}")]
    Io(#[from] io::Error),
    #[error("bridge endpoint timed out")]
    Timeout,
    #[error("malformed bridge frame: {0}")]
    Malformed(String),
    #[error("bridge returned shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("bridge endpoint reported: {0}")]
    Remote(String),
    #[error("bridge connection is closed after an earlier failure")]
    Poisoned,
}

fn io_err(e: io::Error) -> BridgeError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => BridgeError::Timeout,
        _ => BridgeError::Io(e),
    }
}

pub fn write_frame(w: &mut impl Write, kind: u8, payload: &[u8]) -> Result<(), BridgeError> {
    let mut head = Vec::with_capacity(13);
    head.extend_from_slice(BRIDGE_MAGIC);
    head.push(kind);
    head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    w.write_all(&head).map_err(io_err)?;
    w.write_all(payload).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame(r: &mut impl Read) -> Result<Option<(u8, Vec<u8>)>, BridgeError> {
    let mut head = [0u8; 13];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(BridgeError::Malformed(
                    "stream ended inside a frame header".into(),
                ))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_err(e)),
        }
    }
    if &head[..4] != BRIDGE_MAGIC {
        return Err(BridgeError::Malformed("bad magic".into()));
    }
    let kind = head[4];
    if kind > MSG_ERROR {
        return Err(BridgeError::Malformed(format!(
            "unknown message type {kind}"
        )));
    }
    let len = u64::from_le_bytes(head[5..13].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(BridgeError::Malformed(format!(
            "payload of {len} bytes is too large"
        )));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => {
            BridgeError::Malformed("stream ended inside a payload".into())
        }
        _ => io_err(e),
    })?;
    Ok(Some((kind, payload)))
}

pub fn encode_request(z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&sigma.to_le_bytes());
    match cond {
        None => out.push(0),
        Some(c) => {
            out.push(1);
            out.extend_from_slice(&(c.height() as u32).to_le_bytes());
            out.extend_from_slice(&(c.width() as u32).to_le_bytes());
            out.push(c.num_classes());
            out.extend_from_slice(c.labels());
        }
    }
    out.extend_from_slice(&encode_txf1(z));
    out
}

pub fn decode_request(payload: &[u8]) -> Result<(Grid, Option<LabelMap>, f64), BridgeError> {
    let bad = |m: &str| BridgeError::Malformed(m.to_string());
    if payload.len() < 9 {
        return Err(bad("request too short"));
    }
    let sigma = f64::from_le_bytes(payload[..8].try_into().unwrap());
    let mut at = 9;
    let cond = match payload[8] {
        0 => None,
        1 => {
            if payload.len() < at + 9 {
                return Err(bad("truncated condition header"));
            }
            let h = u32::from_le_bytes(payload[at..at + 4].try_into().unwrap()) as usize;
            let w = u32::from_le_bytes(payload[at + 4..at + 8].try_into().unwrap()) as usize;
            let k = payload[at + 8];
            at += 9;
            let n = h
                .checked_mul(w)
                .ok_or_else(|| bad("condition size overflows"))?;
            if payload.len() < at + n {
                return Err(bad("truncated condition labels"));
            }
            let labels = LabelMap::new(h, w, k, payload[at..at + n].to_vec())
                .map_err(|e| BridgeError::Malformed(e.to_string()))?;
            at += n;
            Some(labels)
        }
        f => return Err(BridgeError::Malformed(format!("bad condition flag {f}"))),
    };
    let (z, used) =
        decode_txf1(&payload[at..]).map_err(|e| BridgeError::Malformed(e.to_string()))?;
    if at + used != payload.len() {
        return Err(bad("trailing bytes after state"));
    }
    Ok((z, cond, sigma))
}

/// A bidirectional byte stream.
pub trait Transport: Read + Write + Send {}
impl<T: Read + Write + Send> Transport for T {}

/// A child process's stdin/stdout as one stream.
pub struct ChildStream {
    stdin: ChildStdin,
    stdout: ChildStdout,
}

impl Read for ChildStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.stdout.read(buf)
    }
}

impl Write for ChildStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.stdin.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.stdin.flush()
    }
}

struct Connection {
    stream: Box<dyn Transport>,
    broken: bool,
}

/// Denoiser served by a remote endpoint. Each connection handles one request at
/// a time; concurrent evaluations spread over the pool.
pub struct BridgeDenoiser {
    pool: Vec<Mutex<Connection>>,
    next: AtomicUsize,
    children: Vec<Child>,
}

impl BridgeDenoiser {
    pub fn from_streams(streams: Vec<Box<dyn Transport>>) -> Self {
        Self {
            pool: streams
                .into_iter()
                .map(|stream| {
                    Mutex::new(Connection {
                        stream,
                        broken: false,
                    })
                })
                .collect(),
            next: AtomicUsize::new(0),
            children: Vec::new(),
        }
    }

    /// Opens `connections` TCP connections with the given read/write timeout.
    pub fn connect_tcp(
        addr: impl ToSocketAddrs + Clone,
        connections: usize,
        timeout: Duration,
    ) -> Result<Self, BridgeError> {
        let mut streams: Vec<Box<dyn Transport>> = Vec::new();
        for _ in 0..connections.max(1) {
            let s = TcpStream::connect(addr.clone()).map_err(BridgeError::Connect)?;
            s.set_read_timeout(Some(timeout))
                .map_err(BridgeError::Connect)?;
            s.set_write_timeout(Some(timeout))
                .map_err(BridgeError::Connect)?;
            s.set_nodelay(true).map_err(BridgeError::Connect)?;
            streams.push(Box::new(s));
        }
        Ok(Self::from_streams(streams))
    }

    /// Spawns `program args...` and speaks the protocol over its stdio.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, BridgeError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(BridgeError::Connect)?;
        let stream = ChildStream {
            stdin: child.stdin.take().expect("piped stdin"),
            stdout: child.stdout.take().expect("piped stdout"),
        };
        let mut me = Self::from_streams(vec![Box::new(stream)]);
        me.children.push(child);
        Ok(me)
    }

    fn round_trip(
        &self,
        z: &Grid,
        cond: Option<&LabelMap>,
        sigma: f64,
    ) -> Result<Grid, BridgeError> {
        if self.pool.is_empty() {
            return Err(BridgeError::Poisoned);
        }
        let slot = self.next.fetch_add(1, Ordering::Relaxed) % self.pool.len();
        let mut conn = self.pool[slot].lock().unwrap_or_else(|p| p.into_inner());
        if conn.broken {
            return Err(BridgeError::Poisoned);
        }
        let result = (|| {
            write_frame(
                &mut conn.stream,
                MSG_REQUEST,
                &encode_request(z, cond, sigma),
            )?;
            match read_frame(&mut conn.stream)? {
                None => Err(BridgeError::Io(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "endpoint closed",
                ))),
                Some((MSG_RESPONSE, payload)) => {
                    let (eps, used) =
                        decode_txf1(&payload).map_err(|e| BridgeError::Malformed(e.to_string()))?;
                    if used != payload.len() {
                        return Err(BridgeError::Malformed(
                            "trailing bytes after response".into(),
                        ));
                    }
                    Ok(eps)
                }
                Some((MSG_ERROR, payload)) => Err(BridgeError::Remote(
                    String::from_utf8_lossy(&payload).into_owned(),
                )),
                Some((kind, _)) => Err(BridgeError::Malformed(format!(
                    "unexpected message type {kind}"
                ))),
            }
        })();
        match result {
            Ok(eps) => {
                if eps.shape() != z.shape() {
                    return Err(BridgeError::ShapeMismatch {
                        expected: z.shape(),
                        got: eps.shape(),
                    });
                }
                Ok(eps)
            }
            // A remote error leaves the stream aligned; transport errors do not.
            Err(e @ BridgeError::Remote(_)) => Err(e),
            Err(e) => {
                conn.broken = true;
                Err(e)
            }
        }
    }
}

impl Drop for BridgeDenoiser {
    fn drop(&mut self) {
        self.pool.clear();
        for child in &mut self.children {
            let _ = child.wait();
        }
    }
}

impl Denoiser for BridgeDenoiser {
    fn eval(&self, z: &Grid, cond: Option<&LabelMap>, sigma: f64) -> super::Result<Grid> {
        self.round_trip(z, cond, sigma)
            .map_err(DiffusionError::Bridge)
    }
}

/// Answers requests on `stream` until the peer closes it. Denoiser failures are
/// reported as error frames and the session continues.
pub fn serve_bridge<S: Read + Write>(
    mut stream: S,
    denoiser: &dyn Denoiser,
) -> Result<(), BridgeError> {
    while let Some((kind, payload)) = read_frame(&mut stream)? {
        if kind != MSG_REQUEST {
            write_frame(
                &mut stream,
                MSG_ERROR,
                format!("expected a request, got type {kind}").as_bytes(),
            )?;
            continue;
        }
        let reply = decode_request(&payload)
            .map_err(|e| e.to_string())
            .and_then(|(z, cond, sigma)| {
                denoiser
                    .eval(&z, cond.as_ref(), sigma)
                    .map_err(|e| e.to_string())
            });
        match reply {
            Ok(eps) => write_frame(&mut stream, MSG_RESPONSE, &encode_txf1(&eps))?,
            Err(msg) => write_frame(&mut stream, MSG_ERROR, msg.as_bytes())?,
        }
    }
    Ok(())
}

/// Serves every accepted connection on its own thread. Runs until the listener fails.
pub fn serve_tcp(listener: TcpListener, denoiser: Arc<dyn Denoiser>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let d = Arc::clone(&denoiser);
        std::thread::spawn(move || {
            let _ = stream.set_nodelay(true);
            let _ = serve_bridge(stream, d.as_ref());
        });
    }
    Ok(())
}
