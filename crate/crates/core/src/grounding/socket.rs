//! Newline-delimited JSON over TCP:
//! `{"image_path", "prompt"} -> {"text"}` and `{"text"} -> {"embedding"}`.
//! Failures come back as `{"error"}`.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{GroundingError, MllmClient, TextEncoder};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Request {
    Ask { image_path: String, prompt: String },
    Embed { text: String },
}

#[derive(Serialize, Deserialize, Default)]
struct Response {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn transport(e: impl std::fmt::Display) -> GroundingError {
    GroundingError::Transport(e.to_string())
}

fn roundtrip(addr: &str, timeout: Duration, req: &Request) -> Result<Response, GroundingError> {
    let sock = addr
        .to_socket_addrs()
        .map_err(transport)?
        .next()
        .ok_or_else(|| transport(format!("cannot resolve {addr}")))?;
    let mut stream = TcpStream::connect_timeout(&sock, timeout).map_err(transport)?;
    stream.set_read_timeout(Some(timeout)).map_err(transport)?;
    stream.set_write_timeout(Some(timeout)).map_err(transport)?;
    let mut line = serde_json::to_vec(req)?;
    line.push(b'\n');
    stream.write_all(&line).map_err(transport)?;
    let mut reply = String::new();
    BufReader::new(&stream).read_line(&mut reply).map_err(transport)?;
    if reply.trim().is_empty() {
        return Err(transport("connection closed without a reply"));
    }
    let resp: Response = serde_json::from_str(&reply)?;
    if let Some(e) = resp.error {
        return Err(GroundingError::Grounding(format!("server: {e}")));
    }
    Ok(resp)
}

#[derive(Clone, Debug)]
pub struct SocketMllm {
    pub addr: String,
    pub timeout: Duration,
}

impl SocketMllm {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            timeout: Duration::from_secs(60),
        }
    }
}

impl MllmClient for SocketMllm {
    fn ask(&self, image: &Path, prompt: &str) -> Result<String, GroundingError> {
        let req = Request::Ask {
            image_path: image.to_string_lossy().into_owned(),
            prompt: prompt.to_string(),
        };
        roundtrip(&self.addr, self.timeout, &req)?
            .text
            .ok_or_else(|| GroundingError::Grounding("reply has no text".into()))
    }
}

#[derive(Clone, Debug)]
pub struct SocketEncoder {
    pub addr: String,
    pub timeout: Duration,
    /// Reported as the encoder id; defaults to `socket:<addr>`.
    pub name: String,
}

impl SocketEncoder {
    pub fn new(addr: impl Into<String>) -> Self {
        let addr = addr.into();
        Self {
            name: format!("socket:{addr}"),
            addr,
            timeout: Duration::from_secs(60),
        }
    }
}

impl TextEncoder for SocketEncoder {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, GroundingError> {
        let req = Request::Embed { text: text.to_string() };
        roundtrip(&self.addr, self.timeout, &req)?
            .embedding
            .ok_or_else(|| GroundingError::Grounding("reply has no embedding".into()))
    }
}

/// A running server; stops when dropped.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn handle(stream: TcpStream, mllm: &dyn MllmClient, encoder: &dyn TextEncoder) -> std::io::Result<()> {
    let mut out = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<Request>(&line) {
            Ok(Request::Ask { image_path, prompt }) => match mllm.ask(Path::new(&image_path), &prompt) {
                Ok(text) => Response {
                    text: Some(text),
                    ..Default::default()
                },
                Err(e) => Response {
                    error: Some(e.to_string()),
                    ..Default::default()
                },
            },
            Ok(Request::Embed { text }) => match encoder.embed(&text) {
                Ok(v) => Response {
                    embedding: Some(v),
                    ..Default::default()
                },
                Err(e) => Response {
                    error: Some(e.to_string()),
                    ..Default::default()
                },
            },
            Err(e) => Response {
                error: Some(format!("bad request: {e}")),
                ..Default::default()
            },
        };
        let mut bytes = serde_json::to_vec(&resp)?;
        bytes.push(b'\n');
        out.write_all(&bytes)?;
    }
    Ok(())
}

/// Serves `mllm` and `encoder` on `listener`, one connection at a time.
pub fn serve<M, E>(listener: TcpListener, mllm: M, encoder: E) -> std::io::Result<ServerHandle>
where
    M: MllmClient + Send + 'static,
    E: TextEncoder + Send + 'static,
{
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            if let Ok(s) = conn {
                if let Err(e) = handle(s, &mllm, &encoder) {
                    log::debug!("connection error: {e}");
                }
            }
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}
