//! A local chat-completions server answering with the oracle backend, for
//! exercising the HTTP, record and replay paths without a real model.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};

use crate::agents::Role;
use crate::backends::OracleBackend;
use crate::simulator::Scenario;

struct Shared {
    oracle: OracleBackend,
    requests: AtomicUsize,
    failing: AtomicBool,
    stop: AtomicBool,
}

pub struct MockCompletionsServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

impl MockCompletionsServer {
    /// Binds an ephemeral local port and serves until dropped.
    pub fn start(scenario: Scenario) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", scenario)
    }

    pub fn bind(addr: &str, scenario: Scenario) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            oracle: OracleBackend::new(scenario),
            requests: AtomicUsize::new(0),
            failing: AtomicBool::new(false),
            stop: AtomicBool::new(false),
        });
        let s = shared.clone();
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if s.stop.load(Ordering::SeqCst) {
                    break;
                }
                match stream {
                    Ok(stream) => {
                        if let Err(e) = serve(&s, stream) {
                            log::warn!("mock server connection: {e}");
                        }
                    }
                    Err(e) => log::warn!("mock server accept: {e}"),
                }
            }
        });
        Ok(Self {
            addr,
            shared,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Completion requests received so far.
    pub fn request_count(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    /// When set, every request is answered with HTTP 503.
    pub fn set_failing(&self, failing: bool) {
        self.shared.failing.store(failing, Ordering::SeqCst);
    }

    /// Blocks serving requests until the process ends.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockCompletionsServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) -> std::io::Result<()> {
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

fn serve(shared: &Shared, mut stream: TcpStream) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    if !request_line.starts_with("POST ") {
        return respond(
            &mut stream,
            "405 Method Not Allowed",
            r#"{"error":"POST only"}"#,
        );
    }
    shared.requests.fetch_add(1, Ordering::SeqCst);
    if shared.failing.load(Ordering::SeqCst) {
        return respond(
            &mut stream,
            "503 Service Unavailable",
            r#"{"error":"unavailable"}"#,
        );
    }
    match answer(&shared.oracle, &body) {
        Ok(text) => {
            let doc = json!({
                "id": "mock",
                "object": "chat.completion",
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
            });
            respond(&mut stream, "200 OK", &doc.to_string())
        }
        Err(e) => respond(
            &mut stream,
            "400 Bad Request",
            &json!({ "error": e }).to_string(),
        ),
    }
}

/// Role from the system message's first line, payload from the user text.
fn answer(oracle: &OracleBackend, body: &[u8]) -> Result<String, String> {
    let doc: Value = serde_json::from_slice(body).map_err(|e| e.to_string())?;
    let messages = doc["messages"].as_array().ok_or("no messages")?;
    let content_of = |role: &str| {
        messages
            .iter()
            .find(|m| m["role"] == role)
            .map(|m| &m["content"])
    };
    let system = content_of("system")
        .and_then(Value::as_str)
        .ok_or("no system message")?;
    let role: Role = system
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("role:"))
        .ok_or("system message does not name a role")?
        .trim()
        .parse()
        .map_err(|e: String| e)?;
    let user = content_of("user").ok_or("no user message")?;
    let text = match user {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .find(|p| p["type"] == "text")
            .and_then(|p| p["text"].as_str())
            .ok_or("no text part")?
            .to_string(),
        _ => return Err("unreadable user content".into()),
    };
    let payload: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    oracle.respond(role, &payload)
}
