//! Blocking JSON-over-HTTP client with a retry policy, shared by the remote
//! localizer and the remote reasoner.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Extra attempts after the first one fails.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default)]
    pub temperature: f64,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> u64 {
    250
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: None,
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            retry_backoff_ms: default_backoff(),
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemoteError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error after {attempts} attempt(s): {message}")]
    Protocol { attempts: u32, message: String },
    #[error("client setup failed: {0}")]
    Setup(String),
}

/// One request/reply pair kept for auditing. Image payloads are elided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: Value,
    pub status: Option<u16>,
    pub reply: String,
}

enum Attempt<T> {
    Done(T),
    Retry(RemoteError),
    Fatal(RemoteError),
}

#[derive(Debug, Clone)]
pub struct RemoteClient {
    http: reqwest::blocking::Client,
    config: EndpointConfig,
    token: Option<String>,
}

impl RemoteClient {
    /// Must not be called from inside an async runtime.
    pub fn new(config: EndpointConfig) -> Result<Self, RemoteError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs.max(0.001)))
            .build()
            .map_err(|e| RemoteError::Setup(e.to_string()))?;
        let token = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| RemoteError::Setup(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        Ok(Self { http, config, token })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// POSTs `body` and hands the reply text to `parse`, retrying transport
    /// failures, 429/5xx responses and unparsable replies.
    pub fn post_json<T>(
        &self,
        body: &Value,
        log: &mut Vec<Exchange>,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, RemoteError> {
        let attempts = self.config.max_retries + 1;
        let mut last = RemoteError::Transport { attempts: 0, message: "no attempt made".into() };
        for attempt in 1..=attempts {
            if attempt > 1 {
                let wait = self.config.retry_backoff_ms.saturating_mul(1 << (attempt - 2).min(6));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(body, attempt, log, &parse) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(e) => {
                    log::warn!("{} attempt {attempt}/{attempts}: {e}", self.config.url);
                    last = e;
                }
                Attempt::Fatal(e) => return Err(e),
            }
        }
        Err(last)
    }

    fn attempt<T>(
        &self,
        body: &Value,
        attempt: u32,
        log: &mut Vec<Exchange>,
        parse: &impl Fn(&str) -> Result<T, String>,
    ) -> Attempt<T> {
        let mut req = self.http.post(&self.config.url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => {
                log.push(Exchange { request: elide_images(body), status: None, reply: String::new() });
                return Attempt::Retry(RemoteError::Transport { attempts: attempt, message: e.to_string() });
            }
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(RemoteError::Transport { attempts: attempt, message: e.to_string() }),
        };
        log.push(Exchange { request: elide_images(body), status: Some(status.as_u16()), reply: text.clone() });
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(RemoteError::Transport { attempts: attempt, message: format!("HTTP {status}") });
        }
        if !status.is_success() {
            return Attempt::Fatal(RemoteError::Transport {
                attempts: attempt,
                message: format!("HTTP {status}: {text}"),
            });
        }
        match parse(&text) {
            Ok(v) => Attempt::Done(v),
            Err(message) => Attempt::Retry(RemoteError::Protocol { attempts: attempt, message }),
        }
    }
}

/// Replaces long base64 payloads so audit logs stay readable.
pub fn elide_images(v: &Value) -> Value {
    match v {
        Value::String(s) if s.len() > 512 => Value::String(format!("<{} bytes elided>", s.len())),
        Value::Array(a) => Value::Array(a.iter().map(elide_images).collect()),
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), elide_images(v))).collect()),
        other => other.clone(),
    }
}

/// A request seen by [`StubServer`].
#[derive(Debug, Clone, PartialEq)]
pub struct StubRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl StubRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

type StubHandler = dyn Fn(&StubRequest, usize) -> (u16, String) + Send + 'static;

/// Minimal HTTP/1.1 responder on a loopback port for exercising remote
/// endpoints offline. The handler gets each request and its 0-based arrival
/// index and returns a status and JSON body. One request per connection.
pub struct StubServer {
    addr: std::net::SocketAddr,
    requests: std::sync::Arc<std::sync::Mutex<Vec<StubRequest>>>,
    stop: std::sync::Arc<std::sync::atomic::AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(&StubRequest, usize) -> (u16, String) + Send + 'static) -> std::io::Result<Self> {
        use std::sync::atomic::{AtomicBool, Ordering};
        use std::sync::{Arc, Mutex};
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let requests = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Box<StubHandler> = Box::new(handler);
        let (reqs, stop_flag) = (requests.clone(), stop.clone());
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(mut stream) = stream else { continue };
                let Some(req) = read_request(&mut stream) else { continue };
                let index = {
                    let mut all = reqs.lock().unwrap_or_else(|p| p.into_inner());
                    all.push(req.clone());
                    all.len() - 1
                };
                let (status, body) = handler(&req, index);
                let _ = write_response(&mut stream, status, &body);
            }
        });
        Ok(Self { addr, requests, stop, handle: Some(handle) })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.requests.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, std::sync::atomic::Ordering::SeqCst);
        let _ = std::net::TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn read_request(stream: &mut std::net::TcpStream) -> Option<StubRequest> {
    use std::io::Read;
    stream.set_read_timeout(Some(Duration::from_secs(10))).ok()?;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        if let Some(i) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break i + 4;
        }
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
    };
    let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let mut lines = head.split("\r\n");
    let mut first = lines.next()?.split_whitespace();
    let (method, path) = (first.next()?.to_string(), first.next()?.to_string());
    let headers: Vec<(String, String)> =
        lines.filter_map(|l| l.split_once(':')).map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).collect();
    let len = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse::<usize>().ok())
        .unwrap_or(0);
    while buf.len() < header_end + len {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    let body = String::from_utf8_lossy(&buf[header_end..(header_end + len).min(buf.len())]).to_string();
    Some(StubRequest { method, path, headers, body })
}

fn write_response(stream: &mut std::net::TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    use std::io::Write;
    write!(
        stream,
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}
