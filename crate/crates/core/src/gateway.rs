//! Client for external scorer endpoints plus a deterministic mock scorer.
//!
//! The wire format is a small purpose-built JSON body. Vendor-specific
//! endpoints plug in through [`WireAdapter`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parser;
use crate::taxonomy::{sample_pseudo_score, DistortionLabel, FrameAnnotation};

pub const API_KEY_ENV: &str = "SCORER_API_KEY";
pub const BASE_URL_ENV: &str = "SCORER_BASE_URL";
pub const DEFAULT_MAX_PAYLOAD_BYTES: usize = 8 * 1024 * 1024;
pub const DEFAULT_PARALLELISM: usize = 4;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("request {request_id} timed out after {attempts} attempt(s)")]
    Timeout { request_id: String, attempts: u32 },
    #[error("endpoint returned status {status}: {body}")]
    EndpointError { status: u16, body: String },
    #[error("request {request_id} failed after {attempts} attempt(s): {last}")]
    RetriesExhausted {
        request_id: String,
        attempts: u32,
        last: String,
    },
    #[error("image payload of {size} bytes exceeds the {cap}-byte cap")]
    PayloadTooLarge { size: usize, cap: usize },
    #[error("frame {0:?} is not in the mock fixture")]
    UnknownFrame(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cannot read image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("endpoint not configured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptKind {
    PreferenceScoring,
    Recognition,
}

fn label_menu() -> String {
    DistortionLabel::DISTORTIONS
        .iter()
        .map(|l| format!("  - {}", l.as_str()))
        .collect::<Vec<_>>()
        .join("\n")
}

impl PromptKind {
    /// Instruction text sent with a frame generated for `caption`.
    pub fn render(self, caption: &str) -> String {
        let menu = label_menu();
        let (think, answer) = (parser::THINK_OPEN, parser::ANSWER_OPEN);
        let (think_end, answer_end) = (parser::THINK_CLOSE, parser::ANSWER_CLOSE);
        let labels = parser::LABELS_KEY;
        match self {
            PromptKind::PreferenceScoring => format!(
                "The image is one frame from a video generated for the prompt:\n\
                 \"{caption}\"\n\
                 Check the frame for structural problems in people, animals and objects. \
                 Possible problem types:\n{menu}\n\
                 Write your inspection between {think} and {think_end}. Then write a JSON \
                 object between {answer} and {answer_end} with the key \"{labels}\" holding \
                 the list of problem types you found (use [\"null\"] if there are none, at \
                 most three entries) and the key \"{rating}\" holding a number from 1 to 5, \
                 where 5 means structurally flawless.",
                rating = parser::RATING_KEY,
            ),
            PromptKind::Recognition => format!(
                "The image is one frame from a video generated for the prompt:\n\
                 \"{caption}\"\n\
                 Decide whether the frame shows structural problems in people, animals or \
                 objects. Possible problem types:\n{menu}\n\
                 Write your inspection between {think} and {think_end}. Then write a JSON \
                 object between {answer} and {answer_end} with the key \"{labels}\" holding \
                 the list of problem types you found, or [\"null\"] if the frame looks normal."
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub n_samples: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            n_samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub request_id: String,
    pub prompt_kind: PromptKind,
    pub prompt_text: String,
    pub frame_ref: String,
    /// Base64 image bytes; when absent the image comes from `frame_ref`.
    pub image_payload: Option<String>,
    pub params: GenerationParams,
}

impl ScoreRequest {
    pub fn new(
        request_id: impl Into<String>,
        prompt_kind: PromptKind,
        caption: &str,
        frame_ref: impl Into<String>,
        params: GenerationParams,
    ) -> Self {
        Self {
            request_id: request_id.into(),
            prompt_kind,
            prompt_text: prompt_kind.render(caption),
            frame_ref: frame_ref.into(),
            image_payload: None,
            params,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.params.n_samples == 0 {
            return Err(GatewayError::InvalidRequest(
                "n_samples must be at least 1".into(),
            ));
        }
        if self.request_id.is_empty() {
            return Err(GatewayError::InvalidRequest("request_id is empty".into()));
        }
        if !self.params.temperature.is_finite() || self.params.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub request_id: String,
    pub raw_texts: Vec<String>,
    pub model_id: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// What goes in the `image` field of the wire body.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Uri(String),
    Base64(String),
}

pub fn is_remote_uri(s: &str) -> bool {
    ["http://", "https://", "s3://", "gs://"]
        .iter()
        .any(|p| s.starts_with(p))
}

/// Resolve the image for a request: inline payload first, then a remote URI,
/// otherwise the local file at `frame_ref`, base64-encoded.
pub fn resolve_image(req: &ScoreRequest, cap: usize) -> Result<ImageSource, GatewayError> {
    let engine = base64::engine::general_purpose::STANDARD;
    if let Some(payload) = &req.image_payload {
        let size = engine
            .decode(payload)
            .map_err(|e| GatewayError::InvalidRequest(format!("image_payload is not base64: {e}")))?
            .len();
        if size > cap {
            return Err(GatewayError::PayloadTooLarge { size, cap });
        }
        return Ok(ImageSource::Base64(payload.clone()));
    }
    if is_remote_uri(&req.frame_ref) {
        return Ok(ImageSource::Uri(req.frame_ref.clone()));
    }
    let meta = std::fs::metadata(&req.frame_ref).map_err(|source| GatewayError::Image {
        path: req.frame_ref.clone(),
        source,
    })?;
    if meta.len() as usize > cap {
        return Err(GatewayError::PayloadTooLarge {
            size: meta.len() as usize,
            cap,
        });
    }
    let bytes = std::fs::read(&req.frame_ref).map_err(|source| GatewayError::Image {
        path: req.frame_ref.clone(),
        source,
    })?;
    if bytes.len() > cap {
        return Err(GatewayError::PayloadTooLarge {
            size: bytes.len(),
            cap,
        });
    }
    Ok(ImageSource::Base64(engine.encode(bytes)))
}

/// Translates between requests and one endpoint flavor's wire format.
pub trait WireAdapter: Send + Sync {
    fn path(&self) -> &str {
        "/score"
    }
    fn encode(&self, req: &ScoreRequest, image: &ImageSource) -> Value;
    /// Returns the sample texts and the model id.
    fn decode(&self, body: &Value) -> Result<(Vec<String>, String), String>;
}

/// The native minimal schema.
#[derive(Debug, Default, Clone, Copy)]
pub struct NativeAdapter;

impl WireAdapter for NativeAdapter {
    fn encode(&self, req: &ScoreRequest, image: &ImageSource) -> Value {
        let image = match image {
            ImageSource::Uri(u) => json!({"type": "uri", "data": u}),
            ImageSource::Base64(b) => json!({"type": "base64", "data": b}),
        };
        json!({
            "request_id": req.request_id,
            "prompt": req.prompt_text,
            "image": image,
            "max_tokens": req.params.max_tokens,
            "temperature": req.params.temperature,
            "n": req.params.n_samples,
        })
    }

    fn decode(&self, body: &Value) -> Result<(Vec<String>, String), String> {
        let texts = body
            .get("texts")
            .and_then(Value::as_array)
            .ok_or("response has no `texts` array")?
            .iter()
            .map(|t| {
                t.as_str()
                    .map(str::to_string)
                    .ok_or("non-string entry in `texts`")
            })
            .collect::<Result<Vec<_>, _>>()?;
        let model_id = body
            .get("model_id")
            .and_then(Value::as_str)
            .unwrap_or("unknown")
            .to_string();
        Ok((texts, model_id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_millis(500),
            factor: 2,
            max_attempts: 4,
        }
    }
}

impl RetryPolicy {
    /// Sleep before attempt `attempt + 1`, where `attempt` counts from 1.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(attempt - 1)
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub request_timeout: Duration,
    pub retry: RetryPolicy,
    pub max_payload_bytes: usize,
    api_key: Option<String>,
}

impl EndpointConfig {
    /// Credential is read from the environment only.
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            request_timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }

    /// Base URL from the argument if given, else from the environment.
    pub fn from_env(base_url: Option<&str>) -> Result<Self, GatewayError> {
        let url = match base_url {
            Some(u) => u.to_string(),
            None => std::env::var(BASE_URL_ENV)
                .map_err(|_| GatewayError::Config(format!("{BASE_URL_ENV} is not set")))?,
        };
        Ok(Self::new(url))
    }

    pub fn has_credential(&self) -> bool {
        self.api_key.is_some()
    }
}

pub trait Scorer: Sync {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, GatewayError>;
}

pub struct HttpScorer {
    config: EndpointConfig,
    adapter: Box<dyn WireAdapter>,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Done(Result<(Vec<String>, String), GatewayError>),
    Retry { timed_out: bool, detail: String },
}

impl HttpScorer {
    pub fn new(config: EndpointConfig) -> Result<Self, GatewayError> {
        Self::with_adapter(config, Box::new(NativeAdapter))
    }

    pub fn with_adapter(
        config: EndpointConfig,
        adapter: Box<dyn WireAdapter>,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            config,
            adapter,
            client,
        })
    }

    fn attempt(&self, url: &str, req: &ScoreRequest, body: &Value) -> Attempt {
        let mut builder = self
            .client
            .post(url)
            .header("Idempotency-Key", &req.request_id)
            .json(body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = match builder.send() {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    timed_out: e.is_timeout(),
                    detail: e.to_string(),
                }
            }
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry {
                    timed_out: e.is_timeout(),
                    detail: e.to_string(),
                }
            }
        };
        if status.is_server_error() {
            return Attempt::Retry {
                timed_out: false,
                detail: format!("status {}: {}", status.as_u16(), text),
            };
        }
        if !status.is_success() {
            return Attempt::Done(Err(GatewayError::EndpointError {
                status: status.as_u16(),
                body: text,
            }));
        }
        let decoded = serde_json::from_str::<Value>(&text)
            .map_err(|e| e.to_string())
            .and_then(|v| self.adapter.decode(&v));
        Attempt::Done(decoded.map_err(|reason| GatewayError::EndpointError {
            status: status.as_u16(),
            body: format!("{reason}: {text}"),
        }))
    }
}

impl Scorer for HttpScorer {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, GatewayError> {
        req.validate()?;
        let image = resolve_image(req, self.config.max_payload_bytes)?;
        let body = self.adapter.encode(req, &image);
        let url = format!("{}{}", self.config.base_url, self.adapter.path());
        let policy = self.config.retry;
        let start = Instant::now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.attempt(&url, req, &body) {
                Attempt::Done(result) => {
                    let (raw_texts, model_id) = result?;
                    if raw_texts.len() != req.params.n_samples {
                        return Err(GatewayError::EndpointError {
                            status: 200,
                            body: format!(
                                "expected {} texts, got {}",
                                req.params.n_samples,
                                raw_texts.len()
                            ),
                        });
                    }
                    return Ok(ScoreResponse {
                        request_id: req.request_id.clone(),
                        raw_texts,
                        model_id,
                        latency_ms: start.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                    });
                }
                Attempt::Retry { timed_out, detail } => {
                    if attempt >= policy.max_attempts {
                        return Err(if timed_out {
                            GatewayError::Timeout {
                                request_id: req.request_id.clone(),
                                attempts: attempt,
                            }
                        } else {
                            GatewayError::RetriesExhausted {
                                request_id: req.request_id.clone(),
                                attempts: attempt,
                                last: detail,
                            }
                        });
                    }
                    std::thread::sleep(policy.delay_after(attempt));
                }
            }
        }
    }
}

/// Stable 64-bit hash of a frame reference.
pub fn frame_hash(frame_ref: &str) -> u64 {
    let digest = Sha256::digest(frame_ref.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

const MOCK_THINK: &str = "Looked over bodies, faces, limbs and objects, and compared their shapes \
                          with what the prompt describes.";

/// Test double that answers with the fixture's ground truth.
pub struct MockScorer {
    by_ref: HashMap<String, FrameAnnotation>,
    seed: u64,
    model_id: String,
}

impl MockScorer {
    pub fn new(fixture: &[FrameAnnotation], seed: u64) -> Self {
        let by_ref = fixture
            .iter()
            .map(|a| (a.frame_ref.clone(), a.clone()))
            .collect();
        Self {
            by_ref,
            seed,
            model_id: "mock-oracle".into(),
        }
    }

    /// Rating for sample `j` of a frame.
    pub fn rating(&self, frame_ref: &str, n_labels: usize, j: usize) -> f64 {
        let s = self.seed ^ frame_hash(frame_ref) ^ (j as u64).wrapping_mul(GOLDEN);
        sample_pseudo_score(n_labels, s)
    }
}

impl Scorer for MockScorer {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, GatewayError> {
        req.validate()?;
        let gt = self
            .by_ref
            .get(&req.frame_ref)
            .ok_or_else(|| GatewayError::UnknownFrame(req.frame_ref.clone()))?;
        let labels = gt.labels();
        let raw_texts = (0..req.params.n_samples)
            .map(|j| {
                let rating = match req.prompt_kind {
                    PromptKind::PreferenceScoring => {
                        Some(self.rating(&req.frame_ref, labels.len(), j))
                    }
                    PromptKind::Recognition => None,
                };
                parser::render_response(MOCK_THINK, labels, rating)
            })
            .collect();
        Ok(ScoreResponse {
            request_id: req.request_id.clone(),
            raw_texts,
            model_id: self.model_id.clone(),
            latency_ms: 0,
            attempt_count: 1,
        })
    }
}

/// Score every request with at most `parallelism` in flight. Results keep
/// the order of `reqs`.
pub fn score_many<S: Scorer + ?Sized>(
    scorer: &S,
    reqs: &[ScoreRequest],
    parallelism: usize,
) -> Vec<Result<ScoreResponse, GatewayError>> {
    let workers = parallelism.max(1).min(reqs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<ScoreResponse, GatewayError>>>> =
        reqs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(req) = reqs.get(i) else { break };
                let result = scorer.score(req);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every request resolves"))
        .collect()
}

/// A scripted HTTP server for exercising the client without a network.
pub mod fake_server {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};
    use std::thread::JoinHandle;
    use std::time::Duration;

    #[derive(Debug, Clone)]
    pub struct Recorded {
        pub headers: Vec<(String, String)>,
        pub body: String,
    }

    impl Recorded {
        pub fn header(&self, name: &str) -> Option<&str> {
            self.headers
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case(name))
                .map(|(_, v)| v.as_str())
        }
    }

    type Handler = dyn Fn(usize, &Recorded) -> (u16, String) + Send + Sync;

    #[derive(Default)]
    struct Shared {
        requests: Mutex<Vec<Recorded>>,
        in_flight: AtomicUsize,
        max_in_flight: AtomicUsize,
        stop: AtomicBool,
    }

    pub struct FakeServer {
        pub base_url: String,
        shared: Arc<Shared>,
        handle: Option<JoinHandle<()>>,
        addr: std::net::SocketAddr,
    }

    impl FakeServer {
        /// `handler` gets the zero-based request number and the request, and
        /// returns a status and body. Each request is held for `hold` before
        /// answering.
        pub fn start<F>(hold: Duration, handler: F) -> Self
        where
            F: Fn(usize, &Recorded) -> (u16, String) + Send + Sync + 'static,
        {
            let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
            let addr = listener.local_addr().unwrap();
            let shared = Arc::new(Shared::default());
            let handler: Arc<Handler> = Arc::new(handler);
            let sh = shared.clone();
            let handle = std::thread::spawn(move || {
                let counter = Arc::new(AtomicUsize::new(0));
                for stream in listener.incoming() {
                    if sh.stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let (sh, handler, counter) = (sh.clone(), handler.clone(), counter.clone());
                    std::thread::spawn(move || serve(stream, &sh, &*handler, &counter, hold));
                }
            });
            Self {
                base_url: format!("http://{addr}"),
                shared,
                handle: Some(handle),
                addr,
            }
        }

        pub fn requests(&self) -> Vec<Recorded> {
            self.shared.requests.lock().unwrap().clone()
        }

        pub fn max_in_flight(&self) -> usize {
            self.shared.max_in_flight.load(Ordering::SeqCst)
        }
    }

    impl Drop for FakeServer {
        fn drop(&mut self) {
            self.shared.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
    }

    fn serve(
        stream: TcpStream,
        sh: &Shared,
        handler: &Handler,
        counter: &AtomicUsize,
        hold: Duration,
    ) {
        let mut reader = BufReader::new(stream);
        let mut headers = Vec::new();
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        loop {
            line.clear();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let l = line.trim_end();
            if l.is_empty() {
                break;
            }
            if let Some((k, v)) = l.split_once(':') {
                headers.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let len: usize = headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
            .and_then(|(_, v)| v.parse().ok())
            .unwrap_or(0);
        let mut body = vec![0; len];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let rec = Recorded {
            headers,
            body: String::from_utf8_lossy(&body).into_owned(),
        };
        let now = sh.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        sh.max_in_flight.fetch_max(now, Ordering::SeqCst);
        sh.requests.lock().unwrap().push(rec.clone());
        let n = counter.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(hold);
        let (status, reply) = handler(n, &rec);
        sh.in_flight.fetch_sub(1, Ordering::SeqCst);
        let mut stream = reader.into_inner();
        let _ = write!(
            stream,
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        );
        let _ = stream.flush();
    }

    /// Body echoing `n` copies of `text` in the native schema.
    pub fn texts_body(rec: &Recorded, text: &str) -> String {
        let n = serde_json::from_str::<serde_json::Value>(&rec.body)
            .ok()
            .and_then(|v| v.get("n").and_then(|n| n.as_u64()))
            .unwrap_or(1) as usize;
        serde_json::json!({"texts": vec![text; n], "model_id": "fake"}).to_string()
    }
}
