//! Black-box model access.
//!
//! Every backend implements [`BlackBox`]: one prompt in, one raw text
//! response out. [`ModelSpec`] selects and configures a backend, and
//! [`ResponseCache`] persists responses as JSON lines keyed by a SHA-256
//! digest of the request.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{EmbedError, WeightedPointCloud};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("model call timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("prompt is empty")]
    EmptyPrompt,
}

#[derive(Debug, Error)]
#[error("cache I/O error on {path}: {message}")]
pub struct CacheIoError {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Http,
    Subprocess,
    Mock,
}

/// What the backend returns: free text, or a point-cloud file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    #[default]
    Text,
    ImageCloud,
}

fn default_template() -> String {
    r#"{"prompt": "{prompt}"}"#.to_string()
}

fn default_timeout() -> f64 {
    60.0
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// URL for `http`, shell command line for `subprocess`, unused for `mock`.
    #[serde(default)]
    pub endpoint: String,
    /// JSON request body; `{prompt}` is replaced by the JSON-escaped prompt.
    #[serde(default = "default_template")]
    pub request_template: String,
    #[serde(default)]
    pub mode: OutputMode,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockModel>,
}

impl ModelSpec {
    pub fn mock(model: MockModel) -> Self {
        Self {
            kind: ModelKind::Mock,
            endpoint: String::new(),
            request_template: default_template(),
            mode: OutputMode::Text,
            timeout: default_timeout(),
            max_concurrency: default_concurrency(),
            mock: Some(model),
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(AdapterError::InvalidSpec("timeout must be positive".into()));
        }
        if self.max_concurrency == 0 {
            return Err(AdapterError::InvalidSpec("max_concurrency must be at least 1".into()));
        }
        match self.kind {
            ModelKind::Http | ModelKind::Subprocess if self.endpoint.trim().is_empty() => Err(
                AdapterError::InvalidSpec(format!("{:?} model needs an endpoint", self.kind)),
            ),
            ModelKind::Http if !self.request_template.contains("{prompt}") => Err(
                AdapterError::InvalidSpec("request_template lacks a {prompt} placeholder".into()),
            ),
            ModelKind::Mock if self.mock.is_none() => {
                Err(AdapterError::InvalidSpec("mock model needs a `mock` section".into()))
            }
            _ => Ok(()),
        }
    }

    fn timeout_duration(&self) -> Duration {
        Duration::from_secs_f64(self.timeout)
    }

    /// Instantiates the configured backend.
    pub fn build(&self) -> Result<Box<dyn BlackBox>, AdapterError> {
        self.validate()?;
        Ok(match self.kind {
            ModelKind::Http => Box::new(HttpModel::new(
                &self.endpoint,
                &self.request_template,
                self.timeout_duration(),
            )),
            ModelKind::Subprocess => Box::new(SubprocessModel {
                command: self.endpoint.clone(),
                timeout: self.timeout_duration(),
            }),
            ModelKind::Mock => Box::new(self.mock.clone().expect("validated")),
        })
    }

    /// Cache key: hex SHA-256 over kind, endpoint, mode and prompt. Mock
    /// models also hash their keyword table, since they have no endpoint.
    pub fn cache_key(&self, prompt: &str) -> String {
        let mut hasher = Sha256::new();
        let kind = serde_json::to_string(&self.kind).expect("enum serializes");
        let mode = serde_json::to_string(&self.mode).expect("enum serializes");
        for part in [kind.as_str(), self.endpoint.as_str(), mode.as_str(), prompt] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        if let (ModelKind::Mock, Some(mock)) = (self.kind, &self.mock) {
            hasher.update(serde_json::to_vec(mock).expect("mock serializes"));
        }
        hex::encode(hasher.finalize())
    }
}

/// Parsed model output.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelOutput {
    Text(String),
    Cloud(WeightedPointCloud),
}

pub fn parse_output(mode: OutputMode, raw: &str) -> Result<ModelOutput, AdapterError> {
    match mode {
        OutputMode::Text => Ok(ModelOutput::Text(raw.to_string())),
        OutputMode::ImageCloud => WeightedPointCloud::parse(raw)
            .map(ModelOutput::Cloud)
            .map_err(|e: EmbedError| AdapterError::MalformedResponse(e.to_string())),
    }
}

/// Sends `prompt` to the model described by `spec` and parses the reply.
pub fn query(spec: &ModelSpec, prompt: &str) -> Result<ModelOutput, AdapterError> {
    let raw = spec.build()?.query(prompt)?;
    parse_output(spec.mode, &raw)
}

/// A black-box generative model.
pub trait BlackBox: Send + Sync {
    fn query(&self, prompt: &str) -> Result<String, AdapterError>;
}

/// POSTs the rendered request template and reads the `output` field.
pub struct HttpModel {
    url: String,
    template: String,
    timeout: Duration,
    agent: ureq::Agent,
}

impl HttpModel {
    pub fn new(url: &str, template: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.to_string(),
            template: template.to_string(),
            timeout,
            agent,
        }
    }

    pub fn render_body(template: &str, prompt: &str) -> String {
        let quoted = serde_json::to_string(prompt).expect("strings serialize");
        template.replace("{prompt}", &quoted[1..quoted.len() - 1])
    }
}

impl BlackBox for HttpModel {
    fn query(&self, prompt: &str) -> Result<String, AdapterError> {
        if prompt.trim().is_empty() {
            return Err(AdapterError::EmptyPrompt);
        }
        let body = Self::render_body(&self.template, prompt);
        let mut response = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => AdapterError::Timeout(self.timeout),
                other => AdapterError::Transport(other.to_string()),
            })?;
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => AdapterError::Timeout(self.timeout),
                other => AdapterError::Transport(other.to_string()),
            })?;
        if !status.is_success() {
            return Err(AdapterError::Transport(format!("HTTP {status}: {text}")));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| AdapterError::MalformedResponse(format!("not JSON: {e}")))?;
        value
            .get("output")
            .and_then(serde_json::Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| AdapterError::MalformedResponse("missing string field `output`".into()))
    }
}

/// Runs a shell command per prompt: prompt on stdin, response on stdout.
pub struct SubprocessModel {
    pub command: String,
    pub timeout: Duration,
}

impl BlackBox for SubprocessModel {
    fn query(&self, prompt: &str) -> Result<String, AdapterError> {
        if prompt.trim().is_empty() {
            return Err(AdapterError::EmptyPrompt);
        }
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| AdapterError::Transport(format!("spawn failed: {e}")))?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let input = prompt.to_string();
        let writer = thread::spawn(move || stdin.write_all(input.as_bytes()));
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let mut stderr = child.stderr.take().expect("piped stderr");
        let err_reader = thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });

        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(AdapterError::Timeout(self.timeout));
                }
                Ok(None) => thread::sleep(Duration::from_millis(2)),
                Err(e) => return Err(AdapterError::Transport(e.to_string())),
            }
        };
        // A child that exits without reading stdin makes the write fail with
        // a broken pipe; its stdout is still authoritative.
        let _ = writer.join();
        let out = reader
            .join()
            .expect("reader thread")
            .map_err(|e| AdapterError::Transport(e.to_string()))?;
        let err = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(AdapterError::Transport(format!(
                "command exited with {status}: {}",
                err.trim()
            )));
        }
        String::from_utf8(out)
            .map_err(|_| AdapterError::MalformedResponse("stdout is not UTF-8".into()))
    }
}

/// Deterministic keyword model: `base_response` followed by the fragment of
/// every keyword present in the prompt, in keyword-definition order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockModel {
    pub keyword_responses: IndexMap<String, String>,
    pub base_response: String,
}

impl MockModel {
    pub fn new<K, V>(base: &str, keywords: impl IntoIterator<Item = (K, V)>) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            keyword_responses: keywords
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            base_response: base.to_string(),
        }
    }

    fn contains_keyword(words: &[String], keyword: &str) -> bool {
        let keyword = keyword.to_lowercase();
        if keyword.split_whitespace().count() > 1 {
            return words.join(" ").contains(&keyword);
        }
        words.iter().any(|w| {
            *w == keyword || w.trim_matches(|c: char| !c.is_alphanumeric()) == keyword
        })
    }

    pub fn respond(&self, prompt: &str) -> String {
        let words: Vec<String> = prompt.split_whitespace().map(str::to_lowercase).collect();
        let mut parts = vec![self.base_response.as_str()];
        for (keyword, fragment) in &self.keyword_responses {
            if Self::contains_keyword(&words, keyword) {
                parts.push(fragment);
            }
        }
        parts
            .into_iter()
            .filter(|p| !p.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl BlackBox for MockModel {
    fn query(&self, prompt: &str) -> Result<String, AdapterError> {
        if prompt.trim().is_empty() {
            return Err(AdapterError::EmptyPrompt);
        }
        Ok(self.respond(prompt))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    output: String,
    timestamp: String,
}

/// Append-only JSON-lines response store. Reads see the last record written
/// for a key.
pub struct ResponseCache {
    path: PathBuf,
    index: Mutex<HashMap<String, String>>,
    writer: Mutex<File>,
}

impl ResponseCache {
    pub const FILE_NAME: &'static str = "responses.jsonl";

    /// Opens (creating if needed) `dir/responses.jsonl`.
    pub fn open_dir(dir: impl AsRef<Path>) -> Result<Self, CacheIoError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| CacheIoError {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        Self::open(dir.join(Self::FILE_NAME))
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, CacheIoError> {
        let path = path.into();
        let io_err = |e: std::io::Error| CacheIoError {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut index = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io_err)?);
            for line in reader.lines() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                // A torn trailing line from an interrupted writer is skipped.
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        index.insert(rec.key, rec.output);
                    }
                    Err(e) => log::warn!("skipping unreadable cache line in {}: {e}", path.display()),
                }
            }
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        Ok(Self {
            path,
            index: Mutex::new(index),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.index.lock().expect("cache index").get(key).cloned()
    }

    pub fn put(&self, key: &str, output: &str) -> Result<(), CacheIoError> {
        let record = CacheRecord {
            key: key.to_string(),
            output: output.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        {
            let mut file = self.writer.lock().expect("cache writer");
            file.write_all(line.as_bytes()).map_err(|e| CacheIoError {
                path: self.path.display().to_string(),
                message: e.to_string(),
            })?;
        }
        self.index
            .lock()
            .expect("cache index")
            .insert(record.key, record.output);
        Ok(())
    }
}

/// Queries every prompt, at most `max_concurrency` at a time, consulting and
/// filling `cache` when given. Results are returned in prompt order.
pub fn query_batch(
    spec: &ModelSpec,
    model: &dyn BlackBox,
    prompts: &[String],
    cache: Option<&ResponseCache>,
) -> Vec<Result<String, AdapterError>> {
    let results: Vec<Mutex<Option<Result<String, AdapterError>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = spec.max_concurrency.max(1).min(prompts.len().max(1));

    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= prompts.len() {
            break;
        }
        let prompt = &prompts[i];
        let key = spec.cache_key(prompt);
        let result = match cache.and_then(|c| c.get(&key)) {
            Some(hit) => Ok(hit),
            None => {
                let fresh = model.query(prompt);
                if let (Ok(out), Some(c)) = (&fresh, cache) {
                    if let Err(e) = c.put(&key, out) {
                        log::warn!("{e}; continuing without caching");
                    }
                }
                fresh
            }
        };
        *results[i].lock().expect("result slot") = Some(result);
    };

    if workers == 1 {
        work();
    } else {
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    results
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("every prompt queried"))
        .collect()
}
