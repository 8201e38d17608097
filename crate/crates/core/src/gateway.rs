//! VLM access: an OpenAI-style chat-completions client with retries and a
//! JSON-lines audit log, a deterministic mock oracle, and the verdict parser
//! that turns free text back into a safety score.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::prompt::{criteria_name, map_scale_1to5, PromptBundle, ScoreScale};
use crate::rules::{LightState, SafetyScore, SignalState, TriState};
use crate::synth::GroundTruth;

pub const DEFAULT_API_KEY_ENV: &str = "VLM_API_KEY";
pub const MOCK_MODEL: &str = "mock-oracle";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First retry delay; doubles per attempt, plus up to 25 % jitter.
    pub backoff_base_ms: u64,
    /// Largest PNG attachment accepted, in bytes.
    pub max_image_bytes: usize,
}

impl Default for VlmEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4o".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            temperature: 1.0,
            timeout_secs: 120,
            max_retries: 3,
            max_in_flight: 4,
            backoff_base_ms: 1000,
            max_image_bytes: 20 * 1024 * 1024,
        }
    }
}

impl VlmEndpointConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be at least 1".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(GatewayError::Config("base_url is empty".into()));
        }
        Ok(())
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub raw_text: String,
    pub model_name: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMethod {
    StructuredLine,
    LabeledPattern,
    ScaleMapped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub score: Option<SafetyScore>,
    pub reasoning: String,
    pub parse_method: ParseMethod,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("credential error: {0}")]
    Credential(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request rejected ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("image attachment is {size} bytes, limit is {limit}")]
    Payload { size: usize, limit: usize },
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("image encoding: {0}")]
    Image(String),
    #[error("audit log {}: {source}", path.display())]
    Audit {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failure of a single transport attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Status { code: u16, body: String },
    Timeout(String),
    Network(String),
    Protocol(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status { code, .. } => matches!(code, 408 | 429 | 500..=599),
            TransportError::Timeout(_) | TransportError::Network(_) => true,
            TransportError::Protocol(_) => false,
        }
    }

    fn describe(&self) -> String {
        match self {
            TransportError::Status { code, body } => format!("HTTP {code}: {}", truncate(body, 300)),
            TransportError::Timeout(m) => format!("timeout: {m}"),
            TransportError::Network(m) => format!("network: {m}"),
            TransportError::Protocol(m) => m.clone(),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// One chat-completion round trip. `body` is the full JSON request.
pub trait Transport: Send + Sync {
    fn send(&self, url: &str, api_key: &str, body: &Value, timeout: Duration) -> Result<String, TransportError>;
}

pub struct HttpTransport;

impl Transport for HttpTransport {
    fn send(&self, url: &str, api_key: &str, body: &Value, timeout: Duration) -> Result<String, TransportError> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let resp = agent
            .post(url)
            .set("Authorization", &format!("Bearer {api_key}"))
            .send_json(body.clone());
        match resp {
            Ok(r) => {
                let v: Value = r.into_json().map_err(|e| TransportError::Protocol(format!("response body: {e}")))?;
                extract_content(&v)
            }
            Err(ureq::Error::Status(code, r)) => Err(TransportError::Status {
                code,
                body: r.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") {
                    Err(TransportError::Timeout(msg))
                } else {
                    Err(TransportError::Network(msg))
                }
            }
        }
    }
}

/// `choices[0].message.content`, as a string or a list of text parts.
pub fn extract_content(v: &Value) -> Result<String, TransportError> {
    let content = &v["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join("")),
        _ => Err(TransportError::Protocol("missing choices[0].message.content".into())),
    }
}

pub fn request_body(model: &str, temperature: f64, prompt_text: &str, png: &[u8]) -> Value {
    let data_url = format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png));
    json!({
        "model": model,
        "temperature": temperature,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt_text},
                {"type": "image_url", "image_url": {"url": data_url}}
            ]
        }]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub timestamp: String,
    pub model_name: String,
    pub prompt_hash: String,
    pub image_hash: String,
    pub attempts: u32,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

struct AuditLog {
    path: PathBuf,
    file: Mutex<File>,
}

/// Shareable across threads; at most `max_in_flight` requests are outstanding.
pub struct VlmGateway {
    cfg: VlmEndpointConfig,
    transport: Box<dyn Transport>,
    slots: Semaphore,
    audit: Option<AuditLog>,
    api_key: Option<String>,
}

impl VlmGateway {
    pub fn new(cfg: VlmEndpointConfig, transport: Box<dyn Transport>) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.trim().is_empty());
        Ok(Self {
            slots: Semaphore::new(cfg.max_in_flight),
            cfg,
            transport,
            audit: None,
            api_key,
        })
    }

    pub fn http(cfg: VlmEndpointConfig) -> Result<Self, GatewayError> {
        Self::new(cfg, Box::new(HttpTransport))
    }

    /// Overrides the key read from the environment.
    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_audit_log(mut self, path: &Path) -> Result<Self, GatewayError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| GatewayError::Audit {
                path: path.to_path_buf(),
                source,
            })?;
        self.audit = Some(AuditLog {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        });
        Ok(self)
    }

    pub fn config(&self) -> &VlmEndpointConfig {
        &self.cfg
    }

    pub fn query(&self, bundle: &PromptBundle) -> Result<VlmResponse, GatewayError> {
        let key = self.api_key.clone().ok_or_else(|| {
            GatewayError::Credential(format!("environment variable {} is not set", self.cfg.api_key_env))
        })?;
        let png = bundle.image.raster.encode_png().map_err(|e| GatewayError::Image(e.to_string()))?;
        if png.len() > self.cfg.max_image_bytes {
            return Err(GatewayError::Payload {
                size: png.len(),
                limit: self.cfg.max_image_bytes,
            });
        }
        let text = bundle.text();
        let body = request_body(&self.cfg.model_name, self.cfg.temperature, &text, &png);
        let url = self.cfg.endpoint();
        let timeout = Duration::from_secs(self.cfg.timeout_secs.max(1));

        let _permit = self.slots.acquire();
        let started = Instant::now();
        let mut attempts = 0;
        let outcome = loop {
            attempts += 1;
            match self.transport.send(&url, &key, &body, timeout) {
                Ok(raw) => break Ok(raw),
                Err(e) if e.is_retryable() && attempts <= self.cfg.max_retries => {
                    log::warn!("attempt {attempts} failed ({}), retrying", e.describe());
                    std::thread::sleep(self.backoff(attempts));
                }
                Err(e) => break Err(e),
            }
        };
        let latency_ms = started.elapsed().as_millis() as u64;

        let result = match outcome {
            Ok(raw_text) => Ok(VlmResponse {
                raw_text,
                model_name: self.cfg.model_name.clone(),
                latency_ms,
            }),
            Err(TransportError::Status { code: code @ (401 | 403), body }) => {
                Err(GatewayError::Credential(format!("HTTP {code}: {}", truncate(&body, 300))))
            }
            Err(TransportError::Protocol(m)) => Err(GatewayError::Protocol(m)),
            Err(e @ TransportError::Status { .. }) if !e.is_retryable() => {
                let TransportError::Status { code, body } = e else { unreachable!() };
                Err(GatewayError::Rejected {
                    status: code,
                    message: truncate(&body, 300).to_string(),
                })
            }
            Err(e) => Err(GatewayError::Transport {
                attempts,
                message: e.describe(),
            }),
        };
        self.write_audit(&AuditRecord {
            timestamp: chrono::Utc::now().to_rfc3339(),
            model_name: self.cfg.model_name.clone(),
            prompt_hash: crate::prompt::hash_text(&text),
            image_hash: bundle.image.raster.content_hash(),
            attempts,
            latency_ms,
            raw_text: result.as_ref().ok().map(|r| r.raw_text.clone()),
            error: result.as_ref().err().map(|e| e.to_string()),
        })?;
        result
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.cfg.backoff_base_ms as f64 * 2f64.powi(attempt as i32 - 1);
        let jitter = rand::thread_rng().gen_range(0.0..0.25);
        Duration::from_millis((base * (1.0 + jitter)) as u64)
    }

    fn write_audit(&self, rec: &AuditRecord) -> Result<(), GatewayError> {
        let Some(audit) = &self.audit else { return Ok(()) };
        let mut line = serde_json::to_string(rec).expect("audit record serializes");
        line.push('\n');
        let mut f = audit.file.lock().expect("audit lock poisoned");
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|source| GatewayError::Audit {
                path: audit.path.clone(),
                source,
            })
    }
}

fn factors_sentence(truth: &GroundTruth) -> String {
    let a = &truth.attributes;
    let car = match a.moving_car {
        TriState::Yes => "a car is approaching the crosswalk",
        TriState::No => "no car is approaching the crosswalk",
        TriState::NotVisible => "no car is visible on the road",
    };
    let light = match a.traffic_light {
        LightState::Red => "the parallel traffic light is red",
        LightState::Yellow => "the parallel traffic light is yellow",
        LightState::Green => "the parallel traffic light is green",
        LightState::NotVisible => "the parallel traffic light is not visible",
    };
    let signal = match a.pedestrian_signal {
        SignalState::Go => "the pedestrian light shows a crossing sign",
        SignalState::Stop => "the pedestrian light shows a stop sign",
        SignalState::NotVisible => "the pedestrian light is not visible",
    };
    let peds = match a.crossing_pedestrian {
        TriState::Yes => "other pedestrians are crossing",
        TriState::No => "nobody else is crossing",
        TriState::NotVisible => "no other pedestrians are visible",
    };
    let mut s = format!("{car}, {light}, {signal} and {peds}");
    if truth.provenance.is_fallback() {
        s.push_str("; this combination is not listed, so the cautious reading applies");
    }
    s
}

/// Deterministic stand-in for a real model: answers with the ground truth
/// in the criteria's own phrasing.
pub fn mock_query(bundle: &PromptBundle, truth: &GroundTruth) -> VlmResponse {
    let level = truth.score.level();
    let mut raw_text = format!("Score {level} - {}: {}.", criteria_name(truth.score), factors_sentence(truth));
    if bundle.output_hint_text.is_some() {
        raw_text.push_str(&format!("\nSAFETY_SCORE: {level}"));
    }
    VlmResponse {
        raw_text,
        model_name: MOCK_MODEL.into(),
        latency_ms: 0,
    }
}

struct Patterns {
    structured: Regex,
    labeled: Regex,
    out_of_five: Regex,
}

fn patterns() -> &'static Patterns {
    static P: std::sync::OnceLock<Patterns> = std::sync::OnceLock::new();
    P.get_or_init(|| Patterns {
        structured: Regex::new(r"(?m)^[ \t]*SAFETY_SCORE:[ \t]*([+\-−]?\d+)[ \t]*\r?$").unwrap(),
        labeled: Regex::new(
            r"(?i)\b(?:safety\s+level|safety\s+score|score(?:\s+for\s+safety)?)(?:\s+(?:of|is|would\s+be))?\s*[:=]?\s*\**([+\-−]?\d+)\b(\s*(?:out\s+of|/)\s*5\b)?",
        )
        .unwrap(),
        out_of_five: Regex::new(r"(?i)\b([1-5])\s*(?:out\s+of|/)\s*5\b").unwrap(),
    })
}

fn parse_int(s: &str) -> Option<i64> {
    s.replace('\u{2212}', "-").trim_start_matches('+').parse().ok()
}

pub fn parse_verdict(resp: &VlmResponse, scale: ScoreScale) -> Verdict {
    let raw = &resp.raw_text;
    let p = patterns();

    if let Some(m) = p.structured.captures_iter(raw).last() {
        if let Some(score) = parse_int(&m[1]).and_then(|n| SafetyScore::from_level(n).ok()) {
            let whole = m.get(0).expect("group 0");
            let mut reasoning = format!("{}{}", &raw[..whole.start()], &raw[whole.end()..]);
            while reasoning.ends_with('\n') {
                reasoning.pop();
            }
            return Verdict {
                score: Some(score),
                reasoning,
                parse_method: ParseMethod::StructuredLine,
            };
        }
    }

    let done = |score, parse_method| Verdict {
        score: Some(score),
        reasoning: raw.clone(),
        parse_method,
    };

    // "n out of 5" is a statement on the 1..5 scale, never a -2..2 level
    let labeled: Vec<(usize, i64, bool)> = p
        .labeled
        .captures_iter(raw)
        .filter_map(|c| Some((c.get(0)?.start(), parse_int(&c[1])?, c.get(2).is_some())))
        .collect();
    if let Some(&(_, n, _)) = labeled.iter().filter(|(_, n, five)| !five && (-2..=2).contains(n)).last() {
        return done(SafetyScore::from_level(n).expect("range checked"), ParseMethod::LabeledPattern);
    }

    if scale == ScoreScale::OneTo5Mapped {
        let mut candidates: Vec<(usize, i64)> = labeled
            .iter()
            .filter(|(_, n, _)| (1..=5).contains(n))
            .map(|&(pos, n, _)| (pos, n))
            .collect();
        candidates.extend(
            p.out_of_five
                .captures_iter(raw)
                .filter_map(|c| Some((c.get(0)?.start(), parse_int(&c[1])?))),
        );
        if let Some(&(_, n)) = candidates.iter().max_by_key(|(pos, _)| *pos) {
            return done(map_scale_1to5(n).expect("range checked"), ParseMethod::ScaleMapped);
        }
    }

    Verdict {
        score: None,
        reasoning: raw.clone(),
        parse_method: ParseMethod::Failed,
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;
    use crate::prompt::{build_prompt, PromptConfig};
    use crate::rules::SceneAttributes;
    use crate::vision::{ComposedImage, RasterImage, Variant};

    fn resp(text: &str) -> VlmResponse {
        VlmResponse {
            raw_text: text.into(),
            model_name: "t".into(),
            latency_ms: 0,
        }
    }

    fn bundle(hint: bool) -> PromptBundle {
        let image = ComposedImage {
            raster: RasterImage::new(8, 8, [1, 2, 3]).unwrap(),
            layout: BTreeMap::new(),
            variant: Variant::None,
        };
        let cfg = PromptConfig {
            structured_output_hint: hint,
            ..Default::default()
        };
        build_prompt(&cfg, image).unwrap()
    }

    #[test]
    fn parser_examples() {
        let v = parse_verdict(&resp("Looks risky.\nSAFETY_SCORE: -1"), ScoreScale::Minus2To2);
        assert_eq!((v.score.unwrap().level(), v.parse_method), (-1, ParseMethod::StructuredLine));
        assert_eq!(v.reasoning, "Looks risky.");

        let v = parse_verdict(&resp("Score -2 - Totally dangerous: a car is approaching."), ScoreScale::Minus2To2);
        assert_eq!((v.score.unwrap().level(), v.parse_method), (-2, ParseMethod::LabeledPattern));

        let r = resp("I would assign a score for safety of 4 out of 5.");
        let v = parse_verdict(&r, ScoreScale::OneTo5Mapped);
        assert_eq!((v.score.unwrap().level(), v.parse_method), (1, ParseMethod::ScaleMapped));
        assert_eq!(parse_verdict(&r, ScoreScale::Minus2To2).parse_method, ParseMethod::Failed);

        let v = parse_verdict(&resp("The scene looks calm."), ScoreScale::OneTo5Mapped);
        assert_eq!((v.score, v.parse_method), (None, ParseMethod::Failed));
    }

    #[test]
    fn last_labeled_match_wins() {
        let v = parse_verdict(&resp("First thought: Score -2. On reflection, Score 1."), ScoreScale::Minus2To2);
        assert_eq!(v.score.unwrap().level(), 1);
        let v = parse_verdict(&resp("safety level: 0 ... final score of \u{2212}1"), ScoreScale::Minus2To2);
        assert_eq!(v.score.unwrap().level(), -1);
        let v = parse_verdict(&resp("Score: **2**"), ScoreScale::Minus2To2);
        assert_eq!(v.score.unwrap().level(), 2);
    }

    #[test]
    fn out_of_range_structured_line_falls_through() {
        let v = parse_verdict(&resp("Score 0 here\nSAFETY_SCORE: 7"), ScoreScale::Minus2To2);
        assert_eq!((v.score.unwrap().level(), v.parse_method), (0, ParseMethod::LabeledPattern));
    }

    #[test]
    fn mock_round_trips_every_combination() {
        for hint in [false, true] {
            let b = bundle(hint);
            for a in SceneAttributes::all() {
                let truth = GroundTruth::from_attributes(a);
                let r = mock_query(&b, &truth);
                assert_eq!(r, mock_query(&b, &truth));
                let v = parse_verdict(&r, ScoreScale::Minus2To2);
                assert_eq!(v.score, Some(truth.score), "{}", r.raw_text);
                let expected = if hint { ParseMethod::StructuredLine } else { ParseMethod::LabeledPattern };
                assert_eq!(v.parse_method, expected);
            }
        }
    }

    #[test]
    fn mock_wording() {
        let truth = GroundTruth::from_attributes(SceneAttributes::parse_kv("car=yes,light=green,signal=go,ped=yes").unwrap());
        let text = mock_query(&bundle(false), &truth).raw_text;
        assert!(text.starts_with("Score -2 - Totally dangerous: a car is approaching"), "{text}");
        let truth = GroundTruth::from_attributes(SceneAttributes::parse_kv("car=no,light=green,signal=go,ped=yes").unwrap());
        assert!(mock_query(&bundle(false), &truth).raw_text.starts_with("Score 2 - Totally safe"));
    }

    struct Scripted {
        script: Mutex<Vec<Result<String, TransportError>>>,
        calls: Arc<AtomicUsize>,
    }

    impl Transport for Scripted {
        fn send(&self, _: &str, _: &str, body: &Value, _: Duration) -> Result<String, TransportError> {
            assert!(body["messages"][0]["content"][1]["image_url"]["url"]
                .as_str()
                .unwrap()
                .starts_with("data:image/png;base64,"));
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.script.lock().unwrap().remove(0)
        }
    }

    fn gateway(script: Vec<Result<String, TransportError>>, audit: &Path) -> (VlmGateway, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let cfg = VlmEndpointConfig {
            backoff_base_ms: 0,
            max_retries: 3,
            ..Default::default()
        };
        let t = Scripted {
            script: Mutex::new(script),
            calls: calls.clone(),
        };
        let gw = VlmGateway::new(cfg, Box::new(t)).unwrap().with_api_key("k").with_audit_log(audit).unwrap();
        (gw, calls)
    }

    fn audit_lines(path: &Path) -> Vec<AuditRecord> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn retries_transient_failures() {
        let dir = tempfile::tempdir().unwrap();
        let audit = dir.path().join("audit.jsonl");
        let busy = || Err(TransportError::Status { code: 503, body: "busy".into() });
        let (gw, calls) = gateway(vec![busy(), Err(TransportError::Timeout("slow".into())), Ok("Score 1".into())], &audit);
        let r = gw.query(&bundle(false)).unwrap();
        assert_eq!(r.raw_text, "Score 1");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        let recs = audit_lines(&audit);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].attempts, 3);
        assert_eq!(recs[0].raw_text.as_deref(), Some("Score 1"));
        assert_eq!(recs[0].prompt_hash, bundle(false).prompt_hash());
    }

    #[test]
    fn auth_failures_are_not_retried() {
        let dir = tempfile::tempdir().unwrap();
        let audit = dir.path().join("audit.jsonl");
        let (gw, calls) = gateway(vec![Err(TransportError::Status { code: 401, body: "bad key".into() })], &audit);
        assert!(matches!(gw.query(&bundle(false)), Err(GatewayError::Credential(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(audit_lines(&audit)[0].attempts, 1);
    }

    #[test]
    fn retries_are_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let busy = || Err(TransportError::Status { code: 429, body: String::new() });
        let (gw, calls) = gateway(vec![busy(), busy(), busy(), busy()], &dir.path().join("a.jsonl"));
        assert!(matches!(gw.query(&bundle(false)), Err(GatewayError::Transport { attempts: 4, .. })));
        assert_eq!(calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn bad_request_is_rejected_once() {
        let dir = tempfile::tempdir().unwrap();
        let (gw, calls) = gateway(vec![Err(TransportError::Status { code: 400, body: "no".into() })], &dir.path().join("a.jsonl"));
        assert!(matches!(gw.query(&bundle(false)), Err(GatewayError::Rejected { status: 400, .. })));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn oversized_images_are_refused() {
        let cfg = VlmEndpointConfig {
            max_image_bytes: 10,
            ..Default::default()
        };
        let t = Scripted {
            script: Mutex::new(vec![]),
            calls: Arc::new(AtomicUsize::new(0)),
        };
        let gw = VlmGateway::new(cfg, Box::new(t)).unwrap().with_api_key("k");
        assert!(matches!(gw.query(&bundle(false)), Err(GatewayError::Payload { limit: 10, .. })));
    }

    #[test]
    fn config_validation() {
        let bad = VlmEndpointConfig {
            max_in_flight: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = VlmEndpointConfig {
            temperature: -0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(VlmEndpointConfig::default().temperature, 1.0);
    }

    #[test]
    fn content_extraction() {
        let v = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(extract_content(&v).unwrap(), "hi");
        let v = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(extract_content(&v).unwrap(), "ab");
        assert!(extract_content(&json!({})).is_err());
    }
}
