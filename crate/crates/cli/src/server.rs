//! JSON API over the annotation store plus static serving of the UI.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tiny_http::{Header, Method, Request, Response, Server};

use crosswalk_core::dataset::{parse_json, AnnotationInput, AnnotationStore, DatasetError, ManifestItem};
use crosswalk_core::pipeline::{render_item_variant, RenderError, RenderOptions};
use crosswalk_core::rules::{classify, LightState, SafetyScore, SceneAttributes, SignalState, TriState};
use crosswalk_core::vision::Variant;

use crate::error::CliError;

const OPENAPI: &str = include_str!("openapi.json");
const MAX_BODY: u64 = 64 * 1024;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub manifest: PathBuf,
    pub ui_dir: Option<PathBuf>,
    pub threads: usize,
    pub render: RenderOptions,
}

type Slot = Arc<Mutex<Option<Arc<Vec<u8>>>>>;

pub struct App {
    store: AnnotationStore,
    ui_dir: Option<PathBuf>,
    render: RenderOptions,
    /// PNG bytes keyed by (item, variant, input content hash).
    cache: Mutex<HashMap<(String, Variant, String), Slot>>,
}

struct Reply {
    status: u16,
    content_type: &'static str,
    body: Vec<u8>,
}

impl Reply {
    fn json(status: u16, v: &Value) -> Self {
        let mut body = serde_json::to_vec_pretty(v).expect("json value serializes");
        body.push(b'\n');
        Self {
            status,
            content_type: "application/json",
            body,
        }
    }

    fn error(status: u16, message: impl Into<String>) -> Self {
        Self::json(status, &json!({"error": message.into()}))
    }

    fn from_dataset(e: DatasetError) -> Self {
        match &e {
            DatasetError::UnknownItem(_) => Self::error(404, e.to_string()),
            DatasetError::Conflict { .. } => Self::json(409, &json!({"error": e.to_string(), "retryable": true})),
            DatasetError::Schema { pointer, message } => {
                Self::json(422, &json!({"error": "invalid request body", "pointer": pointer, "message": message}))
            }
            _ => Self::error(500, e.to_string()),
        }
    }
}

fn score_json(s: SafetyScore) -> Value {
    json!({"level": s.level(), "name": s, "title": s.title()})
}

fn query_pairs(url: &str) -> HashMap<String, String> {
    url.split_once('?')
        .map(|(_, q)| url::form_urlencoded::parse(q.as_bytes()).into_owned().collect())
        .unwrap_or_default()
}

fn variants_available(item: &ManifestItem) -> Value {
    json!({
        "none": true,
        "bbox": item.detections.is_some(),
        "mask": item.masks.is_some(),
        "flow": item.has_frame_pairs(),
    })
}

impl App {
    pub fn open(manifest: &Path, ui_dir: Option<PathBuf>, render: RenderOptions) -> Result<Self, CliError> {
        Ok(Self {
            store: AnnotationStore::open(manifest)?,
            ui_dir,
            render,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn handle(&self, method: &Method, url: &str, body: &[u8]) -> Reply {
        let path = url.split('?').next().unwrap_or("");
        let segs: Vec<&str> = path.trim_matches('/').split('/').filter(|s| !s.is_empty()).collect();
        match (method, segs.as_slice()) {
            (Method::Get, ["api", "items"]) => self.items(),
            (Method::Get, ["api", "items", id]) => self.item(id),
            (Method::Get, ["api", "items", id, "image"]) => self.image(id, &query_pairs(url)),
            (Method::Post, ["api", "items", id, "annotations"]) => self.annotate(id, body),
            (Method::Get, ["api", "items", id, "consensus"]) => self.consensus(id),
            (Method::Get, ["api", "agreement"]) => self.agreement(),
            (Method::Get, ["api", "rules", "classify"]) => classify_reply(&query_pairs(url)),
            (Method::Get, ["api", "spec"]) => Reply {
                status: 200,
                content_type: "application/json",
                body: OPENAPI.as_bytes().to_vec(),
            },
            (_, ["api", ..]) if self.known_route(&segs) => Reply::error(405, format!("{method} not allowed on {path}")),
            (_, ["api", ..]) => Reply::error(404, format!("no route for {path}")),
            (Method::Get, _) => self.static_file(&segs),
            _ => Reply::error(405, format!("{method} not allowed on {path}")),
        }
    }

    fn known_route(&self, segs: &[&str]) -> bool {
        matches!(
            segs,
            ["api", "items"]
                | ["api", "items", _]
                | ["api", "items", _, "image" | "annotations" | "consensus"]
                | ["api", "agreement"]
                | ["api", "rules", "classify"]
                | ["api", "spec"]
        )
    }

    fn items(&self) -> Reply {
        let snap = self.store.snapshot();
        let items: Vec<Value> = snap.items.iter().map(item_summary).collect();
        Reply::json(200, &json!({ "items": items }))
    }

    fn item(&self, id: &str) -> Reply {
        let snap = self.store.snapshot();
        let Some(item) = snap.item(id) else {
            return Reply::error(404, format!("unknown item {id:?}"));
        };
        let mut v = item_summary(item);
        v["annotations"] = json!(item.annotations);
        Reply::json(200, &v)
    }

    fn consensus(&self, id: &str) -> Reply {
        match self.store.consensus(id) {
            Ok(c) => Reply::json(
                200,
                &json!({
                    "item_id": id,
                    "consensus": c.map(|c| json!({
                        "score": score_json(c.score),
                        "method": c.method,
                        "annotator_count": c.annotator_count,
                    })),
                }),
            ),
            Err(e) => Reply::from_dataset(e),
        }
    }

    fn agreement(&self) -> Reply {
        let a = self.store.agreement();
        let mut v = json!(a);
        if a.kappa.is_none() {
            v["status"] = json!("insufficient data");
        }
        Reply::json(200, &v)
    }

    fn annotate(&self, id: &str, body: &[u8]) -> Reply {
        if self.store.snapshot().item(id).is_none() {
            return Reply::error(404, format!("unknown item {id:?}"));
        }
        let Ok(text) = std::str::from_utf8(body) else {
            return Reply::json(422, &json!({"error": "invalid request body", "pointer": "", "message": "body is not UTF-8"}));
        };
        let input: AnnotationInput = match parse_json(text) {
            Ok(i) => i,
            Err(e) => return Reply::from_dataset(e),
        };
        match self.store.annotate(id, &input) {
            Ok(o) => Reply::json(
                200,
                &json!({
                    "item_id": o.item_id,
                    "annotation": o.annotation,
                    "derived_score": score_json(o.derived_score),
                    "consensus": {
                        "score": score_json(o.consensus.score),
                        "method": o.consensus.method,
                        "annotator_count": o.consensus.annotator_count,
                    },
                    "changed": o.changed,
                    "revision": o.revision,
                }),
            ),
            Err(e) => Reply::from_dataset(e),
        }
    }

    fn image(&self, id: &str, query: &HashMap<String, String>) -> Reply {
        let variant = match query.get("variant").map(String::as_str).unwrap_or("none").parse::<Variant>() {
            Ok(v) => v,
            Err(e) => return Reply::json(422, &json!({"error": "invalid variant", "pointer": "variant", "message": e})),
        };
        let snap = self.store.snapshot();
        let Some(item) = snap.item(id) else {
            return Reply::error(404, format!("unknown item {id:?}"));
        };
        let hash = match input_hash(&snap, item, variant) {
            Ok(h) => h,
            Err(reason) => return Reply::json(422, &json!({"error": "variant unavailable", "variant": variant, "reason": reason})),
        };
        let slot = self
            .cache
            .lock()
            .expect("cache lock poisoned")
            .entry((id.to_string(), variant, hash))
            .or_default()
            .clone();
        // per-key lock: concurrent requests for one image render it once
        let mut guard = slot.lock().expect("slot lock poisoned");
        if guard.is_none() {
            let rendered = render_item_variant(&snap, item, variant, &self.render)
                .and_then(|r| r.image.raster.encode_png().map_err(RenderError::from));
            match rendered {
                Ok(png) => *guard = Some(Arc::new(png)),
                Err(RenderError::Unavailable { reason, .. }) => {
                    return Reply::json(422, &json!({"error": "variant unavailable", "variant": variant, "reason": reason}))
                }
                Err(e) => return Reply::error(500, e.to_string()),
            }
        }
        Reply {
            status: 200,
            content_type: "image/png",
            body: guard.as_ref().expect("filled above").as_ref().clone(),
        }
    }

    fn static_file(&self, segs: &[&str]) -> Reply {
        let Some(root) = &self.ui_dir else {
            return if segs.is_empty() {
                Reply {
                    status: 200,
                    content_type: "text/plain; charset=utf-8",
                    body: b"Annotation API is running; no UI directory was given (--ui-dir). See /api/spec.\n".to_vec(),
                }
            } else {
                Reply::error(404, "not found")
            };
        };
        let rel: PathBuf = if segs.is_empty() { PathBuf::from("index.html") } else { segs.iter().collect() };
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Reply::error(404, "not found");
        }
        let mut path = root.join(&rel);
        if path.is_dir() {
            path = path.join("index.html");
        }
        match fs::read(&path) {
            Ok(body) => Reply {
                status: 200,
                content_type: content_type(&path),
                body,
            },
            Err(_) => Reply::error(404, "not found"),
        }
    }
}

fn item_summary(item: &ManifestItem) -> Value {
    let consensus = crosswalk_core::dataset::consensus(&item.annotations).ok();
    json!({
        "id": item.id,
        "revision": item.revision,
        "annotators": item.annotations.iter().map(|a| a.annotator_id.as_str()).collect::<Vec<_>>(),
        "annotation_count": item.annotations.len(),
        "consensus": consensus.map(|c| score_json(c.score)),
        "variants": variants_available(item),
    })
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

/// Hash of every file the variant reads, so edits on disk invalidate the cache.
fn input_hash(
    manifest: &crosswalk_core::dataset::DatasetManifest,
    item: &ManifestItem,
    variant: Variant,
) -> Result<String, String> {
    let mut files: Vec<&str> = Vec::new();
    for frames in item.images.values() {
        let upto = if variant == Variant::Flow { 2 } else { 1 };
        files.extend(frames.iter().take(upto).map(String::as_str));
    }
    match variant {
        Variant::Bbox => files.push(item.detections.as_deref().ok_or("no detections file")?),
        Variant::Mask => files.push(item.masks.as_deref().ok_or("no masks file")?),
        Variant::Flow if !item.has_frame_pairs() => {
            return Err("flow needs frame pairs for the front, left and right views".into())
        }
        _ => {}
    }
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(manifest.resolve(rel)).map_err(|e| format!("{rel}: {e}"))?;
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn parse_param<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<T, Reply>
where
    T::Err: std::fmt::Display,
{
    let raw = q
        .get(key)
        .ok_or_else(|| Reply::json(422, &json!({"error": "missing parameter", "pointer": key})))?;
    raw.parse().map_err(|e: T::Err| {
        Reply::json(422, &json!({"error": "invalid parameter", "pointer": key, "message": e.to_string()}))
    })
}

fn classify_reply(q: &HashMap<String, String>) -> Reply {
    let attrs = (|| {
        Ok::<_, Reply>(SceneAttributes::new(
            parse_param::<TriState>(q, "car")?,
            parse_param::<LightState>(q, "light")?,
            parse_param::<SignalState>(q, "signal")?,
            parse_param::<TriState>(q, "ped")?,
        ))
    })();
    match attrs {
        Ok(a) => {
            let (score, provenance) = classify(&a);
            let mut v = score_json(score);
            v["attributes"] = json!(a);
            v["provenance"] = json!(provenance);
            v["fallback"] = json!(provenance.is_fallback());
            Reply::json(200, &v)
        }
        Err(r) => r,
    }
}

fn respond(app: &App, mut req: Request) {
    let method = req.method().clone();
    let url = req.url().to_string();
    let mut body = Vec::new();
    let reply = match req.as_reader().take(MAX_BODY + 1).read_to_end(&mut body) {
        Ok(_) if body.len() as u64 > MAX_BODY => Reply::error(413, "request body too large"),
        Ok(_) => app.handle(&method, &url, &body),
        Err(e) => Reply::error(400, format!("reading body: {e}")),
    };
    log::debug!("{method} {url} -> {}", reply.status);
    let header = Header::from_bytes("Content-Type", reply.content_type).expect("static header is valid");
    let resp = Response::from_data(reply.body).with_status_code(reply.status).with_header(header);
    if let Err(e) = req.respond(resp) {
        log::warn!("{method} {url}: {e}");
    }
}

pub struct RunningServer {
    pub addr: SocketAddr,
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
}

impl RunningServer {
    pub fn shutdown(self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers {
            let _ = w.join();
        }
    }

    pub fn join(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }
}

pub fn start(cfg: &ServeConfig) -> Result<RunningServer, CliError> {
    let app = Arc::new(App::open(&cfg.manifest, cfg.ui_dir.clone(), cfg.render)?);
    let server = Server::http((cfg.host.as_str(), cfg.port))
        .map_err(|e| CliError::runtime(format!("binding {}:{}: {e}", cfg.host, cfg.port)))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| CliError::runtime("server is not bound to an IP address"))?;
    let server = Arc::new(server);
    let workers = (0..cfg.threads.max(1))
        .map(|_| {
            let (server, app) = (server.clone(), app.clone());
            std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    respond(&app, req);
                }
            })
        })
        .collect();
    Ok(RunningServer { addr, server, workers })
}

pub fn serve(cfg: ServeConfig) -> Result<(), CliError> {
    let running = start(&cfg)?;
    eprintln!("listening on http://{}", running.addr);
    running.join();
    Ok(())
}
