//! Prompting-condition experiments: per-item queries, accuracy and
//! Spearman's rho against labels, and table/JSON/CSV reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{consensus, write_atomic, DatasetError, DatasetManifest, ManifestItem};
use crate::gateway::{mock_query, parse_verdict, GatewayError, ParseMethod, VlmGateway, VlmResponse};
use crate::pipeline::{load_ground_truth, render_item_variant, RenderError, RenderOptions};
use crate::prompt::{build_prompt, PromptConfig, ScoreScale};
use crate::rules::SafetyScore;
use crate::vision::{ComposedImage, Variant};

pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to score")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooShort(usize),
    #[error("degenerate ranking: one of the inputs is constant")]
    DegenerateRanking,
    #[error("invalid conditions: {0}")]
    Conditions(String),
    #[error("run interrupted after {new_queries} new queries; rerun to resume")]
    Interrupted { new_queries: usize },
    #[error("{item_id} / {condition}: {source}")]
    Gateway {
        item_id: String,
        condition: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How unparseable answers enter the accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// In the denominator, never in the numerator.
    #[default]
    CountAsWrong,
    /// Left out entirely.
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExperimentCondition {
    pub name: String,
    pub variant: Variant,
    pub include_cot: bool,
    #[serde(default)]
    pub score_scale: ScoreScale,
}

impl ExperimentCondition {
    pub fn new(name: &str, variant: Variant, include_cot: bool) -> Self {
        Self {
            name: name.into(),
            variant,
            include_cot,
            score_scale: ScoreScale::Minus2To2,
        }
    }
}

/// The five standard rows, in table order.
pub fn standard_conditions() -> Vec<ExperimentCondition> {
    vec![
        ExperimentCondition::new("Baseline", Variant::None, false),
        ExperimentCondition::new("+ CoT", Variant::None, true),
        ExperimentCondition::new("+ bbx", Variant::Bbox, false),
        ExperimentCondition::new("+ mask", Variant::Mask, false),
        ExperimentCondition::new("+ flow", Variant::Flow, false),
    ]
}

/// `all`, or a comma list of `baseline`, `cot`, `bbx`/`bbox`, `mask`, `flow`.
pub fn parse_conditions(spec: &str) -> Result<Vec<ExperimentCondition>, EvalError> {
    let all = standard_conditions();
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(all);
    }
    let mut out: Vec<ExperimentCondition> = Vec::new();
    for key in spec.split(',').map(|k| k.trim().to_ascii_lowercase()).filter(|k| !k.is_empty()) {
        let idx = match key.trim_start_matches('+').trim() {
            "baseline" => 0,
            "cot" => 1,
            "bbx" | "bbox" => 2,
            "mask" => 3,
            "flow" => 4,
            other => return Err(EvalError::Conditions(format!("unknown condition {other:?}"))),
        };
        if out.iter().any(|c| c.name == all[idx].name) {
            return Err(EvalError::Conditions(format!("condition {key:?} listed twice")));
        }
        out.push(all[idx].clone());
    }
    if out.is_empty() {
        return Err(EvalError::Conditions("no conditions given".into()));
    }
    Ok(out)
}

fn check_unique(conditions: &[ExperimentCondition]) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    for c in conditions {
        if !seen.insert(c.name.as_str()) {
            return Err(EvalError::Conditions(format!("duplicate condition name {:?}", c.name)));
        }
    }
    if conditions.is_empty() {
        return Err(EvalError::Conditions("no conditions given".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Consensus,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item_id: String,
    pub condition: String,
    pub variant: Variant,
    pub include_cot: bool,
    pub score_scale: ScoreScale,
    pub label: SafetyScore,
    pub label_source: LabelSource,
    pub predicted: Option<SafetyScore>,
    pub parse_method: ParseMethod,
    pub prompt_hash: String,
    pub image_hash: String,
    pub model_name: String,
    pub raw_response: String,
}

type RecordKey = (String, String, String, String);

impl EvalRecord {
    fn key(&self) -> RecordKey {
        (
            self.item_id.clone(),
            self.condition.clone(),
            self.prompt_hash.clone(),
            self.image_hash.clone(),
        )
    }
}

pub fn accuracy(records: &[EvalRecord], policy: FailurePolicy) -> Result<f64, EvalError> {
    let considered: Vec<&EvalRecord> = match policy {
        FailurePolicy::CountAsWrong => records.iter().collect(),
        FailurePolicy::Exclude => records.iter().filter(|r| r.predicted.is_some()).collect(),
    };
    if considered.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = considered.iter().filter(|r| r.predicted == Some(r.label)).count();
    Ok(correct as f64 / considered.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[i64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by_key(|&i| values[i]);
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        // positions start..=end hold ranks start+1..=end+1
        let avg = (start + end) as f64 / 2.0 + 1.0;
        for &i in &order[start..=end] {
            ranks[i] = avg;
        }
        start = end + 1;
    }
    ranks
}

/// Pearson correlation of the average-rank vectors.
pub fn spearman_rho(x: &[i64], y: &[i64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::TooShort(x.len()));
    }
    if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
        return Err(EvalError::DegenerateRanking);
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub name: String,
    pub variant: Variant,
    pub include_cot: bool,
    pub n: usize,
    pub correct: usize,
    pub parse_failures: usize,
    pub accuracy: Option<f64>,
    pub spearman_rho: Option<f64>,
    /// Why rho is undefined, when it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_note: Option<String>,
    /// Prediction counts per level, -2 first.
    pub predictions: [usize; 5],
    pub labels: [usize; 5],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub item_id: String,
    pub condition: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub failure_policy: FailurePolicy,
    pub conditions: Vec<ConditionMetrics>,
    #[serde(default)]
    pub skipped: Vec<SkippedItem>,
}

fn histogram<'a>(scores: impl Iterator<Item = &'a SafetyScore>) -> [usize; 5] {
    let mut h = [0; 5];
    for s in scores {
        h[s.index()] += 1;
    }
    h
}

pub fn condition_metrics(condition: &ExperimentCondition, records: &[EvalRecord], policy: FailurePolicy) -> ConditionMetrics {
    let parsed: Vec<&EvalRecord> = records.iter().filter(|r| r.predicted.is_some()).collect();
    let preds: Vec<i64> = parsed.iter().map(|r| r.predicted.expect("filtered").level() as i64).collect();
    let labels: Vec<i64> = parsed.iter().map(|r| r.label.level() as i64).collect();
    let (spearman_rho, rho_note) = match spearman_rho(&preds, &labels) {
        Ok(rho) => (Some(rho), None),
        Err(e) => (None, Some(e.to_string())),
    };
    ConditionMetrics {
        name: condition.name.clone(),
        variant: condition.variant,
        include_cot: condition.include_cot,
        n: records.len(),
        correct: records.iter().filter(|r| r.predicted == Some(r.label)).count(),
        parse_failures: records.len() - parsed.len(),
        accuracy: accuracy(records, policy).ok(),
        spearman_rho,
        rho_note,
        predictions: histogram(records.iter().filter_map(|r| r.predicted.as_ref())),
        labels: histogram(records.iter().map(|r| &r.label)),
    }
}

/// Aggregates records into a report; the order of `records` is irrelevant.
pub fn report_from_records(
    conditions: &[ExperimentCondition],
    records: &[EvalRecord],
    policy: FailurePolicy,
    mut skipped: Vec<SkippedItem>,
) -> EvalReport {
    let mut by_condition: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        by_condition.entry(r.condition.as_str()).or_default().push(r.clone());
    }
    skipped.sort_by(|a, b| (&a.condition, &a.item_id).cmp(&(&b.condition, &b.item_id)));
    EvalReport {
        failure_policy: policy,
        conditions: conditions
            .iter()
            .map(|c| {
                let mut rs = by_condition.remove(c.name.as_str()).unwrap_or_default();
                rs.sort_by(|a, b| a.item_id.cmp(&b.item_id));
                condition_metrics(c, &rs, policy)
            })
            .collect(),
        skipped,
    }
}

/// Conditions named in a record set: standard rows first in table order,
/// then any others by first appearance.
pub fn conditions_in_records(records: &[EvalRecord]) -> Vec<ExperimentCondition> {
    let mut seen: Vec<ExperimentCondition> = Vec::new();
    for r in records {
        if !seen.iter().any(|c| c.name == r.condition) {
            seen.push(ExperimentCondition {
                name: r.condition.clone(),
                variant: r.variant,
                include_cot: r.include_cot,
                score_scale: r.score_scale,
            });
        }
    }
    let standard = standard_conditions();
    let rank = |c: &ExperimentCondition| standard.iter().position(|s| s.name == c.name).unwrap_or(usize::MAX);
    seen.sort_by_key(rank);
    seen
}

pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            // an interrupted append leaves a torn last line
            Err(e) => log::warn!("{}:{}: ignoring unreadable record: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Where answers come from.
pub enum Backend<'a> {
    /// Ground-truth oracle; needs a truth sidecar per item.
    Mock,
    Gateway(&'a VlmGateway),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub parallelism: usize,
    pub structured_output_hint: bool,
    pub failure_policy: FailurePolicy,
    pub render: RenderOptions,
    /// Stop after this many fresh queries, leaving the run resumable.
    pub stop_after: Option<usize>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            parallelism: 4,
            structured_output_hint: false,
            failure_policy: FailurePolicy::default(),
            render: RenderOptions::default(),
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub queried: usize,
    pub reused: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub records: Vec<EvalRecord>,
    pub stats: RunStats,
}

/// Consensus of the item's annotations, else its ground-truth sidecar.
pub fn item_label(manifest: &DatasetManifest, item: &ManifestItem) -> Option<(SafetyScore, LabelSource)> {
    if let Ok(c) = consensus(&item.annotations) {
        return Some((c.score, LabelSource::Consensus));
    }
    load_ground_truth(manifest, item).ok().map(|t| (t.score, LabelSource::GroundTruth))
}

struct Shared<'a> {
    manifest: &'a DatasetManifest,
    conditions: &'a [ExperimentCondition],
    backend: &'a Backend<'a>,
    opts: &'a RunOptions,
    cache: HashMap<RecordKey, EvalRecord>,
    sink: Mutex<std::fs::File>,
    sink_path: PathBuf,
    new_queries: AtomicUsize,
    stop: AtomicBool,
}

#[derive(Default)]
struct WorkerOut {
    records: Vec<EvalRecord>,
    skipped: Vec<SkippedItem>,
    stats: RunStats,
}

fn skip(out: &mut WorkerOut, item: &ManifestItem, condition: &ExperimentCondition, reason: String) {
    log::info!("skipping {} / {}: {reason}", item.id, condition.name);
    out.stats.skipped += 1;
    out.skipped.push(SkippedItem {
        item_id: item.id.clone(),
        condition: condition.name.clone(),
        reason,
    });
}

fn run_item(shared: &Shared<'_>, item: &ManifestItem, out: &mut WorkerOut) -> Result<(), EvalError> {
    let Some((label, label_source)) = item_label(shared.manifest, item) else {
        for c in shared.conditions {
            skip(out, item, c, "no consensus annotation and no ground truth".into());
        }
        return Ok(());
    };
    let truth = match shared.backend {
        Backend::Mock => match load_ground_truth(shared.manifest, item) {
            Ok(t) => Some(t),
            Err(e) => {
                for c in shared.conditions {
                    skip(out, item, c, format!("mock backend needs ground truth: {e}"));
                }
                return Ok(());
            }
        },
        Backend::Gateway(_) => None,
    };

    let mut images: HashMap<Variant, Result<ComposedImage, String>> = HashMap::new();
    for condition in shared.conditions {
        if shared.stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        if !images.contains_key(&condition.variant) {
            let rendered = match render_item_variant(shared.manifest, item, condition.variant, &shared.opts.render) {
                Ok(r) => Ok(r.image),
                Err(RenderError::Unavailable { reason, .. }) => Err(reason),
                Err(e) => return Err(e.into()),
            };
            images.insert(condition.variant, rendered);
        }
        let image = match &images[&condition.variant] {
            Ok(img) => img.clone(),
            Err(reason) => {
                skip(out, item, condition, reason.clone());
                continue;
            }
        };
        let cfg = PromptConfig {
            include_cot: condition.include_cot,
            variant: condition.variant,
            structured_output_hint: shared.opts.structured_output_hint,
            score_scale: condition.score_scale,
        };
        let bundle = build_prompt(&cfg, image).expect("image rendered for this variant");
        let key: RecordKey = (
            item.id.clone(),
            condition.name.clone(),
            bundle.prompt_hash(),
            bundle.image.raster.content_hash(),
        );
        if let Some(r) = shared.cache.get(&key) {
            if r.label == label {
                out.stats.reused += 1;
                out.records.push(r.clone());
                continue;
            }
        }
        if let Some(limit) = shared.opts.stop_after {
            if shared.new_queries.fetch_add(1, Ordering::SeqCst) >= limit {
                shared.stop.store(true, Ordering::SeqCst);
                return Ok(());
            }
        } else {
            shared.new_queries.fetch_add(1, Ordering::SeqCst);
        }
        let resp: VlmResponse = match (shared.backend, &truth) {
            (Backend::Mock, Some(t)) => mock_query(&bundle, t),
            (Backend::Gateway(gw), _) => gw.query(&bundle).map_err(|source| EvalError::Gateway {
                item_id: item.id.clone(),
                condition: condition.name.clone(),
                source,
            })?,
            (Backend::Mock, None) => unreachable!("truth loaded for mock backend"),
        };
        let verdict = parse_verdict(&resp, condition.score_scale);
        let record = EvalRecord {
            item_id: key.0,
            condition: key.1,
            variant: condition.variant,
            include_cot: condition.include_cot,
            score_scale: condition.score_scale,
            label,
            label_source,
            predicted: verdict.score,
            parse_method: verdict.parse_method,
            prompt_hash: key.2,
            image_hash: key.3,
            model_name: resp.model_name,
            raw_response: resp.raw_text,
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        {
            let mut f = shared.sink.lock().expect("records lock poisoned");
            f.write_all(line.as_bytes()).map_err(|e| io_err(&shared.sink_path, e))?;
            f.flush().map_err(|e| io_err(&shared.sink_path, e))?;
        }
        out.stats.queried += 1;
        out.records.push(record);
    }
    Ok(())
}

/// Runs every (item, condition) pair, reusing answers already in
/// `records.jsonl` whose prompt and image hashes still match, then writes
/// the report files into `opts.out_dir`.
pub fn run_experiment(
    manifest: &DatasetManifest,
    conditions: &[ExperimentCondition],
    backend: &Backend<'_>,
    opts: &RunOptions,
) -> Result<RunOutcome, EvalError> {
    check_unique(conditions)?;
    fs::create_dir_all(&opts.out_dir).map_err(|e| io_err(&opts.out_dir, e))?;
    let sink_path = opts.out_dir.join(RECORDS_FILE);
    let cache: HashMap<RecordKey, EvalRecord> = load_records(&sink_path)?.into_iter().map(|r| (r.key(), r)).collect();
    let sink = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&sink_path)
        .map_err(|e| io_err(&sink_path, e))?;
    let shared = Shared {
        manifest,
        conditions,
        backend,
        opts,
        cache,
        sink: Mutex::new(sink),
        sink_path,
        new_queries: AtomicUsize::new(0),
        stop: AtomicBool::new(false),
    };

    let next = AtomicUsize::new(0);
    let workers = opts.parallelism.max(1).min(manifest.items.len().max(1));
    let results: Vec<Result<WorkerOut, EvalError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut out = WorkerOut::default();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= manifest.items.len() || shared.stop.load(Ordering::SeqCst) {
                            return Ok(out);
                        }
                        if let Err(e) = run_item(&shared, &manifest.items[i], &mut out) {
                            shared.stop.store(true, Ordering::SeqCst);
                            return Err(e);
                        }
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });

    let mut merged = WorkerOut::default();
    for r in results {
        let r = r?;
        merged.records.extend(r.records);
        merged.skipped.extend(r.skipped);
        merged.stats.queried += r.stats.queried;
        merged.stats.reused += r.stats.reused;
        merged.stats.skipped += r.stats.skipped;
    }
    if shared.stop.load(Ordering::SeqCst) {
        return Err(EvalError::Interrupted {
            new_queries: merged.stats.queried,
        });
    }

    let rank: HashMap<&str, usize> = conditions.iter().enumerate().map(|(i, c)| (c.name.as_str(), i)).collect();
    merged
        .records
        .sort_by(|a, b| (rank[a.condition.as_str()], &a.item_id).cmp(&(rank[b.condition.as_str()], &b.item_id)));
    let report = report_from_records(conditions, &merged.records, opts.failure_policy, merged.skipped);
    write_report(&opts.out_dir, &render_report(&report)?)?;
    Ok(RunOutcome {
        report,
        records: merged.records,
        stats: merged.stats,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    pub markdown: String,
    pub json: String,
    pub histograms_csv: String,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// The two-metric table, one row per condition in report order.
pub fn metrics_table(report: &EvalReport) -> String {
    let mut s = String::from("| Method | Accuracy | Spearman's ρ |\n|---|---:|---:|\n");
    for c in &report.conditions {
        s.push_str(&format!("| {} | {} | {} |\n", c.name, fmt_metric(c.accuracy), fmt_metric(c.spearman_rho)));
    }
    s
}

fn histograms_csv(report: &EvalReport) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["condition", "series", "-2", "-1", "0", "1", "2"])?;
    for c in &report.conditions {
        for (series, h) in [("label", &c.labels), ("prediction", &c.predictions)] {
            let mut row = vec![c.name.clone(), series.to_string()];
            row.extend(h.iter().map(|n| n.to_string()));
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn render_report(report: &EvalReport) -> Result<RenderedReport, EvalError> {
    let mut md = String::from("# Evaluation report\n\n");
    md.push_str(&metrics_table(report));
    md.push_str(match report.failure_policy {
        FailurePolicy::CountAsWrong => "\nUnparseable answers count as wrong for accuracy and are left out of ρ.\n",
        FailurePolicy::Exclude => "\nUnparseable answers are left out of both accuracy and ρ.\n",
    });
    md.push_str("\n| Method | n | Correct | Parse failures | Note |\n|---|---:|---:|---:|---|\n");
    for c in &report.conditions {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            c.name,
            c.n,
            c.correct,
            c.parse_failures,
            c.rho_note.as_deref().unwrap_or("")
        ));
    }
    md.push_str("\n## Score distribution\n\n| Method | Series | -2 | -1 | 0 | 1 | 2 |\n|---|---|---:|---:|---:|---:|---:|\n");
    for c in &report.conditions {
        for (series, h) in [("label", &c.labels), ("prediction", &c.predictions)] {
            let cells: Vec<String> = h.iter().map(|n| n.to_string()).collect();
            md.push_str(&format!("| {} | {series} | {} |\n", c.name, cells.join(" | ")));
        }
    }
    if !report.skipped.is_empty() {
        md.push_str(&format!("\n## Skipped ({})\n\n", report.skipped.len()));
        for s in &report.skipped {
            md.push_str(&format!("- {} / {}: {}\n", s.item_id, s.condition, s.reason));
        }
    }
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    Ok(RenderedReport {
        markdown: md,
        json,
        histograms_csv: histograms_csv(report)?,
    })
}

pub fn write_report(dir: &Path, rendered: &RenderedReport) -> Result<(), EvalError> {
    for (name, body) in [
        ("report.md", &rendered.markdown),
        ("report.json", &rendered.json),
        ("histograms.csv", &rendered.histograms_csv),
    ] {
        write_atomic(&dir.join(name), body.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pred: Option<i64>, label: i64) -> EvalRecord {
        EvalRecord {
            item_id: "i".into(),
            condition: "Baseline".into(),
            variant: Variant::None,
            include_cot: false,
            score_scale: ScoreScale::Minus2To2,
            label: SafetyScore::from_level(label).unwrap(),
            label_source: LabelSource::GroundTruth,
            predicted: pred.map(|p| SafetyScore::from_level(p).unwrap()),
            parse_method: if pred.is_some() { ParseMethod::LabeledPattern } else { ParseMethod::Failed },
            prompt_hash: String::new(),
            image_hash: String::new(),
            model_name: "m".into(),
            raw_response: String::new(),
        }
    }

    #[test]
    fn accuracy_examples() {
        let all: Vec<_> = [0, 1, 2].iter().map(|&v| rec(Some(v), v)).collect();
        assert_eq!(accuracy(&all, FailurePolicy::CountAsWrong).unwrap(), 1.0);
        let some = vec![rec(Some(0), 0), rec(Some(1), 1), rec(Some(2), -2)];
        assert!((accuracy(&some, FailurePolicy::CountAsWrong).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let mut with_fail: Vec<_> = (0..4).map(|_| rec(Some(1), 1)).collect();
        with_fail.push(rec(None, 1));
        assert_eq!(accuracy(&with_fail, FailurePolicy::CountAsWrong).unwrap(), 0.8);
        assert_eq!(accuracy(&with_fail, FailurePolicy::Exclude).unwrap(), 1.0);
        assert!(matches!(accuracy(&[], FailurePolicy::CountAsWrong), Err(EvalError::Empty)));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman_rho(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(spearman_rho(&[1, 2, 3], &[3, 2, 1]).unwrap(), -1.0);
        assert!(matches!(spearman_rho(&[1, 1, 1], &[1, 2, 3]), Err(EvalError::DegenerateRanking)));
        assert!(matches!(spearman_rho(&[1, 2], &[1, 2, 3]), Err(EvalError::LengthMismatch(2, 3))));
        assert!(matches!(spearman_rho(&[1], &[1]), Err(EvalError::TooShort(1))));
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[-2, -2, 0, 1]), vec![1.5, 1.5, 3.0, 4.0]);
        assert_eq!(average_ranks(&[5, 1, 5, 5]), vec![3.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn condition_parsing() {
        let names: Vec<String> = parse_conditions("all").unwrap().into_iter().map(|c| c.name).collect();
        assert_eq!(names, ["Baseline", "+ CoT", "+ bbx", "+ mask", "+ flow"]);
        let two = parse_conditions("flow, bbox").unwrap();
        assert_eq!((two[0].variant, two[1].variant), (Variant::Flow, Variant::Bbox));
        assert!(parse_conditions("flow,flow").is_err());
        assert!(parse_conditions("depth").is_err());
    }

    #[test]
    fn single_condition_table_has_one_row() {
        let c = &standard_conditions()[0];
        let report = report_from_records(std::slice::from_ref(c), &[rec(Some(1), 1), rec(Some(0), 0)], FailurePolicy::CountAsWrong, vec![]);
        let table = metrics_table(&report);
        assert_eq!(table.lines().count(), 3);
        assert!(table.ends_with("| Baseline | 1.0000 | 1.0000 |\n"));
        let back: EvalReport = serde_json::from_str(&render_report(&report).unwrap().json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn undefined_rho_is_explained() {
        let c = &standard_conditions()[0];
        let report = report_from_records(std::slice::from_ref(c), &[rec(Some(1), 1), rec(Some(1), 0)], FailurePolicy::CountAsWrong, vec![]);
        assert_eq!(report.conditions[0].spearman_rho, None);
        assert!(report.conditions[0].rho_note.as_deref().unwrap().contains("degenerate"));
        assert!(metrics_table(&report).contains("| 0.5000 | n/a |"));
    }
}
