//! Single-writer annotation store over a manifest file plus a JSON-lines
//! sidecar of accepted writes. Readers take cheap snapshots.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::agreement::{count_table, fleiss_kappa};
use super::annotation::{consensus, Annotation, AnnotationEvent, ConsensusLabel};
use super::manifest::{load_manifest, save_manifest, DatasetManifest};
use super::DatasetError;
use crate::rules::{classify, SafetyScore, SceneAttributes};

/// Body of an annotation write: factor-level attributes, a direct score, or
/// both (which must agree).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationInput {
    pub annotator_id: String,
    #[serde(default)]
    pub attributes: Option<SceneAttributes>,
    /// Direct score as a level in -2..=2.
    #[serde(default)]
    pub score: Option<i64>,
    /// Optimistic-concurrency guard: reject if the item moved on.
    #[serde(default)]
    pub base_revision: Option<u64>,
}

impl AnnotationInput {
    pub fn to_annotation(&self, at: DateTime<Utc>) -> Result<Annotation, DatasetError> {
        let invalid = |pointer: &str, message: String| DatasetError::Schema {
            pointer: pointer.into(),
            message,
        };
        if self.annotator_id.trim().is_empty() {
            return Err(invalid("/annotator_id", "annotator_id must be non-empty".into()));
        }
        let direct = match self.score {
            Some(level) => Some(SafetyScore::from_level(level).map_err(|e| invalid("/score", e.to_string()))?),
            None => None,
        };
        match (self.attributes, direct) {
            (Some(attrs), direct) => {
                let derived = classify(&attrs).0;
                if let Some(d) = direct.filter(|d| *d != derived) {
                    return Err(invalid(
                        "/score",
                        format!("score {} disagrees with attributes (derived {})", d.level(), derived.level()),
                    ));
                }
                Ok(Annotation::from_attributes(self.annotator_id.trim(), attrs, at))
            }
            (None, Some(score)) => Ok(Annotation::from_score(self.annotator_id.trim(), score, at)),
            (None, None) => Err(invalid("", "either attributes or score is required".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateOutcome {
    pub item_id: String,
    pub annotation: Annotation,
    pub derived_score: SafetyScore,
    pub consensus: ConsensusLabel,
    pub changed: bool,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub kappa: Option<f64>,
    pub raters: usize,
    pub items_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Fleiss' kappa over items annotated by every annotator seen in the manifest.
pub fn manifest_agreement(manifest: &DatasetManifest) -> AgreementSummary {
    let mut raters: Vec<&str> = manifest
        .items
        .iter()
        .flat_map(|i| i.annotations.iter().map(|a| a.annotator_id.as_str()))
        .collect();
    raters.sort_unstable();
    raters.dedup();
    let full: Vec<Vec<SafetyScore>> = manifest
        .items
        .iter()
        .filter(|i| raters.iter().all(|r| i.annotations.iter().any(|a| a.annotator_id == *r)))
        .map(|i| i.annotations.iter().map(|a| a.score).collect())
        .collect();
    let insufficient = |reason: &str| AgreementSummary {
        kappa: None,
        raters: raters.len(),
        items_used: full.len(),
        reason: Some(reason.to_string()),
    };
    if raters.len() < 2 {
        return insufficient("insufficient data: fewer than 2 annotators");
    }
    if full.is_empty() {
        return insufficient("insufficient data: no item annotated by every annotator");
    }
    let table = count_table(full.iter().map(Vec::as_slice));
    match fleiss_kappa(&table) {
        Ok(k) => AgreementSummary {
            kappa: Some(k),
            raters: raters.len(),
            items_used: full.len(),
            reason: None,
        },
        Err(e) => insufficient(&format!("insufficient data: {e}")),
    }
}

pub struct AnnotationStore {
    path: PathBuf,
    sidecar: PathBuf,
    snapshot: RwLock<Arc<DatasetManifest>>,
    writer: Mutex<()>,
}

pub fn sidecar_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_file_name("annotations.jsonl")
}

fn apply_event(manifest: &mut DatasetManifest, event: &AnnotationEvent) -> Result<bool, DatasetError> {
    let item = manifest
        .item_mut(&event.item_id)
        .ok_or_else(|| DatasetError::UnknownItem(event.item_id.clone()))?;
    let new = &event.annotation;
    let changed = match item.annotations.iter_mut().find(|a| a.annotator_id == new.annotator_id) {
        Some(existing) if existing.same_judgment(new) => false,
        Some(existing) => {
            *existing = new.clone();
            true
        }
        None => {
            item.annotations.push(new.clone());
            true
        }
    };
    if changed {
        item.revision += 1;
    }
    item.history.push(event.clone());
    manifest.last_seq = manifest.last_seq.max(event.seq);
    Ok(changed)
}

impl AnnotationStore {
    /// Loads the manifest and replays sidecar writes it does not yet reflect.
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let mut manifest = load_manifest(path)?;
        let sidecar = sidecar_path(path);
        if sidecar.is_file() {
            let file = fs::File::open(&sidecar).map_err(|e| DatasetError::io(&sidecar, e))?;
            let mut replayed = 0;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| DatasetError::io(&sidecar, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: AnnotationEvent = match serde_json::from_str(&line) {
                    Ok(ev) => ev,
                    // torn final line from a crash mid-append
                    Err(e) => {
                        log::warn!("ignoring unreadable sidecar line: {e}");
                        continue;
                    }
                };
                if event.seq > manifest.last_seq {
                    apply_event(&mut manifest, &event)?;
                    replayed += 1;
                }
            }
            if replayed > 0 {
                save_manifest(&manifest, path)?;
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            sidecar,
            snapshot: RwLock::new(Arc::new(manifest)),
            writer: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn snapshot(&self) -> Arc<DatasetManifest> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    pub fn annotate(&self, item_id: &str, input: &AnnotationInput) -> Result<AnnotateOutcome, DatasetError> {
        self.annotate_at(item_id, input, Utc::now())
    }

    pub fn annotate_at(
        &self,
        item_id: &str,
        input: &AnnotationInput,
        at: DateTime<Utc>,
    ) -> Result<AnnotateOutcome, DatasetError> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let current = self.snapshot();
        let item = current
            .item(item_id)
            .ok_or_else(|| DatasetError::UnknownItem(item_id.to_string()))?;
        if let Some(base) = input.base_revision {
            if base != item.revision {
                return Err(DatasetError::Conflict {
                    item_id: item_id.to_string(),
                    expected: base,
                    actual: item.revision,
                });
            }
        }
        let annotation = input.to_annotation(at)?;
        let event = AnnotationEvent {
            seq: current.last_seq + 1,
            item_id: item_id.to_string(),
            annotation,
        };

        let mut next = (*current).clone();
        let changed = apply_event(&mut next, &event)?;

        let mut line = serde_json::to_string(&event)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.sidecar)
            .map_err(|e| DatasetError::io(&self.sidecar, e))?;
        f.write_all(line.as_bytes()).map_err(|e| DatasetError::io(&self.sidecar, e))?;
        f.sync_data().map_err(|e| DatasetError::io(&self.sidecar, e))?;
        save_manifest(&next, &self.path)?;

        let item = next.item(item_id).expect("item present");
        let stored = item
            .annotations
            .iter()
            .find(|a| a.annotator_id == event.annotation.annotator_id)
            .expect("annotation stored")
            .clone();
        let outcome = AnnotateOutcome {
            item_id: item_id.to_string(),
            derived_score: stored.score,
            consensus: consensus(&item.annotations)?,
            annotation: stored,
            changed,
            revision: item.revision,
        };
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(next);
        Ok(outcome)
    }

    pub fn consensus(&self, item_id: &str) -> Result<Option<ConsensusLabel>, DatasetError> {
        let snap = self.snapshot();
        let item = snap
            .item(item_id)
            .ok_or_else(|| DatasetError::UnknownItem(item_id.to_string()))?;
        if item.annotations.is_empty() {
            return Ok(None);
        }
        consensus(&item.annotations).map(Some)
    }

    pub fn agreement(&self) -> AgreementSummary {
        manifest_agreement(&self.snapshot())
    }
}
