use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::annotation::{Annotation, AnnotationEvent};
use super::DatasetError;
use crate::rules::classify;
use crate::vision::Viewpoint;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub items: Vec<ManifestItem>,
    /// Highest annotation sequence number reflected in this manifest.
    #[serde(default)]
    pub last_seq: u64,
    /// Directory that relative paths resolve against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    /// Frame paths per viewpoint; index is the frame number.
    pub images: BTreeMap<Viewpoint, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    /// Current annotation per annotator.
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub history: Vec<AnnotationEvent>,
    #[serde(default)]
    pub revision: u64,
}

impl ManifestItem {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            images: BTreeMap::new(),
            detections: None,
            masks: None,
            ground_truth: None,
            annotations: Vec::new(),
            history: Vec::new(),
            revision: 0,
        }
    }

    pub fn frame_path(&self, vp: Viewpoint, frame: usize) -> Option<&str> {
        self.images.get(&vp).and_then(|f| f.get(frame)).map(String::as_str)
    }

    pub fn has_frame_pairs(&self) -> bool {
        Viewpoint::ALL
            .iter()
            .filter(|vp| **vp != Viewpoint::Bottom)
            .all(|vp| self.frame_path(*vp, 1).is_some())
    }

    fn referenced_paths(&self) -> impl Iterator<Item = &str> {
        self.images
            .values()
            .flatten()
            .map(String::as_str)
            .chain(self.detections.as_deref())
            .chain(self.masks.as_deref())
            .chain(self.ground_truth.as_deref())
    }
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            items: Vec::new(),
            last_seq: 0,
            root: root.into(),
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn item(&self, id: &str) -> Option<&ManifestItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn item_mut(&mut self, id: &str) -> Option<&mut ManifestItem> {
        self.items.iter_mut().find(|i| i.id == id)
    }

    /// Checks id uniqueness, annotation coherence and (optionally) that
    /// every referenced file exists.
    pub fn validate(&self, check_files: bool) -> Result<(), DatasetError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::Schema {
                pointer: "/schema_version".into(),
                message: format!("unsupported schema version {}, expected {SCHEMA_VERSION}", self.schema_version),
            });
        }
        let mut seen = HashSet::new();
        for (i, item) in self.items.iter().enumerate() {
            if !seen.insert(item.id.as_str()) {
                return Err(DatasetError::DuplicateId(item.id.clone()));
            }
            for (j, a) in item.annotations.iter().enumerate() {
                if let Some(attrs) = a.attributes {
                    if classify(&attrs).0 != a.score {
                        return Err(DatasetError::Schema {
                            pointer: format!("/items/{i}/annotations/{j}/score"),
                            message: format!("score {} disagrees with attributes ({attrs})", a.score.level()),
                        });
                    }
                }
            }
            if check_files {
                for rel in item.referenced_paths() {
                    let path = self.resolve(rel);
                    if !path.is_file() {
                        return Err(DatasetError::MissingFile(path));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON: sorted keys, items sorted by id, trailing newline.
    pub fn to_canonical_json(&self) -> Result<String, DatasetError> {
        let mut sorted = self.clone();
        sorted.items.sort_by(|a, b| a.id.cmp(&b.id));
        let value = serde_json::to_value(&sorted)?;
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// Parses JSON, reporting schema errors with a JSON pointer.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, DatasetError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| DatasetError::Schema {
        pointer: json_pointer(e.path()),
        message: e.inner().to_string(),
    })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let mut manifest: DatasetManifest = parse_json(&text)?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate(true)?;
    Ok(manifest)
}

/// Writes atomically via a temporary file in the same directory.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    manifest.validate(false)?;
    let text = manifest.to_canonical_json()?;
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("manifest")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| DatasetError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| DatasetError::io(&tmp, e))?;
        f.sync_all().map_err(|e| DatasetError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| DatasetError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::SafetyScore;
    use chrono::TimeZone;

    fn write(dir: &Path, rel: &str) {
        let p = dir.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"x").unwrap();
    }

    fn sample(dir: &Path) -> DatasetManifest {
        let mut m = DatasetManifest::new(dir);
        for id in ["b", "a"] {
            let mut item = ManifestItem::new(id);
            for vp in Viewpoint::ALL {
                let rel = format!("items/{id}/{vp}.0.png");
                write(dir, &rel);
                item.images.insert(vp, vec![rel]);
            }
            item.annotations.push(Annotation {
                annotator_id: "r1".into(),
                attributes: None,
                score: SafetyScore::KeepCaution,
                created_at: chrono::Utc.with_ymd_and_hms(2024, 1, 2, 3, 4, 5).unwrap(),
            });
            m.items.push(item);
        }
        m
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample(dir.path());
        let path = dir.path().join("manifest.json");
        save_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        let mut expected = m.clone();
        expected.items.sort_by(|a, b| a.id.cmp(&b.id));
        assert_eq!(loaded, expected);
        // canonical output is stable
        let again = dir.path().join("again.json");
        save_manifest(&loaded, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample(dir.path());
        m.items[1].id = "b".into();
        let err = m.validate(true).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateId(ref id) if id == "b"));
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample(dir.path());
        let path = dir.path().join("manifest.json");
        save_manifest(&m, &path).unwrap();
        fs::remove_file(dir.path().join("items/a/left.0.png")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("items/a/left.0.png"), "{err}");
    }

    #[test]
    fn schema_errors_carry_a_pointer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"{"schema_version":1,"items":[{"id":"a","images":{"front":[3]}}]}"#).unwrap();
        match load_manifest(&path).unwrap_err() {
            DatasetError::Schema { pointer, .. } => assert_eq!(pointer, "/items/0/images/front/0"),
            other => panic!("unexpected {other}"),
        }
        fs::write(&path, r#"{"schema_version":2,"items":[]}"#).unwrap();
        match load_manifest(&path).unwrap_err() {
            DatasetError::Schema { pointer, .. } => assert_eq!(pointer, "/schema_version"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn incoherent_annotation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample(dir.path());
        m.items[0].annotations[0].attributes = Some(crate::rules::SceneAttributes::parse_kv("car=yes,light=red,signal=go,ped=no").unwrap());
        assert!(matches!(m.validate(false), Err(DatasetError::Schema { .. })));
    }
}
