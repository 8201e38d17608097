use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::rules::{classify, SafetyScore, SceneAttributes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotator_id: String,
    /// Factor-level judgment; when present the score is derived from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<SceneAttributes>,
    pub score: SafetyScore,
    pub created_at: DateTime<Utc>,
}

impl Annotation {
    pub fn from_attributes(annotator_id: impl Into<String>, attributes: SceneAttributes, at: DateTime<Utc>) -> Self {
        Self {
            annotator_id: annotator_id.into(),
            attributes: Some(attributes),
            score: classify(&attributes).0,
            created_at: at,
        }
    }

    pub fn from_score(annotator_id: impl Into<String>, score: SafetyScore, at: DateTime<Utc>) -> Self {
        Self {
            annotator_id: annotator_id.into(),
            attributes: None,
            score,
            created_at: at,
        }
    }

    /// Same judgment, ignoring the timestamp.
    pub fn same_judgment(&self, other: &Annotation) -> bool {
        self.annotator_id == other.annotator_id && self.attributes == other.attributes && self.score == other.score
    }
}

/// One accepted write, kept in item history and the JSON-lines sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub seq: u64,
    pub item_id: String,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMethod {
    Majority,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusLabel {
    pub score: SafetyScore,
    pub method: ConsensusMethod,
    pub annotator_count: usize,
}

/// Strict majority if one exists, else the median level (lower middle value
/// for even counts).
pub fn consensus_of_scores(scores: &[SafetyScore]) -> Result<ConsensusLabel, DatasetError> {
    if scores.is_empty() {
        return Err(DatasetError::NoAnnotations);
    }
    let k = scores.len();
    let mut counts = [0usize; 5];
    for s in scores {
        counts[s.index()] += 1;
    }
    if let Some(winner) = SafetyScore::ALL.into_iter().find(|s| 2 * counts[s.index()] > k) {
        return Ok(ConsensusLabel {
            score: winner,
            method: ConsensusMethod::Majority,
            annotator_count: k,
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort();
    Ok(ConsensusLabel {
        score: sorted[(k - 1) / 2],
        method: ConsensusMethod::Median,
        annotator_count: k,
    })
}

pub fn consensus(annotations: &[Annotation]) -> Result<ConsensusLabel, DatasetError> {
    let scores: Vec<SafetyScore> = annotations.iter().map(|a| a.score).collect();
    consensus_of_scores(&scores)
}
