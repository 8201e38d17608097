//! Prompt assembly from the bundled reference texts plus the composed image.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rules::SafetyScore;
use crate::vision::{ComposedImage, Variant};

pub const INSTRUCTION_TEXT: &str = include_str!("../prompts/instruction.txt");
pub const COT_TEXT: &str = include_str!("../prompts/cot.txt");
pub const CRITERIA_TEXT: &str = include_str!("../prompts/criteria.txt");
pub const OUTPUT_HINT_TEXT: &str = "End your answer with a line 'SAFETY_SCORE: <integer between -2 and 2>'.\n";

/// Block separator: each reference file ends in a newline, and one more
/// newline leaves a blank line between blocks.
const SEPARATOR: &str = "\n";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("prompt wants variant {expected} but the image carries {actual}")]
    VariantMismatch { expected: Variant, actual: Variant },
    #[error("score {0} is outside the 1..5 scale")]
    ScaleOutOfRange(i64),
    #[error("unknown score scale {0:?}")]
    UnknownScale(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    #[default]
    #[serde(rename = "minus2_to_2")]
    Minus2To2,
    #[serde(rename = "one_to_5_mapped")]
    OneTo5Mapped,
}

impl ScoreScale {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreScale::Minus2To2 => "minus2_to_2",
            ScoreScale::OneTo5Mapped => "one_to_5_mapped",
        }
    }
}

impl fmt::Display for ScoreScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreScale {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "minus2_to_2" | "-2..2" => Ok(ScoreScale::Minus2To2),
            "one_to_5_mapped" | "1..5" => Ok(ScoreScale::OneTo5Mapped),
            other => Err(PromptError::UnknownScale(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PromptConfig {
    pub include_cot: bool,
    pub variant: Variant,
    #[serde(default)]
    pub structured_output_hint: bool,
    #[serde(default)]
    pub score_scale: ScoreScale,
}

#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub instruction_text: String,
    pub cot_text: Option<String>,
    pub criteria_text: String,
    pub output_hint_text: Option<String>,
    pub image: ComposedImage,
}

/// Audit form of a bundle: the text and a reference to the PNG attachment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub text: String,
    pub prompt_hash: String,
    pub variant: Variant,
    pub image_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

impl PromptBundle {
    pub fn blocks(&self) -> Vec<&str> {
        let mut out = vec![self.instruction_text.as_str()];
        out.extend(self.cot_text.as_deref());
        out.push(&self.criteria_text);
        out.extend(self.output_hint_text.as_deref());
        out
    }

    pub fn text(&self) -> String {
        self.blocks().join(SEPARATOR)
    }

    pub fn prompt_hash(&self) -> String {
        hash_text(&self.text())
    }

    pub fn record(&self, image_path: Option<String>) -> PromptRecord {
        let text = self.text();
        PromptRecord {
            prompt_hash: hash_text(&text),
            text,
            variant: self.image.variant,
            image_hash: self.image.raster.content_hash(),
            image_path,
        }
    }
}

pub fn hash_text(text: &str) -> String {
    crate::vision::hex(&Sha256::digest(text.as_bytes()))
}

/// The prompt text a bundle built from `cfg` would carry.
pub fn prompt_text(cfg: &PromptConfig) -> String {
    let mut blocks = vec![INSTRUCTION_TEXT];
    if cfg.include_cot {
        blocks.push(COT_TEXT);
    }
    blocks.push(CRITERIA_TEXT);
    if cfg.structured_output_hint {
        blocks.push(OUTPUT_HINT_TEXT);
    }
    blocks.join(SEPARATOR)
}

pub fn build_prompt(cfg: &PromptConfig, image: ComposedImage) -> Result<PromptBundle, PromptError> {
    if image.variant != cfg.variant {
        return Err(PromptError::VariantMismatch {
            expected: cfg.variant,
            actual: image.variant,
        });
    }
    Ok(PromptBundle {
        instruction_text: INSTRUCTION_TEXT.to_string(),
        cot_text: cfg.include_cot.then(|| COT_TEXT.to_string()),
        criteria_text: CRITERIA_TEXT.to_string(),
        output_hint_text: cfg.structured_output_hint.then(|| OUTPUT_HINT_TEXT.to_string()),
        image,
    })
}

/// Order-preserving map of the 1..5 scale onto -2..2.
pub fn map_scale_1to5(n: i64) -> Result<SafetyScore, PromptError> {
    if !(1..=5).contains(&n) {
        return Err(PromptError::ScaleOutOfRange(n));
    }
    Ok(SafetyScore::from_level(n - 3).expect("1..5 maps inside -2..2"))
}

/// Level names as worded in the evaluation criteria text.
pub fn criteria_name(score: SafetyScore) -> &'static str {
    match score.level() {
        -2 => "Totally dangerous",
        -1 => "Partially dangerous",
        0 => "Keep caution",
        1 => "Partially safe",
        _ => "Totally safe",
    }
}
