use std::fmt;

use serde_json::json;

use crosswalk_core::dataset::DatasetError;
use crosswalk_core::eval::EvalError;
use crosswalk_core::gateway::GatewayError;
use crosswalk_core::pipeline::RenderError;
use crosswalk_core::prompt::PromptError;
use crosswalk_core::rules::RulesError;
use crosswalk_core::synth::SynthError;
use crosswalk_core::vision::VisionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input: flags, files or values. Exit code 1.
    Validation,
    /// Anything that went wrong while doing valid work. Exit code 2.
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    pub pointer: Option<String>,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
            pointer: None,
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Runtime,
            message: message.into(),
            pointer: None,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 1,
            ErrorKind::Runtime => 2,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let kind = match self.kind {
            ErrorKind::Validation => "validation",
            ErrorKind::Runtime => "runtime",
        };
        let mut body = json!({"kind": kind, "message": self.message, "exit_code": self.exit_code()});
        if let Some(p) = &self.pointer {
            body["pointer"] = json!(p);
        }
        json!({ "error": body })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let kind = match e {
            DatasetError::Io { .. } | DatasetError::Json(_) => ErrorKind::Runtime,
            _ => ErrorKind::Validation,
        };
        let pointer = match &e {
            DatasetError::Schema { pointer, .. } => Some(pointer.clone()),
            _ => None,
        };
        Self {
            kind,
            message: e.to_string(),
            pointer,
        }
    }
}

impl From<VisionError> for CliError {
    fn from(e: VisionError) -> Self {
        match e {
            VisionError::Image { .. } => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Unavailable { .. } => Self::validation(e.to_string()),
            RenderError::Vision(v) => v.into(),
            RenderError::Dataset(d) => d.into(),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Invalid { .. } | SynthError::UnreachableMix(_) | SynthError::EmptyDataset => {
                Self::validation(e.to_string())
            }
            SynthError::Vision(v) => v.into(),
            SynthError::Dataset(d) => d.into(),
            SynthError::Io { .. } => Self::runtime(e.to_string()),
        }
    }
}

impl From<RulesError> for CliError {
    fn from(e: RulesError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(_) => Self::validation(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Conditions(_) | EvalError::Empty => Self::validation(e.to_string()),
            EvalError::Render(r) => r.into(),
            EvalError::Dataset(d) => d.into(),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}
