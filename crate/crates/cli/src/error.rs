use std::path::{Path, PathBuf};

use spvt::boundprop::BoundError;
use spvt::laneworld::LaneError;
use spvt::neural::NeuralError;
use spvt::perception::PerceptionError;
use spvt::train::TrainError;
use spvt::verify::VerifyError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Exists(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Io { .. } | CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Exists(_) => "output-exists",
            CliError::Numeric(_) => "numeric",
            CliError::Infeasible(_) => "infeasible",
            CliError::Io { .. } => "io",
            CliError::Other(_) => "error",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
                "exit_code": self.exit_code(),
            }
        })
    }
}

impl From<NeuralError> for CliError {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::NonFiniteGradient { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<BoundError> for CliError {
    fn from(e: BoundError) -> Self {
        match e {
            BoundError::Neural(n) => n.into(),
            other => CliError::Infeasible(other.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Contract(_) => CliError::Infeasible(e.to_string()),
            VerifyError::Bound(b) => b.into(),
            VerifyError::Neural(n) => n.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<LaneError> for CliError {
    fn from(e: LaneError) -> Self {
        match e {
            LaneError::Config(_) => CliError::Config(e.to_string()),
            LaneError::NonFinitePolicy { .. } => CliError::Numeric(e.to_string()),
            LaneError::Bound(b) => b.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<PerceptionError> for CliError {
    fn from(e: PerceptionError) -> Self {
        match e {
            PerceptionError::Config(_) => CliError::Config(e.to_string()),
            PerceptionError::Diverged { .. } => CliError::Numeric(e.to_string()),
            PerceptionError::Neural(n) => n.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Diverged { .. } | TrainError::NonFiniteBounds { .. } => CliError::Numeric(e.to_string()),
            TrainError::Neural(n) => n.into(),
            TrainError::Bound(b) => b.into(),
            TrainError::Verify(v) => v.into(),
            TrainError::Lane(l) => l.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
