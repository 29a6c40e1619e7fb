use std::fmt;

use mafqi::Error;

/// Pipeline stage named in error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Game,
    Oracle,
    Fqi,
    Bounds,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Game => "game",
            Stage::Oracle => "oracle",
            Stage::Fqi => "fqi",
            Stage::Bounds => "bounds",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Config,
    MissingArtifact,
    Divergence,
    Other,
}

#[derive(Debug)]
pub struct CliError {
    pub stage: Stage,
    pub failure: Failure,
    pub message: String,
}

impl CliError {
    pub fn config(stage: Stage, message: impl Into<String>) -> Self {
        CliError {
            stage,
            failure: Failure::Config,
            message: message.into(),
        }
    }

    pub fn missing(stage: Stage, message: impl Into<String>) -> Self {
        CliError {
            stage,
            failure: Failure::MissingArtifact,
            message: message.into(),
        }
    }

    pub fn other(stage: Stage, message: impl Into<String>) -> Self {
        CliError {
            stage,
            failure: Failure::Other,
            message: message.into(),
        }
    }

    pub fn from_core(stage: Stage, err: Error) -> Self {
        let failure = match &err {
            Error::Config(_) | Error::InvalidKernel(_) | Error::BoundViolation { .. } | Error::Size { .. } => {
                Failure::Config
            }
            Error::Divergence { .. } => Failure::Divergence,
            _ => Failure::Other,
        };
        CliError {
            stage,
            failure,
            message: err.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.failure {
            Failure::Config => 2,
            Failure::MissingArtifact => 3,
            Failure::Divergence => 4,
            Failure::Other => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError>;
}

impl<T> StageExt<T> for mafqi::Result<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError> {
        self.map_err(|e| CliError::from_core(stage, e))
    }
}

impl<T> StageExt<T> for std::io::Result<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError> {
        self.map_err(|e| CliError::other(stage, e.to_string()))
    }
}
