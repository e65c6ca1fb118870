use necroscope::quantify::QuantifyError;
use necroscope::segmenter::SegmentError;
use necroscope::slide_store::StoreError;
use necroscope::survival::SurvivalError;
use necroscope::synth::SynthError;

/// Failure of a command, classified for the exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config, dataset or analysis inputs.
    #[error("{0}")]
    Validation(String),
    /// The segmentation backend failed.
    #[error("{0}")]
    Backend(String),
    /// Writing results failed.
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Output(_) => 1,
        }
    }

    pub fn output(err: impl std::fmt::Display) -> Self {
        CliError::Output(err.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Store(StoreError::Io { .. }) => CliError::Output(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<QuantifyError> for CliError {
    fn from(e: QuantifyError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SurvivalError> for CliError {
    fn from(e: SurvivalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn is_backend_failure(e: &SegmentError) -> bool {
    match e {
        SegmentError::Tile { source, .. } => is_backend_failure(source),
        SegmentError::Spawn { .. }
        | SegmentError::ExitStatus { .. }
        | SegmentError::Timeout { .. }
        | SegmentError::MissingOutput(_)
        | SegmentError::MalformedOutput { .. }
        | SegmentError::BatchIo { .. } => true,
        SegmentError::Store(_) | SegmentError::Tiler(_) | SegmentError::MissingTruth(_) | SegmentError::Config(_) => {
            false
        }
    }
}

impl From<SegmentError> for CliError {
    fn from(e: SegmentError) -> Self {
        if is_backend_failure(&e) {
            CliError::Backend(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}
