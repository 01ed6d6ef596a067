use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing mandatory column `{0}`")]
    MissingColumn(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("attribute `{0}` is absent from the dataset")]
    MissingAttribute(String),
    #[error("sample build failed: {0}")]
    Build(String),
    #[error("initialization failed: {0}")]
    Init(String),
    #[error("fit failed: non-finite residual at sample {index}")]
    NonFiniteResidual { index: usize },
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("lag selection failed: {0}")]
    Selection(String),
    #[error("miner error: {0}")]
    Miner(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a bad configuration rather than a pipeline failure.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config(_) | Error::MissingColumn(_) | Error::Json(_) => true,
            Error::Stage { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
