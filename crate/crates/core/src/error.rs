use std::path::PathBuf;

use crate::event_store::{ConceptId, PersonId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: field `{field}`: {message}")]
    Malformed {
        file: String,
        line: u64,
        field: String,
        message: String,
    },

    #[error("{file}:{line}: person {person_id} is not present in person.csv")]
    DanglingPerson {
        file: String,
        line: u64,
        person_id: PersonId,
    },

    #[error("unknown concept {0}")]
    UnknownConcept(ConceptId),

    #[error("unknown person {0}")]
    UnknownPerson(PersonId),

    #[error("survey item `{0}` is not in the declared item registry")]
    UnknownSurveyItem(String),

    #[error("labels contain a single class; both cases and controls are required")]
    DegenerateLabels,

    #[error("feature vocabulary mismatch: model expects {expected}, matrix has {found}")]
    VocabularyMismatch { expected: String, found: String },

    #[error("score file {path}: {problem} for persons {persons:?}")]
    ScoreCoverage {
        path: PathBuf,
        problem: &'static str,
        persons: Vec<PersonId>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Tags an error with the pipeline stage it came from.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
