//! Exit codes.

use std::fmt;

use vpdistill::dataset::DatasetError;
use vpdistill::distill::DistillError;
use vpdistill::eval::recipe::RecipeError;
use vpdistill::quesgen::{GenError, ServiceError};
use vpdistill::registry::StudentStateError;
use vpdistill::scene::WorldError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Generic = 1,
    Usage = 2,
    Config = 3,
    MissingArtifact = 4,
    Checksum = 5,
    Service = 6,
    Overlap = 7,
}

#[derive(Debug)]
pub struct Coded {
    pub kind: ExitKind,
    pub message: String,
}

impl Coded {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Coded {}

fn classify(e: &(dyn std::error::Error + 'static)) -> Option<ExitKind> {
    if let Some(c) = e.downcast_ref::<Coded>() {
        return Some(c.kind);
    }
    if e.is::<ServiceError>() {
        return Some(ExitKind::Service);
    }
    if let Some(d) = e.downcast_ref::<DatasetError>() {
        return Some(match d {
            DatasetError::Overlap(_) => ExitKind::Overlap,
            _ => ExitKind::Config,
        });
    }
    if let Some(r) = e.downcast_ref::<RecipeError>() {
        return Some(match r {
            RecipeError::Dataset(DatasetError::Overlap(_)) => ExitKind::Overlap,
            _ => ExitKind::Config,
        });
    }
    if e.is::<GenError>() || e.is::<DistillError>() || e.is::<toml::de::Error>() {
        return Some(ExitKind::Config);
    }
    if let Some(w) = e.downcast_ref::<WorldError>() {
        return Some(match w {
            WorldError::Config(_) => ExitKind::Config,
            _ => ExitKind::Generic,
        });
    }
    if let Some(s) = e.downcast_ref::<StudentStateError>() {
        return Some(match s {
            StudentStateError::Io(_) => ExitKind::MissingArtifact,
            _ => ExitKind::Config,
        });
    }
    None
}

pub fn code_for(err: &anyhow::Error) -> ExitKind {
    err.chain().find_map(classify).unwrap_or(ExitKind::Generic)
}
