//! Pluggable visual sub-module backends and the registry that binds them to
//! module kinds.
//!
//! `find` and `exists` are always served by the [`Detector`]; only the three
//! distillable kinds can be rebound with [`ModuleRegistry::replace_backend`].

mod backends;
mod student;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{SceneGraph, ScenePatch};

pub use backends::{CorruptedBackend, CorruptionProfile, Detector, OracleBackend, PermutedPerception};
pub use student::{
    patch_signature, StateEntry, StudentKey, StudentState, StudentStateError, TableStudent, STUDENT_FORMAT,
    STUDENT_FORMAT_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Find,
    Exists,
    VerifyProperty,
    BestTextMatch,
    SimpleQuery,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 5] = [
        ModuleKind::Find,
        ModuleKind::Exists,
        ModuleKind::VerifyProperty,
        ModuleKind::BestTextMatch,
        ModuleKind::SimpleQuery,
    ];

    pub const DISTILLABLE: [ModuleKind; 3] = [
        ModuleKind::VerifyProperty,
        ModuleKind::BestTextMatch,
        ModuleKind::SimpleQuery,
    ];

    pub fn method_name(self) -> &'static str {
        match self {
            ModuleKind::Find => "find",
            ModuleKind::Exists => "exists",
            ModuleKind::VerifyProperty => "verify_property",
            ModuleKind::BestTextMatch => "best_text_match",
            ModuleKind::SimpleQuery => "simple_query",
        }
    }

    pub fn from_method(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.method_name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            ModuleKind::VerifyProperty => 2,
            _ => 1,
        }
    }

    pub fn is_distillable(self) -> bool {
        Self::DISTILLABLE.contains(&self)
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.method_name())
    }
}

impl std::str::FromStr for ModuleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_method(s).ok_or_else(|| format!("unknown module kind `{s}`"))
    }
}

/// The input of one module call, as seen by a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubTaskInput {
    Find {
        patch: ScenePatch,
        name: String,
    },
    Exists {
        patches: Vec<ScenePatch>,
        name: String,
    },
    VerifyProperty {
        patch: ScenePatch,
        center_word: Option<String>,
        object_name: String,
        attribute: String,
    },
    BestTextMatch {
        patch: ScenePatch,
        center_word: Option<String>,
        options: Vec<String>,
    },
    SimpleQuery {
        patch: ScenePatch,
        center_word: Option<String>,
        question: String,
    },
}

impl SubTaskInput {
    pub fn kind(&self) -> ModuleKind {
        match self {
            SubTaskInput::Find { .. } => ModuleKind::Find,
            SubTaskInput::Exists { .. } => ModuleKind::Exists,
            SubTaskInput::VerifyProperty { .. } => ModuleKind::VerifyProperty,
            SubTaskInput::BestTextMatch { .. } => ModuleKind::BestTextMatch,
            SubTaskInput::SimpleQuery { .. } => ModuleKind::SimpleQuery,
        }
    }

    /// The single receiver patch of a distillable call.
    pub fn patch(&self) -> Option<&ScenePatch> {
        match self {
            SubTaskInput::Find { patch, .. }
            | SubTaskInput::VerifyProperty { patch, .. }
            | SubTaskInput::BestTextMatch { patch, .. }
            | SubTaskInput::SimpleQuery { patch, .. } => Some(patch),
            SubTaskInput::Exists { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum ModuleOutput {
    Text(String),
    Flag(bool),
    Patches(Vec<ScenePatch>),
}

/// A probability distribution over answer labels, sorted by label.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Distribution(Vec<(String, f64)>);

impl Distribution {
    /// Builds from non-negative weights; normalizes to sum 1.
    pub fn from_weights(weights: impl IntoIterator<Item = (String, f64)>) -> Self {
        let mut map: BTreeMap<String, f64> = BTreeMap::new();
        for (k, w) in weights {
            *map.entry(k).or_default() += w.max(0.0);
        }
        let total: f64 = map.values().sum();
        if total <= 0.0 {
            let n = map.len().max(1) as f64;
            return Self(map.into_keys().map(|k| (k, 1.0 / n)).collect());
        }
        Self(map.into_iter().map(|(k, w)| (k, w / total)).collect())
    }

    pub fn one_hot(label: &str) -> Self {
        Self(vec![(label.to_string(), 1.0)])
    }

    pub fn probability(&self, label: &str) -> f64 {
        self.0.iter().find(|(l, _)| l == label).map_or(0.0, |(_, p)| *p)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|(_, p)| p).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub output: ModuleOutput,
    pub distribution: Distribution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub trainable: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend `{backend}` cannot serve `{kind}` calls")]
    Unsupported { backend: String, kind: ModuleKind },
    #[error("backend answer `{0}` is not a yes/no answer")]
    NotBoolean(String),
    #[error("adapter rejected the call: {0}")]
    Adapter(String),
}

/// Behavioral contract of a visual sub-module. `predict` must be
/// deterministic given backend state and safe to call from many threads.
pub trait Backend: Send + Sync + fmt::Debug {
    fn descriptor(&self) -> BackendDescriptor;
    fn predict(&self, scene: &SceneGraph, input: &SubTaskInput) -> Result<Prediction, BackendError>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("`{0}` is bound to the detector and cannot be replaced")]
    NotReplaceable(ModuleKind),
}

#[derive(Debug, Clone)]
pub struct ModuleRegistry {
    detector: Arc<Detector>,
    verify_property: Arc<dyn Backend>,
    best_text_match: Arc<dyn Backend>,
    simple_query: Arc<dyn Backend>,
}

impl ModuleRegistry {
    pub fn new(
        detector: Arc<Detector>,
        verify_property: Arc<dyn Backend>,
        best_text_match: Arc<dyn Backend>,
        simple_query: Arc<dyn Backend>,
    ) -> Self {
        Self {
            detector,
            verify_property,
            best_text_match,
            simple_query,
        }
    }

    /// Binds all three distillable kinds to one backend.
    pub fn uniform(detector: Arc<Detector>, backend: Arc<dyn Backend>) -> Self {
        Self::new(detector, backend.clone(), backend.clone(), backend)
    }

    /// Returns a registry with one distillable binding swapped out.
    pub fn replace_backend(&self, kind: ModuleKind, backend: Arc<dyn Backend>) -> Result<Self, RegistryError> {
        let mut next = self.clone();
        match kind {
            ModuleKind::VerifyProperty => next.verify_property = backend,
            ModuleKind::BestTextMatch => next.best_text_match = backend,
            ModuleKind::SimpleQuery => next.simple_query = backend,
            ModuleKind::Find | ModuleKind::Exists => return Err(RegistryError::NotReplaceable(kind)),
        }
        Ok(next)
    }

    pub fn with_detector(&self, detector: Arc<Detector>) -> Self {
        let mut next = self.clone();
        next.detector = detector;
        next
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn backend(&self, kind: ModuleKind) -> &dyn Backend {
        match kind {
            ModuleKind::Find | ModuleKind::Exists => self.detector.as_ref(),
            ModuleKind::VerifyProperty => self.verify_property.as_ref(),
            ModuleKind::BestTextMatch => self.best_text_match.as_ref(),
            ModuleKind::SimpleQuery => self.simple_query.as_ref(),
        }
    }

    /// Shared handle to a distillable binding; `None` for find and exists.
    pub fn shared_backend(&self, kind: ModuleKind) -> Option<Arc<dyn Backend>> {
        match kind {
            ModuleKind::Find | ModuleKind::Exists => None,
            ModuleKind::VerifyProperty => Some(self.verify_property.clone()),
            ModuleKind::BestTextMatch => Some(self.best_text_match.clone()),
            ModuleKind::SimpleQuery => Some(self.simple_query.clone()),
        }
    }

    pub fn dispatch(&self, scene: &SceneGraph, input: &SubTaskInput) -> Result<Prediction, BackendError> {
        self.backend(input.kind()).predict(scene, input)
    }

    pub fn bindings(&self) -> BTreeMap<ModuleKind, BackendDescriptor> {
        ModuleKind::ALL
            .into_iter()
            .map(|k| (k, self.backend(k).descriptor()))
            .collect()
    }
}
