use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::backends::{adapted, label_output, CorruptedBackend, CorruptionProfile};
use super::{Backend, BackendDescriptor, BackendError, Distribution, ModuleKind, Prediction, SubTaskInput};
use crate::lexicon::Lexicon;
use crate::query::{parse_question, Perception, StructuredQuery};
use crate::scene::{SceneGraph, ScenePatch};

pub const STUDENT_FORMAT: &str = "vpdistill-student";
pub const STUDENT_FORMAT_VERSION: u32 = 1;

/// Sorted (name, sorted attributes) of the objects visible in a patch, as
/// seen through `perception`.
pub fn patch_signature(
    scene: &SceneGraph,
    patch: &ScenePatch,
    perception: &dyn Perception,
) -> Vec<(String, Vec<String>)> {
    let mut sig: Vec<(String, Vec<String>)> = patch
        .view(scene)
        .into_iter()
        .map(|o| {
            let mut attrs: Vec<String> = o.attributes.iter().map(|a| perception.label(a).to_string()).collect();
            attrs.sort();
            (perception.label(&o.name).to_string(), attrs)
        })
        .collect();
    sig.sort();
    sig
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StudentKey {
    pub module: ModuleKind,
    pub question: String,
    pub signature: Vec<(String, Vec<String>)>,
}

impl StudentKey {
    pub fn new(module: ModuleKind, query: &StructuredQuery, signature: Vec<(String, Vec<String>)>) -> Self {
        Self {
            module,
            question: query.canonical(),
            signature,
        }
    }

    pub fn fingerprint(&self) -> String {
        let sig: Vec<String> = self
            .signature
            .iter()
            .map(|(n, a)| format!("{n}[{}]", a.join(",")))
            .collect();
        format!("{}#{}#{}", self.module, self.question, sig.join(";"))
    }
}

#[derive(Debug, Error)]
pub enum StudentStateError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed student state: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a student state file (format `{0}`)")]
    Format(String),
    #[error("unsupported student state version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub key: StudentKey,
    pub counts: BTreeMap<String, f64>,
}

/// Versioned on-disk form of a [`TableStudent`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentState {
    pub format: String,
    pub version: u32,
    pub module: ModuleKind,
    pub alpha: f64,
    pub tau: f64,
    pub profile: CorruptionProfile,
    pub entries: Vec<StateEntry>,
}

/// Count-table student layered over a corrupted base backend.
#[derive(Debug, Clone)]
pub struct TableStudent {
    module: ModuleKind,
    base: CorruptedBackend,
    table: HashMap<StudentKey, BTreeMap<String, f64>>,
    alpha: f64,
    tau: f64,
}

impl TableStudent {
    pub const DEFAULT_ALPHA: f64 = 1.0;
    pub const DEFAULT_TAU: f64 = 3.0;

    pub fn new(module: ModuleKind, base: CorruptedBackend) -> Self {
        Self {
            module,
            base,
            table: HashMap::new(),
            alpha: Self::DEFAULT_ALPHA,
            tau: Self::DEFAULT_TAU,
        }
    }

    pub fn with_smoothing(mut self, alpha: f64, tau: f64) -> Self {
        self.alpha = alpha;
        self.tau = tau;
        self
    }

    pub fn module(&self) -> ModuleKind {
        self.module
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn base(&self) -> &CorruptedBackend {
        &self.base
    }

    fn lex(&self) -> &Lexicon {
        self.base.lexicon()
    }

    /// Key and parsed form of an adapted sub-question on a patch.
    pub fn key_for(&self, scene: &SceneGraph, patch: &ScenePatch, sub_question: &str) -> (StudentKey, StructuredQuery) {
        let query = parse_question(sub_question, self.lex());
        (self.base.key(self.module, scene, patch, &query), query)
    }

    pub fn update(&mut self, key: StudentKey, label: &str, weight: f64) {
        if weight <= 0.0 || !weight.is_finite() {
            return;
        }
        *self.table.entry(key).or_default().entry(label.to_string()).or_default() += weight;
    }

    pub fn total(&self, key: &StudentKey) -> f64 {
        self.table.get(key).map_or(0.0, |c| c.values().sum())
    }

    /// Most frequent label at a key, ties to the lexicographically smallest.
    pub fn argmax(&self, key: &StudentKey) -> Option<&str> {
        let counts = self.table.get(key)?;
        let mut best: Option<(&str, f64)> = None;
        for (label, &c) in counts {
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((label, c));
            }
        }
        best.map(|(l, _)| l)
    }

    /// Tolerates the rounding of fractional per-epoch weights.
    pub fn is_learned(&self, key: &StudentKey) -> bool {
        self.total(key) + 1e-9 >= self.tau
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn learned_keys(&self) -> usize {
        self.table.keys().filter(|k| self.is_learned(k)).count()
    }

    pub fn keys(&self) -> impl Iterator<Item = &StudentKey> {
        self.table.keys()
    }

    /// Add-alpha smoothed distribution over the query's candidate answers,
    /// the labels seen at this key, and `extra`.
    pub fn smoothed(&self, key: &StudentKey, query: &StructuredQuery, extra: Option<&str>) -> Distribution {
        let mut support: BTreeMap<String, f64> = query.candidates(self.lex()).into_iter().map(|l| (l, 0.0)).collect();
        if let Some(e) = extra {
            support.entry(e.to_string()).or_default();
        }
        if let Some(counts) = self.table.get(key) {
            for (l, c) in counts {
                *support.entry(l.clone()).or_default() += c;
            }
        }
        Distribution::from_weights(support.into_iter().map(|(l, c)| (l, c + self.alpha)))
    }

    /// Smoothed probability of `label` at a key.
    pub fn probability(&self, key: &StudentKey, query: &StructuredQuery, label: &str) -> f64 {
        self.smoothed(key, query, Some(label)).probability(label)
    }

    pub fn to_state(&self) -> StudentState {
        let mut entries: Vec<StateEntry> = self
            .table
            .iter()
            .map(|(k, c)| StateEntry {
                key: k.clone(),
                counts: c.clone(),
            })
            .collect();
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        StudentState {
            format: STUDENT_FORMAT.into(),
            version: STUDENT_FORMAT_VERSION,
            module: self.module,
            alpha: self.alpha,
            tau: self.tau,
            profile: self.base.profile().clone(),
            entries,
        }
    }

    pub fn from_state(state: StudentState, lex: Arc<Lexicon>) -> Result<Self, StudentStateError> {
        if state.format != STUDENT_FORMAT {
            return Err(StudentStateError::Format(state.format));
        }
        if state.version != STUDENT_FORMAT_VERSION {
            return Err(StudentStateError::Version(state.version));
        }
        Ok(Self {
            module: state.module,
            base: CorruptedBackend::new(state.profile, lex),
            table: state.entries.into_iter().map(|e| (e.key, e.counts)).collect(),
            alpha: state.alpha,
            tau: state.tau,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StudentStateError> {
        let mut text = serde_json::to_string_pretty(&self.to_state())?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path, lex: Arc<Lexicon>) -> Result<Self, StudentStateError> {
        let state: StudentState = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_state(state, lex)
    }
}

impl Backend for TableStudent {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: format!("table-student({}, keys={})", self.module, self.table.len()),
            trainable: true,
        }
    }

    fn predict(&self, scene: &SceneGraph, input: &SubTaskInput) -> Result<Prediction, BackendError> {
        if input.kind() != self.module {
            return Err(BackendError::Unsupported {
                backend: format!("table-student({})", self.module),
                kind: input.kind(),
            });
        }
        let (text, patch) = adapted(input, self.lex())?;
        let (key, query) = self.key_for(scene, patch, &text);
        if !self.is_learned(&key) {
            return self.base.predict(scene, input);
        }
        let label = self.argmax(&key).unwrap_or_default().to_string();
        Ok(Prediction {
            distribution: self.smoothed(&key, &query, None),
            output: label_output(self.module, label)?,
        })
    }
}
