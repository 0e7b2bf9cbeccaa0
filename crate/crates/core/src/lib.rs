//! Step-wise distillation of visual-program sub-modules over synthetic scene
//! worlds.

pub mod adapter;
pub mod dataset;
pub mod distill;
pub mod dsl;
pub mod eval;
pub mod lexicon;
pub mod query;
pub mod quesgen;
pub mod registry;
pub mod scene;
pub mod util;

pub use adapter::{
    adapt_best_text_match, adapt_simple_query, adapt_step, adapt_verify_property, AdapterError, TeacherInput,
};
pub use dataset::{balance, make_splits, SplitManifest, SplitName, SplitSpec, Splits};
pub use distill::{harvest, train, DistillConfig, Harvest, TrainingReport, Triple};
pub use dsl::{
    execute, fallback_program, parse, run_with_fallback, ExecutionTrace, ParseError, Program, StepRecord, TraceStatus,
    Value,
};
pub use lexicon::Lexicon;
pub use query::{oracle_answer, parse_question, StructuredQuery};
pub use registry::{
    Backend, CorruptedBackend, CorruptionProfile, Detector, ModuleKind, ModuleRegistry, OracleBackend, StudentKey,
    SubTaskInput, TableStudent,
};
pub use scene::{crop, generate_world, Rect, SceneGraph, ScenePatch, SceneStore, WorldConfig};
