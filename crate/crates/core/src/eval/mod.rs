//! Composite-task evaluation: accuracy accounting, ablations, transplanted
//! students, grounding IoU, error taxonomy and trace-diff case reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsl::{run_with_fallback, ExecutionTrace, TraceStatus, Value};
use crate::lexicon::Lexicon;
use crate::quesgen::{GroundingItem, QAPair};
use crate::registry::{Backend, Detector, ModuleKind, ModuleOutput, ModuleRegistry, OracleBackend};
use crate::scene::{Rect, SceneStore};

pub mod recipe;
pub mod render;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    /// Programs using every module kind.
    Fine,
    /// Programs restricted to find and simple_query.
    Coarse,
}

impl Framework {
    pub fn as_str(self) -> &'static str {
        match self {
            Framework::Fine => "fine",
            Framework::Coarse => "coarse",
        }
    }
}

impl std::str::FromStr for Framework {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fine" => Ok(Self::Fine),
            "coarse" => Ok(Self::Coarse),
            other => Err(format!("unknown framework `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrameworkConfig {
    pub label: String,
    pub framework: Framework,
    pub registry: ModuleRegistry,
    /// Whether the evaluated programs were generated with pointer phrasing.
    pub visual_pointer: bool,
}

impl FrameworkConfig {
    pub fn fine(label: &str, registry: ModuleRegistry) -> Self {
        Self {
            label: label.to_string(),
            framework: Framework::Fine,
            registry,
            visual_pointer: true,
        }
    }

    pub fn coarse(label: &str, registry: ModuleRegistry) -> Self {
        Self {
            framework: Framework::Coarse,
            ..Self::fine(label, registry)
        }
    }

    pub fn program<'q>(&self, qa: &'q QAPair) -> &'q str {
        match self.framework {
            Framework::Fine => &qa.program,
            Framework::Coarse => &qa.coarse_program,
        }
    }
}

/// Perfect detector plus the oracle at every distillable binding.
pub fn oracle_registry(lex: Arc<Lexicon>) -> ModuleRegistry {
    let detector = Arc::new(Detector::new(0.0, 0, lex.clone()));
    ModuleRegistry::uniform(detector, Arc::new(OracleBackend::new(lex)))
}

/// The given detector plus the teacher answering every distillable call.
pub fn teacher_replacement_registry(detector: Arc<Detector>, teacher: Arc<dyn Backend>) -> ModuleRegistry {
    ModuleRegistry::uniform(detector, teacher)
}

/// Everything evaluation reads: scenes, vocabulary and the oracle used to
/// attribute failures.
pub struct EvalContext<'a> {
    pub scenes: &'a SceneStore,
    pub lex: Arc<Lexicon>,
    pub oracle: ModuleRegistry,
}

impl<'a> EvalContext<'a> {
    pub fn new(scenes: &'a SceneStore, lex: Arc<Lexicon>) -> Self {
        let oracle = oracle_registry(lex.clone());
        Self { scenes, lex, oracle }
    }
}

fn missing_scene_trace(qa: &QAPair, program: &str) -> ExecutionTrace {
    ExecutionTrace {
        question_id: qa.question_id.clone(),
        question_type: qa.question_type.to_string(),
        scene_id: qa.scene_id.clone(),
        program: program.to_string(),
        steps: Vec::new(),
        branches: Vec::new(),
        answer: Value::NaN,
        status: TraceStatus::RuntimeNan,
        error: Some(format!("scene {} not found", qa.scene_id)),
    }
}

/// Executes every question's program; traces come back in input order.
pub fn run_programs(config: &FrameworkConfig, eval_set: &[QAPair], scenes: &SceneStore) -> Vec<ExecutionTrace> {
    eval_set
        .par_iter()
        .map(|qa| {
            let program = config.program(qa);
            match scenes.get(&qa.scene_id) {
                Some(scene) => run_with_fallback(program, &qa.question, scene, &config.registry)
                    .with_ids(&qa.question_id, qa.question_type.as_str()),
                None => {
                    log::warn!("{}: scene {} not found", qa.question_id, qa.scene_id);
                    missing_scene_trace(qa, program)
                }
            }
        })
        .collect()
}

pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

pub fn is_correct(trace: &ExecutionTrace, ground_truth: &str) -> bool {
    trace
        .answer
        .answer_text()
        .is_some_and(|a| normalize_answer(&a) == normalize_answer(ground_truth))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub total: usize,
    pub correct: usize,
}

impl TypeAccuracy {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.total)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTaxonomy {
    pub find_error: usize,
    pub verify_property_error: usize,
    pub best_text_match_error: usize,
    pub simple_query_error: usize,
    pub program_logic_error: usize,
    pub parse_fallback: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    FindError,
    VerifyPropertyError,
    BestTextMatchError,
    SimpleQueryError,
    ProgramLogicError,
    ParseFallback,
}

impl ErrorClass {
    fn of_module(kind: ModuleKind) -> Self {
        match kind {
            ModuleKind::Find | ModuleKind::Exists => ErrorClass::FindError,
            ModuleKind::VerifyProperty => ErrorClass::VerifyPropertyError,
            ModuleKind::BestTextMatch => ErrorClass::BestTextMatchError,
            ModuleKind::SimpleQuery => ErrorClass::SimpleQueryError,
        }
    }
}

impl ErrorTaxonomy {
    pub fn add(&mut self, class: ErrorClass) {
        let slot = match class {
            ErrorClass::FindError => &mut self.find_error,
            ErrorClass::VerifyPropertyError => &mut self.verify_property_error,
            ErrorClass::BestTextMatchError => &mut self.best_text_match_error,
            ErrorClass::SimpleQueryError => &mut self.simple_query_error,
            ErrorClass::ProgramLogicError => &mut self.program_logic_error,
            ErrorClass::ParseFallback => &mut self.parse_fallback,
        };
        *slot += 1;
    }

    pub fn total(&self) -> usize {
        self.find_error
            + self.verify_property_error
            + self.best_text_match_error
            + self.simple_query_error
            + self.program_logic_error
            + self.parse_fallback
    }

    pub fn entries(&self) -> [(&'static str, usize); 6] {
        [
            ("find_error", self.find_error),
            ("verify_property_error", self.verify_property_error),
            ("best_text_match_error", self.best_text_match_error),
            ("simple_query_error", self.simple_query_error),
            ("program_logic_error", self.program_logic_error),
            ("parse_fallback", self.parse_fallback),
        ]
    }
}

fn output_value(output: ModuleOutput) -> Value {
    match output {
        ModuleOutput::Text(s) => Value::Str(s),
        ModuleOutput::Flag(b) => Value::Bool(b),
        ModuleOutput::Patches(ps) => Value::PatchList(ps),
    }
}

fn same_output(recorded: &Value, reference: &Value) -> bool {
    match (recorded, reference) {
        (Value::PatchList(a), Value::PatchList(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.region() == y.region())
        }
        (Value::Str(a), Value::Str(b)) => normalize_answer(a) == normalize_answer(b),
        (a, b) => a == b,
    }
}

/// Attributes one failed trace: parse fallbacks first, then the first step
/// whose output differs from the oracle on the same input, else the program.
pub fn classify_failure(trace: &ExecutionTrace, ctx: &EvalContext<'_>) -> ErrorClass {
    if trace.status == TraceStatus::ParseErrorFallback {
        return ErrorClass::ParseFallback;
    }
    let Some(scene) = ctx.scenes.get(&trace.scene_id) else {
        return ErrorClass::ProgramLogicError;
    };
    for step in &trace.steps {
        let Some(input) = step.sub_task_input() else {
            continue;
        };
        let reference = match ctx.oracle.dispatch(scene, &input) {
            Ok(p) => output_value(p.output),
            Err(_) => Value::NaN,
        };
        if !same_output(&step.output, &reference) {
            return ErrorClass::of_module(step.module_kind);
        }
    }
    ErrorClass::ProgramLogicError
}

pub fn error_taxonomy(failures: &[&ExecutionTrace], ctx: &EvalContext<'_>) -> ErrorTaxonomy {
    let classes: Vec<ErrorClass> = failures.par_iter().map(|t| classify_failure(t, ctx)).collect();
    let mut out = ErrorTaxonomy::default();
    for c in classes {
        out.add(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub framework: Framework,
    pub visual_pointer: bool,
    pub bindings: BTreeMap<String, String>,
    pub total: usize,
    pub correct: usize,
    /// Non-NaN wrong answers.
    pub wrong: usize,
    pub nan_count: usize,
    pub acc_all: f64,
    pub acc_no_nan: f64,
    pub per_type: BTreeMap<String, TypeAccuracy>,
    pub taxonomy: ErrorTaxonomy,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores traces that were produced for `eval_set`, in the same order.
pub fn score(
    config: &FrameworkConfig,
    eval_set: &[QAPair],
    traces: &[ExecutionTrace],
    ctx: &EvalContext<'_>,
) -> EvalReport {
    assert_eq!(eval_set.len(), traces.len(), "one trace per question");
    let mut correct = 0;
    let mut nan_count = 0;
    let mut per_type: BTreeMap<String, TypeAccuracy> = BTreeMap::new();
    let mut failures = Vec::new();
    for (qa, trace) in eval_set.iter().zip(traces) {
        let ok = is_correct(trace, &qa.ground_truth);
        let entry = per_type.entry(qa.question_type.to_string()).or_default();
        entry.total += 1;
        if ok {
            correct += 1;
            entry.correct += 1;
        } else {
            failures.push(trace);
        }
        if trace.answer.is_nan() {
            nan_count += 1;
        }
    }
    let total = eval_set.len();
    EvalReport {
        label: config.label.clone(),
        framework: config.framework,
        visual_pointer: config.visual_pointer,
        bindings: config
            .registry
            .bindings()
            .into_iter()
            .map(|(k, d)| (k.to_string(), d.name))
            .collect(),
        total,
        correct,
        wrong: total - correct - nan_count,
        nan_count,
        acc_all: ratio(correct, total),
        acc_no_nan: ratio(correct, total - nan_count),
        per_type,
        taxonomy: error_taxonomy(&failures, ctx),
    }
}

pub fn evaluate(config: &FrameworkConfig, eval_set: &[QAPair], ctx: &EvalContext<'_>) -> EvalReport {
    let traces = run_programs(config, eval_set, ctx.scenes);
    score(config, eval_set, &traces, ctx)
}

/// The three distillable bindings answered by the teacher; find keeps the
/// given detector.
pub fn teacher_replacement(
    detector: Arc<Detector>,
    teacher: Arc<dyn Backend>,
    eval_set: &[QAPair],
    ctx: &EvalContext<'_>,
) -> EvalReport {
    let config = FrameworkConfig::fine("teacher_replacement", teacher_replacement_registry(detector, teacher));
    evaluate(&config, eval_set, ctx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub distilled: usize,
    /// Number of substitution runs averaged into this row.
    pub runs: usize,
    pub acc_all: f64,
    pub acc_no_nan: f64,
}

fn subsets(n: usize) -> Vec<Vec<ModuleKind>> {
    let kinds = ModuleKind::DISTILLABLE;
    (0u32..1 << kinds.len())
        .filter(|m| m.count_ones() as usize == n)
        .map(|m| {
            (0..kinds.len())
                .filter(|i| m & (1 << i) != 0)
                .map(|i| kinds[i])
                .collect()
        })
        .collect()
}

/// Rows for 0..=3 distilled modules. Rows with several possible module
/// choices average over all of them.
pub fn ablate_distilled_count(
    base: &ModuleRegistry,
    distilled: &ModuleRegistry,
    eval_set: &[QAPair],
    ctx: &EvalContext<'_>,
) -> Vec<AblationRow> {
    (0..=ModuleKind::DISTILLABLE.len())
        .map(|n| {
            let runs: Vec<EvalReport> = subsets(n)
                .into_iter()
                .map(|kinds| {
                    let mut reg = base.clone();
                    for k in &kinds {
                        reg = reg
                            .replace_backend(*k, distilled.shared_backend(*k).expect("distillable"))
                            .expect("distillable kinds are replaceable");
                    }
                    evaluate(&FrameworkConfig::fine(&format!("distilled_{n}"), reg), eval_set, ctx)
                })
                .collect();
            let k = runs.len() as f64;
            AblationRow {
                distilled: n,
                runs: runs.len(),
                acc_all: runs.iter().map(|r| r.acc_all).sum::<f64>() / k,
                acc_no_nan: runs.iter().map(|r| r.acc_no_nan).sum::<f64>() / k,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFramework {
    pub baseline: EvalReport,
    pub transplanted: EvalReport,
}

/// Coarse-framework evaluation before and after swapping in a simple_query
/// student.
pub fn cross_framework(
    base: &ModuleRegistry,
    student: Arc<dyn Backend>,
    eval_set: &[QAPair],
    ctx: &EvalContext<'_>,
) -> CrossFramework {
    let transplanted = base
        .replace_backend(ModuleKind::SimpleQuery, student)
        .expect("simple_query is replaceable");
    CrossFramework {
        baseline: evaluate(&FrameworkConfig::coarse("coarse_baseline", base.clone()), eval_set, ctx),
        transplanted: evaluate(
            &FrameworkConfig::coarse("coarse_transplanted", transplanted),
            eval_set,
            ctx,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub label: String,
    pub items: usize,
    pub nan_count: usize,
    pub mean_iou: f64,
}

/// IoU of the returned patch against the target box; anything but a patch
/// scores 0.
pub fn grounding_score(trace: &ExecutionTrace, target: &Rect) -> f64 {
    match &trace.answer {
        Value::Patch(p) => p.region().iou(target),
        _ => 0.0,
    }
}

pub fn grounding_eval(
    label: &str,
    registry: &ModuleRegistry,
    items: &[GroundingItem],
    scenes: &SceneStore,
) -> GroundingReport {
    let scores: Vec<(f64, bool)> = items
        .par_iter()
        .map(|item| match scenes.get(&item.scene_id) {
            Some(scene) => {
                let trace = run_with_fallback(&item.program, &item.expression, scene, registry);
                (grounding_score(&trace, &item.target_bbox), trace.answer.is_nan())
            }
            None => (0.0, true),
        })
        .collect();
    GroundingReport {
        label: label.to_string(),
        items: items.len(),
        nan_count: scores.iter().filter(|s| s.1).count(),
        mean_iou: if scores.is_empty() {
            0.0
        } else {
            scores.iter().map(|s| s.0).sum::<f64>() / scores.len() as f64
        },
    }
}

fn describe(v: &Value) -> String {
    match v {
        Value::PatchList(ps) => format!(
            "[{}]",
            ps.iter()
                .map(|p| {
                    let r = p.region();
                    format!("({},{},{},{})", r.x, r.y, r.w, r.h)
                })
                .collect::<Vec<_>>()
                .join(" ")
        ),
        other => other.answer_text().unwrap_or_else(|| "NaN".into()),
    }
}

/// Markdown document placing two executions of one question side by side.
pub fn case_report(qa: &QAPair, before: &FrameworkConfig, after: &FrameworkConfig, scenes: &SceneStore) -> String {
    let run = |cfg: &FrameworkConfig| {
        run_programs(cfg, std::slice::from_ref(qa), scenes)
            .pop()
            .expect("one trace")
    };
    let (a, b) = (run(before), run(after));
    let mut out = String::new();
    let _ = writeln!(out, "## {}\n", qa.question_id);
    let _ = writeln!(out, "Question: {}  ", qa.question);
    let _ = writeln!(out, "Ground truth: {}\n", qa.ground_truth);
    let _ = writeln!(out, "```\n{}```\n", before.program(qa));
    let _ = writeln!(out, "| step | module | {} | {} |", before.label, after.label);
    let _ = writeln!(out, "|---|---|---|---|");
    for i in 0..a.steps.len().max(b.steps.len()) {
        let cell = |t: &ExecutionTrace| {
            t.steps
                .get(i)
                .map(|s| describe(&s.output))
                .unwrap_or_else(|| "-".into())
        };
        let module = a
            .steps
            .get(i)
            .or_else(|| b.steps.get(i))
            .map(|s| s.module_kind.to_string())
            .unwrap_or_default();
        let mark = if cell(&a) != cell(&b) { " *" } else { "" };
        let _ = writeln!(out, "| {i}{mark} | {module} | {} | {} |", cell(&a), cell(&b));
    }
    let _ = writeln!(out);
    let branches = |t: &ExecutionTrace| {
        if t.branches.is_empty() {
            return "none".to_string();
        }
        t.branches
            .iter()
            .map(|br| format!("`{}` -> {}", br.condition, if br.taken { "then" } else { "else" }))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let _ = writeln!(out, "Branches ({}): {}  ", before.label, branches(&a));
    let _ = writeln!(out, "Branches ({}): {}\n", after.label, branches(&b));
    let verdict = |t: &ExecutionTrace| {
        if is_correct(t, &qa.ground_truth) {
            "correct"
        } else {
            "wrong"
        }
    };
    let _ = writeln!(
        out,
        "Answer ({}): {} ({})  ",
        before.label,
        describe(&a.answer),
        verdict(&a)
    );
    let _ = writeln!(
        out,
        "Answer ({}): {} ({})",
        after.label,
        describe(&b.answer),
        verdict(&b)
    );
    out
}
