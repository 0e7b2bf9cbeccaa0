use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ast::{BoolOp, CompareOp, Expr, Literal, Program, Stmt};
use super::{parse, ROOT_IMAGE};
use crate::query::{NO, YES};
use crate::registry::{ModuleKind, ModuleOutput, ModuleRegistry, SubTaskInput};
use crate::scene::{full_image, SceneGraph, ScenePatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Value {
    Patch(ScenePatch),
    PatchList(Vec<ScenePatch>),
    Str(String),
    Bool(bool),
    Num(f64),
    List(Vec<Value>),
    #[serde(rename = "nan")]
    NaN,
}

impl Value {
    pub fn is_nan(&self) -> bool {
        matches!(self, Value::NaN)
    }

    /// The answer string a question-answering program produced, or `None`
    /// for NaN.
    pub fn answer_text(&self) -> Option<String> {
        Some(match self {
            Value::NaN => return None,
            Value::Str(s) => s.clone(),
            Value::Bool(b) => if *b { YES } else { NO }.to_string(),
            Value::Num(n) if n.fract() == 0.0 && n.abs() < 1e15 => format!("{}", *n as i64),
            Value::Num(n) => n.to_string(),
            Value::Patch(p) => {
                let r = p.region();
                format!("patch({},{},{},{})", r.x, r.y, r.w, r.h)
            }
            Value::PatchList(ps) => format!("{} patches", ps.len()),
            Value::List(items) => items
                .iter()
                .map(|v| v.answer_text().unwrap_or_else(|| "nan".into()))
                .collect::<Vec<_>>()
                .join(", "),
        })
    }

    fn type_name(&self) -> &'static str {
        match self {
            Value::Patch(_) => "patch",
            Value::PatchList(_) => "patch list",
            Value::Str(_) => "string",
            Value::Bool(_) => "bool",
            Value::Num(_) => "number",
            Value::List(_) => "list",
            Value::NaN => "nan",
        }
    }

    fn truthy(&self) -> Result<bool, String> {
        Ok(match self {
            Value::Bool(b) => *b,
            Value::Num(n) => *n != 0.0,
            Value::Str(s) => !s.is_empty(),
            Value::List(v) => !v.is_empty(),
            Value::PatchList(v) => !v.is_empty(),
            Value::Patch(_) => true,
            Value::NaN => return Err("condition evaluated to nan".into()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub module_kind: ModuleKind,
    pub receiver: Value,
    pub args: Vec<Value>,
    pub output: Value,
    pub center_word: Option<String>,
}

impl StepRecord {
    /// Rebuilds the backend input this step dispatched, if its operands were
    /// well typed.
    pub fn sub_task_input(&self) -> Option<SubTaskInput> {
        call_input(self.module_kind, &self.receiver, &self.args, self.center_word.clone()).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub condition: String,
    pub taken: bool,
    /// Number of steps recorded before the condition was decided.
    pub after_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Ok,
    ParseErrorFallback,
    RuntimeNan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub question_id: String,
    pub question_type: String,
    pub scene_id: String,
    pub program: String,
    pub steps: Vec<StepRecord>,
    pub branches: Vec<BranchRecord>,
    pub answer: Value,
    pub status: TraceStatus,
    pub error: Option<String>,
}

impl ExecutionTrace {
    pub fn with_ids(mut self, question_id: &str, question_type: &str) -> Self {
        self.question_id = question_id.to_string();
        self.question_type = question_type.to_string();
        self
    }
}

/// `return image.simple_query("<question>")`
pub fn fallback_program(question: &str) -> Program {
    let statements = vec![Stmt::Return(Expr::Call {
        module: ModuleKind::SimpleQuery,
        receiver: Box::new(Expr::Var(ROOT_IMAGE.to_string())),
        args: vec![Expr::Literal(Literal::Str(question.to_string()))],
    })];
    let mut program = Program {
        statements,
        source_text: String::new(),
    };
    program.source_text = program.unparse();
    program
}

/// Runs a parsed program. Never fails: runtime errors end the run with a NaN
/// answer and `runtime_nan` status, keeping the steps recorded so far.
pub fn execute(program: &Program, scene: &SceneGraph, registry: &ModuleRegistry) -> ExecutionTrace {
    let mut it = Interp {
        scene,
        registry,
        env: HashMap::from([(ROOT_IMAGE.to_string(), (Value::Patch(full_image(scene)), None))]),
        steps: Vec::new(),
        branches: Vec::new(),
    };
    let result = it.block(&program.statements);
    let (answer, status, error) = match result {
        Ok(Some(v)) => (v, TraceStatus::Ok, None),
        Ok(None) => (
            Value::NaN,
            TraceStatus::RuntimeNan,
            Some("program ended without return".into()),
        ),
        Err(e) => (Value::NaN, TraceStatus::RuntimeNan, Some(e)),
    };
    ExecutionTrace {
        question_id: String::new(),
        question_type: String::new(),
        scene_id: scene.scene_id.clone(),
        program: program.source_text.clone(),
        steps: it.steps,
        branches: it.branches,
        answer,
        status,
        error,
    }
}

/// Parses and runs `source`; on a parse error runs the fallback program on
/// the original question instead.
pub fn run_with_fallback(
    source: &str,
    question: &str,
    scene: &SceneGraph,
    registry: &ModuleRegistry,
) -> ExecutionTrace {
    match parse(source) {
        Ok(program) => execute(&program, scene, registry),
        Err(err) => {
            let mut trace = execute(&fallback_program(question), scene, registry);
            trace.status = TraceStatus::ParseErrorFallback;
            trace.error = Some(match trace.error {
                Some(runtime) => format!("{err}; fallback failed: {runtime}"),
                None => err.to_string(),
            });
            trace
        }
    }
}

fn call_input(
    kind: ModuleKind,
    receiver: &Value,
    args: &[Value],
    center_word: Option<String>,
) -> Result<SubTaskInput, String> {
    let mismatch = || {
        format!(
            "`{kind}` cannot be called on a {} with ({})",
            receiver.type_name(),
            args.iter().map(Value::type_name).collect::<Vec<_>>().join(", ")
        )
    };
    match (kind, receiver, args) {
        (ModuleKind::Find, Value::Patch(p), [Value::Str(name)]) => Ok(SubTaskInput::Find {
            patch: p.clone(),
            name: name.clone(),
        }),
        (ModuleKind::Exists, Value::Patch(p), [Value::Str(name)]) => Ok(SubTaskInput::Exists {
            patches: vec![p.clone()],
            name: name.clone(),
        }),
        (ModuleKind::Exists, Value::PatchList(ps), [Value::Str(name)]) => Ok(SubTaskInput::Exists {
            patches: ps.clone(),
            name: name.clone(),
        }),
        (ModuleKind::VerifyProperty, Value::Patch(p), [Value::Str(o), Value::Str(a)]) => {
            Ok(SubTaskInput::VerifyProperty {
                patch: p.clone(),
                center_word: center_word.clone(),
                object_name: o.clone(),
                attribute: a.clone(),
            })
        }
        (ModuleKind::BestTextMatch, Value::Patch(p), [Value::List(items)]) => {
            let options = items
                .iter()
                .map(|v| match v {
                    Value::Str(s) => Ok(s.clone()),
                    _ => Err(mismatch()),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SubTaskInput::BestTextMatch {
                patch: p.clone(),
                center_word: center_word.clone(),
                options,
            })
        }
        (ModuleKind::SimpleQuery, Value::Patch(p), [Value::Str(q)]) => Ok(SubTaskInput::SimpleQuery {
            patch: p.clone(),
            center_word: center_word.clone(),
            question: q.clone(),
        }),
        _ => Err(mismatch()),
    }
}

/// A value plus the name of the `find` it came from, if any. Kept beside the
/// value so empty patch lists still know their origin.
type Tracked = (Value, Option<String>);

struct Interp<'a> {
    scene: &'a SceneGraph,
    registry: &'a ModuleRegistry,
    env: HashMap<String, Tracked>,
    steps: Vec<StepRecord>,
    branches: Vec<BranchRecord>,
}

impl Interp<'_> {
    fn block(&mut self, block: &[Stmt]) -> Result<Option<Value>, String> {
        for stmt in block {
            match stmt {
                Stmt::Assign(name, e) => {
                    let v = self.eval(e)?;
                    self.env.insert(name.clone(), v);
                }
                Stmt::Return(e) => return self.value(e).map(Some),
                Stmt::If {
                    cond,
                    then_block,
                    else_block,
                } => {
                    let taken = self.value(cond)?.truthy()?;
                    self.branches.push(BranchRecord {
                        condition: cond.to_string(),
                        taken,
                        after_step: self.steps.len(),
                    });
                    let out = self.block(if taken { then_block } else { else_block })?;
                    if out.is_some() {
                        return Ok(out);
                    }
                }
            }
        }
        Ok(None)
    }

    fn value(&mut self, e: &Expr) -> Result<Value, String> {
        self.eval(e).map(|(v, _)| v)
    }

    fn eval(&mut self, e: &Expr) -> Result<Tracked, String> {
        let plain = match e {
            Expr::Literal(Literal::Str(s)) => Value::Str(s.clone()),
            Expr::Literal(Literal::Bool(b)) => Value::Bool(*b),
            Expr::Literal(Literal::Num(n)) => Value::Num(*n),
            Expr::Var(name) => {
                return self
                    .env
                    .get(name)
                    .cloned()
                    .ok_or_else(|| format!("variable `{name}` is not bound on this path"))
            }
            Expr::List(items) => items
                .iter()
                .map(|i| self.value(i))
                .collect::<Result<_, _>>()
                .map(Value::List)?,
            Expr::Index(inner, i) => {
                let (v, origin) = self.eval(inner)?;
                let pick = |len: usize| -> Result<usize, String> {
                    let idx = if *i < 0 { len as i64 + i } else { *i };
                    if idx < 0 || idx as usize >= len {
                        Err(format!("index {i} out of range for length {len}"))
                    } else {
                        Ok(idx as usize)
                    }
                };
                return match v {
                    Value::PatchList(ps) => Ok((Value::Patch(ps[pick(ps.len())?].clone()), origin)),
                    Value::List(items) => Ok((items[pick(items.len())?].clone(), None)),
                    other => Err(format!("cannot index a {}", other.type_name())),
                };
            }
            Expr::Len(inner) => match self.value(inner)? {
                Value::PatchList(ps) => Value::Num(ps.len() as f64),
                Value::List(items) => Value::Num(items.len() as f64),
                Value::Str(s) => Value::Num(s.chars().count() as f64),
                other => return Err(format!("len() of a {}", other.type_name())),
            },
            Expr::Compare { op, lhs, rhs } => {
                let l = self.value(lhs)?;
                let r = self.value(rhs)?;
                let eq = l == r;
                Value::Bool(if *op == CompareOp::Eq { eq } else { !eq })
            }
            Expr::Bool { op, lhs, rhs } => {
                let l = self.value(lhs)?.truthy()?;
                let short = match op {
                    BoolOp::And => !l,
                    BoolOp::Or => l,
                };
                if short {
                    Value::Bool(l)
                } else {
                    Value::Bool(self.value(rhs)?.truthy()?)
                }
            }
            Expr::Not(inner) => Value::Bool(!self.value(inner)?.truthy()?),
            Expr::Call { module, receiver, args } => {
                let (recv, origin) = self.eval(receiver)?;
                let args = args.iter().map(|a| self.value(a)).collect::<Result<Vec<_>, _>>()?;
                let found = match (module, &args[..]) {
                    (ModuleKind::Find, [Value::Str(name)]) => Some(name.clone()),
                    _ => None,
                };
                return Ok((self.call(*module, recv, origin, args)?, found));
            }
        };
        Ok((plain, None))
    }

    fn call(
        &mut self,
        kind: ModuleKind,
        receiver: Value,
        center_word: Option<String>,
        args: Vec<Value>,
    ) -> Result<Value, String> {
        let result = call_input(kind, &receiver, &args, center_word.clone()).and_then(|input| {
            self.registry
                .dispatch(self.scene, &input)
                .map_err(|e| e.to_string())
                .map(|pred| match pred.output {
                    ModuleOutput::Text(s) => Value::Str(s),
                    ModuleOutput::Flag(b) => Value::Bool(b),
                    ModuleOutput::Patches(ps) => Value::PatchList(ps),
                })
        });
        self.steps.push(StepRecord {
            step_index: self.steps.len(),
            module_kind: kind,
            receiver,
            args,
            output: result.clone().unwrap_or(Value::NaN),
            center_word,
        });
        result
    }
}
