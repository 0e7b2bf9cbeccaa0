//! Property tests for the program language: printing and parsing agree, and
//! traces record exactly the calls made on the path that ran.

use std::collections::HashMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpdistill::dsl::{BoolOp, CompareOp, Expr, Literal, Stmt};
use vpdistill::registry::ModuleOutput;
use vpdistill::scene::full_image;
use vpdistill::{
    execute, generate_world, parse, run_with_fallback, CorruptedBackend, CorruptionProfile, Detector, Lexicon,
    ModuleKind, ModuleRegistry, OracleBackend, Program, SceneGraph, SubTaskInput, TraceStatus, Value, WorldConfig,
};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ty {
    Patch,
    Patches,
    Flag,
    Text,
    Count,
}

const TYPES: [Ty; 5] = [Ty::Patch, Ty::Patches, Ty::Flag, Ty::Text, Ty::Count];

struct ProgramGen {
    rng: ChaCha8Rng,
    vars: Vec<(String, Ty)>,
    nouns: Vec<String>,
    attrs: Vec<String>,
    /// Chance that a call operand is drawn with the wrong type.
    ill_typed: f64,
}

fn s(text: impl Into<String>) -> Expr {
    Expr::Literal(Literal::Str(text.into()))
}

fn call(module: ModuleKind, receiver: Expr, args: Vec<Expr>) -> Expr {
    Expr::Call {
        module,
        receiver: Box::new(receiver),
        args,
    }
}

impl ProgramGen {
    fn new(seed: u64, ill_typed: f64) -> Self {
        let cfg = WorldConfig::default();
        let lex = Lexicon::new(&cfg);
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: Vec::new(),
            nouns: lex.nouns().to_vec(),
            attrs: cfg.attribute_values().map(str::to_string).collect(),
            ill_typed,
        }
    }

    fn noun(&mut self) -> String {
        self.nouns.choose(&mut self.rng).unwrap().clone()
    }

    fn attr(&mut self) -> String {
        self.attrs.choose(&mut self.rng).unwrap().clone()
    }

    fn text_literal(&mut self) -> String {
        const CHARS: &[char] = &['a', 'b', 'z', ' ', '"', '\\', '\n', '\t', 'é', '?', '\''];
        let n = self.rng.gen_range(0..6);
        (0..n).map(|_| *CHARS.choose(&mut self.rng).unwrap()).collect()
    }

    fn var_of(&mut self, ty: Ty) -> Option<Expr> {
        let names: Vec<&String> = self.vars.iter().filter(|(_, t)| *t == ty).map(|(n, _)| n).collect();
        names.choose(&mut self.rng).map(|n| Expr::Var((*n).clone()))
    }

    fn operand(&mut self, ty: Ty, depth: u32) -> Expr {
        if self.rng.gen_bool(self.ill_typed) {
            let wrong = *TYPES.choose(&mut self.rng).unwrap();
            return self.expr(wrong, depth);
        }
        self.expr(ty, depth)
    }

    fn expr(&mut self, ty: Ty, depth: u32) -> Expr {
        if self.rng.gen_bool(0.25) {
            if let Some(v) = self.var_of(ty) {
                return v;
            }
        }
        let d = depth.saturating_sub(1);
        let leaf = depth == 0;
        match ty {
            Ty::Patch => {
                if leaf || self.rng.gen_bool(0.4) {
                    Expr::Var("image".into())
                } else {
                    let idx = self.rng.gen_range(0..3);
                    Expr::Index(Box::new(self.expr(Ty::Patches, d)), idx)
                }
            }
            Ty::Patches => {
                let recv = if leaf {
                    Expr::Var("image".into())
                } else {
                    self.operand(Ty::Patch, d)
                };
                let n = self.noun();
                call(ModuleKind::Find, recv, vec![s(n)])
            }
            Ty::Flag => {
                if leaf {
                    return Expr::Literal(Literal::Bool(self.rng.gen_bool(0.5)));
                }
                match self.rng.gen_range(0..7) {
                    0 => {
                        let (n, a) = (self.noun(), self.attr());
                        let recv = self.operand(Ty::Patch, d);
                        call(ModuleKind::VerifyProperty, recv, vec![s(n), s(a)])
                    }
                    1 => {
                        let recv_ty = if self.rng.gen_bool(0.5) { Ty::Patch } else { Ty::Patches };
                        let recv = self.operand(recv_ty, d);
                        let n = self.noun();
                        call(ModuleKind::Exists, recv, vec![s(n)])
                    }
                    2 => Expr::Compare {
                        op: if self.rng.gen_bool(0.5) {
                            CompareOp::Eq
                        } else {
                            CompareOp::Ne
                        },
                        lhs: Box::new(self.expr(Ty::Text, d)),
                        rhs: Box::new(self.expr(Ty::Text, d)),
                    },
                    3 => Expr::Compare {
                        op: CompareOp::Eq,
                        lhs: Box::new(self.expr(Ty::Count, d)),
                        rhs: Box::new(self.expr(Ty::Count, 0)),
                    },
                    4 => Expr::Bool {
                        op: if self.rng.gen_bool(0.5) {
                            BoolOp::And
                        } else {
                            BoolOp::Or
                        },
                        lhs: Box::new(self.expr(Ty::Flag, d)),
                        rhs: Box::new(self.expr(Ty::Flag, d)),
                    },
                    5 => Expr::Not(Box::new(self.expr(Ty::Flag, d))),
                    _ => Expr::Literal(Literal::Bool(self.rng.gen_bool(0.5))),
                }
            }
            Ty::Text => {
                if leaf {
                    return s(self.text_literal());
                }
                match self.rng.gen_range(0..3) {
                    0 => {
                        let n = self.noun();
                        let q = match self.rng.gen_range(0..3) {
                            0 => format!("What color is this {n}?"),
                            1 => "What is this?".to_string(),
                            _ => format!("Is this {n} {}?", self.attr()),
                        };
                        let recv = self.operand(Ty::Patch, d);
                        let arg = if self.rng.gen_bool(self.ill_typed) {
                            self.expr(Ty::Flag, 0)
                        } else {
                            s(q)
                        };
                        call(ModuleKind::SimpleQuery, recv, vec![arg])
                    }
                    1 => {
                        let k = self.rng.gen_range(2..4);
                        let opts = (0..k).map(|_| s(self.attr())).collect();
                        let recv = self.operand(Ty::Patch, d);
                        call(ModuleKind::BestTextMatch, recv, vec![Expr::List(opts)])
                    }
                    _ => s(self.text_literal()),
                }
            }
            Ty::Count => {
                if leaf || self.rng.gen_bool(0.3) {
                    let n = [0.0, 1.0, 2.0, 0.5][self.rng.gen_range(0..4)];
                    Expr::Literal(Literal::Num(n))
                } else {
                    Expr::Len(Box::new(self.expr(Ty::Patches, d)))
                }
            }
        }
    }

    fn any_expr(&mut self) -> Expr {
        let ty = *TYPES.choose(&mut self.rng).unwrap();
        self.expr(ty, 3)
    }

    fn branch_block(&mut self) -> Vec<Stmt> {
        let mut block = Vec::new();
        if self.rng.gen_bool(0.4) {
            let ty = *TYPES.choose(&mut self.rng).unwrap();
            let e = self.expr(ty, 2);
            block.push(Stmt::Assign("w".into(), e));
            self.vars.push(("w".into(), ty));
        }
        block.push(Stmt::Return(self.any_expr()));
        if block.len() == 2 {
            self.vars.pop();
        }
        block
    }

    /// At most five top-level statements, at most one conditional.
    fn program(&mut self) -> Program {
        let mut statements = Vec::new();
        for i in 0..self.rng.gen_range(0..=3) {
            let ty = *TYPES.choose(&mut self.rng).unwrap();
            let e = self.expr(ty, 3);
            let name = format!("v{i}");
            statements.push(Stmt::Assign(name.clone(), e));
            self.vars.retain(|(n, _)| *n != name);
            self.vars.push((name, ty));
        }
        match self.rng.gen_range(0..4) {
            0 => statements.push(Stmt::Return(self.any_expr())),
            1 => {
                let cond = self.expr(Ty::Flag, 3);
                let then_block = self.branch_block();
                let else_block = self.branch_block();
                statements.push(Stmt::If {
                    cond,
                    then_block,
                    else_block,
                });
            }
            2 => {
                let cond = self.expr(Ty::Flag, 3);
                let then_block = self.branch_block();
                statements.push(Stmt::If {
                    cond,
                    then_block,
                    else_block: vec![],
                });
                statements.push(Stmt::Return(self.any_expr()));
            }
            _ => {
                let cond = self.expr(Ty::Flag, 3);
                let ty = *TYPES.choose(&mut self.rng).unwrap();
                let e = self.expr(ty, 2);
                statements.push(Stmt::If {
                    cond,
                    then_block: vec![Stmt::Assign("w".into(), e)],
                    else_block: vec![],
                });
                statements.push(Stmt::Return(self.any_expr()));
            }
        }
        let mut p = Program {
            statements,
            source_text: String::new(),
        };
        p.source_text = p.unparse();
        p
    }
}

// Reference interpreter. Tracks where each patch came from on its own rather
// than reading it off the patch.

#[derive(Debug, Clone, PartialEq)]
struct RefStep {
    kind: ModuleKind,
    output: Value,
    provenance: Option<String>,
}

struct RefRun<'a> {
    scene: &'a SceneGraph,
    registry: &'a ModuleRegistry,
    env: HashMap<String, (Value, Option<String>)>,
    steps: Vec<RefStep>,
    branches: Vec<bool>,
}

#[derive(Debug, PartialEq)]
struct RefOutcome {
    steps: Vec<RefStep>,
    branches: Vec<bool>,
    answer: Option<Value>,
}

fn reference(program: &Program, scene: &SceneGraph, registry: &ModuleRegistry) -> RefOutcome {
    let mut r = RefRun {
        scene,
        registry,
        env: HashMap::from([("image".to_string(), (Value::Patch(full_image(scene)), None))]),
        steps: Vec::new(),
        branches: Vec::new(),
    };
    let answer = r.block(&program.statements).ok().flatten();
    RefOutcome {
        steps: r.steps,
        branches: r.branches,
        answer,
    }
}

fn truth(v: &Value) -> Result<bool, ()> {
    match v {
        Value::Bool(b) => Ok(*b),
        Value::Num(n) => Ok(*n != 0.0),
        Value::Str(s) => Ok(!s.is_empty()),
        Value::List(v) => Ok(!v.is_empty()),
        Value::PatchList(v) => Ok(!v.is_empty()),
        Value::Patch(_) => Ok(true),
        Value::NaN => Err(()),
    }
}

impl RefRun<'_> {
    fn block(&mut self, block: &[Stmt]) -> Result<Option<Value>, ()> {
        for st in block {
            match st {
                Stmt::Assign(n, e) => {
                    let v = self.eval(e)?;
                    self.env.insert(n.clone(), v);
                }
                Stmt::Return(e) => return Ok(Some(self.eval(e)?.0)),
                Stmt::If {
                    cond,
                    then_block,
                    else_block,
                } => {
                    let taken = truth(&self.eval(cond)?.0)?;
                    self.branches.push(taken);
                    if let Some(v) = self.block(if taken { then_block } else { else_block })? {
                        return Ok(Some(v));
                    }
                }
            }
        }
        Ok(None)
    }

    fn eval(&mut self, e: &Expr) -> Result<(Value, Option<String>), ()> {
        Ok(match e {
            Expr::Literal(Literal::Str(s)) => (Value::Str(s.clone()), None),
            Expr::Literal(Literal::Bool(b)) => (Value::Bool(*b), None),
            Expr::Literal(Literal::Num(n)) => (Value::Num(*n), None),
            Expr::Var(n) => self.env.get(n).cloned().ok_or(())?,
            Expr::List(items) => {
                let mut out = Vec::new();
                for i in items {
                    out.push(self.eval(i)?.0);
                }
                (Value::List(out), None)
            }
            Expr::Index(inner, i) => {
                let (v, prov) = self.eval(inner)?;
                let i = usize::try_from(*i).map_err(|_| ())?;
                match v {
                    Value::PatchList(ps) => (Value::Patch(ps.get(i).cloned().ok_or(())?), prov),
                    Value::List(items) => (items.get(i).cloned().ok_or(())?, None),
                    _ => return Err(()),
                }
            }
            Expr::Len(inner) => match self.eval(inner)?.0 {
                Value::PatchList(ps) => (Value::Num(ps.len() as f64), None),
                Value::List(items) => (Value::Num(items.len() as f64), None),
                Value::Str(s) => (Value::Num(s.chars().count() as f64), None),
                _ => return Err(()),
            },
            Expr::Compare { op, lhs, rhs } => {
                let l = self.eval(lhs)?.0;
                let r = self.eval(rhs)?.0;
                (Value::Bool((l == r) == (*op == CompareOp::Eq)), None)
            }
            Expr::Bool { op, lhs, rhs } => {
                let l = truth(&self.eval(lhs)?.0)?;
                let v = match (op, l) {
                    (BoolOp::And, false) => false,
                    (BoolOp::Or, true) => true,
                    _ => truth(&self.eval(rhs)?.0)?,
                };
                (Value::Bool(v), None)
            }
            Expr::Not(inner) => (Value::Bool(!truth(&self.eval(inner)?.0)?), None),
            Expr::Call { module, receiver, args } => {
                let (recv, prov) = self.eval(receiver)?;
                let mut vals = Vec::new();
                for a in args {
                    vals.push(self.eval(a)?.0);
                }
                let input = build_input(*module, &recv, &vals, prov.clone());
                let out = input
                    .and_then(|i| self.registry.dispatch(self.scene, &i).ok())
                    .map(|p| match p.output {
                        ModuleOutput::Text(s) => Value::Str(s),
                        ModuleOutput::Flag(b) => Value::Bool(b),
                        ModuleOutput::Patches(ps) => Value::PatchList(ps),
                    });
                self.steps.push(RefStep {
                    kind: *module,
                    output: out.clone().unwrap_or(Value::NaN),
                    provenance: prov,
                });
                let out = out.ok_or(())?;
                let next_prov = match (module, &vals[..]) {
                    (ModuleKind::Find, [Value::Str(n)]) => Some(n.clone()),
                    _ => None,
                };
                (out, next_prov)
            }
        })
    }
}

fn build_input(kind: ModuleKind, recv: &Value, args: &[Value], center: Option<String>) -> Option<SubTaskInput> {
    let patch = |v: &Value| match v {
        Value::Patch(p) => Some(p.clone()),
        _ => None,
    };
    let text = |v: &Value| match v {
        Value::Str(s) => Some(s.clone()),
        _ => None,
    };
    Some(match (kind, args) {
        (ModuleKind::Find, [n]) => SubTaskInput::Find {
            patch: patch(recv)?,
            name: text(n)?,
        },
        (ModuleKind::Exists, [n]) => SubTaskInput::Exists {
            patches: match recv {
                Value::Patch(p) => vec![p.clone()],
                Value::PatchList(ps) => ps.clone(),
                _ => return None,
            },
            name: text(n)?,
        },
        (ModuleKind::VerifyProperty, [o, a]) => SubTaskInput::VerifyProperty {
            patch: patch(recv)?,
            center_word: center,
            object_name: text(o)?,
            attribute: text(a)?,
        },
        (ModuleKind::BestTextMatch, [Value::List(items)]) => SubTaskInput::BestTextMatch {
            patch: patch(recv)?,
            center_word: center,
            options: items.iter().map(text).collect::<Option<Vec<_>>>()?,
        },
        (ModuleKind::SimpleQuery, [q]) => SubTaskInput::SimpleQuery {
            patch: patch(recv)?,
            center_word: center,
            question: text(q)?,
        },
        _ => return None,
    })
}

// Path enumeration: every call sequence some execution could produce,
// ignoring values.

fn cross(a: &[Vec<ModuleKind>], b: &[Vec<ModuleKind>]) -> Vec<Vec<ModuleKind>> {
    let mut out = Vec::new();
    for x in a {
        for y in b {
            out.push(x.iter().chain(y).copied().collect());
        }
    }
    out
}

fn expr_paths(e: &Expr) -> Vec<Vec<ModuleKind>> {
    let unit = vec![vec![]];
    match e {
        Expr::Var(_) | Expr::Literal(_) => unit,
        Expr::Index(i, _) | Expr::Not(i) | Expr::Len(i) => expr_paths(i),
        Expr::List(items) => items.iter().fold(unit, |acc, i| cross(&acc, &expr_paths(i))),
        Expr::Compare { lhs, rhs, .. } => cross(&expr_paths(lhs), &expr_paths(rhs)),
        Expr::Bool { lhs, rhs, .. } => {
            let mut rhs_or_skip = expr_paths(rhs);
            rhs_or_skip.push(vec![]);
            cross(&expr_paths(lhs), &rhs_or_skip)
        }
        Expr::Call { module, receiver, args } => {
            let before = args
                .iter()
                .fold(expr_paths(receiver), |acc, a| cross(&acc, &expr_paths(a)));
            cross(&before, &[vec![*module]])
        }
    }
}

fn block_paths(block: &[Stmt]) -> Vec<Vec<ModuleKind>> {
    let Some((first, rest)) = block.split_first() else {
        return vec![vec![]];
    };
    match first {
        Stmt::Return(e) => expr_paths(e),
        Stmt::Assign(_, e) => cross(&expr_paths(e), &block_paths(rest)),
        Stmt::If {
            cond,
            then_block,
            else_block,
        } => {
            let mut arms = Vec::new();
            for b in [then_block, else_block] {
                let mut full = b.clone();
                if !matches!(b.last(), Some(Stmt::Return(_))) {
                    full.extend_from_slice(rest);
                }
                arms.extend(block_paths(&full));
            }
            cross(&expr_paths(cond), &arms)
        }
    }
}

struct Fixture {
    scenes: Vec<SceneGraph>,
    registries: Vec<ModuleRegistry>,
}

fn fixture() -> &'static Fixture {
    static F: std::sync::OnceLock<Fixture> = std::sync::OnceLock::new();
    F.get_or_init(|| {
        let cfg = WorldConfig::default();
        let lex = Arc::new(Lexicon::new(&cfg));
        let scenes = (0..24).map(|s| generate_world(s, &cfg).unwrap()).collect();
        let detector = Arc::new(Detector::new(0.05, 3, lex.clone()));
        let corrupted = CorruptedBackend::new(CorruptionProfile::new(3, 0.3, &lex), lex.clone());
        let registries = vec![
            ModuleRegistry::uniform(detector.clone(), Arc::new(corrupted)),
            ModuleRegistry::uniform(
                Arc::new(Detector::new(0.0, 0, lex.clone())),
                Arc::new(OracleBackend::new(lex)),
            ),
        ];
        Fixture { scenes, registries }
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 512, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn printed_programs_parse_back(seed in any::<u64>()) {
        let p = ProgramGen::new(seed, 0.1).program();
        let text = p.unparse();
        let back = parse(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.unparse(), text);
    }

    #[test]
    fn trace_matches_reference(seed in any::<u64>(), scene_ix in 0usize..24, reg_ix in 0usize..2) {
        let f = fixture();
        let (scene, registry) = (&f.scenes[scene_ix], &f.registries[reg_ix]);
        let p = ProgramGen::new(seed, 0.08).program();
        let trace = execute(&p, scene, registry);
        let want = reference(&p, scene, registry);

        let got: Vec<RefStep> = trace
            .steps
            .iter()
            .map(|s| RefStep { kind: s.module_kind, output: s.output.clone(), provenance: s.center_word.clone() })
            .collect();
        prop_assert_eq!(&got, &want.steps, "program:\n{}", p.source_text);
        for (i, s) in trace.steps.iter().enumerate() {
            prop_assert_eq!(s.step_index, i);
        }
        prop_assert_eq!(trace.branches.iter().map(|b| b.taken).collect::<Vec<_>>(), want.branches);
        match &want.answer {
            Some(v) => {
                prop_assert_eq!(trace.status, TraceStatus::Ok);
                prop_assert_eq!(&trace.answer, v);
            }
            None => {
                prop_assert_eq!(trace.status, TraceStatus::RuntimeNan);
                prop_assert!(trace.answer.is_nan());
            }
        }

        // The recorded calls are one of the statically possible paths, or a
        // prefix of one when the run stopped early.
        let kinds: Vec<ModuleKind> = trace.steps.iter().map(|s| s.module_kind).collect();
        let paths = block_paths(&p.statements);
        let fits = paths.iter().any(|path| match trace.status {
            TraceStatus::Ok => *path == kinds,
            _ => path.starts_with(&kinds),
        });
        prop_assert!(fits, "calls {:?} fit no path of\n{}", kinds, p.source_text);

        prop_assert_eq!(execute(&p, scene, registry), trace);
    }

    #[test]
    fn arbitrary_text_never_panics(src in "[a-z_ ().\\[\\]\"=:\n,0-9]{0,80}", q in "[a-zA-Z ?]{0,30}") {
        let f = fixture();
        let t = run_with_fallback(&src, &q, &f.scenes[0], &f.registries[0]);
        match parse(&src) {
            Ok(_) => prop_assert_ne!(t.status, TraceStatus::ParseErrorFallback),
            Err(_) => {
                prop_assert_eq!(t.status, TraceStatus::ParseErrorFallback);
                prop_assert_eq!(t.steps.len(), 1);
                prop_assert_eq!(&t.steps[0].args, &vec![Value::Str(q.clone())]);
            }
        }
    }
}

#[test]
fn generator_reaches_every_module_and_both_statuses() {
    let f = fixture();
    let mut kinds = std::collections::BTreeSet::new();
    let (mut ok, mut nan, mut branched) = (0, 0, 0);
    for seed in 0..400 {
        let p = ProgramGen::new(seed, 0.08).program();
        let t = execute(&p, &f.scenes[seed as usize % 24], &f.registries[0]);
        kinds.extend(t.steps.iter().map(|s| s.module_kind));
        branched += usize::from(!t.branches.is_empty());
        match t.status {
            TraceStatus::Ok => ok += 1,
            _ => nan += 1,
        }
    }
    assert_eq!(kinds.len(), 5, "{kinds:?}");
    assert!(
        ok > 50 && nan > 20 && branched > 50,
        "ok {ok} nan {nan} branched {branched}"
    );
}

#[test]
fn provenance_survives_variables_and_indexing() {
    let f = fixture();
    let scene = f
        .scenes
        .iter()
        .find(|s| s.objects.iter().any(|o| o.name == s.objects[0].name))
        .unwrap();
    let n = &scene.objects[0].name;
    let src = format!("a = image.find(\"{n}\")\nb = a[0]\nreturn b.simple_query(\"What is this?\")\n");
    let t = execute(&parse(&src).unwrap(), scene, &f.registries[1]);
    assert_eq!(t.steps.len(), 2);
    assert_eq!(t.steps[1].center_word.as_deref(), Some(n.as_str()));
    assert!(matches!(t.steps[1].receiver, Value::Patch(_)));
}
