//! Pipeline stages. Every stage reads upstream artifacts through [`Stage`],
//! which checks them against the manifests that produced them.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};

use crate::config::CliConfig;
use crate::exit::{Coded, ExitKind};
use crate::run_dir::Stage;
use vpdistill::dataset::{make_splits, stats, triple_stats, SplitManifest};
use vpdistill::distill::{self, DistillConfig, Triple};
use vpdistill::dsl::ExecutionTrace;
use vpdistill::eval::recipe::{
    baseline_students, generate_questions, grounding_items, nested_subsets, student_registry, GroundingComparison,
    SizePoint, StudentSwap,
};
use vpdistill::eval::{
    self, render, AblationRow, EvalContext, EvalReport, Framework, FrameworkConfig, GroundingReport,
};
use vpdistill::lexicon::Lexicon;
use vpdistill::quesgen::{llm_generate, GroundingItem, PromptProfile, QAPair};
use vpdistill::registry::{
    CorruptedBackend, CorruptionProfile, Detector, ModuleKind, ModuleRegistry, OracleBackend, TableStudent,
};
use vpdistill::scene::{generate_many, read_scenes, SceneGraph, SceneStore};
use vpdistill::util::read_jsonl;

pub struct Env {
    pub out: PathBuf,
    pub workers: usize,
}

const SCENES_TRAIN: &str = "scenes/train.jsonl";
const SCENES_EVAL: &str = "scenes/eval.jsonl";
const QA_TRAIN_POOL: &str = "qa/train_pool.jsonl";
const QA_EVAL_POOL: &str = "qa/eval_pool.jsonl";
const TRIPLES: &str = "triples/train.jsonl";

fn split_path(split: SplitArg) -> String {
    format!("dataset/{}.jsonl", split.as_str())
}

fn student_path(kind: ModuleKind) -> String {
    format!("students/{kind}.json")
}

fn stage(env: &Env, cfg: &CliConfig, command: &str) -> Stage {
    Stage::new(&env.out, command, &cfg.hash(), cfg.recipe.seed, env.workers)
}

fn read_items<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<T>> {
    read_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

fn load_scenes(st: &mut Stage, files: &[&str]) -> Result<SceneStore> {
    let mut store = SceneStore::new();
    for f in files {
        let path = st.input(f)?;
        store.extend(read_scenes(&path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(store)
}

fn lexicon(cfg: &CliConfig) -> Arc<Lexicon> {
    Arc::new(Lexicon::new(&cfg.recipe.world))
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    eval_scenes: Option<usize>,
}

pub fn gen_world(env: &Env, mut cfg: CliConfig, a: GenWorldArgs) -> Result<()> {
    if let Some(n) = a.train_scenes {
        cfg.recipe.train_scenes = n;
    }
    if let Some(n) = a.eval_scenes {
        cfg.recipe.eval_scenes = n;
    }
    cfg.validate()?;
    let mut st = stage(env, &cfg, "gen-world");
    let pools = cfg.recipe.pool_seeds();
    let train = generate_many(pools.train_first, cfg.recipe.train_scenes, &cfg.recipe.world)?;
    let evals = generate_many(pools.eval_first, cfg.recipe.eval_scenes, &cfg.recipe.world)?;
    st.output_jsonl(SCENES_TRAIN, &train)?;
    st.output_jsonl(SCENES_EVAL, &evals)?;
    st.finish("gen-world")?;
    println!("{} train scenes, {} eval scenes", train.len(), evals.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenQaArgs {
    #[arg(long)]
    fault_rate: Option<f64>,
    /// Phrase sub-questions without naming the object.
    #[arg(long)]
    no_visual_pointer: bool,
}

pub fn gen_qa(env: &Env, mut cfg: CliConfig, a: GenQaArgs) -> Result<()> {
    if let Some(r) = a.fault_rate {
        cfg.recipe.generation.fault_rate = r;
    }
    if a.no_visual_pointer {
        cfg.recipe.generation.visual_pointer = false;
    }
    cfg.validate()?;
    let mut st = stage(env, &cfg, "gen-qa");
    let lex = lexicon(&cfg);
    let mut counts = Vec::new();
    for (src, dst) in [(SCENES_TRAIN, QA_TRAIN_POOL), (SCENES_EVAL, QA_EVAL_POOL)] {
        let path = st.input(src)?;
        let scenes: Vec<SceneGraph> = read_scenes(&path)?;
        let qa = generate_questions(&scenes, &cfg.recipe.generation, cfg.recipe.seed, &lex);
        counts.push(qa.len());
        st.output_jsonl(dst, &qa)?;
    }
    st.finish("gen-qa")?;
    println!("{} train-pool questions, {} eval-pool questions", counts[0], counts[1]);
    Ok(())
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    train_cap: Option<usize>,
    #[arg(long)]
    eval_cap: Option<usize>,
}

pub fn build_dataset(env: &Env, mut cfg: CliConfig, a: BuildDatasetArgs) -> Result<()> {
    if let Some(k) = a.train_cap {
        cfg.recipe.train_cap = k;
    }
    if let Some(k) = a.eval_cap {
        cfg.recipe.eval_cap = k;
    }
    cfg.validate()?;
    let mut st = stage(env, &cfg, "build-dataset");
    let train_pool: Vec<QAPair> = read_items(&st.input(QA_TRAIN_POOL)?)?;
    let eval_pool: Vec<QAPair> = read_items(&st.input(QA_EVAL_POOL)?)?;
    let specs = cfg.recipe.split_specs();
    let spec_refs = [&specs[0], &specs[1], &specs[2]];
    let splits = make_splits(
        &train_pool,
        &eval_pool,
        spec_refs,
        cfg.recipe.val_fraction,
        cfg.recipe.seed,
    )?;
    for (name, b) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        st.output_jsonl(&format!("dataset/{name}.jsonl"), &b.items)?;
    }
    st.output_json(
        "dataset/splits.json",
        &SplitManifest::new(&splits, spec_refs, cfg.recipe.seed),
    )?;
    let summary: std::collections::BTreeMap<&str, _> = [
        ("train", stats(&splits.train.items)),
        ("val", stats(&splits.val.items)),
        ("test", stats(&splits.test.items)),
    ]
    .into_iter()
    .collect();
    st.output_json("dataset/stats.json", &summary)?;
    st.finish("build-dataset")?;
    println!(
        "train {} / val {} / test {} questions; disjointness verified",
        splits.train.items.len(),
        splits.val.items.len(),
        splits.test.items.len()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn as_str(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegistryArg {
    /// Corrupted students at every distillable binding.
    Baseline,
    /// Every saved student in place of its corrupted counterpart.
    Distilled,
    /// Only the saved simple_query student swapped in.
    Transplant,
    /// The teacher answers every distillable call.
    Teacher,
    /// Perfect detector and the oracle everywhere.
    Oracle,
}

impl RegistryArg {
    fn as_str(self) -> &'static str {
        match self {
            RegistryArg::Baseline => "baseline",
            RegistryArg::Distilled => "distilled",
            RegistryArg::Transplant => "transplant",
            RegistryArg::Teacher => "teacher",
            RegistryArg::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrameworkArg {
    Fine,
    Coarse,
}

impl From<FrameworkArg> for Framework {
    fn from(f: FrameworkArg) -> Self {
        match f {
            FrameworkArg::Fine => Framework::Fine,
            FrameworkArg::Coarse => Framework::Coarse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProgramSource {
    Templates,
    Service,
}

fn detector(cfg: &CliConfig, lex: &Arc<Lexicon>) -> Arc<Detector> {
    Arc::new(Detector::new(cfg.recipe.miss_rate, cfg.recipe.seed, lex.clone()))
}

fn baseline_registry(cfg: &CliConfig, lex: &Arc<Lexicon>) -> ModuleRegistry {
    let profile = CorruptionProfile::new(cfg.recipe.seed, cfg.recipe.rho, lex);
    ModuleRegistry::uniform(
        detector(cfg, lex),
        Arc::new(CorruptedBackend::new(profile, lex.clone())),
    )
}

fn load_student(st: &mut Stage, kind: ModuleKind, lex: &Arc<Lexicon>) -> Result<TableStudent> {
    let path = st.input(&student_path(kind))?;
    TableStudent::load(&path, lex.clone()).with_context(|| format!("loading {}", path.display()))
}

fn distilled_registry(st: &mut Stage, cfg: &CliConfig, lex: &Arc<Lexicon>) -> Result<ModuleRegistry> {
    let mut reg = baseline_registry(cfg, lex);
    let mut any = false;
    for kind in ModuleKind::DISTILLABLE {
        if st.has_input(&student_path(kind)) {
            reg = reg.replace_backend(kind, Arc::new(load_student(st, kind, lex)?))?;
            any = true;
        }
    }
    if !any {
        return Err(Coded::new(
            ExitKind::MissingArtifact,
            "no student state under students/; run `distill` first",
        )
        .into());
    }
    Ok(reg)
}

fn build_registry(st: &mut Stage, cfg: &CliConfig, lex: &Arc<Lexicon>, which: RegistryArg) -> Result<ModuleRegistry> {
    Ok(match which {
        RegistryArg::Baseline => baseline_registry(cfg, lex),
        RegistryArg::Distilled => distilled_registry(st, cfg, lex)?,
        RegistryArg::Transplant => {
            let student = load_student(st, ModuleKind::SimpleQuery, lex)?;
            baseline_registry(cfg, lex).replace_backend(ModuleKind::SimpleQuery, Arc::new(student))?
        }
        RegistryArg::Teacher => {
            eval::teacher_replacement_registry(detector(cfg, lex), Arc::new(OracleBackend::new(lex.clone())))
        }
        RegistryArg::Oracle => eval::oracle_registry(lex.clone()),
    })
}

fn run_name(split: SplitArg, registry: RegistryArg, framework: FrameworkArg) -> String {
    let f: Framework = framework.into();
    format!("{}-{}-{}", split.as_str(), registry.as_str(), f.as_str())
}

#[derive(Debug, Args)]
pub struct RunProgramsArgs {
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "baseline")]
    registry: RegistryArg,
    #[arg(long, value_enum, default_value = "fine")]
    framework: FrameworkArg,
    #[arg(long, value_enum, default_value = "templates")]
    program_source: ProgramSource,
    /// Use the template program when the service fails for a question.
    #[arg(long)]
    service_fallback: bool,
}

pub fn run_programs(env: &Env, cfg: CliConfig, a: RunProgramsArgs) -> Result<()> {
    cfg.validate()?;
    let mut st = stage(env, &cfg, "run-programs");
    let lex = lexicon(&cfg);
    let mut items: Vec<QAPair> = read_items(&st.input(&split_path(a.split))?)?;
    let scenes = load_scenes(&mut st, &[SCENES_TRAIN, SCENES_EVAL])?;
    let registry = build_registry(&mut st, &cfg, &lex, a.registry)?;
    let mut fc = FrameworkConfig::fine(a.registry.as_str(), registry);
    fc.framework = a.framework.into();
    fc.visual_pointer = cfg.recipe.generation.visual_pointer;
    let name = run_name(a.split, a.registry, a.framework);

    if a.program_source == ProgramSource::Service {
        let svc = cfg.service.resolve().ok_or_else(|| {
            Coded::new(
                ExitKind::Config,
                format!(
                    "--program-source service needs {} or [service].endpoint",
                    vpdistill::quesgen::ServiceConfig::ENDPOINT_ENV
                ),
            )
        })?;
        let profile = if fc.visual_pointer {
            PromptProfile::Pointer
        } else {
            PromptProfile::Plain
        };
        let mut programs = Vec::with_capacity(items.len());
        for qa in items.iter_mut() {
            let program = match llm_generate(&qa.question, profile, &svc) {
                Ok(p) => p,
                Err(e) if a.service_fallback => {
                    log::warn!("{}: {e}; using template program", qa.question_id);
                    fc.program(qa).to_string()
                }
                Err(e) => return Err(e.into()),
            };
            match fc.framework {
                Framework::Fine => qa.program = program.clone(),
                Framework::Coarse => qa.coarse_program = program.clone(),
            }
            programs.push(serde_json::json!({"question_id": qa.question_id, "program": program}));
        }
        st.output_jsonl(&format!("programs/{name}.jsonl"), &programs)?;
    }

    let traces = eval::run_programs(&fc, &items, &scenes);
    st.output_jsonl(&format!("traces/{name}.jsonl"), &traces)?;
    st.finish(&format!("run-programs-{name}"))?;
    let nan = traces.iter().filter(|t| t.answer.is_nan()).count();
    println!("{} traces ({nan} NaN) -> traces/{name}.jsonl", traces.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct HarvestArgs {
    /// Trace file relative to the run directory.
    #[arg(long, default_value = "traces/train-baseline-fine.jsonl")]
    traces: String,
}

pub fn harvest(env: &Env, cfg: CliConfig, a: HarvestArgs) -> Result<()> {
    cfg.validate()?;
    let mut st = stage(env, &cfg, "harvest");
    let lex = lexicon(&cfg);
    let traces: Vec<ExecutionTrace> = read_items(&st.input(&a.traces)?)?;
    let scenes = load_scenes(&mut st, &[SCENES_TRAIN, SCENES_EVAL])?;
    let teacher = OracleBackend::new(lex.clone());
    let h = distill::harvest(&traces, &scenes, &teacher, &lex);
    for w in h.warnings.iter().take(20) {
        log::warn!("{w}");
    }
    st.output_jsonl(TRIPLES, &h.triples)?;
    st.output_json("triples/stats.json", &triple_stats(&h.triples))?;
    st.finish("harvest")?;
    println!("{} triples, {} steps skipped", h.triples.len(), h.skipped);
    Ok(())
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Module kinds to distill.
    #[arg(long, value_delimiter = ',')]
    modules: Option<Vec<ModuleKind>>,
    #[arg(long)]
    epochs: Option<usize>,
}

pub fn distill(env: &Env, mut cfg: CliConfig, a: DistillArgs) -> Result<()> {
    if let Some(m) = a.modules {
        cfg.recipe.distill.modules = m;
    }
    if let Some(e) = a.epochs {
        cfg.recipe.distill.epochs = e;
    }
    cfg.validate()?;
    let mut st = stage(env, &cfg, "distill");
    let lex = lexicon(&cfg);
    let triples: Vec<Triple> = read_items(&st.input(TRIPLES)?)?;
    let scenes = load_scenes(&mut st, &[SCENES_TRAIN, SCENES_EVAL])?;
    let profile = CorruptionProfile::new(cfg.recipe.seed, cfg.recipe.rho, &lex);
    let dc = DistillConfig {
        shuffle_seed: cfg.recipe.seed,
        ..cfg.recipe.distill.clone()
    };
    let students = baseline_students(&profile, &lex, &dc.modules);
    let (students, report) = distill::train(students, &triples, &scenes, &dc)?;
    for (kind, s) in &students {
        let mut text = serde_json::to_string_pretty(&s.to_state())?;
        text.push('\n');
        st.output(&student_path(*kind), text.as_bytes())?;
    }
    st.output_json("students/training.json", &report)?;
    st.finish("distill")?;
    for (kind, n) in &report.keys_above_tau {
        println!("{kind}: {n} keys learned of {}", report.table_sizes[kind]);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "baseline")]
    registry: RegistryArg,
    #[arg(long, value_enum, default_value = "fine")]
    framework: FrameworkArg,
}

pub fn evaluate(env: &Env, cfg: CliConfig, a: EvaluateArgs) -> Result<()> {
    cfg.validate()?;
    let mut st = stage(env, &cfg, "evaluate");
    let lex = lexicon(&cfg);
    let name = run_name(a.split, a.registry, a.framework);
    let traces: Vec<ExecutionTrace> = read_items(&st.input(&format!("traces/{name}.jsonl"))?)?;
    let items: Vec<QAPair> = read_items(&st.input(&split_path(a.split))?)?;
    let scenes = load_scenes(&mut st, &[SCENES_TRAIN, SCENES_EVAL])?;
    if traces.len() != items.len() || traces.iter().zip(&items).any(|(t, q)| t.question_id != q.question_id) {
        return Err(Coded::new(
            ExitKind::Checksum,
            format!("traces/{name}.jsonl does not match dataset/{}.jsonl", a.split.as_str()),
        )
        .into());
    }
    let registry = build_registry(&mut st, &cfg, &lex, a.registry)?;
    let mut fc = FrameworkConfig::fine(&name, registry);
    fc.framework = a.framework.into();
    fc.visual_pointer = cfg.recipe.generation.visual_pointer;
    let ctx = EvalContext::new(&scenes, lex);
    let r = eval::score(&fc, &items, &traces, &ctx);
    write_eval(&mut st, &name, &r)?;
    st.finish(&format!("evaluate-{name}"))?;
    print!("{}", render::eval_table(std::slice::from_ref(&r)));
    Ok(())
}

fn write_eval(st: &mut Stage, name: &str, r: &EvalReport) -> Result<()> {
    st.output_json(&format!("reports/eval-{name}.json"), r)?;
    let mut md = render::eval_table(std::slice::from_ref(r));
    md.push_str(&render::per_type_table(r));
    md.push_str(&render::taxonomy_table(r));
    st.output(&format!("reports/eval-{name}.md"), md.as_bytes())?;
    st.output(
        &format!("reports/eval-{name}.csv"),
        render::eval_csv(std::slice::from_ref(r)).as_bytes(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// 0 to 3 distilled modules swapped in.
    DistilledCount,
    /// Nested training subsets.
    TrainsetSize,
    /// simple_query students of several corruption strengths.
    SimpleQuery,
}

impl Axis {
    fn as_str(self) -> &'static str {
        match self {
            Axis::DistilledCount => "distilled-count",
            Axis::TrainsetSize => "trainset-size",
            Axis::SimpleQuery => "simple-query",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

pub fn ablate(env: &Env, cfg: CliConfig, a: AblateArgs) -> Result<()> {
    cfg.validate()?;
    let mut st = stage(env, &cfg, "ablate");
    let lex = lexicon(&cfg);
    let items: Vec<QAPair> = read_items(&st.input(&split_path(a.split))?)?;
    let scenes = load_scenes(&mut st, &[SCENES_TRAIN, SCENES_EVAL])?;
    let ctx = EvalContext::new(&scenes, lex.clone());
    let base = baseline_registry(&cfg, &lex);
    let dc = DistillConfig {
        shuffle_seed: cfg.recipe.seed,
        ..cfg.recipe.distill.clone()
    };
    let stem = format!("reports/ablate-{}", a.axis.as_str());
    match a.axis {
        Axis::DistilledCount => {
            let distilled = distilled_registry(&mut st, &cfg, &lex)?;
            let rows: Vec<AblationRow> = eval::ablate_distilled_count(&base, &distilled, &items, &ctx);
            st.output_json(&format!("{stem}.json"), &rows)?;
            st.output(&format!("{stem}.md"), render::ablation_table(&rows).as_bytes())?;
            st.output(&format!("{stem}.csv"), render::ablation_csv(&rows).as_bytes())?;
            print!("{}", render::ablation_table(&rows));
        }
        Axis::TrainsetSize => {
            let train: Vec<QAPair> = read_items(&st.input(&split_path(SplitArg::Train))?)?;
            let triples: Vec<Triple> = read_items(&st.input(TRIPLES)?)?;
            let profile = CorruptionProfile::new(cfg.recipe.seed, cfg.recipe.rho, &lex);
            let mut points = Vec::new();
            for subset in nested_subsets(&train, &cfg.recipe.trainset_ratios, cfg.recipe.seed) {
                let ids: BTreeSet<&str> = subset.iter().map(|q| q.question_id.as_str()).collect();
                let part: Vec<Triple> = triples
                    .iter()
                    .filter(|t| ids.contains(t.source_qid.as_str()))
                    .cloned()
                    .collect();
                let (students, report) =
                    distill::train(baseline_students(&profile, &lex, &dc.modules), &part, &scenes, &dc)?;
                let r = eval::evaluate(
                    &FrameworkConfig::fine("distilled", student_registry(&base, students)),
                    &items,
                    &ctx,
                );
                points.push(SizePoint {
                    questions: subset.len(),
                    triples: part.len(),
                    learned_keys: report.keys_above_tau.values().sum(),
                    acc_all: r.acc_all,
                    acc_no_nan: r.acc_no_nan,
                });
            }
            st.output_json(&format!("{stem}.json"), &points)?;
            st.output(&format!("{stem}.csv"), render::curve_csv(&points).as_bytes())?;
            print!("{}", render::curve_csv(&points));
        }
        Axis::SimpleQuery => {
            let triples: Vec<Triple> = read_items(&st.input(TRIPLES)?)?;
            let mut swaps = Vec::new();
            for &rho in &cfg.recipe.simple_query_rhos {
                let profile = CorruptionProfile::new(cfg.recipe.seed, rho, &lex);
                let reg = base.replace_backend(
                    ModuleKind::SimpleQuery,
                    Arc::new(CorruptedBackend::new(profile.clone(), lex.clone())),
                )?;
                let only = DistillConfig {
                    modules: vec![ModuleKind::SimpleQuery],
                    ..dc.clone()
                };
                let (students, _) = distill::train(
                    baseline_students(&profile, &lex, &only.modules),
                    &triples,
                    &scenes,
                    &only,
                )?;
                let label = format!("simple_query_rho_{rho}");
                swaps.push(StudentSwap {
                    rho,
                    baseline: eval::evaluate(
                        &FrameworkConfig::fine(&format!("{label}_baseline"), reg.clone()),
                        &items,
                        &ctx,
                    ),
                    distilled: eval::evaluate(
                        &FrameworkConfig::fine(&format!("{label}_distilled"), student_registry(&reg, students)),
                        &items,
                        &ctx,
                    ),
                });
            }
            let flat: Vec<EvalReport> = swaps
                .iter()
                .flat_map(|s| [s.baseline.clone(), s.distilled.clone()])
                .collect();
            st.output_json(&format!("{stem}.json"), &swaps)?;
            st.output(&format!("{stem}.md"), render::eval_table(&flat).as_bytes())?;
            st.output(&format!("{stem}.csv"), render::eval_csv(&flat).as_bytes())?;
            print!("{}", render::eval_table(&flat));
        }
    }
    st.finish(&format!("ablate-{}", a.axis.as_str()))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct GroundEvalArgs {
    /// Registries to compare; the first is the reference.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "baseline,distilled")]
    registries: Vec<RegistryArg>,
}

pub fn ground_eval(env: &Env, cfg: CliConfig, a: GroundEvalArgs) -> Result<()> {
    cfg.validate()?;
    let mut st = stage(env, &cfg, "ground-eval");
    let lex = lexicon(&cfg);
    let scenes = load_scenes(&mut st, &[SCENES_TRAIN, SCENES_EVAL])?;
    let eval_ids: Vec<String> = read_scenes(&st.path(SCENES_EVAL))?
        .into_iter()
        .map(|s| s.scene_id)
        .collect();
    let items: Vec<GroundingItem> = grounding_items(&scenes, &eval_ids, cfg.recipe.seed, &lex);
    st.output_jsonl("grounding/items.jsonl", &items)?;
    let mut reports: Vec<GroundingReport> = Vec::new();
    for which in &a.registries {
        let reg = build_registry(&mut st, &cfg, &lex, *which)?;
        reports.push(eval::grounding_eval(which.as_str(), &reg, &items, &scenes));
    }
    if let [b, d] = &reports[..] {
        st.output_json(
            "reports/grounding.json",
            &GroundingComparison {
                baseline: b.clone(),
                distilled: d.clone(),
            },
        )?;
    } else {
        st.output_json("reports/grounding.json", &reports)?;
    }
    let mut md = String::from("| run | items | mean IoU |\n|---|---|---|\n");
    for g in &reports {
        md.push_str(&format!("| {} | {} | {:.1} |\n", g.label, g.items, 100.0 * g.mean_iou));
    }
    st.output("reports/grounding.md", md.as_bytes())?;
    st.finish("ground-eval")?;
    print!("{md}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Add a trace-diff case report for this test question.
    #[arg(long)]
    case: Vec<String>,
    #[arg(long, value_enum, default_value = "baseline")]
    before: RegistryArg,
    #[arg(long, value_enum, default_value = "distilled")]
    after: RegistryArg,
}

pub fn report(env: &Env, cfg: CliConfig, a: ReportArgs) -> Result<()> {
    cfg.validate()?;
    let mut st = stage(env, &cfg, "report");
    let dir = st.path("reports");
    let mut names: Vec<String> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    names.sort();
    if names.is_empty() {
        return Err(Coded::new(ExitKind::MissingArtifact, format!("no reports under {}", dir.display())).into());
    }
    let mut out = String::from("# Report\n\n");
    let mut evals: Vec<EvalReport> = Vec::new();
    for n in names.iter().filter(|n| n.starts_with("eval-")) {
        let path = st.input(&format!("reports/{n}"))?;
        evals.push(serde_json::from_str(&fs::read_to_string(path)?)?);
    }
    let (fine, coarse): (Vec<EvalReport>, Vec<EvalReport>) =
        evals.into_iter().partition(|r| r.framework == Framework::Fine);
    if !fine.is_empty() {
        out.push_str("## Main comparison\n\n");
        out.push_str(&render::eval_table(&fine));
    }
    if !coarse.is_empty() {
        out.push_str("## Coarse framework\n\n");
        out.push_str(&render::eval_table(&coarse));
    }
    if names.iter().any(|n| n == "ablate-distilled-count.json") {
        let rows: Vec<AblationRow> =
            serde_json::from_str(&fs::read_to_string(st.input("reports/ablate-distilled-count.json")?)?)?;
        out.push_str("## Distilled module count\n\n");
        out.push_str(&render::ablation_table(&rows));
    }
    if names.iter().any(|n| n == "ablate-simple-query.json") {
        let swaps: Vec<StudentSwap> =
            serde_json::from_str(&fs::read_to_string(st.input("reports/ablate-simple-query.json")?)?)?;
        let flat: Vec<EvalReport> = swaps
            .iter()
            .flat_map(|s| [s.baseline.clone(), s.distilled.clone()])
            .collect();
        out.push_str("## simple_query students\n\n");
        out.push_str(&render::eval_table(&flat));
    }
    if names.iter().any(|n| n == "ablate-trainset-size.json") {
        let points: Vec<SizePoint> =
            serde_json::from_str(&fs::read_to_string(st.input("reports/ablate-trainset-size.json")?)?)?;
        out.push_str("## Training set size\n\n```\n");
        out.push_str(&render::curve_csv(&points));
        out.push_str("```\n\n");
        st.output("trainset_curve.csv", render::curve_csv(&points).as_bytes())?;
    }
    if names.iter().any(|n| n == "grounding.json") {
        let text = fs::read_to_string(st.input("reports/grounding.json")?)?;
        out.push_str("## Grounding\n\n| run | items | mean IoU |\n|---|---|---|\n");
        let rows: Vec<GroundingReport> = match serde_json::from_str::<GroundingComparison>(&text) {
            Ok(c) => vec![c.baseline, c.distilled],
            Err(_) => serde_json::from_str(&text)?,
        };
        for g in rows {
            out.push_str(&format!("| {} | {} | {:.1} |\n", g.label, g.items, 100.0 * g.mean_iou));
        }
        out.push('\n');
    }
    if !a.case.is_empty() {
        let lex = lexicon(&cfg);
        let items: Vec<QAPair> = read_items(&st.input(&split_path(SplitArg::Test))?)?;
        let scenes = load_scenes(&mut st, &[SCENES_TRAIN, SCENES_EVAL])?;
        let before = FrameworkConfig::fine(a.before.as_str(), build_registry(&mut st, &cfg, &lex, a.before)?);
        let after = FrameworkConfig::fine(a.after.as_str(), build_registry(&mut st, &cfg, &lex, a.after)?);
        for qid in &a.case {
            let qa = items
                .iter()
                .find(|q| &q.question_id == qid)
                .ok_or_else(|| Coded::new(ExitKind::MissingArtifact, format!("{qid} is not in the test split")))?;
            out.push_str(&eval::case_report(qa, &before, &after, &scenes));
            out.push('\n');
        }
    }
    st.output("report.md", out.as_bytes())?;
    st.finish("report")?;
    print!("{out}");
    Ok(())
}
