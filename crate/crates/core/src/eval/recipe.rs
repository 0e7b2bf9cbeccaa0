//! The end-to-end experiment recipe: world, questions, splits, harvesting,
//! distillation and every evaluation table, from one config and seed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    ablate_distilled_count, case_report, cross_framework, evaluate, grounding_eval, is_correct, oracle_registry,
    run_programs, teacher_replacement_registry, AblationRow, CrossFramework, EvalContext, EvalReport, FrameworkConfig,
    GroundingReport,
};
use crate::dataset::{
    make_splits, stats, triple_stats, DatasetError, SplitName, SplitSpec, SplitStats, Splits, TripleStats,
};
use crate::distill::{harvest, train, DistillConfig, DistillError, Students, TrainingReport, Triple};
use crate::dsl::ExecutionTrace;
use crate::lexicon::Lexicon;
use crate::quesgen::{generate_grounding, generate_qa, GenConfig, GenError, GroundingItem, QAPair};
use crate::registry::{
    Backend, CorruptedBackend, CorruptionProfile, Detector, ModuleKind, ModuleRegistry, OracleBackend, StudentState,
    TableStudent,
};
use crate::scene::{generate_many, SceneGraph, SceneStore, WorldConfig, WorldError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub generation: GenConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub train_cap: usize,
    pub eval_cap: usize,
    pub val_fraction: f64,
    pub rho: f64,
    pub miss_rate: f64,
    pub distill: DistillConfig,
    /// Relative sizes of the nested training subsets.
    pub trainset_ratios: Vec<usize>,
    /// Ambiguity rate of the separate world used for the pointer comparison.
    pub pointer_ambiguity: f64,
    pub pointer_scenes: usize,
    /// Corruption strengths of the alternative simple_query students.
    pub simple_query_rhos: Vec<f64>,
    pub case_reports: usize,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            generation: GenConfig::default(),
            train_scenes: 8000,
            eval_scenes: 300,
            train_cap: crate::dataset::DEFAULT_CAP,
            eval_cap: crate::dataset::DEFAULT_CAP,
            val_fraction: 0.3,
            rho: 0.3,
            miss_rate: 0.05,
            distill: DistillConfig::default(),
            trainset_ratios: vec![1, 4, 6],
            pointer_ambiguity: 0.4,
            pointer_scenes: 300,
            simple_query_rhos: vec![0.3, 0.5],
            case_reports: 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error("invalid recipe config: {0}")]
    Config(String),
}

impl RecipeConfig {
    pub fn validate(&self) -> Result<(), RecipeError> {
        self.world.validate()?;
        self.generation.validate()?;
        self.distill.validate()?;
        let bad = |m: &str| Err(RecipeError::Config(m.into()));
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return bad("scene counts must be positive");
        }
        if self.train_cap == 0 || self.eval_cap == 0 {
            return bad("split caps must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.rho) || self.simple_query_rhos.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("corruption rates must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return bad("miss_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.pointer_ambiguity) {
            return bad("pointer_ambiguity must lie in [0, 1]");
        }
        if self.trainset_ratios.is_empty() || self.trainset_ratios.contains(&0) {
            return bad("trainset_ratios must be positive");
        }
        Ok(())
    }

    pub fn pool_seeds(&self) -> ScenePools {
        let base = self.seed.wrapping_mul(10_000_000);
        ScenePools {
            train_first: base,
            eval_first: base + 1_000_000,
            pointer_first: base + 2_000_000,
        }
    }

    pub fn split_specs(&self) -> [SplitSpec; 3] {
        [
            SplitSpec::new(SplitName::Train, self.train_cap, "train"),
            SplitSpec::new(SplitName::Val, self.eval_cap, "eval"),
            SplitSpec::new(SplitName::Test, self.eval_cap, "eval"),
        ]
    }
}

/// First generation seeds of the scene pools. Pools never share a seed, so
/// they never share a scene id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenePools {
    pub train_first: u64,
    pub eval_first: u64,
    pub pointer_first: u64,
}

pub fn generate_questions(scenes: &[SceneGraph], config: &GenConfig, seed: u64, lex: &Lexicon) -> Vec<QAPair> {
    scenes
        .par_iter()
        .map(|s| generate_qa(s, config, seed, lex))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// The corrupted students every experiment starts from.
pub fn baseline_students(profile: &CorruptionProfile, lex: &Arc<Lexicon>, kinds: &[ModuleKind]) -> Students {
    kinds
        .iter()
        .map(|&k| {
            (
                k,
                TableStudent::new(k, CorruptedBackend::new(profile.clone(), lex.clone())),
            )
        })
        .collect()
}

/// Registry with each trained student bound to its kind; other kinds keep
/// the bindings of `base`.
pub fn student_registry(base: &ModuleRegistry, students: Students) -> ModuleRegistry {
    let mut reg = base.clone();
    for (kind, student) in students {
        reg = reg
            .replace_backend(kind, Arc::new(student))
            .expect("students are distillable kinds");
    }
    reg
}

/// Shuffles once and returns prefixes sized by `ratios` relative to the
/// largest, so every subset contains the smaller ones.
pub fn nested_subsets(items: &[QAPair], ratios: &[usize], seed: u64) -> Vec<Vec<QAPair>> {
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let max = ratios.iter().copied().max().unwrap_or(1).max(1);
    ratios
        .iter()
        .map(|&r| shuffled[..items.len() * r / max].to_vec())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointerStudy {
    pub ambiguity: f64,
    pub questions: usize,
    /// Questions whose pointer-phrased run reached a find-produced patch
    /// showing two or more objects.
    pub ambiguous_subset: usize,
    pub subset_acc_with: f64,
    pub subset_acc_without: f64,
    pub acc_with: f64,
    pub acc_without: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub questions: usize,
    pub triples: usize,
    pub learned_keys: usize,
    pub acc_all: f64,
    pub acc_no_nan: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSwap {
    pub rho: f64,
    pub baseline: EvalReport,
    pub distilled: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingComparison {
    pub baseline: GroundingReport,
    pub distilled: GroundingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub seed: u64,
    pub splits: BTreeMap<String, SplitStats>,
    pub phase_counts: BTreeMap<String, (usize, usize)>,
    pub triples: TripleStats,
    pub harvest_skipped: usize,
    pub training: TrainingReport,
    /// baseline without pointer, baseline, distilled, teacher replacement,
    /// all-oracle.
    pub main: Vec<EvalReport>,
    pub pointer: PointerStudy,
    pub distilled_count: Vec<AblationRow>,
    pub trainset_size: Vec<SizePoint>,
    pub cross_framework: CrossFramework,
    pub simple_query_swaps: Vec<StudentSwap>,
    pub grounding: GroundingComparison,
    pub cases: Vec<String>,
}

impl RecipeReport {
    pub fn main_row(&self, label: &str) -> Option<&EvalReport> {
        self.main.iter().find(|r| r.label == label)
    }
}

pub const BASELINE_PLAIN: &str = "baseline_no_pointer";
pub const BASELINE: &str = "baseline";
pub const DISTILLED: &str = "distilled";
pub const TEACHER_REPLACEMENT: &str = "teacher_replacement";
pub const ALL_ORACLE: &str = "all_oracle";

/// The built intermediate state, kept for callers that need more than the
/// report.
pub struct Prepared {
    pub lex: Arc<Lexicon>,
    pub scenes: SceneStore,
    pub eval_scene_ids: Vec<String>,
    pub splits: Splits,
    pub profile: CorruptionProfile,
    pub detector: Arc<Detector>,
    pub baseline: ModuleRegistry,
    pub train_traces: Vec<ExecutionTrace>,
    pub triples: Vec<Triple>,
    pub harvest_skipped: usize,
}

pub fn prepare(cfg: &RecipeConfig) -> Result<Prepared, RecipeError> {
    cfg.validate()?;
    let lex = Arc::new(Lexicon::new(&cfg.world));
    let pools = cfg.pool_seeds();
    let train_scenes = generate_many(pools.train_first, cfg.train_scenes, &cfg.world)?;
    let eval_scenes = generate_many(pools.eval_first, cfg.eval_scenes, &cfg.world)?;
    let train_pool = generate_questions(&train_scenes, &cfg.generation, cfg.seed, &lex);
    let eval_pool = generate_questions(&eval_scenes, &cfg.generation, cfg.seed, &lex);
    let specs = cfg.split_specs();
    let splits = make_splits(
        &train_pool,
        &eval_pool,
        [&specs[0], &specs[1], &specs[2]],
        cfg.val_fraction,
        cfg.seed,
    )?;
    let eval_scene_ids = eval_scenes.iter().map(|s| s.scene_id.clone()).collect();
    let scenes: SceneStore = train_scenes.into_iter().chain(eval_scenes).collect();

    let profile = CorruptionProfile::new(cfg.seed, cfg.rho, &lex);
    let detector = Arc::new(Detector::new(cfg.miss_rate, cfg.seed, lex.clone()));
    let baseline = ModuleRegistry::uniform(
        detector.clone(),
        Arc::new(CorruptedBackend::new(profile.clone(), lex.clone())),
    );

    let train_traces = run_programs(
        &FrameworkConfig::fine(BASELINE, baseline.clone()),
        &splits.train.items,
        &scenes,
    );
    let teacher = OracleBackend::new(lex.clone());
    let harvested = harvest(&train_traces, &scenes, &teacher, &lex);
    Ok(Prepared {
        lex,
        scenes,
        eval_scene_ids,
        splits,
        profile,
        detector,
        baseline,
        train_traces,
        triples: harvested.triples,
        harvest_skipped: harvested.skipped,
    })
}

fn distill_on(
    p: &Prepared,
    profile: &CorruptionProfile,
    triples: &[Triple],
    config: &DistillConfig,
) -> Result<(Students, TrainingReport), DistillError> {
    let students = baseline_students(profile, &p.lex, &config.modules);
    train(students, triples, &p.scenes, config)
}

fn pointer_study(cfg: &RecipeConfig, p: &Prepared) -> Result<PointerStudy, RecipeError> {
    let world = WorldConfig {
        ambiguity_rate: cfg.pointer_ambiguity,
        ..cfg.world.clone()
    };
    let scenes = generate_many(cfg.pool_seeds().pointer_first, cfg.pointer_scenes, &world)?;
    let with = generate_questions(
        &scenes,
        &GenConfig {
            visual_pointer: true,
            ..cfg.generation.clone()
        },
        cfg.seed,
        &p.lex,
    );
    let without = generate_questions(
        &scenes,
        &GenConfig {
            visual_pointer: false,
            ..cfg.generation.clone()
        },
        cfg.seed,
        &p.lex,
    );
    let store: SceneStore = scenes.into_iter().collect();
    let cfg_with = FrameworkConfig::fine(BASELINE, p.baseline.clone());
    let cfg_without = FrameworkConfig {
        visual_pointer: false,
        ..cfg_with.clone()
    };
    let traces_with = run_programs(&cfg_with, &with, &store);
    let traces_without = run_programs(&cfg_without, &without, &store);
    let subset: Vec<usize> = traces_with
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            t.steps.iter().any(|s| match &s.receiver {
                crate::dsl::Value::Patch(patch) => patch.origin_label().is_some() && patch.is_ambiguous(),
                _ => false,
            })
        })
        .map(|(i, _)| i)
        .collect();
    let acc = |qs: &[QAPair], ts: &[ExecutionTrace], idx: &[usize]| {
        if idx.is_empty() {
            return 0.0;
        }
        idx.iter().filter(|&&i| is_correct(&ts[i], &qs[i].ground_truth)).count() as f64 / idx.len() as f64
    };
    let all: Vec<usize> = (0..with.len()).collect();
    Ok(PointerStudy {
        ambiguity: cfg.pointer_ambiguity,
        questions: with.len(),
        ambiguous_subset: subset.len(),
        subset_acc_with: acc(&with, &traces_with, &subset),
        subset_acc_without: acc(&without, &traces_without, &subset),
        acc_with: acc(&with, &traces_with, &all),
        acc_without: acc(&without, &traces_without, &all),
    })
}

/// Serializes a student and reads it back, as a transplant between
/// frameworks would.
pub fn transplant(student: &TableStudent, lex: Arc<Lexicon>) -> TableStudent {
    let text = serde_json::to_string(&student.to_state()).expect("student state serializes");
    let state: StudentState = serde_json::from_str(&text).expect("student state round-trips");
    TableStudent::from_state(state, lex).expect("own format and version")
}

pub fn grounding_items(scenes: &SceneStore, scene_ids: &[String], seed: u64, lex: &Lexicon) -> Vec<GroundingItem> {
    scene_ids
        .iter()
        .filter_map(|id| scenes.get(id))
        .filter_map(|s| generate_grounding(s, seed, lex))
        .collect()
}

pub fn run_recipe(cfg: &RecipeConfig) -> Result<RecipeReport, RecipeError> {
    let p = prepare(cfg)?;
    let ctx = EvalContext::new(&p.scenes, p.lex.clone());
    let test = &p.splits.test.items;

    let (students, training) = distill_on(&p, &p.profile, &p.triples, &cfg.distill)?;
    let sq_student = students
        .get(&ModuleKind::SimpleQuery)
        .map(|s| transplant(s, p.lex.clone()));
    let distilled = student_registry(&p.baseline, students);

    let teacher: Arc<dyn Backend> = Arc::new(OracleBackend::new(p.lex.clone()));
    let plain_gen = GenConfig {
        visual_pointer: false,
        ..cfg.generation.clone()
    };
    let test_ids: BTreeSet<&str> = test.iter().map(|q| q.question_id.as_str()).collect();
    let test_scene_ids: BTreeSet<&str> = test.iter().map(|q| q.scene_id.as_str()).collect();
    let plain_scenes: Vec<SceneGraph> = test_scene_ids
        .iter()
        .filter_map(|id| p.scenes.get(id))
        .map(|s| s.as_ref().clone())
        .collect();
    let test_plain: Vec<QAPair> = generate_questions(&plain_scenes, &plain_gen, cfg.seed, &p.lex)
        .into_iter()
        .filter(|q| test_ids.contains(q.question_id.as_str()))
        .collect();

    let mut plain_cfg = FrameworkConfig::fine(BASELINE_PLAIN, p.baseline.clone());
    plain_cfg.visual_pointer = false;
    let main = vec![
        evaluate(&plain_cfg, &test_plain, &ctx),
        evaluate(&FrameworkConfig::fine(BASELINE, p.baseline.clone()), test, &ctx),
        evaluate(&FrameworkConfig::fine(DISTILLED, distilled.clone()), test, &ctx),
        evaluate(
            &FrameworkConfig::fine(
                TEACHER_REPLACEMENT,
                teacher_replacement_registry(p.detector.clone(), teacher.clone()),
            ),
            test,
            &ctx,
        ),
        evaluate(
            &FrameworkConfig::fine(ALL_ORACLE, oracle_registry(p.lex.clone())),
            test,
            &ctx,
        ),
    ];

    let pointer = pointer_study(cfg, &p)?;
    let distilled_count = ablate_distilled_count(&p.baseline, &distilled, test, &ctx);

    let mut trainset_size = Vec::new();
    for subset in nested_subsets(&p.splits.train.items, &cfg.trainset_ratios, cfg.seed) {
        let ids: BTreeSet<&str> = subset.iter().map(|q| q.question_id.as_str()).collect();
        let triples: Vec<Triple> = p
            .triples
            .iter()
            .filter(|t| ids.contains(t.source_qid.as_str()))
            .cloned()
            .collect();
        let (students, report) = distill_on(&p, &p.profile, &triples, &cfg.distill)?;
        let reg = student_registry(&p.baseline, students);
        let r = evaluate(&FrameworkConfig::fine(DISTILLED, reg), test, &ctx);
        trainset_size.push(SizePoint {
            questions: subset.len(),
            triples: triples.len(),
            learned_keys: report.keys_above_tau.values().sum(),
            acc_all: r.acc_all,
            acc_no_nan: r.acc_no_nan,
        });
    }

    let cross = match sq_student {
        Some(s) => cross_framework(&p.baseline, Arc::new(s), test, &ctx),
        None => {
            return Err(RecipeError::Config(
                "simple_query must be distilled for the transplant".into(),
            ));
        }
    };

    let mut swaps = Vec::new();
    for &rho in &cfg.simple_query_rhos {
        let profile = CorruptionProfile::new(cfg.seed, rho, &p.lex);
        let base = p
            .baseline
            .replace_backend(
                ModuleKind::SimpleQuery,
                Arc::new(CorruptedBackend::new(profile.clone(), p.lex.clone())),
            )
            .expect("replaceable");
        let only_sq = DistillConfig {
            modules: vec![ModuleKind::SimpleQuery],
            ..cfg.distill.clone()
        };
        let (students, _) = distill_on(&p, &profile, &p.triples, &only_sq)?;
        let label = format!("simple_query_rho_{rho}");
        swaps.push(StudentSwap {
            rho,
            baseline: evaluate(
                &FrameworkConfig::fine(&format!("{label}_baseline"), base.clone()),
                test,
                &ctx,
            ),
            distilled: evaluate(
                &FrameworkConfig::fine(&format!("{label}_distilled"), student_registry(&base, students)),
                test,
                &ctx,
            ),
        });
    }

    let items = grounding_items(&p.scenes, &p.eval_scene_ids, cfg.seed, &p.lex);
    let grounding = GroundingComparison {
        baseline: grounding_eval(BASELINE, &p.baseline, &items, &p.scenes),
        distilled: grounding_eval(DISTILLED, &distilled, &items, &p.scenes),
    };

    let before = FrameworkConfig::fine(BASELINE, p.baseline.clone());
    let after = FrameworkConfig::fine(DISTILLED, distilled.clone());
    let b_traces = run_programs(&before, test, &p.scenes);
    let a_traces = run_programs(&after, test, &p.scenes);
    let cases = test
        .iter()
        .zip(b_traces.iter().zip(&a_traces))
        .filter(|(qa, (b, a))| {
            !is_correct(b, &qa.ground_truth) && is_correct(a, &qa.ground_truth) && !a.branches.is_empty()
        })
        .take(cfg.case_reports)
        .map(|(qa, _)| case_report(qa, &before, &after, &p.scenes))
        .collect();

    Ok(RecipeReport {
        seed: cfg.seed,
        splits: [
            ("train", &p.splits.train),
            ("val", &p.splits.val),
            ("test", &p.splits.test),
        ]
        .into_iter()
        .map(|(n, b)| (n.to_string(), stats(&b.items)))
        .collect(),
        phase_counts: [
            ("train", &p.splits.train),
            ("val", &p.splits.val),
            ("test", &p.splits.test),
        ]
        .into_iter()
        .map(|(n, b)| (n.to_string(), (b.phase_one, b.phase_two)))
        .collect(),
        triples: triple_stats(&p.triples),
        harvest_skipped: p.harvest_skipped,
        training,
        main,
        pointer,
        distilled_count,
        trainset_size,
        cross_framework: cross,
        simple_query_swaps: swaps,
        grounding,
        cases,
    })
}
