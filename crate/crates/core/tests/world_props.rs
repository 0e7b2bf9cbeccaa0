//! Scene world, oracle, detector and adapter properties, checked against
//! brute-force scans written independently of the library.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;

use vpdistill::query::{StructuredQuery, NO, UNKNOWN, YES};
use vpdistill::quesgen::{generate_qa, GenConfig, QuestionType};
use vpdistill::registry::ModuleOutput;
use vpdistill::scene::{generate_many, SceneObject};
use vpdistill::{
    adapt_step, crop, execute, generate_world, oracle_answer, parse, CorruptedBackend, CorruptionProfile, Detector,
    Lexicon, ModuleRegistry, OracleBackend, Rect, SceneGraph, SubTaskInput, TraceStatus, WorldConfig,
};

fn lex() -> Arc<Lexicon> {
    Arc::new(Lexicon::new(&WorldConfig::default()))
}

/// Visible iff at least half of the object's own box lies inside the region
/// (clipped to the canvas).
fn brute_visible(scene: &SceneGraph, region: Rect) -> Vec<&SceneObject> {
    let (cw, ch) = (scene.canvas.0 as i64, scene.canvas.1 as i64);
    let (rx0, ry0) = (i64::from(region.x).max(0), i64::from(region.y).max(0));
    let (rx1, ry1) = (
        (i64::from(region.x) + i64::from(region.w)).min(cw),
        (i64::from(region.y) + i64::from(region.h)).min(ch),
    );
    let mut out: Vec<&SceneObject> = scene
        .objects
        .iter()
        .filter(|o| {
            let b = o.bbox;
            let ix = (rx1.min(i64::from(b.x + b.w)) - rx0.max(i64::from(b.x))).max(0);
            let iy = (ry1.min(i64::from(b.y + b.h)) - ry0.max(i64::from(b.y))).max(0);
            let area = i64::from(b.w) * i64::from(b.h);
            ix * iy > 0 && 2 * ix * iy >= area
        })
        .collect();
    out.sort_by_key(|o| o.id);
    out
}

fn scenes(n: u64) -> Vec<SceneGraph> {
    (0..n)
        .map(|s| generate_world(s, &WorldConfig::default()).unwrap())
        .collect()
}

#[test]
fn worlds_are_pure_functions_of_seed() {
    let cfg = WorldConfig::default();
    let many = generate_many(0, 64, &cfg).unwrap();
    for (seed, s) in many.iter().enumerate() {
        let again = generate_world(seed as u64, &cfg).unwrap();
        assert_eq!(&again, s);
        let text = serde_json::to_string(s).unwrap();
        assert_eq!(&serde_json::from_str::<SceneGraph>(&text).unwrap(), s);
        s.validate().unwrap();
        let (lo, hi) = cfg.objects_per_scene;
        assert!((lo..=hi).contains(&s.objects.len()));
        assert!(s.objects.iter().all(|o| s.canvas_rect().contains(&o.bbox)));
    }
    assert_ne!(many[0].objects, many[1].objects);
    let distinct: BTreeSet<String> = many
        .iter()
        .map(|s| serde_json::to_string(&s.objects).unwrap())
        .collect();
    assert_eq!(distinct.len(), many.len());
}

#[test]
fn config_changes_change_worlds() {
    let cfg = WorldConfig {
        ambiguity_rate: 0.9,
        ..WorldConfig::default()
    };
    let dense = generate_world(0, &cfg).unwrap();
    assert_ne!(dense, generate_world(0, &WorldConfig::default()).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 400, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn crop_matches_brute_force_and_is_idempotent(
        seed in 0u64..500,
        x in -100i32..700, y in -100i32..560, w in 0i32..500, h in 0i32..400,
    ) {
        let scene = generate_world(seed, &WorldConfig::default()).unwrap();
        let region = Rect::new(x, y, w, h);
        let p = crop(&scene, region, None);
        let want: Vec<_> = brute_visible(&scene, region).iter().map(|o| o.id).collect();
        prop_assert_eq!(p.visible_objects(), &want[..]);
        let again = crop(&scene, p.region(), Some("x"));
        prop_assert_eq!(again.visible_objects(), p.visible_objects());
        prop_assert_eq!(again.region(), p.region());
        prop_assert!(scene.canvas_rect().contains(&p.region()) || p.region().is_empty());
    }

    #[test]
    fn detector_respects_overlap_rule(seed in 0u64..500, x in 0i32..640, y in 0i32..480, w in 1i32..640, h in 1i32..480, rho in 0.0f64..1.0) {
        let lex = lex();
        let scene = generate_world(seed, &WorldConfig::default()).unwrap();
        let region = Rect::new(x, y, w, h);
        let patch = crop(&scene, region, None);
        let visible = brute_visible(&scene, region);
        let corrupted = CorruptedBackend::new(CorruptionProfile::new(seed, rho, &lex), lex.clone());
        let exact = ModuleRegistry::uniform(Arc::new(Detector::new(0.0, seed, lex.clone())), Arc::new(corrupted.clone()));
        let lossy = ModuleRegistry::uniform(Arc::new(Detector::new(0.3, seed, lex.clone())), Arc::new(corrupted));
        for noun in lex.nouns() {
            let input = SubTaskInput::Find { patch: patch.clone(), name: noun.clone() };
            let want: Vec<Rect> = visible.iter().filter(|o| &o.name == noun).map(|o| o.bbox).collect();
            for (reg, complete) in [(&exact, true), (&lossy, false)] {
                let ModuleOutput::Patches(found) = reg.dispatch(&scene, &input).unwrap().output else {
                    panic!("find returned a non-patch output");
                };
                for f in &found {
                    prop_assert!(want.contains(&f.region()), "{} not a visible {}", f.region(), noun);
                    prop_assert_eq!(f.origin_label(), Some(noun.as_str()));
                }
                let regions: BTreeSet<Rect> = found.iter().map(|f| f.region()).collect();
                prop_assert_eq!(regions.len(), found.len());
                if complete {
                    prop_assert_eq!(found.len(), want.len());
                }
            }
        }
    }
}

#[test]
fn oracle_agrees_with_brute_force_on_unique_targets() {
    let cfg = WorldConfig::default();
    let lex = lex();
    let families: BTreeMap<&str, Vec<&str>> = cfg
        .attributes
        .iter()
        .map(|f| (f.family.as_str(), f.values.iter().map(String::as_str).collect()))
        .collect();
    let mut checked = 0usize;
    for scene in scenes(300) {
        let mut regions = vec![scene.canvas_rect()];
        regions.extend(scene.objects.iter().map(|o| o.bbox));
        regions.push(Rect::new(0, 0, 320, 240));
        for region in regions {
            let patch = crop(&scene, region, None);
            let visible = brute_visible(&scene, region);
            for noun in lex.nouns() {
                let hits: Vec<&&SceneObject> = visible.iter().filter(|o| &o.name == noun).collect();
                let exists = oracle_answer(&scene, &patch, &StructuredQuery::Exists { name: noun.clone() }, &lex);
                assert_eq!(exists, if hits.is_empty() { NO } else { YES });
                let [target] = hits[..] else { continue };
                let center = Some(noun.clone());
                for attr in cfg.attribute_values() {
                    let q = StructuredQuery::VerifyAttribute {
                        name: center.clone(),
                        attribute: attr.to_string(),
                    };
                    let want = if target.attributes.contains(attr) { YES } else { NO };
                    assert_eq!(
                        oracle_answer(&scene, &patch, &q, &lex),
                        want,
                        "{q} on {}",
                        scene.scene_id
                    );
                    checked += 1;
                }
                for (family, values) in &families {
                    let q = StructuredQuery::AskAttributeFamily {
                        family: family.to_string(),
                        center: center.clone(),
                    };
                    let held: Vec<&str> = values
                        .iter()
                        .copied()
                        .filter(|v| target.attributes.contains(*v))
                        .collect();
                    let got = oracle_answer(&scene, &patch, &q, &lex);
                    match held.len() {
                        0 => assert_eq!(got, UNKNOWN),
                        _ => assert!(held.contains(&got.as_str()), "{q}: {got} not in {held:?}"),
                    }
                    for &v in values {
                        for &other in values.iter().filter(|o| **o != v) {
                            let q = StructuredQuery::choose([v, other], Some(noun));
                            let got = oracle_answer(&scene, &patch, &q, &lex);
                            if target.attributes.contains(v) && !target.attributes.contains(other) {
                                assert_eq!(got, v, "{q}");
                            }
                        }
                    }
                    checked += 1;
                }
                let q = StructuredQuery::AskName { center: center.clone() };
                assert_eq!(&oracle_answer(&scene, &patch, &q, &lex), noun);
            }
        }
    }
    assert!(checked > 10_000, "only {checked} checks");
}

#[test]
fn same_profile_same_predictions() {
    let lex = lex();
    let a = CorruptedBackend::new(CorruptionProfile::new(11, 0.3, &lex), lex.clone());
    let b = CorruptedBackend::new(CorruptionProfile::new(11, 0.3, &lex), lex.clone());
    let c = CorruptedBackend::new(CorruptionProfile::new(12, 0.3, &lex), lex.clone());
    let reg = |x: &CorruptedBackend| {
        ModuleRegistry::uniform(Arc::new(Detector::new(0.0, 0, lex.clone())), Arc::new(x.clone()))
    };
    let (ra, rb, rc) = (reg(&a), reg(&b), reg(&c));
    let mut differs = 0;
    for scene in scenes(60) {
        for qa in generate_qa(&scene, &GenConfig::default(), 5, &lex) {
            let p = parse(&qa.program).unwrap();
            let ta = execute(&p, &scene, &ra);
            assert_eq!(ta, execute(&p, &scene, &rb));
            assert_eq!(ta, execute(&p, &scene, &ra));
            differs += usize::from(ta.answer != execute(&p, &scene, &rc).answer);
        }
    }
    assert!(differs > 0, "a different corruption seed never changed an answer");
}

#[test]
fn every_question_type_appears() {
    let lex = lex();
    let mut seen = BTreeSet::new();
    for scene in scenes(120) {
        seen.extend(
            generate_qa(&scene, &GenConfig::default(), 0, &lex)
                .iter()
                .map(|q| q.question_type),
        );
    }
    let all: BTreeSet<QuestionType> = QuestionType::ALL.into_iter().collect();
    assert_eq!(seen, all);
}

#[test]
fn oracle_registry_reproduces_ground_truth() {
    let lex = lex();
    let oracle = ModuleRegistry::uniform(
        Arc::new(Detector::new(0.0, 0, lex.clone())),
        Arc::new(OracleBackend::new(lex.clone())),
    );
    let mut n = 0;
    for scene in scenes(400) {
        for qa in generate_qa(&scene, &GenConfig::default(), 1, &lex) {
            for src in [&qa.program, &qa.coarse_program] {
                let t = execute(&parse(src).unwrap(), &scene, &oracle);
                assert_eq!(t.status, TraceStatus::Ok, "{}\n{src}", qa.question);
                assert_eq!(
                    t.answer.answer_text().as_deref(),
                    Some(qa.ground_truth.as_str()),
                    "{}\n{src}",
                    qa.question
                );
                n += 1;
            }
        }
    }
    assert!(n > 5_000);
}

#[test]
fn adapter_is_total_on_generated_traces() {
    let lex = lex();
    let registry = ModuleRegistry::uniform(
        Arc::new(Detector::new(0.05, 0, lex.clone())),
        Arc::new(CorruptedBackend::new(CorruptionProfile::new(0, 0.3, &lex), lex.clone())),
    );
    let (mut traces, mut adapted) = (0usize, 0usize);
    let mut kinds = BTreeSet::new();
    for scene in generate_many(10_000, 1_100, &WorldConfig::default()).unwrap() {
        for qa in generate_qa(&scene, &GenConfig::default(), 2, &lex) {
            for src in [&qa.program, &qa.coarse_program] {
                let t = execute(&parse(src).unwrap(), &scene, &registry);
                traces += 1;
                for step in t.steps.iter().filter(|s| s.module_kind.is_distillable()) {
                    let ti = adapt_step(step, &qa.question_id, &lex)
                        .unwrap_or_else(|e| panic!("{e} on step {step:?} of\n{src}"));
                    let vpdistill::Value::Patch(receiver) = &step.receiver else {
                        panic!("distillable step without a patch receiver");
                    };
                    assert_eq!(ti.sub_image.region(), receiver.region());
                    assert_eq!(ti.sub_image, *receiver);
                    assert_eq!(ti.source.step_index, step.step_index);
                    kinds.insert(step.module_kind);
                    adapted += 1;
                }
            }
        }
    }
    assert!(traces >= 10_000, "{traces} traces");
    assert!(adapted > traces / 2);
    assert_eq!(kinds.len(), 3, "{kinds:?}");
}
