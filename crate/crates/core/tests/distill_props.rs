//! Distillation properties: learnability on a toy vocabulary against a
//! brute-force counter, coverage and loss monotonicity on harvested data.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vpdistill::distill::Students;
use vpdistill::quesgen::{generate_qa, GenConfig};
use vpdistill::registry::Backend;
use vpdistill::scene::{full_image, generate_many, AttributeFamily, NounCategory, ObjectId, SceneObject};
use vpdistill::{
    execute, harvest, parse, train, CorruptedBackend, CorruptionProfile, Detector, DistillConfig, Lexicon, ModuleKind,
    ModuleRegistry, OracleBackend, Rect, SceneGraph, SceneStore, StudentKey, SubTaskInput, TableStudent, Triple,
    WorldConfig,
};

const TAU: f64 = 3.0;

fn toy_config() -> WorldConfig {
    WorldConfig {
        categories: vec![NounCategory {
            category: "fruit".into(),
            nouns: vec!["apple".into(), "pear".into()],
        }],
        attributes: vec![
            AttributeFamily {
                family: "color".into(),
                values: vec!["red".into(), "green".into()],
                coverage: 1.0,
            },
            AttributeFamily {
                family: "size".into(),
                values: vec!["small".into(), "large".into()],
                coverage: 1.0,
            },
        ],
        ..WorldConfig::default()
    }
}

struct Toy {
    lex: Arc<Lexicon>,
    store: SceneStore,
    profile: CorruptionProfile,
    /// (scene, object name, attribute) per key.
    inputs: Vec<(SceneGraph, String, String)>,
}

/// Eight one-object scenes, four verify questions each: 32 candidate keys.
/// Every key is corrupted through a full swap of each vocabulary pair.
fn toy() -> Toy {
    let cfg = toy_config();
    let lex = Arc::new(Lexicon::new(&cfg));
    let mut inputs = Vec::new();
    let mut store = SceneStore::new();
    for noun in ["apple", "pear"] {
        for color in ["red", "green"] {
            for size in ["small", "large"] {
                let scene = SceneGraph {
                    scene_id: format!("toy-{noun}-{color}-{size}"),
                    canvas: (200, 200),
                    objects: vec![SceneObject {
                        id: ObjectId(0),
                        name: noun.into(),
                        attributes: [color.to_string(), size.to_string()].into(),
                        bbox: Rect::new(20, 20, 100, 100),
                        relations: vec![],
                    }],
                    seed: 0,
                };
                store.insert(scene.clone());
                for attr in ["red", "green", "small", "large"] {
                    inputs.push((scene.clone(), noun.to_string(), attr.to_string()));
                }
            }
        }
    }
    let swap: BTreeMap<String, String> = [
        ("red", "green"),
        ("green", "red"),
        ("small", "large"),
        ("large", "small"),
        ("apple", "pear"),
        ("pear", "apple"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    let profile = CorruptionProfile::from_permutation(7, 1.0, swap).unwrap();
    Toy {
        lex,
        store,
        profile,
        inputs,
    }
}

fn verify_input(scene: &SceneGraph, noun: &str, attr: &str) -> SubTaskInput {
    SubTaskInput::VerifyProperty {
        patch: full_image(scene),
        center_word: None,
        object_name: noun.into(),
        attribute: attr.into(),
    }
}

fn question(noun: &str, attr: &str) -> String {
    format!("Is this {noun} {attr}?")
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn table_student_learns_every_key_seen_tau_times(
        counts in proptest::collection::vec(0usize..7, 20),
        pick_seed in any::<u64>(),
        shuffle_seed in any::<u64>(),
        epochs in 1usize..5,
    ) {
        let t = toy();
        let teacher = OracleBackend::new(t.lex.clone());
        let base = CorruptedBackend::new(t.profile.clone(), t.lex.clone());
        let mut chosen = t.inputs.clone();
        chosen.shuffle(&mut ChaCha8Rng::seed_from_u64(pick_seed));
        chosen.truncate(20);

        let probe = TableStudent::new(ModuleKind::VerifyProperty, base.clone());
        let keys: BTreeSet<StudentKey> = chosen
            .iter()
            .map(|(s, n, a)| probe.key_for(s, &full_image(s), &question(n, a)).0)
            .collect();
        prop_assert_eq!(keys.len(), 20);

        let mut triples = Vec::new();
        for ((scene, noun, attr), &n) in chosen.iter().zip(&counts) {
            let label = teacher.answer(scene, &full_image(scene), &question(noun, attr));
            for _ in 0..n {
                triples.push(Triple {
                    scene_id: scene.scene_id.clone(),
                    region: scene.canvas_rect(),
                    sub_question: question(noun, attr),
                    pseudo_label: label.clone(),
                    module_kind: ModuleKind::VerifyProperty,
                    source_qid: format!("q{}", triples.len()),
                    question_type: "verify_attr".into(),
                    step_index: 0,
                });
            }
        }
        triples.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

        // Independent count of how often each (scene, question) was observed.
        let mut observed: BTreeMap<(String, String), usize> = BTreeMap::new();
        for tr in &triples {
            *observed.entry((tr.scene_id.clone(), tr.sub_question.clone())).or_default() += 1;
        }

        let students: Students = [(ModuleKind::VerifyProperty, TableStudent::new(ModuleKind::VerifyProperty, base.clone()))].into();
        let cfg = DistillConfig {
            epochs,
            shuffle_seed,
            modules: vec![ModuleKind::VerifyProperty],
            tau: Some(TAU),
            alpha: Some(1.0),
        };
        let (students, report) = train(students, &triples, &t.store, &cfg).unwrap();
        let student = &students[&ModuleKind::VerifyProperty];

        let seen = observed.len();
        let learned = observed.values().filter(|&&c| c as f64 >= TAU).count();
        prop_assert_eq!(student.len(), seen);
        prop_assert_eq!(student.learned_keys(), learned);
        prop_assert_eq!(report.keys_above_tau[&ModuleKind::VerifyProperty], learned);

        for (scene, noun, attr) in &chosen {
            let input = verify_input(scene, noun, attr);
            let want_teacher = teacher.predict(scene, &input).unwrap().output;
            let from_base = base.predict(scene, &input).unwrap();
            prop_assert_ne!(&from_base.output, &want_teacher, "toy key not corrupted");
            let got = student.predict(scene, &input).unwrap();
            let n = observed.get(&(scene.scene_id.clone(), question(noun, attr))).copied().unwrap_or(0);
            if n as f64 >= TAU {
                prop_assert_eq!(&got.output, &want_teacher);
            } else {
                prop_assert_eq!(&got, &from_base);
            }
        }
    }
}

struct Harvested {
    store: SceneStore,
    triples: Vec<Triple>,
    lex: Arc<Lexicon>,
    profile: CorruptionProfile,
}

fn harvested(scenes: usize) -> Harvested {
    let cfg = WorldConfig::default();
    let lex = Arc::new(Lexicon::new(&cfg));
    let profile = CorruptionProfile::new(0, 0.3, &lex);
    let registry = ModuleRegistry::uniform(
        Arc::new(Detector::new(0.05, 0, lex.clone())),
        Arc::new(CorruptedBackend::new(profile.clone(), lex.clone())),
    );
    let worlds = generate_many(500, scenes, &cfg).unwrap();
    let mut traces = Vec::new();
    for scene in &worlds {
        for qa in generate_qa(scene, &GenConfig::default(), 0, &lex) {
            let t = execute(&parse(&qa.program).unwrap(), scene, &registry);
            traces.push(t.with_ids(&qa.question_id, qa.question_type.as_str()));
        }
    }
    let store: SceneStore = worlds.into_iter().collect();
    let h = harvest(&traces, &store, &OracleBackend::new(lex.clone()), &lex);
    assert_eq!(h.skipped, 0, "{:?}", h.warnings.first());
    Harvested {
        store,
        triples: h.triples,
        lex,
        profile,
    }
}

fn fresh_students(h: &Harvested) -> Students {
    ModuleKind::DISTILLABLE
        .into_iter()
        .map(|k| {
            (
                k,
                TableStudent::new(k, CorruptedBackend::new(h.profile.clone(), h.lex.clone())),
            )
        })
        .collect()
}

fn learned_set(students: &Students) -> BTreeSet<StudentKey> {
    students
        .values()
        .flat_map(|s| s.keys().filter(|k| s.is_learned(k)).cloned().collect::<Vec<_>>())
        .collect()
}

#[test]
fn learned_keys_grow_with_training_data() {
    let h = harvested(250);
    let mut triples = h.triples.clone();
    triples.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let mut previous: Option<BTreeSet<StudentKey>> = None;
    for frac in [0.2, 0.5, 0.8, 1.0] {
        let n = (triples.len() as f64 * frac) as usize;
        let (students, _) = train(fresh_students(&h), &triples[..n], &h.store, &DistillConfig::default()).unwrap();
        let learned = learned_set(&students);
        if let Some(prev) = &previous {
            assert!(prev.is_subset(&learned), "coverage shrank at {frac}");
            assert!(learned.len() >= prev.len());
        }
        previous = Some(learned);
    }
    assert!(!previous.unwrap().is_empty());
}

#[test]
fn epoch_loss_never_increases() {
    let h = harvested(150);
    let cfg = DistillConfig {
        epochs: 6,
        shuffle_seed: 9,
        ..DistillConfig::default()
    };
    let (_, report) = train(fresh_students(&h), &h.triples, &h.store, &cfg).unwrap();
    assert_eq!(report.epoch_losses.len(), 6);
    let mut series: Vec<&Vec<f64>> = report.per_kind_epoch_losses.values().collect();
    series.push(&report.epoch_losses);
    for s in series {
        for w in s.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose: {s:?}");
        }
        assert!(s.last() < s.first(), "loss flat: {s:?}");
    }
}

#[test]
fn epochs_do_not_change_what_is_learned() {
    let h = harvested(120);
    let one = train(fresh_students(&h), &h.triples, &h.store, &DistillConfig::default())
        .unwrap()
        .0;
    let cfg = DistillConfig {
        epochs: 3,
        ..DistillConfig::default()
    };
    let three = train(fresh_students(&h), &h.triples, &h.store, &cfg).unwrap().0;
    assert_eq!(learned_set(&one), learned_set(&three));
}

#[test]
fn learned_consistent_keys_follow_the_teacher() {
    let h = harvested(250);
    let (students, _) = train(fresh_students(&h), &h.triples, &h.store, &DistillConfig::default()).unwrap();
    let mut labels: BTreeMap<StudentKey, (BTreeSet<String>, usize)> = BTreeMap::new();
    for t in &h.triples {
        let scene = h.store.get(&t.scene_id).unwrap();
        let patch = vpdistill::crop(scene, t.region, None);
        let (key, _) = students[&t.module_kind].key_for(scene, &patch, &t.sub_question);
        let e = labels.entry(key).or_default();
        e.0.insert(t.pseudo_label.clone());
        e.1 += 1;
    }
    let mut checked = 0;
    for (key, (set, n)) in &labels {
        if set.len() == 1 && *n as f64 >= TAU {
            let s = &students[&key.module];
            assert!(s.is_learned(key));
            assert_eq!(s.argmax(key), set.iter().next().map(String::as_str));
            checked += 1;
        }
    }
    assert!(checked > 20, "{checked} keys checked");
}
