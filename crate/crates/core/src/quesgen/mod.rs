//! Template question generation over scene worlds, fault injection, and the
//! client for an external program-generation service.

mod service;
mod templates;

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{parse, quote};
use crate::lexicon::Lexicon;
use crate::scene::{Rect, SceneGraph};
use crate::util::{keyed_uniform, stable_hash};

pub use service::{
    llm_generate, prompt_for, PromptProfile, ServiceConfig, ServiceError, ServiceRequest, ServiceResponse, StubService,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    AttrQuery,
    MaterialQuery,
    VerifyAttr,
    ChooseAttr,
    ChooseName,
    NameQuery,
    Exists,
    BothExist,
    TwoHop,
    AndVerify,
    OrVerify,
    SameColor,
    ExistAttr,
}

impl QuestionType {
    pub const ALL: [QuestionType; 13] = [
        QuestionType::AttrQuery,
        QuestionType::MaterialQuery,
        QuestionType::VerifyAttr,
        QuestionType::ChooseAttr,
        QuestionType::ChooseName,
        QuestionType::NameQuery,
        QuestionType::Exists,
        QuestionType::BothExist,
        QuestionType::TwoHop,
        QuestionType::AndVerify,
        QuestionType::OrVerify,
        QuestionType::SameColor,
        QuestionType::ExistAttr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::AttrQuery => "attr_query",
            QuestionType::MaterialQuery => "material_query",
            QuestionType::VerifyAttr => "verify_attr",
            QuestionType::ChooseAttr => "choose_attr",
            QuestionType::ChooseName => "choose_name",
            QuestionType::NameQuery => "name_query",
            QuestionType::Exists => "exists",
            QuestionType::BothExist => "both_exist",
            QuestionType::TwoHop => "two_hop",
            QuestionType::AndVerify => "and_verify",
            QuestionType::OrVerify => "or_verify",
            QuestionType::SameColor => "same_color",
            QuestionType::ExistAttr => "exist_attr",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for QuestionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown question type `{s}`"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid generation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub templates: Vec<QuestionType>,
    pub questions_per_scene: (usize, usize),
    pub fault_rate: f64,
    pub visual_pointer: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            templates: QuestionType::ALL.to_vec(),
            questions_per_scene: (8, 12),
            fault_rate: 0.0,
            visual_pointer: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.templates.is_empty() {
            return Err(GenError::Config("no templates enabled".into()));
        }
        if !(0.0..=1.0).contains(&self.fault_rate) {
            return Err(GenError::Config("fault_rate must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.questions_per_scene;
        if lo > hi {
            return Err(GenError::Config("questions_per_scene must satisfy min <= max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question_id: String,
    pub scene_id: String,
    pub question: String,
    pub ground_truth: String,
    pub question_type: QuestionType,
    /// Fine-grained program using every module kind.
    pub program: String,
    /// The same question decomposed into find and simple_query calls only.
    pub coarse_program: String,
    pub fault_injected: bool,
}

const ATTEMPTS_PER_QUESTION: usize = 6;

fn scene_rng(seed: u64, scene_id: &str, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash([
        &seed.to_le_bytes()[..],
        scene_id.as_bytes(),
        stream.as_bytes(),
    ]))
}

/// Generates questions for one scene. Deterministic in `(scene, config,
/// seed)`; templates the scene cannot support are skipped.
pub fn generate_qa(scene: &SceneGraph, config: &GenConfig, seed: u64, lex: &Lexicon) -> Vec<QAPair> {
    let mut rng = scene_rng(seed, &scene.scene_id, "qa");
    let cx = templates::Ctx {
        scene,
        lex,
        pointer: config.visual_pointer,
    };
    let (lo, hi) = config.questions_per_scene;
    let count = rng.gen_range(lo..=hi);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        for _ in 0..ATTEMPTS_PER_QUESTION {
            let Some(&kind) = config.templates.choose(&mut rng) else {
                break;
            };
            let Some(built) = templates::build(kind, &cx, &mut rng) else {
                continue;
            };
            let question_id = format!("{}-q{i:02}", scene.scene_id);
            let fault = config.fault_rate > 0.0 && keyed_uniform(seed, &[&question_id, "fault"]) < config.fault_rate;
            let (program, coarse_program) = if fault {
                (
                    inject_fault(&built.fine, seed, &question_id),
                    inject_fault(&built.coarse, seed ^ 1, &question_id),
                )
            } else {
                (built.fine, built.coarse)
            };
            out.push(QAPair {
                question_id,
                scene_id: scene.scene_id.clone(),
                question: built.question,
                ground_truth: built.answer,
                question_type: kind,
                program,
                coarse_program,
                fault_injected: fault,
            });
            break;
        }
    }
    out
}

/// Byte ranges of the lexemes of a program, whitespace excluded.
fn lexeme_spans(src: &str) -> Vec<(usize, usize)> {
    let bytes = src.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'"' | b'\'' => {
                i += 1;
                while i < bytes.len() && bytes[i] != c {
                    i += if bytes[i] == b'\\' { 2 } else { 1 };
                }
                i = (i + 1).min(bytes.len());
            }
            b'=' | b'!' if bytes.get(i + 1) == Some(&b'=') => i += 2,
            c if c.is_ascii_alphanumeric() || c == b'_' || c >= 0x80 => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] >= 0x80) {
                    i += 1;
                }
            }
            _ => i += 1,
        }
        spans.push((start, i));
    }
    spans
}

/// Deletes one lexeme so that the program no longer parses. Starting from a
/// seeded position, tries each lexeme in turn until the deletion breaks the
/// parse; a program with no such lexeme loses its whole text.
pub fn inject_fault(program: &str, seed: u64, question_id: &str) -> String {
    let spans = lexeme_spans(program);
    if spans.is_empty() {
        return String::new();
    }
    let start = (keyed_uniform(seed, &[question_id, "token"]) * spans.len() as f64) as usize;
    for k in 0..spans.len() {
        let (a, b) = spans[(start + k) % spans.len()];
        let mut broken = String::with_capacity(program.len());
        broken.push_str(&program[..a]);
        broken.push_str(&program[b..]);
        if parse(&broken).is_err() {
            return broken;
        }
    }
    String::new()
}

/// A referring expression with its ground-truth box and grounding program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingItem {
    pub item_id: String,
    pub scene_id: String,
    pub expression: String,
    pub target_bbox: Rect,
    pub program: String,
}

/// Builds at most one referring expression per scene: a noun with exactly
/// two instances that differ in some attribute.
pub fn generate_grounding(scene: &SceneGraph, seed: u64, lex: &Lexicon) -> Option<GroundingItem> {
    let mut rng = scene_rng(seed, &scene.scene_id, "grounding");
    let mut pairs = Vec::new();
    for n in lex.nouns() {
        let same: Vec<_> = scene.objects.iter().filter(|o| &o.name == n).collect();
        if let [a, b] = same[..] {
            pairs.push((a, b));
        }
    }
    let &(a, b) = pairs.choose(&mut rng)?;
    let (target, other) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
    let mut distinct: Vec<&String> = target
        .attributes
        .iter()
        .filter(|v| !other.attributes.contains(*v) && lex.is_attribute(v))
        .collect();
    distinct.sort();
    let attr = distinct.choose(&mut rng)?;
    let n = &target.name;
    Some(GroundingItem {
        item_id: format!("{}-g", scene.scene_id),
        scene_id: scene.scene_id.clone(),
        expression: format!("the {attr} {n}"),
        target_bbox: target.bbox,
        program: format!(
            "objs = image.find({})\nif objs[0].verify_property({}, {}):\n    return objs[0]\nelse:\n    return objs[1]\n",
            quote(n),
            quote(n),
            quote(attr)
        ),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::sync::Arc;

    use super::*;
    use crate::dsl::{execute, run_with_fallback, TraceStatus};
    use crate::registry::{Detector, ModuleKind, ModuleRegistry, OracleBackend};
    use crate::scene::{generate_world, ObjectId, SceneObject, WorldConfig};

    fn setup() -> (WorldConfig, Arc<Lexicon>, ModuleRegistry) {
        let cfg = WorldConfig::default();
        let lex = Arc::new(Lexicon::new(&cfg));
        let reg = ModuleRegistry::uniform(
            Arc::new(Detector::new(0.0, 0, lex.clone())),
            Arc::new(OracleBackend::new(lex.clone())),
        );
        (cfg, lex, reg)
    }

    fn red_flower_scene() -> SceneGraph {
        SceneGraph {
            scene_id: "scene-flower".into(),
            canvas: (640, 480),
            objects: vec![SceneObject {
                id: ObjectId(0),
                name: "flower".into(),
                attributes: ["red".to_string(), "small".to_string()].into(),
                bbox: Rect::new(100, 100, 80, 80),
                relations: vec![],
            }],
            seed: 0,
        }
    }

    #[test]
    fn attr_query_pointer_and_plain() {
        let (_, lex, reg) = setup();
        let s = red_flower_scene();
        let mut cfg = GenConfig {
            templates: vec![QuestionType::AttrQuery],
            questions_per_scene: (1, 1),
            ..GenConfig::default()
        };
        // size is the other family on this object; find a seed asking color
        let seed = (0..100)
            .find(|&sd| generate_qa(&s, &cfg, sd, &lex)[0].ground_truth == "red")
            .unwrap();
        let qa = &generate_qa(&s, &cfg, seed, &lex)[0];
        assert_eq!(qa.question, "What color is the flower?");
        assert!(qa.program.contains("simple_query(\"What color is this flower?\")"));
        let prog = parse(&qa.program).unwrap();
        assert_eq!(prog.calls(), vec![ModuleKind::Find, ModuleKind::SimpleQuery]);
        assert_eq!(execute(&prog, &s, &reg).answer.answer_text().unwrap(), "red");

        cfg.visual_pointer = false;
        let plain = &generate_qa(&s, &cfg, seed, &lex)[0];
        assert_eq!(plain.question, qa.question);
        assert!(plain.program.contains("simple_query(\"What color is this?\")"));
    }

    #[test]
    fn pointer_flag_does_not_change_questions() {
        let (wc, lex, _) = setup();
        let s = generate_world(5, &wc).unwrap();
        let on = generate_qa(&s, &GenConfig::default(), 9, &lex);
        let off = generate_qa(
            &s,
            &GenConfig {
                visual_pointer: false,
                ..GenConfig::default()
            },
            9,
            &lex,
        );
        let strip = |v: &[QAPair]| {
            v.iter()
                .map(|q| (q.question.clone(), q.ground_truth.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&on), strip(&off));
    }

    #[test]
    fn self_consistent_on_generated_worlds() {
        let (wc, lex, reg) = setup();
        let mut seen = BTreeSet::new();
        for seed in 0..150 {
            let s = generate_world(seed, &wc).unwrap();
            for qa in generate_qa(&s, &GenConfig::default(), seed, &lex) {
                seen.insert(qa.question_type);
                for src in [&qa.program, &qa.coarse_program] {
                    let t = run_with_fallback(src, &qa.question, &s, &reg);
                    assert_eq!(t.status, TraceStatus::Ok, "{}: {src}", qa.question_id);
                    assert_eq!(
                        t.answer.answer_text().unwrap(),
                        qa.ground_truth,
                        "{}\n{src}",
                        qa.question
                    );
                }
                let coarse = parse(&qa.coarse_program).unwrap();
                assert!(coarse
                    .calls()
                    .iter()
                    .all(|k| matches!(k, ModuleKind::Find | ModuleKind::SimpleQuery)));
            }
        }
        assert_eq!(seen.len(), QuestionType::ALL.len());
    }

    #[test]
    fn full_fault_rate_breaks_every_program() {
        let (wc, lex, _) = setup();
        let cfg = GenConfig {
            fault_rate: 1.0,
            ..GenConfig::default()
        };
        for seed in 0..30 {
            let s = generate_world(seed, &wc).unwrap();
            for qa in generate_qa(&s, &cfg, seed, &lex) {
                assert!(qa.fault_injected);
                assert!(parse(&qa.program).is_err(), "{}", qa.program);
                assert!(parse(&qa.coarse_program).is_err());
            }
        }
    }

    #[test]
    fn grounding_programs_hit_target_with_oracle() {
        let (wc, lex, reg) = setup();
        let mut n = 0;
        for seed in 0..200 {
            let s = generate_world(seed, &wc).unwrap();
            if let Some(item) = generate_grounding(&s, seed, &lex) {
                let t = execute(&parse(&item.program).unwrap(), &s, &reg);
                if let crate::dsl::Value::Patch(p) = &t.answer {
                    if p.is_ambiguous() {
                        continue;
                    }
                    n += 1;
                    assert_eq!(p.region(), item.target_bbox, "{}", item.expression);
                }
            }
        }
        assert!(n > 10);
    }
}
