use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::student::{patch_signature, StudentKey};
use super::{
    Backend, BackendDescriptor, BackendError, Distribution, ModuleKind, ModuleOutput, Prediction, SubTaskInput,
};
use crate::adapter::sub_question;
use crate::lexicon::Lexicon;
use crate::query::{answer_with, parse_question, Perception, StructuredQuery, TruePerception, NO, YES};
use crate::scene::{crop, SceneGraph, ScenePatch};
use crate::util::{keyed_uniform, stable_hash};

/// Converts a text answer into the output type of `kind`.
pub(crate) fn label_output(kind: ModuleKind, label: String) -> Result<ModuleOutput, BackendError> {
    match kind {
        ModuleKind::VerifyProperty | ModuleKind::Exists => match label.as_str() {
            YES => Ok(ModuleOutput::Flag(true)),
            NO => Ok(ModuleOutput::Flag(false)),
            _ => Err(BackendError::NotBoolean(label)),
        },
        _ => Ok(ModuleOutput::Text(label)),
    }
}

/// Text of an adapted distillable call plus the patch it is asked about.
pub(crate) fn adapted<'a>(input: &'a SubTaskInput, lex: &Lexicon) -> Result<(String, &'a ScenePatch), BackendError> {
    let text = sub_question(input, lex).map_err(|e| BackendError::Adapter(e.to_string()))?;
    let patch = input
        .patch()
        .ok_or_else(|| BackendError::Adapter("call has no receiver patch".into()))?;
    Ok((text, patch))
}

/// The fixed object detector serving `find` and `exists`.
#[derive(Debug, Clone)]
pub struct Detector {
    miss_rate: f64,
    seed: u64,
    lex: Arc<Lexicon>,
}

impl Detector {
    pub fn new(miss_rate: f64, seed: u64, lex: Arc<Lexicon>) -> Self {
        Self {
            miss_rate: miss_rate.clamp(0.0, 1.0),
            seed,
            lex,
        }
    }

    pub fn miss_rate(&self) -> f64 {
        self.miss_rate
    }

    fn missed(&self, scene_id: &str, id: u32) -> bool {
        self.miss_rate > 0.0 && keyed_uniform(self.seed, &[scene_id, &id.to_string()]) < self.miss_rate
    }

    /// One patch per detected visible object matching `name`, ordered left to
    /// right then top to bottom.
    pub fn find(&self, scene: &SceneGraph, patch: &ScenePatch, name: &str) -> Vec<ScenePatch> {
        let mut hits: Vec<_> = patch
            .view(scene)
            .into_iter()
            .filter(|o| self.lex.matches(&o.name, name) && !self.missed(&scene.scene_id, o.id.0))
            .collect();
        hits.sort_by_key(|o| (o.bbox.x, o.bbox.y, o.id));
        hits.into_iter().map(|o| crop(scene, o.bbox, Some(name))).collect()
    }

    pub fn exists(&self, scene: &SceneGraph, patches: &[ScenePatch], name: &str) -> bool {
        patches.iter().any(|p| !self.find(scene, p, name).is_empty())
    }
}

impl Backend for Detector {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: format!("detector(miss={})", self.miss_rate),
            trainable: false,
        }
    }

    fn predict(&self, scene: &SceneGraph, input: &SubTaskInput) -> Result<Prediction, BackendError> {
        match input {
            SubTaskInput::Find { patch, name } => {
                let found = self.find(scene, patch, name);
                Ok(Prediction {
                    distribution: Distribution::one_hot(&found.len().to_string()),
                    output: ModuleOutput::Patches(found),
                })
            }
            SubTaskInput::Exists { patches, name } => {
                let yes = self.exists(scene, patches, name);
                let label = if yes { YES } else { NO };
                Ok(Prediction {
                    output: ModuleOutput::Flag(yes),
                    distribution: Distribution::one_hot(label),
                })
            }
            _ => Err(BackendError::Unsupported {
                backend: "detector".into(),
                kind: input.kind(),
            }),
        }
    }
}

/// Ground-truth teacher: answers the adapted sub-question exactly from the
/// scene graph restricted to the sub-image.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    lex: Arc<Lexicon>,
}

impl OracleBackend {
    pub fn new(lex: Arc<Lexicon>) -> Self {
        Self { lex }
    }

    pub fn answer(&self, scene: &SceneGraph, patch: &ScenePatch, sub_question: &str) -> String {
        let query = parse_question(sub_question, &self.lex);
        answer_with(&query, &patch.view(scene), &self.lex, &TruePerception)
    }
}

impl Backend for OracleBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: "oracle".into(),
            trainable: false,
        }
    }

    fn predict(&self, scene: &SceneGraph, input: &SubTaskInput) -> Result<Prediction, BackendError> {
        let (text, patch) = adapted(input, &self.lex)?;
        let label = self.answer(scene, patch, &text);
        Ok(Prediction {
            distribution: Distribution::one_hot(&label),
            output: label_output(input.kind(), label)?,
        })
    }
}

/// Seeded label permutation applied to a fixed fraction of student keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionProfile {
    pub seed: u64,
    pub rho: f64,
    pub permutation: BTreeMap<String, String>,
}

impl CorruptionProfile {
    /// Builds a derangement within every noun category and attribute family,
    /// so a corrupted label is always a wrong label of the same kind.
    pub fn new(seed: u64, rho: f64, lex: &Lexicon) -> Self {
        let mut groups: Vec<(String, Vec<String>)> = lex
            .categories()
            .map(|(c, nouns)| (format!("category:{c}"), nouns.to_vec()))
            .collect();
        for fam in lex.families() {
            groups.push((format!("family:{fam}"), lex.family_values(fam).to_vec()));
        }
        let mut permutation = BTreeMap::new();
        for (group, mut members) in groups {
            members.sort();
            members.dedup();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash([group.as_bytes()]));
            members.shuffle(&mut rng);
            let n = members.len();
            if n < 2 {
                continue;
            }
            for i in 0..n {
                permutation.insert(members[i].clone(), members[(i + 1) % n].clone());
            }
        }
        Self {
            seed,
            rho: rho.clamp(0.0, 1.0),
            permutation,
        }
    }

    /// Uses an explicit permutation; it must be a bijection on its keys.
    pub fn from_permutation(seed: u64, rho: f64, permutation: BTreeMap<String, String>) -> Result<Self, String> {
        let keys: BTreeSet<&String> = permutation.keys().collect();
        let values: BTreeSet<&String> = permutation.values().collect();
        if keys != values {
            return Err("label permutation is not a bijection on its domain".into());
        }
        Ok(Self {
            seed,
            rho: rho.clamp(0.0, 1.0),
            permutation,
        })
    }

    pub fn is_corrupted(&self, key: &StudentKey) -> bool {
        self.rho > 0.0 && keyed_uniform(self.seed, &[&key.fingerprint()]) < self.rho
    }

    pub fn perceive<'a>(&'a self, label: &'a str) -> &'a str {
        self.permutation.get(label).map_or(label, String::as_str)
    }

    pub fn perception(&self) -> PermutedPerception<'_> {
        PermutedPerception(&self.permutation)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PermutedPerception<'a>(pub &'a BTreeMap<String, String>);

impl Perception for PermutedPerception<'_> {
    fn label<'a>(&'a self, token: &'a str) -> &'a str {
        self.0.get(token).map_or(token, String::as_str)
    }
}

/// An imperfect pretrained student: exact on most keys, systematically wrong
/// through the label permutation on a `rho` fraction of them.
#[derive(Debug, Clone)]
pub struct CorruptedBackend {
    profile: Arc<CorruptionProfile>,
    lex: Arc<Lexicon>,
}

impl CorruptedBackend {
    pub fn new(profile: CorruptionProfile, lex: Arc<Lexicon>) -> Self {
        Self {
            profile: Arc::new(profile),
            lex,
        }
    }

    pub fn profile(&self) -> &CorruptionProfile {
        &self.profile
    }

    pub fn lexicon(&self) -> &Arc<Lexicon> {
        &self.lex
    }

    pub fn key(&self, kind: ModuleKind, scene: &SceneGraph, patch: &ScenePatch, query: &StructuredQuery) -> StudentKey {
        StudentKey::new(kind, query, patch_signature(scene, patch, &self.profile.perception()))
    }

    pub fn answer(&self, scene: &SceneGraph, patch: &ScenePatch, query: &StructuredQuery, key: &StudentKey) -> String {
        let view = patch.view(scene);
        if self.profile.is_corrupted(key) {
            answer_with(query, &view, &self.lex, &self.profile.perception())
        } else {
            answer_with(query, &view, &self.lex, &TruePerception)
        }
    }
}

impl Backend for CorruptedBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: format!("corrupted(seed={},rho={})", self.profile.seed, self.profile.rho),
            trainable: false,
        }
    }

    fn predict(&self, scene: &SceneGraph, input: &SubTaskInput) -> Result<Prediction, BackendError> {
        let (text, patch) = adapted(input, &self.lex)?;
        let query = parse_question(&text, &self.lex);
        let key = self.key(input.kind(), scene, patch, &query);
        let label = self.answer(scene, patch, &query, &key);
        Ok(Prediction {
            distribution: Distribution::one_hot(&label),
            output: label_output(input.kind(), label)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{full_image, ObjectId, Rect, SceneObject, WorldConfig};

    fn lex() -> Arc<Lexicon> {
        Arc::new(Lexicon::new(&WorldConfig::default()))
    }

    fn two_flowers() -> SceneGraph {
        let obj = |id, x, color: &str| SceneObject {
            id: ObjectId(id),
            name: "flower".into(),
            attributes: [color.to_string()].into(),
            bbox: Rect::new(x, 10, 50, 50),
            relations: vec![],
        };
        SceneGraph {
            scene_id: "two".into(),
            canvas: (300, 200),
            objects: vec![obj(0, 200, "red"), obj(1, 10, "blue")],
            seed: 0,
        }
    }

    #[test]
    fn find_counts_and_order() {
        let s = two_flowers();
        let d = Detector::new(0.0, 0, lex());
        let found = d.find(&s, &full_image(&s), "flower");
        assert_eq!(found.len(), 2);
        assert_eq!(found[0].visible_objects(), &[ObjectId(1)]);
        assert!(found.iter().all(|p| p.origin_label() == Some("flower")));
        assert!(d.find(&s, &full_image(&s), "unicorn").is_empty());
        let blind = Detector::new(1.0, 0, lex());
        assert!(blind.find(&s, &full_image(&s), "flower").is_empty());
    }

    fn verify(patch: ScenePatch) -> SubTaskInput {
        SubTaskInput::VerifyProperty {
            center_word: patch.origin_label().map(str::to_string),
            patch,
            object_name: "flower".into(),
            attribute: "red".into(),
        }
    }

    #[test]
    fn red_blue_swap_flips_verify() {
        let s = two_flowers();
        let lx = lex();
        let patch = crop(&s, s.objects[0].bbox, Some("flower"));
        let oracle = OracleBackend::new(lx.clone());
        assert_eq!(
            oracle.predict(&s, &verify(patch.clone())).unwrap().output,
            ModuleOutput::Flag(true)
        );
        let swap = BTreeMap::from([
            ("red".to_string(), "blue".to_string()),
            ("blue".to_string(), "red".to_string()),
        ]);
        let profile = CorruptionProfile::from_permutation(7, 1.0, swap).unwrap();
        let student = CorruptedBackend::new(profile, lx);
        assert_eq!(
            student.predict(&s, &verify(patch)).unwrap().output,
            ModuleOutput::Flag(false)
        );
    }

    #[test]
    fn profile_is_derangement_per_group() {
        let lx = lex();
        let p = CorruptionProfile::new(3, 0.3, &lx);
        for (from, to) in &p.permutation {
            assert_ne!(from, to);
            assert_eq!(lx.category_of(from), lx.category_of(to));
            assert_eq!(lx.family_of(from), lx.family_of(to));
        }
        let values: BTreeSet<_> = p.permutation.values().collect();
        assert_eq!(values.len(), p.permutation.len());
        assert_eq!(p, CorruptionProfile::new(3, 0.3, &lx));
    }

    #[test]
    fn non_bijection_rejected() {
        let bad = BTreeMap::from([
            ("red".to_string(), "blue".to_string()),
            ("blue".to_string(), "blue".to_string()),
        ]);
        assert!(CorruptionProfile::from_permutation(0, 1.0, bad).is_err());
    }
}
