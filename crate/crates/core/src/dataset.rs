//! Step-wise dataset assembly: per-type balancing with per-image top-up,
//! train/val/test splits with machine-checked disjointness, and statistics.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::Triple;
use crate::quesgen::{QAPair, QuestionType};
use crate::util::stable_hash;

pub const DEFAULT_CAP: usize = 160;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: SplitName,
    /// Per question type cap applied in phase one.
    pub cap: usize,
    /// Questions added per unrepresented scene in phase two.
    pub per_scene: (usize, usize),
    pub pool: String,
}

impl SplitSpec {
    pub fn new(name: SplitName, cap: usize, pool: &str) -> Self {
        Self {
            name,
            cap,
            per_scene: (1, 2),
            pool: pool.to_string(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("split `{0}` has cap 0")]
    ZeroCap(&'static str),
    #[error("invalid per-scene range for split `{0}`")]
    PerScene(&'static str),
    #[error("splits overlap: {0:?}")]
    Overlap(DisjointnessProof),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Balanced {
    pub items: Vec<QAPair>,
    pub phase_one: usize,
    pub phase_two: usize,
}

fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash([&seed.to_le_bytes()[..], tag.as_bytes()]))
}

/// Phase one keeps up to `cap` questions of every type; phase two adds one or
/// two questions from every scene phase one left unrepresented.
pub fn balance(pool: &[QAPair], spec: &SplitSpec, seed: u64) -> Result<Balanced, DatasetError> {
    if spec.cap == 0 {
        return Err(DatasetError::ZeroCap(spec.name.as_str()));
    }
    let (lo, hi) = spec.per_scene;
    if lo == 0 || lo > hi {
        return Err(DatasetError::PerScene(spec.name.as_str()));
    }
    let mut by_type: BTreeMap<QuestionType, Vec<&QAPair>> = BTreeMap::new();
    for qa in pool {
        by_type.entry(qa.question_type).or_default().push(qa);
    }
    let mut chosen: BTreeSet<&str> = BTreeSet::new();
    let mut items: Vec<QAPair> = Vec::new();
    for (ty, mut group) in by_type {
        group.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        group.shuffle(&mut rng_for(seed, &format!("{}:{}", spec.name.as_str(), ty)));
        for qa in group.into_iter().take(spec.cap) {
            chosen.insert(&qa.question_id);
            items.push(qa.clone());
        }
    }
    let phase_one = items.len();

    let represented: BTreeSet<String> = items.iter().map(|q| q.scene_id.clone()).collect();
    let mut by_scene: BTreeMap<&str, Vec<&QAPair>> = BTreeMap::new();
    for qa in pool {
        if !represented.contains(&qa.scene_id) && !chosen.contains(qa.question_id.as_str()) {
            by_scene.entry(&qa.scene_id).or_default().push(qa);
        }
    }
    let mut rng = rng_for(seed, &format!("{}:scenes", spec.name.as_str()));
    for (_, mut qs) in by_scene {
        qs.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        qs.shuffle(&mut rng);
        let take = rng.gen_range(lo..=hi);
        items.extend(qs.into_iter().take(take).cloned());
    }
    let phase_two = items.len() - phase_one;
    items.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(Balanced {
        items,
        phase_one,
        phase_two,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisjointnessProof {
    pub val_test_shared_scenes: usize,
    pub val_test_shared_questions: usize,
    pub train_eval_shared_scenes: usize,
    pub train_eval_shared_questions: usize,
}

impl DisjointnessProof {
    pub fn holds(&self) -> bool {
        *self == Self::default()
    }
}

fn scene_set(v: &[QAPair]) -> BTreeSet<&str> {
    v.iter().map(|q| q.scene_id.as_str()).collect()
}

fn qid_set(v: &[QAPair]) -> BTreeSet<&str> {
    v.iter().map(|q| q.question_id.as_str()).collect()
}

pub fn verify_disjoint(train: &[QAPair], val: &[QAPair], test: &[QAPair]) -> DisjointnessProof {
    let eval: Vec<QAPair> = val.iter().chain(test).cloned().collect();
    DisjointnessProof {
        val_test_shared_scenes: scene_set(val).intersection(&scene_set(test)).count(),
        val_test_shared_questions: qid_set(val).intersection(&qid_set(test)).count(),
        train_eval_shared_scenes: scene_set(train).intersection(&scene_set(&eval)).count(),
        train_eval_shared_questions: qid_set(train).intersection(&qid_set(&eval)).count(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Balanced,
    pub val: Balanced,
    pub test: Balanced,
    pub proof: DisjointnessProof,
}

/// Builds the three splits: train from its own pool, val and test from a
/// common pool partitioned by scene. Fails if any overlap is found.
pub fn make_splits(
    train_pool: &[QAPair],
    eval_pool: &[QAPair],
    specs: [&SplitSpec; 3],
    val_fraction: f64,
    seed: u64,
) -> Result<Splits, DatasetError> {
    let [train_spec, val_spec, test_spec] = specs;
    let mut scenes: Vec<&str> = eval_pool
        .iter()
        .map(|q| q.scene_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    scenes.shuffle(&mut rng_for(seed, "eval-scenes"));
    let n_val = (scenes.len() as f64 * val_fraction.clamp(0.0, 1.0)).round() as usize;
    let val_scenes: BTreeSet<&str> = scenes[..n_val].iter().copied().collect();
    let (val_pool, test_pool): (Vec<QAPair>, Vec<QAPair>) = eval_pool
        .iter()
        .cloned()
        .partition(|q| val_scenes.contains(q.scene_id.as_str()));

    let train = balance(train_pool, train_spec, seed)?;
    let val = balance(&val_pool, val_spec, seed)?;
    let test = balance(&test_pool, test_spec, seed)?;
    let proof = verify_disjoint(&train.items, &val.items, &test.items);
    if !proof.holds() {
        return Err(DatasetError::Overlap(proof));
    }
    Ok(Splits {
        train,
        val,
        test,
        proof,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub questions: usize,
    pub scenes: usize,
    pub max_per_scene: usize,
    pub per_type: BTreeMap<String, usize>,
}

pub fn stats(split: &[QAPair]) -> SplitStats {
    let mut per_type: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_scene: BTreeMap<&str, usize> = BTreeMap::new();
    for q in split {
        *per_type.entry(q.question_type.to_string()).or_default() += 1;
        *per_scene.entry(&q.scene_id).or_default() += 1;
    }
    SplitStats {
        questions: split.len(),
        scenes: per_scene.len(),
        max_per_scene: per_scene.values().copied().max().unwrap_or(0),
        per_type,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripleStats {
    pub triples: usize,
    pub per_module_kind: BTreeMap<String, usize>,
    pub per_type: BTreeMap<String, usize>,
}

pub fn triple_stats(triples: &[Triple]) -> TripleStats {
    let mut out = TripleStats {
        triples: triples.len(),
        ..TripleStats::default()
    };
    for t in triples {
        *out.per_module_kind.entry(t.module_kind.to_string()).or_default() += 1;
        *out.per_type.entry(t.question_type.clone()).or_default() += 1;
    }
    out
}

/// Question ids per split plus the disjointness counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub caps: BTreeMap<String, usize>,
    pub splits: BTreeMap<String, Vec<String>>,
    pub phase_counts: BTreeMap<String, (usize, usize)>,
    pub proof: DisjointnessProof,
}

impl SplitManifest {
    pub fn new(splits: &Splits, specs: [&SplitSpec; 3], seed: u64) -> Self {
        let parts = [
            (SplitName::Train, &splits.train),
            (SplitName::Val, &splits.val),
            (SplitName::Test, &splits.test),
        ];
        Self {
            seed,
            caps: specs.iter().map(|s| (s.name.as_str().to_string(), s.cap)).collect(),
            splits: parts
                .iter()
                .map(|(n, b)| {
                    (
                        n.as_str().to_string(),
                        b.items.iter().map(|q| q.question_id.clone()).collect(),
                    )
                })
                .collect(),
            phase_counts: parts
                .iter()
                .map(|(n, b)| (n.as_str().to_string(), (b.phase_one, b.phase_two)))
                .collect(),
            proof: splits.proof.clone(),
        }
    }
}
