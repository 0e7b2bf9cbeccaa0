//! Synthetic scene worlds: the ground-truth scene graphs standing in for
//! images, deterministic generation, and patch cropping.
//!
//! A patch is a view onto a scene graph, never a rendered image. An object is
//! visible in a patch when at least half of its own bounding box lies inside
//! the patch region.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util;

/// Visibility threshold, expressed as a ratio `num / den` of the object's own
/// area that must fall inside the patch region.
pub const OVERLAP_NUM: i64 = 1;
pub const OVERLAP_DEN: i64 = 2;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error("invalid scene `{scene}`: {reason}")]
    Scene { scene: String, reason: String },
    #[error("scene io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene record: {0}")]
    Json(#[from] serde_json::Error),
}

/// Integer rectangle in abstract pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl Rect {
    pub const fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> i64 {
        i64::from(self.w.max(0)) * i64::from(self.h.max(0))
    }

    pub fn right(&self) -> i32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i32 {
        self.y + self.h
    }

    pub fn is_empty(&self) -> bool {
        self.w <= 0 || self.h <= 0
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn intersection_area(&self, other: &Rect) -> i64 {
        self.intersection(other).map_or(0, |r| r.area())
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    /// Intersection over union; two empty boxes score 0.
    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn center_x(&self) -> f64 {
        f64::from(self.x) + f64::from(self.w) / 2.0
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}x{})", self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u32);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub object: ObjectId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: ObjectId,
    pub name: String,
    pub attributes: BTreeSet<String>,
    pub bbox: Rect,
    #[serde(default)]
    pub relations: Vec<Relation>,
}

impl SceneObject {
    pub fn has_attribute(&self, attribute: &str) -> bool {
        self.attributes.contains(attribute)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub scene_id: String,
    pub canvas: (u32, u32),
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl SceneGraph {
    pub fn canvas_rect(&self) -> Rect {
        Rect::new(0, 0, self.canvas.0 as i32, self.canvas.1 as i32)
    }

    pub fn object(&self, id: ObjectId) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Checks the structural invariants: unique ids, at least one object,
    /// boxes inside the canvas, relation targets present.
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |reason: String| WorldError::Scene {
            scene: self.scene_id.clone(),
            reason,
        };
        if self.objects.is_empty() {
            return Err(bad("scene has no objects".into()));
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(bad(format!("duplicate object id {}", o.id)));
            }
        }
        let canvas = self.canvas_rect();
        for o in &self.objects {
            if o.bbox.is_empty() || !canvas.contains(&o.bbox) {
                return Err(bad(format!("object {} bbox {} outside canvas", o.id, o.bbox)));
            }
            for r in &o.relations {
                if !ids.contains(&r.object) {
                    return Err(bad(format!("object {} relates to missing {}", o.id, r.object)));
                }
            }
        }
        Ok(())
    }

    /// Vocabulary-membership check against the configuration that produced it.
    pub fn validate_vocabulary(&self, config: &WorldConfig) -> Result<(), WorldError> {
        let nouns: BTreeSet<&str> = config.nouns().collect();
        let attrs: BTreeSet<&str> = config.attribute_values().collect();
        for o in &self.objects {
            if !nouns.contains(o.name.as_str()) {
                return Err(WorldError::Scene {
                    scene: self.scene_id.clone(),
                    reason: format!("noun `{}` not in vocabulary", o.name),
                });
            }
            if let Some(a) = o.attributes.iter().find(|a| !attrs.contains(a.as_str())) {
                return Err(WorldError::Scene {
                    scene: self.scene_id.clone(),
                    reason: format!("attribute `{a}` not in vocabulary"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NounCategory {
    pub category: String,
    pub nouns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeFamily {
    pub family: String,
    pub values: Vec<String>,
    /// Probability that a generated object carries a value from this family.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub categories: Vec<NounCategory>,
    pub attributes: Vec<AttributeFamily>,
    pub relations: Vec<String>,
    pub objects_per_scene: (usize, usize),
    /// Probability that a newly placed object is nested inside an existing
    /// one, so that the host's crop shows two objects.
    pub ambiguity_rate: f64,
    pub canvas: (u32, u32),
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for WorldConfig {
    fn default() -> Self {
        let cat = |c: &str, n: &[&str]| NounCategory {
            category: c.into(),
            nouns: strings(n),
        };
        let fam = |f: &str, v: &[&str], coverage: f64| AttributeFamily {
            family: f.into(),
            values: strings(v),
            coverage,
        };
        Self {
            categories: vec![
                cat("food", &["bread", "sandwich", "cake"]),
                cat("animal", &["dog", "cat"]),
                cat("furniture", &["table", "chair"]),
                cat("vehicle", &["car", "bus", "bicycle"]),
                cat("plant", &["flower", "tree"]),
            ],
            attributes: vec![
                fam("color", &["red", "blue", "green", "white"], 1.0),
                fam("size", &["small", "large"], 1.0),
                fam("material", &["wooden", "metal"], 0.25),
            ],
            relations: strings(&["left of", "right of", "inside"]),
            objects_per_scene: (3, 8),
            ambiguity_rate: 0.2,
            canvas: (640, 480),
        }
    }
}

impl WorldConfig {
    pub fn nouns(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().flat_map(|c| c.nouns.iter().map(String::as_str))
    }

    pub fn attribute_values(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().flat_map(|f| f.values.iter().map(String::as_str))
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let err = |m: &str| Err(WorldError::Config(m.to_string()));
        if self.nouns().next().is_none() {
            return err("noun vocabulary is empty");
        }
        if self.attribute_values().next().is_none() {
            return err("attribute vocabulary is empty");
        }
        if self.categories.iter().any(|c| c.nouns.is_empty()) {
            return err("noun category without nouns");
        }
        if self.attributes.iter().any(|f| f.values.is_empty()) {
            return err("attribute family without values");
        }
        let nouns: BTreeSet<&str> = self.nouns().collect();
        if let Some(a) = self.attribute_values().find(|a| nouns.contains(a)) {
            return Err(WorldError::Config(format!("`{a}` is both a noun and an attribute")));
        }
        let (lo, hi) = self.objects_per_scene;
        if lo == 0 || lo > hi {
            return err("objects_per_scene must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return err("ambiguity_rate must lie in [0, 1]");
        }
        if self.attributes.iter().any(|f| !(0.0..=1.0).contains(&f.coverage)) {
            return err("attribute coverage must lie in [0, 1]");
        }
        if self.canvas.0 < 64 || self.canvas.1 < 64 {
            return err("canvas must be at least 64x64");
        }
        Ok(())
    }
}

const MIN_SIDE: i32 = 48;
const MAX_SIDE: i32 = 180;
const PLACEMENT_ATTEMPTS: usize = 24;
const MIN_HOST_SIDE: i32 = 64;

/// Generates a scene graph as a pure function of `(seed, config)`.
pub fn generate_world(seed: u64, config: &WorldConfig) -> Result<SceneGraph, WorldError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.objects_per_scene;
    let count = rng.gen_range(lo..=hi);
    let nouns: Vec<&str> = config.nouns().collect();
    let canvas = Rect::new(0, 0, config.canvas.0 as i32, config.canvas.1 as i32);
    let max_side = MAX_SIDE.min(canvas.w / 2).min(canvas.h / 2).max(MIN_SIDE);

    let mut placed: Vec<(String, BTreeSet<String>, Rect)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name = nouns[rng.gen_range(0..nouns.len())].to_string();
        let mut attributes = BTreeSet::new();
        for fam in &config.attributes {
            if rng.gen_bool(fam.coverage) {
                attributes.insert(fam.values[rng.gen_range(0..fam.values.len())].clone());
            }
        }
        let nest = !placed.is_empty() && rng.gen_bool(config.ambiguity_rate);
        let bbox = if nest { nested_box(&mut rng, &placed) } else { None }
            .unwrap_or_else(|| free_box(&mut rng, canvas, max_side, &placed));
        placed.push((name, attributes, bbox));
    }

    let mut ids: Vec<u32> = (0..count as u32).collect();
    ids.shuffle(&mut rng);
    let mut objects: Vec<SceneObject> = placed
        .into_iter()
        .zip(ids)
        .map(|((name, attributes, bbox), id)| SceneObject {
            id: ObjectId(id),
            name,
            attributes,
            bbox,
            relations: Vec::new(),
        })
        .collect();
    objects.sort_by_key(|o| o.id);
    let relations = spatial_relations(&objects, &config.relations);
    for (o, rels) in objects.iter_mut().zip(relations) {
        o.relations = rels;
    }

    let scene = SceneGraph {
        scene_id: format!("scene-{seed:06}"),
        canvas: config.canvas,
        objects,
        seed,
    };
    scene.validate()?;
    Ok(scene)
}

fn random_box(rng: &mut ChaCha8Rng, canvas: Rect, max_side: i32) -> Rect {
    let w = rng.gen_range(MIN_SIDE..=max_side);
    let h = rng.gen_range(MIN_SIDE..=max_side);
    let x = rng.gen_range(0..=canvas.w - w);
    let y = rng.gen_range(0..=canvas.h - h);
    Rect::new(x, y, w, h)
}

/// Whether either box would be visible inside a crop of the other.
fn mutually_visible(a: &Rect, b: &Rect) -> bool {
    let inter = a.intersection_area(b);
    inter * OVERLAP_DEN >= a.area() * OVERLAP_NUM || inter * OVERLAP_DEN >= b.area() * OVERLAP_NUM
}

fn free_box(rng: &mut ChaCha8Rng, canvas: Rect, max_side: i32, placed: &[(String, BTreeSet<String>, Rect)]) -> Rect {
    let mut candidate = random_box(rng, canvas, max_side);
    for _ in 0..PLACEMENT_ATTEMPTS {
        if placed.iter().all(|(_, _, b)| !mutually_visible(b, &candidate)) {
            break;
        }
        candidate = random_box(rng, canvas, max_side);
    }
    candidate
}

fn nested_box(rng: &mut ChaCha8Rng, placed: &[(String, BTreeSet<String>, Rect)]) -> Option<Rect> {
    let hosts: Vec<Rect> = placed
        .iter()
        .map(|(_, _, b)| *b)
        .filter(|b| b.w >= MIN_HOST_SIDE && b.h >= MIN_HOST_SIDE)
        .collect();
    let host = *hosts.get(rng.gen_range(0..hosts.len().max(1)))?;
    let w = ((f64::from(host.w) * rng.gen_range(0.35..0.6)) as i32).max(8);
    let h = ((f64::from(host.h) * rng.gen_range(0.35..0.6)) as i32).max(8);
    let x = host.x + rng.gen_range(0..=host.w - w);
    let y = host.y + rng.gen_range(0..=host.h - h);
    Some(Rect::new(x, y, w, h))
}

fn spatial_relations(objects: &[SceneObject], vocabulary: &[String]) -> Vec<Vec<Relation>> {
    let allowed = |r: &str| vocabulary.iter().any(|v| v == r);
    objects
        .iter()
        .map(|a| {
            let mut rels = Vec::new();
            for b in objects.iter().filter(|b| b.id != a.id) {
                let token = if b.bbox.contains(&a.bbox) {
                    Some("inside")
                } else if a.bbox.right() <= b.bbox.x {
                    Some("left of")
                } else if a.bbox.x >= b.bbox.right() {
                    Some("right of")
                } else {
                    None
                };
                if let Some(t) = token.filter(|t| allowed(t)) {
                    rels.push(Relation {
                        name: t.to_string(),
                        object: b.id,
                    });
                }
            }
            rels
        })
        .collect()
}

/// A rectangular view onto a scene. `visible_objects` is derived from the
/// scene at construction time and cannot be edited afterwards.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScenePatch {
    scene_id: String,
    region: Rect,
    origin_label: Option<String>,
    visible_objects: Vec<ObjectId>,
}

impl ScenePatch {
    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn region(&self) -> Rect {
        self.region
    }

    pub fn origin_label(&self) -> Option<&str> {
        self.origin_label.as_deref()
    }

    pub fn visible_objects(&self) -> &[ObjectId] {
        &self.visible_objects
    }

    pub fn is_ambiguous(&self) -> bool {
        self.visible_objects.len() >= 2
    }

    /// Visible objects resolved against their scene, in id order.
    pub fn view<'s>(&self, scene: &'s SceneGraph) -> Vec<&'s SceneObject> {
        self.visible_objects.iter().filter_map(|id| scene.object(*id)).collect()
    }
}

/// Crops `region` out of `scene`. The region is clipped to the canvas; an
/// empty intersection yields a patch with no visible objects.
pub fn crop(scene: &SceneGraph, region: Rect, origin_label: Option<&str>) -> ScenePatch {
    let clipped =
        scene
            .canvas_rect()
            .intersection(&region)
            .unwrap_or(Rect::new(region.x.max(0), region.y.max(0), 0, 0));
    let mut visible_objects: Vec<ObjectId> = scene
        .objects
        .iter()
        .filter(|o| {
            let inter = o.bbox.intersection_area(&clipped);
            inter > 0 && inter * OVERLAP_DEN >= o.bbox.area() * OVERLAP_NUM
        })
        .map(|o| o.id)
        .collect();
    visible_objects.sort();
    ScenePatch {
        scene_id: scene.scene_id.clone(),
        region: clipped,
        origin_label: origin_label.map(str::to_string),
        visible_objects,
    }
}

pub fn full_image(scene: &SceneGraph) -> ScenePatch {
    crop(scene, scene.canvas_rect(), None)
}

/// Shared, read-only collection of scenes keyed by scene id.
#[derive(Debug, Clone, Default)]
pub struct SceneStore {
    scenes: BTreeMap<String, Arc<SceneGraph>>,
}

impl SceneStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, scene: SceneGraph) {
        self.scenes.insert(scene.scene_id.clone(), Arc::new(scene));
    }

    pub fn get(&self, scene_id: &str) -> Option<&Arc<SceneGraph>> {
        self.scenes.get(scene_id)
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<SceneGraph>> {
        self.scenes.values()
    }

    pub fn extend(&mut self, scenes: impl IntoIterator<Item = SceneGraph>) {
        for s in scenes {
            self.insert(s);
        }
    }
}

impl FromIterator<SceneGraph> for SceneStore {
    fn from_iter<T: IntoIterator<Item = SceneGraph>>(iter: T) -> Self {
        let mut store = SceneStore::new();
        store.extend(iter);
        store
    }
}

/// Generates scenes for seeds `first..first + count`, in parallel, returned
/// in seed order.
pub fn generate_many(first: u64, count: usize, config: &WorldConfig) -> Result<Vec<SceneGraph>, WorldError> {
    use rayon::prelude::*;
    (first..first + count as u64)
        .into_par_iter()
        .map(|seed| generate_world(seed, config))
        .collect()
}

pub fn write_scenes(path: &Path, scenes: &[SceneGraph]) -> Result<(), WorldError> {
    Ok(util::write_jsonl(path, scenes)?)
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneGraph>, WorldError> {
    let scenes: Vec<SceneGraph> = util::read_jsonl(path)?;
    for s in &scenes {
        s.validate()?;
    }
    Ok(scenes)
}

/// One record shaped like a GQA scene graph: objects keyed by id, each with
/// name, attributes, box and outgoing relations.
#[derive(Debug, Clone, Deserialize)]
pub struct GqaSceneRecord {
    #[serde(alias = "imageId", alias = "image_id")]
    pub scene_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: BTreeMap<String, GqaObject>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GqaObject {
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
    #[serde(default)]
    pub relations: Vec<GqaRelation>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GqaRelation {
    pub name: String,
    pub object: String,
}

impl GqaSceneRecord {
    /// Converts to a scene graph. String object keys are mapped to dense ids
    /// in key order; boxes are clipped to the canvas.
    pub fn into_scene(self) -> Result<SceneGraph, WorldError> {
        let index: HashMap<&str, u32> = self
            .objects
            .keys()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i as u32))
            .collect();
        let canvas = Rect::new(0, 0, self.width as i32, self.height as i32);
        let mut objects = Vec::with_capacity(self.objects.len());
        for (key, o) in &self.objects {
            let bbox = canvas
                .intersection(&Rect::new(o.x, o.y, o.w, o.h))
                .ok_or_else(|| WorldError::Scene {
                    scene: self.scene_id.clone(),
                    reason: format!("object {key} lies outside the canvas"),
                })?;
            let relations = o
                .relations
                .iter()
                .filter_map(|r| {
                    index.get(r.object.as_str()).map(|&id| Relation {
                        name: r.name.clone(),
                        object: ObjectId(id),
                    })
                })
                .collect();
            objects.push(SceneObject {
                id: ObjectId(index[key.as_str()]),
                name: o.name.clone(),
                attributes: o.attributes.iter().cloned().collect(),
                bbox,
                relations,
            });
        }
        let seed = util::stable_hash([self.scene_id.as_bytes()]);
        let scene = SceneGraph {
            scene_id: self.scene_id,
            canvas: (self.width, self.height),
            objects,
            seed,
        };
        scene.validate()?;
        Ok(scene)
    }
}

pub fn read_gqa_scenes(path: &Path) -> Result<Vec<SceneGraph>, WorldError> {
    let records: Vec<GqaSceneRecord> = util::read_jsonl(path)?;
    records.into_iter().map(GqaSceneRecord::into_scene).collect()
}
