//! Pseudo-label harvesting over execution traces and the student training
//! loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::adapt_step;
use crate::dsl::ExecutionTrace;
use crate::lexicon::Lexicon;
use crate::query::{StructuredQuery, NO, YES};
use crate::registry::{Backend, ModuleKind, ModuleOutput, StudentKey, TableStudent};
use crate::scene::{crop, Rect, SceneStore};

/// One step-wise training sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub scene_id: String,
    pub region: Rect,
    pub sub_question: String,
    pub pseudo_label: String,
    pub module_kind: ModuleKind,
    pub source_qid: String,
    pub question_type: String,
    pub step_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Harvest {
    pub triples: Vec<Triple>,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

fn label_text(output: &ModuleOutput) -> Option<String> {
    match output {
        ModuleOutput::Text(s) => Some(s.clone()),
        ModuleOutput::Flag(b) => Some(if *b { YES } else { NO }.to_string()),
        ModuleOutput::Patches(_) => None,
    }
}

/// Queries the teacher at every distillable step of every trace, whatever
/// the trace's final outcome. Steps the adapter or teacher rejects are
/// skipped and counted.
pub fn harvest(traces: &[ExecutionTrace], scenes: &SceneStore, teacher: &dyn Backend, lex: &Lexicon) -> Harvest {
    let per_trace: Vec<(Vec<Triple>, Vec<String>)> = traces
        .par_iter()
        .map(|trace| {
            let mut triples = Vec::new();
            let mut warnings = Vec::new();
            let Some(scene) = scenes.get(&trace.scene_id) else {
                let n = trace.steps.iter().filter(|s| s.module_kind.is_distillable()).count();
                if n > 0 {
                    warnings.extend(std::iter::repeat_n(
                        format!("{}: scene {} not found", trace.question_id, trace.scene_id),
                        n,
                    ));
                }
                return (triples, warnings);
            };
            for step in trace.steps.iter().filter(|s| s.module_kind.is_distillable()) {
                let ti = match adapt_step(step, &trace.question_id, lex) {
                    Ok(ti) => ti,
                    Err(e) => {
                        warnings.push(format!("{} step {}: {e}", trace.question_id, step.step_index));
                        continue;
                    }
                };
                let input = step.sub_task_input().expect("adapted steps are well typed");
                let label = teacher
                    .predict(scene, &input)
                    .map_err(|e| e.to_string())
                    .and_then(|p| label_text(&p.output).ok_or_else(|| "teacher returned patches".to_string()));
                match label {
                    Ok(pseudo_label) => triples.push(Triple {
                        scene_id: trace.scene_id.clone(),
                        region: ti.sub_image.region(),
                        sub_question: ti.sub_question,
                        pseudo_label,
                        module_kind: step.module_kind,
                        source_qid: trace.question_id.clone(),
                        question_type: trace.question_type.clone(),
                        step_index: step.step_index,
                    }),
                    Err(e) => warnings.push(format!("{} step {}: teacher: {e}", trace.question_id, step.step_index)),
                }
            }
            (triples, warnings)
        })
        .collect();
    let mut out = Harvest::default();
    for (t, w) in per_trace {
        out.triples.extend(t);
        out.skipped += w.len();
        out.warnings.extend(w);
    }
    out.triples
        .sort_by(|a, b| (&a.source_qid, a.step_index).cmp(&(&b.source_qid, b.step_index)));
    out
}

/// `-ln p`
pub fn step_loss(probability: f64) -> f64 {
    -probability.ln()
}

/// Mean step loss over one sample's steps; `None` for a sample with no steps.
pub fn sample_loss(step_probabilities: &[f64]) -> Option<f64> {
    if step_probabilities.is_empty() {
        return None;
    }
    let sum: f64 = step_probabilities.iter().map(|&p| step_loss(p)).sum();
    Some(sum / step_probabilities.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub epochs: usize,
    pub shuffle_seed: u64,
    pub modules: Vec<ModuleKind>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            shuffle_seed: 0,
            modules: ModuleKind::DISTILLABLE.to_vec(),
            tau: None,
            alpha: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("no module kind enabled for distillation")]
    NothingEnabled,
    #[error("`{0}` cannot be distilled")]
    NotDistillable(ModuleKind),
    #[error("no student supplied for enabled module `{0}`")]
    MissingStudent(ModuleKind),
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.modules.is_empty() {
            return Err(DistillError::NothingEnabled);
        }
        if let Some(k) = self.modules.iter().find(|k| !k.is_distillable()) {
            return Err(DistillError::NotDistillable(*k));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub triples_per_kind: BTreeMap<ModuleKind, usize>,
    /// Triples for undistillable kinds or unknown scenes.
    pub skipped: usize,
    /// Triples for kinds present but not enabled.
    pub ignored: usize,
    /// Mean sample loss over the training samples after each epoch.
    pub epoch_losses: Vec<f64>,
    pub per_kind_epoch_losses: BTreeMap<ModuleKind, Vec<f64>>,
    pub table_sizes: BTreeMap<ModuleKind, usize>,
    pub keys_above_tau: BTreeMap<ModuleKind, usize>,
}

struct Prepared {
    kind: ModuleKind,
    key: StudentKey,
    query: StructuredQuery,
    label: String,
    sample: usize,
}

pub type Students = BTreeMap<ModuleKind, TableStudent>;

/// Applies every enabled triple once per epoch, in a seeded order per epoch,
/// with weight `1 / epochs`, so the final counts are observation counts
/// whatever the epoch count. Students are taken by value, so no reader can
/// observe them mid-training.
pub fn train(
    mut students: Students,
    triples: &[Triple],
    scenes: &SceneStore,
    config: &DistillConfig,
) -> Result<(Students, TrainingReport), DistillError> {
    config.validate()?;
    for kind in &config.modules {
        let s = students.remove(kind).ok_or(DistillError::MissingStudent(*kind))?;
        let tau = config.tau.unwrap_or(s.tau());
        let alpha = config.alpha.unwrap_or(s.alpha());
        students.insert(*kind, s.with_smoothing(alpha, tau));
    }
    let mut report = TrainingReport::default();
    let mut sample_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for t in triples {
        let n = sample_ids.len();
        sample_ids.entry(&t.source_qid).or_insert(n);
    }

    let prepared: Vec<Option<Prepared>> = triples
        .par_iter()
        .map(|t| {
            if !config.modules.contains(&t.module_kind) {
                return None;
            }
            let student = &students[&t.module_kind];
            let scene = scenes.get(&t.scene_id)?;
            let patch = crop(scene, t.region, None);
            let (key, query) = student.key_for(scene, &patch, &t.sub_question);
            Some(Prepared {
                kind: t.module_kind,
                key,
                query,
                label: t.pseudo_label.clone(),
                sample: sample_ids[t.source_qid.as_str()],
            })
        })
        .collect();
    for (t, p) in triples.iter().zip(&prepared) {
        if p.is_some() {
            *report.triples_per_kind.entry(t.module_kind).or_default() += 1;
        } else if !t.module_kind.is_distillable() || scenes.get(&t.scene_id).is_none() {
            report.skipped += 1;
        } else {
            report.ignored += 1;
        }
    }
    let prepared: Vec<Prepared> = prepared.into_iter().flatten().collect();

    let weight = 1.0 / config.epochs.max(1) as f64;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        for &i in &order {
            let p = &prepared[i];
            if let Some(s) = students.get_mut(&p.kind) {
                s.update(p.key.clone(), &p.label, weight);
            }
        }
        let (overall, per_kind) = mean_losses(&students, &prepared);
        report.epoch_losses.push(overall);
        for (k, l) in per_kind {
            report.per_kind_epoch_losses.entry(k).or_default().push(l);
        }
    }
    for kind in &config.modules {
        let s = &students[kind];
        report.table_sizes.insert(*kind, s.len());
        report.keys_above_tau.insert(*kind, s.learned_keys());
    }
    Ok((students, report))
}

/// Mean over samples of the per-sample mean step loss, overall and per kind.
fn mean_losses(students: &Students, prepared: &[Prepared]) -> (f64, BTreeMap<ModuleKind, f64>) {
    let mut samples: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut kind_samples: BTreeMap<(ModuleKind, usize), Vec<f64>> = BTreeMap::new();
    for p in prepared {
        let prob = students[&p.kind].probability(&p.key, &p.query, &p.label);
        samples.entry(p.sample).or_default().push(prob);
        kind_samples.entry((p.kind, p.sample)).or_default().push(prob);
    }
    let mean = |vals: Vec<f64>| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let overall = mean(samples.values().filter_map(|v| sample_loss(v)).collect());
    let mut grouped: BTreeMap<ModuleKind, Vec<f64>> = BTreeMap::new();
    for ((k, _), v) in kind_samples {
        if let Some(l) = sample_loss(&v) {
            grouped.entry(k).or_default().push(l);
        }
    }
    (overall, grouped.into_iter().map(|(k, v)| (k, mean(v))).collect())
}
