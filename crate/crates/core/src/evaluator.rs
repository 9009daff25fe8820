//! Mean average precision over interaction triplets.
//!
//! Two listings are scored per verb. The *agent* listing asks "did this
//! person perform this verb" — predictions collapse to one entry per
//! (image, subject box, verb), keeping the highest score, and match ground
//! truth subjects by IoU. The *role* listing keeps full triplets and
//! additionally requires the target slot to be right, under one of four
//! scenarios:
//!
//! * mode **Original**: ground-truth targets outside the class registry are
//!   blanked to "no target" before matching, and a boxed match requires the
//!   predicted target class to equal the annotated one.
//! * mode **Objectness**: every ground-truth target is kept and judged by
//!   localization alone; classes are never compared.
//! * **Role1**: an annotation without a target is matched only by a
//!   prediction without one; a boxed annotation needs target IoU at
//!   threshold.
//! * **Role2**: like Role1, but the predicted target is ignored wherever
//!   the annotation has none.
//!
//! Matching is greedy over predictions in score order; each ground-truth
//! item is claimed at most once. Average precision is all-point
//! interpolated. Verbs without ground truth are reported but left out of
//! the means.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, ClassRegistry, PredictedTriplet, Scene};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::scalar::Scalar;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Original,
    Objectness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleVariant {
    Role1,
    Role2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalScenario {
    pub mode: EvalMode,
    pub role: RoleVariant,
}

impl fmt::Display for EvalScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            EvalMode::Original => "original",
            EvalMode::Objectness => "objectness",
        };
        let role = match self.role {
            RoleVariant::Role1 => "role1",
            RoleVariant::Role2 => "role2",
        };
        write!(f, "{mode}/{role}")
    }
}

impl EvalScenario {
    pub const ALL: [EvalScenario; 4] = [
        EvalScenario {
            mode: EvalMode::Original,
            role: RoleVariant::Role1,
        },
        EvalScenario {
            mode: EvalMode::Original,
            role: RoleVariant::Role2,
        },
        EvalScenario {
            mode: EvalMode::Objectness,
            role: RoleVariant::Role1,
        },
        EvalScenario {
            mode: EvalMode::Objectness,
            role: RoleVariant::Role2,
        },
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalConfig {
    pub scenario: EvalScenario,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            scenario: EvalScenario {
                mode: EvalMode::Original,
                role: RoleVariant::Role1,
            },
            iou_threshold: 0.5,
        }
    }
}

/// Per-verb scores. `None` average precision means the verb has no ground
/// truth under this scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerbReport {
    pub verb_id: usize,
    pub verb: String,
    pub n_gt_agent: usize,
    pub n_gt_role: usize,
    pub n_predictions: usize,
    pub ap_agent: Option<f64>,
    pub ap_role: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scenario: EvalScenario,
    pub iou_threshold: f64,
    pub n_images: usize,
    pub n_predictions: usize,
    pub n_gt_agents: usize,
    pub n_gt_roles: usize,
    /// Mean over verbs with agent ground truth; `None` if there are none.
    pub mean_ap_agent: Option<f64>,
    /// Mean over verbs with role ground truth; `None` if there are none.
    pub mean_ap_role: Option<f64>,
    pub verbs: Vec<VerbReport>,
}

/// All-point interpolated average precision from per-rank hit flags.
///
/// `None` when there is no ground truth to recall. Extra predictions can
/// never raise the result: they only add false positives, and the
/// interpolation envelope is monotone in precision.
pub fn average_precision(hits: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(hits.len());
    for (rank, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
    }
    let mut envelope = 0.0f64;
    let mut sum = 0.0f64;
    for (i, &hit) in hits.iter().enumerate().rev() {
        envelope = envelope.max(precisions[i]);
        if hit {
            sum += envelope;
        }
    }
    Some(sum / n_gt as f64)
}

struct RoleGt<S> {
    subject: BBox<S>,
    /// Box and class of the annotated target, after any scenario transform.
    target: Option<(BBox<S>, String)>,
}

struct PredRow<S> {
    score: f64,
    order: usize,
    image: u64,
    subject: BBox<S>,
    target: Option<(BBox<S>, Option<String>)>,
}

/// Score predictions against annotated scenes under one scenario.
///
/// Scenes must have unique image ids; predictions may reference images that
/// have none (they count as false positives). Unknown verbs in either input
/// are structural errors.
pub fn evaluate<S: Scalar>(
    scenes: &[Scene<S>],
    predictions: &[PredictedTriplet<S>],
    tax: &Taxonomy,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if !(config.iou_threshold > 0.0 && config.iou_threshold <= 1.0) {
        return Err(Error::Invalid(format!(
            "IoU threshold {} outside (0, 1]",
            config.iou_threshold
        )));
    }
    let registry = ClassRegistry::coco80();

    let mut seen_images = BTreeSet::new();
    let mut role_gt: BTreeMap<(usize, u64), Vec<RoleGt<S>>> = BTreeMap::new();
    let mut agent_gt: BTreeMap<(usize, u64), Vec<BBox<S>>> = BTreeMap::new();
    let mut agent_seen: BTreeSet<(usize, u64, u64)> = BTreeSet::new();

    for scene in scenes {
        if !seen_images.insert(scene.image_id) {
            return Err(Error::Invalid(format!(
                "image id {} appears in more than one scene",
                scene.image_id
            )));
        }
        let instances: BTreeMap<u64, &crate::datamodel::Instance<S>> =
            scene.instances.iter().map(|i| (i.id, i)).collect();
        for (i, ann) in scene.interactions.iter().enumerate() {
            let at = format!("image {}: interactions[{}]", scene.image_id, i);
            let verb = tax.require(&ann.verb, &at)?;
            let subject = instances
                .get(&ann.subject_id)
                .ok_or_else(|| Error::DanglingId {
                    id: ann.subject_id,
                    at: at.clone(),
                })?;
            let mut target = ann
                .target_id
                .map(|id| {
                    instances
                        .get(&id)
                        .map(|t| (t.bbox, t.class_name.clone()))
                        .ok_or_else(|| Error::DanglingId { id, at: at.clone() })
                })
                .transpose()?;
            if config.scenario.mode == EvalMode::Original {
                if let Some((_, class)) = &target {
                    if registry.is_out_of_registry(class) {
                        target = None;
                    }
                }
            }
            role_gt
                .entry((verb.id, scene.image_id))
                .or_default()
                .push(RoleGt {
                    subject: subject.bbox,
                    target,
                });
            if agent_seen.insert((verb.id, scene.image_id, ann.subject_id)) {
                agent_gt
                    .entry((verb.id, scene.image_id))
                    .or_default()
                    .push(subject.bbox);
            }
        }
    }

    let mut preds_by_verb: BTreeMap<usize, Vec<PredRow<S>>> = BTreeMap::new();
    for (i, p) in predictions.iter().enumerate() {
        let verb = tax.require(&p.verb, &format!("predictions[{i}]"))?;
        preds_by_verb.entry(verb.id).or_default().push(PredRow {
            score: p.score.to_f64(),
            order: i,
            image: p.image_id,
            subject: p.subject_box,
            target: p.target_box.map(|b| (b, p.target_class.clone())),
        });
    }

    let thr = S::cast(config.iou_threshold);
    let empty: Vec<PredRow<S>> = Vec::new();
    let verbs: Vec<VerbReport> = (0..tax.len())
        .into_par_iter()
        .map(|vid| {
            let preds = preds_by_verb.get(&vid).unwrap_or(&empty);
            let (ap_agent, n_gt_agent) =
                agent_listing(vid, preds, &agent_gt, thr, config.scenario.role);
            let (ap_role, n_gt_role) = role_listing(vid, preds, &role_gt, thr, config);
            VerbReport {
                verb_id: vid,
                verb: tax.by_id(vid).name.to_string(),
                n_gt_agent,
                n_gt_role,
                n_predictions: preds.len(),
                ap_agent,
                ap_role,
            }
        })
        .collect();

    let mean = |select: fn(&VerbReport) -> Option<f64>| -> Option<f64> {
        let scored: Vec<f64> = verbs.iter().filter_map(select).collect();
        if scored.is_empty() {
            None
        } else {
            Some(scored.iter().sum::<f64>() / scored.len() as f64)
        }
    };

    Ok(EvalReport {
        scenario: config.scenario,
        iou_threshold: config.iou_threshold,
        n_images: scenes.len(),
        n_predictions: predictions.len(),
        n_gt_agents: verbs.iter().map(|v| v.n_gt_agent).sum(),
        n_gt_roles: verbs.iter().map(|v| v.n_gt_role).sum(),
        mean_ap_agent: mean(|v| v.ap_agent),
        mean_ap_role: mean(|v| v.ap_role),
        verbs,
    })
}

/// Rank predictions by score (ties by input order) and return their indices.
fn ranked<S: Scalar>(preds: &[PredRow<S>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then(preds[a].order.cmp(&preds[b].order))
    });
    order
}

fn agent_listing<S: Scalar>(
    vid: usize,
    preds: &[PredRow<S>],
    agent_gt: &BTreeMap<(usize, u64), Vec<BBox<S>>>,
    thr: S,
    _role: RoleVariant,
) -> (Option<f64>, usize) {
    // Collapse to one prediction per (image, subject box), keeping the
    // highest score and, on ties, the earliest.
    let mut dedup: BTreeMap<(u64, [u64; 4]), usize> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        dedup
            .entry((p.image, p.subject.key_bits()))
            .and_modify(|best| {
                if p.score > preds[*best].score {
                    *best = i;
                }
            })
            .or_insert(i);
    }
    let agents: Vec<&PredRow<S>> = {
        let mut rows: Vec<&PredRow<S>> = dedup.values().map(|&i| &preds[i]).collect();
        rows.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.order.cmp(&b.order)));
        rows
    };

    let mut matched: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
    let mut n_gt = 0usize;
    for (&(v, image), boxes) in agent_gt.range((vid, u64::MIN)..=(vid, u64::MAX)) {
        debug_assert_eq!(v, vid);
        matched.insert(image, vec![false; boxes.len()]);
        n_gt += boxes.len();
    }

    let mut hits = Vec::with_capacity(agents.len());
    for p in agents {
        let hit = agent_gt.get(&(vid, p.image)).is_some_and(|boxes| {
            let flags = matched.get_mut(&p.image).expect("flags for image");
            let best = boxes
                .iter()
                .enumerate()
                .filter(|(i, _)| !flags[*i])
                .map(|(i, b)| (iou(&p.subject, b), i))
                .filter(|(ov, _)| *ov >= thr)
                .max_by(|a, b| a.0.to_f64().total_cmp(&b.0.to_f64()).then(b.1.cmp(&a.1)));
            match best {
                Some((_, i)) => {
                    flags[i] = true;
                    true
                }
                None => false,
            }
        });
        hits.push(hit);
    }
    (average_precision(&hits, n_gt), n_gt)
}

fn role_listing<S: Scalar>(
    vid: usize,
    preds: &[PredRow<S>],
    role_gt: &BTreeMap<(usize, u64), Vec<RoleGt<S>>>,
    thr: S,
    config: &EvalConfig,
) -> (Option<f64>, usize) {
    let mut matched: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
    let mut n_gt = 0usize;
    for (&(v, image), items) in role_gt.range((vid, u64::MIN)..=(vid, u64::MAX)) {
        debug_assert_eq!(v, vid);
        matched.insert(image, vec![false; items.len()]);
        n_gt += items.len();
    }

    let target_ok = |p: &PredRow<S>, g: &RoleGt<S>| -> bool {
        match (&g.target, &p.target) {
            (None, None) => true,
            (None, Some(_)) => config.scenario.role == RoleVariant::Role2,
            (Some(_), None) => false,
            (Some((gb, gc)), Some((pb, pc))) => {
                iou(pb, gb) >= thr
                    && (config.scenario.mode == EvalMode::Objectness
                        || pc.as_deref() == Some(gc.as_str()))
            }
        }
    };

    let mut hits = Vec::with_capacity(preds.len());
    for &pi in &ranked(preds) {
        let p = &preds[pi];
        let hit = role_gt.get(&(vid, p.image)).is_some_and(|items| {
            let flags = matched.get_mut(&p.image).expect("flags for image");
            // Highest subject IoU wins; ties prefer boxed annotations, then
            // annotation order.
            let best = items
                .iter()
                .enumerate()
                .filter(|(i, _)| !flags[*i])
                .map(|(i, g)| (iou(&p.subject, &g.subject), i, g))
                .filter(|(ov, _, g)| *ov >= thr && target_ok(p, g))
                .max_by(|a, b| {
                    a.0.to_f64()
                        .total_cmp(&b.0.to_f64())
                        .then(a.2.target.is_some().cmp(&b.2.target.is_some()))
                        .then(b.1.cmp(&a.1))
                });
            match best {
                Some((_, i, _)) => {
                    flags[i] = true;
                    true
                }
                None => false,
            }
        });
        hits.push(hit);
    }
    (average_precision(&hits, n_gt), n_gt)
}
