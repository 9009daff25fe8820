//! Training losses over the dense planes, with analytic gradients and a
//! finite-difference checker.
//!
//! All three kernels share a calling convention: given flat inputs they
//! return the scalar loss and the gradient with respect to every input, in
//! input order. That uniformity is what lets [`grad_check`] treat them
//! interchangeably.
//!
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any
//! logarithm; a clamped coordinate reports a zero gradient, matching the
//! flat spots the clamp introduces.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::Scene;
use crate::dense::{Assignment, DenseMapBundle};
use crate::error::{Error, Result};
use crate::geometry::AnchorRef;
use crate::scalar::Scalar;
use crate::taxonomy::Taxonomy;

/// Probability clamp applied before logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Margin below which embedding-group centroids repel each other.
pub const EMBEDDING_MARGIN: f64 = 1.0;

fn clamp_prob<S: Scalar>(p: S) -> S {
    p.max(S::cast(PROB_EPS)).min(S::cast(1.0 - PROB_EPS))
}

/// Focal weighting parameters. `gamma = 0, alpha = 1` degrades to plain
/// summed cross-entropy.
#[derive(Debug, Clone, Copy)]
pub struct FocalParams<S> {
    pub alpha: S,
    pub gamma: S,
}

impl<S: Scalar> Default for FocalParams<S> {
    fn default() -> FocalParams<S> {
        FocalParams {
            alpha: S::cast(0.25),
            gamma: S::cast(2.0),
        }
    }
}

/// Focal loss summed over independent binary predictions.
///
/// For each probability `p` with label `y`, with `p_t = p` when `y` and
/// `1 - p` otherwise: `-alpha * (1 - p_t)^gamma * ln(p_t)`.
pub fn focal_loss<S: Scalar>(probs: &[S], labels: &[bool], params: &FocalParams<S>) -> (S, Vec<S>) {
    assert_eq!(
        probs.len(),
        labels.len(),
        "one label per probability required"
    );
    let (alpha, gamma) = (params.alpha, params.gamma);
    let one = S::one();
    let mut total = S::zero();
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let pc = clamp_prob(p);
        let pt = if y { pc } else { one - pc };
        let q = one - pt;
        total += -alpha * q.powf(gamma) * pt.ln();
        if pc != p {
            grad.push(S::zero());
            continue;
        }
        // d/dp_t of -alpha * (1 - p_t)^gamma * ln(p_t). The gamma = 0 branch
        // avoids 0 * inf when p_t saturates.
        let d_pt = if gamma == S::zero() {
            -alpha / pt
        } else {
            alpha * gamma * q.powf(gamma - one) * pt.ln() - alpha * q.powf(gamma) / pt
        };
        grad.push(if y { d_pt } else { -d_pt });
    }
    (total, grad)
}

/// Mean binary cross-entropy. Zero cells yield zero loss and an empty
/// gradient.
pub fn presence_loss<S: Scalar>(probs: &[S], labels: &[bool]) -> (S, Vec<S>) {
    assert_eq!(
        probs.len(),
        labels.len(),
        "one label per probability required"
    );
    if probs.is_empty() {
        return (S::zero(), Vec::new());
    }
    let n = S::cast(probs.len() as f64);
    let one = S::one();
    let mut total = S::zero();
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let pc = clamp_prob(p);
        if y {
            total += -pc.ln();
        } else {
            total += -(one - pc).ln();
        }
        if pc != p {
            grad.push(S::zero());
        } else if y {
            grad.push(-one / (pc * n));
        } else {
            grad.push(one / ((one - pc) * n));
        }
    }
    (total / n, grad)
}

/// Pull-push loss over embedding groups.
///
/// `embeddings` is a flat `[N, dim]` matrix; each group lists member row
/// indices. Pull draws members toward their group centroid:
/// mean over groups of the mean squared member-to-centroid distance. Push
/// repels centroid pairs closer than `margin`: mean over unordered centroid
/// pairs of `max(0, margin - distance)^2`; a single group pushes nothing.
///
/// Returns `(pull, push, gradient of pull + push)`.
pub fn pull_push_loss<S: Scalar>(
    embeddings: &[S],
    dim: usize,
    groups: &[Vec<usize>],
    margin: S,
) -> Result<(S, S, Vec<S>)> {
    if dim == 0 || embeddings.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "embedding matrix of {} values is not a whole number of {dim}-vectors",
            embeddings.len()
        )));
    }
    if !(margin.to_f64().is_finite() && margin >= S::zero()) {
        return Err(Error::Invalid(format!("margin must be >= 0, got {margin}")));
    }
    if groups.is_empty() {
        return Err(Error::Invalid("pull-push over zero groups".into()));
    }
    let n = embeddings.len() / dim;
    for (gi, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::Invalid(format!("group {gi} has no members")));
        }
        if let Some(&bad) = g.iter().find(|&&m| m >= n) {
            return Err(Error::Invalid(format!(
                "group {gi} references row {bad} of a {n}-row embedding matrix"
            )));
        }
    }

    let row = |i: usize| &embeddings[i * dim..(i + 1) * dim];
    let g_count = S::cast(groups.len() as f64);
    let two = S::cast(2.0);

    let centroids: Vec<Vec<S>> = groups
        .iter()
        .map(|g| {
            let size = S::cast(g.len() as f64);
            let mut c = vec![S::zero(); dim];
            for &m in g {
                for (ck, &v) in c.iter_mut().zip(row(m)) {
                    *ck += v;
                }
            }
            c.iter_mut().for_each(|v| *v /= size);
            c
        })
        .collect();

    let mut grad = vec![S::zero(); embeddings.len()];

    let mut pull = S::zero();
    for (g, c) in groups.iter().zip(&centroids) {
        let size = S::cast(g.len() as f64);
        let mut group_sum = S::zero();
        for &m in g {
            for (k, (&e, &ck)) in row(m).iter().zip(c).enumerate() {
                let d = e - ck;
                group_sum += d * d;
                // Centroid terms cancel: the member-sum of (e - c) is zero.
                grad[m * dim + k] += two * d / (size * g_count);
            }
        }
        pull += group_sum / (size * g_count);
    }

    let mut push = S::zero();
    if groups.len() > 1 {
        let pairs = S::cast((groups.len() * (groups.len() - 1) / 2) as f64);
        for gi in 0..groups.len() {
            for hi in gi + 1..groups.len() {
                let diff: Vec<S> = centroids[gi]
                    .iter()
                    .zip(&centroids[hi])
                    .map(|(&a, &b)| a - b)
                    .collect();
                let dist = diff.iter().map(|&d| d * d).sum::<S>().sqrt();
                let gap = margin - dist;
                if gap <= S::zero() {
                    continue;
                }
                push += gap * gap / pairs;
                if dist > S::zero() {
                    // d/d centroid_g of (margin - dist)^2, pushed through the
                    // centroid means; coincident centroids take the zero
                    // subgradient.
                    let coeff = -two * gap / (dist * pairs);
                    for (side, sign) in [(gi, S::one()), (hi, -S::one())] {
                        let size = S::cast(groups[side].len() as f64);
                        for &m in &groups[side] {
                            for (k, &dk) in diff.iter().enumerate() {
                                grad[m * dim + k] += coeff * sign * dk / size;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok((pull, push, grad))
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// Compare a kernel's analytic gradient against central differences at
/// `n_coords` coordinates sampled with replacement. Returns the worst
/// relative error, where relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<S, F>(kernel: F, input: &[S], epsilon: S, n_coords: usize, seed: u64) -> S
where
    S: Scalar,
    F: Fn(&[S]) -> (S, Vec<S>),
{
    if input.is_empty() {
        return S::zero();
    }
    let (_, analytic) = kernel(input);
    assert_eq!(
        analytic.len(),
        input.len(),
        "kernel must return one gradient entry per input"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = S::cast(1e-6);
    let two = S::cast(2.0);
    let mut worst = S::zero();
    let mut probe = input.to_vec();
    for _ in 0..n_coords {
        let i = rng.gen_range(0..input.len());
        probe[i] = input[i] + epsilon;
        let (up, _) = kernel(&probe);
        probe[i] = input[i] - epsilon;
        let (down, _) = kernel(&probe);
        probe[i] = input[i];
        let numeric = (up - down) / (two * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Close a focal loss over fixed labels, yielding a [`grad_check`] kernel.
pub fn focal_kernel_for<S: Scalar>(
    labels: Vec<bool>,
    params: FocalParams<S>,
) -> impl Fn(&[S]) -> (S, Vec<S>) {
    move |probs| focal_loss(probs, &labels, &params)
}

/// Close a presence loss over fixed labels.
pub fn presence_kernel_for<S: Scalar>(labels: Vec<bool>) -> impl Fn(&[S]) -> (S, Vec<S>) {
    move |probs| presence_loss(probs, &labels)
}

/// Close a pull-push loss over a fixed group structure; the kernel scalar is
/// `pull + push`.
pub fn pull_push_kernel_for<S: Scalar>(
    dim: usize,
    groups: Vec<Vec<usize>>,
    margin: S,
) -> impl Fn(&[S]) -> (S, Vec<S>) {
    move |emb| {
        let (pull, push, grad) =
            pull_push_loss(emb, dim, &groups, margin).expect("valid group structure");
        (pull + push, grad)
    }
}

// ---------------------------------------------------------------------------
// Labels from ground truth
// ---------------------------------------------------------------------------

/// Per-anchor supervision targets derived from a scene and its anchor
/// assignment.
///
/// Only anchors of interacting instances are supervised. Every owned anchor
/// of such an instance carries the instance's labels:
///
/// * verb labels are `2V` wide — active channels from annotations where the
///   instance is the subject, passive channels from annotations where it is
///   the target, and passive labels exist only for persons. Instrument-only
///   instances contribute all-zero rows.
/// * presence labels (persons only) are `V` wide and mark verbs the person
///   performs on at least one visible target.
#[derive(Debug, Clone)]
pub struct LossTargets {
    pub num_verbs: usize,
    pub verb_anchors: Vec<(AnchorRef, Vec<bool>)>,
    pub presence_anchors: Vec<(AnchorRef, Vec<bool>)>,
}

pub fn build_loss_targets<S: Scalar>(
    scene: &Scene<S>,
    tax: &Taxonomy,
    assignment: &Assignment,
) -> Result<LossTargets> {
    let v = tax.len();
    let mut verb_anchors = Vec::new();
    let mut presence_anchors = Vec::new();

    for inst in &scene.instances {
        if !assignment.interacting.contains(&inst.id) {
            continue;
        }
        let mut labels = vec![false; 2 * v];
        let mut presence = vec![false; v];
        for (i, ann) in scene.interactions.iter().enumerate() {
            let verb = tax.require(
                &ann.verb,
                &format!("image {}: interactions[{}]", scene.image_id, i),
            )?;
            if ann.subject_id == inst.id {
                labels[verb.id] = true;
                if ann.target_id.is_some() {
                    presence[verb.id] = true;
                }
            }
            if ann.target_id == Some(inst.id) && inst.is_person() {
                labels[v + verb.id] = true;
            }
        }
        for anchor in assignment.anchors_of(inst.id) {
            verb_anchors.push((*anchor, labels.clone()));
            if inst.is_person() {
                presence_anchors.push((*anchor, presence.clone()));
            }
        }
    }

    Ok(LossTargets {
        num_verbs: v,
        verb_anchors,
        presence_anchors,
    })
}

/// All four loss terms of a bundle measured against a scene's targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseLossReport<S> {
    pub focal: S,
    pub presence: S,
    pub pull: S,
    pub push: S,
}

/// Evaluate every loss of a predicted bundle against ground truth. Group
/// embeddings are read at each member's representative anchor; a scene with
/// no interactions reports zero pull and push.
pub fn dense_losses<S: Scalar>(
    bundle: &DenseMapBundle<S>,
    scene: &Scene<S>,
    tax: &Taxonomy,
    assignment: &Assignment,
    params: &FocalParams<S>,
    margin: S,
) -> Result<DenseLossReport<S>> {
    bundle.validate()?;
    if bundle.num_verbs != tax.len() {
        return Err(Error::ShapeMismatch(format!(
            "bundle carries {} verbs, taxonomy has {}",
            bundle.num_verbs,
            tax.len()
        )));
    }
    let targets = build_loss_targets(scene, tax, assignment)?;

    let mut verb_probs = Vec::new();
    let mut verb_labels = Vec::new();
    for (r, labels) in &targets.verb_anchors {
        let level = bundle.level(r.level)?;
        for c in 0..2 * bundle.num_verbs {
            verb_probs.push(level.verb_at(r.y, r.x, r.anchor, c));
        }
        verb_labels.extend_from_slice(labels);
    }
    let (focal, _) = focal_loss(&verb_probs, &verb_labels, params);

    let mut pres_probs = Vec::new();
    let mut pres_labels = Vec::new();
    for (r, labels) in &targets.presence_anchors {
        let level = bundle.level(r.level)?;
        for c in 0..bundle.num_verbs {
            pres_probs.push(level.presence_at(r.y, r.x, r.anchor, c));
        }
        pres_labels.extend_from_slice(labels);
    }
    let (presence, _) = presence_loss(&pres_probs, &pres_labels);

    let (pull, push) = if assignment.groups.is_empty() {
        (S::zero(), S::zero())
    } else {
        let mut rows: Vec<u64> = assignment
            .groups
            .iter()
            .flat_map(|g| g.members.iter().copied())
            .collect();
        rows.sort_unstable();
        rows.dedup();
        let mut embeddings = Vec::with_capacity(rows.len() * bundle.embedding_dim);
        for &id in &rows {
            let r = assignment.rep_anchor.get(&id).ok_or_else(|| {
                Error::Infeasible(format!("instance {id} interacts but owns no anchor"))
            })?;
            embeddings.extend_from_slice(bundle.level(r.level)?.embedding_at(r.y, r.x, r.anchor));
        }
        let index_of = |id: u64| rows.binary_search(&id).expect("member row exists");
        let groups: Vec<Vec<usize>> = assignment
            .groups
            .iter()
            .map(|g| g.members.iter().map(|&id| index_of(id)).collect())
            .collect();
        let (pull, push, _) = pull_push_loss(&embeddings, bundle.embedding_dim, &groups, margin)?;
        (pull, push)
    };

    Ok(DenseLossReport {
        focal,
        presence,
        pull,
        push,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::test_support::SceneBuilder;
    use crate::dense::{assign_anchors, build_anchor_grid, AnchorGridConfig};
    use rand::Rng;

    #[test]
    fn focal_hand_values() {
        let params = FocalParams::<f64>::default();
        let (loss, _) = focal_loss(&[0.9], &[true], &params);
        assert!((loss - 0.25 * 0.01 * (-(0.9f64.ln()))).abs() < 1e-15);

        // Confident wrong prediction on a negative label.
        let (loss, _) = focal_loss(&[0.5], &[false], &params);
        assert!((loss - 0.0625 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn focal_with_unit_alpha_zero_gamma_is_cross_entropy() {
        let params = FocalParams::<f64> { alpha: 1.0, gamma: 0.0 };
        let probs = [0.1, 0.4, 0.6, 0.93, 0.02];
        let labels = [true, false, true, true, false];
        let (loss, grad) = focal_loss(&probs, &labels, &params);
        let ce: f64 = probs
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| if y { -p.ln() } else { -(1.0 - p).ln() })
            .sum();
        assert!((loss - ce).abs() < 1e-9);
        // CE gradient: -1/p on positives, 1/(1-p) on negatives.
        assert!((grad[0] - (-1.0 / 0.1)).abs() < 1e-9);
        assert!((grad[1] - 1.0 / 0.6).abs() < 1e-9);
    }

    #[test]
    fn presence_hand_values() {
        let (loss, grad) = presence_loss(&[0.5], &[true]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((grad[0] + 2.0).abs() < 1e-12);

        let (loss, grad) = presence_loss::<f64>(&[], &[]);
        assert_eq!(loss, 0.0);
        assert!(grad.is_empty());
    }

    #[test]
    fn pull_hand_value_two_points() {
        // One group {0, 2} in 1-D: centroid 1, mean squared distance 1.
        let (pull, push, grad) =
            pull_push_loss::<f64>(&[0.0, 2.0], 1, &[vec![0, 1]], 1.0).unwrap();
        assert!((pull - 1.0).abs() < 1e-15);
        assert_eq!(push, 0.0);
        assert!((grad[0] + 1.0).abs() < 1e-15);
        assert!((grad[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn push_hand_values() {
        // Two coincident singletons: gap = margin, zero subgradient.
        let (pull, push, grad) =
            pull_push_loss::<f64>(&[0.0, 0.0], 1, &[vec![0], vec![1]], 1.0).unwrap();
        assert_eq!(pull, 0.0);
        assert!((push - 1.0).abs() < 1e-15);
        assert_eq!(grad, vec![0.0, 0.0]);

        // Separated past the margin: nothing to push.
        let (_, push, grad) =
            pull_push_loss::<f64>(&[0.0, 5.0], 1, &[vec![0], vec![1]], 1.0).unwrap();
        assert_eq!(push, 0.0);
        assert_eq!(grad, vec![0.0, 0.0]);

        // Halfway inside the margin: push = (1 - 0.5)^2.
        let (_, push, _) =
            pull_push_loss::<f64>(&[0.0, 0.5], 1, &[vec![0], vec![1]], 1.0).unwrap();
        assert!((push - 0.25).abs() < 1e-15);
    }

    #[test]
    fn pull_push_rejects_bad_structure() {
        assert!(pull_push_loss::<f64>(&[0.0], 1, &[], 1.0).is_err());
        assert!(pull_push_loss::<f64>(&[0.0], 1, &[vec![]], 1.0).is_err());
        assert!(pull_push_loss::<f64>(&[0.0], 1, &[vec![3]], 1.0).is_err());
        assert!(pull_push_loss::<f64>(&[0.0, 0.0, 0.0], 2, &[vec![0]], 1.0).is_err());
    }

    #[test]
    fn grad_check_smoke_on_all_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40;
        let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.98)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();

        let worst = grad_check(
            focal_kernel_for(labels.clone(), FocalParams::default()),
            &probs,
            1e-5,
            200,
            1,
        );
        assert!(worst < 1e-6, "focal grad error {worst}");

        let worst = grad_check(presence_kernel_for(labels), &probs, 1e-5, 200, 2);
        assert!(worst < 1e-6, "presence grad error {worst}");

        let emb: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let groups = vec![vec![0, 1], vec![2], vec![3, 4, 5]];
        let worst = grad_check(pull_push_kernel_for(4, groups, 1.0), &emb, 1e-5, 200, 3);
        assert!(worst < 1e-6, "pull-push grad error {worst}");
    }

    #[test]
    fn grad_check_flags_a_wrong_gradient() {
        let labels = vec![true, false, true];
        let good = presence_kernel_for::<f64>(labels);
        let bad = move |p: &[f64]| {
            let (loss, mut grad) = good(p);
            grad[1] += 0.5;
            (loss, grad)
        };
        let worst = grad_check(bad, &[0.3, 0.5, 0.7], 1e-5, 200, 4);
        assert!(worst > 0.1, "sabotaged gradient not caught: {worst}");
    }

    #[test]
    fn labels_follow_roles_and_personhood() {
        let scene = SceneBuilder::new(1, 640, 640)
            .person(1)
            .person(2)
            .object(30, "cup")
            .annotate(1, "hold", Some(30), None)
            .annotate(1, "watch", Some(30), None)
            .annotate(1, "bend", None, None)
            .annotate(1, "walk", None, None)
            .annotate(1, "hug", Some(2), None)
            .annotate(2, "stand", None, None)
            .annotate(2, "still", None, None)
            .build();
        let grid = build_anchor_grid(640, 640, &AnchorGridConfig::default()).unwrap();
        let asg = assign_anchors(&scene, &grid).unwrap();
        let targets = build_loss_targets(&scene, Taxonomy::builtin(), &asg).unwrap();
        let v = targets.num_verbs;
        let tax = Taxonomy::builtin();
        let id = |name: &str| tax.by_name(name).unwrap().id;

        let rep1 = asg.rep_anchor[&1];
        let rep2 = asg.rep_anchor[&2];
        let rep30 = asg.rep_anchor[&30];
        let row = |r| {
            &targets
                .verb_anchors
                .iter()
                .find(|(a, _)| *a == r)
                .expect("anchor labeled")
                .1
        };

        // Subject: active channels for its verbs, nothing passive.
        let l1 = row(rep1);
        assert!(l1[id("hold")] && l1[id("hug")] && l1[id("bend")]);
        assert!(!l1[v + id("hug")]);

        // Hugged person: passive hug, active posture/motion.
        let l2 = row(rep2);
        assert!(l2[v + id("hug")] && l2[id("stand")]);

        // Object target: in the supervised set but all-zero (objects take no
        // passive labels).
        assert!(row(rep30).iter().all(|&b| !b));

        // Presence marks only verbs with a visible target.
        let p1 = &targets
            .presence_anchors
            .iter()
            .find(|(a, _)| *a == rep1)
            .unwrap()
            .1;
        assert!(p1[id("hold")] && p1[id("hug")]);
        assert!(!p1[id("bend")] && !p1[id("walk")]);

        // Objects never enter the presence head.
        assert!(targets.presence_anchors.iter().all(|(a, _)| *a != rep30));
    }
}
