//! Dense prediction-map machinery: the multi-level anchor grid, the map
//! bundle that holds per-anchor verb/presence/embedding planes, and the
//! assignment of ground-truth instances onto anchors.
//!
//! Layout conventions, used identically by the renderer, the file format,
//! and the decoder:
//!
//! * every level is a row-major `[H, W, A, C]` block, flattened as
//!   `((y * W + x) * A + a) * C + c`;
//! * the verb plane has `2V` channels — active verbs in `0..V` (this anchor's
//!   instance performs the verb), passive verbs in `V..2V` (it is acted on);
//! * the presence plane has `V` channels (verb has a visible target);
//! * the embedding plane has `T` channels of unbounded reals.

pub mod loss;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::datamodel::{BBox, Scene};
use crate::error::{Error, Result};
use crate::geometry::{iou, AnchorRef};
use crate::scalar::Scalar;

/// Geometry of the anchor family: one anchor per (scale, ratio) pair in each
/// cell of each level. Anchor `a` in a cell is the pair
/// `(scales[a / ratios.len()], ratios[a % ratios.len()])`.
#[derive(Debug, Clone)]
pub struct AnchorGridConfig {
    /// Pixel stride per pyramid level. Every stride must divide both image
    /// dimensions exactly.
    pub strides: Vec<u32>,
    /// Size multipliers within a level.
    pub scales: Vec<f64>,
    /// Aspect ratios (width / height).
    pub ratios: Vec<f64>,
    /// Anchor side length at scale 1, ratio 1, in units of the stride.
    pub base_scale: f64,
}

impl Default for AnchorGridConfig {
    fn default() -> AnchorGridConfig {
        AnchorGridConfig {
            strides: vec![8, 16, 32, 64, 128],
            scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            ratios: vec![0.5, 1.0, 2.0],
            base_scale: 4.0,
        }
    }
}

/// Cell extent of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub stride: u32,
    pub width: usize,
    pub height: usize,
}

/// A realized anchor grid for one image size.
#[derive(Debug, Clone)]
pub struct AnchorGrid<S> {
    pub image_width: u32,
    pub image_height: u32,
    levels: Vec<LevelSpec>,
    /// Anchor (w, h) per level and anchor slot.
    dims: Vec<Vec<(S, S)>>,
}

/// Validate the configuration and lay anchors over an image.
pub fn build_anchor_grid<S: Scalar>(
    image_width: u32,
    image_height: u32,
    config: &AnchorGridConfig,
) -> Result<AnchorGrid<S>> {
    if image_width == 0 || image_height == 0 {
        return Err(Error::Invalid("anchor grid over a zero-area image".into()));
    }
    if config.strides.is_empty() || config.scales.is_empty() || config.ratios.is_empty() {
        return Err(Error::Invalid(
            "anchor grid needs at least one stride, scale, and ratio".into(),
        ));
    }
    if !(config.base_scale.is_finite() && config.base_scale > 0.0) {
        return Err(Error::Invalid(format!(
            "base_scale must be a positive real, got {}",
            config.base_scale
        )));
    }
    for &v in config.scales.iter().chain(&config.ratios) {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Invalid(format!(
                "anchor scales and ratios must be positive reals, got {v}"
            )));
        }
    }

    let mut levels = Vec::with_capacity(config.strides.len());
    let mut dims = Vec::with_capacity(config.strides.len());
    for &stride in &config.strides {
        if stride == 0 || image_width % stride != 0 || image_height % stride != 0 {
            return Err(Error::Invalid(format!(
                "stride {stride} does not divide the {image_width}x{image_height} image"
            )));
        }
        levels.push(LevelSpec {
            stride,
            width: (image_width / stride) as usize,
            height: (image_height / stride) as usize,
        });
        let mut level_dims = Vec::with_capacity(config.scales.len() * config.ratios.len());
        for &scale in &config.scales {
            for &ratio in &config.ratios {
                let side = stride as f64 * config.base_scale * scale;
                level_dims.push((S::cast(side * ratio.sqrt()), S::cast(side / ratio.sqrt())));
            }
        }
        dims.push(level_dims);
    }

    Ok(AnchorGrid {
        image_width,
        image_height,
        levels,
        dims,
    })
}

impl<S: Scalar> AnchorGrid<S> {
    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.dims[0].len()
    }

    /// The box of one anchor. Anchors are centered on their cell and may
    /// extend past the image border; they are used unclamped.
    pub fn anchor_box(&self, r: &AnchorRef) -> Result<BBox<S>> {
        let level = self.levels.get(r.level).ok_or_else(|| {
            Error::AnchorOutOfGrid(format!("level {} of {}", r.level, self.levels.len()))
        })?;
        if r.y >= level.height || r.x >= level.width || r.anchor >= self.anchors_per_cell() {
            return Err(Error::AnchorOutOfGrid(format!(
                "anchor ({}, {}, {}, {}) outside {}x{}x{} level",
                r.level,
                r.y,
                r.x,
                r.anchor,
                level.height,
                level.width,
                self.anchors_per_cell()
            )));
        }
        let stride = S::cast(level.stride as f64);
        let half = S::cast(0.5);
        let cx = (S::cast(r.x as f64) + half) * stride;
        let cy = (S::cast(r.y as f64) + half) * stride;
        let (w, h) = self.dims[r.level][r.anchor];
        Ok(BBox::new(cx - w * half, cy - h * half, w, h))
    }

    /// Largest anchor extent at a level, used to bound candidate windows.
    fn max_dims(&self, level: usize) -> (S, S) {
        self.dims[level]
            .iter()
            .fold((S::zero(), S::zero()), |(mw, mh), &(w, h)| {
                (mw.max(w), mh.max(h))
            })
    }
}

// ---------------------------------------------------------------------------
// Dense map bundle
// ---------------------------------------------------------------------------

/// One level worth of prediction planes, each flattened `[H, W, A, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPlanes<S> {
    pub spec: LevelSpec,
    pub anchors_per_cell: usize,
    pub num_verbs: usize,
    pub embedding_dim: usize,
    pub verb: Vec<S>,
    pub presence: Vec<S>,
    pub embedding: Vec<S>,
}

impl<S: Scalar> LevelPlanes<S> {
    pub fn zeros(
        spec: LevelSpec,
        anchors_per_cell: usize,
        num_verbs: usize,
        embedding_dim: usize,
    ) -> LevelPlanes<S> {
        let cells = spec.width * spec.height * anchors_per_cell;
        LevelPlanes {
            spec,
            anchors_per_cell,
            num_verbs,
            embedding_dim,
            verb: vec![S::zero(); cells * 2 * num_verbs],
            presence: vec![S::zero(); cells * num_verbs],
            embedding: vec![S::zero(); cells * embedding_dim],
        }
    }

    #[inline]
    fn offset(&self, y: usize, x: usize, a: usize, channels: usize, c: usize) -> usize {
        debug_assert!(y < self.spec.height && x < self.spec.width);
        debug_assert!(a < self.anchors_per_cell && c < channels);
        ((y * self.spec.width + x) * self.anchors_per_cell + a) * channels + c
    }

    #[inline]
    pub fn verb_at(&self, y: usize, x: usize, a: usize, c: usize) -> S {
        self.verb[self.offset(y, x, a, 2 * self.num_verbs, c)]
    }

    #[inline]
    pub fn verb_at_mut(&mut self, y: usize, x: usize, a: usize, c: usize) -> &mut S {
        let i = self.offset(y, x, a, 2 * self.num_verbs, c);
        &mut self.verb[i]
    }

    #[inline]
    pub fn presence_at(&self, y: usize, x: usize, a: usize, c: usize) -> S {
        self.presence[self.offset(y, x, a, self.num_verbs, c)]
    }

    #[inline]
    pub fn presence_at_mut(&mut self, y: usize, x: usize, a: usize, c: usize) -> &mut S {
        let i = self.offset(y, x, a, self.num_verbs, c);
        &mut self.presence[i]
    }

    /// All `2V` verb channels of one anchor as a contiguous slice.
    #[inline]
    pub fn verb_block(&self, y: usize, x: usize, a: usize) -> &[S] {
        let c = 2 * self.num_verbs;
        let i = self.offset(y, x, a, c, 0);
        &self.verb[i..i + c]
    }

    /// All `V` presence channels of one anchor as a contiguous slice.
    #[inline]
    pub fn presence_block(&self, y: usize, x: usize, a: usize) -> &[S] {
        let i = self.offset(y, x, a, self.num_verbs, 0);
        &self.presence[i..i + self.num_verbs]
    }

    #[inline]
    pub fn embedding_at(&self, y: usize, x: usize, a: usize) -> &[S] {
        let i = self.offset(y, x, a, self.embedding_dim, 0);
        &self.embedding[i..i + self.embedding_dim]
    }

    #[inline]
    pub fn embedding_at_mut(&mut self, y: usize, x: usize, a: usize) -> &mut [S] {
        let i = self.offset(y, x, a, self.embedding_dim, 0);
        &mut self.embedding[i..i + self.embedding_dim]
    }
}

/// The full multi-level stack of prediction planes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMapBundle<S> {
    pub num_verbs: usize,
    pub embedding_dim: usize,
    pub anchors_per_cell: usize,
    pub image_id: Option<u64>,
    pub levels: Vec<LevelPlanes<S>>,
}

impl<S: Scalar> DenseMapBundle<S> {
    pub fn zeros(
        grid: &AnchorGrid<S>,
        num_verbs: usize,
        embedding_dim: usize,
        image_id: Option<u64>,
    ) -> DenseMapBundle<S> {
        let a = grid.anchors_per_cell();
        DenseMapBundle {
            num_verbs,
            embedding_dim,
            anchors_per_cell: a,
            image_id,
            levels: grid
                .levels()
                .iter()
                .map(|&spec| LevelPlanes::zeros(spec, a, num_verbs, embedding_dim))
                .collect(),
        }
    }

    /// Check that every plane has exactly the length its level dictates.
    pub fn validate(&self) -> Result<()> {
        if self.num_verbs == 0 || self.embedding_dim == 0 || self.anchors_per_cell == 0 {
            return Err(Error::ShapeMismatch(
                "bundle with zero verbs, embedding dims, or anchors".into(),
            ));
        }
        for (li, level) in self.levels.iter().enumerate() {
            if level.anchors_per_cell != self.anchors_per_cell
                || level.num_verbs != self.num_verbs
                || level.embedding_dim != self.embedding_dim
            {
                return Err(Error::ShapeMismatch(format!(
                    "level {li} disagrees with bundle header on channel counts"
                )));
            }
            let cells = level.spec.width * level.spec.height * level.anchors_per_cell;
            let want = [
                ("verb", cells * 2 * self.num_verbs, level.verb.len()),
                ("presence", cells * self.num_verbs, level.presence.len()),
                ("embedding", cells * self.embedding_dim, level.embedding.len()),
            ];
            for (name, expected, got) in want {
                if expected != got {
                    return Err(Error::ShapeMismatch(format!(
                        "level {li} {name} plane has {got} values, expected {expected}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn level(&self, i: usize) -> Result<&LevelPlanes<S>> {
        self.levels
            .get(i)
            .ok_or_else(|| Error::AnchorOutOfGrid(format!("level {i} of {}", self.levels.len())))
    }
}

// ---------------------------------------------------------------------------
// Anchor assignment
// ---------------------------------------------------------------------------

/// A set of instances whose embeddings should agree: one connected
/// component of the subject-target relation. Components rather than raw
/// (subject, target) pairs, because pairs sharing a member would be pulled
/// together and pushed apart at once. Instruments do not join groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingGroup {
    /// Sorted, deduplicated instance ids.
    pub members: Vec<u64>,
}

/// Ground truth mapped onto the grid.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// Every positive anchor with the id of the instance that owns it,
    /// sorted by (level, y, x, anchor).
    pub owned: Vec<(AnchorRef, u64)>,
    /// Highest-IoU owned anchor per covered instance.
    pub rep_anchor: BTreeMap<u64, AnchorRef>,
    /// Instances that ended up with no positive anchor. Not inherently an
    /// error; rendering a perfect bundle refuses to proceed if any of them
    /// participates in an interaction.
    pub uncovered: Vec<u64>,
    /// Ids of instances that appear in any annotation slot (subject, target,
    /// or instrument).
    pub interacting: BTreeSet<u64>,
    /// Embedding groups induced by the annotations.
    pub groups: Vec<EmbeddingGroup>,
}

impl Assignment {
    /// Owned anchors of one instance, in (level, y, x, anchor) order.
    pub fn anchors_of(&self, instance_id: u64) -> impl Iterator<Item = &AnchorRef> {
        self.owned
            .iter()
            .filter(move |(_, id)| *id == instance_id)
            .map(|(r, _)| r)
    }
}

/// Assign anchors to instances: an anchor is positive for the instance it
/// overlaps most (ties to the lower instance id), provided that IoU reaches
/// 0.5. Ownership competition considers every instance in the scene.
pub fn assign_anchors<S: Scalar>(scene: &Scene<S>, grid: &AnchorGrid<S>) -> Result<Assignment> {
    const POSITIVE_IOU: f64 = 0.5;

    // Best (IoU, owner id) seen per anchor. Instances search only the cell
    // window whose anchors can possibly intersect their box, which keeps the
    // pass near-linear in instance count instead of sweeping whole levels.
    let mut best: HashMap<AnchorRef, (S, u64)> = HashMap::new();
    for inst in &scene.instances {
        for (li, level) in grid.levels().iter().enumerate() {
            let stride = level.stride as f64;
            let (max_w, max_h) = grid.max_dims(li);
            let (max_w, max_h) = (max_w.to_f64(), max_h.to_f64());
            let b = &inst.bbox;
            let (x1, y1) = (b.x.to_f64(), b.y.to_f64());
            let (x2, y2) = (b.x2().to_f64(), b.y2().to_f64());
            // Anchor centers live at (i + 0.5) * stride; invert that to get
            // the candidate cell range, padded by half the largest anchor.
            let lo_x = ((x1 - max_w / 2.0) / stride - 0.5).floor().max(0.0) as usize;
            let hi_x = (((x2 + max_w / 2.0) / stride - 0.5).ceil().max(0.0) as usize)
                .min(level.width.saturating_sub(1));
            let lo_y = ((y1 - max_h / 2.0) / stride - 0.5).floor().max(0.0) as usize;
            let hi_y = (((y2 + max_h / 2.0) / stride - 0.5).ceil().max(0.0) as usize)
                .min(level.height.saturating_sub(1));
            if lo_x > hi_x || lo_y > hi_y {
                continue;
            }
            for y in lo_y..=hi_y {
                for x in lo_x..=hi_x {
                    for a in 0..grid.anchors_per_cell() {
                        let r = AnchorRef {
                            level: li,
                            y,
                            x,
                            anchor: a,
                        };
                        let anchor_box = grid.anchor_box(&r).expect("in-window anchor");
                        let v = iou(&anchor_box, &inst.bbox);
                        if v <= S::zero() {
                            continue;
                        }
                        match best.get_mut(&r) {
                            None => {
                                best.insert(r, (v, inst.id));
                            }
                            Some(slot) => {
                                if v > slot.0 || (v == slot.0 && inst.id < slot.1) {
                                    *slot = (v, inst.id);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut owned: Vec<(AnchorRef, S, u64)> = best
        .into_iter()
        .filter(|&(_, (v, _))| v.to_f64() >= POSITIVE_IOU)
        .map(|(r, (v, id))| (r, v, id))
        .collect();
    owned.sort_by_key(|&(r, _, _)| (r.level, r.y, r.x, r.anchor));

    // Representative anchor: the owned anchor with the highest IoU; ties go
    // to the earliest in (level, y, x, anchor) order.
    let mut rep: BTreeMap<u64, (S, AnchorRef)> = BTreeMap::new();
    for &(r, v, id) in &owned {
        match rep.get_mut(&id) {
            None => {
                rep.insert(id, (v, r));
            }
            Some(slot) => {
                if v > slot.0 {
                    *slot = (v, r);
                }
            }
        }
    }
    let rep_anchor: BTreeMap<u64, AnchorRef> = rep.into_iter().map(|(id, (_, r))| (id, r)).collect();

    let uncovered: Vec<u64> = scene
        .instances
        .iter()
        .map(|i| i.id)
        .filter(|id| !rep_anchor.contains_key(id))
        .collect();

    let mut interacting: BTreeSet<u64> = BTreeSet::new();
    for ann in &scene.interactions {
        interacting.insert(ann.subject_id);
        if let Some(t) = ann.target_id {
            interacting.insert(t);
        }
        if let Some(i) = ann.instrument_id {
            interacting.insert(i);
        }
    }

    // Union-find over subject-target links; participants are sorted, so the
    // root of each component is its smallest id and the components come out
    // ordered by it.
    let participants: Vec<u64> = {
        let mut ids: Vec<u64> = scene
            .interactions
            .iter()
            .flat_map(|a| [Some(a.subject_id), a.target_id])
            .flatten()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let mut parent: Vec<usize> = (0..participants.len()).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for ann in &scene.interactions {
        if let Some(t) = ann.target_id {
            let a = participants.binary_search(&ann.subject_id).expect("subject");
            let b = participants.binary_search(&t).expect("target");
            let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (i, &id) in participants.iter().enumerate() {
        components.entry(root(&mut parent, i)).or_default().push(id);
    }
    let groups = components
        .into_values()
        .map(|members| EmbeddingGroup { members })
        .collect();

    Ok(Assignment {
        owned: owned.into_iter().map(|(r, _, id)| (r, id)).collect(),
        rep_anchor,
        uncovered,
        interacting,
        groups,
    })
}
