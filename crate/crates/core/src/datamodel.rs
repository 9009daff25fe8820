//! Scenes, instances, annotations, predictions, dataset statistics, and the
//! JSON document formats they travel in.
//!
//! Ground-truth document layout:
//!
//! ```json
//! {
//!   "images":       [{"id": 1, "width": 256, "height": 256, "file_name": "..."}],
//!   "instances":    [{"id": 10, "image_id": 1, "bbox": [x, y, w, h], "class": "person"}],
//!   "interactions": [{"subject": 10, "verb": "hold", "target": 11, "instrument": 12}]
//! }
//! ```
//!
//! Boxes are absolute pixels, top-left origin, `[x, y, w, h]`. The `target`
//! and `instrument` fields are optional. Predictions are a flat JSON list of
//! scored triplets with the same geometry conventions.
//!
//! Readers are strict: malformed documents, dangling ids, unknown verbs, and
//! unknown class names abort with position information rather than limping
//! along with partial data.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::taxonomy::{Category, Taxonomy};

/// Axis-aligned box: top-left corner plus size, absolute pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<S> {
    pub x: S,
    pub y: S,
    pub w: S,
    pub h: S,
}

impl<S: Scalar> BBox<S> {
    pub fn new(x: S, y: S, w: S, h: S) -> BBox<S> {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> S {
        self.w * self.h
    }

    pub fn x2(&self) -> S {
        self.x + self.w
    }

    pub fn y2(&self) -> S {
        self.y + self.h
    }

    /// Finite coordinates and strictly positive extent.
    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > S::zero()
            && self.h > S::zero()
    }

    /// Clamp to `[0, width] x [0, height]`, shrinking as needed. Returns
    /// `None` when nothing of the box survives inside the image.
    pub fn clamped_to(&self, width: S, height: S) -> Option<BBox<S>> {
        let x1 = self.x.max(S::zero());
        let y1 = self.y.max(S::zero());
        let x2 = self.x2().min(width);
        let y2 = self.y2().min(height);
        if x2 > x1 && y2 > y1 {
            Some(BBox::new(x1, y1, x2 - x1, y2 - y1))
        } else {
            None
        }
    }

    fn to_array(self) -> [f64; 4] {
        [
            self.x.to_f64(),
            self.y.to_f64(),
            self.w.to_f64(),
            self.h.to_f64(),
        ]
    }

    /// Coordinate bit patterns — an exact, hashable identity for boxes that
    /// were produced (not computed), immune to float comparison pitfalls.
    pub fn key_bits(&self) -> [u64; 4] {
        [
            self.x.to_f64().to_bits(),
            self.y.to_f64().to_bits(),
            self.w.to_f64().to_bits(),
            self.h.to_f64().to_bits(),
        ]
    }

    fn from_array(a: [f64; 4]) -> BBox<S> {
        BBox::new(S::cast(a[0]), S::cast(a[1]), S::cast(a[2]), S::cast(a[3]))
    }
}

/// A detected or annotated thing in an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance<S> {
    pub id: u64,
    pub image_id: u64,
    pub bbox: BBox<S>,
    pub class_name: String,
}

impl<S> Instance<S> {
    /// Personhood is determined by the class name alone.
    pub fn is_person(&self) -> bool {
        self.class_name == "person"
    }
}

/// One ground-truth interaction row: subject does verb, optionally to a
/// target, optionally with an instrument. At most one instrument per row;
/// annotations needing several use several rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionAnnotation {
    pub subject_id: u64,
    pub verb: String,
    pub target_id: Option<u64>,
    pub instrument_id: Option<u64>,
}

/// One image worth of ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<S> {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<Instance<S>>,
    pub interactions: Vec<InteractionAnnotation>,
}

/// A scored triplet prediction: subject box + verb + optional target box
/// (empty = the model asserts there is no visible target) + optional
/// instrument box.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedTriplet<S> {
    pub image_id: u64,
    pub subject_box: BBox<S>,
    pub verb: String,
    pub target_box: Option<BBox<S>>,
    pub target_class: Option<String>,
    pub instrument_box: Option<BBox<S>>,
    pub score: S,
}

/// The closed set of object class names a dataset may use, plus the
/// distinguished out-of-registry marker `"other"`.
#[derive(Debug, Clone)]
pub struct ClassRegistry {
    names: Vec<String>,
    set: HashSet<String>,
}

/// Class name given to targets that fall outside the registry.
pub const OTHER_CLASS: &str = "other";

const COCO80: [&str; 80] = [
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "airplane",
    "bus",
    "train",
    "truck",
    "boat",
    "traffic light",
    "fire hydrant",
    "stop sign",
    "parking meter",
    "bench",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "frisbee",
    "skis",
    "snowboard",
    "sports ball",
    "kite",
    "baseball bat",
    "baseball glove",
    "skateboard",
    "surfboard",
    "tennis racket",
    "bottle",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "hot dog",
    "pizza",
    "donut",
    "cake",
    "chair",
    "couch",
    "potted plant",
    "bed",
    "dining table",
    "toilet",
    "tv",
    "laptop",
    "mouse",
    "remote",
    "keyboard",
    "cell phone",
    "microwave",
    "oven",
    "toaster",
    "sink",
    "refrigerator",
    "book",
    "clock",
    "vase",
    "scissors",
    "teddy bear",
    "hair drier",
    "toothbrush",
];

impl ClassRegistry {
    pub fn new<I: IntoIterator<Item = String>>(names: I) -> ClassRegistry {
        let names: Vec<String> = names.into_iter().collect();
        let set = names.iter().cloned().collect();
        ClassRegistry { names, set }
    }

    /// The standard 80-class detection vocabulary.
    pub fn coco80() -> &'static ClassRegistry {
        use std::sync::OnceLock;
        static REG: OnceLock<ClassRegistry> = OnceLock::new();
        REG.get_or_init(|| ClassRegistry::new(COCO80.iter().map(|s| s.to_string())))
    }

    pub fn contains(&self, class: &str) -> bool {
        self.set.contains(class)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Whether a class counts as out-of-registry for scenario purposes.
    /// `"other"` itself is out-of-registry by definition.
    pub fn is_out_of_registry(&self, class: &str) -> bool {
        !self.set.contains(class)
    }
}

/// Rewrite instance classes not present in the registry to [`OTHER_CLASS`].
/// This is the converter used to prepare objectness-style ground truth from
/// raw annotations with a long-tail class vocabulary.
pub fn map_out_of_registry_to_other<S>(scene: &mut Scene<S>, registry: &ClassRegistry) {
    for inst in &mut scene.instances {
        if registry.is_out_of_registry(&inst.class_name) {
            inst.class_name = OTHER_CLASS.to_string();
        }
    }
}

// ---------------------------------------------------------------------------
// File schema (serde lives here; model types above stay serde-free).
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RawImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    class: String,
}

#[derive(Serialize, Deserialize)]
struct RawInteraction {
    subject: u64,
    verb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instrument: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct RawDataset {
    images: Vec<RawImage>,
    instances: Vec<RawInstance>,
    interactions: Vec<RawInteraction>,
}

#[derive(Serialize, Deserialize)]
struct RawPrediction {
    image_id: u64,
    subject_box: [f64; 4],
    verb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_box: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instrument_box: Option<[f64; 4]>,
    score: f64,
}

pub(crate) fn check_box<S: Scalar>(raw: [f64; 4], at: &str) -> Result<BBox<S>> {
    let b: BBox<S> = BBox::from_array(raw);
    if !b.is_valid() {
        return Err(Error::Format(format!(
            "{at}: invalid bbox {raw:?} (needs finite values, w > 0, h > 0)"
        )));
    }
    Ok(b)
}

/// Parse a ground-truth document from a string. Scenes come back in the
/// order of the `images` array. Instance boxes are clamped to their image;
/// a box entirely outside its image is an error.
pub fn read_dataset_str<S: Scalar>(
    text: &str,
    tax: &Taxonomy,
    registry: &ClassRegistry,
) -> Result<Vec<Scene<S>>> {
    let raw: RawDataset = serde_json::from_str(text)?;

    let mut scenes: Vec<Scene<S>> = Vec::with_capacity(raw.images.len());
    let mut scene_index: HashMap<u64, usize> = HashMap::new();
    for (i, img) in raw.images.iter().enumerate() {
        if scene_index.insert(img.id, i).is_some() {
            return Err(Error::Format(format!(
                "images[{i}]: duplicate image id {}",
                img.id
            )));
        }
        if img.width == 0 || img.height == 0 {
            return Err(Error::Format(format!(
                "images[{i}]: image {} has zero area",
                img.id
            )));
        }
        scenes.push(Scene {
            image_id: img.id,
            width: img.width,
            height: img.height,
            instances: Vec::new(),
            interactions: Vec::new(),
        });
    }

    let mut instance_home: HashMap<u64, usize> = HashMap::new();
    for (i, inst) in raw.instances.iter().enumerate() {
        let at = format!("instances[{i}]");
        let &scene_i = scene_index
            .get(&inst.image_id)
            .ok_or_else(|| Error::Format(format!("{at}: unknown image id {}", inst.image_id)))?;
        if instance_home.insert(inst.id, scene_i).is_some() {
            return Err(Error::Format(format!(
                "{at}: duplicate instance id {}",
                inst.id
            )));
        }
        if inst.class != OTHER_CLASS && !registry.contains(&inst.class) {
            return Err(Error::UnknownClass {
                name: inst.class.clone(),
                at,
            });
        }
        let scene = &mut scenes[scene_i];
        let b = check_box::<S>(inst.bbox, &at)?;
        let b = b
            .clamped_to(S::cast(scene.width as f64), S::cast(scene.height as f64))
            .ok_or_else(|| {
                Error::Format(format!(
                    "{at}: bbox {:?} lies entirely outside the {}x{} image",
                    inst.bbox, scene.width, scene.height
                ))
            })?;
        scene.instances.push(Instance {
            id: inst.id,
            image_id: inst.image_id,
            bbox: b,
            class_name: inst.class.clone(),
        });
    }

    for (i, row) in raw.interactions.iter().enumerate() {
        let at = format!("interactions[{i}]");
        tax.require(&row.verb, &at)?;
        let &scene_i = instance_home
            .get(&row.subject)
            .ok_or_else(|| Error::DanglingId {
                id: row.subject,
                at: at.clone(),
            })?;
        for slot in [row.target, row.instrument].into_iter().flatten() {
            match instance_home.get(&slot) {
                Some(&home) if home == scene_i => {}
                _ => {
                    return Err(Error::DanglingId {
                        id: slot,
                        at: at.clone(),
                    })
                }
            }
        }
        scenes[scene_i].interactions.push(InteractionAnnotation {
            subject_id: row.subject,
            verb: row.verb.clone(),
            target_id: row.target,
            instrument_id: row.instrument,
        });
    }

    Ok(scenes)
}

/// Read a ground-truth document with the built-in taxonomy and the standard
/// 80-class registry.
pub fn read_dataset<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Scene<S>>> {
    let text = fs::read_to_string(path)?;
    read_dataset_str(&text, Taxonomy::builtin(), ClassRegistry::coco80())
}

/// Serialize scenes to the ground-truth document format.
pub fn dataset_to_string<S: Scalar>(scenes: &[Scene<S>]) -> Result<String> {
    let raw = RawDataset {
        images: scenes
            .iter()
            .map(|s| RawImage {
                id: s.image_id,
                width: s.width,
                height: s.height,
                file_name: format!("synth_{:06}.png", s.image_id),
            })
            .collect(),
        instances: scenes
            .iter()
            .flat_map(|s| s.instances.iter())
            .map(|i| RawInstance {
                id: i.id,
                image_id: i.image_id,
                bbox: i.bbox.to_array(),
                class: i.class_name.clone(),
            })
            .collect(),
        interactions: scenes
            .iter()
            .flat_map(|s| s.interactions.iter())
            .map(|a| RawInteraction {
                subject: a.subject_id,
                verb: a.verb.clone(),
                target: a.target_id,
                instrument: a.instrument_id,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn write_dataset<S: Scalar>(scenes: &[Scene<S>], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_string(scenes)?)?;
    Ok(())
}

/// Parse a prediction list. Scores must be finite and inside [0, 1]; boxes
/// must be valid.
pub fn read_predictions_str<S: Scalar>(text: &str) -> Result<Vec<PredictedTriplet<S>>> {
    let raw: Vec<RawPrediction> = serde_json::from_str(text)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, p)| {
            let at = format!("predictions[{i}]");
            if !p.score.is_finite() || !(0.0..=1.0).contains(&p.score) {
                return Err(Error::Format(format!(
                    "{at}: score {} outside [0, 1]",
                    p.score
                )));
            }
            Ok(PredictedTriplet {
                image_id: p.image_id,
                subject_box: check_box(p.subject_box, &at)?,
                verb: p.verb,
                target_box: p.target_box.map(|b| check_box(b, &at)).transpose()?,
                target_class: p.target_class,
                instrument_box: p.instrument_box.map(|b| check_box(b, &at)).transpose()?,
                score: S::cast(p.score),
            })
        })
        .collect()
}

pub fn read_predictions<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<PredictedTriplet<S>>> {
    read_predictions_str(&fs::read_to_string(path)?)
}

pub fn predictions_to_string<S: Scalar>(preds: &[PredictedTriplet<S>]) -> Result<String> {
    let raw: Vec<RawPrediction> = preds
        .iter()
        .map(|p| RawPrediction {
            image_id: p.image_id,
            subject_box: p.subject_box.to_array(),
            verb: p.verb.clone(),
            target_box: p.target_box.map(|b| b.to_array()),
            target_class: p.target_class.clone(),
            instrument_box: p.instrument_box.map(|b| b.to_array()),
            score: p.score.to_f64(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn write_predictions<S: Scalar>(
    preds: &[PredictedTriplet<S>],
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, predictions_to_string(preds)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Corpus-level counts, as printed by the `stats` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_images: u64,
    pub n_persons: u64,
    pub n_objects: u64,
    pub interactions_per_category: BTreeMap<Category, u64>,
    pub persons_per_image: f64,
    pub objects_per_image: f64,
}

/// Count instances and interactions. Verbs must resolve in the registry.
/// An empty dataset produces all-zero statistics.
pub fn compute_stats<S: Scalar>(scenes: &[Scene<S>], tax: &Taxonomy) -> Result<DatasetStats> {
    let mut stats = DatasetStats {
        n_images: scenes.len() as u64,
        n_persons: 0,
        n_objects: 0,
        interactions_per_category: Category::ALL.iter().map(|&c| (c, 0)).collect(),
        persons_per_image: 0.0,
        objects_per_image: 0.0,
    };
    for scene in scenes {
        for inst in &scene.instances {
            if inst.is_person() {
                stats.n_persons += 1;
            } else {
                stats.n_objects += 1;
            }
        }
        for (i, ann) in scene.interactions.iter().enumerate() {
            let verb = tax.require(
                &ann.verb,
                &format!("image {}: interactions[{}]", scene.image_id, i),
            )?;
            *stats
                .interactions_per_category
                .get_mut(&verb.category)
                .expect("all categories present") += 1;
        }
    }
    if stats.n_images > 0 {
        stats.persons_per_image = stats.n_persons as f64 / stats.n_images as f64;
        stats.objects_per_image = stats.n_objects as f64 / stats.n_images as f64;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Test support
// ---------------------------------------------------------------------------

/// Compact scene construction for tests and fixtures. Instances are laid on
/// a grid so boxes never collide unless a test asks for it.
pub mod test_support {
    use super::*;

    pub struct SceneBuilder {
        scene: Scene<f64>,
        placed: u64,
    }

    impl SceneBuilder {
        pub fn new(image_id: u64, width: u32, height: u32) -> SceneBuilder {
            SceneBuilder {
                scene: Scene {
                    image_id,
                    width,
                    height,
                    instances: Vec::new(),
                    interactions: Vec::new(),
                },
                placed: 0,
            }
        }

        pub fn instance_at(mut self, id: u64, class: &str, bbox: BBox<f64>) -> SceneBuilder {
            let image_id = self.scene.image_id;
            self.scene.instances.push(Instance {
                id,
                image_id,
                bbox,
                class_name: class.to_string(),
            });
            self
        }

        fn next_box(&mut self) -> BBox<f64> {
            // 64x64 boxes on a 96-pixel pitch: large enough that a standard
            // anchor grid covers them, spaced so they never overlap. Rows
            // wrap by image width; very full small images may spill past the
            // bottom edge, which only matters to geometry-aware tests.
            let cols = u64::from(self.scene.width.saturating_sub(80) / 96 + 1);
            let k = self.placed;
            self.placed += 1;
            let x = 16.0 + 96.0 * (k % cols) as f64;
            let y = 16.0 + 96.0 * (k / cols) as f64;
            BBox::new(x, y, 64.0, 64.0)
        }

        pub fn person(mut self, id: u64) -> SceneBuilder {
            let b = self.next_box();
            self.instance_at(id, "person", b)
        }

        pub fn object(mut self, id: u64, class: &str) -> SceneBuilder {
            let b = self.next_box();
            self.instance_at(id, class, b)
        }

        pub fn annotate(
            mut self,
            subject: u64,
            verb: &str,
            target: Option<u64>,
            instrument: Option<u64>,
        ) -> SceneBuilder {
            self.scene.interactions.push(InteractionAnnotation {
                subject_id: subject,
                verb: verb.to_string(),
                target_id: target,
                instrument_id: instrument,
            });
            self
        }

        pub fn build(self) -> Scene<f64> {
            self.scene
        }
    }
}
