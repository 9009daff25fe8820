//! The 51-verb interaction taxonomy and the annotation validator.
//!
//! Five categories. Posture and Motion are *exclusive* (a person is in
//! exactly one state from each at any instant) and *mandatory* (every person
//! carries one of each). Object-interaction, social, and violent verbs are
//! free-form: a person can carry any number of them, including none.
//!
//! Verb ids are assigned in registry enumeration order, posture first, and
//! are stable: tools serialize reports sorted by id so diffs stay readable.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Instance, Scene};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Verb category. Exclusivity and mandatoriness are properties of the
/// category, not of individual verbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Posture,
    Motion,
    ObjectInteraction,
    Social,
    Violent,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Posture,
        Category::Motion,
        Category::ObjectInteraction,
        Category::Social,
        Category::Violent,
    ];

    /// Exclusive categories admit exactly one verb per person at a time.
    pub fn exclusive(self) -> bool {
        matches!(self, Category::Posture | Category::Motion)
    }

    /// Mandatory categories must appear exactly once per person.
    pub fn mandatory(self) -> bool {
        matches!(self, Category::Posture | Category::Motion)
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Posture => "posture",
            Category::Motion => "motion",
            Category::ObjectInteraction => "object_interaction",
            Category::Social => "social",
            Category::Violent => "violent",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What kind of instance a verb's target slot accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// The verb never takes a target.
    None,
    ObjectOnly,
    PersonOnly,
    ObjectOrPerson,
}

impl TargetKind {
    /// Whether a target instance of the given personhood satisfies the kind.
    pub fn admits(self, is_person: bool) -> bool {
        match self {
            TargetKind::None => false,
            TargetKind::ObjectOnly => !is_person,
            TargetKind::PersonOnly => is_person,
            TargetKind::ObjectOrPerson => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::None => "none",
            TargetKind::ObjectOnly => "object-only",
            TargetKind::PersonOnly => "person-only",
            TargetKind::ObjectOrPerson => "object-or-person",
        }
    }
}

/// Target and instrument constraints for one verb. Targets are optional for
/// every verb (an annotation may leave the slot empty when the counterpart
/// is unseen); the kind constrains the slot only when it is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetRule {
    pub kind: TargetKind,
    pub instrument_allowed: bool,
}

#[derive(Debug, Clone)]
pub struct Verb {
    pub id: usize,
    pub name: &'static str,
    pub category: Category,
    pub rule: TargetRule,
}

/// The fixed verb registry.
pub struct Taxonomy {
    verbs: Vec<Verb>,
    by_name: HashMap<&'static str, usize>,
}

/// (name, instrument_allowed) rows per category, in id order.
const POSTURE: [(&str, bool); 7] = [
    ("stand", false),
    ("bend", false),
    ("sit", false),
    ("crouch", false),
    ("lay", false),
    ("other", false),
    ("undetermined posture", false),
];

const MOTION: [(&str, bool); 11] = [
    ("still", false),
    ("walk", false),
    ("run", false),
    ("ride", false),
    ("board", false),
    ("crawl", false),
    ("jump or fall", false),
    ("dance", false),
    ("swim", false),
    ("climb", false),
    ("undetermined motion", false),
];

const OBJECT_INTERACTION: [(&str, bool); 12] = [
    ("hold", false),
    ("lift", false),
    ("carry without hands", false),
    ("pull or push softly", false),
    ("manipulate", false),
    ("point", true),
    ("use on", true),
    ("eat", true),
    ("drink", true),
    ("watch", false),
    ("talk on phone", false),
    ("smoke", false),
];

const SOCIAL: [(&str, bool); 13] = [
    ("hug", false),
    ("kiss", false),
    ("handshake", false),
    ("wave", false),
    ("highfive", false),
    ("fistbump", false),
    ("thumbsup", false),
    ("pat", false),
    ("hold somebody", false),
    ("pull or push somebody softly", false),
    ("carry somebody", false),
    ("point somebody", true),
    ("act on somebody", true),
];

const VIOLENT: [(&str, bool); 8] = [
    ("punch", false),
    ("kick", false),
    ("choke", false),
    ("block", false),
    ("pull or push strongly", false),
    ("throw", false),
    ("catch", false),
    ("hit", true),
];

fn target_kind(category: Category) -> TargetKind {
    match category {
        // A person can stand on, sit on, ride... either an object or another
        // person; the slot may also stay empty.
        Category::Posture | Category::Motion => TargetKind::ObjectOrPerson,
        Category::ObjectInteraction => TargetKind::ObjectOnly,
        Category::Social => TargetKind::PersonOnly,
        Category::Violent => TargetKind::ObjectOrPerson,
    }
}

impl Taxonomy {
    fn build() -> Taxonomy {
        let mut verbs = Vec::with_capacity(51);
        let push = |verbs: &mut Vec<Verb>, rows: &[(&'static str, bool)], category: Category| {
            for &(name, instrument_allowed) in rows {
                verbs.push(Verb {
                    id: verbs.len(),
                    name,
                    category,
                    rule: TargetRule {
                        kind: target_kind(category),
                        instrument_allowed,
                    },
                });
            }
        };
        push(&mut verbs, &POSTURE, Category::Posture);
        push(&mut verbs, &MOTION, Category::Motion);
        push(&mut verbs, &OBJECT_INTERACTION, Category::ObjectInteraction);
        push(&mut verbs, &SOCIAL, Category::Social);
        push(&mut verbs, &VIOLENT, Category::Violent);

        let by_name = verbs.iter().map(|v| (v.name, v.id)).collect();
        Taxonomy { verbs, by_name }
    }

    /// The built-in 51-verb registry.
    pub fn builtin() -> &'static Taxonomy {
        static TAX: OnceLock<Taxonomy> = OnceLock::new();
        TAX.get_or_init(Taxonomy::build)
    }

    pub fn len(&self) -> usize {
        self.verbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty()
    }

    pub fn verbs(&self) -> &[Verb] {
        &self.verbs
    }

    pub fn by_id(&self, id: usize) -> &Verb {
        &self.verbs[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Verb> {
        self.by_name.get(name).map(|&id| &self.verbs[id])
    }

    /// Verbs of one category, in id order.
    pub fn category_verbs(&self, category: Category) -> impl Iterator<Item = &Verb> {
        self.verbs.iter().filter(move |v| v.category == category)
    }

    /// Resolve a verb name or produce the standard error.
    pub fn require(&self, name: &str, at: &str) -> Result<&Verb> {
        self.by_name(name).ok_or_else(|| Error::UnknownVerb {
            name: name.to_string(),
            at: at.to_string(),
        })
    }
}

/// Annotation consistency rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    /// Every person carries exactly one posture and one motion verb.
    R1,
    /// A person's posture and motion reference the same target (or none).
    R2,
    /// A filled target slot matches the verb's target kind.
    R3,
    /// Instruments appear only on instrument-enabled verbs.
    R4,
    /// Only persons act: every annotation's subject is a person.
    R5,
    /// No duplicate identical annotations.
    R6,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

/// One rule breach. Structural problems (unresolvable ids, unknown verbs)
/// are [`Error`]s instead — a scene must be well-formed before it can be
/// judged consistent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule: Rule,
    /// Id of the subject instance the breach is attached to.
    pub subject: u64,
    pub message: String,
}

/// Check one scene against rules R1-R6.
///
/// The violation *set* is independent of instance and annotation order; the
/// returned list follows instance id / annotation index for readability.
/// Ids that do not resolve within the scene, or verbs missing from the
/// registry, abort with an error.
pub fn validate_scene<S: Scalar>(scene: &Scene<S>, tax: &Taxonomy) -> Result<Vec<Violation>> {
    let mut instances: HashMap<u64, &Instance<S>> = HashMap::new();
    for (i, inst) in scene.instances.iter().enumerate() {
        if instances.insert(inst.id, inst).is_some() {
            return Err(Error::Format(format!(
                "image {}: instances[{}]: duplicate instance id {}",
                scene.image_id, i, inst.id
            )));
        }
    }

    // Resolve every annotation up front so rule checks read straight-line.
    let mut resolved: Vec<(usize, &Verb, &Instance<S>, Option<&Instance<S>>, Option<&Instance<S>>)> =
        Vec::with_capacity(scene.interactions.len());
    for (i, ann) in scene.interactions.iter().enumerate() {
        let at = format!("image {}: interactions[{}]", scene.image_id, i);
        let verb = tax.require(&ann.verb, &at)?;
        let subject = *instances
            .get(&ann.subject_id)
            .ok_or_else(|| Error::DanglingId {
                id: ann.subject_id,
                at: at.clone(),
            })?;
        let target = match ann.target_id {
            Some(id) => Some(*instances.get(&id).ok_or_else(|| Error::DanglingId {
                id,
                at: at.clone(),
            })?),
            None => None,
        };
        let instrument = match ann.instrument_id {
            Some(id) => Some(*instances.get(&id).ok_or_else(|| Error::DanglingId {
                id,
                at: at.clone(),
            })?),
            None => None,
        };
        resolved.push((i, verb, subject, target, instrument));
    }

    let mut violations = Vec::new();

    // R1: exactly one posture and one motion verb per person. Persons whose
    // exclusive rows are miscounted are skipped by R2 (the pairing is
    // ill-defined for them), so each defect surfaces exactly once.
    let mut persons: Vec<&Instance<S>> = scene.instances.iter().filter(|i| i.is_person()).collect();
    persons.sort_by_key(|p| p.id);
    let mut r1_ok: HashSet<u64> = HashSet::new();
    for person in &persons {
        let mut ok = true;
        for category in [Category::Posture, Category::Motion] {
            let n = resolved
                .iter()
                .filter(|(_, v, s, _, _)| s.id == person.id && v.category == category)
                .count();
            if n != 1 {
                ok = false;
                violations.push(Violation {
                    rule: Rule::R1,
                    subject: person.id,
                    message: format!(
                        "person {} has {} {} verbs (expected exactly 1)",
                        person.id, n, category
                    ),
                });
            }
        }
        if ok {
            r1_ok.insert(person.id);
        }
    }

    // R2: a person's posture and motion share one target (or both are empty).
    for person in &persons {
        if !r1_ok.contains(&person.id) {
            continue;
        }
        let find = |category: Category| {
            resolved
                .iter()
                .find(|(_, v, s, _, _)| s.id == person.id && v.category == category)
                .expect("exclusive row present when R1 holds")
                .3
                .map(|t| t.id)
        };
        let pt = find(Category::Posture);
        let mt = find(Category::Motion);
        if pt != mt {
            violations.push(Violation {
                rule: Rule::R2,
                subject: person.id,
                message: format!(
                    "person {}: posture targets {} but motion targets {}",
                    person.id,
                    pt.map_or("nothing".into(), |id| id.to_string()),
                    mt.map_or("nothing".into(), |id| id.to_string()),
                ),
            });
        }
    }

    // Per-annotation rules, in annotation order.
    for (i, verb, subject, target, instrument) in &resolved {
        // R3: filled target slots match the verb's kind.
        if let Some(t) = target {
            if !verb.rule.kind.admits(t.is_person()) {
                violations.push(Violation {
                    rule: Rule::R3,
                    subject: subject.id,
                    message: format!(
                        "interactions[{}]: {:?} takes {} targets but {} is a {}",
                        i,
                        verb.name,
                        verb.rule.kind.name(),
                        t.id,
                        if t.is_person() { "person" } else { "object" },
                    ),
                });
            }
        }
        // R4: instruments only where enabled.
        if instrument.is_some() && !verb.rule.instrument_allowed {
            violations.push(Violation {
                rule: Rule::R4,
                subject: subject.id,
                message: format!(
                    "interactions[{}]: {:?} does not admit an instrument",
                    i, verb.name
                ),
            });
        }
        // R5: all five categories describe persons; objects never act.
        if !subject.is_person() {
            violations.push(Violation {
                rule: Rule::R5,
                subject: subject.id,
                message: format!(
                    "interactions[{}]: subject {} is not a person",
                    i, subject.id
                ),
            });
        }
    }

    // R6: duplicate identical annotations.
    let mut seen: HashMap<(u64, usize, Option<u64>, Option<u64>), usize> = HashMap::new();
    for (i, verb, subject, target, instrument) in &resolved {
        let key = (
            subject.id,
            verb.id,
            target.map(|t| t.id),
            instrument.map(|t| t.id),
        );
        let count = seen.entry(key).or_insert(0);
        *count += 1;
        if *count == 2 {
            violations.push(Violation {
                rule: Rule::R6,
                subject: subject.id,
                message: format!(
                    "interactions[{}]: duplicate of an earlier identical annotation ({} {:?} ...)",
                    i, subject.id, verb.name
                ),
            });
        }
    }

    Ok(violations)
}
