//! The four built-in synthetic settings: consistent UDA, open taxonomy,
//! coarse-to-fine, and partially overlapping.
//!
//! Scenes are drawn over a set of *scene classes*. Each scenario projects
//! scene classes onto its target label space and, separately, onto its
//! source label space. For the consistent, open and coarse-to-fine settings
//! the scene classes are the target classes; the partially overlapping
//! setting needs one finer split (bicycle vs. motorcycle) that neither label
//! space exposes on its own.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scene::{ClassAppearance, DomainShift, ScenePalette};
use crate::error::{Error, Result};
use crate::taxonomy::{ClassRelation, LabelSpace, RelationKind, TaxonomyPair};
use crate::tensor::{ClassIndex, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Uda,
    Open,
    C2f,
    Partial,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [ScenarioKind::Uda, ScenarioKind::Open, ScenarioKind::C2f, ScenarioKind::Partial];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Uda => "uda",
            ScenarioKind::Open => "open",
            ScenarioKind::C2f => "c2f",
            ScenarioKind::Partial => "partial",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{s}` (uda, open, c2f, partial)")))
    }
}

/// What the source domain does with scene classes it has no label for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpenVariant {
    /// The class occurs in source scenes but is labeled IGNORE.
    #[default]
    Unlabeled,
    /// The class never occurs in source scenes.
    Unseen,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub variant: OpenVariant,
    pub palette: ScenePalette,
    pub taxonomy: TaxonomyPair,
    /// Target class of each scene class (index 0 unused).
    pub scene_to_target: Vec<ClassIndex>,
    /// Source class of each scene class, IGNORE when the source has no label for it.
    pub scene_to_source: Vec<ClassIndex>,
    pub source_shift: DomainShift,
    pub target_shift: DomainShift,
}

fn look(color: [f64; 3], amp: f64, freq: f64, angle: f64) -> ClassAppearance {
    ClassAppearance {
        color,
        texture_amplitude: amp,
        texture_frequency: freq,
        texture_angle: angle,
    }
}

fn road() -> ClassAppearance {
    look([0.45, 0.42, 0.48], 0.04, 6.0, 0.0)
}
fn building() -> ClassAppearance {
    look([0.62, 0.42, 0.30], 0.08, 4.0, 90.0)
}
fn vegetation() -> ClassAppearance {
    look([0.30, 0.62, 0.28], 0.10, 8.0, 45.0)
}
fn sky() -> ClassAppearance {
    look([0.40, 0.60, 0.85], 0.0, 1.0, 0.0)
}
fn terrain() -> ClassAppearance {
    look([0.58, 0.60, 0.30], 0.06, 3.0, 0.0)
}
fn wall() -> ClassAppearance {
    look([0.72, 0.64, 0.56], 0.06, 10.0, 0.0)
}
fn pedestrian() -> ClassAppearance {
    look([0.80, 0.30, 0.32], 0.0, 1.0, 0.0)
}
fn rider() -> ClassAppearance {
    look([0.76, 0.32, 0.50], 0.12, 8.0, 90.0)
}
fn car() -> ClassAppearance {
    look([0.25, 0.55, 0.60], 0.05, 5.0, 0.0)
}
fn bus() -> ClassAppearance {
    look([0.85, 0.70, 0.25], 0.06, 6.0, 90.0)
}
fn motorcycle() -> ClassAppearance {
    look([0.55, 0.30, 0.65], 0.10, 8.0, 135.0)
}
fn bicycle() -> ClassAppearance {
    look([0.62, 0.38, 0.78], 0.10, 12.0, 45.0)
}

fn consistent(s: ClassIndex, t: ClassIndex) -> ClassRelation {
    ClassRelation {
        source: Some(s),
        kind: RelationKind::Consistent,
        targets: vec![t],
    }
}

fn open(t: ClassIndex) -> ClassRelation {
    ClassRelation {
        source: None,
        kind: RelationKind::OpenTargetOnly,
        targets: vec![t],
    }
}

/// Default appearance gap: source rendered as-is, target hue-rotated, dimmed
/// and noisier with compressed stripes.
pub fn default_shifts() -> (DomainShift, DomainShift) {
    let source = DomainShift {
        noise: 0.02,
        ..DomainShift::identity()
    };
    let target = DomainShift {
        hue_rotation_deg: 25.0,
        gain: 0.9,
        bias: [0.03, 0.0, -0.02],
        noise: 0.04,
        texture_scale: 1.25,
    };
    (source, target)
}

impl Scenario {
    pub fn new(kind: ScenarioKind, variant: OpenVariant) -> Scenario {
        let (source_shift, target_shift) = default_shifts();
        Scenario::with_shifts(kind, variant, source_shift, target_shift)
    }

    pub fn with_shifts(kind: ScenarioKind, variant: OpenVariant, source_shift: DomainShift, target_shift: DomainShift) -> Scenario {
        let space = |names: &[&str]| LabelSpace::new(names.iter().copied()).expect("preset names are valid");
        let (scene_names, looks, source_names, target_names, relations, scene_to_target, scene_to_source): (
            Vec<&str>,
            Vec<ClassAppearance>,
            Vec<&str>,
            Vec<&str>,
            Vec<ClassRelation>,
            Vec<ClassIndex>,
            Vec<ClassIndex>,
        ) = match kind {
            ScenarioKind::Uda => {
                let names = vec!["road", "building", "vegetation", "sky", "person", "vehicle"];
                (
                    names.clone(),
                    vec![road(), building(), vegetation(), sky(), pedestrian(), car()],
                    names.clone(),
                    names,
                    (1..=6).map(|i| consistent(i, i)).collect(),
                    (1..=6).collect(),
                    (1..=6).collect(),
                )
            }
            ScenarioKind::Open => {
                let names = vec!["road", "building", "vegetation", "sky", "terrain", "wall"];
                let mut rel: Vec<_> = (1..=4).map(|i| consistent(i, i)).collect();
                rel.push(open(5));
                rel.push(open(6));
                (
                    names.clone(),
                    vec![road(), building(), vegetation(), sky(), terrain(), wall()],
                    vec!["road", "building", "vegetation", "sky"],
                    names,
                    rel,
                    (1..=6).collect(),
                    vec![1, 2, 3, 4, IGNORE, IGNORE],
                )
            }
            ScenarioKind::C2f => {
                let names = vec!["road", "building", "vegetation", "terrain", "pedestrian", "rider"];
                (
                    names.clone(),
                    vec![road(), building(), vegetation(), terrain(), pedestrian(), rider()],
                    vec!["road", "building", "vegetation", "person"],
                    names,
                    vec![
                        consistent(1, 1),
                        consistent(2, 2),
                        ClassRelation {
                            source: Some(3),
                            kind: RelationKind::CoarseToFine,
                            targets: vec![3, 4],
                        },
                        ClassRelation {
                            source: Some(4),
                            kind: RelationKind::CoarseToFine,
                            targets: vec![5, 6],
                        },
                    ],
                    (1..=6).collect(),
                    vec![1, 2, 3, 3, 4, 4],
                )
            }
            ScenarioKind::Partial => (
                vec!["road", "building", "sky", "car", "bus", "motorcycle", "bicycle"],
                vec![road(), building(), sky(), car(), bus(), motorcycle(), bicycle()],
                vec!["road", "building", "sky", "vehicle"],
                vec!["road", "building", "sky", "vehicle", "public transport", "cycle"],
                vec![
                    consistent(1, 1),
                    consistent(2, 2),
                    consistent(3, 3),
                    ClassRelation {
                        source: Some(4),
                        kind: RelationKind::PartialOverlap,
                        targets: vec![4, 5, 6],
                    },
                ],
                vec![1, 2, 3, 4, 5, 6, 6],
                vec![1, 2, 3, 4, 4, 4, IGNORE],
            ),
        };
        let palette = ScenePalette::new(space(&scene_names), looks).expect("preset palette matches its classes");
        let taxonomy =
            TaxonomyPair::new(space(&source_names), space(&target_names), relations).expect("preset taxonomy is valid");
        let pad = |mut v: Vec<ClassIndex>| {
            v.insert(0, IGNORE);
            v
        };
        Scenario {
            kind,
            variant,
            palette,
            taxonomy,
            scene_to_target: pad(scene_to_target),
            scene_to_source: pad(scene_to_source),
            source_shift,
            target_shift,
        }
    }

    /// Scene classes that may appear in source-domain scenes.
    pub fn source_scene_classes(&self) -> Vec<ClassIndex> {
        self.palette
            .space
            .indices()
            .filter(|&c| self.variant == OpenVariant::Unlabeled || self.scene_to_source[usize::from(c)] != IGNORE)
            .collect()
    }

    /// Target classes without a consistent source counterpart.
    pub fn inconsistent_targets(&self) -> Vec<ClassIndex> {
        self.taxonomy.inconsistent_targets()
    }

    /// Named class subsets reported alongside the overall mIoU.
    pub fn eval_subsets(&self) -> Vec<(String, Vec<ClassIndex>)> {
        let inconsistent = self.inconsistent_targets();
        if inconsistent.is_empty() {
            Vec::new()
        } else {
            vec![("inconsistent".to_string(), inconsistent)]
        }
    }
}
