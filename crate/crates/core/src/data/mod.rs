//! Synthetic paired-domain segmentation data and the few-shot protocol.

mod dataset;
mod scenario;
mod scene;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use dataset::{prepare_output_dir, write_label, write_rgb, Dataset, DatasetManifest, DatasetParams, FewShotEntry, Splits, MANIFEST_VERSION};
pub use scenario::{default_shifts, OpenVariant, Scenario, ScenarioKind};
pub use scene::{generate_scene, quantize, ClassAppearance, DomainShift, SceneLayout, ScenePalette};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::taxonomy::TaxonomyPair;
use crate::tensor::{ClassIndex, LabelMap, Tensor3, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DomainTag {
    Source,
    TargetFewshot,
    TargetUnlabeled,
    /// Fully labeled target data held out for evaluation.
    TargetTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: DomainTag,
    /// `3 × H × W`, values in [0, 1].
    pub image: Tensor3,
    pub label: LabelMap,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }

    /// The unlabeled view: same image, all-IGNORE labels.
    pub fn unlabeled(&self, id: String) -> Sample {
        Sample {
            id,
            domain: DomainTag::TargetUnlabeled,
            image: self.image.clone(),
            label: LabelMap::filled(self.height(), self.width(), IGNORE),
        }
    }
}

fn relabel(label: &LabelMap, table: &[ClassIndex]) -> Result<LabelMap> {
    let mut out = label.clone();
    for v in &mut out.data {
        *v = *table.get(usize::from(*v)).ok_or(Error::Class {
            index: *v,
            reason: "scene class outside the scenario palette".into(),
        })?;
    }
    Ok(out)
}

/// Re-express a scene-labeled sample in the source label space: fine classes
/// merge into their coarse parent, classes the source has no label for become
/// IGNORE.
pub fn source_label_view(sample: &Sample, scenario: &Scenario) -> Result<Sample> {
    Ok(Sample {
        id: sample.id.clone(),
        domain: DomainTag::Source,
        image: sample.image.clone(),
        label: relabel(&sample.label, &scenario.scene_to_source)?,
    })
}

/// Re-express a scene-labeled sample in the target label space.
pub fn target_label_view(sample: &Sample, scenario: &Scenario, domain: DomainTag) -> Result<Sample> {
    Ok(Sample {
        id: sample.id.clone(),
        domain,
        image: sample.image.clone(),
        label: relabel(&sample.label, &scenario.scene_to_target)?,
    })
}

/// Number of few-shot images per inconsistent target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotCount {
    Exactly(usize),
    /// Every candidate image containing the class (the partially-labeled regime).
    All,
}

/// Pick labeled target images for each inconsistent target class and mask
/// their labels down to `{IGNORE, class}`.
///
/// `pool` carries ground-truth target labels. With `disjoint`, no image is
/// used for more than one class (ignored for [`ShotCount::All`]).
pub fn make_fewshot_split(
    pool: &[Sample],
    taxonomy: &TaxonomyPair,
    shots: ShotCount,
    disjoint: bool,
    rng: &mut Rng,
) -> Result<Vec<(ClassIndex, Sample)>> {
    if shots == ShotCount::Exactly(0) {
        return Err(Error::InvalidArgument("few-shot protocol needs at least one labeled image per class".into()));
    }
    let mut used = vec![false; pool.len()];
    let mut out = Vec::new();
    for class in taxonomy.inconsistent_targets() {
        let name = taxonomy.target().name(class).unwrap_or("?");
        let mut candidates: Vec<usize> = (0..pool.len())
            .filter(|&i| pool[i].label.data.contains(&class))
            .collect();
        if candidates.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "target class `{name}` is absent from all {} candidate images",
                pool.len()
            )));
        }
        let chosen: Vec<usize> = match shots {
            ShotCount::All => candidates,
            ShotCount::Exactly(n) => {
                if disjoint {
                    candidates.retain(|&i| !used[i]);
                }
                if candidates.len() < n {
                    return Err(Error::InvalidArgument(format!(
                        "target class `{name}` appears in only {} available images, {n} shots requested",
                        candidates.len()
                    )));
                }
                candidates.shuffle(rng);
                let mut pick = candidates[..n].to_vec();
                pick.sort_unstable();
                pick
            }
        };
        for (k, &i) in chosen.iter().enumerate() {
            used[i] = true;
            let src = &pool[i];
            let mut label = src.label.clone();
            for v in &mut label.data {
                if *v != class {
                    *v = IGNORE;
                }
            }
            out.push((
                class,
                Sample {
                    id: format!("fewshot-{class:02}-{k:04}"),
                    domain: DomainTag::TargetFewshot,
                    image: src.image.clone(),
                    label,
                },
            ));
        }
    }
    Ok(out)
}
