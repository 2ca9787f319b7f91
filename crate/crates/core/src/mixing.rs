//! Bilateral mixed sampling: class-conditional cut-and-paste of source and
//! few-shot target content onto an unlabeled target image.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{cross_entropy, CrossEntropy};
use crate::rng::Rng;
use crate::tensor::{ClassIndex, LabelMap, Tensor3, IGNORE};

/// Binary paste mask, row-major, with the classes it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct MixMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub sampled_classes: Vec<ClassIndex>,
}

impl MixMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        MixMask {
            height,
            width,
            mask: vec![false; height * width],
            sampled_classes: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MixProvenance {
    FromSource,
    FromFewshot,
    FromUnlabeled,
}

impl MixProvenance {
    pub fn code(self) -> u8 {
        match self {
            MixProvenance::FromSource => 1,
            MixProvenance::FromFewshot => 2,
            MixProvenance::FromUnlabeled => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub image: Tensor3,
    pub label: LabelMap,
    pub provenance: Vec<MixProvenance>,
}

/// A uniformly chosen `⌈n/2⌉`-subset of `available`, returned sorted.
pub fn sample_classes(available: &[ClassIndex], rng: &mut Rng) -> Result<Vec<ClassIndex>> {
    let mut pool: Vec<ClassIndex> = available.iter().copied().filter(|&c| c != IGNORE).collect();
    pool.sort_unstable();
    pool.dedup();
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no classes available to sample for mixing".into()));
    }
    let take = pool.len().div_ceil(2);
    let mut chosen: Vec<ClassIndex> = index::sample(rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `mask = 1` exactly where the donor label is one of `classes`.
pub fn build_mask(donor_label: &LabelMap, classes: &[ClassIndex]) -> Result<MixMask> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("mix mask needs at least one class".into()));
    }
    let present = donor_label.present_classes();
    if let Some(&missing) = classes.iter().find(|c| !present.contains(c)) {
        return Err(Error::Class {
            index: missing,
            reason: "sampled for mixing but absent from the donor label".into(),
        });
    }
    let mut sampled = classes.to_vec();
    sampled.sort_unstable();
    sampled.dedup();
    Ok(MixMask {
        height: donor_label.height,
        width: donor_label.width,
        mask: donor_label.data.iter().map(|c| sampled.binary_search(c).is_ok()).collect(),
        sampled_classes: sampled,
    })
}

/// One donor for [`bms_mix`].
#[derive(Debug, Clone, Copy)]
pub struct Donor<'a> {
    pub image: &'a Tensor3,
    pub label: &'a LabelMap,
    pub mask: &'a MixMask,
}

fn check(image: &Tensor3, label: &LabelMap, h: usize, w: usize, what: &str) -> Result<()> {
    if image.height != h || image.width != w || label.height != h || label.width != w || image.channels != 3 {
        return Err(Error::Shape(format!(
            "{what} is {}x{}x{} with a {}x{} label; expected 3x{h}x{w}",
            image.channels, image.height, image.width, label.height, label.width
        )));
    }
    Ok(())
}

/// `x̂ = mˢ⊙xˢ + (1−mˢ)⊙(mᵗ⊙xᵗ + (1−mᵗ)⊙xᵘ)` and the same for labels.
/// Either donor may be absent (equivalent to an all-zero mask).
pub fn bms_mix(
    source: Option<Donor<'_>>,
    fewshot: Option<Donor<'_>>,
    unlabeled_image: &Tensor3,
    unlabeled_pseudo: &LabelMap,
) -> Result<MixedSample> {
    let (h, w) = (unlabeled_pseudo.height, unlabeled_pseudo.width);
    check(unlabeled_image, unlabeled_pseudo, h, w, "unlabeled sample")?;
    for (donor, what) in [(source, "source donor"), (fewshot, "few-shot donor")] {
        if let Some(d) = donor {
            check(d.image, d.label, h, w, what)?;
            if d.mask.height != h || d.mask.width != w {
                return Err(Error::Shape(format!("{what} mask is {}x{}", d.mask.height, d.mask.width)));
            }
        }
    }
    let plane = h * w;
    let mut image = unlabeled_image.clone();
    let mut label = unlabeled_pseudo.clone();
    let mut provenance = vec![MixProvenance::FromUnlabeled; plane];
    // Inner mix first, then the source paste on top: the source mask wins.
    for (donor, tag) in [(fewshot, MixProvenance::FromFewshot), (source, MixProvenance::FromSource)] {
        let Some(d) = donor else { continue };
        for p in (0..plane).filter(|&p| d.mask.mask[p]) {
            for c in 0..3 {
                image.data[c * plane + p] = d.image.data[c * plane + p];
            }
            label.data[p] = d.label.data[p];
            provenance[p] = tag;
        }
    }
    Ok(MixedSample {
        image,
        label,
        provenance,
    })
}

/// Mean cross-entropy on the mixed sample over non-IGNORE pixels.
pub fn bms_loss(student_logits: &Tensor3, mixed: &MixedSample, pixel_weights: Option<&[f64]>) -> Result<CrossEntropy> {
    cross_entropy(student_logits, &mixed.label, pixel_weights)
}

/// Confidence weighting in the style of DACS: pasted pixels weigh 1, pixels
/// kept from the unlabeled image weigh the fraction of its pseudo-label
/// pixels whose teacher confidence exceeds `threshold`.
pub fn confidence_weights(mixed: &MixedSample, unlabeled_confidence: &[f64], threshold: f64) -> Result<Vec<f64>> {
    if unlabeled_confidence.len() != mixed.provenance.len() {
        return Err(Error::Shape("confidence map does not match the mixed sample".into()));
    }
    let confident = unlabeled_confidence.iter().filter(|&&c| c > threshold).count() as f64
        / unlabeled_confidence.len().max(1) as f64;
    Ok(mixed
        .provenance
        .iter()
        .map(|&p| if p == MixProvenance::FromUnlabeled { confident } else { 1.0 })
        .collect())
}
