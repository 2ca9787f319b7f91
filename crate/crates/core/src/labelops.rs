//! Source labels rewritten into the target label space: stochastic label
//! mapping (uniform draw among a class's target candidates) and pseudo-label
//! relabeling (the teacher picks among the candidates when it is confident).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{cross_entropy, CrossEntropy};
use crate::rng::Rng;
use crate::taxonomy::TaxonomyPair;
use crate::tensor::{ClassIndex, LabelMap, Tensor3, IGNORE};

/// How a pixel of a [`RemappedLabel`] got its value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelProvenance {
    /// IGNORE in the input, a source class with no target counterpart, or an
    /// inconsistent class under [`consistent_only`].
    Ignored,
    ConsistentMap,
    SlmSampled,
    RlRelabeled,
    RlFallbackIgnore,
    /// An inconsistent class sent to its first candidate by [`primary_map`].
    PrimaryMap,
}

impl LabelProvenance {
    /// Small integer code for diagnostic PNGs.
    pub fn code(self) -> u8 {
        match self {
            LabelProvenance::Ignored => 0,
            LabelProvenance::ConsistentMap => 1,
            LabelProvenance::SlmSampled => 2,
            LabelProvenance::RlRelabeled => 3,
            LabelProvenance::RlFallbackIgnore => 4,
            LabelProvenance::PrimaryMap => 5,
        }
    }
}

/// A target-space label map with per-pixel provenance (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct RemappedLabel {
    pub label: LabelMap,
    pub provenance: Vec<LabelProvenance>,
}

/// Granularity of the stochastic draw.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlmMode {
    /// Independent draw for every pixel.
    #[default]
    PerPixel,
    /// One draw per source class per image.
    PerImage,
}

/// Per-pixel action derived from the taxonomy, shared by both operations.
enum Route<'a> {
    Ignore,
    Fixed(ClassIndex),
    Choose(&'a [ClassIndex]),
}

fn route<'a>(taxonomy: &'a TaxonomyPair, value: ClassIndex) -> Result<Route<'a>> {
    if value == IGNORE {
        return Ok(Route::Ignore);
    }
    if !taxonomy.source().contains(value) {
        return Err(Error::Class {
            index: value,
            reason: format!("not in the {}-class source space", taxonomy.source().count()),
        });
    }
    Ok(match taxonomy.relation_of(value) {
        None => Route::Ignore,
        Some(rel) if rel.kind.is_consistent() || rel.targets.len() == 1 => Route::Fixed(rel.targets[0]),
        Some(rel) => Route::Choose(&rel.targets),
    })
}

/// Stochastic label mapping. Fresh draws on every call.
pub fn slm(label: &LabelMap, taxonomy: &TaxonomyPair, mode: SlmMode, rng: &mut Rng) -> Result<RemappedLabel> {
    let mut out = LabelMap::filled(label.height, label.width, IGNORE);
    let mut provenance = vec![LabelProvenance::Ignored; label.len()];
    let mut per_image: Vec<Option<ClassIndex>> = vec![None; taxonomy.source().count() + 1];
    for (p, &v) in label.data.iter().enumerate() {
        match route(taxonomy, v)? {
            Route::Ignore => {}
            Route::Fixed(t) => {
                out.data[p] = t;
                provenance[p] = LabelProvenance::ConsistentMap;
            }
            Route::Choose(candidates) => {
                let draw = |rng: &mut Rng| candidates[rng.random_range(0..candidates.len())];
                out.data[p] = match mode {
                    SlmMode::PerPixel => draw(rng),
                    SlmMode::PerImage => *per_image[usize::from(v)].get_or_insert_with(|| draw(rng)),
                };
                provenance[p] = LabelProvenance::SlmSampled;
            }
        }
    }
    Ok(RemappedLabel { label: out, provenance })
}

/// How source labels reach the target space when neither stochastic mapping
/// nor relabeling is active.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackMapping {
    /// Naive label transfer: a coarse class becomes its first candidate.
    #[default]
    Primary,
    /// Inconsistent classes are dropped to IGNORE.
    Ignore,
}

pub fn fallback_map(label: &LabelMap, taxonomy: &TaxonomyPair, mode: FallbackMapping) -> Result<RemappedLabel> {
    match mode {
        FallbackMapping::Primary => primary_map(label, taxonomy),
        FallbackMapping::Ignore => consistent_only(label, taxonomy),
    }
}

/// Every source class sent to the first target class it relates to, e.g.
/// `person` to `pedestrian` when `person` splits into `{pedestrian, rider}`.
pub fn primary_map(label: &LabelMap, taxonomy: &TaxonomyPair) -> Result<RemappedLabel> {
    let mut out = LabelMap::filled(label.height, label.width, IGNORE);
    let mut provenance = vec![LabelProvenance::Ignored; label.len()];
    for (p, &v) in label.data.iter().enumerate() {
        match route(taxonomy, v)? {
            Route::Ignore => {}
            Route::Fixed(t) => {
                out.data[p] = t;
                provenance[p] = LabelProvenance::ConsistentMap;
            }
            Route::Choose(candidates) => {
                out.data[p] = candidates[0];
                provenance[p] = LabelProvenance::PrimaryMap;
            }
        }
    }
    Ok(RemappedLabel { label: out, provenance })
}

/// Consistent classes mapped, every inconsistent class dropped to IGNORE.
pub fn consistent_only(label: &LabelMap, taxonomy: &TaxonomyPair) -> Result<RemappedLabel> {
    let mut out = LabelMap::filled(label.height, label.width, IGNORE);
    let mut provenance = vec![LabelProvenance::Ignored; label.len()];
    for (p, &v) in label.data.iter().enumerate() {
        if let Route::Fixed(t) = route(taxonomy, v)? {
            out.data[p] = t;
            provenance[p] = LabelProvenance::ConsistentMap;
        }
    }
    Ok(RemappedLabel { label: out, provenance })
}

/// Mean cross-entropy against a remapped label; 0 (and `is_empty`) when
/// every pixel is IGNORE.
pub fn slm_loss(student_logits: &Tensor3, remapped: &RemappedLabel) -> Result<CrossEntropy> {
    cross_entropy(student_logits, &remapped.label, None)
}

/// Same contract as [`slm_loss`].
pub fn rl_loss(student_logits: &Tensor3, remapped: &RemappedLabel) -> Result<CrossEntropy> {
    cross_entropy(student_logits, &remapped.label, None)
}

const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Pseudo-label relabeling. An inconsistent pixel takes the teacher argmax
/// when `max > delta` and the argmax is one of its candidates, else IGNORE.
pub fn relabel(label: &LabelMap, teacher_probs: &Tensor3, taxonomy: &TaxonomyPair, delta: f64) -> Result<RemappedLabel> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("relabel threshold {delta} outside (0, 1)")));
    }
    if teacher_probs.height != label.height || teacher_probs.width != label.width {
        return Err(Error::Shape(format!(
            "teacher probabilities {}x{} vs label {}x{}",
            teacher_probs.height, teacher_probs.width, label.height, label.width
        )));
    }
    let classes = taxonomy.target().count();
    if teacher_probs.channels != classes {
        return Err(Error::Shape(format!(
            "{} probability channels for {classes} target classes",
            teacher_probs.channels
        )));
    }
    let plane = teacher_probs.plane();
    let mut out = LabelMap::filled(label.height, label.width, IGNORE);
    let mut provenance = vec![LabelProvenance::Ignored; label.len()];
    for (p, &v) in label.data.iter().enumerate() {
        let (mut best, mut best_p, mut sum) = (0, f64::NEG_INFINITY, 0.0);
        for k in 0..classes {
            let q = teacher_probs.data[k * plane + p];
            sum += q;
            if q > best_p {
                best_p = q;
                best = k;
            }
        }
        if !((sum - 1.0).abs() <= NORMALIZATION_TOLERANCE) {
            return Err(Error::InvalidArgument(format!(
                "teacher probabilities at pixel ({}, {}) sum to {sum}",
                p / label.width,
                p % label.width
            )));
        }
        match route(taxonomy, v)? {
            Route::Ignore => {}
            Route::Fixed(t) => {
                out.data[p] = t;
                provenance[p] = LabelProvenance::ConsistentMap;
            }
            Route::Choose(candidates) => {
                let argmax = (best + 1) as ClassIndex;
                if best_p > delta && candidates.contains(&argmax) {
                    out.data[p] = argmax;
                    provenance[p] = LabelProvenance::RlRelabeled;
                } else {
                    provenance[p] = LabelProvenance::RlFallbackIgnore;
                }
            }
        }
    }
    Ok(RemappedLabel { label: out, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{OpenVariant, Scenario, ScenarioKind};
    use crate::rng;
    use proptest::prelude::*;

    // source: road 1, building 2, vegetation 3, person 4
    // target: road 1, building 2, vegetation 3, terrain 4, pedestrian 5, rider 6
    fn c2f() -> TaxonomyPair {
        Scenario::new(ScenarioKind::C2f, OpenVariant::default()).taxonomy
    }

    fn probs_at(values: &[f64]) -> Tensor3 {
        Tensor3::from_vec(values.len(), 1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn slm_frequencies_are_uniform() {
        let tax = c2f();
        let n = 10_000;
        let label = LabelMap::filled(1, n, 4);
        let out = slm(&label, &tax, SlmMode::PerPixel, &mut rng::stream(11, "slm")).unwrap();
        let pedestrian = out.label.data.iter().filter(|&&c| c == 5).count() as f64 / n as f64;
        let rider = out.label.data.iter().filter(|&&c| c == 6).count() as f64 / n as f64;
        assert!((0.48..=0.52).contains(&pedestrian), "{pedestrian}");
        assert!((pedestrian + rider - 1.0).abs() < 1e-12);
        let bound = 3.0 * (0.25 / n as f64).sqrt();
        assert!((pedestrian - 0.5).abs() <= bound);
        assert!(out.provenance.iter().all(|&p| p == LabelProvenance::SlmSampled));
    }

    #[test]
    fn slm_is_fresh_per_call_and_reproducible_per_stream() {
        let tax = c2f();
        let label = LabelMap::filled(4, 4, 4);
        let mut r = rng::stream(1, "slm");
        let a = slm(&label, &tax, SlmMode::PerPixel, &mut r).unwrap();
        let b = slm(&label, &tax, SlmMode::PerPixel, &mut r).unwrap();
        assert_ne!(a.label, b.label);
        let again = slm(&label, &tax, SlmMode::PerPixel, &mut rng::stream(1, "slm")).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn slm_per_image_draws_once_per_class() {
        let tax = c2f();
        let label = LabelMap::from_rows(&[&[4, 4, 3, 3], &[4, 4, 1, 4]]);
        for seed in 0..20 {
            let out = slm(&label, &tax, SlmMode::PerImage, &mut rng::stream(seed, "slm")).unwrap();
            let person: Vec<_> = out
                .label
                .data
                .iter()
                .zip(&label.data)
                .filter(|(_, &s)| s == 4)
                .map(|(&t, _)| t)
                .collect();
            assert!(person.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn consistent_taxonomy_is_deterministic_renaming() {
        let tax = Scenario::new(ScenarioKind::Uda, OpenVariant::default()).taxonomy;
        let label = LabelMap::from_rows(&[&[1, 2, 0], &[3, 6, 5]]);
        let out = slm(&label, &tax, SlmMode::PerPixel, &mut rng::stream(0, "slm")).unwrap();
        for (p, &v) in label.data.iter().enumerate() {
            assert_eq!(out.label.data[p], tax.map_consistent(v).unwrap());
            let expected = if v == IGNORE {
                LabelProvenance::Ignored
            } else {
                LabelProvenance::ConsistentMap
            };
            assert_eq!(out.provenance[p], expected);
        }
        let uniform = Tensor3::from_vec(6, 2, 3, vec![1.0 / 6.0; 36]).unwrap();
        assert_eq!(relabel(&label, &uniform, &tax, 0.9).unwrap(), out);
    }

    #[test]
    fn slm_invariants_hold() {
        let tax = c2f();
        let label = LabelMap::from_rows(&[&[1, 2, 3, 4], &[0, 4, 3, 2]]);
        let out = slm(&label, &tax, SlmMode::PerPixel, &mut rng::stream(3, "slm")).unwrap();
        for (p, &v) in label.data.iter().enumerate() {
            match out.provenance[p] {
                LabelProvenance::SlmSampled => assert!(tax.candidates(v).unwrap().contains(&out.label.data[p])),
                LabelProvenance::ConsistentMap => assert_eq!(out.label.data[p], tax.map_consistent(v).unwrap()),
                LabelProvenance::Ignored => assert_eq!(out.label.data[p], IGNORE),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn primary_map_takes_the_first_candidate() {
        let tax = c2f();
        let out = primary_map(&LabelMap::from_rows(&[&[1, 4, 3, 0]]), &tax).unwrap();
        assert_eq!(out.label.data, vec![1, 5, 3, 0]);
        assert_eq!(out.provenance[1], LabelProvenance::PrimaryMap);
        assert_eq!(out.provenance[0], LabelProvenance::ConsistentMap);
        assert_eq!(
            fallback_map(&LabelMap::from_rows(&[&[4]]), &tax, FallbackMapping::Ignore).unwrap().label.data,
            vec![0]
        );
    }

    #[test]
    fn consistent_only_drops_inconsistent_classes() {
        let tax = c2f();
        let out = consistent_only(&LabelMap::from_rows(&[&[1, 4, 3, 0]]), &tax).unwrap();
        assert_eq!(out.label.data, vec![1, 0, 0, 0]);
        assert_eq!(out.provenance[0], LabelProvenance::ConsistentMap);
        assert_eq!(out.provenance[1], LabelProvenance::Ignored);
    }

    #[test]
    fn unknown_class_is_an_error() {
        let tax = c2f();
        let label = LabelMap::from_rows(&[&[9]]);
        assert!(slm(&label, &tax, SlmMode::PerPixel, &mut rng::stream(0, "slm")).is_err());
        assert!(relabel(&label, &probs_at(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &tax, 0.5).is_err());
    }

    #[test]
    fn relabel_follows_threshold_and_membership() {
        let tax = c2f();
        let person = LabelMap::from_rows(&[&[4]]);
        // road .05, pedestrian .70, rider .20, vegetation .05
        let p = probs_at(&[0.05, 0.0, 0.05, 0.0, 0.70, 0.20]);
        let out = relabel(&person, &p, &tax, 0.5).unwrap();
        assert_eq!(out.label.data, vec![5]);
        assert_eq!(out.provenance, vec![LabelProvenance::RlRelabeled]);

        let out = relabel(&person, &p, &tax, 0.75).unwrap();
        assert_eq!(out.label.data, vec![IGNORE]);
        assert_eq!(out.provenance, vec![LabelProvenance::RlFallbackIgnore]);

        let road = probs_at(&[0.95, 0.0, 0.0, 0.0, 0.03, 0.02]);
        assert_eq!(relabel(&person, &road, &tax, 0.5).unwrap().label.data, vec![IGNORE]);

        // strict inequality
        let edge = probs_at(&[0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        assert_eq!(relabel(&person, &edge, &tax, 0.5).unwrap().label.data, vec![IGNORE]);
    }

    #[test]
    fn relabel_rejects_unnormalised_rows_and_bad_delta() {
        let tax = c2f();
        let label = LabelMap::from_rows(&[&[4]]);
        assert!(relabel(&label, &probs_at(&[0.5, 0.0, 0.0, 0.0, 0.6, 0.0]), &tax, 0.5).is_err());
        let ok = probs_at(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(relabel(&label, &ok, &tax, 0.0).is_err());
        assert!(relabel(&label, &ok, &tax, 1.0).is_err());
        assert!(relabel(&label, &probs_at(&[1.0, 0.0]), &tax, 0.5).is_err());
    }

    #[test]
    fn slm_loss_matches_cross_entropy_contract() {
        let tax = c2f();
        let remapped = slm(&LabelMap::from_rows(&[&[1, 2], &[3, 1]]), &tax, SlmMode::PerPixel, &mut rng::stream(0, "slm"))
            .unwrap();
        let ce = slm_loss(&Tensor3::zeros(6, 2, 2), &remapped).unwrap();
        assert!((ce.value - 6f64.ln()).abs() < 1e-12);
        let empty = RemappedLabel {
            label: LabelMap::filled(2, 2, IGNORE),
            provenance: vec![LabelProvenance::Ignored; 4],
        };
        assert!(rl_loss(&Tensor3::zeros(6, 2, 2), &empty).unwrap().is_empty());
    }

    fn normalized_probs(raw: Vec<f64>, pixels: usize) -> Tensor3 {
        let mut data = raw;
        for p in 0..pixels {
            let s: f64 = (0..6).map(|k| data[k * pixels + p]).sum();
            for k in 0..6 {
                data[k * pixels + p] /= s;
            }
        }
        Tensor3::from_vec(6, 1, pixels, data).unwrap()
    }

    proptest! {
        #[test]
        fn raising_delta_never_adds_labels(
            sources in prop::collection::vec(0u16..=4, 12),
            raw in prop::collection::vec(0.01f64..1.0, 72),
            d1 in 0.05f64..0.95,
            d2 in 0.05f64..0.95,
        ) {
            let tax = c2f();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let label = LabelMap { height: 1, width: 12, data: sources };
            let probs = normalized_probs(raw, 12);
            let a = relabel(&label, &probs, &tax, lo).unwrap();
            let b = relabel(&label, &probs, &tax, hi).unwrap();
            for p in 0..12 {
                if b.label.data[p] != IGNORE {
                    prop_assert_eq!(a.label.data[p], b.label.data[p]);
                }
            }
        }
    }
}
