//! Pixel-wise contrastive learning over embeddings of the mixed sample,
//! guided by its labels, with an optional per-pixel teacher-confidence
//! weighting that mutes uncertain pixels.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TeacherModel;
use crate::rng::Rng;
use crate::tensor::{ClassIndex, LabelMap, Tensor3, IGNORE};

/// Shape of the per-anchor term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// `−log Σ_p r_p`: one log around the sum over positives.
    #[default]
    Literal,
    /// `−(1/|P|) Σ_p log r_p`, the usual supervised-contrastive form.
    MeanOfLogs,
}

/// Where the positives' confidence enters the weighted loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveWeighting {
    /// Anchor term scaled by `û(v)` times the mean `û` of its positives.
    /// Uniform confidence `u` scales the loss by exactly `u²`.
    #[default]
    AnchorProduct,
    /// Each positive's ratio is scaled by its own `û` inside the sum, and the
    /// anchor term by `û(v)`.
    InsideSum,
}

/// Selected pixels and their pair structure. Index sets refer to `vectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPairBatch {
    /// Raw (unnormalized) embedding of each selected pixel.
    pub vectors: Vec<Vec<f64>>,
    /// Row-major position of each vector in the embedding grid.
    pub positions: Vec<usize>,
    pub classes: Vec<ClassIndex>,
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
    pub temperature: f64,
    /// Teacher confidence per vector, when available.
    pub weights: Option<Vec<f64>>,
}

impl PixelPairBatch {
    pub fn empty(temperature: f64) -> Self {
        PixelPairBatch {
            vectors: Vec::new(),
            positions: Vec::new(),
            classes: Vec::new(),
            anchors: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
            temperature,
            weights: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Every selected pixel is an anchor; positives share its class, negatives do not.
    pub fn all_pairs(vectors: Vec<Vec<f64>>, classes: Vec<ClassIndex>, temperature: f64) -> Self {
        let n = vectors.len();
        let (positives, negatives) = (0..n)
            .map(|a| {
                let pos = (0..n).filter(|&j| j != a && classes[j] == classes[a]).collect();
                let neg = (0..n).filter(|&j| classes[j] != classes[a]).collect();
                (pos, neg)
            })
            .unzip();
        PixelPairBatch {
            positions: (0..n).collect(),
            anchors: (0..n).collect(),
            vectors,
            classes,
            positives,
            negatives,
            temperature,
            weights: None,
        }
    }

    /// Read each selected position's vector out of an embedding map.
    pub fn gather(&mut self, embeddings: &Tensor3) -> Result<()> {
        let plane = embeddings.plane();
        if let Some(&p) = self.positions.iter().find(|&&p| p >= plane) {
            return Err(Error::Shape(format!("position {p} outside a {plane}-pixel embedding map")));
        }
        self.vectors = self
            .positions
            .iter()
            .map(|&p| (0..embeddings.channels).map(|d| embeddings.data[d * plane + p]).collect())
            .collect();
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.temperature)));
        }
        let n = self.vectors.len();
        let dim = self.vectors.first().map_or(0, Vec::len);
        let structural = self.vectors.iter().any(|v| v.len() != dim)
            || self.positions.len() != n
            || self.classes.len() != n
            || self.positives.len() != self.anchors.len()
            || self.negatives.len() != self.anchors.len()
            || self.weights.as_ref().is_some_and(|w| w.len() != n)
            || self
                .anchors
                .iter()
                .chain(self.positives.iter().flatten())
                .chain(self.negatives.iter().flatten())
                .any(|&i| i >= n);
        if structural {
            return Err(Error::Shape("inconsistent pixel pair batch".into()));
        }
        Ok(())
    }
}

/// Up to `per_class_cap` pixels per class present in the (downsampled)
/// label, all of them anchors. Fewer than two classes gives an empty batch.
pub fn mine_pairs(
    embeddings: &Tensor3,
    mixed_label: &LabelMap,
    per_class_cap: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<PixelPairBatch> {
    let mut batch = select_pairs(mixed_label, embeddings.height, embeddings.width, per_class_cap, temperature, rng)?;
    batch.gather(embeddings)?;
    Ok(batch)
}

/// The pair structure of [`mine_pairs`] without embedding values; fill them
/// with [`PixelPairBatch::gather`].
pub fn select_pairs(
    mixed_label: &LabelMap,
    embed_height: usize,
    embed_width: usize,
    per_class_cap: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<PixelPairBatch> {
    if per_class_cap == 0 {
        return Err(Error::InvalidArgument("anchors per class must be at least 1".into()));
    }
    let label = if mixed_label.height == embed_height && mixed_label.width == embed_width {
        mixed_label.clone()
    } else {
        let factor = mixed_label.height / embed_height.max(1);
        if factor == 0 || mixed_label.height != factor * embed_height || mixed_label.width != factor * embed_width {
            return Err(Error::Shape(format!(
                "label {}x{} is not an integer multiple of embeddings {embed_height}x{embed_width}",
                mixed_label.height, mixed_label.width
            )));
        }
        mixed_label.downsample(factor)?
    };
    let classes = label.present_classes();
    if classes.len() < 2 {
        return Ok(PixelPairBatch::empty(temperature));
    }
    let plane = embed_height * embed_width;
    let mut positions = Vec::new();
    let mut owners = Vec::new();
    for &c in &classes {
        let members: Vec<usize> = (0..plane).filter(|&p| label.data[p] == c).collect();
        let chosen: Vec<usize> = if members.len() > per_class_cap {
            let mut picks: Vec<usize> = index::sample(rng, members.len(), per_class_cap)
                .into_iter()
                .map(|i| members[i])
                .collect();
            picks.sort_unstable();
            picks
        } else {
            members
        };
        owners.extend(std::iter::repeat_n(c, chosen.len()));
        positions.extend(chosen);
    }
    let mut batch = PixelPairBatch::all_pairs(vec![Vec::new(); positions.len()], owners, temperature);
    batch.positions = positions;
    debug_assert!(batch.classes.iter().all(|&c| c != IGNORE));
    Ok(batch)
}

/// Teacher max-probability on the mixed image, sampled onto the embedding grid.
pub fn uncertainty_map(teacher: &TeacherModel, mixed_image: &Tensor3) -> Result<Vec<f64>> {
    let factor = teacher.arch().downsample_factor();
    Ok(teacher.predict_pseudo(mixed_image)?.confidence_downsampled(factor))
}

/// Attach per-pixel confidences (indexed by grid position) to a batch.
pub fn with_uncertainty(mut batch: PixelPairBatch, uncertainty: &[f64]) -> Result<PixelPairBatch> {
    if let Some(&p) = batch.positions.iter().find(|&&p| p >= uncertainty.len()) {
        return Err(Error::Shape(format!("uncertainty map has no entry for position {p}")));
    }
    batch.weights = Some(batch.positions.iter().map(|&p| uncertainty[p]).collect());
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    /// Anchors with at least one positive; the normalizer.
    pub anchors: usize,
    /// Gradient w.r.t. each raw vector of the batch.
    pub grad: Vec<Vec<f64>>,
}

impl ContrastiveLoss {
    /// Scatter the per-vector gradient into an embedding-shaped tensor.
    pub fn grad_tensor(&self, batch: &PixelPairBatch, channels: usize, height: usize, width: usize) -> Tensor3 {
        let mut out = Tensor3::zeros(channels, height, width);
        let plane = height * width;
        for (g, &p) in self.grad.iter().zip(&batch.positions) {
            for (d, v) in g.iter().enumerate() {
                out.data[d * plane + p] += v;
            }
        }
        out
    }
}

/// Plain contrastive loss; confidences, if present, are not used.
pub fn ct_loss(batch: &PixelPairBatch, form: ContrastiveForm) -> Result<ContrastiveLoss> {
    contrastive(batch, form, None)
}

/// Confidence-weighted contrastive loss. Equals [`ct_loss`] when every weight is 1.
pub fn uct_loss(batch: &PixelPairBatch, form: ContrastiveForm, weighting: PositiveWeighting) -> Result<ContrastiveLoss> {
    if batch.weights.is_none() && !batch.is_empty() {
        return Err(Error::InvalidArgument("uncertainty-weighted loss needs confidence weights".into()));
    }
    contrastive(batch, form, Some(weighting))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

fn contrastive(batch: &PixelPairBatch, form: ContrastiveForm, weighting: Option<PositiveWeighting>) -> Result<ContrastiveLoss> {
    batch.validate()?;
    let dim = batch.vectors.first().map_or(0, Vec::len);
    let mut grad_n = vec![vec![0.0; dim]; batch.vectors.len()];
    let norms: Vec<f64> = batch.vectors.iter().map(|v| dot(v, v).sqrt().max(1e-12)).collect();
    let unit: Vec<Vec<f64>> = batch
        .vectors
        .iter()
        .zip(&norms)
        .map(|(v, n)| v.iter().map(|x| x / n).collect())
        .collect();
    let tau = batch.temperature;
    let u = |i: usize| batch.weights.as_ref().map_or(1.0, |w| w[i]);

    let mut total = 0.0;
    let mut counted = 0usize;
    // (index, d loss / d score) for the current anchor
    let mut score_grads: Vec<(usize, f64)> = Vec::new();
    for (slot, &a) in batch.anchors.iter().enumerate() {
        let (pos, neg) = (&batch.positives[slot], &batch.negatives[slot]);
        if pos.is_empty() {
            continue;
        }
        counted += 1;
        let (anchor_weight, inner): (f64, Vec<f64>) = match weighting {
            None => (1.0, vec![1.0; pos.len()]),
            Some(PositiveWeighting::AnchorProduct) => {
                let mean = pos.iter().map(|&p| u(p)).sum::<f64>() / pos.len() as f64;
                (u(a) * mean, vec![1.0; pos.len()])
            }
            Some(PositiveWeighting::InsideSum) => (u(a), pos.iter().map(|&p| u(p)).collect()),
        };
        if anchor_weight == 0.0 {
            continue;
        }
        let s_pos: Vec<f64> = pos.iter().map(|&p| dot(&unit[a], &unit[p]) / tau).collect();
        let s_neg: Vec<f64> = neg.iter().map(|&n| dot(&unit[a], &unit[n]) / tau).collect();
        let lse_neg = s_neg.iter().copied().fold(f64::NEG_INFINITY, log_add_exp);
        // log of each positive's denominator, and its ratio
        let log_den: Vec<f64> = s_pos.iter().map(|&s| log_add_exp(s, lse_neg)).collect();
        let ratios: Vec<f64> = s_pos.iter().zip(&log_den).map(|(s, d)| (s - d).exp()).collect();

        score_grads.clear();
        let term = match form {
            ContrastiveForm::Literal => {
                let big_r: f64 = inner.iter().zip(&ratios).map(|(w, r)| w * r).sum();
                if big_r <= 0.0 {
                    counted -= 1;
                    continue;
                }
                for (k, &p) in pos.iter().enumerate() {
                    score_grads.push((p, -inner[k] * ratios[k] * (1.0 - ratios[k]) / big_r));
                }
                for (k, &n) in neg.iter().enumerate() {
                    let g: f64 = (0..pos.len())
                        .map(|j| inner[j] * ratios[j] * (s_neg[k] - log_den[j]).exp())
                        .sum::<f64>()
                        / big_r;
                    score_grads.push((n, g));
                }
                -big_r.ln()
            }
            ContrastiveForm::MeanOfLogs => {
                let m = pos.len() as f64;
                for (k, &p) in pos.iter().enumerate() {
                    score_grads.push((p, -inner[k] * (1.0 - ratios[k]) / m));
                }
                for (k, &n) in neg.iter().enumerate() {
                    let g: f64 = (0..pos.len()).map(|j| inner[j] * (s_neg[k] - log_den[j]).exp()).sum::<f64>() / m;
                    score_grads.push((n, g));
                }
                -(0..pos.len()).map(|j| inner[j] * (s_pos[j] - log_den[j])).sum::<f64>() / m
            }
        };
        total += anchor_weight * term;
        for &(j, g) in &score_grads {
            let scale = anchor_weight * g / tau;
            for d in 0..dim {
                grad_n[a][d] += scale * unit[j][d];
                grad_n[j][d] += scale * unit[a][d];
            }
        }
    }
    if counted == 0 {
        return Ok(ContrastiveLoss {
            value: 0.0,
            anchors: 0,
            grad: vec![vec![0.0; dim]; batch.vectors.len()],
        });
    }
    let norm = 1.0 / counted as f64;
    // back through v / |v|
    let grad = grad_n
        .iter()
        .zip(&unit)
        .zip(&norms)
        .map(|((g, n), len)| {
            let radial = dot(g, n);
            g.iter().zip(n).map(|(gi, ni)| norm * (gi - radial * ni) / len).collect()
        })
        .collect();
    Ok(ContrastiveLoss {
        value: total * norm,
        anchors: counted,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{compare, numeric_gradient};
    use crate::rng;
    use rand::Rng as _;

    /// Independent evaluation straight from the definition: every pixel is
    /// an anchor, every other same-class pixel a positive, every other-class
    /// pixel a negative.
    fn oracle(vectors: &[Vec<f64>], classes: &[u16], tau: f64, u: Option<&[f64]>, form: ContrastiveForm) -> f64 {
        let unit: Vec<Vec<f64>> = vectors
            .iter()
            .map(|v| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        let sim = |i: usize, j: usize| (0..unit[i].len()).map(|d| unit[i][d] * unit[j][d]).sum::<f64>() / tau;
        let w = |i: usize| u.map_or(1.0, |u| u[i]);
        let n = vectors.len();
        let mut sum = 0.0;
        let mut anchors = 0;
        for a in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&j| j != a && classes[j] == classes[a]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let neg_mass: f64 = (0..n).filter(|&j| classes[j] != classes[a]).map(|j| sim(a, j).exp()).sum();
            let ratio = |p: usize| sim(a, p).exp() / (sim(a, p).exp() + neg_mass);
            let term = match form {
                ContrastiveForm::Literal => -pos.iter().map(|&p| ratio(p)).sum::<f64>().ln(),
                ContrastiveForm::MeanOfLogs => -pos.iter().map(|&p| ratio(p).ln()).sum::<f64>() / pos.len() as f64,
            };
            let pos_mean = pos.iter().map(|&p| w(p)).sum::<f64>() / pos.len() as f64;
            sum += w(a) * pos_mean * term;
        }
        if anchors == 0 {
            0.0
        } else {
            sum / anchors as f64
        }
    }

    fn random_case(seed: u64, n: usize, dim: usize, n_classes: u16) -> (Vec<Vec<f64>>, Vec<u16>, Vec<f64>) {
        let mut r = rng::stream(seed, "ct-test");
        let vectors = (0..n).map(|_| (0..dim).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).collect();
        let classes = (0..n).map(|_| r.random_range(1..=n_classes)).collect();
        let u = (0..n).map(|_| 0.05 + 0.95 * r.random::<f64>()).collect();
        (vectors, classes, u)
    }

    #[test]
    fn single_anchor_hand_value() {
        let batch = PixelPairBatch {
            vectors: vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            positions: vec![0, 1, 2],
            classes: vec![1, 1, 2],
            anchors: vec![0],
            positives: vec![vec![1]],
            negatives: vec![vec![2]],
            temperature: 1.0,
            weights: None,
        };
        let loss = ct_loss(&batch, ContrastiveForm::Literal).unwrap();
        assert!((loss.value - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((loss.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn matches_brute_force_oracle() {
        for seed in 0..20 {
            let (vectors, classes, u) = random_case(seed, 3 + (seed as usize % 14), 4, 3);
            for form in [ContrastiveForm::Literal, ContrastiveForm::MeanOfLogs] {
                let batch = PixelPairBatch::all_pairs(vectors.clone(), classes.clone(), 0.3);
                let ct = ct_loss(&batch, form).unwrap().value;
                assert!((ct - oracle(&vectors, &classes, 0.3, None, form)).abs() < 1e-9);
                let weighted = PixelPairBatch {
                    weights: Some(u.clone()),
                    ..batch
                };
                let uct = uct_loss(&weighted, form, PositiveWeighting::AnchorProduct).unwrap().value;
                assert!((uct - oracle(&vectors, &classes, 0.3, Some(&u), form)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_embeddings_give_count_ratio() {
        // classes: 3 of A, 2 of B
        let classes = vec![1, 1, 1, 2, 2];
        let batch = PixelPairBatch::all_pairs(vec![vec![0.3, 0.4]; 5], classes, 0.1);
        let loss = ct_loss(&batch, ContrastiveForm::Literal).unwrap().value;
        let a = -(2.0f64 / 3.0).ln(); // |P| = 2, |N| = 2
        let b = -(1.0f64 / 4.0).ln(); // |P| = 1, |N| = 3
        assert!((loss - (3.0 * a + 2.0 * b) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn large_temperature_washes_out_similarities() {
        let vectors = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let batch = PixelPairBatch::all_pairs(vectors, vec![1, 1, 2], 1e6);
        let loss = ct_loss(&batch, ContrastiveForm::Literal).unwrap();
        // two anchors with |P| = 1, |N| = 1
        assert!((loss.value - 2f64.ln()).abs() < 1e-5);
        assert_eq!(loss.anchors, 2);
    }

    #[test]
    fn empty_sets() {
        let only_pos = PixelPairBatch::all_pairs(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1, 1], 0.1);
        assert!(ct_loss(&only_pos, ContrastiveForm::Literal).unwrap().value.abs() < 1e-15);
        let no_pos = PixelPairBatch::all_pairs(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1, 2], 0.1);
        let loss = ct_loss(&no_pos, ContrastiveForm::Literal).unwrap();
        assert_eq!((loss.value, loss.anchors), (0.0, 0));
        assert!(ct_loss(&PixelPairBatch::empty(0.1), ContrastiveForm::Literal).unwrap().value == 0.0);
        let mut bad = only_pos;
        bad.temperature = 0.0;
        assert!(ct_loss(&bad, ContrastiveForm::Literal).is_err());
    }

    #[test]
    fn uncertainty_weighting_conventions() {
        let (vectors, classes, _) = random_case(7, 12, 3, 3);
        let base = PixelPairBatch::all_pairs(vectors, classes, 0.2);
        let ct = ct_loss(&base, ContrastiveForm::Literal).unwrap().value;
        let with = |u: f64| PixelPairBatch {
            weights: Some(vec![u; base.vectors.len()]),
            ..base.clone()
        };
        for weighting in [PositiveWeighting::AnchorProduct, PositiveWeighting::InsideSum] {
            let one = uct_loss(&with(1.0), ContrastiveForm::Literal, weighting).unwrap().value;
            assert!((one - ct).abs() < 1e-9);
            assert_eq!(uct_loss(&with(0.0), ContrastiveForm::Literal, weighting).unwrap().value, 0.0);
        }
        let half = uct_loss(&with(0.5), ContrastiveForm::Literal, PositiveWeighting::AnchorProduct).unwrap().value;
        assert!((half - 0.25 * ct).abs() < 1e-12);
        // inside the log the positive weight becomes an additive shift
        let inside = uct_loss(&with(0.5), ContrastiveForm::Literal, PositiveWeighting::InsideSum).unwrap().value;
        assert!((inside - 0.5 * (ct + 2f64.ln())).abs() < 1e-12);
        assert!(uct_loss(&base, ContrastiveForm::Literal, PositiveWeighting::AnchorProduct).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let (vectors, classes, u) = random_case(3, 10, 4, 2);
        let batch = PixelPairBatch {
            weights: Some(u),
            ..PixelPairBatch::all_pairs(vectors, classes, 0.1)
        };
        let mut shuffled = batch.clone();
        let mut r = rng::stream(9, "perm");
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..batch.anchors.len()).collect();
        order.shuffle(&mut r);
        shuffled.anchors = order.iter().map(|&i| batch.anchors[i]).collect();
        shuffled.positives = order.iter().map(|&i| batch.positives[i].clone()).collect();
        shuffled.negatives = order.iter().map(|&i| batch.negatives[i].clone()).collect();
        for set in shuffled.positives.iter_mut().chain(shuffled.negatives.iter_mut()) {
            set.shuffle(&mut r);
        }
        for weighting in [PositiveWeighting::AnchorProduct, PositiveWeighting::InsideSum] {
            let a = uct_loss(&batch, ContrastiveForm::Literal, weighting).unwrap().value;
            let b = uct_loss(&shuffled, ContrastiveForm::Literal, weighting).unwrap().value;
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn separation_never_increases_the_loss() {
        // one anchor at angle 0 in the plane; move positives toward it and negatives away
        let at = |t: f64| vec![t.cos(), t.sin()];
        let batch_for = |pos: &[f64], neg: &[f64]| {
            let mut vectors = vec![at(0.0)];
            vectors.extend(pos.iter().map(|&t| at(t)));
            vectors.extend(neg.iter().map(|&t| at(t)));
            let np = pos.len();
            PixelPairBatch {
                positions: (0..vectors.len()).collect(),
                classes: (0..vectors.len()).map(|i| if i <= np { 1 } else { 2 }).collect(),
                anchors: vec![0],
                positives: vec![(1..=np).collect()],
                negatives: vec![(np + 1..vectors.len()).collect()],
                vectors,
                temperature: 0.5,
                weights: None,
            }
        };
        let pos = [0.9, 1.4, 2.0];
        let neg = [0.5, 1.0, 2.5];
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let s = step as f64 * 0.08;
            let p: Vec<f64> = pos.iter().map(|t| t * (1.0 - s)).collect();
            let n: Vec<f64> = neg.iter().map(|t| t + s * (std::f64::consts::PI - t)).collect();
            for form in [ContrastiveForm::Literal, ContrastiveForm::MeanOfLogs] {
                let v = ct_loss(&batch_for(&p, &n), form).unwrap().value;
                if form == ContrastiveForm::Literal {
                    assert!(v <= last + 1e-12);
                    last = v;
                }
            }
        }
    }

    fn check_gradient(batch: &PixelPairBatch, eval: impl Fn(&PixelPairBatch) -> ContrastiveLoss) {
        let analytic: Vec<f64> = eval(batch).grad.concat();
        let dim = batch.vectors[0].len();
        let flat: Vec<f64> = batch.vectors.concat();
        let numeric = numeric_gradient(
            |x| {
                let mut b = batch.clone();
                b.vectors = x.chunks(dim).map(<[f64]>::to_vec).collect();
                eval(&b).value
            },
            &flat,
            1e-5,
        );
        let report = compare(&analytic, &numeric, 1e-4);
        assert!(report.passes(0.95, 1e-3), "{report:?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (vectors, classes, u) = random_case(21, 14, 5, 3);
        let batch = PixelPairBatch {
            weights: Some(u),
            ..PixelPairBatch::all_pairs(vectors, classes, 0.1)
        };
        for form in [ContrastiveForm::Literal, ContrastiveForm::MeanOfLogs] {
            check_gradient(&batch, |b| ct_loss(b, form).unwrap());
            for weighting in [PositiveWeighting::AnchorProduct, PositiveWeighting::InsideSum] {
                check_gradient(&batch, |b| uct_loss(b, form, weighting).unwrap());
            }
        }
    }

    #[test]
    fn mining_respects_classes_and_cap() {
        let mut r = rng::stream(1, "mining");
        let emb = Tensor3::from_vec(2, 2, 4, (0..16).map(|i| i as f64 + 1.0).collect()).unwrap();
        let label = LabelMap::from_rows(&[&[1, 1, 1, 1, 2, 2, 0, 0], &[1, 1, 1, 1, 2, 2, 0, 0], &[1, 1, 1, 1, 1, 1, 2, 2], &[1, 1, 1, 1, 1, 1, 2, 2]]);
        let batch = mine_pairs(&emb, &label, 2, 0.1, &mut r).unwrap();
        // downsampled label: [[1,1,2,0],[1,1,1,2]]
        assert_eq!(batch.classes.iter().filter(|&&c| c == 1).count(), 2);
        assert_eq!(batch.classes.iter().filter(|&&c| c == 2).count(), 2);
        for (slot, &a) in batch.anchors.iter().enumerate() {
            assert!(batch.positives[slot].iter().all(|&p| batch.classes[p] == batch.classes[a] && p != a));
            assert!(batch.negatives[slot].iter().all(|&n| batch.classes[n] != batch.classes[a]));
        }
        assert!(!batch.positions.contains(&3));
        for (v, &p) in batch.vectors.iter().zip(&batch.positions) {
            assert_eq!(v, &vec![emb.data[p], emb.data[8 + p]]);
        }
    }

    #[test]
    fn mining_three_pixel_toy_and_degenerate_labels() {
        let mut r = rng::stream(0, "mining");
        let emb = Tensor3::from_vec(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let batch = mine_pairs(&emb, &LabelMap::from_rows(&[&[1, 1, 2]]), 64, 0.1, &mut r).unwrap();
        let a = batch.anchors.iter().position(|&i| batch.classes[i] == 1).unwrap();
        assert_eq!((batch.positives[a].len(), batch.negatives[a].len()), (1, 1));
        assert!(mine_pairs(&emb, &LabelMap::from_rows(&[&[2, 2, 0]]), 64, 0.1, &mut r).unwrap().is_empty());
        assert!(mine_pairs(&emb, &LabelMap::filled(1, 2, 1), 64, 0.1, &mut r).is_err());
    }

    #[test]
    fn grad_tensor_scatters_by_position() {
        let batch = PixelPairBatch::all_pairs(vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]], vec![1, 1, 2], 0.5);
        let loss = ct_loss(&batch, ContrastiveForm::Literal).unwrap();
        let t = loss.grad_tensor(&batch, 2, 1, 3);
        assert_eq!(t.get(1, 0, 2), loss.grad[2][1]);
    }
}
