//! Segmentation metrics: confusion matrices, per-class IoU, mIoU over
//! declared class subsets, plus feature projections, plots and ablation
//! tables built on top of them.

mod plot;
mod projection;
mod report;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use plot::{bar_chart_svg, line_chart_svg, scatter_svg, Series};
pub use projection::{project_features, silhouette, ProjectedPoint};
pub use report::{aggregate, render_table, write_table_csv, AblationRow, RunSummary};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::SegmentationModel;
use crate::tensor::{ClassIndex, LabelMap, Tensor3, IGNORE};

/// Rows are ground truth, columns predictions; IGNORE never enters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// Row-major `classes × classes` counts.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: ClassIndex, predicted: ClassIndex) -> u64 {
        self.counts[(usize::from(truth) - 1) * self.classes + usize::from(predicted) - 1]
    }

    /// Count every pixel whose ground truth is labeled.
    pub fn accumulate(&mut self, truth: &LabelMap, predicted: &LabelMap) -> Result<()> {
        if truth.height != predicted.height || truth.width != predicted.width {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                predicted.height, predicted.width, truth.height, truth.width
            )));
        }
        for (&t, &p) in truth.data.iter().zip(&predicted.data) {
            if t == IGNORE {
                continue;
            }
            let (ti, pi) = (usize::from(t), usize::from(p));
            if ti > self.classes || pi == 0 || pi > self.classes {
                return Err(Error::Class {
                    index: if ti > self.classes { t } else { p },
                    reason: format!("outside the {} evaluated classes", self.classes),
                });
            }
            self.counts[(ti - 1) * self.classes + pi - 1] += 1;
        }
        Ok(())
    }

    pub fn merge(mut self, other: &ConfusionMatrix) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    /// Ground-truth pixel count of each class.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }
}

/// `TP / (TP + FP + FN)` per class; `None` where the union is empty.
pub fn iou(confusion: &ConfusionMatrix) -> Vec<Option<f64>> {
    let n = confusion.classes;
    (0..n)
        .map(|c| {
            let tp = confusion.counts[c * n + c];
            let row: u64 = confusion.counts[c * n..(c + 1) * n].iter().sum();
            let col: u64 = (0..n).map(|r| confusion.counts[r * n + c]).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect()
}

/// Unweighted mean of the defined IoUs among `classes` (1-based).
pub fn mean_iou(per_class: &[Option<f64>], classes: impl IntoIterator<Item = ClassIndex>) -> Option<f64> {
    let defined: Vec<f64> = classes
        .into_iter()
        .filter_map(|c| per_class.get(usize::from(c).wrapping_sub(1)).copied().flatten())
        .collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub name: String,
    pub classes: Vec<ClassIndex>,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub subsets: Vec<SubsetScore>,
    pub confusion: ConfusionMatrix,
    pub samples: usize,
}

impl EvalReport {
    pub fn from_confusion(
        confusion: ConfusionMatrix,
        class_names: Vec<String>,
        subsets: &[(String, Vec<ClassIndex>)],
        samples: usize,
    ) -> Self {
        let per_class_iou = iou(&confusion);
        let all = 1..=confusion.classes as ClassIndex;
        EvalReport {
            miou: mean_iou(&per_class_iou, all),
            subsets: subsets
                .iter()
                .map(|(name, classes)| SubsetScore {
                    name: name.clone(),
                    classes: classes.clone(),
                    miou: mean_iou(&per_class_iou, classes.iter().copied()),
                })
                .collect(),
            per_class_iou,
            class_names,
            confusion,
            samples,
        }
    }

    pub fn subset(&self, name: &str) -> Option<f64> {
        self.subsets.iter().find(|s| s.name == name).and_then(|s| s.miou)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(Error::json(path))?;
        std::fs::write(path, text).map_err(Error::io(path))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(Error::json(path))
    }

    /// One row per class plus summary rows; undefined IoUs are written `n/a`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["class", "name", "iou"])?;
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        for (i, (name, v)) in self.class_names.iter().zip(&self.per_class_iou).enumerate() {
            w.write_record([(i + 1).to_string(), name.clone(), fmt(*v)])?;
        }
        w.write_record(["all".to_string(), "miou".to_string(), fmt(self.miou)])?;
        for s in &self.subsets {
            w.write_record([s.name.clone(), format!("miou_{}", s.name), fmt(s.miou)])?;
        }
        w.flush().map_err(Error::io(path))
    }
}

/// Nearest-neighbor resize of a label map.
pub fn resize_nearest(label: &LabelMap, height: usize, width: usize) -> LabelMap {
    if label.height == height && label.width == width {
        return label.clone();
    }
    let mut out = LabelMap::filled(height, width, IGNORE);
    for y in 0..height {
        let sy = (y * label.height) / height;
        for x in 0..width {
            let sx = (x * label.width) / width;
            out.data[y * width + x] = label.data[sy * label.width + sx];
        }
    }
    out
}

/// Per-pixel argmax of logits (1-based, ties to the lowest class).
pub fn argmax_label(logits: &Tensor3) -> LabelMap {
    let plane = logits.plane();
    let mut out = LabelMap::filled(logits.height, logits.width, IGNORE);
    for p in 0..plane {
        let mut best = 0;
        for k in 1..logits.channels {
            if logits.data[k * plane + p] > logits.data[best * plane + p] {
                best = k;
            }
        }
        out.data[p] = (best + 1) as ClassIndex;
    }
    out
}

pub fn predict(model: &SegmentationModel, image: &Tensor3) -> Result<LabelMap> {
    Ok(argmax_label(&model.forward(image)?.0))
}

/// Confusion over a split, accumulated in parallel and merged in order.
pub fn evaluate(
    model: &SegmentationModel,
    samples: &[Sample],
    class_names: &[String],
    subsets: &[(String, Vec<ClassIndex>)],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let classes = model.num_classes();
    if class_names.len() != classes {
        return Err(Error::Shape(format!(
            "{} class names for a {classes}-class model",
            class_names.len()
        )));
    }
    let partial: Vec<ConfusionMatrix> = samples
        .par_iter()
        .map(|s| {
            let pred = predict(model, &s.image)?;
            let pred = resize_nearest(&pred, s.label.height, s.label.width);
            let mut m = ConfusionMatrix::new(classes);
            m.accumulate(&s.label, &pred)?;
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let confusion = partial
        .iter()
        .fold(ConfusionMatrix::new(classes), |acc, m| acc.merge(m));
    Ok(EvalReport::from_confusion(confusion, class_names.to_vec(), subsets, samples.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DomainTag;
    use crate::model::{Architecture, ConvSpec};
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn hand_case() {
        let truth = LabelMap::from_rows(&[&[1, 1], &[2, 2]]);
        let pred = LabelMap::from_rows(&[&[1, 2], &[2, 2]]);
        let mut m = ConfusionMatrix::new(2);
        m.accumulate(&truth, &pred).unwrap();
        let ious = iou(&m);
        assert_eq!(ious, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(m.row_sums(), vec![2, 2]);
    }

    #[test]
    fn perfect_disjoint_and_absent() {
        let truth = LabelMap::from_rows(&[&[1, 2, 0]]);
        let mut m = ConfusionMatrix::new(3);
        m.accumulate(&truth, &LabelMap::from_rows(&[&[1, 2, 3]])).unwrap();
        assert_eq!(iou(&m), vec![Some(1.0), Some(1.0), None]);
        assert_eq!(mean_iou(&iou(&m), 1..=3), Some(1.0));
        let mut d = ConfusionMatrix::new(2);
        d.accumulate(&LabelMap::from_rows(&[&[1, 1]]), &LabelMap::from_rows(&[&[2, 2]])).unwrap();
        assert_eq!(iou(&d), vec![Some(0.0), Some(0.0)]);
        assert_eq!(mean_iou(&[None, None], 1..=2), None);
    }

    #[test]
    fn subset_mean_is_unweighted() {
        let ious = vec![Some(0.2), None, Some(0.6), Some(1.0)];
        assert!((mean_iou(&ious, [1, 2, 3]).unwrap() - 0.4).abs() < 1e-15);
        let report = EvalReport::from_confusion(
            ConfusionMatrix {
                classes: 2,
                counts: vec![3, 1, 0, 4],
            },
            vec!["a".into(), "b".into()],
            &[("all".into(), vec![1, 2])],
            1,
        );
        assert_eq!(report.subset("all"), report.miou);
    }

    fn naive(truth: &[LabelMap], pred: &[LabelMap], classes: usize) -> Vec<u64> {
        let mut counts = vec![0; classes * classes];
        for t in 1..=classes {
            for p in 1..=classes {
                for (lt, lp) in truth.iter().zip(pred) {
                    for y in 0..lt.height {
                        for x in 0..lt.width {
                            if usize::from(lt.get(y, x)) == t && usize::from(lp.get(y, x)) == p {
                                counts[(t - 1) * classes + p - 1] += 1;
                            }
                        }
                    }
                }
            }
        }
        counts
    }

    #[test]
    fn evaluate_matches_naive_counting() {
        let arch = Architecture {
            in_channels: 3,
            encoder: vec![ConvSpec::new(4, 3, 2, true), ConvSpec::new(4, 3, 1, false)],
            decoder_input_relu: true,
            decoder: vec![ConvSpec::new(3, 1, 1, false)],
        };
        let mut r = rng::stream(8, "eval-test");
        let model = SegmentationModel::init(arch, &mut r).unwrap();
        let samples: Vec<Sample> = (0..6)
            .map(|i| Sample {
                id: format!("s{i}"),
                domain: DomainTag::TargetTest,
                image: Tensor3::from_vec(3, 8, 8, (0..192).map(|_| r.random::<f64>()).collect()).unwrap(),
                label: LabelMap {
                    height: 8,
                    width: 8,
                    data: (0..64).map(|_| r.random_range(0..=3u16)).collect(),
                },
            })
            .collect();
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let report = evaluate(&model, &samples, &names, &[]).unwrap();
        let preds: Vec<LabelMap> = samples.iter().map(|s| predict(&model, &s.image).unwrap()).collect();
        let truths: Vec<LabelMap> = samples.iter().map(|s| s.label.clone()).collect();
        assert_eq!(report.confusion.counts, naive(&truths, &preds, 3));
        assert_eq!(report, evaluate(&model, &samples, &names, &[]).unwrap());
        assert!(evaluate(&model, &[], &names, &[]).is_err());
    }

    #[test]
    fn nearest_resize_replicates_blocks() {
        let small = LabelMap::from_rows(&[&[1, 2], &[3, 4]]);
        let big = resize_nearest(&small, 4, 4);
        assert_eq!(big.data, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }

    #[test]
    fn report_files_round_trip() {
        let report = EvalReport::from_confusion(
            ConfusionMatrix {
                classes: 2,
                counts: vec![3, 1, 0, 0],
            },
            vec!["a".into(), "b".into()],
            &[("inconsistent".into(), vec![2])],
            2,
        );
        let dir = tempfile::tempdir().unwrap();
        report.save_json(&dir.path().join("r.json")).unwrap();
        assert_eq!(EvalReport::load_json(&dir.path().join("r.json")).unwrap(), report);
        report.save_csv(&dir.path().join("r.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(text.contains("2,b,0.000000"));
        assert!(text.contains("inconsistent,miou_inconsistent,0.000000"));
    }
}
