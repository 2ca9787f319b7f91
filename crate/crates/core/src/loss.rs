//! Pixel-wise softmax cross-entropy over non-IGNORE pixels.

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor3, IGNORE};

/// In-place numerically stable softmax.
pub fn softmax_pixel(buf: &mut [f64]) {
    let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in buf.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in buf.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    /// Mean over labeled pixels; 0 when there are none.
    pub value: f64,
    pub labeled: usize,
    /// Gradient of `value` w.r.t. the logits.
    pub grad: Tensor3,
}

impl CrossEntropy {
    /// True when every pixel was IGNORE and the loss was defined as 0.
    pub fn is_empty(&self) -> bool {
        self.labeled == 0
    }
}

/// Mean cross-entropy of `logits` (`C × H × W`) against 1-based `labels`,
/// skipping IGNORE. `pixel_weights` (row-major, one per pixel) scale each
/// pixel's term; the mean still divides by the labeled-pixel count.
pub fn cross_entropy(logits: &Tensor3, labels: &LabelMap, pixel_weights: Option<&[f64]>) -> Result<CrossEntropy> {
    if logits.height != labels.height || logits.width != labels.width {
        return Err(Error::Shape(format!(
            "logits {}x{} vs labels {}x{}",
            logits.height, logits.width, labels.height, labels.width
        )));
    }
    let plane = logits.plane();
    if pixel_weights.is_some_and(|w| w.len() != plane) {
        return Err(Error::Shape("pixel weights do not match the label map".into()));
    }
    let c = logits.channels;
    let labeled = labels.labeled_count();
    let mut grad = Tensor3::zeros(c, logits.height, logits.width);
    if labeled == 0 {
        return Ok(CrossEntropy {
            value: 0.0,
            labeled,
            grad,
        });
    }
    let norm = 1.0 / labeled as f64;
    let mut total = 0.0;
    let mut buf = vec![0.0; c];
    for p in 0..plane {
        let y = labels.data[p];
        if y == IGNORE {
            continue;
        }
        let k = usize::from(y) - 1;
        if k >= c {
            return Err(Error::Class {
                index: y,
                reason: format!("label outside the {c} predicted classes"),
            });
        }
        for (j, b) in buf.iter_mut().enumerate() {
            *b = logits.data[j * plane + p];
        }
        let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + buf.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let weight = pixel_weights.map_or(1.0, |w| w[p]);
        total += weight * (lse - buf[k]);
        for (j, &b) in buf.iter().enumerate() {
            let prob = (b - lse).exp();
            let target = if j == k { 1.0 } else { 0.0 };
            grad.data[j * plane + p] = weight * norm * (prob - target);
        }
    }
    Ok(CrossEntropy {
        value: total * norm,
        labeled,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor3::zeros(4, 2, 2);
        let labels = LabelMap::from_rows(&[&[1, 2], &[3, 4]]);
        let ce = cross_entropy(&logits, &labels, None).unwrap();
        assert!((ce.value - 4f64.ln()).abs() < 1e-12);
        assert!((ce.value - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let mut logits = Tensor3::zeros(3, 1, 2);
        logits.set(1, 0, 0, 200.0);
        logits.set(2, 0, 1, 200.0);
        let labels = LabelMap::from_rows(&[&[2, 3]]);
        assert!(cross_entropy(&logits, &labels, None).unwrap().value < 1e-12);
    }

    #[test]
    fn two_pixel_hand_computation() {
        // pixel 0: logits (1, 0), label 1 ; pixel 1: logits (0, 2), label 1
        let logits = Tensor3::from_vec(2, 1, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let labels = LabelMap::from_rows(&[&[1, 1]]);
        let ce = cross_entropy(&logits, &labels, None).unwrap();
        let l0 = (1f64.exp() + 1.0).ln() - 1.0;
        let l1 = (1.0 + 2f64.exp()).ln();
        assert!((ce.value - (l0 + l1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ignore_pixels_are_excluded() {
        let logits = Tensor3::from_vec(2, 1, 3, vec![1.0, 5.0, 0.0, 0.0, -3.0, 2.0]).unwrap();
        let with_ignore = LabelMap::from_rows(&[&[1, 0, 1]]);
        let ce = cross_entropy(&logits, &with_ignore, None).unwrap();
        let l0 = (1f64.exp() + 1.0).ln() - 1.0;
        let l2 = (1.0 + 2f64.exp()).ln();
        assert!((ce.value - (l0 + l2) / 2.0).abs() < 1e-12);
        assert_eq!(ce.labeled, 2);
        assert!(ce.grad.get(0, 0, 1) == 0.0 && ce.grad.get(1, 0, 1) == 0.0);
    }

    #[test]
    fn all_ignore_is_zero() {
        let ce = cross_entropy(&Tensor3::zeros(3, 2, 2), &LabelMap::filled(2, 2, IGNORE), None).unwrap();
        assert_eq!(ce.value, 0.0);
        assert!(ce.is_empty());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor3::from_vec(3, 1, 2, vec![0.3, -1.0, 0.7, 0.2, -0.4, 1.5]).unwrap();
        let labels = LabelMap::from_rows(&[&[3, 1]]);
        let ce = cross_entropy(&logits, &labels, None).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut up = logits.clone();
            up.data[i] += h;
            let mut down = logits.clone();
            down.data[i] -= h;
            let fd = (cross_entropy(&up, &labels, None).unwrap().value - cross_entropy(&down, &labels, None).unwrap().value)
                / (2.0 * h);
            assert!((fd - ce.grad.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        assert!(cross_entropy(&Tensor3::zeros(2, 1, 1), &LabelMap::from_rows(&[&[3]]), None).is_err());
    }
}
