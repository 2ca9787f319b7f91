//! A small fully-convolutional segmentation network with hand-written
//! backpropagation, split into an encoder (pixel embeddings) and a decoder
//! (class logits), plus the mean-teacher copy.

mod checkpoint;
mod layers;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::loss::softmax_pixel;
use crate::rng::Rng;
use crate::tensor::{downsample_scalar, ClassIndex, LabelMap, Tensor3};
use layers::{
    conv_backward, conv_forward, relu_backward_in_place, relu_in_place, upsample_bilinear, upsample_bilinear_backward,
    ConvGeometry,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// ReLU after the convolution.
    pub relu: bool,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride,
            relu,
        }
    }
}

/// Layer layout. The encoder output is the embedding; the decoder maps it
/// (optionally through a ReLU) to class logits, which are then bilinearly
/// upsampled back to the input resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub encoder: Vec<ConvSpec>,
    pub decoder_input_relu: bool,
    pub decoder: Vec<ConvSpec>,
}

impl Architecture {
    /// Three encoder convolutions (two stride-2) to a 16-channel embedding at
    /// 1/4 resolution, then a 1×1 classifier.
    pub fn desk_scale(num_classes: usize) -> Self {
        Architecture {
            in_channels: 3,
            encoder: vec![
                ConvSpec::new(16, 3, 2, true),
                ConvSpec::new(24, 3, 2, true),
                ConvSpec::new(16, 3, 1, false),
            ],
            decoder_input_relu: true,
            decoder: vec![ConvSpec::new(num_classes, 1, 1, false)],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.decoder
            .last()
            .map_or(self.embed_dim(), |l| l.out_channels)
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.last().map_or(self.in_channels, |l| l.out_channels)
    }

    /// Input pixels per embedding pixel along each axis.
    pub fn downsample_factor(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(|l| l.stride)
            .product()
    }

    fn geometries(&self) -> Vec<ConvGeometry> {
        let mut channels = self.in_channels;
        self.encoder
            .iter()
            .chain(&self.decoder)
            .map(|l| {
                let g = ConvGeometry {
                    in_channels: channels,
                    out_channels: l.out_channels,
                    kernel: l.kernel,
                    stride: l.stride,
                };
                channels = l.out_channels;
                g
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.decoder.is_empty() {
            problems.push("decoder needs at least one layer".to_string());
        }
        if self.decoder.iter().any(|l| l.stride != 1) {
            problems.push("decoder layers must have stride 1".to_string());
        }
        if self.decoder.last().is_some_and(|l| l.relu) {
            problems.push("last decoder layer produces logits and must not have a ReLU".to_string());
        }
        for l in self.encoder.iter().chain(&self.decoder) {
            if l.kernel % 2 == 0 || l.stride == 0 || l.out_channels == 0 {
                problems.push(format!("invalid layer {l:?} (odd kernel, stride >= 1, channels >= 1)"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let n_enc = self.encoder.len();
        let mut out = Vec::new();
        for (i, g) in self.geometries().iter().enumerate() {
            let prefix = if i < n_enc {
                format!("encoder.{i}")
            } else {
                format!("decoder.{}", i - n_enc)
            };
            out.push((
                format!("{prefix}.weight"),
                vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
            ));
            out.push((format!("{prefix}.bias"), vec![g.out_channels]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter tensors; gradients and optimizer state share the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tensors: Vec<NamedTensor>,
}

impl Params {
    pub fn zeros(layout: &[(String, Vec<usize>)]) -> Self {
        Params {
            tensors: layout
                .iter()
                .map(|(name, shape)| NamedTensor {
                    name: name.clone(),
                    shape: shape.clone(),
                    data: vec![0.0; shape.iter().product()],
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.len() == b.data.len())
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.len())));
        }
        for (p, v) in self.values_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `C × H × W`, at input resolution.
    pub logits: Tensor3,
    /// `D × H/f × W/f`, the encoder output.
    pub embeddings: Tensor3,
    /// Input to every convolution, in order.
    inputs: Vec<Tensor3>,
    /// Post-activation output of every convolution (logits for the last).
    outputs: Vec<Tensor3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub arch: Architecture,
    pub params: Params,
}

impl SegmentationModel {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let params = Params::zeros(&arch.parameter_layout());
        Ok(SegmentationModel { arch, params })
    }

    /// He-normal weights, zero biases.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let mut model = SegmentationModel::zeros(arch)?;
        for t in &mut model.params.tensors {
            if t.shape.len() == 4 {
                let fan_in = (t.shape[1] * t.shape[2] * t.shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                for v in &mut t.data {
                    *v = normal.sample(rng);
                }
            }
        }
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    fn check_input(&self, image: &Tensor3) -> Result<()> {
        let f = self.arch.downsample_factor();
        if image.channels != self.arch.in_channels || image.height % f != 0 || image.width % f != 0 || image.height == 0 {
            return Err(Error::Shape(format!(
                "image {}x{}x{} does not fit an architecture with {} input channels and stride {f}",
                image.channels, image.height, image.width, self.arch.in_channels
            )));
        }
        Ok(())
    }

    /// Forward pass keeping the activations needed by [`Self::backward`].
    pub fn forward_train(&self, image: &Tensor3) -> Result<ForwardPass> {
        self.check_input(image)?;
        let geoms = self.arch.geometries();
        let n_enc = self.arch.encoder.len();
        let specs: Vec<&ConvSpec> = self.arch.encoder.iter().chain(&self.arch.decoder).collect();
        let mut inputs = Vec::with_capacity(geoms.len());
        let mut outputs = Vec::with_capacity(geoms.len());
        let mut current = image.clone();
        let mut embeddings = if n_enc == 0 { Some(image.clone()) } else { None };
        for (i, (g, spec)) in geoms.iter().zip(&specs).enumerate() {
            if i == n_enc && self.arch.decoder_input_relu {
                relu_in_place(&mut current);
            }
            let w = &self.params.tensors[2 * i].data;
            let b = &self.params.tensors[2 * i + 1].data;
            let mut out = conv_forward(g, &current, w, b);
            if spec.relu {
                relu_in_place(&mut out);
            }
            inputs.push(current);
            if i + 1 == n_enc {
                embeddings = Some(out.clone());
            }
            current = out.clone();
            outputs.push(out);
        }
        let logits = upsample_bilinear(&current, image.height, image.width);
        Ok(ForwardPass {
            logits,
            embeddings: embeddings.expect("embedding recorded"),
            inputs,
            outputs,
        })
    }

    /// `(logits, embeddings)` for one image.
    pub fn forward(&self, image: &Tensor3) -> Result<(Tensor3, Tensor3)> {
        let pass = self.forward_train(image)?;
        Ok((pass.logits, pass.embeddings))
    }

    /// Parameter gradient given the loss gradient w.r.t. the logits and,
    /// optionally, w.r.t. the embeddings.
    pub fn backward(&self, pass: &ForwardPass, grad_logits: &Tensor3, grad_embeddings: Option<&Tensor3>) -> Result<Params> {
        if !grad_logits.same_shape(&pass.logits) {
            return Err(Error::Shape("logit gradient does not match the forward pass".into()));
        }
        if let Some(ge) = grad_embeddings {
            if !ge.same_shape(&pass.embeddings) {
                return Err(Error::Shape("embedding gradient does not match the forward pass".into()));
            }
        }
        let geoms = self.arch.geometries();
        let n_enc = self.arch.encoder.len();
        let specs: Vec<&ConvSpec> = self.arch.encoder.iter().chain(&self.arch.decoder).collect();
        let mut grads = self.params.zeros_like();
        let last = pass.outputs.last().expect("at least one layer");
        let mut grad = upsample_bilinear_backward(grad_logits, last.height, last.width);
        for i in (0..geoms.len()).rev() {
            if specs[i].relu {
                relu_backward_in_place(&mut grad, &pass.outputs[i]);
            }
            let (gw, rest) = grads.tensors[2 * i..].split_at_mut(1);
            let gin = conv_backward(
                &geoms[i],
                &pass.inputs[i],
                &self.params.tensors[2 * i].data,
                &grad,
                &mut gw[0].data,
                &mut rest[0].data,
                i > 0,
            );
            let Some(mut gin) = gin else { break };
            if i == n_enc {
                if self.arch.decoder_input_relu {
                    relu_backward_in_place(&mut gin, &pass.inputs[i]);
                }
                if let Some(ge) = grad_embeddings {
                    gin.add_assign(ge);
                }
            }
            grad = gin;
        }
        Ok(grads)
    }
}

/// The mean teacher: same layout as the student, parameters only ever
/// assigned through [`ema_update`]. Exposes inference only.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    model: SegmentationModel,
}

impl TeacherModel {
    pub fn from_student(student: &SegmentationModel) -> Self {
        TeacherModel { model: student.clone() }
    }

    pub fn params(&self) -> &Params {
        &self.model.params
    }

    pub fn arch(&self) -> &Architecture {
        &self.model.arch
    }

    pub(crate) fn from_params(arch: Architecture, params: Params) -> Result<Self> {
        let model = SegmentationModel::zeros(arch)?;
        if !model.params.same_layout(&params) {
            return Err(Error::Shape("teacher parameters do not match the architecture".into()));
        }
        Ok(TeacherModel {
            model: SegmentationModel { params, ..model },
        })
    }

    pub fn forward(&self, image: &Tensor3) -> Result<(Tensor3, Tensor3)> {
        self.model.forward(image)
    }

    /// Per-pixel softmax of the teacher logits.
    pub fn probabilities(&self, image: &Tensor3) -> Result<Tensor3> {
        let (logits, _) = self.forward(image)?;
        Ok(softmax(&logits))
    }

    pub fn predict_pseudo(&self, image: &Tensor3) -> Result<PseudoLabel> {
        Ok(PseudoLabel::from_probabilities(self.probabilities(image)?))
    }
}

/// `θ′ ← α·θ′ + (1−α)·θ`
pub fn ema_update(teacher: &mut TeacherModel, student: &SegmentationModel, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("EMA decay {alpha} outside [0, 1)")));
    }
    if teacher.model.arch != student.arch || !teacher.model.params.same_layout(&student.params) {
        return Err(Error::Shape("teacher and student parameter layouts differ".into()));
    }
    for (t, s) in teacher.model.params.values_mut().zip(student.params.values()) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

/// Channel-wise softmax at every pixel.
pub fn softmax(logits: &Tensor3) -> Tensor3 {
    let mut probs = logits.clone();
    let plane = logits.plane();
    let c = logits.channels;
    let mut buf = vec![0.0; c];
    for p in 0..plane {
        for k in 0..c {
            buf[k] = logits.data[k * plane + p];
        }
        softmax_pixel(&mut buf);
        for k in 0..c {
            probs.data[k * plane + p] = buf[k];
        }
    }
    probs
}

/// Teacher argmax (1-based, ties to the lowest class) with its confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub label: LabelMap,
    /// Max softmax probability per pixel, row-major.
    pub confidence: Vec<f64>,
    pub probabilities: Tensor3,
}

impl PseudoLabel {
    pub fn from_probabilities(probabilities: Tensor3) -> Self {
        let (h, w, plane) = (probabilities.height, probabilities.width, probabilities.plane());
        let mut label = LabelMap::filled(h, w, crate::tensor::IGNORE);
        let mut confidence = vec![0.0; plane];
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for k in 0..probabilities.channels {
                let v = probabilities.data[k * plane + p];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            label.data[p] = (best + 1) as ClassIndex;
            confidence[p] = best_v;
        }
        PseudoLabel {
            label,
            confidence,
            probabilities,
        }
    }

    /// Confidence resampled onto a grid `factor` times coarser.
    pub fn confidence_downsampled(&self, factor: usize) -> Vec<f64> {
        downsample_scalar(&self.confidence, self.label.height, self.label.width, factor)
    }
}
