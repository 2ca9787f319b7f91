//! Procedural scenes: piecewise-constant label maps rendered with per-class
//! colour and stripe texture, then pushed through a per-domain appearance shift.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DomainTag, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::taxonomy::LabelSpace;
use crate::tensor::{ClassIndex, LabelMap, Tensor3};

/// How one scene class looks before any domain shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAppearance {
    pub color: [f64; 3],
    /// Amplitude of the luminance stripes added on top of `color`.
    pub texture_amplitude: f64,
    /// Stripe frequency in cycles per image width.
    pub texture_frequency: f64,
    /// Stripe orientation in degrees.
    pub texture_angle: f64,
}

/// Per-domain appearance transform: `A·rgb + b`, then Gaussian noise.
/// `A` rotates hue about the grey axis and scales by `gain`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub hue_rotation_deg: f64,
    pub gain: f64,
    pub bias: [f64; 3],
    pub noise: f64,
    /// Multiplier on every class' stripe frequency.
    pub texture_scale: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift {
            hue_rotation_deg: 0.0,
            gain: 1.0,
            bias: [0.0; 3],
            noise: 0.0,
            texture_scale: 1.0,
        }
    }

    /// The 3×3 colour matrix (row-major) of this shift.
    pub fn color_matrix(&self) -> [[f64; 3]; 3] {
        // Rodrigues rotation about (1,1,1)/√3.
        let theta = self.hue_rotation_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let k = 1.0 / 3.0;
        let r = (1.0 / 3.0f64).sqrt();
        let a = c + (1.0 - c) * k;
        let b = (1.0 - c) * k - r * s;
        let d = (1.0 - c) * k + r * s;
        let g = self.gain;
        [[g * a, g * b, g * d], [g * d, g * a, g * b], [g * b, g * d, g * a]]
    }

    pub fn apply_color(&self, rgb: [f64; 3]) -> [f64; 3] {
        let m = self.color_matrix();
        let mut out = [0.0; 3];
        for (i, row) in m.iter().enumerate() {
            out[i] = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2] + self.bias[i];
        }
        out
    }
}

/// Scene classes together with their rendering.
#[derive(Debug, Clone)]
pub struct ScenePalette {
    pub space: LabelSpace,
    pub appearance: Vec<ClassAppearance>,
}

impl ScenePalette {
    pub fn new(space: LabelSpace, appearance: Vec<ClassAppearance>) -> Result<Self> {
        if appearance.len() != space.count() {
            return Err(Error::InvalidArgument(format!(
                "{} appearances for {} classes",
                appearance.len(),
                space.count()
            )));
        }
        Ok(ScenePalette { space, appearance })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SceneLayout {
    fn default() -> Self {
        SceneLayout {
            height: 32,
            width: 32,
            min_shapes: 3,
            max_shapes: 6,
        }
    }
}

/// Render scene number `index` of the stream rooted at `seed`.
///
/// `allowed` restricts which scene classes may be drawn (all when `None`).
/// Output labels are scene-class indices; the image is quantised to 8-bit
/// levels so PNG storage is lossless.
#[allow(clippy::too_many_arguments)]
pub fn generate_scene(
    seed: u64,
    index: u64,
    layout: &SceneLayout,
    shift: &DomainShift,
    palette: &ScenePalette,
    allowed: Option<&[ClassIndex]>,
    domain: DomainTag,
    id: String,
) -> Result<Sample> {
    let (h, w) = (layout.height, layout.width);
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!("scene size {h}x{w} below 8x8")));
    }
    if layout.min_shapes > layout.max_shapes {
        return Err(Error::InvalidArgument("min_shapes > max_shapes".into()));
    }
    if !(shift.gain.is_finite() && shift.noise >= 0.0 && shift.texture_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("degenerate domain shift {shift:?}")));
    }
    let classes: Vec<ClassIndex> = match allowed {
        Some(list) if list.is_empty() => {
            return Err(Error::InvalidArgument("no scene classes allowed".into()));
        }
        Some(list) => list.to_vec(),
        None => palette.space.indices().collect(),
    };

    let mut layout_rng = rng::indexed_stream(seed, "scene-layout", index);
    let pick = |r: &mut rng::Rng| classes[r.random_range(0..classes.len())];

    let mut label = LabelMap::filled(h, w, pick(&mut layout_rng));
    let n_shapes = layout_rng.random_range(layout.min_shapes..=layout.max_shapes);
    let (min_side, max_side) = ((h.min(w) / 5).max(2), (h.min(w) / 2).max(3));
    for _ in 0..n_shapes {
        let class = pick(&mut layout_rng);
        let sh = layout_rng.random_range(min_side..=max_side);
        let sw = layout_rng.random_range(min_side..=max_side);
        let y0 = layout_rng.random_range(0..=(h - sh.min(h)));
        let x0 = layout_rng.random_range(0..=(w - sw.min(w)));
        let ellipse = layout_rng.random_bool(0.5);
        let (cy, cx) = (y0 as f64 + sh as f64 / 2.0, x0 as f64 + sw as f64 / 2.0);
        let (ry, rx) = (sh as f64 / 2.0, sw as f64 / 2.0);
        for y in y0..(y0 + sh).min(h) {
            for x in x0..(x0 + sw).min(w) {
                let inside = !ellipse || {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    dy * dy + dx * dx <= 1.0
                };
                if inside {
                    label.set(y, x, class);
                }
            }
        }
    }

    let mut tex_rng = rng::indexed_stream(seed, "scene-texture", index);
    let phase: f64 = tex_rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, shift.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut noise_rng = rng::indexed_stream(seed, "scene-noise", index);

    let mut image = Tensor3::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let class = label.get(y, x);
            let look = &palette.appearance[usize::from(class) - 1];
            let angle = look.texture_angle.to_radians();
            let coord = (x as f64 * angle.cos() + y as f64 * angle.sin()) / w as f64;
            let stripe = (std::f64::consts::TAU * look.texture_frequency * shift.texture_scale * coord + phase).sin();
            let base = look.color.map(|c| c + look.texture_amplitude * stripe);
            let shifted = shift.apply_color(base);
            for (c, &v) in shifted.iter().enumerate() {
                let n = if shift.noise > 0.0 {
                    noise.sample(&mut noise_rng)
                } else {
                    0.0
                };
                image.set(c, y, x, quantize(v + n));
            }
        }
    }

    Ok(Sample {
        id,
        domain,
        image,
        label,
    })
}

/// Clamp to [0, 1] and snap to the nearest 8-bit level.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn palette() -> ScenePalette {
        let space = LabelSpace::new(["a", "b", "c"]).unwrap();
        let appearance = vec![
            ClassAppearance {
                color: [0.7, 0.3, 0.3],
                texture_amplitude: 0.0,
                texture_frequency: 2.0,
                texture_angle: 0.0,
            },
            ClassAppearance {
                color: [0.3, 0.6, 0.35],
                texture_amplitude: 0.0,
                texture_frequency: 3.0,
                texture_angle: 90.0,
            },
            ClassAppearance {
                color: [0.35, 0.35, 0.65],
                texture_amplitude: 0.0,
                texture_frequency: 1.0,
                texture_angle: 45.0,
            },
        ];
        ScenePalette::new(space, appearance).unwrap()
    }

    fn gen(seed: u64, index: u64, shift: &DomainShift) -> Sample {
        generate_scene(
            seed,
            index,
            &SceneLayout::default(),
            shift,
            &palette(),
            None,
            DomainTag::Source,
            format!("s{index}"),
        )
        .unwrap()
    }

    fn class_means(samples: &[Sample], classes: usize) -> Vec<[f64; 3]> {
        let mut sums = vec![[0.0; 3]; classes];
        let mut counts = vec![0usize; classes];
        for s in samples {
            for y in 0..s.label.height {
                for x in 0..s.label.width {
                    let k = usize::from(s.label.get(y, x)) - 1;
                    counts[k] += 1;
                    for c in 0..3 {
                        sums[k][c] += s.image.get(c, y, x);
                    }
                }
            }
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &n)| s.map(|v| v / n as f64))
            .collect()
    }

    #[test]
    fn same_seed_same_scene() {
        let shift = DomainShift {
            noise: 0.05,
            ..DomainShift::identity()
        };
        assert_eq!(gen(11, 4, &shift), gen(11, 4, &shift));
        assert_ne!(gen(11, 4, &shift).image, gen(11, 5, &shift).image);
    }

    #[test]
    fn zero_size_is_rejected() {
        let layout = SceneLayout {
            height: 0,
            ..SceneLayout::default()
        };
        let err = generate_scene(
            1,
            0,
            &layout,
            &DomainShift::identity(),
            &palette(),
            None,
            DomainTag::Source,
            "x".into(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn identity_shift_gives_equal_class_means() {
        let noisy = DomainShift {
            noise: 0.02,
            ..DomainShift::identity()
        };
        let a: Vec<_> = (0..40).map(|i| gen(1, i, &DomainShift::identity())).collect();
        let b: Vec<_> = (0..40).map(|i| gen(2, i, &noisy)).collect();
        for (ma, mb) in class_means(&a, 3).iter().zip(class_means(&b, 3)) {
            for c in 0..3 {
                assert!((ma[c] - mb[c]).abs() < 0.01, "{ma:?} vs {mb:?}");
            }
        }
    }

    #[test]
    fn hue_rotation_moves_class_means_by_the_rotation() {
        let rotated = DomainShift {
            hue_rotation_deg: 40.0,
            ..DomainShift::identity()
        };
        let a: Vec<_> = (0..20).map(|i| gen(3, i, &DomainShift::identity())).collect();
        let b: Vec<_> = (0..20).map(|i| gen(4, i, &rotated)).collect();
        let (ma, mb) = (class_means(&a, 3), class_means(&b, 3));
        for k in 0..3 {
            let expected = rotated.apply_color(ma[k]);
            for c in 0..3 {
                // Quantisation on both sides: half a level each, rotated.
                assert!((expected[c] - mb[k][c]).abs() < 2.0 / 255.0, "class {k}");
            }
            let shift: f64 = (0..3).map(|c| (ma[k][c] - mb[k][c]).abs()).sum();
            assert!(shift > 0.05);
        }
        // A hue rotation preserves the grey-axis component.
        let grey = |v: [f64; 3]| v.iter().sum::<f64>();
        for k in 0..3 {
            assert!((grey(ma[k]) - grey(mb[k])).abs() < 3.0 / 255.0);
        }
    }

    #[test]
    fn rotation_matrix_composes() {
        let r20 = DomainShift {
            hue_rotation_deg: 20.0,
            ..DomainShift::identity()
        };
        let r40 = DomainShift {
            hue_rotation_deg: 40.0,
            ..DomainShift::identity()
        };
        let v = [0.6, 0.2, 0.4];
        let twice = r20.apply_color(r20.apply_color(v));
        let once = r40.apply_color(v);
        for c in 0..3 {
            assert!((twice[c] - once[c]).abs() < 1e-12);
        }
    }
}
