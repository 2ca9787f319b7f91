//! Convolution and bilinear upsampling with their adjoints.

use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    #[cfg(test)]
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// Output positions `o` in `0..out_len` whose input tap `o*stride + k - pad` is in range.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, pad: usize, stride: usize) -> std::ops::Range<usize> {
    let offset = k as isize - pad as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    // largest o with o*stride + offset <= in_len - 1
    let top = in_len as isize - 1 - offset;
    if top < 0 {
        return 0..0;
    }
    let hi = (top as usize / stride + 1).min(out_len);
    lo.min(hi)..hi
}

pub(crate) fn conv_forward(g: &ConvGeometry, input: &Tensor3, weight: &[f64], bias: &[f64]) -> Tensor3 {
    debug_assert_eq!(input.channels, g.in_channels);
    let (h, w) = (input.height, input.width);
    let (oh, ow) = g.output_size(h, w);
    let (k, s, p) = (g.kernel, g.stride, g.pad());
    let mut out = Tensor3::zeros(g.out_channels, oh, ow);
    let oplane = oh * ow;
    for oc in 0..g.out_channels {
        let out_plane = &mut out.data[oc * oplane..(oc + 1) * oplane];
        out_plane.fill(bias[oc]);
        for ic in 0..g.in_channels {
            let in_plane = input.channel(ic);
            let wbase = (oc * g.in_channels + ic) * k * k;
            for ky in 0..k {
                let ys = valid_range(oh, h, ky, p, s);
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    let xs = valid_range(ow, w, kx, p, s);
                    if xs.is_empty() {
                        continue;
                    }
                    for oy in ys.clone() {
                        let iy = oy * s + ky - p;
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let shift = xs.start + kx - p;
                            for (o, i) in out_row[xs.clone()].iter_mut().zip(&in_row[shift..shift + xs.len()]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in xs.clone() {
                                out_row[ox] += wv * in_row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient when requested.
pub(crate) fn conv_backward(
    g: &ConvGeometry,
    input: &Tensor3,
    weight: &[f64],
    grad_out: &Tensor3,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor3> {
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (grad_out.height, grad_out.width);
    let (k, s, p) = (g.kernel, g.stride, g.pad());
    let mut grad_in = need_input_grad.then(|| Tensor3::zeros(g.in_channels, h, w));
    for oc in 0..g.out_channels {
        let go = grad_out.channel(oc);
        grad_bias[oc] += go.iter().sum::<f64>();
        for ic in 0..g.in_channels {
            let in_plane = input.channel(ic);
            let wbase = (oc * g.in_channels + ic) * k * k;
            for ky in 0..k {
                let ys = valid_range(oh, h, ky, p, s);
                for kx in 0..k {
                    let xs = valid_range(ow, w, kx, p, s);
                    if xs.is_empty() {
                        continue;
                    }
                    let wv = weight[wbase + ky * k + kx];
                    let mut acc = 0.0;
                    for oy in ys.clone() {
                        let iy = oy * s + ky - p;
                        let go_row = &go[oy * ow..(oy + 1) * ow];
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        if s == 1 {
                            let shift = xs.start + kx - p;
                            for (g_, i) in go_row[xs.clone()].iter().zip(&in_row[shift..shift + xs.len()]) {
                                acc += g_ * i;
                            }
                        } else {
                            for ox in xs.clone() {
                                acc += go_row[ox] * in_row[ox * s + kx - p];
                            }
                        }
                        if let Some(gi) = grad_in.as_mut() {
                            let plane = h * w;
                            let gi_row = &mut gi.data[ic * plane + iy * w..ic * plane + (iy + 1) * w];
                            if s == 1 {
                                let shift = xs.start + kx - p;
                                for (d, g_) in gi_row[shift..shift + xs.len()].iter_mut().zip(&go_row[xs.clone()]) {
                                    *d += wv * g_;
                                }
                            } else {
                                for ox in xs.clone() {
                                    gi_row[ox * s + kx - p] += wv * go_row[ox];
                                }
                            }
                        }
                    }
                    grad_weight[wbase + ky * k + kx] += acc;
                }
            }
        }
    }
    grad_in
}

pub(crate) fn relu_in_place(t: &mut Tensor3) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero the gradient where the activation was clipped.
pub(crate) fn relu_backward_in_place(grad: &mut Tensor3, activation: &Tensor3) {
    for (g, &a) in grad.data.iter_mut().zip(&activation.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Per-axis bilinear interpolation taps, half-pixel centres, edges clamped.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

pub(crate) fn upsample_bilinear(input: &Tensor3, out_h: usize, out_w: usize) -> Tensor3 {
    if input.height == out_h && input.width == out_w {
        return input.clone();
    }
    let ty = bilinear_taps(out_h, input.height);
    let tx = bilinear_taps(out_w, input.width);
    let mut out = Tensor3::zeros(input.channels, out_h, out_w);
    let iw = input.width;
    for c in 0..input.channels {
        let src = input.channel(c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * iw + x0] * (1.0 - fx) + src[y0 * iw + x1] * fx;
                let bot = src[y1 * iw + x0] * (1.0 - fx) + src[y1 * iw + x1] * fx;
                out.set(c, oy, ox, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear_backward(grad_out: &Tensor3, in_h: usize, in_w: usize) -> Tensor3 {
    if grad_out.height == in_h && grad_out.width == in_w {
        return grad_out.clone();
    }
    let ty = bilinear_taps(grad_out.height, in_h);
    let tx = bilinear_taps(grad_out.width, in_w);
    let mut grad_in = Tensor3::zeros(grad_out.channels, in_h, in_w);
    let plane = in_h * in_w;
    for c in 0..grad_out.channels {
        let dst = &mut grad_in.data[c * plane..(c + 1) * plane];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = grad_out.get(c, oy, ox);
                dst[y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * in_w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * in_w + x0] += g * fy * (1.0 - fx);
                dst[y1 * in_w + x1] += g * fy * fx;
            }
        }
    }
    grad_in
}
