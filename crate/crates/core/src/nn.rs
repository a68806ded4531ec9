//! Forward and backward implementations for the layer set the codec needs.
//!
//! These are plain functions over tensors; [`crate::autograd`] wires them into
//! a tape. Convolution is direct (loops, zero padding) which is adequate at
//! the input sizes this crate targets.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::tensor::{std_normal_cdf, std_normal_pdf, Scalar, Shape, Tensor};

/// Probability floor inside the differentiable rate estimate. One count out
/// of `2^16` is the least probability the integerized coder tables can
/// express, so an in-window symbol never costs more than 16 bits on the wire;
/// flooring the estimate at the same resolution keeps the two aligned.
const RATE_P_FLOOR: f64 = 1.0 / 65536.0;
const LN2: f64 = core::f64::consts::LN_2;

/// Convolution parameters. Weight layout is `[C_out, C_in/groups, k_h, k_w]`.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h, self.weight.shape().w)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let s = self.weight.shape();
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::Invalid("stride and groups must be positive".into()));
        }
        if s.n % self.groups != 0 {
            return Err(Error::Dimension(format!(
                "C_out {} not divisible by groups {}",
                s.n, self.groups
            )));
        }
        if self.bias.len() != s.n {
            return Err(Error::Dimension(format!(
                "bias length {} != C_out {}",
                self.bias.len(),
                s.n
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Cross-correlation with bias (the usual deep-learning "convolution").
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>, Error> {
    p.validate()?;
    conv2d_raw(x, &p.weight, &p.bias, p.stride, p.padding, p.groups)
}

/// Gradients of [`conv2d`] w.r.t. input, weight, and bias.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), Error> {
    conv2d_backward_raw(grad_out, x, &p.weight, p.stride, p.padding, p.groups)
}

/// Convolution over bare tensors; the tape goes through this entry so weight
/// and bias can live in tape slots.
pub fn conv2d_raw<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>, Error> {
    let xs = x.shape();
    let ws = weight.shape();
    let (kh, kw) = (ws.h, ws.w);
    let c_out = ws.n;
    if stride == 0 || groups == 0 || c_out % groups != 0 {
        return Err(Error::Invalid(format!(
            "bad conv config: stride {stride}, groups {groups}, C_out {c_out}"
        )));
    }
    if xs.c != ws.c * groups {
        return Err(Error::Dimension(format!(
            "input has {} channels, conv expects {}",
            xs.c,
            ws.c * groups
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Dimension(format!(
            "bias length {} != C_out {}",
            bias.len(),
            c_out
        )));
    }
    if xs.h + 2 * padding < kh || xs.w + 2 * padding < kw {
        return Err(Error::Dimension(format!(
            "spatial extents {}x{} too small for {}x{} kernel with padding {}",
            xs.h, xs.w, kh, kw, padding
        )));
    }
    let oh = conv_out_extent(xs.h, kh, stride, padding);
    let ow = conv_out_extent(xs.w, kw, stride, padding);
    let cin_g = ws.c;
    let cout_g = c_out / groups;

    let mut out = Tensor::zeros(Shape::new(xs.n, c_out, oh, ow));
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();

    // pointwise convs dominate the depth-conv blocks; skip the kernel loops
    if kh == 1 && kw == 1 && stride == 1 && padding == 0 && groups == 1 {
        let plane = xs.h * xs.w;
        for n in 0..xs.n {
            for co in 0..c_out {
                let o_base = (n * c_out + co) * plane;
                od[o_base..o_base + plane].fill(bd[co]);
                for ci in 0..xs.c {
                    let w = wd[co * xs.c + ci];
                    let x_base = (n * xs.c + ci) * plane;
                    for i in 0..plane {
                        od[o_base + i] += xd[x_base + i] * w;
                    }
                }
            }
        }
        return Ok(out);
    }

    for n in 0..xs.n {
        for co in 0..c_out {
            let g = co / cout_g;
            let b = bd[co];
            for out_h in 0..oh {
                for out_w in 0..ow {
                    let mut acc = b;
                    for ci_l in 0..cin_g {
                        let ci = g * cin_g + ci_l;
                        let x_chan = (n * xs.c + ci) * xs.h;
                        let w_chan = (co * cin_g + ci_l) * kh;
                        for k_h in 0..kh {
                            let ih = (out_h * stride + k_h) as isize - padding as isize;
                            if ih < 0 || ih >= xs.h as isize {
                                continue;
                            }
                            let x_row = (x_chan + ih as usize) * xs.w;
                            let w_row = (w_chan + k_h) * kw;
                            for k_w in 0..kw {
                                let iw = (out_w * stride + k_w) as isize - padding as isize;
                                if iw < 0 || iw >= xs.w as isize {
                                    continue;
                                }
                                acc += xd[x_row + iw as usize] * wd[w_row + k_w];
                            }
                        }
                    }
                    od[((n * c_out + co) * oh + out_h) * ow + out_w] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_raw`].
pub fn conv2d_backward_raw<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), Error> {
    let xs = x.shape();
    let ws = weight.shape();
    let (kh, kw) = (ws.h, ws.w);
    let oh = conv_out_extent(xs.h, kh, stride, padding);
    let ow = conv_out_extent(xs.w, kw, stride, padding);
    let c_out = ws.n;
    if grad_out.shape() != Shape::new(xs.n, c_out, oh, ow) {
        return Err(Error::Dimension(format!(
            "grad_out shape {:?} does not match forward output",
            grad_out.shape()
        )));
    }
    let cin_g = ws.c;
    let cout_g = c_out / groups;

    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::new(c_out, 1, 1, 1));
    let xd = x.data();
    let wd = weight.data();
    let god = grad_out.data();

    if kh == 1 && kw == 1 && stride == 1 && padding == 0 && groups == 1 {
        let plane = xs.h * xs.w;
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for n in 0..xs.n {
            for co in 0..c_out {
                let o_base = (n * c_out + co) * plane;
                let mut bsum = T::ZERO;
                for i in 0..plane {
                    bsum += god[o_base + i];
                }
                gbd[co] += bsum;
                for ci in 0..xs.c {
                    let x_base = (n * xs.c + ci) * plane;
                    let w = wd[co * xs.c + ci];
                    let mut wsum = T::ZERO;
                    for i in 0..plane {
                        let g = god[o_base + i];
                        wsum += g * xd[x_base + i];
                        gxd[x_base + i] += g * w;
                    }
                    gwd[co * xs.c + ci] += wsum;
                }
            }
        }
        return Ok((gx, gw, gb));
    }

    for n in 0..xs.n {
        for co in 0..c_out {
            let g = co / cout_g;
            for out_h in 0..oh {
                for out_w in 0..ow {
                    let go = god[((n * c_out + co) * oh + out_h) * ow + out_w];
                    gb.data_mut()[co] += go;
                    for ci_l in 0..cin_g {
                        let ci = g * cin_g + ci_l;
                        let x_chan = (n * xs.c + ci) * xs.h;
                        let w_chan = (co * cin_g + ci_l) * kh;
                        for k_h in 0..kh {
                            let ih = (out_h * stride + k_h) as isize - padding as isize;
                            if ih < 0 || ih >= xs.h as isize {
                                continue;
                            }
                            let x_row = (x_chan + ih as usize) * xs.w;
                            let w_row = (w_chan + k_h) * kw;
                            for k_w in 0..kw {
                                let iw = (out_w * stride + k_w) as isize - padding as isize;
                                if iw < 0 || iw >= xs.w as isize {
                                    continue;
                                }
                                gw.data_mut()[w_row + k_w] += go * xd[x_row + iw as usize];
                                gx.data_mut()[x_row + iw as usize] += go * wd[w_row + k_w];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::ZERO { v } else { slope * v })
}

pub fn leaky_relu_backward<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut gx = Tensor::zeros(x.shape());
    for ((g, &xv), &go) in gx
        .data_mut()
        .iter_mut()
        .zip(x.data())
        .zip(grad_out.data())
    {
        *g = if xv >= T::ZERO { go } else { go * slope };
    }
    gx
}

/// Channel-wise product: every spatial element of channel `c` scaled by `m[c]`.
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, m: &[T]) -> Result<Tensor<T>, Error> {
    let xs = x.shape();
    if m.len() != xs.c {
        return Err(Error::Dimension(format!(
            "scale vector length {} != channel count {}",
            m.len(),
            xs.c
        )));
    }
    let mut out = x.clone();
    let plane = xs.h * xs.w;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * plane;
            let s = m[c];
            for v in &mut out.data_mut()[base..base + plane] {
                *v = *v * s;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`channel_scale`]: `(d/dx, d/dm)`.
pub fn channel_scale_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    m: &[T],
) -> (Tensor<T>, Vec<T>) {
    let xs = x.shape();
    let plane = xs.h * xs.w;
    let mut gx = Tensor::zeros(xs);
    let mut gm = vec![T::ZERO; m.len()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * plane;
            let s = m[c];
            for i in base..base + plane {
                gx.data_mut()[i] = grad_out.data()[i] * s;
                gm[c] += grad_out.data()[i] * x.data()[i];
            }
        }
    }
    (gx, gm)
}

/// Pixel-shuffle: `[N, C*r^2, H, W] -> [N, C, H*r, W*r]`.
pub fn subpixel_upsample<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>, Error> {
    let xs = x.shape();
    if r == 0 || xs.c % (r * r) != 0 {
        return Err(Error::Dimension(format!(
            "channel count {} not divisible by r^2 = {}",
            xs.c,
            r * r
        )));
    }
    let c_out = xs.c / (r * r);
    let mut out = Tensor::zeros(Shape::new(xs.n, c_out, xs.h * r, xs.w * r));
    for n in 0..xs.n {
        for c in 0..c_out {
            for i in 0..r {
                for j in 0..r {
                    let cin = c * r * r + i * r + j;
                    for h in 0..xs.h {
                        for w in 0..xs.w {
                            *out.at_mut(n, c, h * r + i, w * r + j) = x.at(n, cin, h, w);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`subpixel_upsample`].
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>, Error> {
    let xs = x.shape();
    if r == 0 || xs.h % r != 0 || xs.w % r != 0 {
        return Err(Error::Dimension(format!(
            "spatial extents {}x{} not divisible by r = {}",
            xs.h, xs.w, r
        )));
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c * r * r, xs.h / r, xs.w / r));
    for n in 0..xs.n {
        for c in 0..xs.c {
            for i in 0..r {
                for j in 0..r {
                    let co = c * r * r + i * r + j;
                    for h in 0..xs.h / r {
                        for w in 0..xs.w / r {
                            *out.at_mut(n, co, h, w) = x.at(n, c, h * r + i, w * r + j);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Which half of the checkerboard a position belongs to.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Parity {
    /// `(h + w)` even: the anchor positions coded in the first pass.
    Anchor,
    /// `(h + w)` odd: coded in the second pass.
    NonAnchor,
}

impl Parity {
    #[inline]
    pub fn matches(self, h: usize, w: usize) -> bool {
        match self {
            Parity::Anchor => (h + w) % 2 == 0,
            Parity::NonAnchor => (h + w) % 2 == 1,
        }
    }
}

/// Keep positions of the given parity, zero the rest.
pub fn checker_mask<T: Scalar>(x: &Tensor<T>, parity: Parity) -> Tensor<T> {
    let xs = x.shape();
    let mut out = Tensor::zeros(xs);
    for n in 0..xs.n {
        for c in 0..xs.c {
            for h in 0..xs.h {
                for w in 0..xs.w {
                    if parity.matches(h, w) {
                        *out.at_mut(n, c, h, w) = x.at(n, c, h, w);
                    }
                }
            }
        }
    }
    out
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, Error> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::Dimension(format!(
            "concat shapes {sa:?} and {sb:?} differ outside the channel axis"
        )));
    }
    let mut out = Tensor::zeros(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w));
    for n in 0..sa.n {
        for c in 0..sa.c {
            for h in 0..sa.h {
                for w in 0..sa.w {
                    *out.at_mut(n, c, h, w) = a.at(n, c, h, w);
                }
            }
        }
        for c in 0..sb.c {
            for h in 0..sa.h {
                for w in 0..sa.w {
                    *out.at_mut(n, sa.c + c, h, w) = b.at(n, c, h, w);
                }
            }
        }
    }
    Ok(out)
}

pub fn slice_channels<T: Scalar>(
    x: &Tensor<T>,
    c0: usize,
    c1: usize,
) -> Result<Tensor<T>, Error> {
    let xs = x.shape();
    if c0 >= c1 || c1 > xs.c {
        return Err(Error::Dimension(format!(
            "channel slice {c0}..{c1} out of range for {} channels",
            xs.c
        )));
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, c1 - c0, xs.h, xs.w));
    for n in 0..xs.n {
        for c in c0..c1 {
            for h in 0..xs.h {
                for w in 0..xs.w {
                    *out.at_mut(n, c - c0, h, w) = x.at(n, c, h, w);
                }
            }
        }
    }
    Ok(out)
}

/// Zero-pad bottom/right to the requested extents.
pub fn pad_hw<T: Scalar>(x: &Tensor<T>, h_to: usize, w_to: usize) -> Result<Tensor<T>, Error> {
    let xs = x.shape();
    if h_to < xs.h || w_to < xs.w {
        return Err(Error::Dimension(format!(
            "pad target {h_to}x{w_to} smaller than input {}x{}",
            xs.h, xs.w
        )));
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, h_to, w_to));
    for n in 0..xs.n {
        for c in 0..xs.c {
            for h in 0..xs.h {
                for w in 0..xs.w {
                    *out.at_mut(n, c, h, w) = x.at(n, c, h, w);
                }
            }
        }
    }
    Ok(out)
}

/// Keep the top-left `h_to x w_to` region.
pub fn crop_hw<T: Scalar>(x: &Tensor<T>, h_to: usize, w_to: usize) -> Result<Tensor<T>, Error> {
    let xs = x.shape();
    if h_to > xs.h || w_to > xs.w {
        return Err(Error::Dimension(format!(
            "crop target {h_to}x{w_to} larger than input {}x{}",
            xs.h, xs.w
        )));
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, h_to, w_to));
    for n in 0..xs.n {
        for c in 0..xs.c {
            for h in 0..h_to {
                for w in 0..w_to {
                    *out.at_mut(n, c, h, w) = x.at(n, c, h, w);
                }
            }
        }
    }
    Ok(out)
}

/// Round `y` to the step lattice: `round(y / s[c]) * s[c]`.
pub fn quantize_round<T: Scalar>(y: &Tensor<T>, step: &[T]) -> Result<Tensor<T>, Error> {
    let ys = y.shape();
    if step.len() != ys.c {
        return Err(Error::Dimension(format!(
            "step vector length {} != channel count {}",
            step.len(),
            ys.c
        )));
    }
    let mut out = Tensor::zeros(ys);
    let plane = ys.h * ys.w;
    for n in 0..ys.n {
        for c in 0..ys.c {
            let s = step[c];
            let base = (n * ys.c + c) * plane;
            for i in base..base + plane {
                out.data_mut()[i] = (y.data()[i] / s).round() * s;
            }
        }
    }
    Ok(out)
}

/// Integer symbols `round(y / s[c])`.
pub fn quantize_symbols<T: Scalar>(y: &Tensor<T>, step: &[T]) -> Result<Vec<i32>, Error> {
    let ys = y.shape();
    if step.len() != ys.c {
        return Err(Error::Dimension("step vector length mismatch".into()));
    }
    let plane = ys.h * ys.w;
    let mut out = vec![0i32; y.len()];
    for n in 0..ys.n {
        for c in 0..ys.c {
            let s = step[c];
            let base = (n * ys.c + c) * plane;
            for i in base..base + plane {
                out[i] = (y.data()[i] / s).round().to_f64() as i32;
            }
        }
    }
    Ok(out)
}

/// Differentiable estimate of the coded bits of `y_tilde` under a Gaussian
/// with the given per-position `mean` / `scale` and per-channel bin width
/// `step`: `-log2(Phi((y + s/2 - mu)/sigma) - Phi((y - s/2 - mu)/sigma))`
/// per element.
pub fn gaussian_bits<T: Scalar>(
    y: &Tensor<T>,
    mean: &Tensor<T>,
    scale: &Tensor<T>,
    step: &[T],
) -> Result<Tensor<T>, Error> {
    let ys = y.shape();
    if mean.shape() != ys || scale.shape() != ys {
        return Err(Error::Dimension(
            "mean/scale shape does not match y".into(),
        ));
    }
    if step.len() != ys.c {
        return Err(Error::Dimension("step vector length mismatch".into()));
    }
    let mut out = Tensor::zeros(ys);
    let plane = ys.h * ys.w;
    for n in 0..ys.n {
        for c in 0..ys.c {
            let s = step[c].to_f64();
            let base = (n * ys.c + c) * plane;
            for i in base..base + plane {
                let yv = y.data()[i].to_f64();
                let mu = mean.data()[i].to_f64();
                let sg = scale.data()[i].to_f64();
                let hi = std_normal_cdf((yv + 0.5 * s - mu) / sg);
                let lo = std_normal_cdf((yv - 0.5 * s - mu) / sg);
                let p = (hi - lo).max(RATE_P_FLOOR);
                out.data_mut()[i] = T::from_f64(-libm::log(p) / LN2);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`gaussian_bits`]: `(d/dy, d/dmean, d/dscale, d/dstep)`.
#[allow(clippy::type_complexity)]
pub fn gaussian_bits_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    y: &Tensor<T>,
    mean: &Tensor<T>,
    scale: &Tensor<T>,
    step: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Vec<T>) {
    let ys = y.shape();
    let plane = ys.h * ys.w;
    let mut gy = Tensor::zeros(ys);
    let mut gmean = Tensor::zeros(ys);
    let mut gscale = Tensor::zeros(ys);
    let mut gstep = vec![T::ZERO; step.len()];
    for n in 0..ys.n {
        for c in 0..ys.c {
            let s = step[c].to_f64();
            let base = (n * ys.c + c) * plane;
            for i in base..base + plane {
                let yv = y.data()[i].to_f64();
                let mu = mean.data()[i].to_f64();
                let sg = scale.data()[i].to_f64();
                let u_hi = (yv + 0.5 * s - mu) / sg;
                let u_lo = (yv - 0.5 * s - mu) / sg;
                let p = std_normal_cdf(u_hi) - std_normal_cdf(u_lo);
                if p <= RATE_P_FLOOR {
                    continue; // clamped region: flat
                }
                let common = grad_out.data()[i].to_f64() / (p * LN2);
                let phi_hi = std_normal_pdf(u_hi);
                let phi_lo = std_normal_pdf(u_lo);
                gy.data_mut()[i] = T::from_f64(-common * (phi_hi - phi_lo) / sg);
                gmean.data_mut()[i] = T::from_f64(common * (phi_hi - phi_lo) / sg);
                gscale.data_mut()[i] = T::from_f64(common * (phi_hi * u_hi - phi_lo * u_lo) / sg);
                gstep[c] += T::from_f64(-common * (phi_hi + phi_lo) / (2.0 * sg));
            }
        }
    }
    (gy, gmean, gscale, gstep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Deliberately naive reference convolution: per output element, gather
    /// with explicit bounds checks. Kept independent of `conv2d`.
    fn reference_conv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let xs = x.shape();
        let (kh, kw) = p.kernel();
        let oh = (xs.h + 2 * p.padding - kh) / p.stride + 1;
        let ow = (xs.w + 2 * p.padding - kw) / p.stride + 1;
        let cin_g = p.weight.shape().c;
        let cout_g = p.c_out() / p.groups;
        let mut out = Tensor::zeros(Shape::new(xs.n, p.c_out(), oh, ow));
        for n in 0..xs.n {
            for co in 0..p.c_out() {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = p.bias.data()[co];
                        for ci_l in 0..cin_g {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let ih = y as isize * p.stride as isize + a as isize
                                        - p.padding as isize;
                                    let iw = xo as isize * p.stride as isize + b as isize
                                        - p.padding as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < xs.h
                                        && (iw as usize) < xs.w
                                    {
                                        let ci = (co / cout_g) * cin_g + ci_l;
                                        acc += x.at(n, ci, ih as usize, iw as usize)
                                            * p.weight.at(co, ci_l, a, b);
                                    }
                                }
                            }
                        }
                        *out.at_mut(n, co, y, xo) = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
        Tensor::rand_uniform(shape, 1.0, rng)
    }

    #[test]
    fn conv_all_ones_sums_kernel() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f64);
        let p = ConvParams {
            weight: Tensor::full(Shape::new(1, 1, 3, 3), 1.0),
            bias: Tensor::zeros(Shape::new(1, 1, 1, 1)),
            stride: 1,
            padding: 0,
            groups: 1,
        };
        let out = conv2d(&x, &p).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(out.data()[0], 9.0);
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut rng = Rng::new(3);
        let x = random_tensor(Shape::new(2, 3, 5, 4), &mut rng);
        let mut w = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for c in 0..3 {
            *w.at_mut(c, c, 0, 0) = 1.0;
        }
        let p = ConvParams {
            weight: w,
            bias: Tensor::zeros(Shape::new(3, 1, 1, 1)),
            stride: 1,
            padding: 0,
            groups: 1,
        };
        let out = conv2d(&x, &p).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_matches_reference_on_random_instances() {
        let mut rng = Rng::new(17);
        for (stride, pad, groups) in [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 1, 2), (2, 1, 4)] {
            let c_in = 4;
            let c_out = 4;
            let x = random_tensor(Shape::new(2, c_in, 6, 5), &mut rng);
            let p = ConvParams {
                weight: random_tensor(Shape::new(c_out, c_in / groups, 3, 3), &mut rng),
                bias: random_tensor(Shape::new(c_out, 1, 1, 1), &mut rng),
                stride,
                padding: pad,
                groups,
            };
            let got = conv2d(&x, &p).unwrap();
            let want = reference_conv(&x, &p);
            assert!(
                got.max_rel_diff(&want, 1.0) < 1e-12,
                "mismatch at stride={stride} pad={pad} groups={groups}"
            );
        }
    }

    #[test]
    fn depthwise_equals_per_channel_convolution() {
        let mut rng = Rng::new(5);
        let c = 3;
        let x = random_tensor(Shape::new(1, c, 5, 5), &mut rng);
        let w = random_tensor(Shape::new(c, 1, 3, 3), &mut rng);
        let b = random_tensor(Shape::new(c, 1, 1, 1), &mut rng);
        let p = ConvParams {
            weight: w.clone(),
            bias: b.clone(),
            stride: 1,
            padding: 1,
            groups: c,
        };
        let got = conv2d(&x, &p).unwrap();
        for ch in 0..c {
            let xc = slice_channels(&x, ch, ch + 1).unwrap();
            let pc = ConvParams {
                weight: Tensor::from_vec(
                    Shape::new(1, 1, 3, 3),
                    w.data()[ch * 9..(ch + 1) * 9].to_vec(),
                )
                .unwrap(),
                bias: Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![b.data()[ch]]).unwrap(),
                stride: 1,
                padding: 1,
                groups: 1,
            };
            let want = conv2d(&xc, &pc).unwrap();
            let gotc = slice_channels(&got, ch, ch + 1).unwrap();
            assert!(gotc.max_rel_diff(&want, 1.0) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let p = ConvParams::<f32> {
            weight: Tensor::zeros(Shape::new(1, 3, 3, 3)),
            bias: Tensor::zeros(Shape::new(1, 1, 1, 1)),
            stride: 1,
            padding: 1,
            groups: 1,
        };
        assert!(matches!(conv2d(&x, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_backward_zero_grad_gives_zero() {
        let mut rng = Rng::new(11);
        let x = random_tensor(Shape::new(1, 2, 4, 4), &mut rng);
        let p = ConvParams {
            weight: random_tensor(Shape::new(3, 2, 3, 3), &mut rng),
            bias: random_tensor(Shape::new(3, 1, 1, 1), &mut rng),
            stride: 1,
            padding: 1,
            groups: 1,
        };
        let go = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let (gx, gw, gb) = conv2d_backward(&go, &x, &p).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn leaky_relu_piecewise_values() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![2.0f64, -1.0]).unwrap();
        let out = leaky_relu(&x, 0.01);
        assert_eq!(out.data(), &[2.0, -0.01]);
    }

    #[test]
    fn leaky_relu_positive_homogeneity() {
        let mut rng = Rng::new(23);
        let x = random_tensor(Shape::new(1, 4, 3, 3), &mut rng);
        for &a in &[0.5, 2.0, 7.25] {
            let lhs = leaky_relu(&x.map(|v| v * a), 0.01);
            let rhs = leaky_relu(&x, 0.01).map(|v| v * a);
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }

    #[test]
    fn channel_scale_identity_and_zero() {
        let mut rng = Rng::new(31);
        let x = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        let ones = vec![1.0f64; 3];
        assert_eq!(channel_scale(&x, &ones).unwrap(), x);
        let zeros = vec![0.0f64; 3];
        assert!(channel_scale(&x, &zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(channel_scale(&x, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn subpixel_shape_and_inverse() {
        let mut rng = Rng::new(37);
        let x = random_tensor(Shape::new(1, 4, 2, 2), &mut rng);
        let up = subpixel_upsample(&x, 2).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 1, 4, 4));
        let back = space_to_depth(&up, 2).unwrap();
        assert_eq!(back, x);
        assert!(subpixel_upsample(&random_tensor(Shape::new(1, 3, 2, 2), &mut rng), 2).is_err());
    }

    #[test]
    fn subpixel_constant_stays_constant() {
        let x = Tensor::full(Shape::new(1, 8, 3, 3), 0.75f64);
        let up = subpixel_upsample(&x, 2).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn checkerboard_two_by_two() {
        let x =
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let anchors = checker_mask(&x, Parity::Anchor);
        let non = checker_mask(&x, Parity::NonAnchor);
        // anchors hold (0,0) and (1,1); non-anchors hold (0,1) and (1,0)
        assert_eq!(anchors.data(), &[1.0, 0.0, 0.0, 4.0]);
        assert_eq!(non.data(), &[0.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn quantize_round_examples() {
        let y = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.3f64, -0.6]).unwrap();
        let out = quantize_round(&y, &[1.0]).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);
        let syms = quantize_symbols(&y, &[1.0]).unwrap();
        assert_eq!(syms, vec![1, -1]);
    }

    #[test]
    fn gaussian_bits_small_at_mode_large_scale() {
        let y = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.0f64]).unwrap();
        let mean = y.clone();
        let scale = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![100.0f64]).unwrap();
        let bits = gaussian_bits(&y, &mean, &scale, &[1.0]).unwrap();
        assert!(bits.data()[0] > 0.0);
        assert!(bits.data()[0] > 5.0); // wide gaussian: ~log2(sigma) bits
    }
}
