//! Reverse-mode tape over the ops in [`crate::nn`].
//!
//! The forward pass records every executed op together with its input and
//! output slots; [`Tape::backward`] replays the records in reverse and
//! accumulates gradients into every slot that requires them. Slots are
//! immutable once written, and a single-threaded replay makes two backward
//! passes over identical inputs bitwise identical.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::nn::{self, Parity};
use crate::prior;
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a tape slot.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        out: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    LeakyRelu {
        x: Var,
        out: Var,
        slope: f64,
    },
    ChannelScale {
        x: Var,
        m: Var,
        out: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
        out: Var,
    },
    Add {
        a: Var,
        b: Var,
        out: Var,
    },
    Sub {
        a: Var,
        b: Var,
        out: Var,
    },
    Hadamard {
        a: Var,
        b: Var,
        out: Var,
    },
    ScaleConst {
        x: Var,
        k: f64,
        out: Var,
    },
    Exp {
        x: Var,
        out: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
        out: Var,
    },
    SubpixelUp {
        x: Var,
        r: usize,
        out: Var,
    },
    CheckerMask {
        x: Var,
        parity: Parity,
        out: Var,
    },
    ConcatC {
        a: Var,
        b: Var,
        out: Var,
    },
    SliceC {
        x: Var,
        c0: usize,
        c1: usize,
        out: Var,
    },
    PadHw {
        x: Var,
        out: Var,
    },
    CropHw {
        x: Var,
        out: Var,
    },
    SumAll {
        x: Var,
        out: Var,
    },
    QuantizeSte {
        y: Var,
        out: Var,
    },
    GaussianBits {
        y: Var,
        mean: Var,
        scale: Var,
        step: Var,
        out: Var,
    },
    FactorizedBits {
        z: Var,
        params: Var,
        out: Var,
    },
}

/// Ordered record of executed ops plus their values and gradients.
pub struct Tape<T: Scalar> {
    vals: Vec<Tensor<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
    ops: Vec<Op>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, requires: bool) -> Var {
        self.vals.push(value);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.vals.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.vals[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    // ─── op constructors ────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var, Error> {
        let out = nn::conv2d_raw(
            &self.vals[x.0],
            &self.vals[w.0],
            &self.vals[b.0],
            stride,
            padding,
            groups,
        )?;
        let req = self.any_requires(&[x, w, b]);
        let out = self.push(out, req);
        self.ops.push(Op::Conv2d {
            x,
            w,
            b,
            out,
            stride,
            padding,
            groups,
        });
        Ok(out)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = nn::leaky_relu(&self.vals[x.0], T::from_f64(slope));
        let req = self.requires[x.0];
        let out = self.push(out, req);
        self.ops.push(Op::LeakyRelu { x, out, slope });
        out
    }

    /// `x[n,c,h,w] * m[c]` with `m` a `[1, C, 1, 1]` slot.
    pub fn channel_scale(&mut self, x: Var, m: Var) -> Result<Var, Error> {
        let out = nn::channel_scale(&self.vals[x.0], self.vals[m.0].data())?;
        let req = self.any_requires(&[x, m]);
        let out = self.push(out, req);
        self.ops.push(Op::ChannelScale { x, m, out });
        Ok(out)
    }

    /// `x * s` with `s` a single-element slot.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, Error> {
        if self.vals[s.0].len() != 1 {
            return Err(Error::Dimension("scalar operand must have length 1".into()));
        }
        let sv = self.vals[s.0].data()[0];
        let out = self.vals[x.0].map(|v| v * sv);
        let req = self.any_requires(&[x, s]);
        let out = self.push(out, req);
        self.ops.push(Op::MulScalar { x, s, out });
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, Error> {
        self.zip(a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, Error> {
        self.zip(a, b, |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, Error> {
        self.zip(a, b, |x, y| x * y, |a, b, out| Op::Hadamard { a, b, out })
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(Var, Var, Var) -> Op,
    ) -> Result<Var, Error> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::Dimension(alloc::format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.vals[a.0].shape(),
                self.vals[b.0].shape()
            )));
        }
        let data = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(self.vals[a.0].shape(), data)?;
        let req = self.any_requires(&[a, b]);
        let out = self.push(t, req);
        self.ops.push(mk(a, b, out));
        Ok(out)
    }

    pub fn scale_const(&mut self, x: Var, k: f64) -> Var {
        let kk = T::from_f64(k);
        let out = self.vals[x.0].map(|v| v * kk);
        let req = self.requires[x.0];
        let out = self.push(out, req);
        self.ops.push(Op::ScaleConst { x, k, out });
        out
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.vals[x.0].map(|v| v.exp());
        let req = self.requires[x.0];
        let out = self.push(out, req);
        self.ops.push(Op::Exp { x, out });
        out
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let out = self.vals[x.0].map(|v| v.clamp(l, h));
        let req = self.requires[x.0];
        let out = self.push(out, req);
        self.ops.push(Op::Clamp { x, lo, hi, out });
        out
    }

    pub fn subpixel_upsample(&mut self, x: Var, r: usize) -> Result<Var, Error> {
        let out = nn::subpixel_upsample(&self.vals[x.0], r)?;
        let req = self.requires[x.0];
        let out = self.push(out, req);
        self.ops.push(Op::SubpixelUp { x, r, out });
        Ok(out)
    }

    pub fn checker_mask(&mut self, x: Var, parity: Parity) -> Var {
        let out = nn::checker_mask(&self.vals[x.0], parity);
        let req = self.requires[x.0];
        let out = self.push(out, req);
        self.ops.push(Op::CheckerMask { x, parity, out });
        out
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, Error> {
        let out = nn::concat_channels(&self.vals[a.0], &self.vals[b.0])?;
        let req = self.any_requires(&[a, b]);
        let out = self.push(out, req);
        self.ops.push(Op::ConcatC { a, b, out });
        Ok(out)
    }

    pub fn slice_channels(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var, Error> {
        let out = nn::slice_channels(&self.vals[x.0], c0, c1)?;
        let req = self.requires[x.0];
        let out = self.push(out, req);
        self.ops.push(Op::SliceC { x, c0, c1, out });
        Ok(out)
    }

    pub fn pad_hw(&mut self, x: Var, h_to: usize, w_to: usize) -> Result<Var, Error> {
        let out = nn::pad_hw(&self.vals[x.0], h_to, w_to)?;
        let req = self.requires[x.0];
        let out = self.push(out, req);
        self.ops.push(Op::PadHw { x, out });
        Ok(out)
    }

    pub fn crop_hw(&mut self, x: Var, h_to: usize, w_to: usize) -> Result<Var, Error> {
        let out = nn::crop_hw(&self.vals[x.0], h_to, w_to)?;
        let req = self.requires[x.0];
        let out = self.push(out, req);
        self.ops.push(Op::CropHw { x, out });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.vals[x.0].data() {
            acc += v;
        }
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![acc]).unwrap();
        let req = self.requires[x.0];
        let out = self.push(t, req);
        self.ops.push(Op::SumAll { x, out });
        out
    }

    /// Round to the step lattice with a straight-through gradient: the
    /// backward pass treats the op as identity in `y` and passes nothing to
    /// the step.
    pub fn quantize_ste(&mut self, y: Var, step: Var) -> Result<Var, Error> {
        let out = nn::quantize_round(&self.vals[y.0], self.vals[step.0].data())?;
        let req = self.requires[y.0];
        let out = self.push(out, req);
        self.ops.push(Op::QuantizeSte { y, out });
        Ok(out)
    }

    /// Differentiable rate estimate; `step` is a `[1, C, 1, 1]` slot.
    pub fn gaussian_bits(
        &mut self,
        y: Var,
        mean: Var,
        scale: Var,
        step: Var,
    ) -> Result<Var, Error> {
        let out = nn::gaussian_bits(
            &self.vals[y.0],
            &self.vals[mean.0],
            &self.vals[scale.0],
            self.vals[step.0].data(),
        )?;
        let req = self.any_requires(&[y, mean, scale, step]);
        let out = self.push(out, req);
        self.ops.push(Op::GaussianBits {
            y,
            mean,
            scale,
            step,
            out,
        });
        Ok(out)
    }

    /// Differentiable rate of the hyper-latent under the factorized prior.
    pub fn factorized_bits(&mut self, z: Var, params: Var) -> Result<Var, Error> {
        let out = prior::factorized_bits(&self.vals[z.0], &self.vals[params.0])?;
        let req = self.any_requires(&[z, params]);
        let out = self.push(out, req);
        self.ops.push(Op::FactorizedBits { z, params, out });
        Ok(out)
    }

    // ─── backward ───────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, delta: Tensor<T>) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += *di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn take_out_grad(&self, out: Var) -> Option<Tensor<T>> {
        self.grads[out.0].clone()
    }

    /// Seed `d loss / d loss = 1` and replay the tape in reverse. `loss` must
    /// be a single-element slot.
    pub fn backward(&mut self, loss: Var) -> Result<(), Error> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::Invalid("backward needs a scalar loss slot".into()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::full(self.vals[loss.0].shape(), T::ONE));

        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            match op {
                Op::Conv2d {
                    x,
                    w,
                    b,
                    out,
                    stride,
                    padding,
                    groups,
                } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let (gx, gw, gb) = nn::conv2d_backward_raw(
                        &go,
                        &self.vals[x.0],
                        &self.vals[w.0],
                        stride,
                        padding,
                        groups,
                    )?;
                    // bias slots may be stored [C,1,1,1] or [1,C,1,1]; lengths match
                    let gb = Tensor::from_vec(self.vals[b.0].shape(), gb.into_data())?;
                    self.accumulate(x, gx);
                    self.accumulate(w, gw);
                    self.accumulate(b, gb);
                }
                Op::LeakyRelu { x, out, slope } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let gx = nn::leaky_relu_backward(&go, &self.vals[x.0], T::from_f64(slope));
                    self.accumulate(x, gx);
                }
                Op::ChannelScale { x, m, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let (gx, gm) =
                        nn::channel_scale_backward(&go, &self.vals[x.0], self.vals[m.0].data());
                    let gm = Tensor::from_vec(self.vals[m.0].shape(), gm)?;
                    self.accumulate(x, gx);
                    self.accumulate(m, gm);
                }
                Op::MulScalar { x, s, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let sv = self.vals[s.0].data()[0];
                    let gx = go.map(|g| g * sv);
                    let mut gs = T::ZERO;
                    for (&g, &xv) in go.data().iter().zip(self.vals[x.0].data()) {
                        gs += g * xv;
                    }
                    let gs = Tensor::from_vec(self.vals[s.0].shape(), vec![gs])?;
                    self.accumulate(x, gx);
                    self.accumulate(s, gs);
                }
                Op::Add { a, b, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    self.accumulate(a, go.clone());
                    self.accumulate(b, go);
                }
                Op::Sub { a, b, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    self.accumulate(a, go.clone());
                    self.accumulate(b, go.map(|g| -g));
                }
                Op::Hadamard { a, b, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let ga_data: Vec<T> = go
                        .data()
                        .iter()
                        .zip(self.vals[b.0].data())
                        .map(|(&g, &bv)| g * bv)
                        .collect();
                    let gb_data: Vec<T> = go
                        .data()
                        .iter()
                        .zip(self.vals[a.0].data())
                        .map(|(&g, &av)| g * av)
                        .collect();
                    let sh = go.shape();
                    self.accumulate(a, Tensor::from_vec(sh, ga_data)?);
                    self.accumulate(b, Tensor::from_vec(sh, gb_data)?);
                }
                Op::ScaleConst { x, k, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let kk = T::from_f64(k);
                    self.accumulate(x, go.map(|g| g * kk));
                }
                Op::Exp { x, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let data: Vec<T> = go
                        .data()
                        .iter()
                        .zip(self.vals[out.0].data())
                        .map(|(&g, &o)| g * o)
                        .collect();
                    let gx = Tensor::from_vec(go.shape(), data)?;
                    self.accumulate(x, gx);
                }
                Op::Clamp { x, lo, hi, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let (l, h) = (T::from_f64(lo), T::from_f64(hi));
                    let data: Vec<T> = go
                        .data()
                        .iter()
                        .zip(self.vals[x.0].data())
                        .map(|(&g, &xv)| if xv > l && xv < h { g } else { T::ZERO })
                        .collect();
                    self.accumulate(x, Tensor::from_vec(go.shape(), data)?);
                }
                Op::SubpixelUp { x, r, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let gx = nn::space_to_depth(&go, r)?;
                    self.accumulate(x, gx);
                }
                Op::CheckerMask { x, parity, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    self.accumulate(x, nn::checker_mask(&go, parity));
                }
                Op::ConcatC { a, b, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let ca = self.vals[a.0].shape().c;
                    let cc = go.shape().c;
                    let ga = nn::slice_channels(&go, 0, ca)?;
                    let gb = nn::slice_channels(&go, ca, cc)?;
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::SliceC { x, c0, c1, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let xs = self.vals[x.0].shape();
                    let mut gx = Tensor::zeros(xs);
                    for n in 0..xs.n {
                        for c in c0..c1 {
                            for hh in 0..xs.h {
                                for ww in 0..xs.w {
                                    *gx.at_mut(n, c, hh, ww) = go.at(n, c - c0, hh, ww);
                                }
                            }
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::PadHw { x, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let xs = self.vals[x.0].shape();
                    let gx = nn::crop_hw(&go, xs.h, xs.w)?;
                    self.accumulate(x, gx);
                }
                Op::CropHw { x, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let xs = self.vals[x.0].shape();
                    let gx = nn::pad_hw(&go, xs.h, xs.w)?;
                    self.accumulate(x, gx);
                }
                Op::SumAll { x, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let g = go.data()[0];
                    let gx = Tensor::full(self.vals[x.0].shape(), g);
                    self.accumulate(x, gx);
                }
                Op::QuantizeSte { y, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    self.accumulate(y, go);
                }
                Op::GaussianBits {
                    y,
                    mean,
                    scale,
                    step,
                    out,
                } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let (gy, gmean, gscale, gstep) = nn::gaussian_bits_backward(
                        &go,
                        &self.vals[y.0],
                        &self.vals[mean.0],
                        &self.vals[scale.0],
                        self.vals[step.0].data(),
                    );
                    let gstep = Tensor::from_vec(self.vals[step.0].shape(), gstep)?;
                    self.accumulate(y, gy);
                    self.accumulate(mean, gmean);
                    self.accumulate(scale, gscale);
                    self.accumulate(step, gstep);
                }
                Op::FactorizedBits { z, params, out } => {
                    let Some(go) = self.take_out_grad(out) else {
                        continue;
                    };
                    let (gz, gp) =
                        prior::factorized_bits_backward(&go, &self.vals[z.0], &self.vals[params.0]);
                    self.accumulate(z, gz);
                    self.accumulate(params, gp);
                }
            }
        }
        Ok(())
    }
}
