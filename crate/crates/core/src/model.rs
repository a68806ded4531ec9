//! The codec network: encoder, decoder, hyper encoder/decoder, dual spatial
//! prior, and variable-rate quantization steps.
//!
//! Block topology
//!
//! * encoder stage: residual block (stride-2 downsample) followed by a
//!   depth-conv block, widths `c1..c4`, then a 3x3 projection to the latent.
//! * decoder mirrors the encoder with sub-pixel x2 upsampling per stage.
//! * residual block: Conv#1 3x3 (expands to the stage width), Conv#2 3x3,
//!   Conv#3 1x1 shortcut.
//! * depth-conv block: 1x1 Conv#1, 3x3 depthwise, 1x1 Conv#2 back to the
//!   stage width with an identity skip, then the 1x1 Conv#3 (4x expansion) /
//!   Conv#4 (contraction) pair with a second identity skip.
//!
//! Forward passes are written once against the [`Fwd`] abstraction and run
//! either over plain tensors ([`PureFwd`]) or on the autograd tape
//! ([`TapeFwd`]), so the evaluation path and the training graph share one
//! topology. Mask layers hook into fixed [`MaskSite`]s; sites of kind
//! [`MaskKind::StageOutput`] within one stage resolve to one shared mask, and
//! the shared mask multiplies each conv branch *before* the residual adds so
//! identity skips carry unscaled values and gradients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::Error;
use crate::nn::{self, Parity};
use crate::prior::FactorizedPrior;
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// `(C1, C2, C3, C4)` widths of the four coding stages.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ChannelScheme {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub c4: usize,
}

impl ChannelScheme {
    pub fn new(c1: usize, c2: usize, c3: usize, c4: usize) -> Self {
        ChannelScheme { c1, c2, c3, c4 }
    }

    pub fn small() -> Self {
        ChannelScheme::new(64, 64, 128, 192)
    }

    pub fn medium() -> Self {
        ChannelScheme::new(128, 128, 192, 192)
    }

    pub fn large() -> Self {
        ChannelScheme::new(192, 192, 192, 192)
    }

    pub fn widths(&self) -> [usize; 4] {
        [self.c1, self.c2, self.c3, self.c4]
    }

    /// Every stage at least as wide as `other`.
    pub fn covers(&self, other: &ChannelScheme) -> bool {
        self.widths()
            .iter()
            .zip(other.widths().iter())
            .all(|(a, b)| a >= b)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.widths().iter().any(|&w| w == 0) {
            return Err(Error::Invalid("channel scheme has a zero width".into()));
        }
        Ok(())
    }
}

/// Which half of the codec a mask site lives in.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Half {
    Encoder,
    Decoder,
}

/// The four insertion patterns.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum MaskKind {
    /// Shared over all conv branches feeding the stage output.
    StageOutput,
    /// Between Conv#1 and Conv#2 of the residual block.
    ResidualInner,
    /// Before the depthwise conv of the depth-conv block.
    DepthInner,
    /// Between the 4x expansion and the contraction.
    FfnExpansion,
}

/// Identity of one mask insertion point.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct MaskSite {
    pub half: Half,
    pub stage: usize,
    pub kind: MaskKind,
}

impl MaskSite {
    pub fn new(half: Half, stage: usize, kind: MaskKind) -> Self {
        MaskSite { half, stage, kind }
    }
}

/// Convolution layer with stable parameter slots (`wid`/`bid` index into the
/// model's canonical parameter order).
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub(crate) wid: usize,
    pub(crate) bid: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn init(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (c_in / groups) * k * k;
        let fan_out = (c_out / groups) * k * k;
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let weight = Tensor::rand_uniform(Shape::new(c_out, c_in / groups, k, k), bound, rng);
        let bbound = 1.0 / libm::sqrt(fan_in as f64);
        let bias = Tensor::rand_uniform(Shape::new(c_out, 1, 1, 1), bbound, rng);
        ConvLayer {
            weight,
            bias,
            stride,
            padding,
            groups,
            wid: usize::MAX,
            bid: usize::MAX,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
            wid: self.wid,
            bid: self.bid,
        }
    }
}

// ─── forward abstraction ───────────────────────────────────────────────────

/// Mask values consulted by a forward pass; absent sites mean identity.
pub trait MaskLookup<T> {
    fn mask_values(&self, site: MaskSite) -> Option<&[T]>;
}

/// No masks anywhere.
pub struct NoMasks;

impl<T> MaskLookup<T> for NoMasks {
    fn mask_values(&self, _site: MaskSite) -> Option<&[T]> {
        None
    }
}

/// Execution context for the shared forward topology.
pub trait Fwd<T: Scalar> {
    type V: Clone;

    fn conv(&mut self, layer: &ConvLayer<T>, x: &Self::V) -> Result<Self::V, Error>;
    fn leaky(&mut self, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, Error>;
    fn subpixel(&mut self, x: &Self::V, r: usize) -> Result<Self::V, Error>;
    fn mask(&mut self, site: MaskSite, x: &Self::V) -> Result<Self::V, Error>;
}

/// Plain tensor execution, optionally with mask values applied.
pub struct PureFwd<'a, T: Scalar> {
    pub slope: T,
    pub masks: &'a dyn MaskLookup<T>,
}

impl<'a, T: Scalar> PureFwd<'a, T> {
    pub fn new(slope: f64, masks: &'a dyn MaskLookup<T>) -> Self {
        PureFwd {
            slope: T::from_f64(slope),
            masks,
        }
    }
}

impl<'a, T: Scalar> Fwd<T> for PureFwd<'a, T> {
    type V = Tensor<T>;

    fn conv(&mut self, layer: &ConvLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>, Error> {
        nn::conv2d_raw(
            x,
            &layer.weight,
            &layer.bias,
            layer.stride,
            layer.padding,
            layer.groups,
        )
    }

    fn leaky(&mut self, x: &Tensor<T>) -> Tensor<T> {
        nn::leaky_relu(x, self.slope)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, Error> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension("add on mismatched shapes".into()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        Tensor::from_vec(a.shape(), data)
    }

    fn subpixel(&mut self, x: &Tensor<T>, r: usize) -> Result<Tensor<T>, Error> {
        nn::subpixel_upsample(x, r)
    }

    fn mask(&mut self, site: MaskSite, x: &Tensor<T>) -> Result<Tensor<T>, Error> {
        match self.masks.mask_values(site) {
            Some(m) => nn::channel_scale(x, m),
            None => Ok(x.clone()),
        }
    }
}

/// Tape execution: parameters and masks are tape leaves.
pub struct TapeFwd<T: Scalar> {
    pub tape: Tape<T>,
    param_vars: Vec<Var>,
    mask_vars: BTreeMap<MaskSite, Var>,
    slope: f64,
}

impl<T: Scalar> TapeFwd<T> {
    /// Register every model parameter (and optionally per-site mask tensors)
    /// as tape leaves. Shared masks pass the same tensor for several sites
    /// under one leaf by listing the same mask index; here they are simply
    /// registered once per distinct site tensor pointer, so callers pass one
    /// `(site, tensor)` pair per site and shared groups reuse a tensor.
    pub fn new(model: &Model<T>, masks: &[(MaskSite, Tensor<T>)]) -> Self {
        let mut tape = Tape::new();
        let mut param_vars = Vec::new();
        model.for_each_param(&mut |t: &Tensor<T>| {
            param_vars.push(tape.leaf(t.clone(), true));
        });
        let mut mask_vars = BTreeMap::new();
        for (site, values) in masks {
            let var = tape.leaf(values.clone(), true);
            mask_vars.insert(*site, var);
        }
        TapeFwd {
            tape,
            param_vars,
            mask_vars,
            slope: model.cfg.leaky_slope,
        }
    }

    /// Register a shared mask leaf for several sites at once.
    pub fn add_shared_mask(&mut self, sites: &[MaskSite], values: Tensor<T>) -> Var {
        let var = self.tape.leaf(values, true);
        for site in sites {
            self.mask_vars.insert(*site, var);
        }
        var
    }

    pub fn param_var(&self, id: usize) -> Var {
        self.param_vars[id]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.param_vars
    }

    pub fn mask_var(&self, site: MaskSite) -> Option<Var> {
        self.mask_vars.get(&site).copied()
    }
}

impl<T: Scalar> Fwd<T> for TapeFwd<T> {
    type V = Var;

    fn conv(&mut self, layer: &ConvLayer<T>, x: &Var) -> Result<Var, Error> {
        let w = self.param_vars[layer.wid];
        let b = self.param_vars[layer.bid];
        self.tape
            .conv2d(*x, w, b, layer.stride, layer.padding, layer.groups)
    }

    fn leaky(&mut self, x: &Var) -> Var {
        self.tape.leaky_relu(*x, self.slope)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var, Error> {
        self.tape.add(*a, *b)
    }

    fn subpixel(&mut self, x: &Var, r: usize) -> Result<Var, Error> {
        self.tape.subpixel_upsample(*x, r)
    }

    fn mask(&mut self, site: MaskSite, x: &Var) -> Result<Var, Error> {
        match self.mask_vars.get(&site) {
            Some(m) => self.tape.channel_scale(*x, *m),
            None => Ok(*x),
        }
    }
}

// ─── blocks ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ResidualBlockDown<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub shortcut: ConvLayer<T>,
}

impl<T: Scalar> ResidualBlockDown<T> {
    fn init(c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Self {
        ResidualBlockDown {
            conv1: ConvLayer::init(c_out, c_in, 3, stride, 1, 1, rng),
            conv2: ConvLayer::init(c_out, c_out, 3, 1, 1, 1, rng),
            shortcut: ConvLayer::init(c_out, c_in, 1, stride, 0, 1, rng),
        }
    }

    pub fn forward<F: Fwd<T>>(
        &self,
        f: &mut F,
        x: &F::V,
        half: Half,
        stage: usize,
    ) -> Result<F::V, Error> {
        let inner = MaskSite::new(half, stage, MaskKind::ResidualInner);
        let outer = MaskSite::new(half, stage, MaskKind::StageOutput);
        let a = f.conv(&self.conv1, x)?;
        let a = f.mask(inner, &a)?;
        let a = f.leaky(&a);
        let a = f.conv(&self.conv2, &a)?;
        let a = f.mask(outer, &a)?;
        let s = f.conv(&self.shortcut, x)?;
        let s = f.mask(outer, &s)?;
        f.add(&a, &s)
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlockUp<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub shortcut: ConvLayer<T>,
}

impl<T: Scalar> ResidualBlockUp<T> {
    fn init(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        ResidualBlockUp {
            conv1: ConvLayer::init(4 * c_out, c_in, 3, 1, 1, 1, rng),
            conv2: ConvLayer::init(c_out, c_out, 3, 1, 1, 1, rng),
            shortcut: ConvLayer::init(4 * c_out, c_in, 1, 1, 0, 1, rng),
        }
    }

    pub fn forward<F: Fwd<T>>(
        &self,
        f: &mut F,
        x: &F::V,
        half: Half,
        stage: usize,
    ) -> Result<F::V, Error> {
        let inner = MaskSite::new(half, stage, MaskKind::ResidualInner);
        let outer = MaskSite::new(half, stage, MaskKind::StageOutput);
        let a = f.conv(&self.conv1, x)?;
        let a = f.subpixel(&a, 2)?;
        let a = f.mask(inner, &a)?;
        let a = f.leaky(&a);
        let a = f.conv(&self.conv2, &a)?;
        let a = f.mask(outer, &a)?;
        let s = f.conv(&self.shortcut, x)?;
        let s = f.subpixel(&s, 2)?;
        let s = f.mask(outer, &s)?;
        f.add(&a, &s)
    }
}

#[derive(Clone, Debug)]
pub struct DepthConvBlock<T> {
    pub conv_in: ConvLayer<T>,
    pub dw: ConvLayer<T>,
    pub conv_mid: ConvLayer<T>,
    pub ffn_expand: ConvLayer<T>,
    pub ffn_contract: ConvLayer<T>,
}

impl<T: Scalar> DepthConvBlock<T> {
    fn init(width: usize, rng: &mut Rng) -> Self {
        DepthConvBlock {
            conv_in: ConvLayer::init(width, width, 1, 1, 0, 1, rng),
            dw: ConvLayer::init(width, width, 3, 1, 1, width, rng),
            conv_mid: ConvLayer::init(width, width, 1, 1, 0, 1, rng),
            ffn_expand: ConvLayer::init(4 * width, width, 1, 1, 0, 1, rng),
            ffn_contract: ConvLayer::init(width, 4 * width, 1, 1, 0, 1, rng),
        }
    }

    pub fn forward<F: Fwd<T>>(
        &self,
        f: &mut F,
        x: &F::V,
        half: Half,
        stage: usize,
    ) -> Result<F::V, Error> {
        let inner = MaskSite::new(half, stage, MaskKind::DepthInner);
        let expansion = MaskSite::new(half, stage, MaskKind::FfnExpansion);
        let outer = MaskSite::new(half, stage, MaskKind::StageOutput);
        let a = f.conv(&self.conv_in, x)?;
        let a = f.mask(inner, &a)?;
        let a = f.leaky(&a);
        let a = f.conv(&self.dw, &a)?;
        let a = f.leaky(&a);
        let a = f.conv(&self.conv_mid, &a)?;
        let a = f.mask(outer, &a)?;
        let u = f.add(&a, x)?;
        let b = f.conv(&self.ffn_expand, &u)?;
        let b = f.mask(expansion, &b)?;
        let b = f.leaky(&b);
        let b = f.conv(&self.ffn_contract, &b)?;
        let b = f.mask(outer, &b)?;
        f.add(&b, &u)
    }
}

// ─── encoder / decoder / hyper nets ────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EncoderStage<T> {
    pub rb: ResidualBlockDown<T>,
    pub dcb: DepthConvBlock<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub stages: Vec<EncoderStage<T>>,
    pub proj: ConvLayer<T>,
    pub scheme: ChannelScheme,
}

impl<T: Scalar> Encoder<T> {
    pub fn init(scheme: ChannelScheme, stages: usize, latent: usize, rng: &mut Rng) -> Self {
        let widths = scheme.widths();
        let mut blocks = Vec::new();
        let mut c_in = 3usize;
        for &w in widths.iter().take(stages) {
            blocks.push(EncoderStage {
                rb: ResidualBlockDown::init(c_in, w, 2, rng),
                dcb: DepthConvBlock::init(w, rng),
            });
            c_in = w;
        }
        Encoder {
            stages: blocks,
            proj: ConvLayer::init(latent, c_in, 3, 1, 1, 1, rng),
            scheme,
        }
    }

    pub fn forward<F: Fwd<T>>(&self, f: &mut F, x: &F::V) -> Result<F::V, Error> {
        let mut v = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            v = stage.rb.forward(f, &v, Half::Encoder, i)?;
            v = stage.dcb.forward(f, &v, Half::Encoder, i)?;
        }
        f.conv(&self.proj, &v)
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer<T>> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend([&s.rb.conv1, &s.rb.conv2, &s.rb.shortcut]);
            out.extend([
                &s.dcb.conv_in,
                &s.dcb.dw,
                &s.dcb.conv_mid,
                &s.dcb.ffn_expand,
                &s.dcb.ffn_contract,
            ]);
        }
        out.push(&self.proj);
        out
    }

    pub fn conv_layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        let mut out: Vec<&mut ConvLayer<T>> = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.rb.conv1);
            out.push(&mut s.rb.conv2);
            out.push(&mut s.rb.shortcut);
            out.push(&mut s.dcb.conv_in);
            out.push(&mut s.dcb.dw);
            out.push(&mut s.dcb.conv_mid);
            out.push(&mut s.dcb.ffn_expand);
            out.push(&mut s.dcb.ffn_contract);
        }
        out.push(&mut self.proj);
        out
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            stages: self
                .stages
                .iter()
                .map(|s| EncoderStage {
                    rb: ResidualBlockDown {
                        conv1: s.rb.conv1.cast(),
                        conv2: s.rb.conv2.cast(),
                        shortcut: s.rb.shortcut.cast(),
                    },
                    dcb: cast_dcb(&s.dcb),
                })
                .collect(),
            proj: self.proj.cast(),
            scheme: self.scheme,
        }
    }
}

fn cast_dcb<T: Scalar, U: Scalar>(d: &DepthConvBlock<T>) -> DepthConvBlock<U> {
    DepthConvBlock {
        conv_in: d.conv_in.cast(),
        dw: d.dw.cast(),
        conv_mid: d.conv_mid.cast(),
        ffn_expand: d.ffn_expand.cast(),
        ffn_contract: d.ffn_contract.cast(),
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage<T> {
    pub rb: ResidualBlockUp<T>,
    pub dcb: DepthConvBlock<T>,
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub stages: Vec<DecoderStage<T>>,
    pub proj: ConvLayer<T>,
    pub scheme: ChannelScheme,
}

impl<T: Scalar> Decoder<T> {
    fn init(scheme: ChannelScheme, stages: usize, latent: usize, rng: &mut Rng) -> Self {
        // mirror the encoder: deepest width first
        let widths: Vec<usize> = scheme.widths()[..stages].iter().rev().copied().collect();
        let mut blocks = Vec::new();
        let mut c_in = latent;
        for &w in &widths {
            blocks.push(DecoderStage {
                rb: ResidualBlockUp::init(c_in, w, rng),
                dcb: DepthConvBlock::init(w, rng),
            });
            c_in = w;
        }
        Decoder {
            stages: blocks,
            proj: ConvLayer::init(3, c_in, 3, 1, 1, 1, rng),
            scheme,
        }
    }

    pub fn forward<F: Fwd<T>>(&self, f: &mut F, y: &F::V) -> Result<F::V, Error> {
        let mut v = y.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            v = stage.rb.forward(f, &v, Half::Decoder, i)?;
            v = stage.dcb.forward(f, &v, Half::Decoder, i)?;
        }
        f.conv(&self.proj, &v)
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer<T>> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend([&s.rb.conv1, &s.rb.conv2, &s.rb.shortcut]);
            out.extend([
                &s.dcb.conv_in,
                &s.dcb.dw,
                &s.dcb.conv_mid,
                &s.dcb.ffn_expand,
                &s.dcb.ffn_contract,
            ]);
        }
        out.push(&self.proj);
        out
    }

    pub fn conv_layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        let mut out: Vec<&mut ConvLayer<T>> = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.rb.conv1);
            out.push(&mut s.rb.conv2);
            out.push(&mut s.rb.shortcut);
            out.push(&mut s.dcb.conv_in);
            out.push(&mut s.dcb.dw);
            out.push(&mut s.dcb.conv_mid);
            out.push(&mut s.dcb.ffn_expand);
            out.push(&mut s.dcb.ffn_contract);
        }
        out.push(&mut self.proj);
        out
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers().iter().map(|l| l.param_count()).sum()
    }
}

/// Three 3x3 convs, two of them stride 2.
#[derive(Clone, Debug)]
pub struct HyperEncoder<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub conv3: ConvLayer<T>,
}

impl<T: Scalar> HyperEncoder<T> {
    fn init(latent: usize, hyper: usize, rng: &mut Rng) -> Self {
        HyperEncoder {
            conv1: ConvLayer::init(hyper, latent, 3, 1, 1, 1, rng),
            conv2: ConvLayer::init(hyper, hyper, 3, 2, 1, 1, rng),
            conv3: ConvLayer::init(hyper, hyper, 3, 2, 1, 1, rng),
        }
    }

    pub fn forward<F: Fwd<T>>(&self, f: &mut F, y: &F::V) -> Result<F::V, Error> {
        let v = f.conv(&self.conv1, y)?;
        let v = f.leaky(&v);
        let v = f.conv(&self.conv2, &v)?;
        let v = f.leaky(&v);
        f.conv(&self.conv3, &v)
    }
}

/// Mirror of the hyper encoder; outputs `2 * latent` feature channels
/// (pass-1 mean and scale).
#[derive(Clone, Debug)]
pub struct HyperDecoder<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub conv3: ConvLayer<T>,
}

impl<T: Scalar> HyperDecoder<T> {
    fn init(latent: usize, hyper: usize, rng: &mut Rng) -> Self {
        HyperDecoder {
            conv1: ConvLayer::init(4 * hyper, hyper, 3, 1, 1, 1, rng),
            conv2: ConvLayer::init(4 * hyper, hyper, 3, 1, 1, 1, rng),
            conv3: ConvLayer::init(2 * latent, hyper, 3, 1, 1, 1, rng),
        }
    }

    pub fn forward<F: Fwd<T>>(&self, f: &mut F, z: &F::V) -> Result<F::V, Error> {
        let v = f.conv(&self.conv1, z)?;
        let v = f.subpixel(&v, 2)?;
        let v = f.leaky(&v);
        let v = f.conv(&self.conv2, &v)?;
        let v = f.subpixel(&v, 2)?;
        let v = f.leaky(&v);
        f.conv(&self.conv3, &v)
    }
}

/// Two 1x1 convs fusing hyper features with the reconstructed anchor half to
/// produce the non-anchor entropy parameters.
#[derive(Clone, Debug)]
pub struct Fusion<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
}

impl<T: Scalar> Fusion<T> {
    fn init(latent: usize, rng: &mut Rng) -> Self {
        Fusion {
            conv1: ConvLayer::init(2 * latent, 3 * latent, 1, 1, 0, 1, rng),
            conv2: ConvLayer::init(2 * latent, 2 * latent, 1, 1, 0, 1, rng),
        }
    }

    pub fn forward<F: Fwd<T>>(&self, f: &mut F, fused_in: &F::V) -> Result<F::V, Error> {
        let v = f.conv(&self.conv1, fused_in)?;
        let v = f.leaky(&v);
        f.conv(&self.conv2, &v)
    }
}

// ─── quantization steps ────────────────────────────────────────────────────

/// Learnable quantization steps, stored as exponentials of unconstrained
/// reals so steps stay strictly positive.
#[derive(Clone, Debug)]
pub struct QuantSteps<T> {
    /// `[1, R, 1, 1]`: one global log-step per rate point.
    pub q_global_raw: Tensor<T>,
    /// `[1, M, 1, 1]`: per-channel log-steps shared across rate points.
    pub q_ch_raw: Tensor<T>,
}

impl<T: Scalar> QuantSteps<T> {
    fn init(latent: usize, q_global_init: &[f64]) -> Self {
        let g: Vec<T> = q_global_init
            .iter()
            .map(|&q| T::from_f64(libm::log(q)))
            .collect();
        QuantSteps {
            q_global_raw: Tensor::from_vec(Shape::new(1, q_global_init.len(), 1, 1), g)
                .expect("consistent length"),
            q_ch_raw: Tensor::zeros(Shape::new(1, latent, 1, 1)),
        }
    }

    pub fn rate_points(&self) -> usize {
        self.q_global_raw.shape().c
    }

    pub fn q_global(&self, rate_index: usize) -> f64 {
        libm::exp(self.q_global_raw.data()[rate_index].to_f64())
    }

    /// Effective per-channel step `q_global * q_ch[c]` for a rate point.
    pub fn steps(&self, rate_index: usize) -> Result<Vec<T>, Error> {
        if rate_index >= self.rate_points() {
            return Err(Error::Invalid(format!(
                "rate index {rate_index} out of range ({} points)",
                self.rate_points()
            )));
        }
        let g = self.q_global(rate_index);
        Ok(self
            .q_ch_raw
            .data()
            .iter()
            .map(|&r| T::from_f64(g * libm::exp(r.to_f64())))
            .collect())
    }
}

// ─── the assembled model ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub enc_scheme: ChannelScheme,
    pub dec_scheme: ChannelScheme,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub stages: usize,
    pub leaky_slope: f64,
}

impl ModelConfig {
    pub fn new(
        enc_scheme: ChannelScheme,
        dec_scheme: ChannelScheme,
        latent_channels: usize,
        hyper_channels: usize,
    ) -> Self {
        ModelConfig {
            enc_scheme,
            dec_scheme,
            latent_channels,
            hyper_channels,
            stages: 4,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn with_stages(mut self, stages: usize) -> Self {
        self.stages = stages;
        self
    }

    /// Total spatial downsampling of the main latent.
    pub fn y_factor(&self) -> usize {
        1 << self.stages
    }

    /// Total spatial downsampling of the hyper latent.
    pub fn z_factor(&self) -> usize {
        self.y_factor() * 4
    }
}

/// One trainable rate point: the trade-off weight and the initial global
/// quantization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatePoint {
    pub lambda: f64,
    pub q_global_init: f64,
}

/// Defaults spanning roughly an 8x bit-rate range, highest quality first.
/// Distortion is mean squared error on the `[0, 1]` pixel scale, so these
/// trade-off weights carry the usual 8-bit-convention factor of `255^2`
/// (they correspond to 0.02 .. 0.0025 against 255-scaled MSE).
pub fn default_rate_points() -> Vec<RatePoint> {
    vec![
        RatePoint {
            lambda: 1300.0,
            q_global_init: 0.55,
        },
        RatePoint {
            lambda: 650.0,
            q_global_init: 1.0,
        },
        RatePoint {
            lambda: 325.0,
            q_global_init: 1.8,
        },
        RatePoint {
            lambda: 162.5,
            q_global_init: 3.2,
        },
    ]
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub enc: Encoder<T>,
    pub dec: Decoder<T>,
    pub hyper_enc: HyperEncoder<T>,
    pub hyper_dec: HyperDecoder<T>,
    pub fusion: Fusion<T>,
    pub prior: FactorizedPrior<T>,
    pub quant: QuantSteps<T>,
    pub lambdas: Vec<f64>,
    pub cfg: ModelConfig,
    prior_pid: usize,
}

/// Parameter counts per submodule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub others: usize,
    pub total: usize,
}

impl<T: Scalar> Model<T> {
    pub fn build(cfg: ModelConfig, rate_points: &[RatePoint], seed: u64) -> Result<Self, Error> {
        cfg.enc_scheme.validate()?;
        cfg.dec_scheme.validate()?;
        if cfg.latent_channels == 0 || cfg.hyper_channels == 0 {
            return Err(Error::Invalid(
                "latent/hyper channels must be positive".into(),
            ));
        }
        if cfg.stages == 0 || cfg.stages > 4 {
            return Err(Error::Invalid("stage count must be 1..=4".into()));
        }
        if rate_points.is_empty() {
            return Err(Error::Invalid("need at least one rate point".into()));
        }
        let mut rng = Rng::new(seed);
        let q_inits: Vec<f64> = rate_points.iter().map(|r| r.q_global_init).collect();
        let mut model = Model {
            enc: Encoder::init(cfg.enc_scheme, cfg.stages, cfg.latent_channels, &mut rng),
            dec: Decoder::init(cfg.dec_scheme, cfg.stages, cfg.latent_channels, &mut rng),
            hyper_enc: HyperEncoder::init(cfg.latent_channels, cfg.hyper_channels, &mut rng),
            hyper_dec: HyperDecoder::init(cfg.latent_channels, cfg.hyper_channels, &mut rng),
            fusion: Fusion::init(cfg.latent_channels, &mut rng),
            prior: FactorizedPrior::new(cfg.hyper_channels, &mut rng),
            quant: QuantSteps::init(cfg.latent_channels, &q_inits),
            lambdas: rate_points.iter().map(|r| r.lambda).collect(),
            cfg,
            prior_pid: 0,
        };
        model.assign_param_ids();
        Ok(model)
    }

    /// Conv layers in canonical order: encoder, decoder, hyper encoder,
    /// hyper decoder, fusion.
    pub fn conv_layers(&self) -> Vec<&ConvLayer<T>> {
        let mut out = self.enc.conv_layers();
        out.extend(self.dec.conv_layers());
        out.extend([
            &self.hyper_enc.conv1,
            &self.hyper_enc.conv2,
            &self.hyper_enc.conv3,
            &self.hyper_dec.conv1,
            &self.hyper_dec.conv2,
            &self.hyper_dec.conv3,
            &self.fusion.conv1,
            &self.fusion.conv2,
        ]);
        out
    }

    fn conv_layers_mut(&mut self) -> Vec<&mut ConvLayer<T>> {
        let mut out = self.enc.conv_layers_mut();
        out.extend(self.dec.conv_layers_mut());
        out.push(&mut self.hyper_enc.conv1);
        out.push(&mut self.hyper_enc.conv2);
        out.push(&mut self.hyper_enc.conv3);
        out.push(&mut self.hyper_dec.conv1);
        out.push(&mut self.hyper_dec.conv2);
        out.push(&mut self.hyper_dec.conv3);
        out.push(&mut self.fusion.conv1);
        out.push(&mut self.fusion.conv2);
        out
    }

    /// Re-number parameter slots after any structural change (merge, encoder
    /// swap, checkpoint load).
    pub fn assign_param_ids(&mut self) {
        let mut next = 0usize;
        for layer in self.conv_layers_mut() {
            layer.wid = next;
            layer.bid = next + 1;
            next += 2;
        }
        self.prior_pid = next;
    }

    pub fn prior_param_id(&self) -> usize {
        self.prior_pid
    }

    pub fn q_ch_param_id(&self) -> usize {
        self.prior_pid + 1
    }

    pub fn q_global_param_id(&self) -> usize {
        self.prior_pid + 2
    }

    /// Number of parameter tensors (not scalar parameters).
    pub fn param_tensor_count(&self) -> usize {
        self.prior_pid + 3
    }

    pub fn for_each_param(&self, f: &mut impl FnMut(&Tensor<T>)) {
        for layer in self.conv_layers() {
            f(&layer.weight);
            f(&layer.bias);
        }
        f(&self.prior.params);
        f(&self.quant.q_ch_raw);
        f(&self.quant.q_global_raw);
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        for layer in self.conv_layers_mut() {
            f(&mut layer.weight);
            f(&mut layer.bias);
        }
        f(&mut self.prior.params);
        f(&mut self.quant.q_ch_raw);
        f(&mut self.quant.q_global_raw);
    }

    /// Total scalar parameter count.
    pub fn scalar_param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |t: &Tensor<T>| n += t.len());
        n
    }

    pub fn count_params(&self) -> ParamCounts {
        let encoder = self.enc.param_count();
        let decoder = self.dec.param_count();
        let total = self.scalar_param_count();
        ParamCounts {
            encoder,
            decoder,
            others: total - encoder - decoder,
            total,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut m = Model {
            enc: self.enc.cast(),
            dec: Decoder {
                stages: self
                    .dec
                    .stages
                    .iter()
                    .map(|s| DecoderStage {
                        rb: ResidualBlockUp {
                            conv1: s.rb.conv1.cast(),
                            conv2: s.rb.conv2.cast(),
                            shortcut: s.rb.shortcut.cast(),
                        },
                        dcb: cast_dcb(&s.dcb),
                    })
                    .collect(),
                proj: self.dec.proj.cast(),
                scheme: self.dec.scheme,
            },
            hyper_enc: HyperEncoder {
                conv1: self.hyper_enc.conv1.cast(),
                conv2: self.hyper_enc.conv2.cast(),
                conv3: self.hyper_enc.conv3.cast(),
            },
            hyper_dec: HyperDecoder {
                conv1: self.hyper_dec.conv1.cast(),
                conv2: self.hyper_dec.conv2.cast(),
                conv3: self.hyper_dec.conv3.cast(),
            },
            fusion: Fusion {
                conv1: self.fusion.conv1.cast(),
                conv2: self.fusion.conv2.cast(),
            },
            prior: self.prior.cast(),
            quant: QuantSteps {
                q_global_raw: self.quant.q_global_raw.cast(),
                q_ch_raw: self.quant.q_ch_raw.cast(),
            },
            lambdas: self.lambdas.clone(),
            cfg: self.cfg,
            prior_pid: 0,
        };
        m.assign_param_ids();
        m
    }

    /// Flatten all parameters into one vector (gradient-check support).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_param(&mut |t: &Tensor<T>| {
            out.extend(t.data().iter().map(|v| v.to_f64()))
        });
        out
    }

    /// Overwrite all parameters from a flat vector.
    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<(), Error> {
        let expect = self.scalar_param_count();
        if flat.len() != expect {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, model has {expect} parameters",
                flat.len()
            )));
        }
        let mut cursor = 0usize;
        self.for_each_param_mut(&mut |t: &mut Tensor<T>| {
            for v in t.data_mut() {
                *v = T::from_f64(flat[cursor]);
                cursor += 1;
            }
        });
        Ok(())
    }

    /// Replace the encoder (the scalable-bank case) and fix up param slots.
    pub fn with_encoder(&self, enc: Encoder<T>) -> Result<Model<T>, Error> {
        if enc.stages.len() != self.cfg.stages {
            return Err(Error::Invalid("encoder stage count mismatch".into()));
        }
        if enc.proj.c_out() != self.cfg.latent_channels {
            return Err(Error::Dimension("encoder latent width mismatch".into()));
        }
        let mut m = self.clone();
        m.enc = enc;
        m.cfg.enc_scheme = m.enc.scheme;
        m.assign_param_ids();
        Ok(m)
    }
}

// ─── quantization (eval mode) ──────────────────────────────────────────────

/// Eval-mode quantization: integer symbols `round(y / s)` and the dequantized
/// `y_hat = symbols * s`.
pub fn quantize_eval<T: Scalar>(
    y: &Tensor<T>,
    steps: &[T],
) -> Result<(Vec<i32>, Tensor<T>), Error> {
    if steps.iter().any(|s| s.to_f64() <= 0.0) {
        return Err(Error::Invalid("quantization step must be positive".into()));
    }
    let symbols = nn::quantize_symbols(y, steps)?;
    let y_hat = nn::quantize_round(y, steps)?;
    Ok((symbols, y_hat))
}

/// Training-mode quantization: additive uniform noise scaled by the step.
pub fn quantize_train<T: Scalar>(
    y: &Tensor<T>,
    steps: &[T],
    rng: &mut Rng,
) -> Result<Tensor<T>, Error> {
    if steps.iter().any(|s| s.to_f64() <= 0.0) {
        return Err(Error::Invalid("quantization step must be positive".into()));
    }
    let ys = y.shape();
    if steps.len() != ys.c {
        return Err(Error::Dimension("step vector length mismatch".into()));
    }
    let mut out = y.clone();
    let plane = ys.h * ys.w;
    for n in 0..ys.n {
        for c in 0..ys.c {
            let s = steps[c].to_f64();
            let base = (n * ys.c + c) * plane;
            for v in &mut out.data_mut()[base..base + plane] {
                *v = *v + T::from_f64(s * rng.uniform(-0.5, 0.5));
            }
        }
    }
    Ok(out)
}

// ─── checkerboard split / merge ────────────────────────────────────────────

/// Split into (anchor half, non-anchor half); both keep the full shape with
/// zeros at the other parity.
pub fn spatial_split<T: Scalar>(y: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (
        nn::checker_mask(y, Parity::Anchor),
        nn::checker_mask(y, Parity::NonAnchor),
    )
}

/// Lossless inverse of [`spatial_split`].
pub fn spatial_merge<T: Scalar>(y1: &Tensor<T>, y2: &Tensor<T>) -> Result<Tensor<T>, Error> {
    if y1.shape() != y2.shape() {
        return Err(Error::Dimension("halves have different shapes".into()));
    }
    let data = y1
        .data()
        .iter()
        .zip(y2.data())
        .map(|(&a, &b)| a + b)
        .collect();
    Tensor::from_vec(y1.shape(), data)
}

// ─── entropy parameters ────────────────────────────────────────────────────

/// Which pass of the dual spatial prior is being parameterized.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PriorPass {
    Anchor,
    NonAnchor,
}

pub const SCALE_MIN: f64 = 1e-4;
pub const SCALE_MAX: f64 = 1e4;

/// The scale head: strictly positive via `exp`, then clamped to
/// `[SCALE_MIN, SCALE_MAX]` as the hard guard.
fn scale_from_raw<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = (T::from_f64(SCALE_MIN), T::from_f64(SCALE_MAX));
    t.map(|v| v.exp().clamp(lo, hi))
}

impl<T: Scalar> Model<T> {
    /// Gaussian parameters for one pass of the dual spatial prior. Pass 1
    /// slices the hyper decoder output; pass 2 additionally needs the
    /// reconstructed anchor half placed at anchor positions (zeros elsewhere).
    pub fn entropy_params(
        &self,
        hyper_out: &Tensor<T>,
        pass: PriorPass,
        y1_hat_anchored: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>), Error> {
        let m = self.cfg.latent_channels;
        match pass {
            PriorPass::Anchor => {
                let mean = nn::slice_channels(hyper_out, 0, m)?;
                let scale = scale_from_raw(&nn::slice_channels(hyper_out, m, 2 * m)?);
                Ok((mean, scale))
            }
            PriorPass::NonAnchor => {
                let y1 = y1_hat_anchored.ok_or_else(|| {
                    Error::Sequencing("pass 2 requires the reconstructed anchor half".into())
                })?;
                let fused_in = nn::concat_channels(hyper_out, y1)?;
                let mut ctx = PureFwd::new(self.cfg.leaky_slope, &NoMasks);
                let out = self.fusion.forward(&mut ctx, &fused_in)?;
                let mean = nn::slice_channels(&out, 0, m)?;
                let scale = scale_from_raw(&nn::slice_channels(&out, m, 2 * m)?);
                Ok((mean, scale))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> ModelConfig {
        ModelConfig::new(
            ChannelScheme::new(8, 8, 8, 8),
            ChannelScheme::new(8, 8, 8, 8),
            12,
            6,
        )
    }

    fn toy_points() -> Vec<RatePoint> {
        default_rate_points()
    }

    #[test]
    fn shapes_follow_the_downsampling_law() {
        let model: Model<f32> = Model::build(toy_cfg(), &toy_points(), 1).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 64, 64));
        let mut ctx = PureFwd::new(model.cfg.leaky_slope, &NoMasks);
        let y = model.enc.forward(&mut ctx, &x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 12, 4, 4));
        let z = model.hyper_enc.forward(&mut ctx, &y).unwrap();
        assert_eq!(z.shape(), Shape::new(1, 6, 1, 1));
        let hyper_out = model.hyper_dec.forward(&mut ctx, &z).unwrap();
        assert_eq!(hyper_out.shape(), Shape::new(1, 24, 4, 4));
        let x_hat = model.dec.forward(&mut ctx, &y).unwrap();
        assert_eq!(x_hat.shape(), Shape::new(1, 3, 64, 64));
    }

    #[test]
    fn real_schemes_hit_spec_shapes() {
        // small scheme, 192 latents: [1,3,64,64] -> y [1,192,4,4], z at /64
        let cfg = ModelConfig::new(ChannelScheme::small(), ChannelScheme::small(), 192, 128);
        let model: Model<f32> = Model::build(cfg, &toy_points(), 3).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 64, 64));
        let mut ctx = PureFwd::new(model.cfg.leaky_slope, &NoMasks);
        let y = model.enc.forward(&mut ctx, &x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 192, 4, 4));
        let z = model.hyper_enc.forward(&mut ctx, &y).unwrap();
        assert_eq!(z.shape(), Shape::new(1, 128, 1, 1));
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a: Model<f32> = Model::build(toy_cfg(), &toy_points(), 42).unwrap();
        let b: Model<f32> = Model::build(toy_cfg(), &toy_points(), 42).unwrap();
        assert_eq!(a.flatten_params(), b.flatten_params());
        let c: Model<f32> = Model::build(toy_cfg(), &toy_points(), 43).unwrap();
        assert_ne!(a.flatten_params(), c.flatten_params());
    }

    #[test]
    fn param_counts_are_monotone_in_scheme() {
        let mk = |s: ChannelScheme| -> ParamCounts {
            let cfg = ModelConfig::new(s, s, 48, 24);
            Model::<f32>::build(cfg, &toy_points(), 7)
                .unwrap()
                .count_params()
        };
        let small = mk(ChannelScheme::small());
        let medium = mk(ChannelScheme::medium());
        let large = mk(ChannelScheme::large());
        assert!(small.encoder < medium.encoder && medium.encoder < large.encoder);
        assert!(small.decoder < medium.decoder && medium.decoder < large.decoder);
        assert_eq!(small.others, medium.others);
        assert_eq!(medium.others, large.others);
        // encoder and decoder stay within 2x of each other
        for c in [small, medium, large] {
            let ratio = c.decoder as f64 / c.encoder as f64;
            assert!(ratio > 0.5 && ratio < 2.0, "ratio {ratio}");
        }
    }

    #[test]
    fn conv_param_count_scales_quadratically_with_width() {
        let mut rng = Rng::new(1);
        let narrow = ConvLayer::<f32>::init(8, 8, 3, 1, 1, 1, &mut rng);
        let wide = ConvLayer::<f32>::init(16, 16, 3, 1, 1, 1, &mut rng);
        let ratio = (wide.weight.len()) as f64 / (narrow.weight.len()) as f64;
        assert_eq!(ratio, 4.0);
    }

    #[test]
    fn spatial_split_merge_roundtrip() {
        let mut rng = Rng::new(9);
        let y: Tensor<f64> = Tensor::rand_uniform(Shape::new(2, 3, 4, 6), 1.0, &mut rng);
        let (y1, y2) = spatial_split(&y);
        let back = spatial_merge(&y1, &y2).unwrap();
        assert_eq!(back, y);
        // 2x2 grid: anchors at (0,0),(1,1); non-anchors at (0,1),(1,0)
        let c = Tensor::full(Shape::new(1, 1, 2, 2), 3.5f64);
        let (a, b) = spatial_split(&c);
        assert_eq!(a.data(), &[3.5, 0.0, 0.0, 3.5]);
        assert_eq!(b.data(), &[0.0, 3.5, 3.5, 0.0]);
    }

    #[test]
    fn quantize_eval_examples() {
        let y = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.3f64]).unwrap();
        let (sym, y_hat) = quantize_eval(&y, &[1.0]).unwrap();
        assert_eq!(sym, vec![1]);
        assert_eq!(y_hat.data(), &[1.0]);
        // lattice points roundtrip exactly
        let y = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![-2.0, 0.0, 3.0, 7.0]).unwrap();
        let (_, y_hat) = quantize_eval(&y, &[1.0]).unwrap();
        assert_eq!(y_hat, y);
        assert!(quantize_eval(&y, &[0.0]).is_err());
    }

    #[test]
    fn quantize_eval_is_idempotent() {
        let mut rng = Rng::new(21);
        let y: Tensor<f64> = Tensor::rand_uniform(Shape::new(1, 3, 4, 4), 5.0, &mut rng);
        let steps = [0.5, 1.0, 2.0];
        let (sym, y_hat) = quantize_eval(&y, &steps).unwrap();
        let (sym2, y_hat2) = quantize_eval(&y_hat, &steps).unwrap();
        assert_eq!(sym, sym2);
        assert_eq!(y_hat, y_hat2);
    }

    #[test]
    fn entropy_params_pass2_needs_anchor_half() {
        let model: Model<f32> = Model::build(toy_cfg(), &toy_points(), 2).unwrap();
        let hyper_out = Tensor::zeros(Shape::new(1, 24, 2, 2));
        assert!(matches!(
            model.entropy_params(&hyper_out, PriorPass::NonAnchor, None),
            Err(Error::Sequencing(_))
        ));
        let y1 = Tensor::zeros(Shape::new(1, 12, 2, 2));
        assert!(model
            .entropy_params(&hyper_out, PriorPass::NonAnchor, Some(&y1))
            .is_ok());
    }

    #[test]
    fn scale_clamp_holds_for_tiny_preactivations() {
        let model: Model<f32> = Model::build(toy_cfg(), &toy_points(), 2).unwrap();
        let hyper_out = Tensor::full(Shape::new(1, 24, 2, 2), -50.0f32);
        let (_, scale) = model
            .entropy_params(&hyper_out, PriorPass::Anchor, None)
            .unwrap();
        assert!(scale.data().iter().all(|&s| s >= 1e-4));
    }

    #[test]
    fn identity_masks_do_not_change_outputs() {
        struct OnesMasks {
            ones: alloc::vec::Vec<f32>,
            ones4: alloc::vec::Vec<f32>,
        }
        impl MaskLookup<f32> for OnesMasks {
            fn mask_values(&self, site: MaskSite) -> Option<&[f32]> {
                Some(match site.kind {
                    MaskKind::FfnExpansion => &self.ones4,
                    _ => &self.ones,
                })
            }
        }
        let model: Model<f32> = Model::build(toy_cfg(), &toy_points(), 11).unwrap();
        let mut rng = Rng::new(3);
        let x = Tensor::rand_uniform(Shape::new(1, 3, 16, 16), 0.5, &mut rng);
        let mut plain = PureFwd::new(model.cfg.leaky_slope, &NoMasks);
        let y_plain = model.enc.forward(&mut plain, &x).unwrap();
        let lookup = OnesMasks {
            ones: vec![1.0; 8],
            ones4: vec![1.0; 32],
        };
        let mut masked = PureFwd::new(model.cfg.leaky_slope, &lookup);
        let y_masked = model.enc.forward(&mut masked, &x).unwrap();
        assert_eq!(y_plain, y_masked);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn split_merge_is_a_bijection(
            n in 1usize..3,
            c in 1usize..5,
            h in 1usize..7,
            w in 1usize..7,
            seed in 0u64..1000,
        ) {
            let mut rng = crate::rng::Rng::new(seed);
            let y: Tensor<f32> = Tensor::rand_uniform(Shape::new(n, c, h, w), 4.0, &mut rng);
            let (y1, y2) = spatial_split(&y);
            // halves are disjoint: elementwise product is zero
            for (a, b) in y1.data().iter().zip(y2.data()) {
                prop_assert!(*a == 0.0 || *b == 0.0);
            }
            prop_assert_eq!(spatial_merge(&y1, &y2).unwrap(), y);
        }

        #[test]
        fn quantize_eval_roundtrips_on_lattice(
            seed in 0u64..1000,
            step_exp in -2.0f64..2.0,
        ) {
            let mut rng = crate::rng::Rng::new(seed);
            let step = libm::exp(step_exp) as f32;
            let y: Tensor<f32> = Tensor::rand_uniform(Shape::new(1, 2, 3, 3), 8.0, &mut rng);
            let steps = alloc::vec![step; 2];
            let (sym, y_hat) = quantize_eval(&y, &steps).unwrap();
            let (sym2, y_hat2) = quantize_eval(&y_hat, &steps).unwrap();
            prop_assert_eq!(sym, sym2);
            prop_assert_eq!(y_hat, y_hat2);
        }
    }

    #[test]
    fn pass1_params_ignore_everything_but_hyper_output() {
        let cfg = ModelConfig::new(
            ChannelScheme::new(6, 6, 6, 6),
            ChannelScheme::new(6, 6, 6, 6),
            8,
            4,
        );
        let model: Model<f32> = Model::build(cfg, &default_rate_points(), 5).unwrap();
        let mut rng = crate::rng::Rng::new(9);
        let hyper_out = Tensor::rand_uniform(Shape::new(1, 16, 2, 2), 1.0, &mut rng);
        let (m1, s1) = model.entropy_params(&hyper_out, PriorPass::Anchor, None).unwrap();
        let (m2, s2) = model.entropy_params(&hyper_out, PriorPass::Anchor, None).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn pass2_params_react_to_the_anchor_half() {
        let cfg = ModelConfig::new(
            ChannelScheme::new(6, 6, 6, 6),
            ChannelScheme::new(6, 6, 6, 6),
            8,
            4,
        );
        let model: Model<f32> = Model::build(cfg, &default_rate_points(), 5).unwrap();
        let mut rng = crate::rng::Rng::new(11);
        let hyper_out = Tensor::rand_uniform(Shape::new(1, 16, 2, 2), 1.0, &mut rng);
        let y1 = Tensor::rand_uniform(Shape::new(1, 8, 2, 2), 1.0, &mut rng);
        let (mean_a, _) = model
            .entropy_params(&hyper_out, PriorPass::NonAnchor, Some(&y1))
            .unwrap();
        let mut y1b = y1.clone();
        y1b.data_mut()[0] += 0.5;
        let (mean_b, _) = model
            .entropy_params(&hyper_out, PriorPass::NonAnchor, Some(&y1b))
            .unwrap();
        assert_ne!(mean_a, mean_b);
    }

    #[test]
    fn doubling_q_global_halves_symbol_magnitudes() {
        let mut rng = crate::rng::Rng::new(13);
        let y: Tensor<f32> = Tensor::rand_uniform(Shape::new(1, 4, 4, 4), 6.0, &mut rng);
        let (sym1, _) = quantize_eval(&y, &alloc::vec![1.0f32; 4]).unwrap();
        let (sym2, _) = quantize_eval(&y, &alloc::vec![2.0f32; 4]).unwrap();
        let mag1: i64 = sym1.iter().map(|s| s.abs() as i64).sum();
        let mag2: i64 = sym2.iter().map(|s| s.abs() as i64).sum();
        assert!(mag2 * 2 <= mag1 + sym1.len() as i64, "{mag2} vs {mag1}");
    }
}
