//! Mask decay: per-channel mask layers, the sparsity loss driving them to a
//! target channel count, the decoupled decay update, freeze detection, and
//! the output-preserving merge back into plain convolutions.
//!
//! Merge strategy per site kind:
//!
//! * inner masks (`ResidualInner`, `DepthInner`, `FfnExpansion`) sit directly
//!   after a conv and before a LeakyReLU; surviving values fold *downstream*
//!   into the consuming conv's input channels. Folding through the LeakyReLU
//!   uses its positive homogeneity, so survivors must be non-negative
//!   (guaranteed by the zero clamp during decay, asserted again at merge).
//! * the shared `StageOutput` mask multiplies every conv branch feeding the
//!   stage tensor before the residual adds; its values fold *upstream* into
//!   those convs' output filters, which is exact for any value because no
//!   nonlinearity sits between conv and mask.
//!
//! Dead channels are then deleted from producers and consumers alike.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::model::{
    ChannelScheme, ConvLayer, DepthConvBlock, Half, MaskKind, MaskLookup, MaskSite, Model,
    ResidualBlockDown, ResidualBlockUp,
};
use crate::tensor::{Scalar, Shape, Tensor};

/// Which sparsity regularizer drives the decay.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SparsityKind {
    /// The piecewise loss with gradient `|x - 1|`: stationary at 1, growing
    /// pull toward 0 below 1.
    Ours,
    L1,
    L2,
}

/// `L_sparse(x)`. Negative inputs are clamped to zero (masks can dip below
/// zero mid-optimization before the clamp catches them).
pub fn sparsity_loss(x: f64, kind: SparsityKind) -> f64 {
    let x = x.max(0.0);
    match kind {
        SparsityKind::Ours => {
            if x <= 1.0 {
                -0.5 * x * x + x
            } else {
                0.5 * x * x - x + 1.0
            }
        }
        SparsityKind::L1 => x,
        SparsityKind::L2 => 0.5 * x * x,
    }
}

/// Magnitude of the decay pull; the update is always subtractive
/// (`m <- m - eta * sparsity_grad(m)`), so for `x > 1` masks fall toward 1
/// and for `0 <= x < 1` they fall toward 0.
pub fn sparsity_grad(x: f64, kind: SparsityKind) -> f64 {
    let x = x.max(0.0);
    match kind {
        SparsityKind::Ours => (x - 1.0).abs(),
        SparsityKind::L1 => 1.0,
        SparsityKind::L2 => x,
    }
}

/// Decay configuration.
#[derive(Clone, Copy, Debug)]
pub struct DecayConfig {
    /// Decay rate for free channels.
    pub eta: f64,
    pub kind: SparsityKind,
    /// Decay rate for avoid-set channels (defaults to `10 * eta`).
    pub eta_avoid: f64,
    /// Channel-death threshold tau.
    pub zero_threshold: f64,
}

impl DecayConfig {
    pub fn new(eta: f64, kind: SparsityKind) -> Self {
        DecayConfig {
            eta,
            kind,
            eta_avoid: 10.0 * eta,
            zero_threshold: 1e-3,
        }
    }

    pub fn with_eta_avoid(mut self, eta_avoid: f64) -> Self {
        self.eta_avoid = eta_avoid;
        self
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.eta <= 0.0 || self.eta_avoid < self.eta {
            return Err(Error::Invalid(
                "decay rates must satisfy 0 < eta <= eta_avoid".into(),
            ));
        }
        Ok(())
    }
}

/// One mask layer. The site doubles as the share-group id: the stage-output
/// mask is stored once and applied at every branch of its stage.
#[derive(Clone, Debug)]
pub struct MaskState<T> {
    pub site: MaskSite,
    /// `[1, L, 1, 1]`, initialized to ones.
    pub values: Tensor<T>,
    /// Student channel count `N_s`.
    pub target: usize,
    pub frozen: bool,
    pub frozen_at: Option<u64>,
    /// Surviving channel indices, set when frozen.
    pub survivors: Vec<usize>,
    /// Avoid-set membership (decays at `eta_avoid`).
    pub avoid: Vec<bool>,
}

impl<T: Scalar> MaskState<T> {
    pub fn new(site: MaskSite, len: usize, target: usize) -> Result<Self, Error> {
        if target > len {
            return Err(Error::Invalid(format!(
                "mask target {target} exceeds width {len} at {site:?}"
            )));
        }
        Ok(MaskState {
            site,
            values: Tensor::full(Shape::new(1, len, 1, 1), T::ONE),
            target,
            frozen: false,
            frozen_at: None,
            survivors: Vec::new(),
            avoid: vec![false; len],
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn set_avoid_set(&mut self, channels: &[usize]) -> Result<(), Error> {
        for &c in channels {
            if c >= self.len() {
                return Err(Error::Invalid(format!(
                    "avoid channel {c} out of range ({} wide)",
                    self.len()
                )));
            }
        }
        self.avoid = vec![false; self.len()];
        for &c in channels {
            self.avoid[c] = true;
        }
        Ok(())
    }

    /// Channels with `|m| > tau`.
    pub fn live_count(&self, tau: f64) -> usize {
        self.values
            .data()
            .iter()
            .filter(|v| v.to_f64().abs() > tau)
            .count()
    }

    /// Indices ranked by `|m|` descending, ties by lowest index.
    fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            let (ma, mb) = (
                self.values.data()[a].to_f64().abs(),
                self.values.data()[b].to_f64().abs(),
            );
            mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
        });
        idx
    }

    fn freeze_now(&mut self, iteration: u64) {
        let mut survivors: Vec<usize> = self.ranked().into_iter().take(self.target).collect();
        survivors.sort_unstable();
        for (i, v) in self.values.data_mut().iter_mut().enumerate() {
            if !survivors.contains(&i) {
                *v = T::ZERO;
            }
        }
        self.survivors = survivors;
        self.frozen = true;
        self.frozen_at = Some(iteration);
    }
}

/// Result of one decay application.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DecayOutcome {
    Applied { clamped_at_zero: usize },
    SkippedFrozen,
}

/// One decay update: `m <- m - eta * sparsity_grad(m) - gamma * task_grad`,
/// clamped at zero from below. Avoid-set channels use `eta_avoid`. When the
/// optimizer owns the task step (the training loop), pass no task gradient.
pub fn decay_step<T: Scalar>(
    mask: &mut MaskState<T>,
    cfg: &DecayConfig,
    gamma: f64,
    task_grad: Option<&[T]>,
) -> Result<DecayOutcome, Error> {
    cfg.validate()?;
    if mask.frozen {
        return Ok(DecayOutcome::SkippedFrozen);
    }
    if let Some(g) = task_grad {
        if g.len() != mask.len() {
            return Err(Error::Dimension("task gradient length mismatch".into()));
        }
    }
    let mut clamped = 0usize;
    for i in 0..mask.len() {
        let m = mask.values.data()[i].to_f64();
        let eta = if mask.avoid[i] { cfg.eta_avoid } else { cfg.eta };
        let mut next = m - eta * sparsity_grad(m, cfg.kind);
        if let Some(g) = task_grad {
            next -= gamma * g[i].to_f64();
        }
        if next < 0.0 {
            next = 0.0;
            clamped += 1;
        }
        mask.values.data_mut()[i] = T::from_f64(next);
    }
    Ok(DecayOutcome::Applied {
        clamped_at_zero: clamped,
    })
}

/// Freeze the mask once no more than `N_s` channels remain above tau: zero
/// everything outside the `N_s` largest magnitudes and stop decaying. Task
/// gradients keep flowing to survivors until merge.
pub fn check_sparse_enough<T: Scalar>(
    mask: &mut MaskState<T>,
    cfg: &DecayConfig,
    iteration: u64,
) -> bool {
    if mask.frozen {
        return false;
    }
    if mask.live_count(cfg.zero_threshold) <= mask.target {
        mask.freeze_now(iteration);
        return true;
    }
    false
}

/// Force-freeze by magnitude ranking (the end-of-decay-phase deadline).
pub fn force_freeze<T: Scalar>(mask: &mut MaskState<T>, iteration: u64) -> bool {
    if mask.frozen {
        return false;
    }
    mask.freeze_now(iteration);
    true
}

// ─── masked model ──────────────────────────────────────────────────────────

/// Which halves of the codec get masks.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PruneTarget {
    Encoder,
    Decoder,
    Both,
}

impl PruneTarget {
    pub fn halves(self) -> &'static [Half] {
        match self {
            PruneTarget::Encoder => &[Half::Encoder],
            PruneTarget::Decoder => &[Half::Decoder],
            PruneTarget::Both => &[Half::Encoder, Half::Decoder],
        }
    }
}

/// A model with mask layers registered at their insertion sites.
#[derive(Clone, Debug)]
pub struct MaskedModel<T> {
    pub model: Model<T>,
    pub masks: Vec<MaskState<T>>,
}

/// Teacher stage widths for one half, in forward order.
fn stage_widths(scheme: &ChannelScheme, stages: usize, half: Half) -> Vec<usize> {
    let mut w: Vec<usize> = scheme.widths()[..stages].to_vec();
    if half == Half::Decoder {
        w.reverse();
    }
    w
}

/// Insert mask layers toward a student scheme. Targets follow the student's
/// stage widths; the expansion mask gets four times that.
pub fn insert_masks<T: Scalar>(
    model: Model<T>,
    which: PruneTarget,
    student_enc: ChannelScheme,
    student_dec: ChannelScheme,
) -> Result<MaskedModel<T>, Error> {
    let stages = model.cfg.stages;
    let mut masks = Vec::new();
    for &half in which.halves() {
        let (teacher, student) = match half {
            Half::Encoder => (model.cfg.enc_scheme, student_enc),
            Half::Decoder => (model.cfg.dec_scheme, student_dec),
        };
        if !teacher.covers(&student) {
            return Err(Error::Invalid(format!(
                "student scheme {student:?} wider than teacher {teacher:?}"
            )));
        }
        student.validate()?;
        let tw = stage_widths(&teacher, stages, half);
        let sw = stage_widths(&student, stages, half);
        for stage in 0..stages {
            for kind in [
                MaskKind::StageOutput,
                MaskKind::ResidualInner,
                MaskKind::DepthInner,
                MaskKind::FfnExpansion,
            ] {
                let (len, target) = match kind {
                    MaskKind::FfnExpansion => (4 * tw[stage], 4 * sw[stage]),
                    _ => (tw[stage], sw[stage]),
                };
                masks.push(MaskState::new(
                    MaskSite::new(half, stage, kind),
                    len,
                    target,
                )?);
            }
        }
    }
    Ok(MaskedModel { model, masks })
}

impl<T: Scalar> MaskedModel<T> {
    pub fn mask(&self, site: MaskSite) -> Option<&MaskState<T>> {
        self.masks.iter().find(|m| m.site == site)
    }

    pub fn mask_mut(&mut self, site: MaskSite) -> Option<&mut MaskState<T>> {
        self.masks.iter_mut().find(|m| m.site == site)
    }

    pub fn all_frozen(&self) -> bool {
        self.masks.iter().all(|m| m.frozen)
    }

    /// Lookup adapter for the pure forward path.
    pub fn lookup(&self) -> MaskedLookup<'_, T> {
        MaskedLookup {
            map: self
                .masks
                .iter()
                .map(|m| (m.site, m.values.data()))
                .collect(),
        }
    }

    /// `(site, values)` pairs for tape registration.
    pub fn tape_masks(&self) -> Vec<(MaskSite, Tensor<T>)> {
        self.masks
            .iter()
            .map(|m| (m.site, m.values.clone()))
            .collect()
    }

    /// Survivor index sets of all frozen masks.
    pub fn record_chosen_channels(&self) -> Vec<ChosenChannels> {
        self.masks
            .iter()
            .filter(|m| m.frozen)
            .map(|m| ChosenChannels {
                site: m.site,
                teacher_width: m.len(),
                target: m.target,
                survivors: m.survivors.clone(),
                frozen_at: m.frozen_at.unwrap_or(0),
            })
            .collect()
    }

    /// Structured text report, one line per mask.
    pub fn prune_report(&self) -> String {
        let mut out = String::new();
        for m in &self.masks {
            let survivors: Vec<String> = m.survivors.iter().map(|s| format!("{s}")).collect();
            out += &format!(
                "mask {:?}/{}/{:?} n2={} ns={} frozen_at={} survivors={}\n",
                m.site.half,
                m.site.stage,
                m.site.kind,
                m.len(),
                m.target,
                m.frozen_at.map(|i| i as i64).unwrap_or(-1),
                survivors.join(",")
            );
        }
        out
    }
}

/// Borrowed mask values keyed by site.
pub struct MaskedLookup<'a, T> {
    map: BTreeMap<MaskSite, &'a [T]>,
}

impl<'a, T> MaskLookup<T> for MaskedLookup<'a, T> {
    fn mask_values(&self, site: MaskSite) -> Option<&[T]> {
        self.map.get(&site).copied()
    }
}

/// Survivor record for the channel-choice analyses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChosenChannels {
    pub site: MaskSite,
    pub teacher_width: usize,
    pub target: usize,
    pub survivors: Vec<usize>,
    pub frozen_at: u64,
}

/// `|intersection|` and `|union|` of several survivor sets over one site.
pub fn survivor_overlap(sets: &[&[usize]]) -> (usize, usize) {
    if sets.is_empty() {
        return (0, 0);
    }
    let mut inter: Vec<usize> = sets[0].to_vec();
    let mut uni: Vec<usize> = sets[0].to_vec();
    for s in &sets[1..] {
        inter.retain(|v| s.contains(v));
        for v in *s {
            if !uni.contains(v) {
                uni.push(*v);
            }
        }
    }
    (inter.len(), uni.len())
}

// ─── merge ─────────────────────────────────────────────────────────────────

fn keep_output_channels<T: Scalar>(layer: &ConvLayer<T>, keep: &[usize]) -> ConvLayer<T> {
    let ws = layer.weight.shape();
    let mut w = Tensor::zeros(Shape::new(keep.len(), ws.c, ws.h, ws.w));
    let mut b = Tensor::zeros(Shape::new(keep.len(), 1, 1, 1));
    for (new_o, &o) in keep.iter().enumerate() {
        for ci in 0..ws.c {
            for kh in 0..ws.h {
                for kw in 0..ws.w {
                    *w.at_mut(new_o, ci, kh, kw) = layer.weight.at(o, ci, kh, kw);
                }
            }
        }
        b.data_mut()[new_o] = layer.bias.data()[o];
    }
    ConvLayer {
        weight: w,
        bias: b,
        ..layer.clone()
    }
}

fn keep_input_channels<T: Scalar>(layer: &ConvLayer<T>, keep: &[usize]) -> ConvLayer<T> {
    debug_assert_eq!(layer.groups, 1, "input pruning only on dense convs");
    let ws = layer.weight.shape();
    let mut w = Tensor::zeros(Shape::new(ws.n, keep.len(), ws.h, ws.w));
    for o in 0..ws.n {
        for (new_i, &i) in keep.iter().enumerate() {
            for kh in 0..ws.h {
                for kw in 0..ws.w {
                    *w.at_mut(o, new_i, kh, kw) = layer.weight.at(o, i, kh, kw);
                }
            }
        }
    }
    ConvLayer {
        weight: w,
        bias: layer.bias.clone(),
        ..layer.clone()
    }
}

fn keep_depthwise_channels<T: Scalar>(layer: &ConvLayer<T>, keep: &[usize]) -> ConvLayer<T> {
    debug_assert_eq!(layer.groups, layer.weight.shape().n);
    let mut pruned = keep_output_channels(layer, keep);
    pruned.groups = keep.len();
    pruned
}

/// Fold a mask sitting directly on this conv's output: `W[c] *= m[c]`,
/// `b[c] *= m[c]`. Exact for any mask values.
fn scale_output_channels<T: Scalar>(layer: &mut ConvLayer<T>, m: &[T]) {
    let ws = layer.weight.shape();
    for o in 0..ws.n {
        let s = m[o];
        for ci in 0..ws.c {
            for kh in 0..ws.h {
                for kw in 0..ws.w {
                    let v = layer.weight.at(o, ci, kh, kw);
                    *layer.weight.at_mut(o, ci, kh, kw) = v * s;
                }
            }
        }
        layer.bias.data_mut()[o] = layer.bias.data()[o] * s;
    }
}

/// Fold a mask sitting on this conv's *input* (after a LeakyReLU): the
/// positive-homogeneity rewrite `W * (f(x) . m) == (W .in m) * f(x)`.
fn scale_input_channels<T: Scalar>(layer: &mut ConvLayer<T>, m: &[T]) {
    debug_assert_eq!(layer.groups, 1);
    let ws = layer.weight.shape();
    for o in 0..ws.n {
        for ci in 0..ws.c {
            let s = m[ci];
            for kh in 0..ws.h {
                for kw in 0..ws.w {
                    let v = layer.weight.at(o, ci, kh, kw);
                    *layer.weight.at_mut(o, ci, kh, kw) = v * s;
                }
            }
        }
    }
}

/// Same fold for the depthwise conv: kernel `c` scales by `m[c]`, bias stays.
fn scale_depthwise_inputs<T: Scalar>(layer: &mut ConvLayer<T>, m: &[T]) {
    let ws = layer.weight.shape();
    debug_assert_eq!(layer.groups, ws.n);
    for o in 0..ws.n {
        let s = m[o];
        for kh in 0..ws.h {
            for kw in 0..ws.w {
                let v = layer.weight.at(o, 0, kh, kw);
                *layer.weight.at_mut(o, 0, kh, kw) = v * s;
            }
        }
    }
}

/// Map post-shuffle channel indices to the `r^2` pre-shuffle filters.
fn expand_subpixel_indices(keep: &[usize], r2: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(keep.len() * r2);
    for &c in keep {
        for j in 0..r2 {
            out.push(c * r2 + j);
        }
    }
    out
}

/// Fold a post-shuffle output mask into pre-shuffle filters.
fn scale_output_channels_subpixel<T: Scalar>(layer: &mut ConvLayer<T>, m: &[T], r2: usize) {
    let expanded: Vec<T> = (0..layer.weight.shape().n).map(|o| m[o / r2]).collect();
    scale_output_channels(layer, &expanded);
}

struct FrozenMask<'a, T> {
    values: &'a [T],
    survivors: &'a [usize],
}

fn frozen<'a, T: Scalar>(
    mm: &'a MaskedModel<T>,
    site: MaskSite,
    needs_positive: bool,
) -> Result<FrozenMask<'a, T>, Error> {
    let m = mm
        .mask(site)
        .ok_or_else(|| Error::Sequencing(format!("no mask at {site:?}")))?;
    if !m.frozen {
        return Err(Error::Sequencing(format!("mask at {site:?} is not frozen")));
    }
    if m.target == 0 {
        return Err(Error::Invalid(format!(
            "mask at {site:?} has no surviving channels"
        )));
    }
    if needs_positive {
        for &s in &m.survivors {
            if m.values.data()[s].to_f64() < 0.0 {
                return Err(Error::Invalid(format!(
                    "negative survivor at {site:?} breaks the LeakyReLU fold"
                )));
            }
        }
    }
    Ok(FrozenMask {
        values: m.values.data(),
        survivors: &m.survivors,
    })
}

fn merge_rb_down<T: Scalar>(
    rb: &ResidualBlockDown<T>,
    keep_in: &[usize],
    inner: &FrozenMask<'_, T>,
    outer: &FrozenMask<'_, T>,
) -> ResidualBlockDown<T> {
    let mut conv1 = keep_input_channels(&rb.conv1, keep_in);
    conv1 = keep_output_channels(&conv1, inner.survivors);

    let mut conv2 = rb.conv2.clone();
    scale_input_channels(&mut conv2, inner.values);
    scale_output_channels(&mut conv2, outer.values);
    conv2 = keep_input_channels(&conv2, inner.survivors);
    conv2 = keep_output_channels(&conv2, outer.survivors);

    let mut shortcut = rb.shortcut.clone();
    scale_output_channels(&mut shortcut, outer.values);
    shortcut = keep_input_channels(&shortcut, keep_in);
    shortcut = keep_output_channels(&shortcut, outer.survivors);

    ResidualBlockDown {
        conv1,
        conv2,
        shortcut,
    }
}

fn merge_rb_up<T: Scalar>(
    rb: &ResidualBlockUp<T>,
    keep_in: &[usize],
    inner: &FrozenMask<'_, T>,
    outer: &FrozenMask<'_, T>,
) -> ResidualBlockUp<T> {
    let mut conv1 = keep_input_channels(&rb.conv1, keep_in);
    conv1 = keep_output_channels(&conv1, &expand_subpixel_indices(inner.survivors, 4));

    let mut conv2 = rb.conv2.clone();
    scale_input_channels(&mut conv2, inner.values);
    scale_output_channels(&mut conv2, outer.values);
    conv2 = keep_input_channels(&conv2, inner.survivors);
    conv2 = keep_output_channels(&conv2, outer.survivors);

    let mut shortcut = rb.shortcut.clone();
    scale_output_channels_subpixel(&mut shortcut, outer.values, 4);
    shortcut = keep_input_channels(&shortcut, keep_in);
    shortcut = keep_output_channels(&shortcut, &expand_subpixel_indices(outer.survivors, 4));

    ResidualBlockUp {
        conv1,
        conv2,
        shortcut,
    }
}

fn merge_dcb<T: Scalar>(
    dcb: &DepthConvBlock<T>,
    grp: &FrozenMask<'_, T>,
    dc_inner: &FrozenMask<'_, T>,
    ffn_inner: &FrozenMask<'_, T>,
    leaky_slope: T,
) -> DepthConvBlock<T> {
    let mut conv_in = keep_input_channels(&dcb.conv_in, grp.survivors);
    conv_in = keep_output_channels(&conv_in, dc_inner.survivors);

    let mut dw = dcb.dw.clone();
    scale_depthwise_inputs(&mut dw, dc_inner.values);
    dw = keep_depthwise_channels(&dw, dc_inner.survivors);

    let mut conv_mid = dcb.conv_mid.clone();
    // a pruned depthwise channel still emits its bias (its input is all
    // zeros), and that constant reaches conv_mid through the LeakyReLU;
    // absorb it into conv_mid's bias before deleting the channel
    for c in 0..dcb.dw.c_out() {
        if dc_inner.survivors.contains(&c) {
            continue;
        }
        let b = dcb.dw.bias.data()[c];
        let act = if b >= T::ZERO { b } else { leaky_slope * b };
        for o in 0..conv_mid.c_out() {
            let w = conv_mid.weight.at(o, c, 0, 0);
            conv_mid.bias.data_mut()[o] += w * act;
        }
    }
    scale_output_channels(&mut conv_mid, grp.values);
    conv_mid = keep_input_channels(&conv_mid, dc_inner.survivors);
    conv_mid = keep_output_channels(&conv_mid, grp.survivors);

    let mut ffn_expand = keep_input_channels(&dcb.ffn_expand, grp.survivors);
    ffn_expand = keep_output_channels(&ffn_expand, ffn_inner.survivors);

    let mut ffn_contract = dcb.ffn_contract.clone();
    scale_input_channels(&mut ffn_contract, ffn_inner.values);
    scale_output_channels(&mut ffn_contract, grp.values);
    ffn_contract = keep_input_channels(&ffn_contract, ffn_inner.survivors);
    ffn_contract = keep_output_channels(&ffn_contract, grp.survivors);

    DepthConvBlock {
        conv_in,
        dw,
        conv_mid,
        ffn_expand,
        ffn_contract,
    }
}

/// Merge all frozen masks into the convolutions, producing a plain student
/// model with the pruned scheme and no mask layers.
pub fn merge_masks<T: Scalar>(mm: &MaskedModel<T>) -> Result<Model<T>, Error> {
    if !mm.all_frozen() {
        return Err(Error::Sequencing(
            "merge requires every mask to be frozen".into(),
        ));
    }
    let stages = mm.model.cfg.stages;
    let slope = T::from_f64(mm.model.cfg.leaky_slope);
    let mut model = mm.model.clone();

    for half in [Half::Encoder, Half::Decoder] {
        if mm
            .mask(MaskSite::new(half, 0, MaskKind::StageOutput))
            .is_none()
        {
            continue;
        }
        let mut keep_prev: Vec<usize> = match half {
            Half::Encoder => (0..3).collect(),
            Half::Decoder => (0..model.cfg.latent_channels).collect(),
        };
        let mut new_widths = Vec::with_capacity(stages);
        for stage in 0..stages {
            let grp = frozen(mm, MaskSite::new(half, stage, MaskKind::StageOutput), false)?;
            let rb_inner = frozen(mm, MaskSite::new(half, stage, MaskKind::ResidualInner), true)?;
            let dc_inner = frozen(mm, MaskSite::new(half, stage, MaskKind::DepthInner), true)?;
            let ffn_inner = frozen(mm, MaskSite::new(half, stage, MaskKind::FfnExpansion), true)?;
            match half {
                Half::Encoder => {
                    let s = &mm.model.enc.stages[stage];
                    model.enc.stages[stage].rb = merge_rb_down(&s.rb, &keep_prev, &rb_inner, &grp);
                    model.enc.stages[stage].dcb = merge_dcb(&s.dcb, &grp, &dc_inner, &ffn_inner, slope);
                }
                Half::Decoder => {
                    let s = &mm.model.dec.stages[stage];
                    model.dec.stages[stage].rb = merge_rb_up(&s.rb, &keep_prev, &rb_inner, &grp);
                    model.dec.stages[stage].dcb = merge_dcb(&s.dcb, &grp, &dc_inner, &ffn_inner, slope);
                }
            }
            new_widths.push(grp.survivors.len());
            keep_prev = grp.survivors.to_vec();
        }
        match half {
            Half::Encoder => {
                model.enc.proj = keep_input_channels(&model.enc.proj, &keep_prev);
                let mut w = model.cfg.enc_scheme.widths();
                for (i, &nw) in new_widths.iter().enumerate() {
                    w[i] = nw;
                }
                model.cfg.enc_scheme = ChannelScheme::new(w[0], w[1], w[2], w[3]);
                model.enc.scheme = model.cfg.enc_scheme;
            }
            Half::Decoder => {
                model.dec.proj = keep_input_channels(&model.dec.proj, &keep_prev);
                // decoder stages run deepest-first; map back to c1..c4
                let mut w = model.cfg.dec_scheme.widths();
                for (i, &nw) in new_widths.iter().enumerate() {
                    w[stages - 1 - i] = nw;
                }
                model.cfg.dec_scheme = ChannelScheme::new(w[0], w[1], w[2], w[3]);
                model.dec.scheme = model.cfg.dec_scheme;
            }
        }
    }
    model.assign_param_ids();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_rate_points, ModelConfig, NoMasks, PureFwd};
    use crate::rng::Rng;

    #[test]
    fn sparsity_loss_reference_values() {
        assert_eq!(sparsity_loss(0.0, SparsityKind::Ours), 0.0);
        assert_eq!(sparsity_loss(1.0, SparsityKind::Ours), 0.5);
        assert_eq!(sparsity_loss(2.0, SparsityKind::Ours), 1.0);
        assert_eq!(sparsity_loss(2.0, SparsityKind::L2), 2.0);
        assert_eq!(sparsity_loss(0.3, SparsityKind::L1), 0.3);
    }

    #[test]
    fn sparsity_grad_reference_values() {
        assert_eq!(sparsity_grad(1.0, SparsityKind::Ours), 0.0);
        assert_eq!(sparsity_grad(0.0, SparsityKind::Ours), 1.0);
        assert_eq!(sparsity_grad(3.0, SparsityKind::Ours), 2.0);
        assert_eq!(sparsity_grad(0.2, SparsityKind::L1), 1.0);
        assert!((sparsity_grad(0.2, SparsityKind::L2) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn loss_is_continuous_and_smooth_at_one() {
        let eps = 1e-9;
        let below = sparsity_loss(1.0 - eps, SparsityKind::Ours);
        let above = sparsity_loss(1.0 + eps, SparsityKind::Ours);
        assert!((below - above).abs() < 1e-8);
        let g_below = sparsity_grad(1.0 - eps, SparsityKind::Ours);
        let g_above = sparsity_grad(1.0 + eps, SparsityKind::Ours);
        assert!(g_below < 1e-8 && g_above < 1e-8);
    }

    fn mask_of(values: &[f64], target: usize) -> MaskState<f64> {
        let site = MaskSite::new(Half::Encoder, 0, MaskKind::ResidualInner);
        let mut m = MaskState::new(site, values.len(), target).unwrap();
        for (slot, &v) in m.values.data_mut().iter_mut().zip(values) {
            *slot = v;
        }
        m
    }

    #[test]
    fn decay_arithmetic_matches_update_formula() {
        let cfg = DecayConfig::new(0.1, SparsityKind::Ours);
        let mut m = mask_of(&[0.5], 1);
        decay_step(&mut m, &cfg, 0.0, None).unwrap();
        assert!((m.values.data()[0] - 0.45).abs() < 1e-12);

        let mut one = mask_of(&[1.0], 1);
        decay_step(&mut one, &cfg, 0.0, None).unwrap();
        assert_eq!(one.values.data()[0], 1.0);
    }

    #[test]
    fn avoid_set_decays_fast_and_clamps_at_zero() {
        let cfg = DecayConfig::new(0.1, SparsityKind::Ours).with_eta_avoid(1.0);
        let mut m = mask_of(&[0.5, 0.5], 2);
        m.set_avoid_set(&[1]).unwrap();
        let outcome = decay_step(&mut m, &cfg, 0.0, None).unwrap();
        assert!((m.values.data()[0] - 0.45).abs() < 1e-12);
        // avoided channel: 0.5 - 1.0 * 0.5 = 0.0
        assert_eq!(m.values.data()[1], 0.0);
        assert_eq!(outcome, DecayOutcome::Applied { clamped_at_zero: 0 });
        // one more step pushes it negative and the clamp catches it
        let outcome = decay_step(&mut m, &cfg, 0.0, None).unwrap();
        assert_eq!(m.values.data()[1], 0.0);
        assert_eq!(outcome, DecayOutcome::Applied { clamped_at_zero: 1 });
    }

    #[test]
    fn frozen_masks_skip_decay() {
        let cfg = DecayConfig::new(0.1, SparsityKind::Ours);
        let mut m = mask_of(&[0.5], 1);
        force_freeze(&mut m, 7);
        assert_eq!(
            decay_step(&mut m, &cfg, 0.0, None).unwrap(),
            DecayOutcome::SkippedFrozen
        );
        assert_eq!(m.frozen_at, Some(7));
    }

    #[test]
    fn decay_converges_from_below_and_above() {
        let cfg = DecayConfig::new(0.1, SparsityKind::Ours);
        let mut low = mask_of(&[0.5], 1);
        let mut reached = usize::MAX;
        for step in 0..40 {
            decay_step(&mut low, &cfg, 0.0, None).unwrap();
            if low.values.data()[0].abs() < 1e-3 {
                reached = step;
                break;
            }
        }
        assert!(reached < 40, "mask never fell below tau");

        let mut high = mask_of(&[2.0], 1);
        let mut prev = 2.0;
        for _ in 0..200 {
            decay_step(&mut high, &cfg, 0.0, None).unwrap();
            let v = high.values.data()[0];
            assert!(v >= 1.0 && v <= prev);
            prev = v;
        }
        assert!((prev - 1.0).abs() < 1e-4);
    }

    #[test]
    fn l1_needs_the_clamp_and_l2_stalls_at_zero() {
        let cfg = DecayConfig::new(0.1, SparsityKind::L1);
        let mut m = mask_of(&[0.05], 1);
        decay_step(&mut m, &cfg, 0.0, None).unwrap();
        // unclamped L1 would land at -0.05
        assert_eq!(m.values.data()[0], 0.0);

        let cfg2 = DecayConfig::new(0.1, SparsityKind::L2);
        let mut z = mask_of(&[0.0], 1);
        decay_step(&mut z, &cfg2, 0.0, None).unwrap();
        assert_eq!(z.values.data()[0], 0.0);
    }

    #[test]
    fn sparse_enough_rule_matches_examples() {
        let cfg = DecayConfig::new(0.1, SparsityKind::Ours);
        let mut m = mask_of(&[0.9, 1e-5, 1e-6, 0.8], 2);
        assert!(check_sparse_enough(&mut m, &cfg, 11));
        assert!(m.frozen);
        assert_eq!(m.values.data(), &[0.9, 0.0, 0.0, 0.8]);
        assert_eq!(m.survivors, vec![0, 3]);
        assert_eq!(m.frozen_at, Some(11));

        let mut ones = mask_of(&[1.0, 1.0, 1.0, 1.0], 2);
        assert!(!check_sparse_enough(&mut ones, &cfg, 0));

        let mut degenerate = mask_of(&[1.0, 1.0], 2);
        assert!(check_sparse_enough(&mut degenerate, &cfg, 0));
        assert_eq!(degenerate.values.data(), &[1.0, 1.0]);
    }

    #[test]
    fn freeze_breaks_ties_by_lowest_index() {
        let mut m = mask_of(&[0.5, 0.5, 0.5], 2);
        force_freeze(&mut m, 0);
        assert_eq!(m.survivors, vec![0, 1]);
    }

    // ─── merge tests ────────────────────────────────────────────────────

    fn toy_model(width: usize) -> Model<f64> {
        let cfg = ModelConfig::new(
            ChannelScheme::new(width, width, width, width),
            ChannelScheme::new(width, width, width, width),
            8,
            4,
        )
        .with_stages(2);
        Model::build(cfg, &default_rate_points(), 31).unwrap()
    }

    /// Freeze every mask with random positive values.
    fn randomize_and_freeze(mm: &mut MaskedModel<f64>, rng: &mut Rng) {
        for m in &mut mm.masks {
            for v in m.values.data_mut() {
                *v = rng.uniform(0.05, 1.5);
            }
            force_freeze(m, 1);
        }
    }

    #[test]
    fn merge_requires_frozen_masks() {
        let model = toy_model(6);
        let mm = insert_masks(
            model,
            PruneTarget::Encoder,
            ChannelScheme::new(3, 3, 3, 3),
            ChannelScheme::new(6, 6, 6, 6),
        )
        .unwrap();
        assert!(matches!(merge_masks(&mm), Err(Error::Sequencing(_))));
    }

    #[test]
    fn all_ones_masks_merge_to_identical_weights() {
        let model = toy_model(6);
        let mut mm = insert_masks(
            model.clone(),
            PruneTarget::Both,
            ChannelScheme::new(6, 6, 6, 6),
            ChannelScheme::new(6, 6, 6, 6),
        )
        .unwrap();
        for m in &mut mm.masks {
            force_freeze(m, 0);
        }
        let merged = merge_masks(&mm).unwrap();
        assert_eq!(merged.flatten_params(), model.flatten_params());
    }

    #[test]
    fn masked_and_merged_model_agree() {
        let mut rng = Rng::new(77);
        let model = toy_model(8);
        let mut mm = insert_masks(
            model,
            PruneTarget::Both,
            ChannelScheme::new(3, 5, 8, 8),
            ChannelScheme::new(4, 6, 8, 8),
        )
        .unwrap();
        randomize_and_freeze(&mut mm, &mut rng);
        let merged = merge_masks(&mm).unwrap();
        assert_eq!(merged.cfg.enc_scheme, ChannelScheme::new(3, 5, 8, 8));
        assert_eq!(merged.cfg.dec_scheme, ChannelScheme::new(4, 6, 8, 8));

        for trial in 0..5 {
            let x = Tensor::rand_uniform(Shape::new(1, 3, 16, 16), 1.0, &mut rng);
            let lookup = mm.lookup();
            let mut masked_ctx = PureFwd::new(mm.model.cfg.leaky_slope, &lookup);
            let y_masked = mm.model.enc.forward(&mut masked_ctx, &x).unwrap();
            let mut merged_ctx = PureFwd::new(merged.cfg.leaky_slope, &NoMasks);
            let y_merged = merged.enc.forward(&mut merged_ctx, &x).unwrap();
            let err = y_masked.max_rel_diff(&y_merged, 1e-6);
            assert!(err < 1e-9, "encoder mismatch {err} on trial {trial}");

            let x_hat_masked = mm.model.dec.forward(&mut masked_ctx, &y_masked).unwrap();
            let x_hat_merged = merged.dec.forward(&mut merged_ctx, &y_masked).unwrap();
            let err = x_hat_masked.max_rel_diff(&x_hat_merged, 1e-6);
            assert!(err < 1e-9, "decoder mismatch {err} on trial {trial}");
        }
    }

    #[test]
    fn merged_param_count_matches_fresh_student() {
        let mut rng = Rng::new(5);
        let teacher = toy_model(8);
        let student_scheme = ChannelScheme::new(4, 4, 8, 8);
        let mut mm =
            insert_masks(teacher, PruneTarget::Both, student_scheme, student_scheme).unwrap();
        randomize_and_freeze(&mut mm, &mut rng);
        let merged = merge_masks(&mm).unwrap();

        let fresh_cfg = ModelConfig::new(student_scheme, student_scheme, 8, 4).with_stages(2);
        let fresh: Model<f64> = Model::build(fresh_cfg, &default_rate_points(), 1).unwrap();
        assert_eq!(
            merged.count_params(),
            fresh.count_params(),
            "merged student must match a freshly built student"
        );
    }

    #[test]
    fn zero_target_mask_is_a_structural_error() {
        let model = toy_model(4);
        let mut mm = insert_masks(
            model,
            PruneTarget::Encoder,
            ChannelScheme::new(4, 4, 4, 4),
            ChannelScheme::new(4, 4, 4, 4),
        )
        .unwrap();
        for m in &mut mm.masks {
            m.target = 0;
            force_freeze(m, 0);
        }
        assert!(matches!(merge_masks(&mm), Err(Error::Invalid(_))));
    }

    #[test]
    fn negative_survivor_on_inner_mask_is_rejected() {
        let model = toy_model(4);
        let mut mm = insert_masks(
            model,
            PruneTarget::Encoder,
            ChannelScheme::new(2, 2, 2, 2),
            ChannelScheme::new(4, 4, 4, 4),
        )
        .unwrap();
        for m in &mut mm.masks {
            for v in m.values.data_mut() {
                *v = -0.5;
            }
            force_freeze(m, 0);
        }
        assert!(matches!(merge_masks(&mm), Err(Error::Invalid(_))));
    }

    #[test]
    fn student_wider_than_teacher_is_rejected() {
        let model = toy_model(4);
        assert!(insert_masks(
            model,
            PruneTarget::Encoder,
            ChannelScheme::new(8, 4, 4, 4),
            ChannelScheme::new(4, 4, 4, 4),
        )
        .is_err());
    }

    #[test]
    fn survivor_overlap_counts() {
        let a = [0usize, 1, 2, 3];
        let b = [2usize, 3, 4, 5];
        let (i, u) = survivor_overlap(&[&a, &b]);
        assert_eq!(i, 2);
        assert_eq!(u, 6);
    }

    #[test]
    fn identity_masks_leave_masked_forward_bitwise_equal() {
        let model = toy_model(6);
        let mm = insert_masks(
            model.clone(),
            PruneTarget::Both,
            ChannelScheme::new(3, 3, 3, 3),
            ChannelScheme::new(3, 3, 3, 3),
        )
        .unwrap();
        let mut rng = Rng::new(2);
        let x = Tensor::rand_uniform(Shape::new(1, 3, 8, 8), 1.0, &mut rng);
        let lookup = mm.lookup();
        let mut masked_ctx = PureFwd::new(model.cfg.leaky_slope, &lookup);
        let mut plain_ctx = PureFwd::new(model.cfg.leaky_slope, &NoMasks);
        let a = model.enc.forward(&mut masked_ctx, &x).unwrap();
        let b = model.enc.forward(&mut plain_ctx, &x).unwrap();
        assert_eq!(a, b);
    }
}
