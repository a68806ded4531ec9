//! Desk-scale training: the rate-distortion loss graph, the variable-rate
//! sampling loop with the two-phase decay + finetune schedule, and the
//! distillation pipeline that turns a teacher into a student.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::error::Error;
use crate::image::ImageU8;
use crate::mask::{
    check_sparse_enough, decay_step, force_freeze, insert_masks, merge_masks, ChosenChannels,
    DecayConfig, MaskedModel, PruneTarget,
};
use crate::model::{ChannelScheme, MaskSite, Model, TapeFwd, SCALE_MAX, SCALE_MIN};
use crate::nn::Parity;
use crate::optim::AdamW;
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

/// Training schedule and sampling parameters. `lambdas` come from the model's
/// rate points; an epoch is `ceil(images / batch)` iterations unless
/// `iters_per_epoch` pins it.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs_total: usize,
    /// Leading epochs in which masks decay; the remainder is finetuning.
    pub epochs_decay: usize,
    pub lr: f64,
    /// Epochs at which the learning rate multiplies by `lr_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    pub iters_per_epoch: Option<usize>,
}

impl TrainConfig {
    pub fn quick(epochs: usize, crop: usize, seed: u64) -> Self {
        TrainConfig {
            epochs_total: epochs,
            epochs_decay: 0,
            lr: 2e-4,
            lr_milestones: Vec::new(),
            lr_factor: 0.5,
            batch_size: 4,
            crop,
            seed,
            iters_per_epoch: None,
        }
    }

    pub fn epochs_finetune(&self) -> usize {
        self.epochs_total - self.epochs_decay
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.epochs_decay > self.epochs_total {
            return Err(Error::Invalid(
                "decay epochs exceed the total schedule".into(),
            ));
        }
        if self.batch_size == 0 || self.crop == 0 || self.epochs_total == 0 {
            return Err(Error::Invalid("degenerate training configuration".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * libm::pow(self.lr_factor, drops as f64)
    }
}

/// In-memory dataset with random crop + horizontal flip augmentation.
/// Optional per-image weights bias the sampling (importance sampling of the
/// weighted loss).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ImageU8>,
    pub weights: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(images: Vec<ImageU8>) -> Result<Self, Error> {
        if images.is_empty() {
            return Err(Error::Invalid("dataset is empty".into()));
        }
        Ok(Dataset {
            images,
            weights: None,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, Error> {
        if weights.len() != self.images.len() {
            return Err(Error::Dimension("one weight per image required".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Invalid("weights must be positive".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    fn pick_image(&self, rng: &mut Rng) -> usize {
        match &self.weights {
            None => rng.below(self.images.len()),
            Some(w) => {
                let total: f64 = w.iter().sum();
                let mut t = rng.next_f64() * total;
                for (i, &wi) in w.iter().enumerate() {
                    t -= wi;
                    if t <= 0.0 {
                        return i;
                    }
                }
                w.len() - 1
            }
        }
    }

    /// One `[B, 3, crop, crop]` batch.
    pub fn sample_batch<T: Scalar>(
        &self,
        batch: usize,
        crop: usize,
        rng: &mut Rng,
    ) -> Result<Tensor<T>, Error> {
        let mut out = Tensor::zeros(Shape::new(batch, 3, crop, crop));
        for b in 0..batch {
            let img = &self.images[self.pick_image(rng)];
            if img.width < crop || img.height < crop {
                return Err(Error::Invalid(format!(
                    "image {}x{} smaller than crop {crop}",
                    img.width, img.height
                )));
            }
            let cx = rng.below(img.width - crop + 1);
            let cy = rng.below(img.height - crop + 1);
            let mut patch = img.crop(cx, cy, crop, crop)?;
            if rng.coin() {
                patch = patch.flip_horizontal();
            }
            for y in 0..crop {
                for x in 0..crop {
                    let p = patch.pixel(x, y);
                    for c in 0..3 {
                        *out.at_mut(b, c, y, x) = T::from_f64(p[c] as f64 / 255.0);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// How pass-2 conditions on the anchor half during training.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Conditioning {
    /// Straight-through rounded anchors (the training default).
    SteRound,
    /// The noisy relaxation itself; fully differentiable, used by gradient
    /// verification.
    Noisy,
}

/// Handles into a built rate-distortion graph.
pub struct RdGraph<T: Scalar> {
    pub fw: TapeFwd<T>,
    pub loss: Var,
    pub rate_bpp: Var,
    pub mse: Var,
}

impl<T: Scalar> RdGraph<T> {
    pub fn loss_value(&self) -> f64 {
        self.fw.tape.value(self.loss).data()[0].to_f64()
    }

    pub fn rate_value(&self) -> f64 {
        self.fw.tape.value(self.rate_bpp).data()[0].to_f64()
    }

    pub fn mse_value(&self) -> f64 {
        self.fw.tape.value(self.mse).data()[0].to_f64()
    }
}

fn ceil_to(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Build the full differentiable rate-distortion graph
/// `loss = R + lambda * D` for one batch under the uniform-noise relaxation.
pub fn build_rd_graph<T: Scalar>(
    model: &Model<T>,
    masks: &[(MaskSite, Tensor<T>)],
    x: &Tensor<T>,
    rate_index: usize,
    lambda: f64,
    noise_rng: &mut Rng,
    conditioning: Conditioning,
) -> Result<RdGraph<T>, Error> {
    if rate_index >= model.quant.rate_points() {
        return Err(Error::Invalid(format!("rate index {rate_index} out of range")));
    }
    let mut fw = TapeFwd::new(model, masks);
    let x_leaf = fw.tape.leaf(x.clone(), false);

    let y = model.enc.forward(&mut fw, &x_leaf)?;
    let ys = fw.tape.shape(y);

    // effective step = exp(q_ch) * exp(q_global[rate_index])
    let q_ch = fw.param_var(model.q_ch_param_id());
    let q_g_all = fw.param_var(model.q_global_param_id());
    let q_ch = fw.tape.exp(q_ch);
    let q_g = fw.tape.slice_channels(q_g_all, rate_index, rate_index + 1)?;
    let q_g = fw.tape.exp(q_g);
    let step = fw.tape.mul_scalar(q_ch, q_g)?;

    // hyper path (pad so two stride-2 stages always fit, crop after)
    let ypad = fw.tape.pad_hw(y, ceil_to(ys.h, 4), ceil_to(ys.w, 4))?;
    let z = model.hyper_enc.forward(&mut fw, &ypad)?;
    let zs = fw.tape.shape(z);
    let z_noise = {
        let mut t = Tensor::zeros(zs);
        for v in t.data_mut() {
            *v = T::from_f64(noise_rng.uniform(-0.5, 0.5));
        }
        fw.tape.leaf(t, false)
    };
    let z_tilde = fw.tape.add(z, z_noise)?;
    let hyper_full = model.hyper_dec.forward(&mut fw, &z_tilde)?;
    let hyper_out = fw.tape.crop_hw(hyper_full, ys.h, ys.w)?;

    let m = model.cfg.latent_channels;
    let mean1 = fw.tape.slice_channels(hyper_out, 0, m)?;
    let scale1_raw = fw.tape.slice_channels(hyper_out, m, 2 * m)?;
    let scale1_pos = fw.tape.exp(scale1_raw);
    let scale1 = fw.tape.clamp(scale1_pos, SCALE_MIN, SCALE_MAX);

    // noisy latent
    let y_noise = {
        let mut t = Tensor::zeros(ys);
        for v in t.data_mut() {
            *v = T::from_f64(noise_rng.uniform(-0.5, 0.5));
        }
        fw.tape.leaf(t, false)
    };
    let scaled_noise = fw.tape.channel_scale(y_noise, step)?;
    let y_tilde = fw.tape.add(y, scaled_noise)?;

    let bits1_map = fw.tape.gaussian_bits(y_tilde, mean1, scale1, step)?;
    let bits1_masked = fw.tape.checker_mask(bits1_map, Parity::Anchor);
    let bits1 = fw.tape.sum_all(bits1_masked);

    // pass-2 conditioning on the reconstructed anchor half
    let y1_cond = match conditioning {
        Conditioning::SteRound => {
            let rounded = fw.tape.quantize_ste(y, step)?;
            fw.tape.checker_mask(rounded, Parity::Anchor)
        }
        Conditioning::Noisy => fw.tape.checker_mask(y_tilde, Parity::Anchor),
    };
    let fused_in = fw.tape.concat_channels(hyper_out, y1_cond)?;
    let fusion_out = model.fusion.forward(&mut fw, &fused_in)?;
    let mean2 = fw.tape.slice_channels(fusion_out, 0, m)?;
    let scale2_raw = fw.tape.slice_channels(fusion_out, m, 2 * m)?;
    let scale2_pos = fw.tape.exp(scale2_raw);
    let scale2 = fw.tape.clamp(scale2_pos, SCALE_MIN, SCALE_MAX);

    let bits2_map = fw.tape.gaussian_bits(y_tilde, mean2, scale2, step)?;
    let bits2_masked = fw.tape.checker_mask(bits2_map, Parity::NonAnchor);
    let bits2 = fw.tape.sum_all(bits2_masked);

    let z_bits_map = fw.tape.factorized_bits(z_tilde, fw.param_var(model.prior_param_id()))?;
    let z_bits = fw.tape.sum_all(z_bits_map);

    let xs = x.shape();
    let n_pixels = (xs.n * xs.h * xs.w) as f64;
    let y_bits = fw.tape.add(bits1, bits2)?;
    let total_bits = fw.tape.add(y_bits, z_bits)?;
    let rate_bpp = fw.tape.scale_const(total_bits, 1.0 / n_pixels);

    let x_hat = model.dec.forward(&mut fw, &y_tilde)?;
    let diff = fw.tape.sub(x_hat, x_leaf)?;
    let sq = fw.tape.hadamard(diff, diff)?;
    let sum_sq = fw.tape.sum_all(sq);
    let mse = fw.tape.scale_const(sum_sq, 1.0 / x.len() as f64);

    let weighted_d = fw.tape.scale_const(mse, lambda);
    let loss = fw.tape.add(rate_bpp, weighted_d)?;

    Ok(RdGraph {
        fw,
        loss,
        rate_bpp,
        mse,
    })
}

/// Evaluate the RD loss components on one batch without touching gradients.
pub fn rd_loss<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    lambda: f64,
    rate_index: usize,
    noise_rng: &mut Rng,
) -> Result<(f64, f64, f64), Error> {
    let g = build_rd_graph(
        model,
        &[],
        x,
        rate_index,
        lambda,
        noise_rng,
        Conditioning::SteRound,
    )?;
    Ok((g.loss_value(), g.rate_value(), g.mse_value()))
}

/// Which parameter tensors the optimizer may touch.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Trainable {
    All,
    /// Only the analysis encoder (the scalable-bank regimes).
    EncoderOnly,
}

/// What is being trained.
pub enum TrainSubject<T> {
    Plain(Model<T>),
    Masked(MaskedModel<T>),
}

impl<T: Scalar> TrainSubject<T> {
    pub fn model(&self) -> &Model<T> {
        match self {
            TrainSubject::Plain(m) => m,
            TrainSubject::Masked(mm) => &mm.model,
        }
    }

    pub fn into_plain(self) -> Result<Model<T>, Error> {
        match self {
            TrainSubject::Plain(m) => Ok(m),
            TrainSubject::Masked(_) => Err(Error::Sequencing(
                "subject still carries masks; merge first".into(),
            )),
        }
    }
}

/// Per-epoch averaged metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub rate_bpp: f64,
    pub mse: f64,
}

/// Fixed CSV schema for the metrics log.
pub fn metrics_csv(rows: &[EpochMetrics]) -> alloc::string::String {
    let mut out = alloc::string::String::from("epoch,loss,rate_bpp,mse\n");
    for r in rows {
        out += &format!("{},{:.8},{:.8},{:.8}\n", r.epoch, r.loss, r.rate_bpp, r.mse);
    }
    out
}

/// Audit trail of the decay machinery.
#[derive(Clone, Debug, Default)]
pub struct TrainEvents {
    /// `(site, iteration)` for every natural freeze.
    pub freezes: Vec<(MaskSite, u64)>,
    /// Iteration of the last decay application.
    pub last_decay_iteration: Option<u64>,
    /// First iteration of the finetune phase.
    pub decay_boundary_iteration: u64,
    /// Masks force-frozen at the phase boundary.
    pub force_frozen: usize,
    /// Total coordinates caught by the zero clamp.
    pub clamped_total: u64,
}

pub struct TrainResult<T> {
    pub subject: TrainSubject<T>,
    pub metrics: Vec<EpochMetrics>,
    pub events: TrainEvents,
}

/// The training loop. Per iteration: sample a `(lambda, rate index)` pair
/// uniformly, build the graph, decay unfrozen masks (decay phase only,
/// before the optimizer step), then apply the AdamW step to the trainable
/// parameters and to the mask survivors.
pub fn train<T: Scalar>(
    subject: TrainSubject<T>,
    cfg: &TrainConfig,
    data: &Dataset,
    decay: Option<&DecayConfig>,
    trainable: Trainable,
) -> Result<TrainResult<T>, Error> {
    cfg.validate()?;
    let (mut model, mut masks): (Model<T>, Vec<crate::mask::MaskState<T>>) = match subject {
        TrainSubject::Plain(m) => (m, Vec::new()),
        TrainSubject::Masked(mm) => (mm.model, mm.masks),
    };
    if !masks.is_empty() && decay.is_none() {
        return Err(Error::Invalid(
            "masked training needs a decay configuration".into(),
        ));
    }

    let mut rng = Rng::new(cfg.seed);
    let iters = cfg
        .iters_per_epoch
        .unwrap_or_else(|| data.images.len().div_ceil(cfg.batch_size).max(1));
    let n_param_tensors = model.param_tensor_count();
    let enc_tensors = model.enc.conv_layers().len() * 2;
    let mut opt = AdamW::new(cfg.lr, n_param_tensors + masks.len());

    let mut metrics = Vec::with_capacity(cfg.epochs_total);
    let mut events = TrainEvents {
        decay_boundary_iteration: (cfg.epochs_decay * iters) as u64,
        ..TrainEvents::default()
    };
    let mut initial_loss: Option<f64> = None;
    let mut bad_epochs = 0usize;

    for epoch in 0..cfg.epochs_total {
        opt.lr = cfg.lr_at(epoch);
        let in_decay_phase = epoch < cfg.epochs_decay;
        let (mut acc_loss, mut acc_rate, mut acc_mse) = (0.0, 0.0, 0.0);

        for it in 0..iters {
            let global_it = (epoch * iters + it) as u64;
            let batch: Tensor<T> = data.sample_batch(cfg.batch_size, cfg.crop, &mut rng)?;
            let rate_index = rng.below(model.quant.rate_points());
            let lambda = model.lambdas[rate_index];

            let tape_masks: Vec<(MaskSite, Tensor<T>)> = masks
                .iter()
                .map(|m| (m.site, m.values.clone()))
                .collect();
            let mut graph = build_rd_graph(
                &model,
                &tape_masks,
                &batch,
                rate_index,
                lambda,
                &mut rng,
                Conditioning::SteRound,
            )?;
            let loss_val = graph.loss_value();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {epoch}, iteration {it} (rate index {rate_index})"
                )));
            }
            acc_loss += loss_val;
            acc_rate += graph.rate_value();
            acc_mse += graph.mse_value();

            graph.fw.tape.backward(graph.loss)?;

            // decay before the optimizer's task step
            if in_decay_phase {
                if let Some(dc) = decay {
                    for mask in masks.iter_mut() {
                        match decay_step(mask, dc, opt.lr, None)? {
                            crate::mask::DecayOutcome::Applied { clamped_at_zero } => {
                                events.clamped_total += clamped_at_zero as u64;
                                events.last_decay_iteration = Some(global_it);
                            }
                            crate::mask::DecayOutcome::SkippedFrozen => {}
                        }
                    }
                    for mask in masks.iter_mut() {
                        if check_sparse_enough(mask, dc, global_it) {
                            events.freezes.push((mask.site, global_it));
                        }
                    }
                }
            }

            // harvest gradients, then step
            opt.begin_step();
            let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n_param_tensors);
            for pid in 0..n_param_tensors {
                grads.push(graph.fw.tape.grad(graph.fw.param_var(pid)).cloned());
            }
            let mut mask_grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(masks.len());
            for m in &masks {
                let var = graph.fw.mask_var(m.site).expect("registered above");
                mask_grads.push(graph.fw.tape.grad(var).cloned());
            }
            drop(graph);

            let mut pid = 0usize;
            model.for_each_param_mut(&mut |t: &mut Tensor<T>| {
                let include = match trainable {
                    Trainable::All => true,
                    Trainable::EncoderOnly => pid < enc_tensors,
                };
                if include {
                    if let Some(g) = &grads[pid] {
                        opt.update(pid, t, g);
                    }
                }
                pid += 1;
            });

            for (mi, mask) in masks.iter_mut().enumerate() {
                let Some(mut g) = mask_grads[mi].take() else {
                    continue;
                };
                if mask.frozen {
                    // dead channels stay dead: clear their gradient
                    for (i, gv) in g.data_mut().iter_mut().enumerate() {
                        if !mask.survivors.contains(&i) {
                            *gv = T::ZERO;
                        }
                    }
                }
                opt.update(n_param_tensors + mi, &mut mask.values, &g);
                if mask.frozen {
                    for i in 0..mask.len() {
                        if !mask.survivors.contains(&i) {
                            mask.values.data_mut()[i] = T::ZERO;
                        }
                    }
                }
            }
        }

        // the decay deadline: entering finetune with anything unfrozen
        if !masks.is_empty() && epoch + 1 == cfg.epochs_decay {
            let boundary = ((epoch + 1) * iters) as u64;
            for mask in masks.iter_mut() {
                if force_freeze(mask, boundary) {
                    events.force_frozen += 1;
                }
            }
        }

        let row = EpochMetrics {
            epoch,
            loss: acc_loss / iters as f64,
            rate_bpp: acc_rate / iters as f64,
            mse: acc_mse / iters as f64,
        };
        metrics.push(row);

        let first = *initial_loss.get_or_insert(row.loss);
        if row.loss > 10.0 * first {
            bad_epochs += 1;
            if bad_epochs >= 3 {
                return Err(Error::Train(format!(
                    "loss diverged: {:.4} vs initial {:.4} for three epochs",
                    row.loss, first
                )));
            }
        } else {
            bad_epochs = 0;
        }
    }

    let subject = if masks.is_empty() {
        TrainSubject::Plain(model)
    } else {
        TrainSubject::Masked(MaskedModel { model, masks })
    };
    Ok(TrainResult {
        subject,
        metrics,
        events,
    })
}

/// Outcome of one distillation run.
pub struct DistillResult<T> {
    pub student: Model<T>,
    pub baseline: Model<T>,
    pub student_metrics: Vec<EpochMetrics>,
    pub baseline_metrics: Vec<EpochMetrics>,
    pub prune_report: alloc::string::String,
    pub chosen: Vec<ChosenChannels>,
    pub events: TrainEvents,
}

/// Teacher-to-student pipeline: insert masks, decay-train, merge, finetune;
/// plus the from-scratch baseline trained with the same total budget.
#[allow(clippy::too_many_arguments)]
pub fn distill_pipeline<T: Scalar>(
    teacher: &Model<T>,
    which: PruneTarget,
    student_enc: ChannelScheme,
    student_dec: ChannelScheme,
    cfg: &TrainConfig,
    decay: &DecayConfig,
    data: &Dataset,
    baseline_seed: u64,
) -> Result<DistillResult<T>, Error> {
    if cfg.epochs_decay == 0 {
        return Err(Error::Invalid("distillation needs a decay phase".into()));
    }
    let mm = insert_masks(teacher.clone(), which, student_enc, student_dec)?;

    // phase 1: decay the masks on the full RD objective
    let decay_cfg = TrainConfig {
        epochs_total: cfg.epochs_decay,
        epochs_decay: cfg.epochs_decay,
        ..cfg.clone()
    };
    let decayed = train(
        TrainSubject::Masked(mm),
        &decay_cfg,
        data,
        Some(decay),
        Trainable::All,
    )?;
    let mut events = decayed.events.clone();
    let mut student_metrics = decayed.metrics.clone();
    let TrainSubject::Masked(mm) = decayed.subject else {
        unreachable!("masked training returns a masked subject");
    };
    let prune_report = mm.prune_report();
    let chosen = mm.record_chosen_channels();
    let student = merge_masks(&mm)?;

    // phase 2: finetune the merged student
    let ft_cfg = TrainConfig {
        epochs_total: cfg.epochs_finetune().max(1),
        epochs_decay: 0,
        seed: cfg.seed ^ 0x5EED_F17E,
        ..cfg.clone()
    };
    let finetuned = train(
        TrainSubject::Plain(student),
        &ft_cfg,
        data,
        None,
        Trainable::All,
    )?;
    student_metrics.extend(finetuned.metrics.iter().map(|m| EpochMetrics {
        epoch: m.epoch + cfg.epochs_decay,
        ..*m
    }));
    events.freezes.extend(finetuned.events.freezes.clone());
    let student = finetuned.subject.into_plain()?;

    // equal-budget baseline from scratch
    let base_cfg = ModelLikeConfig::student_of(teacher, student_enc, student_dec);
    let baseline = Model::build(base_cfg, &rate_points_of(teacher), baseline_seed)?;
    let base_train = TrainConfig {
        epochs_total: cfg.epochs_total,
        epochs_decay: 0,
        seed: cfg.seed ^ 0xBA5E_11FE,
        ..cfg.clone()
    };
    let baseline = train(
        TrainSubject::Plain(baseline),
        &base_train,
        data,
        None,
        Trainable::All,
    )?;
    let baseline_metrics = baseline.metrics.clone();
    let baseline = baseline.subject.into_plain()?;

    Ok(DistillResult {
        student,
        baseline,
        student_metrics,
        baseline_metrics,
        prune_report,
        chosen,
        events,
    })
}

/// Rate points reconstructed from a trained model (for building comparable
/// fresh models).
pub fn rate_points_of<T: Scalar>(model: &Model<T>) -> Vec<crate::model::RatePoint> {
    model
        .lambdas
        .iter()
        .enumerate()
        .map(|(i, &lambda)| crate::model::RatePoint {
            lambda,
            q_global_init: model.quant.q_global(i),
        })
        .collect()
}

struct ModelLikeConfig;

impl ModelLikeConfig {
    fn student_of<T: Scalar>(
        teacher: &Model<T>,
        enc: ChannelScheme,
        dec: ChannelScheme,
    ) -> crate::model::ModelConfig {
        crate::model::ModelConfig {
            enc_scheme: enc,
            dec_scheme: dec,
            ..teacher.cfg
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_rate_points, ModelConfig};

    fn toy_model() -> Model<f32> {
        let cfg = ModelConfig::new(
            ChannelScheme::new(6, 6, 6, 6),
            ChannelScheme::new(6, 6, 6, 6),
            8,
            4,
        )
        .with_stages(2);
        Model::build(cfg, &default_rate_points(), 3).unwrap()
    }

    fn toy_dataset(n: usize, size: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let mut images = Vec::new();
        for _ in 0..n {
            let mut img = ImageU8::new(size, size);
            // smooth gradient plus texture so rate and distortion both move
            let (fx, fy) = (rng.uniform(0.02, 0.2), rng.uniform(0.02, 0.2));
            let phase = rng.uniform(0.0, 6.28);
            for y in 0..size {
                for x in 0..size {
                    let v = 127.0
                        + 90.0 * libm::sin(fx * x as f64 + phase)
                        + 30.0 * libm::cos(fy * y as f64);
                    let r = v.clamp(0.0, 255.0) as u8;
                    let g = (255.0 - v).clamp(0.0, 255.0) as u8;
                    img.set_pixel(x, y, [r, g, ((x * y) % 256) as u8]);
                }
            }
            images.push(img);
        }
        Dataset::new(images).unwrap()
    }

    #[test]
    fn rd_loss_with_zero_lambda_equals_rate() {
        let model = toy_model();
        let data = toy_dataset(2, 16, 5);
        let mut rng = Rng::new(1);
        let x: Tensor<f32> = data.sample_batch(1, 8, &mut rng).unwrap();
        let mut noise = Rng::new(2);
        let g = build_rd_graph(&model, &[], &x, 0, 0.0, &mut noise, Conditioning::SteRound)
            .unwrap();
        assert!((g.loss_value() - g.rate_value()).abs() < 1e-9);
        assert!(g.mse_value() > 0.0);
    }

    #[test]
    fn training_reduces_the_loss_on_a_toy_run() {
        let model = toy_model();
        let data = toy_dataset(6, 24, 7);
        let cfg = TrainConfig {
            epochs_total: 8,
            epochs_decay: 0,
            lr: 1e-3,
            lr_milestones: alloc::vec![],
            lr_factor: 0.5,
            batch_size: 2,
            crop: 8,
            seed: 11,
            iters_per_epoch: Some(10),
        };
        let out = train(
            TrainSubject::Plain(model),
            &cfg,
            &data,
            None,
            Trainable::All,
        )
        .unwrap();
        assert_eq!(out.metrics.len(), 8);
        // epoch means mix different lambda draws, so compare pairs of epochs
        let early = (out.metrics[0].loss + out.metrics[1].loss) / 2.0;
        let late = (out.metrics[6].loss + out.metrics[7].loss) / 2.0;
        assert!(late < early, "loss did not improve: {early} -> {late}");
    }

    #[test]
    fn seeded_runs_are_bitwise_repeatable() {
        let data = toy_dataset(4, 16, 9);
        let cfg = TrainConfig {
            epochs_total: 2,
            epochs_decay: 0,
            lr: 5e-4,
            lr_milestones: alloc::vec![1],
            lr_factor: 0.5,
            batch_size: 2,
            crop: 8,
            seed: 21,
            iters_per_epoch: Some(4),
        };
        let run = || {
            let model = toy_model();
            let out = train(
                TrainSubject::Plain(model),
                &cfg,
                &data,
                None,
                Trainable::All,
            )
            .unwrap();
            (metrics_csv(&out.metrics), out.subject.model().flatten_params())
        };
        let (csv_a, params_a) = run();
        let (csv_b, params_b) = run();
        assert_eq!(csv_a, csv_b);
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn masked_training_freezes_before_finetune() {
        use crate::mask::SparsityKind;
        let model = toy_model();
        let data = toy_dataset(4, 16, 13);
        let mm = insert_masks(
            model,
            PruneTarget::Encoder,
            ChannelScheme::new(3, 3, 3, 3),
            ChannelScheme::new(6, 6, 6, 6),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs_total: 3,
            epochs_decay: 2,
            lr: 5e-4,
            lr_milestones: alloc::vec![],
            lr_factor: 0.5,
            batch_size: 2,
            crop: 8,
            seed: 31,
            iters_per_epoch: Some(3),
        };
        let decay = DecayConfig::new(0.05, SparsityKind::Ours);
        let out = train(
            TrainSubject::Masked(mm),
            &cfg,
            &data,
            Some(&decay),
            Trainable::All,
        )
        .unwrap();
        let TrainSubject::Masked(mm) = out.subject else {
            panic!("expected a masked subject");
        };
        assert!(mm.all_frozen());
        // no decay ran after the phase boundary
        assert!(out.events.last_decay_iteration.unwrap() < out.events.decay_boundary_iteration);
        // frozen masks keep exactly the target live channels
        for m in &mm.masks {
            assert_eq!(m.survivors.len(), m.target);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(Dataset::new(alloc::vec![]).is_err());
    }

    #[test]
    fn encoder_only_training_leaves_shared_modules_untouched() {
        let model = toy_model();
        let data = toy_dataset(3, 16, 15);
        let before_dec: Vec<f64> = model
            .dec
            .conv_layers()
            .iter()
            .flat_map(|l| l.weight.data().iter().map(|v| v.to_f64()))
            .collect();
        let cfg = TrainConfig {
            epochs_total: 1,
            epochs_decay: 0,
            lr: 1e-3,
            lr_milestones: alloc::vec![],
            lr_factor: 0.5,
            batch_size: 2,
            crop: 8,
            seed: 41,
            iters_per_epoch: Some(3),
        };
        let out = train(
            TrainSubject::Plain(model),
            &cfg,
            &data,
            None,
            Trainable::EncoderOnly,
        )
        .unwrap();
        let model = out.subject.into_plain().unwrap();
        let after_dec: Vec<f64> = model
            .dec
            .conv_layers()
            .iter()
            .flat_map(|l| l.weight.data().iter().map(|v| v.to_f64()))
            .collect();
        assert_eq!(before_dec, after_dec);
    }
}

#[cfg(test)]
mod abort_tests {
    use super::*;
    use crate::model::{default_rate_points, ChannelScheme, ModelConfig};

    #[test]
    fn runaway_learning_rate_aborts_training() {
        let cfg_model = ModelConfig::new(
            ChannelScheme::new(4, 4, 4, 4),
            ChannelScheme::new(4, 4, 4, 4),
            4,
            3,
        )
        .with_stages(1);
        let model: Model<f32> =
            Model::build(cfg_model, &default_rate_points(), 5).unwrap();
        let data = Dataset::new(crate::image::synthetic_corpus(3, 16, 2)).unwrap();
        let cfg = TrainConfig {
            epochs_total: 30,
            epochs_decay: 0,
            lr: 0.9,
            lr_milestones: alloc::vec![],
            lr_factor: 0.5,
            batch_size: 2,
            crop: 16,
            seed: 3,
            iters_per_epoch: Some(4),
        };
        let err = train(
            TrainSubject::Plain(model),
            &cfg,
            &data,
            None,
            Trainable::All,
        )
        .err()
        .expect("a runaway learning rate must abort");
        assert!(matches!(err, Error::Train(_) | Error::NonFinite(_)), "{err}");
    }
}
