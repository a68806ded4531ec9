//! One decoder, many encoders: the bank of progressively trained small
//! encoders, the training regimes that fill it, and the encode-time ensemble
//! selector.
//!
//! The one-by-one regimes sample training crops in proportion to how badly
//! the frozen predecessors handle each corpus image, so every new encoder
//! concentrates on the representation residue its predecessors missed. The
//! masked-teacher variant additionally initializes each new encoder by
//! running the full mask-decay pipeline on a fresh copy of the large teacher
//! encoder.

use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::codec::{compress_with_recon, Bitstream};
use crate::error::Error;
use crate::image::ImageU8;
use crate::mask::{DecayConfig, PruneTarget};
use crate::metrics::{bpp, pad_to_multiple, psnr};
use crate::model::{ChannelScheme, Encoder, Model};
use crate::rng::Rng;
use crate::tensor::Scalar;
use crate::train::{train, Dataset, TrainConfig, TrainSubject, Trainable};

/// Default number of small encoders in a bank.
pub const DEFAULT_BANK_SIZE: usize = 4;

/// How an encoder joined the bank.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Regime {
    Separate = 0,
    EndToEnd = 1,
    OneByOne = 2,
    MaskedTeacher = 3,
}

impl Regime {
    pub fn from_u8(v: u8) -> Option<Regime> {
        match v {
            0 => Some(Regime::Separate),
            1 => Some(Regime::EndToEnd),
            2 => Some(Regime::OneByOne),
            3 => Some(Regime::MaskedTeacher),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct EncoderProvenance {
    pub regime: Regime,
    /// Index of the teacher encoder a masked-teacher run decayed, if any.
    pub teacher_id: Option<u8>,
}

/// Shared decoder/entropy stack plus an ordered list of small encoders.
#[derive(Clone, Debug)]
pub struct EncoderBank<T> {
    /// Carries the shared decoder, hyper nets, prior, and quantization steps.
    /// Its own encoder is the teacher used by masked-teacher steps.
    pub shared: Model<T>,
    pub encoders: Vec<(Encoder<T>, EncoderProvenance)>,
}

impl<T: Scalar> EncoderBank<T> {
    pub fn new(shared: Model<T>) -> Self {
        EncoderBank {
            shared,
            encoders: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.encoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoders.is_empty()
    }

    /// Working model with encoder `i` swapped in.
    pub fn model_with(&self, i: usize) -> Result<Model<T>, Error> {
        let (enc, _) = self
            .encoders
            .get(i)
            .ok_or_else(|| Error::Invalid(alloc::format!("no encoder {i} in the bank")))?;
        self.shared.with_encoder(enc.clone())
    }

    /// SHA-256 over every shared (non-encoder) parameter blob, in canonical
    /// order. Training a bank encoder must leave this untouched.
    pub fn shared_param_hash(&self) -> [u8; 32] {
        let enc_tensors = self.shared.enc.conv_layers().len() * 2;
        let mut hasher = Sha256::new();
        let mut pid = 0usize;
        self.shared.for_each_param(&mut |t| {
            if pid >= enc_tensors {
                for v in t.data() {
                    hasher.update(v.to_f64().to_le_bytes());
                }
            }
            pid += 1;
        });
        hasher.finalize().into()
    }
}

/// Per-encoder measurement for one image.
#[derive(Clone, Copy, Debug)]
pub struct EnsembleRow {
    pub encoder: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub score: f64,
}

/// Outcome of the encode-time selection.
#[derive(Clone, Debug)]
pub struct EnsembleChoice {
    pub winner: usize,
    pub rows: Vec<EnsembleRow>,
}

/// RD score of one coded image: `bpp + lambda * mse` with the same lambda the
/// rate point trained with.
fn rd_score<T: Scalar>(
    model: &Model<T>,
    bs: &Bitstream,
    recon: &crate::tensor::Tensor<T>,
    original: &ImageU8,
) -> Result<(f64, f64, f64), Error> {
    let recon_img = ImageU8::from_tensor(recon)?;
    let rate = bpp(bs.total_bytes(), original.width, original.height);
    let quality = psnr(original, &recon_img)?;
    let orig_t: crate::tensor::Tensor<T> = original.to_tensor();
    let mut mse = 0.0f64;
    for (&a, &b) in orig_t.data().iter().zip(recon.data()) {
        let d = a.to_f64() - b.to_f64();
        mse += d * d;
    }
    mse /= orig_t.len() as f64;
    let lambda = model.lambdas[bs.rate_index as usize];
    Ok((rate, quality, rate + lambda * mse))
}

/// Run the first `k` encoders, score each actual bitstream `R + lambda D`,
/// and emit the winner's stream with its encoder id in the header. Ties go to
/// the lowest index; the decoder never needs the bank.
pub fn ensemble_encode<T: Scalar>(
    image: &ImageU8,
    bank: &EncoderBank<T>,
    k: usize,
    rate_index: usize,
) -> Result<(Bitstream, EnsembleChoice), Error> {
    if k == 0 || k > bank.len() {
        return Err(Error::Invalid(alloc::format!(
            "ensemble size {k} out of range (bank holds {})",
            bank.len()
        )));
    }
    let factor = bank.shared.cfg.z_factor();
    let (padded, orig) = pad_to_multiple(image, factor);
    let x: crate::tensor::Tensor<T> = padded.to_tensor();

    let mut rows = Vec::with_capacity(k);
    let mut best: Option<(usize, Bitstream, f64)> = None;
    for i in 0..k {
        let model = bank.model_with(i)?;
        let (bs, recon) = compress_with_recon(&model, &x, rate_index, orig)?;
        let (rate, quality, score) = rd_score(&model, &bs, &recon, image)?;
        rows.push(EnsembleRow {
            encoder: i,
            bpp: rate,
            psnr: quality,
            score,
        });
        let better = match &best {
            None => true,
            Some((_, _, s)) => score < *s,
        };
        if better {
            best = Some((i, bs, score));
        }
    }
    let (winner, mut bs, _) = best.expect("k >= 1");
    bs.encoder_id = Some(winner as u8);
    Ok((bs, EnsembleChoice { winner, rows }))
}

/// Mean ensemble RD score over a corpus: per image, the minimum score over
/// the first `k` encoders, averaged over all rate points.
pub fn ensemble_rd_score<T: Scalar>(
    bank: &EncoderBank<T>,
    images: &[ImageU8],
    k: usize,
) -> Result<f64, Error> {
    if images.is_empty() {
        return Err(Error::Invalid("empty evaluation corpus".into()));
    }
    let rates = bank.shared.quant.rate_points();
    let mut total = 0.0;
    for img in images {
        for rate_index in 0..rates {
            let (_, choice) = ensemble_encode(img, bank, k, rate_index)?;
            let best = choice
                .rows
                .iter()
                .map(|r| r.score)
                .fold(f64::INFINITY, f64::min);
            total += best;
        }
    }
    Ok(total / (images.len() * rates) as f64)
}

/// Mean single-model RD score over a corpus and all rate points.
pub fn corpus_rd_score<T: Scalar>(model: &Model<T>, images: &[ImageU8]) -> Result<f64, Error> {
    if images.is_empty() {
        return Err(Error::Invalid("empty evaluation corpus".into()));
    }
    let factor = model.cfg.z_factor();
    let mut total = 0.0;
    for img in images {
        let (padded, orig) = pad_to_multiple(img, factor);
        let x: crate::tensor::Tensor<T> = padded.to_tensor();
        for rate_index in 0..model.quant.rate_points() {
            let (bs, recon) = compress_with_recon(model, &x, rate_index, orig)?;
            let (_, _, score) = rd_score(model, &bs, &recon, img)?;
            total += score;
        }
    }
    Ok(total / (images.len() * model.quant.rate_points()) as f64)
}

/// Per-image sampling weights proportional to how poorly the existing
/// encoders serve each image (uniform for an empty bank).
fn residual_weights<T: Scalar>(
    bank: &EncoderBank<T>,
    images: &[ImageU8],
) -> Result<Vec<f64>, Error> {
    if bank.is_empty() {
        return Ok(alloc::vec![1.0; images.len()]);
    }
    let rates = bank.shared.quant.rate_points();
    let mut weights = Vec::with_capacity(images.len());
    for img in images {
        let mut acc = 0.0;
        for rate_index in 0..rates {
            let (_, choice) = ensemble_encode(img, bank, bank.len(), rate_index)?;
            acc += choice
                .rows
                .iter()
                .map(|r| r.score)
                .fold(f64::INFINITY, f64::min);
        }
        weights.push(acc / rates as f64);
    }
    let mean: f64 = weights.iter().sum::<f64>() / weights.len() as f64;
    if mean > 0.0 {
        for w in weights.iter_mut() {
            *w /= mean;
        }
    }
    Ok(weights)
}

/// Initialization of a new bank encoder.
#[derive(Clone, Debug)]
pub enum NewEncoderInit {
    /// Fresh random weights (the one-by-one baseline).
    Scratch { scheme: ChannelScheme, seed: u64 },
    /// Run mask decay on a fresh copy of the shared teacher encoder.
    MaskedTeacher {
        scheme: ChannelScheme,
        decay: DecayConfig,
        epochs_decay: usize,
    },
}

/// Train one more encoder against the frozen shared stack and append it.
/// Crops are sampled in proportion to the predecessors' per-image RD score,
/// and the frozen-module hash is checked before and after.
pub fn train_rrl_step<T: Scalar>(
    bank: &mut EncoderBank<T>,
    init: NewEncoderInit,
    cfg: &TrainConfig,
    images: &[ImageU8],
) -> Result<(), Error> {
    if bank.len() >= 255 {
        return Err(Error::Invalid("bank is full".into()));
    }
    let hash_before = bank.shared_param_hash();
    let weights = residual_weights(bank, images)?;
    let data = Dataset::new(images.to_vec())?.with_weights(weights)?;

    let (encoder, provenance) = match init {
        NewEncoderInit::Scratch { scheme, seed } => {
            let mut rng = Rng::new(seed);
            let enc = Encoder::init(
                scheme,
                bank.shared.cfg.stages,
                bank.shared.cfg.latent_channels,
                &mut rng,
            );
            let working = bank.shared.with_encoder(enc)?;
            let out = train(
                TrainSubject::Plain(working),
                cfg,
                &data,
                None,
                Trainable::EncoderOnly,
            )?;
            (
                out.subject.into_plain()?.enc,
                EncoderProvenance {
                    regime: Regime::OneByOne,
                    teacher_id: None,
                },
            )
        }
        NewEncoderInit::MaskedTeacher {
            scheme,
            decay,
            epochs_decay,
        } => {
            // decay a fresh copy of the large teacher encoder each step
            let distill_cfg = TrainConfig {
                epochs_decay,
                ..cfg.clone()
            };
            let result = distill_encoder_only(bank, scheme, &distill_cfg, &decay, &data)?;
            (
                result,
                EncoderProvenance {
                    regime: Regime::MaskedTeacher,
                    teacher_id: Some(255),
                },
            )
        }
    };

    if bank.shared_param_hash() != hash_before {
        return Err(Error::Sequencing(
            "shared modules changed during an encoder-only regime".into(),
        ));
    }
    bank.encoders.push((encoder, provenance));
    Ok(())
}

/// Mask-decay the shared teacher encoder down to `scheme` (encoder-only
/// training throughout) and return the merged, finetuned encoder.
fn distill_encoder_only<T: Scalar>(
    bank: &EncoderBank<T>,
    scheme: ChannelScheme,
    cfg: &TrainConfig,
    decay: &DecayConfig,
    data: &Dataset,
) -> Result<Encoder<T>, Error> {
    use crate::mask::insert_masks;
    let mm = insert_masks(
        bank.shared.clone(),
        PruneTarget::Encoder,
        scheme,
        bank.shared.cfg.dec_scheme,
    )?;
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
        Trainable::EncoderOnly,
    )?;
    let TrainSubject::Masked(mm) = decayed.subject else {
        unreachable!();
    };
    let merged = crate::mask::merge_masks(&mm)?;
    let ft_cfg = TrainConfig {
        epochs_total: cfg.epochs_finetune().max(1),
        epochs_decay: 0,
        seed: cfg.seed ^ 0xF17E_7EA6,
        ..cfg.clone()
    };
    let finetuned = train(
        TrainSubject::Plain(merged),
        &ft_cfg,
        data,
        None,
        Trainable::EncoderOnly,
    )?;
    Ok(finetuned.subject.into_plain()?.enc)
}

/// Fill a bank with independently trained encoders (distinct seeds, uniform
/// sampling, frozen shared stack).
pub fn train_separate<T: Scalar>(
    shared: &Model<T>,
    bank_size: usize,
    scheme: ChannelScheme,
    cfg: &TrainConfig,
    images: &[ImageU8],
) -> Result<EncoderBank<T>, Error> {
    let mut bank = EncoderBank::new(shared.clone());
    let hash = bank.shared_param_hash();
    let data = Dataset::new(images.to_vec())?;
    for i in 0..bank_size {
        let mut rng = Rng::new(cfg.seed ^ 0x5E9A_7A7E ^ ((i as u64 + 1) * 0x9E37_79B9));
        let enc = Encoder::init(
            scheme,
            shared.cfg.stages,
            shared.cfg.latent_channels,
            &mut rng,
        );
        let working = shared.with_encoder(enc)?;
        let run_cfg = TrainConfig {
            seed: cfg.seed ^ ((i as u64 + 1) << 16),
            ..cfg.clone()
        };
        let out = train(
            TrainSubject::Plain(working),
            &run_cfg,
            &data,
            None,
            Trainable::EncoderOnly,
        )?;
        bank.encoders.push((
            out.subject.into_plain()?.enc,
            EncoderProvenance {
                regime: Regime::Separate,
                teacher_id: None,
            },
        ));
    }
    if bank.shared_param_hash() != hash {
        return Err(Error::Sequencing(
            "shared modules changed during separate training".into(),
        ));
    }
    Ok(bank)
}

/// Train all encoders and the shared modules jointly; each encoder's loss
/// flows through its own path only.
pub fn train_end_to_end<T: Scalar>(
    shared: &Model<T>,
    bank_size: usize,
    scheme: ChannelScheme,
    cfg: &TrainConfig,
    images: &[ImageU8],
) -> Result<EncoderBank<T>, Error> {
    use crate::optim::AdamW;
    use crate::train::{build_rd_graph, Conditioning};

    cfg.validate()?;
    let data = Dataset::new(images.to_vec())?;
    let mut rng = Rng::new(cfg.seed);
    let mut shared_model = shared.clone();
    let mut encoders: Vec<Encoder<T>> = (0..bank_size)
        .map(|i| {
            let mut erng = Rng::new(cfg.seed ^ ((i as u64 + 7) * 0xA5A5_5A5A));
            Encoder::init(
                scheme,
                shared.cfg.stages,
                shared.cfg.latent_channels,
                &mut erng,
            )
        })
        .collect();

    let iters = cfg
        .iters_per_epoch
        .unwrap_or_else(|| data.images.len().div_ceil(cfg.batch_size).max(1));
    // slot layout: shared tensors first, then each encoder's tensors
    let working0 = shared_model.with_encoder(encoders[0].clone())?;
    let enc_tensors = working0.enc.conv_layers().len() * 2;
    let total_tensors = working0.param_tensor_count();
    let shared_tensors = total_tensors - enc_tensors;
    let mut opt = AdamW::new(cfg.lr, shared_tensors + bank_size * enc_tensors);

    for epoch in 0..cfg.epochs_total {
        for _ in 0..iters {
            let batch: crate::tensor::Tensor<T> =
                data.sample_batch(cfg.batch_size, cfg.crop, &mut rng)?;
            let rate_index = rng.below(shared_model.quant.rate_points());
            let lambda = shared_model.lambdas[rate_index];

            // accumulate shared gradients over the independent encoder paths
            let mut shared_grads: Vec<Option<crate::tensor::Tensor<T>>> =
                alloc::vec![None; total_tensors];
            let mut enc_grads: Vec<Vec<Option<crate::tensor::Tensor<T>>>> = Vec::new();
            for enc in &encoders {
                let working = shared_model.with_encoder(enc.clone())?;
                let mut graph = build_rd_graph(
                    &working,
                    &[],
                    &batch,
                    rate_index,
                    lambda,
                    &mut rng,
                    Conditioning::SteRound,
                )?;
                if !graph.loss_value().is_finite() {
                    return Err(Error::NonFinite(alloc::format!(
                        "end-to-end loss diverged at epoch {epoch}"
                    )));
                }
                graph.fw.tape.backward(graph.loss)?;
                let mut this_enc = Vec::with_capacity(enc_tensors);
                for pid in 0..enc_tensors {
                    this_enc.push(graph.fw.tape.grad(graph.fw.param_var(pid)).cloned());
                }
                enc_grads.push(this_enc);
                for pid in enc_tensors..total_tensors {
                    if let Some(g) = graph.fw.tape.grad(graph.fw.param_var(pid)) {
                        match &mut shared_grads[pid] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                    *a += *b;
                                }
                            }
                            slot @ None => *slot = Some(g.clone()),
                        }
                    }
                }
            }

            opt.begin_step();
            // shared modules (skip the dormant teacher encoder tensors)
            {
                let mut pid = 0usize;
                shared_model.for_each_param_mut(&mut |t| {
                    if pid >= enc_tensors {
                        if let Some(g) = &shared_grads[pid] {
                            opt.update(pid - enc_tensors, t, g);
                        }
                    }
                    pid += 1;
                });
            }
            for (i, enc) in encoders.iter_mut().enumerate() {
                let mut pid = 0usize;
                for layer in enc.conv_layers_mut() {
                    let base = shared_tensors + i * enc_tensors;
                    if let Some(g) = &enc_grads[i][pid] {
                        opt.update(base + pid, &mut layer.weight, g);
                    }
                    if let Some(g) = &enc_grads[i][pid + 1] {
                        opt.update(base + pid + 1, &mut layer.bias, g);
                    }
                    pid += 2;
                }
            }
        }
    }

    let mut bank = EncoderBank::new(shared_model);
    for enc in encoders {
        bank.encoders.push((
            enc,
            EncoderProvenance {
                regime: Regime::EndToEnd,
                teacher_id: None,
            },
        ));
    }
    Ok(bank)
}

/// CSV rows for the ensemble report: `image,encoder,bpp,psnr,score,winner`.
pub fn ensemble_report_csv(rows: &[(usize, EnsembleChoice)]) -> alloc::string::String {
    let mut out = alloc::string::String::from("image,encoder,bpp,psnr,score,winner\n");
    for (image, choice) in rows {
        for r in &choice.rows {
            out += &alloc::format!(
                "{},{},{:.6},{:.4},{:.6},{}\n",
                image,
                r.encoder,
                r.bpp,
                r.psnr,
                r.score,
                (r.encoder == choice.winner) as u8
            );
        }
    }
    out
}
