//! Eval-side compression pipeline and the bitstream container.
//!
//! A compressed image carries three independent range-coded streams: the
//! hyper-latent `z` under the factorized prior, the anchor half `y1` under
//! pass-1 Gaussians, and the non-anchor half `y2` under pass-2 Gaussians
//! conditioned on the decoded anchors. The decoder reproduces every entropy
//! table from decoded data only, so encoded and decoded symbols match
//! bit-exactly on any host.

use alloc::format;
use alloc::vec::Vec;

use crate::coder::{gaussian_cdf_table, DiscreteCDF, RangeDecoder, RangeEncoder};
use crate::error::{CodecError, Error};
use crate::model::{quantize_eval, Model, NoMasks, PriorPass, PureFwd};
use crate::nn::{self, Parity};
use crate::prior::FactorizedPrior;
use crate::tensor::{Scalar, Shape, Tensor};

/// Container magic.
pub const MAGIC: &[u8; 4] = b"EVC1";
/// Low 7 bits of the version byte.
pub const FORMAT_VERSION: u8 = 1;
/// Version-byte flag: a one-byte encoder id follows the header.
const ENCODER_ID_FLAG: u8 = 0x80;

/// Parsed bitstream: header fields plus the three coded streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub rate_index: u8,
    /// Pre-padding image width.
    pub width: u16,
    /// Pre-padding image height.
    pub height: u16,
    /// Ensemble provenance; not needed for decoding.
    pub encoder_id: Option<u8>,
    pub z_stream: Vec<u8>,
    pub y1_stream: Vec<u8>,
    pub y2_stream: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            15 + self.z_stream.len() + self.y1_stream.len() + self.y2_stream.len(),
        );
        out.extend_from_slice(MAGIC);
        let version = FORMAT_VERSION
            | if self.encoder_id.is_some() {
                ENCODER_ID_FLAG
            } else {
                0
            };
        out.push(version);
        out.push(self.rate_index);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        if let Some(id) = self.encoder_id {
            out.push(id);
        }
        for stream in [&self.z_stream, &self.y1_stream, &self.y2_stream] {
            out.extend_from_slice(&(stream.len() as u32).to_le_bytes());
            out.extend_from_slice(stream);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CodecError> {
            if *pos + n > bytes.len() {
                return Err(CodecError::Truncated { offset: *pos });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4)?;
        if magic != MAGIC {
            return Err(CodecError::BadHeader {
                offset: 0,
                detail: format!("magic {magic:02x?}"),
            });
        }
        let version = take(&mut pos, 1)?[0];
        if version & !ENCODER_ID_FLAG != FORMAT_VERSION {
            return Err(CodecError::BadHeader {
                offset: 4,
                detail: format!("unsupported version {version:#04x}"),
            });
        }
        let rate_index = take(&mut pos, 1)?[0];
        let width = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        let height = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        let encoder_id = if version & ENCODER_ID_FLAG != 0 {
            Some(take(&mut pos, 1)?[0])
        } else {
            None
        };
        let mut streams = [Vec::new(), Vec::new(), Vec::new()];
        for slot in &mut streams {
            let len_at = pos;
            let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let data = take(&mut pos, len).map_err(|_| CodecError::Truncated { offset: len_at })?;
            *slot = data.to_vec();
        }
        let [z_stream, y1_stream, y2_stream] = streams;
        Ok(Bitstream {
            rate_index,
            width,
            height,
            encoder_id,
            z_stream,
            y1_stream,
            y2_stream,
        })
    }

    pub fn total_bytes(&self) -> usize {
        self.to_bytes().len()
    }
}

fn dequantize<T: Scalar>(symbols: &[i32], shape: Shape, steps: &[T]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let plane = shape.h * shape.w;
    for n in 0..shape.n {
        for c in 0..shape.c {
            let s = steps[c];
            let base = (n * shape.c + c) * plane;
            for i in base..base + plane {
                out.data_mut()[i] = T::from_f64(symbols[i] as f64) * s;
            }
        }
    }
    out
}

/// Per-channel integer tables for the factorized prior; built identically by
/// encoder and decoder from the trained parameters alone.
pub fn prior_tables<T: Scalar>(prior: &FactorizedPrior<T>) -> Vec<DiscreteCDF> {
    (0..prior.channels())
        .map(|c| {
            let (lo, hi) = prior.symbol_window(c);
            let mut masses: Vec<f64> = (lo..=hi).map(|k| prior.symbol_prob(c, k)).collect();
            let in_window: f64 = masses.iter().sum();
            masses.push((1.0 - in_window).max(1e-9));
            DiscreteCDF::from_masses(lo, &masses).expect("window is non-empty")
        })
        .collect()
}

fn encode_z(symbols: &[i32], shape: Shape, tables: &[DiscreteCDF]) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    let plane = shape.h * shape.w;
    for n in 0..shape.n {
        for c in 0..shape.c {
            let base = (n * shape.c + c) * plane;
            for i in base..base + plane {
                enc.encode_symbol(&tables[c], symbols[i])
                    .expect("prior tables always carry an escape slot");
            }
        }
    }
    enc.finish()
}

fn decode_z(bytes: &[u8], shape: Shape, tables: &[DiscreteCDF]) -> Result<Vec<i32>, CodecError> {
    let mut dec = RangeDecoder::new(bytes);
    let mut out = alloc::vec![0i32; shape.len()];
    let plane = shape.h * shape.w;
    for n in 0..shape.n {
        for c in 0..shape.c {
            let base = (n * shape.c + c) * plane;
            for slot in out.iter_mut().skip(base).take(plane) {
                *slot = dec.decode_symbol(&tables[c])?;
            }
        }
    }
    Ok(out)
}

/// Per-position Gaussian table in the symbol domain. The window tracks the
/// predicted mean and widens with the predicted scale; the generous minimum
/// keeps moderate prediction misses on the cheap one-count floor instead of
/// the 32-bit escape path, which only catches true outliers.
fn position_table(mean: f64, scale: f64, step: f64) -> DiscreteCDF {
    let mean_s = mean / step;
    let scale_s = (scale / step).clamp(1e-4, 4096.0);
    let center = libm::round(mean_s) as i64;
    let half = (libm::ceil(4.0 * scale_s) as i64).clamp(12, 96);
    let lo = (center - half).clamp(i32::MIN as i64 + 1, i32::MAX as i64 - 1) as i32;
    let hi = (center + half).clamp(lo as i64, i32::MAX as i64 - 1) as i32;
    gaussian_cdf_table(mean_s, scale_s, lo, hi).expect("window is well formed")
}

/// Encode one checkerboard half of the latent symbols in scan order.
pub(crate) fn encode_half<T: Scalar>(
    symbols: &[i32],
    shape: Shape,
    mean: &Tensor<T>,
    scale: &Tensor<T>,
    steps: &[T],
    parity: Parity,
) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    for n in 0..shape.n {
        for c in 0..shape.c {
            let s = steps[c].to_f64();
            for h in 0..shape.h {
                for w in 0..shape.w {
                    if !parity.matches(h, w) {
                        continue;
                    }
                    let i = shape.index(n, c, h, w);
                    let table =
                        position_table(mean.data()[i].to_f64(), scale.data()[i].to_f64(), s);
                    enc.encode_symbol(&table, symbols[i])
                        .expect("gaussian tables always carry an escape slot");
                }
            }
        }
    }
    enc.finish()
}

fn decode_half<T: Scalar>(
    bytes: &[u8],
    shape: Shape,
    mean: &Tensor<T>,
    scale: &Tensor<T>,
    steps: &[T],
    parity: Parity,
    into: &mut [i32],
) -> Result<(), CodecError> {
    let mut dec = RangeDecoder::new(bytes);
    for n in 0..shape.n {
        for c in 0..shape.c {
            let s = steps[c].to_f64();
            for h in 0..shape.h {
                for w in 0..shape.w {
                    if !parity.matches(h, w) {
                        continue;
                    }
                    let i = shape.index(n, c, h, w);
                    let table =
                        position_table(mean.data()[i].to_f64(), scale.data()[i].to_f64(), s);
                    into[i] = dec.decode_symbol(&table)?;
                }
            }
        }
    }
    Ok(())
}

fn ceil_to(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Run the analysis transform.
pub fn encode_latent<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<Tensor<T>, Error> {
    let mut ctx = PureFwd::new(model.cfg.leaky_slope, &NoMasks);
    model.enc.forward(&mut ctx, x)
}

/// Run the synthesis transform.
pub fn synthesize<T: Scalar>(model: &Model<T>, y_hat: &Tensor<T>) -> Result<Tensor<T>, Error> {
    let mut ctx = PureFwd::new(model.cfg.leaky_slope, &NoMasks);
    model.dec.forward(&mut ctx, y_hat)
}

/// Quantized hyper path from the latent. The latent is zero-padded to a
/// multiple of four before the hyper encoder so crops smaller than the full
/// downsampling factor still run; the decoder crops back.
fn hyper_analyze<T: Scalar>(model: &Model<T>, y: &Tensor<T>) -> Result<(Vec<i32>, Shape), Error> {
    let ys = y.shape();
    let mut ctx = PureFwd::new(model.cfg.leaky_slope, &NoMasks);
    let ypad = nn::pad_hw(y, ceil_to(ys.h, 4), ceil_to(ys.w, 4))?;
    let z = model.hyper_enc.forward(&mut ctx, &ypad)?;
    let unit = alloc::vec![T::ONE; z.shape().c];
    let z_sym = nn::quantize_symbols(&z, &unit)?;
    Ok((z_sym, z.shape()))
}

/// Hyper synthesis from decoded `z` symbols, cropped to the latent extents.
fn hyper_synthesize<T: Scalar>(
    model: &Model<T>,
    z_sym: &[i32],
    z_shape: Shape,
    latent_hw: (usize, usize),
) -> Result<Tensor<T>, Error> {
    let unit = alloc::vec![T::ONE; z_shape.c];
    let z_hat = dequantize(z_sym, z_shape, &unit);
    let mut ctx = PureFwd::new(model.cfg.leaky_slope, &NoMasks);
    let hyper_out = model.hyper_dec.forward(&mut ctx, &z_hat)?;
    nn::crop_hw(&hyper_out, latent_hw.0, latent_hw.1)
}

/// Compress a padded `[1, 3, H, W]` tensor. `orig` records the pre-padding
/// `(width, height)` in the header; `rate_index` picks a trained global
/// quantization step.
pub fn compress<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    rate_index: usize,
    orig: (usize, usize),
) -> Result<Bitstream, Error> {
    let xs = x.shape();
    let f = model.cfg.y_factor();
    if xs.n != 1 || xs.c != 3 {
        return Err(Error::Dimension(
            "compress expects a [1, 3, H, W] tensor".into(),
        ));
    }
    if xs.h % f != 0 || xs.w % f != 0 {
        return Err(Error::Dimension(format!(
            "input extents {}x{} are not multiples of {f}; pad first",
            xs.h, xs.w
        )));
    }
    if orig.0 > u16::MAX as usize || orig.1 > u16::MAX as usize {
        return Err(Error::Invalid(
            "image dimensions exceed the header range".into(),
        ));
    }
    let y = encode_latent(model, x)?;
    compress_from_latent(model, &y, rate_index, orig)
}

/// Compress and also return the decoder-side reconstruction. The symbols the
/// decoder recovers equal the encoder's exactly, so synthesizing from the
/// encoder's own dequantized latent gives the identical image without a
/// second entropy pass.
pub fn compress_with_recon<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    rate_index: usize,
    orig: (usize, usize),
) -> Result<(Bitstream, Tensor<T>), Error> {
    let xs = x.shape();
    let f = model.cfg.y_factor();
    if xs.n != 1 || xs.c != 3 || xs.h % f != 0 || xs.w % f != 0 {
        return Err(Error::Dimension(
            "compress expects a padded [1, 3, H, W] tensor".into(),
        ));
    }
    let y = encode_latent(model, x)?;
    let bs = compress_from_latent(model, &y, rate_index, orig)?;
    let steps = model.quant.steps(rate_index)?;
    let (symbols, _) = quantize_eval(&y, &steps)?;
    let y_hat = dequantize(&symbols, y.shape(), &steps);
    let x_hat = synthesize(model, &y_hat)?;
    let cropped = nn::crop_hw(&x_hat, bs.height as usize, bs.width as usize)?;
    Ok((bs, cropped.map(|v| v.clamp(T::ZERO, T::ONE))))
}

/// Entropy-code an already computed latent (callers time the analysis half
/// separately).
pub fn compress_from_latent<T: Scalar>(
    model: &Model<T>,
    y: &Tensor<T>,
    rate_index: usize,
    orig: (usize, usize),
) -> Result<Bitstream, Error> {
    let steps = model.quant.steps(rate_index)?;
    let (symbols, _) = quantize_eval(y, &steps)?;
    let ys = y.shape();

    let (z_sym, z_shape) = hyper_analyze(model, y)?;
    let tables = prior_tables(&model.prior);
    let z_stream = encode_z(&z_sym, z_shape, &tables);
    let hyper_out = hyper_synthesize(model, &z_sym, z_shape, (ys.h, ys.w))?;

    let (mean1, scale1) = model.entropy_params(&hyper_out, PriorPass::Anchor, None)?;
    let y1_stream = encode_half(&symbols, ys, &mean1, &scale1, &steps, Parity::Anchor);

    let y_hat = dequantize(&symbols, ys, &steps);
    let y1_anchored = nn::checker_mask(&y_hat, Parity::Anchor);
    let (mean2, scale2) =
        model.entropy_params(&hyper_out, PriorPass::NonAnchor, Some(&y1_anchored))?;
    let y2_stream = encode_half(&symbols, ys, &mean2, &scale2, &steps, Parity::NonAnchor);

    Ok(Bitstream {
        rate_index: rate_index as u8,
        width: orig.0 as u16,
        height: orig.1 as u16,
        encoder_id: None,
        z_stream,
        y1_stream,
        y2_stream,
    })
}

/// Latent symbols recovered from a bitstream, before synthesis.
pub struct DecodedLatent<T> {
    pub y_hat: Tensor<T>,
    pub symbols: Vec<i32>,
}

/// Entropy-decode the three streams back to the dequantized latent.
pub fn decode_latent<T: Scalar>(
    model: &Model<T>,
    bs: &Bitstream,
) -> Result<DecodedLatent<T>, Error> {
    let f = model.cfg.y_factor();
    let zf = model.cfg.z_factor();
    let wp = ceil_to((bs.width as usize).max(1), zf);
    let hp = ceil_to((bs.height as usize).max(1), zf);
    let ys = Shape::new(1, model.cfg.latent_channels, hp / f, wp / f);
    let z_shape = Shape::new(
        1,
        model.cfg.hyper_channels,
        ceil_to(ys.h, 4) / 4,
        ceil_to(ys.w, 4) / 4,
    );
    let steps = model.quant.steps(bs.rate_index as usize)?;

    let tables = prior_tables(&model.prior);
    let z_sym = decode_z(&bs.z_stream, z_shape, &tables).map_err(codec_to_error)?;
    let hyper_out = hyper_synthesize(model, &z_sym, z_shape, (ys.h, ys.w))?;

    let (mean1, scale1) = model.entropy_params(&hyper_out, PriorPass::Anchor, None)?;
    let mut symbols = alloc::vec![0i32; ys.len()];
    decode_half(
        &bs.y1_stream,
        ys,
        &mean1,
        &scale1,
        &steps,
        Parity::Anchor,
        &mut symbols,
    )
    .map_err(codec_to_error)?;

    let y1_hat = dequantize(&symbols, ys, &steps);
    let y1_anchored = nn::checker_mask(&y1_hat, Parity::Anchor);
    let (mean2, scale2) =
        model.entropy_params(&hyper_out, PriorPass::NonAnchor, Some(&y1_anchored))?;
    decode_half(
        &bs.y2_stream,
        ys,
        &mean2,
        &scale2,
        &steps,
        Parity::NonAnchor,
        &mut symbols,
    )
    .map_err(codec_to_error)?;

    let y_hat = dequantize(&symbols, ys, &steps);
    Ok(DecodedLatent { y_hat, symbols })
}

fn codec_to_error(e: CodecError) -> Error {
    Error::Invalid(format!("stream decode failed: {e}"))
}

/// Full decompression: entropy decode, synthesis, crop to the pre-padding
/// extents, clamp to `[0, 1]`.
pub fn decompress<T: Scalar>(model: &Model<T>, bs: &Bitstream) -> Result<Tensor<T>, Error> {
    let latent = decode_latent(model, bs)?;
    let x_hat = synthesize(model, &latent.y_hat)?;
    let cropped = nn::crop_hw(&x_hat, bs.height as usize, bs.width as usize)?;
    Ok(cropped.map(|v| v.clamp(T::ZERO, T::ONE)))
}
