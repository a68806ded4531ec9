//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EVCK"  u32 version
//! enc scheme (4 x u32)   dec scheme (4 x u32)
//! u32 latent  u32 hyper  u32 stages
//! u32 rate-point count, then per point: f32 lambda
//! per parameter tensor in canonical module order:
//!     u32 byte length, then raw little-endian f32 data
//! ```
//!
//! Parameters round-trip bitwise; shapes are rebuilt from the scheme header.

use alloc::format;
use alloc::vec::Vec;

use crate::error::CodecError;
use crate::model::{ChannelScheme, Model, ModelConfig, RatePoint};
use crate::scalable::{EncoderBank, EncoderProvenance, Regime};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVCK";
pub const VERSION: u32 = 1;
pub const BANK_MAGIC: &[u8; 4] = b"EVCB";

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { out: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    fn scheme(&mut self, s: ChannelScheme) {
        for w in s.widths() {
            self.u32(w as u32);
        }
    }

    fn tensor_blob(&mut self, t: &Tensor<f32>) {
        self.u32((t.len() * 4) as u32);
        for &v in t.data() {
            self.f32(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn scheme(&mut self) -> Result<ChannelScheme, CodecError> {
        let c1 = self.u32()? as usize;
        let c2 = self.u32()? as usize;
        let c3 = self.u32()? as usize;
        let c4 = self.u32()? as usize;
        Ok(ChannelScheme::new(c1, c2, c3, c4))
    }

    /// Read a length-prefixed blob into an existing tensor (shape is derived
    /// from the rebuilt structure).
    fn tensor_blob(&mut self, into: &mut Tensor<f32>) -> Result<(), CodecError> {
        let bytes = self.u32()? as usize;
        if bytes != into.len() * 4 {
            return Err(CodecError::Corrupt {
                offset: self.pos,
                detail: format!(
                    "parameter blob of {bytes} bytes does not match expected {}",
                    into.len() * 4
                ),
            });
        }
        for v in into.data_mut() {
            *v = self.f32()?;
        }
        Ok(())
    }
}

/// Serialize a trained `f32` model.
pub fn save_model(model: &Model<f32>) -> Vec<u8> {
    let mut w = Writer::new();
    w.out.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.scheme(model.cfg.enc_scheme);
    w.scheme(model.cfg.dec_scheme);
    w.u32(model.cfg.latent_channels as u32);
    w.u32(model.cfg.hyper_channels as u32);
    w.u32(model.cfg.stages as u32);
    w.u32(model.lambdas.len() as u32);
    for &l in &model.lambdas {
        w.f32(l as f32);
    }
    model.for_each_param(&mut |t: &Tensor<f32>| w.tensor_blob(t));
    w.out
}

/// Rebuild a model from checkpoint bytes.
pub fn load_model(bytes: &[u8]) -> Result<Model<f32>, CodecError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(CodecError::BadHeader {
            offset: 0,
            detail: "missing EVCK magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CodecError::BadHeader {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let enc_scheme = r.scheme()?;
    let dec_scheme = r.scheme()?;
    let latent = r.u32()? as usize;
    let hyper = r.u32()? as usize;
    let stages = r.u32()? as usize;
    let n_rates = r.u32()? as usize;
    if n_rates == 0 || n_rates > 255 {
        return Err(CodecError::Corrupt {
            offset: r.pos,
            detail: format!("implausible rate point count {n_rates}"),
        });
    }
    let mut rate_points = Vec::with_capacity(n_rates);
    for _ in 0..n_rates {
        rate_points.push(RatePoint {
            lambda: r.f32()? as f64,
            q_global_init: 1.0,
        });
    }
    let cfg = ModelConfig::new(enc_scheme, dec_scheme, latent, hyper).with_stages(stages);
    let mut model = Model::build(cfg, &rate_points, 0).map_err(|e| CodecError::Corrupt {
        offset: r.pos,
        detail: format!("invalid checkpoint structure: {e}"),
    })?;
    let mut failure: Option<CodecError> = None;
    model.for_each_param_mut(&mut |t: &mut Tensor<f32>| {
        if failure.is_none() {
            if let Err(e) = r.tensor_blob(t) {
                failure = Some(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if r.pos != bytes.len() {
        return Err(CodecError::Corrupt {
            offset: r.pos,
            detail: "trailing bytes after parameters".into(),
        });
    }
    Ok(model)
}

/// Serialize an encoder bank: the shared-module checkpoint plus one
/// parameter section per small encoder.
pub fn save_bank(bank: &EncoderBank<f32>) -> Vec<u8> {
    let mut w = Writer::new();
    w.out.extend_from_slice(BANK_MAGIC);
    w.u32(VERSION);
    let shared = save_model(&bank.shared);
    w.u32(shared.len() as u32);
    w.out.extend_from_slice(&shared);
    w.u32(bank.encoders.len() as u32);
    for (enc, prov) in &bank.encoders {
        w.out.push(prov.regime as u8);
        w.out.push(prov.teacher_id.unwrap_or(0xFF));
        w.scheme(enc.scheme);
        for layer in enc.conv_layers() {
            w.tensor_blob(&layer.weight);
            w.tensor_blob(&layer.bias);
        }
    }
    w.out
}

/// Rebuild an encoder bank.
pub fn load_bank(bytes: &[u8]) -> Result<EncoderBank<f32>, CodecError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != BANK_MAGIC {
        return Err(CodecError::BadHeader {
            offset: 0,
            detail: "missing EVCB magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CodecError::BadHeader {
            offset: 4,
            detail: format!("unsupported bank version {version}"),
        });
    }
    let shared_len = r.u32()? as usize;
    let shared = load_model(r.take(shared_len)?)?;
    let count = r.u32()? as usize;
    let mut bank = EncoderBank::new(shared);
    for _ in 0..count {
        let regime = Regime::from_u8(r.take(1)?[0]).ok_or(CodecError::Corrupt {
            offset: r.pos,
            detail: "unknown training regime tag".into(),
        })?;
        let teacher = r.take(1)?[0];
        let scheme = r.scheme()?;
        let mut enc = crate::model::Encoder::init(
            scheme,
            bank.shared.cfg.stages,
            bank.shared.cfg.latent_channels,
            &mut crate::rng::Rng::new(0),
        );
        let mut failure = None;
        for layer in enc.conv_layers_mut() {
            if failure.is_some() {
                break;
            }
            if let Err(e) = r.tensor_blob(&mut layer.weight) {
                failure = Some(e);
                break;
            }
            if let Err(e) = r.tensor_blob(&mut layer.bias) {
                failure = Some(e);
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        bank.encoders.push((
            enc,
            EncoderProvenance {
                regime,
                teacher_id: if teacher == 0xFF { None } else { Some(teacher) },
            },
        ));
    }
    if r.pos != bytes.len() {
        return Err(CodecError::Corrupt {
            offset: r.pos,
            detail: "trailing bytes after encoder sections".into(),
        });
    }
    Ok(bank)
}
