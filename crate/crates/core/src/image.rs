//! In-memory 8-bit RGB images, tensor conversions, and a procedural texture
//! generator for self-contained corpora.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` bytes, row-major, RGB interleaved.
    pub rgb: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize) -> Self {
        ImageU8 {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    pub fn from_rgb(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self, Error> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Dimension(alloc::format!(
                "rgb buffer has {} bytes, expected {}",
                rgb.len(),
                width * height * 3
            )));
        }
        Ok(ImageU8 { width, height, rgb })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, p: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&p);
    }

    /// `[1, 3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(Shape::new(1, 3, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(x, y);
                for c in 0..3 {
                    *t.at_mut(0, c, y, x) = T::from_f64(p[c] as f64 / 255.0);
                }
            }
        }
        t
    }

    /// Clamp a `[1, 3, H, W]` tensor in `[0, 1]` back to 8-bit RGB.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, Error> {
        let s = t.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::Dimension(alloc::format!(
                "expected a [1, 3, H, W] tensor, got {s:?}"
            )));
        }
        let mut img = ImageU8::new(s.w, s.h);
        for y in 0..s.h {
            for x in 0..s.w {
                let mut p = [0u8; 3];
                for c in 0..3 {
                    let v = t.at(0, c, y, x).to_f64().clamp(0.0, 1.0);
                    p[c] = libm::round(v * 255.0) as u8;
                }
                img.set_pixel(x, y, p);
            }
        }
        Ok(img)
    }

    /// Crop a `cw x ch` window with its top-left corner at `(cx, cy)`.
    pub fn crop(&self, cx: usize, cy: usize, cw: usize, ch: usize) -> Result<ImageU8, Error> {
        if cx + cw > self.width || cy + ch > self.height {
            return Err(Error::Dimension("crop outside image bounds".into()));
        }
        let mut out = ImageU8::new(cw, ch);
        for y in 0..ch {
            for x in 0..cw {
                out.set_pixel(x, y, self.pixel(cx + x, cy + y));
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> ImageU8 {
        let mut out = ImageU8::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }
}

/// One procedural texture: overlapping sinusoid plaids with a sprinkle of
/// blocky structure, enough signal for rate and distortion to both move
/// during toy training runs.
pub fn synthetic_texture(width: usize, height: usize, rng: &mut Rng) -> ImageU8 {
    let mut img = ImageU8::new(width, height);
    let fx = rng.uniform(0.03, 0.35);
    let fy = rng.uniform(0.03, 0.35);
    let fd = rng.uniform(0.01, 0.12);
    let phase = rng.uniform(0.0, core::f64::consts::TAU);
    let base = [
        rng.uniform(40.0, 215.0),
        rng.uniform(40.0, 215.0),
        rng.uniform(40.0, 215.0),
    ];
    let block = 4 + rng.below(8);
    let block_gain = rng.uniform(0.0, 40.0);
    for y in 0..height {
        for x in 0..width {
            let plaid = 60.0 * libm::sin(fx * x as f64 + phase) + 40.0 * libm::cos(fy * y as f64);
            let diag = 25.0 * libm::sin(fd * (x + y) as f64);
            let blocky = if (x / block + y / block) % 2 == 0 {
                block_gain
            } else {
                -block_gain
            };
            let mut px = [0u8; 3];
            for (c, slot) in px.iter_mut().enumerate() {
                let sign = if c == 1 { -1.0 } else { 1.0 };
                let v = base[c] + sign * plaid + diag + blocky;
                *slot = v.clamp(0.0, 255.0) as u8;
            }
            img.set_pixel(x, y, px);
        }
    }
    img
}

/// A deterministic corpus of square textures.
pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Vec<ImageU8> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| synthetic_texture(size, size, &mut rng))
        .collect()
}
