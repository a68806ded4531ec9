//! Rate-distortion metrics: PSNR, bits per pixel, padding, Bjontegaard delta
//! rate, and the relative-improvement summary.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::image::ImageU8;

/// PSNR cap for identical images (zero MSE would be infinite).
pub const PSNR_CAP_DB: f64 = 100.0;

/// A `(bpp, psnr)` measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr: f64,
}

/// Rate-distortion curve: at least four points, strictly increasing bpp.
#[derive(Clone, Debug, PartialEq)]
pub struct RDCurve {
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(mut points: Vec<RDPoint>) -> Result<Self, Error> {
        points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).unwrap());
        if points.len() < 4 {
            return Err(Error::Invalid(format!(
                "rate-distortion curve needs at least 4 points, got {}",
                points.len()
            )));
        }
        for w in points.windows(2) {
            if w[1].bpp <= w[0].bpp {
                return Err(Error::Invalid("curve bpp values must be distinct".into()));
            }
        }
        if points
            .iter()
            .any(|p| !p.psnr.is_finite() || !p.bpp.is_finite() || p.bpp <= 0.0)
        {
            return Err(Error::Invalid("curve contains non-finite entries".into()));
        }
        Ok(RDCurve { points })
    }
}

/// Zero-pad right/bottom to the next multiples of 64. Returns the padded
/// image and the original `(width, height)`.
pub fn pad64(img: &ImageU8) -> (ImageU8, (usize, usize)) {
    pad_to_multiple(img, 64)
}

/// Zero-pad right/bottom to the next multiples of `m` (at least one tile).
pub fn pad_to_multiple(img: &ImageU8, m: usize) -> (ImageU8, (usize, usize)) {
    let target_w = img.width.max(1).div_ceil(m) * m;
    let target_h = img.height.max(1).div_ceil(m) * m;
    if target_w == img.width && target_h == img.height {
        return (img.clone(), (img.width, img.height));
    }
    let mut out = ImageU8::new(target_w, target_h);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(x, y, img.pixel(x, y));
        }
    }
    (out, (img.width, img.height))
}

/// `10 * log10(255^2 / MSE)` over 8-bit RGB values, capped at 100 dB.
pub fn psnr(a: &ImageU8, b: &ImageU8) -> Result<f64, Error> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension(format!(
            "psnr dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut acc = 0u64;
    for (&x, &y) in a.rgb.iter().zip(&b.rgb) {
        let d = x as i64 - y as i64;
        acc += (d * d) as u64;
    }
    if acc == 0 {
        return Ok(PSNR_CAP_DB);
    }
    let mse = acc as f64 / a.rgb.len() as f64;
    Ok((10.0 * libm::log10(255.0 * 255.0 / mse)).min(PSNR_CAP_DB))
}

/// Bits per pixel over the pre-padding pixel count.
pub fn bpp(total_bytes: usize, width: usize, height: usize) -> f64 {
    total_bytes as f64 * 8.0 / (width * height) as f64
}

/// Least-squares cubic fit `ln(rate) = c0 + c1 p + c2 p^2 + c3 p^3` over
/// (psnr, ln bpp) samples.
fn fit_log_rate_cubic(curve: &RDCurve) -> [f64; 4] {
    // normal equations for the 4-coefficient polynomial
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for p in &curve.points {
        let x = p.psnr;
        let y = libm::log(p.bpp);
        let basis = [1.0, x, x * x, x * x * x];
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += basis[i] * basis[j];
            }
            atb[i] += basis[i] * y;
        }
    }
    solve4(ata, atb)
}

/// Gaussian elimination with partial pivoting on a 4x4 system.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
    for col in 0..4 {
        let mut pivot = col;
        for row in col + 1..4 {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let d = a[col][col];
        for row in col + 1..4 {
            let f = a[row][col] / d;
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in row + 1..4 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    x
}

fn integrate_cubic(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x * x * x / 3.0 + c[3] * x * x * x * x / 4.0;
    anti(hi) - anti(lo)
}

/// Bjontegaard delta rate in percent: cubic fits of `ln(rate)` against PSNR,
/// averaged log-rate gap over the overlapping PSNR interval. Negative values
/// mean the test curve saves rate against the anchor.
pub fn bd_rate(test: &RDCurve, anchor: &RDCurve) -> Result<f64, Error> {
    let span = |c: &RDCurve| {
        let min = c.points.iter().map(|p| p.psnr).fold(f64::INFINITY, f64::min);
        let max = c
            .points
            .iter()
            .map(|p| p.psnr)
            .fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    };
    let (t_lo, t_hi) = span(test);
    let (a_lo, a_hi) = span(anchor);
    let lo = t_lo.max(a_lo);
    let hi = t_hi.min(a_hi);
    if hi <= lo {
        return Err(Error::Invalid(
            "curves have no overlapping PSNR range".into(),
        ));
    }
    let ct = fit_log_rate_cubic(test);
    let ca = fit_log_rate_cubic(anchor);
    let gap = (integrate_cubic(&ct, lo, hi) - integrate_cubic(&ca, lo, hi)) / (hi - lo);
    Ok(100.0 * (libm::exp(gap) - 1.0))
}

/// How much of the teacher-student gap the method recovers, in percent,
/// rounded to the nearest integer: `(baseline - ours) / (baseline - teacher)`.
pub fn relative_improvement(bd_baseline: f64, bd_ours: f64, bd_teacher: f64) -> f64 {
    100.0 * (bd_baseline - bd_ours) / (bd_baseline - bd_teacher)
}

/// The report string for a relative improvement, e.g. `68%`.
pub fn relative_improvement_label(bd_baseline: f64, bd_ours: f64, bd_teacher: f64) -> String {
    format!(
        "{}%",
        libm::round(relative_improvement(bd_baseline, bd_ours, bd_teacher)) as i64
    )
}
