//! Learned factorized prior for the hyper-latent `z`.
//!
//! Each channel carries an independent monotone CDF `c(x)` built from a small
//! stack of positive-weight affine maps with bounded nonlinearities. The model
//! is trained through the uniform-noise relaxation and discretized to integer
//! tables for actual coding.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

/// Width of the hidden stages.
const WIDTH: usize = 3;
/// Parameters per channel: three inner stages (weights, bias, gate) plus the
/// final affine stage driving the sigmoid.
pub const PARAMS_PER_CHANNEL: usize =
    (WIDTH + WIDTH + WIDTH) + 2 * (WIDTH * WIDTH + WIDTH + WIDTH) + (WIDTH + 1);

// one integer count out of the coder's 2^16 total, like the gaussian path
const P_FLOOR: f64 = 1.0 / 65536.0;
const LN2: f64 = core::f64::consts::LN_2;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Per-channel monotone cumulative model. Parameters are stored as a
/// `[1, C, 1, PARAMS_PER_CHANNEL]` tensor so the optimizer and checkpoint
/// machinery treat them like any other parameter block.
#[derive(Clone, Debug)]
pub struct FactorizedPrior<T> {
    pub params: Tensor<T>,
}

/// Offsets into one channel's parameter block.
struct Layout;

impl Layout {
    // stage k in 0..3: weights, bias, gate
    fn stage(k: usize) -> (usize, usize, usize, usize) {
        // returns (w_off, w_len, b_off, a_off); a_len == b_len == WIDTH
        match k {
            0 => (0, WIDTH, WIDTH, 2 * WIDTH),
            1 => {
                let base = 3 * WIDTH;
                (base, WIDTH * WIDTH, base + WIDTH * WIDTH, base + WIDTH * WIDTH + WIDTH)
            }
            2 => {
                let base = 3 * WIDTH + WIDTH * WIDTH + 2 * WIDTH;
                (base, WIDTH * WIDTH, base + WIDTH * WIDTH, base + WIDTH * WIDTH + WIDTH)
            }
            _ => unreachable!(),
        }
    }

    fn final_stage() -> (usize, usize) {
        let base = 3 * WIDTH + 2 * (WIDTH * WIDTH + 2 * WIDTH);
        (base, base + WIDTH) // (w4_off, b4_off); w4 has WIDTH entries, b4 one
    }
}

/// Saved intermediates of one scalar evaluation, enough to backprop.
struct EvalTrace {
    v: [[f64; WIDTH]; 3],
    u: [[f64; WIDTH]; 3],
    v4: f64,
}

fn eval_channel(p: &[f64], x: f64, trace: Option<&mut EvalTrace>) -> f64 {
    let mut u_prev = [x, 0.0, 0.0];
    let mut v_all = [[0.0; WIDTH]; 3];
    let mut u_all = [[0.0; WIDTH]; 3];
    for k in 0..3 {
        let (w_off, w_len, b_off, a_off) = Layout::stage(k);
        let in_width = w_len / WIDTH;
        let mut u_next = [0.0; WIDTH];
        for i in 0..WIDTH {
            let mut v = p[b_off + i];
            for j in 0..in_width {
                v += softplus(p[w_off + i * in_width + j]) * u_prev[j];
            }
            let t = libm::tanh(p[a_off + i]);
            v_all[k][i] = v;
            u_next[i] = v + t * libm::tanh(v);
        }
        u_all[k] = u_next;
        u_prev = u_next;
    }
    let (w4, b4) = Layout::final_stage();
    let mut v4 = p[b4];
    for j in 0..WIDTH {
        v4 += softplus(p[w4 + j]) * u_prev[j];
    }
    if let Some(t) = trace {
        t.v = v_all;
        t.u = u_all;
        t.v4 = v4;
    }
    sigmoid(v4)
}

/// Backprop `d(c)/d(x)` and accumulate `upstream * d(c)/d(params)` into
/// `gparams` for one scalar evaluation.
fn backprop_channel(
    p: &[f64],
    x: f64,
    trace: &EvalTrace,
    upstream: f64,
    gparams: &mut [f64],
) -> f64 {
    let c = sigmoid(trace.v4);
    let g_v4 = upstream * c * (1.0 - c);
    let (w4, b4) = Layout::final_stage();
    gparams[b4] += g_v4;
    let mut g_u = [0.0; WIDTH];
    for j in 0..WIDTH {
        gparams[w4 + j] += g_v4 * trace.u[2][j] * sigmoid(p[w4 + j]);
        g_u[j] = g_v4 * softplus(p[w4 + j]);
    }
    for k in (0..3).rev() {
        let (w_off, w_len, b_off, a_off) = Layout::stage(k);
        let in_width = w_len / WIDTH;
        let u_in: [f64; WIDTH] = if k == 0 {
            [x, 0.0, 0.0]
        } else {
            trace.u[k - 1]
        };
        let mut g_in = [0.0; WIDTH];
        for i in 0..WIDTH {
            let v = trace.v[k][i];
            let t = libm::tanh(p[a_off + i]);
            let th = libm::tanh(v);
            let g_v = g_u[i] * (1.0 + t * (1.0 - th * th));
            gparams[a_off + i] += g_u[i] * th * (1.0 - t * t);
            gparams[b_off + i] += g_v;
            for j in 0..in_width {
                gparams[w_off + i * in_width + j] += g_v * u_in[j] * sigmoid(p[w_off + i * in_width + j]);
                g_in[j] += g_v * softplus(p[w_off + i * in_width + j]);
            }
        }
        g_u = g_in;
    }
    // d/dx flows through the first stage's single input
    g_u[0]
}

impl<T: Scalar> FactorizedPrior<T> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        let mut data = Vec::with_capacity(channels * PARAMS_PER_CHANNEL);
        // keep each stage's row sum near 1 so the overall slope starts near
        // a unit-scale logistic: softplus(0.5413) ~= 1, softplus(-0.927) ~= 1/3
        let single_in = 0.5413;
        let triple_in = -0.927;
        for _ in 0..channels {
            let mut p = vec![0.0f64; PARAMS_PER_CHANNEL];
            for k in 0..3 {
                let (w_off, w_len, b_off, a_off) = Layout::stage(k);
                let w_init = if k == 0 { single_in } else { triple_in };
                for i in 0..w_len {
                    p[w_off + i] = w_init + 0.05 * rng.uniform(-1.0, 1.0);
                }
                for i in 0..WIDTH {
                    p[b_off + i] = rng.uniform(-0.5, 0.5);
                    p[a_off + i] = 0.1 * rng.uniform(-1.0, 1.0);
                }
            }
            let (w4, b4) = Layout::final_stage();
            for j in 0..WIDTH {
                p[w4 + j] = triple_in + 0.05 * rng.uniform(-1.0, 1.0);
            }
            p[b4] = 0.0;
            data.extend(p.into_iter().map(T::from_f64));
        }
        let shape = Shape::new(1, channels, 1, PARAMS_PER_CHANNEL);
        FactorizedPrior {
            params: Tensor::from_vec(shape, data).expect("layout is consistent"),
        }
    }

    pub fn channels(&self) -> usize {
        self.params.shape().c
    }

    pub fn cast<U: Scalar>(&self) -> FactorizedPrior<U> {
        FactorizedPrior {
            params: self.params.cast(),
        }
    }

    /// Monotone CDF value for channel `c` at `x`.
    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        eval_channel(&channel_params(&self.params, c), x, None)
    }

    /// Probability of integer symbol `k` on channel `c` (before integerized
    /// table construction).
    pub fn symbol_prob(&self, c: usize, k: i32) -> f64 {
        let p = channel_params(&self.params, c);
        eval_channel(&p, k as f64 + 0.5, None) - eval_channel(&p, k as f64 - 0.5, None)
    }

    /// Symbol window `[lo, hi]` covering all but ~1e-5 tail mass per side.
    pub fn symbol_window(&self, c: usize) -> (i32, i32) {
        let p = channel_params(&self.params, c);
        let mut lo = 0i32;
        while lo > -256 && eval_channel(&p, lo as f64 - 0.5, None) > 1e-5 {
            lo -= 1;
        }
        let mut hi = 0i32;
        while hi < 256 && eval_channel(&p, hi as f64 + 0.5, None) < 1.0 - 1e-5 {
            hi += 1;
        }
        (lo, hi)
    }
}

fn channel_params<T: Scalar>(params: &Tensor<T>, c: usize) -> Vec<f64> {
    let base = c * PARAMS_PER_CHANNEL;
    params.data()[base..base + PARAMS_PER_CHANNEL]
        .iter()
        .map(|v| v.to_f64())
        .collect()
}

/// Differentiable rate of `z_tilde` under the prior: per-element
/// `-log2(c(z + 1/2) - c(z - 1/2))`. `params` is laid out like
/// [`FactorizedPrior::params`].
pub fn factorized_bits<T: Scalar>(z: &Tensor<T>, params: &Tensor<T>) -> Result<Tensor<T>, Error> {
    let zs = z.shape();
    if params.shape().c != zs.c || params.shape().w != PARAMS_PER_CHANNEL {
        return Err(Error::Dimension("prior channel count mismatch".into()));
    }
    let mut out = Tensor::zeros(zs);
    let plane = zs.h * zs.w;
    for c in 0..zs.c {
        let p = channel_params(params, c);
        for n in 0..zs.n {
            let base = (n * zs.c + c) * plane;
            for i in base..base + plane {
                let zv = z.data()[i].to_f64();
                let hi = eval_channel(&p, zv + 0.5, None);
                let lo = eval_channel(&p, zv - 0.5, None);
                let prob = (hi - lo).max(P_FLOOR);
                out.data_mut()[i] = T::from_f64(-libm::log(prob) / LN2);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`factorized_bits`]: `(d/dz, d/dparams)`.
pub fn factorized_bits_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    z: &Tensor<T>,
    params: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let zs = z.shape();
    let plane = zs.h * zs.w;
    let mut gz = Tensor::zeros(zs);
    let mut gparams = vec![0.0f64; params.len()];
    for c in 0..zs.c {
        let p = channel_params(params, c);
        let gp = &mut gparams[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL];
        for n in 0..zs.n {
            let base = (n * zs.c + c) * plane;
            for i in base..base + plane {
                let zv = z.data()[i].to_f64();
                let mut tr_hi = EvalTrace {
                    v: [[0.0; WIDTH]; 3],
                    u: [[0.0; WIDTH]; 3],
                    v4: 0.0,
                };
                let mut tr_lo = EvalTrace {
                    v: [[0.0; WIDTH]; 3],
                    u: [[0.0; WIDTH]; 3],
                    v4: 0.0,
                };
                let hi = eval_channel(&p, zv + 0.5, Some(&mut tr_hi));
                let lo = eval_channel(&p, zv - 0.5, Some(&mut tr_lo));
                let prob = hi - lo;
                if prob <= P_FLOOR {
                    continue;
                }
                let upstream = -grad_out.data()[i].to_f64() / (prob * LN2);
                let dx_hi = backprop_channel(&p, zv + 0.5, &tr_hi, upstream, gp);
                let dx_lo = backprop_channel(&p, zv - 0.5, &tr_lo, -upstream, gp);
                gz.data_mut()[i] = T::from_f64(dx_hi + dx_lo);
            }
        }
    }
    let gp_tensor = Tensor::from_vec(
        params.shape(),
        gparams.into_iter().map(T::from_f64).collect(),
    )
    .expect("same layout");
    (gz, gp_tensor)
}
