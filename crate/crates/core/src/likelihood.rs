//! Pixel output distributions: factorial Bernoulli for binary images and the
//! discretized logistic mixture for 8-bit images.
//!
//! Binary images hold values in `{0, 1}`; 8-bit images hold integers in
//! `0..=255`. Both are mapped to `[-1, 1]` before entering a network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rbm::{sigmoid, softplus};
use crate::relaxation::open_uniform;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const LOG_SCALE_MIN: f64 = -7.0;
pub const BIN_HALF_WIDTH: f64 = 1.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Head {
    Bernoulli,
    /// Mixture of `components` discretized logistics.
    Dlm { components: usize },
}

impl Head {
    /// Number of per-pixel output parameters for images with `channels` channels.
    pub fn param_channels(&self, channels: usize) -> usize {
        match *self {
            Head::Bernoulli => channels,
            Head::Dlm { components } => components * (1 + 2 * channels + coupling_count(channels)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Head::Dlm { components: 0 } => Err(Error::Config("mixture needs at least one component".into())),
            _ => Ok(()),
        }
    }

    pub fn check_pixels(&self, x: &[f64]) -> Result<()> {
        match self {
            Head::Bernoulli => check_binary(x),
            Head::Dlm { .. } => check_8bit(x),
        }
    }

    /// Network input in `[-1, 1]`.
    pub fn to_input(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let scale = match self {
            Head::Bernoulli => 2.0,
            Head::Dlm { .. } => 1.0 / 127.5,
        };
        Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * scale - 1.0)
    }

    /// Per-sample log-likelihood `[B]` of `x: [B,H,W,C]` under `params: [B,H,W,P]`.
    pub fn log_likelihood<T: Real>(&self, tape: &mut Tape<T>, params: Var, x: &Tensor<f64>) -> Result<Var> {
        match *self {
            Head::Bernoulli => bernoulli_loglik(tape, params, x),
            Head::Dlm { components } => dlm_loglik(tape, params, x, components),
        }
    }

    /// Draws one pixel (all channels) from its output parameters.
    pub fn sample_pixel(&self, params: &[f64], channels: usize, rng: &mut impl Rng) -> Vec<f64> {
        match *self {
            Head::Bernoulli => sample_bernoulli(params, rng),
            Head::Dlm { components } => sample_dlm(params, channels, components, rng),
        }
    }
}

/// Linear coupling coefficients per mixture component: channel `c` is
/// conditioned on every earlier channel.
fn coupling_count(channels: usize) -> usize {
    channels * channels.saturating_sub(1) / 2
}

fn check_binary(x: &[f64]) -> Result<()> {
    match x.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Domain {
            op: "bernoulli_loglik",
            detail: format!("pixel value {v} is not binary"),
        }),
        None => Ok(()),
    }
}

fn check_8bit(x: &[f64]) -> Result<()> {
    match x.iter().find(|&&v| !(0.0..=255.0).contains(&v) || v.fract() != 0.0) {
        Some(v) => Err(Error::Domain {
            op: "dlm_loglik",
            detail: format!("pixel value {v} is not an integer in 0..=255"),
        }),
        None => Ok(()),
    }
}

fn check_batch(name: &'static str, ps: &[usize], xs: &[usize]) -> Result<()> {
    if ps.len() != 4 || xs.len() != 4 || ps[..3] != xs[..3] {
        return Err(Error::shape(name, ps, xs));
    }
    Ok(())
}

/// Sums every axis but the first: `[B, ...] -> [B]`.
fn per_sample<T: Real>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let rest: usize = shape[1..].iter().product();
    let flat = tape.reshape(v, &[shape[0], rest])?;
    tape.sum_axis(flat, 1)
}

/// `Σ_pixels x l − softplus(l)` per sample.
pub fn bernoulli_loglik<T: Real>(tape: &mut Tape<T>, logits: Var, x: &Tensor<f64>) -> Result<Var> {
    if tape.shape(logits) != x.shape() || x.shape().len() != 4 {
        return Err(Error::shape("bernoulli_loglik", tape.shape(logits), x.shape()));
    }
    check_binary(x.data())?;
    let xv = tape.constant(x.cast());
    let lin = tape.mul(xv, logits)?;
    let sp = tape.softplus(logits);
    let lp = tape.sub(lin, sp)?;
    per_sample(tape, lp)
}

/// Discretized logistic mixture log-likelihood per sample.
///
/// Per pixel the parameters are laid out as `K` mixture logits, `C·K` means,
/// `C·K` log-scales and `C(C−1)/2·K` coupling coefficients, each block
/// channel-major. Channel `c` has mean `μ_c + Σ_{j<c} tanh(α_cj) x_j` where
/// `x_j` are the true (rescaled) earlier channels.
pub fn dlm_loglik<T: Real>(tape: &mut Tape<T>, params: Var, x: &Tensor<f64>, components: usize) -> Result<Var> {
    let ps = tape.shape(params).to_vec();
    check_batch("dlm_loglik", &ps, x.shape())?;
    let (b, h, w, c) = (ps[0], ps[1], ps[2], x.shape()[3]);
    let k = components;
    if k == 0 || ps[3] != (Head::Dlm { components }).param_channels(c) {
        return Err(Error::shape("dlm_loglik", &ps, x.shape()));
    }
    check_8bit(x.data())?;
    let pix = b * h * w;
    let rescaled = |ch: usize| -> Vec<f64> { (0..pix).map(|p| x.data()[p * c + ch] / 127.5 - 1.0).collect() };
    // [B,H,W,K] tensor holding a per-pixel value repeated across components
    let spread = |vals: &[f64]| Tensor::<T>::from_fn(vec![b, h, w, k], |i| T::of(vals[i / k]));

    let block = |tape: &mut Tape<T>, start: usize| tape.slice(params, 3, start, k);
    let logits = block(tape, 0)?;
    let lse = tape.log_sum_exp(logits, 3)?;
    let lse = tape.reshape(lse, &[b, h, w, 1])?;
    let mut total = tape.sub(logits, lse)?;

    let mut coeff = 1 + 2 * c;
    for ch in 0..c {
        let mut mean = block(tape, (1 + ch) * k)?;
        for prev in 0..ch {
            let alpha = block(tape, coeff * k)?;
            coeff += 1;
            let alpha = tape.tanh(alpha);
            let xp = tape.constant(spread(&rescaled(prev)));
            let shift = tape.mul(alpha, xp)?;
            mean = tape.add(mean, shift)?;
        }
        let log_scale = block(tape, (1 + c + ch) * k)?;
        let log_scale = tape.clamp_min(log_scale, LOG_SCALE_MIN);
        let centers = spread(&rescaled(ch));
        let lp = tape.logistic_bin_log_prob(mean, log_scale, &centers, BIN_HALF_WIDTH)?;
        total = tape.add(total, lp)?;
    }
    let per_pixel = tape.log_sum_exp(total, 3)?;
    per_sample(tape, per_pixel)
}

/// Reference log-mass of one 8-bit pixel under one pixel's mixture
/// parameters, evaluated directly in f64.
pub fn dlm_pixel_log_prob(params: &[f64], x: &[u8], components: usize) -> f64 {
    let (c, k) = (x.len(), components);
    let xs: Vec<f64> = x.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
    let logits = &params[..k];
    let lse = crate::rbm::log_sum_exp(logits);
    let terms: Vec<f64> = (0..k)
        .map(|m| {
            let mut lp = logits[m] - lse;
            let mut coeff = 1 + 2 * c;
            for ch in 0..c {
                let mut mean = params[(1 + ch) * k + m];
                for xp in &xs[..ch] {
                    mean += params[coeff * k + m].tanh() * xp;
                    coeff += 1;
                }
                let ls = params[(1 + c + ch) * k + m].max(LOG_SCALE_MIN);
                lp += logistic_bin_f64(xs[ch], mean, ls);
            }
            lp
        })
        .collect();
    crate::rbm::log_sum_exp(&terms)
}

fn logistic_bin_f64(center: f64, mean: f64, log_scale: f64) -> f64 {
    crate::tensor::logistic_bin(center, mean, log_scale, BIN_HALF_WIDTH).0
}

pub fn sample_bernoulli(logits: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    logits
        .iter()
        .map(|&l| (open_uniform(rng) < sigmoid(l)) as u8 as f64)
        .collect()
}

/// Maps a continuous draw in the rescaled domain to its 8-bit bin.
pub fn discretize(x: f64) -> f64 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0)
}

/// Exact draw from the mixture: a component from the softmax of the logits,
/// then each channel by inverse-CDF sampling conditioned on the already
/// discretized earlier channels.
pub fn sample_dlm(params: &[f64], channels: usize, components: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (c, k) = (channels, components);
    let logits = &params[..k];
    let lse = crate::rbm::log_sum_exp(logits);
    let u = open_uniform(rng);
    let mut acc = 0.0;
    let mut m = k - 1;
    for (j, &l) in logits.iter().enumerate() {
        acc += (l - lse).exp();
        if u < acc {
            m = j;
            break;
        }
    }
    let mut out = Vec::with_capacity(c);
    let mut coeff = 1 + 2 * c;
    for ch in 0..c {
        let mut mean = params[(1 + ch) * k + m];
        for &xp in &out {
            mean += params[coeff * k + m].tanh() * (xp / 127.5 - 1.0);
            coeff += 1;
        }
        let scale = params[(1 + c + ch) * k + m].max(LOG_SCALE_MIN).exp();
        let u = open_uniform(rng);
        out.push(discretize(mean + scale * (u.ln() - (-u).ln_1p())));
    }
    out
}

/// Bits per dimension of a log-likelihood in nats: `−LL / (n_dims ln 2)`.
pub fn bits_per_dimension(log_likelihood: f64, n_dims: usize) -> Result<f64> {
    if n_dims == 0 {
        return Err(Error::invalid("bits per dimension needs at least one dimension"));
    }
    Ok(-log_likelihood / (n_dims as f64 * std::f64::consts::LN_2))
}

/// Direct per-sample Bernoulli log-likelihood of flat pixel vectors.
pub fn bernoulli_loglik_values(logits: &[f64], x: &[f64]) -> f64 {
    logits.iter().zip(x).map(|(&l, &v)| v * l - softplus(l)).sum()
}
