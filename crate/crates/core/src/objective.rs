//! The relaxed variational bound used for training and the importance
//! weighted bound used for evaluation. All quantities are in nats per image.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::latent::LatentVars;
use crate::model::{Model, Pass, PosteriorMode, PriorKind, PRIOR_A, PRIOR_B, PRIOR_W};
use crate::params::Bound;
use crate::rbm::{exact_log_z, exact_moments, log_sum_exp, RbmMoments};
use crate::relaxation::log_q;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Log-partition of the RBM prior. When `grad` is present the objective
/// differentiates `log Z` through these moments; otherwise it is a constant.
#[derive(Clone, Debug, PartialEq)]
pub struct LogZ {
    pub value: f64,
    pub grad: Option<RbmMoments>,
}

impl LogZ {
    pub fn fixed(value: f64) -> Self {
        LogZ { value, grad: None }
    }

    pub fn with_grad(value: f64, grad: RbmMoments) -> Self {
        LogZ { value, grad: Some(grad) }
    }

    /// Exact value and gradient by enumeration, for small priors.
    pub fn exact(model: &Model) -> Result<Self> {
        let rbm = model
            .rbm()
            .ok_or_else(|| Error::Config("model has no RBM prior".into()))?;
        Ok(LogZ::with_grad(exact_log_z(&rbm)?, exact_moments(&rbm)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboOptions {
    pub tau: f64,
    /// KL weight.
    pub beta: f64,
    /// Drop the score term: `log q` sees its logits as constants, so encoder
    /// gradients flow only through the sampled latents.
    pub path_derivative: bool,
}

impl Default for ElboOptions {
    fn default() -> Self {
        ElboOptions {
            tau: crate::relaxation::DEFAULT_TAU,
            beta: 1.0,
            path_derivative: true,
        }
    }
}

/// Batch means and per-sample values of one bound evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub beta: f64,
    /// `recon − beta · kl`.
    pub total: f64,
    pub recon_per_sample: Vec<f64>,
    pub kl_per_sample: Vec<f64>,
    pub total_per_sample: Vec<f64>,
}

impl ElboBreakdown {
    fn new<T: Real>(tape: &Tape<T>, recon: Var, kl: Option<Var>, beta: f64) -> Self {
        let recon_per_sample = tape.value(recon).to_f64_vec();
        let kl_per_sample = match kl {
            Some(k) => tape.value(k).to_f64_vec(),
            None => vec![0.0; recon_per_sample.len()],
        };
        let total_per_sample: Vec<f64> = recon_per_sample
            .iter()
            .zip(&kl_per_sample)
            .map(|(r, k)| r - beta * k)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        ElboBreakdown {
            recon: mean(&recon_per_sample),
            kl: mean(&kl_per_sample),
            beta,
            total: mean(&total_per_sample),
            recon_per_sample,
            kl_per_sample,
            total_per_sample,
        }
    }
}

/// A recorded objective: `loss` is the negated batch-mean bound, ready for
/// [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: Var,
    pub breakdown: ElboBreakdown,
    pub pass: Pass,
}

/// `log p(z) = −E(z) − log Z` per sample, `[B]`, with the prior parameters
/// taken from `bound`.
pub fn rbm_log_prior<T: Real>(
    model: &Model,
    tape: &mut Tape<T>,
    bound: &Bound,
    z: &LatentVars,
    log_z: &LogZ,
) -> Result<Var> {
    let (m, k) = model.spec().rbm_sides();
    let flat = z.flatten(tape)?;
    let w = bound.var(PRIOR_W)?;
    let a = bound.var(PRIOR_A)?;
    let b = bound.var(PRIOR_B)?;
    let v = tape.slice(flat, 1, 0, m)?;
    let av = tape.mul(v, a)?;
    let mut neg_energy = tape.sum_axis(av, 1)?;
    if k > 0 {
        let h = tape.slice(flat, 1, m, k)?;
        let bh = tape.mul(h, b)?;
        let bh = tape.sum_axis(bh, 1)?;
        let vw = tape.matmul(v, w)?;
        let vwh = tape.mul(vw, h)?;
        let vwh = tape.sum_axis(vwh, 1)?;
        neg_energy = tape.add(neg_energy, bh)?;
        neg_energy = tape.add(neg_energy, vwh)?;
    }
    let lz = match &log_z.grad {
        Some(g) => tape.custom_scalar(
            log_z.value,
            vec![
                (w, Tensor::<f64>::new([m, k], g.w.clone())?.cast()),
                (a, Tensor::<f64>::new([m], g.a.clone())?.cast()),
                (b, Tensor::<f64>::new([k], g.b.clone())?.cast()),
            ],
        )?,
        None => tape.constant(Tensor::scalar(T::of(log_z.value))),
    };
    tape.sub(neg_energy, lz)
}

/// `Σ log q(z | x)` over every Bernoulli latent, `[B]`.
fn bernoulli_log_q<T: Real>(tape: &mut Tape<T>, logits: &LatentVars, z: &LatentVars, detach: bool) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (l, v) in logits.groups().into_iter().zip(z.groups()) {
        let l = if detach { tape.detach(l) } else { l };
        let lq = log_q(tape, l, v)?;
        let lq = tape.sum_axis(lq, 1)?;
        total = Some(match total {
            Some(t) => tape.add(t, lq)?,
            None => lq,
        });
    }
    total.ok_or_else(|| Error::invalid("no latent groups"))
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, 1))` per sample from `[μ ‖ log σ]`.
fn gaussian_kl<T: Real>(tape: &mut Tape<T>, params: Var) -> Result<Var> {
    let n = tape.shape(params)[1] / 2;
    let mu = tape.slice(params, 1, 0, n)?;
    let log_sigma = tape.slice(params, 1, n, n)?;
    let mu2 = tape.square(mu);
    let two_ls = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two_ls);
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, two_ls)?;
    let s = tape.offset(s, -1.0);
    let s = tape.sum_axis(s, 1)?;
    Ok(tape.scale(s, 0.5))
}

/// Single-sample relaxed bound on a batch `x`. With an RBM prior the KL term
/// is `log q(ζ|x) − (−E(ζ) − log Z)`; the Gaussian prior uses the closed-form
/// KL; without latents the bound is the exact log-likelihood.
pub fn relaxed_elbo<T: Real>(
    model: &Model,
    tape: &mut Tape<T>,
    bound: &Bound,
    x: &Tensor<f64>,
    log_z: Option<&LogZ>,
    opts: &ElboOptions,
    noise: &[Tensor<f64>],
) -> Result<Objective> {
    if !(opts.beta >= 0.0) {
        return Err(Error::invalid(format!("KL weight must be non-negative, got {}", opts.beta)));
    }
    let mode = match model.config.prior {
        PriorKind::Gaussian => PosteriorMode::Gaussian,
        _ => PosteriorMode::Relaxed { tau: opts.tau },
    };
    let pass = model.fused_pass(tape, bound, x, mode, noise)?;
    let recon = model.config.decoder.head.log_likelihood(tape, pass.out, x)?;
    let kl = match model.config.prior {
        PriorKind::None => None,
        PriorKind::Gaussian => {
            let params = pass.logits.z1.ok_or_else(|| Error::invalid("missing z1 posterior"))?;
            Some(gaussian_kl(tape, params)?)
        }
        PriorKind::Rbm => {
            let log_z = log_z.ok_or_else(|| Error::Config("the RBM prior needs a log Z estimate".into()))?;
            let lq = bernoulli_log_q(tape, &pass.logits, &pass.latents, opts.path_derivative)?;
            let lp = rbm_log_prior(model, tape, bound, &pass.latents, log_z)?;
            Some(tape.sub(lq, lp)?)
        }
    };
    let per_sample = match kl {
        Some(k) => {
            let weighted = tape.scale(k, opts.beta);
            tape.sub(recon, weighted)?
        }
        None => recon,
    };
    let mean = tape.mean(per_sample);
    let loss = tape.neg(mean);
    let breakdown = ElboBreakdown::new(tape, recon, kl, opts.beta);
    Ok(Objective { loss, breakdown, pass })
}

/// Linear KL warm-up: 0 at step 0, 1 from `horizon` on.
pub fn kl_anneal_beta(step: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        1.0
    } else {
        (step as f64 / horizon as f64).min(1.0)
    }
}

/// Per-image importance weighted estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct IwaeResult {
    /// `log (1/K Σ w_k)`.
    pub log_likelihood: Vec<f64>,
    /// Mean over the K samples of `log q(z|x) − log p(z)`.
    pub kl: Vec<f64>,
    /// Mean over the K samples of `log p(x|z)`.
    pub recon: Vec<f64>,
}

fn gaussian_log_density(z: &[f64], mu: &[f64], log_sigma: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(log_sigma)
        .map(|((z, m), ls)| {
            let e = (z - m) / ls.exp();
            -0.5 * e * e - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// Log importance weights `log p(x|z_k) + log p(z_k) − log q(z_k|x)` of one
/// discrete-latent pass, split into `(log w, recon, kl)` per row.
fn log_weights<T: Real>(
    model: &Model,
    x: &Tensor<f64>,
    log_z: f64,
    noise: &[Tensor<f64>],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::<T>::new();
    let bound = model.params.bind(&mut tape, false);
    let mode = match model.config.prior {
        PriorKind::Gaussian => PosteriorMode::Gaussian,
        _ => PosteriorMode::Discrete,
    };
    let pass = model.fused_pass(&mut tape, &bound, x, mode, noise)?;
    let recon_v = model.config.decoder.head.log_likelihood(&mut tape, pass.out, x)?;
    let recon = tape.value(recon_v).to_f64_vec();
    let kl = match model.config.prior {
        PriorKind::None => vec![0.0; recon.len()],
        PriorKind::Rbm => {
            let lq = bernoulli_log_q(&mut tape, &pass.logits, &pass.latents, false)?;
            let lp = rbm_log_prior(model, &mut tape, &bound, &pass.latents, &LogZ::fixed(log_z))?;
            let kl = tape.sub(lq, lp)?;
            tape.value(kl).to_f64_vec()
        }
        PriorKind::Gaussian => {
            let params = tape.value(pass.logits.z1.expect("z1 posterior")).to_f64_vec();
            let z = tape.value(pass.latents.z1.expect("z1 sample")).to_f64_vec();
            let n = model.spec().z1;
            (0..recon.len())
                .map(|r| {
                    let p = &params[r * 2 * n..(r + 1) * 2 * n];
                    let zr = &z[r * n..(r + 1) * n];
                    let zeros = vec![0.0; n];
                    gaussian_log_density(zr, &p[..n], &p[n..]) - gaussian_log_density(zr, &zeros, &zeros)
                })
                .collect()
        }
    };
    let lw = recon.iter().zip(&kl).map(|(r, k)| r - k).collect();
    Ok((lw, recon, kl))
}

/// Importance weighted log-likelihood of every image in `x` with `k`
/// discrete posterior samples each, evaluated `chunk` samples per pass.
/// Noise is drawn per image, chunk by chunk.
pub fn iwae_loglik<T: Real>(
    model: &Model,
    x: &Tensor<f64>,
    log_z: f64,
    k: usize,
    chunk: usize,
    rng: &mut impl Rng,
) -> Result<IwaeResult> {
    if k == 0 || chunk == 0 {
        return Err(Error::invalid("importance sample count and chunk size must be positive"));
    }
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::shape("iwae input", xs, &[0, 0, 0, 0]));
    }
    let pixels: usize = xs[1..].iter().product();
    let deterministic = model.config.prior == PriorKind::None;
    let mut out = IwaeResult {
        log_likelihood: Vec::with_capacity(xs[0]),
        kl: Vec::with_capacity(xs[0]),
        recon: Vec::with_capacity(xs[0]),
    };
    for img in 0..xs[0] {
        let src = &x.data()[img * pixels..(img + 1) * pixels];
        let mut lw = Vec::with_capacity(k);
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        let total = if deterministic { 1 } else { k };
        let mut done = 0;
        while done < total {
            let r = chunk.min(total - done);
            let mut shape = xs.to_vec();
            shape[0] = r;
            let rep = Tensor::from_fn(shape, |i| src[i % pixels]);
            let noise = model.draw_noise(r, rng);
            let (w, recon, kl) = log_weights::<T>(model, &rep, log_z, &noise)?;
            lw.extend(w);
            recon_sum += recon.iter().sum::<f64>();
            kl_sum += kl.iter().sum::<f64>();
            done += r;
        }
        out.log_likelihood.push(log_sum_exp(&lw) - (total as f64).ln());
        out.recon.push(recon_sum / total as f64);
        out.kl.push(kl_sum / total as f64);
    }
    Ok(out)
}
