//! Continuous relaxation of factorial Bernoulli latents.
//!
//! A relaxed sample is `ζ = σ((l + σ⁻¹(ρ)) / τ)` with `ρ ~ Uniform(0, 1)`;
//! the discrete sample `z = [l + σ⁻¹(ρ) > 0]` is its `τ → 0` limit and is
//! distributed as `Bernoulli(σ(l))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.25;
/// Temperatures outside this range are rejected unless explicitly allowed.
pub const TAU_RANGE: (f64, f64) = (0.1, 0.5);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TauSchedule {
    Constant { tau: f64 },
    /// Linear from `start` to `end` over `horizon` steps, then held at `end`.
    /// Increasing and decreasing schedules differ only in their endpoints.
    Linear { start: f64, end: f64, horizon: usize },
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule::Constant { tau: DEFAULT_TAU }
    }
}

impl TauSchedule {
    fn endpoints(&self) -> [f64; 2] {
        match *self {
            TauSchedule::Constant { tau } => [tau, tau],
            TauSchedule::Linear { start, end, .. } => [start, end],
        }
    }

    /// Rejects non-positive temperatures always, and temperatures outside
    /// [`TAU_RANGE`] unless `allow_out_of_range` is set (then only warns).
    pub fn validate(&self, allow_out_of_range: bool) -> Result<()> {
        for tau in self.endpoints() {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("temperature must be positive, got {tau}")));
            }
            if tau < TAU_RANGE.0 || tau > TAU_RANGE.1 {
                let msg = format!(
                    "temperature {tau} outside [{}, {}]: temperatures near 0.25 work well, lower values degrade \
                     results and higher ones do not help",
                    TAU_RANGE.0, TAU_RANGE.1
                );
                if !allow_out_of_range {
                    return Err(Error::Config(format!("{msg} (set allow_tau_out_of_range to override)")));
                }
                log::warn!("{msg}");
            }
        }
        if let TauSchedule::Linear { horizon: 0, .. } = self {
            return Err(Error::Config("temperature schedule horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn tau_at(&self, step: usize) -> f64 {
        match *self {
            TauSchedule::Constant { tau } => tau,
            TauSchedule::Linear { start, end, horizon } => {
                let t = (step as f64 / horizon.max(1) as f64).min(1.0);
                start + (end - start) * t
            }
        }
    }
}

/// Uniform draw from the open interval `(0, 1)` with 53-bit resolution.
pub fn open_uniform(rng: &mut impl Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

pub fn open_uniform_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| open_uniform(rng))
}

fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

fn check_rho(rho: &[f64]) -> Result<()> {
    match rho.iter().find(|&&r| !(r > 0.0 && r < 1.0)) {
        Some(r) => Err(Error::Domain {
            op: "relaxation",
            detail: format!("uniform noise {r} outside the open interval (0, 1)"),
        }),
        None => Ok(()),
    }
}

/// `σ⁻¹(ρ)` noise for the relaxation.
pub fn logistic_noise(rho: &Tensor<f64>) -> Result<Tensor<f64>> {
    check_rho(rho.data())?;
    Tensor::new(rho.shape().to_vec(), rho.data().iter().map(|&r| logit(r)).collect())
}

/// Relaxed sample on the tape, differentiable with respect to `logits`.
pub fn sample_zeta<T: Real>(tape: &mut Tape<T>, logits: Var, rho: &Tensor<f64>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("relaxation temperature must be positive, got {tau}")));
    }
    if tape.shape(logits) != rho.shape() {
        return Err(Error::shape("sample_zeta", tape.shape(logits), rho.shape()));
    }
    let noise = tape.constant(logistic_noise(rho)?.cast());
    let shifted = tape.add(logits, noise)?;
    let scaled = tape.scale(shifted, 1.0 / tau);
    Ok(tape.sigmoid(scaled))
}

pub fn sample_zeta_values(logits: &[f64], rho: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_rho(rho)?;
    Ok(logits
        .iter()
        .zip(rho)
        .map(|(&l, &r)| crate::rbm::sigmoid((l + logit(r)) / tau))
        .collect())
}

/// `z = [l + σ⁻¹(ρ) > 0]`.
pub fn sample_discrete(logits: &[f64], rho: &[f64]) -> Result<Vec<f64>> {
    check_rho(rho)?;
    Ok(logits
        .iter()
        .zip(rho)
        .map(|(&l, &r)| (l + logit(r) > 0.0) as u8 as f64)
        .collect())
}

/// Elementwise Bernoulli log-mass at `value ∈ [0, 1]`: `ζ l − softplus(l)`,
/// which equals `ζ log σ(l) + (1 − ζ) log σ(−l)`.
pub fn log_q<T: Real>(tape: &mut Tape<T>, logits: Var, value: Var) -> Result<Var> {
    let lin = tape.mul(value, logits)?;
    let sp = tape.softplus(logits);
    tape.sub(lin, sp)
}

pub fn log_q_values(logits: &[f64], value: &[f64]) -> f64 {
    logits
        .iter()
        .zip(value)
        .map(|(&l, &z)| z * l - crate::rbm::softplus(l))
        .sum()
}
