//! The full model: decoder, posterior heads and prior parameters in one
//! [`ParamSet`], and the fused pass in which the decoder's down path also
//! feeds the `z3` posterior heads.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::latent::{LatentBundle, LatentSpec, LatentVars};
use crate::params::{Bound, ParamSet};
use crate::rbm::RbmParams;
use crate::relaxation::{open_uniform_tensor, sample_discrete, sample_zeta, sample_zeta_values};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    /// Factorial Bernoulli posterior, RBM prior over all latent bits.
    Rbm,
    /// Diagonal Gaussian posterior and standard normal prior over `z1`.
    Gaussian,
    /// No latents: a pure autoregressive model.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub encoder: EncoderConfig,
    pub prior: PriorKind,
    /// Standard deviation of the initial RBM couplings.
    pub rbm_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            decoder: DecoderConfig::default(),
            encoder: EncoderConfig::default(),
            prior: PriorKind::Rbm,
            rbm_init_std: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.encoder.validate(&self.decoder)?;
        let spec = self.decoder.latent_spec();
        match self.prior {
            PriorKind::None if spec.total() > 0 => {
                Err(Error::Config("prior `none` requires all latent groups to be disabled".into()))
            }
            PriorKind::Rbm if spec.total() == 0 => Err(Error::Config("the RBM prior needs at least one latent".into())),
            PriorKind::Gaussian if spec.z1 == 0 || spec.z2 > 0 || spec.total() != spec.z1 => {
                Err(Error::Config("the Gaussian prior supports z1 only".into()))
            }
            _ if !(self.rbm_init_std >= 0.0) => Err(Error::Config("rbm_init_std must be non-negative".into())),
            _ => Ok(()),
        }
    }

    pub fn latent_spec(&self) -> LatentSpec {
        self.decoder.latent_spec()
    }
}

/// How the fused pass turns posterior parameters into latents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PosteriorMode {
    /// Relaxed Bernoulli samples at temperature `tau`, differentiable.
    Relaxed { tau: f64 },
    /// Hard bits, constant on the tape.
    Discrete,
    /// Reparameterized Gaussian `μ + σ ε`.
    Gaussian,
}

/// Tape handles produced by [`Model::fused_pass`]. For the Gaussian prior
/// `logits.z1` holds `[μ ‖ log σ]`.
#[derive(Clone, Debug)]
pub struct Pass {
    pub logits: LatentVars,
    pub latents: LatentVars,
    /// Decoder output parameters `[B,H,W,P]`.
    pub out: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

pub const PRIOR_W: &str = "prior.w";
pub const PRIOR_A: &str = "prior.a";
pub const PRIOR_B: &str = "prior.b";

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        config.decoder.init(&mut params, rng)?;
        let spec = config.latent_spec();
        let z1_outputs = match config.prior {
            PriorKind::Gaussian => 2 * spec.z1,
            _ => spec.z1,
        };
        config.encoder.init(&config.decoder, z1_outputs, &mut params, rng)?;
        if config.prior == PriorKind::Rbm {
            let (m, k) = spec.rbm_sides();
            let rbm = RbmParams::init(m, k, config.rbm_init_std.max(f64::MIN_POSITIVE), rng);
            params.insert(PRIOR_W, rbm.w_tensor());
            params.insert(PRIOR_A, Tensor::zeros([m]));
            params.insert(PRIOR_B, Tensor::zeros([k]));
        }
        Ok(Model { config, params })
    }

    pub fn spec(&self) -> LatentSpec {
        self.config.latent_spec()
    }

    /// Current prior parameters; `None` unless the prior is an RBM.
    pub fn rbm(&self) -> Option<RbmParams> {
        let w = self.params.get(PRIOR_W)?;
        let a = self.params.get(PRIOR_A)?.data().to_vec();
        let b = self.params.get(PRIOR_B)?.data().to_vec();
        Some(RbmParams { w: w.data().to_vec(), a, b })
    }

    pub fn set_rbm(&mut self, rbm: &RbmParams) -> Result<()> {
        let (m, k) = self.spec().rbm_sides();
        if rbm.m() != m || rbm.k() != k || rbm.w.len() != m * k {
            return Err(Error::shape("rbm", &[rbm.m(), rbm.k()], &[m, k]));
        }
        self.params.insert(PRIOR_W, Tensor::new([m, k], rbm.w.clone())?);
        self.params.insert(PRIOR_A, Tensor::new([m], rbm.a.clone())?);
        self.params.insert(PRIOR_B, Tensor::new([k], rbm.b.clone())?);
        Ok(())
    }

    /// Posterior noise for a batch, one `[B, size]` tensor per latent group in
    /// group order: open-interval uniforms for Bernoulli latents, standard
    /// normals for the Gaussian prior.
    pub fn draw_noise(&self, batch: usize, rng: &mut impl Rng) -> Vec<Tensor<f64>> {
        self.spec()
            .group_sizes()
            .into_iter()
            .map(|size| match self.config.prior {
                PriorKind::Gaussian => Tensor::from_fn([batch, size], |_| StandardNormal.sample(rng)),
                _ => open_uniform_tensor(&[batch, size], rng),
            })
            .collect()
    }

    fn check_mode(&self, mode: PosteriorMode) -> Result<()> {
        let gaussian = self.config.prior == PriorKind::Gaussian;
        if gaussian != (mode == PosteriorMode::Gaussian) {
            return Err(Error::Config(format!(
                "posterior mode {mode:?} does not match the {:?} prior",
                self.config.prior
            )));
        }
        Ok(())
    }

    fn sample_group<T: Real>(
        &self,
        tape: &mut Tape<T>,
        logits: Var,
        noise: &Tensor<f64>,
        mode: PosteriorMode,
    ) -> Result<Var> {
        match mode {
            PosteriorMode::Relaxed { tau } => sample_zeta(tape, logits, noise, tau),
            PosteriorMode::Discrete => {
                let l = tape.value(logits).to_f64_vec();
                if l.len() != noise.len() {
                    return Err(Error::shape("posterior noise", tape.shape(logits), noise.shape()));
                }
                let z = sample_discrete(&l, noise.data())?;
                Ok(tape.constant(Tensor::new(noise.shape().to_vec(), z)?.cast()))
            }
            PosteriorMode::Gaussian => {
                let n = noise.shape()[1];
                let mu = tape.slice(logits, 1, 0, n)?;
                let log_sigma = tape.slice(logits, 1, n, n)?;
                let sigma = tape.exp(log_sigma);
                let eps = tape.constant(noise.cast());
                let spread = tape.mul(sigma, eps)?;
                tape.add(mu, spread)
            }
        }
    }

    /// Encoder heads and decoder in one pass over raw pixels `x`: `z1` and
    /// `z2` are sampled from their own heads first, the decoder's down path
    /// runs once with them injected, the `z3` heads read its hidden layers,
    /// and the up path consumes all groups.
    pub fn fused_pass<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: &Tensor<f64>,
        mode: PosteriorMode,
        noise: &[Tensor<f64>],
    ) -> Result<Pass> {
        self.check_mode(mode)?;
        let dec = &self.config.decoder;
        let enc = &self.config.encoder;
        let spec = self.spec();
        let sizes = spec.group_sizes();
        if noise.len() != sizes.len() {
            return Err(Error::Config(format!(
                "posterior noise has {} groups, model has {}",
                noise.len(),
                sizes.len()
            )));
        }
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != [dec.height, dec.width, dec.channels] {
            return Err(Error::shape("model input", xs, &[dec.height, dec.width, dec.channels]));
        }
        dec.head.check_pixels(x.data())?;
        let mut logits = LatentVars::default();
        let mut latents = LatentVars::default();
        let mut group = 0;
        if spec.z1 > 0 || spec.z2 > 0 {
            let input = tape.constant(dec.head.to_input(x).cast());
            if spec.z1 > 0 {
                let l = enc.encode_z1(tape, bound, input)?;
                latents.z1 = Some(self.sample_group(tape, l, &noise[group], mode)?);
                logits.z1 = Some(l);
                group += 1;
            }
            if spec.z2 > 0 {
                let l = enc.encode_z2(tape, bound, input)?;
                latents.z2 = Some(self.sample_group(tape, l, &noise[group], mode)?);
                logits.z2 = Some(l);
                group += 1;
            }
        }
        let down = dec.down_pass(tape, bound, x, latents.z1, latents.z2)?;
        if spec.z3_layers > 0 {
            for l in enc.encode_z3(dec, tape, bound, &down)? {
                latents.z3.push(self.sample_group(tape, l, &noise[group], mode)?);
                logits.z3.push(l);
                group += 1;
            }
        }
        let out = dec.up_pass(tape, bound, &down, latents.z2, &latents.z3)?;
        Ok(Pass { logits, latents, out })
    }

    /// Output parameters of the decoder given fixed latents.
    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: &Tensor<f64>,
        latents: &LatentVars,
    ) -> Result<Var> {
        self.config.decoder.decode_teacher_forced(tape, bound, x, latents)
    }
}

/// Draws latents from per-group Bernoulli logits: hard bits when `tau == 0`,
/// relaxed values in `(0, 1)` otherwise. Noise is drawn group by group.
pub fn posterior_sample(logits: &LatentBundle, tau: f64, rng: &mut impl Rng) -> Result<LatentBundle> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("temperature must be non-negative, got {tau}")));
    }
    let mut draw = |l: &Tensor<f64>| -> Result<Tensor<f64>> {
        let rho = open_uniform_tensor(l.shape(), rng);
        let z = if tau == 0.0 {
            sample_discrete(l.data(), rho.data())?
        } else {
            sample_zeta_values(l.data(), rho.data(), tau)?
        };
        Tensor::new(l.shape().to_vec(), z)
    };
    Ok(LatentBundle {
        z1: logits.z1.as_ref().map(&mut draw).transpose()?,
        z2: logits.z2.as_ref().map(&mut draw).transpose()?,
        z3: logits.z3.iter().map(draw).collect::<Result<_>>()?,
    })
}
