//! Generation from the prior and reconstruction of given images.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::latent::LatentBundle;
use crate::model::{Model, PosteriorMode, PriorKind};
use crate::rbm::PersistentChains;
use crate::tensor::{Real, Tape, Tensor};

/// Block Gibbs updates before reading prior samples.
pub const DEFAULT_GIBBS_STEPS: usize = 50_000;

/// `n` prior samples of every latent group. RBM samples come from `n`
/// independent chains after `gibbs_steps` block updates each.
pub fn prior_latents(model: &Model, n: usize, gibbs_steps: usize, rng: &mut impl Rng) -> Result<LatentBundle> {
    let spec = model.spec();
    let flat = match model.config.prior {
        PriorKind::None => return Ok(LatentBundle::default()),
        PriorKind::Gaussian => Tensor::from_fn([n, spec.total()], |_| rng.sample(StandardNormal)),
        PriorKind::Rbm => {
            let rbm = model.rbm().ok_or_else(|| Error::invalid("model has no RBM prior"))?;
            let mut chains = PersistentChains::new(rbm.m(), rbm.k(), n, rng);
            chains.advance(&rbm, gibbs_steps, rng);
            let mut data = Vec::with_capacity(n * spec.total());
            for s in &chains.states {
                data.extend_from_slice(&s.left);
                data.extend_from_slice(&s.right);
            }
            Tensor::new([n, spec.total()], data)?
        }
    };
    LatentBundle::from_flat(&spec, &flat)
}

/// Each latent row repeated `times` times in place.
fn repeat_rows(latents: &LatentBundle, times: usize) -> LatentBundle {
    let Some(n) = latents.batch() else {
        return LatentBundle::default();
    };
    let idx: Vec<usize> = (0..n * times).map(|i| i / times).collect();
    latents.select(&idx)
}

/// Images `[n_latents · per_latent, H, W, C]`, grouped by latent sample.
pub fn generate_from_prior<T: Real>(
    model: &Model,
    n_latents: usize,
    per_latent: usize,
    gibbs_steps: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<f64>> {
    let latents = prior_latents(model, n_latents, gibbs_steps, rng)?;
    let repeated = repeat_rows(&latents, per_latent);
    model
        .config
        .decoder
        .generate::<T>(&model.params, &repeated, n_latents * per_latent, rng)
}

/// Discrete (or Gaussian) posterior samples for raw pixels `x`, one per row.
pub fn posterior_latents<T: Real>(model: &Model, x: &Tensor<f64>, rng: &mut impl Rng) -> Result<LatentBundle> {
    if model.config.prior == PriorKind::None {
        return Ok(LatentBundle::default());
    }
    let mode = match model.config.prior {
        PriorKind::Gaussian => PosteriorMode::Gaussian,
        _ => PosteriorMode::Discrete,
    };
    let noise = model.draw_noise(x.shape()[0], rng);
    let mut tape = Tape::<T>::new();
    let bound = model.params.bind(&mut tape, false);
    let pass = model.fused_pass(&mut tape, &bound, x, mode, &noise)?;
    Ok(pass.latents.values(&tape))
}

/// For every image, `per_image` decoder generations conditioned on
/// independent posterior samples: `[N · per_image, H, W, C]`, grouped by image.
pub fn reconstruct<T: Real>(model: &Model, x: &Tensor<f64>, per_image: usize, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    let n = x.shape().first().copied().unwrap_or(0);
    let idx: Vec<usize> = (0..n * per_image).map(|i| i / per_image).collect();
    let repeated = gather_rows(x, &idx);
    let latents = posterior_latents::<T>(model, &repeated, rng)?;
    model
        .config
        .decoder
        .generate::<T>(&model.params, &latents, n * per_image, rng)
}

fn gather_rows(x: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let row: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_fn(shape, |i| x.data()[idx[i / row] * row + i % row])
}
