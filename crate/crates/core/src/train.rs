//! Training loop, run manifest and evaluation.
//!
//! Each epoch runs relaxed-bound steps on shuffled mini-batches with a fixed
//! log Z estimate; the estimate and the prior samples behind its gradient are
//! refreshed by annealed importance sampling between epochs. Every random
//! draw comes from streams of one seeded generator.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ais::{ais_log_z, ais_samples, AisSchedule, Spacing};
use crate::checkpoint::Checkpoint;
use crate::data::{batches, binarize, to_pixels, DataConfig, Dataset, Splits};
use crate::error::{Error, Result};
use crate::likelihood::bits_per_dimension;
use crate::model::{Model, ModelConfig, PriorKind};
use crate::objective::{iwae_loglik, kl_anneal_beta, relaxed_elbo, ElboOptions, LogZ};
use crate::optim::{Adam, AdamConfig};
use crate::rbm::{exact_log_z, grad_log_z, weighted_grad_log_z, PersistentChains, RbmMoments};
use crate::relaxation::TauSchedule;
use crate::tensor::{Precision, Real, Tape};

/// Latent counts up to this size get an exact log Z at evaluation time.
pub const EXACT_EVAL_BITS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AisLadder {
    pub steps: usize,
    /// Block Gibbs alternations per rung.
    pub updates: usize,
    pub chains: usize,
    pub spacing: Spacing,
}

impl Default for AisLadder {
    fn default() -> Self {
        AisLadder {
            steps: 1000,
            updates: 1,
            chains: 256,
            spacing: Spacing::Linear,
        }
    }
}

impl AisLadder {
    /// Evaluation-grade ladder.
    pub fn eval_grade() -> Self {
        AisLadder {
            steps: 10_000,
            updates: 50,
            chains: 5000,
            spacing: Spacing::Linear,
        }
    }

    pub fn schedule(&self) -> Result<AisSchedule> {
        AisSchedule::new(self.steps, self.updates, self.chains, self.spacing)
    }
}

/// Source of the prior samples whose moments give the log Z gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum PriorSamples {
    /// Final AIS states with their self-normalized importance weights,
    /// refreshed with the estimate.
    #[default]
    AisWeighted,
    /// Persistent Gibbs chains advanced `gibbs_steps` before every step.
    Persistent { chains: usize, gibbs_steps: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    /// Epochs over which the KL weight ramps linearly from 0 to 1.
    pub kl_anneal_epochs: usize,
    /// Temperature as a function of the optimizer step.
    pub tau: TauSchedule,
    pub allow_tau_out_of_range: bool,
    pub path_derivative: bool,
    pub ais: AisLadder,
    /// Epochs between log Z refreshes.
    pub ais_every: usize,
    pub prior_samples: PriorSamples,
    /// Ladder for evaluation when log Z cannot be enumerated.
    pub eval_ais: AisLadder,
    /// Epochs between validation bounds; zero disables validation.
    pub valid_every: usize,
    /// Epochs between checkpoints; zero keeps only the final one.
    pub checkpoint_every: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            batch_size: 32,
            epochs: 10,
            optimizer: AdamConfig::default(),
            kl_anneal_epochs: 10,
            tau: TauSchedule::default(),
            allow_tau_out_of_range: false,
            path_derivative: true,
            ais: AisLadder::default(),
            ais_every: 1,
            prior_samples: PriorSamples::default(),
            eval_ais: AisLadder::eval_grade(),
            valid_every: 1,
            checkpoint_every: 0,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.tau.validate(self.allow_tau_out_of_range)?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.ais_every == 0 {
            return Err(Error::Config("ais_every must be positive".into()));
        }
        if let PriorSamples::Persistent { chains: 0, .. } = self.prior_samples {
            return Err(Error::Config("persistent prior sampling needs at least one chain".into()));
        }
        self.ais.schedule()?;
        self.eval_ais.schedule()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Training means of the relaxed bound and its terms.
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    /// KL weight and temperature at the epoch's last step.
    pub beta: f64,
    pub tau: f64,
    /// log Z estimate used during the epoch and its effective sample size.
    pub log_z_est: f64,
    pub ess: f64,
    pub wall_time: f64,
    /// Single-sample discrete bound on the validation split.
    pub valid_elbo: Option<f64>,
    pub valid_recon: Option<f64>,
    /// Monte-Carlo KL of discrete posterior samples.
    pub valid_kl: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,elbo,recon,kl,beta,tau,log_z_est,ess,wall_time";
pub const VALID_HEADER: &str = "epoch,elbo,recon,kl";

/// Training metrics as CSV with header, LF line endings.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.elbo, r.recon, r.kl, r.beta, r.tau, r.log_z_est, r.ess, r.wall_time
        ));
    }
    out
}

/// Validation bound per validated epoch as CSV.
pub fn validation_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{VALID_HEADER}\n");
    for r in rows {
        if let (Some(e), Some(rc), Some(k)) = (r.valid_elbo, r.valid_recon, r.valid_kl) {
            out.push_str(&format!("{},{e},{rc},{k}\n", r.epoch));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub code_version: String,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub dataset_fingerprint: String,
    /// Latest log Z estimate of the trained prior.
    pub log_z: Option<f64>,
}

impl RunManifest {
    /// Metric history with wall-clock times zeroed, for reproducibility checks.
    pub fn reproducible_metrics(&self) -> Vec<EpochMetrics> {
        self.metrics
            .iter()
            .map(|m| EpochMetrics {
                wall_time: 0.0,
                ..m.clone()
            })
            .collect()
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub manifest: RunManifest,
}

/// Fingerprint of all three splits.
pub fn splits_fingerprint(splits: &Splits) -> String {
    format!(
        "{}:{}:{}",
        splits.train.fingerprint(),
        splits.valid.fingerprint(),
        splits.test.fingerprint()
    )
}

pub fn model_checkpoint(model: &Model, manifest: &RunManifest) -> Result<Checkpoint> {
    Ok(Checkpoint {
        meta: serde_json::to_value(manifest)?,
        params: model.params.clone(),
    })
}

/// Model and run manifest stored by [`model_checkpoint`].
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model, RunManifest)> {
    let manifest: RunManifest = serde_json::from_value(ckpt.meta.clone())?;
    manifest.config.model.validate()?;
    let mut reference = Model::new(manifest.config.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    for (name, t) in reference.params.iter_mut() {
        let stored = ckpt.params.require(name)?;
        if stored.shape() != t.shape() {
            return Err(Error::shape("checkpoint tensor", stored.shape(), t.shape()));
        }
        *t = stored.clone();
    }
    if reference.params.len() != ckpt.params.len() {
        return Err(Error::Config("checkpoint holds parameters the model does not use".into()));
    }
    Ok((reference, manifest))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Current log Z estimate and the prior samples behind its gradient.
struct PriorState {
    log_z: f64,
    ess: f64,
    grad: Option<RbmMoments>,
    chains: Option<PersistentChains>,
}

fn refresh_prior(model: &Model, config: &TrainConfig, chains: Option<PersistentChains>, rng: &mut ChaCha8Rng) -> Result<PriorState> {
    let rbm = model.rbm().expect("RBM prior");
    let run = ais_samples(&rbm, &config.ais.schedule()?, rng)?;
    if run.result.degenerate {
        log::warn!("AIS effective sample size {:.1} is degenerate", run.result.ess);
    }
    let grad = match config.prior_samples {
        PriorSamples::AisWeighted => Some(weighted_grad_log_z(&run.states, &run.result.log_weights)?),
        PriorSamples::Persistent { .. } => None,
    };
    Ok(PriorState {
        log_z: run.result.log_z_estimate,
        ess: run.result.ess,
        grad,
        chains,
    })
}

/// Trains a fresh model on `splits.train`, validating on `splits.valid`.
/// With `out_dir`, writes checkpoints, `metrics.csv`, `validation.csv` and
/// `manifest.json` there.
pub fn train(splits: &Splits, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    match config.precision {
        Precision::F64 => train_with::<f64>(splits, config, out_dir),
        Precision::F32 => train_with::<f32>(splits, config, out_dir),
    }
}

fn train_with<T: Real>(splits: &Splits, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let dec = &config.model.decoder;
    if splits.train.is_empty() || splits.train.image_shape() != (dec.height, dec.width, dec.channels) {
        return Err(Error::Config(format!(
            "training images {:?} do not match the model's {}x{}x{}",
            splits.train.images.shape(),
            dec.height,
            dec.width,
            dec.channels
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut model = Model::new(config.model.clone(), &mut stream(config.seed, 0))?;
    let mut rng = stream(config.seed, 1);
    let mut adam = Adam::new(config.optimizer, &model.params)?;
    let head = dec.head;
    let dynamic = config.data.binarization == crate::data::Binarization::Dynamic;
    let static_train = if dynamic { None } else { Some(to_pixels(&splits.train.images, &head)?) };
    let valid = if splits.valid.is_empty() || config.valid_every == 0 {
        None
    } else {
        Some(to_pixels(&splits.valid.images, &head)?)
    };
    let rbm_prior = config.model.prior == PriorKind::Rbm;
    let mut prior = if rbm_prior {
        let chains = match config.prior_samples {
            PriorSamples::Persistent { chains, .. } => {
                let (m, k) = model.spec().rbm_sides();
                Some(PersistentChains::new(m, k, chains, &mut rng))
            }
            PriorSamples::AisWeighted => None,
        };
        Some(refresh_prior(&model, config, chains, &mut rng)?)
    } else {
        None
    };

    let mut manifest = RunManifest {
        config: config.clone(),
        seed: config.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        metrics: Vec::new(),
        checkpoints: Vec::new(),
        dataset_fingerprint: splits_fingerprint(splits),
        log_z: prior.as_ref().map(|p| p.log_z),
    };
    let n = splits.train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let horizon = config.kl_anneal_epochs * steps_per_epoch;
    let mut step = 0usize;
    let mut last_good: Option<PathBuf> = None;
    let opts_at = |step: usize| ElboOptions {
        tau: config.tau.tau_at(step),
        beta: kl_anneal_beta(step, horizon),
        path_derivative: config.path_derivative,
    };

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let pixels = match &static_train {
            Some(p) => p.clone(),
            None => to_pixels(&binarize(&splits.train.images, &mut rng), &head)?,
        };
        let epoch_data = Dataset {
            images: pixels,
            labels: None,
        };
        let (mut elbo, mut recon, mut kl) = (0.0, 0.0, 0.0);
        let (log_z_used, ess_used) = prior.as_ref().map_or((0.0, 0.0), |p| (p.log_z, p.ess));
        for idx in batches(n, config.batch_size, &mut rng) {
            let opts = opts_at(step);
            let x = epoch_data.gather(&idx);
            let noise = model.draw_noise(idx.len(), &mut rng);
            let log_z = match prior.as_mut() {
                None => None,
                Some(p) => {
                    if let (Some(chains), PriorSamples::Persistent { gibbs_steps, .. }) =
                        (p.chains.as_mut(), config.prior_samples)
                    {
                        chains.advance(&model.rbm().expect("RBM prior"), gibbs_steps, &mut rng);
                        p.grad = Some(grad_log_z(&chains.states)?);
                    }
                    Some(LogZ::with_grad(p.log_z, p.grad.clone().expect("prior samples")))
                }
            };
            let mut tape = Tape::<T>::new();
            let bound = model.params.bind(&mut tape, true);
            let obj = relaxed_elbo(&model, &mut tape, &bound, &x, log_z.as_ref(), &opts, &noise)?;
            let b = &obj.breakdown;
            let grads = model.params.gradients(&bound, &tape.backward(obj.loss)?);
            let grads_finite = grads.iter().all(|(_, g)| g.is_finite());
            if !b.total.is_finite() || !grads_finite {
                log::error!("non-finite objective at epoch {epoch}, step {step}: {b:?}");
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    last_good,
                });
            }
            adam.step(&mut model.params, &grads)?;
            let w = idx.len() as f64 / n as f64;
            elbo += w * b.total;
            recon += w * b.recon;
            kl += w * b.kl;
            step += 1;
        }
        adam.end_epoch();
        let last = opts_at(step.saturating_sub(1));
        if let Some(p) = prior.as_mut() {
            if epoch % config.ais_every == 0 {
                *p = refresh_prior(&model, config, p.chains.take(), &mut rng)?;
                manifest.log_z = Some(p.log_z);
            }
        }
        let mut row = EpochMetrics {
            epoch,
            elbo,
            recon,
            kl,
            beta: last.beta,
            tau: last.tau,
            log_z_est: log_z_used,
            ess: ess_used,
            wall_time: start.elapsed().as_secs_f64(),
            valid_elbo: None,
            valid_recon: None,
            valid_kl: None,
        };
        if let Some(v) = &valid {
            if epoch % config.valid_every == 0 {
                let log_z = prior.as_ref().map_or(0.0, |p| p.log_z);
                let r = iwae_loglik::<T>(&model, v, log_z, 1, 1, &mut rng)?;
                let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
                row.valid_elbo = Some(mean(&r.log_likelihood));
                row.valid_recon = Some(mean(&r.recon));
                row.valid_kl = Some(mean(&r.kl));
            }
        }
        log::info!(
            "epoch {epoch}: elbo {:.4} recon {:.4} kl {:.4} beta {:.3} valid {:?} ({:.1}s)",
            row.elbo,
            row.recon,
            row.kl,
            row.beta,
            row.valid_elbo,
            row.wall_time
        );
        manifest.metrics.push(row);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && epoch != config.epochs {
                let path = dir.join(format!("epoch-{epoch:04}.pvxl"));
                manifest.checkpoints.push(path.clone());
                model_checkpoint(&model, &manifest)?.save(&path)?;
                last_good = Some(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("final.pvxl");
        manifest.checkpoints.push(path.clone());
        model_checkpoint(&model, &manifest)?.save(&path)?;
        write(dir.join("metrics.csv"), metrics_csv(&manifest.metrics))?;
        write(dir.join("validation.csv"), validation_csv(&manifest.metrics))?;
        write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(TrainOutcome { model, manifest })
}

fn write(path: PathBuf, text: String) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Test-time estimates over a dataset, means per image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub k: usize,
    /// Importance weighted log-likelihood in nats.
    pub log_likelihood: f64,
    pub bpd: f64,
    /// Monte-Carlo KL of discrete posterior samples.
    pub kl: f64,
    pub recon: f64,
    pub log_z: f64,
    pub log_z_exact: bool,
}

pub const EVAL_HEADER: &str = "images,k,log_likelihood,bpd,kl,recon,log_z,log_z_exact";

impl EvalReport {
    pub fn csv(&self) -> String {
        format!(
            "{EVAL_HEADER}\n{},{},{},{},{},{},{},{}\n",
            self.images, self.k, self.log_likelihood, self.bpd, self.kl, self.recon, self.log_z, self.log_z_exact
        )
    }
}

/// log Z of the model's prior: exact when the latent count allows, AIS otherwise.
pub fn eval_log_z(model: &Model, ladder: &AisLadder, rng: &mut ChaCha8Rng) -> Result<(f64, bool)> {
    match model.rbm() {
        None => Ok((0.0, true)),
        Some(rbm) if rbm.m() + rbm.k() <= EXACT_EVAL_BITS => Ok((exact_log_z(&rbm)?, true)),
        Some(rbm) => Ok((ais_log_z(&rbm, &ladder.schedule()?, rng)?.log_z_estimate, false)),
    }
}

/// Importance weighted evaluation with `k` discrete samples per image.
pub fn evaluate<T: Real>(
    model: &Model,
    data: &Dataset,
    k: usize,
    chunk: usize,
    ladder: &AisLadder,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation needs at least one image"));
    }
    let (log_z, exact) = eval_log_z(model, ladder, rng)?;
    let x = to_pixels(&data.images, &model.config.decoder.head)?;
    let r = iwae_loglik::<T>(model, &x, log_z, k, chunk, rng)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (h, w, c) = data.image_shape();
    let ll = mean(&r.log_likelihood);
    Ok(EvalReport {
        images: data.len(),
        k,
        log_likelihood: ll,
        bpd: bits_per_dimension(ll, h * w * c)?,
        kl: mean(&r.kl),
        recon: mean(&r.recon),
        log_z,
        log_z_exact: exact,
    })
}
