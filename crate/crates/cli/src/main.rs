use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use pvxl_core::ais::{ais_log_z, AisSchedule, Spacing};
use pvxl_core::checkpoint::Checkpoint;
use pvxl_core::data::{Dataset, Splits};
use pvxl_core::diagnostics::{gradcheck_suite, GRADCHECK_TOLERANCE};
use pvxl_core::image_io::Grid;
use pvxl_core::likelihood::Head;
use pvxl_core::metrics::{energy_distance, mutual_distance, rank_rows};
use pvxl_core::model::Model;
use pvxl_core::rbm::{exact_log_z, RbmParams};
use pvxl_core::sampling::{generate_from_prior, reconstruct, DEFAULT_GIBBS_STEPS};
use pvxl_core::train::{evaluate, model_from_checkpoint, splits_fingerprint, train, RunManifest, TrainConfig};
use pvxl_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Discrete-latent variational autoencoder with an RBM prior and an
/// autoregressive decoder.
#[derive(Parser, Debug)]
#[command(name = "pvxl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Importance weighted log-likelihood, bits per dimension and KL as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        k: usize,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Importance samples per forward pass.
        #[arg(long, default_value_t = 100)]
        chunk: usize,
        /// Evaluate only the first N images.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate image rows from prior samples, ranked by mutual distance.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 128)]
        latents: usize,
        #[arg(long, default_value_t = 8)]
        per_latent: usize,
        #[arg(long, default_value_t = DEFAULT_GIBBS_STEPS)]
        gibbs: usize,
        /// Image grid (.png, .pgm or .ppm).
        #[arg(long, default_value = "samples.png")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reconstruct images from posterior samples, ranked by energy distance
    /// to the source image.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        images: usize,
        #[arg(long, default_value_t = 8)]
        per_image: usize,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long, default_value = "reconstructions.png")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare AIS log Z estimates with exact enumeration on a random RBM.
    CheckAis {
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Comma-separated ladder lengths.
        #[arg(long, value_delimiter = ',', default_value = "1000,10000")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        updates: usize,
        #[arg(long, default_value_t = 5000)]
        chains: usize,
        /// Largest acceptable error of the longest ladder.
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

/// A check ran but did not pass.
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for I/O and file-format problems, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io { .. } | Error::Format { .. } | Error::Checksum { .. } | Error::Png(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

/// Seed from `PVXL_SEED` when set, otherwise `fallback`.
fn seed_override(fallback: u64) -> anyhow::Result<u64> {
    match std::env::var("PVXL_SEED") {
        Ok(v) => v.trim().parse().with_context(|| format!("PVXL_SEED={v} is not an unsigned integer")),
        Err(_) => Ok(fallback),
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { config, out } => {
            let mut config = TrainConfig::load(&config)?;
            config.seed = seed_override(config.seed)?;
            let splits = config.data.load()?;
            let outcome = train(&splits, &config, Some(&out))?;
            let last = outcome.manifest.metrics.last().expect("at least one epoch");
            println!("epoch,elbo,valid_elbo,kl");
            println!(
                "{},{},{},{}",
                last.epoch,
                last.elbo,
                last.valid_elbo.map_or(String::new(), |v| v.to_string()),
                last.kl
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            k,
            split,
            chunk,
            limit,
            precision,
            seed,
        } => {
            let (model, manifest) = load_model(&checkpoint)?;
            let data = limit_rows(pick(&load_splits(&manifest)?, split), limit);
            let mut rng = ChaCha8Rng::seed_from_u64(seed_override(seed)?);
            let ladder = manifest.config.eval_ais;
            let report = match precision {
                PrecisionArg::F64 => evaluate::<f64>(&model, &data, k, chunk, &ladder, &mut rng)?,
                PrecisionArg::F32 => evaluate::<f32>(&model, &data, k, chunk, &ladder, &mut rng)?,
            };
            print!("{}", report.csv());
            Ok(())
        }
        Command::Sample {
            checkpoint,
            latents,
            per_latent,
            gibbs,
            out,
            seed,
        } => {
            let (model, _) = load_model(&checkpoint)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed_override(seed)?);
            let images = generate_from_prior::<f64>(&model, latents, per_latent, gibbs, &mut rng)?;
            let rows = split_rows(&images, per_latent);
            let order = if per_latent >= 2 { rank_rows(&rows, None)? } else { (0..rows.len()).collect() };
            println!("rank,latent,mutual_distance");
            for (rank, &i) in order.iter().enumerate() {
                let d = if per_latent >= 2 { mutual_distance(&rows[i])?.to_string() } else { String::new() };
                println!("{rank},{i},{d}");
            }
            save_rows(&model, &order.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>(), per_latent, &out)
        }
        Command::Reconstruct {
            checkpoint,
            images,
            per_image,
            split,
            out,
            seed,
        } => {
            let (model, manifest) = load_model(&checkpoint)?;
            let data = limit_rows(pick(&load_splits(&manifest)?, split), Some(images));
            let x = pvxl_core::data::to_pixels(&data.images, &model.config.decoder.head)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed_override(seed)?);
            let rec = reconstruct::<f64>(&model, &x, per_image, &mut rng)?;
            let sources = split_rows(&x, 1);
            let rows = split_rows(&rec, per_image);
            let mut keys = Vec::with_capacity(rows.len());
            for (r, s) in rows.iter().zip(&sources) {
                keys.push(energy_distance(r, s)?);
            }
            // each row is compared with its own source image
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.sort_by(|&i, &j| keys[i].total_cmp(&keys[j]));
            println!("rank,image,energy_distance");
            let mut grid_rows = Vec::with_capacity(order.len());
            for (rank, &i) in order.iter().enumerate() {
                println!("{rank},{i},{}", keys[i]);
                grid_rows.push(concat_rows(&sources[i], &rows[i]));
            }
            save_rows(&model, &grid_rows, per_image + 1, &out)
        }
        Command::CheckAis {
            m,
            k,
            steps,
            updates,
            chains,
            tolerance,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_override(seed)?);
            let rbm = RbmParams::uniform(m, k, -1.0, 1.0, 1.0, &mut rng);
            let exact = exact_log_z(&rbm).ok();
            println!("steps,estimate,exact,abs_error,ess");
            let mut last_error = None;
            for &s in &steps {
                let schedule = AisSchedule::new(s, updates, chains, Spacing::Linear)?;
                let r = ais_log_z(&rbm, &schedule, &mut rng)?;
                let err = exact.map(|e| (r.log_z_estimate - e).abs());
                println!(
                    "{s},{},{},{},{}",
                    r.log_z_estimate,
                    exact.map_or(String::new(), |e| e.to_string()),
                    err.map_or(String::new(), |e| e.to_string()),
                    r.ess
                );
                last_error = err;
            }
            match last_error {
                Some(e) if e >= tolerance => {
                    Err(Failed(format!("AIS error {e} exceeds tolerance {tolerance}")).into())
                }
                _ => Ok(()),
            }
        }
        Command::Gradcheck { seed } => {
            let cases = gradcheck_suite(seed_override(seed)?)?;
            println!("case,coordinates,max_rel_error,passed");
            for c in &cases {
                println!("{},{},{},{}", c.name, c.report.coordinates, c.report.max_rel_error, c.passed());
            }
            let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failed(format!(
                    "relative error above {GRADCHECK_TOLERANCE} in: {}",
                    failed.join(", ")
                ))
                .into())
            }
        }
    }
}

fn load_model(path: &Path) -> anyhow::Result<(Model, RunManifest)> {
    let ckpt = Checkpoint::load(path)?;
    Ok(model_from_checkpoint(&ckpt)?)
}

/// Splits recreated from the run's data settings, checked against the
/// fingerprint recorded at training time.
fn load_splits(manifest: &RunManifest) -> anyhow::Result<Splits> {
    let splits = manifest.config.data.load()?;
    if splits_fingerprint(&splits) != manifest.dataset_fingerprint {
        bail!(Failed("dataset differs from the one the checkpoint was trained on".into()));
    }
    Ok(splits)
}

fn pick(splits: &Splits, name: SplitName) -> Dataset {
    match name {
        SplitName::Train => splits.train.clone(),
        SplitName::Valid => splits.valid.clone(),
        SplitName::Test => splits.test.clone(),
    }
}

fn limit_rows(data: Dataset, limit: Option<usize>) -> Dataset {
    match limit {
        Some(n) if n < data.len() => data.subset(&(0..n).collect::<Vec<_>>()),
        _ => data,
    }
}

/// Consecutive groups of `per` images.
fn split_rows(images: &Tensor<f64>, per: usize) -> Vec<Tensor<f64>> {
    let s = images.shape();
    let size: usize = s[1..].iter().product();
    images
        .data()
        .chunks(size * per)
        .map(|c| {
            let mut shape = s.to_vec();
            shape[0] = c.len() / size;
            Tensor::new(shape, c.to_vec()).expect("consistent chunk")
        })
        .collect()
}

fn concat_rows(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data).expect("matching image shapes")
}

fn save_rows(model: &Model, rows: &[Tensor<f64>], cols: usize, out: &Path) -> anyhow::Result<()> {
    if rows.is_empty() {
        bail!(Failed("no images to write".into()));
    }
    let all = rows.iter().skip(1).fold(rows[0].clone(), |acc, r| concat_rows(&acc, r));
    let max = match model.config.decoder.head {
        Head::Bernoulli => 1.0,
        Head::Dlm { .. } => 255.0,
    };
    Grid::new(&all, cols, max)?.save(out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}
