//! Finite-difference gradient suite over every differentiable primitive,
//! the pixel likelihoods, the relaxation and the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::likelihood::{Head, BIN_HALF_WIDTH};
use crate::model::{Model, ModelConfig, PriorKind, PRIOR_A, PRIOR_B, PRIOR_W};
use crate::objective::{relaxed_elbo, ElboOptions, LogZ};
use crate::params::Bound;
use crate::rbm::{exact_log_z, exact_moments, RbmParams};
use crate::relaxation::sample_zeta;
use crate::tensor::gradcheck::{finite_diff_check, GradCheckReport};
use crate::tensor::{Conv2dGeometry, Padding, Tape, Tensor, Var};

/// Relative-error threshold of the suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

pub type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Every differentiable tape primitive with its input shapes.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("add-broadcast", vec![vec![2, 3, 4], vec![4]], |t, p| t.add(p[0], p[1])),
        ("sub-broadcast", vec![vec![2, 1, 4], vec![2, 3, 1]], |t, p| t.sub(p[0], p[1])),
        ("mul-broadcast", vec![vec![2, 3, 4], vec![2, 1, 4]], |t, p| t.mul(p[0], p[1])),
        ("scale-offset", vec![vec![5]], |t, p| {
            let s = t.scale(p[0], -1.7);
            Ok(t.offset(s, 0.3))
        }),
        ("neg", vec![vec![5]], |t, p| Ok(t.neg(p[0]))),
        ("sigmoid", vec![vec![6]], |t, p| Ok(t.sigmoid(p[0]))),
        ("tanh", vec![vec![6]], |t, p| Ok(t.tanh(p[0]))),
        ("elu", vec![vec![6]], |t, p| Ok(t.elu(p[0]))),
        ("exp", vec![vec![6]], |t, p| Ok(t.exp(p[0]))),
        ("log", vec![vec![6]], |t, p| {
            let e = t.exp(p[0]);
            t.log(e)
        }),
        ("softplus", vec![vec![6]], |t, p| Ok(t.softplus(p[0]))),
        ("log-sigmoid", vec![vec![6]], |t, p| Ok(t.log_sigmoid(p[0]))),
        ("square", vec![vec![6]], |t, p| Ok(t.square(p[0]))),
        ("concat-elu", vec![vec![1, 2, 2, 3]], |t, p| t.concat_elu(p[0])),
        ("concat", vec![vec![2, 3], vec![2, 2]], |t, p| t.concat(&[p[0], p[1]], 1)),
        ("slice", vec![vec![2, 5, 3]], |t, p| t.slice(p[0], 1, 1, 3)),
        ("shift", vec![vec![1, 4, 4, 2]], |t, p| {
            let d = t.down_shift(p[0])?;
            t.right_shift(d)
        }),
        ("reshape-sum-axis", vec![vec![2, 6]], |t, p| {
            let r = t.reshape(p[0], &[2, 3, 2])?;
            t.sum_axis(r, 1)
        }),
        ("mean", vec![vec![2, 3]], |t, p| Ok(t.mean(p[0]))),
        ("log-sum-exp", vec![vec![3, 4, 2]], |t, p| t.log_sum_exp(p[0], 1)),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, p| t.matmul(p[0], p[1])),
        ("conv2d", vec![vec![2, 5, 4, 2], vec![2, 3, 2, 3]], |t, p| {
            t.conv2d(p[0], p[1], Conv2dGeometry::new(2, Padding::new(1, 0, 1, 1)))
        }),
        ("conv-transpose2d", vec![vec![1, 3, 3, 2], vec![2, 3, 3, 2]], |t, p| {
            t.conv_transpose2d(p[0], p[1], Conv2dGeometry::new(2, Padding::new(0, 1, 1, 1)), (6, 5))
        }),
        ("weight-norm", vec![vec![2, 2, 3, 4], vec![4]], |t, p| t.weight_norm(p[0], p[1])),
        ("clamp-min", vec![vec![6]], |t, p| Ok(t.clamp_min(p[0], -0.5))),
    ]
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Checks `build` through a fixed random linear read-out of its output.
fn check_readout(
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    params: &[Tensor<f64>],
    readout_seed: u64,
    epsilon: f64,
) -> Result<GradCheckReport> {
    finite_diff_check(
        |t, p| {
            let y = build(t, p)?;
            let mut r = ChaCha8Rng::seed_from_u64(readout_seed);
            let w = Tensor::from_fn(t.shape(y).to_vec(), |_| r.gen_range(-1.0..1.0));
            let wv = t.constant(w);
            let prod = t.mul(y, wv)?;
            Ok(t.sum(prod))
        },
        params,
        epsilon,
    )
}

fn toy_model(rng: &mut ChaCha8Rng) -> Result<Model> {
    let config = ModelConfig {
        decoder: DecoderConfig {
            height: 4,
            width: 4,
            channels: 1,
            resnets: 1,
            filters: 4,
            no_strides: false,
            head: Head::Bernoulli,
            z1: 2,
            z2: 1,
            z3_units: 1,
            z1_filters: 3,
            z1_map_channels: 2,
            z3_map_channels: 2,
        },
        encoder: EncoderConfig { filters: 4, stages: 1 },
        prior: PriorKind::Rbm,
        rbm_init_std: 0.5,
    };
    let mut model = Model::new(config, rng)?;
    // move away from the zero-initialized gains and biases
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    Ok(model)
}

/// Runs every case with `seed`; the end-to-end case uses a 4×4 toy model
/// with exact log Z and frozen noise.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, build) in primitive_cases() {
        let params: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let report = check_readout(build, &params, rng.gen(), 1e-4)?;
        out.push(GradCheckCase {
            name: name.to_string(),
            report,
        });
    }

    let centers = Tensor::from_fn([6], |i| [-1.0, -0.7, 0.0, 0.57, 1.0, -0.98][i]);
    let params = vec![random(&mut rng, &[6]), Tensor::from_fn([6], |_| rng.gen_range(-4.0..0.5))];
    let report = finite_diff_check(
        |t, p| {
            let lp = t.logistic_bin_log_prob(p[0], p[1], &centers, BIN_HALF_WIDTH)?;
            Ok(t.sum(lp))
        },
        &params,
        1e-5,
    )?;
    out.push(GradCheckCase {
        name: "logistic-bins".into(),
        report,
    });

    let bits = Tensor::from_fn([2, 3, 3, 1], |_| rng.gen_range(0..2) as f64);
    let report = finite_diff_check(
        |t, p| {
            let ll = Head::Bernoulli.log_likelihood(t, p[0], &bits)?;
            Ok(t.sum(ll))
        },
        &[random(&mut rng, &[2, 3, 3, 1])],
        1e-5,
    )?;
    out.push(GradCheckCase {
        name: "bernoulli-likelihood".into(),
        report,
    });

    let dlm = Head::Dlm { components: 2 };
    let pixels = Tensor::from_fn([1, 2, 2, 3], |i| [0.0, 255.0, 17.0, 128.0, 200.0, 3.0][i % 6]);
    let params = random(&mut rng, &[1, 2, 2, dlm.param_channels(3)]);
    let report = finite_diff_check(
        |t, p| {
            let ll = dlm.log_likelihood(t, p[0], &pixels)?;
            Ok(t.sum(ll))
        },
        &[params],
        1e-5,
    )?;
    out.push(GradCheckCase {
        name: "logistic-mixture-likelihood".into(),
        report,
    });

    let noise = Tensor::from_fn([3, 4], |_| rng.gen_range(0.05..0.95));
    let report = check_readout(
        |t, p| sample_zeta(t, p[0], &noise, 0.5),
        &[Tensor::from_fn([3, 4], |_| rng.gen_range(-2.0..2.0))],
        rng.gen(),
        1e-6,
    )?;
    out.push(GradCheckCase {
        name: "relaxed-sample".into(),
        report,
    });

    let model = toy_model(&mut rng)?;
    let x = Tensor::from_fn([2, 4, 4, 1], |_| rng.gen_range(0..2) as f64);
    let noise = model.draw_noise(2, &mut rng);
    // the path-derivative estimator is not the derivative of the loss, so the
    // full gradient is checked here
    let opts = ElboOptions {
        tau: 0.5,
        beta: 0.7,
        path_derivative: false,
    };
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let report = finite_diff_check(
        |tape, vars| {
            let bound = Bound::from_pairs(names.iter().map(|n| n.as_str()).zip(vars.iter().copied()));
            let get = |n: &str| -> Result<Vec<f64>> { Ok(tape.value(bound.var(n)?).to_f64_vec()) };
            let rbm = RbmParams {
                w: get(PRIOR_W)?,
                a: get(PRIOR_A)?,
                b: get(PRIOR_B)?,
            };
            let lz = LogZ::with_grad(exact_log_z(&rbm)?, exact_moments(&rbm)?);
            Ok(relaxed_elbo(&model, tape, &bound, &x, Some(&lz), &opts, &noise)?.loss)
        },
        &tensors,
        1e-6,
    )?;
    out.push(GradCheckCase {
        name: "relaxed-elbo-end-to-end".into(),
        report,
    });
    Ok(out)
}
