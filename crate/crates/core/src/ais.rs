//! Annealed importance sampling for the RBM log-partition function.
//!
//! Intermediate targets are `p_β(v, h) ∝ exp(a·v + b·h + β vᵀWh)`. The base
//! `β = 0` is the factorized model, sampled exactly. Every chain owns a
//! `Xoshiro256PlusPlus` stream seeded from the caller's generator, so results depend only
//! on that generator's state.

use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus as ChainRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rbm::{
    gibbs_block_step_tempered, log_sum_exp, sample_bits, GroupTable, RbmParams, RbmState, Side, GROUP_BITS,
};

/// Fraction of the chain count below which the effective sample size is
/// reported as degenerate.
pub const DEGENERATE_ESS_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    #[default]
    Linear,
    /// Linear up to 0.5 over the first half of the ladder, then `1 - β`
    /// shrinking geometrically from 0.5 to `1 / n_steps` before the final rung.
    GeometricTail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AisSchedule {
    pub betas: Vec<f64>,
    pub updates_per_step: usize,
    pub n_chains: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AisResult {
    pub log_z_estimate: f64,
    pub log_weights: Vec<f64>,
    pub ess: f64,
    /// `ess < DEGENERATE_ESS_FRACTION * n_chains`
    pub degenerate: bool,
}

/// Final-rung states alongside the estimate they produced.
#[derive(Clone, Debug)]
pub struct AisRun {
    pub result: AisResult,
    pub states: Vec<RbmState>,
}

impl AisSchedule {
    pub fn new(n_steps: usize, updates_per_step: usize, n_chains: usize, spacing: Spacing) -> Result<Self> {
        if n_steps == 0 || updates_per_step == 0 || n_chains == 0 {
            return Err(Error::invalid(format!(
                "AIS schedule needs positive counts, got steps={n_steps} updates={updates_per_step} chains={n_chains}"
            )));
        }
        let t = n_steps as f64;
        let betas = (0..=n_steps)
            .map(|i| match spacing {
                _ if i == n_steps => 1.0,
                Spacing::Linear => i as f64 / t,
                Spacing::GeometricTail => {
                    let half = n_steps / 2;
                    if i <= half || n_steps < 4 {
                        0.5 * i as f64 / half.max(1) as f64
                    } else {
                        let s = (i - half) as f64 / (n_steps - half) as f64;
                        1.0 - 0.5 * (1.0 / (0.5 * t)).powf(s)
                    }
                }
            })
            .map(|b: f64| b.min(1.0))
            .collect();
        Ok(AisSchedule {
            betas,
            updates_per_step,
            n_chains,
        })
    }

    /// Explicit ladder; must start at 0, end at 1 and be nondecreasing.
    pub fn from_betas(betas: Vec<f64>, updates_per_step: usize, n_chains: usize) -> Result<Self> {
        let ok = betas.len() >= 2
            && betas[0] == 0.0
            && *betas.last().unwrap() == 1.0
            && betas.windows(2).all(|w| w[0] <= w[1]);
        if !ok || updates_per_step == 0 || n_chains == 0 {
            return Err(Error::invalid("AIS ladder must run monotonically from 0 to 1"));
        }
        Ok(AisSchedule {
            betas,
            updates_per_step,
            n_chains,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len() - 1
    }
}

/// `(Σw)² / Σw²` evaluated from log-weights.
pub fn effective_sample_size(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(Error::invalid("effective sample size of an empty weight set"));
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let (s1, s2) = log_weights.iter().fold((0.0, 0.0), |(s1, s2), lw| {
        let w = (lw - max).exp();
        (s1 + w, s2 + w * w)
    });
    Ok(s1 * s1 / s2)
}

pub fn ais_log_z(params: &RbmParams, schedule: &AisSchedule, rng: &mut impl Rng) -> Result<AisResult> {
    Ok(ais_samples(params, schedule, rng)?.result)
}

/// Runs the ladder and also returns the final states, which together with
/// `result.log_weights` form a self-normalized weighted sample of the model.
pub fn ais_samples(params: &RbmParams, schedule: &AisSchedule, rng: &mut impl Rng) -> Result<AisRun> {
    ais_samples_with(params, schedule, rng, SamplerPath::Auto)
}

/// Which Gibbs implementation drives the chains. Both consume each chain's
/// stream identically and produce bit-identical runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplerPath {
    /// Tables when the RBM is small and the run long enough to amortize them.
    #[default]
    Auto,
    /// Direct evaluation of the conditionals for every update.
    Generic,
    /// Per-rung alias tables indexed by the opposite side's state (sides of
    /// at most 12 units).
    Table,
}

pub fn ais_samples_with(
    params: &RbmParams,
    schedule: &AisSchedule,
    rng: &mut impl Rng,
    path: SamplerPath,
) -> Result<AisRun> {
    AisSchedule::from_betas(schedule.betas.clone(), schedule.updates_per_step, schedule.n_chains)?;
    let seeds: Vec<u64> = (0..schedule.n_chains).map(|_| rng.next_u64()).collect();
    let use_table = match path {
        SamplerPath::Generic => false,
        SamplerPath::Table => true,
        SamplerPath::Auto => table_is_worthwhile(params, schedule),
    };
    let (log_weights, states) = if use_table {
        if !table_fits(params) {
            return Err(Error::invalid("RBM too large for the lookup-table sampler"));
        }
        run_table(params, schedule, &seeds)
    } else {
        run_generic(params, schedule, &seeds)
    };
    let ess = effective_sample_size(&log_weights)?;
    let n = log_weights.len() as f64;
    let result = AisResult {
        log_z_estimate: params.base_log_z() + log_sum_exp(&log_weights) - n.ln(),
        ess,
        degenerate: ess < DEGENERATE_ESS_FRACTION * n,
        log_weights,
    };
    Ok(AisRun { result, states })
}

const TABLE_MAX_SIDE: usize = 12;
const INTERLEAVE: usize = 8;

fn table_fits(params: &RbmParams) -> bool {
    params.m() <= TABLE_MAX_SIDE && params.k() <= TABLE_MAX_SIDE
}

/// Rebuilding per-rung tables costs roughly `4 (2^m k + 2^k m)` operations;
/// use them only when that is small next to the sampling work they replace.
fn table_is_worthwhile(params: &RbmParams, schedule: &AisSchedule) -> bool {
    let (m, k) = (params.m(), params.k());
    let table = (1usize << m) * k + (1usize << k) * m;
    table_fits(params) && 16 * table <= schedule.n_chains * schedule.updates_per_step * (m + k)
}

fn run_generic(params: &RbmParams, schedule: &AisSchedule, seeds: &[u64]) -> (Vec<f64>, Vec<RbmState>) {
    let (m, k) = (params.m(), params.k());
    let mut log_weights = Vec::with_capacity(seeds.len());
    let mut states = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChainRng::seed_from_u64(seed);
        let mut s = RbmState::zeros(m, k);
        sample_bits(&params.a, &mut s.left, &mut rng);
        sample_bits(&params.b, &mut s.right, &mut rng);
        let mut lw = 0.0;
        for pair in schedule.betas.windows(2) {
            lw += (pair[1] - pair[0]) * params.interaction(&s.left, &s.right);
            for _ in 0..schedule.updates_per_step {
                gibbs_block_step_tempered(params, pair[1], &mut s, &mut rng);
            }
        }
        log_weights.push(lw);
        states.push(s);
    }
    (log_weights, states)
}

/// Per-state alias tables for one side, rebuilt at every rung from
/// the same arithmetic the generic path uses.
struct SideTable {
    /// `2^n_other x n` unscaled sums, fixed for the run.
    sums: Vec<f64>,
    /// `2^n_other x groups` table rows.
    tables: Vec<GroupTable>,
    n: usize,
    groups: usize,
}

impl SideTable {
    fn new(params: &RbmParams, side: Side) -> Self {
        let (n, n_other) = match side {
            Side::Left => (params.m(), params.k()),
            Side::Right => (params.k(), params.m()),
        };
        let mut sums = vec![0.0; (1 << n_other) * n];
        for (bits, row) in sums.chunks_mut(n).enumerate() {
            let other = unpack(bits as u64, n_other);
            params.side_sums(side, &other, row);
        }
        let groups = n.div_ceil(GROUP_BITS);
        SideTable {
            tables: vec![GroupTable::default(); (1 << n_other) * groups],
            sums,
            n,
            groups,
        }
    }

    fn set_beta(&mut self, bias: &[f64], beta: f64) {
        let mut field = vec![0.0; self.n];
        for (row_t, row_s) in self.tables.chunks_mut(self.groups).zip(self.sums.chunks(self.n)) {
            for ((f, &s), &c) in field.iter_mut().zip(row_s).zip(bias) {
                *f = c + beta * s;
            }
            for (t, fs) in row_t.iter_mut().zip(field.chunks(GROUP_BITS)) {
                *t = GroupTable::new(fs);
            }
        }
    }

    #[inline(always)]
    fn sample(&self, other: usize, rng: &mut ChainRng) -> usize {
        sample_row(&self.tables[other * self.groups..(other + 1) * self.groups], rng)
    }
}

#[inline(always)]
fn sample_row(row: &[GroupTable], rng: &mut ChainRng) -> usize {
    let mut bits = 0usize;
    let mut r = 0u64;
    for (g, t) in row.iter().enumerate() {
        if g % 2 == 0 {
            r = rng.next_u64();
        }
        bits |= t.pick((r >> (32 * (g % 2))) as u32) << (g * GROUP_BITS);
    }
    bits
}

fn unpack(bits: u64, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((bits >> i) & 1) as f64).collect()
}

fn run_table(params: &RbmParams, schedule: &AisSchedule, seeds: &[u64]) -> (Vec<f64>, Vec<RbmState>) {
    let (m, k) = (params.m(), params.k());
    let n = seeds.len();
    let mut rngs: Vec<ChainRng> = seeds.iter().map(|&s| ChainRng::seed_from_u64(s)).collect();
    let base = |bias: &[f64]| {
        bias.chunks(GROUP_BITS).map(GroupTable::new).collect::<Vec<_>>()
    };
    let (base_left, base_right) = (base(&params.a), base(&params.b));
    let mut v = vec![0usize; n];
    let mut h = vec![0usize; n];
    for c in 0..n {
        v[c] = sample_row(&base_left, &mut rngs[c]);
        h[c] = sample_row(&base_right, &mut rngs[c]);
    }
    let interaction: Vec<f64> = (0..1u64 << (m + k))
        .map(|idx| params.interaction(&unpack(idx >> k, m), &unpack(idx & ((1 << k) - 1), k)))
        .collect();
    let mut right = SideTable::new(params, Side::Right);
    let mut left = SideTable::new(params, Side::Left);
    let mut log_weights = vec![0.0; n];
    for pair in schedule.betas.windows(2) {
        let step = pair[1] - pair[0];
        right.set_beta(&params.b, pair[1]);
        left.set_beta(&params.a, pair[1]);
        // Chains advance in small lockstep blocks so their independent
        // dependency chains overlap; each chain still consumes only its own
        // stream, in the same order as the generic path.
        for start in (0..n).step_by(INTERLEAVE) {
            let end = (start + INTERLEAVE).min(n);
            for c in start..end {
                log_weights[c] += step * interaction[(v[c] << k) | h[c]];
            }
            let (vb, hb, rb) = (&mut v[start..end], &mut h[start..end], &mut rngs[start..end]);
            for _ in 0..schedule.updates_per_step {
                for ((vc, hc), rng) in vb.iter().zip(hb.iter_mut()).zip(rb.iter_mut()) {
                    *hc = right.sample(*vc, rng);
                }
                for ((vc, hc), rng) in vb.iter_mut().zip(hb.iter()).zip(rb.iter_mut()) {
                    *vc = left.sample(*hc, rng);
                }
            }
        }
    }
    let states = v
        .iter()
        .zip(&h)
        .map(|(&vc, &hc)| RbmState::from_bits(m, k, vc as u64, hc as u64))
        .collect();
    (log_weights, states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_schedule() {
        let s = AisSchedule::new(4, 1, 10, Spacing::Linear).unwrap();
        assert_eq!(s.betas, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(AisSchedule::new(0, 1, 1, Spacing::Linear).is_err());
        assert!(AisSchedule::new(3, 0, 1, Spacing::Linear).is_err());
    }

    #[test]
    fn geometric_tail_is_monotone() {
        let s = AisSchedule::new(1000, 1, 1, Spacing::GeometricTail).unwrap();
        assert_eq!(s.betas[0], 0.0);
        assert_eq!(s.betas[500], 0.5);
        assert_eq!(*s.betas.last().unwrap(), 1.0);
        assert!(s.betas.windows(2).all(|w| w[0] <= w[1]));
        // finer steps near beta = 1
        assert!(s.betas[999] - s.betas[998] < s.betas[501] - s.betas[500]);
    }

    #[test]
    fn ess_examples() {
        assert_eq!(effective_sample_size(&[0.3; 8]).unwrap(), 8.0);
        let ess = effective_sample_size(&[0.0, -800.0, -900.0]).unwrap();
        assert!((ess - 1.0).abs() < 1e-12);
        let lw = [0.1, -1.3, 2.0, 0.7];
        let w: Vec<f64> = lw.iter().map(|x: &f64| x.exp()).collect();
        let direct = w.iter().sum::<f64>().powi(2) / w.iter().map(|x| x * x).sum::<f64>();
        assert!((effective_sample_size(&lw).unwrap() - direct).abs() < 1e-12);
        assert!(effective_sample_size(&[]).is_err());
    }

    #[test]
    fn table_path_is_bit_identical_to_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = RbmParams::uniform(5, 3, -1.0, 1.0, 2.0, &mut rng);
        let schedule = AisSchedule::new(20, 3, 17, Spacing::Linear).unwrap();
        let a = ais_samples_with(&params, &schedule, &mut ChaCha8Rng::seed_from_u64(5), SamplerPath::Generic).unwrap();
        let b = ais_samples_with(&params, &schedule, &mut ChaCha8Rng::seed_from_u64(5), SamplerPath::Table).unwrap();
        assert_eq!(a.result, b.result);
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn zero_couplings_give_exact_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = RbmParams::uniform(4, 6, -1.0, 1.0, 1.0, &mut rng);
        params.w.iter_mut().for_each(|w| *w = 0.0);
        let schedule = AisSchedule::new(10, 2, 50, Spacing::Linear).unwrap();
        let r = ais_log_z(&params, &schedule, &mut rng).unwrap();
        assert!(r.log_weights.iter().all(|&w| w == 0.0));
        assert!((r.log_z_estimate - params.base_log_z()).abs() < 1e-12);
        assert_eq!(r.ess, 50.0);
    }
}
