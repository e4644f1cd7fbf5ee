//! Bipartite restricted Boltzmann machine used as the latent prior.
//!
//! Energy convention: `E(v, h) = -a·v - b·h - vᵀ W h`, `p(v, h) ∝ exp(-E)`.
//! `v` is the left side (length `m`), `h` the right side (length `k`). States
//! are stored as `f64` so relaxed values in `[0, 1]` plug into the same
//! bilinear energy as bits.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest `m + k` accepted by [`exact_log_z`].
pub const EXACT_LOG_Z_MAX_BITS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbmParams {
    /// Row-major `m x k` couplings.
    pub w: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RbmState {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

/// Moments `(E[v hᵀ], E[v], E[h])`, which are also `∂ log Z / ∂(W, a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RbmMoments {
    pub w: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl RbmParams {
    pub fn new(m: usize, k: usize, w: Vec<f64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if m == 0 || k == 0 {
            return Err(Error::invalid("RBM sides must be non-empty"));
        }
        if w.len() != m * k || a.len() != m || b.len() != k {
            return Err(Error::shape("rbm", &[w.len(), a.len(), b.len()], &[m * k, m, k]));
        }
        let p = RbmParams { w, a, b };
        if !p.w.iter().chain(&p.a).chain(&p.b).all(|x| x.is_finite()) {
            return Err(Error::invalid("RBM parameters must be finite"));
        }
        Ok(p)
    }

    pub fn zeros(m: usize, k: usize) -> Self {
        RbmParams {
            w: vec![0.0; m * k],
            a: vec![0.0; m],
            b: vec![0.0; k],
        }
    }

    /// `W ~ Normal(0, std)`, zero biases.
    pub fn init(m: usize, k: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut p = Self::zeros(m, k);
        p.w.iter_mut().for_each(|x| *x = normal.sample(rng));
        p
    }

    /// Every entry of `W`, `a`, `b` drawn from `Uniform[lo, hi)`, then `W` multiplied by `w_scale`.
    pub fn uniform(m: usize, k: usize, lo: f64, hi: f64, w_scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(m, k);
        for x in p.w.iter_mut() {
            *x = rng.gen_range(lo..hi) * w_scale;
        }
        for x in p.a.iter_mut().chain(p.b.iter_mut()) {
            *x = rng.gen_range(lo..hi);
        }
        p
    }

    pub fn m(&self) -> usize {
        self.a.len()
    }

    pub fn k(&self) -> usize {
        self.b.len()
    }

    pub fn w_at(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.k() + j]
    }

    pub fn w_tensor(&self) -> Tensor<f64> {
        Tensor::new([self.m(), self.k()], self.w.clone()).expect("consistent shape")
    }

    fn check_state(&self, s: &RbmState) -> Result<()> {
        if s.left.len() != self.m() || s.right.len() != self.k() {
            return Err(Error::shape("rbm state", &[s.left.len(), s.right.len()], &[self.m(), self.k()]));
        }
        Ok(())
    }

    /// `vᵀ W h`.
    pub fn interaction(&self, v: &[f64], h: &[f64]) -> f64 {
        let k = self.k();
        v.iter()
            .enumerate()
            .map(|(i, &vi)| vi * self.w[i * k..(i + 1) * k].iter().zip(h).map(|(w, h)| w * h).sum::<f64>())
            .sum()
    }

    /// Log-partition of the factorized (`W = 0`) model.
    pub fn base_log_z(&self) -> f64 {
        self.a.iter().chain(&self.b).map(|&x| softplus(x)).sum()
    }

    /// Unscaled input to one side from the other: `W h` for the left side,
    /// `Wᵀ v` for the right side.
    pub fn side_sums(&self, side: Side, other: &[f64], out: &mut [f64]) {
        let k = self.k();
        match side {
            Side::Right => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (i, &vi) in other.iter().enumerate() {
                    if vi != 0.0 {
                        for (s, &w) in out.iter_mut().zip(&self.w[i * k..(i + 1) * k]) {
                            *s += vi * w;
                        }
                    }
                }
            }
            Side::Left => {
                for (i, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (&w, &hj) in self.w[i * k..(i + 1) * k].iter().zip(other) {
                        if hj != 0.0 {
                            s += hj * w;
                        }
                    }
                    *o = s;
                }
            }
        }
    }

    pub fn bias(&self, side: Side) -> &[f64] {
        match side {
            Side::Left => &self.a,
            Side::Right => &self.b,
        }
    }

    /// Activation of one side given the other under the tempered model:
    /// `bias + beta * side_sums`.
    pub fn field(&self, side: Side, beta: f64, other: &[f64], out: &mut [f64]) {
        self.side_sums(side, other, out);
        for (o, &c) in out.iter_mut().zip(self.bias(side)) {
            *o = c + beta * *o;
        }
    }
}

impl RbmState {
    pub fn zeros(m: usize, k: usize) -> Self {
        RbmState {
            left: vec![0.0; m],
            right: vec![0.0; k],
        }
    }

    /// Decodes a state index: bit `i` of `v_bits` is `v_i`, bit `j` of `h_bits` is `h_j`.
    pub fn from_bits(m: usize, k: usize, v_bits: u64, h_bits: u64) -> Self {
        RbmState {
            left: (0..m).map(|i| ((v_bits >> i) & 1) as f64).collect(),
            right: (0..k).map(|j| ((h_bits >> j) & 1) as f64).collect(),
        }
    }

    /// Inverse of [`RbmState::from_bits`] for binary states.
    pub fn to_bits(&self) -> (u64, u64) {
        let pack = |xs: &[f64]| xs.iter().enumerate().fold(0u64, |acc, (i, &x)| acc | (((x > 0.5) as u64) << i));
        (pack(&self.left), pack(&self.right))
    }

    /// Left values followed by right values.
    pub fn concat(&self) -> Vec<f64> {
        self.left.iter().chain(&self.right).copied().collect()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn energy(params: &RbmParams, state: &RbmState) -> Result<f64> {
    params.check_state(state)?;
    let lin: f64 = params.a.iter().zip(&state.left).map(|(a, v)| a * v).sum::<f64>()
        + params.b.iter().zip(&state.right).map(|(b, h)| b * h).sum::<f64>();
    Ok(-lin - params.interaction(&state.left, &state.right))
}

/// `-E(state) - log_z`.
pub fn log_prior(params: &RbmParams, state: &RbmState, log_z: f64) -> Result<f64> {
    Ok(-energy(params, state)? - log_z)
}

fn check_enumerable(params: &RbmParams) -> Result<()> {
    let bits = params.m() + params.k();
    if bits > EXACT_LOG_Z_MAX_BITS {
        return Err(Error::TooLarge {
            bits,
            bound: EXACT_LOG_Z_MAX_BITS,
        });
    }
    Ok(())
}

/// Per left state `v`: `a·v + Σ_j softplus(b_j + (Wᵀv)_j)`, the log of the
/// right side summed out analytically.
fn left_marginal_terms(params: &RbmParams) -> Vec<f64> {
    let (m, k) = (params.m(), params.k());
    let mut field = vec![0.0; k];
    (0..1u64 << m)
        .map(|bits| {
            let v = RbmState::from_bits(m, 0, bits, 0).left;
            params.field(Side::Right, 1.0, &v, &mut field);
            params.a.iter().zip(&v).map(|(a, v)| a * v).sum::<f64>() + field.iter().map(|&f| softplus(f)).sum::<f64>()
        })
        .collect()
}

/// Exact log-partition, summing the right side analytically so only `2^m`
/// terms are enumerated.
pub fn exact_log_z(params: &RbmParams) -> Result<f64> {
    check_enumerable(params)?;
    Ok(log_sum_exp(&left_marginal_terms(params)))
}

/// Exact `(E[v hᵀ], E[v], E[h])` under the model, by the same enumeration as
/// [`exact_log_z`].
pub fn exact_moments(params: &RbmParams) -> Result<RbmMoments> {
    check_enumerable(params)?;
    let (m, k) = (params.m(), params.k());
    let terms = left_marginal_terms(params);
    let log_z = log_sum_exp(&terms);
    let mut out = RbmMoments {
        w: vec![0.0; m * k],
        a: vec![0.0; m],
        b: vec![0.0; k],
    };
    let mut field = vec![0.0; k];
    for (bits, t) in terms.iter().enumerate() {
        let p = (t - log_z).exp();
        let v = RbmState::from_bits(m, 0, bits as u64, 0).left;
        params.field(Side::Right, 1.0, &v, &mut field);
        let eh: Vec<f64> = field.iter().map(|&f| sigmoid(f)).collect();
        for i in 0..m {
            if v[i] != 0.0 {
                out.a[i] += p;
                for j in 0..k {
                    out.w[i * k + j] += p * eh[j];
                }
            }
        }
        for j in 0..k {
            out.b[j] += p * eh[j];
        }
    }
    Ok(out)
}

/// Probability of every joint state, indexed by `v_bits << k | h_bits`.
pub fn exact_distribution(params: &RbmParams) -> Result<Vec<f64>> {
    let (m, k) = (params.m(), params.k());
    if m + k > 20 {
        return Err(Error::TooLarge { bits: m + k, bound: 20 });
    }
    let log_z = exact_log_z(params)?;
    let mut probs = Vec::with_capacity(1 << (m + k));
    for v in 0..1u64 << m {
        for h in 0..1u64 << k {
            probs.push(log_prior(params, &RbmState::from_bits(m, k, v, h), log_z)?.exp());
        }
    }
    Ok(probs)
}

/// Bits sampled jointly from one 32-bit uniform.
pub(crate) const GROUP_BITS: usize = 4;
const GROUP_CONFIGS: usize = 1 << GROUP_BITS;
/// Probability mass per alias slot, in units of `2^-32`.
const SLOT_MASS: i64 = 1 << (32 - GROUP_BITS);

/// Walker alias table over the joint configurations of up to four
/// independent bits. A 32-bit uniform picks a slot with its top four bits and
/// accepts the slot when the remaining 28 bits fall below `accept`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub(crate) struct GroupTable {
    accept: [u32; GROUP_CONFIGS],
    alias: [u8; GROUP_CONFIGS],
}

impl GroupTable {
    /// Table for components with activations `field` (config bit `i` is
    /// component `i`). Configuration masses are rounded to multiples of
    /// `2^-32` summing to exactly one, then split with integer arithmetic.
    pub(crate) fn new(field: &[f64]) -> Self {
        let mut probs = [0.0f64; GROUP_CONFIGS];
        probs[0] = 1.0;
        for (i, &f) in field.iter().enumerate() {
            let (p, q) = (sigmoid(f), sigmoid(-f));
            for c in 0..1 << i {
                probs[c | 1 << i] = probs[c] * p;
                probs[c] *= q;
            }
        }
        let mut mass = [0i64; GROUP_CONFIGS];
        for c in 0..1 << field.len() {
            mass[c] = (probs[c] * 4_294_967_296.0).round() as i64;
        }
        let total: i64 = mass.iter().sum();
        let largest = (0..GROUP_CONFIGS).fold(0, |best, c| if mass[c] > mass[best] { c } else { best });
        mass[largest] += (1i64 << 32) - total;

        let mut table = GroupTable::default();
        let (mut small, mut large) = ([0u8; GROUP_CONFIGS], [0u8; GROUP_CONFIGS]);
        let (mut ns, mut nl) = (0, 0);
        for (c, &m) in mass.iter().enumerate() {
            if m < SLOT_MASS {
                small[ns] = c as u8;
                ns += 1;
            } else {
                large[nl] = c as u8;
                nl += 1;
            }
        }
        while ns > 0 && nl > 0 {
            ns -= 1;
            let s = small[ns] as usize;
            let l = large[nl - 1] as usize;
            table.accept[s] = mass[s] as u32;
            table.alias[s] = l as u8;
            mass[l] -= SLOT_MASS - mass[s];
            if mass[l] < SLOT_MASS {
                nl -= 1;
                small[ns] = l as u8;
                ns += 1;
            }
        }
        for &c in large[..nl].iter().chain(&small[..ns]) {
            table.accept[c as usize] = SLOT_MASS as u32;
            table.alias[c as usize] = c;
        }
        table
    }

    /// Configuration selected by the uniform draw `x`.
    #[inline(always)]
    pub(crate) fn pick(&self, x: u32) -> usize {
        let slot = (x >> (32 - GROUP_BITS)) as usize;
        let keep = ((x & (SLOT_MASS as u32 - 1)) < self.accept[slot]) as usize;
        // branch-free select: the outcome is a coin flip the predictor cannot learn
        let alias = self.alias[slot] as usize;
        alias ^ ((alias ^ slot) & keep.wrapping_neg())
    }

    /// Exact probability of each configuration, in units of `2^-32`.
    #[cfg(test)]
    fn masses(&self) -> [i64; GROUP_CONFIGS] {
        let mut out = [0i64; GROUP_CONFIGS];
        for slot in 0..GROUP_CONFIGS {
            let acc = self.accept[slot] as i64;
            out[slot] += acc;
            out[self.alias[slot] as usize] += SLOT_MASS - acc;
        }
        out
    }
}

/// Samples `out[j] ~ Bernoulli(sigmoid(field[j]))` independently, four
/// components per 32-bit uniform, two groups per 64-bit draw.
pub(crate) fn sample_bits(field: &[f64], out: &mut [f64], rng: &mut impl Rng) {
    let mut r = 0u64;
    for (g, (fs, os)) in field.chunks(GROUP_BITS).zip(out.chunks_mut(GROUP_BITS)).enumerate() {
        if g % 2 == 0 {
            r = rng.next_u64();
        }
        let c = GroupTable::new(fs).pick((r >> (32 * (g % 2))) as u32);
        for (i, o) in os.iter_mut().enumerate() {
            *o = ((c >> i) & 1) as f64;
        }
    }
}

/// One block alternation of the tempered model `p_β ∝ exp(a·v + b·h + β vᵀWh)`:
/// right side given left, then left given right.
pub fn gibbs_block_step_tempered(params: &RbmParams, beta: f64, state: &mut RbmState, rng: &mut impl Rng) {
    let mut field = vec![0.0; params.k().max(params.m())];
    let k = params.k();
    params.field(Side::Right, beta, &state.left, &mut field[..k]);
    sample_bits(&field[..k], &mut state.right, rng);
    let m = params.m();
    params.field(Side::Left, beta, &state.right, &mut field[..m]);
    sample_bits(&field[..m], &mut state.left, rng);
}

pub fn gibbs_block_step(params: &RbmParams, state: &mut RbmState, rng: &mut impl Rng) {
    gibbs_block_step_tempered(params, 1.0, state, rng);
}

/// Left side drawn from `Bernoulli(0.5)`, right side empty until the first step.
pub fn random_state(m: usize, k: usize, rng: &mut impl Rng) -> RbmState {
    let mut s = RbmState::zeros(m, k);
    for x in s.left.iter_mut().chain(s.right.iter_mut()) {
        *x = rng.gen_bool(0.5) as u8 as f64;
    }
    s
}

/// `n_chains` independent chains from `Bernoulli(0.5)` starts, each run for
/// `burn_in + n_steps` alternations; returns the final states.
pub fn gibbs_chain(
    params: &RbmParams,
    n_steps: usize,
    n_chains: usize,
    burn_in: usize,
    rng: &mut impl Rng,
) -> Result<Vec<RbmState>> {
    if n_steps == 0 {
        return Err(Error::invalid("gibbs_chain needs at least one step"));
    }
    let mut states = Vec::with_capacity(n_chains);
    for _ in 0..n_chains {
        let mut s = random_state(params.m(), params.k(), rng);
        for _ in 0..burn_in + n_steps {
            gibbs_block_step(params, &mut s, rng);
        }
        states.push(s);
    }
    Ok(states)
}

/// Unweighted Monte-Carlo estimate of `∂ log Z`.
pub fn grad_log_z(samples: &[RbmState]) -> Result<RbmMoments> {
    weighted_grad_log_z(samples, &vec![0.0; samples.len()])
}

/// Self-normalized importance-weighted estimate of `∂ log Z`.
pub fn weighted_grad_log_z(samples: &[RbmState], log_weights: &[f64]) -> Result<RbmMoments> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty sample set"))?;
    if log_weights.len() != samples.len() {
        return Err(Error::shape("weighted_grad_log_z", &[samples.len()], &[log_weights.len()]));
    }
    let (m, k) = (first.left.len(), first.right.len());
    let lse = log_sum_exp(log_weights);
    let mut out = RbmMoments {
        w: vec![0.0; m * k],
        a: vec![0.0; m],
        b: vec![0.0; k],
    };
    for (s, lw) in samples.iter().zip(log_weights) {
        let p = (lw - lse).exp();
        for i in 0..m {
            let pv = p * s.left[i];
            out.a[i] += pv;
            if pv != 0.0 {
                for j in 0..k {
                    out.w[i * k + j] += pv * s.right[j];
                }
            }
        }
        for j in 0..k {
            out.b[j] += p * s.right[j];
        }
    }
    Ok(out)
}

/// Chains carried across training steps.
#[derive(Clone, Debug)]
pub struct PersistentChains {
    pub states: Vec<RbmState>,
}

impl PersistentChains {
    pub fn new(m: usize, k: usize, n_chains: usize, rng: &mut impl Rng) -> Self {
        PersistentChains {
            states: (0..n_chains).map(|_| random_state(m, k, rng)).collect(),
        }
    }

    pub fn advance(&mut self, params: &RbmParams, steps: usize, rng: &mut impl Rng) {
        for s in &mut self.states {
            for _ in 0..steps {
                gibbs_block_step(params, s, rng);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn energy_examples() {
        let p = RbmParams::zeros(3, 2);
        let s = RbmState::from_bits(3, 2, 0b101, 0b10);
        assert_eq!(energy(&p, &s).unwrap(), 0.0);
        let p = RbmParams::new(1, 1, vec![2.0], vec![1.0], vec![-1.0]).unwrap();
        assert_eq!(energy(&p, &RbmState::from_bits(1, 1, 1, 1)).unwrap(), -2.0);
        assert!(energy(&p, &RbmState::zeros(2, 1)).is_err());
    }

    #[test]
    fn exact_log_z_closed_forms() {
        let p = RbmParams::zeros(2, 2);
        assert!((exact_log_z(&p).unwrap() - 4.0 * 2f64.ln()).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = RbmParams::uniform(3, 4, -2.0, 2.0, 1.0, &mut rng);
        p.w.iter_mut().for_each(|w| *w = 0.0);
        assert!((exact_log_z(&p).unwrap() - p.base_log_z()).abs() < 1e-12);
        assert!(matches!(exact_log_z(&RbmParams::zeros(13, 12)), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn log_prior_examples() {
        let p = RbmParams::zeros(1, 1);
        let lz = exact_log_z(&p).unwrap();
        let lp = log_prior(&p, &RbmState::from_bits(1, 1, 1, 0), lz).unwrap();
        assert!((lp + 2.0 * 2f64.ln()).abs() < 1e-15);
        let p = RbmParams::zeros(3, 2);
        let half = RbmState {
            left: vec![0.5; 3],
            right: vec![0.5; 2],
        };
        let lp = log_prior(&p, &half, exact_log_z(&p).unwrap()).unwrap();
        assert!((lp + 5.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn single_sample_moments() {
        let g = grad_log_z(&[RbmState::from_bits(1, 1, 1, 1)]).unwrap();
        assert_eq!((g.w[0], g.a[0], g.b[0]), (1.0, 1.0, 1.0));
        assert!(grad_log_z(&[]).is_err());
    }

    #[test]
    fn group_table_masses_follow_product_law() {
        for field in [vec![0.3, -1.2, 2.0], vec![0.0; 4], vec![40.0, -40.0, 1.0, 0.5], vec![-3.0]] {
            let table = GroupTable::new(&field);
            let masses = table.masses();
            assert_eq!(masses.iter().sum::<i64>(), 1 << 32);
            for (c, &m) in masses.iter().enumerate() {
                let p: f64 = if c >> field.len() != 0 {
                    0.0
                } else {
                    (0..field.len())
                        .map(|i| if (c >> i) & 1 == 1 { sigmoid(field[i]) } else { sigmoid(-field[i]) })
                        .product()
                };
                assert!((m as f64 / 4_294_967_296.0 - p).abs() < 1e-8, "{field:?} config {c}");
            }
        }
    }

    #[test]
    fn group_table_pick_covers_slots() {
        let table = GroupTable::new(&[0.0, 0.0, 0.0, 0.0]);
        for slot in 0..16u32 {
            assert_eq!(table.pick(slot << 28), slot as usize);
            assert_eq!(table.pick((slot << 28) | 0x0fff_ffff), slot as usize);
        }
        let always_one = GroupTable::new(&[60.0]);
        assert!((0..64u32).all(|i| always_one.pick(i.wrapping_mul(0x9e37_79b9)) == 1));
    }
}
