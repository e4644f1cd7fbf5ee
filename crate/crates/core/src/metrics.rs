//! Sample-set distances for ranking generated rows, and a linear probe on
//! latent codes.
//!
//! Sets are tensors `[N, ...]` whose rows are flattened to pixel vectors.
//! Means over pair distances use correctly rounded summation, so results do
//! not depend on pair order and `energy_distance(a, b)` equals
//! `energy_distance(b, a)` bit for bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn rows(set: &Tensor<f64>) -> Result<Vec<&[f64]>> {
    let n = set.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("image set is empty"));
    }
    let d = set.len() / n;
    Ok(set.data().chunks(d.max(1)).take(n).collect())
}

/// Euclidean distance, squares summed in index order.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

/// Correctly rounded sum of finite values (Shewchuk's exact partials).
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // round the partials, largest first, keeping half-way cases exact
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if !partials.is_empty() && ((lo < 0.0 && partials[partials.len() - 1] < 0.0) || (lo > 0.0 && partials[partials.len() - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

fn mean_cross(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let n = (a.len() * b.len()) as f64;
    exact_sum(a.iter().flat_map(|x| b.iter().map(move |y| euclidean(x, y)))) / n
}

/// `2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` with every mean taken over all ordered
/// pairs, self-pairs included at zero.
pub fn energy_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (ra, rb) = (rows(a)?, rows(b)?);
    if ra[0].len() != rb[0].len() {
        return Err(Error::shape("energy_distance", a.shape(), b.shape()));
    }
    let cross = mean_cross(&ra, &rb);
    let within = exact_sum([mean_cross(&ra, &ra), mean_cross(&rb, &rb)]);
    Ok(2.0 * cross - within)
}

/// Mean Euclidean distance over distinct pairs of one set.
pub fn mutual_distance(set: &Tensor<f64>) -> Result<f64> {
    let r = rows(set)?;
    if r.len() < 2 {
        return Err(Error::invalid("mutual distance needs at least two images"));
    }
    let pairs = r.len() * (r.len() - 1) / 2;
    let sum = exact_sum((0..r.len()).flat_map(|i| (i + 1..r.len()).map({
        let r = &r;
        move |j| euclidean(r[i], r[j])
    })));
    Ok(sum / pairs as f64)
}

/// Row indices sorted by ascending mutual distance, or by ascending energy
/// distance to `{reference}` when given. Ties keep the original order.
pub fn rank_rows(sets: &[Tensor<f64>], reference: Option<&Tensor<f64>>) -> Result<Vec<usize>> {
    let keys = sets
        .iter()
        .map(|s| match reference {
            Some(r) => energy_distance(s, r),
            None => mutual_distance(s),
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut idx: Vec<usize> = (0..sets.len()).collect();
    idx.sort_by(|&i, &j| keys[i].total_cmp(&keys[j]));
    Ok(idx)
}

/// Binary logistic regression on fixed features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticProbe {
    /// Full-batch gradient descent on the mean log loss plus `l2/2·‖w‖²`.
    /// Labels must be 0 or 1.
    pub fn fit(x: &Tensor<f64>, labels: &[u8], epochs: usize, lr: f64, l2: f64) -> Result<Self> {
        let r = rows(x)?;
        if r.len() != labels.len() {
            return Err(Error::shape("probe labels", x.shape(), &[labels.len()]));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("probe labels must be binary"));
        }
        let d = r[0].len();
        let mut probe = LogisticProbe {
            weights: vec![0.0; d],
            bias: 0.0,
        };
        let n = r.len() as f64;
        for _ in 0..epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (row, &y) in r.iter().zip(labels) {
                let err = crate::rbm::sigmoid(probe.logit(row)) - y as f64;
                for (g, v) in gw.iter_mut().zip(row.iter()) {
                    *g += err * v;
                }
                gb += err;
            }
            for (w, g) in probe.weights.iter_mut().zip(gw) {
                *w -= lr * (g / n + l2 * *w);
            }
            probe.bias -= lr * gb / n;
        }
        Ok(probe)
    }

    pub fn logit(&self, row: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(row).map(|(w, v)| w * v).sum::<f64>()
    }

    /// Fraction of rows whose thresholded prediction equals the label.
    pub fn accuracy(&self, x: &Tensor<f64>, labels: &[u8]) -> Result<f64> {
        let r = rows(x)?;
        if r.len() != labels.len() {
            return Err(Error::shape("probe labels", x.shape(), &[labels.len()]));
        }
        let hits = r
            .iter()
            .zip(labels)
            .filter(|(row, &y)| (self.logit(row) > 0.0) == (y == 1))
            .count();
        Ok(hits as f64 / r.len() as f64)
    }
}
