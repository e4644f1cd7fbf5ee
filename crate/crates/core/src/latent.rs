//! The three latent groups: `z1` concatenated with the decoder input, `z2`
//! conditioning every residual unit, and `z3`, one vector per bridged layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Group sizes. A size of zero disables the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub z1: usize,
    pub z2: usize,
    pub z3_layers: usize,
    pub z3_units: usize,
}

impl LatentSpec {
    pub fn z3_total(&self) -> usize {
        self.z3_layers * self.z3_units
    }

    pub fn total(&self) -> usize {
        self.z1 + self.z2 + self.z3_total()
    }

    /// Sizes of every group in flattening order: z1, z2, then each z3 layer.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        if self.z1 > 0 {
            sizes.push(self.z1);
        }
        if self.z2 > 0 {
            sizes.push(self.z2);
        }
        sizes.extend(std::iter::repeat_n(self.z3_units, self.z3_layers));
        sizes
    }

    /// RBM side sizes `(m, k)`: `z1‖z2` against the shared `z3` units, or an
    /// even split of `z1‖z2` when `z3` is disabled.
    pub fn rbm_sides(&self) -> (usize, usize) {
        let left = self.z1 + self.z2;
        if self.z3_total() > 0 {
            (left, self.z3_total())
        } else {
            (left.div_ceil(2), left / 2)
        }
    }
}

/// Latent values for a batch, one `[B, size]` tensor per group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentBundle {
    pub z1: Option<Tensor<f64>>,
    pub z2: Option<Tensor<f64>>,
    pub z3: Vec<Tensor<f64>>,
}

impl LatentBundle {
    pub fn groups(&self) -> impl Iterator<Item = &Tensor<f64>> {
        self.z1.iter().chain(self.z2.iter()).chain(self.z3.iter())
    }

    pub fn batch(&self) -> Option<usize> {
        self.groups().next().map(|t| t.shape()[0])
    }

    pub fn spec(&self) -> LatentSpec {
        LatentSpec {
            z1: self.z1.as_ref().map_or(0, |t| t.shape()[1]),
            z2: self.z2.as_ref().map_or(0, |t| t.shape()[1]),
            z3_layers: self.z3.len(),
            z3_units: self.z3.first().map_or(0, |t| t.shape()[1]),
        }
    }

    /// `[B, total]` in group order.
    pub fn flatten(&self) -> Result<Tensor<f64>> {
        let b = self.batch().ok_or_else(|| Error::invalid("empty latent bundle"))?;
        let total: usize = self.groups().map(|t| t.shape()[1]).sum();
        let mut data = Vec::with_capacity(b * total);
        for row in 0..b {
            for g in self.groups() {
                let w = g.shape()[1];
                data.extend_from_slice(&g.data()[row * w..(row + 1) * w]);
            }
        }
        Tensor::new([b, total], data)
    }

    pub fn from_flat(spec: &LatentSpec, flat: &Tensor<f64>) -> Result<Self> {
        let s = flat.shape();
        if s.len() != 2 || s[1] != spec.total() {
            return Err(Error::shape("latent unflatten", s, &[spec.total()]));
        }
        let b = s[0];
        let mut offset = 0;
        let mut take = |w: usize| {
            let t = Tensor::from_fn([b, w], |i| flat.data()[(i / w) * spec.total() + offset + i % w]);
            offset += w;
            t
        };
        let z1 = (spec.z1 > 0).then(|| take(spec.z1));
        let z2 = (spec.z2 > 0).then(|| take(spec.z2));
        let z3 = (0..spec.z3_layers).map(|_| take(spec.z3_units)).collect();
        Ok(LatentBundle { z1, z2, z3 })
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> LatentVars {
        let mut c = |t: &Tensor<f64>| tape.constant(t.cast());
        LatentVars {
            z1: self.z1.as_ref().map(&mut c),
            z2: self.z2.as_ref().map(&mut c),
            z3: self.z3.iter().map(c).collect(),
        }
    }

    /// Rows `idx` of every group.
    pub fn select(&self, idx: &[usize]) -> LatentBundle {
        let pick = |t: &Tensor<f64>| {
            let w = t.shape()[1];
            Tensor::from_fn([idx.len(), w], |i| t.data()[idx[i / w] * w + i % w])
        };
        LatentBundle {
            z1: self.z1.as_ref().map(pick),
            z2: self.z2.as_ref().map(pick),
            z3: self.z3.iter().map(pick).collect(),
        }
    }
}

/// Latent groups recorded on a tape.
#[derive(Clone, Debug, Default)]
pub struct LatentVars {
    pub z1: Option<Var>,
    pub z2: Option<Var>,
    pub z3: Vec<Var>,
}

impl LatentVars {
    pub fn groups(&self) -> Vec<Var> {
        self.z1.iter().chain(self.z2.iter()).chain(self.z3.iter()).copied().collect()
    }

    /// `[B, total]` in group order.
    pub fn flatten<T: Real>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let groups = self.groups();
        match groups.len() {
            0 => Err(Error::invalid("no latent groups to flatten")),
            1 => Ok(groups[0]),
            _ => tape.concat(&groups, 1),
        }
    }

    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LatentBundle {
        let get = |v: &Var| tape.value(*v).cast();
        LatentBundle {
            z1: self.z1.as_ref().map(get),
            z2: self.z2.as_ref().map(get),
            z3: self.z3.iter().map(get).collect(),
        }
    }
}
