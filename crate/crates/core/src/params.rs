//! Named parameter storage and layer building blocks.
//!
//! Parameters live in 64-bit master copies inside a [`ParamSet`]; every
//! forward pass binds them onto a tape (cast to the tape's precision) and
//! addresses them by name through a [`Bound`] map.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dGeometry, Gradients, Padding, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f64>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f64>> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f64>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Registers every parameter on `tape`: as leaves when `track` is set,
    /// otherwise as constants.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(name, t)| {
                let value = t.cast();
                let v = if track { tape.leaf(value) } else { tape.constant(value) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for every bound parameter, in 64-bit.
    pub fn gradients<T: Real>(&self, bound: &Bound, grads: &Gradients<T>) -> ParamSet {
        let map = self
            .map
            .iter()
            .map(|(name, t)| {
                let g = bound
                    .vars
                    .get(name)
                    .and_then(|v| grads.get(*v))
                    .map(|g| g.cast())
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (name.clone(), g)
            })
            .collect();
        ParamSet { map }
    }
}

/// Parameter name to tape handle.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().map(|(n, v)| (n.to_string(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Replaces the handle of one parameter, e.g. with a detached copy.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }
}

const WEIGHT_STD: f64 = 0.05;

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Weight-normalized convolution `name.{v,g,b}` with kernel `[kh,kw,cin,cout]`.
/// `gain` is the initial column norm of the effective kernel.
pub fn init_conv(
    ps: &mut ParamSet,
    name: &str,
    kernel: (usize, usize),
    cin: usize,
    cout: usize,
    gain: f64,
    rng: &mut impl Rng,
) {
    ps.insert(format!("{name}.v"), normal_tensor(vec![kernel.0, kernel.1, cin, cout], WEIGHT_STD, rng));
    ps.insert(format!("{name}.g"), Tensor::full([cout], gain));
    ps.insert(format!("{name}.b"), Tensor::zeros([cout]));
}

/// Weight-normalized transposed convolution: kernel `[kh,kw,cout,cin]`.
pub fn init_deconv(
    ps: &mut ParamSet,
    name: &str,
    kernel: (usize, usize),
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) {
    ps.insert(format!("{name}.v"), normal_tensor(vec![kernel.0, kernel.1, cout, cin], WEIGHT_STD, rng));
    ps.insert(format!("{name}.g"), Tensor::full([cin], 1.0));
    ps.insert(format!("{name}.b"), Tensor::zeros([cout]));
}

/// Weight-normalized dense layer `[n, m]`.
pub fn init_dense(ps: &mut ParamSet, name: &str, n: usize, m: usize, gain: f64, rng: &mut impl Rng) {
    ps.insert(format!("{name}.v"), normal_tensor(vec![n, m], WEIGHT_STD, rng));
    ps.insert(format!("{name}.g"), Tensor::full([m], gain));
    ps.insert(format!("{name}.b"), Tensor::zeros([m]));
}

fn weight<T: Real>(tape: &mut Tape<T>, bound: &Bound, name: &str) -> Result<(Var, Var)> {
    let v = bound.var(&format!("{name}.v"))?;
    let g = bound.var(&format!("{name}.g"))?;
    let w = tape.weight_norm(v, g)?;
    Ok((w, bound.var(&format!("{name}.b"))?))
}

pub fn conv<T: Real>(tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var, geom: Conv2dGeometry) -> Result<Var> {
    let (w, b) = weight(tape, bound, name)?;
    let y = tape.conv2d(x, w, geom)?;
    tape.add(y, b)
}

pub fn deconv<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    name: &str,
    x: Var,
    geom: Conv2dGeometry,
    out_hw: (usize, usize),
) -> Result<Var> {
    let (w, b) = weight(tape, bound, name)?;
    let y = tape.conv_transpose2d(x, w, geom, out_hw)?;
    tape.add(y, b)
}

pub fn dense<T: Real>(tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let (w, b) = weight(tape, bound, name)?;
    tape.dense(x, w, b)
}

/// Flattens `[B, ...]` to `[B, rest]`.
pub fn flatten<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let rest = shape[1..].iter().product::<usize>();
    tape.reshape(x, &[shape[0], rest])
}

/// Causal convolution families on `[B,H,W,C]` maps. `Down` sees the current
/// and previous row; `DownRight` additionally only columns up to the current.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shift {
    Down,
    DownRight,
}

impl Shift {
    pub fn kernel(self) -> (usize, usize) {
        match self {
            Shift::Down => (2, 3),
            Shift::DownRight => (2, 2),
        }
    }

    /// Same-size (stride 1) or halving (stride 2) causal geometry.
    pub fn geometry(self, stride: usize) -> Conv2dGeometry {
        match self {
            Shift::Down => Conv2dGeometry::new(stride, Padding::new(1, 0, 1, 1)),
            Shift::DownRight => Conv2dGeometry::new(stride, Padding::new(1, 0, 1, 0)),
        }
    }

    /// Geometry whose transpose doubles resolution while mapping low-res row
    /// `i` only onto rows `2i, 2i+1` (and columns `2j, 2j+1` for `DownRight`).
    pub fn up_geometry(self) -> Conv2dGeometry {
        match self {
            Shift::Down => Conv2dGeometry::new(2, Padding::new(0, 1, 1, 1)),
            Shift::DownRight => Conv2dGeometry::new(2, Padding::new(0, 1, 0, 1)),
        }
    }
}

/// Channel count of the auxiliary input of a gated residual unit.
#[derive(Clone, Copy, Debug)]
pub struct GatedShape {
    pub filters: usize,
    pub aux: usize,
    pub cond: usize,
}

pub fn init_gated_resnet(ps: &mut ParamSet, name: &str, shift: Shift, shape: GatedShape, rng: &mut impl Rng) {
    let f = shape.filters;
    init_conv(ps, &format!("{name}.c1"), shift.kernel(), 2 * f, f, 1.0, rng);
    if shape.aux > 0 {
        init_conv(ps, &format!("{name}.aux"), (1, 1), 2 * shape.aux, f, 1.0, rng);
    }
    if shape.cond > 0 {
        init_dense(ps, &format!("{name}.cond"), shape.cond, f, 1.0, rng);
    }
    init_conv(ps, &format!("{name}.c2"), shift.kernel(), 2 * f, 2 * f, 0.1, rng);
}

/// Gated residual unit: `c = conv(celu(x)) [+ nin(celu(aux))] [+ dense(cond)]`,
/// `(a, g) = split(conv(celu(c)))`, output `x + a σ(g)`.
pub fn gated_resnet<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    name: &str,
    shift: Shift,
    x: Var,
    aux: Option<Var>,
    cond: Option<Var>,
) -> Result<Var> {
    let geom = shift.geometry(1);
    let xe = tape.concat_elu(x)?;
    let mut c = conv(tape, bound, &format!("{name}.c1"), xe, geom)?;
    if let Some(a) = aux {
        let ae = tape.concat_elu(a)?;
        let proj = conv(tape, bound, &format!("{name}.aux"), ae, Conv2dGeometry::unit())?;
        c = tape.add(c, proj)?;
    }
    if let Some(h) = cond {
        let proj = dense(tape, bound, &format!("{name}.cond"), h)?;
        let s = tape.shape(proj).to_vec();
        let proj = tape.reshape(proj, &[s[0], 1, 1, s[1]])?;
        c = tape.add(c, proj)?;
    }
    let ce = tape.concat_elu(c)?;
    let c2 = conv(tape, bound, &format!("{name}.c2"), ce, geom)?;
    let f = tape.shape(x)[3];
    let a = tape.slice(c2, 3, 0, f)?;
    let g = tape.slice(c2, 3, f, f)?;
    let gate = tape.sigmoid(g);
    let delta = tape.mul(a, gate)?;
    tape.add(x, delta)
}
