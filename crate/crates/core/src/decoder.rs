//! Autoregressive decoder: a dual-stream shifted-convolution network with
//! three down-path and three up-path blocks of gated residual units, skip
//! connections between paired layers, and injection points for the three
//! latent groups.
//!
//! Down-path layers are indexed `(b, i)` with `b ∈ 1..=3` and `i ∈ 0..=n`,
//! where `i = 0` is the block input (the initial convolution for `b = 1`, the
//! down-sampling convolution otherwise). Up-path layers are `(b, i)` with
//! `b ∈ 4..=6` and `i ∈ 1..=n+1`; up layer `(7−b, n+1−i)` consumes down layer
//! `(b, i)` through its skip connection and its `z3` bridge.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentBundle, LatentSpec, LatentVars};
use crate::likelihood::Head;
use crate::params::{self, conv, deconv, dense, init_conv, init_deconv, init_dense, Bound, GatedShape, ParamSet, Shift};
use crate::tensor::{Conv2dGeometry, Padding, Real, Tape, Tensor, Var};

pub const BLOCKS: usize = 6;
/// Transposed-convolution stages decoding `z1` to input resolution.
pub const Z1_STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Residual units per block (`n`).
    pub resnets: usize,
    pub filters: usize,
    /// Keeps every block at full resolution.
    pub no_strides: bool,
    pub head: Head,
    pub z1: usize,
    pub z2: usize,
    /// Units per bridged layer; zero disables `z3`.
    pub z3_units: usize,
    pub z1_filters: usize,
    pub z1_map_channels: usize,
    pub z3_map_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            height: 14,
            width: 14,
            channels: 1,
            resnets: 2,
            filters: 32,
            no_strides: false,
            head: Head::Bernoulli,
            z1: 16,
            z2: 0,
            z3_units: 0,
            z1_filters: 32,
            z1_map_channels: 4,
            z3_map_channels: 4,
        }
    }
}

/// Down-path activations of both streams, indexed by [`DecoderConfig::layer_index`].
#[derive(Clone, Debug)]
pub struct DownPass {
    pub u: Vec<Var>,
    pub l: Vec<Var>,
}

/// Up-path layer that down layer `(b, i)` pairs with.
pub fn skip_pair(n: usize, b: usize, i: usize) -> (usize, usize) {
    (BLOCKS + 1 - b, n + 1 - i)
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.height < 2 || self.width < 2 || self.channels == 0 {
            return bad("image must be at least 2x2 with one channel");
        }
        if self.resnets == 0 || self.filters == 0 {
            return bad("decoder needs at least one residual unit and one filter");
        }
        if self.z1 > 0 && (self.z1_filters == 0 || self.z1_map_channels == 0) {
            return bad("z1 decoding needs filters and map channels");
        }
        if self.z3_units > 0 && self.z3_map_channels == 0 {
            return bad("z3 bridging needs map channels");
        }
        self.head.validate()
    }

    pub fn latent_spec(&self) -> LatentSpec {
        LatentSpec {
            z1: self.z1,
            z2: self.z2,
            z3_layers: self.z3_layers(),
            z3_units: self.z3_units,
        }
    }

    /// Bridged layers: `(n + 1) × 3` when `z3` is enabled.
    pub fn z3_layers(&self) -> usize {
        if self.z3_units > 0 {
            3 * (self.resnets + 1)
        } else {
            0
        }
    }

    pub fn down_layers(&self) -> usize {
        3 * (self.resnets + 1)
    }

    pub fn layer_index(&self, b: usize, i: usize) -> usize {
        (b - 1) * (self.resnets + 1) + i
    }

    /// Spatial size of down blocks 1..=3.
    pub fn resolutions(&self) -> [(usize, usize); 3] {
        let half = |(h, w): (usize, usize)| {
            if self.no_strides {
                (h, w)
            } else {
                (h.div_ceil(2), w.div_ceil(2))
            }
        };
        let r1 = (self.height, self.width);
        let r2 = half(r1);
        [r1, r2, half(r2)]
    }

    pub fn param_channels(&self) -> usize {
        self.head.param_channels(self.channels)
    }

    fn z1_sizes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![(self.height, self.width)];
        for _ in 0..Z1_STAGES {
            let (h, w) = *sizes.last().unwrap();
            sizes.push((h.div_ceil(2), w.div_ceil(2)));
        }
        sizes
    }

    fn input_channels(&self) -> usize {
        // pixels and a constant ones channel marking the valid image area
        self.channels + 1
    }

    /// Registers all decoder parameters under `dec.`.
    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let f = self.filters;
        let n = self.resnets;
        let cin = self.input_channels();
        let cond = self.z2;
        if self.z1 > 0 {
            let sizes = self.z1_sizes();
            let (th, tw) = sizes[Z1_STAGES];
            init_dense(ps, "dec.z1.fc", self.z1, th * tw * self.z1_filters, 1.0, rng);
            for s in (1..=Z1_STAGES).rev() {
                let out = if s == 1 { self.z1_map_channels } else { self.z1_filters };
                init_deconv(ps, &format!("dec.z1.up{s}"), (3, 3), self.z1_filters, out, rng);
            }
        }
        init_conv(ps, "dec.init.u", Shift::Down.kernel(), cin, f, 1.0, rng);
        init_conv(ps, "dec.init.lv", (1, 3), cin, f, 1.0, rng);
        init_conv(ps, "dec.init.lh", (2, 1), cin, f, 1.0, rng);
        if self.z1 > 0 {
            init_conv(ps, "dec.init.z1u", (1, 1), self.z1_map_channels, f, 1.0, rng);
            init_conv(ps, "dec.init.z1l", (1, 1), self.z1_map_channels, f, 1.0, rng);
        }
        let res = self.resolutions();
        for b in 1..=3 {
            if b > 1 {
                init_conv(ps, &format!("dec.down{b}.u"), Shift::Down.kernel(), f, f, 1.0, rng);
                init_conv(ps, &format!("dec.down{b}.l"), Shift::DownRight.kernel(), f, f, 1.0, rng);
            }
            for i in 1..=n {
                let (u, l) = Self::unit_names(b, i);
                params::init_gated_resnet(ps, &u, Shift::Down, GatedShape { filters: f, aux: 0, cond }, rng);
                params::init_gated_resnet(ps, &l, Shift::DownRight, GatedShape { filters: f, aux: f, cond }, rng);
            }
        }
        let z3c = if self.z3_units > 0 { self.z3_map_channels } else { 0 };
        for b in 4..=BLOCKS {
            if b > 4 {
                init_deconv(ps, &format!("dec.up{b}.u"), Shift::Down.kernel(), f, f, rng);
                init_deconv(ps, &format!("dec.up{b}.l"), Shift::DownRight.kernel(), f, f, rng);
            }
            let (h, w) = res[BLOCKS - b];
            for i in 1..=n + 1 {
                let (u, l) = Self::unit_names(b, i);
                params::init_gated_resnet(ps, &u, Shift::Down, GatedShape { filters: f, aux: f + z3c, cond }, rng);
                params::init_gated_resnet(
                    ps,
                    &l,
                    Shift::DownRight,
                    GatedShape { filters: f, aux: 2 * f + z3c, cond },
                    rng,
                );
                if z3c > 0 {
                    init_dense(ps, &format!("dec.z3.{b}.{i}"), self.z3_units, h * w * z3c, 1.0, rng);
                }
            }
        }
        init_conv(ps, "dec.out", (1, 1), f, self.param_channels(), 1.0, rng);
        Ok(())
    }

    fn unit_names(b: usize, i: usize) -> (String, String) {
        (format!("dec.b{b}.{i}.u"), format!("dec.b{b}.{i}.l"))
    }

    /// `z1 [B, n1]` decoded to a `[B, H, W, c]` map.
    fn decode_z1<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, z1: Var) -> Result<Var> {
        let sizes = self.z1_sizes();
        let b = tape.shape(z1)[0];
        let (th, tw) = sizes[Z1_STAGES];
        let h = dense(tape, bound, "dec.z1.fc", z1)?;
        let mut h = tape.reshape(h, &[b, th, tw, self.z1_filters])?;
        let geom = Conv2dGeometry::new(2, Padding::new(1, 1, 1, 1));
        for s in (1..=Z1_STAGES).rev() {
            h = tape.elu(h);
            h = deconv(tape, bound, &format!("dec.z1.up{s}"), h, geom, sizes[s - 1])?;
        }
        Ok(h)
    }

    fn check_latents<T: Real>(&self, tape: &Tape<T>, z1: Option<Var>, z2: Option<Var>, batch: usize) -> Result<()> {
        for (name, v, size) in [("z1", z1, self.z1), ("z2", z2, self.z2)] {
            let expected = if size > 0 { Some([batch, size]) } else { None };
            match (v, expected) {
                (None, None) => {}
                (Some(v), Some(e)) if tape.shape(v) == e => {}
                (v, _) => {
                    return Err(Error::Config(format!(
                        "latent {name} has shape {:?}, decoder expects size {size}",
                        v.map(|v| tape.shape(v).to_vec())
                    )))
                }
            }
        }
        Ok(())
    }

    /// Down path on raw pixels `x: [B,H,W,C]`. The decoded `z1` map joins the
    /// shifted input streams unshifted (concatenation followed by a 1x1
    /// convolution, written as a sum of projections), so every pixel sees the
    /// map at its own position; `z2` conditions every residual unit.
    pub fn down_pass<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: &Tensor<f64>,
        z1: Option<Var>,
        z2: Option<Var>,
    ) -> Result<DownPass> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1..] != [self.height, self.width, self.channels] {
            return Err(Error::shape("decoder input", xs, &[self.height, self.width, self.channels]));
        }
        let batch = xs[0];
        self.check_latents(tape, z1, z2, batch)?;
        let input = self.head.to_input(x);
        let pix = tape.constant(input.cast());
        let ones = tape.constant(Tensor::full([batch, self.height, self.width, 1], T::one()));
        let xin = tape.concat(&[pix, ones], 3)?;

        let u0 = conv(tape, bound, "dec.init.u", xin, Shift::Down.geometry(1))?;
        let u0 = tape.down_shift(u0)?;
        let lv = conv(tape, bound, "dec.init.lv", xin, Conv2dGeometry::new(1, Padding::new(0, 0, 1, 1)))?;
        let lv = tape.down_shift(lv)?;
        let lh = conv(tape, bound, "dec.init.lh", xin, Conv2dGeometry::new(1, Padding::new(1, 0, 0, 0)))?;
        let lh = tape.right_shift(lh)?;
        let mut l0 = tape.add(lv, lh)?;
        let mut u0 = u0;
        if let Some(z) = z1 {
            let zmap = self.decode_z1(tape, bound, z)?;
            let zu = conv(tape, bound, "dec.init.z1u", zmap, Conv2dGeometry::unit())?;
            u0 = tape.add(u0, zu)?;
            let zl = conv(tape, bound, "dec.init.z1l", zmap, Conv2dGeometry::unit())?;
            l0 = tape.add(l0, zl)?;
        }

        let stride = if self.no_strides { 1 } else { 2 };
        let mut down = DownPass { u: vec![u0], l: vec![l0] };
        let (mut u, mut l) = (u0, l0);
        for b in 1..=3 {
            if b > 1 {
                u = conv(tape, bound, &format!("dec.down{b}.u"), u, Shift::Down.geometry(stride))?;
                l = conv(tape, bound, &format!("dec.down{b}.l"), l, Shift::DownRight.geometry(stride))?;
                down.u.push(u);
                down.l.push(l);
            }
            for i in 1..=self.resnets {
                let (un, ln) = Self::unit_names(b, i);
                u = params::gated_resnet(tape, bound, &un, Shift::Down, u, None, z2)?;
                l = params::gated_resnet(tape, bound, &ln, Shift::DownRight, l, Some(u), z2)?;
                down.u.push(u);
                down.l.push(l);
            }
        }
        Ok(down)
    }

    /// Hidden layer `h_{b,i}` (both streams concatenated) read by the `z3` heads.
    pub fn hidden<T: Real>(&self, tape: &mut Tape<T>, down: &DownPass, index: usize) -> Result<Var> {
        tape.concat(&[down.u[index], down.l[index]], 3)
    }

    /// Up path producing per-pixel output parameters `[B,H,W,P]`. `z3` holds
    /// one `[B, units]` vector per down layer, in down-path order.
    pub fn up_pass<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        down: &DownPass,
        z2: Option<Var>,
        z3: &[Var],
    ) -> Result<Var> {
        let n = self.resnets;
        if z3.len() != self.z3_layers() {
            return Err(Error::Config(format!(
                "decoder expects {} z3 vectors, got {}",
                self.z3_layers(),
                z3.len()
            )));
        }
        let res = self.resolutions();
        let last = self.layer_index(3, n);
        let (mut u, mut l) = (down.u[last], down.l[last]);
        for b in 4..=BLOCKS {
            let (h, w) = res[BLOCKS - b];
            let batch = tape.shape(u)[0];
            if b > 4 {
                let (ug, lg) = if self.no_strides {
                    (Shift::Down.geometry(1), Shift::DownRight.geometry(1))
                } else {
                    (Shift::Down.up_geometry(), Shift::DownRight.up_geometry())
                };
                u = if self.no_strides {
                    self.same_size_deconv(tape, bound, &format!("dec.up{b}.u"), u, ug)?
                } else {
                    deconv(tape, bound, &format!("dec.up{b}.u"), u, ug, (h, w))?
                };
                l = if self.no_strides {
                    self.same_size_deconv(tape, bound, &format!("dec.up{b}.l"), l, lg)?
                } else {
                    deconv(tape, bound, &format!("dec.up{b}.l"), l, lg, (h, w))?
                };
            }
            for i in 1..=n + 1 {
                let (db, di) = skip_pair(n, b, i);
                let idx = self.layer_index(db, di);
                let mut aux_u = vec![down.u[idx]];
                let mut aux_l = vec![down.l[idx]];
                if !z3.is_empty() {
                    let zm = dense(tape, bound, &format!("dec.z3.{b}.{i}"), z3[idx])?;
                    let zm = tape.reshape(zm, &[batch, h, w, self.z3_map_channels])?;
                    aux_u.push(zm);
                    aux_l.push(zm);
                }
                let (un, ln) = Self::unit_names(b, i);
                let au = concat_or_single(tape, &aux_u)?;
                u = params::gated_resnet(tape, bound, &un, Shift::Down, u, Some(au), z2)?;
                aux_l.insert(0, u);
                let al = concat_or_single(tape, &aux_l)?;
                l = params::gated_resnet(tape, bound, &ln, Shift::DownRight, l, Some(al), z2)?;
            }
        }
        let le = tape.elu(l);
        conv(tape, bound, "dec.out", le, Conv2dGeometry::unit())
    }

    /// Without strides the up-sampling layer is a causal stride-1
    /// convolution using the transposed kernel layout `[kh,kw,out,in]`.
    fn same_size_deconv<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        name: &str,
        x: Var,
        geom: Conv2dGeometry,
    ) -> Result<Var> {
        let v = bound.var(&format!("{name}.v"))?;
        let g = bound.var(&format!("{name}.g"))?;
        let w = tape.weight_norm(v, g)?;
        // [kh,kw,out,in] is a valid [kh,kw,cin,cout] kernel when out == in
        let y = tape.conv2d(x, w, geom)?;
        let b = bound.var(&format!("{name}.b"))?;
        tape.add(y, b)
    }

    /// Teacher-forced pass: output parameters for every pixel in one pass.
    pub fn decode_teacher_forced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: &Tensor<f64>,
        latents: &LatentVars,
    ) -> Result<Var> {
        let down = self.down_pass(tape, bound, x, latents.z1, latents.z2)?;
        self.up_pass(tape, bound, &down, latents.z2, &latents.z3)
    }

    /// Raster-order sampling of `batch` images, one full pass per pixel.
    pub fn generate<T: Real>(
        &self,
        params: &ParamSet,
        latents: &LatentBundle,
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<Tensor<f64>> {
        if latents.batch().is_some_and(|b| b != batch) {
            return Err(Error::invalid("latent batch does not match the requested image count"));
        }
        let (h, w, c) = (self.height, self.width, self.channels);
        let p = self.param_channels();
        let mut x = Tensor::zeros([batch, h, w, c]);
        for r in 0..h {
            for col in 0..w {
                let out = self.teacher_forced_values::<T>(params, &x, latents)?;
                for b in 0..batch {
                    let at = ((b * h + r) * w + col) * p;
                    let pixel = self.head.sample_pixel(&out[at..at + p], c, rng);
                    let dst = ((b * h + r) * w + col) * c;
                    x.data_mut()[dst..dst + c].copy_from_slice(&pixel);
                }
            }
        }
        Ok(x)
    }

    /// Output parameters of a constant-parameter teacher-forced pass, in f64.
    pub fn teacher_forced_values<T: Real>(
        &self,
        params: &ParamSet,
        x: &Tensor<f64>,
        latents: &LatentBundle,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::<T>::new();
        let bound = params.bind(&mut tape, false);
        let lv = latents.bind(&mut tape);
        let out = self.decode_teacher_forced(&mut tape, &bound, x, &lv)?;
        Ok(tape.value(out).to_f64_vec())
    }
}

fn concat_or_single<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(parts, 3)
    }
}
