//! Approximating posterior heads. `z1` and `z2` have independent
//! convolutional heads on the image; each `z3` head reads one down-path layer
//! of the decoder, so the decoder's down path doubles as an encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DownPass};
use crate::error::{Error, Result};
use crate::params::{conv, dense, flatten, init_conv, init_dense, Bound, ParamSet};
use crate::tensor::{Conv2dGeometry, Padding, Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub filters: usize,
    /// Down-sampling stages of the `z1` head, each a strided and a plain 3x3 convolution.
    pub stages: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { filters: 32, stages: 2 }
    }
}

/// Geometry of a `z3` reduction: kernel = stride = `factor` per axis, with
/// bottom/right padding so the output is `ceil(extent / factor)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reduction {
    pub factor: (usize, usize),
    pub out: (usize, usize),
}

impl Reduction {
    /// Reduces a `layer` map towards a quarter of the image size.
    pub fn new(layer: (usize, usize), image: (usize, usize)) -> Self {
        let target = (image.0.div_ceil(4), image.1.div_ceil(4));
        let factor = (layer.0.div_ceil(target.0).max(1), layer.1.div_ceil(target.1).max(1));
        Reduction {
            factor,
            out: (layer.0.div_ceil(factor.0), layer.1.div_ceil(factor.1)),
        }
    }

    fn geometry(&self, layer: (usize, usize)) -> Conv2dGeometry {
        let pad_b = self.out.0 * self.factor.0 - layer.0;
        let pad_r = self.out.1 * self.factor.1 - layer.1;
        // square stride only: the factors coincide for square images
        Conv2dGeometry::new(self.factor.0, Padding::new(0, pad_b, 0, pad_r))
    }
}

const SAME3: Conv2dGeometry = Conv2dGeometry {
    stride: 1,
    padding: Padding {
        top: 1,
        bottom: 1,
        left: 1,
        right: 1,
    },
};

const DOWN3: Conv2dGeometry = Conv2dGeometry {
    stride: 2,
    padding: Padding {
        top: 1,
        bottom: 1,
        left: 1,
        right: 1,
    },
};

impl EncoderConfig {
    pub fn validate(&self, dec: &DecoderConfig) -> Result<()> {
        if dec.z1 > 0 && self.filters == 0 {
            return Err(Error::Config("encoder needs at least one filter".into()));
        }
        if dec.z3_units > 0 && dec.height != dec.width {
            return Err(Error::Config("z3 heads need square images".into()));
        }
        Ok(())
    }

    fn z1_hw(&self, dec: &DecoderConfig) -> (usize, usize) {
        let mut hw = (dec.height, dec.width);
        for _ in 0..self.stages {
            hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
        }
        hw
    }

    /// Registers head parameters under `enc.`. `z1_outputs` is `z1` for
    /// Bernoulli latents and `2·z1` for a Gaussian posterior.
    pub fn init(&self, dec: &DecoderConfig, z1_outputs: usize, ps: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        self.validate(dec)?;
        let f = self.filters;
        let c = dec.channels;
        if z1_outputs > 0 {
            for s in 0..self.stages {
                let cin = if s == 0 { c } else { f };
                init_conv(ps, &format!("enc.z1.down{s}"), (3, 3), cin, f, 1.0, rng);
                init_conv(ps, &format!("enc.z1.conv{s}"), (3, 3), f, f, 1.0, rng);
            }
            let (h, w) = self.z1_hw(dec);
            let cin = if self.stages == 0 { c } else { f };
            init_dense(ps, "enc.z1.fc", h * w * cin, z1_outputs, 1.0, rng);
        }
        if dec.z2 > 0 {
            init_conv(ps, "enc.z2.down", (3, 3), c, 1, 1.0, rng);
            let (h, w) = (dec.height.div_ceil(2), dec.width.div_ceil(2));
            init_dense(ps, "enc.z2.fc", h * w, dec.z2, 1.0, rng);
        }
        if dec.z3_units > 0 {
            let res = dec.resolutions();
            for b in 1..=3 {
                for i in 0..=dec.resnets {
                    let idx = dec.layer_index(b, i);
                    let red = Reduction::new(res[b - 1], (dec.height, dec.width));
                    init_conv(ps, &format!("enc.z3.{idx}.conv"), red.factor, 2 * dec.filters, 1, 1.0, rng);
                    init_dense(ps, &format!("enc.z3.{idx}.fc"), red.out.0 * red.out.1, dec.z3_units, 1.0, rng);
                }
            }
        }
        Ok(())
    }

    /// `z1` head on the network input `[B,H,W,C]` in `[-1, 1]`.
    pub fn encode_z1<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for s in 0..self.stages {
            h = conv(tape, bound, &format!("enc.z1.down{s}"), h, DOWN3)?;
            h = tape.elu(h);
            h = conv(tape, bound, &format!("enc.z1.conv{s}"), h, SAME3)?;
            h = tape.elu(h);
        }
        let h = flatten(tape, h)?;
        dense(tape, bound, "enc.z1.fc", h)
    }

    pub fn encode_z2<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let h = conv(tape, bound, "enc.z2.down", x, DOWN3)?;
        let h = tape.elu(h);
        let h = flatten(tape, h)?;
        dense(tape, bound, "enc.z2.fc", h)
    }

    /// One logit vector per down-path layer, in down-path order.
    pub fn encode_z3<T: Real>(
        &self,
        dec: &DecoderConfig,
        tape: &mut Tape<T>,
        bound: &Bound,
        down: &DownPass,
    ) -> Result<Vec<Var>> {
        if down.u.len() != dec.down_layers() {
            return Err(Error::Config(format!(
                "z3 heads expect {} layers, got {}",
                dec.down_layers(),
                down.u.len()
            )));
        }
        let res = dec.resolutions();
        let mut out = Vec::with_capacity(dec.z3_layers());
        for b in 1..=3 {
            for i in 0..=dec.resnets {
                let idx = dec.layer_index(b, i);
                let red = Reduction::new(res[b - 1], (dec.height, dec.width));
                let h = dec.hidden(tape, down, idx)?;
                let r = conv(tape, bound, &format!("enc.z3.{idx}.conv"), h, red.geometry(res[b - 1]))?;
                let r = tape.elu(r);
                let r = flatten(tape, r)?;
                out.push(dense(tape, bound, &format!("enc.z3.{idx}.fc"), r)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions() {
        // 32x32 images reduce every block to 8x8, the first with kernel = stride = 4
        assert_eq!(Reduction::new((32, 32), (32, 32)).factor, (4, 4));
        assert_eq!(Reduction::new((32, 32), (32, 32)).out, (8, 8));
        assert_eq!(Reduction::new((16, 16), (32, 32)).out, (8, 8));
        assert_eq!(Reduction::new((8, 8), (32, 32)).factor, (1, 1));
        // 28x28 targets 7x7
        assert_eq!(Reduction::new((28, 28), (28, 28)).out, (7, 7));
        assert_eq!(Reduction::new((14, 14), (28, 28)).out, (7, 7));
        // 14x14 targets 4x4
        assert_eq!(Reduction::new((14, 14), (14, 14)).out, (4, 4));
        assert_eq!(Reduction::new((7, 7), (14, 14)).out, (4, 4));
    }
}
