//! Image grids as PNG or plain-text PGM/PPM.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit grid of `images: [N, H, W, C]` laid out in rows of `cols` images
/// separated by one-pixel gaps of mid gray. `max_value` maps to 255.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

const GAP: u8 = 128;

impl Grid {
    pub fn new(images: &Tensor<f64>, cols: usize, max_value: f64) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] == 0 || cols == 0 {
            return Err(Error::invalid(format!("cannot lay out images of shape {s:?} in {cols} columns")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        if c != 1 && c != 3 {
            return Err(Error::invalid(format!("images need 1 or 3 channels, got {c}")));
        }
        let rows = n.div_ceil(cols);
        let width = cols * (w + 1) - 1;
        let height = rows * (h + 1) - 1;
        let mut pixels = vec![GAP; width * height * c];
        for (i, img) in images.data().chunks(h * w * c).enumerate() {
            let (gr, gc) = (i / cols, i % cols);
            for r in 0..h {
                for col in 0..w {
                    for ch in 0..c {
                        let v = img[(r * w + col) * c + ch] / max_value;
                        let at = ((gr * (h + 1) + r) * width + gc * (w + 1) + col) * c + ch;
                        pixels[at] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
        Ok(Grid {
            width,
            height,
            channels: c,
            pixels,
        })
    }

    /// PGM (`P2`) for one channel, PPM (`P3`) for three.
    pub fn to_netpbm(&self) -> String {
        let magic = if self.channels == 1 { "P2" } else { "P3" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height);
        for row in self.pixels.chunks(self.width * self.channels) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut out), self.width as u32, self.height as u32);
            enc.set_color(if self.channels == 1 {
                png::ColorType::Grayscale
            } else {
                png::ColorType::Rgb
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::invalid(format!("png: {e}")))?;
            writer
                .write_image_data(&self.pixels)
                .map_err(|e| Error::invalid(format!("png: {e}")))?;
        }
        Ok(out)
    }

    /// Writes PNG, PGM or PPM according to the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let bytes = match ext.as_str() {
            "png" => self.to_png()?,
            "pgm" if self.channels == 1 => self.to_netpbm().into_bytes(),
            "ppm" if self.channels == 3 => self.to_netpbm().into_bytes(),
            _ => {
                return Err(Error::invalid(format!(
                    "unsupported image file `{}` for {} channel(s)",
                    path.display(),
                    self.channels
                )))
            }
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}
