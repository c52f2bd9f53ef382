//! Anomaly activation maps: channel weights from the pooled latent
//! difference, applied to the input latent and upsampled to image size.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pnm::{self, Gray};
use crate::scoring::infer;
use crate::tensor::Tensor;
use crate::training::Models;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

/// Per-channel weights, one per latent channel.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyVector {
    pub weights: Vec<f64>,
}

/// Image-sized map in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub side: usize,
    pub values: Vec<f32>,
    pub sample_id: String,
    pub checkpoint_id: String,
}

fn single_latent(t: &Tensor<f32>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("{what}: expected [1, C, h, w], got {s:?}"))),
    }
}

fn channel_means(t: &Tensor<f32>, plane: usize) -> impl Iterator<Item = f64> + '_ {
    t.data()
        .chunks(plane)
        .map(move |p| p.iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64)
}

/// `|GAP(H_in) - GAP(H_re)|` per channel.
pub fn anomaly_vector(h_in: &Tensor<f32>, h_re: &Tensor<f32>) -> Result<AnomalyVector> {
    if h_in.shape() != h_re.shape() {
        return Err(Error::shape(format!(
            "anomaly vector: {:?} vs {:?}",
            h_in.shape(),
            h_re.shape()
        )));
    }
    let (_, h, w) = single_latent(h_in, "anomaly vector")?;
    let weights = channel_means(h_in, h * w)
        .zip(channel_means(h_re, h * w))
        .map(|(a, b)| (a - b).abs())
        .collect();
    Ok(AnomalyVector { weights })
}

/// Bilinear with half-pixel centers and clamped edges, or nearest neighbour.
pub fn upsample(grid: &[f64], h: usize, w: usize, side: usize, mode: Upsample) -> Vec<f64> {
    let mut out = Vec::with_capacity(side * side);
    let (sy, sx) = (h as f64 / side as f64, w as f64 / side as f64);
    for y in 0..side {
        for x in 0..side {
            let v = match mode {
                Upsample::Nearest => {
                    let iy = ((y as f64 + 0.5) * sy) as usize;
                    let ix = ((x as f64 + 0.5) * sx) as usize;
                    grid[iy.min(h - 1) * w + ix.min(w - 1)]
                }
                Upsample::Bilinear => {
                    let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                    let top = grid[y0 * w + x0] * (1.0 - tx) + grid[y0 * w + x1] * tx;
                    let bottom = grid[y1 * w + x0] * (1.0 - tx) + grid[y1 * w + x1] * tx;
                    top * (1.0 - ty) + bottom * ty
                }
            };
            out.push(v);
        }
    }
    out
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
}

/// `relu(sum_k w_k H_in[k])`, upsampled to `side` and normalized.
pub fn activation_map(
    h_in: &Tensor<f32>,
    w: &AnomalyVector,
    side: usize,
    mode: Upsample,
) -> Result<Heatmap> {
    let (c, h, wd) = single_latent(h_in, "activation map")?;
    if w.weights.len() != c {
        return Err(Error::shape(format!(
            "activation map: {} weights for {c} channels",
            w.weights.len()
        )));
    }
    if side == 0 || side % h != 0 || side % wd != 0 {
        return Err(Error::shape(format!("cannot upsample {h}x{wd} to {side}x{side}")));
    }
    let plane = h * wd;
    let mut grid = vec![0.0f64; plane];
    for (k, &wk) in w.weights.iter().enumerate() {
        for (g, &v) in grid.iter_mut().zip(&h_in.data()[k * plane..(k + 1) * plane]) {
            *g += wk * f64::from(v);
        }
    }
    grid.iter_mut().for_each(|g| *g = g.max(0.0));
    Ok(Heatmap {
        side,
        values: normalize(&upsample(&grid, h, wd, side, mode)),
        sample_id: String::new(),
        checkpoint_id: String::new(),
    })
}

/// Score-path heatmap of one `[1, c, side, side]` image.
pub fn heatmap_for(models: &Models, image: &Tensor<f32>, mode: Upsample) -> Result<Heatmap> {
    let inf = infer(models, image)?;
    let w = anomaly_vector(&inf.h_in, &inf.h_re)?;
    activation_map(&inf.h_in, &w, models.generator_config().input_side, mode)
}

impl Heatmap {
    pub fn to_gray(&self) -> Gray {
        Gray {
            width: self.side,
            height: self.side,
            pixels: self.values.iter().map(|&v| pnm::quantize_unit(v)).collect(),
        }
    }

    /// Interleaved RGB: `0.6 * base + 0.4 * (heat, 0, 0)`; `base` in `[-1, 1]`.
    pub fn overlay(&self, base: &[f32]) -> Result<Vec<u8>> {
        if base.len() != self.values.len() {
            return Err(Error::shape(format!(
                "overlay: base of {} pixels for a {}x{} map",
                base.len(),
                self.side,
                self.side
            )));
        }
        let mut rgb = Vec::with_capacity(base.len() * 3);
        for (&b, &h) in base.iter().zip(&self.values) {
            let g = 0.6 * ((b.clamp(-1.0, 1.0) + 1.0) / 2.0);
            rgb.push(pnm::quantize_unit(g + 0.4 * h));
            rgb.push(pnm::quantize_unit(g));
            rgb.push(pnm::quantize_unit(g));
        }
        Ok(rgb)
    }

    /// Writes `<id>.aam.pgm` and `<id>.overlay.ppm` into `dir`.
    pub fn export(&self, base: &[f32], dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let id = if self.sample_id.is_empty() { "sample" } else { &self.sample_id };
        let raw = dir.join(format!("{id}.aam.pgm"));
        let over = dir.join(format!("{id}.overlay.ppm"));
        let rgb = self.overlay(base)?;
        pnm::write_pgm(&raw, &self.to_gray())?;
        pnm::write_ppm(&over, self.side, self.side, &rgb)?;
        Ok((raw, over))
    }

    /// Mean heat inside and outside a mask.
    pub fn mask_contrast(&self, mask: &[bool]) -> Result<(f64, f64)> {
        if mask.len() != self.values.len() {
            return Err(Error::shape("mask and heatmap sizes differ"));
        }
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&m, &v) in mask.iter().zip(&self.values) {
            if m {
                si += f64::from(v);
                ni += 1;
            } else {
                so += f64::from(v);
                no += 1;
            }
        }
        Ok((si / ni.max(1) as f64, so / no.max(1) as f64))
    }
}
