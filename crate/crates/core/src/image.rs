//! Grayscale images and the multi-scale structural similarity index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grayscale image with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, pixels: vec![value; height * width] }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn mse(&self, other: &Image) -> f64 {
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            / self.pixels.len() as f64
    }

    /// 2x2 average pooling (odd trailing rows/columns are dropped).
    pub fn downsample(&self) -> Image {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let at = |dr: usize, dc: usize| self.pixels[(2 * r + dr) * self.width + 2 * c + dc];
                out[r * w + c] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
        Image { height: h, width: w, pixels: out }
    }
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Number of scales used for an image: `floor(log2(min(H, W) / 8)) + 1`.
pub fn ms_ssim_scales(height: usize, width: usize) -> Result<usize> {
    let side = height.min(width);
    if side < 8 {
        return Err(Error::InvalidConfig(format!(
            "{height}x{width} image is too small for a {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let s = ((side as f64 / 8.0).log2().floor() as usize + 1).min(MS_SSIM_WEIGHTS.len());
    Ok(s)
}

/// Exponents of the scales, truncated to `scales` entries and renormalized.
pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Per-scale summary: mean contrast-structure term, or the mean of
/// luminance times contrast-structure at the coarsest scale.
fn scale_term(x: &Image, y: &Image, with_luminance: bool, grad: Option<&mut [f64]>) -> f64 {
    let k = SSIM_WINDOW;
    let (h, w) = (x.height, x.width);
    let rows = h - k + 1;
    let cols = w - k + 1;
    let n = (k * k) as f64;
    let count = (rows * cols) as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for r in 0..rows {
        for c in 0..cols {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in 0..k {
                for dc in 0..k {
                    let i = (r + dr) * w + c + dc;
                    let (a, b) = (x.pixels[i], y.pixels[i]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            let cs_num = 2.0 * cov + SSIM_C2;
            let cs_den = vx + vy + SSIM_C2;
            let cs = cs_num / cs_den;
            let (lum, lum_num, lum_den) = if with_luminance {
                let num = 2.0 * mx * my + SSIM_C1;
                let den = mx * mx + my * my + SSIM_C1;
                (num / den, num, den)
            } else {
                (1.0, 1.0, 1.0)
            };
            total += lum * cs;
            if let Some(g) = grad.as_deref_mut() {
                // partials of lum * cs with respect to mean, variance and covariance of x
                let d_cs_dcov = 2.0 / cs_den;
                let d_cs_dvx = -cs_num / (cs_den * cs_den);
                let (d_lum_dmx, lum_v) = if with_luminance {
                    let d = (2.0 * my * lum_den - lum_num * 2.0 * mx) / (lum_den * lum_den);
                    (d, lum)
                } else {
                    (0.0, 1.0)
                };
                let g_mx = d_lum_dmx * cs;
                let g_vx = lum_v * d_cs_dvx;
                let g_cov = lum_v * d_cs_dcov;
                for dr in 0..k {
                    for dc in 0..k {
                        let i = (r + dr) * w + c + dc;
                        let dvx = 2.0 * (x.pixels[i] - mx) / n;
                        let dcov = (y.pixels[i] - my) / n;
                        g[i] += (g_mx / n + g_vx * dvx + g_cov * dcov) / count;
                    }
                }
            }
        }
    }
    total / count
}

/// Multi-scale SSIM of `x` against `y` with a box window.
pub fn ms_ssim(x: &Image, y: &Image) -> Result<f64> {
    Ok(ms_ssim_with_grad(x, y, false)?.0)
}

/// MS-SSIM and, optionally, its gradient with respect to the pixels of `x`.
pub fn ms_ssim_with_grad(x: &Image, y: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    if x.height != y.height || x.width != y.width {
        return Err(Error::InvalidArgument("MS-SSIM images differ in shape".into()));
    }
    let scales = ms_ssim_scales(x.height, x.width)?;
    let weights = ms_ssim_weights(scales);

    let mut xs = vec![x.clone()];
    let mut ys = vec![y.clone()];
    for _ in 1..scales {
        let nx = xs.last().unwrap().downsample();
        let ny = ys.last().unwrap().downsample();
        xs.push(nx);
        ys.push(ny);
    }

    let mut values = Vec::with_capacity(scales);
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(scales);
    for s in 0..scales {
        let mut g = if want_grad { vec![0.0; xs[s].len()] } else { Vec::new() };
        let v = scale_term(&xs[s], &ys[s], s + 1 == scales, want_grad.then_some(g.as_mut_slice()));
        values.push(v);
        grads.push(g);
    }

    let clamped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let score: f64 = clamped.iter().zip(&weights).map(|(v, w)| v.powf(*w)).product();
    if !want_grad {
        return Ok((score, None));
    }

    // d score / d value_s = w_s * score / value_s on the positive branch
    let mut out = vec![0.0; x.len()];
    for s in (0..scales).rev() {
        // clamped scales contribute no gradient
        let coef = if values[s] > 0.0 && score > 0.0 { weights[s] * score / values[s] } else { 0.0 };
        if coef == 0.0 {
            continue;
        }
        let mut g: Vec<f64> = grads[s].iter().map(|v| v * coef).collect();
        // pull back through the 2x2 average pools
        for level in (0..s).rev() {
            let (fh, fw) = (xs[level].height, xs[level].width);
            let cw = xs[level + 1].width;
            let mut up = vec![0.0; fh * fw];
            for r in 0..xs[level + 1].height {
                for c in 0..cw {
                    let v = 0.25 * g[r * cw + c];
                    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        up[(2 * r + dr) * fw + 2 * c + dc] += v;
                    }
                }
            }
            g = up;
        }
        for (o, v) in out.iter_mut().zip(g) {
            *o += v;
        }
    }
    Ok((score, Some(out)))
}
