//! Synthetic structured image families used for pretraining and for the
//! surrogate fine-tuning tasks.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::image::Image;

/// A deterministic map from `(prompt, latent)` to a target image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFamily {
    /// Prompt 0 draws a soft blob, prompt 1 draws oriented stripes.
    ClassShapes,
    /// Rotated ellipses, filled for prompt 0 and outlined for prompt 1.
    Ellipses,
    /// Linear intensity ramps; prompt 1 reverses the ramp.
    Gradients,
    /// Concentric rings with latent-controlled frequency.
    Rings,
    /// Soft checkerboards with latent-controlled cell size.
    Checkers,
}

impl ImageFamily {
    pub const SURROGATE_TASKS: [ImageFamily; 4] =
        [ImageFamily::Ellipses, ImageFamily::Gradients, ImageFamily::Rings, ImageFamily::Checkers];

    pub fn name(&self) -> &'static str {
        match self {
            ImageFamily::ClassShapes => "class_shapes",
            ImageFamily::Ellipses => "ellipses",
            ImageFamily::Gradients => "gradients",
            ImageFamily::Rings => "rings",
            ImageFamily::Checkers => "checkers",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            ImageFamily::ClassShapes,
            ImageFamily::Ellipses,
            ImageFamily::Gradients,
            ImageFamily::Rings,
            ImageFamily::Checkers,
        ]
        .into_iter()
        .find(|f| f.name() == name)
    }

    pub fn target(&self, prompt: usize, latent: &[f64], height: usize, width: usize) -> Image {
        let z = |i: usize| latent.get(i).copied().unwrap_or(0.0);
        let squash = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut px = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let u = (c as f64 + 0.5) / width as f64;
                let v = (r as f64 + 0.5) / height as f64;
                let val = match self {
                    ImageFamily::ClassShapes => {
                        if prompt == 0 {
                            let cx = 0.5 + 0.15 * z(0).tanh();
                            let cy = 0.5 + 0.15 * z(1).tanh();
                            let rad = 0.22 + 0.06 * z(2).tanh();
                            let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                            0.1 + 0.8 * (-d2 / (2.0 * rad * rad)).exp()
                        } else {
                            let angle = 0.5 * PI * squash(z(0));
                            let freq = 2.0 + 0.7 * z(1).tanh();
                            let phase = z(2);
                            let s = u * angle.cos() + v * angle.sin();
                            0.5 + 0.35 * (2.0 * PI * freq * s + phase).sin()
                        }
                    }
                    ImageFamily::Ellipses => {
                        let th = PI * squash(z(3));
                        let (a, b) = (0.3 + 0.08 * z(4).tanh(), 0.15 + 0.05 * z(5).tanh());
                        let (du, dv) = (u - 0.5, v - 0.5);
                        let x = du * th.cos() + dv * th.sin();
                        let y = -du * th.sin() + dv * th.cos();
                        let e = (x / a).powi(2) + (y / b).powi(2);
                        if prompt == 0 {
                            0.1 + 0.8 * squash(8.0 * (1.0 - e))
                        } else {
                            0.1 + 0.8 * (-(e - 1.0).powi(2) * 6.0).exp()
                        }
                    }
                    ImageFamily::Gradients => {
                        let th = 2.0 * PI * squash(z(6));
                        let s = (u - 0.5) * th.cos() + (v - 0.5) * th.sin();
                        let ramp = 0.5 + 0.8 * s;
                        let ramp = if prompt == 0 { ramp } else { 1.0 - ramp };
                        ramp.clamp(0.05, 0.95)
                    }
                    ImageFamily::Rings => {
                        let f = 2.5 + z(7).tanh();
                        let d = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
                        let phase = if prompt == 0 { 0.0 } else { PI };
                        0.5 + 0.35 * (2.0 * PI * f * d + phase).cos()
                    }
                    ImageFamily::Checkers => {
                        let cells = 2.5 + 0.8 * z(0).tanh() + 0.4 * z(5).tanh();
                        let sgn = (PI * cells * u).sin() * (PI * cells * v).sin();
                        let sgn = if prompt == 0 { sgn } else { -sgn };
                        0.5 + 0.4 * (3.0 * sgn).tanh()
                    }
                };
                px.push(val);
            }
        }
        Image { height, width, pixels: px }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_stay_in_open_unit_interval() {
        let latent = [0.3, -1.2, 2.0, 0.1, -0.5, 0.9, -2.2, 1.4];
        for fam in [ImageFamily::ClassShapes, ImageFamily::Ellipses, ImageFamily::Gradients, ImageFamily::Rings, ImageFamily::Checkers] {
            for prompt in 0..2 {
                let img = fam.target(prompt, &latent, 16, 16);
                assert!(img.pixels.iter().all(|&p| p > 0.0 && p < 1.0), "{}", fam.name());
            }
            assert_eq!(ImageFamily::from_name(fam.name()), Some(fam));
        }
    }

    #[test]
    fn class_shapes_differ_by_prompt() {
        let latent = [0.0; 8];
        let a = ImageFamily::ClassShapes.target(0, &latent, 16, 16);
        let b = ImageFamily::ClassShapes.target(1, &latent, 16, 16);
        assert!(a.mse(&b) > 0.02);
    }
}
