//! Dense latent-to-image generator with hand-written backpropagation.

use serde::{Deserialize, Serialize};

use super::data::ImageFamily;
use super::Generator;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::params::{LayeredParams, Layout};
use crate::rng::{self, tag};

/// Shape of the toy generator. Each dense layer (weights followed by bias)
/// is one parameter block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub latent_dim: usize,
    pub num_labels: usize,
    pub hidden: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { latent_dim: 8, num_labels: 2, hidden: vec![32, 32, 64], height: 16, width: 16 }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_labels < 2 {
            return invalid("generator needs a latent and at least two prompts");
        }
        if self.hidden.len() < 2 || self.hidden.len() > 5 {
            return invalid("generator needs between 2 and 5 hidden layers");
        }
        if self.hidden.contains(&0) || self.height == 0 || self.width == 0 {
            return invalid("generator dimensions must be positive");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.num_labels
    }

    pub fn output_dim(&self) -> usize {
        self.height * self.width
    }

    /// `(fan_in, fan_out)` of every dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.output_dim());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn layout(&self) -> Layout {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).collect()
    }
}

/// Activations recorded by a forward pass, input first, image last.
#[derive(Debug, Clone)]
pub struct Trace {
    pub activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("non-empty trace")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGenerator {
    pub arch: Architecture,
    pub params: LayeredParams,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl ToyGenerator {
    /// Random initialization with `N(0, 1/fan_in)` weights and zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let blocks = arch
            .layer_shapes()
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, fan_out))| {
                let mut w = rng::standard_normal_vec(seed, &[tag::INIT, l as u64], fan_in * fan_out);
                let scale = (1.0 / fan_in as f64).sqrt();
                w.iter_mut().for_each(|v| *v *= scale);
                w.extend(std::iter::repeat_n(0.0, fan_out));
                w
            })
            .collect();
        Ok(Self { arch, params: LayeredParams::new(blocks)? })
    }

    pub fn from_params(arch: Architecture, params: LayeredParams) -> Result<Self> {
        arch.validate()?;
        if params.layout() != arch.layout() {
            return invalid(format!(
                "parameter layout {:?} does not match architecture {:?}",
                params.layout(),
                arch.layout()
            ));
        }
        Ok(Self { arch, params })
    }

    pub fn with_params(&self, params: LayeredParams) -> Result<Self> {
        Self::from_params(self.arch.clone(), params)
    }

    /// The latent draw used for `seed`; shared across prompts.
    pub fn latent(&self, seed: u64) -> Vec<f64> {
        rng::standard_normal_vec(seed, &[tag::LATENT], self.arch.latent_dim)
    }

    fn input(&self, prompt: usize, latent: &[f64]) -> Vec<f64> {
        let mut x = latent.to_vec();
        x.extend((0..self.arch.num_labels).map(|c| if c == prompt { 1.0 } else { 0.0 }));
        x
    }

    pub fn forward(&self, params: &LayeredParams, prompt: usize, latent: &[f64]) -> Result<Trace> {
        if prompt >= self.arch.num_labels {
            return invalid(format!("unknown prompt {prompt}; generator has {} labels", self.arch.num_labels));
        }
        if latent.len() != self.arch.latent_dim {
            return invalid("latent has the wrong dimension");
        }
        let shapes = self.arch.layer_shapes();
        let last = shapes.len() - 1;
        let mut acts = vec![self.input(prompt, latent)];
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let block = params.block(l);
            let (w, b) = block.split_at(fan_in * fan_out);
            let a = acts.last().unwrap();
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let pre = b[o] + row.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
                    if l == last {
                        sigmoid(pre).clamp(0.0, 1.0)
                    } else {
                        pre.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        Ok(Trace { activations: acts })
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d image`.
    pub fn backward(&self, params: &LayeredParams, trace: &Trace, image_grad: &[f64], grad: &mut LayeredParams) {
        let shapes = self.arch.layer_shapes();
        let last = shapes.len() - 1;
        let mut g = image_grad.to_vec();
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let out = &trace.activations[l + 1];
            let inp = &trace.activations[l];
            let delta: Vec<f64> = if l == last {
                g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect()
            } else {
                g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect()
            };
            let w = &params.block(l)[..fan_in * fan_out];
            let gb = grad.block_mut(l);
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut gb[o * fan_in..(o + 1) * fan_in];
                for (rv, a) in row.iter_mut().zip(inp) {
                    *rv += d * a;
                }
                gb[fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wv) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *p += d * wv;
                    }
                }
                g = prev;
            }
        }
    }

    pub fn image_from_trace(&self, trace: &Trace) -> Image {
        Image { height: self.arch.height, width: self.arch.width, pixels: trace.output().to_vec() }
    }

    /// Supervised regression onto an image family with Adam; returns the
    /// per-step mean squared errors.
    pub fn fit_family(&mut self, family: ImageFamily, opts: &FitOptions, seed: u64) -> Result<Vec<f64>> {
        let mut adam = Adam::new(&self.params, opts.learning_rate);
        let mut losses = Vec::with_capacity(opts.steps);
        for step in 0..opts.steps {
            let (loss, grad) = self.family_loss_and_grad(family, opts.batch, seed, step as u64)?;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure { step, reason: "non-finite regression loss".into() });
            }
            losses.push(loss);
            adam.step(&mut self.params, &grad);
        }
        Ok(losses)
    }

    /// Mean squared error over a batch of latents and all prompts, with gradient.
    pub fn family_loss_and_grad(
        &self,
        family: ImageFamily,
        batch: usize,
        seed: u64,
        step: u64,
    ) -> Result<(f64, LayeredParams)> {
        let mut grad = LayeredParams::zeros(&self.params.layout())?;
        let mut loss = 0.0;
        let n = (batch * self.arch.num_labels * self.arch.output_dim()) as f64;
        for b in 0..batch {
            let latent = rng::standard_normal_vec(seed, &[tag::TASK, step, b as u64], self.arch.latent_dim);
            for prompt in 0..self.arch.num_labels {
                let trace = self.forward(&self.params, prompt, &latent)?;
                let target = family.target(prompt, &latent, self.arch.height, self.arch.width);
                let g: Vec<f64> = trace
                    .output()
                    .iter()
                    .zip(&target.pixels)
                    .map(|(y, t)| {
                        loss += (y - t) * (y - t) / n;
                        2.0 * (y - t) / n
                    })
                    .collect();
                self.backward(&self.params, &trace, &g, &mut grad);
            }
        }
        Ok((loss, grad))
    }
}

impl Generator for ToyGenerator {
    fn params(&self) -> &LayeredParams {
        &self.params
    }

    fn num_labels(&self) -> usize {
        self.arch.num_labels
    }

    fn generate_with(&self, params: &LayeredParams, prompt: usize, seed: u64) -> Result<Image> {
        let trace = self.forward(params, prompt, &self.latent(seed))?;
        Ok(self.image_from_trace(&trace))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

/// Adam optimizer state over a layered parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    pub fn new(params: &LayeredParams, lr: f64) -> Self {
        let d = params.total_dim();
        Self { m: vec![0.0; d], v: vec![0.0; d], t: 0, lr }
    }

    pub fn step(&mut self, params: &mut LayeredParams, grad: &LayeredParams) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let mut idx = 0;
        for l in 0..params.num_layers() {
            let g = grad.block(l);
            for (p, gv) in params.block_mut(l).iter_mut().zip(g) {
                self.m[idx] = B1 * self.m[idx] + (1.0 - B1) * gv;
                self.v[idx] = B2 * self.v[idx] + (1.0 - B2) * gv * gv;
                *p -= self.lr * (self.m[idx] / c1) / ((self.v[idx] / c2).sqrt() + 1e-8);
                idx += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyGenerator {
        ToyGenerator::init(Architecture::default(), 3).unwrap()
    }

    #[test]
    fn layout_has_one_block_per_layer() {
        let arch = Architecture::default();
        assert_eq!(arch.layout(), vec![10 * 32 + 32, 32 * 32 + 32, 32 * 64 + 64, 64 * 256 + 256]);
        let g = small();
        assert_eq!(g.params.layout(), arch.layout());
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let g = small();
        assert_eq!(g.generate(0, 5).unwrap(), g.generate(0, 5).unwrap());
        assert_ne!(g.generate(0, 5).unwrap(), g.generate(1, 5).unwrap());
        for seed in 0..1000 {
            let img = g.generate((seed % 2) as usize, seed).unwrap();
            assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert!(g.generate(2, 0).is_err());
    }

    #[test]
    fn backward_matches_central_differences() {
        let g = small();
        let latent = g.latent(11);
        // objective: weighted pixel sum
        let weights: Vec<f64> = (0..256).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let f = |p: &LayeredParams| -> f64 {
            let t = g.forward(p, 1, &latent).unwrap();
            t.output().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let trace = g.forward(&g.params, 1, &latent).unwrap();
        let mut grad = LayeredParams::zeros(&g.params.layout()).unwrap();
        g.backward(&g.params, &trace, &weights, &mut grad);
        let mut r = rng::stream(1, &[]);
        use rand::Rng;
        for _ in 0..30 {
            let idx = r.random_range(0..g.params.total_dim());
            let h = 1e-6;
            let mut p = g.params.clone();
            let x0 = p.get_flat(idx);
            p.set_flat(idx, x0 + h);
            let fp = f(&p);
            p.set_flat(idx, x0 - h);
            let fm = f(&p);
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.get_flat(idx);
            let scale = fd.abs().max(an.abs()).max(1e-7);
            assert!((fd - an).abs() / scale < 1e-4, "idx={idx} fd={fd} an={an}");
        }
    }

    #[test]
    fn small_perturbations_change_output_proportionally() {
        let g = small();
        let dir = rng::standard_normal_vec(4, &[], g.params.total_dim());
        let dir = LayeredParams::from_flat(&g.params.layout(), &dir).unwrap();
        let dir = dir.scaled(1.0 / dir.l2_norm());
        let base = g.generate(0, 2).unwrap();
        let diff = |eps: f64| {
            let mut p = g.params.clone();
            p.axpy(eps, &dir).unwrap();
            g.generate_with(&p, 0, 2).unwrap().mse(&base).sqrt()
        };
        let (a, b) = (diff(1e-7), diff(2e-7));
        assert!(a > 0.0 && (b / a - 2.0).abs() < 1e-3);
    }

    #[test]
    fn fitting_reduces_regression_error() {
        let mut g = small();
        let opts = FitOptions { steps: 60, batch: 4, learning_rate: 3e-3 };
        let losses = g.fit_family(ImageFamily::ClassShapes, &opts, 9).unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "head={head} tail={tail}");
    }
}
