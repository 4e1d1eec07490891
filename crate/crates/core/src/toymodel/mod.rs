//! Desk-scale generator and energy-based classifier.

pub mod classifier;
pub mod data;
pub mod generator;
pub mod grad;

use serde::{Deserialize, Serialize};

pub use classifier::{argmax_lowest, EnergyClassifier, GaussianDenoiser, NoisePredictor};
pub use data::ImageFamily;
pub use generator::{Architecture, FitOptions, ToyGenerator};
pub use grad::{grad_params, Objective};

use crate::error::Result;
use crate::image::Image;
use crate::params::LayeredParams;
use crate::rng::{self, tag};

/// A prompt-conditional sampler over layered parameters.
pub trait Generator: Sync {
    fn params(&self) -> &LayeredParams;

    fn num_labels(&self) -> usize;

    /// Sample for `prompt` from the latent addressed by `seed`, using
    /// `params` in place of the generator's own parameters.
    fn generate_with(&self, params: &LayeredParams, prompt: usize, seed: u64) -> Result<Image>;

    fn generate(&self, prompt: usize, seed: u64) -> Result<Image> {
        self.generate_with(self.params(), prompt, seed)
    }
}

/// A posterior over labels, deterministic given `(x, seed)`.
pub trait Classifier: Sync {
    fn num_labels(&self) -> usize;

    fn posterior(&self, x: &Image, seed: u64) -> Vec<f64>;

    fn predict(&self, x: &Image, seed: u64) -> usize {
        argmax_lowest(&self.posterior(x, seed))
    }
}

/// A classifier whose posterior is `softmax(-E)` with differentiable energies.
pub trait EnergyModel: Classifier {
    fn energies(&self, x: &Image, seed: u64) -> Vec<f64>;

    /// Energies and `d E_y / d x` for every label.
    fn energies_and_grads(&self, x: &Image, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>);
}

/// Smallest probability used when a KL divergence is taken between two
/// explicit probability vectors.
pub const PROB_FLOOR: f64 = 1e-12;

/// `KL(target || posterior)` between probability vectors, flooring the
/// posterior at [`PROB_FLOOR`].
pub fn kl_divergence(target: &[f64], posterior: &[f64]) -> f64 {
    target
        .iter()
        .zip(posterior)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, p)| q * (q.ln() - p.max(PROB_FLOOR).ln()))
        .sum()
}

/// `KL(target || softmax(-E(x)))` and its gradient with respect to `x`,
/// computed through the log-softmax so the gradient never vanishes from
/// underflow.
pub fn kl_to_target<M: EnergyModel + ?Sized>(model: &M, x: &Image, target: &[f64], seed: u64) -> (f64, Vec<f64>) {
    let (e, grads) = model.energies_and_grads(x, seed);
    let lse = classifier::log_sum_exp_neg(&e);
    let mut kl = 0.0;
    let mut g = vec![0.0; x.len()];
    for (y, q) in target.iter().enumerate() {
        let log_p = -e[y] - lse;
        if *q > 0.0 {
            kl += q * (q.ln() - log_p);
        }
        let coef = q - log_p.exp();
        for (gv, dv) in g.iter_mut().zip(&grads[y]) {
            *gv += coef * dv;
        }
    }
    (kl.max(0.0), g)
}

/// `ln p(label | x)` and its gradient with respect to `x`.
pub fn log_posterior<M: EnergyModel + ?Sized>(model: &M, x: &Image, label: usize, seed: u64) -> (f64, Vec<f64>) {
    let (e, grads) = model.energies_and_grads(x, seed);
    let lse = classifier::log_sum_exp_neg(&e);
    let mut g: Vec<f64> = grads[label].iter().map(|v| -v).collect();
    for (y, ey) in e.iter().enumerate() {
        let p = (-ey - lse).exp();
        for (gv, dv) in g.iter_mut().zip(&grads[y]) {
            *gv += p * dv;
        }
    }
    (-e[label] - lse, g)
}

/// Settings for building the default toy instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub arch: Architecture,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Samples per label used to fit the classifier's prototypes.
    pub classifier_samples: usize,
    pub min_variance: f64,
    pub sigma_first: f64,
    pub sigma_ratio: f64,
    pub num_sigmas: usize,
    pub mc_draws: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            pretrain_steps: 400,
            pretrain_batch: 8,
            pretrain_lr: 3e-3,
            classifier_samples: 256,
            min_variance: 1e-3,
            sigma_first: 1.0,
            sigma_ratio: 2.0,
            num_sigmas: 4,
            mc_draws: 32,
        }
    }
}

/// Pretrained base generator, an independently trained reference generator
/// and a classifier fitted to the base generator's outputs.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub base: ToyGenerator,
    pub reference: ToyGenerator,
    pub classifier: EnergyClassifier,
}

impl ToyInstance {
    pub fn build(cfg: &ToyConfig, seed: u64) -> Result<Self> {
        let base = pretrained_generator(cfg, rng::derive_seed(seed, &[0]))?;
        let reference = pretrained_generator(cfg, rng::derive_seed(seed, &[1]))?;
        let classifier = fit_classifier(cfg, &base, rng::derive_seed(seed, &[tag::CLASSIFIER]))?;
        Ok(Self { base, reference, classifier })
    }
}

pub fn pretrained_generator(cfg: &ToyConfig, seed: u64) -> Result<ToyGenerator> {
    let mut g = ToyGenerator::init(cfg.arch.clone(), seed)?;
    let opts = FitOptions { steps: cfg.pretrain_steps, batch: cfg.pretrain_batch, learning_rate: cfg.pretrain_lr };
    g.fit_family(ImageFamily::ClassShapes, &opts, seed)?;
    Ok(g)
}

pub fn fit_classifier(cfg: &ToyConfig, gen: &ToyGenerator, seed: u64) -> Result<EnergyClassifier> {
    let samples = (0..gen.arch.num_labels)
        .map(|y| {
            (0..cfg.classifier_samples)
                .map(|i| gen.generate(y, rng::derive_seed(seed, &[tag::SAMPLE, i as u64])))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let den = GaussianDenoiser::fit(&samples, cfg.min_variance)?;
    EnergyClassifier::new(den, classifier::geometric_grid(cfg.sigma_first, cfg.sigma_ratio, cfg.num_sigmas), cfg.mc_draws)
}
