//! Trigger-free watermark embedding under per-layer Gaussian smoothing.
//!
//! The generator is trained so that samples for the watermark prompt are
//! pushed toward a target posterior that favours the flipped label, while a
//! multi-scale SSIM term keeps every prompt close to the frozen original.
//! Gradients are evaluated at noisy parameters `theta + eps` and averaged
//! over a growing number of draws; the descent step is applied to `theta`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::ms_ssim_with_grad;
use crate::params::{sample_noise, LayeredParams, NoiseSpec};
use crate::rng::{derive_seed, tag};
use crate::toymodel::{kl_to_target, EnergyModel, Generator, ToyGenerator};

/// Which prompt carries the watermark and which label it is pushed toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkTarget {
    /// Prompt whose samples carry the watermark.
    pub prompt: usize,
    /// Label the classifier should assign to those samples.
    pub target: usize,
}

impl Default for WatermarkTarget {
    fn default() -> Self {
        Self { prompt: 0, target: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub watermark: WatermarkTarget,
    /// Mass placed on the target label by the target posterior.
    pub lambda: f64,
    pub omega0: f64,
    /// Doubling period of the draw count and regularization weight.
    pub doubling_period: u64,
    pub m_max: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub batch: usize,
    pub noise: NoiseSpec,
}

impl EmbedConfig {
    pub fn with_noise(noise: NoiseSpec) -> Self {
        Self {
            watermark: WatermarkTarget::default(),
            lambda: 0.55,
            omega0: 5e-5,
            doubling_period: 250,
            m_max: 8,
            steps: 2000,
            learning_rate: 1e-3,
            batch: 8,
            noise,
        }
    }

    pub fn validate(&self, num_labels: usize) -> Result<()> {
        let w = self.watermark;
        if w.prompt >= num_labels || w.target >= num_labels || w.prompt == w.target {
            return invalid("watermark prompt and target must be distinct labels");
        }
        if !(self.lambda > 0.5 && self.lambda < 1.0) {
            return invalid(format!("lambda must lie in (0.5, 1), got {}", self.lambda));
        }
        if !(self.omega0.is_finite() && self.omega0 >= 0.0) {
            return invalid("omega0 must be nonnegative");
        }
        if self.doubling_period == 0 || self.m_max == 0 || self.batch == 0 {
            return invalid("doubling period, m_max and batch must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return invalid("learning rate must be positive");
        }
        self.noise.validate()
    }

    /// `q*`: `lambda` on the target label, `1 - lambda` on the watermark prompt.
    pub fn target_posterior(&self, num_labels: usize) -> Vec<f64> {
        let mut q = vec![0.0; num_labels];
        q[self.watermark.target] = self.lambda;
        q[self.watermark.prompt] = 1.0 - self.lambda;
        q
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { omega0: self.omega0, doubling_period: self.doubling_period, m_max: self.m_max }
    }
}

/// Exponential growth of the draw count and regularization weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub omega0: f64,
    pub doubling_period: u64,
    pub m_max: usize,
}

impl Schedule {
    /// `2^(t / T_g)`, exact at whole periods.
    fn growth(&self, t: u64) -> f64 {
        let whole = t / self.doubling_period;
        let rem = t % self.doubling_period;
        let base = 2f64.powi(whole.min(1000) as i32);
        if rem == 0 {
            base
        } else {
            base * 2f64.powf(rem as f64 / self.doubling_period as f64)
        }
    }

    /// `(m_t, omega_t) = (min(m_max, floor(2^(t/T_g))), omega0 * 2^(t/T_g))`.
    pub fn at(&self, t: u64) -> (usize, f64) {
        let g = self.growth(t);
        let m = if g >= self.m_max as f64 { self.m_max } else { g.floor() as usize };
        (m, self.omega0 * g)
    }

    pub fn total_draws(&self, steps: u64) -> usize {
        (0..steps).map(|t| self.at(t).0).sum()
    }
}

/// Draw count and regularization weight per step.
pub trait StepSchedule: Sync {
    fn at(&self, t: u64) -> (usize, f64);
}

impl StepSchedule for Schedule {
    fn at(&self, t: u64) -> (usize, f64) {
        Schedule::at(self, t)
    }
}

/// The same weight trace with the draw count pinned to `m_max`, the
/// baseline the growth schedule is timed against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedDraws(pub Schedule);

impl StepSchedule for FixedDraws {
    fn at(&self, t: u64) -> (usize, f64) {
        (self.0.m_max, self.0.at(t).1)
    }
}

pub fn schedule(t: u64, cfg: &EmbedConfig) -> (usize, f64) {
    cfg.schedule().at(t)
}

/// Loss components at one parameter point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub kl: f64,
    pub ssim: f64,
    pub total: f64,
}

/// An objective whose weighting may change with the training step.
pub trait SmoothedObjective: Sync {
    fn evaluate(&self, params: &LayeredParams, step: u64, omega: f64) -> Result<(LossTerms, LayeredParams)>;
}

/// Watermark objective `L_KL + omega * L_ssim` on a fixed batch per step.
pub struct EmbedObjective<'a, C: EnergyModel> {
    pub generator: &'a ToyGenerator,
    /// Frozen original generator used by the fidelity term.
    pub original: &'a ToyGenerator,
    pub classifier: &'a C,
    pub config: &'a EmbedConfig,
    pub seed: u64,
}

impl<C: EnergyModel> EmbedObjective<'_, C> {
    fn classifier_seed(&self, step: u64, b: usize) -> u64 {
        derive_seed(self.seed, &[tag::CLASSIFIER, step, b as u64])
    }

    /// Mean KL to the target posterior over the batch, with gradient.
    pub fn kl_term(&self, params: &LayeredParams, step: u64, grad: Option<&mut LayeredParams>) -> Result<f64> {
        let q = self.config.target_posterior(self.generator.arch.num_labels);
        let prompt = self.config.watermark.prompt;
        let n = self.config.batch as f64;
        let mut total = 0.0;
        let mut grad = grad;
        for b in 0..self.config.batch {
            let latent = self.generator.latent(latent_seed(self.seed, step, b));
            let trace = self.generator.forward(params, prompt, &latent)?;
            let x = self.generator.image_from_trace(&trace);
            let (kl, gx) = kl_to_target(self.classifier, &x, &q, self.classifier_seed(step, b));
            total += kl / n;
            if let Some(g) = grad.as_deref_mut() {
                let gx: Vec<f64> = gx.iter().map(|v| v / n).collect();
                self.generator.backward(params, &trace, &gx, g);
            }
        }
        Ok(total)
    }

    pub fn ssim_term(
        &self,
        params: &LayeredParams,
        step: u64,
        weight: f64,
        grad: Option<&mut LayeredParams>,
    ) -> Result<f64> {
        fidelity_term(self.generator, self.original, self.config.batch, self.seed, params, step, weight, grad)
    }
}

fn latent_seed(seed: u64, step: u64, b: usize) -> u64 {
    derive_seed(seed, &[tag::SAMPLE, step, b as u64])
}

/// Mean `1 - MS-SSIM` against the frozen original over prompts and batch,
/// with the gradient scaled by `weight`.
#[allow(clippy::too_many_arguments)]
fn fidelity_term(
    generator: &ToyGenerator,
    original: &ToyGenerator,
    batch: usize,
    seed: u64,
    params: &LayeredParams,
    step: u64,
    weight: f64,
    grad: Option<&mut LayeredParams>,
) -> Result<f64> {
    let labels = generator.arch.num_labels;
    let n = (batch * labels) as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for b in 0..batch {
        let seed = latent_seed(seed, step, b);
        let latent = generator.latent(seed);
        for prompt in 0..labels {
            let trace = generator.forward(params, prompt, &latent)?;
            let x = generator.image_from_trace(&trace);
            let reference = original.generate(prompt, seed)?;
            let want_grad = grad.is_some() && weight != 0.0;
            let (score, gx) = ms_ssim_with_grad(&x, &reference, want_grad)?;
            total += (1.0 - score) / n;
            if let (Some(g), Some(gx)) = (grad.as_deref_mut(), gx) {
                let gx: Vec<f64> = gx.iter().map(|v| -weight * v / n).collect();
                generator.backward(params, &trace, &gx, g);
            }
        }
    }
    Ok(total)
}

impl<C: EnergyModel> SmoothedObjective for EmbedObjective<'_, C> {
    fn evaluate(&self, params: &LayeredParams, step: u64, omega: f64) -> Result<(LossTerms, LayeredParams)> {
        let mut grad = LayeredParams::zeros(&params.layout())?;
        let kl = self.kl_term(params, step, Some(&mut grad))?;
        let ssim = self.ssim_term(params, step, omega, Some(&mut grad))?;
        Ok((LossTerms { kl, ssim, total: kl + omega * ssim }, grad))
    }
}

/// The embedding objective at a fixed step and weight, as a plain objective.
pub struct FixedStep<'o, O: SmoothedObjective> {
    pub objective: &'o O,
    pub step: u64,
    pub omega: f64,
}

impl<O: SmoothedObjective> crate::toymodel::Objective for FixedStep<'_, O> {
    fn value(&self, params: &LayeredParams) -> Result<f64> {
        Ok(self.objective.evaluate(params, self.step, self.omega)?.0.total)
    }

    fn value_and_grad(&self, params: &LayeredParams) -> Result<(f64, LayeredParams)> {
        let (t, g) = self.objective.evaluate(params, self.step, self.omega)?;
        Ok((t.total, g))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub m_t: usize,
    pub omega_t: f64,
    pub kl: f64,
    pub ssim: f64,
    pub grad_norm: f64,
}

/// Mean of equally weighted items by pairwise recursion; a list of identical
/// items averages to that item exactly.
pub fn pairwise_mean(items: &[LayeredParams]) -> Result<LayeredParams> {
    match items.len() {
        0 => invalid("cannot average an empty list"),
        1 => Ok(items[0].clone()),
        n => {
            let (left, right) = items.split_at(n / 2);
            let a = pairwise_mean(left)?;
            let b = pairwise_mean(right)?;
            let w = right.len() as f64 / n as f64;
            let mut out = a.clone();
            out.axpy(w, &b.checked_sub(&a)?)?;
            Ok(out)
        }
    }
}

fn pairwise_mean_terms(items: &[LossTerms]) -> LossTerms {
    let n = items.len() as f64;
    let mut out = LossTerms::default();
    for t in items {
        out.kl += t.kl / n;
        out.ssim += t.ssim / n;
        out.total += t.total / n;
    }
    out
}

/// How the noise draws of a step are addressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawSeeds {
    /// Draw `i` at step `t` uses seed path `(seed, t, i)`.
    Independent,
    /// Every draw of a step reuses the first draw.
    Repeated,
}

/// Gradient descent on `objective` smoothed over layer-adaptive noise.
pub fn smoothed_descent<O: SmoothedObjective>(
    objective: &O,
    init: &LayeredParams,
    noise: &NoiseSpec,
    schedule: impl StepSchedule,
    steps: u64,
    learning_rate: f64,
    seed: u64,
) -> Result<(LayeredParams, Vec<StepRecord>)> {
    smoothed_descent_with(objective, init, noise, schedule, steps, learning_rate, seed, DrawSeeds::Independent)
}

#[allow(clippy::too_many_arguments)]
pub fn smoothed_descent_with<O: SmoothedObjective>(
    objective: &O,
    init: &LayeredParams,
    noise: &NoiseSpec,
    schedule: impl StepSchedule,
    steps: u64,
    learning_rate: f64,
    seed: u64,
    draws: DrawSeeds,
) -> Result<(LayeredParams, Vec<StepRecord>)> {
    if !noise.matches(init) {
        return invalid("noise spec layout does not match the parameters");
    }
    let mut theta = init.clone();
    let mut log = Vec::with_capacity(steps as usize);
    for t in 0..steps {
        let (m, omega) = schedule.at(t);
        let results: Vec<Result<(LossTerms, LayeredParams)>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let idx = match draws {
                    DrawSeeds::Independent => i as u64,
                    DrawSeeds::Repeated => 0,
                };
                let eps = sample_noise(noise, derive_seed(seed, &[tag::NOISE, t, idx]));
                let noisy = theta.checked_add(&eps)?;
                objective.evaluate(&noisy, t, omega)
            })
            .collect();
        let mut terms = Vec::with_capacity(m);
        let mut grads = Vec::with_capacity(m);
        for r in results {
            let (lt, g) = r?;
            terms.push(lt);
            grads.push(g);
        }
        let grad = pairwise_mean(&grads)?;
        let lt = pairwise_mean_terms(&terms);
        let grad_norm = grad.l2_norm();
        if !lt.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::TrainingFailure { step: t as usize, reason: "non-finite loss or gradient".into() });
        }
        theta.axpy(-learning_rate, &grad)?;
        log.push(StepRecord { t, m_t: m, omega_t: omega, kl: lt.kl, ssim: lt.ssim, grad_norm });
    }
    Ok((theta, log))
}

/// Result of an embedding run.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub generator: ToyGenerator,
    pub log: Vec<StepRecord>,
}

/// Trains a watermarked copy of `generator`; the input is left untouched
/// and also serves as the frozen fidelity reference.
pub fn embed<C: EnergyModel>(generator: &ToyGenerator, classifier: &C, config: &EmbedConfig, seed: u64) -> Result<Embedded> {
    config.validate(generator.arch.num_labels)?;
    if !config.noise.matches(&generator.params) {
        return invalid("noise spec layout does not match the generator");
    }
    let objective = EmbedObjective { generator, original: generator, classifier, config, seed };
    let (theta, log) = smoothed_descent(
        &objective,
        &generator.params,
        &config.noise,
        config.schedule(),
        config.steps,
        config.learning_rate,
        seed,
    )?;
    Ok(Embedded { generator: generator.with_params(theta)?, log })
}

/// Batch KL loss of `generator` at its own parameters.
pub fn kl_loss<C: EnergyModel>(generator: &ToyGenerator, classifier: &C, config: &EmbedConfig, seed: u64) -> Result<f64> {
    let obj = EmbedObjective { generator, original: generator, classifier, config, seed };
    obj.kl_term(&generator.params, 0, None)
}

/// Batch `1 - MS-SSIM` of `generator` against `original`.
pub fn ssim_loss(generator: &ToyGenerator, original: &ToyGenerator, config: &EmbedConfig, seed: u64) -> Result<f64> {
    fidelity_term(generator, original, config.batch, seed, &generator.params, 0, 0.0, None)
}
