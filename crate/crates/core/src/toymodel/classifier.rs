//! Energy-based classifier built from a label-conditional noise predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, EnergyModel};
use crate::error::{invalid, Result};
use crate::image::Image;
use crate::params::LayeredParams;
use crate::rng::{self, tag};

/// Label-conditional noise prediction `eps(x_t, y)` at noise level `sigma`.
pub trait NoisePredictor: Send + Sync {
    fn num_labels(&self) -> usize;

    fn predict(&self, noisy: &[f64], label: usize, sigma: f64, out: &mut [f64]);

    /// Adds `J^T cotangent` to `out`, where `J` is the Jacobian of
    /// `predict` with respect to `noisy`.
    fn vjp(&self, noisy: &[f64], label: usize, sigma: f64, cotangent: &[f64], out: &mut [f64]);
}

/// Bayes-optimal noise predictor for isotropic Gaussian classes
/// `x | y ~ N(mu_y, s^2 I)` under `x_t = x + sigma * eta`:
/// `eps(x_t, y) = sigma (x_t - mu_y) / (s^2 + sigma^2)`.
///
/// Parameter blocks: the stacked class prototypes, then `ln s^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDenoiser {
    pub params: LayeredParams,
    pub num_labels: usize,
    pub dim: usize,
}

impl GaussianDenoiser {
    pub fn new(prototypes: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let num_labels = prototypes.len();
        if num_labels < 2 {
            return invalid("need prototypes for at least two labels");
        }
        let dim = prototypes[0].len();
        if dim == 0 || prototypes.iter().any(|p| p.len() != dim) {
            return invalid("prototypes must share one nonzero dimension");
        }
        if !(variance.is_finite() && variance > 0.0) {
            return invalid("class variance must be positive");
        }
        let params = LayeredParams::new(vec![prototypes.concat(), vec![variance.ln()]])?;
        Ok(Self { params, num_labels, dim })
    }

    pub fn from_params(params: LayeredParams, num_labels: usize) -> Result<Self> {
        if params.num_layers() != 2 || params.block(1).len() != 1 || !params.block(0).len().is_multiple_of(num_labels) {
            return invalid("denoiser parameters must be [prototypes, ln variance]");
        }
        let dim = params.block(0).len() / num_labels;
        Ok(Self { params, num_labels, dim })
    }

    /// Fits prototypes as per-label means and the variance as the pooled
    /// per-pixel variance, floored at `min_variance`.
    pub fn fit(samples: &[Vec<Image>], min_variance: f64) -> Result<Self> {
        let mut protos = Vec::new();
        let mut sq = 0.0;
        let mut count = 0usize;
        for imgs in samples {
            if imgs.is_empty() {
                return invalid("every label needs at least one sample");
            }
            let dim = imgs[0].len();
            let mut mean = vec![0.0; dim];
            for img in imgs {
                for (m, p) in mean.iter_mut().zip(&img.pixels) {
                    *m += p / imgs.len() as f64;
                }
            }
            for img in imgs {
                sq += img.pixels.iter().zip(&mean).map(|(p, m)| (p - m) * (p - m)).sum::<f64>();
                count += dim;
            }
            protos.push(mean);
        }
        Self::new(protos, (sq / count as f64).max(min_variance))
    }

    pub fn prototype(&self, label: usize) -> &[f64] {
        &self.params.block(0)[label * self.dim..(label + 1) * self.dim]
    }

    pub fn variance(&self) -> f64 {
        self.params.block(1)[0].exp()
    }

    fn gain(&self, sigma: f64) -> f64 {
        sigma / (self.variance() + sigma * sigma)
    }
}

impl NoisePredictor for GaussianDenoiser {
    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn predict(&self, noisy: &[f64], label: usize, sigma: f64, out: &mut [f64]) {
        let c = self.gain(sigma);
        for ((o, x), m) in out.iter_mut().zip(noisy).zip(self.prototype(label)) {
            *o = c * (x - m);
        }
    }

    fn vjp(&self, _noisy: &[f64], _label: usize, sigma: f64, cotangent: &[f64], out: &mut [f64]) {
        let c = self.gain(sigma);
        for (o, g) in out.iter_mut().zip(cotangent) {
            *o += c * g;
        }
    }
}

/// Geometrically spaced noise levels `first * ratio^i`.
pub fn geometric_grid(first: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| first * ratio.powi(i as i32)).collect()
}

/// Monte-Carlo energy `E(x, y) = E_{t, eta} ||eta - eps(x + sigma_t eta, y)||^2`
/// with the timestep uniform over `sigmas`, and the Gibbs posterior
/// `softmax(-E)`. One `(t, eta)` stream is shared by all labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyClassifier<P = GaussianDenoiser> {
    pub predictor: P,
    pub sigmas: Vec<f64>,
    pub mc_draws: usize,
}

impl<P: NoisePredictor> EnergyClassifier<P> {
    pub fn new(predictor: P, sigmas: Vec<f64>, mc_draws: usize) -> Result<Self> {
        if sigmas.is_empty() || sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return invalid("classifier needs positive noise levels");
        }
        if mc_draws == 0 {
            return invalid("classifier needs at least one Monte-Carlo draw");
        }
        if predictor.num_labels() < 2 {
            return invalid("classifier needs at least two labels");
        }
        Ok(Self { predictor, sigmas, mc_draws })
    }

    fn draw(&self, seed: u64, d: usize, dim: usize) -> (f64, Vec<f64>) {
        let mut r = rng::stream(seed, &[tag::CLASSIFIER, d as u64]);
        let sigma = self.sigmas[r.random_range(0..self.sigmas.len())];
        let mut eta = vec![0.0; dim];
        rng::fill_standard_normal(&mut r, &mut eta);
        (sigma, eta)
    }

    fn accumulate(&self, x: &Image, seed: u64, mut grads: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        let labels = self.predictor.num_labels();
        let dim = x.len();
        let mut energies = vec![0.0; labels];
        let mut noisy = vec![0.0; dim];
        let mut pred = vec![0.0; dim];
        let mut resid = vec![0.0; dim];
        let scale = 1.0 / self.mc_draws as f64;
        for d in 0..self.mc_draws {
            let (sigma, eta) = self.draw(seed, d, dim);
            for ((n, p), e) in noisy.iter_mut().zip(&x.pixels).zip(&eta) {
                *n = p + sigma * e;
            }
            for (y, energy) in energies.iter_mut().enumerate() {
                self.predictor.predict(&noisy, y, sigma, &mut pred);
                let mut acc = 0.0;
                for ((r, e), p) in resid.iter_mut().zip(&eta).zip(&pred) {
                    *r = e - p;
                    acc += *r * *r;
                }
                *energy += scale * acc;
                if let Some(g) = grads.as_deref_mut() {
                    // d/dx ||eta - eps(x_t)||^2 = -2 J^T (eta - eps), with dx_t/dx = I
                    resid.iter_mut().for_each(|r| *r *= -2.0 * scale);
                    self.predictor.vjp(&noisy, y, sigma, &resid, &mut g[y]);
                }
            }
        }
        energies
    }

    pub fn energy(&self, x: &Image, label: usize, seed: u64) -> f64 {
        self.accumulate(x, seed, None)[label]
    }
}

impl<P: NoisePredictor> EnergyModel for EnergyClassifier<P> {
    fn energies(&self, x: &Image, seed: u64) -> Vec<f64> {
        self.accumulate(x, seed, None)
    }

    fn energies_and_grads(&self, x: &Image, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut grads = vec![vec![0.0; x.len()]; self.predictor.num_labels()];
        let e = self.accumulate(x, seed, Some(&mut grads));
        (e, grads)
    }
}

impl<P: NoisePredictor> Classifier for EnergyClassifier<P> {
    fn num_labels(&self) -> usize {
        self.predictor.num_labels()
    }

    fn posterior(&self, x: &Image, seed: u64) -> Vec<f64> {
        softmax_neg(&self.energies(x, seed))
    }
}

/// `softmax(-energies)`, stable under constant shifts.
pub fn softmax_neg(energies: &[f64]) -> Vec<f64> {
    let m = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = energies.iter().map(|e| (-(e - m)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// `ln sum exp(-E_y)`.
pub fn log_sum_exp_neg(energies: &[f64]) -> f64 {
    let m = energies.iter().copied().fold(f64::INFINITY, f64::min);
    -m + energies.iter().map(|e| (-(e - m)).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ZeroPredictor;
    impl NoisePredictor for ZeroPredictor {
        fn num_labels(&self) -> usize {
            2
        }
        fn predict(&self, _: &[f64], _: usize, _: f64, out: &mut [f64]) {
            out.iter_mut().for_each(|o| *o = 0.0);
        }
        fn vjp(&self, _: &[f64], _: usize, _: f64, _: &[f64], _: &mut [f64]) {}
    }

    /// Recovers eta exactly for the known clean image.
    struct OraclePredictor {
        clean: Vec<f64>,
    }
    impl NoisePredictor for OraclePredictor {
        fn num_labels(&self) -> usize {
            2
        }
        fn predict(&self, noisy: &[f64], _: usize, sigma: f64, out: &mut [f64]) {
            for ((o, n), c) in out.iter_mut().zip(noisy).zip(&self.clean) {
                *o = (n - c) / sigma;
            }
        }
        fn vjp(&self, _: &[f64], _: usize, sigma: f64, cot: &[f64], out: &mut [f64]) {
            for (o, g) in out.iter_mut().zip(cot) {
                *o += g / sigma;
            }
        }
    }

    fn random_image(seed: u64) -> Image {
        let mut r = rng::stream(seed, &[]);
        Image::new(16, 16, (0..256).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    fn gaussian_classifier() -> EnergyClassifier {
        let a: Vec<f64> = (0..256).map(|i| 0.3 + 0.4 * ((i % 16) as f64 / 15.0)).collect();
        let b: Vec<f64> = (0..256).map(|i| 0.7 - 0.4 * ((i / 16) as f64 / 15.0)).collect();
        let den = GaussianDenoiser::new(vec![a, b], 0.02).unwrap();
        EnergyClassifier::new(den, geometric_grid(0.25, 2.0, 4), 32).unwrap()
    }

    #[test]
    fn zero_predictor_energy_is_dimension() {
        let clf = EnergyClassifier::new(ZeroPredictor, vec![0.5, 1.0], 64).unwrap();
        let x = random_image(1);
        let reps: Vec<f64> = (0..200).map(|s| clf.energy(&x, 0, s)).collect();
        let mean = reps.iter().sum::<f64>() / reps.len() as f64;
        // ||eta||^2 ~ chi^2_256 has variance 512; each estimate averages 64 draws
        let se = (512.0f64 / 64.0 / 200.0).sqrt();
        assert!((mean - 256.0).abs() < 4.0 * se, "mean={mean}");
    }

    #[test]
    fn oracle_predictor_energy_is_zero() {
        let x = random_image(2);
        let clf = EnergyClassifier::new(OraclePredictor { clean: x.pixels.clone() }, vec![0.5, 1.0], 8).unwrap();
        assert!(clf.energy(&x, 1, 3) < 1e-20);
    }

    #[test]
    fn energy_variance_shrinks_with_draws() {
        let x = random_image(3);
        let spread = |draws: usize| {
            let clf = EnergyClassifier::new(ZeroPredictor, vec![1.0], draws).unwrap();
            let v: Vec<f64> = (0..300).map(|s| clf.energy(&x, 0, 1000 + s)).collect();
            crate::stats::sample_variance(&v)
        };
        let ratio = spread(4) / spread(16);
        assert!(ratio > 2.5 && ratio < 6.5, "ratio={ratio}");
    }

    #[test]
    fn posterior_properties() {
        let p = softmax_neg(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let q = softmax_neg(&[5.0, 5.0 + 3f64.ln()]);
        assert!((p[0] - q[0]).abs() < 1e-15);
        assert_eq!(softmax_neg(&[2.0, 2.0]), vec![0.5, 0.5]);
        let big = softmax_neg(&[1e4, 0.0]);
        assert!(big[1] == 1.0 && big[0] >= 0.0);
        assert_eq!(argmax_lowest(&[0.9, 0.1]), 0);
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.2, 0.3, 0.3]), 1);
    }

    #[test]
    fn posterior_normalized_and_deterministic() {
        let clf = gaussian_classifier();
        for s in 0..50 {
            let x = random_image(100 + s);
            let p = clf.posterior(&x, s);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(p, clf.posterior(&x, s));
        }
    }

    #[test]
    fn predict_agrees_with_min_energy() {
        let clf = gaussian_classifier();
        for s in 0..1000 {
            let x = random_image(5000 + s);
            let e = clf.energies(&x, s);
            let min_label = if e[1] < e[0] { 1 } else { 0 };
            assert_eq!(clf.predict(&x, s), min_label);
        }
    }

    #[test]
    fn energy_gradient_matches_central_differences() {
        let clf = gaussian_classifier();
        let x = random_image(9);
        let (_, grads) = clf.energies_and_grads(&x, 4);
        let h = 1e-6;
        for (y, grad) in grads.iter().enumerate().take(2) {
            for idx in [0usize, 77, 255] {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.pixels[idx] += h;
                xm.pixels[idx] -= h;
                let fd = (clf.energy(&xp, y, 4) - clf.energy(&xm, y, 4)) / (2.0 * h);
                assert!((fd - grad[idx]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn fit_recovers_means_and_pooled_variance() {
        let a = Image::new(1, 2, vec![0.0, 1.0]).unwrap();
        let b = Image::new(1, 2, vec![0.2, 0.8]).unwrap();
        let c = Image::new(1, 2, vec![0.5, 0.5]).unwrap();
        let den = GaussianDenoiser::fit(&[vec![a, b], vec![c]], 1e-6).unwrap();
        assert!((den.prototype(0)[0] - 0.1).abs() < 1e-15);
        assert_eq!(den.prototype(1), &[0.5, 0.5]);
        // squared deviations 0.01 * 4 over 6 pixel entries
        assert!((den.variance() - 0.04 / 6.0).abs() < 1e-15);
    }
}
