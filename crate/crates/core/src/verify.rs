//! Smoothed ownership verification: WR/RP estimation, the closed-form
//! threshold, the paired decision and the exact sign test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::WatermarkTarget;
use crate::error::{invalid, Error, Result};
use crate::params::{sample_noise, NoiseSpec};
use crate::rng::{derive_seed, tag};
use crate::stats::{self, binom_sf, hoeffding_upper, paired_t_statistic, t_quantile, ConfidenceBound, TStatistic};
use crate::toymodel::{Classifier, Generator};

/// Default significance level of the ownership test.
pub const DEFAULT_ALPHA: f64 = 0.05;
/// Default false-positive cap of the sign test.
pub const DEFAULT_FPR_CAP: f64 = 1e-6;

/// Seed of the latent used for verification sample `j`.
pub fn latent_seed(seed: u64, j: usize) -> u64 {
    derive_seed(seed, &[tag::LATENT, j as u64])
}

/// Seed of the parameter noise used for trial `i`.
pub fn noise_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &[tag::NOISE, i as u64])
}

/// Seed of the classifier's internal randomness for cell `(i, j)`.
pub fn classifier_seed(seed: u64, i: usize, j: usize) -> u64 {
    derive_seed(seed, &[tag::CLASSIFIER, i as u64, j as u64])
}

/// Seeds of a verification grid. Latents come from `latents`; parameter
/// noise and classifier randomness come from `draws`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSeeds {
    pub latents: u64,
    pub draws: u64,
}

impl GridSeeds {
    pub fn shared(seed: u64) -> Self {
        Self { latents: seed, draws: seed }
    }
}

/// `values[i][j]` is the outcome for noise draw `i` and verification sample `j`.
/// Noise is shared across samples within a trial.
pub fn evaluate_grid<G, T, F>(gen: &G, noise: &NoiseSpec, prompt: usize, m: usize, n: usize, seeds: GridSeeds, cell: F) -> Result<Vec<Vec<T>>>
where
    G: Generator,
    T: Send,
    F: Fn(&crate::image::Image, u64) -> T + Sync,
{
    if !noise.matches(gen.params()) {
        return invalid("noise spec layout does not match the generator");
    }
    (0..m)
        .into_par_iter()
        .map(|i| {
            let theta = gen.params().checked_add(&sample_noise(noise, noise_seed(seeds.draws, i)))?;
            (0..n)
                .into_par_iter()
                .map(|j| {
                    let x = gen.generate_with(&theta, prompt, latent_seed(seeds.latents, j))?;
                    Ok(cell(&x, classifier_seed(seeds.draws, i, j)))
                })
                .collect()
        })
        .collect()
}

/// Indicator of "classified as the watermark target" for every (trial, sample).
pub fn indicator_matrix<G: Generator, C: Classifier>(
    gen: &G,
    clf: &C,
    noise: &NoiseSpec,
    watermark: WatermarkTarget,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<bool>>> {
    evaluate_grid(gen, noise, watermark.prompt, m, n, GridSeeds::shared(seed), |x, s| clf.predict(x, s) == watermark.target)
}

/// Rate of target classifications with its per-sample and per-trial means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub rate: f64,
    /// Mean over noise draws for each verification sample.
    pub per_sample: Vec<f64>,
    /// Mean over verification samples for each noise draw.
    pub per_trial: Vec<f64>,
}

impl RateEstimate {
    pub fn from_indicators(ind: &[Vec<bool>]) -> Result<Self> {
        let m = ind.len();
        let n = ind.first().map_or(0, Vec::len);
        if m == 0 || n == 0 || ind.iter().any(|row| row.len() != n) {
            return invalid("indicator matrix must be a non-empty rectangle");
        }
        let per_trial: Vec<f64> = ind.iter().map(|row| row.iter().filter(|b| **b).count() as f64 / n as f64).collect();
        let per_sample: Vec<f64> =
            (0..n).map(|j| ind.iter().filter(|row| row[j]).count() as f64 / m as f64).collect();
        Ok(Self { rate: stats::mean(&per_sample), per_sample, per_trial })
    }
}

fn check_sizes(m: usize, n: usize) -> Result<()> {
    if m == 0 || n == 0 {
        return invalid("need at least one noise draw and one verification sample");
    }
    Ok(())
}

/// WR of a suspect generator.
pub fn watermark_robustness<G: Generator, C: Classifier>(
    gen: &G,
    clf: &C,
    noise: &NoiseSpec,
    watermark: WatermarkTarget,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<RateEstimate> {
    check_sizes(m, n)?;
    RateEstimate::from_indicators(&indicator_matrix(gen, clf, noise, watermark, m, n, seed)?)
}

/// RP of an unwatermarked reference generator. Using the same seed as the
/// WR call pairs the noise, latent and classifier draws.
pub fn reference_probability<G: Generator, C: Classifier>(
    reference: &G,
    clf: &C,
    noise: &NoiseSpec,
    watermark: WatermarkTarget,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<RateEstimate> {
    watermark_robustness(reference, clf, noise, watermark, m, n, seed)
}

/// `f(WR) = (MN + t^2) WR^2 - (2 MN zeta + t^2) WR + (MN zeta^2 - t^2 zeta + t^2 zeta^2)`,
/// nonnegative exactly when the plug-in t statistic reaches `t`.
pub fn threshold_quadratic(wr: f64, mn: f64, zeta: f64, t: f64) -> f64 {
    let t2 = t * t;
    (mn + t2) * wr * wr - (2.0 * mn * zeta + t2) * wr + (mn * zeta * zeta - t2 * zeta + t2 * zeta * zeta)
}

/// Larger root of [`threshold_quadratic`] for a given critical value `t`.
pub fn threshold_for_critical_value(mn: f64, zeta: f64, t: f64) -> Result<f64> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::Domain(format!("zeta must lie in (0,1), got {zeta}")));
    }
    if !(mn > 0.0) || !t.is_finite() {
        return invalid("MN must be positive and t finite");
    }
    let t2 = t * t;
    let lhs = mn * (1.0 - zeta);
    let rhs = t2 * zeta;
    if lhs <= rhs {
        return Err(Error::InfeasibleThreshold { lhs, rhs });
    }
    let b = 2.0 * mn * zeta + t2;
    let gamma = b * b - 4.0 * (mn + t2) * (mn * zeta * zeta - t2 * zeta + t2 * zeta * zeta);
    if gamma < 0.0 {
        return Err(Error::Domain(format!("negative discriminant {gamma}")));
    }
    Ok((b + gamma.sqrt()) / (2.0 * (mn + t2)))
}

/// `tau_{alpha,zeta}` with `t = t_{1-alpha}(N - 1)`.
pub fn closed_form_threshold(m: usize, n: usize, zeta: f64, alpha: f64) -> Result<f64> {
    check_sizes(m, n)?;
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0,1), got {alpha}"));
    }
    let t = t_quantile(1.0 - alpha, n as u64 - 1)?;
    threshold_for_critical_value((m * n) as f64, zeta, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Watermarked,
    NotWatermarked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub wr: f64,
    pub rp: f64,
    pub per_sample_wr: Vec<f64>,
    pub per_sample_rp: Vec<f64>,
    pub m: usize,
    pub n: usize,
    pub alpha: f64,
    /// Upper bound on RP used in the threshold.
    pub zeta: f64,
    pub tau: f64,
    /// `WR > tau`.
    pub decision: Decision,
    pub t_statistic: TStatistic,
    /// Paired t test on the per-sample differences at level `alpha`.
    pub t_test_rejects: bool,
    pub routes_agree: bool,
}

impl VerificationReport {
    pub fn is_watermarked(&self) -> bool {
        self.decision == Decision::Watermarked
    }
}

/// Threshold decision plus the empirical paired t test, given per-sample
/// rates over `m` noise draws.
pub fn decide_ownership(wr_samples: &[f64], rp_samples: &[f64], m: usize, alpha: f64, zeta: f64) -> Result<VerificationReport> {
    if wr_samples.len() != rp_samples.len() {
        return invalid("WR and RP sample lists differ in length");
    }
    let n = wr_samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let tau = closed_form_threshold(m, n, zeta, alpha)?;
    let diffs: Vec<f64> = wr_samples.iter().zip(rp_samples).map(|(w, r)| w - r).collect();
    let paired = paired_t_statistic(&diffs)?;
    let t_test_rejects = paired.rejects(alpha)?;
    let wr = stats::mean(wr_samples);
    let rp = stats::mean(rp_samples);
    let decision = if wr > tau { Decision::Watermarked } else { Decision::NotWatermarked };
    Ok(VerificationReport {
        wr,
        rp,
        per_sample_wr: wr_samples.to_vec(),
        per_sample_rp: rp_samples.to_vec(),
        m,
        n,
        alpha,
        zeta,
        tau,
        decision,
        t_statistic: paired.statistic,
        t_test_rejects,
        routes_agree: t_test_rejects == (decision == Decision::Watermarked),
    })
}

/// Hoeffding upper bound on RP treating the `M` per-trial rates as the
/// independent observations.
pub fn reference_bound(rp: &RateEstimate, delta: f64) -> Result<ConfidenceBound> {
    hoeffding_upper(rp.rate, rp.per_trial.len(), delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub watermark: WatermarkTarget,
    pub m: usize,
    pub n: usize,
    pub alpha: f64,
    /// Failure probability of the Hoeffding bound on RP.
    pub zeta_delta: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { watermark: WatermarkTarget::default(), m: 20, n: 20, alpha: DEFAULT_ALPHA, zeta_delta: DEFAULT_ALPHA }
    }
}

/// Full paired verification of a suspect against a reference generator.
pub fn verify<G: Generator, R: Generator, C: Classifier>(
    suspect: &G,
    reference: &R,
    clf: &C,
    noise: &NoiseSpec,
    cfg: &VerifyConfig,
    seed: u64,
) -> Result<VerificationReport> {
    let rp = reference_probability(reference, clf, noise, cfg.watermark, cfg.m, cfg.n, seed)?;
    verify_against(suspect, &rp, clf, noise, cfg, seed)
}

/// Verification against a precomputed RP estimate; `seed` must match the
/// one used for `rp` to keep the trials paired.
pub fn verify_against<G: Generator, C: Classifier>(
    suspect: &G,
    rp: &RateEstimate,
    clf: &C,
    noise: &NoiseSpec,
    cfg: &VerifyConfig,
    seed: u64,
) -> Result<VerificationReport> {
    if rp.per_trial.len() != cfg.m || rp.per_sample.len() != cfg.n {
        return invalid("reference estimate does not match the configured M and N");
    }
    let wr = watermark_robustness(suspect, clf, noise, cfg.watermark, cfg.m, cfg.n, seed)?;
    let zeta = reference_bound(rp, cfg.zeta_delta)?.bound;
    decide_ownership(&wr.per_sample, &rp.per_sample, cfg.m, cfg.alpha, zeta)
}

/// Exact one-sided sign-test p-value `P(Bin(n, 1/2) >= wins)`.
pub fn sign_test_p_value(wins: u64, n: u64) -> Result<f64> {
    binom_sf(wins, n, 0.5)
}

/// Per-image sign-test outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: u64,
    pub losses: u64,
    pub p_value: f64,
    pub detected: bool,
}

/// Sign test on paired confidences; ties are dropped.
pub fn sign_test(watermarked: &[f64], clean: &[f64], fpr_cap: f64) -> Result<SignTest> {
    if watermarked.len() != clean.len() {
        return invalid("paired confidence lists differ in length");
    }
    let wins = watermarked.iter().zip(clean).filter(|(w, c)| w > c).count() as u64;
    let losses = watermarked.iter().zip(clean).filter(|(w, c)| w < c).count() as u64;
    let p_value = sign_test_p_value(wins, wins + losses)?;
    Ok(SignTest { wins, losses, p_value, detected: p_value < fpr_cap })
}

/// Fraction of images detected by the sign test (`T@FPR`). Each entry of
/// the outer lists holds one image's confidences across paired trials.
pub fn sign_test_tpr(watermarked: &[Vec<f64>], clean: &[Vec<f64>], fpr_cap: f64) -> Result<f64> {
    if watermarked.len() != clean.len() || watermarked.is_empty() {
        return invalid("need equally many images on both sides, at least one");
    }
    let mut detected = 0usize;
    for (w, c) in watermarked.iter().zip(clean) {
        if sign_test(w, c, fpr_cap)?.detected {
            detected += 1;
        }
    }
    Ok(detected as f64 / watermarked.len() as f64)
}

/// Posterior mass on the watermark target, `[image][trial]`.
pub fn confidence_table<G: Generator, C: Classifier>(
    gen: &G,
    clf: &C,
    noise: &NoiseSpec,
    watermark: WatermarkTarget,
    trials: usize,
    images: usize,
    seeds: GridSeeds,
) -> Result<Vec<Vec<f64>>> {
    check_sizes(trials, images)?;
    let grid = evaluate_grid(gen, noise, watermark.prompt, trials, images, seeds, |x, s| clf.posterior(x, s)[watermark.target])?;
    Ok((0..images).map(|j| grid.iter().map(|row| row[j]).collect()).collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::image::Image;
    use crate::params::LayeredParams;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Emits a 1x1 image whose pixel encodes the latent seed.
    pub struct SeedEcho {
        pub params: LayeredParams,
    }

    impl Generator for SeedEcho {
        fn params(&self) -> &LayeredParams {
            &self.params
        }
        fn num_labels(&self) -> usize {
            2
        }
        fn generate_with(&self, _: &LayeredParams, _: usize, seed: u64) -> Result<Image> {
            Image::new(1, 1, vec![(seed >> 11) as f64])
        }
    }

    /// Returns label 1 exactly for the listed latent seeds.
    pub struct Scripted {
        pub hits: Vec<u64>,
    }

    impl Classifier for Scripted {
        fn num_labels(&self) -> usize {
            2
        }
        fn posterior(&self, x: &Image, _: u64) -> Vec<f64> {
            let hit = self.hits.iter().any(|s| (s >> 11) as f64 == x.pixels[0]);
            if hit {
                vec![0.0, 1.0]
            } else {
                vec![1.0, 0.0]
            }
        }
    }

    pub fn echo() -> SeedEcho {
        SeedEcho { params: LayeredParams::zeros(&[2, 1]).unwrap() }
    }

    fn noise() -> NoiseSpec {
        NoiseSpec::uniform(vec![2, 1], 0.1).unwrap()
    }

    #[test]
    fn constant_classifiers() {
        let wm = WatermarkTarget::default();
        let always = Scripted { hits: (0..50).map(|j| latent_seed(9, j)).collect() };
        let never = Scripted { hits: vec![] };
        assert_eq!(watermark_robustness(&echo(), &always, &noise(), wm, 3, 50, 9).unwrap().rate, 1.0);
        assert_eq!(watermark_robustness(&echo(), &never, &noise(), wm, 3, 50, 9).unwrap().rate, 0.0);
    }

    #[test]
    fn scripted_half() {
        let wm = WatermarkTarget::default();
        let clf = Scripted { hits: vec![latent_seed(4, 1), latent_seed(4, 3)] };
        let est = watermark_robustness(&echo(), &clf, &noise(), wm, 1, 4, 4).unwrap();
        assert_eq!(est.rate, 0.5);
        assert_eq!(est.per_sample, vec![0.0, 1.0, 0.0, 1.0]);
        let rp = reference_probability(&echo(), &clf, &noise(), wm, 1, 4, 4).unwrap();
        assert_eq!(rp, est);
    }

    #[test]
    fn threshold_example() {
        let tau = closed_form_threshold(100, 100, 0.125, 0.05).unwrap();
        assert!((tau - 0.1329).abs() < 5e-5, "{tau}");
        // smallest WR with f(WR) > 0 by a 1e-6 scan
        let t = t_quantile(0.95, 99).unwrap();
        let mut wr = 0.125;
        while threshold_quadratic(wr, 1e4, 0.125, t) <= 0.0 {
            wr += 1e-6;
        }
        assert!((wr - tau).abs() < 2e-6);
    }

    #[test]
    fn threshold_vanishing_critical_value() {
        for zeta in [0.01, 0.3, 0.9] {
            assert!((threshold_for_critical_value(100.0, zeta, 0.0).unwrap() - zeta).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_regime() {
        assert!(matches!(closed_form_threshold(1, 2, 0.9, 0.05), Err(Error::InfeasibleThreshold { .. })));
        assert!(closed_form_threshold(10, 10, 0.0, 0.05).is_err());
    }

    #[test]
    fn threshold_monotone() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let m = rng.random_range(5..200);
            let n = rng.random_range(5..200);
            let z = rng.random_range(0.01..0.6);
            let base = closed_form_threshold(m, n, z, 0.05).unwrap();
            assert!(closed_form_threshold(m, n, z + 0.01, 0.05).unwrap() > base);
            assert!(closed_form_threshold(m + 1, n, z, 0.05).unwrap() < base);
            assert!(base > z && base < 1.0);
        }
    }

    #[test]
    fn decisions() {
        let half = vec![0.5; 100];
        let r = decide_ownership(&half, &half, 100, 0.05, 0.5 + 0.01).unwrap();
        assert_eq!(r.decision, Decision::NotWatermarked);
        assert!(!r.t_test_rejects && r.routes_agree);
        let r = decide_ownership(&[1.0; 100], &[0.0; 100], 100, 0.05, 0.01).unwrap();
        assert!(r.is_watermarked() && r.t_test_rejects);
        assert_eq!(r.t_statistic, TStatistic::PositiveInfinite);
        assert!(decide_ownership(&[1.0], &[0.0], 10, 0.05, 0.1).is_err());
    }

    #[test]
    fn power_against_gap() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let (m, n) = (100, 100);
        let mut rejections = 0;
        for _ in 0..200 {
            let draw = |p: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..n).map(|_| (0..m).filter(|_| rng.random::<f64>() < p).count() as f64 / m as f64).collect()
            };
            let wr = draw(0.4, &mut rng);
            let rp = draw(0.1, &mut rng);
            let zeta = hoeffding_upper(stats::mean(&rp), m, 0.05).unwrap().bound;
            if decide_ownership(&wr, &rp, m, 0.05, zeta).unwrap().is_watermarked() {
                rejections += 1;
            }
        }
        assert!(rejections >= 198, "{rejections}");
    }

    #[test]
    fn sign_test_examples() {
        assert!(sign_test(&[1.0; 20], &[0.0; 20], 1e-6).unwrap().detected);
        let mut w = vec![1.0; 20];
        w[0] = -1.0;
        let st = sign_test(&w, &[0.0; 20], 1e-6).unwrap();
        assert!((st.p_value - 21.0 / 2f64.powi(20)).abs() < 1e-15);
        assert!(!st.detected);
        assert!(!sign_test(&[0.3; 30], &[0.3; 30], 1e-6).unwrap().detected);
        assert_eq!(sign_test_tpr(&[vec![1.0; 20], vec![0.0; 20]], &[vec![0.0; 20], vec![0.0; 20]], 1e-6).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn quadratic_vanishes_at_threshold(m in 2usize..500, n in 2usize..500, zeta in 0.001f64..0.95, alpha in 0.001f64..0.2) {
            if let Ok(tau) = closed_form_threshold(m, n, zeta, alpha) {
                let t = t_quantile(1.0 - alpha, n as u64 - 1).unwrap();
                let mn = (m * n) as f64;
                prop_assert!(threshold_quadratic(tau, mn, zeta, t).abs() < 1e-9 * (mn + t * t));
            }
        }

        #[test]
        fn paired_identical_generators_agree(seed in any::<u64>()) {
            let wm = WatermarkTarget::default();
            let clf = Scripted { hits: (0..6).filter(|j| j % 2 == 0).map(|j| latent_seed(seed, j)).collect() };
            let a = watermark_robustness(&echo(), &clf, &noise(), wm, 2, 6, seed).unwrap();
            let b = reference_probability(&echo(), &clf, &noise(), wm, 2, 6, seed).unwrap();
            prop_assert_eq!(a.rate, b.rate);
            prop_assert!(a.per_sample.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
