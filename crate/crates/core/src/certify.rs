//! Certified radii for smoothed verification under layer-adaptive Gaussian
//! noise, and the worst-case classifier that attains the bound.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::WatermarkTarget;
use crate::error::{invalid, Error, Result};
use crate::params::{mahalanobis_norm, LayeredParams, NoiseSpec};
use crate::rng::{self, tag};
use crate::stats::{self, dkw_lower, hoeffding_upper, phi, phi_inv, ConfidenceBound};
use crate::toymodel::{Classifier, Generator};
use crate::verify::{self, closed_form_threshold};

/// Probabilities are kept inside `(P_CLAMP, 1 - P_CLAMP)` before `phi_inv`.
pub const P_CLAMP: f64 = 1e-12;
pub const DEFAULT_GRID_SIZE: usize = 100;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// Type-II error of the most powerful test between the smoothing
/// distribution and its shift by a perturbation of normalized size `r`.
pub trait TypeTwoError {
    fn beta2(&self, p: f64, r: f64) -> Result<f64>;
}

/// Isotropic Gaussian smoothing in whitened coordinates.
#[derive(Debug, Clone, Copy, Default)]
pub struct Gaussian;

impl TypeTwoError for Gaussian {
    fn beta2(&self, p: f64, r: f64) -> Result<f64> {
        gaussian_beta2(p, r)
    }
}

/// `Phi(Phi^-1(p) - r)`.
pub fn gaussian_beta2(p: f64, r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::Domain(format!("radius must be nonnegative, got {r}")));
    }
    Ok(phi(phi_inv(p)? - r))
}

/// Thresholds `a <= s_1 <= ... <= s_m <= b` with lower-bounded survival
/// probabilities `P(statistic >= s_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub a: f64,
    pub b: f64,
    pub s: Vec<f64>,
    pub p_lower: Vec<f64>,
}

impl ThresholdGrid {
    pub fn new(a: f64, b: f64, s: Vec<f64>, p_lower: Vec<f64>) -> Result<Self> {
        let g = Self { a, b, s, p_lower };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s.is_empty() || self.s.len() != self.p_lower.len() {
            return invalid("grid needs as many probabilities as thresholds, at least one");
        }
        if !(self.a.is_finite() && self.b.is_finite() && self.a <= self.b) {
            return invalid("grid range must satisfy a <= b");
        }
        let mut prev = self.a;
        for &s in &self.s {
            if !(s >= prev && s <= self.b) {
                return invalid("thresholds must be sorted inside [a, b]");
            }
            prev = s;
        }
        let mut prev = 1.0;
        for &p in &self.p_lower {
            if !(0.0..=1.0).contains(&p) || p > prev {
                return invalid("survival bounds must lie in [0,1] and be non-increasing");
            }
            prev = p;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Weights `s_1 - a, s_2 - s_1, ...`.
    pub fn increments(&self) -> Vec<f64> {
        let mut prev = self.a;
        self.s
            .iter()
            .map(|&s| {
                let w = s - prev;
                prev = s;
                w
            })
            .collect()
    }

    /// Whether any probability needs clamping before `phi_inv`.
    pub fn needs_clamp(&self) -> bool {
        self.p_lower.iter().any(|&p| !(P_CLAMP..=1.0 - P_CLAMP).contains(&p))
    }
}

/// Left-hand side of the robustness condition, with a flag telling whether
/// any probability was clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LhsValue {
    pub value: f64,
    pub clamped: bool,
}

/// `a + sum_j (s_j - s_{j-1}) beta2(P_j, r / k)` for any type-II error.
pub fn certified_lhs_with<B: TypeTwoError + ?Sized>(beta: &B, grid: &ThresholdGrid, r: f64, k: f64) -> Result<LhsValue> {
    grid.validate()?;
    if !(k > 0.0 && k.is_finite()) {
        return invalid("noise scale k must be positive");
    }
    let mut value = grid.a;
    let mut clamped = false;
    for (w, &p) in grid.increments().iter().zip(&grid.p_lower) {
        let pc = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
        clamped |= pc != p;
        if *w > 0.0 {
            value += w * beta.beta2(pc, r / k)?;
        }
    }
    Ok(LhsValue { value, clamped })
}

pub fn certified_lhs(grid: &ThresholdGrid, r: f64, k: f64) -> Result<LhsValue> {
    certified_lhs_with(&Gaussian, grid, r, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Bisection,
    /// Nested uniform scans down to the tolerance; slower, kept as a cross-check.
    GridSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusSolution {
    pub r_star: f64,
    /// `false` when `lhs(0) <= tau` and no positive radius exists.
    pub certified: bool,
    pub clamped: bool,
    pub lhs_at_zero: f64,
    pub tolerance: f64,
    pub method: SolveMethod,
}

/// Largest `r` with `lhs(r) > tau`, to absolute `tolerance`.
pub fn solve_radius(grid: &ThresholdGrid, tau: f64, k: f64, tolerance: f64) -> Result<RadiusSolution> {
    solve_radius_with(&Gaussian, grid, tau, k, tolerance, SolveMethod::Bisection)
}

pub fn solve_radius_with<B: TypeTwoError + ?Sized>(
    beta: &B,
    grid: &ThresholdGrid,
    tau: f64,
    k: f64,
    tolerance: f64,
    method: SolveMethod,
) -> Result<RadiusSolution> {
    if !(tolerance > 0.0) {
        return invalid("solver tolerance must be positive");
    }
    let lhs = |r: f64| certified_lhs_with(beta, grid, r, k);
    let at_zero = lhs(0.0)?;
    let mut out = RadiusSolution {
        r_star: 0.0,
        certified: false,
        clamped: at_zero.clamped,
        lhs_at_zero: at_zero.value,
        tolerance,
        method,
    };
    if at_zero.value <= tau {
        return Ok(out);
    }
    if grid.a > tau {
        return invalid("statistic floor a exceeds tau; every radius is certified");
    }
    let mut hi = k;
    while lhs(hi)?.value > tau {
        hi *= 2.0;
        if hi > 1e6 * k {
            return Err(Error::Numeric("certified radius bracket diverged".into()));
        }
    }
    let r_star = match method {
        SolveMethod::Bisection => {
            let mut lo = 0.0;
            while hi - lo > tolerance {
                let mid = 0.5 * (lo + hi);
                if lhs(mid)?.value > tau {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        }
        SolveMethod::GridSearch => {
            // scan [0, hi] on a uniform grid, then rescan the last certified
            // cell on a finer grid until the spacing reaches the tolerance
            const CELLS: u32 = 1000;
            let mut lo = 0.0;
            let mut width = hi;
            loop {
                let h = width / f64::from(CELLS);
                let mut last = lo;
                for i in 1..=CELLS {
                    let r = lo + f64::from(i) * h;
                    if lhs(r)?.value > tau {
                        last = r;
                    } else {
                        break;
                    }
                }
                lo = last;
                width = h;
                if h <= tolerance {
                    break lo;
                }
            }
        }
    };
    out.r_star = r_star;
    out.certified = true;
    Ok(out)
}

/// Closed-form radius for one threshold at `s_1 = 1`, `a = 0`:
/// `k (Phi^-1(P) - Phi^-1(tau))`.
pub fn single_threshold_radius(p: f64, tau: f64, k: f64) -> Result<f64> {
    Ok(k * (phi_inv(p)? - phi_inv(tau)?))
}

/// Grid from observed statistics: thresholds at `m` empirical quantiles,
/// survival fractions lowered by the one-sided DKW width, then clamped to be
/// non-increasing.
pub fn build_grid(statistics: &[f64], m: usize, delta_dkw: f64) -> Result<ThresholdGrid> {
    build_grid_on(statistics, m, delta_dkw, 0.0, 1.0)
}

pub fn build_grid_on(statistics: &[f64], m: usize, delta_dkw: f64, a: f64, b: f64) -> Result<ThresholdGrid> {
    if m == 0 {
        return invalid("grid size must be positive");
    }
    let n = statistics.len();
    if n < m {
        return Err(Error::InsufficientSamples { needed: m, got: n });
    }
    if statistics.iter().any(|v| !(v.is_finite() && *v >= a && *v <= b)) {
        return invalid("statistics must lie in [a, b]");
    }
    let mut sorted = statistics.to_vec();
    sorted.sort_by(f64::total_cmp);
    let s: Vec<f64> = (0..m).map(|j| sorted[j * n / m]).collect();
    let mut p_lower = Vec::with_capacity(m);
    let mut running = 1.0f64;
    for &sj in &s {
        let survival = sorted.iter().filter(|&&v| v >= sj).count() as f64 / n as f64;
        running = running.min(dkw_lower(survival, n, delta_dkw)?.bound);
        p_lower.push(running);
    }
    ThresholdGrid::new(a, b, s, p_lower)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub watermark: WatermarkTarget,
    /// Paired noise trials.
    pub trials: usize,
    /// Generations per trial.
    pub samples: usize,
    pub grid_size: usize,
    pub alpha: f64,
    /// Joint failure probability, split evenly between the DKW and
    /// Hoeffding bounds.
    pub delta: f64,
    pub k: f64,
    pub tolerance: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            watermark: WatermarkTarget::default(),
            trials: 200,
            samples: 20,
            grid_size: DEFAULT_GRID_SIZE,
            alpha: verify::DEFAULT_ALPHA,
            delta: 0.05,
            k: 1.0,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateStatus {
    Certified,
    /// `lhs(0) <= tau`.
    NoRadius,
    /// The threshold has no root in the feasible regime.
    InfeasibleThreshold,
}

/// Self-contained certificate: every input needed to recompute the radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub status: CertificateStatus,
    pub config: CertifyConfig,
    pub seed: u64,
    /// Base noise spec; verification used `k` times these levels.
    pub noise: NoiseSpec,
    pub suspect_statistics: Vec<f64>,
    pub reference_statistics: Vec<f64>,
    pub grid: ThresholdGrid,
    pub zeta: ConfidenceBound,
    pub tau: Option<f64>,
    pub r_star: f64,
    pub clamped: bool,
    pub lhs_at_zero: f64,
    /// `1 - delta`.
    pub confidence: f64,
    pub delta_dkw: f64,
    pub delta_hoeffding: f64,
}

impl Certificate {
    pub fn is_certified(&self) -> bool {
        self.status == CertificateStatus::Certified
    }

    /// Whether `delta` lies in the certified Mahalanobis ball.
    pub fn covers(&self, delta: &LayeredParams) -> Result<bool> {
        Ok(self.is_certified() && mahalanobis_norm(delta, &self.noise.with_scale(1.0)?)? <= self.r_star)
    }

    /// Recomputes the grid, bounds, threshold and radius from the recorded
    /// statistics and compares them with the stored values.
    pub fn recheck(&self) -> Result<bool> {
        let derived = from_statistics(
            &self.config,
            self.seed,
            self.noise.clone(),
            self.suspect_statistics.clone(),
            self.reference_statistics.clone(),
        )?;
        Ok(derived == *self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Certificate from already-collected per-trial statistics.
pub fn from_statistics(
    cfg: &CertifyConfig,
    seed: u64,
    noise: NoiseSpec,
    suspect_statistics: Vec<f64>,
    reference_statistics: Vec<f64>,
) -> Result<Certificate> {
    if suspect_statistics.len() != reference_statistics.len() {
        return invalid("paired trial lists differ in length");
    }
    if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return invalid("delta must lie in (0,1)");
    }
    let delta_dkw = cfg.delta / 2.0;
    let delta_hoeffding = cfg.delta / 2.0;
    let grid = build_grid(&suspect_statistics, cfg.grid_size, delta_dkw)?;
    let zeta = hoeffding_upper(stats::mean(&reference_statistics), reference_statistics.len(), delta_hoeffding)?;
    let mut cert = Certificate {
        status: CertificateStatus::NoRadius,
        config: cfg.clone(),
        seed,
        noise,
        suspect_statistics,
        reference_statistics,
        grid,
        zeta,
        tau: None,
        r_star: 0.0,
        clamped: false,
        lhs_at_zero: 0.0,
        confidence: 1.0 - cfg.delta,
        delta_dkw,
        delta_hoeffding,
    };
    let tau = match closed_form_threshold(cfg.trials, cfg.samples, zeta.bound, cfg.alpha) {
        Ok(t) => t,
        Err(Error::InfeasibleThreshold { .. }) | Err(Error::Domain(_)) => {
            cert.status = CertificateStatus::InfeasibleThreshold;
            cert.lhs_at_zero = certified_lhs(&cert.grid, 0.0, cfg.k)?.value;
            return Ok(cert);
        }
        Err(e) => return Err(e),
    };
    let sol = solve_radius(&cert.grid, tau, cfg.k, cfg.tolerance)?;
    cert.tau = Some(tau);
    cert.r_star = sol.r_star;
    cert.clamped = sol.clamped;
    cert.lhs_at_zero = sol.lhs_at_zero;
    if sol.certified {
        cert.status = CertificateStatus::Certified;
    }
    Ok(cert)
}

/// Per-trial fractions of generations classified as the target.
pub fn trial_statistics<G: Generator, C: Classifier>(
    gen: &G,
    clf: &C,
    noise: &NoiseSpec,
    watermark: WatermarkTarget,
    trials: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(verify::watermark_robustness(gen, clf, noise, watermark, trials, samples, seed)?.per_trial)
}

/// Runs paired smoothed trials on the suspect and the reference and
/// certifies the suspect. `noise` is the base (k = 1) allocation.
pub fn certify<G: Generator, R: Generator, C: Classifier>(
    suspect: &G,
    reference: &R,
    clf: &C,
    noise: &NoiseSpec,
    cfg: &CertifyConfig,
    seed: u64,
) -> Result<Certificate> {
    let base = noise.with_scale(1.0)?;
    let scaled = noise.with_scale(cfg.k)?;
    let sus = trial_statistics(suspect, clf, &scaled, cfg.watermark, cfg.trials, cfg.samples, seed)?;
    let refs = trial_statistics(reference, clf, &scaled, cfg.watermark, cfg.trials, cfg.samples, seed)?;
    from_statistics(cfg, seed, base, sus, refs)
}

/// Worst-case statistic `h*` of the tightness construction for a shift
/// `delta` in whitened coordinates.
///
/// `h*(z) = a + sum_j (s_j - s_{j-1}) 1{Lambda(z) < T_j}` with likelihood
/// ratio `Lambda(z) = exp(<z, delta> - |delta|^2 / 2)` and
/// `ln T_j = Phi^-1(P_j) |delta| - |delta|^2 / 2`, so that the null
/// probability of `{Lambda < T_j}` is exactly `P_j`. At zero shift the
/// ratio is constant and a shared uniform randomizes the boundary instead.
#[derive(Debug, Clone)]
pub struct WorstCaseClassifier {
    grid: ThresholdGrid,
    shift: Vec<f64>,
    norm: f64,
    log_thresholds: Vec<f64>,
}

impl WorstCaseClassifier {
    pub fn new(grid: ThresholdGrid, shift: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if shift.is_empty() || shift.iter().any(|v| !v.is_finite()) {
            return invalid("shift must be a finite non-empty vector");
        }
        let norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
        let quantiles = grid
            .p_lower
            .iter()
            .map(|p| phi_inv(p.clamp(P_CLAMP, 1.0 - P_CLAMP)))
            .collect::<Result<Vec<_>>>()?;
        let log_thresholds = quantiles.iter().map(|q| q * norm - 0.5 * norm * norm).collect();
        Ok(Self { grid, shift, norm, log_thresholds })
    }

    /// Constructor with the shift along the first axis of `dim` dimensions.
    pub fn along_axis(grid: ThresholdGrid, delta_norm: f64, dim: usize) -> Result<Self> {
        if dim == 0 || !(delta_norm >= 0.0) {
            return invalid("need a positive dimension and nonnegative shift");
        }
        let mut shift = vec![0.0; dim];
        shift[0] = delta_norm;
        Self::new(grid, shift)
    }

    pub fn shift_norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// `h*` at a whitened point `z`, with `u` the boundary randomizer.
    pub fn statistic(&self, z: &[f64], u: f64) -> f64 {
        let inc = self.grid.increments();
        let mut h = self.grid.a;
        if self.norm == 0.0 {
            for (w, p) in inc.iter().zip(&self.grid.p_lower) {
                if u < *p {
                    h += w;
                }
            }
            return h;
        }
        let dot: f64 = z.iter().zip(&self.shift).map(|(a, b)| a * b).sum();
        let log_lr = dot - 0.5 * self.norm * self.norm;
        for (w, lt) in inc.iter().zip(&self.log_thresholds) {
            if log_lr < *lt {
                h += w;
            }
        }
        h
    }

    /// Draws of `h*` under the null (`shifted = false`) or the shifted
    /// distribution.
    pub fn sample(&self, draws: usize, shifted: bool, seed: u64) -> Vec<f64> {
        const CHUNK: usize = 4096;
        let chunks = draws.div_ceil(CHUNK);
        (0..chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut r = rng::stream(seed, &[tag::SAMPLE, c as u64]);
                let len = CHUNK.min(draws - c * CHUNK);
                let mut z = vec![0.0; self.dim()];
                (0..len)
                    .map(|_| {
                        rng::fill_standard_normal(&mut r, &mut z);
                        if shifted {
                            z.iter_mut().zip(&self.shift).for_each(|(a, b)| *a += b);
                        }
                        let u: f64 = r.random();
                        self.statistic(&z, u)
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}
