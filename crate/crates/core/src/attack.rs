//! Watermark-removal attacks in parameter space and the image-space audit.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::WatermarkTarget;
use crate::error::{invalid, Error, Result};
use crate::params::{mahalanobis_norm, LayeredParams, NoiseSpec, Snapshot, TrainingTrajectory};
use crate::rng::{self, derive_seed, tag};
use crate::toymodel::generator::Adam;
use crate::toymodel::{log_posterior, EnergyModel, Generator, ImageFamily, ToyGenerator};
use crate::verify::{self, VerifyConfig};

/// Unit sign vector with entries `+-1/sqrt(D)`.
pub fn random_direction(layout: &[usize], seed: u64) -> Result<LayeredParams> {
    let total: usize = layout.iter().sum();
    let mag = 1.0 / (total as f64).sqrt();
    let mut r = rng::stream(seed, &[tag::DIRECTION]);
    let flat: Vec<f64> = (0..total).map(|_| if r.random::<bool>() { mag } else { -mag }).collect();
    LayeredParams::from_flat(layout, &flat)
}

/// Mean `ln p(target | G(theta + delta))` over a fixed batch of watermark
/// prompt samples, with fixed classifier randomness.
pub struct RemovalSurrogate<'a, C: EnergyModel> {
    pub generator: &'a ToyGenerator,
    pub classifier: &'a C,
    pub watermark: WatermarkTarget,
    pub batch: usize,
    pub seed: u64,
}

impl<C: EnergyModel> RemovalSurrogate<'_, C> {
    fn sample_seed(&self, b: usize) -> u64 {
        derive_seed(self.seed, &[tag::SAMPLE, b as u64])
    }

    pub fn value(&self, delta: &LayeredParams) -> Result<f64> {
        Ok(self.evaluate(delta, false)?.0)
    }

    pub fn value_and_grad(&self, delta: &LayeredParams) -> Result<(f64, LayeredParams)> {
        let (v, g) = self.evaluate(delta, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn evaluate(&self, delta: &LayeredParams, want_grad: bool) -> Result<(f64, Option<LayeredParams>)> {
        let theta = self.generator.params.checked_add(delta)?;
        let n = self.batch as f64;
        let parts: Vec<Result<(f64, Option<LayeredParams>)>> = (0..self.batch)
            .into_par_iter()
            .map(|b| {
                let s = self.sample_seed(b);
                let trace = self.generator.forward(&theta, self.watermark.prompt, &self.generator.latent(s))?;
                let x = self.generator.image_from_trace(&trace);
                let (lp, gx) = log_posterior(self.classifier, &x, self.watermark.target, derive_seed(s, &[tag::CLASSIFIER]));
                let grad = if want_grad {
                    let mut g = LayeredParams::zeros(&theta.layout())?;
                    let gx: Vec<f64> = gx.iter().map(|v| v / n).collect();
                    self.generator.backward(&theta, &trace, &gx, &mut g);
                    Some(g)
                } else {
                    None
                };
                Ok((lp / n, grad))
            })
            .collect();
        let mut value = 0.0;
        let mut grad = if want_grad { Some(LayeredParams::zeros(&theta.layout())?) } else { None };
        for p in parts {
            let (v, g) = p?;
            value += v;
            if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                acc.axpy(1.0, &g)?;
            }
        }
        if !value.is_finite() || grad.as_ref().is_some_and(|g| !g.is_finite()) {
            return Err(Error::AttackFailure("non-finite surrogate or gradient".into()));
        }
        Ok((value, grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialConfig {
    pub steps: usize,
    /// Raw L2 length of each descent step before backtracking.
    pub step_size: f64,
    pub batch: usize,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self { steps: 200, step_size: 0.05, batch: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionResult {
    pub direction: LayeredParams,
    /// The surrogate had no gradient and a random direction was returned.
    pub fell_back_to_random: bool,
    /// Surrogate value after every accepted step, starting at zero shift.
    pub trace: Vec<f64>,
}

/// Normalized-gradient descent on the log-probability of the target,
/// halving the step whenever it would not decrease.
pub fn adversarial_direction<C: EnergyModel>(
    gen: &ToyGenerator,
    clf: &C,
    watermark: WatermarkTarget,
    cfg: &AdversarialConfig,
    seed: u64,
) -> Result<DirectionResult> {
    let sur = RemovalSurrogate { generator: gen, classifier: clf, watermark, batch: cfg.batch, seed };
    let layout = gen.params.layout();
    let mut delta = LayeredParams::zeros(&layout)?;
    let (mut value, mut grad) = sur.value_and_grad(&delta)?;
    let mut trace = vec![value];
    if grad.l2_norm() == 0.0 {
        return Ok(DirectionResult {
            direction: random_direction(&layout, seed)?,
            fell_back_to_random: true,
            trace,
        });
    }
    let mut step = cfg.step_size;
    for _ in 0..cfg.steps {
        let gn = grad.l2_norm();
        if gn == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = delta.clone();
            trial.axpy(-step / gn, &grad)?;
            let v = sur.value(&trial)?;
            if v < value {
                delta = trial;
                value = v;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(value);
        grad = sur.value_and_grad(&delta)?.1;
    }
    let norm = delta.l2_norm();
    if norm == 0.0 {
        return Ok(DirectionResult { direction: random_direction(&layout, seed)?, fell_back_to_random: true, trace });
    }
    Ok(DirectionResult { direction: delta.scaled(1.0 / norm), fell_back_to_random: false, trace })
}

/// Geometry of the PGD constraint set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Ball {
    /// `||delta||_2 <= budget`.
    L2,
    /// Mahalanobis ball under `noise`; steps and projection are taken in
    /// whitened coordinates, where the projection is exact.
    Mahalanobis { noise: NoiseSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub steps: usize,
    /// Step length as a fraction of the budget.
    pub step_fraction: f64,
    pub batch: usize,
    pub ball: Ball,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self { steps: 50, step_fraction: 0.1, batch: 8, ball: Ball::L2 }
    }
}

/// One PGD run at a single budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdOutcome {
    pub budget: f64,
    pub delta: LayeredParams,
    pub l2_norm: f64,
    pub mahalanobis_norm: Option<f64>,
    pub trace: Vec<f64>,
    /// Largest constraint norm seen after any projection.
    pub max_constraint_norm: f64,
    pub diverged: bool,
}

fn whitening(noise: &NoiseSpec) -> Result<Vec<f64>> {
    (0..noise.num_layers())
        .map(|l| {
            let s = noise.scaled_sigma(l);
            if s == 0.0 {
                Err(Error::SingularGeometry { layer: l })
            } else {
                Ok(s)
            }
        })
        .collect()
}

fn scale_blocks(p: &LayeredParams, factors: &[f64]) -> Result<LayeredParams> {
    let blocks = p.blocks().iter().zip(factors).map(|(b, f)| b.iter().map(|v| v * f).collect()).collect();
    LayeredParams::new(blocks)
}

/// Projected normalized-gradient descent on the target log-probability.
pub fn pgd_attack<C: EnergyModel>(
    gen: &ToyGenerator,
    clf: &C,
    watermark: WatermarkTarget,
    budget: f64,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<PgdOutcome> {
    if !(budget >= 0.0 && budget.is_finite()) {
        return invalid("budget must be finite and nonnegative");
    }
    let sur = RemovalSurrogate { generator: gen, classifier: clf, watermark, batch: cfg.batch, seed };
    let layout = gen.params.layout();
    let sigma = match &cfg.ball {
        Ball::L2 => vec![1.0; layout.len()],
        Ball::Mahalanobis { noise } => {
            if noise.dims != layout {
                return invalid("noise spec layout does not match the generator");
            }
            whitening(noise)?
        }
    };
    // `w` lives in the coordinates where the ball is Euclidean
    let mut w = LayeredParams::zeros(&layout)?;
    let mut trace = vec![sur.value(&w)?];
    let mut max_norm = 0.0f64;
    let mut diverged = false;
    if budget > 0.0 {
        let step = cfg.step_fraction * budget;
        for _ in 0..cfg.steps {
            let delta = scale_blocks(&w, &sigma)?;
            let grad = match sur.value_and_grad(&delta) {
                Ok((_, g)) => g,
                Err(Error::AttackFailure(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let gw = scale_blocks(&grad, &sigma)?;
            let gn = gw.l2_norm();
            if gn == 0.0 {
                break;
            }
            let mut next = w.clone();
            next.axpy(-step / gn, &gw)?;
            let n = next.l2_norm();
            if n > budget {
                next = next.scaled(budget / n);
            }
            max_norm = max_norm.max(next.l2_norm());
            w = next;
            match sur.value(&scale_blocks(&w, &sigma)?) {
                Ok(v) => trace.push(v),
                Err(Error::AttackFailure(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let delta = scale_blocks(&w, &sigma)?;
    let mahalanobis = match &cfg.ball {
        Ball::L2 => None,
        Ball::Mahalanobis { noise } => Some(mahalanobis_norm(&delta, noise)?),
    };
    Ok(PgdOutcome {
        budget,
        l2_norm: delta.l2_norm(),
        mahalanobis_norm: mahalanobis,
        delta,
        trace,
        max_constraint_norm: max_norm,
        diverged,
    })
}

/// Verification metric reported by the attack harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    /// Fraction of independent verifications that confirm ownership.
    Vsr { replicates: usize },
    /// Sign-test detection rate at a false-positive cap.
    TprAtFpr { trials: usize, images: usize, fpr_cap: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub metric: Metric,
    pub verify: VerifyConfig,
    pub noise: NoiseSpec,
}

/// Evaluates the configured metric of `suspect` against `reference`.
pub fn evaluate_metric<G: Generator, R: Generator, C: EnergyModel>(
    suspect: &G,
    reference: &R,
    clf: &C,
    cfg: &MetricConfig,
    seed: u64,
) -> Result<f64> {
    match cfg.metric {
        Metric::Vsr { replicates } => {
            if replicates == 0 {
                return invalid("VSR needs at least one replicate");
            }
            let hits = (0..replicates)
                .map(|r| {
                    let s = derive_seed(seed, &[tag::TRIAL, r as u64]);
                    verify::verify(suspect, reference, clf, &cfg.noise, &cfg.verify, s).map(|rep| rep.is_watermarked())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(hits.iter().filter(|h| **h).count() as f64 / replicates as f64)
        }
        Metric::TprAtFpr { trials, images, fpr_cap } => {
            let wm = cfg.verify.watermark;
            let w = verify::confidence_table(suspect, clf, &cfg.noise, wm, trials, images, verify::GridSeeds::shared(seed))?;
            let c = verify::confidence_table(reference, clf, &cfg.noise, wm, trials, images, verify::GridSeeds::shared(seed))?;
            verify::sign_test_tpr(&w, &c, fpr_cap)
        }
    }
}

/// `(budget, metric)` pairs of one attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub budget: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub kind: String,
    pub points: Vec<MetricPoint>,
    pub seed: u64,
    /// Where the perturbed checkpoint was written, if it was.
    pub checkpoint: Option<String>,
    pub flags: Vec<String>,
}

impl AttackResult {
    pub fn new(kind: impl Into<String>, points: Vec<MetricPoint>, seed: u64) -> Result<Self> {
        if points.windows(2).any(|w| w[1].budget <= w[0].budget) {
            return invalid("budget points must be strictly increasing");
        }
        if points.iter().any(|p| !(0.0..=1.0).contains(&p.metric)) {
            return invalid("metrics must lie in [0,1]");
        }
        Ok(Self { kind: kind.into(), points, seed, checkpoint: None, flags: Vec::new() })
    }
}

/// PGD at each budget, scored by `metric`.
#[allow(clippy::too_many_arguments)]
pub fn pgd_sweep<C: EnergyModel>(
    gen: &ToyGenerator,
    reference: &ToyGenerator,
    clf: &C,
    budgets: &[f64],
    cfg: &PgdConfig,
    metric: &MetricConfig,
    seed: u64,
) -> Result<(AttackResult, Vec<PgdOutcome>)> {
    let mut points = Vec::with_capacity(budgets.len());
    let mut outcomes = Vec::with_capacity(budgets.len());
    let mut flags = Vec::new();
    for &b in budgets {
        let out = pgd_attack(gen, clf, metric.verify.watermark, b, cfg, seed)?;
        if out.diverged {
            flags.push(format!("diverged at budget {b}"));
        }
        let attacked = gen.with_params(gen.params.checked_add(&out.delta)?)?;
        points.push(MetricPoint { budget: b, metric: evaluate_metric(&attacked, reference, clf, metric, seed)? });
        outcomes.push(out);
    }
    let mut result = AttackResult::new("pgd", points, seed)?;
    result.flags = flags;
    Ok((result, outcomes))
}

/// Metric values on the plane `theta + eps_n d_n + eps_a d_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub eps_n: Vec<f64>,
    pub eps_a: Vec<f64>,
    /// `values[i][j]` at `(eps_n[i], eps_a[j])`.
    pub values: Vec<Vec<f64>>,
}

impl SweepGrid {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps_n,eps_a,metric\n");
        for (i, en) in self.eps_n.iter().enumerate() {
            for (j, ea) in self.eps_a.iter().enumerate() {
                s.push_str(&format!("{en},{ea},{}\n", self.values[i][j]));
            }
        }
        s
    }
}

#[allow(clippy::too_many_arguments)]
pub fn landscape_sweep<C: EnergyModel>(
    gen: &ToyGenerator,
    reference: &ToyGenerator,
    clf: &C,
    d_n: &LayeredParams,
    d_a: &LayeredParams,
    eps_n: &[f64],
    eps_a: &[f64],
    metric: &MetricConfig,
    seed: u64,
) -> Result<SweepGrid> {
    let cells: Vec<(usize, usize)> = (0..eps_n.len()).flat_map(|i| (0..eps_a.len()).map(move |j| (i, j))).collect();
    let flat = cells
        .par_iter()
        .map(|&(i, j)| {
            let mut theta = gen.params.clone();
            theta.axpy(eps_n[i], d_n)?;
            theta.axpy(eps_a[j], d_a)?;
            evaluate_metric(&gen.with_params(theta)?, reference, clf, metric, seed)
        })
        .collect::<Result<Vec<f64>>>()?;
    let values = flat.chunks(eps_a.len().max(1)).map(<[f64]>::to_vec).collect();
    Ok(SweepGrid { eps_n: eps_n.to_vec(), eps_a: eps_a.to_vec(), values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub family: ImageFamily,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    /// Snapshot spacing in steps.
    pub record_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { family: ImageFamily::Ellipses, steps: 100, learning_rate: 1e-3, batch: 8, record_every: 10 }
    }
}

/// Fine-tunes a copy of `gen` on a surrogate regression task with Adam,
/// recording snapshots at step 0, every `record_every` steps and at the end.
pub fn finetune_drift(gen: &ToyGenerator, cfg: &FinetuneConfig, seed: u64) -> Result<(ToyGenerator, TrainingTrajectory)> {
    if cfg.record_every == 0 || cfg.batch == 0 {
        return invalid("record spacing and batch must be positive");
    }
    let mut g = gen.clone();
    let mut adam = Adam::new(&g.params, cfg.learning_rate);
    let mut snaps = vec![Snapshot { step: 0, params: g.params.clone() }];
    for step in 0..cfg.steps {
        let (loss, grad) = g.family_loss_and_grad(cfg.family, cfg.batch, seed, step as u64)?;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure { step, reason: "non-finite fine-tuning loss".into() });
        }
        adam.step(&mut g.params, &grad);
        let done = step + 1;
        if done % cfg.record_every == 0 || done == cfg.steps {
            snaps.push(Snapshot { step: done as u64, params: g.params.clone() });
        }
    }
    let traj = TrainingTrajectory::new(snaps, cfg.family.name(), cfg.learning_rate)?;
    Ok((g, traj))
}

/// Post-training compression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Compression {
    Quantize { bits: u32 },
    Prune { fraction: f64 },
}

/// Per-block uniform quantization to `2^bits` levels over the block range.
pub fn quantize(params: &LayeredParams, bits: u32) -> Result<LayeredParams> {
    if !(1..=16).contains(&bits) {
        return invalid(format!("unsupported bit width {bits}"));
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let blocks = params
        .blocks()
        .iter()
        .map(|b| {
            let lo = b.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi == lo {
                return b.clone();
            }
            let step = (hi - lo) / levels;
            b.iter().map(|v| lo + ((v - lo) / step).round() * step).collect()
        })
        .collect();
    LayeredParams::new(blocks)
}

/// Zeroes the `floor(d_l * fraction)` smallest-magnitude entries of every
/// block, ties broken by lower index first.
pub fn prune(params: &LayeredParams, fraction: f64) -> Result<LayeredParams> {
    if !(0.0..1.0).contains(&fraction) {
        return invalid(format!("prune fraction must lie in [0,1), got {fraction}"));
    }
    let blocks = params
        .blocks()
        .iter()
        .map(|b| {
            let count = (b.len() as f64 * fraction).floor() as usize;
            let mut order: Vec<usize> = (0..b.len()).collect();
            order.sort_by(|&i, &j| b[i].abs().total_cmp(&b[j].abs()).then(i.cmp(&j)));
            let mut out = b.clone();
            for &i in &order[..count] {
                out[i] = 0.0;
            }
            out
        })
        .collect();
    LayeredParams::new(blocks)
}

pub fn compress(gen: &ToyGenerator, kind: Compression) -> Result<ToyGenerator> {
    let p = match kind {
        Compression::Quantize { bits } => quantize(&gen.params, bits)?,
        Compression::Prune { fraction } => prune(&gen.params, fraction)?,
    };
    gen.with_params(p)
}

/// Average pairwise MSE among `n_images` generations for `prompt`.
pub fn within_prompt_similarity<G: Generator>(gen: &G, prompt: usize, n_images: usize, seed: u64) -> Result<f64> {
    if n_images < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n_images });
    }
    let imgs = (0..n_images)
        .map(|i| gen.generate(prompt, verify::latent_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n_images {
        for j in i + 1..n_images {
            total += imgs[i].mse(&imgs[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// `|M(p+) - M(p-)| / M(p-)` with `M` the within-prompt similarity.
pub fn image_suspiciousness<G: Generator>(
    gen: &G,
    prompt_plus: usize,
    prompt_minus: usize,
    n_images: usize,
    seed: u64,
) -> Result<f64> {
    let plus = within_prompt_similarity(gen, prompt_plus, n_images, seed)?;
    let minus = within_prompt_similarity(gen, prompt_minus, n_images, seed)?;
    if minus == 0.0 {
        return Err(Error::DegenerateAudit("reference prompt images are all identical".into()));
    }
    Ok((plus - minus).abs() / minus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::toymodel::{Architecture, Classifier};
    use proptest::prelude::*;

    fn small_gen() -> ToyGenerator {
        ToyGenerator::init(Architecture::default(), 4).unwrap()
    }

    /// Posterior independent of the image.
    struct Flat;
    impl Classifier for Flat {
        fn num_labels(&self) -> usize {
            2
        }
        fn posterior(&self, _: &Image, _: u64) -> Vec<f64> {
            vec![0.5, 0.5]
        }
    }
    impl EnergyModel for Flat {
        fn energies(&self, _: &Image, _: u64) -> Vec<f64> {
            vec![0.0, 0.0]
        }
        fn energies_and_grads(&self, x: &Image, _: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
            (vec![0.0, 0.0], vec![vec![0.0; x.len()]; 2])
        }
    }

    /// Energy difference linear in mean brightness.
    struct Brightness;
    impl Classifier for Brightness {
        fn num_labels(&self) -> usize {
            2
        }
        fn posterior(&self, x: &Image, s: u64) -> Vec<f64> {
            crate::toymodel::classifier::softmax_neg(&self.energies(x, s))
        }
    }
    impl EnergyModel for Brightness {
        fn energies(&self, x: &Image, _: u64) -> Vec<f64> {
            let m = x.pixels.iter().sum::<f64>() / x.len() as f64;
            vec![0.0, 4.0 * (0.5 - m)]
        }
        fn energies_and_grads(&self, x: &Image, s: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
            let g = vec![-4.0 / x.len() as f64; x.len()];
            (self.energies(x, s), vec![vec![0.0; x.len()], g])
        }
    }

    #[test]
    fn random_direction_is_unit_sign_vector() {
        let layout = [352usize, 1056, 2112, 16640];
        let d = random_direction(&layout, 1).unwrap();
        assert!((d.l2_norm() - 1.0).abs() < 1e-12);
        let mag = 1.0 / (d.total_dim() as f64).sqrt();
        let flat = d.to_flat();
        assert!(flat.iter().all(|v| v.abs() == mag));
        let pos = flat.iter().filter(|v| **v > 0.0).count() as f64;
        let n = flat.len() as f64;
        assert!((pos - n / 2.0).abs() < 3.0 * (n / 4.0).sqrt());
        assert_eq!(d, random_direction(&layout, 1).unwrap());
    }

    #[test]
    fn flat_classifier_falls_back() {
        let g = small_gen();
        let cfg = AdversarialConfig { steps: 3, ..AdversarialConfig::default() };
        let r = adversarial_direction(&g, &Flat, WatermarkTarget::default(), &cfg, 2).unwrap();
        assert!(r.fell_back_to_random);
        assert!((r.direction.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adversarial_trace_non_increasing() {
        let g = small_gen();
        let cfg = AdversarialConfig { steps: 15, step_size: 0.5, batch: 4 };
        let r = adversarial_direction(&g, &Brightness, WatermarkTarget::default(), &cfg, 2).unwrap();
        assert!(!r.fell_back_to_random);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.trace.last().unwrap() < &r.trace[0]);
        assert!((r.direction.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pgd_respects_budget() {
        let g = small_gen();
        let cfg = PgdConfig { steps: 10, step_fraction: 0.3, batch: 4, ball: Ball::L2 };
        for b in [0.0, 0.2, 0.4] {
            let out = pgd_attack(&g, &Brightness, WatermarkTarget::default(), b, &cfg, 1).unwrap();
            assert!(out.max_constraint_norm <= b + 1e-9);
            assert!(out.l2_norm <= b + 1e-9);
            if b == 0.0 {
                assert_eq!(out.delta.l2_norm(), 0.0);
            } else {
                assert!(out.trace.last().unwrap() < &out.trace[0]);
            }
        }
        let noise = NoiseSpec::new(vec![0.01, 0.02, 0.005, 0.03], 1.0, g.params.layout()).unwrap();
        let cfg = PgdConfig { ball: Ball::Mahalanobis { noise: noise.clone() }, ..cfg };
        let out = pgd_attack(&g, &Brightness, WatermarkTarget::default(), 1.5, &cfg, 1).unwrap();
        assert!(out.mahalanobis_norm.unwrap() <= 1.5 + 1e-9);
        assert!((mahalanobis_norm(&out.delta, &noise).unwrap() - out.mahalanobis_norm.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn finetune_records_valid_trajectory() {
        let g = small_gen();
        let cfg = FinetuneConfig { steps: 0, ..FinetuneConfig::default() };
        let (same, traj) = finetune_drift(&g, &cfg, 1).unwrap();
        assert_eq!(same, g);
        assert_eq!(traj.snapshots().len(), 1);

        let cfg = FinetuneConfig { steps: 25, record_every: 5, ..FinetuneConfig::default() };
        let (tuned, traj) = finetune_drift(&g, &cfg, 1).unwrap();
        assert_eq!(traj.snapshots().iter().map(|s| s.step).collect::<Vec<_>>(), vec![0, 5, 10, 15, 20, 25]);
        assert_eq!(traj.at_step(25).unwrap(), &tuned.params);
        let drift: Vec<f64> = traj
            .snapshots()
            .iter()
            .map(|s| s.params.checked_sub(&g.params).unwrap().l2_norm())
            .collect();
        assert!(drift.windows(2).all(|w| w[1] > w[0]), "{drift:?}");
    }

    #[test]
    fn compression_examples() {
        let p = LayeredParams::new(vec![vec![0.3, -0.1, 0.1, 0.7], vec![2.0, -2.0, 0.5]]).unwrap();
        assert_eq!(prune(&p, 0.0).unwrap(), p);
        let half = prune(&p, 0.5).unwrap();
        // |-0.1| and |0.1| tie; both are the two smallest in block 0
        assert_eq!(half.block(0), &[0.3, 0.0, 0.0, 0.7]);
        assert_eq!(half.block(1), &[2.0, -2.0, 0.0]);
        let tie = LayeredParams::new(vec![vec![0.1, -0.1, 0.1]]).unwrap();
        assert_eq!(prune(&tie, 0.34).unwrap().block(0), &[0.0, -0.1, 0.1]);
        let q = quantize(&p, 8).unwrap();
        for l in 0..2 {
            let b = p.block(l);
            let range = b.iter().copied().fold(f64::MIN, f64::max) - b.iter().copied().fold(f64::MAX, f64::min);
            for (x, y) in b.iter().zip(q.block(l)) {
                assert!((x - y).abs() <= range / 255.0 / 2.0 + 1e-15);
            }
        }
        assert!(prune(&p, 1.0).is_err());
    }

    #[test]
    fn suspiciousness_examples() {
        let g = small_gen();
        // same weights for both prompts' one-hot inputs: identical distributions
        let mut p = g.params.clone();
        let arch = &g.arch;
        let fan_out = arch.hidden[0];
        let in_dim = arch.latent_dim + arch.num_labels;
        for o in 0..fan_out {
            let w0 = p.block(0)[o * in_dim + arch.latent_dim];
            p.block_mut(0)[o * in_dim + arch.latent_dim + 1] = w0;
        }
        let twin = g.with_params(p).unwrap();
        assert_eq!(image_suspiciousness(&twin, 1, 0, 6, 3).unwrap(), 0.0);
        let two = image_suspiciousness(&g, 1, 0, 2, 3).unwrap();
        let a = within_prompt_similarity(&g, 1, 2, 3).unwrap();
        let b = within_prompt_similarity(&g, 0, 2, 3).unwrap();
        assert!((two - (a - b).abs() / b).abs() < 1e-15);
        assert!(matches!(
            image_suspiciousness(&Constant, 1, 0, 4, 0),
            Err(Error::DegenerateAudit(_))
        ));
        assert_eq!(image_suspiciousness(&Constant, 0, 1, 4, 0).unwrap(), 1.0);
    }

    /// Prompt 0 always renders the same image; prompt 1 follows the seed.
    struct Constant;
    impl Generator for Constant {
        fn params(&self) -> &LayeredParams {
            unreachable!("not used by the audit")
        }
        fn num_labels(&self) -> usize {
            2
        }
        fn generate_with(&self, _: &LayeredParams, prompt: usize, seed: u64) -> Result<Image> {
            let v = if prompt == 0 { 0.5 } else { (seed % 97) as f64 / 97.0 };
            Ok(Image::filled(4, 4, v))
        }
        fn generate(&self, prompt: usize, seed: u64) -> Result<Image> {
            let v = if prompt == 0 { 0.5 } else { (seed % 97) as f64 / 97.0 };
            Ok(Image::filled(4, 4, v))
        }
    }

    proptest! {
        #[test]
        fn prune_count_exact(vals in proptest::collection::vec(-1.0f64..1.0, 1..60), f in 0.0f64..0.99) {
            let p = LayeredParams::new(vec![vals.clone()]).unwrap();
            let out = prune(&p, f).unwrap();
            let want = (vals.len() as f64 * f).floor() as usize;
            let changed = out.block(0).iter().zip(&vals).filter(|(a, b)| a != b).count();
            let zeros_before = vals.iter().filter(|v| **v == 0.0).count();
            prop_assert!(changed <= want && changed + zeros_before >= want);
        }
    }
}
