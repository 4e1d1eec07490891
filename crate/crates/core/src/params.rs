//! Layered parameter vectors, Mahalanobis geometry, layer-adaptive noise and
//! sensitivity-guided noise allocation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, tag};

/// Block dimensions `(d_1, ..., d_L)` of a layered parameter vector.
pub type Layout = Vec<usize>;

/// A parameter vector partitioned into `L >= 1` non-empty layer blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct LayeredParams {
    blocks: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    blocks: Vec<Vec<f64>>,
}

impl TryFrom<RawParams> for LayeredParams {
    type Error = Error;
    fn try_from(raw: RawParams) -> Result<Self> {
        LayeredParams::new(raw.blocks)
    }
}

impl From<LayeredParams> for RawParams {
    fn from(p: LayeredParams) -> Self {
        RawParams { blocks: p.blocks }
    }
}

impl LayeredParams {
    pub fn new(blocks: Vec<Vec<f64>>) -> Result<Self> {
        if blocks.is_empty() {
            return invalid("layered parameters need at least one block");
        }
        if let Some(l) = blocks.iter().position(|b| b.is_empty()) {
            return invalid(format!("block {l} is empty"));
        }
        Ok(Self { blocks })
    }

    pub fn zeros(layout: &[usize]) -> Result<Self> {
        Self::new(layout.iter().map(|&d| vec![0.0; d]).collect())
    }

    /// Splits a flat vector according to `layout`.
    pub fn from_flat(layout: &[usize], flat: &[f64]) -> Result<Self> {
        let total: usize = layout.iter().sum();
        if flat.len() != total {
            return invalid(format!("flat length {} does not match layout total {total}", flat.len()));
        }
        let mut blocks = Vec::with_capacity(layout.len());
        let mut off = 0;
        for &d in layout {
            blocks.push(flat[off..off + d].to_vec());
            off += d;
        }
        Self::new(blocks)
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn layout(&self) -> Layout {
        self.blocks.iter().map(Vec::len).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn block(&self, l: usize) -> &[f64] {
        &self.blocks[l]
    }

    pub fn block_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.blocks[l]
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }

    /// Value at a flat coordinate.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for b in &self.blocks {
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for b in &mut self.blocks {
            if idx < b.len() {
                b[idx] = value;
                return;
            }
            idx -= b.len();
        }
        panic!("flat index out of range");
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.len() == b.len())
    }

    fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            invalid(format!("layout mismatch: {:?} vs {:?}", self.layout(), other.layout()))
        }
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        self.check_layout(other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        self.check_layout(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { blocks: self.blocks.iter().map(|b| b.iter().map(|&v| f(v)).collect()).collect() }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.blocks.iter().map(|b| block_sq_norm(b)).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|v| v.is_finite())
    }
}

fn block_sq_norm(b: &[f64]) -> f64 {
    b.iter().map(|v| v * v).sum()
}

/// Per-layer Gaussian smoothing levels `sigma_l` with a global scale `k`.
///
/// Layer `l` is perturbed with standard deviation `k * sigma_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: Vec<f64>,
    pub scale: f64,
    pub dims: Layout,
}

impl NoiseSpec {
    pub fn new(sigma: Vec<f64>, scale: f64, dims: Layout) -> Result<Self> {
        let spec = Self { sigma, scale, dims };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return invalid("noise layout needs at least one non-empty layer");
        }
        if self.sigma.len() != self.dims.len() {
            return invalid(format!(
                "{} noise levels for {} layers",
                self.sigma.len(),
                self.dims.len()
            ));
        }
        if self.sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return invalid("noise levels must be finite and nonnegative");
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return invalid("noise scale k must be positive");
        }
        Ok(())
    }

    /// Layer-uniform noise at level `sigma_u`.
    pub fn uniform(dims: Layout, sigma_u: f64) -> Result<Self> {
        let l = dims.len();
        Self::new(vec![sigma_u; l], 1.0, dims)
    }

    pub fn zero(dims: Layout) -> Result<Self> {
        Self::uniform(dims, 0.0)
    }

    pub fn with_scale(&self, k: f64) -> Result<Self> {
        Self::new(self.sigma.clone(), k, self.dims.clone())
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len()
    }

    /// `sigma_{k,l} = k * sigma_l`.
    pub fn scaled_sigma(&self, l: usize) -> f64 {
        self.scale * self.sigma[l]
    }

    /// The layer-uniform level with the same Mahalanobis budget,
    /// `sqrt(sum d_l sigma_l^2 / sum d_l)` (unscaled).
    pub fn budget_sigma(&self) -> f64 {
        let num: f64 = self.dims.iter().zip(&self.sigma).map(|(&d, s)| d as f64 * s * s).sum();
        let den: f64 = self.dims.iter().map(|&d| d as f64).sum();
        (num / den).sqrt()
    }

    /// Relative error of the budget-equivalence identity against `sigma_u`.
    pub fn budget_relative_error(&self, sigma_u: f64) -> f64 {
        let b = self.budget_sigma();
        ((b * b) - sigma_u * sigma_u).abs() / (sigma_u * sigma_u)
    }

    pub fn matches(&self, params: &LayeredParams) -> bool {
        params.layout() == self.dims
    }
}

/// One recorded checkpoint of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    pub params: LayeredParams,
}

/// Parameter snapshots of a fine-tuning run, strictly increasing in step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory", into = "RawTrajectory")]
pub struct TrainingTrajectory {
    snapshots: Vec<Snapshot>,
    pub dataset: String,
    pub learning_rate: f64,
}

#[derive(Serialize, Deserialize)]
struct RawTrajectory {
    snapshots: Vec<Snapshot>,
    dataset: String,
    learning_rate: f64,
}

impl TryFrom<RawTrajectory> for TrainingTrajectory {
    type Error = Error;
    fn try_from(r: RawTrajectory) -> Result<Self> {
        TrainingTrajectory::new(r.snapshots, r.dataset, r.learning_rate)
    }
}

impl From<TrainingTrajectory> for RawTrajectory {
    fn from(t: TrainingTrajectory) -> Self {
        RawTrajectory { snapshots: t.snapshots, dataset: t.dataset, learning_rate: t.learning_rate }
    }
}

impl TrainingTrajectory {
    pub fn new(snapshots: Vec<Snapshot>, dataset: impl Into<String>, learning_rate: f64) -> Result<Self> {
        if snapshots.is_empty() {
            return invalid("trajectory has no snapshots");
        }
        let layout = snapshots[0].params.layout();
        for w in snapshots.windows(2) {
            if w[1].step <= w[0].step {
                return invalid(format!("snapshot steps not increasing: {} then {}", w[0].step, w[1].step));
            }
        }
        if snapshots.iter().any(|s| s.params.layout() != layout) {
            return invalid("snapshots do not share one layout");
        }
        Ok(Self { snapshots, dataset: dataset.into(), learning_rate })
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn layout(&self) -> Layout {
        self.snapshots[0].params.layout()
    }

    pub fn first_step(&self) -> u64 {
        self.snapshots[0].step
    }

    pub fn last_step(&self) -> u64 {
        self.snapshots[self.snapshots.len() - 1].step
    }

    pub fn at_step(&self, step: u64) -> Result<&LayeredParams> {
        self.snapshots
            .binary_search_by_key(&step, |s| s.step)
            .map(|i| &self.snapshots[i].params)
            .map_err(|_| Error::InvalidArgument(format!("step {step} not recorded")))
    }
}

/// Per-layer update magnitude `||theta^l(t2) - theta^l(t1)||_2 / sqrt(d_l)`.
pub fn avg_l2_norm(traj: &TrainingTrajectory, layer: usize, t1: u64, t2: u64) -> Result<f64> {
    let a = traj.at_step(t1)?;
    let b = traj.at_step(t2)?;
    if layer >= a.num_layers() {
        return invalid(format!("layer {layer} out of range for {} layers", a.num_layers()));
    }
    let (x, y) = (a.block(layer), b.block(layer));
    let sq: f64 = x.iter().zip(y).map(|(p, q)| (q - p) * (q - p)).sum();
    Ok(sq.sqrt() / (x.len() as f64).sqrt())
}

/// Update magnitudes of every layer between the first snapshot and `end_step`.
pub fn layer_updates(traj: &TrainingTrajectory, end_step: u64) -> Result<Vec<f64>> {
    let start = traj.first_step();
    (0..traj.layout().len()).map(|l| avg_l2_norm(traj, l, start, end_step)).collect()
}

/// Layer fine-tuning sensitivity over the whole trajectory.
pub fn lfs(traj: &TrainingTrajectory) -> Result<Vec<f64>> {
    lfs_until(traj, traj.last_step())
}

/// Layer fine-tuning sensitivity between the first snapshot and `end_step`:
/// each layer's update magnitude divided by the mean magnitude over layers.
pub fn lfs_until(traj: &TrainingTrajectory, end_step: u64) -> Result<Vec<f64>> {
    if traj.snapshots().len() < 2 {
        return Err(Error::DegenerateTrajectory("need at least two snapshots".into()));
    }
    let updates = layer_updates(traj, end_step)?;
    let mean = updates.iter().sum::<f64>() / updates.len() as f64;
    if mean <= 0.0 || !mean.is_finite() {
        return Err(Error::DegenerateTrajectory("all layer updates are zero".into()));
    }
    Ok(updates.iter().map(|u| u / mean).collect())
}

/// Sensitivity-proportional allocation under a global budget `sigma_u`:
/// `sigma_l = sigma_u * LFS(l) * sqrt(sum d_j / sum d_j LFS(j)^2)`.
pub fn allocate(lfs: &[f64], dims: &[usize], sigma_u: f64) -> Result<NoiseSpec> {
    if lfs.len() != dims.len() || lfs.is_empty() {
        return invalid(format!("{} sensitivities for {} layers", lfs.len(), dims.len()));
    }
    if !(sigma_u.is_finite() && sigma_u > 0.0) {
        return invalid("sigma_u must be positive");
    }
    if let Some(l) = lfs.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return invalid(format!("LFS of layer {l} is not positive ({})", lfs[l]));
    }
    let total: f64 = dims.iter().map(|&d| d as f64).sum();
    let weighted: f64 = dims.iter().zip(lfs).map(|(&d, v)| d as f64 * v * v).sum();
    let factor = sigma_u * (total / weighted).sqrt();
    NoiseSpec::new(lfs.iter().map(|v| factor * v).collect(), 1.0, dims.to_vec())
}

/// Draws one layer-adaptive Gaussian perturbation. Block `l` is seeded from
/// `(seed, l)` so blocks can be filled in parallel without changing the draw.
pub fn sample_noise(spec: &NoiseSpec, seed: u64) -> LayeredParams {
    let blocks: Vec<Vec<f64>> = spec
        .dims
        .par_iter()
        .enumerate()
        .map(|(l, &d)| {
            let s = spec.scaled_sigma(l);
            if s == 0.0 {
                return vec![0.0; d];
            }
            let mut v = rng::standard_normal_vec(seed, &[tag::NOISE, l as u64], d);
            v.iter_mut().for_each(|x| *x *= s);
            v
        })
        .collect();
    LayeredParams::new(blocks).expect("validated noise layout")
}

/// `sqrt(sum_l ||delta^l||^2 / (k sigma_l)^2)`.
pub fn mahalanobis_norm(delta: &LayeredParams, spec: &NoiseSpec) -> Result<f64> {
    if !spec.matches(delta) {
        return invalid(format!("layout mismatch: {:?} vs {:?}", delta.layout(), spec.dims));
    }
    let mut acc = 0.0;
    for l in 0..spec.num_layers() {
        let sq = block_sq_norm(delta.block(l));
        if sq == 0.0 {
            continue;
        }
        let s = spec.scaled_sigma(l);
        if s == 0.0 {
            return Err(Error::SingularGeometry { layer: l });
        }
        acc += sq / (s * s);
    }
    Ok(acc.sqrt())
}

/// Cross-run consistency of layer update rankings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankStability {
    /// Mean absolute rank difference per layer over run pairs.
    pub rank_dispersion: Vec<f64>,
    /// `1 - RD(l) / (L - 1)`.
    pub stability: Vec<f64>,
    /// Sorted `(value, cumulative fraction)` table of the dispersions.
    pub ecdf_rank_dispersion: Vec<(f64, f64)>,
    pub ecdf_stability: Vec<(f64, f64)>,
}

impl RankStability {
    pub fn fraction_stable(&self, threshold: f64) -> f64 {
        let n = self.stability.iter().filter(|&&s| s > threshold).count();
        n as f64 / self.stability.len() as f64
    }
}

/// Fractional (average) ranks, 1-based, largest value gets rank 1.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Empirical CDF as sorted distinct values with `F(t) = #{v <= t} / n`.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    out
}

pub fn rank_dispersion_and_stability(trajs: &[TrainingTrajectory]) -> Result<RankStability> {
    if trajs.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: trajs.len() });
    }
    let layout = trajs[0].layout();
    if trajs.iter().any(|t| t.layout() != layout) {
        return invalid("trajectories do not share one layout");
    }
    let nl = layout.len();
    let ranks = trajs
        .iter()
        .map(|t| layer_updates(t, t.last_step()).map(|u| fractional_ranks(&u)))
        .collect::<Result<Vec<_>>>()?;

    let mut rd = vec![0.0; nl];
    let mut pairs = 0usize;
    for i in 0..ranks.len() {
        for j in i + 1..ranks.len() {
            pairs += 1;
            for l in 0..nl {
                rd[l] += (ranks[i][l] - ranks[j][l]).abs();
            }
        }
    }
    rd.iter_mut().for_each(|v| *v /= pairs as f64);
    let stability: Vec<f64> = if nl > 1 {
        rd.iter().map(|v| 1.0 - v / (nl as f64 - 1.0)).collect()
    } else {
        vec![1.0]
    };
    Ok(RankStability {
        ecdf_rank_dispersion: ecdf(&rd),
        ecdf_stability: ecdf(&stability),
        rank_dispersion: rd,
        stability,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(snaps: Vec<(u64, Vec<Vec<f64>>)>) -> TrainingTrajectory {
        TrainingTrajectory::new(
            snaps
                .into_iter()
                .map(|(step, b)| Snapshot { step, params: LayeredParams::new(b).unwrap() })
                .collect(),
            "test",
            1e-3,
        )
        .unwrap()
    }

    #[test]
    fn params_reject_empty_layouts() {
        assert!(LayeredParams::new(vec![]).is_err());
        assert!(LayeredParams::new(vec![vec![1.0], vec![]]).is_err());
        let a = LayeredParams::zeros(&[2, 3]).unwrap();
        let b = LayeredParams::zeros(&[3, 2]).unwrap();
        assert!(a.checked_add(&b).is_err());
        assert_eq!(a.total_dim(), 5);
    }

    #[test]
    fn trajectory_invariants() {
        let p = LayeredParams::zeros(&[2]).unwrap();
        let q = LayeredParams::zeros(&[3]).unwrap();
        assert!(TrainingTrajectory::new(vec![], "x", 0.1).is_err());
        let dup = vec![Snapshot { step: 1, params: p.clone() }, Snapshot { step: 1, params: p.clone() }];
        assert!(TrainingTrajectory::new(dup, "x", 0.1).is_err());
        let mixed = vec![Snapshot { step: 0, params: p }, Snapshot { step: 1, params: q }];
        assert!(TrainingTrajectory::new(mixed, "x", 0.1).is_err());
    }

    #[test]
    fn avg_l2_norm_examples() {
        let t = traj(vec![(0, vec![vec![0.0; 4], vec![1.0]]), (5, vec![vec![1.0; 4], vec![1.0]])]);
        assert_eq!(avg_l2_norm(&t, 0, 0, 5).unwrap(), 1.0);
        assert_eq!(avg_l2_norm(&t, 1, 0, 5).unwrap(), 0.0);
        assert_eq!(avg_l2_norm(&t, 0, 5, 5).unwrap(), 0.0);
        assert!(avg_l2_norm(&t, 2, 0, 5).is_err());
        assert!(avg_l2_norm(&t, 0, 0, 4).is_err());
    }

    #[test]
    fn avg_l2_norm_matches_loop_oracle() {
        let mut rng = rng::stream(11, &[]);
        let dims = [3usize, 5, 2];
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            dims.iter()
                .map(|&d| {
                    let mut v = vec![0.0; d];
                    rng::fill_standard_normal(rng, &mut v);
                    v
                })
                .collect()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let t = traj(vec![(0, a.clone()), (10, b.clone())]);
        for l in 0..3 {
            let mut sq = 0.0;
            for i in 0..dims[l] {
                let d = b[l][i] - a[l][i];
                sq += d * d;
            }
            let want = (sq / dims[l] as f64).sqrt();
            assert!((avg_l2_norm(&t, l, 0, 10).unwrap() - want).abs() < 1e-14);
        }
    }

    #[test]
    fn lfs_examples() {
        let single = traj(vec![(0, vec![vec![0.0; 2]]), (1, vec![vec![3.0, 4.0]])]);
        assert_eq!(lfs(&single).unwrap(), vec![1.0]);

        // per-layer update magnitudes (2, 1, 1) with d_l = 1
        let t = traj(vec![(0, vec![vec![0.0], vec![0.0], vec![0.0]]), (3, vec![vec![2.0], vec![1.0], vec![-1.0]])]);
        let v = lfs(&t).unwrap();
        for (got, want) in v.iter().zip([1.5, 0.75, 0.75]) {
            assert!((got - want).abs() < 1e-15);
        }

        let eq = traj(vec![(0, vec![vec![0.0; 2], vec![0.0; 3]]), (1, vec![vec![1.0; 2], vec![-1.0; 3]])]);
        assert!(lfs(&eq).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-15));

        let frozen = traj(vec![(0, vec![vec![1.0]]), (1, vec![vec![1.0]])]);
        assert!(matches!(lfs(&frozen), Err(Error::DegenerateTrajectory(_))));
        let short = traj(vec![(0, vec![vec![1.0]])]);
        assert!(matches!(lfs(&short), Err(Error::DegenerateTrajectory(_))));
    }

    #[test]
    fn zero_layer_surfaces_in_allocation() {
        let t = traj(vec![(0, vec![vec![0.0], vec![0.0]]), (1, vec![vec![1.0], vec![0.0]])]);
        let v = lfs(&t).unwrap();
        assert_eq!(v, vec![2.0, 0.0]);
        assert!(allocate(&v, &[1, 1], 0.01).is_err());
    }

    #[test]
    fn allocate_examples() {
        let spec = allocate(&[1.0, 1.0, 1.0], &[4, 9, 2], 0.01).unwrap();
        assert!(spec.sigma.iter().all(|&s| s == 0.01));

        let spec = allocate(&[2.0, 1.0], &[1, 3], 0.01).unwrap();
        let r = (4.0f64 / 7.0).sqrt();
        assert!((spec.sigma[0] - 0.01 * 2.0 * r).abs() < 1e-15);
        assert!((spec.sigma[1] - 0.01 * r).abs() < 1e-15);
        assert!((spec.sigma[0] - 0.0151186).abs() < 1e-7);
        assert!((spec.sigma[1] - 0.0075593).abs() < 1e-7);
        // direct substitution into the budget identity
        let lhs = 0.01f64 * 0.01;
        let rhs = (1.0 * spec.sigma[0].powi(2) + 3.0 * spec.sigma[1].powi(2)) / 4.0;
        assert!((lhs - rhs).abs() / lhs < 1e-12);

        assert!(allocate(&[1.0, -1.0], &[1, 1], 0.01).is_err());
        assert!(allocate(&[1.0, 1.0], &[1, 1], 0.0).is_err());
        assert!(allocate(&[1.0], &[1, 1], 0.01).is_err());
    }

    #[test]
    fn sample_noise_examples() {
        let zero = NoiseSpec::zero(vec![3, 4]).unwrap();
        assert_eq!(sample_noise(&zero, 5).l2_norm(), 0.0);

        let spec = NoiseSpec::new(vec![0.5, 2.0], 1.5, vec![50_000, 50_000]).unwrap();
        let a = sample_noise(&spec, 9);
        assert_eq!(a, sample_noise(&spec, 9));
        assert_ne!(a, sample_noise(&spec, 10));
        for l in 0..2 {
            let b = a.block(l);
            let mean = b.iter().sum::<f64>() / b.len() as f64;
            let var = b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / b.len() as f64;
            let want = spec.scaled_sigma(l);
            assert!((var.sqrt() - want).abs() / want < 0.02);
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let spec = NoiseSpec::new(vec![0.01], 1.0, vec![1]).unwrap();
        let d = LayeredParams::new(vec![vec![0.02]]).unwrap();
        assert!((mahalanobis_norm(&d, &spec).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(mahalanobis_norm(&LayeredParams::zeros(&[1]).unwrap(), &spec).unwrap(), 0.0);

        let singular = NoiseSpec::new(vec![0.0, 1.0], 1.0, vec![1, 1]).unwrap();
        let d = LayeredParams::new(vec![vec![1.0], vec![0.0]]).unwrap();
        assert!(matches!(mahalanobis_norm(&d, &singular), Err(Error::SingularGeometry { layer: 0 })));
        let d = LayeredParams::new(vec![vec![0.0], vec![3.0]]).unwrap();
        assert_eq!(mahalanobis_norm(&d, &singular).unwrap(), 3.0);
    }

    #[test]
    fn mahalanobis_matches_loop_oracle() {
        let spec = NoiseSpec::new(vec![0.3, 0.05, 1.7], 2.0, vec![4, 7, 3]).unwrap();
        let d = sample_noise(&NoiseSpec::uniform(vec![4, 7, 3], 1.0).unwrap(), 3);
        let flat = d.to_flat();
        let mut acc = 0.0;
        let mut off = 0;
        for l in 0..3 {
            let s = 2.0 * spec.sigma[l];
            for i in 0..spec.dims[l] {
                acc += flat[off + i] * flat[off + i] / (s * s);
            }
            off += spec.dims[l];
        }
        assert!((mahalanobis_norm(&d, &spec).unwrap() - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rank_dispersion_examples() {
        let a = traj(vec![(0, vec![vec![0.0], vec![0.0], vec![0.0]]), (1, vec![vec![3.0], vec![2.0], vec![1.0]])]);
        let b = traj(vec![(0, vec![vec![0.0], vec![0.0], vec![0.0]]), (1, vec![vec![6.0], vec![4.0], vec![0.5]])]);
        let r = rank_dispersion_and_stability(&[a.clone(), b]).unwrap();
        assert_eq!(r.rank_dispersion, vec![0.0; 3]);
        assert_eq!(r.stability, vec![1.0; 3]);

        let x = traj(vec![(0, vec![vec![0.0], vec![0.0]]), (1, vec![vec![2.0], vec![1.0]])]);
        let y = traj(vec![(0, vec![vec![0.0], vec![0.0]]), (1, vec![vec![1.0], vec![2.0]])]);
        let r = rank_dispersion_and_stability(&[x, y]).unwrap();
        assert_eq!(r.rank_dispersion, vec![1.0, 1.0]);
        assert_eq!(r.stability, vec![0.0, 0.0]);
        assert_eq!(r.ecdf_stability, vec![(0.0, 1.0)]);

        assert!(rank_dispersion_and_stability(std::slice::from_ref(&a)).is_err());
        let other = traj(vec![(0, vec![vec![0.0; 2]]), (1, vec![vec![1.0; 2]])]);
        assert!(rank_dispersion_and_stability(&[a, other]).is_err());
    }

    #[test]
    fn fractional_ranks_average_ties() {
        assert_eq!(fractional_ranks(&[1.0, 3.0, 3.0, 0.5]), vec![3.0, 1.5, 1.5, 4.0]);
    }

    #[test]
    fn ecdf_is_monotone_and_ends_at_one() {
        let e = ecdf(&[0.3, 0.1, 0.3, 0.9, 0.2]);
        assert_eq!(e.last().unwrap().1, 1.0);
        assert!(e.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        assert_eq!(e[2], (0.3, 0.8));
    }

    proptest! {
        #[test]
        fn allocation_preserves_budget(
            layers in proptest::collection::vec((1usize..500, 0.01f64..20.0), 1..12),
            sigma_u in 1e-4f64..1.0,
        ) {
            let dims: Vec<usize> = layers.iter().map(|p| p.0).collect();
            let lfs: Vec<f64> = layers.iter().map(|p| p.1).collect();
            let spec = allocate(&lfs, &dims, sigma_u).unwrap();
            prop_assert!(spec.budget_relative_error(sigma_u) <= 1e-12);
            let varies = lfs.iter().any(|v| (v - lfs[0]).abs() > 1e-9);
            if varies {
                prop_assert!(spec.sigma.iter().any(|s| (s - spec.sigma[0]).abs() > 0.0));
            }
        }

        #[test]
        fn mahalanobis_is_a_norm(seed in any::<u64>(), c in -5.0f64..5.0) {
            let spec = NoiseSpec::new(vec![0.2, 1.3, 0.07], 1.7, vec![3, 2, 5]).unwrap();
            let unit = NoiseSpec::uniform(vec![3, 2, 5], 1.0).unwrap();
            let a = sample_noise(&unit, seed);
            let b = sample_noise(&unit, seed ^ 0xff);
            let na = mahalanobis_norm(&a, &spec).unwrap();
            let nb = mahalanobis_norm(&b, &spec).unwrap();
            let nab = mahalanobis_norm(&a.checked_add(&b).unwrap(), &spec).unwrap();
            prop_assert!(nab <= na + nb + 1e-12);
            let nc = mahalanobis_norm(&a.scaled(c), &spec).unwrap();
            prop_assert!((nc - c.abs() * na).abs() <= 1e-12 * (1.0 + na));
        }

        #[test]
        fn lfs_has_unit_mean(updates in proptest::collection::vec(0.0f64..10.0, 1..10)) {
            prop_assume!(updates.iter().any(|&u| u > 1e-6));
            let n = updates.len();
            let start = LayeredParams::new(vec![vec![0.0]; n]).unwrap();
            let end = LayeredParams::new(updates.iter().map(|&u| vec![u]).collect()).unwrap();
            let t = TrainingTrajectory::new(
                vec![Snapshot { step: 0, params: start }, Snapshot { step: 1, params: end }], "p", 0.1).unwrap();
            let v = lfs(&t).unwrap();
            let mean = v.iter().sum::<f64>() / n as f64;
            prop_assert!((mean - 1.0).abs() <= 1e-12);
        }
    }
}
