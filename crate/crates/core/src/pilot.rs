//! Fine-tuning sensitivity study: how consistently each layer moves across
//! surrogate fine-tuning tasks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{finetune_drift, FinetuneConfig};
use crate::error::{invalid, Result};
use crate::params::{lfs, rank_dispersion_and_stability, RankStability, TrainingTrajectory};
use crate::rng::{derive_seed, tag};
use crate::toymodel::{ImageFamily, ToyGenerator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    pub tasks: Vec<ImageFamily>,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub record_every: usize,
    /// Layers with stability above this count as stable.
    pub stable_threshold: f64,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            tasks: ImageFamily::SURROGATE_TASKS.to_vec(),
            steps: 100,
            learning_rate: 1e-3,
            batch: 8,
            record_every: 10,
            stable_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub tasks: Vec<ImageFamily>,
    /// LFS of every layer, one row per task.
    pub lfs: Vec<Vec<f64>>,
    /// Per-layer mean LFS over tasks, renormalized to mean one.
    pub mean_lfs: Vec<f64>,
    pub rank_stability: RankStability,
    pub fraction_stable: f64,
    /// Fewer than half of the layers are stable.
    pub flagged: bool,
}

/// Fine-tunes `gen` on every task and summarizes the layer sensitivities.
pub fn run_pilot(gen: &ToyGenerator, cfg: &PilotConfig, seed: u64) -> Result<(PilotReport, Vec<TrainingTrajectory>)> {
    if cfg.tasks.len() < 2 {
        return invalid("the pilot needs at least two surrogate tasks");
    }
    let trajs = cfg
        .tasks
        .par_iter()
        .enumerate()
        .map(|(i, &family)| {
            let ft = FinetuneConfig {
                family,
                steps: cfg.steps,
                learning_rate: cfg.learning_rate,
                batch: cfg.batch,
                record_every: cfg.record_every,
            };
            finetune_drift(gen, &ft, derive_seed(seed, &[tag::TASK, i as u64])).map(|(_, t)| t)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = summarize(&cfg.tasks, &trajs, cfg.stable_threshold)?;
    Ok((report, trajs))
}

pub fn summarize(tasks: &[ImageFamily], trajs: &[TrainingTrajectory], stable_threshold: f64) -> Result<PilotReport> {
    let per_task = trajs.iter().map(lfs).collect::<Result<Vec<_>>>()?;
    let layers = per_task[0].len();
    let mut mean_lfs: Vec<f64> =
        (0..layers).map(|l| per_task.iter().map(|r| r[l]).sum::<f64>() / per_task.len() as f64).collect();
    let overall = mean_lfs.iter().sum::<f64>() / layers as f64;
    mean_lfs.iter_mut().for_each(|v| *v /= overall);
    let rank_stability = rank_dispersion_and_stability(trajs)?;
    let fraction_stable = rank_stability.fraction_stable(stable_threshold);
    Ok(PilotReport {
        tasks: tasks.to_vec(),
        lfs: per_task,
        mean_lfs,
        fraction_stable,
        flagged: fraction_stable <= 0.5,
        rank_stability,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::Architecture;

    #[test]
    fn pilot_report_is_consistent() {
        let g = ToyGenerator::init(Architecture::default(), 5).unwrap();
        let cfg = PilotConfig { steps: 20, record_every: 10, ..PilotConfig::default() };
        let (rep, trajs) = run_pilot(&g, &cfg, 1).unwrap();
        assert_eq!(trajs.len(), 4);
        assert_eq!(rep.lfs.len(), 4);
        for row in &rep.lfs {
            assert!((row.iter().sum::<f64>() / row.len() as f64 - 1.0).abs() < 1e-12);
        }
        assert!((rep.mean_lfs.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        assert!(rep.rank_stability.stability.iter().all(|s| (0.0..=1.0).contains(s)));
        assert_eq!(rep.flagged, rep.fraction_stable <= 0.5);
        let ecdf = &rep.rank_stability.ecdf_stability;
        assert!(ecdf.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
        assert_eq!(ecdf.last().unwrap().1, 1.0);
    }

    #[test]
    fn single_task_rejected() {
        let g = ToyGenerator::init(Architecture::default(), 5).unwrap();
        let cfg = PilotConfig { tasks: vec![ImageFamily::Rings], ..PilotConfig::default() };
        assert!(run_pilot(&g, &cfg, 1).is_err());
    }
}
