//! Config file loading and the flag > file > default resolution.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use wmcert::attack::{AdversarialConfig, FinetuneConfig, Metric, PgdConfig};
use wmcert::certify::CertifyConfig;
use wmcert::embed::WatermarkTarget;
use wmcert::pilot::PilotConfig;
use wmcert::toymodel::{ImageFamily, ToyConfig};
use wmcert::verify::{VerifyConfig, DEFAULT_FPR_CAP};

use crate::args::{
    AllocateSection, AttackKind, AttackSection, BallKind, CertifySection, EmbedSection, MetricKind, PilotSection,
    ToySection, VerifySection,
};
use crate::UsageError;

/// Contents of the TOML config; every section is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub toy: ToySection,
    pub pilot: PilotSection,
    pub allocate: AllocateSection,
    pub embed: EmbedSection,
    pub verify: VerifySection,
    pub certify: CertifySection,
    pub attack: AttackSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }
}

/// Fields set on the command line replace those from the file.
pub fn overlay<T: Serialize + DeserializeOwned>(flags: &T, file: &T) -> anyhow::Result<T> {
    let mut merged = serde_json::to_value(file)?;
    if let (Some(dst), serde_json::Value::Object(src)) = (merged.as_object_mut(), serde_json::to_value(flags)?) {
        for (k, v) in src {
            if !v.is_null() {
                dst.insert(k, v);
            }
        }
    }
    Ok(serde_json::from_value(merged)?)
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

fn usage<T>(section: &str, msg: impl std::fmt::Display) -> anyhow::Result<T> {
    Err(UsageError(format!("[{section}] {msg}")).into())
}

fn watermark(prompt: Option<usize>, target: Option<usize>) -> WatermarkTarget {
    let mut w = WatermarkTarget::default();
    set!(w.prompt, prompt);
    set!(w.target, target);
    w
}

fn family(section: &str, name: &str) -> anyhow::Result<ImageFamily> {
    match ImageFamily::from_name(name) {
        Some(f) => Ok(f),
        None => usage(section, format!("unknown task family {name:?}")),
    }
}

pub fn toy(s: &ToySection) -> anyhow::Result<ToyConfig> {
    let mut c = ToyConfig::default();
    set!(c.pretrain_steps, s.pretrain_steps);
    set!(c.pretrain_batch, s.pretrain_batch);
    set!(c.pretrain_lr, s.pretrain_lr);
    set!(c.classifier_samples, s.classifier_samples);
    set!(c.min_variance, s.min_variance);
    set!(c.sigma_first, s.sigma_first);
    set!(c.sigma_ratio, s.sigma_ratio);
    set!(c.num_sigmas, s.num_sigmas);
    set!(c.mc_draws, s.mc_draws);
    set!(c.arch.hidden, s.hidden);
    set!(c.arch.latent_dim, s.latent_dim);
    if let Err(e) = c.arch.validate() {
        return usage("toy", e);
    }
    if !(c.pretrain_lr > 0.0) || c.pretrain_batch == 0 {
        return usage("toy", "pretrain_lr and pretrain_batch must be positive");
    }
    Ok(c)
}

pub fn pilot(s: &PilotSection) -> anyhow::Result<PilotConfig> {
    let mut c = PilotConfig::default();
    if let Some(names) = &s.tasks {
        c.tasks = names.iter().map(|n| family("pilot", n)).collect::<anyhow::Result<_>>()?;
    }
    set!(c.steps, s.steps);
    set!(c.learning_rate, s.learning_rate);
    set!(c.batch, s.batch);
    set!(c.record_every, s.record_every);
    set!(c.stable_threshold, s.stable_threshold);
    if c.tasks.len() < 2 {
        return usage("pilot", "tasks needs at least two families");
    }
    Ok(c)
}

pub fn sigma_u(s: &AllocateSection) -> anyhow::Result<f64> {
    let v = s.sigma_u.unwrap_or(0.01);
    if !(v > 0.0 && v.is_finite()) {
        return usage("allocate", format!("sigma_u must be positive, got {v}"));
    }
    Ok(v)
}

/// Embedding settings without the noise spec, which comes from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSettings {
    pub watermark: WatermarkTarget,
    pub lambda: f64,
    pub omega0: f64,
    pub doubling_period: u64,
    pub m_max: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub batch: usize,
}

impl EmbedSettings {
    pub fn into_config(self, noise: wmcert::NoiseSpec) -> wmcert::embed::EmbedConfig {
        wmcert::embed::EmbedConfig {
            watermark: self.watermark,
            lambda: self.lambda,
            omega0: self.omega0,
            doubling_period: self.doubling_period,
            m_max: self.m_max,
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch: self.batch,
            noise,
        }
    }
}

pub fn embed(s: &EmbedSection) -> anyhow::Result<EmbedSettings> {
    let d = wmcert::embed::EmbedConfig::with_noise(wmcert::NoiseSpec::uniform(vec![1], 0.0)?);
    let mut c = EmbedSettings {
        watermark: watermark(s.prompt, s.target),
        lambda: d.lambda,
        omega0: d.omega0,
        doubling_period: d.doubling_period,
        m_max: d.m_max,
        steps: d.steps,
        learning_rate: d.learning_rate,
        batch: d.batch,
    };
    set!(c.lambda, s.lambda);
    set!(c.omega0, s.omega0);
    set!(c.doubling_period, s.doubling_period);
    set!(c.m_max, s.m_max);
    set!(c.steps, s.steps);
    set!(c.learning_rate, s.learning_rate);
    set!(c.batch, s.batch);
    Ok(c)
}

pub fn verify(s: &VerifySection) -> anyhow::Result<VerifyConfig> {
    let mut c = VerifyConfig { watermark: watermark(s.prompt, s.target), ..VerifyConfig::default() };
    set!(c.m, s.m);
    set!(c.n, s.n);
    set!(c.alpha, s.alpha);
    set!(c.zeta_delta, s.zeta_delta);
    if c.m == 0 || c.n < 2 {
        return usage("verify", "m must be positive and n at least 2");
    }
    if !(c.alpha > 0.0 && c.alpha < 1.0) || !(c.zeta_delta > 0.0 && c.zeta_delta < 1.0) {
        return usage("verify", "alpha and zeta_delta must lie in (0,1)");
    }
    Ok(c)
}

pub fn certify(s: &CertifySection) -> anyhow::Result<CertifyConfig> {
    let mut c = CertifyConfig { watermark: watermark(s.prompt, s.target), ..CertifyConfig::default() };
    set!(c.trials, s.trials);
    set!(c.samples, s.samples);
    set!(c.grid_size, s.grid_size);
    set!(c.alpha, s.alpha);
    set!(c.delta, s.delta);
    set!(c.k, s.k);
    set!(c.tolerance, s.tolerance);
    if c.grid_size == 0 || c.trials < c.grid_size {
        return usage("certify", format!("trials ({}) must be at least grid_size ({})", c.trials, c.grid_size));
    }
    if !(c.k > 0.0) || !(c.tolerance > 0.0) {
        return usage("certify", "k and tolerance must be positive");
    }
    Ok(c)
}

/// Every effective attack setting, recorded whether or not the chosen kind
/// uses it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub kind: AttackKind,
    pub budgets: Vec<f64>,
    pub metric: Metric,
    pub verify: VerifyConfig,
    pub pgd: PgdSettings,
    pub adversarial: AdversarialConfig,
    pub finetune: FinetuneConfig,
    pub eps_n: Vec<f64>,
    pub eps_a: Vec<f64>,
    pub prompt_plus: usize,
    pub prompt_minus: usize,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdSettings {
    pub ball: BallKind,
    pub steps: usize,
    pub step_fraction: f64,
    pub batch: usize,
}

fn default_budgets(kind: AttackKind) -> Vec<f64> {
    match kind {
        AttackKind::Random | AttackKind::Adversarial | AttackKind::Pgd => vec![0.2, 0.4, 0.6, 0.8],
        AttackKind::Quantize => vec![2.0, 4.0, 8.0],
        AttackKind::Prune => vec![0.1, 0.3, 0.5, 0.7],
        AttackKind::Finetune => vec![0.0, 25.0, 50.0, 100.0],
        AttackKind::Sweep | AttackKind::Audit => vec![],
    }
}

pub fn attack(kind: AttackKind, s: &AttackSection, verify_section: &VerifySection) -> anyhow::Result<AttackSettings> {
    let budgets = s.budgets.clone().unwrap_or_else(|| default_budgets(kind));
    if budgets.windows(2).any(|w| w[1] <= w[0]) || budgets.iter().any(|b| !(*b >= 0.0)) {
        return usage("attack", "budgets must be nonnegative and strictly increasing");
    }
    if kind == AttackKind::Quantize && budgets.iter().any(|b| b.fract() != 0.0 || !(1.0..=16.0).contains(b)) {
        return usage("attack", "quantize budgets are bit widths between 1 and 16");
    }
    if kind == AttackKind::Prune && budgets.iter().any(|b| *b >= 1.0) {
        return usage("attack", "prune budgets are fractions below 1");
    }
    if kind == AttackKind::Finetune && budgets.iter().any(|b| b.fract() != 0.0) {
        return usage("attack", "finetune budgets are whole step counts");
    }
    let metric = match s.metric.unwrap_or(MetricKind::Vsr) {
        MetricKind::Vsr => Metric::Vsr { replicates: s.replicates.unwrap_or(10) },
        MetricKind::Tpr => Metric::TprAtFpr {
            trials: s.trials.unwrap_or(20),
            images: s.images.unwrap_or(100),
            fpr_cap: s.fpr_cap.unwrap_or(DEFAULT_FPR_CAP),
        },
    };
    let batch = s.batch.unwrap_or(8);
    let pd = PgdConfig::default();
    let pgd = PgdSettings {
        ball: s.ball.unwrap_or(BallKind::L2),
        steps: s.pgd_steps.unwrap_or(pd.steps),
        step_fraction: s.step_fraction.unwrap_or(pd.step_fraction),
        batch,
    };
    let mut adversarial = AdversarialConfig { batch, ..AdversarialConfig::default() };
    set!(adversarial.steps, s.adversarial_steps);
    set!(adversarial.step_size, s.adversarial_step_size);
    let mut finetune = FinetuneConfig { batch, ..FinetuneConfig::default() };
    if let Some(name) = &s.family {
        finetune.family = family("attack", name)?;
    }
    set!(finetune.learning_rate, s.finetune_lr);
    if kind == AttackKind::Finetune {
        finetune.steps = budgets.last().copied().unwrap_or(0.0) as usize;
        // Every budget must land on a snapshot.
        finetune.record_every = 1;
    }
    Ok(AttackSettings {
        kind,
        budgets,
        metric,
        verify: verify(verify_section)?,
        pgd,
        adversarial,
        finetune,
        eps_n: s.eps_n.clone().unwrap_or_else(|| vec![0.0, 0.5, 1.0, 2.0]),
        eps_a: s.eps_a.clone().unwrap_or_else(|| vec![0.0, 0.1, 0.2, 0.4]),
        prompt_plus: s.prompt_plus.unwrap_or(0),
        prompt_minus: s.prompt_minus.unwrap_or(1),
        images: s.images.unwrap_or(16),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: FileConfig = toml::from_str("[embed]\nsteps = 10\nomega0 = 1e-4\n").unwrap();
        let flags = EmbedSection { steps: Some(20), ..EmbedSection::default() };
        let merged = overlay(&flags, &file.embed).unwrap();
        let eff = embed(&merged).unwrap();
        assert_eq!(eff.steps, 20);
        assert_eq!(eff.omega0, 1e-4);
        assert_eq!(eff.m_max, 8);
    }

    #[test]
    fn unknown_fields_are_named() {
        let err = toml::from_str::<FileConfig>("[verify]\nalpah = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("alpah"), "{err}");
        let err = toml::from_str::<FileConfig>("[verify]\nm = \"ten\"\n").unwrap_err().to_string();
        assert!(err.contains("m") && err.contains("line"), "{err}");
    }

    #[test]
    fn semantic_checks_name_the_section() {
        let err = verify(&VerifySection { alpha: Some(1.5), ..VerifySection::default() }).unwrap_err();
        assert!(err.to_string().contains("[verify]"));
        let err = attack(AttackKind::Pgd, &AttackSection { budgets: Some(vec![0.4, 0.2]), ..Default::default() }, &VerifySection::default())
            .unwrap_err();
        assert!(err.to_string().contains("increasing"));
    }
}
