//! Command-line surface. Every tunable is an `Option` so that an unset flag
//! falls through to the config file and then to the library default; the
//! same section structs are deserialized from the TOML config.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "wmcert", version, about = "Watermark embedding, verification and certification on toy generators")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Directory holding inputs, outputs, manifests and the run lock.
    #[arg(long, global = true, default_value = "wmcert-run")]
    pub run_dir: PathBuf,

    /// TOML config with one section per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed. A random seed is drawn and recorded when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for the parallel Monte-Carlo loops.
    #[arg(long, global = true, env = "WMCERT_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a base and a reference generator and fit the classifier.
    Toy(ToyCmd),
    /// Fine-tune on surrogate tasks and measure layer sensitivity.
    Pilot(PilotCmd),
    /// Turn layer sensitivities into per-layer noise levels.
    Allocate(AllocateCmd),
    /// Embed the watermark under per-layer Gaussian smoothing.
    Embed(EmbedCmd),
    /// Paired WR/RP verification of a suspect generator.
    Verify(VerifyCmd),
    /// Certified radius of a suspect generator.
    Certify(CertifyCmd),
    /// Watermark-removal attacks and parameter-space sweeps.
    Attack(AttackCmd),
    /// Convert sweep grids, logs and reports into long-format plot tables.
    Plotdata(PlotdataCmd),
    /// Re-run a recorded manifest and compare output digests.
    Replay(ReplayCmd),
}

#[derive(Debug, Args)]
pub struct ToyCmd {
    #[command(flatten)]
    pub section: ToySection,
    #[arg(long, default_value = "base.ckpt")]
    pub base: PathBuf,
    #[arg(long, default_value = "reference.ckpt")]
    pub reference: PathBuf,
    #[arg(long, default_value = "classifier.ckpt")]
    pub classifier: PathBuf,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub pretrain_batch: Option<usize>,
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
    /// Generations per label used to fit the classifier.
    #[arg(long)]
    pub classifier_samples: Option<usize>,
    #[arg(long)]
    pub min_variance: Option<f64>,
    #[arg(long)]
    pub sigma_first: Option<f64>,
    #[arg(long)]
    pub sigma_ratio: Option<f64>,
    #[arg(long)]
    pub num_sigmas: Option<usize>,
    #[arg(long)]
    pub mc_draws: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PilotCmd {
    #[command(flatten)]
    pub section: PilotSection,
    #[arg(long, default_value = "base.ckpt")]
    pub generator: PathBuf,
    #[arg(long, default_value = "pilot.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilotSection {
    /// Surrogate task families, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub record_every: Option<usize>,
    #[arg(long)]
    pub stable_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AllocateCmd {
    #[command(flatten)]
    pub section: AllocateSection,
    /// Pilot report supplying the sensitivities; omit for uniform noise.
    #[arg(long)]
    pub pilot: Option<PathBuf>,
    /// Generator checkpoint supplying the layer sizes.
    #[arg(long, default_value = "base.ckpt")]
    pub generator: PathBuf,
    #[arg(long, default_value = "noise.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocateSection {
    /// Global layer-uniform noise budget.
    #[arg(long)]
    pub sigma_u: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EmbedCmd {
    #[command(flatten)]
    pub section: EmbedSection,
    #[arg(long, default_value = "base.ckpt")]
    pub generator: PathBuf,
    #[arg(long, default_value = "classifier.ckpt")]
    pub classifier: PathBuf,
    #[arg(long, default_value = "noise.json")]
    pub noise: PathBuf,
    #[arg(long, default_value = "watermarked.ckpt")]
    pub out: PathBuf,
    /// Per-step training log.
    #[arg(long, default_value = "embed_log.csv")]
    pub log: PathBuf,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    /// Prompt whose generations carry the watermark.
    #[arg(long)]
    pub prompt: Option<usize>,
    /// Label the classifier should report for the watermark prompt.
    #[arg(long)]
    pub target: Option<usize>,
    /// Target posterior mass on the watermark label.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub omega0: Option<f64>,
    #[arg(long)]
    pub doubling_period: Option<u64>,
    #[arg(long)]
    pub m_max: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyCmd {
    #[command(flatten)]
    pub section: VerifySection,
    #[command(flatten)]
    pub models: ModelPaths,
    #[arg(long, default_value = "verify.json")]
    pub out: PathBuf,
    /// Exit with status 1 when the suspect is not judged watermarked.
    #[arg(long)]
    pub assert: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelPaths {
    #[arg(long, default_value = "watermarked.ckpt")]
    pub suspect: PathBuf,
    #[arg(long, default_value = "reference.ckpt")]
    pub reference: PathBuf,
    #[arg(long, default_value = "classifier.ckpt")]
    pub classifier: PathBuf,
    #[arg(long, default_value = "noise.json")]
    pub noise: PathBuf,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    #[arg(long)]
    pub prompt: Option<usize>,
    #[arg(long)]
    pub target: Option<usize>,
    /// Noise draws.
    #[arg(long)]
    pub m: Option<usize>,
    /// Generations per noise draw.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Failure probability of the bound on the reference rate.
    #[arg(long)]
    pub zeta_delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CertifyCmd {
    #[command(flatten)]
    pub section: CertifySection,
    #[command(flatten)]
    pub models: ModelPaths,
    #[arg(long, default_value = "certificate.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    #[arg(long)]
    pub prompt: Option<usize>,
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Noise multiplier used while certifying.
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Random,
    Adversarial,
    Pgd,
    Finetune,
    Quantize,
    Prune,
    Sweep,
    Audit,
}

#[derive(Debug, Args)]
pub struct AttackCmd {
    #[arg(value_enum)]
    pub kind: AttackKind,
    #[command(flatten)]
    pub section: AttackSection,
    #[command(flatten)]
    pub models: ModelPaths,
    /// Result file; defaults to `attack_<kind>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the model attacked at the largest budget.
    #[arg(long)]
    pub save_checkpoint: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Verification success rate.
    Vsr,
    /// Sign-test detection rate at the false-positive cap.
    Tpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallKind {
    L2,
    Mahalanobis,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Increasing attack strengths: L2 norms, bit widths, prune fractions
    /// or fine-tuning steps depending on the attack.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricKind>,
    /// Independent verifications per VSR point.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Paired trials per image for the sign test.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Images per sign-test point.
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub fpr_cap: Option<f64>,
    #[arg(long, value_enum)]
    pub ball: Option<BallKind>,
    #[arg(long)]
    pub pgd_steps: Option<usize>,
    #[arg(long)]
    pub step_fraction: Option<f64>,
    #[arg(long)]
    pub adversarial_steps: Option<usize>,
    #[arg(long)]
    pub adversarial_step_size: Option<f64>,
    /// Fine-tuning task family.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    /// Scales along the random direction for `sweep`.
    #[arg(long, value_delimiter = ',')]
    pub eps_n: Option<Vec<f64>>,
    /// Scales along the adversarial direction for `sweep`.
    #[arg(long, value_delimiter = ',')]
    pub eps_a: Option<Vec<f64>>,
    /// Audited prompt and comparison prompt for `audit`.
    #[arg(long)]
    pub prompt_plus: Option<usize>,
    #[arg(long)]
    pub prompt_minus: Option<usize>,
    /// Batch for the attack surrogates.
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotdataCmd {
    /// Sweep CSVs, embedding logs, attack results or pilot reports.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "plot_data.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayCmd {
    /// Manifest to re-execute; its run directory is the manifest's parent's parent.
    pub manifest: PathBuf,
}
