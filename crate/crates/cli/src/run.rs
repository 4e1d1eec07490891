//! Resolved invocations and their execution. A manifest stores the
//! [`Invocation`] verbatim, so replaying it runs exactly the same code path.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use wmcert::attack::{
    adversarial_direction, compress, evaluate_metric, finetune_drift, image_suspiciousness, landscape_sweep,
    pgd_sweep, random_direction, AttackResult, Ball, Compression, MetricConfig, MetricPoint, PgdConfig,
};
use wmcert::certify::{certify, CertifyConfig};
use wmcert::checkpoint::Checkpoint;
use wmcert::embed::embed;
use wmcert::params::allocate;
use wmcert::pilot::{run_pilot, PilotConfig, PilotReport};
use wmcert::toymodel::{EnergyClassifier, ToyConfig, ToyGenerator, ToyInstance};
use wmcert::verify::{verify, VerifyConfig};
use wmcert::{LayeredParams, NoiseSpec};

use crate::args::{AttackKind, BallKind, Command, ModelPaths};
use crate::config::{self, overlay, AttackSettings, EmbedSettings, FileConfig};

// Built once per run, so variant sizes do not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum Invocation {
    Toy { config: ToyConfig, base: PathBuf, reference: PathBuf, classifier: PathBuf },
    Pilot { config: PilotConfig, generator: PathBuf, out: PathBuf },
    Allocate { sigma_u: f64, pilot: Option<PathBuf>, generator: PathBuf, out: PathBuf },
    Embed { config: EmbedSettings, generator: PathBuf, classifier: PathBuf, noise: PathBuf, out: PathBuf, log: PathBuf },
    Verify { config: VerifyConfig, models: ModelPaths, out: PathBuf, assert: bool },
    Certify { config: CertifyConfig, models: ModelPaths, out: PathBuf },
    Attack { config: AttackSettings, models: ModelPaths, out: PathBuf, save_checkpoint: bool },
    Plotdata { inputs: Vec<PathBuf>, out: PathBuf },
}

impl Invocation {
    pub fn name(&self) -> String {
        match self {
            Invocation::Toy { .. } => "toy".into(),
            Invocation::Pilot { .. } => "pilot".into(),
            Invocation::Allocate { .. } => "allocate".into(),
            Invocation::Embed { .. } => "embed".into(),
            Invocation::Verify { .. } => "verify".into(),
            Invocation::Certify { .. } => "certify".into(),
            Invocation::Attack { config, .. } => format!("attack-{}", kind_name(config.kind)),
            Invocation::Plotdata { .. } => "plotdata".into(),
        }
    }
}

fn kind_name(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::Random => "random",
        AttackKind::Adversarial => "adversarial",
        AttackKind::Pgd => "pgd",
        AttackKind::Finetune => "finetune",
        AttackKind::Quantize => "quantize",
        AttackKind::Prune => "prune",
        AttackKind::Sweep => "sweep",
        AttackKind::Audit => "audit",
    }
}

/// Applies flag > config file > default to a parsed command.
pub fn resolve(command: Command, file: &FileConfig) -> anyhow::Result<Invocation> {
    Ok(match command {
        Command::Toy(c) => Invocation::Toy {
            config: config::toy(&overlay(&c.section, &file.toy)?)?,
            base: c.base,
            reference: c.reference,
            classifier: c.classifier,
        },
        Command::Pilot(c) => Invocation::Pilot {
            config: config::pilot(&overlay(&c.section, &file.pilot)?)?,
            generator: c.generator,
            out: c.out,
        },
        Command::Allocate(c) => Invocation::Allocate {
            sigma_u: config::sigma_u(&overlay(&c.section, &file.allocate)?)?,
            pilot: c.pilot,
            generator: c.generator,
            out: c.out,
        },
        Command::Embed(c) => Invocation::Embed {
            config: config::embed(&overlay(&c.section, &file.embed)?)?,
            generator: c.generator,
            classifier: c.classifier,
            noise: c.noise,
            out: c.out,
            log: c.log,
        },
        Command::Verify(c) => Invocation::Verify {
            config: config::verify(&overlay(&c.section, &file.verify)?)?,
            models: c.models,
            out: c.out,
            assert: c.assert,
        },
        Command::Certify(c) => Invocation::Certify {
            config: config::certify(&overlay(&c.section, &file.certify)?)?,
            models: c.models,
            out: c.out,
        },
        Command::Attack(c) => {
            let out = c.out.unwrap_or_else(|| {
                let ext = if c.kind == AttackKind::Sweep { "csv" } else { "json" };
                PathBuf::from(format!("attack_{}.{ext}", kind_name(c.kind)))
            });
            Invocation::Attack {
                config: config::attack(c.kind, &overlay(&c.section, &file.attack)?, &file.verify)?,
                models: c.models,
                out,
                save_checkpoint: c.save_checkpoint,
            }
        }
        Command::Plotdata(c) => Invocation::Plotdata { inputs: c.inputs, out: c.out },
        Command::Replay(_) => unreachable!("replay is dispatched before resolution"),
    })
}

/// Files touched by a run, relative to the run directory.
#[derive(Debug, Default)]
pub struct Executed {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// `verify --assert` judged the suspect not watermarked.
    pub negative: bool,
    pub summary: String,
}

struct Ctx<'a> {
    dir: &'a Path,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        self.dir.join(p)
    }

    fn output(&mut self, p: &Path) -> anyhow::Result<PathBuf> {
        self.outputs.push(p.to_path_buf());
        let full = self.dir.join(p);
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(full)
    }

    fn generator(&mut self, p: &Path) -> anyhow::Result<ToyGenerator> {
        let path = self.input(p);
        let ck = Checkpoint::load(&path).with_context(|| format!("loading generator {}", path.display()))?;
        Ok(ck.into_generator()?)
    }

    fn classifier(&mut self, p: &Path) -> anyhow::Result<EnergyClassifier> {
        let path = self.input(p);
        let ck = Checkpoint::load(&path).with_context(|| format!("loading classifier {}", path.display()))?;
        Ok(ck.into_classifier()?)
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, p: &Path) -> anyhow::Result<T> {
        let path = self.input(p);
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    fn write_json<T: Serialize>(&mut self, p: &Path, value: &T) -> anyhow::Result<()> {
        let path = self.output(p)?;
        std::fs::write(&path, serde_json::to_vec_pretty(value)?)?;
        Ok(())
    }

    fn save(&mut self, p: &Path, ck: Checkpoint) -> anyhow::Result<()> {
        let path = self.output(p)?;
        ck.save(&path)?;
        Ok(())
    }

    fn models(&mut self, m: &ModelPaths) -> anyhow::Result<(ToyGenerator, ToyGenerator, EnergyClassifier, NoiseSpec)> {
        Ok((self.generator(&m.suspect)?, self.generator(&m.reference)?, self.classifier(&m.classifier)?, self.json(&m.noise)?))
    }
}

pub fn execute(inv: &Invocation, dir: &Path, seed: u64) -> anyhow::Result<Executed> {
    let mut ctx = Ctx { dir, inputs: Vec::new(), outputs: Vec::new() };
    let mut negative = false;
    let summary = match inv {
        Invocation::Toy { config, base, reference, classifier } => {
            let inst = ToyInstance::build(config, seed)?;
            ctx.save(base, Checkpoint::from_generator(&inst.base))?;
            ctx.save(reference, Checkpoint::from_generator(&inst.reference))?;
            ctx.save(classifier, Checkpoint::from_classifier(&inst.classifier))?;
            format!("toy instance with layout {:?}", inst.base.params.layout())
        }
        Invocation::Pilot { config, generator, out } => {
            let g = ctx.generator(generator)?;
            let (report, _) = run_pilot(&g, config, seed)?;
            ctx.write_json(out, &report)?;
            let mut s = format!(
                "mean LFS {:?}, stability {:?}, fraction stable {:.3}",
                report.mean_lfs, report.rank_stability.stability, report.fraction_stable
            );
            if report.flagged {
                s.push_str(" (flagged: most layers are rank-unstable)");
            }
            s
        }
        Invocation::Allocate { sigma_u, pilot, generator, out } => {
            let dims = ctx.generator(generator)?.params.layout();
            let lfs = match pilot {
                Some(p) => ctx.json::<PilotReport>(p)?.mean_lfs,
                None => vec![1.0; dims.len()],
            };
            let spec = allocate(&lfs, &dims, *sigma_u)?;
            ctx.write_json(out, &spec)?;
            format!("sigma {:?} (budget error {:.1e})", spec.sigma, spec.budget_relative_error(*sigma_u))
        }
        Invocation::Embed { config, generator, classifier, noise, out, log } => {
            let g = ctx.generator(generator)?;
            let clf = ctx.classifier(classifier)?;
            let spec: NoiseSpec = ctx.json(noise)?;
            let result = embed(&g, &clf, &config.clone().into_config(spec), seed)?;
            ctx.save(out, Checkpoint::from_generator(&result.generator))?;
            let mut w = csv::Writer::from_path(ctx.output(log)?)?;
            for rec in &result.log {
                w.serialize(rec)?;
            }
            w.flush()?;
            let last = result.log.last();
            format!(
                "{} steps, final kl {:.4}, ssim loss {:.4}",
                result.log.len(),
                last.map_or(f64::NAN, |r| r.kl),
                last.map_or(f64::NAN, |r| r.ssim)
            )
        }
        Invocation::Verify { config, models, out, assert } => {
            let (sus, refg, clf, noise) = ctx.models(models)?;
            let report = verify(&sus, &refg, &clf, &noise, config, seed)?;
            ctx.write_json(out, &report)?;
            negative = *assert && !report.is_watermarked();
            format!(
                "WR {:.4}, RP {:.4}, tau {:.4}: {:?} (t test rejects: {}, routes agree: {})",
                report.wr, report.rp, report.tau, report.decision, report.t_test_rejects, report.routes_agree
            )
        }
        Invocation::Certify { config, models, out } => {
            let (sus, refg, clf, noise) = ctx.models(models)?;
            let cert = certify(&sus, &refg, &clf, &noise, config, seed)?;
            ctx.write_json(out, &cert)?;
            format!("{:?}: radius {:.4}, tau {:?}, lhs(0) {:.4}", cert.status, cert.r_star, cert.tau, cert.lhs_at_zero)
        }
        Invocation::Attack { config, models, out, save_checkpoint } => {
            run_attack(&mut ctx, config, models, out, *save_checkpoint, seed)?
        }
        Invocation::Plotdata { inputs, out } => {
            let full: Vec<PathBuf> = inputs.iter().map(|p| ctx.input(p)).collect();
            let rows = crate::plotdata::convert(&full)?;
            let mut w = csv::Writer::from_path(ctx.output(out)?)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            format!("{} rows from {} inputs", rows.len(), inputs.len())
        }
    };
    Ok(Executed { inputs: ctx.inputs, outputs: ctx.outputs, negative, summary })
}

/// Attack report: the budget/metric trace plus attack-specific detail.
#[derive(Debug, Serialize, Deserialize)]
pub struct AttackReport {
    #[serde(flatten)]
    pub result: AttackResult,
    pub detail: serde_json::Value,
}

fn shifted(g: &ToyGenerator, dir: &LayeredParams, scale: f64) -> anyhow::Result<ToyGenerator> {
    let mut p = g.params.clone();
    p.axpy(scale, dir)?;
    Ok(g.with_params(p)?)
}

fn run_attack(
    ctx: &mut Ctx<'_>,
    cfg: &AttackSettings,
    models: &ModelPaths,
    out: &Path,
    save_checkpoint: bool,
    seed: u64,
) -> anyhow::Result<String> {
    let (sus, refg, clf, noise) = ctx.models(models)?;
    let metric = MetricConfig { metric: cfg.metric.clone(), verify: cfg.verify.clone(), noise: noise.clone() };
    let wm = cfg.verify.watermark;
    let score = |g: &ToyGenerator| evaluate_metric(g, &refg, &clf, &metric, seed);
    let layout = sus.params.layout();

    let mut attacked: Vec<ToyGenerator> = Vec::new();
    let mut detail = serde_json::Value::Null;
    match cfg.kind {
        AttackKind::Sweep => {
            let d_n = random_direction(&layout, seed)?;
            let adv = adversarial_direction(&sus, &clf, wm, &cfg.adversarial, seed)?;
            let grid = landscape_sweep(&sus, &refg, &clf, &d_n, &adv.direction, &cfg.eps_n, &cfg.eps_a, &metric, seed)?;
            std::fs::write(ctx.output(out)?, grid.to_csv())?;
            return Ok(format!("{}x{} sweep grid", grid.eps_n.len(), grid.eps_a.len()));
        }
        AttackKind::Audit => {
            let s_sus = image_suspiciousness(&sus, cfg.prompt_plus, cfg.prompt_minus, cfg.images, seed)?;
            let s_ref = image_suspiciousness(&refg, cfg.prompt_plus, cfg.prompt_minus, cfg.images, seed)?;
            let report = serde_json::json!({
                "prompt_plus": cfg.prompt_plus,
                "prompt_minus": cfg.prompt_minus,
                "images": cfg.images,
                "suspect_score": s_sus,
                "reference_score": s_ref,
            });
            ctx.write_json(out, &report)?;
            return Ok(format!("suspiciousness {s_sus:.4} (reference {s_ref:.4})"));
        }
        AttackKind::Random => {
            let d = random_direction(&layout, seed)?;
            for &b in &cfg.budgets {
                attacked.push(shifted(&sus, &d, b)?);
            }
        }
        AttackKind::Adversarial => {
            let adv = adversarial_direction(&sus, &clf, wm, &cfg.adversarial, seed)?;
            for &b in &cfg.budgets {
                attacked.push(shifted(&sus, &adv.direction, b)?);
            }
            detail = serde_json::json!({ "fell_back_to_random": adv.fell_back_to_random, "trace": adv.trace });
        }
        AttackKind::Pgd => {
            let ball = match cfg.pgd.ball {
                BallKind::L2 => Ball::L2,
                BallKind::Mahalanobis => Ball::Mahalanobis { noise: noise.with_scale(1.0)? },
            };
            let pcfg = PgdConfig { steps: cfg.pgd.steps, step_fraction: cfg.pgd.step_fraction, batch: cfg.pgd.batch, ball };
            let (mut result, outcomes) = pgd_sweep(&sus, &refg, &clf, &cfg.budgets, &pcfg, &metric, seed)?;
            let detail = serde_json::json!(outcomes
                .iter()
                .map(|o| serde_json::json!({
                    "budget": o.budget,
                    "l2_norm": o.l2_norm,
                    "mahalanobis_norm": o.mahalanobis_norm,
                    "trace": o.trace,
                    "diverged": o.diverged,
                }))
                .collect::<Vec<_>>());
            if save_checkpoint {
                if let Some(o) = outcomes.last() {
                    result.checkpoint = Some(save_attacked(ctx, cfg.kind, &shifted(&sus, &o.delta, 1.0)?)?);
                }
            }
            let summary = trace_summary(&result);
            ctx.write_json(out, &AttackReport { result, detail })?;
            return Ok(summary);
        }
        AttackKind::Finetune => {
            let (_, traj) = finetune_drift(&sus, &cfg.finetune, seed)?;
            for &b in &cfg.budgets {
                attacked.push(sus.with_params(traj.at_step(b as u64)?.clone())?);
            }
        }
        AttackKind::Quantize => {
            for &b in &cfg.budgets {
                attacked.push(compress(&sus, Compression::Quantize { bits: b as u32 })?);
            }
        }
        AttackKind::Prune => {
            for &b in &cfg.budgets {
                attacked.push(compress(&sus, Compression::Prune { fraction: b })?);
            }
        }
    }
    let points = cfg
        .budgets
        .iter()
        .zip(&attacked)
        .map(|(&budget, g)| Ok(MetricPoint { budget, metric: score(g)? }))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut result = AttackResult::new(kind_name(cfg.kind), points, seed)?;
    if save_checkpoint {
        if let Some(g) = attacked.last() {
            result.checkpoint = Some(save_attacked(ctx, cfg.kind, g)?);
        }
    }
    let summary = trace_summary(&result);
    ctx.write_json(out, &AttackReport { result, detail })?;
    Ok(summary)
}

fn save_attacked(ctx: &mut Ctx<'_>, kind: AttackKind, g: &ToyGenerator) -> anyhow::Result<String> {
    let rel = PathBuf::from(format!("attacked_{}.ckpt", kind_name(kind)));
    ctx.save(&rel, Checkpoint::from_generator(g))?;
    Ok(rel.display().to_string())
}

fn trace_summary(r: &AttackResult) -> String {
    let pts: Vec<String> = r.points.iter().map(|p| format!("{}: {:.3}", p.budget, p.metric)).collect();
    format!("{} metric by budget [{}]", r.kind, pts.join(", "))
}
