//! End-to-end checks of the toy pipeline: embed, verify, certify, attack and
//! checkpoint round trips.

use std::sync::OnceLock;

use wmcert::attack::{landscape_sweep, pgd_attack, random_direction, Metric, MetricConfig, PgdConfig};
use wmcert::certify::{certify, CertificateStatus, CertifyConfig};
use wmcert::checkpoint::{Checkpoint, Encoding};
use wmcert::embed::{embed, kl_loss, EmbedConfig, WatermarkTarget};
use wmcert::params::{allocate, NoiseSpec};
use wmcert::toymodel::{Classifier, Generator, ToyConfig, ToyGenerator, ToyInstance};
use wmcert::verify::{verify, watermark_robustness, VerifyConfig};

struct Setup {
    instance: ToyInstance,
    noise: NoiseSpec,
    config: EmbedConfig,
    watermarked: ToyGenerator,
}

fn setup() -> &'static Setup {
    static CELL: OnceLock<Setup> = OnceLock::new();
    CELL.get_or_init(|| {
        let instance = ToyInstance::build(&ToyConfig::default(), 11).unwrap();
        let layout = instance.base.params.layout();
        let noise = allocate(&vec![1.0; layout.len()], &layout, 0.01).unwrap();
        let config = EmbedConfig { steps: 300, learning_rate: 3e-2, doubling_period: 50, ..EmbedConfig::with_noise(noise.clone()) };
        let watermarked = embed(&instance.base, &instance.classifier, &config, 5).unwrap().generator;
        Setup { instance, noise, config, watermarked }
    })
}

#[test]
fn embedding_raises_target_rate_and_lowers_kl() {
    let s = setup();
    let wm = WatermarkTarget::default();
    let clf = &s.instance.classifier;
    let before = watermark_robustness(&s.instance.base, clf, &s.noise, wm, 10, 20, 3).unwrap().rate;
    let after = watermark_robustness(&s.watermarked, clf, &s.noise, wm, 10, 20, 3).unwrap().rate;
    assert!(after > 0.5 && after > before + 0.3, "rate {before} -> {after}");
    assert!(kl_loss(&s.watermarked, clf, &s.config, 9).unwrap() < kl_loss(&s.instance.base, clf, &s.config, 9).unwrap());
}

#[test]
fn embedding_leaves_other_prompts_recognizable() {
    let s = setup();
    let clf = &s.instance.classifier;
    let labels = s.watermarked.arch.num_labels;
    let mut hits = 0;
    let mut total = 0;
    for prompt in 1..labels {
        for j in 0..20u64 {
            let x = s.watermarked.generate(prompt, j).unwrap();
            hits += usize::from(clf.predict(&x, j) == prompt);
            total += 1;
        }
    }
    assert!(hits as f64 / total as f64 > 0.8, "{hits}/{total}");
}

#[test]
fn verification_separates_watermarked_from_clean() {
    let s = setup();
    let cfg = VerifyConfig { m: 20, n: 20, ..VerifyConfig::default() };
    let clf = &s.instance.classifier;
    let yes = verify(&s.watermarked, &s.instance.reference, clf, &s.noise, &cfg, 21).unwrap();
    assert!(yes.is_watermarked() && yes.t_test_rejects);
    let no = verify(&s.instance.base, &s.instance.reference, clf, &s.noise, &cfg, 21).unwrap();
    assert!(!no.is_watermarked());
    let same = verify(&s.instance.reference, &s.instance.reference, clf, &s.noise, &cfg, 21).unwrap();
    assert!(!same.is_watermarked() && !same.t_test_rejects);
}

#[test]
fn certificate_is_reproducible_and_serializable() {
    let s = setup();
    let cfg = CertifyConfig { trials: 60, grid_size: 30, ..CertifyConfig::default() };
    let clf = &s.instance.classifier;
    let a = certify(&s.watermarked, &s.instance.reference, clf, &s.noise, &cfg, 4).unwrap();
    let b = certify(&s.watermarked, &s.instance.reference, clf, &s.noise, &cfg, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.status, CertificateStatus::Certified);
    assert!(a.r_star > 0.0);
    assert!(a.recheck().unwrap());
    let back = wmcert::certify::Certificate::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);
    let clean = certify(&s.instance.base, &s.instance.reference, clf, &s.noise, &cfg, 4).unwrap();
    assert!(!clean.is_certified());
}

#[test]
fn pgd_respects_budget_and_sweep_is_deterministic() {
    let s = setup();
    let clf = &s.instance.classifier;
    let out = pgd_attack(&s.watermarked, clf, WatermarkTarget::default(), 0.3, &PgdConfig { steps: 10, ..PgdConfig::default() }, 2)
        .unwrap();
    assert!(out.l2_norm <= 0.3 + 1e-9 && out.max_constraint_norm <= 0.3 + 1e-9);
    assert!(out.trace.last().unwrap() <= out.trace.first().unwrap());

    let metric = MetricConfig {
        metric: Metric::Vsr { replicates: 2 },
        verify: VerifyConfig { m: 4, n: 5, ..VerifyConfig::default() },
        noise: s.noise.clone(),
    };
    let layout = s.watermarked.params.layout();
    let d_n = random_direction(&layout, 1).unwrap();
    let d_a = random_direction(&layout, 2).unwrap();
    let run = || {
        landscape_sweep(&s.watermarked, &s.instance.reference, clf, &d_n, &d_a, &[0.0, 0.5], &[0.0, 0.5], &metric, 8)
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.values.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn checkpoints_round_trip_models() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    for name in ["wm.ckpt", "wm.json"] {
        let path = dir.path().join(name);
        Checkpoint::from_generator(&s.watermarked).save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().into_generator().unwrap(), s.watermarked);
    }
    let bytes = Checkpoint::from_classifier(&s.instance.classifier).to_bytes(Encoding::Binary).unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().into_classifier().unwrap(), s.instance.classifier);
}
