use medmfg::data::{generate_synthetic, SyntheticSpec};
use medmfg::gradcheck::run_all;
use medmfg::model::{ModelDims, Toggles};
use medmfg::rng::rng_from_seed;
use medmfg::tensor::GradCheckConfig;
use medmfg::training::{checkpoint, train, Checkpoint, LossConfig, TrainConfig};
use medmfg::vsgm::LatentCode;
use rand::Rng;

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let mut rng = rng_from_seed(21);
    for code in 0..20 {
        let mu: Vec<f32> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f32> = (0..8).map(|_| rng.random_range(-1.5..1.0)).collect();
        let c = LatentCode::new(mu.clone(), lv.clone()).unwrap();
        let samples = 100_000;
        let mut acc = 0.0f64;
        for _ in 0..samples {
            let z = c.reparameterize(&mut rng);
            // log q(z) − log p(z); the 2π terms cancel
            acc += z
                .iter()
                .zip(&mu)
                .zip(&lv)
                .map(|((&z, &m), &v)| {
                    let (z, m, v) = (z as f64, m as f64, v as f64);
                    -0.5 * ((z - m).powi(2) / v.exp() + v) + 0.5 * z * z
                })
                .sum::<f64>();
        }
        let mc = acc / samples as f64;
        let exact = c.kl_divergence();
        assert!(((mc - exact) / exact).abs() < 0.02, "code {code}: mc {mc} vs exact {exact}");
    }
    assert_eq!(LatentCode::new(vec![0.0; 8], vec![0.0; 8]).unwrap().kl_divergence(), 0.0);
}

#[test]
fn toy_gradients_check_out() {
    let reports = run_all(&ModelDims::toy(), 0, &GradCheckConfig::default()).unwrap();
    assert_eq!(reports.len(), 4);
    for r in &reports {
        for g in &r.report.groups {
            assert!(g.passed, "{} / {}: {:.3e}", r.suite, g.group, g.max_rel_err);
        }
    }
}

fn short_run(toggles: Toggles, seed: u64) -> Vec<u8> {
    let ds = generate_synthetic(&SyntheticSpec {
        n_classes: 8,
        dim: ModelDims::toy().feature_len(),
        per_class_count: 10,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        episodes: 12,
        n_way: 3,
        queries: 2,
        lr: 1e-3,
        seed,
        loss: LossConfig { toggles, ..Default::default() },
        ..Default::default()
    };
    let out = train(&ds, ModelDims::toy(), &cfg).unwrap();
    assert_eq!(out.log.len(), 12);
    assert!(out.log.iter().all(|l| l.loss.is_finite()));
    checkpoint::encode(&Checkpoint { params: out.params, toggles, config_fingerprint: String::new() })
}

#[test]
fn training_is_reproducible() {
    for toggles in [Toggles::ALL, Toggles { vsgm: false, ..Toggles::ALL }, Toggles { ifm: false, ..Toggles::ALL }] {
        assert_eq!(short_run(toggles, 5), short_run(toggles, 5), "{toggles}");
    }
    assert_ne!(short_run(Toggles::ALL, 5), short_run(Toggles::ALL, 6));
}
