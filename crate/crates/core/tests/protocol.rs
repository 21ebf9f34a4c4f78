use medmfg::data::{generate_synthetic, sample_episode, EmbeddingDataset, Episode, SyntheticSpec};
use medmfg::eval::{compare_paired, evaluate, mean_ci95, predict_episode, ClassifierConfig, EvalConfig, EvalReport};
use medmfg::model::{ModelDims, ModelParams, Toggles};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::HashSet;

fn toy_data(classes: usize, per_class: usize, seed: u64) -> EmbeddingDataset {
    generate_synthetic(&SyntheticSpec {
        n_classes: classes,
        dim: ModelDims::toy().feature_len(),
        per_class_count: per_class,
        within_class_sigma: 0.6,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn toy_model() -> ModelParams {
    ModelParams::init(ModelDims::toy(), 1).unwrap()
}

fn quick(cfg: EvalConfig) -> EvalConfig {
    EvalConfig { classifier: ClassifierConfig { steps: 60, ..Default::default() }, ..cfg }
}

#[test]
fn classifier_sees_n_k_times_n_plus_one_features() {
    let ds = toy_data(10, 20, 2);
    let model = toy_model();
    for (k, want) in [(1, 30), (5, 150)] {
        let cfg = quick(EvalConfig { k_shot: k, queries: 2, ..Default::default() });
        for i in 0..100u64 {
            let ep = sample_episode(&ds, 5, k, 2, 1000 + i).unwrap();
            let out = predict_episode(&model, &ep, &cfg).unwrap();
            // one classifier per query when the cross-attention block is on
            assert_eq!(out.train_set_sizes.len(), ep.query.len());
            assert!(out.train_set_sizes.iter().all(|&n| n == want), "{:?}", out.train_set_sizes);
        }
    }
}

#[test]
fn the_training_set_size_holds_for_every_toggle() {
    let ds = toy_data(6, 10, 3);
    let model = toy_model();
    let ep = sample_episode(&ds, 3, 2, 2, 9).unwrap();
    for bits in 0..8u8 {
        let toggles = Toggles { sfm: bits & 1 != 0, ifm: bits & 2 != 0, vsgm: bits & 4 != 0 };
        let cfg = quick(EvalConfig { n_way: 3, k_shot: 2, queries: 2, n_generate: 4, toggles, ..Default::default() });
        let out = predict_episode(&model, &ep, &cfg).unwrap();
        assert!(out.train_set_sizes.iter().all(|&n| n == 3 * 2 * 5), "{toggles}: {:?}", out.train_set_sizes);
    }
}

#[test]
fn deleting_a_query_leaves_the_others_alone() {
    let ds = toy_data(8, 12, 4);
    let model = toy_model();
    let cfg = quick(EvalConfig { n_way: 3, queries: 2, ..Default::default() });
    for i in 0..20u64 {
        let ep = sample_episode(&ds, 3, 1, 2, 50 + i).unwrap();
        let full = predict_episode(&model, &ep, &cfg).unwrap().predictions;
        for drop in 0..ep.query.len() {
            let rest = predict_episode(&model, &ep.without_query(drop), &cfg).unwrap().predictions;
            let mut expected = full.clone();
            expected.remove(drop);
            assert_eq!(rest, expected, "episode {i}, dropped query {drop}");
        }
    }
}

/// Plain softmax regression, written out independently of the library.
fn standalone_baseline(ep: &Episode, cfg: &ClassifierConfig) -> Vec<usize> {
    let dim = ep.dim();
    let c = ep.n_way;
    let n = ep.support.len() as f32;
    let mut w = vec![vec![0.0f32; dim]; c];
    let mut b = vec![0.0f32; c];
    let scores = |w: &[Vec<f32>], b: &[f32], x: &[f32]| -> Vec<f32> {
        w.iter().zip(b).map(|(row, bi)| bi + row.iter().zip(x).map(|(a, v)| a * v).sum::<f32>()).collect()
    };
    for _ in 0..cfg.steps {
        let mut gw: Vec<Vec<f32>> = w.iter().map(|row| row.iter().map(|v| cfg.l2 * v).collect()).collect();
        let mut gb = vec![0.0f32; c];
        for s in &ep.support {
            let mut p = scores(&w, &b, &s.feature);
            let m = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            p.iter_mut().for_each(|v| *v = (*v - m).exp());
            let z: f32 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= z);
            p[s.label] -= 1.0;
            for k in 0..c {
                let e = p[k] * (1.0 / n);
                gb[k] += e;
                gw[k].iter_mut().zip(&s.feature).for_each(|(g, x)| *g += e * x);
            }
        }
        let norm = gw.iter().flatten().chain(&gb).map(|g| g * g).sum::<f32>().sqrt();
        if norm < cfg.tol {
            break;
        }
        for k in 0..c {
            w[k].iter_mut().zip(&gw[k]).for_each(|(v, g)| *v -= cfg.lr * g);
            b[k] -= cfg.lr * gb[k];
        }
    }
    ep.query
        .iter()
        .map(|q| {
            let s = scores(&w, &b, &q.feature);
            (0..c).fold(0, |best, k| if s[k] > s[best] { k } else { best })
        })
        .collect()
}

#[test]
fn baseline_path_is_plain_logistic_regression() {
    let ds = toy_data(10, 20, 5);
    let model = toy_model();
    let cfg = EvalConfig::default().baseline();
    for i in 0..50u64 {
        let ep = sample_episode(&ds, 5, 1, 3, 300 + i).unwrap();
        let got = predict_episode(&model, &ep, &cfg).unwrap();
        assert_eq!(got.train_set_sizes, vec![5]);
        assert_eq!(got.predictions, standalone_baseline(&ep, &cfg.classifier), "episode {i}");
    }
}

#[test]
fn episode_classes_are_uniform() {
    let ds = toy_data(10, 8, 6);
    let mut counts = [0u64; 10];
    for i in 0..2000u64 {
        let ep = sample_episode(&ds, 5, 1, 1, i).unwrap();
        for id in ep.class_ids {
            counts[id as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    assert_eq!(total, 10_000);
    let expected = total as f64 / 10.0;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(stat);
    assert!(p > 0.01, "χ² = {stat:.2}, p = {p:.4}, counts {counts:?}");
}

#[test]
fn report_statistics_match_a_recomputation() {
    let ds = toy_data(8, 12, 7);
    let cfg = quick(EvalConfig { n_way: 3, queries: 3, episodes: 12, seed: 4, ..Default::default() });
    let r = evaluate(&toy_model(), &ds, &cfg).unwrap();
    let n = r.accuracies.len() as f64;
    let mean = r.accuracies.iter().sum::<f64>() / n;
    let sd = (r.accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((r.mean - mean).abs() < 1e-9);
    assert!((r.ci95 - 1.96 * sd / n.sqrt()).abs() < 1e-9);
    let back = EvalReport::parse(&r.to_text()).unwrap();
    assert_eq!(back.accuracies, r.accuracies);
    assert!(compare_paired(&r, &back).unwrap().mean_diff.abs() < 1e-12);
}

#[test]
fn evaluation_is_order_independent_of_scheduling() {
    let ds = toy_data(8, 12, 8);
    let cfg = quick(EvalConfig { n_way: 3, queries: 2, episodes: 16, seed: 9, ..Default::default() });
    let model = toy_model();
    let a = medmfg::par::with_threads(1, || evaluate(&model, &ds, &cfg)).unwrap().unwrap();
    let b = medmfg::par::with_threads(4, || evaluate(&model, &ds, &cfg)).unwrap().unwrap();
    assert_eq!(a.accuracies, b.accuracies);
    assert_eq!(a.to_text(), b.to_text());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_are_well_formed(n_way in 2usize..6, k in 1usize..4, q in 1usize..4, seed in any::<u64>()) {
        let ds = toy_data(8, 8, 10);
        let ep = sample_episode(&ds, n_way, k, q, seed).unwrap();
        prop_assert_eq!(ep.support.len(), n_way * k);
        prop_assert_eq!(ep.query.len(), n_way * q);
        prop_assert_eq!(ep.class_ids.iter().collect::<HashSet<_>>().len(), n_way);
        for label in 0..n_way {
            let s: HashSet<usize> = ep.support.iter().filter(|x| x.label == label).map(|x| x.source).collect();
            let qs: HashSet<usize> = ep.query.iter().filter(|x| x.label == label).map(|x| x.source).collect();
            prop_assert_eq!(s.len(), k);
            prop_assert_eq!(qs.len(), q);
            prop_assert!(s.is_disjoint(&qs));
        }
        prop_assert_eq!(sample_episode(&ds, n_way, k, q, seed).unwrap(), ep);
    }

    #[test]
    fn mean_ci_recomputes(xs in proptest::collection::vec(0.0f64..1.0, 2..50)) {
        let (m, ci) = mean_ci95(&xs);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        prop_assert!((m - mean).abs() < 1e-9);
        prop_assert!((ci - 1.96 * sd / n.sqrt()).abs() < 1e-9);
    }
}
