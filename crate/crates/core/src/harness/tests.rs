use super::*;
use crate::graphs::build_graph;
use crate::sim::{simulate, CorpusSpec, RegimeMix};
use crate::template::{topologies, TemplateKind};
use crate::twins::{make_variant, TwinConfig, Variant};
use alloc::string::ToString;
use proptest::prelude::*;
use rand::Rng;

fn graphs(n: usize, seed: u64) -> Vec<SimGraph> {
    let spec = CorpusSpec::new(n, topologies::all(), RegimeMix::Mixed, seed);
    (0..n)
        .map(|i| {
            let s = spec.scenario(i).unwrap();
            let rec = simulate(&s.topology, &s.plan, &s.scenario, &spec.sim).unwrap().record;
            build_graph(&rec, &s.topology, TemplateKind::Exit).unwrap()
        })
        .collect()
}

fn small_model(dropout: f64) -> TwinModel {
    make_variant(&TwinConfig {
        hidden: 6,
        edge_proj_dim: 3,
        attention_d_model: 4,
        attention_d_k: 2,
        dropout,
        seed: 5,
        ..Variant::GatconvExt.config()
    })
    .unwrap()
}

fn shifted(graphs: &[SimGraph], by: f64) -> Vec<Tensor> {
    graphs
        .iter()
        .map(|g| Tensor::from_fn(&g.target.shape, |k| g.target.data[k] + by))
        .collect()
}

#[test]
fn split_is_deterministic_and_partitions() {
    let s = split_indices(100, [0.8, 0.1, 0.1], 3);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    assert_eq!(s, split_indices(100, [0.8, 0.1, 0.1], 3));
    assert_ne!(s, split_indices(100, [0.8, 0.1, 0.1], 4));
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    let s = split_indices(20, [1.0, 0.0, 0.0], 0);
    assert_eq!(s.train.len(), 20);
}

#[test]
fn fractions_must_sum_to_one() {
    let c = TrainConfig { split: [0.7, 0.1, 0.1], ..TrainConfig::default() };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    TrainConfig::default().validate().unwrap();
}

#[test]
fn perfect_prediction_scores_zero() {
    let gs = graphs(3, 1);
    let preds: Vec<Tensor> = gs.iter().map(|g| g.target.clone()).collect();
    let r = metrics_for(&preds, &gs, 5).unwrap();
    for a in &r.aggregations {
        assert_eq!((a.mae, a.rmse), (0.0, 0.0));
    }
    assert_eq!((r.mse, r.ci95), (0.0, 0.0));
}

#[test]
fn constant_offset_grows_linearly_with_aggregation() {
    let gs = graphs(3, 2);
    let r = metrics_for(&shifted(&gs, 1.0), &gs, 5).unwrap();
    let maes: Vec<f64> = r.aggregations.iter().map(|a| a.mae).collect();
    for (m, want) in maes.iter().zip([1.0, 2.0, 3.0, 4.0]) {
        assert!((m - want).abs() < 1e-12, "{maes:?}");
    }
    assert_eq!(r.aggregations.iter().map(|a| a.seconds).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
}

#[test]
fn ci95_formula() {
    assert_eq!(format!("{:.4}", ci95(0.30046)), "0.5889");
    let gs = graphs(2, 3);
    let r = metrics_for(&shifted(&gs, 0.3), &gs, 5).unwrap();
    assert_eq!(r.ci95, 1.96 * r.aggregations[0].rmse);
}

#[test]
fn empty_split_is_invalid() {
    assert!(matches!(metrics_for(&[], &[], 5), Err(Error::InvalidArgument(_))));
    let m = small_model(0.0);
    assert!(matches!(evaluate(&m, &[], &Sequential), Err(Error::InvalidArgument(_))));
}

#[test]
fn evaluation_ignores_split_order() {
    let gs = graphs(6, 4);
    let m = small_model(0.0);
    let a = evaluate(&m, &gs, &Sequential).unwrap();
    let rev: Vec<SimGraph> = gs.iter().rev().cloned().collect();
    let b = evaluate(&m, &rev, &Sequential).unwrap();
    for (x, y) in a.aggregations.iter().zip(&b.aggregations) {
        assert!((x.mae - y.mae).abs() < 1e-12 && (x.rmse - y.rmse).abs() < 1e-12);
    }
}

#[test]
fn dummy_targets_never_move_metrics() {
    let topo = topologies::t_intersection();
    let spec = CorpusSpec::new(2, vec![topo.clone()], RegimeMix::Mixed, 5);
    let gs: Vec<SimGraph> = (0..2)
        .map(|i| {
            let s = spec.scenario(i).unwrap();
            let rec = simulate(&s.topology, &s.plan, &s.scenario, &spec.sim).unwrap().record;
            build_graph(&rec, &topo, TemplateKind::Exit).unwrap()
        })
        .collect();
    let m = small_model(0.0);
    let base = evaluate(&m, &gs, &Sequential).unwrap();
    let dummies: Vec<usize> = (0..gs[0].num_nodes()).filter(|&i| gs[0].dummy_mask[i]).collect();
    assert!(!dummies.is_empty());
    for &i in &dummies {
        let mut p = gs.clone();
        p[0].target.data[i * 80..(i + 1) * 80].iter_mut().for_each(|v| *v = 7.0);
        assert_eq!(evaluate(&m, &p, &Sequential).unwrap(), base);
    }
}

#[test]
fn zero_predictor_identities() {
    let mut gs = graphs(4, 6);
    let b = baselines(&gs, &gs).unwrap();
    let (mut acc, mut n) = (0.0, 0usize);
    for g in &gs {
        for i in (0..g.num_nodes()).filter(|&i| g.target_mask[i] && !g.dummy_mask[i]) {
            acc += g.target.row(i).iter().map(|v| v.abs()).sum::<f64>();
            n += g.window;
        }
    }
    assert!((b.zero.mae5() - acc / n as f64).abs() < 1e-12);
    assert!(b.mean.mse <= b.zero.mse);
    for g in &mut gs {
        g.target.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let b = baselines(&gs, &gs).unwrap();
    assert_eq!(b.zero.mae5(), 0.0);
}

#[test]
fn lr_zero_leaves_parameters_and_loss_unchanged() {
    let gs = graphs(6, 7);
    let m = small_model(0.0);
    let cfg = TrainConfig { lr: 0.0, max_epochs: 3, batch_size: 2, patience: 10, ..TrainConfig::default() };
    let out = train(&m, &gs[..4], &gs[4..], &cfg, &Sequential).unwrap();
    assert_eq!(out.model.params, m.params);
    let v0 = out.history[0].val_loss;
    let t0 = out.history[0].train_loss;
    assert!(out.history.iter().all(|h| h.val_loss == v0 && (h.train_loss - t0).abs() < 1e-12));
}

#[test]
fn same_seed_same_history() {
    let gs = graphs(6, 8);
    let m = small_model(0.2);
    let cfg = TrainConfig { max_epochs: 3, batch_size: 2, seed: 11, ..TrainConfig::default() };
    let a = train(&m, &gs[..4], &gs[4..], &cfg, &Sequential).unwrap();
    let b = train(&m, &gs[..4], &gs[4..], &cfg, &Sequential).unwrap();
    assert_eq!(a.history, b.history);
    assert!(a.step_losses.iter().zip(&b.step_losses).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn training_reduces_loss() {
    let gs = graphs(8, 9);
    let m = small_model(0.0);
    let cfg = TrainConfig { lr: 1e-2, max_epochs: 15, batch_size: 2, patience: 20, ..TrainConfig::default() };
    let out = train(&m, &gs, &[], &cfg, &Sequential).unwrap();
    assert!(out.best_val_loss < out.history[0].val_loss);
}

#[test]
fn early_stopping_keeps_best_checkpoint() {
    let gs = graphs(8, 10);
    let m = small_model(0.0);
    let cfg = TrainConfig { lr: 5e-2, max_epochs: 12, batch_size: 3, patience: 2, ..TrainConfig::default() };
    let out = train(&m, &gs[..6], &gs[6..], &cfg, &Sequential).unwrap();
    let min = out.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_loss, min);
    assert_eq!(mean_loss(&out.model, &gs[6..], &Sequential).unwrap(), min);
    let lr0 = TrainConfig { lr: 0.0, patience: 2, ..cfg };
    let out = train(&m, &gs[..6], &gs[6..], &lr0, &Sequential).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.history.len(), 3);
}

#[test]
fn nan_loss_reports_divergence() {
    let gs = graphs(2, 12);
    let mut m = small_model(0.0);
    m.params.iter_mut().find(|p| p.name == "dec.b").unwrap().value.data[0] = f64::NAN;
    let cfg = TrainConfig { max_epochs: 2, batch_size: 1, ..TrainConfig::default() };
    assert!(matches!(train(&m, &gs, &[], &cfg, &Sequential), Err(Error::Diverged { epoch: 1, step: 0 })));
}

#[test]
fn max_steps_caps_updates() {
    let gs = graphs(4, 13);
    let cfg = TrainConfig { max_epochs: 30, batch_size: 1, max_steps: Some(5), ..TrainConfig::default() };
    let out = train(&small_model(0.0), &gs, &[], &cfg, &Sequential).unwrap();
    assert_eq!(out.steps, 5);
    assert_eq!(out.step_losses.len(), 5);
}

#[test]
fn latents_skip_dummies_and_repeat_for_identical_graphs() {
    let g = graphs(1, 14).remove(0);
    let m = small_model(0.0);
    let t = export_latents(&m, &[g.clone(), g.clone()], &Sequential).unwrap();
    let real = g.dummy_mask.iter().filter(|&&d| !d).count();
    assert_eq!(t.rows.len(), 2 * real);
    for (a, b) in t.rows[..real].iter().zip(&t.rows[real..]) {
        assert_eq!((a.node, &a.latent, a.projection), (b.node, &b.latent, b.projection));
        assert!(!g.dummy_mask[a.node]);
        assert_eq!(a.latent.len(), 6);
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let m = (n - 1.0) / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - m) * (y - m)).sum();
    let var: f64 = ra.iter().map(|x| (x - m) * (x - m)).sum();
    cov / var
}

#[test]
fn principal_projection_beats_random_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let scales = [6.0, 4.0, 1.0, 0.5, 0.3, 0.2];
    let rows: Vec<Vec<f64>> = (0..60)
        .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
        .collect();
    let (mean, axes, explained) = pca2(&rows).unwrap();
    assert!(explained[0] >= explained[1]);
    let project = |axes: &[Vec<f64>; 2]| -> Vec<[f64; 2]> {
        rows.iter()
            .map(|r| {
                let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
                [0, 1].map(|k| c.iter().zip(&axes[k]).map(|(a, b)| a * b).sum())
            })
            .collect()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut full = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            full.push(dist(&rows[i], &rows[j]));
        }
    }
    let score = |p: &[[f64; 2]]| {
        let mut d = Vec::new();
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                d.push(dist(&p[i], &p[j]));
            }
        }
        spearman(&full, &d)
    };
    let pca = score(&project(&axes));
    let mut random_total = 0.0;
    for _ in 0..10 {
        let r: [Vec<f64>; 2] = [0, 1].map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        random_total += score(&project(&r));
    }
    assert!(pca > random_total / 10.0, "pca {pca} random {}", random_total / 10.0);
}

fn names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

#[test]
fn exact_linear_response_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut xs: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    // center exactly so the means are zero
    for j in 0..2 {
        let m = xs.iter().map(|r| r[j]).sum::<f64>() / 50.0;
        xs.iter_mut().for_each(|r| r[j] -= m);
    }
    let y: Vec<f64> = xs.iter().map(|r| 2.0 * r[0] + 3.0 * r[1]).collect();
    let e = explain_features(names(2), &xs, &y).unwrap();
    assert!((e.surrogate.coefficients[0] - 2.0).abs() < 1e-8);
    assert!((e.surrogate.coefficients[1] - 3.0).abs() < 1e-8);
    assert!(1.0 - e.surrogate.r2 < 1e-10);
    assert!(!e.surrogate.ridge);
    for (x, s) in xs.iter().zip(&e.shap) {
        assert!((s[0] - 2.0 * x[0]).abs() < 1e-8 && (s[1] - 3.0 * x[1]).abs() < 1e-8);
    }
    assert_eq!(e.ranking[0].feature, "x1");
}

#[test]
fn constant_feature_gets_zero_attribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xs: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(0.0..1.0), 4.0]).collect();
    let y: Vec<f64> = xs.iter().map(|r| 1.5 * r[0] - 0.5).collect();
    let e = explain_features(names(2), &xs, &y).unwrap();
    assert!(e.surrogate.ridge);
    assert_eq!(e.surrogate.warnings.len(), 1);
    assert!(e.shap.iter().all(|s| s[1] == 0.0));
    assert!((e.surrogate.coefficients[0] - 1.5).abs() < 1e-4);
}

#[test]
fn explain_linear_uses_covariates() {
    let gs = graphs(12, 18);
    let e = explain_linear(&small_model(0.0), &gs, &Sequential).unwrap();
    assert_eq!(e.ranking.len(), crate::graphs::NUM_COVARIATES);
    assert_eq!(e.shap.len(), 12);
    assert!(e.ranking.windows(2).all(|w| w[0].mean_abs_shap >= w[1].mean_abs_shap));
    assert!(e.ranking.iter().any(|r| r.feature == "drv.accel".to_string()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mae_bounds(seed in any::<u64>(), noise in 0.01f64..3.0) {
        let g = graphs(1, seed % 50);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<Tensor> = g.iter().map(|g| Tensor::from_fn(&g.target.shape, |k| g.target.data[k] + noise * rng.random_range(-1.0..1.0))).collect();
        let r = metrics_for(&preds, &g, 5).unwrap();
        let m5 = r.aggregations[0].mae;
        for a in &r.aggregations {
            prop_assert!(a.mae <= a.rmse + 1e-12);
            prop_assert!(a.mae >= 0.0 && a.rmse.is_finite());
            prop_assert!(a.mae <= f64::from(a.seconds / 5) * m5 + 1e-9);
        }
    }
}
