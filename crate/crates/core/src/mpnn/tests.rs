use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| r.random_range(-1.0..1.0))
}

fn gat_config(in_dim: usize, out_dim: usize, heads: usize, edge_dim: usize, combine: Combine) -> GatConfig {
    GatConfig {
        in_dim,
        out_dim,
        heads,
        edge_dim,
        edge_proj_dim: if edge_dim > 0 { 3 } else { 0 },
        combine,
        score: ScoreActivation::Relu,
        activation: Activation::Identity,
        root_self: false,
        strict: false,
    }
}

fn run_gat(layer: &GatLayer, ps: &ParamSet, x: &Tensor, edges: &EdgeIndex, z: Option<&Tensor>) -> (Tensor, Vec<Tensor>) {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let zv = z.map(|z| t.constant(z.clone()));
    let out = layer.forward(&mut t, ps, xv, edges, zv).unwrap();
    let att = out.attention.iter().map(|&a| t.value(a).clone()).collect();
    (t.value(out.out).clone(), att)
}

fn dense_mul(a: &[Vec<f64>], b: &Tensor) -> Vec<Vec<f64>> {
    let (k, n) = (b.shape[0], b.shape[1]);
    a.iter()
        .map(|row| (0..n).map(|j| (0..k).map(|p| row[p] * b.at2(p, j)).sum()).collect())
        .collect()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn single_in_neighbour_gets_full_attention() {
    let mut ps = ParamSet::new();
    let layer = GatLayer::new(&mut ps, "g", gat_config(4, 3, 2, 0, Combine::Average), &mut rng(1)).unwrap();
    let edges = EdgeIndex::new(2, &[(0, 1)]).unwrap();
    let x = rand_matrix(&mut rng(2), 2, 4);
    let (_, att) = run_gat(&layer, &ps, &x, &edges, None);
    for a in att {
        assert_eq!(a.data, vec![1.0]);
    }
}

#[test]
fn identical_neighbours_split_attention() {
    let mut ps = ParamSet::new();
    let layer = GatLayer::new(&mut ps, "g", gat_config(4, 3, 2, 5, Combine::Concat), &mut rng(3)).unwrap();
    let edges = EdgeIndex::new(3, &[(0, 2), (1, 2)]).unwrap();
    let mut x = rand_matrix(&mut rng(4), 3, 4);
    let first = x.row(0).to_vec();
    x.data[4..8].copy_from_slice(&first);
    let zrow: Vec<f64> = (0..5).map(|k| k as f64 * 0.3).collect();
    let z = Tensor::from_rows(&[zrow.clone(), zrow]).unwrap();
    let (_, att) = run_gat(&layer, &ps, &x, &edges, Some(&z));
    for a in att {
        assert_eq!(a.data, vec![0.5, 0.5]);
    }
}

/// Brute-force evaluation of the GAT equations with explicit loops.
fn gat_reference(layer: &GatLayer, ps: &ParamSet, x: &Tensor, edges: &[(usize, usize)], z: &Tensor) -> Vec<Vec<f64>> {
    let c = &layer.config;
    let n = x.rows();
    let d = c.out_dim;
    let mut heads_out = Vec::new();
    for head in &layer.heads {
        let w = &ps.get(head.w).value;
        let a = &ps.get(head.a).value.data;
        let wh = dense_mul(&rows_of(x), w);
        let we = &ps.get(head.w_e.unwrap()).value;
        let zp = dense_mul(&rows_of(z), we);
        let mut out = vec![vec![0.0; d]; n];
        for i in 0..n {
            let inc: Vec<usize> = (0..edges.len()).filter(|&k| edges[k].1 == i).collect();
            if inc.is_empty() {
                continue;
            }
            let scores: Vec<f64> = inc
                .iter()
                .map(|&k| {
                    let j = edges[k].0;
                    let mut s = 0.0;
                    for q in 0..d {
                        s += a[q] * wh[i][q] + a[d + q] * wh[j][q];
                    }
                    for q in 0..c.edge_proj_dim {
                        s += a[2 * d + q] * zp[k][q];
                    }
                    s.max(0.0)
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let tot: f64 = ex.iter().sum();
            for (e, &k) in ex.iter().zip(&inc) {
                for q in 0..d {
                    out[i][q] += e / tot * wh[edges[k].0][q];
                }
            }
        }
        heads_out.push(out);
    }
    let b = &ps.get(layer.bias).value.data;
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = heads_out.iter().flat_map(|h| h[i].clone()).collect();
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
            row
        })
        .collect()
}

#[test]
fn gat_matches_dense_reference() {
    let mut ps = ParamSet::new();
    let layer = GatLayer::new(&mut ps, "g", gat_config(3, 2, 2, 4, Combine::Concat), &mut rng(5)).unwrap();
    let bias = layer.bias;
    ps.get_mut(bias).value.data = vec![0.1, -0.2, 0.3, 0.05];
    let edge_list = [(0, 1), (2, 1), (1, 2), (0, 2)];
    let edges = EdgeIndex::new(3, &edge_list).unwrap();
    let x = rand_matrix(&mut rng(6), 3, 3);
    let z = rand_matrix(&mut rng(7), 4, 4);
    let (got, _) = run_gat(&layer, &ps, &x, &edges, Some(&z));
    let want = gat_reference(&layer, &ps, &x, &edge_list, &z);
    for i in 0..3 {
        for q in 0..4 {
            assert!((got.at2(i, q) - want[i][q]).abs() < 1e-12);
        }
    }
}

#[test]
fn gat_root_self_and_strict_warning() {
    let mut cfg = gat_config(2, 2, 1, 0, Combine::Average);
    cfg.strict = true;
    let mut ps = ParamSet::new();
    let layer = GatLayer::new(&mut ps, "g", cfg.clone(), &mut rng(8)).unwrap();
    let edges = EdgeIndex::new(3, &[(0, 1)]).unwrap();
    let mut t = Tape::new();
    let x = t.constant(rand_matrix(&mut rng(9), 3, 2));
    let out = layer.forward(&mut t, &ps, x, &edges, None).unwrap();
    assert_eq!(out.warnings.len(), 2);

    cfg.root_self = true;
    let mut ps = ParamSet::new();
    let layer = GatLayer::new(&mut ps, "g", cfg, &mut rng(8)).unwrap();
    let xt = rand_matrix(&mut rng(9), 3, 2);
    let mut t = Tape::new();
    let x = t.constant(xt.clone());
    let out = layer.forward(&mut t, &ps, x, &edges, None).unwrap();
    assert!(out.warnings.is_empty());
    // root node 0 keeps W h_0
    let wh = dense_mul(&rows_of(&xt), &ps.get(layer.heads[0].w).value);
    let y = t.value(out.out);
    for q in 0..2 {
        assert!((y.at2(0, q) - wh[0][q]).abs() < 1e-12);
        assert!((y.at2(1, q) - wh[0][q]).abs() < 1e-12);
    }
}

#[test]
fn gcn_single_self_looped_node() {
    let mut ps = ParamSet::new();
    let layer = GcnLayer::new(&mut ps, "c", 3, 2, Activation::Relu, &mut rng(10));
    ps.get_mut(layer.b).value.data = vec![0.2, -5.0];
    let edges = EdgeIndex::new(1, &[]).unwrap();
    let xt = rand_matrix(&mut rng(11), 1, 3);
    let mut t = Tape::new();
    let x = t.constant(xt.clone());
    let y = layer.forward(&mut t, &ps, x, &edges).unwrap();
    let wh = dense_mul(&rows_of(&xt), &ps.get(layer.w).value);
    assert!((t.value(y).data[0] - (wh[0][0] + 0.2).max(0.0)).abs() < 1e-12);
    assert_eq!(t.value(y).data[1], 0.0);
}

#[test]
fn gcn_symmetric_pair_equal_outputs() {
    let mut ps = ParamSet::new();
    let layer = GcnLayer::new(&mut ps, "c", 3, 4, Activation::Relu, &mut rng(12));
    let edges = EdgeIndex::new(2, &[(0, 1), (1, 0)]).unwrap();
    let row: Vec<f64> = vec![0.3, -0.7, 1.1];
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[row.clone(), row]).unwrap());
    let y = layer.forward(&mut t, &ps, x, &edges).unwrap();
    let y = t.value(y);
    assert_eq!(y.row(0), y.row(1));
}

#[test]
fn gcn_matches_dense_normalised_adjacency() {
    let mut ps = ParamSet::new();
    let layer = GcnLayer::new(&mut ps, "c", 3, 2, Activation::Identity, &mut rng(13));
    let edge_list = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)];
    let edges = EdgeIndex::new(4, &edge_list).unwrap();
    let xt = rand_matrix(&mut rng(14), 4, 3);
    // Â = D^-1/2 (A + I) D^-1/2 with in-degrees
    let mut adj = vec![vec![0.0; 4]; 4];
    for &(s, d) in &edge_list {
        adj[d][s] += 1.0;
    }
    for (i, row) in adj.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let norm: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..4).map(|j| adj[i][j] / (deg[i] * deg[j]).sqrt()).collect())
        .collect();
    let ax: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..3).map(|q| (0..4).map(|j| norm[i][j] * xt.at2(j, q)).sum()).collect())
        .collect();
    let want = dense_mul(&ax, &ps.get(layer.w).value);
    let mut t = Tape::new();
    let x = t.constant(xt);
    let y = layer.forward(&mut t, &ps, x, &edges).unwrap();
    for i in 0..4 {
        for q in 0..2 {
            assert!((t.value(y).at2(i, q) - want[i][q]).abs() < 1e-12);
        }
    }
}

fn run_sage(layer: &SageLayer, ps: &ParamSet, x: &Tensor, edges: &EdgeIndex) -> Tensor {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = layer.forward(&mut t, ps, xv, edges).unwrap();
    t.value(y).clone()
}

#[test]
fn sage_cases() {
    let mut ps = ParamSet::new();
    let layer = SageLayer::new(&mut ps, "s", 3, 2, Activation::Relu, &mut rng(15));
    // no neighbours: relu(W1 h)
    let xt = rand_matrix(&mut rng(16), 1, 3);
    let y = run_sage(&layer, &ps, &xt, &EdgeIndex::new(1, &[]).unwrap());
    let w1h = dense_mul(&rows_of(&xt), &ps.get(layer.w_self).value);
    for q in 0..2 {
        assert!((y.data[q] - w1h[0][q].max(0.0)).abs() < 1e-12);
    }
    // identical neighbours: mean equals the shared row
    let shared = vec![0.5, -0.25, 2.0];
    let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], shared.clone(), shared.clone(), shared.clone()]).unwrap();
    let y = run_sage(&layer, &ps, &x, &EdgeIndex::new(4, &[(1, 0), (2, 0), (3, 0)]).unwrap());
    let single = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], shared]).unwrap();
    let y1 = run_sage(&layer, &ps, &single, &EdgeIndex::new(2, &[(1, 0)]).unwrap());
    for q in 0..2 {
        assert!((y.at2(0, q) - y1.at2(0, q)).abs() < 1e-12);
    }
}

#[test]
fn sage_matches_brute_force_loop() {
    let mut ps = ParamSet::new();
    let layer = SageLayer::new(&mut ps, "s", 3, 4, Activation::Identity, &mut rng(17));
    ps.get_mut(layer.b).value.data = vec![0.1, 0.2, 0.3, 0.4];
    let edge_list = [(0, 1), (2, 1), (3, 1), (1, 4), (4, 0), (2, 0)];
    let xt = rand_matrix(&mut rng(18), 5, 3);
    let y = run_sage(&layer, &ps, &xt, &EdgeIndex::new(5, &edge_list).unwrap());
    let (w1, w2) = (&ps.get(layer.w_self).value, &ps.get(layer.w_neigh).value);
    for i in 0..5 {
        let nb: Vec<usize> = edge_list.iter().filter(|e| e.1 == i).map(|e| e.0).collect();
        let mut mean = vec![0.0; 3];
        for &j in &nb {
            for q in 0..3 {
                mean[q] += xt.at2(j, q) / nb.len() as f64;
            }
        }
        for o in 0..4 {
            let mut v = 0.1 * (o + 1) as f64;
            for q in 0..3 {
                v += xt.at2(i, q) * w1.at2(q, o) + mean[q] * w2.at2(q, o);
            }
            assert!((y.at2(i, o) - v).abs() < 1e-12);
        }
    }
}

fn attn_config(window: usize, heads: usize) -> SelfAttentionConfig {
    SelfAttentionConfig {
        window,
        d_model: 4,
        heads,
        d_k: 3,
        causal: true,
        dropout: 0.0,
    }
}

#[test]
fn zero_value_projection_is_identity() {
    let mut ps = ParamSet::new();
    let sa = TemporalSelfAttention::new(&mut ps, "sa", attn_config(6, 2), &mut rng(19)).unwrap();
    for h in &sa.heads {
        ps.get_mut(h.wv).value.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let xt = rand_matrix(&mut rng(20), 3, 6);
    let mut t = Tape::new();
    let x = t.constant(xt.clone());
    let out = sa.forward(&mut t, &ps, x, true, &mut rng(0)).unwrap();
    assert_eq!(t.value(out.out).data, xt.data);
}

#[test]
fn causal_weights_vanish_on_future() {
    let mut ps = ParamSet::new();
    let sa = TemporalSelfAttention::new(&mut ps, "sa", attn_config(8, 2), &mut rng(21)).unwrap();
    let mut t = Tape::new();
    let x = t.constant(rand_matrix(&mut rng(22), 2, 8));
    let out = sa.forward(&mut t, &ps, x, false, &mut rng(0)).unwrap();
    for &wv in &out.weights {
        let w = t.value(wv);
        for n in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    let a = w.data[n * 64 + i * 8 + j];
                    if !causal_allowed(i, j) {
                        assert_eq!(a, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn single_node_attention_matches_hand_rolled() {
    let mut ps = ParamSet::new();
    let sa = TemporalSelfAttention::new(&mut ps, "sa", attn_config(4, 1), &mut rng(23)).unwrap();
    let pos = sa.pos;
    ps.get_mut(pos).value.data = (0..16).map(|k| (k as f64 * 0.37).sin()).collect();
    let x = [0.5, -1.0, 2.0, 0.25];
    let mut t = Tape::new();
    let xv = t.constant(Tensor::new(&[1, 4], x.to_vec()).unwrap());
    let out = sa.forward(&mut t, &ps, xv, false, &mut rng(0)).unwrap();

    let embed = &ps.get(sa.embed).value.data;
    let posv = &ps.get(pos).value.data;
    let h: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|d| x[i] * embed[d] + posv[i * 4 + d]).collect()).collect();
    let proj = |id: ParamId| dense_mul(&h, &ps.get(id).value);
    let (q, k, v) = (proj(sa.heads[0].wq), proj(sa.heads[0].wk), proj(sa.heads[0].wv));
    let wo = &ps.get(sa.wo).value.data;
    for i in 0..4 {
        let keys: Vec<usize> = (0..4).filter(|&j| causal_allowed(i, j)).collect();
        let s: Vec<f64> = keys
            .iter()
            .map(|&j| (0..3).map(|d| q[i][d] * k[j][d]).sum::<f64>() / 3f64.sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let o: Vec<f64> = (0..3).map(|d| keys.iter().zip(&e).map(|(&j, ej)| ej / z * v[j][d]).sum()).collect();
        let y = x[i] + (0..3).map(|d| o[d] * wo[d]).sum::<f64>();
        assert!((t.value(out.out).data[i] - y).abs() < 1e-12);
    }
}

fn random_graph(seed: u64, n: usize, m: usize) -> Vec<(usize, usize)> {
    let mut r = rng(seed);
    (0..m).map(|_| (r.random_range(0..n), r.random_range(0..n))).collect()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let k = t.row_len();
    let mut out = t.clone();
    for i in 0..t.rows() {
        out.data[perm[i] * k..(perm[i] + 1) * k].copy_from_slice(t.row(i));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gat_attention_sums_to_one(seed in any::<u64>(), n in 2usize..8, m in 1usize..20) {
        let edge_list = random_graph(seed, n, m);
        let edges = EdgeIndex::new(n, &edge_list).unwrap();
        let mut ps = ParamSet::new();
        let layer = GatLayer::new(&mut ps, "g", gat_config(3, 4, 2, 2, Combine::Concat), &mut rng(seed ^ 5)).unwrap();
        let x = rand_matrix(&mut rng(seed ^ 6), n, 3);
        let z = rand_matrix(&mut rng(seed ^ 7), m, 2);
        let (_, att) = run_gat(&layer, &ps, &x, &edges, Some(&z));
        for a in att {
            let mut sums = vec![0.0; n];
            for (k, &d) in edges.dst.iter().enumerate() {
                sums[d] += a.data[k];
            }
            for (i, s) in sums.iter().enumerate() {
                if edges.dst.contains(&i) {
                    prop_assert!((s - 1.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn equal_heads_average_like_one_head(seed in any::<u64>()) {
        let edge_list = random_graph(seed, 5, 9);
        let edges = EdgeIndex::new(5, &edge_list).unwrap();
        let mut ps1 = ParamSet::new();
        let one = GatLayer::new(&mut ps1, "g", gat_config(3, 2, 1, 2, Combine::Average), &mut rng(seed)).unwrap();
        let mut ps3 = ParamSet::new();
        let three = GatLayer::new(&mut ps3, "g", gat_config(3, 2, 3, 2, Combine::Average), &mut rng(seed)).unwrap();
        for h in &three.heads {
            ps3.get_mut(h.w).value = ps1.get(one.heads[0].w).value.clone();
            ps3.get_mut(h.a).value = ps1.get(one.heads[0].a).value.clone();
            ps3.get_mut(h.w_e.unwrap()).value = ps1.get(one.heads[0].w_e.unwrap()).value.clone();
        }
        let x = rand_matrix(&mut rng(seed ^ 1), 5, 3);
        let z = rand_matrix(&mut rng(seed ^ 2), 9, 2);
        let (a, _) = run_gat(&one, &ps1, &x, &edges, Some(&z));
        let (b, _) = run_gat(&three, &ps3, &x, &edges, Some(&z));
        for (p, q) in a.data.iter().zip(&b.data) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn layers_are_permutation_equivariant(seed in any::<u64>(), n in 2usize..7, m in 1usize..14) {
        let edge_list = random_graph(seed, n, m);
        let edges = EdgeIndex::new(n, &edge_list).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = rng(seed ^ 9);
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let pe = edges.permuted(&perm);
        let x = rand_matrix(&mut rng(seed ^ 3), n, 3);
        let px = permute_rows(&x, &perm);
        let z = rand_matrix(&mut rng(seed ^ 4), m, 2);

        let mut ps = ParamSet::new();
        let mut cfg = gat_config(3, 2, 2, 2, Combine::Concat);
        cfg.root_self = true;
        let gat = GatLayer::new(&mut ps, "g", cfg, &mut rng(seed)).unwrap();
        let (a, _) = run_gat(&gat, &ps, &x, &edges, Some(&z));
        let (b, _) = run_gat(&gat, &ps, &px, &pe, Some(&z));
        let a = permute_rows(&a, &perm);
        for (p, q) in a.data.iter().zip(&b.data) {
            prop_assert!((p - q).abs() <= 1e-12);
        }

        let mut ps = ParamSet::new();
        let gcn = GcnLayer::new(&mut ps, "c", 3, 2, Activation::Relu, &mut rng(seed));
        let sage = SageLayer::new(&mut ps, "s", 3, 2, Activation::Relu, &mut rng(seed ^ 8));
        let run = |x: &Tensor, e: &EdgeIndex| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let g = gcn.forward(&mut t, &ps, xv, e).unwrap();
            let s = sage.forward(&mut t, &ps, xv, e).unwrap();
            (t.value(g).clone(), t.value(s).clone())
        };
        let (ga, sa) = run(&x, &edges);
        let (gb, sb) = run(&px, &pe);
        for (p, q) in permute_rows(&ga, &perm).data.iter().zip(&gb.data) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
        for (p, q) in permute_rows(&sa, &perm).data.iter().zip(&sb.data) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn temporal_attention_is_causal(seed in any::<u64>(), t0 in 0usize..10, delta in -3.0f64..3.0) {
        prop_assume!(delta.abs() > 1e-3);
        let mut ps = ParamSet::new();
        let sa = TemporalSelfAttention::new(&mut ps, "sa", attn_config(10, 2), &mut rng(seed)).unwrap();
        let pos = sa.pos;
        let mut r = rng(seed ^ 11);
        ps.get_mut(pos).value.data.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        let x = rand_matrix(&mut rng(seed ^ 12), 2, 10);
        let mut y = x.clone();
        y.data[t0] += delta;
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let out = sa.forward(&mut t, &ps, xv, false, &mut rng(0)).unwrap();
            let w = out.weights.iter().map(|&w| t.value(w).clone()).collect::<Vec<_>>();
            (t.value(out.out).clone(), w)
        };
        let (a, wa) = run(&x);
        let (b, _) = run(&y);
        for tt in 0..t0 {
            prop_assert_eq!(a.data[tt], b.data[tt]);
            prop_assert_eq!(a.data[10 + tt], b.data[10 + tt]);
        }
        for w in wa {
            for row in w.data.chunks(10) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }
}
