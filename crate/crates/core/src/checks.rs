//! Finite-difference gradient suite: every tape primitive, every layer
//! and every twin variant, each reduced to a scalar with fixed random
//! weights so that every output entry carries a distinct upstream gradient.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graphs::build_graph;
use crate::mpnn::{
    Activation, Combine, EdgeIndex, GatConfig, GatLayer, GcnLayer, Linear, SageLayer, ScoreActivation,
    SelfAttentionConfig, TemporalSelfAttention,
};
use crate::ndiff::{gradcheck, GradcheckReport, ParamId, ParamSet, Tape, Tensor, Var};
use crate::sim::{simulate, CorpusSpec, RegimeMix};
use crate::template::topologies;
use crate::twins::{loss, make_variant, TwinConfig, Variant};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    /// `"primitive"`, `"layer"` or `"model"`.
    pub group: &'static str,
    pub name: String,
    pub report: GradcheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn weighted(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

type Primitive = (&'static str, Vec<Vec<usize>>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn primitive_cases() -> Vec<Primitive> {
    vec![
        ("add", vec![vec![3, 2], vec![3, 2]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 2], vec![3, 2]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 2], vec![3, 2]], |t, v| t.mul(v[0], v[1])),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("add_bias", vec![vec![4, 3], vec![3]], |t, v| t.add_bias(v[0], v[1])),
        ("mul_rows", vec![vec![4, 3], vec![4, 1]], |t, v| t.mul_rows(v[0], v[1])),
        ("scale", vec![vec![2, 2]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("concat0", vec![vec![2, 3], vec![1, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
        ("concat1", vec![vec![2, 3], vec![2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![3, 5]], |t, v| t.slice(v[0], 1, 1, 3)),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("transpose3", vec![vec![2, 3, 4]], |t, v| t.transpose(v[0])),
        ("reshape", vec![vec![3, 4]], |t, v| t.reshape(v[0], &[2, 6])),
        ("relu", vec![vec![4, 4]], |t, v| Ok(t.relu(v[0]))),
        ("leaky_relu", vec![vec![4, 4]], |t, v| Ok(t.leaky_relu(v[0], 0.2))),
        ("softmax1", vec![vec![3, 4]], |t, v| t.softmax(v[0], 1)),
        ("softmax0", vec![vec![3, 4]], |t, v| t.softmax(v[0], 0)),
        ("gather", vec![vec![4, 3]], |t, v| t.gather(v[0], &[2, 0, 2, 3])),
        ("scatter_add", vec![vec![5, 2]], |t, v| t.scatter_add(v[0], &[1, 0, 1, 3, 1], 4)),
        ("segment_softmax", vec![vec![6, 1]], |t, v| t.segment_softmax(v[0], &[0, 1, 0, 2, 1, 0])),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |t, v| t.bmm(v[0], v[1], false)),
        ("bmm_nt", vec![vec![2, 3, 4], vec![2, 5, 4]], |t, v| t.bmm(v[0], v[1], true)),
        ("sum", vec![vec![3, 3]], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![vec![3, 3]], |t, v| Ok(t.mean(v[0]))),
        ("mse", vec![vec![3, 3]], |t, v| {
            let target = Tensor::from_fn(&[3, 3], |k| k as f64 * 0.1);
            let mask: Vec<bool> = (0..9).map(|k| k % 3 != 1).collect();
            t.mse(v[0], &target, &mask)
        }),
        ("causal_mask", vec![vec![1, 3, 3]], |t, v| {
            let mask = Tensor::from_fn(&[1, 3, 3], |k| if k % 3 > k / 3 { f64::NEG_INFINITY } else { 0.0 });
            let m = t.add_const(v[0], &mask)?;
            t.softmax(m, 2)
        }),
        ("attention_weights", vec![vec![2, 5, 3], vec![2, 5, 3]], |t, v| t.attention_weights(v[0], v[1], 0.7, true)),
        ("attention_weights_full", vec![vec![2, 4, 3], vec![2, 4, 3]], |t, v| {
            t.attention_weights(v[0], v[1], 0.5, false)
        }),
        ("dropout", vec![vec![4, 4]], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            t.dropout(v[0], 0.3, true, &mut rng)
        }),
    ]
}

pub fn primitives() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (k, (name, shapes, op)) in primitive_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + k as u64);
        let mut ps = ParamSet::new();
        for (i, s) in shapes.iter().enumerate() {
            ps.add(alloc::format!("p{i}"), rand_tensor(&mut rng, s));
        }
        let report = gradcheck(&ps, STEP, |t, ps| {
            let vars: Vec<Var> = (0..ps.len()).map(|i| t.param(ps, ParamId(i))).collect();
            let y = op(t, &vars)?;
            weighted(t, y, 77)
        })?;
        out.push(CheckResult {
            group: "primitive",
            name: name.to_string(),
            report,
        });
    }
    Ok(out)
}

pub fn layers() -> Result<Vec<CheckResult>> {
    let rng = ChaCha8Rng::seed_from_u64;
    let edges = EdgeIndex::new(4, &[(0, 2), (1, 2), (1, 3), (0, 3), (2, 3)])?;
    let xt = rand_tensor(&mut rng(30), &[4, 3]);
    let zt = rand_tensor(&mut rng(31), &[5, 4]);
    let mut out = Vec::new();
    let mut push = |name: &str, report| {
        out.push(CheckResult {
            group: "layer",
            name: name.to_string(),
            report,
        })
    };

    for (name, score) in [("gat", ScoreActivation::Relu), ("gat_leaky", ScoreActivation::LeakyRelu(0.2))] {
        let mut ps = ParamSet::new();
        let cfg = GatConfig {
            in_dim: 3,
            out_dim: 2,
            heads: 2,
            edge_dim: 4,
            edge_proj_dim: 3,
            combine: Combine::Concat,
            score,
            activation: Activation::Identity,
            root_self: true,
            strict: false,
        };
        let gat = GatLayer::new(&mut ps, "gat", cfg, &mut rng(33))?;
        push(
            name,
            gradcheck(&ps, STEP, |t, ps| {
                let x = t.constant(xt.clone());
                let z = t.constant(zt.clone());
                let y = gat.forward(t, ps, x, &edges, Some(z))?.out;
                weighted(t, y, 1)
            })?,
        );
    }

    let mut ps = ParamSet::new();
    let gcn = GcnLayer::new(&mut ps, "gcn", 3, 4, Activation::Relu, &mut rng(34));
    push(
        "gcn",
        gradcheck(&ps, STEP, |t, ps| {
            let x = t.constant(xt.clone());
            let y = gcn.forward(t, ps, x, &edges)?;
            weighted(t, y, 2)
        })?,
    );

    let mut ps = ParamSet::new();
    let sage = SageLayer::new(&mut ps, "sage", 3, 4, Activation::Relu, &mut rng(35));
    push(
        "sage",
        gradcheck(&ps, STEP, |t, ps| {
            let x = t.constant(xt.clone());
            let y = sage.forward(t, ps, x, &edges)?;
            weighted(t, y, 3)
        })?,
    );

    let mut ps = ParamSet::new();
    let cfg = SelfAttentionConfig {
        window: 5,
        d_model: 4,
        heads: 2,
        d_k: 3,
        causal: true,
        dropout: 0.0,
    };
    let sa = TemporalSelfAttention::new(&mut ps, "sa", cfg, &mut rng(36))?;
    // a nonzero positional table keeps the check off the zero-init point
    let pos = sa.pos;
    ps.get_mut(pos).value.data.iter_mut().enumerate().for_each(|(k, v)| *v = libm::cos(k as f64) * 0.3);
    let xs = rand_tensor(&mut rng(37), &[3, 5]);
    push(
        "self_attention",
        gradcheck(&ps, STEP, |t, ps| {
            let x = t.constant(xs.clone());
            let y = sa.forward(t, ps, x, false, &mut rng(0))?.out;
            weighted(t, y, 4)
        })?,
    );

    let mut ps = ParamSet::new();
    let dec = Linear::new(&mut ps, "dec", 3, 4, &mut rng(38));
    push(
        "decoder",
        gradcheck(&ps, STEP, |t, ps| {
            let x = t.constant(xt.clone());
            let y = dec.forward(t, ps, x)?;
            let y = t.relu(y);
            weighted(t, y, 5)
        })?,
    );
    Ok(out)
}

/// Whole twins on a real 6-bucket graph with tiny widths.
pub fn models() -> Result<Vec<CheckResult>> {
    let spec = CorpusSpec::new(1, topologies::all(), RegimeMix::Mixed, 12);
    let s = spec.scenario(0)?;
    let record = simulate(&s.topology, &s.plan, &s.scenario, &spec.sim)?.record;
    let mut out = Vec::new();
    for v in Variant::ALL {
        let mut g = build_graph(&record, &s.topology, v.kind())?.truncated(6)?;
        // non-integer inputs keep every ReLU away from its kink
        g.x.data.iter_mut().enumerate().for_each(|(k, x)| *x += 0.137 * (k % 11) as f64 + 0.05);
        let config = TwinConfig {
            hidden: 4,
            window: 6,
            edge_proj_dim: 3,
            attention_d_model: 3,
            attention_d_k: 2,
            dropout: 0.0,
            seed: 42,
            ..v.config()
        };
        let mut m = make_variant(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in m.params.iter_mut().filter(|p| p.name.ends_with(".b") || p.name.ends_with(".pos")) {
            p.value.data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let report = gradcheck(&m.params, STEP, |tape, ps| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let fwd = m.forward_with(tape, ps, &g, false, &mut rng)?;
            loss(tape, fwd.pred, &g)
        })?;
        out.push(CheckResult {
            group: "model",
            name: v.name().to_string(),
            report,
        });
    }
    Ok(out)
}

pub fn suite() -> Result<Vec<CheckResult>> {
    let mut all = primitives()?;
    all.extend(layers()?);
    all.extend(models()?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let all = suite().unwrap();
        for c in &all {
            assert!(c.report.checked > 0, "{}", c.name);
            assert!(c.passed(), "{} {}: {:?}", c.group, c.name, c.report);
        }
        for name in ["gat", "gcn", "sage", "self_attention", "decoder"] {
            assert!(all.iter().any(|c| c.group == "layer" && c.name == name));
        }
        assert_eq!(all.iter().filter(|c| c.group == "model").count(), Variant::ALL.len());
    }
}
