//! Message-passing layers (GAT, GCN, GraphSAGE), a dense linear layer, and
//! causal temporal self-attention, all recorded on an [`ndiff::Tape`].
//!
//! Node features are `N × d` row matrices. Edges are directed
//! `src → dst`; messages flow into `dst`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::ndiff::{ParamId, ParamSet, Tape, Tensor, Var};

/// Edge structure shared by every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeIndex {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl EdgeIndex {
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if let Some(&(s, d)) = edges.iter().find(|&&(s, d)| s >= num_nodes || d >= num_nodes) {
            return Err(Error::invalid(format!("edge ({s}, {d}) outside {num_nodes} nodes")));
        }
        Ok(EdgeIndex {
            num_nodes,
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
        })
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &d in &self.dst {
            deg[d] += 1;
        }
        deg
    }

    /// 1.0 for nodes without in-edges.
    pub fn root_mask(&self) -> Vec<f64> {
        self.in_degree().iter().map(|&d| if d == 0 { 1.0 } else { 0.0 }).collect()
    }

    /// The same graph with every node index mapped through `perm`
    /// (new index of old node `i` is `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        EdgeIndex {
            num_nodes: self.num_nodes,
            src: self.src.iter().map(|&s| perm[s]).collect(),
            dst: self.dst.iter().map(|&d| perm[d]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

fn activate(tape: &mut Tape, x: Var, a: Activation) -> Var {
    match a {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
    }
}

/// Glorot-uniform matrix.
fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let lim = math::sqrt(6.0 / (rows + cols) as f64);
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-lim..lim))
}

/// `x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            w: params.add(format!("{name}.w"), glorot(rng, in_dim, out_dim)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Concat,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreActivation {
    Relu,
    LeakyRelu(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    /// Raw edge-feature width; 0 disables edge conditioning.
    pub edge_dim: usize,
    pub edge_proj_dim: usize,
    pub combine: Combine,
    pub score: ScoreActivation,
    pub activation: Activation,
    /// Nodes without in-edges add their own projected features.
    pub root_self: bool,
    /// Warn about nodes that end up with neither messages nor a self term.
    pub strict: bool,
}

impl GatConfig {
    pub fn output_dim(&self) -> usize {
        match self.combine {
            Combine::Concat => self.out_dim * self.heads,
            Combine::Average => self.out_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatHead {
    pub w: ParamId,
    /// Length `2·out_dim + edge_proj_dim`: receiver, sender, edge parts.
    pub a: ParamId,
    pub w_e: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub config: GatConfig,
    pub heads: Vec<GatHead>,
    pub bias: ParamId,
}

pub struct GatOutput {
    pub out: Var,
    /// Per head, attention coefficients aligned with the edge list.
    pub attention: Vec<Var>,
    pub warnings: Vec<String>,
}

impl GatLayer {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, config: GatConfig, rng: &mut R) -> Result<Self> {
        if config.heads == 0 {
            return Err(Error::Config("GAT needs at least one head".into()));
        }
        let (d, p) = (config.out_dim, if config.edge_dim > 0 { config.edge_proj_dim } else { 0 });
        let heads = (0..config.heads)
            .map(|k| GatHead {
                w: params.add(format!("{name}.h{k}.w"), glorot(rng, config.in_dim, d)),
                a: params.add(format!("{name}.h{k}.a"), glorot(rng, 2 * d + p, 1)),
                w_e: (p > 0).then(|| params.add(format!("{name}.h{k}.w_e"), glorot(rng, config.edge_dim, p))),
            })
            .collect();
        let bias = params.add(format!("{name}.b"), Tensor::zeros(&[config.output_dim()]));
        Ok(GatLayer { config, heads, bias })
    }

    /// `edge_feat` is `M × edge_dim` (ignored when `edge_dim == 0`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        edges: &EdgeIndex,
        edge_feat: Option<Var>,
    ) -> Result<GatOutput> {
        let c = &self.config;
        let n = edges.num_nodes;
        let xs = tape.shape(x).to_vec();
        if xs != [n, c.in_dim] {
            return Err(Error::shape("gat input", &xs, &[n, c.in_dim]));
        }
        let m = edges.num_edges();
        let ef = match (c.edge_dim, edge_feat) {
            (0, _) => None,
            (e, Some(z)) => {
                let zs = tape.shape(z).to_vec();
                if zs != [m, e] {
                    return Err(Error::shape("gat edge features", &zs, &[m, e]));
                }
                Some(z)
            }
            (e, None) => return Err(Error::shape("gat edge features", &[], &[m, e])),
        };
        let root = if c.root_self { edges.root_mask() } else { vec![0.0; n] };
        let mut warnings = Vec::new();
        if c.strict {
            let deg = edges.in_degree();
            for i in 0..n {
                if deg[i] == 0 && root[i] == 0.0 {
                    warnings.push(format!("node {i} has no in-edges and no self contribution"));
                }
            }
        }
        let root_v = tape.constant(Tensor::new(&[n, 1], root)?);
        let d = c.out_dim;
        let mut outs = Vec::with_capacity(c.heads);
        let mut attention = Vec::with_capacity(c.heads);
        for head in &self.heads {
            let w = tape.param(params, head.w);
            let wh = tape.matmul(x, w)?;
            let a = tape.param(params, head.a);
            let a_i = tape.slice(a, 0, 0, d)?;
            let a_j = tape.slice(a, 0, d, d)?;
            let s_i = tape.matmul(wh, a_i)?;
            let s_j = tape.matmul(wh, a_j)?;
            let e_i = tape.gather(s_i, &edges.dst)?;
            let e_j = tape.gather(s_j, &edges.src)?;
            let mut score = tape.add(e_i, e_j)?;
            if let (Some(z), Some(we)) = (ef, head.w_e) {
                let we = tape.param(params, we);
                let zp = tape.matmul(z, we)?;
                let a_e = tape.slice(a, 0, 2 * d, c.edge_proj_dim)?;
                let s_e = tape.matmul(zp, a_e)?;
                score = tape.add(score, s_e)?;
            }
            let score = match c.score {
                ScoreActivation::Relu => tape.relu(score),
                ScoreActivation::LeakyRelu(s) => tape.leaky_relu(score, s),
            };
            let alpha = tape.segment_softmax(score, &edges.dst)?;
            let msg = tape.gather(wh, &edges.src)?;
            let msg = tape.mul_rows(msg, alpha)?;
            let agg = tape.scatter_add(msg, &edges.dst, n)?;
            let own = tape.mul_rows(wh, root_v)?;
            outs.push(tape.add(agg, own)?);
            attention.push(alpha);
        }
        let combined = match c.combine {
            Combine::Concat => tape.concat(&outs, 1)?,
            Combine::Average => {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = tape.add(acc, o)?;
                }
                tape.scale(acc, 1.0 / c.heads as f64)
            }
        };
        let b = tape.param(params, self.bias);
        let out = tape.add_bias(combined, b)?;
        Ok(GatOutput {
            out: activate(tape, out, c.activation),
            attention,
            warnings,
        })
    }
}

/// Symmetric-normalised GCN with self-loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        GcnLayer {
            w: params.add(format!("{name}.w"), glorot(rng, in_dim, out_dim)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
            activation,
        }
    }

    /// Edges with self-loops appended and `1 / sqrt(deg_i deg_j)` weights,
    /// degrees counted on incoming edges.
    pub fn normalized(edges: &EdgeIndex) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let n = edges.num_nodes;
        let mut src = edges.src.clone();
        let mut dst = edges.dst.clone();
        src.extend(0..n);
        dst.extend(0..n);
        let mut deg = vec![0.0; n];
        for &d in &dst {
            deg[d] += 1.0;
        }
        let coef = src
            .iter()
            .zip(&dst)
            .map(|(&s, &d)| 1.0 / math::sqrt(deg[s] * deg[d]))
            .collect();
        (src, dst, coef)
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var, edges: &EdgeIndex) -> Result<Var> {
        let (src, dst, coef) = Self::normalized(edges);
        let w = tape.param(params, self.w);
        let wh = tape.matmul(x, w)?;
        let msg = tape.gather(wh, &src)?;
        let cv = tape.constant(Tensor::new(&[coef.len(), 1], coef)?);
        let msg = tape.mul_rows(msg, cv)?;
        let agg = tape.scatter_add(msg, &dst, edges.num_nodes)?;
        let b = tape.param(params, self.b);
        let out = tape.add_bias(agg, b)?;
        Ok(activate(tape, out, self.activation))
    }
}

/// GraphSAGE with mean aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SageLayer {
    pub w_self: ParamId,
    pub w_neigh: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl SageLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        SageLayer {
            w_self: params.add(format!("{name}.w_self"), glorot(rng, in_dim, out_dim)),
            w_neigh: params.add(format!("{name}.w_neigh"), glorot(rng, in_dim, out_dim)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var, edges: &EdgeIndex) -> Result<Var> {
        let n = edges.num_nodes;
        let inv: Vec<f64> = edges
            .in_degree()
            .iter()
            .map(|&d| if d == 0 { 0.0 } else { 1.0 / d as f64 })
            .collect();
        let msg = tape.gather(x, &edges.src)?;
        let sum = tape.scatter_add(msg, &edges.dst, n)?;
        let inv = tape.constant(Tensor::new(&[n, 1], inv)?);
        let mean = tape.mul_rows(sum, inv)?;
        let ws = tape.param(params, self.w_self);
        let wn = tape.param(params, self.w_neigh);
        let a = tape.matmul(x, ws)?;
        let bterm = tape.matmul(mean, wn)?;
        let h = tape.add(a, bterm)?;
        let b = tape.param(params, self.b);
        let out = tape.add_bias(h, b)?;
        Ok(activate(tape, out, self.activation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAttentionConfig {
    pub window: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub causal: bool,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Scaled dot-product attention along each node's time axis.
///
/// Each bucket value is lifted to `d_model` through a learned vector plus
/// a learned positional embedding; heads project back to one value per
/// bucket, which is added to the input after dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSelfAttention {
    pub config: SelfAttentionConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub heads: Vec<AttentionHead>,
    pub wo: ParamId,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per head, `N × w × w` weights (row = query position).
    pub weights: Vec<Var>,
}

/// Allowed (query, key) pairs: strictly earlier buckets, except bucket 0
/// which sees only itself.
pub fn causal_allowed(i: usize, j: usize) -> bool {
    j < i || (i == 0 && j == 0)
}

impl TemporalSelfAttention {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, config: SelfAttentionConfig, rng: &mut R) -> Result<Self> {
        if config.heads == 0 || config.d_k == 0 || config.d_model == 0 {
            return Err(Error::Config("self-attention sizes must be positive".into()));
        }
        let (dm, dk) = (config.d_model, config.d_k);
        let embed = params.add(format!("{name}.embed"), glorot(rng, 1, dm));
        let pos = params.add(format!("{name}.pos"), Tensor::zeros(&[config.window * dm]));
        let heads = (0..config.heads)
            .map(|k| AttentionHead {
                wq: params.add(format!("{name}.h{k}.wq"), glorot(rng, dm, dk)),
                wk: params.add(format!("{name}.h{k}.wk"), glorot(rng, dm, dk)),
                wv: params.add(format!("{name}.h{k}.wv"), glorot(rng, dm, dk)),
            })
            .collect();
        let wo = params.add(format!("{name}.wo"), glorot(rng, config.heads * dk, 1));
        Ok(TemporalSelfAttention {
            config,
            embed,
            pos,
            heads,
            wo,
        })
    }

    pub fn mask(&self) -> Tensor {
        let w = self.config.window;
        let causal = self.config.causal;
        Tensor::from_fn(&[1, w, w], |k| {
            let (i, j) = (k / w, k % w);
            if !causal || causal_allowed(i, j) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<AttentionOutput> {
        let c = &self.config;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != c.window {
            return Err(Error::shape("temporal attention input", &xs, &[0, c.window]));
        }
        let (n, w, dm, dk) = (xs[0], c.window, c.d_model, c.d_k);
        let col = tape.reshape(x, &[n * w, 1])?;
        let embed = tape.param(params, self.embed);
        let h = tape.matmul(col, embed)?;
        let h = tape.reshape(h, &[n, w * dm])?;
        let pos = tape.param(params, self.pos);
        let h = tape.add_bias(h, pos)?;
        let h = tape.reshape(h, &[n * w, dm])?;
        let scale = 1.0 / math::sqrt(dk as f64);
        let mut head_out = Vec::with_capacity(c.heads);
        let mut weights = Vec::with_capacity(c.heads);
        for head in &self.heads {
            let proj = |tape: &mut Tape, id: ParamId| -> Result<Var> {
                let wm = tape.param(params, id);
                let p = tape.matmul(h, wm)?;
                tape.reshape(p, &[n, w, dk])
            };
            let q = proj(tape, head.wq)?;
            let k = proj(tape, head.wk)?;
            let v = proj(tape, head.wv)?;
            let a = tape.attention_weights(q, k, scale, c.causal)?;
            head_out.push(tape.bmm(a, v, false)?);
            weights.push(a);
        }
        let cat = if head_out.len() == 1 { head_out[0] } else { tape.concat(&head_out, 2)? };
        let cat = tape.reshape(cat, &[n * w, c.heads * dk])?;
        let wo = tape.param(params, self.wo);
        let y = tape.matmul(cat, wo)?;
        let y = tape.reshape(y, &[n, w])?;
        let y = tape.dropout(y, c.dropout, train, rng)?;
        Ok(AttentionOutput {
            out: tape.add(x, y)?,
            weights,
        })
    }
}

#[cfg(test)]
mod tests;
