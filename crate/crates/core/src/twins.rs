//! Graph auto-encoders that impute masked waveform rows.
//!
//! Pipeline: `X` (targets zeroed) → optional causal temporal
//! self-attention → `Linear(w→z)` + ReLU → message-passing encoder →
//! `Linear(z→w)` + ReLU → `X̂`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::DrivingBehavior;
use crate::error::{Error, Result};
use crate::graphs::SimGraph;
use crate::math;
use crate::mpnn::{
    Activation, Combine, EdgeIndex, GatConfig, GatLayer, GcnLayer, Linear, SageLayer, ScoreActivation,
    SelfAttentionConfig, TemporalSelfAttention,
};
use crate::ndiff::{ParamSet, Tape, Tensor, Var};
use crate::template::TemplateKind;
use crate::EDGE_FEATURE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Gat,
    Gcn,
    Sage,
}

/// The five named model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "gatconv-ext")]
    GatconvExt,
    #[serde(rename = "gatconv-inf")]
    GatconvInf,
    #[serde(rename = "sageconv-ext")]
    SageconvExt,
    #[serde(rename = "gcnconv-ext")]
    GcnconvExt,
    #[serde(rename = "gatconv-ablated")]
    GatconvAblated,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::GatconvExt,
        Variant::GatconvInf,
        Variant::SageconvExt,
        Variant::GcnconvExt,
        Variant::GatconvAblated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GatconvExt => "gatconv-ext",
            Variant::GatconvInf => "gatconv-inf",
            Variant::SageconvExt => "sageconv-ext",
            Variant::GcnconvExt => "gcnconv-ext",
            Variant::GatconvAblated => "gatconv-ablated",
        }
    }

    pub fn kind(self) -> TemplateKind {
        match self {
            Variant::GatconvInf => TemplateKind::Inflow,
            _ => TemplateKind::Exit,
        }
    }

    /// Default configuration of this variant.
    pub fn config(self) -> TwinConfig {
        let mut c = TwinConfig::default();
        match self {
            Variant::GatconvExt => {}
            Variant::GatconvInf => {
                c.kind = TemplateKind::Inflow;
                c.layers = 2;
                c.use_self_attention = false;
            }
            Variant::SageconvExt => c.encoder = EncoderKind::Sage,
            Variant::GcnconvExt => c.encoder = EncoderKind::Gcn,
            Variant::GatconvAblated => c.use_self_attention = false,
        }
        c
    }

    /// Variant whose default structure `config` has, if any.
    pub fn of(config: &TwinConfig) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| {
            let d = v.config();
            d.kind == config.kind
                && d.encoder == config.encoder
                && d.use_self_attention == config.use_self_attention
                && d.layers == config.layers
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinConfig {
    pub kind: TemplateKind,
    pub encoder: EncoderKind,
    pub use_self_attention: bool,
    /// Hidden size `z`.
    pub hidden: usize,
    pub gat_heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub window: usize,
    pub edge_proj_dim: usize,
    pub attention_d_model: usize,
    pub attention_heads: usize,
    pub attention_d_k: usize,
    /// Slope for a LeakyReLU attention score; `None` keeps ReLU.
    pub score_leaky_slope: Option<f64>,
    /// Slope for a LeakyReLU on the decoder output; `None` keeps ReLU.
    /// A small slope lets outputs stuck below zero recover during training.
    pub output_leaky_slope: Option<f64>,
    /// Initialisation seed.
    pub seed: u64,
}

impl Default for TwinConfig {
    fn default() -> Self {
        TwinConfig {
            kind: TemplateKind::Exit,
            encoder: EncoderKind::Gat,
            use_self_attention: true,
            hidden: 32,
            gat_heads: 2,
            layers: 1,
            dropout: 0.1,
            window: crate::WINDOW,
            edge_proj_dim: 8,
            attention_d_model: 8,
            attention_heads: 2,
            attention_d_k: 4,
            score_leaky_slope: None,
            output_leaky_slope: None,
            seed: 0,
        }
    }
}

impl TwinConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 || self.window == 0 || self.gat_heads == 0 {
            return bad("hidden size, window and head count must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        match (self.kind, self.encoder, self.layers) {
            (TemplateKind::Exit, _, 1) => {}
            (TemplateKind::Exit, _, n) => return Err(Error::Config(format!("exit models use one encoder layer, got {n}"))),
            (TemplateKind::Inflow, EncoderKind::Gat, 2) => {}
            (TemplateKind::Inflow, EncoderKind::Gat, n) => {
                return Err(Error::Config(format!("inflow GAT models use two encoder layers, got {n}")))
            }
            (TemplateKind::Inflow, e, _) => {
                return Err(Error::Config(format!("inflow models support only the GAT encoder, not {e:?}")))
            }
        }
        if self.use_self_attention && (self.attention_d_model == 0 || self.attention_heads == 0 || self.attention_d_k == 0) {
            return bad("self-attention sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderLayer {
    Gat(GatLayer),
    Gcn(GcnLayer),
    Sage(SageLayer),
}

/// Structural description emitted alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub variant: Option<String>,
    pub kind: TemplateKind,
    pub encoder: EncoderKind,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub self_attention: bool,
    pub parameter_count: usize,
    pub self_attention_parameters: usize,
    pub edge_projection_parameters: usize,
    pub arrays: Vec<(String, Vec<usize>)>,
}

pub struct TwinForward {
    /// `N × w` reconstruction.
    pub pred: Var,
    /// `N × z'` encoder output.
    pub latent: Var,
    /// GAT attention per layer and head, `M` entries each.
    pub edge_attention: Vec<Vec<Var>>,
    /// Temporal attention per head, `N × w × w`.
    pub temporal_attention: Vec<Var>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinModel {
    pub config: TwinConfig,
    pub params: ParamSet,
    pub attention: Option<TemporalSelfAttention>,
    pub pre: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Linear,
}

/// Edge attributes averaged over buckets, with driving behaviour scaled
/// to `[0, 1]` by its admissible ranges. `M × 29`.
pub fn edge_inputs(graph: &SimGraph) -> Tensor {
    let mut t = graph.mean_edge_features();
    for e in 0..t.shape[0] {
        for (k, &(lo, hi)) in DrivingBehavior::RANGES.iter().enumerate() {
            let v = &mut t.data[e * EDGE_FEATURE_DIM + 12 + k];
            *v = (*v - lo) / (hi - lo);
        }
    }
    t
}

/// Build the model described by `config` (same config, same parameters).
/// Self-attention draws from its own seed stream, so toggling it leaves
/// every other initial parameter unchanged.
pub fn make_variant(config: &TwinConfig) -> Result<TwinModel> {
    TwinModel::new(config.clone())
}

impl TwinModel {
    pub fn new(config: TwinConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let attention = if config.use_self_attention {
            Some(TemporalSelfAttention::new(
                &mut params,
                "attn",
                SelfAttentionConfig {
                    window: config.window,
                    d_model: config.attention_d_model,
                    heads: config.attention_heads,
                    d_k: config.attention_d_k,
                    causal: true,
                    dropout: config.dropout,
                },
                &mut ChaCha8Rng::seed_from_u64(crate::sim::child_seed(config.seed, 0)),
            )?)
        } else {
            None
        };
        let z = config.hidden;
        let pre = Linear::new(&mut params, "pre", config.window, z, &mut rng);
        let mut encoder = Vec::with_capacity(config.layers);
        let mut in_dim = z;
        for l in 0..config.layers {
            let name = format!("enc{l}");
            let last = l + 1 == config.layers;
            let layer = match config.encoder {
                EncoderKind::Gat => {
                    let g = GatConfig {
                        in_dim,
                        out_dim: z,
                        heads: config.gat_heads,
                        edge_dim: EDGE_FEATURE_DIM,
                        edge_proj_dim: config.edge_proj_dim,
                        combine: if last { Combine::Average } else { Combine::Concat },
                        score: config.score_leaky_slope.map_or(ScoreActivation::Relu, ScoreActivation::LeakyRelu),
                        activation: Activation::Relu,
                        root_self: true,
                        strict: false,
                    };
                    in_dim = g.output_dim();
                    EncoderLayer::Gat(GatLayer::new(&mut params, &name, g, &mut rng)?)
                }
                EncoderKind::Gcn => {
                    in_dim = z;
                    EncoderLayer::Gcn(GcnLayer::new(&mut params, &name, z, z, Activation::Relu, &mut rng))
                }
                EncoderKind::Sage => {
                    in_dim = z;
                    EncoderLayer::Sage(SageLayer::new(&mut params, &name, z, z, Activation::Relu, &mut rng))
                }
            };
            encoder.push(layer);
        }
        let decoder = Linear::new(&mut params, "dec", in_dim, config.window, &mut rng);
        Ok(TwinModel {
            config,
            params,
            attention,
            pre,
            encoder,
            decoder,
        })
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::of(&self.config)
    }

    fn check_graph(&self, graph: &SimGraph) -> Result<()> {
        if graph.kind != self.config.kind {
            return Err(Error::Config(format!(
                "model expects {:?} graphs, got a {:?} graph",
                self.config.kind, graph.kind
            )));
        }
        if graph.window != self.config.window {
            return Err(Error::Config(format!(
                "model window is {}, graph window is {}",
                self.config.window, graph.window
            )));
        }
        Ok(())
    }

    /// Forward pass on `tape` using `params` (which must be laid out like
    /// `self.params`). Target rows of `graph.x` are zeroed again here, so
    /// the pass never reads ground truth.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        graph: &SimGraph,
        train: bool,
        rng: &mut R,
    ) -> Result<TwinForward> {
        self.check_graph(graph)?;
        let w = graph.window;
        let mut x = graph.x.clone();
        for (i, &t) in graph.target_mask.iter().enumerate() {
            if t {
                x.data[i * w..(i + 1) * w].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut h = tape.constant(x);
        let mut temporal_attention = Vec::new();
        if let Some(attn) = &self.attention {
            let out = attn.forward(tape, params, h, train, rng)?;
            h = out.out;
            temporal_attention = out.weights;
        }
        let h0 = self.pre.forward(tape, params, h)?;
        let mut h = tape.relu(h0);
        let edges = EdgeIndex::new(graph.num_nodes(), &graph.edges)?;
        let ef = match self.config.encoder {
            EncoderKind::Gat => Some(tape.constant(edge_inputs(graph))),
            _ => None,
        };
        let mut edge_attention = Vec::new();
        let mut warnings = Vec::new();
        for layer in &self.encoder {
            h = match layer {
                EncoderLayer::Gat(g) => {
                    let out = g.forward(tape, params, h, &edges, ef)?;
                    edge_attention.push(out.attention);
                    warnings.extend(out.warnings);
                    out.out
                }
                EncoderLayer::Gcn(g) => g.forward(tape, params, h, &edges)?,
                EncoderLayer::Sage(s) => s.forward(tape, params, h, &edges)?,
            };
        }
        let latent = h;
        let y = self.decoder.forward(tape, params, h)?;
        let pred = match self.config.output_leaky_slope {
            Some(s) => tape.leaky_relu(y, s),
            None => tape.relu(y),
        };
        Ok(TwinForward {
            pred,
            latent,
            edge_attention,
            temporal_attention,
            warnings,
        })
    }

    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, graph: &SimGraph, train: bool, rng: &mut R) -> Result<TwinForward> {
        self.forward_with(tape, &self.params, graph, train, rng)
    }

    /// Inference-mode reconstruction `X̂`.
    pub fn predict(&self, graph: &SimGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, graph, false, &mut rng)?;
        Ok(tape.value(out.pred).clone())
    }

    /// Inference-mode encoder output, `N × z'`.
    pub fn latents(&self, graph: &SimGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, graph, false, &mut rng)?;
        Ok(tape.value(out.latent).clone())
    }

    pub fn summary(&self) -> ModelSummary {
        let count = |prefix: &str| -> usize {
            self.params
                .iter()
                .filter(|p| p.name.starts_with(prefix))
                .map(|p| p.value.len())
                .sum()
        };
        let edge_projection_parameters = self
            .params
            .iter()
            .filter(|p| p.name.ends_with(".w_e"))
            .map(|p| p.value.len())
            .sum();
        ModelSummary {
            variant: self.variant().map(|v| v.name().to_string()),
            kind: self.config.kind,
            encoder: self.config.encoder,
            hidden: self.config.hidden,
            heads: self.config.gat_heads,
            layers: self.config.layers,
            self_attention: self.config.use_self_attention,
            parameter_count: self.params.count(),
            self_attention_parameters: count("attn."),
            edge_projection_parameters,
            arrays: self.params.iter().map(|p| (p.name.clone(), p.value.shape.clone())).collect(),
        }
    }
}

/// Element mask over `N × w` selecting every non-dummy row.
pub fn loss_mask(graph: &SimGraph) -> Vec<bool> {
    graph
        .dummy_mask
        .iter()
        .flat_map(|&d| core::iter::repeat_n(!d, graph.window))
        .collect()
}

/// Element mask selecting non-dummy target rows.
pub fn target_mask(graph: &SimGraph) -> Vec<bool> {
    graph
        .dummy_mask
        .iter()
        .zip(&graph.target_mask)
        .flat_map(|(&d, &t)| core::iter::repeat_n(t && !d, graph.window))
        .collect()
}

/// MSE of `pred` against the full truth over all non-dummy entries.
pub fn loss(tape: &mut Tape, pred: Var, graph: &SimGraph) -> Result<Var> {
    tape.mse(pred, &graph.target, &loss_mask(graph))
}

/// Imputed waveform for one target lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputed {
    pub node: usize,
    pub lane: Option<String>,
    pub raw: Vec<f64>,
    pub counts: Vec<u32>,
}

/// Clamp at zero and round half to even.
pub fn to_counts(raw: &[f64]) -> Vec<u32> {
    raw.iter().map(|&v| math::round_even(v.max(0.0)) as u32).collect()
}

/// Target rows of `x_hat`; dummy rows come back as zeros.
pub fn impute_rows(x_hat: &Tensor, graph: &SimGraph) -> Vec<Imputed> {
    let w = graph.window;
    (0..graph.num_nodes())
        .filter(|&i| graph.target_mask[i])
        .map(|i| {
            let raw = if graph.dummy_mask[i] { alloc::vec![0.0; w] } else { x_hat.row(i).to_vec() };
            Imputed {
                node: i,
                lane: graph.lanes[i].clone(),
                counts: to_counts(&raw),
                raw,
            }
        })
        .collect()
}

pub fn impute(model: &TwinModel, graph: &SimGraph) -> Result<Vec<Imputed>> {
    Ok(impute_rows(&model.predict(graph)?, graph))
}
