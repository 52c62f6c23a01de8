//! Exit and Inflow simulation graphs built from records.
//!
//! Every graph of a kind shares one node set, one edge list, and one
//! feature width; a topology only decides which slots are dummies.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{Approach, IntersectionTopology, SimulationRecord, Waveform};
use crate::error::{Error, Result};
use crate::ndiff::Tensor;
use crate::signal::NUM_PHASES;
use crate::template::{
    inflow_edges, inflow_node, inflow_node_groups, place_exit, place_inflow, ExitTemplate, TemplateKind,
    INFLOW_LAYERS, INFLOW_LAYER_SIZE, INFLOW_STOPBAR_SLOTS,
};
use crate::EDGE_FEATURE_DIM;

/// Scenario covariates used by the linear explainer, in [`covariate_names`] order.
pub const NUM_COVARIATES: usize = 9 + 12 + 10;

pub fn covariate_names() -> Vec<String> {
    let mut names: Vec<String> = crate::domain::DrivingBehavior::FIELDS.iter().map(|s| format!("drv.{s}")).collect();
    for a in Approach::ALL {
        for m in ["left", "through", "right"] {
            names.push(format!("tmc.{a}.{m}"));
        }
    }
    names.push("sig.cycle_s".into());
    names.push("sig.barrier_s".into());
    for p in 1..=NUM_PHASES {
        names.push(format!("sig.green_frac.{p}"));
    }
    names
}

/// One template-conformant graph sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGraph {
    pub kind: TemplateKind,
    pub intersection: String,
    pub window: usize,
    pub edges: Vec<(usize, usize)>,
    /// Inter-layer flags (all false for Exit graphs).
    pub pillar: Vec<bool>,
    /// `N × w` input; target rows zeroed.
    pub x: Tensor,
    /// `N × w` ground truth for every row.
    pub target: Tensor,
    /// `M × 29 × w`.
    pub edge_features: Tensor,
    pub target_mask: Vec<bool>,
    pub dummy_mask: Vec<bool>,
    /// Physical lane id per node, `None` for dummies.
    pub lanes: Vec<Option<String>>,
    pub covariates: Vec<f64>,
}

impl SimGraph {
    pub fn num_nodes(&self) -> usize {
        self.x.shape[0]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_features.shape[1]
    }

    pub fn num_pillar(&self) -> usize {
        self.pillar.iter().filter(|&&p| p).count()
    }

    /// Per-edge features averaged over buckets, `M × 29`.
    pub fn mean_edge_features(&self) -> Tensor {
        let (m, e, w) = (self.edge_features.shape[0], self.edge_features.shape[1], self.edge_features.shape[2]);
        Tensor::from_fn(&[m, e], |k| {
            let base = k * w;
            self.edge_features.data[base..base + w].iter().sum::<f64>() / w as f64
        })
    }

    /// Node groups for latent export (`"EB-left-in"`, `"NB-inflow"`, ...).
    pub fn node_groups(&self) -> Vec<String> {
        match self.kind {
            TemplateKind::Exit => ExitTemplate::standard().node_groups(),
            TemplateKind::Inflow => inflow_node_groups(),
        }
    }

    /// Keep only the first `w` buckets.
    pub fn truncated(&self, w: usize) -> Result<SimGraph> {
        if w == 0 || w > self.window {
            return Err(Error::invalid(format!("cannot truncate a {}-bucket graph to {w}", self.window)));
        }
        let old = self.window;
        let cut = |t: &Tensor| {
            let rows = t.len() / old;
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&t.data[r * old..r * old + w]);
            }
            let mut shape = t.shape.clone();
            *shape.last_mut().expect("non-scalar") = w;
            Tensor::new(&shape, data)
        };
        let mut s = self.clone();
        s.window = w;
        s.x = cut(&self.x)?;
        s.target = cut(&self.target)?;
        s.edge_features = cut(&self.edge_features)?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lanes.len();
        let w = self.window;
        if self.x.shape != [n, w] || self.target.shape != [n, w] {
            return Err(Error::shape("graph features", &self.x.shape, &[n, w]));
        }
        let m = self.edges.len();
        if self.edge_features.shape != [m, EDGE_FEATURE_DIM, w] {
            return Err(Error::shape("edge features", &self.edge_features.shape, &[m, EDGE_FEATURE_DIM, w]));
        }
        if self.pillar.len() != m || self.target_mask.len() != n || self.dummy_mask.len() != n {
            return Err(Error::invalid("mask lengths disagree with the graph"));
        }
        if self.edges.iter().any(|&(s, d)| s >= n || d >= n) {
            return Err(Error::invalid("edge endpoint outside node range"));
        }
        Ok(())
    }
}

fn waveform_row(wf: &Waveform, w: usize) -> Result<Vec<f64>> {
    if wf.buckets.len() != w {
        return Err(Error::shape("waveform", &[wf.buckets.len()], &[w]));
    }
    Ok(wf.buckets.iter().map(|&c| f64::from(c)).collect())
}

fn lookup<'a>(map: &'a BTreeMap<String, Waveform>, lane: &str, what: &str) -> Result<&'a Waveform> {
    map.get(lane)
        .ok_or_else(|| Error::Mapping(format!("record has no {what} waveform for lane `{lane}`")))
}

fn reject_unmapped(map: &BTreeMap<String, Waveform>, placed: &[Option<String>], what: &str) -> Result<()> {
    for lane in map.keys() {
        if !placed.iter().any(|p| p.as_deref() == Some(lane.as_str())) {
            return Err(Error::Mapping(format!("{what} lane `{lane}` is not mapped by the topology")));
        }
    }
    Ok(())
}

fn covariates(record: &SimulationRecord) -> Vec<f64> {
    let mut out = Vec::with_capacity(NUM_COVARIATES);
    out.extend(record.drv.to_array());
    out.extend(record.tmc.flattened());
    out.extend(record.sig.plan.summary());
    out
}

/// `M × 29 × w` features; `tmc_for_edge` supplies the 12 tmc values of each edge.
fn edge_tensor(record: &SimulationRecord, w: usize, tmc_for_edge: &[[f64; 12]]) -> Result<Tensor> {
    if record.sig.window() != w || record.sig.green.len() != NUM_PHASES {
        return Err(Error::shape("signal series", &[record.sig.green.len(), record.sig.window()], &[NUM_PHASES, w]));
    }
    let drv = record.drv.to_array();
    let m = tmc_for_edge.len();
    let mut data = vec![0.0; m * EDGE_FEATURE_DIM * w];
    for (e, tmc) in tmc_for_edge.iter().enumerate() {
        let base = e * EDGE_FEATURE_DIM * w;
        for (f, &v) in tmc.iter().chain(drv.iter()).enumerate() {
            data[base + f * w..base + (f + 1) * w].iter_mut().for_each(|x| *x = v);
        }
        for p in 0..NUM_PHASES {
            let f = 21 + p;
            for b in 0..w {
                data[base + f * w + b] = f64::from(record.sig.green[p][b]);
            }
        }
    }
    Tensor::new(&[m, EDGE_FEATURE_DIM, w], data)
}

/// Exit graph: stop-bar rows observed, exit rows masked.
pub fn build_exit_graph(record: &SimulationRecord, topology: &IntersectionTopology) -> Result<SimGraph> {
    let template = ExitTemplate::standard();
    let placement = place_exit(&template, topology)?;
    let w = record.window();
    reject_unmapped(&record.stp, &placement.incoming, "stop-bar")?;
    reject_unmapped(&record.ext, &placement.outgoing, "exit")?;

    let n_in = template.incoming.len();
    let n = template.num_nodes();
    let mut x = Tensor::zeros(&[n, w]);
    let mut target = Tensor::zeros(&[n, w]);
    let mut lanes = Vec::with_capacity(n);
    for (i, lane) in placement.incoming.iter().chain(placement.outgoing.iter()).enumerate() {
        if let Some(id) = lane {
            let row = if i < n_in {
                waveform_row(lookup(&record.stp, id, "stop-bar")?, w)?
            } else {
                waveform_row(lookup(&record.ext, id, "exit")?, w)?
            };
            target.data[i * w..(i + 1) * w].copy_from_slice(&row);
            if i < n_in {
                x.data[i * w..(i + 1) * w].copy_from_slice(&row);
            }
        }
        lanes.push(lane.clone());
    }
    let edges = template.edges();
    let tmc = record.tmc.flattened();
    let edge_features = edge_tensor(record, w, &vec![tmc; edges.len()])?;
    let graph = SimGraph {
        kind: TemplateKind::Exit,
        intersection: record.j.clone(),
        window: w,
        pillar: vec![false; edges.len()],
        edges,
        x,
        target,
        edge_features,
        target_mask: (0..n).map(|i| i >= n_in).collect(),
        dummy_mask: placement.dummy_mask(),
        lanes,
        covariates: covariates(record),
    };
    graph.validate()?;
    Ok(graph)
}

/// Inflow graph: stop-bar rows observed, feeding-lane rows masked.
///
/// Intra-layer edges carry the tmc matrix rotated so the layer's approach
/// comes first; pillar edges use their source layer's rotation.
pub fn build_inflow_graph(record: &SimulationRecord, topology: &IntersectionTopology) -> Result<SimGraph> {
    let template = ExitTemplate::standard();
    let placement = place_inflow(&template, topology)?;
    let w = record.window();
    let placed_stop: Vec<Option<String>> = placement.stopbar.iter().flatten().cloned().collect();
    let placed_feed: Vec<Option<String>> = placement.feeding.iter().flatten().cloned().collect();
    reject_unmapped(&record.stp, &placed_stop, "stop-bar")?;
    reject_unmapped(&record.inf, &placed_feed, "inflow")?;

    let n = INFLOW_LAYERS * INFLOW_LAYER_SIZE;
    let mut x = Tensor::zeros(&[n, w]);
    let mut target = Tensor::zeros(&[n, w]);
    let mut lanes = vec![None; n];
    let mut target_mask = vec![false; n];
    for layer in 0..INFLOW_LAYERS {
        for slot in 0..INFLOW_LAYER_SIZE {
            let node = inflow_node(layer, slot);
            let stop = slot < INFLOW_STOPBAR_SLOTS;
            target_mask[node] = !stop;
            let lane = if stop {
                &placement.stopbar[layer][slot]
            } else {
                &placement.feeding[layer][slot - INFLOW_STOPBAR_SLOTS]
            };
            if let Some(id) = lane {
                let row = if stop {
                    waveform_row(lookup(&record.stp, id, "stop-bar")?, w)?
                } else {
                    waveform_row(lookup(&record.inf, id, "inflow")?, w)?
                };
                target.data[node * w..(node + 1) * w].copy_from_slice(&row);
                if stop {
                    x.data[node * w..(node + 1) * w].copy_from_slice(&row);
                }
            }
            lanes[node].clone_from(lane);
        }
    }
    let raw = inflow_edges();
    let rotations: Vec<[f64; 12]> = (0..INFLOW_LAYERS)
        .map(|l| record.tmc.rotated(Approach::from_index(l)))
        .collect();
    let per_edge: Vec<[f64; 12]> = raw.iter().map(|&(s, _, _)| rotations[s / INFLOW_LAYER_SIZE]).collect();
    let edge_features = edge_tensor(record, w, &per_edge)?;
    let dummy_mask = placement.dummy_mask();
    let graph = SimGraph {
        kind: TemplateKind::Inflow,
        intersection: record.j.clone(),
        window: w,
        edges: raw.iter().map(|&(s, d, _)| (s, d)).collect(),
        pillar: raw.iter().map(|e| e.2).collect(),
        x,
        target,
        edge_features,
        target_mask,
        dummy_mask,
        lanes,
        covariates: covariates(record),
    };
    graph.validate()?;
    Ok(graph)
}

pub fn build_graph(record: &SimulationRecord, topology: &IntersectionTopology, kind: TemplateKind) -> Result<SimGraph> {
    match kind {
        TemplateKind::Exit => build_exit_graph(record, topology),
        TemplateKind::Inflow => build_inflow_graph(record, topology),
    }
}

/// Order-independent fingerprint: sorted node rows and sorted edge
/// descriptors (endpoint rows, pillar flag, edge features).
pub fn canonical_form(g: &SimGraph) -> Vec<Vec<u64>> {
    let w = g.window;
    let node_key = |i: usize| -> Vec<u64> {
        let mut k: Vec<u64> = g.x.row(i).iter().chain(g.target.row(i)).map(|v| v.to_bits()).collect();
        k.push(u64::from(g.dummy_mask[i]));
        k.push(u64::from(g.target_mask[i]));
        k
    };
    let mut out: Vec<Vec<u64>> = (0..g.num_nodes()).map(node_key).collect();
    let stride = g.edge_dim() * w;
    for (e, &(s, d)) in g.edges.iter().enumerate() {
        let mut k = node_key(s);
        k.extend(node_key(d));
        k.push(u64::from(g.pillar[e]));
        k.extend(g.edge_features.data[e * stride..(e + 1) * stride].iter().map(|v| v.to_bits()));
        out.push(k);
    }
    out.sort();
    out
}
