//! Graph dataset container.
//!
//! JSON Lines: the first line is a [`DatasetHeader`] with the shared shapes
//! and the topologies; every following line is a [`GraphEntry`] aligned with
//! one simulation record. Tensors are rebuilt on load and checked against
//! the header, which keeps files at record size instead of storing the
//! `M × 29 × w` edge tensor per graph.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use lanetwin_core::domain::{IntersectionTopology, SimulationRecord};
use lanetwin_core::graphs::{build_graph, SimGraph};
use lanetwin_core::harness::Executor;
use lanetwin_core::template::TemplateKind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const FORMAT: &str = "lanetwin-graphs/1";
pub const DATASET_FILE: &str = "graphs.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub window: usize,
    pub nodes: usize,
    pub edges: usize,
    pub edge_dim: usize,
    pub pillar_edges: usize,
}

impl Shape {
    pub fn of(g: &SimGraph) -> Self {
        Shape {
            window: g.window,
            nodes: g.num_nodes(),
            edges: g.num_edges(),
            edge_dim: g.edge_dim(),
            pillar_edges: g.num_pillar(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub kind: TemplateKind,
    #[serde(flatten)]
    pub shape: Shape,
    pub count: usize,
    pub topologies: Vec<IntersectionTopology>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEntry {
    pub index: usize,
    pub topology: String,
    pub dummy_slots: usize,
    pub record: SimulationRecord,
}

pub struct GraphDataset {
    pub header: DatasetHeader,
    pub entries: Vec<GraphEntry>,
    pub graphs: Vec<SimGraph>,
}

fn topology_of<'a>(topos: &'a [IntersectionTopology], id: &str) -> Result<&'a IntersectionTopology> {
    topos
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::Config(format!("record for intersection `{id}` has no matching topology")))
}

fn build_all<E: Executor>(
    records: &[SimulationRecord],
    topos: &[IntersectionTopology],
    kind: TemplateKind,
    exec: &E,
) -> Result<Vec<SimGraph>> {
    let by_id: BTreeMap<&str, &IntersectionTopology> = topos.iter().map(|t| (t.id.as_str(), t)).collect();
    for r in records {
        if !by_id.contains_key(r.j.as_str()) {
            topology_of(topos, &r.j)?;
        }
    }
    exec.map(records.len(), |i| build_graph(&records[i], by_id[records[i].j.as_str()], kind))
        .into_iter()
        .enumerate()
        .map(|(i, g)| g.map_err(|e| Error::Config(format!("record {i}: {e}"))))
        .collect()
}

impl GraphDataset {
    pub fn build<E: Executor>(
        records: Vec<SimulationRecord>,
        topologies: Vec<IntersectionTopology>,
        kind: TemplateKind,
        exec: &E,
    ) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::Config("no records to build graphs from".into()));
        };
        let window = first.window();
        let graphs = build_all(&records, &topologies, kind, exec)?;
        let shape = Shape::of(&graphs[0]);
        if let Some(i) = graphs.iter().position(|g| Shape::of(g) != shape || g.window != window) {
            return Err(Error::Config(format!("graph {i} does not share the dataset shape")));
        }
        let entries = records
            .into_iter()
            .zip(&graphs)
            .enumerate()
            .map(|(index, (record, g))| GraphEntry {
                index,
                topology: record.j.clone(),
                dummy_slots: g.dummy_mask.iter().filter(|&&d| d).count(),
                record,
            })
            .collect::<Vec<_>>();
        Ok(GraphDataset {
            header: DatasetHeader {
                format: FORMAT.into(),
                kind,
                shape,
                count: entries.len(),
                topologies,
            },
            entries,
            graphs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = io::create(path)?;
        serde_json::to_writer(&mut w, &self.header).map_err(|e| Error::json(path, None, e))?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e).map_err(|e| Error::json(path, None, e))?;
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read<E: Executor>(path: &Path, exec: &E) -> Result<Self> {
        let lines = io::jsonl_lines(path)?;
        let Some(((n, head), rest)) = lines.split_first() else {
            return Err(Error::format(path, "empty graph dataset"));
        };
        let header: DatasetHeader = io::parse_line(path, *n, head)?;
        if header.format != FORMAT {
            return Err(Error::format(path, format!("unsupported format `{}`", header.format)));
        }
        if header.count != rest.len() {
            return Err(Error::format(
                path,
                format!("header declares {} graphs, file holds {}", header.count, rest.len()),
            ));
        }
        let entries: Vec<GraphEntry> = rest.iter().map(|(n, l)| io::parse_line(path, *n, l)).collect::<Result<_>>()?;
        let records: Vec<SimulationRecord> = entries.iter().map(|e| e.record.clone()).collect();
        let graphs = build_all(&records, &header.topologies, header.kind, exec)?;
        for (e, g) in entries.iter().zip(&graphs) {
            if Shape::of(g) != header.shape {
                return Err(Error::format(
                    path,
                    format!("graph {} has shape {:?}, header says {:?}", e.index, Shape::of(g), header.shape),
                ));
            }
        }
        Ok(GraphDataset { header, entries, graphs })
    }
}
