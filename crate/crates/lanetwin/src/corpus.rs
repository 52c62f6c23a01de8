//! Simulated corpora on disk: records, the topologies they refer to, and
//! the per-scenario parameter draws.

use std::path::Path;

use lanetwin_core::domain::{IntersectionTopology, SimulationRecord};
use lanetwin_core::harness::Executor;
use lanetwin_core::signal::SignalConstraints;
use lanetwin_core::sim::{CorpusSpec, ManifestEntry, RegimeMix, SimConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const TOPOLOGIES_FILE: &str = "topologies.json";
pub const CORPUS_FILE: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub n_scenarios: usize,
    pub regime: RegimeMix,
    pub seed: u64,
    pub topologies: Vec<String>,
    pub constraints: SignalConstraints,
    pub sim: SimConfig,
    pub saturation_events: usize,
    pub entries: Vec<ManifestEntry>,
}

pub struct Corpus {
    pub manifest: CorpusManifest,
    pub records: Vec<SimulationRecord>,
    pub topologies: Vec<IntersectionTopology>,
}

/// Run every scenario of `spec`; output order is scenario order.
pub fn generate<E: Executor>(spec: &CorpusSpec, exec: &E) -> Result<Corpus> {
    spec.validate()?;
    let runs = exec.map(spec.n_scenarios, |i| spec.run(i));
    let mut entries = Vec::with_capacity(runs.len());
    let mut records = Vec::with_capacity(runs.len());
    let mut saturation_events = 0;
    for run in runs {
        let (entry, outcome) = run?;
        saturation_events += outcome.saturation_events;
        entries.push(entry);
        records.push(outcome.record);
    }
    Ok(Corpus {
        manifest: CorpusManifest {
            n_scenarios: spec.n_scenarios,
            regime: spec.regime,
            seed: spec.seed,
            topologies: spec.topologies.iter().map(|t| t.id.clone()).collect(),
            constraints: spec.constraints.clone(),
            sim: spec.sim.clone(),
            saturation_events,
            entries,
        },
        records,
        topologies: spec.topologies.clone(),
    })
}

impl Corpus {
    /// Returns the written file names.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        io::write_records(&dir.join(RECORDS_FILE), &self.records)?;
        io::write_json(&dir.join(TOPOLOGIES_FILE), &self.topologies)?;
        io::write_json(&dir.join(CORPUS_FILE), &self.manifest)?;
        Ok(vec![RECORDS_FILE.into(), TOPOLOGIES_FILE.into(), CORPUS_FILE.into()])
    }
}

/// Topologies stored next to a records file.
pub fn sibling_topologies(records: &Path) -> Result<Vec<IntersectionTopology>> {
    let path = records.parent().unwrap_or(Path::new(".")).join(TOPOLOGIES_FILE);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no topology given and {} does not exist",
            path.display()
        )));
    }
    io::read_json(&path)
}
