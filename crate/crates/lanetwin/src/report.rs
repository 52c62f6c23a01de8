//! History, metrics, latent and attribution artifacts.

use std::path::Path;

use lanetwin_core::harness::{Baselines, EpochRecord, Explanation, LatentTable, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const LATENTS_FILE: &str = "latents.csv";
pub const ATTRIBUTION_FILE: &str = "attribution.csv";
pub const SHAP_FILE: &str = "shap.csv";
pub const SURROGATE_FILE: &str = "surrogate.json";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn writer(path: &Path) -> Result<csv::Writer<std::io::BufWriter<std::fs::File>>> {
    Ok(csv::Writer::from_writer(io::create(path)?))
}

/// Columns `epoch,train_loss,val_loss`; floats use the shortest
/// round-tripping representation.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = writer(path)?;
    for r in history {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    csv::Reader::from_reader(io::open(path)?)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    /// Which portion of the dataset was evaluated.
    pub split: String,
    pub predictor: String,
    pub metrics: MetricsReport,
    pub baselines: Option<Baselines>,
}

pub fn write_metrics(path: &Path, m: &MetricsFile) -> Result<()> {
    io::write_json(path, m)
}

/// `graph,intersection,node,group,pc1,pc2,z0..`.
pub fn write_latents(path: &Path, table: &LatentTable) -> Result<()> {
    let mut w = writer(path)?;
    let dim = table.rows.first().map_or(0, |r| r.latent.len());
    let mut head: Vec<String> = ["graph", "intersection", "node", "group", "pc1", "pc2"].map(String::from).to_vec();
    head.extend((0..dim).map(|k| format!("z{k}")));
    w.write_record(&head).map_err(|e| csv_err(path, e))?;
    for r in &table.rows {
        let mut rec = vec![
            r.graph.to_string(),
            r.intersection.clone(),
            r.node.to_string(),
            r.group.clone(),
            r.projection[0].to_string(),
            r.projection[1].to_string(),
        ];
        rec.extend(r.latent.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct AttributionRow<'a> {
    rank: usize,
    feature: &'a str,
    coefficient: f64,
    mean_abs_shap: f64,
}

/// Ranking CSV, per-instance Shapley CSV and the surrogate fit as JSON.
pub fn write_explanation(dir: &Path, ex: &Explanation) -> Result<Vec<String>> {
    let path = dir.join(ATTRIBUTION_FILE);
    let mut w = writer(&path)?;
    for (i, a) in ex.ranking.iter().enumerate() {
        w.serialize(AttributionRow {
            rank: i + 1,
            feature: &a.feature,
            coefficient: a.coefficient,
            mean_abs_shap: a.mean_abs_shap,
        })
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(SHAP_FILE);
    let mut w = writer(&path)?;
    let mut head = vec!["graph".to_string()];
    head.extend(ex.surrogate.names.iter().cloned());
    w.write_record(&head).map_err(|e| csv_err(&path, e))?;
    for (g, row) in ex.shap.iter().enumerate() {
        let mut rec = vec![g.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    io::write_json(&dir.join(SURROGATE_FILE), &ex.surrogate)?;
    Ok(vec![ATTRIBUTION_FILE.into(), SHAP_FILE.into(), SURROGATE_FILE.into()])
}
