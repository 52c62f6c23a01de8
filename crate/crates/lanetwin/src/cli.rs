//! Command-line driver.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lanetwin_core::graphs::SimGraph;
use lanetwin_core::harness::{
    self, baselines, evaluate, explain_linear, export_latents, metrics_for, select, split_indices, MeanPredictor,
    TrainConfig,
};
use lanetwin_core::ndiff::Tensor;
use lanetwin_core::sim::{CorpusSpec, RegimeMix};
use lanetwin_core::template::TemplateKind;
use lanetwin_core::twins::{make_variant, TwinConfig, Variant};
use lanetwin_core::{checks, BUCKET_SECONDS};
use serde::Serialize;

use crate::checkpoint::{self, CHECKPOINT_FILE};
use crate::corpus::{self, sibling_topologies};
use crate::dataset::{GraphDataset, Shape, DATASET_FILE};
use crate::error::{Error, Result};
use crate::exec::{deterministic_from_env, Pool};
use crate::io;
use crate::manifest::RunManifest;
use crate::report::{self, MetricsFile};

#[derive(Debug, Parser)]
#[command(name = "lanetwin", version, about = "Intersection waveform simulation and graph auto-encoder twins")]
pub struct Cli {
    /// Worker threads; 0 uses every core. Deterministic mode forces 1.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a corpus of simulation records.
    Simulate(SimulateArgs),
    /// Build an exit or inflow graph dataset from records.
    Graphs(GraphsArgs),
    /// Train a twin on a graph dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Export latents and a linear-surrogate feature attribution.
    Explain(ExplainArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    Real,
    Random,
    Mixed,
}

impl From<RegimeArg> for RegimeMix {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Real => RegimeMix::Real,
            RegimeArg::Random => RegimeMix::Random,
            RegimeArg::Mixed => RegimeMix::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Exit,
    Inflow,
}

impl From<KindArg> for TemplateKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Exit => TemplateKind::Exit,
            KindArg::Inflow => TemplateKind::Inflow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictorArg {
    Model,
    Zero,
    Mean,
    /// The ground truth itself; a fixture for checking the metric plumbing.
    Truth,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Topology JSON file or `builtin:<name>`; repeat for several. Scenarios
    /// rotate through them.
    #[arg(long, default_value = "builtin:all")]
    pub topology: Vec<String>,
    #[arg(long)]
    pub scenarios: usize,
    #[arg(long, value_enum, default_value = "mixed")]
    pub regime: RegimeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Signal constraint JSON (per-phase min/max green, yellow, all-red).
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GraphsArgs {
    /// Records in JSON Lines.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Topologies the records refer to; defaults to the corpus's own
    /// topologies.json.
    #[arg(long)]
    pub topology: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Graph dataset produced by `graphs`.
    #[arg(long)]
    pub data: PathBuf,
    /// Twin configuration JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training configuration JSON; flags override its fields.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// One of gatconv-ext, gatconv-inf, sageconv-ext, gcnconv-ext, gatconv-ablated.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Seeds both initialisation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "model")]
    pub predictor: PredictorArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Also write the per-case report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Run {
    pool: Pool,
    deterministic: bool,
    started: Instant,
}

impl Run {
    fn finish(&self, dir: &Path, command: &str, config: impl Serialize, seed: u64, mut artifacts: Vec<String>) -> Result<()> {
        artifacts.push(crate::manifest::MANIFEST_FILE.into());
        RunManifest {
            command: command.into(),
            config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
            seed,
            artifacts,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            deterministic: self.deterministic,
            jobs: self.pool.jobs(),
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        }
        .write(dir)
    }
}

/// Process exit code for a command result: 0 success, 2 bad input or
/// configuration, 1 any other failure.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_config() => 2,
        Err(_) => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let deterministic = deterministic_from_env();
    let run = Run {
        pool: Pool::from_settings(cli.jobs, deterministic)?,
        deterministic,
        started: Instant::now(),
    };
    match cli.command {
        Command::Simulate(a) => simulate(&run, a),
        Command::Graphs(a) => graphs(&run, a),
        Command::Train(a) => train(&run, a),
        Command::Eval(a) => eval(&run, a),
        Command::Explain(a) => explain(&run, a),
        Command::Gradcheck(a) => gradcheck(&run, a),
    }
}

fn simulate(run: &Run, a: SimulateArgs) -> Result<()> {
    let mut topologies = Vec::new();
    for t in &a.topology {
        topologies.extend(io::resolve_topologies(t)?);
    }
    let mut spec = CorpusSpec::new(a.scenarios, topologies, a.regime.into(), a.seed);
    if let Some(path) = &a.constraints {
        spec.constraints = io::read_constraints(path)?;
    }
    spec.validate()?;
    let corpus = corpus::generate(&spec, &run.pool)?;
    let artifacts = corpus.write(&a.out)?;
    println!(
        "{} scenarios over {} topologies, {} saturation events -> {}",
        spec.n_scenarios,
        spec.topologies.len(),
        corpus.manifest.saturation_events,
        a.out.display()
    );
    #[derive(Serialize)]
    struct Snapshot<'a> {
        topologies: &'a [String],
        scenarios: usize,
        regime: RegimeMix,
        constraints: &'a lanetwin_core::signal::SignalConstraints,
        sim: &'a lanetwin_core::sim::SimConfig,
    }
    let snap = Snapshot {
        topologies: &a.topology,
        scenarios: a.scenarios,
        regime: spec.regime,
        constraints: &spec.constraints,
        sim: &spec.sim,
    };
    run.finish(&a.out, "simulate", snap, a.seed, artifacts)
}

fn graphs(run: &Run, a: GraphsArgs) -> Result<()> {
    let records = io::read_records(&a.input)?;
    if records.is_empty() {
        return Err(Error::Config(format!("{} holds no records", a.input.display())));
    }
    let topologies = if a.topology.is_empty() {
        sibling_topologies(&a.input)?
    } else {
        let mut t = Vec::new();
        for s in &a.topology {
            t.extend(io::resolve_topologies(s)?);
        }
        t
    };
    let ds = GraphDataset::build(records, topologies, a.kind.into(), &run.pool)?;
    ds.write(&a.out.join(DATASET_FILE))?;
    let Shape {
        window,
        nodes,
        edges,
        edge_dim,
        pillar_edges,
    } = ds.header.shape;
    println!(
        "{} graphs: {nodes} nodes, {edges} edges ({pillar_edges} pillar), edge features {edge_dim}, window {window}",
        ds.header.count
    );
    #[derive(Serialize)]
    struct Snapshot<'a> {
        input: &'a Path,
        kind: TemplateKind,
        shape: &'a Shape,
        count: usize,
    }
    let snap = Snapshot {
        input: &a.input,
        kind: ds.header.kind,
        shape: &ds.header.shape,
        count: ds.header.count,
    };
    run.finish(&a.out, "graphs", snap, 0, vec![DATASET_FILE.into()])
}

/// Effective twin and training configuration of a `train` invocation.
pub fn resolve_train_config(a: &TrainArgs) -> Result<(TwinConfig, TrainConfig)> {
    let mut model = match &a.config {
        Some(p) => io::read_json::<TwinConfig>(p)?,
        None => a.variant.unwrap_or(Variant::GatconvExt).config(),
    };
    if let Some(v) = a.variant {
        let s = v.config();
        model.kind = s.kind;
        model.encoder = s.encoder;
        model.use_self_attention = s.use_self_attention;
        model.layers = s.layers;
    }
    let mut tc = match &a.train_config {
        Some(p) => io::read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(h) = a.hidden {
        model.hidden = h;
    }
    if let Some(d) = a.dropout {
        model.dropout = d;
    }
    if let Some(s) = a.seed {
        model.seed = s;
        tc.seed = s;
    }
    if let Some(e) = a.epochs {
        tc.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if let Some(p) = a.patience {
        tc.patience = p;
    }
    if a.max_steps.is_some() {
        tc.max_steps = a.max_steps;
    }
    model.validate()?;
    tc.validate()?;
    Ok((model, tc))
}

struct Splits {
    train: Vec<SimGraph>,
    val: Vec<SimGraph>,
    test: Vec<SimGraph>,
}

fn split(graphs: &[SimGraph], tc: &TrainConfig) -> Splits {
    let s = split_indices(graphs.len(), tc.split, tc.seed);
    Splits {
        train: select(graphs, &s.train),
        val: select(graphs, &s.val),
        test: select(graphs, &s.test),
    }
}

fn pick(s: &Splits, all: &[SimGraph], which: SplitArg) -> Vec<SimGraph> {
    match which {
        SplitArg::Train => s.train.clone(),
        SplitArg::Val => s.val.clone(),
        SplitArg::Test => s.test.clone(),
        SplitArg::All => all.to_vec(),
    }
}

fn check_kind(ds: &GraphDataset, config: &TwinConfig, path: &Path) -> Result<()> {
    if ds.header.kind != config.kind {
        return Err(Error::Config(format!(
            "{} holds {:?} graphs but the model expects {:?}",
            path.display(),
            ds.header.kind,
            config.kind
        )));
    }
    if ds.header.shape.window != config.window {
        return Err(Error::Config(format!(
            "dataset window {} differs from model window {}",
            ds.header.shape.window, config.window
        )));
    }
    Ok(())
}

fn train(run: &Run, a: TrainArgs) -> Result<()> {
    let (config, tc) = resolve_train_config(&a)?;
    let ds = GraphDataset::read(&a.data, &run.pool)?;
    check_kind(&ds, &config, &a.data)?;
    let s = split(&ds.graphs, &tc);
    if s.train.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let model = make_variant(&config)?;
    let out = harness::train(&model, &s.train, &s.val, &tc, &run.pool)?;
    checkpoint::save(&a.out.join(CHECKPOINT_FILE), &out.model, Some(&tc), out.steps, out.best_epoch)?;
    report::write_history(&a.out.join(report::HISTORY_FILE), &out.history)?;
    write_steps(&a.out.join(STEPS_FILE), &out.step_losses)?;
    let summary = out.model.summary();
    io::write_json(&a.out.join(report::SUMMARY_FILE), &summary)?;
    println!(
        "{}: {} parameters, {} epochs, {} steps, best val loss {:.6} at epoch {}{}",
        Variant::of(&config).map_or("custom".to_string(), |v| v.to_string()),
        summary.parameter_count,
        out.history.len(),
        out.steps,
        out.best_val_loss,
        out.best_epoch,
        if out.stopped_early { " (early stop)" } else { "" }
    );
    #[derive(Serialize)]
    struct Snapshot<'a> {
        data: &'a Path,
        model: &'a TwinConfig,
        train: &'a TrainConfig,
    }
    run.finish(
        &a.out,
        "train",
        Snapshot {
            data: &a.data,
            model: &config,
            train: &tc,
        },
        tc.seed,
        vec![
            CHECKPOINT_FILE.into(),
            report::HISTORY_FILE.into(),
            STEPS_FILE.into(),
            report::SUMMARY_FILE.into(),
        ],
    )
}

pub const STEPS_FILE: &str = "steps.csv";

/// Per-step mean batch loss, `step,loss`.
pub fn write_steps(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(io::create(path)?);
    let err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["step", "loss"]).map_err(err)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn eval(run: &Run, a: EvalArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let ds = GraphDataset::read(&a.data, &run.pool)?;
    check_kind(&ds, &ck.model.config, &a.data)?;
    let tc = ck.header.train.clone().unwrap_or_default();
    let s = split(&ds.graphs, &tc);
    let graphs = pick(&s, &ds.graphs, a.split);
    if graphs.is_empty() {
        return Err(Error::Config(format!("the {:?} split is empty", a.split).to_lowercase()));
    }
    let reference = if s.train.is_empty() { &ds.graphs } else { &s.train };
    let metrics = match a.predictor {
        PredictorArg::Model => evaluate(&ck.model, &graphs, &run.pool)?,
        PredictorArg::Zero => {
            let p: Vec<Tensor> = graphs.iter().map(|g| Tensor::zeros(&g.target.shape)).collect();
            metrics_for(&p, &graphs, BUCKET_SECONDS)?
        }
        PredictorArg::Mean => {
            let m = MeanPredictor::fit(reference)?;
            let p: Vec<Tensor> = graphs.iter().map(|_| m.means.clone()).collect();
            metrics_for(&p, &graphs, BUCKET_SECONDS)?
        }
        PredictorArg::Truth => {
            let p: Vec<Tensor> = graphs.iter().map(|g| g.target.clone()).collect();
            metrics_for(&p, &graphs, BUCKET_SECONDS)?
        }
    };
    let file = MetricsFile {
        split: format!("{:?}", a.split).to_lowercase(),
        predictor: format!("{:?}", a.predictor).to_lowercase(),
        metrics,
        baselines: Some(baselines(reference, &graphs)?),
    };
    report::write_metrics(&a.out.join(report::METRICS_FILE), &file)?;
    for m in &file.metrics.aggregations {
        println!("{:>3} s  MAE {:.4}  RMSE {:.4}", m.seconds, m.mae, m.rmse);
    }
    println!("ci95 {:.4} over {} graphs, {} lanes", file.metrics.ci95, file.metrics.graphs, file.metrics.lanes);
    #[derive(Serialize)]
    struct Snapshot<'a> {
        checkpoint: &'a Path,
        data: &'a Path,
        split: &'a str,
        predictor: &'a str,
    }
    run.finish(
        &a.out,
        "eval",
        Snapshot {
            checkpoint: &a.checkpoint,
            data: &a.data,
            split: &file.split,
            predictor: &file.predictor,
        },
        tc.seed,
        vec![report::METRICS_FILE.into()],
    )
}

fn explain(run: &Run, a: ExplainArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let ds = GraphDataset::read(&a.data, &run.pool)?;
    check_kind(&ds, &ck.model.config, &a.data)?;
    let tc = ck.header.train.clone().unwrap_or_default();
    let graphs = pick(&split(&ds.graphs, &tc), &ds.graphs, a.split);
    if graphs.is_empty() {
        return Err(Error::Config("the selected split is empty".into()));
    }
    let latents = export_latents(&ck.model, &graphs, &run.pool)?;
    report::write_latents(&a.out.join(report::LATENTS_FILE), &latents)?;
    let ex = explain_linear(&ck.model, &graphs, &run.pool)?;
    let mut artifacts = vec![report::LATENTS_FILE.to_string()];
    artifacts.extend(report::write_explanation(&a.out, &ex)?);
    if ex.surrogate.ridge {
        eprintln!("warning: rank-deficient covariates, ridge fallback used");
    }
    println!(
        "{} latent rows (PC variance {:.3}, {:.3}); surrogate R² {:.4}",
        latents.rows.len(),
        latents.explained[0],
        latents.explained[1],
        ex.surrogate.r2
    );
    for (i, f) in ex.ranking.iter().take(5).enumerate() {
        println!("{:>2}. {:<20} mean |SHAP| {:.5}", i + 1, f.feature, f.mean_abs_shap);
    }
    #[derive(Serialize)]
    struct Snapshot<'a> {
        checkpoint: &'a Path,
        data: &'a Path,
        split: String,
        explained_variance: [f64; 2],
    }
    run.finish(
        &a.out,
        "explain",
        Snapshot {
            checkpoint: &a.checkpoint,
            data: &a.data,
            split: format!("{:?}", a.split).to_lowercase(),
            explained_variance: latents.explained,
        },
        tc.seed,
        artifacts,
    )
}

#[derive(Serialize)]
struct CaseRow<'a> {
    group: &'a str,
    name: &'a str,
    max_rel_error: f64,
    worst: &'a str,
    checked: usize,
    passed: bool,
}

fn gradcheck(run: &Run, a: GradcheckArgs) -> Result<()> {
    let results = checks::suite()?;
    let mut worst: f64 = 0.0;
    for c in &results {
        worst = worst.max(c.report.max_rel_error);
        println!(
            "{:<4} {:<9} {:<24} max rel err {:.3e}  ({} entries, worst in {})",
            if c.passed() { "ok" } else { "FAIL" },
            c.group,
            c.name,
            c.report.max_rel_error,
            c.report.checked,
            c.report.worst
        );
    }
    let failed = results.iter().filter(|c| !c.passed()).count();
    println!(
        "max relative error {worst:.3e} over {} cases (tolerance {:.0e}, step {:.0e})",
        results.len(),
        checks::TOLERANCE,
        checks::STEP
    );
    if let Some(dir) = &a.out {
        let rows: Vec<CaseRow> = results
            .iter()
            .map(|c| CaseRow {
                group: c.group,
                name: &c.name,
                max_rel_error: c.report.max_rel_error,
                worst: &c.report.worst,
                checked: c.report.checked,
                passed: c.passed(),
            })
            .collect();
        io::write_json(&dir.join("gradcheck.json"), &rows)?;
        #[derive(Serialize)]
        struct Snapshot {
            step: f64,
            tolerance: f64,
        }
        run.finish(
            dir,
            "gradcheck",
            Snapshot {
                step: checks::STEP,
                tolerance: checks::TOLERANCE,
            },
            0,
            vec!["gradcheck.json".into()],
        )?;
    }
    if failed > 0 {
        return Err(Error::Failed(format!("{failed} gradient check(s) above tolerance")));
    }
    Ok(())
}
