//! Training, evaluation, baselines, latent export and the linear
//! surrogate explainer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::rebucket_values;
use crate::error::{Error, Result};
use crate::graphs::SimGraph;
use crate::math;
use crate::ndiff::{Adam, ParamSet, Tape, Tensor};
use crate::twins::{loss, TwinModel};

/// Aggregation levels reported by [`evaluate`], in seconds.
pub const AGGREGATIONS_S: [u32; 4] = [5, 10, 15, 20];

/// Order-preserving parallel map. Implementations must return results in
/// index order so reductions stay deterministic.
pub trait Executor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs everything on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            max_epochs: 30,
            batch_size: 8,
            patience: 5,
            min_delta: 1e-5,
            split: [0.8, 0.1, 0.1],
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split.iter().any(|&f| !(0.0..=1.0).contains(&f)) || math::abs(self.split.iter().sum::<f64>() - 1.0) > 1e-9
        {
            return Err(Error::Config(format!("split fractions {:?} must be in [0, 1] and sum to 1", self.split)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }
}

/// Index sets of a deterministic split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle `0..n` with `seed` and cut it by `fractions`.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = math::round_even(fractions[0] * n as f64) as usize;
    let n_val = (math::round_even(fractions[1] * n as f64) as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split { train: idx, val, test }
}

pub fn select(graphs: &[SimGraph], idx: &[usize]) -> Vec<SimGraph> {
    idx.iter().map(|&i| graphs[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model carrying the best-validation parameters.
    pub model: TwinModel,
    pub history: Vec<EpochRecord>,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

fn dropout_seed(seed: u64, step: usize, item: usize) -> u64 {
    crate::sim::child_seed(crate::sim::child_seed(seed, step), item)
}

/// Loss and parameter gradients of one graph.
fn graph_gradient(model: &TwinModel, params: &ParamSet, graph: &SimGraph, seed: u64) -> Result<(f64, ParamSet)> {
    let mut local = params.clone();
    local.zero_grad();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = model.forward_with(&mut tape, params, graph, true, &mut rng)?;
    let l = loss(&mut tape, out.pred, graph)?;
    tape.backward(l, &mut local)?;
    Ok((tape.value(l).data[0], local))
}

/// Mean eval-mode loss over `graphs`.
pub fn mean_loss<E: Executor>(model: &TwinModel, graphs: &[SimGraph], exec: &E) -> Result<f64> {
    if graphs.is_empty() {
        return Err(Error::invalid("cannot average the loss of an empty split"));
    }
    let losses = exec.map(graphs.len(), |i| -> Result<f64> {
        let g = &graphs[i];
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&mut tape, g, false, &mut rng)?;
        let l = loss(&mut tape, out.pred, g)?;
        Ok(tape.value(l).data[0])
    });
    let mut acc = 0.0;
    for l in losses {
        acc += l?;
    }
    Ok(acc / graphs.len() as f64)
}

/// Adam over mini-batches with early stopping on validation loss.
///
/// An empty `val` falls back to monitoring the epoch's mean training
/// loss.
pub fn train<E: Executor>(
    model: &TwinModel,
    train_set: &[SimGraph],
    val: &[SimGraph],
    config: &TrainConfig,
    exec: &E,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut current = model.clone();
    let mut best = model.clone();
    let mut adam = Adam::new(config.lr);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut step = 0usize;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(crate::sim::child_seed(config.seed, epoch)));
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let params = &current.params;
            let m = &current;
            let results = exec.map(batch.len(), |k| {
                graph_gradient(m, params, &train_set[batch[k]], dropout_seed(config.seed, step, k))
            });
            let mut acc = current.params.clone();
            acc.zero_grad();
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                acc.accumulate_grads(&g)?;
            }
            let b = batch.len() as f64;
            batch_loss /= b;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            acc.scale_grads(1.0 / b);
            adam.step(&mut acc)?;
            current.params = acc;
            step += 1;
            step_losses.push(batch_loss);
            epoch_loss += batch_loss * b;
            seen += batch.len();
        }
        if seen == 0 {
            break 'epochs;
        }
        let train_loss = epoch_loss / seen as f64;
        let val_loss = if val.is_empty() { train_loss } else { mean_loss(&current, val, exec)? };
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, step });
        }
        history.push(EpochRecord { epoch, train_loss, val_loss });
        if val_loss < best_val - config.min_delta {
            since_best = 0;
        } else {
            since_best += 1;
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best.params = current.params.clone();
        }
        if since_best >= config.patience {
            stopped_early = true;
            break;
        }
        if config.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    best.params.zero_grad();
    Ok(TrainOutcome {
        model: best,
        history,
        step_losses,
        best_epoch,
        best_val_loss: best_val,
        steps: step,
        stopped_early,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub seconds: u32,
    pub mae: f64,
    pub rmse: f64,
}

/// Errors over non-dummy target lanes, in vehicles per bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregations: Vec<AggregateMetrics>,
    /// Mean squared error at 5 s.
    pub mse: f64,
    /// `1.96 ×` RMSE at 5 s.
    pub ci95: f64,
    pub graphs: usize,
    pub lanes: usize,
}

impl MetricsReport {
    pub fn at(&self, seconds: u32) -> Option<&AggregateMetrics> {
        self.aggregations.iter().find(|a| a.seconds == seconds)
    }

    pub fn mae5(&self) -> f64 {
        self.aggregations[0].mae
    }
}

pub fn ci95(rmse: f64) -> f64 {
    1.96 * rmse
}

/// Metrics of raw predictions against graph targets. Coarser levels sum
/// consecutive 5 s buckets of both series, dropping a trailing partial
/// group.
pub fn metrics_for(preds: &[Tensor], graphs: &[SimGraph], bucket_seconds: u32) -> Result<MetricsReport> {
    if graphs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    if preds.len() != graphs.len() {
        return Err(Error::shape("predictions", &[preds.len()], &[graphs.len()]));
    }
    let mut abs = [0.0; 4];
    let mut sq = [0.0; 4];
    let mut count = [0usize; 4];
    let mut lanes = 0;
    for (p, g) in preds.iter().zip(graphs) {
        if p.shape != g.target.shape {
            return Err(Error::shape("prediction", &p.shape, &g.target.shape));
        }
        for i in (0..g.num_nodes()).filter(|&i| g.target_mask[i] && !g.dummy_mask[i]) {
            lanes += 1;
            for (a, &secs) in AGGREGATIONS_S.iter().enumerate() {
                let factor = (secs / bucket_seconds) as usize;
                let used = g.window - g.window % factor;
                let pr = rebucket_values(&p.row(i)[..used], factor)?;
                let tr = rebucket_values(&g.target.row(i)[..used], factor)?;
                for (x, y) in pr.iter().zip(&tr) {
                    let d = x - y;
                    abs[a] += math::abs(d);
                    sq[a] += d * d;
                    count[a] += 1;
                }
            }
        }
    }
    if lanes == 0 {
        return Err(Error::invalid("split has no non-dummy target lanes"));
    }
    let aggregations: Vec<AggregateMetrics> = AGGREGATIONS_S
        .iter()
        .enumerate()
        .map(|(a, &seconds)| AggregateMetrics {
            seconds,
            mae: abs[a] / count[a] as f64,
            rmse: math::sqrt(sq[a] / count[a] as f64),
        })
        .collect();
    let mse = sq[0] / count[0] as f64;
    Ok(MetricsReport {
        ci95: ci95(aggregations[0].rmse),
        aggregations,
        mse,
        graphs: graphs.len(),
        lanes,
    })
}

pub fn predict_all<E: Executor>(model: &TwinModel, graphs: &[SimGraph], exec: &E) -> Result<Vec<Tensor>> {
    exec.map(graphs.len(), |i| model.predict(&graphs[i])).into_iter().collect()
}

/// Model metrics on a split; `ci95` uses this split's 5 s RMSE, so pass
/// the validation split to obtain the reported interval.
pub fn evaluate<E: Executor>(model: &TwinModel, graphs: &[SimGraph], exec: &E) -> Result<MetricsReport> {
    let preds = predict_all(model, graphs, exec)?;
    metrics_for(&preds, graphs, crate::BUCKET_SECONDS)
}

/// Per-node, per-bucket mean of the training targets over graphs where
/// the node is real.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanPredictor {
    pub means: Tensor,
}

impl MeanPredictor {
    pub fn fit(train: &[SimGraph]) -> Result<Self> {
        let first = train.first().ok_or_else(|| Error::invalid("mean predictor needs training graphs"))?;
        let (n, w) = (first.num_nodes(), first.window);
        let mut sum = Tensor::zeros(&[n, w]);
        let mut seen = vec![0usize; n];
        for g in train {
            if g.target.shape != sum.shape {
                return Err(Error::shape("mean predictor", &g.target.shape, &sum.shape));
            }
            for i in (0..n).filter(|&i| !g.dummy_mask[i]) {
                seen[i] += 1;
                for b in 0..w {
                    sum.data[i * w + b] += g.target.data[i * w + b];
                }
            }
        }
        for i in 0..n {
            if seen[i] > 0 {
                sum.data[i * w..(i + 1) * w].iter_mut().for_each(|v| *v /= seen[i] as f64);
            }
        }
        Ok(MeanPredictor { means: sum })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub zero: MetricsReport,
    pub mean: MetricsReport,
}

/// Zero and training-mean predictors evaluated like a model.
pub fn baselines(train: &[SimGraph], split: &[SimGraph]) -> Result<Baselines> {
    let zeros: Vec<Tensor> = split.iter().map(|g| Tensor::zeros(&g.target.shape)).collect();
    let mean = MeanPredictor::fit(train)?;
    let means: Vec<Tensor> = split.iter().map(|_| mean.means.clone()).collect();
    Ok(Baselines {
        zero: metrics_for(&zeros, split, crate::BUCKET_SECONDS)?,
        mean: metrics_for(&means, split, crate::BUCKET_SECONDS)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub graph: usize,
    pub intersection: String,
    pub node: usize,
    pub group: String,
    pub latent: Vec<f64>,
    /// First two principal-component coordinates.
    pub projection: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    pub rows: Vec<LatentRow>,
    /// Fraction of variance captured by each of the two components.
    pub explained: [f64; 2],
}

/// Principal axes of `rows` (centered), returned with the column means
/// and per-axis explained variance.
pub fn pca2(rows: &[Vec<f64>]) -> Result<(Vec<f64>, [Vec<f64>; 2], [f64; 2])> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || d == 0 {
        return Err(Error::invalid("PCA needs at least one non-empty row"));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        let c = DVector::from_iterator(d, r.iter().zip(&mean).map(|(v, m)| v - m));
        cov += &c * c.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let axis = |k: usize| -> Vec<f64> {
        match order.get(k) {
            Some(&c) => eig.eigenvectors.column(c).iter().copied().collect(),
            None => vec![0.0; d],
        }
    };
    let var = |k: usize| -> f64 {
        match order.get(k) {
            Some(&c) if total > 0.0 => eig.eigenvalues[c].max(0.0) / total,
            _ => 0.0,
        }
    };
    Ok((mean, [axis(0), axis(1)], [var(0), var(1)]))
}

/// Encoder outputs of every non-dummy node, grouped by lane group, with a
/// two-component principal projection.
pub fn export_latents<E: Executor>(model: &TwinModel, graphs: &[SimGraph], exec: &E) -> Result<LatentTable> {
    let latents: Vec<Tensor> = exec.map(graphs.len(), |i| model.latents(&graphs[i])).into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (gi, (g, z)) in graphs.iter().zip(&latents).enumerate() {
        let groups = g.node_groups();
        for i in (0..g.num_nodes()).filter(|&i| !g.dummy_mask[i]) {
            rows.push(LatentRow {
                graph: gi,
                intersection: g.intersection.clone(),
                node: i,
                group: groups[i].clone(),
                latent: z.row(i).to_vec(),
                projection: [0.0; 2],
            });
        }
    }
    if rows.is_empty() {
        return Ok(LatentTable { rows, explained: [0.0; 2] });
    }
    let data: Vec<Vec<f64>> = rows.iter().map(|r| r.latent.clone()).collect();
    let (mean, axes, explained) = pca2(&data)?;
    for r in &mut rows {
        for (k, axis) in axes.iter().enumerate() {
            r.projection[k] = r.latent.iter().zip(&mean).zip(axis).map(|((v, m), a)| (v - m) * a).sum();
        }
    }
    Ok(LatentTable { rows, explained })
}

/// Ordinary least squares fit `y ≈ intercept + Σ coef·x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSurrogate {
    pub names: Vec<String>,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub means: Vec<f64>,
    pub r2: f64,
    /// True when the design was rank deficient and ridge was used.
    pub ridge: bool,
    pub warnings: Vec<String>,
}

pub const RIDGE_LAMBDA: f64 = 1e-6;

impl LinearSurrogate {
    pub fn fit(names: Vec<String>, features: &[Vec<f64>], response: &[f64]) -> Result<Self> {
        let n = features.len();
        let d = names.len();
        if n == 0 || response.len() != n {
            return Err(Error::invalid(format!("{n} feature rows for {} responses", response.len())));
        }
        if features.iter().any(|r| r.len() != d) {
            return Err(Error::invalid(format!("every feature row must have {d} entries")));
        }
        let means: Vec<f64> = (0..d)
            .map(|j| {
                let first = features[0][j];
                if features.iter().all(|r| r[j] == first) {
                    first
                } else {
                    features.iter().map(|r| r[j]).sum::<f64>() / n as f64
                }
            })
            .collect();
        let y_mean = response.iter().sum::<f64>() / n as f64;
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j] - means[j]);
        let y = DVector::from_iterator(n, response.iter().map(|v| v - y_mean));
        let svd = x.clone().svd(true, true);
        let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let rank = svd.singular_values.iter().filter(|&&s| s > smax * 1e-10 && s > 0.0).count();
        let mut warnings = Vec::new();
        let (coef, ridge) = if rank == d && n > d {
            let c = svd.solve(&y, 0.0).map_err(Error::invalid)?;
            (c, false)
        } else {
            warnings.push(format!(
                "design matrix has rank {rank} < {d} features; using ridge with lambda {RIDGE_LAMBDA}"
            ));
            let xt = x.transpose();
            let mut a = &xt * &x;
            for k in 0..d {
                a[(k, k)] += RIDGE_LAMBDA;
            }
            let b = &xt * &y;
            let c = a
                .cholesky()
                .ok_or_else(|| Error::invalid("ridge system is not positive definite"))?
                .solve(&b);
            (c, true)
        };
        let fitted = &x * &coef;
        let ss_res: f64 = fitted.iter().zip(y.iter()).map(|(f, t)| (t - f) * (t - f)).sum();
        let ss_tot: f64 = y.iter().map(|t| t * t).sum();
        let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
        let coefficients: Vec<f64> = coef.iter().copied().collect();
        let intercept = y_mean - coefficients.iter().zip(&means).map(|(c, m)| c * m).sum::<f64>();
        Ok(LinearSurrogate {
            names,
            intercept,
            coefficients,
            means,
            r2,
            ridge,
            warnings,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Exact Shapley values of a linear model: `coef × (x − mean)`.
    pub fn shapley(&self, x: &[f64]) -> Vec<f64> {
        self.coefficients.iter().zip(x).zip(&self.means).map(|((c, v), m)| c * (v - m)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttribution {
    pub feature: String,
    pub coefficient: f64,
    pub mean_abs_shap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub surrogate: LinearSurrogate,
    /// Per-instance Shapley values, one row per graph.
    pub shap: Vec<Vec<f64>>,
    /// Features ordered by mean |Shapley value|, largest first.
    pub ranking: Vec<FeatureAttribution>,
}

pub fn explain_features(names: Vec<String>, features: &[Vec<f64>], response: &[f64]) -> Result<Explanation> {
    let surrogate = LinearSurrogate::fit(names, features, response)?;
    let shap: Vec<Vec<f64>> = features.iter().map(|x| surrogate.shapley(x)).collect();
    let mut ranking: Vec<FeatureAttribution> = surrogate
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| FeatureAttribution {
            feature: name.clone(),
            coefficient: surrogate.coefficients[j],
            mean_abs_shap: shap.iter().map(|r| math::abs(r[j])).sum::<f64>() / shap.len() as f64,
        })
        .collect();
    ranking.sort_by(|a, b| b.mean_abs_shap.total_cmp(&a.mean_abs_shap).then_with(|| a.feature.cmp(&b.feature)));
    Ok(Explanation {
        surrogate,
        shap,
        ranking,
    })
}

/// Mean predicted value over non-dummy target rows of each graph.
pub fn mean_target_prediction<E: Executor>(model: &TwinModel, graphs: &[SimGraph], exec: &E) -> Result<Vec<f64>> {
    let preds = predict_all(model, graphs, exec)?;
    Ok(preds
        .iter()
        .zip(graphs)
        .map(|(p, g)| {
            let rows: Vec<usize> = (0..g.num_nodes()).filter(|&i| g.target_mask[i] && !g.dummy_mask[i]).collect();
            if rows.is_empty() {
                return 0.0;
            }
            rows.iter().map(|&i| p.row(i).iter().sum::<f64>()).sum::<f64>() / (rows.len() * g.window) as f64
        })
        .collect())
}

/// Linear surrogate of the model's mean exit magnitude on the scenario
/// covariates (driving behaviour, turning ratios, signal summary).
pub fn explain_linear<E: Executor>(model: &TwinModel, graphs: &[SimGraph], exec: &E) -> Result<Explanation> {
    let response = mean_target_prediction(model, graphs, exec)?;
    let features: Vec<Vec<f64>> = graphs.iter().map(|g| g.covariates.clone()).collect();
    explain_features(crate::graphs::covariate_names(), &features, &response)
}

#[cfg(test)]
mod tests;
