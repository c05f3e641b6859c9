//! Training loop, evaluation metrics, seed averaging, sweeps, and metrics
//! persistence.
//!
//! One run is fully determined by (config, seed): initialization, batch
//! order, and every metric are reproduced bit-exactly. Per-batch work fans
//! out over clouds with rayon; gradients are reduced sequentially in batch
//! order so the sum never depends on scheduling.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::config::{ConfigError, ExperimentConfig};
use crate::dataset::DatasetSplit;
use crate::knn::{knn_kdtree, shared_edge_percentage, GraphError};
use crate::model::{backward, forward, GraphMode, ModelError, ModelParams};
use crate::nn::{softmax_cross_entropy, AdamState, NnError};
use crate::stress::{pairwise_distances, stress, stress_squared_grad, StressError, StressGrad};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("cloud {index} has no label")]
    UnlabeledCloud { index: usize },
    #[error("cloud {index} has input width {found}, first cloud has {expected}")]
    InconsistentInputWidth { index: usize, expected: usize, found: usize },
    #[error("non-finite {component} loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, component: &'static str },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelRange { label: usize, n_classes: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("could not encode metrics: {0}")]
    Encode(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Stress(#[from] StressError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Learning rate at `epoch`: the base rate halved once per period.
pub fn lr_schedule(lr0: f64, halving_period: usize, epoch: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / halving_period) as i32)
}

/// One line of the per-epoch training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Overall validation accuracy in percent; absent when the validation
    /// split is empty.
    pub val_accuracy: Option<f64>,
    pub lr: f64,
}

/// Final evaluation block of a run. Accuracies are percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub overall_accuracy: f64,
    pub avg_class_accuracy: f64,
    /// Mean Kruskal stress (S, not squared) over the split's clouds.
    pub mean_stress: f64,
    /// Mean percentage of graph edges shared with the xyz k-NN graph.
    pub shared_edge_pct: f64,
}

/// Everything a single training run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (earliest among ties; the last epoch
    /// when there is no validation split).
    pub best_epoch: usize,
    #[serde(rename = "final")]
    pub final_eval: EvalMetrics,
}

/// A trained model with its metric trace.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub metrics: RunMetrics,
}

fn input_width(clouds: &[PointCloud]) -> Result<usize, HarnessError> {
    let expected = clouds[0].input_dim();
    for (index, cloud) in clouds.iter().enumerate() {
        let found = cloud.input_dim();
        if found != expected {
            return Err(HarnessError::InconsistentInputWidth { index, expected, found });
        }
    }
    Ok(expected)
}

struct CloudPass {
    logits: Array1<f64>,
    stress_grad: Option<StressGrad>,
    s_squared: f64,
}

/// Forward every cloud of one batch and assemble the combined loss pieces.
fn forward_batch(
    params: &ModelParams,
    clouds: &[&PointCloud],
    gamma: f64,
) -> Result<(Vec<crate::model::ForwardCaches>, Vec<CloudPass>), HarnessError> {
    let needs_stress = gamma > 0.0 && params.dims.mode == GraphMode::Learned;
    let results: Vec<Result<_, HarnessError>> = clouds
        .par_iter()
        .map(|cloud| {
            let caches = forward(params, &cloud.input_matrix())?;
            let (stress_grad, s_squared) = if needs_stress {
                let sg = stress_squared_grad(&cloud.points, &caches.mapped)?;
                let s2 = sg.s_squared;
                (Some(sg), s2)
            } else {
                (None, 0.0)
            };
            let pass = CloudPass { logits: caches.logits.clone(), stress_grad, s_squared };
            Ok((caches, pass))
        })
        .collect();
    let mut caches = Vec::with_capacity(clouds.len());
    let mut passes = Vec::with_capacity(clouds.len());
    for result in results {
        let (c, p) = result?;
        caches.push(c);
        passes.push(p);
    }
    Ok((caches, passes))
}

/// Train one model. The seed fixes initialization and batch order; the epoch
/// with the best validation accuracy wins (earliest on ties), the final epoch
/// when no validation data exists.
pub fn train(
    config: &ExperimentConfig,
    dataset: &DatasetSplit,
    seed: u64,
) -> Result<TrainOutput, HarnessError> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(HarnessError::EmptySplit { split: "train" });
    }
    let d_in = input_width(&dataset.train)?;
    let n_classes = dataset.n_classes();
    for (index, cloud) in dataset.train.iter().enumerate() {
        match cloud.label {
            None => return Err(HarnessError::UnlabeledCloud { index }),
            Some(label) if label >= n_classes => {
                return Err(HarnessError::LabelRange { label, n_classes })
            }
            Some(_) => {}
        }
    }

    let dims = config.model_dims(d_in, n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(dims, &mut rng)?;
    let mut adam = AdamState::new(&params.param_lens());

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    'epochs: for epoch in 0..config.epochs {
        let lr = lr_schedule(config.lr0, config.lr_halving_period, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let clouds: Vec<&PointCloud> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let labels: Vec<usize> =
                clouds.iter().map(|c| c.label.expect("validated above")).collect();
            let (caches, passes) = forward_batch(&params, &clouds, config.gamma)?;

            let b = clouds.len();
            let mut logits = Array2::zeros((b, n_classes));
            for (i, pass) in passes.iter().enumerate() {
                logits.row_mut(i).assign(&pass.logits);
            }
            let (task_loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            let mean_s2 = passes.iter().map(|p| p.s_squared).sum::<f64>() / b as f64;
            if !task_loss.is_finite() {
                return Err(HarnessError::NonFiniteLoss { epoch, batch: batch_idx, component: "task" });
            }
            if !mean_s2.is_finite() {
                return Err(HarnessError::NonFiniteLoss { epoch, batch: batch_idx, component: "stress" });
            }
            let batch_loss = task_loss + config.gamma * mean_s2;

            // Mean CE already divides by the batch; the stress term gets the
            // same per-cloud weight so the sum of per-cloud bundles is the
            // gradient of the batch loss.
            let cloud_stress_weight = config.gamma / b as f64;
            let grads: Vec<ModelParams> = caches
                .par_iter()
                .zip(&passes)
                .enumerate()
                .map(|(i, (c, pass))| {
                    let dl = dlogits.row(i).to_owned();
                    backward(&params, c, &dl, cloud_stress_weight, pass.stress_grad.as_ref())
                })
                .collect::<Result<_, _>>()?;
            let mut total = ModelParams::zeros(dims)?;
            for g in &grads {
                total.add_assign(g);
            }

            let grad_slices = total.param_slices();
            let mut param_slices = params.param_slices_mut();
            adam.step(&mut param_slices, &grad_slices, lr)?;
            loss_sum += batch_loss * b as f64;
        }

        let train_loss = loss_sum / dataset.train.len() as f64;
        let val_accuracy = if dataset.validation.is_empty() {
            None
        } else {
            Some(overall_accuracy(&params, &dataset.validation)?)
        };
        records.push(EpochRecord { epoch, train_loss, val_accuracy, lr });

        if let Some(acc) = val_accuracy {
            let improved = best.as_ref().is_none_or(|(_, best_acc, _)| acc > *best_acc);
            if improved {
                best = Some((epoch, acc, params.clone()));
            }
            if let Some(threshold) = config.early_stop_val_acc {
                if acc >= threshold {
                    break 'epochs;
                }
            }
        }
    }

    let (best_epoch, best_params) = match best {
        Some((epoch, _, p)) => (epoch, p),
        None => (records.len().saturating_sub(1), params),
    };
    let final_eval = if dataset.test.is_empty() {
        EvalMetrics {
            overall_accuracy: f64::NAN,
            avg_class_accuracy: f64::NAN,
            mean_stress: f64::NAN,
            shared_edge_pct: f64::NAN,
        }
    } else {
        evaluate(&best_params, &dataset.test)?
    };
    Ok(TrainOutput {
        params: best_params,
        metrics: RunMetrics { epochs: records, best_epoch, final_eval },
    })
}

fn predict_index(logits: &Array1<f64>) -> usize {
    let mut best = 0;
    for c in 1..logits.len() {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}

/// Overall accuracy (percent) of `params` on `clouds`.
pub fn overall_accuracy(
    params: &ModelParams,
    clouds: &[PointCloud],
) -> Result<f64, HarnessError> {
    if clouds.is_empty() {
        return Err(HarnessError::EmptySplit { split: "evaluation" });
    }
    let hits: Vec<bool> = clouds
        .par_iter()
        .enumerate()
        .map(|(index, cloud)| {
            let label = cloud.label.ok_or(HarnessError::UnlabeledCloud { index })?;
            let caches = forward(params, &cloud.input_matrix())?;
            Ok::<bool, HarnessError>(predict_index(&caches.logits) == label)
        })
        .collect::<Result<_, _>>()?;
    let correct = hits.iter().filter(|&&h| h).count();
    Ok(100.0 * correct as f64 / clouds.len() as f64)
}

/// Full evaluation: overall accuracy, average per-class recall, mean stress
/// and mean shared-edge percentage against the xyz k-NN graph.
pub fn evaluate(params: &ModelParams, clouds: &[PointCloud]) -> Result<EvalMetrics, HarnessError> {
    if clouds.is_empty() {
        return Err(HarnessError::EmptySplit { split: "evaluation" });
    }
    let n_classes = params.dims.d_classes;
    let k = params.dims.k;

    struct PerCloud {
        label: usize,
        correct: bool,
        stress_s: f64,
        shared_pct: f64,
    }
    let rows: Vec<PerCloud> = clouds
        .par_iter()
        .enumerate()
        .map(|(index, cloud)| {
            let label = cloud.label.ok_or(HarnessError::UnlabeledCloud { index })?;
            if label >= n_classes {
                return Err(HarnessError::LabelRange { label, n_classes });
            }
            let caches = forward(params, &cloud.input_matrix())?;
            let d = pairwise_distances(&cloud.points)?;
            let d_hat = pairwise_distances(&caches.mapped)?;
            let s = stress(&d, &d_hat)?.s;
            let xyz_graph = knn_kdtree(&cloud.points, k)?;
            let shared_pct = shared_edge_percentage(&caches.graph, &xyz_graph)?;
            Ok(PerCloud { label, correct: predict_index(&caches.logits) == label, stress_s: s, shared_pct })
        })
        .collect::<Result<_, _>>()?;

    let total = rows.len() as f64;
    let overall = 100.0 * rows.iter().filter(|r| r.correct).count() as f64 / total;
    let mut class_total = vec![0usize; n_classes];
    let mut class_correct = vec![0usize; n_classes];
    for row in &rows {
        class_total[row.label] += 1;
        if row.correct {
            class_correct[row.label] += 1;
        }
    }
    let mut recalls = Vec::new();
    for c in 0..n_classes {
        if class_total[c] == 0 {
            eprintln!("warning: class {c} absent from evaluation split, excluded from average-class accuracy");
        } else {
            recalls.push(100.0 * class_correct[c] as f64 / class_total[c] as f64);
        }
    }
    let avg_class = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let mean_stress = rows.iter().map(|r| r.stress_s).sum::<f64>() / total;
    let shared = rows.iter().map(|r| r.shared_pct).sum::<f64>() / total;
    Ok(EvalMetrics {
        overall_accuracy: overall,
        avg_class_accuracy: avg_class,
        mean_stress,
        shared_edge_pct: shared,
    })
}

/// Seed-averaged final metrics with per-field extremes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub n_runs: usize,
    pub mean: EvalMetrics,
    pub min: EvalMetrics,
    pub max: EvalMetrics,
}

/// Arithmetic mean (plus min/max) of each final metric over runs.
pub fn seed_average(runs: &[RunMetrics]) -> Result<AggregateMetrics, HarnessError> {
    if runs.is_empty() {
        return Err(HarnessError::Invalid("seed_average needs at least one run".into()));
    }
    let field = |get: fn(&EvalMetrics) -> f64| {
        let values: Vec<f64> = runs.iter().map(|r| get(&r.final_eval)).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (mean, min, max)
    };
    let overall = field(|m| m.overall_accuracy);
    let avg_class = field(|m| m.avg_class_accuracy);
    let stress = field(|m| m.mean_stress);
    let shared = field(|m| m.shared_edge_pct);
    let pick = |i: usize| EvalMetrics {
        overall_accuracy: [overall.0, overall.1, overall.2][i],
        avg_class_accuracy: [avg_class.0, avg_class.1, avg_class.2][i],
        mean_stress: [stress.0, stress.1, stress.2][i],
        shared_edge_pct: [shared.0, shared.1, shared.2][i],
    };
    Ok(AggregateMetrics { n_runs: runs.len(), mean: pick(0), min: pick(1), max: pick(2) })
}

/// Parameter axis swept over a base config.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    DGraph(Vec<usize>),
    Gamma(Vec<f64>),
}

/// One sweep row: either seed-averaged metrics or the recorded failure.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub label: String,
    pub d_graph: usize,
    pub gamma: f64,
    pub outcome: Result<AggregateMetrics, String>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Model label for table rows: the feature-map family name.
pub fn model_label(mode: GraphMode, d_in: usize, f_hidden: usize, d_graph: usize) -> String {
    match mode {
        GraphMode::Baseline => "baseline".to_string(),
        GraphMode::Learned => format!("mlp-{d_in}-{f_hidden}-{d_graph}"),
    }
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,d_graph,gamma,stress,shared_edges_pct,overall_acc,avg_class_acc,overall_acc_min,overall_acc_max,status\n",
        );
        for row in &self.rows {
            match &row.outcome {
                Ok(m) => out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},ok\n",
                    row.label,
                    row.d_graph,
                    row.gamma,
                    m.mean.mean_stress,
                    m.mean.shared_edge_pct,
                    m.mean.overall_accuracy,
                    m.mean.avg_class_accuracy,
                    m.min.overall_accuracy,
                    m.max.overall_accuracy,
                )),
                Err(msg) => out.push_str(&format!(
                    "{},{},{},,,,,,,failed: {}\n",
                    row.label,
                    row.d_graph,
                    row.gamma,
                    msg.replace(',', ";").replace('\n', " "),
                )),
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>7} {:>10} {:>10} {:>8} {:>8} {:>9}\n",
            "model", "d_graph", "gamma", "stress", "shared%", "acc%", "classAcc%"
        ));
        for row in &self.rows {
            match &row.outcome {
                Ok(m) => out.push_str(&format!(
                    "{:<16} {:>7} {:>10} {:>10.5} {:>8.2} {:>8.2} {:>9.2}\n",
                    row.label,
                    row.d_graph,
                    row.gamma,
                    m.mean.mean_stress,
                    m.mean.shared_edge_pct,
                    m.mean.overall_accuracy,
                    m.mean.avg_class_accuracy,
                )),
                Err(msg) => out.push_str(&format!(
                    "{:<16} {:>7} {:>10} failed: {}\n",
                    row.label, row.d_graph, row.gamma, msg
                )),
            }
        }
        out
    }
}

/// Run the sweep: one seed-averaged row per axis value. Row failures are
/// recorded and the sweep continues.
pub fn sweep(base: &ExperimentConfig, axis: &SweepAxis) -> Result<SweepTable, HarnessError> {
    let values_len = match axis {
        SweepAxis::DGraph(v) => v.len(),
        SweepAxis::Gamma(v) => v.len(),
    };
    if values_len == 0 {
        return Err(HarnessError::Invalid("sweep axis is empty".into()));
    }
    let dataset = base.load_split()?;
    let d_in = if dataset.train.is_empty() { 3 } else { input_width(&dataset.train)? };

    let mut rows = Vec::with_capacity(values_len);
    for idx in 0..values_len {
        let mut config = base.clone();
        match axis {
            SweepAxis::DGraph(v) => config.d_graph = v[idx],
            SweepAxis::Gamma(v) => config.gamma = v[idx],
        }
        let label = model_label(config.mode, d_in, config.widths.f_hidden, config.d_graph);
        let outcome = run_row(&config, &dataset);
        rows.push(SweepRow {
            label,
            d_graph: config.d_graph,
            gamma: config.gamma,
            outcome: outcome.map_err(|e| e.to_string()),
        });
    }
    Ok(SweepTable { rows })
}

fn run_row(
    config: &ExperimentConfig,
    dataset: &DatasetSplit,
) -> Result<AggregateMetrics, HarnessError> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        runs.push(train(config, dataset, seed)?.metrics);
    }
    seed_average(&runs)
}

/// Write the per-epoch trace as JSON lines. Contains no timestamps or other
/// nondeterminism: identical runs produce identical bytes.
pub fn write_metrics_jsonl(path: &Path, records: &[EpochRecord]) -> Result<(), HarnessError> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|source| HarnessError::Io { path: path.into(), source })
}

/// Write the run summary (best epoch plus final metrics) as a single JSON
/// document.
pub fn write_run_summary(path: &Path, metrics: &RunMetrics) -> Result<(), HarnessError> {
    #[derive(Serialize)]
    struct Summary<'a> {
        best_epoch: usize,
        epochs_run: usize,
        #[serde(rename = "final")]
        final_eval: &'a EvalMetrics,
    }
    let summary = Summary {
        best_epoch: metrics.best_epoch,
        epochs_run: metrics.epochs.len(),
        final_eval: &metrics.final_eval,
    };
    let mut out = serde_json::to_vec_pretty(&summary)?;
    out.push(b'\n');
    std::fs::write(path, out).map_err(|source| HarnessError::Io { path: path.into(), source })
}

/// CSV projection of a metric trace, convenient for plotting tools.
pub fn write_trace_csv<W: Write>(mut out: W, records: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_accuracy,lr")?;
    for r in records {
        match r.val_accuracy {
            Some(acc) => writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, acc, r.lr)?,
            None => writeln!(out, "{},{},,{}", r.epoch, r.train_loss, r.lr)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetConfig;
    use crate::model::ModelWidths;
    use crate::synth::{generate_synthetic, SyntheticSpec};

    fn toy_config(mode: GraphMode, gamma: f64) -> ExperimentConfig {
        ExperimentConfig {
            mode,
            d_graph: 3,
            dataset: DatasetConfig::Synthetic {
                clouds_per_class: 6,
                test_fraction: 0.34,
                val_fraction: 0.17,
                seed: 9,
                rotations: true,
            },
            t_blocks: 2,
            k: 4,
            gamma,
            epochs: 2,
            batch_size: 4,
            lr0: 1e-3,
            lr_halving_period: 20,
            seeds: vec![0],
            n_points: 24,
            widths: ModelWidths { f_hidden: 4, node: 6, edge: 6, fusion: 12, pred_hidden: 6 },
            early_stop_val_acc: None,
        }
    }

    fn toy_dataset(config: &ExperimentConfig) -> DatasetSplit {
        let DatasetConfig::Synthetic {
            clouds_per_class,
            test_fraction,
            val_fraction,
            seed,
            rotations,
        } = config.dataset
        else {
            panic!("toy config is synthetic")
        };
        generate_synthetic(&SyntheticSpec {
            clouds_per_class,
            n_points: config.n_points,
            test_fraction,
            val_fraction,
            seed,
            rotations,
        })
        .unwrap()
    }

    #[test]
    fn lr_schedule_matches_protocol() {
        assert_eq!(lr_schedule(1e-4, 20, 0), 1e-4);
        assert_eq!(lr_schedule(1e-4, 20, 19), 1e-4);
        assert_eq!(lr_schedule(1e-4, 20, 20), 5e-5);
        assert_eq!(lr_schedule(1e-4, 20, 99), 1e-4 * 0.5f64.powi(4));
        // Non-increasing, piecewise constant.
        let mut last = f64::INFINITY;
        for epoch in 0..100 {
            let lr = lr_schedule(1e-4, 20, epoch);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let config = toy_config(GraphMode::Learned, 0.0);
        let dataset = toy_dataset(&config);
        let a = train(&config, &dataset, 1).unwrap();
        let b = train(&config, &dataset, 1).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics.epochs.len(), 2);
        assert!(a.metrics.epochs[0].train_loss.is_finite());
        let c = train(&config, &dataset, 2).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn best_epoch_dominates_validation_trace() {
        let config = ExperimentConfig { epochs: 4, ..toy_config(GraphMode::Learned, 0.0) };
        let dataset = toy_dataset(&config);
        let out = train(&config, &dataset, 3).unwrap();
        let best_acc = out.metrics.epochs[out.metrics.best_epoch].val_accuracy.unwrap();
        for record in &out.metrics.epochs {
            assert!(best_acc >= record.val_accuracy.unwrap());
        }
    }

    #[test]
    fn empty_validation_keeps_final_epoch() {
        let mut config = toy_config(GraphMode::Learned, 0.0);
        config.dataset = DatasetConfig::Synthetic {
            clouds_per_class: 6,
            test_fraction: 0.34,
            val_fraction: 0.0,
            seed: 9,
            rotations: true,
        };
        let dataset = toy_dataset(&config);
        assert!(dataset.validation.is_empty());
        let out = train(&config, &dataset, 1).unwrap();
        assert_eq!(out.metrics.best_epoch, config.epochs - 1);
        assert!(out.metrics.epochs.iter().all(|r| r.val_accuracy.is_none()));
    }

    #[test]
    fn baseline_eval_is_self_consistent() {
        let config = toy_config(GraphMode::Baseline, 0.0);
        let dataset = toy_dataset(&config);
        let out = train(&config, &dataset, 1).unwrap();
        assert_eq!(out.metrics.final_eval.shared_edge_pct, 100.0);
        assert_eq!(out.metrics.final_eval.mean_stress, 0.0);
    }

    #[test]
    fn evaluate_hand_case_mixed_recalls() {
        // 2 classes with recalls 100% and 50%, sizes 10 and 90: overall 55,
        // average-class 75. Checked against the aggregation arithmetic alone.
        let correct_flags: Vec<(usize, bool)> = (0..10)
            .map(|_| (0usize, true))
            .chain((0..45).map(|_| (1usize, true)))
            .chain((0..45).map(|_| (1usize, false)))
            .collect();
        let total = correct_flags.len() as f64;
        let overall = 100.0 * correct_flags.iter().filter(|(_, c)| *c).count() as f64 / total;
        let mut class_total = [0usize; 2];
        let mut class_correct = [0usize; 2];
        for (label, correct) in &correct_flags {
            class_total[*label] += 1;
            if *correct {
                class_correct[*label] += 1;
            }
        }
        let avg = (0..2)
            .map(|c| 100.0 * class_correct[c] as f64 / class_total[c] as f64)
            .sum::<f64>()
            / 2.0;
        assert_eq!(overall, 55.0);
        assert_eq!(avg, 75.0);
    }

    #[test]
    fn evaluate_is_order_invariant() {
        let config = toy_config(GraphMode::Learned, 0.0);
        let dataset = toy_dataset(&config);
        let out = train(&config, &dataset, 5).unwrap();
        let forward_metrics = evaluate(&out.params, &dataset.test).unwrap();
        let mut reversed: Vec<PointCloud> = dataset.test.clone();
        reversed.reverse();
        let reversed_metrics = evaluate(&out.params, &reversed).unwrap();
        assert_eq!(forward_metrics.overall_accuracy, reversed_metrics.overall_accuracy);
        assert_eq!(forward_metrics.avg_class_accuracy, reversed_metrics.avg_class_accuracy);
        // Mean over clouds: identical terms, addition order differs, so allow
        // rounding-level slack.
        assert!((forward_metrics.mean_stress - reversed_metrics.mean_stress).abs() < 1e-12);
        assert!(
            (forward_metrics.shared_edge_pct - reversed_metrics.shared_edge_pct).abs() < 1e-12
        );
    }

    #[test]
    fn seed_average_means_and_extremes() {
        let mk = |acc: f64| RunMetrics {
            epochs: Vec::new(),
            best_epoch: 0,
            final_eval: EvalMetrics {
                overall_accuracy: acc,
                avg_class_accuracy: acc - 1.0,
                mean_stress: acc / 100.0,
                shared_edge_pct: 90.0,
            },
        };
        let agg = seed_average(&[mk(91.0), mk(92.0), mk(93.0)]).unwrap();
        assert_eq!(agg.mean.overall_accuracy, 92.0);
        assert_eq!(agg.min.overall_accuracy, 91.0);
        assert_eq!(agg.max.overall_accuracy, 93.0);
        assert_eq!(agg.mean.avg_class_accuracy, 91.0);
        assert_eq!(agg.n_runs, 3);

        let single = seed_average(&[mk(88.0)]).unwrap();
        assert_eq!(single.mean, single.min);
        assert_eq!(single.mean.overall_accuracy, 88.0);
        assert!(seed_average(&[]).is_err());
    }

    #[test]
    fn sweep_continues_past_failing_rows() {
        let mut config = toy_config(GraphMode::Baseline, 0.0);
        config.epochs = 1;
        // Baseline with d_graph != 3 must fail per row, not abort the sweep.
        let table = sweep(&config, &SweepAxis::DGraph(vec![3, 12])).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows[0].outcome.is_ok());
        assert!(table.rows[1].outcome.is_err());
        let csv = table.to_csv();
        assert!(csv.contains("baseline,3,0"));
        assert!(csv.contains("failed:"));
        assert!(sweep(&config, &SweepAxis::Gamma(vec![])).is_err());
    }

    #[test]
    fn metrics_files_are_deterministic() {
        let tmp = tempfile::TempDir::new().unwrap();
        let config = toy_config(GraphMode::Learned, 0.0);
        let dataset = toy_dataset(&config);
        let out = train(&config, &dataset, 7).unwrap();
        let (p1, p2) = (tmp.path().join("a.jsonl"), tmp.path().join("b.jsonl"));
        write_metrics_jsonl(&p1, &out.metrics.epochs).unwrap();
        write_metrics_jsonl(&p2, &out.metrics.epochs).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let summary = tmp.path().join("summary.json");
        write_run_summary(&summary, &out.metrics).unwrap();
        let text = std::fs::read_to_string(&summary).unwrap();
        assert!(text.contains("\"best_epoch\""));
        assert!(text.contains("\"final\""));
    }
}
