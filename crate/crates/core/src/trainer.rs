//! Training loop, evaluation metrics, seed-sweep confidence intervals and
//! the measured-only vs full-topology timing benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::datagen::{Dataset, CLASSES};
use crate::graph::{GraphStrategy, SensorGraph};
use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::{Mode, Real};
use crate::stgnn::{Arch, Model, ModelDims, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("graph binds {graph} sensors but the dataset has {dataset}")]
    GraphDatasetMismatch { graph: usize, dataset: usize },
    #[error("need at least 2 scores for a confidence interval")]
    TooFewScores,
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub strategy: GraphStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dims: ModelDims,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults: 11 epochs for the GRU baseline, 15 for STGNNs, batch 32,
    /// AdamW at lr 0.001 with weight decay 1e-4.
    pub fn new(arch: Arch, strategy: GraphStrategy) -> Self {
        TrainConfig {
            arch,
            strategy,
            epochs: if arch.is_stgnn() { 15 } else { 11 },
            batch_size: 32,
            lr: 0.001,
            weight_decay: 1e-4,
            dims: ModelDims::default(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub struct TrainOutput<T: Real> {
    pub model: Model<T>,
    pub loss_history: Vec<LossPoint>,
    pub epoch_seconds: Vec<f64>,
    pub train_seconds: f64,
}

fn check_binding(graph: &SensorGraph, ds: &Dataset) -> Result<(), TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let needed = graph
        .nodes
        .iter()
        .filter_map(|n| n.sensor_index)
        .max()
        .map_or(0, |m| m + 1);
    if needed > ds.n_sensors || graph.observed_count() != ds.n_sensors {
        return Err(TrainError::GraphDatasetMismatch {
            graph: graph.observed_count(),
            dataset: ds.n_sensors,
        });
    }
    Ok(())
}

/// Mini-batch AdamW training of node-level cross-entropy, masked to
/// observed nodes. Deterministic for a fixed seed: the model
/// initialization, batch shuffling and dropout all derive from it.
pub fn train<T: Real>(
    config: &TrainConfig,
    train_ds: &Dataset,
    graph: &SensorGraph,
) -> Result<TrainOutput<T>, TrainError> {
    check_binding(graph, train_ds)?;
    let mut model = Model::<T>::new(
        config.arch,
        config.dims.clone(),
        graph.clone(),
        config.seed,
    );
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);

    let mut opt = AdamW::new(AdamWConfig::<T>::new(config.lr, config.weight_decay));
    let mut loss_history = Vec::new();
    let mut epoch_seconds = Vec::new();
    let started = Instant::now();

    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let windows: Vec<&crate::datagen::WindowSample> =
                chunk.iter().map(|&i| &train_ds.samples[i]).collect();
            let (tape, loss, param_vars) =
                model.loss_batch(&windows, Mode::Train, &mut dropout_rng)?;
            let loss_value = tape.value(loss)[[0, 0]].to_f64().unwrap();
            let grads = tape.backward(loss);
            let mut params = model.params_mut();
            let grad_arrays: Vec<ndarray::Array2<T>> = param_vars
                .iter()
                .zip(params.iter())
                .map(|(&v, p)| grads.get_or_zeros(v, p))
                .collect();
            opt.step(&mut params, &grad_arrays);
            loss_history.push(LossPoint {
                epoch,
                step,
                loss: loss_value,
            });
        }
        epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
    }
    Ok(TrainOutput {
        model,
        loss_history,
        epoch_seconds,
        train_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Evaluation result; `train_seconds` is filled in by the caller that
/// also trained the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<u32>>,
    pub samples: usize,
    pub train_seconds: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One CSV row: run id, arch, topology, config fingerprint, macro F1,
    /// per-class F1 (semicolon joined), seconds.
    pub fn to_csv_row(&self, run_id: &str, arch: Arch, topology: GraphStrategy, fingerprint: &str) -> String {
        let per_class = self
            .per_class_f1
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{run_id},{},{},{fingerprint},{:.6},{per_class},{:.3}",
            arch.keyword(),
            topology.keyword(),
            self.macro_f1,
            self.train_seconds
        )
    }
}

pub const REPORT_CSV_HEADER: &str =
    "run_id,arch,topology,fingerprint,macro_f1,per_class_f1,seconds";

/// Builds the report from parallel label/prediction slices.
pub fn evaluate_predictions(labels: &[usize], predictions: &[usize]) -> EvalReport {
    assert_eq!(labels.len(), predictions.len());
    let mut confusion = vec![vec![0u32; CLASSES]; CLASSES];
    for (&t, &p) in labels.iter().zip(predictions.iter()) {
        confusion[t][p] += 1;
    }
    let mut per_class_f1 = vec![0.0; CLASSES];
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    let mut weighted_sum = 0.0;
    for c in 0..CLASSES {
        let tp = confusion[c][c] as f64;
        let support: u32 = confusion[c].iter().sum();
        let predicted: u32 = (0..CLASSES).map(|t| confusion[t][c]).sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class_f1[c] = f1;
        if support > 0 {
            macro_sum += f1;
            macro_n += 1;
            weighted_sum += f1 * support as f64;
        }
    }
    EvalReport {
        macro_f1: if macro_n > 0 { macro_sum / macro_n as f64 } else { 0.0 },
        weighted_f1: weighted_sum / labels.len().max(1) as f64,
        per_class_f1,
        confusion,
        samples: labels.len(),
        train_seconds: 0.0,
    }
}

/// Soft-vote predictions over the dataset followed by per-class F1.
pub fn evaluate<T: Real>(model: &mut Model<T>, ds: &Dataset) -> Result<EvalReport, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = model.node_count().max(1);
    let batch = (2048 / n).max(1);
    let mut labels = Vec::with_capacity(ds.len());
    let mut predictions = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(batch) {
        let windows: Vec<&crate::datagen::WindowSample> = chunk.iter().collect();
        predictions.extend(model.predict_batch(&windows)?);
        labels.extend(chunk.iter().map(|w| w.label as usize));
    }
    Ok(evaluate_predictions(&labels, &predictions))
}

/// Student-t interval: mean +/- t_{(1+level)/2, n-1} * s / sqrt(n).
pub fn confidence_interval(scores: &[f64], level: f64) -> Result<(f64, f64), TrainError> {
    if scores.len() < 2 {
        return Err(TrainError::TooFewScores);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .expect("valid dof")
        .inverse_cdf(0.5 + level / 2.0);
    Ok((mean, t * sd / n.sqrt()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSweepResult {
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub half_width: f64,
}

/// Trains one model per seed on a fixed split and reports the 90%
/// confidence interval of the evaluation macro F1.
pub fn seed_sweep<T: Real>(
    config: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    graph: &SensorGraph,
    seeds: &[u64],
) -> Result<SeedSweepResult, TrainError> {
    let mut scores = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = config.clone().with_seed(seed);
        let mut out = train::<T>(&cfg, train_ds, graph)?;
        let report = evaluate(&mut out.model, eval_ds)?;
        scores.push(report.macro_f1);
    }
    let (mean, half_width) = confidence_interval(&scores, 0.90)?;
    Ok(SeedSweepResult {
        seeds: seeds.to_vec(),
        scores,
        mean,
        half_width,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingSide {
    pub strategy: &'static str,
    pub seconds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingComparison {
    pub arch: String,
    pub measured: TimingSide,
    pub full: TimingSide,
    pub ratio: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains the same architecture on both graph strategies under identical
/// conditions, serially, and reports wall-clock statistics and the
/// full/measured ratio.
pub fn benchmark_topologies<T: Real>(
    config: &TrainConfig,
    train_ds: &Dataset,
    measured_graph: &SensorGraph,
    full_graph: &SensorGraph,
    repetitions: usize,
) -> Result<TimingComparison, TrainError> {
    let mut measured = Vec::with_capacity(repetitions);
    let mut full = Vec::with_capacity(repetitions);
    for rep in 0..repetitions {
        let cfg = config.clone().with_seed(config.seed + rep as u64);
        let out = train::<T>(&cfg, train_ds, measured_graph)?;
        measured.push(out.train_seconds);
        let out = train::<T>(&cfg, train_ds, full_graph)?;
        full.push(out.train_seconds);
    }
    let (m_mean, m_std) = mean_std(&measured);
    let (f_mean, f_std) = mean_std(&full);
    Ok(TimingComparison {
        arch: config.arch.keyword().to_string(),
        measured: TimingSide {
            strategy: "measured-only",
            seconds: measured,
            mean: m_mean,
            std: m_std,
        },
        full: TimingSide {
            strategy: "full",
            seconds: full,
            mean: f_mean,
            std: f_std,
        },
        ratio: f_mean / m_mean,
    })
}
