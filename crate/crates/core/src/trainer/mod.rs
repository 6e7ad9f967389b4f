//! Hardware-in-the-loop training.
//!
//! The forward pass runs on a backend (the chip simulator, or the noise-free
//! integer evaluator in mock mode); the backward pass runs on a real-valued
//! surrogate using the values the backend produced.

mod metrics;
mod optim;
mod surrogate;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{write_history, EpochMetrics, Metrics, TARGET_DETECTION, TARGET_FALSE_POSITIVE};
pub use optim::{Optimizer, OptimizerKind};
pub use surrogate::{ForwardCache, Gradients, Precision, Surrogate, SurrogateLayer};

use crate::analog::{ActivationVector, ChipConfig, NoiseModel};
use crate::error::{Error, Result};
use crate::graph::{lower, partition, reference, Inference, Layer, LayerGraph, QuantizedModel, Runtime, Trace};
use crate::preprocess::{calibrate_scale, preprocess_record, EcgRecord, PreprocConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Records per gradient step.
    #[serde(alias = "batch_count")]
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Records held out for evaluation.
    pub test_split: usize,
    /// Train against the noise-free integer evaluator instead of the chip.
    pub mock_mode: bool,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    /// Smallest gain in detection minus false-positive rate that counts.
    pub min_improvement: f64,
    /// Multiplier from pooled ADC values to softmax logits.
    pub logit_scale: f64,
    /// Fraction of the weight range used by the largest initial weight.
    pub init_range: f64,
    /// Training records used to set the requantization shifts.
    pub calibration_records: usize,
    /// Chips to partition onto in hardware mode.
    pub chips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 50,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            test_split: 500,
            mock_mode: false,
            patience: 10,
            min_improvement: 0.002,
            logit_scale: 0.015625,
            init_range: 0.5,
            calibration_records: 200,
            chips: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 || !(self.logit_scale > 0.0) {
            return Err(Error::Config("learning_rate, batch_size, epochs and logit_scale must be positive".into()));
        }
        if self.chips == 0 {
            return Err(Error::Config("need at least one chip".into()));
        }
        Ok(())
    }
}

/// Preprocessed, labelled records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub inputs: Vec<ActivationVector>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn from_records(records: &[EcgRecord], preproc: &PreprocConfig) -> Result<Self> {
        let mut ds = Self::default();
        for r in records {
            let label = r.label.ok_or_else(|| Error::Unlabeled(r.id.clone()))?;
            ds.ids.push(r.id.clone());
            ds.inputs.push(preprocess_record(r, preproc)?);
            ds.labels.push(label);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn check_classes(&self) -> Result<()> {
        for class in [0u8, 1] {
            if !self.labels.contains(&class) {
                return Err(Error::EmptyClass(class));
            }
        }
        Ok(())
    }
}

/// Random disjoint `(train, test)` index sets with `test_size` test records.
pub fn split_indices(labels: &[Option<u8>], test_size: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if test_size == 0 || test_size >= labels.len() {
        return Err(Error::Input(format!("cannot hold out {test_size} of {} records", labels.len())));
    }
    if let Some(i) = labels.iter().position(Option::is_none) {
        return Err(Error::Unlabeled(format!("record {i}")));
    }
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = idx.split_at(test_size);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    for part in [&train, &test] {
        for class in [0u8, 1] {
            if !part.iter().any(|&i| labels[i] == Some(class)) {
                return Err(Error::EmptyClass(class));
            }
        }
    }
    Ok((train, test))
}

/// Splits raw records, calibrates the quantization scale on the training part
/// only, and preprocesses both parts.
pub fn prepare(
    records: &[EcgRecord],
    preproc: &PreprocConfig,
    test_size: usize,
    seed: u64,
) -> Result<(PreprocConfig, Dataset, Dataset)> {
    let labels: Vec<Option<u8>> = records.iter().map(|r| r.label).collect();
    let (train_idx, test_idx) = split_indices(&labels, test_size, seed)?;
    let mut cfg = preproc.clone();
    cfg.quant_scale = calibrate_scale(train_idx.iter().map(|&i| &records[i]), &cfg)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let train = Dataset::from_records(&pick(&train_idx), &cfg)?;
    let test = Dataset::from_records(&pick(&test_idx), &cfg)?;
    Ok((cfg, train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// Training: the largest neuron of each group.
    Max,
    /// Evaluation: the group mean.
    Mean,
}

/// Where the logits come from: the output of `head`, pooled in groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Readout {
    pub head: usize,
    pub group: usize,
}

impl Readout {
    /// Strips a trailing argmax and pooling layer.
    pub fn of(g: &LayerGraph) -> Result<Self> {
        let mut order = g.topo_order()?;
        if order.last().is_some_and(|&n| *g.layer(n) == Layer::Argmax) {
            order.pop();
        }
        let last = *order.last().ok_or_else(|| Error::Graph("graph has no trainable output".into()))?;
        match *g.layer(last) {
            Layer::AvgPool { group_size } | Layer::MaxPool { group_size } => {
                let head = g.nodes[last].input.ok_or_else(|| Error::Graph("pooling the raw input".into()))?;
                Ok(Self { head, group: group_size })
            }
            _ => Ok(Self { head: last, group: 1 }),
        }
    }

    pub fn logits(&self, outputs: &[f64], mode: PoolMode) -> Vec<f64> {
        outputs
            .chunks(self.group)
            .map(|c| match mode {
                PoolMode::Max => c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                PoolMode::Mean => c.iter().sum::<f64>() / c.len() as f64,
            })
            .collect()
    }

    /// Cross-entropy of `softmax(scale * logits)` and its gradient at the head outputs.
    pub fn loss(&self, outputs: &[f64], label: usize, mode: PoolMode, scale: f64) -> Result<(f64, Vec<f64>)> {
        let logits = self.logits(outputs, mode);
        if label >= logits.len() {
            return Err(Error::LengthMismatch { expected: logits.len(), actual: label + 1 });
        }
        let z: Vec<f64> = logits.iter().map(|l| l * scale).collect();
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let loss = sum.ln() - (z[label] - zmax);
        let mut grad = vec![0.0; outputs.len()];
        for (k, chunk) in outputs.chunks(self.group).enumerate() {
            let gk = scale * (exp[k] / sum - if k == label { 1.0 } else { 0.0 });
            match mode {
                PoolMode::Max => grad[k * self.group + crate::graph::argmax(chunk)] = gk,
                PoolMode::Mean => {
                    for i in 0..chunk.len() {
                        grad[k * self.group + i] = gk / chunk.len() as f64;
                    }
                }
            }
        }
        Ok((loss, grad))
    }
}

/// Where forward passes run.
#[derive(Debug, Clone)]
pub enum Backend {
    /// Noise-free integer evaluation on the host.
    Mock { chip: ChipConfig, model: Option<QuantizedModel> },
    /// Instruction-stream execution on simulated chips.
    Chip { runtime: Option<Box<Runtime>>, cfg: ChipConfig, noise: NoiseModel, chips: usize },
}

impl Backend {
    pub fn mock(chip: ChipConfig) -> Self {
        Backend::Mock { chip, model: None }
    }

    pub fn chip(cfg: ChipConfig, noise: NoiseModel, chips: usize) -> Self {
        Backend::Chip { runtime: None, cfg, noise, chips }
    }

    /// Loads `model`; the first call on a chip backend partitions and lowers it.
    pub fn deploy(&mut self, model: &QuantizedModel) -> Result<()> {
        match self {
            Backend::Mock { model: m, .. } => *m = Some(model.clone()),
            Backend::Chip { runtime, cfg, noise, chips } => match runtime {
                Some(rt) => rt.update_model(model.clone())?,
                None => {
                    let plan = partition(&model.graph, cfg, *chips)?;
                    let stream = lower(&plan, &model.graph)?;
                    let mut rt = Runtime::new(stream, model.clone(), cfg, noise)?;
                    rt.deploy()?;
                    *runtime = Some(Box::new(rt));
                }
            },
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &ActivationVector) -> Result<(Inference, Trace)> {
        match self {
            Backend::Mock { chip, model } => {
                reference::evaluate_traced(model.as_ref().ok_or(Error::NotDeployed)?, chip, x)
            }
            Backend::Chip { runtime, .. } => runtime.as_mut().ok_or(Error::NotDeployed)?.run_traced(x),
        }
    }

    pub fn infer(&mut self, x: &ActivationVector) -> Result<Inference> {
        match self {
            Backend::Mock { chip, model } => reference::evaluate(model.as_ref().ok_or(Error::NotDeployed)?, chip, x),
            Backend::Chip { runtime, .. } => runtime.as_mut().ok_or(Error::NotDeployed)?.run(x),
        }
    }
}

/// Runs the deployed model on every record of `data`; predictions use the
/// model's own output (group means followed by argmax for the ECG model).
pub fn evaluate(backend: &mut Backend, data: &Dataset) -> Result<(Metrics, Vec<u8>)> {
    let predictions = data
        .inputs
        .iter()
        .map(|x| backend.infer(x).map(|inf| inf.label as u8))
        .collect::<Result<Vec<_>>>()?;
    Ok((Metrics::from_predictions(&predictions, &data.labels)?, predictions))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub surrogate: Surrogate,
    /// Weights after the last epoch.
    pub model: QuantizedModel,
    pub history: Vec<EpochMetrics>,
    pub stopped_early: bool,
    /// Backend state after training; the chip keeps its fixed pattern.
    pub backend: Backend,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.history.last().map(|e| &e.test)
    }
}

/// Loss and gradients for one record on the current backend.
pub fn record_gradients(
    surrogate: &Surrogate,
    backend: &mut Backend,
    readout: Readout,
    x: &ActivationVector,
    label: u8,
    logit_scale: f64,
) -> Result<(f64, Gradients)> {
    let (_, trace) = backend.forward(x)?;
    let cache = ForwardCache::from_trace(&trace, x);
    let (loss, grad) = readout.loss(&cache.node_outputs[readout.head], label.into(), PoolMode::Max, logit_scale)?;
    Ok((loss, surrogate.backward(&cache, readout.head, &grad)?))
}

pub fn train(
    graph: LayerGraph,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    chip: &ChipConfig,
    noise: &NoiseModel,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_set.check_classes()?;
    test_set.check_classes()?;
    let readout = Readout::of(&graph)?;
    let mut surrogate = Surrogate::init(graph, chip.clone(), cfg.seed, cfg.init_range)?;
    let n_cal = cfg.calibration_records.min(train_set.len());
    surrogate.calibrate_shifts(&train_set.inputs[..n_cal])?;

    let mut backend =
        if cfg.mock_mode { Backend::mock(chip.clone()) } else { Backend::chip(chip.clone(), noise.clone(), cfg.chips) };
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, surrogate.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            backend.deploy(&surrogate.quantize()?)?;
            let mut acc: Vec<f64> = vec![0.0; surrogate.n_params()];
            for &i in batch {
                let (loss, grads) = record_gradients(
                    &surrogate,
                    &mut backend,
                    readout,
                    &train_set.inputs[i],
                    train_set.labels[i],
                    cfg.logit_scale,
                )?;
                loss_sum += loss;
                for (a, g) in acc.iter_mut().zip(grads.iter().flatten().flatten()) {
                    *a += g / batch.len() as f64;
                }
            }
            let mut params: Vec<f64> = surrogate.layers.iter().flatten().flat_map(|l| l.weights.clone()).collect();
            optimizer.step(&mut params, &acc);
            let mut it = params.into_iter();
            for l in surrogate.layers.iter_mut().flatten() {
                l.weights.iter_mut().for_each(|w| *w = it.next().expect("parameter count"));
            }
        }
        let model = surrogate.quantize()?;
        backend.deploy(&model)?;
        let (test, _) = evaluate(&mut backend, test_set)?;
        history.push(EpochMetrics { epoch, train_loss: loss_sum / train_set.len() as f64, test });
        if test.score() >= best + cfg.min_improvement {
            best = test.score();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    let model = surrogate.quantize()?;
    backend.deploy(&model)?;
    Ok(TrainOutcome { surrogate, model, history, stopped_early, backend })
}

#[cfg(test)]
mod tests;
