use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analog::{ActivationVector, ChipConfig, SignedWeightMatrix};
use crate::error::{Error, Result};
use crate::graph::{default_shift, reference, Layer, LayerGraph, MacParams, QuantizedModel, Trace};

/// Real-valued parameters of one MAC layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateLayer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub weights: Vec<f64>,
    /// Real to integer weight factor; fixed after initialization.
    pub scale: f64,
    pub shift: u32,
}

impl SurrogateLayer {
    pub fn quantized(&self, max_weight: i16) -> SignedWeightMatrix {
        let m = f64::from(max_weight);
        SignedWeightMatrix::from_fn(self.rows, self.cols, |r, c| {
            (self.weights[r * self.cols + c] * self.scale).round().clamp(-m, m) as i16
        })
    }
}

/// How the forward pass that produced a cache treated quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Integer weights, rounding, ADC and activation clipping.
    Quantized,
    /// Real weights and activations, no rounding or clipping.
    Continuous,
}

/// Values a backward pass needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub precision: Precision,
    pub input: Vec<f64>,
    /// Indexed by node id.
    pub node_outputs: Vec<Vec<f64>>,
    /// Indexed by node id; activations fed to MAC nodes.
    pub acts: Vec<Vec<f64>>,
    /// Indexed by node id; `[slice][out]`.
    pub clipped: Vec<Vec<Vec<bool>>>,
}

impl ForwardCache {
    pub fn from_trace(trace: &Trace, input: &ActivationVector) -> Self {
        let n = trace.node_outputs.len();
        let mut acts = vec![Vec::new(); n];
        let mut clipped = vec![Vec::new(); n];
        for m in &trace.macs {
            acts[m.node] = m.input.iter().map(|&a| f64::from(a)).collect();
            clipped[m.node] = m.clipped.clone();
        }
        Self {
            precision: Precision::Quantized,
            input: input.values().iter().map(|&v| f64::from(v)).collect(),
            node_outputs: trace.node_outputs.clone(),
            acts,
            clipped,
        }
    }
}

/// Differentiable host-side mirror of a quantized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub graph: LayerGraph,
    pub chip: ChipConfig,
    pub slice_rows: usize,
    /// Indexed by node id.
    pub layers: Vec<Option<SurrogateLayer>>,
}

/// Gradients with the same layout as [`Surrogate::layers`].
pub type Gradients = Vec<Option<Vec<f64>>>;

impl Surrogate {
    /// Gaussian weights of standard deviation `1/sqrt(fan_in)`; each layer's
    /// scale maps its largest initial magnitude to `init_range` of the weight range.
    pub fn init(graph: LayerGraph, chip: ChipConfig, seed: u64, init_range: f64) -> Result<Self> {
        graph.shapes()?;
        chip.validate()?;
        if !(init_range > 0.0 && init_range <= 1.0) {
            return Err(Error::Config("init_range must be in (0, 1]".into()));
        }
        let slice_rows = chip.signed_rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_w = f64::from(chip.max_weight());
        let layers = graph
            .nodes
            .iter()
            .map(|node| {
                node.layer.weight_shape().map(|(rows, cols)| {
                    let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
                    let weights: Vec<f64> = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
                    let peak = weights.iter().fold(0.0f64, |m, w| m.max(w.abs())).max(f64::MIN_POSITIVE);
                    SurrogateLayer {
                        rows,
                        cols,
                        weights,
                        scale: init_range * max_w / peak,
                        shift: default_shift(&node.layer, slice_rows, &chip),
                    }
                })
            })
            .collect();
        Ok(Self { graph, chip, slice_rows, layers })
    }

    pub fn layer(&self, node: usize) -> &SurrogateLayer {
        self.layers[node].as_ref().expect("not a MAC node")
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().flatten().map(|l| l.weights.len()).sum()
    }

    /// Integer model the chip runs.
    pub fn quantize(&self) -> Result<QuantizedModel> {
        let max = self.chip.max_weight() as i16;
        let params = self
            .layers
            .iter()
            .map(|l| l.as_ref().map(|l| MacParams { weights: l.quantized(max), shift: l.shift }))
            .collect();
        QuantizedModel::new(self.graph.clone(), params, self.slice_rows)
    }

    /// ADC values per unit of integer dot product.
    pub fn mac_slope(&self) -> f64 {
        self.chip.mac_gain / self.chip.lsb()
    }

    fn input_shift(&self, node: usize) -> u32 {
        self.graph.upstream_mac(node).map_or(0, |m| self.layer(m).shift)
    }

    /// Sets each layer's shift, in execution order, so that the 99th
    /// percentile of its positive outputs over `inputs` lands on the top
    /// activation. The last MAC layer keeps its shift.
    pub fn calibrate_shifts(&mut self, inputs: &[ActivationVector]) -> Result<()> {
        let macs = self.graph.mac_nodes()?;
        let top = f64::from(self.chip.max_activation());
        for &node in macs.iter().take(macs.len().saturating_sub(1)) {
            let model = self.quantize()?;
            let mut positive = Vec::new();
            for x in inputs {
                let (_, trace) = reference::evaluate_traced(&model, &self.chip, x)?;
                positive.extend(trace.node_outputs[node].iter().copied().filter(|&v| v > 0.0));
            }
            if positive.is_empty() {
                continue;
            }
            positive.sort_by(f64::total_cmp);
            let p99 = positive[((positive.len() as f64 * 0.99).ceil() as usize).clamp(1, positive.len()) - 1];
            let shift = (p99 / (top + 1.0)).log2().ceil().max(0.0) as u32;
            self.layers[node].as_mut().expect("MAC node").shift = shift;
        }
        Ok(())
    }

    /// Real-valued forward pass with the same structure as the chip.
    pub fn forward_continuous(&self, x: &[f64]) -> Result<ForwardCache> {
        let g = &self.graph;
        if x.len() != g.input_len {
            return Err(Error::LengthMismatch { expected: g.input_len, actual: x.len() });
        }
        let slope = self.mac_slope();
        let n = g.len();
        let mut node_outputs: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut acts = vec![Vec::new(); n];
        for node in g.topo_order()? {
            let input = g.nodes[node].input.map_or(x, |p| &node_outputs[p]).to_vec();
            let out = match *g.layer(node) {
                Layer::Conv1d { kernel, stride, in_len, out_channels } => {
                    let l = self.layer(node);
                    let a = requant_continuous(&input, self.input_shift(node));
                    let positions = Layer::conv_positions(kernel, stride, in_len);
                    let mut out = vec![0.0; positions * out_channels];
                    for p in 0..positions {
                        for c in 0..out_channels {
                            let s: f64 = (0..kernel).map(|k| a[p * stride + k] * l.weights[k * l.cols + c] * l.scale).sum();
                            out[c * positions + p] = slope * s;
                        }
                    }
                    acts[node] = a;
                    out
                }
                Layer::Linear { in_features, out_features } => {
                    let l = self.layer(node);
                    let a = requant_continuous(&input, self.input_shift(node));
                    let mut out = vec![0.0; out_features];
                    for (i, &ai) in a.iter().enumerate().take(in_features) {
                        for (o, v) in out.iter_mut().enumerate() {
                            *v += ai * l.weights[i * out_features + o] * l.scale;
                        }
                    }
                    out.iter_mut().for_each(|v| *v *= slope);
                    acts[node] = a;
                    out
                }
                Layer::Relu => input.iter().map(|v| v.max(0.0)).collect(),
                Layer::AvgPool { group_size } => {
                    input.chunks(group_size).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
                }
                Layer::MaxPool { group_size } => {
                    input.chunks(group_size).map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
                }
                Layer::Argmax => vec![crate::graph::argmax(&input) as f64],
            };
            node_outputs[node] = out;
        }
        Ok(ForwardCache {
            precision: Precision::Continuous,
            input: x.to_vec(),
            node_outputs,
            clipped: vec![Vec::new(); n],
            acts,
        })
    }

    /// Gradients of the loss with respect to every real weight, given the
    /// loss gradient `grad_head` at the output of node `head`.
    ///
    /// Straight-through estimates: rounding passes gradient unchanged;
    /// clipped ADC conversions, saturated activations and weights beyond the
    /// integer range pass none.
    pub fn backward(&self, cache: &ForwardCache, head: usize, grad_head: &[f64]) -> Result<Gradients> {
        let g = &self.graph;
        if grad_head.len() != cache.node_outputs[head].len() {
            return Err(Error::LengthMismatch { expected: cache.node_outputs[head].len(), actual: grad_head.len() });
        }
        let order = g.topo_order()?;
        let pos = order.iter().position(|&n| n == head).ok_or_else(|| Error::Graph("unknown head node".into()))?;
        let quantized = cache.precision == Precision::Quantized;
        let slope = self.mac_slope();
        let max_w = f64::from(self.chip.max_weight());
        let act_top = f64::from(self.chip.max_activation()) + 1.0;
        let mut grads: Gradients = vec![None; g.len()];
        let mut grad = grad_head.to_vec();

        for &node in order[..=pos].iter().rev() {
            let input_vals: &[f64] = g.nodes[node].input.map_or(&cache.input, |p| &cache.node_outputs[p]);
            let layer = *g.layer(node);
            let mut grad_in = vec![0.0; input_vals.len()];
            match layer {
                Layer::Conv1d { .. } | Layer::Linear { .. } => {
                    let l = self.layer(node);
                    let w_eff: Vec<f64> = if quantized {
                        let q = l.quantized(max_w as i16);
                        q.values().iter().map(|&v| f64::from(v)).collect()
                    } else {
                        l.weights.iter().map(|w| w * l.scale).collect()
                    };
                    let a = &cache.acts[node];
                    let clipped = &cache.clipped[node];
                    let open = |slice: usize, out: usize| !quantized || clipped.is_empty() || !clipped[slice][out];
                    let mut gw = vec![0.0; l.weights.len()];
                    let mut ga = vec![0.0; a.len()];
                    match layer {
                        Layer::Conv1d { kernel, stride, in_len, out_channels } => {
                            let positions = Layer::conv_positions(kernel, stride, in_len);
                            for c in 0..out_channels {
                                for p in 0..positions {
                                    let o = c * positions + p;
                                    if !open(0, o) || grad[o] == 0.0 {
                                        continue;
                                    }
                                    let go = slope * grad[o];
                                    for k in 0..kernel {
                                        gw[k * l.cols + c] += go * a[p * stride + k];
                                        ga[p * stride + k] += go * w_eff[k * l.cols + c];
                                    }
                                }
                            }
                        }
                        Layer::Linear { in_features, out_features } => {
                            for i in 0..in_features {
                                let slice = i / self.slice_rows;
                                let row = i * out_features;
                                for o in 0..out_features {
                                    if grad[o] == 0.0 || !open(slice, o) {
                                        continue;
                                    }
                                    let go = slope * grad[o];
                                    gw[row + o] += go * a[i];
                                    ga[i] += go * w_eff[row + o];
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                    for (gwi, w) in gw.iter_mut().zip(&l.weights) {
                        let q = w * l.scale;
                        *gwi *= if quantized && q.abs() > max_w + 0.5 { 0.0 } else { l.scale };
                    }
                    grads[node] = Some(gw);
                    let div = f64::from(1u32 << self.input_shift(node));
                    for ((gi, &ga), &v) in grad_in.iter_mut().zip(&ga).zip(input_vals) {
                        let pass = !quantized || (v >= 0.0 && v < act_top * div);
                        if pass {
                            *gi = ga / div;
                        }
                    }
                }
                Layer::Relu => {
                    for ((gi, &go), &v) in grad_in.iter_mut().zip(&grad).zip(input_vals) {
                        if v > 0.0 {
                            *gi = go;
                        }
                    }
                }
                Layer::AvgPool { group_size } => {
                    for (i, gi) in grad_in.iter_mut().enumerate() {
                        *gi = grad[i / group_size] / group_size as f64;
                    }
                }
                Layer::MaxPool { group_size } => {
                    for (k, chunk) in input_vals.chunks(group_size).enumerate() {
                        let best = crate::graph::argmax(chunk);
                        grad_in[k * group_size + best] = grad[k];
                    }
                }
                Layer::Argmax => return Err(Error::Graph("cannot differentiate through argmax".into())),
            }
            grad = grad_in;
        }
        Ok(grads)
    }
}

fn requant_continuous(values: &[f64], shift: u32) -> Vec<f64> {
    let div = f64::from(1u32 << shift);
    values.iter().map(|v| v / div).collect()
}
