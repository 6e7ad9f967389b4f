use std::collections::HashMap;

use super::lower::{DigitalOp, Instruction, InstructionStream};
use super::model::QuantizedModel;
use crate::analog::{digitize, ActivationVector, AdcConfig, AdcMode, ChipConfig, ChipState, Event, NoiseModel};
use crate::error::{Error, Result};

/// Result of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Values entering the final argmax (or the final buffer if there is none).
    pub scores: Vec<f64>,
    pub label: usize,
    pub output: Vec<f64>,
}

/// What one MAC layer saw and produced during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MacTrace {
    pub node: usize,
    /// Activations sent to the arrays.
    pub input: Vec<u8>,
    /// Summed signed ADC values, one per layer output.
    pub output: Vec<f64>,
    /// `clipped[slice][out]`: the conversion hit the lowest or highest code.
    pub clipped: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// In execution order.
    pub macs: Vec<MacTrace>,
    /// Output of every graph node, indexed by node id.
    pub node_outputs: Vec<Vec<f64>>,
}

impl Trace {
    pub fn mac(&self, node: usize) -> Option<&MacTrace> {
        self.macs.iter().find(|m| m.node == node)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Next-layer activation from a summed signed ADC value.
pub fn requantize(value: f64, shift: u32, max_activation: u32) -> u8 {
    let q = (value / f64::from(1u32 << shift)).floor();
    q.clamp(0.0, f64::from(max_activation)) as u8
}

pub(crate) fn finish(output: Vec<f64>, node_outputs: &[Vec<f64>], model: &QuantizedModel) -> Result<Inference> {
    let order = model.graph.topo_order()?;
    let last = order.last().copied();
    match last.map(|n| (n, model.graph.nodes[n].input)) {
        Some((n, input)) if *model.graph.layer(n) == super::Layer::Argmax => {
            let scores = input.map_or_else(Vec::new, |p| node_outputs[p].clone());
            Ok(Inference { label: output[0] as usize, scores, output })
        }
        _ => Ok(Inference { label: argmax(&output), scores: output.clone(), output }),
    }
}

pub(crate) fn apply_digital(op: &DigitalOp, buffers: &mut [Vec<f64>]) -> Result<()> {
    match op {
        DigitalOp::Relu { src, dst } => {
            buffers[*dst] = buffers[*src].iter().map(|v| v.max(0.0)).collect();
        }
        DigitalOp::AvgPool { src, dst, group } => {
            buffers[*dst] =
                buffers[*src].chunks(*group).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        }
        DigitalOp::MaxPool { src, dst, group } => {
            buffers[*dst] = buffers[*src]
                .chunks(*group)
                .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
        }
        DigitalOp::Argmax { src, dst } => {
            buffers[*dst] = vec![argmax(&buffers[*src]) as f64];
        }
        DigitalOp::PartialSum { srcs, dst } => {
            let len = buffers[*dst].len();
            let mut acc = vec![0.0; len];
            for &s in srcs {
                if buffers[s].len() != len {
                    return Err(Error::LengthMismatch { expected: len, actual: buffers[s].len() });
                }
                for (a, v) in acc.iter_mut().zip(&buffers[s]) {
                    *a += v;
                }
            }
            buffers[*dst] = acc;
        }
    }
    Ok(())
}

/// Executes an instruction stream on a set of virtual chips.
#[derive(Debug, Clone)]
pub struct Runtime {
    stream: InstructionStream,
    model: QuantizedModel,
    chips: Vec<ChipState>,
    loaded: Vec<bool>,
    adc: AdcConfig,
    zero_code: f64,
}

impl Runtime {
    /// Creates one chip per chip index used by the stream. Chip `i` draws its
    /// fixed pattern from `noise.seed + i`.
    pub fn new(stream: InstructionStream, model: QuantizedModel, cfg: &ChipConfig, noise: &NoiseModel) -> Result<Self> {
        let n = stream.placements.iter().map(|p| p.chip + 1).max().unwrap_or(1);
        let chips = (0..n)
            .map(|i| ChipState::new(cfg.clone(), noise.clone().with_seed(noise.seed.wrapping_add(i as u64))))
            .collect::<Result<Vec<_>>>()?;
        Self::with_chips(stream, model, chips)
    }

    pub fn with_chips(stream: InstructionStream, model: QuantizedModel, chips: Vec<ChipState>) -> Result<Self> {
        stream.validate()?;
        let cfg = chips.first().ok_or_else(|| Error::InsufficientHardware("no chips".into()))?.config().clone();
        model.check_geometry(&cfg)?;
        if stream.signed_rows != cfg.signed_rows() {
            return Err(Error::Config("stream was lowered for another array geometry".into()));
        }
        for p in &stream.placements {
            if p.chip >= chips.len() || p.array >= cfg.arrays_per_chip {
                return Err(Error::InsufficientHardware(format!(
                    "placement {} needs chip {} array {}",
                    p.id, p.chip, p.array
                )));
            }
        }
        let adc = cfg.adc(AdcMode::SignedLinear);
        let zero_code = f64::from(digitize(cfg.reset_level, &adc));
        let loaded = vec![false; stream.placements.len()];
        Ok(Self { stream, model, chips, loaded, adc, zero_code })
    }

    pub fn stream(&self) -> &InstructionStream {
        &self.stream
    }

    pub fn model(&self) -> &QuantizedModel {
        &self.model
    }

    pub fn chips(&self) -> &[ChipState] {
        &self.chips
    }

    pub fn is_deployed(&self) -> bool {
        self.loaded.iter().all(|&l| l)
    }

    /// Runs the stream's weight loads.
    pub fn deploy(&mut self) -> Result<()> {
        let ids: Vec<usize> = self.stream.instructions[..self.stream.record_start()]
            .iter()
            .filter_map(|ins| match *ins {
                Instruction::LoadWeights { placement } => Some(placement),
                _ => None,
            })
            .collect();
        for id in ids {
            self.load_placement(id)?;
        }
        Ok(())
    }

    /// Swaps in new weights for the same graph and reloads every placement.
    pub fn update_model(&mut self, model: QuantizedModel) -> Result<()> {
        if model.graph != self.model.graph || model.slice_rows != self.model.slice_rows {
            return Err(Error::Graph("updated model has a different graph".into()));
        }
        self.model = model;
        self.loaded.fill(false);
        self.deploy()
    }

    fn load_placement(&mut self, id: usize) -> Result<()> {
        let p = &self.stream.placements[id];
        let w = self
            .model
            .weights(p.node)
            .row_slice(p.weight_row, p.weight_row + p.signed_rows)
            .col_slice(p.weight_col, p.weight_col + p.cols);
        let chip = &mut self.chips[p.chip];
        for (local, row, label, rows) in p.segments(self.stream.signed_rows) {
            chip.load_weights_labeled(p.array, &w.row_slice(local, local + rows), row, p.col_offset, label)?;
        }
        self.loaded[id] = true;
        Ok(())
    }

    pub fn run(&mut self, x: &ActivationVector) -> Result<Inference> {
        self.execute(x, false).map(|(inf, _)| inf)
    }

    pub fn run_traced(&mut self, x: &ActivationVector) -> Result<(Inference, Trace)> {
        let (inf, trace) = self.execute(x, true)?;
        Ok((inf, trace.expect("traced run")))
    }

    fn execute(&mut self, x: &ActivationVector, traced: bool) -> Result<(Inference, Option<Trace>)> {
        let cfg = self.chips[0].config().clone();
        let max_act = cfg.max_activation();
        let max_code = cfg.max_code();
        let stream = &self.stream;
        let mut buffers: Vec<Vec<f64>> = stream.buffers.iter().map(|&n| vec![0.0; n]).collect();
        let mut inputs: HashMap<usize, Vec<u8>> = HashMap::new();
        let mut clipped: HashMap<usize, Vec<Vec<bool>>> = HashMap::new();
        let mut result = None;

        for ins in &stream.instructions[stream.record_start()..] {
            match ins {
                Instruction::LoadWeights { placement } => {
                    return Err(Error::Stream(format!("weight load of placement {placement} during a record")));
                }
                Instruction::LoadInput { dst } => {
                    if x.len() != buffers[*dst].len() {
                        return Err(Error::LengthMismatch { expected: buffers[*dst].len(), actual: x.len() });
                    }
                    x.check_range(cfg.activation_bits)?;
                    buffers[*dst] = x.values().iter().map(|&v| f64::from(v)).collect();
                }
                Instruction::ResetNeurons { chip, array } => self.chips[*chip].reset_array(*array)?,
                Instruction::SendVector { chip, array, src, lookup } => {
                    let lut = &stream.lookups[*lookup];
                    let shift = self.model.input_shift(lut.node);
                    let acts: Vec<u8> = buffers[*src].iter().map(|&v| requantize(v, shift, max_act)).collect();
                    let events: Vec<Event> = lut
                        .entries
                        .iter()
                        .map(|e| Event { row: e.row, label: e.label, value: acts[e.element] })
                        .collect();
                    self.chips[*chip].send_events(*array, &events)?;
                    if traced {
                        inputs.entry(lut.node).or_insert(acts);
                    }
                }
                Instruction::ReadAdc { chip, array, targets } => {
                    let codes = self.chips[*chip].read_adc(*array, &self.adc)?;
                    for t in targets {
                        if !self.loaded[t.placement] {
                            return Err(Error::UnloadedPlacement(t.placement));
                        }
                        let p = &stream.placements[t.placement];
                        let out_len = buffers[t.dst].len();
                        for c in 0..p.cols {
                            let code = codes[p.col_offset + c];
                            let o = p.output_index(c);
                            buffers[t.dst][o] = f64::from(code) - self.zero_code;
                            if traced {
                                let slices = self.model.n_slices(p.node);
                                let mask = clipped.entry(p.node).or_insert_with(|| vec![vec![false; out_len]; slices]);
                                mask[p.slice][o] = code == 0 || code == max_code;
                            }
                        }
                    }
                }
                Instruction::Digital(op) => apply_digital(op, &mut buffers)?,
                Instruction::StoreResult { src } => result = Some(buffers[*src].clone()),
            }
        }
        let output = result.ok_or_else(|| Error::Stream("stream stores no result".into()))?;
        let node_outputs: Vec<Vec<f64>> = stream.node_buffers.iter().map(|&b| buffers[b].clone()).collect();
        let inference = finish(output, &node_outputs, &self.model)?;
        if !traced {
            return Ok((inference, None));
        }
        let macs = self
            .model
            .graph
            .mac_nodes()?
            .into_iter()
            .map(|node| MacTrace {
                node,
                input: inputs.remove(&node).unwrap_or_default(),
                output: node_outputs[node].clone(),
                clipped: clipped.remove(&node).unwrap_or_default(),
            })
            .collect();
        Ok((inference, Some(Trace { macs, node_outputs })))
    }
}

/// Deploys `stream` onto fresh chips and runs one input.
pub fn execute(
    stream: &InstructionStream,
    model: &QuantizedModel,
    cfg: &ChipConfig,
    noise: &NoiseModel,
    x: &ActivationVector,
) -> Result<Inference> {
    let mut rt = Runtime::new(stream.clone(), model.clone(), cfg, noise)?;
    rt.deploy()?;
    rt.run(x)
}
