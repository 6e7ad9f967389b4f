//! Monolithic integer evaluation of a quantized model, without partitioning.
//!
//! Matches a noise-free chip bit for bit: every ADC slice of `slice_rows`
//! inputs is digitized on its own and the slices are summed afterwards.

use super::exec::{apply_digital, finish, requantize, Inference, MacTrace, Trace};
use super::ir::Layer;
use super::lower::DigitalOp;
use super::model::QuantizedModel;
use crate::analog::{digitize, ActivationVector, AdcConfig, AdcMode, ChipConfig};
use crate::error::{Error, Result};

/// ADC code of a noise-free neuron whose integer dot product is `sum`.
pub fn noise_free_code(sum: i64, cfg: &ChipConfig, adc: &AdcConfig) -> u32 {
    let limit = cfg.membrane_limit();
    let mut v = cfg.reset_level;
    v += cfg.mac_gain * sum as f64;
    v = v.clamp(cfg.reset_level - limit, cfg.reset_level + limit);
    digitize(v + 0.0, adc)
}

pub fn evaluate(model: &QuantizedModel, cfg: &ChipConfig, x: &ActivationVector) -> Result<Inference> {
    evaluate_traced(model, cfg, x).map(|(inf, _)| inf)
}

pub fn evaluate_traced(model: &QuantizedModel, cfg: &ChipConfig, x: &ActivationVector) -> Result<(Inference, Trace)> {
    let g = &model.graph;
    if x.len() != g.input_len {
        return Err(Error::LengthMismatch { expected: g.input_len, actual: x.len() });
    }
    x.check_range(cfg.activation_bits)?;
    let order = g.topo_order()?;
    let adc = cfg.adc(AdcMode::SignedLinear);
    let zero = i64::from(digitize(cfg.reset_level, &adc));
    let max_code = cfg.max_code();
    let max_act = cfg.max_activation();
    let r = model.slice_rows;

    // Buffer 0 is the input, node `n` writes buffer `n + 1`.
    let mut buffers: Vec<Vec<f64>> = vec![Vec::new(); g.len() + 1];
    buffers[0] = x.values().iter().map(|&v| f64::from(v)).collect();
    let mut macs = Vec::new();

    for &node in &order {
        let src = g.nodes[node].input.map_or(0, |p| p + 1);
        let dst = node + 1;
        match *g.layer(node) {
            Layer::Conv1d { kernel, stride, in_len, out_channels } => {
                let w = model.weights(node);
                let acts = activations(&buffers[src], model.input_shift(node), max_act);
                let positions = Layer::conv_positions(kernel, stride, in_len);
                let mut out = vec![0.0; positions * out_channels];
                let mut clipped = vec![vec![false; out.len()]];
                for p in 0..positions {
                    let window = &acts[p * stride..p * stride + kernel];
                    for c in 0..out_channels {
                        let sum: i64 =
                            window.iter().enumerate().map(|(k, &a)| i64::from(a) * i64::from(w.get(k, c))).sum();
                        let code = noise_free_code(sum, cfg, &adc);
                        out[c * positions + p] = (i64::from(code) - zero) as f64;
                        clipped[0][c * positions + p] = code == 0 || code == max_code;
                    }
                }
                buffers[dst] = out.clone();
                macs.push(MacTrace { node, input: acts, output: out, clipped });
            }
            Layer::Linear { in_features, out_features } => {
                let w = model.weights(node);
                let acts = activations(&buffers[src], model.input_shift(node), max_act);
                let slices = in_features.div_ceil(r);
                let mut out = vec![0.0; out_features];
                let mut clipped = vec![vec![false; out_features]; slices];
                for (s, mask) in clipped.iter_mut().enumerate() {
                    let rows = s * r..((s + 1) * r).min(in_features);
                    for (o, (acc, m)) in out.iter_mut().zip(mask.iter_mut()).enumerate() {
                        let sum: i64 = rows.clone().map(|i| i64::from(acts[i]) * i64::from(w.get(i, o))).sum();
                        let code = noise_free_code(sum, cfg, &adc);
                        *acc += (i64::from(code) - zero) as f64;
                        *m = code == 0 || code == max_code;
                    }
                }
                buffers[dst] = out.clone();
                macs.push(MacTrace { node, input: acts, output: out, clipped });
            }
            Layer::Relu => apply_digital(&DigitalOp::Relu { src, dst }, &mut buffers)?,
            Layer::AvgPool { group_size } => {
                buffers[dst] = vec![0.0; buffers[src].len() / group_size];
                apply_digital(&DigitalOp::AvgPool { src, dst, group: group_size }, &mut buffers)?
            }
            Layer::MaxPool { group_size } => {
                apply_digital(&DigitalOp::MaxPool { src, dst, group: group_size }, &mut buffers)?
            }
            Layer::Argmax => apply_digital(&DigitalOp::Argmax { src, dst }, &mut buffers)?,
        }
    }
    let node_outputs: Vec<Vec<f64>> = buffers[1..].to_vec();
    let output = order.last().map_or_else(|| buffers[0].clone(), |&n| node_outputs[n].clone());
    let inference = finish(output, &node_outputs, model)?;
    Ok((inference, Trace { macs, node_outputs }))
}

fn activations(values: &[f64], shift: u32, max_act: u32) -> Vec<u8> {
    values.iter().map(|&v| requantize(v, shift, max_act)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analog::NoiseModel;
    use crate::graph::{build_paper_model, execute, lower, partition, Runtime};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stream_matches_reference_on_ecg_model() {
        let cfg = ChipConfig::default();
        let g = build_paper_model();
        let model = QuantizedModel::random(g.clone(), &cfg, 11).unwrap();
        let stream = lower(&partition(&g, &cfg, 1).unwrap(), &g).unwrap();
        let mut rt = Runtime::new(stream, model.clone(), &cfg, &NoiseModel::off()).unwrap();
        rt.deploy().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = ActivationVector::new((0..432).map(|_| rng.gen_range(0..32)).collect());
            let (a, ta) = rt.run_traced(&x).unwrap();
            let (b, tb) = evaluate_traced(&model, &cfg, &x).unwrap();
            assert_eq!(a, b);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn slices_digitize_separately() {
        // 200 inputs at weight 63 overflow one conversion but not two halves.
        let cfg = ChipConfig::default();
        let g = crate::graph::LayerGraph::sequential(200, [Layer::Linear { in_features: 200, out_features: 1 }]);
        let model = QuantizedModel::with_weights(g.clone(), &cfg, |_, _, _| 63).unwrap();
        let x = ActivationVector::new(vec![31; 200]);
        let (inf, trace) = evaluate_traced(&model, &cfg, &x).unwrap();
        assert_eq!(trace.macs[0].clipped.len(), 2);
        let stream = lower(&partition(&g, &cfg, 1).unwrap(), &g).unwrap();
        assert_eq!(execute(&stream, &model, &cfg, &NoiseModel::off(), &x).unwrap(), inf);
    }
}
