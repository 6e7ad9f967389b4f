use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::build_paper_model;

fn small_chip() -> ChipConfig {
    ChipConfig { rows_per_array: 8, columns_per_array: 16, ..Default::default() }
}

fn continuous_loss(s: &Surrogate, x: &[f64], label: usize, mode: PoolMode) -> f64 {
    let readout = Readout::of(&s.graph).unwrap();
    let cache = s.forward_continuous(x).unwrap();
    readout.loss(&cache.node_outputs[readout.head], label, mode, 0.5).unwrap().0
}

/// Largest relative deviation between backward and central differences.
fn gradient_check(s: &Surrogate, x: &[f64], label: usize, mode: PoolMode) -> f64 {
    let readout = Readout::of(&s.graph).unwrap();
    let cache = s.forward_continuous(x).unwrap();
    let (_, g) = readout.loss(&cache.node_outputs[readout.head], label, mode, 0.5).unwrap();
    let grads = s.backward(&cache, readout.head, &g).unwrap();
    let mut worst: f64 = 0.0;
    for (node, layer) in s.layers.iter().enumerate() {
        let Some(layer) = layer else { continue };
        for i in 0..layer.weights.len() {
            let eps = 1e-6;
            let mut plus = s.clone();
            plus.layers[node].as_mut().unwrap().weights[i] += eps;
            let mut minus = s.clone();
            minus.layers[node].as_mut().unwrap().weights[i] -= eps;
            let numeric = (continuous_loss(&plus, x, label, mode) - continuous_loss(&minus, x, label, mode)) / (2.0 * eps);
            let analytic = grads[node].as_ref().unwrap()[i];
            let denom = analytic.abs().max(numeric.abs());
            if denom > 1e-9 {
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_on_every_layer_type() {
    let g = LayerGraph::sequential(
        9,
        [
            Layer::Conv1d { kernel: 3, stride: 2, in_len: 9, out_channels: 2 },
            Layer::MaxPool { group_size: 2 },
            Layer::Relu,
            Layer::Linear { in_features: 4, out_features: 6 },
            Layer::AvgPool { group_size: 3 },
            Layer::Argmax,
        ],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..5 {
        let s = Surrogate::init(g.clone(), small_chip(), seed, 1.0).unwrap();
        let x: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..31.0)).collect();
        assert!(gradient_check(&s, &x, (seed % 2) as usize, PoolMode::Mean) <= 1e-4);
        assert!(gradient_check(&s, &x, (seed % 2) as usize, PoolMode::Max) <= 1e-4);
    }

    // Multi-slice linear layer (four signed rows per array, ten inputs).
    let g = LayerGraph::sequential(
        10,
        [Layer::Linear { in_features: 10, out_features: 4 }, Layer::Relu, Layer::Linear { in_features: 4, out_features: 2 }],
    );
    let s = Surrogate::init(g, small_chip(), 3, 1.0).unwrap();
    let x: Vec<f64> = (0..10).map(|i| (i * 3 % 31) as f64).collect();
    assert!(gradient_check(&s, &x, 1, PoolMode::Mean) <= 1e-4);
}

#[test]
fn equal_logits_push_the_true_class_up() {
    let r = Readout { head: 0, group: 5 };
    let (loss, grad) = r.loss(&[0.0; 10], 0, PoolMode::Mean, 0.125).unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-12);
    assert!(grad[..5].iter().all(|&g| g < 0.0));
    assert!(grad[5..].iter().all(|&g| g > 0.0));
}

#[test]
fn zero_network_ties_to_class_zero() {
    let cfg = ChipConfig::default();
    let model = QuantizedModel::zeros(build_paper_model(), &cfg).unwrap();
    let mut b = Backend::mock(cfg);
    b.deploy(&model).unwrap();
    let inf = b.infer(&ActivationVector::new(vec![17; 432])).unwrap();
    assert_eq!(inf.scores[0], inf.scores[1]);
    assert_eq!(inf.label, 0);
    assert!(matches!(Backend::mock(ChipConfig::default()).infer(&ActivationVector::zeros(432)), Err(Error::NotDeployed)));
}

#[test]
fn clipped_conversions_pass_no_gradient() {
    let cfg = ChipConfig::default();
    let g = LayerGraph::sequential(4, [Layer::Linear { in_features: 4, out_features: 2 }]);
    let mut s = Surrogate::init(g, cfg.clone(), 1, 1.0).unwrap();
    // Every weight at the top of the range, every input at full scale:
    // 4 * 31 * 63 * gain exceeds the positive ADC range.
    s.layers[0].as_mut().unwrap().weights.iter_mut().for_each(|w| *w = 100.0);
    let model = s.quantize().unwrap();
    let x = ActivationVector::new(vec![31; 4]);
    let (_, trace) = reference::evaluate_traced(&model, &ChipConfig { mac_gain: 1.0, ..cfg.clone() }, &x).unwrap();
    assert!(trace.macs[0].clipped[0].iter().all(|&c| c));
    let cache = ForwardCache::from_trace(&trace, &x);
    let grads = s.backward(&cache, 0, &[1.0, -1.0]).unwrap();
    assert!(grads[0].as_ref().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn weights_beyond_the_range_pass_no_gradient() {
    let cfg = ChipConfig::default();
    let g = LayerGraph::sequential(2, [Layer::Linear { in_features: 2, out_features: 1 }]);
    let mut s = Surrogate::init(g, cfg, 1, 1.0).unwrap();
    let l = s.layers[0].as_mut().unwrap();
    l.weights = vec![1000.0 / l.scale, 1.0 / l.scale];
    let model = s.quantize().unwrap();
    assert_eq!(model.weights(0).values(), &[63, 1]);
    let x = ActivationVector::new(vec![1, 1]);
    let (_, trace) = reference::evaluate_traced(&model, &s.chip, &x).unwrap();
    let grads = s.backward(&ForwardCache::from_trace(&trace, &x), 0, &[1.0]).unwrap();
    let gw = grads[0].as_ref().unwrap();
    assert_eq!(gw[0], 0.0);
    assert!(gw[1] > 0.0);
}

#[test]
fn quantize_load_readback_round_trip() {
    let cfg = ChipConfig::default();
    let s = Surrogate::init(build_paper_model(), cfg.clone(), 4, 1.0).unwrap();
    let model = s.quantize().unwrap();
    let mut b = Backend::chip(cfg, NoiseModel::default(), 1);
    b.deploy(&model).unwrap();
    let Backend::Chip { runtime: Some(rt), .. } = &b else { panic!("not deployed") };
    let chip = &rt.chips()[0];
    for p in &rt.stream().placements {
        let w = model.weights(p.node);
        for k in 0..p.signed_rows {
            let (row, _) = p.slot(k, rt.stream().signed_rows);
            for c in 0..p.cols {
                let col = p.col_offset + c;
                let v = i16::from(chip.physical_weight(p.array, 2 * row, col))
                    - i16::from(chip.physical_weight(p.array, 2 * row + 1, col));
                assert_eq!(v, w.get(p.weight_row + k, p.weight_col + c));
            }
        }
    }
}

#[test]
fn mock_and_noise_free_chip_agree() {
    let cfg = ChipConfig::default();
    let s = Surrogate::init(build_paper_model(), cfg.clone(), 8, 0.5).unwrap();
    let model = s.quantize().unwrap();
    let mut mock = Backend::mock(cfg.clone());
    let mut chip = Backend::chip(cfg, NoiseModel::off(), 2);
    mock.deploy(&model).unwrap();
    chip.deploy(&model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x = ActivationVector::new((0..432).map(|_| rng.gen_range(0..32)).collect());
        assert_eq!(mock.forward(&x).unwrap(), chip.forward(&x).unwrap());
    }
}

fn separable(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::default();
    for i in 0..n {
        let label = (i % 2) as u8;
        let v: Vec<u8> = (0..16)
            .map(|f| {
                let hot = (f < 8) == (label == 1);
                if hot { rng.gen_range(16..32) } else { rng.gen_range(0..8) }
            })
            .collect();
        ds.ids.push(format!("s{i}"));
        ds.inputs.push(ActivationVector::new(v));
        ds.labels.push(label);
    }
    ds
}

fn toy_graph() -> LayerGraph {
    LayerGraph::sequential(
        16,
        [Layer::Linear { in_features: 16, out_features: 10 }, Layer::AvgPool { group_size: 5 }, Layer::Argmax],
    )
}

#[test]
fn separable_set_is_learned_in_mock_mode() {
    let cfg = TrainConfig {
        mock_mode: true,
        epochs: 20,
        learning_rate: 1e-2,
        logit_scale: 0.03,
        seed: 2,
        ..Default::default()
    };
    let out = train(toy_graph(), &separable(400, 1), &separable(200, 2), &cfg, &ChipConfig::default(), &NoiseModel::off())
        .unwrap();
    let m = out.final_metrics().unwrap();
    assert!(m.afib_detection_rate() >= 0.99 && m.false_positive_rate() <= 0.01, "{m:?}");
}

#[test]
fn mock_training_is_deterministic() {
    let cfg = TrainConfig { mock_mode: true, epochs: 2, seed: 5, ..Default::default() };
    let run = || {
        train(toy_graph(), &separable(100, 1), &separable(50, 2), &cfg, &ChipConfig::default(), &NoiseModel::off())
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.surrogate, b.surrogate);
    assert_eq!(a.history, b.history);
}

#[test]
fn plateau_triggers_early_stop() {
    let cfg = TrainConfig { mock_mode: true, epochs: 50, learning_rate: 1e-12, patience: 3, ..Default::default() };
    let out = train(toy_graph(), &separable(64, 1), &separable(32, 2), &cfg, &ChipConfig::default(), &NoiseModel::off())
        .unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.history.len(), 4);
}

#[test]
fn split_is_disjoint_and_needs_both_classes() {
    let labels: Vec<Option<u8>> = (0..100).map(|i| Some((i % 3 == 0) as u8)).collect();
    let (tr, te) = split_indices(&labels, 30, 1).unwrap();
    assert_eq!(te.len(), 30);
    assert_eq!(tr.len(), 70);
    assert!(tr.iter().all(|i| !te.contains(i)));
    assert!(matches!(split_indices(&[Some(0); 10], 3, 1), Err(Error::EmptyClass(_))));
    assert!(matches!(split_indices(&[Some(0), None, Some(1)], 1, 1), Err(Error::Unlabeled(_))));
    let only_sinus = Dataset { labels: vec![0, 0], ..separable(2, 0) };
    let cfg = TrainConfig { mock_mode: true, ..Default::default() };
    assert!(matches!(
        train(toy_graph(), &only_sinus, &separable(4, 0), &cfg, &ChipConfig::default(), &NoiseModel::off()),
        Err(Error::EmptyClass(1))
    ));
}
