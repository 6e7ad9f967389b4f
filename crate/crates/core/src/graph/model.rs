use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ir::{Layer, LayerGraph};
use crate::analog::{ChipConfig, SignedWeightMatrix};
use crate::error::{Error, Result};
use crate::preprocess::PreprocConfig;

pub const CHECKPOINT_FORMAT: &str = "bss2-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Integer parameters of one MAC layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacParams {
    /// `kernel x out_channels` for a convolution, `in x out` for a linear layer.
    pub weights: SignedWeightMatrix,
    /// Right shift turning this layer's summed ADC values into next-layer activations.
    pub shift: u32,
}

/// A layer graph with deployable integer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub graph: LayerGraph,
    /// Indexed by node id; `Some` exactly for MAC nodes.
    pub params: Vec<Option<MacParams>>,
    /// Input elements accumulated per ADC conversion. Wider layers are summed
    /// digitally from several conversions, so this is part of the arithmetic.
    pub slice_rows: usize,
}

impl QuantizedModel {
    pub fn new(graph: LayerGraph, params: Vec<Option<MacParams>>, slice_rows: usize) -> Result<Self> {
        graph.shapes()?;
        if params.len() != graph.len() {
            return Err(Error::LengthMismatch { expected: graph.len(), actual: params.len() });
        }
        if slice_rows == 0 {
            return Err(Error::Config("slice_rows must be positive".into()));
        }
        for (id, (node, p)) in graph.nodes.iter().zip(&params).enumerate() {
            match (node.layer.weight_shape(), p) {
                (Some((rows, cols)), Some(p)) => {
                    if p.weights.rows() != rows || p.weights.cols() != cols {
                        return Err(Error::Graph(format!(
                            "node {id}: weights are {}x{}, layer needs {rows}x{cols}",
                            p.weights.rows(),
                            p.weights.cols()
                        )));
                    }
                }
                (None, None) => {}
                (Some(_), None) => return Err(Error::Graph(format!("node {id}: missing weights"))),
                (None, Some(_)) => return Err(Error::Graph(format!("node {id}: weights on a non-MAC layer"))),
            }
        }
        Ok(Self { graph, params, slice_rows })
    }

    /// All-zero weights with default shifts for `cfg`.
    pub fn zeros(graph: LayerGraph, cfg: &ChipConfig) -> Result<Self> {
        Self::with_weights(graph, cfg, |_, _, _| 0)
    }

    /// Uniform random weights over the full signed range.
    pub fn random(graph: LayerGraph, cfg: &ChipConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max = cfg.max_weight() as i16;
        Self::with_weights(graph, cfg, |_, _, _| rng.gen_range(-max..=max))
    }

    /// Weights from `f(node, row, col)`, default shifts for `cfg`.
    pub fn with_weights(
        graph: LayerGraph,
        cfg: &ChipConfig,
        mut f: impl FnMut(usize, usize, usize) -> i16,
    ) -> Result<Self> {
        let slice_rows = cfg.signed_rows();
        let params = graph
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                node.layer.weight_shape().map(|(rows, cols)| MacParams {
                    weights: SignedWeightMatrix::from_fn(rows, cols, |r, c| f(id, r, c)),
                    shift: default_shift(&node.layer, slice_rows, cfg),
                })
            })
            .collect();
        Self::new(graph, params, slice_rows)
    }

    pub fn mac(&self, node: usize) -> Option<&MacParams> {
        self.params.get(node).and_then(Option::as_ref)
    }

    pub fn weights(&self, node: usize) -> &SignedWeightMatrix {
        &self.mac(node).expect("not a MAC node").weights
    }

    pub fn shift(&self, node: usize) -> u32 {
        self.mac(node).map_or(0, |p| p.shift)
    }

    /// Shift applied to the values feeding `node`.
    pub fn input_shift(&self, node: usize) -> u32 {
        self.graph.upstream_mac(node).map_or(0, |m| self.shift(m))
    }

    /// Number of ADC conversions summed per output of a MAC layer.
    pub fn n_slices(&self, node: usize) -> usize {
        slices_for(self.graph.layer(node), self.slice_rows)
    }

    /// The model can only run on chips whose signed row count matches its slicing.
    pub fn check_geometry(&self, cfg: &ChipConfig) -> Result<()> {
        if cfg.signed_rows() != self.slice_rows {
            return Err(Error::Config(format!(
                "model accumulates {} inputs per conversion, chip arrays have {} signed rows",
                self.slice_rows,
                cfg.signed_rows()
            )));
        }
        for p in self.params.iter().flatten() {
            p.weights.check_range(cfg.weight_bits)?;
        }
        Ok(())
    }
}

pub(crate) fn slices_for(layer: &Layer, slice_rows: usize) -> usize {
    match *layer {
        Layer::Linear { in_features, .. } => in_features.div_ceil(slice_rows),
        Layer::Conv1d { .. } => 1,
        _ => 0,
    }
}

/// Shift mapping the largest positive summed ADC value onto the activation range.
pub fn default_shift(layer: &Layer, slice_rows: usize, cfg: &ChipConfig) -> u32 {
    let slices = slices_for(layer, slice_rows).max(1) as u64;
    let positive_codes = u64::from(cfg.max_code() + 1) / 2;
    let levels = u64::from(cfg.max_activation()) + 1;
    let ratio = (slices * positive_codes).div_ceil(levels).max(1);
    ratio.next_power_of_two().trailing_zeros()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointLayer {
    #[serde(flatten)]
    layer: Layer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shift: Option<u32>,
    /// Row-major, same layout as [`MacParams::weights`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<i16>>,
}

/// Versioned on-disk container for a deployable model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_len: usize,
    pub slice_rows: usize,
    layers: Vec<CheckpointLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preproc: Option<PreprocConfig>,
}

impl Checkpoint {
    pub fn from_model(model: &QuantizedModel, preproc: Option<PreprocConfig>) -> Result<Self> {
        let order = model.graph.topo_order()?;
        let layers = order
            .iter()
            .map(|&id| CheckpointLayer {
                layer: *model.graph.layer(id),
                shift: model.mac(id).map(|p| p.shift),
                weights: model.mac(id).map(|p| p.weights.values().to_vec()),
            })
            .collect();
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_len: model.graph.input_len,
            slice_rows: model.slice_rows,
            layers,
            preproc,
        })
    }

    pub fn to_model(&self) -> Result<QuantizedModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let graph = LayerGraph::sequential(self.input_len, self.layers.iter().map(|l| l.layer));
        let params = self
            .layers
            .iter()
            .map(|l| match (l.layer.weight_shape(), &l.weights) {
                (Some((rows, cols)), Some(w)) => Ok(Some(MacParams {
                    weights: SignedWeightMatrix::new(rows, cols, w.clone())?,
                    shift: l.shift.unwrap_or(0),
                })),
                (Some(_), None) => Err(Error::Checkpoint("MAC layer without weights".into())),
                (None, _) => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        QuantizedModel::new(graph, params, self.slice_rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}
