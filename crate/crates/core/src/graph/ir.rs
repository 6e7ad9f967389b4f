use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Single input channel; output is flattened channel-major (`c * out_len + p`).
    Conv1d { kernel: usize, stride: usize, in_len: usize, out_channels: usize },
    Linear { in_features: usize, out_features: usize },
    Relu,
    AvgPool { group_size: usize },
    MaxPool { group_size: usize },
    Argmax,
}

impl Layer {
    pub fn is_mac(&self) -> bool {
        matches!(self, Layer::Conv1d { .. } | Layer::Linear { .. })
    }

    /// Number of output positions of a convolution.
    pub fn conv_positions(kernel: usize, stride: usize, in_len: usize) -> usize {
        (in_len - kernel) / stride + 1
    }

    /// Output length for an input of length `input`, or why the shapes disagree.
    pub fn output_len(&self, input: usize) -> std::result::Result<usize, String> {
        match *self {
            Layer::Conv1d { kernel, stride, in_len, out_channels } => {
                if input != in_len {
                    return Err(format!("conv expects {in_len} inputs, got {input}"));
                }
                if kernel == 0 || stride == 0 || out_channels == 0 || kernel > in_len {
                    return Err(format!("degenerate conv (kernel {kernel}, stride {stride}, len {in_len})"));
                }
                Ok(out_channels * Self::conv_positions(kernel, stride, in_len))
            }
            Layer::Linear { in_features, out_features } => {
                if input != in_features {
                    return Err(format!("linear expects {in_features} inputs, got {input}"));
                }
                if in_features == 0 || out_features == 0 {
                    return Err("linear layer with an empty dimension".into());
                }
                Ok(out_features)
            }
            Layer::Relu => Ok(input),
            Layer::AvgPool { group_size } | Layer::MaxPool { group_size } => {
                if group_size == 0 || !input.is_multiple_of(group_size) {
                    return Err(format!("pool group {group_size} does not divide {input}"));
                }
                Ok(input / group_size)
            }
            Layer::Argmax => {
                if input == 0 {
                    return Err("argmax over an empty vector".into());
                }
                Ok(1)
            }
        }
    }

    /// Rows and columns of the weight matrix of a MAC layer.
    pub fn weight_shape(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Conv1d { kernel, out_channels, .. } => Some((kernel, out_channels)),
            Layer::Linear { in_features, out_features } => Some((in_features, out_features)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub layer: Layer,
    /// Producer of this node's input; `None` reads the graph input.
    pub input: Option<usize>,
}

/// A single-input, single-output chain of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub input_len: usize,
    pub nodes: Vec<Node>,
}

impl LayerGraph {
    pub fn new(input_len: usize) -> Self {
        Self { input_len, nodes: Vec::new() }
    }

    /// Each layer consumes the previous one's output.
    pub fn sequential(input_len: usize, layers: impl IntoIterator<Item = Layer>) -> Self {
        let mut g = Self::new(input_len);
        for layer in layers {
            g.push(layer);
        }
        g
    }

    /// Appends a layer fed by the last node and returns its id.
    pub fn push(&mut self, layer: Layer) -> usize {
        let input = self.nodes.len().checked_sub(1);
        self.nodes.push(Node { layer, input });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn layer(&self, node: usize) -> &Layer {
        &self.nodes[node].layer
    }

    /// Nodes from the one reading the graph input to the sink.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut consumer: Vec<Option<usize>> = vec![None; n];
        let mut source = None;
        for (id, node) in self.nodes.iter().enumerate() {
            match node.input {
                None => {
                    if source.replace(id).is_some() {
                        return Err(Error::Graph("more than one node reads the graph input".into()));
                    }
                }
                Some(p) if p >= n => return Err(Error::Graph(format!("node {id} reads unknown node {p}"))),
                Some(p) => {
                    if consumer[p].replace(id).is_some() {
                        return Err(Error::Graph(format!("node {p} feeds more than one consumer")));
                    }
                }
            }
        }
        let Some(mut cur) = source else {
            // Every node has a producer, so following producers must revisit one.
            let mut seen = vec![false; n];
            let mut at = 0;
            while !seen[at] {
                seen[at] = true;
                at = self.nodes[at].input.unwrap_or(at);
            }
            return Err(Error::Cycle(at));
        };
        let mut order = vec![cur];
        while let Some(next) = consumer[cur] {
            order.push(next);
            cur = next;
        }
        if order.len() != n {
            let stray = (0..n).find(|i| !order.contains(i)).unwrap_or(0);
            return Err(Error::Cycle(stray));
        }
        Ok(order)
    }

    /// Output length of every node, indexed by node id.
    pub fn shapes(&self) -> Result<Vec<usize>> {
        let order = self.topo_order()?;
        let mut lens = vec![0; self.nodes.len()];
        for (pos, &id) in order.iter().enumerate() {
            let node = &self.nodes[id];
            if node.layer == Layer::Argmax && pos + 1 != order.len() {
                return Err(Error::Graph("argmax must be the last layer".into()));
            }
            let input = node.input.map_or(self.input_len, |p| lens[p]);
            lens[id] = node
                .layer
                .output_len(input)
                .map_err(|msg| Error::Graph(format!("node {id}: {msg}")))?;
        }
        Ok(lens)
    }

    pub fn input_len_of(&self, node: usize, shapes: &[usize]) -> usize {
        self.nodes[node].input.map_or(self.input_len, |p| shapes[p])
    }

    /// MAC nodes in execution order.
    pub fn mac_nodes(&self) -> Result<Vec<usize>> {
        Ok(self.topo_order()?.into_iter().filter(|&n| self.nodes[n].layer.is_mac()).collect())
    }

    /// Nearest MAC node upstream of `node`'s input, if any.
    pub fn upstream_mac(&self, node: usize) -> Option<usize> {
        let mut cur = self.nodes[node].input;
        while let Some(id) = cur {
            if self.nodes[id].layer.is_mac() {
                return Some(id);
            }
            cur = self.nodes[id].input;
        }
        None
    }
}

/// The ECG classifier: one convolution and two linear layers, with the ten
/// output neurons averaged into two logical classes.
pub fn build_paper_model() -> LayerGraph {
    LayerGraph::sequential(
        432,
        [
            Layer::Conv1d { kernel: 91, stride: 11, in_len: 432, out_channels: 8 },
            Layer::Relu,
            Layer::Linear { in_features: 256, out_features: 123 },
            Layer::Relu,
            Layer::Linear { in_features: 123, out_features: 10 },
            Layer::AvgPool { group_size: 5 },
            Layer::Argmax,
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ecg_model_shapes() {
        let g = build_paper_model();
        let shapes = g.shapes().unwrap();
        // Enumerate window starts: s = 0, 11, ... while s + 91 <= 432.
        let windows = (0..).map(|k| k * 11).take_while(|s| s + 91 <= 432).count();
        assert_eq!(windows, 32);
        assert_eq!(Layer::conv_positions(91, 11, 432), windows);
        assert_eq!(shapes, vec![256, 256, 123, 123, 10, 2, 1]);
        assert_eq!(g.mac_nodes().unwrap(), vec![0, 2, 4]);
        assert_eq!(g.upstream_mac(2), Some(0));
        assert_eq!(g.upstream_mac(0), None);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let g = LayerGraph::sequential(
            10,
            [Layer::Linear { in_features: 10, out_features: 4 }, Layer::Linear { in_features: 5, out_features: 1 }],
        );
        assert!(matches!(g.shapes(), Err(Error::Graph(_))));
        let g = LayerGraph::sequential(10, [Layer::AvgPool { group_size: 3 }]);
        assert!(g.shapes().is_err());
        let g = LayerGraph::sequential(4, [Layer::Argmax, Layer::Relu]);
        assert!(g.shapes().is_err());
    }

    #[test]
    fn cycle_detected() {
        let mut g = LayerGraph::sequential(4, [Layer::Relu, Layer::Relu]);
        g.nodes[0].input = Some(1);
        assert!(matches!(g.topo_order(), Err(Error::Cycle(_))));

        // A detached loop next to a valid chain.
        let mut g = LayerGraph::sequential(4, [Layer::Relu, Layer::Relu, Layer::Relu]);
        g.nodes[2].input = Some(2);
        g.nodes[1].input = Some(0);
        assert!(matches!(g.topo_order(), Err(Error::Cycle(2))));
    }

    #[test]
    fn serde_uses_layer_kind_tags() {
        let json = serde_json::to_string(&Layer::AvgPool { group_size: 5 }).unwrap();
        assert_eq!(json, r#"{"kind":"avg_pool","group_size":5}"#);
    }
}
