use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ir::{Layer, LayerGraph};
use crate::analog::ChipConfig;
use crate::error::{Error, Result};

/// How chunks are assigned to arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Packing {
    /// Every chunk goes to the lowest-indexed array with room.
    #[default]
    FirstFit,
    /// MAC layer `k` starts its search on chip `k mod n_chips`.
    Spread,
}

/// One chunk of a MAC layer mapped onto a rectangle of an array.
///
/// Input element `e` of a layer lives on signed row `e mod R` with address label
/// `base + e / R`, where `R` is the number of signed rows and `base` the first
/// label the layer owns on that array. A chunk therefore wraps to row 0 (with
/// the next label) when it runs past the last row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub id: usize,
    pub node: usize,
    pub chip: usize,
    pub array: usize,
    /// Signed row of the chunk's first input element.
    pub row_offset: usize,
    pub col_offset: usize,
    pub signed_rows: usize,
    pub cols: usize,
    /// Address label of the chunk's first input element.
    pub label: u8,
    /// Index of the first input element in the layer input.
    pub input_offset: usize,
    /// First row and column of the layer's weight matrix held by this chunk.
    pub weight_row: usize,
    pub weight_col: usize,
    /// Column `c` produces layer output `out_offset + c * out_stride`.
    pub out_offset: usize,
    pub out_stride: usize,
    /// Which ADC slice of the layer this chunk contributes to.
    pub slice: usize,
    /// Copy number for weight-shared chunks (convolution positions).
    pub replication_index: usize,
}

impl Placement {
    /// Signed row and label receiving local input `k`.
    pub fn slot(&self, k: usize, signed_rows_per_array: usize) -> (usize, u8) {
        let pos = self.row_offset + k;
        (pos % signed_rows_per_array, self.label + (pos / signed_rows_per_array) as u8)
    }

    pub fn output_index(&self, col: usize) -> usize {
        self.out_offset + col * self.out_stride
    }

    /// Splits the chunk at the wrap point: `(first local row, signed row, label, rows)`.
    pub fn segments(&self, signed_rows_per_array: usize) -> Vec<(usize, usize, u8, usize)> {
        let first = self.signed_rows.min(signed_rows_per_array - self.row_offset);
        let mut segs = vec![(0, self.row_offset, self.label, first)];
        if first < self.signed_rows {
            segs.push((first, 0, self.label + 1, self.signed_rows - first));
        }
        segs
    }
}

/// Chunks whose digitized outputs are summed into one layer output range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialSumGroup {
    pub node: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n_chips: usize,
    pub arrays_per_chip: usize,
    pub signed_rows: usize,
    pub columns: usize,
    pub placements: Vec<Placement>,
    pub groups: Vec<PartialSumGroup>,
}

impl PartitionPlan {
    pub fn layer_placements(&self, node: usize) -> impl Iterator<Item = &Placement> {
        self.placements.iter().filter(move |p| p.node == node)
    }

    /// Arrays used by a layer, in first-use order.
    pub fn layer_arrays(&self, node: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for p in self.layer_placements(node) {
            if !out.contains(&(p.chip, p.array)) {
                out.push((p.chip, p.array));
            }
        }
        out
    }

    /// Structural soundness: placements fit and do not overlap, shared input
    /// slots agree on the element they carry, every layer is covered exactly
    /// once, and multi-slice layers have complete partial-sum groups.
    pub fn check(&self, g: &LayerGraph, cfg: &ChipConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::Graph(msg));
        let r = self.signed_rows;
        let labels = cfg.address_labels();
        g.shapes()?;

        let mut cells: HashSet<(usize, usize, usize, usize)> = HashSet::new();
        let mut slots: HashMap<(usize, usize, usize, u8), (usize, usize)> = HashMap::new();
        for p in &self.placements {
            if p.chip >= self.n_chips || p.array >= self.arrays_per_chip {
                return bad(format!("placement {} on missing array", p.id));
            }
            if p.signed_rows > r || p.col_offset + p.cols > self.columns || p.row_offset >= r {
                return bad(format!("placement {} exceeds the array", p.id));
            }
            for k in 0..p.signed_rows {
                let (row, label) = p.slot(k, r);
                if usize::from(label) >= labels {
                    return bad(format!("placement {} runs out of address labels", p.id));
                }
                let element = p.input_offset + k;
                if let Some(prev) = slots.insert((p.chip, p.array, row, label), (p.node, element)) {
                    if prev != (p.node, element) {
                        return bad(format!("slot ({row},{label}) carries two different inputs"));
                    }
                }
                for c in 0..p.cols {
                    if !cells.insert((p.chip, p.array, row, p.col_offset + c)) {
                        return bad(format!("placement {} overlaps another chunk", p.id));
                    }
                }
            }
        }

        for node in g.mac_nodes()? {
            let layer = g.layer(node);
            let mut pairs = HashSet::new();
            for p in self.layer_placements(node) {
                for k in 0..p.signed_rows {
                    for c in 0..p.cols {
                        let weight = (p.weight_row + k, p.weight_col + c);
                        if !pairs.insert((p.input_offset + k, p.output_index(c), weight)) {
                            return bad(format!("node {node}: product computed twice"));
                        }
                    }
                }
            }
            let expected = match *layer {
                Layer::Conv1d { kernel, stride, in_len, out_channels } => {
                    let positions = Layer::conv_positions(kernel, stride, in_len);
                    let mut all = HashSet::new();
                    for pos in 0..positions {
                        for k in 0..kernel {
                            for c in 0..out_channels {
                                all.insert((pos * stride + k, c * positions + pos, (k, c)));
                            }
                        }
                    }
                    all
                }
                Layer::Linear { in_features, out_features } => {
                    let mut all = HashSet::new();
                    for i in 0..in_features {
                        for j in 0..out_features {
                            all.insert((i, j, (i, j)));
                        }
                    }
                    all
                }
                _ => unreachable!(),
            };
            if pairs != expected {
                return bad(format!("node {node}: chunks do not reproduce the layer"));
            }

            if let Layer::Linear { in_features, .. } = *layer {
                let slices = in_features.div_ceil(r);
                if slices > 1 {
                    let groups: Vec<_> = self.groups.iter().filter(|gr| gr.node == node).collect();
                    if groups.is_empty() {
                        return bad(format!("node {node}: split layer without partial-sum group"));
                    }
                    let covered: HashSet<usize> = groups.iter().flat_map(|gr| gr.members.iter().copied()).collect();
                    if self.layer_placements(node).any(|p| !covered.contains(&p.id)) {
                        return bad(format!("node {node}: chunk outside every partial-sum group"));
                    }
                    for gr in groups {
                        let mut seen: Vec<usize> = gr.members.iter().map(|&m| self.placements[m].slice).collect();
                        seen.sort_unstable();
                        if seen != (0..slices).collect::<Vec<_>>() {
                            return bad(format!("node {node}: partial-sum group misses a slice"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ArrayAlloc {
    next_col: usize,
    next_label: usize,
    bases: HashMap<usize, u8>,
}

struct Allocator<'a> {
    cfg: &'a ChipConfig,
    arrays: Vec<ArrayAlloc>,
}

impl Allocator<'_> {
    /// Reserves `width` columns for a chunk of `node`, returning (chip, array, col, label base).
    fn take(&mut self, node: usize, width: usize, labels_needed: usize, start_chip: usize) -> Option<(usize, usize, usize, u8)> {
        let per_chip = self.cfg.arrays_per_chip;
        let total = self.arrays.len();
        let max_labels = self.cfg.address_labels();
        for step in 0..total {
            let flat = (start_chip * per_chip + step) % total;
            let a = &mut self.arrays[flat];
            if a.next_col + width > self.cfg.columns_per_array {
                continue;
            }
            let base = match a.bases.get(&node) {
                Some(&b) => b,
                None if a.next_label + labels_needed <= max_labels => {
                    let b = a.next_label as u8;
                    a.next_label += labels_needed;
                    a.bases.insert(node, b);
                    b
                }
                None => continue,
            };
            let col = a.next_col;
            a.next_col += width;
            return Some((flat / per_chip, flat % per_chip, col, base));
        }
        None
    }
}

/// First-fit partition of every MAC layer onto `n_chips` chips.
pub fn partition(g: &LayerGraph, cfg: &ChipConfig, n_chips: usize) -> Result<PartitionPlan> {
    partition_with(g, cfg, n_chips, Packing::FirstFit)
}

pub fn partition_with(g: &LayerGraph, cfg: &ChipConfig, n_chips: usize, packing: Packing) -> Result<PartitionPlan> {
    cfg.validate()?;
    if n_chips == 0 {
        return Err(Error::InsufficientHardware("no chips".into()));
    }
    g.shapes()?;
    let r = cfg.signed_rows();
    let c_max = cfg.columns_per_array;
    let mut alloc = Allocator {
        cfg,
        arrays: vec![ArrayAlloc { next_col: 0, next_label: 0, bases: HashMap::new() }; n_chips * cfg.arrays_per_chip],
    };
    let mut placements: Vec<Placement> = Vec::new();
    let mut groups = Vec::new();

    for (mac_index, node) in g.mac_nodes()?.into_iter().enumerate() {
        let start_chip = match packing {
            Packing::FirstFit => 0,
            Packing::Spread => mac_index % n_chips,
        };
        let no_room = |what: &str| {
            Error::InsufficientHardware(format!("no array has room for {what} of node {node}"))
        };
        match *g.layer(node) {
            Layer::Conv1d { kernel, stride, in_len, out_channels } => {
                if kernel > r {
                    return Err(Error::Unsplittable {
                        node,
                        reason: format!("kernel {kernel} exceeds {r} signed rows"),
                    });
                }
                if out_channels > c_max {
                    return Err(Error::Unsplittable {
                        node,
                        reason: format!("{out_channels} channels exceed {c_max} columns"),
                    });
                }
                let labels_needed = in_len.div_ceil(r);
                if labels_needed > cfg.address_labels() {
                    return Err(Error::Unsplittable {
                        node,
                        reason: format!("{in_len} inputs need {labels_needed} address labels"),
                    });
                }
                let positions = Layer::conv_positions(kernel, stride, in_len);
                for pos in 0..positions {
                    let (chip, array, col, base) =
                        alloc.take(node, out_channels, labels_needed, start_chip).ok_or_else(|| no_room("a position"))?;
                    let input_offset = pos * stride;
                    placements.push(Placement {
                        id: placements.len(),
                        node,
                        chip,
                        array,
                        row_offset: input_offset % r,
                        col_offset: col,
                        signed_rows: kernel,
                        cols: out_channels,
                        label: base + (input_offset / r) as u8,
                        input_offset,
                        weight_row: 0,
                        weight_col: 0,
                        out_offset: pos,
                        out_stride: positions,
                        slice: 0,
                        replication_index: pos,
                    });
                }
            }
            Layer::Linear { in_features, out_features } => {
                let slices = in_features.div_ceil(r);
                if slices > cfg.address_labels() {
                    return Err(Error::Unsplittable {
                        node,
                        reason: format!("{in_features} inputs need {slices} address labels"),
                    });
                }
                for tile_start in (0..out_features).step_by(c_max) {
                    let width = c_max.min(out_features - tile_start);
                    let mut members = Vec::new();
                    for s in 0..slices {
                        let (chip, array, col, base) =
                            alloc.take(node, width, slices, start_chip).ok_or_else(|| no_room("a slice"))?;
                        let input_offset = s * r;
                        members.push(placements.len());
                        placements.push(Placement {
                            id: placements.len(),
                            node,
                            chip,
                            array,
                            row_offset: 0,
                            col_offset: col,
                            signed_rows: r.min(in_features - input_offset),
                            cols: width,
                            label: base + s as u8,
                            input_offset,
                            weight_row: input_offset,
                            weight_col: tile_start,
                            out_offset: tile_start,
                            out_stride: 1,
                            slice: s,
                            replication_index: 0,
                        });
                    }
                    if slices > 1 {
                        groups.push(PartialSumGroup { node, members });
                    }
                }
            }
            _ => unreachable!("mac_nodes yields MAC layers only"),
        }
    }

    Ok(PartitionPlan {
        n_chips,
        arrays_per_chip: cfg.arrays_per_chip,
        signed_rows: r,
        columns: c_max,
        placements,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_paper_model;

    #[test]
    fn ecg_model_on_one_chip() {
        let cfg = ChipConfig::default();
        let g = build_paper_model();
        let plan = partition(&g, &cfg, 1).unwrap();
        plan.check(&g, &cfg).unwrap();

        let conv: Vec<_> = plan.layer_placements(0).collect();
        assert_eq!(conv.len(), 32);
        assert!(conv.iter().all(|p| p.signed_rows == 91 && p.cols == 8 && p.array == 0 && p.chip == 0));
        let reps: Vec<_> = conv.iter().map(|p| p.replication_index).collect();
        assert_eq!(reps, (0..32).collect::<Vec<_>>());

        let hidden: Vec<_> = plan.layer_placements(2).collect();
        assert_eq!(hidden.len(), 2);
        assert!(hidden.iter().all(|p| p.signed_rows == 128 && p.cols == 123 && p.array == 1));
        assert_eq!(plan.groups, vec![PartialSumGroup { node: 2, members: vec![32, 33] }]);

        let out: Vec<_> = plan.layer_placements(4).collect();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].array, out[0].col_offset, out[0].cols), (1, 246, 10));
    }

    #[test]
    fn conv_staircase_wraps_with_next_label() {
        let cfg = ChipConfig::default();
        let plan = partition(&build_paper_model(), &cfg, 1).unwrap();
        let p = &plan.placements[11]; // inputs 121..212
        assert_eq!((p.row_offset, p.label), (121, 0));
        assert_eq!(p.segments(128), vec![(0, 121, 0, 7), (7, 0, 1, 84)]);
        assert_eq!(p.slot(90, 128), (211 - 128, 1));
    }

    #[test]
    fn small_linear_fits_directly() {
        let cfg = ChipConfig::default();
        let g = LayerGraph::sequential(64, [Layer::Linear { in_features: 64, out_features: 10 }]);
        let plan = partition(&g, &cfg, 1).unwrap();
        assert_eq!(plan.placements.len(), 1);
        assert!(plan.groups.is_empty());
        plan.check(&g, &cfg).unwrap();
    }

    #[test]
    fn oversized_kernel_is_unsplittable() {
        let cfg = ChipConfig::default();
        let g = LayerGraph::sequential(
            400,
            [Layer::Conv1d { kernel: 129, stride: 1, in_len: 400, out_channels: 2 }],
        );
        assert!(matches!(partition(&g, &cfg, 4), Err(Error::Unsplittable { node: 0, .. })));
    }

    #[test]
    fn running_out_of_columns_fails() {
        let cfg = ChipConfig::default();
        let g = LayerGraph::sequential(128, [Layer::Linear { in_features: 128, out_features: 600 }]);
        assert!(matches!(partition(&g, &cfg, 1), Err(Error::InsufficientHardware(_))));
        let plan = partition(&g, &cfg, 2).unwrap();
        plan.check(&g, &cfg).unwrap();
        assert_eq!(plan.placements.len(), 3);
    }

    #[test]
    fn spread_uses_second_chip() {
        let cfg = ChipConfig::default();
        let g = build_paper_model();
        let plan = partition_with(&g, &cfg, 2, Packing::Spread).unwrap();
        plan.check(&g, &cfg).unwrap();
        assert!(plan.layer_placements(2).all(|p| p.chip == 1));
        assert!(plan.layer_placements(0).all(|p| p.chip == 0));
    }

    #[test]
    fn check_catches_overlap() {
        let cfg = ChipConfig::default();
        let g = build_paper_model();
        let mut plan = partition(&g, &cfg, 1).unwrap();
        plan.placements[1].col_offset = 4;
        assert!(plan.check(&g, &cfg).is_err());
    }
}
