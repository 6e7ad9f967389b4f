use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ir::{Layer, LayerGraph};
use super::partition::{PartitionPlan, Placement};
use crate::error::{Error, Result};

/// Input element to event address for one pass of one layer on one array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupTable {
    pub node: usize,
    pub chip: usize,
    pub array: usize,
    pub entries: Vec<LookupEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupEntry {
    pub element: usize,
    pub row: usize,
    pub label: u8,
}

/// Where one chunk's columns go after a conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdcTarget {
    pub placement: usize,
    pub dst: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DigitalOp {
    Relu { src: usize, dst: usize },
    AvgPool { src: usize, dst: usize, group: usize },
    MaxPool { src: usize, dst: usize, group: usize },
    Argmax { src: usize, dst: usize },
    PartialSum { srcs: Vec<usize>, dst: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instruction {
    LoadWeights { placement: usize },
    LoadInput { dst: usize },
    ResetNeurons { chip: usize, array: usize },
    /// Converts `src` to activations and sends them through lookup table `lookup`.
    SendVector { chip: usize, array: usize, src: usize, lookup: usize },
    ReadAdc { chip: usize, array: usize, targets: Vec<AdcTarget> },
    Digital(DigitalOp),
    StoreResult { src: usize },
}

/// A lowered program: one-time weight loads followed by the per-record sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionStream {
    pub signed_rows: usize,
    pub placements: Vec<Placement>,
    pub lookups: Vec<LookupTable>,
    /// Length of every value buffer.
    pub buffers: Vec<usize>,
    /// Output buffer of each graph node.
    pub node_buffers: Vec<usize>,
    pub input_buffer: usize,
    pub instructions: Vec<Instruction>,
}

impl InstructionStream {
    pub fn count(&self, pred: impl Fn(&Instruction) -> bool) -> usize {
        self.instructions.iter().filter(|i| pred(i)).count()
    }

    /// Index of the first instruction that runs per record.
    pub fn record_start(&self) -> usize {
        self.instructions
            .iter()
            .position(|i| !matches!(i, Instruction::LoadWeights { .. }))
            .unwrap_or(self.instructions.len())
    }

    /// Checks references, load-once weights, injective lookups, and that every
    /// conversion follows a reset and at least one send on its array.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Stream(msg));
        let nbuf = self.buffers.len();
        let buf_ok = |b: usize| b < nbuf;

        for (i, lut) in self.lookups.iter().enumerate() {
            let mut slots = HashSet::new();
            for e in &lut.entries {
                if e.row >= self.signed_rows || !slots.insert((e.row, e.label)) {
                    return bad(format!("lookup {i} maps two elements to one slot"));
                }
            }
        }

        let mut loaded = HashSet::new();
        let mut per_record = false;
        // (reset seen, sends since reset) per array
        let mut arrays: HashMap<(usize, usize), (bool, usize)> = HashMap::new();
        for (pc, ins) in self.instructions.iter().enumerate() {
            match ins {
                Instruction::LoadWeights { placement } => {
                    if per_record {
                        return bad(format!("{pc}: weight load inside the record program"));
                    }
                    if *placement >= self.placements.len() || !loaded.insert(*placement) {
                        return bad(format!("{pc}: placement {placement} loaded twice or unknown"));
                    }
                }
                Instruction::LoadInput { dst } => {
                    per_record = true;
                    if !buf_ok(*dst) {
                        return bad(format!("{pc}: unknown buffer"));
                    }
                }
                Instruction::ResetNeurons { chip, array } => {
                    per_record = true;
                    arrays.insert((*chip, *array), (true, 0));
                }
                Instruction::SendVector { chip, array, src, lookup } => {
                    per_record = true;
                    if !buf_ok(*src) || *lookup >= self.lookups.len() {
                        return bad(format!("{pc}: unknown buffer or lookup"));
                    }
                    let lut = &self.lookups[*lookup];
                    if (lut.chip, lut.array) != (*chip, *array) {
                        return bad(format!("{pc}: lookup belongs to another array"));
                    }
                    match arrays.get_mut(&(*chip, *array)) {
                        Some((true, sends)) => *sends += 1,
                        _ => return bad(format!("{pc}: send before reset")),
                    }
                }
                Instruction::ReadAdc { chip, array, targets } => {
                    per_record = true;
                    match arrays.get(&(*chip, *array)) {
                        Some((true, sends)) if *sends > 0 => {}
                        _ => return bad(format!("{pc}: conversion without reset and send")),
                    }
                    arrays.insert((*chip, *array), (false, 0));
                    for t in targets {
                        let Some(p) = self.placements.get(t.placement) else {
                            return bad(format!("{pc}: unknown placement {}", t.placement));
                        };
                        if (p.chip, p.array) != (*chip, *array) || !buf_ok(t.dst) {
                            return bad(format!("{pc}: target placement {} is elsewhere", t.placement));
                        }
                    }
                }
                Instruction::Digital(op) => {
                    per_record = true;
                    let ok = match op {
                        DigitalOp::Relu { src, dst }
                        | DigitalOp::AvgPool { src, dst, .. }
                        | DigitalOp::MaxPool { src, dst, .. }
                        | DigitalOp::Argmax { src, dst } => buf_ok(*src) && buf_ok(*dst),
                        DigitalOp::PartialSum { srcs, dst } => srcs.iter().all(|&s| buf_ok(s)) && buf_ok(*dst),
                    };
                    if !ok {
                        return bad(format!("{pc}: unknown buffer"));
                    }
                }
                Instruction::StoreResult { src } => {
                    if !buf_ok(*src) {
                        return bad(format!("{pc}: unknown buffer"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Lowers a partitioned graph into an instruction stream.
///
/// Layers run in topological order. Each MAC layer gets one reset / send /
/// convert pass per array it occupies; chunks of one ADC slice land in a shared
/// buffer and split layers finish with a digital partial sum.
pub fn lower(plan: &PartitionPlan, g: &LayerGraph) -> Result<InstructionStream> {
    let order = g.topo_order()?;
    let shapes = g.shapes()?;
    let mut buffers = vec![g.input_len];
    let input_buffer = 0;
    let node_buffers: Vec<usize> = shapes
        .iter()
        .map(|&len| {
            buffers.push(len);
            buffers.len() - 1
        })
        .collect();

    let mut instructions: Vec<Instruction> =
        plan.placements.iter().map(|p| Instruction::LoadWeights { placement: p.id }).collect();
    instructions.push(Instruction::LoadInput { dst: input_buffer });
    let mut lookups = Vec::new();

    for &node in &order {
        let src = g.nodes[node].input.map_or(input_buffer, |p| node_buffers[p]);
        let dst = node_buffers[node];
        let layer = g.layer(node);
        match *layer {
            Layer::Conv1d { .. } | Layer::Linear { .. } => {
                let chunks: Vec<&Placement> = plan.layer_placements(node).collect();
                if chunks.is_empty() {
                    return Err(Error::Graph(format!("node {node} has no placements")));
                }
                let slices = chunks.iter().map(|p| p.slice).max().unwrap_or(0) + 1;
                let slice_buffers: Vec<usize> = if slices == 1 {
                    vec![dst]
                } else {
                    (0..slices)
                        .map(|_| {
                            buffers.push(shapes[node]);
                            buffers.len() - 1
                        })
                        .collect()
                };
                for (chip, array) in plan.layer_arrays(node) {
                    let here: Vec<&&Placement> =
                        chunks.iter().filter(|p| (p.chip, p.array) == (chip, array)).collect();
                    let mut entries = BTreeMap::new();
                    for p in &here {
                        for k in 0..p.signed_rows {
                            let (row, label) = p.slot(k, plan.signed_rows);
                            entries.insert(p.input_offset + k, (row, label));
                        }
                    }
                    lookups.push(LookupTable {
                        node,
                        chip,
                        array,
                        entries: entries
                            .into_iter()
                            .map(|(element, (row, label))| LookupEntry { element, row, label })
                            .collect(),
                    });
                    instructions.push(Instruction::ResetNeurons { chip, array });
                    instructions.push(Instruction::SendVector { chip, array, src, lookup: lookups.len() - 1 });
                    instructions.push(Instruction::ReadAdc {
                        chip,
                        array,
                        targets: here
                            .iter()
                            .map(|p| AdcTarget { placement: p.id, dst: slice_buffers[p.slice] })
                            .collect(),
                    });
                }
                if slices > 1 {
                    instructions.push(Instruction::Digital(DigitalOp::PartialSum { srcs: slice_buffers, dst }));
                }
            }
            Layer::Relu => instructions.push(Instruction::Digital(DigitalOp::Relu { src, dst })),
            Layer::AvgPool { group_size } => {
                instructions.push(Instruction::Digital(DigitalOp::AvgPool { src, dst, group: group_size }))
            }
            Layer::MaxPool { group_size } => {
                instructions.push(Instruction::Digital(DigitalOp::MaxPool { src, dst, group: group_size }))
            }
            Layer::Argmax => instructions.push(Instruction::Digital(DigitalOp::Argmax { src, dst })),
        }
    }
    let result = order.last().map_or(input_buffer, |&n| node_buffers[n]);
    instructions.push(Instruction::StoreResult { src: result });

    let stream = InstructionStream {
        signed_rows: plan.signed_rows,
        placements: plan.placements.clone(),
        lookups,
        buffers,
        node_buffers,
        input_buffer,
        instructions,
    };
    stream.validate()?;
    Ok(stream)
}
