//! Line-oriented text form of partition plans and instruction streams.
//!
//! One record per line, opcode first, then positional or `key=value`
//! arguments. `#` starts a comment.
//!
//! ```text
//! bss2-stream 1
//! signed_rows 128
//! buffer 0 432
//! node 0 1
//! input 0
//! placement id=0 node=0 chip=0 array=0 row=0 col=0 rows=91 cols=8 label=0 input=0 wrow=0 wcol=0 out=0 stride=32 slice=0 rep=0
//! lut 0 node=0 chip=0 array=0 0:0:0 1:1:0 ...
//! load_weights 0
//! load_input 0
//! reset 0 0
//! send 0 0 src=0 lut=0
//! read_adc 0 0 0>1 1>1
//! relu 1 2
//! partial_sum 3,4 5
//! avg_pool 7 8 5
//! argmax 8 9
//! store 9
//! ```

use std::collections::HashMap;
use std::fmt::{self, Display, Write as _};
use std::str::FromStr;

use super::lower::{AdcTarget, DigitalOp, Instruction, InstructionStream, LookupEntry, LookupTable};
use super::partition::{PartialSumGroup, PartitionPlan, Placement};
use crate::error::Error;

const STREAM_HEADER: &str = "bss2-stream 1";
const PLAN_HEADER: &str = "bss2-plan 1";

fn placement_line(p: &Placement) -> String {
    format!(
        "placement id={} node={} chip={} array={} row={} col={} rows={} cols={} label={} input={} \
         wrow={} wcol={} out={} stride={} slice={} rep={}",
        p.id,
        p.node,
        p.chip,
        p.array,
        p.row_offset,
        p.col_offset,
        p.signed_rows,
        p.cols,
        p.label,
        p.input_offset,
        p.weight_row,
        p.weight_col,
        p.out_offset,
        p.out_stride,
        p.slice,
        p.replication_index
    )
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Display for PartitionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{PLAN_HEADER}")?;
        writeln!(
            f,
            "geometry chips={} arrays={} rows={} cols={}",
            self.n_chips, self.arrays_per_chip, self.signed_rows, self.columns
        )?;
        for p in &self.placements {
            writeln!(f, "{}", placement_line(p))?;
        }
        for g in &self.groups {
            writeln!(f, "group node={} members={}", g.node, join(&g.members))?;
        }
        Ok(())
    }
}

impl Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::LoadWeights { placement } => write!(f, "load_weights {placement}"),
            Instruction::LoadInput { dst } => write!(f, "load_input {dst}"),
            Instruction::ResetNeurons { chip, array } => write!(f, "reset {chip} {array}"),
            Instruction::SendVector { chip, array, src, lookup } => {
                write!(f, "send {chip} {array} src={src} lut={lookup}")
            }
            Instruction::ReadAdc { chip, array, targets } => {
                write!(f, "read_adc {chip} {array}")?;
                for t in targets {
                    write!(f, " {}>{}", t.placement, t.dst)?;
                }
                Ok(())
            }
            Instruction::Digital(op) => match op {
                DigitalOp::Relu { src, dst } => write!(f, "relu {src} {dst}"),
                DigitalOp::AvgPool { src, dst, group } => write!(f, "avg_pool {src} {dst} {group}"),
                DigitalOp::MaxPool { src, dst, group } => write!(f, "max_pool {src} {dst} {group}"),
                DigitalOp::Argmax { src, dst } => write!(f, "argmax {src} {dst}"),
                DigitalOp::PartialSum { srcs, dst } => write!(f, "partial_sum {} {dst}", join(srcs)),
            },
            Instruction::StoreResult { src } => write!(f, "store {src}"),
        }
    }
}

impl Display for InstructionStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{STREAM_HEADER}")?;
        writeln!(f, "signed_rows {}", self.signed_rows)?;
        for (i, len) in self.buffers.iter().enumerate() {
            writeln!(f, "buffer {i} {len}")?;
        }
        for (node, buf) in self.node_buffers.iter().enumerate() {
            writeln!(f, "node {node} {buf}")?;
        }
        writeln!(f, "input {}", self.input_buffer)?;
        for p in &self.placements {
            writeln!(f, "{}", placement_line(p))?;
        }
        for (i, lut) in self.lookups.iter().enumerate() {
            let mut line = format!("lut {i} node={} chip={} array={}", lut.node, lut.chip, lut.array);
            for e in &lut.entries {
                let _ = write!(line, " {}:{}:{}", e.element, e.row, e.label);
            }
            writeln!(f, "{line}")?;
        }
        for ins in &self.instructions {
            writeln!(f, "{ins}")?;
        }
        Ok(())
    }
}

struct Line<'a> {
    no: usize,
    positional: Vec<&'a str>,
    keyed: HashMap<&'a str, &'a str>,
}

impl<'a> Line<'a> {
    fn parse(no: usize, tokens: &[&'a str]) -> Self {
        let mut positional = Vec::new();
        let mut keyed = HashMap::new();
        for t in tokens {
            match t.split_once('=') {
                Some((k, v)) => {
                    keyed.insert(k, v);
                }
                None => positional.push(*t),
            }
        }
        Self { no, positional, keyed }
    }

    fn err(&self, msg: impl Display) -> Error {
        Error::Stream(format!("line {}: {msg}", self.no))
    }

    fn num<T: FromStr>(&self, s: &str) -> Result<T, Error> {
        s.parse().map_err(|_| self.err(format!("bad number {s:?}")))
    }

    fn pos<T: FromStr>(&self, i: usize) -> Result<T, Error> {
        let s = self.positional.get(i).ok_or_else(|| self.err(format!("missing argument {i}")))?;
        self.num(s)
    }

    fn key<T: FromStr>(&self, k: &str) -> Result<T, Error> {
        let s = self.keyed.get(k).ok_or_else(|| self.err(format!("missing {k}=")))?;
        self.num(s)
    }

    fn list(&self, s: &str) -> Result<Vec<usize>, Error> {
        s.split(',').filter(|x| !x.is_empty()).map(|x| self.num(x)).collect()
    }

    fn placement(&self) -> Result<Placement, Error> {
        Ok(Placement {
            id: self.key("id")?,
            node: self.key("node")?,
            chip: self.key("chip")?,
            array: self.key("array")?,
            row_offset: self.key("row")?,
            col_offset: self.key("col")?,
            signed_rows: self.key("rows")?,
            cols: self.key("cols")?,
            label: self.key("label")?,
            input_offset: self.key("input")?,
            weight_row: self.key("wrow")?,
            weight_col: self.key("wcol")?,
            out_offset: self.key("out")?,
            out_stride: self.key("stride")?,
            slice: self.key("slice")?,
            replication_index: self.key("rep")?,
        })
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let body = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = body.split_whitespace().collect();
        (!tokens.is_empty()).then_some((i + 1, tokens))
    })
}

fn check_header(text: &str, header: &str) -> Result<(), Error> {
    match lines(text).next() {
        Some((_, tokens)) if tokens.join(" ") == header => Ok(()),
        _ => Err(Error::Stream(format!("expected header {header:?}"))),
    }
}

impl FromStr for PartitionPlan {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self, Error> {
        check_header(text, PLAN_HEADER)?;
        let mut plan = PartitionPlan {
            n_chips: 0,
            arrays_per_chip: 0,
            signed_rows: 0,
            columns: 0,
            placements: Vec::new(),
            groups: Vec::new(),
        };
        for (no, tokens) in lines(text).skip(1) {
            let line = Line::parse(no, &tokens[1..]);
            match tokens[0] {
                "geometry" => {
                    plan.n_chips = line.key("chips")?;
                    plan.arrays_per_chip = line.key("arrays")?;
                    plan.signed_rows = line.key("rows")?;
                    plan.columns = line.key("cols")?;
                }
                "placement" => plan.placements.push(line.placement()?),
                "group" => {
                    let members = line.keyed.get("members").copied().unwrap_or("");
                    plan.groups.push(PartialSumGroup { node: line.key("node")?, members: line.list(members)? });
                }
                other => return Err(line.err(format!("unknown record {other:?}"))),
            }
        }
        Ok(plan)
    }
}

impl FromStr for InstructionStream {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self, Error> {
        check_header(text, STREAM_HEADER)?;
        let mut s = InstructionStream {
            signed_rows: 0,
            placements: Vec::new(),
            lookups: Vec::new(),
            buffers: Vec::new(),
            node_buffers: Vec::new(),
            input_buffer: 0,
            instructions: Vec::new(),
        };
        for (no, tokens) in lines(text).skip(1) {
            let l = Line::parse(no, &tokens[1..]);
            let ins = match tokens[0] {
                "signed_rows" => {
                    s.signed_rows = l.pos(0)?;
                    continue;
                }
                "buffer" => {
                    if l.pos::<usize>(0)? != s.buffers.len() {
                        return Err(l.err("buffers must be listed in order"));
                    }
                    s.buffers.push(l.pos(1)?);
                    continue;
                }
                "node" => {
                    if l.pos::<usize>(0)? != s.node_buffers.len() {
                        return Err(l.err("nodes must be listed in order"));
                    }
                    s.node_buffers.push(l.pos(1)?);
                    continue;
                }
                "input" => {
                    s.input_buffer = l.pos(0)?;
                    continue;
                }
                "placement" => {
                    s.placements.push(l.placement()?);
                    continue;
                }
                "lut" => {
                    let entries = l.positional[1..]
                        .iter()
                        .map(|e| {
                            let parts: Vec<&str> = e.split(':').collect();
                            if parts.len() != 3 {
                                return Err(l.err(format!("bad lookup entry {e:?}")));
                            }
                            Ok(LookupEntry { element: l.num(parts[0])?, row: l.num(parts[1])?, label: l.num(parts[2])? })
                        })
                        .collect::<Result<Vec<_>, Error>>()?;
                    s.lookups.push(LookupTable {
                        node: l.key("node")?,
                        chip: l.key("chip")?,
                        array: l.key("array")?,
                        entries,
                    });
                    continue;
                }
                "load_weights" => Instruction::LoadWeights { placement: l.pos(0)? },
                "load_input" => Instruction::LoadInput { dst: l.pos(0)? },
                "reset" => Instruction::ResetNeurons { chip: l.pos(0)?, array: l.pos(1)? },
                "send" => Instruction::SendVector {
                    chip: l.pos(0)?,
                    array: l.pos(1)?,
                    src: l.key("src")?,
                    lookup: l.key("lut")?,
                },
                "read_adc" => {
                    let targets = l.positional[2..]
                        .iter()
                        .map(|t| {
                            let (p, d) = t.split_once('>').ok_or_else(|| l.err(format!("bad target {t:?}")))?;
                            Ok(AdcTarget { placement: l.num(p)?, dst: l.num(d)? })
                        })
                        .collect::<Result<Vec<_>, Error>>()?;
                    Instruction::ReadAdc { chip: l.pos(0)?, array: l.pos(1)?, targets }
                }
                "relu" => Instruction::Digital(DigitalOp::Relu { src: l.pos(0)?, dst: l.pos(1)? }),
                "avg_pool" => Instruction::Digital(DigitalOp::AvgPool { src: l.pos(0)?, dst: l.pos(1)?, group: l.pos(2)? }),
                "max_pool" => Instruction::Digital(DigitalOp::MaxPool { src: l.pos(0)?, dst: l.pos(1)?, group: l.pos(2)? }),
                "argmax" => Instruction::Digital(DigitalOp::Argmax { src: l.pos(0)?, dst: l.pos(1)? }),
                "partial_sum" => {
                    let first = l.positional.first().ok_or_else(|| l.err("missing sources"))?;
                    Instruction::Digital(DigitalOp::PartialSum { srcs: l.list(first)?, dst: l.pos(1)? })
                }
                "store" => Instruction::StoreResult { src: l.pos(0)? },
                other => return Err(l.err(format!("unknown opcode {other:?}"))),
            };
            s.instructions.push(ins);
        }
        s.validate()?;
        Ok(s)
    }
}
