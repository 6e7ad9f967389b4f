//! Throughput, area and energy accounting.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerGraph};

/// Operations per record in the published measurement ledger.
pub const PUBLISHED_OPS_PER_RECORD: f64 = 131_750.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerfParams {
    /// Input events per second.
    pub event_rate: f64,
    pub rows: usize,
    pub cols: usize,
    pub ops_per_mac: f64,
    /// Seconds per neuron integration.
    pub integration_cycle: f64,
    pub synapse_width_um: f64,
    pub synapse_height_um: f64,
}

impl Default for PerfParams {
    fn default() -> Self {
        Self {
            event_rate: 125e6,
            rows: 256,
            cols: 512,
            ops_per_mac: 2.0,
            integration_cycle: 5e-6,
            synapse_width_um: 8.0,
            synapse_height_um: 12.0,
        }
    }
}

impl PerfParams {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [self.event_rate, self.ops_per_mac, self.integration_cycle, self.synapse_width_um, self.synapse_height_um]
            .iter()
            .all(|&v| v > 0.0)
            && self.rows > 0
            && self.cols > 0;
        if all_positive {
            Ok(())
        } else {
            Err(Error::Perf("performance parameters must be positive".into()))
        }
    }

    fn synapses(&self) -> f64 {
        (self.rows * self.cols) as f64
    }

    /// Synapse array area in mm².
    pub fn array_area_mm2(&self) -> f64 {
        self.synapses() * self.synapse_width_um * self.synapse_height_um * 1e-6
    }
}

/// Every synapse processes one event per event period.
pub fn peak_throughput(p: &PerfParams) -> f64 {
    p.event_rate * p.synapses() * p.ops_per_mac
}

/// One MAC per synapse per integration cycle.
pub fn effective_throughput(p: &PerfParams) -> Result<f64> {
    if !(p.integration_cycle > 0.0) {
        return Err(Error::Perf("integration cycle must be positive".into()));
    }
    Ok(p.synapses() * p.ops_per_mac / p.integration_cycle)
}

/// Peak throughput per mm² of synapse array, in op/s/mm².
pub fn area_efficiency(p: &PerfParams) -> Result<f64> {
    let area = p.array_area_mm2();
    if !(area > 0.0) {
        return Err(Error::Perf("synapse area must be positive".into()));
    }
    Ok(peak_throughput(p) / area)
}

/// Multiplications and additions of all MAC layers, counted separately.
pub fn op_count(g: &LayerGraph) -> Result<u64> {
    g.shapes()?;
    Ok(g.nodes
        .iter()
        .map(|n| match n.layer {
            Layer::Conv1d { kernel, stride, in_len, out_channels } => {
                2 * (Layer::conv_positions(kernel, stride, in_len) * out_channels * kernel) as u64
            }
            Layer::Linear { in_features, out_features } => 2 * (in_features * out_features) as u64,
            _ => 0,
        })
        .sum())
}

/// Energies in joules over one measured block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyLedger {
    pub system_total: f64,
    pub fpga_board: f64,
    pub arm_cpu: f64,
    pub fpga_fabric: f64,
    pub dram: f64,
    pub asic_total: f64,
    pub asic_io: f64,
    pub asic_analog: f64,
    pub asic_digital: f64,
    /// Seconds.
    pub runtime: f64,
    pub total_ops: f64,
    pub records: usize,
}

impl EnergyLedger {
    /// The published 500-record measurement.
    pub fn published() -> Self {
        Self {
            system_total: 0.78,
            fpga_board: 0.35,
            arm_cpu: 0.17,
            fpga_fabric: 0.10,
            dram: 56e-3,
            asic_total: 96e-3,
            asic_io: 32e-3,
            asic_analog: 31e-3,
            asic_digital: 33e-3,
            runtime: 0.138,
            total_ops: 65.875e6,
            records: 500,
        }
    }

    fn rails(&self) -> [(&'static str, f64); 9] {
        [
            ("system_total", self.system_total),
            ("fpga_board", self.fpga_board),
            ("arm_cpu", self.arm_cpu),
            ("fpga_fabric", self.fpga_fabric),
            ("dram", self.dram),
            ("asic_total", self.asic_total),
            ("asic_io", self.asic_io),
            ("asic_analog", self.asic_analog),
            ("asic_digital", self.asic_digital),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.runtime > 0.0) {
            return Err(Error::Perf("runtime must be positive".into()));
        }
        if !(self.total_ops > 0.0) {
            return Err(Error::Perf("operation count must be positive".into()));
        }
        if self.records == 0 {
            return Err(Error::Perf("ledger covers no records".into()));
        }
        for (name, v) in self.rails() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Perf(format!("{name} energy must be a finite non-negative number")));
            }
        }
        if !(self.system_total > 0.0) || !(self.asic_total > 0.0) {
            return Err(Error::Perf("system and ASIC totals must be positive".into()));
        }
        if let Some((name, _)) = self.rails()[1..].iter().find(|(_, v)| *v > self.system_total) {
            return Err(Error::Perf(format!("{name} exceeds the system total")));
        }
        Ok(())
    }

    /// `asic_io + asic_analog + asic_digital - asic_total`.
    pub fn asic_closure(&self) -> f64 {
        self.asic_io + self.asic_analog + self.asic_digital - self.asic_total
    }
}

/// Mean power per rail in watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RailPowers {
    pub system_total: f64,
    pub fpga_board: f64,
    pub arm_cpu: f64,
    pub fpga_fabric: f64,
    pub dram: f64,
    pub asic_io: f64,
    pub asic_analog: f64,
    pub asic_digital: f64,
}

impl Default for RailPowers {
    /// Published block energies spread over the published block time.
    fn default() -> Self {
        let l = EnergyLedger::published();
        let p = |e: f64| e / l.runtime;
        Self {
            system_total: p(l.system_total),
            fpga_board: p(l.fpga_board),
            arm_cpu: p(l.arm_cpu),
            fpga_fabric: p(l.fpga_fabric),
            dram: p(l.dram),
            asic_io: p(l.asic_io),
            asic_analog: p(l.asic_analog),
            asic_digital: p(l.asic_digital),
        }
    }
}

impl RailPowers {
    pub fn ledger(&self, runtime: f64, total_ops: f64, records: usize) -> EnergyLedger {
        let asic = [self.asic_io, self.asic_analog, self.asic_digital].map(|w| w * runtime);
        EnergyLedger {
            system_total: self.system_total * runtime,
            fpga_board: self.fpga_board * runtime,
            arm_cpu: self.arm_cpu * runtime,
            fpga_fabric: self.fpga_fabric * runtime,
            dram: self.dram * runtime,
            asic_total: asic.iter().sum(),
            asic_io: asic[0],
            asic_analog: asic[1],
            asic_digital: asic[2],
            runtime,
            total_ops,
            records,
        }
    }
}

/// Figures derived from a ledger.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub ledger: EnergyLedger,
    /// op/s
    pub speed: f64,
    /// op/J
    pub efficiency_asic: f64,
    pub efficiency_system: f64,
    /// Seconds.
    pub time_per_record: f64,
    /// Joules.
    pub asic_energy_per_record: f64,
    pub system_energy_per_record: f64,
    /// Watts.
    pub system_power: f64,
    pub asic_power: f64,
    pub ops_per_record: f64,
    /// Layer-formula count per record, when a model was given.
    pub model_ops_per_record: Option<u64>,
}

pub fn energy_report(ledger: &EnergyLedger) -> Result<EnergyReport> {
    ledger.validate()?;
    let records = ledger.records as f64;
    Ok(EnergyReport {
        ledger: ledger.clone(),
        speed: ledger.total_ops / ledger.runtime,
        efficiency_asic: ledger.total_ops / ledger.asic_total,
        efficiency_system: ledger.total_ops / ledger.system_total,
        time_per_record: ledger.runtime / records,
        asic_energy_per_record: ledger.asic_total / records,
        system_energy_per_record: ledger.system_total / records,
        system_power: ledger.system_total / ledger.runtime,
        asic_power: ledger.asic_total / ledger.runtime,
        ops_per_record: ledger.total_ops / records,
        model_ops_per_record: None,
    })
}

/// Operations for `records` runs of `g`, scaled by a counting-convention factor.
pub fn block_ops(g: &LayerGraph, records: usize, convention_factor: f64) -> Result<f64> {
    if !(convention_factor > 0.0) {
        return Err(Error::Perf("convention factor must be positive".into()));
    }
    Ok(op_count(g)? as f64 * records as f64 * convention_factor)
}

impl EnergyReport {
    pub fn with_model_ops(mut self, ops: u64) -> Self {
        self.model_ops_per_record = Some(ops);
        self
    }

    fn rows(&self) -> Vec<(&'static str, f64, &'static str)> {
        let l = &self.ledger;
        vec![
            ("mean power consumption: system", self.system_power, "W"),
            ("mean power consumption: ASIC", self.asic_power, "W"),
            ("time per block", l.runtime, "s"),
            ("records per block", l.records as f64, ""),
            ("total energy", l.system_total, "J"),
            ("energy FPGA base board", l.fpga_board, "J"),
            ("energy ARM CPU", l.arm_cpu, "J"),
            ("energy FPGA", l.fpga_fabric, "J"),
            ("energy DRAM", l.dram, "J"),
            ("total energy ASIC", l.asic_total, "J"),
            ("energy ASIC IO", l.asic_io, "J"),
            ("energy ASIC analog", l.asic_analog, "J"),
            ("energy ASIC digital", l.asic_digital, "J"),
            ("total operations", l.total_ops, "op"),
            ("ASIC processing speed", self.speed, "op/s"),
            ("ASIC energy efficiency", self.efficiency_asic, "op/J"),
            ("system energy efficiency", self.efficiency_system, "op/J"),
            ("time per record", self.time_per_record, "s"),
            ("ASIC energy per record", self.asic_energy_per_record, "J"),
            ("system energy per record", self.system_energy_per_record, "J"),
            ("operations per record", self.ops_per_record, "op"),
            ("ASIC rail closure (IO+analog+digital-total)", l.asic_closure(), "J"),
        ]
    }

    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>14}  unit", "quantity", "value");
        for (name, value, unit) in rows {
            let _ = writeln!(out, "{name:<width$}  {value:>14.6e}  {unit}");
        }
        let _ = writeln!(out);
        if let Some(m) = self.model_ops_per_record {
            let _ = writeln!(out, "layer-formula operations per record: {m}");
        }
        let _ = writeln!(
            out,
            "note: the published ledger counts {PUBLISHED_OPS_PER_RECORD} op/record, the layer formula \
             (2 x MACs) gives 112028 for the ECG model; the counting convention behind the published \
             figure is unknown, so the ledger's total_ops is used as given."
        );
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["quantity", "value", "unit"])?;
        for (name, value, unit) in self.rows() {
            w.write_record([name, &value.to_string(), unit])?;
        }
        if let Some(m) = self.model_ops_per_record {
            w.write_record(["layer-formula operations per record", &m.to_string(), "op"])?;
        }
        w.write_record(["published operations per record", &PUBLISHED_OPS_PER_RECORD.to_string(), "op"])?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_paper_model;

    #[test]
    fn trivial_geometries() {
        let p = PerfParams { rows: 1, cols: 1, event_rate: 1.0, ..Default::default() };
        assert_eq!(peak_throughput(&p), 2.0);
        assert_eq!(effective_throughput(&p).unwrap(), 2.0 / 5e-6);
        let half = PerfParams { event_rate: 62.5e6, ..Default::default() };
        assert_eq!(peak_throughput(&half) * 2.0, peak_throughput(&PerfParams::default()));
        assert!(effective_throughput(&PerfParams { integration_cycle: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn peak_to_effective_ratio() {
        let p = PerfParams::default();
        let ratio = peak_throughput(&p) / effective_throughput(&p).unwrap();
        assert!((ratio - 625.0).abs() < 1e-9);
    }

    #[test]
    fn doubling_area_halves_efficiency() {
        let p = PerfParams::default();
        let big = PerfParams { synapse_width_um: 16.0, ..Default::default() };
        let a = area_efficiency(&p).unwrap();
        assert!((area_efficiency(&big).unwrap() * 2.0 - a).abs() / a < 1e-12);
        assert!((p.array_area_mm2() - 12.582912).abs() < 1e-9);
    }

    #[test]
    fn op_counts() {
        assert_eq!(op_count(&LayerGraph::new(3)).unwrap(), 0);
        let conv = LayerGraph::sequential(432, [Layer::Conv1d { kernel: 91, stride: 11, in_len: 432, out_channels: 8 }]);
        assert_eq!(op_count(&conv).unwrap(), 46592);
        assert_eq!(op_count(&build_paper_model()).unwrap(), 112028);
    }

    #[test]
    fn ledger_checks() {
        let l = EnergyLedger::published();
        assert!(l.asic_closure().abs() < 1e-3);
        assert!(energy_report(&EnergyLedger { runtime: 0.0, ..l.clone() }).is_err());
        assert!(energy_report(&EnergyLedger { total_ops: 0.0, ..l.clone() }).is_err());
        assert!(energy_report(&EnergyLedger { dram: 1.0, ..l }).is_err());
    }

    #[test]
    fn default_rail_powers_reproduce_published_ledger() {
        let l = RailPowers::default().ledger(0.138, 65.875e6, 500);
        let p = EnergyLedger::published();
        for ((_, a), (_, b)) in l.rails().iter().zip(p.rails()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn report_formats() {
        let r = energy_report(&EnergyLedger::published()).unwrap().with_model_ops(112028);
        let text = r.to_text();
        assert!(text.contains("131750"));
        assert!(text.contains("ASIC energy efficiency"));
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("quantity,value,unit\n"));
        assert!(csv.contains("layer-formula operations per record,112028,op"));
    }
}
