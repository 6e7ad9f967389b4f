use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Load,
    Infer,
    Store,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Init, Phase::Load, Phase::Infer, Phase::Store];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Load => "load",
            Phase::Infer => "infer",
            Phase::Store => "store",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhaseSpan {
    pub phase: Phase,
    /// Offset from the start of the run.
    pub start: Duration,
    pub duration: Duration,
}

/// Timings of one block: init, load, infer and store, each exactly once and in that order.
#[derive(Debug, Clone)]
pub struct PhaseLog {
    origin: Instant,
    pub block: usize,
    pub spans: Vec<PhaseSpan>,
    pub records: usize,
}

impl PhaseLog {
    pub fn new(origin: Instant, block: usize) -> Self {
        Self { origin, block, spans: Vec::new(), records: 0 }
    }

    /// Runs `f` as the next phase; phases must come in protocol order.
    pub fn time<T>(&mut self, phase: Phase, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let expected = Phase::ALL[self.spans.len().min(3)];
        if self.spans.len() >= 4 || phase != expected {
            bail!("phase {} out of order", phase.name());
        }
        let t0 = Instant::now();
        let out = f()?;
        self.spans.push(PhaseSpan { phase, start: t0 - self.origin, duration: t0.elapsed() });
        Ok(out)
    }

    pub fn duration(&self, phase: Phase) -> Duration {
        self.spans.iter().filter(|s| s.phase == phase).map(|s| s.duration).sum()
    }

    /// Infer duration divided by the records of the block.
    pub fn latency_per_record(&self) -> f64 {
        if self.records == 0 {
            0.0
        } else {
            self.duration(Phase::Infer).as_secs_f64() / self.records as f64
        }
    }
}

/// `block,phase,start_s,duration_s,records,latency_per_record_s`
pub fn write_phase_logs(path: &Path, logs: &[PhaseLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["block", "phase", "start_s", "duration_s", "records", "latency_per_record_s"])?;
    for log in logs {
        for s in &log.spans {
            w.write_record([
                log.block.to_string(),
                s.phase.name().to_string(),
                s.start.as_secs_f64().to_string(),
                s.duration.as_secs_f64().to_string(),
                log.records.to_string(),
                log.latency_per_record().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
