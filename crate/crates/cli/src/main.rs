mod phase;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use bss2_core::graph::{build_paper_model, lower, partition, reference, Checkpoint, Runtime};
use bss2_core::perf::{block_ops, energy_report, op_count, EnergyLedger};
use bss2_core::preprocess::preprocess_record;
use bss2_core::trainer::{write_history, prepare, train, Metrics};
use bss2_core::{io, synth, ActivationVector, QuantizedModel, RunConfig};

use phase::{write_phase_logs, Phase, PhaseLog};

#[derive(Parser, Debug)]
#[command(name = "bss2", version, about = "Analog synapse-array ECG classifier toolchain")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training, noise and synthesis seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    noise: Option<Switch>,
    /// Use the noise-free integer evaluator instead of the chip simulator.
    #[arg(long, global = true)]
    mock: bool,
    #[arg(long, global = true)]
    block_size: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic records and labels.csv.
    Synth {
        #[arg(long, default_value_t = 4000)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        afib_fraction: f64,
    },
    /// Write the 5-bit activations of every record.
    Preprocess,
    /// Train on the labelled records and write a checkpoint.
    Train,
    /// Classify records block by block with the checkpoint.
    Infer {
        /// Preprocessed activations instead of raw records.
        #[arg(long)]
        activations: Option<PathBuf>,
    },
    /// Energy, throughput and per-record cost report.
    Report {
        /// TOML energy ledger; defaults to the config's or the published one.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.noise.seed = seed;
    }
    if let Some(n) = cli.noise {
        cfg.noise.enabled = matches!(n, Switch::On);
    }
    if cli.mock {
        cfg.train.mock_mode = true;
    }
    if let Some(b) = cli.block_size {
        cfg.block_size = b;
    }
    if let Some(out) = &cli.out {
        cfg.paths.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth { n, afib_fraction } => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            cmd_synth(&cfg, &dir, *n, *afib_fraction, cli.seed.unwrap_or(0))
        }
        Command::Preprocess => cmd_preprocess(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Infer { activations } => cmd_infer(&cfg, activations.as_deref()),
        Command::Report { ledger } => cmd_report(&cfg, ledger.as_deref()),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.paths.output).with_context(|| format!("creating {}", cfg.paths.output.display()))?;
    Ok(&cfg.paths.output)
}

fn labels_if_present(cfg: &RunConfig) -> Option<&Path> {
    Some(cfg.paths.labels.as_path()).filter(|p| p.exists())
}

fn cmd_synth(cfg: &RunConfig, dir: &Path, n: usize, afib_fraction: f64, seed: u64) -> Result<()> {
    let records = synth::synth_dataset(n, afib_fraction, seed, &cfg.synth)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for r in &records {
        io::write_record(&io::record_path(dir, &r.id), r)?;
    }
    let labels: Vec<(String, u8)> = records.iter().map(|r| (r.id.clone(), r.label.unwrap_or(0))).collect();
    io::write_labels(&dir.join("labels.csv"), &labels)?;
    let afib = labels.iter().filter(|l| l.1 == 1).count();
    println!("wrote {n} records ({afib} AFib) to {}", dir.display());
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig) -> Result<()> {
    let records = io::load_records(&cfg.paths.data_dir, labels_if_present(cfg), cfg.preproc.sample_rate)?;
    let rows = records
        .iter()
        .map(|r| Ok((r.id.clone(), preprocess_record(r, &cfg.preproc)?)))
        .collect::<Result<Vec<_>>>()?;
    let path = out_dir(cfg)?.join("activations.csv");
    io::write_activations(&path, &rows)?;
    println!("wrote {} activation vectors to {}", rows.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    stopped_early: bool,
    test: Metrics,
    detection_rate: f64,
    false_positive_rate: f64,
    quant_scale: f64,
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    if !cfg.paths.labels.exists() {
        bail!("labels file {} not found", cfg.paths.labels.display());
    }
    let records = io::load_dataset(&cfg.paths.data_dir, &cfg.paths.labels, cfg.preproc.sample_rate)?;
    let (preproc, train_set, test_set) = prepare(&records, &cfg.preproc, cfg.train.test_split, cfg.train.seed)?;
    let outcome = train(build_paper_model(), &train_set, &test_set, &cfg.train, &cfg.chip, &cfg.noise.model())?;
    let out = out_dir(cfg)?;

    if let Some(parent) = cfg.paths.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Checkpoint::from_model(&outcome.model, Some(preproc.clone()))?.save(&cfg.paths.checkpoint)?;
    write_history(&outcome.history, fs::File::create(out.join("metrics.csv"))?)?;

    let mut split = csv::Writer::from_path(out.join("split.csv"))?;
    split.write_record(["record_id", "split"])?;
    for (ids, name) in [(&train_set.ids, "train"), (&test_set.ids, "test")] {
        for id in ids {
            split.write_record([id.as_str(), name])?;
        }
    }
    split.flush()?;

    let test = *outcome.final_metrics().context("no epochs ran")?;
    let summary = TrainSummary {
        epochs: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        test,
        detection_rate: test.afib_detection_rate(),
        false_positive_rate: test.false_positive_rate(),
        quant_scale: preproc.quant_scale,
    };
    fs::write(out.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained {} epochs: detection {:.3}, false positives {:.3}; checkpoint {}",
        summary.epochs,
        summary.detection_rate,
        summary.false_positive_rate,
        cfg.paths.checkpoint.display()
    );
    Ok(())
}

enum Engine {
    Mock(QuantizedModel),
    Chip(Box<Runtime>),
}

impl Engine {
    fn infer(&mut self, cfg: &RunConfig, x: &ActivationVector) -> Result<u8> {
        let inf = match self {
            Engine::Mock(model) => reference::evaluate(model, &cfg.chip, x)?,
            Engine::Chip(rt) => rt.run(x)?,
        };
        Ok(inf.label as u8)
    }
}

/// Where one block's inputs come from.
enum Source {
    Records(Vec<PathBuf>),
    Activations(Vec<(String, ActivationVector)>),
}

fn cmd_infer(cfg: &RunConfig, activations: Option<&Path>) -> Result<()> {
    let checkpoint = Checkpoint::load(&cfg.paths.checkpoint)
        .with_context(|| format!("reading checkpoint {}", cfg.paths.checkpoint.display()))?;
    let model = checkpoint.to_model()?;
    model.check_geometry(&cfg.chip).context("checkpoint does not fit the configured chip")?;
    let preproc = checkpoint.preproc.clone().unwrap_or_else(|| cfg.preproc.clone());

    let source = match activations {
        Some(p) => Source::Activations(io::read_activations(p)?),
        None => {
            let mut paths: Vec<PathBuf> = fs::read_dir(&cfg.paths.data_dir)
                .with_context(|| format!("reading {}", cfg.paths.data_dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                .filter(|p| fs::canonicalize(p).ok() != fs::canonicalize(&cfg.paths.labels).ok())
                .collect();
            paths.sort();
            Source::Records(paths)
        }
    };
    let total = match &source {
        Source::Records(p) => p.len(),
        Source::Activations(a) => a.len(),
    };
    if total == 0 {
        bail!("no records to classify");
    }

    let out = out_dir(cfg)?.to_path_buf();
    let pred_path = out.join("predictions.csv");
    let mut predictions: Vec<(String, u8)> = Vec::with_capacity(total);
    let origin = Instant::now();
    let mut logs = Vec::new();
    for (block, start) in (0..total).step_by(cfg.block_size).enumerate() {
        let end = (start + cfg.block_size).min(total);
        let mut log = PhaseLog::new(origin, block);
        let mut engine = log.time(Phase::Init, || {
            Ok(if cfg.train.mock_mode {
                Engine::Mock(model.clone())
            } else {
                let plan = partition(&model.graph, &cfg.chip, cfg.chips)?;
                let stream = lower(&plan, &model.graph)?;
                let mut rt = Runtime::new(stream, model.clone(), &cfg.chip, &cfg.noise.model())?;
                rt.deploy()?;
                Engine::Chip(Box::new(rt))
            })
        })?;
        let inputs: Vec<(String, ActivationVector)> = log.time(Phase::Load, || match &source {
            Source::Activations(a) => Ok(a[start..end].to_vec()),
            Source::Records(paths) => paths[start..end]
                .iter()
                .map(|p| {
                    let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                    let rec = io::read_record(p, &id, preproc.sample_rate)?;
                    Ok((id, preprocess_record(&rec, &preproc)?))
                })
                .collect(),
        })?;
        let labels = log.time(Phase::Infer, || {
            inputs.iter().map(|(_, x)| engine.infer(cfg, x)).collect::<Result<Vec<u8>>>()
        })?;
        log.records = labels.len();
        predictions.extend(inputs.into_iter().map(|(id, _)| id).zip(labels));
        log.time(Phase::Store, || Ok(io::write_predictions(&pred_path, &predictions)?))?;
        logs.push(log);
    }
    write_phase_logs(&out.join("phases.csv"), &logs)?;

    let infer_time: f64 = logs.iter().map(|l| l.duration(Phase::Infer).as_secs_f64()).sum();
    let ops = block_ops(&model.graph, total, cfg.perf.convention_factor)?;
    let report =
        energy_report(&cfg.perf.rails.ledger(infer_time, ops, total))?.with_model_ops(op_count(&model.graph)?);
    fs::write(out.join("perf_report.txt"), report.to_text())?;
    report.write_csv(fs::File::create(out.join("perf_report.csv"))?)?;

    println!(
        "classified {total} records in {} block(s); {:.1} us/record",
        logs.len(),
        infer_time / total as f64 * 1e6
    );
    if let Some(labels) = labels_if_present(cfg) {
        let known: HashMap<String, u8> = io::read_labels(labels)?.into_iter().collect();
        let (p, l): (Vec<u8>, Vec<u8>) =
            predictions.iter().filter_map(|(id, p)| known.get(id).map(|&l| (*p, l))).unzip();
        if !l.is_empty() {
            let m = Metrics::from_predictions(&p, &l)?;
            println!(
                "on {} labelled records: detection {:.3}, false positives {:.3}",
                l.len(),
                m.afib_detection_rate(),
                m.false_positive_rate()
            );
        }
    }
    Ok(())
}

fn cmd_report(cfg: &RunConfig, ledger: Option<&Path>) -> Result<()> {
    let ledger = match ledger {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading ledger {}", p.display()))?;
            toml::from_str::<EnergyLedger>(&text).with_context(|| format!("incomplete ledger {}", p.display()))?
        }
        None => cfg.perf.ledger.clone().unwrap_or_else(EnergyLedger::published),
    };
    let report = energy_report(&ledger)?.with_model_ops(op_count(&build_paper_model())?);
    let out = out_dir(cfg)?;
    fs::write(out.join("report.txt"), report.to_text())?;
    report.write_csv(fs::File::create(out.join("report.csv"))?)?;
    print!("{}", report.to_text());
    Ok(())
}
