//! CSV files: raw records, labels, predictions and activation dumps.
//!
//! A record file holds `sample_rate=<hz>` on its first line and one integer
//! sample per following line. A bare `sample_rate` header is also accepted,
//! in which case the caller's default rate applies.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::analog::ActivationVector;
use crate::error::{Error, Result};
use crate::preprocess::EcgRecord;

pub const LABELS_HEADER: [&str; 2] = ["record_id", "label"];
pub const PREDICTIONS_HEADER: [&str; 2] = ["record_id", "predicted_label"];

pub fn record_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.csv"))
}

pub fn write_record(path: &Path, rec: &EcgRecord) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "sample_rate={}", rec.sample_rate)?;
    for s in &rec.samples {
        writeln!(w, "{s}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_record(path: &Path, id: &str, default_rate: f64) -> Result<EcgRecord> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| Error::Input(format!("{}: empty file", path.display())))??;
    let header = header.trim();
    let sample_rate = match header.split_once('=') {
        Some(("sample_rate", v)) => v
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("{}: bad sample rate {v:?}", path.display())))?,
        None if header == "sample_rate" => default_rate,
        _ => return Err(Error::Input(format!("{}: expected sample_rate header", path.display()))),
    };
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        samples.push(
            t.parse()
                .map_err(|_| Error::Input(format!("{}:{}: bad sample {t:?}", path.display(), i + 2)))?,
        );
    }
    let rec = EcgRecord { id: id.to_string(), samples, sample_rate, label: None };
    rec.validate()?;
    Ok(rec)
}

pub fn write_labels(path: &Path, labels: &[(String, u8)]) -> Result<()> {
    write_pairs(path, LABELS_HEADER, labels)
}

pub fn write_predictions(path: &Path, predictions: &[(String, u8)]) -> Result<()> {
    write_pairs(path, PREDICTIONS_HEADER, predictions)
}

fn write_pairs(path: &Path, header: [&str; 2], rows: &[(String, u8)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (id, label) in rows {
        w.write_record([id.as_str(), &label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, u8)>> {
    read_pairs(path, LABELS_HEADER)
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, u8)>> {
    read_pairs(path, PREDICTIONS_HEADER)
}

fn read_pairs(path: &Path, header: [&str; 2]) -> Result<Vec<(String, u8)>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != header {
        return Err(Error::Input(format!("{}: expected header {}", path.display(), header.join(","))));
    }
    let mut out = Vec::new();
    for row in r.deserialize() {
        let (id, label): (String, u8) = row?;
        if label > 1 {
            return Err(Error::Input(format!("{}: label {label} for {id} is not 0 or 1", path.display())));
        }
        out.push((id, label));
    }
    Ok(out)
}

/// Reads every labelled record of `labels` from `dir`.
pub fn load_dataset(dir: &Path, labels: &Path, default_rate: f64) -> Result<Vec<EcgRecord>> {
    read_labels(labels)?
        .into_iter()
        .map(|(id, label)| {
            let mut rec = read_record(&record_path(dir, &id), &id, default_rate)?;
            rec.label = Some(label);
            Ok(rec)
        })
        .collect()
}

/// Records of `dir` in file-name order, labelled where `labels` has an entry.
pub fn load_records(dir: &Path, labels: Option<&Path>, default_rate: f64) -> Result<Vec<EcgRecord>> {
    let known: HashMap<String, u8> = match labels {
        Some(p) => read_labels(p)?.into_iter().collect(),
        None => HashMap::new(),
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    let label_file = labels.and_then(|p| fs::canonicalize(p).ok());
    paths
        .into_iter()
        .filter(|p| fs::canonicalize(p).ok() != label_file)
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let mut rec = read_record(&p, &id, default_rate)?;
            rec.label = known.get(&id).copied();
            Ok(rec)
        })
        .collect()
}

/// `record_id,a0,a1,...`
pub fn write_activations(path: &Path, rows: &[(String, ActivationVector)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let width = rows.first().map_or(0, |r| r.1.len());
    let mut header = vec!["record_id".to_string()];
    header.extend((0..width).map(|i| format!("a{i}")));
    w.write_record(&header)?;
    for (id, a) in rows {
        if a.len() != width {
            return Err(Error::LengthMismatch { expected: width, actual: a.len() });
        }
        let mut row = vec![id.clone()];
        row.extend(a.values().iter().map(u8::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_activations(path: &Path) -> Result<Vec<(String, ActivationVector)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let id = row.get(0).unwrap_or_default().to_string();
        let values = row
            .iter()
            .skip(1)
            .map(|v| v.parse::<u8>().map_err(|_| Error::Input(format!("{id}: bad activation {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push((id, ActivationVector::new(values)));
    }
    Ok(out)
}
