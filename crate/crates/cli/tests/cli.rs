use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bss2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bss2")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bss2(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn csv_map(path: &Path) -> HashMap<String, String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|r| r.unwrap()).map(|r| (r[0].to_string(), r[1].to_string())).collect()
}

struct Setup {
    _dir: TempDir,
    root: PathBuf,
    config: String,
}

fn setup(n: usize, extra: &str) -> Setup {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    ok(&["synth", "--n", &n.to_string(), "--afib-fraction", "0.5", "--seed", "3", "--out", data.to_str().unwrap()]);
    let config = root.join("run.toml");
    fs::write(
        &config,
        format!(
            "block_size = 25\n{extra}\n[paths]\ndata_dir = {data:?}\nlabels = {labels:?}\ncheckpoint = {ckpt:?}\noutput = {out:?}\n\
             [train]\ntest_split = 30\nepochs = 3\n",
            data = data,
            labels = data.join("labels.csv"),
            ckpt = root.join("out/model.json"),
            out = root.join("out"),
        ),
    )
    .unwrap();
    Setup { _dir: dir, config: config.to_str().unwrap().to_string(), root }
}

#[test]
fn synth_counts_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--n", "100", "--afib-fraction", "0.5", "--seed", "7", "--out", d.to_str().unwrap()]);
    }
    let labels = csv_map(&a.join("labels.csv"));
    assert_eq!(labels.len(), 100);
    assert_eq!(labels.values().filter(|v| *v == "1").count(), 50);
    for id in labels.keys() {
        let f = format!("{id}.csv");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap());
    }
}

#[test]
fn mock_pipeline_reproduces_training_metrics_from_the_checkpoint() {
    let s = setup(100, "");
    let out = s.root.join("out");
    ok(&["--config", &s.config, "--mock", "train"]);
    let first = fs::read(out.join("model.json")).unwrap();
    ok(&["--config", &s.config, "--mock", "train"]);
    assert_eq!(first, fs::read(out.join("model.json")).unwrap());

    ok(&["--config", &s.config, "--mock", "infer"]);
    let preds = csv_map(&out.join("predictions.csv"));
    assert_eq!(preds.len(), 100);
    let labels = csv_map(&s.root.join("data/labels.csv"));
    let split = csv_map(&out.join("split.csv"));
    let (mut tp, mut fn_, mut fp, mut tn) = (0, 0, 0, 0);
    for (id, part) in &split {
        if part != "test" {
            continue;
        }
        match (labels[id].as_str(), preds[id].as_str()) {
            ("1", "1") => tp += 1,
            ("1", _) => fn_ += 1,
            (_, "1") => fp += 1,
            _ => tn += 1,
        }
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("train_summary.json")).unwrap()).unwrap();
    let t = &summary["test"];
    assert_eq!((t["tp"].as_u64(), t["fn_"].as_u64(), t["fp"].as_u64(), t["tn"].as_u64()), (Some(tp), Some(fn_), Some(fp), Some(tn)));

    let history = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(history.starts_with("epoch,detection_rate,fp_rate,train_loss,target_detection,target_fp"));
    assert_eq!(history.lines().count(), 4);
}

#[test]
fn phase_log_has_four_ordered_phases_per_block() {
    let s = setup(60, "");
    ok(&["--config", &s.config, "--mock", "train"]);
    ok(&["--config", &s.config, "--block-size", "20", "infer"]);
    let mut r = csv::Reader::from_path(s.root.join("out/phases.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 12);
    let mut last_start = 0.0;
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(&row[0], (i / 4).to_string());
        assert_eq!(&row[1], ["init", "load", "infer", "store"][i % 4]);
        let start: f64 = row[2].parse().unwrap();
        assert!(start >= last_start);
        last_start = start;
        assert_eq!(&row[4], "20");
        if &row[1] == "infer" {
            let d: f64 = row[3].parse().unwrap();
            let latency: f64 = row[5].parse().unwrap();
            assert!((latency - d / 20.0).abs() <= 1e-12 * d.max(1.0));
        }
    }
    assert!(s.root.join("out/perf_report.csv").exists());
}

#[test]
fn noisy_inference_repeats_under_the_same_seed() {
    let s = setup(50, "");
    ok(&["--config", &s.config, "--mock", "train"]);
    let out = s.root.join("out/predictions.csv");
    ok(&["--config", &s.config, "--seed", "4", "--noise", "on", "infer"]);
    let a = fs::read(&out).unwrap();
    ok(&["--config", &s.config, "--seed", "4", "--noise", "on", "infer"]);
    assert_eq!(a, fs::read(&out).unwrap());
}

#[test]
fn preprocessed_activations_give_the_same_predictions() {
    let s = setup(40, "");
    ok(&["--config", &s.config, "--mock", "train"]);
    ok(&["--config", &s.config, "--mock", "infer"]);
    let from_raw = csv_map(&s.root.join("out/predictions.csv"));
    // Preprocess with the scale the checkpoint was calibrated with.
    let ckpt: serde_json::Value = serde_json::from_slice(&fs::read(s.root.join("out/model.json")).unwrap()).unwrap();
    let scale = ckpt["preproc"]["quant_scale"].as_f64().unwrap();
    let cfg = fs::read_to_string(&s.config).unwrap() + &format!("[preproc]\nquant_scale = {scale:?}\n");
    fs::write(&s.config, cfg).unwrap();
    ok(&["--config", &s.config, "preprocess"]);
    let acts = s.root.join("out/activations.csv");
    ok(&["--config", &s.config, "--mock", "infer", "--activations", acts.to_str().unwrap()]);
    assert_eq!(from_raw, csv_map(&s.root.join("out/predictions.csv")));
}

#[test]
fn report_matches_the_published_block() {
    let dir = TempDir::new().unwrap();
    let text = ok(&["--out", dir.path().to_str().unwrap(), "report"]);
    assert!(text.contains("131750") && text.contains("112028"));
    let rows = csv_map(&dir.path().join("report.csv"));
    let speed: f64 = rows["ASIC processing speed"].parse().unwrap();
    assert_eq!(format!("{:.3e}", speed), "4.774e8");
    let closure: f64 = rows["ASIC rail closure (IO+analog+digital-total)"].parse().unwrap();
    assert!(closure.abs() < 1e-12);
}

#[test]
fn errors_exit_nonzero() {
    let dir = TempDir::new().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    fs::write(p("empty.toml"), "").unwrap();
    assert!(!bss2(&["--out", &p("o"), "report", "--ledger", &p("empty.toml")]).status.success());

    fs::write(p("bad.toml"), "block_size = 0\n").unwrap();
    assert!(!bss2(&["--config", &p("bad.toml"), "report"]).status.success());
    assert!(!bss2(&["--block-size", "0", "report"]).status.success());
    assert_eq!(bss2(&["--noise", "maybe", "report"]).status.code(), Some(2));

    fs::write(p("nolabels.toml"), format!("[paths]\ndata_dir = {:?}\nlabels = {:?}\n", p("d"), p("d/labels.csv"))).unwrap();
    assert!(!bss2(&["--config", &p("nolabels.toml"), "train"]).status.success());
    assert!(!bss2(&["--config", &p("nolabels.toml"), "infer"]).status.success());
    assert!(!bss2(&["synth", "--n", "1", "--out", &p("d")]).status.success());

    // A checkpoint built for the default chip does not fit a smaller array.
    let s = setup(40, "");
    ok(&["--config", &s.config, "--mock", "train"]);
    let small = fs::read_to_string(&s.config).unwrap() + "[chip]\nrows_per_array = 64\n";
    fs::write(&s.config, small).unwrap();
    let out = bss2(&["--config", &s.config, "infer"]);
    assert!(!out.status.success());
}
