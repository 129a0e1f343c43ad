//! Subcommand implementations.

use crate::config::{ClassOrder, RPeakSource, RunConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use uird_core::baselines::{madegan_only_pipeline, run_ewc_sequence, run_joint_sequence, EwcOptions};
use uird_core::metrics::{emit_forgetting_table, emit_task_table, TableFormat, TaskReport};
use uird_core::pipeline::{order_by_sample_size, run_sequence_to_dir, TaskStream};
use uird_core::signal::{
    detect_r_peaks, encode_wfdb212, highpass_fir, load_annotations, load_beatset_csv, parse_wfdb212,
    save_beatset_csv, segment_beats, split_train_test, standardize, Beat,
};
use uird_core::synth::{synthetic_beats, synthetic_record};
use uird_core::{Error, Result};

/// Strategy selector for `run-baseline`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Uird,
    Ewc,
    Joint,
    MadeganOnly,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uird => "uird",
            Strategy::Ewc => "ewc",
            Strategy::Joint => "joint",
            Strategy::MadeganOnly => "madegan_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ewc" => Ok(Strategy::Ewc),
            "joint" => Ok(Strategy::Joint),
            "madegan_only" => Ok(Strategy::MadeganOnly),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected ewc, joint or madegan_only)"
            ))),
        }
    }
}

/// Self-describing run metadata written at the root of every run directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub strategy: String,
    pub seed: u64,
    pub class_order: Vec<String>,
    pub ordering: String,
    /// SHA-256 of the embedded config document.
    pub config_hash: String,
    /// Full copy of the config, so the run can be reproduced from the
    /// manifest alone.
    pub config_toml: String,
}

impl Manifest {
    fn new(strategy: Strategy, cfg: &RunConfig, stream: &TaskStream) -> Result<Self> {
        let config_toml = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
        let mut hasher = Sha256::new();
        hasher.update(config_toml.as_bytes());
        hasher.update(cfg.seed.to_le_bytes());
        let config_hash = format!("sha256:{:x}", hasher.finalize());
        Ok(Self {
            strategy: strategy.name().to_string(),
            seed: cfg.seed,
            class_order: stream.symbols().iter().map(|c| c.to_string()).collect(),
            ordering: stream.ordering.clone(),
            config_hash,
            config_toml,
        })
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(run_dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("bad manifest: {e}")))
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(run_dir.join("manifest.json"), json)?;
        Ok(())
    }
}

/// `synth-data`: write a deterministic synthetic beatset (and optionally a
/// WFDB-212 record with an annotation sidecar) plus a ready-to-run config.
pub fn cmd_synth_data(out: &Path, classes: &str, noise: f64, seed: u64, with_record: bool) -> Result<()> {
    let specs = parse_class_specs(classes)?;
    std::fs::create_dir_all(out)?;

    let mut beats: Vec<Beat> = Vec::new();
    for &(label, template, count) in &specs {
        beats.extend(synthetic_beats(template, label, count, noise, seed));
    }
    let beatset = out.join("beats.csv");
    save_beatset_csv(&beatset, &beats, false)?;

    if with_record {
        let fs_hz = 360.0;
        let (signal, annotations) = synthetic_record(&specs.iter().map(|&(l, t, c)| (l, t, c)).collect::<Vec<_>>(), fs_hz, seed)?;
        // quantize to 12-bit range around a mid-scale baseline
        let gain = 200.0;
        let baseline = 0.0;
        let quantized: Vec<i16> = signal
            .samples()
            .iter()
            .map(|v| ((v * gain + baseline).round() as i64).clamp(-2048, 2047) as i16)
            .collect();
        let padded = if quantized.len() % 2 == 1 {
            let mut q = quantized;
            q.push(0);
            q
        } else {
            quantized
        };
        std::fs::write(out.join("record.dat"), encode_wfdb212(&[padded])?)?;
        let ann_text: String = annotations
            .iter()
            .map(|a| format!("{},{}\n", a.sample_index, a.symbol))
            .collect();
        std::fs::write(out.join("record.ann"), ann_text)?;
    }

    let alphabet: Vec<String> = specs.iter().map(|(l, _, _)| l.to_string()).collect();
    let config = format!(
        r#"seed = {seed}

[dataset]
beatset = "{beatset}"
{record_block}
[classes]
alphabet = [{alpha}]
order = "by_sample_size"
"#,
        seed = seed,
        beatset = beatset.display(),
        record_block = if with_record {
            format!(
                "record = \"{}\"\nannotations = \"{}\"\nsampling_rate_hz = 360.0\nn_channels = 1\ngains = [200.0]\nbaselines = [0.0]\n",
                out.join("record.dat").display(),
                out.join("record.ann").display()
            )
        } else {
            String::new()
        },
        alpha = alphabet
            .iter()
            .map(|s| format!("\"{s}\""))
            .collect::<Vec<_>>()
            .join(", "),
    );
    std::fs::write(out.join("config.toml"), config)?;
    println!(
        "synth-data: wrote {} beats across {} classes to {}",
        beats.len(),
        specs.len(),
        out.display()
    );
    Ok(())
}

fn parse_class_specs(spec: &str) -> Result<Vec<(char, usize, usize)>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let fields: Vec<&str> = part.split(':').collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!(
                "class spec {part:?} must be label:template:count"
            )));
        }
        let mut chars = fields[0].chars();
        let (Some(label), None) = (chars.next(), chars.next()) else {
            return Err(Error::Config(format!("label {:?} must be one character", fields[0])));
        };
        let template: usize = fields[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad template id {:?}", fields[1])))?;
        let count: usize = fields[2]
            .parse()
            .map_err(|_| Error::Config(format!("bad count {:?}", fields[2])))?;
        if count == 0 {
            return Err(Error::Config(format!("class {label:?} needs a positive count")));
        }
        out.push((label, template, count));
    }
    Ok(out)
}

/// Ingest summary written next to the extracted beatsets.
#[derive(Debug, Serialize)]
struct IngestSummary {
    record: String,
    channel: usize,
    peaks_detected: usize,
    beats_per_class: BTreeMap<String, usize>,
    dropped_boundary: usize,
    dropped_unlabeled: usize,
    degenerate_beats: usize,
    train_beats: usize,
    test_beats: usize,
}

/// `ingest`: parse → filter → locate R-peaks → segment → standardize →
/// split → write train/test beatsets and a summary.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    let (record_path, ann_path) = cfg.require_record()?;
    let fs_hz = cfg
        .dataset
        .sampling_rate_hz
        .ok_or_else(|| Error::Config("dataset.sampling_rate_hz is required for ingest".into()))?;
    let n_channels = cfg.dataset.n_channels.unwrap_or(1);
    let gains = cfg.dataset.gains.clone().unwrap_or_else(|| vec![200.0; n_channels]);
    let baselines = cfg.dataset.baselines.clone().unwrap_or_else(|| vec![0.0; n_channels]);

    let bytes = std::fs::read(record_path)?;
    let signals = parse_wfdb212(
        &bytes,
        n_channels,
        &gains,
        &baselines,
        fs_hz,
        &record_path.display().to_string(),
    )?;
    let channel = cfg.dataset.channel;
    let signal = signals
        .get(channel)
        .ok_or_else(|| Error::Config(format!("channel {channel} out of range ({} channels)", signals.len())))?;

    let filtered = highpass_fir(signal, cfg.filter.highpass_cutoff_hz, cfg.filter.highpass_order)?;
    let annotations = load_annotations(ann_path)?;
    let peaks = match cfg.dataset.r_peaks {
        RPeakSource::Detector => detect_r_peaks(&filtered)?,
        RPeakSource::Annotations => annotations.iter().map(|a| a.sample_index).collect(),
    };
    let outcome = segment_beats(&filtered, &peaks, &annotations);
    let standardized: Vec<Beat> = outcome.beats.iter().map(standardize).collect();
    let degenerate = standardized.iter().filter(|b| b.degenerate).count();
    let (train, test) = split_train_test(&standardized, cfg.training.split_ratio, cfg.seed)?;

    let out = cfg.resolve_out_dir("ingest");
    std::fs::create_dir_all(&out)?;
    save_beatset_csv(&out.join("train.csv"), &train, false)?;
    save_beatset_csv(&out.join("test.csv"), &test, false)?;
    save_beatset_csv(&out.join("all.csv"), &standardized, false)?;

    let mut beats_per_class = BTreeMap::new();
    for b in &standardized {
        *beats_per_class.entry(b.label.to_string()).or_insert(0) += 1;
    }
    let summary = IngestSummary {
        record: record_path.display().to_string(),
        channel,
        peaks_detected: peaks.len(),
        beats_per_class,
        dropped_boundary: outcome.dropped_boundary,
        dropped_unlabeled: outcome.dropped_unlabeled,
        degenerate_beats: degenerate,
        train_beats: train.len(),
        test_beats: test.len(),
    };
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Invalid(e.to_string()))?,
    )?;
    println!(
        "ingest: {} peaks, {} beats ({} boundary / {} unlabeled dropped) -> {}",
        peaks.len(),
        standardized.len(),
        outcome.dropped_boundary,
        outcome.dropped_unlabeled,
        out.display()
    );
    Ok(())
}

fn build_stream(cfg: &RunConfig) -> Result<TaskStream> {
    let path = cfg.require_beatset()?;
    let alphabet = cfg.alphabet_chars();
    let beats = load_beatset_csv(path, Some(&alphabet))?;
    let mut by_class: BTreeMap<char, Vec<Beat>> = BTreeMap::new();
    for b in beats {
        by_class.entry(b.label).or_default().push(b);
    }
    for &c in &alphabet {
        if !by_class.contains_key(&c) {
            return Err(Error::Invalid(format!("beatset has no samples for class {c:?}")));
        }
    }
    match cfg.classes.order {
        ClassOrder::BySampleSize => order_by_sample_size(by_class),
        ClassOrder::Given => {
            let classes = alphabet
                .iter()
                .map(|c| (*c, by_class.remove(c).expect("presence checked")))
                .collect();
            TaskStream::new(classes, "given")
        }
    }
}

fn write_tables(run_dir: &Path, reports: &[TaskReport]) -> Result<()> {
    std::fs::write(run_dir.join("task_table.csv"), emit_task_table(reports, TableFormat::Csv)?)?;
    std::fs::write(run_dir.join("task_table.md"), emit_task_table(reports, TableFormat::Markdown)?)?;
    std::fs::write(
        run_dir.join("forgetting_table.csv"),
        emit_forgetting_table(reports, TableFormat::Csv)?,
    )?;
    std::fs::write(
        run_dir.join("forgetting_table.md"),
        emit_forgetting_table(reports, TableFormat::Markdown)?,
    )?;
    Ok(())
}

/// `run-uird`: the full loop over the configured stream.
pub fn cmd_run_uird(cfg: &RunConfig) -> Result<PathBuf> {
    let stream = build_stream(cfg)?;
    if stream.classes.len() < 2 {
        return Err(Error::Config("need >= 2 classes".into()));
    }
    let pcfg = cfg.pipeline_config()?;
    let run_dir = cfg.resolve_out_dir(&format!("uird-seed{}", cfg.seed));
    std::fs::create_dir_all(&run_dir)?;
    Manifest::new(Strategy::Uird, cfg, &stream)?.save(&run_dir)?;

    let outcome = run_sequence_to_dir(&stream, &pcfg, &run_dir)?;
    write_tables(&run_dir, &outcome.reports)?;
    for r in &outcome.reports {
        println!(
            "task {}: macro P {:.2} R {:.2} F {:.2}",
            r.task_index, r.macro_precision, r.macro_recall, r.macro_f
        );
    }
    println!("run-uird: artifacts in {}", run_dir.display());
    Ok(run_dir)
}

/// `run-baseline`: the same stream and seeds under a comparison strategy.
pub fn cmd_run_baseline(cfg: &RunConfig, strategy: Strategy) -> Result<PathBuf> {
    let stream = build_stream(cfg)?;
    let pcfg = cfg.pipeline_config()?;
    let run_dir = cfg.resolve_out_dir(&format!("{}-seed{}", strategy.name(), cfg.seed));
    std::fs::create_dir_all(&run_dir)?;
    Manifest::new(strategy, cfg, &stream)?.save(&run_dir)?;

    let reports = match strategy {
        Strategy::Uird => unreachable!("run-uird handles the full loop"),
        Strategy::Ewc => {
            let ewc = EwcOptions {
                lambda: cfg.ewc.lambda,
                fisher_samples: cfg.ewc.fisher_samples,
            };
            run_ewc_sequence(&stream, &pcfg, &ewc)?
        }
        Strategy::Joint => run_joint_sequence(&stream, &pcfg)?,
        Strategy::MadeganOnly => {
            let outcome = madegan_only_pipeline(&stream, &pcfg)?;
            outcome.reports
        }
    };
    for r in &reports {
        let task_dir = run_dir.join(format!("task_{}", r.task_index));
        std::fs::create_dir_all(&task_dir)?;
        std::fs::write(
            task_dir.join("report.json"),
            serde_json::to_string_pretty(r).map_err(|e| Error::Invalid(e.to_string()))?,
        )?;
    }
    write_tables(&run_dir, &reports)?;
    for r in &reports {
        println!(
            "task {}: macro P {:.2} R {:.2} F {:.2}",
            r.task_index, r.macro_precision, r.macro_recall, r.macro_f
        );
    }
    println!("run-baseline ({}): artifacts in {}", strategy.name(), run_dir.display());
    Ok(run_dir)
}

fn load_reports(run_dir: &Path) -> Result<Vec<TaskReport>> {
    let mut reports = Vec::new();
    for task in 1.. {
        let p = run_dir.join(format!("task_{task}")).join("report.json");
        if !p.exists() {
            break;
        }
        let text = std::fs::read_to_string(&p)?;
        reports.push(serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?);
    }
    if reports.is_empty() {
        return Err(Error::Invalid(format!("no task reports under {}", run_dir.display())));
    }
    Ok(reports)
}

/// `report`: merge runs into side-by-side method × task tables.
pub fn cmd_report(run_dirs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut merged: Vec<(Manifest, Vec<TaskReport>)> = Vec::new();
    for dir in run_dirs {
        let manifest = Manifest::load(dir)?;
        let reports = load_reports(dir)?;
        merged.push((manifest, reports));
    }
    // all runs must share one class universe to be comparable
    let reference = &merged[0].0.class_order;
    for (m, _) in &merged[1..] {
        if &m.class_order != reference {
            return Err(Error::Invalid(format!(
                "class order mismatch: {:?} vs {:?}",
                reference, m.class_order
            )));
        }
    }

    let mut text = String::new();
    text.push_str("| Method | Task | Precision | Recall | F-score |\n|---|---|---|---|---|\n");
    for (m, reports) in &merged {
        for r in reports {
            text.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} | {:.2} |\n",
                m.strategy, r.task_index, r.macro_precision, r.macro_recall, r.macro_f
            ));
        }
    }
    text.push('\n');
    for (m, reports) in &merged {
        text.push_str(&format!("Per-class F-scores across tasks ({}):\n\n", m.strategy));
        text.push_str(&emit_forgetting_table(reports, TableFormat::Markdown)?);
        text.push('\n');
    }

    let mut csv = String::from("method,task,precision,recall,f_score\n");
    for (m, reports) in &merged {
        for r in reports {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                m.strategy, r.task_index, r.macro_precision, r.macro_recall, r.macro_f
            ));
        }
    }

    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("comparison.md"), &text)?;
        std::fs::write(out.join("comparison.csv"), &csv)?;
        println!("report: wrote comparison tables to {}", out.display());
    } else {
        println!("{text}");
    }
    Ok(text)
}
