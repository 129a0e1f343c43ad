//! The closed loop: gate incoming batches on MadeGAN novelty, synthesize
//! pseudo-replay for every known class, retrain the classifier, fine-tune
//! the detector, fit a new generator, recalibrate τ.
//!
//! The loop stores only the detected representative samples per class, not
//! the full historical datasets; the replay source decides whether the
//! classifier trains on SMOTE pseudo data (the full method) or on those
//! stored real samples (the detector-only ablation).

use crate::classifier::{BeatClassifier, ClassifierArch, TrainOptions};
use crate::madegan::{MadeGan, MadeGanArch, MadeGanConfig};
use crate::metrics::TaskReport;
use crate::signal::{save_beatset_csv, split_train_test, Beat};
use crate::smote::{GeneratorBank, SmoteGenerator};
use crate::{derive_seed, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// What the classifier replays for historical classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaySource {
    /// SMOTE pseudo data, one balanced pseudo class per known class.
    Pseudo,
    /// The stored real detected samples (detector-only ablation).
    RealStores,
}

/// Ordered class stream: `(symbol, beats)` in introduction order.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub classes: Vec<(char, Vec<Beat>)>,
    /// Human-readable ordering rule, recorded in manifests.
    pub ordering: String,
}

impl TaskStream {
    pub fn new(classes: Vec<(char, Vec<Beat>)>, ordering: impl Into<String>) -> Result<Self> {
        let mut seen = Vec::new();
        for (symbol, beats) in &classes {
            if seen.contains(symbol) {
                return Err(Error::Invalid(format!("duplicate class {symbol:?} in stream")));
            }
            if beats.is_empty() {
                return Err(Error::Invalid(format!("class {symbol:?} has no beats")));
            }
            seen.push(*symbol);
        }
        Ok(Self {
            classes,
            ordering: ordering.into(),
        })
    }

    pub fn symbols(&self) -> Vec<char> {
        self.classes.iter().map(|(s, _)| *s).collect()
    }
}

/// Order classes by descending sample count, ties by symbol.
pub fn order_by_sample_size(class_map: BTreeMap<char, Vec<Beat>>) -> Result<TaskStream> {
    let mut classes: Vec<(char, Vec<Beat>)> = class_map.into_iter().collect();
    classes.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    TaskStream::new(classes, "by_sample_size_desc")
}

/// Everything a run needs; fully determined by the master seed.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub madegan_arch: MadeGanArch,
    pub madegan: MadeGanConfig,
    pub classifier_arch: ClassifierArch,
    pub smote_k: usize,
    /// Train fraction of the per-class train/test split.
    pub split_ratio: f64,
    /// Held-out fraction of each detected store used only for τ.
    pub calib_fraction: f64,
    pub madegan_epochs_init: usize,
    pub madegan_epochs_finetune: usize,
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub classifier_lr: f64,
    /// A detection below this count buffers instead of triggering a task.
    pub min_novel_count: usize,
    pub replay: ReplaySource,
    pub master_seed: u64,
}

impl PipelineConfig {
    /// Desk-scale defaults sized for CPU runs.
    pub fn desk(master_seed: u64) -> Self {
        Self {
            madegan_arch: MadeGanArch::desk(),
            madegan: MadeGanConfig {
                lr: 1e-3,
                ..MadeGanConfig::default()
            },
            classifier_arch: ClassifierArch::desk(),
            smote_k: 5,
            split_ratio: 0.8,
            calib_fraction: 0.2,
            madegan_epochs_init: 15,
            madegan_epochs_finetune: 6,
            classifier_epochs: 25,
            classifier_batch: 32,
            classifier_lr: 1e-3,
            min_novel_count: 20,
            replay: ReplaySource::Pseudo,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.split_ratio && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio {} outside (0,1)", self.split_ratio)));
        }
        if !(0.0 < self.calib_fraction && self.calib_fraction < 1.0) {
            return Err(Error::Config(format!(
                "calib_fraction {} outside (0,1)",
                self.calib_fraction
            )));
        }
        if self.madegan_epochs_init == 0 || self.classifier_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if self.smote_k == 0 {
            return Err(Error::Config("smote_k must be positive".into()));
        }
        Ok(())
    }

    fn classifier_opts(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.classifier_epochs,
            batch_size: self.classifier_batch,
            lr: self.classifier_lr,
            seed,
            balanced: true,
            require_all_classes: true,
        }
    }
}

/// The per-class retained real samples: the detector's fine-tune slice and
/// the τ-calibration slice.
#[derive(Debug, Clone)]
struct ClassStore {
    symbol: char,
    train: Vec<Beat>,
    calib: Vec<Beat>,
}

/// Outcome of feeding one batch through the gate.
#[derive(Debug, Clone)]
pub struct DetectionSplit {
    pub detected_novel: Vec<Beat>,
    pub flagged_existing: Vec<Beat>,
    pub scores: Vec<f64>,
}

/// Live state of the loop.
pub struct PipelineState {
    cfg: PipelineConfig,
    madegan: MadeGan,
    classifier: Option<BeatClassifier>,
    bank: GeneratorBank,
    stores: Vec<ClassStore>,
    pending_novel: Vec<Beat>,
    tasks_completed: usize,
    reports: Vec<TaskReport>,
    log: Vec<String>,
}

impl PipelineState {
    /// Initial phase: detector and generator 0 on the normal class; no
    /// classifier yet.
    pub fn init_phase(symbol: char, normal_beats: &[Beat], cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        if normal_beats.is_empty() {
            return Err(Error::Invalid("initial phase needs normal beats".into()));
        }
        let seed = cfg.master_seed;
        let (train, calib) = split_store(normal_beats, cfg.calib_fraction, derive_seed(seed, "store.0"))?;
        let mut madegan = MadeGan::new(
            cfg.madegan_arch.clone(),
            cfg.madegan.clone(),
            derive_seed(seed, "task0.madegan"),
        )?;
        madegan.train(&train, cfg.madegan_epochs_init, derive_seed(seed, "task0.madegan.train"))?;
        let tau = madegan.calibrate_threshold(&calib, cfg.madegan.tau_percentile)?;
        let mut bank = GeneratorBank::new();
        bank.push(SmoteGenerator::fit(
            symbol,
            normal_beats,
            cfg.smote_k,
            derive_seed(seed, "task0.generator"),
        )?)?;
        let log = vec![format!(
            "init: class {symbol:?}, {} train / {} calib beats, tau={tau:.6}",
            train.len(),
            calib.len()
        )];
        Ok(Self {
            cfg,
            madegan,
            classifier: None,
            bank,
            stores: vec![ClassStore { symbol, train, calib }],
            pending_novel: Vec::new(),
            tasks_completed: 0,
            reports: Vec::new(),
            log,
        })
    }

    pub fn generator_count(&self) -> usize {
        self.bank.len()
    }

    pub fn tasks_completed(&self) -> usize {
        self.tasks_completed
    }

    pub fn class_symbols(&self) -> Vec<char> {
        self.stores.iter().map(|s| s.symbol).collect()
    }

    pub fn madegan(&mut self) -> &mut MadeGan {
        &mut self.madegan
    }

    pub fn classifier(&mut self) -> Option<&mut BeatClassifier> {
        self.classifier.as_mut()
    }

    pub fn reports(&self) -> &[TaskReport] {
        &self.reports
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }

    /// Buffered detections too small to trigger a task so far.
    pub fn pending_novel(&self) -> &[Beat] {
        &self.pending_novel
    }

    /// Partition an incoming batch by the novelty gate under the current
    /// detector. False positives and negatives propagate faithfully.
    pub fn detect_novel_batch(&mut self, incoming: &[Beat]) -> Result<DetectionSplit> {
        let decisions = self.madegan.classify_novelty(incoming)?;
        let mut detected_novel = Vec::new();
        let mut flagged_existing = Vec::new();
        let mut scores = Vec::with_capacity(incoming.len());
        for (beat, d) in incoming.iter().zip(&decisions) {
            scores.push(d.value);
            if d.is_novel {
                detected_novel.push(beat.clone());
            } else {
                flagged_existing.push(beat.clone());
            }
        }
        Ok(DetectionSplit {
            detected_novel,
            flagged_existing,
            scores,
        })
    }

    /// One task of the loop. Returns `None` (state unchanged, decision
    /// logged) when the gate detects nothing actionable; otherwise the
    /// evaluation report over `test_beats`.
    pub fn run_task(&mut self, new_symbol: char, incoming: &[Beat], test_beats: &[Beat]) -> Result<Option<TaskReport>> {
        let task = self.tasks_completed + 1;
        let split = self.detect_novel_batch(incoming)?;
        let detected = split.detected_novel;
        if detected.len() < self.cfg.min_novel_count {
            self.log.push(format!(
                "task {task}: detected {} < min_novel_count {}; no novel class, models unchanged",
                detected.len(),
                self.cfg.min_novel_count
            ));
            self.pending_novel.extend(detected);
            return Ok(None);
        }
        let mislabeled = detected.iter().filter(|b| b.label != new_symbol).count();
        self.log.push(format!(
            "task {task}: detected {}/{} as novel ({} carried a different source label)",
            detected.len(),
            incoming.len(),
            mislabeled
        ));

        // the detected set becomes class `new_symbol` regardless of source
        // labels; the gate, not the annotation, routes samples
        let mut adopted: Vec<Beat> = detected.clone();
        for b in &mut adopted {
            b.label = new_symbol;
        }

        let seed = self.cfg.master_seed;
        let (store_train, store_calib) =
            split_store(&adopted, self.cfg.calib_fraction, derive_seed(seed, &format!("store.{task}")))?;

        // assemble the classifier's training set
        let n_new = adopted.len();
        let (train_set, real_counts, synth_counts) = match self.cfg.replay {
            ReplaySource::Pseudo => {
                let counts = vec![n_new; self.bank.len()];
                let pseudo = self.bank.synthesize_bank(&counts, task as u64)?;
                let mut set = pseudo;
                set.extend(adopted.iter().cloned());
                let mut real = vec![0; self.bank.len()];
                real.push(n_new);
                let mut synth = counts;
                synth.push(0);
                (set, real, synth)
            }
            ReplaySource::RealStores => {
                let mut set: Vec<Beat> = Vec::new();
                let mut real = Vec::new();
                for s in &self.stores {
                    let mut n = 0;
                    for b in s.train.iter().chain(&s.calib) {
                        set.push(b.clone());
                        n += 1;
                    }
                    real.push(n);
                }
                set.extend(adopted.iter().cloned());
                real.push(n_new);
                let synth = vec![0; real.len()];
                (set, real, synth)
            }
        };

        // fresh classifier over all classes seen so far
        let mut symbols = self.class_symbols();
        symbols.push(new_symbol);
        let mut classifier = BeatClassifier::build(
            symbols,
            self.cfg.classifier_arch.clone(),
            derive_seed(seed, &format!("task{task}.classifier")),
        )?;
        classifier.train(
            &train_set,
            &self.cfg.classifier_opts(derive_seed(seed, &format!("task{task}.classifier.train"))),
        )?;

        // detector fine-tune from the previous parameters over all retained
        // real data, then recalibrate τ on the calibration slices
        let mut finetune: Vec<Beat> = Vec::new();
        for s in &self.stores {
            finetune.extend(s.train.iter().cloned());
        }
        finetune.extend(store_train.iter().cloned());
        self.madegan.train(
            &finetune,
            self.cfg.madegan_epochs_finetune,
            derive_seed(seed, &format!("task{task}.madegan.train")),
        )?;
        let mut calib: Vec<Beat> = Vec::new();
        for s in &self.stores {
            calib.extend(s.calib.iter().cloned());
        }
        calib.extend(store_calib.iter().cloned());
        let tau = self.madegan.calibrate_threshold(&calib, self.cfg.madegan.tau_percentile)?;
        self.log.push(format!("task {task}: tau recalibrated to {tau:.6}"));

        // generator for the new class
        self.bank.push(SmoteGenerator::fit(
            new_symbol,
            &adopted,
            self.cfg.smote_k,
            derive_seed(seed, &format!("task{task}.generator")),
        )?)?;
        self.stores.push(ClassStore {
            symbol: new_symbol,
            train: store_train,
            calib: store_calib,
        });

        let report = classifier.evaluate_as_task(test_beats, task, real_counts, synth_counts)?;
        self.classifier = Some(classifier);
        self.tasks_completed += 1;
        self.reports.push(report.clone());
        self.log.push(format!(
            "task {task}: macro F {:.4} over {} test beats",
            report.macro_f,
            test_beats.len()
        ));
        Ok(Some(report))
    }
}

/// A whole-sequence run's outcome.
pub struct SequenceOutcome {
    pub reports: Vec<TaskReport>,
    pub state: PipelineState,
}

/// Split every class by the configured ratio, run the initial phase on the
/// first class and one task per remaining class. Evaluation at each task
/// covers the held-out test beats of every class introduced so far.
pub fn run_sequence(stream: &TaskStream, cfg: &PipelineConfig) -> Result<SequenceOutcome> {
    run_sequence_inner(stream, cfg, None)
}

/// [`run_sequence`] plus per-task artifacts under `dir`:
/// `task_<i>/{madegan.ckpt, classifier.ckpt, generators/, report.json,
/// scores.csv, decisions.log}`.
pub fn run_sequence_to_dir(stream: &TaskStream, cfg: &PipelineConfig, dir: &Path) -> Result<SequenceOutcome> {
    run_sequence_inner(stream, cfg, Some(dir))
}

fn run_sequence_inner(stream: &TaskStream, cfg: &PipelineConfig, dir: Option<&Path>) -> Result<SequenceOutcome> {
    if stream.classes.len() < 2 {
        return Err(Error::Config("need >= 2 classes for a sequence".into()));
    }
    let splits = split_stream(stream, cfg.split_ratio, cfg.master_seed)?;
    let mut state = PipelineState::init_phase(stream.classes[0].0, &splits[0].0, cfg.clone())?;

    let mut test_union: Vec<Beat> = splits[0].1.clone();
    for (i, (symbol, _)) in stream.classes.iter().enumerate().skip(1) {
        let incoming = &splits[i].0;
        // the class joins the evaluation universe only if its task runs
        let mut candidate_union = test_union.clone();
        candidate_union.extend(splits[i].1.iter().cloned());
        let report = state.run_task(*symbol, incoming, &candidate_union)?;
        match (report.as_ref(), dir) {
            (Some(report), Some(dir)) => {
                write_task_artifacts(&mut state, report, incoming, dir)?;
                test_union = candidate_union;
            }
            (Some(_), None) => test_union = candidate_union,
            (None, _) => {}
        }
    }
    Ok(SequenceOutcome {
        reports: state.reports.clone(),
        state,
    })
}

/// Stratified train/test split per class of the stream.
pub fn split_stream(stream: &TaskStream, ratio: f64, seed: u64) -> Result<Vec<(Vec<Beat>, Vec<Beat>)>> {
    stream
        .classes
        .iter()
        .map(|(_, beats)| split_train_test(beats, ratio, seed))
        .collect()
}

fn split_store(beats: &[Beat], calib_fraction: f64, seed: u64) -> Result<(Vec<Beat>, Vec<Beat>)> {
    let (train, calib) = split_train_test(beats, 1.0 - calib_fraction, seed)?;
    if calib.is_empty() {
        // tiny stores still need a calibration sample
        let mut train = train;
        let calib = vec![train.pop().ok_or_else(|| Error::Invalid("store too small".into()))?];
        return Ok((train, calib));
    }
    Ok((train, calib))
}

fn write_task_artifacts(state: &mut PipelineState, report: &TaskReport, incoming: &[Beat], dir: &Path) -> Result<()> {
    let task_dir = dir.join(format!("task_{}", report.task_index));
    std::fs::create_dir_all(task_dir.join("generators"))?;

    state.madegan.save(&task_dir.join("madegan.ckpt"))?;
    if let Some(clf) = state.classifier.as_ref() {
        clf.save(&task_dir.join("classifier.ckpt"))?;
    }
    for (i, g) in state.bank.generators().iter().enumerate() {
        let beats: Vec<Beat> = g
            .store()
            .iter()
            .map(|v| {
                let mut b = Beat::new(v.clone(), g.class_symbol(), 0)?;
                b.standardized = true;
                Ok(b)
            })
            .collect::<Result<_>>()?;
        save_beatset_csv(
            &task_dir.join("generators").join(format!("g{i}_{}.csv", g.class_symbol())),
            &beats,
            false,
        )?;
    }
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(task_dir.join("report.json"), json)?;

    let scores = state.madegan.classify_novelty(incoming)?;
    let mut csv = String::from("beat_index,score,label\n");
    for (i, s) in scores.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{}\n",
            s.value,
            if s.is_novel { "novel" } else { "existing" }
        ));
    }
    std::fs::write(task_dir.join("scores.csv"), csv)?;

    let mut log_file = std::fs::File::create(task_dir.join("decisions.log"))?;
    for line in state.log() {
        writeln!(log_file, "{line}")?;
    }
    Ok(())
}

/// Paths of the artifacts inside one task directory.
pub fn task_artifact_paths(run_dir: &Path, task_index: usize) -> Vec<PathBuf> {
    let d = run_dir.join(format!("task_{task_index}"));
    vec![
        d.join("madegan.ckpt"),
        d.join("classifier.ckpt"),
        d.join("report.json"),
        d.join("scores.csv"),
    ]
}
