//! ECG record ingestion: parsing, filtering, R-peak detection, beat
//! segmentation, standardization, and dataset splitting.

mod fir;
mod pan_tompkins;
mod wfdb;

pub use fir::{bandpass_taps, filter_delay_compensated, frequency_response, highpass_fir, highpass_taps, lowpass_taps};
pub use pan_tompkins::detect_r_peaks;
pub use wfdb::{decode_frame, encode_frame, encode_wfdb212, parse_wfdb212};

use crate::{derive_seed, Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Samples per beat: 160 before the R-peak and 160 after.
pub const BEAT_LEN: usize = 320;

/// Half-width (seconds) of the annotation-matching and peak-refinement windows.
pub const MATCH_WINDOW_S: f64 = 0.05;

/// One channel of a continuous recording, in physical units.
#[derive(Debug, Clone)]
pub struct RawSignal {
    samples: Vec<f64>,
    sampling_rate_hz: f64,
    channel_id: usize,
    source_name: String,
}

impl RawSignal {
    pub fn new(samples: Vec<f64>, sampling_rate_hz: f64, channel_id: usize, source_name: String) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("signal has no samples".into()));
        }
        if !(sampling_rate_hz > 0.0) {
            return Err(Error::Invalid(format!("sampling rate {sampling_rate_hz} must be positive")));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("signal contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sampling_rate_hz,
            channel_id,
            source_name,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.sampling_rate_hz
    }

    pub fn channel_id(&self) -> usize {
        self.channel_id
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A labeled sample position in a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    pub sample_index: usize,
    pub symbol: char,
}

/// One standardized cardiac cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct Beat {
    pub values: Vec<f64>,
    pub label: char,
    pub r_peak_index: usize,
    pub standardized: bool,
    /// Set when the flat-beat guard zeroed this beat during standardization.
    pub degenerate: bool,
    /// Set on SMOTE-generated pseudo beats; real recordings are `false`.
    pub synthetic: bool,
}

impl Beat {
    pub fn new(values: Vec<f64>, label: char, r_peak_index: usize) -> Result<Self> {
        if values.len() != BEAT_LEN {
            return Err(Error::Invalid(format!(
                "beat must hold {BEAT_LEN} samples, got {}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("beat contains non-finite values".into()));
        }
        Ok(Self {
            values,
            label,
            r_peak_index,
            standardized: false,
            degenerate: false,
            synthetic: false,
        })
    }
}

/// Per-beat z-score with population standard deviation. Flat beats
/// (std below `1e-8`) become all zeros with the degenerate flag set, so a
/// corrupt segment cannot abort a batch run.
pub fn standardize(beat: &Beat) -> Beat {
    let n = beat.values.len() as f64;
    let mean: f64 = beat.values.iter().sum::<f64>() / n;
    let var: f64 = beat.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let mut out = beat.clone();
    if std < 1e-8 {
        out.values = vec![0.0; beat.values.len()];
        out.degenerate = true;
    } else {
        out.values = beat.values.iter().map(|v| (v - mean) / std).collect();
    }
    out.standardized = true;
    out
}

/// Result of cutting beats out of a record.
#[derive(Debug, Clone, Default)]
pub struct SegmentOutcome {
    pub beats: Vec<Beat>,
    /// Peaks whose 320-sample window would overrun the record.
    pub dropped_boundary: usize,
    /// Peaks with no annotation within the matching window.
    pub dropped_unlabeled: usize,
}

/// Cut one beat per peak that has an annotation within ±50 ms; the nearest
/// annotation wins, ties toward the earlier one. Windows overrunning the
/// record are dropped and counted, never an error.
pub fn segment_beats(signal: &RawSignal, peaks: &[usize], annotations: &[Annotation]) -> SegmentOutcome {
    let half = BEAT_LEN / 2;
    let window = (MATCH_WINDOW_S * signal.sampling_rate_hz()).round() as i64;
    let mut anns: Vec<Annotation> = annotations.to_vec();
    anns.sort_by_key(|a| a.sample_index);

    let mut out = SegmentOutcome::default();
    for &peak in peaks {
        let Some(symbol) = nearest_annotation(&anns, peak, window) else {
            out.dropped_unlabeled += 1;
            continue;
        };
        if peak < half || peak + half > signal.len() {
            out.dropped_boundary += 1;
            continue;
        }
        let values = signal.samples()[peak - half..peak + half].to_vec();
        match Beat::new(values, symbol, peak) {
            Ok(beat) => out.beats.push(beat),
            Err(_) => out.dropped_boundary += 1,
        }
    }
    out
}

fn nearest_annotation(sorted: &[Annotation], peak: usize, window: i64) -> Option<char> {
    let p = peak as i64;
    let split = sorted.partition_point(|a| (a.sample_index as i64) < p);
    let before = split.checked_sub(1).map(|i| sorted[i]);
    let after = sorted.get(split).copied();
    let dist = |a: &Annotation| (a.sample_index as i64 - p).abs();
    let candidate = match (before, after) {
        (Some(b), Some(a)) => {
            // nearest wins; a tie goes to the earlier annotation
            if dist(&b) <= dist(&a) {
                Some(b)
            } else {
                Some(a)
            }
        }
        (Some(b), None) => Some(b),
        (None, Some(a)) => Some(a),
        (None, None) => None,
    };
    candidate.filter(|a| dist(a) <= window).map(|a| a.symbol)
}

/// Stratified train/test split: per label, a seeded shuffle and a
/// `round(ratio·n)` cut, so each class lands within one beat of the ratio
/// and the partition is reproducible.
pub fn split_train_test(beats: &[Beat], ratio: f64, seed: u64) -> Result<(Vec<Beat>, Vec<Beat>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut by_label: BTreeMap<char, Vec<usize>> = BTreeMap::new();
    for (i, b) in beats.iter().enumerate() {
        by_label.entry(b.label).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (label, mut idxs) in by_label {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("split.{label}")));
        idxs.shuffle(&mut rng);
        let n_train = ((ratio * idxs.len() as f64).round() as usize).min(idxs.len());
        train_idx.extend_from_slice(&idxs[..n_train]);
        test_idx.extend_from_slice(&idxs[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| beats[i].clone()).collect(),
        test_idx.iter().map(|&i| beats[i].clone()).collect(),
    ))
}

/// Load beats from `label,v1,...,v320` CSV (optionally with a trailing
/// `synthetic=0|1` column). When `alphabet` is given, labels outside it are
/// rejected. Errors carry 1-based line numbers.
pub fn load_beatset_csv(path: &Path, alphabet: Option<&[char]>) -> Result<Vec<Beat>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut beats = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        beats.push(parse_beat_line(&line, lineno, alphabet)?);
    }
    Ok(beats)
}

fn parse_beat_line(line: &str, lineno: usize, alphabet: Option<&[char]>) -> Result<Beat> {
    let fields: Vec<&str> = line.split(',').collect();
    let (n_values, synthetic) = match fields.len() {
        n if n == BEAT_LEN + 1 => (BEAT_LEN, false),
        n if n == BEAT_LEN + 2 => {
            let last = fields[BEAT_LEN + 1].trim();
            match last.strip_prefix("synthetic=") {
                Some("0") => (BEAT_LEN, false),
                Some("1") => (BEAT_LEN, true),
                _ => {
                    return Err(Error::Csv {
                        line: lineno,
                        message: format!("expected trailing synthetic=0|1, got {last:?}"),
                    })
                }
            }
        }
        n => {
            return Err(Error::Csv {
                line: lineno,
                message: format!("expected {} fields (label + {BEAT_LEN} values), got {n}", BEAT_LEN + 1),
            })
        }
    };
    let label_field = fields[0].trim();
    let mut chars = label_field.chars();
    let (label, extra) = (chars.next(), chars.next());
    let label = match (label, extra) {
        (Some(c), None) => c,
        _ => {
            return Err(Error::Csv {
                line: lineno,
                message: format!("label must be a single character, got {label_field:?}"),
            })
        }
    };
    if let Some(alpha) = alphabet {
        if !alpha.contains(&label) {
            return Err(Error::Csv {
                line: lineno,
                message: format!("unknown label {label:?} (alphabet {alpha:?})"),
            });
        }
    }
    let mut values = Vec::with_capacity(n_values);
    for f in &fields[1..=n_values] {
        let v: f64 = f.trim().parse().map_err(|_| Error::Csv {
            line: lineno,
            message: format!("non-numeric value {f:?}"),
        })?;
        if !v.is_finite() {
            return Err(Error::Csv {
                line: lineno,
                message: format!("non-finite value {f:?}"),
            });
        }
        values.push(v);
    }
    let mut beat = Beat::new(values, label, 0).map_err(|e| Error::Csv {
        line: lineno,
        message: e.to_string(),
    })?;
    beat.synthetic = synthetic;
    Ok(beat)
}

/// Write beats as `label,v1,...,v320`; with `with_synthetic_column` a
/// trailing `synthetic=0|1` field is appended.
pub fn save_beatset_csv(path: &Path, beats: &[Beat], with_synthetic_column: bool) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for b in beats {
        write!(f, "{}", b.label)?;
        for v in &b.values {
            write!(f, ",{v}")?;
        }
        if with_synthetic_column {
            write!(f, ",synthetic={}", u8::from(b.synthetic))?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Load a `sample_index,symbol` annotation sidecar.
pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut anns = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (idx, sym) = trimmed.split_once(',').ok_or_else(|| Error::Csv {
            line: lineno,
            message: "expected sample_index,symbol".into(),
        })?;
        let sample_index: usize = idx.trim().parse().map_err(|_| Error::Csv {
            line: lineno,
            message: format!("bad sample index {idx:?}"),
        })?;
        let sym = sym.trim();
        let mut chars = sym.chars();
        match (chars.next(), chars.next()) {
            (Some(symbol), None) => anns.push(Annotation { sample_index, symbol }),
            _ => {
                return Err(Error::Csv {
                    line: lineno,
                    message: format!("symbol must be a single character, got {sym:?}"),
                })
            }
        }
    }
    Ok(anns)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beat_with(values: Vec<f64>, label: char) -> Beat {
        Beat::new(values, label, 0).unwrap()
    }

    #[test]
    fn standardize_zero_mean_unit_std() {
        let mut vals = vec![0.0; BEAT_LEN];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = (i as f64 * 0.1).sin() * 3.0 + 7.0;
        }
        let b = standardize(&beat_with(vals, 'N'));
        assert!(b.standardized && !b.degenerate);
        let mean: f64 = b.values.iter().sum::<f64>() / BEAT_LEN as f64;
        let std = (b.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / BEAT_LEN as f64).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn standardize_flat_beat_guards() {
        let b = standardize(&beat_with(vec![4.2; BEAT_LEN], 'N'));
        assert!(b.degenerate);
        assert!(b.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_is_scale_invariant() {
        let mut vals = vec![1.0; BEAT_LEN];
        for v in vals.iter_mut().skip(160) {
            *v = 3.0;
        }
        let a = standardize(&beat_with(vals.clone(), 'N'));
        let scaled: Vec<f64> = vals.iter().map(|v| v * 10.0).collect();
        let b = standardize(&beat_with(scaled, 'N'));
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_exact_boundary_and_drops() {
        let mut samples = vec![0.0; BEAT_LEN];
        for (i, v) in samples.iter_mut().enumerate() {
            *v = i as f64;
        }
        let sig = RawSignal::new(samples, 360.0, 0, "t".into()).unwrap();
        let anns = vec![
            Annotation { sample_index: 160, symbol: 'N' },
            Annotation { sample_index: 100, symbol: 'V' },
        ];
        let out = segment_beats(&sig, &[160, 100, 300], &anns);
        // peak 160: spans exactly [0, 320); peak 100 window would start at −60;
        // peak 300 has no annotation within ±50 ms (window 18 samples at 360 Hz)
        assert_eq!(out.beats.len(), 1);
        assert_eq!(out.beats[0].values[0], 0.0);
        assert_eq!(out.beats[0].values[319], 319.0);
        assert_eq!(out.beats[0].label, 'N');
        assert_eq!(out.dropped_boundary, 1);
        assert_eq!(out.dropped_unlabeled, 1);
    }

    #[test]
    fn annotation_tie_goes_to_earlier() {
        let sig = RawSignal::new(vec![0.0; 1000], 360.0, 0, "t".into()).unwrap();
        let anns = vec![
            Annotation { sample_index: 495, symbol: 'A' },
            Annotation { sample_index: 505, symbol: 'B' },
        ];
        let out = segment_beats(&sig, &[500], &anns);
        assert_eq!(out.beats[0].label, 'A');
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let mut beats = Vec::new();
        for i in 0..50 {
            beats.push(beat_with(vec![i as f64; BEAT_LEN], 'N'));
        }
        for i in 0..50 {
            beats.push(beat_with(vec![-(i as f64); BEAT_LEN], 'V'));
        }
        let (train, test) = split_train_test(&beats, 0.8, 7).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        assert_eq!(train.iter().filter(|b| b.label == 'N').count(), 40);
        assert_eq!(train.iter().filter(|b| b.label == 'V').count(), 40);
        let (train2, test2) = split_train_test(&beats, 0.8, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let (train3, _) = split_train_test(&beats, 0.8, 8).unwrap();
        assert_ne!(train, train3, "different seeds should shuffle differently");
    }

    #[test]
    fn split_ten_beats_single_class() {
        let beats: Vec<Beat> = (0..10).map(|i| beat_with(vec![i as f64; BEAT_LEN], 'N')).collect();
        let (train, test) = split_train_test(&beats, 0.8, 1).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
    }

    #[test]
    fn beatset_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("beats.csv");

        let beats = vec![
            standardize(&beat_with((0..BEAT_LEN).map(|i| (i as f64 * 0.7).cos()).collect(), 'N')),
            standardize(&beat_with((0..BEAT_LEN).map(|i| (i as f64 * 0.3).sin()).collect(), 'V')),
        ];
        save_beatset_csv(&path, &beats, false).unwrap();
        let loaded = load_beatset_csv(&path, Some(&['N', 'V'])).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].label, 'N');
        assert!(!loaded[0].synthetic);
        for (a, b) in loaded[0].values.iter().zip(&beats[0].values) {
            assert!((a - b).abs() < 1e-12);
        }

        // zero beat line
        let zeros = format!("N{}", ",0.0".repeat(BEAT_LEN));
        std::fs::write(&path, format!("{zeros}\n")).unwrap();
        let loaded = load_beatset_csv(&path, None).unwrap();
        assert!(loaded[0].values.iter().all(|&v| v == 0.0));

        // empty file
        std::fs::write(&path, "").unwrap();
        assert!(load_beatset_csv(&path, None).unwrap().is_empty());

        // arity error names the line
        let short = format!("N{}", ",0.0".repeat(BEAT_LEN - 1));
        std::fs::write(&path, format!("{zeros}\n{short}\n")).unwrap();
        match load_beatset_csv(&path, None).unwrap_err() {
            Error::Csv { line, .. } => assert_eq!(line, 2),
            other => panic!("expected csv error, got {other}"),
        }

        // unknown label
        std::fs::write(&path, format!("Q{}\n", ",0.0".repeat(BEAT_LEN))).unwrap();
        assert!(load_beatset_csv(&path, Some(&['N'])).is_err());

        // synthetic column round trip
        let mut synth_beat = beats[0].clone();
        synth_beat.synthetic = true;
        save_beatset_csv(&path, &[synth_beat], true).unwrap();
        let loaded = load_beatset_csv(&path, None).unwrap();
        assert!(loaded[0].synthetic);
    }

    #[test]
    fn annotation_sidecar_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.ann");
        std::fs::write(&path, "# comment\n100,N\n350,V\n").unwrap();
        let anns = load_annotations(&path).unwrap();
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[1], Annotation { sample_index: 350, symbol: 'V' });
        std::fs::write(&path, "abc,N\n").unwrap();
        assert!(load_annotations(&path).is_err());
    }
}
