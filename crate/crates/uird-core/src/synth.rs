//! Deterministic synthetic ECG-like data.
//!
//! Everything here is seeded, so experiments and the test suite run with no
//! external downloads: pulse trains with known peak positions for detector
//! validation, parameterized beat templates for class streams, and whole
//! records (signal + annotations) for end-to-end ingestion.

use crate::signal::{standardize, Annotation, Beat, RawSignal, BEAT_LEN};
use crate::{derive_seed, Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Gaussian bump component of a beat template.
#[derive(Debug, Clone, Copy)]
struct Bump {
    center: f64,
    sigma: f64,
    amplitude: f64,
}

fn gaussian(x: f64, b: &Bump) -> f64 {
    let d = (x - b.center) / b.sigma;
    b.amplitude * (-0.5 * d * d).exp()
}

/// Morphology templates, indexed from 0, distinct enough that standardized
/// beats from different templates are well separated.
fn template_bumps(template_id: usize) -> Vec<Bump> {
    match template_id {
        // narrow upright R with P and T waves
        0 => vec![
            Bump { center: 100.0, sigma: 8.0, amplitude: 0.15 },
            Bump { center: 160.0, sigma: 3.5, amplitude: 1.0 },
            Bump { center: 172.0, sigma: 5.0, amplitude: -0.25 },
            Bump { center: 235.0, sigma: 14.0, amplitude: 0.3 },
        ],
        // broad QRS complex with discordant T
        1 => vec![
            Bump { center: 160.0, sigma: 22.0, amplitude: 0.9 },
            Bump { center: 240.0, sigma: 16.0, amplitude: -0.35 },
        ],
        // inverted spike with early positive deflection
        2 => vec![
            Bump { center: 95.0, sigma: 10.0, amplitude: 0.4 },
            Bump { center: 160.0, sigma: 4.0, amplitude: -1.0 },
            Bump { center: 215.0, sigma: 12.0, amplitude: 0.2 },
        ],
        // double spike
        3 => vec![
            Bump { center: 140.0, sigma: 5.0, amplitude: 0.8 },
            Bump { center: 185.0, sigma: 5.0, amplitude: 0.7 },
            Bump { center: 245.0, sigma: 12.0, amplitude: -0.2 },
        ],
        // long asymmetric dome with late dip
        4 => vec![
            Bump { center: 135.0, sigma: 30.0, amplitude: 0.6 },
            Bump { center: 160.0, sigma: 6.0, amplitude: 0.5 },
            Bump { center: 250.0, sigma: 10.0, amplitude: -0.5 },
        ],
        // early dip, late narrow spike
        _ => vec![
            Bump { center: 120.0, sigma: 9.0, amplitude: -0.5 },
            Bump { center: 200.0, sigma: 4.0, amplitude: 0.9 },
            Bump { center: 260.0, sigma: 14.0, amplitude: 0.25 },
        ],
    }
}

/// The noiseless waveform of a template, length [`BEAT_LEN`].
pub fn beat_template(template_id: usize) -> Vec<f64> {
    let bumps = template_bumps(template_id);
    (0..BEAT_LEN)
        .map(|i| bumps.iter().map(|b| gaussian(i as f64, b)).sum())
        .collect()
}

/// Generate `count` standardized beats of one template with seeded
/// morphological jitter (time shift, width and amplitude perturbation)
/// plus additive noise.
pub fn synthetic_beats(template_id: usize, label: char, count: usize, noise_sigma: f64, seed: u64) -> Vec<Beat> {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("beats.{label}.{template_id}")));
    let base = template_bumps(template_id);
    (0..count)
        .map(|_| {
            let shift: f64 = rng.gen_range(-4.0..4.0);
            let bumps: Vec<Bump> = base
                .iter()
                .map(|b| Bump {
                    center: b.center + shift,
                    sigma: b.sigma * rng.gen_range(0.92..1.08),
                    amplitude: b.amplitude * rng.gen_range(0.9..1.1),
                })
                .collect();
            let values: Vec<f64> = (0..BEAT_LEN)
                .map(|i| {
                    let clean: f64 = bumps.iter().map(|b| gaussian(i as f64, b)).sum();
                    clean + noise_sigma * gauss_sample(&mut rng)
                })
                .collect();
            let beat = Beat::new(values, label, 0).expect("template beat length");
            standardize(&beat)
        })
        .collect()
}

fn gauss_sample(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A train of identical Gaussian-derivative pulses at a fixed period.
///
/// Returns the signal and the true pulse centers. With `snr_db` set, white
/// Gaussian noise is added at that signal-to-noise ratio.
pub fn pulse_train(
    fs: f64,
    n_pulses: usize,
    period_s: f64,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<(RawSignal, Vec<usize>)> {
    if n_pulses == 0 || !(period_s > 0.0) || !(fs > 0.0) {
        return Err(Error::Config("pulse train needs positive fs, period and count".into()));
    }
    let lead_in = fs; // one second on each side
    let n = (lead_in * 2.0 + period_s * fs * n_pulses as f64) as usize;
    let sigma = 0.008 * fs; // 8 ms lobes
    let mut samples = vec![0.0; n];
    let mut truth = Vec::with_capacity(n_pulses);
    for p in 0..n_pulses {
        let center = lead_in + period_s * fs * (p as f64 + 0.5);
        truth.push(center.round() as usize);
        let lo = (center - 6.0 * sigma).max(0.0) as usize;
        let hi = ((center + 6.0 * sigma) as usize).min(n - 1);
        for (i, s) in samples.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let t = (i as f64 - center) / sigma;
            // derivative-of-Gaussian: positive lobe just before the center
            *s += -t * (-0.5 * t * t).exp();
        }
    }
    if let Some(snr) = snr_db {
        let p_signal = samples.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let noise_std = (p_signal / 10f64.powf(snr / 10.0)).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "pulse_train.noise"));
        for s in &mut samples {
            *s += noise_std * gauss_sample(&mut rng);
        }
    }
    Ok((RawSignal::new(samples, fs, 0, "pulse_train".into())?, truth))
}

/// A synthetic multi-class record: beats placed at a steady rhythm, one
/// annotation per beat, slow baseline wander, and a sharp R deflection on
/// every class so the detector has something to find.
///
/// `classes` gives `(label, template_id, count)` per class; beats are
/// interleaved round-robin.
pub fn synthetic_record(
    classes: &[(char, usize, usize)],
    fs: f64,
    seed: u64,
) -> Result<(RawSignal, Vec<Annotation>)> {
    if classes.is_empty() {
        return Err(Error::Config("synthetic record needs at least one class".into()));
    }
    let total: usize = classes.iter().map(|c| c.2).sum();
    if total == 0 {
        return Err(Error::Config("synthetic record needs at least one beat".into()));
    }
    let beat_period = 0.9; // seconds between R-peaks
    let lead = 2.0 * fs;
    let n = (2.0 * lead + beat_period * fs * total as f64) as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "record"));
    let mut samples: Vec<f64> = (0..n)
        .map(|i| 0.08 * (2.0 * std::f64::consts::PI * 0.2 * i as f64 / fs).sin())
        .collect();
    let mut annotations = Vec::with_capacity(total);

    // round-robin order over classes, exhausting counts
    let mut remaining: Vec<usize> = classes.iter().map(|c| c.2).collect();
    let mut order = Vec::with_capacity(total);
    while order.len() < total {
        for (ci, rem) in remaining.iter_mut().enumerate() {
            if *rem > 0 {
                order.push(ci);
                *rem -= 1;
            }
        }
    }

    for (k, &ci) in order.iter().enumerate() {
        let (label, template_id, _) = classes[ci];
        let r_pos = lead + beat_period * fs * (k as f64 + 0.5);
        let r_idx = r_pos.round() as usize;
        let start = r_idx as i64 - 160;
        // classes keep their off-center morphology; bumps at the R position
        // are replaced by one standard upright spike so every beat is
        // detectable and none cancels it
        let mut bumps: Vec<Bump> = template_bumps(template_id)
            .into_iter()
            .filter(|b| (b.center - 160.0).abs() > 12.0)
            .collect();
        bumps.push(Bump { center: 160.0, sigma: 3.0, amplitude: 1.2 });
        for (off, b) in bumps.iter().flat_map(|b| {
            let lo = ((b.center - 5.0 * b.sigma).floor() as i64).max(0);
            let hi = ((b.center + 5.0 * b.sigma).ceil() as i64).min(BEAT_LEN as i64 - 1);
            (lo..=hi).map(move |off| (off, *b))
        }) {
            let idx = start + off;
            if idx >= 0 && (idx as usize) < n {
                samples[idx as usize] += gaussian(off as f64, &b);
            }
        }
        annotations.push(Annotation {
            sample_index: r_idx,
            symbol: label,
        });
    }
    for s in &mut samples {
        *s += 0.01 * gauss_sample(&mut rng);
    }
    Ok((RawSignal::new(samples, fs, 0, "synthetic".into())?, annotations))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_distinct() {
        let a = beat_template(0);
        let b = beat_template(1);
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(dist > 1.0, "templates 0 and 1 too close: {dist}");
    }

    #[test]
    fn synthetic_beats_are_standardized_and_seeded() {
        let beats = synthetic_beats(0, 'N', 10, 0.05, 3);
        assert_eq!(beats.len(), 10);
        for b in &beats {
            assert!(b.standardized);
            assert_eq!(b.values.len(), BEAT_LEN);
            let mean: f64 = b.values.iter().sum::<f64>() / BEAT_LEN as f64;
            assert!(mean.abs() < 1e-6);
        }
        let again = synthetic_beats(0, 'N', 10, 0.05, 3);
        assert_eq!(beats, again);
        let other = synthetic_beats(0, 'N', 10, 0.05, 4);
        assert_ne!(beats, other);
    }

    #[test]
    fn pulse_train_truth_is_inside_signal() {
        let (sig, truth) = pulse_train(360.0, 30, 1.0, None, 1).unwrap();
        assert_eq!(truth.len(), 30);
        assert!(truth.iter().all(|&t| t < sig.len()));
    }

    #[test]
    fn record_has_one_annotation_per_beat() {
        let (sig, anns) = synthetic_record(&[('N', 0, 10), ('V', 2, 5)], 360.0, 5).unwrap();
        assert_eq!(anns.len(), 15);
        assert!(anns.iter().all(|a| a.sample_index < sig.len()));
        assert_eq!(anns.iter().filter(|a| a.symbol == 'V').count(), 5);
    }
}
