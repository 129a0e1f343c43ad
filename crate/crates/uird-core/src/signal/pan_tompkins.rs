//! Pan-Tompkins QRS detection.
//!
//! The classic stage chain: 5–15 Hz band-pass, five-point derivative,
//! squaring, 150 ms moving-window integration, adaptive dual thresholds
//! with a 200 ms refractory period and searchback. Detections are refined
//! to the local maximum of the band-passed signal within ±50 ms.

use crate::signal::fir::{bandpass_taps, filter_delay_compensated};
use crate::signal::{RawSignal, MATCH_WINDOW_S};
use crate::{Error, Result};

const BAND_LOW_HZ: f64 = 5.0;
const BAND_HIGH_HZ: f64 = 15.0;
const INTEGRATION_S: f64 = 0.150;
const REFRACTORY_S: f64 = 0.200;
const SEARCHBACK_FACTOR: f64 = 1.66;

/// Detect R-peak sample indices. Deterministic: identical input yields an
/// identical peak list.
///
/// Requires at least 100 Hz sampling and 2 s of signal (the adaptive
/// thresholds initialize from the first two seconds).
pub fn detect_r_peaks(signal: &RawSignal) -> Result<Vec<usize>> {
    let fs = signal.sampling_rate_hz();
    if fs < 100.0 {
        return Err(Error::Invalid(format!("sampling rate {fs} Hz below the 100 Hz minimum")));
    }
    let n = signal.len();
    let init_len = (2.0 * fs) as usize;
    if n < init_len {
        return Err(Error::Invalid(format!(
            "record of {n} samples is shorter than 2 s ({init_len} samples); thresholds cannot initialize"
        )));
    }

    // stage chain, all delay-compensated so indices line up with the input
    let taps = bandpass_taps(BAND_LOW_HZ, BAND_HIGH_HZ, fs, bandpass_tap_count(fs))?;
    let filtered = filter_delay_compensated(signal.samples(), &taps);
    let deriv = five_point_derivative(&filtered);
    let squared: Vec<f64> = deriv.iter().map(|v| v * v).collect();
    let integrated = centered_moving_average(&squared, (INTEGRATION_S * fs).round() as usize);

    let refractory = (REFRACTORY_S * fs).round() as usize;
    let candidates = dominant_maxima(&integrated, refractory);

    // threshold bootstrap from the first two seconds
    let init_max = integrated[..init_len].iter().cloned().fold(0.0_f64, f64::max);
    let init_mean = integrated[..init_len].iter().sum::<f64>() / init_len as f64;
    let mut spki = 0.25 * init_max;
    let mut npki = 0.5 * init_mean;
    let thr_high = |spki: f64, npki: f64| npki + 0.25 * (spki - npki);

    let mut qrs: Vec<usize> = Vec::new();
    let mut rr_history: Vec<usize> = Vec::new();
    // candidates rejected since the last accepted QRS, available to searchback
    let mut pending: Vec<(usize, f64)> = Vec::new();

    for &(idx, pk) in &candidates {
        if let Some(&last) = qrs.last() {
            if idx - last < refractory {
                continue;
            }
        }

        // searchback: once a rhythm estimate exists and the expected beat
        // is overdue, revisit rejected candidates against the lower
        // threshold
        if rr_history.len() >= 4 {
            let rr_avg = rr_history.iter().sum::<usize>() as f64 / rr_history.len() as f64;
            if let Some(&last) = qrs.last() {
                if (idx - last) as f64 > SEARCHBACK_FACTOR * rr_avg {
                    let thr2 = 0.5 * thr_high(spki, npki);
                    let found = pending
                        .iter()
                        .filter(|(i, p)| *p > thr2 && i.saturating_sub(last) >= refractory && idx - i >= refractory)
                        .cloned()
                        .max_by(|a, b| a.1.total_cmp(&b.1));
                    if let Some((sb_idx, sb_pk)) = found {
                        spki = 0.25 * sb_pk + 0.75 * spki;
                        push_qrs(&mut qrs, &mut rr_history, sb_idx);
                        pending.clear();
                    }
                }
            }
        }

        if pk > thr_high(spki, npki) {
            spki = 0.125 * pk + 0.875 * spki;
            push_qrs(&mut qrs, &mut rr_history, idx);
            pending.clear();
        } else {
            npki = 0.125 * pk + 0.875 * npki;
            pending.push((idx, pk));
        }
    }

    Ok(refine_peaks(&filtered, &qrs, (MATCH_WINDOW_S * fs).round() as usize, refractory))
}

fn bandpass_tap_count(fs: f64) -> usize {
    // roughly a quarter second of taps, forced odd
    let taps = ((fs * 0.25).round() as usize).clamp(31, 201);
    if taps % 2 == 0 {
        taps + 1
    } else {
        taps
    }
}

fn push_qrs(qrs: &mut Vec<usize>, rr_history: &mut Vec<usize>, idx: usize) {
    if let Some(&last) = qrs.last() {
        rr_history.push(idx - last);
        if rr_history.len() > 8 {
            rr_history.remove(0);
        }
    }
    qrs.push(idx);
}

/// Classic five-point derivative, centered (zero group delay):
/// `(2x[n+1] + x[n+2] − 2x[n−1] − x[n−2]) / 8`.
fn five_point_derivative(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let get = |i: i64| -> f64 {
        if i < 0 || i >= n as i64 {
            0.0
        } else {
            x[i as usize]
        }
    };
    (0..n as i64)
        .map(|i| (2.0 * get(i + 1) + get(i + 2) - 2.0 * get(i - 1) - get(i - 2)) / 8.0)
        .collect()
}

/// Centered moving average (the 150 ms integration window), which keeps the
/// energy peak aligned with the QRS instead of lagging half a window.
fn centered_moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half = (window / 2).max(1);
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Local maxima that dominate their ±`half_window` neighborhood. Sub-peaks
/// inside one QRS-T complex collapse onto the strongest, which is what the
/// adaptive thresholds expect to see.
fn dominant_maxima(x: &[f64], half_window: usize) -> Vec<(usize, f64)> {
    let n = x.len();
    let mut out = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let v = x[i];
        if v <= 0.0 || v <= x[i - 1] || v < x[i + 1] {
            continue;
        }
        let lo = i.saturating_sub(half_window);
        let hi = (i + half_window + 1).min(n);
        let is_dominant = (lo..hi).all(|j| x[j] < v || j >= i && x[j] == v || j == i);
        if is_dominant {
            out.push((i, v));
        }
    }
    out
}

/// Snap each detection to the local maximum of the band-passed signal
/// within ±50 ms, dropping refinements that collapse into the refractory
/// window of the previous peak.
fn refine_peaks(filtered: &[f64], detections: &[usize], half_window: usize, refractory: usize) -> Vec<usize> {
    let n = filtered.len();
    let mut out: Vec<usize> = Vec::with_capacity(detections.len());
    for &d in detections {
        let lo = d.saturating_sub(half_window);
        let hi = (d + half_window + 1).min(n);
        let best = (lo..hi)
            .max_by(|&a, &b| filtered[a].total_cmp(&filtered[b]))
            .unwrap_or(d);
        match out.last() {
            Some(&prev) if best.saturating_sub(prev) < refractory => {}
            _ => out.push(best),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::pulse_train;

    #[test]
    fn all_zero_signal_yields_no_peaks() {
        let sig = RawSignal::new(vec![0.0; 3600], 360.0, 0, "flat".into()).unwrap();
        assert!(detect_r_peaks(&sig).unwrap().is_empty());
    }

    #[test]
    fn short_record_is_rejected() {
        let sig = RawSignal::new(vec![0.0; 500], 360.0, 0, "short".into()).unwrap();
        assert!(detect_r_peaks(&sig).is_err());
    }

    #[test]
    fn low_sampling_rate_is_rejected() {
        let sig = RawSignal::new(vec![0.0; 500], 50.0, 0, "slow".into()).unwrap();
        assert!(detect_r_peaks(&sig).is_err());
    }

    #[test]
    fn clean_pulse_train_is_fully_recovered() {
        let (sig, truth) = pulse_train(360.0, 30, 1.0, None, 42).unwrap();
        let peaks = detect_r_peaks(&sig).unwrap();
        assert_eq!(peaks.len(), truth.len(), "expected {} peaks, got {:?}", truth.len(), peaks.len());
        for (p, t) in peaks.iter().zip(&truth) {
            assert!(
                (*p as i64 - *t as i64).abs() <= 10,
                "peak {p} too far from truth {t}"
            );
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let (sig, _) = pulse_train(360.0, 10, 1.0, Some(20.0), 7).unwrap();
        let a = detect_r_peaks(&sig).unwrap();
        let b = detect_r_peaks(&sig).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noisy_pulse_train_mostly_recovered() {
        let (sig, truth) = pulse_train(360.0, 30, 1.0, Some(20.0), 11).unwrap();
        let peaks = detect_r_peaks(&sig).unwrap();
        let hits = truth
            .iter()
            .filter(|t| peaks.iter().any(|p| (*p as i64 - **t as i64).abs() <= 15))
            .count();
        assert!(
            hits as f64 >= 0.95 * truth.len() as f64,
            "recovered {hits}/{} peaks",
            truth.len()
        );
    }
}
