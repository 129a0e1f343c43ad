//! Linear-phase windowed-sinc FIR filters.

use crate::signal::RawSignal;
use crate::{Error, Result};
use std::f64::consts::PI;

/// Hamming-windowed sinc low-pass taps, normalized to unity DC gain.
/// `taps` must be odd so the filter has an integer group delay.
pub fn lowpass_taps(cutoff_hz: f64, sampling_rate_hz: f64, taps: usize) -> Result<Vec<f64>> {
    if taps % 2 == 0 || taps < 3 {
        return Err(Error::Config(format!("FIR order must be odd and >= 3, got {taps}")));
    }
    if !(cutoff_hz > 0.0) || cutoff_hz >= sampling_rate_hz / 2.0 {
        return Err(Error::Config(format!(
            "cutoff {cutoff_hz} Hz outside (0, {}) Hz",
            sampling_rate_hz / 2.0
        )));
    }
    let fc = cutoff_hz / sampling_rate_hz;
    let mid = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let x = n as f64 - mid;
            let sinc = if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * x).sin() / (PI * x)
            };
            let window = 0.54 - 0.46 * (2.0 * PI * n as f64 / (taps - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = h.iter().sum();
    for v in &mut h {
        *v /= sum;
    }
    Ok(h)
}

/// High-pass taps by spectral inversion of the normalized low-pass; the tap
/// sum is zero to rounding, so DC is rejected exactly.
pub fn highpass_taps(cutoff_hz: f64, sampling_rate_hz: f64, taps: usize) -> Result<Vec<f64>> {
    let mut h = lowpass_taps(cutoff_hz, sampling_rate_hz, taps)?;
    for v in &mut h {
        *v = -*v;
    }
    h[(taps - 1) / 2] += 1.0;
    Ok(h)
}

/// Band-pass taps as the difference of two low-passes.
pub fn bandpass_taps(low_hz: f64, high_hz: f64, sampling_rate_hz: f64, taps: usize) -> Result<Vec<f64>> {
    if low_hz >= high_hz {
        return Err(Error::Config(format!("band edges out of order: {low_hz} >= {high_hz}")));
    }
    let lo = lowpass_taps(high_hz, sampling_rate_hz, taps)?;
    let hi = lowpass_taps(low_hz, sampling_rate_hz, taps)?;
    Ok(lo.iter().zip(hi).map(|(a, b)| a - b).collect())
}

/// Zero-padded convolution with the group delay `(taps−1)/2` compensated,
/// so the output is the same length as the input and time-aligned with it.
pub fn filter_delay_compensated(samples: &[f64], taps: &[f64]) -> Vec<f64> {
    let mid = (taps.len() - 1) / 2;
    let n = samples.len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let shifted = i + mid; // index into the full convolution
        let mut acc = 0.0;
        for (k, &h) in taps.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let Some(j) = shifted.checked_sub(k) else { break };
            if j < n {
                acc += h * samples[j];
            }
        }
        *o = acc;
    }
    out
}

/// Magnitude of the taps' DTFT at `freq_hz`: the designed filter's gain at
/// that frequency.
pub fn frequency_response(taps: &[f64], freq_hz: f64, sampling_rate_hz: f64) -> f64 {
    let w = 2.0 * PI * freq_hz / sampling_rate_hz;
    let (mut re, mut im) = (0.0, 0.0);
    for (k, &h) in taps.iter().enumerate() {
        re += h * (w * k as f64).cos();
        im -= h * (w * k as f64).sin();
    }
    (re * re + im * im).sqrt()
}

/// High-pass a signal: windowed-sinc design at `cutoff_hz` with `order`
/// taps (odd), Hamming window, spectral inversion, delay-compensated.
pub fn highpass_fir(signal: &RawSignal, cutoff_hz: f64, order: usize) -> Result<RawSignal> {
    let taps = highpass_taps(cutoff_hz, signal.sampling_rate_hz(), order)?;
    let filtered = filter_delay_compensated(signal.samples(), &taps);
    RawSignal::new(
        filtered,
        signal.sampling_rate_hz(),
        signal.channel_id(),
        signal.source_name().to_string(),
    )
}
