//! WFDB format-212 binary codec.
//!
//! Format 212 packs two 12-bit two's-complement samples into three bytes:
//!
//! ```text
//! byte0: low 8 bits of sample A
//! byte1: low nibble  = high 4 bits of sample A
//!        high nibble = high 4 bits of sample B
//! byte2: low 8 bits of sample B
//! ```
//!
//! For multi-channel records samples are interleaved frame by frame
//! (channel 0, channel 1, channel 0, ...).

use crate::signal::RawSignal;
use crate::{Error, Result};

/// Decode one 3-byte group into two raw 12-bit two's-complement samples.
pub fn decode_frame(bytes: [u8; 3]) -> (i16, i16) {
    let a = u16::from(bytes[0]) | (u16::from(bytes[1] & 0x0F) << 8);
    let b = u16::from(bytes[2]) | (u16::from(bytes[1] & 0xF0) << 4);
    (sign_extend12(a), sign_extend12(b))
}

/// Pack two 12-bit two's-complement samples into a 3-byte group.
/// Values outside `[-2048, 2047]` are clamped.
pub fn encode_frame(a: i16, b: i16) -> [u8; 3] {
    let a = a.clamp(-2048, 2047) as u16 & 0x0FFF;
    let b = b.clamp(-2048, 2047) as u16 & 0x0FFF;
    [
        (a & 0xFF) as u8,
        (((a >> 8) & 0x0F) as u8) | ((((b >> 8) & 0x0F) as u8) << 4),
        (b & 0xFF) as u8,
    ]
}

fn sign_extend12(raw: u16) -> i16 {
    if raw & 0x800 != 0 {
        (raw | 0xF000) as i16
    } else {
        raw as i16
    }
}

/// Decode a format-212 stream into per-channel physical signals:
/// `physical = (raw − baseline) / gain`, channels de-interleaved.
///
/// `gains` and `baselines` must hold one entry per channel. The stream
/// length must be a whole number of 3-byte groups covering complete
/// channel frames.
pub fn parse_wfdb212(
    bytes: &[u8],
    n_channels: usize,
    gains: &[f64],
    baselines: &[f64],
    sampling_rate_hz: f64,
    source_name: &str,
) -> Result<Vec<RawSignal>> {
    if !(1..=2).contains(&n_channels) {
        return Err(Error::Config(format!("n_channels must be 1 or 2, got {n_channels}")));
    }
    if gains.len() != n_channels || baselines.len() != n_channels {
        return Err(Error::Config(format!(
            "expected {n_channels} gains and baselines, got {} and {}",
            gains.len(),
            baselines.len()
        )));
    }
    if let Some(bad) = gains.iter().position(|&g| !(g > 0.0)) {
        return Err(Error::Config(format!("gain for channel {bad} must be positive")));
    }
    if !(sampling_rate_hz > 0.0) {
        return Err(Error::Config("sampling rate must be positive".into()));
    }
    if bytes.len() % 3 != 0 {
        return Err(Error::Parse {
            offset: bytes.len() - bytes.len() % 3,
            message: format!("truncated frame: {} trailing bytes (groups are 3 bytes)", bytes.len() % 3),
        });
    }
    let n_groups = bytes.len() / 3;
    // two channels share each group (one sample each); one channel uses both
    // slots, so any whole number of groups is a valid single-channel stream.
    if n_channels == 2 && n_groups == 0 && !bytes.is_empty() {
        unreachable!();
    }

    let mut channels: Vec<Vec<f64>> = vec![Vec::new(); n_channels];
    for g in 0..n_groups {
        let group = [bytes[g * 3], bytes[g * 3 + 1], bytes[g * 3 + 2]];
        let (a, b) = decode_frame(group);
        match n_channels {
            1 => {
                channels[0].push(f64::from(a));
                channels[0].push(f64::from(b));
            }
            _ => {
                channels[0].push(f64::from(a));
                channels[1].push(f64::from(b));
            }
        }
    }
    channels
        .into_iter()
        .enumerate()
        .map(|(ch, raw)| {
            let samples = raw
                .into_iter()
                .map(|v| (v - baselines[ch]) / gains[ch])
                .collect();
            RawSignal::new(samples, sampling_rate_hz, ch, source_name.to_string())
        })
        .collect()
}

/// Encode per-channel integer samples back into a format-212 stream.
/// With two channels, both must have equal length; with one channel the
/// length must be even so every group is complete.
pub fn encode_wfdb212(channels: &[Vec<i16>]) -> Result<Vec<u8>> {
    match channels {
        [ch] => {
            if ch.len() % 2 != 0 {
                return Err(Error::Invalid(
                    "single-channel format-212 stream needs an even sample count".into(),
                ));
            }
            Ok(ch
                .chunks_exact(2)
                .flat_map(|p| encode_frame(p[0], p[1]))
                .collect())
        }
        [a, b] => {
            if a.len() != b.len() {
                return Err(Error::Invalid("channel lengths differ".into()));
            }
            Ok(a.iter()
                .zip(b)
                .flat_map(|(&x, &y)| encode_frame(x, y))
                .collect())
        }
        _ => Err(Error::Config(format!(
            "format 212 supports 1 or 2 channels, got {}",
            channels.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_bytes_decode_to_zero_samples() {
        let sigs = parse_wfdb212(&[0x00, 0x00, 0x00], 1, &[1.0], &[0.0], 360.0, "t").unwrap();
        assert_eq!(sigs.len(), 1);
        assert_eq!(sigs[0].samples(), &[0.0, 0.0]);
    }

    #[test]
    fn worked_frame_is_minus_one_and_zero() {
        // 0xFFF is −1 as 12-bit two's complement
        let (a, b) = decode_frame([0xFF, 0x0F, 0x00]);
        assert_eq!((a, b), (-1, 0));
        let sigs = parse_wfdb212(&[0xFF, 0x0F, 0x00], 1, &[1.0], &[0.0], 360.0, "t").unwrap();
        assert_eq!(sigs[0].samples(), &[-1.0, 0.0]);
    }

    #[test]
    fn gain_and_baseline_are_applied() {
        let bytes = encode_frame(300, -100);
        let sigs = parse_wfdb212(&bytes, 2, &[200.0, 100.0], &[100.0, 0.0], 360.0, "t").unwrap();
        assert_eq!(sigs[0].samples(), &[(300.0 - 100.0) / 200.0]);
        assert_eq!(sigs[1].samples(), &[-1.0]);
        assert_eq!(sigs[1].channel_id(), 1);
    }

    #[test]
    fn truncated_stream_reports_offset() {
        let err = parse_wfdb212(&[0x00, 0x00, 0x00, 0x01], 1, &[1.0], &[0.0], 360.0, "t").unwrap_err();
        match err {
            crate::Error::Parse { offset, .. } => assert_eq!(offset, 3),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn two_channels_are_deinterleaved() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&encode_frame(1, 10));
        bytes.extend_from_slice(&encode_frame(2, 20));
        let sigs = parse_wfdb212(&bytes, 2, &[1.0, 1.0], &[0.0, 0.0], 250.0, "t").unwrap();
        assert_eq!(sigs[0].samples(), &[1.0, 2.0]);
        assert_eq!(sigs[1].samples(), &[10.0, 20.0]);
    }

    proptest! {
        #[test]
        fn decode_encode_identity(a in -2048i16..=2047, b in -2048i16..=2047) {
            let bytes = encode_frame(a, b);
            prop_assert_eq!(decode_frame(bytes), (a, b));
        }

        #[test]
        fn encode_decode_identity_over_raw_bytes(b0: u8, b1: u8, b2: u8) {
            let (a, b) = decode_frame([b0, b1, b2]);
            prop_assert_eq!(encode_frame(a, b), [b0, b1, b2]);
        }
    }
}
