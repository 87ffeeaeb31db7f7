use serde::{Deserialize, Serialize};

use super::{CycleAnnotation, DataError};

pub const CYCLE_DURATION_S: f64 = 8.0;
pub const TARGET_SAMPLE_RATE: u32 = 48_000;

/// Resampling quality knob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampler {
    /// Linear interpolation between neighbouring samples.
    #[default]
    Linear,
    /// Hann-windowed sinc with the given half width in input samples,
    /// low-passed at the lower of the two Nyquist rates.
    Sinc { half_width: usize },
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resamples `signal` from `sr_in` to `sr_out`. Output length is
/// `round(len · sr_out / sr_in)`; equal rates return the input unchanged.
pub fn resample(signal: &[f64], sr_in: f64, sr_out: f64, method: Resampler) -> Result<Vec<f64>, DataError> {
    if !(sr_in > 0.0 && sr_out > 0.0) {
        return Err(DataError::InvalidSampleRate);
    }
    if signal.is_empty() {
        return Err(DataError::EmptyWindow);
    }
    if sr_in == sr_out {
        return Ok(signal.to_vec());
    }
    let n_out = ((signal.len() as f64) * sr_out / sr_in).round().max(1.0) as usize;
    let step = sr_in / sr_out;
    let last = signal.len() - 1;
    let out = match method {
        Resampler::Linear => (0..n_out)
            .map(|i| {
                let t = i as f64 * step;
                let k = (t.floor() as usize).min(last);
                let frac = t - k as f64;
                if k == last {
                    signal[last]
                } else {
                    signal[k] * (1.0 - frac) + signal[k + 1] * frac
                }
            })
            .collect(),
        Resampler::Sinc { half_width } => {
            let cutoff = (sr_out / sr_in).min(1.0);
            let reach = (half_width.max(1) as f64) / cutoff;
            (0..n_out)
                .map(|i| {
                    let t = i as f64 * step;
                    let lo = ((t - reach).ceil().max(0.0)) as usize;
                    let hi = ((t + reach).floor() as usize).min(last);
                    let mut acc = 0.0;
                    for (k, &x) in signal.iter().enumerate().take(hi + 1).skip(lo) {
                        let d = t - k as f64;
                        let w = 0.5 * (1.0 + (std::f64::consts::PI * d / reach).cos());
                        acc += x * cutoff * sinc(cutoff * d) * w;
                    }
                    acc
                })
                .collect()
        }
    };
    Ok(out)
}

/// Cuts the annotated window out of `signal`, resamples it to `sr_out`, and
/// standardizes it to exactly `duration_s · sr_out` samples: shorter cycles
/// are tiled cyclically, longer ones are center-truncated.
pub fn extract_cycle(
    signal: &[f64],
    sr_in: f64,
    ann: &CycleAnnotation,
    duration_s: f64,
    sr_out: f64,
    method: Resampler,
) -> Result<Vec<f64>, DataError> {
    if !(sr_in > 0.0 && sr_out > 0.0) {
        return Err(DataError::InvalidSampleRate);
    }
    let total_s = signal.len() as f64 / sr_in;
    if ann.start_s < 0.0 || ann.end_s > total_s + 0.5 / sr_in || !(ann.start_s.is_finite() && ann.end_s.is_finite()) {
        return Err(DataError::WindowOutOfBounds { start_s: ann.start_s, end_s: ann.end_s, duration_s: total_s });
    }
    let start = (ann.start_s * sr_in).round() as usize;
    let end = ((ann.end_s * sr_in).round() as usize).min(signal.len());
    if end <= start {
        return Err(DataError::EmptyWindow);
    }
    let slice = resample(&signal[start..end], sr_in, sr_out, method)?;
    let target = (duration_s * sr_out).round() as usize;
    Ok(if slice.len() >= target {
        let offset = (slice.len() - target) / 2;
        slice[offset..offset + target].to_vec()
    } else {
        slice.iter().copied().cycle().take(target).collect()
    })
}
