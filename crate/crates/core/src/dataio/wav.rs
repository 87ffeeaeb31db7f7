use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::DataError;

fn wav_err(path: &Path, e: hound::Error) -> DataError {
    DataError::Format { context: path.display().to_string(), message: e.to_string() }
}

/// Reads a WAV file as mono samples in `[-1, 1]` (channels averaged) and
/// returns them with the sample rate.
pub fn read_wav_mono(path: &Path) -> Result<(Vec<f64>, f64), DataError> {
    let mut reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(|e| wav_err(path, e))?
        }
        SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
    };
    let channels = spec.channels.max(1) as usize;
    let mono = interleaved.chunks(channels).map(|c| c.iter().sum::<f64>() / channels as f64).collect();
    Ok((mono, f64::from(spec.sample_rate)))
}

/// Writes mono 32-bit float samples.
pub fn write_wav_f32(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), DataError> {
    let spec = WavSpec { channels: 1, sample_rate, bits_per_sample: 32, sample_format: SampleFormat::Float };
    let mut writer = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        writer.write_sample(s as f32).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}
