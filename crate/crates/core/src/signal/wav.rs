use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::{normalize_pcm16, to_pcm16, Waveform};
use crate::tensor::Scalar;

/// Reads a mono 16-bit PCM WAV into `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform<f32>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedWav(format!("{} channels (mono only)", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedWav(format!(
            "{:?} {}-bit (16-bit PCM only)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let pcm = reader.samples::<i16>().collect::<Result<Vec<_>, _>>()?;
    Ok(Waveform::new(normalize_pcm16(&pcm), spec.sample_rate))
}

pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, x: &Waveform<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: x.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in to_pcm16(&x.samples) {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}
