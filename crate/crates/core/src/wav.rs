//! 16-bit PCM mono WAV input and output.

use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::Waveform;

/// Reads a 16-bit PCM mono file. When `expected_rate` is given, any other
/// rate is an error; no resampling is done.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Unsupported(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Unsupported(format!(
            "{}: only 16-bit integer PCM is supported",
            path.display()
        )));
    }
    if let Some(expected) = expected_rate {
        if spec.sample_rate != expected {
            return Err(Error::SampleRateMismatch {
                expected,
                actual: spec.sample_rate,
            });
        }
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes the waveform as 16-bit PCM, clipping to the representable range.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in w.samples() {
        let v = (s * 32768.0)
            .round()
            .clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_16_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.25, -0.5, 0.999, -1.0, 1.5], 8000).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path, Some(8000)).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in back.samples().iter().zip(w.samples()) {
            assert!((a - b.clamp(-1.0, 32767.0 / 32768.0)).abs() <= 0.5 / 32768.0);
        }
        // exact for already-quantized input
        let again = dir.path().join("b.wav");
        write_wav(&again, &back).unwrap();
        assert_eq!(read_wav(&again, None).unwrap(), back);
    }

    #[test]
    fn rejects_rate_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        write_wav(&path, &Waveform::new(vec![0.1; 10], 16000).unwrap()).unwrap();
        assert!(matches!(
            read_wav(&path, Some(8000)),
            Err(Error::SampleRateMismatch {
                expected: 8000,
                actual: 16000
            })
        ));
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..4 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path, None), Err(Error::Unsupported(_))));
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(read_wav("/nonexistent/x.wav", None).is_err());
    }
}
