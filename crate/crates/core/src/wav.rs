//! Mono 16-bit PCM WAV input/output. Samples map to `[−1, 1)` by division
//! by 32768.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Scalar;

const FULL_SCALE: f64 = 32768.0;

pub fn read_wav<T: Scalar>(path: &Path) -> Result<(Vec<T>, u32)> {
    let bad = |detail: String| Error::Format(format!("{}: {detail}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => Error::File {
            path: path.to_path_buf(),
            source,
        },
        other => bad(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(bad(format!(
            "expected mono, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(bad(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| T::of(f64::from(v) / FULL_SCALE)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

/// Quantizes to 16 bits, clipping to the representable range.
pub fn to_pcm16<T: Scalar>(x: T) -> i16 {
    (x.to_f64_lossy() * FULL_SCALE)
        .round()
        .clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
}

pub fn write_wav<T: Scalar>(path: &Path, samples: &[T], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample(to_pcm16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_the_pcm_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let x: Vec<f64> = [-32768, -1, 0, 1, 12345, 32767]
            .iter()
            .map(|&v| f64::from(v) / 32768.0)
            .collect();
        write_wav(&path, &x, 8000).unwrap();
        let (y, sr) = read_wav::<f64>(&path).unwrap();
        assert_eq!((y, sr), (x, 8000));
    }

    #[test]
    fn clipping_and_rejections() {
        assert_eq!(to_pcm16(2.0f64), i16::MAX);
        assert_eq!(to_pcm16(-2.0f64), i16::MIN);
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"definitely not a wav file").unwrap();
        assert!(matches!(read_wav::<f64>(&junk), Err(Error::Format(_))));
        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav::<f64>(&stereo), Err(Error::Format(_))));
    }
}
