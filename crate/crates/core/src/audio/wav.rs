use std::path::Path;

use super::{AudioError, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn wav_err(path: &Path, e: hound::Error) -> AudioError {
    let path = path.to_path_buf();
    match e {
        hound::Error::IoError(source)
            if source.kind() == std::io::ErrorKind::UnexpectedEof || source.to_string().contains("enough bytes") =>
        {
            AudioError::Truncated { path, msg: source.to_string() }
        }
        hound::Error::IoError(source) => AudioError::Io { path, source },
        hound::Error::FormatError(msg) if msg.contains("enough bytes") => {
            AudioError::Truncated { path, msg: msg.to_string() }
        }
        hound::Error::Unsupported => AudioError::UnsupportedCodec { path, detail: "unsupported WAV feature".into() },
        other => AudioError::Wav { path, msg: other.to_string() },
    }
}

/// Reads a mono PCM16 or float32 WAV file. PCM16 values are divided by 32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::MultiChannel { path: path.to_path_buf(), channels: spec.channels });
    }
    let expected = reader.len() as usize;
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().collect::<Result<_, _>>().map_err(|e| wav_err(path, e))?
        }
        (fmt, bits) => {
            return Err(AudioError::UnsupportedCodec {
                path: path.to_path_buf(),
                detail: format!("{fmt:?} with {bits} bits per sample"),
            })
        }
    };
    if samples.len() < expected {
        return Err(AudioError::Truncated {
            path: path.to_path_buf(),
            msg: format!("header announces {expected} samples, found {}", samples.len()),
        });
    }
    let mut w = Waveform::new(stem(path), samples, spec.sample_rate)?;
    w.normalize();
    Ok(w)
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform, format: SampleFormat) -> Result<(), AudioError> {
    let path = path.as_ref();
    let (bits, sample_format) = match format {
        SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
        SampleFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec { channels: 1, sample_rate: wave.sample_rate, bits_per_sample: bits, sample_format };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &wave.samples {
        let r = match format {
            SampleFormat::Pcm16 => writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            SampleFormat::Float32 => writer.write_sample(s),
        };
        r.map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

/// Reads only the header to get the duration in seconds.
pub fn wav_duration(path: &Path) -> Result<f64, AudioError> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    Ok(reader.duration() as f64 / reader.spec().sample_rate as f64)
}

/// Linear-interpolation resampling.
pub fn resample_linear(wave: &Waveform, target_rate: u32) -> Waveform {
    if wave.sample_rate == target_rate {
        return wave.clone();
    }
    let ratio = wave.sample_rate as f64 / target_rate as f64;
    let n_out = ((wave.samples.len() as f64) / ratio).floor().max(1.0) as usize;
    let last = wave.samples.len() - 1;
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (pos - i0 as f64) as f32;
            wave.samples[i0] * (1.0 - frac) + wave.samples[i1] * frac
        })
        .collect();
    Waveform { id: wave.id.clone(), samples, sample_rate: target_rate }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_pcm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        let w = Waveform::new("z", vec![0.0; 16000], 16000).unwrap();
        write_wav(&p, &w, SampleFormat::Pcm16).unwrap();
        let r = load_wav(&p).unwrap();
        assert_eq!(r.samples.len(), 16000);
        assert!(r.samples.iter().all(|&s| s == 0.0));
        assert_eq!(r.id, "z");
    }

    #[test]
    fn pcm16_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        wr.write_sample(32767i16).unwrap();
        wr.write_sample(-32768i16).unwrap();
        wr.finalize().unwrap();
        let r = load_wav(&p).unwrap();
        assert_eq!(r.samples[0], 32767.0 / 32768.0);
        assert!((r.samples[0] - 0.99997).abs() < 1e-5);
        assert_eq!(r.samples[1], -1.0);
    }

    #[test]
    fn keeps_foreign_sample_rate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.wav");
        let w = Waveform::new("h", vec![0.25; 441], 44100).unwrap();
        write_wav(&p, &w, SampleFormat::Float32).unwrap();
        let r = load_wav(&p).unwrap();
        assert_eq!(r.sample_rate, 44100);
        assert_eq!(r.samples, w.samples);
        let rs = resample_linear(&r, 16000);
        assert_eq!(rs.sample_rate, 16000);
        assert_eq!(rs.samples.len(), 160);
    }

    #[test]
    fn rejects_stereo_and_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 16000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        wr.write_sample(1i16).unwrap();
        wr.write_sample(1i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(AudioError::MultiChannel { channels: 2, .. })));

        let p = dir.path().join("b.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 8, sample_format: hound::SampleFormat::Int };
        let mut wr = hound::WavWriter::create(&p, spec).unwrap();
        wr.write_sample(1i8).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(load_wav(&p), Err(AudioError::UnsupportedCodec { .. })));
    }

    #[test]
    fn truncated_data_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        let w = Waveform::new("t", vec![0.5; 1000], 16000).unwrap();
        write_wav(&p, &w, SampleFormat::Pcm16).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 501]).unwrap();
        let err = load_wav(&p).unwrap_err();
        assert!(matches!(err, AudioError::Truncated { .. }), "{err}");
    }
}
