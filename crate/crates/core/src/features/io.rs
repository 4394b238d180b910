//! Binary feature arrays and 16-bit PCM WAV.
//!
//! An array file is a little-endian `u32` pair `(dim, count)` followed by
//! `count * dim` values, row after row. Image features use `f32` payloads;
//! checkpoints reuse the layout with `f64` payloads so reloads are exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::Waveform;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayFile {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ArrayFile {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::shape(format!("{} values do not form rows of {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn encode(&self, precision: Precision, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.count() as u32).to_le_bytes())?;
        for &v in &self.data {
            match precision {
                Precision::F32 => out.write_all(&(v as f32).to_le_bytes())?,
                Precision::F64 => out.write_all(&v.to_le_bytes())?,
            }
        }
        Ok(())
    }

    pub fn decode(precision: Precision, input: &mut impl Read) -> std::result::Result<Self, String> {
        let mut head = [0u8; 8];
        input.read_exact(&mut head).map_err(|e| format!("truncated header: {e}"))?;
        let dim = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(head[4..].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err("zero dimension in header".into());
        }
        let mut payload = vec![0u8; dim * count * precision.width()];
        input
            .read_exact(&mut payload)
            .map_err(|_| format!("payload shorter than header's {count}x{dim}"))?;
        let data: Vec<f64> = match precision {
            Precision::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Precision::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value in payload".into());
        }
        Ok(Self { dim, data })
    }
}

pub fn write_array(path: &Path, array: &ArrayFile, precision: Precision) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    array.encode(precision, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path, precision: Precision) -> Result<ArrayFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ArrayFile::decode(precision, &mut BufReader::new(file)).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    })
}

/// Read a mono 16-bit PCM file, scaling samples to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::invalid(format!(
            "{}: expected mono 16-bit PCM, got {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Write a waveform as mono 16-bit PCM, clipping to the representable range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trips_in_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let a = ArrayFile::new(3, vec![0.1, -2.5, 3.0, 1e-3, 7.25, -0.0]).unwrap();
        let p = dir.path().join("a.f64");
        write_array(&p, &a, Precision::F64).unwrap();
        assert_eq!(read_array(&p, Precision::F64).unwrap(), a);
        let p = dir.path().join("a.f32");
        write_array(&p, &a, Precision::F32).unwrap();
        let back = read_array(&p, Precision::F32).unwrap();
        assert_eq!(back.count(), 2);
        for (x, y) in back.data.iter().zip(&a.data) {
            assert_eq!(*x, *y as f32 as f64);
        }
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 8 + 6 * 4);
    }

    #[test]
    fn truncated_array_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, [2u8, 0, 0, 0, 5, 0, 0, 0, 1, 2, 3]).unwrap();
        assert!(matches!(read_array(&p, Precision::F32), Err(Error::Parse { .. })));
    }

    #[test]
    fn wav_round_trip_quantizes_to_16_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.25, 0.999, -1.0], 16000).unwrap();
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 16000);
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }
}
