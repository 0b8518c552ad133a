//! Minimal RIFF/WAVE reader and writer: mono, little-endian, 16-bit PCM or
//! 32-bit IEEE float. Ingestion errors name the offending header field.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Utterance;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tag<R: Read>(r: &mut R) -> Result<[u8; 4]> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Load a mono WAV file. 16-bit samples map to `x / 32768.0` (so -32768
/// becomes exactly -1.0); 32-bit float samples are taken as-is. Spans and
/// label are empty; the id is the file stem.
pub fn load_wav(path: &Path) -> Result<Utterance> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_tag(&mut r)? != b"RIFF" {
        return Err(Error::ingest("riff.magic", "not a RIFF file"));
    }
    let _riff_size = read_u32(&mut r)?;
    if &read_tag(&mut r)? != b"WAVE" {
        return Err(Error::ingest("riff.format", "RIFF form type is not WAVE"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (audio_format, channels, sample_rate, bits)
    let mut samples: Option<Vec<f64>> = None;
    loop {
        let tag = match read_tag(&mut r) {
            Ok(t) => t,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let size = read_u32(&mut r)? as usize;
        match &tag {
            b"fmt " => {
                let mut body = vec![0u8; size];
                r.read_exact(&mut body)?;
                if size < 16 {
                    return Err(Error::ingest("fmt.size", "fmt chunk shorter than 16 bytes"));
                }
                let audio_format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let sample_rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some((audio_format, channels, sample_rate, bits));
            }
            b"data" => {
                let (audio_format, channels, _, bits) = fmt.ok_or_else(|| {
                    Error::ingest("data", "data chunk appears before fmt chunk")
                })?;
                if channels != 1 {
                    return Err(Error::ingest(
                        "fmt.channels",
                        format!("expected mono, got {channels} channels"),
                    ));
                }
                let mut body = vec![0u8; size];
                r.read_exact(&mut body)?;
                let decoded = match (audio_format, bits) {
                    (FORMAT_PCM, 16) => body
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                        .collect(),
                    (FORMAT_IEEE_FLOAT, 32) => body
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect(),
                    (FORMAT_PCM, b) => {
                        return Err(Error::ingest(
                            "fmt.bits_per_sample",
                            format!("PCM must be 16-bit, got {b}"),
                        ))
                    }
                    (FORMAT_IEEE_FLOAT, b) => {
                        return Err(Error::ingest(
                            "fmt.bits_per_sample",
                            format!("float must be 32-bit, got {b}"),
                        ))
                    }
                    (f, _) => {
                        return Err(Error::ingest(
                            "fmt.audio_format",
                            format!("expected PCM (1) or IEEE float (3), got {f}"),
                        ))
                    }
                };
                samples = Some(decoded);
                if size % 2 == 1 {
                    let mut pad = [0u8; 1];
                    let _ = r.read_exact(&mut pad);
                }
            }
            _ => {
                // skip unknown chunk (word-aligned)
                let skip = size + (size % 2);
                std::io::copy(&mut r.by_ref().take(skip as u64), &mut std::io::sink())?;
            }
        }
    }

    let (_, _, sample_rate, _) =
        fmt.ok_or_else(|| Error::ingest("fmt", "missing fmt chunk"))?;
    let samples = samples.ok_or_else(|| Error::ingest("data", "missing data chunk"))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "wav".to_string());
    Ok(Utterance {
        id,
        samples,
        sample_rate,
        word_spans: Vec::new(),
        phone_spans: Vec::new(),
        label: None,
    })
}

fn write_header<W: Write>(
    w: &mut W,
    audio_format: u16,
    sample_rate: u32,
    bits: u16,
    data_bytes: u32,
) -> Result<()> {
    let byte_rate = sample_rate * u32::from(bits / 8);
    let block_align = bits / 8;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_bytes).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&audio_format.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?;
    w.write_all(&sample_rate.to_le_bytes())?;
    w.write_all(&byte_rate.to_le_bytes())?;
    w.write_all(&block_align.to_le_bytes())?;
    w.write_all(&bits.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_bytes.to_le_bytes())?;
    Ok(())
}

/// Write mono 16-bit PCM: samples are clamped to [-1, 1] and quantized with
/// `round(x * 32768)` clamped to the i16 range.
pub fn write_wav_i16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, FORMAT_PCM, sample_rate, 16, (samples.len() * 2) as u32)?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round();
        let v = q.clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Write mono 32-bit IEEE float (no quantization beyond f64 -> f32).
pub fn write_wav_f32(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, FORMAT_IEEE_FLOAT, sample_rate, 32, (samples.len() * 4) as u32)?;
    for &s in samples {
        w.write_all(&(s as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}
