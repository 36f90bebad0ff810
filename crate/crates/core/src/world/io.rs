use std::path::Path;

use super::{ControlKind, ControlTrack, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn wav_err(path: &Path, source: hound::Error) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &w.samples {
        let q = (f64::from(s).clamp(-1.0, 1.0) * f64::from(i16::MAX)).round() as i16;
        writer.write_sample(q).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format("wave file", "expected 16-bit PCM mono"));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::format(
            "wave file",
            format!("sample rate {} differs from {SAMPLE_RATE}", spec.sample_rate),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / f32::from(i16::MAX)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Ok(Waveform::new(samples))
}

/// Writes tracks as rows `frame,kind,dim,value`.
pub fn write_tracks_csv(path: &Path, tracks: &[&ControlTrack]) -> Result<()> {
    let to_err = |e: csv::Error| Error::format("control CSV", e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["frame", "kind", "dim", "value"]).map_err(to_err)?;
    for track in tracks {
        for f in 0..track.frames {
            for (d, v) in track.row(f).iter().enumerate() {
                w.write_record([
                    f.to_string(),
                    track.kind.name().to_string(),
                    d.to_string(),
                    v.to_string(),
                ])
                .map_err(to_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads every track in a control CSV, in order of first appearance.
pub fn read_tracks_csv(path: &Path) -> Result<Vec<ControlTrack>> {
    let to_err = |e: csv::Error| Error::format("control CSV", e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(to_err)?;
    let header = r.headers().map_err(to_err)?.clone();
    if header.iter().collect::<Vec<_>>() != ["frame", "kind", "dim", "value"] {
        return Err(Error::format("control CSV", "header must be frame,kind,dim,value"));
    }
    let mut cells: Vec<(ControlKind, Vec<(usize, usize, f32)>)> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(to_err)?;
        let bad = |what: &str| Error::format("control CSV", format!("row {}: bad {what}", line + 2));
        let frame: usize = rec[0].trim().parse().map_err(|_| bad("frame"))?;
        let kind: ControlKind = rec[1].trim().parse().map_err(|_| bad("kind"))?;
        let dim: usize = rec[2].trim().parse().map_err(|_| bad("dim"))?;
        let value: f32 = rec[3].trim().parse().map_err(|_| bad("value"))?;
        if dim >= kind.dims() {
            return Err(bad("dim"));
        }
        match cells.iter_mut().find(|(k, _)| *k == kind) {
            Some((_, v)) => v.push((frame, dim, value)),
            None => cells.push((kind, vec![(frame, dim, value)])),
        }
    }
    cells
        .into_iter()
        .map(|(kind, entries)| {
            let frames = entries.iter().map(|e| e.0).max().map_or(0, |m| m + 1);
            let dims = kind.dims();
            if entries.len() != frames * dims {
                return Err(Error::format(
                    "control CSV",
                    format!("{kind} track has {} cells for {frames} frames", entries.len()),
                ));
            }
            let mut values = vec![f32::NAN; frames * dims];
            for (f, d, v) in entries {
                values[f * dims + d] = v;
            }
            if values.iter().any(|v| v.is_nan()) {
                return Err(Error::format("control CSV", format!("{kind} track has gaps")));
            }
            ControlTrack::new(kind, values)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..640).map(|i| ((i as f32) * 0.01).sin() * 0.9).collect());
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), w.len());
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let a = ControlTrack::new(ControlKind::Intensity, vec![-3.5, -12.25, 0.125]).unwrap();
        let mut pv = vec![0.0; 3 * 16];
        pv[5] = 0.75;
        let b = ControlTrack::new(ControlKind::Pitch, pv).unwrap();
        write_tracks_csv(&path, &[&a, &b]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("frame,kind,dim,value\n0,intensity,0,-3.5\n"));
        assert_eq!(read_tracks_csv(&path).unwrap(), vec![a, b]);
    }

    #[test]
    fn csv_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "f,k,d,v\n0,beats,0,1\n").unwrap();
        assert!(read_tracks_csv(&path).is_err());
    }
}
