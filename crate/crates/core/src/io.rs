//! Binary trajectory files and flat `f32` parameter blobs.
//!
//! A trajectory file is laid out as
//!
//! ```text
//! "HRNT" | version: u32 | header_len: u64 | header JSON | frames
//! ```
//!
//! where every frame is `N_P x 3` positions, then velocities, then forces,
//! all little-endian `f32`. Integers are little-endian too.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::sim::{Frame, Trajectory, TrajectoryHeader};

pub const MAGIC: &[u8; 4] = b"HRNT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Serialize, Deserialize)]
struct FileHeader {
    n_particles: usize,
    n_frames: usize,
    #[serde(flatten)]
    trajectory: TrajectoryHeader,
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

fn push_vecs(out: &mut Vec<u8>, vs: &[Vec3]) {
    for v in vs {
        for c in v {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
}

/// Serializes a trajectory. Frame values are narrowed to `f32`.
pub fn encode_trajectory(t: &Trajectory) -> Result<Vec<u8>> {
    t.validate()?;
    let header = FileHeader {
        n_particles: t.n_particles(),
        n_frames: t.n_frames(),
        trajectory: t.header.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let n = t.n_particles();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + t.n_frames() * n * 36);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for f in &t.frames {
        push_vecs(&mut out, &f.positions);
        push_vecs(&mut out, &f.velocities);
        push_vecs(&mut out, &f.forces);
    }
    Ok(out)
}

fn read_vecs(bytes: &[u8], n: usize) -> Vec<Vec3> {
    bytes
        .chunks_exact(12)
        .take(n)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes([c[k], c[k + 1], c[k + 2], c[k + 3]]) as f64;
            [f(0), f(4), f(8)]
        })
        .collect()
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<Trajectory> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return format_err(0, "missing HRNT magic");
    }
    if bytes.len() < PREAMBLE {
        return format_err(bytes.len(), "truncated preamble");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return format_err(4, format!("unsupported format version {version}"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = match PREAMBLE.checked_add(header_len) {
        Some(end) if end <= bytes.len() => end,
        _ => return format_err(bytes.len(), format!("header of {header_len} bytes is truncated")),
    };
    let header: FileHeader = match serde_json::from_slice(&bytes[PREAMBLE..payload_start]) {
        Ok(h) => h,
        Err(e) => return format_err(PREAMBLE, format!("bad header JSON: {e}")),
    };
    let n = header.n_particles;
    if header.trajectory.scene.len() != n {
        return format_err(PREAMBLE, "header particle count disagrees with the scene");
    }
    let frame_bytes = n * 36;
    let expected = header.n_frames * frame_bytes;
    let payload = &bytes[payload_start..];
    if payload.len() < expected {
        let whole = if frame_bytes == 0 { 0 } else { payload.len() / frame_bytes };
        return format_err(
            payload_start + whole * frame_bytes,
            format!("payload truncated in frame {whole} of {}", header.n_frames),
        );
    }
    if payload.len() > expected {
        return format_err(payload_start + expected, "trailing bytes after the last frame");
    }
    let frames = payload
        .chunks_exact(frame_bytes.max(1))
        .take(header.n_frames)
        .map(|c| Frame {
            positions: read_vecs(&c[..n * 12], n),
            velocities: read_vecs(&c[n * 12..n * 24], n),
            forces: read_vecs(&c[n * 24..], n),
        })
        .collect();
    let t = Trajectory {
        header: header.trajectory,
        frames,
    };
    t.validate()?;
    Ok(t)
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    let bytes = encode_trajectory(t)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_trajectory(&bytes)
}

/// Trajectory files (`*.hrnt`) in a directory, sorted by file name.
pub fn list_trajectories(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "hrnt") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn write_f32s(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return format_err(
            bytes.len().min(expected * 4),
            format!("expected {} values, file holds {} bytes", expected, bytes.len()),
        );
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gen_scenario, ScenarioConfig, ScenarioName};

    fn sample() -> Trajectory {
        let cfg = ScenarioConfig::defaults(ScenarioName::ZeroGCollide);
        gen_scenario(ScenarioName::ZeroGCollide, &cfg, 4, 12).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let t = sample();
        let bytes = encode_trajectory(&t).unwrap();
        let back = decode_trajectory(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_trajectory(&back).unwrap(), bytes);
    }

    #[test]
    fn payload_length_matches_layout() {
        let t = sample();
        let bytes = encode_trajectory(&t).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 16 - header_len, t.n_frames() * t.n_particles() * 9 * 4);
    }

    #[test]
    fn corruption_is_located() {
        let t = sample();
        let bytes = encode_trajectory(&t).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_trajectory(&bad), Err(Error::Format { offset: 0, .. })));

        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let frame = t.n_particles() * 36;
        let cut = 16 + header_len + 3 * frame + 10;
        match decode_trajectory(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, 16 + header_len + 3 * frame),
            other => panic!("unexpected {other:?}"),
        }

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_trajectory(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode_trajectory(&bytes[..20]), Err(Error::Format { .. })));
    }

    #[test]
    fn f32_blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let values = vec![0.5, -1.25, 3.0e-3];
        write_f32s(&path, &values).unwrap();
        let back = read_f32s(&path, 3).unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(read_f32s(&path, 4).is_err());
    }
}
