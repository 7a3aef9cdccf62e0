//! Raw numeric array files for clip media, and the reference syntax manifests
//! use to point at them.
//!
//! A media file is a fixed little-endian container: magic, element type, rank,
//! dimensions, payload. Audio waveforms are rank-1 `f32`; visual clips are
//! rank-4 `u8` laid out `[T, H, W, 3]`.
//!
//! A manifest reference is a path relative to the media root, optionally with
//! a `#shift=k` fragment. The fragment does not change the stored bytes — it
//! instructs the feature pipeline to cyclically shift the extracted audio
//! frames, which is how unsynchronized clips are represented without
//! duplicating audio.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array4, ArrayD, ArrayViewD};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MSOCARR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    U8,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_code(c: u8) -> Option<Dtype> {
        match c {
            0 => Some(Dtype::U8),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }
}

fn write_header(out: &mut Vec<u8>, dtype: Dtype, shape: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn file_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("{}: {msg}", path.display()))
}

pub fn save_u8(path: &Path, data: ArrayViewD<'_, u8>) -> Result<()> {
    let std = data.as_standard_layout();
    let mut out = Vec::with_capacity(16 + std.len());
    write_header(&mut out, Dtype::U8, std.shape());
    out.extend_from_slice(std.as_slice().unwrap());
    write_file(path, &out)
}

pub fn save_f32(path: &Path, data: ArrayViewD<'_, f32>) -> Result<()> {
    let std = data.as_standard_layout();
    let mut out = Vec::with_capacity(16 + std.len() * 4);
    write_header(&mut out, Dtype::F32, std.shape());
    for v in std.as_slice().unwrap() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[..8] != MAGIC {
        return Err(file_err(path, "not a media array file (bad magic)"));
    }
    let dtype = Dtype::from_code(bytes[8])
        .ok_or_else(|| file_err(path, format!("unknown element type {}", bytes[8])))?;
    let rank = bytes[9] as usize;
    let dims_end = 10 + rank * 4;
    if bytes.len() < dims_end {
        return Err(file_err(path, "truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            u32::from_le_bytes(bytes[10 + i * 4..14 + i * 4].try_into().unwrap()) as usize
        })
        .collect();
    let elem = match dtype {
        Dtype::U8 => 1,
        Dtype::F32 => 4,
    };
    let need: usize = shape.iter().product::<usize>() * elem;
    if bytes.len() != dims_end + need {
        return Err(file_err(
            path,
            format!(
                "payload is {} bytes, shape {shape:?} needs {need}",
                bytes.len() - dims_end
            ),
        ));
    }
    Ok((dtype, shape, bytes.split_off(dims_end)))
}

pub fn load_u8(path: &Path) -> Result<ArrayD<u8>> {
    let (dtype, shape, payload) = read_file(path)?;
    if dtype != Dtype::U8 {
        return Err(file_err(path, "expected a u8 array"));
    }
    ArrayD::from_shape_vec(shape, payload).map_err(|e| file_err(path, e))
}

pub fn load_f32(path: &Path) -> Result<ArrayD<f32>> {
    let (dtype, shape, payload) = read_file(path)?;
    if dtype != Dtype::F32 {
        return Err(file_err(path, "expected an f32 array"));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(shape, data).map_err(|e| file_err(path, e))
}

// ---------------------------------------------------------------------------
// Manifest references
// ---------------------------------------------------------------------------

/// A parsed manifest media reference: relative path plus the optional cyclic
/// audio-frame shift.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaRef {
    pub path: PathBuf,
    pub shift: Option<usize>,
}

impl MediaRef {
    pub fn parse(s: &str) -> Result<MediaRef> {
        let (path, fragment) = match s.split_once('#') {
            Some((p, f)) => (p, Some(f)),
            None => (s, None),
        };
        if path.is_empty() {
            return Err(Error::Invalid(format!("empty path in media ref `{s}`")));
        }
        if Path::new(path).is_absolute() || path.split('/').any(|c| c == "..") {
            return Err(Error::Invalid(format!(
                "media ref `{s}` must stay relative to the media root"
            )));
        }
        let shift = match fragment {
            None => None,
            Some(f) => {
                let k = f
                    .strip_prefix("shift=")
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::Invalid(format!("unsupported media ref fragment `#{f}` in `{s}`"))
                    })?;
                if k == 0 {
                    return Err(Error::Invalid(format!("zero shift in media ref `{s}`")));
                }
                Some(k)
            }
        };
        Ok(MediaRef {
            path: PathBuf::from(path),
            shift,
        })
    }

    pub fn resolve(&self, media_root: &Path) -> PathBuf {
        media_root.join(&self.path)
    }
}

/// Loads the waveform a manifest audio_ref points at. The shift fragment, if
/// any, is returned for the feature stage to apply.
pub fn load_waveform(media_root: &Path, audio_ref: &str) -> Result<(Array1<f32>, Option<usize>)> {
    let r = MediaRef::parse(audio_ref)?;
    let path = r.resolve(media_root);
    let arr = load_f32(&path)?;
    let wave = arr
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|_| file_err(&path, "waveform must be rank 1"))?;
    Ok((wave, r.shift))
}

/// Loads the `[T, H, W, 3]` frame stack a manifest visual_ref points at.
pub fn load_frames(media_root: &Path, visual_ref: &str) -> Result<Array4<u8>> {
    let r = MediaRef::parse(visual_ref)?;
    if r.shift.is_some() {
        return Err(Error::Invalid(format!(
            "shift fragments apply to audio only: `{visual_ref}`"
        )));
    }
    let path = r.resolve(media_root);
    let arr = load_u8(&path)?;
    let frames = arr
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| file_err(&path, "frame stack must be rank 4"))?;
    if frames.dim().3 != 3 {
        return Err(file_err(&path, "frame stack must be [T, H, W, 3]"));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};

    #[test]
    fn u8_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.arr");
        let data = Array::from_shape_fn(IxDyn(&[2, 3, 4, 3]), |ix| {
            (ix[0] * 36 + ix[1] * 12 + ix[2] * 3 + ix[3]) as u8
        });
        save_u8(&path, data.view()).unwrap();
        assert_eq!(load_u8(&path).unwrap(), data);
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wave.arr");
        let data =
            Array::from_shape_vec(IxDyn(&[5]), vec![0.0f32, -1.5, 3.25e-7, f32::MIN, 1e9])
                .unwrap();
        save_f32(&path, data.view()).unwrap();
        let back = load_f32(&path).unwrap();
        for (a, b) in data.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn type_and_shape_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wave.arr");
        save_f32(&path, Array::zeros(IxDyn(&[4])).view()).unwrap();
        assert!(load_u8(&path).is_err());

        let garbage = dir.path().join("garbage.arr");
        std::fs::write(&garbage, b"nope").unwrap();
        assert!(load_f32(&garbage).is_err());

        let truncated = dir.path().join("short.arr");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&truncated, &bytes).unwrap();
        assert!(load_f32(&truncated).is_err());
    }

    #[test]
    fn ref_parsing() {
        let r = MediaRef::parse("audio/real_0007.arr").unwrap();
        assert_eq!(r.path, PathBuf::from("audio/real_0007.arr"));
        assert_eq!(r.shift, None);

        let r = MediaRef::parse("audio/unsynced_0003.arr#shift=12").unwrap();
        assert_eq!(r.shift, Some(12));

        assert!(MediaRef::parse("#shift=3").is_err());
        assert!(MediaRef::parse("a.arr#shift=0").is_err());
        assert!(MediaRef::parse("a.arr#warp=2").is_err());
        assert!(MediaRef::parse("a.arr#shift=abc").is_err());
        assert!(MediaRef::parse("/etc/passwd").is_err());
        assert!(MediaRef::parse("../up.arr").is_err());
    }

    #[test]
    fn typed_loaders_check_rank_and_fragment() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("audio")).unwrap();
        save_f32(
            &dir.path().join("audio/a.arr"),
            Array::zeros(IxDyn(&[100])).view(),
        )
        .unwrap();
        save_u8(
            &dir.path().join("audio/frames.arr"),
            Array::zeros(IxDyn(&[2, 4, 4, 3])).view(),
        )
        .unwrap();

        let (wave, shift) = load_waveform(dir.path(), "audio/a.arr#shift=5").unwrap();
        assert_eq!(wave.len(), 100);
        assert_eq!(shift, Some(5));

        // Rank-1 file is not a frame stack, and frames reject fragments.
        assert!(load_frames(dir.path(), "audio/a.arr").is_err());
        assert!(load_frames(dir.path(), "audio/frames.arr#shift=2").is_err());
        assert!(load_frames(dir.path(), "audio/frames.arr").is_ok());
    }
}
