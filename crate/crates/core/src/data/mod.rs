//! Videos on disk, label tables, augmentation and the synthetic generator.

mod augment;
mod labels;
mod synth;

pub use augment::{AugmentConfig, AugmentParams};
pub use labels::{select_labeled_frames, LabelRow, LabelTable};
pub use synth::{SynthData, SynthSpec};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const PACKED_MAGIC: &[u8; 4] = b"SQF1";
const HEADER_BYTES: usize = 4 + 4 * 4;

/// A clip of `T_v` frames `[T_v,C,H,W]`, every value in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedVideo {
    pub id: String,
    pub frames: Tensor<f32>,
}

impl PackedVideo {
    pub fn new(id: impl Into<String>, frames: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        if frames.ndim() != 4 || frames.shape()[0] == 0 {
            return Err(Error::Data(format!(
                "video {id}: frames must be [T,C,H,W] with T >= 1, got {:?}",
                frames.shape()
            )));
        }
        if let Some(i) = frames.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "video {id}: value {} at element {i} outside [0,1]",
                frames.data()[i]
            )));
        }
        Ok(PackedVideo { id, frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// `[C,H,W]`.
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[1], s[2], s[3]]
    }

    /// Frames `start..start+len` as a `[len,C,H,W]` tensor.
    pub fn window(&self, start: usize, len: usize) -> Tensor<f32> {
        let inner: usize = self.frames.shape()[1..].iter().product();
        let data = self.frames.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&self.frames.shape()[1..]);
        Tensor::new(shape, data).expect("window of a valid video")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 4 * self.frames.len());
        out.extend_from_slice(PACKED_MAGIC);
        for &d in self.frames.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let id = id.into();
        if bytes.len() < 4 || &bytes[..4] != PACKED_MAGIC {
            return Err(Error::Data(format!("video {id}: missing SQF1 magic")));
        }
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Data(format!(
                "video {id}: truncated header, expected {HEADER_BYTES} bytes, got {}",
                bytes.len()
            )));
        }
        let dims: Vec<usize> = bytes[4..HEADER_BYTES]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let expected = HEADER_BYTES + 4 * dims.iter().product::<usize>();
        if bytes.len() != expected {
            return Err(Error::Data(format!(
                "video {id}: expected {expected} bytes for shape {dims:?}, got {}",
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "video {id}: value {} at element {i} outside [0,1]",
                data[i]
            )));
        }
        let frames = Tensor::new(dims, data).map_err(|e| Error::Data(format!("video {id}: {e}")))?;
        PackedVideo::new(id, frames)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a packed-frame file; the id is the file stem.
pub fn load_packed(path: &Path) -> Result<PackedVideo> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PackedVideo::from_bytes(id, &bytes)
}

/// One manifest line: `video_id path num_frames`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub num_frames: usize,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, path, n] = parts[..] else {
            return Err(Error::Data(format!(
                "manifest line {}: expected `video_id path num_frames`",
                i + 1
            )));
        };
        let num_frames = n
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: bad frame count {n:?}", i + 1)))?;
        out.push(ManifestEntry {
            id: id.to_string(),
            path: PathBuf::from(path),
            num_frames,
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        writeln!(s, "{} {} {}", e.id, e.path.display(), e.num_frames).unwrap();
    }
    s
}

/// Videos in manifest order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub videos: Vec<PackedVideo>,
}

impl Dataset {
    /// Loads every video listed in a manifest; relative paths resolve
    /// against the manifest's directory.
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut videos = Vec::new();
        for entry in parse_manifest(&text)? {
            let path = base.join(&entry.path);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let v = PackedVideo::from_bytes(entry.id.clone(), &bytes)?;
            if v.num_frames() != entry.num_frames {
                return Err(Error::Data(format!(
                    "video {}: manifest lists {} frames, file has {}",
                    entry.id,
                    entry.num_frames,
                    v.num_frames()
                )));
            }
            videos.push(v);
        }
        Ok(Dataset { videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(|v| v.num_frames()).sum()
    }

    pub fn find(&self, id: &str) -> Option<(usize, &PackedVideo)> {
        self.videos.iter().enumerate().find(|(_, v)| v.id == id)
    }

    /// Splits off the last `count` videos as a held-out set.
    pub fn split_tail(&self, count: usize) -> Result<(Dataset, Dataset)> {
        if count >= self.videos.len() {
            return Err(Error::Config(format!(
                "cannot hold out {count} of {} videos",
                self.videos.len()
            )));
        }
        let cut = self.videos.len() - count;
        Ok((
            Dataset {
                videos: self.videos[..cut].to_vec(),
            },
            Dataset {
                videos: self.videos[cut..].to_vec(),
            },
        ))
    }
}
