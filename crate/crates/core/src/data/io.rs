use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use serde::{Deserialize, Serialize};

use super::{BBox, Dataset, DatasetEntry, Frame, LesionClass, Split, VideoSample};
use crate::error::{Error, Result};

/// Zero padding of the frame index in `frame_0007.pgm`.
pub const FRAME_FILE_DIGITS: usize = 4;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub id: String,
    pub label: LesionClass,
    pub frame_count: usize,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub boxes: Vec<BBox>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub videos: Vec<ManifestVideo>,
}

impl Manifest {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let videos = ds
            .entries
            .iter()
            .map(|e| {
                let (h, w) = e.video.resolution();
                ManifestVideo {
                    id: e.video.id.clone(),
                    label: e.video.label,
                    frame_count: e.video.frame_count(),
                    resolution: [h, w],
                    boxes: e.video.boxes.clone(),
                    split: e.split,
                }
            })
            .collect();
        Manifest { videos }
    }

    pub fn get(&self, id: &str) -> Option<&ManifestVideo> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Structural checks that do not need the frame files.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for v in &self.videos {
            let id = &v.id;
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(Error::Dataset(format!("invalid video id {id:?}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Dataset(format!("duplicate video id {id:?}")));
            }
            if v.frame_count < 3 {
                return Err(Error::Dataset(format!("{id}: frame_count {} < 3", v.frame_count)));
            }
            if v.boxes.len() != v.frame_count {
                return Err(Error::Dataset(format!(
                    "{id}: {} boxes for frame_count {}",
                    v.boxes.len(),
                    v.frame_count
                )));
            }
            let [h, w] = v.resolution;
            for (k, b) in v.boxes.iter().enumerate() {
                super::validate_box(b, h, w).map_err(|e| Error::Dataset(format!("{id}: frame {k}: {e}")))?;
            }
        }
        Ok(())
    }
}

pub fn frame_path(dir: &Path, video_id: &str, k: usize) -> PathBuf {
    dir.join(video_id).join(format!("frame_{k:0width$}.pgm", width = FRAME_FILE_DIGITS))
}

fn write_pgm(path: &Path, frame: &Frame) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&frame.to_bytes(), frame.width as u32, frame.height as u32, ExtendedColorType::L8)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn read_pgm(path: &Path) -> Result<Frame> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let gray = img.to_luma8();
    Frame::from_bytes(gray.height() as usize, gray.width() as usize, gray.as_raw())
}

/// Write `manifest.json` and one 8-bit PGM per frame. Pixels are stored
/// rounded to 1/255, so datasets whose frames are already quantized round
/// trip exactly.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for e in &ds.entries {
        e.video.validate()?;
    }
    let manifest = Manifest::from_dataset(ds);
    manifest.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for e in &ds.entries {
        let vdir = dir.join(&e.video.id);
        fs::create_dir_all(&vdir).map_err(|err| Error::io(&vdir, err))?;
        for (k, f) in e.video.frames.iter().enumerate() {
            write_pgm(&frame_path(dir, &e.video.id, k), f)?;
        }
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: malformed manifest: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let mut entries = Vec::with_capacity(manifest.videos.len());
    for v in manifest.videos {
        let frames = (0..v.frame_count)
            .map(|k| {
                let path = frame_path(dir, &v.id, k);
                let f = read_pgm(&path)?;
                if [f.height, f.width] != v.resolution {
                    return Err(Error::Dataset(format!(
                        "{}: {}×{} frame, manifest says {:?}",
                        path.display(),
                        f.height,
                        f.width,
                        v.resolution
                    )));
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        let video = VideoSample { id: v.id, label: v.label, frames, boxes: v.boxes };
        video.validate()?;
        entries.push(DatasetEntry { video, split: v.split });
    }
    Ok(Dataset { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};

    fn small() -> Dataset {
        generate_dataset(&DatasetConfig { videos: 4, frames: 5, height: 32, width: 40, test_fraction: 0.25, seed: 3 })
            .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        save_dataset(&ds, dir.path()).unwrap();
        assert!(frame_path(dir.path(), &ds.entries[0].video.id, 4).ends_with("frame_0004.pgm"));
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_inverted_box() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small(), dir.path()).unwrap();
        let mut m = load_manifest(dir.path()).unwrap();
        m.videos[1].boxes[2] = [20.0, 5.0, 10.0, 15.0];
        fs::write(dir.path().join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("x1 < x2"), "{err}");
    }

    #[test]
    fn missing_frame_and_unknown_key_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(frame_path(dir.path(), &ds.entries[0].video.id, 1)).unwrap();
        assert!(load_dataset(dir.path()).is_err());
        fs::write(dir.path().join(MANIFEST), r#"{"videos": [], "extra": 1}"#).unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }
}
