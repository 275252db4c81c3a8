//! Dataset manifest: JSON description of a split's videos, labels and
//! ground truth, pointing at binary feature files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_feature_file, VideoRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Ground-truth action instance in snippet units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtSegment {
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub rgb_path: String,
    pub flow_path: String,
    /// Label indices into `class_names`.
    pub labels: Vec<usize>,
    #[serde(default)]
    pub gt_segments: Vec<GtSegment>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    pub split: Split,
    pub videos: Vec<VideoEntry>,
    /// Directory feature paths are resolved against; set on load, not stored.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    fn validate(&self, manifest_path: &Path) -> Result<()> {
        let c = self.num_classes();
        if c == 0 {
            return Err(Error::Config("manifest has no classes".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("manifest feature_dim is zero".into()));
        }
        let mut seen = BTreeSet::new();
        for v in &self.videos {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::Manifest {
                    record: v.id.clone(),
                    detail: "duplicate video id".into(),
                });
            }
            for &l in &v.labels {
                if l >= c {
                    return Err(Error::Manifest {
                        record: v.id.clone(),
                        detail: format!("label index {l} out of range for {c} classes"),
                    });
                }
            }
            if self.split == Split::Train && v.labels.is_empty() {
                return Err(Error::Manifest {
                    record: v.id.clone(),
                    detail: "training video has no labels".into(),
                });
            }
            for seg in &v.gt_segments {
                if seg.class >= c {
                    return Err(Error::Manifest {
                        record: v.id.clone(),
                        detail: format!("gt class {} out of range for {c} classes", seg.class),
                    });
                }
                if !(seg.start >= 0.0 && seg.start < seg.end) {
                    return Err(Error::Manifest {
                        record: v.id.clone(),
                        detail: format!("gt segment [{}, {}) is degenerate", seg.start, seg.end),
                    });
                }
            }
            for rel in [&v.rgb_path, &v.flow_path] {
                let p = self.resolve(rel);
                if !p.is_file() {
                    return Err(Error::Manifest {
                        record: v.id.clone(),
                        detail: format!(
                            "feature file {} not found (manifest {})",
                            p.display(),
                            manifest_path.display()
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Loads and validates a manifest; feature paths are checked for existence
/// and later resolved relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate(path)?;
    Ok(manifest)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads one video's feature files and assembles the full record.
pub fn load_video(manifest: &DatasetManifest, index: usize) -> Result<VideoRecord> {
    let entry = &manifest.videos[index];
    let rgb = read_feature_file(&manifest.resolve(&entry.rgb_path))?;
    let flow = read_feature_file(&manifest.resolve(&entry.flow_path))?;
    for (name, seq) in [("rgb", &rgb), ("flow", &flow)] {
        if seq.dim() != manifest.feature_dim {
            return Err(Error::Manifest {
                record: entry.id.clone(),
                detail: format!(
                    "{name} features have D={}, manifest says {}",
                    seq.dim(),
                    manifest.feature_dim
                ),
            });
        }
    }
    VideoRecord::new(
        entry.id.clone(),
        rgb,
        flow,
        entry.labels.clone(),
        entry.gt_segments.clone(),
    )
}

/// Loads every video of the manifest, in manifest order.
pub fn load_videos(manifest: &DatasetManifest) -> Result<Vec<VideoRecord>> {
    (0..manifest.videos.len())
        .map(|i| load_video(manifest, i))
        .collect()
}
