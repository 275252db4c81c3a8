//! Video records, on-disk formats, snippet sampling and the synthetic
//! two-modality benchmark generator.

mod codec;
mod manifest;
mod sampling;
mod synthetic;

pub use codec::{read_feature_file, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION};
pub use manifest::{
    load_manifest, load_video, load_videos, save_manifest, DatasetManifest, GtSegment, Split,
    VideoEntry,
};
pub use sampling::sample_training_snippets;
pub use synthetic::{generate_records, generate_synthetic, SynthSummary, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// T x D snippet features for one modality of one video, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    t: usize,
    d: usize,
    values: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(t: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if t == 0 || d == 0 {
            return Err(Error::EmptySequence("feature_sequence"));
        }
        if values.len() != t * d {
            return Err(Error::Shape {
                op: "feature_sequence",
                detail: format!("{t}x{d} needs {} values, got {}", t * d, values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "feature_sequence",
                detail: format!("non-finite value at flat index {i}"),
            });
        }
        Ok(FeatureSequence { t, d, values })
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.d..(t + 1) * self.d]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.t, self.d], self.values.clone()).expect("validated at construction")
    }

    /// Gathers rows by (possibly repeated) indices into a new sequence.
    pub fn gather_rows(&self, indices: &[usize]) -> FeatureSequence {
        let mut values = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        FeatureSequence {
            t: indices.len(),
            d: self.d,
            values,
        }
    }
}

/// One video: two aligned modalities, video-level labels and optional
/// ground-truth segments in snippet units.
#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub id: String,
    pub rgb: FeatureSequence,
    pub flow: FeatureSequence,
    /// Label indices, sorted and deduplicated, each < C.
    pub labels: Vec<usize>,
    pub gt_segments: Vec<GtSegment>,
}

impl VideoRecord {
    pub fn new(
        id: String,
        rgb: FeatureSequence,
        flow: FeatureSequence,
        labels: Vec<usize>,
        gt_segments: Vec<GtSegment>,
    ) -> Result<Self> {
        if rgb.len() != flow.len() || rgb.dim() != flow.dim() {
            return Err(Error::Manifest {
                record: id,
                detail: format!(
                    "modalities disagree: rgb {}x{}, flow {}x{}",
                    rgb.len(),
                    rgb.dim(),
                    flow.len(),
                    flow.dim()
                ),
            });
        }
        let t = rgb.len() as f64;
        for seg in &gt_segments {
            if !(seg.start >= 0.0 && seg.start < seg.end && seg.end <= t) {
                return Err(Error::Manifest {
                    record: id,
                    detail: format!(
                        "gt segment [{}, {}) out of range for T={t}",
                        seg.start, seg.end
                    ),
                });
            }
        }
        let mut labels = labels;
        labels.sort_unstable();
        labels.dedup();
        Ok(VideoRecord {
            id,
            rgb,
            flow,
            labels,
            gt_segments,
        })
    }

    pub fn snippets(&self) -> usize {
        self.rgb.len()
    }

    /// Dense 0/1 label vector of length `num_classes`.
    pub fn label_vector(&self, num_classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; num_classes];
        for &c in &self.labels {
            y[c] = 1.0;
        }
        y
    }

    pub fn shares_class_with(&self, other: &VideoRecord) -> Option<usize> {
        self.labels
            .iter()
            .find(|c| other.labels.contains(c))
            .copied()
    }
}
