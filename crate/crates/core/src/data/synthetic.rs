//! Synthetic two-modality benchmark with planted actions and planted
//! task-irrelevant redundancy.
//!
//! Each video gets one class and a few non-overlapping action segments.
//! Inside a segment every class-informative channel of BOTH modalities
//! carries that class's signature simultaneously: a static offset in the
//! appearance stream, an onset/offset ramp in the motion stream. The
//! informative channels split into a small clean set (`signal_channels`)
//! and a larger redundant set that additionally carries distractor bursts
//! at label-uncorrelated times. Bursts are styled exactly like the class
//! signatures but live in ONE modality at a time (alternating per event
//! within each channel), so a burst never has cross-modal agreement while a
//! planted action always does. Ignoring the redundant channels statically
//! sacrifices most of the class evidence; keeping them requires telling
//! plants from bursts, and the only clean separator is per-snippet
//! cross-modal consensus.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    save_manifest, write_feature_file, DatasetManifest, FeatureSequence, GtSegment, Split,
    VideoEntry, VideoRecord,
};
use crate::error::{Error, Result};
use crate::hash::fnv1a_hex;
use crate::rng::Rng;

/// Class-signature amplitude planted on every informative channel.
pub const SIGNAL_AMPLITUDE: f64 = 1.2;
/// Distractor bursts carry twice the class-signature amplitude: a
/// single-modality burst then produces the same linear response as a
/// two-modality action under any weighting shared across modalities, so no
/// linear readout separates bursts from actions and only a cross-modal
/// conjunction does.
pub const DISTRACTOR_AMPLITUDE: f64 = 2.0 * SIGNAL_AMPLITUDE;
/// Ramp floor of the motion-style trapezoid (nonzero so segment edges still
/// carry some motion signal).
const RAMP_FLOOR: f64 = 0.3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Inclusive snippet-count range per video.
    pub t_range: (usize, usize),
    /// Inclusive range of planted action segments per video.
    pub actions_per_video: (usize, usize),
    /// Class-informative channels per modality (channel indices 0..signal).
    pub signal_channels: usize,
    /// Channels carrying distractor bursts uncorrelated with labels.
    pub redundant_channels: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.num_classes == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "synthetic spec needs videos, classes and channels".into(),
            ));
        }
        if self.signal_channels == 0 {
            return Err(Error::Config("synthetic spec needs signal channels".into()));
        }
        if self.signal_channels + self.redundant_channels > self.feature_dim {
            return Err(Error::Config(format!(
                "signal ({}) + redundant ({}) channels exceed D={}",
                self.signal_channels, self.redundant_channels, self.feature_dim
            )));
        }
        if self.t_range.0 == 0 || self.t_range.0 > self.t_range.1 {
            return Err(Error::Config(format!("invalid t_range {:?}", self.t_range)));
        }
        if self.actions_per_video.0 == 0 || self.actions_per_video.0 > self.actions_per_video.1 {
            return Err(Error::Config(format!(
                "invalid actions_per_video {:?}",
                self.actions_per_video
            )));
        }
        if self.t_range.0 < 12 {
            return Err(Error::Config(
                "t_range lower bound must be at least 12 snippets".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Trapezoid over the segment: quick rise, plateau, quick fall.
fn ramp(pos: usize, len: usize) -> f64 {
    let u = (pos as f64 + 0.5) / len as f64;
    let edge = 0.25;
    if u < edge {
        RAMP_FLOOR + (1.0 - RAMP_FLOOR) * (u / edge)
    } else if u > 1.0 - edge {
        RAMP_FLOOR + (1.0 - RAMP_FLOOR) * ((1.0 - u) / edge)
    } else {
        1.0
    }
}

/// Per-class, per-modality sign patterns over the signal channels.
fn class_patterns(rng: &mut Rng, classes: usize, channels: usize) -> Vec<Vec<f64>> {
    let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        for _attempt in 0..100 {
            let p: Vec<f64> = (0..channels)
                .map(|_| if rng.chance(0.5) { 1.0 } else { -1.0 })
                .collect();
            if !patterns.contains(&p) {
                patterns.push(p);
                break;
            }
        }
        if patterns.len() < patterns.capacity().min(classes) && patterns.is_empty() {
            // unreachable with channels >= 1; keep the loop total anyway
            patterns.push(vec![1.0; channels]);
        }
    }
    while patterns.len() < classes {
        patterns.push(
            (0..channels)
                .map(|_| if rng.chance(0.5) { 1.0 } else { -1.0 })
                .collect(),
        );
    }
    patterns
}

/// Places `count` non-overlapping segments (with a one-snippet gap) by
/// rejection; gives up on a segment after a bounded number of tries.
fn place_segments(rng: &mut Rng, t: usize, count: usize) -> Vec<(usize, usize)> {
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for _ in 0..count {
        let max_len = (t / 3).clamp(6, 18);
        'tries: for _try in 0..50 {
            let len = rng.range_usize(5, max_len);
            if len >= t {
                continue;
            }
            let start = rng.below(t - len);
            let end = start + len;
            for &(s, e) in &segments {
                if start < e + 1 && s < end + 1 {
                    continue 'tries;
                }
            }
            segments.push((start, end));
            break;
        }
    }
    segments.sort_unstable();
    segments
}

struct BurstEvent {
    start: usize,
    end: usize,
    /// Which class signature the burst wears on the redundant channels.
    mimic_class: usize,
    into_rgb: bool,
}

/// Non-overlapping distractor events on a shared timeline, alternating the
/// modality they land in, so any one instant carries burst energy in at
/// most one stream. Each event wears a randomly drawn class signature,
/// making it indistinguishable from a real action within its own modality's
/// redundant channels.
fn place_burst_events(rng: &mut Rng, t: usize, classes: usize) -> Vec<BurstEvent> {
    let count = rng.range_usize(5, 9);
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for _ in 0..count {
        'tries: for _try in 0..40 {
            let len = rng.range_usize(5, 12).min(t - 1);
            let start = rng.below(t - len);
            let end = start + len;
            for &(s, e) in &spans {
                if start < e && s < end {
                    continue 'tries;
                }
            }
            spans.push((start, end));
            break;
        }
    }
    spans.sort_unstable();
    let first_rgb = rng.chance(0.5);
    spans
        .into_iter()
        .enumerate()
        .map(|(i, (start, end))| BurstEvent {
            start,
            end,
            mimic_class: rng.below(classes),
            into_rgb: first_rgb == (i % 2 == 0),
        })
        .collect()
}

/// Generates the records in memory. The same seed always produces the same
/// videos, labels and ground truth.
pub fn generate_records(spec: &SyntheticSpec) -> Result<(Vec<VideoRecord>, Vec<String>)> {
    spec.validate()?;
    let mut rng = Rng::seed(spec.seed);
    let class_names: Vec<String> = (0..spec.num_classes)
        .map(|c| format!("class_{c:02}"))
        .collect();
    // class signatures span the clean and the redundant informative channels
    let informative = spec.signal_channels + spec.redundant_channels;
    let rgb_patterns = class_patterns(&mut rng, spec.num_classes, informative);
    let flow_patterns = class_patterns(&mut rng, spec.num_classes, informative);

    let d = spec.feature_dim;
    let mut records = Vec::with_capacity(spec.num_videos);
    for vi in 0..spec.num_videos {
        let t = rng.range_usize(spec.t_range.0, spec.t_range.1);
        let class = rng.below(spec.num_classes);
        let count = rng.range_usize(spec.actions_per_video.0, spec.actions_per_video.1);
        let segments = place_segments(&mut rng, t, count);

        let mut rgb = vec![0.0; t * d];
        let mut flow = vec![0.0; t * d];

        for &(s, e) in &segments {
            let len = e - s;
            for row in s..e {
                for ch in 0..informative {
                    rgb[row * d + ch] += SIGNAL_AMPLITUDE * rgb_patterns[class][ch];
                    flow[row * d + ch] +=
                        SIGNAL_AMPLITUDE * flow_patterns[class][ch] * ramp(row - s, len);
                }
            }
        }

        if spec.redundant_channels > 0 {
            for event in place_burst_events(&mut rng, t, spec.num_classes) {
                let len = event.end - event.start;
                for row in event.start..event.end {
                    for j in 0..spec.redundant_channels {
                        let ch = spec.signal_channels + j;
                        if event.into_rgb {
                            rgb[row * d + ch] +=
                                DISTRACTOR_AMPLITUDE * rgb_patterns[event.mimic_class][ch];
                        } else {
                            flow[row * d + ch] += DISTRACTOR_AMPLITUDE
                                * flow_patterns[event.mimic_class][ch]
                                * ramp(row - event.start, len);
                        }
                    }
                }
            }
        }

        if spec.noise_sigma > 0.0 {
            for v in rgb.iter_mut().chain(flow.iter_mut()) {
                *v += spec.noise_sigma * rng.normal();
            }
        }

        let gt: Vec<GtSegment> = segments
            .iter()
            .map(|&(s, e)| GtSegment {
                start: s as f64,
                end: e as f64,
                class,
            })
            .collect();
        records.push(VideoRecord::new(
            format!("v{vi:03}"),
            FeatureSequence::new(t, d, rgb)?,
            FeatureSequence::new(t, d, flow)?,
            vec![class],
            gt,
        )?);
    }
    Ok((records, class_names))
}

/// Summary printed by the synth pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub videos: usize,
    pub classes: usize,
    pub segments: usize,
    pub manifest_hash: String,
}

/// Writes feature files plus train and test manifests (both splits reference
/// the same desk-scale videos; ground truth rides along in both).
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthSummary> {
    let (records, class_names) = generate_records(spec)?;
    let feature_dir = out_dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;

    let mut entries = Vec::with_capacity(records.len());
    let mut segments = 0;
    for record in &records {
        let rgb_rel = format!("features/{}_rgb.fseq", record.id);
        let flow_rel = format!("features/{}_flow.fseq", record.id);
        write_feature_file(&out_dir.join(&rgb_rel), &record.rgb)?;
        write_feature_file(&out_dir.join(&flow_rel), &record.flow)?;
        segments += record.gt_segments.len();
        entries.push(VideoEntry {
            id: record.id.clone(),
            rgb_path: rgb_rel,
            flow_path: flow_rel,
            labels: record.labels.clone(),
            gt_segments: record.gt_segments.clone(),
        });
    }

    let mut hash_input = Vec::new();
    for split in [Split::Train, Split::Test] {
        let manifest = DatasetManifest {
            class_names: class_names.clone(),
            feature_dim: spec.feature_dim,
            split,
            videos: entries.clone(),
            base_dir: out_dir.to_path_buf(),
        };
        let name = match split {
            Split::Train => "manifest.train.json",
            Split::Test => "manifest.test.json",
        };
        let path = out_dir.join(name);
        save_manifest(&path, &manifest)?;
        hash_input.extend(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }

    Ok(SynthSummary {
        videos: records.len(),
        classes: class_names.len(),
        segments,
        manifest_hash: fnv1a_hex(&hash_input),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_videos: 6,
            num_classes: 3,
            feature_dim: 12,
            t_range: (40, 60),
            actions_per_video: (1, 3),
            signal_channels: 4,
            redundant_channels: 4,
            noise_sigma: 0.5,
            seed: 77,
        }
    }

    #[test]
    fn infeasible_channel_split_rejected() {
        let mut spec = base_spec();
        spec.signal_channels = 8;
        spec.redundant_channels = 8;
        assert!(matches!(generate_records(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_construction_plants_exact_offsets() {
        let mut spec = base_spec();
        spec.noise_sigma = 0.0;
        spec.redundant_channels = 0;
        let (records, _) = generate_records(&spec).unwrap();
        let mut checked = 0;
        for record in &records {
            let d = record.rgb.dim();
            for seg in &record.gt_segments {
                let (s, e) = (seg.start as usize, seg.end as usize);
                for ch in 0..spec.signal_channels {
                    let inside = (s..e).map(|r| record.rgb.values()[r * d + ch]).sum::<f64>()
                        / (e - s) as f64;
                    let outside_count = record.snippets() - (e - s);
                    if outside_count == 0 {
                        continue;
                    }
                    let outside = (0..record.snippets())
                        .filter(|r| {
                            !record
                                .gt_segments
                                .iter()
                                .any(|g| (*r as f64) >= g.start && (*r as f64) < g.end)
                        })
                        .map(|r| record.rgb.values()[r * d + ch])
                        .sum::<f64>()
                        / (0..record.snippets())
                            .filter(|r| {
                                !record
                                    .gt_segments
                                    .iter()
                                    .any(|g| (*r as f64) >= g.start && (*r as f64) < g.end)
                            })
                            .count()
                            .max(1) as f64;
                    assert!(
                        ((inside - outside).abs() - SIGNAL_AMPLITUDE).abs() < 1e-12,
                        "video {} seg {s}..{e} ch {ch}: inside {inside} outside {outside}",
                        record.id
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn same_seed_reproduces_byte_identical_records() {
        let spec = base_spec();
        let (a, _) = generate_records(&spec).unwrap();
        let (b, _) = generate_records(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.rgb.values(), rb.rgb.values());
            assert_eq!(ra.flow.values(), rb.flow.values());
            assert_eq!(ra.labels, rb.labels);
            assert_eq!(ra.gt_segments, rb.gt_segments);
        }
    }

    #[test]
    fn threshold_oracle_recovers_planted_segments_noiselessly() {
        // with zero noise and no distractors, thresholding any appearance
        // signal channel recovers the plants with tIoU 1.0
        let mut spec = base_spec();
        spec.noise_sigma = 0.0;
        spec.redundant_channels = 0;
        let (records, _) = generate_records(&spec).unwrap();
        for record in &records {
            let d = record.rgb.dim();
            let t = record.snippets();
            let mask: Vec<bool> = (0..t)
                .map(|r| {
                    (0..spec.signal_channels)
                        .any(|ch| record.rgb.values()[r * d + ch].abs() > SIGNAL_AMPLITUDE / 2.0)
                })
                .collect();
            let mut found: Vec<(usize, usize)> = Vec::new();
            let mut row = 0;
            while row < t {
                if mask[row] {
                    let start = row;
                    while row < t && mask[row] {
                        row += 1;
                    }
                    found.push((start, row));
                } else {
                    row += 1;
                }
            }
            let want: Vec<(usize, usize)> = record
                .gt_segments
                .iter()
                .map(|g| (g.start as usize, g.end as usize))
                .collect();
            assert_eq!(found, want, "video {}", record.id);
        }
    }

    #[test]
    fn bursts_never_share_an_instant_across_modalities() {
        // noiseless: outside the planted segments, a redundant channel may
        // carry burst energy in at most one modality at any instant, and
        // alternation puts bursts into both modalities over the video
        let mut spec = base_spec();
        spec.noise_sigma = 0.0;
        let (records, _) = generate_records(&spec).unwrap();
        let mut rgb_bursts = 0;
        let mut flow_bursts = 0;
        for record in &records {
            let d = record.rgb.dim();
            let in_segment = |r: usize| {
                record
                    .gt_segments
                    .iter()
                    .any(|g| (r as f64) >= g.start && (r as f64) < g.end)
            };
            for j in 0..spec.redundant_channels {
                let ch = spec.signal_channels + j;
                for r in 0..record.snippets() {
                    if in_segment(r) {
                        continue;
                    }
                    let rgb_on = record.rgb.values()[r * d + ch].abs() > 1e-9;
                    let flow_on = record.flow.values()[r * d + ch].abs() > 1e-9;
                    assert!(
                        !(rgb_on && flow_on),
                        "video {} ch {ch} t {r}: burst in both modalities",
                        record.id
                    );
                    rgb_bursts += rgb_on as usize;
                    flow_bursts += flow_on as usize;
                }
            }
        }
        assert!(rgb_bursts > 0 && flow_bursts > 0);
    }
}
