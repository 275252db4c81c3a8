//! Proposal generation and scoring: attention thresholding, outer-inner
//! contrast scores and per-class soft-NMS.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{tiou, Segment};
use crate::tensor::Tensor;

/// Decayed proposals below this confidence are dropped by soft-NMS.
const NMS_CONFIDENCE_FLOOR: f64 = 1e-4;

/// A scored candidate action instance in snippet units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub start: f64,
    pub end: f64,
    pub class: usize,
    pub confidence: f64,
}

fn default_class_threshold() -> f64 {
    0.2
}

fn default_attn_thresholds() -> Vec<f64> {
    (2..=18).map(|i| i as f64 * 0.05).collect()
}

fn default_oic_inflation() -> f64 {
    0.25
}

fn default_nms_sigma() -> f64 {
    0.3
}

fn default_min_proposal_len() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizeConfig {
    /// Video-level class probability needed for a class to be localized.
    #[serde(default = "default_class_threshold")]
    pub class_threshold: f64,
    /// Attention thresholds; each contributes proposals at its own scale.
    #[serde(default = "default_attn_thresholds")]
    pub attn_thresholds: Vec<f64>,
    /// Outer region length as a fraction of the proposal length, per side.
    #[serde(default = "default_oic_inflation")]
    pub oic_inflation: f64,
    #[serde(default = "default_nms_sigma")]
    pub nms_sigma: f64,
    /// Minimum run length, in snippets, for a proposal.
    #[serde(default = "default_min_proposal_len")]
    pub min_proposal_len: usize,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            class_threshold: default_class_threshold(),
            attn_thresholds: default_attn_thresholds(),
            oic_inflation: default_oic_inflation(),
            nms_sigma: default_nms_sigma(),
            min_proposal_len: default_min_proposal_len(),
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attn_thresholds.is_empty()
            || self
                .attn_thresholds
                .iter()
                .any(|&t| !(0.0..1.0).contains(&t) || t == 0.0)
        {
            return Err(Error::Config(
                "attention thresholds must lie strictly inside (0,1)".into(),
            ));
        }
        if self.oic_inflation <= 0.0 {
            return Err(Error::Config("oic inflation must be positive".into()));
        }
        if self.nms_sigma <= 0.0 {
            return Err(Error::Config("nms sigma must be positive".into()));
        }
        if self.min_proposal_len == 0 {
            return Err(Error::Config("min proposal length must be positive".into()));
        }
        Ok(())
    }
}

/// Video-level class probabilities from the suppressed score map: top-k mean
/// per column, softmax over C+1, background dropped (no renormalization).
pub fn video_class_scores(tcam_supp: &Tensor, k_divisor: usize) -> Vec<f64> {
    let (t, width) = (tcam_supp.rows(), tcam_supp.cols());
    let k = (t / k_divisor.max(1)).max(1);
    let mut v = vec![0.0; width];
    for (c, vc) in v.iter_mut().enumerate() {
        let mut col = tcam_supp.column(c);
        col.sort_by(|a, b| b.partial_cmp(a).unwrap());
        *vc = col[..k].iter().sum::<f64>() / k as f64;
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    v[..width - 1].iter().map(|&x| (x - m).exp() / z).collect()
}

/// Thresholds the attention track at every configured level and turns
/// maximal surviving runs into class-tagged integer segments. Duplicates
/// (same class and bounds) collapse; the output is sorted.
pub fn generate_proposals(
    attention: &[f64],
    selected_classes: &[usize],
    cfg: &LocalizeConfig,
) -> Vec<(usize, usize, usize)> {
    let mut unique: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    for &theta in &cfg.attn_thresholds {
        let mut t = 0;
        while t < attention.len() {
            if attention[t] >= theta {
                let start = t;
                while t < attention.len() && attention[t] >= theta {
                    t += 1;
                }
                if t - start >= cfg.min_proposal_len {
                    for &class in selected_classes {
                        unique.insert((class, start, t));
                    }
                }
            } else {
                t += 1;
            }
        }
    }
    unique.into_iter().collect()
}

/// Outer-inner contrast score of one proposal against one class column of
/// the suppressed score map: inner mean minus the mean over the inflated
/// outer flanks (an empty outer region counts as zero).
pub fn oic_score(column: &[f64], start: f64, end: f64, inflation: f64) -> Result<f64> {
    let t = column.len() as f64;
    let inner: Vec<f64> = column
        .iter()
        .enumerate()
        .filter(|(i, _)| (*i as f64) >= start && (*i as f64) < end)
        .map(|(_, &v)| v)
        .collect();
    if inner.is_empty() {
        return Err(Error::Contract {
            op: "oic_score",
            detail: format!("proposal [{start}, {end}) covers no snippet"),
        });
    }
    let len = end - start;
    let left = (start - inflation * len).max(0.0);
    let right = (end + inflation * len).min(t);
    let outer: Vec<f64> = column
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let x = *i as f64;
            (x >= left && x < start) || (x >= end && x < right)
        })
        .map(|(_, &v)| v)
        .collect();
    let inner_mean = inner.iter().sum::<f64>() / inner.len() as f64;
    let outer_mean = if outer.is_empty() {
        0.0
    } else {
        outer.iter().sum::<f64>() / outer.len() as f64
    };
    Ok(inner_mean - outer_mean)
}

/// Soft non-maximum suppression per class: repeatedly take the most
/// confident proposal and decay every remaining same-class proposal by
/// `exp(-tIoU^2 / sigma)`; decayed proposals below the floor are dropped.
/// The result is sorted by final confidence.
pub fn soft_nms(proposals: Vec<Proposal>, sigma: f64) -> Vec<Proposal> {
    let mut per_class: BTreeMap<usize, Vec<Proposal>> = BTreeMap::new();
    for p in proposals {
        per_class.entry(p.class).or_default().push(p);
    }
    let mut out = Vec::new();
    for (_, mut group) in per_class {
        while !group.is_empty() {
            let mut best = 0;
            for i in 1..group.len() {
                let (a, b) = (&group[best], &group[i]);
                if b.confidence > a.confidence
                    || (b.confidence == a.confidence && b.start < a.start)
                {
                    best = i;
                }
            }
            let kept = group.swap_remove(best);
            let kept_seg = Segment::new(kept.start, kept.end).expect("valid proposal");
            group.retain_mut(|p| {
                let seg = Segment::new(p.start, p.end).expect("valid proposal");
                let overlap = tiou(kept_seg, seg).expect("valid segments");
                p.confidence *= (-overlap * overlap / sigma).exp();
                p.confidence >= NMS_CONFIDENCE_FLOOR
            });
            out.push(kept);
        }
    }
    out.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.class.cmp(&b.class))
            .then(a.start.partial_cmp(&b.start).unwrap())
    });
    out
}

/// Full per-video localization: class selection on video-level scores
/// (argmax fallback), proposal generation on the fused attention track,
/// outer-inner scoring plus the class score, then soft-NMS.
pub fn localize_video(
    a_fused: &[f64],
    tcam_supp: &Tensor,
    cfg: &LocalizeConfig,
    k_divisor: usize,
) -> Result<Vec<Proposal>> {
    cfg.validate()?;
    if a_fused.len() != tcam_supp.rows() {
        return Err(Error::Shape {
            op: "localize_video",
            detail: format!(
                "attention length {} != score map rows {}",
                a_fused.len(),
                tcam_supp.rows()
            ),
        });
    }
    let scores = video_class_scores(tcam_supp, k_divisor);
    let mut selected: Vec<usize> = (0..scores.len())
        .filter(|&c| scores[c] >= cfg.class_threshold)
        .collect();
    if selected.is_empty() {
        let argmax = scores
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.partial_cmp(b).unwrap().then(j.cmp(i)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        selected = vec![argmax];
    }

    let segments = generate_proposals(a_fused, &selected, cfg);
    let mut proposals = Vec::with_capacity(segments.len());
    for (class, start, end) in segments {
        let column = tcam_supp.column(class);
        let gamma = oic_score(&column, start as f64, end as f64, cfg.oic_inflation)?;
        proposals.push(Proposal {
            start: start as f64,
            end: end as f64,
            class,
            confidence: gamma + scores[class],
        });
    }
    Ok(soft_nms(proposals, cfg.nms_sigma))
}
