//! Training objectives.
//!
//! Five terms, each toggleable: top-k multiple-instance learning on the raw
//! and suppressed score maps, a co-activity ranking loss on same-class video
//! pairs, a mutual-learning loss that treats each modality's attention track
//! as the other's frozen pseudo-target, a background-opposition term tying
//! attention to the classifier's background probability, and an L1 sparsity
//! term that polarizes the tracks.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardVars;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const PROB_EPS: f64 = 1e-7;

/// Similarity metric used by the mutual-learning loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    #[default]
    Mse,
    Mae,
    Kl,
    Js,
}

impl FromStr for DeltaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(DeltaMode::Mse),
            "mae" => Ok(DeltaMode::Mae),
            "kl" => Ok(DeltaMode::Kl),
            "js" => Ok(DeltaMode::Js),
            other => Err(Error::Config(format!(
                "unknown delta mode '{other}' (mse|mae|kl|js)"
            ))),
        }
    }
}

fn default_true() -> bool {
    true
}

/// Which objective terms participate in the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnabledLosses {
    #[serde(default = "default_true")]
    pub mil: bool,
    #[serde(default = "default_true")]
    pub oppo: bool,
    #[serde(default = "default_true")]
    pub ml: bool,
    #[serde(default = "default_true")]
    pub cas: bool,
    #[serde(default = "default_true")]
    pub norm: bool,
}

impl Default for EnabledLosses {
    fn default() -> Self {
        EnabledLosses {
            mil: true,
            oppo: true,
            ml: true,
            cas: true,
            norm: true,
        }
    }
}

impl EnabledLosses {
    pub fn mil_only() -> Self {
        EnabledLosses {
            mil: true,
            oppo: false,
            ml: false,
            cas: false,
            norm: false,
        }
    }

    /// Disables one term by name.
    pub fn disable(&mut self, name: &str) -> Result<()> {
        match name {
            "mil" => self.mil = false,
            "oppo" => self.oppo = false,
            "ml" => self.ml = false,
            "cas" => self.cas = false,
            "norm" => self.norm = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown loss term '{other}' (mil|oppo|ml|cas|norm)"
                )))
            }
        }
        Ok(())
    }
}

fn default_alpha() -> f64 {
    0.5
}

fn default_lambda() -> f64 {
    0.8
}

fn default_topk_divisor() -> usize {
    8
}

fn default_cas_margin() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Mixing weight of the two mutual-learning directions.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Weight of the background-opposition term in the total.
    #[serde(default = "default_lambda")]
    pub lambda_oppo: f64,
    /// Weight of the sparsity term in the total.
    #[serde(default = "default_lambda")]
    pub lambda_norm: f64,
    /// k = max(1, T / topk_divisor) snippets per class in the MIL mean.
    #[serde(default = "default_topk_divisor")]
    pub topk_divisor: usize,
    #[serde(default = "default_cas_margin")]
    pub cas_margin: f64,
    #[serde(default)]
    pub delta: DeltaMode,
    #[serde(default)]
    pub enabled: EnabledLosses,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: default_alpha(),
            lambda_oppo: default_lambda(),
            lambda_norm: default_lambda(),
            topk_divisor: default_topk_divisor(),
            cas_margin: default_cas_margin(),
            delta: DeltaMode::default(),
            enabled: EnabledLosses::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        if self.lambda_oppo < 0.0 || self.lambda_norm < 0.0 {
            return Err(Error::Config("lambda weights must be nonnegative".into()));
        }
        if self.topk_divisor == 0 {
            return Err(Error::Config("topk_divisor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-term scalar values of one training step. Disabled terms are absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mil_org: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mil_supp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cas: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ml: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oppo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm: Option<f64>,
    pub total: f64,
}

/// The tape-level result of assembling the batch objective.
pub struct BatchLosses {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Co-activity pairs whose aggregate had zero norm.
    pub degenerate_pairs: usize,
}

/// Mean of k largest per-class scores, softmaxed over C+1 classes and
/// cross-entropied against the label distribution. `labels` has length C;
/// the background class is appended with `background_label` (1 for the raw
/// map, 0 for the suppressed map) and the extended vector is normalized to
/// sum 1.
pub fn topk_mil_loss(
    tape: &mut Tape,
    tcam: Var,
    labels: &[f64],
    background_label: f64,
    k_divisor: usize,
) -> Result<Var> {
    let shape = tape.shape(tcam);
    if shape.len() != 2 || shape[1] != labels.len() + 1 {
        return Err(Error::Shape {
            op: "topk_mil_loss",
            detail: format!(
                "score map {shape:?} does not match {} labels + background",
                labels.len()
            ),
        });
    }
    let t = shape[0];
    if t == 0 {
        return Err(Error::EmptySequence("topk_mil_loss"));
    }
    if k_divisor == 0 {
        return Err(Error::Config("topk divisor must be at least 1".into()));
    }
    let k = (t / k_divisor).max(1);

    let mut y: Vec<f64> = labels.to_vec();
    y.push(background_label);
    let sum: f64 = y.iter().sum();
    if sum == 0.0 {
        return Err(Error::Label(
            "extended label vector is all zero; nothing to learn from".into(),
        ));
    }
    for v in &mut y {
        *v /= sum;
    }

    let v = tape.topk_mean_cols(tcam, k)?;
    let lsm = tape.log_softmax_vec(v)?;
    let y_leaf = tape.constant(Tensor::new(vec![y.len()], y)?);
    let weighted = tape.mul(lsm, y_leaf)?;
    let s = tape.sum_all(weighted);
    Ok(tape.affine(s, -1.0, 0.0))
}

fn check_track(tape: &Tape, v: Var, name: &str) -> Result<()> {
    if let Some(&bad) = tape.values(v).iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Domain {
            op: "mutual_learning_loss",
            detail: format!("{name} contains {bad}, outside [0,1]"),
        });
    }
    Ok(())
}

/// Mean Bernoulli KL(target || pred) over snippets; both operands must
/// already be clamped into (0,1).
fn kl_bernoulli(tape: &mut Tape, target: Var, pred: Var) -> Result<Var> {
    let ln_t = tape.ln(target)?;
    let ln_p = tape.ln(pred)?;
    let d1 = tape.sub(ln_t, ln_p)?;
    let pos = tape.mul(target, d1)?;
    let omt = tape.affine(target, -1.0, 1.0);
    let omp = tape.affine(pred, -1.0, 1.0);
    let ln_omt = tape.ln(omt)?;
    let ln_omp = tape.ln(omp)?;
    let d2 = tape.sub(ln_omt, ln_omp)?;
    let neg = tape.mul(omt, d2)?;
    let sum = tape.add(pos, neg)?;
    Ok(tape.mean_all(sum))
}

/// One direction of the mutual-learning loss: delta(pred, frozen). The
/// target var must already be gradient-free (a stop-grad node or constant).
fn delta_term(tape: &mut Tape, pred: Var, frozen: Var, mode: DeltaMode) -> Result<Var> {
    match mode {
        DeltaMode::Mse => {
            let d = tape.sub(pred, frozen)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean_all(sq))
        }
        DeltaMode::Mae => {
            let d = tape.sub(pred, frozen)?;
            let a = tape.abs(d);
            Ok(tape.mean_all(a))
        }
        DeltaMode::Kl => {
            let t = tape.clamp(frozen, PROB_EPS, 1.0 - PROB_EPS);
            let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
            kl_bernoulli(tape, t, p)
        }
        DeltaMode::Js => {
            let t = tape.clamp(frozen, PROB_EPS, 1.0 - PROB_EPS);
            let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
            let sum = tape.add(t, p)?;
            let mid = tape.affine(sum, 0.5, 0.0);
            let kl_tm = kl_bernoulli(tape, t, mid)?;
            let kl_pm = kl_bernoulli(tape, p, mid)?;
            let s = tape.add(kl_tm, kl_pm)?;
            Ok(tape.affine(s, 0.5, 0.0))
        }
    }
}

/// Mutual learning between the two attention tracks: each is the frozen
/// pseudo-target of the other.
pub fn mutual_learning_loss(
    tape: &mut Tape,
    a_rgb: Var,
    a_flow: Var,
    alpha: f64,
    mode: DeltaMode,
) -> Result<Var> {
    if tape.shape(a_rgb) != tape.shape(a_flow) {
        return Err(Error::Shape {
            op: "mutual_learning_loss",
            detail: format!(
                "tracks differ: {:?} vs {:?}",
                tape.shape(a_rgb),
                tape.shape(a_flow)
            ),
        });
    }
    check_track(tape, a_rgb, "appearance track")?;
    check_track(tape, a_flow, "motion track")?;
    let frozen_flow = tape.stop_grad(a_flow);
    let frozen_rgb = tape.stop_grad(a_rgb);
    let t1 = delta_term(tape, a_rgb, frozen_flow, mode)?;
    let t2 = delta_term(tape, a_flow, frozen_rgb, mode)?;
    let w1 = tape.affine(t1, alpha, 0.0);
    let w2 = tape.affine(t2, 1.0 - alpha, 0.0);
    tape.add(w1, w2)
}

/// Mutual-learning loss against numerically frozen pseudo-targets. Used by
/// the gradient checker: a finite difference of the live loss would move
/// the stop-gradient branch along with the parameters, so the checker pins
/// the targets at their base-point values instead, which has the same value
/// and the same gradient as the live loss at that point.
pub fn mutual_learning_loss_frozen(
    tape: &mut Tape,
    a_rgb: Var,
    a_flow: Var,
    target_rgb: &[f64],
    target_flow: &[f64],
    alpha: f64,
    mode: DeltaMode,
) -> Result<Var> {
    check_track(tape, a_rgb, "appearance track")?;
    check_track(tape, a_flow, "motion track")?;
    let frozen_flow = tape.constant(Tensor::new(vec![target_flow.len()], target_flow.to_vec())?);
    let frozen_rgb = tape.constant(Tensor::new(vec![target_rgb.len()], target_rgb.to_vec())?);
    let t1 = delta_term(tape, a_rgb, frozen_flow, mode)?;
    let t2 = delta_term(tape, a_flow, frozen_rgb, mode)?;
    let w1 = tape.affine(t1, alpha, 0.0);
    let w2 = tape.affine(t2, 1.0 - alpha, 0.0);
    tape.add(w1, w2)
}

/// Attention should oppose the background probability: mean |A + s - 1|
/// averaged over the three tracks, where s is the background column of the
/// row-softmaxed score map.
pub fn opposite_loss(
    tape: &mut Tape,
    a_rgb: Var,
    a_flow: Var,
    a_fused: Var,
    tcam: Var,
) -> Result<Var> {
    let (t, width) = {
        let s = tape.shape(tcam);
        (s[0], s[1])
    };
    for a in [a_rgb, a_flow, a_fused] {
        if tape.shape(a) != [t] {
            return Err(Error::Shape {
                op: "opposite_loss",
                detail: format!("track shape {:?} does not match T={t}", tape.shape(a)),
            });
        }
    }
    let probs = tape.softmax_rows(tcam)?;
    let bg = tape.column(probs, width - 1)?;
    let mut terms = Vec::with_capacity(3);
    for a in [a_rgb, a_flow, a_fused] {
        let s = tape.add(a, bg)?;
        let shifted = tape.affine(s, 1.0, -1.0);
        let mag = tape.abs(shifted);
        terms.push(tape.mean_all(mag));
    }
    let sum01 = tape.add(terms[0], terms[1])?;
    let sum = tape.add(sum01, terms[2])?;
    Ok(tape.affine(sum, 1.0 / 3.0, 0.0))
}

/// L1 sparsity over the three tracks, per-snippet mean.
pub fn norm_loss(tape: &mut Tape, a_rgb: Var, a_flow: Var, a_fused: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for a in [a_rgb, a_flow, a_fused] {
        let mag = tape.abs(a);
        terms.push(tape.mean_all(mag));
    }
    let sum01 = tape.add(terms[0], terms[1])?;
    let sum = tape.add(sum01, terms[2])?;
    Ok(tape.affine(sum, 1.0 / 3.0, 0.0))
}

/// Inputs of one video to the co-activity loss: fused features (T x 2D) and
/// the suppressed score map (T x C+1).
#[derive(Debug, Clone, Copy)]
pub struct CasView {
    pub fused: Var,
    pub tcam_supp: Var,
}

impl CasView {
    pub fn of(out: &ForwardVars) -> Self {
        CasView {
            fused: out.fused,
            tcam_supp: out.tcam_supp,
        }
    }
}

fn cas_aggregates(tape: &mut Tape, view: CasView, class: usize) -> Result<(Var, Var)> {
    let col = tape.column(view.tcam_supp, class)?;
    let w_high = tape.softmax_vec(col)?;
    let high = tape.weighted_row_sum(view.fused, w_high)?;
    let neg = tape.affine(col, -1.0, 0.0);
    let w_low = tape.softmax_vec(neg)?;
    let low = tape.weighted_row_sum(view.fused, w_low)?;
    Ok((high, low))
}

/// Ranking loss over same-class video pairs: the attention-weighted "high"
/// aggregates of a pair must be closer to each other than to the "low"
/// (inverse-attention) aggregates, by the margin, under cosine distance.
/// Returns the mean pair loss and the count of degenerate (zero-norm)
/// cosine evaluations. An empty pair list contributes zero.
pub fn coactivity_loss(
    tape: &mut Tape,
    views: &[CasView],
    pairs: &[(usize, usize, usize)],
    margin: f64,
) -> Result<(Var, usize)> {
    if pairs.is_empty() {
        return Ok((tape.scalar(0.0), 0));
    }
    let mut degenerate = 0;
    let mut losses = Vec::with_capacity(pairs.len());
    for &(m, n, class) in pairs {
        let (high_m, low_m) = cas_aggregates(tape, views[m], class)?;
        let (high_n, low_n) = cas_aggregates(tape, views[n], class)?;
        let (d_hh, deg1) = tape.cosine_distance(high_m, high_n)?;
        let (d_hl, deg2) = tape.cosine_distance(high_m, low_n)?;
        let (d_lh, deg3) = tape.cosine_distance(low_m, high_n)?;
        degenerate += [deg1, deg2, deg3].iter().filter(|&&d| d).count();

        let gap1 = tape.sub(d_hh, d_hl)?;
        let hinge1 = {
            let shifted = tape.affine(gap1, 1.0, margin);
            tape.relu(shifted)
        };
        let gap2 = tape.sub(d_hh, d_lh)?;
        let hinge2 = {
            let shifted = tape.affine(gap2, 1.0, margin);
            tape.relu(shifted)
        };
        let sum = tape.add(hinge1, hinge2)?;
        losses.push(tape.affine(sum, 0.5, 0.0));
    }
    Ok((mean_of(tape, &losses)?, degenerate))
}

/// Mean of a non-empty list of scalar vars.
fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.affine(acc, 1.0 / vars.len() as f64, 0.0))
}

/// Assembles the enabled objective terms over one batch of forwards.
/// `labels[i]` is the dense 0/1 class vector of video i; `pairs` index into
/// `outs` with a shared class per pair.
pub fn total_loss(
    tape: &mut Tape,
    outs: &[ForwardVars],
    labels: &[Vec<f64>],
    pairs: &[(usize, usize, usize)],
    cfg: &LossConfig,
) -> Result<BatchLosses> {
    total_loss_impl(tape, outs, labels, pairs, cfg, None)
}

/// [`total_loss`] with the mutual-learning pseudo-targets pinned to the
/// given per-video (rgb, flow) track values; see
/// [`mutual_learning_loss_frozen`].
pub fn total_loss_frozen_ml(
    tape: &mut Tape,
    outs: &[ForwardVars],
    labels: &[Vec<f64>],
    pairs: &[(usize, usize, usize)],
    cfg: &LossConfig,
    ml_targets: &[(Vec<f64>, Vec<f64>)],
) -> Result<BatchLosses> {
    total_loss_impl(tape, outs, labels, pairs, cfg, Some(ml_targets))
}

fn total_loss_impl(
    tape: &mut Tape,
    outs: &[ForwardVars],
    labels: &[Vec<f64>],
    pairs: &[(usize, usize, usize)],
    cfg: &LossConfig,
    ml_targets: Option<&[(Vec<f64>, Vec<f64>)]>,
) -> Result<BatchLosses> {
    cfg.validate()?;
    if outs.is_empty() || outs.len() != labels.len() {
        return Err(Error::Contract {
            op: "total_loss",
            detail: format!("{} forwards vs {} label vectors", outs.len(), labels.len()),
        });
    }

    let mut weighted_terms: Vec<Var> = Vec::new();
    let mut breakdown = LossBreakdown {
        mil_org: None,
        mil_supp: None,
        cas: None,
        ml: None,
        oppo: None,
        norm: None,
        total: 0.0,
    };
    let mut degenerate_pairs = 0;

    if cfg.enabled.mil {
        let mut org = Vec::with_capacity(outs.len());
        let mut supp = Vec::with_capacity(outs.len());
        for (out, y) in outs.iter().zip(labels) {
            org.push(topk_mil_loss(tape, out.tcam, y, 1.0, cfg.topk_divisor)?);
            supp.push(topk_mil_loss(
                tape,
                out.tcam_supp,
                y,
                0.0,
                cfg.topk_divisor,
            )?);
        }
        let org = mean_of(tape, &org)?;
        let supp = mean_of(tape, &supp)?;
        breakdown.mil_org = Some(tape.scalar_value(org));
        breakdown.mil_supp = Some(tape.scalar_value(supp));
        weighted_terms.push(org);
        weighted_terms.push(supp);
    }

    if cfg.enabled.cas {
        let views: Vec<CasView> = outs.iter().map(CasView::of).collect();
        let (cas, degenerate) = coactivity_loss(tape, &views, pairs, cfg.cas_margin)?;
        degenerate_pairs = degenerate;
        breakdown.cas = Some(tape.scalar_value(cas));
        weighted_terms.push(cas);
    }

    if cfg.enabled.ml {
        let mut terms = Vec::with_capacity(outs.len());
        for (i, out) in outs.iter().enumerate() {
            terms.push(match ml_targets {
                None => mutual_learning_loss(tape, out.a_rgb, out.a_flow, cfg.alpha, cfg.delta)?,
                Some(targets) => mutual_learning_loss_frozen(
                    tape,
                    out.a_rgb,
                    out.a_flow,
                    &targets[i].0,
                    &targets[i].1,
                    cfg.alpha,
                    cfg.delta,
                )?,
            });
        }
        let ml = mean_of(tape, &terms)?;
        breakdown.ml = Some(tape.scalar_value(ml));
        weighted_terms.push(ml);
    }

    if cfg.enabled.oppo {
        let mut terms = Vec::with_capacity(outs.len());
        for out in outs {
            terms.push(opposite_loss(
                tape,
                out.a_rgb,
                out.a_flow,
                out.a_fused,
                out.tcam,
            )?);
        }
        let oppo = mean_of(tape, &terms)?;
        breakdown.oppo = Some(tape.scalar_value(oppo));
        weighted_terms.push(tape.affine(oppo, cfg.lambda_oppo, 0.0));
    }

    if cfg.enabled.norm {
        let mut terms = Vec::with_capacity(outs.len());
        for out in outs {
            terms.push(norm_loss(tape, out.a_rgb, out.a_flow, out.a_fused)?);
        }
        let norm = mean_of(tape, &terms)?;
        breakdown.norm = Some(tape.scalar_value(norm));
        weighted_terms.push(tape.affine(norm, cfg.lambda_norm, 0.0));
    }

    let total = if weighted_terms.is_empty() {
        tape.scalar(0.0)
    } else {
        let mut acc = weighted_terms[0];
        for &v in &weighted_terms[1..] {
            acc = tape.add(acc, v)?;
        }
        acc
    };
    breakdown.total = tape.scalar_value(total);
    Ok(BatchLosses {
        total,
        breakdown,
        degenerate_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::Combine;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    /// Plain-f64 reference for the top-k MIL loss, with the top-k mean
    /// computed by exhaustive subset enumeration.
    fn mil_oracle(tcam: &[f64], t: usize, width: usize, y_ext: &[f64], k: usize) -> f64 {
        fn rec(values: &[f64], start: usize, left: usize, sum: f64, best: &mut f64) {
            if left == 0 {
                *best = best.max(sum);
                return;
            }
            for i in start..=values.len() - left {
                rec(values, i + 1, left - 1, sum + values[i], best);
            }
        }
        let mut v = vec![0.0; width];
        for (c, vc) in v.iter_mut().enumerate() {
            let col: Vec<f64> = (0..t).map(|r| tcam[r * width + c]).collect();
            let mut best = f64::NEG_INFINITY;
            rec(&col, 0, k, 0.0, &mut best);
            *vc = best / k as f64;
        }
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let sum: f64 = y_ext.iter().sum();
        -v.iter()
            .zip(y_ext)
            .map(|(&vc, &yc)| (yc / sum) * (vc - lse))
            .sum::<f64>()
    }

    #[test]
    fn mil_hand_case() {
        // T=4, C=1, column0=[4,3,2,1], bg zeros, k=2, labels=[1], bg label 1
        let mut tape = Tape::new();
        let tcam = tape.leaf(t2(4, 2, &[4.0, 0.0, 3.0, 0.0, 2.0, 0.0, 1.0, 0.0]), false);
        let loss = topk_mil_loss(&mut tape, tcam, &[1.0], 1.0, 2).unwrap();
        // v = [3.5, 0], y = [.5, .5]
        let lse: f64 = (3.5f64.exp() + 1.0).ln();
        let want = -(0.5 * (3.5 - lse) + 0.5 * (0.0 - lse));
        assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn mil_top_all_reduces_to_column_mean() {
        let mut tape = Tape::new();
        let values = [0.3, -1.0, 2.0, 0.7, -0.4, 0.1, 1.1, 0.0];
        let tcam = tape.leaf(t2(4, 2, &values), false);
        let loss = topk_mil_loss(&mut tape, tcam, &[1.0], 1.0, 1).unwrap();
        let mean0 = (values[0] + values[2] + values[4] + values[6]) / 4.0;
        let mean1 = (values[1] + values[3] + values[5] + values[7]) / 4.0;
        let lse: f64 = (mean0.exp() + mean1.exp()).ln();
        let want = -(0.5 * (mean0 - lse) + 0.5 * (mean1 - lse));
        assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn mil_is_permutation_invariant_along_t() {
        let mut rng = Rng::seed(3);
        for _ in 0..20 {
            let t = rng.range_usize(2, 7);
            let c = rng.range_usize(1, 3);
            let values: Vec<f64> = (0..t * (c + 1)).map(|_| rng.range(-2.0, 2.0)).collect();
            let labels: Vec<f64> = (0..c)
                .map(|_| if rng.chance(0.6) { 1.0 } else { 0.0 })
                .collect();
            let mut rows: Vec<usize> = (0..t).collect();
            for i in (1..t).rev() {
                let j = rng.below(i + 1);
                rows.swap(i, j);
            }
            let mut shuffled = vec![0.0; values.len()];
            for (new_r, &old_r) in rows.iter().enumerate() {
                shuffled[new_r * (c + 1)..(new_r + 1) * (c + 1)]
                    .copy_from_slice(&values[old_r * (c + 1)..(old_r + 1) * (c + 1)]);
            }
            let mut tape = Tape::new();
            let a = tape.leaf(t2(t, c + 1, &values), false);
            let b = tape.leaf(t2(t, c + 1, &shuffled), false);
            let la = topk_mil_loss(&mut tape, a, &labels, 1.0, 3).unwrap();
            let lb = topk_mil_loss(&mut tape, b, &labels, 1.0, 3).unwrap();
            assert!((tape.scalar_value(la) - tape.scalar_value(lb)).abs() < 1e-12);
        }
    }

    #[test]
    fn mil_matches_subset_enumeration_oracle() {
        let mut rng = Rng::seed(11);
        for _ in 0..200 {
            let t = rng.range_usize(1, 8);
            let c = rng.range_usize(1, 3);
            let divisor = rng.range_usize(1, 8);
            let k = (t / divisor).max(1);
            let values: Vec<f64> = (0..t * (c + 1)).map(|_| rng.range(-3.0, 3.0)).collect();
            let mut labels: Vec<f64> = (0..c)
                .map(|_| if rng.chance(0.5) { 1.0 } else { 0.0 })
                .collect();
            if labels.iter().all(|&l| l == 0.0) {
                labels[0] = 1.0;
            }
            let mut y_ext = labels.clone();
            y_ext.push(1.0);
            let mut tape = Tape::new();
            let tcam = tape.leaf(t2(t, c + 1, &values), false);
            let loss = topk_mil_loss(&mut tape, tcam, &labels, 1.0, divisor).unwrap();
            let want = mil_oracle(&values, t, c + 1, &y_ext, k);
            assert!(
                (tape.scalar_value(loss) - want).abs() < 1e-9,
                "t={t} c={c} k={k}"
            );
        }
    }

    #[test]
    fn mil_all_zero_extended_label_is_error() {
        let mut tape = Tape::new();
        let tcam = tape.leaf(t2(2, 2, &[0.0; 4]), false);
        assert!(matches!(
            topk_mil_loss(&mut tape, tcam, &[0.0], 0.0, 1),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn mil_org_equals_supp_under_unit_attention() {
        let mut rng = Rng::seed(19);
        let values: Vec<f64> = (0..5 * 3).map(|_| rng.range(-1.0, 1.0)).collect();
        let mut tape = Tape::new();
        let tcam = tape.leaf(t2(5, 3, &values), false);
        let ones = tape.leaf(t1(&[1.0; 5]), false);
        let suppressed = tape
            .combine(tcam, ones, Combine::BroadcastMulColVec)
            .unwrap();
        let a = topk_mil_loss(&mut tape, tcam, &[1.0, 0.0], 1.0, 2).unwrap();
        let b = topk_mil_loss(&mut tape, suppressed, &[1.0, 0.0], 1.0, 2).unwrap();
        assert_eq!(tape.scalar_value(a), tape.scalar_value(b));
    }

    #[test]
    fn ml_zero_when_tracks_coincide() {
        for mode in [DeltaMode::Mse, DeltaMode::Mae, DeltaMode::Kl, DeltaMode::Js] {
            let mut tape = Tape::new();
            let a = tape.leaf(t1(&[0.2, 0.8, 0.5]), false);
            let b = tape.leaf(t1(&[0.2, 0.8, 0.5]), false);
            let loss = mutual_learning_loss(&mut tape, a, b, 0.5, mode).unwrap();
            assert!(
                tape.scalar_value(loss).abs() <= 1e-6,
                "{mode:?}: {}",
                tape.scalar_value(loss)
            );
        }
    }

    #[test]
    fn ml_mse_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[1.0, 0.0]), false);
        let b = tape.leaf(t1(&[0.0, 0.0]), false);
        let loss = mutual_learning_loss(&mut tape, a, b, 0.5, DeltaMode::Mse).unwrap();
        assert!((tape.scalar_value(loss) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ml_rejects_out_of_range_tracks() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[1.2, 0.0]), false);
        let b = tape.leaf(t1(&[0.0, 0.0]), false);
        assert!(matches!(
            mutual_learning_loss(&mut tape, a, b, 0.5, DeltaMode::Mse),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn ml_stop_gradient_freezes_target_branch() {
        // alpha = 1 keeps only delta(a_rgb, stopgrad(a_flow)); the target
        // operand must receive exactly zero gradient
        for mode in [DeltaMode::Mse, DeltaMode::Mae, DeltaMode::Kl, DeltaMode::Js] {
            let mut tape = Tape::new();
            let a = tape.leaf(t1(&[0.3, 0.6, 0.9]), true);
            let b = tape.leaf(t1(&[0.1, 0.5, 0.7]), true);
            let loss = mutual_learning_loss(&mut tape, a, b, 1.0, mode).unwrap();
            tape.backward(loss).unwrap();
            assert!(
                tape.grad(b).iter().all(|&g| g == 0.0),
                "{mode:?}: {:?}",
                tape.grad(b)
            );
            assert!(tape.grad(a).iter().any(|&g| g != 0.0), "{mode:?}");
        }
    }

    #[test]
    fn oppo_zero_when_tracks_complement_background() {
        let mut tape = Tape::new();
        let tcam = tape.leaf(t2(2, 3, &[0.5, -0.2, 0.9, -1.0, 0.3, 0.0]), false);
        let probs = tape.softmax_rows(tcam).unwrap();
        let bg = tape.column(probs, 2).unwrap();
        let track = tape.affine(bg, -1.0, 1.0); // 1 - s
        let loss = opposite_loss(&mut tape, track, track, track, tcam).unwrap();
        assert!(tape.scalar_value(loss).abs() < 1e-15);
    }

    #[test]
    fn oppo_is_one_when_tracks_and_background_saturate() {
        let mut tape = Tape::new();
        // background logit dominates: s is exactly 1 in f64
        let tcam = tape.leaf(t2(2, 2, &[0.0, 1000.0, 0.0, 1000.0]), false);
        let ones = tape.leaf(t1(&[1.0, 1.0]), false);
        let loss = opposite_loss(&mut tape, ones, ones, ones, tcam).unwrap();
        assert!((tape.scalar_value(loss) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn oppo_matches_direct_formula_on_random_cases() {
        let mut rng = Rng::seed(29);
        for _ in 0..50 {
            let t = rng.range_usize(1, 6);
            let c = rng.range_usize(1, 4);
            let logits: Vec<f64> = (0..t * (c + 1)).map(|_| rng.range(-2.0, 2.0)).collect();
            let tracks: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..t).map(|_| rng.uniform()).collect())
                .collect();
            let mut tape = Tape::new();
            let tc = tape.leaf(t2(t, c + 1, &logits), false);
            let tr: Vec<Var> = tracks.iter().map(|v| tape.leaf(t1(v), false)).collect();
            let loss = opposite_loss(&mut tape, tr[0], tr[1], tr[2], tc).unwrap();

            let mut want = 0.0;
            for track in &tracks {
                let mut acc = 0.0;
                for row in 0..t {
                    let xs = &logits[row * (c + 1)..(row + 1) * (c + 1)];
                    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
                    let s = (xs[c] - m).exp() / z;
                    acc += (track[row] + s - 1.0).abs();
                }
                want += acc / t as f64;
            }
            want /= 3.0;
            assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_loss_bounds_and_hand_case() {
        let mut tape = Tape::new();
        let zero = tape.leaf(t1(&[0.0, 0.0]), false);
        let loss = norm_loss(&mut tape, zero, zero, zero).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);

        let one = tape.leaf(t1(&[1.0, 1.0]), false);
        let loss = norm_loss(&mut tape, one, one, one).unwrap();
        assert_eq!(tape.scalar_value(loss), 1.0);

        let a = tape.leaf(t1(&[1.0, 0.0]), false);
        let b = tape.leaf(t1(&[0.0, 0.0]), false);
        let f = tape.leaf(t1(&[0.5, 0.0]), false);
        let loss = norm_loss(&mut tape, a, b, f).unwrap();
        assert!((tape.scalar_value(loss) - 0.25).abs() < 1e-15);
    }

    /// Direct (non-tape) transcription of the co-activity pair loss.
    #[allow(clippy::too_many_arguments)]
    fn cas_oracle(
        fused_m: &[f64],
        supp_m: &[f64],
        fused_n: &[f64],
        supp_n: &[f64],
        t: usize,
        f: usize,
        width: usize,
        class: usize,
        margin: f64,
    ) -> f64 {
        let softmax = |xs: &[f64]| {
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let es: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = es.iter().sum();
            es.into_iter().map(|e| e / z).collect::<Vec<f64>>()
        };
        let agg = |fused: &[f64], w: &[f64]| {
            let mut out = vec![0.0; f];
            for row in 0..t {
                for j in 0..f {
                    out[j] += w[row] * fused[row * f + j];
                }
            }
            out
        };
        let cosd = |u: &[f64], v: &[f64]| {
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu < 1e-12 || nv < 1e-12 {
                return 0.5;
            }
            let c: f64 = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
            0.5 * (1.0 - c / (nu * nv))
        };
        let col = |supp: &[f64]| {
            (0..t)
                .map(|r| supp[r * width + class])
                .collect::<Vec<f64>>()
        };
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<f64>>();
        let cm = col(supp_m);
        let cn = col(supp_n);
        let hm = agg(fused_m, &softmax(&cm));
        let lm = agg(fused_m, &softmax(&neg(&cm)));
        let hn = agg(fused_n, &softmax(&cn));
        let ln_ = agg(fused_n, &softmax(&neg(&cn)));
        let d_hh = cosd(&hm, &hn);
        let d_hl = cosd(&hm, &ln_);
        let d_lh = cosd(&lm, &hn);
        0.5 * ((d_hh - d_hl + margin).max(0.0) + (d_hh - d_lh + margin).max(0.0))
    }

    #[test]
    fn cas_identical_videos_with_separated_aggregates_cost_nothing() {
        // sharply peaked attention: high aggregate is row 0, low is row 2;
        // rows are orthogonal so d(H, L) = 0.5 >= margin and the hinge is off
        let fused = t2(3, 2, &[1.0, 0.0, 0.3, 0.3, 0.0, 1.0]);
        let supp = t2(3, 2, &[30.0, 0.0, 0.0, 0.0, -30.0, 0.0]);
        let mut tape = Tape::new();
        let fm = tape.leaf(fused, false);
        let sm = tape.leaf(supp, false);
        let view = CasView {
            fused: fm,
            tcam_supp: sm,
        };
        let (loss, degenerate) =
            coactivity_loss(&mut tape, &[view, view], &[(0, 1, 0)], 0.5).unwrap();
        assert_eq!(degenerate, 0);
        assert!(
            tape.scalar_value(loss).abs() < 1e-9,
            "{}",
            tape.scalar_value(loss)
        );
    }

    #[test]
    fn cas_empty_pair_list_is_zero() {
        let mut tape = Tape::new();
        let (loss, degenerate) = coactivity_loss(&mut tape, &[], &[], 0.5).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
        assert_eq!(degenerate, 0);
    }

    #[test]
    fn cas_matches_direct_transcription_oracle() {
        let mut rng = Rng::seed(31);
        for _ in 0..50 {
            let (t, f, width) = (3, 2, 3);
            let class = rng.below(width);
            let mk = |rng: &mut Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.range(-1.5, 1.5)).collect()
            };
            let fused_m = mk(&mut rng, t * f);
            let fused_n = mk(&mut rng, t * f);
            let supp_m = mk(&mut rng, t * width);
            let supp_n = mk(&mut rng, t * width);
            let mut tape = Tape::new();
            let views = [
                CasView {
                    fused: tape.leaf(t2(t, f, &fused_m), false),
                    tcam_supp: tape.leaf(t2(t, width, &supp_m), false),
                },
                CasView {
                    fused: tape.leaf(t2(t, f, &fused_n), false),
                    tcam_supp: tape.leaf(t2(t, width, &supp_n), false),
                },
            ];
            let (loss, _) = coactivity_loss(&mut tape, &views, &[(0, 1, class)], 0.5).unwrap();
            let want = cas_oracle(
                &fused_m, &supp_m, &fused_n, &supp_n, t, f, width, class, 0.5,
            );
            assert!(
                (tape.scalar_value(loss) - want).abs() < 1e-9,
                "got {} want {want}",
                tape.scalar_value(loss)
            );
        }
    }

    #[test]
    fn total_loss_is_linear_in_lambdas() {
        use crate::data::FeatureSequence;
        use crate::model::{Model, ModelConfig};

        let mut rng = Rng::seed(41);
        let model = Model::init(
            ModelConfig {
                dropout: 0.0,
                ..ModelConfig::with_hidden(4, 2, 5)
            },
            &mut rng,
        )
        .unwrap();
        let mk_seq = |rng: &mut Rng| {
            let values = (0..6 * 4).map(|_| rng.range(-1.0, 1.0)).collect();
            FeatureSequence::new(6, 4, values).unwrap()
        };
        let rgb_a = mk_seq(&mut rng);
        let flow_a = mk_seq(&mut rng);
        let rgb_b = mk_seq(&mut rng);
        let flow_b = mk_seq(&mut rng);
        let labels = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let pairs = vec![(0usize, 1usize, 0usize)];

        let run = |lambda_oppo: f64, lambda_norm: f64| -> LossBreakdown {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut rng = Rng::seed(1);
            let outs = vec![
                bound
                    .forward(&mut tape, &rgb_a, &flow_a, false, &mut rng)
                    .unwrap(),
                bound
                    .forward(&mut tape, &rgb_b, &flow_b, false, &mut rng)
                    .unwrap(),
            ];
            let cfg = LossConfig {
                lambda_oppo,
                lambda_norm,
                ..LossConfig::default()
            };
            total_loss(&mut tape, &outs, &labels, &pairs, &cfg)
                .unwrap()
                .breakdown
        };

        let base = run(0.0, 0.0);
        let bumped = run(0.8, 0.0);
        let oppo = base.oppo.unwrap();
        assert!(
            ((bumped.total - base.total) / 0.8 - oppo).abs() < 1e-9,
            "slope {} vs oppo {oppo}",
            (bumped.total - base.total) / 0.8
        );
        let bumped_norm = run(0.0, 0.8);
        let norm = base.norm.unwrap();
        assert!(((bumped_norm.total - base.total) / 0.8 - norm).abs() < 1e-9);
    }

    #[test]
    fn total_loss_reports_disabled_terms_as_absent() {
        use crate::data::FeatureSequence;
        use crate::model::{Model, ModelConfig};

        let mut rng = Rng::seed(43);
        let model = Model::init(
            ModelConfig {
                dropout: 0.0,
                ..ModelConfig::with_hidden(3, 2, 4)
            },
            &mut rng,
        )
        .unwrap();
        let values: Vec<f64> = (0..5 * 3).map(|_| rng.range(-1.0, 1.0)).collect();
        let rgb = FeatureSequence::new(5, 3, values.clone()).unwrap();
        let flow = FeatureSequence::new(5, 3, values).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let outs = vec![bound
            .forward(&mut tape, &rgb, &flow, false, &mut rng)
            .unwrap()];
        let cfg = LossConfig {
            enabled: EnabledLosses::mil_only(),
            ..LossConfig::default()
        };
        let result = total_loss(&mut tape, &outs, &[vec![1.0, 0.0]], &[], &cfg).unwrap();
        assert!(result.breakdown.ml.is_none());
        assert!(result.breakdown.cas.is_none());
        assert!(result.breakdown.oppo.is_none());
        assert!(result.breakdown.norm.is_none());
        let b = &result.breakdown;
        assert!((b.total - (b.mil_org.unwrap() + b.mil_supp.unwrap())).abs() < 1e-12);
        let line = serde_json::to_string(b).unwrap();
        assert!(!line.contains("\"ml\""));
    }
}
