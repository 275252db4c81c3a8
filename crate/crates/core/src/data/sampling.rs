//! Training-time snippet sampling.

use crate::data::VideoRecord;
use crate::rng::Rng;

/// Draws `t_fixed` snippet indices i.i.d. uniformly (with replacement),
/// sorts them ascending, and gathers both modalities with the same indices.
/// Ground-truth segments are dropped from the sampled record because the
/// resampled time axis no longer lines up with them; training never uses gt.
pub fn sample_training_snippets(
    record: &VideoRecord,
    t_fixed: usize,
    rng: &mut Rng,
) -> VideoRecord {
    assert!(t_fixed >= 1, "t_fixed must be at least 1");
    let t = record.snippets();
    let mut indices: Vec<usize> = (0..t_fixed).map(|_| rng.below(t)).collect();
    indices.sort_unstable();
    VideoRecord {
        id: record.id.clone(),
        rgb: record.rgb.gather_rows(&indices),
        flow: record.flow.gather_rows(&indices),
        labels: record.labels.clone(),
        gt_segments: Vec::new(),
    }
}
