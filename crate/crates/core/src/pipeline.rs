//! Seeded train/eval pipelines driven by one run configuration.
//!
//! Training samples fixed-size snippet batches with a quota of same-class
//! video pairs, assembles the enabled objective terms on one tape, and takes
//! Adam steps, logging one JSON line per step. Evaluation runs full-length
//! eval-mode forwards over the test split in video-id order, localizes each
//! video and writes the mAP report. Everything is a pure function of the
//! seed and the config, so reruns reproduce artifacts byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_manifest, load_videos, sample_training_snippets, DatasetManifest, Split, VideoRecord,
};
use crate::error::{Error, Result};
use crate::eval::{default_thresholds, map_report, Detection, EvalReport, GroundTruth, Segment};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::hash::fnv1a_hex;
use crate::localize::{localize_video, LocalizeConfig, Proposal};
use crate::losses::{total_loss, total_loss_frozen_ml, DeltaMode, LossBreakdown, LossConfig};
use crate::model::{ForwardVars, Model, ModelConfig};
use crate::optim::{adam_step, AdamConfig};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::ParamSet;

const SNIPPET_FRAMES: f64 = 16.0;
const BATCH_RESAMPLE_ATTEMPTS: usize = 1000;

fn default_lr() -> f64 {
    5e-5
}

fn default_weight_decay() -> f64 {
    1e-3
}

fn default_batch_videos() -> usize {
    10
}

fn default_pairs_per_batch() -> usize {
    3
}

fn default_snippets_per_video() -> usize {
    500
}

fn default_checkpoint_every() -> u64 {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_videos")]
    pub batch_videos: usize,
    #[serde(default = "default_pairs_per_batch")]
    pub pairs_per_batch: usize,
    #[serde(default = "default_snippets_per_video")]
    pub snippets_per_video: usize,
    #[serde(default)]
    pub max_steps: u64,
    /// Master seed; mandatory so every run is reproducible.
    pub seed: u64,
    /// Checkpoint every N steps on top of the final one; 0 disables.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub localize: LocalizeConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.localize.validate()?;
        if self.train.batch_videos == 0 || self.train.snippets_per_video == 0 {
            return Err(Error::Config(
                "batch_videos and snippets_per_video must be positive".into(),
            ));
        }
        if self.train.pairs_per_batch * 2 > self.train.batch_videos {
            return Err(Error::Config(format!(
                "{} disjoint pairs do not fit in a batch of {}",
                self.train.pairs_per_batch, self.train.batch_videos
            )));
        }
        if self.train.lr < 0.0 || self.train.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning rate and weight decay must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Merges manifest dimensions into the model config. Explicit non-zero
/// values must agree with the manifest.
pub fn resolve_model_config(
    model: &ModelConfig,
    manifest: &DatasetManifest,
) -> Result<ModelConfig> {
    let mut resolved = model.clone();
    let (d, c) = (manifest.feature_dim, manifest.num_classes());
    if resolved.feature_dim == 0 {
        resolved.feature_dim = d;
    } else if resolved.feature_dim != d {
        return Err(Error::Compat(format!(
            "config feature_dim {} != manifest feature_dim {d}",
            resolved.feature_dim
        )));
    }
    if resolved.num_classes == 0 {
        resolved.num_classes = c;
    } else if resolved.num_classes != c {
        return Err(Error::Compat(format!(
            "config num_classes {} != manifest classes {c}",
            resolved.num_classes
        )));
    }
    resolved.validate()?;
    Ok(resolved)
}

/// Stable fingerprint of the behavioral parts of a run config (paths are
/// excluded). The model config must already be resolved.
pub fn config_hash(
    model: &ModelConfig,
    loss: &LossConfig,
    localize: &LocalizeConfig,
    train: &TrainConfig,
) -> String {
    #[derive(Serialize)]
    struct Hashed<'a> {
        model: &'a ModelConfig,
        loss: &'a LossConfig,
        localize: &'a LocalizeConfig,
        train: &'a TrainConfig,
    }
    let text = serde_json::to_string(&Hashed {
        model,
        loss,
        localize,
        train,
    })
    .expect("config serializes");
    fnv1a_hex(text.as_bytes())
}

/// Sidecar metadata written next to every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub steps: u64,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".meta.json");
    checkpoint.with_file_name(name)
}

/// One line of the training log.
#[derive(Debug, Serialize, Deserialize)]
pub struct LossLogLine {
    pub step: u64,
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub config_hash: String,
    /// Total loss of the final step, absent for zero-step runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_total: Option<f64>,
    pub degenerate_pairs: usize,
}

/// Chosen record indices plus (i, j, shared class) pairs local to the batch.
type SampledBatch = (Vec<usize>, Vec<(usize, usize, usize)>);

/// Draws a batch of video indices and mines the same-class pair quota.
/// Batches that cannot fill the quota are resampled (bounded attempts).
fn sample_batch(
    rng: &mut Rng,
    records: &[VideoRecord],
    batch_videos: usize,
    pairs_wanted: usize,
) -> Result<SampledBatch> {
    for _ in 0..BATCH_RESAMPLE_ATTEMPTS {
        let chosen: Vec<usize> = if records.len() >= batch_videos {
            // partial Fisher-Yates over a fresh index vector
            let mut indices: Vec<usize> = (0..records.len()).collect();
            for i in 0..batch_videos {
                let j = i + rng.below(indices.len() - i);
                indices.swap(i, j);
            }
            indices.truncate(batch_videos);
            indices
        } else {
            (0..batch_videos)
                .map(|_| rng.below(records.len()))
                .collect()
        };

        let mut used = vec![false; chosen.len()];
        let mut pairs = Vec::with_capacity(pairs_wanted);
        'outer: for i in 0..chosen.len() {
            if used[i] {
                continue;
            }
            for j in i + 1..chosen.len() {
                if used[j] {
                    continue;
                }
                if let Some(class) = records[chosen[i]].shares_class_with(&records[chosen[j]]) {
                    used[i] = true;
                    used[j] = true;
                    pairs.push((i, j, class));
                    if pairs.len() == pairs_wanted {
                        break 'outer;
                    }
                    continue 'outer;
                }
            }
        }
        if pairs.len() == pairs_wanted {
            return Ok((chosen, pairs));
        }
    }
    Err(Error::Config(format!(
        "could not assemble {pairs_wanted} same-class pairs from batches of {batch_videos} \
         after {BATCH_RESAMPLE_ATTEMPTS} attempts; dataset labels are too sparse"
    )))
}

/// Seeded training loop: sample, forward, total loss, backward, Adam.
/// Writes the per-step loss log, periodic checkpoints, the final checkpoint
/// and its metadata sidecar.
pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.paths.manifest)?;
    if manifest.split != Split::Train {
        return Err(Error::Config(format!(
            "training needs a train-split manifest, got {:?}",
            manifest.split
        )));
    }
    let records = load_videos(&manifest)?;
    if records.is_empty() {
        return Err(Error::Config("manifest lists no videos".into()));
    }
    let model_cfg = resolve_model_config(&cfg.model, &manifest)?;
    let hash = config_hash(&model_cfg, &cfg.loss, &cfg.localize, &cfg.train);

    let mut rng = Rng::seed(cfg.train.seed);
    let mut model = Model::init(model_cfg, &mut rng)?;

    fs::create_dir_all(&cfg.paths.report_dir).map_err(|e| Error::io(&cfg.paths.report_dir, e))?;
    if let Some(parent) = cfg.paths.checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let loss_log_path = cfg.paths.report_dir.join("loss_log.jsonl");
    let mut log = fs::File::create(&loss_log_path).map_err(|e| Error::io(&loss_log_path, e))?;

    let c = model.cfg.num_classes;
    let mut final_total = None;
    let mut degenerate_pairs = 0;
    for step in 1..=cfg.train.max_steps {
        let (chosen, pairs) = sample_batch(
            &mut rng,
            &records,
            cfg.train.batch_videos,
            cfg.train.pairs_per_batch,
        )?;
        let sampled: Vec<VideoRecord> = chosen
            .iter()
            .map(|&i| sample_training_snippets(&records[i], cfg.train.snippets_per_video, &mut rng))
            .collect();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut outs: Vec<ForwardVars> = Vec::with_capacity(sampled.len());
        let mut labels: Vec<Vec<f64>> = Vec::with_capacity(sampled.len());
        for record in &sampled {
            outs.push(bound.forward(&mut tape, &record.rgb, &record.flow, true, &mut rng)?);
            labels.push(record.label_vector(c));
        }
        let losses = total_loss(&mut tape, &outs, &labels, &pairs, &cfg.loss)?;
        if !losses.breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: serde_json::to_string(&losses.breakdown).unwrap_or_default(),
            });
        }
        degenerate_pairs += losses.degenerate_pairs;

        tape.backward(losses.total)?;
        tape.grads_into_params(&mut model.params);
        adam_step(
            &mut model.params,
            &AdamConfig::new(cfg.train.lr, cfg.train.weight_decay),
        )?;

        let line = LossLogLine {
            step,
            breakdown: losses.breakdown,
        };
        let text = serde_json::to_string(&line).expect("loss line serializes");
        writeln!(log, "{text}").map_err(|e| Error::io(&loss_log_path, e))?;
        final_total = Some(line.breakdown.total);

        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            model.save_checkpoint(&cfg.paths.checkpoint)?;
        }
    }

    model.save_checkpoint(&cfg.paths.checkpoint)?;
    let meta = RunMeta {
        config_hash: hash.clone(),
        seed: cfg.train.seed,
        steps: cfg.train.max_steps,
    };
    let meta_file = meta_path(&cfg.paths.checkpoint);
    fs::write(
        &meta_file,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| Error::io(&meta_file, e))?;

    Ok(TrainSummary {
        steps: cfg.train.max_steps,
        checkpoint: cfg.paths.checkpoint.clone(),
        loss_log: loss_log_path,
        config_hash: hash,
        final_total,
        degenerate_pairs,
    })
}

/// Proposal record as dumped to JSON, in snippet units plus optional seconds
/// (snippet * 16 / fps).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalDump {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub class_name: String,
    pub confidence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_start_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end_seconds: Option<f64>,
}

fn dump_proposal(
    p: &Proposal,
    video_id: &str,
    class_names: &[String],
    fps: Option<f64>,
) -> ProposalDump {
    let to_seconds = |snippet: f64| fps.map(|f| snippet * SNIPPET_FRAMES / f);
    ProposalDump {
        video_id: video_id.to_string(),
        t_start: p.start,
        t_end: p.end,
        class_name: class_names[p.class].clone(),
        confidence: p.confidence,
        t_start_seconds: to_seconds(p.start),
        t_end_seconds: to_seconds(p.end),
    }
}

/// Checks the checkpoint's metadata sidecar against this run's hash.
fn check_meta(checkpoint: &Path, hash: &str) -> Result<()> {
    let meta_file = meta_path(checkpoint);
    if !meta_file.is_file() {
        return Ok(());
    }
    let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
    let meta: RunMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: meta_file.clone(),
        detail: e.to_string(),
    })?;
    if meta.config_hash != hash {
        return Err(Error::Compat(format!(
            "checkpoint was trained under config {} but this run hashes to {hash}; \
             refusing to mix artifacts",
            meta.config_hash
        )));
    }
    Ok(())
}

/// Loads the checkpoint and localizes every test video (sorted by id),
/// producing the mAP report plus proposal and CSV dumps in the report dir.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.paths.manifest)?;
    if manifest.split != Split::Test {
        return Err(Error::Config(format!(
            "evaluation needs a test-split manifest, got {:?}",
            manifest.split
        )));
    }
    let model_cfg = resolve_model_config(&cfg.model, &manifest)?;
    let hash = config_hash(&model_cfg, &cfg.loss, &cfg.localize, &cfg.train);
    check_meta(checkpoint, &hash)?;

    let mut rng = Rng::seed(cfg.train.seed);
    let mut model = Model::init(model_cfg, &mut rng)?;
    model.load_checkpoint(checkpoint)?;

    let mut records = load_videos(&manifest)?;
    records.sort_by(|a, b| a.id.cmp(&b.id));

    let mut detections: Vec<(usize, Detection)> = Vec::new();
    let mut ground_truth: Vec<(usize, GroundTruth)> = Vec::new();
    let mut proposal_dump: Vec<ProposalDump> = Vec::new();
    for (video_idx, record) in records.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = bound.forward(&mut tape, &record.rgb, &record.flow, false, &mut rng)?;
        let snapshot = out.snapshot(&tape);
        let proposals = localize_video(
            &snapshot.a_fused,
            &snapshot.tcam_supp,
            &cfg.localize,
            cfg.loss.topk_divisor,
        )?;
        for p in &proposals {
            detections.push((
                p.class,
                Detection {
                    video: video_idx,
                    segment: Segment::new(p.start, p.end)?,
                    confidence: p.confidence,
                },
            ));
            proposal_dump.push(dump_proposal(p, &record.id, &manifest.class_names, None));
        }
        for gt in &record.gt_segments {
            ground_truth.push((
                gt.class,
                GroundTruth {
                    video: video_idx,
                    segment: Segment::new(gt.start, gt.end)?,
                },
            ));
        }
    }

    let mut report = map_report(
        &detections,
        &ground_truth,
        &manifest.class_names,
        &default_thresholds(),
    )?;
    report.seed = cfg.train.seed;
    report.config_hash = hash;

    fs::create_dir_all(&cfg.paths.report_dir).map_err(|e| Error::io(&cfg.paths.report_dir, e))?;
    let report_path = cfg.paths.report_dir.join("report.json");
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| Error::io(&report_path, e))?;
    let csv_path = cfg.paths.report_dir.join("map_table.csv");
    fs::write(&csv_path, report.map_table_csv()).map_err(|e| Error::io(&csv_path, e))?;
    let proposals_path = cfg.paths.report_dir.join("proposals.json");
    fs::write(
        &proposals_path,
        serde_json::to_string_pretty(&proposal_dump).expect("proposals serialize"),
    )
    .map_err(|e| Error::io(&proposals_path, e))?;

    Ok(report)
}

/// Attention tracks and proposals of a single video, for figure dumps.
#[derive(Debug, Clone, Serialize)]
pub struct LocalizeDump {
    pub video_id: String,
    pub config_hash: String,
    pub a_rgb: Vec<f64>,
    pub a_flow: Vec<f64>,
    pub a_fused: Vec<f64>,
    pub proposals: Vec<ProposalDump>,
}

pub fn localize_dump(
    cfg: &RunConfig,
    checkpoint: &Path,
    video_id: &str,
    fps: Option<f64>,
) -> Result<LocalizeDump> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.paths.manifest)?;
    let model_cfg = resolve_model_config(&cfg.model, &manifest)?;
    let hash = config_hash(&model_cfg, &cfg.loss, &cfg.localize, &cfg.train);
    check_meta(checkpoint, &hash)?;

    let index = manifest
        .videos
        .iter()
        .position(|v| v.id == video_id)
        .ok_or_else(|| Error::Manifest {
            record: video_id.to_string(),
            detail: "video id not found in manifest".into(),
        })?;
    let record = crate::data::load_video(&manifest, index)?;

    let mut rng = Rng::seed(cfg.train.seed);
    let mut model = Model::init(model_cfg, &mut rng)?;
    model.load_checkpoint(checkpoint)?;

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = bound.forward(&mut tape, &record.rgb, &record.flow, false, &mut rng)?;
    let snapshot = out.snapshot(&tape);
    let proposals = localize_video(
        &snapshot.a_fused,
        &snapshot.tcam_supp,
        &cfg.localize,
        cfg.loss.topk_divisor,
    )?;

    Ok(LocalizeDump {
        video_id: video_id.to_string(),
        config_hash: hash,
        a_rgb: snapshot.a_rgb,
        a_flow: snapshot.a_flow,
        a_fused: snapshot.a_fused,
        proposals: proposals
            .iter()
            .map(|p| dump_proposal(p, &record.id, &manifest.class_names, fps))
            .collect(),
    })
}

/// Settings of the whole-model gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckSettings {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub snippets: usize,
    pub batch: usize,
    pub pairs: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub h: f64,
    /// Target tolerance; disagreements above it trigger step refinement.
    pub tol: f64,
    pub seed: u64,
    pub delta: DeltaMode,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            feature_dim: 16,
            num_classes: 3,
            snippets: 20,
            batch: 4,
            pairs: 1,
            hidden: 8,
            dropout: 0.7,
            h: 1e-3,
            tol: 1e-4,
            seed: 7,
            delta: DeltaMode::Mse,
        }
    }
}

/// Finite-difference check of every model parameter through the full
/// training objective on a random batch. Dropout stays active but is driven
/// by a fixed seed inside the loss closure, so the function is smooth and
/// deterministic in the parameters.
pub fn gradcheck_model(settings: &GradcheckSettings) -> Result<GradCheckReport> {
    let cfg = LossConfig {
        delta: settings.delta,
        ..LossConfig::default()
    };
    gradcheck_model_with_losses(settings, &cfg)
}

/// [`gradcheck_model`] with full control over the loss toggles.
pub fn gradcheck_model_with_losses(
    settings: &GradcheckSettings,
    loss_cfg: &LossConfig,
) -> Result<GradCheckReport> {
    let mut rng = Rng::seed(settings.seed);
    let model_cfg = ModelConfig {
        dropout: settings.dropout,
        ..ModelConfig::with_hidden(settings.feature_dim, settings.num_classes, settings.hidden)
    };
    let mut model = Model::init(model_cfg, &mut rng)?;
    // Jitter every parameter so the model sits in general position. Freshly
    // initialized biases are exactly zero, and under dropout a conv window
    // can be entirely zeros, which parks relu pre-activations exactly on
    // their kink where no two-sided derivative exists.
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.get_mut(id).value_mut().values_mut() {
            *v += rng.range(-0.05, 0.05);
        }
    }

    // batch with a same-class pair at the front
    let mut batch: Vec<(
        crate::data::FeatureSequence,
        crate::data::FeatureSequence,
        Vec<f64>,
    )> = Vec::with_capacity(settings.batch);
    for i in 0..settings.batch {
        let mk = |rng: &mut Rng| {
            let values = (0..settings.snippets * settings.feature_dim)
                .map(|_| rng.normal())
                .collect();
            crate::data::FeatureSequence::new(settings.snippets, settings.feature_dim, values)
                .expect("finite")
        };
        let rgb = mk(&mut rng);
        let flow = mk(&mut rng);
        let class = if i < 2 * settings.pairs {
            (i / 2) % settings.num_classes
        } else {
            i % settings.num_classes
        };
        let mut y = vec![0.0; settings.num_classes];
        y[class] = 1.0;
        batch.push((rgb, flow, y));
    }
    let pairs: Vec<(usize, usize, usize)> = (0..settings.pairs)
        .map(|p| (2 * p, 2 * p + 1, p % settings.num_classes))
        .collect();
    let loss_cfg = loss_cfg.clone();
    let dropout_seed = rng.next_u64();

    let forward_batch =
        |tape: &mut Tape, params: &ParamSet| -> Result<(Vec<ForwardVars>, Vec<Vec<f64>>)> {
            let bound = model.bind_with(tape, params);
            let mut drop_rng = Rng::seed(dropout_seed);
            let mut outs = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for (rgb, flow, y) in &batch {
                outs.push(bound.forward(tape, rgb, flow, true, &mut drop_rng)?);
                labels.push(y.clone());
            }
            Ok((outs, labels))
        };

    // Analytic pass: the live objective with its stop-gradients, whose
    // gradients land in the probe set.
    let mut probe = model.params.clone();
    let ml_targets: Vec<(Vec<f64>, Vec<f64>)> = {
        let mut tape = Tape::new();
        let (outs, labels) = forward_batch(&mut tape, &probe)?;
        let targets = outs
            .iter()
            .map(|o| {
                (
                    tape.values(o.a_rgb).to_vec(),
                    tape.values(o.a_flow).to_vec(),
                )
            })
            .collect();
        let losses = total_loss(&mut tape, &outs, &labels, &pairs, &loss_cfg)?;
        tape.backward(losses.total)?;
        tape.grads_into_params(&mut probe);
        targets
    };

    // Numeric passes: same objective with the mutual-learning pseudo-targets
    // pinned at their base-point values, matching the function the tape
    // actually differentiates.
    finite_diff_check(
        &mut probe,
        |params| {
            let mut tape = Tape::new();
            let (outs, labels) = forward_batch(&mut tape, params)?;
            let losses =
                total_loss_frozen_ml(&mut tape, &outs, &labels, &pairs, &loss_cfg, &ml_targets)?;
            Ok(tape.scalar_value(losses.total))
        },
        settings.h,
        settings.tol,
    )
}
