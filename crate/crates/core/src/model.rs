//! The two-stream localization network.
//!
//! Each modality is re-calibrated by a cross-modal channel gate: a global
//! descriptor pooled from the main stream and a local descriptor computed
//! from the auxiliary stream multiply into per-channel logits, and their
//! sigmoid scales the main stream. Two identical gates run with swapped
//! modality roles. Each enhanced stream feeds its own attention head
//! (snippet-level foreground probability); the two enhanced streams are
//! concatenated and classified into a per-snippet score map over C classes
//! plus background, which the fused attention track then suppresses.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CO2W";
pub const CHECKPOINT_VERSION: u32 = 1;

/// How the two modality streams are combined before attention/classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Cross-modal channel gating (the full model).
    #[default]
    Ccm,
    /// Early fusion baseline: both heads see the summed raw streams.
    Add,
    /// Raw streams pass through untouched.
    Concat,
    /// Squeeze-excitation-style self gating: the gate's local descriptor
    /// comes from the main stream itself.
    Se,
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ccm" => Ok(FusionMode::Ccm),
            "add" => Ok(FusionMode::Add),
            "concat" => Ok(FusionMode::Concat),
            "se" => Ok(FusionMode::Se),
            other => Err(Error::Config(format!(
                "unknown fusion mode '{other}' (ccm|add|concat|se)"
            ))),
        }
    }
}

/// Which stream provides the pooled (global) and which the per-snippet
/// (local) descriptor inside the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleMode {
    /// Global descriptor from the pooled main stream, local from the
    /// auxiliary stream.
    #[default]
    GlobalLocal,
    /// Global descriptor from the pooled auxiliary stream, local from the
    /// main stream.
    LocalGlobal,
    /// Both descriptors local, no pooling.
    LocalLocal,
}

impl FromStr for RoleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_local" => Ok(RoleMode::GlobalLocal),
            "local_global" => Ok(RoleMode::LocalGlobal),
            "local_local" => Ok(RoleMode::LocalLocal),
            other => Err(Error::Config(format!(
                "unknown role mode '{other}' (global_local|local_global|local_local)"
            ))),
        }
    }
}

fn default_hidden() -> usize {
    512
}

fn default_kernels() -> Vec<usize> {
    vec![3, 3, 1]
}

fn default_dropout() -> f64 {
    0.7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels per modality; 0 means "take from the dataset manifest".
    #[serde(default)]
    pub feature_dim: usize,
    /// Foreground classes; 0 means "take from the dataset manifest".
    #[serde(default)]
    pub num_classes: usize,
    /// Width of the hidden conv layers in both heads.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_kernels")]
    pub attn_kernels: Vec<usize>,
    #[serde(default = "default_kernels")]
    pub cls_kernels: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default)]
    pub roles: RoleMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 0,
            num_classes: 0,
            hidden: default_hidden(),
            attn_kernels: default_kernels(),
            cls_kernels: default_kernels(),
            dropout: default_dropout(),
            fusion: FusionMode::default(),
            roles: RoleMode::default(),
        }
    }
}

impl ModelConfig {
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            feature_dim,
            num_classes,
            ..ModelConfig::default()
        }
    }

    pub fn with_hidden(feature_dim: usize, num_classes: usize, hidden: usize) -> Self {
        ModelConfig {
            hidden,
            ..ModelConfig::new(feature_dim, num_classes)
        }
    }

    /// Per-layer output widths of the attention head: hidden layers then 1.
    pub fn attn_dims(&self) -> Vec<usize> {
        let n = self.attn_kernels.len();
        (0..n)
            .map(|i| if i + 1 < n { self.hidden } else { 1 })
            .collect()
    }

    /// Per-layer output widths of the classifier: hidden layers then C+1.
    pub fn cls_dims(&self) -> Vec<usize> {
        let n = self.cls_kernels.len();
        (0..n)
            .map(|i| {
                if i + 1 < n {
                    self.hidden
                } else {
                    self.num_classes + 1
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "model needs positive feature_dim and num_classes".into(),
            ));
        }
        if self.hidden == 0 {
            return Err(Error::Config("model hidden width must be positive".into()));
        }
        if self.attn_kernels.is_empty() || self.cls_kernels.is_empty() {
            return Err(Error::Config("kernel lists must not be empty".into()));
        }
        for &k in self.attn_kernels.iter().chain(&self.cls_kernels) {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel sizes must be odd, got {k}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Parameter handles of one cross-modal gate.
#[derive(Debug, Clone)]
struct GateUnit {
    global_w: ParamId,
    global_b: ParamId,
    local_w: ParamId,
    local_b: ParamId,
}

/// Parameter handles of one conv stack (attention head or classifier).
#[derive(Debug, Clone)]
struct ConvStack {
    layers: Vec<(ParamId, ParamId)>,
}

/// The full model: two gates, two attention heads, one classifier.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    gate_rgb: GateUnit,
    gate_flow: GateUnit,
    attn_rgb: ConvStack,
    attn_flow: ConvStack,
    classifier: ConvStack,
}

/// Everything the forward pass produces, as tape vars.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub x_rgb_enh: Var,
    pub x_flow_enh: Var,
    /// Channel gates; absent for the add/concat baselines.
    pub gate_rgb: Option<Var>,
    pub gate_flow: Option<Var>,
    pub a_rgb: Var,
    pub a_flow: Var,
    pub a_fused: Var,
    pub fused: Var,
    pub tcam: Var,
    pub tcam_supp: Var,
}

/// Forward values copied out of the tape for localization and reporting.
#[derive(Debug, Clone)]
pub struct ForwardSnapshot {
    pub a_rgb: Vec<f64>,
    pub a_flow: Vec<f64>,
    pub a_fused: Vec<f64>,
    pub tcam: Tensor,
    pub tcam_supp: Tensor,
}

impl ForwardVars {
    pub fn snapshot(&self, tape: &Tape) -> ForwardSnapshot {
        ForwardSnapshot {
            a_rgb: tape.values(self.a_rgb).to_vec(),
            a_flow: tape.values(self.a_flow).to_vec(),
            a_fused: tape.values(self.a_fused).to_vec(),
            tcam: tape.tensor(self.tcam),
            tcam_supp: tape.tensor(self.tcam_supp),
        }
    }
}

/// Model parameters bound onto one tape; shared by every forward of a step.
pub struct BoundModel<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

fn xavier(rng: &mut Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.range(-a, a)).collect();
    Tensor::new(shape, values).expect("xavier init is finite")
}

impl Model {
    /// Fresh model with uniform Xavier weights and zero biases.
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Model> {
        cfg.validate()?;
        let d = cfg.feature_dim;
        let mut params = ParamSet::new();

        let gate = |params: &mut ParamSet, name: &str, rng: &mut Rng| -> Result<GateUnit> {
            Ok(GateUnit {
                global_w: params.add(
                    &format!("{name}.global.weight"),
                    xavier(rng, vec![1, d, d], d, d),
                )?,
                global_b: params.add(&format!("{name}.global.bias"), Tensor::zeros(vec![d]))?,
                local_w: params.add(
                    &format!("{name}.local.weight"),
                    xavier(rng, vec![1, d, d], d, d),
                )?,
                local_b: params.add(&format!("{name}.local.bias"), Tensor::zeros(vec![d]))?,
            })
        };
        let gate_rgb = gate(&mut params, "gate_rgb", rng)?;
        let gate_flow = gate(&mut params, "gate_flow", rng)?;

        let stack = |params: &mut ParamSet,
                     name: &str,
                     kernels: &[usize],
                     dims: &[usize],
                     input_dim: usize,
                     rng: &mut Rng|
         -> Result<ConvStack> {
            let mut layers = Vec::with_capacity(kernels.len());
            let mut din = input_dim;
            for (i, (&k, &dout)) in kernels.iter().zip(dims).enumerate() {
                let w = params.add(
                    &format!("{name}.conv{i}.weight"),
                    xavier(rng, vec![k, din, dout], k * din, k * dout),
                )?;
                let b = params.add(&format!("{name}.conv{i}.bias"), Tensor::zeros(vec![dout]))?;
                layers.push((w, b));
                din = dout;
            }
            Ok(ConvStack { layers })
        };
        let attn_dims = cfg.attn_dims();
        let attn_rgb = stack(
            &mut params,
            "attn_rgb",
            &cfg.attn_kernels,
            &attn_dims,
            d,
            rng,
        )?;
        let attn_flow = stack(
            &mut params,
            "attn_flow",
            &cfg.attn_kernels,
            &attn_dims,
            d,
            rng,
        )?;
        let cls_dims = cfg.cls_dims();
        let classifier = stack(
            &mut params,
            "classifier",
            &cfg.cls_kernels,
            &cls_dims,
            2 * d,
            rng,
        )?;

        Ok(Model {
            cfg,
            params,
            gate_rgb,
            gate_flow,
            attn_rgb,
            attn_flow,
            classifier,
        })
    }

    /// Binds every parameter onto the tape once.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundModel<'m> {
        self.bind_with(tape, &self.params)
    }

    /// Binds a structurally identical parameter set (same registration
    /// order and shapes) in place of the model's own, so callers can probe
    /// perturbed copies against the same architecture.
    pub fn bind_with<'m>(&'m self, tape: &mut Tape, params: &ParamSet) -> BoundModel<'m> {
        assert_eq!(
            params.len(),
            self.params.len(),
            "parameter set does not match the model"
        );
        let vars = params.ids().map(|id| tape.bind(params, id)).collect();
        BoundModel { model: self, vars }
    }

    pub fn attn_rgb_param_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix("attn_rgb.")
    }

    pub fn attn_flow_param_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix("attn_flow.")
    }

    /// Serializes all parameters. Per-parameter record: name length u32,
    /// name bytes, rank u32, extents u32..., then f64 values, little-endian.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for p in self.params.iter() {
            let name = p.name().as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            let shape = p.value().shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in p.value().values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint saved by [`Model::save_checkpoint`] into this
    /// model. Every record must match an existing parameter's shape; a
    /// feature-dim or class-count mismatch therefore surfaces here.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let decode_err = |offset: usize, detail: String| Error::Decode {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail,
        };
        if bytes.len() < 8 {
            return Err(decode_err(bytes.len(), "file shorter than header".into()));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(decode_err(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(decode_err(4, format!("unsupported version {version}")));
        }
        let mut off = 8;
        let mut loaded = vec![false; self.params.len()];
        let take_u32 = |bytes: &[u8], off: &mut usize| -> Result<u32> {
            if *off + 4 > bytes.len() {
                return Err(decode_err(*off, "truncated u32".into()));
            }
            let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
            *off += 4;
            Ok(v)
        };
        while off < bytes.len() {
            let name_len = take_u32(&bytes, &mut off)? as usize;
            if off + name_len > bytes.len() {
                return Err(decode_err(off, "truncated name".into()));
            }
            let name = std::str::from_utf8(&bytes[off..off + name_len])
                .map_err(|e| decode_err(off, format!("name is not utf-8: {e}")))?
                .to_string();
            off += name_len;
            let rank = take_u32(&bytes, &mut off)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(take_u32(&bytes, &mut off)? as usize);
            }
            let numel: usize = shape.iter().product();
            if off + numel * 8 > bytes.len() {
                return Err(decode_err(off, format!("truncated values for '{name}'")));
            }
            let mut values = Vec::with_capacity(numel);
            for i in 0..numel {
                let start = off + i * 8;
                values.push(f64::from_le_bytes(
                    bytes[start..start + 8].try_into().unwrap(),
                ));
            }
            off += numel * 8;

            let id = self.params.id_by_name(&name).ok_or_else(|| {
                Error::Compat(format!(
                    "checkpoint parameter '{name}' does not exist in this model"
                ))
            })?;
            let param = self.params.get_mut(id);
            if param.value().shape() != shape.as_slice() {
                return Err(Error::Compat(format!(
                    "checkpoint parameter '{name}' has shape {:?}, model expects {:?} \
                     (feature dim or class count mismatch?)",
                    shape,
                    param.value().shape()
                )));
            }
            let tensor = Tensor::new(shape, values).map_err(|e| {
                Error::Compat(format!("checkpoint parameter '{name}' invalid: {e}"))
            })?;
            *param.value_mut() = tensor;
            loaded[id.0] = true;
        }
        if let Some(missing) = loaded.iter().position(|&l| !l) {
            return Err(Error::Compat(format!(
                "checkpoint is missing parameter '{}'",
                self.params.get(ParamId(missing)).name()
            )));
        }
        Ok(())
    }
}

/// Fused attention track: the arithmetic mean of the two heads.
pub fn fuse_attention(tape: &mut Tape, a_rgb: Var, a_flow: Var) -> Result<Var> {
    let sum = tape.add(a_rgb, a_flow)?;
    Ok(tape.affine(sum, 0.5, 0.0))
}

/// Background suppression: scales every class column (background included)
/// by the attention track.
pub fn suppress_tcam(tape: &mut Tape, tcam: Var, a_fused: Var) -> Result<Var> {
    tape.combine(tcam, a_fused, crate::tape::Combine::BroadcastMulColVec)
}

impl<'m> BoundModel<'m> {
    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// One cross-modal gate: produces the sigmoid channel gate and the
    /// enhanced (gated) main stream.
    fn cross_gate(
        &self,
        tape: &mut Tape,
        main: Var,
        aux: Var,
        unit: &GateUnit,
        role: RoleMode,
    ) -> Result<(Var, Var)> {
        let gw = self.var(unit.global_w);
        let gb = self.var(unit.global_b);
        let lw = self.var(unit.local_w);
        let lb = self.var(unit.local_b);
        let t = tape.shape(main)[0];
        let d = tape.shape(main)[1];

        let logits = match role {
            RoleMode::GlobalLocal | RoleMode::LocalGlobal => {
                let pooled_src = if role == RoleMode::GlobalLocal {
                    main
                } else {
                    aux
                };
                let local_src = if role == RoleMode::GlobalLocal {
                    aux
                } else {
                    main
                };
                let pooled = tape.global_avg_pool(pooled_src)?;
                let pooled_row = tape.reshape(pooled, vec![1, d])?;
                let global_desc = tape.temporal_conv(pooled_row, gw, gb)?;
                let global_vec = tape.reshape(global_desc, vec![d])?;
                let local_desc = tape.temporal_conv(local_src, lw, lb)?;
                tape.combine(
                    local_desc,
                    global_vec,
                    crate::tape::Combine::BroadcastMulRowVec,
                )?
            }
            RoleMode::LocalLocal => {
                let main_desc = tape.temporal_conv(main, gw, gb)?;
                let aux_desc = tape.temporal_conv(aux, lw, lb)?;
                tape.mul(main_desc, aux_desc)?
            }
        };
        debug_assert_eq!(tape.shape(logits), &[t, d]);
        let gate = tape.sigmoid(logits);
        let enhanced = tape.mul(gate, main)?;
        Ok((enhanced, gate))
    }

    /// Conv stack with relu+dropout between layers; no activation after the
    /// final layer.
    fn conv_stack(
        &self,
        tape: &mut Tape,
        mut x: Var,
        stack: &ConvStack,
        dropout: f64,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let last = stack.layers.len() - 1;
        for (i, &(w, b)) in stack.layers.iter().enumerate() {
            x = tape.temporal_conv(x, self.var(w), self.var(b))?;
            if i < last {
                x = tape.relu(x);
                x = tape.dropout(x, dropout, train, rng)?;
            }
        }
        Ok(x)
    }

    /// Attention head: conv stack squeezed to a length-T track in [0,1].
    fn attention(
        &self,
        tape: &mut Tape,
        x: Var,
        stack: &ConvStack,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let logits = self.conv_stack(tape, x, stack, self.model.cfg.dropout, train, rng)?;
        let t = tape.shape(logits)[0];
        let squeezed = tape.reshape(logits, vec![t])?;
        Ok(tape.sigmoid(squeezed))
    }

    /// Full forward pass for one video.
    pub fn forward(
        &self,
        tape: &mut Tape,
        rgb: &FeatureSequence,
        flow: &FeatureSequence,
        train: bool,
        rng: &mut Rng,
    ) -> Result<ForwardVars> {
        let cfg = &self.model.cfg;
        if rgb.dim() != cfg.feature_dim || flow.dim() != cfg.feature_dim {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!(
                    "model expects D={}, got rgb D={} flow D={}",
                    cfg.feature_dim,
                    rgb.dim(),
                    flow.dim()
                ),
            });
        }
        if rgb.len() != flow.len() {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("modalities disagree on T: {} vs {}", rgb.len(), flow.len()),
            });
        }
        let x_rgb = tape.leaf(rgb.to_tensor(), false);
        let x_flow = tape.leaf(flow.to_tensor(), false);

        let (x_rgb_enh, x_flow_enh, gate_rgb, gate_flow) = match cfg.fusion {
            FusionMode::Ccm => {
                let (er, gr) =
                    self.cross_gate(tape, x_rgb, x_flow, &self.model.gate_rgb, cfg.roles)?;
                let (ef, gf) =
                    self.cross_gate(tape, x_flow, x_rgb, &self.model.gate_flow, cfg.roles)?;
                (er, ef, Some(gr), Some(gf))
            }
            FusionMode::Se => {
                let (er, gr) =
                    self.cross_gate(tape, x_rgb, x_rgb, &self.model.gate_rgb, cfg.roles)?;
                let (ef, gf) =
                    self.cross_gate(tape, x_flow, x_flow, &self.model.gate_flow, cfg.roles)?;
                (er, ef, Some(gr), Some(gf))
            }
            FusionMode::Concat => (x_rgb, x_flow, None, None),
            FusionMode::Add => {
                let sum = tape.add(x_rgb, x_flow)?;
                (sum, sum, None, None)
            }
        };

        let a_rgb = self.attention(tape, x_rgb_enh, &self.model.attn_rgb, train, rng)?;
        let a_flow = self.attention(tape, x_flow_enh, &self.model.attn_flow, train, rng)?;
        let a_fused = fuse_attention(tape, a_rgb, a_flow)?;

        let fused = tape.concat_cols(x_rgb_enh, x_flow_enh)?;
        let tcam = self.conv_stack(tape, fused, &self.model.classifier, cfg.dropout, train, rng)?;
        let tcam_supp = suppress_tcam(tape, tcam, a_fused)?;

        Ok(ForwardVars {
            x_rgb_enh,
            x_flow_enh,
            gate_rgb,
            gate_flow,
            a_rgb,
            a_flow,
            a_fused,
            fused,
            tcam,
            tcam_supp,
        })
    }
}
