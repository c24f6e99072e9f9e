//! Two-stream motion segmentation network.
//!
//! Two consecutive RGB frames pass through ShuffleNet-style encoders
//! (pointwise group convolutions, channel shuffle, depthwise 3x3),
//! optionally sharing one set of weights. The final feature maps are
//! fused by channel concatenation and decoded back to input resolution
//! by three stride-2 transposed convolutions emitting 2-class logits.
//!
//! Parameter names are part of the contract: `enc{A|B}.stem.{op}`,
//! `enc{A|B}.stage{k}.unit{j}.{op}` with k counted from 1 and j from 0,
//! and `dec.{k}.{op}` with k from 0. When encoders are shared the encB
//! names do not exist and both streams read encA's parameters.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::gradcheck::{self, GradCheckReport};
use crate::tensor::tape::{Mode, NodeId, Tape};
use crate::tensor::{fmod, RunningStat, Tensor, TensorError};

/// Retention factor for batch-norm running statistics:
/// `running = BN_MOMENTUM * running + (1 - BN_MOMENTUM) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
/// Variance floor inside batch norm.
pub const BN_EPS: f64 = 1e-5;
/// Tolerance of the whole-model gradient check, looser than the per-op
/// bound because errors compound with depth.
pub const MODEL_GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("weights do not match config: {0}")]
    ConfigMismatch(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One encoder stage: a stride-2 unit followed by `units - 1` stride-1
/// units, all ending at `out_channels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub units: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub groups: usize,
    pub share_encoders: bool,
    /// Output channels of the three decoder blocks; the last is the
    /// class count and must be 2.
    pub decoder_channels: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: the smallest configuration that exercises
    /// grouping, shuffling, both unit strides, fusion and the decoder.
    pub fn desk() -> Self {
        ModelConfig {
            input_height: 64,
            input_width: 96,
            stem_channels: 16,
            stages: vec![
                StageConfig { units: 2, out_channels: 32 },
                StageConfig { units: 2, out_channels: 64 },
            ],
            groups: 2,
            share_encoders: false,
            decoder_channels: [64, 32, 2],
        }
    }

    /// Tiny configuration for whole-model gradient checking.
    pub fn micro() -> Self {
        ModelConfig {
            input_height: 16,
            input_width: 24,
            stem_channels: 2,
            stages: vec![
                StageConfig { units: 2, out_channels: 4 },
                StageConfig { units: 1, out_channels: 8 },
            ],
            groups: 2,
            share_encoders: true,
            decoder_channels: [4, 4, 2],
        }
    }

    /// Channels of each encoder's final feature map.
    pub fn encoder_out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.out_channels)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.input_height == 0 || self.input_width == 0 {
            return fail("input size must be positive".into());
        }
        if self.input_height % 8 != 0 || self.input_width % 8 != 0 {
            return fail(format!(
                "input {}x{} must be divisible by the downsampling factor 8",
                self.input_height, self.input_width
            ));
        }
        if self.groups == 0 {
            return fail("groups must be positive".into());
        }
        if self.stages.len() != 2 {
            return fail(format!(
                "exactly 2 stages required so total downsampling is 8, got {}",
                self.stages.len()
            ));
        }
        if self.stem_channels == 0 || self.stem_channels % self.groups != 0 {
            return fail(format!(
                "stem channels {} must be a positive multiple of groups {}",
                self.stem_channels, self.groups
            ));
        }
        let mut in_ch = self.stem_channels;
        for (k, stage) in self.stages.iter().enumerate() {
            if stage.units == 0 {
                return fail(format!("stage{} has no units", k + 1));
            }
            if stage.out_channels % self.groups != 0 {
                return fail(format!(
                    "stage{} channels {} not divisible by groups {}",
                    k + 1,
                    stage.out_channels,
                    self.groups
                ));
            }
            if stage.out_channels <= in_ch {
                return fail(format!(
                    "stage{} must widen {} -> {}: the stride-2 unit concatenates \
                     its {}-channel shortcut",
                    k + 1,
                    in_ch,
                    stage.out_channels,
                    in_ch
                ));
            }
            if (stage.out_channels - in_ch) % self.groups != 0 {
                return fail(format!(
                    "stage{} conv branch {} not divisible by groups {}",
                    k + 1,
                    stage.out_channels - in_ch,
                    self.groups
                ));
            }
            in_ch = stage.out_channels;
        }
        if self.decoder_channels[2] != 2 {
            return fail(format!(
                "decoder must end in 2 class channels, got {}",
                self.decoder_channels[2]
            ));
        }
        if self.decoder_channels[..2].iter().any(|&c| c == 0) {
            return fail("decoder channels must be positive".into());
        }
        Ok(())
    }

    fn streams(&self) -> &'static [&'static str] {
        if self.share_encoders {
            &["encA"]
        } else {
            &["encA", "encB"]
        }
    }
}

/// Canonical hash binding weights to the config that shaped them.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    format!("{:x}", h.finalize())
}

/// Derived channel counts of one shuffle unit.
#[derive(Debug, Clone, Copy)]
struct UnitDims {
    out_ch: usize,
    /// Conv-branch output channels: `out` for stride 1, `out - in` for
    /// stride 2 (the shortcut contributes the other `in`).
    branch: usize,
    /// Bottleneck width: a quarter of the branch, rounded up to a
    /// multiple of groups, and never below groups.
    mid: usize,
    stride: usize,
}

fn unit_dims(in_ch: usize, out_ch: usize, stride: usize, groups: usize) -> UnitDims {
    let branch = if stride == 2 { out_ch - in_ch } else { out_ch };
    let mid = (branch / 4).div_ceil(groups).max(1) * groups;
    UnitDims { out_ch, branch, mid, stride }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitRule {
    /// Uniform on (-b, b) with b = sqrt(1 / fan_in).
    UniformFanIn { fan_in: usize },
    /// Batch-norm gamma.
    Ones,
    /// Batch-norm beta and conv bias.
    Zeros,
}

/// Name, shape and init rule of one trainable parameter.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitRule,
}

fn bn_specs(specs: &mut Vec<ParamSpec>, prefix: &str, channels: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.gamma"),
        shape: vec![channels],
        init: InitRule::Ones,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.beta"),
        shape: vec![channels],
        init: InitRule::Zeros,
    });
}

fn conv_spec(name: String, shape: Vec<usize>, fan_in: usize) -> ParamSpec {
    ParamSpec { name, shape, init: InitRule::UniformFanIn { fan_in } }
}

/// Every trainable parameter in the order weights are drawn at init.
pub fn parameter_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>, ModelError> {
    cfg.validate()?;
    let g = cfg.groups;
    let mut specs = Vec::new();
    for stream in cfg.streams() {
        specs.push(conv_spec(
            format!("{stream}.stem.conv.weight"),
            vec![cfg.stem_channels, 3, 3, 3],
            3 * 9,
        ));
        bn_specs(&mut specs, &format!("{stream}.stem.bn"), cfg.stem_channels);
        let mut in_ch = cfg.stem_channels;
        for (k, stage) in cfg.stages.iter().enumerate() {
            for j in 0..stage.units {
                let d = unit_dims(in_ch, stage.out_channels, if j == 0 { 2 } else { 1 }, g);
                let p = format!("{stream}.stage{}.unit{j}", k + 1);
                specs.push(conv_spec(
                    format!("{p}.pw1.weight"),
                    vec![d.mid, in_ch / g, 1, 1],
                    in_ch / g,
                ));
                bn_specs(&mut specs, &format!("{p}.bn1"), d.mid);
                specs.push(conv_spec(format!("{p}.dw.weight"), vec![d.mid, 1, 3, 3], 9));
                bn_specs(&mut specs, &format!("{p}.bn2"), d.mid);
                specs.push(conv_spec(
                    format!("{p}.pw2.weight"),
                    vec![d.branch, d.mid / g, 1, 1],
                    d.mid / g,
                ));
                bn_specs(&mut specs, &format!("{p}.bn3"), d.branch);
                in_ch = d.out_ch;
            }
        }
    }
    let mut in_ch = 2 * cfg.encoder_out_channels();
    for (k, &out) in cfg.decoder_channels.iter().enumerate() {
        specs.push(conv_spec(
            format!("dec.{k}.weight"),
            vec![in_ch, out, 4, 4],
            in_ch * 16,
        ));
        if k < 2 {
            bn_specs(&mut specs, &format!("dec.{k}.bn"), out);
        } else {
            specs.push(ParamSpec {
                name: format!("dec.{k}.bias"),
                shape: vec![out],
                init: InitRule::Zeros,
            });
        }
        in_ch = out;
    }
    Ok(specs)
}

/// Name prefix and channel count of every batch-norm layer, the keys of
/// the running-statistics map.
pub fn batch_norm_prefixes(cfg: &ModelConfig) -> Result<Vec<(String, usize)>, ModelError> {
    let specs = parameter_specs(cfg)?;
    Ok(specs
        .iter()
        .filter_map(|s| {
            s.name
                .strip_suffix(".gamma")
                .map(|prefix| (prefix.to_string(), s.shape[0]))
        })
        .collect())
}

/// Trainable parameters plus batch-norm running statistics, tied to the
/// hash of the config that shaped them.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub config_hash: String,
    pub params: BTreeMap<String, Tensor>,
    pub running: BTreeMap<String, RunningStat>,
}

/// Seeded random initialization: conv weights uniform with fan-in
/// scaling, gamma 1, beta and biases 0, running stats (0, 1).
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights, ModelError> {
    let specs = parameter_specs(cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for spec in &specs {
        let t = match spec.init {
            InitRule::UniformFanIn { fan_in } => {
                Tensor::rand_uniform(&mut rng, &spec.shape, (1.0 / fan_in as f64).sqrt())
            }
            InitRule::Ones => {
                Tensor::from_vec(spec.shape.clone(), vec![1.0; spec.shape.iter().product()])
                    .expect("ones tensor")
            }
            InitRule::Zeros => Tensor::zeros(&spec.shape),
        };
        params.insert(spec.name.clone(), t);
    }
    let running = batch_norm_prefixes(cfg)?
        .into_iter()
        .map(|(prefix, c)| (prefix, RunningStat::new(c)))
        .collect();
    Ok(ModelWeights { config_hash: config_hash(cfg), params, running })
}

impl ModelWeights {
    /// Writes parameters and running statistics to one FMOD file; each
    /// batch-norm layer contributes `.running_mean` and `.running_var`
    /// tensors next to its gamma/beta.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut flat = self.params.clone();
        for (prefix, rs) in &self.running {
            let c = rs.mean.len();
            flat.insert(
                format!("{prefix}.running_mean"),
                Tensor::from_vec(vec![c], rs.mean.clone()).expect("running mean tensor"),
            );
            flat.insert(
                format!("{prefix}.running_var"),
                Tensor::from_vec(vec![c], rs.var.clone()).expect("running var tensor"),
            );
        }
        fmod::save(path, &flat)?;
        Ok(())
    }

    /// Loads weights and validates them structurally against `cfg`:
    /// exactly the expected names, each with the expected shape.
    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let flat = fmod::load(path)?;
        let specs = parameter_specs(cfg)?;
        let prefixes = batch_norm_prefixes(cfg)?;
        let mut expected: BTreeMap<String, Vec<usize>> =
            specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect();
        for (prefix, c) in &prefixes {
            expected.insert(format!("{prefix}.running_mean"), vec![*c]);
            expected.insert(format!("{prefix}.running_var"), vec![*c]);
        }
        for (name, tensor) in &flat {
            match expected.remove(name) {
                None => {
                    return Err(ModelError::ConfigMismatch(format!(
                        "unexpected tensor {name} in {}",
                        path.display()
                    )))
                }
                Some(shape) if shape != tensor.shape() => {
                    return Err(ModelError::ConfigMismatch(format!(
                        "tensor {name} has shape {:?}, config wants {shape:?}",
                        tensor.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(name) = expected.keys().next() {
            return Err(ModelError::ConfigMismatch(format!(
                "missing tensor {name} in {}",
                path.display()
            )));
        }
        let mut params = flat;
        let mut running = BTreeMap::new();
        for (prefix, _) in prefixes {
            let mean = params.remove(&format!("{prefix}.running_mean")).expect("validated");
            let var = params.remove(&format!("{prefix}.running_var")).expect("validated");
            running.insert(
                prefix,
                RunningStat { mean: mean.data().to_vec(), var: var.data().to_vec() },
            );
        }
        Ok(ModelWeights { config_hash: config_hash(cfg), params, running })
    }
}

/// Creates one tape leaf per parameter. With shared encoders both
/// streams look up the same name, so gradients from the two applications
/// accumulate on the single leaf.
pub fn build_param_nodes(
    tape: &mut Tape,
    params: &BTreeMap<String, Tensor>,
    requires_grad: bool,
) -> BTreeMap<String, NodeId> {
    params.iter().map(|(n, t)| (n.clone(), tape.leaf(t.clone(), requires_grad))).collect()
}

/// Handles to the interesting nodes of one forward pass.
pub struct ForwardNodes {
    pub logits: NodeId,
    /// Final feature map of the stream reading `frame_t`.
    pub feat_a: NodeId,
    /// Final feature map of the stream reading `frame_t_minus_1`.
    pub feat_b: NodeId,
}

struct Builder<'a, 'b> {
    tape: &'a mut Tape,
    nodes: &'a BTreeMap<String, NodeId>,
    running: &'a mut BTreeMap<String, RunningStat>,
    mode: Mode,
    cfg: &'b ModelConfig,
}

impl Builder<'_, '_> {
    fn param(&self, name: &str) -> Result<NodeId, ModelError> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::ConfigMismatch(format!("missing parameter {name}")))
    }

    fn bn(&mut self, prefix: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let rs = self.running.get_mut(prefix).ok_or_else(|| {
            ModelError::ConfigMismatch(format!("missing running statistics for {prefix}"))
        })?;
        Ok(self.tape.batch_norm(x, gamma, beta, rs, self.mode, BN_MOMENTUM, BN_EPS)?)
    }

    fn unit(&mut self, prefix: &str, x: NodeId, d: UnitDims) -> Result<NodeId, ModelError> {
        let g = self.cfg.groups;
        let pw1 = self.param(&format!("{prefix}.pw1.weight"))?;
        let h = self.tape.conv2d(x, pw1, None, 1, 0, g)?;
        let h = self.bn(&format!("{prefix}.bn1"), h)?;
        let h = self.tape.relu(h)?;
        let h = self.tape.channel_shuffle(h, g)?;
        let dw = self.param(&format!("{prefix}.dw.weight"))?;
        let h = self.tape.conv2d(h, dw, None, d.stride, 1, d.mid)?;
        let h = self.bn(&format!("{prefix}.bn2"), h)?;
        let pw2 = self.param(&format!("{prefix}.pw2.weight"))?;
        let h = self.tape.conv2d(h, pw2, None, 1, 0, g)?;
        let h = self.bn(&format!("{prefix}.bn3"), h)?;
        let merged = if d.stride == 1 {
            self.tape.add(x, h)?
        } else {
            // Stride-2 merge: pooled shortcut first, conv branch second.
            let shortcut = self.tape.avg_pool2d(x, 3, 2, 1)?;
            self.tape.concat(shortcut, h)?
        };
        Ok(self.tape.relu(merged)?)
    }

    fn encode(&mut self, stream: &str, input: NodeId) -> Result<NodeId, ModelError> {
        let cfg = self.cfg;
        let w = self.param(&format!("{stream}.stem.conv.weight"))?;
        let h = self.tape.conv2d(input, w, None, 2, 1, 1)?;
        let h = self.bn(&format!("{stream}.stem.bn"), h)?;
        let mut h = self.tape.relu(h)?;
        let mut in_ch = cfg.stem_channels;
        for (k, stage) in cfg.stages.iter().enumerate() {
            for j in 0..stage.units {
                let d = unit_dims(in_ch, stage.out_channels, if j == 0 { 2 } else { 1 }, cfg.groups);
                h = self.unit(&format!("{stream}.stage{}.unit{j}", k + 1), h, d)?;
                in_ch = d.out_ch;
            }
        }
        Ok(h)
    }
}

/// Records the full forward pass on `tape`. `param_nodes` come from
/// [`build_param_nodes`]; frames are existing leaves of shape
/// `[N, 3, H, W]` scaled to [0, 1].
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    param_nodes: &BTreeMap<String, NodeId>,
    running: &mut BTreeMap<String, RunningStat>,
    frame_t: NodeId,
    frame_t_minus_1: NodeId,
    mode: Mode,
) -> Result<ForwardNodes, ModelError> {
    cfg.validate()?;
    for frame in [frame_t, frame_t_minus_1] {
        let shape = tape.value(frame).shape();
        if shape.len() != 4
            || shape[1] != 3
            || shape[2] != cfg.input_height
            || shape[3] != cfg.input_width
        {
            return Err(ModelError::Shape(format!(
                "frame shape {shape:?} does not match [N, 3, {}, {}]",
                cfg.input_height, cfg.input_width
            )));
        }
    }
    if tape.value(frame_t).shape()[0] != tape.value(frame_t_minus_1).shape()[0] {
        return Err(ModelError::Shape("frames disagree on batch size".into()));
    }
    let mut b = Builder { tape, nodes: param_nodes, running, mode, cfg };
    let feat_a = b.encode("encA", frame_t)?;
    let stream_b = if cfg.share_encoders { "encA" } else { "encB" };
    let feat_b = b.encode(stream_b, frame_t_minus_1)?;
    let fused = b.tape.concat(feat_a, feat_b)?;
    let mut h = fused;
    for k in 0..3 {
        let w = b.param(&format!("dec.{k}.weight"))?;
        if k < 2 {
            h = b.tape.conv2d_transposed(h, w, None, 2, 1)?;
            h = b.bn(&format!("dec.{k}.bn"), h)?;
            h = b.tape.relu(h)?;
        } else {
            let bias = b.param(&format!("dec.{k}.bias"))?;
            h = b.tape.conv2d_transposed(h, w, Some(bias), 2, 1)?;
        }
    }
    Ok(ForwardNodes { logits: h, feat_a, feat_b })
}

/// One forward pass returning the logits tensor. Train mode updates the
/// batch-norm running statistics inside `weights`.
pub fn forward(
    weights: &mut ModelWeights,
    cfg: &ModelConfig,
    frame_t: &Tensor,
    frame_t_minus_1: &Tensor,
    mode: Mode,
) -> Result<Tensor, ModelError> {
    if weights.config_hash != config_hash(cfg) {
        return Err(ModelError::ConfigMismatch(
            "weights were initialized under a different config".into(),
        ));
    }
    let mut tape = Tape::new();
    let nodes = build_param_nodes(&mut tape, &weights.params, false);
    let ft = tape.leaf(frame_t.clone(), false);
    let fp = tape.leaf(frame_t_minus_1.clone(), false);
    let out = forward_on_tape(&mut tape, cfg, &nodes, &mut weights.running, ft, fp, mode)?;
    Ok(tape.value(out.logits).clone())
}

/// Eval-mode forward without touching `weights`; pure in (weights, inputs).
pub fn infer(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    frame_t: &Tensor,
    frame_t_minus_1: &Tensor,
) -> Result<Tensor, ModelError> {
    let mut scratch = weights.clone();
    forward(&mut scratch, cfg, frame_t, frame_t_minus_1, Mode::Eval)
}

/// Trainable parameter counts keyed by top-level component
/// (`encA`, `encB`, `dec`).
#[derive(Debug, Clone, Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub by_component: BTreeMap<String, usize>,
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamCounts, ModelError> {
    let mut by_component: BTreeMap<String, usize> = BTreeMap::new();
    for spec in parameter_specs(cfg)? {
        let component = spec.name.split('.').next().unwrap_or("").to_string();
        *by_component.entry(component).or_default() += spec.shape.iter().product::<usize>();
    }
    let encoder = by_component.iter().filter(|(k, _)| k.starts_with("enc")).map(|(_, v)| v).sum();
    let decoder = by_component.get("dec").copied().unwrap_or(0);
    Ok(ParamCounts { total: encoder + decoder, encoder, decoder, by_component })
}

/// Multiply-accumulates of one conv2d: every output element costs
/// (cin / groups) * kh * kw fused multiplies.
pub fn conv2d_macs(
    cin: usize,
    cout: usize,
    groups: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
) -> usize {
    ho * wo * cout * (cin / groups) * kh * kw
}

/// Multiply-accumulates of one transposed conv2d in scatter form: every
/// input element multiplies the whole kernel into every output channel.
pub fn convt2d_macs(cin: usize, cout: usize, kh: usize, kw: usize, h: usize, w: usize) -> usize {
    h * w * cin * cout * kh * kw
}

/// Analytic multiply-accumulate count of one frame-pair forward pass at
/// batch 1, counting convolutions only. Both encoder streams run even
/// when weights are shared, so sharing does not change this number.
pub fn count_macs(cfg: &ModelConfig) -> Result<usize, ModelError> {
    cfg.validate()?;
    let g = cfg.groups;
    let (mut h, mut w) = (cfg.input_height / 2, cfg.input_width / 2);
    let mut stream = conv2d_macs(3, cfg.stem_channels, 1, 3, 3, h, w);
    let mut in_ch = cfg.stem_channels;
    for stage in &cfg.stages {
        for j in 0..stage.units {
            let d = unit_dims(in_ch, stage.out_channels, if j == 0 { 2 } else { 1 }, g);
            stream += conv2d_macs(in_ch, d.mid, g, 1, 1, h, w);
            let (oh, ow) = (h / d.stride, w / d.stride);
            stream += conv2d_macs(d.mid, d.mid, d.mid, 3, 3, oh, ow);
            stream += conv2d_macs(d.mid, d.branch, g, 1, 1, oh, ow);
            (h, w) = (oh, ow);
            in_ch = d.out_ch;
        }
    }
    let mut total = 2 * stream;
    let mut dec_in = 2 * cfg.encoder_out_channels();
    for &out in &cfg.decoder_channels {
        total += convt2d_macs(dec_in, out, 4, 4, h, w);
        (h, w) = (h * 2, w * 2);
        dec_in = out;
    }
    Ok(total)
}

/// Whole-model gradient check on the micro config: analytic gradients of
/// the weighted cross-entropy loss w.r.t. every parameter versus central
/// differences.
pub fn model_gradcheck() -> Result<GradCheckReport, ModelError> {
    let cfg = ModelConfig::micro();
    let weights = init_weights(&cfg, 0xF00D)?;
    let names: Vec<String> = weights.params.keys().cloned().collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| weights.params[n].clone()).collect();

    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let shape = [2usize, 3, cfg.input_height, cfg.input_width];
    let mut frame_t = Tensor::rand_uniform(&mut rng, &shape, 0.5);
    let mut frame_p = Tensor::rand_uniform(&mut rng, &shape, 0.5);
    for v in frame_t.data_mut().iter_mut().chain(frame_p.data_mut()) {
        *v += 0.5;
    }
    let n_px = 2 * cfg.input_height * cfg.input_width;
    let labels: Vec<u8> = (0..n_px).map(|i| (i % 5 == 0) as u8).collect();

    let cfg2 = cfg.clone();
    let mut build = move |tape: &mut Tape, ids: &[NodeId]| {
        let nodes: BTreeMap<String, NodeId> =
            names.iter().cloned().zip(ids.iter().copied()).collect();
        let mut running: BTreeMap<String, RunningStat> = batch_norm_prefixes(&cfg2)
            .expect("validated config")
            .into_iter()
            .map(|(p, c)| (p, RunningStat::new(c)))
            .collect();
        let ft = tape.leaf(frame_t.clone(), false);
        let fp = tape.leaf(frame_p.clone(), false);
        let out =
            forward_on_tape(tape, &cfg2, &nodes, &mut running, ft, fp, Mode::Train).map_err(
                |e| match e {
                    ModelError::Tensor(t) => t,
                    other => crate::tensor::shape_err("model_forward", other.to_string()),
                },
            )?;
        tape.wce_loss(out.logits, &labels, [0.7, 1.9])
    };
    let err = gradcheck::max_relative_error(&inputs, &mut build)?;
    Ok(GradCheckReport {
        name: "model_micro".to_string(),
        max_rel_err: err,
        tolerance: MODEL_GRADCHECK_TOLERANCE,
        passed: err < MODEL_GRADCHECK_TOLERANCE,
    })
}
