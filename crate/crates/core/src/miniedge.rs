//! Small hybrid CNN-Transformer backbone.
//!
//! Layout: a patchifying conv stem with LayerNorm, three stages of
//! ConvNeXt-style blocks (depthwise 3×3 conv, LayerNorm, 2× pointwise MLP,
//! residual), an optional single-head attention block at the end of a stage,
//! 2×2 stride-2 downsampling with LayerNorm between stages, and a head of
//! global average pooling, LayerNorm and a linear projection.
//!
//! LayerNorms inside the conv trunk normalize over channels at every spatial
//! position. Every parameter carries a [`ParameterGroup`] tag.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, NodeId, Tensor};

/// Layer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParameterGroup {
    #[serde(rename = "LN")]
    Ln,
    #[serde(rename = "ST")]
    St,
    S0,
    S1,
    S2,
    #[serde(rename = "HEAD")]
    Head,
}

impl ParameterGroup {
    pub const ALL: [ParameterGroup; 6] = [
        ParameterGroup::Ln,
        ParameterGroup::St,
        ParameterGroup::S0,
        ParameterGroup::S1,
        ParameterGroup::S2,
        ParameterGroup::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParameterGroup::Ln => "LN",
            ParameterGroup::St => "ST",
            ParameterGroup::S0 => "S0",
            ParameterGroup::S1 => "S1",
            ParameterGroup::S2 => "S2",
            ParameterGroup::Head => "HEAD",
        }
    }

    /// Tag byte used by the weights file.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    fn stage(index: usize) -> Self {
        match index {
            0 => ParameterGroup::S0,
            1 => ParameterGroup::S1,
            _ => ParameterGroup::S2,
        }
    }
}

impl fmt::Display for ParameterGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParameterGroup {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s.trim())
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stage_channels: [usize; 3],
    pub stage_depths: [usize; 3],
    pub attention_stages: Vec<usize>,
    pub embed_dim: usize,
    pub ln_epsilon: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: 32,
            stem_kernel: 4,
            stem_stride: 4,
            stage_channels: [8, 16, 32],
            stage_depths: [2, 2, 2],
            attention_stages: vec![1, 2],
            embed_dim: 32,
            ln_epsilon: 1e-6,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.input_channels == 0 || self.stem_kernel == 0 || self.stem_stride == 0 {
            return bad("input_channels, stem_kernel and stem_stride must be positive".into());
        }
        if self.input_size % self.stem_stride != 0 {
            return bad(format!(
                "input_size {} is not divisible by stem_stride {}",
                self.input_size, self.stem_stride
            ));
        }
        if self.stem_kernel > self.input_size {
            return bad("stem_kernel exceeds input_size".into());
        }
        let side = (self.input_size - self.stem_kernel) / self.stem_stride + 1;
        if side % 4 != 0 {
            return bad(format!(
                "stem output side {side} must be divisible by 4 for two 2× downsamples"
            ));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return bad("stage_channels must be positive".into());
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim must be >= 2, got {}", self.embed_dim));
        }
        if let Some(s) = self.attention_stages.iter().find(|&&s| s > 2) {
            return bad(format!("attention stage index {s} out of range 0..=2"));
        }
        if !(self.ln_epsilon > 0.0) {
            return bad(format!("ln_epsilon must be > 0, got {}", self.ln_epsilon));
        }
        Ok(())
    }

    /// Spatial side length after the stem.
    pub fn stem_side(&self) -> usize {
        (self.input_size - self.stem_kernel) / self.stem_stride + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
enum LayerKind {
    Stem { c_in: usize, c_out: usize, kernel: usize, stride: usize },
    ConvBlock { c: usize },
    AttnBlock { c: usize },
    Downsample { c_in: usize, c_out: usize },
    Head { c: usize, embed: usize },
}

/// One entry of the block list, with the side length of its input map.
#[derive(Clone, Debug, PartialEq)]
struct Layer {
    prefix: String,
    group: ParameterGroup,
    kind: LayerKind,
    side: usize,
}

#[derive(Clone, Copy)]
enum Init {
    FanIn(usize),
    Ones,
    Zeros,
}

struct ParamSpec {
    name: String,
    group: ParameterGroup,
    shape: Vec<usize>,
    init: Init,
}

fn topology(cfg: &BackboneConfig) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut side = cfg.input_size;
    layers.push(Layer {
        prefix: "stem".into(),
        group: ParameterGroup::St,
        kind: LayerKind::Stem {
            c_in: cfg.input_channels,
            c_out: cfg.stage_channels[0],
            kernel: cfg.stem_kernel,
            stride: cfg.stem_stride,
        },
        side,
    });
    side = cfg.stem_side();
    for stage in 0..3 {
        let group = ParameterGroup::stage(stage);
        let c = cfg.stage_channels[stage];
        if stage > 0 {
            layers.push(Layer {
                prefix: format!("stages.{stage}.downsample"),
                group,
                kind: LayerKind::Downsample {
                    c_in: cfg.stage_channels[stage - 1],
                    c_out: c,
                },
                side,
            });
            side /= 2;
        }
        for block in 0..cfg.stage_depths[stage] {
            layers.push(Layer {
                prefix: format!("stages.{stage}.blocks.{block}"),
                group,
                kind: LayerKind::ConvBlock { c },
                side,
            });
        }
        if cfg.attention_stages.contains(&stage) {
            layers.push(Layer {
                prefix: format!("stages.{stage}.attn"),
                group,
                kind: LayerKind::AttnBlock { c },
                side,
            });
        }
    }
    layers.push(Layer {
        prefix: "head".into(),
        group: ParameterGroup::Head,
        kind: LayerKind::Head {
            c: cfg.stage_channels[2],
            embed: cfg.embed_dim,
        },
        side,
    });
    layers
}

impl Layer {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let p = |suffix: &str, group, shape: Vec<usize>, init| ParamSpec {
            name: format!("{}.{suffix}", self.prefix),
            group,
            shape,
            init,
        };
        let norm = |c: usize, at: &str| {
            vec![
                p(&format!("{at}.gamma"), ParameterGroup::Ln, vec![c], Init::Ones),
                p(&format!("{at}.beta"), ParameterGroup::Ln, vec![c], Init::Zeros),
            ]
        };
        let g = self.group;
        match self.kind {
            LayerKind::Stem { c_in, c_out, kernel, .. } => {
                let fan = c_in * kernel * kernel;
                let mut v = vec![
                    p("conv.weight", g, vec![c_out, c_in, kernel, kernel], Init::FanIn(fan)),
                    p("conv.bias", g, vec![c_out], Init::FanIn(fan)),
                ];
                v.extend(norm(c_out, "norm"));
                v
            }
            LayerKind::ConvBlock { c } => {
                let mut v = vec![
                    p("dw.weight", g, vec![c, 1, 3, 3], Init::FanIn(9)),
                    p("dw.bias", g, vec![c], Init::FanIn(9)),
                ];
                v.extend(norm(c, "norm"));
                v.extend([
                    p("fc1.weight", g, vec![2 * c, c], Init::FanIn(c)),
                    p("fc1.bias", g, vec![2 * c], Init::FanIn(c)),
                    p("fc2.weight", g, vec![c, 2 * c], Init::FanIn(2 * c)),
                    p("fc2.bias", g, vec![c], Init::FanIn(2 * c)),
                ]);
                v
            }
            LayerKind::AttnBlock { c } => {
                let mut v = norm(c, "norm");
                for w in ["wq", "wk", "wv", "wo"] {
                    v.push(p(&format!("attn.{w}"), g, vec![c, c], Init::FanIn(c)));
                }
                v
            }
            LayerKind::Downsample { c_in, c_out } => {
                let fan = c_in * 4;
                let mut v = vec![
                    p("conv.weight", g, vec![c_out, c_in, 2, 2], Init::FanIn(fan)),
                    p("conv.bias", g, vec![c_out], Init::FanIn(fan)),
                ];
                v.extend(norm(c_out, "norm"));
                v
            }
            LayerKind::Head { c, embed } => {
                let mut v = norm(c, "norm");
                v.extend([
                    p("proj.weight", g, vec![embed, c], Init::FanIn(c)),
                    p("proj.bias", g, vec![embed], Init::FanIn(c)),
                ]);
                v
            }
        }
    }

    /// Multiply-accumulates for one sample.
    fn macs(&self) -> u64 {
        let s = self.side as u64;
        match self.kind {
            LayerKind::Stem { c_in, c_out, kernel, stride } => {
                let out = (self.side - kernel) / stride + 1;
                complexity::conv_macs(c_in, c_out, kernel, out, out)
            }
            LayerKind::ConvBlock { c } => {
                let tokens = s * s;
                complexity::depthwise_macs(c, 3, self.side, self.side)
                    + tokens * complexity::linear_macs(c, 2 * c)
                    + tokens * complexity::linear_macs(2 * c, c)
            }
            LayerKind::AttnBlock { c } => complexity::attention_macs((s * s) as usize, c),
            LayerKind::Downsample { c_in, c_out } => {
                complexity::conv_macs(c_in, c_out, 2, self.side / 2, self.side / 2)
            }
            LayerKind::Head { c, embed } => complexity::linear_macs(c, embed),
        }
    }
}

/// Closed-form parameter and multiply-accumulate counts for single layers.
pub mod complexity {
    pub fn conv_params(c_in: usize, c_out: usize, kernel: usize) -> u64 {
        (c_out * c_in * kernel * kernel + c_out) as u64
    }

    pub fn linear_params(d_in: usize, d_out: usize) -> u64 {
        (d_out * d_in + d_out) as u64
    }

    pub fn conv_macs(c_in: usize, c_out: usize, kernel: usize, out_h: usize, out_w: usize) -> u64 {
        (c_out * c_in * kernel * kernel * out_h * out_w) as u64
    }

    pub fn depthwise_macs(c: usize, kernel: usize, out_h: usize, out_w: usize) -> u64 {
        (c * kernel * kernel * out_h * out_w) as u64
    }

    /// Per row of input.
    pub fn linear_macs(d_in: usize, d_out: usize) -> u64 {
        (d_out * d_in) as u64
    }

    /// Q, K, V and output projections (4·T·D²) plus scores and weighted sum (2·T²·D).
    pub fn attention_macs(tokens: usize, d: usize) -> u64 {
        (4 * tokens * d * d + 2 * tokens * tokens * d) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParameterGroup,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: BackboneConfig,
    layers: Vec<Layer>,
    params: Vec<Param>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: u64,
    pub per_group: BTreeMap<ParameterGroup, u64>,
}

impl Model {
    /// Deterministic fan-in uniform initialization; LayerNorm γ = 1, β = 0.
    /// All parameters start trainable.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = topology(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &layers {
            for spec in layer.param_specs() {
                let tensor = match spec.init {
                    Init::Ones => Tensor::full(&spec.shape, 1.0),
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::FanIn(fan) => {
                        let bound = 1.0 / (fan as f64).sqrt();
                        Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..bound))
                    }
                };
                params.push(Param {
                    name: spec.name,
                    group: spec.group,
                    tensor,
                    trainable: true,
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            layers,
            params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Number of LayerNorm layers (K).
    pub fn ln_layer_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == ParameterGroup::Ln && p.name.ends_with(".gamma"))
            .count()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Rounds every parameter to the nearest f32, matching a save/load round trip.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut per_group: BTreeMap<ParameterGroup, u64> =
            ParameterGroup::ALL.iter().map(|&g| (g, 0)).collect();
        for p in &self.params {
            *per_group.get_mut(&p.group).unwrap() += p.tensor.numel() as u64;
        }
        ParamCount {
            total: per_group.values().sum(),
            per_group,
        }
    }

    /// Multiply-accumulate count of one forward pass for a single sample.
    /// Normalization, activations and pooling are not counted.
    pub fn estimate_flops(&self) -> u64 {
        self.layers.iter().map(Layer::macs).sum()
    }

    /// Adds every parameter to `g` as a leaf, in registry order. Only
    /// trainable parameters require gradients.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), p.trainable))
            .collect()
    }

    /// Adds every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.constant(p.tensor.clone())).collect()
    }

    /// Builds the forward pass of an N×C×S×S batch; returns raw N×D embeddings.
    pub fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        if params.len() != self.params.len() {
            return Err(Error::TopologyMismatch(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Rank {
                op: "forward",
                expected: 4,
                got: xs.len(),
            });
        }
        let s = self.config.input_size;
        let dims = [
            ("channels", self.config.input_channels, xs[1]),
            ("height", s, xs[2]),
            ("width", s, xs[3]),
        ];
        for (axis, expected, got) in dims {
            if expected != got {
                return Err(Error::Dimension {
                    op: "forward",
                    axis,
                    expected,
                    got,
                });
            }
        }
        let eps = self.config.ln_epsilon;
        let mut cursor = params.iter().copied();
        let mut take = |n: usize| -> Vec<NodeId> { cursor.by_ref().take(n).collect() };
        let mut h = x;
        for layer in &self.layers {
            h = match layer.kind {
                LayerKind::Stem { stride, .. } => {
                    let p = take(4);
                    let y = g.conv2d(h, p[0], p[1], stride, 0)?;
                    channel_norm(g, y, p[2], p[3], eps)?
                }
                LayerKind::ConvBlock { .. } => {
                    let p = take(8);
                    let y = g.depthwise_conv2d(h, p[0], p[1], 1)?;
                    let y = g.permute(y, &[0, 2, 3, 1])?;
                    let y = g.layer_norm(y, p[2], p[3], eps)?;
                    let y = g.linear(y, p[4], p[5])?;
                    let y = g.gelu(y);
                    let y = g.linear(y, p[6], p[7])?;
                    let y = g.permute(y, &[0, 3, 1, 2])?;
                    g.add(h, y)?
                }
                LayerKind::AttnBlock { c } => {
                    let p = take(6);
                    let (n, side) = (g.value(h).shape()[0], layer.side);
                    let t = g.permute(h, &[0, 2, 3, 1])?;
                    let t = g.reshape(t, &[n, side * side, c])?;
                    let t = g.layer_norm(t, p[0], p[1], eps)?;
                    let t = g.attention(t, p[2], p[3], p[4], p[5])?;
                    let t = g.reshape(t, &[n, side, side, c])?;
                    let y = g.permute(t, &[0, 3, 1, 2])?;
                    g.add(h, y)?
                }
                LayerKind::Downsample { .. } => {
                    let p = take(4);
                    let y = g.conv2d(h, p[0], p[1], 2, 0)?;
                    channel_norm(g, y, p[2], p[3], eps)?
                }
                LayerKind::Head { .. } => {
                    let p = take(4);
                    let y = g.global_avg_pool(h)?;
                    let y = g.layer_norm(y, p[0], p[1], eps)?;
                    g.linear(y, p[2], p[3])?
                }
            };
        }
        Ok(h)
    }

    /// Inference without gradient tracking.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &params, x)?;
        Ok(g.value(out).clone())
    }
}

/// LayerNorm over the channel axis of an NCHW map.
fn channel_norm(g: &mut Graph, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
    let y = g.permute(x, &[0, 2, 3, 1])?;
    let y = g.layer_norm(y, gamma, beta, eps)?;
    g.permute(y, &[0, 3, 1, 2])
}

/// Copies a single-channel N×1×S×S batch into all three channels.
pub fn replicate_channels(image: &Tensor) -> Result<Tensor> {
    if image.rank() != 4 {
        return Err(Error::Rank {
            op: "replicate_channels",
            expected: 4,
            got: image.rank(),
        });
    }
    let s = image.shape();
    if s[1] != 1 {
        return Err(Error::Dimension {
            op: "replicate_channels",
            axis: "channels",
            expected: 1,
            got: s[1],
        });
    }
    let plane = s[2] * s[3];
    let mut data = Vec::with_capacity(image.numel() * 3);
    for sample in image.data().chunks(plane) {
        for _ in 0..3 {
            data.extend_from_slice(sample);
        }
    }
    Tensor::new(vec![s[0], 3, s[2], s[3]], data)
}
