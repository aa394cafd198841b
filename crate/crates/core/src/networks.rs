//! 3D encoder-decoder networks: the surrogate/victim segmenters and the noise generator.
//!
//! Every network is a UNet: `depth` stages of (conv block, 2x max-pool),
//! a bottleneck block, then `depth` stages of (2x transposed conv, skip
//! concatenation, conv block), and a 1x1x1 head. A conv block is one or
//! more `3x3x3 conv -> instance norm -> leaky ReLU` units, so every kernel
//! spans neighbouring slices along z.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxshield_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::volume::{LogitVolume, Volume, VolumeShape};

/// Name of the PRNG used for parameter initialization and data synthesis.
pub const PRNG_NAME: &str = "ChaCha8 (rand_chacha 0.3)";

const LEAKY_SLOPE: f32 = 0.01;
const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Full description of a UNet instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub convs_per_block: usize,
    pub activation: OutputActivation,
    /// Multiplier on the head's initial weights.
    pub head_init_scale: f32,
    pub seed: u64,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("channel counts and width must be positive".into()));
        }
        if self.convs_per_block == 0 {
            return Err(Error::Config("convs_per_block must be >= 1".into()));
        }
        if self.depth > 6 {
            return Err(Error::Config(format!("depth {} is too large", self.depth)));
        }
        if !(self.head_init_scale.is_finite() && self.head_init_scale >= 0.0) {
            return Err(Error::Config("head_init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Rejects inputs whose spatial extent is not divisible by `2^depth`.
    pub fn check_input(&self, shape: VolumeShape) -> Result<()> {
        let f = 1usize << self.depth;
        if shape.channels != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} channels, got {}",
                self.in_channels, shape.channels
            )));
        }
        if !shape.depth.is_multiple_of(f) || !shape.height.is_multiple_of(f) || !shape.width.is_multiple_of(f) {
            return Err(Error::InvalidShape(format!(
                "spatial extent {}x{}x{} not divisible by 2^{}",
                shape.depth, shape.height, shape.width, self.depth
            )));
        }
        Ok(())
    }
}

/// The segmenter role: `(C, D, H, W) -> (D, H, W, K)` logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub convs_per_block: usize,
    pub seed: u64,
}

impl Default for SegmenterSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            base_width: 8,
            depth: 3,
            convs_per_block: 1,
            seed: 0,
        }
    }
}

impl SegmenterSpec {
    pub fn unet(&self) -> UNetSpec {
        UNetSpec {
            in_channels: self.in_channels,
            out_channels: self.num_classes,
            base_width: self.base_width,
            depth: self.depth,
            convs_per_block: self.convs_per_block,
            activation: OutputActivation::Identity,
            head_init_scale: 1.0,
            seed: self.seed,
        }
    }
}

/// The noise generator role: `(C, D, H, W) -> (C, D, H, W)` in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub convs_per_block: usize,
    pub head_init_scale: f32,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            channels: 1,
            base_width: 8,
            depth: 3,
            convs_per_block: 1,
            head_init_scale: 1.0,
            seed: 1,
        }
    }
}

impl GeneratorSpec {
    pub fn unet(&self) -> UNetSpec {
        UNetSpec {
            in_channels: self.channels,
            out_channels: self.channels,
            base_width: self.base_width,
            depth: self.depth,
            convs_per_block: self.convs_per_block,
            activation: OutputActivation::Tanh,
            head_init_scale: self.head_init_scale,
            seed: self.seed,
        }
    }
}

/// Victim architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimArch {
    UnetSmall,
    UnetWide,
    UnetDeep,
}

impl VictimArch {
    pub const ALL: [VictimArch; 3] = [VictimArch::UnetSmall, VictimArch::UnetWide, VictimArch::UnetDeep];

    pub fn tag(&self) -> &'static str {
        match self {
            VictimArch::UnetSmall => "unet_small",
            VictimArch::UnetWide => "unet_wide",
            VictimArch::UnetDeep => "unet_deep",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == tag)
            .ok_or_else(|| Error::Config(format!("unknown victim architecture `{tag}`")))
    }

    /// `(base_width, depth)` of the preset.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            VictimArch::UnetSmall => (8, 3),
            VictimArch::UnetWide => (12, 3),
            VictimArch::UnetDeep => (8, 4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSpec {
    pub arch: VictimArch,
    pub base_width: usize,
    pub depth: usize,
    pub seed: u64,
}

impl VictimSpec {
    pub fn preset(arch: VictimArch, seed: u64) -> Self {
        let (base_width, depth) = arch.shape();
        Self {
            arch,
            base_width,
            depth,
            seed,
        }
    }

    pub fn segmenter(&self, in_channels: usize, num_classes: usize) -> SegmenterSpec {
        SegmenterSpec {
            in_channels,
            num_classes,
            base_width: self.base_width,
            depth: self.depth,
            convs_per_block: 1,
            seed: self.seed,
        }
    }
}

/// Parameters of one UNet, stored in a fixed creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    spec: UNetSpec,
    params: Vec<Tensor>,
    names: Vec<String>,
}

/// Handles produced by one forward pass.
pub struct Forward {
    pub output: Var,
    pub params: Vec<Var>,
}

struct Init<'a> {
    rng: ChaCha8Rng,
    params: &'a mut Vec<Tensor>,
    names: &'a mut Vec<String>,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f32) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if bound > 0.0 { self.rng.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        self.params.push(Tensor::new(shape, data));
        self.names.push(name);
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f32) {
        self.params.push(Tensor::full(shape, v));
        self.names.push(name);
    }

    fn conv_block(&mut self, name: &str, cin: usize, cout: usize, convs: usize) {
        let mut c = cin;
        for i in 0..convs {
            let fan_in = (c * 27) as f32;
            self.uniform(format!("{name}.conv{i}.weight"), &[cout, c, 3, 3, 3], (6.0 / fan_in).sqrt());
            self.constant(format!("{name}.norm{i}.gamma"), &[cout], 1.0);
            self.constant(format!("{name}.norm{i}.beta"), &[cout], 0.0);
            c = cout;
        }
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        self.at += 1;
        self.vars[self.at - 1]
    }
}

fn conv_block(g: &mut Graph, cur: &mut Cursor<'_>, mut h: Var, convs: usize) -> Var {
    for _ in 0..convs {
        let w = cur.next();
        let gamma = cur.next();
        let beta = cur.next();
        h = g.conv3d(h, w, None);
        h = g.instance_norm(h, gamma, beta, NORM_EPS);
        h = g.leaky_relu(h, LEAKY_SLOPE);
    }
    h
}

impl UNet {
    /// Deterministic initialization from `spec.seed`.
    pub fn new(spec: UNetSpec) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            params: &mut params,
            names: &mut names,
        };
        let convs = spec.convs_per_block;
        let mut cin = spec.in_channels;
        for l in 0..spec.depth {
            init.conv_block(&format!("enc{l}"), cin, spec.width(l), convs);
            cin = spec.width(l);
        }
        init.conv_block("bottleneck", cin, spec.width(spec.depth), convs);
        for l in (0..spec.depth).rev() {
            let (wi, wo) = (spec.width(l + 1), spec.width(l));
            init.uniform(format!("up{l}.weight"), &[wi, wo, 2, 2, 2], (1.0 / (wi * 8) as f32).sqrt());
            init.constant(format!("up{l}.bias"), &[wo], 0.0);
            init.conv_block(&format!("dec{l}"), 2 * wo, wo, convs);
        }
        let w0 = spec.width(0);
        let bound = spec.head_init_scale * (1.0 / w0 as f32).sqrt();
        init.uniform("head.weight".into(), &[spec.out_channels, w0, 1, 1, 1], bound);
        init.constant("head.bias".into(), &[spec.out_channels], 0.0);
        Ok(Self { spec, params, names })
    }

    /// A network with every parameter set to zero except normalization gains.
    /// Its output is identically zero (tanh(0) for the generator).
    pub fn zeroed(spec: UNetSpec) -> Result<Self> {
        let mut net = Self::new(spec)?;
        for (p, name) in net.params.iter_mut().zip(&net.names) {
            let v = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            p.data_mut().fill(v);
        }
        Ok(net)
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records a forward pass of a `(C, D, H, W)` input on `g`. Parameters
    /// enter the tape as leaves that require gradients only if `trainable`.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Forward {
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect();
        let mut cur = Cursor { vars: &params, at: 0 };
        let convs = self.spec.convs_per_block;
        let mut h = x;
        let mut skips = Vec::with_capacity(self.spec.depth);
        for _ in 0..self.spec.depth {
            h = conv_block(g, &mut cur, h, convs);
            skips.push(h);
            h = g.max_pool2(h);
        }
        h = conv_block(g, &mut cur, h, convs);
        for skip in skips.into_iter().rev() {
            let w = cur.next();
            let b = cur.next();
            let up = g.conv_transpose2(h, w, Some(b));
            let cat = g.concat_channels(skip, up);
            h = conv_block(g, &mut cur, cat, convs);
        }
        let w = cur.next();
        let b = cur.next();
        let mut out = g.conv3d(h, w, Some(b));
        if self.spec.activation == OutputActivation::Tanh {
            out = g.tanh(out);
        }
        debug_assert_eq!(cur.at, params.len());
        Forward { output: out, params }
    }

    /// Gradient-free evaluation returning the channels-first output.
    pub fn infer(&self, shape: VolumeShape, data: &[f32]) -> Result<Tensor> {
        self.spec.check_input(shape)?;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&shape.as_array(), data.to_vec()));
        let f = self.forward(&mut g, x, false);
        Ok(g.value(f.output).clone())
    }

    /// Segmenter prediction as channels-last logits.
    pub fn predict(&self, volume: &Volume) -> Result<LogitVolume> {
        let out = self.infer(volume.shape(), volume.data())?;
        LogitVolume::from_channels_first(volume.shape().dims(), self.spec.out_channels, out.data())
    }

    /// SHA-256 over parameter bytes (little-endian f32, creation order).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Writes a checkpoint: one JSON header line, then raw little-endian f32 parameters.
    pub fn save_checkpoint(&self, path: &Path, steps: u64) -> Result<()> {
        let mut body = Vec::with_capacity(self.param_count() * 4);
        for p in &self.params {
            for v in p.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            spec: self.spec,
            steps,
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, p)| ParamEntry {
                    name: n.clone(),
                    shape: p.shape().to_vec(),
                })
                .collect(),
            crc32: crc32fast::hash(&body),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        out.push(b'\n');
        out.extend_from_slice(&body);
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint, returning the network and its recorded step count.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, u64)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: String| Error::Corruption {
            path: path.into(),
            reason,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(corrupt(format!("unsupported format `{}`", header.format)));
        }
        let body = &bytes[nl + 1..];
        if crc32fast::hash(body) != header.crc32 {
            return Err(corrupt("checksum mismatch".into()));
        }
        let mut net = Self::new(header.spec)?;
        if net.params.len() != header.params.len() {
            return Err(corrupt("parameter list does not match spec".into()));
        }
        let mut at = 0;
        for (p, entry) in net.params.iter_mut().zip(&header.params) {
            if p.shape() != entry.shape.as_slice() {
                return Err(corrupt(format!("parameter {} has unexpected shape", entry.name)));
            }
            let n = p.len() * 4;
            let chunk = body
                .get(at..at + n)
                .ok_or_else(|| corrupt("truncated parameter data".into()))?;
            for (v, b) in p.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
            at += n;
        }
        if at != body.len() {
            return Err(corrupt("trailing bytes after parameters".into()));
        }
        Ok((net, header.steps))
    }
}

pub const CHECKPOINT_FORMAT: &str = "voxshield-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    spec: UNetSpec,
    steps: u64,
    params: Vec<ParamEntry>,
    crc32: u32,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn build_segmenter(spec: &SegmenterSpec) -> Result<UNet> {
    if spec.num_classes < 2 {
        return Err(Error::Config("segmenter needs at least two classes".into()));
    }
    UNet::new(spec.unet())
}

pub fn build_generator(spec: &GeneratorSpec) -> Result<UNet> {
    UNet::new(spec.unet())
}
