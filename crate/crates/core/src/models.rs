//! Generator, discriminator, Deep-SVDD encoder and metric-embedding CNN,
//! all stored as named tensors and evaluated on a [`Tape`].

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng;
use crate::tensor::{
    conv_out_side, conv_transpose_out_side, pool_out_side, Adam, BatchStats, DType, Tape, Tensor,
    TensorError, Var,
};

pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;

const CKPT_MAGIC: &[u8; 4] = b"VTGN";
const CKPT_VERSION: u32 = 1;
const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("checkpoint io at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ModelError::Config(msg.into()))
}

/// One convolution (or transposed convolution) layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub const fn new(channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvLayer { channels, kernel, stride, pad }
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.channels == 0 || self.kernel == 0 || self.stride == 0 {
            return config_err(format!("{what}: channels, kernel and stride must be positive"));
        }
        Ok(())
    }

    fn conv_side(&self, side: usize, what: &str) -> Result<usize> {
        self.check(what)?;
        conv_out_side(side, self.kernel, self.stride, self.pad)
            .map_err(|e| ModelError::Config(format!("{what}: {e}")))
    }

    fn tconv_side(&self, side: usize, what: &str) -> Result<usize> {
        self.check(what)?;
        conv_transpose_out_side(side, self.kernel, self.stride, self.pad)
            .map_err(|e| ModelError::Config(format!("{what}: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolLayer {
    pub window: usize,
    pub stride: usize,
}

/// Final single-channel layer of a generator, followed by tanh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadLayer {
    ConvTranspose { kernel: usize, stride: usize, pad: usize },
    Conv { kernel: usize, stride: usize, pad: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    /// Channels and side of the feature map the noise is projected to.
    pub seed_channels: usize,
    pub seed_side: usize,
    /// Transposed conv + batchnorm + ReLU blocks.
    pub blocks: Vec<ConvLayer>,
    /// Max-pool applied after the last block.
    pub weak_maxpool: Option<PoolLayer>,
    pub head: HeadLayer,
    pub output_side: usize,
}

impl GeneratorConfig {
    /// Projection to a `side/8` seed, two stride-2 blocks and a stride-2 head.
    pub fn normal(output_side: usize) -> Self {
        GeneratorConfig {
            noise_dim: 100,
            seed_channels: 128,
            seed_side: output_side / 8,
            blocks: vec![ConvLayer::new(64, 4, 2, 1), ConvLayer::new(32, 4, 2, 1)],
            weak_maxpool: None,
            head: HeadLayer::ConvTranspose { kernel: 4, stride: 2, pad: 1 },
            output_side,
        }
    }

    /// Larger noise, one stride-4 transposed conv, then a 2/2 max-pool and a
    /// 1x1 head.
    pub fn weak(output_side: usize) -> Self {
        GeneratorConfig {
            noise_dim: 400,
            seed_channels: 2,
            seed_side: output_side / 2,
            blocks: vec![ConvLayer::new(32, 4, 4, 0)],
            weak_maxpool: Some(PoolLayer { window: 2, stride: 2 }),
            head: HeadLayer::Conv { kernel: 1, stride: 1, pad: 0 },
            output_side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 || self.seed_channels == 0 || self.seed_side == 0 {
            return config_err("generator: noise_dim, seed_channels and seed_side must be positive");
        }
        let mut side = self.seed_side;
        for (i, b) in self.blocks.iter().enumerate() {
            side = b.tconv_side(side, &format!("generator block {}", i + 1))?;
        }
        if let Some(p) = self.weak_maxpool {
            side = pool_out_side(side, p.window, p.stride)
                .map_err(|e| ModelError::Config(format!("generator max-pool: {e}")))?;
        }
        side = match self.head {
            HeadLayer::ConvTranspose { kernel, stride, pad } => {
                ConvLayer::new(1, kernel, stride, pad).tconv_side(side, "generator head")?
            }
            HeadLayer::Conv { kernel, stride, pad } => {
                ConvLayer::new(1, kernel, stride, pad).conv_side(side, "generator head")?
            }
        };
        if side != self.output_side {
            return config_err(format!(
                "generator head: produces side {side}, expected output_side {}",
                self.output_side
            ));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint("generator", self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_side: usize,
    /// Conv + leaky-ReLU blocks.
    pub layers: Vec<ConvLayer>,
    /// 0 taps the input image, `i` the activation of block `i`.
    pub feature_tap: usize,
}

impl DiscriminatorConfig {
    pub fn normal(input_side: usize) -> Self {
        DiscriminatorConfig {
            input_side,
            layers: vec![ConvLayer::new(64, 4, 2, 1), ConvLayer::new(128, 4, 2, 1)],
            feature_tap: 2,
        }
    }

    pub fn weak(input_side: usize) -> Self {
        DiscriminatorConfig { input_side, layers: vec![ConvLayer::new(64, 4, 2, 1)], feature_tap: 1 }
    }

    /// Output side after every block.
    pub fn sides(&self) -> Result<Vec<usize>> {
        conv_stack_sides("discriminator", self.input_side, &self.layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return config_err("discriminator: at least one conv layer");
        }
        if self.feature_tap > self.layers.len() {
            return config_err(format!(
                "discriminator: feature_tap {} exceeds depth {}",
                self.feature_tap,
                self.layers.len()
            ));
        }
        self.sides().map(|_| ())
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint("discriminator", self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_side: usize,
    pub layers: Vec<ConvLayer>,
    pub embed_dim: usize,
}

impl EncoderConfig {
    pub fn svdd(input_side: usize) -> Self {
        EncoderConfig {
            input_side,
            layers: DiscriminatorConfig::normal(input_side).layers,
            embed_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.embed_dim == 0 {
            return config_err("encoder: needs conv layers and a positive embed_dim");
        }
        conv_stack_sides("encoder", self.input_side, &self.layers).map(|_| ())
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint("svdd_encoder", self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub input_side: usize,
    pub layers: Vec<ConvLayer>,
    pub embed_dim: usize,
}

impl MetricConfig {
    pub fn shallow(input_side: usize) -> Self {
        MetricConfig {
            input_side,
            layers: vec![ConvLayer::new(32, 4, 2, 1), ConvLayer::new(64, 4, 2, 1), ConvLayer::new(64, 3, 1, 1)],
            embed_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.embed_dim == 0 {
            return config_err("metric cnn: needs conv layers and a positive embed_dim");
        }
        conv_stack_sides("metric cnn", self.input_side, &self.layers).map(|_| ())
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint("metric_cnn", self)
    }
}

fn conv_stack_sides(what: &str, input_side: usize, layers: &[ConvLayer]) -> Result<Vec<usize>> {
    let mut side = input_side;
    let mut out = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        side = l.conv_side(side, &format!("{what} layer {}", i + 1))?;
        out.push(side);
    }
    Ok(out)
}

/// First 8 bytes of SHA-256 over a tag and the config's JSON.
pub fn fingerprint<C: Serialize>(tag: &str, config: &C) -> u64 {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(json.as_bytes());
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with(RUNNING_MEAN) || name.ends_with(RUNNING_VAR)
}

/// Named parameters and batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub fingerprint: u64,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn new(fingerprint: u64) -> Self {
        ModelWeights { fingerprint, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::Integrity(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable tensor names in map order.
    pub fn param_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|k| !is_buffer(k)).cloned().collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.tensors.iter().filter(|(k, _)| !is_buffer(k)).map(|(_, v)| v.numel()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_sizes().iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Places every tensor on the tape; parameters are trainable when asked.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.tensors {
            if is_buffer(name) {
                continue;
            }
            vars.insert(name.clone(), tape.leaf(value.clone(), trainable)?);
        }
        Ok(Bound { vars })
    }

    /// Adam update from the gradients of a bound copy. Parameters that did
    /// not take part in the loss receive a zero gradient.
    pub fn apply_adam(&mut self, opt: &mut Adam<f32>, tape: &Tape, bound: &Bound) -> Result<()> {
        let grads: Vec<Tensor> = bound
            .vars
            .values()
            .map(|&v| tape.grad(v).ok_or(TensorError::Lifecycle("parameter bound as constant")))
            .collect::<Result<_, _>>()?;
        let grad_slices: Vec<&[f32]> = grads.iter().map(Tensor::data).collect();
        let mut params: Vec<&mut [f32]> = self
            .tensors
            .iter_mut()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(_, v)| v.data_mut())
            .collect();
        opt.step(&mut params, &grad_slices)?;
        if !self.is_finite() {
            return Err(TensorError::NonFinite { op: "adam_step" }.into());
        }
        Ok(())
    }

    /// Exponential moving average of batch statistics into running buffers.
    pub fn update_running(&mut self, stats: &[(String, BatchStats<f32>)]) -> Result<()> {
        for (prefix, s) in stats {
            for (suffix, src) in [(RUNNING_MEAN, &s.mean), (RUNNING_VAR, &s.var)] {
                let name = format!("{prefix}{suffix}");
                let buf = self
                    .tensors
                    .get_mut(&name)
                    .ok_or_else(|| ModelError::Integrity(format!("missing buffer {name}")))?;
                for (b, &v) in buf.data_mut().iter_mut().zip(src) {
                    *b = (1.0 - BN_MOMENTUM) * *b + BN_MOMENTUM * v;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DType::F32.tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint and checks its fingerprint when one is expected.
    pub fn from_bytes(bytes: &[u8], expected: Option<u64>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(ModelError::Integrity("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(ModelError::Integrity(format!("unsupported version {version}")));
        }
        let fp = r.u64()?;
        if let Some(e) = expected {
            if e != fp {
                return Err(ModelError::Integrity(format!(
                    "fingerprint {fp:016x} does not match config {e:016x}"
                )));
            }
        }
        let mut weights = ModelWeights::new(fp);
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| ModelError::Integrity("tensor name not utf-8".into()))?
                .to_string();
            let tag = r.take(1)?[0];
            if DType::from_tag(tag) != Some(DType::F32) {
                return Err(ModelError::Integrity(format!("{name}: unsupported dtype tag {tag}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| ModelError::Integrity(format!("{name}: bad shape {shape:?}")))?;
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| ModelError::Integrity(format!("{name}: {e}")))?;
            if !t.is_finite() {
                return Err(ModelError::Integrity(format!("{name}: non-finite values")));
            }
            if weights.tensors.insert(name.clone(), t).is_some() {
                return Err(ModelError::Integrity(format!("duplicate tensor {name}")));
            }
        }
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| ModelError::Io { path: path.display().to_string(), source };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path, expected: Option<u64>) -> Result<Self> {
        let io = |source| ModelError::Io { path: path.display().to_string(), source };
        let mut bytes = Vec::new();
        std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        Self::from_bytes(&bytes, expected)
    }

    /// Fails unless this set has exactly the tensors and shapes of `reference`.
    pub fn check_layout(&self, reference: &ModelWeights) -> Result<()> {
        if self.fingerprint != reference.fingerprint {
            return Err(ModelError::Integrity("fingerprint mismatch".into()));
        }
        for (name, t) in &reference.tensors {
            let mine = self.get(name)?;
            if mine.shape() != t.shape() {
                return Err(ModelError::Integrity(format!(
                    "{name}: shape {:?}, expected {:?}",
                    mine.shape(),
                    t.shape()
                )));
            }
        }
        if self.tensors.len() != reference.tensors.len() {
            return Err(ModelError::Integrity("unexpected extra tensors".into()));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::Integrity(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Tape handles for a model's parameters.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Integrity(format!("parameter {name} not bound")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }
}

/// Batchnorm behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the forward reports them for running-average updates.
    Train,
    /// Running statistics.
    Eval,
}

struct Init<'a> {
    weights: ModelWeights,
    seed: u64,
    prefix: &'a str,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: &[usize]) {
        let full = format!("{}.{name}", self.prefix);
        let mut r = rng::stream(self.seed, &full, 0);
        self.weights.insert(full, Tensor::randn(shape, INIT_STD, &mut r));
    }

    /// He-normal, std sqrt(2 / fan_in), for the leaky-ReLU embedding stack.
    fn he_normal(&mut self, name: &str, shape: &[usize]) {
        let full = format!("{}.{name}", self.prefix);
        let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
        let mut r = rng::stream(self.seed, &full, 0);
        self.weights.insert(full, Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut r));
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.weights.insert(format!("{}.{name}", self.prefix), Tensor::zeros(shape));
    }

    fn batchnorm(&mut self, name: &str, c: usize) {
        self.weights.insert(format!("{}.{name}.gamma", self.prefix), Tensor::full(&[c], 1.0));
        self.zeros(&format!("{name}.beta"), &[c]);
        self.zeros(&format!("{name}{RUNNING_MEAN}"), &[c]);
        self.weights.insert(format!("{}.{name}{RUNNING_VAR}", self.prefix), Tensor::full(&[c], 1.0));
    }
}

fn batchnorm(
    tape: &mut Tape,
    weights: &ModelWeights,
    bound: &Bound,
    name: &str,
    x: Var,
    mode: Mode,
    stats: &mut Vec<(String, BatchStats<f32>)>,
) -> Result<Var> {
    let gamma = bound.var(&format!("{name}.gamma"))?;
    let beta = bound.var(&format!("{name}.beta"))?;
    match mode {
        Mode::Train => {
            let (y, s) = tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
            stats.push((name.to_string(), s));
            Ok(y)
        }
        Mode::Eval => {
            let mean = weights.get(&format!("{name}{RUNNING_MEAN}"))?.data().to_vec();
            let var = weights.get(&format!("{name}{RUNNING_VAR}"))?.data().to_vec();
            Ok(tape.batchnorm_eval(x, gamma, beta, &mean, &var, BN_EPS)?)
        }
    }
}

fn weights_prefix(weights: &ModelWeights) -> Result<String> {
    let first = weights.names().next().ok_or_else(|| ModelError::Integrity("empty checkpoint".into()))?;
    Ok(first.split('.').next().unwrap_or_default().to_string())
}

fn check_image_input(tape: &Tape, x: Var, side: usize, what: &str) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != 1 || s[2] != side || s[3] != side {
        return Err(TensorError::Dimension {
            op: "model input",
            detail: format!("{what} expects [N, 1, {side}, {side}], got {s:?}"),
        }
        .into());
    }
    Ok(s[0])
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub weights: ModelWeights,
    prefix: String,
}

pub struct GeneratorOutput {
    pub image: Var,
    pub stats: Vec<(String, BatchStats<f32>)>,
}

impl Generator {
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        Self::build_named(config, seed, "g")
    }

    /// Like [`Generator::build`] with parameter names under `prefix`.
    pub fn build_named(config: GeneratorConfig, seed: u64, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut init = Init { weights: ModelWeights::new(config.fingerprint()), seed, prefix };
        let seed_len = config.seed_channels * config.seed_side * config.seed_side;
        init.normal("project.weight", &[config.noise_dim, seed_len]);
        init.batchnorm("project.bn", config.seed_channels);
        let mut c = config.seed_channels;
        for (i, b) in config.blocks.iter().enumerate() {
            init.normal(&format!("block{}.weight", i + 1), &[c, b.channels, b.kernel, b.kernel]);
            init.batchnorm(&format!("block{}.bn", i + 1), b.channels);
            c = b.channels;
        }
        match config.head {
            HeadLayer::ConvTranspose { kernel, .. } => init.normal("head.weight", &[c, 1, kernel, kernel]),
            HeadLayer::Conv { kernel, .. } => init.normal("head.weight", &[1, c, kernel, kernel]),
        }
        init.zeros("head.bias", &[1]);
        Ok(Generator { config, weights: init.weights, prefix: prefix.to_string() })
    }

    pub fn from_weights(config: GeneratorConfig, weights: ModelWeights) -> Result<Self> {
        let prefix = weights_prefix(&weights)?;
        weights.check_layout(&Self::build_named(config.clone(), 0, &prefix)?.weights)?;
        Ok(Generator { config, weights, prefix })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    /// `z` is `[N, noise_dim]`; the image is `[N, 1, S, S]` in (-1, 1).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var, mode: Mode) -> Result<GeneratorOutput> {
        let cfg = &self.config;
        let zs = tape.shape(z);
        if zs.len() != 2 || zs[1] != cfg.noise_dim {
            return Err(TensorError::Dimension {
                op: "generator",
                detail: format!("noise must be [N, {}], got {zs:?}", cfg.noise_dim),
            }
            .into());
        }
        let n = zs[0];
        let mut stats = Vec::new();
        let w = &self.weights;
        let h = tape.matmul(z, bound.var(&self.name("project.weight"))?)?;
        let h = tape.reshape(h, &[n, cfg.seed_channels, cfg.seed_side, cfg.seed_side])?;
        let h = batchnorm(tape, w, bound, &self.name("project.bn"), h, mode, &mut stats)?;
        let mut h = tape.relu(h)?;
        for (i, b) in cfg.blocks.iter().enumerate() {
            let y = tape.conv_transpose2d(h, bound.var(&self.name(&format!("block{}.weight", i + 1)))?, b.stride, b.pad)?;
            let y = batchnorm(tape, w, bound, &self.name(&format!("block{}.bn", i + 1)), y, mode, &mut stats)?;
            h = tape.relu(y)?;
        }
        if let Some(p) = cfg.weak_maxpool {
            h = tape.maxpool2d(h, p.window, p.stride)?;
        }
        let hw = bound.var(&self.name("head.weight"))?;
        let y = match cfg.head {
            HeadLayer::ConvTranspose { stride, pad, .. } => tape.conv_transpose2d(h, hw, stride, pad)?,
            HeadLayer::Conv { stride, pad, .. } => tape.conv2d(h, hw, stride, pad)?,
        };
        let y = tape.add_channel_bias(y, bound.var(&self.name("head.bias"))?)?;
        Ok(GeneratorOutput { image: tape.tanh(y)?, stats })
    }

    /// Evaluation-mode images for a batch of noise vectors.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false)?;
        let zv = tape.constant(z.clone())?;
        let out = self.forward(&mut tape, &bound, zv, Mode::Eval)?;
        Ok(tape.value(out.image).clone())
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub weights: ModelWeights,
    prefix: String,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorOutput {
    /// `[N, 1]` probability that the input is real.
    pub prob: Var,
    /// Activation at the configured tap.
    pub features: Var,
}

impl Discriminator {
    pub fn build(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        Self::build_named(config, seed, "d")
    }

    pub fn build_named(config: DiscriminatorConfig, seed: u64, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut init = Init { weights: ModelWeights::new(config.fingerprint()), seed, prefix };
        let mut c = 1;
        for (i, l) in config.layers.iter().enumerate() {
            init.normal(&format!("conv{}.weight", i + 1), &[l.channels, c, l.kernel, l.kernel]);
            init.zeros(&format!("conv{}.bias", i + 1), &[l.channels]);
            c = l.channels;
        }
        let side = *config.sides()?.last().unwrap();
        init.normal("out.weight", &[c * side * side, 1]);
        init.zeros("out.bias", &[1]);
        Ok(Discriminator { config, weights: init.weights, prefix: prefix.to_string() })
    }

    pub fn from_weights(config: DiscriminatorConfig, weights: ModelWeights) -> Result<Self> {
        let prefix = weights_prefix(&weights)?;
        weights.check_layout(&Self::build_named(config.clone(), 0, &prefix)?.weights)?;
        Ok(Discriminator { config, weights, prefix })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<DiscriminatorOutput> {
        let n = check_image_input(tape, x, self.config.input_side, "discriminator")?;
        let mut h = x;
        let mut features = x;
        for (i, l) in self.config.layers.iter().enumerate() {
            let y = tape.conv2d(h, bound.var(&self.name(&format!("conv{}.weight", i + 1)))?, l.stride, l.pad)?;
            let y = tape.add_channel_bias(y, bound.var(&self.name(&format!("conv{}.bias", i + 1)))?)?;
            h = tape.leaky_relu(y, LEAKY_SLOPE)?;
            if i + 1 == self.config.feature_tap {
                features = h;
            }
        }
        let width = tape.value(h).numel() / n;
        let flat = tape.reshape(h, &[n, width])?;
        let logit = tape.dense(flat, bound.var(&self.name("out.weight"))?, Some(bound.var(&self.name("out.bias"))?))?;
        Ok(DiscriminatorOutput { prob: tape.sigmoid(logit)?, features })
    }
}

#[derive(Debug, Clone)]
pub struct SvddEncoder {
    pub config: EncoderConfig,
    pub weights: ModelWeights,
}

impl SvddEncoder {
    /// Conv stack without any bias terms and a linear embedding head.
    pub fn build(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init { weights: ModelWeights::new(config.fingerprint()), seed, prefix: "e" };
        let mut c = 1;
        for (i, l) in config.layers.iter().enumerate() {
            init.normal(&format!("conv{}.weight", i + 1), &[l.channels, c, l.kernel, l.kernel]);
            c = l.channels;
        }
        let side = *conv_stack_sides("encoder", config.input_side, &config.layers)?.last().unwrap();
        init.normal("embed.weight", &[c * side * side, config.embed_dim]);
        Ok(SvddEncoder { config, weights: init.weights })
    }

    pub fn from_weights(config: EncoderConfig, weights: ModelWeights) -> Result<Self> {
        weights.check_layout(&Self::build(config.clone(), 0)?.weights)?;
        Ok(SvddEncoder { config, weights })
    }

    /// `[N, embed_dim]` embedding.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let n = check_image_input(tape, x, self.config.input_side, "encoder")?;
        let mut h = x;
        for (i, l) in self.config.layers.iter().enumerate() {
            let y = tape.conv2d(h, bound.var(&format!("e.conv{}.weight", i + 1))?, l.stride, l.pad)?;
            h = tape.leaky_relu(y, LEAKY_SLOPE)?;
        }
        let width = tape.value(h).numel() / n;
        let flat = tape.reshape(h, &[n, width])?;
        Ok(tape.dense(flat, bound.var("e.embed.weight")?, None)?)
    }

    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false)?;
        let x = tape.constant(images.clone())?;
        let e = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(e).clone())
    }
}

#[derive(Debug, Clone)]
pub struct MetricCnn {
    pub config: MetricConfig,
    pub weights: ModelWeights,
}

impl MetricCnn {
    pub fn build(config: MetricConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init { weights: ModelWeights::new(config.fingerprint()), seed, prefix: "m" };
        let mut c = 1;
        for (i, l) in config.layers.iter().enumerate() {
            init.he_normal(&format!("conv{}.weight", i + 1), &[l.channels, c, l.kernel, l.kernel]);
            init.zeros(&format!("conv{}.bias", i + 1), &[l.channels]);
            c = l.channels;
        }
        init.he_normal("embed.weight", &[c, config.embed_dim]);
        init.zeros("embed.bias", &[config.embed_dim]);
        Ok(MetricCnn { config, weights: init.weights })
    }

    pub fn from_weights(config: MetricConfig, weights: ModelWeights) -> Result<Self> {
        weights.check_layout(&Self::build(config.clone(), 0)?.weights)?;
        Ok(MetricCnn { config, weights })
    }

    /// Unit-norm `[N, embed_dim]` embedding.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        check_image_input(tape, x, self.config.input_side, "metric cnn")?;
        let mut h = x;
        for (i, l) in self.config.layers.iter().enumerate() {
            let y = tape.conv2d(h, bound.var(&format!("m.conv{}.weight", i + 1))?, l.stride, l.pad)?;
            let y = tape.add_channel_bias(y, bound.var(&format!("m.conv{}.bias", i + 1))?)?;
            h = tape.leaky_relu(y, LEAKY_SLOPE)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let e = tape.dense(pooled, bound.var("m.embed.weight")?, Some(bound.var("m.embed.bias")?))?;
        Ok(tape.l2_normalize(e)?)
    }

    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false)?;
        let x = tape.constant(images.clone())?;
        let e = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(e).clone())
    }
}
