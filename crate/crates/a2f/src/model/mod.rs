//! The unified multi-head audio-to-face network: strided-conv TCN front-end,
//! transformer encoder, frequency adaptor (default position: behind the
//! transformer), identity embedding with a trainable pivot row, a
//! non-autoregressive motion decoder, and one linear head per annotation
//! convention.

pub mod checkpoint;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ipca::PcaBasis;
use crate::motion::{derive_vertices_graph, AnnotationConvention, MotionError};
use crate::numerics::{interp_positions, Graph, NumericsError, Real, Rng, Tensor, Var};

pub use checkpoint::{registry_digest, Checkpoint, TrainStage};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown convention {0}")]
    UnknownConvention(u32),
    #[error("unknown identity label {0} (table has {1} rows)")]
    UnknownIdentity(u32, usize),
    #[error("no PCA basis fitted for vertex convention {0}")]
    MissingBasis(u32),
    #[error("audio clip of {got} samples is shorter than the encoder receptive field ({need})")]
    AudioTooShort { got: usize, need: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
}

/// Audio features leave the encoder at this rate; the adaptor maps them to
/// each convention's frame rate.
pub const FEATURE_HZ: u32 = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptorPosition {
    /// Between the TCN front-end and the transformer.
    Pos0,
    /// Behind the transformer (default).
    Pos1,
}

impl AdaptorPosition {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptorPosition::Pos0 => "pos0",
            AdaptorPosition::Pos1 => "pos1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pos0" => Some(AdaptorPosition::Pos0),
            "pos1" => Some(AdaptorPosition::Pos1),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderArch {
    Tcn,
    Transformer,
}

impl DecoderArch {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecoderArch::Tcn => "tcn",
            DecoderArch::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tcn" => Some(DecoderArch::Tcn),
            "transformer" => Some(DecoderArch::Transformer),
            _ => None,
        }
    }
}

/// Architecture hyperparameters. Desk-scale defaults; the decoder channel
/// count used for full-scale comparisons is 256.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub sample_rate: u32,
    /// Strided front-end schedule; product must equal sample_rate / 50.
    pub tcn_strides: Vec<usize>,
    pub tcn_kernels: Vec<usize>,
    pub tcn_channels: usize,
    /// Transformer model dim.
    pub dim: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub adaptor_position: AdaptorPosition,
    pub decoder_arch: DecoderArch,
    pub decoder_channels: usize,
    pub decoder_layers: usize,
    pub decoder_kernel: usize,
    /// Identity embedding width; fused into the decoder by addition, so it
    /// must match `decoder_channels`.
    pub embed_dim: usize,
    pub pie_probability: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sample_rate: 16000,
            tcn_strides: vec![20, 4, 4],
            tcn_kernels: vec![40, 8, 8],
            tcn_channels: 48,
            dim: 64,
            transformer_layers: 2,
            heads: 4,
            ff_mult: 4,
            adaptor_position: AdaptorPosition::Pos1,
            decoder_arch: DecoderArch::Tcn,
            decoder_channels: 64,
            decoder_layers: 3,
            decoder_kernel: 5,
            embed_dim: 64,
            pie_probability: 0.10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let stride_product: usize = self.tcn_strides.iter().product();
        if stride_product as u32 * FEATURE_HZ != self.sample_rate {
            return Err(ModelError::Config(format!(
                "stride schedule product {stride_product} x {FEATURE_HZ} != sample rate {}",
                self.sample_rate
            )));
        }
        if self.tcn_strides.len() != self.tcn_kernels.len() {
            return Err(ModelError::Config("stride/kernel schedules differ in length".into()));
        }
        if self.tcn_strides.iter().chain(&self.tcn_kernels).any(|&v| v == 0) {
            return Err(ModelError::Config("strides and kernels must be positive".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "model dim {} must be a positive multiple of {} heads",
                self.dim, self.heads
            )));
        }
        if self.embed_dim != self.decoder_channels {
            return Err(ModelError::Config(format!(
                "identity embedding dim {} must equal decoder channels {} (additive fusion)",
                self.embed_dim, self.decoder_channels
            )));
        }
        if self.decoder_arch == DecoderArch::Transformer && self.decoder_channels % self.heads != 0
        {
            return Err(ModelError::Config(
                "transformer decoder channels must be divisible by heads".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pie_probability) {
            return Err(ModelError::Config(format!(
                "pie_probability {} outside [0, 1]",
                self.pie_probability
            )));
        }
        if self.decoder_layers == 0 || self.decoder_kernel == 0 || self.decoder_channels == 0 {
            return Err(ModelError::Config("decoder sizes must be positive".into()));
        }
        Ok(())
    }

    /// Receptive field of the strided front-end, in samples.
    pub fn encoder_receptive_field(&self) -> usize {
        let mut rf = 1usize;
        let mut prod = 1usize;
        for (k, s) in self.tcn_kernels.iter().zip(&self.tcn_strides) {
            rf += (k - 1) * prod;
            prod *= s;
        }
        rf
    }

    /// Canonical key=value serialization (round-trips exactly).
    pub fn to_text(&self) -> String {
        let ints = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "sample_rate={}\ntcn_strides={}\ntcn_kernels={}\ntcn_channels={}\ndim={}\n\
             transformer_layers={}\nheads={}\nff_mult={}\nadaptor_position={}\ndecoder_arch={}\n\
             decoder_channels={}\ndecoder_layers={}\ndecoder_kernel={}\nembed_dim={}\n\
             pie_probability={:?}\n",
            self.sample_rate,
            ints(&self.tcn_strides),
            ints(&self.tcn_kernels),
            self.tcn_channels,
            self.dim,
            self.transformer_layers,
            self.heads,
            self.ff_mult,
            self.adaptor_position.as_str(),
            self.decoder_arch.as_str(),
            self.decoder_channels,
            self.decoder_layers,
            self.decoder_kernel,
            self.embed_dim,
            self.pie_probability,
        )
    }

    /// Parse the canonical serialization, rejecting unknown keys.
    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut config = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("expected key=value, got `{line}`")))?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Apply one `key=value` override. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        let bad = |what: &str| ModelError::Config(format!("bad {what} value `{value}`"));
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| bad("integer"));
        let parse_list = |v: &str| -> Result<Vec<usize>, ModelError> {
            v.split(',').map(|p| p.trim().parse::<usize>().map_err(|_| bad("list"))).collect()
        };
        match key {
            "sample_rate" => self.sample_rate = value.parse().map_err(|_| bad("sample_rate"))?,
            "tcn_strides" => self.tcn_strides = parse_list(value)?,
            "tcn_kernels" => self.tcn_kernels = parse_list(value)?,
            "tcn_channels" => self.tcn_channels = parse_usize(value)?,
            "dim" => self.dim = parse_usize(value)?,
            "transformer_layers" => self.transformer_layers = parse_usize(value)?,
            "heads" => self.heads = parse_usize(value)?,
            "ff_mult" => self.ff_mult = parse_usize(value)?,
            "adaptor_position" => {
                self.adaptor_position =
                    AdaptorPosition::parse(value).ok_or_else(|| bad("adaptor position"))?
            }
            "decoder_arch" => {
                self.decoder_arch = DecoderArch::parse(value).ok_or_else(|| bad("decoder arch"))?
            }
            "decoder_channels" => {
                self.decoder_channels = parse_usize(value)?;
                self.embed_dim = self.decoder_channels;
            }
            "decoder_layers" => self.decoder_layers = parse_usize(value)?,
            "decoder_kernel" => self.decoder_kernel = parse_usize(value)?,
            "embed_dim" => self.embed_dim = parse_usize(value)?,
            "pie_probability" => {
                self.pie_probability = value.parse().map_err(|_| bad("probability"))?
            }
            other => return Err(ModelError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

// ── parameters ───────────────────────────────────────────────────────────

/// Named parameter tensors in deterministic (sorted) order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Uniform in +-sqrt(1/fan_in).
    FanIn(usize),
    /// Normal(0, 0.02), for embeddings.
    Embedding,
    Zero,
    One,
}

/// Every parameter the config declares, with shape and initializer.
pub fn param_specs(
    config: &ModelConfig,
    registry: &[AnnotationConvention],
    identity_rows: usize,
) -> Vec<(String, Vec<usize>, InitKind)> {
    let mut specs = Vec::new();
    let mut cin = 1usize;
    for (i, k) in config.tcn_kernels.iter().enumerate() {
        specs.push((
            format!("encoder.tcn{i}.weight"),
            vec![config.tcn_channels, cin, *k],
            InitKind::FanIn(cin * k),
        ));
        specs.push((format!("encoder.tcn{i}.bias"), vec![config.tcn_channels], InitKind::Zero));
        specs.push((format!("encoder.tcn{i}.ln.gamma"), vec![config.tcn_channels], InitKind::One));
        specs.push((format!("encoder.tcn{i}.ln.beta"), vec![config.tcn_channels], InitKind::Zero));
        cin = config.tcn_channels;
    }
    specs.push((
        "encoder.proj.weight".into(),
        vec![config.dim, config.tcn_channels],
        InitKind::FanIn(config.tcn_channels),
    ));
    specs.push(("encoder.proj.bias".into(), vec![config.dim], InitKind::Zero));
    for i in 0..config.transformer_layers {
        transformer_block_specs(&mut specs, &format!("encoder.tx{i}"), config.dim, config.ff_mult);
    }
    specs.push(("encoder.ln_out.gamma".into(), vec![config.dim], InitKind::One));
    specs.push(("encoder.ln_out.beta".into(), vec![config.dim], InitKind::Zero));

    specs.push((
        "identity.table".into(),
        vec![identity_rows, config.embed_dim],
        InitKind::Embedding,
    ));

    specs.push((
        "decoder.in.weight".into(),
        vec![config.decoder_channels, config.dim],
        InitKind::FanIn(config.dim),
    ));
    specs.push(("decoder.in.bias".into(), vec![config.decoder_channels], InitKind::Zero));
    match config.decoder_arch {
        DecoderArch::Tcn => {
            for i in 0..config.decoder_layers {
                specs.push((
                    format!("decoder.block{i}.weight"),
                    vec![config.decoder_channels, config.decoder_channels, config.decoder_kernel],
                    InitKind::FanIn(config.decoder_channels * config.decoder_kernel),
                ));
                specs.push((
                    format!("decoder.block{i}.bias"),
                    vec![config.decoder_channels],
                    InitKind::Zero,
                ));
                specs.push((
                    format!("decoder.block{i}.ln.gamma"),
                    vec![config.decoder_channels],
                    InitKind::One,
                ));
                specs.push((
                    format!("decoder.block{i}.ln.beta"),
                    vec![config.decoder_channels],
                    InitKind::Zero,
                ));
            }
        }
        DecoderArch::Transformer => {
            for i in 0..config.decoder_layers {
                transformer_block_specs(
                    &mut specs,
                    &format!("decoder.tx{i}"),
                    config.decoder_channels,
                    config.ff_mult,
                );
            }
            specs.push(("decoder.ln_out.gamma".into(), vec![config.decoder_channels], InitKind::One));
            specs.push((
                "decoder.ln_out.beta".into(),
                vec![config.decoder_channels],
                InitKind::Zero,
            ));
        }
    }
    for conv in registry {
        specs.push((
            format!("head.{}.weight", conv.id),
            vec![conv.head_dim(), config.decoder_channels],
            InitKind::FanIn(config.decoder_channels),
        ));
        specs.push((format!("head.{}.bias", conv.id), vec![conv.head_dim()], InitKind::Zero));
    }
    specs
}

fn transformer_block_specs(
    specs: &mut Vec<(String, Vec<usize>, InitKind)>,
    prefix: &str,
    dim: usize,
    ff_mult: usize,
) {
    for ln in ["ln1", "ln2"] {
        specs.push((format!("{prefix}.{ln}.gamma"), vec![dim], InitKind::One));
        specs.push((format!("{prefix}.{ln}.beta"), vec![dim], InitKind::Zero));
    }
    for w in ["wq", "wk", "wv", "wo"] {
        specs.push((format!("{prefix}.attn.{w}"), vec![dim, dim], InitKind::FanIn(dim)));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        specs.push((format!("{prefix}.attn.{b}"), vec![dim], InitKind::Zero));
    }
    let ff = dim * ff_mult;
    specs.push((format!("{prefix}.ff.w1"), vec![ff, dim], InitKind::FanIn(dim)));
    specs.push((format!("{prefix}.ff.b1"), vec![ff], InitKind::Zero));
    specs.push((format!("{prefix}.ff.w2"), vec![dim, ff], InitKind::FanIn(ff)));
    specs.push((format!("{prefix}.ff.b2"), vec![dim], InitKind::Zero));
}

pub fn init_tensor(shape: &[usize], kind: InitKind, rng: &mut Rng) -> Tensor<f32> {
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = match kind {
        InitKind::FanIn(fan_in) => {
            let bound = (1.0 / fan_in as f64).sqrt();
            (0..numel).map(|_| rng.range(-bound, bound) as f32).collect()
        }
        InitKind::Embedding => (0..numel).map(|_| (rng.normal() * 0.02) as f32).collect(),
        InitKind::Zero => vec![0.0; numel],
        InitKind::One => vec![1.0; numel],
    };
    Tensor::new(shape.to_vec(), data).expect("spec shapes are consistent")
}

/// Initialize every declared parameter deterministically from the seed.
/// Each parameter draws from its own derived stream, keyed by name, so the
/// set of other parameters never changes a given tensor's values.
pub fn init_params(
    config: &ModelConfig,
    registry: &[AnnotationConvention],
    identity_rows: usize,
    seed: u64,
) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    for (name, shape, kind) in param_specs(config, registry, identity_rows) {
        let mut rng = Rng::new(seed).derive(name_stream(&name));
        store.insert(name, init_tensor(&shape, kind, &mut rng));
    }
    store
}

/// Stable stream id for a parameter name (FNV-1a).
pub fn name_stream(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// ── forward pass ─────────────────────────────────────────────────────────

pub enum ForwardMode<'r> {
    Infer,
    Train { rng: &'r mut Rng },
}

/// Binds store parameters into a graph on first use and remembers the
/// mapping so the trainer can route gradients by name.
pub struct Binder<'s, T: Real> {
    store: &'s ParamStore<T>,
    bound: BTreeMap<String, Var>,
}

impl<'s, T: Real> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Binder { store, bound: BTreeMap::new() }
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var, ModelError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let tensor = self
            .store
            .get(name)
            .ok_or_else(|| ModelError::Config(format!("missing parameter `{name}`")))?;
        let var = g.leaf(tensor);
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn into_bound(self) -> BTreeMap<String, Var> {
        self.bound
    }
}

/// Output frame count for the frequency adaptor: round-half-to-even of
/// `count * fps / 50`.
pub fn adapted_len(feature_frames: usize, target_fps: u32) -> usize {
    ((feature_frames as f64 * target_fps as f64 / FEATURE_HZ as f64).round_ties_even() as usize)
        .max(1)
}

/// Differentiable linear interpolation from 50 Hz features to the motion
/// frame rate. Exact identity when the rates match; endpoints preserved.
pub fn adapt_frequency<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    target_fps: u32,
) -> Result<Var, ModelError> {
    if target_fps == 0 {
        return Err(ModelError::Config("target fps must be positive".into()));
    }
    let t_in = g.shape_of(features)[0];
    if t_in == 0 {
        return Err(ModelError::Config("adaptor input is empty".into()));
    }
    if target_fps == FEATURE_HZ {
        return Ok(features);
    }
    let t_out = adapted_len(t_in, target_fps);
    let pos = interp_positions(t_in, t_out);
    Ok(g.temporal_interp(features, &pos)?)
}

fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    binder: &mut Binder<'_, T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var, ModelError> {
    let ln1g = binder.get(g, &format!("{prefix}.ln1.gamma"))?;
    let ln1b = binder.get(g, &format!("{prefix}.ln1.beta"))?;
    let normed = g.layer_norm(x, ln1g, ln1b)?;
    let wq = binder.get(g, &format!("{prefix}.attn.wq"))?;
    let bq = binder.get(g, &format!("{prefix}.attn.bq"))?;
    let wk = binder.get(g, &format!("{prefix}.attn.wk"))?;
    let bk = binder.get(g, &format!("{prefix}.attn.bk"))?;
    let wv = binder.get(g, &format!("{prefix}.attn.wv"))?;
    let bv = binder.get(g, &format!("{prefix}.attn.bv"))?;
    let wo = binder.get(g, &format!("{prefix}.attn.wo"))?;
    let bo = binder.get(g, &format!("{prefix}.attn.bo"))?;
    let attn = g.self_attention(normed, wq, bq, wk, bk, wv, bv, wo, bo, heads)?;
    let x = g.add(x, attn)?;
    let ln2g = binder.get(g, &format!("{prefix}.ln2.gamma"))?;
    let ln2b = binder.get(g, &format!("{prefix}.ln2.beta"))?;
    let normed2 = g.layer_norm(x, ln2g, ln2b)?;
    let w1 = binder.get(g, &format!("{prefix}.ff.w1"))?;
    let b1 = binder.get(g, &format!("{prefix}.ff.b1"))?;
    let w2 = binder.get(g, &format!("{prefix}.ff.w2"))?;
    let b2 = binder.get(g, &format!("{prefix}.ff.b2"))?;
    let h = g.linear(normed2, w1, b1)?;
    let h = g.gelu(h);
    let ff = g.linear(h, w2, b2)?;
    Ok(g.add(x, ff)?)
}

/// Raw waveform -> contextualized features. In pos1 mode the output stays
/// at 50 Hz; in pos0 mode the adaptor runs between the TCN and the
/// transformer, so the output is already at `target_fps`.
pub fn encode_audio<T: Real>(
    g: &mut Graph<T>,
    binder: &mut Binder<'_, T>,
    config: &ModelConfig,
    audio: &[f32],
    target_fps: u32,
) -> Result<Var, ModelError> {
    let rf = config.encoder_receptive_field();
    if audio.len() < rf {
        return Err(ModelError::AudioTooShort { got: audio.len(), need: rf });
    }
    let wave =
        Tensor::new(vec![1, audio.len()], audio.iter().map(|&v| T::from_f64(v as f64)).collect())
            .expect("sized from input");
    let mut x = g.leaf_owned(wave);
    for i in 0..config.tcn_strides.len() {
        let w = binder.get(g, &format!("encoder.tcn{i}.weight"))?;
        let b = binder.get(g, &format!("encoder.tcn{i}.bias"))?;
        x = g.conv1d(x, w, b, config.tcn_strides[i], 1, crate::numerics::Padding::Same)?;
        x = g.gelu(x);
        // Normalize each time step over channels.
        let lg = binder.get(g, &format!("encoder.tcn{i}.ln.gamma"))?;
        let lb = binder.get(g, &format!("encoder.tcn{i}.ln.beta"))?;
        let xt = g.transpose(x)?;
        let normed = g.layer_norm(xt, lg, lb)?;
        x = g.transpose(normed)?;
    }
    let mut feats = g.transpose(x)?;
    let pw = binder.get(g, "encoder.proj.weight")?;
    let pb = binder.get(g, "encoder.proj.bias")?;
    feats = g.linear(feats, pw, pb)?;
    if config.adaptor_position == AdaptorPosition::Pos0 {
        feats = adapt_frequency(g, feats, target_fps)?;
    }
    for i in 0..config.transformer_layers {
        feats = transformer_block(g, binder, &format!("encoder.tx{i}"), feats, config.heads)?;
    }
    let lng = binder.get(g, "encoder.ln_out.gamma")?;
    let lnb = binder.get(g, "encoder.ln_out.beta")?;
    Ok(g.layer_norm(feats, lng, lnb)?)
}

/// PIE draw: in train mode the label is replaced by the pivot with
/// probability `pie_probability` before lookup. Per-sample.
pub fn effective_identity(
    config: &ModelConfig,
    identity_rows: usize,
    label: u32,
    mode: &mut ForwardMode<'_>,
) -> Result<u32, ModelError> {
    if label as usize >= identity_rows {
        return Err(ModelError::UnknownIdentity(label, identity_rows));
    }
    let pivot = (identity_rows - 1) as u32;
    Ok(match mode {
        ForwardMode::Infer => label,
        ForwardMode::Train { rng } => {
            if rng.bernoulli(config.pie_probability) {
                pivot
            } else {
                label
            }
        }
    })
}

/// Identity embedding lookup (after any PIE replacement).
pub fn embed_identity<T: Real>(
    g: &mut Graph<T>,
    binder: &mut Binder<'_, T>,
    label: u32,
) -> Result<Var, ModelError> {
    let table = binder.get(g, "identity.table")?;
    Ok(g.embedding(table, &[label as usize])?)
}

/// Identity embedding broadcast-added to every feature frame, then the
/// non-autoregressive decoder body produces per-frame hidden states.
pub fn decode_motion<T: Real>(
    g: &mut Graph<T>,
    binder: &mut Binder<'_, T>,
    config: &ModelConfig,
    features: Var,
    identity_embedding: Var,
) -> Result<Var, ModelError> {
    let w_in = binder.get(g, "decoder.in.weight")?;
    let b_in = binder.get(g, "decoder.in.bias")?;
    let mut x = g.linear(features, w_in, b_in)?;
    let emb_row = g.reshape(identity_embedding, vec![config.embed_dim])?;
    x = g.add_row_broadcast(x, emb_row)?;
    match config.decoder_arch {
        DecoderArch::Tcn => {
            let mut h = x;
            for i in 0..config.decoder_layers {
                let lg = binder.get(g, &format!("decoder.block{i}.ln.gamma"))?;
                let lb = binder.get(g, &format!("decoder.block{i}.ln.beta"))?;
                let w = binder.get(g, &format!("decoder.block{i}.weight"))?;
                let b = binder.get(g, &format!("decoder.block{i}.bias"))?;
                let dilation = 1usize << i.min(16);
                let normed = g.layer_norm(h, lg, lb)?;
                let nt = g.transpose(normed)?;
                let c = g.conv1d(nt, w, b, 1, dilation, crate::numerics::Padding::Same)?;
                let ct = g.transpose(c)?;
                let a = g.gelu(ct);
                h = g.add(h, a)?;
            }
            Ok(h)
        }
        DecoderArch::Transformer => {
            let mut h = x;
            for i in 0..config.decoder_layers {
                h = transformer_block(g, binder, &format!("decoder.tx{i}"), h, config.heads)?;
            }
            let lng = binder.get(g, "decoder.ln_out.gamma")?;
            let lnb = binder.get(g, "decoder.ln_out.beta")?;
            Ok(g.layer_norm(h, lng, lnb)?)
        }
    }
}

/// One linear head per convention; only the selected head is evaluated.
pub fn head_forward<T: Real>(
    g: &mut Graph<T>,
    binder: &mut Binder<'_, T>,
    hidden: Var,
    convention_id: u32,
) -> Result<Var, ModelError> {
    let w = binder.get(g, &format!("head.{convention_id}.weight"))?;
    let b = binder.get(g, &format!("head.{convention_id}.bias"))?;
    Ok(g.linear(hidden, w, b)?)
}

pub struct ForwardOutput {
    /// `[frames, head_dim]` native head output.
    pub native: Var,
    /// `[frames, 3V]` derived vertices in the scaled training space.
    pub vertices: Var,
    /// Identity label after any PIE replacement.
    pub effective_identity: u32,
    /// Parameter name -> graph leaf, for gradient routing.
    pub bound: BTreeMap<String, Var>,
}

/// Full pipeline: encode, adapt to the convention frame rate, embed
/// identity, decode, head, derive vertices.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    config: &ModelConfig,
    registry: &[AnnotationConvention],
    bases: &BTreeMap<u32, PcaBasis>,
    audio: &[f32],
    identity: u32,
    convention_id: u32,
    identity_rows: usize,
    mut mode: ForwardMode<'_>,
) -> Result<ForwardOutput, ModelError> {
    let conv = registry
        .iter()
        .find(|c| c.id == convention_id)
        .ok_or(ModelError::UnknownConvention(convention_id))?;
    let mut binder = Binder::new(params);
    let feats = encode_audio(g, &mut binder, config, audio, conv.fps)?;
    let adapted = if config.adaptor_position == AdaptorPosition::Pos1 {
        adapt_frequency(g, feats, conv.fps)?
    } else {
        feats
    };
    let label = effective_identity(config, identity_rows, identity, &mut mode)?;
    let emb = embed_identity(g, &mut binder, label)?;
    let hidden = decode_motion(g, &mut binder, config, adapted, emb)?;
    let native = head_forward(g, &mut binder, hidden, convention_id)?;
    let basis = bases.get(&convention_id);
    if conv.uses_pca() && basis.is_none() {
        return Err(ModelError::MissingBasis(convention_id));
    }
    let vertices = derive_vertices_graph(g, native, conv, basis)?;
    Ok(ForwardOutput { native, vertices, effective_identity: label, bound: binder.into_bound() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{build_conventions, SynthSpec};

    fn desk_config() -> ModelConfig {
        ModelConfig::default()
    }

    fn tiny_registry() -> Vec<AnnotationConvention> {
        build_conventions(&SynthSpec::default())
    }

    #[test]
    fn default_config_is_valid_and_strides_multiply_to_sample_rate() {
        let c = desk_config();
        c.validate().unwrap();
        let prod: usize = c.tcn_strides.iter().product();
        assert_eq!(prod as u32 * FEATURE_HZ, c.sample_rate);
    }

    #[test]
    fn config_text_round_trips() {
        let mut c = desk_config();
        c.decoder_channels = 128;
        c.embed_dim = 128;
        c.adaptor_position = AdaptorPosition::Pos0;
        c.pie_probability = 0.25;
        let text = c.to_text();
        let back = ModelConfig::from_text(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_config_key_is_rejected_by_name() {
        let err = ModelConfig::from_text("frobnicate=1\n").unwrap_err();
        assert!(err.to_string().contains("frobnicate"));
    }

    #[test]
    fn two_seconds_of_audio_give_100_feature_frames() {
        let config = desk_config();
        let registry = tiny_registry();
        let params = init_params(&config, &registry, 13, 7);
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(&params);
        let audio = vec![0.1f32; 32000];
        let feats = encode_audio(&mut g, &mut binder, &config, &audio, 25).unwrap();
        assert_eq!(g.shape_of(feats), &[100, config.dim]);
    }

    #[test]
    fn doubling_clip_length_doubles_frame_count() {
        let config = desk_config();
        let registry = tiny_registry();
        let params = init_params(&config, &registry, 13, 7);
        let count = |n: usize| {
            let mut g = Graph::<f32>::new();
            let mut binder = Binder::new(&params);
            let audio = vec![0.05f32; n];
            let f = encode_audio(&mut g, &mut binder, &config, &audio, 25).unwrap();
            g.shape_of(f)[0] as i64
        };
        let a = count(16000);
        let b = count(32000);
        assert!((b - 2 * a).abs() <= 1, "{a} vs {b}");
    }

    #[test]
    fn zero_waveform_gives_constant_bias_driven_features() {
        let config = desk_config();
        let registry = tiny_registry();
        let params = init_params(&config, &registry, 13, 7);
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(&params);
        let audio = vec![0.0f32; 16000];
        let feats = encode_audio(&mut g, &mut binder, &config, &audio, 25).unwrap();
        let vals = g.value(feats);
        let dim = config.dim;
        let first = &vals[0..dim];
        for row in 1..g.shape_of(feats)[0] {
            for c in 0..dim {
                assert!((vals[row * dim + c] - first[c]).abs() < 1e-5, "row {row} differs at {c}");
            }
        }
    }

    #[test]
    fn clip_shorter_than_receptive_field_errors() {
        let config = desk_config();
        let registry = tiny_registry();
        let params = init_params(&config, &registry, 13, 7);
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(&params);
        let audio = vec![0.0f32; config.encoder_receptive_field() - 1];
        assert!(matches!(
            encode_audio(&mut g, &mut binder, &config, &audio, 25),
            Err(ModelError::AudioTooShort { .. })
        ));
    }

    #[test]
    fn adaptor_is_identity_at_50_and_preserves_endpoints() {
        let mut g = Graph::<f32>::new();
        let rows: Vec<Vec<f32>> = (0..100).map(|i| vec![i as f32, -(i as f32)]).collect();
        let x = g.leaf_owned(Tensor::from_rows(&rows).unwrap());
        let same = adapt_frequency(&mut g, x, 50).unwrap();
        assert_eq!(same, x);
        for fps in [25u32, 30] {
            let y = adapt_frequency(&mut g, x, fps).unwrap();
            let t_out = adapted_len(100, fps);
            assert_eq!(g.shape_of(y)[0], t_out);
            let vals = g.value(y);
            assert_eq!(vals[0], 0.0);
            assert_eq!(vals[(t_out - 1) * 2], 99.0, "fps {fps} endpoint");
        }
    }

    #[test]
    fn adaptor_length_rule_on_random_pairs() {
        let mut rng = Rng::new(99);
        for _ in 0..50 {
            let count = 2 + rng.below(300);
            let fps = 1 + rng.below(80) as u32;
            let expect = ((count as f64 * fps as f64 / 50.0).round_ties_even() as usize).max(1);
            assert_eq!(adapted_len(count, fps), expect);
        }
    }

    #[test]
    fn pie_replacement_fraction_near_ten_percent() {
        let config = desk_config();
        let mut rng = Rng::new(123);
        let rows = 13usize;
        let pivot = (rows - 1) as u32;
        let mut replaced = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let mut mode = ForwardMode::Train { rng: &mut rng };
            let label = effective_identity(&config, rows, 3, &mut mode).unwrap();
            if label == pivot {
                replaced += 1;
            }
        }
        let fraction = replaced as f64 / draws as f64;
        assert!((0.09..=0.11).contains(&fraction), "fraction {fraction}");
    }

    #[test]
    fn pie_probability_zero_never_replaces_and_infer_uses_label_as_is() {
        let mut config = desk_config();
        config.pie_probability = 0.0;
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let mut mode = ForwardMode::Train { rng: &mut rng };
            assert_eq!(effective_identity(&config, 13, 4, &mut mode).unwrap(), 4);
        }
        let mut mode = ForwardMode::Infer;
        assert_eq!(effective_identity(&config, 13, 12, &mut mode).unwrap(), 12);
        assert!(matches!(
            effective_identity(&config, 13, 13, &mut mode),
            Err(ModelError::UnknownIdentity(13, 13))
        ));
    }

    #[test]
    fn decoder_keeps_frame_count_for_both_architectures() {
        let registry = tiny_registry();
        for arch in [DecoderArch::Tcn, DecoderArch::Transformer] {
            let mut config = desk_config();
            config.decoder_arch = arch;
            let params = init_params(&config, &registry, 13, 7);
            let mut g = Graph::<f32>::new();
            let mut binder = Binder::new(&params);
            let feats = g.leaf_owned(Tensor::full(vec![17, config.dim], 0.1));
            let emb = g.leaf_owned(Tensor::full(vec![1, config.embed_dim], 0.05));
            let hidden = decode_motion(&mut g, &mut binder, &config, feats, emb).unwrap();
            assert_eq!(g.shape_of(hidden), &[17, config.decoder_channels], "{arch:?}");
        }
    }

    #[test]
    fn forward_produces_consistent_shapes_and_only_binds_selected_head() {
        let config = desk_config();
        let registry = tiny_registry();
        let params = init_params(&config, &registry, 13, 7);
        let conv0 = &registry[0];
        let dim = 3 * conv0.vertex_count;
        let retained = conv0.pca_components;
        let mut rng = Rng::new(1);
        let frames = crate::ipca::synthetic_low_rank(40, dim, 4, 0.01, &mut rng);
        let basis = crate::ipca::fit_exact(
            &frames,
            dim,
            retained,
            crate::ipca::BasisProvenance::TrainSplit,
        )
        .unwrap();
        let mut bases = BTreeMap::new();
        bases.insert(0u32, basis);
        let audio = vec![0.1f32; 32000];
        let mut g = Graph::<f32>::new();
        let out = forward(
            &mut g,
            &params,
            &config,
            &registry,
            &bases,
            &audio,
            0,
            0,
            13,
            ForwardMode::Infer,
        )
        .unwrap();
        // 2 s at 25 fps.
        assert_eq!(g.shape_of(out.native), &[50, retained]);
        assert_eq!(g.shape_of(out.vertices), &[50, dim]);
        assert!(out.bound.keys().any(|k| k == "head.0.weight"));
        assert!(!out.bound.keys().any(|k| k.starts_with("head.1.")));
        assert!(!out.bound.keys().any(|k| k.starts_with("head.2.")));
        let mut g2 = Graph::<f32>::new();
        let out2 = forward(
            &mut g2,
            &params,
            &config,
            &registry,
            &bases,
            &audio,
            0,
            0,
            13,
            ForwardMode::Infer,
        )
        .unwrap();
        assert_eq!(g.value(out.vertices), g2.value(out2.vertices));
    }

    #[test]
    fn missing_basis_for_pca_head_errors() {
        let config = desk_config();
        let registry = tiny_registry();
        let params = init_params(&config, &registry, 13, 7);
        let bases = BTreeMap::new();
        let audio = vec![0.1f32; 16000];
        let mut g = Graph::<f32>::new();
        assert!(matches!(
            forward(&mut g, &params, &config, &registry, &bases, &audio, 0, 0, 13, ForwardMode::Infer),
            Err(ModelError::MissingBasis(0))
        ));
    }

    #[test]
    fn pos0_and_pos1_agree_on_output_frame_count() {
        let registry = tiny_registry();
        let mut bases = BTreeMap::new();
        let conv0 = &registry[0];
        let dim = 3 * conv0.vertex_count;
        let mut rng = Rng::new(2);
        let frames = crate::ipca::synthetic_low_rank(40, dim, 4, 0.01, &mut rng);
        bases.insert(
            0u32,
            crate::ipca::fit_exact(
                &frames,
                dim,
                conv0.pca_components,
                crate::ipca::BasisProvenance::TrainSplit,
            )
            .unwrap(),
        );
        let audio = vec![0.07f32; 24000];
        let mut counts = Vec::new();
        for pos in [AdaptorPosition::Pos0, AdaptorPosition::Pos1] {
            let mut config = desk_config();
            config.adaptor_position = pos;
            let params = init_params(&config, &registry, 13, 7);
            let mut g = Graph::<f32>::new();
            let out = forward(
                &mut g,
                &params,
                &config,
                &registry,
                &bases,
                &audio,
                1,
                0,
                13,
                ForwardMode::Infer,
            )
            .unwrap();
            counts.push(g.shape_of(out.native)[0]);
        }
        assert_eq!(counts[0], counts[1]);
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let config = desk_config();
        let registry = tiny_registry();
        let a = init_params(&config, &registry, 13, 42);
        let b = init_params(&config, &registry, 13, 42);
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.get(name).unwrap().data(), "{name}");
        }
    }
}
