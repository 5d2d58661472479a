//! Compact post-norm Transformer encoder with classification and forecasting
//! heads, the linear bottleneck adapter, and CKPT1 checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cats::{cats_forward, xavier, CatsAdapter};
use crate::diff::{adam_step, AdamConfig, AdamState, Binding, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::{Graph, Params, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub window_len: usize,
    pub n_vars: usize,
    pub n_classes: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("window_len", self.window_len),
            ("n_vars", self.n_vars),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::ConfigInvalid(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::ConfigInvalid(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Embedding, encoder blocks and both heads.
    pub fn backbone_param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let embed = self.n_vars * d + d;
        let attention = 4 * (d * d + d);
        let norms = 2 * 2 * d;
        let ffn = d * f + f + f * d + d;
        let head_c = d * self.n_classes + self.n_classes;
        let head_f = d * self.n_vars + self.n_vars;
        embed + self.n_blocks * (attention + norms + ffn) + head_c + head_f
    }
}

/// `x·W + b` with `W: in×out` and `b: 1×out`.
#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init(params: &mut Params, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: params.add(format!("{prefix}.w"), xavier(rng, [fan_in, fan_out], fan_in, fan_out)),
            b: params.add(format!("{prefix}.b"), Tensor::zeros([1, fan_out])),
        }
    }

    fn forward(&self, g: &mut Graph, bind: &mut Binding, params: &Params, x: NodeId) -> Result<NodeId> {
        let w = bind.node(g, params, self.w);
        let b = bind.node(g, params, self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    fn init(params: &mut Params, prefix: &str, d: usize) -> Self {
        Self {
            gamma: params.add(format!("{prefix}.gamma"), Tensor::full([1, d], 1.0)),
            beta: params.add(format!("{prefix}.beta"), Tensor::zeros([1, d])),
        }
    }

    /// Normalizes each row over its last axis.
    fn forward(&self, g: &mut Graph, bind: &mut Binding, params: &Params, x: NodeId) -> Result<NodeId> {
        let mean = g.mean_axis(x, 1)?;
        let centered = g.sub(x, mean)?;
        let sq = g.mul(centered, centered)?;
        let var = g.mean_axis(sq, 1)?;
        let eps = g.constant(Tensor::scalar(LN_EPS));
        let var = g.add(var, eps)?;
        let sd = g.sqrt(var)?;
        let normed = g.div(centered, sd)?;
        let gamma = bind.node(g, params, self.gamma);
        let beta = bind.node(g, params, self.beta);
        let y = g.mul(normed, gamma)?;
        g.add(y, beta)
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

/// Residual bottleneck: `H + GELU(H·W_down)·W_up`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineAdapter {
    pub w_down: ParamId,
    pub w_up: ParamId,
    pub width: usize,
    pub rank: usize,
}

impl BaselineAdapter {
    pub fn new(params: &mut Params, prefix: &str, w_down: Tensor, w_up: Tensor) -> Result<Self> {
        let (width, rank) = (w_down.rows(), w_down.cols());
        if w_down.ndim() != 2 || w_up.shape() != [rank, width] {
            return Err(Error::shape(format!("adapter weights {:?} / {:?}", w_down.shape(), w_up.shape())));
        }
        Ok(Self {
            w_down: params.add(format!("{prefix}.w_down"), w_down),
            w_up: params.add(format!("{prefix}.w_up"), w_up),
            width,
            rank,
        })
    }

    /// Xavier down-projection, zero up-projection.
    pub fn init(params: &mut Params, prefix: &str, width: usize, rank: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(params, prefix, xavier(rng, [width, rank], width, rank), Tensor::zeros([rank, width]))
    }

    pub fn param_count(&self) -> usize {
        2 * self.width * self.rank
    }
}

pub fn baseline_adapter_forward(
    g: &mut Graph,
    bind: &mut Binding,
    params: &Params,
    adapter: &BaselineAdapter,
    h: NodeId,
) -> Result<NodeId> {
    let shape = g.value(h).shape().to_vec();
    if shape.len() != 2 || shape[1] != adapter.width {
        return Err(Error::shape(format!("adapter of width {} got {shape:?}", adapter.width)));
    }
    let down = bind.node(g, params, adapter.w_down);
    let up = bind.node(g, params, adapter.w_up);
    let z = g.matmul(h, down)?;
    let z = g.gelu(z)?;
    let z = g.matmul(z, up)?;
    g.add(h, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    None,
    Linear,
    Cats,
}

impl std::str::FromStr for AdapterKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "linear" => Ok(Self::Linear),
            "cats" => Ok(Self::Cats),
            other => Err(format!("unknown adapter kind `{other}` (none, linear, cats)")),
        }
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Linear => "linear",
            Self::Cats => "cats",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adapter {
    Linear(BaselineAdapter),
    Cats(CatsAdapter),
}

impl Adapter {
    pub fn param_count(&self) -> usize {
        match self {
            Adapter::Linear(a) => a.param_count(),
            Adapter::Cats(a) => a.param_count(),
        }
    }
}

/// Graph nodes produced by one forward pass over a batch of windows. Hidden
/// states are stacked window after window as `(B·L) × d_model`.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub batch: usize,
    pub len: usize,
    /// Block outputs before their adapter.
    pub pre_adapter: Vec<NodeId>,
    /// Block outputs after their adapter (the same node when absent).
    pub post_adapter: Vec<NodeId>,
    /// Attention matrices, per block, window and head.
    pub attention: Vec<NodeId>,
    /// B × d_model.
    pub pooled: NodeId,
    /// B × n_classes.
    pub logits: NodeId,
}

impl ForwardOutput {
    pub fn last_hidden(&self) -> NodeId {
        *self.post_adapter.last().expect("at least one block")
    }
}

/// Sinusoidal table, `len × d`.
pub fn positional_table(len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros([len, d]);
    for t in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 * freq;
            pe.set(t, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

pub const GROUP_EMBED: &str = "embed.";
pub const GROUP_HEAD_C: &str = "head_c.";
pub const GROUP_HEAD_F: &str = "head_f.";
pub const GROUP_ADAPTER: &str = "adapter";

/// Transformer encoder over windows of shape D×L (variables × time).
#[derive(Debug, Clone)]
pub struct BackboneModel {
    pub config: BackboneConfig,
    pub params: Params,
    embed: Linear,
    blocks: Vec<Block>,
    head_c: Linear,
    head_f: Linear,
    pub adapters: Vec<Adapter>,
}

impl BackboneModel {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let (d, f) = (config.d_model, config.d_ff);
        let embed = Linear::init(&mut params, "embed", config.n_vars, d, &mut rng);
        let blocks = (0..config.n_blocks)
            .map(|k| {
                let p = format!("block{k}");
                Block {
                    q: Linear::init(&mut params, &format!("{p}.attn.q"), d, d, &mut rng),
                    k: Linear::init(&mut params, &format!("{p}.attn.k"), d, d, &mut rng),
                    v: Linear::init(&mut params, &format!("{p}.attn.v"), d, d, &mut rng),
                    o: Linear::init(&mut params, &format!("{p}.attn.o"), d, d, &mut rng),
                    ln1: LayerNorm::init(&mut params, &format!("{p}.ln1"), d),
                    ff1: Linear::init(&mut params, &format!("{p}.ff1"), d, f, &mut rng),
                    ff2: Linear::init(&mut params, &format!("{p}.ff2"), f, d, &mut rng),
                    ln2: LayerNorm::init(&mut params, &format!("{p}.ln2"), d),
                }
            })
            .collect();
        let head_c = Linear::init(&mut params, "head_c", d, config.n_classes, &mut rng);
        let head_f = Linear::init(&mut params, "head_f", d, config.n_vars, &mut rng);
        Ok(Self { config, params, embed, blocks, head_c, head_f, adapters: Vec::new() })
    }

    /// Registers one adapter after every block; CATS adapters attend over
    /// windows of `window_len` steps.
    pub fn attach_adapters(&mut self, kind: AdapterKind, rank: usize, taps: usize, window_len: usize, seed: u64) -> Result<()> {
        if !self.adapters.is_empty() {
            return Err(Error::ConfigInvalid("adapters already attached".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.d_model;
        for k in 0..self.config.n_blocks {
            let prefix = format!("{GROUP_ADAPTER}{k}");
            let a = match kind {
                AdapterKind::None => return Ok(()),
                AdapterKind::Linear => Adapter::Linear(BaselineAdapter::init(&mut self.params, &prefix, d, rank, &mut rng)?),
                AdapterKind::Cats => Adapter::Cats(CatsAdapter::init(&mut self.params, &prefix, d, window_len, taps, &mut rng)?),
            };
            self.adapters.push(a);
        }
        Ok(())
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.iter().map(Adapter::param_count).sum()
    }

    /// Excludes embedding, blocks and the classification head from training;
    /// the forecasting head and adapters stay trainable.
    pub fn freeze_backbone(&mut self) {
        self.params.set_all_trainable(false);
        self.params.set_trainable_prefix(GROUP_HEAD_F, true);
        self.params.set_trainable_prefix(GROUP_ADAPTER, true);
    }

    /// Trains everything except the forecasting head and adapters.
    pub fn set_pretraining_trainable(&mut self) {
        self.params.set_all_trainable(true);
        self.params.set_trainable_prefix(GROUP_HEAD_F, false);
        self.params.set_trainable_prefix(GROUP_ADAPTER, false);
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, windows: &[Tensor]) -> Result<ForwardOutput> {
        self.forward_with(g, bind, windows, &self.adapters)
    }

    /// Forward pass with an explicit adapter list: empty, or one per block.
    pub fn forward_with(&self, g: &mut Graph, bind: &mut Binding, windows: &[Tensor], adapters: &[Adapter]) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if !adapters.is_empty() && adapters.len() != cfg.n_blocks {
            return Err(Error::AdapterCountMismatch { len: cfg.n_blocks, got: adapters.len() });
        }
        let first = windows.first().ok_or(Error::EmptyInput("window batch"))?;
        let len = first.cols();
        if let Some(w) = windows.iter().find(|w| w.shape() != [cfg.n_vars, len]) {
            return Err(Error::shape(format!("window {:?} in a batch of {}×{len}", w.shape(), cfg.n_vars)));
        }
        let batch = windows.len();
        let (d, dh) = (cfg.d_model, cfg.head_dim());

        let mut stacked = Vec::with_capacity(batch * len * cfg.n_vars);
        for w in windows {
            stacked.extend(w.transpose()?.into_data());
        }
        let x = g.constant(Tensor::new([batch * len, cfg.n_vars], stacked)?);
        let pe = positional_table(len, d);
        let mut tiled = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            tiled.extend_from_slice(pe.data());
        }
        let pe = g.constant(Tensor::new([batch * len, d], tiled)?);
        let h = self.embed.forward(g, bind, &self.params, x)?;
        let mut h = g.add(h, pe)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut pre_adapter = Vec::with_capacity(cfg.n_blocks);
        let mut post_adapter = Vec::with_capacity(cfg.n_blocks);
        let mut attention = Vec::new();
        for (k, blk) in self.blocks.iter().enumerate() {
            let q = blk.q.forward(g, bind, &self.params, h)?;
            let kk = blk.k.forward(g, bind, &self.params, h)?;
            let v = blk.v.forward(g, bind, &self.params, h)?;
            let mut per_window = Vec::with_capacity(batch);
            for b in 0..batch {
                let (r0, r1) = (b * len, (b + 1) * len);
                let (qb, kb, vb) = (g.slice(q, 0, r0, r1)?, g.slice(kk, 0, r0, r1)?, g.slice(v, 0, r0, r1)?);
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for hd in 0..cfg.n_heads {
                    let (c0, c1) = (hd * dh, (hd + 1) * dh);
                    let qh = g.slice(qb, 1, c0, c1)?;
                    let kh = g.slice(kb, 1, c0, c1)?;
                    let vh = g.slice(vb, 1, c0, c1)?;
                    let kt = g.transpose(kh)?;
                    let s = g.matmul(qh, kt)?;
                    let s = g.scale(s, scale)?;
                    let a = g.softmax(s)?;
                    attention.push(a);
                    heads.push(g.matmul(a, vh)?);
                }
                per_window.push(if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? });
            }
            let attn = if batch == 1 { per_window[0] } else { g.concat(&per_window, 0)? };
            let attn = blk.o.forward(g, bind, &self.params, attn)?;
            let r = g.add(h, attn)?;
            let h1 = blk.ln1.forward(g, bind, &self.params, r)?;
            let f = blk.ff1.forward(g, bind, &self.params, h1)?;
            let f = g.gelu(f)?;
            let f = blk.ff2.forward(g, bind, &self.params, f)?;
            let r = g.add(h1, f)?;
            let out = blk.ln2.forward(g, bind, &self.params, r)?;
            pre_adapter.push(out);
            h = match adapters.get(k) {
                None => out,
                Some(Adapter::Linear(a)) => baseline_adapter_forward(g, bind, &self.params, a, out)?,
                Some(Adapter::Cats(a)) => {
                    let mut parts = Vec::with_capacity(batch);
                    for b in 0..batch {
                        let hb = g.slice(out, 0, b * len, (b + 1) * len)?;
                        parts.push(cats_forward(g, bind, &self.params, a, hb)?);
                    }
                    if batch == 1 {
                        parts[0]
                    } else {
                        g.concat(&parts, 0)?
                    }
                }
            };
            post_adapter.push(h);
        }
        let h3 = g.reshape(h, [batch, len, d])?;
        let pooled = g.mean_axis(h3, 1)?;
        let pooled = g.reshape(pooled, [batch, d])?;
        let logits = self.head_c.forward(g, bind, &self.params, pooled)?;
        Ok(ForwardOutput { batch, len, pre_adapter, post_adapter, attention, pooled, logits })
    }

    /// Per-step forecast `(B·L) × D` from the final hidden states.
    pub fn forecast(&self, g: &mut Graph, bind: &mut Binding, out: &ForwardOutput) -> Result<NodeId> {
        self.head_f.forward(g, bind, &self.params, out.last_hidden())
    }

    /// Logits for a batch, without gradients.
    pub fn logits(&self, windows: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new(0);
        let mut bind = Binding::new();
        let out = self.forward(&mut g, &mut bind, windows)?;
        Ok(g.value(out.logits).clone())
    }

    /// Class index per window; ties go to the lowest index.
    pub fn predict(&self, windows: &[Tensor]) -> Result<Vec<usize>> {
        let logits = self.logits(windows)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of `logits: B×C` against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} rows of logits", labels.len())));
    }
    let mut onehot = Tensor::zeros([b, c]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, n_classes: c });
        }
        onehot.set(i, y, -1.0 / b as f64);
    }
    let lp = g.log_softmax(logits)?;
    let w = g.constant(onehot);
    let picked = g.mul(lp, w)?;
    g.sum(picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Supervised training of embedding, blocks and classification head on
/// labeled source windows. Returns the mean loss of every epoch.
pub fn pretrain_source(model: &mut BackboneModel, windows: &[Tensor], labels: &[usize], opts: &PretrainOptions) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if windows.len() != labels.len() {
        return Err(Error::shape(format!("{} windows, {} labels", windows.len(), labels.len())));
    }
    if opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::ConfigInvalid("batch size and learning rate must be positive".into()));
    }
    model.set_pretraining_trainable();
    let mut state = AdamState::for_params(&model.params);
    let adam = AdamConfig::with_lr(opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new(opts.seed);
            let mut bind = Binding::new();
            let out = model.forward(&mut g, &mut bind, &batch)?;
            let loss = cross_entropy(&mut g, out.logits, &ys)?;
            total += g.value(loss).item() * chunk.len() as f64;
            g.backpropagate(loss)?;
            bind.pull_grads(&g, &mut model.params);
            adam_step(&mut model.params, &mut state, &adam)?;
        }
        curve.push(total / windows.len() as f64);
    }
    Ok(curve)
}

const CKPT_MAGIC: &[u8; 5] = b"CKPT1";

/// Serializes every parameter as `(name, shape, f64 LE data)` records.
pub fn checkpoint_bytes(params: &Params) -> Result<Vec<u8>> {
    let u32_of = |v: usize| u32::try_from(v).map_err(|_| Error::ShapeOverflow(format!("{v} does not fit u32")));
    let mut buf = CKPT_MAGIC.to_vec();
    buf.extend_from_slice(&u32_of(params.len())?.to_le_bytes());
    for p in params.iter() {
        buf.extend_from_slice(&u32_of(p.name.len())?.to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&u32_of(p.value.ndim())?.to_le_bytes());
        for &dim in p.value.shape() {
            buf.extend_from_slice(&u32_of(dim)?.to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(params: &Params, path: &Path) -> Result<()> {
    fs::File::create(path)?.write_all(&checkpoint_bytes(params)?)?;
    Ok(())
}

/// Parsed records of a checkpoint file.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::TruncatedFile("checkpoint".into()))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(5).ok() != Some(CKPT_MAGIC.as_slice()) {
        return Err(Error::BadMagic { expected: "CKPT1" });
    }
    let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let count = read_u32(take(4)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let nlen = read_u32(take(4)?);
        let name = String::from_utf8(take(nlen)?.to_vec()).map_err(|_| Error::CheckpointMismatch("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(take(4)?);
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(read_u32(take(4)?));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::ShapeOverflow(format!("{name}: {shape:?}")))?;
        let raw = take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Loads values into an existing store; names and shapes must match exactly.
pub fn load_checkpoint(params: &mut Params, path: &Path) -> Result<()> {
    let records = parse_checkpoint(&fs::read(path)?)?;
    if records.len() != params.len() {
        return Err(Error::CheckpointMismatch(format!("file has {} parameters, model has {}", records.len(), params.len())));
    }
    for (name, value) in records {
        let id = params.find(&name).ok_or_else(|| Error::CheckpointMismatch(format!("unknown parameter `{name}`")))?;
        let p = params.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::CheckpointMismatch(format!("`{name}` has shape {:?}, model expects {:?}", value.shape(), p.value.shape())));
        }
        p.value = value;
    }
    Ok(())
}
