//! Pretraining, adapter adaptation, voting inference and the experiment
//! drivers built on them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    parse_checkpoint, pretrain_source, AdapterKind, BackboneConfig, BackboneModel, PretrainOptions, GROUP_ADAPTER,
};
use crate::cats::{count_parameters, gat_forward, xavier, GatLayer, ParamCounts};
use crate::data::{slice_windows, window_at, MtsDataset};
use crate::diff::{adam_step, AdamConfig, AdamState, Binding, NodeId};
use crate::error::{Error, Result};
use crate::losses::{classification_loss, correlation_alignment_loss, forecast_loss_on_pairs, total_loss, LossBreakdown, LossWeights};
use crate::stats::{correlation_shift_test, Bandwidth, HypothesisResult};
use crate::{Graph, Params, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub window_len: usize,
    pub vote_count: usize,
    pub kernel: usize,
    /// Adapter learning rate.
    pub lr: f64,
    pub pretrain_lr: f64,
    pub lambda_corr: f64,
    pub lambda_f: f64,
    pub pretrain_epochs: usize,
    pub adapt_steps: usize,
    pub batch_size: usize,
    pub stride: usize,
    pub seed: u64,
    /// Steps between loss log lines.
    pub log_every: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub adapter: AdapterKind,
    /// Bottleneck width of the linear adapter.
    pub adapter_rank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window_len: 48,
            vote_count: 16,
            kernel: 5,
            lr: 1e-4,
            pretrain_lr: 1e-3,
            lambda_corr: 0.5,
            lambda_f: 0.5,
            pretrain_epochs: 10,
            adapt_steps: 1000,
            batch_size: 32,
            stride: 8,
            seed: 0,
            log_every: 100,
            d_model: 128,
            d_ff: 256,
            n_blocks: 3,
            n_heads: 4,
            adapter: AdapterKind::Cats,
            adapter_rank: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.window_len < self.kernel {
            return bad(format!("window_len {} is shorter than kernel {}", self.window_len, self.kernel));
        }
        if self.vote_count == 0 {
            return bad("vote_count must be at least 1".into());
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size < 2 || self.stride == 0 || self.adapter_rank == 0 {
            return bad("batch_size must be ≥ 2; stride and adapter_rank ≥ 1".into());
        }
        self.weights().validate()?;
        self.backbone(1, 1).validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_corr: self.lambda_corr, lambda_f: self.lambda_f }
    }

    pub fn backbone(&self, n_vars: usize, n_classes: usize) -> BackboneConfig {
        BackboneConfig {
            d_model: self.d_model,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            window_len: self.window_len,
            n_vars,
            n_classes,
        }
    }

    /// Short hex digest of the serialized config, used in report file names.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..6].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Every window of every sample at the configured stride, with its label.
pub fn labeled_windows(ds: &MtsDataset, window: usize, stride: usize) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let labels = ds.labels()?;
    let mut ws = Vec::new();
    let mut ys = Vec::new();
    for (s, &y) in ds.samples.iter().zip(&labels) {
        for (_, w) in slice_windows(&s.values, window, stride)? {
            ws.push(w);
            ys.push(y);
        }
    }
    Ok((ws, ys))
}

/// Builds a backbone for `source` and trains it on labeled source windows.
pub fn pretrain(source: &MtsDataset, cfg: &TrainConfig) -> Result<(BackboneModel, Vec<f64>)> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = BackboneModel::new(cfg.backbone(source.n_vars, source.n_classes), cfg.seed)?;
    let (ws, ys) = labeled_windows(source, cfg.window_len, cfg.stride)?;
    let opts = PretrainOptions { epochs: cfg.pretrain_epochs, lr: cfg.pretrain_lr, batch_size: cfg.batch_size, seed: cfg.seed };
    let curve = pretrain_source(&mut model, &ws, &ys, &opts)?;
    Ok((model, curve))
}

fn grid_start(rng: &mut ChaCha8Rng, last_start: usize, stride: usize) -> usize {
    stride * rng.random_range(0..=last_start / stride)
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub model: BackboneModel,
    pub losses: Vec<LossBreakdown>,
}

/// Attaches fresh adapters to a copy of `pretrained`, freezes everything but
/// the adapters and forecasting head, and minimizes the weighted objective.
/// Target samples arrive as bare series.
pub fn adapt(pretrained: &BackboneModel, source: &MtsDataset, target: &[Tensor], cfg: &TrainConfig) -> Result<Adapted> {
    cfg.validate()?;
    if !pretrained.adapters.is_empty() {
        return Err(Error::ConfigInvalid("adapt expects a model without adapters".into()));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let l = cfg.window_len;
    let weights = cfg.weights();
    let use_f = weights.lambda_f > 0.0;
    let use_corr = weights.lambda_corr > 0.0;
    let needed = if use_f { 2 * l + 1 } else { l };
    let src_len = source.n_steps;
    if src_len < l {
        return Err(Error::WindowTooLong { window: l, len: src_len });
    }
    if let Some(short) = target.iter().find(|s| s.cols() < needed) {
        return Err(Error::SeriesTooShort { len: short.cols(), required: needed });
    }
    let labels = source.labels()?;

    let mut model = pretrained.clone();
    model.attach_adapters(cfg.adapter, cfg.adapter_rank, cfg.kernel, l, cfg.seed.wrapping_add(1))?;
    model.freeze_backbone();
    let mut state = AdamState::for_params(&model.params);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut losses = Vec::with_capacity(cfg.adapt_steps);

    for step in 0..cfg.adapt_steps {
        let mut src_w = Vec::with_capacity(cfg.batch_size);
        let mut src_y = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..source.len());
            let k = grid_start(&mut rng, src_len - l, cfg.stride);
            src_w.push(window_at(&source.samples[i].values, k, l));
            src_y.push(labels[i]);
        }
        let mut g = Graph::new(cfg.seed);
        let mut bind = Binding::new();
        let (l_c, out_s) = classification_loss(&mut g, &mut bind, &model, &src_w, &src_y)?;
        let mut l_f: Option<NodeId> = None;
        let mut l_corr: Option<NodeId> = None;
        if use_f || use_corr {
            let out_t = if use_f {
                let pairs: Vec<(Tensor, Tensor)> = (0..cfg.batch_size)
                    .map(|_| {
                        let s = &target[rng.random_range(0..target.len())];
                        let k = grid_start(&mut rng, s.cols() - 2 * l - 1, cfg.stride);
                        (window_at(s, k, l), window_at(s, k + l, l))
                    })
                    .collect();
                let (lf, out) = forecast_loss_on_pairs(&mut g, &mut bind, &model, &pairs)?;
                l_f = Some(lf);
                out
            } else {
                let ws: Vec<Tensor> = (0..cfg.batch_size)
                    .map(|_| {
                        let s = &target[rng.random_range(0..target.len())];
                        window_at(s, grid_start(&mut rng, s.cols() - l, cfg.stride), l)
                    })
                    .collect();
                model.forward(&mut g, &mut bind, &ws)?
            };
            if use_corr {
                l_corr = Some(correlation_alignment_loss(&mut g, &out_s, &out_t, Bandwidth::Median)?);
            }
        }
        let mut total = l_c;
        if let Some(n) = l_corr {
            let w = g.scale(n, weights.lambda_corr)?;
            total = g.add(total, w)?;
        }
        if let Some(n) = l_f {
            let w = g.scale(n, weights.lambda_f)?;
            total = g.add(total, w)?;
        }
        let value = |n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).item());
        let parts = total_loss(g.value(l_c).item(), value(l_f), value(l_corr), &weights)?;
        g.backpropagate(total)?;
        bind.pull_grads(&g, &mut model.params);
        adam_step(&mut model.params, &mut state, &adam)?;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!("step {} total {:.5} (l_c {:.5}, l_f {:.5}, l_corr {:.5})", step + 1, parts.total, parts.l_c, parts.l_f, parts.l_corr);
        }
        losses.push(parts);
    }
    Ok(Adapted { model, losses })
}

/// Modal class; ties go to the lowest index.
pub fn majority_vote(preds: &[usize]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in preds {
        *counts.entry(p).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == best).map(|(k, _)| k)
}

/// `m` window starts out of `T−L+1`, without replacement when enough exist.
pub fn vote_starts(t_len: usize, window: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if t_len < window {
        return Err(Error::SeriesTooShort { len: t_len, required: window });
    }
    let positions = t_len - window + 1;
    if positions >= m {
        Ok(sample_indices(rng, positions, m).into_vec())
    } else {
        Ok((0..m).map(|_| rng.random_range(0..positions)).collect())
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 2);
    rng
}

pub fn predict_with_voting(model: &BackboneModel, values: &Tensor, m: usize, window: usize, seed: u64) -> Result<usize> {
    let starts = vote_starts(values.cols(), window, m, &mut sample_rng(seed, 0))?;
    let windows: Vec<Tensor> = starts.iter().map(|&k| window_at(values, k, window)).collect();
    let preds = model.predict(&windows)?;
    Ok(majority_vote(&preds).expect("m ≥ 1"))
}

const EVAL_CHUNK: usize = 256;

/// Per-sample voted predictions; sample `i` draws its windows from a stream
/// fixed by `(seed, i)`.
pub fn predict_dataset(model: &BackboneModel, ds: &MtsDataset, m: usize, window: usize, seed: u64) -> Result<Vec<usize>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if m == 0 {
        return Err(Error::ConfigInvalid("vote count must be at least 1".into()));
    }
    // identical starts are classified once and counted with multiplicity
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    let mut owners: Vec<Vec<(usize, usize)>> = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let starts = vote_starts(s.values.cols(), window, m, &mut sample_rng(seed, i))?;
        let mut counted: BTreeMap<usize, usize> = BTreeMap::new();
        for k in starts {
            *counted.entry(k).or_default() += 1;
        }
        let mut mine = Vec::with_capacity(counted.len());
        for (k, c) in counted {
            mine.push((jobs.len(), c));
            jobs.push((i, k));
        }
        owners.push(mine);
    }
    let mut preds = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(EVAL_CHUNK) {
        let ws: Vec<Tensor> = chunk.iter().map(|&(i, k)| window_at(&ds.samples[i].values, k, window)).collect();
        preds.extend(model.predict(&ws)?);
    }
    Ok(owners
        .iter()
        .map(|mine| {
            let votes: Vec<usize> = mine.iter().flat_map(|&(j, c)| std::iter::repeat_n(preds[j], c)).collect();
            majority_vote(&votes).expect("m ≥ 1")
        })
        .collect())
}

pub fn evaluate(model: &BackboneModel, ds: &MtsDataset, m: usize, window: usize, seed: u64) -> Result<f64> {
    let labels = ds.labels()?;
    let preds = predict_dataset(model, ds, m, window, seed)?;
    Ok(preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    /// The pretrained backbone without adapters, same voting protocol.
    pub baseline_target_accuracy: f64,
    pub losses: Vec<LossBreakdown>,
    pub shift_test: HypothesisResult,
    pub param_counts: ParamCounts,
    pub seed: u64,
    pub config: TrainConfig,
}

pub fn model_param_counts(model: &BackboneModel) -> ParamCounts {
    let adapter_params = model.adapter_param_count();
    let backbone_params = model.config.backbone_param_count();
    ParamCounts { adapter_params, backbone_params, ratio: adapter_params as f64 / backbone_params as f64 }
}

/// Adapts a pretrained backbone and evaluates it on both domains. The target
/// labels are read only after adaptation, for scoring.
pub fn adapt_and_report(pretrained: &BackboneModel, source: &MtsDataset, target: &MtsDataset, cfg: &TrainConfig) -> Result<(Adapted, EvalReport)> {
    let adapted = adapt(pretrained, source, &target.series(), cfg)?;
    let (m, l, seed) = (cfg.vote_count, cfg.window_len, cfg.seed);
    let report = EvalReport {
        source_accuracy: evaluate(&adapted.model, source, m, l, seed)?,
        target_accuracy: evaluate(&adapted.model, target, m, l, seed)?,
        baseline_target_accuracy: evaluate(pretrained, target, m, l, seed)?,
        losses: adapted.losses.clone(),
        shift_test: correlation_shift_test(source, target)?,
        param_counts: model_param_counts(&adapted.model),
        seed,
        config: cfg.clone(),
    };
    Ok((adapted, report))
}

/// Rebuilds the model a checkpoint was saved from; adapters are attached when
/// the checkpoint holds adapter parameters.
pub fn model_from_checkpoint(cfg: &TrainConfig, n_vars: usize, n_classes: usize, path: &Path) -> Result<BackboneModel> {
    let records = parse_checkpoint(&fs::read(path)?)?;
    let mut model = BackboneModel::new(cfg.backbone(n_vars, n_classes), cfg.seed)?;
    if records.iter().any(|(name, _)| name.starts_with(GROUP_ADAPTER)) {
        model.attach_adapters(cfg.adapter, cfg.adapter_rank, cfg.kernel, cfg.window_len, 0)?;
    }
    if records.len() != model.params.len() {
        return Err(Error::CheckpointMismatch(format!("file has {} parameters, model has {}", records.len(), model.params.len())));
    }
    for (name, value) in records {
        let id = model.params.find(&name).ok_or_else(|| Error::CheckpointMismatch(format!("unknown parameter `{name}`")))?;
        let p = model.params.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::CheckpointMismatch(format!("`{name}` has shape {:?}, model expects {:?}", value.shape(), p.value.shape())));
        }
        p.value = value;
    }
    Ok(model)
}

pub fn loss_curve_csv(losses: &[LossBreakdown]) -> String {
    let mut s = String::from("step,l_c,l_f,l_corr,total\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{},{}", i + 1, l.l_c, l.l_f, l.l_corr, l.total);
    }
    s
}

/// Writes `report-<hash>-s<seed>.json` and `losses-<hash>-s<seed>.csv`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let stem = format!("{}-s{}", report.config.hash(), report.seed);
    let json = dir.join(format!("report-{stem}.json"));
    let csv = dir.join(format!("losses-{stem}.csv"));
    fs::write(&json, serde_json::to_string_pretty(report)?)?;
    fs::write(&csv, loss_curve_csv(&report.losses))?;
    Ok((json, csv))
}

pub const RUNG_NAMES: [&str; 7] =
    ["no-adapter", "linear-adapter", "correlation-loss", "cats-adapter", "window-slicing", "forecasting-loss", "max-voting"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRung {
    pub name: String,
    pub target_accuracy: f64,
}

/// The seven-step ladder from a vanilla frozen Transformer to the full
/// pipeline. The first four rungs classify whole series (window = T), the
/// rest use `cfg.window_len`; voting with `cfg.vote_count` windows is only
/// enabled on the last rung. Whole-series rungs shrink the batch so one step
/// covers about as many time steps as a batch of windows.
pub fn run_ablation(source: &MtsDataset, target: &MtsDataset, cfg: &TrainConfig) -> Result<Vec<AblationRung>> {
    cfg.validate()?;
    if source.n_steps != target.n_steps {
        return Err(Error::shape(format!("series lengths {} and {}", source.n_steps, target.n_steps)));
    }
    let full_batch = (cfg.batch_size * cfg.window_len / source.n_steps).max(2);
    let full = TrainConfig { window_len: source.n_steps, batch_size: full_batch, ..cfg.clone() };
    let (full_model, _) = pretrain(source, &full)?;
    let (win_model, _) = pretrain(source, cfg)?;
    let series = target.series();
    let adapted = |base: &BackboneModel, c: &TrainConfig| -> Result<BackboneModel> {
        if c.adapter == AdapterKind::None {
            Ok(base.clone())
        } else {
            Ok(adapt(base, source, &series, c)?.model)
        }
    };
    let cfgs = [
        TrainConfig { adapter: AdapterKind::None, lambda_corr: 0.0, lambda_f: 0.0, ..full.clone() },
        TrainConfig { adapter: AdapterKind::Linear, lambda_corr: 0.0, lambda_f: 0.0, ..full.clone() },
        TrainConfig { adapter: AdapterKind::Linear, lambda_f: 0.0, ..full.clone() },
        TrainConfig { adapter: AdapterKind::Cats, lambda_f: 0.0, ..full },
        TrainConfig { adapter: AdapterKind::Cats, lambda_f: 0.0, ..cfg.clone() },
        TrainConfig { adapter: AdapterKind::Cats, ..cfg.clone() },
    ];
    let mut rungs = Vec::with_capacity(RUNG_NAMES.len());
    let mut last = None;
    for (i, name) in RUNG_NAMES.iter().enumerate() {
        let started = std::time::Instant::now();
        // the last rung only switches on voting, so it reuses the previous model
        let acc = if i == 6 {
            let (model, c): &(BackboneModel, TrainConfig) = last.as_ref().expect("rung 6 ran");
            evaluate(model, target, cfg.vote_count, c.window_len, cfg.seed)?
        } else {
            let c = &cfgs[i];
            let model = adapted(if i < 4 { &full_model } else { &win_model }, c)?;
            let acc = evaluate(&model, target, 1, c.window_len, cfg.seed)?;
            last = Some((model, c.clone()));
            acc
        };
        log::info!("rung {} {name}: {acc:.4} in {:.1?}", i + 1, started.elapsed());
        rungs.push(AblationRung { name: name.to_string(), target_accuracy: acc });
    }
    Ok(rungs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatStudyConfig {
    pub widths: Vec<usize>,
    pub nodes: usize,
    pub features: usize,
    pub samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GatStudyConfig {
    fn default() -> Self {
        Self { widths: vec![8, 32, 128, 256], nodes: 8, features: 16, samples: 64, steps: 600, lr: 3e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatStudyRow {
    pub width: usize,
    pub relative_error: f64,
}

/// Fits `Y = A*·X` for a fixed random `A*` with one attention layer of node
/// feature width `F`: `Ŷ = GAT(X·P_in)·P_out`, all of `P_in`, `W`, `a` and
/// `P_out` trained jointly with Adam on the full batch.
pub fn run_gat_approx_study(cfg: &GatStudyConfig) -> Result<Vec<GatStudyRow>> {
    let (n, f, s) = (cfg.nodes, cfg.features, cfg.samples);
    if n == 0 || f == 0 || s == 0 || cfg.widths.is_empty() {
        return Err(Error::ConfigInvalid("study needs nodes, features, samples and widths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_a = (1.0 / n as f64).sqrt();
    let a_star = Tensor::new([n, n], (0..n * n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std_a).collect())?;
    let xs: Vec<Tensor> = (0..s)
        .map(|_| Tensor::new([n, f], (0..n * f).map(|_| rng.sample(rand_distr::StandardNormal)).collect()))
        .collect::<Result<_>>()?;
    let mut stacked_x = Vec::with_capacity(s * n * f);
    let mut stacked_y = Vec::with_capacity(s * n * f);
    for x in &xs {
        stacked_x.extend_from_slice(x.data());
        stacked_y.extend(a_star.matmul(x)?.into_data());
    }
    let x_all = Tensor::new([s * n, f], stacked_x)?;
    let y_all = Tensor::new([s * n, f], stacked_y)?;
    let y_norm = y_all.frobenius_sq();

    let mut rows = Vec::with_capacity(cfg.widths.len());
    for &width in &cfg.widths {
        let mut params = Params::new();
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(width as u64));
        let p_in = params.add("p_in", xavier(&mut init, [f, width], f, width));
        let gat = GatLayer::xavier(&mut params, "gat", width, &mut init)?;
        let p_out = params.add("p_out", xavier(&mut init, [width, f], width, f));
        let mut state = AdamState::for_params(&params);
        let adam = AdamConfig::with_lr(cfg.lr);
        let mut err = f64::NAN;
        for step in 0..=cfg.steps {
            let mut g = Graph::new(cfg.seed);
            let mut bind = Binding::new();
            let x = g.constant(x_all.clone());
            let pi = bind.node(&mut g, &params, p_in);
            let lifted = g.matmul(x, pi)?;
            let mut outs = Vec::with_capacity(s);
            for k in 0..s {
                let xk = g.slice(lifted, 0, k * n, (k + 1) * n)?;
                outs.push(gat_forward(&mut g, &mut bind, &params, &gat, xk)?);
            }
            let z = g.concat(&outs, 0)?;
            let po = bind.node(&mut g, &params, p_out);
            let pred = g.matmul(z, po)?;
            let target = g.constant(y_all.clone());
            let diff = g.sub(pred, target)?;
            let sq = g.frobenius_sq(diff)?;
            err = (g.value(sq).item() / y_norm).sqrt();
            if step == cfg.steps {
                break;
            }
            let loss = g.scale(sq, 1.0 / y_norm)?;
            g.backpropagate(loss)?;
            bind.pull_grads(&g, &mut params);
            adam_step(&mut params, &mut state, &adam)?;
        }
        log::info!("width {width}: relative error {err:.4}");
        rows.push(GatStudyRow { width, relative_error: err });
    }
    Ok(rows)
}

pub fn gat_study_csv(rows: &[GatStudyRow]) -> String {
    let mut s = String::from("width,relative_error\n");
    for r in rows {
        let _ = writeln!(s, "{},{}", r.width, r.relative_error);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub d_model: usize,
    pub window_len: usize,
    pub adapter_params: usize,
    pub backbone_params: usize,
    pub ratio: f64,
}

/// Closed-form counts over the grid `d_models × window_lens`, with the
/// feed-forward width tied to `2·d_model`.
pub fn run_scaling_study(base: &BackboneConfig, taps: usize, d_models: &[usize], window_lens: &[usize]) -> Result<Vec<ScalingRow>> {
    if d_models.is_empty() || window_lens.is_empty() {
        return Err(Error::EmptyInput("scaling sweep"));
    }
    let mut rows = Vec::with_capacity(d_models.len() * window_lens.len());
    for &d_model in d_models {
        for &window_len in window_lens {
            let cfg = BackboneConfig { d_model, d_ff: 2 * d_model, window_len, ..base.clone() };
            cfg.validate()?;
            let c = count_parameters(&cfg, taps);
            rows.push(ScalingRow { d_model, window_len, adapter_params: c.adapter_params, backbone_params: c.backbone_params, ratio: c.ratio });
        }
    }
    Ok(rows)
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut s = String::from("d_model,window_len,adapter_params,backbone_params,ratio\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.d_model, r.window_len, r.adapter_params, r.backbone_params, r.ratio);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, SyntheticDomainSpec};

    fn corr(d: usize, pairs: &[(usize, usize, f64)]) -> Tensor {
        let mut t = Tensor::identity(d);
        for &(i, j, r) in pairs {
            t.set(i, j, r);
            t.set(j, i, r);
        }
        t
    }

    fn domain(theta: f64, seed: u64, n: usize, t: usize) -> MtsDataset {
        let spec = SyntheticDomainSpec {
            domain_id: format!("d{seed}"),
            templates: vec![corr(3, &[(0, 1, 0.8)]), corr(3, &[(1, 2, -0.8)])],
            theta,
            noise_scale: 1.0,
            n_steps: t,
            seed,
            rotation_seed: 3,
        };
        generate_domain(&spec, n).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            window_len: 8,
            vote_count: 4,
            kernel: 3,
            lr: 1e-3,
            pretrain_lr: 3e-3,
            pretrain_epochs: 2,
            adapt_steps: 6,
            batch_size: 4,
            stride: 4,
            d_model: 8,
            d_ff: 16,
            n_blocks: 2,
            n_heads: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn voting_examples() {
        assert_eq!(majority_vote(&[2, 2, 2]), Some(2));
        assert_eq!(majority_vote(&[1, 1, 2]), Some(1));
        assert_eq!(majority_vote(&[1, 0]), Some(0));
        assert_eq!(majority_vote(&[3, 1, 3, 1]), Some(1));
        assert_eq!(majority_vote(&[]), None);
    }

    #[test]
    fn vote_starts_cover_all_positions_when_m_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = vote_starts(20, 8, 13, &mut rng).unwrap();
        s.sort();
        assert_eq!(s, (0..13).collect::<Vec<_>>());
        let s = vote_starts(8, 8, 5, &mut rng).unwrap();
        assert_eq!(s, vec![0; 5]);
        assert!(matches!(vote_starts(7, 8, 1, &mut rng), Err(Error::SeriesTooShort { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { kernel: 4, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { window_len: 3, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { vote_count: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lambda_f: -0.5, ..TrainConfig::default() }.validate().is_err());
        assert_ne!(TrainConfig::default().hash(), TrainConfig { seed: 1, ..TrainConfig::default() }.hash());
    }

    #[test]
    fn zero_steps_keep_baseline_accuracy() {
        let cfg = TrainConfig { adapt_steps: 0, ..tiny_cfg() };
        let (s, t) = (domain(0.0, 1, 6, 24), domain(1.0, 2, 6, 24));
        let (model, _) = pretrain(&s, &cfg).unwrap();
        let adapted = adapt(&model, &s, &t.series(), &cfg).unwrap();
        assert!(adapted.losses.is_empty());
        let a = evaluate(&adapted.model, &t, cfg.vote_count, cfg.window_len, 5).unwrap();
        let b = evaluate(&model, &t, cfg.vote_count, cfg.window_len, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adapt_updates_only_adapters_and_forecast_head() {
        let cfg = tiny_cfg();
        let (s, t) = (domain(0.0, 1, 6, 24), domain(1.0, 2, 6, 24));
        let (model, _) = pretrain(&s, &cfg).unwrap();
        let adapted = adapt(&model, &s, &t.series(), &cfg).unwrap();
        assert_eq!(adapted.losses.len(), cfg.adapt_steps);
        let mut moved = 0;
        for p in adapted.model.params.iter() {
            match model.params.find(&p.name) {
                Some(id) if p.name.starts_with("head_f.") => moved += usize::from(model.params.value(id) != &p.value),
                Some(id) => assert_eq!(model.params.value(id).data(), p.value.data(), "{} changed", p.name),
                None => assert!(p.name.starts_with(GROUP_ADAPTER)),
            }
        }
        assert_eq!(moved, 2);
        for l in &adapted.losses {
            assert!((l.total - (l.l_c + 0.5 * l.l_corr + 0.5 * l.l_f)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_skip_target_terms() {
        let cfg = TrainConfig { lambda_corr: 0.0, lambda_f: 0.0, ..tiny_cfg() };
        let (s, t) = (domain(0.0, 1, 4, 24), domain(1.0, 2, 4, 24));
        let (model, _) = pretrain(&s, &cfg).unwrap();
        // target series shorter than two windows are fine without the forecasting term
        let short: Vec<Tensor> = t.series().iter().map(|v| window_at(v, 0, 8)).collect();
        let adapted = adapt(&model, &s, &short, &cfg).unwrap();
        assert!(adapted.losses.iter().all(|l| l.l_corr == 0.0 && l.l_f == 0.0 && l.total == l.l_c));
        let cfg = tiny_cfg();
        assert!(matches!(adapt(&model, &s, &short, &cfg), Err(Error::SeriesTooShort { .. })));
    }

    #[test]
    fn reports_are_reproducible() {
        let cfg = tiny_cfg();
        let (s, t) = (domain(0.0, 1, 5, 24), domain(1.0, 2, 5, 24));
        let run = || {
            let (model, _) = pretrain(&s, &cfg).unwrap();
            adapt_and_report(&model, &s, &t, &cfg).unwrap().1
        };
        let (a, b) = (run(), run());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!((0.0..=1.0).contains(&a.target_accuracy));

        let dir = tempfile::tempdir().unwrap();
        let (json, csv) = write_report(dir.path(), &a).unwrap();
        let back: EvalReport = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), cfg.adapt_steps + 1);
    }

    #[test]
    fn voting_with_every_start_is_exhaustive() {
        let cfg = tiny_cfg();
        let s = domain(0.0, 1, 4, 20);
        let (model, _) = pretrain(&s, &cfg).unwrap();
        let positions = 20 - 8 + 1;
        for (i, sample) in s.samples.iter().enumerate() {
            let all: Vec<Tensor> = slice_windows(&sample.values, 8, 1).unwrap().into_iter().map(|(_, w)| w).collect();
            let want = majority_vote(&model.predict(&all).unwrap()).unwrap();
            assert_eq!(predict_with_voting(&model, &sample.values, positions, 8, i as u64).unwrap(), want);
        }
    }

    #[test]
    fn checkpoint_restores_adapted_model() {
        let cfg = tiny_cfg();
        let (s, t) = (domain(0.0, 1, 4, 24), domain(1.0, 2, 4, 24));
        let (model, _) = pretrain(&s, &cfg).unwrap();
        let adapted = adapt(&model, &s, &t.series(), &cfg).unwrap().model;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        crate::backbone::save_checkpoint(&adapted.params, &path).unwrap();
        let back = model_from_checkpoint(&cfg, 3, 2, &path).unwrap();
        let w: Vec<Tensor> = t.series().iter().map(|v| window_at(v, 0, 8)).collect();
        assert_eq!(back.logits(&w).unwrap(), adapted.logits(&w).unwrap());
    }

    #[test]
    fn ablation_has_seven_rungs() {
        let cfg = TrainConfig { adapt_steps: 2, pretrain_epochs: 1, ..tiny_cfg() };
        let (s, t) = (domain(0.0, 1, 4, 24), domain(1.0, 2, 4, 24));
        let rungs = run_ablation(&s, &t, &cfg).unwrap();
        assert_eq!(rungs.len(), 7);
        assert!(rungs.iter().all(|r| (0.0..=1.0).contains(&r.target_accuracy)));
    }

    #[test]
    fn gat_study_shape() {
        let cfg = GatStudyConfig { widths: vec![2, 4], samples: 4, steps: 3, ..GatStudyConfig::default() };
        let rows = run_gat_approx_study(&cfg).unwrap();
        assert_eq!(rows.iter().map(|r| r.width).collect::<Vec<_>>(), vec![2, 4]);
        assert!(rows.iter().all(|r| r.relative_error.is_finite() && r.relative_error > 0.0));
        assert_eq!(gat_study_csv(&rows).lines().count(), 3);
    }

    #[test]
    fn scaling_examples() {
        let base = TrainConfig::default().backbone(9, 6);
        let rows = run_scaling_study(&base, 5, &[128, 256, 512], &[48]).unwrap();
        let tdc = |d: usize| 2 * d * 6;
        assert_eq!(tdc(256), 2 * tdc(128));
        let attn = |d: usize| 4 * (d * d + d);
        let q = attn(256) as f64 / attn(128) as f64;
        assert!((q - 4.0).abs() < 0.05);
        assert!(rows.windows(2).all(|w| w[1].ratio < w[0].ratio));
        assert!(rows.iter().all(|r| r.ratio < 0.05));
        assert_eq!(run_scaling_study(&base, 5, &[64], &[24, 48]).unwrap().len(), 2);
    }
}
