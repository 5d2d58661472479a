//! Training objectives: source classification, target forecasting and
//! layer-wise correlation alignment, plus their weighted sum.

use serde::{Deserialize, Serialize};

use crate::backbone::{cross_entropy, BackboneModel, ForwardOutput};
use crate::data::forecast_pairs;
use crate::diff::{Binding, NodeId};
use crate::error::{Error, Result};
use crate::stats::{median_heuristic, Bandwidth};
use crate::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_corr: f64,
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_corr: 0.5, lambda_f: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_corr", self.lambda_corr), ("lambda_f", self.lambda_f)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::ConfigInvalid(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_f: f64,
    pub l_corr: f64,
    pub total: f64,
}

pub fn total_loss(l_c: f64, l_f: f64, l_corr: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("l_c", l_c), ("l_f", l_f), ("l_corr", l_corr)] {
        if !v.is_finite() {
            return Err(Error::NonFinitePart(name));
        }
    }
    Ok(LossBreakdown { l_c, l_f, l_corr, total: l_c + w.lambda_corr * l_corr + w.lambda_f * l_f })
}

/// Mean cross-entropy of the adapter-equipped network on labeled windows.
pub fn classification_loss(
    g: &mut Graph,
    bind: &mut Binding,
    model: &BackboneModel,
    windows: &[Tensor],
    labels: &[usize],
) -> Result<(NodeId, ForwardOutput)> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("classification batch"));
    }
    let out = model.forward(g, bind, windows)?;
    let loss = cross_entropy(g, out.logits, labels)?;
    Ok((loss, out))
}

/// Mean absolute error of the forecasting head predicting each next window
/// from its history window.
pub fn forecast_loss_on_pairs(
    g: &mut Graph,
    bind: &mut Binding,
    model: &BackboneModel,
    pairs: &[(Tensor, Tensor)],
) -> Result<(NodeId, ForwardOutput)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("forecast pairs"));
    }
    let history: Vec<Tensor> = pairs.iter().map(|(h, _)| h.clone()).collect();
    let out = model.forward(g, bind, &history)?;
    let pred = model.forecast(g, bind, &out)?;
    let d = model.config.n_vars;
    let mut future = Vec::with_capacity(pairs.len() * out.len * d);
    for (_, f) in pairs {
        if f.shape() != [d, out.len] {
            return Err(Error::shape(format!("future window {:?}, expected {d}×{}", f.shape(), out.len)));
        }
        future.extend(f.transpose()?.into_data());
    }
    let target = g.constant(Tensor::new([pairs.len() * out.len, d], future)?);
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff)?;
    Ok((g.mean(abs)?, out))
}

/// Forecasting loss over every history/next pair of every series.
pub fn forecasting_loss(
    g: &mut Graph,
    bind: &mut Binding,
    model: &BackboneModel,
    series: &[Tensor],
    window: usize,
    stride: usize,
) -> Result<(NodeId, ForwardOutput)> {
    let mut pairs = Vec::new();
    for s in series {
        pairs.extend(forecast_pairs(s, window, stride)?);
    }
    forecast_loss_on_pairs(g, bind, model, &pairs)
}

/// Per-window CorrVectors of stacked hidden states `(B·L) × d`: row `b` is
/// `vec(HᵀH/‖H‖²_F)` of window `b`, with channels as the correlated units.
pub fn corr_vectors(g: &mut Graph, stacked: NodeId, batch: usize, len: usize) -> Result<NodeId> {
    let shape = g.value(stacked).shape().to_vec();
    if shape.len() != 2 || shape[0] != batch * len {
        return Err(Error::shape(format!("hidden states {shape:?} for {batch} windows of {len}")));
    }
    let d = shape[1];
    let mut rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let h = g.slice(stacked, 0, b * len, (b + 1) * len)?;
        let norm = g.frobenius_sq(h)?;
        if !(g.value(norm).item().sqrt() > 1e-12) {
            return Err(Error::ZeroMatrix);
        }
        let ht = g.transpose(h)?;
        let gram = g.matmul(ht, h)?;
        let c = g.div(gram, norm)?;
        rows.push(g.reshape(c, [1, d * d])?);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat(&rows, 0)
    }
}

/// Biased squared MMD between the rows of `x` and `y` under a Gaussian
/// kernel. A median bandwidth is read from the current values and treated as
/// a constant by the gradient.
pub fn gaussian_mmd(g: &mut Graph, x: NodeId, y: NodeId, bandwidth: Bandwidth<f64>) -> Result<NodeId> {
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => return Err(Error::NonPositiveBandwidth(s)),
        Bandwidth::Median => {
            let (xv, yv) = (g.value(x), g.value(y));
            let pooled: Vec<&[f64]> = (0..xv.rows()).map(|i| xv.row(i)).chain((0..yv.rows()).map(|i| yv.row(i))).collect();
            median_heuristic(&pooled)
        }
    };
    let gamma = -1.0 / (2.0 * sigma * sigma);
    let mut mean_kernel = |a: NodeId, b: NodeId| -> Result<NodeId> {
        let d = g.pairwise_sqdist(a, b)?;
        let k = g.scale(d, gamma)?;
        let k = g.exp(k)?;
        g.mean(k)
    };
    let kxx = mean_kernel(x, x)?;
    let kyy = mean_kernel(y, y)?;
    let kxy = mean_kernel(x, y)?;
    let s = g.add(kxx, kyy)?;
    let cross = g.scale(kxy, 2.0)?;
    let v = g.sub(s, cross)?;
    g.relu(v)
}

/// `Σ_k MMD²(corr(H_s^k), corr(H_t^k))` over stacked per-layer hidden states.
pub fn correlation_alignment_from_hiddens(
    g: &mut Graph,
    source: &[NodeId],
    source_batch: usize,
    target: &[NodeId],
    target_batch: usize,
    len: usize,
    bandwidth: Bandwidth<f64>,
) -> Result<NodeId> {
    if source.len() != target.len() || source.is_empty() {
        return Err(Error::shape(format!("{} source layers against {} target layers", source.len(), target.len())));
    }
    let smaller = source_batch.min(target_batch);
    if smaller < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: smaller });
    }
    let mut total: Option<NodeId> = None;
    for (&hs, &ht) in source.iter().zip(target) {
        let cs = corr_vectors(g, hs, source_batch, len)?;
        let ct = corr_vectors(g, ht, target_batch, len)?;
        let m = gaussian_mmd(g, cs, ct, bandwidth)?;
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Source hidden states are taken before each adapter, target hidden states
/// after it.
pub fn correlation_alignment_loss(
    g: &mut Graph,
    source: &ForwardOutput,
    target: &ForwardOutput,
    bandwidth: Bandwidth<f64>,
) -> Result<NodeId> {
    if source.len != target.len {
        return Err(Error::shape(format!("window lengths {} and {}", source.len, target.len)));
    }
    correlation_alignment_from_hiddens(
        g,
        &source.pre_adapter,
        source.batch,
        &target.post_adapter,
        target.batch,
        source.len,
        bandwidth,
    )
}
