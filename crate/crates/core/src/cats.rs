//! The CATS adapter: depthwise temporal convolutions around one graph-attention
//! layer over the hidden channels, with a residual connection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Binding, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::{Graph, Params, Tensor};

pub const DEFAULT_KERNEL: usize = 5;

/// Xavier-uniform matrix of the given shape.
pub fn xavier(rng: &mut ChaCha8Rng, shape: [usize; 2], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| rng.random_range(-a..=a)).collect()).expect("shape")
}

/// Depthwise convolution over time: one `r`-tap kernel and one bias per
/// channel, stride 1, padding `(r−1)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TdcLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub taps: usize,
}

impl TdcLayer {
    pub fn new(params: &mut Params, prefix: &str, kernel: Tensor, bias: Tensor) -> Result<Self> {
        let (channels, taps) = (kernel.rows(), kernel.cols());
        if kernel.ndim() != 2 || taps % 2 == 0 {
            return Err(Error::ConfigInvalid(format!("temporal kernel must be channels×odd, got {:?}", kernel.shape())));
        }
        if bias.shape() != [channels, 1] {
            return Err(Error::shape(format!("bias {:?} for {channels} channels", bias.shape())));
        }
        Ok(Self {
            kernel: params.add(format!("{prefix}.kernel"), kernel),
            bias: params.add(format!("{prefix}.bias"), bias),
            channels,
            taps,
        })
    }

    pub fn zeros(params: &mut Params, prefix: &str, channels: usize, taps: usize) -> Result<Self> {
        Self::new(params, prefix, Tensor::zeros([channels, taps]), Tensor::zeros([channels, 1]))
    }

    pub fn xavier(params: &mut Params, prefix: &str, channels: usize, taps: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(params, prefix, xavier(rng, [channels, taps], taps, taps), Tensor::zeros([channels, 1]))
    }

    pub fn padding(&self) -> usize {
        (self.taps - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        self.channels * (self.taps + 1)
    }
}

/// `x: channels × length` → same shape.
pub fn tdc_forward(g: &mut Graph, bind: &mut Binding, params: &Params, layer: &TdcLayer, x: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 || shape[0] != layer.channels {
        return Err(Error::shape(format!("temporal conv over {} channels got {shape:?}", layer.channels)));
    }
    let k = bind.node(g, params, layer.kernel);
    let b = bind.node(g, params, layer.bias);
    let y = g.conv1d_depthwise(x, k, layer.padding())?;
    g.add(y, b)
}

/// Single-head graph attention on a fully connected graph with self-loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatLayer {
    /// F×F feature transform.
    pub w: ParamId,
    /// 2F×1 attention vector `[a_src; a_dst]`.
    pub a: ParamId,
    pub features: usize,
}

impl GatLayer {
    pub fn new(params: &mut Params, prefix: &str, w: Tensor, a: Tensor) -> Result<Self> {
        let f = w.rows();
        if w.shape() != [f, f] || a.shape() != [2 * f, 1] {
            return Err(Error::shape(format!("attention weights {:?} / {:?}", w.shape(), a.shape())));
        }
        Ok(Self { w: params.add(format!("{prefix}.w"), w), a: params.add(format!("{prefix}.a"), a), features: f })
    }

    pub fn xavier(params: &mut Params, prefix: &str, features: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = xavier(rng, [features, features], features, features);
        let a = xavier(rng, [2 * features, 1], 2 * features, 1);
        Self::new(params, prefix, w, a)
    }

    pub fn param_count(&self) -> usize {
        self.features * self.features + 2 * self.features
    }
}

/// Attention coefficients and transformed features of a GAT layer.
#[derive(Debug, Clone, Copy)]
pub struct GatNodes {
    /// N×N, row-stochastic.
    pub alpha: NodeId,
    /// N×F rows `W·x_j`.
    pub z: NodeId,
    pub out: NodeId,
}

/// `out[i] = Σ_j α_ij W x_j`, `α_ij = softmax_j(LeakyReLU(a_srcᵀ W x_i + a_dstᵀ W x_j))`.
pub fn gat_forward_parts(g: &mut Graph, bind: &mut Binding, params: &Params, layer: &GatLayer, x: NodeId) -> Result<GatNodes> {
    let shape = g.value(x).shape().to_vec();
    let f = layer.features;
    if shape.len() != 2 || shape[1] != f || shape[0] == 0 {
        return Err(Error::shape(format!("graph attention with {f} features got nodes {shape:?}")));
    }
    let w = bind.node(g, params, layer.w);
    let a = bind.node(g, params, layer.a);
    let wt = g.transpose(w)?;
    let z = g.matmul(x, wt)?;
    let a_src = g.slice(a, 0, 0, f)?;
    let a_dst = g.slice(a, 0, f, 2 * f)?;
    let s_src = g.matmul(z, a_src)?;
    let s_dst = g.matmul(z, a_dst)?;
    let s_dst_t = g.transpose(s_dst)?;
    let scores = g.add(s_src, s_dst_t)?;
    let scores = g.leaky_relu(scores)?;
    let alpha = g.softmax(scores)?;
    let out = g.matmul(alpha, z)?;
    Ok(GatNodes { alpha, z, out })
}

pub fn gat_forward(g: &mut Graph, bind: &mut Binding, params: &Params, layer: &GatLayer, x: NodeId) -> Result<NodeId> {
    Ok(gat_forward_parts(g, bind, params, layer, x)?.out)
}

/// `φ(H) = H + TDC↑(GELU(GAT(TDC↓(H))))` over hidden channels as graph nodes
/// and window positions as node features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatsAdapter {
    pub tdc_down: TdcLayer,
    pub gat: GatLayer,
    pub tdc_up: TdcLayer,
}

impl CatsAdapter {
    /// Xavier initialization for the down convolution and the attention layer,
    /// zeros for the up convolution, so the adapter starts as the identity.
    pub fn init(params: &mut Params, prefix: &str, channels: usize, window_len: usize, taps: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            tdc_down: TdcLayer::xavier(params, &format!("{prefix}.tdc_down"), channels, taps, rng)?,
            gat: GatLayer::xavier(params, &format!("{prefix}.gat"), window_len, rng)?,
            tdc_up: TdcLayer::zeros(params, &format!("{prefix}.tdc_up"), channels, taps)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tdc_down.param_count() + self.gat.param_count() + self.tdc_up.param_count()
    }
}

/// `h: L × channels` → same shape.
pub fn cats_forward(g: &mut Graph, bind: &mut Binding, params: &Params, adapter: &CatsAdapter, h: NodeId) -> Result<NodeId> {
    let x = g.transpose(h)?;
    let y = tdc_forward(g, bind, params, &adapter.tdc_down, x)?;
    let y = gat_forward(g, bind, params, &adapter.gat, y)?;
    let y = g.gelu(y)?;
    let y = tdc_forward(g, bind, params, &adapter.tdc_up, y)?;
    let out = g.add(x, y)?;
    g.transpose(out)
}

/// Closed-form parameter counts for one model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub adapter_params: usize,
    pub backbone_params: usize,
    pub ratio: f64,
}

/// `K·(2·d_model·(r+1) + F² + 2F)` adapter parameters with `F = L`, against
/// the embedding, encoder blocks and both heads of the backbone.
pub fn count_parameters(cfg: &crate::backbone::BackboneConfig, taps: usize) -> ParamCounts {
    let d = cfg.d_model;
    let f = cfg.window_len;
    let per_adapter = 2 * d * (taps + 1) + f * f + 2 * f;
    let adapter_params = cfg.n_blocks * per_adapter;
    let backbone_params = cfg.backbone_param_count();
    ParamCounts { adapter_params, backbone_params, ratio: adapter_params as f64 / backbone_params as f64 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::check_gradients;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor {
        Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run_tdc(kernel: Tensor, bias: Tensor, x: &Tensor) -> Tensor {
        let mut p = Params::new();
        let layer = TdcLayer::new(&mut p, "t", kernel, bias).unwrap();
        let mut g = Graph::new(0);
        let mut b = Binding::new();
        let xn = g.constant(x.clone());
        let y = tdc_forward(&mut g, &mut b, &p, &layer, xn).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn centered_delta_is_identity() {
        let x = random(&mut rng(1), [3, 7]);
        let mut k = Tensor::zeros([3, 5]);
        (0..3).for_each(|c| k.set(c, 2, 1.0));
        assert_eq!(run_tdc(k, Tensor::zeros([3, 1]), &x), x);
        assert_eq!(run_tdc(Tensor::zeros([3, 5]), Tensor::zeros([3, 1]), &x).max_abs(), 0.0);
    }

    #[test]
    fn tdc_matches_direct_sum() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 2.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let y = run_tdc(k.clone(), Tensor::zeros([2, 1]), &x);
        for c in 0..2 {
            for t in 0..4 {
                let mut s = 0.0;
                for j in 0..3 {
                    let src = t as isize + j as isize - 1;
                    if (0..4).contains(&src) {
                        s += k.at(c, j) * x.at(c, src as usize);
                    }
                }
                assert_eq!(y.at(c, t), s);
            }
        }
    }

    #[test]
    fn tdc_channels_are_independent() {
        let mut r = rng(4);
        let k = random(&mut r, [3, 5]);
        let bias = random(&mut r, [3, 1]);
        let x = random(&mut r, [3, 9]);
        let mut x2 = x.clone();
        x2.set(1, 4, x2.at(1, 4) + 0.7);
        let (a, b) = (run_tdc(k.clone(), bias.clone(), &x), run_tdc(k, bias, &x2));
        for c in [0, 2] {
            assert_eq!(a.row(c), b.row(c));
        }
        assert_ne!(a.row(1), b.row(1));
    }

    /// Hand-rolled attention: e_ij = LeakyReLU(a·[Wx_i ‖ Wx_j]), softmax over j.
    fn gat_oracle(w: &Tensor, a: &Tensor, x: &Tensor) -> Tensor {
        let (n, f) = (x.rows(), x.cols());
        let wx: Vec<Vec<f64>> = (0..n).map(|i| (0..f).map(|r| (0..f).map(|c| w.at(r, c) * x.at(i, c)).sum()).collect()).collect();
        let mut out = Tensor::zeros([n, f]);
        for i in 0..n {
            let e: Vec<f64> = (0..n)
                .map(|j| {
                    let s: f64 = (0..f).map(|k| a.at(k, 0) * wx[i][k] + a.at(f + k, 0) * wx[j][k]).sum();
                    if s > 0.0 { s } else { 0.2 * s }
                })
                .collect();
            let z: f64 = e.iter().map(|v| v.exp()).sum();
            for j in 0..n {
                for k in 0..f {
                    out.set(i, k, out.at(i, k) + e[j].exp() / z * wx[j][k]);
                }
            }
        }
        out
    }

    fn run_gat(w: &Tensor, a: &Tensor, x: &Tensor) -> (Tensor, Tensor) {
        let mut p = Params::new();
        let layer = GatLayer::new(&mut p, "g", w.clone(), a.clone()).unwrap();
        let mut g = Graph::new(0);
        let mut b = Binding::new();
        let xn = g.constant(x.clone());
        let parts = gat_forward_parts(&mut g, &mut b, &p, &layer, xn).unwrap();
        (g.value(parts.out).clone(), g.value(parts.alpha).clone())
    }

    #[test]
    fn gat_matches_double_loop() {
        let w = Tensor::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.3]]).unwrap();
        let a = Tensor::new([4, 1], vec![0.2, -0.4, 0.7, 0.1]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 2.0], vec![0.5, 0.5]]).unwrap();
        let (out, alpha) = run_gat(&w, &a, &x);
        assert!(out.max_abs_diff(&gat_oracle(&w, &a, &x)) < 1e-14);
        for i in 0..3 {
            assert!((alpha.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gat_single_node_and_symmetric_nodes() {
        let mut r = rng(7);
        let w = random(&mut r, [3, 3]);
        let a = random(&mut r, [6, 1]);
        let x = random(&mut r, [1, 3]);
        let (out, alpha) = run_gat(&w, &a, &x);
        assert_eq!(alpha.data(), &[1.0]);
        assert!(out.max_abs_diff(&x.matmul(&w.transpose().unwrap()).unwrap()) < 1e-15);

        let same = Tensor::from_rows(&[x.row(0).to_vec(), x.row(0).to_vec(), x.row(0).to_vec()]).unwrap();
        let (out, alpha) = run_gat(&w, &a, &same);
        assert!(alpha.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(out.row(0), out.row(2));
    }

    #[test]
    fn init_adapter_is_identity() {
        let mut r = rng(3);
        let mut p = Params::new();
        let ad = CatsAdapter::init(&mut p, "adapter0", 6, 10, 5, &mut r).unwrap();
        for _ in 0..100 {
            let h = random(&mut r, [10, 6]);
            let mut g = Graph::new(0);
            let mut b = Binding::new();
            let hn = g.constant(h.clone());
            let y = cats_forward(&mut g, &mut b, &p, &ad, hn).unwrap();
            assert_eq!(g.value(y), &h);
        }
        let mut g = Graph::new(0);
        let mut b = Binding::new();
        let zero = g.constant(Tensor::zeros([10, 6]));
        let y = cats_forward(&mut g, &mut b, &p, &ad, zero).unwrap();
        assert_eq!(g.value(y).max_abs(), 0.0);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut r = rng(5);
        let (d, l, taps) = (3, 4, 3);
        let inputs = vec![
            random(&mut r, [l, d]),
            random(&mut r, [d, taps]),
            random(&mut r, [d, 1]),
            random(&mut r, [l, l]),
            random(&mut r, [2 * l, 1]),
            random(&mut r, [d, taps]),
            random(&mut r, [d, 1]),
        ];
        let check = check_gradients(
            |g, n| {
                let mut p = Params::new();
                let mut b = Binding::new();
                let ad = CatsAdapter {
                    tdc_down: TdcLayer::zeros(&mut p, "d", d, taps)?,
                    gat: GatLayer::new(&mut p, "g", Tensor::zeros([l, l]), Tensor::zeros([2 * l, 1]))?,
                    tdc_up: TdcLayer::zeros(&mut p, "u", d, taps)?,
                };
                // route every parameter to the graph inputs under test
                for (id, node) in [
                    (ad.tdc_down.kernel, n[1]),
                    (ad.tdc_down.bias, n[2]),
                    (ad.gat.w, n[3]),
                    (ad.gat.a, n[4]),
                    (ad.tdc_up.kernel, n[5]),
                    (ad.tdc_up.bias, n[6]),
                ] {
                    b.bind(id, node);
                }
                let y = cats_forward(g, &mut b, &p, &ad, n[0])?;
                g.sum(y)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(check.max_relative_error < 1e-4, "{}", check.max_relative_error);
    }

    #[test]
    fn single_layer_counts() {
        let mut p = Params::new();
        let t = TdcLayer::zeros(&mut p, "t", 128, 5).unwrap();
        assert_eq!(t.param_count(), 768);
        let g = GatLayer::xavier(&mut p, "g", 48, &mut rng(0)).unwrap();
        assert_eq!(g.param_count(), 2400);
        assert_eq!(p.scalar_count(), 768 + 2400);
    }
}
