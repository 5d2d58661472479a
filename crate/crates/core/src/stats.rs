//! Correlation structures, divergences and two-sample tests.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::NdArray;
use crate::data::MtsDataset;
use crate::error::{Error, Result};
use crate::linalg::spectral_norm_symmetric;
use crate::scalar::Real;

pub const DEGENERATE_VARIANCE: f64 = 1e-12;
pub const SIGNIFICANCE: f64 = 0.05;
/// Largest smaller-side size for which the exact null distribution is used.
pub const EXACT_MAX_SIDE: usize = 8;
pub const SW_PROJECTIONS: usize = 64;
pub const SW_QUANTILES: usize = 100;

/// Element-wise mean and `(1/n)·Σ (Xᵢ − mean)(Xᵢ − mean)ᵀ` of equally shaped
/// D×T samples. Returns `(covariance, mean)`.
pub fn covariance<T: Real>(samples: &[NdArray<T>]) -> Result<(NdArray<T>, NdArray<T>)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let shape = samples[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!("samples must be D×T matrices, got {shape:?}")));
    }
    if let Some(bad) = samples.iter().find(|s| s.shape() != shape.as_slice()) {
        return Err(Error::shape(format!("sample shape {:?} differs from {shape:?}", bad.shape())));
    }
    let (d, t) = (shape[0], shape[1]);
    let inv_n = T::one() / T::count(n);
    let mut mean = NdArray::zeros(shape.clone());
    for s in samples {
        for (m, &v) in mean.data_mut().iter_mut().zip(s.data()) {
            *m += v * inv_n;
        }
    }
    let mut cov = NdArray::zeros([d, d]);
    let mut centered = vec![T::zero(); d * t];
    for s in samples {
        for ((c, &v), &m) in centered.iter_mut().zip(s.data()).zip(mean.data()) {
            *c = v - m;
        }
        for i in 0..d {
            for j in i..d {
                let ri = &centered[i * t..(i + 1) * t];
                let rj = &centered[j * t..(j + 1) * t];
                let dot: T = ri.iter().zip(rj).map(|(&a, &b)| a * b).sum();
                let v = cov.at(i, j) + dot * inv_n;
                cov.set(i, j, v);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov.set(i, j, cov.at(j, i));
        }
    }
    Ok((cov, mean))
}

/// Covariance of one D×T sample with its T columns as observations.
pub fn column_covariance<T: Real>(x: &NdArray<T>) -> Result<NdArray<T>> {
    if x.ndim() != 2 {
        return Err(Error::shape(format!("expected a D×T sample, got {:?}", x.shape())));
    }
    let (d, t) = (x.rows(), x.cols());
    let columns: Vec<NdArray<T>> = (0..t)
        .map(|j| NdArray::new([d, 1], (0..d).map(|i| x.at(i, j)).collect()).expect("column shape"))
        .collect();
    covariance(&columns).map(|(c, _)| c)
}

/// `diag(Σ)^{-1/2} Σ diag(Σ)^{-1/2}`.
pub fn corr_structure<T: Real>(cov: &NdArray<T>) -> Result<NdArray<T>> {
    if cov.ndim() != 2 || cov.rows() != cov.cols() {
        return Err(Error::shape(format!("covariance must be square, got {:?}", cov.shape())));
    }
    let d = cov.rows();
    let mut inv_sd = Vec::with_capacity(d);
    for i in 0..d {
        let v = cov.at(i, i);
        if !(v > T::lit(DEGENERATE_VARIANCE)) {
            return Err(Error::DegenerateVariance { index: i, value: v.to_f64_lossy() });
        }
        inv_sd.push(T::one() / v.sqrt());
    }
    let mut out = NdArray::zeros([d, d]);
    for i in 0..d {
        for j in 0..d {
            let v = if i == j { T::one() } else { cov.at(i, j) * inv_sd[i] * inv_sd[j] };
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// `vec(H·Hᵀ / ‖H‖²_F)`, row-major.
pub fn corr_vector<T: Real>(h: &NdArray<T>) -> Result<Vec<T>> {
    if h.ndim() != 2 {
        return Err(Error::shape(format!("expected a matrix, got {:?}", h.shape())));
    }
    let norm = h.frobenius_sq();
    if !(norm.sqrt() > T::lit(1e-12)) {
        return Err(Error::ZeroMatrix);
    }
    let gram = h.matmul(&h.transpose()?)?;
    Ok(gram.data().iter().map(|&v| v / norm).collect())
}

/// Kernel bandwidth selection for [`mmd_squared`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth<T> {
    Fixed(T),
    /// σ = median pairwise Euclidean distance of the pooled samples.
    Median,
}

pub fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance over distinct pairs of the pooled set; falls back
/// to 1 when the pool is degenerate (a single point or all points equal).
pub fn median_heuristic<T: Real>(pooled: &[&[T]]) -> T {
    let mut d: Vec<T> = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return T::one();
    }
    d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let k = d.len();
    let med = if k % 2 == 1 { d[k / 2] } else { (d[k / 2 - 1] + d[k / 2]) * T::lit(0.5) };
    if med > T::lit(1e-12) {
        med
    } else {
        T::one()
    }
}

/// Biased (V-statistic) squared MMD under the Gaussian kernel
/// `exp(−‖x−y‖²/(2σ²))`, clamped at zero.
pub fn mmd_squared<T: Real, V: AsRef<[T]>>(xs: &[V], ys: &[V], bandwidth: Bandwidth<T>) -> Result<T> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::EmptyInput("mmd sample set"));
    }
    let dim = xs[0].as_ref().len();
    if xs.iter().chain(ys).any(|v| v.as_ref().len() != dim) {
        return Err(Error::shape("mmd vectors differ in length"));
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => {
            if !(s > T::zero()) {
                return Err(Error::NonPositiveBandwidth(s.to_f64_lossy()));
            }
            s
        }
        Bandwidth::Median => {
            let pooled: Vec<&[T]> = xs.iter().chain(ys).map(|v| v.as_ref()).collect();
            median_heuristic(&pooled)
        }
    };
    let gamma = T::one() / (T::lit(2.0) * sigma * sigma);
    let mean_kernel = |a: &[V], b: &[V]| -> T {
        let mut s = T::zero();
        for x in a {
            for y in b {
                s += (-sq_dist(x.as_ref(), y.as_ref()) * gamma).exp();
            }
        }
        s / (T::count(a.len()) * T::count(b.len()))
    };
    let v = mean_kernel(xs, xs) + mean_kernel(ys, ys) - T::lit(2.0) * mean_kernel(xs, ys);
    Ok(v.max(T::zero()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub u_statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub method: TestMethod,
}

impl HypothesisResult {
    fn new(u: f64, p: f64, method: TestMethod) -> Self {
        let p_value = p.clamp(0.0, 1.0);
        Self { u_statistic: u, p_value, reject: p_value < SIGNIFICANCE, method }
    }
}

/// Average ranks (1-based) of the pooled values plus the tie-group sizes.
fn average_ranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&i, &j| pooled[i].partial_cmp(&pooled[j]).expect("finite values"));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && pooled[idx[end]] == pooled[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        if end - start > 1 {
            ties.push(end - start);
        }
        start = end;
    }
    (ranks, ties)
}

/// Null distribution of U for sizes (n, m): `P(U = k)` for k in 0..=n·m,
/// from the Gaussian binomial generating function, normalized at each step.
pub fn exact_u_distribution(n: usize, m: usize) -> Vec<f64> {
    let (n, m) = if n <= m { (n, m) } else { (m, n) };
    let mut p = vec![1.0];
    for i in 1..=n {
        let deg = i * m;
        let mut q = vec![0.0; deg + 1];
        // divide by (1 − x^i) as a power series truncated at `deg`
        for k in 0..=deg {
            let prev = if k >= i { q[k - i] } else { 0.0 };
            q[k] = p.get(k).copied().unwrap_or(0.0) + prev;
        }
        // multiply by (1 − x^{m+i})
        for k in (m + i..=deg).rev() {
            q[k] -= q[k - m - i];
        }
        let scale = i as f64 / (m + i) as f64;
        p = q.into_iter().map(|v| (v * scale).max(0.0)).collect();
    }
    p
}

/// Two-sided Mann-Whitney U test; U is reported for `a`.
pub fn mann_whitney_u<T: Real>(a: &[T], b: &[T]) -> Result<HypothesisResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("mann-whitney sample"));
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).map(|v| v.to_f64_lossy()).collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite value in mann-whitney sample".into()));
    }
    let (ranks, ties) = average_ranks(&pooled);
    let rank_sum_a: f64 = ranks[..n].iter().sum();
    let u = rank_sum_a - (n * (n + 1)) as f64 / 2.0;

    if n.min(m) <= EXACT_MAX_SIDE && ties.is_empty() {
        let dist = exact_u_distribution(n, m);
        let k = u.round() as usize;
        let lower: f64 = dist[..=k].iter().sum();
        let upper: f64 = dist[k..].iter().sum();
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(HypothesisResult::new(u, p, TestMethod::Exact));
    }

    let (nf, mf) = (n as f64, m as f64);
    let total = nf + mf;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (total * (total - 1.0));
    let var = nf * mf / 12.0 * ((total + 1.0) - tie_term);
    if !(var > 0.0) {
        return Ok(HypothesisResult::new(u, 1.0, TestMethod::NormalApprox));
    }
    let z = ((u - nf * mf / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    let p = statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
    Ok(HypothesisResult::new(u, p, TestMethod::NormalApprox))
}

/// Mean of all entries of one sample's own correlation matrix.
pub fn sample_mean_correlation(x: &NdArray<f64>) -> Result<f64> {
    Ok(corr_structure(&column_covariance(x)?)?.mean())
}

/// Mann-Whitney U on per-sample mean correlations of the two domains.
pub fn correlation_shift_test(source: &MtsDataset, target: &MtsDataset) -> Result<HypothesisResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if (source.n_vars, source.n_steps) != (target.n_vars, target.n_steps) {
        return Err(Error::shape(format!(
            "domain shapes differ: {}×{} vs {}×{}",
            source.n_vars, source.n_steps, target.n_vars, target.n_steps
        )));
    }
    let scores = |ds: &MtsDataset| -> Result<Vec<f64>> {
        ds.samples.iter().map(|s| sample_mean_correlation(&s.values)).collect()
    };
    mann_whitney_u(&scores(source)?, &scores(target)?)
}

/// Seeded unit directions in `dim` dimensions.
pub fn random_directions<T: Real>(dim: usize, count: usize, seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            out.push(v.iter().map(|x| T::lit(x / norm)).collect());
        }
    }
    out
}

/// Linear-interpolated quantile of sorted values at level `p ∈ [0, 1]`.
pub fn quantile_sorted<T: Real>(sorted: &[T], p: T) -> T {
    let pos = p * T::count(sorted.len() - 1);
    let lo = pos.floor();
    let i = lo.to_usize().unwrap_or(0).min(sorted.len() - 1);
    let j = (i + 1).min(sorted.len() - 1);
    let frac = pos - lo;
    sorted[i] + (sorted[j] - sorted[i]) * frac
}

/// 1-D Wasserstein-1 distance on `levels` matched quantiles.
pub fn wasserstein_1d<T: Real>(xs: &mut [T], ys: &mut [T], levels: usize) -> T {
    let cmp = |a: &T, b: &T| a.partial_cmp(b).expect("finite projections");
    xs.sort_by(cmp);
    ys.sort_by(cmp);
    let denom = T::count(levels.max(2) - 1);
    let mut s = T::zero();
    for k in 0..levels {
        let p = if levels == 1 { T::lit(0.5) } else { T::count(k) / denom };
        s += (quantile_sorted(xs, p) - quantile_sorted(ys, p)).abs();
    }
    s / T::count(levels)
}

/// Mean over seeded random projections of the 1-D Wasserstein-1 distance.
pub fn sliced_wasserstein<T: Real, V: AsRef<[T]>>(xs: &[V], ys: &[V], projections: usize, seed: u64) -> Result<T> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::EmptyInput("wasserstein sample set"));
    }
    if projections == 0 {
        return Err(Error::ConfigInvalid("sliced wasserstein needs at least one projection".into()));
    }
    let dim = xs[0].as_ref().len();
    if xs.iter().chain(ys).any(|v| v.as_ref().len() != dim) {
        return Err(Error::shape("wasserstein vectors differ in length"));
    }
    let dot = |a: &[T], b: &[T]| -> T { a.iter().zip(b).map(|(&x, &y)| x * y).sum() };
    let mut total = T::zero();
    for dir in random_directions::<T>(dim, projections, seed) {
        let mut px: Vec<T> = xs.iter().map(|v| dot(v.as_ref(), &dir)).collect();
        let mut py: Vec<T> = ys.iter().map(|v| dot(v.as_ref(), &dir)).collect();
        total += wasserstein_1d(&mut px, &mut py, SW_QUANTILES);
    }
    Ok(total / T::count(projections))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairDistanceOptions {
    pub projections: usize,
    pub seed: u64,
    /// Added once per label present in only one domain; `None` skips them.
    pub missing_label_penalty: Option<f64>,
    /// Standardize every variable of every sample over time first.
    pub normalize: bool,
}

impl Default for PairDistanceOptions {
    fn default() -> Self {
        Self { projections: SW_PROJECTIONS, seed: 0, missing_label_penalty: None, normalize: false }
    }
}

fn flatten_sample(x: &NdArray<f64>, normalize: bool) -> Vec<f64> {
    if !normalize {
        return x.data().to_vec();
    }
    let t = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / t as f64;
        let sd = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64).sqrt().max(1e-12);
        out.extend(row.iter().map(|v| (v - mean) / sd));
    }
    out
}

/// Sum over shared labels of the sliced Wasserstein distance between the
/// class-conditional sample sets, each sample flattened to a D·T vector.
pub fn domain_pair_distance(source: &MtsDataset, target: &MtsDataset, opts: &PairDistanceOptions) -> Result<f64> {
    let s_labels = source.label_set();
    let t_labels = target.label_set();
    let shared: Vec<usize> = s_labels.intersection(&t_labels).copied().collect();
    if shared.is_empty() {
        return Err(Error::NoSharedLabels);
    }
    let mut total = 0.0;
    for &y in &shared {
        let xs: Vec<Vec<f64>> = source.class_samples(y).map(|s| flatten_sample(&s.values, opts.normalize)).collect();
        let ys: Vec<Vec<f64>> = target.class_samples(y).map(|s| flatten_sample(&s.values, opts.normalize)).collect();
        total += sliced_wasserstein(&xs, &ys, opts.projections, opts.seed)?;
    }
    for y in s_labels.symmetric_difference(&t_labels) {
        match opts.missing_label_penalty {
            Some(p) => total += p,
            None => info!("label {y} present in only one of {} / {}; skipped", source.domain_id, target.domain_id),
        }
    }
    Ok(total)
}

/// Norm applied to the matrix differences in [`coral_terms`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixNorm {
    Spectral,
    Frobenius,
}

fn matrix_norm<T: Real>(m: &NdArray<T>, norm: MatrixNorm) -> Result<T> {
    match norm {
        MatrixNorm::Spectral => spectral_norm_symmetric(m),
        MatrixNorm::Frobenius => Ok(m.frobenius_sq().sqrt()),
    }
}

/// Decomposition of the second-moment gap of unit-normalized vectors into a
/// covariance part and a mean part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoralTerms<T> {
    /// ‖Cov_s − Cov_t‖.
    pub coral: T,
    /// ‖μ_s μ_sᵀ − μ_t μ_tᵀ‖.
    pub mean: T,
    /// ‖E[ĥ_s ĥ_sᵀ] − E[ĥ_t ĥ_tᵀ]‖, bounded by `coral + mean`.
    pub second_moment_gap: T,
}

struct Moments<T> {
    mean: Vec<T>,
    second: NdArray<T>,
}

fn normalized_moments<T: Real, V: AsRef<[T]>>(hs: &[V], dim: usize) -> Result<Moments<T>> {
    let inv_n = T::one() / T::count(hs.len());
    let mut mean = vec![T::zero(); dim];
    let mut second = NdArray::zeros([dim, dim]);
    for h in hs {
        let h = h.as_ref();
        let norm = h.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::zero()) {
            return Err(Error::ZeroVector);
        }
        let u: Vec<T> = h.iter().map(|&v| v / norm).collect();
        for i in 0..dim {
            mean[i] += u[i] * inv_n;
            for j in 0..dim {
                let v = second.at(i, j) + u[i] * u[j] * inv_n;
                second.set(i, j, v);
            }
        }
    }
    Ok(Moments { mean, second })
}

fn outer<T: Real>(a: &[T]) -> NdArray<T> {
    let n = a.len();
    let mut m = NdArray::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, a[i] * a[j]);
        }
    }
    m
}

/// CORAL and mean-alignment terms over unit-normalized vectors. The
/// covariances are population covariances, so `E[ĥĥᵀ] = Cov + μμᵀ` exactly
/// and `second_moment_gap ≤ coral + mean` is the triangle inequality.
pub fn coral_terms<T: Real, V: AsRef<[T]>>(hs: &[V], ht: &[V], norm: MatrixNorm) -> Result<CoralTerms<T>> {
    if hs.is_empty() || ht.is_empty() {
        return Err(Error::EmptyInput("coral sample set"));
    }
    let dim = hs[0].as_ref().len();
    if hs.iter().chain(ht).any(|v| v.as_ref().len() != dim) {
        return Err(Error::shape("coral vectors differ in length"));
    }
    let s = normalized_moments(hs, dim)?;
    let t = normalized_moments(ht, dim)?;
    let (mm_s, mm_t) = (outer(&s.mean), outer(&t.mean));
    let cov_s = s.second.sub(&mm_s)?;
    let cov_t = t.second.sub(&mm_t)?;
    Ok(CoralTerms {
        coral: matrix_norm(&cov_s.sub(&cov_t)?, norm)?,
        mean: matrix_norm(&mm_s.sub(&mm_t)?, norm)?,
        second_moment_gap: matrix_norm(&s.second.sub(&t.second)?, norm)?,
    })
}

/// Linear-kernel MMD between the correlation matrices `ĥĥᵀ` of vectorized
/// hidden states: `‖E[ĥ_s ĥ_sᵀ] − E[ĥ_t ĥ_tᵀ]‖_F`, computed through the
/// kernel trick `⟨ĥĥᵀ, ĝĝᵀ⟩_F = (ĥᵀĝ)²` rather than the explicit matrices.
pub fn linear_corr_mmd<T: Real, V: AsRef<[T]>>(hs: &[V], ht: &[V]) -> Result<T> {
    if hs.is_empty() || ht.is_empty() {
        return Err(Error::EmptyInput("mmd sample set"));
    }
    let unit = |set: &[V]| -> Result<Vec<Vec<T>>> {
        set.iter()
            .map(|h| {
                let h = h.as_ref();
                let norm = h.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > T::zero() {
                    Ok(h.iter().map(|&v| v / norm).collect())
                } else {
                    Err(Error::ZeroVector)
                }
            })
            .collect()
    };
    let (us, ut) = (unit(hs)?, unit(ht)?);
    let k = |a: &[Vec<T>], b: &[Vec<T>]| -> T {
        let mut s = T::zero();
        for x in a {
            for y in b {
                let d: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
                s += d * d;
            }
        }
        s / (T::count(a.len()) * T::count(b.len()))
    };
    Ok((k(&us, &us) + k(&ut, &ut) - T::lit(2.0) * k(&us, &ut)).max(T::zero()).sqrt())
}
