//! Closed-form spectral reweighting between two Gaussian domains.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::NdArray;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, max_asymmetry, scale_columns};
use crate::scalar::Real;
use crate::stats::{corr_structure, covariance};

pub use crate::linalg::{symmetric_eigendecompose, SymmetricEigen};

pub const SINGULAR_EIGENVALUE: f64 = 1e-10;

/// Mean matrix (D×T) and D×D covariance shared by every column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec<T> {
    pub mean: NdArray<T>,
    pub covariance: NdArray<T>,
}

impl<T: Real> GaussianSpec<T> {
    pub fn new(mean: NdArray<T>, covariance: NdArray<T>) -> Result<Self> {
        let spec = Self { mean, covariance };
        spec.validate()?;
        Ok(spec)
    }

    /// Zero mean over `t` columns.
    pub fn centered(covariance: NdArray<T>, t: usize) -> Result<Self> {
        let d = covariance.rows();
        Self::new(NdArray::zeros([d, t]), covariance)
    }

    pub fn dim(&self) -> usize {
        self.covariance.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.covariance;
        if c.ndim() != 2 || c.rows() != c.cols() {
            return Err(Error::shape(format!("covariance must be square, got {:?}", c.shape())));
        }
        if self.mean.ndim() != 2 || self.mean.rows() != c.rows() {
            return Err(Error::shape(format!("mean {:?} does not match covariance {:?}", self.mean.shape(), c.shape())));
        }
        let asym = max_asymmetry(c);
        if asym > T::lit(1e-10) {
            return Err(Error::NotSymmetric(asym.to_f64_lossy()));
        }
        Ok(())
    }

    /// Per-variable mean over the T columns.
    pub fn row_mean(&self) -> Vec<T> {
        (0..self.mean.rows())
            .map(|i| self.mean.row(i).iter().copied().sum::<T>() / T::count(self.mean.cols()))
            .collect()
    }

    /// `n` draws, each a D×T matrix whose column j is `N(mean[:, j], Σ)`.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<NdArray<T>>> {
        let l = cholesky(&self.covariance)?;
        let (d, t) = (self.mean.rows(), self.mean.cols());
        let mut out = Vec::with_capacity(n);
        let mut z = vec![T::zero(); d];
        for _ in 0..n {
            let mut x = self.mean.clone();
            for j in 0..t {
                z.iter_mut().for_each(|v| *v = T::lit(StandardNormal.sample(rng)));
                for i in 0..d {
                    let e: T = (0..=i).map(|k| l.at(i, k) * z[k]).sum();
                    x.set(i, j, x.at(i, j) + e);
                }
            }
            out.push(x);
        }
        Ok(out)
    }
}

/// `Y = A·X + b`, with `b` broadcast over columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightMap<T> {
    pub matrix: NdArray<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ReweightMap<T> {
    pub fn identity(d: usize) -> Self {
        Self { matrix: NdArray::identity(d), bias: vec![T::zero(); d] }
    }

    pub fn apply(&self, x: &NdArray<T>) -> Result<NdArray<T>> {
        let mut y = self.matrix.matmul(x)?;
        for i in 0..y.rows() {
            for j in 0..y.cols() {
                let v = y.at(i, j) + self.bias[i];
                y.set(i, j, v);
            }
        }
        Ok(y)
    }
}

/// `A = U_s Λ_s^{1/2} Λ_t^{-1/2} U_tᵀ` with both spectra sorted descending,
/// and `b = (I − A)·m_t` where `m_t` is the per-variable mean of the target.
pub fn build_reweight<T: Real>(source: &GaussianSpec<T>, target: &GaussianSpec<T>) -> Result<ReweightMap<T>> {
    source.validate()?;
    target.validate()?;
    let d = target.dim();
    if source.dim() != d {
        return Err(Error::shape(format!("source dim {} vs target dim {d}", source.dim())));
    }
    let es = symmetric_eigendecompose(&source.covariance)?;
    let et = symmetric_eigendecompose(&target.covariance)?;
    let tmin = *et.values.last().expect("non-empty spectrum");
    if !(tmin > T::lit(SINGULAR_EIGENVALUE)) {
        return Err(Error::SingularTarget(tmin.to_f64_lossy()));
    }
    let smin = *es.values.last().expect("non-empty spectrum");
    if smin < -T::lit(SINGULAR_EIGENVALUE) {
        return Err(Error::NumericDomain(format!("source covariance has negative eigenvalue {smin}")));
    }
    let scale: Vec<T> = es.values.iter().zip(&et.values).map(|(&s, &t)| s.max(T::zero()).sqrt() / t.sqrt()).collect();
    let matrix = scale_columns(&es.vectors, &scale).matmul(&et.vectors.transpose()?)?;

    let m_t = target.row_mean();
    let bias = (0..d)
        .map(|i| m_t[i] - (0..d).map(|k| matrix.at(i, k) * m_t[k]).sum::<T>())
        .collect();
    Ok(ReweightMap { matrix, bias })
}

/// Empirical gaps between reweighted target draws and source draws, each
/// paired with the sampling-noise bound `5/√n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub corr_diff: f64,
    pub cov_diff: f64,
    pub mean_diff: f64,
    pub noise_bound: f64,
    pub n: usize,
}

/// Pools every column of every draw, after subtracting that column's known
/// mean, into one D×D covariance estimate.
fn pooled_column_covariance<T: Real>(draws: &[NdArray<T>], mean: &NdArray<T>) -> Result<NdArray<T>> {
    let d = mean.rows();
    let t = mean.cols();
    let mut cov = NdArray::zeros([d, d]);
    let inv = T::one() / T::count(draws.len() * t);
    for x in draws {
        for j in 0..t {
            for a in 0..d {
                let xa = x.at(a, j) - mean.at(a, j);
                for b in a..d {
                    let v = cov.at(a, b) + xa * (x.at(b, j) - mean.at(b, j)) * inv;
                    cov.set(a, b, v);
                }
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov.set(a, b, cov.at(b, a));
        }
    }
    Ok(cov)
}

fn per_variable_mean<T: Real>(draws: &[NdArray<T>]) -> Vec<T> {
    let d = draws[0].rows();
    let t = draws[0].cols();
    let inv = T::one() / T::count(draws.len() * t);
    let mut m = vec![T::zero(); d];
    for x in draws {
        for (i, mi) in m.iter_mut().enumerate() {
            *mi += x.row(i).iter().copied().sum::<T>() * inv;
        }
    }
    m
}

/// Draws `n` samples per domain, maps the target draws through `map`, and
/// compares correlation, covariance and per-variable mean with the source.
///
/// Covariances are per-column (each column centered by its own empirical
/// mean across the `n` draws) and averaged over columns.
pub fn verify_probability_alignment<T: Real>(
    source: &GaussianSpec<T>,
    target: &GaussianSpec<T>,
    map: &ReweightMap<T>,
    n: usize,
    seed: u64,
) -> Result<AlignmentReport> {
    if n < 1000 {
        return Err(Error::TooFewSamples { needed: 1000, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = source.sample(n, &mut rng)?;
    let xt = target.sample(n, &mut rng)?;
    let ys: Vec<NdArray<T>> = xt.iter().map(|x| map.apply(x)).collect::<Result<_>>()?;

    let (_, mean_s) = covariance(&xs)?;
    let (_, mean_y) = covariance(&ys)?;
    let cov_s = pooled_column_covariance(&xs, &mean_s)?;
    let cov_y = pooled_column_covariance(&ys, &mean_y)?;
    let corr_diff = corr_structure(&cov_y)?.max_abs_diff(&corr_structure(&cov_s)?);
    // covariance gap relative to the source scale so the noise bound applies
    let scale = (0..cov_s.rows()).map(|i| cov_s.at(i, i)).fold(T::zero(), |a, b| a.max(b)).max(T::lit(1e-300));
    let cov_diff = cov_y.max_abs_diff(&cov_s) / scale;
    let ms = per_variable_mean(&xs);
    let my = per_variable_mean(&ys);
    let sd = scale.sqrt();
    let mean_diff = ms.iter().zip(&my).fold(T::zero(), |a, (&p, &q)| a.max((p - q).abs())) / sd;
    Ok(AlignmentReport {
        corr_diff: corr_diff.to_f64_lossy(),
        cov_diff: cov_diff.to_f64_lossy(),
        mean_diff: mean_diff.to_f64_lossy(),
        noise_bound: 5.0 / (n as f64).sqrt(),
        n,
    })
}

/// Inputs for [`verify_correlation_alignment`]: population covariances for the
/// exact check, or sample sets for the empirical one.
#[derive(Debug, Clone, Copy)]
pub enum AlignmentInputs<'a, T> {
    Exact { source: &'a GaussianSpec<T>, target: &'a GaussianSpec<T> },
    Empirical { source: &'a [NdArray<T>], target: &'a [NdArray<T>] },
}

/// `‖Corr(A·Σ_t·Aᵀ) − Corr(Σ_s)‖_max`, on population or sample covariances.
pub fn verify_correlation_alignment<T: Real>(inputs: AlignmentInputs<'_, T>, a: &NdArray<T>) -> Result<T> {
    let (cov_s, cov_mapped) = match inputs {
        AlignmentInputs::Exact { source, target } => {
            let mapped = a.matmul(&target.covariance)?.matmul(&a.transpose()?)?;
            (source.covariance.clone(), mapped)
        }
        AlignmentInputs::Empirical { source, target } => {
            if source.len() < 2 || target.len() < 2 {
                return Err(Error::TooFewSamples { needed: 2, got: source.len().min(target.len()) });
            }
            let mapped: Vec<NdArray<T>> = target.iter().map(|x| a.matmul(x)).collect::<Result<_>>()?;
            let (_, ms) = covariance(source)?;
            let (_, mm) = covariance(&mapped)?;
            (pooled_column_covariance(source, &ms)?, pooled_column_covariance(&mapped, &mm)?)
        }
    };
    Ok(corr_structure(&cov_mapped)?.max_abs_diff(&corr_structure(&cov_s)?))
}

/// A random symmetric positive-definite matrix `BBᵀ + δI`.
pub fn random_spd<T: Real>(d: usize, rng: &mut ChaCha8Rng) -> NdArray<T> {
    let b = NdArray::new([d, d], (0..d * d).map(|_| T::lit(StandardNormal.sample(rng))).collect()).expect("square");
    let mut m = b.matmul(&b.transpose().expect("square")).expect("square");
    for i in 0..d {
        m.set(i, i, m.at(i, i) + T::lit(0.5));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> NdArray<f64> {
        NdArray::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn mapped_cov(a: &NdArray<f64>, sigma_t: &NdArray<f64>) -> NdArray<f64> {
        a.matmul(sigma_t).unwrap().matmul(&a.transpose().unwrap()).unwrap()
    }

    #[test]
    fn identical_domains_give_identity() {
        let sigma = m(&[&[2.0, 0.3], &[0.3, 1.0]]);
        let s = GaussianSpec::centered(sigma.clone(), 4).unwrap();
        let r = build_reweight(&s, &s).unwrap();
        assert!(r.matrix.max_abs_diff(&NdArray::identity(2)) < 1e-8);
        assert!(r.bias.iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn diagonal_closed_form() {
        let s = GaussianSpec::centered(NdArray::diag(&[4.0, 1.0]), 1).unwrap();
        let t = GaussianSpec::centered(NdArray::identity(2), 1).unwrap();
        let r = build_reweight(&s, &t).unwrap();
        assert!(r.matrix.max_abs_diff(&NdArray::diag(&[2.0, 1.0])) < 1e-12);
    }

    #[test]
    fn singular_target_is_rejected() {
        let s = GaussianSpec::centered(NdArray::identity(2), 1).unwrap();
        let t = GaussianSpec::centered(m(&[&[1.0, 1.0], &[1.0, 1.0]]), 1).unwrap();
        assert!(matches!(build_reweight(&s, &t), Err(Error::SingularTarget(_))));
    }

    #[test]
    fn bias_recenters_target_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = GaussianSpec::centered(random_spd::<f64>(3, &mut rng), 5).unwrap();
        let mean = NdArray::new([3, 5], (0..15).map(|v| v as f64 * 0.1).collect()).unwrap();
        let t = GaussianSpec::new(mean, random_spd(3, &mut rng)).unwrap();
        let r = build_reweight(&s, &t).unwrap();
        let m_t = t.row_mean();
        let mapped: Vec<f64> =
            (0..3).map(|i| (0..3).map(|k| r.matrix.at(i, k) * m_t[k]).sum::<f64>() + r.bias[i]).collect();
        for i in 0..3 {
            assert!((mapped[i] - m_t[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_alignment_and_negative_control() {
        let s = GaussianSpec::centered(m(&[&[2.0, 1.0], &[1.0, 2.0]]), 1).unwrap();
        let t = GaussianSpec::centered(NdArray::identity(2), 1).unwrap();
        let r = build_reweight(&s, &t).unwrap();
        let exact = AlignmentInputs::Exact { source: &s, target: &t };
        assert!(verify_correlation_alignment(exact, &r.matrix).unwrap() <= 1e-8);
        assert!(verify_correlation_alignment(exact, &NdArray::identity(2)).unwrap() > 0.1);
    }

    #[test]
    fn identical_specs_empirical_diffs_within_noise() {
        let s = GaussianSpec::centered(m(&[&[1.5, -0.4], &[-0.4, 1.0]]), 2).unwrap();
        let rep = verify_probability_alignment(&s, &s, &ReweightMap::identity(2), 4000, 1).unwrap();
        assert!(rep.corr_diff <= rep.noise_bound);
        assert!(rep.cov_diff <= rep.noise_bound);
        assert!(rep.mean_diff <= rep.noise_bound);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn reweight_matches_covariances(d in 1usize..=16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = GaussianSpec::centered(random_spd::<f64>(d, &mut rng), 1).unwrap();
            let t = GaussianSpec::centered(random_spd::<f64>(d, &mut rng), 1).unwrap();
            let r = build_reweight(&s, &t).unwrap();
            prop_assert!(mapped_cov(&r.matrix, &t.covariance).max_abs_diff(&s.covariance) <= 1e-8);
            let rs = build_reweight(&s, &s).unwrap();
            prop_assert!(mapped_cov(&rs.matrix, &s.covariance).max_abs_diff(&s.covariance) <= 1e-8);
        }
    }
}
