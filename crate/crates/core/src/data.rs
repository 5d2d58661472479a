//! Multivariate series containers, the synthetic correlation-shift generator,
//! window slicing and the MTS1/MTSY file pair.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, min_eigenvalue};
use crate::stats::{domain_pair_distance, PairDistanceOptions};
use crate::Tensor;

pub const AR_COEF: f64 = 0.7;
const VALUES_MAGIC: &[u8; 4] = b"MTS1";
const LABELS_MAGIC: &[u8; 4] = b"MTSY";
pub const VALUES_EXT: &str = "mts";
pub const LABELS_EXT: &str = "mty";

/// One D×T series, labeled or not.
#[derive(Debug, Clone, PartialEq)]
pub struct MtsSample {
    pub values: Tensor,
    pub label: Option<usize>,
}

/// A homogeneous collection of samples forming one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct MtsDataset {
    pub domain_id: String,
    pub n_classes: usize,
    pub n_vars: usize,
    pub n_steps: usize,
    pub samples: Vec<MtsSample>,
}

impl MtsDataset {
    pub fn new(domain_id: impl Into<String>, n_classes: usize, samples: Vec<MtsSample>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        if first.values.ndim() != 2 {
            return Err(Error::shape(format!("samples must be D×T, got {:?}", first.values.shape())));
        }
        let (n_vars, n_steps) = (first.values.rows(), first.values.cols());
        for s in &samples {
            if s.values.shape() != [n_vars, n_steps] {
                return Err(Error::shape(format!("sample {:?} in a {n_vars}×{n_steps} dataset", s.values.shape())));
            }
            if !s.values.all_finite() {
                return Err(Error::NumericDomain("non-finite sample value".into()));
            }
            if let Some(label) = s.label {
                if label >= n_classes {
                    return Err(Error::LabelOutOfRange { label, n_classes });
                }
            }
        }
        Ok(Self { domain_id: domain_id.into(), n_classes, n_vars, n_steps, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.samples.iter().filter_map(|s| s.label).collect()
    }

    pub fn class_samples(&self, label: usize) -> impl Iterator<Item = &MtsSample> {
        self.samples.iter().filter(move |s| s.label == Some(label))
    }

    /// The series without their labels, as handed to adaptation.
    pub fn series(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.values.clone()).collect()
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples.iter().map(|s| s.label.ok_or(Error::EmptyInput("dataset labels"))).collect()
    }
}

/// Recipe for one synthetic domain: class `c` draws columns with covariance
/// `R(θ)·Σ_c·R(θ)ᵀ`, filtered through an AR(1) process per variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub domain_id: String,
    /// One D×D correlation matrix per class.
    pub templates: Vec<Tensor>,
    /// Rotation angle in radians; 0 reproduces the source distribution.
    pub theta: f64,
    pub noise_scale: f64,
    pub n_steps: usize,
    /// Seeds the sample draws.
    pub seed: u64,
    /// Seeds the rotation basis; keep it fixed across domains of one family.
    pub rotation_seed: u64,
}

impl SyntheticDomainSpec {
    pub fn n_vars(&self) -> usize {
        self.templates.first().map_or(0, Tensor::rows)
    }
}

/// Rotation by `theta` in each of the `⌊d/2⌋` planes spanned by consecutive
/// pairs of a seeded orthonormal basis; for odd `d` one direction stays fixed.
pub fn seeded_rotation(d: usize, theta: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for q in &basis {
            let proj: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(x, &qi)| *x -= proj * qi);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let (s, c) = theta.sin_cos();
    let mut r = Tensor::identity(d);
    for pair in basis.chunks_exact(2) {
        let (u, v) = (&pair[0], &pair[1]);
        for i in 0..d {
            for j in 0..d {
                let val = r.at(i, j) + s * (v[i] * u[j] - u[i] * v[j]) + (c - 1.0) * (u[i] * u[j] + v[i] * v[j]);
                r.set(i, j, val);
            }
        }
    }
    r
}

/// Seeded correlation templates: class `c` normalizes `F·Fᵀ + ridge·I` for a
/// Gaussian factor `F` of `rank` columns.
pub fn random_templates(n_vars: usize, n_classes: usize, rank: usize, ridge: f64, seed: u64) -> Result<Vec<Tensor>> {
    if n_vars == 0 || n_classes == 0 || rank == 0 || !(ridge > 0.0) {
        return Err(Error::ConfigInvalid("templates need variables, classes, a rank and a positive ridge".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_classes)
        .map(|_| {
            let f = Tensor::new([n_vars, rank], (0..n_vars * rank).map(|_| StandardNormal.sample(&mut rng)).collect())?;
            let mut cov = f.matmul(&f.transpose()?)?;
            for i in 0..n_vars {
                cov.set(i, i, cov.at(i, i) + ridge);
            }
            crate::stats::corr_structure(&cov)
        })
        .collect()
}

fn check_template(idx: usize, t: &Tensor, d: usize) -> Result<()> {
    if t.shape() != [d, d] {
        return Err(Error::shape(format!("template {idx} has shape {:?}, expected {d}×{d}", t.shape())));
    }
    let unit_diag = (0..d).all(|i| (t.at(i, i) - 1.0).abs() <= 1e-10);
    if !unit_diag || crate::linalg::max_asymmetry(t) > 1e-10 || min_eigenvalue(t)? < -1e-10 {
        return Err(Error::NonPsdTemplate(idx));
    }
    Ok(())
}

/// `n_per_class` samples of every class, in class order. Values are rounded to
/// single precision so that the on-disk format round-trips exactly.
pub fn generate_domain(spec: &SyntheticDomainSpec, n_per_class: usize) -> Result<MtsDataset> {
    let d = spec.n_vars();
    if spec.templates.is_empty() || d == 0 {
        return Err(Error::ConfigInvalid("synthetic spec needs at least one template".into()));
    }
    if spec.n_steps == 0 || n_per_class == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(spec.noise_scale > 0.0) || !spec.theta.is_finite() {
        return Err(Error::ConfigInvalid("noise_scale must be positive and theta finite".into()));
    }
    let rot = seeded_rotation(d, spec.theta, spec.rotation_seed);
    let rot_t = rot.transpose()?;
    let mut factors = Vec::with_capacity(spec.templates.len());
    for (c, tpl) in spec.templates.iter().enumerate() {
        check_template(c, tpl, d)?;
        let cov = rot.matmul(tpl)?.matmul(&rot_t)?;
        factors.push(cholesky(&cov).map_err(|_| Error::NonPsdTemplate(c))?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let innovation_sd = (1.0 - AR_COEF * AR_COEF).sqrt();
    let t_len = spec.n_steps;
    let mut samples = Vec::with_capacity(n_per_class * factors.len());
    let mut z = vec![0.0; d];
    let mut state = vec![0.0; d];
    for (c, l) in factors.iter().enumerate() {
        for _ in 0..n_per_class {
            let mut values = Tensor::zeros([d, t_len]);
            for t in 0..t_len {
                z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                for i in 0..d {
                    let e: f64 = (0..=i).map(|k| l.at(i, k) * z[k]).sum();
                    // stationary start, then x_t = φ·x_{t−1} + √(1−φ²)·ε_t
                    state[i] = if t == 0 { e } else { AR_COEF * state[i] + innovation_sd * e };
                }
                for i in 0..d {
                    values.set(i, t, (spec.noise_scale * state[i]) as f32 as f64);
                }
            }
            samples.push(MtsSample { values, label: Some(c) });
        }
    }
    MtsDataset::new(spec.domain_id.clone(), factors.len(), samples)
}

/// Windows `values[:, s..s+L]` at starts `0, stride, …, ≤ T−L`.
pub fn slice_windows(values: &Tensor, window: usize, stride: usize) -> Result<Vec<(usize, Tensor)>> {
    let t_len = values.cols();
    if window == 0 || stride == 0 {
        return Err(Error::ConfigInvalid("window length and stride must be positive".into()));
    }
    if window > t_len {
        return Err(Error::WindowTooLong { window, len: t_len });
    }
    Ok((0..=t_len - window).step_by(stride).map(|s| (s, window_at(values, s, window))).collect())
}

/// The D×L window starting at column `start`.
pub fn window_at(values: &Tensor, start: usize, window: usize) -> Tensor {
    let d = values.rows();
    let mut data = Vec::with_capacity(d * window);
    for i in 0..d {
        data.extend_from_slice(&values.row(i)[start..start + window]);
    }
    Tensor::new([d, window], data).expect("window shape")
}

/// History/next window pairs `(X[:, k..k+L], X[:, k+L..k+2L])` for starts
/// `k = 0, stride, … < T−2L`.
pub fn forecast_pairs(values: &Tensor, window: usize, stride: usize) -> Result<Vec<(Tensor, Tensor)>> {
    if window == 0 || stride == 0 {
        return Err(Error::ConfigInvalid("window length and stride must be positive".into()));
    }
    let t_len = values.cols();
    let required = 2 * window + 1;
    if t_len < required {
        return Err(Error::SeriesTooShort { len: t_len, required });
    }
    Ok((0..t_len - 2 * window)
        .step_by(stride)
        .map(|k| (window_at(values, k, window), window_at(values, k + window, window)))
        .collect())
}

/// Path of the labels file paired with a values file.
pub fn labels_path(values_path: &Path) -> PathBuf {
    values_path.with_extension(LABELS_EXT)
}

/// Writes `<path>` (values) and, for fully labeled datasets, the sibling
/// `.mty` labels file.
pub fn write_dataset(ds: &MtsDataset, path: &Path) -> Result<()> {
    let to_u32 = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::ShapeOverflow(format!("{what} = {v}")));
    let mut buf = Vec::with_capacity(16 + ds.len() * ds.n_vars * ds.n_steps * 4);
    buf.extend_from_slice(VALUES_MAGIC);
    for (v, what) in [(ds.len(), "n"), (ds.n_vars, "D"), (ds.n_steps, "T")] {
        buf.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    for s in &ds.samples {
        for &v in s.values.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;

    let lpath = labels_path(path);
    if ds.is_labeled() {
        let mut lb = Vec::with_capacity(8 + 4 * ds.len());
        lb.extend_from_slice(LABELS_MAGIC);
        lb.extend_from_slice(&to_u32(ds.len(), "n")?.to_le_bytes());
        for s in &ds.samples {
            lb.extend_from_slice(&to_u32(s.label.expect("labeled"), "label")?.to_le_bytes());
        }
        fs::File::create(&lpath)?.write_all(&lb)?;
    } else if lpath.exists() {
        warn!("removing stale labels file {}", lpath.display());
        fs::remove_file(&lpath)?;
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::TruncatedFile(format!("{} ends at byte {}", self.what, self.buf.len())))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, magic: &'static [u8; 4]) -> Result<()> {
        let got = self.take(4).map_err(|_| Error::BadMagic { expected: std::str::from_utf8(magic).expect("ascii") })?;
        if got != magic {
            return Err(Error::BadMagic { expected: std::str::from_utf8(magic).expect("ascii") });
        }
        Ok(())
    }
}

/// Reads a values file and its labels file when present. The domain id is
/// the file stem and the class count is one past the largest label.
pub fn read_dataset(path: &Path) -> Result<MtsDataset> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0, what: path.display().to_string() };
    r.magic(VALUES_MAGIC)?;
    let (n, d, t) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let count = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(t))
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| Error::ShapeOverflow(format!("{n}×{d}×{t}")))?;
    if n == 0 || d == 0 || t == 0 {
        return Err(Error::EmptyDataset);
    }
    let raw = r.take(count * 4)?;
    let values: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();

    let lpath = labels_path(path);
    let labels: Vec<Option<usize>> = if lpath.exists() {
        let lbytes = fs::read(&lpath)?;
        let mut lr = Reader { buf: &lbytes, pos: 0, what: lpath.display().to_string() };
        lr.magic(LABELS_MAGIC)?;
        let ln = lr.u32()? as usize;
        if ln != n {
            return Err(Error::shape(format!("labels file has {ln} entries for {n} samples")));
        }
        (0..n).map(|_| lr.u32().map(|v| Some(v as usize))).collect::<Result<_>>()?
    } else {
        vec![None; n]
    };
    let n_classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let per = d * t;
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| MtsSample { values: Tensor::new([d, t], values[i * per..(i + 1) * per].to_vec()).expect("shape"), label })
        .collect();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    MtsDataset::new(stem, n_classes, samples)
}

/// One scored ordered domain pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedPair {
    pub source: String,
    pub target: String,
    pub distance: f64,
    /// Difficulty group, 0 = closest.
    pub group: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRanking {
    /// Every scored pair, ascending by distance.
    pub pairs: Vec<RankedPair>,
    /// First member of each group.
    pub representatives: Vec<RankedPair>,
}

pub const MAX_PAIR_GROUPS: usize = 10;

/// Scores all ordered pairs, sorts them ascending and splits them into at
/// most ten contiguous groups of near-equal size.
pub fn rank_domain_pairs(domains: &[MtsDataset], opts: &PairDistanceOptions) -> Result<PairRanking> {
    if domains.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: domains.len() });
    }
    let mut scored = Vec::new();
    for (i, s) in domains.iter().enumerate() {
        for (j, t) in domains.iter().enumerate() {
            if i == j {
                continue;
            }
            match domain_pair_distance(s, t, opts) {
                Ok(distance) => scored.push((s.domain_id.clone(), t.domain_id.clone(), distance)),
                Err(Error::NoSharedLabels) => warn!("{} -> {} share no labels; skipped", s.domain_id, t.domain_id),
                Err(e) => return Err(e),
            }
        }
    }
    if scored.is_empty() {
        return Err(Error::NoSharedLabels);
    }
    scored.sort_by(|a, b| a.2.total_cmp(&b.2).then_with(|| (&a.0, &a.1).cmp(&(&b.0, &b.1))));
    let groups = MAX_PAIR_GROUPS.min(scored.len());
    let total = scored.len();
    let pairs: Vec<RankedPair> = scored
        .into_iter()
        .enumerate()
        .map(|(k, (source, target, distance))| RankedPair { source, target, distance, group: k * groups / total })
        .collect();
    let mut representatives: Vec<RankedPair> = Vec::with_capacity(groups);
    for p in &pairs {
        if representatives.last().is_none_or(|r| r.group != p.group) {
            representatives.push(p.clone());
        }
    }
    Ok(PairRanking { pairs, representatives })
}
