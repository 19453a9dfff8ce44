//! Ground-truth generators for experiments.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

/// How random test and training inputs are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    UnitSphere,
    Hypercube { half_width: f64 },
}

impl Sampler {
    pub fn sample(&self, n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
        match *self {
            Sampler::UnitSphere => sample_unit_sphere(n, m, seed),
            Sampler::Hypercube { half_width } => sample_hypercube(n, m, seed, half_width),
        }
    }
}

/// `m` vectors uniform on the unit sphere of `R^n` (normalized Gaussians).
pub fn sample_unit_sphere(n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| loop {
            let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|a| a / norm).collect();
            }
        })
        .collect()
}

/// `m` vectors with i.i.d. entries uniform in `[-half_width, half_width]`.
pub fn sample_hypercube(n: usize, m: usize, seed: u64, half_width: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| (0..n).map(|_| rng.random_range(-half_width..=half_width)).collect())
        .collect()
}

/// Haar-distributed rotation (orthogonal, `det = +1`).
///
/// QR of a standard Gaussian matrix, with each column of `Q` multiplied by the
/// sign of the matching diagonal entry of `R`; the first column is then
/// negated if the determinant is `-1`.
pub fn haar_rotation(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    haar_rotation_with(n, &mut rng)
}

pub fn haar_rotation_with<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// Parameters of the `R Lambda R^T` ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Number of dominant eigenvalues.
    pub n_mu: usize,
    /// Standard deviation of the zero-mean bulk.
    pub bulk_scale: f64,
    pub dom_mean: f64,
    /// Variance (not standard deviation) of the dominant group.
    pub dom_var: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, n_mu: usize, seed: u64) -> Self {
        Self {
            n,
            n_mu,
            bulk_scale: 0.1,
            dom_mean: 1.0,
            dom_var: 0.4,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_mu > self.n {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= n_mu <= n and n >= 1, got n = {}, n_mu = {}",
                self.n, self.n_mu
            )));
        }
        if !(self.bulk_scale >= 0.0 && self.dom_var >= 0.0) {
            return Err(Error::InvalidArgument("scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// A synthetic symmetric PSD matrix and its ground-truth factors.
#[derive(Debug, Clone)]
pub struct SyntheticHessian {
    pub h: DMatrix<f64>,
    pub rotation: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Positions in `eigenvalues` drawn from the dominant group.
    pub dominant: Vec<usize>,
}

impl SyntheticHessian {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        dense_apply(&self.h, x)
    }
}

pub fn dense_apply(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(x)).as_slice().to_vec()
}

/// `H = R Lambda R^T` with `lambda_i = |mu_i|`: bulk `mu_i ~ N(0, bulk_scale^2)`
/// and `n_mu` randomly placed `mu_i ~ N(dom_mean, dom_var)`.
pub fn synthetic_hessian(spec: &SyntheticSpec) -> Result<SyntheticHessian> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rotation = haar_rotation_with(spec.n, &mut rng);
    let mut dominant = sample_indices(&mut rng, spec.n, spec.n_mu).into_vec();
    dominant.sort_unstable();
    let bulk = Normal::new(0.0, spec.bulk_scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let dom = Normal::new(spec.dom_mean, spec.dom_var.sqrt())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut is_dom = vec![false; spec.n];
    for &i in &dominant {
        is_dom[i] = true;
    }
    let eigenvalues: Vec<f64> = is_dom
        .iter()
        .map(|&d| if d { dom.sample(&mut rng) } else { bulk.sample(&mut rng) }.abs())
        .collect();
    let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&eigenvalues));
    let mut h = &rotation * lambda * rotation.transpose();
    // exact symmetry
    let ht = h.transpose();
    h = (h + ht) * 0.5;
    Ok(SyntheticHessian {
        h,
        rotation,
        eigenvalues,
        dominant,
    })
}
