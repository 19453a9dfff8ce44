//! Test objectives for the Hessian-tracking optimizer.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::butterfly::ButterflyProduct;
use crate::synth::haar_rotation_with;

/// A differentiable objective `l(u)`.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, u: &[f64]) -> f64;
    fn gradient(&self, u: &[f64]) -> Vec<f64>;
}

/// An objective that is a mean over examples, so it can be evaluated on a
/// subset `batch` of example indices.
pub trait MinibatchObjective: Objective {
    fn num_examples(&self) -> usize;
    fn value_on(&self, batch: &[usize], u: &[f64]) -> f64;
    fn gradient_on(&self, batch: &[usize], u: &[f64]) -> Vec<f64>;

    fn all_examples(&self) -> Vec<usize> {
        (0..self.num_examples()).collect()
    }
}

/// `l(u) = 1/2 u^T A u`, minimized at `u = 0`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: DMatrix<f64>,
}

/// Eigenbasis of a [`Quadratic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    /// Haar-random rotation.
    Haar,
    /// A random butterfly rotation, exactly representable by the model.
    Butterfly,
    Identity,
}

impl Quadratic {
    pub fn new(a: DMatrix<f64>) -> Self {
        assert!(a.is_square());
        Self { a }
    }

    /// `A = R diag(eigenvalues) R^T` with `R` drawn from `basis`.
    pub fn with_spectrum(eigenvalues: &[f64], basis: Basis, seed: u64) -> Self {
        let n = eigenvalues.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = match basis {
            Basis::Haar => haar_rotation_with(n, &mut rng),
            Basis::Butterfly => ButterflyProduct::random(n, &mut rng)
                .expect("butterfly basis needs a power-of-two dimension")
                .to_dense(),
            Basis::Identity => DMatrix::identity(n, n),
        };
        let l = DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues));
        let a = &r * l * r.transpose();
        let at = a.transpose();
        Self { a: (a + at) * 0.5 }
    }

    /// Eigenvalues log-spaced from `1/cond` to `1`.
    pub fn log_spaced(n: usize, cond: f64, basis: Basis, seed: u64) -> Self {
        let eig: Vec<f64> = (0..n)
            .map(|i| {
                let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 1.0 };
                cond.powf(t - 1.0)
            })
            .collect();
        Self::with_spectrum(&eig, basis, seed)
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn value(&self, u: &[f64]) -> f64 {
        let v = DVector::from_column_slice(u);
        0.5 * v.dot(&(&self.a * &v))
    }

    fn gradient(&self, u: &[f64]) -> Vec<f64> {
        (&self.a * DVector::from_column_slice(u)).as_slice().to_vec()
    }
}

/// `l(u) = 1/(2m) sum_i (x_i^T u - y_i)^2`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    x: DMatrix<f64>,
    y: Vec<f64>,
}

impl LeastSquares {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Self {
        assert_eq!(x.nrows(), y.len());
        Self { x, y }
    }

    /// Gaussian design with column scales spread over `[1/sqrt(cond), 1]`,
    /// targets from a random planted solution plus noise.
    pub fn synthetic(m: usize, n: usize, cond: f64, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales: Vec<f64> = (0..n)
            .map(|j| cond.sqrt().powf(-(j as f64) / (n.max(2) - 1) as f64))
            .collect();
        let x = DMatrix::from_fn(m, n, |_, j| scales[j] * rng.sample::<f64, _>(StandardNormal));
        let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y = (0..m)
            .map(|i| {
                let s: f64 = (0..n).map(|j| x[(i, j)] * w[j]).sum();
                s + noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        Self { x, y }
    }

    fn residual(&self, i: usize, u: &[f64]) -> f64 {
        let row = self.x.row(i);
        row.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() - self.y[i]
    }
}

impl Objective for LeastSquares {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn value(&self, u: &[f64]) -> f64 {
        self.value_on(&self.all_examples(), u)
    }

    fn gradient(&self, u: &[f64]) -> Vec<f64> {
        self.gradient_on(&self.all_examples(), u)
    }
}

impl MinibatchObjective for LeastSquares {
    fn num_examples(&self) -> usize {
        self.y.len()
    }

    fn value_on(&self, batch: &[usize], u: &[f64]) -> f64 {
        let s: f64 = batch.iter().map(|&i| self.residual(i, u).powi(2)).sum();
        0.5 * s / batch.len() as f64
    }

    fn gradient_on(&self, batch: &[usize], u: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for &i in batch {
            let r = self.residual(i, u);
            for (gj, xj) in g.iter_mut().zip(self.x.row(i).iter()) {
                *gj += r * xj;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        g
    }
}

/// `l(u) = 1/m sum_i log(1 + exp(-y_i x_i^T u)) + lambda/2 ||u||^2` with
/// labels `y_i` in `{-1, +1}`.
#[derive(Debug, Clone)]
pub struct Logistic {
    x: DMatrix<f64>,
    labels: Vec<f64>,
    lambda: f64,
}

impl Logistic {
    pub fn new(x: DMatrix<f64>, labels: Vec<f64>, lambda: f64) -> Self {
        assert_eq!(x.nrows(), labels.len());
        Self { x, labels, lambda }
    }

    /// Labels drawn from a logistic model around a planted weight vector.
    pub fn synthetic(m: usize, n: usize, lambda: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales: Vec<f64> = (0..n).map(|j| 1.0 / (1.0 + j as f64 / 8.0)).collect();
        let x = DMatrix::from_fn(m, n, |_, j| scales[j] * rng.sample::<f64, _>(StandardNormal));
        let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let labels = (0..m)
            .map(|i| {
                let z: f64 = (0..n).map(|j| x[(i, j)] * w[j]).sum();
                let p = 1.0 / (1.0 + (-z).exp());
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        Self { x, labels, lambda }
    }

    fn margin(&self, i: usize, u: &[f64]) -> f64 {
        self.labels[i] * self.x.row(i).iter().zip(u).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// `log(1 + exp(-z))` without overflow.
fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

impl Objective for Logistic {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn value(&self, u: &[f64]) -> f64 {
        self.value_on(&self.all_examples(), u)
    }

    fn gradient(&self, u: &[f64]) -> Vec<f64> {
        self.gradient_on(&self.all_examples(), u)
    }
}

impl MinibatchObjective for Logistic {
    fn num_examples(&self) -> usize {
        self.labels.len()
    }

    fn value_on(&self, batch: &[usize], u: &[f64]) -> f64 {
        let s: f64 = batch.iter().map(|&i| softplus_neg(self.margin(i, u))).sum();
        let reg: f64 = u.iter().map(|v| v * v).sum();
        s / batch.len() as f64 + 0.5 * self.lambda * reg
    }

    fn gradient_on(&self, batch: &[usize], u: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for &i in batch {
            let z = self.margin(i, u);
            // d/dz log(1 + e^-z) = -1 / (1 + e^z)
            let w = -self.labels[i] / (1.0 + z.exp());
            for (gj, xj) in g.iter_mut().zip(self.x.row(i).iter()) {
                *gj += w * xj;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for (gj, uj) in g.iter_mut().zip(u) {
            *gj = *gj * inv + self.lambda * uj;
        }
        g
    }
}

/// Chained Rosenbrock function
/// `sum_i 100 (u_{i+1} - u_i^2)^2 + (1 - u_i)^2`, minimized at all ones.
#[derive(Debug, Clone, Copy)]
pub struct Rosenbrock {
    pub n: usize,
}

impl Objective for Rosenbrock {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, u: &[f64]) -> f64 {
        u.windows(2)
            .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
            .sum()
    }

    fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; u.len()];
        for i in 0..u.len().saturating_sub(1) {
            let t = u[i + 1] - u[i] * u[i];
            g[i] += -400.0 * t * u[i] - 2.0 * (1.0 - u[i]);
            g[i + 1] += 200.0 * t;
        }
        g
    }
}
