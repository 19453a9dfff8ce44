//! Gradient descent with an online butterfly Hessian model.
//!
//! Every step yields a secant pair `(du, dg) = (u_t - u_{t-1}, g_t - g_{t-1})`
//! with `H du ~ dg`. The pair is rescaled by `1/||du||` and used as one SGD
//! sample for the `Q D Q^T` model, after which the model is projected, its
//! negative eigenvalues are raised to `epsilon`, and the descent direction is
//! preconditioned with the floored inverse.

pub mod objective;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::butterfly::DegeneratePolicy;
use crate::error::{check_dim, Error, Result};
use crate::factorization::{average_angle, draw_batch, SymmetricFactorization, TrainSample};
use crate::synth::{dense_apply, Sampler};

pub use objective::{Basis, LeastSquares, Logistic, MinibatchObjective, Objective, Quadratic, Rosenbrock};

/// Secant pairs with `||du||` below this are not used for learning.
pub const MIN_STEP_NORM: f64 = 1e-14;

/// What the factorization models and how it is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrackingMode {
    /// Learn `H` from `H du ~ dg`, descend along `H_hat^-1 g`.
    #[default]
    TrackHessian,
    /// Learn `H^-1` from `du ~ H^-1 dg`, descend along `H_hat g`.
    TrackInverseHessian,
    /// Plain gradient descent; the model is never touched.
    PlainGd,
}

/// Descent direction used in [`TrackingMode::TrackHessian`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DescentRule {
    /// `H_hat^-1 g` with the eigenvalue floor.
    #[default]
    InverseHessian,
    /// `H_hat g`, literally as written in the pseudocode.
    LiteralHessian,
}

/// How the eigenvalue floor is chosen at each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonRule {
    Fixed(f64),
    /// `max(rel * median(|d|), floor)`.
    RelativeMedian { rel: f64, floor: f64 },
}

impl Default for EpsilonRule {
    fn default() -> Self {
        EpsilonRule::RelativeMedian { rel: 1e-4, floor: 1e-8 }
    }
}

impl EpsilonRule {
    pub fn value(&self, d: &[f64]) -> f64 {
        match *self {
            EpsilonRule::Fixed(e) => e,
            EpsilonRule::RelativeMedian { rel, floor } => {
                let mut abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
                abs.sort_by(f64::total_cmp);
                let mid = abs.len() / 2;
                let median = if abs.is_empty() {
                    0.0
                } else if abs.len() % 2 == 1 {
                    abs[mid]
                } else {
                    0.5 * (abs[mid - 1] + abs[mid])
                };
                (rel * median).max(floor)
            }
        }
    }
}

/// Backtracking on `l` along the descent direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Armijo {
    pub c: f64,
    pub max_halvings: usize,
}

impl Default for Armijo {
    fn default() -> Self {
        Self { c: 1e-4, max_halvings: 30 }
    }
}

/// Which gradient is paired with the current minibatch gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MinibatchPolicy {
    #[default]
    FullBatch,
    /// Fresh minibatch every step; the previous gradient is recomputed on it.
    RecomputePrev { size: usize },
    /// Keep each minibatch for `r` consecutive steps; the previous gradient
    /// is only recomputed when the minibatch changes.
    Reuse { size: usize, r: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub mode: TrackingMode,
    pub descent: DescentRule,
    /// Hessian-learning rate for the rotation coefficients.
    pub lr_q: f64,
    /// Hessian-learning rate for the diagonal.
    pub lr_d: f64,
    /// Divide `lr_q` by `||y||^2` and `lr_d` by `||x||^2` of each rescaled
    /// training pair. When tracking `H`, `||x|| = 1` and this is the same
    /// gain normalization as in offline training.
    pub gain_normalized: bool,
    /// Descent step size.
    pub beta: f64,
    pub epsilon: EpsilonRule,
    pub line_search: Option<Armijo>,
    pub minibatch: MinibatchPolicy,
    pub degenerate_policy: DegeneratePolicy,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            mode: TrackingMode::TrackHessian,
            descent: DescentRule::InverseHessian,
            lr_q: 0.5,
            lr_d: 0.5,
            gain_normalized: true,
            beta: 1.0,
            epsilon: EpsilonRule::default(),
            line_search: None,
            minibatch: MinibatchPolicy::FullBatch,
            degenerate_policy: DegeneratePolicy::ResetIdentity,
        }
    }
}

impl TrackerConfig {
    pub fn plain_gd(beta: f64) -> Self {
        Self {
            mode: TrackingMode::PlainGd,
            beta,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr_q >= 0.0 && self.lr_d >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidArgument("learning rates must be non-negative".into()));
        }
        match self.minibatch {
            MinibatchPolicy::RecomputePrev { size } | MinibatchPolicy::Reuse { size, .. } if size == 0 => {
                Err(Error::InvalidArgument("minibatch size must be >= 1".into()))
            }
            MinibatchPolicy::Reuse { r: 0, .. } => Err(Error::InvalidArgument("reuse count must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Per-step diagnostics, one row of the run log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub t: usize,
    /// `l(u_t)`, before the descent step.
    pub loss: f64,
    pub grad_norm: f64,
    /// Loss of the model on the (rescaled) secant pair before its update.
    pub hessian_train_loss: Option<f64>,
    pub min_d: f64,
    pub max_d: f64,
    pub epsilon: f64,
    /// Step size actually taken.
    pub step: f64,
    pub angle_to_true_hessian: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    pub f: SymmetricFactorization,
    pub u: Vec<f64>,
    prev_u: Option<Vec<f64>>,
    prev_grad: Option<Vec<f64>>,
    prev_batch: Option<Vec<usize>>,
    pub t: usize,
    pub epsilon: f64,
    pub cfg: TrackerConfig,
    /// Number of (minibatch) gradient evaluations so far.
    pub grad_evals: usize,
}

impl TrackerState {
    /// Starts at `u0` with `Q = I` and `D = I`.
    pub fn new(u0: Vec<f64>, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let f = SymmetricFactorization::identity(u0.len())?;
        let epsilon = cfg.epsilon.value(&f.d);
        Ok(Self {
            f,
            u: u0,
            prev_u: None,
            prev_grad: None,
            prev_batch: None,
            t: 0,
            epsilon,
            cfg,
            grad_evals: 0,
        })
    }

    /// Moves to `u` and forgets the previous point and gradient, keeping the
    /// learned model. The next step forms no secant pair.
    pub fn restart_at(&mut self, u: Vec<f64>) -> Result<()> {
        check_dim(self.u.len(), u.len())?;
        self.u = u;
        self.prev_u = None;
        self.prev_grad = None;
        self.prev_batch = None;
        Ok(())
    }

    /// One iteration on the full objective.
    pub fn step<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<StepReport> {
        check_dim(self.u.len(), obj.dim())?;
        let g = obj.gradient(&self.u);
        self.grad_evals += 1;
        self.prev_batch = None;
        let prev = self.prev_grad.clone();
        self.finish_step(|u| obj.value(u), g, prev, None)
    }

    /// One iteration on the minibatch `batch`. The secant pair uses the
    /// gradient of the same minibatch at both points.
    pub fn step_minibatch<O: MinibatchObjective + ?Sized>(&mut self, obj: &O, batch: &[usize]) -> Result<StepReport> {
        check_dim(self.u.len(), obj.dim())?;
        let g = obj.gradient_on(batch, &self.u);
        self.grad_evals += 1;
        let reuse = !matches!(self.cfg.minibatch, MinibatchPolicy::RecomputePrev { .. })
            && self.prev_batch.as_deref() == Some(batch);
        let prev = match (&self.prev_u, reuse) {
            (None, _) => None,
            (Some(_), true) => self.prev_grad.clone(),
            (Some(pu), false) => {
                self.grad_evals += 1;
                Some(obj.gradient_on(batch, pu))
            }
        };
        self.prev_batch = Some(batch.to_vec());
        self.finish_step(|u| obj.value_on(batch, u), g, prev, None)
    }

    fn finish_step<V>(
        &mut self,
        value: V,
        g: Vec<f64>,
        prev_grad: Option<Vec<f64>>,
        angle: Option<f64>,
    ) -> Result<StepReport>
    where
        V: Fn(&[f64]) -> f64,
    {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: self.t });
        }
        let mut hessian_train_loss = None;
        if let (Some(pu), Some(pg)) = (&self.prev_u, &prev_grad) {
            let du: Vec<f64> = self.u.iter().zip(pu).map(|(a, b)| a - b).collect();
            let dg: Vec<f64> = g.iter().zip(pg).map(|(a, b)| a - b).collect();
            hessian_train_loss = self.learn_secant(&du, &dg)?;
        }

        let loss = value(&self.u);
        let direction = match self.cfg.mode {
            TrackingMode::PlainGd => g.clone(),
            TrackingMode::TrackHessian => match self.cfg.descent {
                DescentRule::InverseHessian => self.f.inverse_apply_with_floor(&g, self.epsilon)?,
                DescentRule::LiteralHessian => self.f.forward(&g)?,
            },
            TrackingMode::TrackInverseHessian => self.f.forward(&g)?,
        };
        let step = match self.cfg.line_search {
            None => self.cfg.beta,
            Some(ls) => {
                let slope: f64 = g.iter().zip(&direction).map(|(a, b)| a * b).sum();
                let mut beta = self.cfg.beta;
                let mut trial = vec![0.0; self.u.len()];
                for _ in 0..ls.max_halvings {
                    for ((t, u), d) in trial.iter_mut().zip(&self.u).zip(&direction) {
                        *t = u - beta * d;
                    }
                    if value(&trial) <= loss - ls.c * beta * slope {
                        break;
                    }
                    beta *= 0.5;
                }
                beta
            }
        };

        let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let next: Vec<f64> = self.u.iter().zip(&direction).map(|(u, d)| u - step * d).collect();
        self.prev_u = Some(std::mem::replace(&mut self.u, next));
        self.prev_grad = Some(g);
        let report = StepReport {
            t: self.t,
            loss,
            grad_norm,
            hessian_train_loss,
            min_d: self.f.d.iter().copied().fold(f64::INFINITY, f64::min),
            max_d: self.f.d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            epsilon: self.epsilon,
            step,
            angle_to_true_hessian: angle,
        };
        self.t += 1;
        Ok(report)
    }

    /// One relaxed SGD step on the secant pair, followed by projection and
    /// the eigenvalue floor. Returns the pair's loss before the update, or
    /// `None` when the pair was skipped.
    fn learn_secant(&mut self, du: &[f64], dg: &[f64]) -> Result<Option<f64>> {
        let Some(sample) = secant_sample(du, dg, self.cfg.mode) else {
            return Ok(None);
        };
        let grad = self.f.loss_gradient(&sample)?;
        let pair_loss = self.f.loss(&sample)?;
        let (lr_q, lr_d) = if self.cfg.gain_normalized {
            let sx: f64 = sample.x.iter().map(|v| v * v).sum();
            let sy: f64 = sample.y.iter().map(|v| v * v).sum();
            let scaled = |lr: f64, s: f64| if s.is_finite() && s > 0.0 { lr / s } else { lr };
            (scaled(self.cfg.lr_q, sy), scaled(self.cfg.lr_d, sx))
        } else {
            (self.cfg.lr_q, self.cfg.lr_d)
        };
        self.f.sgd_update(&grad, lr_q, lr_d);
        self.f.q.project_with(self.cfg.degenerate_policy)?;
        self.epsilon = self.cfg.epsilon.value(&self.f.d);
        let eps = self.epsilon;
        for d in self.f.d.iter_mut() {
            if *d < 0.0 {
                *d = eps;
            }
        }
        Ok(Some(pair_loss))
    }

    /// Mean angle between the tracked model and a dense reference Hessian.
    pub fn angle_to(&self, h: &nalgebra::DMatrix<f64>, m: usize, seed: u64) -> Result<f64> {
        let stats = average_angle(&self.f, |x| dense_apply(h, x), m, Sampler::UnitSphere, seed)?;
        Ok(stats.mean_deg)
    }
}

/// The rescaled training pair for a secant `(du, dg)`: `(du, dg) / ||du||`
/// when tracking `H`, `(dg, du) / ||du||` when tracking `H^-1`. `None` when
/// the pair must be skipped.
pub fn secant_sample(du: &[f64], dg: &[f64], mode: TrackingMode) -> Option<TrainSample> {
    let (x, y) = match mode {
        TrackingMode::PlainGd => return None,
        TrackingMode::TrackHessian => (du, dg),
        TrackingMode::TrackInverseHessian => (dg, du),
    };
    let norm_du = du.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_x = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm_du >= MIN_STEP_NORM) || !(norm_x >= MIN_STEP_NORM) || !dg.iter().all(|v| v.is_finite()) {
        return None;
    }
    let scale = 1.0 / norm_du;
    Some(TrainSample::new(
        x.iter().map(|v| v * scale).collect(),
        y.iter().map(|v| v * scale).collect(),
    ))
}

/// Run log: one [`StepReport`] per iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<StepReport>,
}

impl RunLog {
    /// `t,loss,grad_norm,hessian_train_loss,min_d,max_d,angle_to_true_hessian`;
    /// absent values are empty fields.
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut s = String::from("t,loss,grad_norm,hessian_train_loss,min_d,max_d,angle_to_true_hessian\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.t,
                r.loss,
                r.grad_norm,
                opt(r.hessian_train_loss),
                r.min_d,
                r.max_d,
                opt(r.angle_to_true_hessian)
            ));
        }
        s
    }

    /// First iteration whose loss is at or below `target`.
    pub fn iterations_to(&self, target: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.loss <= target).map(|r| r.t)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// Options for [`run`] and [`run_minibatch`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub max_steps: usize,
    /// Stop once the loss reaches this value.
    pub target_loss: Option<f64>,
    /// Dense reference Hessian for the angle column, with the number of test
    /// vectors used per measurement.
    pub true_hessian: Option<(&'a nalgebra::DMatrix<f64>, usize)>,
}

/// Full-batch run of up to `opts.max_steps` iterations.
pub fn run<O: Objective + ?Sized>(state: &mut TrackerState, obj: &O, opts: &RunOptions) -> Result<RunLog> {
    let mut log = RunLog::default();
    for _ in 0..opts.max_steps {
        let mut r = state.step(obj)?;
        if let Some((h, m)) = opts.true_hessian {
            r.angle_to_true_hessian = Some(state.angle_to(h, m, 0)?);
        }
        let done = opts.target_loss.is_some_and(|t| r.loss <= t);
        log.rows.push(r);
        if done {
            break;
        }
    }
    Ok(log)
}

/// Minibatch run; batches are chosen by `state.cfg.minibatch` from a
/// ChaCha stream seeded with `seed`. The logged loss is the full objective.
pub fn run_minibatch<O: MinibatchObjective + ?Sized>(
    state: &mut TrackerState,
    obj: &O,
    opts: &RunOptions,
    seed: u64,
) -> Result<RunLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = obj.num_examples();
    let mut log = RunLog::default();
    let mut batch: Vec<usize> = Vec::new();
    for k in 0..opts.max_steps {
        let (size, r) = match state.cfg.minibatch {
            MinibatchPolicy::FullBatch => (m, usize::MAX),
            MinibatchPolicy::RecomputePrev { size } => (size, 1),
            MinibatchPolicy::Reuse { size, r } => (size, r),
        };
        if batch.is_empty() || (r != usize::MAX && k % r == 0) {
            batch = if size >= m { obj.all_examples() } else { draw_batch(&mut rng, m, size) };
        }
        let full_loss = obj.value(&state.u);
        let mut rep = state.step_minibatch(obj, &batch)?;
        rep.loss = full_loss;
        if let Some((h, mm)) = opts.true_hessian {
            rep.angle_to_true_hessian = Some(state.angle_to(h, mm, 0)?);
        }
        let done = opts.target_loss.is_some_and(|t| full_loss <= t);
        log.rows.push(rep);
        if done {
            break;
        }
    }
    Ok(log)
}
