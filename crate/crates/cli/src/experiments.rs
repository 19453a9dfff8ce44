//! Experiment runs as pure functions of their parameters. The `commands`
//! layer parses configs and writes files; everything here returns values.

use butterfly_hessian::factorization::{train_rotation_with_restarts, train_with_restarts, RestartPolicy};
use butterfly_hessian::hesstrack::{
    run, run_minibatch, Basis, DescentRule, LeastSquares, Logistic, Quadratic, Rosenbrock, RunOptions,
};
use butterfly_hessian::synth::{dense_apply, sample_unit_sphere};
use butterfly_hessian::{
    average_angle_between, AngleStats, ButterflyProduct, Error, MinibatchPolicy, OpCounter, RunLog,
    SymmetricFactorization, SyntheticSpec, Trace, TrackerConfig, TrackerState, TrackingMode, TrainConfig, TrainSample,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{covariance, pad_matrix, pad_vec, DatasetMatrix};
use crate::error::{CliError, CliResult};

/// Independent seed for sub-stream `stream` of a run seeded with `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    /// Training vectors.
    pub m: usize,
    /// Held-out unit-sphere vectors for the angle metric.
    pub test_m: usize,
    pub epochs: usize,
    pub lr_q: f64,
    pub lr_d: f64,
    pub lr_decay: f64,
    /// Measure the angle every this many epochs (and after the last one).
    pub eval_every: usize,
    pub restarts: usize,
    /// Restarts stop once the loss ratio to the initial model reaches this.
    pub target_ratio: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            m: 1000,
            test_m: 1000,
            epochs: 500,
            lr_q: 0.05,
            lr_d: 0.005,
            lr_decay: 1.0,
            eval_every: 10,
            restarts: 1,
            target_ratio: 0.0,
        }
    }
}

impl TrainParams {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr_q: self.lr_q,
            lr_d: self.lr_d,
            lr_decay: self.lr_decay,
            epochs: self.epochs,
            rng_seed: seed,
            ..Default::default()
        }
    }

    fn policy(&self) -> RestartPolicy {
        RestartPolicy {
            max_starts: self.restarts.max(1),
            target_ratio: self.target_ratio,
        }
    }

    fn measure_at(&self, epoch: usize) -> bool {
        epoch == self.epochs || (self.eval_every > 0 && epoch % self.eval_every == 0)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.m == 0 || self.test_m == 0 || self.epochs == 0 {
            return Err(CliError::Config("m, test_m and epochs must be >= 1".into()));
        }
        self.config(0).validate()?;
        Ok(())
    }
}

fn check_dim(n: usize) -> CliResult<()> {
    if n < 2 || !n.is_power_of_two() {
        return Err(CliError::Config(format!("n must be a power of two >= 2, got {n}")));
    }
    Ok(())
}

/// What the symmetric model is trained to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymmetricTarget {
    /// `R Lambda R^T` with `n_mu` dominant eigenvalues.
    Synthetic { n_mu: usize },
    /// `Q D Q^T` with a random butterfly `Q` and `d ~ U(0.1, 2)`.
    ExactButterfly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationTarget {
    Haar,
    ExactButterfly,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub trace: Trace,
    pub final_angle: f64,
    /// Full-set mean loss of the initial model.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub starts: usize,
}

/// Dense target matrix for a symmetric run.
pub fn symmetric_target(n: usize, target: SymmetricTarget, seed: u64) -> CliResult<DMatrix<f64>> {
    check_dim(n)?;
    let s = derive_seed(seed, 0);
    Ok(match target {
        SymmetricTarget::Synthetic { n_mu } => butterfly_hessian::synthetic_hessian(&SyntheticSpec::new(n, n_mu, s))?.h,
        SymmetricTarget::ExactButterfly => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let q = ButterflyProduct::random(n, &mut rng)?;
            let d = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            SymmetricFactorization::new(q, d)?.to_dense()
        }
    })
}

pub fn rotation_target(n: usize, target: RotationTarget, seed: u64) -> CliResult<DMatrix<f64>> {
    check_dim(n)?;
    let s = derive_seed(seed, 0);
    Ok(match target {
        RotationTarget::Haar => butterfly_hessian::haar_rotation(n, s),
        RotationTarget::ExactButterfly => ButterflyProduct::random(n, &mut ChaCha8Rng::seed_from_u64(s))?.to_dense(),
    })
}

/// Trains `Q D Q^T` from the identity against `h` on unit-sphere samples.
pub fn symmetric_run(h: &DMatrix<f64>, seed: u64, p: &TrainParams) -> CliResult<(RunResult, SymmetricFactorization)> {
    p.validate()?;
    let n = h.nrows();
    let xs = sample_unit_sphere(n, p.m, derive_seed(seed, 1));
    let test = sample_unit_sphere(n, p.test_m, derive_seed(seed, 2));
    let samples = TrainSample::from_oracle(&xs, |x| dense_apply(h, x));
    let angle = |f: &SymmetricFactorization| {
        average_angle_between(|x| f.forward(x).expect("dimension checked"), |x| dense_apply(h, x), &test)
    };
    let init = SymmetricFactorization::identity(n)?;
    let out = train_with_restarts(&init, &samples, &p.config(derive_seed(seed, 3)), p.policy(), |_, e, f| {
        p.measure_at(e).then(|| angle(f).ok().map(|a| a.mean_deg)).flatten()
    })?;
    let final_angle = angle(&out.model)?.mean_deg;
    Ok((
        RunResult {
            seed,
            trace: out.trace,
            final_angle,
            initial_loss: out.initial_loss,
            final_loss: out.final_loss,
            starts: out.starts,
        },
        out.model,
    ))
}

/// Trains a single butterfly `Q` from the identity against rotation `r`.
pub fn rotation_run(r: &DMatrix<f64>, seed: u64, p: &TrainParams) -> CliResult<(RunResult, ButterflyProduct)> {
    p.validate()?;
    let n = r.nrows();
    let xs = sample_unit_sphere(n, p.m, derive_seed(seed, 1));
    let test = sample_unit_sphere(n, p.test_m, derive_seed(seed, 2));
    let samples = TrainSample::from_oracle(&xs, |x| dense_apply(r, x));
    let angle = |q: &ButterflyProduct| {
        average_angle_between(|x| q.apply(x).expect("dimension checked"), |x| dense_apply(r, x), &test)
    };
    let init = ButterflyProduct::identity(n)?;
    let out = train_rotation_with_restarts(&init, &samples, &p.config(derive_seed(seed, 3)), p.policy(), |_, e, q| {
        p.measure_at(e).then(|| angle(q).ok().map(|a| a.mean_deg)).flatten()
    })?;
    let final_angle = angle(&out.model)?.mean_deg;
    Ok((
        RunResult {
            seed,
            trace: out.trace,
            final_angle,
            initial_loss: out.initial_loss,
            final_loss: out.final_loss,
            starts: out.starts,
        },
        out.model,
    ))
}

/// Seeds `base, base + 1, ...` for `count` replicas.
pub fn replica_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| base.wrapping_add(k)).collect()
}

/// One symmetric run per seed, in parallel; results keep seed order.
pub fn symmetric_replicas(
    n: usize,
    target: SymmetricTarget,
    seeds: &[u64],
    p: &TrainParams,
) -> CliResult<Vec<(RunResult, SymmetricFactorization)>> {
    seeds
        .par_iter()
        .map(|&s| symmetric_run(&symmetric_target(n, target, s)?, s, p))
        .collect()
}

pub fn rotation_replicas(
    n: usize,
    target: RotationTarget,
    seeds: &[u64],
    p: &TrainParams,
) -> CliResult<Vec<(RunResult, ButterflyProduct)>> {
    seeds
        .par_iter()
        .map(|&s| rotation_run(&rotation_target(n, target, s)?, s, p))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub n_mu: usize,
    pub seed: u64,
    pub final_angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub n_mu: usize,
    pub mean_angle: f64,
    pub std_angle: f64,
    pub runs: usize,
}

/// Seed of grid point `(n_mu, replica seed)`: each point draws its own
/// matrix and samples.
pub fn sweep_point_seed(seed: u64, n_mu: usize) -> u64 {
    derive_seed(seed, 0x1_0000 + n_mu as u64)
}

pub fn nmu_sweep(n: usize, n_mus: &[usize], seeds: &[u64], p: &TrainParams) -> CliResult<Vec<SweepPoint>> {
    check_dim(n)?;
    if let Some(bad) = n_mus.iter().find(|&&k| k > n) {
        return Err(CliError::Config(format!("n_mu = {bad} exceeds n = {n}")));
    }
    let grid: Vec<(usize, u64)> = n_mus.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    grid.par_iter()
        .map(|&(n_mu, seed)| {
            let ps = sweep_point_seed(seed, n_mu);
            let h = symmetric_target(n, SymmetricTarget::Synthetic { n_mu }, ps)?;
            let (r, _) = symmetric_run(&h, ps, p)?;
            Ok(SweepPoint { n_mu, seed, final_angle: r.final_angle })
        })
        .collect()
}

/// Mean and sample standard deviation per `n_mu`, in first-seen order.
pub fn summarize_sweep(points: &[SweepPoint]) -> Vec<SweepSummary> {
    let mut order: Vec<usize> = Vec::new();
    for p in points {
        if !order.contains(&p.n_mu) {
            order.push(p.n_mu);
        }
    }
    order
        .into_iter()
        .map(|n_mu| {
            let a: Vec<f64> = points.iter().filter(|p| p.n_mu == n_mu).map(|p| p.final_angle).collect();
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            let var = if a.len() > 1 {
                a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (a.len() - 1) as f64
            } else {
                0.0
            };
            SweepSummary { n_mu, mean_angle: mean, std_angle: var.sqrt(), runs: a.len() }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceParams {
    pub train: TrainParams,
    /// Share of training vectors drawn from the centered data; the rest are
    /// unit-sphere samples.
    pub data_fraction: f64,
    pub seed: u64,
}

impl Default for CovarianceParams {
    fn default() -> Self {
        Self {
            train: TrainParams { m: 2000, epochs: 100, ..Default::default() },
            data_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceResult {
    pub n_raw: usize,
    pub n_pad: usize,
    pub covariance: DMatrix<f64>,
    pub model: SymmetricFactorization,
    pub trace: Trace,
    /// `Err(NoValidSamples)` when every test output is zero, e.g. `C = 0`.
    pub angle: Result<AngleStats, Error>,
    pub provenance: String,
}

impl CovarianceResult {
    /// Learned matrix restricted to the unpadded coordinates.
    pub fn learned_unpadded(&self) -> DMatrix<f64> {
        self.model.to_dense().view((0, 0), (self.n_raw, self.n_raw)).into_owned()
    }
}

/// Angle between the first `n_raw` coordinates of model and oracle outputs,
/// on inputs supported on those coordinates.
pub fn unpadded_angle(
    f: &SymmetricFactorization,
    c: &DMatrix<f64>,
    n_raw: usize,
    test: &[Vec<f64>],
) -> Result<AngleStats, Error> {
    let cv = c.view((0, 0), (n_raw, n_raw));
    average_angle_between(
        |x| f.forward(x).expect("dimension checked")[..n_raw].to_vec(),
        |x| (cv * DVector::from_column_slice(&x[..n_raw])).as_slice().to_vec(),
        test,
    )
}

/// Learns the covariance of `ds` (rows are samples).
pub fn covariance_run(mut ds: DatasetMatrix, p: &CovarianceParams) -> CliResult<CovarianceResult> {
    p.train.validate()?;
    if !(0.0..=1.0).contains(&p.data_fraction) {
        return Err(CliError::Config(format!("data_fraction must be in [0, 1], got {}", p.data_fraction)));
    }
    let n_raw = ds.cols_raw();
    let n_pad = n_raw.next_power_of_two().max(2);
    let c = covariance(&mut ds);
    let cp = pad_matrix(&c, n_pad);

    let m_data = (p.train.m as f64 * p.data_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(p.seed, 1));
    let rows: Vec<usize> = if m_data <= ds.rows() {
        butterfly_hessian::factorization::draw_batch(&mut rng, ds.rows(), m_data)
    } else {
        (0..m_data).map(|_| rng.random_range(0..ds.rows())).collect()
    };
    // centered rows scaled to unit length, like the sphere samples
    let mut xs: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| {
            let mut x = ds.row(i);
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                x.iter_mut().for_each(|v| *v /= norm);
            }
            pad_vec(&x, n_pad)
        })
        .collect();
    xs.extend(sample_unit_sphere(n_pad, p.train.m - m_data, derive_seed(p.seed, 2)));
    let samples = TrainSample::from_oracle(&xs, |x| dense_apply(&cp, x));

    let test: Vec<Vec<f64>> = sample_unit_sphere(n_raw, p.train.test_m, derive_seed(p.seed, 3))
        .iter()
        .map(|x| pad_vec(x, n_pad))
        .collect();
    let init = SymmetricFactorization::identity(n_pad)?;
    let out = train_with_restarts(&init, &samples, &p.train.config(derive_seed(p.seed, 4)), p.train.policy(), |_, e, f| {
        p.train.measure_at(e).then(|| unpadded_angle(f, &cp, n_raw, &test).ok().map(|a| a.mean_deg)).flatten()
    })?;
    let angle = unpadded_angle(&out.model, &cp, n_raw, &test);
    let mut provenance = ds.provenance.clone();
    provenance.push_str(&format!("; centered; {n_raw} columns zero-padded to {n_pad}"));
    Ok(CovarianceResult {
        n_raw,
        n_pad,
        covariance: c,
        model: out.model,
        trace: out.trace,
        angle,
        provenance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Quadratic,
    Lstsq,
    Logistic,
    Rosenbrock,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "lstsq" => Ok(Self::Lstsq),
            "logistic" => Ok(Self::Logistic),
            "rosenbrock" => Ok(Self::Rosenbrock),
            _ => Err(format!("unknown objective {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeParams {
    pub objective: ObjectiveKind,
    pub n: usize,
    /// Condition number of the quadratic and least-squares problems.
    pub cond: f64,
    /// Examples in the least-squares and logistic data sets.
    pub examples: usize,
    pub lambda: f64,
    pub noise: f64,
    pub mode: TrackingMode,
    pub descent: DescentRule,
    pub minibatch: MinibatchPolicy,
    /// Step sizes tried for the tracked run; the best one is reported.
    pub betas: Vec<f64>,
    /// Step sizes tried for the plain gradient-descent baseline.
    pub gd_betas: Vec<f64>,
    pub steps: usize,
    pub target: Option<f64>,
    pub line_search: bool,
    pub lr_q: f64,
    pub lr_d: f64,
    /// `u0` is this radius times a unit-sphere sample.
    pub start_radius: f64,
    pub seed: u64,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        let t = TrackerConfig::default();
        Self {
            objective: ObjectiveKind::Quadratic,
            n: 64,
            cond: 100.0,
            examples: 2000,
            lambda: 1e-3,
            noise: 0.1,
            mode: TrackingMode::TrackHessian,
            descent: DescentRule::InverseHessian,
            minibatch: MinibatchPolicy::FullBatch,
            betas: vec![0.5],
            gd_betas: vec![0.5],
            steps: 1000,
            target: None,
            line_search: false,
            lr_q: t.lr_q,
            lr_d: t.lr_d,
            start_radius: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeRun {
    pub mode: TrackingMode,
    pub beta: f64,
    pub log: RunLog,
    pub grad_evals: usize,
    pub iterations_to_target: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub tracked: OptimizeRun,
    pub baseline: OptimizeRun,
    pub true_hessian: Option<DMatrix<f64>>,
}

enum Problem {
    Quadratic(Quadratic),
    Lstsq(LeastSquares),
    Logistic(Logistic),
    Rosenbrock(Rosenbrock),
}

impl Problem {
    fn build(p: &OptimizeParams) -> Self {
        let s = derive_seed(p.seed, 0);
        match p.objective {
            ObjectiveKind::Quadratic => Problem::Quadratic(Quadratic::log_spaced(p.n, p.cond, Basis::Haar, s)),
            ObjectiveKind::Lstsq => Problem::Lstsq(LeastSquares::synthetic(p.examples, p.n, p.cond, p.noise, s)),
            ObjectiveKind::Logistic => Problem::Logistic(Logistic::synthetic(p.examples, p.n, p.lambda, s)),
            ObjectiveKind::Rosenbrock => Problem::Rosenbrock(Rosenbrock { n: p.n }),
        }
    }

    fn run(&self, state: &mut TrackerState, opts: &RunOptions, batch_seed: u64) -> butterfly_hessian::Result<RunLog> {
        let full = state.cfg.minibatch == MinibatchPolicy::FullBatch;
        match self {
            Problem::Quadratic(o) => run(state, o, opts),
            Problem::Rosenbrock(o) => run(state, o, opts),
            Problem::Lstsq(o) if full => run(state, o, opts),
            Problem::Logistic(o) if full => run(state, o, opts),
            Problem::Lstsq(o) => run_minibatch(state, o, opts, batch_seed),
            Problem::Logistic(o) => run_minibatch(state, o, opts, batch_seed),
        }
    }

    fn supports_minibatch(&self) -> bool {
        matches!(self, Problem::Lstsq(_) | Problem::Logistic(_))
    }
}

impl OptimizeParams {
    pub fn validate(&self) -> CliResult<()> {
        check_dim(self.n)?;
        if self.betas.is_empty() || self.gd_betas.is_empty() {
            return Err(CliError::Config("beta lists must not be empty".into()));
        }
        if self.steps == 0 {
            return Err(CliError::Config("steps must be >= 1".into()));
        }
        if self.objective == ObjectiveKind::Rosenbrock && self.minibatch != MinibatchPolicy::FullBatch {
            return Err(CliError::Config("minibatch policies need lstsq or logistic".into()));
        }
        if self.objective == ObjectiveKind::Quadratic && self.minibatch != MinibatchPolicy::FullBatch {
            return Err(CliError::Config("minibatch policies need lstsq or logistic".into()));
        }
        Ok(())
    }

    fn tracker_config(&self, mode: TrackingMode, beta: f64) -> TrackerConfig {
        let base = if mode == TrackingMode::PlainGd { TrackerConfig::plain_gd(beta) } else { TrackerConfig::default() };
        TrackerConfig {
            mode,
            descent: self.descent,
            lr_q: self.lr_q,
            lr_d: self.lr_d,
            beta,
            line_search: self.line_search.then(Default::default),
            minibatch: self.minibatch,
            ..base
        }
    }

    pub fn start(&self) -> Vec<f64> {
        sample_unit_sphere(self.n, 1, derive_seed(self.seed, 1))[0]
            .iter()
            .map(|v| v * self.start_radius)
            .collect()
    }
}

/// Runs `mode` at every step size in `betas` and keeps the best run: fewest
/// iterations to the target when one is set, otherwise lowest final loss.
/// Step sizes whose run diverges are dropped.
fn best_run(p: &OptimizeParams, problem: &Problem, mode: TrackingMode, betas: &[f64]) -> CliResult<OptimizeRun> {
    let opts = RunOptions { max_steps: p.steps, target_loss: p.target, true_hessian: None };
    let runs: Vec<OptimizeRun> = betas
        .iter()
        .filter_map(|&beta| {
            let cfg = p.tracker_config(mode, beta);
            let mut state = match TrackerState::new(p.start(), cfg) {
                Ok(s) => s,
                Err(e) => return Some(Err(CliError::from(e))),
            };
            match problem.run(&mut state, &opts, derive_seed(p.seed, 2)) {
                Ok(log) => {
                    let iterations_to_target = p.target.and_then(|t| log.iterations_to(t));
                    Some(Ok(OptimizeRun { mode, beta, grad_evals: state.grad_evals, log, iterations_to_target }))
                }
                Err(Error::Diverged { .. }) => None,
                Err(e) => Some(Err(e.into())),
            }
        })
        .collect::<CliResult<_>>()?;
    let key = |r: &OptimizeRun| {
        let last = r.log.final_loss().unwrap_or(f64::INFINITY);
        (r.iterations_to_target.unwrap_or(usize::MAX), if last.is_finite() { last } else { f64::INFINITY })
    };
    runs.into_iter()
        .min_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite keys"))
        .ok_or_else(|| CliError::Core(Error::Diverged { step: 0 }))
}

pub fn optimize(p: &OptimizeParams) -> CliResult<OptimizeResult> {
    p.validate()?;
    let problem = Problem::build(p);
    if p.minibatch != MinibatchPolicy::FullBatch && !problem.supports_minibatch() {
        return Err(CliError::Config("minibatch policies need lstsq or logistic".into()));
    }
    let (tracked, baseline) = rayon::join(
        || best_run(p, &problem, p.mode, &p.betas),
        || best_run(p, &problem, TrackingMode::PlainGd, &p.gd_betas),
    );
    let true_hessian = match &problem {
        Problem::Quadratic(q) => Some(q.hessian().clone()),
        _ => None,
    };
    Ok(OptimizeResult { tracked: tracked?, baseline: baseline?, true_hessian })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub op: &'static str,
    pub mul_adds: u64,
    pub formula: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub n: usize,
    pub op: &'static str,
    pub ns_per_call: f64,
}

/// Counted MulAdds of every operation against its closed form. Dense
/// mat-vec is counted as one MulAdd per matrix entry.
pub fn bench_counts(sizes: &[usize], seed: u64) -> CliResult<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        check_dim(n)?;
        let lg = n.trailing_zeros() as u64;
        let nn = n as u64;
        let f = bench_model(n, seed)?;
        let x = sample_unit_sphere(n, 1, derive_seed(seed, 1)).remove(0);
        let mut c = OpCounter::new();
        f.forward_counted(&x, Some(&mut c))?;
        rows.push(BenchRow { n, op: "forward", mul_adds: c.mul_adds, formula: 4 * nn * lg + nn });
        let mut c = OpCounter::new();
        f.quadratic_form_counted(&x, Some(&mut c))?;
        rows.push(BenchRow { n, op: "quadratic_form", mul_adds: c.mul_adds, formula: 2 * nn * lg + 2 * nn });
        let mut c = OpCounter::new();
        f.q.apply_counted(&x, Some(&mut c))?;
        rows.push(BenchRow { n, op: "apply", mul_adds: c.mul_adds, formula: 2 * nn * lg });
        rows.push(BenchRow { n, op: "dense_matvec", mul_adds: nn * nn, formula: nn * nn });
        rows.push(BenchRow {
            n,
            op: "relaxed_params",
            mul_adds: f.num_params() as u64,
            formula: 2 * nn * lg + nn,
        });
    }
    Ok(rows)
}

fn bench_model(n: usize, seed: u64) -> CliResult<SymmetricFactorization> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let q = ButterflyProduct::random(n, &mut rng)?;
    let d = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
    Ok(SymmetricFactorization::new(q, d)?)
}

/// Wall time per call of the factored forward pass and a dense mat-vec
/// with the same matrix. Timings vary run to run.
pub fn bench_timing(sizes: &[usize], seed: u64, min_time: std::time::Duration) -> CliResult<Vec<TimingRow>> {
    use std::hint::black_box;
    use std::time::Instant;
    let time = |f: &mut dyn FnMut()| {
        let mut calls = 0u64;
        let start = Instant::now();
        while calls == 0 || start.elapsed() < min_time {
            f();
            calls += 1;
        }
        start.elapsed().as_nanos() as f64 / calls as f64
    };
    let mut rows = Vec::new();
    for &n in sizes {
        check_dim(n)?;
        let f = bench_model(n, seed)?;
        let dense = f.to_dense();
        let x = sample_unit_sphere(n, 1, derive_seed(seed, 1)).remove(0);
        let xv = DVector::from_column_slice(&x);
        let t_fwd = time(&mut || {
            black_box(f.forward(black_box(&x)).expect("dimension checked"));
        });
        let t_dense = time(&mut || {
            black_box(&dense * black_box(&xv));
        });
        rows.push(TimingRow { n, op: "forward", ns_per_call: t_fwd });
        rows.push(TimingRow { n, op: "dense_matvec", ns_per_call: t_dense });
    }
    Ok(rows)
}
