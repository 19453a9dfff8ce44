//! The learnable symmetric model `H_hat = Q D Q^T`.
//!
//! Seen as a network, `x -> Q D Q^T x` is a stack of `2 lg(n) + 1` sparse
//! linear layers: `Q_1^T, ..., Q_L^T`, the diagonal `D`, then
//! `Q_L, ..., Q_1`. Each `Q_i` appears twice (once transposed), so gradients
//! with respect to its relaxed coefficients are the sum of two contributions.

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::butterfly::{tally, ButterflyLayer, ButterflyProduct, DegeneratePolicy, OpCounter};
use crate::error::{check_dim, Error, Result};
use crate::synth::Sampler;

/// Inputs whose norm is below this are skipped by the angle metric.
pub const ANGLE_NORM_FLOOR: f64 = 1e-300;

/// Default floor applied to `D` when inverting.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricFactorization {
    pub q: ButterflyProduct,
    pub d: Vec<f64>,
    pub eig_floor: f64,
}

/// One training pair: the model should map `x` to `y = H x`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl TrainSample {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        Self { x, y }
    }

    /// Builds `(x, oracle(x))` for every input.
    pub fn from_oracle<F>(xs: &[Vec<f64>], oracle: F) -> Vec<TrainSample>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        xs.iter()
            .map(|x| TrainSample::new(x.clone(), oracle(x)))
            .collect()
    }

    fn validate(&self, n: usize) -> Result<()> {
        check_dim(n, self.x.len())?;
        check_dim(n, self.y.len())?;
        if !self.x.iter().chain(&self.y).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite training sample".into()));
        }
        Ok(())
    }
}

/// Gradient of a least-squares loss with respect to every relaxed parameter.
///
/// `q` uses the layout of [`ButterflyProduct::params`]; `d` holds the
/// diagonal part (empty for the rotation-only network).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub q: Vec<f64>,
    pub d: Vec<f64>,
}

impl GradientRecord {
    fn zeros(num_q: usize, n_diag: usize) -> Self {
        Self {
            q: vec![0.0; num_q],
            d: vec![0.0; n_diag],
        }
    }

    /// `(da, db, dc, dd)` for block `k` of the 1-based layer `layer`.
    pub fn block(&self, layer: usize, k: usize, n: usize) -> [f64; 4] {
        let off = 2 * n * (layer - 1) + 4 * k;
        [self.q[off], self.q[off + 1], self.q[off + 2], self.q[off + 3]]
    }

    /// Rotation part followed by the diagonal part.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.q.clone();
        v.extend_from_slice(&self.d);
        v
    }

    fn add_scaled(&mut self, other: &GradientRecord, s: f64) {
        for (a, b) in self.q.iter_mut().zip(&other.q) {
            *a += s * b;
        }
        for (a, b) in self.d.iter_mut().zip(&other.d) {
            *a += s * b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.q.iter_mut().chain(self.d.iter_mut()).for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.q.iter().chain(&self.d).fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl SymmetricFactorization {
    /// Identity rotation and `D = I`.
    pub fn identity(n: usize) -> Result<Self> {
        Ok(Self {
            q: ButterflyProduct::identity(n)?,
            d: vec![1.0; n],
            eig_floor: DEFAULT_EIG_FLOOR,
        })
    }

    pub fn new(q: ButterflyProduct, d: Vec<f64>) -> Result<Self> {
        check_dim(q.dim(), d.len())?;
        Ok(Self {
            q,
            d,
            eig_floor: DEFAULT_EIG_FLOOR,
        })
    }

    /// Uniform random angles in `[-pi, pi)` and `D = I`.
    pub fn random_rotation(n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(ButterflyProduct::random(n, &mut rng)?, vec![1.0; n])
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    /// Stored relaxed parameters: `2 n lg(n) + n`.
    pub fn num_params(&self) -> usize {
        self.q.num_relaxed_params() + self.d.len()
    }

    /// Rotation coefficients followed by the diagonal.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.q.params();
        p.extend_from_slice(&self.d);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        let split = self.q.num_relaxed_params();
        self.q.set_params(&params[..split])?;
        self.d.copy_from_slice(&params[split..]);
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_counted(x, None)
    }

    /// `Q (d .* (Q^T x))`, costing `4 n lg(n) + n` MulAdds.
    pub fn forward_counted(&self, x: &[f64], mut counter: Option<&mut OpCounter>) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut z = x.to_vec();
        self.q.apply_transpose_in_place(&mut z, counter.as_deref_mut());
        for (zi, di) in z.iter_mut().zip(&self.d) {
            *zi *= di;
        }
        tally(&mut counter, self.d.len() as u64);
        self.q.apply_in_place(&mut z, counter);
        Ok(z)
    }

    /// Applies the inverse with `D` floored at `self.eig_floor`.
    pub fn inverse_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.inverse_apply_with_floor(x, self.eig_floor)
    }

    /// `Q (max(d, eps)^-1 .* (Q^T x))`. Negative and tiny entries of `d`
    /// are raised to `eps`.
    pub fn inverse_apply_with_floor(&self, x: &[f64], eps: f64) -> Result<Vec<f64>> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eigenvalue floor must be > 0, got {eps}")));
        }
        check_dim(self.dim(), x.len())?;
        let mut z = x.to_vec();
        self.q.apply_transpose_in_place(&mut z, None);
        for (zi, di) in z.iter_mut().zip(&self.d) {
            *zi /= di.max(eps);
        }
        self.q.apply_in_place(&mut z, None);
        Ok(z)
    }

    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64> {
        self.quadratic_form_counted(x, None)
    }

    /// `x^T Q D Q^T x = sum_i d_i (Q^T x)_i^2`, costing `2 n lg(n) + 2 n`.
    pub fn quadratic_form_counted(&self, x: &[f64], mut counter: Option<&mut OpCounter>) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let mut z = x.to_vec();
        self.q.apply_transpose_in_place(&mut z, counter.as_deref_mut());
        let s = z.iter().zip(&self.d).map(|(zi, di)| di * zi * zi).sum();
        tally(&mut counter, 2 * self.d.len() as u64);
        Ok(s)
    }

    /// `|| Q D Q^T x - y ||^2`.
    pub fn loss(&self, sample: &TrainSample) -> Result<f64> {
        check_dim(self.dim(), sample.y.len())?;
        let out = self.forward(&sample.x)?;
        Ok(squared_distance(&out, &sample.y))
    }

    pub fn loss_gradient(&self, sample: &TrainSample) -> Result<GradientRecord> {
        self.loss_gradient_counted(sample, None)
    }

    /// Exact gradient of [`loss`](Self::loss) by backpropagation. The count
    /// covers the forward pass plus the backward pass through all
    /// `2 lg(n) + 1` layers.
    pub fn loss_gradient_counted(
        &self,
        sample: &TrainSample,
        counter: Option<&mut OpCounter>,
    ) -> Result<GradientRecord> {
        sample.validate(self.dim())?;
        let mut tape = Tape::new(self.dim(), self.q.log_dim());
        let mut grad = GradientRecord::zeros(self.q.num_relaxed_params(), self.dim());
        tape.symmetric_gradient(self, sample, &mut grad, None, counter);
        Ok(grad)
    }

    /// Gradient split into the contribution of the `Q_i` pass and of the
    /// `Q_i^T` pass. Their sum is [`loss_gradient`](Self::loss_gradient).
    #[cfg(test)]
    pub(crate) fn loss_gradient_parts(&self, sample: &TrainSample) -> (GradientRecord, GradientRecord) {
        let mut tape = Tape::new(self.dim(), self.q.log_dim());
        let mut forward = GradientRecord::zeros(self.q.num_relaxed_params(), self.dim());
        let mut transpose = GradientRecord::zeros(self.q.num_relaxed_params(), 0);
        tape.symmetric_gradient(self, sample, &mut forward, Some(&mut transpose), None);
        (forward, transpose)
    }

    /// Subtracts `lr_q * grad.q` from the rotation part and `lr_d * grad.d`
    /// from the diagonal. Does not project.
    pub fn sgd_update(&mut self, grad: &GradientRecord, lr_q: f64, lr_d: f64) {
        sgd_update_product(&mut self.q, &grad.q, lr_q);
        for (di, gi) in self.d.iter_mut().zip(&grad.d) {
            *di -= lr_d * gi;
        }
    }

    /// `Q diag(d) Q^T` as a dense matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let q = self.q.to_dense();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.d));
        &q * d * q.transpose()
    }

    /// Fits the model to `samples` with SGD on the relaxed parameters,
    /// projecting after every update.
    ///
    /// `on_epoch` runs after each epoch and may return an angle measurement
    /// to store in the trace.
    pub fn train<C>(&mut self, samples: &[TrainSample], cfg: &TrainConfig, mut on_epoch: C) -> Result<Trace>
    where
        C: FnMut(usize, &SymmetricFactorization) -> Option<f64>,
    {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        for s in samples {
            s.validate(self.dim())?;
        }
        let n = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut tape = Tape::new(n, self.q.log_dim());
        let num_q = self.q.num_relaxed_params();
        let mut grad = GradientRecord::zeros(num_q, n);
        let mut acc = GradientRecord::zeros(num_q, n);
        let batch = cfg.batch_mode.size();
        let updates_per_epoch = samples.len().div_ceil(batch);
        let gain = if cfg.gain_normalized { squared_gain(samples) } else { 1.0 };
        let mut trace = Trace::default();

        for epoch in 1..=cfg.epochs {
            let decay = cfg.lr_decay.powi(epoch as i32 - 1);
            let (lr_q, lr_d) = (cfg.lr_q * decay / gain, cfg.lr_d * decay);
            let mut loss_sum = 0.0;
            let mut count = 0usize;
            for _ in 0..updates_per_epoch {
                if batch == 1 {
                    let j = rng.random_range(0..samples.len());
                    grad.q.fill(0.0);
                    grad.d.fill(0.0);
                    loss_sum += tape.symmetric_gradient(self, &samples[j], &mut grad, None, None);
                    count += 1;
                    self.sgd_update(&grad, lr_q, lr_d);
                } else {
                    acc.q.fill(0.0);
                    acc.d.fill(0.0);
                    for _ in 0..batch {
                        let j = rng.random_range(0..samples.len());
                        grad.q.fill(0.0);
                        grad.d.fill(0.0);
                        loss_sum += tape.symmetric_gradient(self, &samples[j], &mut grad, None, None);
                        count += 1;
                        acc.add_scaled(&grad, 1.0);
                    }
                    acc.scale(1.0 / batch as f64);
                    self.sgd_update(&acc, lr_q, lr_d);
                }
                self.q.project_with(cfg.degenerate_policy)?;
            }
            let angle = on_epoch(epoch, self);
            trace.rows.push(TraceRow {
                epoch,
                mean_loss: loss_sum / count as f64,
                mean_angle_deg: angle,
            });
        }
        Ok(trace)
    }
}

/// Multi-start training: the first start uses the caller's initial model,
/// later starts use uniform random angles with `D = I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestartPolicy {
    pub max_starts: usize,
    /// Stop as soon as the full-set mean loss drops to this fraction of the
    /// initial model's loss.
    pub target_ratio: f64,
}

impl Default for RestartPolicy {
    fn default() -> Self {
        Self {
            max_starts: 1,
            target_ratio: 0.0,
        }
    }
}

/// Outcome of [`train_with_restarts`].
#[derive(Debug, Clone)]
pub struct RestartOutcome<M> {
    pub model: M,
    pub trace: Trace,
    /// Mean loss of the caller's initial model over the sample set.
    pub initial_loss: f64,
    /// Mean loss of the returned model over the sample set.
    pub final_loss: f64,
    /// Number of starts that were run.
    pub starts: usize,
}

fn start_seed(base: u64, start: usize) -> u64 {
    base.wrapping_add((start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs [`SymmetricFactorization::train`] from up to `policy.max_starts`
/// initializations and keeps the model with the lowest final loss.
pub fn train_with_restarts<C>(
    init: &SymmetricFactorization,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    policy: RestartPolicy,
    mut on_epoch: C,
) -> Result<RestartOutcome<SymmetricFactorization>>
where
    C: FnMut(usize, usize, &SymmetricFactorization) -> Option<f64>,
{
    let initial_loss = mean_loss(init, samples)?;
    let mut best: Option<RestartOutcome<SymmetricFactorization>> = None;
    for start in 0..policy.max_starts.max(1) {
        let mut f = if start == 0 {
            init.clone()
        } else {
            let mut f = SymmetricFactorization::random_rotation(init.dim(), start_seed(cfg.rng_seed, start))?;
            f.eig_floor = init.eig_floor;
            f
        };
        let run_cfg = TrainConfig {
            rng_seed: start_seed(cfg.rng_seed, start),
            ..cfg.clone()
        };
        let trace = f.train(samples, &run_cfg, |e, m| on_epoch(start, e, m))?;
        let final_loss = mean_loss(&f, samples)?;
        let done = final_loss <= policy.target_ratio * initial_loss;
        if best.as_ref().is_none_or(|b| final_loss < b.final_loss) {
            best = Some(RestartOutcome {
                model: f,
                trace,
                initial_loss,
                final_loss,
                starts: start + 1,
            });
        }
        if let Some(b) = best.as_mut() {
            b.starts = start + 1;
        }
        if done {
            break;
        }
    }
    Ok(best.expect("at least one start"))
}

/// Rotation-only counterpart of [`train_with_restarts`].
pub fn train_rotation_with_restarts<C>(
    init: &ButterflyProduct,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    policy: RestartPolicy,
    mut on_epoch: C,
) -> Result<RestartOutcome<ButterflyProduct>>
where
    C: FnMut(usize, usize, &ButterflyProduct) -> Option<f64>,
{
    let rotation_mean_loss = |q: &ButterflyProduct| -> Result<f64> {
        let mut s = 0.0;
        for sample in samples {
            s += rotation_loss(q, sample)?;
        }
        Ok(s / samples.len().max(1) as f64)
    };
    let initial_loss = rotation_mean_loss(init)?;
    let mut best: Option<RestartOutcome<ButterflyProduct>> = None;
    for start in 0..policy.max_starts.max(1) {
        let mut q = if start == 0 {
            init.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(start_seed(cfg.rng_seed, start));
            ButterflyProduct::random(init.dim(), &mut rng)?
        };
        let run_cfg = TrainConfig {
            rng_seed: start_seed(cfg.rng_seed, start),
            ..cfg.clone()
        };
        let trace = train_rotation_only(&mut q, samples, &run_cfg, |e, m| on_epoch(start, e, m))?;
        let final_loss = rotation_mean_loss(&q)?;
        let done = final_loss <= policy.target_ratio * initial_loss;
        if best.as_ref().is_none_or(|b| final_loss < b.final_loss) {
            best = Some(RestartOutcome {
                model: q,
                trace,
                initial_loss,
                final_loss,
                starts: start + 1,
            });
        }
        if let Some(b) = best.as_mut() {
            b.starts = start + 1;
        }
        if done {
            break;
        }
    }
    Ok(best.expect("at least one start"))
}

/// Mean loss `sum_j ||Q D Q^T x_j - y_j||^2 / m` over a sample set.
pub fn mean_loss(f: &SymmetricFactorization, samples: &[TrainSample]) -> Result<f64> {
    let mut s = 0.0;
    for sample in samples {
        s += f.loss(sample)?;
    }
    Ok(s / samples.len().max(1) as f64)
}

/// `sum ||y||^2 / sum ||x||^2`, or 1 when that is zero or undefined.
///
/// The rotation gradient scales with the square of the target's magnitude,
/// so dividing `lr_q` by this gain makes training invariant to rescaling `H`.
pub fn squared_gain(samples: &[TrainSample]) -> f64 {
    let sy: f64 = samples.iter().flat_map(|s| &s.y).map(|v| v * v).sum();
    let sx: f64 = samples.iter().flat_map(|s| &s.x).map(|v| v * v).sum();
    let g = sy / sx;
    if g.is_finite() && g > 0.0 {
        g
    } else {
        1.0
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn sgd_update_product(q: &mut ButterflyProduct, grad: &[f64], lr: f64) {
    let mut off = 0;
    for layer in q.layers_mut() {
        for k in 0..layer.num_blocks() {
            let g = &grad[off..off + 4];
            layer.a[k] -= lr * g[0];
            layer.b[k] -= lr * g[1];
            layer.c[k] -= lr * g[2];
            layer.d[k] -= lr * g[3];
            off += 4;
        }
    }
}

/// Gradient of `|| Q x - y ||^2` for the rotation-only network.
pub fn rotation_loss_gradient(q: &ButterflyProduct, sample: &TrainSample) -> Result<GradientRecord> {
    sample.validate(q.dim())?;
    let mut tape = Tape::new(q.dim(), q.log_dim());
    let mut grad = GradientRecord::zeros(q.num_relaxed_params(), 0);
    tape.rotation_gradient(q, sample, &mut grad);
    Ok(grad)
}

/// `|| Q x - y ||^2`.
pub fn rotation_loss(q: &ButterflyProduct, sample: &TrainSample) -> Result<f64> {
    check_dim(q.dim(), sample.y.len())?;
    Ok(squared_distance(&q.apply(&sample.x)?, &sample.y))
}

/// Fits a single butterfly product `Q` so that `Q x ~ y`, with the same
/// SGD-then-project loop as [`SymmetricFactorization::train`]. Only `lr_q`
/// is used.
pub fn train_rotation_only<C>(
    q: &mut ButterflyProduct,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: C,
) -> Result<Trace>
where
    C: FnMut(usize, &ButterflyProduct) -> Option<f64>,
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    for s in samples {
        s.validate(q.dim())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut tape = Tape::new(q.dim(), q.log_dim());
    let num_q = q.num_relaxed_params();
    let mut grad = GradientRecord::zeros(num_q, 0);
    let mut acc = GradientRecord::zeros(num_q, 0);
    let batch = cfg.batch_mode.size();
    let updates_per_epoch = samples.len().div_ceil(batch);
    let gain = if cfg.gain_normalized { squared_gain(samples) } else { 1.0 };
    let mut trace = Trace::default();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_q * cfg.lr_decay.powi(epoch as i32 - 1) / gain;
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for _ in 0..updates_per_epoch {
            acc.q.fill(0.0);
            for _ in 0..batch {
                let j = rng.random_range(0..samples.len());
                grad.q.fill(0.0);
                loss_sum += tape.rotation_gradient(q, &samples[j], &mut grad);
                count += 1;
                acc.add_scaled(&grad, 1.0);
            }
            sgd_update_product(q, &acc.q, lr / batch as f64);
            q.project_with(cfg.degenerate_policy)?;
        }
        let angle = on_epoch(epoch, q);
        trace.rows.push(TraceRow {
            epoch,
            mean_loss: loss_sum / count as f64,
            mean_angle_deg: angle,
        });
    }
    Ok(trace)
}

/// Reusable activation storage for backpropagation.
struct Tape {
    acts: Vec<Vec<f64>>,
    g: Vec<f64>,
}

impl Tape {
    fn new(n: usize, log_n: usize) -> Self {
        Self {
            acts: vec![vec![0.0; n]; 2 * log_n + 2],
            g: vec![0.0; n],
        }
    }

    /// Accumulates into `grad` the gradient of `||Q D Q^T x - y||^2` and
    /// returns the loss. When `transpose_part` is given, the contribution of
    /// the `Q_i^T` pass goes there instead of into `grad.q`.
    fn symmetric_gradient(
        &mut self,
        f: &SymmetricFactorization,
        sample: &TrainSample,
        grad: &mut GradientRecord,
        transpose_part: Option<&mut GradientRecord>,
        mut counter: Option<&mut OpCounter>,
    ) -> f64 {
        let layers = f.q.layers();
        let big_l = layers.len();
        let n = f.dim();

        // forward: acts[i] = Q_i^T acts[i-1]; acts[L+1] = D acts[L];
        // acts[L+1+j] = Q_{L+1-j} acts[L+j]
        self.acts[0].copy_from_slice(&sample.x);
        for i in 1..=big_l {
            let (prev, cur) = self.acts.split_at_mut(i);
            cur[0].copy_from_slice(&prev[i - 1]);
            layers[i - 1].apply_transpose_in_place(&mut cur[0]);
            tally(&mut counter, layers[i - 1].cost());
        }
        {
            let (prev, cur) = self.acts.split_at_mut(big_l + 1);
            for k in 0..n {
                cur[0][k] = f.d[k] * prev[big_l][k];
            }
            tally(&mut counter, n as u64);
        }
        for j in 1..=big_l {
            let idx = big_l + 1 + j;
            let (prev, cur) = self.acts.split_at_mut(idx);
            cur[0].copy_from_slice(&prev[idx - 1]);
            layers[big_l - j].apply_in_place(&mut cur[0]);
            tally(&mut counter, layers[big_l - j].cost());
        }

        let out = &self.acts[2 * big_l + 1];
        let mut loss = 0.0;
        for k in 0..n {
            let r = out[k] - sample.y[k];
            loss += r * r;
            self.g[k] = 2.0 * r;
        }

        // backward through Q_1 .. Q_L (applied last, so visited first)
        let lg = 2 * n;
        for j in (1..=big_l).rev() {
            let layer_idx = big_l - j; // 0-based index of Q_{L+1-j}
            let input = &self.acts[big_l + j];
            let off = lg * layer_idx;
            accumulate_forward_block(&layers[layer_idx], input, &self.g, &mut grad.q[off..off + lg]);
            layers[layer_idx].apply_transpose_in_place(&mut self.g);
            tally(&mut counter, 2 * layers[layer_idx].cost());
        }

        // diagonal
        for k in 0..n {
            grad.d[k] += self.g[k] * self.acts[big_l][k];
            self.g[k] *= f.d[k];
        }
        tally(&mut counter, 2 * n as u64);

        // backward through Q_L^T .. Q_1^T
        let target = match transpose_part {
            Some(t) => &mut t.q,
            None => &mut grad.q,
        };
        for i in (1..=big_l).rev() {
            let input = &self.acts[i - 1];
            let off = lg * (i - 1);
            accumulate_transpose_block(&layers[i - 1], input, &self.g, &mut target[off..off + lg]);
            layers[i - 1].apply_in_place(&mut self.g);
            tally(&mut counter, 2 * layers[i - 1].cost());
        }
        loss
    }

    /// Rotation-only network `x -> Q x`. Returns the loss.
    fn rotation_gradient(&mut self, q: &ButterflyProduct, sample: &TrainSample, grad: &mut GradientRecord) -> f64 {
        let layers = q.layers();
        let big_l = layers.len();
        let n = q.dim();
        let lg = 2 * n;
        // acts[j] = Q_{L+1-j} acts[j-1]
        self.acts[0].copy_from_slice(&sample.x);
        for j in 1..=big_l {
            let (prev, cur) = self.acts.split_at_mut(j);
            cur[0].copy_from_slice(&prev[j - 1]);
            layers[big_l - j].apply_in_place(&mut cur[0]);
        }
        let out = &self.acts[big_l];
        let mut loss = 0.0;
        for k in 0..n {
            let r = out[k] - sample.y[k];
            loss += r * r;
            self.g[k] = 2.0 * r;
        }
        for j in (1..=big_l).rev() {
            let layer_idx = big_l - j;
            let off = lg * layer_idx;
            accumulate_forward_block(&layers[layer_idx], &self.acts[j - 1], &self.g, &mut grad.q[off..off + lg]);
            if j > 1 {
                layers[layer_idx].apply_transpose_in_place(&mut self.g);
            }
        }
        loss
    }
}

/// Block computed `out_lo = a x_lo + b x_hi`, `out_hi = c x_lo + d x_hi`.
#[inline]
fn accumulate_forward_block(layer: &ButterflyLayer, input: &[f64], g: &[f64], out: &mut [f64]) {
    for (k, (&l, &h)) in layer.lo().iter().zip(layer.hi()).enumerate() {
        let (xl, xh, gl, gh) = (input[l], input[h], g[l], g[h]);
        let o = &mut out[4 * k..4 * k + 4];
        o[0] += gl * xl;
        o[1] += gl * xh;
        o[2] += gh * xl;
        o[3] += gh * xh;
    }
}

/// Block computed `out_lo = a x_lo + c x_hi`, `out_hi = b x_lo + d x_hi`.
#[inline]
fn accumulate_transpose_block(layer: &ButterflyLayer, input: &[f64], g: &[f64], out: &mut [f64]) {
    for (k, (&l, &h)) in layer.lo().iter().zip(layer.hi()).enumerate() {
        let (xl, xh, gl, gh) = (input[l], input[h], g[l], g[h]);
        let o = &mut out[4 * k..4 * k + 4];
        o[0] += gl * xl;
        o[1] += gh * xl;
        o[2] += gl * xh;
        o[3] += gh * xh;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    SingleSample,
    Minibatch(usize),
}

impl BatchMode {
    fn size(self) -> usize {
        match self {
            BatchMode::SingleSample => 1,
            BatchMode::Minibatch(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Learning rate for the relaxed block coefficients.
    pub lr_q: f64,
    /// Learning rate for the diagonal.
    pub lr_d: f64,
    /// Per-epoch multiplicative decay applied to both rates.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_mode: BatchMode,
    /// Divide `lr_q` by [`squared_gain`] of the training set.
    pub gain_normalized: bool,
    pub rng_seed: u64,
    pub degenerate_policy: DegeneratePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_q: 0.05,
            lr_d: 0.005,
            lr_decay: 1.0,
            epochs: 500,
            batch_mode: BatchMode::SingleSample,
            gain_normalized: true,
            rng_seed: 0,
            degenerate_policy: DegeneratePolicy::ResetIdentity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_q > 0.0 && self.lr_q.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr_q must be > 0, got {}", self.lr_q)));
        }
        if !(self.lr_d > 0.0 && self.lr_d.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr_d must be > 0, got {}", self.lr_d)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_mode.size() == 0 {
            return Err(Error::InvalidArgument("minibatch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_angle_deg: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// `epoch,mean_loss,mean_angle_deg`, one row per epoch. A missing angle
    /// is written as an empty field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,mean_angle_deg\n");
        for r in &self.rows {
            let angle = r.mean_angle_deg.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", r.epoch, r.mean_loss, angle));
        }
        s
    }
}

/// Result of the average-angle metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleStats {
    pub mean_deg: f64,
    pub valid: usize,
    pub skipped: usize,
}

/// Angle in degrees between two vectors, or `None` if either is ~zero.
pub fn angle_between_deg(u: &[f64], v: &[f64]) -> Option<f64> {
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < ANGLE_NORM_FLOOR || nv < ANGLE_NORM_FLOOR {
        return None;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Some((dot / (nu * nv)).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Mean angle between `model(x)` and `oracle(x)` over `inputs`.
pub fn average_angle_between<M, O>(model: M, oracle: O, inputs: &[Vec<f64>]) -> Result<AngleStats>
where
    M: Fn(&[f64]) -> Vec<f64>,
    O: Fn(&[f64]) -> Vec<f64>,
{
    let mut sum = 0.0;
    let mut valid = 0;
    let mut skipped = 0;
    for x in inputs {
        match angle_between_deg(&model(x), &oracle(x)) {
            Some(a) => {
                sum += a;
                valid += 1;
            }
            None => skipped += 1,
        }
    }
    if valid == 0 {
        return Err(Error::NoValidSamples { skipped });
    }
    Ok(AngleStats {
        mean_deg: sum / valid as f64,
        valid,
        skipped,
    })
}

/// Mean angle between `Q D Q^T x` and `H x` over `m` inputs drawn from
/// `sampler` with `seed`.
pub fn average_angle<O>(
    f: &SymmetricFactorization,
    oracle: O,
    m: usize,
    sampler: Sampler,
    seed: u64,
) -> Result<AngleStats>
where
    O: Fn(&[f64]) -> Vec<f64>,
{
    if m == 0 {
        return Err(Error::InvalidArgument("angle metric needs m >= 1".into()));
    }
    let xs = sampler.sample(f.dim(), m, seed);
    average_angle_between(|x| f.forward(x).expect("dimension checked"), oracle, &xs)
}

/// Draws `batch` distinct sample indices; used by minibatch drivers.
pub fn draw_batch<R: Rng + ?Sized>(rng: &mut R, len: usize, batch: usize) -> Vec<usize> {
    sample_indices(rng, len, batch.min(len)).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sample_unit_sphere;
    use nalgebra::DVector;

    fn random_relaxed(n: usize, seed: u64) -> SymmetricFactorization {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = SymmetricFactorization::identity(n).unwrap();
        let p: Vec<f64> = (0..f.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        f.set_params(&p).unwrap();
        f
    }

    fn random_sample(n: usize, seed: u64) -> TrainSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainSample::new(
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    fn diag_model(d: Vec<f64>) -> SymmetricFactorization {
        SymmetricFactorization::new(ButterflyProduct::identity(d.len()).unwrap(), d).unwrap()
    }

    #[test]
    fn forward_small_cases() {
        let f = SymmetricFactorization::identity(4).unwrap();
        assert_eq!(f.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let f = diag_model(vec![2.0, 3.0]);
        assert_eq!(f.forward(&[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
        assert!(matches!(f.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn inverse_small_cases() {
        let f = diag_model(vec![2.0, 4.0]);
        assert_eq!(f.inverse_apply_with_floor(&[2.0, 4.0], 1e-8).unwrap(), vec![1.0, 1.0]);
        let f = diag_model(vec![1.0, -3.0]);
        assert_eq!(f.inverse_apply_with_floor(&[1.0, 1.0], 0.5).unwrap(), vec![1.0, 2.0]);
        assert!(f.inverse_apply_with_floor(&[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn quadratic_form_small_cases() {
        let f = SymmetricFactorization::identity(2).unwrap();
        assert_eq!(f.quadratic_form(&[3.0, 4.0]).unwrap(), 25.0);
        let f = random_relaxed(8, 1);
        assert_eq!(f.quadratic_form(&[0.0; 8]).unwrap(), 0.0);
    }

    #[test]
    fn loss_small_cases() {
        let f = SymmetricFactorization::identity(2).unwrap();
        let s = TrainSample::new(vec![1.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(f.loss(&s).unwrap(), 1.0);
        let f = random_relaxed(8, 2);
        let x = vec![0.3; 8];
        let y = f.forward(&x).unwrap();
        assert_eq!(f.loss(&TrainSample::new(x, y)).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_dense() {
        let f = random_relaxed(8, 5);
        let s = random_sample(8, 6);
        let q = f.q.to_dense();
        let h = &q * DMatrix::from_diagonal(&DVector::from_column_slice(&f.d)) * q.transpose();
        let r = h * DVector::from_column_slice(&s.x) - DVector::from_column_slice(&s.y);
        let dense = r.norm_squared();
        assert!((f.loss(&s).unwrap() - dense).abs() < 1e-12 * dense.max(1.0));
    }

    #[test]
    fn diagonal_only_gradient() {
        let f = SymmetricFactorization::identity(2).unwrap();
        let s = TrainSample::new(vec![1.0, 0.0], vec![2.0, 0.0]);
        let g = f.loss_gradient(&s).unwrap();
        assert_eq!(g.d, vec![-2.0, 0.0]);
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let f = random_relaxed(8, 7);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let y = f.forward(&x).unwrap();
        let g = f.loss_gradient(&TrainSample::new(x, y)).unwrap();
        assert!(g.max_abs() < 1e-14);
    }

    fn fd_gradient(f: &SymmetricFactorization, s: &TrainSample, h: f64) -> Vec<f64> {
        let p0 = f.params();
        let mut g = Vec::with_capacity(p0.len());
        let mut probe = f.clone();
        for i in 0..p0.len() {
            let mut p = p0.clone();
            p[i] = p0[i] + h;
            probe.set_params(&p).unwrap();
            let lp = probe.loss(s).unwrap();
            p[i] = p0[i] - h;
            probe.set_params(&p).unwrap();
            let lm = probe.loss(s).unwrap();
            g.push((lp - lm) / (2.0 * h));
        }
        g
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn shared_weights_need_both_contributions() {
        let f = random_relaxed(8, 11);
        let s = random_sample(8, 12);
        let fd = fd_gradient(&f, &s, 1e-5);
        let full = f.loss_gradient(&s).unwrap().flatten();
        assert!(max_rel_err(&full, &fd) < 1e-5);

        let (forward, transpose) = f.loss_gradient_parts(&s);
        let mut summed = forward.clone();
        for (a, b) in summed.q.iter_mut().zip(&transpose.q) {
            *a += b;
        }
        assert_eq!(summed.flatten(), full);
        // either single pass alone is wrong
        assert!(max_rel_err(&forward.flatten(), &fd) > 1e-2);
        let mut only_t = transpose.clone();
        only_t.d = forward.d.clone();
        assert!(max_rel_err(&only_t.flatten(), &fd) > 1e-2);
    }

    #[test]
    fn rotation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = ButterflyProduct::identity(8).unwrap();
        let p0: Vec<f64> = (0..q.num_relaxed_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        q.set_params(&p0).unwrap();
        let s = random_sample(8, 4);
        let g = rotation_loss_gradient(&q, &s).unwrap();
        let h = 1e-5;
        let mut probe = q.clone();
        for i in 0..p0.len() {
            let mut p = p0.clone();
            p[i] += h;
            probe.set_params(&p).unwrap();
            let lp = rotation_loss(&probe, &s).unwrap();
            p[i] -= 2.0 * h;
            probe.set_params(&p).unwrap();
            let lm = rotation_loss(&probe, &s).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g.q[i]).abs() / fd.abs().max(g.q[i].abs()).max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn gradient_cost_is_three_forwards() {
        for n in [8usize, 64] {
            let f = random_relaxed(n, 1);
            let s = random_sample(n, 2);
            let mut fc = OpCounter::new();
            f.forward_counted(&s.x, Some(&mut fc)).unwrap();
            let mut gc = OpCounter::new();
            f.loss_gradient_counted(&s, Some(&mut gc)).unwrap();
            assert!(gc.mul_adds <= 3 * fc.mul_adds);
            assert!(gc.mul_adds > fc.mul_adds);
        }
    }

    #[test]
    fn zero_targets_stay_at_zero() {
        let n = 8;
        let mut f = SymmetricFactorization::new(ButterflyProduct::identity(n).unwrap(), vec![0.0; n]).unwrap();
        let xs = sample_unit_sphere(n, 20, 1);
        let samples: Vec<_> = xs.into_iter().map(|x| TrainSample::new(x, vec![0.0; n])).collect();
        let before = f.clone();
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let trace = f.train(&samples, &cfg, |_, _| None).unwrap();
        assert!(trace.rows.iter().all(|r| r.mean_loss == 0.0));
        assert_eq!(f, before);
    }

    #[test]
    fn training_keeps_q_projected_and_is_deterministic() {
        let n = 16;
        let target = random_relaxed(n, 21);
        let xs = sample_unit_sphere(n, 50, 2);
        let samples = TrainSample::from_oracle(&xs, |x| target.forward(x).unwrap());
        let cfg = TrainConfig {
            epochs: 3,
            rng_seed: 9,
            batch_mode: BatchMode::Minibatch(4),
            ..Default::default()
        };
        let mut a = SymmetricFactorization::identity(n).unwrap();
        let mut b = a.clone();
        let ta = a
            .train(&samples, &cfg, |_, f| {
                assert!(f.q.is_projected());
                None
            })
            .unwrap();
        let tb = b.train(&samples, &cfg, |_, _| None).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut f = SymmetricFactorization::identity(2).unwrap();
        let samples = vec![TrainSample::new(vec![1.0, 0.0], vec![1.0, 0.0])];
        let cfg = TrainConfig { lr_q: 0.0, ..Default::default() };
        assert!(f.train(&samples, &cfg, |_, _| None).is_err());
        assert!(f.train(&[], &TrainConfig::default(), |_, _| None).is_err());
    }

    #[test]
    fn angle_metric_cases() {
        let n = 8;
        let f = random_relaxed(n, 4);
        let mut g = f.clone();
        g.q.project_with(DegeneratePolicy::ResetIdentity).unwrap();
        let exact = average_angle(&g, |x| g.forward(x).unwrap(), 100, Sampler::UnitSphere, 1).unwrap();
        assert!(exact.mean_deg < 1e-5);
        let anti = average_angle(&g, |x| g.forward(x).unwrap().iter().map(|v| -v).collect(), 100, Sampler::UnitSphere, 1).unwrap();
        assert!((anti.mean_deg - 180.0).abs() < 1e-5);
        let id = SymmetricFactorization::identity(n).unwrap();
        let scaled = average_angle(&id, |x| x.iter().map(|v| 2.0 * v).collect(), 10, Sampler::UnitSphere, 1).unwrap();
        assert!(scaled.mean_deg < 1e-6);
        let none = average_angle(&id, |x| vec![0.0; x.len()], 10, Sampler::UnitSphere, 1);
        assert_eq!(none, Err(Error::NoValidSamples { skipped: 10 }));
    }
}
