//! Butterfly-arranged Givens rotations.
//!
//! A [`ButterflyProduct`] of dimension `n = 2^L` is the ordered product
//! `Q = Q_1 Q_2 ... Q_L` where each layer `Q_i` holds `n/2` independent 2x2
//! blocks acting on disjoint coordinate pairs. The pairs of layer `i` are the
//! FFT butterfly pairs at stride `n / 2^i`, so every coordinate can interact
//! with every other one after the full product.
//!
//! Blocks are stored in a relaxed form: four free entries `(a, b, c, d)` per
//! block, so gradient steps can move them off the rotation manifold. Calling
//! [`ButterflyProduct::project`] snaps every block back to its nearest
//! rotation.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{check_dim, Error, Result};

/// Tolerance used to decide whether a block is an exact rotation.
pub const ROTATION_TOL: f64 = 1e-12;

/// Relative threshold below which `eta = |(a+d, b-c)|` counts as degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// Returns `Some(L)` when `n = 2^L` with `L >= 1`.
pub fn log2_exact(n: usize) -> Option<usize> {
    if n >= 2 && n.is_power_of_two() {
        Some(n.trailing_zeros() as usize)
    } else {
        None
    }
}

fn require_log2(n: usize) -> Result<usize> {
    log2_exact(n).ok_or_else(|| {
        Error::InvalidArgument(format!("dimension {n} is not a power of two >= 2"))
    })
}

/// Coordinate pairs of butterfly layer `layer` (1-based) in dimension `n`.
///
/// With `p = n / 2^layer`, the pairs are `(2pk + j, 2pk + p + j)` for
/// `k in 0..2^(layer-1)` and `j in 0..p`, in that (k-major) order.
pub fn pairing(n: usize, layer: usize) -> Result<Vec<(usize, usize)>> {
    let log_n = require_log2(n)?;
    if layer == 0 || layer > log_n {
        return Err(Error::InvalidArgument(format!(
            "layer index {layer} outside 1..={log_n}"
        )));
    }
    let p = n >> layer;
    let groups = 1usize << (layer - 1);
    let mut pairs = Vec::with_capacity(n / 2);
    for k in 0..groups {
        for j in 0..p {
            pairs.push((2 * p * k + j, 2 * p * k + p + j));
        }
    }
    Ok(pairs)
}

/// Accumulates multiply-add operations performed by instrumented kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub mul_adds: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, k: u64) {
        self.mul_adds += k;
    }
}

#[inline]
pub(crate) fn tally(counter: &mut Option<&mut OpCounter>, k: u64) {
    if let Some(c) = counter.as_deref_mut() {
        c.add(k);
    }
}

/// What to do with a block whose projection is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    /// Replace the block with the identity rotation.
    #[default]
    ResetIdentity,
    /// Report [`Error::DegenerateBlock`] and leave the product untouched.
    Abort,
}

/// One 2x2 block `[[a, b], [c, d]]` acting on the coordinate pair `(lo, hi)`:
/// `x_lo <- a x_lo + b x_hi`, `x_hi <- c x_lo + d x_hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GivensBlock {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub pair: (usize, usize),
}

impl GivensBlock {
    pub fn rotation(theta: f64, pair: (usize, usize)) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            a: c,
            b: -s,
            c: s,
            d: c,
            pair,
        }
    }

    /// `sqrt((a+d)^2 + (b-c)^2)`, the normalizer of the projection.
    pub fn eta(&self) -> f64 {
        (self.a + self.d).hypot(self.b - self.c)
    }

    pub fn max_abs(&self) -> f64 {
        self.a.abs().max(self.b.abs()).max(self.c.abs()).max(self.d.abs())
    }

    pub fn is_degenerate(&self) -> bool {
        let eta = self.eta();
        !(eta >= DEGENERACY_THRESHOLD * self.max_abs().max(1.0))
    }

    pub fn is_rotation(&self) -> bool {
        (self.a - self.d).abs() <= ROTATION_TOL
            && (self.b + self.c).abs() <= ROTATION_TOL
            && (self.a * self.a + self.b * self.b - 1.0).abs() <= ROTATION_TOL
    }

    /// Nearest 2x2 rotation in Frobenius norm:
    /// `[[a+d, b-c], [c-b, a+d]] / eta`.
    pub fn projected(&self) -> Option<GivensBlock> {
        if self.is_degenerate() {
            return None;
        }
        let eta = self.eta();
        let cos = (self.a + self.d) / eta;
        let sin = (self.c - self.b) / eta;
        Some(GivensBlock {
            a: cos,
            b: -sin,
            c: sin,
            d: cos,
            pair: self.pair,
        })
    }

    /// Rotation angle of the projected block.
    pub fn angle(&self) -> f64 {
        (self.c - self.b).atan2(self.a + self.d)
    }
}

/// One butterfly layer `Q_i`: `n/2` blocks on the pairs given by
/// [`pairing`]`(n, i)`, stored as four parallel coefficient arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterflyLayer {
    index: usize,
    lo: Vec<usize>,
    hi: Vec<usize>,
    pub(crate) a: Vec<f64>,
    pub(crate) b: Vec<f64>,
    pub(crate) c: Vec<f64>,
    pub(crate) d: Vec<f64>,
}

impl ButterflyLayer {
    /// Identity layer `i` (1-based) of dimension `n`.
    pub fn identity(n: usize, index: usize) -> Result<Self> {
        let pairs = pairing(n, index)?;
        let m = pairs.len();
        Ok(Self {
            index,
            lo: pairs.iter().map(|p| p.0).collect(),
            hi: pairs.iter().map(|p| p.1).collect(),
            a: vec![1.0; m],
            b: vec![0.0; m],
            c: vec![0.0; m],
            d: vec![1.0; m],
        })
    }

    /// 1-based layer index.
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn num_blocks(&self) -> usize {
        self.a.len()
    }

    pub fn pair(&self, k: usize) -> (usize, usize) {
        (self.lo[k], self.hi[k])
    }

    pub fn block(&self, k: usize) -> GivensBlock {
        GivensBlock {
            a: self.a[k],
            b: self.b[k],
            c: self.c[k],
            d: self.d[k],
            pair: (self.lo[k], self.hi[k]),
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = GivensBlock> + '_ {
        (0..self.num_blocks()).map(move |k| self.block(k))
    }

    /// Overwrite the coefficients of block `k`; the pair is fixed by the layer.
    pub fn set_block(&mut self, k: usize, a: f64, b: f64, c: f64, d: f64) {
        self.a[k] = a;
        self.b[k] = b;
        self.c[k] = c;
        self.d[k] = d;
    }

    pub fn set_angle(&mut self, k: usize, theta: f64) {
        let (s, c) = theta.sin_cos();
        self.set_block(k, c, -s, s, c);
    }

    #[inline]
    pub(crate) fn apply_in_place(&self, x: &mut [f64]) {
        for k in 0..self.a.len() {
            let (l, h) = (self.lo[k], self.hi[k]);
            let (xl, xh) = (x[l], x[h]);
            x[l] = self.a[k] * xl + self.b[k] * xh;
            x[h] = self.c[k] * xl + self.d[k] * xh;
        }
    }

    #[inline]
    pub(crate) fn apply_transpose_in_place(&self, x: &mut [f64]) {
        for k in 0..self.a.len() {
            let (l, h) = (self.lo[k], self.hi[k]);
            let (xl, xh) = (x[l], x[h]);
            x[l] = self.a[k] * xl + self.c[k] * xh;
            x[h] = self.b[k] * xl + self.d[k] * xh;
        }
    }

    /// MulAdds spent by one application of this layer.
    pub fn cost(&self) -> u64 {
        4 * self.a.len() as u64
    }

    pub(crate) fn lo(&self) -> &[usize] {
        &self.lo
    }

    pub(crate) fn hi(&self) -> &[usize] {
        &self.hi
    }
}

/// The product `Q = Q_1 Q_2 ... Q_L`, layer 1 first.
///
/// Immutable under application, so a shared reference can be used from
/// several threads at once.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterflyProduct {
    n: usize,
    layers: Vec<ButterflyLayer>,
}

impl ButterflyProduct {
    pub fn identity(n: usize) -> Result<Self> {
        let log_n = require_log2(n)?;
        let layers = (1..=log_n)
            .map(|i| ButterflyLayer::identity(n, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n, layers })
    }

    /// Builds an exact rotation product from `n lg(n) / 2` angles, assigned
    /// layer-major and, within a layer, in pairing order.
    pub fn from_angles(n: usize, angles: &[f64]) -> Result<Self> {
        let mut q = Self::identity(n)?;
        let expected = q.num_angles();
        if angles.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} angles for n = {n}, got {}",
                angles.len()
            )));
        }
        let mut it = angles.iter();
        for layer in &mut q.layers {
            for k in 0..layer.num_blocks() {
                layer.set_angle(k, *it.next().unwrap());
            }
        }
        Ok(q)
    }

    /// Rotation product with angles drawn uniformly from `[-pi, pi)`.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        let log_n = require_log2(n)?;
        let angles: Vec<f64> = (0..n * log_n / 2)
            .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
            .collect();
        Self::from_angles(n, &angles)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn log_dim(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[ButterflyLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ButterflyLayer] {
        &mut self.layers
    }

    /// Number of angles when every block is a rotation: `n lg(n) / 2`.
    pub fn num_angles(&self) -> usize {
        self.n * self.log_dim() / 2
    }

    /// Number of relaxed coefficients: `2 n lg(n)`.
    pub fn num_relaxed_params(&self) -> usize {
        4 * self.num_angles()
    }

    /// Angles of the (projected) blocks in layer-major order.
    pub fn angles(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.blocks().map(|b| b.angle()))
            .collect()
    }

    /// All relaxed coefficients, layer-major, block order, `(a, b, c, d)`
    /// interleaved per block.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_relaxed_params());
        for l in &self.layers {
            for k in 0..l.num_blocks() {
                out.extend_from_slice(&[l.a[k], l.b[k], l.c[k], l.d[k]]);
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_relaxed_params(), params.len())?;
        let mut chunks = params.chunks_exact(4);
        for l in &mut self.layers {
            for k in 0..l.num_blocks() {
                let p = chunks.next().unwrap();
                l.set_block(k, p[0], p[1], p[2], p[3]);
            }
        }
        Ok(())
    }

    /// True when every block is a rotation within [`ROTATION_TOL`].
    pub fn is_projected(&self) -> bool {
        self.layers.iter().all(|l| l.blocks().all(|b| b.is_rotation()))
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_counted(x, None)
    }

    /// `Q_1 (Q_2 (... (Q_L x)))`, adding `2 n lg(n)` MulAdds to `counter`.
    pub fn apply_counted(&self, x: &[f64], counter: Option<&mut OpCounter>) -> Result<Vec<f64>> {
        check_dim(self.n, x.len())?;
        let mut y = x.to_vec();
        self.apply_in_place(&mut y, counter);
        Ok(y)
    }

    pub fn apply_in_place(&self, x: &mut [f64], mut counter: Option<&mut OpCounter>) {
        debug_assert_eq!(x.len(), self.n);
        for layer in self.layers.iter().rev() {
            layer.apply_in_place(x);
            tally(&mut counter, layer.cost());
        }
    }

    pub fn apply_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_transpose_counted(x, None)
    }

    /// `Q_L^T (... (Q_1^T x))`.
    pub fn apply_transpose_counted(
        &self,
        x: &[f64],
        counter: Option<&mut OpCounter>,
    ) -> Result<Vec<f64>> {
        check_dim(self.n, x.len())?;
        let mut y = x.to_vec();
        self.apply_transpose_in_place(&mut y, counter);
        Ok(y)
    }

    pub fn apply_transpose_in_place(&self, x: &mut [f64], mut counter: Option<&mut OpCounter>) {
        debug_assert_eq!(x.len(), self.n);
        for layer in &self.layers {
            layer.apply_transpose_in_place(x);
            tally(&mut counter, layer.cost());
        }
    }

    /// Projects every block onto the rotations, failing on the first
    /// degenerate block without modifying anything.
    pub fn project(&mut self) -> Result<()> {
        self.project_with(DegeneratePolicy::Abort).map(|_| ())
    }

    /// Projects every block onto the rotations. Returns the number of
    /// degenerate blocks that were reset to the identity.
    pub fn project_with(&mut self, policy: DegeneratePolicy) -> Result<usize> {
        if policy == DegeneratePolicy::Abort {
            for layer in &self.layers {
                if let Some(b) = layer.blocks().find(|b| b.is_degenerate()) {
                    return Err(Error::DegenerateBlock {
                        layer: layer.index,
                        lo: b.pair.0,
                        hi: b.pair.1,
                        eta: b.eta(),
                    });
                }
            }
        }
        let mut resets = 0;
        for layer in &mut self.layers {
            for k in 0..layer.num_blocks() {
                match layer.block(k).projected() {
                    Some(p) => layer.set_block(k, p.a, p.b, p.c, p.d),
                    None => {
                        layer.set_block(k, 1.0, 0.0, 0.0, 1.0);
                        resets += 1;
                    }
                }
            }
        }
        Ok(resets)
    }

    /// Explicit `n x n` matrix of the product.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut m = DMatrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            self.apply_in_place(&mut col, None);
            m.column_mut(j).copy_from_slice(&col);
        }
        m
    }
}
