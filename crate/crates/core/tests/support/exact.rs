//! Exact evaluation of the `Q D Q^T` least-squares loss.
//!
//! Every finite f64 is a dyadic rational `m * 2^e`, and the network only adds
//! and multiplies, so the loss of an f64 parameter vector is computed here
//! without any rounding. Central differences built on it carry only the
//! truncation error of the difference formula.

use std::ops::{Add, Mul, Sub};

use butterfly_hessian::pairing;
use num_bigint::BigInt;

#[derive(Clone, Debug)]
pub struct Dyadic {
    m: BigInt,
    e: i64,
}

impl Dyadic {
    pub fn zero() -> Self {
        Self { m: BigInt::from(0), e: 0 }
    }

    pub fn from_f64(v: f64) -> Self {
        assert!(v.is_finite());
        if v == 0.0 {
            return Self::zero();
        }
        let bits = v.to_bits();
        let sign = if bits >> 63 == 0 { 1i64 } else { -1 };
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
        Self { m: BigInt::from(sign * mant as i64), e }
    }

    pub fn to_f64(&self) -> f64 {
        let bits = self.m.bits() as i64;
        if bits == 0 {
            return 0.0;
        }
        let shift = (bits - 62).max(0);
        let top: i64 = (&self.m >> shift as usize).try_into().unwrap();
        let mut v = top as f64;
        let mut k = self.e + shift;
        while k > 0 {
            let s = k.min(1000);
            v *= 2f64.powi(s as i32);
            k -= s;
        }
        while k < 0 {
            let s = k.max(-1000);
            v *= 2f64.powi(s as i32);
            k -= s;
        }
        v
    }

    fn aligned(a: &Dyadic, b: &Dyadic) -> (BigInt, BigInt, i64) {
        let e = a.e.min(b.e);
        (&a.m << (a.e - e) as usize, &b.m << (b.e - e) as usize, e)
    }
}

impl Add for &Dyadic {
    type Output = Dyadic;
    fn add(self, rhs: &Dyadic) -> Dyadic {
        let (a, b, e) = Dyadic::aligned(self, rhs);
        Dyadic { m: a + b, e }
    }
}

impl Sub for &Dyadic {
    type Output = Dyadic;
    fn sub(self, rhs: &Dyadic) -> Dyadic {
        let (a, b, e) = Dyadic::aligned(self, rhs);
        Dyadic { m: a - b, e }
    }
}

impl Mul for &Dyadic {
    type Output = Dyadic;
    fn mul(self, rhs: &Dyadic) -> Dyadic {
        Dyadic { m: &self.m * &rhs.m, e: self.e + rhs.e }
    }
}

fn apply_layer(x: &mut [Dyadic], pairs: &[(usize, usize)], blocks: &[Dyadic], transpose: bool) {
    for (k, &(lo, hi)) in pairs.iter().enumerate() {
        let p = &blocks[4 * k..4 * k + 4];
        let (b, c) = if transpose { (&p[2], &p[1]) } else { (&p[1], &p[2]) };
        let new_lo = &(&p[0] * &x[lo]) + &(b * &x[hi]);
        let new_hi = &(c * &x[lo]) + &(&p[3] * &x[hi]);
        x[lo] = new_lo;
        x[hi] = new_hi;
    }
}

/// `|| Q D Q^T x - y ||^2` for parameters laid out as
/// `SymmetricFactorization::params`, computed exactly.
pub fn symmetric_loss(n: usize, params: &[f64], x: &[f64], y: &[f64]) -> Dyadic {
    let lg = n.trailing_zeros() as usize;
    let p: Vec<Dyadic> = params.iter().map(|&v| Dyadic::from_f64(v)).collect();
    let layer_len = 2 * n;
    let pairs: Vec<Vec<(usize, usize)>> = (1..=lg).map(|i| pairing(n, i).unwrap()).collect();
    let mut z: Vec<Dyadic> = x.iter().map(|&v| Dyadic::from_f64(v)).collect();
    // Q^T = Q_L^T ... Q_1^T: Q_1^T acts first
    for i in 0..lg {
        apply_layer(&mut z, &pairs[i], &p[i * layer_len..(i + 1) * layer_len], true);
    }
    let diag = &p[lg * layer_len..];
    for (zi, di) in z.iter_mut().zip(diag) {
        *zi = &*zi * di;
    }
    for i in (0..lg).rev() {
        apply_layer(&mut z, &pairs[i], &p[i * layer_len..(i + 1) * layer_len], false);
    }
    let mut s = Dyadic::zero();
    for (zi, &yi) in z.iter().zip(y) {
        let r = zi - &Dyadic::from_f64(yi);
        s = &s + &(&r * &r);
    }
    s
}

/// Central difference of the exact loss in every parameter, with the
/// perturbed points rounded to f64 as in an ordinary finite-difference check.
pub fn central_differences(n: usize, params: &[f64], x: &[f64], y: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let (up, down) = (params[i] + h, params[i] - h);
            p[i] = up;
            let lp = symmetric_loss(n, &p, x, y);
            p[i] = down;
            let lm = symmetric_loss(n, &p, x, y);
            p[i] = params[i];
            (&lp - &lm).to_f64() / (up - down)
        })
        .collect()
}

#[allow(dead_code)]
pub fn self_check() {
    for v in [1.0, -0.1, 3.5e-300, 1e300, 5e-324, 0.0] {
        assert_eq!(Dyadic::from_f64(v).to_f64(), v);
    }
    let a = Dyadic::from_f64(0.1);
    let b = Dyadic::from_f64(3.0);
    // exact: 3a - a = 2a, while f64 rounds 0.1 * 3.0
    assert_eq!((&(&a * &b) - &a).to_f64(), 0.2);
    assert_ne!(0.1 * 3.0 - 0.1, 0.2);
}
