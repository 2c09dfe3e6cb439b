//! Scalar abstraction so the Hamiltonian kernels can run on plain `f64` or on
//! forward-mode dual numbers. The dual instantiation yields exact
//! Hessian-vector products of the Hamiltonian without a second derivation.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    /// Value part, used for branch decisions (piecewise formulas branch on it).
    fn val(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn scale(self, c: f64) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn max(self, other: Self) -> Self {
        if self.val() >= other.val() {
            self
        } else {
            other
        }
    }
    fn min(self, other: Self) -> Self {
        if self.val() <= other.val() {
            self
        } else {
            other
        }
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

/// First-order dual number: value plus one directional derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Dual { v, d }
    }
    pub fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.v + rhs.v, self.d + rhs.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.v - rhs.v, self.d - rhs.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.v * rhs.v, self.d * rhs.v + self.v * rhs.d)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.v;
        Dual::new(self.v * inv, (self.d - self.v * rhs.d * inv) * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl Real for Dual {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline]
    fn val(self) -> f64 {
        self.v
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual::new(s, self.d / (2.0 * s))
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        Dual::new(self.v.ln_1p(), self.d / (1.0 + self.v))
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        Dual::new(self.v * c, self.d * c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_chain_rule_matches_finite_difference() {
        let f = |x: Dual| (x * x + Dual::constant(1.0)).sqrt().exp().ln_1p();
        let x0 = 0.7;
        let g = f(Dual::new(x0, 1.0)).d;
        let h = 1e-6;
        let fd = (f(Dual::constant(x0 + h)).v - f(Dual::constant(x0 - h)).v) / (2.0 * h);
        assert!((g - fd).abs() < 1e-8, "dual {g} vs fd {fd}");
    }

    #[test]
    fn dual_division() {
        let x = Dual::new(2.0, 1.0);
        let y = Dual::new(4.0, 0.0);
        let z = x / y;
        assert!((z.v - 0.5).abs() < 1e-15);
        assert!((z.d - 0.25).abs() < 1e-15);
    }
}
