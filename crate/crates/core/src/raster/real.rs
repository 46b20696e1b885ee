//! Scalar abstraction so projection runs on `f64` and on forward-mode duals.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// Number of differentiable Gaussian parameters: mean (3), log-scale (3),
/// quaternion (4), opacity logit (1).
pub const GEOM_PARAMS: usize = 11;

/// Forward-mode dual number over the [`GEOM_PARAMS`] Gaussian parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; GEOM_PARAMS],
}

impl Dual {
    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; GEOM_PARAMS];
        d[slot] = 1.0;
        Dual { v, d }
    }

    fn map(self, v: f64, scale: f64) -> Self {
        Dual {
            v,
            d: self.d.map(|x| x * scale),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Dual { v: self.v + o.v, d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Dual { v: self.v - o.v, d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; GEOM_PARAMS];
        for k in 0..GEOM_PARAMS {
            d[k] = self.d[k] * o.v + self.v * o.d[k];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; GEOM_PARAMS];
        for k in 0..GEOM_PARAMS {
            d[k] = (self.d[k] - v * o.d[k]) * inv;
        }
        Dual { v, d }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.map(-self.v, -1.0)
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual {
            v,
            d: [0.0; GEOM_PARAMS],
        }
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        let scale = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.map(s, scale)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.map(e, e)
    }
}
