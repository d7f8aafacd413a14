//! Truncated Taylor jets.
//!
//! A [`Jet`] carries a value, `D` first-order directional derivatives, and
//! optionally the second derivative along the first direction (`d[0]`).
//! The component type is any [`Scalar`], so jets over tape variables give
//! parameter gradients of expressions that contain input derivatives.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet<S, const D: usize> {
    pub v: S,
    pub d: [S; D],
    /// Second derivative along `d[0]`; `None` when not tracked.
    pub dd: Option<S>,
}

/// Value, first and second derivative along a single direction.
pub type Jet2<S> = Jet<S, 1>;

impl<S: Scalar> Jet2<S> {
    pub fn value(&self) -> S {
        self.v
    }

    pub fn d1(&self) -> S {
        self.d[0]
    }

    pub fn d2(&self) -> S {
        self.dd.expect("Jet2 always tracks its second derivative")
    }
}

impl<S: Scalar, const D: usize> Jet<S, D> {
    /// Jet with zero derivatives.
    pub fn constant(v: S, track_second: bool) -> Self {
        let zero = v.scale(0.0);
        Jet {
            v,
            d: [zero; D],
            dd: track_second.then_some(zero),
        }
    }

    /// Applies a linear map componentwise; derivatives commute with it.
    pub fn map_linear(self, f: impl Fn(S) -> S) -> Self {
        Jet {
            v: f(self.v),
            d: self.d.map(&f),
            dd: self.dd.map(&f),
        }
    }

    /// Chain rule for a scalar function with value `f0`, first derivative
    /// `f1` and second derivative `f2` at `self.v`.
    fn chain(self, f0: S, f1: S, f2: impl FnOnce() -> S) -> Self {
        let dd = self.dd.map(|dd| f1 * dd + f2() * self.d0_squared());
        Jet {
            v: f0,
            d: self.d.map(|d| f1 * d),
            dd,
        }
    }

    fn d0_squared(&self) -> S {
        assert!(D > 0, "second derivative requires a seeded direction");
        self.d[0].square()
    }

    fn zip_dd(a: Option<S>, b: Option<S>, f: impl FnOnce(S, S) -> S) -> Option<S> {
        match (a, b) {
            (Some(x), Some(y)) => Some(f(x, y)),
            (None, None) => None,
            _ => panic!("mixing jets with and without second-derivative tracking"),
        }
    }
}

impl<S: Scalar, const D: usize> Add for Jet<S, D> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Jet {
            v: self.v + rhs.v,
            d: std::array::from_fn(|i| self.d[i] + rhs.d[i]),
            dd: Self::zip_dd(self.dd, rhs.dd, |a, b| a + b),
        }
    }
}

impl<S: Scalar, const D: usize> Sub for Jet<S, D> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Jet {
            v: self.v - rhs.v,
            d: std::array::from_fn(|i| self.d[i] - rhs.d[i]),
            dd: Self::zip_dd(self.dd, rhs.dd, |a, b| a - b),
        }
    }
}

// Product and quotient rules need the other operators.
#[allow(clippy::suspicious_arithmetic_impl)]
impl<S: Scalar, const D: usize> Mul for Jet<S, D> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        // (fg)'' = f''g + 2f'g' + fg''
        let dd = Self::zip_dd(self.dd, rhs.dd, |a, b| {
            a * rhs.v + (self.d[0] * rhs.d[0]).scale(2.0) + self.v * b
        });
        Jet {
            v: self.v * rhs.v,
            d: std::array::from_fn(|i| self.d[i] * rhs.v + self.v * rhs.d[i]),
            dd,
        }
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl<S: Scalar, const D: usize> Div for Jet<S, D> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.v / rhs.v;
        let d: [S; D] = std::array::from_fn(|i| (self.d[i] - q * rhs.d[i]) / rhs.v);
        // (a/b)'' = (a'' - 2 q' b' - q b'') / b
        let dd = Self::zip_dd(self.dd, rhs.dd, |a, b| {
            (a - (d[0] * rhs.d[0]).scale(2.0) - q * b) / rhs.v
        });
        Jet { v: q, d, dd }
    }
}

impl<S: Scalar, const D: usize> Neg for Jet<S, D> {
    type Output = Self;
    fn neg(self) -> Self {
        self.map_linear(|s| -s)
    }
}

impl<S: Scalar, const D: usize> Scalar for Jet<S, D> {
    fn scale(self, c: f64) -> Self {
        self.map_linear(|s| s.scale(c))
    }

    fn shift(self, c: f64) -> Self {
        Jet {
            v: self.v.shift(c),
            ..self
        }
    }

    fn square(self) -> Self {
        let two_v = self.v.scale(2.0);
        let dd = self.dd.map(|dd| two_v * dd + self.d0_squared().scale(2.0));
        Jet {
            v: self.v.square(),
            d: self.d.map(|d| two_v * d),
            dd,
        }
    }

    fn powi(self, n: i32) -> Self {
        let x = self.v;
        let nf = n as f64;
        self.chain(x.powi(n), x.powi(n - 1).scale(nf), || {
            x.powi(n - 2).scale(nf * (nf - 1.0))
        })
    }

    fn tanh(self) -> Self {
        let t = self.v.tanh();
        // tanh' = 1 - t^2, tanh'' = -2 t (1 - t^2)
        let s = t.square().scale(-1.0).shift(1.0);
        self.chain(t, s, || (t * s).scale(-2.0))
    }

    fn sigmoid(self) -> Self {
        let y = self.v.sigmoid();
        let s = y * y.scale(-1.0).shift(1.0);
        self.chain(y, s, || s * y.scale(-2.0).shift(1.0))
    }

    fn sin(self) -> Self {
        let (s, c) = (self.v.sin(), self.v.cos());
        self.chain(s, c, || -s)
    }

    fn cos(self) -> Self {
        let (s, c) = (self.v.sin(), self.v.cos());
        self.chain(c, -s, || -c)
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, || e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(x: f64) -> Jet2<f64> {
        Jet {
            v: x,
            d: [1.0],
            dd: Some(0.0),
        }
    }

    #[test]
    fn identity_seed() {
        let j = seed(3.5);
        assert_eq!((j.value(), j.d1(), j.d2()), (3.5, 1.0, 0.0));
    }

    #[test]
    fn product_rule_second_order() {
        // f = x^2, g = sin x; (fg)'' = 2 sin x + 4x cos x - x^2 sin x
        let x = 0.7;
        let j = seed(x);
        let p = j.square() * j.sin();
        let expect = 2.0 * x.sin() + 4.0 * x * x.cos() - x * x * x.sin();
        assert!((p.d2() - expect).abs() < 1e-14);
    }

    #[test]
    fn quotient_second_order() {
        // 1/x: -1/x^2, 2/x^3
        let x = 1.3;
        let one = Jet2::constant(1.0, true);
        let q = one / seed(x);
        assert!((q.d1() + 1.0 / (x * x)).abs() < 1e-14);
        assert!((q.d2() - 2.0 / (x * x * x)).abs() < 1e-14);
    }

    #[test]
    fn multi_direction_first_order() {
        // f(x, y) = x * y at (2, 3): df/dx = 3, df/dy = 2, d2f/dx2 = 0
        let x: Jet<f64, 2> = Jet {
            v: 2.0,
            d: [1.0, 0.0],
            dd: Some(0.0),
        };
        let y: Jet<f64, 2> = Jet {
            v: 3.0,
            d: [0.0, 1.0],
            dd: Some(0.0),
        };
        let f = x * y;
        assert_eq!(f.d, [3.0, 2.0]);
        assert_eq!(f.dd, Some(0.0));
    }

    #[test]
    fn untracked_second_derivative_stays_none() {
        let x: Jet<f64, 1> = Jet {
            v: 0.2,
            d: [1.0],
            dd: None,
        };
        let f = x.tanh() * x.exp();
        assert!(f.dd.is_none());
    }
}
