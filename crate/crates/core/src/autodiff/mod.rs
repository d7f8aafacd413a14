//! Exact derivatives.
//!
//! Two mechanisms compose here. [`Tape`] records matrix-valued operations
//! and sweeps backwards for parameter gradients. [`Jet`] propagates
//! input derivatives forward and is generic over its component type, so a
//! `Jet<Var>` carries input derivatives whose parameter gradients the tape
//! can then take. Any expression written against [`Scalar`] runs unchanged
//! on `f64`, on tape variables, and on jets of either.

mod jet;
mod tape;

use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::Array2;
use thiserror::Error;

pub use jet::{Jet, Jet2};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("gradient requested of a non-scalar output of shape {shape:?}")]
    NonScalarOutput { shape: (usize, usize) },
    #[error("direction index {index} out of range for {n} inputs")]
    DirectionOutOfRange { index: usize, n: usize },
}

/// Arithmetic shared by plain numbers, tape variables and jets.
///
/// The operation set is closed: everything the elasticity residuals and the
/// network need is expressible with it plus [`Var::matmul`], [`Var::sum`]
/// and [`Var::mean`].
pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    /// Multiply by a constant.
    fn scale(self, c: f64) -> Self;
    /// Add a constant.
    fn shift(self, c: f64) -> Self;
    fn square(self) -> Self {
        self * self
    }
    fn powi(self, n: i32) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
}

impl Scalar for f64 {
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn shift(self, c: f64) -> Self {
        self + c
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        if self >= 0.0 {
            1.0 / (1.0 + (-self).exp())
        } else {
            let e = self.exp();
            e / (1.0 + e)
        }
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// A scalar function of `n` inputs, evaluable on any [`Scalar`].
pub trait ScalarFn {
    fn eval<S: Scalar>(&self, x: &[S]) -> S;
}

/// A scalar function of parameters and inputs.
pub trait ParamFn {
    fn eval<S: Scalar>(&self, params: &[S], x: &[S]) -> S;
}

/// Gradient of the scalar built by `build` with respect to `params`.
///
/// `build` receives one 1x1 tape variable per parameter and must return a
/// 1x1 variable.
pub fn grad<F>(params: &[f64], build: F) -> Result<Vec<f64>, AutodiffError>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|&p| tape.scalar(p)).collect();
    let loss = build(&tape, &vars);
    let grads = tape.gradient(loss)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)[[0, 0]]).collect())
}

/// Value, first and second derivative of `f` along input `index` at `point`.
pub fn jet_eval<F: ScalarFn>(f: &F, point: &[f64], index: usize) -> Result<Jet2<f64>, AutodiffError> {
    let inputs = seed_inputs(point, index, |x| x)?;
    let out = f.eval(&inputs);
    let finite = out.v.is_finite() && out.d[0].is_finite() && out.d2().is_finite();
    if !finite {
        return Err(AutodiffError::NonFinite { op: "jet_eval" });
    }
    Ok(out)
}

/// Parameter gradient of a loss assembled from input jets of `f`.
///
/// For each point, `f` is evaluated on jets seeded along input `index`
/// with the parameters held as tape variables. `loss` combines the
/// per-point jets into a 1x1 variable.
pub fn grad_through_jet<F, L>(
    f: &F,
    params: &[f64],
    points: &[Vec<f64>],
    index: usize,
    loss: L,
) -> Result<Vec<f64>, AutodiffError>
where
    F: ParamFn,
    L: for<'t> FnOnce(&'t Tape, &[Jet2<Var<'t>>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|&p| tape.scalar(p)).collect();
    let param_jets: Vec<Jet2<Var<'_>>> = vars.iter().map(|&v| Jet::constant(v, true)).collect();
    let mut outputs = Vec::with_capacity(points.len());
    for point in points {
        let inputs = seed_inputs(point, index, |x| tape.scalar_constant(x))?;
        outputs.push(f.eval(&param_jets, &inputs));
    }
    let total = loss(&tape, &outputs);
    let grads = tape.gradient(total)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)[[0, 0]]).collect())
}

fn seed_inputs<S: Scalar>(point: &[f64], index: usize, lift: impl Fn(f64) -> S) -> Result<Vec<Jet2<S>>, AutodiffError> {
    if index >= point.len() {
        return Err(AutodiffError::DirectionOutOfRange { index, n: point.len() });
    }
    Ok(point
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let v = lift(x);
            let zero = v.scale(0.0);
            Jet {
                v,
                d: [if i == index { zero.shift(1.0) } else { zero }],
                dd: Some(zero),
            }
        })
        .collect())
}

/// Flattens a list of matrices in row-major order.
pub fn flatten(parts: &[Array2<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|a| a.iter().copied()).collect()
}
