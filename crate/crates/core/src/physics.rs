//! Scaling, elastodynamic residuals and loss assembly.
//!
//! Every quantity `q` is scaled as `q* = q / q_c`. Space uses one length
//! scale for all axes and both Lamé constants share one modulus scale.
//! Residuals are the non-dimensional momentum balance and constitutive
//! relations, each divided through so that the leading term carries unit
//! or ratio-of-scales coefficients.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::autodiff::Scalar;
use crate::data::ReferenceDataset;
use crate::layout::Dimension;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysicsError {
    #[error("no samples to derive the `{0}` scale from; provide an override")]
    EmptyDataset(String),
    #[error("`{0}` is identically zero in the dataset; provide an override for its scale")]
    ZeroScale(String),
    #[error("`{0}` scale must come from an override or known material")]
    MissingScale(&'static str),
    #[error("scale `{name}` must be positive and finite, got {value}")]
    InvalidScale { name: String, value: f64 },
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
    #[error("missing derivative: {0}")]
    MissingDerivative(String),
    #[error("expected {expected} {what}, got {got}")]
    Count {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("prediction and reference differ in shape: {pred:?} vs {reference:?}")]
    Misaligned {
        pred: (usize, usize),
        reference: (usize, usize),
    },
    #[error("loss weight `{0}` is negative or not finite")]
    NegativeWeight(String),
}

/// Lamé constants (MPa) and density (kg/mm^3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    pub lambda: f64,
    pub mu: f64,
    pub rho: f64,
}

impl MaterialParams {
    pub fn new(lambda: f64, mu: f64, rho: f64) -> Result<Self, PhysicsError> {
        let m = MaterialParams { lambda, mu, rho };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !(ok(self.lambda) && ok(self.mu) && ok(self.rho)) {
            return Err(PhysicsError::InvalidMaterial(format!(
                "lambda, mu and rho must be positive, got {self:?}"
            )));
        }
        if self.lambda + 2.0 * self.mu <= 0.0 {
            return Err(PhysicsError::InvalidMaterial("lambda + 2 mu must be positive".into()));
        }
        Ok(())
    }

    /// P-wave modulus `lambda + 2 mu`.
    pub fn p_modulus(&self) -> f64 {
        self.lambda + 2.0 * self.mu
    }

    pub fn scaled(&self, s: &ScaleSet) -> ScaledMaterial<f64> {
        ScaledMaterial {
            lambda: self.lambda / s.modulus,
            mu: self.mu / s.modulus,
            rho: self.rho / s.density,
        }
    }
}

/// Non-dimensional material coefficients. Components may be per-point
/// (e.g. `mu*` as a surrogate input column).
#[derive(Debug, Clone, Copy)]
pub struct ScaledMaterial<S> {
    pub lambda: S,
    pub mu: S,
    pub rho: S,
}

/// Characteristic scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    pub dimension: Dimension,
    /// mm, shared by all spatial axes.
    pub length: f64,
    /// s
    pub time: f64,
    /// One scale per field in layout order (mm for displacements, MPa for stresses).
    pub fields: Vec<f64>,
    /// MPa, shared by lambda and mu.
    pub modulus: f64,
    /// kg/mm^3
    pub density: f64,
}

/// Explicit scale values that take precedence over dataset maxima.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScaleOverrides {
    pub length: Option<f64>,
    pub time: Option<f64>,
    /// Keyed by field name (`u_x`, `s_xy`, ...).
    pub fields: BTreeMap<String, f64>,
    pub modulus: Option<f64>,
    pub density: Option<f64>,
}

impl ScaleSet {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        if self.fields.len() != self.dimension.n_fields() {
            return Err(PhysicsError::Count {
                what: "field scales",
                expected: self.dimension.n_fields(),
                got: self.fields.len(),
            });
        }
        let named = [
            ("length", self.length),
            ("time", self.time),
            ("modulus", self.modulus),
            ("density", self.density),
        ];
        let fields = self
            .dimension
            .field_names()
            .iter()
            .zip(&self.fields)
            .map(|(n, &v)| (*n, v));
        for (name, value) in named.into_iter().chain(fields) {
            if !(value.is_finite() && value > 0.0) {
                return Err(PhysicsError::InvalidScale {
                    name: name.to_string(),
                    value,
                });
            }
        }
        Ok(())
    }

    pub fn field(&self, name: &str) -> f64 {
        let i = self
            .dimension
            .field_index(name)
            .unwrap_or_else(|| panic!("no field `{name}` in {}", self.dimension));
        self.fields[i]
    }

    /// Scales physical inputs `(x, y, [z], t, [mu])` column by column.
    pub fn scale_points(&self, points: &Array2<f64>) -> Array2<f64> {
        let mut out = points.clone();
        let t = self.dimension.time_column();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let c = match j {
                _ if j < t => self.length,
                _ if j == t => self.time,
                _ => self.modulus,
            };
            col.mapv_inplace(|x| x / c);
        }
        out
    }

    pub fn scale_fields(&self, fields: &Array2<f64>) -> Array2<f64> {
        let mut out = fields.clone();
        for (mut col, &c) in out.axis_iter_mut(Axis(1)).zip(&self.fields) {
            col.mapv_inplace(|x| x / c);
        }
        out
    }

    pub fn unscale_fields(&self, fields: &Array2<f64>) -> Array2<f64> {
        let mut out = fields.clone();
        for (mut col, &c) in out.axis_iter_mut(Axis(1)).zip(&self.fields) {
            col.mapv_inplace(|x| x * c);
        }
        out
    }
}

/// Derives scales as the absolute maximum of each quantity in `reference`,
/// unless overridden.
pub fn make_scales(reference: &ReferenceDataset, overrides: &ScaleOverrides) -> Result<ScaleSet, PhysicsError> {
    let dim = reference.dimension;
    let points = &reference.points;
    let max_abs = |name: &str, cols: &mut dyn Iterator<Item = ndarray::ArrayView1<f64>>| {
        if points.nrows() == 0 {
            return Err(PhysicsError::EmptyDataset(name.to_string()));
        }
        let m = cols
            .flat_map(|c| c.into_iter().map(|x| x.abs()).collect::<Vec<_>>())
            .fold(0.0_f64, f64::max);
        if m == 0.0 {
            Err(PhysicsError::ZeroScale(name.to_string()))
        } else {
            Ok(m)
        }
    };

    let length = match overrides.length {
        Some(v) => v,
        None => max_abs("length", &mut (0..dim.n_space()).map(|j| points.column(j)))?,
    };
    let time = match overrides.time {
        Some(v) => v,
        None => max_abs("t", &mut std::iter::once(points.column(dim.time_column())))?,
    };
    let mut fields = Vec::with_capacity(dim.n_fields());
    for (j, &name) in dim.field_names().iter().enumerate() {
        let v = match overrides.fields.get(name) {
            Some(&v) => v,
            None => max_abs(name, &mut std::iter::once(reference.fields.column(j)))?,
        };
        fields.push(v);
    }
    let hint = reference.material_hint;
    let modulus = overrides
        .modulus
        .or(hint.map(|m| m.lambda.max(m.mu)))
        .ok_or(PhysicsError::MissingScale("modulus"))?;
    let density = overrides
        .density
        .or(hint.map(|m| m.rho))
        .ok_or(PhysicsError::MissingScale("density"))?;

    let s = ScaleSet {
        dimension: dim,
        length,
        time,
        fields,
        modulus,
        density,
    };
    s.validate()?;
    Ok(s)
}

/// Field values and the input derivatives the residuals consume, all in
/// scaled units.
#[derive(Debug, Clone)]
pub struct FieldJets<S> {
    /// One entry per field in layout order.
    pub values: Vec<S>,
    /// `gradient[axis][field]`: first spatial derivatives.
    pub gradient: Vec<Vec<S>>,
    /// Second time derivative of each displacement component.
    pub accel: Vec<S>,
}

impl<S> FieldJets<S> {
    fn check(&self, dim: Dimension) -> Result<(), PhysicsError> {
        let nf = dim.n_fields();
        if self.values.len() != nf {
            return Err(PhysicsError::Count {
                what: "field values",
                expected: nf,
                got: self.values.len(),
            });
        }
        if self.gradient.len() != dim.n_space() {
            return Err(PhysicsError::MissingDerivative(format!(
                "spatial gradient along {} axes, expected {}",
                self.gradient.len(),
                dim.n_space()
            )));
        }
        if let Some(axis) = self.gradient.iter().position(|g| g.len() != nf) {
            return Err(PhysicsError::MissingDerivative(format!(
                "d/d{} of every field",
                dim.space_names()[axis]
            )));
        }
        if self.accel.len() != dim.n_displacements() {
            return Err(PhysicsError::MissingDerivative(
                "second time derivative of every displacement".into(),
            ));
        }
        Ok(())
    }
}

/// Plane-strain residuals `(r_x, r_y, r_xx, r_yy, r_xy)`.
///
/// `source`, when given, is subtracted from the two momentum residuals.
pub fn residual_2d<S: Scalar>(
    f: &FieldJets<S>,
    mat: &ScaledMaterial<S>,
    s: &ScaleSet,
    source: Option<&[S]>,
) -> Result<[S; 5], PhysicsError> {
    const UX: usize = 0;
    const UY: usize = 1;
    const SXX: usize = 2;
    const SYY: usize = 3;
    const SXY: usize = 4;
    f.check(Dimension::Plane)?;
    check_source(source, 2)?;
    let c = &s.fields;
    let (l, t) = (s.length, s.time);
    let dx = &f.gradient[0];
    let dy = &f.gradient[1];
    let v = &f.values;
    let p_modulus = mat.lambda + mat.mu.scale(2.0);

    let inertia = |u: usize| c[u] * s.density * l / (c[SXX] * t * t);
    let mut r_x = dx[SXX] + dy[SXY].scale(c[SXY] / c[SXX]) - (mat.rho * f.accel[UX]).scale(inertia(UX));
    let mut r_y =
        dx[SXY].scale(c[SXY] / c[SXX]) + dy[SYY].scale(c[SYY] / c[SXX]) - (mat.rho * f.accel[UY]).scale(inertia(UY));
    if let Some(src) = source {
        r_x = r_x - src[0];
        r_y = r_y - src[1];
    }

    let stress = |k: usize| c[k] * l / (c[UY] * s.modulus);
    let ratio = c[UX] / c[UY];
    let r_xx = v[SXX].scale(stress(SXX)) - (p_modulus * dx[UX]).scale(ratio) - mat.lambda * dy[UY];
    let r_yy = v[SYY].scale(stress(SYY)) - (mat.lambda * dx[UX]).scale(ratio) - p_modulus * dy[UY];
    let r_xy = v[SXY].scale(stress(SXY)) - mat.mu * (dx[UY] + dy[UX].scale(ratio));
    Ok([r_x, r_y, r_xx, r_yy, r_xy])
}

/// Solid residuals `(r_x, r_y, r_z, r_xx, r_yy, r_zz, r_xy, r_yz, r_xz)`.
///
/// Constitutive residuals are divided through by the `u_z` scale.
pub fn residual_3d<S: Scalar>(
    f: &FieldJets<S>,
    mat: &ScaledMaterial<S>,
    s: &ScaleSet,
    source: Option<&[S]>,
) -> Result<[S; 9], PhysicsError> {
    const UX: usize = 0;
    const UY: usize = 1;
    const UZ: usize = 2;
    const SXX: usize = 3;
    const SYY: usize = 4;
    const SZZ: usize = 5;
    const SXY: usize = 6;
    const SYZ: usize = 7;
    const SXZ: usize = 8;
    f.check(Dimension::Solid)?;
    check_source(source, 3)?;
    let c = &s.fields;
    let (l, t) = (s.length, s.time);
    let (dx, dy, dz) = (&f.gradient[0], &f.gradient[1], &f.gradient[2]);
    let v = &f.values;
    let p_modulus = mat.lambda + mat.mu.scale(2.0);
    let r = |k: usize| c[k] / c[SXX];
    let inertia = |u: usize| c[u] * s.density * l / (c[SXX] * t * t);

    let mut r_x = dx[SXX] + dy[SXY].scale(r(SXY)) + dz[SXZ].scale(r(SXZ)) - (mat.rho * f.accel[UX]).scale(inertia(UX));
    let mut r_y = dx[SXY].scale(r(SXY)) + dy[SYY].scale(r(SYY)) + dz[SYZ].scale(r(SYZ))
        - (mat.rho * f.accel[UY]).scale(inertia(UY));
    let mut r_z = dx[SXZ].scale(r(SXZ)) + dy[SYZ].scale(r(SYZ)) + dz[SZZ].scale(r(SZZ))
        - (mat.rho * f.accel[UZ]).scale(inertia(UZ));
    if let Some(src) = source {
        r_x = r_x - src[0];
        r_y = r_y - src[1];
        r_z = r_z - src[2];
    }

    let stress = |k: usize| c[k] * l / (c[UZ] * s.modulus);
    let (ax, ay) = (c[UX] / c[UZ], c[UY] / c[UZ]);
    let r_xx = v[SXX].scale(stress(SXX))
        - (p_modulus * dx[UX]).scale(ax)
        - (mat.lambda * dy[UY]).scale(ay)
        - mat.lambda * dz[UZ];
    let r_yy = v[SYY].scale(stress(SYY))
        - (mat.lambda * dx[UX]).scale(ax)
        - (p_modulus * dy[UY]).scale(ay)
        - mat.lambda * dz[UZ];
    let r_zz = v[SZZ].scale(stress(SZZ))
        - (mat.lambda * dx[UX]).scale(ax)
        - (mat.lambda * dy[UY]).scale(ay)
        - p_modulus * dz[UZ];
    let r_xy = v[SXY].scale(stress(SXY)) - mat.mu * (dx[UY].scale(ay) + dy[UX].scale(ax));
    let r_yz = v[SYZ].scale(stress(SYZ)) - mat.mu * (dz[UY].scale(ay) + dy[UZ]);
    let r_xz = v[SXZ].scale(stress(SXZ)) - mat.mu * (dz[UX].scale(ax) + dx[UZ]);
    Ok([r_x, r_y, r_z, r_xx, r_yy, r_zz, r_xy, r_yz, r_xz])
}

fn check_source<S>(source: Option<&[S]>, n: usize) -> Result<(), PhysicsError> {
    match source {
        Some(s) if s.len() != n => Err(PhysicsError::Count {
            what: "source components",
            expected: n,
            got: s.len(),
        }),
        _ => Ok(()),
    }
}

/// Residuals for either dimension, in layout order.
pub fn residuals<S: Scalar>(
    f: &FieldJets<S>,
    mat: &ScaledMaterial<S>,
    s: &ScaleSet,
    source: Option<&[S]>,
) -> Result<Vec<S>, PhysicsError> {
    Ok(match s.dimension {
        Dimension::Plane => residual_2d(f, mat, s, source)?.to_vec(),
        Dimension::Solid => residual_3d(f, mat, s, source)?.to_vec(),
    })
}

/// Names of the equation terms in order.
pub fn residual_names(dim: Dimension) -> &'static [&'static str] {
    match dim {
        Dimension::Plane => &["L_x", "L_y", "L_xx", "L_yy", "L_xy"],
        Dimension::Solid => &["L_x", "L_y", "L_z", "L_xx", "L_yy", "L_zz", "L_xy", "L_yz", "L_xz"],
    }
}

/// Per-field mean squared error `(1/N) sum (q - q_ref)^2`.
pub fn data_loss(pred: &Array2<f64>, reference: &Array2<f64>) -> Result<Vec<f64>, PhysicsError> {
    if pred.dim() != reference.dim() {
        return Err(PhysicsError::Misaligned {
            pred: pred.dim(),
            reference: reference.dim(),
        });
    }
    let n = pred.nrows() as f64;
    Ok(pred
        .axis_iter(Axis(1))
        .zip(reference.axis_iter(Axis(1)))
        .map(|(p, r)| p.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
        .collect())
}

/// Loss weighting: `L = data_weight * sum(data) + eqn_weight * sum(alpha_i * eqn_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub data_weight: f64,
    pub eqn_weight: f64,
}

impl LossWeights {
    /// All weights one.
    pub fn unit(dim: Dimension) -> Self {
        LossWeights {
            alpha: vec![1.0; dim.n_fields()],
            data_weight: 1.0,
            eqn_weight: 1.0,
        }
    }

    /// Plane-strain surrogate preset: momentum weights 1e3.
    pub fn plane_surrogate() -> Self {
        let mut w = Self::unit(Dimension::Plane);
        w.alpha[0] = 1e3;
        w.alpha[1] = 1e3;
        w
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        let bad = |x: f64| !(x.is_finite() && x >= 0.0);
        if bad(self.data_weight) {
            return Err(PhysicsError::NegativeWeight("lambda_1".into()));
        }
        if bad(self.eqn_weight) {
            return Err(PhysicsError::NegativeWeight("lambda_2".into()));
        }
        if let Some(i) = self.alpha.iter().position(|&a| bad(a)) {
            return Err(PhysicsError::NegativeWeight(format!("alpha_{}", i + 1)));
        }
        Ok(())
    }

    /// Weighted total for any scalar type; the summation order is fixed.
    pub fn combine<S: Scalar>(&self, data: &[S], eqn: &[S]) -> S {
        let data_sum = sum(data);
        let eqn_sum = sum(&eqn
            .iter()
            .zip(&self.alpha)
            .map(|(&e, &a)| e.scale(a))
            .collect::<Vec<_>>());
        data_sum.scale(self.data_weight) + eqn_sum.scale(self.eqn_weight)
    }
}

fn sum<S: Scalar>(xs: &[S]) -> S {
    let mut it = xs.iter().copied();
    let first = it.next().expect("at least one loss term");
    it.fold(first, |acc, x| acc + x)
}

/// Loss terms and their weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub data_terms: Vec<f64>,
    pub eqn_terms: Vec<f64>,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBreakdown {
    pub fn data_total(&self) -> f64 {
        self.data_terms.iter().sum()
    }

    pub fn eqn_total(&self) -> f64 {
        self.eqn_terms.iter().zip(&self.weights.alpha).map(|(e, a)| e * a).sum()
    }
}

pub fn total_loss(data_terms: &[f64], eqn_terms: &[f64], weights: &LossWeights) -> Result<LossBreakdown, PhysicsError> {
    weights.validate()?;
    let n = weights.alpha.len();
    if n != 5 && n != 9 {
        return Err(PhysicsError::Count {
            what: "equation weights (5 or 9)",
            expected: 5,
            got: n,
        });
    }
    for (what, terms) in [("data terms", data_terms), ("equation terms", eqn_terms)] {
        if terms.len() != n {
            return Err(PhysicsError::Count {
                what,
                expected: n,
                got: terms.len(),
            });
        }
    }
    Ok(LossBreakdown {
        data_terms: data_terms.to_vec(),
        eqn_terms: eqn_terms.to_vec(),
        weights: weights.clone(),
        total: weights.combine(data_terms, eqn_terms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_scales(dim: Dimension) -> ScaleSet {
        ScaleSet {
            dimension: dim,
            length: 1.0,
            time: 1.0,
            fields: vec![1.0; dim.n_fields()],
            modulus: 1.0,
            density: 1.0,
        }
    }

    fn zero_jets(dim: Dimension) -> FieldJets<f64> {
        FieldJets {
            values: vec![0.0; dim.n_fields()],
            gradient: vec![vec![0.0; dim.n_fields()]; dim.n_space()],
            accel: vec![0.0; dim.n_displacements()],
        }
    }

    fn unit_material() -> ScaledMaterial<f64> {
        ScaledMaterial {
            lambda: 0.7,
            mu: 0.3,
            rho: 1.0,
        }
    }

    #[test]
    fn zero_fields_zero_residuals() {
        let r = residual_2d(
            &zero_jets(Dimension::Plane),
            &unit_material(),
            &unit_scales(Dimension::Plane),
            None,
        )
        .unwrap();
        assert_eq!(r, [0.0; 5]);
        let r = residual_3d(
            &zero_jets(Dimension::Solid),
            &unit_material(),
            &unit_scales(Dimension::Solid),
            None,
        )
        .unwrap();
        assert_eq!(r, [0.0; 9]);
    }

    #[test]
    fn constitutive_substitution_annihilates_r_xx() {
        // u_x* = x*, u_y* = 0, s_xx* = (u_x_c lambda_c / (s_xx_c l_c)) (lambda* + 2 mu*)
        let mut s = unit_scales(Dimension::Plane);
        s.length = 200.0;
        s.fields = vec![0.02, 0.5, 3.0, 1.2, 0.4];
        s.modulus = 150.0;
        let mat = unit_material();
        let mut f = zero_jets(Dimension::Plane);
        f.gradient[0][0] = 1.0;
        f.values[2] = s.fields[0] * s.modulus / (s.fields[2] * s.length) * (mat.lambda + 2.0 * mat.mu);
        let r = residual_2d(&f, &mat, &s, None).unwrap();
        assert!(r[2].abs() < 1e-15, "r_xx = {}", r[2]);
    }

    #[test]
    fn missing_acceleration_is_error() {
        let mut f = zero_jets(Dimension::Plane);
        f.accel.pop();
        let err = residual_2d(&f, &unit_material(), &unit_scales(Dimension::Plane), None).unwrap_err();
        assert!(matches!(err, PhysicsError::MissingDerivative(_)));
    }

    #[test]
    fn source_is_subtracted() {
        let f = zero_jets(Dimension::Plane);
        let r = residual_2d(&f, &unit_material(), &unit_scales(Dimension::Plane), Some(&[1.5, -2.0])).unwrap();
        assert_eq!(&r[..2], &[-1.5, 2.0]);
    }

    #[test]
    fn data_loss_examples() {
        let a = ndarray::array![[1.0], [2.0]];
        let b = ndarray::array![[0.0], [2.0]];
        assert_eq!(data_loss(&a, &b).unwrap(), vec![0.5]);
        assert_eq!(data_loss(&a, &a).unwrap(), vec![0.0]);
        assert_eq!(
            data_loss(&ndarray::array![[1.0]], &ndarray::array![[0.0]]).unwrap(),
            vec![1.0]
        );
        assert!(data_loss(&a, &ndarray::array![[0.0]]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::unit(Dimension::Plane);
        assert_eq!(total_loss(&[0.0; 5], &[0.0; 5], &w).unwrap().total, 0.0);
        assert_eq!(total_loss(&[1.0; 5], &[1.0; 5], &w).unwrap().total, 10.0);
        let s = LossWeights::plane_surrogate();
        let b = total_loss(&[0.0; 5], &[1e-3, 1e-3, 0.0, 0.0, 0.0], &s).unwrap();
        assert!((b.total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_rejected() {
        let mut w = LossWeights::unit(Dimension::Plane);
        w.alpha[3] = -1.0;
        assert_eq!(
            total_loss(&[0.0; 5], &[0.0; 5], &w).unwrap_err(),
            PhysicsError::NegativeWeight("alpha_4".into())
        );
    }

    #[test]
    fn term_count_must_match_mode() {
        let w = LossWeights::unit(Dimension::Solid);
        assert!(total_loss(&[0.0; 5], &[0.0; 9], &w).is_err());
    }
}
