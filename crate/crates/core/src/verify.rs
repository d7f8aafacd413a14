//! Self-checks: derivative oracles, exact-solution residuals, small
//! numerical oracles and the desk-scale trainings.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::Tape;
use crate::data::{manufactured, nrmse, Geometry, PlaneWaveSpec, SpaceTimeGrid, WaveField};
use crate::layout::Dimension;
use crate::network::input_jet;
use crate::physics::{residuals, ScaleSet};
use crate::sampling::{lhs, lhs_seeded, stream_rng};
use crate::scenarios::{self, soft_material, ScenarioError, WAVENUMBER};
use crate::training::{
    adam_step, default_stages, initial_pack, loss_and_gradient, lr_schedule, train, AdamState, Mapping, Mode,
    TrainConfig, TrainError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl std::str::FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "quick" => Ok(Level::Quick),
            "full" => Ok(Level::Full),
            o => Err(format!("unknown level `{o}` (quick or full)")),
        }
    }
}

/// Deliberate defects for exercising the checks themselves.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Faults {
    /// Multiplies lambda inside the exact-solution residual check.
    pub residual_prefactor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Physics(#[from] crate::physics::PhysicsError),
    #[error(transparent)]
    Sampling(#[from] crate::sampling::SamplingError),
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String), VerifyError>) -> Check {
    let t0 = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name,
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Runs every check of `level`; a check that errors counts as failed.
pub fn run(level: Level, faults: Faults) -> Vec<Check> {
    let mut out = vec![
        timed("autodiff gradient", || {
            let r = gradient_check(20, 0)?;
            Ok((r.passed(1e-4), r.to_string()))
        }),
        timed("plane-wave residual", || {
            let r = residual_check(1000, faults.residual_prefactor)?;
            Ok((r.max() < 1e-10, r.to_string()))
        }),
        timed("nrmse oracle", || {
            let e = nrmse(&[1.0, 2.0], &[0.0, 2.0])?;
            Ok(((e - 0.5f64.sqrt() / 2.0).abs() < 1e-9, format!("{e:.9}")))
        }),
        timed("adam oracle", || {
            let step = adam_first_step(1e-3, 0.37);
            Ok(((step.abs() - 1e-3).abs() < 1e-6, format!("first step {step:e}")))
        }),
        timed("lhs occupancy", || {
            let ok = lhs_occupancy_ok(500, 3, 0)?;
            Ok((ok, "500 points, 3 dimensions".into()))
        }),
        timed("lr schedule", || {
            let st = default_stages();
            let got = [0, 2000, 4000].map(|e| lr_schedule(e, &st).unwrap_or(f64::NAN));
            Ok((got == [1e-3, 1e-4, 1e-5], format!("{got:?}")))
        }),
    ];
    if level == Level::Full {
        out.push(timed("forward training", || {
            let r = forward_run(3000, 0)?;
            Ok((r.passed(), r.to_string()))
        }));
        out.push(timed("inverse training", || {
            let r = inverse_run(Mapping::Sigmoid, true, 3000, 0)?;
            Ok((r.max_error() < 0.05, r.to_string()))
        }));
    }
    out
}

/// Worst relative deviations between exact and finite-difference derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    pub nets: usize,
    pub params: f64,
    pub input_first: f64,
    pub input_second: f64,
}

impl GradientReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.params < tol && self.input_first < tol && self.input_second < tol
    }
}

impl std::fmt::Display for GradientReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} nets: params {:.2e}, d/dx {:.2e}, d2/dx2 {:.2e}",
            self.nets, self.params, self.input_first, self.input_second
        )
    }
}

/// Normwise relative error `max|a - b| / max|b|`, so vanishing components
/// do not divide by zero.
fn rel_errors(exact: &[f64], approx: &[f64]) -> f64 {
    let scale = approx.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let diff = exact.iter().zip(approx).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale.max(f64::MIN_POSITIVE)
}

/// Compares tape gradients of the full plane-strain loss and jet input
/// derivatives with central differences on random 2-layer, 8-wide nets.
pub fn gradient_check(n_nets: usize, seed: u64) -> Result<GradientReport, VerifyError> {
    let scales = scenarios::forward(1, 0)?.scales;
    let mut report = GradientReport {
        nets: n_nets,
        params: 0.0,
        input_first: 0.0,
        input_second: 0.0,
    };
    for i in 0..n_nets as u64 {
        let mut rng = stream_rng(seed, 0x6AD, i);
        let mut config = TrainConfig::new(Dimension::Plane, Mode::Forward);
        config.material = soft_material(0.1).into();
        config.hidden = 8;
        config.layers = 2;
        config.seed = seed.wrapping_add(i);
        let mut pack = initial_pack(&config)?;
        let mut flat = pack.to_flat();
        for p in flat.iter_mut() {
            *p += rng.random_range(-0.2..0.2);
        }
        pack.set_flat(&flat).expect("length preserved");

        let bounds = [(0.0, 1.0), (0.0, 0.05), (0.0, 1.0)];
        let x_d = lhs(6, &bounds, &mut rng)?.points;
        let y_d = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
        let colloc = lhs(12, &bounds, &mut rng)?.points;

        let (_, exact) = loss_and_gradient(&config, &scales, &pack, &x_d, &y_d, &colloc)?;
        let h = 1e-5;
        let mut fd = Vec::with_capacity(flat.len());
        for k in 0..flat.len() {
            let eval = |delta: f64| -> Result<f64, VerifyError> {
                let mut p = pack.clone();
                let mut f = flat.clone();
                f[k] += delta;
                p.set_flat(&f).expect("length preserved");
                Ok(loss_and_gradient(&config, &scales, &p, &x_d, &y_d, &colloc)?.0.total)
            };
            fd.push((eval(h)? - eval(-h)?) / (2.0 * h));
        }
        report.params = report.params.max(rel_errors(&exact, &fd));

        let (first, second) = input_derivative_errors(&pack.net, &x_d);
        report.input_first = report.input_first.max(first);
        report.input_second = report.input_second.max(second);
    }
    Ok(report)
}

/// Jet derivatives of every output along every input, against central
/// differences of the plain forward pass with step 1e-3.
fn input_derivative_errors(net: &crate::network::ModifiedMlpParams, points: &Array2<f64>) -> (f64, f64) {
    let h = 1e-3;
    let n_in = net.dims.n_in;
    let mut exact1 = Vec::new();
    let mut fd1 = Vec::new();
    let mut exact2 = Vec::new();
    let mut fd2 = Vec::new();
    for dir in 0..n_in {
        let tape = Tape::new();
        let tn = net.on_tape(&tape);
        let out = tn.forward(input_jet::<1>(&tape, points, [dir], true));
        let d1 = out.d[0].value().clone();
        let d2 = out.dd.expect("tracked").value().clone();
        for (r, row) in points.rows().into_iter().enumerate() {
            let x = row.to_vec();
            let at = |delta: f64| {
                let mut p = x.clone();
                p[dir] += delta;
                net.forward(&p).expect("input length")
            };
            let (plus, mid, minus) = (at(h), at(0.0), at(-h));
            for j in 0..net.dims.n_out {
                exact1.push(d1[[r, j]]);
                fd1.push((plus[j] - minus[j]) / (2.0 * h));
                exact2.push(d2[[r, j]]);
                fd2.push((plus[j] - 2.0 * mid[j] + minus[j]) / (h * h));
            }
        }
    }
    (rel_errors(&exact1, &fd1), rel_errors(&exact2, &fd2))
}

/// Largest residual magnitude per manufactured field.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub cases: Vec<(String, f64)>,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        self.cases.iter().map(|c| c.1).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for ResidualReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.cases.iter().map(|(n, r)| format!("{n} {r:.1e}")).collect();
        write!(f, "max |r|: {}", parts.join(", "))
    }
}

/// Traveling P and S waves, singly and superposed, in two and three dimensions.
pub fn manufactured_cases() -> Result<Vec<(String, Dimension, WaveField)>, VerifyError> {
    let m = soft_material(0.1);
    let k = WAVENUMBER;
    let p_x = PlaneWaveSpec::p(m, 1.0, k, 0)?;
    let s_xy = PlaneWaveSpec::s(m, 0.5, k, 0, 1)?;
    let s_yx = PlaneWaveSpec::s(m, 0.3, 4.0 * k, 1, 0)?.reversed().with_phase(0.7);
    let p_z = PlaneWaveSpec::p(m, 0.8, 3.0 * k, 2)?;
    let s_xz = PlaneWaveSpec::s(m, 0.4, 2.0 * k, 0, 2)?.with_phase(PI / 3.0);
    let s_zy = PlaneWaveSpec::s(m, 0.6, 5.0 * k, 2, 1)?.reversed();
    let one = |w| WaveField::new(vec![w]);
    Ok(vec![
        ("2d P".into(), Dimension::Plane, one(p_x)?),
        ("2d S".into(), Dimension::Plane, one(s_xy)?),
        (
            "2d P+S".into(),
            Dimension::Plane,
            WaveField::new(vec![p_x, s_xy, s_yx])?,
        ),
        ("3d P".into(), Dimension::Solid, one(p_z)?),
        ("3d S".into(), Dimension::Solid, one(s_xz)?),
        (
            "3d P+S".into(),
            Dimension::Solid,
            WaveField::new(vec![p_x, s_xy, p_z, s_xz, s_zy])?,
        ),
    ])
}

/// Scales from a coarse sampling of `field`; components that never move
/// get unit scale.
pub fn wave_scales(field: &WaveField, dim: Dimension, t_end: f64) -> Result<ScaleSet, VerifyError> {
    let grid = SpaceTimeGrid::new(
        Geometry::beam(dim),
        vec![21; dim.n_space()],
        SpaceTimeGrid::linspace(0.0, t_end, 11),
    )?;
    let ds = manufactured(field, dim, &grid)?;
    let fields = (0..dim.n_fields())
        .map(|j| {
            let m = ds.fields.column(j).fold(0.0_f64, |a, b| a.max(b.abs()));
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect();
    let mat = field.material();
    Ok(ScaleSet {
        dimension: dim,
        length: 200.0,
        time: t_end,
        fields,
        modulus: mat.lambda.max(mat.mu),
        density: mat.rho,
    })
}

/// Residuals of exact plane-wave fields at `n` Latin hypercube points.
pub fn residual_check(n: usize, prefactor: Option<f64>) -> Result<ResidualReport, VerifyError> {
    const T_END: f64 = 0.25;
    let mut cases = Vec::new();
    for (i, (name, dim, field)) in manufactured_cases()?.into_iter().enumerate() {
        let scales = wave_scales(&field, dim, T_END)?;
        let mut mat = field.material().scaled(&scales);
        if let Some(f) = prefactor {
            mat.lambda *= f;
        }
        let g = Geometry::beam(dim);
        let mut bounds: Vec<(f64, f64)> = g.lo.iter().copied().zip(g.hi.iter().copied()).collect();
        bounds.push((0.0, T_END));
        let pts = lhs_seeded(n, &bounds, i as u64)?.points;
        let mut worst = 0.0_f64;
        for row in pts.rows() {
            let x = &row.as_slice().expect("contiguous")[..dim.n_space()];
            let jets = field.jets(dim, x, row[dim.n_space()], &scales);
            for r in residuals(&jets, &mat, &scales, None)? {
                worst = worst.max(r.abs());
            }
        }
        cases.push((name, worst));
    }
    Ok(ResidualReport { cases })
}

/// Parameter change of one Adam step from zero state.
pub fn adam_first_step(lr: f64, grad: f64) -> f64 {
    let mut s = AdamState::new(1, lr);
    let mut p = [0.0];
    adam_step(&mut s, &mut p, &[grad]).expect("finite gradient");
    p[0]
}

/// Every stratum of every dimension holds exactly one point.
pub fn lhs_occupancy_ok(n: usize, d: usize, seed: u64) -> Result<bool, VerifyError> {
    let b = lhs_seeded(n, &vec![(0.0, 1.0); d], seed)?;
    Ok((0..d).all(|j| {
        let mut hits = vec![0usize; n];
        for &x in b.points.column(j) {
            hits[((x * n as f64) as usize).min(n - 1)] += 1;
        }
        hits.iter().all(|&h| h == 1)
    }))
}

#[derive(Debug, Clone)]
pub struct ForwardReport {
    pub nrmse_ux: f64,
    pub nrmse_uy: f64,
    /// Mean total loss over the first and last 100 epochs.
    pub leading: f64,
    pub trailing: f64,
    pub history_csv: String,
}

impl ForwardReport {
    pub fn passed(&self) -> bool {
        self.nrmse_ux < 5e-2 && self.nrmse_uy < 5e-2 && self.trailing < self.leading
    }
}

impl std::fmt::Display for ForwardReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "NRMSE u_x {:.3e}, u_y {:.3e}; loss first/last 100 epochs {:.3e} -> {:.3e}",
            self.nrmse_ux, self.nrmse_uy, self.leading, self.trailing
        )
    }
}

fn window_means(means: &[f64], w: usize) -> (f64, f64) {
    let w = w.min(means.len()).max(1);
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (avg(&means[..w]), avg(&means[means.len().saturating_sub(w)..]))
}

/// Forward desk-scale run scored on the held-out grid.
pub fn forward_run(epochs: usize, seed: u64) -> Result<ForwardReport, VerifyError> {
    let s = scenarios::forward(epochs, seed)?;
    let out = train(&s.config, &s.train, &s.scales)?;
    let e = scenarios::evaluate(&out.pack, &s.scales, &s.held_out[0].data)?;
    let (leading, trailing) = window_means(&out.epoch_means(), 100);
    let mut csv = Vec::new();
    out.write_history(&mut csv, s.config.dimension)
        .expect("writing to memory");
    Ok(ForwardReport {
        nrmse_ux: e.get("u_x").unwrap_or(f64::NAN),
        nrmse_uy: e.get("u_y").unwrap_or(f64::NAN),
        leading,
        trailing,
        history_csv: String::from_utf8(csv).expect("ascii"),
    })
}

#[derive(Debug, Clone)]
pub struct InverseReport {
    pub lambda: f64,
    pub mu: f64,
    pub lambda_error: f64,
    pub mu_error: f64,
    pub warnings: Vec<String>,
}

impl InverseReport {
    pub fn max_error(&self) -> f64 {
        self.lambda_error.max(self.mu_error)
    }
}

impl std::fmt::Display for InverseReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "lambda {:.1} ({:.2}%), mu {:.1} ({:.2}%)",
            self.lambda,
            100.0 * self.lambda_error,
            self.mu,
            100.0 * self.mu_error
        )
    }
}

/// Inverse desk-scale run; errors are relative to the generating material.
pub fn inverse_run(mapping: Mapping, hard_bc: bool, epochs: usize, seed: u64) -> Result<InverseReport, VerifyError> {
    let s = scenarios::inverse(mapping, hard_bc, epochs, seed)?;
    let out = train(&s.config, &s.train, &s.scales)?;
    let m = out.recovered.unwrap_or(crate::physics::MaterialParams {
        lambda: f64::NAN,
        mu: f64::NAN,
        rho: f64::NAN,
    });
    Ok(InverseReport {
        lambda: m.lambda,
        mu: m.mu,
        lambda_error: ((m.lambda - s.truth.lambda) / s.truth.lambda).abs(),
        mu_error: ((m.mu - s.truth.mu) / s.truth.mu).abs(),
        warnings: out.warnings,
    })
}

#[derive(Debug, Clone)]
pub struct SurrogateReport {
    /// `(label, NRMSE of u_y, displacement error)` per held-out mu; the
    /// first entry is the unseen value.
    pub rows: Vec<(String, f64, f64)>,
}

impl std::fmt::Display for SurrogateReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .rows
            .iter()
            .map(|(l, uy, u)| format!("{l}: u_y {uy:.3e}, u {u:.3e}"))
            .collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn surrogate_run(epochs: usize, seed: u64) -> Result<SurrogateReport, VerifyError> {
    let s = scenarios::surrogate(epochs, seed)?;
    let out = train(&s.config, &s.train, &s.scales)?;
    let rows = s
        .held_out
        .iter()
        .map(|h| {
            let e = scenarios::evaluate(&out.pack, &s.scales, &h.data)?;
            Ok((h.label.clone(), e.get("u_y").unwrap_or(f64::NAN), e.displacement))
        })
        .collect::<Result<_, ScenarioError>>()?;
    Ok(SurrogateReport { rows })
}
