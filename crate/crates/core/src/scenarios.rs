//! Desk-scale runs on manufactured plane-wave data.
//!
//! Each builder returns a training set, scales, a ready [`TrainConfig`] and
//! held-out grids with the exact solution for scoring.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::data::{
    manufactured, nrmse, subsample_boundary, subsample_interior, DataError, Geometry, PlaneWaveSpec, ReferenceDataset,
    SpaceTimeGrid, WaveField,
};
use crate::layout::Dimension;
use crate::network::NetworkError;
use crate::physics::{make_scales, LossWeights, MaterialParams, PhysicsError, ScaleOverrides, ScaleSet};
use crate::training::{Mapping, Mode, Stage, TrainConfig, TrainablePack};

/// Soft material used for the forward and surrogate runs.
pub fn soft_material(mu: f64) -> MaterialParams {
    MaterialParams {
        lambda: 0.533334,
        mu,
        rho: 0.92e-6,
    }
}

/// Structural steel used for the inverse run.
pub fn steel() -> MaterialParams {
    MaterialParams {
        lambda: 115385.0,
        mu: 76923.0,
        rho: 7.85e-6,
    }
}

/// One wavelength over the beam length.
pub const WAVENUMBER: f64 = 2.0 * PI / 200.0;

#[derive(Debug, Clone)]
pub struct HeldOut {
    pub label: String,
    pub data: ReferenceDataset,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: TrainConfig,
    pub train: ReferenceDataset,
    pub scales: ScaleSet,
    pub held_out: Vec<HeldOut>,
    /// Material that generated the data.
    pub truth: MaterialParams,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn grid(nodes: [usize; 2], n_times: usize, t_end: f64) -> Result<SpaceTimeGrid, DataError> {
    SpaceTimeGrid::new(
        Geometry::beam(Dimension::Plane),
        nodes.to_vec(),
        SpaceTimeGrid::linspace(0.0, t_end, n_times),
    )
}

/// 51 x 11 nodes at 50 instants.
fn evaluation_grid(t_end: f64) -> Result<SpaceTimeGrid, DataError> {
    grid([51, 11], 50, t_end)
}

/// P wave (u_x) plus an S wave polarized along y (u_y), both traveling
/// along the beam. Training data: 7% of the boundary nodes.
pub fn forward(epochs: usize, seed: u64) -> Result<Scenario, ScenarioError> {
    const T_END: f64 = 0.125;
    let m = soft_material(0.1);
    let field = WaveField::new(vec![
        PlaneWaveSpec::p(m, 1.0, WAVENUMBER, 0)?,
        PlaneWaveSpec::s(m, 0.5, WAVENUMBER, 0, 1)?,
    ])?;
    let full = manufactured(&field, Dimension::Plane, &grid([41, 9], 26, T_END)?)?;
    let train = subsample_boundary(&full, 0.07, seed)?;
    let scales = make_scales(&full, &ScaleOverrides::default())?;

    let mut config = TrainConfig::new(Dimension::Plane, Mode::Forward);
    config.material = m.into();
    config.stages = three_stages(epochs);
    config.batch_size = train.len();
    config.n_collocation = 500;
    config.seed = seed;
    config.checkpoint_every = 0;

    Ok(Scenario {
        config,
        train,
        scales,
        held_out: vec![HeldOut {
            label: "held-out grid".into(),
            data: manufactured(&field, Dimension::Plane, &evaluation_grid(T_END)?)?,
        }],
        truth: m,
    })
}

/// Standing P and S waves in steel, clamped at `x = 0`; the network learns
/// lambda and mu from all boundary data and a sprinkle of interior data.
pub fn inverse(mapping: Mapping, hard_bc: bool, epochs: usize, seed: u64) -> Result<Scenario, ScenarioError> {
    const T_END: f64 = 0.6e-3;
    let m = steel();
    let p = PlaneWaveSpec::p(m, 1.0, WAVENUMBER, 0)?;
    let s = PlaneWaveSpec::s(m, 0.5, WAVENUMBER, 0, 1)?;
    let field = WaveField::new(vec![p, p.reversed().with_phase(PI), s, s.reversed().with_phase(PI)])?;
    let full = manufactured(&field, Dimension::Plane, &grid([41, 9], 21, T_END)?)?;
    let train = ReferenceDataset::concat(&[
        subsample_boundary(&full, 1.0, seed)?,
        subsample_interior(&full, 0.05, seed)?,
    ])?;
    let overrides = ScaleOverrides {
        modulus: Some(150000.0),
        ..ScaleOverrides::default()
    };
    let scales = make_scales(&full, &overrides)?;

    let mut config = TrainConfig::new(Dimension::Plane, Mode::Inverse(mapping));
    config.hard_bc = hard_bc;
    config.material.rho = Some(m.rho);
    config.stages = three_stages(epochs);
    config.batch_size = train.len();
    config.n_collocation = 500;
    // Unit weighting lets the trivial zero field win early on.
    config.weights.data_weight = 10.0;
    config.seed = seed;
    config.checkpoint_every = 0;

    Ok(Scenario {
        config,
        train,
        scales,
        held_out: vec![HeldOut {
            label: "held-out grid".into(),
            data: manufactured(&field, Dimension::Plane, &evaluation_grid(T_END)?)?,
        }],
        truth: m,
    })
}

/// Training values of mu (MPa) for the surrogate.
pub const SURROGATE_TRAIN_MU: [f64; 3] = [0.05, 0.1, 0.2];
/// Unseen test value of mu (MPa).
pub const SURROGATE_TEST_MU: f64 = 0.075;

fn s_wave(mu: f64) -> Result<WaveField, DataError> {
    WaveField::new(vec![PlaneWaveSpec::s(soft_material(mu), 1.0, WAVENUMBER, 0, 1)?])
}

/// S waves whose speed varies with mu; mu is a network input.
pub fn surrogate(epochs: usize, seed: u64) -> Result<Scenario, ScenarioError> {
    const T_END: f64 = 0.3;
    let train_grid = grid([21, 3], 16, T_END)?;
    let parts = SURROGATE_TRAIN_MU
        .iter()
        .map(|&mu| Ok(manufactured(&s_wave(mu)?, Dimension::Plane, &train_grid)?.with_mu(mu)))
        .collect::<Result<Vec<_>, DataError>>()?;
    let train = ReferenceDataset::concat(&parts)?;

    // An S wave along x has no u_x, s_xx or s_yy; borrow the scales of
    // the components that do move.
    let mut overrides = ScaleOverrides {
        modulus: Some(soft_material(0.1).lambda),
        ..ScaleOverrides::default()
    };
    let u = max_abs(&train, "u_y");
    let s = max_abs(&train, "s_xy");
    overrides.fields.insert("u_x".into(), u);
    overrides.fields.insert("s_xx".into(), s);
    overrides.fields.insert("s_yy".into(), s);
    let scales = make_scales(&train, &overrides)?;

    let mut config = TrainConfig::new(Dimension::Plane, Mode::Surrogate);
    config.material.lambda = Some(soft_material(0.1).lambda);
    config.material.rho = Some(soft_material(0.1).rho);
    config.stages = three_stages(epochs);
    config.batch_size = train.len().div_ceil(4);
    config.n_collocation = 500;
    config.weights = LossWeights::unit(Dimension::Plane);
    config.seed = seed;
    config.checkpoint_every = 0;

    let eval = evaluation_grid(T_END)?;
    let held_out = std::iter::once(SURROGATE_TEST_MU)
        .chain(SURROGATE_TRAIN_MU)
        .map(|mu| {
            Ok(HeldOut {
                label: format!("mu={mu}"),
                data: manufactured(&s_wave(mu)?, Dimension::Plane, &eval)?.with_mu(mu),
            })
        })
        .collect::<Result<_, DataError>>()?;

    Ok(Scenario {
        config,
        train,
        scales,
        held_out,
        truth: soft_material(SURROGATE_TEST_MU),
    })
}

fn max_abs(ds: &ReferenceDataset, name: &str) -> f64 {
    ds.field(name)
        .unwrap_or_default()
        .iter()
        .fold(0.0, |a, &b| a.max(b.abs()))
}

/// 80% of the epochs at 1e-3, then a tenth each at 1e-4 and 1e-5.
pub fn three_stages(epochs: usize) -> Vec<Stage> {
    let a = epochs * 8 / 10;
    let b = epochs / 10;
    vec![
        Stage { epochs: a, lr: 1e-3 },
        Stage { epochs: b, lr: 1e-4 },
        Stage {
            epochs: epochs - a - b,
            lr: 1e-5,
        },
    ]
}

/// Per-field errors of a trained pack against one reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldErrors {
    pub names: Vec<&'static str>,
    /// NRMSE per field; `None` where the reference is constant.
    pub nrmse: Vec<Option<f64>>,
    /// Displacement RMSE over the range of the most varying displacement
    /// component; defined even when some components are constant.
    pub displacement: f64,
}

impl FieldErrors {
    pub fn get(&self, name: &str) -> Option<f64> {
        let i = self.names.iter().position(|&n| n == name)?;
        self.nrmse[i]
    }
}

pub fn evaluate(
    pack: &TrainablePack,
    scales: &ScaleSet,
    reference: &ReferenceDataset,
) -> Result<FieldErrors, ScenarioError> {
    let pred = pack.predict(scales, &reference.points)?;
    Ok(field_errors(&pred, reference))
}

/// Scores predicted fields (physical units, layout order) against a reference.
pub fn field_errors(pred: &Array2<f64>, reference: &ReferenceDataset) -> FieldErrors {
    let dim = reference.dimension;
    let col = |a: &Array2<f64>, j: usize| a.column(j).to_vec();
    let nrmse_all: Vec<Option<f64>> = (0..dim.n_fields())
        .map(|j| nrmse(&col(pred, j), &col(&reference.fields, j)).ok())
        .collect();

    let n_disp = dim.n_displacements();
    let mut range = 0.0_f64;
    let mut sq = 0.0;
    for j in 0..n_disp {
        let r = col(&reference.fields, j);
        let (lo, hi) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
        range = range.max(hi - lo);
        sq += pred.column(j).iter().zip(&r).map(|(p, r)| (p - r).powi(2)).sum::<f64>();
    }
    let rmse = (sq / (reference.len() * n_disp) as f64).sqrt();
    FieldErrors {
        names: dim.field_names().to_vec(),
        nrmse: nrmse_all,
        displacement: if range > 0.0 { rmse / range } else { f64::NAN },
    }
}
