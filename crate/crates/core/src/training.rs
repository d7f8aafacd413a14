//! Adam training for the forward, inverse and surrogate modes.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Jet, Scalar, Tape, Var};
use crate::data::ReferenceDataset;
use crate::layout::Dimension;
use crate::network::{input_jet, Dims, ModifiedMlpParams, NetworkError, TapeNetwork};
use crate::physics::{
    residuals, total_loss, FieldJets, LossBreakdown, LossWeights, MaterialParams, PhysicsError, ScaleSet,
    ScaledMaterial,
};
use crate::sampling::{epoch_batches, lhs, stream_rng, SamplingError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset does not match the run: {0}")]
    Dataset(String),
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("training diverged at epoch {epoch}, step {step} ({source})")]
    Diverged {
        epoch: usize,
        step: usize,
        source: AutodiffError,
        /// Most recent checkpointed state.
        last_good: Box<TrainablePack>,
    },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<(), TrainError> {
    assert_eq!(params.len(), grad.len(), "adam: gradient length");
    assert_eq!(params.len(), state.m.len(), "adam: state length");
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            step: state.step_count as usize,
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Piecewise-constant learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub epochs: usize,
    pub lr: f64,
}

/// 2000 epochs each at 1e-3, 1e-4 and 1e-5.
pub fn default_stages() -> Vec<Stage> {
    vec![
        Stage { epochs: 2000, lr: 1e-3 },
        Stage { epochs: 2000, lr: 1e-4 },
        Stage { epochs: 2000, lr: 1e-5 },
    ]
}

pub fn lr_schedule(epoch: usize, stages: &[Stage]) -> Result<f64, TrainError> {
    let mut end = 0;
    for s in stages {
        end += s.epochs;
        if epoch < end {
            return Ok(s.lr);
        }
    }
    Err(TrainError::Config(format!(
        "epoch {epoch} is beyond the schedule's {end} epochs"
    )))
}

/// Map from raw trainables to scaled Lamé constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mapping {
    Linear,
    Sigmoid,
    Tanh,
}

impl Mapping {
    pub fn apply<S: Scalar>(self, raw: S) -> S {
        match self {
            Mapping::Linear => raw,
            Mapping::Sigmoid => raw.sigmoid(),
            Mapping::Tanh => raw.tanh(),
        }
    }
}

impl fmt::Display for Mapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mapping::Linear => "linear",
            Mapping::Sigmoid => "sigmoid",
            Mapping::Tanh => "tanh",
        })
    }
}

impl FromStr for Mapping {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "linear" => Ok(Mapping::Linear),
            "sigmoid" => Ok(Mapping::Sigmoid),
            "tanh" => Ok(Mapping::Tanh),
            o => Err(format!("unknown mapping `{o}` (linear, sigmoid or tanh)")),
        }
    }
}

/// Scaled and physical Lamé constants recovered from raw trainables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappedMaterial {
    pub lambda_scaled: f64,
    pub mu_scaled: f64,
    pub lambda: f64,
    pub mu: f64,
}

pub fn map_material(raw: [f64; 2], mapping: Mapping, modulus_scale: f64) -> MappedMaterial {
    let lambda_scaled = mapping.apply(raw[0]);
    let mu_scaled = mapping.apply(raw[1]);
    MappedMaterial {
        lambda_scaled,
        mu_scaled,
        lambda: modulus_scale * lambda_scaled,
        mu: modulus_scale * mu_scaled,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Forward,
    Inverse(Mapping),
    Surrogate,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Forward => "forward",
            Mode::Inverse(_) => "inverse",
            Mode::Surrogate => "surrogate",
        }
    }
}

/// Known material constants; which are required depends on the mode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KnownMaterial {
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub rho: Option<f64>,
}

impl From<MaterialParams> for KnownMaterial {
    fn from(m: MaterialParams) -> Self {
        KnownMaterial {
            lambda: Some(m.lambda),
            mu: Some(m.mu),
            rho: Some(m.rho),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dimension: Dimension,
    pub mode: Mode,
    /// Multiply displacement heads by `x*`, clamping `x = 0`.
    pub hard_bc: bool,
    pub stages: Vec<Stage>,
    pub batch_size: usize,
    pub n_collocation: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub material: KnownMaterial,
    /// Snapshot interval in epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Collocation points are split into this many independent tapes.
    /// Results depend on this value but not on the thread count.
    pub chunks: usize,
    /// Worker threads for chunk evaluation (1 = sequential).
    pub threads: usize,
}

impl TrainConfig {
    pub fn new(dimension: Dimension, mode: Mode) -> Self {
        TrainConfig {
            dimension,
            mode,
            hard_bc: false,
            stages: default_stages(),
            batch_size: 142,
            n_collocation: 500,
            weights: LossWeights::unit(dimension),
            seed: 0,
            hidden: 64,
            layers: 4,
            material: KnownMaterial::default(),
            checkpoint_every: 100,
            checkpoint_path: None,
            chunks: 1,
            threads: 1,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn surrogate(&self) -> bool {
        self.mode == Mode::Surrogate
    }

    pub fn dims(&self) -> Dims {
        Dims::new(
            self.dimension.n_inputs(self.surrogate()),
            self.hidden,
            self.layers,
            self.dimension.n_fields(),
        )
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let cfg = |m: String| Err(TrainError::Config(m));
        if self.stages.is_empty() {
            return cfg("at least one learning-rate stage is required".into());
        }
        for pair in self.stages.windows(2) {
            if pair[1].lr > pair[0].lr {
                return cfg("learning rates must not increase across stages".into());
            }
        }
        if self.stages.iter().any(|s| !(s.lr > 0.0 && s.lr.is_finite())) {
            return cfg("learning rates must be positive".into());
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("n_collocation", self.n_collocation),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("chunks", self.chunks),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return cfg(format!("`{name}` must be positive"));
            }
        }
        if self.chunks > self.n_collocation {
            return cfg("more chunks than collocation points".into());
        }
        if self.weights.alpha.len() != self.dimension.n_fields() {
            return cfg(format!(
                "{} equation weights needed for {}",
                self.dimension.n_fields(),
                self.dimension
            ));
        }
        self.weights.validate()?;
        let m = &self.material;
        if m.rho.is_none() {
            return cfg("density is required".into());
        }
        match self.mode {
            Mode::Forward if m.lambda.is_none() || m.mu.is_none() => cfg("forward mode needs lambda and mu".into()),
            Mode::Surrogate if m.lambda.is_none() => cfg("surrogate mode needs lambda".into()),
            _ => Ok(()),
        }
    }

    /// Warning for inverse presets other than sigmoid with hard constraints.
    pub fn preset_warning(&self) -> Option<String> {
        match self.mode {
            Mode::Inverse(mapping) if mapping != Mapping::Sigmoid || !self.hard_bc => Some(format!(
                "unsupported inverse preset (mapping={mapping}, hard_bc={}): only the sigmoid \
                 mapping combined with hard displacement constraints is known to recover the \
                 material parameters; other combinations tend to settle in spurious minima \
                 with lambda + 2 mu near zero",
                self.hard_bc
            )),
            _ => None,
        }
    }
}

/// Everything optimized during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainablePack {
    pub net: ModifiedMlpParams,
    /// Raw `(N_lambda, N_mu)` in inverse mode.
    pub extra: Option<[f64; 2]>,
    pub mapping: Mapping,
    pub hard_bc: bool,
}

impl TrainablePack {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.net.to_flat();
        if let Some(e) = self.extra {
            v.extend(e);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), NetworkError> {
        let n = self.net.dims.param_count();
        self.net.set_flat(&flat[..n])?;
        if let Some(e) = &mut self.extra {
            e.copy_from_slice(&flat[n..n + 2]);
        }
        Ok(())
    }

    /// Recovered material in inverse mode.
    pub fn material(&self, modulus_scale: f64) -> Option<MappedMaterial> {
        self.extra.map(|raw| map_material(raw, self.mapping, modulus_scale))
    }

    /// Physical field predictions at physical `points`.
    pub fn predict(&self, scales: &ScaleSet, points: &Array2<f64>) -> Result<Array2<f64>, NetworkError> {
        let x = scales.scale_points(points);
        let mut raw = self.net.forward_batch(&x)?;
        for (mut row, xr) in raw.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))) {
            let out = apply_output_transform(row.as_slice().unwrap(), xr[0], self.hard_bc, scales.dimension);
            row.assign(&ndarray::ArrayView1::from(&out));
        }
        Ok(scales.unscale_fields(&raw))
    }
}

/// Hard Dirichlet transform: displacement heads times scaled `x*`.
pub fn apply_output_transform(raw: &[f64], x_scaled: f64, hard_bc: bool, dim: Dimension) -> Vec<f64> {
    let mut out = raw.to_vec();
    if hard_bc {
        for u in out.iter_mut().take(dim.n_displacements()) {
            *u *= x_scaled;
        }
    }
    out
}

/// One recorded gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Physical `(lambda, mu)` before the step, inverse mode only.
    pub material: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pack: TrainablePack,
    pub history: Vec<HistoryRecord>,
    /// `(epoch, lambda, mu)` after each epoch, inverse mode only.
    pub material_trajectory: Vec<(usize, f64, f64)>,
    pub recovered: Option<MaterialParams>,
    pub warnings: Vec<String>,
}

impl TrainOutcome {
    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.history {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.loss.total;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    /// Loss-history CSV.
    pub fn write_history(&self, mut w: impl Write, dim: Dimension) -> std::io::Result<()> {
        let inverse = self.history.first().is_some_and(|r| r.material.is_some());
        let mut header = vec![
            "epoch".to_string(),
            "step".into(),
            "L_data_total".into(),
            "L_eqn_total".into(),
        ];
        header.extend(dim.field_names().iter().map(|f| format!("L_data_{f}")));
        header.extend(crate::physics::residual_names(dim).iter().map(|s| s.to_string()));
        header.push("total".into());
        header.push("lr".into());
        if inverse {
            header.push("lambda".into());
            header.push("mu".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for r in &self.history {
            let mut row = vec![
                r.epoch.to_string(),
                r.step.to_string(),
                format!("{:?}", r.loss.data_total()),
                format!("{:?}", r.loss.eqn_total()),
            ];
            row.extend(r.loss.data_terms.iter().map(|x| format!("{x:?}")));
            row.extend(r.loss.eqn_terms.iter().map(|x| format!("{x:?}")));
            row.push(format!("{:?}", r.loss.total));
            row.push(format!("{:?}", r.lr));
            if let Some((l, m)) = r.material {
                row.push(format!("{l:?}"));
                row.push(format!("{m:?}"));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

const COLLOCATION_TAG: u64 = 0xC011;

/// Trains a network on `data` with residual losses at fresh Latin
/// hypercube collocation points every step.
pub fn train(config: &TrainConfig, data: &ReferenceDataset, scales: &ScaleSet) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    scales.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if data.dimension != config.dimension || scales.dimension != config.dimension {
        return Err(TrainError::Dataset(format!(
            "run is {} but data is {} and scales are {}",
            config.dimension, data.dimension, scales.dimension
        )));
    }
    if data.surrogate != config.surrogate() {
        return Err(TrainError::Dataset(if config.surrogate() {
            "surrogate mode needs a `mu` column".into()
        } else {
            "dataset carries `mu` but the mode is not surrogate".into()
        }));
    }
    if config.batch_size > data.len() {
        return Err(TrainError::Config(format!(
            "batch_size {} exceeds the {} data points",
            config.batch_size,
            data.len()
        )));
    }

    let mut warnings = Vec::new();
    if let Some(w) = config.preset_warning() {
        log::warn!("{w}");
        warnings.push(w);
    }

    let mut pack = initial_pack(config)?;

    let inputs = scales.scale_points(&data.points);
    let targets = scales.scale_fields(&data.fields);
    let bounds = collocation_bounds(data, scales);
    let problem = Problem {
        config,
        scales,
        material: material_constants(config, scales),
    };

    let mut flat = pack.to_flat();
    let mut adam = AdamState::new(flat.len(), config.stages[0].lr);
    let mut history = Vec::new();
    let mut trajectory = Vec::new();
    let mut last_good = pack.clone();
    let mut step = 0;

    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| TrainError::Config(e.to_string()))?,
        )
    } else {
        None
    };

    for epoch in 0..config.total_epochs() {
        adam.lr = lr_schedule(epoch, &config.stages)?;
        for batch in epoch_batches(data.len(), config.batch_size, config.seed, epoch as u64)? {
            let x_d = inputs.select(Axis(0), &batch);
            let y_d = targets.select(Axis(0), &batch);
            let mut rng = stream_rng(config.seed, COLLOCATION_TAG, step as u64);
            let colloc = lhs(config.n_collocation, &bounds, &mut rng)?.points;

            let material = pack.material(scales.modulus).map(|m| (m.lambda, m.mu));
            let (loss, grad) = match problem.loss_and_gradient(&pack, &x_d, &y_d, &colloc, pool.as_ref()) {
                Ok(v) => v,
                Err(TrainError::Autodiff(source)) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        step,
                        source,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    source: AutodiffError::NonFinite { op: "total loss" },
                    last_good: Box::new(last_good),
                });
            }
            adam_step(&mut adam, &mut flat, &grad)?;
            pack.set_flat(&flat)?;
            history.push(HistoryRecord {
                epoch,
                step,
                lr: adam.lr,
                loss,
                material,
            });
            step += 1;
        }
        if let Some(m) = pack.material(scales.modulus) {
            trajectory.push((epoch, m.lambda, m.mu));
        }
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            last_good = pack.clone();
            if let Some(path) = &config.checkpoint_path {
                Checkpoint::new(&pack, scales, config).save(path)?;
            }
        }
    }

    let recovered = match (pack.material(scales.modulus), config.material.rho) {
        (Some(m), Some(rho)) => Some(MaterialParams {
            lambda: m.lambda,
            mu: m.mu,
            rho,
        }),
        _ => None,
    };
    Ok(TrainOutcome {
        pack,
        history,
        material_trajectory: trajectory,
        recovered,
        warnings,
    })
}

/// Loss breakdown and flat gradient (network parameters, then raw material
/// trainables) for one step on fixed scaled data and collocation points.
pub fn loss_and_gradient(
    config: &TrainConfig,
    scales: &ScaleSet,
    pack: &TrainablePack,
    x_data: &Array2<f64>,
    y_data: &Array2<f64>,
    collocation: &Array2<f64>,
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    config.validate()?;
    let problem = Problem {
        config,
        scales,
        material: material_constants(config, scales),
    };
    problem.loss_and_gradient(pack, x_data, y_data, collocation, None)
}

/// Fresh pack for `config`, as training would start from.
pub fn initial_pack(config: &TrainConfig) -> Result<TrainablePack, TrainError> {
    let (mapping, extra) = match config.mode {
        Mode::Inverse(m) => (m, Some(inverse_init(m))),
        _ => (Mapping::Sigmoid, None),
    };
    Ok(TrainablePack {
        net: ModifiedMlpParams::init(config.dims(), config.seed)?,
        extra,
        mapping,
        hard_bc: config.hard_bc,
    })
}

/// Initial raw trainables: the center of the mapping's range.
fn inverse_init(_mapping: Mapping) -> [f64; 2] {
    [0.0, 0.0]
}

/// Scaled box `(x, y, [z], t, [mu])`; time starts at zero.
pub fn collocation_bounds(data: &ReferenceDataset, scales: &ScaleSet) -> Vec<(f64, f64)> {
    let g = &data.geometry;
    let mut b: Vec<(f64, f64)> =
        g.lo.iter()
            .zip(&g.hi)
            .map(|(&lo, &hi)| (lo / scales.length, hi / scales.length))
            .collect();
    let t_col = data.dimension.time_column();
    let t_max = data.points.column(t_col).fold(0.0_f64, |a, &b| a.max(b));
    b.push((0.0, t_max / scales.time));
    if data.surrogate {
        let mu = data.points.column(t_col + 1);
        let lo = mu.fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = mu.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        b.push((lo / scales.modulus, hi / scales.modulus));
    }
    b
}

/// Scaled known material constants (`lambda*`, `mu*`, `rho*`); entries
/// that are trained or read from inputs are `None`.
struct MaterialConstants {
    lambda: Option<f64>,
    mu: Option<f64>,
    rho: f64,
}

fn material_constants(config: &TrainConfig, s: &ScaleSet) -> MaterialConstants {
    let m = &config.material;
    let rho = m.rho.expect("validated") / s.density;
    match config.mode {
        Mode::Forward => MaterialConstants {
            lambda: m.lambda.map(|l| l / s.modulus),
            mu: m.mu.map(|u| u / s.modulus),
            rho,
        },
        Mode::Surrogate => MaterialConstants {
            lambda: m.lambda.map(|l| l / s.modulus),
            mu: None,
            rho,
        },
        Mode::Inverse(_) => MaterialConstants {
            lambda: None,
            mu: None,
            rho,
        },
    }
}

struct Problem<'a> {
    config: &'a TrainConfig,
    scales: &'a ScaleSet,
    material: MaterialConstants,
}

/// Per-chunk loss pieces: data and equation terms already weighted by the
/// chunk's share of the batch.
struct ChunkResult {
    data: Vec<f64>,
    eqn: Vec<f64>,
    grad: Vec<f64>,
}

impl Problem<'_> {
    /// Loss breakdown and flat gradient for one step.
    fn loss_and_gradient(
        &self,
        pack: &TrainablePack,
        x_d: &Array2<f64>,
        y_d: &Array2<f64>,
        colloc: &Array2<f64>,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
        let n = colloc.nrows();
        let chunks = self.config.chunks;
        let ranges: Vec<(usize, usize)> = (0..chunks).map(|c| (c * n / chunks, (c + 1) * n / chunks)).collect();
        let run = |c: usize| -> Result<ChunkResult, TrainError> {
            let (a, b) = ranges[c];
            let part = colloc.slice(ndarray::s![a..b, ..]).to_owned();
            let share = (b - a) as f64 / n as f64;
            let data = (c == 0).then_some((x_d, y_d));
            self.chunk(pack, data, &part, share)
        };
        let results: Vec<Result<ChunkResult, TrainError>> = match pool {
            Some(pool) if chunks > 1 => pool.install(|| {
                use rayon::prelude::*;
                (0..chunks).into_par_iter().map(run).collect()
            }),
            _ => (0..chunks).map(run).collect(),
        };

        // Fixed chunk order keeps the reduction deterministic.
        let mut data = Vec::new();
        let mut eqn = vec![0.0; self.config.dimension.n_fields()];
        let mut grad: Vec<f64> = Vec::new();
        for r in results {
            let r = r?;
            if !r.data.is_empty() {
                data = r.data;
            }
            for (e, x) in eqn.iter_mut().zip(&r.eqn) {
                *e += x;
            }
            if grad.is_empty() {
                grad = r.grad;
            } else {
                for (g, x) in grad.iter_mut().zip(&r.grad) {
                    *g += x;
                }
            }
        }
        let loss = total_loss(&data, &eqn, &self.config.weights)?;
        Ok((loss, grad))
    }

    /// Loss and gradient contribution of one collocation chunk (and the
    /// data batch for the first chunk).
    fn chunk(
        &self,
        pack: &TrainablePack,
        data: Option<(&Array2<f64>, &Array2<f64>)>,
        colloc: &Array2<f64>,
        share: f64,
    ) -> Result<ChunkResult, TrainError> {
        match self.config.dimension {
            Dimension::Plane => self.chunk_dim::<3>(pack, data, colloc, share),
            Dimension::Solid => self.chunk_dim::<4>(pack, data, colloc, share),
        }
    }

    fn chunk_dim<const D: usize>(
        &self,
        pack: &TrainablePack,
        data: Option<(&Array2<f64>, &Array2<f64>)>,
        colloc: &Array2<f64>,
        share: f64,
    ) -> Result<ChunkResult, TrainError> {
        let dim = self.config.dimension;
        let tape = Tape::new();
        let net = pack.net.on_tape(&tape);
        let extra = pack.extra.map(|[l, m]| (tape.scalar(l), tape.scalar(m)));

        let mut data_vars = Vec::new();
        if let Some((x, y)) = data {
            let jet = input_jet::<0>(&tape, x, [], false);
            let fields = field_jets(&net, jet, pack.hard_bc, dim.n_displacements());
            for (j, f) in fields.iter().enumerate() {
                let target = tape.constant(y.column(j).to_owned().insert_axis(Axis(1)));
                data_vars.push((f.v - target).square().mean());
            }
        }

        let mut dirs = [0usize; D];
        dirs[0] = dim.time_column();
        for (a, d) in dirs.iter_mut().skip(1).enumerate() {
            *d = a;
        }
        let jet = input_jet::<D>(&tape, colloc, dirs, true);
        let fields = field_jets(&net, jet, pack.hard_bc, dim.n_displacements());
        let fj = FieldJets {
            values: fields.iter().map(|f| f.v).collect(),
            gradient: (0..dim.n_space())
                .map(|a| fields.iter().map(|f| f.d[a + 1]).collect())
                .collect(),
            accel: fields[..dim.n_displacements()]
                .iter()
                .map(|f| f.dd.expect("second derivative tracked"))
                .collect(),
        };
        let mat = self.scaled_material(&tape, colloc, extra, pack.mapping);
        let res = residuals(&fj, &mat, self.scales, None)?;
        let eqn_vars: Vec<Var<'_>> = res.iter().map(|r| r.square().mean().scale(share)).collect();

        let total = if data_vars.is_empty() {
            let zeros = vec![tape.scalar_constant(0.0); dim.n_fields()];
            self.config.weights.combine(&zeros, &eqn_vars)
        } else {
            self.config.weights.combine(&data_vars, &eqn_vars)
        };
        let grads = tape.gradient(total)?;
        let mut grad = net.flat_gradient(&grads);
        if let Some((l, m)) = extra {
            grad.push(grads.wrt(l)[[0, 0]]);
            grad.push(grads.wrt(m)[[0, 0]]);
        }
        Ok(ChunkResult {
            data: data_vars.iter().map(Var::item).collect(),
            eqn: eqn_vars.iter().map(Var::item).collect(),
            grad,
        })
    }

    fn scaled_material<'t>(
        &self,
        tape: &'t Tape,
        colloc: &Array2<f64>,
        extra: Option<(Var<'t>, Var<'t>)>,
        mapping: Mapping,
    ) -> ScaledMaterial<Var<'t>> {
        let c = &self.material;
        let rho = tape.scalar_constant(c.rho);
        if let Some((l, m)) = extra {
            return ScaledMaterial {
                lambda: mapping.apply(l),
                mu: mapping.apply(m),
                rho,
            };
        }
        let lambda = tape.scalar_constant(c.lambda.expect("lambda known outside inverse mode"));
        let mu = match c.mu {
            Some(m) => tape.scalar_constant(m),
            None => {
                let col = self.config.dimension.time_column() + 1;
                tape.constant(colloc.column(col).to_owned().insert_axis(Axis(1)))
            }
        };
        ScaledMaterial { lambda, mu, rho }
    }
}

/// Network output split into per-field jets, with the hard constraint applied.
fn field_jets<'t, const D: usize>(
    net: &TapeNetwork<'t>,
    input: Jet<Var<'t>, D>,
    hard_bc: bool,
    n_disp: usize,
) -> Vec<Jet<Var<'t>, D>> {
    let out = net.forward(input);
    let x = input.map_linear(|s| s.column(0));
    (0..net.dims.n_out)
        .map(|j| {
            let f = out.map_linear(|s| s.column(j));
            if hard_bc && j < n_disp {
                x * f
            } else {
                f
            }
        })
        .collect()
}

/// Trained state plus what prediction needs to rescale.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dimension: Dimension,
    pub surrogate: bool,
    pub pack: TrainablePack,
    pub scales: ScaleSet,
}

const CHECKPOINT_MAGIC: &str = "elastodyn-checkpoint 1";

impl Checkpoint {
    pub fn new(pack: &TrainablePack, scales: &ScaleSet, config: &TrainConfig) -> Self {
        Checkpoint {
            dimension: config.dimension,
            surrogate: config.surrogate(),
            pack: pack.clone(),
            scales: scales.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(r)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), TrainError> {
        let s = &self.scales;
        let fields: Vec<String> = s.fields.iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "dimension {}", self.dimension)?;
        writeln!(w, "surrogate {}", self.surrogate)?;
        writeln!(w, "mapping {}", self.pack.mapping)?;
        writeln!(w, "hard_bc {}", self.pack.hard_bc)?;
        match self.pack.extra {
            Some([l, m]) => writeln!(w, "extra {l:?} {m:?}")?,
            None => writeln!(w, "extra none")?,
        }
        writeln!(w, "scale_length {:?}", s.length)?;
        writeln!(w, "scale_time {:?}", s.time)?;
        writeln!(w, "scale_modulus {:?}", s.modulus)?;
        writeln!(w, "scale_density {:?}", s.density)?;
        writeln!(w, "scale_fields {}", fields.join(" "))?;
        self.pack.net.write_to(&mut w)?;
        Ok(())
    }

    pub fn read_from(mut r: impl BufRead) -> Result<Self, TrainError> {
        let bad = |m: String| TrainError::Network(NetworkError::Format(m));
        let mut line = String::new();
        let mut next = |key: &str| -> Result<String, TrainError> {
            line.clear();
            r.read_line(&mut line)?;
            let l = line.trim_end();
            if key.is_empty() {
                return Ok(l.to_string());
            }
            l.strip_prefix(key)
                .and_then(|v| v.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}`, got `{l}`")))
        };
        if next("")? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let num = |v: String| v.trim().parse::<f64>().map_err(|e| bad(format!("{v}: {e}")));
        let dimension: Dimension = next("dimension")?.parse().map_err(bad)?;
        let surrogate = next("surrogate")?.trim() == "true";
        let mapping: Mapping = next("mapping")?.parse().map_err(bad)?;
        let hard_bc = next("hard_bc")?.trim() == "true";
        let extra = match next("extra")?.trim() {
            "none" => None,
            v => {
                let xs: Vec<f64> = v
                    .split_whitespace()
                    .map(|x| x.parse::<f64>().map_err(|e| bad(e.to_string())))
                    .collect::<Result<_, _>>()?;
                match xs[..] {
                    [l, m] => Some([l, m]),
                    _ => return Err(bad("extra needs two values".into())),
                }
            }
        };
        let length = num(next("scale_length")?)?;
        let time = num(next("scale_time")?)?;
        let modulus = num(next("scale_modulus")?)?;
        let density = num(next("scale_density")?)?;
        let fields = next("scale_fields")?
            .split_whitespace()
            .map(|x| x.parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let scales = ScaleSet {
            dimension,
            length,
            time,
            fields,
            modulus,
            density,
        };
        scales.validate()?;
        let net = ModifiedMlpParams::read_from(r)?;
        if net.dims.n_in != dimension.n_inputs(surrogate) || net.dims.n_out != dimension.n_fields() {
            return Err(bad(format!(
                "network dims {:?} do not fit a {dimension} {} run",
                net.dims,
                if surrogate { "surrogate" } else { "non-surrogate" }
            )));
        }
        Ok(Checkpoint {
            dimension,
            surrogate,
            pack: TrainablePack {
                net,
                extra,
                mapping,
                hard_bc,
            },
            scales,
        })
    }
}
