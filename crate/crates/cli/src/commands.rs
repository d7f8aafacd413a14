//! Subcommand bodies.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use elastodyn::data::{
    load_csv, manufactured, subsample_boundary, subsample_interior, write_csv, Geometry, PlaneWaveSpec, Provenance,
    ReferenceDataset, Schema, SpaceTimeGrid, WaveField,
};
use elastodyn::layout::Dimension;
use elastodyn::physics::{make_scales, MaterialParams};
use elastodyn::scenarios::field_errors;
use elastodyn::training::{train, Checkpoint, Mode, TrainError, TrainOutcome};
use elastodyn::verify::{self, Faults, Level};

use crate::config::{DataSource, ManufacturedSpec, RunConfig};
use crate::svg::{line_plot, Series};

/// Failure classes with dedicated exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or arguments (exit 2).
    Usage(String),
    /// Training produced non-finite values (exit 3).
    Diverged(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Diverged(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

pub const THREADS_ENV: &str = "ELASTODYN_THREADS";

/// Evaluation set with its file-name tag.
struct EvalSet {
    label: String,
    tag: String,
    data: ReferenceDataset,
}

struct Prepared {
    train: ReferenceDataset,
    /// Dataset whose maxima define the default scales.
    scale_source: ReferenceDataset,
    eval: Vec<EvalSet>,
    /// Material that generated manufactured data.
    truth: Option<MaterialParams>,
}

pub fn cmd_train(config_path: &Path) -> Result<()> {
    let started = Instant::now();
    let cfg = RunConfig::load(config_path).map_err(|e| Failure::Usage(format!("{}: {e}", config_path.display())))?;
    let mut tc = cfg.train.clone();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        tc.threads = v
            .parse()
            .map_err(|_| Failure::Usage(format!("{THREADS_ENV}: `{v}` is not a thread count")))?;
    }
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let prepared = prepare_data(&cfg)?;
    let mut overrides = cfg.scales.clone();
    if overrides.modulus.is_none() && tc.mode == Mode::Surrogate {
        overrides.modulus = cfg.material.lambda;
    }
    if overrides.density.is_none() {
        overrides.density = cfg.material.rho;
    }
    let scales = make_scales(&prepared.scale_source, &overrides).context("deriving scales")?;
    if tc.batch_size == 0 {
        tc.batch_size = prepared.train.len();
    }
    let ckpt_path = out.join("checkpoint.txt");
    tc.checkpoint_path = Some(ckpt_path.clone());
    log::info!(
        "training {} ({}) on {} points, {} epochs",
        tc.mode.name(),
        tc.dimension,
        prepared.train.len(),
        tc.total_epochs()
    );

    let outcome = match train(&tc, &prepared.train, &scales) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            step,
            source,
            last_good,
        }) => {
            Checkpoint {
                dimension: tc.dimension,
                surrogate: tc.surrogate(),
                pack: *last_good,
                scales: scales.clone(),
            }
            .save(&ckpt_path)?;
            return Err(Failure::Diverged(format!(
                "training diverged at epoch {epoch}, step {step} ({source}); last good state saved to {}",
                ckpt_path.display()
            ))
            .into());
        }
        Err(e @ (TrainError::Config(_) | TrainError::Dataset(_))) => return Err(Failure::Usage(e.to_string()).into()),
        Err(e) => return Err(e.into()),
    };

    Checkpoint::new(&outcome.pack, &scales, &tc).save(&ckpt_path)?;
    let mut hist = Vec::new();
    outcome.write_history(&mut hist, tc.dimension)?;
    fs::write(out.join("loss_history.csv"), hist)?;
    fs::write(out.join("loss.svg"), loss_svg(&outcome))?;
    if !outcome.material_trajectory.is_empty() {
        fs::write(out.join("material.svg"), material_svg(&outcome))?;
    }

    let mut summary = String::new();
    let _ = writeln!(summary, "mode: {} ({})", tc.mode.name(), tc.dimension);
    if let Mode::Inverse(m) = tc.mode {
        let _ = writeln!(summary, "mapping: {m}, hard_bc: {}", tc.hard_bc);
    }
    let _ = writeln!(summary, "training points: {}", prepared.train.len());
    let _ = writeln!(
        summary,
        "epochs: {}, steps: {}",
        tc.total_epochs(),
        outcome.history.len()
    );
    if let Some(last) = outcome.history.last() {
        let l = &last.loss;
        let _ = writeln!(
            summary,
            "final loss: total {:e}, data {:e}, equation {:e}",
            l.total,
            l.data_total(),
            l.eqn_total()
        );
    }

    for set in &prepared.eval {
        let pred = outcome.pack.predict(&scales, &set.data.points)?;
        let pred_ds = ReferenceDataset {
            fields: pred.clone(),
            provenance: Provenance::Imported("prediction".into()),
            ..set.data.clone()
        };
        write_csv(out.join(format!("reference_{}.csv", set.tag)), &set.data)?;
        write_csv(out.join(format!("prediction_{}.csv", set.tag)), &pred_ds)?;
        fs::write(
            out.join(format!("slice_{}.svg", set.tag)),
            slice_svg(&set.data, &pred, &set.label),
        )?;

        let e = field_errors(&pred, &set.data);
        let _ = writeln!(summary, "evaluation {} ({} points):", set.label, set.data.len());
        for (name, v) in e.names.iter().zip(&e.nrmse) {
            match v {
                Some(v) => {
                    let _ = writeln!(summary, "  nrmse {name} = {v:?}");
                }
                None => {
                    let _ = writeln!(summary, "  nrmse {name} = n/a (constant reference)");
                }
            }
        }
        let _ = writeln!(summary, "  displacement error = {:?}", e.displacement);
    }

    if let Some(r) = outcome.recovered {
        let _ = write!(summary, "recovered: lambda = {:?}, mu = {:?}", r.lambda, r.mu);
        if let Some(t) = prepared.truth {
            let _ = write!(
                summary,
                " (truth {} / {}; errors {:.3}% / {:.3}%)",
                t.lambda,
                t.mu,
                100.0 * ((r.lambda - t.lambda) / t.lambda).abs(),
                100.0 * ((r.mu - t.mu) / t.mu).abs()
            );
        }
        summary.push('\n');
    }
    for w in &outcome.warnings {
        let _ = writeln!(summary, "warning: {w}");
    }
    fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("runtime: {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn material_of(cfg: &RunConfig, mu: Option<f64>) -> Result<MaterialParams> {
    let m = &cfg.material;
    let p = MaterialParams {
        lambda: m.lambda.ok_or_else(|| anyhow!("lambda missing"))?,
        mu: mu.or(m.mu).ok_or_else(|| anyhow!("mu missing"))?,
        rho: m.rho.ok_or_else(|| anyhow!("rho missing"))?,
    };
    p.validate().map_err(|e| Failure::Usage(format!("[material]: {e}")))?;
    Ok(p)
}

fn wave_field(spec: &ManufacturedSpec, material: MaterialParams) -> Result<WaveField> {
    let mut waves = Vec::new();
    for w in &spec.waves {
        let p = PlaneWaveSpec::new(w.kind, material, w.amplitude, spec.wavenumber, w.axis, w.polarization)
            .map_err(|e| Failure::Usage(format!("[data] waves: {e}")))?;
        waves.push(p);
        if spec.standing {
            waves.push(p.reversed().with_phase(PI));
        }
    }
    Ok(WaveField::new(waves)?)
}

fn subsample(full: &ReferenceDataset, spec: &ManufacturedSpec, seed: u64) -> Result<ReferenceDataset> {
    let mut parts = Vec::new();
    if spec.boundary_fraction > 0.0 {
        parts.push(subsample_boundary(full, spec.boundary_fraction, seed)?);
    }
    if spec.interior_fraction > 0.0 {
        parts.push(subsample_interior(full, spec.interior_fraction, seed)?);
    }
    if parts.is_empty() {
        return Err(Failure::Usage("[data]: boundary_fraction and interior_fraction are both zero".into()).into());
    }
    Ok(ReferenceDataset::concat(&parts)?)
}

fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let dim = cfg.train.dimension;
    let seed = cfg.train.seed;
    match &cfg.data {
        DataSource::Csv { path, reference } => {
            let schema = Schema {
                dimension: dim,
                surrogate: cfg.train.surrogate(),
            };
            let mut train = load_csv(path, schema).with_context(|| format!("loading {}", path.display()))?;
            let m = &cfg.material;
            if let (Some(lambda), Some(mu), Some(rho)) = (m.lambda, m.mu, m.rho) {
                if !matches!(cfg.train.mode, Mode::Inverse(_)) {
                    train.material_hint = Some(MaterialParams { lambda, mu, rho });
                }
            }
            let eval_data = match reference {
                Some(r) => load_csv(r, schema).with_context(|| format!("loading {}", r.display()))?,
                None => train.clone(),
            };
            let label = if reference.is_some() {
                "reference data"
            } else {
                "training data"
            };
            Ok(Prepared {
                scale_source: train.clone(),
                train,
                eval: vec![EvalSet {
                    label: label.into(),
                    tag: "eval".into(),
                    data: eval_data,
                }],
                truth: None,
            })
        }
        DataSource::Manufactured(spec) => {
            let grid = SpaceTimeGrid::new(
                cfg.geometry.clone(),
                spec.nodes.clone(),
                SpaceTimeGrid::linspace(0.0, spec.t_end, spec.times),
            )
            .map_err(|e| Failure::Usage(format!("[data]: {e}")))?;
            let eval_grid = SpaceTimeGrid::new(
                cfg.geometry.clone(),
                spec.eval_nodes.clone(),
                SpaceTimeGrid::linspace(0.0, spec.t_end, spec.eval_times),
            )
            .map_err(|e| Failure::Usage(format!("[data]: {e}")))?;

            if cfg.train.mode == Mode::Surrogate {
                let mut fulls = Vec::new();
                let mut parts = Vec::new();
                for (i, &mu) in spec.mu_values.iter().enumerate() {
                    let field = wave_field(spec, material_of(cfg, Some(mu))?)?;
                    let full = manufactured(&field, dim, &grid)?.with_mu(mu);
                    parts.push(subsample(&full, spec, seed.wrapping_add(i as u64))?);
                    fulls.push(full);
                }
                let eval = spec
                    .eval_mu
                    .iter()
                    .map(|&mu| {
                        let field = wave_field(spec, material_of(cfg, Some(mu))?)?;
                        Ok(EvalSet {
                            label: format!("mu={mu}"),
                            tag: format!("mu{mu}"),
                            data: manufactured(&field, dim, &eval_grid)?.with_mu(mu),
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(Prepared {
                    train: ReferenceDataset::concat(&parts)?,
                    scale_source: ReferenceDataset::concat(&fulls)?,
                    eval,
                    truth: None,
                })
            } else {
                let material = material_of(cfg, None)?;
                let field = wave_field(spec, material)?;
                let full = manufactured(&field, dim, &grid)?;
                Ok(Prepared {
                    train: subsample(&full, spec, seed)?,
                    scale_source: full,
                    eval: vec![EvalSet {
                        label: "held-out grid".into(),
                        tag: "eval".into(),
                        data: manufactured(&field, dim, &eval_grid)?,
                    }],
                    truth: Some(material),
                })
            }
        }
    }
}

fn loss_svg(o: &TrainOutcome) -> String {
    let mut sums: Vec<[f64; 3]> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for r in &o.history {
        if sums.len() <= r.epoch {
            sums.resize(r.epoch + 1, [0.0; 3]);
            counts.resize(r.epoch + 1, 0);
        }
        sums[r.epoch][0] += r.loss.total;
        sums[r.epoch][1] += r.loss.data_total();
        sums[r.epoch][2] += r.loss.eqn_total();
        counts[r.epoch] += 1;
    }
    let series = |i: usize, label| Series {
        label,
        points: sums
            .iter()
            .zip(&counts)
            .enumerate()
            .filter(|(_, (_, &c))| c > 0)
            .map(|(e, (s, &c))| (e as f64, s[i] / c as f64))
            .collect(),
    };
    line_plot(
        "loss per epoch (log10)",
        "epoch",
        &[series(0, "total"), series(1, "data"), series(2, "equation")],
        true,
    )
}

fn material_svg(o: &TrainOutcome) -> String {
    let pick = |f: fn(&(usize, f64, f64)) -> f64, label| Series {
        label,
        points: o.material_trajectory.iter().map(|r| (r.0 as f64, f(r))).collect(),
    };
    line_plot(
        "recovered material",
        "epoch",
        &[pick(|r| r.1, "lambda"), pick(|r| r.2, "mu")],
        false,
    )
}

/// First displacement along x at the middle transverse node and last instant.
fn slice_svg(reference: &ReferenceDataset, pred: &ndarray::Array2<f64>, label: &str) -> String {
    let dim = reference.dimension;
    let t_col = dim.time_column();
    let pts = &reference.points;
    let t_last = pts.column(t_col).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mid: Vec<f64> = (1..dim.n_space())
        .map(|a| {
            let g = &reference.geometry;
            let target = 0.5 * (g.lo[a] + g.hi[a]);
            pts.column(a)
                .iter()
                .copied()
                .min_by(|x, y| (x - target).abs().total_cmp(&(y - target).abs()))
                .unwrap_or(target)
        })
        .collect();
    let field = (0..dim.n_displacements())
        .find(|&j| {
            let c = reference.fields.column(j);
            c.iter().any(|&v| v != c[0])
        })
        .unwrap_or(0);
    let mut rows: Vec<usize> = (0..reference.len())
        .filter(|&i| pts[[i, t_col]] == t_last && mid.iter().enumerate().all(|(a, &m)| pts[[i, a + 1]] == m))
        .collect();
    rows.sort_by(|&a, &b| pts[[a, 0]].total_cmp(&pts[[b, 0]]));
    let name = dim.field_names()[field];
    let exact = Series {
        label: "reference",
        points: rows
            .iter()
            .map(|&i| (pts[[i, 0]], reference.fields[[i, field]]))
            .collect(),
    };
    let net = Series {
        label: "prediction",
        points: rows.iter().map(|&i| (pts[[i, 0]], pred[[i, field]])).collect(),
    };
    line_plot(
        &format!("{name} along x, t = {t_last:.4e} ({label})"),
        "x [mm]",
        &[exact, net],
        false,
    )
}

/// Regular grid for prediction.
pub struct GridSpec {
    pub nodes: Vec<usize>,
    pub t_start: f64,
    pub t_end: f64,
    pub n_times: usize,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
}

pub fn cmd_predict(checkpoint: &Path, grid: &GridSpec, mu: Option<f64>, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let dim = ck.dimension;
    let usage = |m: String| anyhow::Error::from(Failure::Usage(m));
    match (ck.surrogate, mu) {
        (true, None) => return Err(usage("surrogate checkpoint: `--mu` is required".into())),
        (false, Some(_)) => return Err(usage("`--mu` given but the checkpoint is not a surrogate".into())),
        _ => {}
    }
    let geometry = match (&grid.lo, &grid.hi) {
        (None, None) => Geometry::beam(dim),
        (Some(lo), Some(hi)) => Geometry::new(lo.clone(), hi.clone()).map_err(|e| usage(e.to_string()))?,
        _ => return Err(usage("`--lo` and `--hi` go together".into())),
    };
    if geometry.n_axes() != dim.n_space() || grid.nodes.len() != dim.n_space() {
        return Err(usage(format!(
            "checkpoint is {dim}: the grid needs {} spatial axes",
            dim.n_space()
        )));
    }
    let g = SpaceTimeGrid::new(
        geometry,
        grid.nodes.clone(),
        SpaceTimeGrid::linspace(grid.t_start, grid.t_end, grid.n_times),
    )
    .map_err(|e| usage(e.to_string()))?;
    let mut ds = grid_dataset(&g, dim)?;
    if let Some(mu) = mu {
        ds = ds.with_mu(mu);
    }
    ds.fields = ck.pack.predict(&ck.scales, &ds.points)?;
    ds.provenance = Provenance::Imported(checkpoint.display().to_string());
    write_csv(out, &ds).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} rows to {}", ds.len(), out.display());
    Ok(())
}

/// Dataset skeleton on a grid; fields are filled in by the caller.
fn grid_dataset(g: &SpaceTimeGrid, dim: Dimension) -> Result<ReferenceDataset> {
    let points = g.points();
    let tol = 1e-9 * g.geometry.extent();
    let boundary = points
        .rows()
        .into_iter()
        .map(|r| {
            g.geometry
                .on_boundary(&r.as_slice().expect("contiguous")[..dim.n_space()], tol)
        })
        .collect();
    Ok(ReferenceDataset {
        dimension: dim,
        surrogate: false,
        fields: ndarray::Array2::zeros((points.nrows(), dim.n_fields())),
        points,
        geometry: g.geometry.clone(),
        boundary,
        provenance: Provenance::Manufactured,
        material_hint: None,
    })
}

/// Runs the checks, one line each; the error lists the failures.
pub fn cmd_verify(level: Level, faults: Faults) -> Result<()> {
    let checks = verify::run(level, faults);
    let mut failed = Vec::new();
    for c in &checks {
        println!(
            "{} {:<22} {:>8.2}s  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        );
        if !c.passed {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(())
    } else {
        bail!("failed checks: {}", failed.join(", "))
    }
}
