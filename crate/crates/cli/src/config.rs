//! INI-style run configuration.
//!
//! ```text
//! [run]
//! mode = forward        # forward | inverse | surrogate
//! seed = 0
//! output_dir = out
//! ```
//!
//! Comments start with `#`. Keys outside the known set are errors,
//! as are duplicates. Relative paths resolve against the config file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use elastodyn::data::{Geometry, WaveKind};
use elastodyn::layout::Dimension;
use elastodyn::physics::{LossWeights, ScaleOverrides};
use elastodyn::scenarios::three_stages;
use elastodyn::training::{KnownMaterial, Mapping, Mode, Stage, TrainConfig};

/// Parse or validation failure; `line` is 1-based when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(line: Option<usize>, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        line,
        message: message.into(),
    })
}

const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["mode", "dimension", "seed", "output_dir", "threads"]),
    ("geometry", &["lo", "hi"]),
    ("material", &["lambda", "mu", "rho"]),
    (
        "scales",
        &[
            "length", "time", "modulus", "density", "u_x", "u_y", "u_z", "s_xx", "s_yy", "s_zz", "s_xy", "s_yz", "s_xz",
        ],
    ),
    ("network", &["hidden", "layers"]),
    (
        "training",
        &[
            "epochs",
            "stages",
            "batch_size",
            "n_collocation",
            "data_weight",
            "eqn_weight",
            "alpha",
            "mapping",
            "hard_bc",
            "checkpoint_every",
            "chunks",
        ],
    ),
    (
        "data",
        &[
            "source",
            "path",
            "reference",
            "waves",
            "wavenumber",
            "standing",
            "nodes",
            "times",
            "t_end",
            "boundary_fraction",
            "interior_fraction",
            "eval_nodes",
            "eval_times",
            "mu_values",
            "eval_mu",
        ],
    ),
];

/// Raw `section.key -> (value, line)` table.
#[derive(Debug, Default)]
struct Table {
    entries: BTreeMap<(String, String), (String, usize)>,
}

impl Table {
    fn parse(text: &str) -> Result<Table, ConfigError> {
        let mut t = Table::default();
        let mut section: Option<&'static (&'static str, &'static [&'static str])> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return err(Some(line), format!("malformed section header `{content}`"));
                };
                let name = name.trim();
                section = Some(SCHEMA.iter().find(|(s, _)| *s == name).ok_or_else(|| ConfigError {
                    line: Some(line),
                    message: format!("unknown section `[{name}]`"),
                })?);
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return err(Some(line), format!("expected `key = value`, got `{content}`"));
            };
            let key = key.trim();
            let Some((sec, keys)) = section else {
                return err(Some(line), format!("key `{key}` outside any section"));
            };
            if !keys.contains(&key) {
                return err(Some(line), format!("unknown key `{key}` in [{sec}]"));
            }
            let slot = (sec.to_string(), key.to_string());
            if let Some((_, first)) = t.entries.get(&slot) {
                return err(Some(line), format!("duplicate key `{key}` (first set on line {first})"));
            }
            t.entries.insert(slot, (value.trim().to_string(), line));
        }
        Ok(t)
    }

    fn raw(&self, sec: &str, key: &str) -> Option<(&str, usize)> {
        self.entries
            .get(&(sec.to_string(), key.to_string()))
            .map(|(v, l)| (v.as_str(), *l))
    }

    fn get<T: FromStr>(&self, sec: &str, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.raw(sec, key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|e| ConfigError {
                line: Some(line),
                message: format!("[{sec}] {key}: cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn require<T: FromStr>(&self, sec: &str, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.get(sec, key)?.ok_or_else(|| ConfigError {
            line: None,
            message: format!("missing mandatory key `{key}` in [{sec}]"),
        })
    }

    /// Whitespace- or comma-separated list.
    fn list<T: FromStr>(&self, sec: &str, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some((v, line)) = self.raw(sec, key) else {
            return Ok(None);
        };
        v.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>().map_err(|e| ConfigError {
                    line: Some(line),
                    message: format!("[{sec}] {key}: cannot parse `{s}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn line(&self, sec: &str, key: &str) -> Option<usize> {
        self.raw(sec, key).map(|(_, l)| l)
    }
}

/// One plane wave of a manufactured dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveDesc {
    pub kind: WaveKind,
    pub axis: usize,
    pub polarization: usize,
    pub amplitude: f64,
}

fn parse_axis(s: &str) -> Result<usize, String> {
    match s {
        "x" => Ok(0),
        "y" => Ok(1),
        "z" => Ok(2),
        o => Err(format!("unknown axis `{o}`")),
    }
}

/// `P x 1.0; S x y 0.5` — kind, propagation axis, [polarization], amplitude.
fn parse_waves(v: &str) -> Result<Vec<WaveDesc>, String> {
    v.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|w| {
            let parts: Vec<&str> = w.split_whitespace().collect();
            let amp = |s: &str| s.parse::<f64>().map_err(|e| format!("amplitude `{s}`: {e}"));
            match parts[..] {
                ["P" | "p", axis, a] => {
                    let axis = parse_axis(axis)?;
                    Ok(WaveDesc {
                        kind: WaveKind::P,
                        axis,
                        polarization: axis,
                        amplitude: amp(a)?,
                    })
                }
                ["S" | "s", axis, pol, a] => Ok(WaveDesc {
                    kind: WaveKind::S,
                    axis: parse_axis(axis)?,
                    polarization: parse_axis(pol)?,
                    amplitude: amp(a)?,
                }),
                _ => Err(format!(
                    "bad wave `{w}` (expected `P <axis> <amp>` or `S <axis> <pol> <amp>`)"
                )),
            }
        })
        .collect()
}

/// Manufactured plane-wave data on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ManufacturedSpec {
    pub waves: Vec<WaveDesc>,
    pub wavenumber: f64,
    /// Adds a reversed copy with phase pi of every wave, pinning u = 0 at x = 0.
    pub standing: bool,
    pub nodes: Vec<usize>,
    pub times: usize,
    pub t_end: f64,
    pub boundary_fraction: f64,
    pub interior_fraction: f64,
    pub eval_nodes: Vec<usize>,
    pub eval_times: usize,
    /// Surrogate only: one dataset per value.
    pub mu_values: Vec<f64>,
    pub eval_mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Manufactured(ManufacturedSpec),
    Csv { path: PathBuf, reference: Option<PathBuf> },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub geometry: Geometry,
    /// Material as written in the config (for manufactured data this
    /// generates the fields).
    pub material: KnownMaterial,
    pub scales: ScaleOverrides,
    pub data: DataSource,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
        let t = Table::parse(text)?;
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let mode_name: String = t.require("run", "mode")?;
        let mode_line = t.line("run", "mode");
        let dimension: Dimension = t
            .get::<String>("run", "dimension")?
            .map(|d| d.parse().or_else(|e: String| err(t.line("run", "dimension"), e)))
            .transpose()?
            .unwrap_or(Dimension::Plane);
        let seed: u64 = t.require("run", "seed")?;
        let output_dir = resolve(t.require("run", "output_dir")?);
        let threads: usize = t.get("run", "threads")?.unwrap_or(1);

        let mapping: Option<Mapping> = t
            .get::<String>("training", "mapping")?
            .map(|m| m.parse().or_else(|e: String| err(t.line("training", "mapping"), e)))
            .transpose()?;
        let mode = match mode_name.as_str() {
            "forward" => Mode::Forward,
            "inverse" => Mode::Inverse(mapping.unwrap_or(Mapping::Sigmoid)),
            "surrogate" => Mode::Surrogate,
            o => return err(mode_line, format!("unknown mode `{o}` (forward, inverse or surrogate)")),
        };
        if mapping.is_some() && !matches!(mode, Mode::Inverse(_)) {
            return err(t.line("training", "mapping"), "`mapping` applies to inverse mode only");
        }

        let material = KnownMaterial {
            lambda: t.get("material", "lambda")?,
            mu: t.get("material", "mu")?,
            rho: t.get("material", "rho")?,
        };

        let mut config = TrainConfig::new(dimension, mode);
        config.seed = seed;
        config.threads = threads;
        config.hard_bc = t
            .get("training", "hard_bc")?
            .unwrap_or(matches!(mode, Mode::Inverse(_)));
        config.material = match mode {
            Mode::Forward => material,
            Mode::Inverse(_) => KnownMaterial {
                rho: material.rho,
                ..KnownMaterial::default()
            },
            Mode::Surrogate => KnownMaterial { mu: None, ..material },
        };
        config.hidden = t.get("network", "hidden")?.unwrap_or(64);
        config.layers = t.get("network", "layers")?.unwrap_or(4);
        config.batch_size = t.get("training", "batch_size")?.unwrap_or(0);
        config.n_collocation = t.get("training", "n_collocation")?.unwrap_or(500);
        config.checkpoint_every = t.get("training", "checkpoint_every")?.unwrap_or(100);
        config.chunks = t.get("training", "chunks")?.unwrap_or(1);

        let epochs: Option<usize> = t.get("training", "epochs")?;
        let stages: Option<Vec<String>> = t.list("training", "stages")?;
        config.stages = match (epochs, stages) {
            (Some(_), Some(_)) => {
                return err(
                    t.line("training", "stages"),
                    "give either `epochs` or `stages`, not both",
                )
            }
            (Some(e), None) => three_stages(e),
            (None, Some(list)) => parse_stages(&list, t.line("training", "stages"))?,
            (None, None) => return err(None, "missing mandatory key `epochs` (or `stages`) in [training]"),
        };

        let mut weights = LossWeights::unit(dimension);
        if let Some(a) = t.list::<f64>("training", "alpha")? {
            if a.len() != dimension.n_fields() {
                return err(
                    t.line("training", "alpha"),
                    format!("`alpha` needs {} values for {dimension}", dimension.n_fields()),
                );
            }
            weights.alpha = a;
        }
        if let Some(w) = t.get("training", "data_weight")? {
            weights.data_weight = w;
        }
        if let Some(w) = t.get("training", "eqn_weight")? {
            weights.eqn_weight = w;
        }
        config.weights = weights;

        let geometry = match (t.list::<f64>("geometry", "lo")?, t.list::<f64>("geometry", "hi")?) {
            (None, None) => Geometry::beam(dimension),
            (Some(lo), Some(hi)) => {
                let g = Geometry::new(lo, hi).or_else(|e| err(t.line("geometry", "lo"), e.to_string()))?;
                if g.n_axes() != dimension.n_space() {
                    return err(
                        t.line("geometry", "lo"),
                        format!("{dimension} needs {} axes", dimension.n_space()),
                    );
                }
                g
            }
            _ => return err(None, "[geometry] needs both `lo` and `hi`"),
        };

        let mut scales = ScaleOverrides {
            length: t.get("scales", "length")?,
            time: t.get("scales", "time")?,
            modulus: t.get("scales", "modulus")?,
            density: t.get("scales", "density")?,
            ..ScaleOverrides::default()
        };
        for &f in dimension.field_names() {
            if let Some(v) = t.get::<f64>("scales", f)? {
                scales.fields.insert(f.to_string(), v);
            }
        }
        for f in ["u_z", "s_zz", "s_yz", "s_xz"] {
            if dimension == Dimension::Plane && t.raw("scales", f).is_some() {
                return err(t.line("scales", f), format!("`{f}` has no meaning in 2d"));
            }
        }

        let source: String = t.require("data", "source")?;
        let data = match source.as_str() {
            "csv" => DataSource::Csv {
                path: resolve(t.require("data", "path")?),
                reference: t.get::<String>("data", "reference")?.map(resolve),
            },
            "manufactured" => DataSource::Manufactured(manufactured_spec(&t, dimension, &geometry, mode)?),
            o => {
                return err(
                    t.line("data", "source"),
                    format!("unknown source `{o}` (csv or manufactured)"),
                )
            }
        };

        // Mode requirements that the library would otherwise report without a key name.
        let need = |sec: &str, key: &str, ok: bool, why: &str| {
            if ok {
                Ok(())
            } else {
                err(None, format!("missing mandatory key `{key}` in [{sec}] ({why})"))
            }
        };
        need("material", "rho", material.rho.is_some(), "density is always required")?;
        match mode {
            Mode::Forward => {
                need("material", "lambda", material.lambda.is_some(), "forward mode")?;
                need("material", "mu", material.mu.is_some(), "forward mode")?;
            }
            Mode::Surrogate => need("material", "lambda", material.lambda.is_some(), "surrogate mode")?,
            Mode::Inverse(_) => need(
                "scales",
                "modulus",
                scales.modulus.is_some(),
                "inverse mode maps raw trainables through it",
            )?,
        }
        if let DataSource::Manufactured(_) = &data {
            if !matches!(mode, Mode::Surrogate) {
                need("material", "lambda", material.lambda.is_some(), "manufactured data")?;
                need("material", "mu", material.mu.is_some(), "manufactured data")?;
            }
        }

        Ok(RunConfig {
            train: config,
            output_dir,
            geometry,
            material,
            scales,
            data,
        })
    }
}

fn parse_stages(list: &[String], line: Option<usize>) -> Result<Vec<Stage>, ConfigError> {
    list.iter()
        .map(|s| {
            let (e, lr) = s.split_once(':').ok_or_else(|| ConfigError {
                line,
                message: format!("stage `{s}` is not `epochs:lr`"),
            })?;
            let epochs = e.parse().map_err(|_| ConfigError {
                line,
                message: format!("stage epochs `{e}`"),
            })?;
            let lr = lr.parse().map_err(|_| ConfigError {
                line,
                message: format!("stage learning rate `{lr}`"),
            })?;
            Ok(Stage { epochs, lr })
        })
        .collect()
}

fn manufactured_spec(
    t: &Table,
    dim: Dimension,
    geometry: &Geometry,
    mode: Mode,
) -> Result<ManufacturedSpec, ConfigError> {
    let waves_raw: String = t.require("data", "waves")?;
    let waves = parse_waves(&waves_raw).or_else(|e| err(t.line("data", "waves"), e))?;
    if waves.is_empty() {
        return err(t.line("data", "waves"), "no waves given");
    }
    let n = dim.n_space();
    if waves.iter().any(|w| w.axis >= n || w.polarization >= n) {
        return err(t.line("data", "waves"), format!("wave axes must lie within {dim}"));
    }
    let nodes_of = |key: &str, default: Vec<usize>| -> Result<Vec<usize>, ConfigError> {
        let v = t.list::<usize>("data", key)?.unwrap_or(default);
        if v.len() != n {
            return err(t.line("data", key), format!("`{key}` needs {n} counts"));
        }
        Ok(v)
    };
    let default_nodes = match dim {
        Dimension::Plane => vec![41, 9],
        Dimension::Solid => vec![21, 5, 5],
    };
    let default_eval = match dim {
        Dimension::Plane => vec![51, 11],
        Dimension::Solid => vec![51, 11, 11],
    };
    let mu_values = t.list::<f64>("data", "mu_values")?.unwrap_or_default();
    if mode == Mode::Surrogate && mu_values.is_empty() {
        return err(None, "missing mandatory key `mu_values` in [data] (surrogate mode)");
    }
    if mode != Mode::Surrogate && !mu_values.is_empty() {
        return err(
            t.line("data", "mu_values"),
            "`mu_values` applies to surrogate mode only",
        );
    }
    let eval_mu = t.list::<f64>("data", "eval_mu")?.unwrap_or_else(|| mu_values.clone());
    Ok(ManufacturedSpec {
        waves,
        wavenumber: t
            .get("data", "wavenumber")?
            .unwrap_or(2.0 * std::f64::consts::PI / (geometry.hi[0] - geometry.lo[0])),
        standing: t.get("data", "standing")?.unwrap_or(false),
        nodes: nodes_of("nodes", default_nodes)?,
        times: t.get("data", "times")?.unwrap_or(26),
        t_end: t.require("data", "t_end")?,
        boundary_fraction: t.get("data", "boundary_fraction")?.unwrap_or(1.0),
        interior_fraction: t.get("data", "interior_fraction")?.unwrap_or(0.0),
        eval_nodes: nodes_of("eval_nodes", default_eval)?,
        eval_times: t.get("data", "eval_times")?.unwrap_or(50),
        mu_values,
        eval_mu,
    })
}
