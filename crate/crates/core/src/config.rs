//! Run configuration: flat `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may appear
//! once per file; `--set key=value` overrides are applied afterwards, left to
//! right. Relative paths are resolved against the config file's directory.
//! [`RunConfig::to_text`] writes every key, so a resolved config alone
//! reproduces a run.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::model::Hyperpriors;
use crate::prior::{HyperParams, PriorRegistry};
use crate::sampler::SamplerConfig;

/// How held-out data are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoldoutKind {
    /// All trees of a random fraction of the cells inside the region.
    FullCell,
    /// A random fraction of the gridded trees.
    PerTree,
}

/// Construction of the prediction intervals used for coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalMethod {
    /// Quantiles of binomial draws at each retained θ.
    Binomial,
    /// Quantiles of θ alone, without sampling noise.
    Theta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub model: String,
    pub n_taxa: usize,
    /// One value per taxon; a single value applies to all.
    pub sigma: Vec<f64>,
    pub rho: Vec<f64>,
    pub mu: Vec<f64>,
    pub trees_per_cell: u32,
    /// Fraction of cells that receive data.
    pub data_fraction: f64,
    /// Side length (in cells) of square township blocks; 0 disables them.
    pub township_size: usize,
    /// Fraction of blocks whose trees are reported at township level.
    pub township_fraction: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            model: "car".into(),
            n_taxa: 3,
            sigma: vec![1.0],
            rho: vec![5.0],
            mu: vec![0.0],
            trees_per_cell: 100,
            data_fraction: 1.0,
            township_size: 0,
            township_fraction: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutConfig {
    pub kind: HoldoutKind,
    pub fraction: f64,
    /// Half-open data-cell rectangle `[x0, x1) × [y0, y1)`; `None` is the
    /// whole grid.
    pub region: Option<[usize; 4]>,
    pub seed: u64,
    pub models: Vec<String>,
    pub interval: IntervalMethod,
    pub level: f64,
    pub min_trees: u32,
    pub floor: f64,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        HoldoutConfig {
            kind: HoldoutKind::FullCell,
            fraction: 0.95,
            region: None,
            seed: 1,
            models: vec!["car".into(), "spde".into()],
            interval: IntervalMethod::Binomial,
            level: 0.95,
            min_trees: 50,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub sampler: SamplerConfig,
    pub taxa: Option<Vec<String>>,
    pub counts: Option<PathBuf>,
    pub township_trees: Option<PathBuf>,
    pub township_overlaps: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub progress_every: u64,
    pub simulation: SimulationConfig,
    pub holdout: HoldoutConfig,
    base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: GridSpec::new(10, 10, 0).expect("valid default grid"),
            sampler: SamplerConfig::default(),
            taxa: None,
            counts: None,
            township_trees: None,
            township_overlaps: None,
            checkpoint_every: 0,
            progress_every: 1000,
            simulation: SimulationConfig::default(),
            holdout: HoldoutConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Parses config text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = RunConfig {
            base_dir: base_dir.to_path_buf(),
            ..Default::default()
        };
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    fn path(&self, v: &str) -> Option<PathBuf> {
        if v.is_empty() {
            return None;
        }
        let p = PathBuf::from(v);
        Some(if p.is_absolute() { p } else { self.base_dir.join(p) })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "nx" => self.grid.nx = parse_num(key, v)?,
            "ny" => self.grid.ny = parse_num(key, v)?,
            "buffer" => self.grid.buffer = parse_num(key, v)?,
            "masked_rows_south" => self.grid.masked_rows_south = parse_num(key, v)?,
            "masked_rows_north" => self.grid.masked_rows_north = parse_num(key, v)?,
            "cell_size" => self.grid.cell_size = parse_num(key, v)?,
            "origin_x" => self.grid.origin_x = parse_num(key, v)?,
            "origin_y" => self.grid.origin_y = parse_num(key, v)?,
            "model" => self.sampler.model = v.to_ascii_lowercase(),
            "n_iter" => self.sampler.n_iter = parse_num(key, v)?,
            "burn_in" => self.sampler.burn_in = parse_num(key, v)?,
            "n_retained" => self.sampler.n_retained = parse_num(key, v)?,
            "seed" => self.sampler.seed = parse_num(key, v)?,
            "adapt_interval" => self.sampler.adapt_interval = parse_num(key, v)?,
            "target_accept_1d" => self.sampler.target_accept_1d = parse_num(key, v)?,
            "target_accept_2d" => self.sampler.target_accept_2d = parse_num(key, v)?,
            "initial_proposal_sd" => self.sampler.initial_proposal_sd = parse_num(key, v)?,
            "t_mc" => self.sampler.t_mc = parse_num(key, v)?,
            "extra_alpha_draw" => self.sampler.extra_alpha_draw = parse_bool(key, v)?,
            "keep_alpha" => self.sampler.keep_alpha = parse_bool(key, v)?,
            "init_sigma" => self.sampler.init.log_sigma = parse_num::<f64>(key, v)?.ln(),
            "init_rho" => self.sampler.init.log_rho = parse_num::<f64>(key, v)?.ln(),
            // log-scale forms, used when writing so values survive exactly
            "init_log_sigma" => self.sampler.init.log_sigma = parse_num(key, v)?,
            "init_log_rho" => self.sampler.init.log_rho = parse_num(key, v)?,
            "init_mu" => self.sampler.init.mu = parse_num(key, v)?,
            "sigma_upper" => self.sampler.hyperpriors.sigma_upper = parse_num(key, v)?,
            "mu_bound" => self.sampler.hyperpriors.mu_bound = parse_num(key, v)?,
            "rho_lower" => self.sampler.hyperpriors.rho_lower = parse_num(key, v)?,
            "rho_upper" => self.sampler.hyperpriors.rho_upper = parse_num(key, v)?,
            "taxa" => {
                self.taxa = (!v.is_empty()).then(|| v.split(',').map(|t| t.trim().to_string()).collect())
            }
            "counts" => self.counts = self.path(v),
            "township_trees" => self.township_trees = self.path(v),
            "township_overlaps" => self.township_overlaps = self.path(v),
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "progress_every" => self.progress_every = parse_num(key, v)?,
            "sim_model" => self.simulation.model = v.to_ascii_lowercase(),
            "sim_taxa" => self.simulation.n_taxa = parse_num(key, v)?,
            "sim_sigma" => self.simulation.sigma = parse_list(key, v)?,
            "sim_rho" => self.simulation.rho = parse_list(key, v)?,
            "sim_mu" => self.simulation.mu = parse_list(key, v)?,
            "sim_trees_per_cell" => self.simulation.trees_per_cell = parse_num(key, v)?,
            "sim_data_fraction" => self.simulation.data_fraction = parse_num(key, v)?,
            "sim_township_size" => self.simulation.township_size = parse_num(key, v)?,
            "sim_township_fraction" => self.simulation.township_fraction = parse_num(key, v)?,
            "sim_seed" => self.simulation.seed = parse_num(key, v)?,
            "holdout_kind" => {
                self.holdout.kind = match v {
                    "full-cell" => HoldoutKind::FullCell,
                    "per-tree" => HoldoutKind::PerTree,
                    _ => return Err(Error::Config(format!("{key}: expected full-cell or per-tree, got {v:?}"))),
                }
            }
            "holdout_fraction" => self.holdout.fraction = parse_num(key, v)?,
            "holdout_region" => {
                self.holdout.region = if v.is_empty() {
                    None
                } else {
                    let r: Vec<usize> = parse_list(key, v)?;
                    let r: [usize; 4] = r
                        .try_into()
                        .map_err(|_| Error::Config(format!("{key}: expected x0,y0,x1,y1")))?;
                    Some(r)
                }
            }
            "holdout_seed" => self.holdout.seed = parse_num(key, v)?,
            "compare_models" => self.holdout.models = v.split(',').map(|m| m.trim().to_ascii_lowercase()).collect(),
            "interval_method" => {
                self.holdout.interval = match v {
                    "binomial" => IntervalMethod::Binomial,
                    "theta" => IntervalMethod::Theta,
                    _ => return Err(Error::Config(format!("{key}: expected binomial or theta, got {v:?}"))),
                }
            }
            "interval_level" => self.holdout.level = parse_num(key, v)?,
            "min_trees" => self.holdout.min_trees = parse_num(key, v)?,
            "log_density_floor" => self.holdout.floor = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.sampler;
        let h = &s.hyperpriors;
        let sim = &self.simulation;
        let ho = &self.holdout;
        vec![
            ("nx", self.grid.nx.to_string()),
            ("ny", self.grid.ny.to_string()),
            ("buffer", self.grid.buffer.to_string()),
            ("masked_rows_south", self.grid.masked_rows_south.to_string()),
            ("masked_rows_north", self.grid.masked_rows_north.to_string()),
            ("cell_size", self.grid.cell_size.to_string()),
            ("origin_x", self.grid.origin_x.to_string()),
            ("origin_y", self.grid.origin_y.to_string()),
            ("model", s.model.clone()),
            ("n_iter", s.n_iter.to_string()),
            ("burn_in", s.burn_in.to_string()),
            ("n_retained", s.n_retained.to_string()),
            ("seed", s.seed.to_string()),
            ("adapt_interval", s.adapt_interval.to_string()),
            ("target_accept_1d", s.target_accept_1d.to_string()),
            ("target_accept_2d", s.target_accept_2d.to_string()),
            ("initial_proposal_sd", s.initial_proposal_sd.to_string()),
            ("t_mc", s.t_mc.to_string()),
            ("extra_alpha_draw", s.extra_alpha_draw.to_string()),
            ("keep_alpha", s.keep_alpha.to_string()),
            ("init_log_sigma", s.init.log_sigma.to_string()),
            ("init_log_rho", s.init.log_rho.to_string()),
            ("init_mu", s.init.mu.to_string()),
            ("sigma_upper", h.sigma_upper.to_string()),
            ("mu_bound", h.mu_bound.to_string()),
            ("rho_lower", h.rho_lower.to_string()),
            ("rho_upper", h.rho_upper.to_string()),
            ("taxa", self.taxa.as_ref().map(|t| t.join(",")).unwrap_or_default()),
            ("counts", opt_path(&self.counts)),
            ("township_trees", opt_path(&self.township_trees)),
            ("township_overlaps", opt_path(&self.township_overlaps)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("progress_every", self.progress_every.to_string()),
            ("sim_model", sim.model.clone()),
            ("sim_taxa", sim.n_taxa.to_string()),
            ("sim_sigma", join(&sim.sigma)),
            ("sim_rho", join(&sim.rho)),
            ("sim_mu", join(&sim.mu)),
            ("sim_trees_per_cell", sim.trees_per_cell.to_string()),
            ("sim_data_fraction", sim.data_fraction.to_string()),
            ("sim_township_size", sim.township_size.to_string()),
            ("sim_township_fraction", sim.township_fraction.to_string()),
            ("sim_seed", sim.seed.to_string()),
            (
                "holdout_kind",
                match ho.kind {
                    HoldoutKind::FullCell => "full-cell",
                    HoldoutKind::PerTree => "per-tree",
                }
                .into(),
            ),
            ("holdout_fraction", ho.fraction.to_string()),
            ("holdout_region", ho.region.map(|r| join(&r)).unwrap_or_default()),
            ("holdout_seed", ho.seed.to_string()),
            ("compare_models", ho.models.join(",")),
            (
                "interval_method",
                match ho.interval {
                    IntervalMethod::Binomial => "binomial",
                    IntervalMethod::Theta => "theta",
                }
                .into(),
            ),
            ("interval_level", ho.level.to_string()),
            ("min_trees", ho.min_trees.to_string()),
            ("log_density_floor", ho.floor.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Checks value ranges and model names; with `check_files`, also that
    /// every referenced input exists.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        GridSpec::new(self.grid.nx, self.grid.ny, self.grid.buffer).map_err(|e| Error::Config(strip(e)))?;
        if !(self.grid.cell_size > 0.0) {
            return fail("cell_size must be positive".into());
        }
        self.sampler.validate()?;
        let registry = PriorRegistry::default();
        for m in std::iter::once(&self.sampler.model)
            .chain(&self.holdout.models)
            .chain(std::iter::once(&self.simulation.model))
        {
            if !registry.contains(m) {
                return fail(format!(
                    "unknown model {m:?}; available: {}",
                    registry.names().collect::<Vec<_>>().join(", ")
                ));
            }
        }
        if self.township_trees.is_some() != self.township_overlaps.is_some() {
            return fail("township_trees and township_overlaps must be given together".into());
        }
        if check_files {
            for p in [&self.counts, &self.township_trees, &self.township_overlaps]
                .into_iter()
                .flatten()
            {
                if !p.is_file() {
                    return fail(format!("input file {} does not exist", p.display()));
                }
            }
        }
        let sim = &self.simulation;
        if sim.n_taxa == 0 {
            return fail("sim_taxa must be at least 1".into());
        }
        for (name, v) in [("sim_sigma", &sim.sigma), ("sim_rho", &sim.rho), ("sim_mu", &sim.mu)] {
            if v.len() != 1 && v.len() != sim.n_taxa {
                return fail(format!("{name} needs 1 or sim_taxa values"));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return fail(format!("{name} must be finite"));
            }
        }
        if sim.sigma.iter().chain(&sim.rho).any(|&x| x <= 0.0) {
            return fail("sim_sigma and sim_rho must be positive".into());
        }
        for (name, f) in [
            ("sim_data_fraction", sim.data_fraction),
            ("sim_township_fraction", sim.township_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return fail(format!("{name} must lie in [0, 1]"));
            }
        }
        let ho = &self.holdout;
        if !(ho.fraction > 0.0 && ho.fraction <= 1.0) {
            return fail("holdout_fraction must lie in (0, 1]".into());
        }
        if !(ho.level > 0.0 && ho.level < 1.0) {
            return fail("interval_level must lie in (0, 1)".into());
        }
        if !(ho.floor > 0.0 && ho.floor < 1.0) {
            return fail("log_density_floor must lie in (0, 1)".into());
        }
        if ho.models.is_empty() {
            return fail("compare_models is empty".into());
        }
        if let Some([x0, y0, x1, y1]) = ho.region {
            if x0 >= x1 || y0 >= y1 || x1 > self.grid.nx || y1 > self.grid.ny {
                return fail(format!("holdout_region {x0},{y0},{x1},{y1} is empty or outside the grid"));
            }
        }
        Ok(())
    }

    pub fn hyperpriors(&self) -> &Hyperpriors {
        &self.sampler.hyperpriors
    }

    /// Per-taxon generating hyperparameters of the simulation.
    pub fn simulation_params(&self) -> Vec<HyperParams> {
        let sim = &self.simulation;
        let pick = |v: &[f64], q: usize| if v.len() == 1 { v[0] } else { v[q] };
        (0..sim.n_taxa)
            .map(|q| HyperParams {
                log_sigma: pick(&sim.sigma, q).ln(),
                log_rho: pick(&sim.rho, q).ln(),
                mu: pick(&sim.mu, q),
            })
            .collect()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}
