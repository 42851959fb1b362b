//! Spatial priors for the latent fields, behind a common trait and looked up
//! by name at run time.
//!
//! Each prior knows its precision matrix as a function of the
//! hyperparameters, the (generalised) log-determinant of that precision, its
//! hyperparameter blocks and their prior density on the sampled scale.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{nested_dissection_order, GridSpec, NeighborGraph, NeighborOrder};
use crate::model::Hyperpriors;
use crate::precision::{
    build_car_structure, build_spde_structure, generalized_logdet_icar, spde_scale,
    PrecisionKind, PrecisionModel,
};
use crate::sparse::{CholeskyFactor, SparseSym, SymbolicCholesky};

/// Hyperparameters of one taxon's field, on the scale the sampler moves in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub log_sigma: f64,
    pub log_rho: f64,
    pub mu: f64,
}

impl HyperParams {
    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn sigma2(&self) -> f64 {
        (2.0 * self.log_sigma).exp()
    }

    pub fn rho(&self) -> f64 {
        self.log_rho.exp()
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            log_sigma: 0.0,
            log_rho: 10f64.ln(),
            mu: 0.0,
        }
    }
}

/// A group of hyperparameter coordinates proposed together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HyperBlock {
    LogSigma,
    Mu,
    LogSigmaLogRho,
}

impl HyperBlock {
    pub fn dim(self) -> usize {
        match self {
            HyperBlock::LogSigma | HyperBlock::Mu => 1,
            HyperBlock::LogSigmaLogRho => 2,
        }
    }

    pub fn get(self, h: &HyperParams) -> [f64; 2] {
        match self {
            HyperBlock::LogSigma => [h.log_sigma, 0.0],
            HyperBlock::Mu => [h.mu, 0.0],
            HyperBlock::LogSigmaLogRho => [h.log_sigma, h.log_rho],
        }
    }

    pub fn set(self, h: &mut HyperParams, v: [f64; 2]) {
        match self {
            HyperBlock::LogSigma => h.log_sigma = v[0],
            HyperBlock::Mu => h.mu = v[0],
            HyperBlock::LogSigmaLogRho => {
                h.log_sigma = v[0];
                h.log_rho = v[1];
            }
        }
    }
}

/// Precision-dependent quantities evaluated at one hyperparameter value.
#[derive(Debug, Clone)]
pub struct PrecisionEval {
    /// `Q_p`.
    pub precision: SparseSym,
    /// `log |Q_p|`, generalised for intrinsic priors, up to a constant.
    pub log_det: f64,
    /// `Q_p 1`.
    pub row_sums: Vec<f64>,
    /// `1ᵀ Q_p 1`.
    pub total: f64,
}

pub trait SpatialPrior: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn kind(&self) -> PrecisionKind;

    fn n_cells(&self) -> usize;

    fn graph(&self) -> &Arc<NeighborGraph>;

    /// Blocks updated by joint hyperparameter/field proposals, in sweep order.
    fn blocks(&self) -> &[HyperBlock];

    /// Whether the field has a free mean `μ` (otherwise it is fixed at 0).
    fn has_mean(&self) -> bool {
        self.blocks().contains(&HyperBlock::Mu)
    }

    /// Whether the prior density is unchanged by adding one constant to every
    /// cell, which leaves the common level of all taxa unidentified.
    fn shift_invariant(&self) -> bool {
        false
    }

    /// Log prior density of the sampled coordinates including the Jacobian
    /// of the log transforms; `−∞` outside the support.
    fn log_prior(&self, h: &HyperParams, bounds: &Hyperpriors) -> f64;

    /// Precision, its log-determinant and the row sums needed for the mean term.
    fn evaluate(&self, h: &HyperParams) -> Result<PrecisionEval>;

    /// Symbolic factorization shared by every matrix `diag(a) + Q_p`.
    fn symbolic(&self) -> &Arc<SymbolicCholesky>;

    fn precision_model(&self, h: &HyperParams) -> PrecisionModel {
        PrecisionModel {
            kind: self.kind(),
            graph: self.graph().clone(),
            sigma2: h.sigma2(),
            rho: h.rho(),
            mu: if self.has_mean() { h.mu } else { 0.0 },
        }
    }
}

fn log_sigma_prior(h: &HyperParams, bounds: &Hyperpriors) -> f64 {
    // σ ~ U(0, sigma_upper); density in log σ is σ
    if h.sigma() < bounds.sigma_upper && h.log_sigma.is_finite() {
        h.log_sigma
    } else {
        f64::NEG_INFINITY
    }
}

/// Intrinsic CAR prior over cardinal neighbours.
#[derive(Debug)]
pub struct CarPrior {
    graph: Arc<NeighborGraph>,
    structure: SparseSym,
    symbolic: Arc<SymbolicCholesky>,
}

impl CarPrior {
    pub fn new(grid: &GridSpec) -> Result<Self> {
        let graph = Arc::new(NeighborGraph::build(grid, NeighborOrder::Cardinal));
        if !graph.is_connected() {
            return Err(Error::invalid("CAR prior needs a connected grid"));
        }
        let structure = build_car_structure(&graph)?;
        let order = nested_dissection_order(grid, 1);
        let symbolic = Arc::new(SymbolicCholesky::analyze(&structure, Some(&order))?);
        Ok(CarPrior {
            graph,
            structure,
            symbolic,
        })
    }
}

impl SpatialPrior for CarPrior {
    fn name(&self) -> &'static str {
        "car"
    }

    fn shift_invariant(&self) -> bool {
        true
    }

    fn kind(&self) -> PrecisionKind {
        PrecisionKind::Car
    }

    fn n_cells(&self) -> usize {
        self.graph.n_cells()
    }

    fn graph(&self) -> &Arc<NeighborGraph> {
        &self.graph
    }

    fn blocks(&self) -> &[HyperBlock] {
        &[HyperBlock::LogSigma]
    }

    fn log_prior(&self, h: &HyperParams, bounds: &Hyperpriors) -> f64 {
        log_sigma_prior(h, bounds)
    }

    fn evaluate(&self, h: &HyperParams) -> Result<PrecisionEval> {
        let sigma2 = h.sigma2();
        let m = self.n_cells();
        Ok(PrecisionEval {
            precision: self.structure.scaled(1.0 / sigma2),
            log_det: generalized_logdet_icar(sigma2, m)?,
            row_sums: vec![0.0; m],
            total: 0.0,
        })
    }

    fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }
}

/// Lattice approximation to a Matérn (ν = 1) field with mean μ, marginal
/// scale σ and range ρ.
#[derive(Debug)]
pub struct SpdePrior {
    graph: Arc<NeighborGraph>,
    symbolic: Arc<SymbolicCholesky>,
}

impl SpdePrior {
    pub fn new(grid: &GridSpec) -> Result<Self> {
        let graph = Arc::new(NeighborGraph::build(grid, NeighborOrder::Extended));
        let pattern = build_spde_structure(&graph, 1.0)?;
        let order = nested_dissection_order(grid, 2);
        let symbolic = Arc::new(SymbolicCholesky::analyze(&pattern, Some(&order))?);
        Ok(SpdePrior { graph, symbolic })
    }
}

impl SpatialPrior for SpdePrior {
    fn name(&self) -> &'static str {
        "spde"
    }

    fn kind(&self) -> PrecisionKind {
        PrecisionKind::Spde
    }

    fn n_cells(&self) -> usize {
        self.graph.n_cells()
    }

    fn graph(&self) -> &Arc<NeighborGraph> {
        &self.graph
    }

    fn blocks(&self) -> &[HyperBlock] {
        &[HyperBlock::Mu, HyperBlock::LogSigmaLogRho]
    }

    fn log_prior(&self, h: &HyperParams, bounds: &Hyperpriors) -> f64 {
        let rho = h.rho();
        if h.mu.abs() >= bounds.mu_bound || rho <= bounds.rho_lower || rho >= bounds.rho_upper {
            return f64::NEG_INFINITY;
        }
        log_sigma_prior(h, bounds) + h.log_rho
    }

    fn evaluate(&self, h: &HyperParams) -> Result<PrecisionEval> {
        let (sigma2, rho) = (h.sigma2(), h.rho());
        let structure = build_spde_structure(&self.graph, rho)?;
        let scale = spde_scale(sigma2, rho);
        let factor = CholeskyFactor::factorize(self.symbolic.clone(), &structure)?;
        let m = self.n_cells();
        let log_det = m as f64 * scale.ln() + factor.logdet();
        let precision = structure.scaled(scale);
        let row_sums = precision.row_sums();
        let total = row_sums.iter().sum();
        Ok(PrecisionEval {
            precision,
            log_det,
            row_sums,
            total,
        })
    }

    fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }
}

/// Exchangeable cells, `α ~ N(0, σ² I)`. Has no spatial smoothing; it is the
/// only prior that is proper on a single cell.
#[derive(Debug)]
pub struct IndependentPrior {
    graph: Arc<NeighborGraph>,
    symbolic: Arc<SymbolicCholesky>,
}

impl IndependentPrior {
    pub fn new(grid: &GridSpec) -> Result<Self> {
        let graph = Arc::new(NeighborGraph::build(grid, NeighborOrder::Cardinal));
        let symbolic = Arc::new(SymbolicCholesky::analyze(
            &SparseSym::identity(grid.n_cells()),
            None,
        )?);
        Ok(IndependentPrior { graph, symbolic })
    }
}

impl SpatialPrior for IndependentPrior {
    fn name(&self) -> &'static str {
        "iid"
    }

    fn kind(&self) -> PrecisionKind {
        PrecisionKind::Independent
    }

    fn n_cells(&self) -> usize {
        self.graph.n_cells()
    }

    fn graph(&self) -> &Arc<NeighborGraph> {
        &self.graph
    }

    fn blocks(&self) -> &[HyperBlock] {
        &[HyperBlock::LogSigma]
    }

    fn log_prior(&self, h: &HyperParams, bounds: &Hyperpriors) -> f64 {
        log_sigma_prior(h, bounds)
    }

    fn evaluate(&self, h: &HyperParams) -> Result<PrecisionEval> {
        let sigma2 = h.sigma2();
        let m = self.n_cells();
        Ok(PrecisionEval {
            precision: SparseSym::identity(m).scaled(1.0 / sigma2),
            log_det: m as f64 * (1.0 / sigma2).ln(),
            row_sums: vec![0.0; m],
            total: 0.0,
        })
    }

    fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }
}

pub type PriorFactory = fn(&GridSpec) -> Result<Box<dyn SpatialPrior>>;

/// Name → constructor table for spatial priors.
#[derive(Clone)]
pub struct PriorRegistry {
    factories: BTreeMap<String, PriorFactory>,
}

impl fmt::Debug for PriorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for PriorRegistry {
    fn default() -> Self {
        let mut r = PriorRegistry::empty();
        r.register("car", |g| Ok(Box::new(CarPrior::new(g)?)));
        r.register("spde", |g| Ok(Box::new(SpdePrior::new(g)?)));
        r.register("iid", |g| Ok(Box::new(IndependentPrior::new(g)?)));
        r
    }
}

impl PriorRegistry {
    pub fn empty() -> Self {
        PriorRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// Registers (or replaces) a prior under `name`.
    pub fn register(&mut self, name: &str, factory: PriorFactory) {
        self.factories.insert(name.to_ascii_lowercase(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(&name.to_ascii_lowercase())
    }

    pub fn create(&self, name: &str, grid: &GridSpec) -> Result<Box<dyn SpatialPrior>> {
        let factory = self.factories.get(&name.to_ascii_lowercase()).ok_or_else(|| {
            Error::Config(format!(
                "unknown model {name:?}; available: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(grid)
    }
}
