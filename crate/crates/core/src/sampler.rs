//! MCMC for the spatial multinomial-probit model.
//!
//! One sweep:
//!
//! 1. latent `W` for every tree from its truncated-normal full conditional
//!    (observed taxon first, then the others against the fresh value);
//! 2. township tree memberships from `ψ_ti · L_tji`;
//! 3. per-cell tree counts `A` and per-taxon `W` sums;
//! 4. per taxon and per hyperparameter block, a joint proposal of the block
//!    and the latent field `α_p` (accepted on the `α`-marginalised density),
//!    followed by one Gibbs draw of `α_p`;
//! 5. at retained iterations, Monte Carlo estimates of `θ`.
//!
//! Randomness comes from counter-based streams (see [`crate::rng`]), so a
//! chain is reproducible at any thread count and resumable from a
//! checkpoint holding only the state and the iteration number.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{debug, info};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::*;
use crate::error::{Error, Result};
use crate::estimator::{self, effective_sample_size, PosteriorSamples, DEFAULT_T_MC};
use crate::grid::GridSpec;
use crate::model::{argmax, Dataset, Hyperpriors};
use crate::normal;
use crate::prior::{HyperBlock, HyperParams, PrecisionEval, PriorRegistry, SpatialPrior};
use crate::rng::{self, Phase};
use crate::sparse::CholeskyFactor;

/// Trees per parallel work unit in the latent and membership updates.
const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Name of the spatial prior in the [`PriorRegistry`].
    pub model: String,
    pub n_iter: usize,
    pub burn_in: usize,
    /// Number of retained draws `K`, evenly spaced over `(burn_in, n_iter]`.
    pub n_retained: usize,
    pub seed: u64,
    pub adapt_interval: usize,
    pub target_accept_1d: f64,
    pub target_accept_2d: f64,
    /// Initial random-walk standard deviation of every block coordinate.
    pub initial_proposal_sd: f64,
    pub hyperpriors: Hyperpriors,
    /// Monte Carlo draws per cell when estimating θ.
    pub t_mc: u32,
    /// Follow the joint updates with an unconditional Gibbs draw of α.
    pub extra_alpha_draw: bool,
    /// Also keep the α draws at retained iterations.
    pub keep_alpha: bool,
    pub init: HyperParams,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            model: "car".into(),
            n_iter: 150_000,
            burn_in: 25_000,
            n_retained: 250,
            seed: 1,
            adapt_interval: 50,
            target_accept_1d: 0.44,
            target_accept_2d: 0.234,
            initial_proposal_sd: 0.1,
            hyperpriors: Hyperpriors::default(),
            t_mc: DEFAULT_T_MC,
            extra_alpha_draw: true,
            keep_alpha: false,
            init: HyperParams::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.burn_in >= self.n_iter {
            return fail(format!(
                "burn_in ({}) must be below n_iter ({})",
                self.burn_in, self.n_iter
            ));
        }
        let post = self.n_iter - self.burn_in;
        if self.n_retained == 0 || !post.is_multiple_of(self.n_retained) {
            return fail(format!(
                "n_retained ({}) must divide the {post} post-burn-in iterations",
                self.n_retained
            ));
        }
        if self.adapt_interval == 0 {
            return fail("adapt_interval must be positive".into());
        }
        for t in [self.target_accept_1d, self.target_accept_2d] {
            if !(t > 0.0 && t < 1.0) {
                return fail(format!("target acceptance {t} outside (0, 1)"));
            }
        }
        if !(self.initial_proposal_sd > 0.0) {
            return fail("initial_proposal_sd must be positive".into());
        }
        if self.t_mc == 0 {
            return fail("t_mc must be at least 1".into());
        }
        self.hyperpriors.validate()
    }

    /// 1-based iteration numbers at which draws are retained.
    pub fn retained_iterations(&self) -> Vec<usize> {
        let thin = (self.n_iter - self.burn_in) / self.n_retained;
        (1..=self.n_retained).map(|j| self.burn_in + j * thin).collect()
    }

    fn is_retained(&self, iteration: usize) -> bool {
        let thin = (self.n_iter - self.burn_in) / self.n_retained;
        iteration > self.burn_in && (iteration - self.burn_in).is_multiple_of(thin)
    }
}

/// Robbins–Monro adapted random-walk proposal for one hyperparameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveProposal {
    pub dim: usize,
    pub log_scale: f64,
    /// Shape of the proposal; the covariance is `exp(2·log_scale)·cov`.
    pub cov: [[f64; 2]; 2],
    pub target: f64,
    pub batches: u64,
    batch_accepted: u64,
    batch_proposed: u64,
    batch_points: Vec<[f64; 2]>,
    pub accepted: u64,
    pub proposed: u64,
    pub accepted_post: u64,
    pub proposed_post: u64,
}

impl AdaptiveProposal {
    pub fn new(dim: usize, sd: f64, target: f64) -> Self {
        AdaptiveProposal {
            dim,
            log_scale: sd.ln(),
            cov: [[1.0, 0.0], [0.0, 1.0]],
            target,
            batches: 0,
            batch_accepted: 0,
            batch_proposed: 0,
            batch_points: Vec::new(),
            accepted: 0,
            proposed: 0,
            accepted_post: 0,
            proposed_post: 0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn propose<R: Rng + ?Sized>(&self, x: [f64; 2], rng: &mut R) -> [f64; 2] {
        let s = self.scale();
        let z0: f64 = rng.sample(StandardNormal);
        if self.dim == 1 {
            return [x[0] + s * z0 * self.cov[0][0].sqrt(), x[1]];
        }
        let z1: f64 = rng.sample(StandardNormal);
        let l00 = self.cov[0][0].sqrt();
        let l10 = self.cov[1][0] / l00;
        let l11 = (self.cov[1][1] - l10 * l10).max(0.0).sqrt();
        [x[0] + s * l00 * z0, x[1] + s * (l10 * z0 + l11 * z1)]
    }

    /// Records the outcome of one proposal and the block value after it.
    pub fn record(&mut self, accepted: bool, value: [f64; 2], post_burn_in: bool) {
        self.proposed += 1;
        self.batch_proposed += 1;
        if accepted {
            self.accepted += 1;
            self.batch_accepted += 1;
        }
        if post_burn_in {
            self.proposed_post += 1;
            self.accepted_post += u64::from(accepted);
        }
        if self.dim == 2 {
            self.batch_points.push(value);
        }
    }

    /// Closes the current batch; with `adapt`, moves the log-scale toward the
    /// target acceptance rate with step `batch^(−1/2)` and, for 2-D blocks,
    /// blends the batch covariance into the proposal shape.
    pub fn end_batch(&mut self, adapt: bool) {
        if adapt && self.batch_proposed > 0 {
            self.batches += 1;
            let gamma = (self.batches as f64).powf(-0.5);
            let rate = self.batch_accepted as f64 / self.batch_proposed as f64;
            self.log_scale += gamma * (rate - self.target);
            if self.dim == 2 && self.batch_accepted >= 3 {
                let n = self.batch_points.len() as f64;
                let mean = self
                    .batch_points
                    .iter()
                    .fold([0.0; 2], |m, p| [m[0] + p[0] / n, m[1] + p[1] / n]);
                let mut s = [[0.0; 2]; 2];
                for p in &self.batch_points {
                    let d = [p[0] - mean[0], p[1] - mean[1]];
                    for a in 0..2 {
                        for b in 0..2 {
                            s[a][b] += d[a] * d[b] / (n - 1.0);
                        }
                    }
                }
                for a in 0..2 {
                    for b in 0..2 {
                        self.cov[a][b] = (1.0 - gamma) * self.cov[a][b] + gamma * s[a][b];
                    }
                }
                // keep the shape well conditioned and of unit determinant scale
                let tr = self.cov[0][0] + self.cov[1][1];
                for a in 0..2 {
                    self.cov[a][a] += 1e-6 * tr.max(1e-12);
                }
                let det = self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[1][0];
                if det > 0.0 && det.is_finite() {
                    let norm = det.sqrt();
                    self.log_scale += 0.5 * norm.ln();
                    for row in &mut self.cov {
                        for v in row.iter_mut() {
                            *v /= norm;
                        }
                    }
                } else {
                    self.cov = [[1.0, 0.0], [0.0, 1.0]];
                }
            }
        }
        self.batch_accepted = 0;
        self.batch_proposed = 0;
        self.batch_points.clear();
    }
}

/// Per-cell tree counts and per-taxon `W` sums under the current memberships.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// Diagonal of `A`.
    pub counts: Vec<f64>,
    /// `A w̄_p` for each taxon, i.e. the per-cell sums of `W_p`.
    pub sum_w: Vec<Vec<f64>>,
}

impl SufficientStats {
    /// Per-cell means `w̄_p` (0 where a cell has no trees).
    pub fn wbar(&self, p: usize) -> Vec<f64> {
        self.sum_w[p]
            .iter()
            .zip(&self.counts)
            .map(|(s, &a)| if a > 0.0 { s / a } else { 0.0 })
            .collect()
    }
}

/// Everything that changes during a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// Completed sweeps.
    pub iteration: u64,
    /// `[taxon][model cell]`.
    pub alpha: Vec<Vec<f64>>,
    pub hyper: Vec<HyperParams>,
    /// `[tree][taxon]`, flattened.
    pub w: Vec<f64>,
    /// Support index of each township tree within its township.
    pub membership: Vec<u32>,
    /// `[taxon][block]`.
    pub proposals: Vec<Vec<AdaptiveProposal>>,
    /// Post-burn-in membership tallies, `[township][support index]`.
    pub membership_counts: Vec<Vec<u64>>,
    pub retained_theta: Vec<f64>,
    pub retained_alpha: Vec<f64>,
    pub retained_hyper: Vec<HyperParams>,
}

#[derive(Debug, Clone)]
struct TownshipSupport {
    cells: Vec<usize>,
    data_cells: Vec<usize>,
    log_psi: Vec<f64>,
}

/// Precision, factorization of `A + Q_p` and its log-determinant at the
/// current hyperparameters.
#[derive(Debug, Clone)]
struct Evaluated {
    eval: Arc<PrecisionEval>,
    factor: Arc<CholeskyFactor>,
    key: (u64, u64, u64),
}

impl Evaluated {
    fn mean_term(&self, sum_w: &[f64], mu: f64) -> Vec<f64> {
        if mu == 0.0 {
            return sum_w.to_vec();
        }
        sum_w
            .iter()
            .zip(&self.eval.row_sums)
            .map(|(s, r)| s + mu * r)
            .collect()
    }

    fn marginal(&self, sum_w: &[f64], mu: f64) -> f64 {
        let b = self.mean_term(sum_w, mu);
        0.5 * self.eval.log_det - 0.5 * self.factor.logdet() + 0.5 * self.factor.inv_quad_form(&b)
            - 0.5 * mu * mu * self.eval.total
    }
}

#[derive(Debug, Default, Clone)]
struct TaxonCache {
    current: Option<Evaluated>,
}

fn hyper_key(h: &HyperParams, a_version: u64) -> (u64, u64, u64) {
    (a_version, h.log_sigma.to_bits(), h.log_rho.to_bits())
}

fn evaluate(
    prior: &dyn SpatialPrior,
    h: &HyperParams,
    counts: &[f64],
    a_version: u64,
) -> Result<Evaluated> {
    let eval = prior.evaluate(h)?;
    let s = eval.precision.plus_diagonal(counts);
    let factor = CholeskyFactor::factorize(prior.symbolic().clone(), &s).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, context } => Error::NotPositiveDefinite {
            pivot,
            context: format!(
                "A + Q_p under the {} prior is singular ({context}); an intrinsic prior needs at least one cell with data",
                prior.name()
            ),
        },
        other => other,
    })?;
    Ok(Evaluated {
        eval: Arc::new(eval),
        factor: Arc::new(factor),
        key: hyper_key(h, a_version),
    })
}

/// Removes the common level of every field and latent utility. Under a
/// shift-invariant prior the posterior is flat along that direction and
/// every update is equivariant to it, so this only fixes a representative.
fn recentre(state: &mut ChainState) {
    let n: usize = state.alpha.iter().map(Vec::len).sum();
    let level = state.alpha.iter().flatten().sum::<f64>() / n as f64;
    if level == 0.0 {
        return;
    }
    for v in state.alpha.iter_mut().flatten().chain(state.w.iter_mut()) {
        *v -= level;
    }
}

/// Draws `α_p ~ N((A+Q_p)⁻¹ b, (A+Q_p)⁻¹)` with `b = A w̄_p + Q_p μ 1`.
pub fn gibbs_alpha<R: Rng + ?Sized>(
    prior: &dyn SpatialPrior,
    h: &HyperParams,
    counts: &[f64],
    sum_w: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let ev = evaluate(prior, h, counts, 0)?;
    let mu = if prior.has_mean() { h.mu } else { 0.0 };
    let b = ev.mean_term(sum_w, mu);
    Ok(ev.factor.sample_gaussian(&b, rng).0)
}

/// Log density of the taxon's `W` values with `α_p` integrated out, up to an
/// additive constant that does not depend on the hyperparameters.
pub fn marginal_logdensity_w(
    prior: &dyn SpatialPrior,
    h: &HyperParams,
    counts: &[f64],
    sum_w: &[f64],
) -> Result<f64> {
    let ev = evaluate(prior, h, counts, 0)?;
    let mu = if prior.has_mean() { h.mu } else { 0.0 };
    Ok(ev.marginal(sum_w, mu))
}

/// Redraws one tree's latent vector given its cell's α values. The observed
/// taxon's value is drawn above the largest other value, then every other
/// value below the fresh observed one.
pub fn update_tree_latent<R: Rng + ?Sized>(w: &mut [f64], taxon: usize, alpha: &[f64], rng: &mut R) {
    let p = w.len();
    let lower = w
        .iter()
        .enumerate()
        .filter(|&(q, _)| q != taxon)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    w[taxon] = normal::sample_lower_truncated(rng, alpha[taxon], lower);
    let top = w[taxon];
    for q in 0..p {
        if q != taxon {
            w[q] = normal::sample_upper_truncated(rng, alpha[q], top);
        }
    }
}

/// Membership probabilities of a township tree over its support cells:
/// `∝ ψ_i · exp(−½ Σ_p (W_p − α_p(i))²)`.
pub fn membership_probabilities(
    w: &[f64],
    support: &[usize],
    log_psi: &[f64],
    alpha: &[Vec<f64>],
) -> Option<Vec<f64>> {
    let logw: Vec<f64> = support
        .iter()
        .zip(log_psi)
        .map(|(&cell, &lp)| {
            lp - 0.5
                * w.iter()
                    .zip(alpha)
                    .map(|(wp, a)| (wp - a[cell]).powi(2))
                    .sum::<f64>()
        })
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut probs: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    probs.iter_mut().for_each(|v| *v /= total);
    Some(probs)
}

fn sample_discrete<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Summary of one hyperparameter block's proposals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub block: HyperBlock,
    pub acceptance_rate: f64,
    pub acceptance_rate_post_burn_in: f64,
    pub final_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub model: String,
    pub iterations: u64,
    /// `[taxon][block]`.
    pub blocks: Vec<Vec<BlockDiagnostics>>,
    pub theta_ess_min: Option<f64>,
    pub theta_ess_median: Option<f64>,
    pub log_sigma_ess: Vec<Option<f64>>,
    /// Post-burn-in membership frequencies per township as
    /// `(data cell, frequency)`.
    pub membership_frequencies: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub samples: PosteriorSamples,
    /// Retained α draws over data cells, `[sample][data cell][taxon]`.
    pub alpha_samples: Option<Vec<f64>>,
    pub retained_hyper: Vec<HyperParams>,
    pub diagnostics: ChainDiagnostics,
}

/// Periodic side outputs of a run.
#[derive(Default)]
pub struct RunOptions<'a> {
    pub checkpoint: Option<(PathBuf, u64)>,
    pub progress: Option<(&'a mut dyn Write, u64)>,
}

/// A configured chain over one dataset.
pub struct Sampler {
    grid: GridSpec,
    config: SamplerConfig,
    prior: Box<dyn SpatialPrior>,
    dataset: Dataset,
    n_taxa: usize,
    /// Taxon of every tree: gridded trees first, then township trees.
    taxon: Vec<u16>,
    /// Model cell of each gridded tree.
    fixed_cell: Vec<u32>,
    /// Township of each township tree.
    owner: Vec<u32>,
    supports: Vec<TownshipSupport>,
    data_cells: Vec<usize>,
}

impl Sampler {
    pub fn new(dataset: &Dataset, grid: &GridSpec, config: &SamplerConfig) -> Result<Self> {
        Self::with_registry(dataset, grid, config, &PriorRegistry::default())
    }

    pub fn with_registry(
        dataset: &Dataset,
        grid: &GridSpec,
        config: &SamplerConfig,
        registry: &PriorRegistry,
    ) -> Result<Self> {
        config.validate()?;
        dataset.validate(grid.n_data_cells())?;
        let prior = registry.create(&config.model, grid)?;
        let n_taxa = dataset.n_taxa();
        if n_taxa > u16::MAX as usize {
            return Err(Error::invalid("too many taxa"));
        }
        let mut taxon = Vec::new();
        let mut fixed_cell = Vec::new();
        for (cell, y) in &dataset.counts.cells {
            let model_cell = grid.data_to_model(*cell) as u32;
            for (q, &count) in y.iter().enumerate() {
                for _ in 0..count {
                    taxon.push(q as u16);
                    fixed_cell.push(model_cell);
                }
            }
        }
        let mut owner = Vec::new();
        let mut supports = Vec::new();
        for (t, ts) in dataset.townships.iter().enumerate() {
            supports.push(TownshipSupport {
                cells: ts.overlap.entries.iter().map(|e| grid.data_to_model(e.0)).collect(),
                data_cells: ts.overlap.entries.iter().map(|e| e.0).collect(),
                log_psi: ts.overlap.entries.iter().map(|e| e.1.ln()).collect(),
            });
            for &q in &ts.trees {
                taxon.push(q as u16);
                owner.push(t as u32);
            }
        }
        Ok(Sampler {
            grid: grid.clone(),
            config: config.clone(),
            prior,
            dataset: dataset.clone(),
            n_taxa,
            taxon,
            fixed_cell,
            owner,
            supports,
            data_cells: grid.data_cells().collect(),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn prior(&self) -> &dyn SpatialPrior {
        self.prior.as_ref()
    }

    pub fn n_trees(&self) -> usize {
        self.taxon.len()
    }

    fn n_fixed(&self) -> usize {
        self.fixed_cell.len()
    }

    fn cell_of(&self, tree: usize, membership: &[u32]) -> usize {
        if tree < self.n_fixed() {
            self.fixed_cell[tree] as usize
        } else {
            let t = tree - self.n_fixed();
            self.supports[self.owner[t] as usize].cells[membership[t] as usize]
        }
    }

    /// Starting state: α = 0, σ = 1, ρ = 10, μ = 0 (or the configured
    /// `init`), memberships from the overlap weights and one latent draw.
    pub fn initial_state(&self) -> Result<ChainState> {
        let p = self.n_taxa;
        let m = self.grid.n_cells();
        let seed = self.config.seed;
        let mut r = rng::stream(seed, 0, Phase::Init, 0);
        let membership: Vec<u32> = self
            .owner
            .iter()
            .map(|&t| {
                let s = &self.supports[t as usize];
                let probs: Vec<f64> = s.log_psi.iter().map(|l| l.exp()).collect();
                sample_discrete(&probs, &mut r) as u32
            })
            .collect();
        let mut w = vec![-1.0; self.n_trees() * p];
        for (row, &q) in w.chunks_mut(p).zip(&self.taxon) {
            row[q as usize] = 0.0;
        }
        let init = self.config.init;
        let blocks = self.prior.blocks();
        let proposals = (0..p)
            .map(|_| {
                blocks
                    .iter()
                    .map(|b| {
                        let target = if b.dim() == 1 {
                            self.config.target_accept_1d
                        } else {
                            self.config.target_accept_2d
                        };
                        AdaptiveProposal::new(b.dim(), self.config.initial_proposal_sd, target)
                    })
                    .collect()
            })
            .collect();
        let mut state = ChainState {
            iteration: 0,
            alpha: vec![vec![0.0; m]; p],
            hyper: vec![init; p],
            w,
            membership,
            proposals,
            membership_counts: self.supports.iter().map(|s| vec![0; s.cells.len()]).collect(),
            retained_theta: Vec::new(),
            retained_alpha: Vec::new(),
            retained_hyper: Vec::new(),
        };
        self.update_latent(&mut state, 0, Phase::Init);
        Ok(state)
    }

    fn update_latent(&self, state: &mut ChainState, iteration: u64, phase: Phase) {
        let p = self.n_taxa;
        let seed = self.config.seed;
        let alpha = &state.alpha;
        let membership = &state.membership;
        state
            .w
            .par_chunks_mut(CHUNK * p)
            .enumerate()
            .for_each(|(chunk, rows)| {
                let mut r = rng::stream(seed, iteration, phase, 1 + chunk as u64);
                let mut a = vec![0.0; p];
                for (k, row) in rows.chunks_mut(p).enumerate() {
                    let tree = chunk * CHUNK + k;
                    let cell = self.cell_of(tree, membership);
                    for (q, av) in a.iter_mut().enumerate() {
                        *av = alpha[q][cell];
                    }
                    update_tree_latent(row, self.taxon[tree] as usize, &a, &mut r);
                }
            });
    }

    fn update_memberships(&self, state: &mut ChainState, iteration: u64) -> Result<bool> {
        if self.owner.is_empty() {
            return Ok(false);
        }
        let p = self.n_taxa;
        let seed = self.config.seed;
        let n_fixed = self.n_fixed();
        let alpha = &state.alpha;
        let w = &state.w;
        let results: Vec<Result<(bool, Vec<u32>)>> = state
            .membership
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(chunk, old)| {
                let mut r = rng::stream(seed, iteration, Phase::Membership, chunk as u64);
                let mut changed = false;
                let mut out = Vec::with_capacity(old.len());
                for (k, &prev) in old.iter().enumerate() {
                    let t = chunk * CHUNK + k;
                    let tree = n_fixed + t;
                    let support = &self.supports[self.owner[t] as usize];
                    let next = if support.cells.len() == 1 {
                        0
                    } else {
                        let probs = membership_probabilities(
                            &w[tree * p..(tree + 1) * p],
                            &support.cells,
                            &support.log_psi,
                            alpha,
                        )
                        .ok_or_else(|| {
                            Error::Numerical(format!(
                                "membership weights degenerate for tree {k} of township {}",
                                self.dataset.townships[self.owner[t] as usize].id()
                            ))
                        })?;
                        sample_discrete(&probs, &mut r) as u32
                    };
                    changed |= next != prev;
                    out.push(next);
                }
                Ok((changed, out))
            })
            .collect();
        let mut changed = false;
        let mut idx = 0;
        for res in results {
            let (c, vals) = res?;
            changed |= c;
            state.membership[idx..idx + vals.len()].copy_from_slice(&vals);
            idx += vals.len();
        }
        Ok(changed)
    }

    /// `A` and the per-taxon `W` sums under the current memberships.
    pub fn sufficient_stats(&self, state: &ChainState) -> SufficientStats {
        let m = self.grid.n_cells();
        let p = self.n_taxa;
        let cells: Vec<usize> = (0..self.n_trees())
            .map(|j| self.cell_of(j, &state.membership))
            .collect();
        let mut counts = vec![0.0; m];
        for &c in &cells {
            counts[c] += 1.0;
        }
        let sum_w = (0..p)
            .into_par_iter()
            .map(|q| {
                let mut s = vec![0.0; m];
                for (j, &c) in cells.iter().enumerate() {
                    s[c] += state.w[j * p + q];
                }
                s
            })
            .collect();
        SufficientStats { counts, sum_w }
    }

    /// Whether every tree's latent argmax equals its observed taxon.
    pub fn latent_consistent(&self, state: &ChainState) -> bool {
        let p = self.n_taxa;
        state
            .w
            .chunks(p)
            .zip(&self.taxon)
            .all(|(row, &q)| argmax(row) == q as usize)
    }

    #[allow(clippy::too_many_arguments)]
    fn update_taxon(
        &self,
        taxon: usize,
        iteration: u64,
        alpha: &mut [f64],
        hyper: &mut HyperParams,
        proposals: &mut [AdaptiveProposal],
        cache: &mut TaxonCache,
        stats: &SufficientStats,
        a_version: u64,
    ) -> Result<()> {
        let prior = self.prior.as_ref();
        let bounds = &self.config.hyperpriors;
        let mut r = rng::stream(self.config.seed, iteration, Phase::Hyper, taxon as u64);
        let sum_w = &stats.sum_w[taxon];
        let post = iteration as usize > self.config.burn_in;
        let has_mean = prior.has_mean();

        let mut current = match cache.current.take() {
            Some(ev) if ev.key == hyper_key(hyper, a_version) => ev,
            _ => evaluate(prior, hyper, &stats.counts, a_version)?,
        };
        let mut lp_current = prior.log_prior(hyper, bounds);

        for (block, prop) in prior.blocks().iter().zip(proposals.iter_mut()) {
            let mut candidate_h = *hyper;
            block.set(&mut candidate_h, prop.propose(block.get(hyper), &mut r));
            let lp_candidate = prior.log_prior(&candidate_h, bounds);
            let accepted = if lp_candidate.is_finite() {
                let candidate = if *block == HyperBlock::Mu {
                    current.clone()
                } else {
                    match evaluate(prior, &candidate_h, &stats.counts, a_version) {
                        Ok(ev) => ev,
                        // an extreme proposal whose precision cannot be factorized in
                        // floating point is rejected; the current state must factorize
                        Err(Error::NotPositiveDefinite { .. }) => {
                            debug!("taxon {taxon}: unfactorizable proposal {candidate_h:?} rejected");
                            prop.record(false, block.get(hyper), post);
                            continue;
                        }
                        Err(e) => return Err(e),
                    }
                };
                let mu_cur = if has_mean { hyper.mu } else { 0.0 };
                let mu_cand = if has_mean { candidate_h.mu } else { 0.0 };
                let log_ratio = candidate.marginal(sum_w, mu_cand) - current.marginal(sum_w, mu_cur)
                    + lp_candidate
                    - lp_current;
                let u: f64 = r.random();
                if u.ln() < log_ratio {
                    let b = candidate.mean_term(sum_w, mu_cand);
                    alpha.copy_from_slice(&candidate.factor.sample_gaussian(&b, &mut r).0);
                    *hyper = candidate_h;
                    lp_current = lp_candidate;
                    current = candidate;
                    true
                } else {
                    false
                }
            } else {
                false
            };
            prop.record(accepted, block.get(hyper), post);
        }

        if self.config.extra_alpha_draw {
            let mu = if has_mean { hyper.mu } else { 0.0 };
            let b = current.mean_term(sum_w, mu);
            alpha.copy_from_slice(&current.factor.sample_gaussian(&b, &mut r).0);
        }
        cache.current = Some(current);
        Ok(())
    }

    /// Runs the chain from `state` to `n_iter`.
    pub fn run(&self, mut state: ChainState, mut options: RunOptions<'_>) -> Result<ChainOutput> {
        let p = self.n_taxa;
        let n_iter = self.config.n_iter as u64;
        let mut caches = vec![TaxonCache::default(); p];
        let mut a_version = 0u64;
        info!(
            "running {} chain: {} cells, {} taxa, {} trees, iterations {}..{}",
            self.prior.name(),
            self.grid.n_cells(),
            p,
            self.n_trees(),
            state.iteration + 1,
            n_iter
        );
        while state.iteration < n_iter {
            let it = state.iteration + 1;
            self.update_latent(&mut state, it, Phase::Latent);
            debug_assert!(self.latent_consistent(&state));
            if self.update_memberships(&mut state, it)? {
                a_version += 1;
            }
            let stats = self.sufficient_stats(&state);

            let results: Vec<Result<()>> = state
                .alpha
                .par_iter_mut()
                .zip(state.hyper.par_iter_mut())
                .zip(state.proposals.par_iter_mut())
                .zip(caches.par_iter_mut())
                .enumerate()
                .map(|(q, (((alpha, hyper), props), cache))| {
                    self.update_taxon(q, it, alpha, hyper, props, cache, &stats, a_version)
                })
                .collect();
            results.into_iter().collect::<Result<Vec<()>>>()?;
            if self.prior.shift_invariant() {
                recentre(&mut state);
            }

            let adapting = it as usize <= self.config.burn_in;
            if it.is_multiple_of(self.config.adapt_interval as u64) {
                for props in &mut state.proposals {
                    for prop in props.iter_mut() {
                        prop.end_batch(adapting);
                    }
                }
            }
            if it as usize > self.config.burn_in {
                for (k, &mem) in state.membership.iter().enumerate() {
                    state.membership_counts[self.owner[k] as usize][mem as usize] += 1;
                }
            }
            if self.config.is_retained(it as usize) {
                let theta =
                    estimator::estimate_theta(&state.alpha, &self.data_cells, self.config.t_mc, self.config.seed, it);
                state.retained_theta.extend_from_slice(&theta);
                if self.config.keep_alpha {
                    for &c in &self.data_cells {
                        for q in 0..p {
                            state.retained_alpha.push(state.alpha[q][c]);
                        }
                    }
                }
                state.retained_hyper.extend_from_slice(&state.hyper);
            }
            state.iteration = it;

            if let Some((sink, every)) = options.progress.as_mut() {
                if *every > 0 && it.is_multiple_of(*every) {
                    write_progress(*sink, &state).map_err(|e| Error::io("<progress>", e))?;
                }
            }
            if let Some((path, every)) = &options.checkpoint {
                if *every > 0 && it.is_multiple_of(*every) && it < n_iter {
                    self.save_checkpoint(&state, path)?;
                    debug!("checkpoint at iteration {it} written to {}", path.display());
                }
            }
        }
        self.finish(state)
    }

    fn finish(&self, state: ChainState) -> Result<ChainOutput> {
        let p = self.n_taxa;
        let samples = PosteriorSamples::new(
            self.grid.clone(),
            self.dataset.taxa.clone(),
            self.config.t_mc,
            state.retained_theta.clone(),
        )?;
        let k = samples.n_samples;
        let (ess_min, ess_median) = if k >= 10 {
            let mut ess: Vec<f64> = (0..samples.n_cells() * p)
                .into_par_iter()
                .map(|idx| effective_sample_size(&samples.series(idx / p, idx % p)).unwrap_or(k as f64))
                .collect();
            ess.sort_by(f64::total_cmp);
            (ess.first().copied(), Some(ess[ess.len() / 2]))
        } else {
            (None, None)
        };
        let log_sigma_ess = (0..p)
            .map(|q| {
                let s: Vec<f64> = state.retained_hyper.iter().skip(q).step_by(p).map(|h| h.log_sigma).collect();
                effective_sample_size(&s).ok()
            })
            .collect();
        let blocks = state
            .proposals
            .iter()
            .map(|props| {
                self.prior
                    .blocks()
                    .iter()
                    .zip(props)
                    .map(|(b, pr)| BlockDiagnostics {
                        block: *b,
                        acceptance_rate: ratio(pr.accepted, pr.proposed),
                        acceptance_rate_post_burn_in: ratio(pr.accepted_post, pr.proposed_post),
                        final_scale: pr.scale(),
                    })
                    .collect()
            })
            .collect();
        let membership_frequencies = state
            .membership_counts
            .iter()
            .zip(&self.supports)
            .map(|(counts, s)| {
                let total: u64 = counts.iter().sum();
                s.data_cells
                    .iter()
                    .zip(counts)
                    .map(|(&c, &n)| (c, ratio(n, total)))
                    .collect()
            })
            .collect();
        Ok(ChainOutput {
            alpha_samples: self.config.keep_alpha.then(|| state.retained_alpha.clone()),
            retained_hyper: state.retained_hyper.clone(),
            diagnostics: ChainDiagnostics {
                model: self.prior.name().to_string(),
                iterations: state.iteration,
                blocks,
                theta_ess_min: ess_min,
                theta_ess_median: ess_median,
                log_sigma_ess,
                membership_frequencies,
            },
            samples,
        })
    }

    fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        h.update(serde_json::to_vec(&self.grid).unwrap_or_default());
        h.update(serde_json::to_vec(&self.dataset).unwrap_or_default());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    /// Writes the full chain state. Layout (little endian):
    /// magic `CMAPCKPT`, u32 version, u64 run fingerprint, u64 iteration,
    /// then length-prefixed arrays (α, hyperparameters, W, memberships,
    /// proposal states, membership tallies, retained draws), then the
    /// SHA-256 of everything before it.
    pub fn save_checkpoint(&self, state: &ChainState, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        encode_state(&mut buf, self.fingerprint(), state).map_err(|e| Error::io(path, e))?;
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        let tmp = path.with_extension("tmp");
        {
            let mut f = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
            f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
            f.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(&self, path: &Path) -> Result<ChainState> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Integrity {
                path: path.into(),
                message: "not a checkpoint file".into(),
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity {
                path: path.into(),
                message: "checksum mismatch (truncated or corrupted)".into(),
            });
        }
        let (fingerprint, state) = decode_state(body, path)?;
        if fingerprint != self.fingerprint() {
            return Err(Error::Config(format!(
                "{}: checkpoint belongs to a different configuration or dataset",
                path.display()
            )));
        }
        let p = self.n_taxa;
        if state.alpha.len() != p
            || state.w.len() != self.n_trees() * p
            || state.membership.len() != self.owner.len()
        {
            return Err(Error::Integrity {
                path: path.into(),
                message: "state dimensions do not match the run".into(),
            });
        }
        Ok(state)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn write_progress(sink: &mut dyn Write, state: &ChainState) -> std::io::Result<()> {
    let accept: Vec<Vec<f64>> = state
        .proposals
        .iter()
        .map(|ps| ps.iter().map(|p| ratio(p.accepted, p.proposed)).collect())
        .collect();
    let line = serde_json::json!({
        "iteration": state.iteration,
        "log_sigma": state.hyper.iter().map(|h| h.log_sigma).collect::<Vec<_>>(),
        "log_rho": state.hyper.iter().map(|h| h.log_rho).collect::<Vec<_>>(),
        "mu": state.hyper.iter().map(|h| h.mu).collect::<Vec<_>>(),
        "acceptance": accept,
        "retained": state.retained_hyper.len() / state.hyper.len().max(1),
    });
    writeln!(sink, "{line}")
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CMAPCKPT";
const CHECKPOINT_VERSION: u32 = 1;

fn put_hyper(buf: &mut Vec<u8>, hs: &[HyperParams]) -> std::io::Result<()> {
    let flat: Vec<f64> = hs.iter().flat_map(|h| [h.log_sigma, h.log_rho, h.mu]).collect();
    put_f64s(buf, &flat)
}

fn get_hyper(r: &mut &[u8], limit: u64) -> std::io::Result<Vec<HyperParams>> {
    Ok(get_f64s(r, limit)?
        .chunks_exact(3)
        .map(|c| HyperParams {
            log_sigma: c[0],
            log_rho: c[1],
            mu: c[2],
        })
        .collect())
}

fn encode_state(buf: &mut Vec<u8>, fingerprint: u64, s: &ChainState) -> std::io::Result<()> {
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(buf, CHECKPOINT_VERSION)?;
    put_u64(buf, fingerprint)?;
    put_u64(buf, s.iteration)?;
    put_u64(buf, s.alpha.len() as u64)?;
    for a in &s.alpha {
        put_f64s(buf, a)?;
    }
    put_hyper(buf, &s.hyper)?;
    put_f64s(buf, &s.w)?;
    put_u32s(buf, &s.membership)?;
    put_u64(buf, s.proposals.len() as u64)?;
    for props in &s.proposals {
        put_u64(buf, props.len() as u64)?;
        for p in props {
            put_bytes(buf, &serde_json::to_vec(&ProposalRecord::from(p)).expect("serialisable"))?;
            put_f64(buf, p.log_scale)?;
            put_f64s(buf, &[p.cov[0][0], p.cov[0][1], p.cov[1][0], p.cov[1][1]])?;
            put_f64s(buf, &p.batch_points.iter().flat_map(|x| *x).collect::<Vec<_>>())?;
        }
    }
    put_u64(buf, s.membership_counts.len() as u64)?;
    for c in &s.membership_counts {
        put_f64s(buf, &c.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
    }
    put_f64s(buf, &s.retained_theta)?;
    put_f64s(buf, &s.retained_alpha)?;
    put_hyper(buf, &s.retained_hyper)
}

/// Integer bookkeeping of a proposal; floats travel separately in binary.
#[derive(Serialize, Deserialize)]
struct ProposalRecord {
    dim: usize,
    target: f64,
    batches: u64,
    batch_accepted: u64,
    batch_proposed: u64,
    accepted: u64,
    proposed: u64,
    accepted_post: u64,
    proposed_post: u64,
}

impl From<&AdaptiveProposal> for ProposalRecord {
    fn from(p: &AdaptiveProposal) -> Self {
        ProposalRecord {
            dim: p.dim,
            target: p.target,
            batches: p.batches,
            batch_accepted: p.batch_accepted,
            batch_proposed: p.batch_proposed,
            accepted: p.accepted,
            proposed: p.proposed,
            accepted_post: p.accepted_post,
            proposed_post: p.proposed_post,
        }
    }
}

fn decode_state(body: &[u8], path: &Path) -> Result<(u64, ChainState)> {
    let bad = |e: std::io::Error| Error::Integrity {
        path: path.into(),
        message: format!("malformed checkpoint: {e}"),
    };
    let mut r: &[u8] = &body[8..];
    let limit = body.len() as u64;
    let version = get_u32(&mut r).map_err(bad)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let fingerprint = get_u64(&mut r).map_err(bad)?;
    let iteration = get_u64(&mut r).map_err(bad)?;
    let n_alpha = get_u64(&mut r).map_err(bad)? as usize;
    let mut alpha = Vec::new();
    for _ in 0..n_alpha.min(1 << 20) {
        alpha.push(get_f64s(&mut r, limit).map_err(bad)?);
    }
    let hyper = get_hyper(&mut r, limit).map_err(bad)?;
    let w = get_f64s(&mut r, limit).map_err(bad)?;
    let membership = get_u32s(&mut r, limit).map_err(bad)?;
    let n_props = get_u64(&mut r).map_err(bad)? as usize;
    let mut proposals = Vec::new();
    for _ in 0..n_props.min(1 << 20) {
        let n = get_u64(&mut r).map_err(bad)? as usize;
        let mut props = Vec::new();
        for _ in 0..n.min(16) {
            let rec: ProposalRecord = serde_json::from_slice(&get_bytes(&mut r, limit).map_err(bad)?)
                .map_err(|e| bad(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
            let log_scale = get_f64(&mut r).map_err(bad)?;
            let cov = get_f64s(&mut r, limit).map_err(bad)?;
            let pts = get_f64s(&mut r, limit).map_err(bad)?;
            if cov.len() != 4 {
                return Err(bad(std::io::Error::new(std::io::ErrorKind::InvalidData, "covariance")));
            }
            props.push(AdaptiveProposal {
                dim: rec.dim,
                log_scale,
                cov: [[cov[0], cov[1]], [cov[2], cov[3]]],
                target: rec.target,
                batches: rec.batches,
                batch_accepted: rec.batch_accepted,
                batch_proposed: rec.batch_proposed,
                batch_points: pts.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
                accepted: rec.accepted,
                proposed: rec.proposed,
                accepted_post: rec.accepted_post,
                proposed_post: rec.proposed_post,
            });
        }
        proposals.push(props);
    }
    let n_counts = get_u64(&mut r).map_err(bad)? as usize;
    let mut membership_counts = Vec::new();
    for _ in 0..n_counts.min(1 << 30) {
        membership_counts.push(
            get_f64s(&mut r, limit)
                .map_err(bad)?
                .into_iter()
                .map(|v| v as u64)
                .collect(),
        );
    }
    let retained_theta = get_f64s(&mut r, limit).map_err(bad)?;
    let retained_alpha = get_f64s(&mut r, limit).map_err(bad)?;
    let retained_hyper = get_hyper(&mut r, limit).map_err(bad)?;
    Ok((
        fingerprint,
        ChainState {
            iteration,
            alpha,
            hyper,
            w,
            membership,
            proposals,
            membership_counts,
            retained_theta,
            retained_alpha,
            retained_hyper,
        },
    ))
}

/// Builds a sampler, initialises it and runs it to completion.
pub fn run_chain(dataset: &Dataset, grid: &GridSpec, config: &SamplerConfig) -> Result<ChainOutput> {
    let sampler = Sampler::new(dataset, grid, config)?;
    let state = sampler.initial_state()?;
    sampler.run(state, RunOptions::default())
}
