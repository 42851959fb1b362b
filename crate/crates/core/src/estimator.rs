//! Turning latent-field draws into composition proportions, and summarising
//! the retained draws.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::model::TaxonRegistry;
use crate::rng::{self, Phase};

pub const DEFAULT_T_MC: u32 = 10_000;

/// Argmax frequencies of `t_mc` draws `W ~ N(alpha, I)`.
pub fn estimate_theta_cell<R: Rng + ?Sized>(alpha: &[f64], t_mc: u32, rng: &mut R) -> Vec<f64> {
    let p = alpha.len();
    let mut counts = vec![0u32; p];
    for _ in 0..t_mc {
        let mut best = 0;
        let mut best_w = f64::NEG_INFINITY;
        for (q, &a) in alpha.iter().enumerate() {
            let w = a + rng.sample::<f64, _>(StandardNormal);
            if w > best_w {
                best_w = w;
                best = q;
            }
        }
        counts[best] += 1;
    }
    let t = t_mc as f64;
    counts.iter().map(|&c| c as f64 / t).collect()
}

/// Proportions for the given model-space `cells`, laid out `[cell][taxon]`.
/// `alpha` is indexed `[taxon][cell]`. Each cell draws from its own stream
/// so the result does not depend on the thread count.
pub fn estimate_theta(
    alpha: &[Vec<f64>],
    cells: &[usize],
    t_mc: u32,
    seed: u64,
    iteration: u64,
) -> Vec<f64> {
    let p = alpha.len();
    let mut out = vec![0.0; cells.len() * p];
    out.par_chunks_mut(p.max(1))
        .zip(cells.par_iter().enumerate())
        .for_each(|(row, (j, &cell))| {
            let mut r = rng::stream(seed, iteration, Phase::Theta, j as u64);
            let a: Vec<f64> = alpha.iter().map(|f| f[cell]).collect();
            row.copy_from_slice(&estimate_theta_cell(&a, t_mc, &mut r));
        });
    out
}

/// Retained posterior draws of the composition, `K × cells × P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub grid: GridSpec,
    pub taxa: TaxonRegistry,
    pub t_mc: u32,
    pub n_samples: usize,
    /// Layout `[sample][data cell][taxon]`.
    pub theta: Vec<f64>,
}

impl PosteriorSamples {
    pub fn new(grid: GridSpec, taxa: TaxonRegistry, t_mc: u32, theta: Vec<f64>) -> Result<Self> {
        let per = grid.n_data_cells() * taxa.len();
        if per == 0 || !theta.len().is_multiple_of(per) {
            return Err(Error::invalid(format!(
                "sample payload of {} values is not a multiple of cells x taxa = {per}",
                theta.len()
            )));
        }
        Ok(PosteriorSamples {
            n_samples: theta.len() / per,
            grid,
            taxa,
            t_mc,
            theta,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_data_cells()
    }

    pub fn n_taxa(&self) -> usize {
        self.taxa.len()
    }

    pub fn get(&self, k: usize, cell: usize, p: usize) -> f64 {
        self.theta[(k * self.n_cells() + cell) * self.n_taxa() + p]
    }

    /// Composition of one cell in sample `k`.
    pub fn cell(&self, k: usize, cell: usize) -> &[f64] {
        let p = self.n_taxa();
        let start = (k * self.n_cells() + cell) * p;
        &self.theta[start..start + p]
    }

    /// Draws of one `(cell, taxon)` across samples.
    pub fn series(&self, cell: usize, p: usize) -> Vec<f64> {
        (0..self.n_samples).map(|k| self.get(k, cell, p)).collect()
    }

    /// Posterior mean composition, `[cell][taxon]`.
    pub fn mean(&self) -> Vec<f64> {
        let per = self.n_cells() * self.n_taxa();
        let mut m = vec![0.0; per];
        for chunk in self.theta.chunks(per) {
            for (a, b) in m.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        let k = self.n_samples as f64;
        m.iter_mut().for_each(|v| *v /= k);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellTaxonSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub grid: GridSpec,
    pub taxa: TaxonRegistry,
    /// Layout `[data cell][taxon]`.
    pub stats: Vec<CellTaxonSummary>,
}

impl PosteriorSummary {
    pub fn get(&self, cell: usize, p: usize) -> &CellTaxonSummary {
        &self.stats[cell * self.taxa.len() + p]
    }
}

/// Quantile by linear interpolation between order statistics at position
/// `q·(n−1)` (Hyndman–Fan type 7). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(samples: &PosteriorSamples) -> Result<PosteriorSummary> {
    let k = samples.n_samples;
    if k < 2 {
        return Err(Error::invalid(format!(
            "at least 2 samples are needed for a summary, got {k}"
        )));
    }
    let (m, p) = (samples.n_cells(), samples.n_taxa());
    let stats = (0..m * p)
        .into_par_iter()
        .map(|idx| {
            let (cell, q) = (idx / p, idx % p);
            let mut s = samples.series(cell, q);
            let mean = s.iter().sum::<f64>() / k as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            s.sort_by(f64::total_cmp);
            CellTaxonSummary {
                mean,
                sd: var.sqrt(),
                q025: quantile_sorted(&s, 0.025),
                q975: quantile_sorted(&s, 0.975),
            }
        })
        .collect();
    Ok(PosteriorSummary {
        grid: samples.grid.clone(),
        taxa: samples.taxa.clone(),
        stats,
    })
}

/// Effective sample size by Geyer's initial positive sequence estimator,
/// clamped to `(0, K]`. Constant series return `K`.
pub fn effective_sample_size(series: &[f64]) -> Result<f64> {
    let k = series.len();
    if k < 10 {
        return Err(Error::invalid(format!(
            "effective sample size needs at least 10 draws, got {k}"
        )));
    }
    let n = k as f64;
    let mean = series.iter().sum::<f64>() / n;
    let centred: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let autocov = |lag: usize| -> f64 {
        centred[..k - lag]
            .iter()
            .zip(&centred[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n
    };
    let gamma0 = autocov(0);
    if gamma0 <= 0.0 || !gamma0.is_finite() {
        return Ok(n);
    }
    let mut sum = 0.0;
    let mut lag = 0;
    while lag + 1 < k {
        let pair = autocov(lag) + autocov(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        lag += 2;
    }
    let tau = (-gamma0 + 2.0 * sum) / gamma0;
    if tau <= 0.0 {
        return Ok(n);
    }
    Ok((n / tau).min(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::probit_theta_closed_form_p2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_two_taxa() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let t = estimate_theta_cell(&[0.0, 0.0], 10_000, &mut r);
        assert!((t[0] - 0.5).abs() < 0.015);
        assert_eq!(t[0] + t[1], 1.0);
    }

    #[test]
    fn closed_form_agreement() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let t = estimate_theta_cell(&[std::f64::consts::SQRT_2, 0.0], 10_000, &mut r);
        let exact = probit_theta_closed_form_p2(std::f64::consts::SQRT_2, 0.0);
        assert!((exact - 0.8413).abs() < 1e-4);
        assert!((t[0] - exact).abs() < 4.0 * (exact * (1.0 - exact) / 1e4).sqrt());
    }

    #[test]
    fn exchangeable_three() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let t = estimate_theta_cell(&[0.7, 0.7, 0.7], 30_000, &mut r);
        for v in &t {
            assert!((v - 1.0 / 3.0).abs() < 0.012);
        }
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_is_deterministic_and_equivariant() {
        let alpha = vec![vec![0.5, -1.0, 2.0], vec![0.0, 0.3, -0.2]];
        let a = estimate_theta(&alpha, &[0, 1, 2], 2000, 9, 4);
        let b = estimate_theta(&alpha, &[0, 1, 2], 2000, 9, 4);
        assert_eq!(a, b);
        for row in a.chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| (v * 2000.0).fract() == 0.0));
        }
        // Swapping the taxa swaps the frequencies up to Monte Carlo error.
        let swapped = vec![alpha[1].clone(), alpha[0].clone()];
        let c = estimate_theta(&swapped, &[0, 1, 2], 20_000, 9, 5);
        let d = estimate_theta(&alpha, &[0, 1, 2], 20_000, 9, 6);
        for i in 0..3 {
            assert!((c[2 * i] - d[2 * i + 1]).abs() < 0.02);
        }
    }

    fn samples_from(values: Vec<f64>, k: usize) -> PosteriorSamples {
        let grid = GridSpec::new(1, 1, 0).unwrap();
        let p = values.len() / k;
        PosteriorSamples::new(grid, TaxonRegistry::numbered(p), 10, values).unwrap()
    }

    #[test]
    fn summary_constant_and_two_point() {
        let s = summarize(&samples_from(vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7], 3)).unwrap();
        assert!((s.get(0, 0).mean - 0.3).abs() < 1e-15);
        assert!(s.get(0, 0).sd < 1e-15);
        let s = summarize(&samples_from(vec![0.2, 0.8, 0.4, 0.6], 2)).unwrap();
        assert!((s.get(0, 0).mean - 0.3).abs() < 1e-15);
        assert!((s.get(0, 0).mean + s.get(0, 1).mean - 1.0).abs() < 1e-12);
        assert!(s.get(0, 0).q025 <= s.get(0, 0).q975);
        assert!(summarize(&samples_from(vec![0.2, 0.8], 1)).is_err());
    }

    #[test]
    fn quantile_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert!((quantile_sorted(&v, 0.025) - 1.1).abs() < 1e-12);
        assert!((quantile_sorted(&v, 0.975) - 4.9).abs() < 1e-12);
    }

    #[test]
    fn ess_edge_cases() {
        assert_eq!(effective_sample_size(&[1.0; 50]).unwrap(), 50.0);
        let alt: Vec<f64> = (0..250).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(effective_sample_size(&alt).unwrap(), 250.0);
        assert!(effective_sample_size(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn ess_iid_and_ar1() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let iid: Vec<f64> = (0..250).map(|_| r.sample(StandardNormal)).collect();
        let e = effective_sample_size(&iid).unwrap();
        assert!((150.0..=250.0).contains(&e), "iid ESS {e}");

        // AR(1), φ = 0.5: ESS ≈ K/3; average a few replicates.
        let mut total = 0.0;
        let reps = 20;
        for _ in 0..reps {
            let mut x = 0.0;
            let mut s = Vec::with_capacity(2500);
            for _ in 0..2500 {
                x = 0.5 * x + (0.75f64).sqrt() * r.sample::<f64, _>(StandardNormal);
                s.push(x);
            }
            total += effective_sample_size(&s).unwrap();
        }
        let mean = total / reps as f64;
        let expect = 2500.0 / 3.0;
        assert!((mean - expect).abs() < 0.3 * expect, "AR(1) ESS {mean}");
    }
}
