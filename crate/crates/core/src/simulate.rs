//! Synthetic data from the generative model: latent fields from a spatial
//! prior, trees by the probit link, optional township aggregation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, TownshipOverlap};
use crate::model::{argmax, probit_theta_quadrature, CellCounts, Dataset, TaxonRegistry, Township};
use crate::precision::PrecisionKind;
use crate::prior::{HyperParams, PriorRegistry, SpatialPrior};
use crate::rng::{self, Phase};
use crate::sparse::CholeskyFactor;

/// Ridge added to an intrinsic precision so it can be factorised; the
/// resulting draw is centred, which removes the direction it inflates.
const INTRINSIC_RIDGE: f64 = 1e-6;

/// One draw of a latent field from `prior` at `h`, over the prior's cells.
pub fn draw_prior_field<R: Rng + ?Sized>(prior: &dyn SpatialPrior, h: &HyperParams, rng: &mut R) -> Result<Vec<f64>> {
    let eval = prior.evaluate(h)?;
    let m = prior.n_cells();
    if prior.kind() != PrecisionKind::Car {
        let factor = CholeskyFactor::factorize(prior.symbolic().clone(), &eval.precision)?;
        let b: Vec<f64> = eval.row_sums.iter().map(|r| r * h.mu).collect();
        let mut x = factor.sample_gaussian(&b, rng).0;
        if !prior.has_mean() {
            x.iter_mut().for_each(|v| *v += h.mu);
        }
        return Ok(x);
    }
    let ridged = eval.precision.plus_diagonal(&vec![INTRINSIC_RIDGE; m]);
    let factor = CholeskyFactor::factorize(prior.symbolic().clone(), &ridged)?;
    let mut x = factor.sample_gaussian(&vec![0.0; m], rng).0;
    let mean = x.iter().sum::<f64>() / m as f64;
    x.iter_mut().for_each(|v| *v += h.mu - mean);
    Ok(x)
}

/// Taxon of one tree: argmax of `N(α, I)`.
pub fn draw_tree<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> usize {
    let w: Vec<f64> = alpha
        .iter()
        .map(|a| a + rng.sample::<f64, _>(StandardNormal))
        .collect();
    argmax(&w)
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub grid: GridSpec,
    pub dataset: Dataset,
    /// `[taxon][data cell]`.
    pub alpha: Vec<Vec<f64>>,
    /// Exact probabilities, `[data cell][taxon]`.
    pub theta: Vec<f64>,
    pub params: Vec<HyperParams>,
}

/// Simulates a dataset on the configured data grid. Fields are drawn on the
/// data grid itself (no buffer); the buffer only matters when fitting.
pub fn simulate(config: &RunConfig) -> Result<SimulatedData> {
    config.validate(false)?;
    let sim = &config.simulation;
    let fit_grid = config.grid.clone();
    let mut field_grid = fit_grid.clone();
    field_grid.buffer = 0;
    let prior = PriorRegistry::default().create(&sim.model, &field_grid)?;
    let params = config.simulation_params();
    let p = sim.n_taxa;
    let m = field_grid.n_data_cells();

    let alpha = params
        .iter()
        .enumerate()
        .map(|(q, h)| draw_prior_field(prior.as_ref(), h, &mut rng::stream(sim.seed, 0, Phase::Simulate, q as u64)))
        .collect::<Result<Vec<_>>>()?;
    let cell_alpha = |c: usize| -> Vec<f64> { alpha.iter().map(|a| a[c]).collect() };
    let theta: Vec<f64> = (0..m).flat_map(|c| probit_theta_quadrature(&cell_alpha(c))).collect();

    let mut r = rng::stream(sim.seed, 1, Phase::Simulate, 0);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut r);
    let n_data = (sim.data_fraction * m as f64).round() as usize;
    let mut has_data = vec![false; m];
    for &c in &order[..n_data] {
        has_data[c] = true;
    }

    // township blocks
    let mut in_township = vec![None; m];
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    if sim.township_size > 0 {
        let k = sim.township_size;
        for by in (0..field_grid.ny).step_by(k) {
            for bx in (0..field_grid.nx).step_by(k) {
                let cells: Vec<usize> = (by..(by + k).min(field_grid.ny))
                    .flat_map(|y| (bx..(bx + k).min(field_grid.nx)).map(move |x| (x, y)))
                    .map(|(x, y)| field_grid.data_index(x, y).unwrap())
                    .collect();
                blocks.push(cells);
            }
        }
        let mut idx: Vec<usize> = (0..blocks.len()).collect();
        idx.shuffle(&mut r);
        let n_ts = (sim.township_fraction * blocks.len() as f64).round() as usize;
        idx.truncate(n_ts);
        idx.sort_unstable();
        blocks = idx.into_iter().map(|i| std::mem::take(&mut blocks[i])).collect();
        for (t, b) in blocks.iter().enumerate() {
            for &c in b {
                in_township[c] = Some(t);
            }
        }
    }

    let mut cells = Vec::new();
    for c in 0..m {
        if !has_data[c] || in_township[c].is_some() {
            continue;
        }
        let a = cell_alpha(c);
        let mut y = vec![0u32; p];
        let mut tr = rng::stream(sim.seed, 2, Phase::Simulate, c as u64);
        for _ in 0..sim.trees_per_cell {
            y[draw_tree(&a, &mut tr)] += 1;
        }
        cells.push((c, y));
    }

    let mut townships = Vec::new();
    for (t, b) in blocks.iter().enumerate() {
        let mut tr = rng::stream(sim.seed, 3, Phase::Simulate, t as u64);
        let n_trees = sim.trees_per_cell as usize * b.iter().filter(|&&c| has_data[c]).count();
        if n_trees == 0 {
            continue;
        }
        let trees = (0..n_trees)
            .map(|_| {
                let c = b[tr.random_range(0..b.len())];
                draw_tree(&cell_alpha(c), &mut tr)
            })
            .collect();
        let raw: Vec<(usize, f64)> = b.iter().map(|&c| (c, 1.0)).collect();
        townships.push(Township {
            overlap: TownshipOverlap::normalize(format!("T{t:04}"), &raw, m)?,
            trees,
        });
    }

    let taxa = match &config.taxa {
        Some(names) if names.len() == p => TaxonRegistry::new(names.clone())?,
        Some(names) => {
            return Err(Error::Config(format!(
                "taxa lists {} names but sim_taxa is {p}",
                names.len()
            )))
        }
        None => TaxonRegistry::numbered(p),
    };
    Ok(SimulatedData {
        grid: fit_grid,
        dataset: Dataset {
            taxa,
            counts: CellCounts::new(cells, p)?,
            townships,
        },
        alpha,
        theta,
        params,
    })
}

/// Writes `x,y,taxon,alpha,theta` for every data cell and taxon.
pub fn write_truth(data: &SimulatedData, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "x,y,taxon,alpha,theta").map_err(io)?;
    let p = data.dataset.n_taxa();
    for c in 0..data.grid.n_data_cells() {
        let (x, y) = data.grid.data_coords(c);
        for q in 0..p {
            writeln!(
                w,
                "{x},{y},{},{},{}",
                data.dataset.taxa.name(q),
                data.alpha[q][c],
                data.theta[c * p + q]
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> RunConfig {
        RunConfig::parse(text, Path::new(".")).unwrap()
    }

    #[test]
    fn zero_field_gives_even_split() {
        let c = config("nx = 10\nny = 10\nsim_model = iid\nsim_taxa = 2\nsim_sigma = 1e-9\nsim_trees_per_cell = 100\n");
        let d = simulate(&c).unwrap();
        let y: Vec<u64> = (0..2)
            .map(|q| d.dataset.counts.cells.iter().map(|(_, y)| y[q] as u64).sum())
            .collect();
        let share = y[0] as f64 / (y[0] + y[1]) as f64;
        assert!((share - 0.5).abs() < 0.03, "{share}");
    }

    #[test]
    fn small_sigma_gives_flat_surface() {
        let c = config("nx = 8\nny = 8\nsim_model = car\nsim_taxa = 3\nsim_sigma = 1e-4\n");
        let d = simulate(&c).unwrap();
        for q in 0..3 {
            let t: Vec<f64> = (0..64).map(|i| d.theta[i * 3 + q]).collect();
            let spread = t.iter().cloned().fold(f64::MIN, f64::max) - t.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread < 1e-3);
        }
    }

    #[test]
    fn truth_rows_sum_to_one_and_counts_match() {
        let c = config("nx = 20\nny = 20\nsim_taxa = 3\nsim_trees_per_cell = 100\nsim_mu = 0.5,0,-0.5\n");
        let d = simulate(&c).unwrap();
        for row in d.theta.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(d.dataset.counts.cells.len(), 400);
        assert!(d.dataset.counts.cells.iter().all(|(_, y)| y.iter().sum::<u32>() == 100));
        // centred draw plus level
        for q in 0..3 {
            let mean = d.alpha[q].iter().sum::<f64>() / 400.0;
            assert!((mean - [0.5, 0.0, -0.5][q]).abs() < 1e-9);
        }
    }

    #[test]
    fn townships_partition_the_blocks() {
        let c = config("nx = 6\nny = 6\nsim_township_size = 2\nsim_township_fraction = 0.5\nsim_trees_per_cell = 10\n");
        let d = simulate(&c).unwrap();
        assert_eq!(d.dataset.townships.len(), 5);
        let township_cells: usize = d.dataset.townships.iter().map(|t| t.overlap.entries.len()).sum();
        assert_eq!(township_cells + d.dataset.counts.cells.len(), 36);
        assert_eq!(d.dataset.total_trees(), 360);
        d.dataset.validate(36).unwrap();
    }

    #[test]
    fn simulation_is_deterministic() {
        let c = config("nx = 5\nny = 4\nsim_model = spde\nsim_rho = 2\n");
        let a = simulate(&c).unwrap();
        let b = simulate(&c).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.theta, b.theta);
    }
}
