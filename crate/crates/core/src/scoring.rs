//! Predictive scores on held-out data and the hold-out experiment harness.
//!
//! Predictions are `[data cell][taxon]` probability tables: either the
//! posterior mean composition or a single retained draw.

use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{HoldoutConfig, HoldoutKind, IntervalMethod};
use crate::error::{Error, Result};
use crate::estimator::{quantile_sorted, PosteriorSamples};
use crate::grid::GridSpec;
use crate::model::{multinomial_log_pmf, CellCounts, Dataset};
use crate::rng::{self, Phase};
use crate::sampler::{run_chain, ChainOutput, SamplerConfig};

fn prediction(theta: &[f64], cell: usize, p: usize) -> Result<&[f64]> {
    theta
        .get(cell * p..(cell + 1) * p)
        .ok_or_else(|| Error::invalid(format!("no prediction for held-out cell {cell}")))
}

fn check_taxa(heldout: &CellCounts, p: usize) -> Result<()> {
    match heldout.cells.iter().find(|(_, y)| y.len() != p) {
        Some((c, _)) => Err(Error::invalid(format!("held-out cell {c} has the wrong number of taxa"))),
        None => Ok(()),
    }
}

fn total_trees(heldout: &CellCounts) -> Result<f64> {
    let n = heldout.total_trees();
    if n == 0 {
        return Err(Error::invalid("no held-out trees"));
    }
    Ok(n as f64)
}

/// Multi-category Brier score averaged over held-out trees.
pub fn brier(heldout: &CellCounts, theta: &[f64], p: usize) -> Result<f64> {
    check_taxa(heldout, p)?;
    let n = total_trees(heldout)?;
    let mut total = 0.0;
    for (cell, y) in &heldout.cells {
        let t = prediction(theta, *cell, p)?;
        let s2: f64 = t.iter().map(|v| v * v).sum();
        // one tree of taxon q contributes (1 − θ_q)² + Σ_{r≠q} θ_r²
        for (q, &k) in y.iter().enumerate() {
            total += k as f64 * (1.0 - 2.0 * t[q] + s2);
        }
    }
    Ok(total / n)
}

/// `−Σ_i log Mult(Y_i; θ̃_i)` with zero probabilities replaced by `floor`
/// (no renormalisation).
pub fn neg_log_predictive_density(heldout: &CellCounts, theta: &[f64], p: usize, floor: f64) -> Result<f64> {
    check_taxa(heldout, p)?;
    let mut total = 0.0;
    let mut floored = vec![0.0; p];
    for (cell, y) in &heldout.cells {
        let t = prediction(theta, *cell, p)?;
        for (f, &v) in floored.iter_mut().zip(t) {
            *f = if v == 0.0 { floor } else { v };
        }
        total -= multinomial_log_pmf(y, &floored)?;
    }
    Ok(total)
}

fn weighted_errors(heldout: &CellCounts, theta: &[f64], p: usize) -> Result<(f64, f64)> {
    check_taxa(heldout, p)?;
    let n = total_trees(heldout)?;
    let (mut sq, mut abs) = (0.0, 0.0);
    for (cell, y) in &heldout.cells {
        let ni: f64 = y.iter().map(|&v| v as f64).sum();
        if ni == 0.0 {
            continue;
        }
        let t = prediction(theta, *cell, p)?;
        for (q, &k) in y.iter().enumerate() {
            let d = k as f64 / ni - t[q];
            sq += ni * d * d;
            abs += ni * d.abs();
        }
    }
    let denom = p as f64 * n;
    Ok(((sq / denom).sqrt(), abs / denom))
}

/// Tree-weighted root mean square error of the empirical proportions.
pub fn weighted_rmspe(heldout: &CellCounts, theta: &[f64], p: usize) -> Result<f64> {
    Ok(weighted_errors(heldout, theta, p)?.0)
}

/// Tree-weighted mean absolute error of the empirical proportions.
pub fn weighted_mae(heldout: &CellCounts, theta: &[f64], p: usize) -> Result<f64> {
    Ok(weighted_errors(heldout, theta, p)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Metric {
    Brier,
    NegLogDensity,
    Rmspe,
    Mae,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Brier, Metric::NegLogDensity, Metric::Rmspe, Metric::Mae];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Brier => "brier",
            Metric::NegLogDensity => "neg_log_density",
            Metric::Rmspe => "weighted_rmspe",
            Metric::Mae => "weighted_mae",
        }
    }

    /// Whether the metric needs whole held-out cells.
    pub fn needs_full_cells(self) -> bool {
        matches!(self, Metric::Rmspe | Metric::Mae)
    }

    pub fn evaluate(self, heldout: &CellCounts, theta: &[f64], p: usize, floor: f64) -> Result<f64> {
        match self {
            Metric::Brier => brier(heldout, theta, p),
            Metric::NegLogDensity => neg_log_predictive_density(heldout, theta, p, floor),
            Metric::Rmspe => weighted_rmspe(heldout, theta, p),
            Metric::Mae => weighted_mae(heldout, theta, p),
        }
    }
}

/// Metric value at every retained draw.
pub fn posterior_metric_distribution(
    metric: Metric,
    heldout: &CellCounts,
    samples: &PosteriorSamples,
    floor: f64,
) -> Result<Vec<f64>> {
    let per = samples.n_cells() * samples.n_taxa();
    samples
        .theta
        .par_chunks(per)
        .map(|theta| metric.evaluate(heldout, theta, samples.n_taxa(), floor))
        .collect()
}

/// Paired comparison of two models' per-draw metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Comparison {
    /// Share of draws with `a < b`.
    pub p_less: f64,
    /// Share of draws with `a ≤ b`.
    pub p_less_equal: f64,
}

pub fn compare(a: &[f64], b: &[f64]) -> Result<Comparison> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "paired comparison needs equal, non-zero sample counts (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let k = a.len() as f64;
    let less = a.iter().zip(b).filter(|(x, y)| x < y).count() as f64;
    let le = a.iter().zip(b).filter(|(x, y)| x <= y).count() as f64;
    Ok(Comparison {
        p_less: less / k,
        p_less_equal: le / k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Coverage {
    /// No held-out cell has enough trees.
    Empty,
    Computed {
        coverage: f64,
        mean_length: f64,
        median_length: f64,
        n_intervals: usize,
        /// Fewer than 20 retained draws back each interval.
        low_sample_warning: bool,
    },
}

/// Coverage of central prediction intervals for the observed proportions
/// `Y_ip / n_i` in held-out cells with at least `min_trees` trees.
pub fn interval_coverage(
    heldout: &CellCounts,
    samples: &PosteriorSamples,
    level: f64,
    min_trees: u32,
    method: IntervalMethod,
    seed: u64,
) -> Result<Coverage> {
    let p = samples.n_taxa();
    check_taxa(heldout, p)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("interval level {level} outside (0, 1)")));
    }
    let lo_q = (1.0 - level) / 2.0;
    let hi_q = 1.0 - lo_q;
    let k = samples.n_samples;
    let qualifying: Vec<&(usize, Vec<u32>)> = heldout
        .cells
        .iter()
        .filter(|(_, y)| y.iter().sum::<u32>() >= min_trees.max(1))
        .collect();
    if qualifying.is_empty() {
        return Ok(Coverage::Empty);
    }
    if let Some((c, _)) = qualifying.iter().find(|(c, _)| *c >= samples.n_cells()) {
        return Err(Error::invalid(format!("no prediction for held-out cell {c}")));
    }
    let per_cell: Vec<Vec<(bool, f64)>> = qualifying
        .par_iter()
        .map(|(cell, y)| {
            let n: u32 = y.iter().sum();
            let mut r = rng::stream(seed, *cell as u64, Phase::Score, 0);
            (0..p)
                .map(|q| {
                    let mut draws: Vec<f64> = (0..k)
                        .map(|s| {
                            let t = samples.get(s, *cell, q).clamp(0.0, 1.0);
                            match method {
                                IntervalMethod::Theta => t,
                                IntervalMethod::Binomial => {
                                    Binomial::new(n as u64, t).expect("valid binomial").sample(&mut r) as f64
                                        / n as f64
                                }
                            }
                        })
                        .collect();
                    draws.sort_by(f64::total_cmp);
                    let (lo, hi) = (quantile_sorted(&draws, lo_q), quantile_sorted(&draws, hi_q));
                    let obs = y[q] as f64 / n as f64;
                    (obs >= lo && obs <= hi, hi - lo)
                })
                .collect()
        })
        .collect();
    let flat: Vec<(bool, f64)> = per_cell.into_iter().flatten().collect();
    let covered = flat.iter().filter(|v| v.0).count() as f64;
    let mut lengths: Vec<f64> = flat.iter().map(|v| v.1).collect();
    lengths.sort_by(f64::total_cmp);
    Ok(Coverage::Computed {
        coverage: covered / flat.len() as f64,
        mean_length: lengths.iter().sum::<f64>() / lengths.len() as f64,
        median_length: quantile_sorted(&lengths, 0.5),
        n_intervals: flat.len(),
        low_sample_warning: k < 20,
    })
}

/// Which data are held out.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutDesign {
    pub kind: HoldoutKind,
    pub fraction: f64,
    /// Half-open data-cell rectangle `[x0, x1) × [y0, y1)` from which held-out
    /// data are chosen; `None` means the whole grid.
    pub region: Option<[usize; 4]>,
    pub seed: u64,
}

impl HoldoutDesign {
    pub fn from_config(c: &HoldoutConfig) -> Self {
        HoldoutDesign {
            kind: c.kind,
            fraction: c.fraction,
            region: c.region,
            seed: c.seed,
        }
    }

    fn in_region(&self, grid: &GridSpec, cell: usize) -> bool {
        match self.region {
            None => true,
            Some([x0, y0, x1, y1]) => {
                let (x, y) = grid.data_coords(cell);
                (x0..x1).contains(&x) && (y0..y1).contains(&y)
            }
        }
    }

    pub fn describe(&self) -> String {
        let kind = match self.kind {
            HoldoutKind::FullCell => "full-cell",
            HoldoutKind::PerTree => "per-tree",
        };
        let region = match self.region {
            None => "whole grid".to_string(),
            Some([x0, y0, x1, y1]) => format!("cells x in [{x0},{x1}), y in [{y0},{y1})"),
        };
        format!("{kind}, fraction {}, {region}, seed {}", self.fraction, self.seed)
    }

    /// Splits the gridded counts into training data and held-out counts.
    /// Township trees always stay in the training data.
    pub fn split(&self, dataset: &Dataset, grid: &GridSpec) -> Result<Split> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "hold-out fraction {} must lie in (0, 1]",
                self.fraction
            )));
        }
        let p = dataset.n_taxa();
        let mut r = rng::stream(self.seed, 0, Phase::Split, 0);
        let candidates: Vec<usize> = dataset
            .counts
            .cells
            .iter()
            .enumerate()
            .filter(|(_, (c, y))| self.in_region(grid, *c) && y.iter().any(|&v| v > 0))
            .map(|(i, _)| i)
            .collect();
        let mut train = dataset.counts.cells.clone();
        let held = match self.kind {
            HoldoutKind::FullCell => {
                let n = (self.fraction * candidates.len() as f64).round() as usize;
                let mut chosen = candidates;
                chosen.shuffle(&mut r);
                chosen.truncate(n);
                chosen.sort_unstable();
                for &i in &chosen {
                    train[i].1.iter_mut().for_each(|v| *v = 0);
                }
                chosen.iter().map(|&i| dataset.counts.cells[i].clone()).collect()
            }
            HoldoutKind::PerTree => {
                let trees: Vec<(usize, usize)> = candidates
                    .iter()
                    .flat_map(|&i| {
                        let y = &dataset.counts.cells[i].1;
                        (0..p).flat_map(move |q| std::iter::repeat_n((i, q), y[q] as usize))
                    })
                    .collect();
                let n = (self.fraction * trees.len() as f64).round() as usize;
                let mut by_cell: std::collections::BTreeMap<usize, Vec<u32>> = Default::default();
                for &(i, q) in trees.choose_multiple(&mut r, n) {
                    train[i].1[q] -= 1;
                    by_cell.entry(i).or_insert_with(|| vec![0; p])[q] += 1;
                }
                by_cell
                    .into_iter()
                    .map(|(i, y)| (dataset.counts.cells[i].0, y))
                    .collect()
            }
        };
        train.retain(|(_, y)| y.iter().any(|&v| v > 0));
        Split::new(dataset, train, held)
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub training: Dataset,
    pub heldout: CellCounts,
}

impl Split {
    fn new(dataset: &Dataset, train: Vec<(usize, Vec<u32>)>, held: Vec<(usize, Vec<u32>)>) -> Result<Self> {
        let p = dataset.n_taxa();
        let heldout = CellCounts::new(held, p)?;
        if heldout.total_trees() == 0 {
            return Err(Error::invalid("the hold-out design selects no data"));
        }
        Ok(Split {
            training: Dataset {
                taxa: dataset.taxa.clone(),
                counts: CellCounts::new(train, p)?,
                townships: dataset.townships.clone(),
            },
            heldout,
        })
    }
}

/// One metric row of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: Metric,
    /// Metric of the posterior-mean prediction, per model.
    pub of_posterior_mean: Vec<f64>,
    /// Posterior mean of the per-draw metric, per model.
    pub posterior_mean: Vec<f64>,
    /// Paired comparison of the first model against the second.
    pub comparison: Option<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub models: Vec<String>,
    pub design: String,
    pub seed: u64,
    pub heldout_cells: usize,
    pub heldout_trees: u64,
    pub rows: Vec<MetricRow>,
    pub coverage: Vec<Coverage>,
    pub interval_level: f64,
    pub interval_method: String,
}

impl ScoreReport {
    /// Scores every model's samples on the same held-out counts.
    pub fn compute(
        heldout: &CellCounts,
        models: &[(&str, &PosteriorSamples)],
        full_cells: bool,
        cfg: &HoldoutConfig,
        design: &str,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::invalid("no models to score"));
        }
        let p = models[0].1.n_taxa();
        if models.iter().any(|(_, s)| s.n_taxa() != p || s.n_cells() != models[0].1.n_cells()) {
            return Err(Error::invalid("models disagree on grid or taxa"));
        }
        let mut rows = Vec::new();
        for metric in Metric::ALL {
            if metric.needs_full_cells() && !full_cells {
                continue;
            }
            let mut of_mean = Vec::new();
            let mut mean_of = Vec::new();
            let mut dists = Vec::new();
            for (_, s) in models {
                of_mean.push(metric.evaluate(heldout, &s.mean(), p, cfg.floor)?);
                let d = posterior_metric_distribution(metric, heldout, s, cfg.floor)?;
                mean_of.push(d.iter().sum::<f64>() / d.len() as f64);
                dists.push(d);
            }
            let comparison = if dists.len() >= 2 {
                Some(compare(&dists[0], &dists[1])?)
            } else {
                None
            };
            rows.push(MetricRow {
                metric,
                of_posterior_mean: of_mean,
                posterior_mean: mean_of,
                comparison,
            });
        }
        let coverage = if full_cells {
            models
                .iter()
                .map(|(_, s)| interval_coverage(heldout, s, cfg.level, cfg.min_trees, cfg.interval, cfg.seed))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(ScoreReport {
            models: models.iter().map(|(n, _)| n.to_string()).collect(),
            design: design.to_string(),
            seed: cfg.seed,
            heldout_cells: heldout.cells.len(),
            heldout_trees: heldout.total_trees(),
            rows,
            coverage,
            interval_level: cfg.level,
            interval_method: match cfg.interval {
                IntervalMethod::Binomial => "binomial".into(),
                IntervalMethod::Theta => "theta".into(),
            },
        })
    }

    fn comparison_label(&self) -> Option<(String, String)> {
        (self.models.len() >= 2).then(|| {
            (
                format!("P({}<{})", self.models[0], self.models[1]),
                format!("P({}<={})", self.models[0], self.models[1]),
            )
        })
    }

    /// Human-readable tables: one for metrics of posterior-mean predictions,
    /// one for posterior means of metrics, one for interval coverage.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "design: {}", self.design);
        let _ = writeln!(s, "held-out cells: {}, trees: {}\n", self.heldout_cells, self.heldout_trees);
        let header = |s: &mut String, title: &str, with_p: bool| {
            let _ = write!(s, "{title}\n{:<18}", "metric");
            for m in &self.models {
                let _ = write!(s, "{m:>14}");
            }
            if with_p {
                if let Some((a, b)) = self.comparison_label() {
                    let _ = write!(s, "{a:>16}{b:>16}");
                }
            }
            s.push('\n');
        };
        header(&mut s, "metric of posterior mean predictions", false);
        for r in &self.rows {
            let _ = write!(s, "{:<18}", r.metric.name());
            for v in &r.of_posterior_mean {
                let _ = write!(s, "{v:>14.6}");
            }
            s.push('\n');
        }
        s.push('\n');
        header(&mut s, "posterior mean of metric", true);
        for r in &self.rows {
            let _ = write!(s, "{:<18}", r.metric.name());
            for v in &r.posterior_mean {
                let _ = write!(s, "{v:>14.6}");
            }
            if let Some(c) = r.comparison {
                let _ = write!(s, "{:>16.3}{:>16.3}", c.p_less, c.p_less_equal);
            }
            s.push('\n');
        }
        if !self.coverage.is_empty() {
            let _ = writeln!(
                s,
                "\n{:.0}% prediction intervals ({})\n{:<18}{:>10}{:>14}{:>14}{:>10}",
                self.interval_level * 100.0,
                self.interval_method,
                "model",
                "coverage",
                "mean length",
                "median len",
                "n"
            );
            for (m, c) in self.models.iter().zip(&self.coverage) {
                match c {
                    Coverage::Empty => {
                        let _ = writeln!(s, "{m:<18}{:>10}", "no cells");
                    }
                    Coverage::Computed {
                        coverage,
                        mean_length,
                        median_length,
                        n_intervals,
                        ..
                    } => {
                        let _ = writeln!(
                            s,
                            "{m:<18}{coverage:>10.3}{mean_length:>14.4}{median_length:>14.4}{n_intervals:>10}"
                        );
                    }
                }
            }
        }
        s
    }

    /// Machine-readable rows `table,metric,model,value`, with comparison
    /// probabilities under the model name `P(A<B)` / `P(A<=B)`.
    pub fn to_delimited(&self) -> String {
        let mut s = String::from("table,metric,model,value\n");
        let labels = self.comparison_label();
        for r in &self.rows {
            for (m, v) in self.models.iter().zip(&r.of_posterior_mean) {
                let _ = writeln!(s, "of_posterior_mean,{},{m},{v}", r.metric.name());
            }
            for (m, v) in self.models.iter().zip(&r.posterior_mean) {
                let _ = writeln!(s, "posterior_mean,{},{m},{v}", r.metric.name());
            }
            if let (Some(c), Some((a, b))) = (r.comparison, &labels) {
                let _ = writeln!(s, "posterior_mean,{},{a},{}", r.metric.name(), c.p_less);
                let _ = writeln!(s, "posterior_mean,{},{b},{}", r.metric.name(), c.p_less_equal);
            }
        }
        for (m, c) in self.models.iter().zip(&self.coverage) {
            match c {
                Coverage::Empty => {
                    let _ = writeln!(s, "coverage,status,{m},empty");
                }
                Coverage::Computed {
                    coverage,
                    mean_length,
                    median_length,
                    n_intervals,
                    ..
                } => {
                    let _ = writeln!(s, "coverage,coverage,{m},{coverage}");
                    let _ = writeln!(s, "coverage,mean_length,{m},{mean_length}");
                    let _ = writeln!(s, "coverage,median_length,{m},{median_length}");
                    let _ = writeln!(s, "coverage,n_intervals,{m},{n_intervals}");
                }
            }
        }
        s
    }
}

pub struct HoldoutOutcome {
    pub split: Split,
    pub fits: Vec<ChainOutput>,
    pub report: ScoreReport,
}

/// Splits the data, fits every configured model on the training part (in
/// parallel) and scores them on the held-out part.
pub fn run_holdout_experiment(
    dataset: &Dataset,
    grid: &GridSpec,
    holdout: &HoldoutConfig,
    configs: &[SamplerConfig],
) -> Result<HoldoutOutcome> {
    let design = HoldoutDesign::from_config(holdout);
    let split = design.split(dataset, grid)?;
    let fits: Vec<ChainOutput> = configs
        .par_iter()
        .map(|c| run_chain(&split.training, grid, c))
        .collect::<Result<_>>()?;
    let models: Vec<(&str, &PosteriorSamples)> = configs
        .iter()
        .zip(&fits)
        .map(|(c, f)| (c.model.as_str(), &f.samples))
        .collect();
    let report = ScoreReport::compute(
        &split.heldout,
        &models,
        design.kind == HoldoutKind::FullCell,
        holdout,
        &design.describe(),
    )?;
    Ok(HoldoutOutcome { split, fits, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaxonRegistry;

    fn counts(cells: Vec<(usize, Vec<u32>)>, p: usize) -> CellCounts {
        CellCounts::new(cells, p).unwrap()
    }

    #[test]
    fn brier_examples() {
        let h = counts(vec![(0, vec![1, 0])], 2);
        assert_eq!(brier(&h, &[1.0, 0.0], 2).unwrap(), 0.0);
        assert!((brier(&h, &[0.5, 0.5], 2).unwrap() - 0.5).abs() < 1e-15);
        // 3 trees: (1,0) at θ=(.7,.3) twice-ish and (0,1) at θ=(.2,.8)
        let h = counts(vec![(0, vec![2, 0]), (1, vec![0, 1])], 2);
        let t = [0.7, 0.3, 0.2, 0.8];
        let expect = (2.0 * (0.09 + 0.09) + (0.04 + 0.04)) / 3.0;
        assert!((brier(&h, &t, 2).unwrap() - expect).abs() < 1e-12);
        assert!(brier(&counts(vec![(5, vec![1, 0])], 2), &t, 2).is_err());
    }

    #[test]
    fn log_density_examples() {
        let h = counts(vec![(0, vec![1, 0])], 2);
        assert_eq!(neg_log_predictive_density(&h, &[1.0, 0.0], 2, 1e-5).unwrap(), 0.0);
        assert_eq!(neg_log_predictive_density(&h, &[0.0, 1.0], 2, 1e-5).unwrap(), -(1e-5f64).ln());
        let h = counts(vec![(0, vec![1, 1])], 2);
        assert!((neg_log_predictive_density(&h, &[0.5, 0.5], 2, 1e-5).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn error_examples() {
        let h = counts(vec![(0, vec![2, 0])], 2);
        assert!((weighted_mae(&h, &[0.5, 0.5], 2).unwrap() - 0.5).abs() < 1e-15);
        assert!((weighted_rmspe(&h, &[0.5, 0.5], 2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(weighted_mae(&h, &[1.0, 0.0], 2).unwrap(), 0.0);
        assert!(weighted_rmspe(&counts(vec![], 2), &[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn comparison_examples() {
        let a = [1.0, 2.0, 3.0];
        let c = compare(&a, &a).unwrap();
        assert_eq!((c.p_less, c.p_less_equal), (0.0, 1.0));
        assert_eq!(compare(&[0.0, 1.0], &[1.0, 2.0]).unwrap().p_less, 1.0);
        assert!(compare(&[0.0], &[1.0, 2.0]).is_err());
    }

    fn samples(theta: Vec<f64>, nx: usize, p: usize) -> PosteriorSamples {
        PosteriorSamples::new(GridSpec::new(nx, 1, 0).unwrap(), TaxonRegistry::numbered(p), 100, theta).unwrap()
    }

    #[test]
    fn coverage_cases() {
        let h = counts(vec![(0, vec![600, 400])], 2);
        let s = samples([0.6, 0.4].repeat(50), 1, 2);
        match interval_coverage(&h, &s, 0.95, 50, IntervalMethod::Theta, 1).unwrap() {
            Coverage::Computed { coverage, mean_length, .. } => {
                assert_eq!(coverage, 1.0);
                assert_eq!(mean_length, 0.0);
            }
            Coverage::Empty => panic!(),
        }
        match interval_coverage(&h, &s, 0.95, 50, IntervalMethod::Binomial, 1).unwrap() {
            Coverage::Computed { coverage, mean_length, low_sample_warning, .. } => {
                assert_eq!(coverage, 1.0);
                assert!(mean_length > 0.0 && !low_sample_warning);
            }
            Coverage::Empty => panic!(),
        }
        let small = counts(vec![(0, vec![3, 4])], 2);
        assert_eq!(interval_coverage(&small, &s, 0.95, 50, IntervalMethod::Binomial, 1).unwrap(), Coverage::Empty);
        let one = samples(vec![0.6, 0.4], 1, 2);
        assert!(matches!(
            interval_coverage(&h, &one, 0.95, 50, IntervalMethod::Binomial, 1).unwrap(),
            Coverage::Computed { low_sample_warning: true, .. }
        ));
    }

    fn dataset() -> (Dataset, GridSpec) {
        let g = GridSpec::new(4, 4, 0).unwrap();
        let cells = (0..16).map(|c| (c, vec![c as u32 % 5 + 1, 3])).collect();
        (
            Dataset {
                taxa: TaxonRegistry::numbered(2),
                counts: counts(cells, 2),
                townships: vec![],
            },
            g,
        )
    }

    #[test]
    fn full_cell_split_partitions_data() {
        let (d, g) = dataset();
        let design = HoldoutDesign { kind: HoldoutKind::FullCell, fraction: 0.5, region: Some([0, 0, 2, 4]), seed: 3 };
        let s = design.split(&d, &g).unwrap();
        assert_eq!(s.heldout.cells.len(), 4);
        assert_eq!(s.training.counts.cells.len(), 12);
        assert_eq!(s.heldout.total_trees() + s.training.counts.total_trees(), d.counts.total_trees());
        for (c, y) in &s.heldout.cells {
            assert!(g.data_coords(*c).0 < 2);
            assert_eq!(d.counts.get(*c).unwrap(), y.as_slice());
            assert!(s.training.counts.get(*c).is_none());
        }
        assert_eq!(design.split(&d, &g).unwrap().heldout, s.heldout);
    }

    #[test]
    fn per_tree_split_partitions_trees() {
        let (d, g) = dataset();
        let design = HoldoutDesign { kind: HoldoutKind::PerTree, fraction: 0.1, region: None, seed: 4 };
        let s = design.split(&d, &g).unwrap();
        let total = d.counts.total_trees();
        assert_eq!(s.heldout.total_trees(), (0.1 * total as f64).round() as u64);
        for (c, y) in &d.counts.cells {
            let held = s.heldout.get(*c).map(|v| v.to_vec()).unwrap_or(vec![0, 0]);
            let train = s.training.counts.get(*c).map(|v| v.to_vec()).unwrap_or(vec![0, 0]);
            for q in 0..2 {
                assert_eq!(held[q] + train[q], y[q]);
            }
        }
        let zero = HoldoutDesign { fraction: 0.0, ..design };
        assert!(zero.split(&d, &g).is_err());
    }

    #[test]
    fn toy_experiment_smoke() {
        let g = GridSpec::new(2, 2, 0).unwrap();
        let d = Dataset {
            taxa: TaxonRegistry::numbered(2),
            counts: counts(vec![(0, vec![3, 1]), (1, vec![2, 2]), (2, vec![1, 3]), (3, vec![4, 0])], 2),
            townships: vec![],
        };
        let ho = HoldoutConfig { kind: HoldoutKind::PerTree, fraction: 0.5, ..Default::default() };
        let cfgs: Vec<SamplerConfig> = ["car", "spde"]
            .iter()
            .map(|m| SamplerConfig { model: m.to_string(), n_iter: 40, burn_in: 20, n_retained: 10, t_mc: 200, ..Default::default() })
            .collect();
        let out = run_holdout_experiment(&d, &g, &ho, &cfgs).unwrap();
        for r in &out.report.rows {
            assert!(r.of_posterior_mean.iter().chain(&r.posterior_mean).all(|v| v.is_finite()));
            let c = r.comparison.unwrap();
            assert!((0.0..=1.0).contains(&c.p_less) && c.p_less <= c.p_less_equal);
        }
        assert!(out.report.to_text().contains("P(car<spde)"));
        assert!(out.report.to_delimited().lines().count() > 4);
    }
}
