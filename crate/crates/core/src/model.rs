//! Data-facing model types: taxa, per-cell counts, township tree records,
//! hyperprior bounds and the probit link.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::grid::TownshipOverlap;
use crate::normal;

/// Taxon names fixed at ingestion; all matrices use the index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonRegistry {
    names: Vec<String>,
}

impl TaxonRegistry {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("at least one taxon is required"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::invalid("empty taxon name"));
            }
            if names[..i].contains(n) {
                return Err(Error::invalid(format!("duplicate taxon name {n:?}")));
            }
        }
        Ok(TaxonRegistry { names })
    }

    /// `taxon1..taxonP`.
    pub fn numbered(p: usize) -> Self {
        TaxonRegistry {
            names: (1..=p).map(|i| format!("taxon{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Per-cell taxon counts on the data grid. Cells not listed have no data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CellCounts {
    /// `(data-space cell index, counts per taxon)`, sorted by cell.
    pub cells: Vec<(usize, Vec<u32>)>,
}

impl CellCounts {
    pub fn new(mut cells: Vec<(usize, Vec<u32>)>, n_taxa: usize) -> Result<Self> {
        cells.sort_by_key(|c| c.0);
        for w in cells.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(format!("duplicate cell {}", w[0].0)));
            }
        }
        if let Some((c, y)) = cells.iter().find(|(_, y)| y.len() != n_taxa) {
            return Err(Error::invalid(format!(
                "cell {c} has {} counts, expected {n_taxa}",
                y.len()
            )));
        }
        Ok(CellCounts { cells })
    }

    pub fn total_trees(&self) -> u64 {
        self.cells
            .iter()
            .map(|(_, y)| y.iter().map(|&v| v as u64).sum::<u64>())
            .sum()
    }

    pub fn get(&self, cell: usize) -> Option<&[u32]> {
        self.cells
            .binary_search_by_key(&cell, |c| c.0)
            .ok()
            .map(|i| self.cells[i].1.as_slice())
    }
}

/// Trees recorded at township level with their cell-overlap weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Township {
    pub overlap: TownshipOverlap,
    /// Taxon index of every tree.
    pub trees: Vec<usize>,
}

impl Township {
    pub fn id(&self) -> &str {
        &self.overlap.township_id
    }
}

/// Everything the sampler conditions on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub taxa: TaxonRegistry,
    pub counts: CellCounts,
    pub townships: Vec<Township>,
}

impl Dataset {
    pub fn n_taxa(&self) -> usize {
        self.taxa.len()
    }

    pub fn validate(&self, n_data_cells: usize) -> Result<()> {
        let p = self.n_taxa();
        for (c, y) in &self.counts.cells {
            if *c >= n_data_cells {
                return Err(Error::invalid(format!("cell {c} outside the grid")));
            }
            if y.len() != p {
                return Err(Error::invalid(format!("cell {c}: wrong number of taxa")));
            }
        }
        for t in &self.townships {
            if t.trees.is_empty() {
                return Err(Error::invalid(format!("township {} has no trees", t.id())));
            }
            if let Some(&bad) = t.trees.iter().find(|&&q| q >= p) {
                return Err(Error::invalid(format!(
                    "township {}: taxon index {bad} out of range",
                    t.id()
                )));
            }
            if let Some((c, _)) = t.overlap.entries.iter().find(|e| e.0 >= n_data_cells) {
                return Err(Error::invalid(format!(
                    "township {}: cell {c} outside the grid",
                    t.id()
                )));
            }
        }
        Ok(())
    }

    pub fn total_trees(&self) -> u64 {
        self.counts.total_trees() + self.townships.iter().map(|t| t.trees.len() as u64).sum::<u64>()
    }
}

/// Bounds of the uniform hyperpriors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperpriors {
    /// Upper bound of the uniform prior on σ.
    pub sigma_upper: f64,
    /// μ is flat on `(−mu_bound, mu_bound)`.
    pub mu_bound: f64,
    pub rho_lower: f64,
    pub rho_upper: f64,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Hyperpriors {
            sigma_upper: 1000.0,
            mu_bound: 10.0,
            rho_lower: 0.1,
            rho_upper: 5f64.exp(),
        }
    }
}

impl Hyperpriors {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.sigma_upper, self.mu_bound, self.rho_lower, self.rho_upper]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive {
            return Err(Error::Config("hyperprior bounds must be positive and finite".into()));
        }
        if self.rho_lower >= self.rho_upper {
            return Err(Error::Config("rho_lower must be below rho_upper".into()));
        }
        Ok(())
    }
}

/// Log multinomial probability of `y` under `theta`, including the
/// multinomial coefficient. Returns `−∞` when a positive count meets a zero
/// probability.
pub fn multinomial_log_pmf(y: &[u32], theta: &[f64]) -> Result<f64> {
    if y.len() != theta.len() {
        return Err(Error::invalid(format!(
            "count vector has {} entries, probability vector {}",
            y.len(),
            theta.len()
        )));
    }
    let n: u64 = y.iter().map(|&v| v as u64).sum();
    let mut lp = ln_factorial(n);
    for (&k, &t) in y.iter().zip(theta) {
        if k == 0 {
            continue;
        }
        if t <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        lp += k as f64 * t.ln() - ln_factorial(k as u64);
    }
    Ok(lp)
}

/// `ln n!`, exact zero for `n ≤ 1`.
pub fn ln_factorial(n: u64) -> f64 {
    match n {
        0 | 1 => 0.0,
        2..=64 => (2..=n).map(|k| (k as f64).ln()).sum(),
        _ => ln_gamma(n as f64 + 1.0),
    }
}

/// `θ₁ = Φ((α₁ − α₂)/√2)` for two taxa.
pub fn probit_theta_closed_form_p2(alpha1: f64, alpha2: f64) -> f64 {
    normal::cdf((alpha1 - alpha2) / std::f64::consts::SQRT_2)
}

/// Category probabilities of the probit link for any number of taxa by
/// one-dimensional quadrature:
/// `θ_p = ∫ φ(x − α_p) ∏_{q≠p} Φ(x − α_q) dx`.
pub fn probit_theta_quadrature(alpha: &[f64]) -> Vec<f64> {
    let p = alpha.len();
    if p == 1 {
        return vec![1.0];
    }
    let lo = alpha.iter().cloned().fold(f64::INFINITY, f64::min) - 9.0;
    let hi = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 9.0;
    let mut steps = (((hi - lo) / 0.005).ceil() as usize).max(2000);
    steps += steps % 2;
    let h = (hi - lo) / steps as f64;
    let mut theta = vec![0.0; p];
    let mut cdfs = vec![0.0; p];
    // Simpson's rule
    for k in 0..=steps {
        let x = lo + k as f64 * h;
        let w = if k == 0 || k == steps {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        for (c, a) in cdfs.iter_mut().zip(alpha) {
            *c = normal::cdf(x - a);
        }
        for (q, t) in theta.iter_mut().enumerate() {
            let mut prod = normal::pdf(x - alpha[q]);
            for (r, c) in cdfs.iter().enumerate() {
                if r != q {
                    prod *= c;
                }
            }
            *t += w * prod;
        }
    }
    let total: f64 = theta.iter().sum();
    theta.iter().map(|t| t / total).collect()
}

/// Index of the largest entry; exact ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_pmf_examples() {
        assert_eq!(multinomial_log_pmf(&[1, 0], &[1.0, 0.0]).unwrap(), 0.0);
        let v = multinomial_log_pmf(&[1, 1], &[0.5, 0.5]).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(multinomial_log_pmf(&[0, 0, 0], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        assert!((ln_factorial(10) - 3_628_800f64.ln()).abs() < 1e-12);
        assert!((ln_factorial(65) - ln_gamma(66.0)).abs() < 1e-9);
        assert_eq!(
            multinomial_log_pmf(&[0, 2], &[1.0, 0.0]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(multinomial_log_pmf(&[1], &[0.5, 0.5]).is_err());
    }

    fn compositions(n: u32, p: usize) -> Vec<Vec<u32>> {
        if p == 1 {
            return vec![vec![n]];
        }
        let mut out = Vec::new();
        for k in 0..=n {
            for mut rest in compositions(n - k, p - 1) {
                rest.insert(0, k);
                out.push(rest);
            }
        }
        out
    }

    #[test]
    fn log_pmf_normalises_by_enumeration() {
        for (n, theta) in [(0, vec![0.3, 0.7]), (3, vec![0.2, 0.8]), (4, vec![0.1, 0.6, 0.3])] {
            let total: f64 = compositions(n, theta.len())
                .iter()
                .map(|y| multinomial_log_pmf(y, &theta).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_p2() {
        assert_eq!(probit_theta_closed_form_p2(0.3, 0.3), 0.5);
        let v = probit_theta_closed_form_p2(std::f64::consts::SQRT_2, 0.0);
        assert!((v - 0.841_345).abs() < 1e-6);
        assert!(probit_theta_closed_form_p2(-40.0, 0.0) < 1e-100);
    }

    #[test]
    fn quadrature_matches_closed_form() {
        for d in [-2.0, -0.5, 0.0, 1.0, 3.0] {
            let q = probit_theta_quadrature(&[d, 0.0]);
            assert!((q[0] - probit_theta_closed_form_p2(d, 0.0)).abs() < 1e-10);
        }
        let q = probit_theta_quadrature(&[0.4, 0.4, 0.4]);
        for t in q {
            assert!((t - 1.0 / 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn registry_rejects_duplicates() {
        assert!(TaxonRegistry::new(vec!["oak".into(), "oak".into()]).is_err());
        assert!(TaxonRegistry::new(vec![]).is_err());
        let r = TaxonRegistry::new(vec!["oak".into(), "pine".into()]).unwrap();
        assert_eq!(r.index_of("pine"), Some(1));
    }

    #[test]
    fn hyperprior_defaults() {
        let h = Hyperpriors::default();
        assert_eq!(h.sigma_upper, 1000.0);
        assert_eq!(h.mu_bound, 10.0);
        assert_eq!(h.rho_lower, 0.1);
        assert!((h.rho_upper - 148.413).abs() < 1e-3);
        h.validate().unwrap();
        assert!(Hyperpriors { rho_lower: 200.0, ..h }.validate().is_err());
    }
}
