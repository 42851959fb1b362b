//! Precision matrices of the lattice Gaussian Markov random field priors.
//!
//! Two spatial structures are provided:
//!
//! * the intrinsic CAR structure `Q = D − C` over cardinal neighbours
//!   (rank `m − 1`, zero row sums);
//! * the SPDE stencil approximating a Matérn field with smoothness 1, with
//!   `a = 4 + 1/ρ²`, diagonal `4 + a²`, cardinal `−2a`, diagonal neighbours
//!   `2` and second-order cardinal neighbours `1`.
//!
//! Stencil entries that fall outside the modelled grid are dropped while the
//! diagonal keeps its interior value; the truncated matrix is still SPD
//! because it dominates `(aI − C)²`.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{NeighborClass, NeighborGraph, NeighborOrder};
use crate::sparse::SparseSym;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrecisionKind {
    Car,
    Spde,
    /// Exchangeable cells, `Q = I`. Useful on graphs without edges.
    Independent,
}

/// A spatial precision with its current hyperparameters.
#[derive(Debug, Clone)]
pub struct PrecisionModel {
    pub kind: PrecisionKind,
    pub graph: Arc<NeighborGraph>,
    pub sigma2: f64,
    pub rho: f64,
    pub mu: f64,
}

impl PrecisionModel {
    /// The unscaled structure matrix (`Q` or `Q(ρ)`).
    pub fn structure(&self) -> Result<SparseSym> {
        match self.kind {
            PrecisionKind::Car => build_car_structure(&self.graph),
            PrecisionKind::Spde => build_spde_structure(&self.graph, self.rho),
            PrecisionKind::Independent => Ok(SparseSym::identity(self.graph.n_cells())),
        }
    }

    /// Factor multiplying the structure matrix to give `Q_p`.
    pub fn precision_scale(&self) -> Result<f64> {
        check_sigma2(self.sigma2)?;
        Ok(match self.kind {
            PrecisionKind::Car | PrecisionKind::Independent => 1.0 / self.sigma2,
            PrecisionKind::Spde => {
                check_rho(self.rho)?;
                spde_scale(self.sigma2, self.rho)
            }
        })
    }

    /// `Q_p`: `Q/σ²` for CAR, `Q(ρ)·ρ²/(4πσ²)` for SPDE.
    pub fn effective_precision(&self) -> Result<SparseSym> {
        let scale = self.precision_scale()?;
        Ok(self.structure()?.scaled(scale))
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::invalid(format!("sigma^2 must be positive, got {sigma2}")));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    Ok(())
}

/// `(σ² · 4π/ρ²)⁻¹`.
pub fn spde_scale(sigma2: f64, rho: f64) -> f64 {
    rho * rho / (4.0 * PI * sigma2)
}

/// Assembles a symmetric matrix over a graph from a diagonal value and a
/// per-class off-diagonal weight, directly in CSR order.
fn assemble(
    graph: &NeighborGraph,
    diag: impl Fn(usize) -> f64,
    weight: impl Fn(NeighborClass) -> f64,
) -> SparseSym {
    let n = graph.n_cells();
    let mut triplets = Vec::with_capacity(n * 13);
    for i in 0..n {
        triplets.push((i, i, diag(i)));
        for nb in graph.neighbors(i) {
            triplets.push((i, nb.cell, weight(nb.class)));
        }
    }
    SparseSym::from_triplets(n, &triplets).expect("graph indices are in range")
}

/// ICAR structure `D − C` over a cardinal graph.
pub fn build_car_structure(graph: &NeighborGraph) -> Result<SparseSym> {
    if graph.order != NeighborOrder::Cardinal {
        return Err(Error::invalid("CAR structure needs a cardinal neighbour graph"));
    }
    Ok(assemble(
        graph,
        |i| graph.degree(i, NeighborClass::Cardinal) as f64,
        |_| -1.0,
    ))
}

/// SPDE stencil `Q(ρ)` over an extended graph.
pub fn build_spde_structure(graph: &NeighborGraph, rho: f64) -> Result<SparseSym> {
    if graph.order != NeighborOrder::Extended {
        return Err(Error::invalid("SPDE structure needs an extended neighbour graph"));
    }
    check_rho(rho)?;
    let a = 4.0 + 1.0 / (rho * rho);
    Ok(assemble(
        graph,
        |_| 4.0 + a * a,
        |class| match class {
            NeighborClass::Cardinal => -2.0 * a,
            NeighborClass::Diagonal => 2.0,
            NeighborClass::SecondOrder => 1.0,
        },
    ))
}

/// Generalised log-determinant of the scaled ICAR precision, `(m−1)·log(1/σ²)`.
/// The pattern-dependent constant `log gdet(Q)` is fixed at 0.
pub fn generalized_logdet_icar(sigma2: f64, m: usize) -> Result<f64> {
    check_sigma2(sigma2)?;
    Ok(m.saturating_sub(1) as f64 * (1.0 / sigma2).ln())
}

/// Modified Bessel function of the second kind, `K_ν(x)` for `x > 0`, via
/// the integral `∫₀^∞ exp(−x cosh t) cosh(νt) dt` (trapezoid rule, which
/// converges geometrically for this integrand).
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0);
    // exp(-x cosh t) < e^-745 beyond this point
    let t_max = ((745.0 + nu.abs() * 50.0) / x).acosh().max(1.0);
    let steps = ((t_max / 0.005).ceil() as usize).max(200);
    let h = t_max / steps as f64;
    let f = |t: f64| (-x * t.cosh() + (nu * t).abs()).exp() * 0.5 * (1.0 + (-2.0 * (nu * t).abs()).exp());
    let mut sum = 0.5 * (f(0.0) + f(t_max));
    for k in 1..steps {
        sum += f(k as f64 * h);
    }
    sum * h
}

/// Matérn correlation `R(d)` with range `ρ` and smoothness `ν`, in the
/// parameterisation whose argument is `2√ν·d/ρ`.
pub fn matern_correlation(d: f64, rho: f64, nu: f64) -> Result<f64> {
    if !(d >= 0.0 && d.is_finite()) || !(rho > 0.0) || !(nu > 0.0) {
        return Err(Error::invalid(format!(
            "matern parameters out of range: d={d}, rho={rho}, nu={nu}"
        )));
    }
    let z = 2.0 * nu.sqrt() * d / rho;
    if z < 1e-12 {
        return Ok(1.0);
    }
    if z > 700.0 {
        return Ok(0.0);
    }
    let norm = statrs::function::gamma::gamma(nu) * 2f64.powf(nu - 1.0);
    let r = z.powf(nu) * bessel_k(nu, z) / norm;
    Ok(r.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn graph(nx: usize, ny: usize, order: NeighborOrder) -> Arc<NeighborGraph> {
        Arc::new(NeighborGraph::build(&GridSpec::new(nx, ny, 0).unwrap(), order))
    }

    #[test]
    fn car_small_grids() {
        let q = build_car_structure(&graph(2, 1, NeighborOrder::Cardinal)).unwrap();
        assert_eq!(q.to_dense(), vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let q = build_car_structure(&graph(2, 2, NeighborOrder::Cardinal)).unwrap();
        assert_eq!(q.diagonal(), vec![2.0; 4]);
        for i in 0..4 {
            assert_eq!(q.row(i).filter(|&(_, v)| v == -1.0).count(), 2);
        }
        let q = build_car_structure(&graph(3, 3, NeighborOrder::Cardinal)).unwrap();
        assert_eq!(q.get(4, 4), 4.0);
        assert_eq!(q.row(4).filter(|&(_, v)| v == -1.0).count(), 4);
        assert!(q.row_sums().iter().all(|&s| s == 0.0));
        assert!(build_car_structure(&graph(3, 3, NeighborOrder::Extended)).is_err());
    }

    #[test]
    fn spde_stencil_values() {
        let g = GridSpec::new(5, 5, 0).unwrap();
        let ng = Arc::new(NeighborGraph::build(&g, NeighborOrder::Extended));
        let q = build_spde_structure(&ng, 1.0).unwrap();
        let c = g.model_index(2, 2);
        assert_eq!(q.get(c, c), 29.0);
        assert_eq!(q.get(c, g.model_index(3, 2)), -10.0);
        assert_eq!(q.get(c, g.model_index(3, 3)), 2.0);
        assert_eq!(q.get(c, g.model_index(2, 4)), 1.0);
        assert_eq!(q.get(c, g.model_index(4, 4)), 0.0);
        // boundary rows keep the interior diagonal
        assert_eq!(q.get(0, 0), 29.0);

        let q = build_spde_structure(&ng, 1e12).unwrap();
        assert!((q.get(c, c) - 20.0).abs() < 1e-12);
        assert!((q.get(c, g.model_index(1, 2)) + 8.0).abs() < 1e-12);
        assert!(build_spde_structure(&ng, 0.0).is_err());
        assert!(build_spde_structure(&ng, -1.0).is_err());
        assert!(build_spde_structure(&graph(3, 3, NeighborOrder::Cardinal), 1.0).is_err());
    }

    #[test]
    fn effective_precision_scaling() {
        let m = PrecisionModel {
            kind: PrecisionKind::Car,
            graph: graph(2, 1, NeighborOrder::Cardinal),
            sigma2: 4.0,
            rho: 1.0,
            mu: 0.0,
        };
        assert_eq!(
            m.effective_precision().unwrap().to_dense(),
            vec![vec![0.25, -0.25], vec![-0.25, 0.25]]
        );
        let unit = PrecisionModel { sigma2: 1.0, ..m.clone() };
        assert_eq!(unit.effective_precision().unwrap(), unit.structure().unwrap());
        assert!(PrecisionModel { sigma2: 0.0, ..m.clone() }.effective_precision().is_err());

        let spde = PrecisionModel {
            kind: PrecisionKind::Spde,
            graph: graph(5, 5, NeighborOrder::Extended),
            sigma2: 1.0,
            rho: 1.0,
            mu: 0.0,
        };
        let qp = spde.effective_precision().unwrap();
        assert!((qp.get(12, 12) - 29.0 / (4.0 * PI)).abs() < 1e-14);
        assert!((qp.get(12, 12) - 2.3077).abs() < 1e-4);
    }

    #[test]
    fn scaling_divides_entries_exactly() {
        let base = PrecisionModel {
            kind: PrecisionKind::Car,
            graph: graph(3, 3, NeighborOrder::Cardinal),
            sigma2: 1.0,
            rho: 1.0,
            mu: 0.0,
        };
        let q1 = base.effective_precision().unwrap();
        let q2 = PrecisionModel { sigma2: 2.0, ..base }.effective_precision().unwrap();
        for (a, b) in q1.values().iter().zip(q2.values()) {
            assert_eq!(a / 2.0, *b);
        }
    }

    #[test]
    fn icar_gdet() {
        assert_eq!(generalized_logdet_icar(1.0, 10).unwrap(), 0.0);
        assert!((generalized_logdet_icar(std::f64::consts::E, 10).unwrap() + 9.0).abs() < 1e-12);
        assert!(generalized_logdet_icar(0.0, 10).is_err());
    }

    #[test]
    fn bessel_reference_values() {
        // Abramowitz & Stegun table 9.8
        assert!((bessel_k(0.0, 1.0) - 0.421_024_438_240_708_3).abs() < 1e-12);
        assert!((bessel_k(1.0, 1.0) - 0.601_907_230_197_234_6).abs() < 1e-12);
        assert!((bessel_k(1.0, 0.1) - 9.853_844_780_870_606).abs() < 1e-9);
        let x = 2.5;
        let half = (PI / (2.0 * x)).sqrt() * (-x).exp();
        assert!((bessel_k(0.5, x) - half).abs() < 1e-13);
    }

    #[test]
    fn matern_properties() {
        assert_eq!(matern_correlation(0.0, 3.0, 1.0).unwrap(), 1.0);
        for d in [0.1, 0.5, 1.0, 3.0, 7.0] {
            let r = matern_correlation(d, 2.0, 0.5).unwrap();
            let exact = (-(2f64.sqrt()) * d / 2.0).exp();
            assert!((r - exact).abs() < 1e-12, "{r} vs {exact}");
        }
        let mut prev = 1.0;
        for k in 1..60 {
            let r = matern_correlation(k as f64 * 0.25, 3.0, 1.0).unwrap();
            assert!(r < prev && r > 0.0);
            prev = r;
        }
        assert!(matern_correlation(1e4, 1.0, 1.0).unwrap() < 1e-300);
        assert!(matern_correlation(1.0, 0.0, 1.0).is_err());
        assert!(matern_correlation(-1.0, 1.0, 1.0).is_err());
        assert!(matern_correlation(1.0, 1.0, 0.0).is_err());
    }
}
