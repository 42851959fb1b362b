//! Sparse machinery checked against dense linear algebra.

use std::sync::Arc;

use compmap::grid::{nested_dissection_order, GridSpec, NeighborGraph, NeighborOrder};
use compmap::precision::{build_car_structure, build_spde_structure};
use compmap::prior::{CarPrior, HyperParams, IndependentPrior, SpatialPrior, SpdePrior};
use compmap::sampler::{gibbs_alpha, marginal_logdensity_w};
use compmap::simulate::draw_prior_field;
use compmap::sparse::{CholeskyFactor, SparseSym, SymbolicCholesky};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense(m: &SparseSym) -> DMatrix<f64> {
    let rows = m.to_dense();
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

fn sorted_eigenvalues(m: DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn hyper(sigma: f64, rho: f64, mu: f64) -> HyperParams {
    HyperParams {
        log_sigma: sigma.ln(),
        log_rho: rho.ln(),
        mu,
    }
}

#[test]
fn car_null_space_is_the_constant_vector() {
    for (nx, ny, buffer) in [(7, 4, 0), (5, 5, 2), (1, 9, 1)] {
        let grid = GridSpec::new(nx, ny, buffer).unwrap();
        let graph = NeighborGraph::build(&grid, NeighborOrder::Cardinal);
        let q = dense(&build_car_structure(&graph).unwrap());
        assert_eq!(q, q.transpose());
        let ev = sorted_eigenvalues(q.clone());
        assert!(ev[0].abs() < 1e-10, "{nx}x{ny}+{buffer}: {}", ev[0]);
        assert!(ev[1] > 1e-6);
        let ones = DVector::from_element(q.nrows(), 1.0);
        assert!((&q * ones).amax() == 0.0);
    }
}

#[test]
fn spde_log_determinant_matches_dense_cholesky() {
    let grid = GridSpec::new(6, 5, 1).unwrap();
    let prior = SpdePrior::new(&grid).unwrap();
    for (sigma, rho) in [(0.5, 0.3), (1.0, 1.0), (2.0, 4.0), (0.8, 25.0)] {
        let eval = prior.evaluate(&hyper(sigma, rho, 0.0)).unwrap();
        let q = dense(&eval.precision);
        let chol = q.clone().cholesky().expect("SPD");
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        assert!((eval.log_det - logdet).abs() < 1e-8 * logdet.abs().max(1.0), "{rho}");
        let row_sums = &q * DVector::from_element(q.nrows(), 1.0);
        for (a, b) in eval.row_sums.iter().zip(row_sums.iter()) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }
}

#[test]
fn icar_log_determinant_differences_match_nonzero_spectrum() {
    let grid = GridSpec::new(5, 4, 0).unwrap();
    let prior = CarPrior::new(&grid).unwrap();
    let spectrum = |sigma: f64| -> f64 {
        let q = dense(&prior.evaluate(&hyper(sigma, 1.0, 0.0)).unwrap().precision);
        sorted_eigenvalues(q)[1..].iter().map(|l| l.ln()).sum()
    };
    let ld = |sigma: f64| prior.evaluate(&hyper(sigma, 1.0, 0.0)).unwrap().log_det;
    for (a, b) in [(1.0, 0.3), (0.5, 2.0), (3.0, 7.0)] {
        let expect = spectrum(a) - spectrum(b);
        assert!((ld(a) - ld(b) - expect).abs() < 1e-9, "{a} {b}");
    }
}

/// Trees per model cell and their latent values, with empty cells.
fn tree_fixture(n_cells: usize, seed: u64) -> (Vec<usize>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut cell_of = Vec::new();
    for c in 0..n_cells {
        for _ in 0..r.random_range(0..4usize) {
            cell_of.push(c);
        }
    }
    let w = (0..cell_of.len()).map(|_| r.random_range(-2.0..2.0)).collect();
    (cell_of, w)
}

/// Log density of `w ~ N(μ B1, I + B Q⁻¹ Bᵀ)` evaluated through a dense
/// eigendecomposition of the covariance. `ridge` makes intrinsic precisions
/// invertible.
fn dense_marginal(q: &DMatrix<f64>, ridge: f64, mu: f64, cell_of: &[usize], w: &[f64]) -> f64 {
    let m = q.nrows();
    let n = w.len();
    let qe = SymmetricEigen::new(q + DMatrix::identity(m, m) * ridge);
    let cov_alpha = &qe.eigenvectors
        * DMatrix::from_diagonal(&qe.eigenvalues.map(|l| 1.0 / l))
        * qe.eigenvectors.transpose();
    let b = DMatrix::from_fn(n, m, |i, c| if cell_of[i] == c { 1.0 } else { 0.0 });
    let s = DMatrix::identity(n, n) + &b * cov_alpha * b.transpose();
    let se = SymmetricEigen::new(s);
    let r = DVector::from_iterator(n, w.iter().map(|v| v - mu));
    let proj = se.eigenvectors.transpose() * r;
    let quad: f64 = proj.iter().zip(se.eigenvalues.iter()).map(|(p, l)| p * p / l).sum();
    let logdet: f64 = se.eigenvalues.iter().map(|l| l.ln()).sum();
    -0.5 * logdet - 0.5 * quad
}

fn summarize_trees(m: usize, cell_of: &[usize], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut counts = vec![0.0; m];
    let mut sum_w = vec![0.0; m];
    for (&c, &v) in cell_of.iter().zip(w) {
        counts[c] += 1.0;
        sum_w[c] += v;
    }
    (counts, sum_w)
}

fn check_marginal(prior: &dyn SpatialPrior, settings: &[HyperParams], ridge: f64, tol: f64) {
    let m = prior.n_cells();
    let (cell_of, w) = tree_fixture(m, 11);
    let (counts, sum_w) = summarize_trees(m, &cell_of, &w);
    let values: Vec<(f64, f64)> = settings
        .iter()
        .map(|h| {
            let q = dense(&prior.evaluate(h).unwrap().precision);
            let mu = if prior.has_mean() { h.mu } else { 0.0 };
            (
                marginal_logdensity_w(prior, h, &counts, &sum_w).unwrap(),
                dense_marginal(&q, ridge, mu, &cell_of, &w),
            )
        })
        .collect();
    for pair in values.windows(2) {
        let (got, expect) = (pair[0].0 - pair[1].0, pair[0].1 - pair[1].1);
        assert!((got - expect).abs() < tol, "{}: {got} vs {expect}", prior.name());
    }
}

#[test]
fn marginal_density_matches_dense_gaussian() {
    let grid = GridSpec::new(4, 3, 0).unwrap();
    let spde = [hyper(1.0, 2.0, 0.0), hyper(0.4, 0.7, 0.5), hyper(2.5, 6.0, -1.0), hyper(1.0, 2.0, 1.3)];
    check_marginal(&SpdePrior::new(&grid).unwrap(), &spde, 0.0, 1e-8);
    let sig = [hyper(1.0, 1.0, 0.0), hyper(0.2, 1.0, 0.0), hyper(4.0, 1.0, 0.0)];
    check_marginal(&IndependentPrior::new(&grid).unwrap(), &sig, 0.0, 1e-8);
    // the intrinsic direction is flat under every σ, so a tiny ridge only
    // shifts all values by the same amount
    check_marginal(&CarPrior::new(&grid).unwrap(), &sig, 1e-7, 1e-5);
}

#[test]
fn gibbs_draws_have_the_dense_conditional_moments() {
    let grid = GridSpec::new(3, 3, 0).unwrap();
    let prior = SpdePrior::new(&grid).unwrap();
    let h = hyper(0.8, 1.5, 0.4);
    let (cell_of, w) = tree_fixture(9, 5);
    let (counts, sum_w) = summarize_trees(9, &cell_of, &w);

    let q = dense(&prior.evaluate(&h).unwrap().precision);
    let prec = &q + DMatrix::from_diagonal(&DVector::from_vec(counts.clone()));
    let b = DVector::from_vec(sum_w.clone()) + &q * DVector::from_element(9, h.mu);
    let cov = prec.clone().try_inverse().unwrap();
    let mean = &cov * b;

    let n = 20_000;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut sum = DVector::zeros(9);
    let mut sq = DVector::zeros(9);
    for _ in 0..n {
        let a = DVector::from_vec(gibbs_alpha(&prior, &h, &counts, &sum_w, &mut r).unwrap());
        sq += a.component_mul(&a);
        sum += a;
    }
    for c in 0..9 {
        let m = sum[c] / n as f64;
        let v = sq[c] / n as f64 - m * m;
        let se = (cov[(c, c)] / n as f64).sqrt();
        assert!((m - mean[c]).abs() < 4.5 * se, "cell {c}: mean {m} vs {}", mean[c]);
        assert!((v / cov[(c, c)] - 1.0).abs() < 0.05, "cell {c}: var {v} vs {}", cov[(c, c)]);
    }
}

#[test]
fn prior_draws_have_the_dense_covariance() {
    let grid = GridSpec::new(4, 4, 0).unwrap();
    let prior = SpdePrior::new(&grid).unwrap();
    let h = hyper(1.3, 2.0, -0.5);
    let cov = dense(&prior.evaluate(&h).unwrap().precision).try_inverse().unwrap();
    let n = 20_000;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let draws: Vec<Vec<f64>> = (0..n).map(|_| draw_prior_field(&prior, &h, &mut r).unwrap()).collect();
    for (i, j) in [(0, 0), (5, 5), (0, 1), (5, 10), (0, 15)] {
        let mi = draws.iter().map(|d| d[i]).sum::<f64>() / n as f64;
        let mj = draws.iter().map(|d| d[j]).sum::<f64>() / n as f64;
        let c = draws.iter().map(|d| (d[i] - mi) * (d[j] - mj)).sum::<f64>() / n as f64;
        let scale = (cov[(i, i)] * cov[(j, j)]).sqrt();
        assert!((c - cov[(i, j)]).abs() < 0.05 * scale, "({i},{j}): {c} vs {}", cov[(i, j)]);
        assert!((mi + 0.5).abs() < 4.5 * (cov[(i, i)] / n as f64).sqrt());
    }
}

/// A random diagonally dominant matrix on a grid graph with long-range links.
fn random_spd(nx: usize, ny: usize, seed: u64) -> (GridSpec, SparseSym) {
    let grid = GridSpec::new(nx, ny, 0).unwrap();
    let graph = NeighborGraph::build(&grid, NeighborOrder::Extended);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Vec::new();
    let mut diag = vec![0.1; grid.n_cells()];
    for i in 0..grid.n_cells() {
        for nb in graph.neighbors(i) {
            if nb.cell > i {
                let v: f64 = r.random_range(-1.0..1.0);
                t.push((i, nb.cell, v));
                t.push((nb.cell, i, v));
                diag[i] += v.abs();
                diag[nb.cell] += v.abs();
            }
        }
    }
    t.extend(diag.iter().enumerate().map(|(i, &d)| (i, i, d)));
    let n = grid.n_cells();
    (grid, SparseSym::from_triplets(n, &t).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cholesky_agrees_with_dense(nx in 1usize..9, ny in 1usize..9, seed in 0u64..1000, nd in any::<bool>()) {
        let (grid, a) = random_spd(nx, ny, seed);
        let perm = nd.then(|| nested_dissection_order(&grid, 2));
        let sym = Arc::new(SymbolicCholesky::analyze(&a, perm.as_deref()).unwrap());
        let f = CholeskyFactor::factorize(sym, &a).unwrap();
        let d = dense(&a);
        let chol = d.clone().cholesky().unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        prop_assert!((f.logdet() - logdet).abs() < 1e-9 * logdet.abs().max(1.0));
        let b: Vec<f64> = (0..a.dim()).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = f.solve(&b);
        let expect = chol.solve(&DVector::from_vec(b.clone()));
        for (u, v) in x.iter().zip(expect.iter()) {
            prop_assert!((u - v).abs() < 1e-9 * v.abs().max(1.0));
        }
        let quad: f64 = b.iter().zip(expect.iter()).map(|(p, q)| p * q).sum();
        prop_assert!((f.inv_quad_form(&b) - quad).abs() < 1e-9 * quad.abs().max(1.0));
    }

    #[test]
    fn spde_structure_is_positive_definite(rho in 0.05f64..50.0, nx in 1usize..7, ny in 1usize..7) {
        let grid = GridSpec::new(nx, ny, 0).unwrap();
        let graph = NeighborGraph::build(&grid, NeighborOrder::Extended);
        let q = dense(&build_spde_structure(&graph, rho).unwrap());
        prop_assert!(sorted_eigenvalues(q)[0] > 0.0);
    }
}
