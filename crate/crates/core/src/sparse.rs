//! Symmetric sparse matrices and a sparse Cholesky factorization.
//!
//! The factorization is split into a symbolic phase (fill-reducing order,
//! elimination tree, column counts), computed once per sparsity pattern, and
//! a numeric phase that can be repeated cheaply whenever only the values
//! change. The numeric phase is the up-looking row-by-row algorithm.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Square symmetric matrix stored as full-pattern CSR with sorted columns.
///
/// The diagonal is always part of the pattern, even where its value is 0, so
/// that diagonal updates never change the pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Builds from `(row, col, value)` triplets describing the full matrix;
    /// duplicates are summed. Symmetry is the caller's responsibility and
    /// is checked in debug builds.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 0.0)]).collect();
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::invalid(format!(
                    "entry ({i}, {j}) outside a {n}x{n} matrix"
                )));
            }
            rows[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (j, v) in row {
                if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == j {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        let m = SparseSym {
            n,
            row_ptr,
            col_idx,
            values,
        };
        debug_assert!(m.is_symmetric(0.0), "triplets do not describe a symmetric matrix");
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        SparseSym {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(p) => self.values[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// `1ᵀ M 1`.
    pub fn total_sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `self + diag(d)`, keeping the pattern.
    pub fn plus_diagonal(&self, d: &[f64]) -> Self {
        assert_eq!(d.len(), self.n);
        let mut out = self.clone();
        for (i, &di) in d.iter().enumerate() {
            let r = out.row_ptr[i]..out.row_ptr[i + 1];
            let p = out.col_idx[r.clone()].binary_search(&i).expect("diagonal in pattern");
            out.values[r.start + p] += di;
        }
        out
    }

    pub fn same_pattern(&self, other: &SparseSym) -> bool {
        self.n == other.n && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| (self.get(j, i) - v).abs() <= tol))
    }

    /// Dense row-major copy, for tests and small diagnostics.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }
}

/// Pattern-level analysis reused across numeric factorizations.
#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    /// `perm[k]` is the original index eliminated at step `k`.
    perm: Vec<usize>,
    /// Column pointers of the upper triangle of the permuted matrix.
    up_ptr: Vec<usize>,
    up_row: Vec<usize>,
    /// Position of each upper-triangle entry in the source CSR value array.
    up_src: Vec<usize>,
    parent: Vec<Option<usize>>,
    l_ptr: Vec<usize>,
    source_row_ptr: Vec<usize>,
    source_col_idx: Vec<usize>,
}

impl SymbolicCholesky {
    /// Analyses the pattern of `m` under the elimination order `perm`
    /// (identity when `None`).
    pub fn analyze(m: &SparseSym, perm: Option<&[usize]>) -> Result<Self> {
        let n = m.n;
        let perm: Vec<usize> = match perm {
            Some(p) => {
                if p.len() != n {
                    return Err(Error::invalid("ordering length does not match matrix"));
                }
                let mut seen = vec![false; n];
                for &i in p {
                    if i >= n || std::mem::replace(&mut seen[i], true) {
                        return Err(Error::invalid("ordering is not a permutation"));
                    }
                }
                p.to_vec()
            }
            None => (0..n).collect(),
        };
        let mut inv = vec![0; n];
        for (k, &i) in perm.iter().enumerate() {
            inv[i] = k;
        }

        // Upper triangle of C = P M Pᵀ, column by column.
        let mut cols: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for i in 0..n {
            for p in m.row_ptr[i]..m.row_ptr[i + 1] {
                let j = m.col_idx[p];
                let (ri, cj) = (inv[i], inv[j]);
                if ri <= cj {
                    cols[cj].push((ri, p));
                }
            }
        }
        let mut up_ptr = Vec::with_capacity(n + 1);
        let mut up_row = Vec::new();
        let mut up_src = Vec::new();
        up_ptr.push(0);
        for mut col in cols {
            col.sort_by_key(|e| e.0);
            for (r, p) in col {
                up_row.push(r);
                up_src.push(p);
            }
            up_ptr.push(up_row.len());
        }

        // Elimination tree.
        let mut parent = vec![None; n];
        let mut ancestor: Vec<Option<usize>> = vec![None; n];
        for k in 0..n {
            for &row in &up_row[up_ptr[k]..up_ptr[k + 1]] {
                let mut i = Some(row);
                while let Some(ii) = i {
                    if ii >= k {
                        break;
                    }
                    let next = ancestor[ii];
                    ancestor[ii] = Some(k);
                    if next.is_none() {
                        parent[ii] = Some(k);
                    }
                    i = next;
                }
            }
        }

        let mut sym = SymbolicCholesky {
            n,
            perm,
            up_ptr,
            up_row,
            up_src,
            parent,
            l_ptr: Vec::new(),
            source_row_ptr: m.row_ptr.clone(),
            source_col_idx: m.col_idx.clone(),
        };

        // Column counts from the row patterns.
        let mut counts = vec![1usize; n];
        let mut stack = vec![0; n];
        let mut mark = vec![usize::MAX; n];
        for k in 0..n {
            let top = sym.ereach(k, &mut stack, &mut mark);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut l_ptr = Vec::with_capacity(n + 1);
        l_ptr.push(0);
        for c in counts {
            l_ptr.push(l_ptr.last().unwrap() + c);
        }
        sym.l_ptr = l_ptr;
        Ok(sym)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of nonzeros in the factor.
    pub fn factor_nnz(&self) -> usize {
        *self.l_ptr.last().unwrap_or(&0)
    }

    fn matches(&self, m: &SparseSym) -> bool {
        m.n == self.n && m.row_ptr == self.source_row_ptr && m.col_idx == self.source_col_idx
    }

    /// Nonzero pattern of row `k` of L (excluding the diagonal), returned as
    /// `stack[top..]` in topological order.
    fn ereach(&self, k: usize, stack: &mut [usize], mark: &mut [usize]) -> usize {
        let n = self.n;
        let mut top = n;
        mark[k] = k;
        for &row in &self.up_row[self.up_ptr[k]..self.up_ptr[k + 1]] {
            if row >= k {
                continue;
            }
            let mut len = 0;
            let mut i = row;
            while mark[i] != k {
                stack[len] = i;
                len += 1;
                mark[i] = k;
                i = self.parent[i].expect("etree path reaches k");
            }
            while len > 0 {
                len -= 1;
                top -= 1;
                stack[top] = stack[len];
            }
        }
        top
    }
}

/// Numeric Cholesky factor `P M Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    l_row: Vec<usize>,
    l_val: Vec<f64>,
}

impl CholeskyFactor {
    /// Factorizes `m`, whose pattern must match the one `symbolic` was built on.
    pub fn factorize(symbolic: Arc<SymbolicCholesky>, m: &SparseSym) -> Result<Self> {
        if !symbolic.matches(m) {
            return Err(Error::invalid(
                "matrix pattern differs from the analysed pattern",
            ));
        }
        let n = symbolic.n;
        let nnz = symbolic.factor_nnz();
        let mut l_row = vec![0usize; nnz];
        let mut l_val = vec![0.0; nnz];
        let mut next: Vec<usize> = symbolic.l_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0; n];
        let mut mark = vec![usize::MAX; n];
        let s = &*symbolic;
        for k in 0..n {
            let top = s.ereach(k, &mut stack, &mut mark);
            for p in s.up_ptr[k]..s.up_ptr[k + 1] {
                x[s.up_row[p]] = m.values[s.up_src[p]];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / l_val[s.l_ptr[i]];
                x[i] = 0.0;
                for p in s.l_ptr[i] + 1..next[i] {
                    x[l_row[p]] -= l_val[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                l_row[p] = k;
                l_val[p] = lki;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: s.perm[k],
                    context: format!("pivot value {d:e} at elimination step {k}"),
                });
            }
            let p = next[k];
            next[k] += 1;
            l_row[p] = k;
            l_val[p] = d.sqrt();
        }
        Ok(CholeskyFactor {
            symbolic,
            l_row,
            l_val,
        })
    }

    /// One-shot factorization with a fresh symbolic analysis.
    pub fn new(m: &SparseSym, perm: Option<&[usize]>) -> Result<Self> {
        let sym = Arc::new(SymbolicCholesky::analyze(m, perm)?);
        Self::factorize(sym, m)
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    /// `log |M|`.
    pub fn logdet(&self) -> f64 {
        let s = &self.symbolic;
        2.0 * (0..s.n).map(|k| self.l_val[s.l_ptr[k]].ln()).sum::<f64>()
    }

    /// Solves `L y = x` in place (permuted space).
    fn lower_solve(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let r = s.l_ptr[j]..s.l_ptr[j + 1];
            x[j] /= self.l_val[r.start];
            let xj = x[j];
            for p in r.start + 1..r.end {
                x[self.l_row[p]] -= self.l_val[p] * xj;
            }
        }
    }

    /// Solves `Lᵀ y = x` in place (permuted space).
    fn upper_solve(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let r = s.l_ptr[j]..s.l_ptr[j + 1];
            let mut acc = x[j];
            for p in r.start + 1..r.end {
                acc -= self.l_val[p] * x[self.l_row[p]];
            }
            x[j] = acc / self.l_val[r.start];
        }
    }

    fn permute(&self, b: &[f64]) -> Vec<f64> {
        self.symbolic.perm.iter().map(|&i| b[i]).collect()
    }

    fn unpermute(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for (k, &i) in self.symbolic.perm.iter().enumerate() {
            out[i] = y[k];
        }
        out
    }

    /// `M⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim());
        let mut y = self.permute(b);
        self.lower_solve(&mut y);
        self.upper_solve(&mut y);
        self.unpermute(&y)
    }

    /// Draws `x ~ N(M⁻¹ b, M⁻¹)`; also returns the mean `M⁻¹ b`.
    pub fn sample_gaussian<R: Rng + ?Sized>(&self, b: &[f64], rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        let mut y = self.permute(b);
        self.lower_solve(&mut y);
        let mut z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        // Lᵀ (mean + noise) = L⁻¹ b + z
        let mut mean = y.clone();
        self.upper_solve(&mut mean);
        for (zi, yi) in z.iter_mut().zip(&y) {
            *zi += yi;
        }
        self.upper_solve(&mut z);
        (self.unpermute(&z), self.unpermute(&mean))
    }

    /// Quadratic form `bᵀ M⁻¹ b`, computed as `‖L⁻¹ P b‖²`.
    pub fn inv_quad_form(&self, b: &[f64]) -> f64 {
        let mut y = self.permute(b);
        self.lower_solve(&mut y);
        y.iter().map(|v| v * v).sum()
    }
}
