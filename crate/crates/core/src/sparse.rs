//! Sparse symmetric matrices and their Cholesky factorization.
//!
//! Matrices store the upper triangle (diagonal included) in compressed
//! column form. Factorization permutes with an approximate minimum degree
//! ordering and runs an up-looking Cholesky over the elimination tree. The
//! symbolic analysis depends only on the sparsity pattern and can be reused
//! across numeric refactorizations of matrices sharing that pattern.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// Upper-triangular compressed-column sparsity pattern. Every diagonal entry
/// is present and row indices are sorted within each column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymPattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
}

impl SymPattern {
    /// Builds a pattern from arbitrary `(i, j)` pairs; entries are mirrored
    /// into the upper triangle and the diagonal is always included.
    pub fn from_entries(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cols: Vec<BTreeSet<usize>> = (0..n).map(|j| BTreeSet::from([j])).collect();
        for (i, j) in entries {
            assert!(i < n && j < n, "entry ({i}, {j}) out of bounds for n = {n}");
            let (r, c) = if i <= j { (i, j) } else { (j, i) };
            cols[c].insert(r);
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for col in cols {
            row_idx.extend(col);
            col_ptr.push(row_idx.len());
        }
        SymPattern {
            n,
            col_ptr,
            row_idx,
        }
    }

    pub fn diagonal(n: usize) -> Self {
        SymPattern::from_entries(n, std::iter::empty())
    }

    pub fn union(&self, other: &SymPattern) -> SymPattern {
        assert_eq!(self.n, other.n);
        SymPattern::from_entries(self.n, self.entries().chain(other.entries()))
    }

    /// Places this pattern at `offset` inside a larger `n_total` pattern.
    pub fn embed(&self, offset: usize, n_total: usize) -> SymPattern {
        assert!(offset + self.n <= n_total);
        SymPattern::from_entries(
            n_total,
            self.entries().map(|(i, j)| (i + offset, j + offset)),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    /// Iterates stored `(row, col)` pairs with `row <= col`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |j| {
            self.row_idx[self.col_ptr[j]..self.col_ptr[j + 1]]
                .iter()
                .map(move |&i| (i, j))
        })
    }

    /// Position of entry `(i, j)` in the value array, in either order.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        if c >= self.n {
            return None;
        }
        let lo = self.col_ptr[c];
        let hi = self.col_ptr[c + 1];
        self.row_idx[lo..hi]
            .binary_search(&r)
            .ok()
            .map(|off| lo + off)
    }

    /// Column indices adjacent to `i` in the symmetric graph (excluding `i`).
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for (i, j) in self.entries() {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }
}

/// Symmetric sparse matrix sharing an immutable pattern.
#[derive(Clone, Debug)]
pub struct SparseSym {
    pattern: Arc<SymPattern>,
    values: Vec<f64>,
}

impl SparseSym {
    pub fn zeros(pattern: Arc<SymPattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        SparseSym { pattern, values }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = SparseSym::zeros(Arc::new(SymPattern::diagonal(n)));
        m.values.iter_mut().for_each(|v| *v = 1.0);
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = SparseSym::zeros(Arc::new(SymPattern::diagonal(diag.len())));
        m.values.copy_from_slice(diag);
        m
    }

    /// Sums duplicate triplets; `(i, j)` and `(j, i)` refer to the same entry,
    /// so supply each off-diagonal entry once.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let pattern = Arc::new(SymPattern::from_entries(
            n,
            triplets.iter().map(|&(i, j, _)| (i, j)),
        ));
        let mut m = SparseSym::zeros(pattern);
        for &(i, j, v) in triplets {
            m.add(i, j, v);
        }
        m
    }

    /// Builds from a dense row-major symmetric matrix, dropping exact zeros.
    pub fn from_dense(n: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), n * n);
        let mut trips = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                let v = dense[i * n + j];
                if v != 0.0 || i == j {
                    trips.push((i, j, v));
                }
            }
        }
        SparseSym::from_triplets(n, &trips)
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn pattern(&self) -> &Arc<SymPattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.slot(i, j).map_or(0.0, |s| self.values[s])
    }

    /// Adds `v` to entry `(i, j)`; panics if the entry is outside the pattern.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self
            .pattern
            .slot(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) is not in the pattern"));
        self.values[s] += v;
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`; `other`'s pattern must be contained in ours.
    pub fn add_scaled(&mut self, c: f64, other: &SparseSym) {
        if Arc::ptr_eq(&self.pattern, &other.pattern) || *self.pattern == *other.pattern {
            for (a, b) in self.values.iter_mut().zip(&other.values) {
                *a += c * b;
            }
            return;
        }
        for (s, (i, j)) in other.pattern.entries().enumerate() {
            self.add(i, j, c * other.values[s]);
        }
    }

    /// Copies `other` into the block starting at `offset` (adding).
    pub fn add_block(&mut self, offset: usize, other: &SparseSym) {
        for (s, (i, j)) in other.pattern.entries().enumerate() {
            self.add(i + offset, j + offset, other.values[s]);
        }
    }

    /// Re-expresses this matrix on a larger pattern containing it.
    pub fn with_pattern(&self, pattern: Arc<SymPattern>) -> SparseSym {
        let mut m = SparseSym::zeros(pattern);
        m.add_scaled(1.0, self);
        m
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(x.len(), n);
        let mut y = vec![0.0; n];
        let p = &self.pattern;
        for j in 0..n {
            for s in p.col_ptr[j]..p.col_ptr[j + 1] {
                let i = p.row_idx[s];
                let v = self.values[s];
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let p = &self.pattern;
        let mut acc = 0.0;
        for j in 0..self.n() {
            for s in p.col_ptr[j]..p.col_ptr[j + 1] {
                let i = p.row_idx[s];
                let v = self.values[s] * x[i] * x[j];
                acc += if i == j { v } else { 2.0 * v };
            }
        }
        acc
    }

    /// Dense row-major copy (both triangles).
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n();
        let mut d = vec![0.0; n * n];
        for (s, (i, j)) in self.pattern.entries().enumerate() {
            d[i * n + j] = self.values[s];
            d[j * n + i] = self.values[s];
        }
        d
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n();
        nalgebra::DMatrix::from_row_slice(n, n, &self.to_dense())
    }

    /// Applies a symmetric permutation: result(perm_new[i], perm_new[j]) = self(i, j)
    /// where `new_index[old] = new`.
    pub fn permuted(&self, new_index: &[usize]) -> SparseSym {
        let n = self.n();
        assert_eq!(new_index.len(), n);
        let trips: Vec<_> = self
            .pattern
            .entries()
            .enumerate()
            .map(|(s, (i, j))| (new_index[i], new_index[j], self.values[s]))
            .collect();
        SparseSym::from_triplets(n, &trips)
    }
}

/// Symbolic analysis: fill-reducing ordering, elimination tree and the
/// column structure of the factor.
#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    source: Arc<SymPattern>,
    /// `perm[k]` is the original index eliminated at step `k`.
    perm: Vec<usize>,
    parent: Vec<Option<usize>>,
    /// Permuted upper pattern C = P A Pᵀ.
    c_ptr: Vec<usize>,
    c_idx: Vec<usize>,
    /// Value of source slot `s` goes to C slot `value_map[s]`.
    value_map: Vec<usize>,
    l_ptr: Vec<usize>,
}

impl SymbolicCholesky {
    pub fn analyze(pattern: &Arc<SymPattern>) -> Result<Arc<SymbolicCholesky>> {
        let n = pattern.n;
        let perm = if n == 0 {
            Vec::new()
        } else {
            let (p, _pinv, _info) = amd::order(
                n,
                &pattern.col_ptr,
                &pattern.row_idx,
                &amd::Control::default(),
            )
            .map_err(|s| Error::InvalidParameter(format!("ordering failed: {s:?}")))?;
            p
        };
        Self::with_permutation(pattern, perm)
    }

    /// Analysis with an explicit elimination order (`perm[k]` = original index).
    pub fn with_permutation(
        pattern: &Arc<SymPattern>,
        perm: Vec<usize>,
    ) -> Result<Arc<SymbolicCholesky>> {
        let n = pattern.n;
        check_dim(n, perm.len())?;
        let mut inv_perm = vec![usize::MAX; n];
        for (k, &i) in perm.iter().enumerate() {
            if i >= n || inv_perm[i] != usize::MAX {
                return Err(Error::InvalidParameter("invalid permutation".into()));
            }
            inv_perm[i] = k;
        }

        // Permuted upper-triangular pattern with a map from source slots.
        let mut counts = vec![0usize; n];
        for (i, j) in pattern.entries() {
            let (a, b) = (inv_perm[i], inv_perm[j]);
            counts[a.max(b)] += 1;
        }
        let mut c_ptr = vec![0usize; n + 1];
        for j in 0..n {
            c_ptr[j + 1] = c_ptr[j] + counts[j];
        }
        let mut next = c_ptr[..n].to_vec();
        let mut c_idx = vec![0usize; pattern.nnz()];
        let mut value_map = vec![0usize; pattern.nnz()];
        for (s, (i, j)) in pattern.entries().enumerate() {
            let (a, b) = (inv_perm[i], inv_perm[j]);
            let (r, c) = (a.min(b), a.max(b));
            c_idx[next[c]] = r;
            value_map[s] = next[c];
            next[c] += 1;
        }
        // Sort rows within each column, carrying the value map along.
        let mut order: Vec<usize> = Vec::new();
        let mut inverse = vec![0usize; pattern.nnz()];
        for j in 0..n {
            let (lo, hi) = (c_ptr[j], c_ptr[j + 1]);
            order.clear();
            order.extend(lo..hi);
            order.sort_unstable_by_key(|&p| c_idx[p]);
            let rows: Vec<usize> = order.iter().map(|&p| c_idx[p]).collect();
            for (off, &p) in order.iter().enumerate() {
                inverse[p] = lo + off;
            }
            c_idx[lo..hi].copy_from_slice(&rows);
        }
        for v in &mut value_map {
            *v = inverse[*v];
        }

        let parent = etree(n, &c_ptr, &c_idx);

        // Column counts of L from the row patterns.
        let mut l_counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![usize::MAX; n];
        for k in 0..n {
            let top = ereach(k, &c_ptr, &c_idx, &parent, &mut stack, &mut mark);
            for &i in &stack[top..n] {
                l_counts[i] += 1;
            }
        }
        let mut l_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_ptr[j + 1] = l_ptr[j] + l_counts[j];
        }

        Ok(Arc::new(SymbolicCholesky {
            n,
            source: pattern.clone(),
            perm,
            parent,
            c_ptr,
            c_idx,
            value_map,
            l_ptr,
        }))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn factor_nnz(&self) -> usize {
        self.l_ptr[self.n]
    }

    pub fn pattern(&self) -> &Arc<SymPattern> {
        &self.source
    }

    fn accepts(&self, pattern: &Arc<SymPattern>) -> bool {
        Arc::ptr_eq(&self.source, pattern) || *self.source == **pattern
    }
}

fn etree(n: usize, c_ptr: &[usize], c_idx: &[usize]) -> Vec<Option<usize>> {
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for &row in &c_idx[c_ptr[k]..c_ptr[k + 1]] {
            let mut i = Some(row);
            while let Some(cur) = i {
                if cur >= k {
                    break;
                }
                let next = ancestor[cur];
                ancestor[cur] = Some(k);
                if next.is_none() {
                    parent[cur] = Some(k);
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of L (excluding the diagonal), returned in
/// `stack[top..n]` in topological order.
fn ereach(
    k: usize,
    c_ptr: &[usize],
    c_idx: &[usize],
    parent: &[Option<usize>],
    stack: &mut [usize],
    mark: &mut [usize],
) -> usize {
    let n = stack.len();
    let mut top = n;
    mark[k] = k;
    let mut path = Vec::new();
    for &row in &c_idx[c_ptr[k]..c_ptr[k + 1]] {
        if row > k {
            continue;
        }
        let mut i = row;
        path.clear();
        while mark[i] != k {
            path.push(i);
            mark[i] = k;
            match parent[i] {
                Some(p) => i = p,
                None => break,
            }
        }
        while let Some(node) = path.pop() {
            top -= 1;
            stack[top] = node;
        }
    }
    top
}

/// Numeric Cholesky factor L with P A Pᵀ = L Lᵀ.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
}

/// Factorizes `a`, computing a fresh symbolic analysis.
pub fn factorize(a: &SparseSym) -> Result<CholeskyFactor> {
    let symbolic = SymbolicCholesky::analyze(a.pattern())?;
    CholeskyFactor::new(&symbolic, a)
}

impl CholeskyFactor {
    /// Numeric factorization reusing a symbolic analysis of `a`'s pattern.
    pub fn new(symbolic: &Arc<SymbolicCholesky>, a: &SparseSym) -> Result<Self> {
        if !symbolic.accepts(a.pattern()) {
            return Err(Error::InvalidParameter(
                "matrix pattern differs from the symbolic analysis".into(),
            ));
        }
        let sym = symbolic.as_ref();
        let n = sym.n;
        let mut c_val = vec![0.0; sym.c_idx.len()];
        for (s, &v) in a.values.iter().enumerate() {
            c_val[sym.value_map[s]] = v;
        }

        let nnz = sym.l_ptr[n];
        let mut l_idx = vec![0usize; nnz];
        let mut l_val = vec![0.0; nnz];
        let mut next = sym.l_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![usize::MAX; n];

        for k in 0..n {
            let top = ereach(k, &sym.c_ptr, &sym.c_idx, &sym.parent, &mut stack, &mut mark);
            for p in sym.c_ptr[k]..sym.c_ptr[k + 1] {
                let i = sym.c_idx[p];
                if i <= k {
                    x[i] = c_val[p];
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / l_val[sym.l_ptr[i]];
                x[i] = 0.0;
                for p in sym.l_ptr[i] + 1..next[i] {
                    x[l_idx[p]] -= l_val[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                l_idx[p] = k;
                l_val[p] = lki;
                next[i] += 1;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Indefinite {
                    pivot: sym.perm[k],
                });
            }
            let p = next[k];
            l_idx[p] = k;
            l_val[p] = d.sqrt();
            next[k] += 1;
        }

        Ok(CholeskyFactor {
            symbolic: symbolic.clone(),
            l_idx,
            l_val,
        })
    }

    pub fn n(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn permutation(&self) -> &[usize] {
        &self.symbolic.perm
    }

    /// Diagonal of L in elimination order.
    pub fn l_diagonal(&self) -> Vec<f64> {
        let ptr = &self.symbolic.l_ptr;
        (0..self.n()).map(|j| self.l_val[ptr[j]]).collect()
    }

    /// Dense row-major copy of L (elimination order).
    pub fn l_dense(&self) -> Vec<f64> {
        let n = self.n();
        let ptr = &self.symbolic.l_ptr;
        let mut d = vec![0.0; n * n];
        for j in 0..n {
            for p in ptr[j]..ptr[j + 1] {
                d[self.l_idx[p] * n + j] = self.l_val[p];
            }
        }
        d
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l_diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solves L y = b in place (permuted coordinates).
    fn forward(&self, y: &mut [f64]) {
        let ptr = &self.symbolic.l_ptr;
        for j in 0..self.n() {
            y[j] /= self.l_val[ptr[j]];
            let yj = y[j];
            for p in ptr[j] + 1..ptr[j + 1] {
                y[self.l_idx[p]] -= self.l_val[p] * yj;
            }
        }
    }

    /// Solves Lᵀ y = b in place (permuted coordinates).
    fn backward(&self, y: &mut [f64]) {
        let ptr = &self.symbolic.l_ptr;
        for j in (0..self.n()).rev() {
            let mut acc = y[j];
            for p in ptr[j] + 1..ptr[j + 1] {
                acc -= self.l_val[p] * y[self.l_idx[p]];
            }
            y[j] = acc / self.l_val[ptr[j]];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n(), b.len())?;
        let perm = &self.symbolic.perm;
        let mut y: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        let mut x = vec![0.0; self.n()];
        for (k, &i) in perm.iter().enumerate() {
            x[i] = y[k];
        }
        Ok(x)
    }

    /// Maps a standard-normal vector to a zero-mean draw with precision
    /// equal to the factored matrix.
    pub fn transform_standard_normal(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n(), z.len())?;
        let mut u = z.to_vec();
        self.backward(&mut u);
        let mut x = vec![0.0; self.n()];
        for (k, &i) in self.symbolic.perm.iter().enumerate() {
            x[i] = u[k];
        }
        Ok(x)
    }

    /// Zero-mean Gaussian draw whose precision is the factored matrix.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.n()).map(|_| rng.sample(StandardNormal)).collect();
        self.transform_standard_normal(&z)
            .expect("dimension matches by construction")
    }

    /// Relative Frobenius error of L Lᵀ against P A Pᵀ (dense; small n only).
    pub fn reconstruction_error(&self, a: &SparseSym) -> f64 {
        let n = self.n();
        let l = self.l_dense();
        let perm = &self.symbolic.perm;
        let dense = a.to_dense();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut llt = 0.0;
                for k in 0..=i.min(j) {
                    llt += l[i * n + k] * l[j * n + k];
                }
                let target = dense[perm[i] * n + perm[j]];
                num += (llt - target).powi(2);
                den += target * target;
            }
        }
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }
}

/// Free-function form of [`CholeskyFactor::solve`].
pub fn solve(f: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>> {
    f.solve(b)
}

pub fn log_det(f: &CholeskyFactor) -> f64 {
    f.log_det()
}

pub fn sample_gmrf<R: Rng + ?Sized>(f: &CholeskyFactor, rng: &mut R) -> Vec<f64> {
    f.sample(rng)
}

/// Caches one symbolic analysis per pattern and refactorizes numerically.
#[derive(Debug, Default, Clone)]
pub struct FactorCache {
    symbolic: Option<Arc<SymbolicCholesky>>,
}

impl FactorCache {
    pub fn new() -> Self {
        FactorCache::default()
    }

    pub fn factorize(&mut self, a: &SparseSym) -> Result<CholeskyFactor> {
        match &self.symbolic {
            Some(s) if s.accepts(a.pattern()) => CholeskyFactor::new(s, a),
            _ => {
                let s = SymbolicCholesky::analyze(a.pattern())?;
                self.symbolic = Some(s.clone());
                CholeskyFactor::new(&s, a)
            }
        }
    }
}
