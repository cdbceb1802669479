//! Compressed sparse rows and a direct LU factorization.
//!
//! The factorization permutes the matrix symmetrically with reverse
//! Cuthill-McKee, then runs banded Gaussian elimination with partial
//! pivoting (row interchanges inside the band, as in LAPACK `gbtrf`).
//! Structured P1 matrices have bandwidth `O(n)` per side, so this is a
//! sparse direct solver in practice.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("linear solve failed: zero pivot at step {step} (pivot ratio {pivot_ratio:.3e})")]
    Singular { step: usize, pivot_ratio: f64 },
    #[error("linear solve failed: residual {residual:.3e} exceeds {bound:.3e} (pivot ratio {pivot_ratio:.3e})")]
    Inaccurate { residual: f64, bound: f64, pivot_ratio: f64 },
    #[error("dimension mismatch: matrix is {rows}x{cols}, vector has {len} entries")]
    Dimension { rows: usize, cols: usize, len: usize },
}

/// Square or rectangular matrix in CSR layout without stored zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from triplets. Duplicates are summed in input order, so the
    /// result is bit-stable for a fixed triplet sequence. Entries that sum to
    /// exactly zero are dropped.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        // stable: keeps the accumulation order of duplicates
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut it = triplets.into_iter().peekable();
        while let Some((r, c, mut v)) = it.next() {
            while let Some(&(r2, c2, v2)) = it.peek() {
                if (r2, c2) != (r, c) {
                    break;
                }
                v += v2;
                it.next();
            }
            if v != 0.0 {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
            }
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix { rows, cols, indptr, indices, values }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        CsrMatrix { rows, cols, indptr: vec![0; rows + 1], indices: vec![], values: vec![] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn mul_vec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (c, v) in self.row(r) {
                y[c] += v * xr;
            }
        }
        y
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let triplets = self.triplets().map(|(r, c, v)| (r, c, v * factor)).collect();
        Self::from_triplets(self.rows, self.cols, triplets)
    }

    /// `self + other`, same shape.
    pub fn add(&self, other: &CsrMatrix) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let triplets = self.triplets().chain(other.triplets()).collect();
        Self::from_triplets(self.rows, self.cols, triplets)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && self.triplets().all(|(r, c, v)| (v - self.get(c, r)).abs() <= tol * (1.0 + v.abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Reverse Cuthill-McKee ordering of the symmetrized sparsity graph.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.rows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (r, c, _) in a.triplets() {
        if r != c {
            adj[r].push(c);
            adj[c].push(r);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        // lowest-degree unvisited vertex starts the next component
        let start = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| (adj[v].len(), v)).unwrap();
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (adj[w].len(), w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// LU factors of a square sparse matrix.
#[derive(Debug, Clone)]
pub struct LuFactor {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    /// Row `r` of the band stores columns `r - kl ..= r + kl + ku`.
    band: Vec<f64>,
    /// Multipliers of step `k`, for rows `k+1 ..= k+kl`.
    lower: Vec<f64>,
    pivots: Vec<usize>,
    pivot_ratio: f64,
}

impl LuFactor {
    pub fn new(a: &CsrMatrix) -> Result<Self, SolveError> {
        let n = a.rows();
        if a.cols() != n {
            return Err(SolveError::Dimension { rows: n, cols: a.cols(), len: n });
        }
        let perm = reverse_cuthill_mckee(a);
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let (mut kl, mut ku) = (0, 0);
        for (r, c, _) in a.triplets() {
            let (r, c) = (inverse[r], inverse[c]);
            if r > c {
                kl = kl.max(r - c);
            } else {
                ku = ku.max(c - r);
            }
        }
        let width = 2 * kl + ku + 1;
        let mut band = vec![0.0; n * width];
        for (r, c, v) in a.triplets() {
            let (r, c) = (inverse[r], inverse[c]);
            band[r * width + c + kl - r] = v;
        }
        let mut lu = LuFactor {
            n,
            kl,
            ku,
            width,
            perm,
            band,
            lower: vec![0.0; n * kl],
            pivots: vec![0; n],
            pivot_ratio: 1.0,
        };
        lu.factor()?;
        Ok(lu)
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> usize {
        r * self.width + c + self.kl - r
    }

    fn factor(&mut self) -> Result<(), SolveError> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let (mut pmin, mut pmax) = (f64::INFINITY, 0.0f64);
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.band[self.at(k, k)].abs();
            for r in k + 1..=last_row {
                let v = self.band[self.at(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            self.pivots[k] = p;
            pmin = pmin.min(best);
            pmax = pmax.max(best);
            if best == 0.0 || !best.is_finite() {
                self.pivot_ratio = 0.0;
                return Err(SolveError::Singular { step: k, pivot_ratio: 0.0 });
            }
            let last_col = (k + kl + ku).min(n - 1);
            if p != k {
                for c in k..=last_col {
                    let (i, j) = (self.at(k, c), self.at(p, c));
                    self.band.swap(i, j);
                }
            }
            let pivot = self.band[self.at(k, k)];
            for r in k + 1..=last_row {
                let m = self.band[self.at(r, k)] / pivot;
                self.lower[k * kl + (r - k - 1)] = m;
                if m == 0.0 {
                    continue;
                }
                let (rk, rr) = (self.at(k, k), self.at(r, k));
                for off in 1..=last_col - k {
                    self.band[rr + off] -= m * self.band[rk + off];
                }
                self.band[rr] = 0.0;
            }
        }
        self.pivot_ratio = if pmax > 0.0 { pmin / pmax } else { 0.0 };
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Smallest over largest pivot magnitude; a cheap conditioning hint.
    pub fn pivot_ratio(&self) -> f64 {
        self.pivot_ratio
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SolveError> {
        self.check_len(b)?;
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for k in 0..n {
            y.swap(k, self.pivots[k]);
            let yk = y[k];
            if yk != 0.0 {
                for r in k + 1..=(k + kl).min(n - 1) {
                    y[r] -= self.lower[k * kl + (r - k - 1)] * yk;
                }
            }
        }
        for k in (0..n).rev() {
            let base = self.at(k, k);
            let mut s = y[k];
            for c in k + 1..=(k + kl + ku).min(n - 1) {
                s -= self.band[base + c - k] * y[c];
            }
            y[k] = s / self.band[base];
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        Ok(x)
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>, SolveError> {
        self.check_len(b)?;
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        // U^T z = b (forward)
        for k in 0..n {
            let base = self.at(k, k);
            y[k] /= self.band[base];
            let yk = y[k];
            if yk != 0.0 {
                for c in k + 1..=(k + kl + ku).min(n - 1) {
                    y[c] -= self.band[base + c - k] * yk;
                }
            }
        }
        // apply the transposed elimination steps in reverse
        for k in (0..n).rev() {
            let mut s = 0.0;
            for r in k + 1..=(k + kl).min(n - 1) {
                s += self.lower[k * kl + (r - k - 1)] * y[r];
            }
            y[k] -= s;
            y.swap(k, self.pivots[k]);
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        Ok(x)
    }

    fn check_len(&self, b: &[f64]) -> Result<(), SolveError> {
        if b.len() != self.n {
            return Err(SolveError::Dimension { rows: self.n, cols: self.n, len: b.len() });
        }
        Ok(())
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
