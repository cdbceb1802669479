//! Diffusion tensor fields `a_ij^{αβ}(ε, x)`.
//!
//! A tensor is stored as an `(nN) × (nN)` matrix whose row is the pair
//! `(α, i)` and whose column is `(β, j)`, so that the bilinear form reads
//! `a_ij^{αβ} ∂_j u^β ∂_i φ^α = ∇φᵀ A ∇u` with gradients flattened the same
//! way. The Legendre condition is then positivity of the symmetric part of
//! that matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{ExprError, ScalarFunction};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoeffError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("epsilon must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("Legendre condition fails: observed margin {0:.6e} <= 0")]
    NotElliptic(f64),
    #[error("tensor declared triangular but a^{{{alpha}{beta}}}_{{{i}{j}}} = {value:.3e} at x = {x:?}")]
    NotTriangular { alpha: usize, beta: usize, i: usize, j: usize, value: f64, x: [f64; 2] },
    #[error("tensor value is not finite at x = {0:?}")]
    NonFinite([f64; 2]),
    #[error("tensor shapes differ: (n={0}, N={1}) vs (n={2}, N={3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("expected {expected} tensor entries, got {got}")]
    EntryCount { expected: usize, got: usize },
    #[error("matrix [a(y)] is singular at y = {0}")]
    SingularCellMatrix(f64),
    #[error("defect is not localized: mean density of |b| over radius {radius} is {density:.3e}, not below a tenth of its peak {previous:.3e}")]
    DefectNotLocalized { radius: f64, density: f64, previous: f64 },
    #[error("this operation needs space dimension {expected}, tensor has {got}")]
    Dimension { expected: usize, got: usize },
}

/// A constant `n²N²` coefficient array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Tensor4 { n, dim, data: vec![0.0; n * n * dim * dim] }
    }

    /// `δ_ij δ_αβ`.
    pub fn identity(n: usize, dim: usize) -> Self {
        Self::scalar(n, dim, 1.0)
    }

    /// `c δ_ij δ_αβ`.
    pub fn scalar(n: usize, dim: usize, c: f64) -> Self {
        let mut t = Self::zeros(n, dim);
        for k in 0..n * dim {
            t.data[k * n * dim + k] = c;
        }
        t
    }

    /// From the `(nN)×(nN)` row-major matrix with rows `(α,i)`.
    pub fn from_matrix(n: usize, dim: usize, data: Vec<f64>) -> Result<Self, CoeffError> {
        let expected = n * n * dim * dim;
        if data.len() != expected {
            return Err(CoeffError::EntryCount { expected, got: data.len() });
        }
        Ok(Tensor4 { n, dim, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn index(&self, alpha: usize, beta: usize, i: usize, j: usize) -> usize {
        (alpha * self.dim + i) * self.n * self.dim + beta * self.dim + j
    }

    #[inline]
    pub fn get(&self, alpha: usize, beta: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(alpha, beta, i, j)]
    }

    pub fn set(&mut self, alpha: usize, beta: usize, i: usize, j: usize, v: f64) {
        let k = self.index(alpha, beta, i, j);
        self.data[k] = v;
    }

    pub fn as_matrix(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, c: f64) -> Self {
        Tensor4 { n: self.n, dim: self.dim, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn add(&self, other: &Tensor4) -> Self {
        Tensor4 {
            n: self.n,
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Symmetric under `(α,i) ↔ (β,j)`.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let m = self.n * self.dim;
        (0..m).all(|r| (0..r).all(|c| (self.data[r * m + c] - self.data[c * m + r]).abs() <= tol))
    }

    /// Smallest eigenvalue of the symmetrized quadratic form.
    pub fn legendre_margin(&self) -> f64 {
        let m = self.n * self.dim;
        let a = DMatrix::from_row_slice(m, m, &self.data);
        let sym = (&a + a.transpose()) * 0.5;
        SymmetricEigen::new(sym).eigenvalues.min()
    }

    /// The `n×n` block `[a^{αβ}_{ij}]` for fixed `i, j`.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |alpha, beta| self.get(alpha, beta, i, j))
    }

    /// Nested `[α][β][i][j]` array, the JSON export layout.
    pub fn to_nested(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        (0..self.n)
            .map(|a| {
                (0..self.n)
                    .map(|b| (0..self.dim).map(|i| (0..self.dim).map(|j| self.get(a, b, i, j)).collect()).collect())
                    .collect()
            })
            .collect()
    }

    pub fn from_nested(nested: &[Vec<Vec<Vec<f64>>>]) -> Result<Self, CoeffError> {
        let n = nested.len();
        let dim = nested.first().and_then(|b| b.first()).map_or(0, |i| i.len());
        let mut t = Tensor4::zeros(n, dim);
        for (a, row) in nested.iter().enumerate() {
            for (b, block) in row.iter().enumerate() {
                for (i, r) in block.iter().enumerate() {
                    for (j, &v) in r.iter().enumerate() {
                        if a >= n || b >= n || i >= dim || j >= dim {
                            return Err(CoeffError::EntryCount { expected: n * n * dim * dim, got: 0 });
                        }
                        t.set(a, b, i, j, v);
                    }
                }
            }
        }
        Ok(t)
    }
}

/// Anything that can be evaluated as a diffusion tensor at a point.
pub trait DiffusionTensor: Sync {
    fn system_dim(&self) -> usize;
    fn space_dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Tensor4;
    /// The periodicity scale ε of an oscillating tensor, if any.
    fn scale(&self) -> Option<f64> {
        None
    }
}

/// Entry-wise evaluator: one scalar function per `(α,i),(β,j)` slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluator {
    n: usize,
    dim: usize,
    entries: Vec<ScalarFunction>,
}

impl Evaluator {
    pub fn new(n: usize, dim: usize, entries: Vec<ScalarFunction>) -> Result<Self, CoeffError> {
        let expected = n * n * dim * dim;
        if entries.len() != expected {
            return Err(CoeffError::EntryCount { expected, got: entries.len() });
        }
        Ok(Evaluator { n, dim, entries })
    }

    pub fn constant(t: &Tensor4) -> Self {
        Evaluator {
            n: t.n,
            dim: t.dim,
            entries: t.data.iter().map(|&v| ScalarFunction::Constant(v)).collect(),
        }
    }

    /// `s(y) δ_ij δ_αβ`.
    pub fn scalar(n: usize, dim: usize, s: ScalarFunction) -> Self {
        let m = n * dim;
        let entries = (0..m * m)
            .map(|k| if k / m == k % m { s.clone() } else { ScalarFunction::Constant(0.0) })
            .collect();
        Evaluator { n, dim, entries }
    }

    pub fn eval(&self, y: &[f64]) -> Tensor4 {
        Tensor4 { n: self.n, dim: self.dim, data: self.entries.iter().map(|e| e.eval(y)).collect() }
    }

    pub fn entry(&self, alpha: usize, beta: usize, i: usize, j: usize) -> &ScalarFunction {
        &self.entries[(alpha * self.dim + i) * self.n * self.dim + beta * self.dim + j]
    }
}

/// Sampling grid for the ess-inf / ess-sup checks: `per_axis` cell-centred
/// points per axis of `(0,1)^N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleGrid {
    pub per_axis: usize,
}

impl Default for SampleGrid {
    fn default() -> Self {
        SampleGrid { per_axis: 256 }
    }
}

impl SampleGrid {
    pub fn points(&self, dim: usize) -> Vec<[f64; 2]> {
        let m = self.per_axis.max(1);
        let c = |k: usize| (k as f64 + 0.5) / m as f64;
        match dim {
            1 => (0..m).map(|k| [c(k), 0.0]).collect(),
            _ => (0..m * m).map(|k| [c(k % m), c(k / m)]).collect(),
        }
    }
}

/// A validated diffusion tensor field.
///
/// Evaluation at `x` returns `base(frac(x/ε)) + defect(x/ε)` when scaled,
/// and `base(x) + defect(x)` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    base: Evaluator,
    defect: Option<Evaluator>,
    scale: Option<f64>,
    triangular: bool,
    margin: f64,
    magnitude: f64,
}

impl TensorField {
    /// Validates `base` on `samples`: margin positive, values finite, and
    /// triangularity when declared.
    pub fn new(base: Evaluator, triangular: bool, samples: SampleGrid) -> Result<Self, CoeffError> {
        let mut field = TensorField { base, defect: None, scale: None, triangular, margin: 0.0, magnitude: 0.0 };
        field.validate(samples)?;
        Ok(field)
    }

    pub fn constant(t: &Tensor4) -> Result<Self, CoeffError> {
        Self::new(Evaluator::constant(t), false, SampleGrid { per_axis: 1 })
    }

    fn validate(&mut self, samples: SampleGrid) -> Result<(), CoeffError> {
        let (n, dim) = (self.base.n, self.base.dim);
        let mut margin = f64::INFINITY;
        let mut magnitude = 0.0f64;
        // sample the unit cell for periodic bases, (0,1)^N otherwise
        for x in samples.points(dim) {
            let t = self.eval_unit(&x[..dim]);
            if !t.is_finite() {
                return Err(CoeffError::NonFinite(x));
            }
            if self.triangular {
                for alpha in 0..n {
                    for beta in 0..alpha {
                        for i in 0..dim {
                            for j in 0..dim {
                                let value = t.get(alpha, beta, i, j);
                                if value != 0.0 {
                                    return Err(CoeffError::NotTriangular { alpha, beta, i, j, value, x });
                                }
                            }
                        }
                    }
                }
            }
            margin = margin.min(t.legendre_margin());
            magnitude = magnitude.max(t.max_abs());
        }
        if margin <= 0.0 {
            return Err(CoeffError::NotElliptic(margin));
        }
        self.margin = margin;
        self.magnitude = magnitude;
        Ok(())
    }

    /// Value at a point of the reference cell (no ε-rescaling).
    fn eval_unit(&self, y: &[f64]) -> Tensor4 {
        let t = self.base.eval(y);
        match &self.defect {
            Some(d) => t.add(&d.eval(y)),
            None => t,
        }
    }

    pub fn triangular(&self) -> bool {
        self.triangular
    }

    /// Observed Legendre margin on the validation samples.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Observed maximal entry magnitude on the validation samples.
    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    /// The class parameter `r` with margin `>= r` and magnitude `<= 1/r`.
    pub fn class_parameter(&self) -> f64 {
        self.margin.min(1.0 / self.magnitude)
    }

    pub fn base(&self) -> &Evaluator {
        &self.base
    }

    pub fn has_defect(&self) -> bool {
        self.defect.is_some()
    }

    /// Whether `base` has `a^{αβ}_{ij} = 0` for `α > β` on the sample grid.
    pub fn observed_triangular(&self, samples: SampleGrid) -> bool {
        let (n, dim) = (self.base.n, self.base.dim);
        samples.points(dim).iter().all(|x| {
            let t = self.eval_unit(&x[..dim]);
            (0..n).all(|a| (0..a).all(|b| (0..dim).all(|i| (0..dim).all(|j| t.get(a, b, i, j) == 0.0))))
        })
    }
}

impl DiffusionTensor for TensorField {
    fn system_dim(&self) -> usize {
        self.base.n
    }

    fn space_dim(&self) -> usize {
        self.base.dim
    }

    fn eval(&self, x: &[f64]) -> Tensor4 {
        let dim = self.base.dim;
        match self.scale {
            None => self.eval_unit(&x[..dim]),
            Some(eps) => {
                let mut y = [0.0; 2];
                let mut wrapped = [0.0; 2];
                for k in 0..dim {
                    y[k] = x[k] / eps;
                    wrapped[k] = y[k] - y[k].floor();
                }
                let t = self.base.eval(&wrapped[..dim]);
                match &self.defect {
                    Some(d) => t.add(&d.eval(&y[..dim])),
                    None => t,
                }
            }
        }
    }

    fn scale(&self) -> Option<f64> {
        self.scale
    }
}

/// Minimum over `samples` of the smallest eigenvalue of the symmetrized
/// `(nN)×(nN)` form. Negative means the Legendre condition fails.
pub fn legendre_margin(tensor: &dyn DiffusionTensor, samples: SampleGrid) -> f64 {
    let dim = tensor.space_dim();
    samples
        .points(dim)
        .iter()
        .map(|x| tensor.eval(&x[..dim]).legendre_margin())
        .fold(f64::INFINITY, f64::min)
}

/// `a(ε, x) = ã((x/ε) mod 1)`.
pub fn scale_periodic(base: &TensorField, epsilon: f64) -> Result<TensorField, CoeffError> {
    if !(epsilon > 0.0) {
        return Err(CoeffError::NonPositiveScale(epsilon));
    }
    let mut field = base.clone();
    field.scale = Some(epsilon);
    Ok(field)
}

/// `a(ε, x) = ã((x/ε) mod 1) + b(x/ε)` with a localized defect `b`.
///
/// The defect is spot-checked for vanishing mean density: the average of
/// `|b|` over balls of growing radius around sample points must decrease.
pub fn add_defect(base: &TensorField, defect: &Evaluator, epsilon: f64, samples: SampleGrid) -> Result<TensorField, CoeffError> {
    if !(epsilon > 0.0) {
        return Err(CoeffError::NonPositiveScale(epsilon));
    }
    if (defect.n, defect.dim) != (base.base.n, base.base.dim) {
        return Err(CoeffError::ShapeMismatch(base.base.n, base.base.dim, defect.n, defect.dim));
    }
    check_localized(defect)?;
    let mut field = base.clone();
    field.defect = Some(defect.clone());
    field.scale = Some(epsilon);
    // combined margin over the region the defect lives in, in cell units
    let dim = base.base.dim;
    let reach = 1.0 / epsilon;
    let mut margin = f64::INFINITY;
    let mut magnitude = field.magnitude;
    for p in samples.points(dim) {
        let mut y = [0.0; 2];
        for k in 0..dim {
            y[k] = p[k] * reach;
        }
        let t = field.base.eval(&[y[0] - y[0].floor(), y[1] - y[1].floor()][..dim]).add(&defect.eval(&y[..dim]));
        if !t.is_finite() {
            return Err(CoeffError::NonFinite(y));
        }
        margin = margin.min(t.legendre_margin());
        magnitude = magnitude.max(t.max_abs());
    }
    if margin <= 0.0 {
        return Err(CoeffError::NotElliptic(margin));
    }
    field.margin = margin.min(field.margin);
    field.magnitude = magnitude;
    Ok(field)
}

/// Mean density of `Σ|b|` over `|y - c| < r` for `r = 1, 2, ..., 64` around a
/// few centres, by midpoint quadrature with 16 points per unit length.
pub fn defect_density_profile(defect: &Evaluator, center: &[f64]) -> Vec<(f64, f64)> {
    let dim = defect.dim;
    let radii = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];
    let per_unit = 16.0;
    radii
        .iter()
        .map(|&r| {
            let m = (2.0 * r * per_unit) as usize;
            let h = 2.0 * r / m as f64;
            let (mut total, mut vol) = (0.0, 0.0);
            let coord = |k: usize, c: f64| c - r + (k as f64 + 0.5) * h;
            let mut visit = |y: &[f64]| {
                let d2: f64 = y.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < r * r {
                    let t = defect.eval(y);
                    total += t.data.iter().map(|v| v.abs()).sum::<f64>();
                    vol += 1.0;
                }
            };
            if dim == 1 {
                for k in 0..m {
                    visit(&[coord(k, center[0])]);
                }
            } else {
                for k in 0..m * m {
                    visit(&[coord(k % m, center[0]), coord(k / m, center[1])]);
                }
            }
            (r, if vol > 0.0 { total / vol } else { 0.0 })
        })
        .collect()
}

fn check_localized(defect: &Evaluator) -> Result<(), CoeffError> {
    let centers: [[f64; 2]; 2] = [[0.0, 0.0], [0.5, 0.5]];
    for c in centers {
        let profile = defect_density_profile(defect, &c[..defect.dim]);
        let peak = profile.iter().map(|p| p.1).fold(0.0, f64::max);
        let (radius, density) = *profile.last().unwrap();
        // the far-field density must fall well below its peak
        if density > 0.1 * peak && density > 1e-12 {
            return Err(CoeffError::DefectNotLocalized { radius, density, previous: peak });
        }
    }
    Ok(())
}

/// A constant homogenized tensor `â`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedTensor {
    tensor: Tensor4,
}

impl HomogenizedTensor {
    /// Checks the Legendre condition of the constant tensor.
    pub fn new(tensor: Tensor4) -> Result<Self, CoeffError> {
        let margin = tensor.legendre_margin();
        if !(margin > 0.0) {
            return Err(CoeffError::NotElliptic(margin));
        }
        Ok(HomogenizedTensor { tensor })
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.tensor
    }

    pub fn margin(&self) -> f64 {
        self.tensor.legendre_margin()
    }

    pub fn get(&self, alpha: usize, beta: usize, i: usize, j: usize) -> f64 {
        self.tensor.get(alpha, beta, i, j)
    }
}

impl DiffusionTensor for HomogenizedTensor {
    fn system_dim(&self) -> usize {
        self.tensor.n
    }

    fn space_dim(&self) -> usize {
        self.tensor.dim
    }

    fn eval(&self, _x: &[f64]) -> Tensor4 {
        self.tensor.clone()
    }
}

impl DiffusionTensor for Tensor4 {
    fn system_dim(&self) -> usize {
        self.n
    }

    fn space_dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _x: &[f64]) -> Tensor4 {
        self.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{Expr, Table};

    fn piecewise_1d(values: &[f64]) -> TensorField {
        let s = ScalarFunction::Table(Table::new(vec![values.len()], values.to_vec()).unwrap());
        TensorField::new(Evaluator::scalar(1, 1, s), false, SampleGrid::default()).unwrap()
    }

    #[test]
    fn margins_of_simple_tensors() {
        assert!((Tensor4::identity(2, 2).legendre_margin() - 1.0).abs() < 1e-14);
        let mut t = Tensor4::zeros(1, 2);
        t.set(0, 0, 0, 0, 2.0);
        t.set(0, 0, 1, 1, 0.5);
        assert!((t.legendre_margin() - 0.5).abs() < 1e-14);
        // n=2, N=1, [[1,10],[0,1]]: symmetric part [[1,5],[5,1]] has eigenvalues 6, -4
        let t = Tensor4::from_matrix(2, 1, vec![1.0, 10.0, 0.0, 1.0]).unwrap();
        assert!((t.legendre_margin() + 4.0).abs() < 1e-12);
        assert!((legendre_margin(&t, SampleGrid { per_axis: 4 }) + 4.0).abs() < 1e-12);
    }

    #[test]
    fn triangular_but_not_elliptic_is_rejected() {
        let t = Tensor4::from_matrix(2, 1, vec![1.0, 10.0, 0.0, 1.0]).unwrap();
        let err = TensorField::new(Evaluator::constant(&t), true, SampleGrid { per_axis: 4 }).unwrap_err();
        assert!(matches!(err, CoeffError::NotElliptic(m) if (m + 4.0).abs() < 1e-12));
    }

    #[test]
    fn triangularity_declaration_checked() {
        let t = Tensor4::from_matrix(2, 1, vec![1.0, 0.0, 0.3, 1.0]).unwrap();
        let err = TensorField::new(Evaluator::constant(&t), true, SampleGrid { per_axis: 2 }).unwrap_err();
        assert!(matches!(err, CoeffError::NotTriangular { alpha: 1, beta: 0, .. }));
        let ok = TensorField::new(Evaluator::constant(&t), false, SampleGrid { per_axis: 2 }).unwrap();
        assert!(!ok.observed_triangular(SampleGrid { per_axis: 2 }));
        let up = Tensor4::from_matrix(2, 1, vec![1.0, 0.3, 0.0, 1.0]).unwrap();
        let tri = TensorField::new(Evaluator::constant(&up), true, SampleGrid { per_axis: 2 }).unwrap();
        assert!(tri.triangular() && tri.observed_triangular(SampleGrid { per_axis: 2 }));
    }

    #[test]
    fn scale_one_matches_base() {
        let base = piecewise_1d(&[1.0, 4.0]);
        let scaled = scale_periodic(&base, 1.0).unwrap();
        for k in 0..50 {
            let x = (k as f64 + 0.37) / 50.0;
            assert_eq!(scaled.eval(&[x]), base.eval(&[x]));
        }
    }

    #[test]
    fn scaled_field_is_eps_periodic() {
        let e = Expr::parse("2 + sin(2*pi*x1)*cos(2*pi*x2)", 2).unwrap();
        let base = TensorField::new(
            Evaluator::scalar(1, 2, ScalarFunction::Expression(e)),
            false,
            SampleGrid { per_axis: 32 },
        )
        .unwrap();
        let eps = 0.125;
        let a = scale_periodic(&base, eps).unwrap();
        for k in 0..20 {
            let x = [0.013 * k as f64, 0.021 * k as f64];
            let v = a.eval(&x).get(0, 0, 0, 0);
            let w = a.eval(&[x[0] + eps, x[1]]).get(0, 0, 0, 0);
            let z = a.eval(&[x[0], x[1] + eps]).get(0, 0, 0, 0);
            assert!((v - w).abs() < 1e-12 && (v - z).abs() < 1e-12);
            // scaling commutes with sampling at the mapped point
            let y = [x[0] / eps, x[1] / eps];
            let direct = base.eval(&[y[0] - y[0].floor(), y[1] - y[1].floor()]).get(0, 0, 0, 0);
            assert!((v - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_base_stays_constant() {
        let base = TensorField::constant(&Tensor4::scalar(1, 1, 3.0)).unwrap();
        for eps in [0.5, 0.01] {
            let a = scale_periodic(&base, eps).unwrap();
            assert_eq!(a.eval(&[0.123]).get(0, 0, 0, 0), 3.0);
        }
        assert!(matches!(scale_periodic(&base, 0.0), Err(CoeffError::NonPositiveScale(_))));
        assert!(matches!(scale_periodic(&base, -1.0), Err(CoeffError::NonPositiveScale(_))));
    }

    #[test]
    fn zero_and_bump_defects() {
        let base = piecewise_1d(&[1.0, 4.0]);
        let zero = Evaluator::constant(&Tensor4::zeros(1, 1));
        let eps = 0.1;
        let a = add_defect(&base, &zero, eps, SampleGrid { per_axis: 64 }).unwrap();
        let plain = scale_periodic(&base, eps).unwrap();
        for k in 0..30 {
            let x = [k as f64 / 30.0];
            assert_eq!(a.eval(&x), plain.eval(&x));
        }
        let bump = Expr::parse("2*max(0, 1 - abs(x1 - 3))", 1).unwrap();
        let b = Evaluator::scalar(1, 1, ScalarFunction::Expression(bump));
        let a = add_defect(&base, &b, eps, SampleGrid { per_axis: 64 }).unwrap();
        // outside the support (|y - 3| >= 1) the defect vanishes
        assert_eq!(a.eval(&[0.8]), plain.eval(&[0.8]));
        // inside: sum of base and defect
        let x = 0.31;
        let y: f64 = x / eps;
        let expected = base.eval(&[y - y.floor()]).get(0, 0, 0, 0) + 2.0 * (1.0 - (y - 3.0).abs());
        assert!((a.eval(&[x]).get(0, 0, 0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn non_localized_defect_rejected() {
        let base = piecewise_1d(&[1.0, 4.0]);
        let b = Evaluator::constant(&Tensor4::scalar(1, 1, 0.5));
        assert!(matches!(
            add_defect(&base, &b, 0.1, SampleGrid { per_axis: 16 }),
            Err(CoeffError::DefectNotLocalized { .. })
        ));
    }

    #[test]
    fn defect_breaking_ellipticity_rejected() {
        let base = piecewise_1d(&[1.0, 4.0]);
        let bump = Expr::parse("-3*max(0, 1 - abs(x1 - 2))", 1).unwrap();
        let b = Evaluator::scalar(1, 1, ScalarFunction::Expression(bump));
        assert!(matches!(
            add_defect(&base, &b, 0.25, SampleGrid { per_axis: 256 }),
            Err(CoeffError::NotElliptic(_))
        ));
    }

    #[test]
    fn class_parameter_bounds() {
        let base = piecewise_1d(&[1.0, 4.0]);
        assert_eq!(base.margin(), 1.0);
        assert_eq!(base.magnitude(), 4.0);
        let r = base.class_parameter();
        assert!(r <= base.margin() && base.magnitude() <= 1.0 / r);
    }

    #[test]
    fn nested_round_trip() {
        let t = Tensor4::from_matrix(2, 2, (0..16).map(|k| k as f64).collect()).unwrap();
        assert_eq!(Tensor4::from_nested(&t.to_nested()).unwrap(), t);
    }
}
