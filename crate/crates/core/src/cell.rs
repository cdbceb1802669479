//! Periodic cell problems and the homogenized tensor.
//!
//! For every pair `(β, j)` the corrector `v_j^{·β}` solves
//! `∂_i(ã_ij^{αβ} + ã_ik^{αγ} ∂_k v_j^{γβ}) = 0` on the periodic unit cell
//! with zero mean, and `â_ij^{αβ} = ∫ (ã_ij^{αβ} + ã_ik^{αγ} ∂_k v_j^{γβ})`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::coeff::{CoeffError, DiffusionTensor, HomogenizedTensor, Tensor4, TensorField};
use crate::fem::{
    assemble_diffusion, assemble_divergence_load, solve_factored, Constraint, DiscreteField, FemError, FemSpace,
    Quadrature, QuadField,
};
use crate::mesh::{build_periodic_cell_mesh, Mesh, MeshError};
use crate::sparse::norm2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CellError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("homogenized tensor rejected (cell mesh may be under-resolved): {0}")]
    Coeff(#[from] CoeffError),
    #[error("cell problems need a periodic mesh")]
    NotPeriodic,
    #[error("closed-form homogenization needs N = 1, got N = {0}")]
    NotOneDimensional(usize),
    #[error("coefficient matrix is singular at y = {0}")]
    SingularMatrix(f64),
}

/// The `nN` correctors, ordered by `(β, j)` with `j` fastest.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    space: Arc<FemSpace>,
    correctors: Vec<DiscreteField>,
    means: Vec<Vec<f64>>,
    residuals: Vec<f64>,
}

impl CorrectorSet {
    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    /// `v_j^{·β}` as an `n`-component field.
    pub fn get(&self, beta: usize, j: usize) -> &DiscreteField {
        &self.correctors[beta * self.space.dim() + j]
    }

    pub fn all(&self) -> &[DiscreteField] {
        &self.correctors
    }

    /// Largest component mean over all correctors.
    pub fn max_mean(&self) -> f64 {
        self.means.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest Euclidean residual of the unconstrained periodic system.
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, &v| m.max(v))
    }
}

/// Solves the cell problems of `base` on the periodic `cellmesh`.
pub fn solve_cell_problems(base: &TensorField, cellmesh: Arc<Mesh>) -> Result<CorrectorSet, CellError> {
    if !cellmesh.is_periodic() {
        return Err(CellError::NotPeriodic);
    }
    let (n, dim) = (base.system_dim(), base.space_dim());
    let space = FemSpace::new(Arc::clone(&cellmesh), n, Constraint::PeriodicPinned, Quadrature::Midpoint)?;
    let natural = FemSpace::new(cellmesh, n, Constraint::Natural, Quadrature::Midpoint)?;
    let a = assemble_diffusion(&space, base)?;
    let a_nat = assemble_diffusion(&natural, base)?;
    let lu = a.factor()?;
    let tensors: Vec<Tensor4> = space.quad_points().iter().map(|qp| base.eval(&qp.x[..dim])).collect();

    let solved: Vec<Result<(DiscreteField, Vec<f64>, f64), CellError>> = (0..n * dim)
        .into_par_iter()
        .map(|col| {
            let (beta, j) = (col / dim, col % dim);
            // column (·β, ·j) of ã as a flux g_i^α = ã_ij^{αβ}
            let mut flux = QuadField::zeros(&space, n * dim);
            for (k, t) in tensors.iter().enumerate() {
                let out = flux.at_mut(k);
                for alpha in 0..n {
                    for i in 0..dim {
                        out[alpha * dim + i] = t.get(alpha, beta, i, j);
                    }
                }
            }
            let b = assemble_divergence_load(&space, &flux)?;
            let mut v = solve_factored(&space, &a, &lu, &b)?;
            let mean = v.integral();
            for node in 0..space.num_nodes() {
                for (alpha, m) in mean.iter().enumerate() {
                    v.values_mut()[node * n + alpha] -= m;
                }
            }
            let means = v.integral();
            let b_nat = assemble_divergence_load(&natural, &flux)?;
            let av = a_nat.apply(v.values());
            let r: Vec<f64> = av.iter().zip(b_nat.values()).map(|(p, q)| p + q).collect();
            Ok((v, means, norm2(&r)))
        })
        .collect();

    let mut set = CorrectorSet { space, correctors: Vec::new(), means: Vec::new(), residuals: Vec::new() };
    for s in solved {
        let (v, m, r) = s?;
        set.correctors.push(v);
        set.means.push(m);
        set.residuals.push(r);
    }
    Ok(set)
}

/// Cell average of the corrected flux; the Legendre margin of the result is
/// checked positive.
pub fn homogenized_tensor(base: &TensorField, correctors: &CorrectorSet) -> Result<HomogenizedTensor, CellError> {
    let space = correctors.space();
    let (n, dim) = (base.system_dim(), base.space_dim());
    let grads: Vec<Vec<f64>> = correctors.all().iter().map(|v| v.cell_gradients()).collect();
    let mut hat = Tensor4::zeros(n, dim);
    for qp in space.quad_points() {
        let t = base.eval(&qp.x[..dim]);
        for alpha in 0..n {
            for beta in 0..n {
                for i in 0..dim {
                    for j in 0..dim {
                        let g = &grads[beta * dim + j];
                        let mut v = t.get(alpha, beta, i, j);
                        for gamma in 0..n {
                            for k in 0..dim {
                                v += t.get(alpha, gamma, i, k) * g[(qp.cell * n + gamma) * dim + k];
                            }
                        }
                        hat.set(alpha, beta, i, j, hat.get(alpha, beta, i, j) + qp.weight * v);
                    }
                }
            }
        }
    }
    Ok(HomogenizedTensor::new(hat)?)
}

/// Solves the cell problems on a periodic mesh with `resolution` cells per
/// side and returns `â`.
pub fn homogenize(base: &TensorField, resolution: usize) -> Result<HomogenizedTensor, CellError> {
    let mesh = Arc::new(build_periodic_cell_mesh(resolution, base.space_dim())?);
    let correctors = solve_cell_problems(base, mesh)?;
    homogenized_tensor(base, &correctors)
}

/// `â = (∫₀¹ ã(y)⁻¹ dy)⁻¹` by the midpoint rule with `resolution` points.
/// Exact for piecewise-constant tables whose breakpoints lie on the grid.
pub fn homogenized_tensor_1d(base: &TensorField, resolution: usize) -> Result<HomogenizedTensor, CellError> {
    if base.space_dim() != 1 {
        return Err(CellError::NotOneDimensional(base.space_dim()));
    }
    let n = base.system_dim();
    let mut acc = DMatrix::<f64>::zeros(n, n);
    let h = 1.0 / resolution as f64;
    for k in 0..resolution {
        let y = (k as f64 + 0.5) * h;
        let m = DMatrix::from_row_slice(n, n, base.eval(&[y]).as_matrix());
        let inv = m.try_inverse().ok_or(CellError::SingularMatrix(y))?;
        acc += inv * h;
    }
    let hat = acc.try_inverse().ok_or(CellError::SingularMatrix(f64::NAN))?;
    let data: Vec<f64> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| hat[(r, c)]).collect();
    Ok(HomogenizedTensor::new(Tensor4::from_matrix(n, 1, data)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{Evaluator, SampleGrid};
    use crate::expr::{ScalarFunction, Table};

    fn table_1d(values: Vec<f64>) -> ScalarFunction {
        ScalarFunction::Table(Table::new(vec![values.len()], values).unwrap())
    }

    fn scalar_field(n: usize, dim: usize, s: ScalarFunction) -> TensorField {
        TensorField::new(Evaluator::scalar(n, dim, s), false, SampleGrid::default()).unwrap()
    }

    #[test]
    fn constant_base_has_zero_correctors() {
        let mut t = Tensor4::identity(2, 2);
        t.set(0, 1, 0, 1, 0.3);
        t.set(1, 0, 1, 0, 0.3);
        let base = TensorField::constant(&t).unwrap();
        let mesh = Arc::new(build_periodic_cell_mesh(6, 2).unwrap());
        let set = solve_cell_problems(&base, mesh).unwrap();
        assert!(set.all().iter().flat_map(|v| v.values()).all(|v| v.abs() < 1e-12));
        let hat = homogenized_tensor(&base, &set).unwrap();
        for (p, q) in hat.tensor().as_matrix().iter().zip(t.as_matrix()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_two_phase() {
        let base = scalar_field(1, 1, table_1d(vec![1.0, 4.0]));
        let mesh = Arc::new(build_periodic_cell_mesh(16, 1).unwrap());
        let set = solve_cell_problems(&base, mesh).unwrap();
        assert!(set.max_mean() <= 1e-10);
        assert!(set.max_residual() <= 1e-10);
        let slopes = set.get(0, 0).cell_gradients();
        for (c, s) in slopes.iter().enumerate() {
            let expected = if c < 8 { 0.6 } else { -0.6 };
            assert!((s - expected).abs() < 1e-10, "cell {c}: {s}");
        }
        let hat = homogenized_tensor(&base, &set).unwrap();
        assert!((hat.get(0, 0, 0, 0) - 1.6).abs() < 1e-10);
        let closed = homogenized_tensor_1d(&base, 2).unwrap();
        assert!((closed.get(0, 0, 0, 0) - 1.6).abs() < 1e-12);
    }

    #[test]
    fn closed_form_examples() {
        let a = Tensor4::from_matrix(2, 1, vec![2.0, 0.5, 0.1, 1.0]).unwrap();
        let hat = homogenized_tensor_1d(&TensorField::constant(&a).unwrap(), 4).unwrap();
        for (p, q) in hat.tensor().as_matrix().iter().zip(a.as_matrix()) {
            assert!((p - q).abs() < 1e-12);
        }

        // piecewise matrices on halves: (½A₁⁻¹ + ½A₂⁻¹)⁻¹ by direct 2×2 arithmetic
        let a1 = [2.0, 0.5, 0.0, 1.0];
        let a2 = [1.0, 0.0, 0.3, 3.0];
        let inv = |m: [f64; 4]| {
            let d = m[0] * m[3] - m[1] * m[2];
            [m[3] / d, -m[1] / d, -m[2] / d, m[0] / d]
        };
        let (i1, i2) = (inv(a1), inv(a2));
        let expected = inv([0, 1, 2, 3].map(|k| 0.5 * (i1[k] + i2[k])));
        let entries = (0..4).map(|k| table_1d(vec![a1[k], a2[k]])).collect();
        let base = TensorField::new(Evaluator::new(2, 1, entries).unwrap(), false, SampleGrid::default()).unwrap();
        let hat = homogenized_tensor_1d(&base, 8).unwrap();
        for (p, q) in hat.tensor().as_matrix().iter().zip(expected) {
            assert!((p - q).abs() < 1e-12);
        }
        // correctors on the same data agree with the closed form
        let via_cells = homogenize(&base, 8).unwrap();
        for (p, q) in via_cells.tensor().as_matrix().iter().zip(expected) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn laminate_in_two_dimensions() {
        // 1D reduction: harmonic mean across laminae, arithmetic along them
        let s = ScalarFunction::Table(Table::new(vec![2, 1], vec![1.0, 4.0]).unwrap());
        let base = scalar_field(1, 2, s);
        let hat = homogenize(&base, 64).unwrap();
        assert!((hat.get(0, 0, 0, 0) / 1.6 - 1.0).abs() < 0.02);
        assert!((hat.get(0, 0, 1, 1) / 2.5 - 1.0).abs() < 0.02);
        assert!(hat.get(0, 0, 0, 1).abs() < 1e-10);
    }

    #[test]
    fn symmetry_inherited_and_refinement_converges() {
        let s = ScalarFunction::Expression(crate::expr::Expr::parse("2 + sin(2*pi*x1)*cos(2*pi*x2)", 2).unwrap());
        let base = scalar_field(1, 2, s);
        let hats: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&r| {
                let h = homogenize(&base, r).unwrap();
                assert!((h.get(0, 0, 0, 1) - h.get(0, 0, 1, 0)).abs() < 1e-12);
                h.get(0, 0, 0, 0)
            })
            .collect();
        assert!((hats[2] - hats[1]).abs() < (hats[1] - hats[0]).abs());
    }

    #[test]
    fn non_periodic_mesh_rejected() {
        let base = TensorField::constant(&Tensor4::identity(1, 1)).unwrap();
        let mesh = Arc::new(crate::mesh::build_interval_mesh(4).unwrap());
        assert!(matches!(solve_cell_problems(&base, mesh), Err(CellError::NotPeriodic)));
    }
}
