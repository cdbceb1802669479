//! P1 finite elements for `ℝⁿ`-valued fields.
//!
//! Sign convention, used by every solve in the crate: a discrete problem is
//! `A u + b = 0`, where `A` is an assembled operator and `b` a divergence
//! load `⟨D g, φ⟩ = ∫ g_i^α ∂_i φ^α`. This mirrors `A_ε u + D F(u) = 0`.
//! [`solve_linear`] therefore returns `u = -A⁻¹ b`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeff::DiffusionTensor;
use crate::mesh::Mesh;
use crate::sparse::{norm2, CsrMatrix, LuFactor, SolveError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FemError {
    #[error("tensor evaluation failed at quadrature point {qp} (x = {x:?})")]
    TensorEvaluation { qp: usize, x: [f64; 2] },
    #[error("non-finite {what} value at quadrature point {qp} (x = {x:?})")]
    NonFinite { what: &'static str, qp: usize, x: [f64; 2] },
    #[error("{what}: expected {expected} values, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("point {0:?} lies outside the domain")]
    OutsideDomain(Vec<f64>),
    #[error("tensor has shape (n={0}, N={1}) but the space has (n={2}, N={3})")]
    Shape(usize, usize, usize, usize),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("periodic constraint requested on a non-periodic mesh")]
    NotPeriodic,
}

/// Quadrature rule applied on every cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    /// One point at the cell centroid.
    #[default]
    Midpoint,
    /// 3-point Gauss in 1D, edge midpoints in 2D.
    ThreePoint,
}

impl Quadrature {
    /// Barycentric points and weights (weights sum to one).
    pub fn rule(self, dim: usize) -> Vec<([f64; 3], f64)> {
        match (self, dim) {
            (Quadrature::Midpoint, 1) => vec![([0.5, 0.5, 0.0], 1.0)],
            (Quadrature::Midpoint, _) => vec![([1.0 / 3.0; 3], 1.0)],
            (Quadrature::ThreePoint, 1) => {
                let s = 0.5 * (0.6f64).sqrt();
                vec![
                    ([0.5 + s, 0.5 - s, 0.0], 5.0 / 18.0),
                    ([0.5, 0.5, 0.0], 8.0 / 18.0),
                    ([0.5 - s, 0.5 + s, 0.0], 5.0 / 18.0),
                ]
            }
            (Quadrature::ThreePoint, _) => vec![
                ([0.5, 0.5, 0.0], 1.0 / 3.0),
                ([0.0, 0.5, 0.5], 1.0 / 3.0),
                ([0.5, 0.0, 0.5], 1.0 / 3.0),
            ],
        }
    }
}

/// Which degrees of freedom are eliminated from the linear systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    /// Homogeneous Dirichlet values on boundary vertices.
    Dirichlet,
    /// Periodic mesh; the first node of every component is pinned to fix the
    /// additive constant.
    PeriodicPinned,
    /// Nothing eliminated (used to check residuals of periodic problems).
    Natural,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPoint {
    pub cell: usize,
    /// Rule weight times cell measure.
    pub weight: f64,
    pub x: [f64; 2],
    pub bary: [f64; 3],
}

/// P1 space of `n`-component fields over a mesh.
#[derive(Debug, Clone)]
pub struct FemSpace {
    mesh: Arc<Mesh>,
    ncomp: usize,
    constraint: Constraint,
    quadrature: Quadrature,
    node_of_vertex: Vec<usize>,
    num_nodes: usize,
    free_index: Vec<Option<usize>>,
    free_dofs: Vec<usize>,
    qps: Vec<QuadPoint>,
    qp_per_cell: usize,
    gradients: Vec<[[f64; 2]; 3]>,
}

impl FemSpace {
    pub fn new(mesh: Arc<Mesh>, ncomp: usize, constraint: Constraint, quadrature: Quadrature) -> Result<Arc<Self>, FemError> {
        if constraint == Constraint::PeriodicPinned && !mesh.is_periodic() {
            return Err(FemError::NotPeriodic);
        }
        let mut node_of_vertex = vec![usize::MAX; mesh.num_vertices()];
        let mut num_nodes = 0;
        for v in 0..mesh.num_vertices() {
            if mesh.master(v) == v {
                node_of_vertex[v] = num_nodes;
                num_nodes += 1;
            }
        }
        for v in 0..mesh.num_vertices() {
            node_of_vertex[v] = node_of_vertex[mesh.master(v)];
        }
        let ndofs = num_nodes * ncomp;
        let mut constrained = vec![false; ndofs];
        match constraint {
            Constraint::Dirichlet => {
                for v in mesh.boundary_vertices() {
                    for a in 0..ncomp {
                        constrained[node_of_vertex[v] * ncomp + a] = true;
                    }
                }
            }
            Constraint::PeriodicPinned => constrained[..ncomp].iter_mut().for_each(|c| *c = true),
            Constraint::Natural => {}
        }
        let mut free_index = vec![None; ndofs];
        let mut free_dofs = Vec::new();
        for d in 0..ndofs {
            if !constrained[d] {
                free_index[d] = Some(free_dofs.len());
                free_dofs.push(d);
            }
        }
        let rule = quadrature.rule(mesh.dim());
        let mut qps = Vec::with_capacity(mesh.num_cells() * rule.len());
        let mut gradients = Vec::with_capacity(mesh.num_cells());
        for c in 0..mesh.num_cells() {
            let measure = mesh.cell_measure(c);
            for &(bary, w) in &rule {
                qps.push(QuadPoint { cell: c, weight: w * measure, x: mesh.map_point(c, &bary), bary });
            }
            gradients.push(mesh.hat_gradients(c));
        }
        Ok(Arc::new(FemSpace {
            mesh,
            ncomp,
            constraint,
            quadrature,
            node_of_vertex,
            num_nodes,
            free_index,
            free_dofs,
            qps,
            qp_per_cell: rule.len(),
            gradients,
        }))
    }

    /// Dirichlet space with the default midpoint rule.
    pub fn dirichlet(mesh: Arc<Mesh>, ncomp: usize) -> Arc<Self> {
        Self::new(mesh, ncomp, Constraint::Dirichlet, Quadrature::Midpoint).expect("Dirichlet spaces always build")
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> Arc<Mesh> {
        Arc::clone(&self.mesh)
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn constraint(&self) -> Constraint {
        self.constraint
    }

    pub fn quadrature(&self) -> Quadrature {
        self.quadrature
    }

    pub fn num_dofs(&self) -> usize {
        self.num_nodes * self.ncomp
    }

    pub fn num_free(&self) -> usize {
        self.free_dofs.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn dof(&self, vertex: usize, comp: usize) -> usize {
        self.node_of_vertex[vertex] * self.ncomp + comp
    }

    pub fn free_index(&self, dof: usize) -> Option<usize> {
        self.free_index[dof]
    }

    pub fn is_constrained(&self, dof: usize) -> bool {
        self.free_index[dof].is_none()
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }

    pub fn quad_points(&self) -> &[QuadPoint] {
        &self.qps
    }

    pub fn qp_per_cell(&self) -> usize {
        self.qp_per_cell
    }

    pub fn cell_gradients(&self, c: usize) -> &[[f64; 2]; 3] {
        &self.gradients[c]
    }

    fn local_dofs(&self, c: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (local vertex, component, global dof)
        let n = self.ncomp;
        self.mesh
            .cell(c)
            .iter()
            .enumerate()
            .flat_map(move |(k, &v)| (0..n).map(move |a| (k, a, self.node_of_vertex[v] * n + a)))
    }

    fn scatter(&self, triplets: &mut Vec<(usize, usize, f64)>, row_dof: usize, col_dof: usize, v: f64) {
        if let (Some(r), Some(c)) = (self.free_index[row_dof], self.free_index[col_dof]) {
            triplets.push((r, c, v));
        }
    }
}

/// Values of a `width`-component quantity at every quadrature point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadField {
    width: usize,
    data: Vec<f64>,
}

impl QuadField {
    pub fn zeros(space: &FemSpace, width: usize) -> Self {
        QuadField { width, data: vec![0.0; space.qps.len() * width] }
    }

    /// Fills from `f(x, out)` at each quadrature point.
    pub fn from_fn(space: &FemSpace, width: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let dim = space.dim();
        let mut q = Self::zeros(space, width);
        for (k, qp) in space.qps.iter().enumerate() {
            f(&qp.x[..dim], &mut q.data[k * width..(k + 1) * width]);
        }
        q
    }

    pub fn from_vec(width: usize, data: Vec<f64>) -> Self {
        QuadField { width, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, qp: usize) -> &[f64] {
        &self.data[qp * self.width..(qp + 1) * self.width]
    }

    pub fn at_mut(&mut self, qp: usize) -> &mut [f64] {
        &mut self.data[qp * self.width..(qp + 1) * self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, c: f64) -> Self {
        QuadField { width: self.width, data: self.data.iter().map(|v| v * c).collect() }
    }

    fn check(&self, space: &FemSpace, width: usize, what: &'static str) -> Result<(), FemError> {
        let expected = space.qps.len() * width;
        if self.width != width || self.data.len() != expected {
            return Err(FemError::Length { what, expected, got: self.data.len() });
        }
        if let Some(k) = self.data.iter().position(|v| !v.is_finite()) {
            let qp = k / width;
            return Err(FemError::NonFinite { what, qp, x: space.qps[qp].x });
        }
        Ok(())
    }
}

/// A square sparse matrix over the free dofs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    matrix: CsrMatrix,
    symmetric: bool,
}

impl SparseOperator {
    pub fn new(matrix: CsrMatrix) -> Self {
        let symmetric = matrix.is_symmetric(1e-14);
        SparseOperator { matrix, symmetric }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(x)
    }

    pub fn add(&self, other: &SparseOperator) -> SparseOperator {
        SparseOperator::new(self.matrix.add(&other.matrix))
    }

    pub fn scaled(&self, c: f64) -> SparseOperator {
        SparseOperator { matrix: self.matrix.scaled(c), symmetric: self.symmetric }
    }

    pub fn factor(&self) -> Result<LuFactor, FemError> {
        Ok(LuFactor::new(&self.matrix)?)
    }
}

/// Dual vector over the free dofs.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadFunctional {
    values: Vec<f64>,
}

impl LoadFunctional {
    pub fn new(values: Vec<f64>) -> Self {
        LoadFunctional { values }
    }

    pub fn zeros(space: &FemSpace) -> Self {
        LoadFunctional { values: vec![0.0; space.num_free()] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Euclidean norm of the free-dof vector. Used as a stand-in for the
    /// dual norm; it is not equivalent to it.
    pub fn euclidean_norm(&self) -> f64 {
        norm2(&self.values)
    }
}

/// Nodal coefficients of a P1 field, constrained entries included.
#[derive(Debug, Clone)]
pub struct DiscreteField {
    space: Arc<FemSpace>,
    values: Vec<f64>,
}

impl DiscreteField {
    pub fn zeros(space: &Arc<FemSpace>) -> Self {
        DiscreteField { space: Arc::clone(space), values: vec![0.0; space.num_dofs()] }
    }

    /// Nodal interpolation of `f`; Dirichlet dofs are set to zero.
    pub fn interpolate(space: &Arc<FemSpace>, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut u = Self::zeros(space);
        let (n, dim) = (space.ncomp, space.dim());
        let mut buf = vec![0.0; n];
        for v in 0..space.mesh.num_vertices() {
            if space.mesh.master(v) != v {
                continue;
            }
            let x = space.mesh.vertex(v);
            f(&x[..dim], &mut buf);
            for a in 0..n {
                let d = space.dof(v, a);
                let dirichlet = space.constraint == Constraint::Dirichlet && space.is_constrained(d);
                u.values[d] = if dirichlet { 0.0 } else { buf[a] };
            }
        }
        u
    }

    /// From values on the free dofs; constrained entries are zero.
    pub fn from_free(space: &Arc<FemSpace>, free: &[f64]) -> Self {
        let mut u = Self::zeros(space);
        for (k, &d) in space.free_dofs.iter().enumerate() {
            u.values[d] = free[k];
        }
        u
    }

    pub fn from_values(space: &Arc<FemSpace>, values: Vec<f64>) -> Result<Self, FemError> {
        if values.len() != space.num_dofs() {
            return Err(FemError::Length { what: "nodal values", expected: space.num_dofs(), got: values.len() });
        }
        Ok(DiscreteField { space: Arc::clone(space), values })
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn free_values(&self) -> Vec<f64> {
        self.space.free_dofs.iter().map(|&d| self.values[d]).collect()
    }

    pub fn nodal(&self, vertex: usize, comp: usize) -> f64 {
        self.values[self.space.dof(vertex, comp)]
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &DiscreteField) -> DiscreteField {
        DiscreteField {
            space: Arc::clone(&self.space),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect(),
        }
    }

    pub fn sub(&self, other: &DiscreteField) -> DiscreteField {
        self.axpy(-1.0, other)
    }

    /// Component values at every quadrature point (width `n`).
    pub fn at_quadrature(&self) -> QuadField {
        let space = &self.space;
        let n = space.ncomp;
        let mut q = QuadField::zeros(space, n);
        for (k, qp) in space.qps.iter().enumerate() {
            let out = q.at_mut(k);
            for (l, &v) in space.mesh.cell(qp.cell).iter().enumerate() {
                let b = qp.bary[l];
                for (a, o) in out.iter_mut().enumerate() {
                    *o += b * self.values[space.node_of_vertex[v] * n + a];
                }
            }
        }
        q
    }

    /// Per-cell gradients, width `n·N` with index `α·N + i`.
    pub fn cell_gradients(&self) -> Vec<f64> {
        let space = &self.space;
        let (n, dim) = (space.ncomp, space.dim());
        let mut out = vec![0.0; space.mesh.num_cells() * n * dim];
        for c in 0..space.mesh.num_cells() {
            let g = &space.gradients[c];
            for (l, &v) in space.mesh.cell(c).iter().enumerate() {
                for a in 0..n {
                    let val = self.values[space.node_of_vertex[v] * n + a];
                    for i in 0..dim {
                        out[(c * n + a) * dim + i] += val * g[l][i];
                    }
                }
            }
        }
        out
    }

    /// `∫_Ω u^α` for each component (exact for P1).
    pub fn integral(&self) -> Vec<f64> {
        let space = &self.space;
        let n = space.ncomp;
        let mut total = vec![0.0; n];
        for c in 0..space.mesh.num_cells() {
            let vs = space.mesh.cell(c);
            let m = space.mesh.cell_measure(c) / vs.len() as f64;
            for &v in vs {
                for (a, t) in total.iter_mut().enumerate() {
                    *t += m * self.values[space.node_of_vertex[v] * n + a];
                }
            }
        }
        total
    }
}

/// `⟨A u, φ⟩ = ∫ a_ij^{αβ} ∂_j u^β ∂_i φ^α` over the free dofs.
pub fn assemble_diffusion(space: &FemSpace, tensor: &dyn DiffusionTensor) -> Result<SparseOperator, FemError> {
    let (n, dim) = (space.ncomp, space.dim());
    if (tensor.system_dim(), tensor.space_dim()) != (n, dim) {
        return Err(FemError::Shape(tensor.system_dim(), tensor.space_dim(), n, dim));
    }
    let q = space.qp_per_cell;
    let locals: Vec<Result<(Vec<(usize, usize, f64)>, bool), FemError>> = (0..space.mesh.num_cells())
        .into_par_iter()
        .map(|c| {
            let g = &space.gradients[c];
            let mut triplets = Vec::new();
            let mut symmetric = true;
            for k in c * q..(c + 1) * q {
                let qp = &space.qps[k];
                let a = tensor.eval(&qp.x[..dim]);
                if !a.is_finite() {
                    return Err(FemError::TensorEvaluation { qp: k, x: qp.x });
                }
                symmetric &= a.is_symmetric(0.0);
                for (la, alpha, row) in space.local_dofs(c) {
                    for (lb, beta, col) in space.local_dofs(c) {
                        let mut v = 0.0;
                        for i in 0..dim {
                            for j in 0..dim {
                                v += a.get(alpha, beta, i, j) * g[lb][j] * g[la][i];
                            }
                        }
                        space.scatter(&mut triplets, row, col, qp.weight * v);
                    }
                }
            }
            Ok((triplets, symmetric))
        })
        .collect();
    let mut all = Vec::new();
    let mut symmetric = true;
    for local in locals {
        let (t, s) = local?;
        all.extend(t);
        symmetric &= s;
    }
    let nf = space.num_free();
    let matrix = CsrMatrix::from_triplets(nf, nf, all);
    Ok(SparseOperator { symmetric: symmetric && matrix.is_symmetric(1e-14), matrix })
}

/// `⟨D g, φ⟩ = ∫ g_i^α ∂_i φ^α`; `flux` has width `n·N`, index `α·N + i`.
pub fn assemble_divergence_load(space: &FemSpace, flux: &QuadField) -> Result<LoadFunctional, FemError> {
    let (n, dim) = (space.ncomp, space.dim());
    flux.check(space, n * dim, "flux")?;
    let mut b = vec![0.0; space.num_free()];
    for (k, qp) in space.qps.iter().enumerate() {
        let g = &space.gradients[qp.cell];
        let f = flux.at(k);
        for (l, alpha, dof) in space.local_dofs(qp.cell) {
            if let Some(r) = space.free_index[dof] {
                let mut v = 0.0;
                for i in 0..dim {
                    v += f[alpha * dim + i] * g[l][i];
                }
                b[r] += qp.weight * v;
            }
        }
    }
    Ok(LoadFunctional { values: b })
}

/// `⟨D(J u), φ⟩ = ∫ J_i^{αβ} u^β ∂_i φ^α`, the linearized flux coupling.
/// `jac` has width `n·N·n`, index `(α·N + i)·n + β`.
pub fn assemble_jacobian_coupling(space: &FemSpace, jac: &QuadField) -> Result<SparseOperator, FemError> {
    let (n, dim) = (space.ncomp, space.dim());
    jac.check(space, n * dim * n, "Jacobian")?;
    let mut triplets = Vec::new();
    for (k, qp) in space.qps.iter().enumerate() {
        let g = &space.gradients[qp.cell];
        let jv = jac.at(k);
        for (la, alpha, row) in space.local_dofs(qp.cell) {
            for (lb, beta, col) in space.local_dofs(qp.cell) {
                let mut v = 0.0;
                for i in 0..dim {
                    v += jv[(alpha * dim + i) * n + beta] * g[la][i];
                }
                space.scatter(&mut triplets, row, col, qp.weight * v * qp.bary[lb]);
            }
        }
    }
    let nf = space.num_free();
    Ok(SparseOperator::new(CsrMatrix::from_triplets(nf, nf, triplets)))
}

/// Exact P1 mass matrix `∫ u^α φ^α` over the free dofs.
pub fn assemble_mass(space: &FemSpace) -> SparseOperator {
    let dim = space.dim();
    let mut triplets = Vec::new();
    for c in 0..space.mesh.num_cells() {
        let m = space.mesh.cell_measure(c);
        let (diag, off) = match dim {
            1 => (m / 3.0, m / 6.0),
            _ => (m / 6.0, m / 12.0),
        };
        for (la, alpha, row) in space.local_dofs(c) {
            for (lb, beta, col) in space.local_dofs(c) {
                if alpha == beta {
                    space.scatter(&mut triplets, row, col, if la == lb { diag } else { off });
                }
            }
        }
    }
    let nf = space.num_free();
    SparseOperator::new(CsrMatrix::from_triplets(nf, nf, triplets))
}

/// Gram matrix of the discrete `W^{1,2}` inner product on the free dofs.
pub fn assemble_h1_gram(space: &FemSpace) -> SparseOperator {
    let id = crate::coeff::Tensor4::identity(space.ncomp, space.dim());
    let stiffness = assemble_diffusion(space, &id).expect("identity tensor is finite");
    stiffness.add(&assemble_mass(space))
}

/// Solves `A u + b = 0` for the free dofs; constrained entries are zero.
pub fn solve_linear(space: &Arc<FemSpace>, a: &SparseOperator, b: &LoadFunctional) -> Result<DiscreteField, FemError> {
    let lu = a.factor()?;
    solve_factored(space, a, &lu, b)
}

/// As [`solve_linear`] with a precomputed factorization of `a`.
pub fn solve_factored(
    space: &Arc<FemSpace>,
    a: &SparseOperator,
    lu: &LuFactor,
    b: &LoadFunctional,
) -> Result<DiscreteField, FemError> {
    if b.values.len() != a.dim() {
        return Err(FemError::Length { what: "load", expected: a.dim(), got: b.values.len() });
    }
    let rhs: Vec<f64> = b.values.iter().map(|v| -v).collect();
    let mut x = lu.solve(&rhs)?;
    let bound = 1e-10 * (1.0 + norm2(&rhs));
    let residual = |x: &[f64]| {
        let ax = a.apply(x);
        ax.iter().zip(&rhs).map(|(p, q)| q - p).collect::<Vec<_>>()
    };
    let mut r = residual(&x);
    if norm2(&r) > bound {
        // one step of iterative refinement
        let dx = lu.solve(&r)?;
        x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
        r = residual(&x);
        let res = norm2(&r);
        if res > bound || !res.is_finite() {
            return Err(SolveError::Inaccurate { residual: res, bound, pivot_ratio: lu.pivot_ratio() }.into());
        }
    }
    Ok(DiscreteField::from_free(space, &x))
}

/// P1 interpolation of `u` at `point`.
pub fn evaluate(u: &DiscreteField, point: &[f64]) -> Result<Vec<f64>, FemError> {
    let space = &u.space;
    let (c, bary) = space.mesh.locate(point).ok_or_else(|| FemError::OutsideDomain(point.to_vec()))?;
    let n = space.ncomp;
    let mut out = vec![0.0; n];
    for (l, &v) in space.mesh.cell(c).iter().enumerate() {
        for (a, o) in out.iter_mut().enumerate() {
            *o += bary[l] * u.values[space.dof(v, a)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::Tensor4;
    use crate::mesh::{build_interval_mesh, build_periodic_cell_mesh, build_unit_square_mesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn interval(n: usize) -> Arc<FemSpace> {
        FemSpace::dirichlet(Arc::new(build_interval_mesh(n).unwrap()), 1)
    }

    #[test]
    fn unit_diffusion_on_two_cells() {
        let space = interval(2);
        let a = assemble_diffusion(&space, &Tensor4::identity(1, 1)).unwrap();
        assert_eq!(a.dim(), 1);
        assert!((a.matrix().get(0, 0) - 4.0).abs() < 1e-14);
        assert!(a.is_symmetric());
    }

    #[test]
    fn diffusion_is_linear_in_the_tensor() {
        let space = FemSpace::dirichlet(Arc::new(build_unit_square_mesh(4).unwrap()), 2);
        let one = assemble_diffusion(&space, &Tensor4::identity(2, 2)).unwrap();
        let three = assemble_diffusion(&space, &Tensor4::scalar(2, 2, 3.0)).unwrap();
        for (r, c, v) in one.matrix().triplets() {
            assert!((three.matrix().get(r, c) - 3.0 * v).abs() < 1e-13);
        }
        assert!(three.matrix().is_symmetric(1e-14));
    }

    #[test]
    fn nonsymmetric_tensor_flagged() {
        let space = FemSpace::dirichlet(Arc::new(build_unit_square_mesh(3).unwrap()), 2);
        let mut t = Tensor4::identity(2, 2);
        t.set(0, 1, 0, 0, 0.3);
        let a = assemble_diffusion(&space, &t).unwrap();
        assert!(!a.is_symmetric());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let space = interval(4);
        assert!(matches!(assemble_diffusion(&space, &Tensor4::identity(2, 1)), Err(FemError::Shape(..))));
    }

    #[test]
    fn divergence_loads() {
        let space = interval(8);
        let ones = QuadField::from_fn(&space, 1, |_, out| out[0] = 1.0);
        let b = assemble_divergence_load(&space, &ones).unwrap();
        assert!(b.values().iter().all(|v| v.abs() < 1e-14));
        let zero = QuadField::zeros(&space, 1);
        assert!(assemble_divergence_load(&space, &zero).unwrap().values().iter().all(|&v| v == 0.0));

        let space = interval(2);
        let lin = QuadField::from_fn(&space, 1, |x, out| out[0] = x[0]);
        let b = assemble_divergence_load(&space, &lin).unwrap();
        assert!((b.values()[0] + 0.5).abs() < 1e-15);

        let bad = QuadField::from_fn(&space, 1, |_, out| out[0] = f64::NAN);
        assert!(matches!(assemble_divergence_load(&space, &bad), Err(FemError::NonFinite { .. })));
    }

    #[test]
    fn jacobian_coupling_examples() {
        let space = interval(2);
        let one = QuadField::from_fn(&space, 1, |_, out| out[0] = 1.0);
        let c = assemble_jacobian_coupling(&space, &one).unwrap();
        assert!(c.matrix().get(0, 0).abs() < 1e-15);

        let space = FemSpace::dirichlet(Arc::new(build_unit_square_mesh(4).unwrap()), 2);
        let zero = QuadField::zeros(&space, 8);
        assert_eq!(assemble_jacobian_coupling(&space, &zero).unwrap().matrix().nnz(), 0);
        let j = QuadField::from_fn(&space, 8, |x, out| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = (k as f64 + 1.0) * x[0] - x[1];
            }
        });
        let c1 = assemble_jacobian_coupling(&space, &j).unwrap();
        let c2 = assemble_jacobian_coupling(&space, &j.scaled(2.5)).unwrap();
        for (r, cc, v) in c1.matrix().triplets() {
            assert!((c2.matrix().get(r, cc) - 2.5 * v).abs() < 1e-13 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn coupling_matches_load_of_linearized_flux() {
        // C u == D(J u) when both use the same quadrature
        let space = FemSpace::new(
            Arc::new(build_unit_square_mesh(5).unwrap()),
            2,
            Constraint::Dirichlet,
            Quadrature::ThreePoint,
        )
        .unwrap();
        let j = QuadField::from_fn(&space, 8, |x, out| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = (k as f64 * 0.7 + x[0]).sin() + x[1];
            }
        });
        let u = DiscreteField::interpolate(&space, |x, out| {
            out[0] = (3.0 * x[0]).sin() * x[1];
            out[1] = x[0] * x[0] - x[1];
        });
        let c = assemble_jacobian_coupling(&space, &j).unwrap();
        let cu = c.apply(&u.free_values());
        let uq = u.at_quadrature();
        let ju = QuadField::from_vec(
            4,
            (0..space.quad_points().len())
                .flat_map(|k| {
                    let (jv, uv) = (j.at(k), uq.at(k));
                    (0..4).map(move |r| jv[r * 2] * uv[0] + jv[r * 2 + 1] * uv[1])
                })
                .collect(),
        );
        let b = assemble_divergence_load(&space, &ju).unwrap();
        for (p, q) in cu.iter().zip(b.values()) {
            assert!((p - q).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_load_gives_zero_solution() {
        let space = interval(10);
        let a = assemble_diffusion(&space, &Tensor4::identity(1, 1)).unwrap();
        let u = solve_linear(&space, &a, &LoadFunctional::zeros(&space)).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flux_load_two_point_problem() {
        // (u' + x)' = 0, u(0) = u(1) = 0  =>  u = x(1-x)/2, exact at nodes for P1
        let space = interval(16);
        let a = assemble_diffusion(&space, &Tensor4::identity(1, 1)).unwrap();
        let g = QuadField::from_fn(&space, 1, |x, out| out[0] = x[0]);
        let b = assemble_divergence_load(&space, &g).unwrap();
        let u = solve_linear(&space, &a, &b).unwrap();
        for v in 0..=16 {
            let x = v as f64 / 16.0;
            assert!((u.nodal(v, 0) - x * (1.0 - x) / 2.0).abs() < 1e-13);
        }
        assert!((evaluate(&u, &[0.5]).unwrap()[0] - 0.125).abs() < 1e-13);

        let space = interval(2);
        let a = assemble_diffusion(&space, &Tensor4::identity(1, 1)).unwrap();
        let u = solve_linear(&space, &a, &LoadFunctional::new(vec![-0.5])).unwrap();
        assert!((u.nodal(1, 0) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn galerkin_residual_vanishes() {
        let space = FemSpace::dirichlet(Arc::new(build_unit_square_mesh(12).unwrap()), 2);
        let mut t = Tensor4::identity(2, 2);
        t.set(0, 1, 0, 0, 0.4);
        t.set(1, 0, 1, 1, -0.2);
        let a = assemble_diffusion(&space, &t).unwrap();
        let g = QuadField::from_fn(&space, 4, |x, out| {
            out.copy_from_slice(&[x[0] * x[1], (5.0 * x[0]).sin(), x[1], 1.0 - x[0]]);
        });
        let b = assemble_divergence_load(&space, &g).unwrap();
        let u = solve_linear(&space, &a, &b).unwrap();
        let au = a.apply(&u.free_values());
        let r: Vec<f64> = au.iter().zip(b.values()).map(|(p, q)| p + q).collect();
        assert!(norm2(&r) <= 1e-10 * (1.0 + b.euclidean_norm()));
    }

    #[test]
    fn positive_definite_on_random_vectors() {
        let space = FemSpace::dirichlet(Arc::new(build_unit_square_mesh(6).unwrap()), 1);
        let a = assemble_diffusion(&space, &Tensor4::scalar(1, 2, 2.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x: Vec<f64> = (0..a.dim()).map(|_| rng.random::<f64>() - 0.5).collect();
            let ax = a.apply(&x);
            assert!(x.iter().zip(&ax).map(|(p, q)| p * q).sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn assembly_is_bit_stable() {
        let space = FemSpace::dirichlet(Arc::new(build_unit_square_mesh(10).unwrap()), 2);
        let mut t = Tensor4::identity(2, 2);
        t.set(0, 1, 0, 1, 0.25);
        let a = assemble_diffusion(&space, &t).unwrap();
        let b = assemble_diffusion(&space, &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn assembly_sums_cell_contributions() {
        // total of all entries of the natural (unconstrained) stiffness is
        // zero: constants are in the kernel of every cell matrix
        let mesh = Arc::new(build_unit_square_mesh(5).unwrap());
        let space = FemSpace::new(mesh, 1, Constraint::Natural, Quadrature::Midpoint).unwrap();
        let a = assemble_diffusion(&space, &Tensor4::scalar(1, 2, 1.7)).unwrap();
        let ones = vec![1.0; a.dim()];
        assert!(a.apply(&ones).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn periodic_space_counts() {
        let mesh = Arc::new(build_periodic_cell_mesh(4, 2).unwrap());
        let space = FemSpace::new(mesh, 2, Constraint::PeriodicPinned, Quadrature::Midpoint).unwrap();
        assert_eq!(space.num_dofs(), 32);
        assert_eq!(space.num_free(), 30);
        let mesh = Arc::new(build_interval_mesh(4).unwrap());
        assert!(matches!(
            FemSpace::new(mesh, 1, Constraint::PeriodicPinned, Quadrature::Midpoint),
            Err(FemError::NotPeriodic)
        ));
    }

    #[test]
    fn evaluate_interpolates() {
        let space = FemSpace::dirichlet(Arc::new(build_unit_square_mesh(4).unwrap()), 1);
        let u = DiscreteField::interpolate(&space, |x, out| out[0] = x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1]));
        let v = space.mesh().num_vertices() / 2;
        let p = space.mesh().vertex(v);
        assert!((evaluate(&u, &p).unwrap()[0] - u.nodal(v, 0)).abs() < 1e-15);
        assert!(matches!(evaluate(&u, &[1.2, 0.3]), Err(FemError::OutsideDomain(_))));

        let space = interval(4);
        let u = DiscreteField::interpolate(&space, |x, out| out[0] = 2.0 * x[0]);
        // boundary dofs are forced to zero, so test inside a cell away from x = 1
        let mid = evaluate(&u, &[0.375]).unwrap()[0];
        assert!((mid - 0.5 * (u.nodal(1, 0) + u.nodal(2, 0))).abs() < 1e-15);
    }

    #[test]
    fn mass_and_gram() {
        let mesh = Arc::new(build_unit_square_mesh(3).unwrap());
        let space = FemSpace::new(mesh, 1, Constraint::Natural, Quadrature::Midpoint).unwrap();
        let m = assemble_mass(&space);
        let ones = vec![1.0; m.dim()];
        let total: f64 = m.apply(&ones).iter().sum();
        assert!((total - 1.0).abs() < 1e-13);
        let s = assemble_h1_gram(&space);
        assert!(s.is_symmetric());
    }
}
