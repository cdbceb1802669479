//! Norms and convergence diagnostics.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coeff::{CoeffError, DiffusionTensor, HomogenizedTensor, TensorField};
use crate::fem::{
    assemble_diffusion, assemble_divergence_load, solve_linear, Constraint, DiscreteField, FemError, FemSpace,
    Quadrature, QuadField,
};
use crate::mesh::{Domain, MeshError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NormError {
    #[error("exponent p = {0} must be at least 2")]
    Exponent(f64),
    #[error("Morrey exponent λ = {lambda} must lie in [0, {dim})")]
    MorreyExponent { lambda: f64, dim: usize },
    #[error("rate fit needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("rate fit needs positive values, got ({0}, {1})")]
    NonPositive(f64, f64),
    #[error("field width {got} does not match {expected}")]
    Width { expected: usize, got: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Coeff(#[from] CoeffError),
}

/// `Σ_α max |u^α|` over the nodes (exact for P1).
pub fn linf_norm(u: &DiscreteField) -> f64 {
    let n = u.space().ncomp();
    let mut sup = vec![0.0f64; n];
    for (d, v) in u.values().iter().enumerate() {
        sup[d % n] = sup[d % n].max(v.abs());
    }
    sup.iter().sum()
}

/// `(Σ_α ∫ |u^α|^p + Σ_i |∂_i u^α|^p)^{1/p}`; gradients are exact per cell
/// and values use a 3-point rule, exact for quadratics.
pub fn w1p_norm(u: &DiscreteField, p: f64) -> Result<f64, NormError> {
    if !(p >= 2.0) {
        return Err(NormError::Exponent(p));
    }
    let space = u.space();
    let mesh = space.mesh();
    let (n, dim) = (space.ncomp(), space.dim());
    let rule = Quadrature::ThreePoint.rule(dim);
    let grads = u.cell_gradients();
    let mut total = 0.0;
    for c in 0..mesh.num_cells() {
        let m = mesh.cell_measure(c);
        let verts = mesh.cell(c);
        let mut cell = 0.0;
        for a in 0..n {
            for i in 0..dim {
                cell += grads[(c * n + a) * dim + i].abs().powf(p);
            }
            for (bary, w) in &rule {
                let v: f64 = verts.iter().enumerate().map(|(l, &vx)| bary[l] * u.nodal(vx, a)).sum();
                cell += w * v.abs().powf(p);
            }
        }
        total += m * cell;
    }
    Ok(total.powf(1.0 / p))
}

/// `(Σ_α Σ_i ∫ |∂_i u^α|^p)^{1/p}`.
pub fn gradient_lp_norm(u: &DiscreteField, p: f64) -> f64 {
    let mesh = u.space().mesh();
    let w = u.space().ncomp() * u.space().dim();
    let grads = u.cell_gradients();
    let total: f64 = (0..mesh.num_cells())
        .map(|c| mesh.cell_measure(c) * grads[c * w..(c + 1) * w].iter().map(|g| g.abs().powf(p)).sum::<f64>())
        .sum();
    total.powf(1.0 / p)
}

/// Dyadic radii `1, 1/2, …` down to the last one `≥ 2h`.
pub fn dyadic_radii(h: f64) -> Vec<f64> {
    let mut radii = vec![1.0];
    while radii.last().unwrap() / 2.0 >= 2.0 * h {
        radii.push(radii.last().unwrap() / 2.0);
    }
    radii
}

/// Discrete Morrey seminorm of a per-cell field of width `width`:
/// `sup r^{-λ/2} (Σ ∫_{Ω ∩ B(x,r)} |G|²)^{1/2}` over centers at every
/// `center_stride`-th vertex and dyadic radii. A cell belongs to a ball when
/// its centroid does.
pub fn morrey_seminorm(
    space: &FemSpace,
    field: &[f64],
    width: usize,
    lambda: f64,
    center_stride: usize,
) -> Result<f64, NormError> {
    let mesh = space.mesh();
    let dim = mesh.dim();
    if !(0.0..dim as f64).contains(&lambda) {
        return Err(NormError::MorreyExponent { lambda, dim });
    }
    if field.len() != mesh.num_cells() * width {
        return Err(NormError::Width { expected: mesh.num_cells() * width, got: field.len() });
    }
    let radii = dyadic_radii(mesh.h());
    let cells: Vec<([f64; 2], f64)> = (0..mesh.num_cells())
        .map(|c| {
            let e: f64 = field[c * width..(c + 1) * width].iter().map(|g| g * g).sum();
            (mesh.centroid(c), mesh.cell_measure(c) * e)
        })
        .collect();
    let stride = center_stride.max(1);
    let centers: Vec<usize> = (0..mesh.num_vertices()).step_by(stride).collect();
    let best = centers
        .par_iter()
        .map(|&v| {
            let x = mesh.vertex(v);
            // bin[k]: energy of cells whose smallest containing radius is radii[k]
            let mut bins = vec![0.0; radii.len()];
            for (c, e) in &cells {
                let d = ((c[0] - x[0]).powi(2) + (c[1] - x[1]).powi(2)).sqrt();
                if d >= radii[0] {
                    continue;
                }
                let mut k = 0;
                while k + 1 < radii.len() && d < radii[k + 1] {
                    k += 1;
                }
                bins[k] += e;
            }
            let mut sup = 0.0f64;
            let mut inner = 0.0;
            for k in (0..radii.len()).rev() {
                inner += bins[k];
                sup = sup.max(radii[k].powf(-lambda / 2.0) * inner.sqrt());
            }
            sup
        })
        .reduce(|| 0.0, f64::max);
    Ok(best)
}

/// Least-squares fit of `ln e = slope · ln ε + intercept`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<(f64, f64), NormError> {
    if points.len() < 2 {
        return Err(NormError::TooFewPoints(points.len()));
    }
    if let Some(&(e, v)) = points.iter().find(|(e, v)| !(*e > 0.0 && *v > 0.0)) {
        return Err(NormError::NonPositive(e, v));
    }
    let m = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Inputs shared by the linear probes.
pub struct ProbeSetup<'a> {
    pub domain: Domain,
    pub ncomp: usize,
    /// Mesh cells per period; the mesh for `ε` has `round(cells_per_period / ε)` cells per side.
    pub cells_per_period: usize,
    /// `ε ↦ a(ε, ·)`.
    pub tensor: &'a (dyn Fn(f64) -> Result<TensorField, CoeffError> + Sync),
    /// Load flux `g(x)` of width `n·N`; the probes solve `A u + D g = 0`.
    pub load: &'a (dyn Fn(&[f64], &mut [f64]) + Sync),
}

impl ProbeSetup<'_> {
    fn space(&self, eps: f64) -> Result<Arc<FemSpace>, NormError> {
        let cells = (self.cells_per_period as f64 / eps).round() as usize;
        let mesh = Arc::new(self.domain.mesh(cells)?);
        Ok(FemSpace::new(mesh, self.ncomp, Constraint::Dirichlet, Quadrature::Midpoint)?)
    }

    fn solve(&self, space: &Arc<FemSpace>, tensor: &dyn DiffusionTensor) -> Result<DiscreteField, NormError> {
        let a = assemble_diffusion(space, tensor)?;
        let g = QuadField::from_fn(space, self.ncomp * space.dim(), |x, out| (self.load)(x, out));
        let b = assemble_divergence_load(space, &g)?;
        Ok(solve_linear(space, &a, &b)?)
    }
}

/// Test function `Π_i sin((k_i − ½) π x_i)` and its gradient.
fn quarter_wave(modes: &[usize], x: &[f64]) -> (f64, [f64; 2]) {
    let w: Vec<f64> = modes.iter().map(|&k| (k as f64 - 0.5) * std::f64::consts::PI).collect();
    let s: Vec<f64> = w.iter().zip(x).map(|(w, x)| (w * x).sin()).collect();
    let c: Vec<f64> = w.iter().zip(x).map(|(w, x)| w * (w * x).cos()).collect();
    let value = s.iter().product();
    let mut grad = [0.0; 2];
    for i in 0..modes.len() {
        grad[i] = c[i] * s.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, v)| v).product::<f64>();
    }
    (value, grad)
}

/// Mode tuples `(k_1, …, k_N)` with `k_i ∈ 1..=4`, first axis fastest.
pub fn probe_modes(dim: usize) -> Vec<Vec<usize>> {
    match dim {
        1 => (1..=4).map(|k| vec![k]).collect(),
        _ => (1..=4).flat_map(|k2| (1..=4).map(move |k1| vec![k1, k2])).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HConvergenceRow {
    pub eps: f64,
    pub h: f64,
    /// `|∫ (u_ε − û)·ψ|` per (component, mode), component slowest.
    pub value_pairings: Vec<f64>,
    /// `|∫ (a_ε∇u_ε − â∇û)·∇ψ|` per (component, mode).
    pub flux_pairings: Vec<f64>,
    pub linf: f64,
    pub grad_l2: f64,
}

/// Solves `A_ε u_ε + D g = 0` and `Â û + D g = 0` on the same mesh for each
/// `ε` and pairs the differences with quarter-wave sinusoids.
pub fn h_convergence_probe(
    setup: &ProbeSetup,
    ahat: &HomogenizedTensor,
    eps_list: &[f64],
) -> Vec<Result<HConvergenceRow, NormError>> {
    eps_list
        .par_iter()
        .map(|&eps| {
            let space = setup.space(eps)?;
            let tensor = (setup.tensor)(eps)?;
            let ue = setup.solve(&space, &tensor)?;
            let uh = setup.solve(&space, ahat)?;
            let (n, dim) = (space.ncomp(), space.dim());
            let modes = probe_modes(dim);
            let ge = ue.cell_gradients();
            let gh = uh.cell_gradients();
            let diff = ue.sub(&uh).at_quadrature();
            let mut vp = vec![0.0; n * modes.len()];
            let mut fp = vec![0.0; n * modes.len()];
            for (k, qp) in space.quad_points().iter().enumerate() {
                let x = &qp.x[..dim];
                let te = tensor.eval(x);
                let th = ahat.tensor();
                for alpha in 0..n {
                    let mut flux = [0.0; 2];
                    for (i, f) in flux.iter_mut().enumerate().take(dim) {
                        for beta in 0..n {
                            for j in 0..dim {
                                let idx = (qp.cell * n + beta) * dim + j;
                                *f += te.get(alpha, beta, i, j) * ge[idx] - th.get(alpha, beta, i, j) * gh[idx];
                            }
                        }
                    }
                    for (m, mode) in modes.iter().enumerate() {
                        let (psi, dpsi) = quarter_wave(mode, x);
                        vp[alpha * modes.len() + m] += qp.weight * diff.at(k)[alpha] * psi;
                        fp[alpha * modes.len() + m] +=
                            qp.weight * (0..dim).map(|i| flux[i] * dpsi[i]).sum::<f64>();
                    }
                }
            }
            let dg: Vec<f64> = ge.iter().zip(&gh).map(|(a, b)| a - b).collect();
            let mesh = space.mesh();
            let w = n * dim;
            let grad_l2 = (0..mesh.num_cells())
                .map(|c| mesh.cell_measure(c) * dg[c * w..(c + 1) * w].iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            Ok(HConvergenceRow {
                eps,
                h: mesh.h(),
                value_pairings: vp.iter().map(|v| v.abs()).collect(),
                flux_pairings: fp.iter().map(|v| v.abs()).collect(),
                linf: linf_norm(&ue.sub(&uh)),
                grad_l2,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeyersRow {
    pub eps: f64,
    pub h: f64,
    /// `‖∇u_ε‖_{L^p}` for each `p` of the grid.
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeyersReport {
    pub p_grid: Vec<f64>,
    pub rows: Vec<MeyersRow>,
    /// Largest `p` such that, for it and every smaller grid value, the norm
    /// sequence over decreasing `ε` looks bounded (see [`looks_bounded`]).
    pub observed_range: Option<f64>,
}

/// A sequence looks bounded when its last growth ratio is at most `1.05`
/// and no ratio exceeds both its predecessor and `1.05`.
pub fn looks_bounded(seq: &[f64]) -> bool {
    let ratios: Vec<f64> = seq.windows(2).map(|w| w[1] / w[0]).collect();
    let settling = ratios.windows(2).all(|r| r[1] <= r[0].max(1.05));
    settling && ratios.last().is_none_or(|&r| r <= 1.05)
}

/// Gradient `L^p` norms of `A_ε u_ε + D g = 0` over `ε` and `p`.
pub fn meyers_probe(setup: &ProbeSetup, eps_list: &[f64], p_grid: &[f64]) -> Result<MeyersReport, NormError> {
    if let Some(&p) = p_grid.iter().find(|&&p| !(2.0..=4.0).contains(&p)) {
        return Err(NormError::Exponent(p));
    }
    let rows = eps_list
        .par_iter()
        .map(|&eps| {
            let space = setup.space(eps)?;
            let tensor = (setup.tensor)(eps)?;
            let u = setup.solve(&space, &tensor)?;
            Ok(MeyersRow { eps, h: space.mesh().h(), norms: p_grid.iter().map(|&p| gradient_lp_norm(&u, p)).collect() })
        })
        .collect::<Result<Vec<_>, NormError>>()?;
    let mut observed_range = None;
    for (k, &p) in p_grid.iter().enumerate() {
        let seq: Vec<f64> = rows.iter().map(|r| r.norms[k]).collect();
        if !looks_bounded(&seq) {
            break;
        }
        observed_range = Some(p);
    }
    Ok(MeyersReport { p_grid: p_grid.to_vec(), rows, observed_range })
}
