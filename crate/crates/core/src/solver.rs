//! Homogenized Newton solve, nondegeneracy margin, approximate solution and
//! the frozen-Jacobian fixed-point iteration.
//!
//! With `C(J)` the coupling operator of a pointwise Jacobian `J` (see
//! [`assemble_jacobian_coupling`]) the fixed-point map is
//! `G_ε(u) = (A_ε + C(F′(u₀)))⁻¹ D(F′(u₀)u − F(u))`, started from
//! `ū_ε = −A_ε⁻¹ D F(u₀)`.

use std::sync::Arc;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeff::DiffusionTensor;
use crate::fem::{
    assemble_diffusion, assemble_divergence_load, assemble_h1_gram, assemble_jacobian_coupling, solve_factored,
    DiscreteField, FemError, FemSpace, LoadFunctional, QuadField, SparseOperator,
};
use crate::nonlin::{NonlinError, Nonlinearity};
use crate::norms::{linf_norm, w1p_norm};
use crate::sparse::{norm2, LuFactor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Nonlin(#[from] NonlinError),
    #[error("invalid solver configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Euclidean norm of the Newton residual vector.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Discrete `W^{1,2}` norm of the fixed-point step.
    pub fixed_point_tol: f64,
    pub fixed_point_max_iter: usize,
    /// Uniqueness-ball radius; `None` means `0.1 (1 + ‖u₀‖_∞)`.
    pub delta: Option<f64>,
    /// Required mesh cells per period: `h ≤ ε / min_cells_per_period`.
    pub min_cells_per_period: f64,
    /// Consecutive step-norm increases that count as divergence.
    pub divergence_window: usize,
    /// Power iterations for the nondegeneracy margin.
    pub margin_max_iter: usize,
    pub margin_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            newton_tol: 1e-10,
            newton_max_iter: 25,
            fixed_point_tol: 1e-9,
            fixed_point_max_iter: 50,
            delta: None,
            min_cells_per_period: 8.0,
            divergence_window: 3,
            margin_max_iter: 30,
            margin_tol: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("newton_tol", self.newton_tol),
            ("fixed_point_tol", self.fixed_point_tol),
            ("min_cells_per_period", self.min_cells_per_period),
            ("margin_tol", self.margin_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(SolverError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(SolverError::Config(format!("delta must be positive, got {d}")));
            }
        }
        let counts = [
            ("newton_max_iter", self.newton_max_iter),
            ("fixed_point_max_iter", self.fixed_point_max_iter),
            ("divergence_window", self.divergence_window),
            ("margin_max_iter", self.margin_max_iter),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SolverError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// The uniqueness radius for a given `u₀`.
    pub fn delta_for(&self, u0: &DiscreteField) -> f64 {
        self.delta.unwrap_or_else(|| 0.1 * (1.0 + linf_norm(u0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    MaxIter,
    Diverged,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxIter => "max-iter",
            Status::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverReport {
    pub iterations: usize,
    /// Euclidean norm of `A u + D F(u)` after each iteration.
    pub residuals: Vec<f64>,
    /// `W^{1,2}` norm of each step.
    pub steps: Vec<f64>,
    /// `steps[k] / steps[k-1]`; undefined for the first step.
    pub contractions: Vec<Option<f64>>,
    pub final_linf: f64,
    pub final_w12: f64,
    pub status: Status,
    /// Reason for a non-converged status, if one is known.
    pub failure: Option<String>,
}

impl SolverReport {
    fn new() -> Self {
        SolverReport {
            iterations: 0,
            residuals: Vec::new(),
            steps: Vec::new(),
            contractions: Vec::new(),
            final_linf: 0.0,
            final_w12: 0.0,
            status: Status::MaxIter,
            failure: None,
        }
    }

    fn record(&mut self, residual: f64, step: f64) {
        let ratio = self.steps.last().map(|&prev| step / prev);
        self.iterations += 1;
        self.residuals.push(residual);
        self.steps.push(step);
        self.contractions.push(ratio);
    }

    fn finish(&mut self, u: &DiscreteField) {
        self.final_linf = linf_norm(u);
        self.final_w12 = w12(u);
    }

    /// Largest contraction factor from iteration `from` (1-based) onward.
    pub fn max_contraction_from(&self, from: usize) -> Option<f64> {
        self.contractions.iter().skip(from.saturating_sub(1)).flatten().copied().reduce(f64::max)
    }

    fn growing(&self, window: usize) -> bool {
        let s = &self.steps;
        s.len() > window && s[s.len() - window - 1..].windows(2).all(|w| w[1] > w[0])
    }
}

fn w12(u: &DiscreteField) -> f64 {
    w1p_norm(u, 2.0).expect("p = 2 is admissible")
}

/// `A u + D F(u)` over the free dofs.
pub fn residual(a: &SparseOperator, nl: &Nonlinearity, u: &DiscreteField) -> Result<Vec<f64>, SolverError> {
    let space = u.space();
    let b = assemble_divergence_load(space, &nl.eval_f(u)?)?;
    let mut r = a.apply(&u.free_values());
    r.iter_mut().zip(b.values()).for_each(|(p, q)| *p += q);
    Ok(r)
}

/// Newton's method for `A u + D F(u) = 0` with Jacobian `A + C(F′(u))`.
pub fn newton(
    space: &Arc<FemSpace>,
    a: &SparseOperator,
    nl: &Nonlinearity,
    start: DiscreteField,
    cfg: &SolverConfig,
) -> Result<(DiscreteField, SolverReport), SolverError> {
    let mut u = start;
    let mut report = SolverReport::new();
    let mut r = residual(a, nl, &u)?;
    let mut rnorm = norm2(&r);
    if rnorm <= cfg.newton_tol {
        report.status = Status::Converged;
        report.finish(&u);
        return Ok((u, report));
    }
    for _ in 0..cfg.newton_max_iter {
        let jac = assemble_jacobian_coupling(space, &nl.eval_jacobian(&u)?)?;
        let j = a.add(&jac);
        let step = match solve_factored_raw(&j, &LoadFunctional::new(r.clone())) {
            Ok(s) => s,
            Err(e) => {
                report.status = Status::Diverged;
                report.failure = Some(format!("Newton Jacobian: {e}"));
                break;
            }
        };
        let s = DiscreteField::from_free(space, &step);
        u = u.axpy(1.0, &s);
        r = match residual(a, nl, &u) {
            Ok(r) => r,
            Err(e) => {
                report.status = Status::Diverged;
                report.failure = Some(e.to_string());
                break;
            }
        };
        rnorm = norm2(&r);
        report.record(rnorm, w12(&s));
        debug!("newton {}: residual {rnorm:.3e}", report.iterations);
        if !rnorm.is_finite() {
            report.status = Status::Diverged;
            report.failure = Some("non-finite residual".into());
            break;
        }
        if rnorm <= cfg.newton_tol {
            report.status = Status::Converged;
            break;
        }
        let rs = &report.residuals;
        if rs.len() > cfg.divergence_window && rs[rs.len() - cfg.divergence_window - 1..].windows(2).all(|w| w[1] > w[0]) {
            report.status = Status::Diverged;
            report.failure = Some("residual grew over consecutive iterations".into());
            break;
        }
    }
    report.finish(&u);
    Ok((u, report))
}

/// Solves `M x + b = 0` and returns the free vector.
fn solve_factored_raw(m: &SparseOperator, b: &LoadFunctional) -> Result<Vec<f64>, FemError> {
    let lu = m.factor()?;
    solve_with(&lu, m, b)
}

fn solve_with(lu: &LuFactor, m: &SparseOperator, b: &LoadFunctional) -> Result<Vec<f64>, FemError> {
    let rhs: Vec<f64> = b.values().iter().map(|v| -v).collect();
    let mut x = lu.solve(&rhs)?;
    let bound = 1e-10 * (1.0 + norm2(&rhs));
    let res = |x: &[f64]| m.apply(x).iter().zip(&rhs).map(|(p, q)| q - p).collect::<Vec<_>>();
    let r = res(&x);
    if norm2(&r) > bound {
        let dx = lu.solve(&r)?;
        x.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
        let rn = norm2(&res(&x));
        if !(rn <= bound) {
            return Err(crate::sparse::SolveError::Inaccurate { residual: rn, bound, pivot_ratio: lu.pivot_ratio() }.into());
        }
    }
    Ok(x)
}

/// Solves `Â u₀ + D F(u₀) = 0` by Newton's method from zero.
pub fn solve_homogenized(
    space: &Arc<FemSpace>,
    ahat: &dyn DiffusionTensor,
    nl: &Nonlinearity,
    cfg: &SolverConfig,
) -> Result<(DiscreteField, SolverReport), SolverError> {
    cfg.validate()?;
    let a = assemble_diffusion(space, ahat)?;
    newton(space, &a, nl, DiscreteField::zeros(space), cfg)
}

/// Newton's method on the full oscillatory system `A_ε u + D F(u) = 0`.
/// Serves as an independent check of the fixed-point iteration.
pub fn solve_monolithic(
    space: &Arc<FemSpace>,
    tensor: &dyn DiffusionTensor,
    nl: &Nonlinearity,
    start: DiscreteField,
    cfg: &SolverConfig,
) -> Result<(DiscreteField, SolverReport), SolverError> {
    cfg.validate()?;
    let a = assemble_diffusion(space, tensor)?;
    newton(space, &a, nl, start, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Margin {
    /// Smallest singular value of the operator from `W^{1,2}` into its dual.
    pub value: f64,
    pub iterations: usize,
    pub factorization_failed: bool,
}

/// Margin of `Â + C(F′(u₀))`; positive means the linearization is
/// nondegenerate on the mesh.
pub fn nondegeneracy_margin(
    space: &Arc<FemSpace>,
    ahat: &dyn DiffusionTensor,
    nl: &Nonlinearity,
    u0: &DiscreteField,
    cfg: &SolverConfig,
) -> Result<Margin, SolverError> {
    let a = assemble_diffusion(space, ahat)?;
    let c = assemble_jacobian_coupling(space, &nl.eval_jacobian(u0)?)?;
    Ok(operator_margin(space, &a.add(&c), cfg))
}

/// `min ‖Jx‖_* / ‖x‖` in the discrete `W^{1,2}` norm with Gram matrix `S`,
/// by power iteration on the `S`-self-adjoint `J⁻¹ S J⁻ᵀ S`, whose largest
/// eigenvalue is `σ_min⁻²`.
pub fn operator_margin(space: &FemSpace, j: &SparseOperator, cfg: &SolverConfig) -> Margin {
    let s = assemble_h1_gram(space);
    let failed = Margin { value: 0.0, iterations: 0, factorization_failed: true };
    let Ok(lu) = j.factor() else { return failed };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut x = vec![1.0; j.dim()];
    let mut mu_prev = f64::NAN;
    let mut mu = 0.0;
    for it in 1..=cfg.margin_max_iter {
        let sx = s.apply(&x);
        let xnorm = dot(&x, &sx).sqrt();
        x.iter_mut().for_each(|v| *v /= xnorm);
        let sx: Vec<f64> = sx.iter().map(|v| v / xnorm).collect();
        let Ok(y) = lu.solve_transpose(&sx) else { return failed };
        let sy = s.apply(&y);
        let Ok(tx) = lu.solve(&sy) else { return failed };
        mu = dot(&tx, &sx);
        x = tx;
        if (mu - mu_prev).abs() <= cfg.margin_tol * mu.abs() {
            return Margin { value: mu.sqrt().recip(), iterations: it, factorization_failed: false };
        }
        mu_prev = mu;
    }
    Margin { value: mu.sqrt().recip(), iterations: cfg.margin_max_iter, factorization_failed: false }
}

fn check_resolution(space: &FemSpace, tensor: &dyn DiffusionTensor, cfg: &SolverConfig) {
    if let Some(eps) = tensor.scale() {
        let h = space.mesh().h();
        if h > eps / cfg.min_cells_per_period * (1.0 + 1e-12) {
            warn!("mesh width h = {h} exceeds ε/{} for ε = {eps}", cfg.min_cells_per_period);
        }
    }
}

/// The map `G_ε` with `A_ε + C(F′(u₀))` factorized once.
pub struct FixedPointMap {
    space: Arc<FemSpace>,
    nl: Nonlinearity,
    a: SparseOperator,
    a_lu: LuFactor,
    frozen: SparseOperator,
    frozen_lu: LuFactor,
    jac0: QuadField,
    u0: DiscreteField,
}

impl FixedPointMap {
    pub fn new(
        space: &Arc<FemSpace>,
        tensor: &dyn DiffusionTensor,
        nl: &Nonlinearity,
        u0: &DiscreteField,
        cfg: &SolverConfig,
    ) -> Result<Self, SolverError> {
        check_resolution(space, tensor, cfg);
        let a = assemble_diffusion(space, tensor)?;
        let jac0 = nl.eval_jacobian(u0)?;
        let frozen = a.add(&assemble_jacobian_coupling(space, &jac0)?);
        Ok(FixedPointMap {
            space: Arc::clone(space),
            nl: nl.clone(),
            a_lu: a.factor()?,
            a,
            frozen_lu: frozen.factor()?,
            frozen,
            jac0,
            u0: u0.clone(),
        })
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn u0(&self) -> &DiscreteField {
        &self.u0
    }

    /// `A_ε` on the free dofs.
    pub fn operator(&self) -> &SparseOperator {
        &self.a
    }

    /// `A_ε + C(F′(u₀))` on the free dofs.
    pub fn frozen_operator(&self) -> &SparseOperator {
        &self.frozen
    }

    /// `ū_ε`, the solution of `A_ε ū + D F(u₀) = 0`.
    pub fn approximate_solution(&self) -> Result<DiscreteField, SolverError> {
        let b = assemble_divergence_load(&self.space, &self.nl.eval_f(&self.u0)?)?;
        Ok(solve_factored(&self.space, &self.a, &self.a_lu, &b)?)
    }

    /// `G_ε(u)`: solves `(A_ε + C(F′(u₀))) v + D(F(u) − F′(u₀)u) = 0`.
    pub fn apply(&self, u: &DiscreteField) -> Result<DiscreteField, SolverError> {
        let f = self.nl.eval_f(u)?;
        let uq = u.at_quadrature();
        let (n, width) = (self.space.ncomp(), f.width());
        let mut g = f;
        for k in 0..uq.len() {
            let (j, uv) = (self.jac0.at(k), uq.at(k));
            let out = g.at_mut(k);
            for (r, o) in out.iter_mut().enumerate().take(width) {
                *o -= (0..n).map(|b| j[r * n + b] * uv[b]).sum::<f64>();
            }
        }
        let b = assemble_divergence_load(&self.space, &g)?;
        Ok(solve_factored(&self.space, &self.frozen, &self.frozen_lu, &b)?)
    }

    /// Euclidean norm of `A_ε u + D F(u)`.
    pub fn residual_norm(&self, u: &DiscreteField) -> Result<f64, SolverError> {
        Ok(norm2(&residual(&self.a, &self.nl, u)?))
    }

    /// Iterates `u_{l+1} = G_ε(u_l)` from `start`.
    pub fn iterate_from(&self, start: &DiscreteField, cfg: &SolverConfig) -> (DiscreteField, SolverReport) {
        let mut u = start.clone();
        let mut report = SolverReport::new();
        for _ in 0..cfg.fixed_point_max_iter {
            let next = match self.apply(&u).and_then(|v| self.residual_norm(&v).map(|r| (v, r))) {
                Ok(x) => x,
                Err(e) => {
                    report.status = Status::Diverged;
                    report.failure = Some(e.to_string());
                    break;
                }
            };
            let (v, res) = next;
            let step = w12(&v.sub(&u));
            report.record(res, step);
            u = v;
            debug!("fixed point {}: step {step:.3e}, residual {res:.3e}", report.iterations);
            if !step.is_finite() {
                report.status = Status::Diverged;
                report.failure = Some("non-finite iterate".into());
                break;
            }
            if step <= cfg.fixed_point_tol {
                report.status = Status::Converged;
                break;
            }
            if report.growing(cfg.divergence_window) {
                report.status = Status::Diverged;
                report.failure = Some(format!("step norm grew over {} iterations", cfg.divergence_window));
                break;
            }
        }
        report.finish(&u);
        (u, report)
    }

    /// `(‖G_ε(u₀) − u₀‖, ‖G_ε(ū_ε) − ū_ε‖)` in `W^{1,2}`.
    pub fn first_step_corrections(&self, ubar: &DiscreteField) -> Result<(f64, f64), SolverError> {
        let from_u0 = w12(&self.apply(&self.u0)?.sub(&self.u0));
        let from_ubar = w12(&self.apply(ubar)?.sub(ubar));
        Ok((from_u0, from_ubar))
    }
}

/// `ū_ε = −A_ε⁻¹ D F(u₀)`.
pub fn approximate_solution(
    space: &Arc<FemSpace>,
    tensor: &dyn DiffusionTensor,
    nl: &Nonlinearity,
    u0: &DiscreteField,
    cfg: &SolverConfig,
) -> Result<DiscreteField, SolverError> {
    check_resolution(space, tensor, cfg);
    let a = assemble_diffusion(space, tensor)?;
    let b = assemble_divergence_load(space, &nl.eval_f(u0)?)?;
    Ok(crate::fem::solve_linear(space, &a, &b)?)
}

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub u: DiscreteField,
    pub ubar: DiscreteField,
    pub report: SolverReport,
}

/// Runs the fixed-point iteration from `ū_ε`.
pub fn fixed_point_solve(
    space: &Arc<FemSpace>,
    tensor: &dyn DiffusionTensor,
    nl: &Nonlinearity,
    u0: &DiscreteField,
    cfg: &SolverConfig,
) -> Result<(FixedPointMap, FixedPointResult), SolverError> {
    cfg.validate()?;
    let map = FixedPointMap::new(space, tensor, nl, u0, cfg)?;
    let ubar = map.approximate_solution()?;
    let (u, report) = map.iterate_from(&ubar, cfg);
    Ok((map, FixedPointResult { u, ubar, report }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trial {
    pub seed: u64,
    pub status: Status,
    pub iterations: usize,
    /// `‖u_trial − u_ε‖_∞`.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub delta: f64,
    pub magnitude: f64,
    pub tolerance: f64,
    pub trials: Vec<Trial>,
    pub all_agree: bool,
    /// The perturbation exceeds `δ`; agreement is not expected.
    pub outside_ball: bool,
}

/// Restarts the iteration from `ū_ε + p` for seeded random nodal `p` with
/// `‖p‖_∞ = magnitude` and compares the limits with `u_eps`.
pub fn local_uniqueness_probe(
    map: &FixedPointMap,
    ubar: &DiscreteField,
    u_eps: &DiscreteField,
    cfg: &SolverConfig,
    magnitude: f64,
    trials: usize,
    seed: u64,
) -> UniquenessReport {
    let delta = cfg.delta_for(map.u0());
    let tolerance = 10.0 * cfg.fixed_point_tol;
    let space = map.space();
    let trials: Vec<Trial> = (0..trials as u64)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t));
            let free: Vec<f64> = (0..space.num_free()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = DiscreteField::from_free(space, &free);
            let size = linf_norm(&p);
            let scale = if size > 0.0 { magnitude / size } else { 0.0 };
            let start = ubar.axpy(scale, &p);
            let (u, report) = map.iterate_from(&start, cfg);
            Trial { seed: seed.wrapping_add(t), status: report.status, iterations: report.iterations, distance: linf_norm(&u.sub(u_eps)) }
        })
        .collect();
    let all_agree = trials.iter().all(|t| t.status == Status::Converged && t.distance <= tolerance);
    UniquenessReport { delta, magnitude, tolerance, trials, all_agree, outside_ball: magnitude > delta }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{scale_periodic, Evaluator, SampleGrid, Tensor4, TensorField};
    use crate::expr::{Expr, ScalarFunction, Table};
    use crate::fem::{evaluate, Constraint, Quadrature};
    use crate::mesh::build_interval_mesh;
    use crate::nonlin::{Catalog, Monomial, Term};

    fn space(n: usize, ncomp: usize) -> Arc<FemSpace> {
        FemSpace::new(Arc::new(build_interval_mesh(n).unwrap()), ncomp, Constraint::Dirichlet, Quadrature::Midpoint)
            .unwrap()
    }

    fn source(s: &str) -> Term {
        Term {
            alpha: 0,
            i: 0,
            g: ScalarFunction::Expression(Expr::parse(s, 1).unwrap()),
            p0: 4.0,
            h: Catalog::one(1),
        }
    }

    fn model() -> Nonlinearity {
        let quad = Term {
            alpha: 0,
            i: 0,
            g: ScalarFunction::Constant(0.25),
            p0: 4.0,
            h: Catalog::Polynomial(vec![Monomial { coeff: 1.0, powers: vec![2] }]),
        };
        Nonlinearity::new(1, 1, vec![source("0.5*sin(2*pi*x)"), quad]).unwrap()
    }

    fn two_phase() -> TensorField {
        let s = ScalarFunction::Table(Table::new(vec![2], vec![1.0, 4.0]).unwrap());
        TensorField::new(Evaluator::scalar(1, 1, s), false, SampleGrid::default()).unwrap()
    }

    fn hat() -> Tensor4 {
        Tensor4::scalar(1, 1, 1.6)
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = SolverConfig::default();
        cfg.validate().unwrap();
        assert!(SolverConfig { newton_tol: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(SolverConfig { fixed_point_max_iter: 0, ..cfg.clone() }.validate().is_err());
        let parsed: SolverConfig = toml::from_str("newton_tol = 1e-12").unwrap();
        assert_eq!(parsed.fixed_point_max_iter, 50);
        assert!(toml::from_str::<SolverConfig>("newton_tols = 1").is_err());
    }

    #[test]
    fn linear_problem_takes_one_newton_step() {
        let sp = space(32, 1);
        let nl = Nonlinearity::new(1, 1, vec![source("x")]).unwrap();
        let (u, report) = solve_homogenized(&sp, &Tensor4::identity(1, 1), &nl, &SolverConfig::default()).unwrap();
        assert_eq!(report.status, Status::Converged);
        assert_eq!(report.iterations, 1);
        assert!((evaluate(&u, &[0.5]).unwrap()[0] - 0.125).abs() < 1e-12);
        assert_eq!(report.contractions, vec![None]);
    }

    #[test]
    fn zero_nonlinearity_gives_zero() {
        let sp = space(16, 2);
        let (u, report) =
            solve_homogenized(&sp, &Tensor4::identity(2, 1), &Nonlinearity::zero(2, 1), &SolverConfig::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn homogenized_matches_fine_grid() {
        let cfg = SolverConfig::default();
        let nl = model();
        let (coarse, r1) = solve_homogenized(&space(512, 1), &hat(), &nl, &cfg).unwrap();
        let (fine, r2) = solve_homogenized(&space(4096, 1), &hat(), &nl, &cfg).unwrap();
        assert_eq!((r1.status, r2.status), (Status::Converged, Status::Converged));
        for k in 0..=512 {
            let x = k as f64 / 512.0;
            assert!((coarse.nodal(k, 0) - evaluate(&fine, &[x]).unwrap()[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn margin_properties() {
        let sp = space(64, 1);
        let cfg = SolverConfig::default();
        let a = assemble_diffusion(&sp, &hat()).unwrap();
        let base = operator_margin(&sp, &a, &cfg);
        assert!(base.value > 0.0 && !base.factorization_failed);
        let scaled = operator_margin(&sp, &a.scaled(3.0), &cfg);
        assert!((scaled.value / base.value - 3.0).abs() < 1e-8);
        let nl = Nonlinearity::new(1, 1, vec![source("x")]).unwrap();
        let u0 = DiscreteField::zeros(&sp);
        let m = nondegeneracy_margin(&sp, &hat(), &nl, &u0, &cfg).unwrap();
        assert_eq!(m.value, base.value);
    }

    #[test]
    fn margin_collapses_at_criticality() {
        // f¹ = c u², f² = −c u¹ in 1D: the pencil (A + c B) x = 0 has a real
        // critical c; the margin must vanish there
        let sp = space(64, 2);
        let cfg = SolverConfig::default();
        let a = assemble_diffusion(&sp, &Tensor4::identity(2, 1)).unwrap();
        let coupling = |c: f64| {
            let j = QuadField::from_fn(&sp, 4, |_, o| o.copy_from_slice(&[0.0, c, -c, 0.0]));
            assemble_jacobian_coupling(&sp, &j).unwrap()
        };
        // oracle: smallest real generalized eigenvalue of (A, −B) via dense algebra
        let b = coupling(1.0);
        let nf = a.dim();
        let dense = |m: &SparseOperator| {
            let mut d = nalgebra::DMatrix::zeros(nf, nf);
            for (r, c, v) in m.matrix().triplets() {
                d[(r, c)] = v;
            }
            d
        };
        let ainv_b = dense(&a).try_inverse().unwrap() * dense(&b);
        let crit = ainv_b
            .complex_eigenvalues()
            .iter()
            .filter(|z| z.im.abs() < 1e-8 && z.re.abs() > 1e-8)
            .map(|z| (-1.0 / z.re).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(crit.is_finite());
        let margins: Vec<f64> = [0.5, 0.9, 0.99, 0.999]
            .iter()
            .map(|t| operator_margin(&sp, &a.add(&coupling(t * crit)), &cfg).value)
            .collect();
        assert!(margins.windows(2).all(|w| w[1] < w[0]), "{margins:?}");
        assert!(margins[3] < 0.01 * margins[0], "{margins:?}");
    }

    #[test]
    fn constant_tensor_fixed_point_is_u0() {
        let sp = space(128, 1);
        let cfg = SolverConfig::default();
        let nl = model();
        let (u0, _) = solve_homogenized(&sp, &hat(), &nl, &cfg).unwrap();
        let ubar = approximate_solution(&sp, &hat(), &nl, &u0, &cfg).unwrap();
        assert!(linf_norm(&ubar.sub(&u0)) < 1e-10);
        let (_, res) = fixed_point_solve(&sp, &hat(), &nl, &u0, &cfg).unwrap();
        assert_eq!(res.report.status, Status::Converged);
        assert!(linf_norm(&res.u.sub(&u0)) < 1e-9);
    }

    #[test]
    fn linear_problem_fixed_point_in_one_step() {
        let sp = space(64, 1);
        let cfg = SolverConfig::default();
        let nl = Nonlinearity::new(1, 1, vec![source("1+x*x")]).unwrap();
        let tensor = scale_periodic(&two_phase(), 0.125).unwrap();
        let u0 = DiscreteField::zeros(&sp);
        let (map, res) = fixed_point_solve(&sp, &tensor, &nl, &u0, &cfg).unwrap();
        assert_eq!(res.report.iterations, 1);
        assert_eq!(res.u.values(), res.ubar.values());
        assert!(map.residual_norm(&res.u).unwrap() < 1e-12);
    }

    #[test]
    fn frozen_step_matches_iteration_display() {
        // (A + C) u_{l+1} = C u_l − D F(u_l) written with matrices
        let sp = space(64, 1);
        let cfg = SolverConfig::default();
        let nl = model();
        let (u0, _) = solve_homogenized(&sp, &hat(), &nl, &cfg).unwrap();
        let tensor = scale_periodic(&two_phase(), 0.125).unwrap();
        let map = FixedPointMap::new(&sp, &tensor, &nl, &u0, &cfg).unwrap();
        let ul = map.approximate_solution().unwrap();
        let via_map = map.apply(&ul).unwrap();
        let c = assemble_jacobian_coupling(&sp, &nl.eval_jacobian(&u0).unwrap()).unwrap();
        let df = assemble_divergence_load(&sp, &nl.eval_f(&ul).unwrap()).unwrap();
        let rhs: Vec<f64> = c.apply(&ul.free_values()).iter().zip(df.values()).map(|(p, q)| q - p).collect();
        let direct = crate::fem::solve_linear(&sp, map.frozen_operator(), &LoadFunctional::new(rhs)).unwrap();
        assert!(linf_norm(&via_map.sub(&direct)) < 1e-13);
    }

    #[test]
    fn fixed_point_matches_monolithic_newton() {
        let eps = 1.0 / 32.0;
        let sp = space(512, 1);
        let cfg = SolverConfig::default();
        let nl = model();
        let (u0, _) = solve_homogenized(&sp, &hat(), &nl, &cfg).unwrap();
        let tensor = scale_periodic(&two_phase(), eps).unwrap();
        let (map, res) = fixed_point_solve(&sp, &tensor, &nl, &u0, &cfg).unwrap();
        assert_eq!(res.report.status, Status::Converged);
        let (mono, rep) = solve_monolithic(&sp, &tensor, &nl, u0.clone(), &cfg).unwrap();
        assert_eq!(rep.status, Status::Converged);
        assert!(linf_norm(&res.u.sub(&mono)) < 1e-8);

        let same = local_uniqueness_probe(&map, &res.ubar, &res.u, &cfg, 0.0, 1, 7);
        assert_eq!(same.trials[0].distance, 0.0);
        let delta = cfg.delta_for(&u0);
        let probe = local_uniqueness_probe(&map, &res.ubar, &res.u, &cfg, delta / 2.0, 3, 7);
        assert!(probe.all_agree && !probe.outside_ball);
        let far = local_uniqueness_probe(&map, &res.ubar, &res.u, &cfg, 1e3 * delta, 1, 7);
        assert!(far.outside_ball);
    }
}
