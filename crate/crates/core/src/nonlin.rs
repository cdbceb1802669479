//! Flux nonlinearities `f_i^α(x, u) = Σ g(x) h(u)` built from separable
//! terms, and their pointwise `u`-Jacobians.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::ScalarFunction;
use crate::fem::{DiscreteField, FemError, FemSpace, QuadField};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NonlinError {
    #[error("term targets f_{i}^{alpha} (1-based) outside n = {n}, N = {dim}")]
    Index { alpha: usize, i: usize, n: usize, dim: usize },
    #[error("catalog term expects {expected} components of u, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("monomial exponent {0} is not a non-negative integer")]
    Exponent(f64),
    #[error("derivative of term {term} disagrees with finite differences at u = {u:?}: {fd} vs {exact}")]
    DerivativeMismatch { term: usize, u: Vec<f64>, fd: f64, exact: f64 },
    #[error("term for f_{i}^{alpha} (1-based) is undefined at x = {x:?}, u = {u:?}")]
    Undefined { alpha: usize, i: usize, x: Vec<f64>, u: Vec<f64> },
    #[error(transparent)]
    Fem(#[from] FemError),
}

/// `c · Π (u^β)^{e_β}`. Serialized as `[c, e_1, …, e_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Monomial {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

impl TryFrom<Vec<f64>> for Monomial {
    type Error = NonlinError;

    fn try_from(v: Vec<f64>) -> Result<Self, NonlinError> {
        let (&coeff, rest) = v.split_first().ok_or(NonlinError::Arity { expected: 1, got: 0 })?;
        let powers = rest
            .iter()
            .map(|&e| {
                if e >= 0.0 && e.fract() == 0.0 && e <= 64.0 {
                    Ok(e as u32)
                } else {
                    Err(NonlinError::Exponent(e))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Monomial { coeff, powers })
    }
}

impl From<Monomial> for Vec<f64> {
    fn from(m: Monomial) -> Self {
        std::iter::once(m.coeff).chain(m.powers.iter().map(|&p| p as f64)).collect()
    }
}

impl Monomial {
    fn eval(&self, u: &[f64]) -> f64 {
        self.powers.iter().zip(u).fold(self.coeff, |acc, (&p, &x)| acc * x.powi(p as i32))
    }

    fn derivative(&self, u: &[f64], beta: usize) -> f64 {
        let p = self.powers[beta];
        if p == 0 {
            return 0.0;
        }
        let mut v = self.coeff * p as f64;
        for (k, (&q, &x)) in self.powers.iter().zip(u).enumerate() {
            let e = if k == beta { q - 1 } else { q };
            v *= x.powi(e as i32);
        }
        v
    }
}

/// `c · u + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearForm {
    pub coeffs: Vec<f64>,
    #[serde(default)]
    pub offset: f64,
}

impl LinearForm {
    fn eval(&self, u: &[f64]) -> f64 {
        self.coeffs.iter().zip(u).map(|(c, x)| c * x).sum::<f64>() + self.offset
    }
}

/// The `u`-dependent factor `h(u)` of a term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Catalog {
    Polynomial(Vec<Monomial>),
    Sin(LinearForm),
    Cos(LinearForm),
    Exp(LinearForm),
    Rational { num: Vec<Monomial>, den: Vec<Monomial> },
}

fn poly(ms: &[Monomial], u: &[f64]) -> f64 {
    ms.iter().map(|m| m.eval(u)).sum()
}

fn dpoly(ms: &[Monomial], u: &[f64], beta: usize) -> f64 {
    ms.iter().map(|m| m.derivative(u, beta)).sum()
}

impl Catalog {
    /// `h ≡ 1` for `n` components.
    pub fn one(n: usize) -> Self {
        Catalog::Polynomial(vec![Monomial { coeff: 1.0, powers: vec![0; n] }])
    }

    fn arity(&self) -> Vec<usize> {
        match self {
            Catalog::Polynomial(ms) => ms.iter().map(|m| m.powers.len()).collect(),
            Catalog::Sin(l) | Catalog::Cos(l) | Catalog::Exp(l) => vec![l.coeffs.len()],
            Catalog::Rational { num, den } => num.iter().chain(den).map(|m| m.powers.len()).collect(),
        }
    }

    /// `None` where `h` is undefined (vanishing denominator) or non-finite.
    pub fn eval(&self, u: &[f64]) -> Option<f64> {
        let v = match self {
            Catalog::Polynomial(ms) => poly(ms, u),
            Catalog::Sin(l) => l.eval(u).sin(),
            Catalog::Cos(l) => l.eval(u).cos(),
            Catalog::Exp(l) => l.eval(u).exp(),
            Catalog::Rational { num, den } => {
                let q = poly(den, u);
                if q == 0.0 {
                    return None;
                }
                poly(num, u) / q
            }
        };
        v.is_finite().then_some(v)
    }

    pub fn derivative(&self, u: &[f64], beta: usize) -> Option<f64> {
        let v = match self {
            Catalog::Polynomial(ms) => dpoly(ms, u, beta),
            Catalog::Sin(l) => l.coeffs[beta] * l.eval(u).cos(),
            Catalog::Cos(l) => -l.coeffs[beta] * l.eval(u).sin(),
            Catalog::Exp(l) => l.coeffs[beta] * l.eval(u).exp(),
            Catalog::Rational { num, den } => {
                let q = poly(den, u);
                if q == 0.0 {
                    return None;
                }
                (dpoly(num, u, beta) * q - poly(num, u) * dpoly(den, u, beta)) / (q * q)
            }
        };
        v.is_finite().then_some(v)
    }
}

/// One separable contribution `g(x) h(u)` to `f_i^α` (0-based indices).
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub alpha: usize,
    pub i: usize,
    pub g: ScalarFunction,
    /// Declared integrability exponent of `g`.
    pub p0: f64,
    pub h: Catalog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nonlinearity {
    n: usize,
    dim: usize,
    terms: Vec<Term>,
}

impl Nonlinearity {
    /// Checks indices, arities and the derivative of every `h` against
    /// central differences at seeded random points.
    pub fn new(n: usize, dim: usize, terms: Vec<Term>) -> Result<Self, NonlinError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for (k, t) in terms.iter().enumerate() {
            if t.alpha >= n || t.i >= dim {
                return Err(NonlinError::Index { alpha: t.alpha + 1, i: t.i + 1, n, dim });
            }
            if let Some(&got) = t.h.arity().iter().find(|&&a| a != n) {
                return Err(NonlinError::Arity { expected: n, got });
            }
            let delta = 1e-4;
            let mut checked = 0;
            for _ in 0..64 {
                if checked == 8 {
                    break;
                }
                let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                if let Catalog::Rational { den, .. } = &t.h {
                    if poly(den, &u).abs() < 0.1 {
                        continue;
                    }
                }
                for beta in 0..n {
                    let (mut up, mut um) = (u.clone(), u.clone());
                    up[beta] += delta;
                    um[beta] -= delta;
                    let (Some(fp), Some(fm), Some(exact)) = (t.h.eval(&up), t.h.eval(&um), t.h.derivative(&u, beta))
                    else {
                        continue;
                    };
                    let fd = (fp - fm) / (2.0 * delta);
                    if (fd - exact).abs() > 1e-6 * (1.0 + exact.abs()) {
                        return Err(NonlinError::DerivativeMismatch { term: k, u, fd, exact });
                    }
                }
                checked += 1;
            }
        }
        Ok(Nonlinearity { n, dim, terms })
    }

    /// `f ≡ 0`.
    pub fn zero(n: usize, dim: usize) -> Self {
        Nonlinearity { n, dim, terms: Vec::new() }
    }

    pub fn system_dim(&self) -> usize {
        self.n
    }

    pub fn space_dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    fn undefined(&self, t: &Term, x: &[f64], u: &[f64]) -> NonlinError {
        NonlinError::Undefined { alpha: t.alpha + 1, i: t.i + 1, x: x.to_vec(), u: u.to_vec() }
    }

    /// Writes `f_i^α(x, u)` into `out[α·N + i]`.
    pub fn eval_at(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), NonlinError> {
        out.iter_mut().for_each(|v| *v = 0.0);
        for t in &self.terms {
            let h = t.h.eval(u).ok_or_else(|| self.undefined(t, x, u))?;
            out[t.alpha * self.dim + t.i] += t.g.eval(x) * h;
        }
        Ok(())
    }

    /// Writes `∂_{u^β} f_i^α(x, u)` into `out[(α·N + i)·n + β]`.
    pub fn jacobian_at(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), NonlinError> {
        out.iter_mut().for_each(|v| *v = 0.0);
        for t in &self.terms {
            let g = t.g.eval(x);
            for beta in 0..self.n {
                let d = t.h.derivative(u, beta).ok_or_else(|| self.undefined(t, x, u))?;
                out[(t.alpha * self.dim + t.i) * self.n + beta] += g * d;
            }
        }
        Ok(())
    }

    /// `F(u)` at the quadrature points of `u`'s space (width `n·N`).
    pub fn eval_f(&self, u: &DiscreteField) -> Result<QuadField, NonlinError> {
        let space = u.space();
        let uq = u.at_quadrature();
        self.eval_on(space, &uq)
    }

    /// `F` applied to given quadrature values `uq` (width `n`).
    pub fn eval_on(&self, space: &FemSpace, uq: &QuadField) -> Result<QuadField, NonlinError> {
        let width = self.n * self.dim;
        let mut out = QuadField::zeros(space, width);
        for (k, qp) in space.quad_points().iter().enumerate() {
            self.eval_at(&qp.x[..self.dim], uq.at(k), out.at_mut(k))?;
        }
        Ok(out)
    }

    /// `F′(u)` at the quadrature points (width `n·N·n`).
    pub fn eval_jacobian(&self, u: &DiscreteField) -> Result<QuadField, NonlinError> {
        let space = u.space();
        let uq = u.at_quadrature();
        let width = self.n * self.dim * self.n;
        let mut out = QuadField::zeros(space, width);
        for (k, qp) in space.quad_points().iter().enumerate() {
            self.jacobian_at(&qp.x[..self.dim], uq.at(k), out.at_mut(k))?;
        }
        Ok(out)
    }

    /// Checks each term's hypotheses; see [`ValidationReport`].
    pub fn validate(&self) -> ValidationReport {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let (alpha, i) = (t.alpha + 1, t.i + 1);
                if !(t.p0 > self.dim as f64) {
                    return TermCheck {
                        alpha,
                        i,
                        passed: false,
                        message: format!("p0 must exceed N (p0 = {}, N = {})", t.p0, self.dim),
                    };
                }
                let (passed, message) = match integrability_estimate(&t.g, t.p0, self.dim) {
                    Ok(v) => (true, format!("integral of |g|^p0 ≈ {v:.6e}")),
                    Err(m) => (false, m),
                };
                TermCheck { alpha, i, passed, message }
            })
            .collect();
        ValidationReport { terms }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermCheck {
    /// 1-based component index.
    pub alpha: usize,
    /// 1-based direction index.
    pub i: usize,
    pub passed: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub terms: Vec<TermCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TermCheck> {
        self.terms.iter().filter(|t| !t.passed)
    }
}

/// Midpoint estimates of `∫_{(0,1)^N} |g|^p` on doubling grids. Passes when
/// all are finite and the increments shrink.
fn integrability_estimate(g: &ScalarFunction, p: f64, dim: usize) -> Result<f64, String> {
    let grids: &[usize] = if dim == 1 { &[64, 128, 256, 512, 1024] } else { &[16, 32, 64, 128] };
    let mut values = Vec::new();
    for &m in grids {
        let h = 1.0 / m as f64;
        let mut sum = 0.0;
        if dim == 1 {
            for k in 0..m {
                sum += g.eval(&[(k as f64 + 0.5) * h]).abs().powf(p);
            }
            sum *= h;
        } else {
            for j in 0..m {
                for k in 0..m {
                    sum += g.eval(&[(k as f64 + 0.5) * h, (j as f64 + 0.5) * h]).abs().powf(p);
                }
            }
            sum *= h * h;
        }
        if !sum.is_finite() {
            return Err(format!("|g|^p0 not integrable: non-finite estimate on a {m}-grid"));
        }
        values.push(sum);
    }
    let last = *values.last().unwrap();
    let incs: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let tiny = 1e-9 * (1.0 + last.abs());
    let stable = incs.windows(2).all(|w| w[1] <= tiny || w[1] < w[0]);
    if stable {
        Ok(last)
    } else {
        Err(format!("|g|^p0 estimates do not settle under refinement: {values:?}"))
    }
}
