//! TOML problem configuration.
//!
//! Indices in the file (`alpha`, `beta`, `i`, `j`) are 1-based. Every
//! section rejects unknown keys.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeff::{add_defect, scale_periodic, CoeffError, Evaluator, SampleGrid, TensorField};
use crate::expr::{ExprError, ScalarFunction, ScalarSpec};
use crate::fem::Quadrature;
use crate::mesh::Domain;
use crate::nonlin::{Catalog, NonlinError, Nonlinearity, Term};
use crate::solver::SolverConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid epsilon list: {0}")]
    Epsilons(String),
    #[error("{what} index out of range: {detail}")]
    Index { what: &'static str, detail: String },
    #[error("tensor needs `diagonal` or at least one `[[tensor.entries]]`")]
    EmptyTensor,
    #[error("probe load needs {expected} flux entries (n·N), got {got}")]
    LoadLength { expected: usize, got: usize },
    #[error("probe p_grid must be a non-empty increasing list in [2, 4], got {0:?}")]
    PGrid(Vec<f64>),
    #[error("nonlinearity term f_{i}^{alpha} fails validation: {message}")]
    Hypothesis { alpha: usize, i: usize, message: String },
    #[error("invalid mesh settings: {0}")]
    Mesh(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Coeff(#[from] CoeffError),
    #[error(transparent)]
    Nonlin(#[from] NonlinError),
    #[error("{0}")]
    Solver(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    /// Mesh cells per period `ε`, so `h = ε / cells_per_period`.
    #[serde(default = "default_cells_per_period")]
    pub cells_per_period: usize,
    /// Cells per side of the periodic cell mesh; defaults to `cells_per_period`.
    pub cell_resolution: Option<usize>,
    #[serde(default)]
    pub quadrature: Quadrature,
}

fn default_cells_per_period() -> usize {
    16
}

impl Default for MeshSpec {
    fn default() -> Self {
        MeshSpec { cells_per_period: default_cells_per_period(), cell_resolution: None, quadrature: Quadrature::Midpoint }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntrySpec {
    pub alpha: usize,
    pub beta: usize,
    pub i: usize,
    pub j: usize,
    pub value: ScalarSpec,
}

/// `diagonal` sets `s δ_ij δ_αβ`; `entries` then overwrite single slots.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntries {
    pub diagonal: Option<ScalarSpec>,
    #[serde(default)]
    pub entries: Vec<EntrySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub diagonal: Option<ScalarSpec>,
    #[serde(default)]
    pub entries: Vec<EntrySpec>,
    /// Declares `a_ij^{αβ} = 0` for `α > β`; checked on samples.
    #[serde(default)]
    pub triangular: bool,
    /// Localized defect `b(x/ε)` added to the periodic tensor.
    pub defect: Option<TensorEntries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub alpha: usize,
    pub i: usize,
    #[serde(default = "one_spec")]
    pub g: ScalarSpec,
    pub p0: f64,
    /// Defaults to `h ≡ 1`.
    pub h: Option<Catalog>,
}

fn one_spec() -> ScalarSpec {
    ScalarSpec::Number(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    pub uniqueness_trials: usize,
    /// Perturbation size as a fraction of `δ`.
    pub perturbation: f64,
    /// Flux load `g` for the linear probes, `n·N` entries ordered `α·N + i`;
    /// empty means `x1` in every slot.
    pub load: Vec<ScalarSpec>,
    pub p_grid: Vec<f64>,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec { uniqueness_trials: 10, perturbation: 0.5, load: Vec::new(), p_grid: vec![2.0, 2.5, 3.0, 3.5, 4.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    domain: Domain,
    #[serde(default = "default_components")]
    components: usize,
    epsilons: Vec<f64>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    mesh: MeshSpec,
    tensor: TensorSpec,
    #[serde(default)]
    nonlinearity: Vec<TermSpec>,
    #[serde(default)]
    solver: SolverConfig,
    #[serde(default)]
    probe: ProbeSpec,
}

fn default_components() -> usize {
    1
}

/// A validated problem.
#[derive(Debug, Clone)]
pub struct ProblemConfig {
    pub domain: Domain,
    pub components: usize,
    pub epsilons: Vec<f64>,
    pub seed: u64,
    pub mesh: MeshSpec,
    pub base: TensorField,
    pub defect: Option<Evaluator>,
    pub nonlinearity: Nonlinearity,
    pub solver: SolverConfig,
    pub probe: ProbeSpec,
    pub load: Vec<ScalarFunction>,
    pub warnings: Vec<String>,
    /// `key = value` lines for settings filled from defaults.
    pub defaults: Vec<String>,
}

impl ProblemConfig {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn cell_resolution(&self) -> usize {
        self.mesh.cell_resolution.unwrap_or(self.mesh.cells_per_period)
    }

    /// Mesh cells per side for a given `ε`.
    pub fn cells_for(&self, eps: f64) -> usize {
        (self.mesh.cells_per_period as f64 / eps).round() as usize
    }

    /// `a(ε, ·)`, with the defect when one is configured.
    pub fn tensor(&self, eps: f64) -> Result<TensorField, CoeffError> {
        match &self.defect {
            Some(d) => add_defect(&self.base, d, eps, SampleGrid::default()),
            None => scale_periodic(&self.base, eps),
        }
    }

    /// The probe load flux at `x` (width `n·N`).
    pub fn load_at(&self, x: &[f64], out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.load) {
            *o = g.eval(x);
        }
    }
}

fn build_entries(n: usize, dim: usize, diagonal: &Option<ScalarSpec>, entries: &[EntrySpec]) -> Result<Evaluator, ConfigError> {
    let m = n * dim;
    let mut slots = vec![ScalarFunction::Constant(0.0); m * m];
    if let Some(d) = diagonal {
        let s = d.build(dim)?;
        for k in 0..m {
            slots[k * m + k] = s.clone();
        }
    }
    for e in entries {
        let ok = (1..=n).contains(&e.alpha) && (1..=n).contains(&e.beta) && (1..=dim).contains(&e.i) && (1..=dim).contains(&e.j);
        if !ok {
            return Err(ConfigError::Index {
                what: "tensor entry",
                detail: format!("(alpha, beta, i, j) = ({}, {}, {}, {}) with n = {n}, N = {dim}", e.alpha, e.beta, e.i, e.j),
            });
        }
        let row = (e.alpha - 1) * dim + (e.i - 1);
        let col = (e.beta - 1) * dim + (e.j - 1);
        slots[row * m + col] = e.value.build(dim)?;
    }
    Ok(Evaluator::new(n, dim, slots)?)
}

/// Key paths with defaults, for echoing.
fn echo_defaults(table: &toml::Table, raw: &RawConfig) -> Vec<String> {
    let present = |path: &[&str]| {
        let mut t = table;
        for (k, key) in path.iter().enumerate() {
            match t.get(*key) {
                None => return false,
                Some(toml::Value::Table(inner)) if k + 1 < path.len() => t = inner,
                Some(_) => return k + 1 == path.len(),
            }
        }
        true
    };
    let mut out = Vec::new();
    let mut push = |path: &[&str], value: String| {
        if !present(path) {
            out.push(format!("{} = {value}", path.join(".")));
        }
    };
    push(&["components"], raw.components.to_string());
    push(&["seed"], raw.seed.to_string());
    push(&["mesh", "cells_per_period"], raw.mesh.cells_per_period.to_string());
    push(&["mesh", "cell_resolution"], raw.mesh.cell_resolution.unwrap_or(raw.mesh.cells_per_period).to_string());
    push(&["mesh", "quadrature"], format!("{:?}", raw.mesh.quadrature).to_lowercase());
    let s = &raw.solver;
    push(&["solver", "newton_tol"], format!("{:e}", s.newton_tol));
    push(&["solver", "newton_max_iter"], s.newton_max_iter.to_string());
    push(&["solver", "fixed_point_tol"], format!("{:e}", s.fixed_point_tol));
    push(&["solver", "fixed_point_max_iter"], s.fixed_point_max_iter.to_string());
    push(&["solver", "delta"], "0.1 * (1 + |u0|_inf)".into());
    push(&["solver", "min_cells_per_period"], s.min_cells_per_period.to_string());
    push(&["solver", "divergence_window"], s.divergence_window.to_string());
    push(&["solver", "margin_max_iter"], s.margin_max_iter.to_string());
    push(&["solver", "margin_tol"], format!("{:e}", s.margin_tol));
    let p = &raw.probe;
    push(&["probe", "uniqueness_trials"], p.uniqueness_trials.to_string());
    push(&["probe", "perturbation"], p.perturbation.to_string());
    push(&["probe", "load"], "\"x1\" in every slot".into());
    push(&["probe", "p_grid"], format!("{:?}", p.p_grid));
    out
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ProblemConfig, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let defaults = echo_defaults(&table, &raw);
    let (n, dim) = (raw.components, raw.domain.dim());
    let mut warnings = Vec::new();

    if raw.epsilons.is_empty() {
        return Err(ConfigError::Epsilons("at least one value is required".into()));
    }
    if let Some(e) = raw.epsilons.iter().find(|&&e| !(e > 0.0 && e <= 1.0)) {
        return Err(ConfigError::Epsilons(format!("{e} is outside (0, 1]")));
    }
    if raw.epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(ConfigError::Epsilons("values must be strictly decreasing".into()));
    }
    if n == 0 {
        return Err(ConfigError::Index { what: "components", detail: "n must be at least 1".into() });
    }
    if raw.mesh.cells_per_period == 0 || raw.mesh.cell_resolution == Some(0) {
        return Err(ConfigError::Mesh("resolutions must be positive".into()));
    }
    raw.solver.validate().map_err(|e| ConfigError::Solver(e.to_string()))?;
    for &eps in &raw.epsilons {
        let cells = raw.mesh.cells_per_period as f64 / eps;
        if (cells - cells.round()).abs() > 1e-9 * cells {
            warnings.push(format!("cells_per_period / ε = {cells} is not an integer for ε = {eps}; periods will not align with the mesh"));
        }
    }

    if raw.tensor.diagonal.is_none() && raw.tensor.entries.is_empty() {
        return Err(ConfigError::EmptyTensor);
    }
    let base_eval = build_entries(n, dim, &raw.tensor.diagonal, &raw.tensor.entries)?;
    let base = TensorField::new(base_eval, raw.tensor.triangular, SampleGrid::default())?;
    let defect = match &raw.tensor.defect {
        Some(d) => {
            let ev = build_entries(n, dim, &d.diagonal, &d.entries)?;
            // validates localization and ellipticity at the first ε
            add_defect(&base, &ev, raw.epsilons[0], SampleGrid::default())?;
            Some(ev)
        }
        None => None,
    };
    if dim != 2 && !(raw.tensor.triangular || base.observed_triangular(SampleGrid::default())) {
        warnings.push("outside Theorem 1 hypotheses: N != 2 and the tensor is not triangular".into());
    }

    let mut terms = Vec::new();
    for t in &raw.nonlinearity {
        if !(1..=n).contains(&t.alpha) || !(1..=dim).contains(&t.i) {
            return Err(ConfigError::Index {
                what: "nonlinearity term",
                detail: format!("(alpha, i) = ({}, {}) with n = {n}, N = {dim}", t.alpha, t.i),
            });
        }
        terms.push(Term {
            alpha: t.alpha - 1,
            i: t.i - 1,
            g: t.g.build(dim)?,
            p0: t.p0,
            h: t.h.clone().unwrap_or_else(|| Catalog::one(n)),
        });
    }
    let nonlinearity = Nonlinearity::new(n, dim, terms)?;
    if let Some(f) = nonlinearity.validate().failures().next() {
        return Err(ConfigError::Hypothesis { alpha: f.alpha, i: f.i, message: f.message.clone() });
    }

    let load = if raw.probe.load.is_empty() {
        vec![ScalarSpec::Expression("x1".into()).build(dim)?; n * dim]
    } else if raw.probe.load.len() != n * dim {
        return Err(ConfigError::LoadLength { expected: n * dim, got: raw.probe.load.len() });
    } else {
        raw.probe.load.iter().map(|s| s.build(dim)).collect::<Result<_, _>>()?
    };
    let grid = &raw.probe.p_grid;
    if grid.is_empty() || grid.iter().any(|p| !(2.0..=4.0).contains(p)) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ConfigError::PGrid(grid.clone()));
    }

    Ok(ProblemConfig {
        domain: raw.domain,
        components: n,
        epsilons: raw.epsilons,
        seed: raw.seed,
        mesh: raw.mesh,
        base,
        defect,
        nonlinearity,
        solver: raw.solver,
        probe: raw.probe,
        load,
        warnings,
        defaults,
    })
}
