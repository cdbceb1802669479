//! End-to-end runs driven by a [`ProblemConfig`], and their artifacts.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::info;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cell::{homogenized_tensor, solve_cell_problems, CellError};
use crate::coeff::HomogenizedTensor;
use crate::config::ProblemConfig;
use crate::fem::{DiscreteField, FemSpace};
use crate::mesh::{build_periodic_cell_mesh, MeshError};
use crate::norms::{fit_rate, h_convergence_probe, linf_norm, meyers_probe, HConvergenceRow, MeyersReport, NormError, ProbeSetup};
use crate::schema::{Schema, SchemaError};
use crate::solver::{fixed_point_solve, local_uniqueness_probe, nondegeneracy_margin, solve_homogenized, SolverError, UniquenessReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// `{:.12e}`, the float format of every CSV cell.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.12e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize)]
pub struct Homogenization {
    pub n: usize,
    pub dim: usize,
    pub cell_resolution: usize,
    /// `tensor[α][β][i][j]`, 0-based.
    pub tensor: Vec<Vec<Vec<Vec<f64>>>>,
    pub legendre_margin: f64,
    pub max_corrector_mean: f64,
    pub max_cell_residual: f64,
    #[serde(skip)]
    pub ahat: Option<HomogenizedTensor>,
}

impl Homogenization {
    pub fn ahat(&self) -> &HomogenizedTensor {
        self.ahat.as_ref().expect("set by homogenize")
    }
}

/// Cell problems on the configured periodic mesh and `â`.
pub fn homogenize(cfg: &ProblemConfig) -> Result<Homogenization, PipelineError> {
    let res = cfg.cell_resolution();
    let mesh = Arc::new(build_periodic_cell_mesh(res, cfg.dim())?);
    let correctors = solve_cell_problems(&cfg.base, mesh)?;
    let ahat = homogenized_tensor(&cfg.base, &correctors)?;
    info!("homogenized tensor on a {res}-cell periodic mesh, margin {:.6e}", ahat.margin());
    Ok(Homogenization {
        n: cfg.components,
        dim: cfg.dim(),
        cell_resolution: res,
        tensor: ahat.tensor().to_nested(),
        legendre_margin: ahat.margin(),
        max_corrector_mean: correctors.max_mean(),
        max_cell_residual: correctors.max_residual(),
        ahat: Some(ahat),
    })
}

/// Nodal fields of one run, kept for plotting.
#[derive(Debug, Clone)]
pub struct Fields {
    pub u0: DiscreteField,
    pub ubar: DiscreteField,
    pub ueps: DiscreteField,
}

/// Outcome for a single `ε`.
#[derive(Debug, Clone)]
pub struct EpsRun {
    pub eps: f64,
    pub h: f64,
    pub baru_u0_linf: Option<f64>,
    pub ueps_u0_linf: Option<f64>,
    pub iterations: Option<usize>,
    pub max_contraction: Option<f64>,
    pub nondegeneracy_margin: Option<f64>,
    pub first_step_u0: Option<f64>,
    pub first_step_ubar: Option<f64>,
    pub estimate_ratio: Option<f64>,
    pub status: String,
    pub uniqueness: Option<UniquenessReport>,
    pub fields: Option<Fields>,
    pub log: Vec<String>,
}

impl EpsRun {
    fn empty(eps: f64, h: f64) -> Self {
        EpsRun {
            eps,
            h,
            baru_u0_linf: None,
            ueps_u0_linf: None,
            iterations: None,
            max_contraction: None,
            nondegeneracy_margin: None,
            first_step_u0: None,
            first_step_ubar: None,
            estimate_ratio: None,
            status: String::new(),
            uniqueness: None,
            fields: None,
            log: Vec::new(),
        }
    }
}

/// Homogenized solve, margin, `ū_ε`, fixed point and probes for one `ε`.
/// Failures are recorded in `status`.
pub fn run_eps(cfg: &ProblemConfig, ahat: &HomogenizedTensor, eps: f64, keep_fields: bool) -> EpsRun {
    let cells = cfg.cells_for(eps);
    let mut run = EpsRun::empty(eps, 1.0 / cells as f64);
    if let Err(e) = run_eps_inner(cfg, ahat, eps, cells, keep_fields, &mut run) {
        run.status = format!("error: {e}");
        run.log.push(format!("eps = {eps}: {}", run.status));
    }
    run
}

fn run_eps_inner(
    cfg: &ProblemConfig,
    ahat: &HomogenizedTensor,
    eps: f64,
    cells: usize,
    keep_fields: bool,
    run: &mut EpsRun,
) -> Result<(), String> {
    let mesh = Arc::new(cfg.domain.mesh(cells).map_err(|e| e.to_string())?);
    let space = FemSpace::new(mesh, cfg.components, crate::fem::Constraint::Dirichlet, cfg.mesh.quadrature)
        .map_err(|e| e.to_string())?;
    let s = &cfg.solver;
    let (u0, newton) = solve_homogenized(&space, ahat, &cfg.nonlinearity, s).map_err(|e| e.to_string())?;
    run.log.push(format!(
        "eps = {eps}: homogenized Newton {} after {} iterations",
        newton.status.as_str(),
        newton.iterations
    ));
    if newton.status != crate::solver::Status::Converged {
        return Err(format!("homogenized Newton {}", newton.status.as_str()));
    }
    let margin = nondegeneracy_margin(&space, ahat, &cfg.nonlinearity, &u0, s).map_err(|e| e.to_string())?;
    run.nondegeneracy_margin = Some(margin.value);
    if margin.factorization_failed {
        run.log.push(format!("eps = {eps}: linearized operator could not be factorized"));
    }
    let tensor = cfg.tensor(eps).map_err(|e| e.to_string())?;
    let (map, fp) = fixed_point_solve(&space, &tensor, &cfg.nonlinearity, &u0, s).map_err(|e: SolverError| e.to_string())?;
    let baru = linf_norm(&fp.ubar.sub(&u0));
    let ueps = linf_norm(&fp.u.sub(&u0));
    run.baru_u0_linf = Some(baru);
    run.ueps_u0_linf = Some(ueps);
    run.iterations = Some(fp.report.iterations);
    run.max_contraction = fp.report.max_contraction_from(3);
    run.status = fp.report.status.as_str().to_string();
    if let Some(f) = &fp.report.failure {
        run.log.push(format!("eps = {eps}: {f}"));
    }
    let (a, b) = map.first_step_corrections(&fp.ubar).map_err(|e| e.to_string())?;
    run.first_step_u0 = Some(a);
    run.first_step_ubar = Some(b);
    let proxy = map.residual_norm(&fp.ubar).map_err(|e| e.to_string())?;
    run.estimate_ratio = Some(ueps / (baru + proxy));
    if cfg.probe.uniqueness_trials > 0 {
        let delta = s.delta_for(&u0);
        let probe = local_uniqueness_probe(
            &map,
            &fp.ubar,
            &fp.u,
            s,
            cfg.probe.perturbation * delta,
            cfg.probe.uniqueness_trials,
            cfg.seed,
        );
        run.log.push(format!(
            "eps = {eps}: {} perturbed restarts, all agree: {}{}",
            probe.trials.len(),
            probe.all_agree,
            if probe.outside_ball { " (perturbation outside the uniqueness ball)" } else { "" }
        ));
        run.uniqueness = Some(probe);
    }
    if keep_fields {
        run.fields = Some(Fields { u0, ubar: fp.ubar, ueps: fp.u });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub homogenization: Homogenization,
    pub runs: Vec<EpsRun>,
    /// `(slope, intercept)` of `log ‖u_ε − u₀‖_∞` against `log ε`.
    pub fit: Option<(f64, f64)>,
}

/// Runs every configured `ε` concurrently; results keep the config order.
pub fn run_sweep(cfg: &ProblemConfig) -> Result<SweepResult, PipelineError> {
    let homogenization = homogenize(cfg)?;
    let ahat = homogenization.ahat().clone();
    let runs: Vec<EpsRun> = cfg.epsilons.par_iter().map(|&eps| run_eps(cfg, &ahat, eps, false)).collect();
    let points: Vec<(f64, f64)> = runs.iter().filter_map(|r| r.ueps_u0_linf.map(|v| (r.eps, v))).collect();
    let fit = fit_rate(&points).ok();
    Ok(SweepResult { homogenization, runs, fit })
}

fn writer(dir: &Path, name: &str, kind: &str, schema: &Schema) -> Result<(csv::Writer<fs::File>, std::path::PathBuf), PipelineError> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    w.write_record(schema.header(kind)?).map_err(|e| io_err(&path, e))?;
    Ok((w, path))
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn sweep_row(r: &EpsRun) -> Vec<String> {
    vec![
        "data".into(),
        fmt_f64(r.eps),
        fmt_f64(r.h),
        fmt_opt(r.baru_u0_linf),
        fmt_opt(r.ueps_u0_linf),
        r.iterations.map(|v| v.to_string()).unwrap_or_default(),
        fmt_opt(r.max_contraction),
        fmt_opt(r.nondegeneracy_margin),
        fmt_opt(r.first_step_u0),
        fmt_opt(r.first_step_ubar),
        fmt_opt(r.estimate_ratio),
        r.status.clone(),
        String::new(),
        String::new(),
    ]
}

/// Writes `sweep.csv` rows (and the summary row when `fit` is given).
pub fn write_sweep_csv(dir: &Path, runs: &[EpsRun], fit: Option<Option<(f64, f64)>>) -> Result<(), PipelineError> {
    ensure_dir(dir)?;
    let schema = Schema::load()?;
    let (mut w, path) = writer(dir, "sweep.csv", "sweep", &schema)?;
    for r in runs {
        w.write_record(sweep_row(r)).map_err(|e| io_err(&path, e))?;
    }
    if let Some(fit) = fit {
        let mut row = vec![String::new(); 14];
        row[0] = "rate_fit".into();
        row[11] = if fit.is_some() { "ok" } else { "insufficient" }.into();
        if let Some((s, i)) = fit {
            row[12] = fmt_f64(s);
            row[13] = fmt_f64(i);
        }
        w.write_record(row).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))
}

pub fn write_uniqueness_csv(dir: &Path, runs: &[EpsRun]) -> Result<(), PipelineError> {
    let schema = Schema::load()?;
    let (mut w, path) = writer(dir, "uniqueness.csv", "uniqueness", &schema)?;
    for r in runs {
        let Some(u) = &r.uniqueness else { continue };
        for (k, t) in u.trials.iter().enumerate() {
            let agrees = t.status == crate::solver::Status::Converged && t.distance <= u.tolerance;
            w.write_record([
                fmt_f64(r.eps),
                k.to_string(),
                t.seed.to_string(),
                fmt_f64(u.magnitude),
                fmt_f64(u.delta),
                t.status.as_str().to_string(),
                t.iterations.to_string(),
                fmt_f64(t.distance),
                agrees.to_string(),
            ])
            .map_err(|e| io_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&path, e))
}

pub fn write_solution_csv(dir: &Path, eps: f64, f: &Fields) -> Result<(), PipelineError> {
    let schema = Schema::load()?;
    let (mut w, path) = writer(dir, "solution.csv", "solution", &schema)?;
    let space = f.u0.space();
    let mesh = space.mesh();
    for v in 0..mesh.num_vertices() {
        let x = mesh.vertex(v);
        for a in 0..space.ncomp() {
            w.write_record([
                fmt_f64(eps),
                fmt_f64(x[0]),
                fmt_f64(x[1]),
                (a + 1).to_string(),
                fmt_f64(f.u0.nodal(v, a)),
                fmt_f64(f.ubar.nodal(v, a)),
                fmt_f64(f.ueps.nodal(v, a)),
            ])
            .map_err(|e| io_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&path, e))
}

pub fn write_homogenized_json(dir: &Path, h: &Homogenization) -> Result<(), PipelineError> {
    ensure_dir(dir)?;
    let path = dir.join("homogenized.json");
    let text = serde_json::to_string_pretty(h).map_err(|e| io_err(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

/// Lines shared by every run log: warnings and echoed defaults.
pub fn log_header(cfg: &ProblemConfig) -> Vec<String> {
    let mut lines = Vec::new();
    for w in &cfg.warnings {
        lines.push(format!("WARNING: {w}"));
    }
    for d in &cfg.defaults {
        lines.push(format!("default: {d}"));
    }
    lines
}

pub fn write_log(dir: &Path, lines: &[String]) -> Result<(), PipelineError> {
    ensure_dir(dir)?;
    let path = dir.join("run.log");
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn homogenization_log(h: &Homogenization) -> Vec<String> {
    vec![format!(
        "homogenized tensor: cell resolution {}, Legendre margin {}, max corrector mean {}, max cell residual {}",
        h.cell_resolution,
        fmt_f64(h.legendre_margin),
        fmt_f64(h.max_corrector_mean),
        fmt_f64(h.max_cell_residual)
    )]
}

/// `homogenize` subcommand: `homogenized.json` and `run.log`.
pub fn homogenize_to(cfg: &ProblemConfig, dir: &Path) -> Result<Homogenization, PipelineError> {
    let h = homogenize(cfg)?;
    write_homogenized_json(dir, &h)?;
    let mut log = log_header(cfg);
    log.extend(homogenization_log(&h));
    write_log(dir, &log)?;
    Ok(h)
}

/// `sweep` subcommand: every artifact of a full run.
pub fn sweep_to(cfg: &ProblemConfig, dir: &Path) -> Result<SweepResult, PipelineError> {
    let result = run_sweep(cfg)?;
    write_homogenized_json(dir, &result.homogenization)?;
    write_sweep_csv(dir, &result.runs, Some(result.fit))?;
    write_uniqueness_csv(dir, &result.runs)?;
    let mut log = log_header(cfg);
    log.extend(homogenization_log(&result.homogenization));
    for r in &result.runs {
        log.extend(r.log.iter().cloned());
    }
    match result.fit {
        Some((s, _)) => log.push(format!("rate fit: slope {}", fmt_f64(s))),
        None => log.push("rate fit: insufficient data".into()),
    }
    write_log(dir, &log)?;
    Ok(result)
}

/// `solve` subcommand: one `ε`, with nodal values for plotting.
pub fn solve_to(cfg: &ProblemConfig, eps: f64, dir: &Path) -> Result<EpsRun, PipelineError> {
    let h = homogenize(cfg)?;
    let run = run_eps(cfg, h.ahat(), eps, true);
    write_homogenized_json(dir, &h)?;
    write_sweep_csv(dir, std::slice::from_ref(&run), None)?;
    write_uniqueness_csv(dir, std::slice::from_ref(&run))?;
    if let Some(f) = &run.fields {
        write_solution_csv(dir, eps, f)?;
    }
    let mut log = log_header(cfg);
    log.extend(homogenization_log(&h));
    log.extend(run.log.iter().cloned());
    write_log(dir, &log)?;
    Ok(run)
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub hconv: Vec<Result<HConvergenceRow, NormError>>,
    pub meyers: MeyersReport,
}

/// H-convergence and Meyers probes with the configured load.
pub fn run_probes(cfg: &ProblemConfig, ahat: &HomogenizedTensor) -> Result<ProbeResult, PipelineError> {
    let tensor = |eps: f64| cfg.tensor(eps);
    let load = |x: &[f64], out: &mut [f64]| cfg.load_at(x, out);
    let setup = ProbeSetup {
        domain: cfg.domain,
        ncomp: cfg.components,
        cells_per_period: cfg.mesh.cells_per_period,
        tensor: &tensor,
        load: &load,
    };
    let hconv = h_convergence_probe(&setup, ahat, &cfg.epsilons);
    let meyers = meyers_probe(&setup, &cfg.epsilons, &cfg.probe.p_grid)?;
    Ok(ProbeResult { hconv, meyers })
}

/// `probe` subcommand: `hconv.csv`, `meyers.csv` and `run.log`.
pub fn probe_to(cfg: &ProblemConfig, dir: &Path) -> Result<ProbeResult, PipelineError> {
    ensure_dir(dir)?;
    let h = homogenize(cfg)?;
    let result = run_probes(cfg, h.ahat())?;
    let schema = Schema::load()?;
    let mut log = log_header(cfg);
    log.extend(homogenization_log(&h));

    let (mut w, path) = writer(dir, "hconv.csv", "hconv", &schema)?;
    let modes = crate::norms::probe_modes(cfg.dim());
    for (eps, row) in cfg.epsilons.iter().zip(&result.hconv) {
        match row {
            Ok(row) => {
                for a in 0..cfg.components {
                    for (m, mode) in modes.iter().enumerate() {
                        let k = a * modes.len() + m;
                        let label = mode.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x");
                        w.write_record([
                            fmt_f64(row.eps),
                            fmt_f64(row.h),
                            (a + 1).to_string(),
                            label,
                            fmt_f64(row.value_pairings[k]),
                            fmt_f64(row.flux_pairings[k]),
                            fmt_f64(row.linf),
                            fmt_f64(row.grad_l2),
                        ])
                        .map_err(|e| io_err(&path, e))?;
                    }
                }
            }
            Err(e) => log.push(format!("eps = {eps}: H-convergence probe failed: {e}")),
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    let (mut w, path) = writer(dir, "meyers.csv", "meyers", &schema)?;
    for row in &result.meyers.rows {
        for (p, v) in result.meyers.p_grid.iter().zip(&row.norms) {
            w.write_record(["data".into(), fmt_f64(row.eps), fmt_f64(row.h), fmt_f64(*p), fmt_f64(*v)])
                .map_err(|e| io_err(&path, e))?;
        }
    }
    w.write_record(["observed_range".into(), String::new(), String::new(), fmt_opt(result.meyers.observed_range), String::new()])
        .map_err(|e| io_err(&path, e))?;
    w.flush().map_err(|e| io_err(&path, e))?;
    match result.meyers.observed_range {
        Some(p) => log.push(format!("observed Meyers range: p <= {p}")),
        None => log.push("observed Meyers range: empty".into()),
    }
    write_log(dir, &log)?;
    Ok(result)
}
