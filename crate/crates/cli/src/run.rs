//! Suite orchestration and report files.

use std::fs;
use std::path::{Path, PathBuf};

use bsvie_core::analysis::{apriori_l2_check, fit_rate, random_suite, scheme_error, ErrorEntry};
use bsvie_core::bsde_sys::{
    bsde_approx_error, regularity_moduli, solve_bsde_system, solve_bsde_system_tree, ApproxError, Moduli,
    ModuliReference, SystemOptions,
};
use bsvie_core::mesh::TimeMesh;
use bsvie_core::model::{catalog, exact_discrete_scheme};
use bsvie_core::noise::{generate_increments, IncrementBatch, NoiseKind, TreeEnsemble, DEFAULT_TREE_CAP};
use bsvie_core::report::{fmt_float, write_summary_csv, write_table, ConvergenceReport};
use bsvie_core::scheme::oracle::brute_force_tree;
use bsvie_core::scheme::{
    msolution_residual, msolution_residual_rms, solve_bsvie, solve_bsvie_tree, Backend, SchemeSolution, SolverOptions,
};
use bsvie_core::stats::Estimate;
use bsvie_core::{ProblemInstance64, TimeMesh64};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Suite};
use crate::CliError;

/// One pass/fail check of a suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            crate::EXIT_OK
        } else {
            crate::EXIT_CHECK_FAILED
        }
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    outcome: RunOutcome,
}

impl Ctx<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Output {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.outcome.files.push(path);
        Ok(())
    }

    fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut buf = Vec::new();
        write_table(&mut buf, header, rows)?;
        self.write(name, &buf)
    }

    fn json(&mut self, name: &str, v: &Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(v).expect("json value serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn check(&mut self, suite: Suite, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.outcome.checks.push(Check {
            suite: suite.name(),
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

/// Runs the configured suites. Nothing is written when the suite list is empty.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    if cfg.suites.is_empty() {
        return Ok(RunOutcome::default());
    }
    fs::create_dir_all(&cfg.output).map_err(|e| CliError::Output {
        path: cfg.output.display().to_string(),
        message: e.to_string(),
    })?;
    let mut ctx = Ctx {
        cfg,
        out: &cfg.output,
        outcome: RunOutcome::default(),
    };
    let mut suites = cfg.suites.clone();
    suites.sort();
    suites.dedup();
    for s in suites {
        match s {
            Suite::Solve => solve(&mut ctx)?,
            Suite::Converge => converge(&mut ctx)?,
            Suite::BsdeApprox => bsde_approx(&mut ctx)?,
            Suite::Moduli => moduli(&mut ctx)?,
            Suite::Gronwall => gronwall(&mut ctx)?,
            Suite::OracleDiff => oracle_diff(&mut ctx)?,
        }
    }
    let mut summary = String::new();
    for c in &ctx.outcome.checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        summary.push_str(&format!("{verdict} {} {}: {}\n", c.suite, c.name, c.detail));
    }
    let verdict = if ctx.outcome.passed() { "all checks passed" } else { "some checks failed" };
    summary.push_str(&format!("{verdict} ({} checks)\n", ctx.outcome.checks.len()));
    ctx.write("summary.txt", summary.as_bytes())?;
    ctx.outcome.summary = summary;
    Ok(ctx.outcome)
}

fn instance(cfg: &ExperimentConfig) -> Result<ProblemInstance64, CliError> {
    catalog(&cfg.instance, &cfg.params, cfg.horizon).map_err(|e| CliError::Config(e.to_string()))
}

fn mesh(cfg: &ExperimentConfig, n: usize) -> Result<TimeMesh64, CliError> {
    Ok(TimeMesh::uniform(n, cfg.horizon)?)
}

/// Tree mode runs on the tree while the deepest tree fits under the cap and
/// otherwise falls back to regression on binary noise.
fn backend_for(cfg: &ExperimentConfig, depth: usize) -> (Backend, NoiseKind) {
    match cfg.mode {
        Backend::Tree if depth <= DEFAULT_TREE_CAP => (Backend::Tree, NoiseKind::Binary),
        Backend::Tree => (Backend::Lsmc, NoiseKind::Binary),
        Backend::Lsmc => (Backend::Lsmc, cfg.noise),
    }
}

fn solver_options(cfg: &ExperimentConfig) -> SolverOptions {
    SolverOptions {
        regression: cfg.regression(),
        ..Default::default()
    }
}

fn header(cfg: &ExperimentConfig, suite: Suite, backend: Backend, noise: NoiseKind) -> Value {
    json!({
        "suite": suite.name(),
        "instance": cfg.instance,
        "params": cfg.params,
        "horizon": cfg.horizon,
        "levels": cfg.levels,
        "backend": backend,
        "noise": noise,
        "paths": if backend == Backend::Tree { Value::Null } else { json!(cfg.paths) },
        "seed": cfg.seed,
    })
}

fn est_cells(e: &Estimate) -> [String; 2] {
    [fmt_float(e.value), fmt_float(e.std_error)]
}

fn solve(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let inst = instance(cfg)?;
    let (backend, noise) = backend_for(cfg, *cfg.levels.last().unwrap());
    let opts = solver_options(cfg);
    let mut rows = Vec::new();
    let mut level_json = Vec::new();
    for &n in &cfg.levels {
        let mesh = mesh(cfg, n)?;
        let (sol, residual): (SchemeSolution<f64>, f64) = if backend == Backend::Tree {
            let sol = solve_bsvie_tree(&inst, &mesh, &opts)?;
            let r = msolution_residual(&sol)?;
            (sol, r)
        } else {
            let inc = generate_increments(&mesh, 1, cfg.paths, noise, cfg.seed)?;
            let sol = solve_bsvie(&inst, &inc, &opts)?;
            let r = msolution_residual_rms(&sol, &inc)?;
            (sol, r)
        };
        let ap = apriori_l2_check(&sol, cfg.m_bound);
        let y0 = sol.cell_summary(0, 0).mean_y;
        let mut buf = Vec::new();
        write_summary_csv(&sol, &mut buf)?;
        ctx.write(&format!("solve_N{n}.csv"), &buf)?;
        rows.push(vec![
            n.to_string(),
            fmt_float(y0),
            fmt_float(ap.y_norm),
            fmt_float(ap.z_norm),
            fmt_float(ap.y_ratio),
            fmt_float(ap.z_ratio),
            fmt_float(residual),
        ]);
        level_json.push(json!({ "N": n, "y0": y0, "apriori": ap, "msolution_residual": residual }));
        ctx.check(Suite::Solve, format!("N={n} norms finite"), ap.finite, format!("y_norm={:.6e} z_norm={:.6e}", ap.y_norm, ap.z_norm));
        if backend == Backend::Tree {
            let ok = residual <= cfg.tolerances.msolution;
            ctx.check(Suite::Solve, format!("N={n} M-solution identity"), ok, format!("residual={residual:.3e}"));
        }
    }
    ctx.table(
        "solve.csv",
        &["N", "y0", "y_norm", "z_norm", "y_ratio", "z_ratio", "msolution_residual"],
        &rows,
    )?;
    let mut v = header(cfg, Suite::Solve, backend, noise);
    v["levels_detail"] = json!(level_json);
    v["m_bound"] = json!(cfg.m_bound);
    ctx.json("solve.json", &v)
}

/// Errors on every level from one fine batch at `finest * Q`, coarsened per level.
pub fn converge_entries(
    inst: &ProblemInstance64,
    cfg: &ExperimentConfig,
    backend: Backend,
    noise: NoiseKind,
) -> Result<Vec<ErrorEntry>, CliError> {
    let reference = inst
        .closed_form()
        .ok_or_else(|| CliError::Config(format!("instance `{}` has no closed-form reference", cfg.instance)))?;
    let opts = solver_options(cfg);
    let mut entries = Vec::new();
    if backend == Backend::Tree {
        for &n in &cfg.levels {
            let sol = solve_bsvie_tree(inst, &mesh(cfg, n)?, &opts)?;
            entries.push(scheme_error(&sol, reference, None, bsvie_core::analysis::QuadratureRule::Trapezoid)?);
        }
        return Ok(entries);
    }
    let q = cfg.quadrature;
    let finest = *cfg.levels.last().unwrap();
    let fine_mesh = mesh(cfg, finest * q)?;
    let fine = generate_increments(&fine_mesh, 1, cfg.paths, noise, cfg.seed)?;
    for &n in &cfg.levels {
        let factor = finest / n;
        let quad: IncrementBatch<f64> = if factor == 1 { fine.clone() } else { fine.coarsen(&mesh(cfg, n * q)?, factor)? };
        let coarse = if q == 1 { quad.clone() } else { quad.coarsen(&mesh(cfg, n)?, q)? };
        let sol = solve_bsvie(inst, &coarse, &opts)?;
        entries.push(scheme_error(&sol, reference, Some(&quad), cfg.rule())?);
    }
    Ok(entries)
}

fn converge(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let inst = instance(cfg)?;
    let (backend, noise) = backend_for(cfg, *cfg.levels.last().unwrap());
    let entries = converge_entries(&inst, cfg, backend, noise)?;
    let report = ConvergenceReport::new(cfg.instance.clone(), entries);
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    ctx.write("converge.csv", &buf)?;
    let mut v = header(cfg, Suite::Converge, backend, noise);
    v["report"] = serde_json::to_value(&report).expect("report serializes");
    v["quadrature"] = json!({ "per_cell": if backend == Backend::Tree { 1 } else { cfg.quadrature }, "rule": cfg.rule() });
    ctx.json("converge.json", &v)?;
    if let Some(fit) = report.fit {
        let ok = fit.slope >= cfg.tolerances.min_slope;
        ctx.check(
            Suite::Converge,
            "slope",
            ok,
            format!("slope={:.4} >= {} ({})", fit.slope, cfg.tolerances.min_slope, report.context),
        );
    }
    Ok(())
}

/// Successive totals must drop by more than `z` combined standard errors.
fn decreasing(xs: &[Estimate], z: f64) -> bool {
    xs.windows(2).all(|w| {
        let se = (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        w[0].value - w[1].value > z * se
    })
}

pub fn bsde_approx_levels(
    inst: &ProblemInstance64,
    cfg: &ExperimentConfig,
    backend: Backend,
    noise: NoiseKind,
) -> Result<Vec<ApproxError>, CliError> {
    let reference = inst
        .closed_form()
        .ok_or_else(|| CliError::Config(format!("instance `{}` has no closed-form reference", cfg.instance)))?;
    let opts = SystemOptions {
        refinement: cfg.refinement,
        regression: cfg.regression(),
        ..Default::default()
    };
    cfg.levels
        .iter()
        .map(|&n| {
            let outer = mesh(cfg, n)?;
            let sol = if backend == Backend::Tree {
                solve_bsde_system_tree(inst, &outer, &opts)?
            } else {
                let inner = outer.refine(cfg.refinement)?;
                let inc = generate_increments(&inner, 1, cfg.paths, noise, cfg.seed)?;
                solve_bsde_system(inst, &outer, &inc, &opts)?
            };
            Ok(bsde_approx_error(&sol, reference)?)
        })
        .collect()
}

fn bsde_approx(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let inst = instance(cfg)?;
    let (backend, noise) = backend_for(cfg, *cfg.levels.last().unwrap() * cfg.refinement);
    let errs = bsde_approx_levels(&inst, cfg, backend, noise)?;
    let rows: Vec<Vec<String>> = cfg
        .levels
        .iter()
        .zip(&errs)
        .enumerate()
        .map(|(i, (&n, e))| {
            let mut r = vec![i.to_string(), n.to_string(), fmt_float(cfg.horizon / n as f64)];
            for est in [&e.y_part, &e.z_part, &e.total] {
                r.extend(est_cells(est));
            }
            r
        })
        .collect();
    ctx.table(
        "bsde_approx.csv",
        &["level", "N", "mesh_norm", "err_Y", "se_Y", "err_Z", "se_Z", "err_total", "se_total"],
        &rows,
    )?;
    let mut v = header(cfg, Suite::BsdeApprox, backend, noise);
    v["refinement"] = json!(cfg.refinement);
    v["errors"] = json!(errs);
    ctx.json("bsde_approx.json", &v)?;
    if errs.len() >= 2 {
        let totals: Vec<Estimate> = errs.iter().map(|e| e.total).collect();
        let ok = decreasing(&totals, cfg.tolerances.z_score);
        let shown: Vec<String> = totals.iter().map(|e| format!("{:.4e}", e.value)).collect();
        ctx.check(Suite::BsdeApprox, "strictly decreasing", ok, shown.join(" > "));
    }
    Ok(())
}

pub fn moduli_levels(
    inst: &ProblemInstance64,
    cfg: &ExperimentConfig,
    backend: Backend,
    noise: NoiseKind,
) -> Result<Vec<Moduli>, CliError> {
    let reference = inst
        .closed_form()
        .ok_or_else(|| CliError::Config(format!("instance `{}` has no closed-form reference", cfg.instance)))?;
    let reg = cfg.regression();
    cfg.levels
        .iter()
        .map(|&n| {
            let outer = mesh(cfg, n)?;
            let inc = if backend == Backend::Tree {
                TreeEnsemble::with_cap(&outer, DEFAULT_TREE_CAP)?.to_increments()
            } else {
                let fine = outer.refine(cfg.quadrature)?;
                generate_increments(&fine, 1, cfg.paths, noise, cfg.seed)?
            };
            Ok(regularity_moduli(
                ModuliReference::ClosedForm {
                    solution: reference,
                    increments: &inc,
                },
                &outer,
                &reg,
            )?)
        })
        .collect()
}

fn moduli(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let inst = instance(cfg)?;
    let (backend, noise) = backend_for(cfg, *cfg.levels.last().unwrap());
    let ms = moduli_levels(&inst, cfg, backend, noise)?;
    let rows: Vec<Vec<String>> = cfg
        .levels
        .iter()
        .zip(&ms)
        .enumerate()
        .map(|(i, (&n, m))| {
            let mut r = vec![i.to_string(), n.to_string(), fmt_float(cfg.horizon / n as f64)];
            for est in [&m.e_y, &m.e_z, &m.total] {
                r.extend(est_cells(est));
            }
            r.push(if i == 0 { String::new() } else { fmt_float(ms[i - 1].total.value / m.total.value) });
            r
        })
        .collect();
    ctx.table(
        "moduli.csv",
        &["level", "N", "mesh_norm", "E_Y", "se_Y", "E_Z", "se_Z", "total", "se_total", "ratio"],
        &rows,
    )?;
    let pts: Vec<(f64, f64)> = cfg.levels.iter().zip(&ms).map(|(&n, m)| (cfg.horizon / n as f64, m.total.value)).collect();
    let fit = fit_rate(&pts).ok();
    let mut v = header(cfg, Suite::Moduli, backend, noise);
    v["moduli"] = json!(ms);
    v["fit"] = json!(fit);
    ctx.json("moduli.json", &v)?;
    if let Some(f) = fit {
        let ok = f.slope >= cfg.tolerances.min_slope;
        ctx.check(Suite::Moduli, "linear decay", ok, format!("slope={:.4} >= {}", f.slope, cfg.tolerances.min_slope));
    }
    Ok(())
}

fn gronwall(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let tallies = random_suite(cfg.gronwall_cases, cfg.seed);
    let rows: Vec<Vec<String>> = tallies
        .iter()
        .map(|t| {
            vec![
                t.kind.to_string(),
                t.cases.to_string(),
                t.hypothesis_violations.to_string(),
                t.conclusion_failures.to_string(),
            ]
        })
        .collect();
    ctx.table("gronwall.csv", &["kind", "cases", "hypothesis_violations", "conclusion_failures"], &rows)?;
    ctx.json("gronwall.json", &json!({ "suite": "gronwall", "seed": cfg.seed, "tallies": tallies }))?;
    for t in tallies {
        ctx.check(
            Suite::Gronwall,
            t.kind,
            t.passed(),
            format!(
                "{} cases, {} hypothesis violations, {} conclusion failures",
                t.cases, t.hypothesis_violations, t.conclusion_failures
            ),
        );
    }
    Ok(())
}

/// Largest differences of the tree solver from the brute-force oracle and,
/// when the instance has one, from the closed-form discrete scheme.
pub fn oracle_differences(inst: &ProblemInstance64, n: usize, horizon: f64) -> Result<(f64, Option<f64>), CliError> {
    let mesh = TimeMesh::uniform(n, horizon)?;
    let sol = solve_bsvie_tree(inst, &mesh, &SolverOptions::default())?;
    let brute = brute_force_tree(inst, &mesh)?;
    let exact = exact_discrete_scheme(inst, &mesh).ok();
    let tree = sol.tree().expect("tree backend");
    let mut d_brute = 0.0f64;
    let mut d_exact = 0.0f64;
    for k in 0..n {
        for l in k..=n {
            let ys = sol.tree_y(k, l).expect("tree table");
            let yb = brute.tree_y(k, l).expect("tree table");
            for (node, (a, b)) in ys.iter().zip(yb).enumerate() {
                d_brute = d_brute.max((a - b).abs());
                if let Some(ex) = &exact {
                    d_exact = d_exact.max((a - ex.y(k, l, tree.w_at(l, node))).abs());
                }
            }
            if l < n {
                let zs = sol.tree_z(k, l).expect("tree table");
                let zb = brute.tree_z(k, l).expect("tree table");
                for (a, b) in zs.iter().zip(zb) {
                    d_brute = d_brute.max((a - b).abs());
                    if let Some(ex) = &exact {
                        d_exact = d_exact.max((a - ex.z(k, l)).abs());
                    }
                }
            }
        }
    }
    Ok((d_brute, exact.map(|_| d_exact)))
}

fn oracle_diff(ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let inst = instance(cfg)?;
    let mut rows = Vec::new();
    let mut level_json = Vec::new();
    for &n in &cfg.levels {
        let (brute, exact) = oracle_differences(&inst, n, cfg.horizon)?;
        rows.push(vec![n.to_string(), fmt_float(brute), exact.map(fmt_float).unwrap_or_default()]);
        level_json.push(json!({ "N": n, "brute_force": brute, "exact_discrete": exact }));
        let worst = brute.max(exact.unwrap_or(0.0));
        let tol = cfg.tolerances.oracle;
        ctx.check(Suite::OracleDiff, format!("N={n}"), worst <= tol, format!("max diff {worst:.3e} <= {tol:.0e}"));
    }
    ctx.table("oracle_diff.csv", &["N", "brute_force", "exact_discrete"], &rows)?;
    let mut v = header(cfg, Suite::OracleDiff, Backend::Tree, NoiseKind::Binary);
    v["differences"] = json!(level_json);
    ctx.json("oracle_diff.json", &v)
}
