//! Subcommand implementations. Every command writes its data artifacts plus
//! a run report listing checksums, norms, iteration counts and timings.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dynheat::carleman::{
    build_morse, eval_weights, weight_bounds_check, observability_sample, CarlemanWeights,
};
use dynheat::coeffexpr::{sample_coefficients, CoefficientSpec};
use dynheat::geometry::{
    build_interval_mesh, pair_norm, PairField, RegionSet, RegionSpec,
};
use dynheat::hum::{apply_gramian, duality_check, hum_cg, hum_prox, linear_term, HumResult};
use dynheat::linalg::{sym_eigen, DenseMatrix, Lu};
use dynheat::nash::{apply_r, nash_rhs, nash_solve, ControlPair, GameProblem};
use dynheat::pdecore::{SpaceTime, StepMatrices, TimeGrid, Trajectory};
use dynheat::report::{fmt_float, write_csv, write_json, RunReport};
use dynheat::semilinear::{semilinear_null_control, SemilinearProblem};
use dynheat::{Error, Real, Result};

use crate::config::{Built, RunConfig};

pub struct Ctx {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: PathBuf,
    pub seed: u64,
}

fn csv_st(
    ctx: &Ctx,
    report: &mut RunReport,
    name: &str,
    grid: &TimeGrid<Real>,
    mesh: &dynheat::Mesh,
    field: &SpaceTime<Real>,
) -> Result<()> {
    let mut rows = Vec::with_capacity((grid.m + 1) * mesh.n_bulk());
    for (k, level) in field.iter().enumerate() {
        let t = grid.time(k);
        for (i, p) in mesh.coords.iter().enumerate() {
            rows.push(vec![
                k.to_string(),
                fmt_float(t),
                i.to_string(),
                fmt_float(p.x),
                fmt_float(p.y),
                fmt_float(level[i]),
            ]);
        }
    }
    let path = ctx.out.join(name);
    let sum = write_csv(&path, &ctx.hash, &["step", "time", "node", "x", "y", "value"], &rows)?;
    report.artifact(&path, sum);
    Ok(())
}

fn csv_trajectory(
    ctx: &Ctx,
    report: &mut RunReport,
    name: &str,
    grid: &TimeGrid<Real>,
    mesh: &dynheat::Mesh,
    traj: &Trajectory<Real>,
) -> Result<()> {
    let field: SpaceTime<Real> = traj.levels.iter().map(|l| l.to_state(mesh)).collect();
    csv_st(ctx, report, name, grid, mesh, &field)
}

fn csv_pair(
    ctx: &Ctx,
    report: &mut RunReport,
    name: &str,
    mesh: &dynheat::Mesh,
    field: &PairField<Real>,
) -> Result<()> {
    let state = field.to_state(mesh);
    let rows: Vec<Vec<String>> = mesh
        .coords
        .iter()
        .enumerate()
        .map(|(i, p)| vec![i.to_string(), fmt_float(p.x), fmt_float(p.y), fmt_float(state[i])])
        .collect();
    let path = ctx.out.join(name);
    let sum = write_csv(&path, &ctx.hash, &["node", "x", "y", "value"], &rows)?;
    report.artifact(&path, sum);
    Ok(())
}

fn finish(ctx: &Ctx, report: &RunReport) -> Result<()> {
    let path = report.write(&ctx.out)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for (k, v) in &report.norms {
        println!("{k} = {v:.6e}");
    }
    for (k, v) in &report.iterations {
        println!("{k} = {v}");
    }
    for a in &report.manifest {
        println!("wrote {}", ctx.out.join(&a.file).display());
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn simulate(ctx: &Ctx, built: &Built) -> Result<()> {
    let mut report = RunReport::new(&ctx.hash, "simulate", ctx.seed);
    let problem = &built.problem;
    let t0 = Instant::now();
    let y = problem.step.forward(&problem.y0, None)?;
    report.timing("forward", t0.elapsed().as_secs_f64());
    report.norm("initial_norm", pair_norm(&problem.y0, &problem.mesh));
    report.norm("terminal_norm", pair_norm(y.terminal(), &problem.mesh));
    csv_trajectory(ctx, &mut report, "state.csv", &problem.grid, &problem.mesh, &y)?;
    csv_pair(ctx, &mut report, "terminal.csv", &problem.mesh, y.terminal())?;
    finish(ctx, &report)
}

pub fn nash(ctx: &Ctx, built: &Built) -> Result<()> {
    let mut report = RunReport::new(&ctx.hash, "nash", ctx.seed);
    let problem = &built.problem;
    let f = problem.zero_control();
    let t0 = Instant::now();
    let sol = nash_solve(problem, &f)?;
    report.timing("nash_solve", t0.elapsed().as_secs_f64());
    report.iterations("cg_iterations", sol.trace.iterations);
    report.norm("cg_residual", sol.trace.relative_residual);
    for i in 0..2 {
        report.norm(&format!("j{}", i + 1), dynheat::nash::eval_ji(problem, i, &f, &sol.v[0], &sol.v[1])?);
        report.norm(
            &format!("characterization_residual_{}", i + 1),
            sol.characterization_residual[i],
        );
    }
    if !sol.thresholds.all_satisfied() {
        report.warn(
            "control penalties fall below the coupling threshold; the equilibrium system may be \
             ill-conditioned",
        );
    }
    csv_st(ctx, &mut report, "v1.csv", &problem.grid, &problem.mesh, &sol.v[0])?;
    csv_st(ctx, &mut report, "v2.csv", &problem.grid, &problem.mesh, &sol.v[1])?;
    csv_trajectory(ctx, &mut report, "state.csv", &problem.grid, &problem.mesh, &sol.y)?;
    finish(ctx, &report)
}

fn hum_artifacts(
    ctx: &Ctx,
    built: &Built,
    report: &mut RunReport,
    result: &HumResult<Real>,
) -> Result<()> {
    let problem = &built.problem;
    report.norm("terminal_norm", result.terminal_norm);
    report.norm("control_norm", result.control_norm);
    report.norm("j_eps", result.j_eps);
    report.norm("epsilon", result.epsilon);
    report.iterations("solver_iterations", result.trace.iterations);
    if let Some(r) = result.subgradient_residual {
        report.norm("subgradient_residual", r);
    }
    csv_st(ctx, report, "f.csv", &problem.grid, &problem.mesh, &result.f)?;
    csv_st(ctx, report, "v1.csv", &problem.grid, &problem.mesh, &result.system.v[0])?;
    csv_st(ctx, report, "v2.csv", &problem.grid, &problem.mesh, &result.system.v[1])?;
    csv_pair(ctx, report, "z_terminal.csv", &problem.mesh, &result.z_t)?;
    csv_pair(ctx, report, "y_terminal.csv", &problem.mesh, result.system.y.terminal())?;
    Ok(())
}

pub fn hum(ctx: &Ctx, built: &Built) -> Result<()> {
    let mut report = RunReport::new(&ctx.hash, "hum", ctx.seed);
    let problem = &built.problem;
    let h = &ctx.cfg.hum;
    let t0 = Instant::now();
    let result = match h.solver.as_str() {
        "cg" => hum_cg(problem, h.epsilon, h.tol, h.max_iter)?,
        _ => hum_prox(problem, h.epsilon, h.tol, h.max_iter)?,
    };
    report.timing("synthesis", t0.elapsed().as_secs_f64());
    hum_artifacts(ctx, built, &mut report, &result)?;
    finish(ctx, &report)
}

pub fn observability(ctx: &Ctx, built: &Built) -> Result<()> {
    let mut report = RunReport::new(&ctx.hash, "observability", ctx.seed);
    let problem = &built.problem;
    let c = &ctx.cfg.carleman;
    let morse = build_morse(&problem.mesh, &problem.regions.omega_prime)?;
    let weights = CarlemanWeights::new(&morse, c.lambda, c.s, problem.grid.t_final)?;
    let t0 = Instant::now();
    let stats = observability_sample(problem, &weights, c.samples, ctx.seed, 1e-11)?;
    report.timing("sampling", t0.elapsed().as_secs_f64());
    report.norm("quotient_max", stats.max);
    report.norm("quotient_mean", stats.mean);
    report.norm("carleman_quotient_max", stats.carleman_max);
    report.norm("carleman_quotient_mean", stats.carleman_mean);
    report.iterations("samples", stats.quotients.len());
    report.iterations("skipped", stats.skipped);

    let rows: Vec<Vec<String>> = stats
        .quotients
        .iter()
        .zip(stats.carleman_quotients.iter())
        .enumerate()
        .map(|(i, (q, cq))| vec![i.to_string(), fmt_float(*q), fmt_float(*cq)])
        .collect();
    let path = ctx.out.join("quotients.csv");
    let sum = write_csv(&path, &ctx.hash, &["sample", "quotient", "carleman_quotient"], &rows)?;
    report.artifact(&path, sum);

    let mut hist_rows = Vec::new();
    for (b, &count) in stats.histogram.iter().enumerate() {
        hist_rows.push(vec![
            fmt_float(stats.histogram_edges[b]),
            fmt_float(stats.histogram_edges[b + 1]),
            count.to_string(),
        ]);
    }
    let path = ctx.out.join("histogram.csv");
    let sum = write_csv(&path, &ctx.hash, &["edge_lo", "edge_hi", "count"], &hist_rows)?;
    report.artifact(&path, sum);
    finish(ctx, &report)
}

pub fn weights(ctx: &Ctx, built: &Built) -> Result<()> {
    let mut report = RunReport::new(&ctx.hash, "weights", ctx.seed);
    let problem = &built.problem;
    let c = &ctx.cfg.carleman;
    let morse = build_morse(&problem.mesh, &problem.regions.omega_prime)?;
    let weights = CarlemanWeights::new(&morse, c.lambda, c.s, problem.grid.t_final)?;
    report.norm("landscape_max", morse.max_value);
    report.norm("gradient_floor", morse.gradient_floor);
    report.norm("conormal_bound", morse.conormal_bound);
    report.norm("s_eff", weights.s_eff);

    let rows: Vec<Vec<String>> = problem
        .mesh
        .coords
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                i.to_string(),
                fmt_float(p.x),
                fmt_float(p.y),
                fmt_float(morse.values[i]),
                fmt_float(morse.gradients[i][0]),
                fmt_float(morse.gradients[i][1]),
            ]
        })
        .collect();
    let path = ctx.out.join("landscape.csv");
    let sum = write_csv(&path, &ctx.hash, &["node", "x", "y", "value", "grad_x", "grad_y"], &rows)?;
    report.artifact(&path, sum);

    // Pointwise weights at the interior time levels only; the family blows
    // up at both endpoints of the horizon.
    let grid = &problem.grid;
    let mut wrows = Vec::new();
    for k in 1..grid.m {
        let t = grid.time(k);
        for i in 0..problem.mesh.n_bulk() {
            let v = eval_weights(&weights, i, t)?;
            wrows.push(vec![
                k.to_string(),
                fmt_float(t),
                i.to_string(),
                fmt_float(v.xi),
                fmt_float(v.alpha),
                fmt_float(v.xi_bar),
                fmt_float(v.alpha_bar),
            ]);
        }
    }
    let path = ctx.out.join("weights.csv");
    let sum = write_csv(
        &path,
        &ctx.hash,
        &["step", "time", "node", "xi", "alpha", "xi_bar", "alpha_bar"],
        &wrows,
    )?;
    report.artifact(&path, sum);

    let mut prows = Vec::new();
    for k in 1..grid.m {
        let t = grid.time(k);
        let (rho, overflow) = weights.rho(t);
        prows.push(vec![
            k.to_string(),
            fmt_float(t),
            fmt_float(weights.xi_star(t)),
            fmt_float(weights.alpha_star(t)),
            fmt_float(rho),
            (overflow as u8).to_string(),
            fmt_float(weights.rho_inv_sq(t)),
        ]);
    }
    let path = ctx.out.join("profiles.csv");
    let sum = write_csv(
        &path,
        &ctx.hash,
        &["step", "time", "xi_star", "alpha_star", "rho", "rho_overflow", "rho_inv_sq"],
        &prows,
    )?;
    report.artifact(&path, sum);

    let bounds = weight_bounds_check(&weights, 4 * grid.m);
    let value = serde_json::json!({
        "sup_dt_alpha_over_xi2": bounds.sup_dt_alpha_over_xi2,
        "sup_dt_xi_over_xi2": bounds.sup_dt_xi_over_xi2,
        "sup_grad_alpha_over_lambda_xi": bounds.sup_grad_alpha_over_lambda_xi,
        "sup_profile_derivative_l4": bounds.sup_profile_derivative_l4,
        "sup_profile_derivative_l5": bounds.sup_profile_derivative_l5,
        "sup_decay_xi3": bounds.sup_decay_xi[0],
        "sup_decay_xi5": bounds.sup_decay_xi[1],
        "sup_decay_xi7": bounds.sup_decay_xi[2],
        "endpoint_to_interior_ratio": bounds.endpoint_to_interior_ratio,
        "all_finite": bounds.all_finite,
    });
    let path = ctx.out.join("weight_bounds.json");
    let sum = write_json(&path, &ctx.hash, &value)?;
    report.artifact(&path, sum);
    if !bounds.all_finite {
        report.warn("a sampled weight combination was not finite");
    }
    finish(ctx, &report)
}

pub fn semilinear(ctx: &Ctx, built: Built) -> Result<()> {
    let mut report = RunReport::new(&ctx.hash, "semilinear", ctx.seed);
    let nl = built
        .nl
        .clone()
        .ok_or_else(|| Error::Config("the semilinear command requires a [nonlinearity] block".into()))?;
    let block = ctx.cfg.nonlinearity.as_ref().unwrap();
    let sp = SemilinearProblem::new(built.problem, built.lin, nl)?;
    let h = &ctx.cfg.hum;
    let t0 = Instant::now();
    let result = semilinear_null_control(&sp, h.epsilon, block.outer_tol, block.max_outer)?;
    report.timing("synthesis", t0.elapsed().as_secs_f64());
    let problem = &sp.base;
    report.norm("terminal_norm", result.terminal_norm);
    report.norm("epsilon", h.epsilon);
    report.norm("control_norm", result.hum.control_norm);
    report.iterations("outer_iterations", result.outer_iters);
    report.iterations("cg_iterations", result.hum.trace.iterations);
    if !result.monotone {
        report.warn("outer fixed-point residuals were not monotonically decreasing");
    }
    csv_st(ctx, &mut report, "f.csv", &problem.grid, &problem.mesh, &result.hum.f)?;
    csv_st(ctx, &mut report, "v1.csv", &problem.grid, &problem.mesh, &result.hum.system.v[0])?;
    csv_st(ctx, &mut report, "v2.csv", &problem.grid, &problem.mesh, &result.hum.system.v[1])?;
    csv_pair(ctx, &mut report, "y_terminal.csv", &problem.mesh, result.y.terminal())?;
    let rows: Vec<Vec<String>> = result
        .residuals
        .iter()
        .enumerate()
        .map(|(i, r)| vec![(i + 1).to_string(), fmt_float(*r)])
        .collect();
    let path = ctx.out.join("outer_residuals.csv");
    let sum = write_csv(&path, &ctx.hash, &["sweep", "relative_change"], &rows)?;
    report.artifact(&path, sum);
    finish(ctx, &report)
}

/// Small built-in problem for the dense cross-checks: interval, pure heat,
/// eight nodes and eight steps, random data.
fn oracle_problem(seed: u64) -> Result<(GameProblem<Real>, PairField<Real>)> {
    use rand::{Rng, SeedableRng};
    let mesh = build_interval_mesh(8, 1.0)?;
    let grid = TimeGrid::new(1.0, 8, 0.5)?;
    let coeffs = sample_coefficients(&CoefficientSpec::heat(), &mesh, &grid)?;
    let step = StepMatrices::build(&mesh, &coeffs, &grid)?;
    let regions = RegionSet::build(
        &mesh,
        &RegionSpec::Interval { lo: 0.2, hi: 0.9 },
        &RegionSpec::Interval { lo: 0.1, hi: 0.4 },
        &RegionSpec::Interval { lo: 0.6, hi: 0.9 },
        &RegionSpec::Interval { lo: 0.4, hi: 0.7 },
        &RegionSpec::Interval { lo: 0.45, hi: 0.65 },
    )?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = mesh.n_bulk();
    let state: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y0 = PairField::from_state(&mesh, &state);
    let mut targets = [dynheat::pdecore::zero_space_time(n, &grid), dynheat::pdecore::zero_space_time(n, &grid)];
    for t in targets.iter_mut() {
        for level in t.iter_mut() {
            for v in level.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
    let z_state: Vec<Real> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let z_t = PairField::from_state(&mesh, &z_state);
    let problem = GameProblem {
        mesh,
        grid,
        regions,
        step,
        alpha: [1.0, 1.0],
        mu: [100.0, 100.0],
        y0,
        targets,
        background: None,
    };
    Ok((problem, z_t))
}

fn pair_coords(problem: &GameProblem<Real>) -> Vec<(usize, usize, usize)> {
    let mut coords = Vec::new();
    for i in 0..2 {
        let region = problem.follower_region(i);
        for k in 0..=problem.grid.m {
            for &idx in &region.indices {
                coords.push((i, k, idx));
            }
        }
    }
    coords
}

fn pack(coords: &[(usize, usize, usize)], p: &ControlPair<Real>) -> Vec<Real> {
    coords.iter().map(|&(i, k, idx)| p.v[i][k][idx]).collect()
}

fn unpack(problem: &GameProblem<Real>, coords: &[(usize, usize, usize)], x: &[Real]) -> ControlPair<Real> {
    let mut p = ControlPair::zeros(problem);
    for (&(i, k, idx), &v) in coords.iter().zip(x.iter()) {
        p.v[i][k][idx] = v;
    }
    p
}

pub fn oracle(ctx: &Ctx) -> Result<()> {
    let mut report = RunReport::new(&ctx.hash, "oracle", ctx.seed);
    let (problem, z_t) = oracle_problem(ctx.seed)?;
    let tol = 1e-12;

    let t0 = Instant::now();
    let duality = duality_check(&problem, &z_t, tol)?;
    report.norm("duality_residual", duality);

    // Equilibrium operator: dense assembly column by column, LU solve, then
    // comparison with the matrix-free conjugate-gradient solution.
    let coords = pair_coords(&problem);
    let dim = coords.len();
    let mut r_dense = DenseMatrix::zeros(dim, dim);
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let col = pack(&coords, &apply_r(&problem, &unpack(&problem, &coords, &e))?);
        for i in 0..dim {
            r_dense[(i, j)] = col[i];
        }
    }
    let f = problem.zero_control();
    let rhs = pack(&coords, &nash_rhs(&problem, &f)?);
    let lu = Lu::factor(&r_dense)?;
    let dense_v = lu.solve(&rhs);
    let iterative = nash_solve(&problem, &f)?;
    let iter_v = pack(&coords, &ControlPair { v: iterative.v });
    let scale = dense_v.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let equilibrium = dense_v
        .iter()
        .zip(iter_v.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale;
    report.norm("equilibrium_residual", equilibrium);

    // Dense control-to-terminal operator on the stacked state space:
    // symmetry in the mass inner product, positive semidefiniteness, and a
    // dense solve of the penalized system against the iterative one.
    let n = problem.n();
    let mass = problem.mesh.mass_vector();
    let mut g = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = apply_gramian(&problem, &PairField::from_state(&problem.mesh, &e), tol)?
            .to_state(&problem.mesh);
        for i in 0..n {
            g[(i, j)] = col[i];
        }
    }
    let mut gscale = 0.0f64;
    let mut sym = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let a = mass[i] * g[(i, j)];
            let b = mass[j] * g[(j, i)];
            gscale = gscale.max(a.abs());
            sym = sym.max((a - b).abs());
        }
    }
    report.norm("gramian_symmetry_residual", sym / gscale.max(1e-300));

    let mut g_sym = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g_sym[(i, j)] = mass[i].sqrt() * g[(i, j)] / mass[j].sqrt();
        }
    }
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (g_sym[(i, j)] + g_sym[(j, i)]);
            g_sym[(i, j)] = avg;
            g_sym[(j, i)] = avg;
        }
    }
    let (eigs, _) = sym_eigen(&g_sym);
    let min_eig = eigs.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    report.norm("gramian_min_eigenvalue", min_eig);

    let epsilon = 1e-3;
    let c = linear_term(&problem, tol)?.to_state(&problem.mesh);
    let mut penalized = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            penalized[(i, j)] = g[(i, j)] + if i == j { epsilon } else { 0.0 };
        }
    }
    let rhs: Vec<Real> = c.iter().map(|v| -v).collect();
    let dense_z = Lu::factor(&penalized)?.solve(&rhs);
    let iterative = hum_cg(&problem, epsilon, 1e-12, 400)?;
    let iter_z = iterative.z_t.to_state(&problem.mesh);
    let zscale = dense_z.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let penalized_res = dense_z
        .iter()
        .zip(iter_z.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / zscale;
    report.norm("penalized_system_residual", penalized_res);
    report.timing("cross_checks", t0.elapsed().as_secs_f64());

    let value = serde_json::to_value(&report.norms)?;
    let path = ctx.out.join("oracle.json");
    let sum = write_json(&path, &ctx.hash, &value)?;
    report.artifact(&path, sum);

    let worst = duality
        .max(equilibrium)
        .max(sym / gscale.max(1e-300))
        .max((-min_eig).max(0.0))
        .max(penalized_res);
    if worst > 1e-8 {
        finish(ctx, &report)?;
        return Err(Error::Contract(format!(
            "dense cross-check residual {worst:.3e} exceeds 1e-8"
        )));
    }
    finish(ctx, &report)
}

pub fn out_dir(cfg: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| Path::new(&cfg.output.directory).to_path_buf())
}
