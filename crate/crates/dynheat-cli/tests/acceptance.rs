//! End-to-end acceptance suite. Each numbered criterion prints one PASS or
//! FAIL line; the test fails if any criterion does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynheat::carleman::{build_morse, weight_bounds_check, observability_sample, CarlemanWeights};
use dynheat::coeffexpr::{parse_expr, sample_coefficients, CoefficientSpec};
use dynheat::geometry::{
    build_interval_mesh, inner_product, pair_norm, Mesh, PairField, RegionMask, RegionSet,
    RegionSpec,
};
use dynheat::hum::{
    apply_gramian, cascade_solve, hum_cg, hum_prox, linear_term, optimality_solve,
};
use dynheat::linalg::{sym_eigen, DenseMatrix, Lu};
use dynheat::nash::{
    apply_r, check_mu_thresholds, nash_rhs, nash_solve, verify_nash, ControlField, ControlPair,
    GameProblem,
};
use dynheat::pdecore::{
    dense_exponential, st_region_dot, zero_space_time, SpaceTime, StepMatrices, TimeGrid,
};
use dynheat::semilinear::{
    semilinear_forward, semilinear_null_control, quasi_nash_solve, Nonlinearity,
    SemilinearProblem,
};

const DESK_REGIONS: [[f64; 2]; 5] =
    [[0.2, 0.9], [0.1, 0.4], [0.6, 0.9], [0.4, 0.7], [0.45, 0.65]];

fn build_problem(
    n: usize,
    m: usize,
    theta: f64,
    spec: &CoefficientSpec,
    y0: Option<PairField<f64>>,
    targets: Option<[SpaceTime<f64>; 2]>,
) -> GameProblem<f64> {
    let mesh = build_interval_mesh(n, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, m, theta).unwrap();
    let coeffs = sample_coefficients(spec, &mesh, &grid).unwrap();
    let step = StepMatrices::build(&mesh, &coeffs, &grid).unwrap();
    let r = |i: usize| RegionSpec::Interval { lo: DESK_REGIONS[i][0], hi: DESK_REGIONS[i][1] };
    let regions = RegionSet::build(&mesh, &r(0), &r(1), &r(2), &r(3), &r(4)).unwrap();
    let y0 = y0.unwrap_or_else(|| {
        let bulk: Vec<f64> =
            mesh.coords.iter().map(|p| (std::f64::consts::PI * p.x).sin()).collect();
        PairField::from_state(&mesh, &bulk)
    });
    let targets = targets
        .unwrap_or_else(|| [zero_space_time(n, &grid), zero_space_time(n, &grid)]);
    GameProblem {
        mesh,
        grid,
        regions,
        step,
        alpha: [1.0, 1.0],
        mu: [100.0, 100.0],
        y0,
        targets,
        background: None,
    }
}

fn desk(n: usize, m: usize) -> GameProblem<f64> {
    build_problem(n, m, 0.5, &CoefficientSpec::heat(), None, None)
}

fn random_field(mesh: &Mesh<f64>, rng: &mut ChaCha8Rng) -> PairField<f64> {
    let state: Vec<f64> = (0..mesh.n_bulk()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    PairField::from_state(mesh, &state)
}

fn random_st(n: usize, grid: &TimeGrid<f64>, rng: &mut ChaCha8Rng) -> SpaceTime<f64> {
    (0..=grid.m).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn tracking_targets(problem: &GameProblem<f64>) -> [SpaceTime<f64>; 2] {
    let n = problem.n();
    let grid = &problem.grid;
    let mut targets = [zero_space_time(n, grid), zero_space_time(n, grid)];
    for (j, t) in targets.iter_mut().enumerate() {
        for k in 0..=grid.m {
            let tt = grid.time(k);
            for (i, p) in problem.mesh.coords.iter().enumerate() {
                let base = (std::f64::consts::PI * p.x).sin() * (1.0 - tt / grid.t_final);
                t[k][i] = if j == 0 { 0.5 * base } else { -0.3 * base };
            }
        }
    }
    targets
}

fn pair_coords(problem: &GameProblem<f64>) -> Vec<(usize, usize, usize)> {
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

fn max_st_diff(grid: &TimeGrid<f64>, a: &SpaceTime<f64>, b: &SpaceTime<f64>) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..=grid.m {
        for (x, y) in a[k].iter().zip(b[k].iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// 1. Discrete duality identity on a refined grid with fully random data.
fn c01_duality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD0A11);
    let mut p = build_problem(64, 128, 0.5, &CoefficientSpec::heat(), None, None);
    p.y0 = random_field(&p.mesh, &mut rng);
    p.targets = [random_st(p.n(), &p.grid, &mut rng), random_st(p.n(), &p.grid, &mut rng)];
    let f: ControlField<f64> = random_st(p.n(), &p.grid, &mut rng);
    let z_t = random_field(&p.mesh, &mut rng);

    let cascade = cascade_solve(&p, &z_t, 1e-12, 400).unwrap();
    let sys = optimality_solve(&p, &f, 1e-12).unwrap();
    let lhs = inner_product(sys.y.terminal(), &z_t, &p.mesh).unwrap();
    let zhat: SpaceTime<f64> = cascade.z.observed.iter().map(|l| l.bulk.clone()).collect();
    let mut rhs = inner_product(&p.y0, cascade.z.states.initial(), &p.mesh).unwrap();
    rhs += st_region_dot(&p.grid, &p.regions.omega, &f, &zhat);
    for i in 0..2 {
        let psi: SpaceTime<f64> =
            cascade.psi[i].levels.iter().map(|l| l.bulk.clone()).collect();
        rhs -= p.alpha[i] * st_region_dot(&p.grid, &p.regions.omega_d, &p.targets[i], &psi);
    }
    let res = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
    check(res <= 1e-10, format!("residual {res:.3e} (tol 1e-10)"))
}

// 2. Forward solver against the dense eigendecomposition exponential.
fn c02_forward_oracle() -> Outcome {
    let mesh = build_interval_mesh::<f64>(16, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 4096, 0.5).unwrap();
    let coeffs = sample_coefficients(&CoefficientSpec::heat(), &mesh, &grid).unwrap();
    let step = StepMatrices::build(&mesh, &coeffs, &grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF0);
    let y0 = random_field(&mesh, &mut rng);
    let traj = step.forward(&y0, None).unwrap();
    let oracle = dense_exponential(&mesh, &coeffs, grid.t_final, &y0).unwrap();
    let mut diff = traj.terminal().clone();
    diff.axpy(-1.0, &oracle);
    let rel = pair_norm(&diff, &mesh) / pair_norm(&oracle, &mesh);
    check(rel <= 1e-4, format!("relative terminal error {rel:.3e} (tol 1e-4)"))
}

// 3. Conservation of the total measure under pure diffusion.
fn c03_mass_conservation() -> Outcome {
    let mut worst = 0.0f64;
    for theta in [0.5, 1.0] {
        let mesh = build_interval_mesh::<f64>(32, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 1000, theta).unwrap();
        let coeffs = sample_coefficients(&CoefficientSpec::heat(), &mesh, &grid).unwrap();
        let step = StepMatrices::build(&mesh, &coeffs, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0x3A55);
        let y0 = random_field(&mesh, &mut rng);
        let traj = step.forward(&y0, None).unwrap();
        let mass = mesh.mass_vector();
        let total = |p: &PairField<f64>| -> f64 {
            p.to_state(&mesh).iter().zip(mass.iter()).map(|(a, b)| a * b).sum()
        };
        let m0 = total(traj.initial());
        for level in &traj.levels {
            worst = worst.max((total(level) - m0).abs() / m0.abs().max(1.0));
        }
    }
    check(worst <= 1e-12, format!("worst relative drift {worst:.3e} (tol 1e-12)"))
}

// 4. Equilibrium stationarity under random perturbation directions.
fn c04_nash_stationarity() -> Outcome {
    let mut p = desk(32, 64);
    p.targets = tracking_targets(&p);
    let f = p.zero_control();
    let sol = nash_solve(&p, &f).unwrap();
    let stat = verify_nash(&p, &f, &sol.v[0], &sol.v[1], 10, 99).unwrap();
    let worst = stat[0].max(stat[1]);
    check(worst <= 1e-6, format!("max directional derivative {worst:.3e} (tol 1e-6)"))
}

// 5. Dense equilibrium operator: LU solve vs. iterative, weighted symmetric
// part positive definite under the penalty thresholds.
fn c05_dense_equilibrium() -> Outcome {
    let mut p = desk(8, 8);
    p.targets = tracking_targets(&p);
    let coords = pair_coords(&p);
    let dim = coords.len();
    let pack = |cp: &ControlPair<f64>| -> Vec<f64> {
        coords.iter().map(|&(i, k, idx)| cp.v[i][k][idx]).collect()
    };
    let unpack = |x: &[f64]| -> ControlPair<f64> {
        let mut cp = ControlPair::zeros(&p);
        for (&(i, k, idx), &v) in coords.iter().zip(x.iter()) {
            cp.v[i][k][idx] = v;
        }
        cp
    };
    let mut r_dense = DenseMatrix::zeros(dim, dim);
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let col = pack(&apply_r(&p, &unpack(&e)).unwrap());
        for i in 0..dim {
            r_dense[(i, j)] = col[i];
        }
    }
    let f = p.zero_control();
    let rhs = pack(&nash_rhs(&p, &f).unwrap());
    let dense_v = Lu::factor(&r_dense).unwrap().solve(&rhs);
    let sol = nash_solve(&p, &f).unwrap();
    let iter_v = pack(&ControlPair { v: sol.v });
    let scale = dense_v.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let gap = dense_v
        .iter()
        .zip(iter_v.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale;

    // Weighted symmetric part, in the control-pair inner product.
    let weights: Vec<f64> = coords
        .iter()
        .map(|&(i, k, idx)| {
            let region = p.follower_region(i);
            let pos = region.indices.iter().position(|&j| j == idx).unwrap();
            p.grid.weight(k) * region.weights[pos]
        })
        .collect();
    let mut sym = DenseMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            sym[(i, j)] = 0.5 * (weights[i] * r_dense[(i, j)] + weights[j] * r_dense[(j, i)]);
        }
    }
    let (eigs, _) = sym_eigen(&sym);
    let min_eig = eigs.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let thresholds = check_mu_thresholds(&p).unwrap();
    let pd_ok = !thresholds.all_satisfied() || min_eig > 0.0;
    check(
        gap <= 1e-8 && pd_ok,
        format!("dense vs iterative gap {gap:.3e} (tol 1e-8), min eigenvalue {min_eig:.3e}"),
    )
}

// 6. Pointwise multiplier characterization of the equilibrium controls.
fn c06_characterization() -> Outcome {
    let mut p = desk(32, 64);
    p.targets = tracking_targets(&p);
    let mut f = p.zero_control();
    for k in 0..=p.grid.m {
        for &idx in &p.regions.omega.indices {
            f[k][idx] = 0.4 * (p.mesh.coords[idx].x * 3.0).cos();
        }
    }
    let sol = nash_solve(&p, &f).unwrap();
    let worst = sol.characterization_residual[0].max(sol.characterization_residual[1]);
    check(worst <= 1e-9, format!("worst residual {worst:.3e} (tol 1e-9)"))
}

// 7. Control-to-terminal operator: dense symmetry and spectrum on the small
// grid, matrix-free self-adjointness on a refined one.
fn c07_gramian() -> Outcome {
    let p = desk(8, 8);
    let n = p.n();
    let mass = p.mesh.mass_vector();
    let mut g = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = apply_gramian(&p, &PairField::from_state(&p.mesh, &e), 1e-12)
            .unwrap()
            .to_state(&p.mesh);
        for i in 0..n {
            g[(i, j)] = col[i];
        }
    }
    let mut sym_gap = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let a = mass[i] * g[(i, j)];
            let b = mass[j] * g[(j, i)];
            scale = scale.max(a.abs());
            sym_gap = sym_gap.max((a - b).abs());
        }
    }
    sym_gap /= scale;
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

    let p2 = desk(16, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A);
    let z = random_field(&p2.mesh, &mut rng);
    let w = random_field(&p2.mesh, &mut rng);
    let gz = apply_gramian(&p2, &z, 1e-12).unwrap();
    let gw = apply_gramian(&p2, &w, 1e-12).unwrap();
    let a = inner_product(&gz, &w, &p2.mesh).unwrap();
    let b = inner_product(&z, &gw, &p2.mesh).unwrap();
    let pairing = (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    check(
        sym_gap <= 1e-10 && min_eig >= -1e-12 && pairing <= 1e-10,
        format!(
            "symmetry {sym_gap:.3e} (tol 1e-10), min eigenvalue {min_eig:.3e} (floor -1e-12), \
             pairing {pairing:.3e} (tol 1e-10)"
        ),
    )
}

// 8. Penalty scaling of the quadratic synthesis on rough initial data.
fn c08_penalty_scaling() -> Outcome {
    let mesh = build_interval_mesh::<f64>(32, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let state: Vec<f64> = (0..32)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let y0 = PairField::from_state(&mesh, &state);
    let p = build_problem(32, 64, 0.5, &CoefficientSpec::heat(), Some(y0), None);
    let epsilons = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
    let mut terminals = Vec::new();
    for &eps in &epsilons {
        let r = hum_cg(&p, eps, 1e-9, 400).unwrap();
        terminals.push(r.terminal_norm);
    }
    let monotone = terminals.windows(2).all(|w| w[1] < w[0]);
    // Least-squares slope of log terminal norm against log epsilon.
    let xs: Vec<f64> = epsilons.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = terminals.iter().map(|t| t.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    check(
        monotone && (0.35..=0.65).contains(&slope),
        format!("monotone {monotone}, slope {slope:.3} (range [0.35, 0.65])"),
    )
}

// 9. Norm-penalty synthesis: terminal norm within the penalty radius and a
// small subgradient optimality residual.
fn c09_prox() -> Outcome {
    let p = desk(32, 64);
    let eps = 1e-3;
    let r = hum_prox(&p, eps, 1e-6, 20_000).unwrap();
    let sub = r.subgradient_residual.unwrap_or(f64::NAN);
    check(
        r.terminal_norm <= 1.05 * eps && sub <= 1e-6,
        format!(
            "terminal {:.4e} (cap {:.4e}), subgradient residual {sub:.3e} (tol 1e-6)",
            r.terminal_norm,
            1.05 * eps
        ),
    )
}

// 10. Linearity of the synthesis map in the initial state.
fn c10_linearity() -> Outcome {
    let p = desk(32, 64);
    let r1 = hum_cg(&p, 1e-3, 1e-10, 400).unwrap();
    let mut y0 = p.y0.clone();
    y0.scale(2.0);
    let p2 = build_problem(32, 64, 0.5, &CoefficientSpec::heat(), Some(y0), None);
    let r2 = hum_cg(&p2, 1e-3, 1e-10, 400).unwrap();
    let mut doubled = r1.f.clone();
    for level in doubled.iter_mut() {
        for v in level.iter_mut() {
            *v *= 2.0;
        }
    }
    let scale = r2.f.iter().flatten().fold(1e-300f64, |m, v| m.max(v.abs()));
    let gap = max_st_diff(&p.grid, &doubled, &r2.f) / scale;
    check(gap <= 1e-8, format!("nodewise relative gap {gap:.3e} (tol 1e-8)"))
}

// 11. Observability quotients: finite, stable under refinement, and
// reproducible bit for bit.
fn c11_observability() -> Outcome {
    let run = |n: usize| {
        let p = desk(n, 64);
        let morse = build_morse(&p.mesh, &p.regions.omega_prime).unwrap();
        let w = CarlemanWeights::new(&morse, 2.0, 3.0, p.grid.t_final).unwrap();
        observability_sample(&p, &w, 200, 7, 1e-11).unwrap()
    };
    let coarse = run(32);
    let fine = run(64);
    let finite = coarse.quotients.iter().chain(fine.quotients.iter()).all(|q| q.is_finite())
        && coarse
            .carleman_quotients
            .iter()
            .chain(fine.carleman_quotients.iter())
            .all(|q| q.is_finite());
    let ratio = coarse.max.max(fine.max) / coarse.max.min(fine.max);
    let again = run(32);
    let bitwise = coarse.quotients == again.quotients
        && coarse.carleman_quotients == again.carleman_quotients;
    check(
        finite && ratio <= 4.0 && bitwise,
        format!("finite {finite}, refinement ratio {ratio:.3} (cap 4), bitwise repeat {bitwise}"),
    )
}

// 12. Weight-family bounds: finite suprema, stable under sample refinement,
// decay toward the horizon endpoints.
fn c12_weight_bounds() -> Outcome {
    let p = desk(32, 64);
    let morse = build_morse(&p.mesh, &p.regions.omega_prime).unwrap();
    let w = CarlemanWeights::new(&morse, 2.0, 3.0, p.grid.t_final).unwrap();
    let a = weight_bounds_check(&w, 200);
    let b = weight_bounds_check(&w, 400);
    let close = |x: f64, y: f64| (x - y).abs() <= 0.2 * x.abs().max(y.abs()).max(1e-300);
    let stable = close(a.sup_dt_alpha_over_xi2, b.sup_dt_alpha_over_xi2)
        && close(a.sup_dt_xi_over_xi2, b.sup_dt_xi_over_xi2)
        && close(a.sup_grad_alpha_over_lambda_xi, b.sup_grad_alpha_over_lambda_xi)
        && close(a.sup_profile_derivative_l4, b.sup_profile_derivative_l4)
        && close(a.sup_decay_xi[2], b.sup_decay_xi[2]);
    let decay = b.endpoint_to_interior_ratio < 1.0;
    check(
        a.all_finite && b.all_finite && stable && decay,
        format!(
            "finite {}, refinement-stable {stable}, endpoint ratio {:.3e} (< 1)",
            a.all_finite && b.all_finite,
            b.endpoint_to_interior_ratio
        ),
    )
}

// 13. Landscape construction succeeds for off-center interior regions.
fn c13_landscape() -> Outcome {
    let mesh = build_interval_mesh::<f64>(64, 1.0).unwrap();
    let mut detail = String::new();
    let mut pass = true;
    for (lo, hi) in [(0.15, 0.35), (0.55, 0.75), (0.2, 0.3)] {
        let mask = RegionMask::build(&mesh, &RegionSpec::Interval { lo, hi });
        match build_morse(&mesh, &mask) {
            Ok(m) => {
                if m.conormal_bound <= 0.0 {
                    pass = false;
                }
                detail.push_str(&format!("[{lo},{hi}] bound {:.2e}; ", m.conormal_bound));
            }
            Err(e) => {
                pass = false;
                detail.push_str(&format!("[{lo},{hi}] failed: {e}; "));
            }
        }
    }
    check(pass, detail.trim_end_matches("; ").to_string())
}

// 14. Nonlinear pipeline: exact reduction to the linear solvers and the
// penalized bound under a bounded nonlinearity.
fn c14_semilinear() -> Outcome {
    // (a) zero nonlinearity reduces to the linear equilibrium and synthesis.
    let mut lin = desk(32, 64);
    lin.targets = tracking_targets(&lin);
    let f = lin.zero_control();
    let lin_sol = nash_solve(&lin, &f).unwrap();
    let lin_hum = hum_cg(&lin, 1e-3, 1e-10, 400).unwrap();

    let heat = {
        let mesh = build_interval_mesh::<f64>(32, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 64, 0.5).unwrap();
        sample_coefficients(&CoefficientSpec::heat(), &mesh, &grid).unwrap()
    };
    let mut base = desk(32, 64);
    base.targets = tracking_targets(&base);
    let sp = SemilinearProblem::new(base, heat.clone(), Nonlinearity::zero()).unwrap();
    let q = quasi_nash_solve(&sp, &f, 1e-10, 10).unwrap();
    let mut zero_gap = 0.0f64;
    for i in 0..2 {
        zero_gap = zero_gap.max(max_st_diff(&sp.base.grid, &q.v[i], &lin_sol.v[i]));
    }
    let snc = semilinear_null_control(&sp, 1e-3, 1e-10, 10).unwrap();
    zero_gap = zero_gap.max(max_st_diff(&sp.base.grid, &snc.hum.f, &lin_hum.f));

    // (b) a linear-in-state nonlinearity reproduces the linear solver with
    // the matching zero-order coefficients.
    let mesh = build_interval_mesh::<f64>(32, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 64, 0.5).unwrap();
    let mut spec = CoefficientSpec::heat();
    spec.pot_a = parse_expr("0.3").unwrap();
    spec.pot_b = parse_expr("0.2").unwrap();
    let pot = sample_coefficients(&spec, &mesh, &grid).unwrap();
    let pot_step = StepMatrices::build(&mesh, &pot, &grid).unwrap();
    let heat_step = StepMatrices::build(&mesh, &heat, &grid).unwrap();
    let bulk: Vec<f64> =
        mesh.coords.iter().map(|p| (std::f64::consts::PI * p.x).sin()).collect();
    let y0 = PairField::from_state(&mesh, &bulk);
    let linear_traj = pot_step.forward(&y0, None).unwrap();
    let (nl_traj, _) =
        semilinear_forward(&heat_step, &y0, None, &Nonlinearity::linear(0.3, 0.2)).unwrap();
    let mut lin_gap = 0.0f64;
    for k in 0..=grid.m {
        let mut d = nl_traj.levels[k].clone();
        d.axpy(-1.0, &linear_traj.levels[k]);
        lin_gap = lin_gap.max(pair_norm(&d, &mesh));
    }

    // (c) bounded nonlinearity: the penalized terminal bound survives.
    let base = desk(32, 64);
    let sp = SemilinearProblem::new(base, heat, Nonlinearity::scaled_tanh(0.05)).unwrap();
    let eps = 1e-3;
    let r = semilinear_null_control(&sp, eps, 1e-8, 40).unwrap();
    check(
        zero_gap <= 1e-10 && lin_gap <= 1e-10 && r.terminal_norm <= 5.0 * eps,
        format!(
            "zero-reduction gap {zero_gap:.3e} (tol 1e-10), linear-reduction gap {lin_gap:.3e} \
             (tol 1e-10), nonlinear terminal {:.3e} (cap {:.3e})",
            r.terminal_norm,
            5.0 * eps
        ),
    )
}

// 15. Command-line determinism: identical artifacts for identical seeds, and
// a configuration error for an inadmissible interior region.
fn c15_cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        r#"
[geometry]
kind = "interval"
n = 32

[time]
t_final = 1.0
steps = 64

[regions]
omega = [0.2, 0.9]
omega1 = [0.1, 0.4]
omega2 = [0.6, 0.9]
omega_d = [0.4, 0.7]
omega_prime = [0.45, 0.65]

[followers]
alpha1 = 1.0
alpha2 = 1.0
mu1 = 100.0
mu2 = 100.0

[leader]
y0 = "sin(pi*x)"

[carleman]
samples = 50
seed = 11
"#,
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_dynheat");
    let run = |out: &std::path::Path| {
        std::process::Command::new(bin)
            .args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .arg("observability")
            .output()
            .unwrap()
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let ra = run(&out_a);
    let rb = run(&out_b);
    let ok_runs = ra.status.success() && rb.status.success();
    let mut identical = true;
    for name in ["quotients.csv", "histogram.csv"] {
        let a = std::fs::read(out_a.join(name)).unwrap_or_default();
        let b = std::fs::read(out_b.join(name)).unwrap_or_default();
        identical &= !a.is_empty() && a == b;
    }
    // Run reports may differ in timings only; their manifests must agree.
    let manifest = |p: &std::path::Path| -> serde_json::Value {
        serde_json::from_slice::<serde_json::Value>(&std::fs::read(p).unwrap_or_default())
            .map(|v| v["manifest"].clone())
            .unwrap_or_default()
    };
    identical &= manifest(&out_a.join("run_report.json")) == manifest(&out_b.join("run_report.json"));

    let bad_config = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(&config).unwrap();
    std::fs::write(&bad_config, text.replace("omega = [0.2, 0.9]", "omega = [0.2, 0.5]")).unwrap();
    let bad = std::process::Command::new(bin)
        .args(["--config", bad_config.to_str().unwrap(), "--out", out_a.to_str().unwrap()])
        .arg("hum")
        .output()
        .unwrap();
    let bad_code = bad.status.code();
    check(
        ok_runs && identical && bad_code == Some(2),
        format!(
            "runs ok {ok_runs}, artifacts identical {identical}, inadmissible region exit code \
             {bad_code:?} (expected Some(2))"
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("duality identity", c01_duality),
        ("forward oracle", c02_forward_oracle),
        ("mass conservation", c03_mass_conservation),
        ("equilibrium stationarity", c04_nash_stationarity),
        ("dense equilibrium operator", c05_dense_equilibrium),
        ("control characterization", c06_characterization),
        ("terminal operator structure", c07_gramian),
        ("penalty scaling", c08_penalty_scaling),
        ("norm-penalty synthesis", c09_prox),
        ("synthesis linearity", c10_linearity),
        ("observability sampling", c11_observability),
        ("weight bounds", c12_weight_bounds),
        ("landscape construction", c13_landscape),
        ("nonlinear pipeline", c14_semilinear),
        ("cli determinism", c15_cli_determinism),
    ];
    let mut failures = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = run();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {:02} {name}: {verdict} - {}", i + 1, outcome.detail);
        if !outcome.pass {
            failures.push(format!("{:02} {name}: {}", i + 1, outcome.detail));
        }
    }
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
