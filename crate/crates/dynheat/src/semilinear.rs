//! Lipschitz-perturbed dynamics: nonlinear forward solves, quasi-equilibria
//! by frozen-coefficient linearization, and an outer fixed-point loop that
//! reduces null control to repeated linear synthesis.
//!
//! The nonlinear bulk term F(y, grad y) and boundary term G(y_G, grad_G y_G)
//! are user expressions with declared global Lipschitz constants and analytic
//! partial derivatives. Freezing those derivatives along a reference
//! trajectory turns the dynamics into the linear problem the rest of the
//! crate handles, plus an affine background source chosen so the frozen
//! problem agrees with the nonlinear one exactly on the reference trajectory.
//! The outer loops iterate on that trajectory and report their residual
//! history instead of silently accepting a non-convergent run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coeffexpr::{eval_expr, CoefficientTables, Env, Expr, Var};
use crate::error::{Error, Result};
use crate::geometry::{inner_product, pair_norm, Mesh, MeshKind, PairField};
use crate::hum::{hum_cg, HumResult};
use crate::nash::{nash_solve, ControlField, GameProblem, NashSolution};
use crate::pdecore::{
    bulk_gradient, tangential_gradient, zero_space_time, SpaceTime, StepMatrices, Trajectory,
};
use crate::scalar::Scalar;

/// Relative tolerance of the per-step fixed-point iteration.
const STEP_TOL: f64 = 1e-12;
const STEP_MAX_ITER: usize = 50;

/// Bulk and boundary nonlinear terms with their declared Lipschitz constants
/// and analytic partial derivatives. The bulk term is an expression in
/// `s, gx, gy` (state value and gradient components), the boundary term in
/// `s, gt` (trace value and tangential derivative).
#[derive(Debug, Clone)]
pub struct Nonlinearity {
    pub f: Expr,
    pub g: Expr,
    pub l_f: f64,
    pub l_g: f64,
    /// d f / d s.
    pub df_ds: Expr,
    /// d f / d (grad components).
    pub df_dgx: Expr,
    pub df_dgy: Expr,
    /// d g / d s.
    pub dg_ds: Expr,
    /// d g / d (tangential derivative).
    pub dg_dgt: Expr,
}

fn env_f<T: Scalar>(s: T, gx: T, gy: T) -> Env<T> {
    Env::new().bind(Var::S, s).bind(Var::Gx, gx).bind(Var::Gy, gy)
}

fn env_g<T: Scalar>(s: T, gt: T) -> Env<T> {
    Env::new().bind(Var::S, s).bind(Var::Gt, gt)
}

impl Nonlinearity {
    pub fn zero() -> Self {
        Self {
            f: Expr::Num(0.0),
            g: Expr::Num(0.0),
            l_f: 0.0,
            l_g: 0.0,
            df_ds: Expr::Num(0.0),
            df_dgx: Expr::Num(0.0),
            df_dgy: Expr::Num(0.0),
            dg_ds: Expr::Num(0.0),
            dg_dgt: Expr::Num(0.0),
        }
    }

    /// f = a0 s, g = b0 s; reproduces the linear solver with potentials
    /// a = a0, b = b0.
    pub fn linear(a0: f64, b0: f64) -> Self {
        let p = |text: &str| crate::coeffexpr::parse_expr(text).unwrap();
        Self {
            f: p(&format!("{a0} * s")),
            g: p(&format!("{b0} * s")),
            l_f: a0.abs(),
            l_g: b0.abs(),
            df_ds: Expr::Num(a0),
            df_dgx: Expr::Num(0.0),
            df_dgy: Expr::Num(0.0),
            dg_ds: Expr::Num(b0),
            dg_dgt: Expr::Num(0.0),
        }
    }

    /// f = c tanh(s), g = 0.
    pub fn scaled_tanh(c: f64) -> Self {
        let p = |text: &str| crate::coeffexpr::parse_expr(text).unwrap();
        Self {
            f: p(&format!("{c} * tanh(s)")),
            g: Expr::Num(0.0),
            l_f: c.abs(),
            l_g: 0.0,
            df_ds: p(&format!("{c} * (1 - tanh(s)^2)")),
            df_dgx: Expr::Num(0.0),
            df_dgy: Expr::Num(0.0),
            dg_ds: Expr::Num(0.0),
            dg_dgt: Expr::Num(0.0),
        }
    }

    /// f = c sin(s), g = 0.
    pub fn scaled_sin(c: f64) -> Self {
        let p = |text: &str| crate::coeffexpr::parse_expr(text).unwrap();
        Self {
            f: p(&format!("{c} * sin(s)")),
            g: Expr::Num(0.0),
            l_f: c.abs(),
            l_g: 0.0,
            df_ds: p(&format!("{c} * cos(s)")),
            df_dgx: Expr::Num(0.0),
            df_dgy: Expr::Num(0.0),
            dg_ds: Expr::Num(0.0),
            dg_dgt: Expr::Num(0.0),
        }
    }

    pub fn eval_f<T: Scalar>(&self, s: T, gx: T, gy: T) -> Result<T> {
        eval_expr(&self.f, &env_f(s, gx, gy))
    }

    pub fn eval_g<T: Scalar>(&self, s: T, gt: T) -> Result<T> {
        eval_expr(&self.g, &env_g(s, gt))
    }

    /// Checks the vanishing-at-zero normalization and the sign of the
    /// declared constants.
    pub fn validate(&self) -> Result<()> {
        if self.l_f < 0.0 || self.l_g < 0.0 {
            return Err(Error::Config("Lipschitz constants must be nonnegative".into()));
        }
        let f0: f64 = self.eval_f(0.0, 0.0, 0.0)?;
        if f0.abs() > 1e-14 {
            return Err(Error::Config(format!(
                "bulk nonlinear term must vanish at zero, got {f0:e}"
            )));
        }
        let g0: f64 = self.eval_g(0.0, 0.0)?;
        if g0.abs() > 1e-14 {
            return Err(Error::Config(format!(
                "boundary nonlinear term must vanish at zero, got {g0:e}"
            )));
        }
        Ok(())
    }
}

/// Range box used by the Lipschitz probe: bounds of the state values and
/// gradient components encountered along a trajectory, padded by ten percent.
#[derive(Debug, Clone, Copy)]
pub struct StateRange {
    pub s: [f64; 2],
    pub gx: [f64; 2],
    pub gy: [f64; 2],
    pub gt: [f64; 2],
}

impl StateRange {
    pub fn of_trajectory<T: Scalar>(mesh: &Mesh<T>, traj: &Trajectory<T>) -> Self {
        let mut s = [f64::INFINITY, f64::NEG_INFINITY];
        let mut gx = [f64::INFINITY, f64::NEG_INFINITY];
        let mut gy = [f64::INFINITY, f64::NEG_INFINITY];
        let mut gt = [f64::INFINITY, f64::NEG_INFINITY];
        let take = |box_: &mut [f64; 2], v: T| {
            let v = v.to_f64().unwrap_or(0.0);
            box_[0] = box_[0].min(v);
            box_[1] = box_[1].max(v);
        };
        for level in &traj.levels {
            let grad = bulk_gradient(mesh, &level.bulk);
            for i in 0..mesh.n_bulk() {
                take(&mut s, level.bulk[i]);
                take(&mut gx, grad[i][0]);
                take(&mut gy, grad[i][1]);
            }
            let tg = tangential_gradient(mesh, &level.boundary);
            for (j, &v) in level.boundary.iter().enumerate() {
                take(&mut s, v);
                take(&mut gt, tg[j]);
            }
        }
        let pad = |b: [f64; 2]| {
            let (lo, hi) = (b[0].min(b[1]), b[1].max(b[0]));
            let w = (hi - lo).max(1e-6);
            [lo - 0.1 * w, hi + 0.1 * w]
        };
        Self { s: pad(s), gx: pad(gx), gy: pad(gy), gt: pad(gt) }
    }
}

/// Samples random pairs inside the range box and checks that the difference
/// quotients of both nonlinear terms respect the declared Lipschitz bounds
/// with one percent slack.
pub fn probe_lipschitz(nl: &Nonlinearity, range: &StateRange, n_pairs: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |b: [f64; 2]| rng.gen_range(b[0]..=b[1]);
    for pair in 0..n_pairs {
        let (s1, gx1, gy1) = (draw(range.s), draw(range.gx), draw(range.gy));
        let (s2, gx2, gy2) = (draw(range.s), draw(range.gx), draw(range.gy));
        let df: f64 = nl.eval_f(s1, gx1, gy1)? - nl.eval_f(s2, gx2, gy2)?;
        let zeta = ((gx1 - gx2).powi(2) + (gy1 - gy2).powi(2)).sqrt();
        let bound = 1.01 * nl.l_f * ((s1 - s2).abs() + zeta) + 1e-14;
        if df.abs() > bound {
            return Err(Error::Contract(format!(
                "bulk difference quotient exceeds the declared Lipschitz bound at probe {pair}: |dF| = {:e} > {:e}",
                df.abs(),
                bound
            )));
        }
        let (t1, gt1) = (draw(range.s), draw(range.gt));
        let (t2, gt2) = (draw(range.s), draw(range.gt));
        let dg: f64 = nl.eval_g(t1, gt1)? - nl.eval_g(t2, gt2)?;
        let bound = 1.01 * nl.l_g * ((t1 - t2).abs() + (gt1 - gt2).abs()) + 1e-14;
        if dg.abs() > bound {
            return Err(Error::Contract(format!(
                "boundary difference quotient exceeds the declared Lipschitz bound at probe {pair}: |dG| = {:e} > {:e}",
                dg.abs(),
                bound
            )));
        }
    }
    Ok(())
}

/// Stacked source carrying the nonlinear terms of a state: minus the bulk
/// term at interior nodes; at boundary-coincident nodes the bulk and
/// boundary contributions combine against their own measures, divided by the
/// stacked mass the source is later multiplied with.
fn nonlinear_source<T: Scalar>(
    mesh: &Mesh<T>,
    mass: &[T],
    nl: &Nonlinearity,
    u: &PairField<T>,
) -> Result<Vec<T>> {
    let n = mesh.n_bulk();
    let grad = bulk_gradient(mesh, &u.bulk);
    let tg = tangential_gradient(mesh, &u.boundary);
    let mut s = vec![T::zero(); n];
    for i in 0..n {
        let fb = -nl.eval_f(u.bulk[i], grad[i][0], grad[i][1])?;
        s[i] = match mesh.boundary_of_bulk[i] {
            None => fb,
            Some(j) => {
                let gb = -nl.eval_g(u.boundary[j], tg[j])?;
                (mesh.bulk_weights[i] * fb + mesh.boundary[j].weight * gb) / mass[i]
            }
        };
    }
    Ok(s)
}

/// Per-step iteration counts of a nonlinear forward solve.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardStats {
    pub max_step_iters: usize,
    pub total_iters: usize,
}

/// Theta-scheme forward solve with the nonlinear terms handled by a lagged
/// fixed-point iteration inside every step: the linear part stays implicit
/// through the factored step matrices, the nonlinear source is re-evaluated
/// at the current iterate until the step is self-consistent.
pub fn semilinear_forward<T: Scalar>(
    step: &StepMatrices<T>,
    y0: &PairField<T>,
    sources: Option<&SpaceTime<T>>,
    nl: &Nonlinearity,
) -> Result<(Trajectory<T>, ForwardStats)> {
    let mesh = &step.mesh;
    let n = mesh.n_bulk();
    let m = step.grid.m;
    if let Some(s) = sources {
        if s.len() != m + 1 || s.iter().any(|v| v.len() != n) {
            return Err(Error::Contract("source array does not match grid".into()));
        }
    }
    let zeros = vec![T::zero(); n];
    let ctrl = |k: usize| -> &[T] {
        match sources {
            Some(s) => &s[k],
            None => &zeros,
        }
    };
    let mut stats = ForwardStats::default();
    let mut levels = Vec::with_capacity(m + 1);
    let mut u = y0.clone();
    levels.push(u.clone());
    for k in 0..m {
        let mut s_prev = nonlinear_source(mesh, &step.mass, nl, &u)?;
        for (sv, cv) in s_prev.iter_mut().zip(ctrl(k)) {
            *sv = *sv + *cv;
        }
        let u_state = u.to_state(mesh);
        let mut guess = u.clone();
        let mut converged = false;
        let mut residual = T::infinity();
        for iter in 1..=STEP_MAX_ITER {
            let mut s_next = nonlinear_source(mesh, &step.mass, nl, &guess)?;
            for (sv, cv) in s_next.iter_mut().zip(ctrl(k + 1)) {
                *sv = *sv + *cv;
            }
            let next_state = step.step_once(k, &u_state, &s_prev, &s_next)?;
            let next = PairField::from_state(mesh, &next_state);
            let mut diff = next.clone();
            diff.axpy(-T::one(), &guess);
            let scale = pair_norm(&next, mesh).max(T::of(1e-300));
            residual = pair_norm(&diff, mesh) / scale;
            guess = next;
            stats.total_iters += 1;
            stats.max_step_iters = stats.max_step_iters.max(iter);
            if residual <= T::of(STEP_TOL) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::PerStepNoConvergence {
                step: k + 1,
                residual: residual.to_f64().unwrap_or(f64::NAN),
            });
        }
        u = guess;
        levels.push(u.clone());
    }
    Ok((Trajectory { levels }, stats))
}

/// A follower game whose dynamics carry the nonlinear terms. The embedded
/// linear problem holds the unperturbed coefficients; `lin` keeps their
/// sampled tables so frozen coefficient sets can be built on top of them.
pub struct SemilinearProblem<T> {
    pub base: GameProblem<T>,
    pub lin: CoefficientTables<T>,
    pub nl: Nonlinearity,
}

impl<T: Scalar> SemilinearProblem<T> {
    pub fn new(base: GameProblem<T>, lin: CoefficientTables<T>, nl: Nonlinearity) -> Result<Self> {
        nl.validate()?;
        if base.background.is_some() {
            return Err(Error::Config(
                "the embedded linear problem must not carry a background source".into(),
            ));
        }
        Ok(Self { base, lin, nl })
    }

    /// Nonlinear flow under the three controls, from the stored initial
    /// state.
    pub fn forward(
        &self,
        f: Option<&ControlField<T>>,
        v1: Option<&ControlField<T>>,
        v2: Option<&ControlField<T>>,
    ) -> Result<(Trajectory<T>, ForwardStats)> {
        let sources = self.base.combined_sources(f, v1, v2);
        semilinear_forward(&self.base.step, &self.base.y0, Some(&sources), &self.nl)
    }

    /// Linear problem with coefficients frozen along the reference
    /// trajectory: the analytic partial derivatives of the nonlinear terms
    /// are added to the potential and drift tables, and an affine background
    /// source absorbs the remainder, so the frozen dynamics agree with the
    /// nonlinear dynamics exactly on the reference trajectory.
    pub fn freeze(&self, reference: &Trajectory<T>) -> Result<GameProblem<T>> {
        let mesh = &self.base.mesh;
        let grid = &self.base.grid;
        let n = mesh.n_bulk();
        let mut tables = self.lin.clone();
        tables.time_invariant = false;
        let mut background = zero_space_time(n, grid);
        for k in 0..=grid.m {
            let level = &reference.levels[k];
            let grad = bulk_gradient(mesh, &level.bulk);
            let tg = tangential_gradient(mesh, &level.boundary);
            let mut r_bulk = vec![T::zero(); n];
            for i in 0..n {
                let (s, gx, gy) = (level.bulk[i], grad[i][0], grad[i][1]);
                let env = env_f(s, gx, gy);
                let d_s = eval_expr(&self.nl.df_ds, &env)?;
                let d_gx = eval_expr(&self.nl.df_dgx, &env)?;
                let d_gy = eval_expr(&self.nl.df_dgy, &env)?;
                tables.pot_a[k][i] = tables.pot_a[k][i] + d_s;
                tables.drift[k][i][0] = tables.drift[k][i][0] + d_gx;
                tables.drift[k][i][1] = tables.drift[k][i][1] + d_gy;
                r_bulk[i] = d_s * s + d_gx * gx + d_gy * gy - self.nl.eval_f(s, gx, gy)?;
            }
            for (j, b) in mesh.boundary.iter().enumerate() {
                let (s, gt) = (level.boundary[j], tg[j]);
                let env = env_g(s, gt);
                let d_s = eval_expr(&self.nl.dg_ds, &env)?;
                let d_gt = eval_expr(&self.nl.dg_dgt, &env)?;
                tables.pot_b[k][j] = tables.pot_b[k][j] + d_s;
                if mesh.kind == MeshKind::Disk {
                    tables.drift_gamma[k][j] = tables.drift_gamma[k][j] + d_gt;
                }
                let r_gamma = d_s * s + d_gt * gt - self.nl.eval_g(s, gt)?;
                let i = b.bulk_index;
                // Bulk and boundary remainders combine against their own
                // measures at coincident nodes, like any stacked source.
                r_bulk[i] = (mesh.bulk_weights[i] * r_bulk[i] + b.weight * r_gamma)
                    / self.base.step.mass[i];
            }
            background[k] = r_bulk;
        }
        let step = StepMatrices::build(mesh, &tables, grid)?;
        Ok(GameProblem {
            mesh: mesh.clone(),
            grid: *grid,
            regions: self.base.regions.clone(),
            step,
            alpha: self.base.alpha,
            mu: self.base.mu,
            y0: self.base.y0.clone(),
            targets: self.base.targets.clone(),
            background: Some(background),
        })
    }
}

/// Follower cost J_i evaluated along the nonlinear flow.
pub fn eval_ji_semilinear<T: Scalar>(
    problem: &SemilinearProblem<T>,
    i: usize,
    f: &ControlField<T>,
    v1: &ControlField<T>,
    v2: &ControlField<T>,
) -> Result<T> {
    let base = &problem.base;
    let (y, _) = problem.forward(Some(f), Some(v1), Some(v2))?;
    let half = T::of(0.5);
    let mut track = T::zero();
    for k in 0..=base.grid.m {
        let diff: Vec<T> = y.levels[k]
            .bulk
            .iter()
            .zip(base.targets[i][k].iter())
            .map(|(a, b)| *a - *b)
            .collect();
        track = track + base.grid.weight(k) * base.regions.omega_d.weighted_dot(&diff, &diff);
    }
    let vi = if i == 0 { v1 } else { v2 };
    let penalty =
        crate::pdecore::st_region_dot(&base.grid, base.follower_region(i), vi, vi);
    Ok(half * base.alpha[i] * track + half * base.mu[i] * penalty)
}

fn rel_trajectory_change<T: Scalar>(
    problem: &GameProblem<T>,
    new: &Trajectory<T>,
    old: &Trajectory<T>,
) -> T {
    let mut num = T::zero();
    let mut den = T::zero();
    for k in 0..=problem.grid.m {
        let mut d = new.levels[k].clone();
        d.axpy(-T::one(), &old.levels[k]);
        let w = problem.grid.weight(k);
        num = num + w * inner_product(&d, &d, &problem.mesh).unwrap_or(T::zero());
        den = den
            + w * inner_product(&new.levels[k], &new.levels[k], &problem.mesh)
                .unwrap_or(T::zero());
    }
    num.sqrt() / den.sqrt().max(T::of(1e-300))
}

/// Stationary point of both follower functionals along the nonlinear flow,
/// found by iterating linear equilibrium solves on frozen coefficients.
pub struct QuasiNashSolution<T> {
    pub v: [ControlField<T>; 2],
    pub y: Trajectory<T>,
    /// Linear solution on the final frozen problem.
    pub inner: NashSolution<T>,
    pub outer_iters: usize,
    /// Relative state-trajectory change per outer sweep.
    pub residuals: Vec<T>,
    /// Whether the residual history is non-increasing.
    pub monotone: bool,
}

pub fn quasi_nash_solve<T: Scalar>(
    problem: &SemilinearProblem<T>,
    f: &ControlField<T>,
    tol: T,
    max_outer: usize,
) -> Result<QuasiNashSolution<T>> {
    let (mut y, _) = problem.forward(Some(f), None, None)?;
    let range = StateRange::of_trajectory(&problem.base.mesh, &y);
    probe_lipschitz(&problem.nl, &range, 10_000, 0x6c6970)?;
    let mut residuals: Vec<T> = Vec::new();
    for sweep in 1..=max_outer {
        let frozen = problem.freeze(&y)?;
        let inner = nash_solve(&frozen, f)?;
        let (y_new, _) = problem.forward(Some(f), Some(&inner.v[0]), Some(&inner.v[1]))?;
        let change = rel_trajectory_change(&problem.base, &y_new, &y);
        residuals.push(change);
        y = y_new;
        if change <= tol {
            let monotone = residuals.windows(2).all(|w| w[1] <= w[0]);
            return Ok(QuasiNashSolution {
                v: inner.v.clone(),
                y,
                inner,
                outer_iters: sweep,
                residuals,
                monotone,
            });
        }
    }
    Err(Error::OuterNoConvergence {
        iterations: max_outer,
        last_change: residuals.last().map(|r| r.to_f64().unwrap_or(f64::NAN)).unwrap_or(f64::NAN),
    })
}

/// Approximate null control of the nonlinear game, by iterating the linear
/// penalized synthesis on frozen coefficients.
pub struct SemilinearHum<T> {
    /// Linear synthesis on the final frozen problem.
    pub hum: HumResult<T>,
    /// Nonlinear trajectory under the produced controls.
    pub y: Trajectory<T>,
    /// Terminal norm of the nonlinear trajectory.
    pub terminal_norm: T,
    pub outer_iters: usize,
    pub residuals: Vec<T>,
    pub monotone: bool,
}

pub fn semilinear_null_control<T: Scalar>(
    problem: &SemilinearProblem<T>,
    epsilon: T,
    tol: T,
    max_outer: usize,
) -> Result<SemilinearHum<T>> {
    if epsilon <= T::zero() {
        return Err(Error::Config("penalty parameter must be positive".into()));
    }
    let (mut y, _) = problem.forward(None, None, None)?;
    let range = StateRange::of_trajectory(&problem.base.mesh, &y);
    probe_lipschitz(&problem.nl, &range, 10_000, 0x6c6970)?;
    let inner_tol = T::of(1e-9).min(tol);
    let mut residuals: Vec<T> = Vec::new();
    for sweep in 1..=max_outer {
        let frozen = problem.freeze(&y)?;
        let hum = hum_cg(&frozen, epsilon, inner_tol, 400)?;
        let (y_new, _) =
            problem.forward(Some(&hum.f), Some(&hum.system.v[0]), Some(&hum.system.v[1]))?;
        let change = rel_trajectory_change(&problem.base, &y_new, &y);
        residuals.push(change);
        y = y_new;
        if change <= tol {
            let terminal_norm = pair_norm(y.terminal(), &problem.base.mesh);
            let monotone = residuals.windows(2).all(|w| w[1] <= w[0]);
            return Ok(SemilinearHum {
                hum,
                y,
                terminal_norm,
                outer_iters: sweep,
                residuals,
                monotone,
            });
        }
    }
    Err(Error::OuterNoConvergence {
        iterations: max_outer,
        last_change: residuals.last().map(|r| r.to_f64().unwrap_or(f64::NAN)).unwrap_or(f64::NAN),
    })
}

/// Central-difference stationarity of the nonlinear follower functionals at
/// the given controls, maximized over random directions.
pub fn verify_quasi_nash<T: Scalar>(
    problem: &SemilinearProblem<T>,
    f: &ControlField<T>,
    v1: &ControlField<T>,
    v2: &ControlField<T>,
    n_dirs: usize,
    seed: u64,
) -> Result<[T; 2]> {
    let base = &problem.base;
    let h = T::of(1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = [T::zero(); 2];
    for i in 0..2 {
        let region = base.follower_region(i);
        let held = if i == 0 { v1 } else { v2 };
        let j_scale = eval_ji_semilinear(problem, i, f, v1, v2)?.abs().max(T::one());
        for _ in 0..n_dirs {
            let mut delta = base.zero_control();
            for k in 0..=base.grid.m {
                for &idx in &region.indices {
                    delta[k][idx] = T::of(rng.gen_range(-1.0..1.0));
                }
            }
            let norm =
                crate::pdecore::st_region_dot(&base.grid, region, &delta, &delta).sqrt();
            if norm == T::zero() {
                continue;
            }
            let mut plus = held.clone();
            let mut minus = held.clone();
            for k in 0..=base.grid.m {
                for &idx in &region.indices {
                    let d = delta[k][idx] / norm;
                    plus[k][idx] = plus[k][idx] + h * d;
                    minus[k][idx] = minus[k][idx] - h * d;
                }
            }
            let (jp, jm) = if i == 0 {
                (
                    eval_ji_semilinear(problem, i, f, &plus, v2)?,
                    eval_ji_semilinear(problem, i, f, &minus, v2)?,
                )
            } else {
                (
                    eval_ji_semilinear(problem, i, f, v1, &plus)?,
                    eval_ji_semilinear(problem, i, f, v1, &minus)?,
                )
            };
            let deriv = ((jp - jm) / (T::of(2.0) * h)).abs() / j_scale;
            out[i] = out[i].max(deriv);
        }
    }
    Ok(out)
}
