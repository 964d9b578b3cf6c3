//! Leader synthesis: adjoint cascade, control Gramian, penalized duality
//! minimization (quadratic penalty by conjugate gradient, exact norm penalty
//! by accelerated proximal gradient), control extraction and verification.
//!
//! The Gramian maps a terminal adjoint datum to the terminal state reached
//! when the extracted control drives the follower-equilibrium system from
//! zero data. Because every solve below is the exact discrete adjoint of its
//! counterpart, the Gramian is symmetric positive semidefinite in the mass
//! inner product to solver tolerance, and the minimization is well posed.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::carleman::{overflow_guard, CarlemanWeights};
use crate::error::{Error, Result};
use crate::geometry::{inner_product, pair_norm, PairField};
use crate::linalg::{conjugate_gradient, IterativeTrace};
use crate::nash::{ControlField, GameProblem};
use crate::pdecore::{st_region_dot, zero_space_time, BackwardSolution, SpaceTime, Trajectory};
use crate::scalar::Scalar;

/// Default tolerance of the inner fixed-point loops; kept two orders below
/// the outer solver tolerance so inexact operator applications do not stall
/// the Krylov iteration.
pub const INNER_TOL: f64 = 1e-11;
const MAX_PICARD: usize = 400;

/// Adjoint cascade for a terminal datum: backward field driven by the
/// tracking combination of two forward companions, which are themselves
/// driven by the observed backward field on the follower regions.
pub struct CascadeSolution<T> {
    pub z: BackwardSolution<T>,
    pub psi: [Trajectory<T>; 2],
    pub picard_iters: usize,
    pub picard_residual: T,
}

fn st_norm<T: Scalar>(problem: &GameProblem<T>, fields: &[PairField<T>]) -> T {
    let mut acc = T::zero();
    for (k, f) in fields.iter().enumerate() {
        acc = acc + problem.grid.weight(k) * inner_product(f, f, &problem.mesh).unwrap_or(T::zero());
    }
    acc.sqrt()
}

/// Solves the cascade by fixed-point sweeps; the contraction constant scales
/// like 1/mu, so the penalties must dominate the coupling.
pub fn cascade_solve<T: Scalar>(
    problem: &GameProblem<T>,
    z_t: &PairField<T>,
    tol: T,
    max_iter: usize,
) -> Result<CascadeSolution<T>> {
    let n = problem.n();
    let grid = &problem.grid;
    let mut psi = [Trajectory::zeros(&problem.mesh, grid), Trajectory::zeros(&problem.mesh, grid)];
    let mut z: Option<BackwardSolution<T>> = None;
    let mut residual = T::infinity();
    let mut rate = f64::NAN;
    for sweep in 1..=max_iter {
        let mut source = zero_space_time(n, grid);
        for k in 0..=grid.m {
            for (&idx, _) in problem.regions.omega_d.indices.iter().zip(problem.regions.omega_d.weights.iter()) {
                source[k][idx] = problem.alpha[0] * psi[0].levels[k].bulk[idx]
                    + problem.alpha[1] * psi[1].levels[k].bulk[idx];
            }
        }
        let z_new = problem.step.backward(z_t, Some(&source))?;
        let change = match &z {
            // First sweep: measure against the zero field, so zero data
            // converges immediately.
            None => {
                if st_norm(problem, &z_new.states.levels) == T::zero() {
                    T::zero()
                } else {
                    T::one()
                }
            }
            Some(prev) => {
                let diffs: Vec<PairField<T>> = (0..=grid.m)
                    .map(|k| {
                        let mut d = z_new.states.levels[k].clone();
                        d.axpy(-T::one(), &prev.states.levels[k]);
                        d
                    })
                    .collect();
                let scale = st_norm(problem, &z_new.states.levels).max(T::of(1e-300));
                st_norm(problem, &diffs) / scale
            }
        };
        if change.is_finite() && residual.is_finite() && residual > T::zero() {
            rate = (change / residual).to_f64().unwrap_or(f64::NAN);
        }
        residual = change;
        for i in 0..2 {
            let mut source = zero_space_time(n, grid);
            for k in 0..=grid.m {
                for &idx in &problem.follower_region(i).indices {
                    source[k][idx] = -z_new.observed[k].bulk[idx] / problem.mu[i];
                }
            }
            psi[i] = problem.step.forward(&PairField::zeros(&problem.mesh), Some(&source))?;
        }
        z = Some(z_new);
        if residual <= tol {
            return Ok(CascadeSolution {
                z: z.unwrap(),
                psi,
                picard_iters: sweep,
                picard_residual: residual,
            });
        }
    }
    let _ = rate;
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: residual.to_f64().unwrap_or(f64::NAN),
    })
}

/// Forward system coupled to the follower best responses under a fixed
/// leader control.
pub struct OptimalitySolution<T> {
    pub y: Trajectory<T>,
    pub phi: [BackwardSolution<T>; 2],
    pub v: [ControlField<T>; 2],
    pub picard_iters: usize,
    pub picard_residual: T,
}

fn opt_solve<T: Scalar>(
    problem: &GameProblem<T>,
    f: Option<&ControlField<T>>,
    y0: Option<&PairField<T>>,
    targets: Option<&[SpaceTime<T>; 2]>,
    tol: T,
    max_iter: usize,
) -> Result<OptimalitySolution<T>> {
    let n = problem.n();
    let grid = &problem.grid;
    let zero_pair = PairField::zeros(&problem.mesh);
    // The zero-data path (Gramian applications) must stay linear in the
    // controls, so the background source rides along only with real data.
    let with_background = y0.is_some();
    let y0 = y0.unwrap_or(&zero_pair);
    let mut v = [problem.zero_control(), problem.zero_control()];
    let mut y_prev: Option<Trajectory<T>> = None;
    let mut residual = T::infinity();
    for sweep in 1..=max_iter {
        let mut sources = problem.combined_sources(f, Some(&v[0]), Some(&v[1]));
        if with_background {
            problem.add_background(&mut sources);
        }
        let y = problem.step.forward(y0, Some(&sources))?;
        let change = match &y_prev {
            None => {
                if st_norm(problem, &y.levels) == T::zero() {
                    T::zero()
                } else {
                    T::one()
                }
            }
            Some(prev) => {
                let diffs: Vec<PairField<T>> = (0..=grid.m)
                    .map(|k| {
                        let mut d = y.levels[k].clone();
                        d.axpy(-T::one(), &prev.levels[k]);
                        d
                    })
                    .collect();
                let scale = st_norm(problem, &y.levels).max(T::of(1e-300));
                st_norm(problem, &diffs) / scale
            }
        };
        residual = change;
        let mut phi: Vec<BackwardSolution<T>> = Vec::with_capacity(2);
        for i in 0..2 {
            let mut source = zero_space_time(n, grid);
            for k in 0..=grid.m {
                for &idx in &problem.regions.omega_d.indices {
                    let target = match targets {
                        Some(tg) => tg[i][k][idx],
                        None => problem.targets[i][k][idx],
                    };
                    source[k][idx] = problem.alpha[i] * (y.levels[k].bulk[idx] - target);
                }
            }
            phi.push(problem.step.backward(&zero_pair, Some(&source))?);
        }
        for i in 0..2 {
            let mut vi = problem.zero_control();
            for k in 0..=grid.m {
                for &idx in &problem.follower_region(i).indices {
                    vi[k][idx] = -phi[i].observed[k].bulk[idx] / problem.mu[i];
                }
            }
            v[i] = vi;
        }
        y_prev = Some(y);
        if residual <= tol {
            let mut it = phi.into_iter();
            return Ok(OptimalitySolution {
                y: y_prev.unwrap(),
                phi: [it.next().unwrap(), it.next().unwrap()],
                v,
                picard_iters: sweep,
                picard_residual: residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: residual.to_f64().unwrap_or(f64::NAN),
    })
}

/// Solves the forward-backward equilibrium system under a fixed leader
/// control with the problem's own initial data and targets.
pub fn optimality_solve<T: Scalar>(
    problem: &GameProblem<T>,
    f: &ControlField<T>,
    tol: T,
) -> Result<OptimalitySolution<T>> {
    opt_solve(problem, Some(f), Some(&problem.y0), None, tol, MAX_PICARD)
}

/// Extracts the leader control from a cascade: the observed backward field
/// restricted to the leader region.
pub fn extract_control<T: Scalar>(problem: &GameProblem<T>, cascade: &CascadeSolution<T>) -> ControlField<T> {
    let mut f = problem.zero_control();
    for k in 0..=problem.grid.m {
        for &idx in &problem.regions.omega.indices {
            f[k][idx] = cascade.z.observed[k].bulk[idx];
        }
    }
    f
}

/// One Gramian application: cascade at the datum, control extraction, then
/// the equilibrium system from zero data; returns the terminal state.
pub fn apply_gramian<T: Scalar>(problem: &GameProblem<T>, z_t: &PairField<T>, tol: T) -> Result<PairField<T>> {
    let cascade = cascade_solve(problem, z_t, tol, MAX_PICARD)?;
    let f = extract_control(problem, &cascade);
    let zeros = [
        zero_space_time(problem.n(), &problem.grid),
        zero_space_time(problem.n(), &problem.grid),
    ];
    let sys = opt_solve(problem, Some(&f), None, Some(&zeros), tol, MAX_PICARD)?;
    Ok(sys.y.terminal().clone())
}

/// Terminal state of the uncontrolled equilibrium system; the smooth part of
/// the penalized functional is minimized by solving Gramian * Z_T = -c.
pub fn linear_term<T: Scalar>(problem: &GameProblem<T>, tol: T) -> Result<PairField<T>> {
    let sys = opt_solve(problem, None, Some(&problem.y0), None, tol, MAX_PICARD)?;
    Ok(sys.y.terminal().clone())
}

/// Output of either penalized minimization.
pub struct HumResult<T> {
    pub z_t: PairField<T>,
    pub f: ControlField<T>,
    pub cascade: CascadeSolution<T>,
    pub system: OptimalitySolution<T>,
    pub terminal_norm: T,
    pub control_norm: T,
    /// Value of the norm-penalized functional at the output.
    pub j_eps: T,
    pub epsilon: T,
    pub trace: IterativeTrace<T>,
    /// Norm of the subgradient optimality residual (proximal solver only).
    pub subgradient_residual: Option<T>,
}

fn finalize<T: Scalar>(
    problem: &GameProblem<T>,
    z_t: PairField<T>,
    c: &PairField<T>,
    epsilon: T,
    inner_tol: T,
    trace: IterativeTrace<T>,
    subgradient_residual: Option<T>,
) -> Result<HumResult<T>> {
    let cascade = cascade_solve(problem, &z_t, inner_tol, MAX_PICARD)?;
    let f = extract_control(problem, &cascade);
    let system = opt_solve(problem, Some(&f), Some(&problem.y0), None, inner_tol, MAX_PICARD)?;
    let terminal_norm = pair_norm(system.y.terminal(), &problem.mesh);
    let control_norm = st_region_dot(&problem.grid, &problem.regions.omega, &f, &f).sqrt();
    let lam = apply_gramian(problem, &z_t, inner_tol)?;
    let j_eps = T::of(0.5) * inner_product(&lam, &z_t, &problem.mesh)?
        + inner_product(c, &z_t, &problem.mesh)?
        + epsilon * pair_norm(&z_t, &problem.mesh);
    Ok(HumResult {
        z_t,
        f,
        cascade,
        system,
        terminal_norm,
        control_norm,
        j_eps,
        epsilon,
        trace,
        subgradient_residual,
    })
}

/// Quadratic-penalty minimization: conjugate gradient on
/// (Gramian + eps I) Z_T = -c in the mass inner product.
pub fn hum_cg<T: Scalar>(
    problem: &GameProblem<T>,
    epsilon: T,
    tol: T,
    max_iter: usize,
) -> Result<HumResult<T>> {
    if epsilon <= T::zero() {
        return Err(Error::Config("penalty parameter must be positive".into()));
    }
    let inner_tol = (tol * T::of(1e-2)).min(T::of(INNER_TOL));
    let c = linear_term(problem, inner_tol)?;
    let mut b = c.clone();
    b.scale(-T::one());
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let apply = |x: &PairField<T>| -> PairField<T> {
        match apply_gramian(problem, x, inner_tol) {
            Ok(mut y) => {
                y.axpy(epsilon, x);
                y
            }
            Err(e) => {
                *failure.borrow_mut() = Some(e);
                PairField::zeros(&problem.mesh)
            }
        }
    };
    let ip = |u: &PairField<T>, v: &PairField<T>| inner_product(u, v, &problem.mesh).unwrap_or(T::zero());
    let combine = |a: T, x: &PairField<T>, bb: T, y: &PairField<T>| {
        let mut out = x.clone();
        out.scale(a);
        out.axpy(bb, y);
        out
    };
    let (z_t, trace) = conjugate_gradient(apply, ip, combine, &b, tol, max_iter);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    if !trace.converged {
        return Err(Error::NoConvergence {
            iterations: trace.iterations,
            residual: trace.relative_residual.to_f64().unwrap_or(f64::NAN),
        });
    }
    finalize(problem, z_t, &c, epsilon, inner_tol, trace, None)
}

/// Power-iteration estimate of the largest Gramian eigenvalue, used as the
/// step-size scale of the proximal solver.
pub fn gramian_norm_estimate<T: Scalar>(problem: &GameProblem<T>, iterations: usize, tol: T) -> Result<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772616d);
    let state: Vec<T> = (0..problem.n()).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
    let mut x = PairField::from_state(&problem.mesh, &state);
    let mut lambda = T::zero();
    for _ in 0..iterations {
        let nrm = pair_norm(&x, &problem.mesh);
        if nrm == T::zero() {
            return Ok(T::zero());
        }
        x.scale(T::one() / nrm);
        let y = apply_gramian(problem, &x, tol)?;
        lambda = inner_product(&y, &x, &problem.mesh)?;
        x = y;
    }
    Ok(lambda)
}

/// Norm-penalty minimization by accelerated proximal gradient with restarts.
///
/// The smooth part has gradient Gramian Z + c; the proximal map of the norm
/// penalty is block soft-thresholding of the whole terminal pair. Stopping
/// uses the subgradient optimality residual, evaluated every few iterations.
pub fn hum_prox<T: Scalar>(
    problem: &GameProblem<T>,
    epsilon: T,
    tol: T,
    max_iter: usize,
) -> Result<HumResult<T>> {
    if epsilon <= T::zero() {
        return Err(Error::Config("penalty parameter must be positive".into()));
    }
    let inner_tol = (tol * T::of(1e-2)).min(T::of(INNER_TOL));
    let c = linear_term(problem, inner_tol)?;
    let c_norm = pair_norm(&c, &problem.mesh);
    let scale = c_norm.max(epsilon).max(T::of(1e-300));
    // Zero is optimal iff the subgradient ball covers the linear term.
    if c_norm <= epsilon {
        let trace = IterativeTrace { iterations: 0, relative_residual: T::zero(), converged: true };
        return finalize(
            problem,
            PairField::zeros(&problem.mesh),
            &c,
            epsilon,
            inner_tol,
            trace,
            Some(T::zero()),
        );
    }
    let lmax = gramian_norm_estimate(problem, 25, inner_tol)?;
    let lip = (lmax * T::of(1.2)).max(epsilon).max(T::of(1e-300));
    let grad = |z: &PairField<T>| -> Result<PairField<T>> {
        let mut g = apply_gramian(problem, z, inner_tol)?;
        g.axpy(T::one(), &c);
        Ok(g)
    };
    let mut z_cur = PairField::zeros(&problem.mesh);
    let mut y = z_cur.clone();
    let mut t_momentum = T::one();
    let mut last_res = T::infinity();
    for iter in 1..=max_iter {
        let g = grad(&y)?;
        let mut w = y.clone();
        w.axpy(-T::one() / lip, &g);
        let wn = pair_norm(&w, &problem.mesh);
        let thresh = epsilon / lip;
        let z_next = if wn <= thresh {
            PairField::zeros(&problem.mesh)
        } else {
            let mut s = w;
            s.scale(T::one() - thresh / wn);
            s
        };
        if !z_next.is_finite() {
            return Err(Error::NonFiniteIterate("proximal gradient".into()));
        }
        let mut step = z_next.clone();
        step.axpy(-T::one(), &z_cur);
        // Restart the momentum when it points against the descent step.
        let mut drift = y.clone();
        drift.axpy(-T::one(), &z_next);
        if inner_product(&drift, &step, &problem.mesh)? > T::zero() {
            t_momentum = T::one();
        }
        let t_next = T::of(0.5) * (T::one() + (T::one() + T::of(4.0) * t_momentum * t_momentum).sqrt());
        y = z_next.clone();
        y.axpy((t_momentum - T::one()) / t_next, &step);
        t_momentum = t_next;
        z_cur = z_next;
        if iter % 5 == 0 || iter == max_iter {
            let zn = pair_norm(&z_cur, &problem.mesh);
            let res = if zn == T::zero() {
                if c_norm <= epsilon * (T::one() + tol) {
                    T::zero()
                } else {
                    T::infinity()
                }
            } else {
                let mut r = grad(&z_cur)?;
                let mut dir = z_cur.clone();
                dir.scale(epsilon / zn);
                r.axpy(T::one(), &dir);
                pair_norm(&r, &problem.mesh) / scale
            };
            last_res = res;
            if res <= tol {
                let trace = IterativeTrace { iterations: iter, relative_residual: res, converged: true };
                return finalize(problem, z_cur, &c, epsilon, inner_tol, trace, Some(res));
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: last_res.to_f64().unwrap_or(f64::NAN),
    })
}

/// Residuals of the coupled six-field optimality system re-derived from the
/// stored terminal datum, all relative to the stored fields.
#[derive(Debug, Clone)]
pub struct SystemReport<T> {
    /// Nodewise mismatch between the stored control and the observed
    /// backward field on the leader region.
    pub f_extraction: T,
    /// Change of the forward state under one more coupled sweep.
    pub y_residual: T,
    /// Change of the backward field when re-solved from the stored
    /// companions.
    pub z_residual: T,
    /// Change of the companions when re-solved from the observed backward
    /// field.
    pub psi_residual: [T; 2],
    /// Gap between the follower controls and the observed multiplier rule.
    pub follower_residual: [T; 2],
}

impl<T: Scalar> SystemReport<T> {
    pub fn max_residual(&self) -> T {
        self.f_extraction
            .max(self.y_residual)
            .max(self.z_residual)
            .max(self.psi_residual[0])
            .max(self.psi_residual[1])
            .max(self.follower_residual[0])
            .max(self.follower_residual[1])
    }
}

pub fn verify_optimality_system<T: Scalar>(
    problem: &GameProblem<T>,
    result: &HumResult<T>,
) -> Result<SystemReport<T>> {
    let grid = &problem.grid;
    let n = problem.n();
    // Control extraction is definitional.
    let mut f_extraction = T::zero();
    for k in 0..=grid.m {
        for &idx in &problem.regions.omega.indices {
            f_extraction = f_extraction.max((result.f[k][idx] - result.cascade.z.observed[k].bulk[idx]).abs());
        }
    }
    // Backward field re-solved from the stored companions.
    let mut source = zero_space_time(n, grid);
    for k in 0..=grid.m {
        for &idx in &problem.regions.omega_d.indices {
            source[k][idx] = problem.alpha[0] * result.cascade.psi[0].levels[k].bulk[idx]
                + problem.alpha[1] * result.cascade.psi[1].levels[k].bulk[idx];
        }
    }
    let z_new = problem.step.backward(&result.z_t, Some(&source))?;
    let z_residual = {
        let diffs: Vec<PairField<T>> = (0..=grid.m)
            .map(|k| {
                let mut d = z_new.states.levels[k].clone();
                d.axpy(-T::one(), &result.cascade.z.states.levels[k]);
                d
            })
            .collect();
        st_norm(problem, &diffs) / st_norm(problem, &result.cascade.z.states.levels).max(T::of(1e-300))
    };
    // Companions re-solved from the observed backward field.
    let mut psi_residual = [T::zero(); 2];
    for i in 0..2 {
        let mut source = zero_space_time(n, grid);
        for k in 0..=grid.m {
            for &idx in &problem.follower_region(i).indices {
                source[k][idx] = -result.cascade.z.observed[k].bulk[idx] / problem.mu[i];
            }
        }
        let psi_new = problem.step.forward(&PairField::zeros(&problem.mesh), Some(&source))?;
        let diffs: Vec<PairField<T>> = (0..=grid.m)
            .map(|k| {
                let mut d = psi_new.levels[k].clone();
                d.axpy(-T::one(), &result.cascade.psi[i].levels[k]);
                d
            })
            .collect();
        let scale = st_norm(problem, &psi_new.levels).max(st_norm(problem, &result.cascade.psi[i].levels));
        psi_residual[i] = st_norm(problem, &diffs) / scale.max(T::of(1e-300));
    }
    // Forward state under one more coupled sweep from the stored controls.
    let mut sources = problem.combined_sources(Some(&result.f), Some(&result.system.v[0]), Some(&result.system.v[1]));
    problem.add_background(&mut sources);
    let y_new = problem.step.forward(&problem.y0, Some(&sources))?;
    let y_residual = {
        let diffs: Vec<PairField<T>> = (0..=grid.m)
            .map(|k| {
                let mut d = y_new.levels[k].clone();
                d.axpy(-T::one(), &result.system.y.levels[k]);
                d
            })
            .collect();
        st_norm(problem, &diffs) / st_norm(problem, &result.system.y.levels).max(T::of(1e-300))
    };
    // Follower controls against the observed multiplier rule from
    // re-derived multipliers.
    let mut follower_residual = [T::zero(); 2];
    for i in 0..2 {
        let mut source = zero_space_time(n, grid);
        for k in 0..=grid.m {
            for &idx in &problem.regions.omega_d.indices {
                source[k][idx] =
                    problem.alpha[i] * (y_new.levels[k].bulk[idx] - problem.targets[i][k][idx]);
            }
        }
        let phi = problem.step.backward(&PairField::zeros(&problem.mesh), Some(&source))?;
        let mut num = T::zero();
        let mut den = T::zero();
        for k in 0..=grid.m {
            let gk = grid.weight(k);
            for (&idx, &wt) in problem
                .follower_region(i)
                .indices
                .iter()
                .zip(problem.follower_region(i).weights.iter())
            {
                let want = -phi.observed[k].bulk[idx] / problem.mu[i];
                let d = result.system.v[i][k][idx] - want;
                num = num + gk * wt * d * d;
                den = den + gk * wt * want * want;
            }
        }
        follower_residual[i] = num.sqrt() / den.sqrt().max(T::of(1e-300));
    }
    Ok(SystemReport { f_extraction, y_residual, z_residual, psi_residual, follower_residual })
}

/// Empirical cost-bound quotient: control norm over the weighted data norms.
#[derive(Debug, Clone)]
pub struct CostBoundReport<T> {
    pub control_norm: T,
    pub y0_norm: T,
    pub weighted_target_norms: [T; 2],
    pub c_emp: T,
}

pub fn cost_bound_report<T: Scalar>(
    problem: &GameProblem<T>,
    result: &HumResult<T>,
    weights: &CarlemanWeights<T>,
) -> Result<CostBoundReport<T>> {
    let grid = &problem.grid;
    let mut wt_norms = [T::zero(); 2];
    for i in 0..2 {
        let mut acc = T::zero();
        for k in 0..=grid.m {
            let t = grid.time(k);
            let (rho, overflow) = weights.rho(t);
            let mut level = T::zero();
            for (idx, &w) in problem.mesh.bulk_weights.iter().enumerate() {
                let v = problem.targets[i][k][idx];
                level = level + w * v * v;
            }
            if level > T::zero() && overflow {
                return Err(Error::RhoWeightInfinite(format!(
                    "target {} does not vanish toward the final time (level {k})",
                    i + 1
                )));
            }
            if level > T::zero() {
                acc = acc + grid.weight(k) * rho * rho * level;
                if acc > overflow_guard::<T>() {
                    return Err(Error::RhoWeightInfinite(format!(
                        "weighted quadrature of target {} exceeds the overflow guard",
                        i + 1
                    )));
                }
            }
        }
        wt_norms[i] = acc.sqrt();
    }
    let y0_norm = pair_norm(&problem.y0, &problem.mesh);
    let denom = y0_norm + wt_norms[0] + wt_norms[1];
    let c_emp = if denom > T::zero() { result.control_norm / denom } else { T::zero() };
    Ok(CostBoundReport { control_norm: result.control_norm, y0_norm, weighted_target_norms: wt_norms, c_emp })
}

/// Residual of the discrete duality identity between the controlled system
/// and the cascade at a given terminal datum: the pairing of the terminal
/// states must balance the initial pairing, the control work on the leader
/// region, and the tracking work of the companions against the targets.
pub fn duality_check<T: Scalar>(problem: &GameProblem<T>, z_t: &PairField<T>, tol: T) -> Result<T> {
    let cascade = cascade_solve(problem, z_t, tol, MAX_PICARD)?;
    let f = extract_control(problem, &cascade);
    let sys = opt_solve(problem, Some(&f), Some(&problem.y0), None, tol, MAX_PICARD)?;
    let grid = &problem.grid;
    let lhs = inner_product(sys.y.terminal(), z_t, &problem.mesh)?;
    let mut rhs = inner_product(&problem.y0, cascade.z.states.initial(), &problem.mesh)?;
    rhs = rhs + st_region_dot(grid, &problem.regions.omega, &f, &f);
    for i in 0..2 {
        let psi_bulk: SpaceTime<T> = cascade.psi[i].levels.iter().map(|l| l.bulk.clone()).collect();
        rhs = rhs
            - problem.alpha[i] * st_region_dot(grid, &problem.regions.omega_d, &problem.targets[i], &psi_bulk);
    }
    let scale = lhs.abs().max(rhs.abs()).max(T::one());
    Ok((lhs - rhs).abs() / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carleman::build_morse;
    use crate::coeffexpr::{sample_coefficients, CoefficientSpec};
    use crate::geometry::{build_interval_mesh, RegionSpec};
    use crate::linalg::{sym_eigen, DenseMatrix, Lu};
    use crate::pdecore::{StepMatrices, TimeGrid};

    fn problem(n: usize, m: usize) -> GameProblem<f64> {
        let mesh = build_interval_mesh(n, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, m, 0.5).unwrap();
        let coeffs = sample_coefficients(&CoefficientSpec::heat(), &mesh, &grid).unwrap();
        let step = StepMatrices::build(&mesh, &coeffs, &grid).unwrap();
        let regions = crate::geometry::RegionSet::build(
            &mesh,
            &RegionSpec::Interval { lo: 0.2, hi: 0.9 },
            &RegionSpec::Interval { lo: 0.1, hi: 0.4 },
            &RegionSpec::Interval { lo: 0.6, hi: 0.9 },
            &RegionSpec::Interval { lo: 0.4, hi: 0.7 },
            &RegionSpec::Interval { lo: 0.45, hi: 0.65 },
        )
        .unwrap();
        let y0_bulk: Vec<f64> = mesh.coords.iter().map(|p| (std::f64::consts::PI * p.x).sin()).collect();
        let y0 = PairField::from_state(&mesh, &y0_bulk);
        let targets = [zero_space_time(n, &grid), zero_space_time(n, &grid)];
        GameProblem { mesh, grid, regions, step, alpha: [1.0, 1.0], mu: [100.0, 100.0], y0, targets, background: None }
    }

    fn random_state(p: &GameProblem<f64>, seed: u64) -> PairField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state: Vec<f64> = (0..p.n()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PairField::from_state(&p.mesh, &state)
    }

    #[test]
    fn cascade_zero_datum_converges_in_one_sweep() {
        let p = problem(10, 8);
        let sol = cascade_solve(&p, &PairField::zeros(&p.mesh), 1e-12, 50).unwrap();
        assert_eq!(sol.picard_iters, 1);
        assert_eq!(st_norm(&p, &sol.z.states.levels), 0.0);
        assert_eq!(st_norm(&p, &sol.psi[0].levels), 0.0);
    }

    #[test]
    fn cascade_contraction_scales_with_penalty() {
        let mut p = problem(12, 12);
        p.mu = [1e8, 1e8];
        let z_t = random_state(&p, 7);
        let sol = cascade_solve(&p, &z_t, 1e-8, 10).unwrap();
        // Near-decoupled limit: the sweep after the first changes z by O(1/mu).
        assert!(sol.picard_iters <= 3, "iters {}", sol.picard_iters);
        assert!(sol.picard_residual <= 1e-8);
    }

    // One affine cascade sweep as a map on the stacked companion vector.
    fn sweep_map(
        p: &GameProblem<f64>,
        z_t: &PairField<f64>,
        psi_flat: &[f64],
    ) -> (BackwardSolution<f64>, Vec<f64>) {
        let n = p.n();
        let m = p.grid.m;
        let stride = n * (m + 1);
        let mut source = zero_space_time(n, &p.grid);
        for k in 0..=m {
            for &idx in &p.regions.omega_d.indices {
                source[k][idx] = p.alpha[0] * psi_flat[k * n + idx] + p.alpha[1] * psi_flat[stride + k * n + idx];
            }
        }
        let z = p.step.backward(z_t, Some(&source)).unwrap();
        let mut out = vec![0.0; 2 * stride];
        for i in 0..2 {
            let mut source = zero_space_time(n, &p.grid);
            for k in 0..=m {
                for &idx in &p.follower_region(i).indices {
                    source[k][idx] = -z.observed[k].bulk[idx] / p.mu[i];
                }
            }
            let psi = p.step.forward(&PairField::zeros(&p.mesh), Some(&source)).unwrap();
            for k in 0..=m {
                for idx in 0..n {
                    out[i * stride + k * n + idx] = psi.levels[k].bulk[idx];
                }
            }
        }
        (z, out)
    }

    #[test]
    fn cascade_matches_monolithic_dense_solve() {
        let p = problem(8, 8);
        let z_t = random_state(&p, 11);
        let dim = 2 * p.n() * (p.grid.m + 1);
        // Fixed point of the affine sweep u -> L u + b, assembled densely.
        let (_, b) = sweep_map(&p, &z_t, &vec![0.0; dim]);
        let mut a = DenseMatrix::zeros(dim, dim);
        let zero_t = PairField::zeros(&p.mesh);
        for j in 0..dim {
            let mut unit = vec![0.0; dim];
            unit[j] = 1.0;
            let (_, col) = sweep_map(&p, &zero_t, &unit);
            for i in 0..dim {
                a[(i, j)] = if i == j { 1.0 - col[i] } else { -col[i] };
            }
        }
        let lu = Lu::factor(&a).unwrap();
        let u = lu.solve(&b);
        let (z_direct, _) = sweep_map(&p, &z_t, &u);
        let picard = cascade_solve(&p, &z_t, 1e-13, 200).unwrap();
        let diffs: Vec<PairField<f64>> = (0..=p.grid.m)
            .map(|k| {
                let mut d = z_direct.states.levels[k].clone();
                d.axpy(-1.0, &picard.z.states.levels[k]);
                d
            })
            .collect();
        let rel = st_norm(&p, &diffs) / st_norm(&p, &z_direct.states.levels);
        assert!(rel <= 1e-9, "monolithic vs fixed-point difference {rel}");
    }

    #[test]
    fn gramian_zero_and_pairing_symmetry() {
        let p = problem(16, 32);
        let zero = apply_gramian(&p, &PairField::zeros(&p.mesh), 1e-11).unwrap();
        assert_eq!(pair_norm(&zero, &p.mesh), 0.0);
        let u = random_state(&p, 21);
        let v = random_state(&p, 22);
        let lu = apply_gramian(&p, &u, 1e-12).unwrap();
        let lv = apply_gramian(&p, &v, 1e-12).unwrap();
        let a = inner_product(&lu, &v, &p.mesh).unwrap();
        let b = inner_product(&u, &lv, &p.mesh).unwrap();
        let scale = a.abs().max(b.abs()).max(1e-300);
        assert!((a - b).abs() / scale <= 1e-10, "pairing asymmetry {}", (a - b).abs() / scale);
    }

    #[test]
    fn gramian_dense_is_symmetric_psd() {
        let p = problem(8, 8);
        let n = p.n();
        let mass = p.mesh.mass_vector();
        let mut lam = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut state = vec![0.0; n];
            state[j] = 1.0;
            let out = apply_gramian(&p, &PairField::from_state(&p.mesh, &state), 1e-12).unwrap();
            let col = out.to_state(&p.mesh);
            for i in 0..n {
                lam[(i, j)] = col[i];
            }
        }
        // Symmetry in the mass inner product and spectrum of the
        // mass-symmetrized form.
        let mut scale: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                scale = scale.max((mass[i] * lam[(i, j)]).abs());
            }
        }
        for i in 0..n {
            for j in 0..n {
                let asym = (mass[i] * lam[(i, j)] - mass[j] * lam[(j, i)]).abs();
                assert!(asym <= 1e-10 * scale, "asymmetry {asym} at ({i},{j})");
            }
        }
        let mut sym = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                sym[(i, j)] = (mass[i] / mass[j]).sqrt() * lam[(i, j)];
            }
        }
        let (vals, _) = sym_eigen(&sym);
        let top = vals.last().unwrap().abs().max(1e-300);
        assert!(vals[0] >= -1e-12 * top, "negative eigenvalue {} vs top {top}", vals[0]);
    }

    fn sampled_target(p: &GameProblem<f64>, f: impl Fn(f64, f64) -> f64) -> SpaceTime<f64> {
        (0..=p.grid.m)
            .map(|k| {
                let t = p.grid.time(k);
                p.mesh.coords.iter().map(|c| f(c.x, t)).collect()
            })
            .collect()
    }

    #[test]
    fn linear_term_zero_linearity_and_duality() {
        let mut p = problem(12, 16);
        p.y0 = PairField::zeros(&p.mesh);
        let c = linear_term(&p, 1e-11).unwrap();
        assert_eq!(pair_norm(&c, &p.mesh), 0.0);

        let mut p = problem(12, 16);
        let c1 = linear_term(&p, 1e-12).unwrap();
        let y0_save = p.y0.clone();
        p.y0.scale(2.0);
        let c2 = linear_term(&p, 1e-12).unwrap();
        p.y0 = y0_save;
        for i in 0..p.n() {
            let a = 2.0 * c1.bulk[i];
            assert!((c2.bulk[i] - a).abs() <= 1e-12 * a.abs().max(1e-6));
        }

        p.targets = [
            sampled_target(&p, |x, t| x * (1.0 - x) * (1.0 - t)),
            sampled_target(&p, |x, t| (x + t).sin()),
        ];
        let c = linear_term(&p, 1e-12).unwrap();
        for seed in 0..5u64 {
            let z_t = random_state(&p, 31 + seed);
            let cas = cascade_solve(&p, &z_t, 1e-12, MAX_PICARD).unwrap();
            let lhs = inner_product(&c, &z_t, &p.mesh).unwrap();
            let mut rhs = inner_product(&p.y0, cas.z.states.initial(), &p.mesh).unwrap();
            for i in 0..2 {
                let psi_bulk: SpaceTime<f64> = cas.psi[i].levels.iter().map(|l| l.bulk.clone()).collect();
                rhs -= p.alpha[i] * st_region_dot(&p.grid, &p.regions.omega_d, &p.targets[i], &psi_bulk);
            }
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            assert!((lhs - rhs).abs() / scale <= 1e-10, "duality residual {}", (lhs - rhs).abs() / scale);
        }
    }

    #[test]
    fn cg_zero_problem_and_homogeneity() {
        let mut p = problem(12, 16);
        p.y0 = PairField::zeros(&p.mesh);
        let r = hum_cg(&p, 1e-3, 1e-9, 200).unwrap();
        assert_eq!(pair_norm(&r.z_t, &p.mesh), 0.0);
        assert_eq!(r.terminal_norm, 0.0);
        assert_eq!(r.control_norm, 0.0);

        let mut p = problem(12, 16);
        let r1 = hum_cg(&p, 1e-2, 1e-10, 400).unwrap();
        p.y0.scale(2.0);
        let r2 = hum_cg(&p, 1e-2, 1e-10, 400).unwrap();
        let mut worst: f64 = 0.0;
        let mut fscale: f64 = 0.0;
        for k in 0..=p.grid.m {
            for &idx in &p.regions.omega.indices {
                worst = worst.max((r2.f[k][idx] - 2.0 * r1.f[k][idx]).abs());
                fscale = fscale.max(r2.f[k][idx].abs());
            }
        }
        assert!(worst <= 1e-8 * fscale.max(1e-12), "homogeneity defect {worst} at scale {fscale}");
    }

    #[test]
    fn duality_identity_along_cg_data() {
        let mut p = problem(12, 16);
        p.targets = [
            sampled_target(&p, |x, t| x * (1.0 - x) * (1.0 - t)),
            sampled_target(&p, |x, t| 0.5 * (x - t)),
        ];
        for seed in [3u64, 4, 5] {
            let z_t = random_state(&p, seed);
            let res = duality_check(&p, &z_t, 1e-12).unwrap();
            assert!(res <= 1e-10, "duality residual {res}");
        }
    }

    #[test]
    fn prox_zero_problem_returns_origin() {
        let mut p = problem(12, 16);
        p.y0 = PairField::zeros(&p.mesh);
        let r = hum_prox(&p, 1e-3, 1e-6, 500).unwrap();
        assert_eq!(pair_norm(&r.z_t, &p.mesh), 0.0);
        assert_eq!(r.terminal_norm, 0.0);
        assert_eq!(r.subgradient_residual, Some(0.0));
    }

    #[test]
    fn prox_subgradient_branches() {
        // Large penalty: the subgradient ball covers the linear term and the
        // minimizer is the origin.
        let p = problem(12, 16);
        let c = linear_term(&p, 1e-11).unwrap();
        let c_norm = pair_norm(&c, &p.mesh);
        let r = hum_prox(&p, 2.0 * c_norm, 1e-6, 500).unwrap();
        assert_eq!(pair_norm(&r.z_t, &p.mesh), 0.0);
        // Small penalty: nonzero output satisfying the smooth subgradient
        // equation.
        let r = hum_prox(&p, 1e-3, 1e-5, 4000).unwrap();
        assert!(pair_norm(&r.z_t, &p.mesh) > 0.0);
        assert!(r.subgradient_residual.unwrap() <= 1e-5);
        let mut g = apply_gramian(&p, &r.z_t, 1e-11).unwrap();
        g.axpy(1.0, &c);
        let zn = pair_norm(&r.z_t, &p.mesh);
        let mut dir = r.z_t.clone();
        dir.scale(r.epsilon / zn);
        g.axpy(1.0, &dir);
        let res = pair_norm(&g, &p.mesh) / c_norm.max(r.epsilon);
        assert!(res <= 1e-5, "subgradient residual {res}");
    }

    #[test]
    fn optimality_system_residuals() {
        let mut p = problem(12, 16);
        p.y0 = PairField::zeros(&p.mesh);
        let r = hum_cg(&p, 1e-3, 1e-9, 200).unwrap();
        let rep = verify_optimality_system(&p, &r).unwrap();
        assert_eq!(rep.max_residual(), 0.0);

        let mut p = problem(16, 16);
        p.targets = [
            sampled_target(&p, |x, t| x * (1.0 - x) * (1.0 - t).powi(2)),
            sampled_target(&p, |x, t| (x * t).sin() * (1.0 - t)),
        ];
        let r = hum_cg(&p, 1e-3, 1e-9, 400).unwrap();
        let rep = verify_optimality_system(&p, &r).unwrap();
        assert!(rep.f_extraction <= 1e-12, "extraction {}", rep.f_extraction);
        assert!(rep.max_residual() <= 1e-8, "max residual {}", rep.max_residual());
    }

    #[test]
    fn cost_bound_branches() {
        let mut p = problem(12, 16);
        let morse = build_morse(&p.mesh, &p.regions.omega_prime).unwrap();
        let w = crate::carleman::CarlemanWeights::new(&morse, 2.0, 3.0, p.grid.t_final).unwrap();
        // Zero targets: quotient is control over initial-state norm.
        let r = hum_cg(&p, 1e-3, 1e-9, 400).unwrap();
        let rep = cost_bound_report(&p, &r, &w).unwrap();
        assert!(rep.c_emp.is_finite());
        assert_eq!(rep.weighted_target_norms, [0.0, 0.0]);
        assert!((rep.c_emp - rep.control_norm / rep.y0_norm).abs() <= 1e-14 * rep.c_emp.abs());
        // Decaying envelope: weighted norms finite.
        p.targets = [
            sampled_target(&p, |x, t| x * (1.0 - t).powi(3)),
            sampled_target(&p, |x, t| (1.0 - x) * (1.0 - t).powi(3)),
        ];
        let r = hum_cg(&p, 1e-3, 1e-9, 400).unwrap();
        let rep = cost_bound_report(&p, &r, &w).unwrap();
        assert!(rep.weighted_target_norms.iter().all(|v| v.is_finite() && *v > 0.0));
        // No decay at the final time: flagged as non-integrable.
        p.targets = [sampled_target(&p, |_, _| 1.0), sampled_target(&p, |_, _| 1.0)];
        let r2 = HumResult { ..r };
        match cost_bound_report(&p, &r2, &w) {
            Err(Error::RhoWeightInfinite(_)) => {}
            other => panic!("expected divergence flag, got {:?}", other.map(|rep| rep.c_emp)),
        }
    }
}
