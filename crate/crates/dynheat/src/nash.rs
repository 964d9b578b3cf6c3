//! Follower game: the two secondary functionals, the control-to-state
//! operators and their exact discrete adjoints, and the equilibrium solve.
//!
//! Stationarity of both follower functionals reduces to the linear equation
//! `R(v1, v2) = rhs` on the product control space, where
//! `R_i(v) = mu_i v_i + alpha_i L_i*[ 1_d (L_1 v1 + L_2 v2) ]`,
//! `L_i` maps a follower control to the zero-initial-data state and `1_d`
//! restricts to the observation region. `R` is a compact perturbation of
//! `mu I`: with the penalty thresholds satisfied it is solved by plain
//! conjugate gradient when symmetric (equal tracking weights) and through the
//! normal equations otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Mesh, PairField, RegionMask, RegionSet};
use crate::linalg::IterativeTrace;
use crate::pdecore::{
    st_region_dot, zero_space_time, BackwardSolution, SpaceTime, StepMatrices, TimeGrid, Trajectory,
};
use crate::scalar::Scalar;

/// A control: one stacked value vector per time level, zero outside the
/// owning region mask.
pub type ControlField<T> = SpaceTime<T>;

/// Everything the game solvers need: discretization, regions, follower
/// weights, initial state and tracking targets.
pub struct GameProblem<T> {
    pub mesh: Mesh<T>,
    pub grid: TimeGrid<T>,
    pub regions: RegionSet<T>,
    pub step: StepMatrices<T>,
    /// Tracking weights alpha_1, alpha_2 (positive).
    pub alpha: [T; 2],
    /// Control penalties mu_1, mu_2 (positive).
    pub mu: [T; 2],
    pub y0: PairField<T>,
    /// Tracking targets sampled on the full grid (used on the observation
    /// region only).
    pub targets: [SpaceTime<T>; 2],
    /// Fixed source belonging to the uncontrolled dynamics (used by the
    /// frozen-coefficient linearization of the semilinear pipeline). It
    /// enters wherever the initial state does and never enters the linear
    /// control-to-state operators.
    pub background: Option<SpaceTime<T>>,
}

impl<T: Scalar> GameProblem<T> {
    pub fn follower_region(&self, i: usize) -> &RegionMask<T> {
        if i == 0 {
            &self.regions.omega1
        } else {
            &self.regions.omega2
        }
    }

    pub fn n(&self) -> usize {
        self.mesh.n_bulk()
    }

    pub fn zero_control(&self) -> ControlField<T> {
        zero_space_time(self.n(), &self.grid)
    }

    /// Masks a space-time field to a region, level by level.
    pub fn mask(&self, region: &RegionMask<T>, field: &SpaceTime<T>) -> SpaceTime<T> {
        field.iter().map(|level| region.apply(level)).collect()
    }

    /// Combined forward source from the three controls.
    pub fn combined_sources(
        &self,
        f: Option<&ControlField<T>>,
        v1: Option<&ControlField<T>>,
        v2: Option<&ControlField<T>>,
    ) -> SpaceTime<T> {
        let mut s = zero_space_time(self.n(), &self.grid);
        let mut add = |ctrl: Option<&ControlField<T>>, region: &RegionMask<T>| {
            if let Some(c) = ctrl {
                for k in 0..=self.grid.m {
                    for &i in &region.indices {
                        s[k][i] = s[k][i] + c[k][i];
                    }
                }
            }
        };
        add(f, &self.regions.omega);
        add(v1, &self.regions.omega1);
        add(v2, &self.regions.omega2);
        s
    }

    /// Adds the background source of the uncontrolled dynamics, if any.
    pub fn add_background(&self, s: &mut SpaceTime<T>) {
        if let Some(bg) = &self.background {
            for k in 0..=self.grid.m {
                for i in 0..self.n() {
                    s[k][i] = s[k][i] + bg[k][i];
                }
            }
        }
    }
}

/// Leader cost: half the squared control norm over its region.
pub fn eval_j<T: Scalar>(problem: &GameProblem<T>, f: &ControlField<T>) -> T {
    T::of(0.5) * st_region_dot(&problem.grid, &problem.regions.omega, f, f)
}

/// Follower cost J_i under the given controls.
pub fn eval_ji<T: Scalar>(
    problem: &GameProblem<T>,
    i: usize,
    f: &ControlField<T>,
    v1: &ControlField<T>,
    v2: &ControlField<T>,
) -> Result<T> {
    let mut sources = problem.combined_sources(Some(f), Some(v1), Some(v2));
    problem.add_background(&mut sources);
    let y = problem.step.forward(&problem.y0, Some(&sources))?;
    let half = T::of(0.5);
    let mut track = T::zero();
    for k in 0..=problem.grid.m {
        let diff: Vec<T> = y.levels[k]
            .bulk
            .iter()
            .zip(problem.targets[i][k].iter())
            .map(|(a, b)| *a - *b)
            .collect();
        track = track + problem.grid.weight(k) * problem.regions.omega_d.weighted_dot(&diff, &diff);
    }
    let vi = if i == 0 { v1 } else { v2 };
    let penalty = st_region_dot(&problem.grid, problem.follower_region(i), vi, vi);
    Ok(half * problem.alpha[i] * track + half * problem.mu[i] * penalty)
}

/// L_i: follower control to the bulk of the zero-initial-data state.
pub fn apply_elli<T: Scalar>(
    problem: &GameProblem<T>,
    i: usize,
    v: &ControlField<T>,
) -> Result<SpaceTime<T>> {
    let masked = problem.mask(problem.follower_region(i), v);
    let traj = problem.step.forward(&PairField::zeros(&problem.mesh), Some(&masked))?;
    Ok(traj.levels.iter().map(|l| l.bulk.clone()).collect())
}

/// Exact discrete adjoint of L_i against a field on the observation region:
/// a backward solve with the masked field as source, observed on region i.
pub fn apply_elli_adjoint<T: Scalar>(
    problem: &GameProblem<T>,
    i: usize,
    w: &SpaceTime<T>,
) -> Result<ControlField<T>> {
    let masked = problem.mask(&problem.regions.omega_d, w);
    let bwd = problem.step.backward(&PairField::zeros(&problem.mesh), Some(&masked))?;
    let region = problem.follower_region(i);
    Ok(bwd
        .observed
        .iter()
        .map(|p| region.apply(&p.bulk))
        .collect())
}

/// Penalty-threshold report: power-iteration estimates of the coupling
/// operator norms and whether the sufficient conditions for a coercive
/// equilibrium equation hold.
#[derive(Debug, Clone)]
pub struct MuThresholdReport<T> {
    /// Squared norms of the masked control-to-observation maps, one per
    /// follower.
    pub coupling_norm_sq: [T; 2],
    /// 4 mu_1 > alpha_2 * coupling_norm_sq[0] and symmetrically.
    pub satisfied: [bool; 2],
}

impl<T: Scalar> MuThresholdReport<T> {
    pub fn all_satisfied(&self) -> bool {
        self.satisfied.iter().all(|&s| s)
    }
}

/// Estimates the squared operator norm of `1_d L_i` by power iteration on
/// `L_i* 1_d L_i` in the space-time inner product of region i.
pub fn coupling_norm_sq<T: Scalar>(
    problem: &GameProblem<T>,
    i: usize,
    iterations: usize,
) -> Result<T> {
    let region = problem.follower_region(i);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e6f726d + i as u64);
    let mut v = problem.zero_control();
    for k in 0..=problem.grid.m {
        for &idx in &region.indices {
            v[k][idx] = T::of(rng.gen_range(-1.0..1.0));
        }
    }
    let mut lambda = T::zero();
    for _ in 0..iterations {
        let norm = st_region_dot(&problem.grid, region, &v, &v).sqrt();
        if norm == T::zero() {
            return Ok(T::zero());
        }
        for level in v.iter_mut() {
            for x in level.iter_mut() {
                *x = *x / norm;
            }
        }
        let image = apply_elli(problem, i, &v)?;
        let next = apply_elli_adjoint(problem, i, &image)?;
        lambda = st_region_dot(&problem.grid, region, &v, &next);
        v = next;
    }
    Ok(lambda)
}

pub fn check_mu_thresholds<T: Scalar>(problem: &GameProblem<T>) -> Result<MuThresholdReport<T>> {
    let four = T::of(4.0);
    let n1 = coupling_norm_sq(problem, 0, 30)?;
    let n2 = coupling_norm_sq(problem, 1, 30)?;
    Ok(MuThresholdReport {
        coupling_norm_sq: [n1, n2],
        satisfied: [
            four * problem.mu[0] > problem.alpha[1] * n1,
            four * problem.mu[1] > problem.alpha[0] * n2,
        ],
    })
}

/// A pair of follower controls, the vector the equilibrium equation acts on.
#[derive(Clone)]
pub struct ControlPair<T> {
    pub v: [ControlField<T>; 2],
}

impl<T: Scalar> ControlPair<T> {
    pub fn zeros(problem: &GameProblem<T>) -> Self {
        Self { v: [problem.zero_control(), problem.zero_control()] }
    }

    fn combine(a: T, x: &Self, b: T, y: &Self) -> Self {
        let mut out = x.clone();
        for i in 0..2 {
            for (ol, yl) in out.v[i].iter_mut().zip(y.v[i].iter()) {
                for (o, yv) in ol.iter_mut().zip(yl.iter()) {
                    *o = a * *o + b * *yv;
                }
            }
        }
        out
    }
}

fn pair_ip<T: Scalar>(problem: &GameProblem<T>, a: &ControlPair<T>, b: &ControlPair<T>) -> T {
    st_region_dot(&problem.grid, &problem.regions.omega1, &a.v[0], &b.v[0])
        + st_region_dot(&problem.grid, &problem.regions.omega2, &a.v[1], &b.v[1])
}

/// One application of R.
pub fn apply_r<T: Scalar>(problem: &GameProblem<T>, v: &ControlPair<T>) -> Result<ControlPair<T>> {
    let sources = problem.combined_sources(None, Some(&v.v[0]), Some(&v.v[1]));
    let state = problem.step.forward(&PairField::zeros(&problem.mesh), Some(&sources))?;
    let observed: SpaceTime<T> = state.levels.iter().map(|l| l.bulk.clone()).collect();
    let mut out = ControlPair::zeros(problem);
    for i in 0..2 {
        let pull = apply_elli_adjoint(problem, i, &observed)?;
        let region = problem.follower_region(i);
        for k in 0..=problem.grid.m {
            for &idx in &region.indices {
                out.v[i][k][idx] = problem.mu[i] * v.v[i][k][idx] + problem.alpha[i] * pull[k][idx];
            }
        }
    }
    Ok(out)
}

/// Adjoint of R in the unscaled product inner product.
pub fn apply_r_adjoint<T: Scalar>(
    problem: &GameProblem<T>,
    w: &ControlPair<T>,
) -> Result<ControlPair<T>> {
    let mut weighted = w.clone();
    for i in 0..2 {
        for level in weighted.v[i].iter_mut() {
            for x in level.iter_mut() {
                *x = *x * problem.alpha[i];
            }
        }
    }
    let sources = problem.combined_sources(None, Some(&weighted.v[0]), Some(&weighted.v[1]));
    let state = problem.step.forward(&PairField::zeros(&problem.mesh), Some(&sources))?;
    let observed: SpaceTime<T> = state.levels.iter().map(|l| l.bulk.clone()).collect();
    let mut out = ControlPair::zeros(problem);
    for i in 0..2 {
        let pull = apply_elli_adjoint(problem, i, &observed)?;
        let region = problem.follower_region(i);
        for k in 0..=problem.grid.m {
            for &idx in &region.indices {
                out.v[i][k][idx] = problem.mu[i] * w.v[i][k][idx] + pull[k][idx];
            }
        }
    }
    Ok(out)
}

/// Equilibrium output: controls, adjoint states, the controlled trajectory
/// and solver diagnostics.
pub struct NashSolution<T> {
    pub v: [ControlField<T>; 2],
    /// Adjoint backward solves driven by the tracking misfit.
    pub phi: [BackwardSolution<T>; 2],
    pub y: Trajectory<T>,
    pub trace: IterativeTrace<T>,
    /// Relative residual of v_i + (1/mu_i) phi^i restricted to region i.
    pub characterization_residual: [T; 2],
    pub thresholds: MuThresholdReport<T>,
}

/// Measured nonsymmetry of R on a few random control pairs.
fn r_nonsymmetry<T: Scalar>(problem: &GameProblem<T>) -> Result<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x73796d);
    let mut worst = T::zero();
    for _ in 0..2 {
        let mut a = ControlPair::zeros(problem);
        let mut b = ControlPair::zeros(problem);
        for i in 0..2 {
            let region = problem.follower_region(i);
            for k in 0..=problem.grid.m {
                for &idx in &region.indices {
                    a.v[i][k][idx] = T::of(rng.gen_range(-1.0..1.0));
                    b.v[i][k][idx] = T::of(rng.gen_range(-1.0..1.0));
                }
            }
        }
        let ra = apply_r(problem, &a)?;
        let rb = apply_r(problem, &b)?;
        let lhs = pair_ip(problem, &ra, &b);
        let rhs = pair_ip(problem, &a, &rb);
        let scale = lhs.abs().max(rhs.abs()).max(T::one());
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    Ok(worst)
}

/// Right-hand side of the equilibrium equation for a given leader control:
/// rhs_i = alpha_i L_i*[ 1_d (y_id - q) ] with q the state under (Y0, f).
pub fn nash_rhs<T: Scalar>(problem: &GameProblem<T>, f: &ControlField<T>) -> Result<ControlPair<T>> {
    let mut sources = problem.combined_sources(Some(f), None, None);
    problem.add_background(&mut sources);
    let q = problem.step.forward(&problem.y0, Some(&sources))?;
    let mut rhs = ControlPair::zeros(problem);
    for i in 0..2 {
        let misfit: SpaceTime<T> = (0..=problem.grid.m)
            .map(|k| {
                problem.targets[i][k]
                    .iter()
                    .zip(q.levels[k].bulk.iter())
                    .map(|(t, s)| *t - *s)
                    .collect()
            })
            .collect();
        let pull = apply_elli_adjoint(problem, i, &misfit)?;
        let region = problem.follower_region(i);
        for k in 0..=problem.grid.m {
            for &idx in &region.indices {
                rhs.v[i][k][idx] = problem.alpha[i] * pull[k][idx];
            }
        }
    }
    Ok(rhs)
}

pub fn nash_solve<T: Scalar>(problem: &GameProblem<T>, f: &ControlField<T>) -> Result<NashSolution<T>> {
    nash_solve_tol(problem, f, T::of(1e-10), 500)
}

pub fn nash_solve_tol<T: Scalar>(
    problem: &GameProblem<T>,
    f: &ControlField<T>,
    tol: T,
    max_iter: usize,
) -> Result<NashSolution<T>> {
    let thresholds = check_mu_thresholds(problem)?;
    let rhs = nash_rhs(problem, f)?;
    let nonsym = r_nonsymmetry(problem)?;
    let (v, trace) = if nonsym <= T::of(1e-10) {
        crate::linalg::conjugate_gradient(
            |x: &ControlPair<T>| apply_r(problem, x).expect("operator application failed"),
            |a, b| pair_ip(problem, a, b),
            |a, x, b, y| ControlPair::combine(a, x, b, y),
            &rhs,
            tol,
            max_iter,
        )
    } else {
        // Normal equations keep the solve matrix-free and symmetric.
        let rhs_n = apply_r_adjoint(problem, &rhs)?;
        crate::linalg::conjugate_gradient(
            |x: &ControlPair<T>| {
                let rx = apply_r(problem, x).expect("operator application failed");
                apply_r_adjoint(problem, &rx).expect("operator application failed")
            },
            |a, b| pair_ip(problem, a, b),
            |a, x, b, y| ControlPair::combine(a, x, b, y),
            &rhs_n,
            tol,
            max_iter,
        )
    };
    if !trace.converged {
        return Err(Error::NoConvergence {
            iterations: trace.iterations,
            residual: trace.relative_residual.to_f64().unwrap_or(f64::NAN),
        });
    }

    // Controlled state and the adjoint states of the optimality system.
    let mut sources = problem.combined_sources(Some(f), Some(&v.v[0]), Some(&v.v[1]));
    problem.add_background(&mut sources);
    let y = problem.step.forward(&problem.y0, Some(&sources))?;
    let mut phi = Vec::with_capacity(2);
    let mut characterization = [T::zero(); 2];
    for i in 0..2 {
        let misfit: SpaceTime<T> = (0..=problem.grid.m)
            .map(|k| {
                let diff: Vec<T> = y.levels[k]
                    .bulk
                    .iter()
                    .zip(problem.targets[i][k].iter())
                    .map(|(a, b)| problem.alpha[i] * (*a - *b))
                    .collect();
                problem.regions.omega_d.apply(&diff)
            })
            .collect();
        let bwd = problem.step.backward(&PairField::zeros(&problem.mesh), Some(&misfit))?;
        let region = problem.follower_region(i);
        let mut num = T::zero();
        let mut den = T::zero();
        for k in 0..=problem.grid.m {
            for (&idx, &w) in region.indices.iter().zip(region.weights.iter()) {
                let resid = v.v[i][k][idx] + bwd.observed[k].bulk[idx] / problem.mu[i];
                num = num + problem.grid.weight(k) * w * resid * resid;
                den = den + problem.grid.weight(k) * w * v.v[i][k][idx] * v.v[i][k][idx];
            }
        }
        characterization[i] = if den > T::zero() { (num / den).sqrt() } else { num.sqrt() };
        phi.push(bwd);
    }
    let phi: [BackwardSolution<T>; 2] = match phi.try_into() {
        Ok(p) => p,
        Err(_) => unreachable!(),
    };

    Ok(NashSolution { v: v.v, phi, y, trace, characterization_residual: characterization, thresholds })
}

/// Central-difference stationarity check of both follower functionals at the
/// given control point. Returns the largest normalized directional derivative
/// per player over `n_dirs` random unit directions.
pub fn verify_nash<T: Scalar>(
    problem: &GameProblem<T>,
    f: &ControlField<T>,
    v1: &ControlField<T>,
    v2: &ControlField<T>,
    n_dirs: usize,
    seed: u64,
) -> Result<[T; 2]> {
    let h = T::of(1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = [T::zero(); 2];
    for i in 0..2 {
        let region = problem.follower_region(i);
        let base = if i == 0 { v1 } else { v2 };
        let j_scale = eval_ji(problem, i, f, v1, v2)?.abs().max(T::one());
        for _ in 0..n_dirs {
            let mut delta = problem.zero_control();
            for k in 0..=problem.grid.m {
                for &idx in &region.indices {
                    delta[k][idx] = T::of(rng.gen_range(-1.0..1.0));
                }
            }
            let norm = st_region_dot(&problem.grid, region, &delta, &delta).sqrt();
            if norm == T::zero() {
                continue;
            }
            for level in delta.iter_mut() {
                for x in level.iter_mut() {
                    *x = *x / norm;
                }
            }
            let mut plus = base.clone();
            let mut minus = base.clone();
            for k in 0..=problem.grid.m {
                for &idx in &region.indices {
                    plus[k][idx] = plus[k][idx] + h * delta[k][idx];
                    minus[k][idx] = minus[k][idx] - h * delta[k][idx];
                }
            }
            let (jp, jm) = if i == 0 {
                (eval_ji(problem, i, f, &plus, v2)?, eval_ji(problem, i, f, &minus, v2)?)
            } else {
                (eval_ji(problem, i, f, v1, &plus)?, eval_ji(problem, i, f, v1, &minus)?)
            };
            let deriv = ((jp - jm) / (T::of(2.0) * h)).abs() / j_scale;
            out[i] = out[i].max(deriv);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffexpr::{sample_coefficients, CoefficientSpec};
    use crate::geometry::{build_interval_mesh, RegionSpec};
    use crate::linalg::{sym_eigen, DenseMatrix, Lu};

    fn problem(n: usize, m: usize) -> GameProblem<f64> {
        let mesh = build_interval_mesh(n, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, m, 0.5).unwrap();
        let coeffs = sample_coefficients(&CoefficientSpec::heat(), &mesh, &grid).unwrap();
        let step = StepMatrices::build(&mesh, &coeffs, &grid).unwrap();
        let regions = RegionSet::build(
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

    fn sampled_target(p: &GameProblem<f64>, f: impl Fn(f64, f64) -> f64) -> SpaceTime<f64> {
        (0..=p.grid.m)
            .map(|k| {
                let t = p.grid.time(k);
                p.mesh.coords.iter().map(|c| f(c.x, t)).collect()
            })
            .collect()
    }

    fn random_control(p: &GameProblem<f64>, i: usize, seed: u64) -> ControlField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = p.zero_control();
        let region = p.follower_region(i);
        for k in 0..=p.grid.m {
            for &idx in &region.indices {
                v[k][idx] = rng.gen_range(-1.0..1.0);
            }
        }
        v
    }

    #[test]
    fn leader_cost_closed_form() {
        let mut p = problem(11, 10);
        // Region whose discrete measure is exactly 0.3.
        p.regions.omega = RegionMask::build(&p.mesh, &RegionSpec::Interval { lo: 0.35, hi: 0.65 });
        assert!((p.regions.omega.measure() - 0.3).abs() < 1e-14);
        let f: ControlField<f64> = vec![vec![1.0; p.n()]; p.grid.m + 1];
        assert!((eval_j(&p, &f) - 0.15).abs() < 1e-14);
        let zero = p.zero_control();
        assert_eq!(eval_j(&p, &zero), 0.0);
        let f2: ControlField<f64> = vec![vec![2.0; p.n()]; p.grid.m + 1];
        assert!((eval_j(&p, &f2) - 4.0 * eval_j(&p, &f)).abs() <= 1e-14 * eval_j(&p, &f2));
    }

    #[test]
    fn follower_cost_zero_cases() {
        let mut p = problem(12, 8);
        p.y0 = PairField::zeros(&p.mesh);
        let z = p.zero_control();
        assert_eq!(eval_ji(&p, 0, &z, &z, &z).unwrap(), 0.0);
        // Consistent target: the uncontrolled trace costs nothing to track.
        let mut p = problem(12, 8);
        let free = p.step.forward(&p.y0, None).unwrap();
        let target: SpaceTime<f64> = free.levels.iter().map(|l| l.bulk.clone()).collect();
        p.targets = [target.clone(), target];
        let z = p.zero_control();
        assert!(eval_ji(&p, 0, &z, &z, &z).unwrap().abs() < 1e-28);
        assert!(eval_ji(&p, 1, &z, &z, &z).unwrap().abs() < 1e-28);
    }

    #[test]
    fn follower_cost_fd_matches_adjoint_gradient() {
        let mut p = problem(14, 12);
        p.targets = [sampled_target(&p, |x, t| x * (1.0 - x) * (1.0 + t)), sampled_target(&p, |x, t| (x * t).sin())];
        let f = p.zero_control();
        let v1 = random_control(&p, 0, 41);
        let v2 = random_control(&p, 1, 42);
        // Adjoint gradient of J_1 in v_1: mu_1 v_1 + observed adjoint on region 1.
        let sources = p.combined_sources(Some(&f), Some(&v1), Some(&v2));
        let y = p.step.forward(&p.y0, Some(&sources)).unwrap();
        let misfit: SpaceTime<f64> = (0..=p.grid.m)
            .map(|k| {
                let d: Vec<f64> = y.levels[k]
                    .bulk
                    .iter()
                    .zip(p.targets[0][k].iter())
                    .map(|(a, b)| p.alpha[0] * (a - b))
                    .collect();
                p.regions.omega_d.apply(&d)
            })
            .collect();
        let bwd = p.step.backward(&PairField::zeros(&p.mesh), Some(&misfit)).unwrap();
        let delta = random_control(&p, 0, 43);
        let mut grad_dot = 0.0;
        for k in 0..=p.grid.m {
            for (&idx, &w) in p.regions.omega1.indices.iter().zip(p.regions.omega1.weights.iter()) {
                grad_dot += p.grid.weight(k)
                    * w
                    * (p.mu[0] * v1[k][idx] + bwd.observed[k].bulk[idx])
                    * delta[k][idx];
            }
        }
        let h = 1e-5;
        let mut plus = v1.clone();
        let mut minus = v1.clone();
        for k in 0..=p.grid.m {
            for &idx in &p.regions.omega1.indices {
                plus[k][idx] += h * delta[k][idx];
                minus[k][idx] -= h * delta[k][idx];
            }
        }
        let fd = (eval_ji(&p, 0, &f, &plus, &v2).unwrap() - eval_ji(&p, 0, &f, &minus, &v2).unwrap())
            / (2.0 * h);
        assert!((fd - grad_dot).abs() <= 1e-6 * grad_dot.abs().max(1e-6), "{fd} vs {grad_dot}");
    }

    #[test]
    fn elli_linear_and_adjoint_pairing() {
        let p = problem(14, 10);
        let v = random_control(&p, 0, 1);
        let w = random_control(&p, 0, 2);
        let lv = apply_elli(&p, 0, &v).unwrap();
        let lw = apply_elli(&p, 0, &w).unwrap();
        let mut comb = p.zero_control();
        for k in 0..=p.grid.m {
            for i in 0..p.n() {
                comb[k][i] = 0.3 * v[k][i] - 1.1 * w[k][i];
            }
        }
        let lcomb = apply_elli(&p, 0, &comb).unwrap();
        for k in 0..=p.grid.m {
            for i in 0..p.n() {
                let expect = 0.3 * lv[k][i] - 1.1 * lw[k][i];
                assert!((lcomb[k][i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }
        // <L_i v, g>_d = <v, L_i* g>_i on random data.
        let g = sampled_target(&p, |x, t| (3.0 * x + t).cos());
        let lhs = st_region_dot(&p.grid, &p.regions.omega_d, &lv, &g);
        let pull = apply_elli_adjoint(&p, 0, &g).unwrap();
        let rhs = st_region_dot(&p.grid, &p.regions.omega1, &v, &pull);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    struct ControlCoords {
        entries: Vec<(usize, usize, usize)>,
        weights: Vec<f64>,
    }

    impl ControlCoords {
        fn build(p: &GameProblem<f64>) -> Self {
            let mut entries = Vec::new();
            let mut weights = Vec::new();
            for i in 0..2 {
                let region = p.follower_region(i);
                for k in 0..=p.grid.m {
                    for (&idx, &w) in region.indices.iter().zip(region.weights.iter()) {
                        entries.push((i, k, idx));
                        weights.push(p.grid.weight(k) * w);
                    }
                }
            }
            Self { entries, weights }
        }

        fn to_pair(&self, p: &GameProblem<f64>, x: &[f64]) -> ControlPair<f64> {
            let mut out = ControlPair::zeros(p);
            for (c, &(i, k, idx)) in self.entries.iter().enumerate() {
                out.v[i][k][idx] = x[c];
            }
            out
        }

        fn from_pair(&self, pair: &ControlPair<f64>) -> Vec<f64> {
            self.entries.iter().map(|&(i, k, idx)| pair.v[i][k][idx]).collect()
        }
    }

    fn dense_r(p: &GameProblem<f64>, coords: &ControlCoords) -> DenseMatrix<f64> {
        let dim = coords.entries.len();
        let mut mat = DenseMatrix::zeros(dim, dim);
        for c in 0..dim {
            let mut unit = vec![0.0; dim];
            unit[c] = 1.0;
            let out = apply_r(p, &coords.to_pair(p, &unit)).unwrap();
            let col = coords.from_pair(&out);
            for r in 0..dim {
                mat[(r, c)] = col[r];
            }
        }
        mat
    }

    #[test]
    fn elli_gram_psd_and_power_iteration_matches_dense() {
        let p = problem(8, 8);
        let coords = ControlCoords::build(&p);
        // Restrict to player 1 coordinates.
        let dim1 = coords.entries.iter().filter(|e| e.0 == 0).count();
        let mut gram = DenseMatrix::zeros(dim1, dim1);
        for c in 0..dim1 {
            let mut unit = vec![0.0; coords.entries.len()];
            unit[c] = 1.0;
            let pair = coords.to_pair(&p, &unit);
            let image = apply_elli(&p, 0, &pair.v[0]).unwrap();
            let pull = apply_elli_adjoint(&p, 0, &image).unwrap();
            let mut out = ControlPair::zeros(&p);
            out.v[0] = pull;
            let col = coords.from_pair(&out);
            for r in 0..dim1 {
                gram[(r, c)] = col[r];
            }
        }
        // Symmetrize against the control-space weights.
        let mut sym = DenseMatrix::zeros(dim1, dim1);
        for i in 0..dim1 {
            for j in 0..dim1 {
                sym[(i, j)] = gram[(i, j)] * (coords.weights[i] / coords.weights[j]).sqrt();
            }
        }
        let (vals, _) = sym_eigen(&sym);
        assert!(vals.iter().all(|&v| v >= -1e-12));
        let dense_norm_sq = *vals.last().unwrap();
        let power = coupling_norm_sq(&p, 0, 30).unwrap();
        assert!(
            (power - dense_norm_sq).abs() <= 1e-6 * dense_norm_sq.max(1e-12),
            "{power} vs {dense_norm_sq}"
        );
    }

    #[test]
    fn mu_threshold_dominance() {
        let mut p = problem(10, 8);
        p.mu = [1e10, 1e10];
        let rep = check_mu_thresholds(&p).unwrap();
        assert!(rep.all_satisfied());
        p.mu = [1.0, 1.0];
        p.alpha = [1e-12, 1e-12];
        let rep = check_mu_thresholds(&p).unwrap();
        assert!(rep.all_satisfied());
    }

    #[test]
    fn r_is_linear_and_vanishes_at_zero() {
        let p = problem(10, 8);
        let zero = ControlPair::zeros(&p);
        let rz = apply_r(&p, &zero).unwrap();
        assert_eq!(pair_ip(&p, &rz, &rz), 0.0);
        let a = ControlPair { v: [random_control(&p, 0, 5), random_control(&p, 1, 6)] };
        let b = ControlPair { v: [random_control(&p, 0, 7), random_control(&p, 1, 8)] };
        let comb = ControlPair::combine(0.4, &a, -2.0, &b);
        let r_comb = apply_r(&p, &comb).unwrap();
        let ra = apply_r(&p, &a).unwrap();
        let rb = apply_r(&p, &b).unwrap();
        let expect = ControlPair::combine(0.4, &ra, -2.0, &rb);
        let diff = ControlPair::combine(1.0, &r_comb, -1.0, &expect);
        let rel = pair_ip(&p, &diff, &diff).sqrt() / pair_ip(&p, &expect, &expect).sqrt();
        assert!(rel <= 1e-12);
    }

    #[test]
    fn nash_consistent_targets_give_zero_controls() {
        let mut p = problem(12, 10);
        let free = p.step.forward(&p.y0, None).unwrap();
        let target: SpaceTime<f64> = free.levels.iter().map(|l| l.bulk.clone()).collect();
        p.targets = [target.clone(), target];
        let f = p.zero_control();
        let sol = nash_solve(&p, &f).unwrap();
        let norm = (st_region_dot(&p.grid, &p.regions.omega1, &sol.v[0], &sol.v[0])
            + st_region_dot(&p.grid, &p.regions.omega2, &sol.v[1], &sol.v[1]))
        .sqrt();
        assert!(norm <= 1e-10, "norm {norm}");
    }

    #[test]
    fn nash_dense_oracle() {
        let mut p = problem(8, 8);
        p.targets = [sampled_target(&p, |x, t| x + t), sampled_target(&p, |x, t| x * t)];
        let coords = ControlCoords::build(&p);
        let r_mat = dense_r(&p, &coords);
        let f = p.zero_control();
        let rhs = nash_rhs(&p, &f).unwrap();
        let rhs_vec = coords.from_pair(&rhs);
        let lu = Lu::factor(&r_mat).unwrap();
        let direct = lu.solve(&rhs_vec);
        let sol = nash_solve(&p, &f).unwrap();
        let iter_pair = ControlPair { v: sol.v.clone() };
        let iterative = coords.from_pair(&iter_pair);
        let diff: f64 = direct
            .iter()
            .zip(iterative.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-8, "dense vs matrix-free difference {diff}");
        // Symmetric part of the weighted form of R is positive definite when
        // the thresholds hold.
        assert!(sol.thresholds.all_satisfied());
        let dim = coords.entries.len();
        let mut weighted = DenseMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                weighted[(i, j)] = 0.5
                    * (r_mat[(i, j)] * (coords.weights[i] / coords.weights[j]).sqrt()
                        + r_mat[(j, i)] * (coords.weights[j] / coords.weights[i]).sqrt());
            }
        }
        let (vals, _) = sym_eigen(&weighted);
        assert!(vals[0] > 0.0, "min eigenvalue of symmetric part {}", vals[0]);
    }

    #[test]
    fn nash_characterization_residual() {
        let mut p = problem(16, 16);
        p.targets = [
            sampled_target(&p, |x, t| (1.0 + t) * x * (1.0 - x)),
            sampled_target(&p, |x, t| (2.0 * x - t).cos()),
        ];
        let f = p.zero_control();
        let sol = nash_solve(&p, &f).unwrap();
        for i in 0..2 {
            assert!(
                sol.characterization_residual[i] <= 1e-9,
                "player {i}: {}",
                sol.characterization_residual[i]
            );
        }
    }

    #[test]
    fn nash_map_is_affine_in_leader_control() {
        let mut p = problem(10, 8);
        p.targets = [sampled_target(&p, |x, t| x + t), sampled_target(&p, |x, t| x - t)];
        let mut f1 = p.zero_control();
        let mut f2 = p.zero_control();
        for k in 0..=p.grid.m {
            for &idx in &p.regions.omega.indices {
                f1[k][idx] = (idx as f64 * 0.1 + k as f64 * 0.05).sin();
                f2[k][idx] = (idx as f64 * 0.2 - k as f64 * 0.03).cos();
            }
        }
        let mut f12 = p.zero_control();
        for k in 0..=p.grid.m {
            for i in 0..p.n() {
                f12[k][i] = f1[k][i] + f2[k][i];
            }
        }
        let v0 = nash_solve(&p, &p.zero_control()).unwrap();
        let va = nash_solve(&p, &f1).unwrap();
        let vb = nash_solve(&p, &f2).unwrap();
        let vab = nash_solve(&p, &f12).unwrap();
        for i in 0..2 {
            let region = p.follower_region(i);
            for k in 0..=p.grid.m {
                for &idx in &region.indices {
                    let lhs = vab.v[i][k][idx] - v0.v[i][k][idx];
                    let rhs = (va.v[i][k][idx] - v0.v[i][k][idx]) + (vb.v[i][k][idx] - v0.v[i][k][idx]);
                    assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs().max(1e-4));
                }
            }
        }
    }

    #[test]
    fn stationarity_verified_by_finite_differences() {
        let mut p = problem(12, 10);
        p.targets = [
            sampled_target(&p, |x, t| x * (1.0 - x) + 0.5 * t),
            sampled_target(&p, |x, t| (x + t).sin()),
        ];
        let f = p.zero_control();
        let sol = nash_solve(&p, &f).unwrap();
        let at_star = verify_nash(&p, &f, &sol.v[0], &sol.v[1], 10, 99).unwrap();
        assert!(at_star[0] <= 1e-6 && at_star[1] <= 1e-6, "{at_star:?}");
        // Perturbed point is visibly non-stationary.
        let mut v1p = sol.v[0].clone();
        let bump = random_control(&p, 0, 100);
        for k in 0..=p.grid.m {
            for &idx in &p.regions.omega1.indices {
                v1p[k][idx] += 0.1 * bump[k][idx];
            }
        }
        let perturbed = verify_nash(&p, &f, &v1p, &sol.v[1], 10, 99).unwrap();
        assert!(perturbed[0] > at_star[0]);
        // Zero controls with inconsistent targets are not stationary.
        let z = p.zero_control();
        let at_zero = verify_nash(&p, &f, &z, &z, 10, 99).unwrap();
        assert!(at_zero[0] > 1e-4 && at_zero[1] > 1e-4);
    }
}
