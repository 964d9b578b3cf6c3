//! Weight-function machinery and empirical observability constants.
//!
//! The weights are built from an auxiliary landscape function eta0 that
//! vanishes on the boundary and has its only interior critical point inside a
//! designated subregion. The time profile blows up at both ends of the
//! horizon; a one-sided variant stays bounded near t = 0. All exponentials
//! are guarded: values that would leave the double range are capped at an
//! explicit sentinel and flagged, never returned as infinity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{inner_product, pair_norm, Mesh, MeshKind, PairField, RegionMask};
use crate::hum::{cascade_solve, CascadeSolution};
use crate::nash::GameProblem;
use crate::pdecore::{bulk_gradient, tangential_gradient, TimeGrid, Trajectory};
use crate::scalar::Scalar;

/// Cap for guarded exponentials.
pub fn overflow_guard<T: Scalar>() -> T {
    T::of(1e100)
}

/// Closed form of the landscape function, kept so it can be evaluated off the
/// mesh nodes (fine-grid scans, quadrature oracles).
#[derive(Debug, Clone, Copy)]
pub enum LandscapeForm<T> {
    /// x (L - x) e^{kappa x} on (0, L).
    Interval { length: T, kappa: T },
    /// R^2 - r^2 on the disk.
    Disk { radius: T },
}

impl<T: Scalar> LandscapeForm<T> {
    pub fn value(&self, x: T, y: T) -> T {
        match *self {
            LandscapeForm::Interval { length, kappa } => x * (length - x) * (kappa * x).exp(),
            LandscapeForm::Disk { radius } => radius * radius - (x * x + y * y),
        }
    }

    pub fn gradient(&self, x: T, y: T) -> [T; 2] {
        match *self {
            LandscapeForm::Interval { length, kappa } => {
                let two = T::of(2.0);
                [(kappa * x).exp() * ((length - two * x) + kappa * x * (length - x)), T::zero()]
            }
            LandscapeForm::Disk { .. } => [-T::of(2.0) * x, -T::of(2.0) * y],
        }
    }
}

/// Landscape function eta0: positive inside, zero on the boundary, exactly
/// one interior critical point, located inside the designated region.
#[derive(Debug, Clone)]
pub struct MorseFunction<T> {
    pub form: LandscapeForm<T>,
    /// Nodal values on the stacked state layout.
    pub values: Vec<T>,
    /// Nodal gradients.
    pub gradients: Vec<[T; 2]>,
    /// Sup norm over the closure.
    pub max_value: T,
    /// Reported floor of |grad eta0| outside the designated region.
    pub gradient_floor: T,
    /// Reported bound c > 0 with outward normal derivative <= -c on the
    /// boundary.
    pub conormal_bound: T,
}

fn interval_critical_point<T: Scalar>(length: T, kappa: T) -> T {
    // Root of (L - 2x) + kappa x (L - x) on (0, L); the bracket endpoints
    // have opposite signs for every kappa.
    let d = |x: T| (length - T::of(2.0) * x) + kappa * x * (length - x);
    let mut lo = T::zero();
    let mut hi = length;
    for _ in 0..200 {
        let mid = T::of(0.5) * (lo + hi);
        if d(mid) > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    T::of(0.5) * (lo + hi)
}

/// Builds the landscape function for the mesh, placing the interval critical
/// point at the midpoint of the designated region by a bisection in the
/// steepness parameter.
pub fn build_morse<T: Scalar>(mesh: &Mesh<T>, omega_prime: &RegionMask<T>) -> Result<MorseFunction<T>> {
    if omega_prime.is_empty() {
        return Err(Error::Config("designated interior region is empty".into()));
    }
    let form = match mesh.kind {
        MeshKind::Interval => {
            let length = mesh.extent;
            let xs: Vec<T> = omega_prime.indices.iter().map(|&i| mesh.coords[i].x).collect();
            let lo = xs.iter().cloned().fold(xs[0], T::min);
            let hi = xs.iter().cloned().fold(xs[0], T::max);
            let target = T::of(0.5) * (lo + hi);
            // Critical point moves monotonically with the steepness, so a
            // plain bisection in kappa suffices.
            let mut klo = T::of(-60.0);
            let mut khi = T::of(60.0);
            for _ in 0..200 {
                let mid = T::of(0.5) * (klo + khi);
                if interval_critical_point(length, mid) < target {
                    klo = mid;
                } else {
                    khi = mid;
                }
            }
            let mut kappa = T::of(0.5) * (klo + khi);
            if kappa.abs() < T::of(1e-12) {
                kappa = T::zero();
            }
            LandscapeForm::Interval { length, kappa }
        }
        MeshKind::Disk => {
            // The radial form has its critical point at the center.
            if !omega_prime.indices.contains(&0) {
                return Err(Error::CriticalPointOutsideOmegaPrime { x: 0.0 });
            }
            LandscapeForm::Disk { radius: mesh.extent }
        }
    };

    // Uniqueness scan of the derivative along the relevant coordinate.
    if let LandscapeForm::Interval { length, .. } = form {
        let n_scan = 10_000usize;
        let mut crossings = Vec::new();
        let mut prev_sign = T::one();
        for j in 0..=n_scan {
            let x = length * T::of(j as f64 / n_scan as f64);
            let g = form.gradient(x, T::zero())[0];
            let sign = if g >= T::zero() { T::one() } else { -T::one() };
            if j > 0 && sign != prev_sign {
                crossings.push(x);
            }
            prev_sign = sign;
        }
        if crossings.len() != 1 {
            return Err(Error::MultipleCriticalPoints { count: crossings.len() });
        }
        let xs: Vec<T> = omega_prime.indices.iter().map(|&i| mesh.coords[i].x).collect();
        let lo = xs.iter().cloned().fold(xs[0], T::min) - T::of(0.5) * mesh.h;
        let hi = xs.iter().cloned().fold(xs[0], T::max) + T::of(0.5) * mesh.h;
        if crossings[0] < lo || crossings[0] > hi {
            return Err(Error::CriticalPointOutsideOmegaPrime {
                x: crossings[0].to_f64().unwrap_or(f64::NAN),
            });
        }
    }

    let n = mesh.n_bulk();
    let mut values = vec![T::zero(); n];
    let mut gradients = vec![[T::zero(); 2]; n];
    let mut max_value = T::zero();
    for i in 0..n {
        let p = &mesh.coords[i];
        let v = if mesh.is_boundary_bulk(i) { T::zero() } else { form.value(p.x, p.y) };
        values[i] = v;
        gradients[i] = form.gradient(p.x, p.y);
        max_value = max_value.max(v);
    }
    let in_prime = |i: usize| omega_prime.indices.contains(&i);
    let mut gradient_floor = T::infinity();
    for i in 0..n {
        if !in_prime(i) {
            let g = gradients[i];
            gradient_floor = gradient_floor.min((g[0] * g[0] + g[1] * g[1]).sqrt());
        }
    }
    let mut conormal_bound = T::infinity();
    for b in &mesh.boundary {
        let g = gradients[b.bulk_index];
        let dn = g[0] * b.normal[0] + g[1] * b.normal[1];
        conormal_bound = conormal_bound.min(-dn);
    }
    if !(gradient_floor > T::zero()) {
        return Err(Error::Contract("landscape gradient vanishes outside the designated region".into()));
    }
    if !(conormal_bound > T::zero()) {
        return Err(Error::Contract("landscape co-normal derivative is not negative on the boundary".into()));
    }
    Ok(MorseFunction { form, values, gradients, max_value, gradient_floor, conormal_bound })
}

/// Space-time weight family on a fixed mesh and horizon.
///
/// The raw time profiles behave like 1/(t(T-t)) and overflow double
/// precision on practical grids, so the stiffness parameter is measured in
/// units of the one-sided profile's minimum: the effective parameter is
/// s / alpha_star(T/2). Reported invariants (signs, orderings, monotonicity)
/// are unaffected; only the absolute exponent scale changes.
#[derive(Debug, Clone)]
pub struct CarlemanWeights<T> {
    pub lambda: T,
    pub s: T,
    pub t_final: T,
    pub morse: MorseFunction<T>,
    /// Effective stiffness multiplying the time profiles.
    pub s_eff: T,
    exp_4lm: T,
    exp_2lm: T,
}

/// Pointwise weight values with the overflow flag for the blowing-up factor.
#[derive(Debug, Clone, Copy)]
pub struct WeightValues<T> {
    pub xi: T,
    pub alpha: T,
    pub xi_bar: T,
    pub alpha_bar: T,
    pub rho: T,
    pub rho_overflow: bool,
}

impl<T: Scalar> CarlemanWeights<T> {
    pub fn new(morse: &MorseFunction<T>, lambda: T, s: T, t_final: T) -> Result<Self> {
        if lambda < T::one() || s < T::one() {
            return Err(Error::Config("weight parameters must satisfy lambda >= 1 and s >= 1".into()));
        }
        if t_final <= T::zero() {
            return Err(Error::Config("final time must be positive".into()));
        }
        let m = morse.max_value;
        let exp_4lm = (T::of(4.0) * lambda * m).exp();
        let exp_2lm = (T::of(2.0) * lambda * m).exp();
        // alpha_star at t = T/2 equals (e^{4 lambda M} - e^{2 lambda M}) / (T^2/4).
        let astar_min = (exp_4lm - exp_2lm) / (t_final * t_final / T::of(4.0));
        Ok(Self { lambda, s, t_final, morse: morse.clone(), s_eff: s / astar_min, exp_4lm, exp_2lm })
    }

    /// t (T - t).
    pub fn profile(&self, t: T) -> T {
        t * (self.t_final - t)
    }

    /// One-sided profile: constant T^2/4 on (0, T/2], then t (T - t).
    pub fn one_sided(&self, t: T) -> T {
        let half = T::of(0.5) * self.t_final;
        if t < half {
            self.t_final * self.t_final / T::of(4.0)
        } else {
            self.profile(t)
        }
    }

    fn num_xi(&self, node: usize) -> T {
        (self.lambda * (T::of(2.0) * self.morse.max_value + self.morse.values[node])).exp()
    }

    pub fn xi(&self, node: usize, t: T) -> T {
        self.num_xi(node) / self.profile(t)
    }

    pub fn alpha(&self, node: usize, t: T) -> T {
        (self.exp_4lm - self.num_xi(node)) / self.profile(t)
    }

    pub fn xi_bar(&self, node: usize, t: T) -> T {
        self.num_xi(node) / self.one_sided(t)
    }

    pub fn alpha_bar(&self, node: usize, t: T) -> T {
        (self.exp_4lm - self.num_xi(node)) / self.one_sided(t)
    }

    pub fn xi_star(&self, t: T) -> T {
        self.exp_2lm / self.one_sided(t)
    }

    pub fn alpha_star(&self, t: T) -> T {
        (self.exp_4lm - self.exp_2lm) / self.one_sided(t)
    }

    /// Guarded e^{s_eff alpha_star(t)}: capped at the sentinel with a flag.
    pub fn rho(&self, t: T) -> (T, bool) {
        if t >= self.t_final {
            return (overflow_guard::<T>(), true);
        }
        let e = self.s_eff * self.alpha_star(t);
        if e > overflow_guard::<T>().ln() {
            (overflow_guard::<T>(), true)
        } else {
            (e.exp(), false)
        }
    }

    /// e^{-2 s_eff alpha_star(t)}, zero past the final time.
    pub fn rho_inv_sq(&self, t: T) -> T {
        if t >= self.t_final {
            T::zero()
        } else {
            (-T::of(2.0) * self.s_eff * self.alpha_star(t)).exp()
        }
    }

    /// e^{-2 s_eff alpha(node, t)}; zero at the endpoints of the horizon.
    pub fn decay(&self, node: usize, t: T) -> T {
        if t <= T::zero() || t >= self.t_final {
            T::zero()
        } else {
            (-T::of(2.0) * self.s_eff * self.alpha(node, t)).exp()
        }
    }

    fn decay_bar(&self, node: usize, t: T) -> T {
        if t <= T::zero() || t >= self.t_final {
            T::zero()
        } else {
            (-T::of(2.0) * self.s_eff * self.alpha_bar(node, t)).exp()
        }
    }

    /// Analytic time derivative of xi.
    pub fn d_t_xi(&self, node: usize, t: T) -> T {
        self.xi(node, t) * (T::of(2.0) * t - self.t_final) / self.profile(t)
    }

    /// Analytic time derivative of alpha.
    pub fn d_t_alpha(&self, node: usize, t: T) -> T {
        self.alpha(node, t) * (T::of(2.0) * t - self.t_final) / self.profile(t)
    }
}

/// Evaluates the weight family at one node and time.
pub fn eval_weights<T: Scalar>(w: &CarlemanWeights<T>, node: usize, t: T) -> Result<WeightValues<T>> {
    if t <= T::zero() || t >= w.t_final {
        return Err(Error::Config(format!("time {t} outside the open horizon (0, {})", w.t_final)));
    }
    let (rho, rho_overflow) = w.rho(t);
    Ok(WeightValues {
        xi: w.xi(node, t),
        alpha: w.alpha(node, t),
        xi_bar: w.xi_bar(node, t),
        alpha_bar: w.alpha_bar(node, t),
        rho,
        rho_overflow,
    })
}

/// Empirical suprema of the bounded weight combinations, over a dense
/// space-time sample.
#[derive(Debug, Clone)]
pub struct WeightBoundsReport<T> {
    pub sup_dt_alpha_over_xi2: T,
    pub sup_dt_xi_over_xi2: T,
    pub sup_grad_alpha_over_lambda_xi: T,
    /// |d/dt (s^3 l^4 xi^3 e^{-2 s alpha})| normalized by s^4 l^4 xi^5 e^{-2 s alpha}.
    pub sup_profile_derivative_l4: T,
    /// Same quantity with the l^5 normalization in the denominator.
    pub sup_profile_derivative_l5: T,
    /// sup of e^{-2 s alpha} xi^r for r = 3, 5, 7.
    pub sup_decay_xi: [T; 3],
    /// Max of e^{-2 s alpha} xi^7 over the first and last time samples,
    /// relative to the interior maximum (decay toward the endpoints).
    pub endpoint_to_interior_ratio: T,
    pub all_finite: bool,
}

pub fn weight_bounds_check<T: Scalar>(w: &CarlemanWeights<T>, n_time: usize) -> WeightBoundsReport<T> {
    let n = w.morse.values.len();
    let mut r = WeightBoundsReport {
        sup_dt_alpha_over_xi2: T::zero(),
        sup_dt_xi_over_xi2: T::zero(),
        sup_grad_alpha_over_lambda_xi: T::zero(),
        sup_profile_derivative_l4: T::zero(),
        sup_profile_derivative_l5: T::zero(),
        sup_decay_xi: [T::zero(); 3],
        endpoint_to_interior_ratio: T::zero(),
        all_finite: true,
    };
    let mut endpoint_max = T::zero();
    let mut interior_max = T::zero();
    let s = w.s_eff;
    for j in 0..n_time {
        let t = w.t_final * T::of((j as f64 + 0.5) / n_time as f64);
        let endpoint_sample = j == 0 || j == n_time - 1;
        for i in 0..n {
            let xi = w.xi(i, t);
            let da = w.d_t_alpha(i, t);
            let dxi = w.d_t_xi(i, t);
            let decay = w.decay(i, t);
            let g = w.morse.gradients[i];
            let grad_eta = (g[0] * g[0] + g[1] * g[1]).sqrt();
            r.sup_dt_alpha_over_xi2 = r.sup_dt_alpha_over_xi2.max(da.abs() / (xi * xi));
            r.sup_dt_xi_over_xi2 = r.sup_dt_xi_over_xi2.max(dxi.abs() / (xi * xi));
            // grad alpha = -lambda xi grad eta0, so the quotient is |grad eta0|.
            r.sup_grad_alpha_over_lambda_xi = r.sup_grad_alpha_over_lambda_xi.max(grad_eta);
            // d/dt (xi^3 e^{-2 s alpha}) = (3 xi^2 xi' - 2 s alpha' xi^3) e^{-2 s alpha}.
            let numer = (T::of(3.0) * xi * xi * dxi - T::of(2.0) * s * da * xi * xi * xi).abs() * decay;
            let denom4 = s * xi * xi * xi * xi * xi * decay;
            if denom4 > T::zero() {
                r.sup_profile_derivative_l4 = r.sup_profile_derivative_l4.max(numer / denom4);
                r.sup_profile_derivative_l5 = r.sup_profile_derivative_l5.max(numer / (denom4 * w.lambda));
            }
            for (ri, &rr) in [3.0, 5.0, 7.0].iter().enumerate() {
                r.sup_decay_xi[ri] = r.sup_decay_xi[ri].max(decay * xi.powf(T::of(rr)));
            }
            let e7 = decay * xi.powi(7);
            if endpoint_sample {
                endpoint_max = endpoint_max.max(e7);
            } else {
                interior_max = interior_max.max(e7);
            }
        }
    }
    if interior_max > T::zero() {
        r.endpoint_to_interior_ratio = endpoint_max / interior_max;
    }
    let finite = |v: T| v.is_finite();
    r.all_finite = finite(r.sup_dt_alpha_over_xi2)
        && finite(r.sup_dt_xi_over_xi2)
        && finite(r.sup_grad_alpha_over_lambda_xi)
        && finite(r.sup_profile_derivative_l4)
        && finite(r.sup_profile_derivative_l5)
        && r.sup_decay_xi.iter().all(|&v| v.is_finite());
    r
}

/// Bulk gradient used inside the weighted functional: fourth-order centered
/// stencil on the interval (the second-order one loses more than a percent
/// of the gradient energy on coarse grids), mesh stencils elsewhere.
fn functional_gradient<T: Scalar>(mesh: &Mesh<T>, field: &[T]) -> Vec<[T; 2]> {
    match mesh.kind {
        MeshKind::Interval => {
            let n = field.len();
            let h = mesh.h;
            let mut g = bulk_gradient(mesh, field);
            if n >= 5 {
                let c = T::of(1.0 / 12.0) / h;
                for i in 2..n - 2 {
                    g[i][0] = c
                        * (field[i - 2] - T::of(8.0) * field[i - 1] + T::of(8.0) * field[i + 1]
                            - field[i + 2]);
                }
            }
            g
        }
        MeshKind::Disk => bulk_gradient(mesh, field),
    }
}

/// Term breakdown of the weighted quadratic functional of a trajectory.
#[derive(Debug, Clone)]
pub struct CarlemanTerms<T> {
    /// s l^2 * weighted bulk gradient, s^3 l^4 * weighted bulk square,
    /// s l * weighted boundary tangential gradient, s^3 l^3 * weighted
    /// boundary square, s^{-1} * weighted time-derivative square.
    pub terms: [T; 5],
    pub total: T,
    /// Same five integrals with the one-sided (bounded near t = 0) weights.
    pub terms_one_sided: [T; 5],
    pub total_one_sided: T,
}

/// Evaluates the five weighted integrals of a trajectory, with both the
/// symmetric and the one-sided weight profiles.
pub fn carleman_functional<T: Scalar>(
    phi: &Trajectory<T>,
    w: &CarlemanWeights<T>,
    mesh: &Mesh<T>,
    grid: &TimeGrid<T>,
) -> CarlemanTerms<T> {
    let s = w.s_eff;
    let l = w.lambda;
    let pre = [
        s * l * l,
        s * s * s * l * l * l * l,
        s * l,
        s * s * s * l * l * l,
        T::one() / s,
    ];
    let mut terms = [T::zero(); 5];
    let mut terms_bar = [T::zero(); 5];
    let m = grid.m;
    for k in 0..=m {
        let t = grid.time(k);
        if t <= T::zero() || t >= grid.t_final {
            continue;
        }
        let gk = grid.weight(k);
        let level = &phi.levels[k];
        let grad = functional_gradient(mesh, &level.bulk);
        let tgrad = tangential_gradient(mesh, &level.boundary);
        // Centered time derivative, one-sided at the ends.
        let dt_field: Vec<T> = {
            let (a, b, denom) = if k == 0 {
                (0usize, 1usize, grid.dt)
            } else if k == m {
                (m - 1, m, grid.dt)
            } else {
                (k - 1, k + 1, T::of(2.0) * grid.dt)
            };
            phi.levels[b]
                .bulk
                .iter()
                .zip(phi.levels[a].bulk.iter())
                .map(|(u, v)| (*u - *v) / denom)
                .collect()
        };
        for i in 0..mesh.n_bulk() {
            let wi = gk * mesh.bulk_weights[i];
            let xi = w.xi(i, t);
            let xib = w.xi_bar(i, t);
            let d = w.decay(i, t);
            let db = w.decay_bar(i, t);
            let g2 = grad[i][0] * grad[i][0] + grad[i][1] * grad[i][1];
            let v2 = level.bulk[i] * level.bulk[i];
            let dt2 = dt_field[i] * dt_field[i];
            terms[0] = terms[0] + wi * xi * d * g2;
            terms[1] = terms[1] + wi * xi * xi * xi * d * v2;
            terms[4] = terms[4] + wi * d / xi * dt2;
            terms_bar[0] = terms_bar[0] + wi * xib * db * g2;
            terms_bar[1] = terms_bar[1] + wi * xib * xib * xib * db * v2;
            terms_bar[4] = terms_bar[4] + wi * db / xib * dt2;
        }
        for (bi, bn) in mesh.boundary.iter().enumerate() {
            let wb = gk * bn.weight;
            let i = bn.bulk_index;
            let xi = w.xi(i, t);
            let xib = w.xi_bar(i, t);
            let d = w.decay(i, t);
            let db = w.decay_bar(i, t);
            let tg2 = tgrad[bi] * tgrad[bi];
            let v2 = level.boundary[bi] * level.boundary[bi];
            terms[2] = terms[2] + wb * xi * d * tg2;
            terms[3] = terms[3] + wb * xi * xi * xi * d * v2;
            terms_bar[2] = terms_bar[2] + wb * xib * db * tg2;
            terms_bar[3] = terms_bar[3] + wb * xib * xib * xib * db * v2;
        }
    }
    for i in 0..5 {
        terms[i] = terms[i] * pre[i];
        terms_bar[i] = terms_bar[i] * pre[i];
    }
    let total = terms.iter().cloned().fold(T::zero(), |a, b| a + b);
    let total_bar = terms_bar.iter().cloned().fold(T::zero(), |a, b| a + b);
    CarlemanTerms { terms, total, terms_one_sided: terms_bar, total_one_sided: total_bar }
}

/// Per-sample observability quotients and summary statistics.
#[derive(Debug, Clone)]
pub struct ObservabilityStats<T> {
    pub quotients: Vec<T>,
    pub carleman_quotients: Vec<T>,
    pub max: T,
    pub mean: T,
    pub carleman_max: T,
    pub carleman_mean: T,
    /// Log10-spaced histogram of the primary quotient.
    pub histogram: Vec<usize>,
    pub histogram_edges: Vec<T>,
    pub skipped: usize,
}

fn gaussian_pair<T: Scalar>(mesh: &Mesh<T>, rng: &mut ChaCha8Rng) -> PairField<T> {
    let draw = |rng: &mut ChaCha8Rng| {
        // Box-Muller from two uniforms.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        T::of((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
    };
    // Draw in the stacked state layout so the boundary values stay
    // identified with their bulk nodes.
    let state: Vec<T> = (0..mesh.n_bulk()).map(|_| draw(rng)).collect();
    PairField::from_state(mesh, &state)
}

/// Monte-Carlo estimate of the weighted observability quotient.
///
/// Each draw solves the adjoint cascade for a normalized Gaussian terminal
/// datum and forms the quotient of the weighted left-hand side over the
/// observed energy on the control region. Draws with an observed energy
/// below the floating-point floor are skipped and counted. The per-draw RNG
/// substream is keyed to (seed, index), so parallel and serial runs agree
/// bit for bit.
pub fn observability_sample<T: Scalar>(
    problem: &GameProblem<T>,
    w: &CarlemanWeights<T>,
    n_samples: usize,
    seed: u64,
    cascade_tol: T,
) -> Result<ObservabilityStats<T>> {
    let per_draw = |i: usize| -> Result<Option<(T, T)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut z_t = gaussian_pair(&problem.mesh, &mut rng);
        let nrm = pair_norm(&z_t, &problem.mesh);
        if nrm == T::zero() {
            return Ok(None);
        }
        z_t.scale(T::one() / nrm);
        let cas: CascadeSolution<T> = cascade_solve(problem, &z_t, cascade_tol, 400)?;
        let grid = &problem.grid;
        // Observed energy of z on the leader region.
        let mut denom = T::zero();
        for k in 0..=grid.m {
            let zb = &cas.z.states.levels[k].bulk;
            denom = denom + grid.weight(k) * problem.regions.omega.weighted_dot(zb, zb);
        }
        if denom < T::of(1e-280) {
            return Ok(None);
        }
        let mut numer = inner_product(cas.z.states.initial(), cas.z.states.initial(), &problem.mesh)?;
        for psi in cas.psi.iter() {
            for k in 0..=grid.m {
                let ww = grid.weight(k) * w.rho_inv_sq(grid.time(k));
                numer = numer + ww * inner_product(&psi.levels[k], &psi.levels[k], &problem.mesh)?;
            }
        }
        // Weighted-functional quotient: functional of Z plus functional of
        // the tracking combination over the weighted observed energy.
        let iz = carleman_functional(&cas.z.states, w, &problem.mesh, grid);
        let mut h = Trajectory::zeros(&problem.mesh, grid);
        for k in 0..=grid.m {
            let mut lvl = cas.psi[0].levels[k].clone();
            lvl.scale(problem.alpha[0]);
            lvl.axpy(problem.alpha[1], &cas.psi[1].levels[k]);
            h.levels[k] = lvl;
        }
        let ih = carleman_functional(&h, w, &problem.mesh, grid);
        let s = w.s_eff;
        let l = w.lambda;
        let pre = s.powi(7) * l.powi(8);
        let mut cdenom = T::zero();
        for k in 0..=grid.m {
            let t = grid.time(k);
            if t <= T::zero() || t >= grid.t_final {
                continue;
            }
            let zb = &cas.z.states.levels[k].bulk;
            for (&idx, &wt) in problem.regions.omega.indices.iter().zip(problem.regions.omega.weights.iter()) {
                let xi = w.xi(idx, t);
                cdenom = cdenom + grid.weight(k) * wt * w.decay(idx, t) * xi.powi(7) * zb[idx] * zb[idx];
            }
        }
        let cq = if cdenom * pre < T::of(1e-280) {
            return Ok(None);
        } else {
            (iz.total + ih.total) / (pre * cdenom)
        };
        Ok(Some((numer / denom, cq)))
    };

    let results: Vec<Result<Option<(T, T)>>> = (0..n_samples).into_par_iter().map(per_draw).collect();
    let mut quotients = Vec::new();
    let mut carleman_quotients = Vec::new();
    let mut skipped = 0usize;
    for r in results {
        match r? {
            Some((q, cq)) => {
                quotients.push(q);
                carleman_quotients.push(cq);
            }
            None => skipped += 1,
        }
    }
    let (max, mean) = summarize(&quotients);
    let (cmax, cmean) = summarize(&carleman_quotients);
    let (histogram, histogram_edges) = log_histogram(&quotients, 16);
    Ok(ObservabilityStats {
        quotients,
        carleman_quotients,
        max,
        mean,
        carleman_max: cmax,
        carleman_mean: cmean,
        histogram,
        histogram_edges,
        skipped,
    })
}

fn summarize<T: Scalar>(v: &[T]) -> (T, T) {
    if v.is_empty() {
        return (T::zero(), T::zero());
    }
    let max = v.iter().cloned().fold(v[0], T::max);
    let mean = v.iter().cloned().fold(T::zero(), |a, b| a + b) / T::of(v.len() as f64);
    (max, mean)
}

fn log_histogram<T: Scalar>(v: &[T], bins: usize) -> (Vec<usize>, Vec<T>) {
    if v.is_empty() {
        return (vec![0; bins], vec![T::zero(); bins + 1]);
    }
    let lo = v.iter().cloned().fold(v[0], T::min).max(T::of(1e-300)).log10();
    let hi = v.iter().cloned().fold(v[0], T::max).max(T::of(1e-300)).log10() + T::of(1e-12);
    let width = (hi - lo) / T::of(bins as f64);
    let mut counts = vec![0usize; bins];
    for &q in v {
        let pos = ((q.max(T::of(1e-300)).log10() - lo) / width).to_f64().unwrap_or(0.0) as usize;
        counts[pos.min(bins - 1)] += 1;
    }
    let edges = (0..=bins).map(|i| lo + width * T::of(i as f64)).collect();
    (counts, edges)
}
