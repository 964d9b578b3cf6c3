//! Assembly of the coupled bulk/boundary generator and theta-scheme
//! forward/backward integrators.
//!
//! The semidiscrete system is `M du/dt = S(t) u + M s(t)` on the stacked state
//! vector (one unknown per bulk node; boundary unknowns are identified with
//! the coincident bulk nodes and the boundary measure adds mass there). `S` is
//! the measure-weighted operator: diffusion enters as a symmetric
//! edge-conductance matrix with exactly vanishing column sums, so the discrete
//! bulk/boundary flux exchange telescopes and total mass is conserved when the
//! lower-order terms vanish.
//!
//! The backward solver is the exact weighted transpose of the forward step
//! recursion, not an independent discretization, so the discrete space-time
//! duality identity holds to rounding.

use crate::coeffexpr::{CoefficientTables, DiffusionTable};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, MeshKind, PairField, RegionMask};
use crate::linalg::{sym_eigen, DenseMatrix, Lu};
use crate::scalar::Scalar;

/// Uniform time grid with a theta-scheme parameter.
#[derive(Debug, Clone, Copy)]
pub struct TimeGrid<T> {
    pub t_final: T,
    pub m: usize,
    pub dt: T,
    pub theta: T,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(t_final: T, m: usize, theta: T) -> Result<Self> {
        if !(t_final > T::zero()) || m == 0 {
            return Err(Error::Config("time grid needs T > 0 and at least one step".into()));
        }
        let half = T::of(0.5);
        if theta != half && theta != T::one() {
            return Err(Error::Config("theta must be 1/2 or 1".into()));
        }
        Ok(Self { t_final, m, dt: t_final / T::of(m as f64), theta })
    }

    pub fn time(&self, k: usize) -> T {
        self.dt * T::of(k as f64)
    }

    /// Trapezoid weight of time level k.
    pub fn weight(&self, k: usize) -> T {
        if k == 0 || k == self.m {
            self.dt / T::of(2.0)
        } else {
            self.dt
        }
    }
}

/// Time-indexed sequence of pair fields.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub levels: Vec<PairField<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn initial(&self) -> &PairField<T> {
        &self.levels[0]
    }

    pub fn terminal(&self) -> &PairField<T> {
        self.levels.last().unwrap()
    }

    pub fn zeros(mesh: &Mesh<T>, grid: &TimeGrid<T>) -> Self {
        Self { levels: vec![PairField::zeros(mesh); grid.m + 1] }
    }
}

/// Sparse measure-weighted operator plus the stacked mass vector.
#[derive(Debug, Clone)]
pub struct BlockOperator<T> {
    /// Rows of (column, value) pairs for S.
    pub rows: Vec<Vec<(usize, T)>>,
    /// Stacked measure (bulk weight + boundary weight at coincident nodes).
    pub mass: Vec<T>,
}

impl<T: Scalar> BlockOperator<T> {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// y = S x.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n()];
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = T::zero();
            for &(j, v) in row {
                acc = acc + v * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// y = S^T x.
    pub fn apply_transpose(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n()];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                y[j] = y[j] + v * x[i];
            }
        }
        y
    }

    /// Generator action y = M^{-1} S x.
    pub fn apply_generator(&self, x: &[T]) -> Vec<T> {
        let mut y = self.apply(x);
        for (yi, m) in y.iter_mut().zip(self.mass.iter()) {
            *yi = *yi / *m;
        }
        y
    }

    /// Column sums of S; equals w^T K for the weighted generator and must
    /// vanish when all lower-order coefficients are zero.
    pub fn column_sums(&self) -> Vec<T> {
        let mut s = vec![T::zero(); self.n()];
        for row in &self.rows {
            for &(j, v) in row {
                s[j] = s[j] + v;
            }
        }
        s
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let n = self.n();
        let mut d = DenseMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                d[(i, j)] = d[(i, j)] + v;
            }
        }
        d
    }
}

struct SparseBuilder<T> {
    rows: Vec<std::collections::BTreeMap<usize, T>>,
}

impl<T: Scalar> SparseBuilder<T> {
    fn new(n: usize) -> Self {
        Self { rows: vec![std::collections::BTreeMap::new(); n] }
    }

    fn add(&mut self, i: usize, j: usize, v: T) {
        let slot = self.rows[i].entry(j).or_insert_with(T::zero);
        *slot = *slot + v;
    }

    /// Adds the symmetric edge stencil of a conductance g between nodes a, b.
    fn edge(&mut self, a: usize, b: usize, g: T) {
        self.add(a, a, -g);
        self.add(a, b, g);
        self.add(b, b, -g);
        self.add(b, a, g);
    }

    fn finish(self, mass: Vec<T>) -> BlockOperator<T> {
        let rows = self
            .rows
            .into_iter()
            .map(|r| r.into_iter().collect::<Vec<_>>())
            .collect();
        BlockOperator { rows, mass }
    }
}

/// Assembles the measure-weighted operator S at one time level.
pub fn assemble_generator<T: Scalar>(
    mesh: &Mesh<T>,
    coeffs: &CoefficientTables<T>,
    level: usize,
) -> Result<BlockOperator<T>> {
    let diff = match &coeffs.diff {
        DiffusionTable::ScalarField(c) => c,
        DiffusionTable::ConstTensor(_) => {
            return Err(Error::Config(
                "tensor diffusion is supported in coefficient tables only; assembly needs a scalar field"
                    .into(),
            ))
        }
    };
    let n = mesh.n_bulk();
    let mut b = SparseBuilder::new(n);
    match mesh.kind {
        MeshKind::Interval => assemble_interval(mesh, coeffs, diff, level, &mut b),
        MeshKind::Disk => assemble_disk(mesh, coeffs, diff, level, &mut b),
    }
    // Lower-order terms common to both geometries: potentials against the
    // respective measures.
    for i in 0..n {
        let a = coeffs.pot_a[level][i];
        if a != T::zero() {
            b.add(i, i, -mesh.bulk_weights[i] * a);
        }
    }
    for (j, bn) in mesh.boundary.iter().enumerate() {
        let pot = coeffs.pot_b[level][j];
        if pot != T::zero() {
            b.add(bn.bulk_index, bn.bulk_index, -bn.weight * pot);
        }
    }
    Ok(b.finish(mesh.mass_vector()))
}

fn assemble_interval<T: Scalar>(
    mesh: &Mesh<T>,
    coeffs: &CoefficientTables<T>,
    diff: &[T],
    level: usize,
    b: &mut SparseBuilder<T>,
) {
    let n = mesh.n_bulk();
    let h = mesh.h;
    let two = T::of(2.0);
    for i in 0..n - 1 {
        let c_e = (diff[i] + diff[i + 1]) / two;
        b.edge(i, i + 1, c_e / h);
    }
    // Centered drift in the interior, one-sided at the endpoints.
    for i in 0..n {
        let bx = coeffs.drift[level][i][0];
        if bx == T::zero() {
            continue;
        }
        let w = mesh.bulk_weights[i];
        if i == 0 {
            let g = w * bx / h;
            b.add(0, 1, -g);
            b.add(0, 0, g);
        } else if i == n - 1 {
            let g = w * bx / h;
            b.add(i, i, -g);
            b.add(i, i - 1, g);
        } else {
            let g = w * bx / (two * h);
            b.add(i, i + 1, -g);
            b.add(i, i - 1, g);
        }
    }
}

fn assemble_disk<T: Scalar>(
    mesh: &Mesh<T>,
    coeffs: &CoefficientTables<T>,
    diff: &[T],
    level: usize,
    b: &mut SparseBuilder<T>,
) {
    let (n_r, n_t) = mesh.disk_dims.unwrap();
    let dr = mesh.h;
    let dth = T::of(2.0) * T::PI() / T::of(n_t as f64);
    let two = T::of(2.0);
    let idx = |i: usize, j: usize| 1 + (i - 1) * n_t + (j % n_t);
    // Radial edges, including center spokes.
    for j in 0..n_t {
        let c_e = (diff[0] + diff[idx(1, j)]) / two;
        b.edge(0, idx(1, j), c_e * dth / two);
        for i in 1..n_r {
            let a = idx(i, j);
            let c = idx(i + 1, j);
            let c_e = (diff[a] + diff[c]) / two;
            let r_half = dr * (T::of(i as f64) + T::of(0.5));
            b.edge(a, c, c_e * r_half * dth / dr);
        }
    }
    // Angular edges; the outer ring's half cell has half the radial extent.
    for i in 1..=n_r {
        let r = dr * T::of(i as f64);
        let len = if i < n_r { dr } else { dr / two };
        for j in 0..n_t {
            let a = idx(i, j);
            let c = idx(i, j + 1);
            let c_e = (diff[a] + diff[c]) / two;
            b.edge(a, c, c_e * len / (r * dth));
        }
    }
    // Surface diffusion along the boundary loop.
    let hg = mesh.h_gamma.unwrap();
    for j in 0..n_t {
        let a = mesh.boundary[j].bulk_index;
        let c = mesh.boundary[(j + 1) % n_t].bulk_index;
        let c_e = (coeffs.diff_gamma[j] + coeffs.diff_gamma[(j + 1) % n_t]) / two;
        b.edge(a, c, c_e / hg);
    }
    // Bulk drift at interior nodes, centered stencils in polar form.
    for i in 1..n_r {
        let r = dr * T::of(i as f64);
        for j in 0..n_t {
            let node = idx(i, j);
            let [bx, by] = coeffs.drift[level][node];
            if bx == T::zero() && by == T::zero() {
                continue;
            }
            let w = mesh.bulk_weights[node];
            let th = mesh.coords[node].th;
            let br = bx * th.cos() + by * th.sin();
            let bt = -bx * th.sin() + by * th.cos();
            // -w * br * du/dr
            let g = w * br / (two * dr);
            let inner = if i == 1 { 0 } else { idx(i - 1, j) };
            b.add(node, idx(i + 1, j), -g);
            b.add(node, inner, g);
            // -w * bt * du/dth / r
            let g = w * bt / (two * r * dth);
            b.add(node, idx(i, j + 1), -g);
            b.add(node, idx(i, j + n_t - 1), g);
        }
    }
    // Bulk drift at the center via ring-1 averages of the Cartesian gradient.
    let [bx, by] = coeffs.drift[level][0];
    if bx != T::zero() || by != T::zero() {
        let w = mesh.bulk_weights[0];
        let scale = two / (T::of(n_t as f64) * dr);
        for j in 0..n_t {
            let th = mesh.coords[idx(1, j)].th;
            let coef = scale * (bx * th.cos() + by * th.sin());
            b.add(0, idx(1, j), -w * coef);
        }
    }
    // Boundary tangential drift, centered along the loop.
    for j in 0..n_t {
        let bt = coeffs.drift_gamma[level][j];
        if bt == T::zero() {
            continue;
        }
        let node = mesh.boundary[j].bulk_index;
        let wg = mesh.boundary[j].weight;
        let g = wg * bt / (two * hg);
        b.add(node, mesh.boundary[(j + 1) % n_t].bulk_index, -g);
        b.add(node, mesh.boundary[(j + n_t - 1) % n_t].bulk_index, g);
    }
}

/// Assembled and factored theta-scheme step matrices for one coefficient set.
pub struct StepMatrices<T> {
    pub mesh: Mesh<T>,
    pub grid: TimeGrid<T>,
    /// Operators S_k; a single entry when the coefficients are time-invariant.
    ops: Vec<BlockOperator<T>>,
    /// Factorizations of A_k = M - theta dt S_k, indexed like `ops`.
    factors: Vec<Lu<T>>,
    pub mass: Vec<T>,
    time_invariant: bool,
}

impl<T: Scalar> StepMatrices<T> {
    pub fn build(mesh: &Mesh<T>, coeffs: &CoefficientTables<T>, grid: &TimeGrid<T>) -> Result<Self> {
        let n_levels = if coeffs.time_invariant { 1 } else { grid.m + 1 };
        let mut ops = Vec::with_capacity(n_levels);
        let mut factors = Vec::with_capacity(n_levels);
        let mass = mesh.mass_vector();
        let n = mesh.n_bulk();
        for level in 0..n_levels {
            let op = assemble_generator(mesh, coeffs, level)?;
            let mut a = DenseMatrix::zeros(n, n);
            for i in 0..n {
                a[(i, i)] = mass[i];
            }
            let factor = -grid.theta * grid.dt;
            for (i, row) in op.rows.iter().enumerate() {
                for &(j, v) in row {
                    a[(i, j)] = a[(i, j)] + factor * v;
                }
            }
            let lu = Lu::factor(&a).map_err(|_| Error::SingularStepMatrix { level })?;
            ops.push(op);
            factors.push(lu);
        }
        Ok(Self {
            mesh: mesh.clone(),
            grid: *grid,
            ops,
            factors,
            mass,
            time_invariant: coeffs.time_invariant,
        })
    }

    fn level_index(&self, k: usize) -> usize {
        if self.time_invariant {
            0
        } else {
            k
        }
    }

    pub fn op(&self, k: usize) -> &BlockOperator<T> {
        &self.ops[self.level_index(k)]
    }

    fn factor(&self, k: usize) -> &Lu<T> {
        &self.factors[self.level_index(k)]
    }

    pub fn n(&self) -> usize {
        self.mass.len()
    }

    /// y = B_k x with B_k = M + (1 - theta) dt S_k.
    fn apply_explicit(&self, k: usize, x: &[T]) -> Vec<T> {
        let mut y = self.op(k).apply(x);
        let f = (T::one() - self.grid.theta) * self.grid.dt;
        for i in 0..y.len() {
            y[i] = self.mass[i] * x[i] + f * y[i];
        }
        y
    }

    /// y = B_k^T x.
    fn apply_explicit_transpose(&self, k: usize, x: &[T]) -> Vec<T> {
        let mut y = self.op(k).apply_transpose(x);
        let f = (T::one() - self.grid.theta) * self.grid.dt;
        for i in 0..y.len() {
            y[i] = self.mass[i] * x[i] + f * y[i];
        }
        y
    }

    /// Forward theta-scheme solve. `sources`, when given, holds one stacked
    /// source vector per time level; a source value at a boundary-coincident
    /// node acts against the full stacked measure, so sources must be either
    /// interior-supported or trace-identified pairs.
    pub fn forward(&self, y0: &PairField<T>, sources: Option<&[Vec<T>]>) -> Result<Trajectory<T>> {
        let n = self.n();
        let m = self.grid.m;
        if let Some(s) = sources {
            if s.len() != m + 1 || s.iter().any(|v| v.len() != n) {
                return Err(Error::Contract("source array does not match grid".into()));
            }
        }
        let mut levels = Vec::with_capacity(m + 1);
        let mut u = y0.to_state(&self.mesh);
        levels.push(PairField::from_state(&self.mesh, &u));
        let theta = self.grid.theta;
        let dt = self.grid.dt;
        for k in 0..m {
            let mut rhs = self.apply_explicit(k, &u);
            if let Some(s) = sources {
                for i in 0..n {
                    let blended = theta * s[k + 1][i] + (T::one() - theta) * s[k][i];
                    rhs[i] = rhs[i] + dt * self.mass[i] * blended;
                }
            }
            u = self.factor(k + 1).solve(&rhs);
            if !u.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteIterate(format!("forward solve at step {}", k + 1)));
            }
            levels.push(PairField::from_state(&self.mesh, &u));
        }
        Ok(Trajectory { levels })
    }

    /// One theta-scheme step from the stacked state at level `k` to level
    /// `k + 1`, with the source blended from its values at the two levels.
    /// This is the inner update of [`Self::forward`], exposed so per-step
    /// fixed-point iterations on a state-dependent source can reuse the
    /// factored step matrices.
    pub fn step_once(&self, k: usize, u: &[T], s_prev: &[T], s_next: &[T]) -> Result<Vec<T>> {
        let n = self.n();
        if u.len() != n || s_prev.len() != n || s_next.len() != n {
            return Err(Error::Contract("step input does not match state size".into()));
        }
        let theta = self.grid.theta;
        let dt = self.grid.dt;
        let mut rhs = self.apply_explicit(k, u);
        for i in 0..n {
            let blended = theta * s_next[i] + (T::one() - theta) * s_prev[i];
            rhs[i] = rhs[i] + dt * self.mass[i] * blended;
        }
        let next = self.factor(k + 1).solve(&rhs);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteIterate(format!("single step at level {}", k + 1)));
        }
        Ok(next)
    }

    /// Backward solve, the exact weighted transpose of [`Self::forward`].
    ///
    /// With trapezoid time weights `g_k` and the stacked measure `m`, the
    /// returned fields satisfy, for every forward input `(u0, s)` and every
    /// backward input `(Z_T, g)`, to rounding:
    ///
    /// ```text
    /// <u_M, Z_T>_m + sum_k g_k <u_k, g_k>_m
    ///   = <u_0, z_0>_m + sum_k g_k <s_k, zhat_k>_m
    /// ```
    ///
    /// `states` is the adjoint trajectory (level M equals `Z_T`); `observed`
    /// holds the fields paired against sources, which is what control
    /// extraction must use.
    pub fn backward(&self, z_t: &PairField<T>, sources: Option<&[Vec<T>]>) -> Result<BackwardSolution<T>> {
        let n = self.n();
        let m = self.grid.m;
        if let Some(s) = sources {
            if s.len() != m + 1 || s.iter().any(|v| v.len() != n) {
                return Err(Error::Contract("source array does not match grid".into()));
            }
        }
        let theta = self.grid.theta;
        let dt = self.grid.dt;
        let src = |k: usize, i: usize| sources.map_or(T::zero(), |s| s[k][i]);

        // Multipliers lambda_k, k = M..1, via transposed step solves:
        //   A_M^T lam_M = M (Z_T + g_M g_M)
        //   A_j^T lam_j = B_j^T lam_{j+1} + g_j M g_j
        let mut lambda = vec![Vec::new(); m + 1];
        let zt_state = z_t.to_state(&self.mesh);
        let gm = self.grid.weight(m);
        let mut rhs: Vec<T> = (0..n)
            .map(|i| self.mass[i] * (zt_state[i] + gm * src(m, i)))
            .collect();
        lambda[m] = self.factor(m).solve_transpose(&rhs);
        for j in (1..m).rev() {
            rhs = self.apply_explicit_transpose(j, &lambda[j + 1]);
            let gj = self.grid.weight(j);
            for i in 0..n {
                rhs[i] = rhs[i] + gj * self.mass[i] * src(j, i);
            }
            lambda[j] = self.factor(j).solve_transpose(&rhs);
        }

        // Reported adjoint states: z_M = Z_T; z_j = M^{-1} B_j^T lam_{j+1} + g_j g_j.
        let mut states = Vec::with_capacity(m + 1);
        for j in 0..m {
            let bt = self.apply_explicit_transpose(j, &lambda[j + 1]);
            let gj = self.grid.weight(j);
            let state: Vec<T> = (0..n).map(|i| bt[i] / self.mass[i] + gj * src(j, i)).collect();
            states.push(PairField::from_state(&self.mesh, &state));
        }
        states.push(PairField::from_state(&self.mesh, &zt_state));

        // Observed fields: zhat_j = (dt / g_j) (theta lam_j [j>=1]
        //                                     + (1-theta) lam_{j+1} [j<=M-1]).
        let mut observed = Vec::with_capacity(m + 1);
        for j in 0..=m {
            let gj = self.grid.weight(j);
            let mut v = vec![T::zero(); n];
            if j >= 1 {
                for i in 0..n {
                    v[i] = v[i] + theta * lambda[j][i];
                }
            }
            if j <= m - 1 {
                for i in 0..n {
                    v[i] = v[i] + (T::one() - theta) * lambda[j + 1][i];
                }
            }
            for vi in v.iter_mut() {
                *vi = *vi * dt / gj;
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteIterate(format!("backward solve at level {j}")));
            }
            observed.push(PairField::from_state(&self.mesh, &v));
        }

        Ok(BackwardSolution { states: Trajectory { levels: states }, observed })
    }
}

/// Output of the backward (adjoint) solver.
#[derive(Debug, Clone)]
pub struct BackwardSolution<T> {
    /// Adjoint trajectory; level M equals the supplied terminal datum.
    pub states: Trajectory<T>,
    /// Fields paired against forward sources in the duality identity.
    pub observed: Vec<PairField<T>>,
}

/// Space-time field stored per level as a stacked state vector.
pub type SpaceTime<T> = Vec<Vec<T>>;

pub fn zero_space_time<T: Scalar>(n: usize, grid: &TimeGrid<T>) -> SpaceTime<T> {
    vec![vec![T::zero(); n]; grid.m + 1]
}

/// Trapezoid-in-time, region-restricted bulk pairing of two space-time fields.
pub fn st_region_dot<T: Scalar>(
    grid: &TimeGrid<T>,
    mask: &RegionMask<T>,
    u: &SpaceTime<T>,
    v: &SpaceTime<T>,
) -> T {
    let mut acc = T::zero();
    for k in 0..=grid.m {
        acc = acc + grid.weight(k) * mask.weighted_dot(&u[k], &v[k]);
    }
    acc
}

/// Residual of the discrete space-time duality identity for the coupled
/// leader system: forward state Y against the adjoint cascade (Z, Psi^i).
///
/// Evaluates `|<Y(T), Z_T> - <Y(0), Z(0)> - I_w(f, zhat)
///             + sum_i alpha_i I_wd(y_id, psi^i)|`,
/// where the space-time pairings use trapezoid time weights and bulk
/// quadrature on the respective regions.
#[allow(clippy::too_many_arguments)]
pub fn duality_residual<T: Scalar>(
    mesh: &Mesh<T>,
    grid: &TimeGrid<T>,
    omega: &RegionMask<T>,
    omega_d: &RegionMask<T>,
    alphas: [T; 2],
    y: &Trajectory<T>,
    z_t: &PairField<T>,
    z0: &PairField<T>,
    z_observed: &[PairField<T>],
    psi: [&Trajectory<T>; 2],
    f: &SpaceTime<T>,
    targets: [&SpaceTime<T>; 2],
) -> Result<T> {
    let terminal = crate::geometry::inner_product(y.terminal(), z_t, mesh)?;
    let initial = crate::geometry::inner_product(y.initial(), z0, mesh)?;
    let mut leader = T::zero();
    for k in 0..=grid.m {
        leader = leader + grid.weight(k) * omega.weighted_dot(&f[k], &z_observed[k].bulk);
    }
    let mut tracking = T::zero();
    for (i, psi_i) in psi.iter().enumerate() {
        let mut acc = T::zero();
        for k in 0..=grid.m {
            acc = acc + grid.weight(k) * omega_d.weighted_dot(&targets[i][k], &psi_i.levels[k].bulk);
        }
        tracking = tracking + alphas[i] * acc;
    }
    Ok((terminal - initial - leader + tracking).abs())
}

/// Dense semidiscrete-exponential oracle for symmetric problems.
///
/// Computes `exp(t K) y0` with `K = M^{-1} S` through the eigendecomposition
/// of the symmetrized generator `M^{-1/2} S M^{-1/2}`. Guarded to small
/// problems and to drift-free coefficients (the symmetrization requires S
/// symmetric).
pub fn dense_exponential<T: Scalar>(
    mesh: &Mesh<T>,
    coeffs: &CoefficientTables<T>,
    t: T,
    y0: &PairField<T>,
) -> Result<PairField<T>> {
    let n = mesh.n_bulk();
    if n > 64 {
        return Err(Error::Contract(format!(
            "dense exponential oracle is limited to 64 unknowns, got {n}"
        )));
    }
    if coeffs.drift.iter().flatten().any(|d| d[0] != T::zero() || d[1] != T::zero())
        || coeffs.drift_gamma.iter().flatten().any(|v| *v != T::zero())
    {
        return Err(Error::Contract("dense exponential oracle requires zero drift".into()));
    }
    let op = assemble_generator(mesh, coeffs, 0)?;
    let mass = mesh.mass_vector();
    let sqrt_m: Vec<T> = mass.iter().map(|m| m.sqrt()).collect();
    let mut sym = op.to_dense();
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] = sym[(i, j)] / (sqrt_m[i] * sqrt_m[j]);
        }
    }
    let (vals, vecs) = sym_eigen(&sym);
    let u0 = y0.to_state(mesh);
    let w0: Vec<T> = (0..n).map(|i| sqrt_m[i] * u0[i]).collect();
    let coeffs_v = vecs.matvec_transpose(&w0);
    let propagated: Vec<T> = coeffs_v
        .iter()
        .zip(vals.iter())
        .map(|(c, l)| *c * (*l * t).exp())
        .collect();
    let wt = vecs.matvec(&propagated);
    let ut: Vec<T> = (0..n).map(|i| wt[i] / sqrt_m[i]).collect();
    Ok(PairField::from_state(mesh, &ut))
}

/// Centered-difference bulk gradient of a nodal field.
pub fn bulk_gradient<T: Scalar>(mesh: &Mesh<T>, field: &[T]) -> Vec<[T; 2]> {
    let n = mesh.n_bulk();
    let two = T::of(2.0);
    let mut g = vec![[T::zero(); 2]; n];
    match mesh.kind {
        MeshKind::Interval => {
            let h = mesh.h;
            g[0][0] = (field[1] - field[0]) / h;
            g[n - 1][0] = (field[n - 1] - field[n - 2]) / h;
            for i in 1..n - 1 {
                g[i][0] = (field[i + 1] - field[i - 1]) / (two * h);
            }
        }
        MeshKind::Disk => {
            let (n_r, n_t) = mesh.disk_dims.unwrap();
            let dr = mesh.h;
            let dth = two * T::PI() / T::of(n_t as f64);
            let idx = |i: usize, j: usize| 1 + (i - 1) * n_t + (j % n_t);
            let scale = two / (T::of(n_t as f64) * dr);
            for j in 0..n_t {
                let th = mesh.coords[idx(1, j)].th;
                g[0][0] = g[0][0] + scale * th.cos() * field[idx(1, j)];
                g[0][1] = g[0][1] + scale * th.sin() * field[idx(1, j)];
            }
            for i in 1..=n_r {
                let r = dr * T::of(i as f64);
                for j in 0..n_t {
                    let node = idx(i, j);
                    let dr_val = if i == 1 {
                        (field[idx(2, j)] - field[0]) / (two * dr)
                    } else if i == n_r {
                        (field[node] - field[idx(n_r - 1, j)]) / dr
                    } else {
                        (field[idx(i + 1, j)] - field[idx(i - 1, j)]) / (two * dr)
                    };
                    let dt_val = (field[idx(i, j + 1)] - field[idx(i, j + n_t - 1)]) / (two * r * dth);
                    let th = mesh.coords[node].th;
                    g[node][0] = dr_val * th.cos() - dt_val * th.sin();
                    g[node][1] = dr_val * th.sin() + dt_val * th.cos();
                }
            }
        }
    }
    g
}

/// Tangential gradient of a boundary nodal field (zero on the interval).
pub fn tangential_gradient<T: Scalar>(mesh: &Mesh<T>, boundary: &[T]) -> Vec<T> {
    let nb = mesh.n_boundary();
    let mut g = vec![T::zero(); nb];
    if mesh.kind == MeshKind::Disk {
        let hg = mesh.h_gamma.unwrap();
        let two = T::of(2.0);
        for j in 0..nb {
            g[j] = (boundary[(j + 1) % nb] - boundary[(j + nb - 1) % nb]) / (two * hg);
        }
    }
    g
}
