//! Meshes for the bulk domain and its boundary manifold, discrete measures,
//! paired bulk/boundary fields, and control regions.
//!
//! Two geometries are supported: a 1D interval (boundary = two endpoints) and
//! a 2D disk on a polar tensor grid (boundary = outer ring, where tangential
//! operators are nontrivial). Boundary unknowns are identified with the
//! geometrically coincident bulk nodes; the stacked state vector therefore has
//! one entry per bulk node, and the boundary measure adds extra weight at the
//! coincident indices.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;

/// Which geometry a mesh discretizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MeshKind {
    Interval,
    Disk,
}

/// A node on the boundary loop.
#[derive(Debug, Clone, Serialize)]
pub struct BoundaryNode<T> {
    /// Index of the coincident bulk node.
    pub bulk_index: usize,
    /// Outward unit normal.
    pub normal: [T; 2],
    /// Quadrature weight for the surface measure.
    pub weight: T,
}

/// Node coordinates. Cartesian always; polar filled on the disk.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
    pub r: T,
    pub th: T,
}

#[derive(Debug, Clone)]
pub struct Mesh<T> {
    pub kind: MeshKind,
    pub coords: Vec<Point<T>>,
    pub bulk_weights: Vec<T>,
    pub boundary: Vec<BoundaryNode<T>>,
    /// Bulk grid spacing (radial spacing on the disk).
    pub h: T,
    /// Boundary arc-length spacing (disk only).
    pub h_gamma: Option<T>,
    /// Interval length or disk radius.
    pub extent: T,
    /// Disk structure: (radial count, angular count).
    pub disk_dims: Option<(usize, usize)>,
    /// For each bulk node, the boundary-node index it coincides with, if any.
    pub boundary_of_bulk: Vec<Option<usize>>,
}

impl<T: Scalar> Mesh<T> {
    pub fn n_bulk(&self) -> usize {
        self.coords.len()
    }

    pub fn n_boundary(&self) -> usize {
        self.boundary.len()
    }

    pub fn is_boundary_bulk(&self, i: usize) -> bool {
        self.boundary_of_bulk[i].is_some()
    }

    /// Stacked measure: bulk weight plus boundary weight at coincident nodes.
    pub fn mass_vector(&self) -> Vec<T> {
        let mut m = self.bulk_weights.clone();
        for b in &self.boundary {
            m[b.bulk_index] = m[b.bulk_index] + b.weight;
        }
        m
    }

    /// Matrix of the discrete tangential Laplacian on the boundary loop.
    ///
    /// Interval: the boundary is two isolated points, so the operator is zero.
    /// Disk: circular second difference in arc length.
    pub fn boundary_laplacian(&self) -> DenseMatrix<T> {
        let nb = self.n_boundary();
        let mut m = DenseMatrix::zeros(nb, nb);
        if self.kind == MeshKind::Disk {
            let hg = self.h_gamma.unwrap();
            let inv = T::one() / (hg * hg);
            for j in 0..nb {
                let prev = (j + nb - 1) % nb;
                let next = (j + 1) % nb;
                m[(j, j)] = -T::of(2.0) * inv;
                m[(j, prev)] = inv;
                m[(j, next)] = inv;
            }
        }
        m
    }

    /// JSON summary (node coordinates, weights, boundary data) for debugging.
    pub fn summary_json(&self) -> serde_json::Value {
        let coords: Vec<[f64; 2]> = self
            .coords
            .iter()
            .map(|p| [p.x.to_f64().unwrap(), p.y.to_f64().unwrap()])
            .collect();
        let weights: Vec<f64> = self.bulk_weights.iter().map(|w| w.to_f64().unwrap()).collect();
        let boundary: Vec<serde_json::Value> = self
            .boundary
            .iter()
            .map(|b| {
                serde_json::json!({
                    "bulk_index": b.bulk_index,
                    "normal": [b.normal[0].to_f64().unwrap(), b.normal[1].to_f64().unwrap()],
                    "weight": b.weight.to_f64().unwrap(),
                })
            })
            .collect();
        serde_json::json!({
            "kind": match self.kind { MeshKind::Interval => "interval", MeshKind::Disk => "disk" },
            "n_bulk": self.n_bulk(),
            "coords": coords,
            "bulk_weights": weights,
            "boundary": boundary,
        })
    }
}

/// Uniform grid on (0, length) with trapezoid weights; boundary nodes are the
/// two endpoints with outward normals -1 and +1 and unit surface weights.
pub fn build_interval_mesh<T: Scalar>(n: usize, length: T) -> Result<Mesh<T>> {
    if n < 4 {
        return Err(Error::Config(format!("interval mesh needs n >= 4 nodes, got {n}")));
    }
    if !(length > T::zero()) {
        return Err(Error::Config("interval length must be positive".into()));
    }
    let h = length / T::of((n - 1) as f64);
    let mut coords = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let x = h * T::of(i as f64);
        coords.push(Point { x, y: T::zero(), r: T::zero(), th: T::zero() });
        let w = if i == 0 || i == n - 1 { h / T::of(2.0) } else { h };
        weights.push(w);
    }
    let boundary = vec![
        BoundaryNode { bulk_index: 0, normal: [-T::one(), T::zero()], weight: T::one() },
        BoundaryNode { bulk_index: n - 1, normal: [T::one(), T::zero()], weight: T::one() },
    ];
    let mut boundary_of_bulk = vec![None; n];
    boundary_of_bulk[0] = Some(0);
    boundary_of_bulk[n - 1] = Some(1);
    Ok(Mesh {
        kind: MeshKind::Interval,
        coords,
        bulk_weights: weights,
        boundary,
        h,
        h_gamma: None,
        extent: length,
        disk_dims: None,
        boundary_of_bulk,
    })
}

/// Polar tensor grid on the disk of the given radius.
///
/// Node 0 is the center; ring `i` (1..=n_r) holds `n_t` nodes at radius
/// `i * dr`; the outer ring is the boundary loop. Cell areas are exact annulus
/// areas, so the bulk weights sum to the disk area to rounding.
pub fn build_disk_mesh<T: Scalar>(n_r: usize, n_t: usize, radius: T) -> Result<Mesh<T>> {
    if n_r < 3 {
        return Err(Error::Config(format!("disk mesh needs n_r >= 3, got {n_r}")));
    }
    if n_t < 8 {
        return Err(Error::Config(format!("disk mesh needs n_t >= 8, got {n_t}")));
    }
    if n_t % 2 != 0 {
        return Err(Error::Config(format!(
            "disk mesh needs an even angular count for symmetric stencils, got {n_t}"
        )));
    }
    if !(radius > T::zero()) {
        return Err(Error::Config("disk radius must be positive".into()));
    }
    let dr = radius / T::of(n_r as f64);
    let dth = T::of(2.0) * T::PI() / T::of(n_t as f64);
    let n_bulk = 1 + n_r * n_t;
    let mut coords = Vec::with_capacity(n_bulk);
    let mut weights = Vec::with_capacity(n_bulk);
    coords.push(Point { x: T::zero(), y: T::zero(), r: T::zero(), th: T::zero() });
    // Center cell: disk of radius dr/2.
    weights.push(T::PI() * dr * dr / T::of(4.0));
    for i in 1..=n_r {
        let r = dr * T::of(i as f64);
        let w = if i < n_r {
            // Annulus [r - dr/2, r + dr/2] split over n_t nodes.
            r * dr * dth
        } else {
            // Outer half-annulus [R - dr/2, R].
            (radius - dr / T::of(4.0)) * (dr / T::of(2.0)) * dth
        };
        for j in 0..n_t {
            let th = dth * T::of(j as f64);
            coords.push(Point { x: r * th.cos(), y: r * th.sin(), r, th });
            weights.push(w);
        }
    }
    let h_gamma = radius * dth;
    let mut boundary = Vec::with_capacity(n_t);
    let mut boundary_of_bulk = vec![None; n_bulk];
    for j in 0..n_t {
        let idx = 1 + (n_r - 1) * n_t + j;
        let p = coords[idx];
        boundary.push(BoundaryNode {
            bulk_index: idx,
            normal: [p.th.cos(), p.th.sin()],
            weight: h_gamma,
        });
        boundary_of_bulk[idx] = Some(j);
    }
    Ok(Mesh {
        kind: MeshKind::Disk,
        coords,
        bulk_weights: weights,
        boundary,
        h: dr,
        h_gamma: Some(h_gamma),
        extent: radius,
        disk_dims: Some((n_r, n_t)),
        boundary_of_bulk,
    })
}

/// A bulk/boundary pair of nodal value vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairField<T> {
    pub bulk: Vec<T>,
    pub boundary: Vec<T>,
}

impl<T: Scalar> PairField<T> {
    pub fn zeros(mesh: &Mesh<T>) -> Self {
        Self { bulk: vec![T::zero(); mesh.n_bulk()], boundary: vec![T::zero(); mesh.n_boundary()] }
    }

    pub fn conforms(&self, mesh: &Mesh<T>) -> bool {
        self.bulk.len() == mesh.n_bulk() && self.boundary.len() == mesh.n_boundary()
    }

    /// Collapse to the stacked state vector (boundary values override the
    /// coincident bulk slots).
    pub fn to_state(&self, mesh: &Mesh<T>) -> Vec<T> {
        let mut s = self.bulk.clone();
        for (b, &v) in mesh.boundary.iter().zip(self.boundary.iter()) {
            s[b.bulk_index] = v;
        }
        s
    }

    /// Rebuild the pair from a stacked state vector.
    pub fn from_state(mesh: &Mesh<T>, state: &[T]) -> Self {
        let bulk = state.to_vec();
        let boundary = mesh.boundary.iter().map(|b| state[b.bulk_index]).collect();
        Self { bulk, boundary }
    }

    pub fn axpy(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.bulk.iter_mut().zip(other.bulk.iter()) {
            *a = *a + alpha * *b;
        }
        for (a, b) in self.boundary.iter_mut().zip(other.boundary.iter()) {
            *a = *a + alpha * *b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for a in self.bulk.iter_mut() {
            *a = *a * alpha;
        }
        for a in self.boundary.iter_mut() {
            *a = *a * alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bulk.iter().chain(self.boundary.iter()).all(|v| v.is_finite())
    }
}

/// Discrete inner product on the product space L2(bulk) x L2(boundary).
pub fn inner_product<T: Scalar>(u: &PairField<T>, v: &PairField<T>, mesh: &Mesh<T>) -> Result<T> {
    if !u.conforms(mesh) || !v.conforms(mesh) {
        return Err(Error::Contract(format!(
            "field shapes ({}, {}) and ({}, {}) do not match mesh ({}, {})",
            u.bulk.len(),
            u.boundary.len(),
            v.bulk.len(),
            v.boundary.len(),
            mesh.n_bulk(),
            mesh.n_boundary()
        )));
    }
    let mut acc = T::zero();
    for i in 0..mesh.n_bulk() {
        acc = acc + mesh.bulk_weights[i] * u.bulk[i] * v.bulk[i];
    }
    for (j, b) in mesh.boundary.iter().enumerate() {
        acc = acc + b.weight * u.boundary[j] * v.boundary[j];
    }
    Ok(acc)
}

pub fn pair_norm<T: Scalar>(u: &PairField<T>, mesh: &Mesh<T>) -> T {
    inner_product(u, u, mesh).map(|v| v.sqrt()).unwrap_or_else(|_| T::nan())
}

/// Geometric description of a control region, as given in configuration.
#[derive(Debug, Clone, Serialize)]
pub enum RegionSpec {
    /// Closed coordinate interval `[lo, hi]` on the 1D mesh.
    Interval { lo: f64, hi: f64 },
    /// Closed annulus sector on the disk. The angular range may wrap; equal
    /// bounds 0 and 2*pi mean the full circle.
    Annulus { r_lo: f64, r_hi: f64, th_lo: f64, th_hi: f64 },
}

impl RegionSpec {
    pub fn contains<T: Scalar>(&self, p: &Point<T>) -> bool {
        let tol = 1e-12;
        match *self {
            RegionSpec::Interval { lo, hi } => {
                let x = p.x.to_f64().unwrap();
                x >= lo - tol && x <= hi + tol
            }
            RegionSpec::Annulus { r_lo, r_hi, th_lo, th_hi } => {
                let r = p.r.to_f64().unwrap();
                if r < r_lo - tol || r > r_hi + tol {
                    return false;
                }
                let span = th_hi - th_lo;
                if span >= 2.0 * std::f64::consts::PI - tol {
                    return true;
                }
                let th = p.th.to_f64().unwrap();
                let mut d = (th - th_lo) % (2.0 * std::f64::consts::PI);
                if d < 0.0 {
                    d += 2.0 * std::f64::consts::PI;
                }
                d <= span + tol
            }
        }
    }
}

/// A node-index mask with the matching bulk quadrature weights.
#[derive(Debug, Clone)]
pub struct RegionMask<T> {
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Scalar> RegionMask<T> {
    pub fn build(mesh: &Mesh<T>, spec: &RegionSpec) -> Self {
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for (i, p) in mesh.coords.iter().enumerate() {
            if spec.contains(p) {
                indices.push(i);
                weights.push(mesh.bulk_weights[i]);
            }
        }
        Self { indices, weights }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Projects a bulk nodal vector onto the region (zero outside).
    pub fn apply(&self, field: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); field.len()];
        for &i in &self.indices {
            out[i] = field[i];
        }
        out
    }

    /// Weighted dot product of two bulk vectors restricted to the region.
    pub fn weighted_dot(&self, u: &[T], v: &[T]) -> T {
        self.indices
            .iter()
            .zip(self.weights.iter())
            .map(|(&i, &w)| w * u[i] * v[i])
            .sum()
    }

    pub fn measure(&self) -> T {
        self.weights.iter().copied().sum()
    }

    pub fn is_subset_of(&self, other: &RegionMask<T>) -> bool {
        let set: std::collections::HashSet<usize> = other.indices.iter().copied().collect();
        self.indices.iter().all(|i| set.contains(i))
    }

    pub fn intersects(&self, other: &RegionMask<T>) -> bool {
        let set: std::collections::HashSet<usize> = other.indices.iter().copied().collect();
        self.indices.iter().any(|i| set.contains(i))
    }
}

/// The five control/observation regions of the game.
#[derive(Debug, Clone)]
pub struct RegionSet<T> {
    /// Leader control region.
    pub omega: RegionMask<T>,
    /// Follower control regions.
    pub omega1: RegionMask<T>,
    pub omega2: RegionMask<T>,
    /// Shared follower observation region.
    pub omega_d: RegionMask<T>,
    /// Interior region hosting the landscape function's critical point.
    pub omega_prime: RegionMask<T>,
}

impl<T: Scalar> RegionSet<T> {
    /// Builds the masks and enforces the geometric compatibility conditions:
    /// the interior region must be a nonempty subset of the intersection of
    /// the leader region with the observation region, every mask must be
    /// nonempty, and no control/observation region may touch the boundary.
    pub fn build(
        mesh: &Mesh<T>,
        omega: &RegionSpec,
        omega1: &RegionSpec,
        omega2: &RegionSpec,
        omega_d: &RegionSpec,
        omega_prime: &RegionSpec,
    ) -> Result<Self> {
        let omega = RegionMask::build(mesh, omega);
        let omega1 = RegionMask::build(mesh, omega1);
        let omega2 = RegionMask::build(mesh, omega2);
        let omega_d = RegionMask::build(mesh, omega_d);
        let omega_prime = RegionMask::build(mesh, omega_prime);
        for (name, mask) in [
            ("omega", &omega),
            ("omega1", &omega1),
            ("omega2", &omega2),
            ("omega_d", &omega_d),
            ("omega_prime", &omega_prime),
        ] {
            if mask.is_empty() {
                return Err(Error::Config(format!("region {name} contains no mesh nodes")));
            }
            if mask.indices.iter().any(|&i| mesh.is_boundary_bulk(i)) {
                return Err(Error::Config(format!(
                    "region {name} touches the boundary; control and observation regions must be interior"
                )));
            }
        }
        if !(omega_prime.is_subset_of(&omega) && omega_prime.is_subset_of(&omega_d)) {
            return Err(Error::Config(
                "the interior region must be a nonempty subset of the intersection of the leader \
                 control region with the observation region"
                    .into(),
            ));
        }
        if !omega.intersects(&omega_d) {
            return Err(Error::Config(
                "the leader control region must meet the shared observation region".into(),
            ));
        }
        Ok(Self { omega, omega1, omega2, omega_d, omega_prime })
    }
}
