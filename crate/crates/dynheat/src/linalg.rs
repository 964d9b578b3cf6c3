//! Small dense linear algebra kernels: LU factorization (plain and transposed
//! solves), a cyclic Jacobi eigensolver for symmetric matrices, and slice
//! helpers. Problem sizes here are desk scale, so dense storage is fine.

use crate::error::Error;
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone)]
pub struct DenseMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![T::zero(); self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = T::zero();
            for (a, b) in row.iter().zip(x.iter()) {
                acc = acc + *a * *b;
            }
            y[i] = acc;
        }
        y
    }

    /// y = A^T x.
    pub fn matvec_transpose(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let xi = x[i];
            for (j, a) in row.iter().enumerate() {
                y[j] = y[j] + *a * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale_add(&mut self, other: &Self, factor: T) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + factor * *b;
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

impl<T: Scalar> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T: Scalar> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    lu: DenseMatrix<T>,
    piv: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(a: &DenseMatrix<T>) -> Result<Self, Error> {
        assert_eq!(a.rows, a.cols);
        let n = a.rows;
        let mut lu = a.clone();
        let mut piv: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut pmax = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > pmax {
                    pmax = v;
                    p = i;
                }
            }
            if pmax == T::zero() {
                return Err(Error::SingularMatrix { dim: n });
            }
            if p != k {
                piv.swap(p, k);
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let m = lu[(i, k)] / pivot;
                lu[(i, k)] = m;
                for j in k + 1..n {
                    let sub = m * lu[(k, j)];
                    lu[(i, j)] = lu[(i, j)] - sub;
                }
            }
        }
        Ok(Self { lu, piv })
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.lu.rows;
        debug_assert_eq!(b.len(), n);
        let mut x: Vec<T> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let mut acc = x[i];
            for j in 0..i {
                acc = acc - self.lu[(i, j)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc = acc - self.lu[(i, j)] * x[j];
            }
            x[i] = acc / self.lu[(i, i)];
        }
        x
    }

    /// Solves `A^T x = b` using the same factorization.
    pub fn solve_transpose(&self, b: &[T]) -> Vec<T> {
        let n = self.lu.rows;
        debug_assert_eq!(b.len(), n);
        // A^T = U^T L^T P, so solve U^T y = b, L^T w = y, then undo the pivot.
        let mut y = b.to_vec();
        for i in 0..n {
            let mut acc = y[i];
            for j in 0..i {
                acc = acc - self.lu[(j, i)] * y[j];
            }
            y[i] = acc / self.lu[(i, i)];
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in i + 1..n {
                acc = acc - self.lu[(j, i)] * y[j];
            }
            y[i] = acc;
        }
        let mut x = vec![T::zero(); n];
        for (i, &p) in self.piv.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues (ascending) and the matrix whose columns are the
/// corresponding orthonormal eigenvectors.
pub fn sym_eigen<T: Scalar>(a: &DenseMatrix<T>) -> (Vec<T>, DenseMatrix<T>) {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.clone();
    let mut v = DenseMatrix::identity(n);
    let tol = T::eps() * T::of(n as f64);
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off = off + m[(i, j)] * m[(i, j)];
            }
        }
        let scale = m.max_abs().max(T::one());
        if off.sqrt() <= tol * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= T::eps() * scale {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (T::of(2.0) * apq);
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (T::one() + theta * theta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<T> = (0..n).map(|i| m[(i, i)]).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap());
    let eigenvalues: Vec<T> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, col)] = v[(k, src)];
        }
    }
    (eigenvalues, vectors)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b.iter()).map(|(x, y)| *x * *y).sum()
}

pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + alpha * *xi;
    }
}

pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone)]
pub struct IterativeTrace<T> {
    pub iterations: usize,
    pub relative_residual: T,
    pub converged: bool,
}

/// Conjugate gradient on an abstract vector space.
///
/// `apply` is the (self-adjoint, positive definite) operator, `ip` the inner
/// product defining the space, and `combine(a, x, b, y)` returns `a x + b y`.
pub fn conjugate_gradient<V, T, A, I, C>(
    apply: A,
    ip: I,
    combine: C,
    b: &V,
    tol: T,
    max_iter: usize,
) -> (V, IterativeTrace<T>)
where
    T: Scalar,
    V: Clone,
    A: Fn(&V) -> V,
    I: Fn(&V, &V) -> T,
    C: Fn(T, &V, T, &V) -> V,
{
    let bnorm = ip(b, b).sqrt();
    let mut x = combine(T::zero(), b, T::zero(), b);
    if bnorm == T::zero() {
        return (x, IterativeTrace { iterations: 0, relative_residual: T::zero(), converged: true });
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = ip(&r, &r);
    let mut trace = IterativeTrace { iterations: 0, relative_residual: rr.sqrt() / bnorm, converged: false };
    for it in 0..max_iter {
        let ap = apply(&p);
        let pap = ip(&p, &ap);
        if pap <= T::zero() {
            break;
        }
        let alpha = rr / pap;
        x = combine(T::one(), &x, alpha, &p);
        r = combine(T::one(), &r, -alpha, &ap);
        let rr_new = ip(&r, &r);
        trace.iterations = it + 1;
        trace.relative_residual = rr_new.sqrt() / bnorm;
        if trace.relative_residual <= tol {
            trace.converged = true;
            return (x, trace);
        }
        let beta = rr_new / rr;
        rr = rr_new;
        p = combine(T::one(), &r, beta, &p);
    }
    (x, trace)
}
