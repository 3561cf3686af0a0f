//! Dense complex Hermitian positive-(semi)definite matrix algebra.
//!
//! Everything here targets the small spatial covariance matrices used by
//! the separation and beamforming stages (M microphones, M <= 16):
//! eigendecomposition, principal eigenvectors, matrix square roots and
//! inverses with eigenvalue flooring, and the Riccati/geometric-mean update.
//!
//! All operations are pure; identical inputs give bitwise-identical outputs.

use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{Scalar, C};

/// Relative eigenvalue floor applied before inversion and inverse square
/// roots. Iterative covariance updates can drive source SCMs near-singular.
const EIG_FLOOR_REL: f64 = 1e-10;
/// Absolute eigenvalue floor.
const EIG_FLOOR_ABS: f64 = 1e-300;
/// Below this magnitude an eigenvector entry is unusable as a phase anchor.
const PHASE_ANCHOR_MIN: f64 = 1e-12;

/// Hermitian M x M matrix. The stored entries are kept exactly Hermitian:
/// constructors symmetrize as (A + A^H)/2 and force real diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix<T: Scalar> {
    data: Array2<C<T>>,
}

impl<T: Scalar> HermitianMatrix<T> {
    /// Validates that `data` is square and Hermitian within tolerance, then
    /// stores the symmetrized matrix.
    pub fn new(data: Array2<C<T>>) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows != cols || rows == 0 {
            return Err(Error::dim_mismatch(
                "square matrix with positive dimension",
                format!("{rows}x{cols}"),
            ));
        }
        let fro = frobenius(&data);
        let tol = T::of(1e-12).max(fro * T::epsilon() * T::of(16.0));
        let mut asym = T::zero();
        for i in 0..rows {
            asym = asym.max(data[[i, i]].im.abs());
            for j in (i + 1)..cols {
                let d = data[[i, j]] - data[[j, i]].conj();
                asym = asym.max(d.norm());
            }
        }
        if asym > tol {
            return Err(Error::NotHermitian {
                asymmetry: asym.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self::symmetrize_from(data))
    }

    /// Symmetrizes `data` as (A + A^H)/2 without validating; absorbs
    /// accumulated round-off from iterative updates.
    pub fn symmetrize_from(data: Array2<C<T>>) -> Self {
        let m = data.nrows();
        debug_assert_eq!(m, data.ncols());
        let half = T::of(0.5);
        let mut out = data;
        for i in 0..m {
            out[[i, i]] = C::new(out[[i, i]].re, T::zero());
            for j in (i + 1)..m {
                let v = (out[[i, j]] + out[[j, i]].conj()) * half;
                out[[i, j]] = v;
                out[[j, i]] = v.conj();
            }
        }
        Self { data: out }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: Array2::zeros((dim, dim)),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            data: Array2::eye(dim),
        }
    }

    pub fn scaled_identity(dim: usize, value: T) -> Self {
        let mut data = Array2::zeros((dim, dim));
        for i in 0..dim {
            data[[i, i]] = C::new(value, T::zero());
        }
        Self { data }
    }

    /// Real diagonal matrix.
    pub fn from_diagonal(diag: &[T]) -> Self {
        let mut data = Array2::zeros((diag.len(), diag.len()));
        for (i, &d) in diag.iter().enumerate() {
            data[[i, i]] = C::new(d, T::zero());
        }
        Self { data }
    }

    /// Rank-1 outer product v v^H.
    pub fn from_outer(v: ArrayView1<C<T>>) -> Self {
        let m = v.len();
        let mut data = Array2::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                data[[i, j]] = v[i] * v[j].conj();
            }
        }
        Self::symmetrize_from(data)
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn entries(&self) -> &Array2<C<T>> {
        &self.data
    }

    pub fn into_entries(self) -> Array2<C<T>> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> C<T> {
        self.data[[i, j]]
    }

    pub fn trace(&self) -> T {
        (0..self.dim()).map(|i| self.data[[i, i]].re).sum()
    }

    pub fn frobenius_norm(&self) -> T {
        frobenius(&self.data)
    }

    pub fn scaled(&self, w: T) -> Self {
        Self {
            data: self.data.mapv(|v| v * w),
        }
    }

    /// self += w * other.
    pub fn add_scaled_assign(&mut self, other: &Self, w: T) {
        debug_assert_eq!(self.dim(), other.dim());
        self.data.zip_mut_with(&other.data, |a, &b| *a += b * w);
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim(), other.dim());
        Self {
            data: &self.data + &other.data,
        }
    }

    /// Adds `value` to every diagonal entry.
    pub fn load_diagonal(&self, value: T) -> Self {
        let mut data = self.data.clone();
        for i in 0..self.dim() {
            data[[i, i]] += C::new(value, T::zero());
        }
        Self { data }
    }

    /// A v.
    pub fn mul_vec(&self, v: ArrayView1<C<T>>) -> Array1<C<T>> {
        self.data.dot(&v)
    }

    /// Re(v^H A v); real for Hermitian A.
    pub fn quadratic_form(&self, v: ArrayView1<C<T>>) -> T {
        let av = self.mul_vec(v);
        v.iter()
            .zip(av.iter())
            .map(|(x, y)| (x.conj() * y).re)
            .sum()
    }

    /// Solves A x = b for Hermitian positive definite A via Cholesky.
    /// A failed factorization is retried once with relative diagonal
    /// loading before reporting the matrix as singular.
    pub fn solve_pd(&self, b: ArrayView1<C<T>>, context: &str) -> Result<Array1<C<T>>> {
        let m = self.dim();
        if b.len() != m {
            return Err(Error::dim_mismatch(format!("vector of length {m}"), format!("{}", b.len())));
        }
        let mut l: Vec<C<T>> = self.data.iter().copied().collect();
        let mut rhs: Vec<C<T>> = b.iter().copied().collect();
        if dense::chol_in_place(&mut l, m).is_err() {
            let jitter = T::of(1e-10) * (self.trace() / T::of_usize(m)).abs();
            l.clear();
            l.extend(self.data.iter().copied());
            for i in 0..m {
                l[i * m + i] += C::new(jitter, T::zero());
            }
            if dense::chol_in_place(&mut l, m).is_err() {
                return Err(Error::SingularMatrix {
                    context: context.to_string(),
                });
            }
        }
        dense::chol_solve_in_place(&l, m, &mut rhs);
        Ok(Array1::from_vec(rhs))
    }
}

/// Eigendecomposition of a Hermitian matrix: real eigenvalues in descending
/// order, unit-norm eigenvector columns paired with them.
#[derive(Debug, Clone)]
pub struct EigenDecomposition<T: Scalar> {
    pub eigenvalues: Vec<T>,
    pub eigenvectors: Array2<C<T>>,
}

/// Full eigendecomposition by cyclic Jacobi rotations. Quadratically
/// convergent and deterministic for the small matrices used here.
pub fn hermitian_eig<T: Scalar>(a: &HermitianMatrix<T>) -> EigenDecomposition<T> {
    let m = a.dim();
    let mut work = a.data.clone();
    let mut vecs: Array2<C<T>> = Array2::eye(m);
    if m > 1 {
        jacobi_sweeps(&mut work, &mut vecs);
    }
    let mut order: Vec<usize> = (0..m).collect();
    let diag: Vec<T> = (0..m).map(|i| work[[i, i]].re).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).expect("finite eigenvalues"));

    let eigenvalues: Vec<T> = order.iter().map(|&i| diag[i]).collect();
    let mut eigenvectors = Array2::zeros((m, m));
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..m {
            eigenvectors[[r, dst]] = vecs[[r, src]];
        }
    }
    EigenDecomposition {
        eigenvalues,
        eigenvectors,
    }
}

fn jacobi_sweeps<T: Scalar>(a: &mut Array2<C<T>>, v: &mut Array2<C<T>>) {
    let m = a.nrows();
    let fro = frobenius(a);
    if fro == T::zero() {
        return;
    }
    let tol = fro * T::epsilon() * T::of_usize(m);
    for _sweep in 0..60 {
        let mut off = T::zero();
        for p in 0..m {
            for q in (p + 1)..m {
                off += a[[p, q]].norm_sqr();
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..(m - 1) {
            for q in (p + 1)..m {
                rotate(a, v, p, q);
            }
        }
    }
    // Whatever is left off-diagonal is round-off noise.
    for p in 0..m {
        a[[p, p]] = C::new(a[[p, p]].re, T::zero());
        for q in (p + 1)..m {
            a[[p, q]] = C::new(T::zero(), T::zero());
            a[[q, p]] = C::new(T::zero(), T::zero());
        }
    }
}

/// One complex Jacobi rotation zeroing a[p][q] (and its conjugate mirror).
fn rotate<T: Scalar>(a: &mut Array2<C<T>>, v: &mut Array2<C<T>>, p: usize, q: usize) {
    let m = a.nrows();
    let apq = a[[p, q]];
    let r = apq.norm();
    if r <= T::min_positive_value() {
        a[[p, q]] = C::new(T::zero(), T::zero());
        a[[q, p]] = C::new(T::zero(), T::zero());
        return;
    }
    let phase = apq / C::new(r, T::zero());
    let app = a[[p, p]].re;
    let aqq = a[[q, q]].re;
    let tau = (aqq - app) / (T::of(2.0) * r);
    // Smaller-magnitude root of t^2 - 2 tau t - 1 = 0 for a stable rotation.
    let t = if tau >= T::zero() {
        -T::one() / (tau + (T::one() + tau * tau).sqrt())
    } else {
        T::one() / (-tau + (T::one() + tau * tau).sqrt())
    };
    let c = T::one() / (T::one() + t * t).sqrt();
    let s = t * c;

    let cs = C::new(c, T::zero());
    let sp = phase * s; // s e^{i phi}
    let sm = phase.conj() * s; // s e^{-i phi}

    // Column update: A <- A U, with U[p][p]=c, U[q][p]=s e^{-i phi},
    // U[p][q]=-s e^{i phi}, U[q][q]=c.
    for j in 0..m {
        let ajp = a[[j, p]];
        let ajq = a[[j, q]];
        a[[j, p]] = ajp * cs + ajq * sm;
        a[[j, q]] = ajq * cs - ajp * sp;
    }
    // Row update: A <- U^H A.
    for j in 0..m {
        let apj = a[[p, j]];
        let aqj = a[[q, j]];
        a[[p, j]] = apj * cs + aqj * sp;
        a[[q, j]] = aqj * cs - apj * sm;
    }
    a[[p, q]] = C::new(T::zero(), T::zero());
    a[[q, p]] = C::new(T::zero(), T::zero());
    a[[p, p]] = C::new(a[[p, p]].re, T::zero());
    a[[q, q]] = C::new(a[[q, q]].re, T::zero());

    // Accumulate eigenvectors: V <- V U.
    for j in 0..m {
        let vjp = v[[j, p]];
        let vjq = v[[j, q]];
        v[[j, p]] = vjp * cs + vjq * sm;
        v[[j, q]] = vjq * cs - vjp * sp;
    }
}

/// Unit-norm eigenvector of the largest eigenvalue, with its phase rotated
/// so the entry at `anchor` is real and nonnegative. When that entry is
/// negligibly small the largest-magnitude entry anchors the phase instead.
pub fn principal_eigenvector<T: Scalar>(
    a: &HermitianMatrix<T>,
    anchor: usize,
) -> Result<Array1<C<T>>> {
    let eig = hermitian_eig(a);
    if eig.eigenvalues[0] <= T::zero() {
        return Err(Error::DegenerateMatrix {
            context: format!(
                "principal eigenvector requested but largest eigenvalue is {}",
                eig.eigenvalues[0]
            ),
        });
    }
    let mut v: Array1<C<T>> = eig.eigenvectors.column(0).to_owned();
    let norm = v.iter().map(|x| x.norm_sqr()).sum::<T>().sqrt();
    v.mapv_inplace(|x| x / norm);

    let mut idx = anchor.min(v.len() - 1);
    if v[idx].norm() < T::of(PHASE_ANCHOR_MIN) {
        let mut best = T::zero();
        for (i, x) in v.iter().enumerate() {
            if x.norm() > best {
                best = x.norm();
                idx = i;
            }
        }
    }
    let mag = v[idx].norm();
    if mag > T::zero() {
        let phase = v[idx] / C::new(mag, T::zero());
        let correction = phase.conj();
        v.mapv_inplace(|x| x * correction);
        v[idx] = C::new(v[idx].re.abs(), T::zero());
    }
    Ok(v)
}

fn eig_map<T: Scalar>(eig: &EigenDecomposition<T>, f: impl Fn(T) -> T) -> HermitianMatrix<T> {
    let mapped: Vec<T> = eig.eigenvalues.iter().map(|&l| f(l)).collect();
    eig_map_values(eig, &mapped)
}

/// V diag(mapped) V^H.
fn eig_map_values<T: Scalar>(eig: &EigenDecomposition<T>, mapped: &[T]) -> HermitianMatrix<T> {
    let m = eig.eigenvalues.len();
    let mut data = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            let mut acc = C::new(T::zero(), T::zero());
            for k in 0..m {
                acc += eig.eigenvectors[[i, k]] * eig.eigenvectors[[j, k]].conj() * mapped[k];
            }
            data[[i, j]] = acc;
        }
    }
    HermitianMatrix::symmetrize_from(data)
}

fn floored_eigenvalues<T: Scalar>(eig: &EigenDecomposition<T>, context: &str) -> Result<Vec<T>> {
    let lambda_max = eig.eigenvalues[0];
    if lambda_max <= T::zero() {
        return Err(Error::SingularMatrix {
            context: format!("{context}: largest eigenvalue {lambda_max} is not positive"),
        });
    }
    let floor = (T::of(EIG_FLOOR_REL) * lambda_max)
        .max(T::of(EIG_FLOOR_ABS))
        .max(T::min_positive_value());
    Ok(eig.eigenvalues.iter().map(|&l| l.max(floor)).collect())
}

/// Hermitian PSD square root; negative round-off eigenvalues clamp to zero.
pub fn matrix_sqrt<T: Scalar>(a: &HermitianMatrix<T>) -> HermitianMatrix<T> {
    let eig = hermitian_eig(a);
    eig_map(&eig, |l| l.max(T::zero()).sqrt())
}

/// A^{-1/2} with eigenvalue flooring.
pub fn matrix_inv_sqrt<T: Scalar>(a: &HermitianMatrix<T>) -> Result<HermitianMatrix<T>> {
    let eig = hermitian_eig(a);
    let mut mapped = floored_eigenvalues(&eig, "inverse square root")?;
    for v in &mut mapped {
        *v = T::one() / v.sqrt();
    }
    Ok(eig_map_values(&eig, &mapped))
}

/// A^{-1} with eigenvalue flooring.
pub fn inverse<T: Scalar>(a: &HermitianMatrix<T>) -> Result<HermitianMatrix<T>> {
    let eig = hermitian_eig(a);
    let mut mapped = floored_eigenvalues(&eig, "inverse")?;
    for v in &mut mapped {
        *v = T::one() / *v;
    }
    Ok(eig_map_values(&eig, &mapped))
}

/// Solves G_new Psi G_new = G_old Phi G_old for the unique positive definite
/// G_new: the geometric mean of Psi^{-1} and G_old Phi G_old,
///
///   G_new = Psi^{-1/2} (Psi^{1/2} G_old Phi G_old Psi^{1/2})^{1/2} Psi^{-1/2}.
pub fn geometric_mean_update<T: Scalar>(
    g_old: &HermitianMatrix<T>,
    phi: &HermitianMatrix<T>,
    psi: &HermitianMatrix<T>,
) -> Result<HermitianMatrix<T>> {
    let m = g_old.dim();
    if phi.dim() != m || psi.dim() != m {
        return Err(Error::dim_mismatch(
            format!("{m}x{m} matrices"),
            format!("phi {}x{}, psi {}x{}", phi.dim(), phi.dim(), psi.dim(), psi.dim()),
        ));
    }
    let k = g_old.entries().dot(phi.entries()).dot(g_old.entries());
    let k = HermitianMatrix::symmetrize_from(k);
    riccati_solve(&k, psi)
}

/// Solves G Psi G = K for positive semidefinite K and positive definite Psi.
pub fn riccati_solve<T: Scalar>(
    k: &HermitianMatrix<T>,
    psi: &HermitianMatrix<T>,
) -> Result<HermitianMatrix<T>> {
    let eig_psi = hermitian_eig(psi);
    let floored = floored_eigenvalues(&eig_psi, "Riccati solve")?;
    let sqrt_vals: Vec<T> = floored.iter().map(|&v| v.sqrt()).collect();
    let inv_sqrt_vals: Vec<T> = sqrt_vals.iter().map(|&v| T::one() / v).collect();
    let psi_sqrt = eig_map_values(&eig_psi, &sqrt_vals);
    let psi_inv_sqrt = eig_map_values(&eig_psi, &inv_sqrt_vals);
    let inner = psi_sqrt.entries().dot(k.entries()).dot(psi_sqrt.entries());
    let inner_sqrt = matrix_sqrt(&HermitianMatrix::symmetrize_from(inner));
    let out = psi_inv_sqrt
        .entries()
        .dot(inner_sqrt.entries())
        .dot(psi_inv_sqrt.entries());
    Ok(HermitianMatrix::symmetrize_from(out))
}

/// Re(tr(A B)). For Hermitian A, B the product trace is real up to round-off.
pub fn trace_product<T: Scalar>(a: &HermitianMatrix<T>, b: &HermitianMatrix<T>) -> Result<T> {
    let m = a.dim();
    if b.dim() != m {
        return Err(Error::dim_mismatch(
            format!("{m}x{m}"),
            format!("{}x{}", b.dim(), b.dim()),
        ));
    }
    let mut acc = T::zero();
    for i in 0..m {
        for j in 0..m {
            acc += (a.get(i, j) * b.get(j, i)).re;
        }
    }
    Ok(acc)
}

fn frobenius<T: Scalar>(a: &Array2<C<T>>) -> T {
    a.iter().map(|v| v.norm_sqr()).sum::<T>().sqrt()
}

/// General (non-Hermitian) complex matrix routines backing the demixing
/// algebra: Gaussian elimination with partial pivoting.
pub mod general {
    use super::*;

    /// Inverse of a general square complex matrix.
    pub fn inverse<T: Scalar>(a: &Array2<C<T>>, context: &str) -> Result<Array2<C<T>>> {
        let m = a.nrows();
        if a.ncols() != m {
            return Err(Error::dim_mismatch("square matrix", format!("{}x{}", m, a.ncols())));
        }
        let mut work: Vec<C<T>> = a.iter().copied().collect();
        let mut rhs: Vec<C<T>> = vec![C::new(T::zero(), T::zero()); m * m];
        for i in 0..m {
            rhs[i * m + i] = C::new(T::one(), T::zero());
        }
        dense::ge_solve(&mut work, m, &mut rhs, m).map_err(|_| Error::SingularMatrix {
            context: context.to_string(),
        })?;
        Ok(Array2::from_shape_vec((m, m), rhs).expect("shape"))
    }

    /// Solves A x = b for general square complex A.
    pub fn solve<T: Scalar>(
        a: &Array2<C<T>>,
        b: ArrayView1<C<T>>,
        context: &str,
    ) -> Result<Array1<C<T>>> {
        let m = a.nrows();
        let mut work: Vec<C<T>> = a.iter().copied().collect();
        let mut rhs: Vec<C<T>> = b.iter().copied().collect();
        dense::ge_solve(&mut work, m, &mut rhs, 1).map_err(|_| Error::SingularMatrix {
            context: context.to_string(),
        })?;
        Ok(Array1::from_vec(rhs))
    }

    /// ln |det A|, or an error for a numerically singular matrix.
    pub fn log_abs_det<T: Scalar>(a: &Array2<C<T>>, context: &str) -> Result<T> {
        let m = a.nrows();
        let mut work: Vec<C<T>> = a.iter().copied().collect();
        dense::ge_log_abs_det(&mut work, m).map_err(|_| Error::SingularMatrix {
            context: context.to_string(),
        })
    }
}

/// Low-level kernels on row-major slices; shared with the model-fitting hot
/// loops, which keep their own scratch buffers.
pub(crate) mod dense {
    use super::*;

    /// In-place Cholesky of a Hermitian positive definite matrix; the lower
    /// triangle of `a` becomes L with A = L L^H. Fails on a nonpositive pivot.
    pub(crate) fn chol_in_place<T: Scalar>(a: &mut [C<T>], m: usize) -> std::result::Result<(), ()> {
        for j in 0..m {
            let mut d = a[j * m + j].re;
            for k in 0..j {
                d -= a[j * m + k].norm_sqr();
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(());
            }
            let ljj = d.sqrt();
            a[j * m + j] = C::new(ljj, T::zero());
            for i in (j + 1)..m {
                let mut s = a[i * m + j];
                for k in 0..j {
                    s -= a[i * m + k] * a[j * m + k].conj();
                }
                a[i * m + j] = s / ljj;
            }
        }
        Ok(())
    }

    /// Solves L L^H x = b in place given the Cholesky factor from
    /// `chol_in_place`.
    pub(crate) fn chol_solve_in_place<T: Scalar>(l: &[C<T>], m: usize, b: &mut [C<T>]) {
        for i in 0..m {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * m + k] * b[k];
            }
            b[i] = s / l[i * m + i].re;
        }
        for i in (0..m).rev() {
            let mut s = b[i];
            for k in (i + 1)..m {
                s -= l[k * m + i].conj() * b[k];
            }
            b[i] = s / l[i * m + i].re;
        }
    }

    /// Writes A^{-1} into `out` (row-major m x m) given the Cholesky factor.
    pub(crate) fn chol_invert<T: Scalar>(l: &[C<T>], m: usize, out: &mut [C<T>], col: &mut [C<T>]) {
        for j in 0..m {
            for (i, c) in col.iter_mut().enumerate().take(m) {
                *c = if i == j {
                    C::new(T::one(), T::zero())
                } else {
                    C::new(T::zero(), T::zero())
                };
            }
            chol_solve_in_place(l, m, col);
            for i in 0..m {
                out[i * m + j] = col[i];
            }
        }
    }

    /// ln det A = 2 sum ln L_ii for the Cholesky factor.
    pub(crate) fn chol_log_det<T: Scalar>(l: &[C<T>], m: usize) -> T {
        let mut acc = T::zero();
        for i in 0..m {
            acc += l[i * m + i].re.ln();
        }
        acc + acc
    }

    /// Gaussian elimination with partial pivoting; solves A X = B for
    /// `nrhs` right-hand sides stored row-major in `rhs` (m x nrhs).
    pub(crate) fn ge_solve<T: Scalar>(
        a: &mut [C<T>],
        m: usize,
        rhs: &mut [C<T>],
        nrhs: usize,
    ) -> std::result::Result<(), ()> {
        for col in 0..m {
            let mut piv = col;
            let mut piv_mag = a[col * m + col].norm();
            for row in (col + 1)..m {
                let mag = a[row * m + col].norm();
                if mag > piv_mag {
                    piv_mag = mag;
                    piv = row;
                }
            }
            if !(piv_mag > T::zero()) || !piv_mag.is_finite() {
                return Err(());
            }
            if piv != col {
                for j in 0..m {
                    a.swap(col * m + j, piv * m + j);
                }
                for j in 0..nrhs {
                    rhs.swap(col * nrhs + j, piv * nrhs + j);
                }
            }
            let inv_pivot = C::new(T::one(), T::zero()) / a[col * m + col];
            for row in (col + 1)..m {
                let factor = a[row * m + col] * inv_pivot;
                if factor.norm_sqr() == T::zero() {
                    continue;
                }
                a[row * m + col] = C::new(T::zero(), T::zero());
                for j in (col + 1)..m {
                    let sub = factor * a[col * m + j];
                    a[row * m + j] -= sub;
                }
                for j in 0..nrhs {
                    let sub = factor * rhs[col * nrhs + j];
                    rhs[row * nrhs + j] -= sub;
                }
            }
        }
        for col in (0..m).rev() {
            let inv_pivot = C::new(T::one(), T::zero()) / a[col * m + col];
            for j in 0..nrhs {
                let mut s = rhs[col * nrhs + j];
                for k in (col + 1)..m {
                    s -= a[col * m + k] * rhs[k * nrhs + j];
                }
                rhs[col * nrhs + j] = s * inv_pivot;
            }
        }
        Ok(())
    }

    /// ln |det A| via elimination pivots. Destroys `a`.
    pub(crate) fn ge_log_abs_det<T: Scalar>(a: &mut [C<T>], m: usize) -> std::result::Result<T, ()> {
        let mut acc = T::zero();
        for col in 0..m {
            let mut piv = col;
            let mut piv_mag = a[col * m + col].norm();
            for row in (col + 1)..m {
                let mag = a[row * m + col].norm();
                if mag > piv_mag {
                    piv_mag = mag;
                    piv = row;
                }
            }
            if !(piv_mag > T::zero()) || !piv_mag.is_finite() {
                return Err(());
            }
            if piv != col {
                for j in 0..m {
                    a.swap(col * m + j, piv * m + j);
                }
            }
            acc += piv_mag.ln();
            let inv_pivot = C::new(T::one(), T::zero()) / a[col * m + col];
            for row in (col + 1)..m {
                let factor = a[row * m + col] * inv_pivot;
                for j in (col + 1)..m {
                    let sub = factor * a[col * m + j];
                    a[row * m + j] -= sub;
                }
            }
        }
        Ok(acc)
    }
}
