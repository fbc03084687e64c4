//! Small dense/banded linear-algebra and quadrature kernels shared by the
//! numerical modules: trapezoid quadrature, tridiagonal and banded direct
//! solvers, a symmetric-tridiagonal Sturm bisection, preconditioned
//! conjugate gradients, periodic spectral differentiation matrices, and a
//! uniform-grid cubic interpolant.

use crate::{Error, Result};
use nalgebra::DMatrix;

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

/// Trapezoid rule on a uniform grid with spacing `h`.
pub fn trapezoid(h: f64, f: &[f64]) -> f64 {
    if f.len() < 2 {
        return 0.0;
    }
    let interior: f64 = f[1..f.len() - 1].iter().sum();
    h * (0.5 * (f[0] + f[f.len() - 1]) + interior)
}

/// Trapezoid inner product ∫ f·g on a uniform grid.
pub fn inner_trapezoid(h: f64, f: &[f64], g: &[f64]) -> f64 {
    assert_eq!(f.len(), g.len());
    let prod: Vec<f64> = f.iter().zip(g).map(|(a, b)| a * b).collect();
    trapezoid(h, &prod)
}

/// Periodic trapezoid rule (equal weights) for samples on [0, period).
pub fn trapezoid_periodic(period: f64, f: &[f64]) -> f64 {
    let m = f.len() as f64;
    f.iter().sum::<f64>() * period / m
}

// ---------------------------------------------------------------------------
// Tridiagonal solver (partial pivoting)
// ---------------------------------------------------------------------------

/// Solves a tridiagonal system with partial pivoting (LAPACK `gtsv`-style).
///
/// `sub`, `diag`, `sup` are the sub/main/super diagonals (`sub[0]` couples
/// rows 1 and 0). The right-hand side is overwritten with the solution.
pub fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = diag.len();
    assert_eq!(sub.len(), n.saturating_sub(1));
    assert_eq!(sup.len(), n.saturating_sub(1));
    assert_eq!(rhs.len(), n);
    // Working copies: d = diagonal, u = first super, w = second super (fill-in).
    let mut l = vec![0.0; n.saturating_sub(1)];
    let mut d = diag.to_vec();
    let mut u = sup.to_vec();
    let mut w = vec![0.0; n.saturating_sub(1)];
    l.copy_from_slice(sub);
    let mut fill = vec![0.0; n]; // second superdiagonal created by pivoting
    for k in 0..n - 1 {
        if l[k].abs() > d[k].abs() {
            // Swap rows k and k+1.
            rhs.swap(k, k + 1);
            std::mem::swap(&mut d[k], &mut l[k]);
            let tmp = u[k];
            u[k] = d[k + 1];
            d[k + 1] = tmp;
            if k + 1 < n - 1 {
                fill[k] = u[k + 1];
                u[k + 1] = 0.0;
            }
        }
        if d[k] == 0.0 {
            return Err(Error::Numerical("singular tridiagonal system".into()));
        }
        let m = l[k] / d[k];
        d[k + 1] -= m * u[k];
        if k + 1 < n - 1 {
            u[k + 1] -= m * fill[k];
        }
        rhs[k + 1] -= m * rhs[k];
        w[k] = fill[k];
    }
    if d[n - 1] == 0.0 {
        return Err(Error::Numerical("singular tridiagonal system".into()));
    }
    // Back substitution with two superdiagonals.
    rhs[n - 1] /= d[n - 1];
    if n >= 2 {
        rhs[n - 2] = (rhs[n - 2] - u[n - 2] * rhs[n - 1]) / d[n - 2];
    }
    for k in (0..n.saturating_sub(2)).rev() {
        rhs[k] = (rhs[k] - u[k] * rhs[k + 1] - w[k] * rhs[k + 2]) / d[k];
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// General banded LU with partial pivoting
// ---------------------------------------------------------------------------

/// Banded matrix with `kl` sub- and `ku` super-diagonals, stored row-wise
/// with room for the `kl` extra superdiagonals created by partial pivoting.
pub struct BandMatrix {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        BandMatrix { n, kl, ku, width, data: vec![0.0; n * width] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// In-place LU factorization with partial pivoting. Returns the pivot
    /// row chosen at each elimination step.
    pub fn lu_factor(mut self) -> Result<BandLu> {
        let n = self.n;
        let kl = self.kl;
        let kumax = self.kl + self.ku; // upper bandwidth after pivoting
        let mut pivots = vec![0usize; n];
        for k in 0..n {
            // Pivot search in column k, rows k..=k+kl.
            let imax = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=imax {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                return Err(Error::Numerical("singular banded system".into()));
            }
            pivots[k] = p;
            if p != k {
                let jmax = (k + kumax).min(n - 1);
                for j in k..=jmax {
                    let a = self.get(k, j);
                    let b = self.get(p, j);
                    self.set(k, j, b);
                    self.set(p, j, a);
                }
            }
            let piv = self.get(k, k);
            let jmax = (k + kumax).min(n - 1);
            for i in k + 1..=imax {
                let m = self.get(i, k) / piv;
                self.set(i, k, m); // store multiplier
                if m != 0.0 {
                    for j in k + 1..=jmax {
                        let v = self.get(i, j) - m * self.get(k, j);
                        self.set(i, j, v);
                    }
                }
            }
        }
        Ok(BandLu { mat: self, pivots })
    }

    /// Symmetric positive definite band Cholesky (no pivoting); uses only
    /// the lower triangle (`kl` bandwidth). Fails on a non-positive pivot.
    pub fn cholesky_factor(mut self) -> Result<BandCholesky> {
        let n = self.n;
        let kl = self.kl;
        for j in 0..n {
            let mut d = self.get(j, j);
            let start = j.saturating_sub(kl);
            for k in start..j {
                let l = self.get(j, k);
                d -= l * l;
            }
            if d <= 0.0 {
                return Err(Error::Numerical(format!(
                    "matrix not positive definite at row {j} (pivot {d:e})"
                )));
            }
            let d = d.sqrt();
            self.set(j, j, d);
            let imax = (j + kl).min(n - 1);
            for i in j + 1..=imax {
                let mut v = self.get(i, j);
                let start = i.saturating_sub(kl).max(j.saturating_sub(kl));
                for k in start..j {
                    if k + kl >= i {
                        v -= self.get(i, k) * self.get(j, k);
                    }
                }
                self.set(i, j, v / d);
            }
        }
        Ok(BandCholesky { mat: self })
    }
}

/// LU factorization of a [`BandMatrix`] with partial pivoting.
pub struct BandLu {
    mat: BandMatrix,
    pivots: Vec<usize>,
}

impl BandLu {
    /// Solves the factored system in place.
    pub fn solve(&self, rhs: &mut [f64]) {
        let n = self.mat.n;
        let kl = self.mat.kl;
        let kumax = self.mat.kl + self.mat.ku;
        assert_eq!(rhs.len(), n);
        // Forward: apply permutations and L.
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                rhs.swap(k, p);
            }
            let imax = (k + kl).min(n - 1);
            let rk = rhs[k];
            for i in k + 1..=imax {
                rhs[i] -= self.mat.get(i, k) * rk;
            }
        }
        // Backward: U.
        for k in (0..n).rev() {
            let jmax = (k + kumax).min(n - 1);
            let mut v = rhs[k];
            for j in k + 1..=jmax {
                v -= self.mat.get(k, j) * rhs[j];
            }
            rhs[k] = v / self.mat.get(k, k);
        }
    }
}

/// Cholesky factorization of an SPD [`BandMatrix`].
pub struct BandCholesky {
    mat: BandMatrix,
}

impl BandCholesky {
    /// Solves the factored system in place.
    pub fn solve(&self, rhs: &mut [f64]) {
        let n = self.mat.n;
        let kl = self.mat.kl;
        assert_eq!(rhs.len(), n);
        for i in 0..n {
            let start = i.saturating_sub(kl);
            let mut v = rhs[i];
            for k in start..i {
                v -= self.mat.get(i, k) * rhs[k];
            }
            rhs[i] = v / self.mat.get(i, i);
        }
        for i in (0..n).rev() {
            let imax = (i + kl).min(n - 1);
            let mut v = rhs[i];
            for k in i + 1..=imax {
                v -= self.mat.get(k, i) * rhs[k];
            }
            rhs[i] = v / self.mat.get(i, i);
        }
    }
}

// ---------------------------------------------------------------------------
// Symmetric tridiagonal eigenvalues via Sturm bisection
// ---------------------------------------------------------------------------

/// Number of eigenvalues of the symmetric tridiagonal (diag, off) matrix
/// that are strictly less than `x` (Sturm sequence / LDLᵀ inertia count).
pub fn tridiag_count_below(diag: &[f64], off: &[f64], x: f64) -> usize {
    let n = diag.len();
    let mut count = 0;
    let mut d = 1.0f64;
    for i in 0..n {
        let b2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        d = diag[i] - x - b2 / d;
        if d == 0.0 {
            d = 1e-300;
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// Largest eigenvalue of a symmetric tridiagonal matrix by bisection.
pub fn tridiag_largest_eigenvalue(diag: &[f64], off: &[f64], tol: f64) -> f64 {
    let n = diag.len();
    // Gershgorin bounds.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = (if i > 0 { off[i - 1].abs() } else { 0.0 })
            + (if i + 1 < n { off[i].abs() } else { 0.0 });
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let mut a = lo;
    let mut b = hi + 1.0;
    // Largest eigenvalue: the unique λ with count_below(λ⁻) = n−1.
    while b - a > tol * (1.0 + a.abs().max(b.abs())) {
        let mid = 0.5 * (a + b);
        if tridiag_count_below(diag, off, mid) >= n {
            b = mid;
        } else {
            a = mid;
        }
    }
    0.5 * (a + b)
}

// ---------------------------------------------------------------------------
// Preconditioned conjugate gradients
// ---------------------------------------------------------------------------

/// Solves `A x = b` for an SPD operator given as a closure, with a diagonal
/// (Jacobi) preconditioner. `x` holds the initial guess and the solution.
pub fn pcg<F>(apply: F, diag: &[f64], b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<usize>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    apply(x, &mut ap);
    for i in 0..n {
        r[i] = b[i] - ap[i];
    }
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut rz = 0.0;
    for i in 0..n {
        z[i] = r[i] / diag[i];
        rz += r[i] * z[i];
        p[i] = z[i];
    }
    for iter in 0..max_iter {
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= tol * bnorm {
            return Ok(iter);
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(Error::Numerical("pcg: operator not positive definite".into()));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let mut rz_new = 0.0;
        for i in 0..n {
            z[i] = r[i] / diag[i];
            rz_new += r[i] * z[i];
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rnorm <= tol * bnorm {
        Ok(max_iter)
    } else {
        Err(Error::NonConvergence {
            detail: format!("pcg failed after {max_iter} iterations"),
            residual: rnorm / bnorm,
        })
    }
}

// ---------------------------------------------------------------------------
// Periodic spectral differentiation (period 1, even node count)
// ---------------------------------------------------------------------------

/// First-derivative spectral differentiation matrix for m equispaced nodes
/// on a period-1 interval (m even).
pub fn spectral_d1(m: usize) -> DMatrix<f64> {
    assert!(m % 2 == 0, "spectral differentiation requires an even node count");
    let mut d = DMatrix::zeros(m, m);
    for j in 0..m {
        for k in 0..m {
            if j != k {
                let diff = j as isize - k as isize;
                let sign = if diff.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                let angle = std::f64::consts::PI * diff as f64 / m as f64;
                // Period-2π entry 0.5·(−1)^{j−k}·cot(...) rescaled by 2π.
                d[(j, k)] = 2.0 * std::f64::consts::PI * 0.5 * sign / angle.tan();
            }
        }
    }
    d
}

/// Second-derivative spectral differentiation matrix, same conventions as
/// [`spectral_d1`].
pub fn spectral_d2(m: usize) -> DMatrix<f64> {
    assert!(m % 2 == 0, "spectral differentiation requires an even node count");
    let mf = m as f64;
    let mut d = DMatrix::zeros(m, m);
    let scale = 4.0 * std::f64::consts::PI * std::f64::consts::PI; // (2π)²
    for j in 0..m {
        for k in 0..m {
            if j == k {
                d[(j, k)] = scale * (-mf * mf / 12.0 - 1.0 / 6.0);
            } else {
                let diff = j as isize - k as isize;
                let sign = if diff.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                let s = (std::f64::consts::PI * diff as f64 / mf).sin();
                d[(j, k)] = scale * (-sign / (2.0 * s * s));
            }
        }
    }
    d
}

/// Applies a differentiation matrix to periodic samples.
pub fn apply_matrix(d: &DMatrix<f64>, f: &[f64]) -> Vec<f64> {
    let m = f.len();
    assert_eq!(d.nrows(), m);
    let mut out = vec![0.0; m];
    for j in 0..m {
        let mut acc = 0.0;
        for k in 0..m {
            acc += d[(j, k)] * f[k];
        }
        out[j] = acc;
    }
    out
}

// ---------------------------------------------------------------------------
// Uniform-grid cubic interpolation
// ---------------------------------------------------------------------------

/// Four-point Lagrange cubic interpolation of samples `f` on the uniform
/// grid `x0 + i·h`. Values outside the grid are extrapolated from the
/// nearest interior stencil.
pub fn cubic_interp(x0: f64, h: f64, f: &[f64], x: f64) -> f64 {
    let n = f.len();
    assert!(n >= 4);
    let s = (x - x0) / h;
    let mut i = s.floor() as isize;
    // Center the 4-point stencil (i−1..i+2) inside the grid.
    if i < 1 {
        i = 1;
    }
    if i > n as isize - 3 {
        i = n as isize - 3;
    }
    let i = i as usize;
    let t = s - i as f64; // local coordinate in [0,1] on the central interval
    let fm1 = f[i - 1];
    let f0 = f[i];
    let f1 = f[i + 1];
    let f2 = f[i + 2];
    // Lagrange basis on nodes −1, 0, 1, 2.
    let lm1 = -t * (t - 1.0) * (t - 2.0) / 6.0;
    let l0 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
    let l1 = -(t + 1.0) * t * (t - 2.0) / 2.0;
    let l2 = (t + 1.0) * t * (t - 1.0) / 6.0;
    lm1 * fm1 + l0 * f0 + l1 * f1 + l2 * f2
}
