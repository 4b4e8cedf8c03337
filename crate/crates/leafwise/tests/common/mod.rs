//! Oracles shared by the integration suites. Everything here is computed
//! from first principles (Taylor series, quadrature, shoelace sums) so the
//! library's own numerics are never used to check themselves.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Matrix exponential by scaling and squaring of a plain Taylor series.
pub fn exp_taylor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.norm();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let tiny = a / 2f64.powi(squarings);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &tiny / k as f64;
        sum += &term;
    }
    let mut out = sum;
    for _ in 0..squarings {
        out = &out * &out;
    }
    out
}

/// Signed area enclosed by a planar polyline via the shoelace sum. The
/// polyline is treated as closed from its last point back to the first.
pub fn shoelace(points: &[DVector<f64>]) -> f64 {
    let mut acc = 0.0;
    for i in 0..points.len() {
        let p = &points[i];
        let q = &points[(i + 1) % points.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

fn simpson_slice(a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson_slice(a, fa, m, fm, flm);
    let right = simpson_slice(m, fm, b, fb, frm);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        left + right + (left + right - whole) / 15.0
    } else {
        simpson_rec(f, a, fa, m, fm, flm, left, tol / 2.0, depth - 1)
            + simpson_rec(f, m, fm, b, fb, frm, right, tol / 2.0, depth - 1)
    }
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson_slice(a, fa, b, fb, fm);
    simpson_rec(f, a, fa, b, fb, fm, whole, tol, 40)
}

/// Least-squares slope of `ln(error)` against `ln(step)`: the observed
/// convergence order of a sequence of runs.
pub fn observed_order(steps: &[f64], errors: &[f64]) -> f64 {
    assert_eq!(steps.len(), errors.len());
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .zip(errors)
        .filter(|(_, e)| **e > 0.0)
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    assert!(pts.len() >= 2, "not enough points above the noise floor");
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt orthonormalization of matrices under the Frobenius inner
/// product; near-dependent inputs are dropped.
pub fn orthonormalize_frobenius(set: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let mut basis: Vec<DMatrix<f64>> = Vec::new();
    for m in set {
        let mut r = m.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = frobenius_inner(&r, b);
                r -= b * c;
            }
        }
        let norm = r.norm();
        if norm > 1e-10 * m.norm().max(1.0) {
            basis.push(r / norm);
        }
    }
    basis
}

/// Largest principal angle between the Frobenius spans of two matrix sets.
/// Spans of different dimension are maximally apart.
pub fn max_principal_angle(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    let qa = orthonormalize_frobenius(a);
    let qb = orthonormalize_frobenius(b);
    if qa.len() != qb.len() {
        return std::f64::consts::FRAC_PI_2;
    }
    if qa.is_empty() {
        return 0.0;
    }
    let mut overlap = DMatrix::zeros(qa.len(), qb.len());
    for (i, x) in qa.iter().enumerate() {
        for (j, y) in qb.iter().enumerate() {
            overlap[(i, j)] = frobenius_inner(x, y);
        }
    }
    let sigma_min = overlap.svd(false, false).singular_values.min();
    sigma_min.clamp(-1.0, 1.0).acos()
}

/// Classical fixed-step RK4 for a plain ODE, independent of the library's
/// integrators.
pub fn rk4(
    f: &dyn Fn(f64, &DVector<f64>) -> DVector<f64>,
    x0: &DVector<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> DVector<f64> {
    let h = (t1 - t0) / steps as f64;
    let mut x = x0.clone();
    let mut t = t0;
    for _ in 0..steps {
        let k1 = f(t, &x);
        let k2 = f(t + 0.5 * h, &(&x + &k1 * (0.5 * h)));
        let k3 = f(t + 0.5 * h, &(&x + &k2 * (0.5 * h)));
        let k4 = f(t + h, &(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        t += h;
    }
    x
}
