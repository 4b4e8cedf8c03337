//! Fixed matrix Lie groups, their algebras, and a Lie-group integrator for
//! right-logarithmic-derivative equations.
//!
//! Every group element and algebra element carries an `Arc<GroupSpec>` so
//! that mixed-group arithmetic is rejected instead of silently producing
//! garbage. Algebra elements are stored as coordinates in a fixed basis;
//! the basis matrices are pairwise orthogonal under the Frobenius inner
//! product, which makes the coordinate/matrix round-trip a diagonal
//! projection.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Default residual bound accepted by [`GroupElement::new`].
pub const CONSTRAINT_TOL: f64 = 1e-9;

/// Rotation angles this close to the cut locus are rejected by [`log`].
pub const INJECTIVITY_MARGIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupName {
    So2,
    So3,
    Se2,
    Heisenberg3,
    TransR1,
}

impl GroupName {
    pub fn parse(s: &str) -> Option<GroupName> {
        match s {
            "SO2" => Some(GroupName::So2),
            "SO3" => Some(GroupName::So3),
            "SE2" => Some(GroupName::Se2),
            "Heisenberg3" => Some(GroupName::Heisenberg3),
            "TransR1" => Some(GroupName::TransR1),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GroupName::So2 => "SO2",
            GroupName::So3 => "SO3",
            GroupName::Se2 => "SE2",
            GroupName::Heisenberg3 => "Heisenberg3",
            GroupName::TransR1 => "TransR1",
        }
    }

    pub fn spec(self) -> Arc<GroupSpec> {
        GroupSpec::get(self)
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A fixed matrix group together with its algebra basis.
pub struct GroupSpec {
    pub name: GroupName,
    pub matrix_size: usize,
    pub algebra_dim: usize,
    /// Pairwise Frobenius-orthogonal basis of the algebra. Generators are
    /// normalized so the usual structure constants hold (for so(3):
    /// [E1,E2] = E3), not to unit Frobenius norm.
    pub basis: Vec<DMatrix<f64>>,
    pub(crate) basis_norm2: Vec<f64>,
}

fn basis_so2() -> Vec<DMatrix<f64>> {
    vec![DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])]
}

fn basis_so3() -> Vec<DMatrix<f64>> {
    vec![
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0]),
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0]),
        DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
    ]
}

fn basis_se2() -> Vec<DMatrix<f64>> {
    vec![
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
    ]
}

fn basis_heisenberg3() -> Vec<DMatrix<f64>> {
    vec![
        DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
    ]
}

fn basis_trans_r1() -> Vec<DMatrix<f64>> {
    vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])]
}

impl GroupSpec {
    pub fn get(name: GroupName) -> Arc<GroupSpec> {
        let (matrix_size, basis) = match name {
            GroupName::So2 => (2, basis_so2()),
            GroupName::So3 => (3, basis_so3()),
            GroupName::Se2 => (3, basis_se2()),
            GroupName::Heisenberg3 => (3, basis_heisenberg3()),
            GroupName::TransR1 => (2, basis_trans_r1()),
        };
        let basis_norm2 = basis.iter().map(|b| b.dot(b)).collect::<Vec<_>>();
        Arc::new(GroupSpec {
            name,
            matrix_size,
            algebra_dim: basis.len(),
            basis,
            basis_norm2,
        })
    }

    pub fn identity_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.matrix_size, self.matrix_size)
    }

    /// Frobenius projection of `m` onto the basis. Exact (up to rounding)
    /// because the basis is pairwise orthogonal.
    pub fn coords_of(&self, m: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.algebra_dim,
            self.basis
                .iter()
                .zip(&self.basis_norm2)
                .map(|(b, n2)| m.dot(b) / n2),
        )
    }

    pub fn matrix_of(&self, coords: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.matrix_size, self.matrix_size);
        for (c, b) in coords.iter().zip(&self.basis) {
            m += b * *c;
        }
        m
    }

    /// Residual of the defining constraint of the group's matrix
    /// realization: orthogonality and unit determinant for the rotation
    /// blocks, affine last row for SE(2), unit diagonal and zero lower
    /// triangle for the unipotent realizations.
    pub fn constraint_residual(&self, m: &DMatrix<f64>) -> f64 {
        match self.name {
            GroupName::So2 | GroupName::So3 => {
                let n = self.matrix_size;
                let gram = m.transpose() * m;
                let ortho = (&gram - DMatrix::identity(n, n)).abs().max();
                let det = (m.determinant() - 1.0).abs();
                ortho.max(det)
            }
            GroupName::Se2 => {
                let r = m.view((0, 0), (2, 2)).into_owned();
                let gram = &r.transpose() * &r;
                let ortho = (&gram - DMatrix::identity(2, 2)).abs().max();
                let det = (r.determinant() - 1.0).abs();
                let row = m[(2, 0)]
                    .abs()
                    .max(m[(2, 1)].abs())
                    .max((m[(2, 2)] - 1.0).abs());
                ortho.max(det).max(row)
            }
            GroupName::Heisenberg3 => {
                let mut res: f64 = 0.0;
                for i in 0..3 {
                    res = res.max((m[(i, i)] - 1.0).abs());
                    for j in 0..i {
                        res = res.max(m[(i, j)].abs());
                    }
                }
                res
            }
            GroupName::TransR1 => {
                let mut res = (m[(0, 0)] - 1.0).abs();
                res = res.max((m[(1, 1)] - 1.0).abs());
                res.max(m[(1, 0)].abs())
            }
        }
    }

    pub(crate) fn check_same(&self, other: &GroupSpec) -> Result<()> {
        if self.name == other.name {
            Ok(())
        } else {
            Err(Error::SpecMismatch {
                left: self.name.as_str().to_string(),
                right: other.name.as_str().to_string(),
            })
        }
    }
}

impl fmt::Debug for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupSpec")
            .field("name", &self.name)
            .field("matrix_size", &self.matrix_size)
            .field("algebra_dim", &self.algebra_dim)
            .finish()
    }
}

/// Element of one of the fixed matrix groups.
#[derive(Clone, Debug)]
pub struct GroupElement {
    pub spec: Arc<GroupSpec>,
    mat: DMatrix<f64>,
}

impl GroupElement {
    /// Wraps a matrix after checking the group constraint at the default
    /// tolerance.
    pub fn new(spec: Arc<GroupSpec>, mat: DMatrix<f64>) -> Result<GroupElement> {
        GroupElement::with_tolerance(spec, mat, CONSTRAINT_TOL)
    }

    pub fn with_tolerance(
        spec: Arc<GroupSpec>,
        mat: DMatrix<f64>,
        tol: f64,
    ) -> Result<GroupElement> {
        if mat.nrows() != spec.matrix_size || mat.ncols() != spec.matrix_size {
            return Err(Error::DimensionMismatch(format!(
                "{} expects {s}x{s} matrices, got {}x{}",
                spec.name,
                mat.nrows(),
                mat.ncols(),
                s = spec.matrix_size,
            )));
        }
        let residual = spec.constraint_residual(&mat);
        if !residual.is_finite() || residual > tol {
            return Err(Error::ConstraintViolation { residual });
        }
        Ok(GroupElement { spec, mat })
    }

    pub fn identity(spec: Arc<GroupSpec>) -> GroupElement {
        let mat = spec.identity_matrix();
        GroupElement { spec, mat }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn constraint_residual(&self) -> f64 {
        self.spec.constraint_residual(&self.mat)
    }

    pub fn compose(&self, rhs: &GroupElement) -> Result<GroupElement> {
        self.spec.check_same(&rhs.spec)?;
        Ok(GroupElement {
            spec: self.spec.clone(),
            mat: &self.mat * &rhs.mat,
        })
    }

    /// Group inverse through the closed form of each realization.
    pub fn inverse(&self) -> GroupElement {
        let mat = match self.spec.name {
            GroupName::So2 | GroupName::So3 => self.mat.transpose(),
            GroupName::Se2 => {
                let r = self.mat.view((0, 0), (2, 2)).into_owned();
                let t = self.mat.view((0, 2), (2, 1)).into_owned();
                let rt = r.transpose();
                let back = -(&rt * t);
                let mut m = DMatrix::identity(3, 3);
                m.view_mut((0, 0), (2, 2)).copy_from(&rt);
                m.view_mut((0, 2), (2, 1)).copy_from(&back);
                m
            }
            GroupName::Heisenberg3 => {
                // (I + N)^{-1} = I - N + N^2 for nilpotent N of index 3.
                let n = &self.mat - DMatrix::identity(3, 3);
                DMatrix::identity(3, 3) - &n + &n * &n
            }
            GroupName::TransR1 => {
                let mut m = self.mat.clone();
                m[(0, 1)] = -m[(0, 1)];
                m
            }
        };
        GroupElement {
            spec: self.spec.clone(),
            mat,
        }
    }

    pub fn conjugate_by(&self, g: &GroupElement) -> Result<GroupElement> {
        // g^{-1} * self * g
        g.inverse().compose(self)?.compose(g)
    }

    pub fn distance_to(&self, other: &GroupElement) -> f64 {
        (&self.mat - &other.mat).abs().max()
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (&self.mat - self.spec.identity_matrix()).abs().max() <= tol
    }
}

/// Algebra element in basis coordinates.
#[derive(Clone, Debug)]
pub struct AlgebraElement {
    pub spec: Arc<GroupSpec>,
    coords: DVector<f64>,
}

impl AlgebraElement {
    pub fn from_coords(spec: Arc<GroupSpec>, coords: DVector<f64>) -> Result<AlgebraElement> {
        if coords.len() != spec.algebra_dim {
            return Err(Error::DimensionMismatch(format!(
                "{} algebra has dimension {}, got {} coordinates",
                spec.name,
                spec.algebra_dim,
                coords.len()
            )));
        }
        Ok(AlgebraElement { spec, coords })
    }

    pub fn zero(spec: Arc<GroupSpec>) -> AlgebraElement {
        let coords = DVector::zeros(spec.algebra_dim);
        AlgebraElement { spec, coords }
    }

    pub fn basis_element(spec: Arc<GroupSpec>, index: usize) -> AlgebraElement {
        let mut coords = DVector::zeros(spec.algebra_dim);
        coords[index] = 1.0;
        AlgebraElement { spec, coords }
    }

    /// Projects an arbitrary square matrix onto the algebra basis.
    pub fn from_matrix(spec: Arc<GroupSpec>, m: &DMatrix<f64>) -> AlgebraElement {
        let coords = spec.coords_of(m);
        AlgebraElement { spec, coords }
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        self.spec.matrix_of(&self.coords)
    }

    /// Frobenius norm of the matrix realization.
    pub fn norm(&self) -> f64 {
        self.matrix().norm()
    }

    pub fn scale(&self, s: f64) -> AlgebraElement {
        AlgebraElement {
            spec: self.spec.clone(),
            coords: &self.coords * s,
        }
    }

    pub fn add(&self, rhs: &AlgebraElement) -> Result<AlgebraElement> {
        self.spec.check_same(&rhs.spec)?;
        Ok(AlgebraElement {
            spec: self.spec.clone(),
            coords: &self.coords + &rhs.coords,
        })
    }

    pub fn sub(&self, rhs: &AlgebraElement) -> Result<AlgebraElement> {
        self.spec.check_same(&rhs.spec)?;
        Ok(AlgebraElement {
            spec: self.spec.clone(),
            coords: &self.coords - &rhs.coords,
        })
    }

    /// Matrix commutator, projected back to coordinates. The projection
    /// residual is zero for the fixed groups since their algebras close
    /// under the bracket.
    pub fn bracket(&self, rhs: &AlgebraElement) -> Result<AlgebraElement> {
        self.spec.check_same(&rhs.spec)?;
        let a = self.matrix();
        let b = rhs.matrix();
        let c = &a * &b - &b * &a;
        Ok(AlgebraElement::from_matrix(self.spec.clone(), &c))
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }
}

/// Exponential map through per-group closed forms.
pub fn exp(a: &AlgebraElement) -> GroupElement {
    let spec = a.spec.clone();
    let c = &a.coords;
    let mat = match spec.name {
        GroupName::So2 => rot2(c[0]),
        GroupName::So3 => {
            let theta2 = c.dot(c);
            let theta = theta2.sqrt();
            let omega = a.matrix();
            let (s, q) = sin_cos_factors(theta);
            DMatrix::identity(3, 3) + &omega * s + (&omega * &omega) * q
        }
        GroupName::Se2 => {
            let w = c[2];
            let (s, q) = sin_cos_factors(w.abs());
            // V = s*I + q*w*J acting on the translation coordinates.
            let (a11, a21) = (s, q * w);
            let mut m = DMatrix::identity(3, 3);
            m.view_mut((0, 0), (2, 2)).copy_from(&rot2(w));
            m[(0, 2)] = a11 * c[0] - a21 * c[1];
            m[(1, 2)] = a21 * c[0] + a11 * c[1];
            m
        }
        GroupName::Heisenberg3 => {
            // Nilpotent: exp(A) = I + A + A^2/2 exactly.
            let am = a.matrix();
            DMatrix::identity(3, 3) + &am + (&am * &am) * 0.5
        }
        GroupName::TransR1 => {
            let mut m = DMatrix::identity(2, 2);
            m[(0, 1)] = c[0];
            m
        }
    };
    GroupElement { spec, mat }
}

/// Principal logarithm. Rejects rotation angles within
/// [`INJECTIVITY_MARGIN`] of the cut locus.
pub fn log(g: &GroupElement) -> Result<AlgebraElement> {
    let spec = g.spec.clone();
    let m = &g.mat;
    let coords = match spec.name {
        GroupName::So2 => {
            let theta = m[(1, 0)].atan2(m[(0, 0)]);
            guard_angle(theta.abs())?;
            DVector::from_vec(vec![theta])
        }
        GroupName::So3 => {
            let tr = m.trace();
            let cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
            let theta = cos.acos();
            guard_angle(theta)?;
            let skew = (m - m.transpose()) * 0.5;
            let v = DVector::from_vec(vec![skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]]);
            v * theta_over_sin(theta)
        }
        GroupName::Se2 => {
            let w = m[(1, 0)].atan2(m[(0, 0)]);
            guard_angle(w.abs())?;
            let (s, q) = sin_cos_factors(w.abs());
            let (a11, a21) = (s, q * w);
            let det = a11 * a11 + a21 * a21;
            let (tx, ty) = (m[(0, 2)], m[(1, 2)]);
            let vx = (a11 * tx + a21 * ty) / det;
            let vy = (-a21 * tx + a11 * ty) / det;
            DVector::from_vec(vec![vx, vy, w])
        }
        GroupName::Heisenberg3 => {
            // log(I + N) = N - N^2/2 for nilpotent N of index 3.
            let n = m - DMatrix::identity(3, 3);
            let l = &n - (&n * &n) * 0.5;
            spec.coords_of(&l)
        }
        GroupName::TransR1 => DVector::from_vec(vec![m[(0, 1)]]),
    };
    Ok(AlgebraElement { spec, coords })
}

/// Adjoint action `Ad_g(A) = g A g^{-1}` in coordinates.
pub fn ad_action(g: &GroupElement, a: &AlgebraElement) -> Result<AlgebraElement> {
    g.spec.check_same(&a.spec)?;
    let m = g.matrix() * a.matrix() * g.inverse().matrix();
    Ok(AlgebraElement::from_matrix(g.spec.clone(), &m))
}

fn rot2(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Returns (sin t / t, (1 - cos t) / t^2) with series fallbacks near zero.
fn sin_cos_factors(t: f64) -> (f64, f64) {
    if t.abs() < 1e-4 {
        let t2 = t * t;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
        )
    } else {
        (t.sin() / t, (1.0 - t.cos()) / (t * t))
    }
}

fn theta_over_sin(theta: f64) -> f64 {
    if theta < 1e-4 {
        let t2 = theta * theta;
        1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0
    } else {
        theta / theta.sin()
    }
}

fn guard_angle(angle: f64) -> Result<()> {
    if angle >= std::f64::consts::PI - INJECTIVITY_MARGIN {
        Err(Error::OutOfInjectivityRadius { angle })
    } else {
        Ok(())
    }
}

/// Sampled solution of a right-logarithmic-derivative equation, stored on a
/// uniform grid together with exact right-hand-side values for dense
/// (cubic Hermite) evaluation.
#[derive(Clone, Debug)]
pub struct GroupPath {
    pub spec: Arc<GroupSpec>,
    pub t0: f64,
    pub h: f64,
    pub mats: Vec<DMatrix<f64>>,
    pub derivs: Vec<DMatrix<f64>>,
}

impl GroupPath {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h * (self.mats.len().saturating_sub(1)) as f64
    }

    pub fn endpoint(&self) -> GroupElement {
        GroupElement {
            spec: self.spec.clone(),
            mat: self.mats.last().expect("group path is never empty").clone(),
        }
    }

    pub fn start(&self) -> GroupElement {
        GroupElement {
            spec: self.spec.clone(),
            mat: self.mats[0].clone(),
        }
    }

    /// Dense evaluation by cubic Hermite interpolation on the sample grid.
    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        if self.mats.len() == 1 {
            return self.mats[0].clone();
        }
        let n_cells = self.mats.len() - 1;
        let mut cell = ((t - self.t0) / self.h).floor() as isize;
        cell = cell.clamp(0, n_cells as isize - 1);
        let i = cell as usize;
        let s = ((t - self.t0) / self.h - i as f64).clamp(0.0, 1.0);
        hermite_matrix(
            &self.mats[i],
            &self.derivs[i],
            &self.mats[i + 1],
            &self.derivs[i + 1],
            s,
            self.h,
        )
    }

    /// Hermite derivative at `t`; superconvergent at cell midpoints.
    pub fn eval_derivative(&self, t: f64) -> DMatrix<f64> {
        if self.mats.len() == 1 {
            return DMatrix::zeros(self.spec.matrix_size, self.spec.matrix_size);
        }
        let n_cells = self.mats.len() - 1;
        let mut cell = ((t - self.t0) / self.h).floor() as isize;
        cell = cell.clamp(0, n_cells as isize - 1);
        let i = cell as usize;
        let s = ((t - self.t0) / self.h - i as f64).clamp(0.0, 1.0);
        hermite_matrix_derivative(
            &self.mats[i],
            &self.derivs[i],
            &self.mats[i + 1],
            &self.derivs[i + 1],
            s,
            self.h,
        )
    }

    pub fn max_constraint_residual(&self) -> f64 {
        self.mats
            .iter()
            .map(|m| self.spec.constraint_residual(m))
            .fold(0.0, f64::max)
    }
}

fn hermite_matrix(
    p0: &DMatrix<f64>,
    m0: &DMatrix<f64>,
    p1: &DMatrix<f64>,
    m1: &DMatrix<f64>,
    s: f64,
    h: f64,
) -> DMatrix<f64> {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    p0 * h00 + m0 * (h10 * h) + p1 * h01 + m1 * (h11 * h)
}

fn hermite_matrix_derivative(
    p0: &DMatrix<f64>,
    m0: &DMatrix<f64>,
    p1: &DMatrix<f64>,
    m1: &DMatrix<f64>,
    s: f64,
    h: f64,
) -> DMatrix<f64> {
    let s2 = s * s;
    let h00 = 6.0 * s2 - 6.0 * s;
    let h10 = 3.0 * s2 - 4.0 * s + 1.0;
    let h01 = -6.0 * s2 + 6.0 * s;
    let h11 = 3.0 * s2 - 2.0 * s;
    p0 * (h00 / h) + m0 * h10 + p1 * (h01 / h) + m1 * h11
}

/// Solves `dg/dt g^{-1} = Y(t)`, `g(t0) = g0`, on `[t0, t1]` with a fixed
/// step, using a commutator-free fourth-order Lie-group scheme: each step
/// composes two exponentials of weighted combinations of `Y` at the step
/// endpoints and midpoint, so every sample satisfies the group constraint
/// by construction.
pub fn solve_right_log_ode<F>(
    y: F,
    g0: &GroupElement,
    t0: f64,
    t1: f64,
    step: f64,
) -> Result<GroupPath>
where
    F: Fn(f64) -> Result<AlgebraElement>,
{
    if !(step > 0.0) || !t0.is_finite() || !t1.is_finite() || t1 < t0 {
        return Err(Error::DimensionMismatch(format!(
            "invalid integration interval [{t0}, {t1}] or step {step}"
        )));
    }
    let spec = g0.spec.clone();
    let eval = |t: f64| -> Result<DVector<f64>> {
        let a = y(t)?;
        spec.check_same(&a.spec)?;
        if !a.is_finite() {
            return Err(Error::NonFiniteRhs { t });
        }
        Ok(a.coords().clone())
    };

    let span = t1 - t0;
    if span == 0.0 {
        let d0 = spec.matrix_of(&eval(t0)?) * &g0.mat;
        return Ok(GroupPath {
            spec,
            t0,
            h: step,
            mats: vec![g0.mat.clone()],
            derivs: vec![d0],
        });
    }
    let n = (span / step).ceil().max(1.0) as usize;
    let h = span / n as f64;

    let mut mats = Vec::with_capacity(n + 1);
    let mut derivs = Vec::with_capacity(n + 1);
    let mut g = g0.mat.clone();
    let mut y_left = eval(t0)?;
    mats.push(g.clone());
    derivs.push(spec.matrix_of(&y_left) * &g);

    for i in 0..n {
        let t = t0 + h * i as f64;
        let y_mid = eval(t + 0.5 * h)?;
        let y_right = eval(if i + 1 == n { t1 } else { t + h })?;
        // Fourth-order commutator-free update: exp of the late-weighted
        // combination composed onto exp of the early-weighted one.
        let early = (&y_left * 3.0 + &y_mid * 4.0 - &y_right) * (h / 12.0);
        let late = (&y_left * -1.0 + &y_mid * 4.0 + &y_right * 3.0) * (h / 12.0);
        let e1 = exp(&AlgebraElement {
            spec: spec.clone(),
            coords: early,
        });
        let e2 = exp(&AlgebraElement {
            spec: spec.clone(),
            coords: late,
        });
        g = e2.mat * e1.mat * g;
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteRhs { t: t + h });
        }
        mats.push(g.clone());
        derivs.push(spec.matrix_of(&y_right) * &g);
        y_left = y_right;
    }

    Ok(GroupPath {
        spec,
        t0,
        h,
        mats,
        derivs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const ALL: [GroupName; 5] = [
        GroupName::So2,
        GroupName::So3,
        GroupName::Se2,
        GroupName::Heisenberg3,
        GroupName::TransR1,
    ];

    fn alg(spec: &Arc<GroupSpec>, coords: &[f64]) -> AlgebraElement {
        AlgebraElement::from_coords(spec.clone(), DVector::from_row_slice(coords)).unwrap()
    }

    #[test]
    fn basis_is_independent_and_frobenius_orthogonal() {
        for name in ALL {
            let spec = name.spec();
            for i in 0..spec.algebra_dim {
                for j in 0..spec.algebra_dim {
                    let dot = spec.basis[i].dot(&spec.basis[j]);
                    if i == j {
                        assert!(dot > 0.0, "{name}: degenerate basis element {i}");
                    } else {
                        assert!(dot.abs() < 1e-15, "{name}: basis {i},{j} not orthogonal");
                    }
                }
            }
        }
    }

    #[test]
    fn brackets_of_basis_elements_stay_in_the_algebra() {
        for name in ALL {
            let spec = name.spec();
            for i in 0..spec.algebra_dim {
                for j in 0..spec.algebra_dim {
                    let a = AlgebraElement::basis_element(spec.clone(), i);
                    let b = AlgebraElement::basis_element(spec.clone(), j);
                    let raw = a.matrix() * b.matrix() - b.matrix() * a.matrix();
                    let projected = AlgebraElement::from_matrix(spec.clone(), &raw).matrix();
                    let residual = (&raw - &projected).abs().max();
                    assert!(
                        residual <= 1e-10,
                        "{name}: bracket [{i},{j}] leaves the span (residual {residual:.3e})"
                    );
                }
            }
        }
    }

    #[test]
    fn so3_structure_constants() {
        let spec = GroupName::So3.spec();
        let e1 = AlgebraElement::basis_element(spec.clone(), 0);
        let e2 = AlgebraElement::basis_element(spec.clone(), 1);
        let b = e1.bracket(&e2).unwrap();
        assert!(
            (b.coords() - DVector::from_row_slice(&[0.0, 0.0, 1.0]))
                .abs()
                .max()
                < 1e-15
        );
    }

    #[test]
    fn heisenberg_central_bracket() {
        let spec = GroupName::Heisenberg3.spec();
        let x = AlgebraElement::basis_element(spec.clone(), 0);
        let y = AlgebraElement::basis_element(spec.clone(), 1);
        let b = x.bracket(&y).unwrap();
        assert!(
            (b.coords() - DVector::from_row_slice(&[0.0, 0.0, 1.0]))
                .abs()
                .max()
                < 1e-15
        );
    }

    #[test]
    fn coordinate_matrix_round_trip() {
        for name in ALL {
            let spec = name.spec();
            let coords = DVector::from_iterator(
                spec.algebra_dim,
                (0..spec.algebra_dim).map(|i| 0.3 + 0.41 * i as f64),
            );
            let a = AlgebraElement::from_coords(spec.clone(), coords.clone()).unwrap();
            let back = spec.coords_of(&a.matrix());
            assert!(
                (&back - &coords).abs().max() <= 1e-12,
                "{name}: round trip failed"
            );
        }
    }

    #[test]
    fn exp_quarter_turn_so2() {
        let spec = GroupName::So2.spec();
        let g = exp(&alg(&spec, &[PI / 2.0]));
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!((g.matrix() - expected).abs().max() < 1e-12);
    }

    #[test]
    fn log_recovers_so2_angle() {
        let spec = GroupName::So2.spec();
        let g = exp(&alg(&spec, &[0.7]));
        let a = log(&g).unwrap();
        assert!((a.coords()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn log_rejects_angles_near_the_cut_locus() {
        let spec = GroupName::So3.spec();
        let g = exp(&alg(&spec, &[PI - 1e-9, 0.0, 0.0]));
        match log(&g) {
            Err(Error::OutOfInjectivityRadius { .. }) => {}
            other => panic!("expected injectivity radius error, got {other:?}"),
        }
    }

    #[test]
    fn exp_log_round_trip_all_groups() {
        for name in ALL {
            let spec = name.spec();
            let coords = DVector::from_iterator(
                spec.algebra_dim,
                (0..spec.algebra_dim).map(|i| 0.23 - 0.17 * i as f64),
            );
            let a = AlgebraElement::from_coords(spec.clone(), coords.clone()).unwrap();
            let back = log(&exp(&a)).unwrap();
            assert!(
                (back.coords() - &coords).abs().max() <= 1e-10,
                "{name}: exp/log round trip failed"
            );
        }
    }

    #[test]
    fn heisenberg_exp_is_polynomial() {
        let spec = GroupName::Heisenberg3.spec();
        let g = exp(&alg(&spec, &[2.0, 3.0, 1.0]));
        // exp(aX + bY + cZ) = [[1, a, c + ab/2], [0, 1, b], [0, 0, 1]]
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 4.0, 0.0, 1.0, 3.0, 0.0, 0.0, 1.0]);
        assert!((g.matrix() - expected).abs().max() < 1e-14);
    }

    #[test]
    fn se2_exp_log_closed_form() {
        let spec = GroupName::Se2.spec();
        let a = alg(&spec, &[1.0, -0.5, 0.9]);
        let g = exp(&a);
        assert!(g.constraint_residual() < 1e-12);
        let back = log(&g).unwrap();
        assert!((back.coords() - a.coords()).abs().max() < 1e-12);
        // Pure rotation keeps the origin fixed.
        let r = exp(&alg(&spec, &[0.0, 0.0, 1.3]));
        assert!(r.matrix()[(0, 2)].abs() < 1e-15 && r.matrix()[(1, 2)].abs() < 1e-15);
    }

    #[test]
    fn adjoint_rotates_so3_generators() {
        let spec = GroupName::So3.spec();
        let g = exp(&alg(&spec, &[0.0, 0.0, PI / 2.0]));
        let a = AlgebraElement::basis_element(spec.clone(), 0);
        let moved = ad_action(&g, &a).unwrap();
        assert!(
            (moved.coords() - DVector::from_row_slice(&[0.0, 1.0, 0.0]))
                .abs()
                .max()
                < 1e-10
        );
    }

    #[test]
    fn adjoint_is_a_bracket_automorphism() {
        let spec = GroupName::Se2.spec();
        let g = exp(&alg(&spec, &[0.4, -0.2, 0.8]));
        let a = alg(&spec, &[0.3, 0.1, -0.5]);
        let b = alg(&spec, &[-0.7, 0.2, 0.25]);
        let lhs = ad_action(&g, &a.bracket(&b).unwrap()).unwrap();
        let rhs = ad_action(&g, &a)
            .unwrap()
            .bracket(&ad_action(&g, &b).unwrap())
            .unwrap();
        assert!((lhs.coords() - rhs.coords()).abs().max() < 1e-12);
    }

    #[test]
    fn mixed_specs_are_rejected() {
        let a = AlgebraElement::basis_element(GroupName::So2.spec(), 0);
        let b = AlgebraElement::basis_element(GroupName::TransR1.spec(), 0);
        match a.bracket(&b) {
            Err(Error::SpecMismatch { .. }) => {}
            other => panic!("expected spec mismatch, got {other:?}"),
        }
    }

    #[test]
    fn element_constructor_checks_the_constraint() {
        let spec = GroupName::So2.spec();
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        match GroupElement::new(spec, bad) {
            Err(Error::ConstraintViolation { .. }) => {}
            other => panic!("expected constraint violation, got {other:?}"),
        }
    }

    #[test]
    fn abelian_right_log_ode_is_a_quadrature() {
        // Y(t) = t * J on [0, 1] integrates to a rotation by 1/2.
        let spec = GroupName::So2.spec();
        let g0 = GroupElement::identity(spec.clone());
        let path = solve_right_log_ode(
            |t| Ok(alg(&GroupName::So2.spec(), &[t])),
            &g0,
            0.0,
            1.0,
            1e-2,
        )
        .unwrap();
        let angle = log(&path.endpoint()).unwrap().coords()[0];
        assert!((angle - 0.5).abs() < 1e-12);
        assert!(path.max_constraint_residual() < 1e-12);
    }

    #[test]
    fn constant_rhs_reproduces_exp() {
        for name in ALL {
            let spec = name.spec();
            let coords = DVector::from_iterator(
                spec.algebra_dim,
                (0..spec.algebra_dim).map(|i| 0.31 + 0.11 * i as f64),
            );
            let a = AlgebraElement::from_coords(spec.clone(), coords).unwrap();
            let g0 = GroupElement::identity(spec.clone());
            let a2 = a.clone();
            let path = solve_right_log_ode(move |_| Ok(a2.clone()), &g0, 0.0, 1.0, 0.05).unwrap();
            let direct = exp(&a);
            assert!(
                path.endpoint().distance_to(&direct) < 1e-13,
                "{name}: constant-coefficient solve disagrees with exp"
            );
        }
    }

    #[test]
    fn solver_rejects_non_finite_rhs() {
        let spec = GroupName::So2.spec();
        let g0 = GroupElement::identity(spec.clone());
        let res = solve_right_log_ode(
            move |t| {
                Ok(AlgebraElement {
                    spec: GroupName::So2.spec(),
                    coords: DVector::from_vec(vec![if t > 0.5 { f64::NAN } else { 1.0 }]),
                })
            },
            &g0,
            0.0,
            1.0,
            0.1,
        );
        match res {
            Err(Error::NonFiniteRhs { .. }) => {}
            other => panic!("expected non-finite RHS error, got {other:?}"),
        }
    }

    #[test]
    fn group_path_dense_eval_matches_samples() {
        let spec = GroupName::So3.spec();
        let g0 = GroupElement::identity(spec.clone());
        let path = solve_right_log_ode(
            |t| Ok(alg(&GroupName::So3.spec(), &[t.sin(), (2.0 * t).cos(), t])),
            &g0,
            0.0,
            2.0,
            0.01,
        )
        .unwrap();
        let i = 37;
        let t = path.t0 + path.h * i as f64;
        assert!((path.eval(t) - &path.mats[i]).abs().max() < 1e-13);
    }
}
