//! Piecewise controls and the admissible base curves they generate.
//!
//! A control assigns a fiber value to every time in an interval, piecewise
//! over abutting segments; each segment also carries a sign selecting the
//! bundle anchor or its inverse. Integrating the anchored velocity of a
//! control realizes the base curve. Controls compose by concatenation
//! (with fiber jumps allowed), reverse by time reflection, and, on linear
//! bundles, invert by reflection plus fiberwise negation and transform
//! under strictly monotone reparameterizations.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::anchored::{rk4_segment, AnchoredBundle, SampledSegment};
use crate::{Error, Result};

/// Junction tolerance for [`compose_curves`].
pub const JUNCTION_TOL: f64 = 1e-7;

/// Sampled-derivative threshold below which a reparameterization map is
/// rejected as not strictly increasing.
pub const MONOTONE_TOL: f64 = 1e-8;

/// Orientation of a control segment: whether the segment follows the
/// anchor or the inverse-bundle anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }

    pub fn from_i8(v: i8) -> Result<Sign> {
        match v {
            1 => Ok(Sign::Plus),
            -1 => Ok(Sign::Minus),
            other => Err(Error::InvalidScenario(format!(
                "segment sign must be 1 or -1, got {other}"
            ))),
        }
    }

    pub fn to_i8(self) -> i8 {
        match self {
            Sign::Plus => 1,
            Sign::Minus => -1,
        }
    }
}

type CustomFn = dyn Fn(f64) -> DVector<f64> + Send + Sync;

/// Time profile of one control segment. The parametric kinds evaluate in
/// local time (seconds since the segment start), which keeps them stable
/// under time shifts; `Custom` closures receive absolute time.
#[derive(Clone)]
pub enum ControlShape {
    Constant {
        value: DVector<f64>,
    },
    /// `u_a(tau) = sum_j coeffs[a][j] * tau^j` in local time.
    Polynomial {
        coeffs: Vec<Vec<f64>>,
    },
    /// `u_a(tau) = amplitude[a] * sin(omega[a] * tau + phase[a])`.
    Sine {
        amplitude: Vec<f64>,
        omega: Vec<f64>,
        phase: Vec<f64>,
    },
    Custom {
        dim: usize,
        f: Arc<CustomFn>,
    },
}

impl std::fmt::Debug for ControlShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlShape::Constant { value } => {
                f.debug_struct("Constant").field("value", value).finish()
            }
            ControlShape::Polynomial { coeffs } => f
                .debug_struct("Polynomial")
                .field("coeffs", coeffs)
                .finish(),
            ControlShape::Sine {
                amplitude,
                omega,
                phase,
            } => f
                .debug_struct("Sine")
                .field("amplitude", amplitude)
                .field("omega", omega)
                .field("phase", phase)
                .finish(),
            ControlShape::Custom { dim, .. } => f
                .debug_struct("Custom")
                .field("dim", dim)
                .finish_non_exhaustive(),
        }
    }
}

impl ControlShape {
    pub fn fiber_dim(&self) -> usize {
        match self {
            ControlShape::Constant { value } => value.len(),
            ControlShape::Polynomial { coeffs } => coeffs.len(),
            ControlShape::Sine { amplitude, .. } => amplitude.len(),
            ControlShape::Custom { dim, .. } => *dim,
        }
    }

    fn eval(&self, t_abs: f64, t0: f64) -> DVector<f64> {
        let tau = t_abs - t0;
        match self {
            ControlShape::Constant { value } => value.clone(),
            ControlShape::Polynomial { coeffs } => {
                DVector::from_iterator(coeffs.len(), coeffs.iter().map(|c| horner(c, tau)))
            }
            ControlShape::Sine {
                amplitude,
                omega,
                phase,
            } => DVector::from_iterator(
                amplitude.len(),
                amplitude
                    .iter()
                    .zip(omega)
                    .zip(phase)
                    .map(|((a, w), p)| a * (w * tau + p).sin()),
            ),
            ControlShape::Custom { f, .. } => f(t_abs),
        }
    }

    /// Shape evaluating to the original values traversed backwards, for a
    /// segment of length `len` (local `tau -> len - tau`). `t_sum` is the
    /// sum of the original global endpoints, used for `Custom` closures.
    fn reflected(&self, len: f64, t_sum: f64) -> ControlShape {
        match self {
            ControlShape::Constant { value } => ControlShape::Constant {
                value: value.clone(),
            },
            ControlShape::Polynomial { coeffs } => ControlShape::Polynomial {
                coeffs: coeffs.iter().map(|c| reflect_poly(c, len)).collect(),
            },
            ControlShape::Sine {
                amplitude,
                omega,
                phase,
            } => ControlShape::Sine {
                amplitude: amplitude.clone(),
                omega: omega.iter().map(|w| -w).collect(),
                phase: phase.iter().zip(omega).map(|(p, w)| w * len + p).collect(),
            },
            ControlShape::Custom { dim, f } => {
                let f = f.clone();
                ControlShape::Custom {
                    dim: *dim,
                    f: Arc::new(move |t| f(t_sum - t)),
                }
            }
        }
    }

    fn negated(&self) -> ControlShape {
        match self {
            ControlShape::Constant { value } => ControlShape::Constant { value: -value },
            ControlShape::Polynomial { coeffs } => ControlShape::Polynomial {
                coeffs: coeffs
                    .iter()
                    .map(|c| c.iter().map(|x| -x).collect())
                    .collect(),
            },
            ControlShape::Sine {
                amplitude,
                omega,
                phase,
            } => ControlShape::Sine {
                amplitude: amplitude.iter().map(|a| -a).collect(),
                omega: omega.clone(),
                phase: phase.clone(),
            },
            ControlShape::Custom { dim, f } => {
                let f = f.clone();
                ControlShape::Custom {
                    dim: *dim,
                    f: Arc::new(move |t| -f(t)),
                }
            }
        }
    }

    /// Same values at shifted absolute times (parametric kinds are stored
    /// in local time and need no change).
    fn shifted(&self, delta: f64) -> ControlShape {
        match self {
            ControlShape::Custom { dim, f } => {
                let f = f.clone();
                ControlShape::Custom {
                    dim: *dim,
                    f: Arc::new(move |t| f(t - delta)),
                }
            }
            other => other.clone(),
        }
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Coefficients of `p(len - tau)` given those of `p(tau)`.
fn reflect_poly(coeffs: &[f64], len: f64) -> Vec<f64> {
    let n = coeffs.len();
    let mut out = vec![0.0; n];
    // binom[j][m] built row by row.
    for (j, c) in coeffs.iter().enumerate() {
        let mut binom = 1.0;
        for (m, slot) in out.iter_mut().enumerate().take(j + 1) {
            // c * binom(j, m) * len^(j-m) * (-1)^m contributes to tau^m.
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            *slot += c * binom * len.powi((j - m) as i32) * sign;
            binom *= (j - m) as f64 / (m + 1) as f64;
        }
    }
    out
}

/// One control segment on `[t0, t1)` with an orientation sign.
#[derive(Clone, Debug)]
pub struct ControlSegment {
    pub t0: f64,
    pub t1: f64,
    pub sign: Sign,
    pub shape: ControlShape,
}

impl ControlSegment {
    pub fn new(t0: f64, t1: f64, sign: Sign, shape: ControlShape) -> Result<ControlSegment> {
        if !t0.is_finite() || !t1.is_finite() || !(t0 < t1) {
            return Err(Error::InvalidScenario(format!(
                "segment needs t0 < t1, got [{t0}, {t1}]"
            )));
        }
        Ok(ControlSegment {
            t0,
            t1,
            sign,
            shape,
        })
    }

    pub fn constant(t0: f64, t1: f64, sign: Sign, value: DVector<f64>) -> Result<ControlSegment> {
        ControlSegment::new(t0, t1, sign, ControlShape::Constant { value })
    }

    pub fn duration(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn value_at(&self, t: f64) -> DVector<f64> {
        self.shape.eval(t, self.t0)
    }
}

/// Piecewise control over exactly abutting segments. May be empty, which
/// represents the zero-duration control at time 0.
#[derive(Clone, Debug)]
pub struct PiecewiseControl {
    fiber_dim: usize,
    segments: Vec<ControlSegment>,
}

impl PiecewiseControl {
    pub fn new(fiber_dim: usize, segments: Vec<ControlSegment>) -> Result<PiecewiseControl> {
        for (i, seg) in segments.iter().enumerate() {
            if seg.shape.fiber_dim() != fiber_dim {
                return Err(Error::DimensionMismatch(format!(
                    "segment {i} has fiber dimension {}, expected {fiber_dim}",
                    seg.shape.fiber_dim()
                )));
            }
            if i > 0 && segments[i - 1].t1 != seg.t0 {
                return Err(Error::EndpointMismatch {
                    index: i,
                    gap: (seg.t0 - segments[i - 1].t1).abs(),
                });
            }
        }
        Ok(PiecewiseControl {
            fiber_dim,
            segments,
        })
    }

    pub fn empty(fiber_dim: usize) -> PiecewiseControl {
        PiecewiseControl {
            fiber_dim,
            segments: Vec::new(),
        }
    }

    pub fn fiber_dim(&self) -> usize {
        self.fiber_dim
    }

    pub fn segments(&self) -> &[ControlSegment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.segments.first().map_or(0.0, |s| s.t0)
    }

    pub fn end_time(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.t1)
    }

    pub fn duration(&self) -> f64 {
        self.end_time() - self.start_time()
    }

    /// Index of the segment whose half-open interval contains `t`; the
    /// final segment is closed on the right.
    pub fn segment_index_at(&self, t: f64) -> Option<usize> {
        if self.segments.is_empty() {
            return None;
        }
        if t < self.start_time() || t > self.end_time() {
            return None;
        }
        let idx = self
            .segments
            .partition_point(|s| s.t1 <= t)
            .min(self.segments.len() - 1);
        Some(idx)
    }

    pub fn value_at(&self, t: f64) -> Option<DVector<f64>> {
        self.segment_index_at(t)
            .map(|i| self.segments[i].value_at(t))
    }

    pub fn sign_at(&self, t: f64) -> Option<Sign> {
        self.segment_index_at(t).map(|i| self.segments[i].sign)
    }

    /// Same control starting at `new_start` instead.
    pub fn shifted_to(&self, new_start: f64) -> PiecewiseControl {
        let delta = new_start - self.start_time();
        let mut t_cursor = new_start;
        let segments = self
            .segments
            .iter()
            .map(|s| {
                let t0 = t_cursor;
                let t1 = t0 + s.duration();
                t_cursor = t1;
                ControlSegment {
                    t0,
                    t1,
                    sign: s.sign,
                    shape: s.shape.shifted(delta),
                }
            })
            .collect();
        PiecewiseControl {
            fiber_dim: self.fiber_dim,
            segments,
        }
    }

    /// Time-reflected control: traverses the same fiber values backwards
    /// with all segment signs flipped. Realizing it drives the base curve
    /// along the original trace in reverse.
    pub fn reverse(&self) -> PiecewiseControl {
        let a = self.start_time();
        let b = self.end_time();
        let segments = self
            .segments
            .iter()
            .rev()
            .map(|s| ControlSegment {
                t0: a + b - s.t1,
                t1: a + b - s.t0,
                sign: s.sign.flip(),
                shape: s.shape.reflected(s.duration(), a + b),
            })
            .collect();
        PiecewiseControl {
            fiber_dim: self.fiber_dim,
            segments,
        }
    }

    /// Fiberwise negation of the reverse. On a linear bundle this realizes
    /// the same backwards base curve while restoring each segment's
    /// original sign, which is what makes it a group-style inverse for
    /// loop composition.
    pub fn inverse(&self, bundle: &AnchoredBundle) -> Result<PiecewiseControl> {
        if !bundle.linear {
            return Err(Error::NotLinear);
        }
        let reversed = self.reverse();
        let segments = reversed
            .segments
            .into_iter()
            .map(|s| ControlSegment {
                t0: s.t0,
                t1: s.t1,
                sign: s.sign.flip(),
                shape: s.shape.negated(),
            })
            .collect();
        Ok(PiecewiseControl {
            fiber_dim: self.fiber_dim,
            segments,
        })
    }

    /// Transforms the control under a strictly increasing reparameterization
    /// of time, scaling values by the inverse derivative so the realized
    /// base trace is unchanged on linear bundles.
    pub fn reparameterize(
        &self,
        phi: &Reparam,
        bundle: &AnchoredBundle,
    ) -> Result<PiecewiseControl> {
        if !bundle.linear {
            return Err(Error::NotLinear);
        }
        phi.validate(self.start_time(), self.end_time())?;
        let mut segments = Vec::with_capacity(self.segments.len());
        let mut left = phi.codomain.0;
        for (i, s) in self.segments.iter().enumerate() {
            let right = if i + 1 == self.segments.len() {
                phi.codomain.1
            } else {
                phi.eval(s.t1)
            };
            let phi = phi.clone();
            let shape = s.shape.clone();
            let seg_t0 = s.t0;
            let dim = self.fiber_dim;
            let new_shape = ControlShape::Custom {
                dim,
                f: Arc::new(move |t_new| {
                    let t = phi.invert(t_new);
                    let rate = phi.derivative(t);
                    shape.eval(t, seg_t0) / rate
                }),
            };
            segments.push(ControlSegment {
                t0: left,
                t1: right,
                sign: s.sign,
                shape: new_shape,
            });
            left = right;
        }
        Ok(PiecewiseControl {
            fiber_dim: self.fiber_dim,
            segments,
        })
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.segments.iter().map(|s| s.t0).collect();
        ts.push(self.end_time());
        ts
    }
}

/// Strictly increasing time reparameterization with declared domain and
/// codomain.
#[derive(Clone)]
pub struct Reparam {
    map: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub domain: (f64, f64),
    pub codomain: (f64, f64),
}

impl Reparam {
    pub fn new(
        map: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        domain: (f64, f64),
        codomain: (f64, f64),
    ) -> Reparam {
        Reparam {
            map,
            domain,
            codomain,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        (self.map)(t)
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let h = 1e-6 * (1.0 + t.abs());
        ((self.map)(t + h) - (self.map)(t - h)) / (2.0 * h)
    }

    /// Monotone inversion by bisection on the domain.
    pub fn invert(&self, s: f64) -> f64 {
        let (mut lo, mut hi) = self.domain;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if (self.map)(mid) <= s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Checks the declared endpoints and samples the derivative on a
    /// uniform grid (including both endpoints and the exact midpoint).
    fn validate(&self, a: f64, b: f64) -> Result<()> {
        if (self.domain.0 - a).abs() > 1e-9 * (1.0 + a.abs())
            || (self.domain.1 - b).abs() > 1e-9 * (1.0 + b.abs())
        {
            return Err(Error::DimensionMismatch(format!(
                "reparameterization domain [{}, {}] does not match control interval [{a}, {b}]",
                self.domain.0, self.domain.1
            )));
        }
        let scale = 1.0 + self.codomain.0.abs().max(self.codomain.1.abs());
        if (self.eval(a) - self.codomain.0).abs() > 1e-9 * scale
            || (self.eval(b) - self.codomain.1).abs() > 1e-9 * scale
        {
            return Err(Error::NotMonotone);
        }
        const CELLS: usize = 256;
        for i in 0..=CELLS {
            let t = a + (b - a) * i as f64 / CELLS as f64;
            if self.derivative(t) <= MONOTONE_TOL {
                return Err(Error::NotMonotone);
            }
        }
        Ok(())
    }
}

/// An integrated base curve: the control plus one sampled segment per
/// control segment (a single zero-duration segment for empty controls).
#[derive(Clone)]
pub struct RealizedCurve {
    pub bundle: Arc<AnchoredBundle>,
    pub control: PiecewiseControl,
    pub segments: Vec<SampledSegment>,
}

/// Integrates the anchored velocity of `control` from `x0` with a fixed
/// RK4 step per segment (the step divides each segment duration exactly).
pub fn integrate_admissible(
    bundle: &Arc<AnchoredBundle>,
    control: &PiecewiseControl,
    x0: &DVector<f64>,
    step: f64,
) -> Result<RealizedCurve> {
    if control.fiber_dim() != bundle.fiber_dim {
        return Err(Error::DimensionMismatch(format!(
            "control fiber dimension {} does not match bundle {}",
            control.fiber_dim(),
            bundle.fiber_dim
        )));
    }
    if x0.len() != bundle.base_dim {
        return Err(Error::DimensionMismatch(format!(
            "start point has dimension {}, bundle base is {}",
            x0.len(),
            bundle.base_dim
        )));
    }
    let mut segments = Vec::with_capacity(control.segments().len().max(1));
    let mut x = x0.clone();
    for seg in control.segments() {
        let sign = seg.sign.factor();
        let sampled = rk4_segment(
            |t, p| Ok(bundle.evaluate_anchor(p, &seg.value_at(t))? * sign),
            &x,
            seg.t0,
            seg.duration(),
            step,
        )?;
        x = sampled.endpoint().clone();
        segments.push(sampled);
    }
    if segments.is_empty() {
        segments.push(rk4_segment(
            |_, _| Ok(DVector::zeros(bundle.base_dim)),
            &x,
            control.start_time(),
            0.0,
            step,
        )?);
    }
    Ok(RealizedCurve {
        bundle: bundle.clone(),
        control: control.clone(),
        segments,
    })
}

impl RealizedCurve {
    pub fn start(&self) -> &DVector<f64> {
        &self.segments[0].points[0]
    }

    pub fn endpoint(&self) -> &DVector<f64> {
        self.segments.last().unwrap().endpoint()
    }

    pub fn start_time(&self) -> f64 {
        self.segments[0].t0
    }

    pub fn end_time(&self) -> f64 {
        self.segments.last().unwrap().t1()
    }

    pub fn closure_gap(&self) -> f64 {
        (self.endpoint() - self.start()).norm()
    }

    fn locate(&self, t: f64) -> (usize, usize, f64) {
        let si = self
            .segments
            .partition_point(|s| s.t1() <= t)
            .min(self.segments.len() - 1);
        let seg = &self.segments[si];
        if seg.points.len() == 1 {
            return (si, 0, 0.0);
        }
        let n_cells = seg.points.len() - 1;
        let mut cell = ((t - seg.t0) / seg.h).floor() as isize;
        cell = cell.clamp(0, n_cells as isize - 1);
        let s = ((t - seg.t0) / seg.h - cell as f64).clamp(0.0, 1.0);
        (si, cell as usize, s)
    }

    /// Dense evaluation by cubic Hermite interpolation within the sample
    /// grid; exact at the nodes.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let (si, i, s) = self.locate(t);
        let seg = &self.segments[si];
        if seg.points.len() == 1 {
            return seg.points[0].clone();
        }
        hermite_vec(
            &seg.points[i],
            &seg.derivs[i],
            &seg.points[i + 1],
            &seg.derivs[i + 1],
            s,
            seg.h,
        )
    }

    /// Hermite time derivative; superconvergent at cell midpoints.
    pub fn eval_derivative(&self, t: f64) -> DVector<f64> {
        let (si, i, s) = self.locate(t);
        let seg = &self.segments[si];
        if seg.points.len() == 1 {
            return DVector::zeros(self.bundle.base_dim);
        }
        hermite_vec_derivative(
            &seg.points[i],
            &seg.derivs[i],
            &seg.points[i + 1],
            &seg.derivs[i + 1],
            s,
            seg.h,
        )
    }

    /// Maximum residual of the governing equation at grid-cell midpoints,
    /// probing up to `max_probes` midpoints spread over the curve.
    pub fn max_admissibility_residual(&self, max_probes: usize) -> Result<f64> {
        let mut worst = 0.0_f64;
        let total_cells: usize = self
            .segments
            .iter()
            .map(|s| s.points.len().saturating_sub(1))
            .sum();
        if total_cells == 0 {
            return Ok(0.0);
        }
        let stride = (total_cells / max_probes.max(1)).max(1);
        let mut cell_counter = 0;
        for (si, seg) in self.segments.iter().enumerate() {
            let n_cells = seg.points.len().saturating_sub(1);
            let ctrl_seg =
                &self.control.segments()[si.min(self.control.segments().len().saturating_sub(1))];
            for i in (0..n_cells).step_by(stride) {
                cell_counter += 1;
                if cell_counter > max_probes {
                    break;
                }
                let tm = seg.t0 + seg.h * (i as f64 + 0.5);
                let xm = self.eval(tm);
                let dm = self.eval_derivative(tm);
                let rhs = self.bundle.evaluate_anchor(&xm, &ctrl_seg.value_at(tm))?
                    * ctrl_seg.sign.factor();
                worst = worst.max((dm - rhs).norm());
            }
        }
        Ok(worst)
    }
}

fn hermite_vec(
    p0: &DVector<f64>,
    m0: &DVector<f64>,
    p1: &DVector<f64>,
    m1: &DVector<f64>,
    s: f64,
    h: f64,
) -> DVector<f64> {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    p0 * h00 + m0 * (h10 * h) + p1 * h01 + m1 * (h11 * h)
}

fn hermite_vec_derivative(
    p0: &DVector<f64>,
    m0: &DVector<f64>,
    p1: &DVector<f64>,
    m1: &DVector<f64>,
    s: f64,
    h: f64,
) -> DVector<f64> {
    let s2 = s * s;
    let h00 = 6.0 * s2 - 6.0 * s;
    let h10 = 3.0 * s2 - 4.0 * s + 1.0;
    let h01 = -6.0 * s2 + 6.0 * s;
    let h11 = 3.0 * s2 - 2.0 * s;
    p0 * (h00 / h) + m0 * h10 + p1 * (h01 / h) + m1 * h11
}

/// Concatenates controls whose realized bases meet end to start within
/// [`JUNCTION_TOL`], shifting later parts in time so segments abut exactly.
pub fn compose_curves(
    parts: &[PiecewiseControl],
    bases: &[RealizedCurve],
) -> Result<PiecewiseControl> {
    if parts.is_empty() || parts.len() != bases.len() {
        return Err(Error::DimensionMismatch(
            "compose_curves needs one realized base per part".into(),
        ));
    }
    let fiber_dim = parts[0].fiber_dim();
    for i in 0..parts.len() - 1 {
        let gap = (bases[i].endpoint() - bases[i + 1].start()).norm();
        if gap > JUNCTION_TOL {
            return Err(Error::EndpointMismatch { index: i, gap });
        }
    }
    let mut segments = Vec::new();
    let mut cursor = parts[0].start_time();
    for part in parts {
        let shifted = part.shifted_to(cursor);
        cursor = shifted.end_time();
        segments.extend(shifted.segments);
    }
    PiecewiseControl::new(fiber_dim, segments)
}

/// Serializable description of a piecewise control.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlSpec {
    pub segments: Vec<SegmentSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub t0: f64,
    pub t1: f64,
    pub sign: i8,
    #[serde(flatten)]
    pub shape: ShapeSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum ShapeSpec {
    Constant {
        value: Vec<f64>,
    },
    Polynomial {
        coeffs: Vec<Vec<f64>>,
    },
    Sine {
        amplitude: Vec<f64>,
        omega: Vec<f64>,
        phase: Vec<f64>,
    },
}

impl PiecewiseControl {
    pub fn from_spec(fiber_dim: usize, spec: &ControlSpec) -> Result<PiecewiseControl> {
        let segments = spec
            .segments
            .iter()
            .map(|s| {
                let shape = match &s.shape {
                    ShapeSpec::Constant { value } => ControlShape::Constant {
                        value: DVector::from_row_slice(value),
                    },
                    ShapeSpec::Polynomial { coeffs } => ControlShape::Polynomial {
                        coeffs: coeffs.clone(),
                    },
                    ShapeSpec::Sine {
                        amplitude,
                        omega,
                        phase,
                    } => {
                        if omega.len() != amplitude.len() || phase.len() != amplitude.len() {
                            return Err(Error::InvalidScenario(
                                "sine control needs amplitude, omega, phase of equal length".into(),
                            ));
                        }
                        ControlShape::Sine {
                            amplitude: amplitude.clone(),
                            omega: omega.clone(),
                            phase: phase.clone(),
                        }
                    }
                };
                ControlSegment::new(s.t0, s.t1, Sign::from_i8(s.sign)?, shape)
            })
            .collect::<Result<Vec<_>>>()?;
        PiecewiseControl::new(fiber_dim, segments)
    }

    /// Fails with [`Error::NotSerializable`] if any segment holds a custom
    /// closure.
    pub fn to_spec(&self) -> Result<ControlSpec> {
        let segments = self
            .segments
            .iter()
            .map(|s| {
                let shape = match &s.shape {
                    ControlShape::Constant { value } => ShapeSpec::Constant {
                        value: value.iter().copied().collect(),
                    },
                    ControlShape::Polynomial { coeffs } => ShapeSpec::Polynomial {
                        coeffs: coeffs.clone(),
                    },
                    ControlShape::Sine {
                        amplitude,
                        omega,
                        phase,
                    } => ShapeSpec::Sine {
                        amplitude: amplitude.clone(),
                        omega: omega.clone(),
                        phase: phase.clone(),
                    },
                    ControlShape::Custom { .. } => return Err(Error::NotSerializable),
                };
                Ok(SegmentSpec {
                    t0: s.t0,
                    t1: s.t1,
                    sign: s.sign.to_i8(),
                    shape,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ControlSpec { segments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchored::builtin_bundle;

    fn v(parts: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(parts)
    }

    fn unit_control(dim: usize, index: usize, t0: f64, t1: f64, sign: Sign) -> ControlSegment {
        let mut val = DVector::zeros(dim);
        val[index] = 1.0;
        ControlSegment::constant(t0, t1, sign, val).unwrap()
    }

    #[test]
    fn constant_control_slides_along_the_leaf() {
        let bundle = builtin_bundle("twoleaf").unwrap();
        let control =
            PiecewiseControl::new(2, vec![unit_control(2, 0, 0.0, 1.0, Sign::Plus)]).unwrap();
        let curve = integrate_admissible(&bundle, &control, &v(&[0.0, 0.0]), 1e-3).unwrap();
        assert!((curve.endpoint() - v(&[1.0, 0.0])).abs().max() < 1e-12);
    }

    #[test]
    fn reverse_flips_signs_and_traverses_backwards() {
        let bundle = builtin_bundle("twoleaf").unwrap();
        let control = PiecewiseControl::new(
            2,
            vec![
                unit_control(2, 0, 0.0, 1.0, Sign::Plus),
                unit_control(2, 1, 1.0, 1.5, Sign::Plus),
            ],
        )
        .unwrap();
        let rev = control.reverse();
        assert_eq!(rev.segments()[0].sign, Sign::Minus);
        assert_eq!(rev.segments()[1].sign, Sign::Minus);
        assert!(matches!(
            rev.segments()[0].shape,
            ControlShape::Constant { .. }
        ));

        let x0 = v(&[0.25, 1.5]);
        let fwd = integrate_admissible(&bundle, &control, &x0, 1e-3).unwrap();
        let bwd = integrate_admissible(&bundle, &rev, fwd.endpoint(), 1e-3).unwrap();
        assert!((bwd.endpoint() - &x0).abs().max() < 1e-9);
        // Interior points are traversed in reverse order.
        let t_probe = 0.3;
        let mirrored = control.start_time() + control.end_time() - t_probe;
        assert!((fwd.eval(t_probe) - bwd.eval(mirrored)).abs().max() < 1e-8);
    }

    #[test]
    fn reverse_is_an_involution() {
        let control = PiecewiseControl::new(
            2,
            vec![
                ControlSegment::new(
                    0.0,
                    1.0,
                    Sign::Plus,
                    ControlShape::Polynomial {
                        coeffs: vec![vec![0.5, -1.0, 2.0], vec![1.0]],
                    },
                )
                .unwrap(),
                ControlSegment::new(
                    1.0,
                    2.5,
                    Sign::Minus,
                    ControlShape::Sine {
                        amplitude: vec![1.0, 0.3],
                        omega: vec![2.0, 1.0],
                        phase: vec![0.0, 0.7],
                    },
                )
                .unwrap(),
            ],
        )
        .unwrap();
        let back = control.reverse().reverse();
        for i in 0..40 {
            let t = 2.5 * i as f64 / 39.0;
            let a = control.value_at(t).unwrap();
            let b = back.value_at(t).unwrap();
            assert!((a - b).abs().max() < 1e-12, "mismatch at t = {t}");
            assert_eq!(control.sign_at(t), back.sign_at(t));
        }
    }

    #[test]
    fn inverse_realizes_the_reverse_base_on_linear_bundles() {
        let bundle = builtin_bundle("twoleaf").unwrap();
        let control = PiecewiseControl::new(
            2,
            vec![
                unit_control(2, 0, 0.0, 0.8, Sign::Plus),
                unit_control(2, 1, 0.8, 1.2, Sign::Minus),
            ],
        )
        .unwrap();
        let x0 = v(&[0.1, 0.5]);
        let fwd = integrate_admissible(&bundle, &control, &x0, 1e-3).unwrap();
        let rev = integrate_admissible(&bundle, &control.reverse(), fwd.endpoint(), 1e-3).unwrap();
        let inv = integrate_admissible(
            &bundle,
            &control.inverse(&bundle).unwrap(),
            fwd.endpoint(),
            1e-3,
        )
        .unwrap();
        for i in 0..20 {
            let t = 1.2 * i as f64 / 19.0;
            assert!((rev.eval(t) - inv.eval(t)).abs().max() < 1e-12);
        }
        // Signs are restored to the originals, in reversed order.
        assert_eq!(inv.control.segments()[0].sign, Sign::Minus);
        assert_eq!(inv.control.segments()[1].sign, Sign::Plus);
    }

    #[test]
    fn inverse_requires_a_linear_bundle() {
        let bundle = crate::anchored::AnchoredBundle::new(
            "squares",
            1,
            1,
            false,
            Arc::new(|_: &DVector<f64>, u: &DVector<f64>| DVector::from_vec(vec![u[0] * u[0]])),
        );
        let control =
            PiecewiseControl::new(1, vec![unit_control(1, 0, 0.0, 1.0, Sign::Plus)]).unwrap();
        match control.inverse(&bundle).err() {
            Some(Error::NotLinear) => {}
            other => panic!("expected NotLinear, got {other:?}"),
        }
    }

    #[test]
    fn cubic_reparameterization_is_rejected() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let control =
            PiecewiseControl::new(2, vec![unit_control(2, 0, -1.0, 1.0, Sign::Plus)]).unwrap();
        let phi = Reparam::new(Arc::new(|t: f64| t * t * t), (-1.0, 1.0), (-1.0, 1.0));
        match control.reparameterize(&phi, &bundle).err() {
            Some(Error::NotMonotone) => {}
            other => panic!("expected NotMonotone, got {other:?}"),
        }
    }

    #[test]
    fn affine_reparameterization_rescales_values() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let control =
            PiecewiseControl::new(2, vec![unit_control(2, 0, 0.0, 1.0, Sign::Plus)]).unwrap();
        let phi = Reparam::new(Arc::new(|t: f64| 2.0 * t), (0.0, 1.0), (0.0, 2.0));
        let slow = control.reparameterize(&phi, &bundle).unwrap();
        assert!((slow.duration() - 2.0).abs() < 1e-12);
        let val = slow.value_at(1.0).unwrap();
        assert!((val[0] - 0.5).abs() < 1e-9);
        // The realized trace is unchanged.
        let x0 = v(&[0.0, 0.0]);
        let a = integrate_admissible(&bundle, &control, &x0, 1e-3).unwrap();
        let b = integrate_admissible(&bundle, &slow, &x0, 1e-3).unwrap();
        assert!((a.endpoint() - b.endpoint()).abs().max() < 1e-9);
    }

    #[test]
    fn composition_requires_matching_junctions() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let c1 = PiecewiseControl::new(2, vec![unit_control(2, 0, 0.0, 1.0, Sign::Plus)]).unwrap();
        let c2 = PiecewiseControl::new(2, vec![unit_control(2, 1, 0.0, 1.0, Sign::Plus)]).unwrap();
        let b1 = integrate_admissible(&bundle, &c1, &v(&[0.0, 0.0]), 1e-2).unwrap();
        let b2_far = integrate_admissible(&bundle, &c2, &v(&[5.0, 0.0]), 1e-2).unwrap();
        match compose_curves(&[c1.clone(), c2.clone()], &[b1, b2_far]).err() {
            Some(Error::EndpointMismatch { index: 0, .. }) => {}
            other => panic!("expected junction mismatch, got {other:?}"),
        }
        let b1 = integrate_admissible(&bundle, &c1, &v(&[0.0, 0.0]), 1e-2).unwrap();
        let b2 = integrate_admissible(&bundle, &c2, &v(&[1.0, 0.0]), 1e-2).unwrap();
        let joined = compose_curves(&[c1, c2], &[b1, b2]).unwrap();
        assert_eq!(joined.segments().len(), 2);
        assert!((joined.duration() - 2.0).abs() < 1e-12);
        let end = integrate_admissible(&bundle, &joined, &v(&[0.0, 0.0]), 1e-2)
            .unwrap()
            .endpoint()
            .clone();
        assert!((end - v(&[1.0, 1.0])).abs().max() < 1e-12);
    }

    #[test]
    fn empty_control_realizes_a_point() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let control = PiecewiseControl::empty(2);
        let curve = integrate_admissible(&bundle, &control, &v(&[0.3, -0.4]), 1e-2).unwrap();
        assert_eq!(curve.start(), curve.endpoint());
        assert_eq!(curve.closure_gap(), 0.0);
    }

    #[test]
    fn control_spec_round_trips_through_json() {
        let spec = ControlSpec {
            segments: vec![
                SegmentSpec {
                    t0: 0.0,
                    t1: 1.0,
                    sign: 1,
                    shape: ShapeSpec::Constant {
                        value: vec![1.0, 0.0],
                    },
                },
                SegmentSpec {
                    t0: 1.0,
                    t1: 2.0,
                    sign: -1,
                    shape: ShapeSpec::Sine {
                        amplitude: vec![0.5, 0.0],
                        omega: vec![3.0, 1.0],
                        phase: vec![0.1, 0.0],
                    },
                },
            ],
        };
        let text = serde_json::to_string(&spec).unwrap();
        let parsed: ControlSpec = serde_json::from_str(&text).unwrap();
        let control = PiecewiseControl::from_spec(2, &parsed).unwrap();
        let back = control.to_spec().unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
        let val = control.value_at(1.5).unwrap();
        assert!((val[0] - 0.5 * (3.0_f64 * 0.5 + 0.1).sin()).abs() < 1e-15);
    }

    #[test]
    fn admissibility_residual_is_small_at_midpoints() {
        let bundle = builtin_bundle("montgomery").unwrap();
        let control = PiecewiseControl::new(
            2,
            vec![ControlSegment::new(
                0.0,
                2.0,
                Sign::Plus,
                ControlShape::Sine {
                    amplitude: vec![1.0, 0.8],
                    omega: vec![1.0, 2.0],
                    phase: vec![0.0, 0.4],
                },
            )
            .unwrap()],
        )
        .unwrap();
        let curve = integrate_admissible(&bundle, &control, &v(&[0.5, 0.0, 0.0]), 1e-3).unwrap();
        let residual = curve.max_admissibility_residual(200).unwrap();
        assert!(residual < 1e-6, "residual {residual:.3e}");
    }
}
