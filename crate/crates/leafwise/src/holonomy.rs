//! Holonomy sampling over loop families and estimation of the algebra
//! spanned by loop displacements.
//!
//! Families generate piecewise controls whose realized bases return to the
//! base point: axis rectangles in a fiber plane, polygons, and lassos that
//! carry a rectangle out along a tail and back. Displacements of the
//! loops, their reverses, and their pairwise compositions sample the
//! holonomy group at the base point; logarithms of the sample span an
//! estimate of its Lie algebra, tightened by bracket-closure passes.

use nalgebra::{DMatrix, DVector};

use crate::anchored::AnchoredBundle;
use crate::curves::{compose_curves, integrate_admissible, ControlSegment, PiecewiseControl, Sign};
use crate::liegroup::{log, AlgebraElement, GroupElement, GroupSpec};
use crate::lift::{TrivializedLift, LOOP_TOL};
use crate::{Error, Result};
use std::sync::Arc;

/// Default projection-residual tolerance for bracket closure.
pub const CLOSURE_TOL: f64 = 1e-6;

/// Relative singular-value threshold for the log-span rank.
pub const SPAN_THRESHOLD: f64 = 1e-8;

/// A family of loops anchored at a base point. Rectangle sides are pairs
/// `(a, b)` traversed in the order `+e_i, +e_j, -e_i, -e_j`; orientation
/// `-1` swaps the two plane directions, which reverses every loop.
pub enum LoopFamily {
    Rectangles {
        x0: DVector<f64>,
        plane: (usize, usize),
        sides: Vec<(f64, f64)>,
        orientation: i8,
    },
    Polygon {
        x0: DVector<f64>,
        vertices: Vec<DVector<f64>>,
    },
    /// A rectangle conjugated by an out-and-back tail: tail out, rectangle,
    /// tail back with the inverse anchor.
    Lasso {
        x0: DVector<f64>,
        plane: (usize, usize),
        sides: (f64, f64),
        tail: DVector<f64>,
        tail_duration: f64,
        orientation: i8,
    },
}

impl LoopFamily {
    pub fn base_point(&self) -> &DVector<f64> {
        match self {
            LoopFamily::Rectangles { x0, .. } => x0,
            LoopFamily::Polygon { x0, .. } => x0,
            LoopFamily::Lasso { x0, .. } => x0,
        }
    }
}

/// One loop produced by [`generate_loops`], tagged for reporting.
pub struct GeneratedLoop {
    pub id: String,
    pub scale: f64,
    pub control: PiecewiseControl,
}

fn unit(fiber_dim: usize, index: usize) -> DVector<f64> {
    let mut e = DVector::zeros(fiber_dim);
    e[index] = 1.0;
    e
}

/// Appends the four rectangle segments to `segs`, skipping zero-length
/// sides, and returns the end time.
fn rectangle_segments(
    segs: &mut Vec<ControlSegment>,
    fiber_dim: usize,
    plane: (usize, usize),
    sides: (f64, f64),
    mut t: f64,
) -> Result<f64> {
    let (i, j) = plane;
    let (a, b) = sides;
    for (idx, len, sign) in [
        (i, a, Sign::Plus),
        (j, b, Sign::Plus),
        (i, a, Sign::Minus),
        (j, b, Sign::Minus),
    ] {
        if len > 0.0 {
            segs.push(ControlSegment::constant(
                t,
                t + len,
                sign,
                unit(fiber_dim, idx),
            )?);
            t += len;
        }
    }
    Ok(t)
}

fn check_plane(plane: (usize, usize), fiber_dim: usize) -> Result<()> {
    if plane.0 >= fiber_dim || plane.1 >= fiber_dim || plane.0 == plane.1 {
        return Err(Error::DimensionMismatch(format!(
            "plane ({}, {}) is not a pair of distinct fiber directions below {}",
            plane.0, plane.1, fiber_dim
        )));
    }
    Ok(())
}

fn check_orientation(orientation: i8) -> Result<()> {
    if orientation != 1 && orientation != -1 {
        return Err(Error::InvalidScenario(format!(
            "orientation must be 1 or -1, got {orientation}"
        )));
    }
    Ok(())
}

fn oriented(plane: (usize, usize), orientation: i8) -> (usize, usize) {
    if orientation == 1 {
        plane
    } else {
        (plane.1, plane.0)
    }
}

/// Builds the family's loop controls. Base-point and index validity are
/// checked against the bundle; closure of the realized base is the
/// responsibility of displacement computations downstream.
pub fn generate_loops(family: &LoopFamily, bundle: &AnchoredBundle) -> Result<Vec<GeneratedLoop>> {
    if family.base_point().len() != bundle.base_dim {
        return Err(Error::DimensionMismatch(format!(
            "family base point has dimension {}, bundle '{}' base is {}",
            family.base_point().len(),
            bundle.name,
            bundle.base_dim
        )));
    }
    let k = bundle.fiber_dim;
    match family {
        LoopFamily::Rectangles {
            plane,
            sides,
            orientation,
            ..
        } => {
            check_plane(*plane, k)?;
            check_orientation(*orientation)?;
            let plane = oriented(*plane, *orientation);
            sides
                .iter()
                .enumerate()
                .map(|(n, &(a, b))| {
                    if a < 0.0 || b < 0.0 {
                        return Err(Error::InvalidScenario(format!(
                            "rectangle sides must be nonnegative, got ({a}, {b})"
                        )));
                    }
                    let mut segs = Vec::new();
                    rectangle_segments(&mut segs, k, plane, (a, b), 0.0)?;
                    Ok(GeneratedLoop {
                        id: format!("rectangle-{n}"),
                        scale: a.max(b),
                        control: PiecewiseControl::new(k, segs)?,
                    })
                })
                .collect()
        }
        LoopFamily::Polygon { x0, vertices } => {
            if k != bundle.base_dim {
                return Err(Error::DimensionMismatch(format!(
                    "polygon loops need fiber dimension {} to match the base, got {}",
                    bundle.base_dim, k
                )));
            }
            let mut stops: Vec<&DVector<f64>> = Vec::with_capacity(vertices.len() + 2);
            stops.push(x0);
            stops.extend(vertices.iter());
            stops.push(x0);
            for (n, v) in vertices.iter().enumerate() {
                if v.len() != bundle.base_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "polygon vertex {n} has dimension {}, expected {}",
                        v.len(),
                        bundle.base_dim
                    )));
                }
            }
            let mut segs = Vec::new();
            let mut t = 0.0;
            let mut perimeter = 0.0;
            for pair in stops.windows(2) {
                let edge = pair[1] - pair[0];
                perimeter += edge.norm();
                if edge.norm() > 0.0 {
                    segs.push(ControlSegment::constant(t, t + 1.0, Sign::Plus, edge)?);
                    t += 1.0;
                }
            }
            Ok(vec![GeneratedLoop {
                id: "polygon-0".into(),
                scale: perimeter,
                control: PiecewiseControl::new(k, segs)?,
            }])
        }
        LoopFamily::Lasso {
            plane,
            sides,
            tail,
            tail_duration,
            orientation,
            ..
        } => {
            check_plane(*plane, k)?;
            check_orientation(*orientation)?;
            if tail.len() != k {
                return Err(Error::DimensionMismatch(format!(
                    "lasso tail has fiber dimension {}, expected {k}",
                    tail.len()
                )));
            }
            if *tail_duration < 0.0 {
                return Err(Error::InvalidScenario(
                    "lasso tail duration must be nonnegative".into(),
                ));
            }
            let plane = oriented(*plane, *orientation);
            let mut segs = Vec::new();
            let mut t = 0.0;
            if *tail_duration > 0.0 {
                segs.push(ControlSegment::constant(
                    t,
                    t + tail_duration,
                    Sign::Plus,
                    tail.clone(),
                )?);
                t += tail_duration;
            }
            t = rectangle_segments(&mut segs, k, plane, *sides, t)?;
            if *tail_duration > 0.0 {
                segs.push(ControlSegment::constant(
                    t,
                    t + tail_duration,
                    Sign::Minus,
                    tail.clone(),
                )?);
            }
            Ok(vec![GeneratedLoop {
                id: "lasso-0".into(),
                scale: sides.0.max(sides.1),
                control: PiecewiseControl::new(k, segs)?,
            }])
        }
    }
}

/// One sampled holonomy element with its provenance.
pub struct SampleEntry {
    pub id: String,
    pub scale: f64,
    pub closure_gap: f64,
    pub element: GroupElement,
    /// Logarithm where the element is within the injectivity radius.
    pub log: Option<AlgebraElement>,
}

/// Displacements sampled from a loop family at one base point.
pub struct HolonomySample {
    pub group: Arc<GroupSpec>,
    pub base_point: DVector<f64>,
    /// Reference fiber element the sample is expressed at.
    pub g_ref: GroupElement,
    pub entries: Vec<SampleEntry>,
    pub skipped_logs: usize,
}

fn entry_from(
    id: String,
    scale: f64,
    closure_gap: f64,
    element: GroupElement,
    skipped: &mut usize,
) -> Result<SampleEntry> {
    let log_value = match log(&element) {
        Ok(a) => Some(a),
        Err(Error::OutOfInjectivityRadius { .. }) => {
            *skipped += 1;
            None
        }
        Err(e) => return Err(e),
    };
    Ok(SampleEntry {
        id,
        scale,
        closure_gap,
        element,
        log: log_value,
    })
}

/// Transports every loop of the family, every reversed loop, and every
/// ordered pairwise composition, collecting displacements and their logs.
/// The order of entries is deterministic.
pub fn sample_holonomy(
    lift: &TrivializedLift,
    family: &LoopFamily,
    step: f64,
) -> Result<HolonomySample> {
    let loops = generate_loops(family, &lift.bundle)?;
    let x0 = family.base_point().clone();
    let identity = GroupElement::identity(lift.group.clone());
    let mut skipped = 0usize;
    let mut entries = Vec::new();

    let displace = |control: &PiecewiseControl| -> Result<(GroupElement, f64)> {
        let lifted = lift.transport(control, &x0, &identity, step)?;
        let gap = lifted.base.closure_gap();
        if gap > LOOP_TOL {
            return Err(Error::NotALoop { gap });
        }
        Ok((lifted.final_group(), gap))
    };

    for l in &loops {
        let (element, gap) = displace(&l.control)?;
        entries.push(entry_from(
            l.id.clone(),
            l.scale,
            gap,
            element,
            &mut skipped,
        )?);
    }
    for l in &loops {
        let (element, gap) = displace(&l.control.reverse())?;
        entries.push(entry_from(
            format!("{}-reversed", l.id),
            l.scale,
            gap,
            element,
            &mut skipped,
        )?);
    }
    for p in 0..loops.len() {
        for q in 0..loops.len() {
            if p == q {
                continue;
            }
            let bp = integrate_admissible(&lift.bundle, &loops[p].control, &x0, step)?;
            let bq = integrate_admissible(&lift.bundle, &loops[q].control, &x0, step)?;
            let joined = compose_curves(
                &[loops[p].control.clone(), loops[q].control.clone()],
                &[bp, bq],
            )?;
            let (element, gap) = displace(&joined)?;
            entries.push(entry_from(
                format!("{}+{}", loops[p].id, loops[q].id),
                loops[p].scale.max(loops[q].scale),
                gap,
                element,
                &mut skipped,
            )?);
        }
    }

    Ok(HolonomySample {
        group: lift.group.clone(),
        base_point: x0,
        g_ref: identity,
        entries,
        skipped_logs: skipped,
    })
}

/// The same sample expressed at the shifted reference `g_ref * g`: every
/// element is conjugated to `g^{-1} a g` and logs are recomputed.
pub fn conjugate_sample(sample: &HolonomySample, g: &GroupElement) -> Result<HolonomySample> {
    sample.group.check_same(&g.spec)?;
    let mut skipped = 0usize;
    let entries = sample
        .entries
        .iter()
        .map(|e| {
            entry_from(
                e.id.clone(),
                e.scale,
                e.closure_gap,
                e.element.conjugate_by(g)?,
                &mut skipped,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HolonomySample {
        group: sample.group.clone(),
        base_point: sample.base_point.clone(),
        g_ref: sample.g_ref.compose(g)?,
        entries,
        skipped_logs: skipped,
    })
}

/// Orthonormal (under the Frobenius metric) basis estimate of the algebra
/// spanned by a holonomy sample.
pub struct AlgebraEstimate {
    pub basis: Vec<AlgebraElement>,
    pub rank: usize,
    /// Largest projection residual of a basis-pair bracket onto the span.
    pub closure_residual: f64,
}

/// Frobenius-metric weights: coordinates scaled by these have Euclidean
/// geometry matching the matrix inner product.
fn frobenius_weights(spec: &GroupSpec) -> DVector<f64> {
    DVector::from_iterator(
        spec.algebra_dim,
        spec.basis_norm2.iter().map(|n2| n2.sqrt()),
    )
}

/// Estimates the algebra spanned by the sample logs: the span is reduced
/// by SVD at a relative threshold, then closed under brackets for up to
/// `extra_bracket_depth` passes, appending any direction whose projection
/// residual exceeds `tol`.
pub fn holonomy_algebra(
    sample: &HolonomySample,
    extra_bracket_depth: usize,
    tol: f64,
) -> Result<AlgebraEstimate> {
    let spec = sample.group.clone();
    let dim = spec.algebra_dim;
    let w = frobenius_weights(&spec);
    let logs: Vec<&AlgebraElement> = sample
        .entries
        .iter()
        .filter_map(|e| e.log.as_ref())
        .collect();
    if logs.is_empty() {
        return Err(Error::NoLogsAvailable);
    }

    // Weighted coordinates of the logs, one column per log.
    let cols: Vec<DVector<f64>> = logs.iter().map(|a| a.coords().component_mul(&w)).collect();
    let m = DMatrix::from_columns(&cols);
    let svd = m.svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    if smax > 0.0 {
        for (i, s) in svd.singular_values.iter().enumerate() {
            if *s > SPAN_THRESHOLD * smax {
                basis.push(u.column(i).into_owned());
            }
        }
    }

    let unweight = |y: &DVector<f64>| -> Result<AlgebraElement> {
        AlgebraElement::from_coords(spec.clone(), y.component_div(&w))
    };
    let project_residual = |y: &DVector<f64>, basis: &[DVector<f64>]| -> DVector<f64> {
        let mut r = y.clone();
        for b in basis {
            let c = b.dot(y);
            r -= b * c;
        }
        r
    };

    for _ in 0..extra_bracket_depth {
        let mut appended = false;
        let len = basis.len();
        'pairs: for i in 0..len {
            for j in i + 1..len {
                let bracket = unweight(&basis[i])?.bracket(&unweight(&basis[j])?)?;
                let y = bracket.coords().component_mul(&w);
                let r = project_residual(&y, &basis);
                let resid = r.norm();
                if resid > tol {
                    basis.push(r / resid);
                    appended = true;
                    if basis.len() == dim {
                        break 'pairs;
                    }
                }
            }
        }
        if !appended {
            break;
        }
    }

    let mut closure_residual = 0.0f64;
    for i in 0..basis.len() {
        for j in i + 1..basis.len() {
            let bracket = unweight(&basis[i])?.bracket(&unweight(&basis[j])?)?;
            let y = bracket.coords().component_mul(&w);
            closure_residual = closure_residual.max(project_residual(&y, &basis).norm());
        }
    }

    let rank = basis.len();
    let basis = basis.iter().map(unweight).collect::<Result<Vec<_>>>()?;
    Ok(AlgebraEstimate {
        basis,
        rank,
        closure_residual,
    })
}

/// Log of the displacement of an `eps` by `eps` rectangle in the given
/// fiber plane, scaled by `1/eps^2`. A trivialization-dependent curvature
/// surrogate; Richardson pairs at `eps` and `eps/2` converge at second
/// order or better.
pub fn small_loop_log(
    lift: &TrivializedLift,
    x0: &DVector<f64>,
    dirs: (usize, usize),
    eps: f64,
    step: f64,
) -> Result<AlgebraElement> {
    if !(eps > 0.0) {
        return Err(Error::InvalidScenario(format!(
            "small-loop probe needs eps > 0, got {eps}"
        )));
    }
    let family = LoopFamily::Rectangles {
        x0: x0.clone(),
        plane: dirs,
        sides: vec![(eps, eps)],
        orientation: 1,
    };
    let loops = generate_loops(&family, &lift.bundle)?;
    let disp = lift.displacement(&loops[0].control, x0, step)?;
    Ok(log(&disp)?.scale(1.0 / (eps * eps)))
}

/// Fixed-width float formatting used by every CSV emitter: 17 significant
/// digits, enough to round-trip f64 exactly.
pub(crate) fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl HolonomySample {
    /// One row per sampled element: identification, closure gap, the group
    /// entries row-major, then log coordinates (blank when skipped).
    pub fn to_csv(&self) -> String {
        let m = self.group.matrix_size;
        let dim = self.group.algebra_dim;
        let mut out = String::from("loop_id,scale,closure_gap,log_ok");
        for r in 1..=m {
            for c in 1..=m {
                out.push_str(&format!(",g{r}{c}"));
            }
        }
        for d in 1..=dim {
            out.push_str(&format!(",log{d}"));
        }
        out.push('\n');
        for e in &self.entries {
            out.push_str(&e.id);
            out.push_str(&format!(
                ",{},{},{}",
                fmt_float(e.scale),
                fmt_float(e.closure_gap),
                u8::from(e.log.is_some())
            ));
            let g = e.element.matrix();
            for r in 0..m {
                for c in 0..m {
                    out.push(',');
                    out.push_str(&fmt_float(g[(r, c)]));
                }
            }
            match &e.log {
                Some(a) => {
                    for d in 0..dim {
                        out.push(',');
                        out.push_str(&fmt_float(a.coords()[d]));
                    }
                }
                None => out.push_str(&",".repeat(dim)),
            }
            out.push('\n');
        }
        out
    }
}

impl AlgebraEstimate {
    /// One row per basis element: index and coordinates.
    pub fn to_csv(&self, spec: &GroupSpec) -> String {
        let dim = spec.algebra_dim;
        let mut out = String::from("basis_index");
        for d in 1..=dim {
            out.push_str(&format!(",c{d}"));
        }
        out.push('\n');
        for (i, b) in self.basis.iter().enumerate() {
            out.push_str(&i.to_string());
            for d in 0..dim {
                out.push(',');
                out.push_str(&fmt_float(b.coords()[d]));
            }
            out.push('\n');
        }
        out
    }
}
