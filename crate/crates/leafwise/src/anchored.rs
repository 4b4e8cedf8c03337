//! Anchored bundles over coordinate patches: a fiber bundle `N -> M`
//! together with an anchor map sending fiber values to tangent vectors.
//! Sections induce vector fields on the base; composite flows of such
//! fields generate orbits, and the span of iterated Lie brackets gives a
//! numerical lower bound for the dimension of the orbit through a point.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Trajectories are aborted once the state norm exceeds this guard.
pub const DOMAIN_GUARD: f64 = 1e6;

/// Relative singular-value threshold used by [`bracket_rank`].
pub const RANK_THRESHOLD: f64 = 1e-8;

/// Fixed internal step used by [`sample_orbit`].
pub const ORBIT_STEP: f64 = 1e-2;

type AnchorFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
type FieldFn = dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync;
type SectionFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Anchored bundle in a single chart: base dimension, fiber dimension, and
/// the anchor map `(q, u) -> tangent vector at q`.
#[derive(Clone)]
pub struct AnchoredBundle {
    pub name: String,
    pub base_dim: usize,
    pub fiber_dim: usize,
    /// Whether the anchor is fiberwise linear. Curve inversion and control
    /// reparameterization are only available on linear bundles.
    pub linear: bool,
    anchor: Arc<AnchorFn>,
}

impl AnchoredBundle {
    pub fn new(
        name: impl Into<String>,
        base_dim: usize,
        fiber_dim: usize,
        linear: bool,
        anchor: Arc<AnchorFn>,
    ) -> Arc<AnchoredBundle> {
        Arc::new(AnchoredBundle {
            name: name.into(),
            base_dim,
            fiber_dim,
            linear,
            anchor,
        })
    }

    /// Applies the anchor, checking dimensions and finiteness.
    pub fn evaluate_anchor(&self, q: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if q.len() != self.base_dim || u.len() != self.fiber_dim {
            return Err(Error::DimensionMismatch(format!(
                "bundle {} expects base {} / fiber {}, got {} / {}",
                self.name,
                self.base_dim,
                self.fiber_dim,
                q.len(),
                u.len()
            )));
        }
        if !q.iter().all(|v| v.is_finite()) || !u.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteOutput);
        }
        let out = (self.anchor)(q, u);
        if out.len() != self.base_dim || !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteOutput);
        }
        Ok(out)
    }

    /// The inverse bundle: same total space, anchor negated.
    pub fn invert(self: &Arc<AnchoredBundle>) -> Arc<AnchoredBundle> {
        let inner = self.clone();
        AnchoredBundle::new(
            format!("inverse({})", self.name),
            self.base_dim,
            self.fiber_dim,
            self.linear,
            Arc::new(move |q, u| -(inner.anchor)(q, u)),
        )
    }

    /// Vector field `x -> anchor(x, section(x))`.
    pub fn induced_field(self: &Arc<AnchoredBundle>, section: &Section) -> Result<VectorField> {
        if section.fiber_dim != self.fiber_dim {
            return Err(Error::DimensionMismatch(format!(
                "section {} has fiber dimension {}, bundle {} expects {}",
                section.name, section.fiber_dim, self.name, self.fiber_dim
            )));
        }
        let bundle = self.clone();
        let section = section.clone();
        Ok(VectorField::from_fn(self.base_dim, move |x| {
            bundle.evaluate_anchor(x, &section.eval(x)?)
        }))
    }

    /// Induced fields of the constant coordinate sections `e_1 .. e_k`.
    pub fn coordinate_fields(self: &Arc<AnchoredBundle>) -> Result<Vec<VectorField>> {
        (0..self.fiber_dim)
            .map(|a| self.induced_field(&Section::coordinate(self.fiber_dim, a)))
            .collect()
    }
}

impl std::fmt::Debug for AnchoredBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnchoredBundle")
            .field("name", &self.name)
            .field("base_dim", &self.base_dim)
            .field("fiber_dim", &self.fiber_dim)
            .field("linear", &self.linear)
            .finish()
    }
}

/// Section of an anchored bundle: a fiber value at every base point.
#[derive(Clone)]
pub struct Section {
    pub name: String,
    pub fiber_dim: usize,
    f: Arc<SectionFn>,
}

impl Section {
    pub fn new(name: impl Into<String>, fiber_dim: usize, f: Arc<SectionFn>) -> Section {
        Section {
            name: name.into(),
            fiber_dim,
            f,
        }
    }

    /// Constant section with value `e_index`.
    pub fn coordinate(fiber_dim: usize, index: usize) -> Section {
        let mut v = DVector::zeros(fiber_dim);
        v[index] = 1.0;
        Section::constant(format!("e{}", index + 1), v)
    }

    pub fn constant(name: impl Into<String>, value: DVector<f64>) -> Section {
        let dim = value.len();
        Section::new(name, dim, Arc::new(move |_| value.clone()))
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let out = (self.f)(x);
        if out.len() != self.fiber_dim || !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteOutput);
        }
        Ok(out)
    }
}

/// A vector field on a coordinate patch. `fd_depth` records how many
/// levels of finite differencing its own evaluation already contains, so
/// that differentiating it again can pick a stencil that does not amplify
/// that noise.
#[derive(Clone)]
pub struct VectorField {
    pub dim: usize,
    fd_depth: usize,
    f: Arc<FieldFn>,
}

impl VectorField {
    pub fn from_fn<F>(dim: usize, f: F) -> VectorField
    where
        F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
    {
        VectorField {
            dim,
            fd_depth: 0,
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (self.f)(x)
    }

    /// Directional derivative `DF(x) v` by central differences. Fields that
    /// are themselves finite-difference brackets are differenced with a
    /// wider fourth-order stencil to keep the inherited rounding noise
    /// below the rank threshold.
    pub fn directional_derivative(
        &self,
        x: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let scale = v.norm();
        if scale <= 1e-14 {
            return Ok(DVector::zeros(self.dim));
        }
        let dir = v / scale;
        if self.fd_depth == 0 {
            let h = 1e-5_f64.max(1e-5 * x.norm());
            let fp = self.eval(&(x + &dir * h))?;
            let fm = self.eval(&(x - &dir * h))?;
            Ok((fp - fm) * (scale / (2.0 * h)))
        } else {
            let h = 1e-3_f64.max(1e-3 * x.norm());
            let f2p = self.eval(&(x + &dir * (2.0 * h)))?;
            let fp = self.eval(&(x + &dir * h))?;
            let fm = self.eval(&(x - &dir * h))?;
            let f2m = self.eval(&(x - &dir * (2.0 * h)))?;
            Ok((-f2p + fp * 8.0 - fm * 8.0 + f2m) * (scale / (12.0 * h)))
        }
    }

    /// Lie bracket `[self, other]` as a new field, evaluated on demand by
    /// finite differences: `DG(x) F(x) - DF(x) G(x)`.
    pub fn lie_bracket(&self, other: &VectorField) -> Result<VectorField> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch(format!(
                "bracket of fields on different spaces ({} vs {})",
                self.dim, other.dim
            )));
        }
        let f = self.clone();
        let g = other.clone();
        let dim = self.dim;
        Ok(VectorField {
            dim,
            fd_depth: self.fd_depth.max(other.fd_depth) + 1,
            f: Arc::new(move |x| {
                let fx = f.eval(x)?;
                let gx = g.eval(x)?;
                let dg_f = g.directional_derivative(x, &fx)?;
                let df_g = f.directional_derivative(x, &gx)?;
                Ok(dg_f - df_g)
            }),
        })
    }
}

/// Ordered list of (field, time) stages; stage times may be negative,
/// meaning the flow of the negated field for the absolute time.
pub struct CompositeFlowSpec {
    pub stages: Vec<(VectorField, f64)>,
}

/// One integrated stage of a composite flow, on a uniform grid with exact
/// right-hand-side values at the nodes.
#[derive(Clone, Debug)]
pub struct SampledSegment {
    pub t0: f64,
    pub h: f64,
    pub points: Vec<DVector<f64>>,
    pub derivs: Vec<DVector<f64>>,
}

impl SampledSegment {
    pub fn endpoint(&self) -> &DVector<f64> {
        self.points.last().expect("segment is never empty")
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.h * (self.points.len().saturating_sub(1)) as f64
    }
}

/// Piecewise trajectory produced by [`CompositeFlowSpec::concatenation`].
#[derive(Clone, Debug)]
pub struct FlowTrajectory {
    pub segments: Vec<SampledSegment>,
}

impl FlowTrajectory {
    pub fn endpoint(&self) -> &DVector<f64> {
        self.segments
            .last()
            .expect("trajectory has at least one segment")
            .endpoint()
    }
}

impl CompositeFlowSpec {
    /// Endpoint of the composite flow; stages are applied in list order.
    pub fn composite_flow(&self, x: &DVector<f64>, step: f64) -> Result<DVector<f64>> {
        Ok(self.concatenation(x, step)?.endpoint().clone())
    }

    /// Full sampled trajectory of the stage-by-stage integration.
    pub fn concatenation(&self, x: &DVector<f64>, step: f64) -> Result<FlowTrajectory> {
        let mut segments = Vec::with_capacity(self.stages.len().max(1));
        let mut current = x.clone();
        let mut t_accum = 0.0;
        for (field, time) in &self.stages {
            let sign = if *time < 0.0 { -1.0 } else { 1.0 };
            let duration = time.abs();
            let field = field.clone();
            let seg = rk4_segment(
                |_, p| Ok(field.eval(p)? * sign),
                &current,
                t_accum,
                duration,
                step,
            )?;
            current = seg.endpoint().clone();
            t_accum = seg.t1();
            segments.push(seg);
        }
        if segments.is_empty() {
            segments.push(rk4_segment(
                |_, _| Ok(DVector::zeros(x.len())),
                x,
                0.0,
                0.0,
                step,
            )?);
        }
        Ok(FlowTrajectory { segments })
    }
}

/// Classical fourth-order Runge-Kutta over one uniform-grid segment, with
/// the divergence guard applied at every accepted node.
pub(crate) fn rk4_segment<F>(
    rhs: F,
    x0: &DVector<f64>,
    t0: f64,
    duration: f64,
    step: f64,
) -> Result<SampledSegment>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    if !(step > 0.0) || !duration.is_finite() || duration < 0.0 {
        return Err(Error::DimensionMismatch(format!(
            "invalid integration span {duration} or step {step}"
        )));
    }
    check_state(t0, x0)?;
    if duration == 0.0 {
        let d = rhs(t0, x0)?;
        return Ok(SampledSegment {
            t0,
            h: step,
            points: vec![x0.clone()],
            derivs: vec![d],
        });
    }
    let n = (duration / step).ceil().max(1.0) as usize;
    let h = duration / n as f64;
    let mut points = Vec::with_capacity(n + 1);
    let mut derivs = Vec::with_capacity(n + 1);
    let mut x = x0.clone();
    let mut k1 = rhs(t0, &x)?;
    points.push(x.clone());
    derivs.push(k1.clone());
    for i in 0..n {
        let t = t0 + h * i as f64;
        let k2 = rhs(t + 0.5 * h, &(&x + &k1 * (0.5 * h)))?;
        let k3 = rhs(t + 0.5 * h, &(&x + &k2 * (0.5 * h)))?;
        let k4 = rhs(t + h, &(&x + &k3 * h))?;
        x += (k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        let t_next = t0 + h * (i + 1) as f64;
        check_state(t_next, &x)?;
        k1 = rhs(t_next, &x)?;
        points.push(x.clone());
        derivs.push(k1.clone());
    }
    Ok(SampledSegment {
        t0,
        h,
        points,
        derivs,
    })
}

fn check_state(t: f64, x: &DVector<f64>) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() || norm > DOMAIN_GUARD {
        return Err(Error::Blowup { t, norm });
    }
    Ok(())
}

/// Numerical rank of the span of the given fields and their iterated Lie
/// brackets at `x`. `depth` bounds the number of generator fields in a
/// bracket word, so `depth <= 1` uses the fields alone and `depth = 2`
/// adds the pairwise brackets.
pub fn bracket_rank(fields: &[VectorField], x: &DVector<f64>, depth: usize) -> Result<usize> {
    if fields.is_empty() {
        return Ok(0);
    }
    let dim = fields[0].dim;
    if fields.iter().any(|f| f.dim != dim) || x.len() != dim {
        return Err(Error::DimensionMismatch(
            "bracket_rank needs fields and point of one dimension".into(),
        ));
    }
    // words[L] holds all bracket words built from exactly L generators.
    let mut words: Vec<Vec<VectorField>> = vec![Vec::new(), fields.to_vec()];
    for len in 2..=depth.max(1) {
        let mut level = Vec::new();
        for la in 1..len {
            let lb = len - la;
            if la > lb {
                break;
            }
            for (i, a) in words[la].iter().enumerate() {
                let js = if la == lb { i + 1 } else { 0 };
                for b in words[lb].iter().skip(js) {
                    level.push(a.lie_bracket(b)?);
                }
            }
        }
        words.push(level);
    }
    let mut columns = Vec::new();
    for level in &words {
        for w in level {
            columns.push(w.eval(x)?);
        }
    }
    Ok(numerical_rank(&columns))
}

/// Rank of a column collection by SVD with a relative threshold.
pub fn numerical_rank(columns: &[DVector<f64>]) -> usize {
    if columns.is_empty() {
        return 0;
    }
    let m = DMatrix::from_columns(columns);
    let sv = m.singular_values();
    let max = sv.max();
    if !(max > 0.0) {
        return 0;
    }
    sv.iter().filter(|s| **s > RANK_THRESHOLD * max).count()
}

/// Result of seeded orbit sampling: reached points plus the number of
/// samples dropped by the divergence guard.
#[derive(Clone, Debug)]
pub struct OrbitSample {
    pub points: Vec<DVector<f64>>,
    pub dropped: usize,
}

/// Draws `count` random composite flows of the induced fields of
/// `sections` (segment count uniform in 1..=6, section index and sign
/// uniform, stage time uniform in `[0, max_time]`) and integrates each from
/// `x0`. Fully determined by `seed`.
pub fn sample_orbit(
    bundle: &Arc<AnchoredBundle>,
    sections: &[Section],
    x0: &DVector<f64>,
    count: usize,
    max_time: f64,
    seed: u64,
) -> Result<OrbitSample> {
    if sections.is_empty() {
        return Err(Error::DimensionMismatch(
            "orbit sampling needs sections".into(),
        ));
    }
    let fields: Vec<VectorField> = sections
        .iter()
        .map(|s| bundle.induced_field(s))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    let mut dropped = 0;
    for _ in 0..count {
        let n_seg = rng.random_range(1..=6usize);
        let mut stages = Vec::with_capacity(n_seg);
        for _ in 0..n_seg {
            let idx = rng.random_range(0..fields.len());
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let time = rng.random_range(0.0..max_time);
            stages.push((fields[idx].clone(), sign * time));
        }
        let spec = CompositeFlowSpec { stages };
        match spec.composite_flow(x0, ORBIT_STEP) {
            Ok(p) => points.push(p),
            Err(Error::Blowup { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(OrbitSample { points, dropped })
}

/// The polynomial appearing in the cylinder-coordinate model bundle.
pub fn montgomery_profile(r: f64) -> f64 {
    0.5 * r * r - 0.25 * r * r * r * r
}

/// Built-in bundles addressable by name in scenario files.
pub fn builtin_bundle(name: &str) -> Option<Arc<AnchoredBundle>> {
    match name {
        "montgomery" => Some(AnchoredBundle::new(
            "montgomery",
            3,
            2,
            true,
            Arc::new(|q: &DVector<f64>, u: &DVector<f64>| {
                // Coordinates (r, theta, z); the second generator rotates
                // while sliding in z with rate -p(r).
                DVector::from_vec(vec![u[0], u[1], -montgomery_profile(q[0]) * u[1]])
            }),
        )),
        "twoleaf" => Some(AnchoredBundle::new(
            "twoleaf",
            2,
            2,
            true,
            Arc::new(|q: &DVector<f64>, u: &DVector<f64>| {
                DVector::from_vec(vec![u[0], q[1] * u[1]])
            }),
        )),
        "planar-identity" => Some(AnchoredBundle::new(
            "planar-identity",
            2,
            2,
            true,
            Arc::new(|_: &DVector<f64>, u: &DVector<f64>| u.clone()),
        )),
        _ => None,
    }
}

pub fn builtin_bundle_names() -> Vec<&'static str> {
    vec!["montgomery", "planar-identity", "twoleaf"]
}
