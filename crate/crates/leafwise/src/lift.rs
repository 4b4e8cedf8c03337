//! Principal lifts of anchored-bundle data to a trivialized bundle M x G.
//!
//! A lift is stored through its identity-section coefficient, a map
//! `B: (x, s) -> algebra element`; right invariance then fixes the lift
//! everywhere as `(x, g, s) -> (anchor(x, s), B(x, s) g)`. Transport
//! integrates the base curve together with the right-logarithmic-derivative
//! equation `g' g^{-1} = sign * B(base(t), u(t))`, and the displacement of
//! a loop is the resulting fiber motion. Lifts move across bundle
//! morphisms by conjugating the coefficient with the morphism data.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::anchored::{AnchoredBundle, Section, VectorField};
use crate::curves::{integrate_admissible, PiecewiseControl, RealizedCurve};
use crate::liegroup::{
    exp, log, solve_right_log_ode, AlgebraElement, GroupElement, GroupName, GroupPath, GroupSpec,
};
use crate::{Error, Result};

/// Maximum base-closure gap for a control to count as a loop.
pub const LOOP_TOL: f64 = 1e-6;

type CoeffFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> AlgebraElement + Send + Sync;
type BaseMapFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type AlgebraMapFn = dyn Fn(&AlgebraElement) -> AlgebraElement + Send + Sync;

/// Optional decomposition of a coefficient into a connection form `A(x, v)`
/// acting on base velocities and a remainder `chi0(x, s)`, related by
/// `B(x, s) = chi0(x, s) - A(x, anchor(x, s))`.
pub struct LiftSplit {
    pub connection_form: Arc<CoeffFn>,
    pub chi0: Arc<CoeffFn>,
}

/// A principal lift on the trivialized bundle `bundle.base x group`,
/// specified by its coefficient map.
pub struct TrivializedLift {
    pub name: String,
    pub group: Arc<GroupSpec>,
    pub bundle: Arc<AnchoredBundle>,
    /// Declares the coefficient fiberwise linear, which makes loop
    /// displacements reparameterization invariant.
    pub connection: bool,
    coeff: Arc<CoeffFn>,
    pub split: Option<LiftSplit>,
}

impl TrivializedLift {
    pub fn new(
        name: impl Into<String>,
        group: Arc<GroupSpec>,
        bundle: Arc<AnchoredBundle>,
        coeff: Arc<CoeffFn>,
    ) -> TrivializedLift {
        TrivializedLift {
            name: name.into(),
            group,
            bundle,
            connection: false,
            coeff,
            split: None,
        }
    }

    pub fn declare_connection(mut self, yes: bool) -> TrivializedLift {
        self.connection = yes;
        self
    }

    pub fn with_split(
        mut self,
        connection_form: Arc<CoeffFn>,
        chi0: Arc<CoeffFn>,
    ) -> TrivializedLift {
        self.split = Some(LiftSplit {
            connection_form,
            chi0,
        });
        self
    }

    /// Coefficient value `B(x, s)`, checked for dimensions and finiteness.
    pub fn coeff_value(&self, x: &DVector<f64>, s: &DVector<f64>) -> Result<AlgebraElement> {
        if x.len() != self.bundle.base_dim || s.len() != self.bundle.fiber_dim {
            return Err(Error::DimensionMismatch(format!(
                "lift '{}' expects base dimension {} and fiber dimension {}, got {} and {}",
                self.name,
                self.bundle.base_dim,
                self.bundle.fiber_dim,
                x.len(),
                s.len()
            )));
        }
        let a = (self.coeff)(x, s);
        self.group.check_same(&a.spec)?;
        if !a.is_finite() {
            return Err(Error::NonFiniteOutput);
        }
        Ok(a)
    }

    /// Residual of the split identity at one probe, when a split is present.
    pub fn split_residual(&self, x: &DVector<f64>, s: &DVector<f64>) -> Result<Option<f64>> {
        let Some(split) = &self.split else {
            return Ok(None);
        };
        let b = self.coeff_value(x, s)?;
        let v = self.bundle.evaluate_anchor(x, s)?;
        let rebuilt = (split.chi0)(x, s).sub(&(split.connection_form)(x, &v))?;
        Ok(Some(b.sub(&rebuilt)?.norm()))
    }

    /// Value of the lift at `(x, g)` applied to the fiber value `s`: the
    /// anchored base velocity and the group velocity `B(x, s) g`.
    pub fn lift_value(
        &self,
        x: &DVector<f64>,
        g: &GroupElement,
        s: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.group.check_same(&g.spec)?;
        let base_vel = self.bundle.evaluate_anchor(x, s)?;
        let group_vel = self.coeff_value(x, s)?.matrix() * g.matrix();
        Ok((base_vel, group_vel))
    }

    /// The vector field on base x group coordinates obtained by lifting a
    /// section. Group entries are appended to the state column-major.
    pub fn lifted_section_field(&self, section: &Section) -> Result<VectorField> {
        if section.fiber_dim != self.bundle.fiber_dim {
            return Err(Error::DimensionMismatch(format!(
                "section '{}' has fiber dimension {}, lift '{}' expects {}",
                section.name, section.fiber_dim, self.name, self.bundle.fiber_dim
            )));
        }
        let n = self.bundle.base_dim;
        let m = self.group.matrix_size;
        let bundle = self.bundle.clone();
        let group = self.group.clone();
        let coeff = self.coeff.clone();
        let section = section.clone();
        Ok(VectorField::from_fn(n + m * m, move |state| {
            let x = DVector::from_column_slice(&state.as_slice()[..n]);
            let g = DMatrix::from_column_slice(m, m, &state.as_slice()[n..]);
            let s = section.eval(&x)?;
            let base_vel = bundle.evaluate_anchor(&x, &s)?;
            let a = coeff(&x, &s);
            group.check_same(&a.spec)?;
            let group_vel = a.matrix() * g;
            let mut out = DVector::zeros(n + m * m);
            out.rows_mut(0, n).copy_from(&base_vel);
            out.rows_mut(n, m * m)
                .copy_from(&DVector::from_column_slice(group_vel.as_slice()));
            Ok(out)
        }))
    }

    /// State vector for [`Self::lifted_section_field`] probes.
    pub fn pack_state(&self, x: &DVector<f64>, g: &GroupElement) -> DVector<f64> {
        let n = self.bundle.base_dim;
        let m = self.group.matrix_size;
        let mut state = DVector::zeros(n + m * m);
        state.rows_mut(0, n).copy_from(x);
        state
            .rows_mut(n, m * m)
            .copy_from(&DVector::from_column_slice(g.matrix().as_slice()));
        state
    }

    /// Integrates the lift along a control: the base curve by RK4 and the
    /// group factor by the fourth-order commutator-free update, both on the
    /// same step grid. The group path is continuous across segment
    /// boundaries even where the control jumps.
    pub fn transport(
        &self,
        control: &PiecewiseControl,
        x0: &DVector<f64>,
        g0: &GroupElement,
        step: f64,
    ) -> Result<LiftedCurve> {
        self.group.check_same(&g0.spec)?;
        let base = integrate_admissible(&self.bundle, control, x0, step)?;
        let mut parts = Vec::with_capacity(control.segments().len().max(1));
        let mut g = g0.clone();
        for seg in control.segments() {
            let sign = seg.sign.factor();
            let part = solve_right_log_ode(
                |t| {
                    Ok(self
                        .coeff_value(&base.eval(t), &seg.value_at(t))?
                        .scale(sign))
                },
                &g,
                seg.t0,
                seg.t1,
                step,
            )?;
            g = part.endpoint();
            parts.push(part);
        }
        if parts.is_empty() {
            let t0 = control.start_time();
            parts.push(solve_right_log_ode(
                |_| Ok(AlgebraElement::zero(self.group.clone())),
                &g,
                t0,
                t0,
                step,
            )?);
        }
        Ok(LiftedCurve { base, parts })
    }

    /// Group displacement of a loop, transported from the identity. The
    /// realized base must return to its start within [`LOOP_TOL`].
    pub fn displacement(
        &self,
        loop_control: &PiecewiseControl,
        x0: &DVector<f64>,
        step: f64,
    ) -> Result<GroupElement> {
        let lifted = self.transport(
            loop_control,
            x0,
            &GroupElement::identity(self.group.clone()),
            step,
        )?;
        let gap = lifted.base.closure_gap();
        if gap > LOOP_TOL {
            return Err(Error::NotALoop { gap });
        }
        Ok(lifted.final_group())
    }
}

/// A transported curve: the realized base together with one group path per
/// control segment.
pub struct LiftedCurve {
    pub base: RealizedCurve,
    pub parts: Vec<GroupPath>,
}

impl LiftedCurve {
    pub fn initial_group(&self) -> GroupElement {
        self.parts[0].start()
    }

    pub fn final_group(&self) -> GroupElement {
        self.parts.last().unwrap().endpoint()
    }

    fn part_at(&self, t: f64) -> &GroupPath {
        let i = self
            .parts
            .partition_point(|p| p.t1() <= t)
            .min(self.parts.len() - 1);
        &self.parts[i]
    }

    /// Dense group-factor evaluation; exact at sample nodes, Hermite in
    /// between (interpolants may sit slightly off the group).
    pub fn group_matrix_at(&self, t: f64) -> DMatrix<f64> {
        self.part_at(t).eval(t)
    }

    pub fn group_derivative_at(&self, t: f64) -> DMatrix<f64> {
        self.part_at(t).eval_derivative(t)
    }

    /// Right logarithmic derivative of the interpolated group path.
    pub fn right_log_matrix_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let g = self.group_matrix_at(t);
        let inv = g
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotInvertible("group sample is singular".into()))?;
        Ok(self.group_derivative_at(t) * inv)
    }

    /// Worst group-constraint residual over all sample nodes.
    pub fn max_constraint_residual(&self) -> f64 {
        self.parts
            .iter()
            .map(|p| p.max_constraint_residual())
            .fold(0.0, f64::max)
    }
}

/// A morphism of trivialized bundles: base and fiber maps with inverses,
/// plus the algebra map of a group homomorphism. The inverses are only
/// probed where the morphism is used, so projections onto an invariant
/// image (a leaf) qualify.
pub struct BundleMorphismSpec {
    pub name: String,
    pub source: Arc<AnchoredBundle>,
    pub target: Arc<AnchoredBundle>,
    pub source_group: Arc<GroupSpec>,
    pub target_group: Arc<GroupSpec>,
    /// Whether the fiber map is linear, so transferred lifts keep their
    /// connection declaration.
    pub fiber_linear: bool,
    base_map: Arc<BaseMapFn>,
    base_map_inv: Arc<BaseMapFn>,
    fiber_map: Arc<CoeffMapFn>,
    fiber_map_inv: Arc<CoeffMapFn>,
    algebra_map: Arc<AlgebraMapFn>,
}

type CoeffMapFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;

impl BundleMorphismSpec {
    /// Builds the morphism and validates it on the given target-side
    /// probes `(x, s)`: the base map must invert on them to 1e-9, the
    /// fiber map likewise, the anchors must intertwine to 1e-6, and the
    /// algebra map must respect brackets to 1e-8.
    #[allow(clippy::too_many_arguments)]
    pub fn validated(
        name: impl Into<String>,
        source: Arc<AnchoredBundle>,
        target: Arc<AnchoredBundle>,
        source_group: Arc<GroupSpec>,
        target_group: Arc<GroupSpec>,
        fiber_linear: bool,
        base_map: Arc<BaseMapFn>,
        base_map_inv: Arc<BaseMapFn>,
        fiber_map: Arc<CoeffMapFn>,
        fiber_map_inv: Arc<CoeffMapFn>,
        algebra_map: Arc<AlgebraMapFn>,
        probes: &[(DVector<f64>, DVector<f64>)],
    ) -> Result<BundleMorphismSpec> {
        let spec = BundleMorphismSpec {
            name: name.into(),
            source,
            target,
            source_group,
            target_group,
            fiber_linear,
            base_map,
            base_map_inv,
            fiber_map,
            fiber_map_inv,
            algebra_map,
        };
        for (x, s) in probes {
            let xp = (spec.base_map_inv)(x);
            let back = (spec.base_map)(&xp);
            if (&back - x).norm() > 1e-9 * (1.0 + x.norm()) {
                return Err(Error::NotInvertible(format!(
                    "base map of '{}' fails to invert at a probe (gap {:.3e})",
                    spec.name,
                    (&back - x).norm()
                )));
            }
            let sp = (spec.fiber_map_inv)(&xp, s);
            let s_back = (spec.fiber_map)(&xp, &sp);
            if (&s_back - s).norm() > 1e-9 * (1.0 + s.norm()) {
                return Err(Error::NotInvertible(format!(
                    "fiber map of '{}' fails to invert at a probe (gap {:.3e})",
                    spec.name,
                    (&s_back - s).norm()
                )));
            }
            // Anchors must intertwine: pushing the source velocity through
            // the base map matches the target anchor of the mapped fiber.
            let vp = spec.source.evaluate_anchor(&xp, &sp)?;
            let pushed = directional_image(&spec.base_map, &xp, &vp);
            let direct = spec.target.evaluate_anchor(&back, &s_back)?;
            if (&pushed - &direct).norm() > 1e-6 {
                return Err(Error::NotInvertible(format!(
                    "base and fiber maps of '{}' do not intertwine the anchors \
                     (residual {:.3e})",
                    spec.name,
                    (&pushed - &direct).norm()
                )));
            }
        }
        let basis_dim = spec.source_group.algebra_dim;
        for i in 0..basis_dim {
            for j in i + 1..basis_dim {
                let ei = AlgebraElement::basis_element(spec.source_group.clone(), i);
                let ej = AlgebraElement::basis_element(spec.source_group.clone(), j);
                let lhs = (spec.algebra_map)(&ei.bracket(&ej)?);
                let rhs = (spec.algebra_map)(&ei).bracket(&(spec.algebra_map)(&ej))?;
                if lhs.sub(&rhs)?.norm() > 1e-8 {
                    return Err(Error::NotInvertible(format!(
                        "algebra map of '{}' does not respect brackets",
                        spec.name
                    )));
                }
            }
        }
        Ok(spec)
    }

    pub fn image_point(&self, x_source: &DVector<f64>) -> DVector<f64> {
        (self.base_map)(x_source)
    }

    pub fn apply_algebra(&self, a: &AlgebraElement) -> AlgebraElement {
        (self.algebra_map)(a)
    }

    /// Group homomorphism realized through the algebra map.
    pub fn apply_group(&self, g: &GroupElement) -> Result<GroupElement> {
        Ok(exp(&(self.algebra_map)(&log(g)?)))
    }

    /// The unique coefficient on the target side making this morphism
    /// lift-compatible: `B(x, s) = L(B'(inv(x), inv(s)))`.
    pub fn transfer_lift(&self, lift: &TrivializedLift) -> Result<TrivializedLift> {
        if lift.bundle.base_dim != self.source.base_dim
            || lift.bundle.fiber_dim != self.source.fiber_dim
        {
            return Err(Error::DimensionMismatch(format!(
                "lift '{}' lives on a {}+{} bundle, morphism '{}' starts from {}+{}",
                lift.name,
                lift.bundle.base_dim,
                lift.bundle.fiber_dim,
                self.name,
                self.source.base_dim,
                self.source.fiber_dim
            )));
        }
        lift.group.check_same(&self.source_group)?;
        let base_map_inv = self.base_map_inv.clone();
        let fiber_map_inv = self.fiber_map_inv.clone();
        let algebra_map = self.algebra_map.clone();
        let inner = lift.coeff.clone();
        let coeff: Arc<CoeffFn> = Arc::new(move |x, s| {
            let xp = base_map_inv(x);
            let sp = fiber_map_inv(&xp, s);
            algebra_map(&inner(&xp, &sp))
        });
        Ok(TrivializedLift::new(
            format!("{}({})", self.name, lift.name),
            self.target_group.clone(),
            self.target.clone(),
            coeff,
        )
        .declare_connection(lift.connection && self.fiber_linear))
    }

    /// Image of a control under the fiber map, following the realized
    /// source base for state-dependent fiber maps.
    pub fn push_control(
        &self,
        control: &PiecewiseControl,
        source_base: &RealizedCurve,
    ) -> Result<PiecewiseControl> {
        use crate::curves::{ControlSegment, ControlShape};
        let dim = self.target.fiber_dim;
        let base = Arc::new(source_base.clone());
        let segments = control
            .segments()
            .iter()
            .map(|seg| {
                let fiber_map = self.fiber_map.clone();
                let source_seg = seg.clone();
                let base = base.clone();
                ControlSegment::new(
                    seg.t0,
                    seg.t1,
                    seg.sign,
                    ControlShape::Custom {
                        dim,
                        f: Arc::new(move |t| fiber_map(&base.eval(t), &source_seg.value_at(t))),
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        PiecewiseControl::new(dim, segments)
    }
}

/// Monomial in base and fiber coordinates, used by polynomial lift
/// coefficients: `coeff * prod x_i^p_i * prod s_j^q_j`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonomialSpec {
    pub coeff: f64,
    #[serde(default)]
    pub x_powers: Vec<u32>,
    #[serde(default)]
    pub s_powers: Vec<u32>,
}

impl MonomialSpec {
    fn eval(&self, x: &DVector<f64>, s: &DVector<f64>) -> f64 {
        let mut v = self.coeff;
        for (i, p) in self.x_powers.iter().enumerate() {
            if *p > 0 {
                v *= x[i].powi(*p as i32);
            }
        }
        for (j, q) in self.s_powers.iter().enumerate() {
            if *q > 0 {
                v *= s[j].powi(*q as i32);
            }
        }
        v
    }

    fn s_degree(&self) -> u32 {
        self.s_powers.iter().sum()
    }
}

/// Lift whose coefficient along each algebra basis direction is a
/// polynomial in the base and fiber coordinates.
pub fn polynomial_lift(
    group: Arc<GroupSpec>,
    bundle: Arc<AnchoredBundle>,
    terms: Vec<Vec<MonomialSpec>>,
) -> Result<TrivializedLift> {
    if terms.len() != group.algebra_dim {
        return Err(Error::DimensionMismatch(format!(
            "need one term list per algebra direction ({}), got {}",
            group.algebra_dim,
            terms.len()
        )));
    }
    for (d, list) in terms.iter().enumerate() {
        for m in list {
            if m.x_powers.len() > bundle.base_dim || m.s_powers.len() > bundle.fiber_dim {
                return Err(Error::DimensionMismatch(format!(
                    "monomial in direction {d} indexes past base dimension {} \
                     or fiber dimension {}",
                    bundle.base_dim, bundle.fiber_dim
                )));
            }
        }
    }
    let linear = terms.iter().flatten().all(|m| m.s_degree() == 1);
    let g = group.clone();
    let term_lists = terms.clone();
    let coeff: Arc<CoeffFn> = Arc::new(move |x, s| {
        let coords = DVector::from_iterator(
            g.algebra_dim,
            term_lists
                .iter()
                .map(|list| list.iter().map(|m| m.eval(x, s)).sum::<f64>()),
        );
        AlgebraElement::from_coords(g.clone(), coords)
            .expect("coordinate count matches the algebra dimension")
    });
    Ok(TrivializedLift::new("custom-polynomial", group, bundle, coeff).declare_connection(linear))
}

/// Named lift coefficients available to scenarios. `kappa` scales the
/// planar area coefficient and is ignored by the others.
pub fn builtin_lift(
    name: &str,
    group_name: GroupName,
    bundle: &Arc<AnchoredBundle>,
    kappa: f64,
) -> Result<TrivializedLift> {
    let group = GroupSpec::get(group_name);
    let require_group = |expected: GroupName| -> Result<()> {
        if group_name != expected {
            return Err(Error::InvalidScenario(format!(
                "lift '{name}' needs group '{}', scenario selects '{}'",
                expected.as_str(),
                group_name.as_str()
            )));
        }
        Ok(())
    };
    let require_dims = |base: usize, fiber: usize| -> Result<()> {
        if bundle.base_dim < base || bundle.fiber_dim < fiber {
            return Err(Error::DimensionMismatch(format!(
                "lift '{name}' needs base dimension >= {base} and fiber dimension >= {fiber}, \
                 bundle '{}' has {} and {}",
                bundle.name, bundle.base_dim, bundle.fiber_dim
            )));
        }
        Ok(())
    };
    match name {
        "zero" => {
            let g = group.clone();
            Ok(TrivializedLift::new(
                "zero",
                group,
                bundle.clone(),
                Arc::new(move |_, _| AlgebraElement::zero(g.clone())),
            )
            .declare_connection(true))
        }
        "so2-area" => {
            require_group(GroupName::So2)?;
            require_dims(2, 2)?;
            let g = group.clone();
            let lift = TrivializedLift::new(
                "so2-area",
                group.clone(),
                bundle.clone(),
                Arc::new(move |x, s| {
                    AlgebraElement::from_coords(
                        g.clone(),
                        DVector::from_vec(vec![kappa * 0.5 * (x[0] * s[1] - x[1] * s[0])]),
                    )
                    .expect("coordinate count matches the algebra dimension")
                }),
            )
            .declare_connection(true);
            if bundle.name == "planar-identity" {
                // On the identity anchor the coefficient is minus a
                // connection form applied to the base velocity.
                let ga = group.clone();
                let gc = group;
                Ok(lift.with_split(
                    Arc::new(move |x, v| {
                        AlgebraElement::from_coords(
                            ga.clone(),
                            DVector::from_vec(vec![-kappa * 0.5 * (x[0] * v[1] - x[1] * v[0])]),
                        )
                        .expect("coordinate count matches the algebra dimension")
                    }),
                    Arc::new(move |_, _| AlgebraElement::zero(gc.clone())),
                ))
            } else {
                Ok(lift)
            }
        }
        "so3-flat2" => {
            require_group(GroupName::So3)?;
            require_dims(0, 2)?;
            let g = group.clone();
            Ok(TrivializedLift::new(
                "so3-flat2",
                group,
                bundle.clone(),
                Arc::new(move |_, s| {
                    let mut coords = DVector::zeros(3);
                    coords[0] = s[0];
                    coords[1] = s[1];
                    AlgebraElement::from_coords(g.clone(), coords)
                        .expect("coordinate count matches the algebra dimension")
                }),
            )
            .declare_connection(true))
        }
        "heisenberg-area" => {
            require_group(GroupName::Heisenberg3)?;
            require_dims(0, 2)?;
            let g = group.clone();
            Ok(TrivializedLift::new(
                "heisenberg-area",
                group,
                bundle.clone(),
                Arc::new(move |_, s| {
                    let mut coords = DVector::zeros(3);
                    coords[0] = s[0];
                    coords[1] = s[1];
                    AlgebraElement::from_coords(g.clone(), coords)
                        .expect("coordinate count matches the algebra dimension")
                }),
            )
            .declare_connection(true))
        }
        other => Err(Error::InvalidScenario(format!(
            "unknown lift '{other}'; available: {}",
            builtin_lift_names().join(", ")
        ))),
    }
}

pub fn builtin_lift_names() -> Vec<&'static str> {
    vec![
        "custom-polynomial",
        "heisenberg-area",
        "so2-area",
        "so3-flat2",
        "zero",
    ]
}

fn directional_image(map: &Arc<BaseMapFn>, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let scale = v.norm();
    if scale <= 1e-14 {
        return DVector::zeros(map(x).len());
    }
    let h = 1e-5 * (1.0 + x.norm()) / scale;
    (map(&(x + v * h)) - map(&(x - v * h))) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchored::builtin_bundle;
    use crate::curves::{compose_curves, ControlSegment, PiecewiseControl, Sign};

    fn v(parts: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(parts)
    }

    fn algebra(spec: &Arc<GroupSpec>, coords: &[f64]) -> AlgebraElement {
        AlgebraElement::from_coords(spec.clone(), DVector::from_row_slice(coords)).unwrap()
    }

    /// Axis-aligned rectangle loop from `x0`: sides `a` then `b` along
    /// fiber directions `i` and `j`, then back with the inverse anchor.
    fn rectangle(
        fiber_dim: usize,
        i: usize,
        j: usize,
        a: f64,
        b: f64,
        start: f64,
    ) -> PiecewiseControl {
        let unit = |idx: usize| {
            let mut e = DVector::zeros(fiber_dim);
            e[idx] = 1.0;
            e
        };
        let mut t = start;
        let mut segs = Vec::new();
        for (idx, len, sign) in [
            (i, a, Sign::Plus),
            (j, b, Sign::Plus),
            (i, a, Sign::Minus),
            (j, b, Sign::Minus),
        ] {
            if len > 0.0 {
                segs.push(ControlSegment::constant(t, t + len, sign, unit(idx)).unwrap());
                t += len;
            }
        }
        PiecewiseControl::new(fiber_dim, segs).unwrap()
    }

    #[test]
    fn zero_lift_keeps_the_group_constant() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let lift = builtin_lift("zero", GroupName::So2, &bundle, 1.0).unwrap();
        let g0 = exp(&algebra(&lift.group, &[0.3]));
        let control = rectangle(2, 0, 1, 1.0, 1.0, 0.0);
        let lifted = lift
            .transport(&control, &v(&[0.0, 0.0]), &g0, 1e-2)
            .unwrap();
        assert_eq!(lifted.final_group().matrix(), g0.matrix());
    }

    #[test]
    fn area_lift_group_velocity_at_a_probe() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let lift = builtin_lift("so2-area", GroupName::So2, &bundle, 1.0).unwrap();
        let e = GroupElement::identity(lift.group.clone());
        let (base_vel, group_vel) = lift
            .lift_value(&v(&[2.0, 0.0]), &e, &v(&[0.0, 3.0]))
            .unwrap();
        assert_eq!(base_vel, v(&[0.0, 3.0]));
        let expected = algebra(&lift.group, &[3.0]);
        assert_eq!(group_vel, expected.matrix());
    }

    #[test]
    fn lift_value_is_right_invariant() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let lift = builtin_lift("so2-area", GroupName::So2, &bundle, 0.7).unwrap();
        let g = exp(&algebra(&lift.group, &[0.4]));
        let h = exp(&algebra(&lift.group, &[-1.1]));
        let x = v(&[1.0, -2.0]);
        let s = v(&[0.5, 0.25]);
        let (_, at_gh) = lift.lift_value(&x, &g.compose(&h).unwrap(), &s).unwrap();
        let (_, at_g) = lift.lift_value(&x, &g, &s).unwrap();
        let translated = at_g * h.matrix();
        assert!((at_gh - translated).abs().max() < 1e-14);
    }

    #[test]
    fn transport_commutes_with_right_translation() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let lift = builtin_lift("so2-area", GroupName::So2, &bundle, 1.0).unwrap();
        let control = rectangle(2, 0, 1, 1.0, 0.5, 0.0);
        let g = exp(&algebra(&lift.group, &[0.9]));
        let x0 = v(&[0.2, -0.1]);
        let from_e = lift
            .transport(
                &control,
                &x0,
                &GroupElement::identity(lift.group.clone()),
                1e-2,
            )
            .unwrap();
        let from_g = lift.transport(&control, &x0, &g, 1e-2).unwrap();
        let translated = from_e.final_group().compose(&g).unwrap();
        assert!(translated.distance_to(&from_g.final_group()) < 1e-10);
    }

    #[test]
    fn rectangle_displacement_matches_enclosed_area() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let lift = builtin_lift("so2-area", GroupName::So2, &bundle, 1.0).unwrap();
        let control = rectangle(2, 0, 1, 1.0, 2.0, 0.0);
        let disp = lift.displacement(&control, &v(&[0.0, 0.0]), 1e-2).unwrap();
        let angle = log(&disp).unwrap().coords()[0];
        assert!((angle - 2.0).abs() < 1e-12, "angle {angle}");
    }

    #[test]
    fn zero_duration_loop_gives_identity() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let lift = builtin_lift("so2-area", GroupName::So2, &bundle, 1.0).unwrap();
        let disp = lift
            .displacement(&PiecewiseControl::empty(2), &v(&[1.0, 1.0]), 1e-2)
            .unwrap();
        assert!(disp.is_identity(1e-15));
    }

    #[test]
    fn reverse_loop_inverts_the_displacement() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let lift = builtin_lift("so3-flat2", GroupName::So3, &bundle, 1.0).unwrap();
        let control = rectangle(2, 0, 1, 0.8, 0.6, 0.0);
        let x0 = v(&[0.1, 0.3]);
        let fwd = lift.displacement(&control, &x0, 1e-2).unwrap();
        let bwd = lift.displacement(&control.reverse(), &x0, 1e-2).unwrap();
        let product = bwd.compose(&fwd).unwrap();
        assert!(product.is_identity(1e-9));
    }

    #[test]
    fn displacement_is_a_homomorphism_under_composition() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let lift = builtin_lift("so3-flat2", GroupName::So3, &bundle, 1.0).unwrap();
        let x0 = v(&[0.0, 0.0]);
        let c1 = rectangle(2, 0, 1, 0.7, 0.4, 0.0);
        let c2 = rectangle(2, 1, 0, 0.5, 0.9, 0.0);
        let b1 = integrate_admissible(&bundle, &c1, &x0, 1e-2).unwrap();
        let b2 = integrate_admissible(&bundle, &c2, &x0, 1e-2).unwrap();
        let joined = compose_curves(&[c1.clone(), c2.clone()], &[b1, b2]).unwrap();
        let a1 = lift.displacement(&c1, &x0, 1e-2).unwrap();
        let a2 = lift.displacement(&c2, &x0, 1e-2).unwrap();
        let a12 = lift.displacement(&joined, &x0, 1e-2).unwrap();
        let product = a2.compose(&a1).unwrap();
        assert!(a12.distance_to(&product) < 1e-9);
    }

    #[test]
    fn open_paths_are_rejected_as_loops() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let lift = builtin_lift("so2-area", GroupName::So2, &bundle, 1.0).unwrap();
        let open = PiecewiseControl::new(
            2,
            vec![ControlSegment::constant(0.0, 1.0, Sign::Plus, v(&[1.0, 0.0])).unwrap()],
        )
        .unwrap();
        match lift.displacement(&open, &v(&[0.0, 0.0]), 1e-2).err() {
            Some(Error::NotALoop { gap }) => assert!((gap - 1.0).abs() < 1e-9),
            other => panic!("expected NotALoop, got {other:?}"),
        }
    }

    #[test]
    fn lifted_frame_fields_span_base_and_vertical_directions() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let lift = builtin_lift("so3-flat2", GroupName::So3, &bundle, 1.0).unwrap();
        let y1 = lift
            .lifted_section_field(&Section::coordinate(2, 0))
            .unwrap();
        let y2 = lift
            .lifted_section_field(&Section::coordinate(2, 1))
            .unwrap();
        let state = lift.pack_state(
            &v(&[0.3, -0.2]),
            &GroupElement::identity(lift.group.clone()),
        );

        // Flow-commutator probe, independent of the finite-difference
        // bracket: the out-and-back composition of the two flows moves the
        // state by t^2 [Y1, Y2] + O(t^3).
        let flow = |field: &VectorField, from: &DVector<f64>, t: f64| {
            crate::anchored::rk4_segment(|_, p| field.eval(p), from, 0.0, t.abs(), t.abs() / 16.0)
                .map(|seg| seg.endpoint().clone())
        };
        let t = 1e-2;
        let fwd = |p: &DVector<f64>, f: &VectorField| flow(f, p, t);
        let bwd = |p: &DVector<f64>, f: &VectorField| {
            let owned = f.clone();
            let neg = VectorField::from_fn(owned.dim, move |x| owned.eval(x).map(|v| -v));
            flow(&neg, p, t)
        };
        let p1 = fwd(&state, &y1).unwrap();
        let p2 = fwd(&p1, &y2).unwrap();
        let p3 = bwd(&p2, &y1).unwrap();
        let p4 = bwd(&p3, &y2).unwrap();
        let commutator_dir = (&p4 - &state) / (t * t);

        let f1 = y1.eval(&state).unwrap();
        let f2 = y2.eval(&state).unwrap();
        let cols = DMatrix::from_columns(&[f1, f2, commutator_dir]);
        let svals = cols.singular_values();
        let rank = svals.iter().filter(|s| **s > 1e-4 * svals[0]).count();
        assert_eq!(rank, 3, "flow commutator should add a vertical direction");

        let fields = [y1, y2];
        let depth2 = crate::anchored::bracket_rank(&fields, &state, 2).unwrap();
        assert_eq!(depth2, 3);
    }

    #[test]
    fn identity_morphism_preserves_the_coefficient() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let group = GroupSpec::get(GroupName::So2);
        let lift = builtin_lift("so2-area", GroupName::So2, &bundle, 1.0).unwrap();
        let morphism = BundleMorphismSpec::validated(
            "identity",
            bundle.clone(),
            bundle.clone(),
            group.clone(),
            group,
            true,
            Arc::new(|x: &DVector<f64>| x.clone()),
            Arc::new(|x: &DVector<f64>| x.clone()),
            Arc::new(|_: &DVector<f64>, s: &DVector<f64>| s.clone()),
            Arc::new(|_: &DVector<f64>, s: &DVector<f64>| s.clone()),
            Arc::new(|a: &AlgebraElement| a.clone()),
            &[(v(&[0.4, -0.3]), v(&[1.0, 2.0]))],
        )
        .unwrap();
        let moved = morphism.transfer_lift(&lift).unwrap();
        for (x, s) in [
            (v(&[1.0, 0.0]), v(&[0.0, 1.0])),
            (v(&[-0.5, 2.0]), v(&[3.0, 0.25])),
        ] {
            let a = lift.coeff_value(&x, &s).unwrap();
            let b = moved.coeff_value(&x, &s).unwrap();
            assert!(a.sub(&b).unwrap().norm() < 1e-15);
        }
        assert!(moved.connection);
    }

    #[test]
    fn scaling_morphism_preserves_displacements() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let group = GroupSpec::get(GroupName::So2);
        let lift = builtin_lift("so2-area", GroupName::So2, &bundle, 1.0).unwrap();
        let morphism = BundleMorphismSpec::validated(
            "doubling",
            bundle.clone(),
            bundle.clone(),
            group.clone(),
            group,
            true,
            Arc::new(|x: &DVector<f64>| x * 2.0),
            Arc::new(|x: &DVector<f64>| x * 0.5),
            Arc::new(|_: &DVector<f64>, s: &DVector<f64>| s * 2.0),
            Arc::new(|_: &DVector<f64>, s: &DVector<f64>| s * 0.5),
            Arc::new(|a: &AlgebraElement| a.clone()),
            &[
                (v(&[0.8, -0.6]), v(&[1.0, 2.0])),
                (v(&[2.0, 1.0]), v(&[0.5, 0.0])),
            ],
        )
        .unwrap();
        let moved = morphism.transfer_lift(&lift).unwrap();

        let x0 = v(&[0.3, 0.2]);
        let control = rectangle(2, 0, 1, 1.0, 1.0, 0.0);
        let src_base = integrate_admissible(&bundle, &control, &x0, 1e-2).unwrap();
        let image_control = morphism.push_control(&control, &src_base).unwrap();
        let src_disp = lift.displacement(&control, &x0, 1e-2).unwrap();
        let image_disp = moved
            .displacement(&image_control, &morphism.image_point(&x0), 1e-2)
            .unwrap();
        let mapped = morphism.apply_group(&src_disp).unwrap();
        assert!(image_disp.distance_to(&mapped) < 1e-8);
    }

    #[test]
    fn split_reconstructs_the_coefficient() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let lift = builtin_lift("so2-area", GroupName::So2, &bundle, 1.3).unwrap();
        assert!(lift.split.is_some());
        for (x, s) in [
            (v(&[1.0, 2.0]), v(&[0.3, -0.4])),
            (v(&[-0.7, 0.1]), v(&[2.0, 1.0])),
        ] {
            let r = lift.split_residual(&x, &s).unwrap().unwrap();
            assert!(r < 1e-12);
        }
    }

    #[test]
    fn polynomial_terms_replicate_the_area_lift() {
        let bundle = builtin_bundle("planar-identity").unwrap();
        let group = GroupSpec::get(GroupName::So2);
        let handwritten = builtin_lift("so2-area", GroupName::So2, &bundle, 1.0).unwrap();
        let poly = polynomial_lift(
            group,
            bundle.clone(),
            vec![vec![
                MonomialSpec {
                    coeff: 0.5,
                    x_powers: vec![1, 0],
                    s_powers: vec![0, 1],
                },
                MonomialSpec {
                    coeff: -0.5,
                    x_powers: vec![0, 1],
                    s_powers: vec![1, 0],
                },
            ]],
        )
        .unwrap();
        assert!(poly.connection);
        for (x, s) in [
            (v(&[2.0, 0.0]), v(&[0.0, 3.0])),
            (v(&[0.5, -1.5]), v(&[1.0, 1.0])),
        ] {
            let a = handwritten.coeff_value(&x, &s).unwrap();
            let b = poly.coeff_value(&x, &s).unwrap();
            assert!(a.sub(&b).unwrap().norm() < 1e-15);
        }
    }

    #[test]
    fn leaf_restricted_lift_reproduces_in_leaf_displacements() {
        let twoleaf = builtin_bundle("twoleaf").unwrap();
        let group = GroupSpec::get(GroupName::So2);
        // Nonlinear in the fiber and base dependent, so the restriction is
        // not a special case of the named lifts.
        let g = group.clone();
        let lift = TrivializedLift::new(
            "bent-area",
            group.clone(),
            twoleaf.clone(),
            Arc::new(move |x: &DVector<f64>, s: &DVector<f64>| {
                AlgebraElement::from_coords(
                    g.clone(),
                    DVector::from_vec(vec![s[0] * s[0] + 0.3 * s[0] * x[0]]),
                )
                .expect("coordinate count matches the algebra dimension")
            }),
        );
        let leaf = crate::anchored::AnchoredBundle::new(
            "twoleaf-level",
            1,
            2,
            true,
            Arc::new(|_: &DVector<f64>, u: &DVector<f64>| DVector::from_vec(vec![u[0]])),
        );
        let morphism = BundleMorphismSpec::validated(
            "level-restriction",
            twoleaf,
            leaf,
            group.clone(),
            group,
            true,
            Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[0]])),
            Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[0], 0.0])),
            Arc::new(|_: &DVector<f64>, s: &DVector<f64>| s.clone()),
            Arc::new(|_: &DVector<f64>, s: &DVector<f64>| s.clone()),
            Arc::new(|a: &AlgebraElement| a.clone()),
            &[(v(&[0.4]), v(&[1.0, 0.5])), (v(&[-1.2]), v(&[0.3, 2.0]))],
        )
        .unwrap();
        let restricted = morphism.transfer_lift(&lift).unwrap();

        // Out-and-back loop staying on the level set.
        let out_back = PiecewiseControl::new(
            2,
            vec![
                ControlSegment::constant(0.0, 0.7, Sign::Plus, v(&[1.0, 0.4])).unwrap(),
                ControlSegment::constant(0.7, 1.4, Sign::Minus, v(&[1.0, 0.4])).unwrap(),
            ],
        )
        .unwrap();
        let upstairs = lift.displacement(&out_back, &v(&[0.2, 0.0]), 1e-3).unwrap();
        let downstairs = restricted
            .displacement(&out_back, &v(&[0.2]), 1e-3)
            .unwrap();
        assert!(upstairs.distance_to(&downstairs) < 1e-10);
    }
}
