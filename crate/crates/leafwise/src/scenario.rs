//! Scenario runner: a JSON file names a bundle, lift, and task; running it
//! produces CSV artifacts plus named metrics judged against tolerances.
//!
//! Every artifact is assembled in memory and written atomically (temp file,
//! then rename) only after the whole computation succeeds, so a failing run
//! leaves no partial output. All randomness is drawn from one seeded
//! generator; reruns are byte-identical apart from an optional timestamp
//! header line.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime};

use crate::anchored::{bracket_rank, builtin_bundle, sample_orbit, AnchoredBundle};
use crate::curves::{compose_curves, integrate_admissible, ControlSpec, PiecewiseControl, Reparam};
use crate::holonomy::{
    conjugate_sample, fmt_float, generate_loops, holonomy_algebra, sample_holonomy, LoopFamily,
    CLOSURE_TOL,
};
use crate::liegroup::{
    ad_action, exp, solve_right_log_ode, AlgebraElement, GroupElement, GroupName,
};
use crate::lift::{builtin_lift, polynomial_lift, MonomialSpec, TrivializedLift};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    RankMap,
    Orbit,
    Transport,
    Holonomy,
    Algebra,
    Convergence,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::RankMap => "rank-map",
            Task::Orbit => "orbit",
            Task::Transport => "transport",
            Task::Holonomy => "holonomy",
            Task::Algebra => "algebra",
            Task::Convergence => "convergence",
        }
    }
}

fn default_kappa() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiftSpec {
    pub name: String,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Coefficient monomials for the "custom-polynomial" lift, one list per
    /// algebra direction.
    #[serde(default)]
    pub terms: Option<Vec<Vec<MonomialSpec>>>,
}

fn default_plane() -> (usize, usize) {
    (0, 1)
}

fn default_orientation() -> i8 {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LoopFamilySpec {
    Rectangles {
        x0: Vec<f64>,
        #[serde(default = "default_plane")]
        plane: (usize, usize),
        sides: Vec<(f64, f64)>,
        #[serde(default = "default_orientation")]
        orientation: i8,
    },
    Polygon {
        x0: Vec<f64>,
        vertices: Vec<Vec<f64>>,
    },
    Lasso {
        x0: Vec<f64>,
        #[serde(default = "default_plane")]
        plane: (usize, usize),
        sides: (f64, f64),
        tail: Vec<f64>,
        tail_duration: f64,
        #[serde(default = "default_orientation")]
        orientation: i8,
    },
}

impl LoopFamilySpec {
    pub fn build(&self) -> LoopFamily {
        match self {
            LoopFamilySpec::Rectangles {
                x0,
                plane,
                sides,
                orientation,
            } => LoopFamily::Rectangles {
                x0: DVector::from_row_slice(x0),
                plane: *plane,
                sides: sides.clone(),
                orientation: *orientation,
            },
            LoopFamilySpec::Polygon { x0, vertices } => LoopFamily::Polygon {
                x0: DVector::from_row_slice(x0),
                vertices: vertices
                    .iter()
                    .map(|v| DVector::from_row_slice(v))
                    .collect(),
            },
            LoopFamilySpec::Lasso {
                x0,
                plane,
                sides,
                tail,
                tail_duration,
                orientation,
            } => LoopFamily::Lasso {
                x0: DVector::from_row_slice(x0),
                plane: *plane,
                sides: *sides,
                tail: DVector::from_row_slice(tail),
                tail_duration: *tail_duration,
                orientation: *orientation,
            },
        }
    }
}

fn default_orbit_samples() -> usize {
    100
}

fn default_orbit_max_time() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    #[serde(default = "default_orbit_samples")]
    pub samples: usize,
    #[serde(default = "default_orbit_max_time")]
    pub max_time: f64,
    /// Coordinate expected to stay at its initial value along the orbit.
    #[serde(default)]
    pub invariant_coordinate: Option<usize>,
}

fn default_loop_count() -> usize {
    10
}

fn default_loop_vertices() -> usize {
    4
}

fn default_loop_radius() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomLoopSpec {
    #[serde(default = "default_loop_count")]
    pub count: usize,
    #[serde(default = "default_loop_vertices")]
    pub vertices: usize,
    #[serde(default = "default_loop_radius")]
    pub radius: f64,
}

fn default_step() -> f64 {
    1e-2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub task: Task,
    #[serde(default)]
    pub bundle: Option<String>,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub lift: Option<LiftSpec>,
    #[serde(default)]
    pub loops: Option<LoopFamilySpec>,
    #[serde(default)]
    pub control: Option<ControlSpec>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub probes: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub expected_rank: Option<usize>,
    #[serde(default)]
    pub expected_ranks: Option<Vec<usize>>,
    #[serde(default)]
    pub expected_log: Option<Vec<f64>>,
    #[serde(default)]
    pub expected_angles: Option<Vec<f64>>,
    #[serde(default)]
    pub orbit: Option<OrbitSpec>,
    /// Named consistency checks for the holonomy task: equivariance,
    /// reverse-inverse, composition, conjugation, reparameterization.
    #[serde(default)]
    pub checks: Option<Vec<String>>,
    #[serde(default)]
    pub random_loops: Option<RandomLoopSpec>,
    #[serde(default)]
    pub random_groups: Option<usize>,
    #[serde(default)]
    pub reparam_probes: Option<usize>,
    #[serde(default)]
    pub rhs: Option<String>,
    #[serde(default)]
    pub steps: Option<Vec<f64>>,
    #[serde(default)]
    pub span: Option<(f64, f64)>,
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    #[serde(default)]
    pub out_dir: Option<String>,
}

/// Command-line overrides applied on top of the scenario file.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub step: Option<f64>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Prepend a `# generated-unix <secs>` header to artifacts.
    pub timestamp: bool,
    pub tol_scale: f64,
}

impl Default for RunOptions {
    fn default() -> RunOptions {
        RunOptions {
            step: None,
            seed: None,
            out_dir: None,
            timestamp: true,
            tol_scale: 1.0,
        }
    }
}

pub struct ToleranceCheck {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

pub struct RunReport {
    pub scenario: String,
    pub task: Task,
    pub metrics: Vec<(String, f64)>,
    pub checks: Vec<ToleranceCheck>,
    pub artifacts: Vec<PathBuf>,
    pub wall_time: Duration,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Plain-text summary for standard output.
    pub fn render(&self) -> String {
        let mut out = format!("scenario {} (task {})\n", self.scenario, self.task.as_str());
        for (name, value) in &self.metrics {
            out.push_str(&format!("  {name} = {}\n", pretty(*value)));
        }
        for c in &self.checks {
            out.push_str(&format!(
                "  check {}: {} <= {} .. {}\n",
                c.name,
                pretty(c.value),
                pretty(c.bound),
                if c.pass { "pass" } else { "FAIL" }
            ));
        }
        for a in &self.artifacts {
            out.push_str(&format!("  wrote {}\n", a.display()));
        }
        out.push_str(&format!(
            "  {} in {:.3}s\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.wall_time.as_secs_f64()
        ));
        out
    }
}

fn pretty(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{v}")
    } else {
        format!("{v:.6e}")
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let sc: Scenario = serde_json::from_str(text)?;
    if !(sc.step > 0.0) {
        return Err(Error::InvalidScenario(format!(
            "step must be positive, got {}",
            sc.step
        )));
    }
    Ok(sc)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

/// Built-in scenarios as (name, JSON) pairs, sorted by name.
pub fn builtin_scenarios() -> Vec<(&'static str, &'static str)> {
    vec![
        (
            "convergence-rlode",
            include_str!("../scenarios/convergence-rlode.json"),
        ),
        (
            "equivariance-suite",
            include_str!("../scenarios/equivariance-suite.json"),
        ),
        (
            "flat-holonomy",
            include_str!("../scenarios/flat-holonomy.json"),
        ),
        (
            "heisenberg-area",
            include_str!("../scenarios/heisenberg-area.json"),
        ),
        (
            "montgomery-rank",
            include_str!("../scenarios/montgomery-rank.json"),
        ),
        (
            "reparam-invariance",
            include_str!("../scenarios/reparam-invariance.json"),
        ),
        (
            "so2-area-holonomy",
            include_str!("../scenarios/so2-area-holonomy.json"),
        ),
        (
            "so3-flat2-algebra",
            include_str!("../scenarios/so3-flat2-algebra.json"),
        ),
        (
            "twoleaf-orbit",
            include_str!("../scenarios/twoleaf-orbit.json"),
        ),
        (
            "twoleaf-rankmap",
            include_str!("../scenarios/twoleaf-rankmap.json"),
        ),
    ]
}

pub fn builtin_scenario(name: &str) -> Option<&'static str> {
    builtin_scenarios()
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

struct TaskOutput {
    metrics: Vec<(String, f64)>,
    /// File name and content, written only after the task succeeds.
    artifacts: Vec<(String, String)>,
}

fn require<'a, T>(field: &'a Option<T>, name: &str, task: &str) -> Result<&'a T> {
    field
        .as_ref()
        .ok_or_else(|| Error::InvalidScenario(format!("task {task} requires a '{name}' field")))
}

fn bundle_of(sc: &Scenario) -> Result<Arc<AnchoredBundle>> {
    let name = require(&sc.bundle, "bundle", sc.task.as_str())?;
    builtin_bundle(name).ok_or_else(|| {
        Error::InvalidScenario(format!(
            "unknown bundle '{name}', available: {}",
            crate::anchored::builtin_bundle_names().join(", ")
        ))
    })
}

fn group_of(sc: &Scenario) -> Result<GroupName> {
    let name = require(&sc.group, "group", sc.task.as_str())?;
    GroupName::parse(name).ok_or_else(|| {
        Error::InvalidScenario(format!(
            "unknown group '{name}', available: SO2, SO3, SE2, Heisenberg3, TransR1"
        ))
    })
}

fn lift_of(sc: &Scenario, bundle: &Arc<AnchoredBundle>) -> Result<TrivializedLift> {
    let group = group_of(sc)?;
    let spec = require(&sc.lift, "lift", sc.task.as_str())?;
    if spec.name == "custom-polynomial" {
        let terms = spec.terms.clone().ok_or_else(|| {
            Error::InvalidScenario("custom-polynomial lift needs a 'terms' field".into())
        })?;
        polynomial_lift(group.spec(), bundle.clone(), terms)
    } else {
        builtin_lift(&spec.name, group, bundle, spec.kappa)
    }
}

fn vector_of(parts: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(parts)
}

fn run_rank_map(sc: &Scenario, _step: f64, _seed: u64) -> Result<TaskOutput> {
    let bundle = bundle_of(sc)?;
    let fields = bundle.coordinate_fields()?;
    let depth = sc.depth.unwrap_or(2);
    let probes = require(&sc.probes, "probes", "rank-map")?;
    if probes.is_empty() {
        return Err(Error::InvalidScenario(
            "rank-map needs at least one probe".into(),
        ));
    }
    let expected: Option<Vec<usize>> = match (&sc.expected_ranks, sc.expected_rank) {
        (Some(list), _) => {
            if list.len() != probes.len() {
                return Err(Error::InvalidScenario(format!(
                    "expected_ranks has {} entries for {} probes",
                    list.len(),
                    probes.len()
                )));
            }
            Some(list.clone())
        }
        (None, Some(r)) => Some(vec![r; probes.len()]),
        (None, None) => None,
    };

    let mut csv = String::new();
    for a in 1..=bundle.base_dim {
        csv.push_str(&format!("x{a},"));
    }
    csv.push_str("rank,expected\n");
    let mut ranks = Vec::with_capacity(probes.len());
    for (i, p) in probes.iter().enumerate() {
        let x = vector_of(p);
        let rank = bracket_rank(&fields, &x, depth)?;
        ranks.push(rank);
        for a in 0..bundle.base_dim {
            csv.push_str(&fmt_float(x[a]));
            csv.push(',');
        }
        match &expected {
            Some(e) => csv.push_str(&format!("{rank},{}\n", e[i])),
            None => csv.push_str(&format!("{rank},\n")),
        }
    }

    let mut metrics = vec![
        ("probe_count".into(), probes.len() as f64),
        (
            "rank_min".into(),
            ranks.iter().copied().min().unwrap() as f64,
        ),
        (
            "rank_max".into(),
            ranks.iter().copied().max().unwrap() as f64,
        ),
    ];
    if let Some(e) = &expected {
        let err = ranks
            .iter()
            .zip(e)
            .map(|(r, e)| r.abs_diff(*e))
            .max()
            .unwrap();
        metrics.push(("rank_error".into(), err as f64));
    }
    Ok(TaskOutput {
        metrics,
        artifacts: vec![("rank_map.csv".into(), csv)],
    })
}

fn run_orbit(sc: &Scenario, _step: f64, seed: u64) -> Result<TaskOutput> {
    let bundle = bundle_of(sc)?;
    let spec = require(&sc.orbit, "orbit", "orbit")?;
    let x0 = vector_of(require(&sc.x0, "x0", "orbit")?);
    let sections: Vec<_> = (0..bundle.fiber_dim)
        .map(|a| crate::anchored::Section::coordinate(bundle.fiber_dim, a))
        .collect();
    let sample = sample_orbit(&bundle, &sections, &x0, spec.samples, spec.max_time, seed)?;

    let mut csv = String::new();
    for a in 1..=bundle.base_dim {
        if a > 1 {
            csv.push(',');
        }
        csv.push_str(&format!("x{a}"));
    }
    csv.push('\n');
    for p in &sample.points {
        for a in 0..bundle.base_dim {
            if a > 0 {
                csv.push(',');
            }
            csv.push_str(&fmt_float(p[a]));
        }
        csv.push('\n');
    }

    let mut metrics = vec![
        ("orbit_points".into(), sample.points.len() as f64),
        ("orbit_dropped".into(), sample.dropped as f64),
    ];
    if let Some(c) = spec.invariant_coordinate {
        if c >= bundle.base_dim {
            return Err(Error::InvalidScenario(format!(
                "invariant coordinate {c} is out of range for base dimension {}",
                bundle.base_dim
            )));
        }
        let drift = sample
            .points
            .iter()
            .map(|p| (p[c] - x0[c]).abs())
            .fold(0.0f64, f64::max);
        metrics.push(("max_invariant_drift".into(), drift));
    }
    Ok(TaskOutput {
        metrics,
        artifacts: vec![("orbit.csv".into(), csv)],
    })
}

fn run_transport(sc: &Scenario, step: f64, _seed: u64) -> Result<TaskOutput> {
    let bundle = bundle_of(sc)?;
    let lift = lift_of(sc, &bundle)?;
    let control = PiecewiseControl::from_spec(
        bundle.fiber_dim,
        require(&sc.control, "control", "transport")?,
    )?;
    let x0 = vector_of(require(&sc.x0, "x0", "transport")?);
    let identity = GroupElement::identity(lift.group.clone());
    let lifted = lift.transport(&control, &x0, &identity, step)?;

    let gap = lifted.base.closure_gap();
    let mut metrics = vec![
        ("closure_gap".into(), gap),
        (
            "constraint_residual".into(),
            lifted.max_constraint_residual(),
        ),
    ];
    let final_group = lifted.final_group();
    let log = crate::liegroup::log(&final_group)?;
    metrics.push(("log_norm".into(), log.norm()));
    for d in 0..lift.group.algebra_dim {
        metrics.push((format!("log{}", d + 1), log.coords()[d]));
    }
    if let Some(e) = &sc.expected_log {
        if e.len() != lift.group.algebra_dim {
            return Err(Error::InvalidScenario(format!(
                "expected_log has {} coordinates, algebra has {}",
                e.len(),
                lift.group.algebra_dim
            )));
        }
        metrics.push(("log_error".into(), (log.coords() - vector_of(e)).norm()));
    }

    let m = lift.group.matrix_size;
    let mut csv = String::from("t");
    for a in 1..=bundle.base_dim {
        csv.push_str(&format!(",x{a}"));
    }
    for r in 1..=m {
        for c in 1..=m {
            csv.push_str(&format!(",g{r}{c}"));
        }
    }
    csv.push('\n');
    let (t0, t1) = (control.start_time(), control.end_time());
    for i in 0..=100 {
        let t = t0 + (t1 - t0) * i as f64 / 100.0;
        csv.push_str(&fmt_float(t));
        let x = lifted.base.eval(t);
        for a in 0..bundle.base_dim {
            csv.push(',');
            csv.push_str(&fmt_float(x[a]));
        }
        let g = lifted.group_matrix_at(t);
        for r in 0..m {
            for c in 0..m {
                csv.push(',');
                csv.push_str(&fmt_float(g[(r, c)]));
            }
        }
        csv.push('\n');
    }

    Ok(TaskOutput {
        metrics,
        artifacts: vec![("transport.csv".into(), csv)],
    })
}

/// Random polygon loops around `x0`, used as probe material by the named
/// checks. Polygon loops close exactly on identity-anchored bundles.
fn random_polygon_loops(
    rng: &mut ChaCha8Rng,
    spec: &RandomLoopSpec,
    x0: &DVector<f64>,
    bundle: &Arc<AnchoredBundle>,
) -> Result<Vec<PiecewiseControl>> {
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let vertices: Vec<DVector<f64>> = (0..spec.vertices)
            .map(|_| {
                DVector::from_iterator(
                    x0.len(),
                    x0.iter()
                        .map(|c| c + rng.random_range(-spec.radius..spec.radius)),
                )
            })
            .collect();
        let family = LoopFamily::Polygon {
            x0: x0.clone(),
            vertices,
        };
        let mut loops = generate_loops(&family, bundle)?;
        out.push(loops.remove(0).control);
    }
    Ok(out)
}

fn random_group(rng: &mut ChaCha8Rng, lift: &TrivializedLift) -> GroupElement {
    let coords = DVector::from_iterator(
        lift.group.algebra_dim,
        (0..lift.group.algebra_dim).map(|_| rng.random_range(-0.8..0.8)),
    );
    exp(&AlgebraElement::from_coords(lift.group.clone(), coords)
        .expect("coordinate count matches the algebra dimension"))
}

fn run_checks(
    sc: &Scenario,
    lift: &TrivializedLift,
    family_loops: &[crate::holonomy::GeneratedLoop],
    x0: &DVector<f64>,
    step: f64,
    seed: u64,
    metrics: &mut Vec<(String, f64)>,
) -> Result<()> {
    let Some(checks) = &sc.checks else {
        return Ok(());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = GroupElement::identity(lift.group.clone());
    let n_groups = sc.random_groups.unwrap_or(5);

    let mut pool: Vec<PiecewiseControl> = family_loops
        .iter()
        .map(|l| l.control.clone())
        .filter(|c| !c.is_empty())
        .collect();
    if let Some(random) = &sc.random_loops {
        pool.extend(random_polygon_loops(&mut rng, random, x0, &lift.bundle)?);
    }
    if pool.is_empty() {
        return Err(Error::InvalidScenario(
            "checks need at least one nonempty loop".into(),
        ));
    }

    // Displacements at the identity reference, shared by all checks.
    let displacements: Vec<GroupElement> = pool
        .iter()
        .map(|c| lift.displacement(c, x0, step))
        .collect::<Result<_>>()?;

    for check in checks {
        match check.as_str() {
            "equivariance" => {
                let mut dev = 0.0f64;
                for (control, d) in pool.iter().zip(&displacements) {
                    for _ in 0..n_groups {
                        let g = random_group(&mut rng, lift);
                        let shifted = lift.transport(control, x0, &g, step)?.final_group();
                        dev = dev.max(shifted.distance_to(&d.compose(&g)?));
                    }
                }
                metrics.push(("equivariance_dev".into(), dev));
            }
            "reverse-inverse" => {
                let mut dev = 0.0f64;
                for (control, d) in pool.iter().zip(&displacements) {
                    let back = lift.displacement(&control.reverse(), x0, step)?;
                    dev = dev.max(back.compose(d)?.distance_to(&identity));
                }
                metrics.push(("reverse_inverse_dev".into(), dev));
            }
            "composition" => {
                let mut dev = 0.0f64;
                for i in 0..pool.len() {
                    let j = (i + 1) % pool.len();
                    if i == j {
                        continue;
                    }
                    let bi = integrate_admissible(&lift.bundle, &pool[i], x0, step)?;
                    let bj = integrate_admissible(&lift.bundle, &pool[j], x0, step)?;
                    let joined = compose_curves(&[pool[i].clone(), pool[j].clone()], &[bi, bj])?;
                    let d = lift.displacement(&joined, x0, step)?;
                    let product = displacements[j].compose(&displacements[i])?;
                    dev = dev.max(d.distance_to(&product));
                }
                metrics.push(("composition_dev".into(), dev));
            }
            "conjugation" => {
                let mut dev = 0.0f64;
                for (control, d) in pool.iter().zip(&displacements) {
                    let g = random_group(&mut rng, lift);
                    let at_g = g
                        .inverse()
                        .compose(&lift.transport(control, x0, &g, step)?.final_group())?;
                    let expected = g.inverse().compose(d)?.compose(&g)?;
                    dev = dev.max(at_g.distance_to(&expected));
                }
                metrics.push(("conjugation_dev".into(), dev));
            }
            "reparameterization" => {
                let probes = sc.reparam_probes.unwrap_or(5);
                let mut dev = 0.0f64;
                for (control, d) in pool.iter().zip(&displacements) {
                    let (t0, t1) = (control.start_time(), control.end_time());
                    for _ in 0..probes {
                        let eps: Vec<f64> = (0..3).map(|_| rng.random_range(-0.2..0.2)).collect();
                        let span = t1 - t0;
                        let map = move |t: f64| {
                            let tau = (t - t0) / span;
                            let mut psi = tau;
                            for (m, e) in eps.iter().enumerate() {
                                let f = (m + 1) as f64 * std::f64::consts::PI;
                                psi += e * (f * tau).sin() / f;
                            }
                            t0 + span * psi
                        };
                        let phi = Reparam::new(Arc::new(map), (t0, t1), (t0, t1));
                        let warped = control.reparameterize(&phi, &lift.bundle)?;
                        let dw = lift.displacement(&warped, x0, step)?;
                        dev = dev.max(dw.distance_to(d));
                    }
                }
                metrics.push(("reparam_dev".into(), dev));
            }
            other => {
                return Err(Error::InvalidScenario(format!(
                    "unknown check '{other}'; expected equivariance, reverse-inverse, \
                     composition, conjugation, or reparameterization"
                )));
            }
        }
    }
    Ok(())
}

fn run_holonomy(sc: &Scenario, step: f64, seed: u64, with_algebra: bool) -> Result<TaskOutput> {
    let bundle = bundle_of(sc)?;
    let lift = lift_of(sc, &bundle)?;
    let mut metrics = Vec::new();
    let mut artifacts = Vec::new();

    let family_spec = if with_algebra {
        Some(require(&sc.loops, "loops", "algebra")?)
    } else {
        sc.loops.as_ref()
    };

    let mut family_loops = Vec::new();
    let mut x0 = sc.x0.as_ref().map(|p| vector_of(p));
    if let Some(spec) = family_spec {
        let family = spec.build();
        x0.get_or_insert_with(|| family.base_point().clone());
        family_loops = generate_loops(&family, &bundle)?;
        let sample = sample_holonomy(&lift, &family, step)?;

        let max_gap = sample
            .entries
            .iter()
            .map(|e| e.closure_gap)
            .fold(0.0f64, f64::max);
        let max_dev = sample
            .entries
            .iter()
            .map(|e| e.element.distance_to(&sample.g_ref))
            .fold(0.0f64, f64::max);
        metrics.push(("loop_count".into(), family_loops.len() as f64));
        metrics.push(("sample_size".into(), sample.entries.len() as f64));
        metrics.push(("max_closure_gap".into(), max_gap));
        metrics.push(("skipped_logs".into(), sample.skipped_logs as f64));
        metrics.push(("max_identity_deviation".into(), max_dev));

        if let Some(expected) = &sc.expected_angles {
            if expected.len() != family_loops.len() {
                return Err(Error::InvalidScenario(format!(
                    "expected_angles has {} entries for {} loops",
                    expected.len(),
                    family_loops.len()
                )));
            }
            let mut err = 0.0f64;
            for (l, want) in family_loops.iter().zip(expected) {
                let entry = sample
                    .entries
                    .iter()
                    .find(|e| e.id == l.id)
                    .expect("family loops lead the sample");
                let log = entry.log.as_ref().ok_or(Error::NoLogsAvailable)?;
                err = err.max((log.coords()[0] - want).abs());
            }
            metrics.push(("angle_error".into(), err));
        }

        if with_algebra {
            let depth = sc.depth.unwrap_or(2);
            let estimate = holonomy_algebra(&sample, depth, CLOSURE_TOL)?;
            metrics.push(("rank".into(), estimate.rank as f64));
            if let Some(want) = sc.expected_rank {
                metrics.push(("rank_error".into(), estimate.rank.abs_diff(want) as f64));
            }
            metrics.push(("closure_residual".into(), estimate.closure_residual));

            // Adjoint transport to a random shifted reference.
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let g = random_group(&mut rng, &lift);
            let moved = conjugate_sample(&sample, &g)?;
            let shifted = holonomy_algebra(&moved, depth, CLOSURE_TOL)?;
            let transported = estimate
                .basis
                .iter()
                .map(|b| ad_action(&g.inverse(), b))
                .collect::<Result<Vec<_>>>()?;
            metrics.push((
                "adjoint_angle".into(),
                max_principal_angle(&lift, &transported, &shifted.basis),
            ));
            artifacts.push(("algebra.csv".into(), estimate.to_csv(&lift.group)));
        }

        artifacts.push(("holonomy.csv".into(), sample.to_csv()));
    }

    let x0 = match (x0, family_spec) {
        (Some(x), _) => x,
        (None, _) => vector_of(require(&sc.x0, "x0", "holonomy")?),
    };
    run_checks(sc, &lift, &family_loops, &x0, step, seed, &mut metrics)?;

    if metrics.is_empty() {
        return Err(Error::InvalidScenario(
            "holonomy task needs 'loops', 'checks', or both".into(),
        ));
    }
    Ok(TaskOutput { metrics, artifacts })
}

/// Largest principal angle between the spans of two algebra bases, measured
/// in the Frobenius metric. Dimension mismatch counts as a right angle.
fn max_principal_angle(lift: &TrivializedLift, a: &[AlgebraElement], b: &[AlgebraElement]) -> f64 {
    let orthonormal = |set: &[AlgebraElement]| -> Option<DMatrix<f64>> {
        if set.is_empty() {
            return None;
        }
        let cols: Vec<DVector<f64>> = set
            .iter()
            .map(|e| {
                DVector::from_iterator(
                    lift.group.algebra_dim,
                    e.coords()
                        .iter()
                        .zip(&lift.group.basis_norm2)
                        .map(|(c, n2)| c * n2.sqrt()),
                )
            })
            .collect();
        Some(DMatrix::from_columns(&cols).qr().q())
    };
    match (orthonormal(a), orthonormal(b)) {
        (None, None) => 0.0,
        (Some(qa), Some(qb)) if qa.ncols() == qb.ncols() => {
            let overlap = qa.transpose() * qb;
            let sigma_min = overlap
                .svd(false, false)
                .singular_values
                .min()
                .clamp(-1.0, 1.0);
            sigma_min.acos()
        }
        _ => std::f64::consts::FRAC_PI_2,
    }
}

fn run_convergence(sc: &Scenario, _step: f64, _seed: u64) -> Result<TaskOutput> {
    let group = group_of(sc)?;
    let spec = group.spec();
    let rhs_name = require(&sc.rhs, "rhs", "convergence")?;
    if rhs_name != "so3-trig" || group != GroupName::So3 {
        return Err(Error::InvalidScenario(format!(
            "unknown convergence rhs '{rhs_name}' for group {group}; available: so3-trig on SO3"
        )));
    }
    let spec_for_rhs = spec.clone();
    let rhs = move |t: f64| {
        AlgebraElement::from_coords(
            spec_for_rhs.clone(),
            DVector::from_vec(vec![t.sin(), (2.0 * t).cos(), t]),
        )
    };
    let (t0, t1) = sc.span.unwrap_or((0.0, 2.0));
    let steps = sc
        .steps
        .clone()
        .unwrap_or_else(|| vec![0.2, 0.1, 0.05, 0.025]);
    if steps.len() < 2 || steps.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidScenario(
            "convergence needs at least two positive steps".into(),
        ));
    }

    let identity = GroupElement::identity(spec.clone());
    let smallest = steps.iter().cloned().fold(f64::INFINITY, f64::min);
    let reference_step = smallest / 64.0;
    let reference = solve_right_log_ode(&rhs, &identity, t0, t1, reference_step)?;
    let ref_end = reference.endpoint();
    let mut drift = reference.max_constraint_residual();

    let mut csv = String::from("step,error\n");
    let mut pts = Vec::with_capacity(steps.len());
    for h in &steps {
        let path = solve_right_log_ode(&rhs, &identity, t0, t1, *h)?;
        drift = drift.max(path.max_constraint_residual());
        let err = path.endpoint().distance_to(&ref_end);
        csv.push_str(&format!("{},{}\n", fmt_float(*h), fmt_float(err)));
        if err > 0.0 {
            pts.push((h.ln(), err.ln()));
        }
    }
    if pts.len() < 2 {
        return Err(Error::InvalidScenario(
            "convergence errors hit the noise floor; use coarser steps".into(),
        ));
    }
    // Least-squares slope of ln(error) against ln(step).
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);

    Ok(TaskOutput {
        metrics: vec![
            ("observed_order".into(), slope),
            ("order_error".into(), (slope - 4.0).abs()),
            ("orthogonality_drift".into(), drift),
            ("reference_step".into(), reference_step),
        ],
        artifacts: vec![("convergence.csv".into(), csv)],
    })
}

fn compute(sc: &Scenario, step: f64, seed: u64) -> Result<TaskOutput> {
    let mut out = match sc.task {
        Task::RankMap => run_rank_map(sc, step, seed),
        Task::Orbit => run_orbit(sc, step, seed),
        Task::Transport => run_transport(sc, step, seed),
        Task::Holonomy => run_holonomy(sc, step, seed, false),
        Task::Algebra => run_holonomy(sc, step, seed, true),
        Task::Convergence => run_convergence(sc, step, seed),
    }?;

    let mut csv = String::from("metric,value\n");
    for (name, value) in &out.metrics {
        csv.push_str(&format!("{name},{}\n", fmt_float(*value)));
    }
    out.artifacts.push(("metrics.csv".into(), csv));
    Ok(out)
}

fn judge(sc: &Scenario, metrics: &[(String, f64)], tol_scale: f64) -> Result<Vec<ToleranceCheck>> {
    sc.tolerances
        .iter()
        .map(|(name, bound)| {
            let value = metrics
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| {
                    Error::InvalidScenario(format!(
                        "tolerance '{name}' does not match any metric of task {}",
                        sc.task.as_str()
                    ))
                })?;
            let bound = bound * tol_scale;
            Ok(ToleranceCheck {
                name: name.clone(),
                value,
                bound,
                pass: value <= bound,
            })
        })
        .collect()
}

fn write_atomic(dir: &Path, name: &str, content: &str, timestamp: bool) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut body = String::new();
    if timestamp {
        let secs = SystemTime::now()
            .duration_since(SystemTime::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        body.push_str(&format!("# generated-unix {secs}\n"));
    }
    body.push_str(content);
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Runs the scenario and writes its artifacts. Artifacts appear only if the
/// whole computation succeeded; tolerance failures still write artifacts
/// and are reported through [`RunReport::passed`].
pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<RunReport> {
    let start = Instant::now();
    let step = opts.step.unwrap_or(sc.step);
    if !(step > 0.0) {
        return Err(Error::InvalidScenario(format!(
            "step must be positive, got {step}"
        )));
    }
    let seed = opts.seed.unwrap_or(sc.seed);
    let output = compute(sc, step, seed)?;
    let checks = judge(sc, &output.metrics, opts.tol_scale)?;

    let dir = opts
        .out_dir
        .clone()
        .or_else(|| sc.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("leafwise-runs").join(&sc.name));
    let mut written = Vec::with_capacity(output.artifacts.len());
    for (name, content) in &output.artifacts {
        written.push(write_atomic(&dir, name, content, opts.timestamp)?);
    }

    Ok(RunReport {
        scenario: sc.name.clone(),
        task: sc.task,
        metrics: output.metrics,
        checks,
        artifacts: written,
        wall_time: start.elapsed(),
    })
}
