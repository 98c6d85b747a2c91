//! Scenario description and the three solvers: spatial exclusion on the
//! annulus, point sources assembled directly on the full mesh, and the split
//! `u = û + v` with a free-space part and a smooth FEM correction.

use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::fem::{
    assemble_boundary_load, assemble_mass, assemble_stiffness, EdgeQuadrature, FluxProfile, FluxSampler,
    PointLoad, ScalarField, SparseMatrix, Stepper, DEFAULT_REL_TOL,
};
use crate::geometry::{build_full_mesh, default_circle_points, extract_annulus, Circle, EdgeMarker, Mesh};
use crate::greens::{ConvolutionMode, FreeSpaceSolution, QuadratureRule, SINGULAR_DISTANCE};
use crate::intensities::{dirac_layout, DiracLayout, FluxSpec, IntensitySchedule};
use crate::metrics::{c_star_nonuniform, flux_deviation, DeviationCurves, NormKind, NormOperator};
use crate::{Error, Result, Vec2};

/// Which model a run solves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Exclusion,
    PointDirect,
    PointGreen,
    PointSingle,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Exclusion, Variant::PointDirect, Variant::PointGreen, Variant::PointSingle];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Exclusion => "exclusion",
            Variant::PointDirect => "point_direct",
            Variant::PointGreen => "point_green",
            Variant::PointSingle => "point_single",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn is_point_source(self) -> bool {
        self != Variant::Exclusion
    }
}

/// Discretisation used for the single centre source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SingleMethod {
    Direct,
    #[default]
    Green,
}

impl SingleMethod {
    pub fn name(self) -> &'static str {
        match self {
            SingleMethod::Direct => "direct",
            SingleMethod::Green => "green",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "direct" => Some(SingleMethod::Direct),
            "green" => Some(SingleMethod::Green),
            _ => None,
        }
    }
}

/// Non-dimensional problem setup.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub n: u32,
    pub rho: f64,
    pub phi0: f64,
    pub diffusivity: f64,
    pub radius: f64,
    pub r: f64,
    pub center: Vec2,
    pub half_width: f64,
    pub dt: f64,
    pub t_end: f64,
    pub h: f64,
    pub n_circle_points: Option<usize>,
    pub output_times: Vec<f64>,
    pub convolution: ConvolutionMode,
    pub single_method: SingleMethod,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            n: 1,
            rho: 1.0,
            phi0: 1.0,
            diffusivity: 1.0,
            radius: 1.0,
            r: 0.01,
            center: Vec2::zeros(),
            half_width: 5.0,
            dt: 0.04,
            t_end: 40.0,
            h: 0.0875,
            n_circle_points: None,
            output_times: uniform_times(0.4, 40.0),
            convolution: ConvolutionMode::Frozen,
            single_method: SingleMethod::Green,
        }
    }
}

/// `interval, 2·interval, …` up to and including `t_end`.
pub fn uniform_times(interval: f64, t_end: f64) -> Vec<f64> {
    let n = (t_end / interval + 1e-9).floor() as usize;
    (1..=n).map(|k| k as f64 * interval).collect()
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::domain(msg));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("ρ = {} must lie in [0, 1]", self.rho));
        }
        for (name, v) in [("φ0", self.phi0), ("D", self.diffusivity), ("R", self.radius), ("h", self.h)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.r > 0.0 && self.r < self.radius) {
            return bad(format!("r = {} must satisfy 0 < r < R = {}", self.r, self.radius));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if !(self.t_end >= self.dt) {
            return bad(format!("T = {} must be at least dt = {}", self.t_end, self.dt));
        }
        if !(self.half_width > self.radius + self.center.abs().max()) {
            return bad(format!("half_width = {} does not contain the cell", self.half_width));
        }
        self.output_steps().map(|_| ())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// Step indices of the output times (each snapped to the nearest step).
    pub fn output_steps(&self) -> Result<Vec<usize>> {
        let n = self.n_steps();
        let mut steps = Vec::with_capacity(self.output_times.len());
        for &t in &self.output_times {
            let k = (t / self.dt).round();
            if !(k >= 1.0 && k as usize <= n) || (k * self.dt - t).abs() > 1e-6 * self.dt {
                return Err(Error::domain(format!(
                    "output time {t} is not a step time in (0, {}] for dt = {}",
                    self.t_end, self.dt
                )));
            }
            steps.push(k as usize);
        }
        if steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("output times must be strictly increasing"));
        }
        Ok(steps)
    }

    pub fn flux_spec(&self) -> Result<FluxSpec> {
        FluxSpec::from_ratio(self.n, self.phi0, self.rho)
    }

    pub fn cell(&self) -> Result<Circle> {
        Circle::new(self.center, self.radius)
    }

    /// Symmetric multi-Dirac layout.
    pub fn layout(&self) -> Result<DiracLayout> {
        dirac_layout(&self.flux_spec()?, self.center, self.radius, self.r)
    }

    /// Truncation time of the schedules: half a step.
    pub fn truncation(&self) -> f64 {
        0.5 * self.dt
    }

    pub fn schedule(&self) -> Result<IntensitySchedule> {
        IntensitySchedule::multi(&self.flux_spec()?, &self.layout()?, self.diffusivity, self.truncation())
    }

    pub fn single_layout(&self) -> DiracLayout {
        DiracLayout::single(self.center, self.radius)
    }

    /// Constant centre intensity carrying the total prescribed efflux.
    pub fn single_schedule(&self) -> IntensitySchedule {
        IntensitySchedule::constant(vec![TAU * self.radius * self.phi0])
    }

    pub fn circle_points(&self) -> usize {
        self.n_circle_points.unwrap_or_else(|| default_circle_points(self.radius, self.h))
    }

    /// Fixed-width description, one `key = value` per line.
    pub fn describe(&self) -> Vec<(String, String)> {
        let times: Vec<String> = self.output_times.iter().map(|t| t.to_string()).collect();
        vec![
            ("n".into(), self.n.to_string()),
            ("rho".into(), self.rho.to_string()),
            ("phi0".into(), self.phi0.to_string()),
            ("D".into(), self.diffusivity.to_string()),
            ("R".into(), self.radius.to_string()),
            ("r".into(), self.r.to_string()),
            ("center".into(), format!("{},{}", self.center.x, self.center.y)),
            ("half_width".into(), self.half_width.to_string()),
            ("dt".into(), self.dt.to_string()),
            ("T".into(), self.t_end.to_string()),
            ("h".into(), self.h.to_string()),
            ("n_circle_points".into(), self.circle_points().to_string()),
            ("green_convolution".into(), self.convolution.name().into()),
            ("single_method".into(), self.single_method.name().into()),
            ("output_times".into(), times.join(",")),
        ]
    }
}

/// Reference scales of the non-dimensional formulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NondimScaling {
    pub radius: f64,
    pub tau0: f64,
    pub u_star: f64,
    pub phi0: f64,
}

impl NondimScaling {
    /// `φ0 τ0 / (R u*)`, equal to one by construction.
    pub fn flux_number(&self) -> f64 {
        self.phi0 * self.tau0 / (self.radius * self.u_star)
    }

    pub fn to_physical_time(&self, tau: f64) -> f64 {
        tau * self.tau0
    }

    pub fn to_physical_concentration(&self, gamma: f64) -> f64 {
        gamma * self.u_star
    }

    pub fn to_nondim_concentration(&self, u: f64) -> f64 {
        u / self.u_star
    }

    pub fn to_nondim_time(&self, t: f64) -> f64 {
        t / self.tau0
    }
}

/// Scale lengths by `R`, time by `τ0 = R u*/φ0` and concentration by `u*`.
/// `domain_size` is the physical side length of the square domain.
pub fn nondimensionalize(
    radius: f64,
    diffusivity: f64,
    phi0: f64,
    u_star: f64,
    domain_size: f64,
) -> Result<(NondimScaling, Scenario)> {
    for (name, v) in [("R", radius), ("D", diffusivity), ("φ0", phi0), ("u*", u_star), ("L", domain_size)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::domain(format!("{name} = {v} must be positive")));
        }
    }
    let tau0 = radius * u_star / phi0;
    let scaling = NondimScaling { radius, tau0, u_star, phi0 };
    let scenario = Scenario {
        diffusivity: diffusivity * tau0 / (radius * radius),
        radius: 1.0,
        phi0: 1.0,
        half_width: domain_size / (2.0 * radius),
        ..Scenario::default()
    };
    Ok((scaling, scenario))
}

/// Full mesh and the annulus cut from it.
#[derive(Clone, Debug)]
pub struct MeshPair {
    pub full: Mesh,
    pub annulus: Mesh,
    /// Parent index of each annulus node.
    pub to_full: Vec<usize>,
}

impl MeshPair {
    pub fn build(scenario: &Scenario) -> Result<Self> {
        let full = build_full_mesh(scenario.half_width, scenario.cell()?, scenario.circle_points(), scenario.h)?;
        MeshPair::from_full(full)
    }

    pub fn from_full(full: Mesh) -> Result<Self> {
        let ann = extract_annulus(&full)?;
        Ok(MeshPair { full, annulus: ann.mesh, to_full: ann.to_full })
    }

    pub fn restrict(&self, full_values: &[f64]) -> Vec<f64> {
        self.to_full.iter().map(|&i| full_values[i]).collect()
    }
}

/// Mass bookkeeping after one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MassRecord {
    pub t: f64,
    pub mass: f64,
    /// Independently accumulated source input up to `t`.
    pub injected: f64,
}

impl MassRecord {
    /// `|mass − injected| / |injected|`.
    pub fn defect(&self) -> f64 {
        (self.mass - self.injected).abs() / self.injected.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub steps: usize,
    pub cg_iterations: usize,
    pub max_cg_iterations: usize,
    pub masked_nodes: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    fn record(&mut self, iters: usize) {
        self.steps += 1;
        self.cg_iterations += iters;
        self.max_cg_iterations = self.max_cg_iterations.max(iters);
    }
}

/// Output of one solver run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub variant: Variant,
    /// Fields live on the full mesh for point-source runs, on the annulus
    /// otherwise.
    pub on_full_mesh: bool,
    pub snapshots: Vec<ScalarField>,
    pub flux_trace: Vec<FluxProfile>,
    pub mass_trace: Vec<MassRecord>,
    pub diagnostics: Diagnostics,
}

impl RunResult {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    /// Snapshot values on the annulus nodes.
    pub fn annulus_values(&self, pair: &MeshPair) -> Vec<Vec<f64>> {
        self.snapshots
            .iter()
            .map(|s| if self.on_full_mesh { pair.restrict(&s.values) } else { s.values.clone() })
            .collect()
    }

    pub fn final_mass(&self) -> Option<MassRecord> {
        self.mass_trace.last().copied()
    }
}

/// Dispatch on `variant`.
pub fn solve(scenario: &Scenario, pair: &MeshPair, variant: Variant) -> Result<RunResult> {
    scenario.validate()?;
    match variant {
        Variant::Exclusion => solve_exclusion(scenario, pair, &scenario.flux_spec()?),
        Variant::PointDirect => solve_point_direct(scenario, pair, &scenario.layout()?, &scenario.schedule()?, variant),
        Variant::PointGreen => solve_point_green(scenario, pair, &scenario.layout()?, &scenario.schedule()?, variant),
        Variant::PointSingle => {
            let (layout, schedule) = (scenario.single_layout(), scenario.single_schedule());
            match scenario.single_method {
                SingleMethod::Direct => solve_point_direct(scenario, pair, &layout, &schedule, variant),
                SingleMethod::Green => solve_point_green(scenario, pair, &layout, &schedule, variant),
            }
        }
    }
}

/// Backward Euler on the annulus with the prescribed flux on the cell
/// boundary and zero flux on the outer wall.
pub fn solve_exclusion(scenario: &Scenario, pair: &MeshPair, flux: &FluxSpec) -> Result<RunResult> {
    scenario.validate()?;
    let mesh = &pair.annulus;
    let mass = assemble_mass(mesh);
    let mut stepper = Stepper::new(&mass, &assemble_stiffness(mesh, scenario.diffusivity)?, scenario.dt, DEFAULT_REL_TOL)?;
    let load = assemble_boundary_load(mesh, EdgeMarker::CellBoundary, |th| flux.density(th))?;
    let input_rate: f64 = load.iter().sum();
    let sampler = FluxSampler::for_cell(mesh)?;
    let outputs = scenario.output_steps()?;
    let ones = vec![1.0; mesh.node_count()];
    let mut u = vec![0.0; mesh.node_count()];
    let mut result = RunResult::empty(Variant::Exclusion, false);
    let mut injected = 0.0;
    let mut next = 0;
    for k in 1..=scenario.n_steps() {
        let t = k as f64 * scenario.dt;
        let stats = stepper.step(&mut u, &load)?;
        result.diagnostics.record(stats.iterations);
        injected += scenario.dt * input_rate;
        let m = dot_mass(&mass, &ones, &u);
        result.mass_trace.push(MassRecord { t, mass: m, injected });
        if next < outputs.len() && outputs[next] == k {
            result.flux_trace.push(sampler.sample(mesh, &u, scenario.diffusivity, t)?);
            result.snapshots.push(ScalarField::new(mesh, t, u.clone())?);
            next += 1;
        }
    }
    Ok(result)
}

fn dot_mass(mass: &SparseMatrix, ones: &[f64], u: &[f64]) -> f64 {
    let mu = mass.mul_vec(u);
    ones.iter().zip(&mu).map(|(a, b)| a * b).sum()
}

impl RunResult {
    fn empty(variant: Variant, on_full_mesh: bool) -> Self {
        RunResult {
            variant,
            on_full_mesh,
            snapshots: Vec::new(),
            flux_trace: Vec::new(),
            mass_trace: Vec::new(),
            diagnostics: Diagnostics::default(),
        }
    }
}

/// Backward Euler on the full mesh with Dirac loads; intensities are taken
/// at the end of each step.
pub fn solve_point_direct(
    scenario: &Scenario,
    pair: &MeshPair,
    layout: &DiracLayout,
    schedule: &IntensitySchedule,
    variant: Variant,
) -> Result<RunResult> {
    scenario.validate()?;
    let mesh = &pair.full;
    let mass = assemble_mass(mesh);
    let mut stepper = Stepper::new(&mass, &assemble_stiffness(mesh, scenario.diffusivity)?, scenario.dt, DEFAULT_REL_TOL)?;
    let points = PointLoad::new(mesh, &layout.points())?;
    let sampler = FluxSampler::for_cell(mesh)?;
    let outputs = scenario.output_steps()?;
    let ones = vec![1.0; mesh.node_count()];
    let mut u = vec![0.0; mesh.node_count()];
    let mut load = vec![0.0; mesh.node_count()];
    let mut phi = vec![0.0; schedule.len()];
    let mut result = RunResult::empty(variant, true);
    let mut injected = 0.0;
    let mut next = 0;
    for k in 1..=scenario.n_steps() {
        let t = k as f64 * scenario.dt;
        schedule.eval_into(t, &mut phi)?;
        points.assemble_into(&phi, &mut load);
        let stats = stepper.step(&mut u, &load)?;
        result.diagnostics.record(stats.iterations);
        injected += scenario.dt * phi.iter().sum::<f64>();
        result.mass_trace.push(MassRecord { t, mass: dot_mass(&mass, &ones, &u), injected });
        if next < outputs.len() && outputs[next] == k {
            result.flux_trace.push(sampler.sample(mesh, &u, scenario.diffusivity, t)?);
            result.snapshots.push(ScalarField::new(mesh, t, u.clone())?);
            next += 1;
        }
    }
    Ok(result)
}

/// Free-space part `û` plus an FEM correction `v` that restores the zero-flux
/// outer wall: `D∇v·n = −D∇û·n` there.
///
/// Mass bookkeeping: `mass = 1ᵀMv + ∫_box û` and `injected` is the
/// free-space box mass plus the accumulated wall load of `v`.
pub fn solve_point_green(
    scenario: &Scenario,
    pair: &MeshPair,
    layout: &DiracLayout,
    schedule: &IntensitySchedule,
    variant: Variant,
) -> Result<RunResult> {
    scenario.validate()?;
    let mesh = &pair.full;
    let dd = scenario.diffusivity;
    let mass = assemble_mass(mesh);
    let mut stepper = Stepper::new(&mass, &assemble_stiffness(mesh, dd)?, scenario.dt, DEFAULT_REL_TOL)?;
    let wall = EdgeQuadrature::new(mesh, EdgeMarker::OuterWall)?;
    let free = FreeSpaceSolution::new(layout, schedule.clone(), dd, QuadratureRule::default(), scenario.convolution)?;
    let sampler = FluxSampler::for_cell(mesh)?;
    let outputs = scenario.output_steps()?;
    let sources = layout.points();
    let masked: Vec<usize> = mesh
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, p)| sources.iter().any(|s| (*p - s).norm() < SINGULAR_DISTANCE))
        .map(|(i, _)| i)
        .collect();
    let ones = vec![1.0; mesh.node_count()];
    let mut v = vec![0.0; mesh.node_count()];
    let mut result = RunResult::empty(variant, true);
    if !masked.is_empty() {
        result.diagnostics.warnings.push(format!("{} mesh nodes coincide with Dirac points and are masked", masked.len()));
    }
    result.diagnostics.masked_nodes = masked.clone();
    let mut wall_input = 0.0;
    let mut next = 0;
    for k in 1..=scenario.n_steps() {
        let t = k as f64 * scenario.dt;
        let g: Vec<f64> = wall
            .points
            .par_iter()
            .map(|p| free.gradient(&p.x, t).map(|grad| -dd * grad.dot(&p.normal)))
            .collect::<Result<_>>()?;
        let load = wall.assemble(&g);
        let stats = stepper.step(&mut v, &load)?;
        result.diagnostics.record(stats.iterations);
        wall_input += scenario.dt * load.iter().sum::<f64>();
        let box_mass = free.mass_in_box(&scenario.center, scenario.half_width, t)?;
        result.mass_trace.push(MassRecord {
            t,
            mass: dot_mass(&mass, &ones, &v) + box_mass,
            injected: wall_input + box_mass,
        });
        if next < outputs.len() && outputs[next] == k {
            let nodes = mesh.nodes();
            let mut u: Vec<f64> = (0..nodes.len())
                .into_par_iter()
                .map(|i| {
                    if masked.binary_search(&i).is_ok() {
                        Ok(f64::NAN)
                    } else {
                        free.value(&nodes[i], t).map(|w| w + v[i])
                    }
                })
                .collect::<Result<_>>()?;
            // Flux: exact ∇û at arc midpoints plus the P1 gradient of v.
            let grad_v = sampler.gradients(mesh, &v);
            let samples = sampler
                .midpoints()
                .par_iter()
                .zip(grad_v.par_iter())
                .zip(sampler.normals().par_iter())
                .zip(sampler.arcs().par_iter())
                .map(|(((mid, gv), n), arc)| {
                    free.gradient(mid, t).map(|gu| (arc.theta_mid, dd * (gu + gv).dot(n)))
                })
                .collect::<Result<Vec<_>>>()?;
            result.flux_trace.push(FluxProfile { time: t, samples });
            for &i in &masked {
                u[i] = f64::NAN;
            }
            result.snapshots.push(ScalarField::new(mesh, t, u)?);
            next += 1;
        }
    }
    Ok(result)
}

/// `Σ_i ∫ Φ_i(s) ds` over `[trunc, t]`, or `[0, t]` for constant schedules.
pub fn integrated_intensity(schedule: &IntensitySchedule, t: f64, rule: &QuadratureRule) -> Result<f64> {
    let trunc = (!schedule.is_constant()).then(|| schedule.truncation());
    let mut total = 0.0;
    for node in rule.nodes(t, 0.5 * t, trunc) {
        total += node.weight * schedule.eval(node.s)?.iter().sum::<f64>();
    }
    Ok(total)
}

/// Deviation of a point-source run from an exclusion run on the annulus,
/// with a leading `t = 0` row where both fields vanish.
pub fn compare_runs(
    exclusion: &RunResult,
    point: &RunResult,
    pair: &MeshPair,
    spec: &FluxSpec,
) -> Result<DeviationCurves> {
    let (ts, tp) = (exclusion.times(), point.times());
    if ts.len() != tp.len() || ts.iter().zip(&tp).any(|(a, b)| (a - b).abs() > 1e-9 * a.abs().max(1.0)) {
        return Err(Error::domain("runs do not share output times"));
    }
    if exclusion.flux_trace.len() != point.flux_trace.len() {
        return Err(Error::domain("runs have different flux traces"));
    }
    let op = NormOperator::new(&pair.annulus)?;
    let arcs = crate::geometry::boundary_arcs(&pair.annulus, EdgeMarker::CellBoundary)?;
    let (us, up) = (exclusion.annulus_values(pair), point.annulus_values(pair));
    let mut curves = DeviationCurves {
        times: vec![0.0],
        l2_dev: vec![0.0],
        h1_dev: vec![0.0],
        flux_dev: vec![flux_deviation(spec, &FluxProfile::zero_on(&arcs, 0.0), &arcs)?],
        c_star: Vec::new(),
    };
    for (k, t) in ts.iter().enumerate() {
        let diff: Vec<f64> = us[k].iter().zip(&up[k]).map(|(a, b)| a - b).collect();
        curves.times.push(*t);
        curves.l2_dev.push(op.norm(&diff, NormKind::L2)?);
        curves.h1_dev.push(op.norm(&diff, NormKind::H1)?);
        curves.flux_dev.push(flux_deviation(spec, &point.flux_trace[k], &arcs)?);
    }
    curves.c_star = c_star_nonuniform(&curves.times, &curves.flux_dev)?;
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Region;

    fn small(dt: f64, t_end: f64, h: f64) -> Scenario {
        Scenario {
            half_width: 3.0,
            dt,
            t_end,
            h,
            output_times: uniform_times(10.0 * dt, t_end),
            ..Scenario::default()
        }
    }

    #[test]
    fn scenario_defaults_and_validation() {
        let s = Scenario::default();
        s.validate().unwrap();
        assert_eq!(s.n_steps(), 1000);
        assert_eq!(s.output_steps().unwrap().len(), 100);
        assert_eq!(s.circle_points(), 128);
        assert!(Scenario { r: 1.5, ..s.clone() }.validate().is_err());
        assert!(Scenario { rho: 1.2, ..s.clone() }.validate().is_err());
        assert!(Scenario { t_end: 0.01, ..s.clone() }.validate().is_err());
        assert!(Scenario { output_times: vec![0.41], ..s.clone() }.validate().is_err());
        assert!(Scenario { half_width: 0.9, ..s }.validate().is_err());
    }

    #[test]
    fn nondimensional_scaling() {
        let (sc, s) = nondimensionalize(1.0, 3.0, 1.0, 1.0, 10.0).unwrap();
        assert_eq!((sc.tau0, s.diffusivity, s.half_width), (1.0, 3.0, 5.0));
        let (sc, s) = nondimensionalize(2.0, 4.0, 1.0, 1.0, 20.0).unwrap();
        assert_eq!((sc.tau0, s.diffusivity, s.radius), (2.0, 2.0, 1.0));
        let (sc, _) = nondimensionalize(0.37, 1.3, 2.9, 0.011, 5.0).unwrap();
        assert!((sc.flux_number() - 1.0).abs() < 1e-12);
        let g = 0.123_456_789;
        assert!((sc.to_nondim_concentration(sc.to_physical_concentration(g)) - g).abs() < 1e-14 * g);
        assert!((sc.to_nondim_time(sc.to_physical_time(g)) - g).abs() < 1e-14 * g);
        assert!(nondimensionalize(0.0, 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn exclusion_mass_and_positivity() {
        let s = Scenario { rho: 0.0, ..small(0.05, 2.0, 0.3) };
        let pair = MeshPair::build(&s).unwrap();
        let flat = solve(&s, &pair, Variant::Exclusion).unwrap();
        let perim: f64 = crate::geometry::boundary_arcs(&pair.annulus, EdgeMarker::CellBoundary)
            .unwrap()
            .iter()
            .map(|a| a.length)
            .sum();
        for (k, rec) in flat.mass_trace.iter().enumerate() {
            let expect = perim * (k + 1) as f64 * s.dt;
            assert!((rec.mass - expect).abs() < 1e-8 * expect);
            assert!(rec.defect() < 1e-8);
        }
        let wavy = solve(&Scenario { rho: 1.0, ..s.clone() }, &pair, Variant::Exclusion).unwrap();
        for (a, b) in flat.mass_trace.iter().zip(&wavy.mass_trace) {
            assert!((a.mass - b.mass).abs() < 1e-6 * a.mass);
        }
        for snap in &wavy.snapshots {
            assert!(snap.values.iter().all(|&v| v >= -1e-10));
        }
        assert_eq!(wavy.snapshots.len(), s.output_times.len());
    }

    #[test]
    fn direct_point_sources() {
        let s = small(0.05, 1.0, 0.3);
        let pair = MeshPair::build(&s).unwrap();
        let zero = IntensitySchedule::constant(vec![0.0, 0.0]);
        let res = solve_point_direct(&s, &pair, &s.layout().unwrap(), &zero, Variant::PointDirect).unwrap();
        assert!(res.snapshots.iter().all(|f| f.values.iter().all(|&v| v == 0.0)));
        let res = solve(&s, &pair, Variant::PointDirect).unwrap();
        let sched = s.schedule().unwrap();
        let mut expect = 0.0;
        for (k, rec) in res.mass_trace.iter().enumerate() {
            expect += s.dt * sched.eval((k + 1) as f64 * s.dt).unwrap().iter().sum::<f64>();
            assert!((rec.mass - expect).abs() < 1e-8 * expect.abs());
        }
    }

    #[test]
    fn single_source_flux_for_large_d() {
        // Once the box is well mixed the source feeds the whole domain evenly,
        // so the flux through the circle tends to φ0 (1 − πR²/|Ω|).
        // One-sided P1 gradients are first order, hence the looser direct bound.
        for (method, tol) in [(SingleMethod::Green, 0.005), (SingleMethod::Direct, 0.06)] {
            let s = Scenario { diffusivity: 30.0, single_method: method, ..small(0.05, 2.0, 0.15) };
            let pair = MeshPair::build(&s).unwrap();
            let res = solve(&s, &pair, Variant::PointSingle).unwrap();
            let last = res.flux_trace.last().unwrap();
            let mean = last.values().sum::<f64>() / last.samples.len() as f64;
            let expect = 1.0 - std::f64::consts::PI / (4.0 * s.half_width * s.half_width);
            assert!((mean - expect).abs() < tol, "{method:?}: {mean} vs {expect}");
        }
    }

    #[test]
    fn green_zero_and_early_correction() {
        let s = Scenario { half_width: 5.0, ..small(0.04, 0.4, 0.3) };
        let pair = MeshPair::build(&s).unwrap();
        let layout = s.layout().unwrap();
        let zero = IntensitySchedule::constant(vec![0.0, 0.0]);
        let res = solve_point_green(&s, &pair, &layout, &zero, Variant::PointGreen).unwrap();
        for f in &res.snapshots {
            for (i, v) in f.values.iter().enumerate() {
                assert!(*v == 0.0 || res.diagnostics.masked_nodes.contains(&i));
            }
        }
        // Early times: the correction is tiny compared with û.
        let single = s.single_layout();
        let sched = s.single_schedule();
        let green = solve_point_green(&s, &pair, &single, &sched, Variant::PointSingle).unwrap();
        let free = FreeSpaceSolution::new(&single, sched, 1.0, QuadratureRule::default(), s.convolution).unwrap();
        let last = green.snapshots.last().unwrap();
        let op = NormOperator::new(&pair.annulus).unwrap();
        let uh: Vec<f64> = pair.annulus.nodes().iter().map(|p| free.value(p, last.time).unwrap()).collect();
        let total = pair.restrict(&last.values);
        let v: Vec<f64> = total.iter().zip(&uh).map(|(a, b)| a - b).collect();
        let ratio = op.norm(&v, NormKind::L2).unwrap() / op.norm(&uh, NormKind::L2).unwrap();
        assert!(ratio < 1e-3, "{ratio}");
    }

    #[test]
    fn green_conserves_mass_in_both_modes() {
        let s = small(0.05, 2.0, 0.3);
        let pair = MeshPair::build(&s).unwrap();
        for mode in [ConvolutionMode::Frozen, ConvolutionMode::History] {
            let sc = Scenario { convolution: mode, half_width: 2.0, ..s.clone() };
            let pair = if mode == ConvolutionMode::History { MeshPair::build(&sc).unwrap() } else { pair.clone() };
            let res = solve(&sc, &pair, Variant::PointGreen).unwrap();
            let rec = res.final_mass().unwrap();
            assert!(rec.defect() < 1e-6, "{mode:?}: {rec:?}");
            if mode == ConvolutionMode::History {
                // Only the wall input is time-discretised: O(dt) gap to the
                // exact source integral.
                let exact = integrated_intensity(&sc.schedule().unwrap(), rec.t, &QuadratureRule::new(16, 8)).unwrap();
                assert!((rec.mass - exact).abs() < 1e-2 * exact, "{} vs {exact}", rec.mass);
            }
        }
    }

    #[test]
    fn masked_nodes_and_regions() {
        let s = small(0.05, 0.5, 0.3);
        let pair = MeshPair::build(&s).unwrap();
        let res = solve(&s, &pair, Variant::PointSingle).unwrap();
        assert!(!res.diagnostics.masked_nodes.is_empty());
        // The centre is a mesh node of the ring construction.
        for &i in &res.diagnostics.masked_nodes {
            assert!(res.snapshots[0].values[i].is_nan());
        }
        assert!(pair.annulus.regions().iter().all(|r| *r == Region::Extracellular));
        let vals = res.annulus_values(&pair);
        assert!(vals.iter().all(|v| v.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn identical_runs_compare_to_zero() {
        let s = small(0.05, 0.5, 0.3);
        let pair = MeshPair::build(&s).unwrap();
        let ex = solve(&s, &pair, Variant::Exclusion).unwrap();
        let spec = s.flux_spec().unwrap();
        let mut fake = ex.clone();
        fake.on_full_mesh = false;
        let c = compare_runs(&ex, &fake, &pair, &spec).unwrap();
        assert!(c.l2_dev.iter().chain(&c.h1_dev).all(|&v| v == 0.0));
        let dp = solve(&s, &pair, Variant::PointDirect).unwrap();
        let c = compare_runs(&ex, &dp, &pair, &spec).unwrap();
        assert_eq!(c.times.len(), s.output_times.len() + 1);
        assert!(c.l2_dev.iter().chain(&c.h1_dev).chain(&c.flux_dev).all(|&v| v >= 0.0));
        assert!(c.c_star.windows(2).all(|w| w[1] >= w[0]));
        let mut shifted = dp.clone();
        shifted.snapshots[0].time += s.dt;
        assert!(compare_runs(&ex, &shifted, &pair, &spec).is_err());
        let short = RunResult { snapshots: Vec::new(), ..dp };
        assert!(compare_runs(&ex, &short, &pair, &spec).is_err());
    }
}
