//! Prescribed flux densities, Dirac point layouts and the time-dependent
//! intensities that make the free-space boundary flux match the prescribed
//! extrema.
//!
//! Closed forms are evaluated in a rearranged, cancellation-free form: every
//! exponential is combined with its prefactor in log space and differences
//! such as `1 - e^{-x}` go through `expm1`.

use std::f64::consts::{LN_10, PI, TAU};

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result, Vec2};

/// Largest admissible intensity magnitude.
pub const INTENSITY_LIMIT: f64 = 1e300;
const LOG_LIMIT: f64 = 300.0 * LN_10;

/// Prescribed flux density `φ0 (1 + ρ sin nθ)` with `ρ = A / φ0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluxSpec {
    pub n: u32,
    pub phi0: f64,
    pub amplitude: f64,
}

impl FluxSpec {
    pub fn new(n: u32, phi0: f64, amplitude: f64) -> Result<Self> {
        let spec = FluxSpec { n, phi0, amplitude };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec from the fluctuation ratio `ρ`.
    pub fn from_ratio(n: u32, phi0: f64, rho: f64) -> Result<Self> {
        FluxSpec::new(n, phi0, rho * phi0)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::domain("flux mode n must be at least 1"));
        }
        if !(self.phi0 > 0.0 && self.phi0.is_finite()) {
            return Err(Error::domain(format!("φ0 = {} must be positive", self.phi0)));
        }
        if !(self.amplitude >= 0.0) {
            return Err(Error::domain(format!("amplitude A = {} must be non-negative", self.amplitude)));
        }
        if self.amplitude > self.phi0 {
            return Err(Error::domain(format!(
                "ρ = {} exceeds 1; negative flux densities are not supported",
                self.rho()
            )));
        }
        Ok(())
    }

    pub fn rho(&self) -> f64 {
        self.amplitude / self.phi0
    }

    /// `φ0 + A sin(nθ)`.
    pub fn density(&self, theta: f64) -> f64 {
        self.phi0 + self.amplitude * (self.n as f64 * theta).sin()
    }

    /// Angles `θ_k = (k − ½)π/n`, `k = 1..=2n`; odd `k` are maxima.
    pub fn extremum_angles(&self) -> Vec<f64> {
        let n = self.n as f64;
        (1..=2 * self.n).map(|k| (k as f64 - 0.5) * PI / n).collect()
    }
}

/// Prescribed flux density at angle `θ`.
pub fn flux_density(spec: &FluxSpec, theta: f64) -> Result<f64> {
    spec.validate()?;
    Ok(spec.density(theta))
}

/// Cell centre plus off-centre Dirac points.
#[derive(Clone, Debug, PartialEq)]
pub struct DiracLayout {
    pub center: Vec2,
    pub off_center: Vec<Vec2>,
    /// Offset of the off-centre points (zero for a single source).
    pub r: f64,
    /// Cell radius.
    pub radius: f64,
}

impl DiracLayout {
    /// Single source at the cell centre.
    pub fn single(center: Vec2, radius: f64) -> Self {
        DiracLayout { center, off_center: Vec::new(), r: 0.0, radius }
    }

    /// Arbitrary off-centre points strictly inside the cell.
    pub fn custom(center: Vec2, radius: f64, off_center: Vec<Vec2>) -> Result<Self> {
        let mut r = 0.0f64;
        for p in &off_center {
            let d = (p - center).norm();
            if !(d > 0.0 && d < radius) {
                return Err(Error::domain(format!("point {p:?} is not strictly inside the cell")));
            }
            r = r.max(d);
        }
        Ok(DiracLayout { center, off_center, r, radius })
    }

    /// All points, centre first.
    pub fn points(&self) -> Vec<Vec2> {
        std::iter::once(self.center).chain(self.off_center.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        1 + self.off_center.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Symmetric layout: one off-centre point at distance `r` on every maximum
/// direction of `φ_n`.
pub fn dirac_layout(spec: &FluxSpec, center: Vec2, radius: f64, r: f64) -> Result<DiracLayout> {
    check_geometry(radius, r)?;
    let off_center = if spec.n == 1 {
        vec![center + Vec2::new(0.0, r)]
    } else {
        spec.extremum_angles()
            .iter()
            .step_by(2)
            .map(|&th| center + r * Vec2::new(th.cos(), th.sin()))
            .collect()
    };
    Ok(DiracLayout { center, off_center, r, radius })
}

fn check_geometry(radius: f64, r: f64) -> Result<()> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::domain(format!("cell radius R = {radius} must be positive")));
    }
    if !(r > 0.0 && r < radius) {
        return Err(Error::domain(format!("offset r = {r} must satisfy 0 < r < R = {radius}")));
    }
    Ok(())
}

fn check_time(t: f64, d: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::domain(format!("time t = {t} must be positive")));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::domain(format!("diffusivity D = {d} must be positive")));
    }
    Ok(())
}

fn check_amplitude(phi0: f64, a: f64) -> Result<()> {
    FluxSpec::new(1, phi0, a).map(|_| ())
}

/// `sign · exp(log_mag)` with the overflow policy applied.
fn guarded_exp(log_mag: f64, sign: f64, t: f64) -> Result<f64> {
    if log_mag > LOG_LIMIT {
        return Err(Error::IntensityOverflow { t, decimal_exponent: log_mag / LN_10 });
    }
    Ok(sign * log_mag.exp())
}

fn signed_log(x: f64) -> (f64, f64) {
    (x.abs().ln(), x.signum())
}

/// Dipole intensities `(Φ̃_D, Φ̃_C)` for `n = 1`: the off-centre point at
/// `(x_C, y_C + r)` and the centre.
pub fn intensity_dipole(t: f64, radius: f64, r: f64, d: f64, phi0: f64, a: f64) -> Result<(f64, f64)> {
    check_time(t, d)?;
    check_geometry(radius, r)?;
    check_amplitude(phi0, a)?;
    let s = 1.0 / (4.0 * d * t);
    let den = 2.0 * r - (radius - r) * (-4.0 * radius * r * s).exp_m1();
    let phi_d = if a == 0.0 {
        0.0
    } else {
        let l = (4.0 * PI * a * (radius * radius - r * r) / den).ln() + (radius - r).powi(2) * s;
        guarded_exp(l, 1.0, t)?
    };
    let phi_c = centre_intensity(
        t,
        radius,
        phi0 - a,
        2.0 * a * (radius - r) / den,
        (radius * radius - 4.0 * radius * r) * s,
        radius * radius * s,
    )?;
    Ok((phi_d, phi_c))
}

/// `2πR [c1 e^{e1} − c2 e^{e2}]` with overflow checks on both terms.
fn centre_intensity(t: f64, radius: f64, c1: f64, c2: f64, e2: f64, e1: f64) -> Result<f64> {
    let pre = TAU * radius;
    let first = if c1 == 0.0 {
        0.0
    } else {
        let (l, sg) = signed_log(pre * c1);
        guarded_exp(l + e1, sg, t)?
    };
    let second = if c2 == 0.0 {
        0.0
    } else {
        let (l, sg) = signed_log(pre * c2);
        guarded_exp(l + e2, sg, t)?
    };
    Ok(first - second)
}

/// `(R²−r²)(R²+r²)·e^{(R−r)²s}/C_2` rearranged: returns the positive
/// polynomial `N(s)` with `den2 = e^{−(R−r)²s} N / ((R²−r²)(R²+r²))`.
fn tripole_denominator(radius: f64, r: f64, s: f64) -> f64 {
    let eps = -(-2.0 * radius * r * s).exp_m1();
    4.0 * radius * r * r
        + 2.0 * r * (radius - r).powi(2) * eps
        + (radius - r) * (radius * radius + r * r) * eps * eps
}

/// Tripole intensities `(Φ̃_D, Φ̃_C)` for `n = 2`: two off-centre points at
/// angles π/4 and 5π/4 sharing `Φ̃_D`, and the centre.
pub fn intensity_tripole(t: f64, radius: f64, r: f64, d: f64, phi0: f64, a: f64) -> Result<(f64, f64)> {
    check_time(t, d)?;
    check_geometry(radius, r)?;
    check_amplitude(phi0, a)?;
    let s = 1.0 / (4.0 * d * t);
    let big_n = tripole_denominator(radius, r, s);
    let (r2, q2) = (radius * radius, r * r);
    let phi_d = if a == 0.0 {
        0.0
    } else {
        let l = (4.0 * PI * a * (r2 - q2) * (r2 + q2) / big_n).ln() + (radius - r).powi(2) * s;
        guarded_exp(l, 1.0, t)?
    };
    let phi_c = centre_intensity(
        t,
        radius,
        phi0 - a,
        4.0 * a * radius * (r2 - q2) / big_n,
        (r2 - 2.0 * radius * r) * s,
        r2 * s,
    )?;
    Ok((phi_d, phi_c))
}

/// Coefficient `C_2(t) = Φ̃_D / 2π` of the tripole flux.
pub fn tripole_c2(t: f64, radius: f64, r: f64, d: f64, phi0: f64, a: f64) -> Result<f64> {
    Ok(intensity_tripole(t, radius, r, d, phi0, a)?.0 / TAU)
}

/// Kernel of the approximate flux: contribution per unit intensity of a
/// source at `x_i` to the flux at boundary point `x`, without the Gaussian.
fn flux_weight(center: &Vec2, radius: f64, x: &Vec2, xi: &Vec2) -> (f64, f64) {
    let diff = x - xi;
    let d2 = diff.norm_squared();
    ((x - center).dot(&diff) / (TAU * radius * d2), d2)
}

/// Intensities (centre first) solving the `2n` extremum conditions for an
/// arbitrary layout with at most `2n` points. Rows and columns are
/// equilibrated before a least-squares solve; an inconsistent or singular
/// system is a numerical error.
pub fn intensity_general(spec: &FluxSpec, layout: &DiracLayout, t: f64, d: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    check_time(t, d)?;
    let pts = layout.points();
    let m = pts.len();
    let rows = 2 * spec.n as usize;
    if m > rows {
        return Err(Error::domain(format!(
            "{m} unknown intensities exceed the {rows} extremum conditions"
        )));
    }
    let s = 1.0 / (4.0 * d * t);
    let angles = spec.extremum_angles();
    let bdry: Vec<Vec2> = angles
        .iter()
        .map(|th| layout.center + layout.radius * Vec2::new(th.cos(), th.sin()))
        .collect();
    let mut weight = vec![vec![0.0; m]; rows];
    let mut dist2 = vec![vec![0.0; m]; rows];
    for k in 0..rows {
        for i in 0..m {
            let (w, d2) = flux_weight(&layout.center, layout.radius, &bdry[k], &pts[i]);
            weight[k][i] = w;
            dist2[k][i] = d2;
        }
    }
    // Column scaling: unknown y_i = Φ_i e^{-min_k d²_ki s}.
    let col_min: Vec<f64> = (0..m)
        .map(|i| (0..rows).map(|k| dist2[k][i]).fold(f64::INFINITY, f64::min))
        .collect();
    let mut mat = DMatrix::<f64>::zeros(rows, m);
    let mut rhs = DVector::<f64>::zeros(rows);
    for k in 0..rows {
        for i in 0..m {
            mat[(k, i)] = weight[k][i] * (-(dist2[k][i] - col_min[i]) * s).exp();
        }
        let target = if k % 2 == 0 { spec.phi0 + spec.amplitude } else { spec.phi0 - spec.amplitude };
        let scale = mat.row(k).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if scale == 0.0 {
            return Err(Error::Numerical("extremum condition with vanishing row".into()));
        }
        for i in 0..m {
            mat[(k, i)] /= scale;
        }
        rhs[k] = target / scale;
    }
    let svd = mat.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-13 * smax) {
        return Err(Error::Numerical(format!(
            "singular extremum system (condition number {:.3e})",
            smax / smin
        )));
    }
    let y = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::Numerical(format!("extremum system solve failed: {e}")))?;
    let resid = (&mat * &y - &rhs).amax();
    if resid > 1e-9 * rhs.amax().max(1e-300) {
        return Err(Error::Numerical(format!(
            "extremum conditions are inconsistent for this layout (residual {resid:.3e})"
        )));
    }
    (0..m)
        .map(|i| {
            if y[i] == 0.0 {
                return Ok(0.0);
            }
            let (l, sg) = signed_log(y[i]);
            guarded_exp(l + col_min[i] * s, sg, t)
        })
        .collect()
}

/// Free-space flux `Σ Φ_i/(2πR) (x−x_C)·(x−x_i)/|x−x_i|² e^{−|x−x_i|²/4Dt}`
/// at the boundary point of angle `θ`, for any layout and intensities.
pub fn approx_flux_from_layout(layout: &DiracLayout, intensities: &[f64], theta: f64, t: f64, d: f64) -> f64 {
    let x = layout.center + layout.radius * Vec2::new(theta.cos(), theta.sin());
    let s = 1.0 / (4.0 * d * t);
    layout
        .points()
        .iter()
        .zip(intensities)
        .map(|(p, &phi)| {
            if phi == 0.0 {
                return 0.0;
            }
            let (w, d2) = flux_weight(&layout.center, layout.radius, &x, p);
            phi * w * (-d2 * s).exp()
        })
        .sum()
}

/// Approximate flux `φ̂_n(θ, t)` for `n ∈ {1, 2}` with the symmetric layout.
pub fn approx_flux_hat(spec: &FluxSpec, theta: f64, t: f64, radius: f64, r: f64, d: f64) -> Result<f64> {
    spec.validate()?;
    check_time(t, d)?;
    check_geometry(radius, r)?;
    let (p0, a) = (spec.phi0, spec.amplitude);
    let s = 1.0 / (4.0 * d * t);
    let (r2, q2) = (radius * radius, r * r);
    match spec.n {
        1 => {
            let sin = theta.sin();
            let den = 2.0 * r - (radius - r) * (-4.0 * radius * r * s).exp_m1();
            let d2 = r2 + q2 - 2.0 * radius * r * sin;
            let near = (r2 - q2) * (radius - r * sin) / d2 * (-2.0 * radius * r * (1.0 - sin) * s).exp();
            let centre = (radius - r) * (-4.0 * radius * r * s).exp();
            Ok(p0 - a + 2.0 * a / den * (near - centre))
        }
        2 => {
            let big_n = tripole_denominator(radius, r, s);
            let sum = theta.sin() + theta.cos();
            let h = std::f64::consts::FRAC_1_SQRT_2 * r * sum;
            let base = (radius - r).powi(2);
            let d1 = r2 + q2 - std::f64::consts::SQRT_2 * radius * r * sum;
            let d2 = r2 + q2 + std::f64::consts::SQRT_2 * radius * r * sum;
            let pair = (radius - h) / d1 * (-(d1 - base) * s).exp()
                + (radius + h) / d2 * (-(d2 - base) * s).exp();
            let centre = 2.0 * radius * (-2.0 * radius * r * s).exp();
            Ok(p0 - a + 2.0 * a * (r2 - q2) / big_n * ((r2 + q2) * pair - centre))
        }
        n => Err(Error::domain(format!("closed-form approximate flux needs n in {{1, 2}}, got {n}"))),
    }
}

/// Limit of `φ̂_n(θ, t)` as `t → ∞` for `n ∈ {1, 2}`.
pub fn approx_flux_steady(spec: &FluxSpec, theta: f64, radius: f64, r: f64) -> Result<f64> {
    spec.validate()?;
    check_geometry(radius, r)?;
    let (p0, a) = (spec.phi0, spec.amplitude);
    let (r2, q2) = (radius * radius, r * r);
    match spec.n {
        1 => {
            let sin = theta.sin();
            Ok(p0 + a - a * (radius + r).powi(2) * (1.0 - sin) / (r2 - 2.0 * radius * r * sin + q2))
        }
        2 => {
            // Algebraically equal to the 1/r² form but free of cancellation.
            let s2 = (2.0 * theta).sin();
            Ok(p0 - a + a * (1.0 + s2) * (r2 - q2).powi(2) / (r2 * r2 + q2 * q2 - 2.0 * r2 * q2 * s2))
        }
        n => Err(Error::domain(format!("steady approximate flux needs n in {{1, 2}}, got {n}"))),
    }
}

/// Closed-form `∂φ̂_1/∂θ`:
/// `C_1 r cosθ/d² e^{−d²s} [(R²−r²)/d² + R(R − r sinθ)/(2Dt)]`.
pub fn phi_hat_derivative_check(theta: f64, t: f64, radius: f64, r: f64, d: f64, phi0: f64, a: f64) -> Result<f64> {
    check_time(t, d)?;
    check_geometry(radius, r)?;
    check_amplitude(phi0, a)?;
    let s = 1.0 / (4.0 * d * t);
    let (sin, cos) = theta.sin_cos();
    let den = 2.0 * r - (radius - r) * (-4.0 * radius * r * s).exp_m1();
    let d2 = radius * radius + r * r - 2.0 * radius * r * sin;
    // C_1 e^{-d²s} with the large exponentials cancelled.
    let c1_gauss = 2.0 * a * (radius * radius - r * r) / den * (-2.0 * radius * r * (1.0 - sin) * s).exp();
    let bracket = (radius * radius - r * r) / d2 + radius * (radius - r * sin) / (2.0 * d * t);
    Ok(c1_gauss * r * cos / d2 * bracket)
}

/// Time at which the dipole intensity `Φ̃_D(t)` is minimal:
/// `t = R r / (D ln((R + r)/(R − r)))`.
pub fn t_min_dipole(d: f64, radius: f64, r: f64) -> Result<f64> {
    check_geometry(radius, r)?;
    if !(d > 0.0) {
        return Err(Error::domain(format!("diffusivity D = {d} must be positive")));
    }
    Ok(radius * r / (d * (2.0 * (r / radius).atanh())))
}

/// Qualitative shape of `Φ̃_C(t)` for the dipole.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhiCRegime {
    MonotoneDecreasing,
    TwoExtrema,
    Other,
}

/// Classify `Φ̃_C` by `β = r/R` and `ρ`.
pub fn phi_c_regime(radius: f64, r: f64, rho: f64) -> PhiCRegime {
    let beta = r / radius;
    if beta >= 0.25 {
        PhiCRegime::MonotoneDecreasing
    } else if 8.0 * beta / (16.0 * beta * beta + 1.0) < rho && rho <= 1.0 {
        PhiCRegime::TwoExtrema
    } else {
        PhiCRegime::Other
    }
}

/// Which closed form an [`IntensitySchedule`] evaluates.
#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleKind {
    /// Outputs `[Φ̃_C, Φ̃_D]`.
    Dipole,
    /// Outputs `[Φ̃_C, Φ̃_D, Φ̃_D]`.
    Tripole,
    /// Linear-system intensities for an arbitrary layout, centre first.
    General { spec: FluxSpec, layout: DiracLayout },
    /// Time-independent intensities.
    Constant(Vec<f64>),
}

/// Time-dependent intensities, one per layout point (centre first),
/// clamped to their value at `truncation` for earlier times.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensitySchedule {
    kind: ScheduleKind,
    radius: f64,
    r: f64,
    diffusivity: f64,
    phi0: f64,
    amplitude: f64,
    truncation: f64,
}

impl IntensitySchedule {
    /// Schedule matching `spec` for `layout`. Uses the closed forms for
    /// symmetric `n = 1, 2` layouts and the linear system otherwise. Fails
    /// with [`Error::IntensityOverflow`] if the clamped value at `truncation`
    /// is not representable.
    pub fn multi(spec: &FluxSpec, layout: &DiracLayout, diffusivity: f64, truncation: f64) -> Result<Self> {
        spec.validate()?;
        if !(truncation > 0.0) {
            return Err(Error::domain(format!("truncation time {truncation} must be positive")));
        }
        let symmetric = dirac_layout(spec, layout.center, layout.radius, layout.r)
            .map(|l| l == *layout)
            .unwrap_or(false);
        let kind = match spec.n {
            1 if symmetric => ScheduleKind::Dipole,
            2 if symmetric => ScheduleKind::Tripole,
            _ => ScheduleKind::General { spec: *spec, layout: layout.clone() },
        };
        let schedule = IntensitySchedule {
            kind,
            radius: layout.radius,
            r: layout.r,
            diffusivity,
            phi0: spec.phi0,
            amplitude: spec.amplitude,
            truncation,
        };
        schedule.eval(truncation)?;
        Ok(schedule)
    }

    pub fn constant(values: Vec<f64>) -> Self {
        IntensitySchedule {
            kind: ScheduleKind::Constant(values),
            radius: 1.0,
            r: 0.0,
            diffusivity: 1.0,
            phi0: 1.0,
            amplitude: 0.0,
            truncation: f64::MIN_POSITIVE,
        }
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    /// Number of intensities produced per evaluation.
    pub fn len(&self) -> usize {
        match &self.kind {
            ScheduleKind::Dipole => 2,
            ScheduleKind::Tripole => 3,
            ScheduleKind::General { layout, .. } => layout.len(),
            ScheduleKind::Constant(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, ScheduleKind::Constant(_))
    }

    /// Write the intensities at time `t` into `out`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if out.len() != self.len() {
            return Err(Error::domain("output buffer length differs from schedule length"));
        }
        let te = t.max(self.truncation);
        let (r_big, r, d, p0, a) = (self.radius, self.r, self.diffusivity, self.phi0, self.amplitude);
        match &self.kind {
            ScheduleKind::Dipole => {
                let (pd, pc) = intensity_dipole(te, r_big, r, d, p0, a)?;
                out.copy_from_slice(&[pc, pd]);
            }
            ScheduleKind::Tripole => {
                let (pd, pc) = intensity_tripole(te, r_big, r, d, p0, a)?;
                out.copy_from_slice(&[pc, pd, pd]);
            }
            ScheduleKind::General { spec, layout } => {
                out.copy_from_slice(&intensity_general(spec, layout, te, d)?);
            }
            ScheduleKind::Constant(v) => out.copy_from_slice(v),
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }
}
