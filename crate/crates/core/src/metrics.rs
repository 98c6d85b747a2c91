//! Norms on the extracellular annulus and derived comparison curves.

use std::io::Write;
use std::path::Path;

use crate::fem::{assemble_mass, assemble_stiffness, FluxProfile, SparseMatrix};
use crate::geometry::{BoundaryArc, Locator, Mesh};
use crate::intensities::FluxSpec;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    L2,
    /// Full Sobolev norm, `‖u‖² + ‖∇u‖²`.
    H1,
}

/// Cached mass and unit-diffusivity stiffness of one mesh.
#[derive(Clone, Debug)]
pub struct NormOperator {
    mass: SparseMatrix,
    stiffness: SparseMatrix,
    mesh_id: u64,
}

impl NormOperator {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        Ok(NormOperator {
            mass: assemble_mass(mesh),
            stiffness: assemble_stiffness(mesh, 1.0)?,
            mesh_id: mesh.id(),
        })
    }

    pub fn mesh_id(&self) -> u64 {
        self.mesh_id
    }

    pub fn norm(&self, values: &[f64], kind: NormKind) -> Result<f64> {
        if values.len() != self.mass.dim() {
            return Err(Error::domain(format!(
                "field of length {} does not match a mesh with {} nodes",
                values.len(),
                self.mass.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("field contains non-finite values"));
        }
        let l2 = self.mass.quadratic_form(values).max(0.0);
        Ok(match kind {
            NormKind::L2 => l2.sqrt(),
            NormKind::H1 => (l2 + self.stiffness.quadratic_form(values).max(0.0)).sqrt(),
        })
    }
}

/// Norm of a nodal field on `mesh`.
pub fn norm(values: &[f64], mesh: &Mesh, kind: NormKind) -> Result<f64> {
    NormOperator::new(mesh)?.norm(values, kind)
}

/// Midpoint-rule `L²(∂Ω_C)` distance between the prescribed flux and a
/// profile sampled at the arc midpoints.
pub fn flux_deviation(spec: &FluxSpec, profile: &FluxProfile, arcs: &[BoundaryArc]) -> Result<f64> {
    if profile.samples.len() != arcs.len() {
        return Err(Error::domain(format!(
            "profile has {} samples for {} arcs",
            profile.samples.len(),
            arcs.len()
        )));
    }
    let sum: f64 = arcs
        .iter()
        .zip(&profile.samples)
        .map(|(arc, &(th, v))| arc.length * (spec.density(th) - v).powi(2))
        .sum();
    Ok(sum.sqrt())
}

/// Cumulative trapezoid of a uniformly sampled series starting at `t = 0`.
pub fn c_star(series: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for (k, v) in series.iter().enumerate() {
        if k > 0 {
            acc += 0.5 * dt * (series[k - 1] + v);
        }
        out.push(acc);
    }
    out
}

/// Cumulative trapezoid over arbitrary increasing sample times.
pub fn c_star_nonuniform(times: &[f64], series: &[f64]) -> Result<Vec<f64>> {
    if times.len() != series.len() {
        return Err(Error::domain("times and series differ in length"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("times must be strictly increasing"));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for k in 0..series.len() {
        if k > 0 {
            acc += 0.5 * (times[k] - times[k - 1]) * (series[k - 1] + series[k]);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Per-time deviations between two runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeviationCurves {
    pub times: Vec<f64>,
    pub l2_dev: Vec<f64>,
    pub h1_dev: Vec<f64>,
    pub flux_dev: Vec<f64>,
    pub c_star: Vec<f64>,
}

impl DeviationCurves {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,l2_dev,h1_dev,flux_dev,c_star")?;
        for k in 0..self.times.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                self.times[k], self.l2_dev[k], self.h1_dev[k], self.flux_dev[k], self.c_star[k]
            )?;
        }
        out.flush()?;
        Ok(())
    }

    /// Values of `l2_dev` at times strictly inside `(lo, hi)`.
    pub fn l2_in_window(&self, lo: f64, hi: f64) -> Vec<(f64, f64)> {
        self.times
            .iter()
            .zip(&self.l2_dev)
            .filter(|(t, _)| **t > lo && **t < hi)
            .map(|(t, v)| (*t, *v))
            .collect()
    }
}

/// `‖a − b‖ / ‖a‖` per time; `None` where `‖a‖ = 0`.
fn relative_series(op: &NormOperator, a: &[Vec<f64>], b: &[Vec<f64>], kind: NormKind) -> Result<Vec<Option<f64>>> {
    if a.len() != b.len() {
        return Err(Error::domain("series differ in length"));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let base = op.norm(x, kind)?;
            if base == 0.0 {
                return Ok(None);
            }
            let diff: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            Ok(Some(op.norm(&diff, kind)? / base))
        })
        .collect()
}

/// `H(t) = ‖u_homo − u_inhomo‖ / ‖u_homo‖` on a shared mesh.
pub fn homogeneity_indicator(
    op: &NormOperator,
    homogeneous: &[Vec<f64>],
    inhomogeneous: &[Vec<f64>],
    kind: NormKind,
) -> Result<Vec<Option<f64>>> {
    relative_series(op, homogeneous, inhomogeneous, kind)
}

/// Relative error of `other` (nodal fields on `other_mesh`) against
/// `reference` (on `reference_mesh`); `other` is evaluated at the reference
/// nodes by barycentric interpolation.
pub fn relative_error(
    reference_mesh: &Mesh,
    reference: &[Vec<f64>],
    other_mesh: &Mesh,
    other: &[Vec<f64>],
    kind: NormKind,
) -> Result<Vec<Option<f64>>> {
    let op = NormOperator::new(reference_mesh)?;
    let transferred: Vec<Vec<f64>> = if reference_mesh.id() == other_mesh.id() {
        other.to_vec()
    } else {
        let loc = Locator::new(other_mesh);
        let sites: Vec<(usize, [f64; 3])> = reference_mesh
            .nodes()
            .iter()
            .map(|p| {
                loc.locate(other_mesh, p)
                    .ok_or_else(|| Error::domain(format!("reference node {p:?} lies outside the other mesh")))
            })
            .collect::<Result<_>>()?;
        other
            .iter()
            .map(|vals| {
                sites
                    .iter()
                    .map(|(ti, lam)| {
                        let t = other_mesh.triangles()[*ti];
                        (0..3).map(|k| lam[k] * vals[t[k]]).sum()
                    })
                    .collect()
            })
            .collect()
    };
    relative_series(&op, reference, &transferred, kind)
}
