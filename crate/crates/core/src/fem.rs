//! Linear (P1) finite elements on triangles: assembly, loads, backward Euler
//! stepping with a Jacobi-preconditioned conjugate gradient solver, and
//! flux recovery on the cell boundary.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::geometry::{boundary_arcs, BoundaryArc, EdgeMarker, Locator, Mesh, Region};
use crate::{Error, Result, Vec2};

/// Default relative residual tolerance of [`solve_spd`].
pub const DEFAULT_REL_TOL: f64 = 1e-10;

/// Square sparse matrix in compressed row layout with sorted columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Zero matrix with the node-adjacency pattern of `mesh` (diagonal included).
    pub fn pattern(mesh: &Mesh) -> Self {
        let n = mesh.node_count();
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for t in mesh.triangles() {
            for &a in t {
                for &b in t {
                    if a != b {
                        rows[a].push(b);
                    }
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        let values = vec![0.0; col_idx.len()];
        SparseMatrix { n, row_ptr, col_idx, values }
    }

    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::domain(format!("entry ({i}, {j}) outside a {n}x{n} matrix")));
            }
            rows[i].push((j, v));
        }
        let mut row_ptr = vec![0];
        let (mut col_idx, mut values) = (Vec::new(), Vec::new());
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            for (j, v) in r {
                if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == j {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseMatrix { n, row_ptr, col_idx, values })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi].binary_search(&j).ok().map(|k| lo + k)
    }

    /// Entry `(i, j)`, zero outside the pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |k| self.values[k])
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.position(i, j).expect("entry inside the assembly pattern");
        self.values[k] += v;
    }

    /// `y = A x`.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            *yi = self.col_idx[lo..hi]
                .iter()
                .zip(&self.values[lo..hi])
                .map(|(&j, &a)| a * x[j])
                .sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `xᵀ A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.values[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum())
            .collect()
    }

    /// Largest entrywise `|A - Aᵀ|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                worst = worst.max((self.values[k] - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `a·self + b·other` for matrices sharing one pattern.
    pub fn linear_combination(&self, a: f64, other: &SparseMatrix, b: f64) -> Result<Self> {
        if self.row_ptr != other.row_ptr || self.col_idx != other.col_idx {
            return Err(Error::domain("matrices have different sparsity patterns"));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(SparseMatrix { values, ..self.clone() })
    }

    pub fn scaled(&self, a: f64) -> Self {
        SparseMatrix {
            values: self.values.iter().map(|v| a * v).collect(),
            ..self.clone()
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Consistent P1 mass matrix.
pub fn assemble_mass(mesh: &Mesh) -> SparseMatrix {
    let mut m = SparseMatrix::pattern(mesh);
    for (ti, t) in mesh.triangles().iter().enumerate() {
        let area = mesh.signed_area(ti);
        for (a, &i) in t.iter().enumerate() {
            for (b, &j) in t.iter().enumerate() {
                let w = if a == b { 2.0 } else { 1.0 };
                m.add(i, j, area * w / 12.0);
            }
        }
    }
    m
}

/// P1 stiffness matrix of `-div(D grad u)`.
pub fn assemble_stiffness(mesh: &Mesh, diffusivity: f64) -> Result<SparseMatrix> {
    if !(diffusivity > 0.0 && diffusivity.is_finite()) {
        return Err(Error::domain(format!("diffusivity D = {diffusivity} must be positive")));
    }
    let mut k = SparseMatrix::pattern(mesh);
    for (ti, t) in mesh.triangles().iter().enumerate() {
        let (area, g) = mesh.basis_gradients(ti);
        for a in 0..3 {
            for b in 0..3 {
                k.add(t[a], t[b], diffusivity * area * g[a].dot(&g[b]));
            }
        }
    }
    Ok(k)
}

/// Load vector of `∫ g(θ) ψ_j dΓ` over edges carrying `marker`, using the
/// two-point trapezoid rule on every edge. `θ` is the node angle about the
/// cell centre.
pub fn assemble_boundary_load(
    mesh: &Mesh,
    marker: EdgeMarker,
    g: impl Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    let edges = mesh.marked_edges(marker);
    if edges.is_empty() {
        return Err(Error::domain(format!("no edges carry marker {}", marker.name())));
    }
    let cell = mesh
        .cell()
        .ok_or_else(|| Error::domain("mesh has no cell to measure angles from"))?;
    let mut b = vec![0.0; mesh.node_count()];
    for (i, j) in edges {
        let (pi, pj) = (mesh.nodes()[i], mesh.nodes()[j]);
        let half = 0.5 * (pi - pj).norm();
        b[i] += half * g(cell.angle_of(&pi));
        b[j] += half * g(cell.angle_of(&pj));
    }
    Ok(b)
}

/// Gauss–Legendre points on boundary edges with outward normals, used for
/// loads that depend on position and normal.
#[derive(Clone, Debug)]
pub struct EdgeQuadrature {
    pub points: Vec<EdgePoint>,
    n_nodes: usize,
}

/// One quadrature point of [`EdgeQuadrature`].
#[derive(Clone, Copy, Debug)]
pub struct EdgePoint {
    pub x: Vec2,
    /// Unit normal pointing out of the mesh.
    pub normal: Vec2,
    /// Quadrature weight including the edge length.
    pub weight: f64,
    pub nodes: [usize; 2],
    /// Values of the two endpoint basis functions at `x`.
    pub shape: [f64; 2],
}

impl EdgeQuadrature {
    /// Three-point Gauss rule on every boundary edge with `marker`.
    pub fn new(mesh: &Mesh, marker: EdgeMarker) -> Result<Self> {
        const XI: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
        const W: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let edge_tris = mesh.edge_triangles();
        let mut points = Vec::new();
        for (a, b) in mesh.marked_edges(marker) {
            let tris = &edge_tris[&(a, b)];
            if tris.len() != 1 {
                return Err(Error::domain(format!("edge ({a}, {b}) is not a boundary edge")));
            }
            let t = mesh.triangles()[tris[0]];
            let opposite = *t.iter().find(|&&v| v != a && v != b).expect("third vertex");
            let (pa, pb) = (mesh.nodes()[a], mesh.nodes()[b]);
            let len = (pb - pa).norm();
            let mut normal = Vec2::new(pb.y - pa.y, pa.x - pb.x) / len;
            if normal.dot(&(mesh.nodes()[opposite] - pa)) > 0.0 {
                normal = -normal;
            }
            for q in 0..3 {
                let s = 0.5 * (1.0 + XI[q]);
                points.push(EdgePoint {
                    x: pa + s * (pb - pa),
                    normal,
                    weight: 0.5 * W[q] * len,
                    nodes: [a, b],
                    shape: [1.0 - s, s],
                });
            }
        }
        if points.is_empty() {
            return Err(Error::domain(format!("no edges carry marker {}", marker.name())));
        }
        Ok(EdgeQuadrature { points, n_nodes: mesh.node_count() })
    }

    /// Load vector `∫ f ψ_j dΓ` from values of `f` at the quadrature points.
    pub fn assemble(&self, values: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.n_nodes];
        for (p, &v) in self.points.iter().zip(values) {
            for k in 0..2 {
                b[p.nodes[k]] += p.weight * p.shape[k] * v;
            }
        }
        b
    }
}

/// Barycentric weights of a fixed set of Dirac points.
#[derive(Clone, Debug)]
pub struct PointLoad {
    weights: Vec<([usize; 3], [f64; 3])>,
    n_nodes: usize,
}

impl PointLoad {
    pub fn new(mesh: &Mesh, points: &[Vec2]) -> Result<Self> {
        let locator = Locator::new(mesh);
        let weights = points
            .iter()
            .map(|p| {
                locator
                    .locate(mesh, p)
                    .map(|(ti, lam)| (mesh.triangles()[ti], lam))
                    .ok_or_else(|| Error::domain(format!("point {p:?} lies outside the mesh")))
            })
            .collect::<Result<_>>()?;
        Ok(PointLoad { weights, n_nodes: mesh.node_count() })
    }

    /// Load vector for the given intensities (same order as the points).
    pub fn assemble_into(&self, intensities: &[f64], b: &mut [f64]) {
        b.iter_mut().for_each(|v| *v = 0.0);
        for ((nodes, lam), &phi) in self.weights.iter().zip(intensities) {
            for k in 0..3 {
                b[nodes[k]] += lam[k] * phi;
            }
        }
    }

    pub fn assemble(&self, intensities: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.n_nodes];
        self.assemble_into(intensities, &mut b);
        b
    }
}

/// Dirac loads distributed to enclosing triangle vertices by barycentric
/// weights, so that `1ᵀb = Σ intensities`.
pub fn assemble_point_load(mesh: &Mesh, points: &[Vec2], intensities: &[f64]) -> Result<Vec<f64>> {
    if points.len() != intensities.len() {
        return Err(Error::domain("points and intensities differ in length"));
    }
    Ok(PointLoad::new(mesh, points)?.assemble(intensities))
}

/// Convergence record of one conjugate gradient solve.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final `‖Ax − b‖ / ‖b‖`.
    pub relative_residual: f64,
}

/// Solve `A x = b` for SPD `A` from the zero initial guess.
pub fn solve_spd(a: &SparseMatrix, b: &[f64], rel_tol: f64) -> Result<Vec<f64>> {
    let mut x = vec![0.0; a.dim()];
    solve_spd_from(a, b, &mut x, rel_tol)?;
    Ok(x)
}

/// Jacobi-preconditioned conjugate gradients starting from `x`. Stops when
/// `‖Ax − b‖ ≤ rel_tol·‖b‖`; fails after `10·n` iterations.
pub fn solve_spd_from(a: &SparseMatrix, b: &[f64], x: &mut [f64], rel_tol: f64) -> Result<SolveStats> {
    let n = a.dim();
    if b.len() != n || x.len() != n {
        return Err(Error::domain("dimension mismatch in solve_spd"));
    }
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::domain(format!("rel_tol = {rel_tol} must lie in (0, 1)")));
    }
    let b_norm = dot(b, b).sqrt();
    if !b_norm.is_finite() {
        return Err(Error::Numerical("non-finite right-hand side".into()));
    }
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats::default());
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = a.mul_vec(x);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, d)| ri * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let target = rel_tol * b_norm;
    let cap = 10 * n.max(1);
    let mut res = dot(&r, &r).sqrt();
    let mut it = 0;
    while res > target {
        if it >= cap {
            return Err(Error::NoConvergence { iterations: it, residual: res / b_norm });
        }
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Numerical(format!(
                "matrix is not positive definite (pᵀAp = {pap:e})"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = dot(&r, &r).sqrt();
        it += 1;
    }
    Ok(SolveStats { iterations: it, relative_residual: res / b_norm })
}

/// Nodal values on a mesh at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub mesh_id: u64,
    pub time: f64,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(mesh: &Mesh, time: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.node_count() {
            return Err(Error::domain(format!(
                "field has {} values but the mesh has {} nodes",
                values.len(),
                mesh.node_count()
            )));
        }
        Ok(ScalarField { mesh_id: mesh.id(), time, values })
    }

    pub fn zeros(mesh: &Mesh, time: f64) -> Self {
        ScalarField { mesh_id: mesh.id(), time, values: vec![0.0; mesh.node_count()] }
    }

    /// Check that the field belongs to `mesh`.
    pub fn ensure_on(&self, mesh: &Mesh) -> Result<()> {
        if self.mesh_id != mesh.id() || self.values.len() != mesh.node_count() {
            return Err(Error::domain("field does not belong to this mesh"));
        }
        Ok(())
    }
}

/// Cached `M + dt·K` for repeated backward Euler steps.
#[derive(Clone, Debug)]
pub struct Stepper {
    mass: SparseMatrix,
    system: SparseMatrix,
    dt: f64,
    rel_tol: f64,
    rhs: Vec<f64>,
}

impl Stepper {
    pub fn new(mass: &SparseMatrix, stiffness: &SparseMatrix, dt: f64, rel_tol: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::domain(format!("dt = {dt} must be positive")));
        }
        let system = mass.linear_combination(1.0, stiffness, dt)?;
        Ok(Stepper {
            mass: mass.clone(),
            system,
            dt,
            rel_tol,
            rhs: vec![0.0; mass.dim()],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advance `u` in place: `(M + dt K) u_new = M u + dt·load`.
    pub fn step(&mut self, u: &mut [f64], load: &[f64]) -> Result<SolveStats> {
        if u.len() != self.system.dim() || load.len() != self.system.dim() {
            return Err(Error::domain("dimension mismatch in backward Euler step"));
        }
        self.mass.mul_vec_into(u, &mut self.rhs);
        for (r, l) in self.rhs.iter_mut().zip(load) {
            *r += self.dt * l;
        }
        solve_spd_from(&self.system, &self.rhs, u, self.rel_tol)
    }
}

/// One backward Euler step `(M + dt K) u = M u_prev + dt·load`.
pub fn backward_euler_step(
    mass: &SparseMatrix,
    stiffness: &SparseMatrix,
    u_prev: &ScalarField,
    dt: f64,
    load: &[f64],
) -> Result<ScalarField> {
    if u_prev.values.len() != mass.dim() {
        return Err(Error::domain("field and matrices differ in dimension"));
    }
    let mut stepper = Stepper::new(mass, stiffness, dt, DEFAULT_REL_TOL)?;
    let mut u = u_prev.values.clone();
    stepper.step(&mut u, load)?;
    Ok(ScalarField { mesh_id: u_prev.mesh_id, time: u_prev.time + dt, values: u })
}

/// Flux density samples over the cell boundary at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct FluxProfile {
    pub time: f64,
    /// `(θ, flux)` pairs with strictly increasing `θ` in `[0, 2π)`.
    pub samples: Vec<(f64, f64)>,
}

impl FluxProfile {
    /// Zero flux at the midpoints of `arcs`.
    pub fn zero_on(arcs: &[BoundaryArc], time: f64) -> Self {
        FluxProfile { time, samples: arcs.iter().map(|a| (a.theta_mid, 0.0)).collect() }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.1)
    }
}

/// Recovers `D ∇u · n` on cell boundary arcs from the extracellular triangle
/// adjacent to each arc, with `n` pointing toward the cell centre.
#[derive(Clone, Debug)]
pub struct FluxSampler {
    arcs: Vec<BoundaryArc>,
    triangles: Vec<usize>,
    normals: Vec<Vec2>,
    midpoints: Vec<Vec2>,
    mesh_id: u64,
}

impl FluxSampler {
    pub fn new(mesh: &Mesh, arcs: Vec<BoundaryArc>) -> Result<Self> {
        let cell = *mesh
            .cell()
            .ok_or_else(|| Error::domain("mesh has no cell"))?;
        let edge_tris = mesh.edge_triangles();
        let mut triangles = Vec::with_capacity(arcs.len());
        let mut normals = Vec::with_capacity(arcs.len());
        let mut midpoints = Vec::with_capacity(arcs.len());
        for arc in &arcs {
            let (a, b) = arc.edge;
            let key = if a < b { (a, b) } else { (b, a) };
            let tri = edge_tris
                .get(&key)
                .and_then(|ts| {
                    ts.iter()
                        .copied()
                        .find(|&t| mesh.regions()[t] == Region::Extracellular)
                })
                .ok_or_else(|| {
                    Error::internal(format!("arc ({a}, {b}) has no adjacent extracellular triangle"))
                })?;
            let (pa, pb) = (mesh.nodes()[a], mesh.nodes()[b]);
            let mid = 0.5 * (pa + pb);
            let mut n = Vec2::new(pb.y - pa.y, pa.x - pb.x).normalize();
            if n.dot(&(cell.center - mid)) < 0.0 {
                n = -n;
            }
            triangles.push(tri);
            normals.push(n);
            midpoints.push(mid);
        }
        Ok(FluxSampler { arcs, triangles, normals, midpoints, mesh_id: mesh.id() })
    }

    /// Sampler for all `CellBoundary` arcs of `mesh`.
    pub fn for_cell(mesh: &Mesh) -> Result<Self> {
        FluxSampler::new(mesh, boundary_arcs(mesh, EdgeMarker::CellBoundary)?)
    }

    pub fn arcs(&self) -> &[BoundaryArc] {
        &self.arcs
    }

    /// Unit normals toward the cell centre, one per arc.
    pub fn normals(&self) -> &[Vec2] {
        &self.normals
    }

    pub fn midpoints(&self) -> &[Vec2] {
        &self.midpoints
    }

    /// Elementwise P1 gradients of `values` on the arc triangles.
    pub fn gradients(&self, mesh: &Mesh, values: &[f64]) -> Vec<Vec2> {
        self.triangles
            .iter()
            .map(|&ti| {
                let (_, g) = mesh.basis_gradients(ti);
                let t = mesh.triangles()[ti];
                (0..3).map(|k| values[t[k]] * g[k]).sum()
            })
            .collect()
    }

    pub fn sample(&self, mesh: &Mesh, values: &[f64], diffusivity: f64, time: f64) -> Result<FluxProfile> {
        if mesh.id() != self.mesh_id || values.len() != mesh.node_count() {
            return Err(Error::domain("field does not live on the sampler's mesh"));
        }
        let samples = self
            .gradients(mesh, values)
            .iter()
            .zip(&self.normals)
            .zip(&self.arcs)
            .map(|((g, n), arc)| (arc.theta_mid, diffusivity * g.dot(n)))
            .collect();
        Ok(FluxProfile { time, samples })
    }
}

/// Boundary flux `D ∇u · n` on the given cell arcs.
pub fn boundary_flux_postprocess(
    mesh: &Mesh,
    field: &ScalarField,
    diffusivity: f64,
    arcs: &[BoundaryArc],
) -> Result<FluxProfile> {
    field.ensure_on(mesh)?;
    FluxSampler::new(mesh, arcs.to_vec())?.sample(mesh, &field.values, diffusivity, field.time)
}

/// Write a snapshot as `{run_id}_t{time:.4}.csv` with columns
/// `node_index,x,y,value`.
pub fn write_snapshot_csv(dir: &Path, run_id: &str, mesh: &Mesh, field: &ScalarField) -> Result<PathBuf> {
    field.ensure_on(mesh)?;
    let path = dir.join(format!("{run_id}_t{:.4}.csv", field.time));
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(out, "node_index,x,y,value")?;
    for (i, (p, v)) in mesh.nodes().iter().zip(&field.values).enumerate() {
        writeln!(out, "{i},{},{},{}", p.x, p.y, v)?;
    }
    out.flush()?;
    Ok(path)
}

/// Read the `value` column of a snapshot written by [`write_snapshot_csv`].
pub fn read_snapshot_values(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("node_index,x,y,value") {
        return Err(Error::Parse(format!("{} is not a snapshot file", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.rsplit(',')
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Parse(format!("bad snapshot line `{l}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_full_mesh, extract_annulus, Circle};
    use proptest::prelude::*;

    fn right_triangle() -> Mesh {
        Mesh::simple(
            vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    fn unit_square() -> Mesh {
        Mesh::simple(
            vec![
                Vec2::new(0.0, 0.0),
                Vec2::new(1.0, 0.0),
                Vec2::new(1.0, 1.0),
                Vec2::new(0.0, 1.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    fn cell_mesh(n: usize, h: f64) -> Mesh {
        build_full_mesh(5.0, Circle::new(Vec2::zeros(), 1.0).unwrap(), n, h).unwrap()
    }

    #[test]
    fn mass_of_reference_triangle() {
        let m = assemble_mass(&right_triangle());
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 2.0 } else { 1.0 } / 24.0;
                assert!((m.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mass_total_is_area() {
        let ones = vec![1.0; 4];
        assert!((assemble_mass(&unit_square()).quadratic_form(&ones) - 1.0).abs() < 1e-15);
        let mesh = cell_mesh(64, 0.3);
        let m = assemble_mass(&mesh);
        let total = m.quadratic_form(&vec![1.0; mesh.node_count()]);
        assert!((total - mesh.total_area()).abs() / total < 1e-12);
        assert_eq!(m.max_asymmetry(), 0.0);
    }

    #[test]
    fn stiffness_of_reference_triangle() {
        let k = assemble_stiffness(&right_triangle(), 1.0).unwrap();
        let expect = [[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((k.get(i, j) - 0.5 * expect[i][j]).abs() < 1e-15);
            }
        }
        assert!(assemble_stiffness(&right_triangle(), 0.0).is_err());
        assert!(assemble_stiffness(&right_triangle(), -1.0).is_err());
    }

    #[test]
    fn stiffness_kernel_symmetry_and_linearity() {
        let mesh = cell_mesh(64, 0.3);
        let k1 = assemble_stiffness(&mesh, 1.0).unwrap();
        let k2 = assemble_stiffness(&mesh, 2.0).unwrap();
        let scale = k1.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for s in k1.row_sums() {
            assert!(s.abs() <= 1e-12 * scale);
        }
        assert!(k1.max_asymmetry() <= 1e-14 * scale);
        for (a, b) in k1.values().iter().zip(k2.values()) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn boundary_load_integrates_flux() {
        let mesh = cell_mesh(128, 0.2);
        let b = assemble_boundary_load(&mesh, EdgeMarker::CellBoundary, |_| 1.0).unwrap();
        let perimeter = 2.0 * 128.0 * (std::f64::consts::PI / 128.0).sin();
        assert!((b.iter().sum::<f64>() - perimeter).abs() < 1e-12);
        let b = assemble_boundary_load(&mesh, EdgeMarker::CellBoundary, |t| 1.0 + t.sin()).unwrap();
        assert!((b.iter().sum::<f64>() - std::f64::consts::TAU).abs() < 1e-3);
        let sin_total = |n: usize| {
            let m = cell_mesh(n, 0.3);
            assemble_boundary_load(&m, EdgeMarker::CellBoundary, f64::sin)
                .unwrap()
                .iter()
                .sum::<f64>()
                .abs()
        };
        assert!(sin_total(64) < 1e-12 && sin_total(32) < 1e-12);
        let plain = right_triangle();
        assert!(assemble_boundary_load(&plain, EdgeMarker::CellBoundary, |_| 1.0).is_err());
    }

    #[test]
    fn point_loads() {
        let mesh = unit_square();
        let b = assemble_point_load(&mesh, &[Vec2::new(1.0, 1.0)], &[2.5]).unwrap();
        assert_eq!(b, vec![0.0, 0.0, 2.5, 0.0]);
        let c = Vec2::new(2.0 / 3.0, 1.0 / 3.0);
        let b = assemble_point_load(&mesh, &[c], &[3.0]).unwrap();
        for (i, v) in [1.0, 1.0, 1.0, 0.0].iter().enumerate() {
            assert!((b[i] - v).abs() < 1e-14);
        }
        let b = assemble_point_load(&mesh, &[Vec2::new(0.2, 0.7), Vec2::new(0.9, 0.1)], &[2.0, -1.0]).unwrap();
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(assemble_point_load(&mesh, &[Vec2::new(1.5, 0.5)], &[1.0]).is_err());
        // On the shared diagonal both triangles give the same weights.
        let b = assemble_point_load(&mesh, &[Vec2::new(0.25, 0.25)], &[4.0]).unwrap();
        assert!((b[0] - 3.0).abs() < 1e-14 && (b[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cg_small_systems() {
        let i3 = SparseMatrix::identity(3);
        assert_eq!(solve_spd(&i3, &[1.0, -2.0, 3.0], 1e-12).unwrap(), vec![1.0, -2.0, 3.0]);
        let a = SparseMatrix::from_triplets(2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)]).unwrap();
        let x = solve_spd(&a, &[1.0, 1.0], 1e-12).unwrap();
        assert!((x[0] - 1.0 / 3.0).abs() < 1e-12 && (x[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(solve_spd(&a, &[0.0, 0.0], 1e-10).unwrap(), vec![0.0, 0.0]);
        assert!(solve_spd(&a, &[1.0, 1.0], 0.0).is_err());
        let indefinite = SparseMatrix::from_triplets(2, &[(0, 0, 1.0), (1, 1, -1.0), (0, 1, 2.0), (1, 0, 2.0)]).unwrap();
        assert!(solve_spd(&indefinite, &[1.0, 1.0], 1e-10).is_err());
    }

    #[test]
    fn euler_step_basics() {
        let mesh = cell_mesh(32, 0.5);
        let m = assemble_mass(&mesh);
        let k = assemble_stiffness(&mesh, 1.0).unwrap();
        let n = mesh.node_count();
        let u0 = ScalarField::new(&mesh, 0.0, vec![3.0; n]).unwrap();
        let u1 = backward_euler_step(&m, &k, &u0, 0.1, &vec![0.0; n]).unwrap();
        for v in &u1.values {
            assert!((v - 3.0).abs() < 1e-8);
        }
        let load = assemble_boundary_load(&mesh, EdgeMarker::CellBoundary, |t| 1.0 + t.cos()).unwrap();
        let prev: Vec<f64> = mesh.nodes().iter().map(|p| 2.0 + (p.x * 0.3).sin()).collect();
        let prev = ScalarField::new(&mesh, 0.0, prev).unwrap();
        let dt = 0.05;
        let next = backward_euler_step(&m, &k, &prev, dt, &load).unwrap();
        let ones = vec![1.0; n];
        let before = dot(&ones, &m.mul_vec(&prev.values));
        let after = dot(&ones, &m.mul_vec(&next.values));
        let injected = dt * load.iter().sum::<f64>();
        let defect = (after - before - injected).abs() / after;
        assert!(defect <= 1e-10, "mass defect {defect:e}");
        let tiny = backward_euler_step(&m, &k, &prev, 1e-9, &load).unwrap();
        for (a, b) in tiny.values.iter().zip(&prev.values) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(backward_euler_step(&m, &k, &prev, 0.0, &load).is_err());
    }

    #[test]
    fn linear_field_patch_test() {
        // u = x + 2y is stationary for the Neumann data D ∇u·n on the outer wall.
        let mesh = Mesh::simple(
            {
                let mut v = Vec::new();
                for j in 0..5 {
                    for i in 0..5 {
                        v.push(Vec2::new(i as f64 * 0.25, j as f64 * 0.25 + 0.05 * (i % 2) as f64 * (j % 4).min(1) as f64));
                    }
                }
                v
            },
            {
                let mut t = Vec::new();
                for j in 0..4 {
                    for i in 0..4 {
                        let a = j * 5 + i;
                        t.push([a, a + 1, a + 6]);
                        t.push([a, a + 6, a + 5]);
                    }
                }
                t
            },
        )
        .unwrap();
        let d = 0.7;
        let m = assemble_mass(&mesh);
        let k = assemble_stiffness(&mesh, d).unwrap();
        let quad = EdgeQuadrature::new(&mesh, EdgeMarker::OuterWall).unwrap();
        let grad = Vec2::new(1.0, 2.0);
        let g: Vec<f64> = quad.points.iter().map(|p| d * grad.dot(&p.normal)).collect();
        let load = quad.assemble(&g);
        let u: Vec<f64> = mesh.nodes().iter().map(|p| grad.dot(p)).collect();
        let prev = ScalarField::new(&mesh, 0.0, u.clone()).unwrap();
        let next = backward_euler_step(&m, &k, &prev, 0.1, &load).unwrap();
        for (a, b) in next.values.iter().zip(&u) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn flux_postprocessing() {
        let full = cell_mesh(64, 0.3);
        let ann = extract_annulus(&full).unwrap();
        let arcs = boundary_arcs(&ann.mesh, EdgeMarker::CellBoundary).unwrap();
        let n = ann.mesh.node_count();
        let constant = ScalarField::new(&ann.mesh, 1.0, vec![4.0; n]).unwrap();
        let prof = boundary_flux_postprocess(&ann.mesh, &constant, 1.0, &arcs).unwrap();
        assert!(prof.values().all(|v| v.abs() < 1e-12));
        for w in prof.samples.windows(2) {
            assert!(w[1].0 > w[0].0);
        }

        let a = 1.7;
        let linear: Vec<f64> = ann.mesh.nodes().iter().map(|p| a * p.x).collect();
        let field = ScalarField::new(&ann.mesh, 1.0, linear).unwrap();
        let prof = boundary_flux_postprocess(&ann.mesh, &field, 1.0, &arcs).unwrap();
        // The arc whose midpoint sits at θ ≈ 0 has inward normal (-1, 0)
        // up to the half-sector rotation of the chord.
        let (theta, value) = prof.samples[0];
        assert!((value - (-a * theta.cos())).abs() < 1e-12);
        for ((theta, v), arc) in prof.samples.iter().zip(&arcs) {
            assert!((theta - arc.theta_mid).abs() < 1e-15);
            assert!((v + a * theta.cos()).abs() < 1e-12);
        }

        let radial: Vec<f64> = ann.mesh.nodes().iter().map(|p| p.norm()).collect();
        let field = ScalarField::new(&ann.mesh, 0.0, radial).unwrap();
        let prof = boundary_flux_postprocess(&ann.mesh, &field, 1.0, &arcs).unwrap();
        assert!(prof.values().all(|v| (v + 1.0).abs() < 0.05), "{prof:?}");

        // The full mesh resolves arcs to the extracellular side as well.
        let full_arcs = boundary_arcs(&full, EdgeMarker::CellBoundary).unwrap();
        let lin_full: Vec<f64> = full.nodes().iter().map(|p| a * p.x).collect();
        let f = ScalarField::new(&full, 0.0, lin_full).unwrap();
        let prof = boundary_flux_postprocess(&full, &f, 2.0, &full_arcs).unwrap();
        for (theta, v) in &prof.samples {
            assert!((v + 2.0 * a * theta.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mesh = unit_square();
        let dir = tempfile::tempdir().unwrap();
        let field = ScalarField::new(&mesh, 0.4, vec![0.1, 1.0 / 3.0, -2.5e-17, 7.0]).unwrap();
        let path = write_snapshot_csv(dir.path(), "run", &mesh, &field).unwrap();
        assert!(path.ends_with("run_t0.4000.csv"));
        assert_eq!(read_snapshot_values(&path).unwrap(), field.values);
    }

    proptest! {
        #[test]
        fn cg_solves_random_spd(diag in proptest::collection::vec(1.0f64..10.0, 6), off in -0.4f64..0.4,
                                rhs in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let mut trips = Vec::new();
            for i in 0..6 {
                trips.push((i, i, diag[i]));
                if i + 1 < 6 {
                    trips.push((i, i + 1, off));
                    trips.push((i + 1, i, off));
                }
            }
            let a = SparseMatrix::from_triplets(6, &trips).unwrap();
            let x = solve_spd(&a, &rhs, 1e-12).unwrap();
            let r: Vec<f64> = a.mul_vec(&x).iter().zip(&rhs).map(|(p, q)| p - q).collect();
            prop_assert!(dot(&r, &r).sqrt() <= 1e-12 * dot(&rhs, &rhs).sqrt() + 1e-300);
            let again = solve_spd(&a, &rhs, 1e-12).unwrap();
            prop_assert_eq!(x, again);
        }

        #[test]
        fn point_load_sums_to_total(xs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, -3.0f64..3.0), 1..6)) {
            let mesh = unit_square();
            let pts: Vec<Vec2> = xs.iter().map(|p| Vec2::new(p.0, p.1)).collect();
            let phi: Vec<f64> = xs.iter().map(|p| p.2).collect();
            let b = assemble_point_load(&mesh, &pts, &phi).unwrap();
            prop_assert!((b.iter().sum::<f64>() - phi.iter().sum::<f64>()).abs() < 1e-12);
        }
    }
}
