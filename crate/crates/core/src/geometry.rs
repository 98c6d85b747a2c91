//! Conforming triangulations of the square domain `[-L, L]^2` containing a
//! circular cell whose boundary is realised as a polygon of mesh edges.
//!
//! The full mesh and the annulus mesh (cell removed) come from a single
//! triangulation, so nodal fields can be compared exactly on shared nodes.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use crate::{Error, Result, Vec2};

static NEXT_MESH_ID: AtomicU64 = AtomicU64::new(1);

/// Growth factor of the spacing between successive graded rings.
const RING_GROWTH: f64 = 1.3;

/// Circle representing the cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Circle {
    pub center: Vec2,
    pub radius: f64,
}

impl Circle {
    pub fn new(center: Vec2, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::domain(format!("invalid circle: center {center:?}, radius {radius}")));
        }
        Ok(Circle { center, radius })
    }

    /// Point on the circle at polar angle `theta`.
    pub fn point_at(&self, theta: f64) -> Vec2 {
        self.center + self.radius * Vec2::new(theta.cos(), theta.sin())
    }

    /// Polar angle of `p` about the centre, in `[0, 2π)`.
    pub fn angle_of(&self, p: &Vec2) -> f64 {
        normalize_angle((p.y - self.center.y).atan2(p.x - self.center.x))
    }
}

/// Map an angle into `[0, 2π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU { 0.0 } else { t }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeMarker {
    OuterWall,
    CellBoundary,
}

impl EdgeMarker {
    pub fn name(self) -> &'static str {
        match self {
            EdgeMarker::OuterWall => "OuterWall",
            EdgeMarker::CellBoundary => "CellBoundary",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "OuterWall" => Some(EdgeMarker::OuterWall),
            "CellBoundary" => Some(EdgeMarker::CellBoundary),
            _ => None,
        }
    }
}

/// Which side of the cell polygon a triangle lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Extracellular,
    Cell,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b { (a, b) } else { (b, a) }
}

/// Immutable triangle mesh.
///
/// Every triangle is counter-clockwise with positive area, the mesh is edge
/// conforming, and every boundary edge carries a marker. Interior edges may
/// also carry the `CellBoundary` marker: in the full mesh the cell polygon is
/// a virtual boundary made of interior edges.
#[derive(Clone, Debug)]
pub struct Mesh {
    id: u64,
    nodes: Vec<Vec2>,
    triangles: Vec<[usize; 3]>,
    regions: Vec<Region>,
    edge_markers: BTreeMap<(usize, usize), EdgeMarker>,
    cell_polygon: Vec<usize>,
    cell: Option<Circle>,
}

impl Mesh {
    /// Assemble and validate a mesh from its parts.
    pub fn from_parts(
        nodes: Vec<Vec2>,
        triangles: Vec<[usize; 3]>,
        regions: Vec<Region>,
        edge_markers: BTreeMap<(usize, usize), EdgeMarker>,
        cell_polygon: Vec<usize>,
        cell: Option<Circle>,
    ) -> Result<Self> {
        let edge_markers = edge_markers
            .into_iter()
            .map(|((a, b), m)| (edge_key(a, b), m))
            .collect();
        let mesh = Mesh {
            id: NEXT_MESH_ID.fetch_add(1, Ordering::Relaxed),
            nodes,
            triangles,
            regions,
            edge_markers,
            cell_polygon,
            cell,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Mesh without a cell whose boundary edges are all marked `OuterWall`.
    pub fn simple(nodes: Vec<Vec2>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for t in &triangles {
            for k in 0..3 {
                *counts.entry(edge_key(t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        let markers = counts
            .into_iter()
            .filter(|&(_, c)| c == 1)
            .map(|(e, _)| (e, EdgeMarker::OuterWall))
            .collect();
        let regions = vec![Region::Extracellular; triangles.len()];
        Mesh::from_parts(nodes, triangles, regions, markers, Vec::new(), None)
    }

    fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if self.regions.len() != self.triangles.len() {
            return Err(Error::internal("region list length differs from triangle count"));
        }
        if self.nodes.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::internal("non-finite node coordinate"));
        }
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (ti, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) || t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::internal(format!("triangle {ti} has invalid vertices {t:?}")));
            }
            let area = self.signed_area(ti);
            if !(area > 0.0) {
                return Err(Error::internal(format!(
                    "triangle {ti} {t:?} has non-positive signed area {area:e}"
                )));
            }
            for k in 0..3 {
                *counts.entry(edge_key(t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (e, &c) in &counts {
            if c > 2 {
                return Err(Error::internal(format!("edge {e:?} shared by {c} triangles")));
            }
            if c == 1 && !self.edge_markers.contains_key(e) {
                return Err(Error::internal(format!("boundary edge {e:?} has no marker")));
            }
        }
        for (e, m) in &self.edge_markers {
            match (counts.get(e), m) {
                (None, _) => {
                    return Err(Error::internal(format!("marked edge {e:?} is not a mesh edge")));
                }
                (Some(2), EdgeMarker::OuterWall) => {
                    return Err(Error::internal(format!("outer wall edge {e:?} is interior")));
                }
                _ => {}
            }
        }
        self.validate_polygon()
    }

    fn validate_polygon(&self) -> Result<()> {
        let poly = &self.cell_polygon;
        if poly.is_empty() {
            return Ok(());
        }
        let cell = self
            .cell
            .ok_or_else(|| Error::internal("cell polygon given without a circle"))?;
        if poly.len() < 3 {
            return Err(Error::internal("cell polygon has fewer than 3 nodes"));
        }
        let tol = 1e-12 * (1.0 + cell.radius + cell.center.norm());
        for k in 0..poly.len() {
            let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
            if self.edge_markers.get(&edge_key(a, b)) != Some(&EdgeMarker::CellBoundary) {
                return Err(Error::internal(format!(
                    "cell polygon is not a closed edge cycle: ({a}, {b}) is not a cell boundary edge"
                )));
            }
            let dev = ((self.nodes[a] - cell.center).norm() - cell.radius).abs();
            if dev > tol {
                return Err(Error::internal(format!("polygon node {a} is {dev:e} off the circle")));
            }
        }
        let marked = self
            .edge_markers
            .values()
            .filter(|&&m| m == EdgeMarker::CellBoundary)
            .count();
        if marked != poly.len() {
            return Err(Error::internal("cell boundary markers do not form a single cycle"));
        }
        Ok(())
    }

    /// Identity used to check that fields belong to this mesh.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn nodes(&self) -> &[Vec2] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn edge_markers(&self) -> &BTreeMap<(usize, usize), EdgeMarker> {
        &self.edge_markers
    }

    /// Ordered node indices of the cell polygon (counter-clockwise).
    pub fn cell_polygon(&self) -> &[usize] {
        &self.cell_polygon
    }

    pub fn cell(&self) -> Option<&Circle> {
        self.cell.as_ref()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn signed_area(&self, tri: usize) -> f64 {
        let [a, b, c] = self.triangles[tri];
        let (p, q, r) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((q - p).perp(&(r - p)))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    /// Area and gradients of the three barycentric basis functions.
    pub fn basis_gradients(&self, tri: usize) -> (f64, [Vec2; 3]) {
        let [a, b, c] = self.triangles[tri];
        let p = [self.nodes[a], self.nodes[b], self.nodes[c]];
        let two_area = (p[1] - p[0]).perp(&(p[2] - p[0]));
        let mut g = [Vec2::zeros(); 3];
        for i in 0..3 {
            let (j, k) = ((i + 1) % 3, (i + 2) % 3);
            g[i] = Vec2::new(p[j].y - p[k].y, p[k].x - p[j].x) / two_area;
        }
        (0.5 * two_area, g)
    }

    /// All distinct edges.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| edge_key(t[k], t[(k + 1) % 3])))
            .collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        edges
            .iter()
            .map(|&(a, b)| (self.nodes[a] - self.nodes[b]).norm())
            .sum::<f64>()
            / edges.len() as f64
    }

    /// Edges carrying `marker`, in key order.
    pub fn marked_edges(&self, marker: EdgeMarker) -> Vec<(usize, usize)> {
        self.edge_markers
            .iter()
            .filter(|&(_, &m)| m == marker)
            .map(|(&e, _)| e)
            .collect()
    }

    /// Triangles adjacent to each edge, keyed by sorted node pair.
    pub fn edge_triangles(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (ti, t) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                map.entry(edge_key(t[k], t[(k + 1) % 3])).or_default().push(ti);
            }
        }
        map
    }

    /// Write the plain-text mesh format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "nodes {} triangles {}", self.nodes.len(), self.triangles.len());
        for p in &self.nodes {
            let _ = writeln!(s, "{:.17e} {:.17e}", p.x, p.y);
        }
        for (t, r) in self.triangles.iter().zip(&self.regions) {
            let marker = match r {
                Region::Extracellular => 0,
                Region::Cell => 1,
            };
            let _ = writeln!(s, "{} {} {} {}", t[0], t[1], t[2], marker);
        }
        for (&(a, b), m) in &self.edge_markers {
            let _ = writeln!(s, "{} {} {}", a, b, m.name());
        }
        s
    }

    /// Parse the plain-text mesh format. The cell circle is recovered from
    /// the `CellBoundary` cycle (centroid and mean radius of its nodes).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty mesh file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "nodes" || h[2] != "triangles" {
            return Err(Error::Parse(format!("bad header line `{header}`")));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Parse(format!("expected an index, found `{s}`")))
        };
        let parse_f64 = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("expected a number, found `{s}`")))
        };
        let (nn, nt) = (parse_usize(h[1])?, parse_usize(h[3])?);
        let mut nodes = Vec::with_capacity(nn);
        for _ in 0..nn {
            let l = lines.next().ok_or_else(|| Error::Parse("truncated node list".into()))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 2 {
                return Err(Error::Parse(format!("bad node line `{l}`")));
            }
            nodes.push(Vec2::new(parse_f64(f[0])?, parse_f64(f[1])?));
        }
        let mut triangles = Vec::with_capacity(nt);
        let mut regions = Vec::with_capacity(nt);
        for _ in 0..nt {
            let l = lines.next().ok_or_else(|| Error::Parse("truncated triangle list".into()))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("bad triangle line `{l}`")));
            }
            triangles.push([parse_usize(f[0])?, parse_usize(f[1])?, parse_usize(f[2])?]);
            regions.push(match f[3] {
                "0" => Region::Extracellular,
                "1" => Region::Cell,
                other => return Err(Error::Parse(format!("bad triangle marker `{other}`"))),
            });
        }
        let mut markers = BTreeMap::new();
        for l in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::Parse(format!("bad edge line `{l}`")));
            }
            let m = EdgeMarker::from_name(f[2])
                .ok_or_else(|| Error::Parse(format!("unknown edge marker `{}`", f[2])))?;
            markers.insert(edge_key(parse_usize(f[0])?, parse_usize(f[1])?), m);
        }
        let cycle_edges: Vec<(usize, usize)> = markers
            .iter()
            .filter(|&(_, &m)| m == EdgeMarker::CellBoundary)
            .map(|(&e, _)| e)
            .collect();
        let (polygon, cell) = if cycle_edges.is_empty() {
            (Vec::new(), None)
        } else {
            let poly = chain_cycle(&cycle_edges)?;
            let center = poly.iter().map(|&i| nodes[i]).sum::<Vec2>() / poly.len() as f64;
            let radius =
                poly.iter().map(|&i| (nodes[i] - center).norm()).sum::<f64>() / poly.len() as f64;
            let poly = orient_ccw(poly, &nodes, &center);
            (poly, Some(Circle::new(center, radius)?))
        };
        Mesh::from_parts(nodes, triangles, regions, markers, polygon, cell)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        Mesh::from_text(&std::fs::read_to_string(path)?)
    }
}

fn chain_cycle(edges: &[(usize, usize)]) -> Result<Vec<usize>> {
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b) in edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    if adj.values().any(|v| v.len() != 2) {
        return Err(Error::internal("cell boundary edges do not form a cycle"));
    }
    let start = *adj.keys().next().expect("non-empty");
    let mut cycle = vec![start];
    let mut prev = start;
    let mut cur = adj[&start][0];
    while cur != start {
        cycle.push(cur);
        let nb = &adj[&cur];
        let next = if nb[0] == prev { nb[1] } else { nb[0] };
        prev = cur;
        cur = next;
        if cycle.len() > edges.len() {
            return Err(Error::internal("cell boundary cycle does not close"));
        }
    }
    if cycle.len() != edges.len() {
        return Err(Error::internal("cell boundary edges form more than one cycle"));
    }
    Ok(cycle)
}

fn orient_ccw(mut poly: Vec<usize>, nodes: &[Vec2], center: &Vec2) -> Vec<usize> {
    let twice_area: f64 = (0..poly.len())
        .map(|k| {
            let a = nodes[poly[k]] - center;
            let b = nodes[poly[(k + 1) % poly.len()]] - center;
            a.perp(&b)
        })
        .sum();
    if twice_area < 0.0 {
        poly.reverse();
    }
    poly
}

/// Default polygon resolution: the smallest multiple of 8, at least 16, with
/// chord length at most `0.57·h` (128 points for `R = 1`, `h = 0.0875`).
///
/// Multiples of 8 put polygon vertices at every multiple of π/4.
pub fn default_circle_points(radius: f64, target_h: f64) -> usize {
    let raw = 1.75 * TAU * radius / target_h;
    let n = (raw / 8.0).ceil() as usize * 8;
    n.max(16)
}

/// Triangulate the square `[-half_width, half_width]^2` so that the cell
/// polygon (inscribed in `cell`, `n_circle_points` vertices starting at
/// angle 0) is a cycle of mesh edges.
///
/// Points come from a staggered near-equilateral lattice of spacing
/// `target_h`, graded rings around the polygon on both sides, and the polygon
/// itself; a constrained Delaunay triangulation connects them.
pub fn build_full_mesh(
    half_width: f64,
    cell: Circle,
    n_circle_points: usize,
    target_h: f64,
) -> Result<Mesh> {
    if n_circle_points < 16 {
        return Err(Error::domain(format!("n_circle_points = {n_circle_points} < 16")));
    }
    if !(target_h > 0.0 && target_h.is_finite()) {
        return Err(Error::domain(format!("target_h = {target_h} must be positive")));
    }
    if !(half_width > 0.0 && half_width.is_finite()) {
        return Err(Error::domain(format!("half_width = {half_width} must be positive")));
    }
    let wall_gap = half_width - cell.center.x.abs().max(cell.center.y.abs()) - cell.radius;
    if !(wall_gap > 0.0) {
        return Err(Error::domain(format!(
            "cell (center {:?}, R = {}) is not strictly inside the square of half-width {half_width}",
            cell.center, cell.radius
        )));
    }
    if target_h > half_width {
        return Err(Error::domain("target_h exceeds the domain half-width"));
    }

    let n = n_circle_points;
    let (c, big_r) = (cell.center, cell.radius);
    let chord = 2.0 * big_r * (PI / n as f64).sin();
    let apothem = big_r * (PI / n as f64).cos();
    let height = 3f64.sqrt() / 2.0;

    // Polygon vertices first; their indices are 0..n.
    let mut points: Vec<Vec2> = (0..n)
        .map(|k| cell.point_at(TAU * k as f64 / n as f64))
        .collect();

    // Graded rings: (radius, spacing) of each accepted ring point.
    let mut ring_points: Vec<(Vec2, f64)> = Vec::new();
    let dist_to_wall = |p: &Vec2| half_width - p.x.abs().max(p.y.abs());

    let push_ring = |radius: f64, count: usize, phase: f64, spacing: f64, out: &mut Vec<(Vec2, f64)>| {
        for k in 0..count {
            let theta = TAU * (k as f64 + phase) / count as f64;
            let p = c + radius * Vec2::new(theta.cos(), theta.sin());
            if dist_to_wall(&p) > 0.45 * spacing {
                out.push((p, spacing));
            }
        }
    };

    // Outside rings.
    let mut spacing = chord;
    let mut radius = apothem + chord * height;
    let mut outer_limit = big_r;
    let mut j = 0usize;
    loop {
        let count = if j == 0 {
            n
        } else {
            ((TAU * radius / spacing).round() as usize).max(8)
        };
        if radius - big_r > wall_gap {
            break;
        }
        push_ring(radius, count, if j % 2 == 0 { 0.5 } else { 0.0 }, spacing, &mut ring_points);
        outer_limit = radius;
        if spacing >= 0.95 * target_h {
            break;
        }
        let next = (spacing * RING_GROWTH).min(target_h);
        radius += 0.5 * (spacing + next) * height;
        spacing = next;
        j += 1;
    }
    let outer_exclusion = outer_limit + 0.7 * spacing.max(chord);

    // Inside rings.
    let mut spacing = chord;
    let mut radius = apothem - chord * height;
    let mut inner_limit = big_r;
    let mut j = 0usize;
    let mut reached_center = false;
    loop {
        if radius < 1.2 * spacing {
            reached_center = true;
            break;
        }
        let count = if j == 0 {
            n
        } else {
            ((TAU * radius / spacing).round() as usize).max(6)
        };
        push_ring(radius, count, if j % 2 == 0 { 0.5 } else { 0.0 }, spacing, &mut ring_points);
        inner_limit = radius;
        if spacing >= 0.95 * target_h {
            break;
        }
        let next = (spacing * RING_GROWTH).min(target_h);
        radius -= 0.5 * (spacing + next) * height;
        spacing = next;
        j += 1;
    }
    let inner_exclusion = if reached_center {
        points_push_center(&mut ring_points, c, inner_limit);
        f64::NEG_INFINITY
    } else {
        inner_limit - 0.7 * spacing
    };

    // Staggered lattice.
    let nx = ((2.0 * half_width / target_h).round() as usize).max(1);
    let ny = ((2.0 * half_width / (target_h * height)).round() as usize).max(1);
    let (dx, dy) = (2.0 * half_width / nx as f64, 2.0 * half_width / ny as f64);
    let mut lattice: Vec<(Vec2, bool)> = Vec::new();
    for jy in 0..=ny {
        let y = if jy == ny { half_width } else { -half_width + jy as f64 * dy };
        let on_wall_row = jy == 0 || jy == ny;
        let mut xs: Vec<f64> = Vec::new();
        if jy % 2 == 0 {
            xs.extend((0..=nx).map(|i| if i == nx { half_width } else { -half_width + i as f64 * dx }));
        } else {
            xs.push(-half_width);
            xs.extend((0..nx).map(|i| -half_width + (i as f64 + 0.5) * dx));
            xs.push(half_width);
        }
        let last = xs.len() - 1;
        for (ix, x) in xs.into_iter().enumerate() {
            let on_wall = on_wall_row || ix == 0 || ix == last;
            lattice.push((Vec2::new(x, y), on_wall));
        }
    }
    for (p, on_wall) in lattice {
        let rho = (p - c).norm();
        let in_band = rho > inner_exclusion && rho < outer_exclusion;
        if on_wall {
            let crowded = ring_points
                .iter()
                .any(|(q, s)| (p - q).norm() < 0.5 * s);
            if !crowded {
                points.push(p);
            }
        } else if !in_band {
            points.push(p);
        }
    }
    points.extend(ring_points.iter().map(|(p, _)| *p));

    triangulate(points, n, cell)
}

fn points_push_center(ring_points: &mut Vec<(Vec2, f64)>, c: Vec2, inner_radius: f64) {
    if inner_radius > 0.0 {
        ring_points.push((c, inner_radius));
    }
}

fn triangulate(points: Vec<Vec2>, n_poly: usize, cell: Circle) -> Result<Mesh> {
    let vertices: Vec<Point2<f64>> = points.iter().map(|p| Point2::new(p.x, p.y)).collect();
    let constraints: Vec<[usize; 2]> = (0..n_poly).map(|k| [k, (k + 1) % n_poly]).collect();
    let mut conflicts = Vec::new();
    let cdt = ConstrainedDelaunayTriangulation::<Point2<f64>>::try_bulk_load_cdt(
        vertices,
        constraints,
        |e| conflicts.push(e),
    )
    .map_err(|e| Error::internal(format!("triangulation failed: {e:?}")))?;
    if !conflicts.is_empty() {
        return Err(Error::internal(format!("conflicting polygon constraints: {conflicts:?}")));
    }
    if cdt.num_vertices() != points.len() {
        return Err(Error::internal(format!(
            "triangulation merged {} duplicate points",
            points.len() - cdt.num_vertices()
        )));
    }
    let nodes: Vec<Vec2> = cdt
        .vertices()
        .map(|v| Vec2::new(v.position().x, v.position().y))
        .collect();

    let sector = TAU / n_poly as f64;
    let mut triangles = Vec::with_capacity(cdt.num_inner_faces());
    let mut regions = Vec::with_capacity(cdt.num_inner_faces());
    for face in cdt.inner_faces() {
        let vs = face.vertices();
        let mut t = [vs[0].fix().index(), vs[1].fix().index(), vs[2].fix().index()];
        let area = 0.5 * (nodes[t[1]] - nodes[t[0]]).perp(&(nodes[t[2]] - nodes[t[0]]));
        if area < 0.0 {
            t.swap(1, 2);
        }
        let centroid = (nodes[t[0]] + nodes[t[1]] + nodes[t[2]]) / 3.0;
        let theta = cell.angle_of(&centroid);
        let k = ((theta / sector) as usize).min(n_poly - 1);
        let (a, b) = (nodes[k], nodes[(k + 1) % n_poly]);
        let inside = (b - a).perp(&(centroid - a)) > 0.0;
        triangles.push(t);
        regions.push(if inside { Region::Cell } else { Region::Extracellular });
    }

    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in &triangles {
        for k in 0..3 {
            *counts.entry(edge_key(t[k], t[(k + 1) % 3])).or_default() += 1;
        }
    }
    let mut markers = BTreeMap::new();
    for (&e, &cnt) in &counts {
        if cnt == 1 {
            markers.insert(e, EdgeMarker::OuterWall);
        }
    }
    for k in 0..n_poly {
        markers.insert(edge_key(k, (k + 1) % n_poly), EdgeMarker::CellBoundary);
    }
    let polygon: Vec<usize> = (0..n_poly).collect();
    Mesh::from_parts(nodes, triangles, regions, markers, polygon, Some(cell))
}

/// Annulus submesh together with its node map into the parent mesh.
#[derive(Clone, Debug)]
pub struct Annulus {
    pub mesh: Mesh,
    /// `to_full[i]` is the parent index of annulus node `i`.
    pub to_full: Vec<usize>,
}

impl Annulus {
    /// Restrict a parent nodal field to the annulus nodes.
    pub fn restrict(&self, full_values: &[f64]) -> Vec<f64> {
        self.to_full.iter().map(|&i| full_values[i]).collect()
    }

    /// Write annulus values into a parent-sized vector, leaving other
    /// entries untouched.
    pub fn embed(&self, values: &[f64], full_values: &mut [f64]) {
        for (&i, &v) in self.to_full.iter().zip(values) {
            full_values[i] = v;
        }
    }
}

/// Remove the cell triangles. Cell polygon edges become `CellBoundary`
/// boundary edges of the result.
pub fn extract_annulus(full: &Mesh) -> Result<Annulus> {
    if full.cell_polygon.is_empty() {
        return Err(Error::internal("mesh has no cell polygon"));
    }
    let cycle_edges: Vec<(usize, usize)> = (0..full.cell_polygon.len())
        .map(|k| {
            edge_key(
                full.cell_polygon[k],
                full.cell_polygon[(k + 1) % full.cell_polygon.len()],
            )
        })
        .collect();
    let edge_tris = full.edge_triangles();
    for e in &cycle_edges {
        if !edge_tris.contains_key(e) {
            return Err(Error::internal(format!(
                "cell polygon is not a closed edge cycle: {e:?} is not a mesh edge"
            )));
        }
    }
    let mut new_index = vec![usize::MAX; full.nodes.len()];
    let mut to_full = Vec::new();
    let mut triangles = Vec::new();
    for (t, r) in full.triangles.iter().zip(&full.regions) {
        if *r != Region::Extracellular {
            continue;
        }
        let mut nt = [0; 3];
        for k in 0..3 {
            if new_index[t[k]] == usize::MAX {
                new_index[t[k]] = to_full.len();
                to_full.push(t[k]);
            }
            nt[k] = new_index[t[k]];
        }
        triangles.push(nt);
    }
    let nodes = to_full.iter().map(|&i| full.nodes[i]).collect();
    let mut markers = BTreeMap::new();
    for (&(a, b), &m) in &full.edge_markers {
        if new_index[a] == usize::MAX || new_index[b] == usize::MAX {
            return Err(Error::internal(format!("marked edge ({a}, {b}) lost in annulus")));
        }
        markers.insert(edge_key(new_index[a], new_index[b]), m);
    }
    let polygon = full.cell_polygon.iter().map(|&i| new_index[i]).collect();
    let regions = vec![Region::Extracellular; triangles.len()];
    let mesh = Mesh::from_parts(nodes, triangles, regions, markers, polygon, full.cell)?;
    Ok(Annulus { mesh, to_full })
}

/// One boundary edge seen from the cell centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryArc {
    /// Endpoints ordered counter-clockwise about the cell centre.
    pub edge: (usize, usize),
    /// Angle of the first endpoint, in `[0, 2π)`.
    pub theta_start: f64,
    /// Angle of the second endpoint; exceeds `2π` for the arc that wraps.
    pub theta_end: f64,
    /// Angle of the edge midpoint, in `[0, 2π)`.
    pub theta_mid: f64,
    pub length: f64,
}

/// Arcs of all edges carrying `marker`, sorted by midpoint angle about the
/// cell centre.
pub fn boundary_arcs(mesh: &Mesh, marker: EdgeMarker) -> Result<Vec<BoundaryArc>> {
    let cell = mesh
        .cell
        .ok_or_else(|| Error::domain("mesh has no cell to measure angles from"))?;
    let edges = mesh.marked_edges(marker);
    if edges.is_empty() {
        return Err(Error::domain(format!("no edges carry marker {}", marker.name())));
    }
    let mut arcs: Vec<BoundaryArc> = edges
        .into_iter()
        .map(|(a, b)| {
            let (pa, pb) = (mesh.nodes[a], mesh.nodes[b]);
            let (a, b, pa, pb) = if (pa - cell.center).perp(&(pb - cell.center)) >= 0.0 {
                (a, b, pa, pb)
            } else {
                (b, a, pb, pa)
            };
            let start = cell.angle_of(&pa);
            let mut end = cell.angle_of(&pb);
            if end <= start {
                end += TAU;
            }
            BoundaryArc {
                edge: (a, b),
                theta_start: start,
                theta_end: end,
                theta_mid: cell.angle_of(&(0.5 * (pa + pb))),
                length: (pb - pa).norm(),
            }
        })
        .collect();
    arcs.sort_by(|x, y| x.theta_mid.total_cmp(&y.theta_mid));
    Ok(arcs)
}

/// Bucket-grid point location over the triangles of a mesh.
#[derive(Clone, Debug)]
pub struct Locator {
    origin: Vec2,
    cell_size: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl Locator {
    pub fn new(mesh: &Mesh) -> Self {
        let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
        for p in &mesh.nodes {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let target = (mesh.triangles.len().max(1) as f64).sqrt();
        let cell_size = (extent.x.max(extent.y) / target).max(1e-12);
        let nx = ((extent.x / cell_size).ceil() as usize).max(1);
        let ny = ((extent.y / cell_size).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let (mut tlo, mut thi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
            for &v in t {
                tlo = tlo.inf(&mesh.nodes[v]);
                thi = thi.sup(&mesh.nodes[v]);
            }
            let (i0, j0) = Self::index(lo, cell_size, nx, ny, &tlo);
            let (i1, j1) = Self::index(lo, cell_size, nx, ny, &thi);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(ti);
                }
            }
        }
        Locator { origin: lo, cell_size, nx, ny, buckets }
    }

    fn index(origin: Vec2, size: f64, nx: usize, ny: usize, p: &Vec2) -> (usize, usize) {
        let i = ((p.x - origin.x) / size).floor().clamp(0.0, (nx - 1) as f64) as usize;
        let j = ((p.y - origin.y) / size).floor().clamp(0.0, (ny - 1) as f64) as usize;
        (i, j)
    }

    /// Enclosing triangle and barycentric coordinates of `p`, or `None` when
    /// `p` lies outside the mesh. Points on shared edges resolve to the
    /// first matching triangle.
    pub fn locate(&self, mesh: &Mesh, p: &Vec2) -> Option<(usize, [f64; 3])> {
        let (i, j) = Self::index(self.origin, self.cell_size, self.nx, self.ny, p);
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &ti in &self.buckets[j * self.nx + i] {
            let lam = barycentric(mesh, ti, p);
            let worst = lam.iter().cloned().fold(f64::INFINITY, f64::min);
            if worst >= 0.0 {
                return Some((ti, lam));
            }
            if best.as_ref().is_none_or(|b| worst > b.2) {
                best = Some((ti, lam, worst));
            }
        }
        match best {
            Some((ti, lam, worst)) if worst > -1e-12 => {
                let mut lam = lam.map(|l| l.max(0.0));
                let s: f64 = lam.iter().sum();
                lam.iter_mut().for_each(|l| *l /= s);
                Some((ti, lam))
            }
            _ => None,
        }
    }

    /// Barycentric interpolation of a nodal field at `p`.
    pub fn interpolate(&self, mesh: &Mesh, values: &[f64], p: &Vec2) -> Option<f64> {
        let (ti, lam) = self.locate(mesh, p)?;
        let t = mesh.triangles[ti];
        Some((0..3).map(|k| lam[k] * values[t[k]]).sum())
    }
}

/// Barycentric coordinates of `p` with respect to triangle `tri`.
pub fn barycentric(mesh: &Mesh, tri: usize, p: &Vec2) -> [f64; 3] {
    let [a, b, c] = mesh.triangles[tri];
    let (pa, pb, pc) = (mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]);
    let det = (pb - pa).perp(&(pc - pa));
    let l1 = (p - pa).perp(&(pc - pa)) / det;
    let l2 = (pb - pa).perp(&(p - pa)) / det;
    [1.0 - l1 - l2, l1, l2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cell() -> Circle {
        Circle::new(Vec2::zeros(), 1.0).unwrap()
    }

    fn table_mesh(h: f64) -> Mesh {
        build_full_mesh(5.0, unit_cell(), default_circle_points(1.0, h), h).unwrap()
    }

    #[test]
    fn default_resolution_matches_reference_mesh() {
        assert_eq!(default_circle_points(1.0, 0.0875), 128);
        assert_eq!(default_circle_points(1.0, 100.0), 16);
        assert_eq!(default_circle_points(1.0, 0.2) % 8, 0);
    }

    #[test]
    fn full_mesh_has_both_markers_and_target_edge_length() {
        let mesh = table_mesh(0.0875);
        assert!(!mesh.marked_edges(EdgeMarker::OuterWall).is_empty());
        assert_eq!(mesh.marked_edges(EdgeMarker::CellBoundary).len(), 128);
        let mean = mesh.mean_edge_length();
        assert!((0.06..=0.12).contains(&mean), "mean edge length {mean}");
        assert!((mesh.total_area() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn outer_wall_edges_lie_on_the_square() {
        let mesh = table_mesh(0.2);
        for (a, b) in mesh.marked_edges(EdgeMarker::OuterWall) {
            let (p, q) = (mesh.nodes()[a], mesh.nodes()[b]);
            let on = |s: f64| (s.abs() - 5.0).abs() < 1e-12;
            assert!((on(p.x) && on(q.x) && p.x == q.x) || (on(p.y) && on(q.y) && p.y == q.y));
        }
        let wall_len: f64 = boundary_arcs(&mesh, EdgeMarker::OuterWall)
            .unwrap()
            .iter()
            .map(|a| a.length)
            .sum();
        assert!((wall_len - 40.0).abs() < 1e-9);
    }

    #[test]
    fn circle_outside_square_is_rejected() {
        let c = Circle::new(Vec2::zeros(), 6.0).unwrap();
        assert!(matches!(build_full_mesh(5.0, c, 64, 0.2), Err(Error::Domain(_))));
        let c = Circle::new(Vec2::new(4.5, 0.0), 1.0).unwrap();
        assert!(matches!(build_full_mesh(5.0, c, 64, 0.2), Err(Error::Domain(_))));
        assert!(build_full_mesh(5.0, unit_cell(), 8, 0.2).is_err());
        assert!(build_full_mesh(5.0, unit_cell(), 64, 0.0).is_err());
    }

    #[test]
    fn off_centre_cell_meshes() {
        let c = Circle::new(Vec2::new(1.5, -2.0), 0.8).unwrap();
        let mesh = build_full_mesh(4.0, c, 48, 0.25).unwrap();
        let ann = extract_annulus(&mesh).unwrap();
        assert!(ann.mesh.triangle_count() < mesh.triangle_count());
    }

    #[test]
    fn conformity_audit() {
        let mesh = table_mesh(0.2);
        let markers = mesh.edge_markers();
        for (e, tris) in mesh.edge_triangles() {
            assert!(tris.len() == 1 || tris.len() == 2);
            if tris.len() == 1 {
                assert_eq!(markers.get(&e), Some(&EdgeMarker::OuterWall));
            }
        }
    }

    #[test]
    fn annulus_is_a_submesh() {
        let full = table_mesh(0.15);
        let ann = extract_annulus(&full).unwrap();
        assert!(ann.mesh.triangle_count() < full.triangle_count());
        let interior = full.node_count()
            - full.cell_polygon().len()
            - full
                .nodes()
                .iter()
                .filter(|p| p.norm() > 1.0 + 1e-9)
                .count();
        assert_eq!(ann.mesh.node_count(), full.node_count() - interior);
        let area = ann.mesh.total_area();
        let exact = 100.0 - PI;
        assert!((area - exact).abs() / exact < 0.02);
        for (i, &j) in ann.to_full.iter().enumerate() {
            assert_eq!(ann.mesh.nodes()[i], full.nodes()[j]);
        }
        let field: Vec<f64> = full.nodes().iter().map(|p| p.x * p.y + 1.0).collect();
        let restricted = ann.restrict(&field);
        let mut back = vec![f64::NAN; full.node_count()];
        ann.embed(&restricted, &mut back);
        for &j in &ann.to_full {
            assert_eq!(back[j], field[j]);
        }
        assert_eq!(boundary_arcs(&ann.mesh, EdgeMarker::CellBoundary).unwrap().len(),
                   full.cell_polygon().len());
    }

    #[test]
    fn broken_polygon_is_rejected() {
        let full = table_mesh(0.3);
        let mut bad = full.clone();
        bad.cell_polygon.swap(0, 5);
        assert!(matches!(extract_annulus(&bad), Err(Error::Internal(_))));
    }

    #[test]
    fn polygon_nodes_lie_on_the_circle() {
        let mesh = table_mesh(0.2);
        for &i in mesh.cell_polygon() {
            assert!((mesh.nodes()[i].norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn arcs_cover_full_turn() {
        let mesh = build_full_mesh(5.0, unit_cell(), 64, 0.2).unwrap();
        let arcs = boundary_arcs(&mesh, EdgeMarker::CellBoundary).unwrap();
        assert_eq!(arcs.len(), 64);
        let total: f64 = arcs.iter().map(|a| a.theta_end - a.theta_start).sum();
        assert!((total - TAU).abs() < 1e-12);
        for w in arcs.windows(2) {
            assert!(w[1].theta_mid > w[0].theta_mid);
            assert!((w[1].theta_start - w[0].theta_end.rem_euclid(TAU)).abs() < 1e-12);
        }
        for a in &arcs {
            assert!((a.theta_end - a.theta_start - TAU / 64.0).abs() < 1e-12);
            assert!(a.length > 0.0);
        }
        let perimeter: f64 = arcs.iter().map(|a| a.length).sum();
        let exact = 2.0 * 64.0 * (PI / 64.0).sin();
        assert!((perimeter - exact).abs() < 1e-12);
    }

    #[test]
    fn perimeter_converges_quadratically() {
        let err = |n: usize| {
            let mesh = build_full_mesh(5.0, unit_cell(), n, 0.3).unwrap();
            let p: f64 = boundary_arcs(&mesh, EdgeMarker::CellBoundary)
                .unwrap()
                .iter()
                .map(|a| a.length)
                .sum();
            TAU - p
        };
        let (e32, e64, e128) = (err(32), err(64), err(128));
        assert!((e32 / e64 - 4.0).abs() < 0.05);
        assert!((e64 / e128 - 4.0).abs() < 0.05);
    }

    #[test]
    fn arcs_need_marked_edges() {
        let mesh = Mesh::simple(
            vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(boundary_arcs(&mesh, EdgeMarker::CellBoundary).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mesh = build_full_mesh(3.0, unit_cell(), 32, 0.4).unwrap();
        let back = Mesh::from_text(&mesh.to_text()).unwrap();
        assert_eq!(back.nodes(), mesh.nodes());
        assert_eq!(back.triangles(), mesh.triangles());
        assert_eq!(back.regions(), mesh.regions());
        assert_eq!(back.edge_markers(), mesh.edge_markers());
        let c = back.cell().unwrap();
        assert!(c.center.norm() < 1e-14 && (c.radius - 1.0).abs() < 1e-14);
        assert!(Mesh::from_text("nodes 1 triangles 0\n0 0 0\n").is_err());
    }

    #[test]
    fn locator_finds_points() {
        let mesh = table_mesh(0.3);
        let loc = Locator::new(&mesh);
        for p in [Vec2::new(0.0, 0.01), Vec2::new(-4.99, 4.99), Vec2::new(5.0, 5.0), Vec2::new(1.3, -2.7)] {
            let (ti, lam) = loc.locate(&mesh, &p).unwrap();
            let t = mesh.triangles()[ti];
            let q: Vec2 = (0..3).map(|k| lam[k] * mesh.nodes()[t[k]]).sum();
            assert!((q - p).norm() < 1e-12);
        }
        assert!(loc.locate(&mesh, &Vec2::new(5.1, 0.0)).is_none());
        let vals: Vec<f64> = mesh.nodes().iter().map(|p| 2.0 * p.x - p.y + 0.5).collect();
        let v = loc.interpolate(&mesh, &vals, &Vec2::new(0.37, 1.91)).unwrap();
        assert!((v - (2.0 * 0.37 - 1.91 + 0.5)).abs() < 1e-12);
    }
}
