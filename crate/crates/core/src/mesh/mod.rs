//! Triangular finite-element meshes and the piecewise-linear basis.

mod delaunay;
mod locate;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::sparse::{SparseSym, SymPattern};

pub use locate::TriangleLocator;

/// Planar location in kilometres.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub const fn new(x: f64, y: f64) -> Self {
        Location { x, y }
    }

    pub fn dist(self, other: Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn midpoint(self, other: Location) -> Location {
        Location::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Options for [`build_mesh_with`].
#[derive(Clone, Debug)]
pub struct MeshOptions {
    pub max_edge: f64,
    pub buffer_width: f64,
    /// Edge-length multiplier reached at the outer edge of the buffer.
    pub buffer_edge_factor: f64,
    pub min_angle_deg: f64,
    pub max_vertices: usize,
}

impl MeshOptions {
    pub fn new(max_edge: f64, buffer_width: f64) -> Self {
        MeshOptions {
            max_edge,
            buffer_width,
            buffer_edge_factor: 3.0,
            min_angle_deg: 20.0,
            max_vertices: 250_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    vertices: Vec<Location>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<Location>,
    locator: Arc<TriangleLocator>,
}

impl PartialEq for Mesh {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices && self.triangles == other.triangles
    }
}

/// Builds a refined triangulation of the convex hull of `sites`, extended
/// outward by `buffer_width`.
pub fn build_mesh(sites: &[Location], max_edge: f64, buffer_width: f64) -> Result<Mesh> {
    build_mesh_with(sites, &MeshOptions::new(max_edge, buffer_width))
}

pub fn build_mesh_with(sites: &[Location], opts: &MeshOptions) -> Result<Mesh> {
    if !(opts.max_edge > 0.0) || !opts.max_edge.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "max_edge must be positive, got {}",
            opts.max_edge
        )));
    }
    if !(opts.buffer_width >= 0.0) || !opts.buffer_width.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "buffer_width must be non-negative, got {}",
            opts.buffer_width
        )));
    }
    if let Some(i) = sites.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter(format!("site {i} has non-finite coordinates")));
    }
    let hull = convex_hull(sites)?;
    let boundary = if opts.buffer_width > 0.0 {
        offset_polygon(&hull, opts.buffer_width)
    } else {
        hull.clone()
    };

    let h = opts.max_edge;
    let buffer = opts.buffer_width;
    let factor = opts.buffer_edge_factor.max(1.0);
    let size = |p: Location| {
        if buffer <= 0.0 {
            return h;
        }
        let d = distance_outside_convex(&hull, p);
        h * (1.0 + (factor - 1.0) * (d / buffer).min(1.0))
    };
    let params = delaunay::RefineParams {
        size: &size,
        min_angle_deg: opts.min_angle_deg,
        min_feature: 1e-3 * h,
        max_vertices: opts.max_vertices,
    };
    let (vertices, triangles) = delaunay::refine_convex(&boundary, &params)?;
    Mesh::from_parts(vertices, triangles, boundary)
}

impl Mesh {
    /// Assembles a mesh from explicit tables, validating the invariants.
    pub fn new(vertices: Vec<Location>, triangles: Vec<[usize; 3]>) -> Result<Mesh> {
        let boundary = convex_hull(&vertices)?;
        Mesh::from_parts(vertices, triangles, boundary)
    }

    fn from_parts(vertices: Vec<Location>, mut triangles: Vec<[usize; 3]>, boundary: Vec<Location>) -> Result<Mesh> {
        let k = vertices.len();
        let mut used = vec![false; k];
        for (t, tri) in triangles.iter_mut().enumerate() {
            for &v in tri.iter() {
                if v >= k {
                    return Err(Error::DegenerateDomain(format!(
                        "triangle {t} references vertex {v} but the mesh has {k} vertices"
                    )));
                }
                used[v] = true;
            }
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if area == 0.0 || !area.is_finite() {
                return Err(Error::DegenerateDomain(format!("triangle {t} has zero area")));
            }
            if area < 0.0 {
                tri.swap(1, 2);
            }
        }
        if let Some(v) = used.iter().position(|u| !u) {
            return Err(Error::DegenerateDomain(format!("vertex {v} belongs to no triangle")));
        }
        let locator = Arc::new(TriangleLocator::new(&vertices, &triangles));
        Ok(Mesh {
            vertices,
            triangles,
            boundary,
            locator,
        })
    }

    pub fn vertices(&self) -> &[Location] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Outer polygon of the buffered domain, counter-clockwise.
    pub fn boundary(&self) -> &[Location] {
        &self.boundary
    }

    /// Diagonal of the vertex bounding box.
    pub fn diameter(&self) -> f64 {
        let (mut lo, mut hi) = (Location::new(f64::INFINITY, f64::INFINITY), Location::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for v in &self.vertices {
            lo = Location::new(lo.x.min(v.x), lo.y.min(v.y));
            hi = Location::new(hi.x.max(v.x), hi.y.max(v.y));
        }
        lo.dist(hi)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| signed_area(self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]))
            .sum()
    }

    /// Unique undirected edges.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Vertex adjacency along mesh edges.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_vertices()];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Barycentric coordinates of `p` in the containing triangle.
    pub fn locate(&self, p: Location) -> Option<(usize, [f64; 3])> {
        self.locator.locate(&self.vertices, &self.triangles, p)
    }

    pub fn contains(&self, p: Location) -> bool {
        self.locate(p).is_some()
    }

    /// Splits every triangle into four through its edge midpoints.
    pub fn refine_uniform(&self) -> Result<Mesh> {
        let mut vertices = self.vertices.clone();
        let mut mids = std::collections::HashMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Location>| -> usize {
            *mids.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vertices.push(vertices[a].midpoint(vertices[b]));
                vertices.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for t in &self.triangles {
            let ab = mid(t[0], t[1], &mut vertices);
            let bc = mid(t[1], t[2], &mut vertices);
            let ca = mid(t[2], t[0], &mut vertices);
            triangles.push([t[0], ab, ca]);
            triangles.push([ab, t[1], bc]);
            triangles.push([ca, bc, t[2]]);
            triangles.push([ab, bc, ca]);
        }
        Mesh::from_parts(vertices, triangles, self.boundary.clone())
    }

    /// Text form: `k n_tri`, then `x y` per vertex, then `i j l` per triangle.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.vertices.len(), self.triangles.len());
        for v in &self.vertices {
            let _ = writeln!(s, "{} {}", v.x, v.y);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Mesh> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (ln, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "empty mesh file"))?;
        let nums = parse_fields::<usize>(header, 2, origin, ln + 1)?;
        let (k, n_tri) = (nums[0], nums[1]);
        let mut vertices = Vec::with_capacity(k);
        for _ in 0..k {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(origin, 0, "missing vertex lines"))?;
            let xy = parse_fields::<f64>(line, 2, origin, ln + 1)?;
            vertices.push(Location::new(xy[0], xy[1]));
        }
        let mut triangles = Vec::with_capacity(n_tri);
        for _ in 0..n_tri {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(origin, 0, "missing triangle lines"))?;
            let t = parse_fields::<usize>(line, 3, origin, ln + 1)?;
            triangles.push([t[0], t[1], t[2]]);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(Error::parse(origin, ln + 1, "trailing content after triangles"));
        }
        Mesh::new(vertices, triangles)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Mesh> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Mesh::from_text(&text, path)
    }
}

fn parse_fields<T: std::str::FromStr>(line: &str, n: usize, path: &Path, ln: usize) -> Result<Vec<T>> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != n {
        return Err(Error::parse(path, ln, format!("expected {n} fields, found {}", fields.len())));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<T>()
                .map_err(|_| Error::parse(path, ln, format!("cannot parse '{f}'")))
        })
        .collect()
}

pub(crate) fn signed_area(a: Location, b: Location, c: Location) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}

/// Convex hull (counter-clockwise, collinear points dropped).
pub fn convex_hull(sites: &[Location]) -> Result<Vec<Location>> {
    let mut pts: Vec<Location> = sites.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::DegenerateDomain(format!(
            "need at least 3 distinct sites, got {}",
            pts.len()
        )));
    }
    let cross = |o: Location, a: Location, b: Location| {
        robust::orient2d(
            robust::Coord { x: o.x, y: o.y },
            robust::Coord { x: a.x, y: a.y },
            robust::Coord { x: b.x, y: b.y },
        )
    };
    let mut hull: Vec<Location> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        return Err(Error::DegenerateDomain("sites are collinear".into()));
    }
    Ok(hull)
}

/// Outward offset of a convex counter-clockwise polygon with rounded corners.
fn offset_polygon(hull: &[Location], width: f64) -> Vec<Location> {
    let n = hull.len();
    let max_step = std::f64::consts::PI / 12.0;
    let mut out = Vec::new();
    for i in 0..n {
        let prev = hull[(i + n - 1) % n];
        let cur = hull[i];
        let next = hull[(i + 1) % n];
        // outward normals of the incoming and outgoing edges
        let a_in = (cur.y - prev.y).atan2(cur.x - prev.x) - std::f64::consts::FRAC_PI_2;
        let mut a_out = (next.y - cur.y).atan2(next.x - cur.x) - std::f64::consts::FRAC_PI_2;
        while a_out < a_in {
            a_out += 2.0 * std::f64::consts::PI;
        }
        let sweep = a_out - a_in;
        let steps = (sweep / max_step).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let a = a_in + sweep * s as f64 / steps as f64;
            out.push(Location::new(cur.x + width * a.cos(), cur.y + width * a.sin()));
        }
    }
    // drop near-duplicates created where arcs meet straight edges
    let tol = 1e-9 * width.max(1.0);
    let mut cleaned: Vec<Location> = Vec::with_capacity(out.len());
    for p in out {
        if cleaned.last().is_none_or(|q: &Location| q.dist(p) > tol) {
            cleaned.push(p);
        }
    }
    if cleaned.len() > 1 && cleaned[0].dist(*cleaned.last().unwrap()) <= tol {
        cleaned.pop();
    }
    convex_hull(&cleaned).unwrap_or(cleaned)
}

fn distance_outside_convex(hull: &[Location], p: Location) -> f64 {
    let n = hull.len();
    let inside = (0..n).all(|i| signed_area(hull[i], hull[(i + 1) % n], p) >= 0.0);
    if inside {
        return 0.0;
    }
    (0..n)
        .map(|i| point_segment_distance(p, hull[i], hull[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

fn point_segment_distance(p: Location, a: Location, b: Location) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(Location::new(a.x + t * dx, a.y + t * dy))
}

/// Sparse row-major evaluation matrix mapping mesh-vertex values to sites.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisProjector {
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl BasisProjector {
    pub fn from_rows(n_cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for r in rows {
            for &(c, w) in r {
                assert!(c < n_cols);
                cols.push(c);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        BasisProjector {
            n_cols,
            row_ptr,
            cols,
            weights,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    pub fn row_cols(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_weights(&self, i: usize) -> &[f64] {
        &self.weights[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.n_cols);
        (0..self.n_rows())
            .map(|i| self.row(i).map(|(c, a)| a * w[c]).sum())
            .collect()
    }

    pub fn apply_row(&self, i: usize, w: &[f64]) -> f64 {
        self.row(i).map(|(c, a)| a * w[c]).sum()
    }

    /// Aᵀ v.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_rows());
        let mut out = vec![0.0; self.n_cols];
        for (i, &vi) in v.iter().enumerate() {
            for (c, a) in self.row(i) {
                out[c] += a * vi;
            }
        }
        out
    }

    /// Rows touching each column.
    pub fn column_rows(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.n_cols];
        for i in 0..self.n_rows() {
            for (c, a) in self.row(i) {
                cols[c].push((i, a));
            }
        }
        cols
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> BasisProjector {
        let selected: Vec<Vec<(usize, f64)>> = rows.iter().map(|&i| self.row(i).collect()).collect();
        BasisProjector::from_rows(self.n_cols, &selected)
    }
}

/// Barycentric projector for `sites` on `mesh`.
pub fn basis_matrix(mesh: &Mesh, sites: &[Location]) -> Result<BasisProjector> {
    basis_matrix_with(mesh, sites, Execution::Parallel)
}

pub fn basis_matrix_with(mesh: &Mesh, sites: &[Location], exec: Execution) -> Result<BasisProjector> {
    let rows = par::try_map_range(exec, sites.len(), |i| {
        let p = sites[i];
        let (t, bary) = mesh.locate(p).ok_or(Error::OutOfDomain { index: i, x: p.x, y: p.y })?;
        let tri = mesh.triangles[t];
        Ok::<_, Error>(
            (0..3)
                .filter(|&j| bary[j] != 0.0)
                .map(|j| (tri[j], bary[j]))
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(BasisProjector::from_rows(mesh.n_vertices(), &rows))
}

/// Lumped mass (diagonal) and stiffness matrices of the P1 basis.
#[derive(Clone, Debug)]
pub struct FemMatrices {
    pub mass: Vec<f64>,
    pub stiffness: SparseSym,
}

pub fn fem_matrices(mesh: &Mesh) -> FemMatrices {
    fem_matrices_with(mesh, Execution::Parallel)
}

pub fn fem_matrices_with(mesh: &Mesh, exec: Execution) -> FemMatrices {
    let v = &mesh.vertices;
    let locals = par::map_slice(exec, &mesh.triangles, |t| {
        let p = [v[t[0]], v[t[1]], v[t[2]]];
        let area = signed_area(p[0], p[1], p[2]);
        // gradient of basis i is the rotated opposite edge over twice the area
        let grads: [(f64, f64); 3] = std::array::from_fn(|i| {
            let a = p[(i + 1) % 3];
            let b = p[(i + 2) % 3];
            ((a.y - b.y) / (2.0 * area), (b.x - a.x) / (2.0 * area))
        });
        let mut k = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                k[i][j] = area * (grads[i].0 * grads[j].0 + grads[i].1 * grads[j].1);
            }
        }
        (area, k)
    });
    let n = mesh.n_vertices();
    let pattern = Arc::new(SymPattern::from_entries(n, mesh.edges()));
    let mut stiffness = SparseSym::zeros(pattern);
    let mut mass = vec![0.0; n];
    for (t, (area, k)) in mesh.triangles.iter().zip(locals) {
        for i in 0..3 {
            mass[t[i]] += area / 3.0;
            for j in i..3 {
                stiffness.add(t[i], t[j], k[i][j]);
            }
        }
    }
    FemMatrices { mass, stiffness }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn unit_square() -> Vec<Location> {
        vec![
            Location::new(0.0, 0.0),
            Location::new(1.0, 0.0),
            Location::new(1.0, 1.0),
            Location::new(0.0, 1.0),
        ]
    }

    #[test]
    fn three_sites_give_one_triangle() {
        let sites = [Location::new(0.0, 0.0), Location::new(2.0, 0.0), Location::new(1.0, 1.5)];
        let m = build_mesh(&sites, 1e6, 0.0).unwrap();
        assert_eq!(m.n_vertices(), 3);
        assert_eq!(m.triangles().len(), 1);
    }

    #[test]
    fn collinear_sites_are_degenerate() {
        let sites: Vec<_> = (0..5).map(|i| Location::new(i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(build_mesh(&sites, 1.0, 0.0), Err(Error::DegenerateDomain(_))));
        assert!(matches!(
            build_mesh(&sites[..2], 1.0, 0.0),
            Err(Error::DegenerateDomain(_))
        ));
    }

    #[test]
    fn invalid_options_rejected() {
        assert!(matches!(build_mesh(&unit_square(), 0.0, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(build_mesh(&unit_square(), 0.1, -1.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn unit_square_edges_respect_max_edge() {
        let m = build_mesh(&unit_square(), 0.1, 0.0).unwrap();
        for (a, b) in m.edges() {
            let len = m.vertices()[a].dist(m.vertices()[b]);
            assert!(len <= 0.1 + 1e-12, "edge {len}");
        }
        assert!((m.area() - 1.0).abs() < 1e-12, "area {} nv {} nt {}", m.area(), m.n_vertices(), m.triangles().len());
    }

    #[test]
    fn buffer_extends_beyond_hull() {
        let m = build_mesh(&unit_square(), 0.2, 0.5).unwrap();
        for p in [
            Location::new(-0.49, 0.5),
            Location::new(1.49, 0.5),
            Location::new(0.5, -0.49),
            Location::new(0.5, 1.49),
            Location::new(1.3, 1.3),
        ] {
            assert!(m.contains(p), "{p:?} not covered");
        }
        // interior triangles obey max_edge, buffer triangles at most 3x
        for t in m.triangles() {
            let pts: Vec<_> = t.iter().map(|&i| m.vertices()[i]).collect();
            let (longest, _, _) = delaunay::triangle_quality(pts[0], pts[1], pts[2]);
            let inside = pts.iter().all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
            if inside {
                assert!(longest <= 0.2 + 1e-12);
            }
            assert!(longest <= 0.6 + 1e-12);
        }
    }

    #[test]
    fn mesh_build_is_deterministic() {
        let sites: Vec<_> = (0..40)
            .map(|i| Location::new((i as f64 * 0.37).sin() * 5.0, (i as f64 * 0.91).cos() * 3.0))
            .collect();
        let a = build_mesh(&sites, 0.8, 1.0).unwrap();
        let b = build_mesh(&sites, 0.8, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn basis_identities() {
        let m = build_mesh(&unit_square(), 0.3, 0.0).unwrap();
        let v = 5;
        let at_vertex = basis_matrix(&m, &[m.vertices()[v]]).unwrap();
        let row: Vec<_> = at_vertex.row(0).collect();
        assert_eq!(row.len(), 1);
        assert_eq!(row[0].0, v);
        assert!((row[0].1 - 1.0).abs() < 1e-12);

        let t = m.triangles()[3];
        let c = Location::new(
            (m.vertices()[t[0]].x + m.vertices()[t[1]].x + m.vertices()[t[2]].x) / 3.0,
            (m.vertices()[t[0]].y + m.vertices()[t[1]].y + m.vertices()[t[2]].y) / 3.0,
        );
        let at_centroid = basis_matrix(&m, &[c]).unwrap();
        let mut got: Vec<_> = at_centroid.row(0).collect();
        got.sort_by_key(|e| e.0);
        let mut want = t.to_vec();
        want.sort_unstable();
        assert_eq!(got.iter().map(|e| e.0).collect::<Vec<_>>(), want);
        assert!(got.iter().all(|e| (e.1 - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn outside_site_names_index() {
        let m = build_mesh(&unit_square(), 0.3, 0.0).unwrap();
        let sites = [Location::new(0.5, 0.5), Location::new(2.0, 0.5)];
        match basis_matrix(&m, &sites) {
            Err(Error::OutOfDomain { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected out-of-domain, got {other:?}"),
        }
    }

    #[test]
    fn single_right_triangle_mass() {
        let m = Mesh::new(
            vec![Location::new(0.0, 0.0), Location::new(1.0, 0.0), Location::new(0.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let fem = fem_matrices(&m);
        assert!((fem.mass.iter().sum::<f64>() - 0.5).abs() < 1e-15);
        // standard reference-element stiffness
        let g = fem.stiffness.to_dense();
        let want = [1.0, -0.5, -0.5, -0.5, 0.5, 0.0, -0.5, 0.0, 0.5];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn mesh_text_round_trip() {
        let m = build_mesh(&unit_square(), 0.4, 0.2).unwrap();
        let back = Mesh::from_text(&m.to_text(), &PathBuf::from("mem")).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn malformed_mesh_text_rejected() {
        let bad = "3 1\n0 0\n1 0\n0 1\n0 1 7\n";
        assert!(Mesh::from_text(bad, &PathBuf::from("mem")).is_err());
        let short = "3 1\n0 0\n1 0\n";
        assert!(matches!(
            Mesh::from_text(short, &PathBuf::from("mem")),
            Err(Error::Parse { .. })
        ));
    }
}
