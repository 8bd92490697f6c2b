//! Incremental Delaunay triangulation with quality refinement over a convex
//! polygonal domain.
//!
//! Insertion follows Bowyer-Watson inside a large enclosing triangle.
//! Refinement inserts circumcenters of oversized or skinny triangles, and
//! splits boundary subsegments at their midpoints whenever a vertex or
//! candidate circumcenter falls inside their diametral circle. Because the
//! domain is convex and boundary subsegments are kept unencroached, the
//! boundary is recovered exactly once the enclosing triangle is removed.

use std::collections::HashMap;

use robust::{incircle, orient2d, Coord};

use super::Location;
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

#[derive(Clone, Copy, Debug)]
struct Tri {
    v: [usize; 3],
    /// `n[i]` is the triangle across the edge opposite `v[i]`.
    n: [usize; 3],
    alive: bool,
}

pub(crate) struct Triangulation {
    pts: Vec<Location>,
    tris: Vec<Tri>,
    hint: usize,
    n_super: usize,
}

#[inline]
fn c(p: Location) -> Coord<f64> {
    Coord { x: p.x, y: p.y }
}

impl Triangulation {
    /// Starts from an enclosing triangle around the bounding box.
    pub(crate) fn new(min: Location, max: Location) -> Self {
        let cx = 0.5 * (min.x + max.x);
        let cy = 0.5 * (min.y + max.y);
        let span = (max.x - min.x).max(max.y - min.y).max(1e-9);
        let r = 64.0 * span;
        let pts = vec![
            Location::new(cx - 2.0 * r, cy - r),
            Location::new(cx + 2.0 * r, cy - r),
            Location::new(cx, cy + 2.0 * r),
        ];
        let tris = vec![Tri {
            v: [0, 1, 2],
            n: [NONE; 3],
            alive: true,
        }];
        Triangulation {
            pts,
            tris,
            hint: 0,
            n_super: 3,
        }
    }

    pub(crate) fn point(&self, i: usize) -> Location {
        self.pts[i]
    }

    pub(crate) fn n_points(&self) -> usize {
        self.pts.len() - self.n_super
    }

    fn orient(&self, a: usize, b: usize, p: Location) -> f64 {
        orient2d(c(self.pts[a]), c(self.pts[b]), c(p))
    }

    fn in_circle(&self, t: usize, p: Location) -> bool {
        let [a, b, cc] = self.tris[t].v;
        incircle(c(self.pts[a]), c(self.pts[b]), c(self.pts[cc]), c(p)) > 0.0
    }

    fn locate(&self, p: Location) -> Option<usize> {
        let mut t = if self.tris[self.hint].alive {
            self.hint
        } else {
            self.tris.iter().rposition(|t| t.alive)?
        };
        let max_steps = 4 * self.tris.len() + 16;
        for _ in 0..max_steps {
            let tri = self.tris[t];
            let mut moved = false;
            for i in 0..3 {
                let a = tri.v[(i + 1) % 3];
                let b = tri.v[(i + 2) % 3];
                if self.orient(a, b, p) < 0.0 {
                    if tri.n[i] == NONE {
                        return None;
                    }
                    t = tri.n[i];
                    moved = true;
                    break;
                }
            }
            if !moved {
                return Some(t);
            }
        }
        // walk failed to settle; fall back to a scan
        self.tris.iter().enumerate().position(|(_, tri)| {
            tri.alive
                && (0..3).all(|i| self.orient(tri.v[(i + 1) % 3], tri.v[(i + 2) % 3], p) >= 0.0)
        })
    }

    /// Inserts `p`, returning its vertex index (or the index of a coincident
    /// existing vertex).
    pub(crate) fn insert(&mut self, p: Location) -> Result<usize> {
        let start = self
            .locate(p)
            .ok_or_else(|| Error::Refinement(format!("point ({}, {}) outside the enclosing triangle", p.x, p.y)))?;
        for &v in &self.tris[start].v {
            if self.pts[v] == p {
                return Ok(v);
            }
        }

        // Cavity: triangles whose circumcircle strictly contains p.
        let mut cavity = vec![start];
        let mut in_cavity = HashMap::new();
        in_cavity.insert(start, ());
        let mut k = 0;
        while k < cavity.len() {
            let t = cavity[k];
            k += 1;
            for &nb in &self.tris[t].n {
                if nb != NONE && !in_cavity.contains_key(&nb) && self.in_circle(nb, p) {
                    in_cavity.insert(nb, ());
                    cavity.push(nb);
                }
            }
        }

        let pi = self.pts.len();
        self.pts.push(p);

        // Boundary edges of the cavity, each with its outside neighbour.
        let mut boundary = Vec::new();
        for &t in &cavity {
            let tri = self.tris[t];
            for i in 0..3 {
                let nb = tri.n[i];
                if nb == NONE || !in_cavity.contains_key(&nb) {
                    boundary.push((tri.v[(i + 1) % 3], tri.v[(i + 2) % 3], nb));
                }
            }
        }
        for &t in &cavity {
            self.tris[t].alive = false;
        }

        let first = self.tris.len();
        let mut starts: HashMap<usize, usize> = HashMap::with_capacity(boundary.len());
        for (offset, &(a, b, outer)) in boundary.iter().enumerate() {
            let t = first + offset;
            self.tris.push(Tri {
                v: [a, b, pi],
                n: [NONE, NONE, outer],
                alive: true,
            });
            starts.insert(a, t);
            if outer != NONE {
                let o = &mut self.tris[outer];
                for j in 0..3 {
                    let oa = o.v[(j + 1) % 3];
                    let ob = o.v[(j + 2) % 3];
                    if oa == b && ob == a {
                        o.n[j] = t;
                    }
                }
            }
        }
        for offset in 0..boundary.len() {
            let t = first + offset;
            let b = self.tris[t].v[1];
            let next = *starts
                .get(&b)
                .ok_or_else(|| Error::Refinement("cavity boundary is not a closed loop".into()))?;
            self.tris[t].n[0] = next;
            self.tris[next].n[1] = t;
        }
        self.hint = self.tris.len() - 1;
        Ok(pi)
    }

    fn is_super(&self, v: usize) -> bool {
        v < self.n_super
    }

    pub(crate) fn live_triangles(&self) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
        self.tris
            .iter()
            .enumerate()
            .filter(|(_, t)| t.alive)
            .map(|(i, t)| (i, t.v))
    }

    fn is_alive(&self, t: usize) -> bool {
        self.tris[t].alive
    }

    /// Triangles not touching the enclosing triangle, as indices into the
    /// final vertex list (enclosing vertices dropped).
    pub(crate) fn finish(self) -> (Vec<Location>, Vec<[usize; 3]>) {
        let ns = self.n_super;
        let tris = self
            .tris
            .iter()
            .filter(|t| t.alive && t.v.iter().all(|&v| v >= ns))
            .map(|t| [t.v[0] - ns, t.v[1] - ns, t.v[2] - ns])
            .collect();
        (self.pts[ns..].to_vec(), tris)
    }

    /// Apex vertices of the triangles (excluding enclosing ones) sharing edge `a`-`b`.
    fn edge_apexes(&self, edges: &HashMap<(usize, usize), Vec<usize>>, a: usize, b: usize) -> Option<Vec<usize>> {
        let key = (a.min(b), a.max(b));
        edges.get(&key).map(|ts| {
            ts.iter()
                .filter_map(|&t| {
                    self.tris[t]
                        .v
                        .iter()
                        .copied()
                        .find(|&v| v != a && v != b && !self.is_super(v))
                })
                .collect()
        })
    }

    fn edge_map(&self) -> HashMap<(usize, usize), Vec<usize>> {
        let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (t, v) in self.live_triangles() {
            for i in 0..3 {
                let a = v[(i + 1) % 3];
                let b = v[(i + 2) % 3];
                edges.entry((a.min(b), a.max(b))).or_default().push(t);
            }
        }
        edges
    }
}

pub(crate) struct RefineParams<'a> {
    /// Target maximum edge length at a point.
    pub size: &'a dyn Fn(Location) -> f64,
    pub min_angle_deg: f64,
    /// Triangles whose shortest edge is below this are not refined for angle.
    pub min_feature: f64,
    pub max_vertices: usize,
}

fn circumcenter(a: Location, b: Location, c: Location) -> Location {
    let d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
    let a2 = a.x * a.x + a.y * a.y;
    let b2 = b.x * b.x + b.y * b.y;
    let c2 = c.x * c.x + c.y * c.y;
    Location::new(
        (a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / d,
        (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / d,
    )
}

pub(crate) fn triangle_quality(a: Location, b: Location, c: Location) -> (f64, f64, f64) {
    let la = b.dist(c);
    let lb = a.dist(c);
    let lc = a.dist(b);
    let longest = la.max(lb).max(lc);
    let shortest = la.min(lb).min(lc);
    // smallest angle is opposite the shortest edge
    let (s, p, q) = if shortest == la {
        (la, lb, lc)
    } else if shortest == lb {
        (lb, la, lc)
    } else {
        (lc, la, lb)
    };
    let cos = ((p * p + q * q - s * s) / (2.0 * p * q)).clamp(-1.0, 1.0);
    (longest, shortest, cos.acos().to_degrees())
}

/// Triangulates the convex polygon `boundary` (counter-clockwise) and refines.
pub(crate) fn refine_convex(boundary: &[Location], params: &RefineParams) -> Result<(Vec<Location>, Vec<[usize; 3]>)> {
    let (mut min, mut max) = (boundary[0], boundary[0]);
    for p in boundary {
        min = Location::new(min.x.min(p.x), min.y.min(p.y));
        max = Location::new(max.x.max(p.x), max.y.max(p.y));
    }
    let mut tri = Triangulation::new(min, max);

    let mut ids = Vec::with_capacity(boundary.len());
    for &p in boundary {
        ids.push(tri.insert(p)?);
    }
    let mut segments: Vec<(usize, usize)> = (0..ids.len())
        .map(|i| (ids[i], ids[(i + 1) % ids.len()]))
        .filter(|(a, b)| a != b)
        .collect();

    // Boundary subsegments obey the size function from the start.
    loop {
        let mut split = false;
        let mut next = Vec::with_capacity(segments.len());
        for &(a, b) in &segments {
            let pa = tri.point(a);
            let pb = tri.point(b);
            let mid = pa.midpoint(pb);
            if pa.dist(pb) > (params.size)(mid) {
                let m = tri.insert(mid)?;
                next.push((a, m));
                next.push((m, b));
                split = true;
            } else {
                next.push((a, b));
            }
        }
        segments = next;
        if !split {
            break;
        }
        if tri.n_points() > params.max_vertices {
            return Err(Error::Refinement("vertex budget exhausted on the boundary".into()));
        }
    }

    let min_angle = params.min_angle_deg;
    loop {
        if tri.n_points() > params.max_vertices {
            return Err(Error::Refinement(format!(
                "vertex budget of {} exhausted",
                params.max_vertices
            )));
        }

        // 1. split encroached boundary subsegments
        let edges = tri.edge_map();
        let mut encroached = Vec::new();
        for (s, &(a, b)) in segments.iter().enumerate() {
            let pa = tri.point(a);
            let pb = tri.point(b);
            let is_encroached = match tri.edge_apexes(&edges, a, b) {
                None => true,
                Some(apexes) => apexes.iter().any(|&v| {
                    let pv = tri.point(v);
                    (pa.x - pv.x) * (pb.x - pv.x) + (pa.y - pv.y) * (pb.y - pv.y) < 0.0
                }),
            };
            if is_encroached && pa.dist(pb) > params.min_feature {
                encroached.push(s);
            }
        }
        if !encroached.is_empty() {
            split_segments(&mut tri, &mut segments, &encroached)?;
            continue;
        }

        // 2. refine bad triangles
        let mut bad: Vec<(usize, f64)> = Vec::new();
        for (t, v) in tri.live_triangles() {
            if v.iter().any(|&x| tri.is_super(x)) {
                continue;
            }
            let (pa, pb, pc) = (tri.point(v[0]), tri.point(v[1]), tri.point(v[2]));
            let (longest, shortest, angle) = triangle_quality(pa, pb, pc);
            let centroid = Location::new((pa.x + pb.x + pc.x) / 3.0, (pa.y + pb.y + pc.y) / 3.0);
            let too_big = longest > (params.size)(centroid);
            let skinny = angle < min_angle && shortest > params.min_feature;
            if too_big || skinny {
                bad.push((t, longest));
            }
        }
        if bad.is_empty() {
            break;
        }
        // largest first; ties broken by index for determinism
        bad.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut progressed = false;
        for (t, _) in bad {
            if !tri.is_alive(t) {
                continue;
            }
            let v = tri.tris[t].v;
            let cc = circumcenter(tri.point(v[0]), tri.point(v[1]), tri.point(v[2]));
            let hits: Vec<usize> = segments
                .iter()
                .enumerate()
                .filter(|(_, &(a, b))| {
                    let pa = tri.point(a);
                    let pb = tri.point(b);
                    let mid = pa.midpoint(pb);
                    mid.dist(cc) < 0.5 * pa.dist(pb) && pa.dist(pb) > params.min_feature
                })
                .map(|(s, _)| s)
                .collect();
            if !hits.is_empty() {
                split_segments(&mut tri, &mut segments, &hits)?;
                progressed = true;
                break;
            }
            if !inside_convex(boundary, cc) {
                continue;
            }
            tri.insert(cc)?;
            progressed = true;
            if tri.n_points() > params.max_vertices {
                break;
            }
        }
        if !progressed {
            break;
        }
    }

    Ok(tri.finish())
}

fn split_segments(tri: &mut Triangulation, segments: &mut Vec<(usize, usize)>, which: &[usize]) -> Result<()> {
    let mut replaced = Vec::with_capacity(segments.len() + which.len());
    let mut w = which.iter().peekable();
    for (s, &(a, b)) in segments.iter().enumerate() {
        if w.peek() == Some(&&s) {
            w.next();
            let m = tri.insert(tri.point(a).midpoint(tri.point(b)))?;
            replaced.push((a, m));
            replaced.push((m, b));
        } else {
            replaced.push((a, b));
        }
    }
    *segments = replaced;
    Ok(())
}

fn inside_convex(poly: &[Location], p: Location) -> bool {
    let n = poly.len();
    (0..n).all(|i| orient2d(c(poly[i]), c(poly[(i + 1) % n]), c(p)) >= 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_delaunay(pts: &[Location], tris: &[[usize; 3]]) -> bool {
        tris.iter().all(|t| {
            pts.iter().enumerate().all(|(i, &p)| {
                t.contains(&i) || incircle(c(pts[t[0]]), c(pts[t[1]]), c(pts[t[2]]), c(p)) <= 1e-12
            })
        })
    }

    #[test]
    fn square_with_cocircular_corners() {
        let sq = [
            Location::new(0.0, 0.0),
            Location::new(1.0, 0.0),
            Location::new(1.0, 1.0),
            Location::new(0.0, 1.0),
        ];
        let size = |_: Location| 10.0;
        let params = RefineParams {
            size: &size,
            min_angle_deg: 20.0,
            min_feature: 1e-6,
            max_vertices: 100,
        };
        let (pts, tris) = refine_convex(&sq, &params).unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(tris.len(), 2);
        assert!(is_delaunay(&pts, &tris));
    }

    #[test]
    fn refined_triangulation_is_delaunay_and_sized() {
        let poly = [
            Location::new(0.0, 0.0),
            Location::new(3.0, 0.0),
            Location::new(4.0, 2.0),
            Location::new(1.0, 3.0),
        ];
        let size = |_: Location| 0.5;
        let params = RefineParams {
            size: &size,
            min_angle_deg: 20.0,
            min_feature: 1e-3,
            max_vertices: 10_000,
        };
        let (pts, tris) = refine_convex(&poly, &params).unwrap();
        assert!(is_delaunay(&pts, &tris));
        for t in &tris {
            let (longest, _, angle) = triangle_quality(pts[t[0]], pts[t[1]], pts[t[2]]);
            assert!(longest <= 0.5 + 1e-12);
            assert!(angle >= 20.0 - 1e-9, "angle {angle}");
        }
    }
}
