use super::{signed_area, Location};

/// Uniform bucket grid over triangle bounding boxes.
#[derive(Debug)]
pub struct TriangleLocator {
    min: Location,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<u32>>,
}

/// Barycentric weights below this (relative to 1) count as on an edge.
const EDGE_TOL: f64 = 1e-10;

impl TriangleLocator {
    pub fn new(vertices: &[Location], triangles: &[[usize; 3]]) -> Self {
        let mut min = Location::new(f64::INFINITY, f64::INFINITY);
        let mut max = Location::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in vertices {
            min = Location::new(min.x.min(v.x), min.y.min(v.y));
            max = Location::new(max.x.max(v.x), max.y.max(v.y));
        }
        let width = (max.x - min.x).max(1e-12);
        let height = (max.y - min.y).max(1e-12);
        let target = (triangles.len().max(1) as f64).sqrt();
        let cell = (width.max(height) / target).max(1e-12);
        let nx = ((width / cell).ceil() as usize).clamp(1, 4096);
        let ny = ((height / cell).ceil() as usize).clamp(1, 4096);
        let cell = (width / nx as f64).max(height / ny as f64);
        let mut buckets = vec![Vec::new(); nx * ny];
        for (t, tri) in triangles.iter().enumerate() {
            let pts = tri.map(|i| vertices[i]);
            let lo = Location::new(
                pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min),
                pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min),
            );
            let hi = Location::new(
                pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max),
                pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max),
            );
            let (i0, j0) = Self::cell_of(min, cell, nx, ny, lo);
            let (i1, j1) = Self::cell_of(min, cell, nx, ny, hi);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(t as u32);
                }
            }
        }
        TriangleLocator {
            min,
            cell,
            nx,
            ny,
            buckets,
        }
    }

    fn cell_of(min: Location, cell: f64, nx: usize, ny: usize, p: Location) -> (usize, usize) {
        let i = ((p.x - min.x) / cell).floor();
        let j = ((p.y - min.y) / cell).floor();
        (
            (i.max(0.0) as usize).min(nx - 1),
            (j.max(0.0) as usize).min(ny - 1),
        )
    }

    /// Containing triangle and clamped barycentric weights summing to one.
    pub fn locate(&self, vertices: &[Location], triangles: &[[usize; 3]], p: Location) -> Option<(usize, [f64; 3])> {
        if !p.is_finite() {
            return None;
        }
        let margin = self.cell * 1e-9;
        if p.x < self.min.x - margin
            || p.y < self.min.y - margin
            || p.x > self.min.x + self.cell * self.nx as f64 + margin
            || p.y > self.min.y + self.cell * self.ny as f64 + margin
        {
            return None;
        }
        let (i, j) = Self::cell_of(self.min, self.cell, self.nx, self.ny, p);
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &t in &self.buckets[j * self.nx + i] {
            let t = t as usize;
            let tri = triangles[t];
            let (a, b, c) = (vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            let area = signed_area(a, b, c);
            let w = [
                signed_area(p, b, c) / area,
                signed_area(a, p, c) / area,
                signed_area(a, b, p) / area,
            ];
            let worst = w[0].min(w[1]).min(w[2]);
            if worst >= -EDGE_TOL && best.as_ref().is_none_or(|b| worst > b.2) {
                best = Some((t, w, worst));
                if worst > EDGE_TOL {
                    break;
                }
            }
        }
        best.map(|(t, w, _)| {
            let mut w = w.map(|x| if x < EDGE_TOL { 0.0 } else { x });
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            (t, w)
        })
    }
}
