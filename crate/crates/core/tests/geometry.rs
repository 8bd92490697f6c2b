use jzig::mesh::{basis_matrix, build_mesh, fem_matrices, Location, Mesh};
use jzig::Error;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn square(side: f64) -> Vec<Location> {
    vec![
        Location::new(0.0, 0.0),
        Location::new(side, 0.0),
        Location::new(side, side),
        Location::new(0.0, side),
    ]
}

fn triangle_edges(m: &Mesh) -> Vec<f64> {
    let v = m.vertices();
    m.edges().iter().map(|&(a, b)| v[a].dist(v[b])).collect()
}

#[test]
fn minimal_triangulation() {
    let sites = [Location::new(0.0, 0.0), Location::new(2.0, 0.0), Location::new(0.5, 1.5)];
    let m = build_mesh(&sites, 100.0, 0.0).unwrap();
    assert_eq!(m.n_vertices(), 3);
    assert_eq!(m.triangles().len(), 1);
}

#[test]
fn unit_square_edge_scan() {
    let m = build_mesh(&square(1.0), 0.1, 0.0).unwrap();
    let longest = triangle_edges(&m).into_iter().fold(0.0, f64::max);
    assert!(longest <= 0.1 + 1e-12, "longest edge {longest}");
    assert!((m.area() - 1.0).abs() < 1e-12);
}

#[test]
fn collinear_is_degenerate() {
    let sites: Vec<Location> = (0..5).map(|i| Location::new(i as f64, 2.0 * i as f64)).collect();
    assert!(matches!(build_mesh(&sites, 1.0, 0.0), Err(Error::DegenerateDomain(_))));
}

#[test]
fn buffer_reaches_beyond_hull() {
    let m = build_mesh(&square(10.0), 2.0, 3.0).unwrap();
    for p in [Location::new(-2.9, 5.0), Location::new(12.9, 5.0), Location::new(5.0, -2.9), Location::new(5.0, 12.9)] {
        assert!(m.contains(p), "{p:?} should be inside the buffered mesh");
    }
    // interior triangles honour max_edge; only the buffer may be coarser
    let v = m.vertices();
    for &(a, b) in &m.edges() {
        let inside = |p: Location| (0.0..=10.0).contains(&p.x) && (0.0..=10.0).contains(&p.y);
        if inside(v[a]) && inside(v[b]) {
            assert!(v[a].dist(v[b]) <= 2.0 + 1e-9);
        }
    }
}

#[test]
fn basis_at_vertex_and_centroid() {
    let m = build_mesh(&square(4.0), 1.0, 0.0).unwrap();
    let v = m.vertices();
    let a = basis_matrix(&m, &[v[7]]).unwrap();
    let row: Vec<(usize, f64)> = a.row(0).filter(|&(_, w)| w > 0.0).collect();
    assert_eq!(row, vec![(7, 1.0)]);
    let t = m.triangles()[3];
    let c = Location::new(
        (v[t[0]].x + v[t[1]].x + v[t[2]].x) / 3.0,
        (v[t[0]].y + v[t[1]].y + v[t[2]].y) / 3.0,
    );
    let a = basis_matrix(&m, &[c]).unwrap();
    let mut cols: Vec<usize> = a.row_cols(0).to_vec();
    cols.sort();
    let mut want = t.to_vec();
    want.sort();
    assert_eq!(cols, want);
    for w in a.row_weights(0) {
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn outside_site_is_reported_by_index() {
    let m = build_mesh(&square(1.0), 0.5, 0.0).unwrap();
    let r = basis_matrix(&m, &[Location::new(0.5, 0.5), Location::new(3.0, 0.5)]);
    assert!(matches!(r, Err(Error::OutOfDomain { index: 1, .. })));
}

#[test]
fn right_triangle_mass() {
    let m = Mesh::new(
        vec![Location::new(0.0, 0.0), Location::new(1.0, 0.0), Location::new(0.0, 1.0)],
        vec![[0, 1, 2]],
    )
    .unwrap();
    let f = fem_matrices(&m);
    assert!((f.mass.iter().sum::<f64>() - 0.5).abs() < 1e-15);
}

#[test]
fn refinement_keeps_total_mass() {
    let m = build_mesh(&square(5.0), 1.5, 1.0).unwrap();
    let r = m.refine_uniform().unwrap();
    let a: f64 = fem_matrices(&m).mass.iter().sum();
    let b: f64 = fem_matrices(&r).mass.iter().sum();
    assert!((a - b).abs() < 1e-8, "{a} vs {b}");
}

#[test]
fn stiffness_is_symmetric_psd_with_constant_null_space() {
    let m = build_mesh(&square(6.0), 1.0, 2.0).unwrap();
    let f = fem_matrices(&m);
    assert!(f.mass.iter().all(|&c| c > 0.0));
    let g = f.stiffness.to_nalgebra();
    let asym = (&g - g.transpose()).abs().max();
    assert!(asym < 1e-12);
    let ones = vec![1.0; m.n_vertices()];
    let g1 = f.stiffness.mul_vec(&ones);
    assert!(g1.iter().all(|v| v.abs() < 1e-10));
    let eig = SymmetricEigen::new(DMatrix::from(g));
    assert!(eig.eigenvalues.min() >= -1e-10, "{}", eig.eigenvalues.min());
}

fn site_strategy() -> impl Strategy<Value = Vec<Location>> {
    prop::collection::vec((0.0..20.0f64, 0.0..20.0f64), 3..25)
        .prop_map(|v| v.into_iter().map(|(x, y)| Location::new(x, y)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn basis_rows_are_convex_and_linear_exact(
        sites in site_strategy(),
        probes in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..20),
        a in -3.0..3.0f64, b in -3.0..3.0f64, c in -3.0..3.0f64,
    ) {
        let mut all = sites.clone();
        all.extend(square(20.0));
        let m = build_mesh(&all, 4.0, 1.0).unwrap();
        let pts: Vec<Location> = probes.iter().map(|&(u, v)| Location::new(20.0 * u, 20.0 * v)).collect();
        let proj = basis_matrix(&m, &pts).unwrap();
        let f = |p: Location| a + b * p.x + c * p.y;
        let vals: Vec<f64> = m.vertices().iter().map(|&p| f(p)).collect();
        let interp = proj.apply(&vals);
        for (i, p) in pts.iter().enumerate() {
            let w = proj.row_weights(i);
            prop_assert!(w.len() <= 3);
            prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((interp[i] - f(*p)).abs() < 1e-9);
        }
    }

    #[test]
    fn triangles_are_positive_and_tile_the_hull(sites in site_strategy()) {
        let Ok(m) = build_mesh(&sites, 5.0, 0.5) else {
            // randomly drawn sites can be collinear; that case is covered above
            return Ok(());
        };
        let v = m.vertices();
        let mut used = vec![false; v.len()];
        let mut area = 0.0;
        for t in m.triangles() {
            let (p, q, r) = (v[t[0]], v[t[1]], v[t[2]]);
            let a = 0.5 * ((q.x - p.x) * (r.y - p.y) - (r.x - p.x) * (q.y - p.y));
            prop_assert!(a > 0.0);
            area += a;
            t.iter().for_each(|&i| used[i] = true);
        }
        prop_assert!(used.iter().all(|&u| u));
        let hull = m.boundary();
        let n = hull.len();
        let poly: f64 = (0..n).map(|i| {
            let (p, q) = (hull[i], hull[(i + 1) % n]);
            p.x * q.y - q.x * p.y
        }).sum::<f64>() * 0.5;
        prop_assert!((area - poly.abs()).abs() < 1e-8 * poly.abs().max(1.0));
        let g = fem_matrices(&m).stiffness;
        let g1 = g.mul_vec(&vec![1.0; v.len()]);
        prop_assert!(g1.iter().all(|x| x.abs() < 1e-10));
    }
}
