use jzig::diagnostics::{mean, variance};
use jzig::mesh::{build_mesh, Location, Mesh};
use jzig::model::{sample_gamma, CellGrid, ModelState};
use jzig::par::Execution;
use jzig::predict::*;
use jzig::rng::stream;
use jzig::spde::MaternParams;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn mesh() -> Mesh {
    let sq = vec![
        Location::new(0.0, 0.0),
        Location::new(10.0, 0.0),
        Location::new(10.0, 10.0),
        Location::new(0.0, 10.0),
    ];
    build_mesh(&sq, 5.0, 0.0).unwrap()
}

fn state(m: &Mesh, alpha_y: f64, alpha_z: f64, rng: &mut impl Rng) -> ModelState {
    let k = m.n_vertices();
    let mut w = |s: f64| (0..k).map(|_| rng.random_range(-s..=s)).collect::<Vec<f64>>();
    ModelState {
        alpha_x: 2.75,
        alpha_y,
        alpha_z,
        beta_y: 0.9,
        beta_z: 1.2,
        phi_x: 0.05,
        phi_g: 3.81,
        phi_y: 0.4,
        matern_x: MaternParams::new(1.0, 3.0).unwrap(),
        matern_y: MaternParams::new(1.0, 3.0).unwrap(),
        matern_z: MaternParams::new(1.0, 3.0).unwrap(),
        w_x: w(0.5),
        w_y: w(0.3),
        w_z: w(0.8),
    }
}

fn flat(mut s: ModelState) -> ModelState {
    s.w_x.iter_mut().chain(&mut s.w_y).chain(&mut s.w_z).for_each(|w| *w = 0.0);
    s
}

fn sites(n: usize) -> PredictionRequest {
    let pts: Vec<Location> = (0..n)
        .map(|i| Location::new(0.5 + (i % 9) as f64, 0.5 + (i / 9 % 9) as f64 + 0.3))
        .collect();
    let grid = CellGrid {
        origin: Location::new(0.0, 0.0),
        cell_size: 1.0,
    };
    PredictionRequest::at_points((0..n).map(|i| format!("s{i}")).collect(), &pts, &grid).unwrap()
}

#[test]
fn forced_non_forest_gives_zeros() {
    let m = mesh();
    let s = flat(state(&m, 3.0, -50.0, &mut stream(1)));
    let p = Predictor::new(&m, &m, sites(20)).unwrap();
    let mut rng = stream(2);
    for _ in 0..100 {
        let d = predictive_draw(&p, &s, &mut rng).unwrap();
        assert!(d.y.iter().all(|&y| y == 0.0));
        assert!(d.forest.iter().all(|&z| !z));
    }
}

#[test]
fn certain_forest_mean_is_exp_alpha() {
    let m = mesh();
    let mut s = flat(state(&m, 3.0, 50.0, &mut stream(1)));
    s.beta_y = 0.0;
    let p = Predictor::new(&m, &m, sites(1)).unwrap();
    let mut rng = stream(3);
    let y: Vec<f64> = (0..100_000).map(|_| predictive_draw(&p, &s, &mut rng).unwrap().y[0]).collect();
    let want = 3f64.exp();
    assert!((mean(&y) / want - 1.0).abs() < 0.01, "{}", mean(&y));
}

#[test]
fn marginal_mean_is_mean_of_mu_z_mu_y() {
    let m = mesh();
    let p = Predictor::new(&m, &m, sites(5)).unwrap();
    let mut rng = stream(4);
    let states: Vec<ModelState> = (0..200).map(|_| state(&m, 2.0, 0.3, &mut rng)).collect();
    let n_rep = 500;
    let mut sum = [0.0; 5];
    let mut expect = [0.0; 5];
    let mut var = [0.0; 5];
    for s in &states {
        let (mu_y, mu_z) = p.means(s).unwrap();
        for i in 0..5 {
            let e = mu_y[i] * mu_z[i];
            expect[i] += e / states.len() as f64;
            // Var(zy) = μ_z μ_y²(1 + φ) − (μ_z μ_y)²
            var[i] += (mu_z[i] * mu_y[i] * mu_y[i] * (1.0 + s.phi_y) - e * e) / states.len() as f64;
        }
        for _ in 0..n_rep {
            let d = predictive_draw(&p, s, &mut rng).unwrap();
            for i in 0..5 {
                sum[i] += d.y[i];
            }
        }
    }
    let n = (states.len() * n_rep) as f64;
    for i in 0..5 {
        let se = (var[i] / n).sqrt();
        assert!((sum[i] / n - expect[i]).abs() < 4.0 * se, "site {i}: {} vs {}", sum[i] / n, expect[i]);
    }
}

#[test]
fn zero_draws_coincide_with_non_forest() {
    let m = mesh();
    let p = Predictor::new(&m, &m, sites(40)).unwrap();
    let mut rng = stream(5);
    let mut zeros = 0;
    for _ in 0..200 {
        let mut s = state(&m, 1.0, 0.0, &mut rng);
        s.phi_y = 5.0;
        let d = predictive_draw(&p, &s, &mut rng).unwrap();
        for i in 0..40 {
            assert!(d.y[i] >= 0.0);
            assert_eq!(d.y[i] == 0.0, !d.forest[i]);
            assert!(d.y_forest[i] > 0.0);
            zeros += usize::from(!d.forest[i]);
        }
    }
    assert!(zeros > 0);
}

#[test]
fn site_outside_the_mesh_is_rejected() {
    let m = mesh();
    let req = PredictionRequest::cell_centers(vec!["far".into()], &[Location::new(50.0, 50.0)]).unwrap();
    assert!(Predictor::new(&m, &m, req).is_err());
}

#[test]
fn aggregation_examples() {
    assert_eq!(aggregate_area(&[4.0, 4.0, 4.0], &[0, 1, 2]).unwrap(), 4.0);
    assert_eq!(aggregate_area(&[1.0, 7.5], &[1]).unwrap(), 7.5);
    assert!(aggregate_area(&[1.0], &[]).is_err());
    assert!(aggregate_area(&[1.0], &[3]).is_err());

    // averaging independent members cannot increase the variance
    let mut rng = stream(6);
    let scales = [1.0, 2.0, 0.5, 3.0];
    let draws: Vec<Vec<f64>> = (0..20_000)
        .map(|_| scales.iter().map(|&s| sample_gamma(&mut rng, 10.0 * s, 0.5)).collect())
        .collect();
    let area: Vec<f64> = draws.iter().map(|d| aggregate_area(d, &[0, 1, 2, 3]).unwrap()).collect();
    let max_member = (0..4)
        .map(|j| variance(&draws.iter().map(|d| d[j]).collect::<Vec<_>>()))
        .fold(0.0, f64::max);
    assert!(variance(&area) <= max_member);
}

#[test]
fn normal_draws_have_normal_quantiles() {
    let mut rng = stream(7);
    let z: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
    let s = summarize(&z, &[]).unwrap();
    assert!((s.q025 + 1.96).abs() < 0.02 && (s.q975 - 1.96).abs() < 0.02, "{s:?}");
    assert!(s.mean.abs() < 0.02 && (s.sd - 1.0).abs() < 0.02);
}

#[test]
fn cell_prediction_equals_single_member_areas() {
    let m = mesh();
    let centers: Vec<Location> = (0..6).map(|i| Location::new(1.5 + i as f64, 4.5)).collect();
    let ids: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
    let sites = PredictionRequest::cell_centers(ids.clone(), &centers).unwrap();
    let areas = PredictionRequest::subdivided_cells(ids, &centers, 1.0, 1).unwrap();
    let mut rng = stream(8);
    let states: Vec<ModelState> = (0..50).map(|_| state(&m, 2.0, 0.5, &mut rng)).collect();
    let a = predict(&Predictor::new(&m, &m, sites).unwrap(), &states, 11, Execution::Sequential).unwrap();
    let b = predict(&Predictor::new(&m, &m, areas).unwrap(), &states, 11, Execution::Sequential).unwrap();
    // the subdivided request lists its sites first, then one area per cell
    assert_eq!(&b.rows[6..], &a.rows[..]);
    assert_eq!(&b.rows[..6], &a.rows[..]);
}

#[test]
fn parallel_and_sequential_predictions_agree() {
    let m = mesh();
    let p = Predictor::new(&m, &m, sites(30)).unwrap();
    let mut rng = stream(9);
    let states: Vec<ModelState> = (0..40).map(|_| state(&m, 2.0, 0.5, &mut rng)).collect();
    let a = predict(&p, &states, 3, Execution::Sequential).unwrap();
    let b = predict(&p, &states, 3, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn summaries_are_ordered(draws in prop::collection::vec(-1e6..1e6f64, 2..300)) {
        let s = summarize(&draws, &[0.5]).unwrap();
        prop_assert!(s.q025 <= s.q975);
        prop_assert!(s.sd >= 0.0);
        let lo = draws.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= s.q025 && s.q975 <= hi);
        prop_assert!(lo - 1e-6 <= s.mean && s.mean <= hi + 1e-6);
    }
}
