use jzig::mesh::Location;
use jzig::model::{CellGrid, Dataset, Model, PlotObservation};
use jzig::par::Execution;
use jzig::rng::stream;
use jzig::sampler::{run_chain, PosteriorSamples, SamplerConfig};
use jzig::synth::{desk_priors, simulate_dataset, Simulation, TrueConfig};
use jzig::validation::*;
use proptest::prelude::*;
use rand::Rng;

fn short_config() -> SamplerConfig {
    SamplerConfig {
        n_iterations: 120,
        n_burnin: 40,
        thin: 2,
        range_cap_factor: 2.0,
        ..SamplerConfig::default()
    }
}

fn tiny(n_plots: usize) -> Simulation {
    let cfg = TrueConfig {
        n_plots,
        ..TrueConfig::tiny()
    };
    simulate_dataset(&cfg, &mut stream(1)).unwrap()
}

/// Meshes extend past the grid so jittered plots stay inside them.
fn tiny_buffered(n_plots: usize) -> Simulation {
    let cfg = TrueConfig {
        n_plots,
        buffer_x: 3.0,
        buffer_yz: 3.0,
        ..TrueConfig::tiny()
    };
    simulate_dataset(&cfg, &mut stream(1)).unwrap()
}

fn fitted(sim: &Simulation) -> (Model, PosteriorSamples) {
    let model = sim.model().unwrap();
    let post = run_chain(&model, &desk_priors(), &short_config()).unwrap();
    (model, post)
}

proptest! {
    #[test]
    fn folds_partition_the_plots(n in 2usize..300, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let f = fold_assignment(n, k, seed).unwrap();
        prop_assert_eq!(f.len(), n);
        let mut sizes = vec![0usize; k];
        for &v in &f {
            prop_assert!(v < k);
            sizes[v] += 1;
        }
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(fold_assignment(n, k, seed).unwrap(), f);
    }
}

#[test]
fn fold_errors() {
    assert!(fold_assignment(10, 1, 0).is_err());
    assert!(fold_assignment(3, 4, 0).is_err());
}

#[test]
fn calibrated_predictions_stay_inside_the_bands() {
    let mut rng = stream(2);
    let holdouts: Vec<Holdout> = (0..4000)
        .map(|i| {
            let p: f64 = rng.random();
            Holdout {
                plot: i,
                fold: 0,
                agbd: 0.0,
                forested: rng.random::<f64>() < p,
                p_forest: p,
                q025: 0.0,
                q975: 0.0,
            }
        })
        .collect();
    let t = calibration_table(&holdouts, CALIBRATION_BINS, CALIBRATION_LEVEL).unwrap();
    assert_eq!(t.bins.len(), 20);
    assert_eq!(t.bins.iter().map(|b| b.count).sum::<usize>(), 4000);
    assert!(t.bins.iter().all(|b| b.inside()), "{:?}", t.bins);
    assert!(t.bins.windows(2).all(|w| w[0].mean_predicted <= w[1].mean_predicted));

    // systematically overconfident predictions fall outside
    let shifted: Vec<Holdout> = holdouts
        .iter()
        .map(|h| Holdout {
            p_forest: (h.p_forest + 0.3).min(1.0),
            ..h.clone()
        })
        .collect();
    let t = calibration_table(&shifted, CALIBRATION_BINS, CALIBRATION_LEVEL).unwrap();
    assert!(t.bins.iter().any(|b| !b.inside()));
}

#[test]
fn coverage_strata() {
    let h = |agbd: f64, lo: f64, hi: f64| Holdout {
        plot: 0,
        fold: 0,
        agbd,
        forested: agbd > 0.0,
        p_forest: 0.5,
        q025: lo,
        q975: hi,
    };
    let rows = coverage_report(&[h(50.0, 10.0, 90.0), h(150.0, 10.0, 90.0), h(120.0, 100.0, 200.0), h(0.0, 1.0, 2.0)]);
    let get = |s: &str| rows.iter().find(|r| r.stratum == s).unwrap().clone();
    assert_eq!((get("all").n, get("all").covered), (3, 2));
    assert_eq!((get("below_100").n, get("below_100").covered), (1, 1));
    assert_eq!((get("above_100").n, get("above_100").covered), (2, 1));
}

#[test]
fn leave_one_out_on_a_small_toy() {
    let sim = tiny(12);
    let model = sim.model().unwrap();
    let report = cross_validate(&model, &desk_priors(), &short_config(), 12, Execution::Parallel).unwrap();
    assert_eq!(report.holdouts.len(), 12);
    for (i, h) in report.holdouts.iter().enumerate() {
        assert_eq!(h.plot, i);
        assert!(h.q025 <= h.q975);
        assert!((0.0..=1.0).contains(&h.p_forest));
    }
    // every non-forested singleton fold is reported
    let empty = report.holdouts.iter().filter(|h| !h.forested).count();
    assert_eq!(report.warnings.len(), empty);
}

#[test]
fn cross_validation_is_deterministic_across_execution_modes() {
    let sim = tiny(30);
    let model = sim.model().unwrap();
    let a = cross_validate(&model, &desk_priors(), &short_config(), 3, Execution::Sequential).unwrap();
    let b = cross_validate(&model, &desk_priors(), &short_config(), 3, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_radius_jitter_changes_nothing() {
    let sim = tiny(40);
    let (model, post) = fitted(&sim);
    let cfg = JitterConfig {
        iterations: 5,
        radius: 0.0,
        ..JitterConfig::default()
    };
    let r = jitter_study(&model, &post, &cfg, Execution::Parallel).unwrap();
    assert_eq!(r.completed, 5);
    assert!(r.rows.iter().all(|row| row.range == 0.0), "{:?}", r.rows);
    let names: Vec<&str> = r.rows.iter().map(|r| r.quantity.as_str()).collect();
    assert_eq!(names, ["beta_y", "w_y", "beta_z", "w_z"]);
}

#[test]
fn jitter_report_is_reproducible() {
    let sim = tiny_buffered(40);
    let (model, post) = fitted(&sim);
    let cfg = JitterConfig {
        iterations: 8,
        radius: 1.0,
        ..JitterConfig::default()
    };
    let a = jitter_study(&model, &post, &cfg, Execution::Parallel).unwrap();
    let b = jitter_study(&model, &post, &cfg, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert!(a.rows.iter().any(|r| r.range > 0.0));
    let c = jitter_study(&model, &post, &JitterConfig { mode: JitterMode::BasisAndCell, ..cfg }, Execution::Parallel).unwrap();
    assert_eq!(c.rows.len(), 4);
}

#[test]
fn jitter_points_stay_in_the_disk() {
    let mut rng = stream(3);
    let c = Location::new(5.0, -2.0);
    let pts: Vec<Location> = (0..10_000).map(|_| jitter_point(c, 1.0, &mut rng)).collect();
    assert!(pts.iter().all(|p| p.dist(c) <= 1.0));
    // uniform on the disk: P(r < 1/2) = 1/4
    let inner = pts.iter().filter(|p| p.dist(c) < 0.5).count() as f64 / 1e4;
    assert!((inner - 0.25).abs() < 0.02, "{inner}");
}

#[test]
fn training_data_drops_one_fold() {
    let plots = (0..6)
        .map(|i| PlotObservation::new(format!("p{i}"), Location::new(i as f64, 0.0), i as f64).unwrap())
        .collect();
    let data = Dataset::new(plots, vec![], CellGrid::default()).unwrap();
    let t = training_data(&data, &[0, 1, 0, 1, 2, 2], 1);
    let ids: Vec<&str> = t.plots.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, ["p0", "p2", "p4", "p5"]);
}
