use std::sync::Arc;

use jzig::diagnostics::{ks_distance, mean, quantile};
use jzig::mesh::{build_mesh, Location, Mesh};
use jzig::model::*;
use jzig::rng::stream;
use jzig::sampler::*;
use jzig::sparse::{FactorCache, SparseSym};
use jzig::spde::{FieldPrecision, MaternParams, SpdeOperator};
use jzig::synth::{sample_field, simulate_dataset, TrueConfig};
use jzig::{Error, Result};
use nalgebra::DMatrix;

fn square(side: f64) -> Vec<Location> {
    vec![
        Location::new(0.0, 0.0),
        Location::new(side, 0.0),
        Location::new(side, side),
        Location::new(0.0, side),
    ]
}

fn toy_mesh() -> Mesh {
    build_mesh(&square(10.0), 5.0, 0.0).unwrap()
}

fn zero_state(model: &Model) -> ModelState {
    ModelState {
        alpha_x: 0.0,
        alpha_y: 0.0,
        alpha_z: 0.0,
        beta_y: 0.0,
        beta_z: 0.0,
        phi_x: 1.0,
        phi_g: 1.0,
        phi_y: 1.0,
        matern_x: MaternParams::new(1.0, 4.0).unwrap(),
        matern_y: MaternParams::new(1.0, 4.0).unwrap(),
        matern_z: MaternParams::new(1.0, 4.0).unwrap(),
        w_x: vec![0.0; model.k_x()],
        w_y: vec![0.0; model.k_y()],
        w_z: vec![0.0; model.k_y()],
    }
}

fn empty_model() -> Model {
    let data = Dataset::new(vec![], vec![], CellGrid::default()).unwrap();
    Model::new(data, toy_mesh(), toy_mesh()).unwrap()
}

/// Trapezoid rule on [a, b] with n panels.
fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(a) + f(b)))
}

/// Gaussian-prior 1-D or 2-D target given by closures.
struct Toy<F, G> {
    dim: usize,
    f: F,
    g: G,
}

impl<F: Fn(&[f64]) -> f64, G: Fn(&[f64]) -> (Vec<f64>, Vec<f64>)> Conditional for Toy<F, G> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, t: &[f64]) -> f64 {
        (self.f)(t)
    }
    fn gradient(&self, t: &[f64]) -> Result<Vec<f64>> {
        Ok((self.g)(t).0)
    }
    fn gradient_and_neg_hessian(&self, t: &[f64]) -> Result<(Vec<f64>, SparseSym)> {
        let (g, h) = (self.g)(t);
        Ok((g, SparseSym::from_dense(self.dim, &h)))
    }
}

#[test]
fn pc_prior_rates_and_tails() {
    let p = PcPrior::new(2.0, 0.01, 9.0, 0.01).unwrap();
    assert!((p.lambda_sigma() - std::f64::consts::LN_10).abs() < 1e-12);
    assert!((p.lambda_rho() - 41.4465).abs() < 1e-4);
    // marginal densities of the product-form prior
    let ls = p.lambda_sigma();
    let lr = p.lambda_rho();
    let tail_sigma = integrate(|s| ls * (-ls * s).exp(), 2.0, 40.0, 400_000);
    assert!((tail_sigma - 0.01).abs() < 1e-6, "{tail_sigma}");
    let head_rho = integrate(|r| if r == 0.0 { 0.0 } else { lr / (r * r) * (-lr / r).exp() }, 0.0, 9.0, 400_000);
    assert!((head_rho - 0.01).abs() < 1e-6, "{head_rho}");
    let m = MaternParams::new(1.0, 20.0).unwrap();
    let want = lr.ln() - 2.0 * 20f64.ln() - lr / 20.0 + ls.ln() - ls;
    assert!((pc_prior_logdensity(&m, &p).unwrap() - want).abs() < 1e-12);
}

#[test]
fn newton_on_a_gaussian_takes_one_step() {
    let model = empty_model();
    let mut s = zero_state(&model);
    s.w_x.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64).sin());
    let q = FieldPrecision::matern(model.spde(Block::X), s.matern_x);
    let bs = BlockStructure::new(&model, Block::X, true);
    let cond = bs.conditional(&model, &s, &q).unwrap();
    let res = newton_mode(&cond, &s.w_x, &NewtonConfig::default(), &mut FactorCache::new()).unwrap();
    assert_eq!(res.iterations, 1);
    assert!(res.mode.iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn newton_matches_grid_search_in_two_dimensions() {
    // logistic regression with two coefficients and a N(0, I) prior
    let xs = [(1.0, 0.3), (0.4, -1.2), (-0.8, 0.5), (1.5, 1.1), (-0.2, -0.7), (0.9, -0.1)];
    let ys = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let f = |t: &[f64]| {
        let mut v = -0.5 * (t[0] * t[0] + t[1] * t[1]);
        for (x, y) in xs.iter().zip(ys) {
            let e = t[0] * x.0 + t[1] * x.1;
            v += y * e - (1.0 + e.exp()).ln();
        }
        v
    };
    let g = |t: &[f64]| {
        let mut g = vec![-t[0], -t[1]];
        let mut h = vec![1.0, 0.0, 0.0, 1.0];
        for (x, y) in xs.iter().zip(ys) {
            let e = t[0] * x.0 + t[1] * x.1;
            let mu = logistic(e);
            g[0] += (y - mu) * x.0;
            g[1] += (y - mu) * x.1;
            let c = mu * (1.0 - mu);
            h[0] += c * x.0 * x.0;
            h[1] += c * x.0 * x.1;
            h[2] += c * x.0 * x.1;
            h[3] += c * x.1 * x.1;
        }
        (g, h)
    };
    let toy = Toy { dim: 2, f, g };
    let res = newton_mode(&toy, &[0.0, 0.0], &NewtonConfig::default(), &mut FactorCache::new()).unwrap();
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..=3000 {
        for j in 0..=3000 {
            let t = [-1.5 + i as f64 * 1e-3, -1.5 + j as f64 * 1e-3];
            let v = f(&t);
            if v > best.0 {
                best = (v, t[0], t[1]);
            }
        }
    }
    assert!((res.mode[0] - best.1).abs() <= 1e-3 && (res.mode[1] - best.2).abs() <= 1e-3, "{:?} vs {best:?}", res.mode);
}

#[test]
fn damping_keeps_the_trace_monotone() {
    // f = −sqrt(1 + x²): the undamped iteration maps x to −x³
    let toy = Toy {
        dim: 1,
        f: |t: &[f64]| -(1.0 + t[0] * t[0]).sqrt(),
        g: |t: &[f64]| {
            let r = (1.0 + t[0] * t[0]).sqrt();
            (vec![-t[0] / r], vec![1.0 / (r * r * r)])
        },
    };
    let undamped = NewtonConfig {
        damping: false,
        ..NewtonConfig::default()
    };
    // the relative stopping rule can fire far from the mode once |f| is huge
    let r = newton_mode(&toy, &[3.0], &undamped, &mut FactorCache::new());
    assert!(r.map_or(true, |r| r.mode[0].abs() > 1e6));
    let res = newton_mode(&toy, &[3.0], &NewtonConfig::default(), &mut FactorCache::new()).unwrap();
    assert!(res.mode[0].abs() < 1e-6);
    assert!(res.trace.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn prior_only_laplace_draws_have_prior_covariance() {
    let model = empty_model();
    let mut s = zero_state(&model);
    let q = FieldPrecision::matern(model.spde(Block::X), s.matern_x);
    let bs = BlockStructure::new(&model, Block::X, true);
    let cov = q.matrix().to_nalgebra().try_inverse().unwrap();
    let k = model.k_x();
    let mut acc = DMatrix::<f64>::zeros(k, k);
    let mut rng = stream(4);
    let mut cache = FactorCache::new();
    let n = 10_000;
    for _ in 0..n {
        laplace_update(&model, &bs, &mut s, &q, &NewtonConfig::default(), &mut cache, &mut rng).unwrap();
        let w = DMatrix::from_column_slice(k, 1, &s.w_x);
        acc += &w * w.transpose();
    }
    acc /= n as f64;
    let scale = cov.diagonal().max();
    let err = (&acc - &cov).abs().max();
    assert!(err < 0.05 * scale, "{err} vs {scale}");

    let mut a = zero_state(&model);
    let mut b = zero_state(&model);
    laplace_update(&model, &bs, &mut a, &q, &NewtonConfig::default(), &mut FactorCache::new(), &mut stream(9)).unwrap();
    laplace_update(&model, &bs, &mut b, &q, &NewtonConfig::default(), &mut FactorCache::new(), &mut stream(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn one_observation_laplace_mean_matches_grid_mode() {
    let mesh = Mesh::new(square(2.0)[..3].to_vec(), vec![[0, 1, 2]]).unwrap();
    let cell = CellObservation::new("c", Location::new(1.2, 0.5), 30.0, 4).unwrap();
    let data = Dataset::new(vec![], vec![cell], CellGrid::default()).unwrap();
    let model = Model::new(data, mesh.clone(), mesh).unwrap();
    let mut s = zero_state(&model);
    s.alpha_x = 2.0;
    s.phi_x = 0.2;
    s.phi_g = 1.0;
    let q = FieldPrecision::matern(model.spde(Block::X), s.matern_x);
    let bs = BlockStructure::new(&model, Block::X, true);
    let cond = bs.conditional(&model, &s, &q).unwrap();
    let res = newton_mode(&cond, &s.w_x, &NewtonConfig::default(), &mut FactorCache::new()).unwrap();
    // the mode satisfies Q w = score · a, so it lies on the ray Q⁻¹a
    let a: Vec<f64> = model.design().a_x_cells.row(0).fold(vec![0.0; 3], |mut v, (j, w)| {
        v[j] = w;
        v
    });
    let qinv = q.matrix().to_nalgebra().try_inverse().unwrap();
    let dir = &qinv * nalgebra::DVector::from_vec(a);
    let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
    for i in 0..=200_000 {
        let t = -10.0 + i as f64 * 1e-4;
        let w: Vec<f64> = dir.iter().map(|d| t * d).collect();
        let v = cond.log_density(&w);
        if v > best {
            best = v;
            arg = t;
        }
    }
    for (m, d) in res.mode.iter().zip(dir.iter()) {
        assert!((m - arg * d).abs() < 1e-3, "{m} vs {}", arg * d);
    }
    let mut rng = stream(3);
    let n = 20_000;
    let mut mean_draw = [0.0; 3];
    for _ in 0..n {
        for (m, v) in mean_draw.iter_mut().zip(laplace_draw(&res, &mut rng)) {
            *m += v / n as f64;
        }
    }
    for (m, r) in mean_draw.iter().zip(&res.mode) {
        assert!((m - r).abs() < 0.05);
    }
}

fn plot_toy(n: usize, mu: f64, phi: f64, seed: u64) -> (Model, ModelState) {
    let mut rng = stream(seed);
    let plots = (0..n)
        .map(|i| {
            let p = Location::new(1.0 + 8.0 * (i as f64 / n as f64), 5.0);
            PlotObservation::new(format!("p{i}"), p, sample_gamma(&mut rng, mu, phi)).unwrap()
        })
        .collect();
    let data = Dataset::new(plots, vec![], CellGrid::default()).unwrap();
    let model = Model::new(data, toy_mesh(), toy_mesh()).unwrap();
    let mut s = zero_state(&model);
    s.alpha_y = mu.ln();
    (model, s)
}

#[test]
fn phi_y_chain_matches_quadrature() {
    let (model, mut s) = plot_toy(40, 20.0, 0.64, 1);
    let ys: Vec<f64> = model.data().plots.iter().map(|p| p.agbd).collect();
    let logpost = |l: f64| ys.iter().map(|&y| gamma_logpdf(y, 20.0, l.exp()).unwrap()).sum::<f64>();
    let (lo, hi, m) = (-4.0f64, 2.0f64, 60_000);
    let h = (hi - lo) / m as f64;
    let grid: Vec<f64> = (0..=m).map(|i| lo + i as f64 * h).collect();
    let lmax = grid.iter().map(|&l| logpost(l)).fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = grid.iter().map(|&l| (logpost(l) - lmax).exp()).collect();
    let mut cdf = vec![0.0; dens.len()];
    for i in 1..dens.len() {
        cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i] + dens[i - 1]);
    }
    let total = *cdf.last().unwrap();
    let cdf_at = |l: f64| {
        let x = ((l - lo) / h).clamp(0.0, m as f64);
        let i = (x.floor() as usize).min(m - 1);
        (cdf[i] + (x - i as f64) * (cdf[i + 1] - cdf[i])) / total
    };

    let mut prop = RwProposal::new(1, 0.1, 0.35);
    let mut rng = stream(2);
    for _ in 0..5_000 {
        mh_update_phi_y(&model, &mut s, &mut prop, &mut rng).unwrap();
    }
    prop.freeze();
    let mut draws = Vec::with_capacity(100_000);
    for _ in 0..100_000 {
        mh_update_phi_y(&model, &mut s, &mut prop, &mut rng).unwrap();
        draws.push(s.phi_y.ln());
    }
    let ks = ks_distance(&draws, cdf_at);
    assert!(ks < 0.02, "KS {ks}");
    let acc = prop.acceptance_rate();
    assert!((0.2..=0.5).contains(&acc), "acceptance {acc}");
}

#[test]
fn phi_xg_chain_matches_quadrature() {
    let mut rng = stream(5);
    let mu = 15.0;
    let cells: Vec<CellObservation> = (0..300)
        .map(|i| {
            let n = 1 + (i % 38) as u32;
            let y = sample_gamma(&mut rng, mu, 0.3 + 3.0 / n as f64);
            CellObservation::new(format!("c{i}"), Location::new(0.5 + (i % 10) as f64, 0.5 + (i / 30) as f64), y, n).unwrap()
        })
        .collect();
    let data = Dataset::new(vec![], cells, CellGrid::default()).unwrap();
    let model = Model::new(data, toy_mesh(), toy_mesh()).unwrap();
    let mut s = zero_state(&model);
    s.alpha_x = mu.ln();
    let obs: Vec<(f64, f64)> = model.data().cells.iter().map(|c| (c.agbd, 1.0 / c.n_tracks as f64)).collect();
    let logpost = |a: f64, b: f64| {
        let (px, pg) = (a.exp(), b.exp());
        obs.iter().map(|&(y, inv)| gamma_logpdf(y, mu, px + pg * inv).unwrap()).sum::<f64>()
    };
    // 2-D quadrature on the log scale, then marginal CDFs
    let (alo, ahi, blo, bhi, m) = (-5.0f64, 1.0f64, -2.0f64, 3.0f64, 600);
    let (ha, hb) = ((ahi - alo) / m as f64, (bhi - blo) / m as f64);
    let mut lp = vec![0.0; (m + 1) * (m + 1)];
    for i in 0..=m {
        for j in 0..=m {
            lp[i * (m + 1) + j] = logpost(alo + i as f64 * ha, blo + j as f64 * hb);
        }
    }
    let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lp.iter().map(|v| (v - top).exp()).collect();
    let marg_a: Vec<f64> = (0..=m).map(|i| (0..=m).map(|j| w[i * (m + 1) + j]).sum()).collect();
    let marg_b: Vec<f64> = (0..=m).map(|j| (0..=m).map(|i| w[i * (m + 1) + j]).sum()).collect();
    let cdf_from = |marg: &[f64]| {
        let mut c = vec![0.0; marg.len()];
        for i in 1..marg.len() {
            c[i] = c[i - 1] + 0.5 * (marg[i] + marg[i - 1]);
        }
        let t = *c.last().unwrap();
        c.iter().map(|v| v / t).collect::<Vec<f64>>()
    };
    let (ca, cb) = (cdf_from(&marg_a), cdf_from(&marg_b));
    let interp = |c: &[f64], lo: f64, h: f64, x: f64| {
        let u = ((x - lo) / h).clamp(0.0, m as f64);
        let i = (u.floor() as usize).min(m - 1);
        c[i] + (u - i as f64) * (c[i + 1] - c[i])
    };

    let mut prop = RwProposal::new(2, 0.1, 0.3);
    let mut rng = stream(6);
    for it in 0..10_000 {
        mh_update_phi_x_g(&model, &mut s, &mut prop, &mut rng).unwrap();
        if it >= 5_000 && it % 50 == 0 {
            prop.adopt_empirical_covariance();
        }
    }
    prop.freeze();
    let (mut da, mut db) = (Vec::new(), Vec::new());
    for _ in 0..100_000 {
        mh_update_phi_x_g(&model, &mut s, &mut prop, &mut rng).unwrap();
        da.push(s.phi_x.ln());
        db.push(s.phi_g.ln());
    }
    let ka = ks_distance(&da, |x| interp(&ca, alo, ha, x));
    let kb = ks_distance(&db, |x| interp(&cb, blo, hb, x));
    assert!(ka < 0.03 && kb < 0.03, "KS {ka} {kb}");
    let acc = prop.acceptance_rate();
    assert!((0.15..=0.45).contains(&acc), "acceptance {acc}");
}

#[test]
fn identity_proposals_are_accepted() {
    let (model, mut s) = plot_toy(10, 20.0, 0.64, 3);
    let mut rng = stream(1);
    let mut p1 = RwProposal::new(1, 0.0, 0.35);
    let mut p2 = RwProposal::new(2, 0.0, 0.35);
    assert!(mh_update_phi_y(&model, &mut s, &mut p1, &mut rng).unwrap());
    assert!(mh_update_phi_x_g(&model, &mut s, &mut p2, &mut rng).unwrap());
    let mut p3 = RwProposal::new(2, 0.0, 0.35);
    let prior = Priors::default().x;
    let (out, acc) = mh_update_matern(
        Some(model.spde(Block::X)),
        &s.w_x,
        s.matern_x,
        &mut None,
        &prior,
        &mut p3,
        &mut FactorCache::new(),
        &mut rng,
    )
    .unwrap();
    assert!(acc);
    assert_eq!(out, s.matern_x);
}

#[test]
fn matern_update_recovers_the_generating_parameters() {
    let mesh = build_mesh(&square(40.0), 1.5, 0.0).unwrap();
    let op = Arc::new(SpdeOperator::new(&jzig::mesh::fem_matrices(&mesh)).unwrap());
    let truth = MaternParams::new(1.5, 8.0).unwrap();
    let w = sample_field(&op, &truth, &mut stream(12)).unwrap();
    let prior = PcPrior::new(2.0, 0.01, 5.0, 0.01).unwrap();
    let mut p = prior.median();
    let mut unit = None;
    let mut prop = RwProposal::new(2, 0.1, 0.35);
    let mut cache = FactorCache::new();
    let mut rng = stream(13);
    let (mut ss, mut rs) = (Vec::new(), Vec::new());
    for it in 0..3_000 {
        p = mh_update_matern(Some(&op), &w, p, &mut unit, &prior, &mut prop, &mut cache, &mut rng).unwrap().0;
        if it == 1_000 {
            prop.freeze();
        }
        if it >= 1_000 {
            ss.push(p.sigma);
            rs.push(p.rho);
        }
    }
    assert!((mean(&ss) / truth.sigma - 1.0).abs() < 0.15, "σ {}", mean(&ss));
    assert!((mean(&rs) / truth.rho - 1.0).abs() < 0.15, "ρ {}", mean(&rs));
}

#[test]
fn prior_only_matern_chain_reproduces_the_pc_prior() {
    let prior = PcPrior::new(1.0, 0.5, 30.0, 0.01).unwrap();
    let mut p = prior.median();
    let mut prop = RwProposal::new(2, 1.0, 0.35);
    let mut rng = stream(21);
    let mut cache = FactorCache::new();
    let (mut ss, mut rs) = (Vec::new(), Vec::new());
    for it in 0..205_000 {
        p = mh_update_matern(None, &[], p, &mut None, &prior, &mut prop, &mut cache, &mut rng).unwrap().0;
        if it == 5_000 {
            prop.freeze();
        }
        if it >= 5_000 {
            ss.push(p.sigma);
            rs.push(p.rho);
        }
    }
    for q in [0.05, 0.25, 0.5, 0.75, 0.95] {
        let fs = prior.cdf_sigma(quantile(&ss, q));
        let fr = prior.cdf_rho(quantile(&rs, q));
        assert!((fs - q).abs() < 0.02 && (fr - q).abs() < 0.02, "{q}: {fs} {fr}");
    }
}

fn tiny_model() -> Model {
    simulate_dataset(&TrueConfig::tiny(), &mut stream(1)).unwrap().model().unwrap()
}

#[test]
fn chains_are_deterministic_and_positive() {
    let model = tiny_model();
    let cfg = SamplerConfig {
        n_iterations: 300,
        n_burnin: 100,
        thin: 2,
        range_cap_factor: 2.0,
        ..SamplerConfig::default()
    };
    let priors = jzig::synth::desk_priors();
    let a = run_chain(&model, &priors, &cfg).unwrap();
    let b = run_chain(&model, &priors, &cfg).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.newton_iterations, b.newton_iterations);
    assert_eq!(a.len(), 100);
    for s in &a.states {
        s.validate(model.k_x(), model.k_y()).unwrap();
    }
    let other = run_chain(&model, &priors, &SamplerConfig { seed: 2, ..cfg.clone() }).unwrap();
    assert_ne!(a.states, other.states);

    // Newton effort settles after the start: compare the first and last quarter
    let n = a.newton_iterations.len();
    for b in 0..3 {
        let mut first: Vec<f64> = a.newton_iterations[..n / 4].iter().map(|v| v[b] as f64).collect();
        let mut last: Vec<f64> = a.newton_iterations[3 * n / 4..].iter().map(|v| v[b] as f64).collect();
        first.sort_by(f64::total_cmp);
        last.sort_by(f64::total_cmp);
        assert!(last[last.len() / 2] <= first[first.len() / 2], "block {b}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let model = tiny_model();
    let priors = jzig::synth::desk_priors();
    let bad = SamplerConfig {
        n_iterations: 10,
        n_burnin: 10,
        ..SamplerConfig::default()
    };
    assert!(matches!(run_chain(&model, &priors, &bad), Err(Error::Config(_))));
}
