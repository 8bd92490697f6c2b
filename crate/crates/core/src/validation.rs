//! Out-of-sample checks: k-fold cross-validation of the plot predictions
//! and the coordinate-jitter sensitivity study.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::diagnostics::{quantile_sorted, variance};
use crate::error::{Error, Result};
use crate::mesh::{basis_matrix, Location};
use crate::model::{Block, BlockStructure, Dataset, DesignSet, Model, ModelState};
use crate::par::{try_map_range, Execution};
use crate::predict::{draw_all, PredictionRequest, Predictor};
use crate::rng::{derive_seed, stream, substream};
use crate::sampler::{newton_mode, run_chain, NewtonConfig, PosteriorSamples, Priors, SamplerConfig};
use crate::sparse::FactorCache;
use crate::spde::FieldPrecision;

/// Agbd threshold that splits the coverage report.
pub const COVERAGE_SPLIT: f64 = 100.0;
pub const CALIBRATION_BINS: usize = 20;
/// Family-wise level of the calibration bands (Bonferroni over bins).
pub const CALIBRATION_LEVEL: f64 = 0.95;

/// Fold of every plot: a seeded shuffle dealt round-robin, so fold sizes
/// differ by at most one.
pub fn fold_assignment(n_plots: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 folds, got {folds}")));
    }
    if n_plots < folds {
        return Err(Error::InsufficientData(format!("{n_plots} plots cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n_plots).collect();
    order.shuffle(&mut stream(seed));
    let mut fold = vec![0; n_plots];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    Ok(fold)
}

/// Posterior predictive summary of one held-out plot.
#[derive(Clone, Debug, PartialEq)]
pub struct Holdout {
    pub plot: usize,
    pub fold: usize,
    pub agbd: f64,
    pub forested: bool,
    /// Expected probability of forest.
    pub p_forest: f64,
    /// Equal-tail 95% interval of y given z = 1.
    pub q025: f64,
    pub q975: f64,
}

impl Holdout {
    pub fn covered(&self) -> bool {
        self.q025 <= self.agbd && self.agbd <= self.q975
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBin {
    /// Midpoint of the predicted-probability range of the bin.
    pub midpoint: f64,
    pub mean_predicted: f64,
    pub fraction: f64,
    pub count: usize,
    /// Band for the forest fraction around `mean_predicted`.
    pub lower: f64,
    pub upper: f64,
}

impl CalibrationBin {
    pub fn inside(&self) -> bool {
        self.lower <= self.fraction && self.fraction <= self.upper
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    pub bins: Vec<CalibrationBin>,
}

/// Holdouts sorted by predicted probability and cut into `n_bins`
/// equal-count bins. Each bin carries the central binomial interval of its
/// forest fraction at level 1 − (1 − `level`)/`n_bins`.
pub fn calibration_table(holdouts: &[Holdout], n_bins: usize, level: f64) -> Result<CalibrationTable> {
    if n_bins == 0 || holdouts.is_empty() {
        return Err(Error::InsufficientData("calibration needs holdouts and bins".into()));
    }
    let n_bins = n_bins.min(holdouts.len());
    let mut h: Vec<&Holdout> = holdouts.iter().collect();
    h.sort_by(|a, b| a.p_forest.total_cmp(&b.p_forest).then(a.plot.cmp(&b.plot)));
    let alpha = (1.0 - level) / n_bins as f64;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let lo = b * h.len() / n_bins;
        let hi = (b + 1) * h.len() / n_bins;
        let part = &h[lo..hi];
        let n = part.len();
        let mean_p = part.iter().map(|x| x.p_forest).sum::<f64>() / n as f64;
        let hits = part.iter().filter(|x| x.forested).count();
        let (lower, upper) = binomial_band(n as u64, mean_p, alpha);
        bins.push(CalibrationBin {
            midpoint: 0.5 * (part[0].p_forest + part[n - 1].p_forest),
            mean_predicted: mean_p,
            fraction: hits as f64 / n as f64,
            count: n,
            lower,
            upper,
        });
    }
    Ok(CalibrationTable { bins })
}

/// Central interval of Binomial(n, p)/n with total tail mass `alpha`.
fn binomial_band(n: u64, p: f64, alpha: f64) -> (f64, f64) {
    let p = p.clamp(0.0, 1.0);
    match Binomial::new(p, n) {
        Ok(d) => (
            d.inverse_cdf(0.5 * alpha) as f64 / n as f64,
            d.inverse_cdf(1.0 - 0.5 * alpha) as f64 / n as f64,
        ),
        Err(_) => (0.0, 1.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageRow {
    pub stratum: String,
    pub n: usize,
    pub covered: usize,
}

impl CoverageRow {
    pub fn coverage(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.covered as f64 / self.n as f64
        }
    }
}

/// Interval coverage among forested holdouts: overall, below and at or
/// above [`COVERAGE_SPLIT`].
pub fn coverage_report(holdouts: &[Holdout]) -> Vec<CoverageRow> {
    let row = |name: &str, keep: &dyn Fn(&Holdout) -> bool| {
        let sel: Vec<&Holdout> = holdouts.iter().filter(|h| h.forested && keep(h)).collect();
        CoverageRow {
            stratum: name.to_string(),
            n: sel.len(),
            covered: sel.iter().filter(|h| h.covered()).count(),
        }
    };
    vec![
        row("all", &|_| true),
        row("below_100", &|h| h.agbd < COVERAGE_SPLIT),
        row("above_100", &|h| h.agbd >= COVERAGE_SPLIT),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub holdouts: Vec<Holdout>,
    pub calibration: CalibrationTable,
    pub coverage: Vec<CoverageRow>,
    pub warnings: Vec<String>,
}

/// K-fold cross-validation. Each fold refits the model on the remaining
/// plots and all cells with a seed derived from `config.seed`, then
/// summarizes predictive draws at its held-out plots. Folds run under `exec`.
pub fn cross_validate(
    model: &Model,
    priors: &Priors,
    config: &SamplerConfig,
    folds: usize,
    exec: Execution,
) -> Result<CvReport> {
    let data = model.data();
    let fold = fold_assignment(data.plots.len(), folds, derive_seed(config.seed, u64::MAX))?;
    let per_fold = try_map_range(exec, folds, |k| {
        let held: Vec<usize> = (0..fold.len()).filter(|&i| fold[i] == k).collect();
        let fit_model = model.with_data(training_data(data, &fold, k))?;
        let cfg = SamplerConfig {
            seed: derive_seed(config.seed, k as u64),
            ..config.clone()
        };
        let samples = run_chain(&fit_model, priors, &cfg)?;
        let ids = held.iter().map(|&i| data.plots[i].id.clone()).collect();
        let points: Vec<Location> = held.iter().map(|&i| data.plots[i].location).collect();
        let request = PredictionRequest::at_points(ids, &points, &data.grid)?;
        let predictor = Predictor::new(model.mesh_x(), model.mesh_yz(), request)?;
        let draws = draw_all(&predictor, &samples.states, derive_seed(cfg.seed, 1), Execution::Sequential)?;
        if draws.len() < 2 {
            return Err(Error::InsufficientData(format!("fold {k}: fewer than 2 posterior samples")));
        }
        let mut out = Vec::with_capacity(held.len());
        for (j, &i) in held.iter().enumerate() {
            let mut y: Vec<f64> = draws.iter().map(|d| d.y_forest[j]).collect();
            y.sort_by(f64::total_cmp);
            let p = draws.iter().map(|d| d.p_forest[j]).sum::<f64>() / draws.len() as f64;
            let plot = &data.plots[i];
            out.push(Holdout {
                plot: i,
                fold: k,
                agbd: plot.agbd,
                forested: plot.forested(),
                p_forest: p,
                q025: quantile_sorted(&y, 0.025),
                q975: quantile_sorted(&y, 0.975),
            });
        }
        Ok(out)
    })?;
    let mut warnings = Vec::new();
    for (k, f) in per_fold.iter().enumerate() {
        if !f.iter().any(|h| h.forested) {
            warnings.push(format!("fold {k} has no forested holdout plots; it adds nothing to coverage"));
        }
    }
    let mut holdouts: Vec<Holdout> = per_fold.into_iter().flatten().collect();
    holdouts.sort_by_key(|h| h.plot);
    let calibration = calibration_table(&holdouts, CALIBRATION_BINS, CALIBRATION_LEVEL)?;
    let coverage = coverage_report(&holdouts);
    Ok(CvReport {
        holdouts,
        calibration,
        coverage,
        warnings,
    })
}

/// Which parts of the design follow the jittered coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum JitterMode {
    /// Only the y/z basis rows at the plots move; each plot keeps its
    /// original satellite cell.
    #[default]
    BasisOnly,
    /// The containing cell is recomputed from the jittered location too.
    BasisAndCell,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterConfig {
    pub iterations: usize,
    pub radius: f64,
    pub mode: JitterMode,
    pub newton: NewtonConfig,
    pub seed: u64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            iterations: 100,
            radius: 1.0,
            mode: JitterMode::default(),
            newton: NewtonConfig::default(),
            seed: 1,
        }
    }
}

/// Spread of one conditional-mode quantity across jitter iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterRow {
    pub quantity: String,
    /// max − min across iterations; for a vector, the largest over entries.
    pub range: f64,
    /// Posterior sd from the chain; for a vector, the sd at the entry with
    /// the largest ratio.
    pub posterior_sd: f64,
    /// range / posterior_sd; for a vector, the largest over entries.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JitterReport {
    pub rows: Vec<JitterRow>,
    /// Posterior sample everything else is fixed at.
    pub sample_index: usize,
    pub completed: usize,
    /// Iterations whose Newton solve failed; excluded from the ranges.
    pub failed: Vec<usize>,
}

/// Uniform draw on a disk of radius `r` around `p`.
pub fn jitter_point<R: Rng + ?Sized>(p: Location, r: f64, rng: &mut R) -> Location {
    let rad = r * rng.random::<f64>().sqrt();
    let ang = std::f64::consts::TAU * rng.random::<f64>();
    Location::new(p.x + rad * ang.cos(), p.y + rad * ang.sin())
}

/// Conditional modes of the y and z blocks (loading, field) at `state` with
/// the plot locations replaced by `points`. Intercepts stay at `state`.
fn jittered_modes(model: &Model, state: &ModelState, points: &[Location], cfg: &JitterConfig) -> Result<[Vec<f64>; 2]> {
    let data = model.data();
    let plots = data
        .plots
        .iter()
        .zip(points)
        .map(|(p, &loc)| crate::model::PlotObservation {
            location: loc,
            ..p.clone()
        })
        .collect();
    let jittered = Arc::new(data.with_plots(plots));
    let design = match cfg.mode {
        JitterMode::BasisAndCell => DesignSet::new(model.mesh_x(), model.mesh_yz(), &jittered)?,
        JitterMode::BasisOnly => DesignSet {
            a_yz_at_plots: basis_matrix(model.mesh_yz(), points)?,
            ..model.design().clone()
        },
    };
    let m = Model::with_design(
        jittered,
        model.mesh_x().clone(),
        model.mesh_yz().clone(),
        model.spde(Block::X).clone(),
        model.spde(Block::Y).clone(),
        design,
    )?;
    let mut out = [Vec::new(), Vec::new()];
    for (slot, b) in [Block::Y, Block::Z].into_iter().enumerate() {
        let s = BlockStructure::new(&m, b, true);
        let q = FieldPrecision::matern(m.spde(b), state.matern(b));
        let cond = s.conditional(&m, state, &q)?;
        let res = newton_mode(&cond, &state.pack(b, true), &cfg.newton, &mut FactorCache::new())?;
        out[slot] = res.mode;
    }
    Ok(out)
}

/// Re-jitters every plot location `cfg.iterations` times and records how
/// much the conditional modes of (β_y, w_y) and (β_z, w_z) move, with
/// everything else fixed at one randomly chosen posterior sample.
pub fn jitter_study(model: &Model, samples: &PosteriorSamples, cfg: &JitterConfig, exec: Execution) -> Result<JitterReport> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData("jitter study needs at least 2 posterior samples".into()));
    }
    if !(cfg.radius >= 0.0) || !cfg.radius.is_finite() {
        return Err(Error::InvalidParameter(format!("jitter radius must be >= 0, got {}", cfg.radius)));
    }
    let sample_index = stream(derive_seed(cfg.seed, u64::MAX)).random_range(0..samples.len());
    let state = &samples.states[sample_index];
    let original: Vec<Location> = model.data().plots.iter().map(|p| p.location).collect();
    let results = crate::par::map_range(exec, cfg.iterations, |it| {
        let mut r = substream(cfg.seed, it as u64);
        let pts: Vec<Location> = original.iter().map(|&p| jitter_point(p, cfg.radius, &mut r)).collect();
        jittered_modes(model, state, &pts, cfg)
    });
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (it, r) in results.into_iter().enumerate() {
        match r {
            Ok(m) => ok.push(m),
            Err(Error::NonConvergence { .. }) | Err(Error::Indefinite { .. }) | Err(Error::NumericalOverflow { .. }) => {
                failed.push(it)
            }
            Err(e) => return Err(e),
        }
    }
    if ok.is_empty() {
        return Err(Error::InsufficientData("every jitter iteration failed".into()));
    }
    let k = model.k_y();
    let sd_of = |f: &dyn Fn(&ModelState) -> f64| {
        let v: Vec<f64> = samples.states.iter().map(f).collect();
        variance(&v).max(0.0).sqrt()
    };
    let mut rows = Vec::new();
    for (slot, name) in ["y", "z"].iter().enumerate() {
        let block = if slot == 0 { Block::Y } else { Block::Z };
        let range = |j: usize| {
            let (lo, hi) = ok
                .iter()
                .map(|m| m[slot][j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            hi - lo
        };
        let scalar = |q: String, j: usize, sd: f64| JitterRow {
            quantity: q,
            range: range(j),
            posterior_sd: sd,
            ratio: range(j) / sd,
        };
        let beta = move |s: &ModelState| if slot == 0 { s.beta_y } else { s.beta_z };
        rows.push(scalar(format!("beta_{name}"), 0, sd_of(&beta)));
        let mut max_range = 0.0f64;
        let mut worst = (0.0, f64::NEG_INFINITY);
        for i in 0..k {
            let r = range(1 + i);
            max_range = max_range.max(r);
            let sd = sd_of(&|s| s.latent(block)[i]);
            let ratio = r / sd;
            if ratio > worst.1 || worst.1.is_nan() {
                worst = (sd, ratio);
            }
        }
        rows.push(JitterRow {
            quantity: format!("w_{name}"),
            range: max_range,
            posterior_sd: worst.0,
            ratio: worst.1,
        });
    }
    Ok(JitterReport {
        rows,
        sample_index,
        completed: ok.len(),
        failed,
    })
}

/// Dataset with the plots of fold `k` removed.
pub fn training_data(data: &Dataset, fold: &[usize], k: usize) -> Dataset {
    data.with_plots(
        data.plots
            .iter()
            .zip(fold)
            .filter(|(_, &f)| f != k)
            .map(|(p, _)| p.clone())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_plots() {
        let f = fold_assignment(23, 10, 5).unwrap();
        let mut counts = [0; 10];
        f.iter().for_each(|&k| counts[k] += 1);
        assert!(counts.iter().all(|&c| c == 2 || c == 3));
        assert_eq!(f, fold_assignment(23, 10, 5).unwrap());
        assert_ne!(f, fold_assignment(23, 10, 6).unwrap());
        assert!(fold_assignment(5, 10, 1).is_err());
        assert!(fold_assignment(5, 1, 1).is_err());
    }

    #[test]
    fn band_contains_expectation() {
        let (lo, hi) = binomial_band(100, 0.3, 0.05);
        assert!(lo < 0.3 && hi > 0.3);
        assert!(lo > 0.18 && hi < 0.42);
        assert_eq!(binomial_band(50, 0.0, 0.05), (0.0, 0.0));
    }

    #[test]
    fn jitter_disk_is_bounded() {
        let mut r = stream(3);
        for _ in 0..1000 {
            let q = jitter_point(Location::new(1.0, 2.0), 1.0, &mut r);
            assert!(q.dist(Location::new(1.0, 2.0)) <= 1.0);
        }
        assert_eq!(jitter_point(Location::new(1.0, 2.0), 0.0, &mut r), Location::new(1.0, 2.0));
    }
}
