//! Posterior predictive simulation at arbitrary sites and aggregation of
//! site draws to areas.

use rand::Rng;

use crate::diagnostics::quantile_sorted;
use crate::error::{Error, Result};
use crate::mesh::{basis_matrix, BasisProjector, Location, Mesh};
use crate::model::{logistic, sample_gamma, CellGrid, ModelState};
use crate::par::{try_map_range, Execution};
use crate::rng::substream;

/// A prediction site: its location (used on the y/z mesh) and the center of
/// the grid cell containing it (used on the x mesh).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSite {
    pub id: String,
    pub location: Location,
    pub cell_center: Location,
}

/// A named group of site indices whose draws are averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaPartition {
    pub name: String,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PredictionRequest {
    pub sites: Vec<PredictionSite>,
    pub areas: Vec<AreaPartition>,
}

impl PredictionRequest {
    pub fn new(sites: Vec<PredictionSite>, areas: Vec<AreaPartition>) -> Result<Self> {
        for a in &areas {
            if a.members.is_empty() {
                return Err(Error::InvalidParameter(format!("area {} has no member sites", a.name)));
            }
            if let Some(&i) = a.members.iter().find(|&&i| i >= sites.len()) {
                return Err(Error::InvalidParameter(format!("area {} refers to missing site {i}", a.name)));
            }
        }
        Ok(PredictionRequest { sites, areas })
    }

    /// Sites at the given locations, each paired with its grid cell center.
    pub fn at_points(ids: Vec<String>, points: &[Location], grid: &CellGrid) -> Result<Self> {
        if ids.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                actual: ids.len(),
            });
        }
        let sites = ids
            .into_iter()
            .zip(points)
            .map(|(id, &p)| PredictionSite {
                id,
                location: p,
                cell_center: grid.containing_center(p),
            })
            .collect();
        Ok(PredictionRequest { sites, areas: Vec::new() })
    }

    /// Cell-resolution request: one site at each cell center (p = 1).
    pub fn cell_centers(ids: Vec<String>, centers: &[Location]) -> Result<Self> {
        if ids.len() != centers.len() {
            return Err(Error::DimensionMismatch {
                expected: centers.len(),
                actual: ids.len(),
            });
        }
        let sites = ids
            .into_iter()
            .zip(centers)
            .map(|(id, &c)| PredictionSite {
                id,
                location: c,
                cell_center: c,
            })
            .collect();
        Ok(PredictionRequest { sites, areas: Vec::new() })
    }

    /// Each listed cell split into an `m × m` sub-grid of sites; one area per
    /// cell averages its p = m² members.
    pub fn subdivided_cells(ids: Vec<String>, centers: &[Location], cell_size: f64, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter("sub-grid size must be at least 1".into()));
        }
        let mut sites = Vec::new();
        let mut areas = Vec::new();
        for (id, &c) in ids.into_iter().zip(centers) {
            let start = sites.len();
            for j in 0..m {
                for i in 0..m {
                    let off = |k: usize| ((k as f64 + 0.5) / m as f64 - 0.5) * cell_size;
                    sites.push(PredictionSite {
                        id: format!("{id}.{}", j * m + i),
                        location: Location::new(c.x + off(i), c.y + off(j)),
                        cell_center: c,
                    });
                }
            }
            areas.push(AreaPartition {
                name: id,
                members: (start..sites.len()).collect(),
            });
        }
        PredictionRequest::new(sites, areas)
    }
}

/// Basis rows for a request on a fitted pair of meshes.
#[derive(Clone, Debug)]
pub struct Predictor {
    request: PredictionRequest,
    a_x: BasisProjector,
    a_yz: BasisProjector,
}

/// One posterior predictive draw at every site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteDraws {
    /// y = z · (y | z = 1).
    pub y: Vec<f64>,
    /// The forest indicator z.
    pub forest: Vec<bool>,
    /// The draw of y given z = 1, used for forested-plot intervals.
    pub y_forest: Vec<f64>,
    /// Forest probability μ_z.
    pub p_forest: Vec<f64>,
}

impl Predictor {
    pub fn new(mesh_x: &Mesh, mesh_yz: &Mesh, request: PredictionRequest) -> Result<Self> {
        let centers: Vec<Location> = request.sites.iter().map(|s| s.cell_center).collect();
        let points: Vec<Location> = request.sites.iter().map(|s| s.location).collect();
        Ok(Predictor {
            a_x: basis_matrix(mesh_x, &centers)?,
            a_yz: basis_matrix(mesh_yz, &points)?,
            request,
        })
    }

    pub fn request(&self) -> &PredictionRequest {
        &self.request
    }

    pub fn n_sites(&self) -> usize {
        self.request.sites.len()
    }

    /// μ_y and μ_z at every site.
    pub fn means(&self, s: &ModelState) -> Result<(Vec<f64>, Vec<f64>)> {
        crate::error::check_dim(self.a_x.n_cols(), s.w_x.len())?;
        crate::error::check_dim(self.a_yz.n_cols(), s.w_y.len())?;
        crate::error::check_dim(self.a_yz.n_cols(), s.w_z.len())?;
        let ex = self.a_x.apply(&s.w_x);
        let ey = self.a_yz.apply(&s.w_y);
        let ez = self.a_yz.apply(&s.w_z);
        let mu_y = ey.iter().zip(&ex).map(|(a, b)| (s.alpha_y + a + s.beta_y * b).exp()).collect();
        let mu_z = ez.iter().zip(&ex).map(|(a, b)| logistic(s.alpha_z + a + s.beta_z * b)).collect();
        Ok((mu_y, mu_z))
    }
}

/// Draws z ~ Bernoulli(μ_z) and y | z = 1 ~ Gamma(μ_y, φ_y) at every site and
/// returns their product.
pub fn predictive_draw<R: Rng + ?Sized>(predictor: &Predictor, sample: &ModelState, rng: &mut R) -> Result<SiteDraws> {
    let (mu_y, mu_z) = predictor.means(sample)?;
    let n = mu_y.len();
    let mut out = SiteDraws {
        y: Vec::with_capacity(n),
        forest: Vec::with_capacity(n),
        y_forest: Vec::with_capacity(n),
        p_forest: mu_z,
    };
    for (i, &m) in mu_y.iter().enumerate() {
        let z = rng.random::<f64>() < out.p_forest[i];
        // a gamma draw can underflow to 0; keep y > 0 whenever z = 1
        let g = sample_gamma(rng, m, sample.phi_y).max(f64::MIN_POSITIVE);
        out.forest.push(z);
        out.y_forest.push(g);
        out.y.push(if z { g } else { 0.0 });
    }
    Ok(out)
}

/// Mean of the member draws for one posterior sample.
pub fn aggregate_area(draws: &[f64], partition: &[usize]) -> Result<f64> {
    if partition.is_empty() {
        return Err(Error::InvalidParameter("area partition is empty".into()));
    }
    let mut s = 0.0;
    for &i in partition {
        s += *draws.get(i).ok_or_else(|| Error::InvalidParameter(format!("site index {i} out of range")))?;
    }
    Ok(s / partition.len() as f64)
}

/// Summary of the predictive draws for one site or area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub p_forest: f64,
}

/// Empirical mean, sd and equal-tail 95% interval of `draws`, with the mean
/// of the forest probabilities.
pub fn summarize(draws: &[f64], p_forest: &[f64]) -> Result<Summary> {
    if draws.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 draws to summarize, got {}",
            draws.len()
        )));
    }
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = crate::diagnostics::mean(draws);
    let sd = crate::diagnostics::variance(draws).max(0.0).sqrt();
    let p = if p_forest.is_empty() {
        f64::NAN
    } else {
        crate::diagnostics::mean(p_forest).clamp(0.0, 1.0)
    };
    Ok(Summary {
        mean,
        sd,
        q025: quantile_sorted(&s, 0.025),
        q975: quantile_sorted(&s, 0.975),
        p_forest: p,
    })
}

/// Per-row summaries: every site (the p = 1 case) followed by every area.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSummary {
    pub ids: Vec<String>,
    pub rows: Vec<Summary>,
}

/// Predictive draws for every posterior sample; sample `k` uses substream
/// `k` of `seed`.
pub fn draw_all(predictor: &Predictor, samples: &[ModelState], seed: u64, exec: Execution) -> Result<Vec<SiteDraws>> {
    try_map_range(exec, samples.len(), |k| {
        predictive_draw(predictor, &samples[k], &mut substream(seed, k as u64))
    })
}

/// Summaries over all samples. Sites are treated as areas of one member so
/// both outputs share one code path.
pub fn summarize_draws(request: &PredictionRequest, draws: &[SiteDraws]) -> Result<PredictionSummary> {
    let mut groups: Vec<(String, Vec<usize>)> = request
        .sites
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), vec![i]))
        .collect();
    groups.extend(request.areas.iter().map(|a| (a.name.clone(), a.members.clone())));
    let mut rows = Vec::with_capacity(groups.len());
    let mut ids = Vec::with_capacity(groups.len());
    for (id, members) in groups {
        let y: Vec<f64> = draws
            .iter()
            .map(|d| aggregate_area(&d.y, &members))
            .collect::<Result<_>>()?;
        let p: Vec<f64> = draws
            .iter()
            .map(|d| aggregate_area(&d.p_forest, &members))
            .collect::<Result<_>>()?;
        rows.push(summarize(&y, &p)?);
        ids.push(id);
    }
    Ok(PredictionSummary { ids, rows })
}

pub fn predict(predictor: &Predictor, samples: &[ModelState], seed: u64, exec: Execution) -> Result<PredictionSummary> {
    let draws = draw_all(predictor, samples, seed, exec)?;
    summarize_draws(predictor.request(), &draws)
}
