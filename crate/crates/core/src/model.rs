//! Observations, model state, likelihoods and the three latent block
//! conditionals (gradient and negative Hessian).

use std::collections::BTreeSet;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{check_dim, Error, Result};
use crate::mesh::{basis_matrix, fem_matrices, BasisProjector, Location, Mesh};
use crate::sparse::{SparseSym, SymPattern};
use crate::spde::{FieldPrecision, MaternParams, SpdeOperator};

#[derive(Clone, Debug, PartialEq)]
pub struct PlotObservation {
    pub id: String,
    pub location: Location,
    /// Mg/ha; zero marks a non-forested plot.
    pub agbd: f64,
}

impl PlotObservation {
    pub fn new(id: impl Into<String>, location: Location, agbd: f64) -> Result<Self> {
        if !(agbd >= 0.0) || !agbd.is_finite() {
            return Err(Error::InvalidParameter(format!("plot agbd must be finite and >= 0, got {agbd}")));
        }
        if !location.is_finite() {
            return Err(Error::InvalidParameter("plot location must be finite".into()));
        }
        Ok(PlotObservation {
            id: id.into(),
            location,
            agbd,
        })
    }

    pub fn forested(&self) -> bool {
        self.agbd > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellObservation {
    pub cell_id: String,
    pub center: Location,
    pub agbd: f64,
    pub n_tracks: u32,
}

impl CellObservation {
    pub fn new(cell_id: impl Into<String>, center: Location, agbd: f64, n_tracks: u32) -> Result<Self> {
        if !(agbd > 0.0) || !agbd.is_finite() {
            return Err(Error::InvalidParameter(format!("cell agbd must be positive, got {agbd}")));
        }
        if n_tracks < 1 {
            return Err(Error::InvalidParameter("n_tracks must be at least 1".into()));
        }
        if !center.is_finite() {
            return Err(Error::InvalidParameter("cell center must be finite".into()));
        }
        Ok(CellObservation {
            cell_id: cell_id.into(),
            center,
            agbd,
            n_tracks,
        })
    }
}

/// Regular grid of square cells; plots link to the cell that contains them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellGrid {
    pub origin: Location,
    pub cell_size: f64,
}

impl Default for CellGrid {
    fn default() -> Self {
        CellGrid {
            origin: Location::new(0.0, 0.0),
            cell_size: 1.0,
        }
    }
}

impl CellGrid {
    pub fn containing_center(&self, p: Location) -> Location {
        let h = self.cell_size;
        let i = ((p.x - self.origin.x) / h).floor();
        let j = ((p.y - self.origin.y) / h).floor();
        Location::new(self.origin.x + (i + 0.5) * h, self.origin.y + (j + 0.5) * h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub plots: Vec<PlotObservation>,
    pub cells: Vec<CellObservation>,
    pub grid: CellGrid,
}

impl Dataset {
    pub fn new(plots: Vec<PlotObservation>, cells: Vec<CellObservation>, grid: CellGrid) -> Result<Self> {
        if !(grid.cell_size > 0.0) {
            return Err(Error::InvalidParameter("cell size must be positive".into()));
        }
        Ok(Dataset { plots, cells, grid })
    }

    /// Centers of the cells B(s) containing each plot.
    pub fn plot_cell_centers(&self) -> Vec<Location> {
        self.plots.iter().map(|p| self.grid.containing_center(p.location)).collect()
    }

    pub fn forested_indices(&self) -> Vec<usize> {
        (0..self.plots.len()).filter(|&i| self.plots[i].forested()).collect()
    }

    /// Every location the meshes must cover.
    pub fn all_sites(&self) -> Vec<Location> {
        let mut s: Vec<Location> = self.cells.iter().map(|c| c.center).collect();
        s.extend(self.plots.iter().map(|p| p.location));
        s.extend(self.plot_cell_centers());
        s
    }

    pub fn with_plots(&self, plots: Vec<PlotObservation>) -> Dataset {
        Dataset {
            plots,
            cells: self.cells.clone(),
            grid: self.grid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    X,
    Y,
    Z,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::X, Block::Y, Block::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::X => "x",
            Block::Y => "y",
            Block::Z => "z",
        })
    }
}

/// One full state of the sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub alpha_z: f64,
    pub beta_y: f64,
    pub beta_z: f64,
    pub phi_x: f64,
    pub phi_g: f64,
    pub phi_y: f64,
    pub matern_x: MaternParams,
    pub matern_y: MaternParams,
    pub matern_z: MaternParams,
    pub w_x: Vec<f64>,
    pub w_y: Vec<f64>,
    pub w_z: Vec<f64>,
}

impl ModelState {
    pub fn validate(&self, k_x: usize, k_y: usize) -> Result<()> {
        for (name, v) in [("phi_x", self.phi_x), ("phi_g", self.phi_g), ("phi_y", self.phi_y)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("alpha_x", self.alpha_x),
            ("alpha_y", self.alpha_y),
            ("alpha_z", self.alpha_z),
            ("beta_y", self.beta_y),
            ("beta_z", self.beta_z),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite")));
            }
        }
        self.matern_x.validate()?;
        self.matern_y.validate()?;
        self.matern_z.validate()?;
        check_dim(k_x, self.w_x.len())?;
        check_dim(k_y, self.w_y.len())?;
        check_dim(k_y, self.w_z.len())?;
        Ok(())
    }

    pub fn matern(&self, block: Block) -> MaternParams {
        match block {
            Block::X => self.matern_x,
            Block::Y => self.matern_y,
            Block::Z => self.matern_z,
        }
    }

    pub fn set_matern(&mut self, block: Block, p: MaternParams) {
        match block {
            Block::X => self.matern_x = p,
            Block::Y => self.matern_y = p,
            Block::Z => self.matern_z = p,
        }
    }

    pub fn latent(&self, block: Block) -> &[f64] {
        match block {
            Block::X => &self.w_x,
            Block::Y => &self.w_y,
            Block::Z => &self.w_z,
        }
    }

    pub fn latent_mut(&mut self, block: Block) -> &mut Vec<f64> {
        match block {
            Block::X => &mut self.w_x,
            Block::Y => &mut self.w_y,
            Block::Z => &mut self.w_z,
        }
    }

    pub fn intercept(&self, block: Block) -> f64 {
        match block {
            Block::X => self.alpha_x,
            Block::Y => self.alpha_y,
            Block::Z => self.alpha_z,
        }
    }

    /// Packs the block parameters θ (intercept unless `fixed_intercept`,
    /// loading for y/z, then the latent vector).
    pub fn pack(&self, block: Block, fixed_intercept: bool) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.latent(block).len() + 2);
        if !fixed_intercept {
            theta.push(self.intercept(block));
        }
        match block {
            Block::X => {}
            Block::Y => theta.push(self.beta_y),
            Block::Z => theta.push(self.beta_z),
        }
        theta.extend_from_slice(self.latent(block));
        theta
    }

    pub fn unpack(&mut self, block: Block, fixed_intercept: bool, theta: &[f64]) {
        let mut it = theta.iter().copied();
        if !fixed_intercept {
            let a = it.next().expect("theta too short");
            match block {
                Block::X => self.alpha_x = a,
                Block::Y => self.alpha_y = a,
                Block::Z => self.alpha_z = a,
            }
        }
        match block {
            Block::X => {}
            Block::Y => self.beta_y = it.next().expect("theta too short"),
            Block::Z => self.beta_z = it.next().expect("theta too short"),
        }
        let w = self.latent_mut(block);
        w.clear();
        w.extend(it);
    }
}

/// Basis projectors linking observations to mesh vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignSet {
    /// Cell centers onto the x mesh.
    pub a_x_cells: BasisProjector,
    /// Centers of the cells containing each plot onto the x mesh.
    pub a_x_at_plots: BasisProjector,
    /// Plot locations onto the shared y/z mesh.
    pub a_yz_at_plots: BasisProjector,
}

impl DesignSet {
    pub fn new(mesh_x: &Mesh, mesh_yz: &Mesh, data: &Dataset) -> Result<Self> {
        let centers: Vec<Location> = data.cells.iter().map(|c| c.center).collect();
        let plots: Vec<Location> = data.plots.iter().map(|p| p.location).collect();
        Ok(DesignSet {
            a_x_cells: basis_matrix(mesh_x, &centers)?,
            a_x_at_plots: basis_matrix(mesh_x, &data.plot_cell_centers())?,
            a_yz_at_plots: basis_matrix(mesh_yz, &plots)?,
        })
    }

    fn check(&self, data: &Dataset, k_x: usize, k_y: usize) -> Result<()> {
        check_dim(data.cells.len(), self.a_x_cells.n_rows())?;
        check_dim(data.plots.len(), self.a_x_at_plots.n_rows())?;
        check_dim(data.plots.len(), self.a_yz_at_plots.n_rows())?;
        check_dim(k_x, self.a_x_cells.n_cols())?;
        check_dim(k_x, self.a_x_at_plots.n_cols())?;
        check_dim(k_y, self.a_yz_at_plots.n_cols())?;
        Ok(())
    }
}

fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Log-density of a gamma with mean `mu` and dispersion `phi`
/// (shape 1/φ, rate 1/(φμ), so Var = φμ²).
pub fn gamma_logpdf(y: f64, mu: f64, phi: f64) -> Result<f64> {
    if !(y > 0.0 && mu > 0.0 && phi > 0.0) || !(y.is_finite() && mu.is_finite() && phi.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gamma_logpdf needs positive finite arguments, got y={y}, mu={mu}, phi={phi}"
        )));
    }
    Ok(gamma_logpdf_unchecked(y, mu, phi))
}

#[inline]
pub(crate) fn gamma_logpdf_unchecked(y: f64, mu: f64, phi: f64) -> f64 {
    let shape = 1.0 / phi;
    -ln_gamma(shape) - shape * (phi * mu).ln() + (shape - 1.0) * y.ln() - y / (phi * mu)
}

/// Cell dispersion φ_x + φ_g / N.
pub fn total_dispersion(phi_x: f64, phi_g: f64, n_tracks: u32) -> Result<f64> {
    if n_tracks < 1 {
        return Err(Error::InvalidParameter("n_tracks must be at least 1".into()));
    }
    if !(phi_x > 0.0 && phi_g > 0.0) {
        return Err(Error::InvalidParameter("dispersions must be positive".into()));
    }
    Ok(phi_x + phi_g / n_tracks as f64)
}

/// Draws from the gamma with mean `mu` and dispersion `phi`.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, mu: f64, phi: f64) -> f64 {
    Gamma::new(1.0 / phi, phi * mu)
        .expect("gamma parameters must be positive")
        .sample(rng)
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
#[inline]
pub(crate) fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearPredictors {
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub mu_z: Vec<f64>,
}

pub fn linear_predictors(state: &ModelState, design: &DesignSet) -> Result<LinearPredictors> {
    check_dim(design.a_x_cells.n_cols(), state.w_x.len())?;
    check_dim(design.a_yz_at_plots.n_cols(), state.w_y.len())?;
    check_dim(design.a_yz_at_plots.n_cols(), state.w_z.len())?;
    let eta_x_cells = design.a_x_cells.apply(&state.w_x);
    let eta_x_plots = design.a_x_at_plots.apply(&state.w_x);
    let eta_y = design.a_yz_at_plots.apply(&state.w_y);
    let eta_z = design.a_yz_at_plots.apply(&state.w_z);
    Ok(LinearPredictors {
        mu_x: eta_x_cells.iter().map(|e| (state.alpha_x + e).exp()).collect(),
        mu_y: eta_y
            .iter()
            .zip(&eta_x_plots)
            .map(|(ey, ex)| (state.alpha_y + ey + state.beta_y * ex).exp())
            .collect(),
        mu_z: eta_z
            .iter()
            .zip(&eta_x_plots)
            .map(|(ez, ex)| logistic(state.alpha_z + ez + state.beta_z * ex))
            .collect(),
    })
}

/// Records which plots entered a gamma likelihood term.
#[derive(Debug, Default)]
pub struct GammaAudit {
    plots: Mutex<BTreeSet<usize>>,
}

impl GammaAudit {
    fn record(&self, idx: &[usize]) {
        self.plots.lock().unwrap().extend(idx.iter().copied());
    }

    pub fn plots(&self) -> BTreeSet<usize> {
        self.plots.lock().unwrap().clone()
    }
}

/// Data, meshes, projectors and finite-element operators for one fit.
#[derive(Clone, Debug)]
pub struct Model {
    data: Arc<Dataset>,
    mesh_x: Arc<Mesh>,
    mesh_yz: Arc<Mesh>,
    spde_x: Arc<SpdeOperator>,
    spde_yz: Arc<SpdeOperator>,
    design: DesignSet,
    forested: Vec<usize>,
    audit: Option<Arc<GammaAudit>>,
}

impl Model {
    pub fn new(data: Dataset, mesh_x: Mesh, mesh_yz: Mesh) -> Result<Model> {
        let spde_x = Arc::new(SpdeOperator::new(&fem_matrices(&mesh_x))?);
        let spde_yz = Arc::new(SpdeOperator::new(&fem_matrices(&mesh_yz))?);
        Model::from_shared(Arc::new(data), Arc::new(mesh_x), Arc::new(mesh_yz), spde_x, spde_yz)
    }

    /// Builds a model reusing already assembled meshes and operators.
    pub fn from_shared(
        data: Arc<Dataset>,
        mesh_x: Arc<Mesh>,
        mesh_yz: Arc<Mesh>,
        spde_x: Arc<SpdeOperator>,
        spde_yz: Arc<SpdeOperator>,
    ) -> Result<Model> {
        let design = DesignSet::new(&mesh_x, &mesh_yz, &data)?;
        Model::with_design(data, mesh_x, mesh_yz, spde_x, spde_yz, design)
    }

    pub fn with_design(
        data: Arc<Dataset>,
        mesh_x: Arc<Mesh>,
        mesh_yz: Arc<Mesh>,
        spde_x: Arc<SpdeOperator>,
        spde_yz: Arc<SpdeOperator>,
        design: DesignSet,
    ) -> Result<Model> {
        check_dim(mesh_x.n_vertices(), spde_x.n())?;
        check_dim(mesh_yz.n_vertices(), spde_yz.n())?;
        design.check(&data, spde_x.n(), spde_yz.n())?;
        let forested = data.forested_indices();
        Ok(Model {
            data,
            mesh_x,
            mesh_yz,
            spde_x,
            spde_yz,
            design,
            forested,
            audit: None,
        })
    }

    /// Same meshes and operators, different observations.
    pub fn with_data(&self, data: Dataset) -> Result<Model> {
        Model::from_shared(
            Arc::new(data),
            self.mesh_x.clone(),
            self.mesh_yz.clone(),
            self.spde_x.clone(),
            self.spde_yz.clone(),
        )
    }

    pub fn enable_audit(&mut self) -> Arc<GammaAudit> {
        let a = Arc::new(GammaAudit::default());
        self.audit = Some(a.clone());
        a
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn shared_data(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn design(&self) -> &DesignSet {
        &self.design
    }

    pub fn mesh_x(&self) -> &Arc<Mesh> {
        &self.mesh_x
    }

    pub fn mesh_yz(&self) -> &Arc<Mesh> {
        &self.mesh_yz
    }

    pub fn spde(&self, block: Block) -> &Arc<SpdeOperator> {
        match block {
            Block::X => &self.spde_x,
            _ => &self.spde_yz,
        }
    }

    pub fn k_x(&self) -> usize {
        self.spde_x.n()
    }

    pub fn k_y(&self) -> usize {
        self.spde_yz.n()
    }

    pub fn latent_dim(&self, block: Block) -> usize {
        self.spde(block).n()
    }

    /// Plots that carry a gamma term (agbd > 0).
    pub fn gamma_plots(&self) -> &[usize] {
        if let Some(a) = &self.audit {
            a.record(&self.forested);
        }
        &self.forested
    }

    /// Gamma log-likelihood of the forested plots under `state`.
    pub fn plot_gamma_loglik(&self, state: &ModelState, phi_y: f64) -> f64 {
        let ex = self.design.a_x_at_plots.apply(&state.w_x);
        self.gamma_plots()
            .iter()
            .map(|&j| {
                let eta = state.alpha_y + self.design.a_yz_at_plots.apply_row(j, &state.w_y) + state.beta_y * ex[j];
                gamma_logpdf_unchecked(self.data.plots[j].agbd, eta.exp(), phi_y)
            })
            .sum()
    }

    /// Gamma log-likelihood of the cells under `state` with the given dispersions.
    pub fn cell_loglik(&self, state: &ModelState, phi_x: f64, phi_g: f64) -> f64 {
        self.data
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mu = (state.alpha_x + self.design.a_x_cells.apply_row(i, &state.w_x)).exp();
                gamma_logpdf_unchecked(c.agbd, mu, phi_x + phi_g / c.n_tracks as f64)
            })
            .sum()
    }

    /// Per-plot likelihood decomposition: Bernoulli term for every plot, gamma
    /// term only for forested plots.
    pub fn loglik_terms(&self, state: &ModelState) -> Result<Vec<PlotTerms>> {
        let lp = linear_predictors(state, &self.design)?;
        let mut terms: Vec<PlotTerms> = self
            .data
            .plots
            .iter()
            .zip(&lp.mu_z)
            .map(|(p, &mz)| PlotTerms {
                bernoulli: if p.forested() { mz.ln() } else { (1.0 - mz).ln() },
                gamma: None,
            })
            .collect();
        for &j in self.gamma_plots() {
            terms[j].gamma = Some(gamma_logpdf(self.data.plots[j].agbd, lp.mu_y[j], state.phi_y)?);
        }
        Ok(terms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotTerms {
    pub bernoulli: f64,
    pub gamma: Option<f64>,
}

// ---------------------------------------------------------------------------
// Block conditionals

/// A log-concave target with analytic derivatives, as used by Newton's method.
pub trait Conditional {
    fn dim(&self) -> usize;
    /// Log density up to an additive constant; non-finite values mean the
    /// point is unusable.
    fn log_density(&self, theta: &[f64]) -> f64;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
    /// Gradient of the log density and the negative Hessian.
    fn gradient_and_neg_hessian(&self, theta: &[f64]) -> Result<(Vec<f64>, SparseSym)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Cell(usize),
    PlotGamma(usize),
    PlotBernoulli(usize),
}

/// Sparsity layout of one block conditional; depends on the design only.
#[derive(Clone, Debug)]
pub struct BlockStructure {
    block: Block,
    fixed_intercept: bool,
    n_scalar: usize,
    k: usize,
    pattern: Arc<SymPattern>,
    q_slots: Vec<usize>,
    sources: Vec<Source>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    pair_ptr: Vec<usize>,
    pair_slots: Vec<usize>,
}

impl BlockStructure {
    pub fn new(model: &Model, block: Block, fixed_intercept: bool) -> BlockStructure {
        let design = &model.design;
        let n_scalar = match block {
            Block::X => usize::from(!fixed_intercept),
            _ => 1 + usize::from(!fixed_intercept),
        };
        let icol = if fixed_intercept { None } else { Some(0) };
        let k = model.latent_dim(block);
        let mut sources = Vec::new();
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut push_row = |src: Source, scalars: &[usize], latent: &[usize]| {
            sources.push(src);
            cols.extend_from_slice(scalars);
            cols.extend(latent.iter().map(|&c| c + n_scalar));
            row_ptr.push(cols.len());
        };
        let intercept: Vec<usize> = icol.into_iter().collect();
        match block {
            Block::X => {
                for i in 0..model.data.cells.len() {
                    push_row(Source::Cell(i), &intercept, design.a_x_cells.row_cols(i));
                }
                for &j in model.gamma_plots() {
                    push_row(Source::PlotGamma(j), &[], design.a_x_at_plots.row_cols(j));
                }
                for j in 0..model.data.plots.len() {
                    push_row(Source::PlotBernoulli(j), &[], design.a_x_at_plots.row_cols(j));
                }
            }
            Block::Y | Block::Z => {
                let mut scalars = intercept.clone();
                scalars.push(n_scalar - 1);
                let rows: Vec<usize> = if block == Block::Y {
                    model.gamma_plots().to_vec()
                } else {
                    (0..model.data.plots.len()).collect()
                };
                for j in rows {
                    let src = if block == Block::Y {
                        Source::PlotGamma(j)
                    } else {
                        Source::PlotBernoulli(j)
                    };
                    push_row(src, &scalars, design.a_yz_at_plots.row_cols(j));
                }
            }
        }

        let q_pattern = model.spde(block).pattern();
        let dim = n_scalar + k;
        let mut entries: Vec<(usize, usize)> = q_pattern
            .entries()
            .map(|(i, j)| (i + n_scalar, j + n_scalar))
            .collect();
        for r in 0..sources.len() {
            let c = &cols[row_ptr[r]..row_ptr[r + 1]];
            for a in 0..c.len() {
                for b in a..c.len() {
                    entries.push((c[a].min(c[b]), c[a].max(c[b])));
                }
            }
        }
        let pattern = Arc::new(SymPattern::from_entries(dim, entries));
        let q_slots = q_pattern
            .entries()
            .map(|(i, j)| pattern.slot(i + n_scalar, j + n_scalar).expect("prior entry in pattern"))
            .collect();
        let mut pair_ptr = vec![0];
        let mut pair_slots = Vec::new();
        for r in 0..sources.len() {
            let c = &cols[row_ptr[r]..row_ptr[r + 1]];
            for a in 0..c.len() {
                for b in a..c.len() {
                    pair_slots.push(pattern.slot(c[a].min(c[b]), c[a].max(c[b])).expect("row pair in pattern"));
                }
            }
            pair_ptr.push(pair_slots.len());
        }
        BlockStructure {
            block,
            fixed_intercept,
            n_scalar,
            k,
            pattern,
            q_slots,
            sources,
            row_ptr,
            cols,
            pair_ptr,
            pair_slots,
        }
    }

    pub fn block(&self) -> Block {
        self.block
    }

    pub fn fixed_intercept(&self) -> bool {
        self.fixed_intercept
    }

    pub fn dim(&self) -> usize {
        self.n_scalar + self.k
    }

    pub fn n_rows(&self) -> usize {
        self.sources.len()
    }

    pub fn pattern(&self) -> &Arc<SymPattern> {
        &self.pattern
    }

    /// Binds the structure to a state and a prior precision for the block's
    /// latent field.
    pub fn conditional<'a>(
        &'a self,
        model: &Model,
        state: &ModelState,
        q: &'a FieldPrecision,
    ) -> Result<BlockConditional<'a>> {
        check_dim(self.k, q.n())?;
        let design = &model.design;
        let data = &model.data;
        let ex_plots = design.a_x_at_plots.apply(&state.w_x);
        let (ey, ez) = match self.block {
            Block::X => (
                design.a_yz_at_plots.apply(&state.w_y),
                design.a_yz_at_plots.apply(&state.w_z),
            ),
            _ => (Vec::new(), Vec::new()),
        };
        let n = self.sources.len();
        let mut vals = Vec::with_capacity(self.cols.len());
        let mut offset = Vec::with_capacity(n);
        let mut obs = Vec::with_capacity(n);
        let mut inv_phi = Vec::with_capacity(n);
        let mut gamma = Vec::with_capacity(n);
        let fixed = self.fixed_intercept;
        for &src in &self.sources {
            match (self.block, src) {
                (Block::X, Source::Cell(i)) => {
                    if !fixed {
                        vals.push(1.0);
                    }
                    vals.extend_from_slice(design.a_x_cells.row_weights(i));
                    offset.push(if fixed { state.alpha_x } else { 0.0 });
                    let c = &data.cells[i];
                    obs.push(c.agbd);
                    inv_phi.push(1.0 / (state.phi_x + state.phi_g / c.n_tracks as f64));
                    gamma.push(true);
                }
                (Block::X, Source::PlotGamma(j)) => {
                    vals.extend(design.a_x_at_plots.row_weights(j).iter().map(|w| state.beta_y * w));
                    offset.push(state.alpha_y + ey[j]);
                    obs.push(data.plots[j].agbd);
                    inv_phi.push(1.0 / state.phi_y);
                    gamma.push(true);
                }
                (Block::X, Source::PlotBernoulli(j)) => {
                    vals.extend(design.a_x_at_plots.row_weights(j).iter().map(|w| state.beta_z * w));
                    offset.push(state.alpha_z + ez[j]);
                    obs.push(if data.plots[j].forested() { 1.0 } else { 0.0 });
                    inv_phi.push(1.0);
                    gamma.push(false);
                }
                (_, Source::PlotGamma(j)) | (_, Source::PlotBernoulli(j)) => {
                    let is_gamma = matches!(src, Source::PlotGamma(_));
                    if !fixed {
                        vals.push(1.0);
                    }
                    vals.push(ex_plots[j]);
                    vals.extend_from_slice(design.a_yz_at_plots.row_weights(j));
                    offset.push(if fixed { state.intercept(self.block) } else { 0.0 });
                    if is_gamma {
                        obs.push(data.plots[j].agbd);
                        inv_phi.push(1.0 / state.phi_y);
                    } else {
                        obs.push(if data.plots[j].forested() { 1.0 } else { 0.0 });
                        inv_phi.push(1.0);
                    }
                    gamma.push(is_gamma);
                }
                (_, Source::Cell(_)) => unreachable!("cells only load on block x"),
            }
        }
        debug_assert_eq!(vals.len(), self.cols.len());
        Ok(BlockConditional {
            s: self,
            q,
            vals,
            offset,
            obs,
            inv_phi,
            gamma,
        })
    }
}

/// Log conditional posterior of one block at fixed values of everything else.
#[derive(Clone, Debug)]
pub struct BlockConditional<'a> {
    s: &'a BlockStructure,
    q: &'a FieldPrecision,
    vals: Vec<f64>,
    offset: Vec<f64>,
    obs: Vec<f64>,
    inv_phi: Vec<f64>,
    gamma: Vec<bool>,
}

impl BlockConditional<'_> {
    #[inline]
    fn eta(&self, r: usize, theta: &[f64]) -> f64 {
        let (lo, hi) = (self.s.row_ptr[r], self.s.row_ptr[r + 1]);
        let mut e = self.offset[r];
        for p in lo..hi {
            e += self.vals[p] * theta[self.s.cols[p]];
        }
        e
    }

    /// Log-likelihood contribution, score and curvature of row `r` at η.
    #[inline]
    fn row_terms(&self, r: usize, eta: f64) -> (f64, f64, f64) {
        if self.gamma[r] {
            let d = self.obs[r] * (-eta).exp();
            let ip = self.inv_phi[r];
            (ip * (-eta - d), ip * (d - 1.0), ip * d)
        } else {
            let mu = logistic(eta);
            (self.obs[r] * eta - log1p_exp(eta), self.obs[r] - mu, mu * (1.0 - mu))
        }
    }

    fn overflow(&self) -> Error {
        Error::NumericalOverflow {
            block: self.s.block,
        }
    }

    fn prior_grad(&self, theta: &[f64]) -> Vec<f64> {
        let ns = self.s.n_scalar;
        let qw = self.q.mul_vec(&theta[ns..]);
        let mut g = vec![0.0; theta.len()];
        for (gi, v) in g[ns..].iter_mut().zip(qw) {
            *gi = -v;
        }
        g
    }

    /// Linear predictor of every likelihood row.
    pub fn linear_predictor(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.s.n_rows()).map(|r| self.eta(r, theta)).collect()
    }
}

impl Conditional for BlockConditional<'_> {
    fn dim(&self) -> usize {
        self.s.dim()
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        let ns = self.s.n_scalar;
        let mut f = -0.5 * self.q.quad_form(&theta[ns..]);
        for r in 0..self.s.n_rows() {
            f += self.row_terms(r, self.eta(r, theta)).0;
        }
        f
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        let mut g = self.prior_grad(theta);
        for r in 0..self.s.n_rows() {
            let (_, score, _) = self.row_terms(r, self.eta(r, theta));
            for p in self.s.row_ptr[r]..self.s.row_ptr[r + 1] {
                g[self.s.cols[p]] += score * self.vals[p];
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(self.overflow());
        }
        Ok(g)
    }

    fn gradient_and_neg_hessian(&self, theta: &[f64]) -> Result<(Vec<f64>, SparseSym)> {
        check_dim(self.dim(), theta.len())?;
        let mut g = self.prior_grad(theta);
        let mut h = SparseSym::zeros(self.s.pattern.clone());
        {
            let hv = h.values_mut();
            for (&slot, &qv) in self.s.q_slots.iter().zip(self.q.matrix().values()) {
                hv[slot] += qv;
            }
            for r in 0..self.s.n_rows() {
                let (_, score, curv) = self.row_terms(r, self.eta(r, theta));
                let (lo, hi) = (self.s.row_ptr[r], self.s.row_ptr[r + 1]);
                for p in lo..hi {
                    g[self.s.cols[p]] += score * self.vals[p];
                }
                let mut slot = self.s.pair_ptr[r];
                for a in lo..hi {
                    let ca = curv * self.vals[a];
                    for b in a..hi {
                        hv[self.s.pair_slots[slot]] += ca * self.vals[b];
                        slot += 1;
                    }
                }
            }
        }
        if g.iter().chain(h.values()).any(|v| !v.is_finite()) {
            return Err(self.overflow());
        }
        Ok((g, h))
    }
}

/// Gradient and negative Hessian of one block's log conditional at the
/// current state, with prior precision `q` for the block's latent field.
pub fn block_gradient_hessian(
    model: &Model,
    block: Block,
    state: &ModelState,
    q: &FieldPrecision,
) -> Result<(Vec<f64>, SparseSym)> {
    let s = BlockStructure::new(model, block, false);
    let cond = s.conditional(model, state, q)?;
    cond.gradient_and_neg_hessian(&state.pack(block, false))
}
