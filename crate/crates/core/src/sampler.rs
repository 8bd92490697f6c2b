//! Laplace-within-Gibbs sampler: Newton-mode Gaussian block updates for the
//! latent blocks, log-scale random-walk Metropolis for dispersions and
//! Matérn parameters.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{
    gamma_logpdf_unchecked, logistic, Block, BlockConditional, BlockStructure, Conditional, Model, ModelState,
};
use crate::par::{self, Execution};
use crate::rng::{self, Stream};
use crate::sparse::{CholeskyFactor, FactorCache, SparseSym};
use crate::spde::{FieldPrecision, MaternParams, SpdeOperator};

/// Penalized-complexity prior on (σ, ρ) from the tail statements
/// P(σ > σ0) = α_σ and P(ρ < ρ0) = α_ρ, optionally truncated to ρ ≤ `rho_max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcPrior {
    pub sigma0: f64,
    pub alpha_sigma: f64,
    pub rho0: f64,
    pub alpha_rho: f64,
    pub rho_max: f64,
}

impl PcPrior {
    pub fn new(sigma0: f64, alpha_sigma: f64, rho0: f64, alpha_rho: f64) -> Result<Self> {
        let p = PcPrior {
            sigma0,
            alpha_sigma,
            rho0,
            alpha_rho,
            rho_max: f64::INFINITY,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |a: f64| a > 0.0 && a < 1.0;
        if !(self.sigma0 > 0.0 && self.rho0 > 0.0) || !(self.sigma0.is_finite() && self.rho0.is_finite()) {
            return Err(Error::InvalidParameter("PC prior thresholds must be positive".into()));
        }
        if !prob(self.alpha_sigma) || !prob(self.alpha_rho) {
            return Err(Error::InvalidParameter("PC prior tail probabilities must lie in (0, 1)".into()));
        }
        if !(self.rho_max > 0.0) {
            return Err(Error::InvalidParameter("range cap must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda_sigma(&self) -> f64 {
        -self.alpha_sigma.ln() / self.sigma0
    }

    pub fn lambda_rho(&self) -> f64 {
        -self.alpha_rho.ln() * self.rho0
    }

    pub fn median_sigma(&self) -> f64 {
        std::f64::consts::LN_2 / self.lambda_sigma()
    }

    /// Median of the range prior, truncated at `rho_max` when finite.
    pub fn median_rho(&self) -> f64 {
        let l = self.lambda_rho();
        l / (std::f64::consts::LN_2 + l / self.rho_max)
    }

    pub fn median(&self) -> MaternParams {
        MaternParams {
            sigma: self.median_sigma(),
            rho: self.median_rho(),
        }
    }

    pub fn cdf_sigma(&self, s: f64) -> f64 {
        1.0 - (-self.lambda_sigma() * s.max(0.0)).exp()
    }

    pub fn cdf_rho(&self, r: f64) -> f64 {
        if r <= 0.0 {
            0.0
        } else {
            (-self.lambda_rho() / r).exp()
        }
    }

    pub fn quantile_sigma(&self, p: f64) -> f64 {
        -(1.0 - p).ln() / self.lambda_sigma()
    }

    pub fn quantile_rho(&self, p: f64) -> f64 {
        -self.lambda_rho() / p.ln()
    }

    /// Log density of the untruncated prior, or −∞ above the range cap
    /// (the truncation constant is dropped).
    pub fn log_density(&self, params: &MaternParams) -> f64 {
        if params.rho > self.rho_max {
            return f64::NEG_INFINITY;
        }
        let (ls, lr) = (self.lambda_sigma(), self.lambda_rho());
        lr.ln() - 2.0 * params.rho.ln() - lr / params.rho + ls.ln() - ls * params.sigma
    }

    /// Independent draw; σ is exponential and 1/ρ is exponential.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> MaternParams {
        let e1: f64 = rng.sample(rand_distr::Exp1);
        let e2: f64 = rng.sample(rand_distr::Exp1);
        MaternParams {
            sigma: e1 / self.lambda_sigma(),
            rho: self.lambda_rho() / e2,
        }
    }

    pub fn with_range_scale(&self, f: f64) -> PcPrior {
        PcPrior {
            rho0: self.rho0 * f,
            ..*self
        }
    }

    pub fn with_range_cap(&self, rho_max: f64) -> PcPrior {
        PcPrior { rho_max, ..*self }
    }
}

pub fn pc_prior_logdensity(params: &MaternParams, prior: &PcPrior) -> Result<f64> {
    params.validate()?;
    prior.validate()?;
    Ok(prior.log_density(params))
}

/// PC priors for the three fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Priors {
    pub x: PcPrior,
    pub y: PcPrior,
    pub z: PcPrior,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            x: PcPrior::new(2.0, 0.01, 9.0, 0.01).unwrap(),
            y: PcPrior::new(0.5, 0.01, 60.0, 0.01).unwrap(),
            z: PcPrior::new(1.0, 0.5, 60.0, 0.01).unwrap(),
        }
    }
}

impl Priors {
    pub fn get(&self, block: Block) -> &PcPrior {
        match block {
            Block::X => &self.x,
            Block::Y => &self.y,
            Block::Z => &self.z,
        }
    }

    pub fn get_mut(&mut self, block: Block) -> &mut PcPrior {
        match block {
            Block::X => &mut self.x,
            Block::Y => &mut self.y,
            Block::Z => &mut self.z,
        }
    }

    pub fn with_range_scale(&self, f: f64) -> Priors {
        Priors {
            x: self.x.with_range_scale(f),
            y: self.y.with_range_scale(f),
            z: self.z.with_range_scale(f),
        }
    }

    /// Caps every range that is still unbounded at `factor` times the
    /// diameter of its mesh. Far beyond the mesh a field is numerically a
    /// constant plus a plane and Q(1, ρ) loses positive definiteness in
    /// floating point. A non-finite factor leaves the priors unchanged.
    pub fn truncated(&self, model: &Model, factor: f64) -> Priors {
        let mut out = *self;
        if factor.is_finite() {
            for b in Block::ALL {
                let mesh = if b == Block::X { model.mesh_x() } else { model.mesh_yz() };
                let p = out.get_mut(b);
                if p.rho_max.is_infinite() {
                    p.rho_max = factor * mesh.diameter();
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.x.validate()?;
        self.y.validate()?;
        self.z.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonConfig {
    /// Convergence when ‖∇‖∞ < tol · (1 + |f|).
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Disables step halving (full Newton steps only).
    pub damping: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            tol: 1e-8,
            max_iter: 50,
            max_halvings: 30,
            damping: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_iterations: usize,
    pub n_burnin: usize,
    pub thin: usize,
    pub newton: NewtonConfig,
    pub scale_phi_y: f64,
    pub scale_phi_xg: f64,
    pub scale_matern: f64,
    pub target_accept: f64,
    /// Per field (x, y, z): adds a joint (σ, ρ, θ) Metropolis–Hastings move
    /// after the Laplace step, with the Laplace approximation as the θ
    /// proposal. Only coherent where the Laplace step is accurate or
    /// corrected.
    pub joint_matern: [bool; 3],
    /// Adds the exact translation move of [`center_shift`] each sweep.
    pub centering: bool,
    /// Treats each Laplace draw as an independence proposal and applies a
    /// Metropolis–Hastings correction, making every block update exact.
    pub laplace_correction: bool,
    /// Range cap as a multiple of the mesh diameter; see [`Priors::truncated`].
    pub range_cap_factor: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_iterations: 5000,
            n_burnin: 1000,
            thin: 4,
            newton: NewtonConfig::default(),
            scale_phi_y: 0.1,
            scale_phi_xg: 0.1,
            scale_matern: 0.1,
            target_accept: 0.35,
            joint_matern: [false, true, true],
            centering: true,
            laplace_correction: false,
            range_cap_factor: 100.0,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burnin >= self.n_iterations {
            return Err(Error::Config(format!(
                "n_burnin ({}) must be smaller than n_iterations ({})",
                self.n_burnin, self.n_iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if !(self.newton.tol > 0.0) || self.newton.max_iter == 0 {
            return Err(Error::Config("newton tolerance and iteration cap must be positive".into()));
        }
        for (name, v) in [
            ("scale_phi_y", self.scale_phi_y),
            ("scale_phi_xg", self.scale_phi_xg),
            ("scale_matern", self.scale_matern),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(self.range_cap_factor > 0.0) {
            return Err(Error::Config("range_cap_factor must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Newton mode and Laplace draws

#[derive(Debug)]
pub struct NewtonResult {
    pub mode: Vec<f64>,
    /// Negative Hessian at the mode and its factor.
    pub hessian: SparseSym,
    pub factor: CholeskyFactor,
    pub iterations: usize,
    pub log_density: f64,
    /// Objective after every accepted step, starting point first.
    pub trace: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Damped Newton–Raphson ascent to the mode of a log-concave target.
pub fn newton_mode<C: Conditional + ?Sized>(
    target: &C,
    start: &[f64],
    cfg: &NewtonConfig,
    cache: &mut FactorCache,
) -> Result<NewtonResult> {
    let mut theta = start.to_vec();
    let mut f = target.log_density(&theta);
    if !f.is_finite() {
        // the warm start may sit where the likelihood overflows; restart from zero
        theta.iter_mut().for_each(|t| *t = 0.0);
        f = target.log_density(&theta);
        if !f.is_finite() {
            return Err(Error::NonConvergence {
                iterations: 0,
                gradient_norm: f64::INFINITY,
            });
        }
    }
    let mut trace = vec![f];
    let mut gnorm = f64::INFINITY;
    for it in 0..=cfg.max_iter {
        let (g, h) = target.gradient_and_neg_hessian(&theta)?;
        gnorm = inf_norm(&g);
        let factor = cache.factorize(&h)?;
        if gnorm < cfg.tol * (1.0 + f.abs()) {
            return Ok(NewtonResult {
                mode: theta,
                hessian: h,
                factor,
                iterations: it,
                log_density: f,
                trace,
            });
        }
        if it == cfg.max_iter {
            break;
        }
        let step = factor.solve(&g)?;
        let mut t = 1.0;
        let slack = 1e-12 * (1.0 + f.abs());
        let mut accepted = None;
        let halvings = if cfg.damping { cfg.max_halvings } else { 0 };
        for _ in 0..=halvings {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a + t * s).collect();
            let fc = target.log_density(&cand);
            if !cfg.damping || (fc.is_finite() && fc >= f - slack) {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, fc)) => {
                if !fc.is_finite() {
                    return Err(Error::NonConvergence {
                        iterations: it + 1,
                        gradient_norm: gnorm,
                    });
                }
                theta = cand;
                f = fc;
                trace.push(f);
            }
            None => {
                // no step improves f beyond roundoff; accept if the Newton
                // decrement says the remaining gain is negligible too
                let decrement: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
                if decrement.abs() < cfg.tol * (1.0 + f.abs()) {
                    return Ok(NewtonResult {
                        mode: theta,
                        hessian: h,
                        factor,
                        iterations: it,
                        log_density: f,
                        trace,
                    });
                }
                return Err(Error::NonConvergence {
                    iterations: it + 1,
                    gradient_norm: gnorm,
                });
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iter,
        gradient_norm: gnorm,
    })
}

/// Draws θ ~ N(mode, H⁻¹) from a Newton result.
pub fn laplace_draw<R: Rng + ?Sized>(res: &NewtonResult, rng: &mut R) -> Vec<f64> {
    let e = res.factor.sample(rng);
    res.mode.iter().zip(e).map(|(m, e)| m + e).collect()
}

/// Log-density of the Laplace approximation at `theta`, up to a constant
/// that depends only on the dimension.
pub fn laplace_logpdf(res: &NewtonResult, theta: &[f64]) -> f64 {
    let d: Vec<f64> = theta.iter().zip(&res.mode).map(|(a, m)| a - m).collect();
    0.5 * res.factor.log_det() - 0.5 * res.hessian.quad_form(&d)
}

/// Replaces one block of `state` by a draw from its Laplace approximation.
/// Returns the Newton iteration count.
#[allow(clippy::too_many_arguments)]
pub fn laplace_update<R: Rng + ?Sized>(
    model: &Model,
    structure: &BlockStructure,
    state: &mut ModelState,
    q: &FieldPrecision,
    cfg: &NewtonConfig,
    cache: &mut FactorCache,
    rng: &mut R,
) -> Result<usize> {
    Ok(laplace_step(model, structure, state, q, cfg, cache, rng)?.iterations)
}

/// As [`laplace_update`] but returns the Newton result it drew from.
#[allow(clippy::too_many_arguments)]
pub fn laplace_step<R: Rng + ?Sized>(
    model: &Model,
    structure: &BlockStructure,
    state: &mut ModelState,
    q: &FieldPrecision,
    cfg: &NewtonConfig,
    cache: &mut FactorCache,
    rng: &mut R,
) -> Result<NewtonResult> {
    let block = structure.block();
    let fixed = structure.fixed_intercept();
    let cond = structure.conditional(model, state, q)?;
    let res = newton_mode(&cond, &state.pack(block, fixed), cfg, cache)?;
    let draw = laplace_draw(&res, rng);
    state.unpack(block, fixed, &draw);
    Ok(res)
}

/// Exact block update built on the Laplace approximation N(m, H⁻¹): the
/// autoregressive proposal θ' = m + √(1 − β²)(θ − m) + β ξ with ξ ~ N(0, H⁻¹)
/// is reversible for that Gaussian, so the Metropolis–Hastings ratio only
/// involves the importance weights p/q. β = 1 is the independence sampler.
/// Returns the Newton result and whether the proposal was accepted.
#[allow(clippy::too_many_arguments)]
pub fn corrected_laplace_step<R: Rng + ?Sized>(
    model: &Model,
    structure: &BlockStructure,
    state: &mut ModelState,
    q: &FieldPrecision,
    beta: f64,
    cfg: &NewtonConfig,
    cache: &mut FactorCache,
    rng: &mut R,
) -> Result<(NewtonResult, bool)> {
    let block = structure.block();
    let fixed = structure.fixed_intercept();
    let cond = structure.conditional(model, state, q)?;
    let theta = state.pack(block, fixed);
    let res = newton_mode(&cond, &theta, cfg, cache)?;
    let xi = res.factor.sample(rng);
    let keep = (1.0 - beta * beta).max(0.0).sqrt();
    let prop: Vec<f64> = theta
        .iter()
        .zip(&res.mode)
        .zip(&xi)
        .map(|((t, m), e)| m + keep * (t - m) + beta * e)
        .collect();
    let cur = cond.log_density(&theta) - laplace_logpdf(&res, &theta);
    let lp = cond.log_density(&prop) - laplace_logpdf(&res, &prop);
    let u: f64 = rng.random();
    let accept = lp.is_finite() && (!cur.is_finite() || u.ln() < lp - cur);
    if accept {
        state.unpack(block, fixed, &prop);
    }
    Ok((res, accept))
}

// ---------------------------------------------------------------------------
// Random-walk proposals

/// Log-scale Gaussian random walk with Robbins–Monro scaling and, after the
/// first half of burn-in, an empirical proposal covariance. Frozen once
/// adaptation ends.
#[derive(Clone, Debug)]
pub struct RwProposal {
    dim: usize,
    log_scale: f64,
    /// Lower Cholesky factor (row-major) of the base covariance.
    chol: Vec<f64>,
    target: f64,
    adapting: bool,
    n_adapt: usize,
    n_seen: usize,
    mean: Vec<f64>,
    cov: Vec<f64>,
    accepted: u64,
    proposed: u64,
}

impl RwProposal {
    pub fn new(dim: usize, scale: f64, target: f64) -> Self {
        let mut chol = vec![0.0; dim * dim];
        for i in 0..dim {
            chol[i * dim + i] = 1.0;
        }
        RwProposal {
            dim,
            log_scale: if scale > 0.0 { scale.ln() } else { f64::NEG_INFINITY },
            chol,
            target,
            adapting: true,
            n_adapt: 0,
            n_seen: 0,
            mean: vec![0.0; dim],
            cov: vec![0.0; dim * dim],
            accepted: 0,
            proposed: 0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn propose<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let s = self.log_scale.exp();
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        (0..self.dim)
            .map(|i| {
                let dz: f64 = (0..=i).map(|j| self.chol[i * self.dim + j] * z[j]).sum();
                x[i] + s * dz
            })
            .collect()
    }

    /// Records the outcome of one proposal; `x` is the chain position after it.
    pub fn record(&mut self, accepted: bool, x: &[f64]) {
        if !self.adapting {
            self.proposed += 1;
            self.accepted += u64::from(accepted);
            return;
        }
        self.n_adapt += 1;
        if self.log_scale.is_finite() {
            let gamma = (self.n_adapt as f64 + 10.0).powf(-0.6);
            let a = if accepted { 1.0 } else { 0.0 };
            self.log_scale = (self.log_scale + 2.0 * gamma * (a - self.target)).clamp(-12.0, 3.0);
        }
        self.n_seen += 1;
        let n = self.n_seen as f64;
        let d = self.dim;
        let delta: Vec<f64> = (0..d).map(|i| x[i] - self.mean[i]).collect();
        for i in 0..d {
            self.mean[i] += delta[i] / n;
        }
        for i in 0..d {
            for j in 0..d {
                self.cov[i * d + j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    /// Replaces the base covariance with the empirical one seen so far.
    pub fn adopt_empirical_covariance(&mut self) {
        if !self.adapting || self.n_seen < 20 || self.dim < 2 || !self.log_scale.is_finite() {
            return;
        }
        let d = self.dim;
        let n = self.n_seen as f64;
        let scale = 2.38f64.powi(2) / d as f64;
        let mut c: Vec<f64> = self.cov.iter().map(|v| v / (n - 1.0) * scale).collect();
        for i in 0..d {
            c[i * d + i] += 1e-8;
        }
        if let Some(l) = dense_cholesky(&c, d) {
            // keep the overall step size comparable to the current one
            let old = self.log_scale.exp();
            let tr_new: f64 = (0..d).map(|i| c[i * d + i]).sum::<f64>() / d as f64;
            let tr_old: f64 = (0..d).map(|i| (0..=i).map(|j| self.chol[i * d + j].powi(2)).sum::<f64>()).sum::<f64>() / d as f64;
            if tr_new > 0.0 {
                self.chol = l;
                self.log_scale = (old * (tr_old / tr_new).sqrt()).ln().clamp(-12.0, 3.0);
            }
        }
    }

    pub fn freeze(&mut self) {
        self.adapting = false;
    }

    /// Acceptance rate since adaptation stopped.
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

fn dense_cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

/// One Metropolis step on a log-scale target `logp(log x)`; returns whether
/// the proposal was accepted and the new position.
pub fn rw_step<R: Rng + ?Sized, F: FnMut(&[f64]) -> Result<f64>>(
    x: &[f64],
    logp_x: f64,
    proposal: &mut RwProposal,
    mut logp: F,
    rng: &mut R,
) -> Result<(Vec<f64>, f64, bool)> {
    let cand = proposal.propose(x, rng);
    let lp = logp(&cand)?;
    let u: f64 = rng.random();
    let accept = lp.is_finite() && u.ln() < lp - logp_x;
    let (pos, val) = if accept { (cand, lp) } else { (x.to_vec(), logp_x) };
    proposal.record(accept, &pos);
    Ok((pos, val, accept))
}

// ---------------------------------------------------------------------------
// Dispersion updates

fn plot_gamma_pairs(model: &Model, state: &ModelState) -> Vec<(f64, f64)> {
    let d = model.design();
    let ex = d.a_x_at_plots.apply(&state.w_x);
    model
        .gamma_plots()
        .iter()
        .map(|&j| {
            let eta = state.alpha_y + d.a_yz_at_plots.apply_row(j, &state.w_y) + state.beta_y * ex[j];
            (model.data().plots[j].agbd, eta.exp())
        })
        .collect()
}

/// MH update of φ_y under a flat prior on log φ_y.
pub fn mh_update_phi_y<R: Rng + ?Sized>(
    model: &Model,
    state: &mut ModelState,
    proposal: &mut RwProposal,
    rng: &mut R,
) -> Result<bool> {
    let pairs = plot_gamma_pairs(model, state);
    let logp = |l: &[f64]| -> Result<f64> {
        let phi = l[0].exp();
        Ok(pairs.iter().map(|&(y, mu)| gamma_logpdf_unchecked(y, mu, phi)).sum())
    };
    let x = [state.phi_y.ln()];
    let cur = logp(&x)?;
    let (pos, _, acc) = rw_step(&x, cur, proposal, logp, rng)?;
    state.phi_y = pos[0].exp();
    Ok(acc)
}

/// Joint MH update of (φ_x, φ_g) under flat priors on their logs.
pub fn mh_update_phi_x_g<R: Rng + ?Sized>(
    model: &Model,
    state: &mut ModelState,
    proposal: &mut RwProposal,
    rng: &mut R,
) -> Result<bool> {
    let d = model.design();
    let eta = d.a_x_cells.apply(&state.w_x);
    let cells: Vec<(f64, f64, f64)> = model
        .data()
        .cells
        .iter()
        .zip(&eta)
        .map(|(c, e)| (c.agbd, (state.alpha_x + e).exp(), 1.0 / c.n_tracks as f64))
        .collect();
    let logp = |l: &[f64]| -> Result<f64> {
        let (px, pg) = (l[0].exp(), l[1].exp());
        Ok(cells
            .iter()
            .map(|&(y, mu, inv_n)| gamma_logpdf_unchecked(y, mu, px + pg * inv_n))
            .sum())
    };
    let x = [state.phi_x.ln(), state.phi_g.ln()];
    let cur = logp(&x)?;
    let (pos, _, acc) = rw_step(&x, cur, proposal, logp, rng)?;
    state.phi_x = pos[0].exp();
    state.phi_g = pos[1].exp();
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Matérn updates

/// Unit-variance precision Q(1, ρ) with its log-determinant; Q(σ, ρ) is this
/// divided by σ².
#[derive(Clone, Debug)]
pub struct UnitPrecision {
    op: Arc<SpdeOperator>,
    pub rho: f64,
    pub q1: SparseSym,
    pub log_det: f64,
}

impl UnitPrecision {
    pub fn new(op: &Arc<SpdeOperator>, rho: f64, cache: &mut FactorCache) -> Result<Self> {
        let q1 = op.precision(&MaternParams { sigma: 1.0, rho });
        let log_det = cache.factorize(&q1)?.log_det();
        Ok(UnitPrecision {
            op: op.clone(),
            rho,
            q1,
            log_det,
        })
    }

    pub fn scaled(&self, sigma: f64) -> FieldPrecision {
        FieldPrecision::from_unit(&self.op, &self.q1, MaternParams { sigma, rho: self.rho })
    }

    /// wᵀ Q(1, ρ) w.
    pub fn quad_form(&self, w: &[f64]) -> f64 {
        self.op.quad_form(&MaternParams { sigma: 1.0, rho: self.rho }, w)
    }
}

/// Log conditional of (log σ, log ρ) given a latent vector, including the
/// log-scale Jacobian.
fn matern_log_target(prior: &PcPrior, k: usize, unit: Option<&UnitPrecision>, w: &[f64], ls: f64, lr: f64) -> f64 {
    let p = MaternParams {
        sigma: ls.exp(),
        rho: lr.exp(),
    };
    let mut v = prior.log_density(&p) + ls + lr;
    if let Some(u) = unit {
        v += 0.5 * (u.log_det - 2.0 * k as f64 * ls) - 0.5 * u.quad_form(w) / (p.sigma * p.sigma);
    }
    v
}

/// Joint MH update of one field's (σ, ρ). `op` is `None` for a field with no
/// latent vertices, in which case the target is the PC prior alone.
#[allow(clippy::too_many_arguments)]
pub fn mh_update_matern<R: Rng + ?Sized>(
    op: Option<&Arc<SpdeOperator>>,
    w: &[f64],
    current: MaternParams,
    unit: &mut Option<UnitPrecision>,
    prior: &PcPrior,
    proposal: &mut RwProposal,
    cache: &mut FactorCache,
    rng: &mut R,
) -> Result<(MaternParams, bool)> {
    let k = w.len();
    if let Some(op) = op {
        let stale = unit.as_ref().is_none_or(|u| u.rho != current.rho);
        if stale {
            *unit = Some(UnitPrecision::new(op, current.rho, cache)?);
        }
    }
    let x = [current.sigma.ln(), current.rho.ln()];
    let cur = matern_log_target(prior, k, unit.as_ref(), w, x[0], x[1]);
    let cand = proposal.propose(&x, rng);
    let mut cand_unit = None;
    let lp = if let Some(op) = op {
        let rho = cand[1].exp();
        if !(rho.is_finite() && rho > 0.0 && cand[0].exp() > 0.0) {
            f64::NEG_INFINITY
        } else {
            match UnitPrecision::new(op, rho, cache) {
                Ok(u) => {
                    let v = matern_log_target(prior, k, Some(&u), w, cand[0], cand[1]);
                    cand_unit = Some(u);
                    v
                }
                Err(Error::Indefinite { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            }
        }
    } else {
        matern_log_target(prior, k, None, w, cand[0], cand[1])
    };
    let u: f64 = rng.random();
    let accept = lp.is_finite() && u.ln() < lp - cur;
    let pos = if accept { cand } else { x.to_vec() };
    proposal.record(accept, &pos);
    if accept {
        if cand_unit.is_some() {
            *unit = cand_unit;
        }
        Ok((
            MaternParams {
                sigma: pos[0].exp(),
                rho: pos[1].exp(),
            },
            true,
        ))
    } else {
        Ok((current, false))
    }
}

/// Caches and settings shared by [`joint_matern_update`].
pub struct JointContext<'a> {
    pub newton: &'a NewtonConfig,
    pub prior_cache: &'a mut FactorCache,
    pub hess_cache: &'a mut FactorCache,
}

/// Metropolis–Hastings move on (σ, ρ, θ) of one field. (σ, ρ) takes a log-scale
/// random-walk step and θ is drawn from the Laplace approximation of its
/// conditional at the proposed values; the acceptance ratio uses the exact
/// joint density, so the move leaves the posterior invariant. `current` must
/// be the Laplace fit of θ's conditional at the present (σ, ρ) and the present
/// values of all other blocks.
#[allow(clippy::too_many_arguments)]
pub fn joint_matern_update<R: Rng + ?Sized>(
    model: &Model,
    structure: &BlockStructure,
    state: &mut ModelState,
    current: &NewtonResult,
    unit: &mut Option<UnitPrecision>,
    prior: &PcPrior,
    proposal: &mut RwProposal,
    ctx: JointContext<'_>,
    rng: &mut R,
) -> Result<bool> {
    let b = structure.block();
    let fixed = structure.fixed_intercept();
    let op = model.spde(b);
    let k = model.latent_dim(b) as f64;
    let p = state.matern(b);
    if unit.as_ref().is_none_or(|u| u.rho != p.rho) {
        *unit = Some(UnitPrecision::new(op, p.rho, ctx.prior_cache)?);
    }
    let u_c = unit.as_ref().unwrap();
    let theta = state.pack(b, fixed);
    let joint = |cond: &BlockConditional<'_>, theta: &[f64], u: &UnitPrecision, ls: f64, lr: f64| {
        let p = MaternParams {
            sigma: ls.exp(),
            rho: lr.exp(),
        };
        cond.log_density(theta) + 0.5 * (u.log_det - 2.0 * k * ls) + prior.log_density(&p) + ls + lr
    };
    let x = [p.sigma.ln(), p.rho.ln()];
    let q_c = u_c.scaled(p.sigma);
    let cond_c = structure.conditional(model, state, &q_c)?;
    let cur = joint(&cond_c, &theta, u_c, x[0], x[1]) - laplace_logpdf(current, &theta);

    let cand = proposal.propose(&x, rng);
    let (sigma, rho) = (cand[0].exp(), cand[1].exp());
    let mut outcome = None;
    if sigma > 0.0 && sigma.is_finite() && rho > 0.0 && rho.is_finite() {
        match UnitPrecision::new(op, rho, ctx.prior_cache) {
            Ok(u_p) => {
                let q_p = u_p.scaled(sigma);
                let cond_p = structure.conditional(model, state, &q_p)?;
                match newton_mode(&cond_p, &current.mode, ctx.newton, ctx.hess_cache) {
                    Ok(res_p) => {
                        let draw = laplace_draw(&res_p, rng);
                        let lp = joint(&cond_p, &draw, &u_p, cand[0], cand[1]) - laplace_logpdf(&res_p, &draw);
                        outcome = Some((lp, draw, u_p));
                    }
                    Err(Error::NonConvergence { .. } | Error::Indefinite { .. } | Error::NumericalOverflow { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Indefinite { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let u: f64 = rng.random();
    let accept = matches!(&outcome, Some((lp, _, _)) if lp.is_finite() && u.ln() < lp - cur);
    if accept {
        let (_, draw, u_p) = outcome.unwrap();
        state.unpack(b, fixed, &draw);
        state.set_matern(b, MaternParams { sigma, rho });
        *unit = Some(u_p);
        proposal.record(true, &cand);
    } else {
        proposal.record(false, &x);
    }
    Ok(accept)
}

/// Exact Gibbs draw along the translation w_x → w_x + c·1,
/// (α_x, α_y, α_z) → (α_x − c, α_y − β_y c, α_z − β_z c). The basis functions
/// sum to one, so no likelihood term changes; only the GMRF prior of w_x
/// does, and because G·1 = 0 the conditional of c is
/// N(−Σ C_i w_i / Σ C_i, 1 / (τ²κ⁴ Σ C_i)).
pub fn center_shift<R: Rng + ?Sized>(model: &Model, state: &mut ModelState, rng: &mut R) -> f64 {
    let c_diag = model.spde(Block::X).mass_diag();
    let total: f64 = c_diag.iter().sum();
    let mean = c_diag.iter().zip(&state.w_x).map(|(c, w)| c * w).sum::<f64>() / total;
    let p = state.matern_x;
    let prec = p.tau2() * p.kappa().powi(4) * total;
    let e: f64 = rng.sample(StandardNormal);
    let c = -mean + e / prec.sqrt();
    state.w_x.iter_mut().for_each(|w| *w += c);
    state.alpha_x -= c;
    state.alpha_y -= state.beta_y * c;
    state.alpha_z -= state.beta_z * c;
    c
}

// ---------------------------------------------------------------------------
// Chains

#[derive(Clone, Debug, PartialEq)]
pub struct AcceptanceRates {
    pub phi_y: f64,
    pub phi_xg: f64,
    pub matern: [f64; 3],
    /// Joint (σ, ρ, θ) moves; zero when disabled.
    pub joint: [f64; 3],
    /// Corrected Laplace block updates over the whole run; one when the
    /// correction is disabled.
    pub laplace: [f64; 3],
}

/// Thinned post-burn-in states plus diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSamples {
    pub states: Vec<ModelState>,
    /// Sweep index (0-based) of each stored state.
    pub sweeps: Vec<usize>,
    /// Newton iterations of the x, y and z blocks for every sweep.
    pub newton_iterations: Vec<[usize; 3]>,
    pub acceptance: AcceptanceRates,
    pub k_x: usize,
    pub k_y: usize,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Values of one scalar parameter across stored states.
    pub fn scalar(&self, p: Scalar) -> Vec<f64> {
        self.states.iter().map(|s| p.get(s)).collect()
    }
}

/// The scalar parameters of a state, in chain-file column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scalar {
    AlphaX,
    AlphaY,
    AlphaZ,
    BetaY,
    BetaZ,
    PhiX,
    PhiG,
    PhiY,
    SigmaX,
    RhoX,
    SigmaY,
    RhoY,
    SigmaZ,
    RhoZ,
}

impl Scalar {
    pub const ALL: [Scalar; 14] = [
        Scalar::AlphaX,
        Scalar::AlphaY,
        Scalar::AlphaZ,
        Scalar::BetaY,
        Scalar::BetaZ,
        Scalar::PhiX,
        Scalar::PhiG,
        Scalar::PhiY,
        Scalar::SigmaX,
        Scalar::RhoX,
        Scalar::SigmaY,
        Scalar::RhoY,
        Scalar::SigmaZ,
        Scalar::RhoZ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scalar::AlphaX => "alpha_x",
            Scalar::AlphaY => "alpha_y",
            Scalar::AlphaZ => "alpha_z",
            Scalar::BetaY => "beta_y",
            Scalar::BetaZ => "beta_z",
            Scalar::PhiX => "phi_x",
            Scalar::PhiG => "phi_g",
            Scalar::PhiY => "phi_y",
            Scalar::SigmaX => "sigma_x",
            Scalar::RhoX => "rho_x",
            Scalar::SigmaY => "sigma_y",
            Scalar::RhoY => "rho_y",
            Scalar::SigmaZ => "sigma_z",
            Scalar::RhoZ => "rho_z",
        }
    }

    pub fn get(self, s: &ModelState) -> f64 {
        match self {
            Scalar::AlphaX => s.alpha_x,
            Scalar::AlphaY => s.alpha_y,
            Scalar::AlphaZ => s.alpha_z,
            Scalar::BetaY => s.beta_y,
            Scalar::BetaZ => s.beta_z,
            Scalar::PhiX => s.phi_x,
            Scalar::PhiG => s.phi_g,
            Scalar::PhiY => s.phi_y,
            Scalar::SigmaX => s.matern_x.sigma,
            Scalar::RhoX => s.matern_x.rho,
            Scalar::SigmaY => s.matern_y.sigma,
            Scalar::RhoY => s.matern_y.rho,
            Scalar::SigmaZ => s.matern_z.sigma,
            Scalar::RhoZ => s.matern_z.rho,
        }
    }

    pub fn set(self, s: &mut ModelState, v: f64) {
        match self {
            Scalar::AlphaX => s.alpha_x = v,
            Scalar::AlphaY => s.alpha_y = v,
            Scalar::AlphaZ => s.alpha_z = v,
            Scalar::BetaY => s.beta_y = v,
            Scalar::BetaZ => s.beta_z = v,
            Scalar::PhiX => s.phi_x = v,
            Scalar::PhiG => s.phi_g = v,
            Scalar::PhiY => s.phi_y = v,
            Scalar::SigmaX => s.matern_x.sigma = v,
            Scalar::RhoX => s.matern_x.rho = v,
            Scalar::SigmaY => s.matern_y.sigma = v,
            Scalar::RhoY => s.matern_y.rho = v,
            Scalar::SigmaZ => s.matern_z.sigma = v,
            Scalar::RhoZ => s.matern_z.rho = v,
        }
    }
}

/// Starting state: intercepts from data means on the link scale, zero
/// loadings and latents, unit dispersions, Matérn parameters at prior medians.
pub fn initial_state(model: &Model, priors: &Priors) -> ModelState {
    let data = model.data();
    let mean = |v: &mut dyn Iterator<Item = f64>| {
        let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            None
        } else {
            Some(s / n as f64)
        }
    };
    let alpha_x = mean(&mut data.cells.iter().map(|c| c.agbd)).map_or(0.0, f64::ln);
    let alpha_y = mean(&mut data.plots.iter().filter(|p| p.forested()).map(|p| p.agbd)).map_or(0.0, f64::ln);
    let n = data.plots.len().max(1) as f64;
    let frac = data.plots.iter().filter(|p| p.forested()).count() as f64 / n;
    let frac = frac.clamp(0.5 / n, 1.0 - 0.5 / n);
    ModelState {
        alpha_x,
        alpha_y,
        alpha_z: (frac / (1.0 - frac)).ln(),
        beta_y: 0.0,
        beta_z: 0.0,
        phi_x: 1.0,
        phi_g: 1.0,
        phi_y: 1.0,
        matern_x: priors.x.median(),
        matern_y: priors.y.median(),
        matern_z: priors.z.median(),
        w_x: vec![0.0; model.k_x()],
        w_y: vec![0.0; model.k_y()],
        w_z: vec![0.0; model.k_y()],
    }
}

/// Acceptance rate the corrected Laplace step size adapts toward.
const LAPLACE_TARGET_ACCEPT: f64 = 0.3;

/// What one sweep did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepInfo {
    pub newton: [usize; 3],
}

/// A single Gibbs chain.
pub struct Sampler<'m> {
    model: &'m Model,
    priors: Priors,
    config: SamplerConfig,
    state: ModelState,
    structures: [BlockStructure; 3],
    hess_cache: [FactorCache; 3],
    prior_cache: [FactorCache; 3],
    unit: [Option<UnitPrecision>; 3],
    prop_phi_y: RwProposal,
    prop_phi_xg: RwProposal,
    prop_matern: [RwProposal; 3],
    prop_joint: [RwProposal; 3],
    laplace_accept: [(u64, u64); 3],
    laplace_beta: [f64; 3],
    rng: Stream,
    sweep: usize,
}

impl<'m> Sampler<'m> {
    pub fn new(model: &'m Model, priors: Priors, config: SamplerConfig, init: Option<ModelState>) -> Result<Self> {
        config.validate()?;
        priors.validate()?;
        let priors = priors.truncated(model, config.range_cap_factor);
        let state = init.unwrap_or_else(|| initial_state(model, &priors));
        state.validate(model.k_x(), model.k_y())?;
        let t = config.target_accept;
        let mut prior_cache: [FactorCache; 3] = Default::default();
        let mut unit: [Option<UnitPrecision>; 3] = [None, None, None];
        for b in Block::ALL {
            unit[b.index()] = Some(UnitPrecision::new(
                model.spde(b),
                state.matern(b).rho,
                &mut prior_cache[b.index()],
            )?);
        }
        Ok(Sampler {
            model,
            priors,
            structures: Block::ALL.map(|b| BlockStructure::new(model, b, false)),
            hess_cache: Default::default(),
            prior_cache,
            unit,
            prop_phi_y: RwProposal::new(1, config.scale_phi_y, t),
            prop_phi_xg: RwProposal::new(2, config.scale_phi_xg, t),
            prop_matern: [0, 1, 2].map(|_| RwProposal::new(2, config.scale_matern, t)),
            prop_joint: [0, 1, 2].map(|_| RwProposal::new(2, config.scale_matern, t)),
            laplace_accept: [(0, 0); 3],
            laplace_beta: [1.0; 3],
            rng: rng::stream(config.seed),
            state,
            config,
            sweep: 0,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    fn prior_precision(&mut self, b: Block) -> Result<FieldPrecision> {
        let i = b.index();
        let p = self.state.matern(b);
        let stale = self.unit[i].as_ref().is_none_or(|u| u.rho != p.rho);
        if stale {
            self.unit[i] = Some(UnitPrecision::new(self.model.spde(b), p.rho, &mut self.prior_cache[i])?);
        }
        Ok(self.unit[i].as_ref().unwrap().scaled(p.sigma))
    }

    fn sweep_inner(&mut self) -> Result<SweepInfo> {
        let mut newton = [0; 3];
        for b in Block::ALL {
            let q = self.prior_precision(b)?;
            let i = b.index();
            // the first sweep always moves off the all-zero start, where the
            // loadings are unidentified
            let res = if self.config.laplace_correction && self.sweep > 0 {
                let (res, acc) = corrected_laplace_step(
                    self.model,
                    &self.structures[i],
                    &mut self.state,
                    &q,
                    self.laplace_beta[i],
                    &self.config.newton,
                    &mut self.hess_cache[i],
                    &mut self.rng,
                )?;
                self.laplace_accept[i].0 += u64::from(acc);
                self.laplace_accept[i].1 += 1;
                if self.sweep < self.config.n_burnin {
                    // Robbins–Monro on log β toward the target acceptance
                    let g = (self.sweep as f64 + 10.0).powf(-0.6);
                    let a = if acc { 1.0 } else { 0.0 };
                    let lb = self.laplace_beta[i].ln() + 2.0 * g * (a - LAPLACE_TARGET_ACCEPT);
                    self.laplace_beta[i] = lb.exp().clamp(1e-3, 1.0);
                }
                res
            } else {
                laplace_step(
                    self.model,
                    &self.structures[i],
                    &mut self.state,
                    &q,
                    &self.config.newton,
                    &mut self.hess_cache[i],
                    &mut self.rng,
                )?
            };
            newton[i] = res.iterations;
            if self.config.joint_matern[i] {
                joint_matern_update(
                    self.model,
                    &self.structures[i],
                    &mut self.state,
                    &res,
                    &mut self.unit[i],
                    self.priors.get(b),
                    &mut self.prop_joint[i],
                    JointContext {
                        newton: &self.config.newton,
                        prior_cache: &mut self.prior_cache[i],
                        hess_cache: &mut self.hess_cache[i],
                    },
                    &mut self.rng,
                )?;
            }
        }
        if self.config.centering {
            center_shift(self.model, &mut self.state, &mut self.rng);
        }
        mh_update_phi_y(self.model, &mut self.state, &mut self.prop_phi_y, &mut self.rng)?;
        mh_update_phi_x_g(self.model, &mut self.state, &mut self.prop_phi_xg, &mut self.rng)?;
        for b in Block::ALL {
            let i = b.index();
            let (p, _) = mh_update_matern(
                Some(self.model.spde(b)),
                self.state.latent(b),
                self.state.matern(b),
                &mut self.unit[i],
                self.priors.get(b),
                &mut self.prop_matern[i],
                &mut self.prior_cache[i],
                &mut self.rng,
            )?;
            self.state.set_matern(b, p);
        }
        Ok(SweepInfo { newton })
    }

    /// Runs one full Gibbs sweep and applies the adaptation schedule.
    pub fn sweep(&mut self) -> Result<SweepInfo> {
        let s = self.sweep;
        let info = self.sweep_inner().map_err(|e| Error::Sweep {
            sweep: s,
            source: Box::new(e),
        })?;
        self.sweep += 1;
        let burn = self.config.n_burnin;
        let done = self.sweep;
        let props = self.proposals_mut();
        if done == burn {
            for p in props {
                p.freeze();
            }
        } else if done < burn && done >= burn / 2 && (done - burn / 2).is_multiple_of(50) {
            for p in props {
                p.adopt_empirical_covariance();
            }
        }
        Ok(info)
    }

    fn proposals_mut(&mut self) -> Vec<&mut RwProposal> {
        let [a, b, c] = &mut self.prop_matern;
        let [d, e, f] = &mut self.prop_joint;
        vec![&mut self.prop_phi_y, &mut self.prop_phi_xg, a, b, c, d, e, f]
    }

    pub fn run(mut self) -> Result<PosteriorSamples> {
        let cfg = self.config.clone();
        if cfg.n_burnin == 0 {
            for p in self.proposals_mut() {
                p.freeze();
            }
        }
        let mut states = Vec::new();
        let mut sweeps = Vec::new();
        let mut newton = Vec::with_capacity(cfg.n_iterations);
        for s in 0..cfg.n_iterations {
            let info = self.sweep()?;
            newton.push(info.newton);
            if s >= cfg.n_burnin && (s + 1 - cfg.n_burnin).is_multiple_of(cfg.thin) {
                states.push(self.state.clone());
                sweeps.push(s);
            }
        }
        Ok(PosteriorSamples {
            states,
            sweeps,
            newton_iterations: newton,
            acceptance: AcceptanceRates {
                phi_y: self.prop_phi_y.acceptance_rate(),
                phi_xg: self.prop_phi_xg.acceptance_rate(),
                matern: [0, 1, 2].map(|i| self.prop_matern[i].acceptance_rate()),
                joint: [0, 1, 2].map(|i| self.prop_joint[i].acceptance_rate()),
                laplace: self.laplace_accept.map(|(a, n)| if n == 0 { 1.0 } else { a as f64 / n as f64 }),
            },
            k_x: self.model.k_x(),
            k_y: self.model.k_y(),
        })
    }
}

pub fn run_chain(model: &Model, priors: &Priors, config: &SamplerConfig) -> Result<PosteriorSamples> {
    Sampler::new(model, *priors, config.clone(), None)?.run()
}

/// Independent chains with seeds derived from `config.seed`.
pub fn run_chains(
    model: &Model,
    priors: &Priors,
    config: &SamplerConfig,
    n_chains: usize,
    exec: Execution,
) -> Result<Vec<PosteriorSamples>> {
    par::try_map_range(exec, n_chains, |c| {
        let cfg = SamplerConfig {
            seed: rng::derive_seed(config.seed, c as u64),
            ..config.clone()
        };
        run_chain(model, priors, &cfg)
    })
}

/// Bernoulli log-likelihood of all plots; used by diagnostics.
pub fn plot_bernoulli_loglik(model: &Model, state: &ModelState) -> f64 {
    let d = model.design();
    let ex = d.a_x_at_plots.apply(&state.w_x);
    let ez = d.a_yz_at_plots.apply(&state.w_z);
    model
        .data()
        .plots
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let m = logistic(state.alpha_z + ez[j] + state.beta_z * ex[j]);
            if p.forested() {
                m.ln()
            } else {
                (1.0 - m).ln()
            }
        })
        .sum()
}
