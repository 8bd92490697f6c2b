//! Matérn (ν = 1) covariance and its sparse GMRF precision on a mesh.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::FemMatrices;
use crate::sparse::{CholeskyFactor, FactorCache, SparseSym, SymPattern, SymbolicCholesky};

/// Standard deviation and range of a Matérn field; at distance `rho` the
/// correlation is about 0.14.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaternParams {
    pub sigma: f64,
    pub rho: f64,
}

impl MaternParams {
    pub fn new(sigma: f64, rho: f64) -> Result<Self> {
        let p = MaternParams { sigma, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    /// SPDE scale κ = √8 / ρ.
    pub fn kappa(&self) -> f64 {
        8f64.sqrt() / self.rho
    }

    /// Precision scale τ² giving stationary marginal variance σ².
    pub fn tau2(&self) -> f64 {
        let k = self.kappa();
        1.0 / (4.0 * std::f64::consts::PI * k * k * self.sigma * self.sigma)
    }
}

/// Modified Bessel function of the second kind, order one.
///
/// Evaluated from K₁(x) = ∫₀^∞ exp(−x cosh t) cosh t dt with the trapezoid
/// rule, which converges geometrically for this analytic, even integrand.
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k1 requires x > 0");
    if x > 745.0 {
        return 0.0;
    }
    let h = 0.05;
    // scaled integrand: exp(-x (cosh t - 1)) cosh t
    let f = |t: f64| (-x * (t.cosh() - 1.0)).exp() * t.cosh();
    let mut sum = 0.5 * f(0.0);
    let mut t = h;
    loop {
        let v = f(t);
        sum += v;
        if v < 1e-18 * sum {
            break;
        }
        t += h;
    }
    h * sum * (-x).exp()
}

/// Matérn ν = 1 correlation √8 (h/ρ) K₁(√8 h/ρ).
pub fn matern_correlation(h: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
    }
    if !(h >= 0.0) || !h.is_finite() {
        return Err(Error::InvalidParameter(format!("distance must be non-negative, got {h}")));
    }
    let u = 8f64.sqrt() * h / rho;
    if u == 0.0 {
        return Ok(1.0);
    }
    if u < 1e-8 {
        // u K1(u) = 1 + (u²/2) ln(u/2) + O(u²)
        return Ok(1.0 + 0.5 * u * u * (0.5 * u).ln());
    }
    Ok((u * bessel_k1(u)).min(1.0))
}

/// Precomputed finite-element operators for one mesh: C, G and G C⁻¹ G on a
/// common sparsity pattern.
#[derive(Clone, Debug)]
pub struct SpdeOperator {
    pattern: Arc<SymPattern>,
    mass_diag: Vec<f64>,
    /// Off-diagonal stiffness entries (i < j, G_ij).
    edges: Vec<(usize, usize, f64)>,
    mass: SparseSym,
    stiffness: SparseSym,
    squared: SparseSym,
}

impl SpdeOperator {
    pub fn new(fem: &FemMatrices) -> Result<Self> {
        let n = fem.mass.len();
        if fem.stiffness.n() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: fem.stiffness.n(),
            });
        }
        if let Some(i) = fem.mass.iter().position(|&c| !(c > 0.0)) {
            return Err(Error::DegenerateDomain(format!("mass matrix entry {i} is not positive")));
        }
        // full symmetric rows of G
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let g = &fem.stiffness;
        for (s, (i, j)) in g.pattern().entries().enumerate() {
            let v = g.values()[s];
            rows[i].push((j, v));
            if i != j {
                rows[j].push((i, v));
            }
        }
        let mut trips = Vec::new();
        for (k, row) in rows.iter().enumerate() {
            let inv_c = 1.0 / fem.mass[k];
            for &(i, gik) in row {
                for &(j, gkj) in row {
                    if i <= j {
                        trips.push((i, j, gik * gkj * inv_c));
                    }
                }
            }
        }
        let squared = SparseSym::from_triplets(n, &trips);
        let edges = g
            .pattern()
            .entries()
            .zip(g.values())
            .filter(|((i, j), _)| i != j)
            .map(|((i, j), &v)| (i.min(j), i.max(j), v))
            .collect();
        let pattern = squared.pattern().clone();
        let mass = SparseSym::from_diagonal(&fem.mass).with_pattern(pattern.clone());
        let stiffness = fem.stiffness.with_pattern(pattern.clone());
        Ok(SpdeOperator {
            pattern,
            mass_diag: fem.mass.clone(),
            edges,
            mass,
            stiffness,
            squared,
        })
    }

    pub fn n(&self) -> usize {
        self.pattern.n()
    }

    pub fn pattern(&self) -> &Arc<SymPattern> {
        &self.pattern
    }

    /// Lumped mass matrix diagonal C.
    pub fn mass_diag(&self) -> &[f64] {
        &self.mass_diag
    }

    /// Q = τ²(κ⁴C + 2κ²G + GC⁻¹G).
    pub fn precision(&self, params: &MaternParams) -> SparseSym {
        let k2 = params.kappa().powi(2);
        let tau2 = params.tau2();
        let mut q = SparseSym::zeros(self.pattern.clone());
        let (cm, cg, cs) = (tau2 * k2 * k2, 2.0 * tau2 * k2, tau2);
        for (((out, c), g), s) in q
            .values_mut()
            .iter_mut()
            .zip(self.mass.values())
            .zip(self.stiffness.values())
            .zip(self.squared.values())
        {
            *out = cm * c + cg * g + cs * s;
        }
        q
    }

    /// G u, formed from neighbour differences. Rows of G sum to zero, so this
    /// avoids the cancellation of the plain product on near-constant inputs.
    fn stiffness_apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for &(i, j, g) in &self.edges {
            let d = u[j] - u[i];
            out[i] += g * d;
            out[j] -= g * d;
        }
        out
    }

    /// wᵀ Q w as a sum of non-negative pieces:
    /// τ²(κ⁴ wᵀCw − 2κ² Σ G_ij (w_i − w_j)² + Σ (Gw)_i² / C_ii).
    pub fn quad_form(&self, params: &MaternParams, w: &[f64]) -> f64 {
        let k2 = params.kappa().powi(2);
        let mass: f64 = self.mass_diag.iter().zip(w).map(|(c, v)| c * v * v).sum();
        let stiff: f64 = self.edges.iter().map(|&(i, j, g)| -g * (w[i] - w[j]).powi(2)).sum();
        let gw = self.stiffness_apply(w);
        let sq: f64 = gw.iter().zip(&self.mass_diag).map(|(v, c)| v * v / c).sum();
        params.tau2() * (k2 * k2 * mass + 2.0 * k2 * stiff + sq)
    }

    /// Q w, evaluated in the same factored form as [`SpdeOperator::quad_form`].
    pub fn mul_vec(&self, params: &MaternParams, w: &[f64]) -> Vec<f64> {
        let k2 = params.kappa().powi(2);
        let tau2 = params.tau2();
        let gw = self.stiffness_apply(w);
        let scaled: Vec<f64> = gw.iter().zip(&self.mass_diag).map(|(v, c)| v / c).collect();
        let ggw = self.stiffness_apply(&scaled);
        (0..w.len())
            .map(|i| tau2 * (k2 * k2 * self.mass_diag[i] * w[i] + 2.0 * k2 * gw[i] + ggw[i]))
            .collect()
    }
}

/// Prior precision of one latent field. Matérn precisions keep the operator
/// so that quadratic forms and products use its stable evaluation; the
/// assembled matrix feeds Hessians and factorizations.
#[derive(Clone, Debug)]
pub struct FieldPrecision {
    matrix: SparseSym,
    matern: Option<(Arc<SpdeOperator>, MaternParams)>,
}

impl FieldPrecision {
    pub fn matern(op: &Arc<SpdeOperator>, params: MaternParams) -> Self {
        FieldPrecision {
            matrix: op.precision(&params),
            matern: Some((op.clone(), params)),
        }
    }

    /// Wraps `unit` = Q(1, ρ) as Q(σ, ρ) = Q(1, ρ) / σ².
    pub fn from_unit(op: &Arc<SpdeOperator>, unit: &SparseSym, params: MaternParams) -> Self {
        let mut matrix = unit.clone();
        matrix.scale(1.0 / (params.sigma * params.sigma));
        FieldPrecision {
            matrix,
            matern: Some((op.clone(), params)),
        }
    }

    /// An arbitrary precision matrix, used as given.
    pub fn from_matrix(matrix: SparseSym) -> Self {
        FieldPrecision { matrix, matern: None }
    }

    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    pub fn matrix(&self) -> &SparseSym {
        &self.matrix
    }

    pub fn quad_form(&self, w: &[f64]) -> f64 {
        match &self.matern {
            Some((op, p)) => op.quad_form(p, w),
            None => self.matrix.quad_form(w),
        }
    }

    pub fn mul_vec(&self, w: &[f64]) -> Vec<f64> {
        match &self.matern {
            Some((op, p)) => op.mul_vec(p, w),
            None => self.matrix.mul_vec(w),
        }
    }
}

/// A Matérn precision matrix together with its Cholesky factor.
#[derive(Clone, Debug)]
pub struct SparsePrecision {
    pub matrix: SparseSym,
    pub factor: CholeskyFactor,
}

impl SparsePrecision {
    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }
}

pub fn assemble_precision(fem: &FemMatrices, params: &MaternParams) -> Result<SparsePrecision> {
    params.validate()?;
    let op = SpdeOperator::new(fem)?;
    let matrix = op.precision(params);
    let symbolic = SymbolicCholesky::analyze(matrix.pattern())?;
    let factor = CholeskyFactor::new(&symbolic, &matrix)?;
    Ok(SparsePrecision { matrix, factor })
}

/// GMRF prior on one mesh with a cached symbolic factorization.
#[derive(Clone, Debug)]
pub struct GmrfPrior {
    operator: Arc<SpdeOperator>,
    cache: FactorCache,
}

impl GmrfPrior {
    pub fn new(operator: Arc<SpdeOperator>) -> Self {
        GmrfPrior {
            operator,
            cache: FactorCache::new(),
        }
    }

    pub fn operator(&self) -> &Arc<SpdeOperator> {
        &self.operator
    }

    pub fn factorize(&mut self, q: &SparseSym) -> Result<CholeskyFactor> {
        self.cache.factorize(q)
    }

    /// Precision and factor at `params`.
    pub fn precision(&mut self, params: &MaternParams) -> Result<SparsePrecision> {
        let matrix = self.operator.precision(params);
        let factor = self.cache.factorize(&matrix)?;
        Ok(SparsePrecision { matrix, factor })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_matches_reference_values() {
        // reference values from scipy.special.k1
        let cases = [
            (1e-3, 999.9962381560855),
            (0.1, 9.853844780870606),
            (0.5, 1.6564411200033007),
            (1.0, 0.6019072301972346),
            (2.0, 0.13986588181652246),
            (5.0, 0.004044613445452163),
            (10.0, 1.8648773453825585e-05),
            (50.0, 3.4441022267175555e-23),
            (200.0, 1.228742373472986e-88),
        ];
        for (x, want) in cases {
            let got = bessel_k1(x);
            assert!(((got - want) / want).abs() < 1e-12, "K1({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn correlation_anchor_points() {
        assert_eq!(matern_correlation(0.0, 3.0).unwrap(), 1.0);
        let at_range = matern_correlation(2.5, 2.5).unwrap();
        assert!((at_range - 0.1396674740152931).abs() < 1e-12);
        assert!((0.11..=0.15).contains(&at_range));
        assert!(matern_correlation(100.0, 1.0).unwrap() < 1e-10);
        assert!((matern_correlation(1e-12, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn correlation_rejects_bad_range() {
        assert!(matches!(matern_correlation(1.0, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(matern_correlation(1.0, -2.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn correlation_is_monotone() {
        let mut prev = 1.0;
        for i in 1..200 {
            let c = matern_correlation(i as f64 * 0.05, 1.0).unwrap();
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(MaternParams::new(0.0, 1.0).is_err());
        assert!(MaternParams::new(1.0, f64::NAN).is_err());
    }
}
