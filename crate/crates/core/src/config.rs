//! Flat `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Unknown keys are errors.
//! Every key has a default (see [`RunConfig::default`] and
//! [`RunConfig::documented`]); command-line overrides are applied with
//! [`RunConfig::set`] after the file is read.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mesh::{build_mesh, Location, Mesh};
use crate::model::{CellGrid, Dataset};
use crate::sampler::{PcPrior, Priors, SamplerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub plots: PathBuf,
    pub cells: PathBuf,
    /// Mesh files; built from the data when unset.
    pub mesh_x: Option<PathBuf>,
    pub mesh_yz: Option<PathBuf>,
    pub output: PathBuf,
    pub grid: CellGrid,
    /// Replacement for zero cell agbd; the smallest positive value when unset.
    pub zero_floor: Option<f64>,
    pub max_edge_x: f64,
    pub buffer_x: f64,
    pub max_edge_yz: f64,
    pub buffer_yz: f64,
    pub sampler: SamplerConfig,
    pub priors: Priors,
    /// Multiplies every prior range ρ0.
    pub prior_range_scale: f64,
    pub cv_folds: usize,
    pub jitter_iterations: usize,
    pub jitter_radius: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            plots: "plots.csv".into(),
            cells: "cells.csv".into(),
            mesh_x: None,
            mesh_yz: None,
            output: "out".into(),
            grid: CellGrid::default(),
            zero_floor: None,
            max_edge_x: 2.5,
            buffer_x: 8.0,
            max_edge_yz: 10.0,
            buffer_yz: 25.0,
            sampler: SamplerConfig::default(),
            priors: Priors::default(),
            prior_range_scale: 1.0,
            cv_folds: 10,
            jitter_iterations: 100,
            jitter_radius: 1.0,
        }
    }
}

const KEYS: &[(&str, &str)] = &[
    ("plots", "plot CSV path"),
    ("cells", "satellite cell CSV path"),
    ("mesh_x", "x mesh file; built from the data when empty"),
    ("mesh_yz", "y/z mesh file; built from the data when empty"),
    ("output", "output directory"),
    ("grid_origin_x", "lower-left corner of the cell grid"),
    ("grid_origin_y", "lower-left corner of the cell grid"),
    ("cell_size", "cell side length"),
    ("zero_floor", "replacement for zero cell agbd; empty = smallest positive value"),
    ("max_edge_x", "largest triangle edge of the x mesh"),
    ("buffer_x", "buffer width around the data for the x mesh"),
    ("max_edge_yz", "largest triangle edge of the y/z mesh"),
    ("buffer_yz", "buffer width around the data for the y/z mesh"),
    ("n_iterations", "Gibbs sweeps"),
    ("n_burnin", "burn-in sweeps"),
    ("thin", "keep every thin-th sweep after burn-in"),
    ("newton_tol", "Newton gradient tolerance, relative to 1 + |f|"),
    ("newton_max_iter", "Newton iteration cap"),
    ("scale_phi_y", "initial log-scale proposal sd for phi_y"),
    ("scale_phi_xg", "initial log-scale proposal sd for (phi_x, phi_g)"),
    ("scale_matern", "initial log-scale proposal sd for (sigma, rho)"),
    ("target_accept", "acceptance rate targeted during burn-in"),
    ("joint_matern_x", "joint (sigma, rho, field) move for x"),
    ("joint_matern_y", "joint (sigma, rho, field) move for y"),
    ("joint_matern_z", "joint (sigma, rho, field) move for z"),
    ("centering", "exact translation move between w_x and the intercepts"),
    ("laplace_correction", "Metropolis-Hastings correction of the Laplace draws"),
    ("range_cap_factor", "range prior truncation, in mesh diameters"),
    ("seed", "master random seed"),
    ("prior_x_sigma0", "P(sigma_x > sigma0) = alpha"),
    ("prior_x_alpha_sigma", ""),
    ("prior_x_rho0", "P(rho_x < rho0) = alpha"),
    ("prior_x_alpha_rho", ""),
    ("prior_y_sigma0", ""),
    ("prior_y_alpha_sigma", ""),
    ("prior_y_rho0", ""),
    ("prior_y_alpha_rho", ""),
    ("prior_z_sigma0", ""),
    ("prior_z_alpha_sigma", ""),
    ("prior_z_rho0", ""),
    ("prior_z_alpha_rho", ""),
    ("prior_range_scale", "multiplies every rho0"),
    ("cv_folds", "cross-validation folds"),
    ("jitter_iterations", "coordinate jitter replicates"),
    ("jitter_radius", "radius of the jitter disk"),
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn prior_field<'a>(p: &'a mut PcPrior, name: &str) -> Option<&'a mut f64> {
    match name {
        "sigma0" => Some(&mut p.sigma0),
        "alpha_sigma" => Some(&mut p.alpha_sigma),
        "rho0" => Some(&mut p.rho0),
        "alpha_rho" => Some(&mut p.alpha_rho),
        _ => None,
    }
}

impl RunConfig {
    /// Every key with its default value and a short description.
    pub fn documented() -> String {
        let d = RunConfig::default();
        let mut out = String::new();
        for (k, doc) in KEYS {
            let v = d.get(k).unwrap_or_default();
            if doc.is_empty() {
                out.push_str(&format!("{k} = {v}\n"));
            } else {
                out.push_str(&format!("# {doc}\n{k} = {v}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(c)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn read(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::parse(&text)?;
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            fix(&mut c.plots);
            fix(&mut c.cells);
            fix(&mut c.output);
            c.mesh_x.as_mut().map(fix);
            c.mesh_yz.as_mut().map(fix);
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.sampler;
        match key {
            "plots" => self.plots = v.into(),
            "cells" => self.cells = v.into(),
            "mesh_x" => self.mesh_x = opt_path(v),
            "mesh_yz" => self.mesh_yz = opt_path(v),
            "output" => self.output = v.into(),
            "grid_origin_x" => self.grid.origin.x = num(key, v)?,
            "grid_origin_y" => self.grid.origin.y = num(key, v)?,
            "cell_size" => self.grid.cell_size = num(key, v)?,
            "zero_floor" => self.zero_floor = if v.is_empty() { None } else { Some(num(key, v)?) },
            "max_edge_x" => self.max_edge_x = num(key, v)?,
            "buffer_x" => self.buffer_x = num(key, v)?,
            "max_edge_yz" => self.max_edge_yz = num(key, v)?,
            "buffer_yz" => self.buffer_yz = num(key, v)?,
            "n_iterations" => s.n_iterations = num(key, v)?,
            "n_burnin" => s.n_burnin = num(key, v)?,
            "thin" => s.thin = num(key, v)?,
            "newton_tol" => s.newton.tol = num(key, v)?,
            "newton_max_iter" => s.newton.max_iter = num(key, v)?,
            "scale_phi_y" => s.scale_phi_y = num(key, v)?,
            "scale_phi_xg" => s.scale_phi_xg = num(key, v)?,
            "scale_matern" => s.scale_matern = num(key, v)?,
            "target_accept" => s.target_accept = num(key, v)?,
            "joint_matern_x" => s.joint_matern[0] = flag(key, v)?,
            "joint_matern_y" => s.joint_matern[1] = flag(key, v)?,
            "joint_matern_z" => s.joint_matern[2] = flag(key, v)?,
            "centering" => s.centering = flag(key, v)?,
            "laplace_correction" => s.laplace_correction = flag(key, v)?,
            "range_cap_factor" => s.range_cap_factor = num(key, v)?,
            "seed" => s.seed = num(key, v)?,
            "prior_range_scale" => self.prior_range_scale = num(key, v)?,
            "cv_folds" => self.cv_folds = num(key, v)?,
            "jitter_iterations" => self.jitter_iterations = num(key, v)?,
            "jitter_radius" => self.jitter_radius = num(key, v)?,
            _ => {
                let target = key.strip_prefix("prior_").and_then(|rest| {
                    let (f, name) = rest.split_once('_')?;
                    let p = match f {
                        "x" => &mut self.priors.x,
                        "y" => &mut self.priors.y,
                        "z" => &mut self.priors.z,
                        _ => return None,
                    };
                    prior_field(p, name)
                });
                match target {
                    Some(t) => *t = num(key, v)?,
                    None => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }
        }
        Ok(())
    }

    /// Current value of `key` in the file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.sampler;
        let path = |p: &Path| p.display().to_string();
        let opt = |p: &Option<PathBuf>| p.as_deref().map(path).unwrap_or_default();
        Some(match key {
            "plots" => path(&self.plots),
            "cells" => path(&self.cells),
            "mesh_x" => opt(&self.mesh_x),
            "mesh_yz" => opt(&self.mesh_yz),
            "output" => path(&self.output),
            "grid_origin_x" => self.grid.origin.x.to_string(),
            "grid_origin_y" => self.grid.origin.y.to_string(),
            "cell_size" => self.grid.cell_size.to_string(),
            "zero_floor" => self.zero_floor.map(|v| v.to_string()).unwrap_or_default(),
            "max_edge_x" => self.max_edge_x.to_string(),
            "buffer_x" => self.buffer_x.to_string(),
            "max_edge_yz" => self.max_edge_yz.to_string(),
            "buffer_yz" => self.buffer_yz.to_string(),
            "n_iterations" => s.n_iterations.to_string(),
            "n_burnin" => s.n_burnin.to_string(),
            "thin" => s.thin.to_string(),
            "newton_tol" => s.newton.tol.to_string(),
            "newton_max_iter" => s.newton.max_iter.to_string(),
            "scale_phi_y" => s.scale_phi_y.to_string(),
            "scale_phi_xg" => s.scale_phi_xg.to_string(),
            "scale_matern" => s.scale_matern.to_string(),
            "target_accept" => s.target_accept.to_string(),
            "joint_matern_x" => s.joint_matern[0].to_string(),
            "joint_matern_y" => s.joint_matern[1].to_string(),
            "joint_matern_z" => s.joint_matern[2].to_string(),
            "centering" => s.centering.to_string(),
            "laplace_correction" => s.laplace_correction.to_string(),
            "range_cap_factor" => s.range_cap_factor.to_string(),
            "seed" => s.seed.to_string(),
            "prior_range_scale" => self.prior_range_scale.to_string(),
            "cv_folds" => self.cv_folds.to_string(),
            "jitter_iterations" => self.jitter_iterations.to_string(),
            "jitter_radius" => self.jitter_radius.to_string(),
            _ => {
                let rest = key.strip_prefix("prior_")?;
                let (f, name) = rest.split_once('_')?;
                let mut p = match f {
                    "x" => self.priors.x,
                    "y" => self.priors.y,
                    "z" => self.priors.z,
                    _ => return None,
                };
                prior_field(&mut p, name)?.to_string()
            }
        })
    }

    /// The whole configuration in file syntax; `parse` reads it back.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Priors after the range scale; each is re-validated.
    pub fn effective_priors(&self) -> Result<Priors> {
        let p = self.priors.with_range_scale(self.prior_range_scale);
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.effective_priors()?;
        for (k, v) in [
            ("cell_size", self.grid.cell_size),
            ("max_edge_x", self.max_edge_x),
            ("max_edge_yz", self.max_edge_yz),
            ("prior_range_scale", self.prior_range_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [("buffer_x", self.buffer_x), ("buffer_yz", self.buffer_yz), ("jitter_radius", self.jitter_radius)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be non-negative")));
            }
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        Ok(())
    }

    /// Reads plots and cells.
    pub fn load_data(&self) -> Result<Dataset> {
        let plots = crate::io::read_plots(&self.plots)?;
        let cells = crate::io::read_cells(&self.cells, self.zero_floor)?;
        Dataset::new(plots, cells, self.grid)
    }

    /// Reads the mesh files, or builds meshes around every data site.
    pub fn load_meshes(&self, data: &Dataset) -> Result<(Mesh, Mesh)> {
        let sites: Vec<Location> = data.all_sites();
        let get = |file: &Option<PathBuf>, edge: f64, buffer: f64| match file {
            Some(p) => Mesh::read(p),
            None => build_mesh(&sites, edge, buffer),
        };
        Ok((
            get(&self.mesh_x, self.max_edge_x, self.buffer_x)?,
            get(&self.mesh_yz, self.max_edge_yz, self.buffer_yz)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.set("prior_y_rho0", "30").unwrap();
        c.set("joint_matern_x", "true").unwrap();
        c.set("zero_floor", "0.003").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::parse(&RunConfig::documented()).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
        assert!(RunConfig::parse("thin = x").is_err());
        assert!(RunConfig::parse("prior_w_rho0 = 1").is_err());
        let c = RunConfig::parse("# comment\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(c.sampler.seed, 7);
    }
}
