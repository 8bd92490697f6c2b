//! Batch driver behind the `jzig` binary.
//!
//! A fit directory holds `chain.csv`, `latent.bin`, `newton.csv`,
//! `acceptance.csv`, both mesh files and the resolved `run.conf`, which is
//! enough to predict, rerun or audit the fit.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use jzig::config::RunConfig;
use jzig::diagnostics::{effective_sample_size, mcse, mean, quantile, variance};
use jzig::io;
use jzig::mesh::Mesh;
use jzig::model::{Block, Model};
use jzig::par::Execution;
use jzig::predict::{predict, PredictionRequest, Predictor};
use jzig::rng::stream;
use jzig::sampler::{run_chain, AcceptanceRates, PosteriorSamples, Scalar};
use jzig::synth::{reference_truth, simulate_dataset, TrueConfig, DESK_RANGE_SCALE};
use jzig::validation::{cross_validate, jitter_study, JitterConfig, JitterMode};
use jzig::{Error, Result};

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "JZIG_THREADS";

pub const CHAIN_CSV: &str = "chain.csv";
pub const LATENT_BIN: &str = "latent.bin";
pub const NEWTON_CSV: &str = "newton.csv";
pub const ACCEPTANCE_CSV: &str = "acceptance.csv";
pub const MESH_X: &str = "mesh_x.txt";
pub const MESH_YZ: &str = "mesh_yz.txt";
pub const RUN_CONF: &str = "run.conf";

#[derive(Debug, Parser)]
#[command(name = "jzig", version, about = "Joint zero-inflated gamma biomass model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic dataset at known parameters.
    Simulate(SimulateArgs),
    /// Run the sampler and write chain files.
    Fit(RunArgs),
    /// Posterior predictive summaries at requested sites.
    Predict(PredictArgs),
    /// K-fold cross-validation: calibration and interval coverage.
    Cv(RunArgs),
    /// Coordinate-jitter sensitivity of the conditional modes.
    Jitter(JitterArgs),
    /// Acceptance rates, Newton counts and trace summaries of a fit.
    Diag(DiagArgs),
    /// Print every configuration key with its default.
    Config,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 400)]
    pub plots: usize,
    /// Grid cells along x and y.
    #[arg(long, default_value_t = 50)]
    pub nx: usize,
    #[arg(long, default_value_t = 50)]
    pub ny: usize,
    /// Multiplies the reference ranges ρ_x, ρ_y, ρ_z.
    #[arg(long, default_value_t = DESK_RANGE_SCALE)]
    pub range_scale: f64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set n_iterations=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; overrides `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Fit directory written by `fit`.
    #[arg(long)]
    pub chain: PathBuf,
    /// Request CSV `site_id,x,y[,area]`.
    #[arg(long)]
    pub request: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct JitterArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Fit directory written by `fit`.
    #[arg(long)]
    pub chain: PathBuf,
    /// Also move each plot to the cell its jittered location falls in.
    #[arg(long)]
    pub move_cells: bool,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    /// Fit directory written by `fit`.
    #[arg(long)]
    pub chain: PathBuf,
    /// Output directory; defaults to the fit directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exec() -> Execution {
    Execution::Parallel
}

/// Applies the thread-count override from the environment.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        jzig::par::set_threads(n);
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Fit(a) => fit(&a).map(|_| ()),
        Command::Predict(a) => predict_cmd(&a),
        Command::Cv(a) => cv(&a),
        Command::Jitter(a) => jitter(&a),
        Command::Diag(a) => diag(&a),
        Command::Config => {
            print!("{}", RunConfig::documented());
            Ok(())
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = TrueConfig {
        truth: reference_truth(a.range_scale),
        nx: a.nx,
        ny: a.ny,
        n_plots: a.plots,
        ..TrueConfig::default()
    };
    let sim = simulate_dataset(&cfg, &mut stream(a.seed))?;
    mkdir(&a.out)?;
    io::write_plots(&a.out.join("plots.csv"), &sim.dataset.plots)?;
    io::write_cells(&a.out.join("cells.csv"), &sim.dataset.cells)?;
    sim.mesh_x.write(&a.out.join(MESH_X))?;
    sim.mesh_yz.write(&a.out.join(MESH_YZ))?;
    io::write_truth(&a.out.join("truth.csv"), &sim.truth)?;
    io::write_latents(
        &a.out.join("truth_latent.bin"),
        sim.mesh_x.n_vertices(),
        sim.mesh_yz.n_vertices(),
        std::slice::from_ref(&sim.truth),
    )?;
    let mut rc = RunConfig {
        plots: "plots.csv".into(),
        cells: "cells.csv".into(),
        mesh_x: Some(MESH_X.into()),
        mesh_yz: Some(MESH_YZ.into()),
        output: "fit".into(),
        grid: cfg.grid,
        prior_range_scale: a.range_scale,
        max_edge_x: cfg.max_edge_x,
        buffer_x: cfg.buffer_x,
        max_edge_yz: cfg.max_edge_yz,
        buffer_yz: cfg.buffer_yz,
        ..RunConfig::default()
    };
    rc.sampler.seed = a.seed;
    write_text(&a.out.join(RUN_CONF), &rc.to_text())
}

/// Reads the config file (if any), then applies overrides.
pub fn load_config(a: &RunArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        c.set(k.trim(), v.trim())?;
    }
    if let Some(o) = &a.out {
        c.output = o.clone();
    }
    c.validate()?;
    Ok(c)
}

fn build_model(c: &RunConfig) -> Result<Model> {
    let data = c.load_data()?;
    let (mx, myz) = c.load_meshes(&data)?;
    Model::new(data, mx, myz)
}

/// Writes every file of a fit directory.
pub fn write_fit(dir: &Path, c: &RunConfig, model: &Model, s: &PosteriorSamples) -> Result<()> {
    mkdir(dir)?;
    io::write_chain(&dir.join(CHAIN_CSV), &dir.join(LATENT_BIN), s)?;
    io::write_newton(&dir.join(NEWTON_CSV), &s.newton_iterations)?;
    io::write_acceptance(&dir.join(ACCEPTANCE_CSV), &s.acceptance)?;
    model.mesh_x().write(&dir.join(MESH_X))?;
    model.mesh_yz().write(&dir.join(MESH_YZ))?;
    let mut saved = c.clone();
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    saved.plots = abs(&c.plots);
    saved.cells = abs(&c.cells);
    saved.mesh_x = Some(MESH_X.into());
    saved.mesh_yz = Some(MESH_YZ.into());
    saved.output = ".".into();
    write_text(&dir.join(RUN_CONF), &saved.to_text())
}

pub fn fit(a: &RunArgs) -> Result<PosteriorSamples> {
    let c = load_config(a)?;
    let model = build_model(&c)?;
    let s = run_chain(&model, &c.effective_priors()?, &c.sampler)?;
    write_fit(&c.output, &c, &model, &s)?;
    Ok(s)
}

/// A fit directory read back.
pub struct Fit {
    pub config: RunConfig,
    pub mesh_x: Mesh,
    pub mesh_yz: Mesh,
    pub samples: PosteriorSamples,
}

pub fn read_fit(dir: &Path) -> Result<Fit> {
    let config = RunConfig::read(&dir.join(RUN_CONF))?;
    let chain = io::read_chain(&dir.join(CHAIN_CSV), &dir.join(LATENT_BIN))?;
    let newton = io::read_newton(&dir.join(NEWTON_CSV))?;
    let acc = io::read_acceptance(&dir.join(ACCEPTANCE_CSV))?;
    let get = |name: &str| acc.iter().find(|(n, _)| n == name).map_or(f64::NAN, |r| r.1);
    let tri = |p: &str| ["x", "y", "z"].map(|f| get(&format!("{p}_{f}")));
    let mesh_x = Mesh::read(&dir.join(MESH_X))?;
    let mesh_yz = Mesh::read(&dir.join(MESH_YZ))?;
    if mesh_x.n_vertices() != chain.k_x || mesh_yz.n_vertices() != chain.k_y {
        return Err(Error::DimensionMismatch {
            expected: mesh_x.n_vertices(),
            actual: chain.k_x,
        });
    }
    Ok(Fit {
        config,
        mesh_x,
        mesh_yz,
        samples: PosteriorSamples {
            states: chain.states,
            sweeps: chain.sweeps,
            newton_iterations: newton,
            acceptance: AcceptanceRates {
                phi_y: get("phi_y"),
                phi_xg: get("phi_x_g"),
                matern: tri("matern"),
                joint: tri("joint"),
                laplace: tri("laplace"),
            },
            k_x: chain.k_x,
            k_y: chain.k_y,
        },
    })
}

pub fn predict_cmd(a: &PredictArgs) -> Result<()> {
    let f = read_fit(&a.chain)?;
    let grid = f.config.grid;
    let (sites, areas) = io::read_request(&a.request, |p| grid.containing_center(p))?;
    let request = PredictionRequest::new(sites, areas)?;
    let predictor = Predictor::new(&f.mesh_x, &f.mesh_yz, request)?;
    let summary = predict(&predictor, &f.samples.states, a.seed, exec())?;
    io::write_predictions(&a.out, &summary)
}

fn csv_writer(path: &Path) -> Result<CsvOut> {
    let w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    Ok(CsvOut {
        path: path.to_path_buf(),
        w,
        err: None,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Report file writer; the first write error is returned by `close`.
struct CsvOut {
    path: PathBuf,
    w: csv::Writer<std::fs::File>,
    err: Option<Error>,
}

impl CsvOut {
    fn row<S: ToString>(&mut self, fields: impl IntoIterator<Item = S>) {
        let v: Vec<String> = fields.into_iter().map(|f| f.to_string()).collect();
        if let Err(e) = self.w.write_record(&v) {
            self.err.get_or_insert(csv_err(&self.path, e));
        }
    }

    fn close(mut self) -> Result<()> {
        if let Some(e) = self.err {
            return Err(e);
        }
        self.w.flush().map_err(|e| Error::Io {
            path: self.path.clone(),
            source: e,
        })
    }
}

pub fn cv(a: &RunArgs) -> Result<()> {
    let c = load_config(a)?;
    let model = build_model(&c)?;
    let report = cross_validate(&model, &c.effective_priors()?, &c.sampler, c.cv_folds, exec())?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    mkdir(&c.output)?;
    let mut cal = csv_writer(&c.output.join("cv_calibration.csv"))?;
    cal.row(["bin", "midpoint", "mean_predicted", "fraction", "count", "lower", "upper", "inside"]);
    for (i, b) in report.calibration.bins.iter().enumerate() {
        cal.row([
            i.to_string(),
            b.midpoint.to_string(),
            b.mean_predicted.to_string(),
            b.fraction.to_string(),
            b.count.to_string(),
            b.lower.to_string(),
            b.upper.to_string(),
            b.inside().to_string(),
        ]);
    }
    cal.close()?;
    let mut cov = csv_writer(&c.output.join("cv_coverage.csv"))?;
    cov.row(["stratum", "n", "covered", "coverage"]);
    for r in &report.coverage {
        cov.row([r.stratum.clone(), r.n.to_string(), r.covered.to_string(), r.coverage().to_string()]);
    }
    cov.close()?;
    let mut h = csv_writer(&c.output.join("cv_holdouts.csv"))?;
    h.row(["plot_id", "fold", "agbd", "p_forest", "q025", "q975", "covered"]);
    let plots = &model.data().plots;
    for x in &report.holdouts {
        h.row([
            plots[x.plot].id.clone(),
            x.fold.to_string(),
            x.agbd.to_string(),
            x.p_forest.to_string(),
            x.q025.to_string(),
            x.q975.to_string(),
            if x.forested { x.covered().to_string() } else { "NA".into() },
        ]);
    }
    h.close()
}

pub fn jitter(a: &JitterArgs) -> Result<()> {
    let c = load_config(&a.run)?;
    let f = read_fit(&a.chain)?;
    let data = c.load_data()?;
    let model = Model::new(data, f.mesh_x, f.mesh_yz)?;
    let cfg = JitterConfig {
        iterations: c.jitter_iterations,
        radius: c.jitter_radius,
        mode: if a.move_cells {
            JitterMode::BasisAndCell
        } else {
            JitterMode::BasisOnly
        },
        newton: c.sampler.newton,
        seed: c.sampler.seed,
    };
    let report = jitter_study(&model, &f.samples, &cfg, exec())?;
    if !report.failed.is_empty() {
        eprintln!("warning: {} jitter iterations failed and were excluded", report.failed.len());
    }
    mkdir(&c.output)?;
    let mut w = csv_writer(&c.output.join("jitter.csv"))?;
    w.row(["quantity", "range", "posterior_sd", "ratio", "completed", "failed"]);
    for r in &report.rows {
        w.row([
            r.quantity.clone(),
            r.range.to_string(),
            r.posterior_sd.to_string(),
            r.ratio.to_string(),
            report.completed.to_string(),
            report.failed.len().to_string(),
        ]);
    }
    w.close()
}

fn median_usize(v: &[usize]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let f: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    quantile(&f, 0.5)
}

pub fn diag(a: &DiagArgs) -> Result<()> {
    let f = read_fit(&a.chain)?;
    let out = a.out.clone().unwrap_or_else(|| a.chain.clone());
    mkdir(&out)?;
    let s = &f.samples;

    let mut acc = csv_writer(&out.join("diag_acceptance.csv"))?;
    acc.row(["update", "rate"]);
    let a_ = &s.acceptance;
    let fmt = |v: f64| if v.is_nan() { "NA".to_string() } else { v.to_string() };
    acc.row(["phi_y".to_string(), fmt(a_.phi_y)]);
    acc.row(["phi_x_g".to_string(), fmt(a_.phi_xg)]);
    for (i, b) in Block::ALL.iter().enumerate() {
        acc.row([format!("matern_{b}"), fmt(a_.matern[i])]);
        acc.row([format!("joint_{b}"), fmt(a_.joint[i])]);
        acc.row([format!("laplace_{b}"), fmt(a_.laplace[i])]);
    }
    acc.close()?;

    let mut nw = csv_writer(&out.join("diag_newton.csv"))?;
    nw.row(["block", "mean", "max", "median_first_quarter", "median_last_quarter"]);
    let n = s.newton_iterations.len();
    for (i, b) in Block::ALL.iter().enumerate() {
        let v: Vec<usize> = s.newton_iterations.iter().map(|x| x[i]).collect();
        let m = v.iter().sum::<usize>() as f64 / n.max(1) as f64;
        nw.row([
            b.to_string(),
            m.to_string(),
            v.iter().max().copied().unwrap_or(0).to_string(),
            median_usize(&v[..n / 4]).to_string(),
            median_usize(&v[n - n / 4..]).to_string(),
        ]);
    }
    nw.close()?;

    let mut tr = csv_writer(&out.join("diag_trace.csv"))?;
    tr.row(["parameter", "mean", "sd", "q025", "median", "q975", "ess", "mcse"]);
    if s.len() >= 2 {
        for p in Scalar::ALL {
            let v = s.scalar(p);
            tr.row([
                p.name().to_string(),
                mean(&v).to_string(),
                variance(&v).max(0.0).sqrt().to_string(),
                quantile(&v, 0.025).to_string(),
                quantile(&v, 0.5).to_string(),
                quantile(&v, 0.975).to_string(),
                effective_sample_size(&v).to_string(),
                mcse(&v).to_string(),
            ]);
        }
    }
    tr.close()
}

/// One-line failure message: the machine-readable category, then detail.
pub fn error_line(e: &Error) -> String {
    format!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "))
}
