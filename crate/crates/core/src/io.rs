//! Plain-text and binary file formats.
//!
//! | file | layout |
//! |------|--------|
//! | plots | CSV `id,x,y,agbd` |
//! | cells | CSV `cell_id,x,y,agbd,n_tracks` |
//! | chain | CSV `sweep` then one column per [`Scalar`] |
//! | latents | binary: `JZIGLAT1`, then `k_x`, `k_y`, sample count as u64, then for each sample `w_x`, `w_y`, `w_z` as f64; all little-endian |
//! | newton | CSV `sweep,newton_x,newton_y,newton_z` |
//! | acceptance | CSV `update,rate` |
//! | predictions | CSV `site_id,mean,sd,q025,q975,p_forest` |
//! | requests | CSV `site_id,x,y` with an optional `area` column |
//! | truth | CSV `parameter,value` |
//!
//! Floats are written in Rust's shortest round-trip form, so reading a
//! written file gives back the same values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::Location;
use crate::model::{CellObservation, ModelState, PlotObservation};
use crate::predict::{AreaPartition, PredictionSite, PredictionSummary};
use crate::spde::MaternParams;
use crate::sampler::{AcceptanceRates, PosteriorSamples, Scalar};

pub const PLOT_HEADER: [&str; 4] = ["id", "x", "y", "agbd"];
pub const CELL_HEADER: [&str; 5] = ["cell_id", "x", "y", "agbd", "n_tracks"];
pub const PREDICTION_HEADER: [&str; 6] = ["site_id", "mean", "sd", "q025", "q975", "p_forest"];
pub const NEWTON_HEADER: [&str; 4] = ["sweep", "newton_x", "newton_y", "newton_z"];
pub const LATENT_MAGIC: &[u8; 8] = b"JZIGLAT1";

fn open(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::parse(path, line, format!("{kind:?}")),
    }
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, want: &[&str]) -> Result<csv::StringRecord> {
    let h = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if h.len() < want.len() || h.iter().zip(want).any(|(a, b)| a != *b) {
        return Err(Error::parse(
            path,
            1,
            format!("expected header `{}`, found `{}`", want.join(","), h.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(h)
}

/// Iterates data records with their 1-based line numbers.
fn records<'a>(
    path: &'a Path,
    rdr: &'a mut csv::Reader<File>,
    width: usize,
) -> impl Iterator<Item = Result<(usize, csv::StringRecord)>> + 'a {
    rdr.records().map(move |r| {
        let r = r.map_err(|e| csv_error(path, e))?;
        let line = r.position().map_or(0, |p| p.line() as usize);
        if r.len() != width {
            return Err(Error::parse(path, line, format!("expected {width} fields, found {}", r.len())));
        }
        Ok((line, r))
    })
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, r: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    r[i].parse()
        .map_err(|_| Error::parse(path, line, format!("{name}: cannot parse `{}`", &r[i])))
}

fn finish(path: &Path, mut w: csv::Writer<File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_row<I, S>(path: &Path, w: &mut csv::Writer<File>, row: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| csv_error(path, e))
}

pub fn read_plots(path: &Path) -> Result<Vec<PlotObservation>> {
    let mut rdr = open(path)?;
    check_header(path, &mut rdr, &PLOT_HEADER)?;
    let mut out = Vec::new();
    for rec in records(path, &mut rdr, PLOT_HEADER.len()) {
        let (line, r) = rec?;
        let x = field(path, line, &r, 1, "x")?;
        let y = field(path, line, &r, 2, "y")?;
        let agbd: f64 = field(path, line, &r, 3, "agbd")?;
        if agbd < 0.0 {
            return Err(Error::parse(path, line, format!("negative agbd {agbd}")));
        }
        let p = PlotObservation::new(&r[0], Location::new(x, y), agbd).map_err(|e| Error::parse(path, line, e.to_string()))?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_plots(path: &Path, plots: &[PlotObservation]) -> Result<()> {
    let mut w = create(path)?;
    write_row(path, &mut w, PLOT_HEADER)?;
    for p in plots {
        write_row(
            path,
            &mut w,
            [p.id.clone(), p.location.x.to_string(), p.location.y.to_string(), p.agbd.to_string()],
        )?;
    }
    finish(path, w)
}

/// Reads satellite cells. Zero agbd values are replaced by `zero_floor`, or
/// by the smallest positive agbd in the file when it is `None`.
pub fn read_cells(path: &Path, zero_floor: Option<f64>) -> Result<Vec<CellObservation>> {
    if let Some(f) = zero_floor {
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::InvalidParameter(format!("zero floor must be positive, got {f}")));
        }
    }
    let mut rdr = open(path)?;
    check_header(path, &mut rdr, &CELL_HEADER)?;
    let mut raw = Vec::new();
    for rec in records(path, &mut rdr, CELL_HEADER.len()) {
        let (line, r) = rec?;
        let x: f64 = field(path, line, &r, 1, "x")?;
        let y: f64 = field(path, line, &r, 2, "y")?;
        let agbd: f64 = field(path, line, &r, 3, "agbd")?;
        let n: i64 = field(path, line, &r, 4, "n_tracks")?;
        if !(agbd >= 0.0) || !agbd.is_finite() {
            return Err(Error::parse(path, line, format!("agbd must be finite and >= 0, got {agbd}")));
        }
        if n < 1 || n > u32::MAX as i64 {
            return Err(Error::parse(path, line, format!("n_tracks must be at least 1, got {n}")));
        }
        raw.push((line, r[0].to_string(), Location::new(x, y), agbd, n as u32));
    }
    let floor = match zero_floor {
        Some(f) => f,
        None => raw.iter().map(|r| r.3).filter(|&a| a > 0.0).fold(f64::INFINITY, f64::min),
    };
    raw.into_iter()
        .map(|(line, id, loc, agbd, n)| {
            let a = if agbd == 0.0 { floor } else { agbd };
            if !a.is_finite() {
                return Err(Error::parse(path, line, "zero agbd and no positive value to floor it with"));
            }
            CellObservation::new(id, loc, a, n).map_err(|e| Error::parse(path, line, e.to_string()))
        })
        .collect()
}

pub fn write_cells(path: &Path, cells: &[CellObservation]) -> Result<()> {
    let mut w = create(path)?;
    write_row(path, &mut w, CELL_HEADER)?;
    for c in cells {
        write_row(
            path,
            &mut w,
            [
                c.cell_id.clone(),
                c.center.x.to_string(),
                c.center.y.to_string(),
                c.agbd.to_string(),
                c.n_tracks.to_string(),
            ],
        )?;
    }
    finish(path, w)
}

/// Scalar columns of the chain CSV.
pub fn chain_header() -> Vec<&'static str> {
    std::iter::once("sweep").chain(Scalar::ALL.iter().map(|s| s.name())).collect()
}

/// Writes the stored states: scalars to `csv_path`, latents to `latent_path`.
pub fn write_chain(csv_path: &Path, latent_path: &Path, samples: &PosteriorSamples) -> Result<()> {
    let mut w = create(csv_path)?;
    write_row(csv_path, &mut w, chain_header())?;
    for (s, &sweep) in samples.states.iter().zip(&samples.sweeps) {
        let row = std::iter::once(sweep.to_string()).chain(Scalar::ALL.iter().map(|p| p.get(s).to_string()));
        write_row(csv_path, &mut w, row)?;
    }
    finish(csv_path, w)?;
    write_latents(latent_path, samples.k_x, samples.k_y, &samples.states)
}

/// Stored states and their sweep indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainFile {
    pub sweeps: Vec<usize>,
    pub states: Vec<ModelState>,
    pub k_x: usize,
    pub k_y: usize,
}

pub fn read_chain(csv_path: &Path, latent_path: &Path) -> Result<ChainFile> {
    let header = chain_header();
    let mut rdr = open(csv_path)?;
    check_header(csv_path, &mut rdr, &header)?;
    let (k_x, k_y, latents) = read_latents(latent_path)?;
    let mut sweeps = Vec::new();
    let mut states = Vec::new();
    let mut latents = latents.into_iter();
    for rec in records(csv_path, &mut rdr, header.len()) {
        let (line, r) = rec?;
        sweeps.push(field(csv_path, line, &r, 0, "sweep")?);
        let (w_x, w_y, w_z) = latents.next().ok_or_else(|| {
            Error::parse(latent_path, 0, format!("fewer latent samples than chain rows (row at line {line})"))
        })?;
        let unit = MaternParams { sigma: 1.0, rho: 1.0 };
        let mut s = ModelState {
            alpha_x: 0.0,
            alpha_y: 0.0,
            alpha_z: 0.0,
            beta_y: 0.0,
            beta_z: 0.0,
            phi_x: 1.0,
            phi_g: 1.0,
            phi_y: 1.0,
            matern_x: unit,
            matern_y: unit,
            matern_z: unit,
            w_x,
            w_y,
            w_z,
        };
        for (i, p) in Scalar::ALL.iter().enumerate() {
            p.set(&mut s, field(csv_path, line, &r, i + 1, p.name())?);
        }
        s.validate(k_x, k_y).map_err(|e| Error::parse(csv_path, line, e.to_string()))?;
        states.push(s);
    }
    if latents.next().is_some() {
        return Err(Error::parse(latent_path, 0, "more latent samples than chain rows"));
    }
    Ok(ChainFile { sweeps, states, k_x, k_y })
}

pub fn write_latents(path: &Path, k_x: usize, k_y: usize, states: &[ModelState]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(LATENT_MAGIC)?;
    for v in [k_x, k_y, states.len()] {
        put(&(v as u64).to_le_bytes())?;
    }
    for s in states {
        s.validate(k_x, k_y)?;
        for v in s.w_x.iter().chain(&s.w_y).chain(&s.w_z) {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

type Latents = (Vec<f64>, Vec<f64>, Vec<f64>);

pub fn read_latents(path: &Path) -> Result<(usize, usize, Vec<Latents>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 8];
    let short = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::parse(path, 0, "truncated latent file")
        } else {
            Error::io(path, e)
        }
    };
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != LATENT_MAGIC {
        return Err(Error::parse(path, 0, "bad magic in latent file"));
    }
    let mut word = [0u8; 8];
    let mut header = [0usize; 3];
    for h in &mut header {
        r.read_exact(&mut word).map_err(short)?;
        *h = usize::try_from(u64::from_le_bytes(word)).map_err(|_| Error::parse(path, 0, "header value too large"))?;
    }
    let [k_x, k_y, count] = header;
    let mut vec = |n: usize| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut word).map_err(short)?;
            v.push(f64::from_le_bytes(word));
        }
        Ok(v)
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push((vec(k_x)?, vec(k_y)?, vec(k_y)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::parse(path, 0, "trailing bytes after latent samples"));
    }
    Ok((k_x, k_y, out))
}

pub fn write_newton(path: &Path, iterations: &[[usize; 3]]) -> Result<()> {
    let mut w = create(path)?;
    write_row(path, &mut w, NEWTON_HEADER)?;
    for (s, it) in iterations.iter().enumerate() {
        write_row(path, &mut w, [s, it[0], it[1], it[2]].map(|v| v.to_string()))?;
    }
    finish(path, w)
}

pub fn read_newton(path: &Path) -> Result<Vec<[usize; 3]>> {
    let mut rdr = open(path)?;
    check_header(path, &mut rdr, &NEWTON_HEADER)?;
    let mut out = Vec::new();
    for rec in records(path, &mut rdr, NEWTON_HEADER.len()) {
        let (line, r) = rec?;
        out.push([
            field(path, line, &r, 1, "newton_x")?,
            field(path, line, &r, 2, "newton_y")?,
            field(path, line, &r, 3, "newton_z")?,
        ]);
    }
    Ok(out)
}

fn acceptance_rows(a: &AcceptanceRates) -> Vec<(String, f64)> {
    let mut rows = vec![("phi_y".to_string(), a.phi_y), ("phi_x_g".to_string(), a.phi_xg)];
    for (i, f) in ["x", "y", "z"].iter().enumerate() {
        rows.push((format!("matern_{f}"), a.matern[i]));
    }
    for (i, f) in ["x", "y", "z"].iter().enumerate() {
        rows.push((format!("joint_{f}"), a.joint[i]));
    }
    for (i, f) in ["x", "y", "z"].iter().enumerate() {
        rows.push((format!("laplace_{f}"), a.laplace[i]));
    }
    rows
}

/// Acceptance rates; moves that never ran are written as `NA`.
pub fn write_acceptance(path: &Path, a: &AcceptanceRates) -> Result<()> {
    let mut w = create(path)?;
    write_row(path, &mut w, ["update", "rate"])?;
    for (name, v) in acceptance_rows(a) {
        let v = if v.is_nan() { "NA".to_string() } else { v.to_string() };
        write_row(path, &mut w, [name, v])?;
    }
    finish(path, w)
}

pub fn read_acceptance(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = open(path)?;
    check_header(path, &mut rdr, &["update", "rate"])?;
    let mut out = Vec::new();
    for rec in records(path, &mut rdr, 2) {
        let (line, r) = rec?;
        let v = if &r[1] == "NA" { f64::NAN } else { field(path, line, &r, 1, "rate")? };
        out.push((r[0].to_string(), v));
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, summary: &PredictionSummary) -> Result<()> {
    let mut w = create(path)?;
    write_row(path, &mut w, PREDICTION_HEADER)?;
    for (id, s) in summary.ids.iter().zip(&summary.rows) {
        write_row(
            path,
            &mut w,
            [
                id.clone(),
                s.mean.to_string(),
                s.sd.to_string(),
                s.q025.to_string(),
                s.q975.to_string(),
                s.p_forest.to_string(),
            ],
        )?;
    }
    finish(path, w)
}

pub fn read_predictions(path: &Path) -> Result<PredictionSummary> {
    let mut rdr = open(path)?;
    check_header(path, &mut rdr, &PREDICTION_HEADER)?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for rec in records(path, &mut rdr, PREDICTION_HEADER.len()) {
        let (line, r) = rec?;
        let v = |i: usize| field::<f64>(path, line, &r, i, PREDICTION_HEADER[i]);
        ids.push(r[0].to_string());
        rows.push(crate::predict::Summary {
            mean: v(1)?,
            sd: v(2)?,
            q025: v(3)?,
            q975: v(4)?,
            p_forest: v(5)?,
        });
    }
    Ok(PredictionSummary { ids, rows })
}

/// Prediction sites from `site_id,x,y[,area]`. Rows sharing a non-empty
/// `area` value also form an area (first-appearance order). Cell centers
/// come from `cell_center`.
pub fn read_request(
    path: &Path,
    cell_center: impl Fn(Location) -> Location,
) -> Result<(Vec<PredictionSite>, Vec<AreaPartition>)> {
    let mut rdr = open(path)?;
    let h = check_header(path, &mut rdr, &["site_id", "x", "y"])?;
    let width = h.len();
    if width == 4 && &h[3] != "area" || width > 4 {
        return Err(Error::parse(path, 1, "expected header `site_id,x,y` or `site_id,x,y,area`"));
    }
    let mut sites = Vec::new();
    let mut areas: Vec<AreaPartition> = Vec::new();
    for rec in records(path, &mut rdr, width) {
        let (line, r) = rec?;
        let loc = Location::new(field(path, line, &r, 1, "x")?, field(path, line, &r, 2, "y")?);
        if !loc.is_finite() {
            return Err(Error::parse(path, line, "non-finite coordinate"));
        }
        if width == 4 && !r[3].is_empty() {
            let i = sites.len();
            match areas.iter_mut().find(|a| a.name == r[3]) {
                Some(a) => a.members.push(i),
                None => areas.push(AreaPartition {
                    name: r[3].to_string(),
                    members: vec![i],
                }),
            }
        }
        sites.push(PredictionSite {
            id: r[0].to_string(),
            location: loc,
            cell_center: cell_center(loc),
        });
    }
    Ok((sites, areas))
}

pub fn write_truth(path: &Path, truth: &ModelState) -> Result<()> {
    let mut w = create(path)?;
    write_row(path, &mut w, ["parameter", "value"])?;
    for p in Scalar::ALL {
        write_row(path, &mut w, [p.name().to_string(), p.get(truth).to_string()])?;
    }
    finish(path, w)
}

pub fn read_truth(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = open(path)?;
    check_header(path, &mut rdr, &["parameter", "value"])?;
    let mut out = Vec::new();
    for rec in records(path, &mut rdr, 2) {
        let (line, r) = rec?;
        out.push((r[0].to_string(), field(path, line, &r, 1, "value")?));
    }
    Ok(out)
}
