//! CSV writers and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mbsfuse_core::analysis::{MeshStudyResult, MetricsReport, PdfStudyResult, SchemeRun};
use mbsfuse_core::geom::BsSite;
use serde::Serialize;

use crate::CliError;

pub const CSV_SCHEMA_VERSION: u32 = 1;

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes `rows` under a header, optionally preceded by `# ` comment lines.
pub fn write_csv<R: Serialize>(path: &Path, comments: &[String], rows: impl IntoIterator<Item = R>) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for c in comments {
        writeln!(out, "# {c}").map_err(|e| io_err(path, e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct ErrorRow {
    t: f64,
    error_m: f64,
    n_bs: usize,
}

#[derive(Serialize)]
pub struct MetricsRow<'a> {
    scheme: &'a str,
    rms_m: f64,
    max_m: f64,
    pct_lt_2m: f64,
    pct_lt_1m: f64,
    pct_lt_0p3m: f64,
}

impl<'a> MetricsRow<'a> {
    pub fn new(scheme: &'a str, m: &MetricsReport) -> Self {
        let pct = |t| m.fraction_below(t).expect("standard threshold");
        Self {
            scheme,
            rms_m: m.rms,
            max_m: m.max,
            pct_lt_2m: pct(2.0),
            pct_lt_1m: pct(1.0),
            pct_lt_0p3m: pct(0.3),
        }
    }
}

#[derive(Serialize)]
struct CdfRow {
    error_m: f64,
    quantile: f64,
}

#[derive(Serialize)]
struct TrackRow {
    t: f64,
    x_m: f64,
    y_m: f64,
    true_x_m: f64,
    true_y_m: f64,
    error_m: f64,
}

#[derive(Serialize)]
struct SiteRow {
    bs_id: u32,
    x_m: f64,
    y_m: f64,
    z_m: f64,
}

pub fn write_sites(dir: &Path, sites: &[BsSite]) -> Result<PathBuf, CliError> {
    let path = dir.join("sites.csv");
    write_csv(
        &path,
        &[],
        sites.iter().map(|s| SiteRow {
            bs_id: s.id.0,
            x_m: s.pos.x,
            y_m: s.pos.y,
            z_m: s.pos.z,
        }),
    )?;
    Ok(path)
}

/// errors.csv, metrics.csv, cdf.csv and track.csv for one scheme.
pub fn write_scheme(dir: &Path, run: &SchemeRun, truth: &[(f64, f64)]) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(dir)?;
    let errors = dir.join("errors.csv");
    write_csv(
        &errors,
        &[],
        run.series.points.iter().map(|p| ErrorRow {
            t: p.t,
            error_m: p.error,
            n_bs: p.n_bs,
        }),
    )?;
    let metrics = dir.join("metrics.csv");
    write_csv(&metrics, &[], [MetricsRow::new(run.scheme.name(), &run.metrics)])?;
    let cdf = dir.join("cdf.csv");
    write_csv(
        &cdf,
        &[],
        run.metrics.cdf.iter().map(|(e, q)| CdfRow {
            error_m: *e,
            quantile: *q,
        }),
    )?;
    let track = dir.join("track.csv");
    write_csv(
        &track,
        &[],
        run.estimates.iter().zip(&run.series.points).zip(truth).map(|(((t, b), p), (tx, ty))| {
            let (x, y) = b.position();
            TrackRow {
                t: *t,
                x_m: x,
                y_m: y,
                true_x_m: *tx,
                true_y_m: *ty,
                error_m: p.error,
            }
        }),
    )?;
    Ok(vec![errors, metrics, cdf, track])
}

#[derive(Serialize)]
struct PdfRow {
    sample_id: usize,
    nonlinear_value: f64,
    linearized_value: f64,
    quantity: &'static str,
}

pub fn write_pdf_study(
    path: &Path,
    header: Vec<String>,
    range: &PdfStudyResult,
    angle: &PdfStudyResult,
) -> Result<(), CliError> {
    let rows = [range, angle].into_iter().flat_map(|r| {
        r.nonlinear
            .iter()
            .zip(&r.linearized)
            .enumerate()
            .map(|(i, (n, l))| PdfRow {
                sample_id: i,
                nonlinear_value: *n,
                linearized_value: *l,
                quantity: r.quantity.name(),
            })
    });
    write_csv(path, &header, rows)
}

#[derive(Serialize)]
struct MeshRow {
    dx_m: f64,
    dy_m: f64,
    range_err_m: f64,
    angle_err_rad: f64,
}

pub fn write_mesh(path: &Path, header: Vec<String>, mesh: &MeshStudyResult) -> Result<(), CliError> {
    let rows = mesh.ys.iter().enumerate().flat_map(|(iy, y)| {
        mesh.xs.iter().enumerate().map(move |(ix, x)| MeshRow {
            dx_m: *x,
            dy_m: *y,
            range_err_m: mesh.range_at(ix, iy),
            angle_err_rad: mesh.angle_at(ix, iy),
        })
    });
    write_csv(path, &header, rows)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: &'static str,
    pub csv_schema_version: u32,
    pub config_schema_version: u32,
    pub seed: Option<u64>,
    /// Effective configuration after the environment seed override.
    pub config: Option<serde_json::Value>,
    pub parameters: serde_json::Value,
    pub schemes: Vec<String>,
    pub mode: Option<String>,
    pub gate: Option<bool>,
    pub out_dir: String,
    pub outputs: Vec<String>,
    pub failures: Vec<String>,
    pub wall_clock_s: f64,
}

/// Writes through a temporary file in the same directory and renames it.
pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let path = dir.join("manifest.json");
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    serde_json::to_writer_pretty(&mut tmp, manifest).map_err(|e| io_err(&path, e))?;
    tmp.write_all(b"\n").map_err(|e| io_err(&path, e))?;
    tmp.persist(&path).map_err(|e| io_err(&path, e.error))?;
    Ok(())
}

pub fn relative(dir: &Path, paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
        .collect()
}
